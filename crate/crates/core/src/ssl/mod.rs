//! Self-supervised pretraining of the image encoder with two pretext tasks:
//! context restoration (undo patch swaps) and contrastive learning between
//! augmented views.

pub mod augment;
pub mod corrupt;
pub mod pretrain;

pub use augment::{augment_views, AugmentConfig, ViewPair};
pub use corrupt::{apply_plan, corrupt_context, restoration_loss, restoration_loss_tape, CorruptionPlan};
pub use pretrain::{
    contrastive_loss, init_ssl_params, pretrain_ssl, pretrain_step, prepare_item, ssl_objective, write_loss_curve,
    SslConfig, SslItem, SslRun, StepLosses,
};
