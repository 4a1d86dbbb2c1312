//! Phase-one encoders: a 3D-patch vision transformer for the image volume
//! (E_i) and a per-feature affine lift for clinical data (E_c).

pub mod checkpoint;
pub mod clinical;
pub mod patch;
pub mod vit;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use clinical::{clinical_encode, ClinicalEncoderParams};
pub use patch::{patchify, PatchConfig};
pub use vit::{encode_patches, vit_encode, vit_forward, VitParams};
