use std::collections::BTreeMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const L2_NORM_EPS: f64 = 1e-12;
const GELU_COEFF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    NtXent {
        sim: Var,
        tau: T,
        probs: Vec<T>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Multiply-accumulate counts keyed by a caller-chosen label.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopLedger {
    entries: BTreeMap<String, u64>,
}

impl FlopLedger {
    pub fn record(&mut self, label: &str, macs: u64) {
        *self.entries.entry(label.to_string()).or_default() += macs;
    }

    pub fn get(&self, label: &str) -> u64 {
        self.entries.get(label).copied().unwrap_or(0)
    }

    pub fn entries(&self) -> &BTreeMap<String, u64> {
        &self.entries
    }
}

/// Linear record of a forward computation. Nodes are appended in evaluation
/// order, so the node list is already topologically sorted and backward is a
/// single reverse sweep.
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
    flops: FlopLedger,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for a leaf. `None` for constants and non-leaf nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn wrt(&self, v: Var) -> &Tensor<T> {
        self.get(v).expect("no gradient recorded for this variable")
    }
}

fn dims(t: &Tensor<impl Real>) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            flops: FlopLedger::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn flops(&self) -> &FlopLedger {
        &self.flops
    }

    pub fn record_flops(&mut self, label: &str, macs: u64) {
        self.flops.record(label, macs);
    }

    /// Constant input: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: lhs {:?} vs rhs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), rg, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a));
        let (n, k2) = dims(self.value(b));
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_nt: lhs {:?} vs rhs {:?} (transposed)",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            1,
            k as isize,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), rg, Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims(self.value(a));
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::matrix(n, m, out), rg, Op::Transpose(a)))
    }

    fn zip_with(&mut self, what: &str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(what, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        let value = self.value(a).map(|x| x * f);
        let rg = self.needs(&[a]);
        Ok(self.push(value, rg, Op::Scale(a, f)))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = dims(self.value(x));
        let (rr, rn) = dims(self.value(row));
        if rr != 1 || rn != n {
            return Err(Error::Shape(format!(
                "add_row: matrix {:?} vs row {:?}",
                self.value(x).shape(),
                self.value(row).shape()
            )));
        }
        let r = self.value(row).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += b;
            }
        }
        let rg = self.needs(&[x, row]);
        Ok(self.push(Tensor::matrix(m, n, out), rg, Op::AddRow(x, row)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of zero tensors".into()))?;
        let n = self.value(first).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = dims(self.value(p));
            if pn != n {
                return Err(Error::Shape(format!(
                    "concat_rows: {:?} vs {:?}",
                    self.value(first).shape(),
                    self.value(p).shape()
                )));
            }
            rows += pm;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.needs(parts);
        Ok(self.push(Tensor::matrix(rows, n, out), rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum::<T>() / T::from_f64(v.len() as f64);
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Mean(a)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.needs(&[a]);
        Ok(self.push(value, rg, Op::Relu(a)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let c = T::from_f64(SQRT_2_OVER_PI);
        let k = T::from_f64(GELU_COEFF);
        let half = T::from_f64(0.5);
        let value = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.needs(&[a]);
        Ok(self.push(value, rg, Op::Gelu(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        let rg = self.needs(&[a]);
        Ok(self.push(value, rg, Op::Sigmoid(a)))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "softmax_rows: non-finite entry in {:?} input",
                v.shape()
            )));
        }
        let (m, n) = dims(v);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().copied().fold(row[0], T::max);
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x = *x / z;
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::matrix(m, n, out), rg, Op::SoftmaxRows(a)))
    }

    /// Per-row layer normalization with learned `1×n` gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = dims(self.value(x));
        for p in [gamma, beta] {
            if dims(self.value(p)) != (1, n) {
                return Err(Error::Shape(format!(
                    "layer_norm_rows: input {:?} vs affine {:?}",
                    self.value(x).shape(),
                    self.value(p).shape()
                )));
            }
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let nf = T::from_f64(n as f64);
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); m * n];
        let mut inv_std = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::matrix(m, n, out),
            rg,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims(self.value(x));
        let eps = T::from_f64(L2_NORM_EPS);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        let mut norms = vec![T::zero(); m];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let nrm = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            norms[i] = nrm;
            for j in 0..n {
                out[i * n + j] = row[j] / nrm;
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::matrix(m, n, out), rg, Op::L2NormalizeRows { x, norms }))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// evaluated in the overflow-free logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(Error::Shape(format!(
                "bce_with_logits: {} logits vs {} targets",
                z.len(),
                targets.len()
            )));
        }
        let targets: Vec<T> = targets.iter().map(|&t| T::from_f64(t)).collect();
        let total: T = z
            .data()
            .iter()
            .zip(&targets)
            .map(|(&z, &t)| z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        let loss = total / T::from_f64(targets.len() as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(Tensor::scalar(loss), rg, Op::BceWithLogits { logits, targets }))
    }

    /// Normalized-temperature cross-entropy over a `2B×2B` similarity
    /// matrix whose rows `i` and `i+B` (mod 2B) are positive pairs. Each row
    /// is a `2B−1`-way classification over all other rows. Returns the mean
    /// over the `2B` anchors.
    pub fn nt_xent(&mut self, sim: Var, tau: f64) -> Result<Var> {
        let (m, n) = dims(self.value(sim));
        if m != n || m % 2 != 0 {
            return Err(Error::Shape(format!(
                "nt_xent: similarity must be square with even size, got {:?}",
                self.value(sim).shape()
            )));
        }
        if m < 4 {
            return Err(Error::Contract(
                "nt_xent needs a batch of at least 2 pairs (no negatives otherwise)".into(),
            ));
        }
        if !(tau > 0.0) {
            return Err(Error::Contract(format!("temperature must be > 0, got {tau}")));
        }
        let b = m / 2;
        let inv_tau = T::from_f64(1.0 / tau);
        let s = self.value(sim).data();
        let mut probs = vec![T::zero(); m * m];
        let mut total = T::zero();
        for i in 0..m {
            let pos = (i + b) % m;
            let logit = |j: usize| s[i * m + j] * inv_tau;
            let mx = (0..m).filter(|&j| j != i).map(logit).fold(logit(pos), T::max);
            let mut z = T::zero();
            for j in (0..m).filter(|&j| j != i) {
                let e = (logit(j) - mx).exp();
                probs[i * m + j] = e;
                z += e;
            }
            for j in 0..m {
                probs[i * m + j] = probs[i * m + j] / z;
            }
            total += -(logit(pos) - mx) + z.ln();
        }
        let loss = total / T::from_f64(m as f64);
        let rg = self.needs(&[sim]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::NtXent {
                sim,
                tau: T::from_f64(tau),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar. Every differentiable leaf gets a
    /// gradient, zero when it is not connected to `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => {
                    let shape = node.value.shape().to_vec();
                    Some(match g {
                        Some(data) => Tensor::new(shape, data).expect("gradient shape"),
                        None => Tensor::zeros(&shape),
                    })
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(val(*a));
                let n = val(*b).cols();
                if rg(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    // dA = dC · Bᵀ
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, val(*b).data(), 1, n as isize, T::one(), ga, k as isize, 1);
                }
                if rg(*b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    // dB = Aᵀ · dC
                    T::gemm(k, m, n, T::one(), val(*a).data(), 1, k as isize, g, n as isize, 1, T::one(), gb, n as isize, 1);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims(val(*a));
                let n = val(*b).rows();
                if rg(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    // dA = dC · B
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, val(*b).data(), k as isize, 1, T::one(), ga, k as isize, 1);
                }
                if rg(*b) {
                    let gb = accumulate(&mut grads[b.0], n * k);
                    // dB = dCᵀ · A
                    T::gemm(n, m, k, T::one(), g, 1, n as isize, val(*a).data(), k as isize, 1, T::one(), gb, k as isize, 1);
                }
            }
            Op::Transpose(a) => {
                if rg(*a) {
                    let (m, n) = dims(val(*a));
                    let ga = accumulate(&mut grads[a.0], m * n);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if rg(*a) {
                    for (d, &x) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if rg(*b) {
                    for (d, &x) in accumulate(&mut grads[b.0], g.len()).iter_mut().zip(g) {
                        *d += sign * x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let other = val(*b).data();
                    for ((d, &x), &o) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g).zip(other) {
                        *d += x * o;
                    }
                }
                if rg(*b) {
                    let other = val(*a).data();
                    for ((d, &x), &o) in accumulate(&mut grads[b.0], g.len()).iter_mut().zip(g).zip(other) {
                        *d += x * o;
                    }
                }
            }
            Op::Scale(a, f) => {
                if rg(*a) {
                    for (d, &x) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g) {
                        *d += x * *f;
                    }
                }
            }
            Op::AddRow(x, row) => {
                let n = val(*row).cols();
                if rg(*x) {
                    for (d, &v) in accumulate(&mut grads[x.0], g.len()).iter_mut().zip(g) {
                        *d += v;
                    }
                }
                if rg(*row) {
                    let gr = accumulate(&mut grads[row.0], n);
                    for chunk in g.chunks(n) {
                        for (d, &v) in gr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).len();
                    if rg(*p) {
                        for (d, &v) in accumulate(&mut grads[p.0], len).iter_mut().zip(&g[offset..offset + len]) {
                            *d += v;
                        }
                    }
                    offset += len;
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if rg(*a) {
                    let len = val(*a).len();
                    let scale = if matches!(node.op, Op::Mean(_)) {
                        g[0] / T::from_f64(len as f64)
                    } else {
                        g[0]
                    };
                    for d in accumulate(&mut grads[a.0], len).iter_mut() {
                        *d += scale;
                    }
                }
            }
            Op::Relu(a) => {
                if rg(*a) {
                    let x = val(*a).data();
                    for ((d, &gv), &xv) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g).zip(x) {
                        if xv > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if rg(*a) {
                    let c = T::from_f64(SQRT_2_OVER_PI);
                    let k = T::from_f64(GELU_COEFF);
                    let half = T::from_f64(0.5);
                    let three = T::from_f64(3.0);
                    let x = val(*a).data();
                    for ((d, &gv), &xv) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g).zip(x) {
                        let t = (c * (xv + k * xv * xv * xv)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * xv * xv);
                        *d += gv * (half * (T::one() + t) + half * xv * dt);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if rg(*a) {
                    let y = node.value.data();
                    for ((d, &gv), &yv) in accumulate(&mut grads[a.0], g.len()).iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (T::one() - yv);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if rg(*a) {
                    let n = node.value.cols();
                    let y = node.value.data();
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((drow, grow), yrow) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = val(*gamma).cols();
                let nf = T::from_f64(n as f64);
                let gm = val(*gamma).data();
                if rg(*gamma) {
                    let gg = accumulate(&mut grads[gamma.0], n);
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if rg(*beta) {
                    let gb = accumulate(&mut grads[beta.0], n);
                    for grow in g.chunks(n) {
                        for j in 0..n {
                            gb[j] += grow[j];
                        }
                    }
                }
                if rg(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for (i, ((drow, grow), hrow)) in gx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..n {
                            let dh = grow[j] * gm[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh = mean_dh / nf;
                        mean_dh_h = mean_dh_h / nf;
                        for j in 0..n {
                            let dh = grow[j] * gm[j];
                            drow[j] += inv_std[i] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if rg(*x) {
                    let n = val(*x).cols();
                    let src = val(*x).data();
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for (i, ((drow, grow), xrow)) in gx.chunks_mut(n).zip(g.chunks(n)).zip(src.chunks(n)).enumerate() {
                        let nrm = norms[i];
                        let dot: T = grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum();
                        let cube = nrm * nrm * nrm;
                        for j in 0..n {
                            drow[j] += grow[j] / nrm - xrow[j] * dot / cube;
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if rg(*logits) {
                    let z = val(*logits).data();
                    let scale = g[0] / T::from_f64(targets.len() as f64);
                    for ((d, &zv), &t) in accumulate(&mut grads[logits.0], z.len()).iter_mut().zip(z).zip(targets) {
                        *d += scale * (sigmoid(zv) - t);
                    }
                }
            }
            Op::NtXent { sim, tau, probs } => {
                if rg(*sim) {
                    let m = val(*sim).rows();
                    let b = m / 2;
                    let scale = g[0] / (*tau * T::from_f64(m as f64));
                    let gs = accumulate(&mut grads[sim.0], m * m);
                    for i in 0..m {
                        let pos = (i + b) % m;
                        for j in 0..m {
                            if j == i {
                                continue;
                            }
                            let indicator = if j == pos { T::one() } else { T::zero() };
                            gs[i * m + j] += scale * (probs[i * m + j] - indicator);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec())
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let i = t.constant(Tensor::eye(2));
        let ia = t.matmul(i, a).unwrap();
        assert_eq!(t.value(ia), t.value(a));

        let b = t.constant(mat(2, 1, &[5.0, 6.0]));
        let ab = t.matmul(a, b).unwrap();
        assert_eq!(t.value(ab).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[4, 5]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 5]"), "{err}");
    }

    #[test]
    fn softmax_rows_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(mat(3, 2, &[0.0, 0.0, 0.0, 3f64.ln(), 1000.0, 1000.0]));
        let y = t.softmax_rows(x).unwrap();
        let v = t.value(y).data();
        assert_eq!(&v[0..2], &[0.5, 0.5]);
        assert!((v[2] - 0.25).abs() < 1e-15 && (v[3] - 0.75).abs() < 1e-15);
        assert_eq!(&v[4..6], &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(mat(1, 2, &[f64::NAN, 0.0]));
        assert!(matches!(t.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn backward_of_square_sum() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::scalar(3.0));
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[6.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::scalar(2.0));
        let other = t.param(mat(1, 3, &[1.0, 2.0, 3.0]));
        let loss = t.scale(x, 4.0).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[4.0]);
        assert_eq!(g.wrt(other).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(Tensor::scalar(2.0));
        let x = t.param(Tensor::scalar(5.0));
        let y = t.mul(c, x).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x).data(), &[2.0]);
    }

    #[test]
    fn nt_xent_uniform_case_is_ln_3() {
        let mut t = Tape::<f64>::new();
        let s = t.constant(Tensor::filled(&[4, 4], 1.0));
        let l = t.nt_xent(s, 1.0).unwrap();
        assert!((t.value(l).item() - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn nt_xent_requires_two_pairs() {
        let mut t = Tape::<f64>::new();
        let s = t.constant(Tensor::filled(&[2, 2], 1.0));
        assert!(matches!(t.nt_xent(s, 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn flop_ledger_accumulates() {
        let mut t = Tape::<f64>::new();
        t.record_flops("scores", 10);
        t.record_flops("scores", 5);
        assert_eq!(t.flops().get("scores"), 15);
        assert_eq!(t.flops().get("missing"), 0);
    }
}
