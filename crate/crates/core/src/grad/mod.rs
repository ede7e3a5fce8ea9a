//! Reverse-mode differentiation on a linear tape.
//!
//! Each tape entry stores its forward value and the op that produced it.
//! [`Tape::backward`] walks the entries once in reverse, applying each op's
//! adjoint.

mod check;
mod model;
pub mod scan;

pub use check::{finite_diff_check, sample_coordinates, FdReport, GRAD_FLOOR};
pub use model::{flatten, loss_and_grad, unflatten, vig_forward_taped, ModelGraph};

use crate::bigla::ScanImpl;
use crate::error::{Error, Result};
use crate::kernels::{gate_scalar, sigmoid_scalar};
use crate::scan::Direction;
use crate::tensor::{col2im, conv2d, dwconv3x3, im2col, matmul, rmsnorm, sigmoid, silu, ConvGeometry, Tensor};

use self::scan::{BiScanSaved, ScanCheckpoints};

/// Handle to a tape entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every kind of recorded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    AddRow,
    Scale,
    Sigmoid,
    Silu,
    Gate,
    RmsNorm,
    DwConv3x3,
    Conv2d,
    Reshape,
    Blend,
    MeanRows,
    GlaScan,
    BiGlaScan,
    CrossEntropy,
    Dot,
}

impl OpKind {
    pub const ALL: [OpKind; 19] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::Sigmoid,
        OpKind::Silu,
        OpKind::Gate,
        OpKind::RmsNorm,
        OpKind::DwConv3x3,
        OpKind::Conv2d,
        OpKind::Reshape,
        OpKind::Blend,
        OpKind::MeanRows,
        OpKind::GlaScan,
        OpKind::BiGlaScan,
        OpKind::CrossEntropy,
        OpKind::Dot,
    ];
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Silu(Var),
    Gate { z: Var, tau: f64 },
    RmsNorm { x: Var, gain: Var, eps: f64 },
    DwConv3x3 { x: Var, filters: Var, bias: Var },
    Conv2d { x: Var, weight: Var, bias: Var, geometry: ConvGeometry },
    Reshape(Var),
    Blend { gate: Var, a: Var, b: Var },
    MeanRows(Var),
    GlaScan { q: Var, k: Var, v: Var, alpha: Var, heads: usize, dir: Direction, saved: ScanCheckpoints },
    BiGlaScan { q: Var, k: Var, v: Var, alpha: Var, heads: usize, saved: BiScanSaved },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
    Dot { x: Var, weights: Tensor },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Silu(_) => OpKind::Silu,
            Op::Gate { .. } => OpKind::Gate,
            Op::RmsNorm { .. } => OpKind::RmsNorm,
            Op::DwConv3x3 { .. } => OpKind::DwConv3x3,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Blend { .. } => OpKind::Blend,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::GlaScan { .. } => OpKind::GlaScan,
            Op::BiGlaScan { .. } => OpKind::BiGlaScan,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Dot { .. } => OpKind::Dot,
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; entries the loss does not reach are absent.
#[derive(Clone, Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    /// Ops whose adjoint ran, in the order they ran.
    pub visited: Vec<OpKind>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).mul(self.value(b))?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let y = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(y, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = self.value(x).scale(s);
        self.push(y, Op::Scale(x, s))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let y = silu(self.value(x));
        self.push(y, Op::Silu(x))
    }

    /// Forget gate `sigmoid(z)^(1/tau)`.
    pub fn gate(&mut self, z: Var, tau: f64) -> Var {
        let y = self.value(z).map(|v| gate_scalar(v, tau));
        self.push(y, Op::Gate { z, tau })
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let y = rmsnorm(self.value(x), self.value(gain), eps)?;
        Ok(self.push(y, Op::RmsNorm { x, gain, eps }))
    }

    pub fn dwconv3x3(&mut self, x: Var, filters: Var, bias: Var) -> Result<Var> {
        let y = dwconv3x3(self.value(x), self.value(filters), self.value(bias))?;
        Ok(self.push(y, Op::DwConv3x3 { x, filters, bias }))
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, geometry: ConvGeometry) -> Result<Var> {
        let y = conv2d(self.value(x), self.value(weight), self.value(bias), geometry)?;
        Ok(self.push(y, Op::Conv2d { x, weight, bias, geometry }))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    /// `gate ⊙ a + (1 − gate) ⊙ b`.
    pub fn blend(&mut self, gate: Var, a: Var, b: Var) -> Result<Var> {
        let (g, av, bv) = (self.value(gate), self.value(a), self.value(b));
        same_shape(g, av, "blend")?;
        same_shape(g, bv, "blend")?;
        let data = g
            .data()
            .iter()
            .zip(av.data())
            .zip(bv.data())
            .map(|((g, l), o)| g * l + (1.0 - g) * o)
            .collect();
        let y = Tensor::new(g.shape().to_vec(), data)?;
        Ok(self.push(y, Op::Blend { gate, a, b }))
    }

    /// Mean over all leading axes, leaving the last.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let y = self.value(x).mean_rows();
        self.push(y, Op::MeanRows(x))
    }

    /// Multi-head single-direction GLA scan, checkpointed every `chunk` steps.
    pub fn gla_scan(&mut self, q: Var, k: Var, v: Var, alpha: Var, heads: usize, dir: Direction, chunk: usize) -> Result<Var> {
        let (y, saved) = scan::gla_scan_taped(self.value(q), self.value(k), self.value(v), self.value(alpha), heads, dir, chunk)?;
        Ok(self.push(y, Op::GlaScan { q, k, v, alpha, heads, dir, saved }))
    }

    /// Multi-head bidirectional scan; `alpha` is `T × 2·d_k`.
    pub fn bigla_scan(&mut self, q: Var, k: Var, v: Var, alpha: Var, heads: usize, imp: ScanImpl) -> Result<Var> {
        let (y, saved, _) = scan::bigla_scan_taped(self.value(q), self.value(k), self.value(v), self.value(alpha), heads, imp)?;
        Ok(self.push(y, Op::BiGlaScan { q, k, v, alpha, heads, saved }))
    }

    /// `−log softmax(logits)[label]` as a one-element tensor.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (loss, probs) = softmax_xent(self.value(logits).data(), label)?;
        Ok(self.push(Tensor::new([1], vec![loss])?, Op::CrossEntropy { logits, label, probs }))
    }

    /// `Σ x ⊙ weights` for a constant `weights`.
    pub fn dot(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        same_shape(self.value(x), &weights, "dot")?;
        let s = self.value(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::new([1], vec![s])?, Op::Dot { x, weights }))
    }

    /// Gradients of a one-element `loss` with respect to every entry.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss has shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));
        let mut visited = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            visited.push(node.op.kind());
            for (var, g) in self.adjoint(node, &dy)? {
                accumulate(&mut grads, var, g)?;
            }
            grads[i] = Some(dy);
        }
        Ok(Grads {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            visited,
        })
    }

    fn adjoint(&self, node: &Node, dy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let y = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let da = matmul(dy, &self.value(*b).transpose()?)?;
                let db = matmul(&self.value(*a).transpose()?, dy)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Mul(a, b) => vec![(*a, dy.mul(self.value(*b))?), (*b, dy.mul(self.value(*a))?)],
            Op::AddRow(x, bias) => {
                let db = col_sums(dy).reshape(self.value(*bias).shape().to_vec())?;
                vec![(*x, dy.clone()), (*bias, db)]
            }
            Op::Scale(x, s) => vec![(*x, dy.scale(*s))],
            Op::Sigmoid(x) => vec![(*x, dy.zip_with(y, "sigmoid'", |g, s| g * s * (1.0 - s))?)],
            Op::Silu(x) => {
                let dx = dy.zip_with(self.value(*x), "silu'", |g, z| {
                    let s = sigmoid_scalar(z);
                    g * s * (1.0 + z * (1.0 - s))
                })?;
                vec![(*x, dx)]
            }
            Op::Gate { z, tau } => {
                let zv = self.value(*z);
                let data = dy
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(zv.data())
                    .map(|((g, a), z)| g * a * (1.0 - sigmoid_scalar(*z)) / tau)
                    .collect();
                vec![(*z, Tensor::new(zv.shape().to_vec(), data)?)]
            }
            Op::RmsNorm { x, gain, eps } => {
                let (dx, dg) = rmsnorm_backward(self.value(*x), self.value(*gain), *eps, dy);
                vec![(*x, dx), (*gain, dg)]
            }
            Op::DwConv3x3 { x, filters, bias } => {
                let (dx, df, db) = dwconv3x3_backward(self.value(*x), self.value(*filters), dy);
                let db = db.reshape(self.value(*bias).shape().to_vec())?;
                vec![(*x, dx), (*filters, df), (*bias, db)]
            }
            Op::Conv2d { x, weight, bias, geometry } => {
                let (dx, dw, db) = conv2d_backward(self.value(*x), self.value(*weight), *geometry, dy)?;
                let db = db.reshape(self.value(*bias).shape().to_vec())?;
                vec![(*x, dx), (*weight, dw), (*bias, db)]
            }
            Op::Reshape(x) => vec![(*x, dy.clone().reshape(self.value(*x).shape().to_vec())?)],
            Op::Blend { gate, a, b } => {
                let (g, av, bv) = (self.value(*gate), self.value(*a), self.value(*b));
                let dg = dy.mul(&av.sub(bv)?)?;
                let da = dy.mul(g)?;
                let db = dy.zip_with(g, "blend'", |d, g| d * (1.0 - g))?;
                vec![(*gate, dg), (*a, da), (*b, db)]
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let (rows, cols) = xv.rows_cols();
                let inv = 1.0 / rows as f64;
                let dx = Tensor::from_fn(xv.shape().to_vec(), |i| dy.data()[i % cols] * inv);
                vec![(*x, dx)]
            }
            Op::GlaScan { q, k, v, alpha, heads, dir, saved } => {
                let g = scan::gla_scan_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    self.value(*alpha),
                    *heads,
                    *dir,
                    saved,
                    dy,
                )?;
                vec![(*q, g.dq), (*k, g.dk), (*v, g.dv), (*alpha, g.dalpha)]
            }
            Op::BiGlaScan { q, k, v, alpha, heads, saved } => {
                let g = scan::bigla_scan_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    self.value(*alpha),
                    *heads,
                    saved,
                    dy,
                )?;
                vec![(*q, g.dq), (*k, g.dk), (*v, g.dv), (*alpha, g.dalpha)]
            }
            Op::CrossEntropy { logits, label, probs } => {
                let s = dy.data()[0];
                let mut d: Vec<f64> = probs.iter().map(|p| s * p).collect();
                d[*label] -= s;
                vec![(*logits, Tensor::new(self.value(*logits).shape().to_vec(), d)?)]
            }
            Op::Dot { x, weights } => vec![(*x, weights.scale(dy.data()[0]))],
        })
    }
}

fn col_sums(t: &Tensor) -> Tensor {
    let (_, cols) = t.rows_cols();
    let mut out = vec![0.0; cols];
    for row in t.data().chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new([cols], out).expect("length matches")
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Loss `−log softmax(logits)[label]` and the probabilities.
pub(crate) fn softmax_xent(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!("label {label} out of range for {} classes", logits.len())));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy" });
    }
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (logits[label] - m);
    Ok((loss, exps.iter().map(|e| e / total).collect()))
}

fn rmsnorm_backward(x: &Tensor, gain: &Tensor, eps: f64, dy: &Tensor) -> (Tensor, Tensor) {
    let (rows, d) = x.rows_cols();
    let mut dx = vec![0.0; x.numel()];
    let mut dg = vec![0.0; d];
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let gr = &dy.data()[r * d..(r + 1) * d];
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        let mut proj = 0.0;
        for ((g, xv), w) in gr.iter().zip(xr).zip(gain.data()) {
            proj += g * w * xv;
        }
        let coef = inv * inv * inv * proj / d as f64;
        for (i, ((g, xv), w)) in gr.iter().zip(xr).zip(gain.data()).enumerate() {
            dx[r * d + i] = inv * w * g - coef * xv;
            dg[i] += g * xv * inv;
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("shape preserved"),
        Tensor::new(gain.shape().to_vec(), dg).expect("shape preserved"),
    )
}

/// The input gradient is a correlation of `dy` with the flipped kernel.
fn dwconv3x3_backward(x: &Tensor, filters: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [h, w, c] = x.shape()[..] else { unreachable!("checked in forward") };
    let (xd, fd, gd) = (x.data(), filters.data(), dy.data());
    let mut dx = vec![0.0; h * w * c];
    let mut df = vec![0.0; 9 * c];
    let mut db = vec![0.0; c];
    for oy in 0..h {
        for ox in 0..w {
            let g = &gd[(oy * w + ox) * c..][..c];
            for (b, gv) in db.iter_mut().zip(g) {
                *b += gv;
            }
            for i in 0..3 {
                let iy = oy as isize + i as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for j in 0..3 {
                    let ix = ox as isize + j as isize - 1;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * c;
                    let tap = (i * 3 + j) * c;
                    for ch in 0..c {
                        df[tap + ch] += g[ch] * xd[src + ch];
                        dx[src + ch] += g[ch] * fd[tap + ch];
                    }
                }
            }
        }
    }
    (
        Tensor::new([h, w, c], dx).expect("shape preserved"),
        Tensor::new([3, 3, c], df).expect("shape preserved"),
        Tensor::new([c], db).expect("shape preserved"),
    )
}

fn conv2d_backward(x: &Tensor, weight: &Tensor, geometry: ConvGeometry, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let [h, w, cin] = x.shape()[..] else { unreachable!("checked in forward") };
    let k = geometry.kernel;
    let cout = weight.shape()[3];
    let (cols, oh, ow) = im2col(x.data(), h, w, cin, geometry);
    let cols = Tensor::new([oh * ow, k * k * cin], cols)?;
    let g = dy.clone().reshape([oh * ow, cout])?;
    let dw = matmul(&cols.transpose()?, &g)?.reshape(weight.shape().to_vec())?;
    let db = col_sums(&g);
    let w2 = weight.clone().reshape([k * k * cin, cout])?;
    let dcols = matmul(&g, &w2.transpose()?)?;
    let dx = Tensor::new([h, w, cin], col2im(dcols.data(), h, w, cin, geometry))?;
    Ok((dx, dw, db))
}

/// Standalone cross-entropy: loss and `softmax(logits) − onehot(label)`.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let (loss, mut probs) = softmax_xent(logits.data(), label)?;
    probs[label] -= 1.0;
    Ok((loss, Tensor::new(logits.shape().to_vec(), probs)?))
}

#[cfg(test)]
mod tests;
