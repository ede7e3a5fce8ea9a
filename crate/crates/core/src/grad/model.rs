//! The ViG forward pass recorded on a tape.

use crate::bigla::ScanImpl;
use crate::block::{BlockParams, Mixer, NORM_EPS};
use crate::error::{Error, Result};
use crate::model::{ViGConfig, ViGParams, PATCH_SIZE, PATCH_STAGE1, PATCH_STAGE2};
use crate::tensor::Tensor;

use super::{Tape, Var};

/// Tape handles for one recorded forward pass.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    /// One leaf per parameter tensor, in canonical order.
    pub params: Vec<Var>,
    pub logits: Var,
}

fn block_taped(tape: &mut Tape, x: Var, p: &BlockParams, v: &[Var], mixer: Mixer, imp: ScanImpl) -> Result<Var> {
    let [norm1, dw_f, dw_b, w_q, w_k, w_v, g_w1, g_w2, g_b, w_o, g2_w, g2_b, norm2, f_gate, f_up, f_down] = v[..] else {
        return Err(Error::shape("block_taped", format!("{} parameter handles", v.len())));
    };
    let [h, w, d] = tape.value(x).shape()[..] else {
        return Err(Error::shape("block_taped", format!("{:?}", tape.value(x).shape())));
    };
    let t = h * w;
    let xn = tape.rmsnorm(x, norm1, NORM_EPS)?;
    let local = tape.dwconv3x3(xn, dw_f, dw_b)?;
    let local = tape.reshape(local, [t, d])?;
    let mixed = match mixer {
        Mixer::Full => {
            let q = tape.matmul(local, w_q)?;
            let k = tape.matmul(local, w_k)?;
            let vv = tape.matmul(local, w_v)?;
            let z = tape.matmul(local, g_w1)?;
            let z = tape.matmul(z, g_w2)?;
            let z = tape.add_row(z, g_b)?;
            let alpha = tape.gate(z, p.bigla.core.gate.gate.tau);
            let o = tape.bigla_scan(q, k, vv, alpha, p.bigla.core.heads, imp)?;
            let global = tape.matmul(o, w_o)?;
            let g = tape.matmul(local, g2_w)?;
            let g = tape.add_row(g, g2_b)?;
            let g = tape.sigmoid(g);
            tape.blend(g, local, global)?
        }
        Mixer::LocalOnly => local,
    };
    let mixed = tape.reshape(mixed, [h, w, d])?;
    let y = tape.add(x, mixed)?;
    let yn = tape.rmsnorm(y, norm2, NORM_EPS)?;
    let flat = tape.reshape(yn, [t, d])?;
    let a = tape.matmul(flat, f_gate)?;
    let a = tape.silu(a);
    let b = tape.matmul(flat, f_up)?;
    let hidden = tape.mul(a, b)?;
    let f = tape.matmul(hidden, f_down)?;
    let f = tape.reshape(f, [h, w, d])?;
    tape.add(y, f)
}

/// Records the full forward pass. With `ScanImpl::Fused { chunk: DEFAULT_CHUNK }`
/// the logits are bitwise equal to [`crate::model::vig_forward`].
pub fn vig_forward_taped(tape: &mut Tape, img: &Tensor, p: &ViGParams, config: &ViGConfig, imp: ScanImpl) -> Result<ModelGraph> {
    if img.shape() != [config.image_height, config.image_width, 3] {
        return Err(Error::InvalidArgument(format!(
            "image {:?}, model expects {}×{}×3",
            img.shape(),
            config.image_height,
            config.image_width
        )));
    }
    let params: Vec<Var> = p.named_tensors().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let input = tape.leaf(img.clone());
    let [p1w, p1b, p2w, p2b, pos] = params[..5] else { unreachable!() };
    let s1 = tape.conv2d(input, p1w, p1b, PATCH_STAGE1)?;
    let s1 = tape.silu(s1);
    let tokens = tape.conv2d(s1, p2w, p2b, PATCH_STAGE2)?;
    let (gh, gw, d) = (config.image_height / PATCH_SIZE, config.image_width / PATCH_SIZE, config.dim);
    let flat = tape.reshape(tokens, [gh * gw, d])?;
    let flat = tape.add(flat, pos)?;
    let mut x = tape.reshape(flat, [gh, gw, d])?;
    let per_block = BlockParams::named_count();
    for (i, b) in p.blocks.iter().enumerate() {
        let vars = &params[5 + i * per_block..5 + (i + 1) * per_block];
        x = block_taped(tape, x, b, vars, config.mixer, imp)?;
    }
    let n = params.len();
    let [norm, head_w, head_b] = params[n - 3..] else { unreachable!() };
    let xn = tape.rmsnorm(x, norm, NORM_EPS)?;
    let pooled = tape.mean_rows(xn);
    let pooled = tape.reshape(pooled, [1, d])?;
    let logits = tape.matmul(pooled, head_w)?;
    let logits = tape.add_row(logits, head_b)?;
    let logits = tape.reshape(logits, [config.num_classes])?;
    Ok(ModelGraph { params, logits })
}

/// Cross-entropy loss of one labelled image and its gradient with respect
/// to every parameter tensor, in canonical order.
pub fn loss_and_grad(p: &ViGParams, config: &ViGConfig, img: &Tensor, label: usize, imp: ScanImpl) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let graph = vig_forward_taped(&mut tape, img, p, config, imp)?;
    let loss = tape.cross_entropy(graph.logits, label)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).data()[0], graph.params.iter().map(|&v| grads.wrt(v)).collect()))
}

/// All parameters concatenated in canonical order.
pub fn flatten(p: &ViGParams) -> Vec<f64> {
    p.named_tensors().into_iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
}

/// Inverse of [`flatten`], using `template` for shapes.
pub fn unflatten(template: &ViGParams, flat: &[f64]) -> Result<ViGParams> {
    let mut p = template.clone();
    if flat.len() != p.num_params() {
        return Err(Error::shape("unflatten", format!("{} values for {} parameters", flat.len(), p.num_params())));
    }
    let mut off = 0;
    for t in p.tensors_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    Ok(p)
}
