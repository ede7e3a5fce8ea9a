//! The ViG block: pre-norm spatial mixing (depthwise conv local branch,
//! BiGLA global branch, 2D gating blend) followed by a pre-norm SwiGLU FFN.

use rand::Rng;

use crate::bigla::{BiGlaLayer, ScanImpl, DEFAULT_CHUNK};
use crate::error::{Error, Result};
use crate::gla::HeadLayout;
use crate::tensor::{dwconv3x3, matmul, rmsnorm, sigmoid, silu, Tensor};

pub const NORM_EPS: f64 = 1e-6;

/// SwiGLU hidden width: `8d/3` rounded up to a multiple of 8.
pub fn ffn_hidden(d: usize) -> usize {
    (8 * d).div_ceil(3).div_ceil(8) * 8
}

/// Which branches feed the blend.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mixer {
    /// `G⊙O_local + (1−G)⊙O_global`.
    #[default]
    Full,
    /// Ablation: gate pinned to 1, only the depthwise-conv branch survives.
    LocalOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub norm1: Tensor,
    pub norm2: Tensor,
    pub dw_filters: Tensor,
    pub dw_bias: Tensor,
    pub bigla: BiGlaLayer,
    pub gate2d_w: Tensor,
    pub gate2d_b: Tensor,
    pub ffn_gate: Tensor,
    pub ffn_up: Tensor,
    pub ffn_down: Tensor,
}

impl BlockParams {
    pub fn init<R: Rng + ?Sized>(layout: HeadLayout, std: f64, rng: &mut R) -> Self {
        let d = layout.dim;
        let f = ffn_hidden(d);
        Self {
            norm1: Tensor::full([d], 1.0),
            norm2: Tensor::full([d], 1.0),
            dw_filters: Tensor::randn([3, 3, d], std, rng),
            dw_bias: Tensor::zeros([d]),
            bigla: BiGlaLayer::init(layout, std, rng),
            gate2d_w: Tensor::randn([d, d], std, rng),
            gate2d_b: Tensor::zeros([1, d]),
            ffn_gate: Tensor::randn([d, f], std, rng),
            ffn_up: Tensor::randn([d, f], std, rng),
            ffn_down: Tensor::randn([f, d], std, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.norm1.numel()
    }

    /// Number of entries in [`Self::named_tensors`].
    pub const fn named_count() -> usize {
        16
    }

    /// Every learnable tensor with a stable name, in canonical order.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let g = &self.bigla.core;
        vec![
            ("norm1", &self.norm1),
            ("dw_filters", &self.dw_filters),
            ("dw_bias", &self.dw_bias),
            ("w_q", &g.attn.w_q),
            ("w_k", &g.attn.w_k),
            ("w_v", &g.attn.w_v),
            ("gate_w1", &g.gate.gate.w1),
            ("gate_w2", &g.gate.gate.w2),
            ("gate_b", &g.gate.gate.bias),
            ("w_o", &self.bigla.w_o),
            ("gate2d_w", &self.gate2d_w),
            ("gate2d_b", &self.gate2d_b),
            ("norm2", &self.norm2),
            ("ffn_gate", &self.ffn_gate),
            ("ffn_up", &self.ffn_up),
            ("ffn_down", &self.ffn_down),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let g = &mut self.bigla.core;
        vec![
            &mut self.norm1,
            &mut self.dw_filters,
            &mut self.dw_bias,
            &mut g.attn.w_q,
            &mut g.attn.w_k,
            &mut g.attn.w_v,
            &mut g.gate.gate.w1,
            &mut g.gate.gate.w2,
            &mut g.gate.gate.bias,
            &mut self.bigla.w_o,
            &mut self.gate2d_w,
            &mut self.gate2d_b,
            &mut self.norm2,
            &mut self.ffn_gate,
            &mut self.ffn_up,
            &mut self.ffn_down,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn grid(x: &Tensor, d: usize, op: &'static str) -> Result<(usize, usize)> {
    match x.shape()[..] {
        [h, w, c] if c == d && h * w > 0 => Ok((h, w)),
        _ => Err(Error::shape(op, format!("expected a non-empty H×W×{d} grid, got {:?}", x.shape()))),
    }
}

/// Intermediate results of the spatial mixer, exposed for tests.
#[derive(Clone, Debug)]
pub struct MixerParts {
    pub local: Tensor,
    pub global: Tensor,
    pub gate: Tensor,
    pub out: Tensor,
}

pub fn locality_injection_parts(x: &Tensor, p: &BlockParams, mixer: Mixer) -> Result<MixerParts> {
    let d = p.dim();
    let (h, w) = grid(x, d, "locality_injection")?;
    let t = h * w;
    let local = dwconv3x3(x, &p.dw_filters, &p.dw_bias)?.reshape([t, d])?;
    let (global, gate) = match mixer {
        Mixer::Full => {
            let global = p.bigla.forward(&local, ScanImpl::Fused { chunk: DEFAULT_CHUNK })?;
            let gate = sigmoid(&matmul(&local, &p.gate2d_w)?.add_row(&p.gate2d_b)?);
            (global, gate)
        }
        Mixer::LocalOnly => (Tensor::zeros([t, d]), Tensor::full([t, d], 1.0)),
    };
    let mut out = Vec::with_capacity(t * d);
    for ((g, l), o) in gate.data().iter().zip(local.data()).zip(global.data()) {
        out.push(g * l + (1.0 - g) * o);
    }
    Ok(MixerParts {
        out: Tensor::new([h, w, d], out)?,
        local,
        global,
        gate,
    })
}

/// `O_local = DWConv(x)`, `O_global = BiGLA(O_local)`,
/// `G = sigmoid(O_local W + b)`, `out = G⊙O_local + (1−G)⊙O_global`.
pub fn locality_injection(x: &Tensor, p: &BlockParams, mixer: Mixer) -> Result<Tensor> {
    Ok(locality_injection_parts(x, p, mixer)?.out)
}

/// `(silu(x W_gate) ⊙ x W_up) W_down`, applied token-wise.
pub fn swiglu_ffn(x: &Tensor, p: &BlockParams) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let (rows, d) = x.rows_cols();
    let flat = x.clone().reshape([rows, d])?;
    let hidden = silu(&matmul(&flat, &p.ffn_gate)?).mul(&matmul(&flat, &p.ffn_up)?)?;
    matmul(&hidden, &p.ffn_down)?.reshape(shape)
}

/// `y = x + mix(norm1(x))`, `out = y + ffn(norm2(y))`.
pub fn vig_block_forward(x: &Tensor, p: &BlockParams, mixer: Mixer) -> Result<Tensor> {
    grid(x, p.dim(), "vig_block_forward")?;
    let y = x.add(&locality_injection(&rmsnorm(x, &p.norm1, NORM_EPS)?, p, mixer)?)?;
    let out = y.add(&swiglu_ffn(&rmsnorm(&y, &p.norm2, NORM_EPS)?, p)?)?;
    out.ensure_finite("vig_block_forward")
}
