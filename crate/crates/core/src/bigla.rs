//! Bidirectional gated linear attention.
//!
//! Both directions share the `q`, `k`, `v` projections and the first gate
//! factor; only the second gate factor and bias are widened to `2·d_k` so
//! each direction gets its own forget gate. Outputs are averaged.

use rand::Rng;

use crate::attention::AttnParams;
use crate::error::{Error, Result};
use crate::gla::{gla_forward, GateParams, GlaParams, HeadLayout};
use crate::kernels::{gate_scalar, MatMut};
use crate::scan::{self, Direction, ScanInputs, ScanMemory};
use crate::tensor::{matmul, Tensor};

/// Block length used by the fused scan unless told otherwise.
pub const DEFAULT_CHUNK: usize = 64;

/// Direction-wise gate: a [`GateParams`] of width `2·d_k` whose first
/// `d_k` columns drive the forward scan and last `d_k` the backward scan.
#[derive(Clone, Debug, PartialEq)]
pub struct BiGateParams {
    pub gate: GateParams,
}

impl BiGateParams {
    pub fn new(gate: GateParams) -> Result<Self> {
        if gate.width() % 2 != 0 {
            return Err(Error::shape("BiGateParams", format!("odd gate width {}", gate.width())));
        }
        Ok(Self { gate })
    }

    pub fn init<R: Rng + ?Sized>(d: usize, key_dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            gate: GateParams::init(d, 2 * key_dim, std, rng),
        }
    }

    pub fn key_dim(&self) -> usize {
        self.gate.width() / 2
    }

    pub fn num_params(&self) -> usize {
        self.gate.num_params()
    }
}

/// Gate values `(α→, α←)`, each `T × d_k`.
pub fn compute_bigates(x: &Tensor, g: &BiGateParams) -> Result<(Tensor, Tensor)> {
    let z = g.gate.preactivation(x)?;
    let all = z.map(|v| gate_scalar(v, g.gate.tau));
    let dk = g.key_dim();
    Ok((all.cols_range(0, dk)?, all.cols_range(dk, dk)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiGlaParams {
    pub attn: AttnParams,
    pub gate: BiGateParams,
    pub heads: usize,
}

impl BiGlaParams {
    pub fn new(attn: AttnParams, gate: BiGateParams, heads: usize) -> Result<Self> {
        if gate.key_dim() != attn.key_dim() || gate.gate.w1.shape()[0] != attn.input_dim() {
            return Err(Error::shape(
                "BiGlaParams",
                format!("gate key dim {} vs projection {}", gate.key_dim(), attn.key_dim()),
            ));
        }
        if heads == 0 || attn.key_dim() % heads != 0 || attn.value_dim() % heads != 0 {
            return Err(Error::InvalidArgument(format!("{heads} heads do not divide the layer")));
        }
        Ok(Self { attn, gate, heads })
    }

    pub fn init<R: Rng + ?Sized>(layout: HeadLayout, std: f64, rng: &mut R) -> Self {
        let d = layout.dim;
        Self {
            attn: AttnParams {
                w_q: Tensor::randn([d, layout.key_dim()], std, rng),
                w_k: Tensor::randn([d, layout.key_dim()], std, rng),
                w_v: Tensor::randn([d, layout.value_dim()], std, rng),
            },
            gate: BiGateParams::init(d, layout.key_dim(), std, rng),
            heads: layout.heads,
        }
    }

    pub fn num_params(&self) -> usize {
        self.attn.w_q.numel() + self.attn.w_k.numel() + self.attn.w_v.numel() + self.gate.num_params()
    }
}

/// How the two direction scans are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanImpl {
    /// Reversed copies and two independent forward scans.
    TwoPass,
    /// Single traversal over blocks of `chunk` positions.
    Fused { chunk: usize },
}

/// Bidirectional scan over projected inputs for every head. `alpha_bar`
/// is `T × 2·d_k` (forward half then backward half).
pub fn bigla_scan_heads(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    alpha_bar: &Tensor,
    heads: usize,
    imp: ScanImpl,
) -> Result<(Tensor, ScanMemory)> {
    let (t, dk) = q.dims2()?;
    let (tv, dv) = v.dims2()?;
    if k.shape() != q.shape() || tv != t || alpha_bar.shape() != [t, 2 * dk] {
        return Err(Error::shape(
            "bigla",
            format!(
                "q {:?}, k {:?}, v {:?}, gates {:?}",
                q.shape(),
                k.shape(),
                v.shape(),
                alpha_bar.shape()
            ),
        ));
    }
    if t == 0 {
        return Err(Error::shape("bigla", "empty sequence"));
    }
    if heads == 0 || dk % heads != 0 || dv % heads != 0 {
        return Err(Error::InvalidArgument(format!("{heads} heads do not divide the layer")));
    }
    if let Some(bad) = alpha_bar.data().iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
        return Err(Error::InvalidArgument(format!("bigla: gate value {bad} outside (0, 1]")));
    }
    let (hk, hv) = (dk / heads, dv / heads);
    let mut out = vec![0.0; t * dv];
    let mut mem = ScanMemory::default();
    for h in 0..heads {
        let io = ScanInputs {
            q: q.as_mat().cols_slice(h * hk, hk),
            k: k.as_mat().cols_slice(h * hk, hk),
            v: v.as_mat().cols_slice(h * hv, hv),
            alpha: alpha_bar.as_mat().cols_slice(h * hk, hk),
        };
        let alpha_bwd = alpha_bar.as_mat().cols_slice(dk + h * hk, hk);
        let mut o = MatMut::new(&mut out, t, dv).cols_slice(h * hv, hv);
        let m = match imp {
            ScanImpl::TwoPass => scan::bigla_two_pass_scan(io, alpha_bwd, None, &mut o),
            ScanImpl::Fused { chunk } => {
                if chunk == 0 {
                    return Err(Error::InvalidArgument("bigla: chunk must be ≥ 1".into()));
                }
                scan::bigla_fused_scan(io, alpha_bwd, chunk, &mut o, None)
            }
        };
        mem.merge_peak(m);
    }
    Ok((Tensor::new([t, dv], out)?.ensure_finite("bigla")?, mem))
}

fn project_and_gate(x: &Tensor, p: &BiGlaParams) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let (q, k, v) = p.attn.project(x)?;
    let z = p.gate.gate.preactivation(x)?;
    let alpha_bar = z.map(|v| gate_scalar(v, p.gate.gate.tau));
    Ok((q, k, v, alpha_bar))
}

/// Reference evaluation: `q`, `k`, `v` computed once, backward scan run on
/// materialized reversed copies, `o = (o→ + o←)/2`.
pub fn bigla_two_pass(x: &Tensor, p: &BiGlaParams) -> Result<Tensor> {
    let (q, k, v, a) = project_and_gate(x, p)?;
    Ok(bigla_scan_heads(&q, &k, &v, &a, p.heads, ScanImpl::TwoPass)?.0)
}

/// Fused evaluation: one traversal, no reversed copies. Also reports the
/// auxiliary memory the scan allocated.
pub fn bigla_fused(x: &Tensor, p: &BiGlaParams, chunk: usize) -> Result<(Tensor, ScanMemory)> {
    let (q, k, v, a) = project_and_gate(x, p)?;
    bigla_scan_heads(&q, &k, &v, &a, p.heads, ScanImpl::Fused { chunk })
}

/// Vim-style baseline: an independent forward GLA layer (`a`) and backward
/// GLA layer (`b`), averaged.
pub fn bigla_vim_baseline(x: &Tensor, a: &GlaParams, b: &GlaParams) -> Result<Tensor> {
    let f = gla_forward(x, a, Direction::Forward)?;
    let r = gla_forward(x, b, Direction::Backward)?;
    if f.shape() != r.shape() {
        return Err(Error::shape("bigla_vim_baseline", format!("{:?} vs {:?}", f.shape(), r.shape())));
    }
    Ok(f.add(&r)?.scale(0.5))
}

/// BiGLA plus output projection, as used inside the block.
#[derive(Clone, Debug, PartialEq)]
pub struct BiGlaLayer {
    pub core: BiGlaParams,
    pub w_o: Tensor,
}

impl BiGlaLayer {
    pub fn init<R: Rng + ?Sized>(layout: HeadLayout, std: f64, rng: &mut R) -> Self {
        Self {
            core: BiGlaParams::init(layout, std, rng),
            w_o: Tensor::randn([layout.value_dim(), layout.dim], std, rng),
        }
    }

    pub fn num_params(&self) -> usize {
        self.core.num_params() + self.w_o.numel()
    }

    pub fn forward(&self, x: &Tensor, imp: ScanImpl) -> Result<Tensor> {
        let (q, k, v, a) = project_and_gate(x, &self.core)?;
        let (o, _) = bigla_scan_heads(&q, &k, &v, &a, self.core.heads, imp)?;
        matmul(&o, &self.w_o)
    }
}
