//! Adjoints of the gated scan, single-direction and bidirectional.
//!
//! Reverse-time recurrence for one direction, with `G_t = diag(α_t)`:
//!
//! ```text
//! dS_t    = carry + w·q_tᵀ dO_t
//! dq_t    = w·dO_t S_tᵀ
//! dk_t    = dS_t v_tᵀ          dv_t = k_t dS_t
//! dα_t    = rowsum(dS_t ⊙ S_{t-1})
//! carry  ← diag(α_t) dS_t
//! ```
//!
//! Forward passes keep only the state entering each block; the states
//! inside a block are recomputed when that block's adjoint runs.

use crate::bigla::ScanImpl;
use crate::error::{Error, Result};
use crate::kernels::{MatMut, MatRef};
use crate::scan::{self, step_state, BlockScratch, Direction, ScanInputs, ScanMemory};
use crate::tensor::Tensor;

/// Gradients with respect to the four scan inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanGrads {
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
    pub dalpha: Tensor,
}

/// Block-entry states saved by a single-direction forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanCheckpoints {
    pub chunk: usize,
    per_head: Vec<Vec<f64>>,
}

impl ScanCheckpoints {
    pub fn bytes(&self) -> usize {
        self.per_head.iter().map(|h| 8 * h.len()).sum()
    }
}

/// What a bidirectional forward pass kept for its adjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct BiScanSaved {
    pub imp: ScanImpl,
    /// Fused only: forward then backward block-entry states, per head.
    per_head: Vec<Vec<f64>>,
}

impl BiScanSaved {
    pub fn bytes(&self) -> usize {
        self.per_head.iter().map(|h| 8 * h.len()).sum()
    }
}

/// Dense per-head gradient buffers.
struct HeadGrads {
    dq: Vec<f64>,
    dk: Vec<f64>,
    dv: Vec<f64>,
}

impl HeadGrads {
    fn new(t: usize, hk: usize, hv: usize) -> Self {
        Self {
            dq: vec![0.0; t * hk],
            dk: vec![0.0; t * hk],
            dv: vec![0.0; t * hv],
        }
    }
}

/// Adjoint of one block whose positions in scan order are `pos`, entered
/// with state `entry`. `carry` holds `∂L/∂S` after the block on entry and
/// `∂L/∂S_entry` on return.
#[allow(clippy::too_many_arguments)]
fn adjoint_block(
    io: &ScanInputs<'_, f64>,
    pos: &[usize],
    entry: &[f64],
    d_out: MatRef<'_, f64>,
    weight: f64,
    carry: &mut [f64],
    g: &mut HeadGrads,
    dalpha: &mut [f64],
    states: &mut Vec<f64>,
) {
    let (dk, dv) = (io.key_dim(), io.value_dim());
    let n = dk * dv;
    let c = pos.len();
    states.clear();
    states.resize((c + 1) * n, 0.0);
    states[..n].copy_from_slice(entry);
    for (l, &p) in pos.iter().enumerate() {
        let (done, rest) = states.split_at_mut((l + 1) * n);
        let next = &mut rest[..n];
        next.copy_from_slice(&done[l * n..]);
        step_state(io, p, next);
    }

    for l in (0..c).rev() {
        let p = pos[l];
        let prev = &states[l * n..(l + 1) * n];
        let cur = &states[(l + 1) * n..(l + 2) * n];
        let go = d_out.row(p);
        let (qp, kp, vp, ap) = (io.q.row(p), io.k.row(p), io.v.row(p), io.alpha.row(p));
        for i in 0..dk {
            let srow = &cur[i * dv..(i + 1) * dv];
            let acc: f64 = go.iter().zip(srow).map(|(a, b)| a * b).sum();
            g.dq[p * dk + i] += weight * acc;
            let wq = weight * qp[i];
            for (cj, &gj) in carry[i * dv..(i + 1) * dv].iter_mut().zip(go) {
                *cj += wq * gj;
            }
        }
        for i in 0..dk {
            let crow = &carry[i * dv..(i + 1) * dv];
            g.dk[p * dk + i] += crow.iter().zip(vp).map(|(a, b)| a * b).sum::<f64>();
            dalpha[p * dk + i] += crow.iter().zip(&prev[i * dv..(i + 1) * dv]).map(|(a, b)| a * b).sum::<f64>();
            let ki = kp[i];
            for (dvj, &cj) in g.dv[p * dv..(p + 1) * dv].iter_mut().zip(crow) {
                *dvj += ki * cj;
            }
        }
        for (crow, &ai) in carry.chunks_exact_mut(dv).zip(ap) {
            crow.iter_mut().for_each(|x| *x *= ai);
        }
    }
}

fn check_inputs(q: &Tensor, k: &Tensor, v: &Tensor, alpha: &Tensor, gate_width: usize, heads: usize) -> Result<(usize, usize, usize)> {
    let (t, dk) = q.dims2()?;
    let (tv, dv) = v.dims2()?;
    if k.shape() != q.shape() || tv != t || alpha.shape() != [t, gate_width * dk] || t == 0 {
        return Err(Error::shape(
            "scan",
            format!("q {:?}, k {:?}, v {:?}, gates {:?}", q.shape(), k.shape(), v.shape(), alpha.shape()),
        ));
    }
    if heads == 0 || dk % heads != 0 || dv % heads != 0 {
        return Err(Error::InvalidArgument(format!("{heads} heads do not divide the layer")));
    }
    if let Some(bad) = alpha.data().iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
        return Err(Error::InvalidArgument(format!("scan: gate value {bad} outside (0, 1]")));
    }
    Ok((t, dk, dv))
}

fn head_io<'a>(q: &'a Tensor, k: &'a Tensor, v: &'a Tensor, alpha: MatRef<'a, f64>, h: usize, hk: usize, hv: usize) -> ScanInputs<'a, f64> {
    ScanInputs {
        q: q.as_mat().cols_slice(h * hk, hk),
        k: k.as_mat().cols_slice(h * hk, hk),
        v: v.as_mat().cols_slice(h * hv, hv),
        alpha,
    }
}

fn scatter_cols(dst: &mut [f64], dst_cols: usize, start: usize, src: &[f64], width: usize) {
    for (drow, srow) in dst.chunks_exact_mut(dst_cols).zip(src.chunks_exact(width)) {
        for (d, s) in drow[start..start + width].iter_mut().zip(srow) {
            *d += s;
        }
    }
}

fn scan_order_blocks(t: usize, chunk: usize, dir: Direction) -> Vec<Vec<usize>> {
    (0..t)
        .step_by(chunk)
        .map(|s| (s..(s + chunk).min(t)).map(|l| dir.position(l, t)).collect())
        .collect()
}

/// Multi-head single-direction scan that records block-entry states.
pub fn gla_scan_taped(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    alpha: &Tensor,
    heads: usize,
    dir: Direction,
    chunk: usize,
) -> Result<(Tensor, ScanCheckpoints)> {
    let (t, dk, dv) = check_inputs(q, k, v, alpha, 1, heads)?;
    if chunk == 0 {
        return Err(Error::InvalidArgument("scan: chunk must be ≥ 1".into()));
    }
    let chunk = chunk.min(t);
    let (hk, hv) = (dk / heads, dv / heads);
    let mut out = vec![0.0; t * dv];
    let mut per_head = Vec::with_capacity(heads);
    let mut scratch = BlockScratch::new(chunk, hk);
    for h in 0..heads {
        let io = head_io(q, k, v, alpha.as_mat().cols_slice(h * hk, hk), h, hk, hv);
        let mut state = vec![0.0; hk * hv];
        let mut saved = Vec::new();
        let mut o = MatMut::new(&mut out, t, dv).cols_slice(h * hv, hv);
        for pos in scan_order_blocks(t, chunk, dir) {
            saved.extend_from_slice(&state);
            scan::scan_block(&io, &pos, &mut state, true, Some((&mut o, 1.0)), &mut scratch);
        }
        per_head.push(saved);
    }
    Ok((Tensor::new([t, dv], out)?.ensure_finite("gla_scan")?, ScanCheckpoints { chunk, per_head }))
}

/// Adjoint of [`gla_scan_taped`].
#[allow(clippy::too_many_arguments)]
pub fn gla_scan_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    alpha: &Tensor,
    heads: usize,
    dir: Direction,
    saved: &ScanCheckpoints,
    d_out: &Tensor,
) -> Result<ScanGrads> {
    let (t, dk, dv) = check_inputs(q, k, v, alpha, 1, heads)?;
    let (hk, hv) = (dk / heads, dv / heads);
    let blocks = scan_order_blocks(t, saved.chunk, dir);
    if d_out.shape() != [t, dv] || saved.per_head.len() != heads || saved.per_head.iter().any(|s| s.len() != blocks.len() * hk * hv) {
        return Err(Error::shape("gla_scan_backward", format!("dO {:?} does not match the saved tape", d_out.shape())));
    }
    let mut grads = ScanGrads {
        dq: Tensor::zeros([t, dk]),
        dk: Tensor::zeros([t, dk]),
        dv: Tensor::zeros([t, dv]),
        dalpha: Tensor::zeros([t, dk]),
    };
    let mut states = Vec::new();
    for h in 0..heads {
        let io = head_io(q, k, v, alpha.as_mat().cols_slice(h * hk, hk), h, hk, hv);
        let d_o = d_out.as_mat().cols_slice(h * hv, hv);
        let mut g = HeadGrads::new(t, hk, hv);
        let mut da = vec![0.0; t * hk];
        let mut carry = vec![0.0; hk * hv];
        let n = hk * hv;
        for (b, pos) in blocks.iter().enumerate().rev() {
            let entry = &saved.per_head[h][b * n..(b + 1) * n];
            adjoint_block(&io, pos, entry, d_o, 1.0, &mut carry, &mut g, &mut da, &mut states);
        }
        scatter_head(&mut grads, h, hk, hv, &g, &da, 0, dk);
    }
    Ok(grads)
}

#[allow(clippy::too_many_arguments)]
fn scatter_head(grads: &mut ScanGrads, h: usize, hk: usize, hv: usize, g: &HeadGrads, da: &[f64], alpha_offset: usize, alpha_cols: usize) {
    let dk = grads.dq.shape()[1];
    let dv = grads.dv.shape()[1];
    scatter_cols(grads.dq.data_mut(), dk, h * hk, &g.dq, hk);
    scatter_cols(grads.dk.data_mut(), dk, h * hk, &g.dk, hk);
    scatter_cols(grads.dv.data_mut(), dv, h * hv, &g.dv, hv);
    scatter_cols(grads.dalpha.data_mut(), alpha_cols, alpha_offset + h * hk, da, hk);
}

/// Multi-head bidirectional scan (`alpha_bar` is `T × 2·d_k`) that keeps
/// what its adjoint needs. The output is identical to
/// [`crate::bigla::bigla_scan_heads`] with the same `imp`.
pub fn bigla_scan_taped(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    alpha_bar: &Tensor,
    heads: usize,
    imp: ScanImpl,
) -> Result<(Tensor, BiScanSaved, ScanMemory)> {
    let (t, dk, dv) = check_inputs(q, k, v, alpha_bar, 2, heads)?;
    let (hk, hv) = (dk / heads, dv / heads);
    let mut out = vec![0.0; t * dv];
    let mut per_head = Vec::new();
    let mut mem = ScanMemory::default();
    for h in 0..heads {
        let io = head_io(q, k, v, alpha_bar.as_mat().cols_slice(h * hk, hk), h, hk, hv);
        let alpha_bwd = alpha_bar.as_mat().cols_slice(dk + h * hk, hk);
        let mut o = MatMut::new(&mut out, t, dv).cols_slice(h * hv, hv);
        let m = match imp {
            ScanImpl::TwoPass => scan::bigla_two_pass_scan(io, alpha_bwd, None, &mut o),
            ScanImpl::Fused { chunk } => {
                if chunk == 0 {
                    return Err(Error::InvalidArgument("bigla: chunk must be ≥ 1".into()));
                }
                let mut saved = Vec::new();
                let m = scan::bigla_fused_scan(io, alpha_bwd, chunk, &mut o, Some(&mut saved));
                per_head.push(saved);
                m
            }
        };
        mem.merge_peak(m);
    }
    let out = Tensor::new([t, dv], out)?.ensure_finite("bigla")?;
    Ok((out, BiScanSaved { imp, per_head }, mem))
}

/// Adjoint of [`bigla_scan_taped`]; `dalpha` is `T × 2·d_k`.
///
/// Fused: the forward direction's adjoint sweeps blocks right to left and
/// the backward direction's left to right, each restarting from the saved
/// block-entry states. Two-pass: reversed copies, one full-length adjoint
/// per ordering.
pub fn bigla_scan_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    alpha_bar: &Tensor,
    heads: usize,
    saved: &BiScanSaved,
    d_out: &Tensor,
) -> Result<ScanGrads> {
    let (t, dk, dv) = check_inputs(q, k, v, alpha_bar, 2, heads)?;
    if d_out.shape() != [t, dv] {
        return Err(Error::shape("bigla_scan_backward", format!("dO {:?} for T={t}, d_v={dv}", d_out.shape())));
    }
    let (hk, hv) = (dk / heads, dv / heads);
    let n = hk * hv;
    let mut grads = ScanGrads {
        dq: Tensor::zeros([t, dk]),
        dk: Tensor::zeros([t, dk]),
        dv: Tensor::zeros([t, dv]),
        dalpha: Tensor::zeros([t, 2 * dk]),
    };
    let mut states = Vec::new();
    for h in 0..heads {
        let io = head_io(q, k, v, alpha_bar.as_mat().cols_slice(h * hk, hk), h, hk, hv);
        let bwd = ScanInputs {
            alpha: alpha_bar.as_mat().cols_slice(dk + h * hk, hk),
            ..io
        };
        let d_o = d_out.as_mat().cols_slice(h * hv, hv);
        let mut g = HeadGrads::new(t, hk, hv);
        let mut da_f = vec![0.0; t * hk];
        let mut da_b = vec![0.0; t * hk];
        match saved.imp {
            ScanImpl::Fused { chunk } => {
                let blocks = scan::physical_blocks(t, chunk);
                let nb = blocks.len();
                let boundaries = saved.per_head.get(h).filter(|s| s.len() == 2 * nb * n).ok_or_else(|| {
                    Error::shape("bigla_scan_backward", "saved block states do not match the inputs")
                })?;
                let (fwd_entry, bwd_entry) = boundaries.split_at(nb * n);
                let mut carry = vec![0.0; n];
                let mut pos = Vec::with_capacity(chunk);
                for (b, &(s, e)) in blocks.iter().enumerate().rev() {
                    pos.clear();
                    pos.extend(s..e);
                    let entry = &fwd_entry[b * n..(b + 1) * n];
                    adjoint_block(&io, &pos, entry, d_o, 0.5, &mut carry, &mut g, &mut da_f, &mut states);
                }
                carry.iter_mut().for_each(|c| *c = 0.0);
                for (b, &(s, e)) in blocks.iter().enumerate() {
                    pos.clear();
                    pos.extend((s..e).rev());
                    let entry = &bwd_entry[b * n..(b + 1) * n];
                    adjoint_block(&bwd, &pos, entry, d_o, 0.5, &mut carry, &mut g, &mut da_b, &mut states);
                }
            }
            ScanImpl::TwoPass => {
                let zero = vec![0.0; n];
                let pos: Vec<usize> = (0..t).collect();
                let mut carry = vec![0.0; n];
                adjoint_block(&io, &pos, &zero, d_o, 0.5, &mut carry, &mut g, &mut da_f, &mut states);

                fn reversed(m: MatRef<'_, f64>) -> Vec<f64> {
                    (0..m.rows()).rev().flat_map(|r| m.row(r).iter().copied()).collect()
                }
                let (rq, rk, rv, ra, rdo) = (reversed(io.q), reversed(io.k), reversed(io.v), reversed(bwd.alpha), reversed(d_o));
                let rev_io = ScanInputs {
                    q: MatRef::new(&rq, t, hk),
                    k: MatRef::new(&rk, t, hk),
                    v: MatRef::new(&rv, t, hv),
                    alpha: MatRef::new(&ra, t, hk),
                };
                let mut rg = HeadGrads::new(t, hk, hv);
                let mut rda = vec![0.0; t * hk];
                carry.iter_mut().for_each(|c| *c = 0.0);
                let d_rev = MatRef::new(&rdo, t, hv);
                adjoint_block(&rev_io, &pos, &zero, d_rev, 0.5, &mut carry, &mut rg, &mut rda, &mut states);
                let unreverse = |dst: &mut [f64], src: &[f64], w: usize| {
                    for r in 0..t {
                        for (d, s) in dst[r * w..(r + 1) * w].iter_mut().zip(&src[(t - 1 - r) * w..(t - r) * w]) {
                            *d += s;
                        }
                    }
                };
                unreverse(&mut g.dq, &rg.dq, hk);
                unreverse(&mut g.dk, &rg.dk, hk);
                unreverse(&mut g.dv, &rg.dv, hv);
                unreverse(&mut da_b, &rda, hk);
            }
        }
        scatter_head(&mut grads, h, hk, hv, &g, &da_f, 0, 2 * dk);
        scatter_cols(grads.dalpha.data_mut(), 2 * dk, dk + h * hk, &da_b, hk);
    }
    Ok(grads)
}
