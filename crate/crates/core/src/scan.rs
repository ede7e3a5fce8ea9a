//! Gated recurrence kernels on strided slice views.
//!
//! Every routine evaluates, for one head, the recurrence
//!
//! ```text
//! S_t = diag(α_t) · S_{t-1} + k_tᵀ v_t,    o_t = q_t S_t
//! ```
//!
//! in either scan direction. Outputs are *accumulated* into the caller's
//! buffer with a weight so that two directions can share one output.

use crate::kernels::{Element, MatMut, MatRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Left to right: `S_t` depends on positions `≤ t`.
    Forward,
    /// Right to left: `S_t` depends on positions `≥ t`.
    Backward,
}

impl Direction {
    /// Physical position of the `l`-th step of a scan over `t` positions.
    #[inline(always)]
    pub fn position(self, l: usize, t: usize) -> usize {
        match self {
            Direction::Forward => l,
            Direction::Backward => t - 1 - l,
        }
    }
}

/// The four per-position inputs of one head.
#[derive(Clone, Copy, Debug)]
pub struct ScanInputs<'a, E> {
    pub q: MatRef<'a, E>,
    pub k: MatRef<'a, E>,
    pub v: MatRef<'a, E>,
    pub alpha: MatRef<'a, E>,
}

impl<'a, E: Element> ScanInputs<'a, E> {
    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.rows() == 0
    }

    pub fn key_dim(&self) -> usize {
        self.q.cols()
    }

    pub fn value_dim(&self) -> usize {
        self.v.cols()
    }

    fn check(&self) {
        let t = self.len();
        assert!(
            self.k.rows() == t && self.v.rows() == t && self.alpha.rows() == t,
            "scan: row count mismatch"
        );
        assert!(
            self.k.cols() == self.q.cols() && self.alpha.cols() == self.q.cols(),
            "scan: key width mismatch"
        );
    }
}

/// Bytes of auxiliary storage a scan allocated, counted at allocation sites.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScanMemory {
    /// Reversed copies of the input sequence (and of the output).
    pub reversed_copy_bytes: usize,
    /// Per-block state summaries kept between traversals.
    pub block_summary_bytes: usize,
    /// Live recurrent states.
    pub state_bytes: usize,
    /// Per-block working buffers.
    pub scratch_bytes: usize,
}

impl ScanMemory {
    pub fn total(&self) -> usize {
        self.reversed_copy_bytes + self.block_summary_bytes + self.state_bytes + self.scratch_bytes
    }

    /// Keep the larger figure of each field (peak over sequential calls).
    pub fn merge_peak(&mut self, other: ScanMemory) {
        self.reversed_copy_bytes = self.reversed_copy_bytes.max(other.reversed_copy_bytes);
        self.block_summary_bytes = self.block_summary_bytes.max(other.block_summary_bytes);
        self.state_bytes = self.state_bytes.max(other.state_bytes);
        self.scratch_bytes = self.scratch_bytes.max(other.scratch_bytes);
    }
}

/// `S ← diag(α_p) S + k_pᵀ v_p`.
#[inline]
pub(crate) fn step_state<E: Element>(io: &ScanInputs<'_, E>, p: usize, state: &mut [f64]) {
    let dv = io.value_dim();
    let (kp, vp, ap) = (io.k.row(p), io.v.row(p), io.alpha.row(p));
    for ((srow, &ki), &ai) in state.chunks_exact_mut(dv).zip(kp).zip(ap) {
        let (ki, ai) = (ki.to_f64(), ai.to_f64());
        for (s, &vj) in srow.iter_mut().zip(vp) {
            *s = ai * *s + ki * vj.to_f64();
        }
    }
}

/// `o += w · q_p S`.
#[inline]
pub(crate) fn read_state<E: Element>(q_row: &[E], state: &[f64], weight: f64, o: &mut [f64]) {
    let dv = o.len();
    for (srow, &qi) in state.chunks_exact(dv).zip(q_row) {
        let qi = weight * qi.to_f64();
        for (ob, s) in o.iter_mut().zip(srow) {
            *ob += qi * s;
        }
    }
}

/// Sequential scan over the whole sequence. `state` holds the initial state
/// on entry and the final state on return.
pub fn scan_recurrent<E: Element>(
    io: ScanInputs<'_, E>,
    dir: Direction,
    state: &mut [f64],
    out: &mut MatMut<'_>,
    weight: f64,
) {
    io.check();
    let t = io.len();
    for l in 0..t {
        let p = dir.position(l, t);
        step_state(&io, p, state);
        read_state(io.q.row(p), state, weight, out.row_mut(p));
    }
}

/// Working buffers for one block.
pub(crate) struct BlockScratch {
    log_gates: Vec<f64>,
    ratios: Vec<f64>,
    scores: Vec<f64>,
}

impl BlockScratch {
    pub(crate) fn new(chunk: usize, dk: usize) -> Self {
        Self {
            log_gates: vec![0.0; chunk * dk],
            ratios: vec![0.0; dk],
            scores: vec![0.0; chunk],
        }
    }

    pub(crate) fn bytes(&self) -> usize {
        8 * (self.log_gates.len() + self.ratios.len() + self.scores.len())
    }
}

/// Process one block whose physical positions, in scan order, are `pos`.
///
/// With cumulative log-gates `Λ_l = Σ_{u≤l} ln α_u` inside the block, the
/// output at step `l` splits into an inter-block term
/// `(q_l ⊙ e^{Λ_l}) S_in` and an intra-block term
/// `Σ_{u≤l} (Σ_i q_{l,i} k_{u,i} e^{Λ_{l,i} − Λ_{u,i}}) v_u`; the carried
/// state becomes `diag(e^{Λ_last}) S_in + Σ_u (k_u ⊙ e^{Λ_last − Λ_u})ᵀ v_u`.
/// Gate ratios are formed as differences of log sums and are always ≤ 1.
pub(crate) fn scan_block<E: Element>(
    io: &ScanInputs<'_, E>,
    pos: &[usize],
    state: &mut [f64],
    update_state: bool,
    mut out: Option<(&mut MatMut<'_>, f64)>,
    scratch: &mut BlockScratch,
) {
    let c = pos.len();
    let dk = io.key_dim();
    let dv = io.value_dim();
    let lam = &mut scratch.log_gates[..c * dk];
    for (l, &p) in pos.iter().enumerate() {
        let (prev, cur) = lam.split_at_mut(l * dk);
        let cur = &mut cur[..dk];
        for (i, (&a, x)) in io.alpha.row(p).iter().zip(cur.iter_mut()).enumerate() {
            let base = if l == 0 { 0.0 } else { prev[(l - 1) * dk + i] };
            *x = base + a.to_f64().ln();
        }
    }

    if let Some((out, weight)) = out.as_mut() {
        let ratios = &mut scratch.ratios;
        let scores = &mut scratch.scores[..c];
        for (l, &p) in pos.iter().enumerate() {
            let q_row = io.q.row(p);
            let lam_l = &lam[l * dk..(l + 1) * dk];
            let o = out.row_mut(p);
            // inter-block
            for ((r, &qi), &li) in ratios.iter_mut().zip(q_row).zip(lam_l) {
                *r = qi.to_f64() * li.exp();
            }
            for (srow, &qg) in state.chunks_exact(dv).zip(ratios.iter()) {
                let qg = *weight * qg;
                for (ob, s) in o.iter_mut().zip(srow) {
                    *ob += qg * s;
                }
            }
            // intra-block: masked product with pairwise gate ratios
            for (u, &pu) in pos[..=l].iter().enumerate() {
                let lam_u = &lam[u * dk..(u + 1) * dk];
                let mut a = 0.0;
                for (((&qi, &ki), &li), &lu) in q_row.iter().zip(io.k.row(pu)).zip(lam_l).zip(lam_u) {
                    a += qi.to_f64() * ki.to_f64() * (li - lu).exp();
                }
                scores[u] = a;
            }
            for (u, &pu) in pos[..=l].iter().enumerate() {
                let a = *weight * scores[u];
                for (ob, &vj) in o.iter_mut().zip(io.v.row(pu)) {
                    *ob += a * vj.to_f64();
                }
            }
        }
    }

    if update_state {
        let lam_last = &lam[(c - 1) * dk..c * dk];
        for (srow, &ll) in state.chunks_exact_mut(dv).zip(lam_last) {
            let decay = ll.exp();
            srow.iter_mut().for_each(|s| *s *= decay);
        }
        let ratios = &mut scratch.ratios;
        for (u, &pu) in pos.iter().enumerate() {
            let lam_u = &lam[u * dk..(u + 1) * dk];
            for (((r, &ki), &ll), &lu) in ratios.iter_mut().zip(io.k.row(pu)).zip(lam_last).zip(lam_u) {
                *r = ki.to_f64() * (ll - lu).exp();
            }
            let v_row = io.v.row(pu);
            for (srow, &kg) in state.chunks_exact_mut(dv).zip(ratios.iter()) {
                for (s, &vj) in srow.iter_mut().zip(v_row) {
                    *s += kg * vj.to_f64();
                }
            }
        }
    }
}

/// Blocked scan: the sequence, taken in scan order, is cut into blocks of
/// `chunk` steps (the last one possibly shorter) and each block is handled
/// with [`scan_block`].
pub fn scan_chunkwise<E: Element>(
    io: ScanInputs<'_, E>,
    dir: Direction,
    chunk: usize,
    state: &mut [f64],
    out: &mut MatMut<'_>,
    weight: f64,
) -> ScanMemory {
    io.check();
    assert!(chunk >= 1, "scan_chunkwise: chunk must be positive");
    let t = io.len();
    let chunk = chunk.min(t.max(1));
    let mut scratch = BlockScratch::new(chunk, io.key_dim());
    let mut pos = Vec::with_capacity(chunk);
    for start in (0..t).step_by(chunk) {
        pos.clear();
        pos.extend((start..(start + chunk).min(t)).map(|l| dir.position(l, t)));
        scan_block(&io, &pos, state, true, Some((&mut *out, weight)), &mut scratch);
    }
    ScanMemory {
        state_bytes: 8 * state.len(),
        scratch_bytes: scratch.bytes() + 8 * pos.capacity(),
        ..Default::default()
    }
}

/// Physical block ranges `[start, end)` used by the fused bidirectional scan.
pub fn physical_blocks(t: usize, chunk: usize) -> Vec<(usize, usize)> {
    (0..t).step_by(chunk.max(1)).map(|s| (s, (s + chunk).min(t))).collect()
}

/// Both scan directions in one traversal, output `(o→ + o←)/2`.
///
/// A first sweep computes, per physical block, the backward-direction
/// summary (the state a block produces from a zero entry state) and its
/// total decay. A right-to-left prefix pass over those summaries turns them
/// into the backward state entering each block. The main traversal then
/// visits each block once, advancing the forward state and producing both
/// directions' inter- and intra-block contributions. No reversed copy of
/// the inputs is made.
///
/// `boundary_states`, when supplied, receives the forward state entering
/// every block followed by the backward state entering every block
/// (from the right), which is what the checkpointed adjoint needs.
pub fn bigla_fused_scan<E: Element>(
    fwd: ScanInputs<'_, E>,
    alpha_bwd: MatRef<'_, E>,
    chunk: usize,
    out: &mut MatMut<'_>,
    mut boundary_states: Option<&mut Vec<f64>>,
) -> ScanMemory {
    fwd.check();
    assert!(chunk >= 1, "bigla_fused_scan: chunk must be positive");
    let bwd = ScanInputs { alpha: alpha_bwd, ..fwd };
    bwd.check();
    let t = fwd.len();
    let (dk, dv) = (fwd.key_dim(), fwd.value_dim());
    let blocks = physical_blocks(t, chunk);
    let nb = blocks.len();
    let s_len = dk * dv;
    let chunk = chunk.min(t.max(1));

    let mut scratch = BlockScratch::new(chunk, dk);
    let mut pos: Vec<usize> = Vec::with_capacity(chunk);

    // Sweep 1: block summaries of the backward direction.
    let mut summaries = vec![0.0; nb * s_len];
    let mut decays = vec![0.0; nb * dk];
    for (b, &(s, e)) in blocks.iter().enumerate() {
        pos.clear();
        pos.extend((s..e).rev());
        let summary = &mut summaries[b * s_len..(b + 1) * s_len];
        scan_block(&bwd, &pos, summary, true, None, &mut scratch);
        let dec = &mut decays[b * dk..(b + 1) * dk];
        for p in s..e {
            for (d, &a) in dec.iter_mut().zip(alpha_bwd.row(p)) {
                *d += a.to_f64().ln();
            }
        }
    }

    // Right-to-left prefix: slot b becomes the backward state entering block b.
    let mut carry = vec![0.0; s_len];
    let mut next = vec![0.0; s_len];
    for b in (0..nb).rev() {
        let summary = &mut summaries[b * s_len..(b + 1) * s_len];
        let dec = &decays[b * dk..(b + 1) * dk];
        for (i, &ld) in dec.iter().enumerate() {
            let decay = ld.exp();
            for j in 0..dv {
                next[i * dv + j] = decay * carry[i * dv + j] + summary[i * dv + j];
            }
        }
        summary.copy_from_slice(&carry);
        std::mem::swap(&mut carry, &mut next);
    }

    if let Some(bs) = boundary_states.as_deref_mut() {
        bs.clear();
        bs.reserve(2 * nb * s_len);
    }

    // Main traversal.
    let mut state_fwd = vec![0.0; s_len];
    let mut state_bwd = vec![0.0; s_len];
    let mut fwd_boundaries = Vec::new();
    for (b, &(s, e)) in blocks.iter().enumerate() {
        if boundary_states.is_some() {
            fwd_boundaries.extend_from_slice(&state_fwd);
        }
        pos.clear();
        pos.extend(s..e);
        scan_block(&fwd, &pos, &mut state_fwd, true, Some((&mut *out, 0.5)), &mut scratch);
        pos.reverse();
        state_bwd.copy_from_slice(&summaries[b * s_len..(b + 1) * s_len]);
        scan_block(&bwd, &pos, &mut state_bwd, false, Some((&mut *out, 0.5)), &mut scratch);
    }
    if let Some(bs) = boundary_states {
        bs.extend_from_slice(&fwd_boundaries);
        bs.extend_from_slice(&summaries);
    }

    ScanMemory {
        reversed_copy_bytes: 0,
        block_summary_bytes: 8 * (summaries.len() + decays.len()),
        state_bytes: 8 * (state_fwd.len() + state_bwd.len() + carry.len() + next.len()),
        scratch_bytes: scratch.bytes() + 8 * pos.capacity(),
    }
}

/// Naive bidirectional reference: materializes reversed copies of `q`, `k`,
/// `v` and the backward gates, runs a forward scan over each ordering and
/// averages the (re-reversed) outputs.
pub fn bigla_two_pass_scan<E: Element>(
    fwd: ScanInputs<'_, E>,
    alpha_bwd: MatRef<'_, E>,
    chunk: Option<usize>,
    out: &mut MatMut<'_>,
) -> ScanMemory {
    fwd.check();
    let t = fwd.len();
    let (dk, dv) = (fwd.key_dim(), fwd.value_dim());
    fn run<E: Element>(
        io: ScanInputs<'_, E>,
        chunk: Option<usize>,
        state: &mut [f64],
        o: &mut MatMut<'_>,
    ) -> ScanMemory {
        match chunk {
            Some(c) => scan_chunkwise(io, Direction::Forward, c, state, o, 0.5),
            None => {
                scan_recurrent(io, Direction::Forward, state, o, 0.5);
                ScanMemory {
                    state_bytes: 8 * state.len(),
                    ..Default::default()
                }
            }
        }
    }
    let mut state = vec![0.0; dk * dv];
    let mut mem = run(fwd, chunk, &mut state, out);

    fn reversed<E: Element>(m: MatRef<'_, E>) -> Vec<E> {
        (0..m.rows()).rev().flat_map(|r| m.row(r).iter().copied()).collect()
    }
    let (rq, rk, rv, ra) = (reversed(fwd.q), reversed(fwd.k), reversed(fwd.v), reversed(alpha_bwd));
    let rev_io = ScanInputs {
        q: MatRef::new(&rq, t, dk),
        k: MatRef::new(&rk, t, dk),
        v: MatRef::new(&rv, t, dv),
        alpha: MatRef::new(&ra, t, dk),
    };
    let mut rev_out = vec![0.0; t * dv];
    state.iter_mut().for_each(|s| *s = 0.0);
    let back = run(rev_io, chunk, &mut state, &mut MatMut::new(&mut rev_out, t, dv));
    for r in 0..t {
        for (o, x) in out.row_mut(r).iter_mut().zip(&rev_out[(t - 1 - r) * dv..(t - r) * dv]) {
            *o += x;
        }
    }
    mem.merge_peak(back);
    mem.reversed_copy_bytes = E::BYTES * (rq.len() + rk.len() + rv.len() + ra.len()) + 8 * rev_out.len();
    mem
}
