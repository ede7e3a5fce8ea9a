//! Gated linear attention: data-dependent forget gates, the sequential
//! recurrence, the chunkwise-blocked equivalent, and the multi-head layer.

use rand::Rng;

use crate::attention::AttnParams;
use crate::error::{Error, Result};
use crate::kernels::{gate_scalar, MatMut};
use crate::scan::{self, Direction, ScanInputs};
use crate::tensor::{matmul, Tensor};

/// Rank of the low-rank gate projection.
pub const GATE_RANK: usize = 16;
/// Gate temperature; gates are `sigmoid(·)^(1/τ)`.
pub const GATE_TEMPERATURE: f64 = 16.0;

/// Low-rank gate projection `α = sigmoid(x W1 W2 + b)^(1/τ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub w1: Tensor,
    pub w2: Tensor,
    pub bias: Tensor,
    pub tau: f64,
}

impl GateParams {
    pub fn new(w1: Tensor, w2: Tensor, bias: Tensor, tau: f64) -> Result<Self> {
        let (_, r) = w1.dims2()?;
        let (r2, dk) = w2.dims2()?;
        if r != r2 || bias.numel() != dk {
            return Err(Error::shape(
                "GateParams",
                format!("W1 {:?}, W2 {:?}, b {:?}", w1.shape(), w2.shape(), bias.shape()),
            ));
        }
        if tau < 1.0 || !tau.is_finite() {
            return Err(Error::InvalidArgument(format!("gate temperature must be ≥ 1, got {tau}")));
        }
        Ok(Self { w1, w2, bias, tau })
    }

    /// Normal(0, std) projections, zero bias, default rank and temperature.
    pub fn init<R: Rng + ?Sized>(d: usize, width: usize, std: f64, rng: &mut R) -> Self {
        Self {
            w1: Tensor::randn([d, GATE_RANK], std, rng),
            w2: Tensor::randn([GATE_RANK, width], std, rng),
            bias: Tensor::zeros([1, width]),
            tau: GATE_TEMPERATURE,
        }
    }

    pub fn width(&self) -> usize {
        self.bias.numel()
    }

    pub fn num_params(&self) -> usize {
        self.w1.numel() + self.w2.numel() + self.bias.numel()
    }

    /// `x W1 W2 + b` before the sigmoid.
    pub fn preactivation(&self, x: &Tensor) -> Result<Tensor> {
        matmul(&matmul(x, &self.w1)?, &self.w2)?.add_row(&self.bias)
    }
}

/// Gate values for every position: a `T × d_k` matrix with entries in `(0, 1]`.
pub fn compute_gates(x: &Tensor, g: &GateParams) -> Result<Tensor> {
    let z = g.preactivation(x)?;
    Ok(z.map(|v| gate_scalar(v, g.tau)))
}

/// Recurrent state `S_t` of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanState {
    pub s: Tensor,
}

fn check_qkva(q: &Tensor, k: &Tensor, v: &Tensor, alpha: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let (t, dk) = q.dims2()?;
    let (tv, dv) = v.dims2()?;
    if k.shape() != q.shape() || alpha.shape() != q.shape() || tv != t {
        return Err(Error::shape(
            op,
            format!(
                "q {:?}, k {:?}, v {:?}, alpha {:?}",
                q.shape(),
                k.shape(),
                v.shape(),
                alpha.shape()
            ),
        ));
    }
    if let Some(bad) = alpha.data().iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
        return Err(Error::InvalidArgument(format!("{op}: gate value {bad} outside (0, 1]")));
    }
    Ok((t, dk, dv))
}

fn inputs<'a>(q: &'a Tensor, k: &'a Tensor, v: &'a Tensor, alpha: &'a Tensor) -> ScanInputs<'a, f64> {
    ScanInputs {
        q: q.as_mat(),
        k: k.as_mat(),
        v: v.as_mat(),
        alpha: alpha.as_mat(),
    }
}

/// Sequential evaluation of `S_t = diag(α_t) S_{t-1} + k_tᵀ v_t`,
/// `o_t = q_t S_t` from `S_0 = 0`. Returns all outputs and `S_T`.
pub fn gla_recurrent(q: &Tensor, k: &Tensor, v: &Tensor, alpha: &Tensor) -> Result<(Tensor, ScanState)> {
    gla_recurrent_dir(q, k, v, alpha, Direction::Forward)
}

/// [`gla_recurrent`] in an explicit direction; the backward scan starts
/// from a zero state to the right of the last position.
pub fn gla_recurrent_dir(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    alpha: &Tensor,
    dir: Direction,
) -> Result<(Tensor, ScanState)> {
    let (t, dk, dv) = check_qkva(q, k, v, alpha, "gla_recurrent")?;
    let mut out = vec![0.0; t * dv];
    let mut state = vec![0.0; dk * dv];
    scan::scan_recurrent(
        inputs(q, k, v, alpha),
        dir,
        &mut state,
        &mut MatMut::new(&mut out, t, dv),
        1.0,
    );
    Ok((
        Tensor::new([t, dv], out)?.ensure_finite("gla_recurrent")?,
        ScanState {
            s: Tensor::new([dk, dv], state)?,
        },
    ))
}

/// Same contract as [`gla_recurrent`], evaluated block by block.
pub fn gla_chunkwise(q: &Tensor, k: &Tensor, v: &Tensor, alpha: &Tensor, chunk: usize) -> Result<(Tensor, ScanState)> {
    gla_chunkwise_dir(q, k, v, alpha, chunk, Direction::Forward)
}

pub fn gla_chunkwise_dir(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    alpha: &Tensor,
    chunk: usize,
    dir: Direction,
) -> Result<(Tensor, ScanState)> {
    if chunk < 1 {
        return Err(Error::InvalidArgument("gla_chunkwise: chunk must be ≥ 1".into()));
    }
    let (t, dk, dv) = check_qkva(q, k, v, alpha, "gla_chunkwise")?;
    let mut out = vec![0.0; t * dv];
    let mut state = vec![0.0; dk * dv];
    scan::scan_chunkwise(
        inputs(q, k, v, alpha),
        dir,
        chunk,
        &mut state,
        &mut MatMut::new(&mut out, t, dv),
        1.0,
    );
    Ok((
        Tensor::new([t, dv], out)?.ensure_finite("gla_chunkwise")?,
        ScanState {
            s: Tensor::new([dk, dv], state)?,
        },
    ))
}

/// Head layout shared by the uni- and bidirectional layers: `d_k = d/2`
/// and `d_v = d` overall, split evenly over `heads`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub dim: usize,
    pub heads: usize,
}

impl HeadLayout {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % (2 * heads) != 0 {
            return Err(Error::InvalidArgument(format!(
                "width {dim} is not divisible by 2 × {heads} heads"
            )));
        }
        Ok(Self { dim, heads })
    }

    pub fn key_dim(&self) -> usize {
        self.dim / 2
    }

    pub fn value_dim(&self) -> usize {
        self.dim
    }

    pub fn head_key_dim(&self) -> usize {
        self.dim / (2 * self.heads)
    }

    pub fn head_value_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Projections and gate of a (multi-head) GLA layer without output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct GlaParams {
    pub attn: AttnParams,
    pub gate: GateParams,
    pub heads: usize,
}

impl GlaParams {
    pub fn new(attn: AttnParams, gate: GateParams, heads: usize) -> Result<Self> {
        if gate.width() != attn.key_dim() || gate.w1.shape()[0] != attn.input_dim() {
            return Err(Error::shape(
                "GlaParams",
                format!("gate width {} vs key dim {}", gate.width(), attn.key_dim()),
            ));
        }
        if heads == 0 || attn.key_dim() % heads != 0 || attn.value_dim() % heads != 0 {
            return Err(Error::InvalidArgument(format!("{heads} heads do not divide the layer")));
        }
        Ok(Self { attn, gate, heads })
    }

    /// Standard layout `d_k = d/2`, `d_v = d`.
    pub fn init<R: Rng + ?Sized>(layout: HeadLayout, std: f64, rng: &mut R) -> Self {
        let d = layout.dim;
        Self {
            attn: AttnParams {
                w_q: Tensor::randn([d, layout.key_dim()], std, rng),
                w_k: Tensor::randn([d, layout.key_dim()], std, rng),
                w_v: Tensor::randn([d, layout.value_dim()], std, rng),
            },
            gate: GateParams::init(d, layout.key_dim(), std, rng),
            heads: layout.heads,
        }
    }

    pub fn num_params(&self) -> usize {
        self.attn.w_q.numel() + self.attn.w_k.numel() + self.attn.w_v.numel() + self.gate.num_params()
    }
}

/// Runs `heads` independent scans over column slices of `q`, `k`, `v`,
/// `alpha`, concatenating head outputs along the feature axis.
pub(crate) fn multihead_scan(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    alpha: &Tensor,
    heads: usize,
    dir: Direction,
    chunk: Option<usize>,
) -> Result<Tensor> {
    let (t, dk) = q.dims2()?;
    let (_, dv) = v.dims2()?;
    let (hk, hv) = (dk / heads, dv / heads);
    let mut out = vec![0.0; t * dv];
    for h in 0..heads {
        let io = ScanInputs {
            q: q.as_mat().cols_slice(h * hk, hk),
            k: k.as_mat().cols_slice(h * hk, hk),
            v: v.as_mat().cols_slice(h * hv, hv),
            alpha: alpha.as_mat().cols_slice(h * hk, hk),
        };
        let mut state = vec![0.0; hk * hv];
        let mut o = MatMut::new(&mut out, t, dv).cols_slice(h * hv, hv);
        match chunk {
            Some(c) => {
                scan::scan_chunkwise(io, dir, c, &mut state, &mut o, 1.0);
            }
            None => scan::scan_recurrent(io, dir, &mut state, &mut o, 1.0),
        }
    }
    Tensor::new([t, dv], out)?.ensure_finite("multihead_scan")
}

/// Causal GLA over `x` with per-head outputs concatenated (`T × d_v`).
pub fn gla_forward(x: &Tensor, p: &GlaParams, dir: Direction) -> Result<Tensor> {
    let (q, k, v) = p.attn.project(x)?;
    let alpha = compute_gates(x, &p.gate)?;
    multihead_scan(&q, &k, &v, &alpha, p.heads, dir, None)
}

/// Full multi-head GLA layer: head outputs concatenated then `W_O`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlaLayer {
    pub core: GlaParams,
    pub w_o: Tensor,
}

impl GlaLayer {
    pub fn init<R: Rng + ?Sized>(layout: HeadLayout, std: f64, rng: &mut R) -> Self {
        Self {
            core: GlaParams::init(layout, std, rng),
            w_o: Tensor::randn([layout.value_dim(), layout.dim], std, rng),
        }
    }

    pub fn num_params(&self) -> usize {
        self.core.num_params() + self.w_o.numel()
    }
}

/// `concat_h(GLA_h(x)) · W_O`, shape `T × d`.
pub fn multihead_gla(x: &Tensor, layer: &GlaLayer) -> Result<Tensor> {
    let (_, d) = x.dims2()?;
    HeadLayout::new(d, layer.core.heads)?;
    matmul(&gla_forward(x, &layer.core, Direction::Forward)?, &layer.w_o)
}

/// Copy of the rows of a `T × d` matrix through a view, used by tests and
/// the benchmark to build head slices.
pub fn head_slice(m: &Tensor, head: usize, width: usize) -> Result<Tensor> {
    m.cols_range(head * width, width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::linear_attention_qkv;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(vals: &[f64]) -> Tensor {
        Tensor::new([vals.len(), 1], vals.to_vec()).unwrap()
    }

    fn random_qkva(t: usize, dk: usize, dv: usize, seed: u64) -> (Tensor, Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::randn([t, dk], 1.0, &mut rng),
            Tensor::randn([t, dk], 1.0, &mut rng),
            Tensor::randn([t, dv], 1.0, &mut rng),
            Tensor::uniform([t, dk], 0.05, 1.0, &mut rng),
        )
    }

    fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
        let scale = a.max_abs().max(b.max_abs()).max(1e-300);
        a.sub(b).unwrap().max_abs() / scale
    }

    #[test]
    fn gates_at_zero_input() {
        let g = GateParams::new(
            Tensor::zeros([3, GATE_RANK]),
            Tensor::zeros([GATE_RANK, 2]),
            Tensor::zeros([1, 2]),
            16.0,
        )
        .unwrap();
        let a = compute_gates(&Tensor::zeros([4, 3]), &g).unwrap();
        // 0.5^(1/16)
        assert!(a.data().iter().all(|v| (v - 0.957_603_280_698_573_7).abs() < 1e-15));

        let g1 = GateParams { tau: 1.0, ..g };
        let a1 = compute_gates(&Tensor::zeros([1, 3]), &g1).unwrap();
        assert!(a1.data().iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn gates_match_composed_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = GateParams::init(5, 3, 0.5, &mut rng);
        g.bias = Tensor::randn([1, 3], 1.0, &mut rng);
        let x = Tensor::randn([6, 5], 1.0, &mut rng);
        let a = compute_gates(&x, &g).unwrap();
        for t in 0..6 {
            for j in 0..3 {
                let mut z = g.bias.data()[j];
                for r in 0..GATE_RANK {
                    let h: f64 = (0..5).map(|i| x.at2(t, i) * g.w1.at2(i, r)).sum();
                    z += h * g.w2.at2(r, j);
                }
                let expected = (1.0 / (1.0 + (-z).exp())).powf(1.0 / 16.0);
                assert!((a.at2(t, j) - expected).abs() < 1e-12);
                assert!(a.at2(t, j) > 0.0 && a.at2(t, j) < 1.0);
            }
        }
    }

    #[test]
    fn gate_params_reject_low_temperature() {
        let r = GateParams::new(
            Tensor::zeros([2, 16]),
            Tensor::zeros([16, 1]),
            Tensor::zeros([1, 1]),
            0.5,
        );
        assert!(r.is_err());
    }

    #[test]
    fn hand_recurrence_two_steps() {
        let (o, st) = gla_recurrent(
            &scalar(&[1.0, 1.0]),
            &scalar(&[1.0, 1.0]),
            &scalar(&[1.0, 2.0]),
            &scalar(&[1.0, 0.5]),
        )
        .unwrap();
        assert_eq!(o.data(), &[1.0, 2.5]);
        assert_eq!(st.s.data(), &[2.5]);
    }

    #[test]
    fn unit_gates_reduce_to_linear_attention() {
        let (q, k, v, _) = random_qkva(9, 3, 4, 12);
        let ones = Tensor::full([9, 3], 1.0);
        let (o, _) = gla_recurrent(&q, &k, &v, &ones).unwrap();
        let lin = linear_attention_qkv(&q, &k, &v, true).unwrap();
        assert!(max_rel(&o, &lin) < 1e-12);
    }

    #[test]
    fn vanishing_gates_reset_state() {
        let (q, k, v, _) = random_qkva(5, 2, 3, 13);
        let tiny = Tensor::full([5, 2], 1e-300);
        let (o, _) = gla_recurrent(&q, &k, &v, &tiny).unwrap();
        for t in 0..5 {
            for j in 0..3 {
                let qk: f64 = (0..2).map(|i| q.at2(t, i) * k.at2(t, i)).sum();
                assert!((o.at2(t, j) - qk * v.at2(t, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_gates_out_of_range() {
        let (q, k, v, _) = random_qkva(3, 2, 2, 14);
        for bad in [0.0, 1.5, -0.1, f64::NAN] {
            let alpha = Tensor::full([3, 2], bad);
            assert!(gla_recurrent(&q, &k, &v, &alpha).is_err());
        }
    }

    #[test]
    fn chunkwise_matches_recurrent() {
        for (t, chunk) in [(16, 16), (13, 4), (1, 1), (7, 3), (10, 1)] {
            let (q, k, v, a) = random_qkva(t, 3, 5, 20 + t as u64);
            let (r, rs) = gla_recurrent(&q, &k, &v, &a).unwrap();
            let (c, cs) = gla_chunkwise(&q, &k, &v, &a, chunk).unwrap();
            assert!(max_rel(&r, &c) < 1e-10, "t={t} chunk={chunk}");
            assert!(max_rel(&rs.s, &cs.s) < 1e-10);
        }
    }

    #[test]
    fn chunk_of_one_is_the_recurrence() {
        let (q, k, v, a) = random_qkva(12, 4, 2, 30);
        let (r, _) = gla_recurrent(&q, &k, &v, &a).unwrap();
        let (c, _) = gla_chunkwise(&q, &k, &v, &a, 1).unwrap();
        assert!(max_rel(&r, &c) < 1e-12);
        assert!(gla_chunkwise(&q, &k, &v, &a, 0).is_err());
    }

    #[test]
    fn backward_direction_equals_reversed_forward() {
        let (q, k, v, a) = random_qkva(9, 2, 3, 31);
        let (b, _) = gla_recurrent_dir(&q, &k, &v, &a, Direction::Backward).unwrap();
        let (f, _) = gla_recurrent(&q.reverse_rows(), &k.reverse_rows(), &v.reverse_rows(), &a.reverse_rows()).unwrap();
        assert!(max_rel(&b, &f.reverse_rows()) < 1e-14);
        let (bc, _) = gla_chunkwise_dir(&q, &k, &v, &a, 4, Direction::Backward).unwrap();
        assert!(max_rel(&b, &bc) < 1e-10);
    }

    #[test]
    fn causal_prefix_is_bitwise_stable() {
        let (q, k, v, a) = random_qkva(10, 3, 3, 32);
        let (o, _) = gla_recurrent(&q, &k, &v, &a).unwrap();
        let mut v2 = v.clone();
        v2.data_mut()[6 * 3] += 5.0;
        let (o2, _) = gla_recurrent(&q, &k, &v2, &a).unwrap();
        assert_eq!(&o.data()[..6 * 3], &o2.data()[..6 * 3]);
    }

    #[test]
    fn state_stays_bounded_for_long_sequences() {
        // |k_i v_j| ≤ 1 and α ≤ 1 − δ  ⇒  |S| ≤ 1/δ
        let t = 5000;
        let delta = 0.05;
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let q = Tensor::uniform([t, 2], -1.0, 1.0, &mut rng);
        let k = Tensor::uniform([t, 2], -1.0, 1.0, &mut rng);
        let v = Tensor::uniform([t, 2], -1.0, 1.0, &mut rng);
        let a = Tensor::uniform([t, 2], 0.5, 1.0 - delta, &mut rng);
        let (_, st) = gla_recurrent(&q, &k, &v, &a).unwrap();
        assert!(st.s.max_abs() <= 1.0 / delta);
    }

    #[test]
    fn multihead_single_head_matches_direct_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let layout = HeadLayout::new(8, 1).unwrap();
        let layer = GlaLayer::init(layout, 0.3, &mut rng);
        let x = Tensor::randn([5, 8], 1.0, &mut rng);
        let (q, k, v) = layer.core.attn.project(&x).unwrap();
        let a = compute_gates(&x, &layer.core.gate).unwrap();
        let (o, _) = gla_recurrent(&q, &k, &v, &a).unwrap();
        let expected = matmul(&o, &layer.w_o).unwrap();
        assert!(max_rel(&multihead_gla(&x, &layer).unwrap(), &expected) < 1e-13);
    }

    #[test]
    fn two_heads_with_block_diagonal_output_are_separable() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let d = 8;
        let layer = {
            let mut l = GlaLayer::init(HeadLayout::new(d, 2).unwrap(), 0.3, &mut rng);
            let mut w_o = Tensor::zeros([d, d]);
            for i in 0..d {
                for j in 0..d {
                    if (i < 4) == (j < 4) {
                        w_o.data_mut()[i * d + j] = rng.random_range(-0.5..0.5);
                    }
                }
            }
            l.w_o = w_o;
            l
        };
        let x = Tensor::randn([6, d], 1.0, &mut rng);
        let full = multihead_gla(&x, &layer).unwrap();

        let (q, k, v) = layer.core.attn.project(&x).unwrap();
        let a = compute_gates(&x, &layer.core.gate).unwrap();
        for h in 0..2 {
            let (o, _) = gla_recurrent(
                &head_slice(&q, h, 2).unwrap(),
                &head_slice(&k, h, 2).unwrap(),
                &head_slice(&v, h, 4).unwrap(),
                &head_slice(&a, h, 2).unwrap(),
            )
            .unwrap();
            let w_block = layer.w_o.transpose().unwrap().cols_range(h * 4, 4).unwrap().transpose().unwrap();
            let w_block = w_block.cols_range(h * 4, 4).unwrap();
            let part = matmul(&o, &w_block).unwrap();
            let got = full.cols_range(h * 4, 4).unwrap();
            assert!(max_rel(&got, &part) < 1e-13);
        }
    }

    #[test]
    fn multihead_rejects_indivisible_width() {
        assert!(HeadLayout::new(10, 3).is_err());
        assert!(HeadLayout::new(192, 3).is_ok());
    }

    #[test]
    fn vig_t_layout_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let layout = HeadLayout::new(192, 3).unwrap();
        assert_eq!((layout.head_key_dim(), layout.head_value_dim()), (32, 64));
        let layer = GlaLayer::init(layout, 0.02, &mut rng);
        let x = Tensor::randn([7, 192], 1.0, &mut rng);
        assert_eq!(multihead_gla(&x, &layer).unwrap().shape(), &[7, 192]);
    }
}
