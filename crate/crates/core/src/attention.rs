//! Reference attention: softmax attention in parallel and recurrent form,
//! and identity-feature linear attention. These serve as correctness
//! oracles for the gated scans and as the quadratic baseline in benchmarks.

use crate::error::{Error, Result};
use crate::kernels::{self, Element, MatRef};
use crate::tensor::{matmul, softmax_rows, Tensor};

/// Bias-free query/key/value projections.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl AttnParams {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Result<Self> {
        let (d, dq) = w_q.dims2()?;
        let (dk_in, dk) = w_k.dims2()?;
        let (dv_in, _) = w_v.dims2()?;
        if dq != dk || dk_in != d || dv_in != d {
            return Err(Error::shape(
                "AttnParams",
                format!("W_Q {:?}, W_K {:?}, W_V {:?}", w_q.shape(), w_k.shape(), w_v.shape()),
            ));
        }
        Ok(Self { w_q, w_k, w_v })
    }

    pub fn input_dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn key_dim(&self) -> usize {
        self.w_k.shape()[1]
    }

    pub fn value_dim(&self) -> usize {
        self.w_v.shape()[1]
    }

    pub fn project(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        Ok((matmul(x, &self.w_q)?, matmul(x, &self.w_k)?, matmul(x, &self.w_v)?))
    }
}

fn check_seq(x: &Tensor, op: &'static str) -> Result<usize> {
    let (t, _) = x.dims2()?;
    if t == 0 {
        return Err(Error::shape(op, "empty sequence"));
    }
    Ok(t)
}

/// `O = softmax((QKᵀ) ⊙ M) V`. With `causal` the strictly upper triangle
/// of the score matrix is masked to `-inf`; otherwise every pair attends.
pub fn softmax_attention_parallel(x: &Tensor, p: &AttnParams, causal: bool) -> Result<Tensor> {
    let t = check_seq(x, "softmax_attention_parallel")?;
    let (q, k, v) = p.project(x)?;
    let mut scores = matmul(&q, &k.transpose()?)?;
    if causal {
        let data = scores.data_mut();
        for i in 0..t {
            for j in i + 1..t {
                data[i * t + j] = f64::NEG_INFINITY;
            }
        }
    }
    matmul(&softmax_rows(&scores)?, &v)
}

/// Causal softmax attention one output at a time, with a running maximum
/// so the exponentials never overflow.
pub fn softmax_attention_recurrent(x: &Tensor, p: &AttnParams) -> Result<Tensor> {
    let t = check_seq(x, "softmax_attention_recurrent")?;
    let (q, k, v) = p.project(x)?;
    let dv = p.value_dim();
    let mut out = Vec::with_capacity(t * dv);
    let mut acc = vec![0.0; dv];
    for i in 0..t {
        let qi = q.row(i);
        let mut running_max = f64::NEG_INFINITY;
        let mut denom = 0.0;
        acc.iter_mut().for_each(|a| *a = 0.0);
        for j in 0..=i {
            let s: f64 = qi.iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
            if s > running_max {
                let rescale = (running_max - s).exp();
                denom *= rescale;
                acc.iter_mut().for_each(|a| *a *= rescale);
                running_max = s;
            }
            let w = (s - running_max).exp();
            denom += w;
            for (a, vj) in acc.iter_mut().zip(v.row(j)) {
                *a += w * vj;
            }
        }
        out.extend(acc.iter().map(|a| a / denom));
    }
    Tensor::new([t, dv], out)?.ensure_finite("softmax_attention_recurrent")
}

/// Identity-feature linear attention without normalizer. The causal form
/// runs the recurrence `S_t = S_{t-1} + k_tᵀ v_t`, `o_t = q_t S_t` from a
/// zero state; the non-causal form uses the full sum for every query.
pub fn linear_attention(x: &Tensor, p: &AttnParams, causal: bool) -> Result<Tensor> {
    check_seq(x, "linear_attention")?;
    let (q, k, v) = p.project(x)?;
    linear_attention_qkv(&q, &k, &v, causal)
}

pub fn linear_attention_qkv(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    let (t, dk) = q.dims2()?;
    let (tv, dv) = v.dims2()?;
    if k.shape() != q.shape() || tv != t {
        return Err(Error::shape(
            "linear_attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let mut state = vec![0.0; dk * dv];
    let add_outer = |state: &mut [f64], i: usize| {
        for (a, ka) in k.row(i).iter().enumerate() {
            for (s, vb) in state[a * dv..(a + 1) * dv].iter_mut().zip(v.row(i)) {
                *s += ka * vb;
            }
        }
    };
    let read = |state: &[f64], i: usize, out: &mut Vec<f64>| {
        let mut o = vec![0.0; dv];
        for (a, qa) in q.row(i).iter().enumerate() {
            for (ob, s) in o.iter_mut().zip(&state[a * dv..(a + 1) * dv]) {
                *ob += qa * s;
            }
        }
        out.extend(o);
    };
    let mut out = Vec::with_capacity(t * dv);
    if causal {
        for i in 0..t {
            add_outer(&mut state, i);
            read(&state, i, &mut out);
        }
    } else {
        (0..t).for_each(|i| add_outer(&mut state, i));
        (0..t).for_each(|i| read(&state, i, &mut out));
    }
    Tensor::new([t, dv], out)?.ensure_finite("linear_attention")
}

/// Non-causal softmax attention over projected `q`, `k`, `v` in storage
/// type `E`, streamed in row blocks so the `T×T` score matrix is never
/// held whole. Benchmark path; arithmetic is `f64`.
pub fn softmax_attention_streaming<E: Element>(
    q: MatRef<'_, E>,
    k: MatRef<'_, E>,
    v: MatRef<'_, E>,
    row_block: usize,
) -> Vec<f64> {
    let (t, dk, dv) = (q.rows(), q.cols(), v.cols());
    let kt: Vec<E> = {
        let mut buf = vec![E::default(); dk * t];
        for j in 0..t {
            for (a, &kv) in k.row(j).iter().enumerate() {
                buf[a * t + j] = kv;
            }
        }
        buf
    };
    let kt = MatRef::new(&kt, dk, t);
    let mut out = vec![0.0; t * dv];
    let block = row_block.max(1);
    let mut scores = vec![0.0; block * t];
    let mut probs: Vec<E> = vec![E::default(); block * t];
    for start in (0..t).step_by(block) {
        let rows = block.min(t - start);
        let s = &mut scores[..rows * t];
        s.iter_mut().for_each(|x| *x = 0.0);
        for r in 0..rows {
            let srow = &mut s[r * t..(r + 1) * t];
            for (a, &qa) in q.row(start + r).iter().enumerate() {
                let qa = qa.to_f64();
                for (x, &kb) in srow.iter_mut().zip(kt.row(a)) {
                    *x += qa * kb.to_f64();
                }
            }
            let max = srow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in srow.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            let inv = 1.0 / sum;
            for (p, x) in probs[r * t..(r + 1) * t].iter_mut().zip(srow.iter()) {
                *p = E::from_f64(x * inv);
            }
        }
        kernels::gemm_acc(
            MatRef::new(&probs[..rows * t], rows, t),
            v,
            &mut out[start * dv..(start + rows) * dv],
        );
    }
    out
}
