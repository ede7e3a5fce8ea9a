//! Randomized equivalence and gradient suites behind `vig check`.
//!
//! Each check draws its instances from a seeded generator and reports the
//! largest relative error `max|a − b| / max(max|a|, max|b|)` it observed.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{linear_attention_qkv, softmax_attention_parallel, softmax_attention_recurrent, AttnParams};
use crate::bigla::{bigla_scan_heads, ScanImpl, DEFAULT_CHUNK};
use crate::error::Result;
use crate::gla::{gla_chunkwise_dir, gla_recurrent, gla_recurrent_dir};
use crate::grad::{finite_diff_check, flatten, loss_and_grad, sample_coordinates, unflatten};
use crate::model::{ViGConfig, ViGParams};
use crate::scan::Direction;
use crate::tensor::Tensor;
use crate::train::SyntheticTask;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub max_err: f64,
    pub tolerance: f64,
    /// Extra structural conditions, already folded into `passed`.
    pub notes: Vec<String>,
    pub passed: bool,
    pub elapsed: Duration,
}

impl CheckOutcome {
    /// The report line without its verdict.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{}: {} instances, max rel err {:.3e} (tol {:.0e}), {:.2}s",
            self.name,
            self.instances,
            self.max_err,
            self.tolerance,
            self.elapsed.as_secs_f64()
        );
        for n in &self.notes {
            s.push_str("; ");
            s.push_str(n);
        }
        s
    }
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}", if self.passed { "PASS" } else { "FAIL" }, self.summary())
    }
}

pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    let scale = a.max_abs().max(b.max_abs());
    let diff = a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn randn(shape: [usize; 2], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, std, rng)
}

fn finish(name: &'static str, instances: usize, max_err: f64, tolerance: f64, notes: Vec<String>, ok: bool, start: Instant) -> CheckOutcome {
    CheckOutcome {
        name,
        instances,
        max_err,
        tolerance,
        passed: ok && max_err.is_finite() && max_err <= tolerance,
        notes,
        elapsed: start.elapsed(),
    }
}

/// Causal softmax attention: full score matrix vs running-max recurrence.
pub fn softmax_forms(instances: usize, seed: u64, tolerance: f64) -> Result<CheckOutcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let t = rng.random_range(1..=32);
        let d = rng.random_range(1..=16);
        let dk = rng.random_range(1..=16);
        let dv = rng.random_range(1..=16);
        let scale = rng.random_range(0.1..2.0);
        let p = AttnParams::new(
            randn([d, dk], scale, &mut rng),
            randn([d, dk], scale, &mut rng),
            randn([d, dv], 1.0, &mut rng),
        )?;
        let x = randn([t, d], 1.0, &mut rng);
        let a = softmax_attention_parallel(&x, &p, true)?;
        let b = softmax_attention_recurrent(&x, &p)?;
        worst = worst.max(rel_err(&a, &b));
    }
    Ok(finish("softmax parallel vs recurrent", instances, worst, tolerance, vec![], true, start))
}

/// A gated scan whose gates are all one is causal linear attention.
pub fn gate_free_reduction(instances: usize, seed: u64, tolerance: f64) -> Result<CheckOutcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let t = rng.random_range(1..=32);
        let dk = rng.random_range(1..=16);
        let dv = rng.random_range(1..=16);
        let q = randn([t, dk], 1.0, &mut rng);
        let k = randn([t, dk], 1.0, &mut rng);
        let v = randn([t, dv], 1.0, &mut rng);
        let (o, _) = gla_recurrent(&q, &k, &v, &Tensor::full([t, dk], 1.0))?;
        worst = worst.max(rel_err(&o, &linear_attention_qkv(&q, &k, &v, true)?));
    }
    Ok(finish("gla(alpha=1) vs linear attention", instances, worst, tolerance, vec![], true, start))
}

pub const CHUNK_SIZES: [usize; 5] = [1, 2, 3, 5, 8];

/// Chunkwise vs step-by-step scan for chunk sizes [`CHUNK_SIZES`] and `T`,
/// both directions, including ragged final blocks.
pub fn chunkwise_equivalence(instances: usize, seed: u64, tolerance: f64) -> Result<CheckOutcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut ragged = 0usize;
    for _ in 0..instances {
        let t = rng.random_range(1..=40);
        let dk = rng.random_range(1..=8);
        let dv = rng.random_range(1..=8);
        let q = randn([t, dk], 1.0, &mut rng);
        let k = randn([t, dk], 1.0, &mut rng);
        let v = randn([t, dv], 1.0, &mut rng);
        let alpha = Tensor::uniform([t, dk], 0.05, 1.0, &mut rng);
        for dir in [Direction::Forward, Direction::Backward] {
            let (reference, s_ref) = gla_recurrent_dir(&q, &k, &v, &alpha, dir)?;
            for chunk in CHUNK_SIZES.into_iter().chain([t]) {
                ragged += usize::from(t % chunk != 0);
                let (o, s) = gla_chunkwise_dir(&q, &k, &v, &alpha, chunk, dir)?;
                worst = worst.max(rel_err(&o, &reference)).max(rel_err(&s.s, &s_ref.s));
            }
        }
    }
    let notes = vec![format!("{ragged} ragged-tail cases")];
    Ok(finish("chunkwise vs recurrent gla", instances, worst, tolerance, notes, ragged > 0, start))
}

/// Fused single-traversal bidirectional scan vs reversed-copy reference.
/// Also requires the fused path to report zero reversed-copy bytes while
/// the reference reports some.
pub fn fused_vs_two_pass(instances: usize, seed: u64, tolerance: f64) -> Result<CheckOutcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let (mut fused_copies, mut ref_without_copies) = (0usize, 0usize);
    for _ in 0..instances {
        let heads = rng.random_range(1..=3);
        let t = rng.random_range(1..=48);
        let dk = heads * rng.random_range(1..=5);
        let dv = heads * rng.random_range(1..=5);
        let q = randn([t, dk], 1.0, &mut rng);
        let k = randn([t, dk], 1.0, &mut rng);
        let v = randn([t, dv], 1.0, &mut rng);
        let alpha = Tensor::uniform([t, 2 * dk], 0.05, 1.0, &mut rng);
        let chunk = if rng.random_bool(0.5) { DEFAULT_CHUNK } else { rng.random_range(1..=t) };
        let (a, mem_f) = bigla_scan_heads(&q, &k, &v, &alpha, heads, ScanImpl::Fused { chunk })?;
        let (b, mem_r) = bigla_scan_heads(&q, &k, &v, &alpha, heads, ScanImpl::TwoPass)?;
        worst = worst.max(rel_err(&a, &b));
        fused_copies += mem_f.reversed_copy_bytes;
        ref_without_copies += usize::from(mem_r.reversed_copy_bytes == 0);
    }
    let notes = vec![
        format!("fused reversed-copy bytes {fused_copies}"),
        format!("reference runs without copies {ref_without_copies}"),
    ];
    let ok = fused_copies == 0 && ref_without_copies == 0;
    Ok(finish("fused vs two-pass bigla", instances, worst, tolerance, notes, ok, start))
}

/// Reference model for the gradient check: the bar-task ViG-tiny with its
/// initial weights jittered so no gradient is trivially zero.
pub fn gradient_check_model(seed: u64) -> Result<(ViGConfig, ViGParams, Tensor, usize)> {
    let task = SyntheticTask::bars(seed);
    let config = task.model_config();
    let mut p = ViGParams::init(&config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let jitter = Normal::new(0.0, 0.2).expect("positive std");
    for t in p.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += jitter.sample(&mut rng));
    }
    let (img, label) = task.sample(0);
    Ok((config, p, img, label))
}

/// Analytic loss gradient of the whole model vs central differences on
/// `coords` sampled coordinates.
pub fn model_gradient(coords: usize, h: f64, seed: u64, tolerance: f64) -> Result<CheckOutcome> {
    let start = Instant::now();
    let (config, p, img, label) = gradient_check_model(seed)?;
    let imp = ScanImpl::Fused { chunk: DEFAULT_CHUNK };
    let (_, grads) = loss_and_grad(&p, &config, &img, label, imp)?;
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
    let theta = flatten(&p);
    let picked = sample_coordinates(theta.len(), coords, seed);
    let loss = |th: &[f64]| -> Result<f64> {
        let q = unflatten(&p, th)?;
        Ok(loss_and_grad(&q, &config, &img, label, imp)?.0)
    };
    let report = finite_diff_check(loss, &theta, &analytic, h, &picked)?;
    let mut notes = vec![format!("mean rel err {:.3e}", report.mean_rel_err)];
    if let Some((i, a, n)) = report.worst {
        notes.push(format!("worst coordinate {i}: analytic {a:.6e}, numeric {n:.6e}"));
    }
    Ok(finish("model gradient vs finite differences", picked.len(), report.max_rel_err, tolerance, notes, true, start))
}

/// Everything `vig check` runs, at full acceptance sizes.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        softmax_forms(1000, seed, 1e-10)?,
        gate_free_reduction(1000, seed, 1e-12)?,
        chunkwise_equivalence(200, seed, 1e-9)?,
        fused_vs_two_pass(1000, seed, 1e-10)?,
        model_gradient(200, 1e-5, seed, 1e-4)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_runs_pass() {
        assert!(softmax_forms(20, 1, 1e-10).unwrap().passed);
        assert!(gate_free_reduction(20, 1, 1e-12).unwrap().passed);
        assert!(chunkwise_equivalence(10, 1, 1e-9).unwrap().passed);
        let f = fused_vs_two_pass(20, 1, 1e-10).unwrap();
        assert!(f.passed, "{f}");
    }

    #[test]
    fn rel_err_definition() {
        let a = Tensor::new([2], vec![1.0, -4.0]).unwrap();
        let b = Tensor::new([2], vec![1.5, -4.0]).unwrap();
        assert_eq!(rel_err(&a, &b), 0.125);
        assert_eq!(rel_err(&a, &a), 0.0);
        assert_eq!(rel_err(&a, &Tensor::zeros([1, 2])), f64::INFINITY);
    }

    #[test]
    fn outcome_fails_on_structure_even_within_tolerance() {
        let o = finish("x", 1, 0.0, 1.0, vec![], false, Instant::now());
        assert!(!o.passed);
        assert!(o.to_string().starts_with("FAIL x"));
        let o = finish("x", 1, f64::NAN, 1.0, vec![], true, Instant::now());
        assert!(!o.passed);
    }
}
