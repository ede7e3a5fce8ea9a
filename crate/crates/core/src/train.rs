//! Desk-scale training: synthetic image tasks, AdamW with a cosine
//! schedule, held-out evaluation and CSV metrics.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bigla::{ScanImpl, DEFAULT_CHUNK};
use crate::error::{Error, Result};
use crate::grad::loss_and_grad;
use crate::model::{vig_forward, ViGConfig, ViGParams};
use crate::tensor::Tensor;

/// Held-out samples are drawn from this index upward; training indices
/// stay below it.
pub const HELDOUT_BASE: u64 = 1 << 48;

/// Probability that the left blob of a blob pair is red. The skew makes the
/// right blob alone predictive of the label; a model that cannot relate the
/// two blobs still tops out at `1 − (1 − BLOB_CUE_RED) / 2`.
pub const BLOB_CUE_RED: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    /// A bright bar whose orientation (one of `classes` angles) is the label.
    OrientedBar,
    /// Two colored blobs at opposite ends of the image; the label is whether
    /// their colors differ.
    BlobPair,
}

impl std::str::FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bars" | "oriented-bar" => Ok(Self::OrientedBar),
            "blobs" | "blob-pair" => Ok(Self::BlobPair),
            _ => Err(Error::InvalidArgument(format!("unknown task {s:?} (expected bars or blobs)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub family: TaskFamily,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub seed: u64,
}

impl SyntheticTask {
    /// Two bar orientations on 32×32 images.
    pub fn bars(seed: u64) -> Self {
        Self {
            family: TaskFamily::OrientedBar,
            height: 32,
            width: 32,
            classes: 2,
            seed,
        }
    }

    /// Blob pair on a 16×128 strip: 1×8 tokens, the blobs eight tokens apart.
    pub fn blobs(seed: u64) -> Self {
        Self {
            family: TaskFamily::BlobPair,
            height: 16,
            width: 128,
            classes: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.family {
            TaskFamily::OrientedBar => self.classes >= 2 && self.height >= 16 && self.width >= 16,
            TaskFamily::BlobPair => self.classes == 2 && self.height >= 8 && self.width >= 64,
        };
        if !ok {
            return Err(Error::InvalidArgument(format!("unsupported task {self:?}")));
        }
        Ok(())
    }

    /// Model config sized for this task.
    pub fn model_config(&self) -> ViGConfig {
        ViGConfig::tiny(self.height, self.width, self.classes)
    }

    /// Image `H×W×3` and label for sample `index`; a pure function of
    /// `(seed, index)`.
    pub fn sample(&self, index: u64) -> (Tensor, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let (h, w) = (self.height, self.width);
        let mut img = vec![0.0; h * w * 3];
        for v in img.iter_mut() {
            *v = rng.random_range(0.0..0.2);
        }
        let label = match self.family {
            TaskFamily::OrientedBar => {
                let label = rng.random_range(0..self.classes);
                let theta = PI * label as f64 / self.classes as f64;
                let (dx, dy) = (theta.cos(), theta.sin());
                let m = h.min(w) as f64;
                let half = rng.random_range(0.25 * m..0.375 * m);
                let thick = rng.random_range(0.8..1.6);
                let reach = half * dx.abs().max(dy.abs()) + thick;
                let span = |n: usize| (reach.min(n as f64 / 2.0 - 1.0), n as f64 - reach.min(n as f64 / 2.0 - 1.0));
                let (x0, x1) = span(w);
                let (y0, y1) = span(h);
                let cx = rng.random_range(x0..x1);
                let cy = rng.random_range(y0..y1);
                for y in 0..h {
                    for x in 0..w {
                        let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        let along = px * dx + py * dy;
                        let across = (-px * dy + py * dx).abs();
                        if along.abs() <= half && across <= thick {
                            img[(y * w + x) * 3..][..3].iter_mut().for_each(|v| *v = 1.0);
                        }
                    }
                }
                label
            }
            TaskFamily::BlobPair => {
                let end = w / 8;
                let r = 3.0;
                let mut colors = [0usize; 2];
                for (side, color) in colors.iter_mut().enumerate() {
                    *color = if side == 0 {
                        usize::from(rng.random_bool(1.0 - BLOB_CUE_RED))
                    } else {
                        rng.random_range(0..2)
                    };
                    let lo = if side == 0 { r } else { (w - end) as f64 + r };
                    let cx = rng.random_range(lo..lo + end as f64 - 2.0 * r);
                    let cy = rng.random_range(r..h as f64 - r);
                    for y in 0..h {
                        for x in 0..w {
                            let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                            if px * px + py * py <= r * r {
                                let px = &mut img[(y * w + x) * 3..][..3];
                                px.copy_from_slice(&[0.0, 0.0, 0.0]);
                                px[*color] = 1.0;
                            }
                        }
                    }
                }
                colors[0] ^ colors[1]
            }
        };
        (Tensor::new([h, w, 3], img).expect("sized above"), label)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub eval_every: usize,
    pub heldout_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.05,
            warmup_steps: 50,
            eval_every: 100,
            heldout_size: 256,
        }
    }
}

impl TrainOptions {
    /// Linear warm-up then cosine decay to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        0.5 * self.lr * (1.0 + (PI * progress).cos())
    }
}

/// Per-parameter AdamW moments.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(p: &ViGParams) -> Self {
        let zeros: Vec<Tensor> = p.named_tensors().iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Norm gains and biases are exempt from weight decay.
pub fn decays(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    !(last.starts_with("norm") || last.ends_with("bias") || last.ends_with("_b"))
}

/// One decoupled-weight-decay Adam update.
pub fn adamw_step(p: &mut ViGParams, grads: &[Tensor], state: &mut OptimState, opts: &TrainOptions, lr: f64) -> Result<()> {
    let names: Vec<bool> = p.named_tensors().iter().map(|(n, _)| decays(n)).collect();
    let tensors = p.tensors_mut();
    if grads.len() != tensors.len() {
        return Err(Error::shape("adamw_step", format!("{} gradients for {} tensors", grads.len(), tensors.len())));
    }
    state.step += 1;
    let (b1, b2) = opts.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, t) in tensors.into_iter().enumerate() {
        let wd = if names[i] { opts.weight_decay } else { 0.0 };
        let (m, v, g) = (state.m[i].data_mut(), state.v[i].data_mut(), grads[i].data());
        for (((x, m), v), &g) in t.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + opts.eps) + wd * *x;
            *x -= lr * update;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub heldout_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
    pub params: ViGParams,
}

impl TrainHistory {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.heldout_acc)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Index of the largest logit (first on ties).
pub fn argmax(logits: &Tensor) -> usize {
    let mut best = 0;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[best] {
            best = i;
        }
    }
    best
}

/// Accuracy on `n` held-out samples starting at `HELDOUT_BASE + offset`.
pub fn evaluate(p: &ViGParams, config: &ViGConfig, task: &SyntheticTask, offset: u64, n: usize) -> Result<f64> {
    let mut correct = 0;
    for i in 0..n as u64 {
        let (img, label) = task.sample(HELDOUT_BASE + offset + i);
        if argmax(&vig_forward(&img, p, config)?) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / n.max(1) as f64)
}

/// Trains from a fresh initialization. `on_record` sees every step as it
/// completes; `stop_at` ends training early once held-out accuracy
/// exceeds it.
pub fn train_with(
    config: &ViGConfig,
    task: &SyntheticTask,
    opts: &TrainOptions,
    seed: u64,
    stop_at: Option<f64>,
    mut on_record: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainHistory> {
    if opts.steps == 0 || opts.batch_size == 0 {
        return Err(Error::InvalidArgument("steps and batch size must be ≥ 1".into()));
    }
    task.validate()?;
    if (config.image_height, config.image_width, config.num_classes) != (task.height, task.width, task.classes) {
        return Err(Error::InvalidArgument("model config does not match the task".into()));
    }
    let mut params = ViGParams::init(config, seed)?;
    let mut state = OptimState::new(&params);
    let mut order = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let imp = ScanImpl::Fused { chunk: DEFAULT_CHUNK };
    let mut records = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut total = 0.0;
        let mut grads: Option<Vec<Tensor>> = None;
        for _ in 0..opts.batch_size {
            let (img, label) = task.sample(order.random_range(0..HELDOUT_BASE));
            let (loss, g) = match loss_and_grad(&params, config, &img, label, imp) {
                Err(Error::NonFinite { .. }) => return Err(Error::Divergence { step, loss: f64::NAN }),
                r => r?,
            };
            total += loss;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        a.add_assign(b)?;
                    }
                }
            }
        }
        let loss = total / opts.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let inv = 1.0 / opts.batch_size as f64;
        let grads: Vec<Tensor> = grads.unwrap_or_default().into_iter().map(|g| g.scale(inv)).collect();
        let lr = opts.lr_at(step);
        adamw_step(&mut params, &grads, &mut state, opts, lr)?;
        let last = step + 1 == opts.steps;
        let heldout_acc = if opts.eval_every > 0 && ((step + 1) % opts.eval_every == 0 || last) {
            Some(evaluate(&params, config, task, 0, opts.heldout_size)?)
        } else {
            None
        };
        let rec = StepRecord { step, loss, lr, heldout_acc };
        on_record(&rec)?;
        records.push(rec);
        if let (Some(target), Some(acc)) = (stop_at, heldout_acc) {
            if acc > target {
                break;
            }
        }
    }
    Ok(TrainHistory { records, params })
}

/// [`train_with`] without early stopping or streaming.
pub fn train(config: &ViGConfig, task: &SyntheticTask, opts: &TrainOptions, seed: u64) -> Result<TrainHistory> {
    train_with(config, task, opts, seed, None, |_| Ok(()))
}

pub const METRICS_HEADER: &str = "step,loss,lr,heldout_acc";

/// One CSV line (no newline); `heldout_acc` is empty on steps without evaluation.
pub fn metrics_line(r: &StepRecord) -> String {
    let acc = r.heldout_acc.map(|a| format!("{a}")).unwrap_or_default();
    format!("{},{},{},{}", r.step, r.loss, r.lr, acc)
}

pub fn write_metrics<W: Write>(mut out: W, records: &[StepRecord]) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(out, "{}", metrics_line(r))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_are_deterministic_and_labelled() {
        for task in [SyntheticTask::bars(3), SyntheticTask::blobs(3)] {
            let (a, la) = task.sample(17);
            let (b, lb) = task.sample(17);
            assert_eq!((a.data(), la), (b.data(), lb));
            assert_eq!(a.shape(), &[task.height, task.width, 3]);
            let labels: Vec<usize> = (0..200).map(|i| task.sample(i).1).collect();
            let ones = labels.iter().filter(|&&l| l == 1).count();
            assert!((60..140).contains(&ones), "{ones}");
            assert_ne!(task.sample(18).0, a);
        }
    }

    #[test]
    fn bar_pixels_follow_orientation() {
        let task = SyntheticTask::bars(5);
        for i in 0..20 {
            let (img, label) = task.sample(i);
            let lit: Vec<(usize, usize)> = (0..32 * 32).filter(|p| img.data()[p * 3] == 1.0).map(|p| (p / 32, p % 32)).collect();
            assert!(lit.len() > 20);
            let spread = |f: fn(&(usize, usize)) -> usize| lit.iter().map(f).max().unwrap() - lit.iter().map(f).min().unwrap();
            let (rows, cols) = (spread(|p| p.0), spread(|p| p.1));
            if label == 0 {
                assert!(cols > rows, "horizontal bar expected");
            } else {
                assert!(rows > cols, "vertical bar expected");
            }
        }
    }

    #[test]
    fn blob_label_is_color_parity() {
        let task = SyntheticTask::blobs(6);
        for i in 0..30 {
            let (img, label) = task.sample(i);
            let color_in = |x0: usize, x1: usize| {
                (0..16 * 128)
                    .filter(|p| (x0..x1).contains(&(p % 128)))
                    .find_map(|p| {
                        let px = &img.data()[p * 3..p * 3 + 3];
                        (px[0] == 1.0).then_some(0).or((px[1] == 1.0).then_some(1))
                    })
                    .expect("blob present")
            };
            assert_eq!(label, color_in(0, 16) ^ color_in(112, 128));
        }
    }

    #[test]
    fn schedule_warms_up_and_decays() {
        let o = TrainOptions { steps: 100, warmup_steps: 10, ..Default::default() };
        assert!((o.lr_at(0) - 1e-4).abs() < 1e-18);
        assert!((o.lr_at(10) - 1e-3).abs() < 1e-18);
        assert!(o.lr_at(55) < o.lr_at(20));
        assert!(o.lr_at(99) < 1e-5);
    }

    #[test]
    fn decay_exemptions() {
        assert!(decays("blocks.0.w_q"));
        assert!(decays("pos_embed"));
        assert!(!decays("blocks.1.norm2"));
        assert!(!decays("norm"));
        assert!(!decays("head.bias"));
        assert!(!decays("blocks.0.gate_b"));
        assert!(!decays("blocks.0.dw_bias"));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let task = SyntheticTask::bars(1);
        let config = task.model_config();
        let opts = TrainOptions { steps: 3, batch_size: 2, lr: 0.0, eval_every: 0, ..Default::default() };
        let h = train(&config, &task, &opts, 7).unwrap();
        assert_eq!(h.params, ViGParams::init(&config, 7).unwrap());
        assert!(h.records.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn same_seed_same_curve() {
        let task = SyntheticTask::blobs(2);
        let config = task.model_config();
        let opts = TrainOptions { steps: 4, batch_size: 2, eval_every: 2, heldout_size: 8, ..Default::default() };
        let a = train(&config, &task, &opts, 9).unwrap();
        let b = train(&config, &task, &opts, 9).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.params, b.params);
        let c = train(&config, &task, &opts, 10).unwrap();
        assert_ne!(a.losses(), c.losses());
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let task = SyntheticTask::bars(1);
        let config = task.model_config();
        let mut p = ViGParams::init(&config, 1).unwrap();
        let before = p.clone();
        let grads: Vec<Tensor> = p.named_tensors().iter().map(|(_, t)| Tensor::full(t.shape().to_vec(), -2.0)).collect();
        let mut state = OptimState::new(&p);
        let opts = TrainOptions { weight_decay: 0.0, eps: 0.0, ..Default::default() };
        adamw_step(&mut p, &grads, &mut state, &opts, 0.01).unwrap();
        for ((_, a), (_, b)) in p.named_tensors().iter().zip(before.named_tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y - 0.01).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn divergence_is_reported() {
        let task = SyntheticTask::bars(1);
        let config = task.model_config();
        let opts = TrainOptions { steps: 50, batch_size: 1, lr: 1e30, warmup_steps: 0, eval_every: 0, ..Default::default() };
        match train(&config, &task, &opts, 1) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|h| h.records.len())),
        }
    }

    #[test]
    fn metrics_csv_shape() {
        let mut buf = Vec::new();
        let recs = [
            StepRecord { step: 0, loss: 0.5, lr: 1e-3, heldout_acc: None },
            StepRecord { step: 1, loss: 0.25, lr: 5e-4, heldout_acc: Some(0.75) },
        ];
        write_metrics(&mut buf, &recs).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss,lr,heldout_acc\n0,0.5,0.001,\n1,0.25,0.0005,0.75\n");
    }
}
