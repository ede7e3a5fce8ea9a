//! Closed-form cost accounting and wall-time scaling sweeps.
//!
//! Timed layers run in single precision storage with double accumulation.
//! Memory figures are analytic: every buffer a variant allocates, counted
//! from its shape.

use std::io::{Read, Write};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::softmax_attention_streaming;
use crate::bigla::DEFAULT_CHUNK;
use crate::error::{Error, Result};
use crate::gla::{HeadLayout, GATE_RANK, GATE_TEMPERATURE};
use crate::kernels::{gate_scalar, gemm, MatMut, MatRef};
use crate::model::{bigla_layer_params, gla_layer_params, PATCH_SIZE};
use crate::scan::{self, Direction, ScanInputs, ScanMemory};

/// `5Td² + 32Td`: projections and output (`3Td²`), two scan directions
/// (`2Td²`), the widened low-rank gate (`32Td`).
pub fn flops_bigla(t: u64, d: u64) -> u64 {
    5 * t * d * d + 32 * t * d
}

/// `4Td² + 2T²d`: four `d×d` projections plus the score and value products.
pub fn flops_softmax_attn(t: u64, d: u64) -> u64 {
    4 * t * d * d + 2 * t * t * d
}

/// One causal GLA layer: `3Td²` projections, `Td²` scan, `24Td` gate.
pub fn flops_gla(t: u64, d: u64) -> u64 {
    4 * t * d * d + 24 * t * d
}

/// Token count of a square image at the model's patch size.
pub fn resolution_to_tokens(res: usize) -> usize {
    (res / PATCH_SIZE) * (res / PATCH_SIZE)
}

pub const SWEEP_RESOLUTIONS: [usize; 5] = [224, 448, 896, 1024, 2048];

/// Rows per block of the streamed softmax.
pub const SOFTMAX_ROW_BLOCK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Fused single-traversal BiGLA layer.
    Bigla,
    /// BiGLA with reversed copies and two forward scans.
    BiglaTwoPass,
    /// Two independent single-direction GLA layers, averaged.
    GlaVim,
    /// Softmax attention, streamed in row blocks.
    Softmax,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Bigla, Variant::BiglaTwoPass, Variant::GlaVim, Variant::Softmax];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Bigla => "bigla",
            Variant::BiglaTwoPass => "bigla_two_pass",
            Variant::GlaVim => "gla_vim",
            Variant::Softmax => "softmax",
        }
    }

    pub fn flops(self, t: u64, d: u64) -> u64 {
        match self {
            Variant::Bigla | Variant::BiglaTwoPass => flops_bigla(t, d),
            Variant::GlaVim => 2 * flops_gla(t, d),
            Variant::Softmax => flops_softmax_attn(t, d),
        }
    }

    pub fn params(self, d: usize) -> u64 {
        (match self {
            Variant::Bigla | Variant::BiglaTwoPass => bigla_layer_params(d),
            Variant::GlaVim => 2 * gla_layer_params(d),
            Variant::Softmax => 4 * d * d,
        }) as u64
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub variant: Variant,
    pub t: usize,
    pub d: usize,
    pub flops: u64,
    pub params: u64,
    pub peak_mem_bytes: u64,
    pub wall_ms: Vec<f64>,
}

impl CostReport {
    pub fn median_ms(&self) -> f64 {
        let mut s = self.wall_ms.clone();
        s.sort_by(f64::total_cmp);
        match s.len() {
            0 => f64::NAN,
            n if n % 2 == 1 => s[n / 2],
            n => 0.5 * (s[n / 2 - 1] + s[n / 2]),
        }
    }

    pub fn min_ms(&self) -> f64 {
        self.wall_ms.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn row(&self) -> CostRow {
        CostRow {
            variant: self.variant.name().to_string(),
            t: self.t,
            d: self.d,
            flops: self.flops,
            params: self.params,
            peak_mem_bytes: self.peak_mem_bytes,
            wall_ms_median: self.median_ms(),
            wall_ms_min: self.min_ms(),
        }
    }
}

/// One CSV record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub variant: String,
    #[serde(rename = "T")]
    pub t: usize,
    pub d: usize,
    pub flops: u64,
    pub params: u64,
    pub peak_mem_bytes: u64,
    pub wall_ms_median: f64,
    pub wall_ms_min: f64,
}

pub const CSV_HEADER: &str = "variant,T,d,flops,params,peak_mem_bytes,wall_ms_median,wall_ms_min";

pub fn write_csv<W: Write>(out: W, rows: &[CostRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))
            .map_err(|e| Error::format("csv", e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::format("csv", e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a CSV written by [`write_csv`], checking the header exactly.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<CostRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| Error::format("csv", e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(Error::format("csv", format!("unexpected header {header:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format("csv", e.to_string())))
        .collect()
}

/// Random single-precision weights for one attention-style layer.
struct LayerWeights {
    w_q: Vec<f32>,
    w_k: Vec<f32>,
    w_v: Vec<f32>,
    w_o: Vec<f32>,
    w1: Vec<f32>,
    w2: Vec<f32>,
    bias: Vec<f32>,
    dk: usize,
    dv: usize,
    gate_width: usize,
}

fn randn32(n: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng) as f32).collect()
}

impl LayerWeights {
    fn new(d: usize, dk: usize, dv: usize, gate_width: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            w_q: randn32(d * dk, std, rng),
            w_k: randn32(d * dk, std, rng),
            w_v: randn32(d * dv, std, rng),
            w_o: randn32(dv * d, 1.0 / (dv as f64).sqrt(), rng),
            w1: randn32(d * GATE_RANK, std, rng),
            w2: randn32(GATE_RANK * gate_width, 0.25, rng),
            bias: vec![2.0; gate_width],
            dk,
            dv,
            gate_width,
        }
    }

    fn project(&self, x: &[f32], t: usize, d: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let xm = MatRef::new(x, t, d);
        (
            gemm(xm, MatRef::new(&self.w_q, d, self.dk)),
            gemm(xm, MatRef::new(&self.w_k, d, self.dk)),
            gemm(xm, MatRef::new(&self.w_v, d, self.dv)),
        )
    }

    fn gates(&self, x: &[f32], t: usize, d: usize) -> Vec<f32> {
        let hidden = gemm(MatRef::new(x, t, d), MatRef::new(&self.w1, d, GATE_RANK));
        let z = gemm(MatRef::new(&hidden, t, GATE_RANK), MatRef::new(&self.w2, GATE_RANK, self.gate_width));
        z.iter()
            .enumerate()
            .map(|(i, &z)| {
                let a = gate_scalar((z + self.bias[i % self.gate_width]) as f64, GATE_TEMPERATURE) as f32;
                a.max(f32::MIN_POSITIVE)
            })
            .collect()
    }

    fn output(&self, o: &[f64], t: usize, d: usize) -> Vec<f32> {
        let o32: Vec<f32> = o.iter().map(|&v| v as f32).collect();
        gemm(MatRef::new(&o32, t, self.dv), MatRef::new(&self.w_o, self.dv, d))
    }
}

/// A ready-to-run layer of one variant over a fixed input.
pub struct BenchLayer {
    variant: Variant,
    t: usize,
    d: usize,
    heads: usize,
    chunk: usize,
    x: Vec<f32>,
    weights: Vec<LayerWeights>,
}

impl BenchLayer {
    pub fn new(variant: Variant, t: usize, d: usize, heads: usize, seed: u64) -> Result<Self> {
        let layout = HeadLayout::new(d, heads)?;
        if t == 0 {
            return Err(Error::InvalidArgument("bench: T must be ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dk, dv) = (layout.key_dim(), layout.value_dim());
        let weights = match variant {
            Variant::Bigla | Variant::BiglaTwoPass => vec![LayerWeights::new(d, dk, dv, 2 * dk, &mut rng)],
            Variant::GlaVim => vec![
                LayerWeights::new(d, dk, dv, dk, &mut rng),
                LayerWeights::new(d, dk, dv, dk, &mut rng),
            ],
            Variant::Softmax => vec![LayerWeights::new(d, d, d, 1, &mut rng)],
        };
        Ok(Self {
            variant,
            t,
            d,
            heads,
            chunk: DEFAULT_CHUNK,
            x: randn32(t * d, 1.0, &mut rng),
            weights,
        })
    }

    /// One forward pass; returns the output and the scan's own accounting.
    pub fn run(&self) -> (Vec<f32>, ScanMemory) {
        let (t, d, heads) = (self.t, self.d, self.heads);
        match self.variant {
            Variant::Bigla | Variant::BiglaTwoPass => {
                let w = &self.weights[0];
                let (q, k, v) = w.project(&self.x, t, d);
                let a = w.gates(&self.x, t, d);
                let (dk, dv) = (w.dk, w.dv);
                let (hk, hv) = (dk / heads, dv / heads);
                let mut out = vec![0.0; t * dv];
                let mut mem = ScanMemory::default();
                for h in 0..heads {
                    let io = ScanInputs {
                        q: MatRef::new(&q, t, dk).cols_slice(h * hk, hk),
                        k: MatRef::new(&k, t, dk).cols_slice(h * hk, hk),
                        v: MatRef::new(&v, t, dv).cols_slice(h * hv, hv),
                        alpha: MatRef::new(&a, t, 2 * dk).cols_slice(h * hk, hk),
                    };
                    let a_bwd = MatRef::new(&a, t, 2 * dk).cols_slice(dk + h * hk, hk);
                    let mut o = MatMut::new(&mut out, t, dv).cols_slice(h * hv, hv);
                    let m = if self.variant == Variant::Bigla {
                        scan::bigla_fused_scan(io, a_bwd, self.chunk, &mut o, None)
                    } else {
                        scan::bigla_two_pass_scan(io, a_bwd, Some(self.chunk), &mut o)
                    };
                    mem.merge_peak(m);
                }
                (w.output(&out, t, d), mem)
            }
            Variant::GlaVim => {
                let mut acc = vec![0.0f32; t * d];
                let mut mem = ScanMemory::default();
                for (w, dir) in self.weights.iter().zip([Direction::Forward, Direction::Backward]) {
                    let (q, k, v) = w.project(&self.x, t, d);
                    let a = w.gates(&self.x, t, d);
                    let (dk, dv) = (w.dk, w.dv);
                    let (hk, hv) = (dk / heads, dv / heads);
                    let mut out = vec![0.0; t * dv];
                    for h in 0..heads {
                        let io = ScanInputs {
                            q: MatRef::new(&q, t, dk).cols_slice(h * hk, hk),
                            k: MatRef::new(&k, t, dk).cols_slice(h * hk, hk),
                            v: MatRef::new(&v, t, dv).cols_slice(h * hv, hv),
                            alpha: MatRef::new(&a, t, dk).cols_slice(h * hk, hk),
                        };
                        let mut state = vec![0.0; hk * hv];
                        let mut o = MatMut::new(&mut out, t, dv).cols_slice(h * hv, hv);
                        mem.merge_peak(scan::scan_chunkwise(io, dir, self.chunk, &mut state, &mut o, 1.0));
                    }
                    for (a, y) in acc.iter_mut().zip(w.output(&out, t, d)) {
                        *a += 0.5 * y;
                    }
                }
                (acc, mem)
            }
            Variant::Softmax => {
                let w = &self.weights[0];
                let (q, k, v) = w.project(&self.x, t, d);
                let scale = 1.0 / (d as f32).sqrt();
                let q: Vec<f32> = q.iter().map(|x| x * scale).collect();
                let out = softmax_attention_streaming(
                    MatRef::new(&q, t, d),
                    MatRef::new(&k, t, d),
                    MatRef::new(&v, t, d),
                    SOFTMAX_ROW_BLOCK,
                );
                (w.output(&out, t, d), ScanMemory::default())
            }
        }
    }

    /// Analytic peak of live buffers during [`Self::run`], in bytes.
    pub fn peak_memory_bytes(&self) -> u64 {
        peak_memory_bytes(self.variant, self.t, self.d, self.heads, self.chunk)
    }
}

/// Auxiliary bytes the fused bidirectional scan allocates for one head.
pub fn fused_scan_aux_bytes(t: usize, hk: usize, hv: usize, chunk: usize) -> usize {
    let c = chunk.min(t.max(1));
    let nb = t.div_ceil(chunk.max(1));
    let summaries = 8 * nb * (hk * hv + hk);
    let states = 8 * 4 * hk * hv;
    let scratch = 8 * (c * hk + hk + c) + 8 * c;
    summaries + states + scratch
}

/// Auxiliary bytes of the two-pass reference for one head, `E`-byte storage.
pub fn two_pass_aux_bytes(t: usize, hk: usize, hv: usize, chunk: usize, elem: usize) -> usize {
    let c = chunk.min(t.max(1));
    let reversed = elem * t * (3 * hk + hv) + 8 * t * hv;
    reversed + 8 * hk * hv + 8 * (c * hk + hk + c) + 8 * c
}

/// Auxiliary bytes of a single-direction chunkwise scan for one head.
pub fn chunkwise_aux_bytes(t: usize, hk: usize, hv: usize, chunk: usize) -> usize {
    let c = chunk.min(t.max(1));
    8 * hk * hv + 8 * (c * hk + hk + c) + 8 * c
}

/// Analytic peak memory of one variant's forward pass (single precision
/// activations, double accumulators and scan state).
pub fn peak_memory_bytes(variant: Variant, t: usize, d: usize, heads: usize, chunk: usize) -> u64 {
    const E: usize = 4;
    let (dk, dv) = (d / 2, d);
    let (hk, hv) = (dk / heads, dv / heads);
    let input = E * t * d;
    let bytes = match variant {
        Variant::Bigla | Variant::BiglaTwoPass => {
            let acts = E * t * (2 * dk + dv) + E * t * (GATE_RANK + 2 * dk) + 8 * t * dv + E * t * dv + E * t * d;
            let aux = if variant == Variant::Bigla {
                fused_scan_aux_bytes(t, hk, hv, chunk)
            } else {
                two_pass_aux_bytes(t, hk, hv, chunk, E)
            };
            input + acts + aux
        }
        Variant::GlaVim => {
            let per_layer = E * t * (2 * dk + dv) + E * t * (GATE_RANK + dk) + 8 * t * dv + E * t * dv + E * t * d;
            input + E * t * d + per_layer + chunkwise_aux_bytes(t, hk, hv, chunk)
        }
        Variant::Softmax => {
            let b = SOFTMAX_ROW_BLOCK.min(t);
            let acts = E * t * 3 * d + E * t * d + E * d * t + 8 * b * t + E * b * t + 8 * t * d + E * t * d + E * t * d;
            input + acts
        }
    };
    bytes as u64
}

/// Timing options for [`scaling_sweep`].
#[derive(Clone, Debug, PartialEq)]
pub struct SweepOptions {
    pub repeats: usize,
    pub warmups: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            repeats: 3,
            warmups: 2,
            heads: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SweepResult {
    pub reports: Vec<CostReport>,
    /// Non-fatal problems, such as timings too close to the clock's resolution.
    pub warnings: Vec<String>,
}

/// Smallest nonzero step observed on the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Times every `(variant, T)` pair at width `d`, sequentially.
pub fn scaling_sweep(variants: &[Variant], ts: &[usize], d: usize, opts: &SweepOptions) -> Result<SweepResult> {
    if opts.repeats < 3 {
        return Err(Error::InvalidArgument(format!("repeats must be ≥ 3, got {}", opts.repeats)));
    }
    let resolution = timer_resolution();
    let mut result = SweepResult::default();
    for &variant in variants {
        for &t in ts {
            let layer = BenchLayer::new(variant, t, d, opts.heads, opts.seed)?;
            for _ in 0..opts.warmups {
                std::hint::black_box(layer.run());
            }
            let mut samples = Vec::with_capacity(opts.repeats);
            for _ in 0..opts.repeats {
                let start = Instant::now();
                std::hint::black_box(layer.run());
                samples.push(start.elapsed());
            }
            let min = samples.iter().min().copied().unwrap_or_default();
            if min < resolution * 1000 {
                result.warnings.push(format!(
                    "{} at T={t}: fastest run {min:?} is within 1000× of the timer resolution {resolution:?}",
                    variant.name()
                ));
            }
            result.reports.push(CostReport {
                variant,
                t,
                d,
                flops: variant.flops(t as u64, d as u64),
                params: variant.params(d),
                peak_mem_bytes: layer.peak_memory_bytes(),
                wall_ms: samples.iter().map(|s| s.as_secs_f64() * 1e3).collect(),
            });
        }
    }
    Ok(result)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::InvalidArgument("slope fit needs ≥ 2 positive points".into()));
    }
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("slope fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

/// Fitted wall-time exponent of one variant from sweep reports.
pub fn time_exponent(reports: &[CostReport], variant: Variant) -> Result<f64> {
    let pts: Vec<(f64, f64)> = reports
        .iter()
        .filter(|r| r.variant == variant)
        .map(|r| (r.t as f64, r.median_ms()))
        .collect();
    loglog_slope(&pts)
}
