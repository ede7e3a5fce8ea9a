use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use vig_core::bench::{self, SweepOptions, Variant};
use vig_core::block::Mixer;
use vig_core::model::{param_count, vig_forward, vig_forward_at_resolution, ViGConfig};
use vig_core::train::{self, SyntheticTask, TaskFamily, TrainOptions, METRICS_HEADER};
use vig_core::{ppm, suite, weights};

#[derive(Parser, Debug)]
#[command(name = "vig", version, about = "Bidirectional gated linear attention for images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the randomized equivalence and gradient suites.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Closed-form FLOPs of one layer.
    Flops {
        #[arg(long = "seq")]
        seq: u64,
        #[arg(long = "dim")]
        dim: u64,
    },
    /// Itemized parameter count of a preset.
    Params {
        #[arg(long, value_parser = ["vig-t", "vig-s", "vig-b"])]
        config: String,
    },
    /// Wall-time and memory sweep over sequence lengths.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = ["bigla".to_string(), "softmax".to_string()])]
        variants: Vec<String>,
        /// Sequence lengths; defaults to the tokens of 224…2048 px images.
        #[arg(long = "seq-lens", value_delimiter = ',')]
        seq_lens: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 1)]
        heads: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 2)]
        warmups: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train the desk-scale model on a synthetic task.
    Train {
        #[arg(long, default_value = "bars")]
        task: String,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seed of the task generator (held-out split included).
        #[arg(long, default_value_t = 0)]
        task_seed: u64,
        #[arg(long, value_enum, default_value_t = MixerArg::Full)]
        mixer: MixerArg,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 100)]
        eval_every: usize,
        #[arg(long)]
        save: Option<PathBuf>,
        /// Metrics CSV destination; stdout if omitted.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Classify a PPM image with saved weights.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MixerArg {
    Full,
    LocalOnly,
}

impl From<MixerArg> for Mixer {
    fn from(m: MixerArg) -> Self {
        match m {
            MixerArg::Full => Mixer::Full,
            MixerArg::LocalOnly => Mixer::LocalOnly,
        }
    }
}

fn check(seed: u64) -> Result<bool> {
    let mut all = true;
    for outcome in suite::run_all(seed)? {
        println!("{outcome}");
        all &= outcome.passed;
    }
    Ok(all)
}

fn flops(seq: u64, dim: u64) -> Result<()> {
    if seq == 0 || dim == 0 {
        bail!("--seq and --dim must be ≥ 1");
    }
    println!("bigla {}", bench::flops_bigla(seq, dim));
    println!("softmax {}", bench::flops_softmax_attn(seq, dim));
    println!("gla {}", bench::flops_gla(seq, dim));
    println!("gla_vim {}", Variant::GlaVim.flops(seq, dim));
    Ok(())
}

fn params(name: &str) -> Result<()> {
    let config = ViGConfig::preset(name).with_context(|| format!("unknown preset {name}"))?;
    let count = param_count(&config)?;
    for (item, n) in &count.items {
        println!("{item:<28} {n:>12}");
    }
    let total = count.total();
    println!("{:<28} {total:>12} ({:.2}M)", "total", total as f64 / 1e6);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_bench(
    variants: &[String],
    seq_lens: &[usize],
    dim: usize,
    heads: usize,
    repeats: usize,
    warmups: usize,
    csv: Option<&PathBuf>,
) -> Result<()> {
    let variants = variants.iter().map(|v| v.parse::<Variant>()).collect::<Result<Vec<_>, _>>()?;
    let ts: Vec<usize> = if seq_lens.is_empty() {
        bench::SWEEP_RESOLUTIONS.iter().map(|&r| bench::resolution_to_tokens(r)).collect()
    } else {
        seq_lens.to_vec()
    };
    let opts = SweepOptions {
        repeats,
        warmups,
        heads,
        ..Default::default()
    };
    let result = bench::scaling_sweep(&variants, &ts, dim, &opts)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    let rows: Vec<_> = result.reports.iter().map(|r| r.row()).collect();
    match csv {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            bench::write_csv(BufWriter::new(file), &rows)?;
        }
        None => bench::write_csv(io::stdout().lock(), &rows)?,
    }
    if ts.len() > 1 {
        for v in variants {
            eprintln!("{} wall-time exponent {:.3}", v.name(), bench::time_exponent(&result.reports, v)?);
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    task: &str,
    steps: usize,
    seed: u64,
    task_seed: u64,
    mixer: MixerArg,
    batch_size: usize,
    eval_every: usize,
    save: Option<&PathBuf>,
    metrics: Option<&PathBuf>,
) -> Result<()> {
    let task = match task.parse::<TaskFamily>()? {
        TaskFamily::OrientedBar => SyntheticTask::bars(task_seed),
        TaskFamily::BlobPair => SyntheticTask::blobs(task_seed),
    };
    let config = ViGConfig {
        mixer: mixer.into(),
        ..task.model_config()
    };
    let opts = TrainOptions {
        steps,
        batch_size,
        eval_every,
        ..Default::default()
    };
    let mut out: Box<dyn Write> = match metrics {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    };
    writeln!(out, "{METRICS_HEADER}")?;
    let history = train::train_with(&config, &task, &opts, seed, None, |r| {
        writeln!(out, "{}", train::metrics_line(r))?;
        Ok(())
    })?;
    out.flush()?;
    if let Some(acc) = history.final_accuracy() {
        eprintln!("final held-out accuracy {acc:.4}");
    }
    if let Some(path) = save {
        weights::save(path, &config, &history.params)?;
        eprintln!("saved {}", path.display());
    }
    Ok(())
}

fn infer(weights_path: &PathBuf, image: &PathBuf) -> Result<()> {
    let (config, params) = weights::load(weights_path).with_context(|| format!("loading {}", weights_path.display()))?;
    let img = ppm::load(image).with_context(|| format!("reading {}", image.display()))?;
    let logits = if img.shape()[..2] == [config.image_height, config.image_width] {
        vig_forward(&img, &params, &config)?
    } else {
        vig_forward_at_resolution(&img, &params, &config)?
    };
    let best = train::argmax(&logits);
    let values: Vec<String> = logits.data().iter().map(|v| format!("{v:.6}")).collect();
    println!("logits {}", values.join(" "));
    println!("class {best}");
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Check { seed } => return check(seed),
        Command::Flops { seq, dim } => flops(seq, dim)?,
        Command::Params { config } => params(&config)?,
        Command::Bench {
            variants,
            seq_lens,
            dim,
            heads,
            repeats,
            warmups,
            csv,
        } => run_bench(&variants, &seq_lens, dim, heads, repeats, warmups, csv.as_ref())?,
        Command::Train {
            task,
            steps,
            seed,
            task_seed,
            mixer,
            batch_size,
            eval_every,
            save,
            metrics,
        } => run_train(
            &task,
            steps,
            seed,
            task_seed,
            mixer,
            batch_size,
            eval_every,
            save.as_ref(),
            metrics.as_ref(),
        )?,
        Command::Infer { weights, image } => infer(&weights, &image)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
