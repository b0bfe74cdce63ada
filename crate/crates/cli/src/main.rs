use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dksg::data::pnm::{self, PnmImage};
use dksg::data::synth::{generate_synthetic, SyntheticSpec};
use dksg::data::{self, Sample};
use dksg::metrics::{aggregate, report, Aggregation, REPORT_COLUMNS};
use dksg::model::SegModel;
use dksg::tensor::{worker_threads, THREADS_ENV};
use dksg::train::{evaluate, run_training, TrainConfig, CHECKPOINT_FILE, LOG_FILE};
use dksg::{gradcheck, selftest, Tape, Tensor};

/// Polyp segmentation with encoder attention and a dynamic kernel head.
#[derive(Parser)]
#[command(name = "dksg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic polyp dataset (images/*.ppm, masks/*.pgm).
    GenData {
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Draw no ellipses, giving all-zero masks.
        #[arg(long)]
        empty: bool,
    },
    /// Train on a dataset directory and write checkpoint, log and config.
    Train {
        /// `key = value` config file; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-image metrics of a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Summarise with metrics of the summed counts instead of the mean.
        #[arg(long)]
        pooled: bool,
    },
    /// Segment one image and write a binary PGM mask of the same size.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the 5×5 encoder attention matrix as CSV.
        #[arg(long)]
        dump_attn: Option<PathBuf>,
        /// Write per-stage mean gate and kernel L2 norm as CSV.
        #[arg(long)]
        dump_kernel: Option<PathBuf>,
    },
    /// Finite-difference check of every op and of the full model loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Worked examples, module oracles and structural invariants.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Nearest positive multiple of 32.
fn network_size(n: usize) -> usize {
    ((n + 16) / 32).max(1) * 32
}

fn gen_data(count: usize, size: usize, seed: u64, out: &Path, empty: bool) -> Result<()> {
    let mut spec = SyntheticSpec { count, image_size: size, seed, ..SyntheticSpec::default() };
    if empty {
        spec.ellipses = (0, 0);
    }
    let stats = generate_synthetic(&spec, out)?;
    println!("wrote {} samples to {} (mean foreground {:.4})", stats.count, out.display(), stats.mean_foreground);
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    eprintln!("training with {} worker thread(s) ({THREADS_ENV})", worker_threads());
    let start = Instant::now();
    let outcome = run_training(&cfg, data, out, |e| eprintln!("{} ({:.0}s)", e.csv_row(), start.elapsed().as_secs_f64()))?;
    println!(
        "best epoch {} val dice {:.4}; wrote {} and {} in {}",
        outcome.best_epoch,
        outcome.best_val_dice,
        CHECKPOINT_FILE,
        LOG_FILE,
        out.display()
    );
    Ok(())
}

fn eval(checkpoint: &Path, data_dir: &Path, out: &Path, pooled: bool) -> Result<()> {
    let model = SegModel::<f32>::load(checkpoint)?;
    let samples: Vec<Sample<f32>> = data::load_dataset(data_dir)?
        .into_iter()
        .map(|s: Sample<f32>| {
            let (h, w) = (network_size(s.height()), network_size(s.width()));
            s.resized(h, w)
        })
        .collect();
    if samples.is_empty() {
        bail!("no samples in {}", data_dir.display());
    }
    let counts = evaluate(&model, &samples, 8)?;
    let mut csv = format!("id,{}\n", REPORT_COLUMNS.join(","));
    let row = |csv: &mut String, id: &str, values: [f64; 8]| {
        let cells: Vec<String> = values.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(csv, "{id},{}", cells.join(",")).unwrap();
    };
    for (s, c) in samples.iter().zip(&counts) {
        row(&mut csv, &s.id, report(c).values());
    }
    let (label, mode) = if pooled { ("POOLED", Aggregation::Pooled) } else { ("MEAN", Aggregation::PerImage) };
    let summary = aggregate(&counts, mode);
    row(&mut csv, label, summary.values());
    write_file(out, &csv)?;
    println!("{label} over {} images: {summary}", samples.len());
    Ok(())
}

fn predict(checkpoint: &Path, image: &Path, out: &Path, dump_attn: Option<&Path>, dump_kernel: Option<&Path>) -> Result<()> {
    let model = SegModel::<f32>::load(checkpoint)?;
    let img: Tensor<f32> = pnm::load_image(image)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (nh, nw) = (network_size(h), network_size(w));
    let input = data::resize_image(&img, nh, nw).reshape([1, 3, nh, nw])?;

    let tape = Tape::new();
    let fwd = model.forward(&tape, &tape.constant(input))?;
    let logits = fwd.head.primary().logits.upsample_bilinear(2)?.value().reshape([1, nh, nw])?;
    let logits = data::resize_image(&logits, h, w);
    let pixels = logits.data().iter().map(|v| if *v > 0.0 { 255 } else { 0 }).collect();
    pnm::write(out, &PnmImage { width: w, height: h, channels: 1, pixels })?;
    println!("wrote {}x{} mask to {}", w, h, out.display());

    if let Some(path) = dump_attn {
        let Some(att) = fwd.context.attention else {
            bail!("checkpoint has no encoder attention to dump");
        };
        let att = att.value();
        let mut csv = String::new();
        for r in att.data().chunks(5) {
            let cells: Vec<String> = r.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(csv, "{}", cells.join(",")).unwrap();
        }
        write_file(path, &csv)?;
    }
    if let Some(path) = dump_kernel {
        let mut csv = String::from("stage,mean_gate,l2_kernel\n");
        for (i, k) in fwd.head.kernels.iter().enumerate() {
            let gate = match i {
                0 => String::new(),
                _ => {
                    let g = fwd.head.gates[i - 1].value();
                    format!("{:.6}", g.sum_f64() / g.numel() as f64)
                }
            };
            let l2 = k.k.value().data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            writeln!(csv, "{},{gate},{l2:.6}", k.stage).unwrap();
        }
        write_file(path, &csv)?;
    }
    Ok(())
}

fn run_gradcheck(seed: u64) -> Result<bool> {
    let start = Instant::now();
    let results = gradcheck::run(seed)?;
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!("{status} {:<28} max rel err {:.3e} ({} probes, {} across a relu kink skipped)", r.name, r.max_rel_err, r.checked, r.skipped);
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!(
        "{} of {} checks passed (threshold {:e}) in {:.1}s",
        results.len() - failed,
        results.len(),
        gradcheck::THRESHOLD,
        start.elapsed().as_secs_f64()
    );
    Ok(failed == 0)
}

fn run_selftest(seed: u64) -> bool {
    let checks = selftest::run_all(seed);
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    failed == 0
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { count, size, seed, out, empty } => gen_data(count, size, seed, &out, empty)?,
        Command::Train { config, data, out } => train(config.as_deref(), &data, &out)?,
        Command::Eval { checkpoint, data, out, pooled } => eval(&checkpoint, &data, &out, pooled)?,
        Command::Predict { checkpoint, image, out, dump_attn, dump_kernel } => {
            predict(&checkpoint, &image, &out, dump_attn.as_deref(), dump_kernel.as_deref())?
        }
        Command::Gradcheck { seed } => return run_gradcheck(seed),
        Command::Selftest { seed } => return Ok(run_selftest(seed)),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": ").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
