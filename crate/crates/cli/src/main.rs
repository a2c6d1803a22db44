use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use qpan_core::blocks::{abs_difference, paisa_image, reconstruct_image};
use qpan_core::checkpoint::{load_checkpoint, save_checkpoint};
use qpan_core::metrics::{psnr, ssim};
use qpan_core::penalties::{grid_argmin, MixtureWeights, PenaltyKind, PenaltySpec};
use qpan_core::pgm::{load_pgm, save_pgm};
use qpan_core::quantize::refresh_quantized_views;
use qpan_core::solver::SolverConfig;
use qpan_core::synth::synthetic_images;
use qpan_core::train::{extract_patches, init_from_config, train, TrainConfig, TrainHooks};
use qpan_core::transforms::PanTransform;
use qpan_core::{make_sensing, NetworkModel, SensingOperator, Variant};

#[derive(Parser)]
#[command(name = "qpan", version, about = "Compressed sensing recovery with proximal averaging networks")]
struct Cli {
    /// Report errors as a JSON object on stderr.
    #[arg(long, global = true)]
    json: bool,
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare every closed-form prox against a brute-force grid search.
    Proxcheck(ProxcheckArgs),
    /// Block-wise PAISA solve of one image; writes the iteration trace as CSV.
    Paisa(PaisaArgs),
    /// Train a network with ADAM, optionally quantization aware.
    Train(TrainArgs),
    /// Sense and reconstruct one image with a trained checkpoint.
    Reconstruct(ReconstructArgs),
    /// PSNR/SSIM of a checkpoint over a directory of images.
    Eval(EvalArgs),
}

#[derive(Args)]
struct ProxcheckArgs {
    #[arg(long, default_value_t = 1000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    /// Exit with an error when the deviation exceeds this.
    #[arg(long, default_value_t = 2e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct PaisaArgs {
    #[arg(long)]
    cs_ratio: f64,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    /// Comma-separated subset of l1, mcp, scad.
    #[arg(long, value_delimiter = ',', default_value = "l1,mcp,scad")]
    penalties: Vec<String>,
    /// Convex weights, one per penalty. Uniform when omitted.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Threshold for every penalty, or one per penalty.
    #[arg(long, value_delimiter = ',', default_value = "0.01")]
    lambda: Vec<f64>,
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    #[arg(long = "scad-a", default_value_t = 3.7)]
    scad_a: f64,
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    #[arg(long, default_value_t = 33)]
    block: usize,
    /// Channels of the identity analysis transform.
    #[arg(long, default_value_t = 4)]
    filters: usize,
    /// Seed of the sensing matrix.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trace CSV path; stdout when omitted.
    #[arg(long)]
    trace: Option<PathBuf>,
    input: PathBuf,
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with TrainConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of PGM training images.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    data: Option<PathBuf>,
    /// Train on this many generated piecewise-smooth images instead.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Side length of the generated images.
    #[arg(long, default_value_t = 64)]
    synthetic_size: usize,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch JSON lines; defaults to train_log.jsonl in the checkpoint directory.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    regs: Option<usize>,
    /// 1..8, or "full" for full precision.
    #[arg(long)]
    bits: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    filters: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    cs_ratio: Option<f64>,
    #[arg(long)]
    gamma_loss: Option<f64>,
    #[arg(long)]
    val_fraction: Option<f64>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    model: PathBuf,
    /// Must match the ratio the checkpoint was trained for.
    #[arg(long)]
    cs_ratio: f64,
    /// Also write `|x_hat - x|` here, treating the input as ground truth.
    #[arg(long)]
    diff: Option<PathBuf>,
    input: PathBuf,
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also write the table as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write `<name>_diff.pgm` difference images into this directory.
    #[arg(long)]
    diff_dir: Option<PathBuf>,
    /// Table format on stdout.
    #[arg(long, value_parser = ["text", "csv"], default_value = "text")]
    format: String,
}

fn main() -> ExitCode {
    let json = std::env::args().any(|a| a == "--json");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if json && !matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
                report_json("usage", &e.kind().to_string(), &e.to_string());
                return ExitCode::from(2);
            }
            e.exit();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let run = match cli.command {
        Command::Proxcheck(a) => proxcheck(a),
        Command::Paisa(a) => paisa(a),
        Command::Train(a) => train_cmd(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Eval(a) => eval(a),
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if cli.json {
                let kind = error_kind(&e);
                let causes: Vec<String> = e.chain().map(|c| c.to_string()).collect();
                report_json(kind, &causes[0], &causes.join(": "));
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::FAILURE
        }
    }
}

fn report_json(kind: &str, message: &str, detail: &str) {
    let v = serde_json::json!({ "error": { "kind": kind, "message": message, "detail": detail } });
    eprintln!("{v}");
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<qpan_core::Error>() {
            return match err {
                qpan_core::Error::Shape { .. } => "shape",
                qpan_core::Error::InvalidParameter(_) => "invalid_parameter",
                qpan_core::Error::StaleTape { .. } => "stale_tape",
                qpan_core::Error::StaleQuantizedView => "stale_quantized_view",
                qpan_core::Error::NonFiniteLoss { .. } => "non_finite_loss",
                qpan_core::Error::Format { .. } => "format",
                qpan_core::Error::Io(_) => "io",
                qpan_core::Error::Json(_) => "json",
            };
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<serde_json::Error>() {
            return "json";
        }
    }
    "error"
}

fn proxcheck(a: ProxcheckArgs) -> Result<()> {
    ensure!(a.draws > 0, "need at least one draw");
    ensure!(a.step > 0.0, "grid step must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let kinds = [PenaltyKind::L1, PenaltyKind::Mcp, PenaltyKind::Scad];
    let mut worst = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for _ in 0..a.draws {
        let k = rng.random_range(0..3);
        let lambda = rng.random_range(0.05..2.0);
        let spec = match kinds[k] {
            PenaltyKind::L1 => PenaltySpec::l1(lambda)?,
            PenaltyKind::Mcp => PenaltySpec::mcp(lambda, rng.random_range(1.1..5.0))?,
            PenaltyKind::Scad => PenaltySpec::scad(lambda, rng.random_range(2.1..6.0))?,
        };
        let x = rng.random_range(-8.0..8.0);
        let dev = (spec.prox(x) - grid_argmin(&spec, x, 12.0, a.step)).abs();
        worst[k] = worst[k].max(dev);
        counts[k] += 1;
    }
    for k in 0..3 {
        println!("{:<5} draws {:>5}  max deviation {:.3e}", kinds[k].to_string(), counts[k], worst[k]);
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    println!("max deviation {max:.3e}");
    ensure!(max <= a.tolerance, "deviation {max:.3e} exceeds tolerance {:.1e}", a.tolerance);
    Ok(())
}

fn penalty_specs(names: &[String], lambdas: &[f64], gamma: f64, scad_a: f64) -> Result<Vec<PenaltySpec>> {
    ensure!(!names.is_empty(), "no penalties given");
    ensure!(
        lambdas.len() == 1 || lambdas.len() == names.len(),
        "give one lambda or one per penalty ({} penalties, {} lambdas)",
        names.len(),
        lambdas.len()
    );
    names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let kind: PenaltyKind = n.parse()?;
            let lambda = lambdas[if lambdas.len() == 1 { 0 } else { i }];
            let shape = match kind {
                PenaltyKind::Mcp => gamma,
                _ => scad_a,
            };
            Ok(PenaltySpec::of_kind(kind, lambda, shape)?)
        })
        .collect()
}

fn paisa(a: PaisaArgs) -> Result<()> {
    let img = load_pgm(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let specs = penalty_specs(&a.penalties, &a.lambda, a.gamma, a.scad_a)?;
    let alphas = match a.alphas {
        Some(v) => MixtureWeights::new(v)?,
        None => MixtureWeights::uniform(specs.len()),
    };
    ensure!(a.filters > 0, "filter count must be positive");
    let op = make_sensing(a.block * a.block, a.cs_ratio, a.seed)?;
    let cfg = SolverConfig {
        iterations: a.iters,
        rho: a.rho,
        penalties: specs,
        alphas,
        transform: PanTransform::identity(a.filters),
        patch: (a.block, a.block),
    };
    let (out, trace) = paisa_image(&cfg, &op, &img)?;
    save_pgm(&a.output, &out).with_context(|| format!("writing {}", a.output.display()))?;
    let sink: Box<dyn Write> = match &a.trace {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for t in &trace {
        w.serialize(t)?;
    }
    w.flush()?;
    eprintln!(
        "PSNR {:.2} dB, SSIM {}",
        psnr(&out, &img, 1.0)?,
        ssim(&out, &img).map_or("n/a".into(), |s| format!("{s:.4}"))
    );
    Ok(())
}

fn parse_bits(s: &str) -> Result<Option<u8>> {
    if s == "full" {
        return Ok(None);
    }
    let b: u8 = s.parse().with_context(|| format!("bits must be 1..8 or \"full\", got {s:?}"))?;
    qpan_core::quantize::check_bits(b)?;
    Ok(Some(b))
}

fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
        .collect();
    files.sort();
    ensure!(!files.is_empty(), "no .pgm files in {}", dir.display());
    Ok(files)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => serde_json::from_slice(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig::default(),
    };
    macro_rules! apply {
        ($($field:ident),*) => {
            $(if let Some(v) = a.$field { cfg.$field = v; })*
        };
    }
    apply!(variant, regs, epochs, batch_size, lr, seed, layers, filters, patch_size, stride, cs_ratio, gamma_loss, val_fraction);
    if let Some(b) = &a.bits {
        cfg.bits = parse_bits(b)?;
    }
    cfg.validate()?;
    let images = match (&a.data, a.synthetic) {
        (Some(dir), _) => pgm_files(dir)?
            .iter()
            .map(|p| load_pgm(p).with_context(|| format!("reading {}", p.display())))
            .collect::<Result<Vec<_>>>()?,
        (None, Some(n)) => synthetic_images(n, a.synthetic_size, a.synthetic_size, cfg.seed),
        (None, None) => bail!("give --data or --synthetic"),
    };
    let patches = extract_patches(&images, cfg.patch_size, cfg.stride, cfg.seed)?;
    ensure!(!patches.is_empty(), "no {0}x{0} patches fit in the training images", cfg.patch_size);
    let (mut model, op) = init_from_config(&cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.join("train_log.jsonl"));
    let mut log = std::io::BufWriter::new(
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let report = train(&mut model, &op, &patches, &cfg, TrainHooks { observer: None, log: Some(&mut log) })?;
    log.flush()?;
    refresh_quantized_views(&mut model)?;
    save_checkpoint(&a.out, &model, &op)?;
    let mut text = serde_json::to_string_pretty(&cfg)?;
    text.push('\n');
    fs::write(a.out.join("config.json"), text)?;
    let last = report.epochs.last();
    eprintln!(
        "trained {} epochs on {} patches ({} held out) in {:.1} s; final loss {}, val PSNR {}",
        report.epochs.len(),
        report.train_patches,
        report.val_patches,
        report.wall_clock_s,
        last.map_or("n/a".into(), |e| format!("{:.4e}", e.train_loss)),
        last.and_then(|e| e.val_psnr_db).map_or("n/a".into(), |p| format!("{p:.2} dB")),
    );
    Ok(())
}

fn load_model(dir: &Path) -> Result<(NetworkModel, SensingOperator)> {
    load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let (model, op) = load_model(&a.model)?;
    ensure!(
        (op.meta().cs_ratio - a.cs_ratio).abs() < 1e-12,
        "checkpoint was trained for CS ratio {}, not {}",
        op.meta().cs_ratio,
        a.cs_ratio
    );
    let img = load_pgm(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let out = reconstruct_image(&model, &op, &img)?;
    save_pgm(&a.output, &out).with_context(|| format!("writing {}", a.output.display()))?;
    if let Some(d) = &a.diff {
        save_pgm(d, &abs_difference(&out, &img)?).with_context(|| format!("writing {}", d.display()))?;
    }
    println!(
        "psnr_db={:.4} ssim={}",
        psnr(&out, &img, 1.0)?,
        ssim(&out, &img).map_or("n/a".into(), |s| format!("{s:.4}"))
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    image: String,
    cs_ratio: f64,
    bits: String,
    variant: String,
    psnr_db: f64,
    ssim: f64,
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, op) = load_model(&a.model)?;
    let bits = model.bits().map_or("full".to_string(), |b| b.to_string());
    let variant = model.variant().to_string();
    let cs_ratio = op.meta().cs_ratio;
    if let Some(d) = &a.diff_dir {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let mut rows = Vec::new();
    for path in pgm_files(&a.data)? {
        let img = load_pgm(&path).with_context(|| format!("reading {}", path.display()))?;
        let out = reconstruct_image(&model, &op, &img)?;
        let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        if let Some(d) = &a.diff_dir {
            let stem = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            let target = d.join(format!("{stem}_diff.pgm"));
            save_pgm(&target, &abs_difference(&out, &img)?)?;
            log::info!("wrote {}", target.display());
        }
        rows.push(EvalRow {
            image: name,
            cs_ratio,
            bits: bits.clone(),
            variant: variant.clone(),
            psnr_db: psnr(&out, &img, 1.0)?,
            ssim: ssim(&out, &img).with_context(|| format!("SSIM of {}", path.display()))?,
        });
    }
    let n = rows.len() as f64;
    rows.push(EvalRow {
        image: "mean".into(),
        cs_ratio,
        bits,
        variant,
        psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    });
    if let Some(p) = &a.csv {
        write_csv(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?, &rows)?;
    }
    if a.format == "csv" {
        write_csv(std::io::stdout().lock(), &rows)?;
    } else {
        let width = rows.iter().map(|r| r.image.len()).max().unwrap_or(5).max(5);
        println!("{:<width$}  {:>8}  {:>4}  {:>7}  {:>9}  {:>7}", "image", "cs_ratio", "bits", "variant", "psnr_db", "ssim");
        for r in &rows {
            println!(
                "{:<width$}  {:>8}  {:>4}  {:>7}  {:>9.3}  {:>7.4}",
                r.image, r.cs_ratio, r.bits, r.variant, r.psnr_db, r.ssim
            );
        }
    }
    Ok(())
}

fn write_csv<W: Write>(sink: W, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
