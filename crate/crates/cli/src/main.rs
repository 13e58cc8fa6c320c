//! `vitfiqa`: synth → train → score/embed → edc, plus verification commands.

mod svg;

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vitfiqa::config::RunConfig;
use vitfiqa::data::{synth_generate, Manifest, Split, SynthSpec};
use vitfiqa::eval::{self, PairQuality};
use vitfiqa::gradcheck::{check_model_gradients, ModelCheckOptions};
use vitfiqa::infer::infer_manifest;
use vitfiqa::train::{train, write_metrics, Checkpoint};
use vitfiqa::vit::Variant;
use vitfiqa::{Error, Result};

/// Gradient checks pass below this relative error.
const GRADCHECK_TOL: f64 = 1e-4;
/// Identity count for the gradient-check model.
const GRADCHECK_CLASSES: usize = 5;

#[derive(Parser)]
#[command(
    name = "vitfiqa",
    version,
    about = "Face image quality with a ViT quality token"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic face-like dataset with graded degradations.
    Synth(SynthArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Write one predicted quality score per manifest entry.
    Score(InferArgs),
    /// Write one face embedding per manifest entry.
    Embed(InferArgs),
    /// Error-versus-discard curve, AUC and pAUC30.
    Edc(EdcArgs),
    /// Finite-difference check of the full model gradient at 64-bit.
    Gradcheck(GradcheckArgs),
    /// Run the built-in worked-example fixtures.
    Selftest,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    identities: usize,
    #[arg(long, default_value_t = 20)]
    per_identity: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of each identity's images written to eval.csv.
    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    /// Blur σ at full degradation, as a fraction of the image side.
    #[arg(long)]
    max_blur: Option<f64>,
    /// Downscale factor at full degradation.
    #[arg(long)]
    max_downscale: Option<f64>,
    /// Peak noise amplitude (8-bit levels) at full degradation.
    #[arg(long)]
    max_noise: Option<f64>,
    /// Peak per-sample jitter amplitude in 8-bit levels.
    #[arg(long)]
    jitter: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metrics CSV (default: next to the checkpoint).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EdcArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    fmr: f64,
    #[arg(long)]
    out: PathBuf,
    /// Summary CSV (default: `<out stem>.summary.csv`).
    #[arg(long)]
    summary: Option<PathBuf>,
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long, default_value_t = eval::DEFAULT_DMAX)]
    dmax: f64,
    /// How two image qualities combine into a pair quality: min or mean.
    #[arg(long, default_value = "min")]
    pair_quality: PairQuality,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corrupts one analytic gradient entry; the check must then fail.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Honors VITFIQA_THREADS (positive integer) for the worker pool.
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("VITFIQA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        usage(format!(
            "VITFIQA_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(e.to_string()))
}

fn usage(msg: impl Display) -> Error {
    Error::Config(msg.to_string())
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_infer(a, false),
        Command::Embed(a) => cmd_infer(a, true),
        Command::Edc(a) => cmd_edc(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Selftest => cmd_selftest(),
    }
    .map(|passed| {
        if passed {
            ExitCode::SUCCESS
        } else {
            ExitCode::from(4)
        }
    })
}

fn cmd_synth(a: SynthArgs) -> Result<bool> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        identities: a.identities,
        per_identity: a.per_identity,
        size: a.size,
        seed: a.seed,
        max_blur: a.max_blur.unwrap_or(d.max_blur),
        max_downscale: a.max_downscale.unwrap_or(d.max_downscale),
        max_noise: a.max_noise.unwrap_or(d.max_noise),
        jitter: a.jitter.unwrap_or(d.jitter),
        ..d
    };
    spec.validate()?;
    let manifest = synth_generate(&spec, &a.out)?;
    let (train_split, eval_split) = manifest.holdout(a.holdout)?;
    train_split.write(&a.out.join("train.csv"))?;
    eval_split.write(&a.out.join("eval.csv"))?;
    let pairs = eval::all_pairs(&eval_split);
    eval::write_pairs(&a.out.join("pairs.csv"), &pairs)?;
    let genuine = pairs.iter().filter(|p| p.genuine).count();
    println!("manifest: {}", a.out.join("manifest.csv").display());
    println!(
        "images: {} ({} identities x {}), train {}, eval {}, eval pairs {} ({} genuine)",
        manifest.len(),
        a.identities,
        a.per_identity,
        train_split.len(),
        eval_split.len(),
        pairs.len(),
        genuine
    );
    Ok(true)
}

fn cmd_train(a: TrainArgs) -> Result<bool> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(d) = &a.data {
        cfg.data = d.display().to_string();
    }
    if let Some(o) = &a.out {
        cfg.out = o.display().to_string();
    }
    if let Some(m) = &a.metrics {
        cfg.metrics = m.display().to_string();
    }
    if cfg.data.is_empty() || cfg.out.is_empty() {
        return Err(usage(
            "training needs --data and --out (or train.data and train.out)",
        ));
    }
    let out = PathBuf::from(&cfg.out);
    let metrics = if cfg.metrics.is_empty() {
        out.with_extension("metrics.csv")
    } else {
        PathBuf::from(&cfg.metrics)
    };
    let mut manifest = Manifest::read(Path::new(&cfg.data), Split::Train)?;
    manifest.remap_identities();
    let outcome = train(&cfg, &manifest, |ck| {
        ck.save(&out)?;
        println!("checkpoint at step {}: {}", ck.step, out.display());
        Ok(())
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(Error::NonFinite { step }) => {
            return Err(Error::NonFinite { step }).inspect_err(|_| {
                eprintln!(
                    "training aborted; {} holds the last good checkpoint, if any",
                    out.display()
                )
            })
        }
        Err(e) => return Err(e),
    };
    write_metrics(&metrics, &outcome.metrics)?;
    if let (Some(first), Some(last)) = (outcome.metrics.first(), outcome.metrics.last()) {
        println!(
            "loss {:.6} -> {:.6} over {} steps",
            first.loss, last.loss, last.step
        );
    }
    println!("metrics: {}", metrics.display());
    Ok(true)
}

fn cmd_infer(a: InferArgs, embed: bool) -> Result<bool> {
    let ck = Checkpoint::<f32>::load(&a.ckpt)?;
    let manifest = Manifest::read(&a.data, Split::Eval)?;
    let results = infer_manifest(&ck.params, &manifest)?;
    if embed {
        let rows: Vec<(String, Vec<f64>)> =
            results.into_iter().map(|r| (r.id, r.embedding)).collect();
        eval::write_embeddings(&a.out, &rows)?;
    } else {
        let rows: Vec<(String, f64)> = results.into_iter().map(|r| (r.id, r.quality)).collect();
        eval::write_scores(&a.out, &rows)?;
    }
    println!(
        "{} rows ({} variant): {}",
        manifest.len(),
        ck.params.config.variant,
        a.out.display()
    );
    Ok(true)
}

fn cmd_edc(a: EdcArgs) -> Result<bool> {
    let embeddings = eval::read_embeddings(&a.embeddings)?;
    let scores = eval::read_scores(&a.scores)?;
    let pairs = eval::read_pairs(&a.pairs)?;
    if pairs.is_empty() {
        return Err(Error::Contract(format!("{}: no pairs", a.pairs.display())));
    }
    if !(a.dmax > 0.0 && a.dmax < 1.0) {
        return Err(usage(format!("--dmax {} outside (0, 1)", a.dmax)));
    }
    let set = eval::build_comparison_set(&embeddings, &scores, &pairs, a.pair_quality)?;
    let mut grid = eval::default_grid(a.dmax);
    if *grid.last().expect("nonempty") < a.dmax {
        grid.push(a.dmax);
    }
    let (curve, summary) = eval::evaluate(&set, a.fmr, &grid, a.dmax, a.pair_quality)?;
    std::fs::write(&a.out, eval::curve_to_csv(&curve)?).map_err(|e| io(&a.out, e))?;
    let summary_path = a.summary.unwrap_or_else(|| {
        let stem = a
            .out
            .file_stem()
            .map_or("edc".into(), |s| s.to_string_lossy().into_owned());
        a.out.with_file_name(format!("{stem}.summary.csv"))
    });
    std::fs::write(&summary_path, eval::summary_to_csv(&summary)?)
        .map_err(|e| io(&summary_path, e))?;
    if let Some(svg) = &a.svg {
        std::fs::write(svg, svg::edc_svg(&curve, &summary)).map_err(|e| io(svg, e))?;
    }
    let t = &summary.threshold;
    println!(
        "tau {} (FMR {} at target {}{}), AUC {:.6}, pAUC30 {:.6}, {} genuine / {} impostor",
        t.tau,
        t.achieved_fmr,
        t.target_fmr,
        if t.unsaturated { ", unsaturated" } else { "" },
        summary.auc,
        summary.pauc30,
        summary.genuine,
        summary.impostor
    );
    Ok(true)
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::toy(),
    };
    let opts = ModelCheckOptions {
        inject_fault: a.inject_fault,
        ..ModelCheckOptions::default()
    };
    let mut ok = true;
    for variant in [Variant::QualityToken, Variant::Embedding] {
        let mut run = cfg.clone();
        run.variant = variant;
        let model = run.model_config(GRADCHECK_CLASSES);
        let started = std::time::Instant::now();
        let r = check_model_gradients(model, &cfg.loss, &opts)?;
        let pass = r.passes(GRADCHECK_TOL);
        ok &= pass;
        println!(
            "variant {variant}: max relative error {:.3e} over {} coordinates ({:.1} s) {}",
            r.max_rel_error,
            r.coordinates,
            started.elapsed().as_secs_f64(),
            if pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn cmd_selftest() -> Result<bool> {
    let checks = vitfiqa::selftest::run();
    let mut ok = true;
    for c in &checks {
        ok &= c.passed;
        if c.detail.is_empty() {
            println!("{} {}", if c.passed { "PASS" } else { "FAIL" }, c.name);
        } else {
            println!(
                "{} {}: {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            );
        }
    }
    println!(
        "{}/{} fixtures passed",
        checks.iter().filter(|c| c.passed).count(),
        checks.len()
    );
    Ok(ok)
}
