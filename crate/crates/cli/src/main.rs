use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use attmask_core::checkpoint::{load_checkpoint, load_for_resume, TrainingState};
use attmask_core::data::{make_synthetic, save_dataset};
use attmask_core::eval::{
    export_image_attention, extract_features, few_example_knn, knn_classify, masked_inference_eval,
};
use attmask_core::train::{
    load_full_dataset, prepare_data, run_training, MetricsRow, TrainOptions,
};
use attmask_core::{Error, MaskingMode, RngState, RunConfig};

mod pnm;

/// Environment variable that replaces the configured output directory.
const OUT_DIR_ENV: &str = "ATTMASK_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "attmask",
    version,
    about = "Attention-guided masked image modeling on a CPU budget"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a student/teacher pair.
    Pretrain(PretrainArgs),
    /// Evaluate frozen teacher features from a checkpoint.
    Eval(EvalArgs),
    /// Write attention maps and strategy mask overlays for one image.
    ExportAttn(ExportArgs),
    /// Generate a synthetic shape dataset in AMIM format.
    MakeSynth(SynthArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Resume from this checkpoint directory.
    #[arg(long, conflicts_with = "resume_latest")]
    resume: Option<PathBuf>,
    /// Resume from the newest checkpoint in the output directory, if any.
    #[arg(long)]
    resume_latest: bool,
    /// Stop after this many completed steps.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Print progress every N steps (0: silent).
    #[arg(long, default_value_t = 25)]
    log_every: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Knn,
    FewShot,
    MaskedInference,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Attention,
    Random,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint directory (holding manifest.json and params.bin).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    protocol: Protocol,
    /// Neighbours; defaults to the configured value.
    #[arg(long)]
    k: Option<usize>,
    /// Examples per class for few-shot, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10])]
    shots: Vec<usize>,
    /// Masking ratios for masked inference, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0f64, 0.1, 0.3, 0.5, 0.7])]
    ratios: Vec<f64>,
    #[arg(long, value_enum, default_value = "attention")]
    mode: ModeArg,
    /// Report path; defaults to eval-<protocol>.json in the output directory.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Index into the configured dataset.
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    index: Option<usize>,
    /// Binary PPM (P6) or PGM (P5) image at the model resolution.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Layer to capture, 1-based; defaults to the last.
    #[arg(long)]
    layer: Option<usize>,
    /// Masking ratio for the strategy overlays.
    #[arg(long, default_value_t = 0.5)]
    ratio: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 500)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    side: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Usage and configuration problems exit with 1, everything else with 2.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Range { .. } | Error::Parameter(_) => 1,
        _ => 2,
    }
}

fn env_out_dir() -> Option<PathBuf> {
    std::env::var_os(OUT_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(dir) = env_out_dir() {
        cfg.output_dir = dir;
    }
    Ok(cfg)
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn pretrain(a: PretrainArgs) -> Result<(), Error> {
    let mut cfg = load_config(&a.config, a.seed)?;
    if let Some(dir) = a.output_dir {
        cfg.output_dir = dir;
    }
    let every = a.log_every;
    let mut log = |r: &MetricsRow| {
        if every > 0 && r.step.is_multiple_of(every) {
            let m = &r.metrics;
            eprintln!(
                "step {:>6} epoch {:>3} loss {:.4} (mim {:.4} g {:.4} lc {:.4}) lr {:.3e} masked {:.3}",
                r.step, r.epoch, m.loss_total, m.loss_mim, m.loss_g, m.loss_lc, m.lr, m.masked_fraction
            );
        }
    };
    let opts = TrainOptions {
        resume: a.resume,
        resume_latest: a.resume_latest,
        max_steps: a.max_steps,
        on_step: Some(&mut log),
    };
    let s = run_training(&cfg, opts)?;
    let last = s.rows.last().map(|r| r.metrics.loss_total);
    println!(
        "{}",
        json!({
            "output_dir": s.output_dir,
            "steps_completed": s.state.step,
            "total_steps": s.total_steps,
            "final_loss": last,
        })
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Error> {
    let cfg = load_config(&a.config, a.seed)?;
    let state: TrainingState = load_for_resume(&a.checkpoint, &cfg)?;
    let (train, holdout) = prepare_data(&cfg)?;
    if holdout.is_empty() {
        return Err(Error::config(
            "data.holdout_fraction",
            "evaluation needs a non-empty holdout split",
        ));
    }
    let teacher = &state.pair.teacher;
    let source = cfg.eval.source;
    let bank = extract_features(&cfg.model, teacher, &train, source)?;
    let k = a.k.unwrap_or(cfg.eval.k).min(bank.len());
    let rng = RngState::new(cfg.seed);
    let (name, parameters, results) = match a.protocol {
        Protocol::Knn => {
            let q = extract_features(&cfg.model, teacher, &holdout, source)?;
            let r = knn_classify(&bank, &q, k)?;
            (
                "knn",
                json!({ "k": k }),
                vec![json!({ "k": k, "accuracy": r.accuracy })],
            )
        }
        Protocol::FewShot => {
            let q = extract_features(&cfg.model, teacher, &holdout, source)?;
            let mut out = Vec::new();
            for &nu in &a.shots {
                let mut r = rng.stream("few-shot", nu as u64);
                let acc = few_example_knn(&bank, &q, k, nu, &mut r)?;
                out.push(json!({ "shots": nu, "accuracy": acc }));
            }
            ("few-shot", json!({ "k": k, "shots": a.shots }), out)
        }
        Protocol::MaskedInference => {
            let mode = match a.mode {
                ModeArg::Attention => MaskingMode::Attention,
                ModeArg::Random => MaskingMode::Random,
            };
            let accs = masked_inference_eval(
                &cfg.model, teacher, teacher, &bank, &holdout, &a.ratios, mode, k, &rng,
            )?;
            let mode_name = match a.mode {
                ModeArg::Attention => "attention",
                ModeArg::Random => "random",
            };
            let out = accs
                .iter()
                .map(|&(r, acc)| json!({ "ratio": r, "accuracy": acc }))
                .collect();
            (
                "masked-inference",
                json!({ "k": k, "mode": mode_name, "ratios": a.ratios }),
                out,
            )
        }
    };
    let report = json!({
        "protocol": name,
        "checkpoint": a.checkpoint,
        "step": state.step,
        "feature_source": source,
        "bank_size": bank.len(),
        "query_size": holdout.len(),
        "parameters": parameters,
        "results": results,
    });
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    let path = a
        .report
        .unwrap_or_else(|| cfg.output_dir.join(format!("eval-{name}.json")));
    write(&path, format!("{text}\n").as_bytes())?;
    println!("{text}");
    Ok(())
}

fn export_attn(a: ExportArgs) -> Result<(), Error> {
    let state = load_checkpoint(&a.checkpoint)?;
    let cfg = &state.config;
    let model = &cfg.model;
    let (img, stem) = match (&a.image, a.index) {
        (Some(p), _) => {
            let img = pnm::read(p, model.image_side, model.channels)?;
            let stem = p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("image")
                .to_string();
            (img, stem)
        }
        (None, Some(i)) => {
            let ds = load_full_dataset(cfg)?;
            if i >= ds.len() {
                return Err(Error::Range {
                    what: "image index",
                    value: i as i64,
                    lo: 0,
                    hi: ds.len() as i64 - 1,
                });
            }
            (ds.image(i).to_vec(), format!("img{i:05}"))
        }
        (None, None) => unreachable!("clap requires --index or --image"),
    };
    let layer = a.layer.unwrap_or(model.depth);
    let out = a
        .out
        .or_else(env_out_dir)
        .unwrap_or_else(|| cfg.output_dir.join("attention"));
    let rng = RngState::new(cfg.seed);
    let files = export_image_attention(
        model,
        &state.pair.teacher,
        &img,
        layer,
        &cfg.masking,
        a.ratio,
        &rng,
        &out,
        &stem,
    )?;
    println!(
        "{}",
        json!({
            "layer": layer,
            "maps": files.maps,
            "overlays": files.overlays,
        })
    );
    Ok(())
}

fn make_synth(a: SynthArgs) -> Result<(), Error> {
    let mut rng = RngState::new(a.seed).stream("synthetic", 0);
    let ds = make_synthetic(a.classes, a.per_class, a.side, a.channels, &mut rng)?;
    save_dataset(&ds, &a.out)?;
    println!(
        "{}",
        json!({ "path": a.out, "count": ds.len(), "classes": ds.classes })
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Pretrain(a) => pretrain(a),
        Command::Eval(a) => eval(a),
        Command::ExportAttn(a) => export_attn(a),
        Command::MakeSynth(a) => make_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
