//! Command-line front end for the trajectory-diffusion pipeline.
//!
//! Every command reads the same flat TOML configuration (defaults apply when
//! the file or a key is absent) and an optional `--seed` override. Failures
//! print one JSON object to stderr and exit nonzero.

use clap::{Parser, Subcommand};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use trajdiff::config::PipelineConfig;
use trajdiff::denoiser::Denoiser;
use trajdiff::density::density_records;
use trajdiff::error::{Error, Result};
use trajdiff::intention::IntentionVector;
use trajdiff::io::{label_window_record, read_jsonl_file, write_jsonl_file, LabeledWindow};
use trajdiff::metrics::{ade, constant_velocity_baseline, evaluate_dataset, fde, Metrics};
use trajdiff::sampler::{predict_windows, IntentionSource, PredictionSet};
use trajdiff::trajdata::{build_windows, normalize, parse_scene_file, TrajectoryWindow};
use trajdiff::training::{
    append_metrics_row, prepare_training_set, train_loop, write_metrics_csv, TrainerState,
};

/// Prints a status line to stdout, ignoring write failures so piping into a
/// consumer that exits early (`trajdiff ... | head`) ends the command
/// cleanly instead of panicking.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(
    name = "trajdiff",
    version,
    about = "Intention-conditioned diffusion for pedestrian trajectory prediction"
)]
struct Cli {
    /// Pipeline configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Slice a raw scene log into observation/future windows.
    Ingest {
        /// Scene file: whitespace-separated frame, pedestrian id, x, y.
        #[arg(long)]
        input: PathBuf,
        /// Windows JSONL to write.
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate a synthetic turn-mixture dataset.
    Synth {
        /// Windows JSONL to write.
        #[arg(long)]
        output: PathBuf,
        /// Overrides `synth_count` from the configuration.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Attach intention labels derived from each window's future segment.
    Label {
        /// Windows JSONL to read.
        #[arg(long)]
        input: PathBuf,
        /// Labeled windows JSONL to write.
        #[arg(long)]
        output: PathBuf,
    },
    /// Train the denoiser; checkpoints land at --output every epoch.
    Train {
        /// Windows JSONL to read (labels are computed internally).
        #[arg(long)]
        input: PathBuf,
        /// Checkpoint path to write.
        #[arg(long)]
        output: PathBuf,
        /// Optimizer state path; defaults to the checkpoint path + ".state".
        #[arg(long)]
        state: Option<PathBuf>,
        /// Per-epoch loss CSV to write.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from the checkpoint and state at the output paths.
        #[arg(long)]
        resume: bool,
    },
    /// Sample candidate futures for every window.
    Predict {
        /// Windows JSONL to read.
        #[arg(long)]
        input: PathBuf,
        /// Checkpoint to load.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Predictions JSONL to write.
        #[arg(long)]
        output: PathBuf,
        /// Keep the chain state after every ladder hop for density export.
        #[arg(long)]
        record_intermediate: bool,
        /// Condition every window on fixed "lateral,longitudinal" codes
        /// instead of the model's own intention estimate.
        #[arg(long, value_name = "LAT,LON", allow_hyphen_values = true)]
        intention: Option<String>,
        /// Sample windows on all cores; output is identical to serial.
        #[arg(long)]
        parallel: bool,
    },
    /// Score predictions against ground-truth futures.
    Eval {
        /// Ground-truth windows JSONL.
        #[arg(long)]
        windows: PathBuf,
        /// Predictions JSONL from `predict`.
        #[arg(long)]
        predictions: PathBuf,
        /// Metrics JSON path; printed to stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also report the constant-velocity baseline on the same windows.
        #[arg(long)]
        baseline: bool,
    },
    /// Expand recorded intermediates into per-ladder-step sample clouds.
    ExportDensity {
        /// Predictions JSONL recorded with --record-intermediate.
        #[arg(long)]
        predictions: PathBuf,
        /// Density JSONL to write.
        #[arg(long)]
        output: PathBuf,
    },
    /// Write the noise schedule as CSV.
    ScheduleDump {
        /// CSV path; printed to stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let payload = serde_json::json!({
            "error": { "kind": e.kind(), "message": e.to_string() }
        });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Ingest { input, output } => ingest(&cfg, &input, &output),
        Command::Synth { output, count } => synth(&cfg, count, &output),
        Command::Label { input, output } => label(&cfg, &input, &output),
        Command::Train {
            input,
            output,
            state,
            metrics,
            resume,
        } => train(&cfg, &input, &output, state, metrics, resume),
        Command::Predict {
            input,
            checkpoint,
            output,
            record_intermediate,
            intention,
            parallel,
        } => predict(
            &cfg,
            &input,
            &checkpoint,
            &output,
            record_intermediate,
            intention.as_deref(),
            parallel,
        ),
        Command::Eval {
            windows,
            predictions,
            output,
            baseline,
        } => eval(&cfg, &windows, &predictions, output.as_deref(), baseline),
        Command::ExportDensity {
            predictions,
            output,
        } => export_density_cmd(&cfg, &predictions, &output),
        Command::ScheduleDump { output } => schedule_dump(&cfg, output.as_deref()),
    }
}

fn ingest(cfg: &PipelineConfig, input: &Path, output: &Path) -> Result<()> {
    let file = File::open(input).map_err(|e| Error::io(input, e))?;
    let scene = parse_scene_file(BufReader::new(file), cfg.frame_step).map_err(|e| match e {
        Error::Parse { line, msg } => Error::format(input, format!("line {line}: {msg}")),
        other => other,
    })?;
    let windows = build_windows(&scene, cfg.t_obs, cfg.t_fut, cfg.window_stride)?;
    write_jsonl_file(output, &windows)?;
    say!(
        "ingested {} tracks into {} windows -> {}",
        scene.tracks().len(),
        windows.len(),
        output.display()
    );
    Ok(())
}

fn synth(cfg: &PipelineConfig, count: Option<usize>, output: &Path) -> Result<()> {
    let mut spec = cfg.synthetic_spec();
    if let Some(count) = count {
        spec.count = count;
    }
    let windows = trajdiff::trajdata::generate_synthetic(&spec)?;
    write_jsonl_file(output, &windows)?;
    say!("generated {} windows -> {}", windows.len(), output.display());
    Ok(())
}

fn label(cfg: &PipelineConfig, input: &Path, output: &Path) -> Result<()> {
    let windows: Vec<TrajectoryWindow> = read_jsonl_file(input)?;
    let thresholds = cfg.thresholds();
    let labeled: Vec<LabeledWindow> = windows
        .iter()
        .map(|w| label_window_record(w, &thresholds, cfg.frame_step))
        .collect::<Result<_>>()?;
    write_jsonl_file(output, &labeled)?;

    let mut lat: BTreeMap<String, usize> = BTreeMap::new();
    let mut lon: BTreeMap<String, usize> = BTreeMap::new();
    for l in &labeled {
        *lat.entry(format!("{:?}", l.intention.label.lateral)).or_default() += 1;
        *lon.entry(format!("{:?}", l.intention.label.longitudinal)).or_default() += 1;
    }
    say!("labeled {} windows -> {}", labeled.len(), output.display());
    let fmt = |m: &BTreeMap<String, usize>| {
        m.iter()
            .map(|(k, v)| format!("{k} {v}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    say!("lateral: {}", fmt(&lat));
    say!("longitudinal: {}", fmt(&lon));
    Ok(())
}

fn state_path_for(output: &Path, state: Option<PathBuf>) -> PathBuf {
    state.unwrap_or_else(|| {
        let mut os = output.as_os_str().to_owned();
        os.push(".state");
        PathBuf::from(os)
    })
}

fn train(
    cfg: &PipelineConfig,
    input: &Path,
    output: &Path,
    state: Option<PathBuf>,
    metrics: Option<PathBuf>,
    resume: bool,
) -> Result<()> {
    let windows: Vec<TrajectoryWindow> = read_jsonl_file(input)?;
    let dataset = prepare_training_set(&windows, &cfg.thresholds(), cfg.frame_step)?;
    let sched = cfg.schedule()?;
    let tcfg = cfg.train_config();
    let state_path = state_path_for(output, state);

    let (mut model, mut trainer) = if resume {
        let model = Denoiser::load_checkpoint(output)?;
        if *model.config() != cfg.denoiser_config() {
            return Err(Error::validation(
                "checkpoint was trained with a different model configuration",
            ));
        }
        let trainer = TrainerState::load(&state_path)?;
        (model, trainer)
    } else {
        let model = Denoiser::init(cfg.denoiser_config(), tcfg.seed)?;
        let trainer = TrainerState::fresh(model.param_count());
        (model, trainer)
    };

    let mut metrics_out = match &metrics {
        Some(path) => {
            let file = if resume && path.exists() {
                File::options()
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?
            } else {
                let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
                write_metrics_csv(&[], &mut f).map_err(|e| Error::io(path, e))?;
                f
            };
            Some((path.clone(), file))
        }
        None => None,
    };

    say!(
        "training {} parameters on {} windows ({} epochs, batch {})",
        model.param_count(),
        dataset.len(),
        tcfg.epochs,
        tcfg.batch_size
    );
    train_loop(&mut model, &mut trainer, &dataset, &tcfg, &sched, |report, model, trainer| {
        say!(
            "epoch {:>4}  total {:<12.6}  intent {:<12.6}  diffusion {:<12.6}",
            report.epoch, report.total, report.intent_term, report.diffusion_term
        );
        model.save_checkpoint(output)?;
        trainer.save(&state_path)?;
        if let Some((path, file)) = metrics_out.as_mut() {
            append_metrics_row(report, file).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    })?;
    say!(
        "saved checkpoint -> {} and state -> {}",
        output.display(),
        state_path.display()
    );
    Ok(())
}

fn parse_intention(text: &str) -> Result<IntentionVector> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::validation(format!(
            "intention must be \"lateral,longitudinal\", got {text:?}"
        )));
    }
    let mut codes = [0.0f64; 2];
    for (slot, part) in codes.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::validation(format!("intention code {part:?}: {e}")))?;
        if !slot.is_finite() {
            return Err(Error::validation("intention codes must be finite"));
        }
    }
    Ok(IntentionVector::new(codes[0], codes[1]))
}

fn predict(
    cfg: &PipelineConfig,
    input: &Path,
    checkpoint: &Path,
    output: &Path,
    record_intermediate: bool,
    intention: Option<&str>,
    parallel: bool,
) -> Result<()> {
    let windows: Vec<TrajectoryWindow> = read_jsonl_file(input)?;
    let normalized: Vec<TrajectoryWindow> = windows.iter().map(normalize).collect();
    let model = Denoiser::load_checkpoint(checkpoint)?;
    let sched = cfg.schedule()?;
    let source = match intention {
        Some(text) => IntentionSource::Fixed(parse_intention(text)?),
        None => IntentionSource::Estimated,
    };
    let predictions = predict_windows(
        &model,
        &normalized,
        source,
        &cfg.guidance_config(),
        &cfg.sampler_config(),
        &sched,
        record_intermediate,
        parallel,
    )?;
    write_jsonl_file(output, &predictions)?;
    let evals: usize = predictions.iter().map(|p| p.stats.denoiser_evals_total).sum();
    say!(
        "predicted {} windows x {} samples ({} denoiser evals) -> {}",
        predictions.len(),
        cfg.n_samples,
        evals,
        output.display()
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct EvalReport {
    ade: f64,
    fde: f64,
    n_windows: usize,
    n_samples: usize,
    config_digest: String,
}

fn print_metric_table(title: &str, m: &Metrics) {
    say!("{title}");
    say!("  {:<10} {:>12}", "metric", "value");
    say!("  {:<10} {:>12.6}", "ade", m.ade);
    say!("  {:<10} {:>12.6}", "fde", m.fde);
    say!("  {:<10} {:>12}", "windows", m.n_windows);
    say!("  {:<10} {:>12}", "samples", m.n_samples);
}

fn eval(
    cfg: &PipelineConfig,
    windows_path: &Path,
    predictions_path: &Path,
    output: Option<&Path>,
    baseline: bool,
) -> Result<()> {
    let truths: Vec<TrajectoryWindow> = read_jsonl_file(windows_path)?;
    let predictions: Vec<PredictionSet> = read_jsonl_file(predictions_path)?;
    let m = evaluate_dataset(&predictions, &truths)?;
    print_metric_table("model (best-of-n)", &m);

    if baseline {
        let mut sum_ade = 0.0;
        let mut sum_fde = 0.0;
        for w in &truths {
            let cv = constant_velocity_baseline(&w.obs, w.fut.len())?;
            sum_ade += ade(&cv, &w.fut)?;
            sum_fde += fde(&cv, &w.fut)?;
        }
        let cv = Metrics {
            ade: sum_ade / truths.len() as f64,
            fde: sum_fde / truths.len() as f64,
            n_windows: truths.len(),
            n_samples: 1,
        };
        print_metric_table("constant-velocity baseline", &cv);
    }

    let report = EvalReport {
        ade: m.ade,
        fde: m.fde,
        n_windows: m.n_windows,
        n_samples: m.n_samples,
        config_digest: cfg.digest(),
    };
    let json = serde_json::to_string(&report)
        .map_err(|e| Error::validation(format!("serializing metrics: {e}")))?;
    match output {
        Some(path) => {
            std::fs::write(path, format!("{json}\n")).map_err(|e| Error::io(path, e))?;
            say!("metrics -> {}", path.display());
        }
        None => say!("{json}"),
    }
    Ok(())
}

fn export_density_cmd(cfg: &PipelineConfig, predictions_path: &Path, output: &Path) -> Result<()> {
    let predictions: Vec<PredictionSet> = read_jsonl_file(predictions_path)?;
    let records = density_records(&predictions, cfg.k_steps, cfg.sample_stride)?;
    write_jsonl_file(output, &records)?;
    say!(
        "exported {} density records ({} windows x {} ladder steps) -> {}",
        records.len(),
        predictions.len(),
        if predictions.is_empty() {
            0
        } else {
            records.len() / predictions.len()
        },
        output.display()
    );
    Ok(())
}

fn schedule_dump(cfg: &PipelineConfig, output: Option<&Path>) -> Result<()> {
    let sched = cfg.schedule()?;
    match output {
        Some(path) => {
            let file = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut out = BufWriter::new(file);
            sched.write_csv(&mut out).map_err(|e| Error::io(path, e))?;
            out.flush().map_err(|e| Error::io(path, e))?;
            say!(
                "wrote {}-step schedule -> {}",
                sched.num_steps(),
                path.display()
            );
        }
        None => {
            let stdout = std::io::stdout();
            match sched.write_csv(stdout.lock()) {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                other => other.map_err(|e| Error::io("<stdout>", e))?,
            }
        }
    }
    Ok(())
}
