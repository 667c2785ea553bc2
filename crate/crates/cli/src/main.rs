//! `qk`: calibrate, quantize, analyse and fine-tune chain models.
//!
//! Exit codes: 0 on success, 1 on error, 2 when `ptq` finds no
//! calibration method within `--accept-drop` of the fp32 baseline.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use manifest::RunManifest;
use qkit_core::calib::{CalibrationMethod, DEFAULT_BINS};
use qkit_core::qat::{train_logged, TrainConfig};
use qkit_core::toy::{poison_hidden_unit, toy_bundle};
use qkit_core::workflow::{
    calibrate_model, evaluate, gelu10_rewrite, partial_quantize, quantized_copy, run_ptq,
    sensitivity_scan,
};
use qkit_core::{CalibrationCache, Dataset, Error, Metric, Model, PtqReport, SensitivityReport};

#[derive(Debug, Parser)]
#[command(name = "qk", version, about = "Integer quantization workflow for chain models")]
struct Cli {
    /// Seed for every random choice (toy data, QAT shuffling).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for evaluation and sensitivity scans.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Where to write the run manifest (default: next to the first output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodName {
    Max,
    Entropy,
    Percentile,
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone)]
struct MethodList(Vec<CalibrationMethod>);

fn parse_methods(s: &str) -> Result<MethodList, String> {
    s.split(',')
        .map(|m| m.trim().parse().map_err(|e: Error| e.to_string()))
        .collect::<Result<_, _>>()
        .map(MethodList)
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the bundled two-moons MLP and write it with its datasets.
    MakeToy {
        #[arg(long)]
        out_dir: PathBuf,
        /// Rescale one hidden unit by this factor (1 leaves the model as
        /// trained). The fp32 function is unchanged.
        #[arg(long, default_value_t = 1024.0)]
        poison_factor: f64,
        #[arg(long, default_value_t = 0)]
        poison_unit: usize,
    },
    /// Replace every GELU with GELU clipped at 10.
    Gelu10 {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate the input range of every quantizable layer.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        method: MethodName,
        /// Fraction kept by percentile calibration.
        #[arg(long, default_value_t = 0.9999)]
        fraction: f64,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Post-training quantization with each calibration method.
    Ptq {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        /// Comma-separated, e.g. `max,entropy,percentile=0.9999`
        /// (default: max, entropy, 99.99% and 99.999% percentile).
        #[arg(long, value_parser = parse_methods)]
        methods: Option<MethodList>,
        /// `top1` or `mse=<threshold>`.
        #[arg(long, default_value = "top1", value_parser = parse_metric)]
        metric: Metric,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        /// Largest acceptable relative accuracy drop.
        #[arg(long, default_value_t = 0.01)]
        accept_drop: f64,
        #[arg(long)]
        report: PathBuf,
        /// Calibration cache of the best method.
        #[arg(long)]
        cache: PathBuf,
        /// Quantized model using the best cache.
        #[arg(long)]
        model_out: Option<PathBuf>,
    },
    /// Accuracy with one layer quantized at a time.
    Sensitivity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long, default_value = "top1", value_parser = parse_metric)]
        metric: Metric,
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave the most sensitive layers in floating point until the target
    /// accuracy is met.
    Partial {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        /// Report from `ptq`; supplies the fp32 baseline.
        #[arg(long)]
        ptq_report: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        /// Report from `sensitivity`; computed when absent.
        #[arg(long)]
        sensitivity: Option<PathBuf>,
        /// Accuracy floor (default: baseline reduced by `--accept-drop`).
        #[arg(long)]
        target: Option<f64>,
        #[arg(long, default_value_t = 0.01)]
        accept_drop: f64,
        #[arg(long, default_value = "top1", value_parser = parse_metric)]
        metric: Metric,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        skip_list: PathBuf,
    },
    /// Quantization-aware fine-tuning.
    ///
    /// An fp32 model is quantized everywhere with the cache first; a model
    /// with quantized layers keeps its configuration.
    Qat {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Also learn the activation ranges.
        #[arg(long)]
        learn_ranges: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print accuracy in percent.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "top1", value_parser = parse_metric)]
        metric: Metric,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::MakeToy { .. } => "make-toy",
            Command::Gelu10 { .. } => "gelu10",
            Command::Calibrate { .. } => "calibrate",
            Command::Ptq { .. } => "ptq",
            Command::Sensitivity { .. } => "sensitivity",
            Command::Partial { .. } => "partial",
            Command::Qat { .. } => "qat",
            Command::Eval { .. } => "eval",
        }
    }

    /// (inputs, outputs)
    fn paths(&self) -> (Vec<PathBuf>, Vec<PathBuf>) {
        let p = |x: &PathBuf| x.clone();
        match self {
            Command::MakeToy { out_dir, .. } => (vec![], toy_paths(out_dir).to_vec()),
            Command::Gelu10 { model, out } => (vec![p(model)], vec![p(out)]),
            Command::Calibrate { model, data, out, .. } => (vec![p(model), p(data)], vec![p(out)]),
            Command::Ptq { model, calib, eval, report, cache, model_out, .. } => (
                vec![p(model), p(calib), p(eval)],
                [p(report), p(cache)].into_iter().chain(model_out.clone()).collect(),
            ),
            Command::Sensitivity { model, cache, eval, out, .. } => {
                (vec![p(model), p(cache), p(eval)], vec![p(out)])
            }
            Command::Partial { model, cache, ptq_report, eval, sensitivity, out, skip_list, .. } => (
                [p(model), p(cache), p(ptq_report), p(eval)]
                    .into_iter()
                    .chain(sensitivity.clone())
                    .collect(),
                vec![p(out), p(skip_list)],
            ),
            Command::Qat { model, cache, data, out, .. } => {
                (vec![p(model), p(cache), p(data)], vec![p(out)])
            }
            Command::Eval { model, data, .. } => (vec![p(model), p(data)], vec![]),
        }
    }
}

/// model, train, calib, eval
fn toy_paths(dir: &Path) -> [PathBuf; 4] {
    ["model.qkm", "train.qkd", "calib.qkd", "eval.qkd"].map(|f| dir.join(f))
}

enum Outcome {
    Done,
    /// The accuracy-acceptable check failed.
    NotAccepted,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Usage errors exit 1; 2 means "not accepted".
            return if e.use_stderr() { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QK_LOG", "warn")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("qk: error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }

    let (inputs, outputs) = cli.command.paths();
    let config = format!("{:?} seed={}", cli.command, cli.seed);
    let mut manifest = RunManifest::new(cli.command.name(), &config, inputs, outputs);
    let start = Instant::now();
    let result = run(&cli);
    manifest.wall_clock = start.elapsed();
    let code = match &result {
        Ok(Outcome::Done) => {
            manifest.status = "ok".into();
            ExitCode::SUCCESS
        }
        Ok(Outcome::NotAccepted) => {
            manifest.status = "not_accepted".into();
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("qk: error: {e:#}");
            manifest.status = format!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    };
    let path = cli.manifest.clone().unwrap_or_else(|| manifest.default_path());
    if let Err(e) = manifest.write(&path) {
        eprintln!("qk: error: writing manifest {}: {e}", path.display());
        return ExitCode::FAILURE;
    }
    code
}

fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::MakeToy { out_dir, poison_factor, poison_unit } => {
            if !(*poison_factor > 0.0 && poison_factor.is_finite()) {
                bail!("--poison-factor must be positive and finite");
            }
            let t = toy_bundle(cli.seed)?;
            let model = if *poison_factor == 1.0 {
                t.model
            } else {
                poison_hidden_unit(&t.model, *poison_unit, *poison_factor)?
            };
            std::fs::create_dir_all(out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            let [m, tr, ca, ev] = toy_paths(out_dir);
            model.write(&m)?;
            t.train.write(&tr)?;
            t.calib.write(&ca)?;
            t.eval.write(&ev)?;
            println!("fp32 accuracy: {:.2}", evaluate(&model, &t.eval, Metric::Top1)?);
        }
        Command::Gelu10 { model, out } => {
            gelu10_rewrite(&Model::read(model)?)?.write(out)?;
        }
        Command::Calibrate { model, data, method, fraction, bins, out } => {
            let method = match method {
                MethodName::Max => CalibrationMethod::Max,
                MethodName::Entropy => CalibrationMethod::Entropy,
                // The whole distribution is max calibration; record it so.
                MethodName::Percentile if *fraction == 1.0 => CalibrationMethod::Max,
                MethodName::Percentile => {
                    format!("percentile={fraction}").parse::<CalibrationMethod>()?
                }
            };
            let cache = calibrate_model(&Model::read(model)?, &Dataset::read(data)?, method, *bins)?;
            cache.write(out)?;
            info!("calibrated {} tensors with {method}", cache.len());
        }
        Command::Ptq {
            model, calib, eval, methods, metric, bins, accept_drop, report, cache, model_out,
        } => {
            let m = Model::read(model)?;
            let methods = methods.clone().map_or_else(CalibrationMethod::default_set, |l| l.0);
            let out = run_ptq(&m, &Dataset::read(calib)?, &Dataset::read(eval)?, &methods, *metric, *bins)?;
            out.report.write(report)?;
            out.best_cache().write(cache)?;
            if let Some(path) = model_out {
                quantized_copy(&m, out.best_cache())?.write(path)?;
            }
            print!("{}", out.report.render_table());
            if !out.report.accepts(*accept_drop) {
                println!(
                    "best relative change {:.2}% exceeds the accepted drop of {:.2}%",
                    100.0 * out.report.best_row().relative,
                    100.0 * accept_drop
                );
                return Ok(Outcome::NotAccepted);
            }
        }
        Command::Sensitivity { model, cache, eval, metric, out } => {
            let m = quantized_copy(&Model::read(model)?, &CalibrationCache::read(cache)?)?;
            let report = sensitivity_scan(&m, &Dataset::read(eval)?, *metric)?;
            report.write(out)?;
            print!("{}", report.render_table());
        }
        Command::Partial {
            model, cache, ptq_report, eval, sensitivity, target, accept_drop, metric, out, skip_list,
        } => {
            let ptq = PtqReport::read(ptq_report)?;
            let m = quantized_copy(&Model::read(model)?, &CalibrationCache::read(cache)?)?;
            let eval = Dataset::read(eval)?;
            let report = match sensitivity {
                Some(p) => SensitivityReport::read(p)?,
                None => sensitivity_scan(&m, &eval, *metric)?,
            };
            let target = target.unwrap_or(ptq.fp32_accuracy * (1.0 - accept_drop));
            let outcome = match partial_quantize(&m, &report, target, &eval, *metric) {
                Err(Error::Unreachable { target, trajectory }) => {
                    bail!("target accuracy {target:.3} unreachable; trajectory {trajectory:?}")
                }
                r => r?,
            };
            outcome.model.write(out)?;
            let mut text = format!("target: {target}\n");
            for name in &outcome.skipped {
                text += &format!("skipped: {name}\n");
            }
            for (n, acc) in &outcome.trajectory {
                text += &format!("trajectory: {n} {acc}\n");
            }
            std::fs::write(skip_list, &text)
                .with_context(|| format!("writing {}", skip_list.display()))?;
            print!("{text}");
        }
        Command::Qat { model, cache, data, epochs, lr, batch_size, learn_ranges, out } => {
            let cache = CalibrationCache::read(cache)?;
            let input = Model::read(model)?;
            let start = if input.enabled_layers().is_empty() {
                quantized_copy(&input, &cache)?
            } else {
                let mut m = input;
                m.attach_calibration(&cache);
                m
            };
            let cfg = TrainConfig {
                epochs: *epochs,
                lr: *lr,
                batch_size: *batch_size,
                seed: cli.seed,
                learn_ranges: *learn_ranges,
                ..Default::default()
            };
            let (trained, losses) = train_logged(&start, &Dataset::read(data)?, &cfg)?;
            for (e, l) in losses.iter().enumerate() {
                println!("epoch {}: loss {l:.6}", e + 1);
            }
            trained.write(out)?;
        }
        Command::Eval { model, data, metric } => {
            let acc = evaluate(&Model::read(model)?, &Dataset::read(data)?, *metric)?;
            println!("{acc:.4}");
        }
    }
    Ok(Outcome::Done)
}
