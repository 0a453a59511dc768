//! The `ignet` command line: diagnose, train, evaluate and synthesize.
//!
//! Every command returns an [`Outcome`] rather than exiting, so the binary
//! and the tests share one code path. Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | config or model error |
//! | 2 | data error |
//! | 3 | diagnose: a loss-derivative MAV is outside the window |
//! | 4 | train: numerical divergence |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ignet_core::config::Config;
use ignet_core::data::{load_dir, save_dir, synth_dataset, CategoryTable, DataError, Sample};
use ignet_core::diagnose::{diagnose_with, render_report};
use ignet_core::init::init_weights;
use ignet_core::model_io::{decode_model, encode_model, Model};
use ignet_core::net::build_network;
use ignet_core::parallel::WorkerPool;
use ignet_core::seeds::stream;
use ignet_core::tensor::Dims;
use ignet_core::train::{
    build_examples, evaluate_with, train, ExampleSpec, Metrics, Task, TrainConfig, TrainError,
};
use ignet_core::{Example, FeatureMap, Network};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_OUT_OF_WINDOW: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

pub const MODEL_FILE: &str = "model.ign";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.txt";
pub const CATEGORIES_FILE: &str = "categories.txt";

// Stream tags for randomness owned by the CLI; the core uses 1..=6.
const TAG_INIT: u64 = 100;
const TAG_PROBE: u64 = 101;

/// Exit code plus the text destined for stdout (or stderr when non-zero
/// codes carry an error message).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Outcome {
            code: EXIT_OK,
            stdout,
            stderr: String::new(),
        }
    }

    fn fail(code: i32, message: impl std::fmt::Display) -> Self {
        Outcome {
            code,
            stdout: String::new(),
            stderr: format!("error: {message}\n"),
        }
    }
}

/// Options shared by the commands that read a config.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub task: Option<Task>,
}

fn load_config(opts: &RunOptions) -> Result<Config, Outcome> {
    let mut cfg = match &opts.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Outcome::fail(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
            Config::parse_with_task(&text, opts.task).map_err(|e| Outcome::fail(EXIT_CONFIG, format!("{}: {e}", path.display())))?
        }
        None => Config::parse_with_task("", opts.task).map_err(|e| Outcome::fail(EXIT_CONFIG, e))?,
    };
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(w) = opts.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

/// The data directory, or the synthetic corpus described by `synth.*`.
pub fn load_samples(cfg: &Config, data: Option<&Path>) -> Result<Vec<Sample>, Outcome> {
    match data {
        Some(dir) => load_dir(dir, &cfg.codes, Some((cfg.rows, cfg.cols))).map_err(|e| Outcome::fail(EXIT_DATA, e)),
        None => synth_dataset(cfg.synth.classes, cfg.synth.per_class, cfg.rows, cfg.cols, cfg.seed)
            .map_err(|e| Outcome::fail(EXIT_DATA, format!("synthetic corpus: {e}"))),
    }
}

pub fn example_spec(cfg: &Config, augment: bool) -> ExampleSpec {
    ExampleSpec {
        task: cfg.task,
        encoder: cfg.encoder.clone(),
        target_scale: cfg.target_scale,
        augment: if augment { cfg.augment } else { Default::default() },
        seed: cfg.seed,
    }
}

fn data_fail(e: DataError) -> Outcome {
    Outcome::fail(EXIT_DATA, e)
}

/// Resolves `units = auto`, builds the network and initializes it from the
/// config's amplitudes and seed.
pub fn build_model(cfg: &Config, table: &CategoryTable) -> Result<(Config, Network), Outcome> {
    let outputs = match cfg.task {
        Task::Classify => table.len(),
        Task::Regress => 1,
    };
    let mut resolved = cfg.clone();
    resolved.layers = cfg.resolved_layers(outputs);
    let mut net = build_network::<f64>(&resolved.layers, resolved.loss(), Dims::new(1, cfg.rows, cfg.cols))
        .map_err(|e| Outcome::fail(EXIT_CONFIG, format!("network: {e}")))?;
    let amps = resolved.amplitudes().map_err(|e| Outcome::fail(EXIT_CONFIG, e))?;
    init_weights(&mut net, &amps, &mut stream(cfg.seed, &[TAG_INIT])).map_err(|e| Outcome::fail(EXIT_CONFIG, e))?;
    Ok((resolved, net))
}

pub fn cmd_diagnose(opts: &RunOptions, probe: Option<usize>, report_path: Option<&Path>) -> Outcome {
    let run = || -> Result<Outcome, Outcome> {
        let mut cfg = load_config(opts)?;
        if let Some(p) = probe {
            if p == 0 {
                return Err(Outcome::fail(EXIT_CONFIG, "--probe must be at least 1"));
            }
            cfg.probe = p;
        }
        let samples = load_samples(&cfg, opts.data.as_deref())?;
        let (examples, table) = build_examples::<f64>(&samples, &example_spec(&cfg, false), None).map_err(data_fail)?;
        let (resolved, net) = build_model(&cfg, &table)?;

        let mut order: Vec<usize> = (0..examples.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut stream(cfg.seed, &[TAG_PROBE]));
        let batch: Vec<(FeatureMap, Vec<f64>)> = order
            .iter()
            .take(cfg.probe)
            .map(|&i| (examples[i].input.clone(), examples[i].target.clone()))
            .collect();
        let amps = resolved.amplitudes().map_err(|e| Outcome::fail(EXIT_CONFIG, e))?;
        let pool = WorkerPool::new(cfg.workers);
        let report = diagnose_with(&net, &batch, Some(&amps), cfg.window, &pool)
            .map_err(|e| Outcome::fail(EXIT_DATA, format!("diagnostics: {e}")))?;
        let text = render_report(&report);
        if let Some(path) = report_path {
            fs::write(path, &text).map_err(|e| Outcome::fail(EXIT_DATA, format!("{}: {e}", path.display())))?;
        }
        let code = if report.all_within_window() { EXIT_OK } else { EXIT_OUT_OF_WINDOW };
        Ok(Outcome {
            code,
            stdout: text,
            stderr: String::new(),
        })
    };
    run().unwrap_or_else(|e| e)
}

/// Renders metrics as `prefix.name = value` lines.
pub fn metrics_lines(prefix: &str, m: &Metrics) -> String {
    let mut s = String::new();
    for (name, v) in [("accuracy", m.accuracy), ("mape", m.mape), ("mae", m.mae), ("loss", Some(m.loss))] {
        if let Some(v) = v {
            let _ = writeln!(s, "{prefix}.{name} = {v}");
        }
    }
    s
}

fn write_out(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), Outcome> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Outcome::fail(EXIT_DATA, format!("{}: {e}", path.display())))
}

fn originals(examples: &[Example]) -> Vec<Example> {
    let mut seen = None;
    examples
        .iter()
        .filter(|e| {
            let first = seen != Some(e.origin);
            seen = Some(e.origin);
            first
        })
        .cloned()
        .collect()
}

pub fn cmd_train(opts: &RunOptions, out: &Path) -> Outcome {
    let run = || -> Result<Outcome, Outcome> {
        let cfg = load_config(opts)?;
        let samples = load_samples(&cfg, opts.data.as_deref())?;
        let (examples, table) = build_examples::<f64>(&samples, &example_spec(&cfg, true), None).map_err(data_fail)?;
        let (resolved, mut net) = build_model(&cfg, &table)?;
        fs::create_dir_all(out).map_err(|e| Outcome::fail(EXIT_DATA, format!("{}: {e}", out.display())))?;
        write_out(out, CATEGORIES_FILE, table.to_text().as_bytes())?;

        let pool = WorkerPool::new(cfg.workers);
        let tc = TrainConfig {
            cv: cfg.cv,
            opt: cfg.opt,
            task: cfg.task,
            seed: cfg.seed,
        };
        let report = match train(&mut net, &examples, &tc, &pool) {
            Ok(r) => r,
            Err(TrainError::Diverged { epoch, history }) => {
                write_out(out, HISTORY_FILE, history.to_csv().as_bytes())?;
                return Err(Outcome::fail(
                    EXIT_DIVERGED,
                    format!("training diverged at epoch {epoch} (non-finite loss or gradient); lower the init amplitudes or the learning rate"),
                ));
            }
            Err(TrainError::Split(m)) => return Err(Outcome::fail(EXIT_DATA, format!("split: {m}"))),
            Err(TrainError::Empty(what)) => return Err(Outcome::fail(EXIT_DATA, format!("empty {what}"))),
            Err(e) => return Err(Outcome::fail(EXIT_CONFIG, e)),
        };
        write_out(out, HISTORY_FILE, report.history.to_csv().as_bytes())?;

        let dataset = evaluate_with(&net, &originals(&examples), cfg.task, &pool).map_err(|e| Outcome::fail(EXIT_DATA, e))?;
        let mut summary = format!(
            "task = {}\nepochs = {}\nstop_reason = {}\n",
            cfg.task,
            report.history.epochs_run(),
            report.history.stop_reason
        );
        summary += &metrics_lines("train", &report.train);
        summary += &metrics_lines("test", &report.test);
        summary += &metrics_lines("validation", &report.validation);
        summary += &metrics_lines("dataset", &dataset);
        write_out(out, METRICS_FILE, summary.as_bytes())?;

        // The worker count never changes results, so keep it out of the file.
        let model = Model {
            config: Config { workers: 0, ..resolved },
            table,
            network: net,
        };
        write_out(out, MODEL_FILE, &encode_model(&model))?;
        Ok(Outcome::ok(summary))
    };
    run().unwrap_or_else(|e| e)
}

/// Metrics of a saved model over every sample of `data`, without
/// augmentation. `dataset.*` lines match those `train` wrote for the same data.
pub fn cmd_evaluate(model_path: &Path, data: &Path, task: Option<Task>, workers: Option<usize>) -> Outcome {
    let run = || -> Result<Outcome, Outcome> {
        let bytes = fs::read(model_path).map_err(|e| Outcome::fail(EXIT_CONFIG, format!("{}: {e}", model_path.display())))?;
        let model = decode_model(&bytes).map_err(|e| Outcome::fail(EXIT_CONFIG, format!("{}: {e}", model_path.display())))?;
        let cfg = &model.config;
        if let Some(t) = task.filter(|&t| t != cfg.task) {
            return Err(Outcome::fail(EXIT_CONFIG, format!("model was trained to {}, not to {t}", cfg.task)));
        }
        let samples = load_dir(data, &cfg.codes, Some((cfg.rows, cfg.cols))).map_err(data_fail)?;
        let (examples, _) = build_examples::<f64>(&samples, &example_spec(cfg, false), Some(&model.table)).map_err(data_fail)?;
        let pool = WorkerPool::new(workers.unwrap_or(cfg.workers));
        let m = evaluate_with(&model.network, &examples, cfg.task, &pool).map_err(|e| Outcome::fail(EXIT_DATA, e))?;
        Ok(Outcome::ok(format!("task = {}\nsamples = {}\n{}", cfg.task, examples.len(), metrics_lines("dataset", &m))))
    };
    run().unwrap_or_else(|e| e)
}

pub fn cmd_synth(out: &Path, classes: usize, per_class: usize, rows: usize, cols: usize, seed: u64) -> Outcome {
    let samples = match synth_dataset(classes, per_class, rows, cols, seed) {
        Ok(s) => s,
        Err(e) => return Outcome::fail(EXIT_CONFIG, e),
    };
    match save_dir(out, &samples) {
        Ok(paths) => Outcome::ok(format!("wrote {} images to {}\n", paths.len(), out.display())),
        Err(e) => Outcome::fail(EXIT_DATA, e),
    }
}
