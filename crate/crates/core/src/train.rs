//! Cross-validated training with repeated passes per fold and early stopping.
//!
//! The originals are split once into a held-out validation part and a
//! learn-test part; augmented copies always travel with their original.
//! The learn-test part is cut into stratified folds, and for each fold the
//! network makes up to `repeats_per_fold` passes over the other folds,
//! with test and validation metrics recorded after every pass. Optimizer
//! state carries over between passes and folds. Training stops early once
//! the validation metric has failed to beat its best value `tolerance`
//! times in a row.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::backprop::{backward, Gradients};
use crate::data::{augment, regression_target, AugmentConfig, CategoryTable, DataError, EncoderSpec, Sample};
use crate::error::ShapeError;
use crate::net::Network;
use crate::optimize::{minibatch_iter, step, OptimizerConfig, OptimizerState};
use crate::parallel::{StageError, WorkerPool};
use crate::regularize::{Mode, Resample};
use crate::scalar::Scalar;
use crate::seeds::stream;
use crate::tensor::FeatureMap;

// stream tags for derived rngs
const TAG_SPLIT: u64 = 1;
const TAG_FOLDS: u64 = 2;
const TAG_SHUFFLE: u64 = 3;
const TAG_SAMPLE: u64 = 4;
const TAG_FREEZE: u64 = 5;
const TAG_AUGMENT: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Task {
    #[default]
    Classify,
    Regress,
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "classify" => Ok(Task::Classify),
            "regress" => Ok(Task::Regress),
            other => Err(format!("unknown task '{other}' (classify, regress)")),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Classify => "classify",
            Task::Regress => "regress",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvConfig {
    pub folds: usize,
    pub repeats_per_fold: usize,
    pub tolerance: usize,
    pub validation_fraction: f64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 5,
            repeats_per_fold: 10,
            tolerance: 7,
            validation_fraction: 1.0 / 6.0,
        }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<(), ShapeError> {
        if self.folds < 2 {
            return Err(ShapeError::Geometry("cross-validation needs at least 2 folds".into()));
        }
        if self.tolerance < 1 || self.repeats_per_fold < 1 {
            return Err(ShapeError::Geometry("tolerance and repeats must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(ShapeError::Rate(self.validation_fraction));
        }
        Ok(())
    }
}

/// One training or evaluation example. `origin` identifies the original
/// drawing an augmented copy came from; `stratum` is its category.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub input: FeatureMap<T>,
    pub target: Vec<T>,
    pub stratum: usize,
    pub origin: usize,
}

/// How samples become examples.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleSpec {
    pub task: Task,
    /// Factor groups defining classes (and strata for regression).
    pub encoder: EncoderSpec,
    /// Regression targets are `age_months / target_scale`.
    pub target_scale: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

/// Encodes and augments samples. Copies of sample `i` get origin `i` and
/// are drawn from a stream keyed by `i`, so they do not depend on order.
pub fn build_examples<T: Scalar>(
    samples: &[Sample],
    spec: &ExampleSpec,
    table: Option<&CategoryTable>,
) -> Result<(Vec<Example<T>>, CategoryTable), DataError> {
    let owned;
    let table = match table {
        Some(t) => t,
        None => {
            let labels: Vec<_> = samples.iter().map(|s| s.label.clone()).collect();
            owned = CategoryTable::from_records(&labels, &spec.encoder)?;
            &owned
        }
    };
    spec.augment.validate()?;
    let mut out = Vec::with_capacity(samples.len() * spec.augment.multiplier);
    for (i, s) in samples.iter().enumerate() {
        let stratum = table
            .index_of(&s.label)
            .ok_or_else(|| crate::data::EncodeError::UnknownCategory(table.spec().key(&s.label).join(",")))?;
        let target: Vec<T> = match spec.task {
            Task::Classify => table.one_hot(&s.label)?.into_iter().map(T::lit).collect(),
            Task::Regress => vec![T::lit(regression_target(&s.label) / spec.target_scale)],
        };
        let mut rng = stream(spec.seed, &[TAG_AUGMENT, i as u64]);
        for copy in augment(s, &spec.augment, &mut rng) {
            out.push(Example {
                input: copy.image.cast(),
                target: target.clone(),
                stratum,
                origin: i,
            });
        }
    }
    Ok((out, table.clone()))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    /// Percent of argmax hits (classification).
    pub accuracy: Option<f64>,
    /// Mean absolute percentage error over non-zero targets (regression).
    pub mape: Option<f64>,
    /// Mean absolute error (regression).
    pub mae: Option<f64>,
    pub loss: f64,
}

impl Metrics {
    /// The metric tracked for early stopping: accuracy when classifying,
    /// MAPE when regressing (loss if every target is zero).
    pub fn primary(&self, task: Task) -> f64 {
        match task {
            Task::Classify => self.accuracy.unwrap_or(0.0),
            Task::Regress => self.mape.unwrap_or(self.loss),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && [self.accuracy, self.mape, self.mae].iter().flatten().all(|v| v.is_finite())
    }
}

pub fn higher_is_better(task: Task) -> bool {
    task == Task::Classify
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

fn score<T: Scalar>(outputs: &[(f64, Vec<T>)], targets: &[&[T]], task: Task) -> Metrics {
    let n = outputs.len() as f64;
    let loss = outputs.iter().map(|(l, _)| l).sum::<f64>() / n;
    match task {
        Task::Classify => {
            let hits = outputs
                .iter()
                .zip(targets)
                .filter(|((_, o), t)| argmax(o) == argmax(t))
                .count();
            Metrics {
                accuracy: Some(100.0 * hits as f64 / n),
                mape: None,
                mae: None,
                loss,
            }
        }
        Task::Regress => {
            let (mut abs, mut count, mut pct, mut pct_count) = (0.0, 0usize, 0.0, 0usize);
            for ((_, o), t) in outputs.iter().zip(targets) {
                for (p, y) in o.iter().zip(t.iter()) {
                    let (p, y) = (p.as_f64(), y.as_f64());
                    abs += (p - y).abs();
                    count += 1;
                    if y != 0.0 {
                        pct += ((p - y) / y).abs();
                        pct_count += 1;
                    }
                }
            }
            Metrics {
                accuracy: None,
                mape: (pct_count > 0).then(|| 100.0 * pct / pct_count as f64),
                mae: Some(abs / count as f64),
                loss,
            }
        }
    }
}

fn predict_one<T: Scalar>(net: &Network<T>, ex: &Example<T>) -> Result<(f64, Vec<T>), ShapeError> {
    let out = net.predict(&ex.input)?;
    let loss = crate::net::loss_eval(net.loss(), out.values(), &ex.target)?;
    Ok((loss.as_f64(), out.into_values()))
}

/// Inference-mode metrics over `examples`.
pub fn evaluate<T: Scalar>(net: &Network<T>, examples: &[Example<T>], task: Task) -> Result<Metrics, ShapeError> {
    let refs: Vec<&Example<T>> = examples.iter().collect();
    evaluate_refs(net, &refs, task, None).map_err(|e| match e {
        TrainError::Shape(s) => s,
        other => ShapeError::Geometry(other.to_string()),
    })
}

/// [`evaluate`] with samples spread over a worker pool.
pub fn evaluate_with<T: Scalar>(
    net: &Network<T>,
    examples: &[Example<T>],
    task: Task,
    pool: &WorkerPool,
) -> Result<Metrics, TrainError> {
    let refs: Vec<&Example<T>> = examples.iter().collect();
    evaluate_refs(net, &refs, task, Some(pool))
}

fn evaluate_refs<T: Scalar>(
    net: &Network<T>,
    examples: &[&Example<T>],
    task: Task,
    pool: Option<&WorkerPool>,
) -> Result<Metrics, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::Empty("evaluation set"));
    }
    let outputs = match pool {
        Some(pool) => pool
            .map_collect(examples.len(), |i| predict_one(net, examples[i]))?
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?,
        None => examples.iter().map(|e| predict_one(net, e)).collect::<Result<Vec<_>, _>>()?,
    };
    let targets: Vec<&[T]> = examples.iter().map(|e| e.target.as_slice()).collect();
    Ok(score(&outputs, &targets, task))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

/// Stops once the last `tolerance` evaluations all failed to improve on the
/// best value seen before them. The first evaluation always counts as an
/// improvement.
pub fn early_stop_check(history: &[f64], tolerance: usize, higher_is_better: bool) -> Decision {
    let mut best: Option<f64> = None;
    let mut misses = 0;
    for &v in history {
        let improved = best.is_none_or(|b| if higher_is_better { v > b } else { v < b });
        if improved {
            best = Some(v);
            misses = 0;
        } else {
            misses += 1;
        }
    }
    if misses >= tolerance.max(1) {
        Decision::Stop
    } else {
        Decision::Continue
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Folds<K> {
    /// Item indices of each fold.
    pub folds: Vec<Vec<usize>>,
    /// Strata with fewer members than folds; some folds miss them.
    pub undersized: Vec<K>,
}

/// Stratified k-fold split of items with the given stratum keys.
///
/// Each stratum is shuffled and the strata are laid end to end; position
/// `p` goes to fold `p mod k`. Every stratum's per-fold count is then the
/// floor or ceiling of its size over `k`.
pub fn stratified_kfold<K: Ord + Clone, R: Rng + ?Sized>(
    keys: &[K],
    k: usize,
    rng: &mut R,
) -> Result<Folds<K>, ShapeError> {
    if k < 2 {
        return Err(ShapeError::Geometry("k-fold needs k >= 2".into()));
    }
    if keys.len() < k {
        return Err(ShapeError::Length {
            expected: k,
            actual: keys.len(),
        });
    }
    let mut strata: BTreeMap<&K, Vec<usize>> = BTreeMap::new();
    for (i, key) in keys.iter().enumerate() {
        strata.entry(key).or_default().push(i);
    }
    let mut folds = vec![Vec::new(); k];
    let mut undersized = Vec::new();
    let mut pos = 0;
    for (key, mut members) in strata {
        if members.len() < k {
            undersized.push(key.clone());
        }
        members.shuffle(rng);
        for m in members {
            folds[pos % k].push(m);
            pos += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(Folds { folds, undersized })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    EarlyStop,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::Completed => "completed",
            StopReason::EarlyStop => "early_stop",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub fold: usize,
    pub pass: usize,
    pub train_loss: f64,
    pub test_metric: f64,
    pub validation_metric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub stop_reason: StopReason,
}

pub const HISTORY_HEADER: &str = "epoch,fold,pass,train_loss,test_metric,validation_metric";

impl TrainHistory {
    pub fn epochs_run(&self) -> usize {
        self.records.len()
    }

    /// Comma-separated table with a trailing `# stop_reason=` comment line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.fold, r.pass, r.train_loss, r.test_metric, r.validation_metric
            );
        }
        let _ = writeln!(out, "# stop_reason={}", self.stop_reason);
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(HISTORY_HEADER) {
            return Err("missing history header".into());
        }
        let mut records = Vec::new();
        let mut stop_reason = StopReason::Completed;
        for line in lines {
            if let Some(reason) = line.strip_prefix("# stop_reason=") {
                stop_reason = match reason {
                    "completed" => StopReason::Completed,
                    "early_stop" => StopReason::EarlyStop,
                    other => return Err(format!("unknown stop reason '{other}'")),
                };
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(format!("bad history row '{line}'"));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|e| format!("{s}: {e}"));
            let real = |s: &str| s.parse::<f64>().map_err(|e| format!("{s}: {e}"));
            records.push(EpochRecord {
                epoch: int(f[0])?,
                fold: int(f[1])?,
                pass: int(f[2])?,
                train_loss: real(f[3])?,
                test_metric: real(f[4])?,
                validation_metric: real(f[5])?,
            });
        }
        Ok(TrainHistory { records, stop_reason })
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error("training diverged at epoch {epoch}: non-finite loss or gradient")]
    Diverged { epoch: usize, history: TrainHistory },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("split: {0}")]
    Split(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub cv: CvConfig,
    pub opt: OptimizerConfig,
    pub task: Task,
    pub seed: u64,
}

/// Example indices of the validation part and of each test fold.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub validation: Vec<usize>,
    pub folds: Vec<Vec<usize>>,
    pub undersized_strata: Vec<usize>,
}

impl Split {
    /// Examples trained on while `fold` is the test fold.
    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(f, _)| f != fold)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        idx.sort_unstable();
        idx
    }
}

/// Splits by origin: a stratified validation share, then stratified folds.
pub fn plan_split<T>(examples: &[Example<T>], cv: &CvConfig, seed: u64) -> Result<Split, TrainError> {
    let mut origin_stratum: BTreeMap<usize, usize> = BTreeMap::new();
    for e in examples {
        origin_stratum.entry(e.origin).or_insert(e.stratum);
    }
    let mut by_stratum: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&o, &s) in &origin_stratum {
        by_stratum.entry(s).or_default().push(o);
    }
    let mut rng = stream(seed, &[TAG_SPLIT]);
    let mut validation_origins = BTreeSet::new();
    let mut rest: Vec<(usize, usize)> = Vec::new();
    for (&s, origins) in &by_stratum {
        let mut origins = origins.clone();
        origins.shuffle(&mut rng);
        let n_val = (cv.validation_fraction * origins.len() as f64).round() as usize;
        validation_origins.extend(origins[..n_val].iter().copied());
        rest.extend(origins[n_val..].iter().map(|&o| (o, s)));
    }
    rest.sort_unstable();
    if validation_origins.is_empty() {
        return Err(TrainError::Split("validation part is empty; raise the fraction or add data".into()));
    }
    let keys: Vec<usize> = rest.iter().map(|&(_, s)| s).collect();
    let folds = stratified_kfold(&keys, cv.folds, &mut stream(seed, &[TAG_FOLDS]))
        .map_err(|e| TrainError::Split(e.to_string()))?;
    let mut origin_fold = BTreeMap::new();
    for (f, members) in folds.folds.iter().enumerate() {
        for &m in members {
            origin_fold.insert(rest[m].0, f);
        }
    }
    let mut split = Split {
        validation: Vec::new(),
        folds: vec![Vec::new(); cv.folds],
        undersized_strata: folds.undersized,
    };
    for (i, e) in examples.iter().enumerate() {
        if validation_origins.contains(&e.origin) {
            split.validation.push(i);
        } else {
            split.folds[origin_fold[&e.origin]].push(i);
        }
    }
    Ok(split)
}

/// Runs one shuffled pass of mini-batch updates over `indices`.
#[allow(clippy::too_many_arguments)]
fn run_pass<T: Scalar>(
    net: &mut Network<T>,
    examples: &[Example<T>],
    indices: &[usize],
    opt: &OptimizerConfig,
    state: &mut OptimizerState<T>,
    epoch: usize,
    seed: u64,
    pool: &WorkerPool,
) -> Result<bool, TrainError> {
    let e = epoch as u64;
    net.sample_freeze_masks(Some(Resample::PerEpoch), &mut stream(seed, &[TAG_FREEZE, e]));
    let batches = minibatch_iter(indices.len(), opt.batch_size, &mut stream(seed, &[TAG_SHUFFLE, e]));
    for (b, batch) in batches.iter().enumerate() {
        net.sample_freeze_masks(Some(Resample::PerBatch), &mut stream(seed, &[TAG_FREEZE, e, b as u64 + 1]));
        let model = &*net;
        let parts = pool
            .map_collect(batch.len(), |j| {
                let i = indices[batch[j]];
                let ex = &examples[i];
                let mut rng = stream(seed, &[TAG_SAMPLE, e, i as u64]);
                let trace = model.forward(&ex.input, Mode::Train, &mut rng)?;
                backward(model, &trace, &ex.target)
            })?
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        let grads = Gradients::mean(&parts).expect("batches are non-empty");
        if !grads.is_finite() {
            return Ok(false);
        }
        step(net, &grads, state, opt)?;
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: TrainHistory,
    pub split: Split,
    pub train: Metrics,
    pub test: Metrics,
    pub validation: Metrics,
}

fn pick<'a, T>(examples: &'a [Example<T>], idx: &[usize]) -> Vec<&'a Example<T>> {
    idx.iter().map(|&i| &examples[i]).collect()
}

/// Full cross-validated training run; deterministic for a given seed and
/// independent of the pool's worker count.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    examples: &[Example<T>],
    cfg: &TrainConfig,
    pool: &WorkerPool,
) -> Result<TrainReport, TrainError> {
    cfg.cv.validate()?;
    cfg.opt.validate()?;
    if examples.is_empty() {
        return Err(TrainError::Empty("dataset"));
    }
    let split = plan_split(examples, &cfg.cv, cfg.seed)?;
    if split.folds.iter().any(Vec::is_empty) {
        return Err(TrainError::Split("a fold is empty; use fewer folds or more data".into()));
    }
    if net.layers().iter().any(|l| l.frozen.is_none() && l.spec.freezeconnect().is_some()) {
        net.sample_freeze_masks(None, &mut stream(cfg.seed, &[TAG_FREEZE]));
    }
    let mut state = OptimizerState::new(net);
    let validation = pick(examples, &split.validation);
    let hib = higher_is_better(cfg.task);
    let mut records = Vec::new();
    let mut val_history = Vec::new();
    let mut last = None;
    let mut stop_reason = StopReason::Completed;
    let mut epoch = 0;
    'folds: for fold in 0..cfg.cv.folds {
        let train_idx = split.train_indices(fold);
        let train_set = pick(examples, &train_idx);
        let test_set = pick(examples, &split.folds[fold]);
        for pass in 1..=cfg.cv.repeats_per_fold {
            epoch += 1;
            let finite = run_pass(net, examples, &train_idx, &cfg.opt, &mut state, epoch, cfg.seed, pool)?;
            let tr = evaluate_refs(net, &train_set, cfg.task, Some(pool))?;
            let te = evaluate_refs(net, &test_set, cfg.task, Some(pool))?;
            let va = evaluate_refs(net, &validation, cfg.task, Some(pool))?;
            records.push(EpochRecord {
                epoch,
                fold: fold + 1,
                pass,
                train_loss: tr.loss,
                test_metric: te.primary(cfg.task),
                validation_metric: va.primary(cfg.task),
            });
            if !finite || !tr.is_finite() || !te.is_finite() || !va.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    history: TrainHistory {
                        records,
                        stop_reason: StopReason::Completed,
                    },
                });
            }
            val_history.push(va.primary(cfg.task));
            last = Some((tr, te, va));
            if early_stop_check(&val_history, cfg.cv.tolerance, hib) == Decision::Stop {
                stop_reason = StopReason::EarlyStop;
                break 'folds;
            }
        }
    }
    let (train, test, validation) = last.expect("at least one pass runs");
    Ok(TrainReport {
        history: TrainHistory { records, stop_reason },
        split,
        train,
        test,
        validation,
    })
}

/// Plain epochs over every example without cross-validation; returns the
/// inference-mode training loss after each epoch.
pub fn train_epochs<T: Scalar>(
    net: &mut Network<T>,
    examples: &[Example<T>],
    opt: &OptimizerConfig,
    epochs: usize,
    seed: u64,
    pool: &WorkerPool,
) -> Result<Vec<f64>, TrainError> {
    opt.validate()?;
    if examples.is_empty() {
        return Err(TrainError::Empty("dataset"));
    }
    if net.layers().iter().any(|l| l.frozen.is_none() && l.spec.freezeconnect().is_some()) {
        net.sample_freeze_masks(None, &mut stream(seed, &[TAG_FREEZE]));
    }
    let all: Vec<usize> = (0..examples.len()).collect();
    let refs = pick(examples, &all);
    let mut state = OptimizerState::new(net);
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let finite = run_pass(net, examples, &all, opt, &mut state, epoch, seed, pool)?;
        let loss = evaluate_refs(net, &refs, Task::Regress, Some(pool))?.loss;
        losses.push(loss);
        if !finite || !loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                history: TrainHistory {
                    records: Vec::new(),
                    stop_reason: StopReason::Completed,
                },
            });
        }
    }
    Ok(losses)
}
