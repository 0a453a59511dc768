//! Line-based run configuration: `section.key = value`, `#` starts a comment.
//!
//! ```text
//! run.task = classify
//! net.preset = shallow          # or explicit layer.N.* keys
//! layer.1.kind = conv
//! layer.1.filter = 5x5
//! init.1.W = 0.9
//! opt.kind = momentum
//! cv.folds = 5
//! ```
//!
//! Dense layers accept `units = auto`, resolved to the number of
//! categories (classification) or 1 (regression) once data is loaded.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use thiserror::Error;

use crate::data::label::{AuthorDescriptor, Gender};
use crate::data::{AugmentConfig, CodeTable, EncoderSpec, FactorGroup};
use crate::diagnose::{DiagWindow, DEFAULT_PROBE_SIZE};
use crate::init::{Amplitude, InitAmplitudes};
use crate::net::{deep_preset, shallow_preset, Activation, LayerKind, LayerSpec, Loss, PresetOptions};
use crate::optimize::{OptimizerConfig, OptimizerKind};
use crate::regularize::{RegularizerSpec, Resample};
use crate::tensor::ConvGeometry;
use crate::train::{CvConfig, Task};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("config line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

fn err(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Shallow,
    Deep,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shallow" => Ok(Preset::Shallow),
            "deep" => Ok(Preset::Deep),
            other => Err(format!("unknown preset '{other}' (shallow, deep)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 3,
            per_class: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub task: Task,
    /// `None` picks cross-entropy for classification and MAE for regression.
    pub loss: Option<Loss>,
    /// Layer specs; dense layers with `units == 0` are resolved later.
    pub layers: Vec<LayerSpec>,
    /// Per parameterized layer, numbered from 1; missing layers use the defaults.
    pub init: BTreeMap<usize, Amplitude>,
    pub init_default: Amplitude,
    pub opt: OptimizerConfig,
    pub cv: CvConfig,
    pub augment: AugmentConfig,
    pub encoder: EncoderSpec,
    pub rows: usize,
    pub cols: usize,
    pub target_scale: f64,
    pub codes: CodeTable,
    pub window: DiagWindow,
    pub probe: usize,
    pub synth: SynthConfig,
    pub seed: u64,
    pub workers: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config::from_preset(Preset::Shallow, &PresetOptions::default(), Task::Classify)
    }
}

fn preset_layers(preset: Preset, opts: &PresetOptions, task: Task) -> Vec<LayerSpec> {
    let opts = PresetOptions {
        outputs: 0,
        softmax: task == Task::Classify,
        ..opts.clone()
    };
    match preset {
        Preset::Shallow => shallow_preset(&opts),
        Preset::Deep => deep_preset(&opts),
    }
}

fn pair(s: &str) -> Result<(usize, usize), String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("expected a count, got '{t}'"));
    match s.split_once('x') {
        Some((a, b)) => Ok((parse(a)?, parse(b)?)),
        None => {
            let n = parse(s)?;
            Ok((n, n))
        }
    }
}

fn boolean(s: &str) -> Result<bool, String> {
    match s {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(format!("expected true or false, got '{other}'")),
    }
}

fn num<T: FromStr>(s: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("invalid number '{s}'"))
}

fn author(s: &str) -> Result<AuthorDescriptor, String> {
    let (who, self_portrait) = match s.strip_suffix("_self") {
        Some(w) => (w, true),
        None => (s, false),
    };
    Ok(AuthorDescriptor {
        gender: who.parse::<Gender>()?,
        self_portrait,
    })
}

#[derive(Default)]
struct RawLayer {
    line: usize,
    keys: BTreeMap<String, (usize, String)>,
}

impl RawLayer {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.keys.remove(key)
    }

    fn get<T>(&mut self, key: &str, parse: impl Fn(&str) -> Result<T, String>, default: T) -> Result<T, ConfigError> {
        match self.take(key) {
            Some((line, v)) => parse(&v).map_err(|m| err(line, format!("{key}: {m}"))),
            None => Ok(default),
        }
    }

    fn build(mut self, n: usize) -> Result<LayerSpec, ConfigError> {
        let (kline, kind) = self.take("kind").ok_or_else(|| err(self.line, format!("layer.{n}.kind is missing")))?;
        let act = |s: &str| s.parse::<Activation>();
        let mut spec = match kind.as_str() {
            "conv" => {
                let filters = self.get("filters", num, 1)?;
                let (v, h) = self.get("filter", pair, (5, 5))?;
                let (stride_v, stride_h) = self.get("stride", pair, (1, 1))?;
                let (zero_pad_v, zero_pad_h) = self.get("zero_pad", pair, (0, 0))?;
                let input_pad = self.get("input_pad", num, 0)?;
                let activation = self.get("activation", act, Activation::Identity)?;
                let bias = self.get("bias_learning", boolean, true)?;
                LayerSpec::conv(filters, v, h, activation)
                    .with_geometry(ConvGeometry {
                        stride_v,
                        stride_h,
                        zero_pad_v,
                        zero_pad_h,
                        input_pad,
                    })
                    .with_bias_learning(bias)
            }
            "dense" => {
                let units = self.get("units", |s| if s == "auto" { Ok(0) } else { num(s) }, 0)?;
                let activation = self.get("activation", act, Activation::Identity)?;
                let bias = self.get("bias_learning", boolean, true)?;
                LayerSpec::dense(units, activation).with_bias_learning(bias)
            }
            "pool" | "max_pool" => {
                let (wv, wh) = self.get("window", pair, (2, 2))?;
                let (sv, sh) = self.get("stride", pair, (wv, wh))?;
                LayerSpec::max_pool(wv, wh, sv, sh)
            }
            "softmax" => LayerSpec::softmax(),
            other => return Err(err(kline, format!("unknown layer kind '{other}' (conv, dense, pool, softmax)"))),
        };
        if let Some((l, v)) = self.take("dropout") {
            let rate = num(&v).map_err(|m| err(l, m))?;
            spec = spec.with_regularizer(RegularizerSpec::Dropout { rate });
        }
        if let Some((l, v)) = self.take("dropconnect") {
            let rate = num(&v).map_err(|m| err(l, m))?;
            spec = spec.with_regularizer(RegularizerSpec::Dropconnect { rate });
        }
        let resample = self.get("freeze_resample", |s| s.parse::<Resample>(), Resample::PerRun)?;
        if let Some((l, v)) = self.take("freezeconnect") {
            let rate = num(&v).map_err(|m| err(l, m))?;
            spec = spec.with_regularizer(RegularizerSpec::Freezeconnect { rate, resample });
        }
        if let Some((key, (line, _))) = self.keys.into_iter().next() {
            return Err(err(line, format!("layer.{n}.{key} does not apply to a {kind} layer")));
        }
        for r in &spec.regularizers {
            r.validate().map_err(|e| err(self.line, format!("layer.{n}: {e}")))?;
        }
        Ok(spec)
    }
}

impl Config {
    pub fn from_preset(preset: Preset, opts: &PresetOptions, task: Task) -> Self {
        Config {
            task,
            loss: None,
            layers: preset_layers(preset, opts, task),
            init: BTreeMap::new(),
            init_default: Amplitude::new(1.0, 0.0),
            opt: OptimizerConfig::default(),
            cv: CvConfig::default(),
            augment: AugmentConfig::default(),
            encoder: EncoderSpec::new(&[FactorGroup::AgeCategory]).expect("non-empty"),
            rows: crate::data::image::DEFAULT_ROWS,
            cols: crate::data::image::DEFAULT_COLS,
            target_scale: 100.0,
            codes: CodeTable::default(),
            window: DiagWindow::default(),
            probe: DEFAULT_PROBE_SIZE,
            synth: SynthConfig::default(),
            seed: 0,
            workers: 0,
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Config::parse_with_task(text, None)
    }

    /// [`Config::parse`] with `run.task` overridden, which also decides
    /// whether presets end in a softmax.
    pub fn parse_with_task(text: &str, task: Option<Task>) -> Result<Self, ConfigError> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected 'section.key = value', got '{content}'")))?;
            let (k, v) = (k.trim(), v.trim());
            if !k.contains('.') || v.is_empty() {
                return Err(err(line, format!("expected 'section.key = value', got '{content}'")));
            }
            if entries.iter().any(|(_, prev, _)| prev == k) {
                return Err(err(line, format!("'{k}' is set twice")));
            }
            entries.push((line, k.to_string(), v.to_string()));
        }

        let find = |key: &str| entries.iter().find(|(_, k, _)| k == key).map(|(l, _, v)| (*l, v.as_str()));
        let task = match (task, find("run.task")) {
            (Some(t), _) => t,
            (None, Some((l, v))) => v.parse().map_err(|m| err(l, m))?,
            (None, None) => Task::Classify,
        };
        let mut cfg = Config::from_preset(Preset::Shallow, &PresetOptions::default(), task);
        let mut preset = None;
        let mut popts = PresetOptions::default();
        let mut raw_layers: BTreeMap<usize, RawLayer> = BTreeMap::new();

        for (line, key, value) in &entries {
            let (line, v) = (*line, value.as_str());
            let fail = |m: String| err(line, format!("{key}: {m}"));
            let parts: Vec<&str> = key.split('.').collect();
            match parts.as_slice() {
                ["run", "task"] => {}
                ["run", "seed"] => cfg.seed = num(v).map_err(fail)?,
                ["run", "workers"] => cfg.workers = num(v).map_err(fail)?,
                ["net", "preset"] => preset = Some(v.parse::<Preset>().map_err(fail)?),
                ["net", "filters"] => popts.filters = num(v).map_err(fail)?,
                ["net", "filter"] => (popts.filter_v, popts.filter_h) = pair(v).map_err(fail)?,
                ["net", "activation"] => popts.activation = v.parse().map_err(fail)?,
                ["net", "bias_learning"] => popts.bias_learning = boolean(v).map_err(fail)?,
                ["net", "freezeconnect"] => {
                    let resample = popts.freezeconnect.map_or(Resample::PerRun, |(_, r)| r);
                    popts.freezeconnect = Some((num(v).map_err(fail)?, resample));
                }
                ["net", "freeze_resample"] => {
                    let rate = popts.freezeconnect.map_or(0.0, |(r, _)| r);
                    popts.freezeconnect = Some((rate, v.parse().map_err(fail)?));
                }
                ["net", "loss"] => cfg.loss = Some(v.parse().map_err(fail)?),
                ["layer", n, field] => {
                    let n: usize = n.parse().map_err(|_| fail("layer number must be a positive integer".into()))?;
                    if n == 0 {
                        return Err(fail("layers are numbered from 1".into()));
                    }
                    let raw = raw_layers.entry(n).or_insert_with(|| RawLayer {
                        line,
                        ..RawLayer::default()
                    });
                    raw.keys.insert((*field).to_string(), (line, v.to_string()));
                }
                ["init", "W"] => cfg.init_default.weight = num(v).map_err(fail)?,
                ["init", "B"] => cfg.init_default.bias = num(v).map_err(fail)?,
                ["init", n, which @ ("W" | "B")] => {
                    let n: usize = n.parse().map_err(|_| fail("layer number must be a positive integer".into()))?;
                    if n == 0 {
                        return Err(fail("layers are numbered from 1".into()));
                    }
                    let amp = cfg.init.entry(n).or_insert(Amplitude::new(f64::NAN, f64::NAN));
                    let x: f64 = num(v).map_err(fail)?;
                    if *which == "W" {
                        amp.weight = x;
                    } else {
                        amp.bias = x;
                    }
                }
                ["opt", "kind"] => cfg.opt.kind = v.parse::<OptimizerKind>().map_err(fail)?,
                ["opt", "lr"] => cfg.opt.learning_rate = num(v).map_err(fail)?,
                ["opt", "momentum"] => cfg.opt.momentum = num(v).map_err(fail)?,
                ["opt", "batch"] => cfg.opt.batch_size = num(v).map_err(fail)?,
                ["cv", "folds"] => cfg.cv.folds = num(v).map_err(fail)?,
                ["cv", "repeats"] => cfg.cv.repeats_per_fold = num(v).map_err(fail)?,
                ["cv", "tolerance"] => cfg.cv.tolerance = num(v).map_err(fail)?,
                ["cv", "validation_fraction"] => cfg.cv.validation_fraction = num(v).map_err(fail)?,
                ["aug", "rotation"] => cfg.augment.rotation_max_deg = num(v).map_err(fail)?,
                ["aug", "stretch_min"] => cfg.augment.stretch_min = num(v).map_err(fail)?,
                ["aug", "stretch_max"] => cfg.augment.stretch_max = num(v).map_err(fail)?,
                ["aug", "noise_level"] => cfg.augment.noise_level = num(v).map_err(fail)?,
                ["aug", "noise_fraction"] => cfg.augment.noise_fraction = num(v).map_err(fail)?,
                ["aug", "multiplier"] => cfg.augment.multiplier = num(v).map_err(fail)?,
                ["encode", "groups"] => {
                    let groups = v
                        .split(',')
                        .map(|g| g.trim().parse::<FactorGroup>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(fail)?;
                    cfg.encoder = EncoderSpec::new(&groups).map_err(|e| fail(e.to_string()))?;
                }
                ["data", "rows"] => cfg.rows = num(v).map_err(fail)?,
                ["data", "cols"] => cfg.cols = num(v).map_err(fail)?,
                ["data", "target_scale"] => cfg.target_scale = num(v).map_err(fail)?,
                ["data", "code", letter] => {
                    let mut chars = letter.chars();
                    let (Some(c), None) = (chars.next(), chars.next()) else {
                        return Err(fail("author codes are single letters".into()));
                    };
                    cfg.codes.insert(c, author(v).map_err(fail)?);
                }
                ["diag", "window_low"] => cfg.window.low = num(v).map_err(fail)?,
                ["diag", "window_high"] => cfg.window.high = num(v).map_err(fail)?,
                ["diag", "probe"] => cfg.probe = num(v).map_err(fail)?,
                ["synth", "classes"] => cfg.synth.classes = num(v).map_err(fail)?,
                ["synth", "per_class"] => cfg.synth.per_class = num(v).map_err(fail)?,
                _ => return Err(err(line, format!("unknown key '{key}'"))),
            }
        }

        if !raw_layers.is_empty() {
            if preset.is_some() {
                return Err(err(raw_layers.values().next().map_or(0, |r| r.line), "net.preset and layer.* keys are exclusive"));
            }
            let count = raw_layers.len();
            let mut layers = Vec::with_capacity(count);
            for (i, (n, raw)) in raw_layers.into_iter().enumerate() {
                if n != i + 1 {
                    return Err(err(raw.line, format!("layers must be numbered 1..{count} without gaps")));
                }
                layers.push(raw.build(n)?);
            }
            cfg.layers = layers;
        } else {
            cfg.layers = preset_layers(preset.unwrap_or(Preset::Shallow), &popts, task);
        }
        cfg.validate().map_err(|m| err(0, m))?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), String> {
        self.opt.validate().map_err(|e| format!("opt: {e}"))?;
        self.cv.validate().map_err(|e| format!("cv: {e}"))?;
        self.augment.validate().map_err(|e| e.to_string())?;
        if self.rows == 0 || self.cols == 0 {
            return Err("data.rows and data.cols must be positive".into());
        }
        if !(self.target_scale > 0.0 && self.target_scale.is_finite()) {
            return Err("data.target_scale must be positive".into());
        }
        if !(self.window.low > 0.0 && self.window.low <= self.window.high) {
            return Err("diag window must satisfy 0 < low <= high".into());
        }
        if self.probe == 0 {
            return Err("diag.probe must be at least 1".into());
        }
        let params = self.layers.iter().filter(|l| l.has_params()).count();
        if let Some((&n, _)) = self.init.range(params + 1..).next() {
            return Err(format!("init.{n}: the network has {params} parameterized layers"));
        }
        for (n, a) in &self.init {
            if a.weight.is_nan() || a.bias.is_nan() {
                return Err(format!("init.{n} needs both W and B"));
            }
        }
        self.amplitudes().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn loss(&self) -> Loss {
        self.loss.unwrap_or(match self.task {
            Task::Classify => Loss::CrossEntropy,
            Task::Regress => Loss::Mae,
        })
    }

    /// Layers with every `units = auto` replaced by `outputs`.
    pub fn resolved_layers(&self, outputs: usize) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::Dense {
                    units: 0,
                    activation,
                    bias_learning,
                } => LayerSpec {
                    kind: LayerKind::Dense {
                        units: outputs,
                        activation,
                        bias_learning,
                    },
                    regularizers: l.regularizers.clone(),
                },
                _ => l.clone(),
            })
            .collect()
    }

    pub fn amplitudes(&self) -> Result<InitAmplitudes, crate::error::ShapeError> {
        let params = self.layers.iter().filter(|l| l.has_params()).count();
        InitAmplitudes::new(
            (1..=params)
                .map(|n| self.init.get(&n).copied().unwrap_or(self.init_default))
                .collect(),
        )
    }

    /// Canonical text with explicit layers; parses back to an equal config.
    pub fn render(&self) -> String {
        let mut o = String::new();
        let mut kv = |k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv("run.task", &self.task);
        kv("run.seed", &self.seed);
        kv("run.workers", &self.workers);
        if let Some(loss) = self.loss {
            kv("net.loss", &loss);
        }
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layer.{}", i + 1);
            match l.kind {
                LayerKind::Conv {
                    filters,
                    v,
                    h,
                    geom,
                    activation,
                    bias_learning,
                } => {
                    kv(&format!("{p}.kind"), &"conv");
                    kv(&format!("{p}.filters"), &filters);
                    kv(&format!("{p}.filter"), &format!("{v}x{h}"));
                    kv(&format!("{p}.stride"), &format!("{}x{}", geom.stride_v, geom.stride_h));
                    kv(&format!("{p}.zero_pad"), &format!("{}x{}", geom.zero_pad_v, geom.zero_pad_h));
                    kv(&format!("{p}.input_pad"), &geom.input_pad);
                    kv(&format!("{p}.activation"), &activation);
                    kv(&format!("{p}.bias_learning"), &bias_learning);
                }
                LayerKind::Dense {
                    units,
                    activation,
                    bias_learning,
                } => {
                    kv(&format!("{p}.kind"), &"dense");
                    if units == 0 {
                        kv(&format!("{p}.units"), &"auto");
                    } else {
                        kv(&format!("{p}.units"), &units);
                    }
                    kv(&format!("{p}.activation"), &activation);
                    kv(&format!("{p}.bias_learning"), &bias_learning);
                }
                LayerKind::MaxPool {
                    window_v,
                    window_h,
                    stride_v,
                    stride_h,
                } => {
                    kv(&format!("{p}.kind"), &"pool");
                    kv(&format!("{p}.window"), &format!("{window_v}x{window_h}"));
                    kv(&format!("{p}.stride"), &format!("{stride_v}x{stride_h}"));
                }
                LayerKind::Softmax => kv(&format!("{p}.kind"), &"softmax"),
            }
            for r in &l.regularizers {
                match *r {
                    RegularizerSpec::Dropout { rate } => kv(&format!("{p}.dropout"), &rate),
                    RegularizerSpec::Dropconnect { rate } => kv(&format!("{p}.dropconnect"), &rate),
                    RegularizerSpec::Freezeconnect { rate, resample } => {
                        kv(&format!("{p}.freezeconnect"), &rate);
                        kv(&format!("{p}.freeze_resample"), &resample);
                    }
                }
            }
        }
        kv("init.W", &self.init_default.weight);
        kv("init.B", &self.init_default.bias);
        for (n, a) in &self.init {
            kv(&format!("init.{n}.W"), &a.weight);
            kv(&format!("init.{n}.B"), &a.bias);
        }
        kv("opt.kind", &self.opt.kind);
        kv("opt.lr", &self.opt.learning_rate);
        kv("opt.momentum", &self.opt.momentum);
        kv("opt.batch", &self.opt.batch_size);
        kv("cv.folds", &self.cv.folds);
        kv("cv.repeats", &self.cv.repeats_per_fold);
        kv("cv.tolerance", &self.cv.tolerance);
        kv("cv.validation_fraction", &self.cv.validation_fraction);
        kv("aug.rotation", &self.augment.rotation_max_deg);
        kv("aug.stretch_min", &self.augment.stretch_min);
        kv("aug.stretch_max", &self.augment.stretch_max);
        kv("aug.noise_level", &self.augment.noise_level);
        kv("aug.noise_fraction", &self.augment.noise_fraction);
        kv("aug.multiplier", &self.augment.multiplier);
        let groups: Vec<String> = self.encoder.groups().iter().map(ToString::to_string).collect();
        kv("encode.groups", &groups.join(","));
        kv("data.rows", &self.rows);
        kv("data.cols", &self.cols);
        kv("data.target_scale", &self.target_scale);
        let default_codes = CodeTable::default();
        for c in self.codes.codes() {
            let a = self.codes.get(c).expect("listed code");
            if default_codes.get(c) != Some(a) {
                let who = match a.gender {
                    Gender::Female => "girl",
                    Gender::Male => "boy",
                };
                kv(&format!("data.code.{c}"), &format!("{who}{}", if a.self_portrait { "_self" } else { "" }));
            }
        }
        kv("diag.window_low", &self.window.low);
        kv("diag.window_high", &self.window.high);
        kv("diag.probe", &self.probe);
        kv("synth.classes", &self.synth.classes);
        kv("synth.per_class", &self.synth.per_class);
        o
    }
}
