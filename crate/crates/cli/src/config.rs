//! Flat `key = value` experiment configuration.
//!
//! Keys are dotted (`policy.sigma.shape = arctan`), one per line; `#` starts
//! a comment. Every key has a default, so an empty file is a valid config.
//! [`ExperimentConfig::to_text`] writes every key in a fixed order and
//! parsing that text gives back the same config.

use std::fmt::Debug;
use std::str::FromStr;

use semisup_core::augment::AugConfig;
use semisup_core::datagen::{DatasetConfig, STANDARD_SIZES};
use semisup_core::engine::{EmaGranularity, InitMode, TrainConfig};
use semisup_core::schedules::{Schedule, Shape};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub data_seed: u64,
    /// Train / validation / test scene counts.
    pub sizes: (usize, usize, usize),
    /// Dataset directory used by `train`; empty means `<out>/dataset`.
    pub data_dir: String,
    pub ratio: f64,
    pub folds: usize,
    pub train: TrainConfig,
    pub checkpoint_every: usize,
    pub seeds: Vec<u64>,
    pub regime_window: usize,
    pub regime_slope: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            data_seed: 2024,
            sizes: STANDARD_SIZES,
            data_dir: String::new(),
            ratio: 0.1,
            folds: 1,
            train: TrainConfig::default(),
            checkpoint_every: 5,
            seeds: vec![0],
            regime_window: semisup_core::engine::REGIME_WINDOW,
            regime_slope: semisup_core::engine::REGIME_SLOPE,
        }
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn fmt_flist(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f(*x)).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, String>
where
    T::Err: Debug,
{
    v.parse::<T>().map_err(|e| format!("{key}: cannot parse {v:?} ({e:?})"))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, String>
where
    T::Err: Debug,
{
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_pair<T: FromStr + Copy>(key: &str, v: &str) -> Result<(T, T), String>
where
    T::Err: Debug,
{
    match parse_list::<T>(key, v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(format!("{key}: expected two comma-separated values")),
    }
}

fn init_name(m: InitMode) -> &'static str {
    match m {
        InitMode::PretrainedWarmstart => "pretrained-warmstart",
        InitMode::Random => "random",
    }
}

fn ema_name(e: EmaGranularity) -> &'static str {
    match e {
        EmaGranularity::Iteration => "iteration",
        EmaGranularity::Epoch => "epoch",
    }
}

const POLICIES: [&str; 4] = ["pi", "alpha", "sigma", "m"];

impl ExperimentConfig {
    fn schedule(&self, name: &str) -> &Schedule {
        let p = &self.train.policy;
        match name {
            "pi" => &p.sampling,
            "alpha" => &p.loss_weight,
            "sigma" => &p.threshold,
            _ => &p.momentum,
        }
    }

    fn schedule_mut(&mut self, name: &str) -> &mut Schedule {
        let p = &mut self.train.policy;
        match name {
            "pi" => &mut p.sampling,
            "alpha" => &mut p.loss_weight,
            "sigma" => &mut p.threshold,
            _ => &mut p.momentum,
        }
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let d = &self.dataset;
        let t = &self.train;
        let a = &t.policy.aug;
        let det = &t.detector;
        let o = &t.optimizer;
        let mut e: Vec<(String, String)> = vec![
            ("dataset.width".into(), d.width.to_string()),
            ("dataset.height".into(), d.height.to_string()),
            ("dataset.count_probs".into(), fmt_flist(&d.count_probs)),
            ("dataset.classes".into(), d.n_classes.to_string()),
            ("dataset.min_size".into(), d.min_size.to_string()),
            ("dataset.max_size".into(), d.max_size.to_string()),
            ("dataset.color_jitter".into(), fmt_f(d.color_jitter)),
            ("dataset.clutter".into(), fmt_f(d.clutter)),
            ("dataset.occlusion_prob".into(), fmt_f(d.occlusion_prob)),
            ("dataset.seed".into(), self.data_seed.to_string()),
            ("dataset.train".into(), self.sizes.0.to_string()),
            ("dataset.val".into(), self.sizes.1.to_string()),
            ("dataset.test".into(), self.sizes.2.to_string()),
            ("dataset.dir".into(), self.data_dir.clone()),
            ("split.ratio".into(), fmt_f(self.ratio)),
            ("split.folds".into(), self.folds.to_string()),
        ];
        for name in POLICIES {
            let s = self.schedule(name);
            e.push((format!("policy.{name}.shape"), s.shape.name().into()));
            e.push((format!("policy.{name}.start"), fmt_f(s.start)));
            e.push((format!("policy.{name}.end"), fmt_f(s.end)));
            e.push((format!("policy.{name}.warmup"), fmt_f(s.warmup_frac)));
            e.push((format!("policy.{name}.cooldown"), fmt_f(s.cooldown_frac)));
            e.push((format!("policy.{name}.steepness"), fmt_f(s.steepness)));
        }
        e.extend([
            ("aug.enabled".into(), a.enabled.to_string()),
            ("aug.weak_intensity".into(), fmt_f(a.weak_intensity)),
            ("aug.strong_intensity".into(), fmt_f(a.strong_intensity)),
            ("aug.flip".into(), a.flip.to_string()),
            ("aug.translate".into(), a.translate.to_string()),
            ("aug.crop".into(), a.crop.to_string()),
            ("aug.color".into(), a.color.to_string()),
            ("aug.erase".into(), a.erase.to_string()),
            ("aug.max_translate".into(), fmt_f(a.max_translate)),
            ("aug.max_jitter".into(), fmt_f(a.max_jitter)),
            ("aug.min_crop_scale".into(), fmt_f(a.min_crop_scale)),
            ("aug.erase_count".into(), format!("{},{}", a.erase_count.0, a.erase_count.1)),
            ("aug.erase_area".into(), format!("{},{}", fmt_f(a.erase_area.0), fmt_f(a.erase_area.1))),
            ("aug.crop_keep_visible".into(), fmt_f(a.crop_keep_visible)),
            ("aug.crop_attempts".into(), a.crop_attempts.to_string()),
            ("aug.min_visible".into(), fmt_f(a.min_visible)),
            ("detector.cells".into(), det.arch.cells.to_string()),
            ("detector.hidden".into(), det.arch.hidden.to_string()),
            ("detector.queries".into(), det.arch.queries.to_string()),
            ("detector.reg_weight".into(), fmt_f(det.reg_weight)),
            ("detector.noobj_weight".into(), fmt_f(det.noobj_weight)),
            ("optimizer.lr".into(), fmt_f(t.lr)),
            ("optimizer.beta1".into(), fmt_f(o.beta1)),
            ("optimizer.beta2".into(), fmt_f(o.beta2)),
            ("optimizer.eps".into(), fmt_f(o.eps)),
            ("optimizer.weight_decay".into(), fmt_f(o.weight_decay)),
            ("optimizer.lr_decay_at".into(), fmt_f(t.lr_decay_at)),
            ("optimizer.lr_decay_factor".into(), fmt_f(t.lr_decay_factor)),
            ("train.epochs".into(), t.epochs.to_string()),
            ("train.batch_size".into(), t.batch_size.to_string()),
            ("train.iters_per_epoch".into(), t.iters_per_epoch.map_or("auto".into(), |n| n.to_string())),
            ("train.init".into(), init_name(t.init).into()),
            ("train.warmstart_frac".into(), fmt_f(t.warmstart_frac)),
            ("train.ema".into(), ema_name(t.ema).into()),
            ("train.val_every".into(), t.val_every.to_string()),
            ("train.checkpoint_every".into(), self.checkpoint_every.to_string()),
            ("run.seeds".into(), fmt_list(&self.seeds)),
            ("regime.window".into(), self.regime_window.to_string()),
            ("regime.slope".into(), fmt_f(self.regime_slope)),
        ]);
        e
    }

    /// Assigns one key. Errors name the key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        if let Some(rest) = key.strip_prefix("policy.") {
            let (name, field) = rest.split_once('.').ok_or_else(|| format!("unknown key {key:?}"))?;
            if !POLICIES.contains(&name) {
                return Err(format!("unknown policy {name:?} in {key:?}; expected one of pi, alpha, sigma, m"));
            }
            let s = self.schedule_mut(name);
            match field {
                "shape" => s.shape = v.parse::<Shape>().map_err(|e| format!("{key}: {e}"))?,
                "start" => s.start = parse(key, v)?,
                "end" => s.end = parse(key, v)?,
                "warmup" => s.warmup_frac = parse(key, v)?,
                "cooldown" => s.cooldown_frac = parse(key, v)?,
                "steepness" => s.steepness = parse(key, v)?,
                _ => return Err(format!("unknown key {key:?}")),
            }
            return Ok(());
        }
        let d = &mut self.dataset;
        let t = &mut self.train;
        let a: &mut AugConfig = &mut t.policy.aug;
        match key {
            "dataset.width" => {
                d.width = parse(key, v)?;
                t.detector.arch.width = d.width;
            }
            "dataset.height" => {
                d.height = parse(key, v)?;
                t.detector.arch.height = d.height;
            }
            "dataset.count_probs" => d.count_probs = parse_list(key, v)?,
            "dataset.classes" => {
                d.n_classes = parse(key, v)?;
                t.detector.arch.classes = d.n_classes;
            }
            "dataset.min_size" => d.min_size = parse(key, v)?,
            "dataset.max_size" => d.max_size = parse(key, v)?,
            "dataset.color_jitter" => d.color_jitter = parse(key, v)?,
            "dataset.clutter" => d.clutter = parse(key, v)?,
            "dataset.occlusion_prob" => d.occlusion_prob = parse(key, v)?,
            "dataset.seed" => self.data_seed = parse(key, v)?,
            "dataset.train" => self.sizes.0 = parse(key, v)?,
            "dataset.val" => self.sizes.1 = parse(key, v)?,
            "dataset.test" => self.sizes.2 = parse(key, v)?,
            "dataset.dir" => self.data_dir = v.to_string(),
            "split.ratio" => self.ratio = parse(key, v)?,
            "split.folds" => self.folds = parse(key, v)?,
            "aug.enabled" => a.enabled = parse(key, v)?,
            "aug.weak_intensity" => a.weak_intensity = parse(key, v)?,
            "aug.strong_intensity" => a.strong_intensity = parse(key, v)?,
            "aug.flip" => a.flip = parse(key, v)?,
            "aug.translate" => a.translate = parse(key, v)?,
            "aug.crop" => a.crop = parse(key, v)?,
            "aug.color" => a.color = parse(key, v)?,
            "aug.erase" => a.erase = parse(key, v)?,
            "aug.max_translate" => a.max_translate = parse(key, v)?,
            "aug.max_jitter" => a.max_jitter = parse(key, v)?,
            "aug.min_crop_scale" => a.min_crop_scale = parse(key, v)?,
            "aug.erase_count" => a.erase_count = parse_pair(key, v)?,
            "aug.erase_area" => a.erase_area = parse_pair(key, v)?,
            "aug.crop_keep_visible" => a.crop_keep_visible = parse(key, v)?,
            "aug.crop_attempts" => a.crop_attempts = parse(key, v)?,
            "aug.min_visible" => a.min_visible = parse(key, v)?,
            "detector.cells" => t.detector.arch.cells = parse(key, v)?,
            "detector.hidden" => t.detector.arch.hidden = parse(key, v)?,
            "detector.queries" => t.detector.arch.queries = parse(key, v)?,
            "detector.reg_weight" => t.detector.reg_weight = parse(key, v)?,
            "detector.noobj_weight" => t.detector.noobj_weight = parse(key, v)?,
            "optimizer.lr" => t.lr = parse(key, v)?,
            "optimizer.beta1" => t.optimizer.beta1 = parse(key, v)?,
            "optimizer.beta2" => t.optimizer.beta2 = parse(key, v)?,
            "optimizer.eps" => t.optimizer.eps = parse(key, v)?,
            "optimizer.weight_decay" => t.optimizer.weight_decay = parse(key, v)?,
            "optimizer.lr_decay_at" => t.lr_decay_at = parse(key, v)?,
            "optimizer.lr_decay_factor" => t.lr_decay_factor = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.iters_per_epoch" => t.iters_per_epoch = if v == "auto" { None } else { Some(parse(key, v)?) },
            "train.init" => {
                t.init = match v {
                    "pretrained-warmstart" => InitMode::PretrainedWarmstart,
                    "random" => InitMode::Random,
                    _ => return Err(format!("{key}: expected pretrained-warmstart or random, got {v:?}")),
                }
            }
            "train.warmstart_frac" => t.warmstart_frac = parse(key, v)?,
            "train.ema" => {
                t.ema = match v {
                    "iteration" => EmaGranularity::Iteration,
                    "epoch" => EmaGranularity::Epoch,
                    _ => return Err(format!("{key}: expected iteration or epoch, got {v:?}")),
                }
            }
            "train.val_every" => t.val_every = parse(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "run.seeds" => self.seeds = parse_list(key, v)?,
            "regime.window" => self.regime_window = parse(key, v)?,
            "regime.slope" => self.regime_slope = parse(key, v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = ExperimentConfig::default();
        for (key, value, line) in split_lines(text)? {
            cfg.set(&key, &value).map_err(|e| CliError::Config(format!("line {line}: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// Only the keys that shape the generated scenes.
    pub fn dataset_text(&self) -> String {
        self.entries()
            .into_iter()
            .filter(|(k, _)| k.starts_with("dataset.") && k != "dataset.dir")
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn is_supervised_baseline(&self) -> bool {
        let p = &self.train.policy;
        p.sampling.is_always_zero() || p.loss_weight.is_always_zero()
    }

    pub fn validate(&self) -> CliResult<()> {
        let cfg_err = |e: semisup_core::Error| CliError::Config(e.to_string());
        self.dataset.validate().map_err(cfg_err)?;
        self.train.validate().map_err(cfg_err)?;
        let arch = self.train.detector.arch;
        if arch.width != self.dataset.width || arch.height != self.dataset.height || arch.classes != self.dataset.n_classes {
            return Err(CliError::Config("detector image size and classes must match the dataset".into()));
        }
        if self.sizes.0 == 0 {
            return Err(CliError::Config("dataset.train: must be positive".into()));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(CliError::Config("split.ratio: must lie in (0, 1]".into()));
        }
        if self.folds == 0 {
            return Err(CliError::Config("split.folds: must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("run.seeds: at least one seed is required".into()));
        }
        if self.regime_window < 2 {
            return Err(CliError::Config("regime.window: must be at least 2".into()));
        }
        Ok(())
    }
}

/// `(key, value, line number)` triples of a config text.
pub fn split_lines(text: &str) -> CliResult<Vec<(String, String, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`, found {raw:?}", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(CliError::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string(), i + 1));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(ExperimentConfig::parse("").unwrap(), c);
    }

    #[test]
    fn edited_config_round_trips() {
        let text = "policy.sigma.shape = linear\npolicy.sigma.start = 0.3 # comment\npolicy.sigma.end = 0.5\n\
                    run.seeds = 4,5,6\naug.erase_area = 0.01,0.2\ntrain.iters_per_epoch = 7\ntrain.init = random\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.train.policy.threshold, Schedule::linear(0.3, 0.5));
        assert_eq!(c.seeds, vec![4, 5, 6]);
        assert_eq!(c.train.iters_per_epoch, Some(7));
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn errors_name_line_and_key() {
        let e = ExperimentConfig::parse("split.ratio = 0.1\npolicy.sigma.start = high\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("line 2") && msg.contains("policy.sigma.start"), "{msg}");
        assert!(ExperimentConfig::parse("no equals sign").is_err());
        assert!(ExperimentConfig::parse("bogus.key = 1").is_err());
        assert!(ExperimentConfig::parse("policy.zeta.start = 1").is_err());
    }

    #[test]
    fn supervised_baseline_detection() {
        let mut c = ExperimentConfig::default();
        assert!(!c.is_supervised_baseline());
        c.set("policy.pi.shape", "constant").unwrap();
        c.set("policy.pi.start", "0").unwrap();
        assert!(c.is_supervised_baseline());
    }
}
