//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::data::{ObjectKind, SyntheticSpec};
use crate::encoders::{TextConfig, VisualConfig};
use crate::feature_gen::{CfgConfig, NoiseScale};
use crate::pretrain::PretrainConfig;
use crate::prompts::{
    PromptInit, ABNORMAL_TEMPLATE, NORMAL_TEMPLATE, SIMPLE_ABNORMAL_TEMPLATE,
    SIMPLE_NORMAL_TEMPLATE,
};
use crate::tuning::TrainConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: bad value for `{key}`: {reason}")]
    Value {
        line: usize,
        key: String,
        reason: String,
    },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("{0}")]
    Inconsistent(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SigmaMode {
    Relative,
    Absolute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateStyle {
    Complex,
    Simple,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub d: usize,
    pub t: usize,
    pub k_radius: f64,
    pub tap_layers: [usize; 2],
    pub tau: f32,
    pub sigma_mode: SigmaMode,
    pub sigma_value: f64,
    pub anomaly_fraction_cap: f64,
    pub regenerate_noise: bool,
    pub lambda: f64,
    pub epochs: usize,
    pub meta_rounds: usize,
    pub lr: f64,
    pub shots: usize,
    pub n_test: usize,
    pub object: ObjectKind,
    pub templates: TemplateStyle,
    pub prompt_init: PromptInit,
    pub enable_so: bool,
    pub enable_mg: bool,
    pub enable_tf: bool,
    pub enable_la: bool,
    pub joint_calibration: bool,
    pub use_vg: bool,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub dense_weight: f64,
    pub corpus_size: usize,
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub prompts_checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            patch_size: 8,
            depth: 4,
            d: 32,
            t: 8,
            k_radius: 1.5,
            tap_layers: [2, 3],
            tau: 0.07,
            sigma_mode: SigmaMode::Relative,
            sigma_value: 1.0,
            anomaly_fraction_cap: 0.25,
            regenerate_noise: true,
            lambda: 1.0,
            epochs: 100,
            meta_rounds: 5,
            lr: 1e-4,
            shots: 1,
            n_test: 50,
            object: ObjectKind::Disk,
            templates: TemplateStyle::Complex,
            prompt_init: PromptInit::FromMeta,
            enable_so: true,
            enable_mg: true,
            enable_tf: true,
            enable_la: true,
            joint_calibration: false,
            use_vg: true,
            pretrain_steps: 500,
            pretrain_batch: 16,
            pretrain_lr: 2e-3,
            dense_weight: 1.0,
            corpus_size: 256,
            data_dir: PathBuf::from("data"),
            checkpoint: PathBuf::from("encoder.ckpt"),
            prompts_checkpoint: PathBuf::from("prompts.ckpt"),
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("expected true/false, got `{v}`")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn positive(v: usize) -> Result<usize, String> {
    if v == 0 {
        Err("must be positive".into())
    } else {
        Ok(v)
    }
}

fn finite_pos(v: f64) -> Result<f64, String> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err("must be a positive finite number".into())
    }
}

fn non_neg(v: f64) -> Result<f64, String> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err("must be a non-negative finite number".into())
    }
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "image_size",
        "patch_size",
        "depth",
        "d",
        "t",
        "k_radius",
        "tap_layers",
        "tau",
        "sigma_mode",
        "sigma_value",
        "anomaly_fraction_cap",
        "regenerate_noise",
        "lambda",
        "epochs",
        "meta_rounds",
        "lr",
        "shots",
        "n_test",
        "object",
        "templates",
        "prompt_init",
        "enable_so",
        "enable_mg",
        "enable_tf",
        "enable_la",
        "joint_calibration",
        "use_vg",
        "pretrain_steps",
        "pretrain_batch",
        "pretrain_lr",
        "dense_weight",
        "corpus_size",
        "data_dir",
        "checkpoint",
        "prompts_checkpoint",
        "out_dir",
    ];

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.into(),
                });
            }
            cfg.set(key, value).map_err(|e| match e {
                SetError::Unknown => ConfigError::UnknownKey {
                    line,
                    key: key.into(),
                },
                SetError::Bad(reason) => ConfigError::Value {
                    line,
                    key: key.into(),
                    reason,
                },
            })?;
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), SetError> {
        let bad = SetError::Bad;
        match key {
            "seed" => self.seed = parse_num(v).map_err(bad)?,
            "image_size" => self.image_size = parse_num(v).and_then(positive).map_err(bad)?,
            "patch_size" => self.patch_size = parse_num(v).and_then(positive).map_err(bad)?,
            "depth" => self.depth = parse_num(v).and_then(positive).map_err(bad)?,
            "d" => self.d = parse_num(v).and_then(positive).map_err(bad)?,
            "t" => self.t = parse_num(v).and_then(positive).map_err(bad)?,
            "k_radius" => self.k_radius = parse_num(v).and_then(finite_pos).map_err(bad)?,
            "tap_layers" => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 2 {
                    return Err(bad("expected two comma-separated layers".into()));
                }
                self.tap_layers = [
                    parse_num(parts[0]).map_err(bad)?,
                    parse_num(parts[1]).map_err(bad)?,
                ];
            }
            "tau" => {
                let t: f64 = parse_num(v).and_then(finite_pos).map_err(bad)?;
                self.tau = t as f32;
            }
            "sigma_mode" => {
                self.sigma_mode = match v {
                    "relative" => SigmaMode::Relative,
                    "absolute" => SigmaMode::Absolute,
                    _ => return Err(bad("expected relative or absolute".into())),
                }
            }
            "sigma_value" => self.sigma_value = parse_num(v).and_then(non_neg).map_err(bad)?,
            "anomaly_fraction_cap" => {
                let c: f64 = parse_num(v).map_err(bad)?;
                if !(c > 0.0 && c <= 1.0) {
                    return Err(bad("must lie in (0, 1]".into()));
                }
                self.anomaly_fraction_cap = c;
            }
            "regenerate_noise" => self.regenerate_noise = parse_bool(v).map_err(bad)?,
            "lambda" => self.lambda = parse_num(v).and_then(non_neg).map_err(bad)?,
            "epochs" => self.epochs = parse_num(v).map_err(bad)?,
            "meta_rounds" => self.meta_rounds = parse_num(v).map_err(bad)?,
            "lr" => self.lr = parse_num(v).and_then(finite_pos).map_err(bad)?,
            "shots" => self.shots = parse_num(v).and_then(positive).map_err(bad)?,
            "n_test" => {
                let n: usize = parse_num(v).and_then(positive).map_err(bad)?;
                if n % 2 != 0 {
                    return Err(bad("must be even".into()));
                }
                self.n_test = n;
            }
            "object" => self.object = ObjectKind::parse(v).map_err(|e| bad(e.to_string()))?,
            "templates" => {
                self.templates = match v {
                    "complex" => TemplateStyle::Complex,
                    "simple" => TemplateStyle::Simple,
                    _ => return Err(bad("expected complex or simple".into())),
                }
            }
            "prompt_init" => {
                self.prompt_init = match v {
                    "from_meta" => PromptInit::FromMeta,
                    "random" => PromptInit::Random,
                    _ => return Err(bad("expected from_meta or random".into())),
                }
            }
            "enable_so" => self.enable_so = parse_bool(v).map_err(bad)?,
            "enable_mg" => self.enable_mg = parse_bool(v).map_err(bad)?,
            "enable_tf" => self.enable_tf = parse_bool(v).map_err(bad)?,
            "enable_la" => self.enable_la = parse_bool(v).map_err(bad)?,
            "joint_calibration" => self.joint_calibration = parse_bool(v).map_err(bad)?,
            "use_vg" => self.use_vg = parse_bool(v).map_err(bad)?,
            "pretrain_steps" => self.pretrain_steps = parse_num(v).map_err(bad)?,
            "pretrain_batch" => {
                let b: usize = parse_num(v).map_err(bad)?;
                if b < 2 {
                    return Err(bad("must be at least 2".into()));
                }
                self.pretrain_batch = b;
            }
            "pretrain_lr" => self.pretrain_lr = parse_num(v).and_then(finite_pos).map_err(bad)?,
            "dense_weight" => self.dense_weight = parse_num(v).and_then(non_neg).map_err(bad)?,
            "corpus_size" => self.corpus_size = parse_num(v).and_then(positive).map_err(bad)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            "prompts_checkpoint" => self.prompts_checkpoint = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(SetError::Unknown),
        }
        Ok(())
    }

    /// Cross-key consistency.
    pub fn check(&self) -> Result<(), ConfigError> {
        let bad = |s: String| Err(ConfigError::Inconsistent(s));
        if self.meta_rounds > 0 && self.epochs % self.meta_rounds != 0 {
            return bad(format!(
                "epochs ({}) must be a multiple of meta_rounds ({})",
                self.epochs, self.meta_rounds
            ));
        }
        if self.meta_rounds == 0 && self.epochs != 0 {
            return bad("meta_rounds = 0 requires epochs = 0".into());
        }
        if self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.tap_layers.iter().any(|&l| l >= self.depth) || self.tap_layers[0] == self.tap_layers[1] {
            return bad(format!("tap_layers {:?} invalid for depth {}", self.tap_layers, self.depth));
        }
        if self.t > self.text_config().max_len {
            return bad(format!("t = {} exceeds the text context", self.t));
        }
        Ok(())
    }

    pub fn epochs_per_meta_round(&self) -> usize {
        if self.meta_rounds == 0 {
            0
        } else {
            self.epochs / self.meta_rounds
        }
    }

    pub fn visual_config(&self) -> VisualConfig {
        VisualConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            depth: self.depth,
            width: self.d,
            joint_dim: self.d,
            radius: self.k_radius,
            tap_layers: self.tap_layers,
            mlp_hidden: 2 * self.d,
        }
    }

    pub fn text_config(&self) -> TextConfig {
        TextConfig {
            width: self.d,
            mlp_hidden: 2 * self.d,
            ..TextConfig::default()
        }
    }

    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            image_size: self.image_size,
            object: self.object,
            ..SyntheticSpec::default()
        }
    }

    pub fn cfg_config(&self) -> CfgConfig {
        CfgConfig {
            sigma: match self.sigma_mode {
                SigmaMode::Relative => NoiseScale::Relative(self.sigma_value),
                SigmaMode::Absolute => NoiseScale::Absolute(self.sigma_value),
            },
            anomaly_fraction_cap: self.anomaly_fraction_cap,
            regenerate_noise_each_epoch: self.regenerate_noise,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs_per_meta_round: self.epochs_per_meta_round(),
            meta_rounds: self.meta_rounds,
            lambda: self.lambda,
            lr: self.lr,
            seed: self.seed,
            enable_so: self.enable_so,
            enable_mg: self.enable_mg,
            enable_tf: self.enable_tf,
            enable_la: self.enable_la,
            joint_calibration: self.joint_calibration,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch: self.pretrain_batch,
            lr: self.pretrain_lr,
            tau_init: self.tau,
            dense_weight: self.dense_weight,
            seed: self.seed,
            ..PretrainConfig::default()
        }
    }

    pub fn templates(&self) -> (&'static str, &'static str) {
        match self.templates {
            TemplateStyle::Complex => (NORMAL_TEMPLATE, ABNORMAL_TEMPLATE),
            TemplateStyle::Simple => (SIMPLE_NORMAL_TEMPLATE, SIMPLE_ABNORMAL_TEMPLATE),
        }
    }

    /// Render every key, so the output parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let b = |x: bool| if x { "true" } else { "false" };
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "patch_size = {}", self.patch_size);
        let _ = writeln!(s, "depth = {}", self.depth);
        let _ = writeln!(s, "d = {}", self.d);
        let _ = writeln!(s, "t = {}", self.t);
        let _ = writeln!(s, "k_radius = {}", self.k_radius);
        let _ = writeln!(s, "tap_layers = {},{}", self.tap_layers[0], self.tap_layers[1]);
        let _ = writeln!(s, "tau = {}", self.tau);
        let mode = match self.sigma_mode {
            SigmaMode::Relative => "relative",
            SigmaMode::Absolute => "absolute",
        };
        let _ = writeln!(s, "sigma_mode = {mode}");
        let _ = writeln!(s, "sigma_value = {}", self.sigma_value);
        let _ = writeln!(s, "anomaly_fraction_cap = {}", self.anomaly_fraction_cap);
        let _ = writeln!(s, "regenerate_noise = {}", b(self.regenerate_noise));
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "meta_rounds = {}", self.meta_rounds);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "shots = {}", self.shots);
        let _ = writeln!(s, "n_test = {}", self.n_test);
        let _ = writeln!(s, "object = {}", self.object.name());
        let tpl = match self.templates {
            TemplateStyle::Complex => "complex",
            TemplateStyle::Simple => "simple",
        };
        let _ = writeln!(s, "templates = {tpl}");
        let init = match self.prompt_init {
            PromptInit::FromMeta => "from_meta",
            PromptInit::Random => "random",
        };
        let _ = writeln!(s, "prompt_init = {init}");
        let _ = writeln!(s, "enable_so = {}", b(self.enable_so));
        let _ = writeln!(s, "enable_mg = {}", b(self.enable_mg));
        let _ = writeln!(s, "enable_tf = {}", b(self.enable_tf));
        let _ = writeln!(s, "enable_la = {}", b(self.enable_la));
        let _ = writeln!(s, "joint_calibration = {}", b(self.joint_calibration));
        let _ = writeln!(s, "use_vg = {}", b(self.use_vg));
        let _ = writeln!(s, "pretrain_steps = {}", self.pretrain_steps);
        let _ = writeln!(s, "pretrain_batch = {}", self.pretrain_batch);
        let _ = writeln!(s, "pretrain_lr = {}", self.pretrain_lr);
        let _ = writeln!(s, "dense_weight = {}", self.dense_weight);
        let _ = writeln!(s, "corpus_size = {}", self.corpus_size);
        let _ = writeln!(s, "data_dir = {}", self.data_dir.display());
        let _ = writeln!(s, "checkpoint = {}", self.checkpoint.display());
        let _ = writeln!(s, "prompts_checkpoint = {}", self.prompts_checkpoint.display());
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        s
    }
}

#[derive(Debug, PartialEq)]
pub enum SetError {
    Unknown,
    Bad(String),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.epochs_per_meta_round(), 20);
        assert_eq!(c.lambda, 1.0);
        let mut c2 = c.clone();
        c2.seed = 9;
        c2.enable_so = false;
        c2.templates = TemplateStyle::Simple;
        assert_eq!(RunConfig::parse(&c2.to_text()).unwrap(), c2);
        let text = c2.to_text();
        let keys: Vec<&str> = text
            .lines()
            .map(|l| l.split('=').next().unwrap().trim())
            .collect();
        assert_eq!(keys, RunConfig::KEYS);
    }

    #[test]
    fn comments_and_values() {
        let c = RunConfig::parse("# header\nlambda = 0.5 # inline\n\nenable_mg = false\n").unwrap();
        assert_eq!(c.lambda, 0.5);
        assert!(!c.enable_mg);
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(
            RunConfig::parse("seed = 1\nlamda = 1\n"),
            Err(ConfigError::UnknownKey {
                line: 2,
                key: "lamda".into()
            })
        );
        assert!(matches!(
            RunConfig::parse("\n\nlambda = -1"),
            Err(ConfigError::Value { line: 3, .. })
        ));
        assert!(matches!(RunConfig::parse("seed"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(
            RunConfig::parse("seed = 1\nseed = 2"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        assert!(matches!(RunConfig::parse("n_test = 3"), Err(ConfigError::Value { .. })));
        assert!(matches!(
            RunConfig::parse("epochs = 7"),
            Err(ConfigError::Inconsistent(_))
        ));
    }
}
