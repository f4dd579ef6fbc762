//! Experiment configuration in a flat `key = value` text format.
//!
//! ```text
//! # comments start with '#'
//! data.classes = 4
//! paws.T = 0.25
//! ```
//!
//! Every key has a default, so an empty file is a valid configuration.
//! [`TrainConfig::render`] writes every key back out; parsing that output
//! reproduces the same configuration bit for bit.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::error::{PawsError, Result};
use crate::objective::{LossOptions, MeMaxVariant};
use crate::optim::LrSchedule;
use crate::views::{AugmentConfig, LocalMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Blobs,
    Grid,
}

impl FromStr for DataKind {
    type Err = PawsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "grid" => Ok(Self::Grid),
            _ => Err(PawsError::Config(format!("unknown dataset kind {s:?} (expected blobs or grid)"))),
        }
    }
}

impl std::fmt::Display for DataKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Blobs => "blobs",
            Self::Grid => "grid",
        })
    }
}

trait Value: Sized {
    fn render(&self) -> String;
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn render(&self) -> String {
                self.to_string()
            }
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
        }
    )*};
}
display_value!(usize, u64, bool, DataKind, MeMaxVariant);

impl Value for f64 {
    fn render(&self) -> String {
        // Debug output is the shortest string that parses back to the same bits.
        format!("{self:?}")
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e| format!("{e}"))
    }
}

impl Value for Vec<f64> {
    fn render(&self) -> String {
        self.iter().map(Value::render).collect::<Vec<_>>().join(",")
    }
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(|p| f64::parse_value(p.trim())).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub grid_height: usize,
    pub grid_width: usize,
    pub seed: u64,
    pub label_budget: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub trunk_layers: usize,
    pub proj_hidden: usize,
    pub proj_layers: usize,
    pub embed_dim: usize,
    pub prediction_head: bool,
    pub pred_hidden: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PawsConfig {
    pub tau: f64,
    pub sharpen_t: f64,
    pub smoothing: f64,
    pub me_max: bool,
    pub me_max_variant: MeMaxVariant,
    pub entropy_min_weight: f64,
    pub prop2_targets: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewConfig {
    pub global: usize,
    pub local: usize,
    pub noise_sigma: f64,
    pub scale_low: f64,
    pub scale_high: f64,
    pub mask_fraction: f64,
    pub support_views: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportConfig {
    pub classes: usize,
    pub per_class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Write `checkpoint-e{epoch}.paws` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Evaluate nearest-neighbour accuracy every this many epochs; 0 means only at the end.
    pub eval_every: usize,
    pub diagnostics: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub start_lr: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub lrs: Vec<f64>,
    pub val_fraction: f64,
    pub batch_size: usize,
    pub momentum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub paws: PawsConfig,
    pub views: ViewConfig,
    pub support: SupportConfig,
    pub train: LoopConfig,
    pub optim: OptimConfig,
    pub finetune: FineTuneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: DataConfig {
                kind: DataKind::Blobs,
                classes: 4,
                per_class: 1250,
                dim: 16,
                separation: 5.0,
                grid_height: 6,
                grid_width: 6,
                seed: 0,
                label_budget: 40,
            },
            model: ModelConfig {
                hidden_dim: 64,
                trunk_layers: 2,
                proj_hidden: 64,
                proj_layers: 3,
                embed_dim: 32,
                prediction_head: false,
                pred_hidden: 64,
                seed: 0,
            },
            paws: PawsConfig {
                tau: 0.1,
                sharpen_t: 0.25,
                smoothing: 0.1,
                me_max: true,
                me_max_variant: MeMaxVariant::Differentiable,
                entropy_min_weight: 0.0,
                prop2_targets: false,
            },
            views: ViewConfig {
                global: 2,
                local: 6,
                noise_sigma: 0.3,
                scale_low: 0.8,
                scale_high: 1.2,
                mask_fraction: 0.25,
                support_views: 1,
            },
            support: SupportConfig { classes: 4, per_class: 8 },
            train: LoopConfig {
                batch_size: 256,
                epochs: 100,
                seed: 0,
                checkpoint_every: 0,
                eval_every: 10,
                diagnostics: true,
            },
            optim: OptimConfig {
                momentum: 0.9,
                weight_decay: 5e-4,
                start_lr: 0.001,
                peak_lr: 0.5,
                final_lr: 0.0,
                warmup_epochs: 10.0,
            },
            finetune: FineTuneConfig {
                epochs: 30,
                lrs: vec![0.01, 0.02, 0.05, 0.1, 0.2],
                val_fraction: 0.2,
                batch_size: 16,
                momentum: 0.9,
            },
        }
    }
}

macro_rules! fields {
    ($($key:literal => $($f:ident).+;)*) => {
        /// All keys in file order.
        pub const KEYS: &'static [&'static str] = &[$($key),*];

        fn entries(&self) -> Vec<(&'static str, String)> {
            vec![$(($key, Value::render(&self.$($f).+))),*]
        }

        /// Sets one field from its text form.
        pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
            let value = value.trim();
            match key {
                $($key => {
                    self.$($f).+ = Value::parse_value(value)
                        .map_err(|e| PawsError::Config(format!("bad value {value:?} for {key}: {e}")))?;
                })*
                _ => return Err(PawsError::Config(format!("unknown config key {key:?}"))),
            }
            Ok(())
        }
    };
}

impl TrainConfig {
    fields! {
        "data.kind" => data.kind;
        "data.classes" => data.classes;
        "data.per_class" => data.per_class;
        "data.dim" => data.dim;
        "data.separation" => data.separation;
        "data.grid_height" => data.grid_height;
        "data.grid_width" => data.grid_width;
        "data.seed" => data.seed;
        "data.label_budget" => data.label_budget;
        "model.hidden_dim" => model.hidden_dim;
        "model.trunk_layers" => model.trunk_layers;
        "model.proj_hidden" => model.proj_hidden;
        "model.proj_layers" => model.proj_layers;
        "model.embed_dim" => model.embed_dim;
        "model.prediction_head" => model.prediction_head;
        "model.pred_hidden" => model.pred_hidden;
        "model.seed" => model.seed;
        "paws.tau" => paws.tau;
        "paws.T" => paws.sharpen_t;
        "paws.smoothing" => paws.smoothing;
        "paws.me_max" => paws.me_max;
        "paws.me_max_variant" => paws.me_max_variant;
        "paws.entropy_min_weight" => paws.entropy_min_weight;
        "paws.prop2_targets" => paws.prop2_targets;
        "views.global" => views.global;
        "views.local" => views.local;
        "views.noise_sigma" => views.noise_sigma;
        "views.scale_low" => views.scale_low;
        "views.scale_high" => views.scale_high;
        "views.mask_fraction" => views.mask_fraction;
        "views.support_views" => views.support_views;
        "support.classes" => support.classes;
        "support.per_class" => support.per_class;
        "train.batch_size" => train.batch_size;
        "train.epochs" => train.epochs;
        "train.seed" => train.seed;
        "train.checkpoint_every" => train.checkpoint_every;
        "train.eval_every" => train.eval_every;
        "train.diagnostics" => train.diagnostics;
        "optim.momentum" => optim.momentum;
        "optim.weight_decay" => optim.weight_decay;
        "optim.start_lr" => optim.start_lr;
        "optim.peak_lr" => optim.peak_lr;
        "optim.final_lr" => optim.final_lr;
        "optim.warmup_epochs" => optim.warmup_epochs;
        "finetune.epochs" => finetune.epochs;
        "finetune.lrs" => finetune.lrs;
        "finetune.val_fraction" => finetune.val_fraction;
        "finetune.batch_size" => finetune.batch_size;
        "finetune.momentum" => finetune.momentum;
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PawsError::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                PawsError::Config(m) => PawsError::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| PawsError::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Every key with its current value, one per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(PawsError::Config(m));
        let p = &self.paws;
        for (name, v) in [("paws.tau", p.tau), ("paws.T", p.sharpen_t)] {
            if !(v > 0.0) {
                return Err(PawsError::Domain(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&p.smoothing) {
            return Err(PawsError::Domain(format!("paws.smoothing must lie in [0, 1), got {}", p.smoothing)));
        }
        if !(p.entropy_min_weight >= 0.0) {
            return Err(PawsError::Domain("paws.entropy_min_weight must be >= 0".into()));
        }
        let d = &self.data;
        if !d.label_budget.is_multiple_of(d.classes) {
            return cfg(format!("data.label_budget {} is not a multiple of {} classes", d.label_budget, d.classes));
        }
        let s = &self.support;
        if s.classes == 0 || s.classes > d.classes {
            return cfg(format!("support.classes must lie in 1..={}, got {}", d.classes, s.classes));
        }
        if d.label_budget < d.classes * s.per_class {
            return cfg(format!(
                "data.label_budget {} cannot supply {} samples for each of {} classes",
                d.label_budget, s.per_class, d.classes
            ));
        }
        if self.views.global != 2 {
            return cfg(format!("views.global must be 2, got {}", self.views.global));
        }
        if self.views.support_views == 0 {
            return cfg("views.support_views must be >= 1".into());
        }
        let train_size = d.classes * (d.per_class - d.per_class / 5);
        if self.train.batch_size == 0 || self.train.batch_size > train_size {
            return cfg(format!("train.batch_size must lie in 1..={train_size}, got {}", self.train.batch_size));
        }
        if !(0.0..1.0).contains(&self.finetune.val_fraction) || self.finetune.lrs.is_empty() {
            return cfg("finetune.val_fraction must lie in [0, 1) and finetune.lrs must be non-empty".into());
        }
        if self.finetune.batch_size == 0 {
            return cfg("finetune.batch_size must be >= 1".into());
        }
        if d.kind == DataKind::Grid && d.dim != d.grid_height * d.grid_width {
            return cfg(format!(
                "data.dim {} must equal grid_height*grid_width = {} for grid data",
                d.dim,
                d.grid_height * d.grid_width
            ));
        }
        self.augment().validate()?;
        self.encoder().validate()
    }

    pub fn encoder(&self) -> EncoderConfig {
        let m = &self.model;
        EncoderConfig {
            input_dim: self.data.dim,
            hidden_dim: m.hidden_dim,
            trunk_layers: m.trunk_layers,
            proj_hidden: m.proj_hidden,
            proj_layers: m.proj_layers,
            embed_dim: m.embed_dim,
            prediction_head: m.prediction_head,
            pred_hidden: m.pred_hidden,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        let v = &self.views;
        let local_mode = match self.data.kind {
            DataKind::Blobs => LocalMode::Mask,
            DataKind::Grid => LocalMode::Window { height: self.data.grid_height, width: self.data.grid_width },
        };
        AugmentConfig {
            noise_sigma: v.noise_sigma,
            scale_jitter: (v.scale_low, v.scale_high),
            mask_fraction_local: v.mask_fraction,
            local_mode,
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            sharpen_t: self.paws.sharpen_t,
            me_max: self.paws.me_max.then_some(self.paws.me_max_variant),
            entropy_min_weight: self.paws.entropy_min_weight,
        }
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> LrSchedule {
        let o = &self.optim;
        LrSchedule {
            warmup_epochs: o.warmup_epochs,
            start_lr: o.start_lr,
            peak_lr: o.peak_lr,
            final_lr: o.final_lr,
            total_epochs: self.train.epochs,
            steps_per_epoch,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let text = c.render();
        assert_eq!(text.lines().count(), TrainConfig::KEYS.len());
        let back = TrainConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.render(), text);
    }

    #[test]
    fn parse_with_comments_and_overrides() {
        let mut c = TrainConfig::parse("# header\n\npaws.T = 0.5  # sharper\ndata.seed=7\n").unwrap();
        assert_eq!(c.paws.sharpen_t, 0.5);
        assert_eq!(c.data.seed, 7);
        c.apply_override("paws.T=0.125").unwrap();
        assert!(c.render().contains("paws.T = 0.125\n"));
        c.apply_override("finetune.lrs = 0.1, 0.3").unwrap();
        assert_eq!(c.finetune.lrs, vec![0.1, 0.3]);
    }

    #[test]
    fn errors_are_config_errors() {
        assert!(matches!(TrainConfig::parse("nope = 1"), Err(PawsError::Config(m)) if m.contains("line 1")));
        assert!(matches!(TrainConfig::parse("paws.tau = x"), Err(PawsError::Config(_))));
        assert!(matches!(TrainConfig::parse("paws.tau"), Err(PawsError::Config(_))));
        let mut c = TrainConfig::default();
        assert!(c.apply_override("novalue").is_err());
        c.paws.tau = 0.0;
        assert!(matches!(c.validate(), Err(PawsError::Domain(_))));
        let mut c = TrainConfig::default();
        c.data.label_budget = 16;
        assert!(matches!(c.validate(), Err(PawsError::Config(_))));
    }

    #[test]
    fn float_rendering_is_exact() {
        let mut c = TrainConfig::default();
        c.optim.weight_decay = 1.0 / 3.0;
        c.data.separation = 1e-300;
        let back = TrainConfig::parse(&c.render()).unwrap();
        assert_eq!(back.optim.weight_decay.to_bits(), c.optim.weight_decay.to_bits());
        assert_eq!(back.data.separation, 1e-300);
    }
}
