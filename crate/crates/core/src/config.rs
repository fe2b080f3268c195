//! Run configuration as sectioned `key = value` text.
//!
//! Every key has a default; unknown keys are rejected. See
//! [`RunConfig::to_document`] for the full key list.

use sha2::{Digest, Sha256};

use crate::error::{MceError, Result};
use crate::lce::ValueKind;
use crate::model::ModelConfig;
use crate::params::OptimizerKind;
use crate::synth::SynthConfig;
use crate::tensor::ErrorNorm;
use crate::text::{format_list, parse_bool, parse_list, Document};
use crate::trainer::{PretrainConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub test_samples: usize,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: SynthConfig::default(),
            test_samples: 500,
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

fn value<T: std::str::FromStr>(field: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| MceError::config(field, format!("cannot parse `{raw}`")))
}

fn list(field: &str, raw: &str) -> Result<Vec<f64>> {
    parse_list(raw).ok_or_else(|| MceError::config(field, format!("cannot parse list `{raw}`")))
}

fn flag(field: &str, raw: &str) -> Result<bool> {
    parse_bool(raw).ok_or_else(|| MceError::config(field, format!("expected true or false, got `{raw}`")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let doc = Document::parse(text).map_err(|e| MceError::config("config", e.to_string()))?;
        let mut cfg = RunConfig::default();
        for e in doc.entries() {
            cfg.set(&e.path(), &e.value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `section.key=value`.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| MceError::config("override", format!("expected key=value, got `{spec}`")))?;
        self.set(key.trim(), raw.trim())?;
        self.validate()
    }

    fn set(&mut self, field: &str, raw: &str) -> Result<()> {
        let d = &mut self.data;
        let m = &mut self.model;
        let t = &mut self.train;
        let p = &mut self.pretrain;
        match field {
            "data.modalities" => d.modalities = value(field, raw)?,
            "data.classes" => d.classes = value(field, raw)?,
            "data.input_dim" => d.input_dim = value(field, raw)?,
            "data.train_samples" => d.samples = value(field, raw)?,
            "data.test_samples" => self.test_samples = value(field, raw)?,
            "data.snr" => d.snr = list(field, raw)?,
            "data.missing_rates" => d.missing_rates = list(field, raw)?,
            "data.class_sep" => d.class_sep = value(field, raw)?,
            "data.calibrate_missing" => d.calibrate_missing = flag(field, raw)?,
            "model.encoder_hidden" => m.encoder_hidden = value(field, raw)?,
            "model.feature_dim" => m.feature_dim = value(field, raw)?,
            "model.heads" => m.heads = value(field, raw)?,
            "model.ffn_hidden" => m.ffn_hidden = value(field, raw)?,
            "model.pos_std" => m.pos_std = value(field, raw)?,
            "train.epochs" => t.epochs = value(field, raw)?,
            "train.batch_size" => t.batch_size = value(field, raw)?,
            "train.learning_rate" => t.learning_rate = value(field, raw)?,
            "train.optimizer" => t.optimizer = raw.parse::<OptimizerKind>()?,
            "train.subset_cap" => t.subset_cap = value(field, raw)?,
            "pretrain.epochs" => p.epochs = value(field, raw)?,
            "pretrain.batch_size" => p.batch_size = value(field, raw)?,
            "pretrain.learning_rate" => p.learning_rate = value(field, raw)?,
            "lce.use_a" => t.lce.use_a = flag(field, raw)?,
            "lce.use_b" => t.lce.use_b = flag(field, raw)?,
            "lce.value" => {
                t.lce.value_kind = match raw {
                    "hard" => ValueKind::Hard,
                    "soft" => ValueKind::Soft,
                    _ => return Err(MceError::config(field, format!("expected hard or soft, got `{raw}`"))),
                }
            }
            "lce.exact_threshold" => t.lce.exact_threshold = value(field, raw)?,
            "lce.permutations" => t.lce.permutations = value(field, raw)?,
            "rce.lambda_single" => t.objective.lambdas.single = value(field, raw)?,
            "rce.lambda_sub" => t.objective.lambdas.sub = value(field, raw)?,
            "rce.lambda_aux" => t.objective.lambdas.aux = value(field, raw)?,
            "rce.epsilon" => t.objective.epsilon = value(field, raw)?,
            "rce.norm" => {
                t.objective.norm = match raw {
                    "mse" => ErrorNorm::Mse,
                    "l2" => ErrorNorm::L2,
                    _ => return Err(MceError::config(field, format!("expected mse or l2, got `{raw}`"))),
                }
            }
            "eval.path" => t.eval_path = raw.parse()?,
            "eval.every" => t.eval_every = value(field, raw)?,
            "eval.probe_every" => t.probe_every = value(field, raw)?,
            "eval.probe_steps" => t.probe.steps = value(field, raw)?,
            "eval.probe_learning_rate" => t.probe.learning_rate = value(field, raw)?,
            "run.seed" => self.seed = value(field, raw)?,
            other => return Err(MceError::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Sets the run seed, which also seeds data generation and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Synthetic-data settings with the run seed applied.
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.data.clone()
        }
    }

    /// Model settings with data-derived widths filled in.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            modalities: self.data.modalities,
            input_dim: self.data.input_dim,
            classes: self.data.classes,
            ..self.model.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth().validate()?;
        if self.test_samples == 0 {
            return Err(MceError::config("data.test_samples", "must be at least 1"));
        }
        self.model_config().validate()?;
        self.train_config().validate()?;
        let p = &self.pretrain;
        if p.epochs == 0 || p.batch_size == 0 || !(p.learning_rate > 0.0) {
            return Err(MceError::config("pretrain", "epochs, batch_size and learning_rate must be positive"));
        }
        Ok(())
    }

    /// Complete snapshot, every key present.
    pub fn to_document(&self) -> Document {
        let mut doc = Document::new();
        let d = &self.data;
        doc.push("data", "modalities", d.modalities);
        doc.push("data", "classes", d.classes);
        doc.push("data", "input_dim", d.input_dim);
        doc.push("data", "train_samples", d.samples);
        doc.push("data", "test_samples", self.test_samples);
        doc.push("data", "snr", format_list(&d.snr));
        doc.push("data", "missing_rates", format_list(&d.missing_rates));
        doc.push("data", "class_sep", d.class_sep);
        doc.push("data", "calibrate_missing", d.calibrate_missing);
        let m = &self.model;
        doc.push("model", "encoder_hidden", m.encoder_hidden);
        doc.push("model", "feature_dim", m.feature_dim);
        doc.push("model", "heads", m.heads);
        doc.push("model", "ffn_hidden", m.ffn_hidden);
        doc.push("model", "pos_std", m.pos_std);
        let t = &self.train;
        doc.push("train", "epochs", t.epochs);
        doc.push("train", "batch_size", t.batch_size);
        doc.push("train", "learning_rate", t.learning_rate);
        doc.push("train", "optimizer", t.optimizer);
        doc.push("train", "subset_cap", t.subset_cap);
        let p = &self.pretrain;
        doc.push("pretrain", "epochs", p.epochs);
        doc.push("pretrain", "batch_size", p.batch_size);
        doc.push("pretrain", "learning_rate", p.learning_rate);
        doc.push("lce", "use_a", t.lce.use_a);
        doc.push("lce", "use_b", t.lce.use_b);
        doc.push("lce", "value", match t.lce.value_kind {
            ValueKind::Hard => "hard",
            ValueKind::Soft => "soft",
        });
        doc.push("lce", "exact_threshold", t.lce.exact_threshold);
        doc.push("lce", "permutations", t.lce.permutations);
        let o = &t.objective;
        doc.push("rce", "lambda_single", o.lambdas.single);
        doc.push("rce", "lambda_sub", o.lambdas.sub);
        doc.push("rce", "lambda_aux", o.lambdas.aux);
        doc.push("rce", "epsilon", o.epsilon);
        doc.push("rce", "norm", match o.norm {
            ErrorNorm::Mse => "mse",
            ErrorNorm::L2 => "l2",
        });
        doc.push("eval", "path", t.eval_path);
        doc.push("eval", "every", t.eval_every);
        doc.push("eval", "probe_every", t.probe_every);
        doc.push("eval", "probe_steps", t.probe.steps);
        doc.push("eval", "probe_learning_rate", t.probe.learning_rate);
        doc.push("run", "seed", self.seed);
        doc
    }

    /// First 12 hex digits of the SHA-256 of the rendered snapshot.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_document().render().as_bytes());
        hex::encode(digest)[..12].to_string()
    }
}
