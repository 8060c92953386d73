//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! # comments run to the end of the line
//! seed = 3
//! model.dialogue_encoder = recurrent
//! dims.n_z = 16
//! train.lr0 = 0.0002
//! ```

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::evaluation::{ClassifierConfig, EvalOptions};
use crate::model::{ModelSpec, Stage};
use crate::networks::ModelDims;
use crate::text::{DialogueEncoder, TextDims};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_half_every: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub non_saturating: bool,
    pub checkpoint_every: usize,
    pub model: ModelSpec,
    pub classifier: ClassifierConfig,
    /// Synthetic renders the evaluation classifiers are trained on.
    pub classifier_renders: usize,
    pub n_splits: usize,
    /// Defaults to three quarters of the generated set.
    pub split_size: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from_train(&TrainConfig::desk(Stage::One, DialogueEncoder::Recurrent, 0))
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{value}` for {key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "bad value `{value}` for {key}: expected true or false"
        ))),
    }
}

impl RunConfig {
    pub fn from_train(t: &TrainConfig) -> RunConfig {
        RunConfig {
            seed: t.seed,
            epochs: t.epochs,
            lr0: t.lr0,
            lr_half_every: t.lr_half_every,
            batch_size: t.batch_size,
            lambda: t.lambda,
            beta1: t.beta1,
            beta2: t.beta2,
            non_saturating: t.non_saturating,
            checkpoint_every: t.checkpoint_every,
            model: t.model,
            classifier: ClassifierConfig::default(),
            classifier_renders: 20_000,
            n_splits: 10,
            split_size: None,
        }
    }

    /// Every addressable key with its current value, in a stable order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let d = &self.model.dims;
        let t = &self.model.text;
        let c = &self.classifier;
        vec![
            ("seed", self.seed.to_string()),
            ("model.dialogue_encoder", self.model.encoder.name().to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.lr0", self.lr0.to_string()),
            ("train.lr_half_every", self.lr_half_every.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.lambda", self.lambda.to_string()),
            ("train.beta1", self.beta1.to_string()),
            ("train.beta2", self.beta2.to_string()),
            ("train.non_saturating", self.non_saturating.to_string()),
            ("train.checkpoint_every", self.checkpoint_every.to_string()),
            ("dims.n_z", d.n_z.to_string()),
            ("dims.w0", d.w0.to_string()),
            ("dims.m_d", d.m_d.to_string()),
            ("dims.n_di", d.n_di.to_string()),
            ("dims.n_d", d.n_d.to_string()),
            ("dims.n_g", d.n_g.to_string()),
            ("dims.m_g", d.m_g.to_string()),
            ("dims.n_gi", d.n_gi.to_string()),
            ("dims.w", d.w.to_string()),
            ("dims.channel_base", d.channel_base.to_string()),
            ("dims.g0_width", d.g0_width.to_string()),
            ("dims.residual_blocks", d.residual_blocks.to_string()),
            ("text.d_word", t.d_word.to_string()),
            ("text.d_cap", t.d_cap.to_string()),
            ("text.d_dlg", t.d_dlg.to_string()),
            ("text.d_turn", t.d_turn.to_string()),
            ("text.h_rnn", t.h_rnn.to_string()),
            ("classifier.epochs", c.epochs.to_string()),
            ("classifier.batch_size", c.batch_size.to_string()),
            ("classifier.lr", c.lr.to_string()),
            ("classifier.width", c.width.to_string()),
            ("classifier.holdout_fraction", c.holdout_fraction.to_string()),
            ("classifier.floor", c.floor.to_string()),
            ("classifier.renders", self.classifier_renders.to_string()),
            ("eval.n_splits", self.n_splits.to_string()),
            (
                "eval.split_size",
                self.split_size.map_or_else(|| "auto".to_string(), |s| s.to_string()),
            ),
        ]
    }

    /// The resolved configuration as a map, for manifests.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        self.pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let d = &mut self.model.dims;
        let t = &mut self.model.text;
        let c = &mut self.classifier;
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "model.dialogue_encoder" => self.model.encoder = v.parse::<DialogueEncoder>()?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.lr0" => self.lr0 = parse(key, v)?,
            "train.lr_half_every" => self.lr_half_every = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.lambda" => self.lambda = parse(key, v)?,
            "train.beta1" => self.beta1 = parse(key, v)?,
            "train.beta2" => self.beta2 = parse(key, v)?,
            "train.non_saturating" => self.non_saturating = parse_bool(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "dims.n_z" => d.n_z = parse(key, v)?,
            "dims.w0" => d.w0 = parse(key, v)?,
            "dims.m_d" => d.m_d = parse(key, v)?,
            "dims.n_di" => d.n_di = parse(key, v)?,
            "dims.n_d" => d.n_d = parse(key, v)?,
            "dims.n_g" => d.n_g = parse(key, v)?,
            "dims.m_g" => d.m_g = parse(key, v)?,
            "dims.n_gi" => d.n_gi = parse(key, v)?,
            "dims.w" => d.w = parse(key, v)?,
            "dims.channel_base" => d.channel_base = parse(key, v)?,
            "dims.g0_width" => d.g0_width = parse(key, v)?,
            "dims.residual_blocks" => d.residual_blocks = parse(key, v)?,
            "text.d_word" => t.d_word = parse(key, v)?,
            "text.d_cap" => t.d_cap = parse(key, v)?,
            "text.d_dlg" => t.d_dlg = parse(key, v)?,
            "text.d_turn" => t.d_turn = parse(key, v)?,
            "text.h_rnn" => t.h_rnn = parse(key, v)?,
            "classifier.epochs" => c.epochs = parse(key, v)?,
            "classifier.batch_size" => c.batch_size = parse(key, v)?,
            "classifier.lr" => c.lr = parse(key, v)?,
            "classifier.width" => c.width = parse(key, v)?,
            "classifier.holdout_fraction" => c.holdout_fraction = parse(key, v)?,
            "classifier.floor" => c.floor = parse(key, v)?,
            "classifier.renders" => self.classifier_renders = parse(key, v)?,
            "eval.n_splits" => self.n_splits = parse(key, v)?,
            "eval.split_size" => self.split_size = if v == "auto" { None } else { Some(parse(key, v)?) },
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies the `key = value` lines of `text` on top of `self`.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).at(path)?;
        self.apply_str(&text)
    }

    /// Applies `key=value` overrides as given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Renders the configuration in the file format; `apply_str` reads it back.
    pub fn to_text(&self) -> String {
        self.pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn train_config(&self, stage: Stage) -> Result<TrainConfig> {
        let t = TrainConfig {
            stage,
            epochs: self.epochs,
            lr0: self.lr0,
            lr_half_every: self.lr_half_every,
            batch_size: self.batch_size,
            lambda: self.lambda,
            beta1: self.beta1,
            beta2: self.beta2,
            seed: self.seed,
            model: self.model,
            non_saturating: self.non_saturating,
            checkpoint_every: self.checkpoint_every,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            seed: self.seed,
            ..self.classifier.clone()
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            seed: self.seed,
            n_splits: self.n_splits,
            split_size: self.split_size,
        }
    }

    pub fn dims(&self) -> &ModelDims {
        &self.model.dims
    }

    pub fn text_dims(&self) -> &TextDims {
        &self.model.text
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
