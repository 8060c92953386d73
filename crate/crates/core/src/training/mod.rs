//! Adversarial training of both stages.

mod batch;
mod checkpoint;
mod losses;
mod optim;
mod run;

use serde::{Deserialize, Serialize};

pub use batch::{build_matched_batch, mismatch_rotation, MatchedBatch};
pub use checkpoint::{Checkpoint, Entry, EntryKind, FORMAT_VERSION, MAGIC};
pub use losses::{
    detach, discriminator_terms, generator_terms, stage1_graph, stage1_losses, stage2_graph, stage2_losses,
    DiscriminatorTerms, GeneratorTerms, LossValues, StageGraph, LOG_EPS,
};
pub use optim::{lr_schedule, Adam};
pub use run::{train_stage, EpochMetrics, TrainOutcome, FINAL_CHECKPOINT, METRICS_FILE, METRICS_HEADER};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, Stage};
use crate::networks::ModelDims;
use crate::text::{DialogueEncoder, TextDims};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_half_every: usize,
    pub batch_size: usize,
    /// KL weight.
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub model: ModelSpec,
    /// Generator maximizes `log D` instead of minimizing `log(1 - D)`.
    pub non_saturating: bool,
    /// Write a checkpoint every this many epochs (and always at the end).
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Small-scale defaults: 60 epochs, batch 16, halving every 10 epochs.
    pub fn desk(stage: Stage, encoder: DialogueEncoder, seed: u64) -> Self {
        TrainConfig {
            stage,
            epochs: 60,
            lr0: 2e-4,
            lr_half_every: 10,
            batch_size: 16,
            lambda: 2.0,
            beta1: 0.5,
            beta2: 0.999,
            seed,
            model: ModelSpec {
                dims: ModelDims::desk(),
                text: TextDims::desk(),
                encoder,
            },
            non_saturating: false,
            checkpoint_every: 10,
        }
    }

    /// Full-size schedule: 800 epochs, halving every 50.
    pub fn paper(stage: Stage, seed: u64) -> Self {
        TrainConfig {
            stage,
            epochs: 800,
            lr0: 2e-4,
            lr_half_every: 50,
            batch_size: match stage {
                Stage::One => 384,
                Stage::Two => 64,
            },
            lambda: 2.0,
            beta1: 0.5,
            beta2: 0.999,
            seed,
            model: ModelSpec {
                dims: ModelDims::paper(),
                text: TextDims {
                    d_word: 300,
                    d_cap: 1024,
                    d_dlg: 2048,
                    d_turn: 1024,
                    h_rnn: 1024,
                },
                encoder: DialogueEncoder::Recurrent,
            },
            non_saturating: false,
            checkpoint_every: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.epochs", self.epochs),
            ("train.lr_half_every", self.lr_half_every),
            ("train.checkpoint_every", self.checkpoint_every),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config("train.lr0 must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config("train.lambda must be non-negative".into()));
        }
        for (k, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{k} must lie in [0, 1)")));
            }
        }
        let t = &self.model.text;
        if [t.d_word, t.d_cap, t.d_dlg, t.d_turn, t.h_rnn].contains(&0) {
            return Err(Error::Config("text dimensions must be positive".into()));
        }
        self.model.dims.validate()
    }
}
