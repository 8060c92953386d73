//! The full two-stage model: text encoders, one CA module per stage, and
//! the generator/discriminator pairs, all sharing one parameter store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{CaModule, CaVars, STAGE1_CA, STAGE2_CA};
use crate::engine::{Float, ParamStore, Session, Tensor, Var};
use crate::error::{Error, Result};
use crate::networks::{Discriminator, ModelDims, StageOneGenerator, StageTwoGenerator, D, D0, G, G0};
use crate::text::{DialogueEncoder, EncodedText, TextDims, TextEncoder, GROUP as ENC};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl Stage {
    pub fn from_number(n: u32) -> Result<Stage> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            other => Err(Error::Config(format!("stage must be 1 or 2, got {other}"))),
        }
    }

    pub fn number(self) -> u32 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dims: ModelDims,
    pub text: TextDims,
    pub encoder: DialogueEncoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChatPainter {
    pub spec: ModelSpec,
    pub encoder: TextEncoder,
    pub ca0: CaModule,
    pub ca: CaModule,
    pub g0: StageOneGenerator,
    pub d0: Discriminator,
    pub g: StageTwoGenerator,
    pub d: Discriminator,
}

/// Trainable parameter groups of each step.
pub fn generator_groups(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::One => &[ENC, STAGE1_CA, G0],
        Stage::Two => &[STAGE2_CA, G],
    }
}

pub fn discriminator_group(stage: Stage) -> &'static str {
    match stage {
        Stage::One => D0,
        Stage::Two => D,
    }
}

/// Groups a checkpoint of the given stage carries.
pub fn stage_groups(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::One => &[ENC, STAGE1_CA, G0, D0],
        Stage::Two => &[ENC, STAGE1_CA, G0, STAGE2_CA, G, D],
    }
}

impl ChatPainter {
    pub fn new(spec: ModelSpec) -> Result<ChatPainter> {
        spec.dims.validate()?;
        let dims = spec.dims;
        let encoder = TextEncoder::new(spec.text, spec.encoder);
        let e_dim = encoder.embedding_dim();
        Ok(ChatPainter {
            spec,
            encoder,
            ca0: CaModule::new(STAGE1_CA, dims.n_g),
            ca: CaModule::new(STAGE2_CA, dims.n_g),
            g0: StageOneGenerator::new(dims),
            d0: Discriminator::stage1(dims, e_dim),
            g: StageTwoGenerator::new(dims),
            d: Discriminator::stage2(dims, e_dim),
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.spec.dims
    }

    pub fn init_stage1<T: Float, R: Rng>(&self, store: &mut ParamStore<T>, vocab_size: usize, rng: &mut R) {
        self.encoder.init_params(store, vocab_size, rng);
        self.ca0.init_params(store, self.encoder.embedding_dim(), rng);
        self.g0.init_params(store, rng);
        self.d0.init_params(store, rng);
    }

    pub fn init_stage2<T: Float, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.ca.init_params(store, self.encoder.embedding_dim(), rng);
        self.g.init_params(store, rng);
        self.d.init_params(store, rng);
    }

    pub fn init_all<T: Float, R: Rng>(&self, store: &mut ParamStore<T>, vocab_size: usize, rng: &mut R) {
        self.init_stage1(store, vocab_size, rng);
        self.init_stage2(store, rng);
    }

    pub fn embed<T: Float>(&self, s: &mut Session<'_, T>, texts: &[&EncodedText]) -> Result<Var> {
        self.encoder.embed(s, texts)
    }

    /// Stage-I generation: condition, then `G0(z, c_hat0)`.
    pub fn stage1_fake<T: Float>(
        &self,
        s: &mut Session<'_, T>,
        e: Var,
        z: Tensor<T>,
        eps0: Tensor<T>,
        train: bool,
    ) -> Result<(Var, CaVars)> {
        let ca = self.ca0.forward(s, e, eps0)?;
        let z = s.tape.constant(z);
        let fake = self.g0.forward(s, z, ca.c_hat, train)?;
        Ok((fake, ca))
    }

    /// Stage-II generation from a frozen Stage-I: `G(G0(z, c_hat0), c_hat)`.
    /// Returns the refined image, the Stage-I image and the Stage-II CA outputs.
    pub fn stage2_fake<T: Float>(
        &self,
        s: &mut Session<'_, T>,
        e: Var,
        noise: &StageNoise<T>,
        train: bool,
    ) -> Result<(Var, Var, CaVars)> {
        let (s0, _) = self.stage1_fake(s, e, noise.z.clone(), noise.eps0.clone(), false)?;
        let ca = self.ca.forward(s, e, noise.eps.clone())?;
        let fake = self.g.forward(s, s0, ca.c_hat, train)?;
        Ok((fake, s0, ca))
    }
}

/// Per-batch noise: `z`, the Stage-I CA epsilon and the Stage-II CA epsilon.
#[derive(Clone, Debug, PartialEq)]
pub struct StageNoise<T> {
    pub z: Tensor<T>,
    pub eps0: Tensor<T>,
    pub eps: Tensor<T>,
}
