//! Matching-aware adversarial objectives.
//!
//! `L_D = mean log D(real, c) + 1/2 mean log(1 - D(real, c')) + 1/2 mean log(1 - D(fake, c))`
//! is maximized by the discriminator, where `c'` is the rotated condition.
//! `L_G = mean log(1 - D(fake, c)) + lambda * mean KL` is minimized by the
//! generator side (or `-mean log D(fake, c)` in the non-saturating variant).
//!
//! The discriminator's condition `c` is the text embedding `phi_t || zeta_d`,
//! detached: it carries the text whatever the CA module does, and the
//! generator side cannot lower its loss by moving the condition instead of
//! the image.

use crate::conditioning::{kl_term, CaVars};
use crate::engine::{Float, ParamStore, Session, Tensor, Var};
use crate::error::Result;
use crate::model::ChatPainter;
use crate::networks::Discriminator;

use super::batch::MatchedBatch;

pub const LOG_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorTerms {
    /// `L_D`, to be maximized.
    pub loss: Var,
    pub d_real: Var,
    pub d_wrong: Var,
    pub d_fake: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    /// `L_G`, to be minimized.
    pub loss: Var,
    pub adversarial: Var,
    pub kl: Var,
    pub d_fake: Var,
}

fn mean_log<T: Float>(s: &mut Session<'_, T>, p: Var) -> Var {
    let l = s.tape.log_clamp(p, LOG_EPS);
    s.tape.mean_all(l)
}

fn mean_log_one_minus<T: Float>(s: &mut Session<'_, T>, p: Var) -> Var {
    let q = s.tape.one_minus(p);
    mean_log(s, q)
}

/// Builds `L_D`. Real features are computed once and scored against both
/// the matching and the mismatched condition.
pub fn discriminator_terms<T: Float>(
    s: &mut Session<'_, T>,
    disc: &Discriminator,
    real: Var,
    fake: Var,
    cond: Var,
    mismatch: &[usize],
    train: bool,
) -> Result<DiscriminatorTerms> {
    let f_real = disc.features(s, real, train)?;
    let f_fake = disc.features(s, fake, train)?;
    let d_real = disc.score(s, f_real, cond)?;
    let c_wrong = s.tape.gather_rows(cond, mismatch);
    let d_wrong = disc.score(s, f_real, c_wrong)?;
    let d_fake = disc.score(s, f_fake, cond)?;
    let real_term = mean_log(s, d_real);
    let wrong_term = mean_log_one_minus(s, d_wrong);
    let fake_term = mean_log_one_minus(s, d_fake);
    let negatives = s.tape.add(wrong_term, fake_term);
    let negatives = s.tape.scale(negatives, T::lit(0.5));
    let loss = s.tape.add(real_term, negatives);
    Ok(DiscriminatorTerms {
        loss,
        d_real,
        d_wrong,
        d_fake,
    })
}

pub fn generator_terms<T: Float>(
    s: &mut Session<'_, T>,
    disc: &Discriminator,
    fake: Var,
    cond: Var,
    ca: &CaVars,
    lambda: f64,
    non_saturating: bool,
    train: bool,
) -> Result<GeneratorTerms> {
    let d_fake = disc.forward(s, fake, cond, train)?;
    let adversarial = if non_saturating {
        let l = mean_log(s, d_fake);
        s.tape.scale(l, -T::one())
    } else {
        mean_log_one_minus(s, d_fake)
    };
    let kl = kl_term(s, ca.mu, ca.log_sigma);
    let weighted = s.tape.scale(kl, T::lit(lambda));
    let loss = s.tape.add(adversarial, weighted);
    Ok(GeneratorTerms {
        loss,
        adversarial,
        kl,
        d_fake,
    })
}

/// Constant copy of `v`'s current value.
pub fn detach<T: Float>(s: &mut Session<'_, T>, v: Var) -> Var {
    let value = s.tape.value(v).clone();
    s.tape.constant(value)
}

/// All terms of one stage on a single tape.
#[derive(Clone, Copy, Debug)]
pub struct StageGraph {
    pub d: DiscriminatorTerms,
    pub g: GeneratorTerms,
    pub fake: Var,
}

/// Stage-I graph: encoders, `ca0`, `G0` and `D0`, batch-statistics mode.
pub fn stage1_graph<T: Float>(
    s: &mut Session<'_, T>,
    model: &ChatPainter,
    batch: &MatchedBatch<T>,
    lambda: f64,
    non_saturating: bool,
) -> Result<StageGraph> {
    let e = model.embed(s, &batch.text_refs())?;
    let (fake, ca) = model.stage1_fake(s, e, batch.noise.z.clone(), batch.noise.eps0.clone(), true)?;
    let real = s.tape.constant(batch.real.clone());
    let cond = detach(s, e);
    let d = discriminator_terms(s, &model.d0, real, fake, cond, &batch.mismatch, true)?;
    let g = generator_terms(s, &model.d0, fake, cond, &ca, lambda, non_saturating, true)?;
    Ok(StageGraph { d, g, fake })
}

/// Stage-II graph on top of a frozen Stage-I (`G0` in running-statistics mode).
pub fn stage2_graph<T: Float>(
    s: &mut Session<'_, T>,
    model: &ChatPainter,
    batch: &MatchedBatch<T>,
    lambda: f64,
    non_saturating: bool,
) -> Result<StageGraph> {
    let e = model.embed(s, &batch.text_refs())?;
    let (fake, _, ca) = model.stage2_fake(s, e, &batch.noise, true)?;
    let real = s.tape.constant(batch.real.clone());
    let cond = detach(s, e);
    let d = discriminator_terms(s, &model.d, real, fake, cond, &batch.mismatch, true)?;
    let g = generator_terms(s, &model.d, fake, cond, &ca, lambda, non_saturating, true)?;
    Ok(StageGraph { d, g, fake })
}

/// Scalar values of a stage's objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub loss_d: f64,
    pub loss_g: f64,
    pub kl: f64,
    pub d_real: f64,
    pub d_fake: f64,
}

fn read_values<T: Float>(s: &Session<'_, T>, g: &StageGraph) -> LossValues {
    let mean = |v: Var| {
        let t: &Tensor<T> = s.tape.value(v);
        t.to_f64_vec().iter().sum::<f64>() / t.len() as f64
    };
    LossValues {
        loss_d: s.tape.value(g.d.loss).item().to_f64().unwrap_or(f64::NAN),
        loss_g: s.tape.value(g.g.loss).item().to_f64().unwrap_or(f64::NAN),
        kl: s.tape.value(g.g.kl).item().to_f64().unwrap_or(f64::NAN),
        d_real: mean(g.d.d_real),
        d_fake: mean(g.d.d_fake),
    }
}

/// `L_D0` and `L_G0` of a batch.
pub fn stage1_losses<T: Float>(
    model: &ChatPainter,
    store: &ParamStore<T>,
    batch: &MatchedBatch<T>,
    lambda: f64,
    non_saturating: bool,
) -> Result<LossValues> {
    let mut s = Session::new(store, &[]);
    let g = stage1_graph(&mut s, model, batch, lambda, non_saturating)?;
    Ok(read_values(&s, &g))
}

/// `L_D` and `L_G` of a Stage-II batch.
pub fn stage2_losses<T: Float>(
    model: &ChatPainter,
    store: &ParamStore<T>,
    batch: &MatchedBatch<T>,
    lambda: f64,
    non_saturating: bool,
) -> Result<LossValues> {
    let mut s = Session::new(store, &[]);
    let g = stage2_graph(&mut s, model, batch, lambda, non_saturating)?;
    Ok(read_values(&s, &g))
}
