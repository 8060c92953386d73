use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::conditioning::STAGE1_CA;
use crate::data_ingest::{BatchPlan, Dataset};
use crate::engine::{has_prefix, ParamStore, Session};
use crate::error::{Error, IoContext, Result};
use crate::model::{discriminator_group, generator_groups, ChatPainter, Stage};
use crate::networks::Discriminator;
use crate::networks::G0;
use crate::rng::{stream_rng, Stream};
use crate::text::{EncodedText, Vocabulary, GROUP as ENC};

use super::batch::{build_matched_batch, MatchedBatch};
use super::checkpoint::Checkpoint;
use super::losses::{detach, discriminator_terms, generator_terms};
use super::optim::{lr_schedule, Adam};
use super::TrainConfig;

pub const METRICS_HEADER: &str = "epoch,lr,loss_d,loss_g,kl,d_real,d_fake";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Per-epoch means over batches.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub kl: f64,
    pub d_real: f64,
    /// Mean `D(real, mismatched)`; not part of the CSV log.
    pub d_wrong: f64,
    pub d_fake: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.lr, self.loss_d, self.loss_g, self.kl, self.d_real, self.d_fake
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
struct StepValues {
    loss_d: f64,
    loss_g: f64,
    kl: f64,
    d_real: f64,
    d_wrong: f64,
    d_fake: f64,
}

impl StepValues {
    fn all_finite(&self) -> bool {
        [
            self.loss_d,
            self.loss_g,
            self.kl,
            self.d_real,
            self.d_wrong,
            self.d_fake,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn mean_of(t: &crate::engine::Tensor<f32>) -> f64 {
    t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64
}

fn fold_stats(
    store: &mut ParamStore<f32>,
    stats: Vec<(String, crate::engine::BatchStats<f32>)>,
    groups: &[&str],
) -> Result<()> {
    for (name, st) in stats {
        if groups.iter().any(|g| has_prefix(&name, g)) {
            store.update_running_stats(&name, &st)?;
        }
    }
    Ok(())
}

struct Trainer<'a> {
    model: ChatPainter,
    config: &'a TrainConfig,
    stage: Stage,
    adam_d: Adam<f32>,
    adam_g: Adam<f32>,
}

impl Trainer<'_> {
    fn disc(&self) -> &Discriminator {
        match self.stage {
            Stage::One => &self.model.d0,
            Stage::Two => &self.model.d,
        }
    }

    /// One discriminator ascent step followed by one generator descent step,
    /// both on the same generated batch.
    fn step(&mut self, store: &mut ParamStore<f32>, batch: &MatchedBatch<f32>, lr: f64) -> Result<StepValues> {
        let gen_groups = generator_groups(self.stage);
        let d_group = discriminator_group(self.stage);
        let mut out = StepValues::default();

        let mut sa = Session::new(store, gen_groups);
        let e = self.model.embed(&mut sa, &batch.text_refs())?;
        let (fake, ca) = match self.stage {
            Stage::One => self
                .model
                .stage1_fake(&mut sa, e, batch.noise.z.clone(), batch.noise.eps0.clone(), true)?,
            Stage::Two => {
                let (fake, _, ca) = self.model.stage2_fake(&mut sa, e, &batch.noise, true)?;
                (fake, ca)
            }
        };
        let fake_value = sa.tape.value(fake).clone();
        let c_value = sa.tape.value(e).clone();
        let gen_stats = sa.take_norm_stats();
        let suspended = sa.suspend();

        let (d_grads, d_stats) = {
            let mut sb = Session::new(store, &[d_group]);
            let real = sb.tape.constant(batch.real.clone());
            let fk = sb.tape.constant(fake_value);
            let c = sb.tape.constant(c_value);
            let terms = discriminator_terms(&mut sb, self.disc(), real, fk, c, &batch.mismatch, true)?;
            out.loss_d = sb.tape.value(terms.loss).item() as f64;
            out.d_real = mean_of(sb.tape.value(terms.d_real));
            out.d_wrong = mean_of(sb.tape.value(terms.d_wrong));
            out.d_fake = mean_of(sb.tape.value(terms.d_fake));
            let objective = sb.tape.scale(terms.loss, -1.0);
            let grads = sb.tape.backward(objective);
            (sb.param_grads(&grads), sb.take_norm_stats())
        };
        if !out.loss_d.is_finite() {
            return Ok(out);
        }
        self.adam_d.apply(store, &d_grads, lr)?;
        fold_stats(store, d_stats, &[d_group])?;
        fold_stats(store, gen_stats, gen_groups)?;

        let g_grads = {
            let mut sa = suspended.resume(store);
            let cond = detach(&mut sa, e);
            let terms = generator_terms(
                &mut sa,
                self.disc(),
                fake,
                cond,
                &ca,
                self.config.lambda,
                self.config.non_saturating,
                true,
            )?;
            out.loss_g = sa.tape.value(terms.loss).item() as f64;
            out.kl = sa.tape.value(terms.kl).item() as f64;
            let grads = sa.tape.backward(terms.loss);
            sa.param_grads(&grads)
        };
        if out.all_finite() {
            self.adam_g.apply(store, &g_grads, lr)?;
        }
        Ok(out)
    }
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    stage: u32,
    epoch: usize,
    batch: usize,
    ids: &'a [u64],
    values: StepValues,
    param_norms: Vec<(String, f64)>,
}

fn divergence(
    out_dir: Option<&Path>,
    store: &ParamStore<f32>,
    stage: Stage,
    epoch: usize,
    batch_index: usize,
    ids: &[u64],
    values: StepValues,
    cause: String,
) -> Error {
    let mut msg = format!("stage {} epoch {epoch} batch {batch_index}: {cause}", stage.number());
    if let Some(dir) = out_dir {
        let dump = DivergenceDump {
            stage: stage.number(),
            epoch,
            batch: batch_index,
            ids,
            values,
            param_norms: store
                .params()
                .map(|(n, t)| {
                    (
                        n.clone(),
                        t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt(),
                    )
                })
                .collect(),
        };
        let path = dir.join("diverged.json");
        if let Ok(json) = serde_json::to_vec_pretty(&dump) {
            if fs::write(&path, json).is_ok() {
                msg.push_str(&format!(" (state dumped to {})", path.display()));
            }
        }
    }
    Error::Diverged(msg)
}

fn initial_store(
    model: &ChatPainter,
    config: &TrainConfig,
    data: &Dataset,
    stage1: Option<&Checkpoint>,
) -> Result<(ParamStore<f32>, Vocabulary)> {
    let mut rng = stream_rng(config.seed, Stream::Init, config.stage.number() as u64);
    match config.stage {
        Stage::One => {
            let vocab = Vocabulary::build(data.texts());
            let mut store = ParamStore::new();
            model.init_stage1(&mut store, vocab.len(), &mut rng);
            Ok((store, vocab))
        }
        Stage::Two => {
            let s1 = stage1.ok_or_else(|| Error::Config("stage 2 requires a Stage-I checkpoint".into()))?;
            if s1.stage != Stage::One {
                return Err(Error::Checkpoint("expected a Stage-I checkpoint".into()));
            }
            if s1.config.model != config.model {
                return Err(Error::Config(format!(
                    "model settings differ from the Stage-I checkpoint ({:?} vs {:?})",
                    config.model, s1.config.model
                )));
            }
            let mut store = ParamStore::new();
            for group in [ENC, STAGE1_CA, G0] {
                store.copy_group(&s1.params, group);
            }
            model.init_stage2(&mut store, &mut rng);
            Ok((store, s1.vocab.clone()))
        }
    }
}

/// Trains one stage. With `out_dir`, writes `metrics.csv`, periodic
/// `epoch_NNNN.ckpt` files and `final.ckpt`.
pub fn train_stage(
    config: &TrainConfig,
    data: &Dataset,
    stage1: Option<&Checkpoint>,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    let model = ChatPainter::new(config.model)?;
    let stage = config.stage;
    let resolution = match stage {
        Stage::One => config.model.dims.w0,
        Stage::Two => config.model.dims.w,
    };
    if !data.manifest.resolutions.contains(&resolution) {
        return Err(Error::Dataset(format!(
            "dataset has no {resolution}px images (has {:?})",
            data.manifest.resolutions
        )));
    }
    if data.len() < config.batch_size {
        return Err(Error::Config(format!(
            "dataset of {} samples is smaller than one batch of {}",
            data.len(),
            config.batch_size
        )));
    }
    let (mut store, vocab) = initial_store(&model, config, data, stage1)?;
    let texts: Vec<EncodedText> = data
        .samples()
        .iter()
        .map(|s| EncodedText::new(&vocab, &s.caption, &s.dialogue))
        .collect();
    let position: HashMap<u64, usize> = data.samples().iter().enumerate().map(|(i, s)| (s.id, i)).collect();

    let mut metrics_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).at(dir)?;
            let path = dir.join(METRICS_FILE);
            let mut f = fs::File::create(&path).at(&path)?;
            writeln!(f, "{METRICS_HEADER}").at(&path)?;
            Some((f, path))
        }
        None => None,
    };

    let mut trainer = Trainer {
        model,
        config,
        stage,
        adam_d: Adam::new(config.beta1, config.beta2),
        adam_g: Adam::new(config.beta1, config.beta2),
    };
    let ids = data.ids();
    let dims = config.model.dims;
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut global_step = 0u64;
    let snapshot = |store: &ParamStore<f32>, trainer: &Trainer<'_>, epoch: usize| Checkpoint {
        stage,
        epoch,
        config: config.clone(),
        vocab: vocab.clone(),
        params: store.clone(),
        adam_d: trainer.adam_d.clone(),
        adam_g: trainer.adam_g.clone(),
    };

    for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config.lr0, config.lr_half_every);
        let plan = BatchPlan::new(&ids, config.batch_size, epoch, config.seed)?;
        let mut sum = StepValues::default();
        let batches = plan.batches();
        for (bi, batch_ids) in batches.iter().enumerate() {
            let rows: Vec<usize> = batch_ids.iter().map(|id| position[id]).collect();
            let samples: Vec<_> = rows.iter().map(|&r| &data.samples()[r]).collect();
            let batch_texts: Vec<&EncodedText> = rows.iter().map(|&r| &texts[r]).collect();
            let mut rng = stream_rng(config.seed, Stream::Noise, global_step);
            let batch = build_matched_batch(&samples, &batch_texts, resolution, dims.n_z, dims.n_g, &mut rng)?;
            global_step += 1;
            let values = match trainer.step(&mut store, &batch, lr) {
                Ok(v) => v,
                Err(Error::NonFinite(what)) => {
                    return Err(divergence(
                        out_dir,
                        &store,
                        stage,
                        epoch,
                        bi,
                        batch_ids,
                        StepValues::default(),
                        format!("non-finite {what}"),
                    ))
                }
                Err(e) => return Err(e),
            };
            if !values.all_finite() {
                return Err(divergence(
                    out_dir,
                    &store,
                    stage,
                    epoch,
                    bi,
                    batch_ids,
                    values,
                    "non-finite loss".into(),
                ));
            }
            sum.loss_d += values.loss_d;
            sum.loss_g += values.loss_g;
            sum.kl += values.kl;
            sum.d_real += values.d_real;
            sum.d_wrong += values.d_wrong;
            sum.d_fake += values.d_fake;
        }
        let n = batches.len() as f64;
        let m = EpochMetrics {
            epoch,
            lr,
            loss_d: sum.loss_d / n,
            loss_g: sum.loss_g / n,
            kl: sum.kl / n,
            d_real: sum.d_real / n,
            d_wrong: sum.d_wrong / n,
            d_fake: sum.d_fake / n,
        };
        if let Some((f, path)) = metrics_file.as_mut() {
            writeln!(f, "{}", m.csv_row()).at(&*path)?;
        }
        on_epoch(&m);
        metrics.push(m);
        if let Some(dir) = out_dir {
            if (epoch + 1) % config.checkpoint_every == 0 && epoch + 1 < config.epochs {
                snapshot(&store, &trainer, epoch + 1).save(&dir.join(format!("epoch_{:04}.ckpt", epoch + 1)))?;
            }
        }
    }

    let checkpoint = snapshot(&store, &trainer, config.epochs);
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome { checkpoint, metrics })
}
