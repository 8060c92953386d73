//! The encoder ablation: train every dialogue-encoder variant under several
//! seeds on one shared dataset, then score all of them with one shared set
//! of attribute classifiers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data_ingest::load_dataset;
use crate::data_synth::generate_dataset;
use crate::error::{IoContext, Result};
use crate::evaluation::{
    evaluate_checkpoint, synthetic_renders, train_attribute_classifiers, Attribute, Classifier, ScoreReport,
};
use crate::model::Stage;
use crate::text::DialogueEncoder;
use crate::training::{train_stage, Checkpoint};

/// Chance accuracy of the 6-way background attribute.
pub const BACKGROUND_CHANCE: f64 = 1.0 / 6.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Shared training and evaluation settings; `model.dialogue_encoder`
    /// and `seed` are overridden per run.
    pub base: RunConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub data_seed: u64,
    pub test_seed: u64,
    pub classifier_seed: u64,
    pub seeds: Vec<u64>,
    pub variants: Vec<DialogueEncoder>,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
}

impl ExperimentConfig {
    /// 2000/500 samples, 60 + 60 epochs, three seeds, all three variants.
    ///
    /// The learning rate and the non-saturating generator loss depart from
    /// the training defaults: with 2e-4 and `log(1 - D)` the discriminator
    /// never learns to separate matched from mismatched text within 60
    /// epochs, and the generator drops the condition altogether.
    pub fn desk() -> Self {
        let mut base = RunConfig::default();
        base.lr0 = 1e-3;
        base.non_saturating = true;
        ExperimentConfig {
            base,
            n_train: 2000,
            n_test: 500,
            data_seed: 1,
            test_seed: 2,
            classifier_seed: 5,
            seeds: vec![0, 1, 2],
            variants: vec![DialogueEncoder::Recurrent, DialogueEncoder::None, DialogueEncoder::Flat],
            stage1_epochs: 60,
            stage2_epochs: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub encoder: DialogueEncoder,
    pub seed: u64,
    pub score: ScoreReport,
    pub fidelity: BTreeMap<Attribute, f64>,
    pub train_seconds: f64,
}

/// Seed-averaged results of one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub score: f64,
    pub fidelity: BTreeMap<Attribute, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub classifier_accuracy: BTreeMap<Attribute, f64>,
    pub runs: Vec<RunResult>,
    pub summary: BTreeMap<DialogueEncoder, VariantSummary>,
    pub seconds: f64,
}

impl ExperimentReport {
    pub fn background(&self, v: DialogueEncoder) -> Option<f64> {
        self.summary.get(&v)?.fidelity.get(&Attribute::Background).copied()
    }

    pub fn score(&self, v: DialogueEncoder) -> Option<f64> {
        self.summary.get(&v).map(|s| s.score)
    }
}

fn summarize(runs: &[RunResult]) -> BTreeMap<DialogueEncoder, VariantSummary> {
    let mut out = BTreeMap::new();
    for v in [DialogueEncoder::None, DialogueEncoder::Flat, DialogueEncoder::Recurrent] {
        let mine: Vec<&RunResult> = runs.iter().filter(|r| r.encoder == v).collect();
        if mine.is_empty() {
            continue;
        }
        let n = mine.len() as f64;
        let mut fidelity = BTreeMap::new();
        for a in Attribute::ALL {
            let total: f64 = mine.iter().filter_map(|r| r.fidelity.get(&a)).sum();
            fidelity.insert(a, total / n);
        }
        out.insert(
            v,
            VariantSummary {
                score: mine.iter().map(|r| r.score.mean).sum::<f64>() / n,
                fidelity,
            },
        );
    }
    out
}

/// Runs the whole ablation under `work_dir`, which receives the datasets,
/// the classifiers, one directory per run and `report.json`.
pub fn run_experiment(cfg: &ExperimentConfig, work_dir: &Path, mut log: impl FnMut(&str)) -> Result<ExperimentReport> {
    let start = Instant::now();
    let dims = cfg.base.model.dims;
    let resolutions = [dims.w0, dims.w];
    let train_dir = work_dir.join("data").join("train");
    let test_dir = work_dir.join("data").join("test");
    generate_dataset(cfg.n_train, cfg.data_seed, &resolutions, &train_dir)?;
    generate_dataset(cfg.n_test, cfg.test_seed, &resolutions, &test_dir)?;
    let train = load_dataset(&train_dir)?;
    let test = load_dataset(&test_dir)?;
    log(&format!("datasets: {} train, {} test", train.len(), test.len()));

    let (images, specs) = synthetic_renders(cfg.base.classifier_renders, cfg.classifier_seed, dims.w)?;
    let mut ccfg = cfg.base.classifier_config();
    ccfg.seed = cfg.classifier_seed;
    let classifiers = train_attribute_classifiers(
        &images.iter().collect::<Vec<_>>(),
        &specs.iter().collect::<Vec<_>>(),
        &ccfg,
    )?;
    drop((images, specs));
    let cdir = work_dir.join("classifiers");
    fs::create_dir_all(&cdir).at(&cdir)?;
    for c in &classifiers {
        c.save(&cdir.join(format!("{}.json", c.attribute.name())))?;
        log(&format!(
            "classifier {}: held-out accuracy {:.4}",
            c.attribute.name(),
            c.held_out_accuracy
        ));
    }

    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for &variant in &cfg.variants {
            let t = Instant::now();
            let run_dir = work_dir.join("runs").join(format!("{}_seed{seed}", variant.name()));
            let ckpt = train_variant(cfg, variant, seed, &train, &run_dir, &mut log)?;
            let train_seconds = t.elapsed().as_secs_f64();
            let mut opts = cfg.base.eval_options();
            opts.seed = seed;
            let report = evaluate_checkpoint(&ckpt, &test, &classifiers, &opts, None)?;
            log(&format!(
                "{} seed {seed}: score {:.3} +- {:.3}, background {:.3}, trained in {:.0}s",
                variant.name(),
                report.score.mean,
                report.score.std,
                report.fidelity.get(&Attribute::Background).copied().unwrap_or(f64::NAN),
                train_seconds
            ));
            runs.push(RunResult {
                encoder: variant,
                seed,
                score: report.score,
                fidelity: report.fidelity,
                train_seconds,
            });
        }
    }
    let report = ExperimentReport {
        classifier_accuracy: classifier_accuracy(&classifiers),
        summary: summarize(&runs),
        runs,
        seconds: start.elapsed().as_secs_f64(),
    };
    let path = work_dir.join("report.json");
    fs::write(&path, serde_json::to_vec_pretty(&report)?).at(&path)?;
    Ok(report)
}

fn classifier_accuracy(classifiers: &[Classifier]) -> BTreeMap<Attribute, f64> {
    classifiers.iter().map(|c| (c.attribute, c.held_out_accuracy)).collect()
}

fn train_variant(
    cfg: &ExperimentConfig,
    variant: DialogueEncoder,
    seed: u64,
    train: &crate::data_ingest::Dataset,
    run_dir: &Path,
    log: &mut impl FnMut(&str),
) -> Result<Checkpoint> {
    let mut rc = cfg.base.clone();
    rc.seed = seed;
    rc.model.encoder = variant;
    let mut c1 = rc.train_config(Stage::One)?;
    c1.epochs = cfg.stage1_epochs;
    let stage1_dir: PathBuf = run_dir.join("stage1");
    let s1 = train_stage(&c1, train, None, Some(&stage1_dir), |_| {})?;
    if let Some(m) = s1.metrics.last() {
        log(&format!("{} seed {seed} stage 1: {}", variant.name(), m.csv_row()));
    }
    if cfg.stage2_epochs == 0 {
        return Ok(s1.checkpoint);
    }
    let mut c2 = rc.train_config(Stage::Two)?;
    c2.epochs = cfg.stage2_epochs;
    let s2 = train_stage(&c2, train, Some(&s1.checkpoint), Some(&run_dir.join("stage2")), |_| {})?;
    if let Some(m) = s2.metrics.last() {
        log(&format!("{} seed {seed} stage 2: {}", variant.name(), m.csv_row()));
    }
    Ok(s2.checkpoint)
}
