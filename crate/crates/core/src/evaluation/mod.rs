//! Proxy inception-style score and attribute fidelity of generated images.

mod classifier;
mod generate;
mod score;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use classifier::{train_classifier, Attribute, Classifier, ClassifierConfig};
pub use generate::{
    generate_eval_set, generate_images, set_digest, Condition, GeneratedImage, INDEX_FILE, INDEX_HEADER,
};
pub use score::{inception_style_score, split_score, PosteriorMatrix, ScoreReport};

use crate::data_ingest::Dataset;
use crate::data_synth::{render_scene, sample_scene, SceneSpec};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::rng::derive_seed;
use crate::training::Checkpoint;

/// The 18-way first-object classifier used as the scoring judge.
pub fn train_proxy_classifier(data: &Dataset, resolution: usize, config: &ClassifierConfig) -> Result<Classifier> {
    let (images, specs) = real_pairs(data, resolution)?;
    train_classifier(Attribute::FirstObject, &images, &specs, config)
}

fn real_pairs(data: &Dataset, resolution: usize) -> Result<(Vec<&Image>, Vec<&SceneSpec>)> {
    let images = data
        .samples()
        .iter()
        .map(|s| s.image(resolution))
        .collect::<Result<Vec<_>>>()?;
    let specs = data.samples().iter().map(|s| &s.spec).collect();
    Ok((images, specs))
}

/// `n` freshly sampled scenes and their renders, independent of any dataset
/// on disk.
pub fn synthetic_renders(n: usize, seed: u64, resolution: usize) -> Result<(Vec<Image>, Vec<SceneSpec>)> {
    let specs: Vec<SceneSpec> = (0..n as u64).map(|i| sample_scene(derive_seed(seed, i))).collect();
    let images = specs
        .iter()
        .map(|s| render_scene(s, resolution))
        .collect::<Result<Vec<_>>>()?;
    Ok((images, specs))
}

/// One classifier per attribute, trained on real renders. The accuracy
/// floor applies to the judge and the background classifier; the
/// second-object accuracy is only recorded.
pub fn train_attribute_classifiers(
    images: &[&Image],
    specs: &[&SceneSpec],
    config: &ClassifierConfig,
) -> Result<Vec<Classifier>> {
    Attribute::ALL
        .iter()
        .map(|&a| {
            let mut cfg = config.clone();
            if a == Attribute::SecondObject {
                cfg.floor = 0.0;
            }
            train_classifier(a, images, specs, &cfg)
        })
        .collect()
}

/// Accuracy of each classifier at recovering its attribute of `specs` from
/// `images`.
pub fn attribute_fidelity(
    images: &[&Image],
    specs: &[&SceneSpec],
    classifiers: &[Classifier],
) -> Result<BTreeMap<Attribute, f64>> {
    if images.len() != specs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} scene specs",
            images.len(),
            specs.len()
        )));
    }
    classifiers
        .iter()
        .map(|c| {
            let labels: Vec<usize> = specs.iter().map(|s| c.attribute.label(s)).collect();
            Ok((c.attribute, c.accuracy(images, &labels)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub seed: u64,
    pub n_splits: usize,
    /// Defaults to three quarters of the generated set.
    pub split_size: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            seed: 0,
            n_splits: 10,
            split_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub score: ScoreReport,
    pub fidelity: BTreeMap<Attribute, f64>,
    pub classifier_accuracy: BTreeMap<Attribute, f64>,
    pub n_images: usize,
    pub images_digest: String,
}

/// Generates one image per test sample and scores it. The first-object
/// classifier among `classifiers` is the scoring judge.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    test: &Dataset,
    classifiers: &[Classifier],
    options: &EvalOptions,
    out_dir: Option<&Path>,
) -> Result<EvaluationReport> {
    let judge = classifiers
        .iter()
        .find(|c| c.attribute == Attribute::FirstObject)
        .ok_or_else(|| Error::InvalidArgument("no first-object classifier to score with".into()))?;
    let generated = match out_dir {
        Some(dir) => generate_eval_set(ckpt, test, options.seed, dir)?,
        None => {
            let conditions: Vec<Condition<'_>> = test
                .samples()
                .iter()
                .map(|s| Condition {
                    id: s.id,
                    caption: &s.caption,
                    dialogue: &s.dialogue,
                })
                .collect();
            generate_images(ckpt, &conditions, options.seed)?
        }
    };
    let images: Vec<&Image> = generated.iter().map(|g| &g.image).collect();
    let specs: Vec<&SceneSpec> = generated
        .iter()
        .map(|g| test.get(g.id).map(|s| &s.spec))
        .collect::<Result<_>>()?;
    let posteriors = judge.posteriors(&images)?;
    let split_size = options.split_size.unwrap_or_else(|| (3 * images.len() / 4).max(1));
    let mut score = inception_style_score(&posteriors, options.n_splits, split_size, options.seed)?;
    score.classifier_digest = judge.digest();
    Ok(EvaluationReport {
        score,
        fidelity: attribute_fidelity(&images, &specs, classifiers)?,
        classifier_accuracy: classifiers.iter().map(|c| (c.attribute, c.held_out_accuracy)).collect(),
        n_images: images.len(),
        images_digest: set_digest(&generated),
    })
}
