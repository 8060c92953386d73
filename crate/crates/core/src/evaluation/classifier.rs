//! Small convolutional classifiers over rendered or generated scenes.
//!
//! Architecture: 3x3 conv, then 4x4 stride-2 convs down to 4x4, each with
//! LeakyReLU(0.2), then one linear layer to the class logits. No
//! normalization, so inference on one image does not depend on its batch.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_synth::{Color, SceneSpec, Shape};
use crate::engine::{softmax_rows, ParamStore, Session, Tensor, Var};
use crate::error::{Error, IoContext, Result};
use crate::imaging::{batch_tensor, Image};
use crate::parallel::map_chunks;
use crate::rng::{stream_rng, Stream};
use crate::training::Adam;

use super::score::PosteriorMatrix;

/// A scene attribute recoverable from an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    /// Shape and colour of the first object in reading order; named by the caption.
    FirstObject,
    /// Background colour; only the dialogue names it.
    Background,
    /// Colour of the second object, or "none"; only the dialogue names it.
    SecondObject,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::FirstObject, Attribute::Background, Attribute::SecondObject];

    pub fn classes(self) -> usize {
        let objects = Shape::ALL.len() * Color::ALL.len();
        match self {
            Attribute::FirstObject => objects,
            Attribute::Background => Color::ALL.len(),
            Attribute::SecondObject => Color::ALL.len() + 1,
        }
    }

    pub fn label(self, spec: &SceneSpec) -> usize {
        match self {
            Attribute::FirstObject => spec.first_object().class_index(),
            Attribute::Background => spec.background().index(),
            Attribute::SecondObject => spec.objects().get(1).map_or(0, |o| 1 + o.color.index()),
        }
    }

    pub fn dialogue_only(self) -> bool {
        !matches!(self, Attribute::FirstObject)
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::FirstObject => "first_object",
            Attribute::Background => "background",
            Attribute::SecondObject => "second_object",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Channels of the first convolution; doubled per downsample up to 4x.
    pub width: usize,
    pub holdout_fraction: f64,
    /// Minimum held-out accuracy.
    pub floor: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            epochs: 10,
            batch_size: 32,
            lr: 2e-3,
            width: 8,
            holdout_fraction: 0.2,
            floor: 0.9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoredClassifier {
    attribute: Attribute,
    resolution: usize,
    width: usize,
    held_out_accuracy: f64,
    params: BTreeMap<String, StoredTensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub attribute: Attribute,
    pub resolution: usize,
    pub width: usize,
    pub held_out_accuracy: f64,
    store: ParamStore<f32>,
}

fn down_count(resolution: usize) -> Result<usize> {
    if resolution < 8 || resolution % 4 != 0 || !(resolution / 4).is_power_of_two() {
        return Err(Error::UnsupportedResolution(resolution));
    }
    Ok((resolution / 4).trailing_zeros() as usize)
}

impl Classifier {
    fn widths(width: usize, downs: usize) -> Vec<usize> {
        (1..=downs).map(|i| width << i.min(2)).collect()
    }

    fn init(attribute: Attribute, resolution: usize, width: usize, seed: u64) -> Result<Classifier> {
        let downs = down_count(resolution)?;
        let mut rng = stream_rng(seed, Stream::Init, 100 + attribute as u64);
        let mut store = ParamStore::new();
        store.insert(
            "clf.in.w",
            Tensor::randn(&[width, 3, 3, 3], (2.0 / 27.0f64).sqrt(), &mut rng),
        );
        store.insert("clf.in.b", Tensor::zeros(&[width]));
        let mut cin = width;
        for (i, w) in Self::widths(width, downs).into_iter().enumerate() {
            let fan_in = (cin * 16) as f64;
            store.insert(
                format!("clf.down{i}.w"),
                Tensor::randn(&[w, cin, 4, 4], (2.0 / fan_in).sqrt(), &mut rng),
            );
            store.insert(format!("clf.down{i}.b"), Tensor::zeros(&[w]));
            cin = w;
        }
        store.init_linear("clf.fc", attribute.classes(), cin * 16, &mut rng);
        Ok(Classifier {
            attribute,
            resolution,
            width,
            held_out_accuracy: 0.0,
            store,
        })
    }

    fn logits(&self, s: &mut Session<'_, f32>, x: Var) -> Result<Var> {
        let downs = down_count(self.resolution)?;
        let (w, b) = (s.param("clf.in.w")?, s.param("clf.in.b")?);
        let h = s.tape.conv2d(x, w, Some(b), 1, 1);
        let mut h = s.tape.leaky_relu(h, 0.2);
        for i in 0..downs {
            let (w, b) = (s.param(&format!("clf.down{i}.w"))?, s.param(&format!("clf.down{i}.b"))?);
            let c = s.tape.conv2d(h, w, Some(b), 2, 1);
            h = s.tape.leaky_relu(c, 0.2);
        }
        let n = s.tape.shape(h)[0];
        let features: usize = s.tape.shape(h)[1..].iter().product();
        let flat = s.tape.reshape(h, &[n, features]);
        let (w, b) = (s.param("clf.fc.w")?, s.param("clf.fc.b")?);
        Ok(s.tape.linear(flat, w, Some(b)))
    }

    fn check_images(&self, images: &[&Image]) -> Result<()> {
        if let Some(img) = images.iter().find(|i| i.resolution() != self.resolution) {
            return Err(Error::InvalidArgument(format!(
                "{} classifier expects {}px images, got {}px",
                self.attribute.name(),
                self.resolution,
                img.resolution()
            )));
        }
        Ok(())
    }

    pub fn posteriors(&self, images: &[&Image]) -> Result<PosteriorMatrix> {
        self.check_images(images)?;
        let k = self.attribute.classes();
        let rows = map_chunks(images, 64, |chunk| -> Vec<Result<Vec<f64>>> {
            let run = || -> Result<Vec<f64>> {
                let mut s = Session::new(&self.store, &[]);
                let x = s.tape.constant(batch_tensor(chunk));
                let logits = self.logits(&mut s, x)?;
                Ok(softmax_rows(&s.tape.value(logits).to_f64_vec(), k))
            };
            vec![run()]
        });
        let p = rows.into_iter().collect::<Result<Vec<_>>>()?.concat();
        PosteriorMatrix::new(images.len(), k, p)
    }

    pub fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
        Ok(self.posteriors(images)?.argmax())
    }

    pub fn accuracy(&self, images: &[&Image], labels: &[usize]) -> Result<f64> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if images.is_empty() {
            return Err(Error::InvalidArgument("no images to classify".into()));
        }
        let pred = self.predict(images)?;
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// SHA-256 over parameter names, shapes and values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.attribute.name().as_bytes());
        for (name, t) in self.store.params() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let stored = StoredClassifier {
            attribute: self.attribute,
            resolution: self.resolution,
            width: self.width,
            held_out_accuracy: self.held_out_accuracy,
            params: self
                .store
                .params()
                .map(|(n, t)| {
                    (
                        n.clone(),
                        StoredTensor {
                            shape: t.shape().to_vec(),
                            data: t.data().to_vec(),
                        },
                    )
                })
                .collect(),
        };
        fs::write(path, serde_json::to_vec(&stored)?).at(path)
    }

    pub fn load(path: &Path) -> Result<Classifier> {
        let stored: StoredClassifier = serde_json::from_slice(&fs::read(path).at(path)?)?;
        let mut c = Classifier::init(stored.attribute, stored.resolution, stored.width, 0)?;
        for (name, t) in stored.params {
            let slot = c.store.get_mut(&name)?;
            if slot.shape() != t.shape.as_slice() || t.data.len() != slot.len() {
                return Err(Error::ShapeMismatch {
                    context: "stored classifier",
                    expected: slot.shape().to_vec(),
                    actual: t.shape,
                });
            }
            *slot = Tensor::from_vec(&t.shape, t.data);
        }
        c.held_out_accuracy = stored.held_out_accuracy;
        Ok(c)
    }
}

/// Trains a classifier for `attribute` on a deterministic train/held-out
/// split and fails if held-out accuracy is below `config.floor`.
pub fn train_classifier(
    attribute: Attribute,
    images: &[&Image],
    specs: &[&SceneSpec],
    config: &ClassifierConfig,
) -> Result<Classifier> {
    if images.len() != specs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} scene specs",
            images.len(),
            specs.len()
        )));
    }
    let resolution = images
        .first()
        .map(|i| i.resolution())
        .ok_or_else(|| Error::InvalidArgument("no training images".into()))?;
    let mut clf = Classifier::init(attribute, resolution, config.width, config.seed)?;
    clf.check_images(images)?;
    let labels: Vec<usize> = specs.iter().map(|s| attribute.label(s)).collect();

    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut stream_rng(config.seed, Stream::Eval, attribute as u64));
    let held = ((images.len() as f64) * config.holdout_fraction).round() as usize;
    let held = held.clamp(1, images.len().saturating_sub(1).max(1));
    let (held_idx, train_idx) = order.split_at(held);
    if train_idx.is_empty() {
        return Err(Error::InvalidArgument("too few images to hold out a split".into()));
    }

    let mut adam = Adam::new(0.9, 0.999);
    let bs = config.batch_size.max(1);
    for epoch in 0..config.epochs {
        let mut idx = train_idx.to_vec();
        idx.shuffle(&mut stream_rng(config.seed, Stream::Batches, 1000 + epoch as u64));
        for chunk in idx.chunks(bs) {
            let batch: Vec<&Image> = chunk.iter().map(|&i| images[i]).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let grads = {
                let mut s = Session::new(&clf.store, &["clf"]);
                let x = s.tape.constant(batch_tensor(&batch));
                let logits = clf.logits(&mut s, x)?;
                let loss = s.tape.cross_entropy(logits, &y);
                let g = s.tape.backward(loss);
                s.param_grads(&g)
            };
            adam.apply(&mut clf.store, &grads, config.lr)?;
        }
    }
    let held_images: Vec<&Image> = held_idx.iter().map(|&i| images[i]).collect();
    let held_labels: Vec<usize> = held_idx.iter().map(|&i| labels[i]).collect();
    clf.held_out_accuracy = clf.accuracy(&held_images, &held_labels)?;
    if clf.held_out_accuracy < config.floor {
        return Err(Error::UnreliableClassifier {
            accuracy: clf.held_out_accuracy,
            floor: config.floor,
        });
    }
    Ok(clf)
}
