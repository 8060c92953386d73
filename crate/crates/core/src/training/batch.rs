use crate::data_ingest::PairedSample;
use crate::engine::{Float, Tensor};
use crate::error::{Error, Result};
use crate::imaging::batch_tensor;
use crate::model::StageNoise;
use crate::rng::Rng;
use crate::text::EncodedText;

/// Real images, their texts, the mismatch pairing and the batch noise.
#[derive(Clone, Debug)]
pub struct MatchedBatch<T> {
    pub ids: Vec<u64>,
    /// `(B, 3, R, R)`.
    pub real: Tensor<T>,
    pub texts: Vec<EncodedText>,
    /// Row `i` of the mismatched set takes the condition of row `mismatch[i]`.
    pub mismatch: Vec<usize>,
    pub noise: StageNoise<T>,
}

/// Rotation by one: `i -> (i + 1) mod b`.
pub fn mismatch_rotation(b: usize) -> Vec<usize> {
    (0..b).map(|i| (i + 1) % b).collect()
}

impl<T: Float> MatchedBatch<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn text_refs(&self) -> Vec<&EncodedText> {
        self.texts.iter().collect()
    }

    pub fn mismatched_texts(&self) -> Vec<&EncodedText> {
        self.mismatch.iter().map(|&j| &self.texts[j]).collect()
    }
}

fn normal_tensor<T: Float>(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<T> {
    Tensor::randn(&[rows, cols], 1.0, rng)
}

/// Assembles a batch at `resolution`. Noise is drawn from `rng` in the order
/// `z`, Stage-I epsilon, Stage-II epsilon.
pub fn build_matched_batch<T: Float>(
    samples: &[&PairedSample],
    texts: &[&EncodedText],
    resolution: usize,
    n_z: usize,
    n_g: usize,
    rng: &mut Rng,
) -> Result<MatchedBatch<T>> {
    let b = samples.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "a matched batch needs at least 2 samples, got {b}"
        )));
    }
    if texts.len() != b {
        return Err(Error::InvalidArgument(format!(
            "{b} samples but {} encoded texts",
            texts.len()
        )));
    }
    let images = samples
        .iter()
        .map(|s| s.image(resolution))
        .collect::<Result<Vec<_>>>()?;
    let noise = StageNoise {
        z: normal_tensor(rng, b, n_z),
        eps0: normal_tensor(rng, b, n_g),
        eps: normal_tensor(rng, b, n_g),
    };
    Ok(MatchedBatch {
        ids: samples.iter().map(|s| s.id).collect(),
        real: batch_tensor(&images),
        texts: texts.iter().map(|&t| t.clone()).collect(),
        mismatch: mismatch_rotation(b),
        noise,
    })
}
