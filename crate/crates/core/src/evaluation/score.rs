use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

const ROW_SUM_TOLERANCE: f64 = 1e-6;
const PROB_FLOOR: f64 = 1e-12;

/// Class posteriors, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMatrix {
    rows: usize,
    classes: usize,
    p: Vec<f64>,
}

impl PosteriorMatrix {
    pub fn new(rows: usize, classes: usize, p: Vec<f64>) -> Result<PosteriorMatrix> {
        if classes == 0 || p.len() != rows * classes {
            return Err(Error::InvalidArgument(format!(
                "posterior matrix of {rows}x{classes} needs {} values, got {}",
                rows * classes,
                p.len()
            )));
        }
        for (i, row) in p.chunks_exact(classes).enumerate() {
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "posterior row {i} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidArgument(format!("posterior row {i} sums to {sum}")));
            }
        }
        Ok(PosteriorMatrix { rows, classes, p })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<PosteriorMatrix> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::InvalidArgument("posterior rows differ in length".into()));
        }
        PosteriorMatrix::new(rows.len(), classes, rows.concat())
    }

    /// Headerless CSV, one row of probabilities per line.
    pub fn from_csv(path: &Path) -> Result<PosteriorMatrix> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
            let row = rec
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Error::InvalidArgument(format!("{} row {}: {e}", path.display(), i + 1)))?;
            rows.push(row);
        }
        PosteriorMatrix::from_rows(&rows)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.p[i * self.classes..(i + 1) * self.classes]
    }

    pub fn argmax(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, (k, &v)| if v > best.1 { (k, v) } else { best },
                    )
                    .0
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub mean: f64,
    pub std: f64,
    pub n_splits: usize,
    pub split_size: usize,
    pub seed: u64,
    pub classifier_digest: String,
}

/// `exp(mean_x KL(p(y|x) || p(y)))` over the given rows.
pub fn split_score(p: &PosteriorMatrix, rows: &[usize]) -> f64 {
    let k = p.classes;
    let mut marginal = vec![0.0; k];
    for &i in rows {
        for (m, v) in marginal.iter_mut().zip(p.row(i)) {
            *m += v;
        }
    }
    let n = rows.len() as f64;
    for m in &mut marginal {
        *m /= n;
    }
    let mean_kl = rows
        .iter()
        .map(|&i| {
            p.row(i)
                .iter()
                .zip(&marginal)
                .map(|(&pi, &mi)| pi * (pi.max(PROB_FLOOR).ln() - mi.max(PROB_FLOOR).ln()))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    mean_kl.exp()
}

/// Mean and population standard deviation of the split scores. Each split
/// samples `split_size` rows without replacement from its own seeded stream.
pub fn inception_style_score(
    p: &PosteriorMatrix,
    n_splits: usize,
    split_size: usize,
    seed: u64,
) -> Result<ScoreReport> {
    if n_splits == 0 {
        return Err(Error::InvalidArgument("n_splits must be positive".into()));
    }
    if split_size == 0 || split_size > p.rows {
        return Err(Error::InvalidArgument(format!(
            "split size {split_size} must lie in 1..={}",
            p.rows
        )));
    }
    let scores: Vec<f64> = (0..n_splits)
        .map(|s| {
            let rows = if split_size == p.rows {
                (0..p.rows).collect()
            } else {
                let mut rng = stream_rng(seed, Stream::Splits, s as u64);
                sample(&mut rng, p.rows, split_size).into_vec()
            };
            split_score(p, &rows)
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / n_splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n_splits as f64;
    Ok(ScoreReport {
        mean,
        std: var.sqrt(),
        n_splits,
        split_size,
        seed,
        classifier_digest: String::new(),
    })
}
