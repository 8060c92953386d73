use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::data_synth::{
    image_path, DatasetManifest, Dialogue, DigestBuilder, MetadataRecord, SceneSpec, IMAGES_DIR, MANIFEST_FILE,
    METADATA_FILE,
};
use crate::error::{Error, IoContext, Result};
use crate::imaging::Image;
use crate::rng::{stream_rng, Stream};

/// One training example: images at every stored resolution, the caption,
/// the dialogue and the scene ground truth.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub id: u64,
    pub images: BTreeMap<usize, Image>,
    pub caption: String,
    pub dialogue: Dialogue,
    pub spec: SceneSpec,
}

impl PairedSample {
    pub fn image(&self, resolution: usize) -> Result<&Image> {
        self.images.get(&resolution).ok_or_else(|| Error::Sample {
            id: self.id,
            reason: format!("no image at resolution {resolution}"),
        })
    }
}

/// A loaded, validated dataset. Immutable once loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    samples: Vec<PairedSample>,
    by_id: HashMap<u64, usize>,
}

impl Dataset {
    pub fn from_samples(manifest: DatasetManifest, samples: Vec<PairedSample>) -> Result<Dataset> {
        let mut by_id = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if by_id.insert(s.id, i).is_some() {
                return Err(Error::Sample {
                    id: s.id,
                    reason: "duplicate id".into(),
                });
            }
        }
        Ok(Dataset {
            manifest,
            samples,
            by_id,
        })
    }

    pub fn samples(&self) -> &[PairedSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: u64) -> Result<&PairedSample> {
        self.by_id
            .get(&id)
            .map(|&i| &self.samples[i])
            .ok_or_else(|| Error::Sample {
                id,
                reason: "unknown id".into(),
            })
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().flat_map(|s| {
            std::iter::once(s.caption.as_str()).chain(
                s.dialogue
                    .turns()
                    .iter()
                    .flat_map(|t| [t.question.as_str(), t.answer.as_str()]),
            )
        })
    }
}

fn parse_record(line: &str, lineno: usize) -> Result<MetadataRecord> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| Error::Dataset(format!("metadata line {}: {e}", lineno + 1)))?;
    let id = value
        .get("id")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::Dataset(format!("metadata line {} has no integer id", lineno + 1)))?;
    serde_json::from_value(value).map_err(|e| Error::Sample {
        id,
        reason: e.to_string(),
    })
}

/// Loads a dataset directory, joining metadata records with their images by
/// id and verifying counts and the content digest.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&manifest_path).at(&manifest_path)?)?;
    let meta_path = dir.join(METADATA_FILE);
    let metadata = fs::read(&meta_path).at(&meta_path)?;
    let text =
        std::str::from_utf8(&metadata).map_err(|e| Error::Dataset(format!("{METADATA_FILE} is not UTF-8: {e}")))?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_record(l, i))
        .collect::<Result<Vec<_>>>()?;
    if records.len() != manifest.n {
        return Err(Error::Dataset(format!(
            "manifest declares {} samples but metadata holds {}",
            manifest.n,
            records.len()
        )));
    }
    let ids: HashSet<u64> = records.iter().map(|r| r.id).collect();
    if ids.len() != records.len() {
        return Err(Error::Dataset("metadata ids are not unique".into()));
    }

    let mut digest = DigestBuilder::new(&metadata);
    let mut images: Vec<BTreeMap<usize, Image>> = vec![BTreeMap::new(); records.len()];
    for &res in &manifest.resolutions {
        check_no_stray_images(dir, res, &ids)?;
        for (slot, rec) in images.iter_mut().zip(&records) {
            let path = image_path(dir, res, rec.id);
            if !path.exists() {
                return Err(Error::Sample {
                    id: rec.id,
                    reason: format!("missing image {}", path.display()),
                });
            }
            let img = Image::load_png(&path)?;
            if img.resolution() != res {
                return Err(Error::Sample {
                    id: rec.id,
                    reason: format!("image {} is {}px, expected {res}px", path.display(), img.resolution()),
                });
            }
            digest.image(&img.to_rgb8());
            slot.insert(res, img);
        }
    }
    let found = digest.finish();
    if found != manifest.digest {
        return Err(Error::Dataset(format!(
            "digest mismatch: manifest {} but content hashes to {found}",
            manifest.digest
        )));
    }
    let samples = records
        .into_iter()
        .zip(images)
        .map(|(r, images)| PairedSample {
            id: r.id,
            images,
            caption: r.caption,
            dialogue: r.dialogue,
            spec: r.spec,
        })
        .collect();
    Dataset::from_samples(manifest, samples)
}

fn check_no_stray_images(dir: &Path, res: usize, ids: &HashSet<u64>) -> Result<()> {
    let res_dir = dir.join(IMAGES_DIR).join(res.to_string());
    let entries = fs::read_dir(&res_dir).at(&res_dir)?;
    for entry in entries {
        let entry = entry.at(&res_dir)?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let Some(stem) = name.strip_suffix(".png") else {
            continue;
        };
        match stem.parse::<u64>() {
            Ok(id) if ids.contains(&id) => {}
            _ => {
                return Err(Error::Dataset(format!(
                    "image {} has no metadata record",
                    res_dir.join(&*name).display()
                )))
            }
        }
    }
    Ok(())
}

/// Shuffled batch order for one epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub epoch: usize,
    pub batch_size: usize,
    pub order: Vec<u64>,
    pub rng_seed: u64,
}

impl BatchPlan {
    pub fn new(ids: &[u64], batch_size: usize, epoch: usize, seed: u64) -> Result<BatchPlan> {
        if batch_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch size must be at least 2 for mismatched pairs, got {batch_size}"
            )));
        }
        let mut order = ids.to_vec();
        order.shuffle(&mut stream_rng(seed, Stream::Batches, epoch as u64));
        Ok(BatchPlan {
            epoch,
            batch_size,
            order,
            rng_seed: seed,
        })
    }

    /// Full batches only; the ragged tail is dropped.
    pub fn batches(&self) -> Vec<Vec<u64>> {
        self.order.chunks_exact(self.batch_size).map(<[u64]>::to_vec).collect()
    }
}

pub fn batches(ids: &[u64], batch_size: usize, epoch: usize, seed: u64) -> Result<Vec<Vec<u64>>> {
    Ok(BatchPlan::new(ids, batch_size, epoch, seed)?.batches())
}
