use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data_ingest::Dataset;
use crate::data_synth::Dialogue;
use crate::engine::{Session, Tensor};
use crate::error::{Error, IoContext, Result};
use crate::imaging::{images_from_tensor, Image};
use crate::model::{ChatPainter, Stage, StageNoise};
use crate::parallel::map_chunks;
use crate::rng::{derive_seed, rng_from};
use crate::text::EncodedText;
use crate::training::Checkpoint;

pub const INDEX_FILE: &str = "index.csv";
pub const INDEX_HEADER: &str = "id,image_file,seed";

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedImage {
    pub id: u64,
    /// Seed of this sample's `z` and epsilon draws.
    pub seed: u64,
    pub image: Image,
}

impl GeneratedImage {
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.image.to_rgb8()))
    }
}

/// One text condition to render.
#[derive(Clone, Copy, Debug)]
pub struct Condition<'a> {
    pub id: u64,
    pub caption: &'a str,
    pub dialogue: &'a Dialogue,
}

/// Generates one image per condition with the checkpoint's final stage,
/// normalization in running-statistics mode. Sample `id` draws its noise
/// from `derive_seed(seed, id)`, so output does not depend on batching.
pub fn generate_images(ckpt: &Checkpoint, conditions: &[Condition<'_>], seed: u64) -> Result<Vec<GeneratedImage>> {
    let model = ChatPainter::new(ckpt.config.model)?;
    ckpt.check_groups()?;
    let dims = *model.dims();
    let per_chunk = |chunk: &[Condition<'_>]| -> Vec<Result<GeneratedImage>> {
        let run = || -> Result<Vec<GeneratedImage>> {
            let b = chunk.len();
            let texts: Vec<EncodedText> = chunk
                .iter()
                .map(|c| EncodedText::new(&ckpt.vocab, c.caption, c.dialogue))
                .collect();
            let seeds: Vec<u64> = chunk.iter().map(|c| derive_seed(seed, c.id)).collect();
            let mut z = Vec::with_capacity(b * dims.n_z);
            let mut eps0 = Vec::with_capacity(b * dims.n_g);
            let mut eps = Vec::with_capacity(b * dims.n_g);
            for &s in &seeds {
                let mut rng = rng_from(s);
                z.extend(Tensor::<f32>::randn(&[dims.n_z], 1.0, &mut rng).into_data());
                eps0.extend(Tensor::<f32>::randn(&[dims.n_g], 1.0, &mut rng).into_data());
                eps.extend(Tensor::<f32>::randn(&[dims.n_g], 1.0, &mut rng).into_data());
            }
            let noise = StageNoise {
                z: Tensor::from_vec(&[b, dims.n_z], z),
                eps0: Tensor::from_vec(&[b, dims.n_g], eps0),
                eps: Tensor::from_vec(&[b, dims.n_g], eps),
            };
            let mut s = Session::new(&ckpt.params, &[]);
            let refs: Vec<&EncodedText> = texts.iter().collect();
            let e = model.embed(&mut s, &refs)?;
            let out = match ckpt.stage {
                Stage::One => model.stage1_fake(&mut s, e, noise.z, noise.eps0, false)?.0,
                Stage::Two => model.stage2_fake(&mut s, e, &noise, false)?.0,
            };
            let value = s.tape.value(out);
            if !value.all_finite() {
                return Err(Error::NonFinite("generated image".into()));
            }
            Ok(images_from_tensor(value)
                .into_iter()
                .zip(chunk.iter().zip(seeds))
                .map(|(image, (c, seed))| GeneratedImage { id: c.id, seed, image })
                .collect())
        };
        match run() {
            Ok(v) => v.into_iter().map(Ok).collect(),
            Err(e) => vec![Err(e)],
        }
    };
    map_chunks(conditions, 32, per_chunk).into_iter().collect()
}

/// One image per dataset sample, written as `images/<id>.png` plus
/// `index.csv`.
pub fn generate_eval_set(ckpt: &Checkpoint, data: &Dataset, seed: u64, out_dir: &Path) -> Result<Vec<GeneratedImage>> {
    let conditions: Vec<Condition<'_>> = data
        .samples()
        .iter()
        .map(|s| Condition {
            id: s.id,
            caption: &s.caption,
            dialogue: &s.dialogue,
        })
        .collect();
    let images = generate_images(ckpt, &conditions, seed)?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).at(&img_dir)?;
    let index_path = out_dir.join(INDEX_FILE);
    let mut w = csv::Writer::from_path(&index_path)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", index_path.display())))?;
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("{}: {e}", index_path.display()));
    w.write_record(INDEX_HEADER.split(',')).map_err(csv_err)?;
    for g in &images {
        let file = format!("images/{}.png", g.id);
        g.image.save_png(&out_dir.join(&file))?;
        w.write_record([g.id.to_string(), file, g.seed.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().at(&index_path)?;
    Ok(images)
}

/// Digest over the ordered per-image digests of a generated set.
pub fn set_digest(images: &[GeneratedImage]) -> String {
    let mut h = Sha256::new();
    for g in images {
        h.update(g.id.to_le_bytes());
        h.update(g.image.to_rgb8());
    }
    hex::encode(h.finalize())
}
