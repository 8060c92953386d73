use std::path::Path;

use chatpainter::conditioning::kl_standard_normal;
use chatpainter::data_ingest::{load_dataset, Dataset};
use chatpainter::data_synth::generate_dataset;
use chatpainter::engine::{has_prefix, ParamStore, Session, Tensor};
use chatpainter::model::{ChatPainter, ModelSpec, Stage, StageNoise};
use chatpainter::networks::ModelDims;
use chatpainter::rng::rng_from;
use chatpainter::text::{DialogueEncoder, EncodedText, TextDims, Vocabulary};
use chatpainter::training::{build_matched_batch, detach, discriminator_terms, generator_terms, MatchedBatch, LOG_EPS};

pub fn tiny_spec(encoder: DialogueEncoder) -> ModelSpec {
    ModelSpec {
        dims: ModelDims {
            n_z: 3,
            w0: 16,
            m_d: 4,
            n_di: 4,
            n_d: 2,
            n_g: 2,
            m_g: 4,
            n_gi: 4,
            w: 32,
            channel_base: 2,
            g0_width: 4,
            residual_blocks: 1,
        },
        text: TextDims {
            d_word: 4,
            d_cap: 3,
            d_dlg: 4,
            d_turn: 3,
            h_rnn: 3,
        },
        encoder,
    }
}

pub fn tiny_data(dir: &Path, n: usize) -> Dataset {
    generate_dataset(n, 7, &[16, 32], dir).unwrap();
    load_dataset(dir).unwrap()
}

pub struct Fixture {
    pub model: ChatPainter,
    pub store: ParamStore<f64>,
    pub batch: MatchedBatch<f64>,
}

/// Tiny networks with every parameter group drawn from `seed`, and a batch of
/// the first `b` samples.
pub fn fixture(data: &Dataset, encoder: DialogueEncoder, b: usize, resolution: usize, seed: u64) -> Fixture {
    fixture_with(tiny_spec(encoder), data, b, resolution, seed)
}

pub fn fixture_with(spec: ModelSpec, data: &Dataset, b: usize, resolution: usize, seed: u64) -> Fixture {
    let model = ChatPainter::new(spec).unwrap();
    let vocab = Vocabulary::build(data.texts());
    let mut store = ParamStore::new();
    model.init_all(&mut store, vocab.len(), &mut rng_from(seed));
    let samples: Vec<_> = data.samples()[..b].iter().collect();
    let texts: Vec<EncodedText> = samples
        .iter()
        .map(|s| EncodedText::new(&vocab, &s.caption, &s.dialogue))
        .collect();
    let refs: Vec<&EncodedText> = texts.iter().collect();
    let d = model.dims();
    let batch = build_matched_batch(&samples, &refs, resolution, d.n_z, d.n_g, &mut rng_from(seed + 1)).unwrap();
    Fixture { model, store, batch }
}

pub fn row(t: &Tensor<f64>, i: usize) -> Tensor<f64> {
    let mut shape = t.shape().to_vec();
    let per = t.len() / shape[0];
    shape[0] = 1;
    Tensor::from_vec(&shape, t.data()[i * per..(i + 1) * per].to_vec())
}

pub fn ln_clamped(p: f64) -> f64 {
    p.max(LOG_EPS).ln()
}

/// What one sample sees, computed alone: its embedding, its CA moments and
/// the discriminator's outputs on its real image and its generated image.
pub struct SampleView {
    pub e: Vec<f64>,
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub fake: Tensor<f64>,
}

pub fn sample_view(f: &Fixture, i: usize, stage: Stage) -> SampleView {
    let mut s = Session::new(&f.store, &[]);
    let e = f.model.embed(&mut s, &[&f.batch.texts[i]]).unwrap();
    let noise = StageNoise {
        z: row(&f.batch.noise.z, i),
        eps0: row(&f.batch.noise.eps0, i),
        eps: row(&f.batch.noise.eps, i),
    };
    let (fake, ca) = match stage {
        Stage::One => f
            .model
            .stage1_fake(&mut s, e, noise.z.clone(), noise.eps0.clone(), false)
            .unwrap(),
        Stage::Two => {
            let (fake, _, ca) = f.model.stage2_fake(&mut s, e, &noise, false).unwrap();
            (fake, ca)
        }
    };
    SampleView {
        e: s.tape.value(e).data().to_vec(),
        mu: s.tape.value(ca.mu).data().to_vec(),
        log_sigma: s.tape.value(ca.log_sigma).data().to_vec(),
        fake: s.tape.value(fake).clone(),
    }
}

pub fn d_single(f: &Fixture, stage: Stage, image: Tensor<f64>, cond: &[f64]) -> f64 {
    let disc = match stage {
        Stage::One => &f.model.d0,
        Stage::Two => &f.model.d,
    };
    let mut s = Session::new(&f.store, &[]);
    let x = s.tape.constant(image);
    let c = s.tape.constant(Tensor::from_vec(&[1, cond.len()], cond.to_vec()));
    let p = disc.forward(&mut s, x, c, false).unwrap();
    s.tape.value(p).item()
}

/// `(L_D, L_G)` assembled in scalar arithmetic from per-sample network calls.
pub fn scalar_oracle(f: &Fixture, stage: Stage, lambda: f64) -> (f64, f64) {
    let b = f.batch.len();
    let views: Vec<SampleView> = (0..b).map(|i| sample_view(f, i, stage)).collect();
    let (mut real, mut wrong, mut fake, mut kl) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..b {
        let img = row(&f.batch.real, i);
        let other = (i + 1) % b;
        real += ln_clamped(d_single(f, stage, img.clone(), &views[i].e));
        wrong += ln_clamped(1.0 - d_single(f, stage, img, &views[other].e));
        fake += ln_clamped(1.0 - d_single(f, stage, views[i].fake.clone(), &views[i].e));
        kl += kl_standard_normal(&views[i].mu, &views[i].log_sigma).unwrap();
    }
    let n = b as f64;
    let l_d = real / n + 0.5 * (wrong / n) + 0.5 * (fake / n);
    let l_g = fake / n + lambda * kl / n;
    (l_d, l_g)
}

/// The batched objectives, with running statistics so samples stay independent.
pub fn batched(f: &Fixture, stage: Stage, lambda: f64) -> (f64, f64) {
    let mut s = Session::new(&f.store, &[]);
    let e = f.model.embed(&mut s, &f.batch.text_refs()).unwrap();
    let (fake, ca, disc) = match stage {
        Stage::One => {
            let n = &f.batch.noise;
            let (fake, ca) = f
                .model
                .stage1_fake(&mut s, e, n.z.clone(), n.eps0.clone(), false)
                .unwrap();
            (fake, ca, &f.model.d0)
        }
        Stage::Two => {
            let (fake, _, ca) = f.model.stage2_fake(&mut s, e, &f.batch.noise, false).unwrap();
            (fake, ca, &f.model.d)
        }
    };
    let real = s.tape.constant(f.batch.real.clone());
    let cond = detach(&mut s, e);
    let d = discriminator_terms(&mut s, disc, real, fake, cond, &f.batch.mismatch, false).unwrap();
    let g = generator_terms(&mut s, disc, fake, cond, &ca, lambda, false, false).unwrap();
    (s.tape.value(d.loss).item(), s.tape.value(g.loss).item())
}

/// Moves the parameters off the initialization, where zero biases behind
/// dead ReLU regions leave units sitting exactly on an activation kink and
/// near-flat generator output makes batch normalization sharply curved.
pub fn generic_point(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = super::rng(seed);
    let names: Vec<String> = store.params().map(|(n, _)| n.clone()).collect();
    for n in names {
        let generator = has_prefix(&n, "g0") || has_prefix(&n, "g");
        let t = store.get_mut(&n).unwrap();
        if n.ends_with(".b") || n.ends_with(".beta") {
            let noise = Tensor::<f64>::randn(t.shape(), 0.1, &mut r);
            t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, e)| *v += e);
        } else if generator && n.ends_with(".w") {
            t.data_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
    }
}
