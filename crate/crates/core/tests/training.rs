mod common;

use std::fs;

use chatpainter::data_ingest::load_dataset;
use chatpainter::data_synth::generate_dataset;
use chatpainter::engine::{has_prefix, ParamStore, Session};
use chatpainter::model::{discriminator_group, generator_groups, ModelSpec, Stage};
use chatpainter::networks::ModelDims;
use chatpainter::rng::rng_from;
use chatpainter::text::{DialogueEncoder, EncodedText, TextDims, Vocabulary};
use chatpainter::training::*;
use chatpainter::Error;
use common::losses::*;
use common::{assert_fd, fd_params};
use proptest::prelude::*;

#[test]
fn schedule_examples() {
    assert_eq!(lr_schedule(0, 2e-4, 50), 2e-4);
    assert_eq!(lr_schedule(49, 2e-4, 50), 2e-4);
    assert_eq!(lr_schedule(50, 2e-4, 50), 1e-4);
    assert!((lr_schedule(125, 2e-4, 50) - 5e-5).abs() < 1e-18);
    assert_eq!(lr_schedule(800, 2e-4, 50), 2e-4 * 0.5f64.powi(16));
    assert_eq!(lr_schedule(799, 2e-4, 50), 2e-4 * 0.5f64.powi(15));
    let desk = TrainConfig::desk(Stage::One, DialogueEncoder::Recurrent, 0);
    assert_eq!(lr_schedule(59, desk.lr0, desk.lr_half_every), 2e-4 / 32.0);
}

#[test]
fn pair_batch_swaps_conditions() {
    assert_eq!(mismatch_rotation(2), vec![1, 0]);
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path(), 4);
    let f = fixture(&data, DialogueEncoder::Recurrent, 2, 16, 1);
    assert_eq!(f.batch.mismatch, vec![1, 0]);
    let swapped = f.batch.mismatched_texts();
    assert_eq!(swapped[0], &f.batch.texts[1]);
    assert_eq!(swapped[1], &f.batch.texts[0]);
}

#[test]
fn single_sample_batch_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path(), 2);
    let vocab = Vocabulary::build(data.texts());
    let s = &data.samples()[0];
    let t = EncodedText::new(&vocab, &s.caption, &s.dialogue);
    let r = build_matched_batch::<f32>(&[s], &[&t], 16, 3, 2, &mut rng_from(0));
    assert!(matches!(r, Err(Error::InvalidArgument(_))));
}

#[test]
fn same_seed_gives_the_same_noise() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path(), 4);
    let a = fixture(&data, DialogueEncoder::Recurrent, 4, 16, 5);
    let b = fixture(&data, DialogueEncoder::Recurrent, 4, 16, 5);
    let c = fixture(&data, DialogueEncoder::Recurrent, 4, 16, 6);
    assert_eq!(a.batch.noise, b.batch.noise);
    assert_ne!(a.batch.noise.z, c.batch.noise.z);
    assert_eq!(a.batch.noise.z.shape(), [4, 3]);
    assert_eq!(a.batch.noise.eps0.shape(), [4, 2]);
}

#[test]
fn batched_losses_match_the_scalar_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path(), 2);
    for encoder in [DialogueEncoder::Recurrent, DialogueEncoder::Flat, DialogueEncoder::None] {
        for draw in 0..10 {
            for (stage, res) in [(Stage::One, 16), (Stage::Two, 32)] {
                let f = fixture(&data, encoder, 2, res, 100 + draw);
                let lambda = 2.0;
                let (bd, bg) = batched(&f, stage, lambda);
                let (od, og) = scalar_oracle(&f, stage, lambda);
                assert!(
                    (bd - od).abs() < 1e-10,
                    "{encoder:?} {stage:?} draw {draw}: L_D {bd} vs {od}"
                );
                assert!(
                    (bg - og).abs() < 1e-10,
                    "{encoder:?} {stage:?} draw {draw}: L_G {bg} vs {og}"
                );
            }
        }
    }
}

fn zero_out_layer(store: &mut ParamStore<f64>, prefix: &str) {
    for suffix in ["w", "b"] {
        let t = store.get_mut(&format!("{prefix}.out.{suffix}")).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn constant_half_discriminator() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path(), 4);
    for (stage, res, prefix) in [(Stage::One, 16, "d0"), (Stage::Two, 32, "d")] {
        let mut f = fixture(&data, DialogueEncoder::Recurrent, 4, res, 3);
        zero_out_layer(&mut f.store, prefix);
        let losses = match stage {
            Stage::One => stage1_losses(&f.model, &f.store, &f.batch, 0.0, false),
            Stage::Two => stage2_losses(&f.model, &f.store, &f.batch, 0.0, false),
        }
        .unwrap();
        assert!(
            (losses.loss_d + 2.0 * 2f64.ln()).abs() < 1e-12,
            "{stage:?}: {}",
            losses.loss_d
        );
        assert!(
            (losses.loss_g - 0.5f64.ln()).abs() < 1e-12,
            "{stage:?}: {}",
            losses.loss_g
        );
        assert_eq!(losses.d_real, 0.5);
        assert_eq!(losses.d_fake, 0.5);
    }
}

#[test]
fn saturated_discriminator_hits_the_log_clamp() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path(), 4);
    let mut f = fixture(&data, DialogueEncoder::Recurrent, 4, 16, 4);
    zero_out_layer(&mut f.store, "d0");
    f.store.get_mut("d0.out.b").unwrap().data_mut()[0] = 1000.0;
    let losses = stage1_losses(&f.model, &f.store, &f.batch, 0.0, false).unwrap();
    assert!((losses.loss_d - LOG_EPS.ln()).abs() < 1e-9, "{}", losses.loss_d);
    assert!((losses.loss_g - LOG_EPS.ln()).abs() < 1e-9, "{}", losses.loss_g);
}

#[test]
fn kl_weight_enters_linearly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path(), 4);
    for seed in 0..5 {
        let f = fixture(&data, DialogueEncoder::Flat, 4, 16, 20 + seed);
        let one = stage1_losses(&f.model, &f.store, &f.batch, 1.0, false).unwrap();
        let two = stage1_losses(&f.model, &f.store, &f.batch, 2.0, false).unwrap();
        assert!(one.kl > 0.0);
        assert!(((two.loss_g - one.loss_g) - one.kl).abs() < 1e-12);
        let f2 = fixture(&data, DialogueEncoder::Flat, 4, 32, 20 + seed);
        let one = stage2_losses(&f2.model, &f2.store, &f2.batch, 1.0, false).unwrap();
        let two = stage2_losses(&f2.model, &f2.store, &f2.batch, 2.0, false).unwrap();
        assert!(((two.loss_g - one.loss_g) - one.kl).abs() < 1e-12);
    }
}

#[test]
fn prior_moments_contribute_no_kl() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path(), 4);
    let mut f = fixture(&data, DialogueEncoder::Recurrent, 4, 16, 9);
    for name in ["ca0.fc.w", "ca0.fc.b"] {
        f.store
            .get_mut(name)
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let a = stage1_losses(&f.model, &f.store, &f.batch, 0.0, false).unwrap();
    let b = stage1_losses(&f.model, &f.store, &f.batch, 7.5, false).unwrap();
    assert_eq!(a.kl, 0.0);
    assert_eq!(a.loss_g, b.loss_g);
}

#[test]
fn generator_objective_matches_finite_differences() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path(), 3);
    for (stage, res) in [(Stage::One, 16), (Stage::Two, 32)] {
        let spec = ModelSpec {
            dims: ModelDims::desk(),
            text: TextDims::desk(),
            encoder: DialogueEncoder::Recurrent,
        };
        let mut f = fixture_with(spec, &data, 3, res, 31);
        generic_point(&mut f.store, 31);
        let names: Vec<String> = generator_groups(stage)
            .iter()
            .flat_map(|g| f.store.param_names_with_prefix(g).cloned().collect::<Vec<_>>())
            .collect();
        assert!(names.len() > 10);
        // The step scores fakes against a detached condition, so the
        // perturbed objective must hold that condition fixed too.
        let cond = {
            let mut s = Session::new(&f.store, &[]);
            let e = f.model.embed(&mut s, &f.batch.text_refs()).unwrap();
            s.tape.value(e).clone()
        };
        let reports = fd_params(&f.store, &names, 4, 1e-6, |s| {
            let e = f.model.embed(s, &f.batch.text_refs()).unwrap();
            let n = &f.batch.noise;
            let (fake, ca, disc) = match stage {
                Stage::One => {
                    let (fake, ca) = f.model.stage1_fake(s, e, n.z.clone(), n.eps0.clone(), true).unwrap();
                    (fake, ca, &f.model.d0)
                }
                Stage::Two => {
                    let (fake, _, ca) = f.model.stage2_fake(s, e, n, true).unwrap();
                    (fake, ca, &f.model.d)
                }
            };
            let c = s.tape.constant(cond.clone());
            generator_terms(s, disc, fake, c, &ca, 2.0, false, true).unwrap().loss
        });
        assert_fd(&reports, 1e-3);
    }
}

#[test]
fn each_step_differentiates_only_its_own_groups() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path(), 4);
    for (stage, res) in [(Stage::One, 16), (Stage::Two, 32)] {
        let f = fixture(&data, DialogueEncoder::Recurrent, 4, res, 12);
        let mut s = Session::new(&f.store, generator_groups(stage));
        let g = match stage {
            Stage::One => stage1_graph(&mut s, &f.model, &f.batch, 2.0, false),
            Stage::Two => stage2_graph(&mut s, &f.model, &f.batch, 2.0, false),
        }
        .unwrap();
        let grads = s.tape.backward(g.g.loss);
        let names: Vec<String> = s.param_grads(&grads).into_iter().map(|(n, _)| n).collect();
        let d_group = discriminator_group(stage);
        assert!(!names.is_empty());
        assert!(names.iter().all(|n| !has_prefix(n, d_group)), "{names:?}");

        let mut s = Session::new(&f.store, &[d_group]);
        let g = match stage {
            Stage::One => stage1_graph(&mut s, &f.model, &f.batch, 2.0, false),
            Stage::Two => stage2_graph(&mut s, &f.model, &f.batch, 2.0, false),
        }
        .unwrap();
        let grads = s.tape.backward(g.d.loss);
        let names: Vec<String> = s.param_grads(&grads).into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().all(|n| has_prefix(n, d_group)), "{names:?}");
    }
    assert_eq!(generator_groups(Stage::One), ["enc", "ca0", "g0"]);
    assert_eq!(generator_groups(Stage::Two), ["ca", "g"]);
}

fn desk_config(stage: Stage, seed: u64, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::desk(stage, DialogueEncoder::Recurrent, seed);
    c.epochs = epochs;
    c
}

#[test]
fn seeded_run_reproduces_its_log() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    generate_dataset(64, 1, &[16, 32], &data_dir).unwrap();
    let data = load_dataset(&data_dir).unwrap();
    let cfg = desk_config(Stage::One, 3, 2);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let ra = train_stage(&cfg, &data, None, Some(&a), |_| {}).unwrap();
    let rb = train_stage(&cfg, &data, None, Some(&b), |_| {}).unwrap();
    let log_a = fs::read(a.join(METRICS_FILE)).unwrap();
    assert_eq!(log_a, fs::read(b.join(METRICS_FILE)).unwrap());
    assert_eq!(ra.checkpoint.to_bytes().unwrap(), rb.checkpoint.to_bytes().unwrap());
    let text = String::from_utf8(log_a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,0.0002,"));
    let other = train_stage(&desk_config(Stage::One, 4, 2), &data, None, None, |_| {}).unwrap();
    assert_ne!(other.metrics, ra.metrics);
}

#[test]
fn discriminator_separates_real_from_fake_early() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    generate_dataset(2000, 1, &[16], &data_dir).unwrap();
    let data = load_dataset(&data_dir).unwrap();
    let mut wins = 0;
    for seed in 0..3 {
        let cfg = desk_config(Stage::One, seed, 5);
        let out = train_stage(&cfg, &data, None, None, |_| {}).unwrap();
        for m in &out.metrics {
            assert!(m.loss_d.is_finite() && m.loss_g.is_finite());
        }
        if out.metrics.iter().any(|m| m.d_real > m.d_fake) {
            wins += 1;
        }
    }
    assert!(wins >= 2, "D(real) > D(fake) within 5 epochs for {wins} of 3 seeds");
}

fn tiny_config(stage: Stage, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::desk(stage, DialogueEncoder::Recurrent, 8);
    c.model = tiny_spec(DialogueEncoder::Recurrent);
    c.batch_size = 4;
    c.epochs = epochs;
    c
}

#[test]
fn stage_two_freezes_everything_from_stage_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path(), 16);
    let s1 = train_stage(&tiny_config(Stage::One, 2), &data, None, None, |_| {})
        .unwrap()
        .checkpoint;
    let s2 = train_stage(&tiny_config(Stage::Two, 3), &data, Some(&s1), None, |_| {})
        .unwrap()
        .checkpoint;
    for (name, before) in s1.params.params() {
        let frozen = ["enc", "ca0", "g0"].iter().any(|p| has_prefix(name, p));
        if frozen {
            assert_eq!(s2.params.get(name).unwrap(), before, "{name} changed in Stage II");
        }
    }
    assert!(s2.params.param_names_with_prefix("d").count() > 0);
    assert!(s2.params.param_names_with_prefix("d0").count() == 0);
}

#[test]
fn stage_two_requires_a_stage_one_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path(), 8);
    let err = train_stage(&tiny_config(Stage::Two, 1), &data, None, None, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let mut other = tiny_config(Stage::One, 1);
    let s1 = train_stage(&other, &data, None, None, |_| {}).unwrap().checkpoint;
    other.stage = Stage::Two;
    other.model.encoder = DialogueEncoder::Flat;
    assert!(train_stage(&other, &data, Some(&s1), None, |_| {}).is_err());
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path().join("data").as_path(), 8);
    let mut cfg = tiny_config(Stage::One, 3);
    cfg.checkpoint_every = 2;
    let out_dir = tmp.path().join("run");
    let out = train_stage(&cfg, &data, None, Some(&out_dir), |_| {}).unwrap();
    assert!(out_dir.join("epoch_0002.ckpt").exists());
    assert!(!out_dir.join("epoch_0003.ckpt").exists());
    let path = out_dir.join(FINAL_CHECKPOINT);
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    assert_eq!(loaded.epoch, 3);
    let bytes = fs::read(&path).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), bytes);
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), loaded);

    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 1;
    assert!(Checkpoint::from_bytes(&flipped).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    assert!(Checkpoint::from_bytes(b"nope").is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let base = tiny_config(Stage::One, 1);
    let mut bad = vec![];
    for f in [
        (|c: &mut TrainConfig| c.batch_size = 1) as fn(&mut TrainConfig),
        |c| c.epochs = 0,
        |c| c.lr0 = 0.0,
        |c| c.lambda = -1.0,
        |c| c.beta1 = 1.0,
        |c| c.lr_half_every = 0,
    ] {
        let mut c = base.clone();
        f(&mut c);
        bad.push(c);
    }
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
    assert!(base.validate().is_ok());
    assert!(TrainConfig::paper(Stage::One, 0).validate().is_ok());
    assert_eq!(TrainConfig::paper(Stage::One, 0).batch_size, 384);
    assert_eq!(TrainConfig::paper(Stage::Two, 0).batch_size, 64);
}

proptest! {
    #[test]
    fn rotation_is_a_derangement(b in 2usize..500) {
        let m = mismatch_rotation(b);
        let mut seen = vec![false; b];
        for (i, &j) in m.iter().enumerate() {
            prop_assert_ne!(i, j);
            prop_assert_eq!(j, (i + 1) % b);
            seen[j] = true;
        }
        prop_assert!(seen.into_iter().all(|s| s));
    }

    #[test]
    fn schedule_is_monotone_and_halving(lr0 in 1e-6f64..1.0, half in 1usize..100, epoch in 0usize..2000) {
        let now = lr_schedule(epoch, lr0, half);
        let next = lr_schedule(epoch + 1, lr0, half);
        prop_assert!(next <= now);
        prop_assert_eq!(lr_schedule(epoch + half, lr0, half), now * 0.5);
    }
}
