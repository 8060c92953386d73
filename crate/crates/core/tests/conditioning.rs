mod common;

use chatpainter::conditioning::{kl_gradient, kl_standard_normal, kl_term, CaModule, STAGE1_CA, STAGE2_CA};
use chatpainter::engine::{ParamStore, Session, Tensor};
use chatpainter::Error;
use common::{assert_fd, fd_params, project, rng};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// `KL(N(mu, sigma^2) || N(0, 1))` by composite Simpson integration of
/// `p log(p / q)` over twelve standard deviations either side of `mu`.
fn kl_1d_numeric(mu: f64, log_sigma: f64) -> f64 {
    let sigma = log_sigma.exp();
    let log_p = |x: f64| -0.5 * ((x - mu) / sigma).powi(2) - log_sigma - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let log_q = |x: f64| -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let f = |x: f64| log_p(x).exp() * (log_p(x) - log_q(x));
    let (a, b) = (mu - 12.0 * sigma, mu + 12.0 * sigma);
    let n = 20_000;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

fn gaussian(n: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut r);
            scale * z
        })
        .collect()
}

#[test]
fn closed_form_matches_numerical_integration() {
    let mut r = rng(1);
    for _ in 0..100 {
        let n = r.gen_range(1..6);
        let mu: Vec<f64> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
        let ls: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let numeric: f64 = mu.iter().zip(&ls).map(|(&m, &l)| kl_1d_numeric(m, l)).sum();
        let closed = kl_standard_normal(&mu, &ls).unwrap();
        assert!((numeric - closed).abs() < 1e-6, "{numeric} vs {closed}");
    }
}

#[test]
fn unit_mean_gives_half_the_dimension() {
    for n in [1, 4, 16, 128] {
        let kl = kl_standard_normal(&vec![1.0; n], &vec![0.0; n]).unwrap();
        assert_eq!(kl, 0.5 * n as f64);
        assert!((kl_1d_numeric(1.0, 0.0) * n as f64 - kl).abs() < 1e-6);
    }
    assert_eq!(kl_standard_normal(&[0.0; 8], &[0.0; 8]).unwrap(), 0.0);
}

#[test]
fn bad_inputs_are_errors() {
    assert!(matches!(
        kl_standard_normal(&[0.0, 1.0], &[0.0]),
        Err(Error::ShapeMismatch { .. })
    ));
    assert!(matches!(
        kl_standard_normal(&[f64::NAN], &[0.0]),
        Err(Error::NonFinite(_))
    ));
    assert!(matches!(
        kl_standard_normal(&[0.0], &[f64::NEG_INFINITY]),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn kl_gradient_matches_finite_differences() {
    let h = 1e-6;
    for seed in 0..20 {
        let mu = gaussian(6, seed, 1.0);
        let ls = gaussian(6, seed + 100, 0.5);
        let (gm, gl) = kl_gradient(&mu, &ls);
        assert_eq!(gm, mu);
        for i in 0..6 {
            for (which, analytic) in [(0, gm[i]), (1, gl[i])] {
                let bump = |d: f64| {
                    let (mut m, mut l) = (mu.clone(), ls.clone());
                    if which == 0 {
                        m[i] += d;
                    } else {
                        l[i] += d;
                    }
                    kl_standard_normal(&m, &l).unwrap()
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
                assert!(rel < 1e-6, "seed {seed} index {i}: {analytic} vs {fd}");
            }
        }
    }
}

#[test]
fn tape_kl_matches_the_closed_form_and_its_gradient() {
    let mu = gaussian(5, 3, 1.0);
    let ls = gaussian(5, 4, 0.3);
    let store = ParamStore::<f64>::new();
    let mut s = Session::new(&store, &[]);
    let m = s.tape.variable(Tensor::from_vec(&[1, 5], mu.clone()));
    let l = s.tape.variable(Tensor::from_vec(&[1, 5], ls.clone()));
    let kl = kl_term(&mut s, m, l);
    let value = s.tape.value(kl).item();
    assert!((value - kl_standard_normal(&mu, &ls).unwrap()).abs() < 1e-12);
    let grads = s.tape.backward(kl);
    let (gm, gl) = kl_gradient(&mu, &ls);
    assert_eq!(grads.get(m).unwrap().data(), &gm[..]);
    for (a, b) in grads.get(l).unwrap().data().iter().zip(&gl) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn descent_on_the_kl_alone_reaches_the_prior() {
    let mut mu = gaussian(16, 5, 2.0);
    let mut ls = gaussian(16, 6, 1.0);
    let lr = 0.05;
    for _ in 0..5000 {
        let (gm, gl) = kl_gradient(&mu, &ls);
        for i in 0..16 {
            mu[i] -= lr * gm[i];
            ls[i] -= lr * gl[i];
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm(&mu) < 1e-3, "|mu| = {}", norm(&mu));
    assert!(norm(&ls) < 1e-3, "|log sigma| = {}", norm(&ls));
}

fn ca_store(n_g: usize, e_dim: usize, seed: u64) -> (CaModule, ParamStore<f64>) {
    let ca = CaModule::new(STAGE1_CA, n_g);
    let mut store = ParamStore::new();
    ca.init_params(&mut store, e_dim, &mut rng(seed));
    (ca, store)
}

#[test]
fn reparameterization_identity_is_exact() {
    let (ca, store) = ca_store(8, 12, 7);
    for seed in 0..50 {
        let e = gaussian(12, seed, 1.0);
        let eps = gaussian(8, seed + 1000, 1.0);
        let s = ca.sample(&store, &e, &eps).unwrap();
        assert_eq!(s.epsilon, eps);
        for i in 0..8 {
            assert_eq!(s.c_hat[i], s.mu[i] + s.log_sigma[i].exp() * eps[i]);
        }
    }
}

#[test]
fn zero_epsilon_and_zero_parameters() {
    let (ca, store) = ca_store(4, 6, 8);
    let e = gaussian(6, 1, 1.0);
    let s = ca.sample(&store, &e, &[0.0; 4]).unwrap();
    assert_eq!(s.c_hat, s.mu);

    let ca = CaModule::new(STAGE2_CA, 3);
    let mut zero = ParamStore::<f64>::new();
    zero.insert("ca.fc.w", Tensor::zeros(&[6, 5]));
    zero.insert("ca.fc.b", Tensor::zeros(&[6]));
    let s = ca
        .sample(&zero, &[1.0, -2.0, 3.0, 0.5, 0.1], &[0.4, -1.2, 2.0])
        .unwrap();
    assert_eq!(s.mu, vec![0.0; 3]);
    assert_eq!(s.log_sigma, vec![0.0; 3]);
    assert_eq!(s.c_hat, vec![0.4, -1.2, 2.0]);

    let mut biased = zero.clone();
    biased.insert("ca.fc.b", Tensor::from_vec(&[6], vec![0.1, 0.2, 0.3, -0.5, 0.0, 0.5]));
    let s = ca.sample(&biased, &[0.0; 5], &[0.0; 3]).unwrap();
    assert_eq!(s.mu, vec![0.1, 0.2, 0.3]);
    assert_eq!(s.log_sigma, vec![-0.5, 0.0, 0.5]);
}

#[test]
fn dimension_mismatches_are_errors() {
    let (ca, store) = ca_store(4, 6, 9);
    assert!(matches!(
        ca.sample(&store, &[0.0; 6], &[0.0; 3]),
        Err(Error::ShapeMismatch { .. })
    ));
    assert!(matches!(
        ca.sample(&store, &[0.0; 5], &[0.0; 4]),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn monte_carlo_moments_match_mu_and_sigma() {
    let n_g = 6;
    let (ca, store) = ca_store(n_g, 10, 10);
    let e = gaussian(10, 2, 1.0);
    let reference = ca.sample(&store, &e, &vec![0.0; n_g]).unwrap();
    let sigma: Vec<f64> = reference.log_sigma.iter().map(|l| l.exp()).collect();
    let n = 100_000;
    let mut s = Session::new(&store, &[]);
    let rows: Vec<f64> = (0..n).flat_map(|_| e.iter().copied()).collect();
    let ev = s.tape.constant(Tensor::from_vec(&[n, 10], rows));
    let eps = Tensor::randn(&[n, n_g], 1.0, &mut rng(3));
    let out = ca.forward(&mut s, ev, eps).unwrap();
    let c = s.tape.value(out.c_hat).data().to_vec();
    let sigma_norm = sigma.iter().map(|v| v * v).sum::<f64>().sqrt();
    for j in 0..n_g {
        let col: Vec<f64> = (0..n).map(|i| c[i * n_g + j]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(
            (mean - reference.mu[j]).abs() < 0.01 * sigma_norm,
            "dim {j}: mean {mean}"
        );
        let want = sigma[j] * sigma[j];
        assert!((var - want).abs() < 0.05 * want, "dim {j}: var {var} vs {want}");
    }
}

#[test]
fn ca_gradient_matches_finite_differences() {
    let (ca, store) = ca_store(5, 7, 11);
    let e = Tensor::randn(&[3, 7], 1.0, &mut rng(4));
    let eps = Tensor::randn(&[3, 5], 1.0, &mut rng(5));
    let names = vec!["ca0.fc.w".to_string(), "ca0.fc.b".to_string()];
    let reports = fd_params(&store, &names, 100, 1e-6, |s| {
        let ev = s.tape.constant(e.clone());
        let v = ca.forward(s, ev, eps.clone()).unwrap();
        let p = project(s, v.c_hat, 6);
        let kl = kl_term(s, v.mu, v.log_sigma);
        s.tape.add(p, kl)
    });
    assert_fd(&reports, 1e-6);
}

proptest! {
    #[test]
    fn kl_is_nonnegative(v in prop::collection::vec((-5.0f64..5.0, -3.0f64..3.0), 1..20)) {
        let (mu, ls): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        prop_assert!(kl_standard_normal(&mu, &ls).unwrap() >= 0.0);
    }

    #[test]
    fn kl_vanishes_only_at_the_prior(v in prop::collection::vec((-1e-3f64..1e-3, -1e-3f64..1e-3), 1..8)) {
        let (mu, ls): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let kl = kl_standard_normal(&mu, &ls).unwrap();
        let far = mu.iter().chain(&ls).any(|x| x.abs() > 1e-5);
        if kl <= 1e-12 {
            prop_assert!(!far, "kl {} at {:?} {:?}", kl, mu, ls);
        }
        if !far && mu.iter().chain(&ls).all(|&x| x == 0.0) {
            prop_assert_eq!(kl, 0.0);
        }
    }
}
