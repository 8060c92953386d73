use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

/// Builds a scalar from `inputs` on a fresh tape; used for both the analytic
/// and the finite-difference evaluations.
fn check_grad(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var, tol: f64) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);
    let eval = |ins: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs);
        t.value(o).item()
    };
    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(err < tol, "input {k} elem {i}: analytic {a} vs fd {fd} (rel {err})");
        }
    }
}

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A fixed random projection to a scalar, so every output element matters.
fn project(t: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let shape = t.shape(x).to_vec();
    let w = t.constant(rnd(&shape, seed));
    let p = t.mul(x, w);
    t.sum_all(p)
}

#[test]
fn elementwise_ops_match_finite_differences() {
    check_grad(
        vec![rnd(&[2, 3], 1), rnd(&[2, 3], 2)],
        |t, v| {
            let a = t.add(v[0], v[1]);
            let b = t.mul(a, v[1]);
            let c = t.sub(b, v[0]);
            let d = t.tanh(c);
            let e = t.sigmoid(d);
            let f = t.exp(e);
            let g = t.scale(f, 0.7);
            let h = t.leaky_relu(g, 0.2);
            let i = t.log_clamp(h, 1e-8);
            project(t, i, 3)
        },
        1e-6,
    );
}

#[test]
fn linear_matches_finite_differences() {
    check_grad(
        vec![rnd(&[3, 4], 4), rnd(&[5, 4], 5), rnd(&[5], 6)],
        |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]));
            project(t, y, 7)
        },
        1e-6,
    );
}

#[test]
fn conv2d_matches_finite_differences() {
    for (k, stride, pad) in [(3, 1, 1), (4, 2, 1), (1, 1, 0), (2, 2, 0)] {
        check_grad(
            vec![rnd(&[2, 3, 6, 6], 8), rnd(&[4, 3, k, k], 9), rnd(&[4], 10)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad);
                project(t, y, 11)
            },
            1e-6,
        );
    }
}

#[test]
fn conv2d_matches_direct_summation() {
    let x = rnd(&[2, 2, 5, 5], 12);
    let w = rnd(&[3, 2, 4, 4], 13);
    let mut t = Tape::new();
    let (vx, vw) = (t.constant(x.clone()), t.constant(w.clone()));
    let y = t.conv2d(vx, vw, None, 2, 1);
    let out = t.value(y);
    assert_eq!(out.shape(), &[2, 3, 2, 2]);
    for n in 0..2 {
        for o in 0..3 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ky in 0..4 {
                            for kx in 0..4 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    s += x.data()[((n * 2 + c) * 5 + iy as usize) * 5 + ix as usize]
                                        * w.data()[((o * 2 + c) * 4 + ky) * 4 + kx];
                                }
                            }
                        }
                    }
                    let got = out.data()[((n * 3 + o) * 2 + oy) * 2 + ox];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn normalization_matches_finite_differences() {
    check_grad(
        vec![rnd(&[3, 2, 2, 2], 14), rnd(&[2], 15), rnd(&[2], 16)],
        |t, v| {
            let (y, _) = t.normalize(v[0], v[1], v[2], None);
            project(t, y, 17)
        },
        1e-5,
    );
    let mean = [0.3, -0.2];
    let var = [1.5, 0.7];
    check_grad(
        vec![rnd(&[3, 2], 18), rnd(&[2], 19), rnd(&[2], 20)],
        |t, v| {
            let (y, _) = t.normalize(v[0], v[1], v[2], Some((&mean, &var)));
            project(t, y, 21)
        },
        1e-6,
    );
}

#[test]
fn shape_ops_match_finite_differences() {
    check_grad(
        vec![rnd(&[2, 3, 2, 2], 22), rnd(&[2, 1, 2, 2], 23), rnd(&[2, 3], 24)],
        |t, v| {
            let up = t.upsample2x(v[0]);
            let small = t.upsample2x(v[1]);
            let cat = t.concat(&[up, small]);
            let sl = t.slice(cat, 1, 2);
            let rep = t.replicate(v[2], 4);
            let rs = t.slice(rep, 0, 2);
            let m = t.mul(sl, rs);
            let r = t.reshape(m, &[2, 32]);
            let g = t.gather_rows(r, &[1, 0, 1]);
            project(t, g, 25)
        },
        1e-6,
    );
}

#[test]
fn embed_mean_and_cross_entropy_match_finite_differences() {
    let lists = vec![vec![1, 2, 0, 2], vec![], vec![3]];
    check_grad(
        vec![rnd(&[4, 3], 26)],
        |t, v| {
            let e = t.embed_mean(v[0], &lists);
            t.cross_entropy(e, &[0, 2, 1])
        },
        1e-6,
    );
}

#[test]
fn embed_mean_skips_padding_and_handles_empty() {
    let table = Tensor::from_vec(&[3, 2], vec![9.0, 9.0, 1.0, 2.0, 3.0, 6.0]);
    let mut t = Tape::new();
    let v = t.constant(table);
    let e = t.embed_mean(v, &[vec![0, 1, 2, 0], vec![], vec![0]]);
    assert_eq!(t.value(e).data(), &[2.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn log_clamp_bounds_the_argument() {
    let mut t = Tape::<f64>::new();
    let x = t.variable(Tensor::from_vec(&[2], vec![0.0, 1.0]));
    let y = t.log_clamp(x, 1e-8);
    assert!((t.value(y).data()[0] - 1e-8f64.ln()).abs() < 1e-12);
    let s = t.sum_all(y);
    let g = t.backward(s);
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn f32_and_f64_conv_agree() {
    let x = rnd(&[1, 2, 4, 4], 30);
    let w = rnd(&[2, 2, 3, 3], 31);
    let mut t64 = Tape::new();
    let (a, b) = (t64.constant(x.clone()), t64.constant(w.clone()));
    let y64 = t64.conv2d(a, b, None, 1, 1);
    let mut t32 = Tape::<f32>::new();
    let (a, b) = (t32.constant(x.cast()), t32.constant(w.cast()));
    let y32 = t32.conv2d(a, b, None, 1, 1);
    for (p, q) in t64.value(y64).data().iter().zip(t32.value(y32).data()) {
        assert!((p - *q as f64).abs() < 1e-4);
    }
}
