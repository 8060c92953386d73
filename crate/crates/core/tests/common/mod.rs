#![allow(dead_code)]

pub mod losses;
pub mod scene;

use chatpainter::engine::{ParamStore, Session, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sums `x` against a fixed random tensor so every element reaches the loss.
pub fn project(s: &mut Session<'_, f64>, x: Var, seed: u64) -> Var {
    let shape = s.tape.shape(x).to_vec();
    let w = s.tape.constant(Tensor::randn(&shape, 1.0, &mut rng(seed)));
    let p = s.tape.mul(x, w);
    s.tape.sum_all(p)
}

pub struct FdReport {
    pub name: String,
    pub rel_err: f64,
    pub checked: usize,
}

/// Central differences on up to `per_param` entries of each named
/// parameter, against the tape gradient of `loss`. Returns the norm-wise
/// relative error `|a - n| / max(|a|, |n|)` per parameter.
pub fn fd_params(
    store: &ParamStore<f64>,
    names: &[String],
    per_param: usize,
    h: f64,
    loss: impl Fn(&mut Session<'_, f64>) -> Var,
) -> Vec<FdReport> {
    let prefixes: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut s = Session::new(store, &prefixes);
    let out = loss(&mut s);
    let grads = s.tape.backward(out);
    let analytic: std::collections::HashMap<String, Tensor<f64>> = s.param_grads(&grads).into_iter().collect();
    let eval = |st: &ParamStore<f64>| {
        let mut s = Session::new(st, &[]);
        let v = loss(&mut s);
        s.tape.value(v).item()
    };
    let mut pick = rng(17);
    names
        .iter()
        .map(|name| {
            let len = store.get(name).unwrap().len();
            let zero = Tensor::zeros(store.get(name).unwrap().shape());
            let a = analytic.get(name).unwrap_or(&zero);
            let idx: Vec<usize> = if len <= per_param {
                (0..len).collect()
            } else {
                sample(&mut pick, len, per_param).into_vec()
            };
            let mut work = store.clone();
            let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
            for &i in &idx {
                let orig = work.get(name).unwrap().data()[i];
                work.get_mut(name).unwrap().data_mut()[i] = orig + h;
                let up = eval(&work);
                work.get_mut(name).unwrap().data_mut()[i] = orig - h;
                let down = eval(&work);
                work.get_mut(name).unwrap().data_mut()[i] = orig;
                let n = (up - down) / (2.0 * h);
                let g = a.data()[i];
                diff += (g - n).powi(2);
                na += g * g;
                nn += n * n;
            }
            let denom = na.sqrt().max(nn.sqrt());
            FdReport {
                name: name.clone(),
                rel_err: if denom == 0.0 { 0.0 } else { diff.sqrt() / denom },
                checked: idx.len(),
            }
        })
        .collect()
}

pub fn assert_fd(reports: &[FdReport], tol: f64) {
    for r in reports {
        assert!(
            r.rel_err < tol,
            "{}: relative error {:.3e} over {} entries",
            r.name,
            r.rel_err,
            r.checked
        );
    }
}
