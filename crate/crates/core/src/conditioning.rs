//! Conditioning augmentation: one affine map from the text embedding to
//! `(mu, log_sigma)`, reparameterized sampling `c = mu + exp(log_sigma) * eps`,
//! and the closed-form KL divergence to the standard normal.

use rand::Rng;

use crate::engine::{Float, ParamStore, Session, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningSample {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub c_hat: Vec<f64>,
}

/// Parameter group of one stage's CA module. The affine output splits as
/// `[0, n_g)` for `mu` and `[n_g, 2 n_g)` for `log_sigma`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaModule {
    pub prefix: &'static str,
    pub n_g: usize,
}

pub const STAGE1_CA: &str = "ca0";
pub const STAGE2_CA: &str = "ca";

/// Tape outputs of a CA forward pass, each `(B, n_g)`.
#[derive(Clone, Copy, Debug)]
pub struct CaVars {
    pub c_hat: Var,
    pub mu: Var,
    pub log_sigma: Var,
}

impl CaModule {
    pub fn new(prefix: &'static str, n_g: usize) -> Self {
        CaModule { prefix, n_g }
    }

    fn fc(&self) -> String {
        format!("{}.fc", self.prefix)
    }

    pub fn init_params<T: Float, R: Rng>(&self, store: &mut ParamStore<T>, e_dim: usize, rng: &mut R) {
        store.init_linear(&self.fc(), 2 * self.n_g, e_dim, rng);
    }

    /// `e: (B, |e|)`, `epsilon: (B, n_g)`.
    pub fn forward<T: Float>(&self, s: &mut Session<'_, T>, e: Var, epsilon: Tensor<T>) -> Result<CaVars> {
        let b = s.tape.shape(e)[0];
        if epsilon.shape() != [b, self.n_g] {
            return Err(Error::ShapeMismatch {
                context: "conditioning epsilon",
                expected: vec![b, self.n_g],
                actual: epsilon.shape().to_vec(),
            });
        }
        let fc = self.fc();
        let w = s.param(&format!("{fc}.w"))?;
        let bias = s.param(&format!("{fc}.b"))?;
        let e_dim = s.tape.shape(e)[1];
        let w_in = s.tape.shape(w)[1];
        if e_dim != w_in {
            return Err(Error::ShapeMismatch {
                context: "conditioning input",
                expected: vec![b, w_in],
                actual: vec![b, e_dim],
            });
        }
        let out = s.tape.linear(e, w, Some(bias));
        let mu = s.tape.slice(out, 0, self.n_g);
        let log_sigma = s.tape.slice(out, self.n_g, self.n_g);
        let sigma = s.tape.exp(log_sigma);
        let eps = s.tape.constant(epsilon);
        let noise = s.tape.mul(sigma, eps);
        let c_hat = s.tape.add(mu, noise);
        Ok(CaVars { c_hat, mu, log_sigma })
    }

    /// Single-sample forward against `store`.
    pub fn sample<T: Float>(&self, store: &ParamStore<T>, e: &[f64], epsilon: &[f64]) -> Result<ConditioningSample> {
        if epsilon.len() != self.n_g {
            return Err(Error::ShapeMismatch {
                context: "conditioning epsilon",
                expected: vec![self.n_g],
                actual: vec![epsilon.len()],
            });
        }
        let mut s = Session::new(store, &[]);
        let ev = s
            .tape
            .constant(Tensor::from_vec(&[1, e.len()], e.iter().map(|&v| T::lit(v)).collect()));
        let eps = Tensor::from_vec(&[1, self.n_g], epsilon.iter().map(|&v| T::lit(v)).collect());
        let vars = self.forward(&mut s, ev, eps)?;
        let sample = ConditioningSample {
            mu: s.tape.value(vars.mu).to_f64_vec(),
            log_sigma: s.tape.value(vars.log_sigma).to_f64_vec(),
            epsilon: epsilon.to_vec(),
            c_hat: s.tape.value(vars.c_hat).to_f64_vec(),
        };
        if !sample.c_hat.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("conditioning sample".into()));
        }
        Ok(sample)
    }
}

/// `sum_i 0.5 (mu_i^2 + exp(2 log_sigma_i) - 2 log_sigma_i - 1)`.
pub fn kl_standard_normal(mu: &[f64], log_sigma: &[f64]) -> Result<f64> {
    if mu.len() != log_sigma.len() {
        return Err(Error::ShapeMismatch {
            context: "kl_standard_normal",
            expected: vec![mu.len()],
            actual: vec![log_sigma.len()],
        });
    }
    if !mu.iter().chain(log_sigma).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("kl_standard_normal input".into()));
    }
    Ok(mu
        .iter()
        .zip(log_sigma)
        .map(|(&m, &ls)| 0.5 * (m * m + (2.0 * ls).exp() - 2.0 * ls - 1.0))
        .sum())
}

/// Closed-form gradient of [`kl_standard_normal`]: `(mu, exp(2 ls) - 1)`.
pub fn kl_gradient(mu: &[f64], log_sigma: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (
        mu.to_vec(),
        log_sigma.iter().map(|&ls| (2.0 * ls).exp() - 1.0).collect(),
    )
}

/// Batch mean of the per-sample KL, on the tape.
pub fn kl_term<T: Float>(s: &mut Session<'_, T>, mu: Var, log_sigma: Var) -> Var {
    let b = s.tape.shape(mu)[0];
    let t = &mut s.tape;
    let mu2 = t.mul(mu, mu);
    let two_ls = t.scale(log_sigma, T::lit(2.0));
    let var = t.exp(two_ls);
    let a = t.add(mu2, var);
    let c = t.sub(a, two_ls);
    let d = t.add_scalar(c, -T::one());
    let half = t.scale(d, T::lit(0.5));
    let total = t.sum_all(half);
    t.scale(total, T::one() / T::from_usize(b).unwrap())
}
