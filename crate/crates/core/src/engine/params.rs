use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use super::tape::{BatchStats, Gradients, Tape, Var};
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

/// Named parameters and non-trainable buffers (normalization running
/// statistics). Names are dotted paths such as `g0.up1.conv.w`; iteration
/// order is lexicographic, which fixes checkpoint and optimizer layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

pub const NORM_MOMENTUM: f64 = 0.1;

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    pub fn param_names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.params.keys().filter(move |k| has_prefix(k, prefix))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Copies every parameter and buffer under `prefix` from `other`.
    pub fn copy_group(&mut self, other: &ParamStore<T>, prefix: &str) {
        for (k, v) in other.params.iter().filter(|(k, _)| has_prefix(k, prefix)) {
            self.params.insert(k.clone(), v.clone());
        }
        for (k, v) in other.buffers.iter().filter(|(k, _)| has_prefix(k, prefix)) {
            self.buffers.insert(k.clone(), v.clone());
        }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Folds batch statistics into the running averages of normalization
    /// layer `prefix` (`<prefix>.running_mean`, `<prefix>.running_var`).
    pub fn update_running_stats(&mut self, prefix: &str, stats: &BatchStats<T>) -> Result<()> {
        let m = T::lit(NORM_MOMENTUM);
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var_unbiased)] {
            let name = format!("{prefix}.{suffix}");
            let buf = self
                .buffers
                .get_mut(&name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                *r = (T::one() - m) * *r + m * *b;
            }
        }
        Ok(())
    }

    // Initializers used by the network builders.

    pub fn init_conv<R: Rng>(&mut self, name: &str, out_c: usize, in_c: usize, k: usize, bias: bool, rng: &mut R) {
        self.insert(format!("{name}.w"), Tensor::randn(&[out_c, in_c, k, k], 0.02, rng));
        if bias {
            self.insert(format!("{name}.b"), Tensor::zeros(&[out_c]));
        }
    }

    pub fn init_linear<R: Rng>(&mut self, name: &str, out_f: usize, in_f: usize, rng: &mut R) {
        let std = (1.0 / in_f.max(1) as f64).sqrt();
        self.insert(format!("{name}.w"), Tensor::randn(&[out_f, in_f], std, rng));
        self.insert(format!("{name}.b"), Tensor::zeros(&[out_f]));
    }

    pub fn init_norm<R: Rng>(&mut self, name: &str, channels: usize, rng: &mut R) {
        let gamma: Tensor<T> = Tensor::randn(&[channels], 0.02, rng);
        let gamma = Tensor::from_vec(&[channels], gamma.data().iter().map(|&g| g + T::one()).collect());
        self.insert(format!("{name}.gamma"), gamma);
        self.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
        self.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        self.insert_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one()));
    }
}

pub fn has_prefix(name: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || (name.starts_with(prefix) && (name.len() == prefix.len() || name.as_bytes()[prefix.len()] == b'.'))
}

/// A tape plus the parameters bound into it.
///
/// Parameters whose name falls under one of the trainable prefixes become
/// gradient-carrying leaves; the rest enter as constants.
pub struct Session<'a, T: Float> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    state: BindState<T>,
}

/// The part of a session that survives a parameter update of *other*
/// groups, so a half-built graph can be resumed against the updated store.
pub struct BindState<T> {
    trainable: Vec<String>,
    bound: HashMap<String, Var>,
    norm_stats: Vec<(String, BatchStats<T>)>,
}

pub struct SuspendedSession<T: Float> {
    tape: Tape<T>,
    state: BindState<T>,
}

impl<'a, T: Float> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: &[&str]) -> Self {
        Session {
            tape: Tape::new(),
            store,
            state: BindState {
                trainable: trainable.iter().map(|s| s.to_string()).collect(),
                bound: HashMap::new(),
                norm_stats: Vec::new(),
            },
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.state.bound.get(name) {
            return Ok(*v);
        }
        let value = self.store.get(name)?.clone();
        let var = if self.state.trainable.iter().any(|p| has_prefix(name, p)) {
            self.tape.variable(value)
        } else {
            self.tape.constant(value)
        };
        self.state.bound.insert(name.to_string(), var);
        Ok(var)
    }

    pub fn buffer(&self, name: &str) -> Result<&'a Tensor<T>> {
        self.store.buffer(name)
    }

    pub fn record_norm_stats(&mut self, prefix: &str, stats: BatchStats<T>) {
        self.state.norm_stats.push((prefix.to_string(), stats));
    }

    pub fn suspend(self) -> SuspendedSession<T> {
        SuspendedSession {
            tape: self.tape,
            state: self.state,
        }
    }

    /// Gradients for every bound trainable parameter, in name order.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .state
            .bound
            .iter()
            .filter(|(name, _)| self.state.trainable.iter().any(|p| has_prefix(name, p)))
            .map(|(name, var)| {
                let g = grads
                    .get(*var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.tape.shape(*var)));
                (name.clone(), g)
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn take_norm_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.state.norm_stats)
    }
}

impl<T: Float> SuspendedSession<T> {
    /// Resumes against `store`. Parameters bound before suspension keep the
    /// values they had then.
    pub fn resume(self, store: &ParamStore<T>) -> Session<'_, T> {
        Session {
            tape: self.tape,
            store,
            state: self.state,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_matching_respects_path_boundaries() {
        assert!(has_prefix("g0.fc.w", "g0"));
        assert!(has_prefix("g0.fc.w", "g0.fc"));
        assert!(!has_prefix("g0x.fc.w", "g0"));
        assert!(has_prefix("anything", ""));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a.w", Tensor::from_vec(&[1], vec![2.0]));
        store.insert("b.w", Tensor::from_vec(&[1], vec![3.0]));
        let mut s = Session::new(&store, &["a"]);
        let a = s.param("a.w").unwrap();
        let b = s.param("b.w").unwrap();
        let p = s.tape.mul(a, b);
        let l = s.tape.sum_all(p);
        let g = s.tape.backward(l);
        let grads = s.param_grads(&g);
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].0, "a.w");
        assert_eq!(grads[0].1.data(), &[3.0]);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut rng = rand::thread_rng();
        let mut store = ParamStore::<f64>::new();
        store.init_norm("n", 2, &mut rng);
        let stats = BatchStats {
            mean: vec![1.0, 2.0],
            var_unbiased: vec![3.0, 5.0],
        };
        store.update_running_stats("n", &stats).unwrap();
        assert_eq!(store.buffer("n.running_mean").unwrap().data(), &[0.1, 0.2]);
        let v = store.buffer("n.running_var").unwrap().data();
        assert!((v[0] - 1.2).abs() < 1e-12 && (v[1] - 1.4).abs() < 1e-12);
    }
}
