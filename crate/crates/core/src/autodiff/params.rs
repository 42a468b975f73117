use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use super::array::Array;
use crate::error::{Error, Result};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Identifies one parameter of one [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId {
    store: u64,
    index: usize,
}

impl ParamId {
    /// Position in the owning store; stable across clones of that store.
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Array,
    grad: Option<Array>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named trainable arrays in insertion order, with Adam moment state.
#[derive(Debug)]
pub struct Params {
    tag: u64,
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
    step: u64,
}

impl Clone for Params {
    /// Clones get a fresh identity so their ids never alias on a graph.
    fn clone(&self) -> Self {
        Self {
            tag: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            entries: self.entries.clone(),
            by_name: self.by_name.clone(),
            step: self.step,
        }
    }
}

impl Default for Params {
    fn default() -> Self {
        Self::new()
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Params {
    pub fn new() -> Self {
        Self {
            tag: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
            by_name: HashMap::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: &str, value: Array) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let n = value.len();
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        Ok(self.id_at(self.entries.len() - 1))
    }

    /// Adds a parameter drawn from a normal distribution with standard
    /// deviation `std`, redrawing anything beyond two deviations.
    pub fn add_truncated_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        self.add(name, Array::new(shape, data)?)
    }

    /// Id of the `index`-th parameter in insertion order.
    pub fn id_at(&self, index: usize) -> ParamId {
        assert!(index < self.entries.len(), "parameter index {index} out of range");
        ParamId {
            store: self.tag,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar weights.
    pub fn n_weights(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.entries.len()).map(|i| self.id_at(i)).collect()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| self.id_at(i))
    }

    fn entry(&self, id: ParamId) -> &Entry {
        assert_eq!(id.store, self.tag, "parameter id from another store");
        &self.entries[id.index]
    }

    fn entry_mut(&mut self, id: ParamId) -> &mut Entry {
        assert_eq!(id.store, self.tag, "parameter id from another store");
        &mut self.entries[id.index]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entry(id).name
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.entry(id).value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.entry_mut(id).value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Array> {
        self.entry(id).grad.as_ref()
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Array) {
        self.entry_mut(id).grad = Some(grad);
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// `(name, value)` pairs in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Applies one bias-corrected Adam update to every parameter and clears
    /// the consumed gradients.
    pub fn adam_step(&mut self, opt: &Adam) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| e.grad.is_none()) {
            return Err(Error::MissingGrad(e.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - opt.beta1.powi(t);
        let c2 = 1.0 - opt.beta2.powi(t);
        for e in &mut self.entries {
            let g = e.grad.take().expect("checked above");
            let w = e.value.data_mut();
            for (((w, &g), m), v) in w.iter_mut().zip(g.data()).zip(&mut e.m).zip(&mut e.v) {
                *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
                *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= opt.lr * mh / (vh.sqrt() + opt.eps);
            }
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a hash of all values, for change detection.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in &self.entries {
            for b in e.name.bytes().chain(e.value.data().iter().flat_map(|v| v.to_bits().to_le_bytes())) {
                h ^= b as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_store(v: f64) -> (Params, ParamId) {
        let mut p = Params::new();
        let id = p.add("w", Array::scalar(v)).unwrap();
        (p, id)
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = Params::new();
        p.add("a", Array::scalar(0.0)).unwrap();
        assert!(matches!(p.add("a", Array::scalar(1.0)), Err(Error::Config(_))));
    }

    #[test]
    fn missing_grad_is_an_error() {
        let (mut p, _) = scalar_store(1.0);
        let err = p.adam_step(&Adam::new(0.1)).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "w"));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut p, id) = scalar_store(1.0);
        p.set_grad(id, Array::scalar(1.0));
        p.adam_step(&Adam::new(0.1)).unwrap();
        // m̂ = 1, v̂ = 1, so the move is lr / (1 + eps)
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.value(id).item() - want).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_leaves_param() {
        let (mut p, id) = scalar_store(0.7);
        p.set_grad(id, Array::scalar(0.0));
        p.adam_step(&Adam::new(0.1)).unwrap();
        assert_eq!(p.value(id).item(), 0.7);
    }

    #[test]
    fn two_steps_match_recurrence() {
        let (b1, b2, eps, lr, g) = (0.5, 0.999, 1e-8, 0.01, 0.3);
        let (mut p, id) = scalar_store(2.0);
        let opt = Adam {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
        };
        for _ in 0..2 {
            p.set_grad(id, Array::scalar(g));
            p.adam_step(&opt).unwrap();
        }
        let m1 = (1.0 - b1) * g;
        let v1 = (1.0 - b2) * g * g;
        let w1 = 2.0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let m2 = b1 * m1 + (1.0 - b1) * g;
        let v2 = b2 * v1 + (1.0 - b2) * g * g;
        let w2 = w1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((p.value(id).item() - w2).abs() < 1e-12);
        assert_eq!(p.step(), 2);
    }

    #[test]
    fn truncated_normal_is_bounded_and_seeded() {
        let draw = |seed| {
            let mut p = Params::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let id = p.add_truncated_normal("w", &[1000], 0.02, &mut rng).unwrap();
            p.value(id).clone()
        };
        let a = draw(3);
        assert_eq!(a, draw(3));
        assert_ne!(a, draw(4));
        assert!(a.data().iter().all(|v| v.abs() <= 0.04));
        let sd = (a.data().iter().map(|v| v * v).sum::<f64>() / 1000.0).sqrt();
        assert!(sd > 0.012 && sd < 0.02, "{sd}");
    }

    #[test]
    fn clone_gets_new_identity() {
        let (p, id) = scalar_store(1.0);
        let q = p.clone();
        assert_ne!(q.id("w").unwrap(), id);
        assert_eq!(p.fingerprint(), q.fingerprint());
    }
}
