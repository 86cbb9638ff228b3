use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NumError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named learnable tensors plus Adam moment accumulators.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    index: HashMap<String, ParamId>,
    step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, NumError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumError::DuplicateParam(name));
        }
        let id = ParamId(self.values.len());
        let zeros = Tensor::zeros(value.shape());
        self.first_moment.push(zeros.clone());
        self.second_moment.push(zeros);
        self.values.push(value);
        self.index.insert(name.clone(), id);
        self.names.push(name);
        Ok(id)
    }

    /// Adds a `rows × cols` matrix drawn uniformly from `[-bound, bound]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId, NumError> {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.gen_range(-bound..=bound);
        }
        self.add(name, t)
    }

    /// Glorot-uniform matrix initialisation.
    pub fn add_xavier<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<ParamId, NumError> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.add_uniform(name, &[rows, cols], bound, rng)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn coordinate_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Bias-corrected Adam update. Every gradient is validated before any
    /// parameter is touched, so a divergent step leaves the store intact.
    pub fn adam_step(&mut self, grads: &ParamGrads, cfg: &AdamConfig) -> Result<(), NumError> {
        if grads.len() != self.values.len() {
            return Err(NumError::Shape(format!(
                "gradient set covers {} parameters, store has {}",
                grads.len(),
                self.values.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.len() != self.values[i].len() {
                    return Err(NumError::Shape(format!(
                        "gradient for `{}` has {} values, parameter has {}",
                        self.names[i],
                        g.len(),
                        self.values[i].len()
                    )));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NumError::NonFinite(format!("gradient of `{}`", self.names[i])));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            let p = self.values[i].data_mut();
            match g {
                Some(g) => {
                    for k in 0..p.len() {
                        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
                        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
                        let m_hat = m[k] / bc1;
                        let v_hat = v[k] / bc2;
                        p[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                    }
                }
                // Absent gradient is an exact zero: moments decay, and the
                // parameter only moves if earlier momentum remains.
                None => {
                    let mut moving = false;
                    for k in 0..p.len() {
                        m[k] *= cfg.beta1;
                        v[k] *= cfg.beta2;
                        moving |= m[k] != 0.0;
                    }
                    if moving {
                        for k in 0..p.len() {
                            p[k] -= cfg.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-parameter gradient buffers, `None` meaning "identically zero".
#[derive(Clone, Debug, Default)]
pub struct ParamGrads(Vec<Option<Vec<f64>>>);

impl ParamGrads {
    pub fn zeros(len: usize) -> Self {
        Self(vec![None; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Option<Vec<f64>>> {
        self.0.iter()
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn set(&mut self, id: ParamId, grad: Vec<f64>) {
        self.0[id.0] = Some(grad);
    }

    pub fn clear(&mut self, id: ParamId) {
        self.0[id.0] = None;
    }

    /// Dense gradient for a parameter, zero-filled when it was unused.
    pub fn dense(&self, id: ParamId, store: &ParamStore) -> Tensor {
        let mut t = Tensor::zeros(store.get(id).shape());
        if let Some(g) = self.get(id) {
            t.data_mut().copy_from_slice(g);
        }
        t
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        if self.0.len() < other.0.len() {
            self.0.resize(other.0.len(), None);
        }
        for (mine, theirs) in self.0.iter_mut().zip(&other.0) {
            if let Some(g) = theirs {
                match mine {
                    Some(m) => m.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => *mine = Some(g.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.0.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().flat_map(|g| g.iter()).fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(v)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut s, id) = scalar_store(0.7);
        let mut g = ParamGrads::zeros(1);
        g.set(id, vec![0.0]);
        s.adam_step(&g, &AdamConfig::default()).unwrap();
        assert_eq!(s.get(id).item(), 0.7);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = scalar_store(0.0);
        let mut g = ParamGrads::zeros(1);
        g.set(id, vec![1.0]);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        s.adam_step(&g, &cfg).unwrap();
        assert!((s.get(id).item() + 0.1).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_update() {
        let (mut s, id) = scalar_store(1.0);
        let mut g = ParamGrads::zeros(1);
        g.set(id, vec![f64::NAN]);
        assert!(matches!(s.adam_step(&g, &AdamConfig::default()), Err(NumError::NonFinite(_))));
        assert_eq!(s.get(id).item(), 1.0);
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn quadratic_loss_decreases_monotonically() {
        // loss(w) = sum (w_i - 3)^2, evaluated directly after every step.
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![0.0, -1.0, 5.0])).unwrap();
        let loss = |s: &ParamStore| s.get(id).data().iter().map(|w| (w - 3.0).powi(2)).sum::<f64>();
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut prev = loss(&s);
        for _ in 0..10 {
            let mut g = ParamGrads::zeros(1);
            g.set(id, s.get(id).data().iter().map(|w| 2.0 * (w - 3.0)).collect());
            s.adam_step(&g, &cfg).unwrap();
            let now = loss(&s);
            assert!(now < prev, "{now} >= {prev}");
            prev = now;
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut s, _) = scalar_store(0.0);
        assert!(s.add("w", Tensor::scalar(1.0)).is_err());
    }
}
