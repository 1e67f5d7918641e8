use std::collections::HashMap;

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named tensor plus its Adam moments. Buffers (batch-norm running
/// statistics) are stored the same way with `trainable = false`.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
    m: Tensor<T>,
    v: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn moments(&self) -> (&Tensor<T>, &Tensor<T>) {
        (&self.m, &self.v)
    }
}

/// Ordered parameter collection with optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
    step: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            step: 0,
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "parameter `{name}` registered twice"
        );
        let id = self.params.len();
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable,
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        });
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, false)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            tensors: self
                .params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }

    /// Same names and values in another precision; optimizer state is reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert(&p.name, p.value.cast(), p.trainable);
        }
        out
    }

    /// Overwrites values from `(name, tensor)` pairs. Every stored name must be present.
    pub fn load_values(&mut self, values: &[(String, Tensor<T>)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor<T>> =
            values.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in &mut self.params {
            let src = lookup.get(p.name.as_str()).ok_or_else(|| {
                Error::CheckpointMismatch(format!("missing parameter `{}`", p.name))
            })?;
            if src.shape() != p.value.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = (*src).clone();
        }
        if values.len() != self.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} stored parameters, model has {}",
                values.len(),
                self.params.len()
            )));
        }
        Ok(())
    }

    pub fn named_values(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// SHA-256 over names and little-endian values, as lowercase hex.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for x in p.value.data() {
                h.update(x.to_f64().unwrap().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Flat view of all parameter values, in registration order.
    pub fn flatten(&self) -> Vec<T> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }
}

/// Gradient accumulators aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    /// Disjoint mutable access to a weight/bias pair.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> super::ops::LayerGrads<'_, T> {
        assert_ne!(a, b);
        let (lo, hi, swap) = if a.0 < b.0 { (a.0, b.0, false) } else { (b.0, a.0, true) };
        let (left, right) = self.tensors.split_at_mut(hi);
        let (x, y) = (&mut left[lo], &mut right[0]);
        if swap {
            super::ops::LayerGrads { weight: y, bias: x }
        } else {
            super::ops::LayerGrads { weight: x, bias: y }
        }
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn clear(&mut self) {
        for t in &mut self.tensors {
            t.fill(T::zero());
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update on every trainable parameter.
///
/// Fails before touching any value if a gradient is non-finite, naming the
/// offending parameter.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, grads: &Grads<T>, cfg: &AdamConfig) -> Result<()> {
    if grads.tensors.len() != store.params.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} gradients for {} parameters",
                grads.tensors.len(),
                store.params.len()
            ),
        ));
    }
    for (p, g) in store.params.iter().zip(&grads.tensors) {
        if g.shape() != p.value.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("gradient for `{}` has shape {:?}", p.name, g.shape()),
            ));
        }
        if p.trainable && !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
        }
    }
    store.step += 1;
    let t = store.step as i32;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let bc1 = T::lit(1.0 - cfg.beta1.powi(t));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(t));
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    for (p, g) in store.params.iter_mut().zip(&grads.tensors) {
        if !p.trainable {
            continue;
        }
        let values = p.value.data_mut();
        let m = p.m.data_mut();
        let v = p.v.data_mut();
        for i in 0..values.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (T::one() - b1) * gi;
            v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
