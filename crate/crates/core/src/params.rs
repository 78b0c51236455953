//! Named trainable tensors, their gradient accumulators, and seeded
//! initialisation.
//!
//! Every random draw in the crate goes through [`rng_for`]: a 64-bit run seed
//! is mixed with a path string (`"init/gate.kernel"`, `"dropout/e3/u17/word"`)
//! so that any component can get an independent, reproducible stream without
//! threading a mutable generator through the whole program.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Whether decoupled weight decay applies (kernels and embeddings yes,
    /// biases and CRF scores no).
    pub decay: bool,
}

#[derive(Debug, Clone)]
pub struct ParameterStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
    seed: u64,
}

impl<T: Real> ParameterStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        decay: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad,
            decay,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of stored scalars.
    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds a set of per-parameter gradients into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.iter() {
            self.params[id.0].grad.add_assign(g)?;
        }
        Ok(())
    }

    /// Deterministic generator for a named purpose under this store's seed.
    pub fn rng(&self, path: &str) -> ChaCha8Rng {
        rng_for(self.seed, path)
    }

    /// The first parameter whose value or gradient holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|p| !p.value.all_finite() || !p.grad.all_finite())
            .map(|p| p.name.as_str())
    }

    /// Copies every value into another element type; gradients restart at zero.
    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: Tensor::zeros(p.value.shape()),
                    decay: p.decay,
                })
                .collect(),
            index: self.index.clone(),
            seed: self.seed,
        }
    }

    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor<T>]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "snapshot holds {} tensors, store has {}",
                values.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::dim("restore", p.value.shape(), v.shape()));
            }
            p.value = v.clone();
        }
        Ok(())
    }
}

/// Sparse per-parameter gradient set produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub(crate) fn new(slots: usize) -> Self {
        Self {
            grads: (0..slots).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn set(&mut self, id: ParamId, grad: Tensor<T>) {
        self.grads[id.0] = Some(grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// `self += other`, slot by slot.
    pub fn merge(&mut self, other: Gradients<T>) -> Result<()> {
        if other.grads.len() > self.grads.len() {
            self.grads.resize_with(other.grads.len(), || None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(a), Some(b)) => a.add_assign(&b)?,
                (None, Some(b)) => *mine = Some(b),
                _ => {}
            }
        }
        Ok(())
    }
}

/// Mixes a run seed with a path into an independent 64-bit seed.
pub fn derive_seed(seed: u64, path: &str) -> u64 {
    // FNV-1a over the path, then a splitmix64 finaliser over (seed ^ hash).
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in path.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64, path: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Glorot/Xavier uniform: `U(-l, l)` with `l = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Real>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-limit..limit)))
}

/// A `[rows, cols]` matrix with orthonormal rows (or columns, whichever is
/// shorter), from the QR factorisation of a Gaussian matrix with the usual
/// sign correction.
pub fn orthogonal<T: Real>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<T> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let gaussian = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = gaussian.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    // q is tall x short with orthonormal columns.
    Tensor::from_fn(&[rows, cols], |idx| {
        let (i, j) = (idx / cols, idx % cols);
        let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
        T::of(v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParameterStore::<f64>::new(0);
        store.add("a", Tensor::zeros(&[2]), true).unwrap();
        assert!(matches!(
            store.add("a", Tensor::zeros(&[2]), true),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn derived_seeds_differ_by_path_and_seed() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
        assert_eq!(derive_seed(7, "init/x"), derive_seed(7, "init/x"));
    }

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = rng_for(0, "orth");
        let w = orthogonal::<f64>(16, 64, &mut rng);
        let gram = w.matmul_t(&w).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram.at(i, j) - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn glorot_respects_limit() {
        let mut rng = rng_for(0, "g");
        let w = glorot_uniform::<f64>(&[30, 10], 30, 10, &mut rng);
        let limit = (6.0f64 / 40.0).sqrt();
        assert!(w.data().iter().all(|x| x.abs() < limit));
    }

    #[test]
    fn gradients_merge_sums_slots() {
        let mut a = Gradients::<f64>::new(3);
        a.set(ParamId(0), Tensor::filled(&[2], 1.0));
        let mut b = Gradients::<f64>::new(3);
        b.set(ParamId(0), Tensor::filled(&[2], 2.0));
        b.set(ParamId(2), Tensor::filled(&[1], 5.0));
        a.merge(b).unwrap();
        assert_eq!(a.get(ParamId(0)).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(a.get(ParamId(2)).unwrap().data(), &[5.0]);
        assert!(a.get(ParamId(1)).is_none());
    }
}
