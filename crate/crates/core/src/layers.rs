//! Affine layers, including the block-diagonal variant that stores only
//! its diagonal blocks, plus dropout.
//!
//! A block-diagonal layer with `k` blocks splits the input features into `k`
//! contiguous chunks, multiplies chunk `i` by its own `[in/k, out/k]` kernel,
//! and writes the result to output chunk `i`:
//!
//! ```text
//! [x_1 .. x_k] · diag(W_1, .., W_k) = [x_1 W_1 .. x_k W_k]
//! ```
//!
//! Only the `k` blocks are parameters, so the kernel costs `in·out/k` scalars.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{glorot_uniform, orthogonal, rng_for, ParamId, ParameterStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    fn apply<T: Real>(self, g: &mut Graph<'_, T>, x: Var) -> Var {
        match self {
            Activation::None => x,
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelInit {
    GlorotUniform,
    Orthogonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    /// `[in, out]`
    Full(ParamId),
    /// `[blocks, in/blocks, out/blocks]`
    BlockDiagonal { id: ParamId, blocks: usize },
}

/// Construction parameters shared by both kernel layouts.
#[derive(Debug, Clone)]
pub struct DenseSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `1` stores a full kernel; anything larger stores that many diagonal blocks.
    pub blocks: usize,
    pub bias: bool,
    pub activation: Activation,
    pub init: KernelInit,
}

impl DenseSpec {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            blocks: 1,
            bias: true,
            activation: Activation::None,
            init: KernelInit::GlorotUniform,
        }
    }

    pub fn blocks(mut self, blocks: usize) -> Self {
        self.blocks = blocks;
        self
    }

    pub fn activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn init(mut self, init: KernelInit) -> Self {
        self.init = init;
        self
    }

    /// Fails unless both widths split evenly into the requested blocks.
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 || self.blocks == 0 {
            return Err(Error::Config(format!(
                "dense layer dims must be positive: in={}, out={}, blocks={}",
                self.in_dim, self.out_dim, self.blocks
            )));
        }
        if !self.in_dim.is_multiple_of(self.blocks) || !self.out_dim.is_multiple_of(self.blocks) {
            return Err(Error::Config(format!(
                "{} blocks do not divide in={} and out={}",
                self.blocks, self.in_dim, self.out_dim
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim / self.blocks + if self.bias { self.out_dim } else { 0 }
    }
}

/// Block count for an `in_dim → out_dim` kernel: `num_blocks` when both
/// widths reach `min_dim`, otherwise a full kernel.
pub fn blocks_for(in_dim: usize, out_dim: usize, num_blocks: usize, min_dim: usize) -> usize {
    if num_blocks > 1 && in_dim >= min_dim && out_dim >= min_dim {
        num_blocks
    } else {
        1
    }
}

/// `activation(x · kernel + bias)` with a full or block-diagonal kernel.
#[derive(Debug, Clone)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub kernel: Kernel,
    pub bias: Option<ParamId>,
    pub activation: Activation,
}

impl Dense {
    /// Registers `<name>.kernel` (and `<name>.bias`) in `store`.
    pub fn new<T: Real>(
        store: &mut ParameterStore<T>,
        name: &str,
        spec: &DenseSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_for(store.seed(), &format!("init/{name}.kernel"));
        let k = spec.blocks;
        let (bi, bo) = (spec.in_dim / k, spec.out_dim / k);
        let kernel = if k == 1 {
            let value = init_block(spec.init, bi, bo, &mut rng);
            Kernel::Full(store.add(format!("{name}.kernel"), value, true)?)
        } else {
            let mut data = Vec::with_capacity(k * bi * bo);
            for _ in 0..k {
                data.extend(init_block::<T>(spec.init, bi, bo, &mut rng).into_data());
            }
            let value = Tensor::new(vec![k, bi, bo], data)?;
            Kernel::BlockDiagonal {
                id: store.add(format!("{name}.kernel"), value, true)?,
                blocks: k,
            }
        };
        let bias = if spec.bias {
            Some(store.add(
                format!("{name}.bias"),
                Tensor::zeros(&[spec.out_dim]),
                false,
            )?)
        } else {
            None
        };
        Ok(Self {
            in_dim: spec.in_dim,
            out_dim: spec.out_dim,
            kernel,
            bias,
            activation: spec.activation,
        })
    }

    pub fn blocks(&self) -> usize {
        match self.kernel {
            Kernel::Full(_) => 1,
            Kernel::BlockDiagonal { blocks, .. } => blocks,
        }
    }

    pub fn kernel_id(&self) -> ParamId {
        match self.kernel {
            Kernel::Full(id) | Kernel::BlockDiagonal { id, .. } => id,
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim / self.blocks()
            + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    /// Affine map without the activation.
    pub fn linear<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.in_dim {
            return Err(Error::dim(
                "dense",
                g.shape(x),
                &[self.in_dim, self.out_dim],
            ));
        }
        let y = match self.kernel {
            Kernel::Full(id) => {
                let w = g.param(id);
                g.matmul(x, w)?
            }
            Kernel::BlockDiagonal { id, .. } => {
                let w = g.param(id);
                g.block_matmul(x, w)?
            }
        };
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.linear(g, x)?;
        Ok(self.activation.apply(g, y))
    }

    /// The kernel as a full `[in, out]` matrix, zeros off the diagonal blocks.
    pub fn expanded_kernel<T: Real>(&self, store: &ParameterStore<T>) -> Tensor<T> {
        match self.kernel {
            Kernel::Full(id) => store.value(id).clone(),
            Kernel::BlockDiagonal { id, blocks } => expand_block_diagonal(store.value(id), blocks),
        }
    }
}

/// Expands `[k, m, n]` blocks into the `[k·m, k·n]` block-diagonal matrix.
pub fn expand_block_diagonal<T: Real>(blocks: &Tensor<T>, k: usize) -> Tensor<T> {
    let (m, n) = (blocks.shape()[1], blocks.shape()[2]);
    let (rows, cols) = (k * m, k * n);
    let mut out = Tensor::zeros(&[rows, cols]);
    for b in 0..k {
        for i in 0..m {
            for j in 0..n {
                out.data_mut()[(b * m + i) * cols + b * n + j] = blocks.data()[(b * m + i) * n + j];
            }
        }
    }
    out
}

fn init_block<T: Real>(
    init: KernelInit,
    rows: usize,
    cols: usize,
    rng: &mut impl Rng,
) -> Tensor<T> {
    match init {
        KernelInit::GlorotUniform => glorot_uniform(&[rows, cols], rows, cols, rng),
        KernelInit::Orthogonal => orthogonal(rows, cols, rng),
    }
}

/// Inverted-dropout keep mask: kept entries hold `1 / (1 - rate)`, dropped
/// entries zero. The stream comes from `(seed, path)` alone.
pub fn dropout_mask<T: Real>(
    shape: &[usize],
    rate: f64,
    seed: u64,
    path: &str,
) -> Result<Tensor<T>> {
    check_rate(rate)?;
    let mut rng = rng_for(seed, path);
    let keep = T::of(1.0 / (1.0 - rate));
    Ok(Tensor::from_fn(shape, |_| {
        if rng.random::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    }))
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

/// Where dropout draws its randomness from during a training forward pass.
#[derive(Debug, Clone)]
pub struct DropoutSite {
    pub seed: u64,
    pub path: String,
}

/// Identity unless `site` is given (training) and `rate > 0`.
pub fn dropout<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    rate: f64,
    site: Option<&DropoutSite>,
) -> Result<Var> {
    check_rate(rate)?;
    match site {
        Some(site) if rate > 0.0 => {
            let mask = dropout_mask(g.shape(x), rate, site.seed, &site.path)?;
            g.mul_const(x, mask)
        }
        _ => Ok(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOptions};

    pub(super) fn random_input(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rng_for(seed, "x");
        Tensor::from_fn(&[rows, cols], |_| rng.random_range(-1.0..1.0))
    }

    fn run(store: &ParameterStore<f64>, layer: &Dense, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new(store);
        let xv = g.input(x.clone());
        let y = layer.forward(&mut g, xv).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut store = ParameterStore::<f64>::new(0);
        let layer = Dense::new(&mut store, "d", &DenseSpec::new(3, 3)).unwrap();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        store.get_mut(layer.kernel_id()).value = eye;
        let x = random_input(2, 3, 1);
        assert_eq!(run(&store, &layer, &x), x);
    }

    #[test]
    fn zero_kernel_yields_bias_rows() {
        let mut store = ParameterStore::<f64>::new(0);
        let layer = Dense::new(&mut store, "d", &DenseSpec::new(3, 2)).unwrap();
        store.get_mut(layer.kernel_id()).value = Tensor::zeros(&[3, 2]);
        store.get_mut(layer.bias.unwrap()).value = Tensor::from_fn(&[2], |i| i as f64 + 0.5);
        let out = run(&store, &layer, &random_input(4, 3, 2));
        for r in 0..4 {
            assert_eq!(out.row(r), &[0.5, 1.5]);
        }
    }

    #[test]
    fn dense_matches_loop_oracle() {
        let mut store = ParameterStore::<f64>::new(5);
        let spec = DenseSpec::new(5, 3).activation(Activation::Tanh);
        let layer = Dense::new(&mut store, "d", &spec).unwrap();
        store.get_mut(layer.bias.unwrap()).value = Tensor::from_fn(&[3], |i| 0.1 * i as f64);
        let x = random_input(4, 5, 3);
        let w = store.value(layer.kernel_id()).clone();
        let b = store.value(layer.bias.unwrap()).clone();
        let out = run(&store, &layer, &x);
        for r in 0..4 {
            for c in 0..3 {
                let mut s = b.data()[c];
                for i in 0..5 {
                    s += x.at(r, i) * w.at(i, c);
                }
                assert!((out.at(r, c) - s.tanh()).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn indivisible_blocks_fail_at_construction() {
        let mut store = ParameterStore::<f64>::new(0);
        let err = Dense::new(&mut store, "d", &DenseSpec::new(6, 4).blocks(4)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(store.is_empty());
    }

    #[test]
    fn single_block_equals_full_dense() {
        let mut store = ParameterStore::<f64>::new(9);
        let full = Dense::new(&mut store, "full", &DenseSpec::new(4, 6)).unwrap();
        let mut bstore = ParameterStore::<f64>::new(9);
        // blocks(1) is stored as a full kernel; build an explicit [1, 4, 6] block instead.
        let blocked = Dense {
            in_dim: 4,
            out_dim: 6,
            kernel: Kernel::BlockDiagonal {
                id: bstore
                    .add(
                        "w",
                        store
                            .value(full.kernel_id())
                            .clone()
                            .reshape(&[1, 4, 6])
                            .unwrap(),
                        true,
                    )
                    .unwrap(),
                blocks: 1,
            },
            bias: Some(
                bstore
                    .add("b", store.value(full.bias.unwrap()).clone(), false)
                    .unwrap(),
            ),
            activation: Activation::None,
        };
        let x = random_input(3, 4, 4);
        assert_eq!(run(&store, &full, &x), run(&bstore, &blocked, &x));
    }

    #[test]
    fn two_block_hand_case_matches_expanded_kernel() {
        let mut store = ParameterStore::<f64>::new(0);
        let layer = Dense::new(&mut store, "b", &DenseSpec::new(4, 4).blocks(2)).unwrap();
        // W1 = [[1,2],[3,4]], W2 = [[5,6],[7,8]]
        store.get_mut(layer.kernel_id()).value =
            Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let x = Tensor::from_rows(&[&[1.0, -1.0, 2.0, 0.5]]);
        let out = run(&store, &layer, &x);
        // [x1 W1, x2 W2] = [1-3, 2-4, 10+3.5, 12+4]
        assert_eq!(out.data(), &[-2.0, -2.0, 13.5, 16.0]);
        let expanded = layer.expanded_kernel(&store);
        assert_eq!(
            expanded.data(),
            &[
                1.0, 2.0, 0.0, 0.0, //
                3.0, 4.0, 0.0, 0.0, //
                0.0, 0.0, 5.0, 6.0, //
                0.0, 0.0, 7.0, 8.0,
            ]
        );
        assert_eq!(x.matmul(&expanded).unwrap(), out);
    }

    #[test]
    fn block_param_count() {
        let spec = DenseSpec::new(512, 512).blocks(8);
        assert_eq!(spec.param_count(), 33280);
        assert_eq!(DenseSpec::new(512, 512).param_count(), 262656);
    }

    #[test]
    fn layer_gradients_pass_grad_check() {
        for blocks in [1, 2, 4] {
            let mut store = ParameterStore::<f64>::new(11);
            let spec = DenseSpec::new(8, 12)
                .blocks(blocks)
                .activation(Activation::Sigmoid);
            let layer = Dense::new(&mut store, "l", &spec).unwrap();
            store.get_mut(layer.bias.unwrap()).value = Tensor::from_fn(&[12], |i| 0.05 * i as f64);
            let x = random_input(3, 8, 12);
            let w = random_input(3, 12, 13);
            let f = |g: &mut Graph<'_, f64>| {
                let xv = g.input(x.clone());
                let y = layer.forward(g, xv)?;
                let weighted = g.mul_const(y, w.clone())?;
                Ok(g.sum(weighted))
            };
            let report = grad_check(&store, f, &GradCheckOptions::default()).unwrap();
            assert!(
                report.max_relative_error < 1e-6,
                "blocks={blocks}: {report:?}"
            );
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let store = ParameterStore::<f64>::new(0);
        let mut g = Graph::new(&store);
        let x = g.input(random_input(3, 3, 0));
        let site = DropoutSite {
            seed: 1,
            path: "p".into(),
        };
        assert_eq!(dropout(&mut g, x, 0.0, Some(&site)).unwrap(), x);
        assert_eq!(dropout(&mut g, x, 0.7, None).unwrap(), x);
        assert!(dropout(&mut g, x, 1.0, None).is_err());
        assert!(dropout(&mut g, x, -0.1, Some(&site)).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let n = 100_000;
        let mask = dropout_mask::<f64>(&[n], 0.5, 42, "stats").unwrap();
        let kept = mask.data().iter().filter(|&&m| m > 0.0).count() as f64 / n as f64;
        assert!((kept - 0.5).abs() < 0.01, "kept {kept}");
        // E[mask · x] = E[x] for x = 1.
        let mean = mask.sum() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }
}
