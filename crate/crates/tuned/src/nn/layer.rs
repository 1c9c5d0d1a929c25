//! Dense layers with explicit forward and backward passes.

use super::rng::SeededRng;
use super::tensor::Tensor2D;
use crate::error::{Error, Result};

/// Element-wise activation applied after the affine transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative evaluated at the pre-activation value.
    #[inline]
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(pre),
        }
    }
}

/// Overflow-safe softplus: `max(x, 0) + log1p(exp(-|x|))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Dense layer: `output = activation(input * W + b)`.
///
/// Weights are `in_dim x out_dim`, so a batch of row vectors multiplies from
/// the left.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor2D,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Values captured by a forward pass and consumed by `backward`. Holding
/// gradients next to their cache makes "backward before forward"
/// unrepresentable.
#[derive(Debug, Clone)]
pub struct DenseCache {
    input: Tensor2D,
    pre: Tensor2D,
}

/// Gradients produced by a dense backward pass.
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Tensor2D,
    pub weights: Tensor2D,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(weights: Tensor2D, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(Error::contract(
                "DenseLayer::new",
                format!(
                    "bias length {} does not match out_dim {}",
                    bias.len(),
                    weights.cols()
                ),
            ));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// Xavier-uniform initialization.
    pub fn xavier(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut SeededRng,
    ) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        Self {
            weights: Tensor2D::new(in_dim, out_dim, data).expect("sized above"),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }

    /// Forward pass that captures the cache needed for `backward`.
    pub fn forward(&self, input: &Tensor2D) -> Result<(Tensor2D, DenseCache)> {
        let pre = self.affine(input)?;
        let out = pre.map(|z| self.activation.apply(z));
        Ok((
            out,
            DenseCache {
                input: input.clone(),
                pre,
            },
        ))
    }

    /// Forward pass without caching, for frozen-model evaluation.
    pub fn infer(&self, input: &Tensor2D) -> Result<Tensor2D> {
        Ok(self.affine(input)?.map(|z| self.activation.apply(z)))
    }

    fn affine(&self, input: &Tensor2D) -> Result<Tensor2D> {
        if input.cols() != self.in_dim() {
            return Err(Error::shape(
                "dense_forward",
                input.shape(),
                self.weights.shape(),
            ));
        }
        let mut pre = input.matmul(&self.weights)?;
        for r in 0..pre.rows() {
            for (v, b) in pre.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(pre)
    }

    /// Backward pass. `upstream` is dL/d(output) for the cached batch.
    pub fn backward(&self, cache: &DenseCache, upstream: &Tensor2D) -> Result<DenseGrads> {
        if upstream.shape() != cache.pre.shape() {
            return Err(Error::shape(
                "dense_backward",
                upstream.shape(),
                cache.pre.shape(),
            ));
        }
        // dZ = upstream ⊙ activation'(pre)
        let mut dz = upstream.clone();
        for (g, &z) in dz.data_mut().iter_mut().zip(cache.pre.data()) {
            *g *= self.activation.derivative(z);
        }
        let input_grad = dz.matmul(&self.weights.transpose())?;
        let weight_grad = cache.input.transpose().matmul(&dz)?;
        let bias_grad = dz.col_sums();
        Ok(DenseGrads {
            input: input_grad,
            weights: weight_grad,
            bias: bias_grad,
        })
    }
}
