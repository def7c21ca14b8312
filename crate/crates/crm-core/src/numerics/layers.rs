//! Feed-forward building blocks: linear layers, MLPs, layer norm, and row
//! L2 normalization — each with a hand-written backward pass.
//!
//! Forward passes come in two flavors: `forward` for inference and
//! `forward_cached`, which additionally returns the cache the matching
//! `backward` needs. Backward passes *accumulate* into parameter gradients
//! and return the gradient with respect to the input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::param::Param;
use crate::numerics::scalar::Scalar;

/// Elementwise activation applied after a linear map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn apply<S: Scalar>(self, m: &mut Matrix<S>) {
        if self == Activation::Relu {
            for v in m.data_mut() {
                if *v < S::ZERO {
                    *v = S::ZERO;
                }
            }
        }
    }

    /// Multiply `grad` by the activation derivative evaluated at
    /// `pre` (the pre-activation values).
    fn mask_grad<S: Scalar>(self, grad: &mut Matrix<S>, pre: &Matrix<S>) {
        if self == Activation::Relu {
            for (g, &p) in grad.data_mut().iter_mut().zip(pre.data().iter()) {
                if p <= S::ZERO {
                    *g = S::ZERO;
                }
            }
        }
    }
}

/// Fully connected layer `y = act(x W + b)`.
#[derive(Debug, Clone)]
pub struct Linear<S: Scalar = f32> {
    pub weight: Param<S>,
    pub bias: Param<S>,
    pub activation: Activation,
}

/// Values stashed by [`Linear::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LinearCache<S: Scalar = f32> {
    x: Matrix<S>,
    pre: Matrix<S>,
}

impl<S: Scalar> Linear<S> {
    /// He-style initialization: weight std `sqrt(2/in)` for ReLU layers,
    /// `sqrt(1/in)` otherwise; biases start at zero.
    pub fn new(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let gain = match activation {
            Activation::Relu => 2.0,
            Activation::Identity => 1.0,
        };
        let std = (gain / in_dim as f64).sqrt();
        Linear {
            weight: Param::new(format!("{name}/w"), Matrix::randn(in_dim, out_dim, std, rng)),
            bias: Param::new(format!("{name}/b"), Matrix::zeros(1, out_dim)),
            activation,
        }
    }

    /// Rebuild a layer from restored parameters (checkpoint loading).
    pub fn from_params(weight: Param<S>, bias: Param<S>, activation: Activation) -> Result<Self> {
        if bias.value.rows() != 1 || bias.value.cols() != weight.value.cols() {
            return Err(Error::shape(
                format!("bias of '{}'", weight.name()),
                format!("1x{}", weight.value.cols()),
                format!("{}x{}", bias.value.rows(), bias.value.cols()),
            ));
        }
        Ok(Linear {
            weight,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &Matrix<S>) -> Result<Matrix<S>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Matrix<S>) -> Result<(Matrix<S>, LinearCache<S>)> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(
                format!("input of '{}'", self.weight.name()),
                format!("{} cols", self.in_dim()),
                format!("{}", x.cols()),
            ));
        }
        let mut pre = x.matmul(&self.weight.value)?;
        pre.add_row_broadcast(self.bias.value.row(0))?;
        let mut y = pre.clone();
        self.activation.apply(&mut y);
        let cache = LinearCache { x: x.clone(), pre };
        Ok((y, cache))
    }

    /// Backward through the layer: accumulates weight/bias gradients and
    /// returns `dL/dx`.
    pub fn backward(&mut self, cache: &LinearCache<S>, dy: &Matrix<S>) -> Result<Matrix<S>> {
        let mut dpre = dy.clone();
        self.activation.mask_grad(&mut dpre, &cache.pre);
        let dw = cache.x.matmul_at_b(&dpre)?;
        self.weight.accumulate_grad(&dw)?;
        let db = Matrix::from_vec(1, dpre.cols(), dpre.col_sums())?;
        self.bias.accumulate_grad(&db)?;
        dpre.matmul_a_bt(&self.weight.value)
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Stack of [`Linear`] layers: ReLU between layers, identity on the last.
#[derive(Debug, Clone)]
pub struct Mlp<S: Scalar = f32> {
    name: String,
    pub layers: Vec<Linear<S>>,
}

/// Per-layer caches from [`Mlp::forward_cached`].
#[derive(Debug, Clone)]
pub struct MlpCache<S: Scalar = f32> {
    layers: Vec<LinearCache<S>>,
}

impl<S: Scalar> Mlp<S> {
    /// `sizes` lists the layer widths including input and output, e.g.
    /// `[64, 64, 32]` builds a 64→64 ReLU layer followed by 64→32 identity.
    pub fn new(name: &str, sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config(format!(
                "mlp '{name}' needs at least input and output sizes, got {sizes:?}"
            )));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for i in 0..sizes.len() - 1 {
            let act = if i + 2 == sizes.len() {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(Linear::new(
                &format!("{name}/{i}"),
                sizes[i],
                sizes[i + 1],
                act,
                rng,
            ));
        }
        Ok(Mlp {
            name: name.to_string(),
            layers,
        })
    }

    /// Rebuild an MLP from restored layers (checkpoint loading). Verifies
    /// that consecutive layer widths line up.
    pub fn from_layers(name: &str, layers: Vec<Linear<S>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config(format!("mlp '{name}' needs at least one layer")));
        }
        for i in 1..layers.len() {
            if layers[i - 1].out_dim() != layers[i].in_dim() {
                return Err(Error::shape(
                    format!("mlp '{name}' layer {i} input"),
                    format!("{}", layers[i - 1].out_dim()),
                    format!("{}", layers[i].in_dim()),
                ));
            }
        }
        Ok(Mlp {
            name: name.to_string(),
            layers,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty mlp").out_dim()
    }

    pub fn forward(&self, x: &Matrix<S>) -> Result<Matrix<S>> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?;
        }
        h.ensure_finite(&format!("output of mlp '{}'", self.name))?;
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Matrix<S>) -> Result<(Matrix<S>, MlpCache<S>)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = layer.forward_cached(&h)?;
            caches.push(cache);
            h = next;
        }
        h.ensure_finite(&format!("output of mlp '{}'", self.name))?;
        Ok((h, MlpCache { layers: caches }))
    }

    pub fn backward(&mut self, cache: &MlpCache<S>, dy: &Matrix<S>) -> Result<Matrix<S>> {
        let mut d = dy.clone();
        for (layer, layer_cache) in self.layers.iter_mut().zip(cache.layers.iter()).rev() {
            d = layer.backward(layer_cache, &d)?;
        }
        Ok(d)
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        self.layers.iter().flat_map(Linear::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.layers
            .iter_mut()
            .flat_map(Linear::params_mut)
            .collect()
    }
}

/// Per-row layer normalization with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm<S: Scalar = f32> {
    pub gain: Param<S>,
    pub bias: Param<S>,
    eps: f64,
}

/// Cache for [`LayerNorm::backward`]: normalized rows and per-row inverse
/// standard deviations.
#[derive(Debug, Clone)]
pub struct LayerNormCache<S: Scalar = f32> {
    normalized: Matrix<S>,
    inv_std: Vec<f64>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(name: &str, dim: usize) -> Self {
        let mut gain = Matrix::zeros(1, dim);
        gain.row_mut(0).iter_mut().for_each(|v| *v = S::ONE);
        LayerNorm {
            gain: Param::new(format!("{name}/g"), gain),
            bias: Param::new(format!("{name}/b"), Matrix::zeros(1, dim)),
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.value.cols()
    }

    pub fn forward_cached(&self, x: &Matrix<S>) -> Result<(Matrix<S>, LayerNormCache<S>)> {
        if x.cols() != self.dim() {
            return Err(Error::shape(
                format!("input of '{}'", self.gain.name()),
                format!("{} cols", self.dim()),
                format!("{}", x.cols()),
            ));
        }
        let d = x.cols() as f64;
        let mut normalized = Matrix::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        let mut y = Matrix::zeros(x.rows(), x.cols());
        let gain = self.gain.value.row(0);
        let bias = self.bias.value.row(0);
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d;
            let var = row
                .iter()
                .map(|v| {
                    let c = v.to_f64() - mean;
                    c * c
                })
                .sum::<f64>()
                / d;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std.push(is);
            for j in 0..x.cols() {
                let xn = (row[j].to_f64() - mean) * is;
                normalized.set(r, j, S::from_f64(xn));
                y.set(
                    r,
                    j,
                    S::from_f64(xn * gain[j].to_f64() + bias[j].to_f64()),
                );
            }
        }
        Ok((y, LayerNormCache { normalized, inv_std }))
    }

    pub fn backward(&mut self, cache: &LayerNormCache<S>, dy: &Matrix<S>) -> Result<Matrix<S>> {
        let (rows, cols) = dy.shape();
        let d = cols as f64;
        let mut dx = Matrix::zeros(rows, cols);
        let mut dgain = vec![0f64; cols];
        let mut dbias = vec![0f64; cols];
        let gain = self.gain.value.row(0);
        for r in 0..rows {
            let dy_row = dy.row(r);
            let xn_row = cache.normalized.row(r);
            // Gradient w.r.t. the normalized values.
            let dxn: Vec<f64> = dy_row
                .iter()
                .zip(gain.iter())
                .map(|(&g, &w)| g.to_f64() * w.to_f64())
                .collect();
            let mean_dxn = dxn.iter().sum::<f64>() / d;
            let mean_dxn_xn = dxn
                .iter()
                .zip(xn_row.iter())
                .map(|(&a, &b)| a * b.to_f64())
                .sum::<f64>()
                / d;
            for j in 0..cols {
                let xn = xn_row[j].to_f64();
                dgain[j] += dy_row[j].to_f64() * xn;
                dbias[j] += dy_row[j].to_f64();
                let v = (dxn[j] - mean_dxn - xn * mean_dxn_xn) * cache.inv_std[r];
                dx.set(r, j, S::from_f64(v));
            }
        }
        self.gain.accumulate_grad(&Matrix::from_vec(
            1,
            cols,
            dgain.into_iter().map(S::from_f64).collect(),
        )?)?;
        self.bias.accumulate_grad(&Matrix::from_vec(
            1,
            cols,
            dbias.into_iter().map(S::from_f64).collect(),
        )?)?;
        Ok(dx)
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        vec![&self.gain, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        vec![&mut self.gain, &mut self.bias]
    }
}

/// Cache for [`l2_normalize_rows`]: the raw input and per-row norms.
#[derive(Debug, Clone)]
pub struct L2NormCache<S: Scalar = f32> {
    x: Matrix<S>,
    norms: Vec<f64>,
}

/// Normalize each row to unit Euclidean length (epsilon-guarded).
///
/// Returns the normalized matrix and the cache for
/// [`l2_normalize_rows_backward`].
pub fn l2_normalize_rows<S: Scalar>(x: &Matrix<S>) -> (Matrix<S>, L2NormCache<S>) {
    const EPS: f64 = 1e-12;
    let mut y = Matrix::zeros(x.rows(), x.cols());
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let sq: f64 = row.iter().map(|v| v.to_f64() * v.to_f64()).sum();
        let norm = (sq + EPS).sqrt();
        norms.push(norm);
        for j in 0..x.cols() {
            y.set(r, j, S::from_f64(row[j].to_f64() / norm));
        }
    }
    (
        y,
        L2NormCache {
            x: x.clone(),
            norms,
        },
    )
}

/// Backward for [`l2_normalize_rows`]:
/// `dx = dy / s - x * (x . dy) / s^3` per row, with `s` the guarded norm.
pub fn l2_normalize_rows_backward<S: Scalar>(
    cache: &L2NormCache<S>,
    dy: &Matrix<S>,
) -> Result<Matrix<S>> {
    if dy.shape() != cache.x.shape() {
        return Err(Error::shape(
            "l2_normalize_rows_backward",
            format!("{}x{}", cache.x.rows(), cache.x.cols()),
            format!("{}x{}", dy.rows(), dy.cols()),
        ));
    }
    let mut dx = Matrix::zeros(dy.rows(), dy.cols());
    for r in 0..dy.rows() {
        let x_row = cache.x.row(r);
        let dy_row = dy.row(r);
        let s = cache.norms[r];
        let dot: f64 = x_row
            .iter()
            .zip(dy_row.iter())
            .map(|(&a, &b)| a.to_f64() * b.to_f64())
            .sum();
        for j in 0..dy.cols() {
            let v = dy_row[j].to_f64() / s - x_row[j].to_f64() * dot / (s * s * s);
            dx.set(r, j, S::from_f64(v));
        }
    }
    Ok(dx)
}
