//! Causal multi-head self-attention transformer (pre-norm blocks).
//!
//! Operates on an already-embedded token matrix of shape `T x d_model`;
//! embedding lookup and positional offsets belong to the caller. The causal
//! mask is structural: position `t` attends to positions `0..=t` only, so
//! output row `t` is a function of input rows `0..=t` and nothing later.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::layers::{Activation, LayerNorm, LayerNormCache, Linear, LinearCache};
use crate::numerics::matrix::Matrix;
use crate::numerics::param::Param;
use crate::numerics::scalar::Scalar;

/// Shape of a [`CausalTransformer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Feed-forward hidden width as a multiple of `d_model`.
    pub ff_multiplier: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.ff_multiplier == 0
        {
            return Err(Error::Config(format!(
                "transformer dims must be positive: {self:?}"
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// One pre-norm block: `x + attn(ln1(x))` followed by `· + ff(ln2(·))`.
#[derive(Debug, Clone)]
struct Block<S: Scalar = f32> {
    ln1: LayerNorm<S>,
    wq: Linear<S>,
    wk: Linear<S>,
    wv: Linear<S>,
    wo: Linear<S>,
    ln2: LayerNorm<S>,
    ff1: Linear<S>,
    ff2: Linear<S>,
    n_heads: usize,
}

/// Everything a block's backward pass needs from its forward pass.
#[derive(Debug, Clone)]
struct BlockCache<S: Scalar = f32> {
    ln1: LayerNormCache<S>,
    q_cache: LinearCache<S>,
    k_cache: LinearCache<S>,
    v_cache: LinearCache<S>,
    q: Matrix<S>,
    k: Matrix<S>,
    v: Matrix<S>,
    /// Per-head attention probabilities, `T x T`, zero above the diagonal.
    probs: Vec<Matrix<S>>,
    o_cache: LinearCache<S>,
    ln2: LayerNormCache<S>,
    ff1_cache: LinearCache<S>,
    ff2_cache: LinearCache<S>,
}

impl<S: Scalar> Block<S> {
    fn new(name: &str, cfg: &TransformerConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let ff = d * cfg.ff_multiplier;
        Block {
            ln1: LayerNorm::new(&format!("{name}/ln1"), d),
            wq: Linear::new(&format!("{name}/wq"), d, d, Activation::Identity, rng),
            wk: Linear::new(&format!("{name}/wk"), d, d, Activation::Identity, rng),
            wv: Linear::new(&format!("{name}/wv"), d, d, Activation::Identity, rng),
            wo: Linear::new(&format!("{name}/wo"), d, d, Activation::Identity, rng),
            ln2: LayerNorm::new(&format!("{name}/ln2"), d),
            ff1: Linear::new(&format!("{name}/ff1"), d, ff, Activation::Relu, rng),
            ff2: Linear::new(&format!("{name}/ff2"), ff, d, Activation::Identity, rng),
            n_heads: cfg.n_heads,
        }
    }

    fn forward_cached(&self, x: &Matrix<S>) -> Result<(Matrix<S>, BlockCache<S>)> {
        let t = x.rows();
        let d = x.cols();
        let head_dim = d / self.n_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let (a, ln1_cache) = self.ln1.forward_cached(x)?;
        let (q, q_cache) = self.wq.forward_cached(&a)?;
        let (k, k_cache) = self.wk.forward_cached(&a)?;
        let (v, v_cache) = self.wv.forward_cached(&a)?;

        let mut ctx = Matrix::zeros(t, d);
        let mut probs = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let q_h = q.col_block(h * head_dim, head_dim)?;
            let k_h = k.col_block(h * head_dim, head_dim)?;
            let v_h = v.col_block(h * head_dim, head_dim)?;

            // Causal row softmax over scaled dot products, in f64.
            let mut p_h = Matrix::<S>::zeros(t, t);
            for i in 0..t {
                let q_row = q_h.row(i);
                let mut scores = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    let k_row = k_h.row(j);
                    let mut acc = 0f64;
                    for (&qq, &kk) in q_row.iter().zip(k_row.iter()) {
                        acc += qq.to_f64() * kk.to_f64();
                    }
                    scores.push(acc * scale);
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0f64;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                for (j, &e) in scores.iter().enumerate() {
                    p_h.set(i, j, S::from_f64(e / denom));
                }
            }

            let ctx_h = p_h.matmul(&v_h)?;
            ctx.set_col_block(h * head_dim, &ctx_h)?;
            probs.push(p_h);
        }

        let (o, o_cache) = self.wo.forward_cached(&ctx)?;
        let x1 = x.add(&o)?;
        let (b, ln2_cache) = self.ln2.forward_cached(&x1)?;
        let (f1, ff1_cache) = self.ff1.forward_cached(&b)?;
        let (f2, ff2_cache) = self.ff2.forward_cached(&f1)?;
        let out = x1.add(&f2)?;
        out.ensure_finite("transformer block output")?;

        Ok((
            out,
            BlockCache {
                ln1: ln1_cache,
                q_cache,
                k_cache,
                v_cache,
                q,
                k,
                v,
                probs,
                o_cache,
                ln2: ln2_cache,
                ff1_cache,
                ff2_cache,
            },
        ))
    }

    fn backward(&mut self, cache: &BlockCache<S>, d_out: &Matrix<S>) -> Result<Matrix<S>> {
        let t = d_out.rows();
        let d = d_out.cols();
        let head_dim = d / self.n_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        // Feed-forward sub-block: out = x1 + ff2(ff1(ln2(x1))).
        let d_f1 = self.ff2.backward(&cache.ff2_cache, d_out)?;
        let d_b = self.ff1.backward(&cache.ff1_cache, &d_f1)?;
        let mut d_x1 = d_out.clone();
        d_x1.add_assign(&self.ln2.backward(&cache.ln2, &d_b)?)?;

        // Attention sub-block: x1 = x + wo(ctx).
        let d_ctx = self.wo.backward(&cache.o_cache, &d_x1)?;
        let mut dx = d_x1; // residual path straight to the input

        let mut dq = Matrix::zeros(t, d);
        let mut dk = Matrix::zeros(t, d);
        let mut dv = Matrix::zeros(t, d);
        for h in 0..self.n_heads {
            let p_h = &cache.probs[h];
            let v_h = cache.v.col_block(h * head_dim, head_dim)?;
            let q_h = cache.q.col_block(h * head_dim, head_dim)?;
            let k_h = cache.k.col_block(h * head_dim, head_dim)?;
            let d_ctx_h = d_ctx.col_block(h * head_dim, head_dim)?;

            let dp = d_ctx_h.matmul_a_bt(&v_h)?;
            let dv_h = p_h.matmul_at_b(&d_ctx_h)?;

            // Softmax backward, restricted to the causal triangle:
            // ds[i][j] = p[i][j] * (dp[i][j] - sum_{k<=i} p[i][k] dp[i][k]).
            let mut ds = Matrix::<S>::zeros(t, t);
            for i in 0..t {
                let mut dot = 0f64;
                for j in 0..=i {
                    dot += p_h.get(i, j).to_f64() * dp.get(i, j).to_f64();
                }
                for j in 0..=i {
                    let val = p_h.get(i, j).to_f64() * (dp.get(i, j).to_f64() - dot) * scale;
                    ds.set(i, j, S::from_f64(val));
                }
            }

            let dq_h = ds.matmul(&k_h)?;
            let dk_h = ds.matmul_at_b(&q_h)?;
            dq.set_col_block(h * head_dim, &dq_h)?;
            dk.set_col_block(h * head_dim, &dk_h)?;
            dv.set_col_block(h * head_dim, &dv_h)?;
        }

        let mut da = self.wq.backward(&cache.q_cache, &dq)?;
        da.add_assign(&self.wk.backward(&cache.k_cache, &dk)?)?;
        da.add_assign(&self.wv.backward(&cache.v_cache, &dv)?)?;
        dx.add_assign(&self.ln1.backward(&cache.ln1, &da)?)?;
        Ok(dx)
    }

    fn params(&self) -> Vec<&Param<S>> {
        let mut out = self.ln1.params();
        out.extend(self.wq.params());
        out.extend(self.wk.params());
        out.extend(self.wv.params());
        out.extend(self.wo.params());
        out.extend(self.ln2.params());
        out.extend(self.ff1.params());
        out.extend(self.ff2.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut out = self.ln1.params_mut();
        out.extend(self.wq.params_mut());
        out.extend(self.wk.params_mut());
        out.extend(self.wv.params_mut());
        out.extend(self.wo.params_mut());
        out.extend(self.ln2.params_mut());
        out.extend(self.ff1.params_mut());
        out.extend(self.ff2.params_mut());
        out
    }
}

/// Stack of causal pre-norm transformer blocks.
#[derive(Debug, Clone)]
pub struct CausalTransformer<S: Scalar = f32> {
    config: TransformerConfig,
    blocks: Vec<Block<S>>,
}

/// Opaque cache returned by [`CausalTransformer::forward_cached`].
#[derive(Debug, Clone)]
pub struct TransformerCache<S: Scalar = f32> {
    blocks: Vec<BlockCache<S>>,
}

impl<S: Scalar> CausalTransformer<S> {
    pub fn new(config: TransformerConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.n_layers)
            .map(|i| Block::new(&format!("blk/{i}"), &config, rng))
            .collect();
        Ok(CausalTransformer { config, blocks })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    /// Forward over a `T x d_model` token matrix.
    pub fn forward(&self, tokens: &Matrix<S>) -> Result<Matrix<S>> {
        Ok(self.forward_cached(tokens)?.0)
    }

    pub fn forward_cached(&self, tokens: &Matrix<S>) -> Result<(Matrix<S>, TransformerCache<S>)> {
        if tokens.cols() != self.config.d_model {
            return Err(Error::shape(
                "transformer input",
                format!("{} cols", self.config.d_model),
                format!("{}", tokens.cols()),
            ));
        }
        if tokens.rows() == 0 {
            return Err(Error::EmptyHistory(
                "transformer got an empty token sequence".to_string(),
            ));
        }
        let mut h = tokens.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward_cached(&h)?;
            caches.push(cache);
            h = next;
        }
        Ok((h, TransformerCache { blocks: caches }))
    }

    /// Backward through the full stack; returns `dL/d tokens`.
    pub fn backward(&mut self, cache: &TransformerCache<S>, d_out: &Matrix<S>) -> Result<Matrix<S>> {
        let mut d = d_out.clone();
        for (block, block_cache) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            d = block.backward(block_cache, &d)?;
        }
        Ok(d)
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        self.blocks.iter().flat_map(Block::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        self.blocks.iter_mut().flat_map(Block::params_mut).collect()
    }
}
