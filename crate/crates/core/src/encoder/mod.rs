//! Contextual token encoder.
//!
//! ```text
//! x0 = E[token] + P[pos]
//! x  = x + Attn(LN1(x))      (per block, pre-norm, bidirectional)
//! x  = x + FF(LN2(x))        FF = W2 gelu(W1 x + b1) + b2
//! g  = x Wr + br             (reduction to the output dimension D)
//! ```
//!
//! Backward passes are written out by hand and cover every parameter
//! tensor; `gradcheck` compares them against central differences.

mod gradcheck;
pub mod layers;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::ParamSet;
use crate::{Error, Real, Result};
use layers::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_rows, softmax_rows_backward,
    LayerNormCache,
};

pub use gradcheck::{grad_check, LinearProbe, LossProbe, QuadraticProbe};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Number of self-attention blocks; 0 gives a bag-of-embeddings encoder.
    pub blocks: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub output_dim: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 3,
            embed_dim: 64,
            blocks: 1,
            heads: 4,
            ff_dim: 256,
            output_dim: 32,
            max_len: 512,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.output_dim == 0 || self.ff_dim == 0 || self.max_len == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config("vocab_size must cover the reserved ids".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gain: Array1<T>,
    pub ln1_bias: Array1<T>,
    pub query: Array2<T>,
    pub key: Array2<T>,
    pub value: Array2<T>,
    pub output: Array2<T>,
    pub ln2_gain: Array1<T>,
    pub ln2_bias: Array1<T>,
    pub ff1_weight: Array2<T>,
    pub ff1_bias: Array1<T>,
    pub ff2_weight: Array2<T>,
    pub ff2_bias: Array1<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub token_embedding: Array2<T>,
    /// Fixed sinusoidal table, not trained and not serialized. Empty in
    /// gradient structures.
    pub positions: Array2<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub reduce_weight: Array2<T>,
    pub reduce_bias: Array1<T>,
}

fn uniform<T: Real>(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || T::lit(rng.random_range(-scale..scale)))
}

/// `P[p, 2i] = sin(p / 10000^(2i/E))`, `P[p, 2i+1] = cos(...)`.
pub fn sinusoidal_positions<T: Real>(max_len: usize, dim: usize) -> Array2<T> {
    Array2::from_shape_fn((max_len, dim), |(p, j)| {
        let i = (j / 2) as f64;
        let angle = p as f64 / 10000f64.powf(2.0 * i / dim as f64);
        T::lit(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

impl<T: Real> EncoderParams<T> {
    /// Uniform(-a, a) with `a = 1/sqrt(fan_in)` for every weight matrix. An
    /// embedding lookup is a one-hot product, so its fan-in is 1. Layer
    /// norm gains start at 1, all biases at 0.
    pub fn init(config: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let e = config.embed_dim;
        let f = config.ff_dim;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let token_embedding = uniform(config.vocab_size, e, 1.0, rng);
        let blocks = (0..config.blocks)
            .map(|_| BlockParams {
                ln1_gain: Array1::ones(e),
                ln1_bias: Array1::zeros(e),
                query: uniform(e, e, inv(e), rng),
                key: uniform(e, e, inv(e), rng),
                value: uniform(e, e, inv(e), rng),
                output: uniform(e, e, inv(e), rng),
                ln2_gain: Array1::ones(e),
                ln2_bias: Array1::zeros(e),
                ff1_weight: uniform(e, f, inv(e), rng),
                ff1_bias: Array1::zeros(f),
                ff2_weight: uniform(f, e, inv(f), rng),
                ff2_bias: Array1::zeros(e),
            })
            .collect();
        Self {
            token_embedding,
            positions: sinusoidal_positions(config.max_len, e),
            blocks,
            reduce_weight: uniform(e, config.output_dim, inv(e), rng),
            reduce_bias: Array1::zeros(config.output_dim),
        }
    }

    /// Zero-valued structure with the trainable layout of `self`.
    pub fn zeros_like(&self) -> Self {
        let z2 = |a: &Array2<T>| Array2::zeros(a.raw_dim());
        let z1 = |a: &Array1<T>| Array1::zeros(a.raw_dim());
        Self {
            token_embedding: z2(&self.token_embedding),
            positions: Array2::zeros((0, self.positions.ncols())),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1_gain: z1(&b.ln1_gain),
                    ln1_bias: z1(&b.ln1_bias),
                    query: z2(&b.query),
                    key: z2(&b.key),
                    value: z2(&b.value),
                    output: z2(&b.output),
                    ln2_gain: z1(&b.ln2_gain),
                    ln2_bias: z1(&b.ln2_bias),
                    ff1_weight: z2(&b.ff1_weight),
                    ff1_bias: z1(&b.ff1_bias),
                    ff2_weight: z2(&b.ff2_weight),
                    ff2_bias: z1(&b.ff2_bias),
                })
                .collect(),
            reduce_weight: z2(&self.reduce_weight),
            reduce_bias: z1(&self.reduce_bias),
        }
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        let c2 = |a: &Array2<T>| a.mapv(|v| U::lit(v.as_f64()));
        let c1 = |a: &Array1<T>| a.mapv(|v| U::lit(v.as_f64()));
        EncoderParams {
            token_embedding: c2(&self.token_embedding),
            positions: c2(&self.positions),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1_gain: c1(&b.ln1_gain),
                    ln1_bias: c1(&b.ln1_bias),
                    query: c2(&b.query),
                    key: c2(&b.key),
                    value: c2(&b.value),
                    output: c2(&b.output),
                    ln2_gain: c1(&b.ln2_gain),
                    ln2_bias: c1(&b.ln2_bias),
                    ff1_weight: c2(&b.ff1_weight),
                    ff1_bias: c1(&b.ff1_bias),
                    ff2_weight: c2(&b.ff2_weight),
                    ff2_bias: c1(&b.ff2_bias),
                })
                .collect(),
            reduce_weight: c2(&self.reduce_weight),
            reduce_bias: c1(&self.reduce_bias),
        }
    }

    /// Checks tensor shapes against `config`.
    pub fn check_shapes(&self, config: &EncoderConfig) -> Result<()> {
        let (e, f, d) = (config.embed_dim, config.ff_dim, config.output_dim);
        let mut expected: Vec<(String, Vec<usize>)> = vec![(
            "encoder.token_embedding".into(),
            vec![config.vocab_size, e],
        )];
        for i in 0..config.blocks {
            let p = format!("encoder.block{i}");
            for (n, s) in [
                ("ln1_gain", vec![e]),
                ("ln1_bias", vec![e]),
                ("query", vec![e, e]),
                ("key", vec![e, e]),
                ("value", vec![e, e]),
                ("output", vec![e, e]),
                ("ln2_gain", vec![e]),
                ("ln2_bias", vec![e]),
                ("ff1_weight", vec![e, f]),
                ("ff1_bias", vec![f]),
                ("ff2_weight", vec![f, e]),
                ("ff2_bias", vec![e]),
            ] {
                expected.push((format!("{p}.{n}"), s));
            }
        }
        expected.push(("encoder.reduce_weight".into(), vec![e, d]));
        expected.push(("encoder.reduce_bias".into(), vec![d]));
        let actual = self.tensors();
        if actual.len() != expected.len() {
            return Err(Error::load(
                "encoder",
                format!("expected {} tensors, found {}", expected.len(), actual.len()),
            ));
        }
        for ((name, t), (ename, eshape)) in actual.iter().zip(&expected) {
            if name != ename || t.shape() != eshape.as_slice() {
                return Err(Error::load(
                    ename.clone(),
                    format!("expected shape {eshape:?}, found {name} {:?}", t.shape()),
                ));
            }
        }
        Ok(())
    }
}

impl<T: Real> ParamSet<T> for EncoderParams<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = vec![(
            "encoder.token_embedding".to_string(),
            self.token_embedding.view().into_dyn(),
        )];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("encoder.block{i}");
            out.extend([
                (format!("{p}.ln1_gain"), b.ln1_gain.view().into_dyn()),
                (format!("{p}.ln1_bias"), b.ln1_bias.view().into_dyn()),
                (format!("{p}.query"), b.query.view().into_dyn()),
                (format!("{p}.key"), b.key.view().into_dyn()),
                (format!("{p}.value"), b.value.view().into_dyn()),
                (format!("{p}.output"), b.output.view().into_dyn()),
                (format!("{p}.ln2_gain"), b.ln2_gain.view().into_dyn()),
                (format!("{p}.ln2_bias"), b.ln2_bias.view().into_dyn()),
                (format!("{p}.ff1_weight"), b.ff1_weight.view().into_dyn()),
                (format!("{p}.ff1_bias"), b.ff1_bias.view().into_dyn()),
                (format!("{p}.ff2_weight"), b.ff2_weight.view().into_dyn()),
                (format!("{p}.ff2_bias"), b.ff2_bias.view().into_dyn()),
            ]);
        }
        out.push(("encoder.reduce_weight".into(), self.reduce_weight.view().into_dyn()));
        out.push(("encoder.reduce_bias".into(), self.reduce_bias.view().into_dyn()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = vec![(
            "encoder.token_embedding".to_string(),
            self.token_embedding.view_mut().into_dyn(),
        )];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("encoder.block{i}");
            out.extend([
                (format!("{p}.ln1_gain"), b.ln1_gain.view_mut().into_dyn()),
                (format!("{p}.ln1_bias"), b.ln1_bias.view_mut().into_dyn()),
                (format!("{p}.query"), b.query.view_mut().into_dyn()),
                (format!("{p}.key"), b.key.view_mut().into_dyn()),
                (format!("{p}.value"), b.value.view_mut().into_dyn()),
                (format!("{p}.output"), b.output.view_mut().into_dyn()),
                (format!("{p}.ln2_gain"), b.ln2_gain.view_mut().into_dyn()),
                (format!("{p}.ln2_bias"), b.ln2_bias.view_mut().into_dyn()),
                (format!("{p}.ff1_weight"), b.ff1_weight.view_mut().into_dyn()),
                (format!("{p}.ff1_bias"), b.ff1_bias.view_mut().into_dyn()),
                (format!("{p}.ff2_weight"), b.ff2_weight.view_mut().into_dyn()),
                (format!("{p}.ff2_bias"), b.ff2_bias.view_mut().into_dyn()),
            ]);
        }
        out.push(("encoder.reduce_weight".into(), self.reduce_weight.view_mut().into_dyn()));
        out.push(("encoder.reduce_bias".into(), self.reduce_bias.view_mut().into_dyn()));
        out
    }
}

struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    h1: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Attention probabilities per head, n x n.
    probs: Vec<Array2<T>>,
    concat: Array2<T>,
    ln2: LayerNormCache<T>,
    h2: Array2<T>,
    pre_act: Array2<T>,
    act: Array2<T>,
}

/// Output token matrix `g` (n_tokens x D) plus what backward needs.
pub struct EncodedDocument<T> {
    pub g: Array2<T>,
    tokens: Vec<u32>,
    blocks: Vec<BlockCache<T>>,
    last_hidden: Array2<T>,
}

impl<T: Real> EncodedDocument<T> {
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Self-attention probabilities of `block`, one n x n matrix per head.
    pub fn self_attention(&self, block: usize) -> &[Array2<T>] {
        &self.blocks[block].probs
    }
}

fn check_tokens(tokens: &[u32], config: &EncoderConfig) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > config.max_len {
        return Err(Error::Input(format!(
            "sequence of {} tokens exceeds max_len {}",
            tokens.len(),
            config.max_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Input(format!(
            "token id {t} out of range for vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

pub fn encode<T: Real>(
    tokens: &[u32],
    params: &EncoderParams<T>,
    config: &EncoderConfig,
) -> Result<EncodedDocument<T>> {
    check_tokens(tokens, config)?;
    let n = tokens.len();
    let e = config.embed_dim;
    let dh = e / config.heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    let mut x = Array2::zeros((n, e));
    for (j, &t) in tokens.iter().enumerate() {
        let mut row = x.row_mut(j);
        row.assign(&params.token_embedding.row(t as usize));
        row += &params.positions.row(j);
    }

    let mut caches = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let (h1, ln1) = layer_norm(&x, b.ln1_gain.view(), b.ln1_bias.view());
        let q = h1.dot(&b.query);
        let k = h1.dot(&b.key);
        let v = h1.dot(&b.value);
        let mut concat = Array2::zeros((n, e));
        let mut probs = Vec::with_capacity(config.heads);
        for head in 0..config.heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let mut p = q.slice(cols).dot(&k.slice(cols).t());
            p.mapv_inplace(|z| z * scale);
            softmax_rows(&mut p);
            concat.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        general_mat_mul(T::one(), &concat, &b.output, T::one(), &mut x);

        let (h2, ln2) = layer_norm(&x, b.ln2_gain.view(), b.ln2_bias.view());
        let pre_act = h2.dot(&b.ff1_weight) + &b.ff1_bias;
        let act = pre_act.mapv(gelu);
        general_mat_mul(T::one(), &act, &b.ff2_weight, T::one(), &mut x);
        x += &b.ff2_bias;

        caches.push(BlockCache {
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            concat,
            ln2,
            h2,
            pre_act,
            act,
        });
    }

    let g = x.dot(&params.reduce_weight) + &params.reduce_bias;
    Ok(EncodedDocument {
        g,
        tokens: tokens.to_vec(),
        blocks: caches,
        last_hidden: x,
    })
}

/// Backpropagates `upstream = dL/dg` through the encoder.
///
/// Parameter gradients are added into `grads`; embedding rows accumulate
/// over repeated token ids. Returns `dL/dx0`, the gradient with respect
/// to each position's input embedding row.
pub fn encode_backward<T: Real>(
    encoded: &EncodedDocument<T>,
    upstream: &Array2<T>,
    params: &EncoderParams<T>,
    config: &EncoderConfig,
    grads: &mut EncoderParams<T>,
) -> Result<Array2<T>> {
    if upstream.dim() != encoded.g.dim() {
        return Err(Error::Contract(format!(
            "upstream gradient shape {:?} does not match g {:?}",
            upstream.dim(),
            encoded.g.dim()
        )));
    }
    let n = encoded.tokens.len();
    let e = config.embed_dim;
    let dh = e / config.heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    general_mat_mul(
        T::one(),
        &encoded.last_hidden.t(),
        upstream,
        T::one(),
        &mut grads.reduce_weight,
    );
    grads.reduce_bias += &upstream.sum_axis(Axis(0));
    let mut dx = upstream.dot(&params.reduce_weight.t());

    for (bi, cache) in encoded.blocks.iter().enumerate().rev() {
        let b = &params.blocks[bi];
        let gb = &mut grads.blocks[bi];

        // x_out = x_mid + FF(LN2(x_mid))
        general_mat_mul(T::one(), &cache.act.t(), &dx, T::one(), &mut gb.ff2_weight);
        gb.ff2_bias += &dx.sum_axis(Axis(0));
        let mut d_pre = dx.dot(&b.ff2_weight.t());
        d_pre.zip_mut_with(&cache.pre_act, |d, &z| *d *= gelu_grad(z));
        general_mat_mul(T::one(), &cache.h2.t(), &d_pre, T::one(), &mut gb.ff1_weight);
        gb.ff1_bias += &d_pre.sum_axis(Axis(0));
        let d_h2 = d_pre.dot(&b.ff1_weight.t());
        dx += &layer_norm_backward(
            &cache.ln2,
            &d_h2,
            b.ln2_gain.view(),
            &mut gb.ln2_gain,
            &mut gb.ln2_bias,
        );

        // x_mid = x_in + Attn(LN1(x_in))
        general_mat_mul(T::one(), &cache.concat.t(), &dx, T::one(), &mut gb.output);
        let d_concat = dx.dot(&b.output.t());
        let mut dq = Array2::zeros((n, e));
        let mut dk = Array2::zeros((n, e));
        let mut dv = Array2::zeros((n, e));
        for (head, p) in cache.probs.iter().enumerate() {
            let cols = s![.., head * dh..(head + 1) * dh];
            let d_out = d_concat.slice(cols);
            let d_probs = d_out.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&d_out));
            let mut d_scores = softmax_rows_backward(p.view(), &d_probs);
            d_scores.mapv_inplace(|z| z * scale);
            dq.slice_mut(cols).assign(&d_scores.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&d_scores.t().dot(&cache.q.slice(cols)));
        }
        general_mat_mul(T::one(), &cache.h1.t(), &dq, T::one(), &mut gb.query);
        general_mat_mul(T::one(), &cache.h1.t(), &dk, T::one(), &mut gb.key);
        general_mat_mul(T::one(), &cache.h1.t(), &dv, T::one(), &mut gb.value);
        let mut d_h1 = dq.dot(&b.query.t());
        general_mat_mul(T::one(), &dk, &b.key.t(), T::one(), &mut d_h1);
        general_mat_mul(T::one(), &dv, &b.value.t(), T::one(), &mut d_h1);
        dx += &layer_norm_backward(
            &cache.ln1,
            &d_h1,
            b.ln1_gain.view(),
            &mut gb.ln1_gain,
            &mut gb.ln1_bias,
        );
    }

    for (j, &t) in encoded.tokens.iter().enumerate() {
        let mut row = grads.token_embedding.row_mut(t as usize);
        row += &dx.row(j);
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(blocks: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size: 12,
            embed_dim: 8,
            blocks,
            heads: 2,
            ff_dim: 16,
            output_dim: 4,
            max_len: 16,
        }
    }

    fn params(config: &EncoderConfig, seed: u64) -> EncoderParams<f64> {
        EncoderParams::init(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn affine_degenerate_case() {
        let cfg = small_config(0);
        let mut p = params(&cfg, 1);
        p.token_embedding.fill(0.0);
        p.positions.fill(0.0);
        p.reduce_weight.fill(0.0);
        p.reduce_bias = ndarray::array![0.5, -1.0, 2.0, 0.25];
        let enc = encode(&[3, 4, 5], &p, &cfg).unwrap();
        for row in enc.g.rows() {
            assert_eq!(row, p.reduce_bias);
        }
    }

    #[test]
    fn singleton_self_attention_is_one() {
        let cfg = small_config(1);
        let enc = encode(&[5], &params(&cfg, 2), &cfg).unwrap();
        for p in enc.self_attention(0) {
            assert_eq!(p.dim(), (1, 1));
            assert!((p[[0, 0]] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn input_errors() {
        let cfg = small_config(1);
        let p = params(&cfg, 3);
        assert!(matches!(encode(&[], &p, &cfg), Err(Error::Input(_))));
        assert!(matches!(encode(&[12], &p, &cfg), Err(Error::Input(_))));
        assert!(matches!(encode(&[3; 17], &p, &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn attention_rows_are_simplex() {
        let cfg = small_config(2);
        let p32: EncoderParams<f32> = params(&cfg, 4).cast();
        let enc32 = encode(&[3, 4, 5, 6, 7, 3, 9], &p32, &cfg).unwrap();
        let enc64 = encode(&[3, 4, 5, 6, 7, 3, 9], &params(&cfg, 4), &cfg).unwrap();
        for b in 0..2 {
            for p in enc32.self_attention(b) {
                for r in p.rows() {
                    assert!((r.sum() - 1.0).abs() < 1e-6);
                }
            }
            for p in enc64.self_attention(b) {
                for r in p.rows() {
                    assert!((r.sum() - 1.0).abs() < 1e-12);
                    assert!(r.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small_config(1);
        let p: EncoderParams<f32> = params(&cfg, 5).cast();
        let a = encode(&[3, 9, 4], &p, &cfg).unwrap().g;
        let b = encode(&[3, 9, 4], &p, &cfg).unwrap().g;
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn bag_mode_identical_tokens_give_equal_rows() {
        let cfg = small_config(0);
        let mut p = params(&cfg, 6);
        p.positions.fill(0.0);
        let enc = encode(&[7, 4, 7], &p, &cfg).unwrap();
        assert_eq!(enc.g.row(0), enc.g.row(2));
        let swapped = encode(&[7, 7, 4], &p, &cfg).unwrap();
        assert_eq!(enc.g.row(0), swapped.g.row(1));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = small_config(1);
        let p = params(&cfg, 7);
        let enc = encode(&[3, 4, 5], &p, &cfg).unwrap();
        let mut grads = p.zeros_like();
        encode_backward(&enc, &Array2::zeros(enc.g.raw_dim()), &p, &cfg, &mut grads).unwrap();
        for (_, t) in grads.tensors() {
            assert!(t.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let cfg = small_config(1);
        let p = params(&cfg, 8);
        let enc = encode(&[3, 4], &p, &cfg).unwrap();
        let mut grads = p.zeros_like();
        let bad = Array2::zeros((3, 4));
        assert!(matches!(
            encode_backward(&enc, &bad, &p, &cfg, &mut grads),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn linear_case_embedding_gradient_sums_upstream_rows() {
        let cfg = EncoderConfig {
            output_dim: 8,
            ..small_config(0)
        };
        let mut p = params(&cfg, 9);
        p.reduce_weight = Array2::eye(8);
        let tokens = [4u32, 6, 4, 5, 4];
        let enc = encode(&tokens, &p, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let up = Array2::from_shape_simple_fn((5, 8), || rng.random_range(-1.0..1.0));
        let mut grads = p.zeros_like();
        encode_backward(&enc, &up, &p, &cfg, &mut grads).unwrap();
        let expected = &up.row(0) + &up.row(2) + up.row(4);
        for (a, b) in grads.token_embedding.row(4).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(grads.token_embedding.row(5), up.row(3));
        assert!(grads.token_embedding.row(7).iter().all(|&v| v == 0.0));
    }
}
