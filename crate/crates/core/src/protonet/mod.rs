//! Label-wise attention pooling and prototype-distance classification.
//!
//! For document `p` with encoded tokens `g_pj` and label `c`:
//!
//! ```text
//! s_pcj = softmax_j(g_pj . w_c)
//! v_pc  = sum_j s_pcj g_pj
//! d_pc  = |v_pc - u_c|
//! y_pc  = sigmoid(-d_pc)
//! ```
//!
//! Plain variants replace the attention with a uniform mean over tokens;
//! linear variants replace the distance with `a_c . v + b_c`.

mod checkpoint;
mod init;
mod train;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Vocabulary};
use crate::encoder::layers::{softmax_in_place, softmax_rows, softmax_rows_backward};
use crate::encoder::{encode, encode_backward, EncodedDocument, EncoderConfig, EncoderParams};
use crate::params::ParamSet;
use crate::{Error, Real, Result};

pub use checkpoint::{load_model, save_model, serialize_model, FORMAT_VERSION};
pub use init::{init_attention, init_prototypes, AttentionCoverage, LabelCoverage};
pub use train::{
    evaluate, lr_at, predict_corpus, train, truth_matrix, AdamW, EvalPoint, Evaluation,
    TrainConfig, TrainStats, DEFAULT_WARMUP_FRACTION,
};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    ProtoLabelwise,
    ProtoPlain,
    LinearLabelwise,
    LinearPlain,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [
        ModelVariant::ProtoLabelwise,
        ModelVariant::ProtoPlain,
        ModelVariant::LinearLabelwise,
        ModelVariant::LinearPlain,
    ];

    pub fn is_labelwise(self) -> bool {
        matches!(self, ModelVariant::ProtoLabelwise | ModelVariant::LinearLabelwise)
    }

    pub fn is_proto(self) -> bool {
        matches!(self, ModelVariant::ProtoLabelwise | ModelVariant::ProtoPlain)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::ProtoLabelwise => "proto_labelwise",
            ModelVariant::ProtoPlain => "proto_plain",
            ModelVariant::LinearLabelwise => "linear_labelwise",
            ModelVariant::LinearPlain => "linear_plain",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model variant `{s}`")))
    }
}

/// Per-label head tensors. Tensors a variant does not use have zero rows.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    /// `W`, one attention vector per label.
    pub attention: Array2<T>,
    /// `U`, one prototype per label.
    pub prototypes: Array2<T>,
    pub linear_weight: Array2<T>,
    pub linear_bias: Array1<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: EncoderParams<T>,
    pub head: HeadParams<T>,
}

pub(crate) fn gaussian<T: Real>(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}

impl<T: Real> HeadParams<T> {
    /// Attention vectors, prototypes and linear weights are drawn from a
    /// zero-mean Gaussian with standard deviation `1/sqrt(D)`; biases start
    /// at 0.
    pub fn init(variant: ModelVariant, n_labels: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let rows = |on: bool| if on { n_labels } else { 0 };
        let attention = gaussian(rows(variant.is_labelwise()), dim, std, rng);
        let prototypes = gaussian(rows(variant.is_proto()), dim, std, rng);
        let linear_weight = gaussian(rows(!variant.is_proto()), dim, std, rng);
        let linear_bias = Array1::zeros(rows(!variant.is_proto()));
        Self {
            attention,
            prototypes,
            linear_weight,
            linear_bias,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            attention: Array2::zeros(self.attention.raw_dim()),
            prototypes: Array2::zeros(self.prototypes.raw_dim()),
            linear_weight: Array2::zeros(self.linear_weight.raw_dim()),
            linear_bias: Array1::zeros(self.linear_bias.raw_dim()),
        }
    }

    pub fn cast<U: Real>(&self) -> HeadParams<U> {
        HeadParams {
            attention: self.attention.mapv(|v| U::lit(v.as_f64())),
            prototypes: self.prototypes.mapv(|v| U::lit(v.as_f64())),
            linear_weight: self.linear_weight.mapv(|v| U::lit(v.as_f64())),
            linear_bias: self.linear_bias.mapv(|v| U::lit(v.as_f64())),
        }
    }
}

impl<T: Real> ModelParams<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            encoder: self.encoder.cast(),
            head: self.head.cast(),
        }
    }
}

impl<T: Real> ParamSet<T> for ModelParams<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = self.encoder.tensors();
        let h = &self.head;
        out.extend([
            ("head.attention".to_string(), h.attention.view().into_dyn()),
            ("head.prototypes".to_string(), h.prototypes.view().into_dyn()),
            ("head.linear_weight".to_string(), h.linear_weight.view().into_dyn()),
            ("head.linear_bias".to_string(), h.linear_bias.view().into_dyn()),
        ]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = self.encoder.tensors_mut();
        let h = &mut self.head;
        out.extend([
            ("head.attention".to_string(), h.attention.view_mut().into_dyn()),
            ("head.prototypes".to_string(), h.prototypes.view_mut().into_dyn()),
            ("head.linear_weight".to_string(), h.linear_weight.view_mut().into_dyn()),
            ("head.linear_bias".to_string(), h.linear_bias.view_mut().into_dyn()),
        ]);
        out
    }
}

/// `(s, v)`: attention over the rows of `g` with scores `g w`, and the
/// attention-weighted sum of those rows.
pub fn label_attention<T: Real>(g: ArrayView2<T>, w: ArrayView1<T>) -> (Array1<T>, Array1<T>) {
    let mut s = g.dot(&w);
    softmax_in_place(s.as_slice_mut().expect("contiguous"));
    let v = g.t().dot(&s);
    (s, v)
}

#[inline]
pub fn sigmoid<T: Real>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

/// `(d, y)` with `d = |v - u|` and `y = sigmoid(-d)`.
pub fn predict_label<T: Real>(v: ArrayView1<T>, u: ArrayView1<T>) -> (T, T) {
    let d = (&v - &u).mapv(|x| x * x).sum().sqrt();
    (d, sigmoid(-d))
}

fn bce_term(p: f64, y: bool) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Binary cross-entropy summed over documents and labels.
pub fn loss(predictions: ArrayView2<f64>, truth: ArrayView2<bool>) -> f64 {
    assert_eq!(predictions.dim(), truth.dim(), "prediction and truth shapes differ");
    predictions
        .iter()
        .zip(truth.iter())
        .map(|(&p, &y)| bce_term(p, y))
        .sum()
}

/// Model outputs for one document.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionResult<T> {
    /// Distance `d_pc` for prototype variants, affine score for linear ones.
    pub scores: Array1<T>,
    pub probabilities: Array1<T>,
    /// Labels x tokens attention, present for label-wise variants.
    pub attention: Option<Array2<T>>,
    /// Labels x D document vectors `v_pc` (identical rows for plain variants).
    pub vectors: Array2<T>,
}

impl<T: Real> PredictionResult<T> {
    pub fn n_labels(&self) -> usize {
        self.scores.len()
    }

    /// Attention of `label` over tokens; uniform for plain variants.
    pub fn token_scores(&self, label: usize, n_tokens: usize) -> Vec<T> {
        match &self.attention {
            Some(a) => a.row(label).to_vec(),
            None => vec![T::one() / T::from_usize(n_tokens).unwrap(); n_tokens],
        }
    }
}

/// Forward state kept for the backward pass.
pub struct Forward<T> {
    pub encoded: EncodedDocument<T>,
    pub result: PredictionResult<T>,
}

/// Runs the full model on a token sequence.
pub fn forward_params<T: Real>(
    params: &ModelParams<T>,
    config: &EncoderConfig,
    variant: ModelVariant,
    tokens: &[u32],
) -> Result<Forward<T>> {
    let encoded = encode(tokens, &params.encoder, config)?;
    let result = head_forward(&params.head, variant, encoded.g.view())?;
    Ok(Forward { encoded, result })
}

fn n_labels_of<T>(head: &HeadParams<T>, variant: ModelVariant) -> usize {
    if variant.is_proto() {
        head.prototypes.nrows()
    } else {
        head.linear_bias.len()
    }
}

/// Pools `g` per label and scores it.
pub fn head_forward<T: Real>(
    head: &HeadParams<T>,
    variant: ModelVariant,
    g: ArrayView2<T>,
) -> Result<PredictionResult<T>> {
    let c = n_labels_of(head, variant);
    let (attention, vectors) = if variant.is_labelwise() {
        if head.attention.nrows() != c || head.attention.ncols() != g.ncols() {
            return Err(Error::Contract(format!(
                "attention matrix {:?} does not fit {c} labels of dimension {}",
                head.attention.dim(),
                g.ncols()
            )));
        }
        // labels x tokens scores, softmax over tokens
        let mut s = head.attention.dot(&g.t());
        softmax_rows(&mut s);
        let v = s.dot(&g);
        (Some(s), v)
    } else {
        let mean = g.mean_axis(Axis(0)).expect("non-empty document");
        let v = mean.broadcast((c, g.ncols())).expect("broadcast").to_owned();
        (None, v)
    };
    let scores: Array1<T> = if variant.is_proto() {
        if head.prototypes.ncols() != g.ncols() {
            return Err(Error::Contract("prototype dimension differs from encoder output".into()));
        }
        (&vectors - &head.prototypes)
            .map_axis(Axis(1), |r| r.mapv(|x| x * x).sum().sqrt())
    } else {
        if head.linear_weight.dim() != (c, g.ncols()) {
            return Err(Error::Contract("linear head shape does not fit encoder output".into()));
        }
        (&vectors * &head.linear_weight).sum_axis(Axis(1)) + &head.linear_bias
    };
    let probabilities = if variant.is_proto() {
        scores.mapv(|d| sigmoid(-d))
    } else {
        scores.mapv(sigmoid)
    };
    Ok(PredictionResult {
        scores,
        probabilities,
        attention,
        vectors,
    })
}

/// Backpropagates `dlogit[c] = dL/da_c`, where `a_c = -d_pc` for prototype
/// variants and the affine score for linear ones. Parameter gradients are
/// added into `grads`; returns `dL/dx0` per input position.
pub fn backward_params<T: Real>(
    fwd: &Forward<T>,
    dlogit: ArrayView1<T>,
    params: &ModelParams<T>,
    config: &EncoderConfig,
    variant: ModelVariant,
    grads: &mut ModelParams<T>,
) -> Result<Array2<T>> {
    let r = &fwd.result;
    if dlogit.len() != r.n_labels() {
        return Err(Error::Contract(format!(
            "{} label gradients for {} labels",
            dlogit.len(),
            r.n_labels()
        )));
    }
    let head = &params.head;
    let g = &fwd.encoded.g;
    let mut dv = Array2::<T>::zeros(r.vectors.raw_dim());
    if variant.is_proto() {
        let diff = &r.vectors - &head.prototypes;
        for (c, &delta) in dlogit.iter().enumerate() {
            let d = r.scores[c];
            if delta == T::zero() || d == T::zero() {
                continue;
            }
            // a = -|v - u|
            let unit = diff.row(c).mapv(|x| x / d);
            dv.row_mut(c).scaled_add(-delta, &unit);
            grads.head.prototypes.row_mut(c).scaled_add(delta, &unit);
        }
    } else {
        for (c, &delta) in dlogit.iter().enumerate() {
            dv.row_mut(c).scaled_add(delta, &head.linear_weight.row(c));
            grads.head.linear_weight.row_mut(c).scaled_add(delta, &r.vectors.row(c));
            grads.head.linear_bias[c] += delta;
        }
    }

    let dg = match &r.attention {
        Some(s) => {
            let mut dg = s.t().dot(&dv);
            let ds = dv.dot(&g.t());
            let dz = softmax_rows_backward(s.view(), &ds);
            grads.head.attention += &dz.dot(g);
            dg += &dz.t().dot(&head.attention);
            dg
        }
        None => {
            let n = T::from_usize(g.nrows()).unwrap();
            let total = dv.sum_axis(Axis(0)).mapv(|x| x / n);
            total.broadcast(g.raw_dim()).expect("broadcast").to_owned()
        }
    };
    encode_backward(&fwd.encoded, &dg, &params.encoder, config, &mut grads.encoder)
}

/// `dL/da` of the clamped BCE for one document: `y_hat - y`, zero where the
/// probability is clamped.
pub fn bce_logit_grad<T: Real>(probabilities: ArrayView1<T>, labels: &[usize]) -> Array1<T> {
    let lo = T::lit(PROB_CLAMP);
    let hi = T::lit(1.0 - PROB_CLAMP);
    let mut out = Array1::zeros(probabilities.len());
    for (c, (&p, o)) in probabilities.iter().zip(out.iter_mut()).enumerate() {
        if p < lo || p > hi {
            continue;
        }
        let y = if labels.binary_search(&c).is_ok() { T::one() } else { T::zero() };
        *o = p - y;
    }
    out
}

/// Summed BCE over one document's labels.
pub fn document_loss<T: Real>(probabilities: ArrayView1<T>, labels: &[usize]) -> f64 {
    probabilities
        .iter()
        .enumerate()
        .map(|(c, &p)| bce_term(p.as_f64(), labels.binary_search(&c).is_ok()))
        .sum()
}

/// Loss and parameter gradient over a batch of `(tokens, labels)` pairs,
/// accumulated in the given order.
pub fn batch_loss_and_grad<T: Real>(
    params: &ModelParams<T>,
    config: &EncoderConfig,
    variant: ModelVariant,
    batch: &[(&[u32], &[usize])],
) -> Result<(f64, ModelParams<T>)> {
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    for (tokens, labels) in batch {
        let fwd = forward_params(params, config, variant, tokens)?;
        total += document_loss(fwd.result.probabilities.view(), labels);
        let dlogit = bce_logit_grad(fwd.result.probabilities.view(), labels);
        backward_params(&fwd, dlogit.view(), params, config, variant, &mut grads)?;
    }
    Ok((total, grads))
}

/// A trained or initialized classifier together with its vocabularies.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtoModel<T = f32> {
    pub encoder_config: EncoderConfig,
    pub variant: ModelVariant,
    pub labels: Vec<String>,
    pub vocab: Vocabulary,
    /// Positive training documents per label.
    pub label_train_freq: Vec<usize>,
    /// Validation ROC AUC per label at the selected checkpoint, if known.
    pub label_val_roc_auc: Vec<Option<f64>>,
    pub params: ModelParams<T>,
}

impl<T: Real> ProtoModel<T> {
    /// Randomly initialized model; `encoder_config.vocab_size` is set from
    /// `vocab`.
    pub fn new(
        mut encoder_config: EncoderConfig,
        variant: ModelVariant,
        labels: Vec<String>,
        vocab: Vocabulary,
        label_train_freq: Vec<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        encoder_config.vocab_size = vocab.len();
        encoder_config.validate()?;
        if labels.len() != label_train_freq.len() {
            return Err(Error::Contract(format!(
                "{} labels but {} train frequencies",
                labels.len(),
                label_train_freq.len()
            )));
        }
        let encoder = EncoderParams::init(&encoder_config, rng);
        let head = HeadParams::init(variant, labels.len(), encoder_config.output_dim, rng);
        Ok(Self {
            encoder_config,
            variant,
            label_val_roc_auc: Vec::new(),
            labels,
            vocab,
            label_train_freq,
            params: ModelParams { encoder, head },
        })
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label_id(&self, name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == name)
    }

    pub fn forward_tokens(&self, tokens: &[u32]) -> Result<PredictionResult<T>> {
        Ok(forward_params(&self.params, &self.encoder_config, self.variant, tokens)?.result)
    }

    /// Forward pass keeping the state needed by [`ProtoModel::backward`].
    pub fn forward_full(&self, tokens: &[u32]) -> Result<Forward<T>> {
        forward_params(&self.params, &self.encoder_config, self.variant, tokens)
    }

    pub fn backward(&self, fwd: &Forward<T>, dlogit: ArrayView1<T>, grads: &mut ModelParams<T>) -> Result<Array2<T>> {
        backward_params(fwd, dlogit, &self.params, &self.encoder_config, self.variant, grads)
    }

    /// `doc` must be tokenized with this model's vocabulary.
    pub fn forward(&self, doc: &Document) -> Result<PredictionResult<T>> {
        self.forward_tokens(&doc.tokens)
    }

    /// Token ids for raw text under this model's vocabulary, truncated to
    /// the encoder's context size.
    pub fn encode_text(&self, text: &str) -> (Vec<String>, Vec<u32>) {
        let mut words = crate::corpus::tokenize(text);
        words.truncate(self.encoder_config.max_len);
        let ids = self.vocab.encode(&words);
        (words, ids)
    }

    /// Appends a label without training data. Existing labels' predictions
    /// are unaffected.
    pub fn add_label(&mut self, name: impl Into<String>, rng: &mut impl Rng) -> Result<usize> {
        let name = name.into();
        if self.label_id(&name).is_some() {
            return Err(Error::Validation(format!("label `{name}` already exists")));
        }
        let d = self.encoder_config.output_dim;
        let push = |m: &mut Array2<T>, row: Array2<T>| {
            m.append(Axis(0), row.view()).expect("matching width");
        };
        let h = &mut self.params.head;
        if self.variant.is_labelwise() {
            push(&mut h.attention, gaussian(1, d, 1.0 / (d as f64).sqrt(), rng));
        }
        if self.variant.is_proto() {
            push(&mut h.prototypes, gaussian(1, d, init::EMPTY_PROTOTYPE_STD, rng));
        } else {
            push(&mut h.linear_weight, gaussian(1, d, 1.0 / (d as f64).sqrt(), rng));
            h.linear_bias
                .append(Axis(0), Array1::zeros(1).view())
                .expect("1-d append");
        }
        self.labels.push(name);
        self.label_train_freq.push(0);
        if !self.label_val_roc_auc.is_empty() {
            self.label_val_roc_auc.push(None);
        }
        Ok(self.labels.len() - 1)
    }

    /// Reorders labels so that new label `i` is old label `perm[i]`.
    pub fn permute_labels(&self, perm: &[usize]) -> Result<Self> {
        let c = self.n_labels();
        let mut seen = vec![false; c];
        if perm.len() != c || perm.iter().any(|&p| p >= c || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract("not a permutation of the label ids".into()));
        }
        let rows = |m: &Array2<T>| {
            if m.nrows() == 0 {
                m.clone()
            } else {
                m.select(Axis(0), perm)
            }
        };
        let h = &self.params.head;
        let mut out = self.clone();
        out.params.head = HeadParams {
            attention: rows(&h.attention),
            prototypes: rows(&h.prototypes),
            linear_weight: rows(&h.linear_weight),
            linear_bias: if h.linear_bias.is_empty() {
                h.linear_bias.clone()
            } else {
                h.linear_bias.select(Axis(0), perm)
            },
        };
        out.labels = perm.iter().map(|&p| self.labels[p].clone()).collect();
        out.label_train_freq = perm.iter().map(|&p| self.label_train_freq[p]).collect();
        if !self.label_val_roc_auc.is_empty() {
            out.label_val_roc_auc = perm.iter().map(|&p| self.label_val_roc_auc[p]).collect();
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> ProtoModel<U> {
        ProtoModel {
            encoder_config: self.encoder_config.clone(),
            variant: self.variant,
            labels: self.labels.clone(),
            vocab: self.vocab.clone(),
            label_train_freq: self.label_train_freq.clone(),
            label_val_roc_auc: self.label_val_roc_auc.clone(),
            params: self.params.cast(),
        }
    }
}
