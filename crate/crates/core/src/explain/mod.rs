//! Token saliency, exemplar retrieval, masking faithfulness and attention
//! word statistics.

mod exemplars;
mod faithfulness;
mod report;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, MASK};
use crate::protonet::ProtoModel;
use crate::{Error, Real, Result};

pub use exemplars::{retrieve_exemplars, ExemplarIndex, ExemplarMode, PrototypeExemplar, DEFAULT_SPAN_TOKENS};
pub use faithfulness::{faithfulness, mask_most_salient, masking_order, FaithfulnessReport, ThresholdScore, THRESHOLDS};
pub use report::{parse_report, render_html, render_report, ExplainedDocument, ExplanationReport, ReportExemplar, ReportLabel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyMethod {
    ProtoAttention,
    Occlusion,
    Gradient,
    InputXGradient,
    RandomControl,
}

impl SaliencyMethod {
    pub const ALL: [SaliencyMethod; 5] = [
        SaliencyMethod::ProtoAttention,
        SaliencyMethod::Occlusion,
        SaliencyMethod::Gradient,
        SaliencyMethod::InputXGradient,
        SaliencyMethod::RandomControl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SaliencyMethod::ProtoAttention => "proto_attention",
            SaliencyMethod::Occlusion => "occlusion",
            SaliencyMethod::Gradient => "gradient",
            SaliencyMethod::InputXGradient => "input_x_gradient",
            SaliencyMethod::RandomControl => "random_control",
        }
    }
}

impl fmt::Display for SaliencyMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SaliencyMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SaliencyMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown saliency method `{s}`")))
    }
}

/// Non-negative relevance of each token of one document for one label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Saliency {
    pub method: SaliencyMethod,
    pub label: usize,
    pub scores: Vec<f64>,
}

fn check_label<T>(model: &ProtoModel<T>, label: usize) -> Result<()> {
    if label >= model.labels.len() {
        return Err(Error::Contract(format!(
            "label id {label} out of range for {} labels",
            model.labels.len()
        )));
    }
    Ok(())
}

fn check_vocab<T>(model: &ProtoModel<T>, corpus: &Corpus) -> Result<()> {
    if model.vocab.content_hash() != corpus.vocab.content_hash() {
        return Err(Error::Contract("corpus is not tokenized with the model vocabulary".into()));
    }
    Ok(())
}

/// `d y_hat[label] / d x0`: one row per position, taken with respect to the
/// input embedding row at that position.
pub fn probability_gradient<T: Real>(model: &ProtoModel<T>, tokens: &[u32], label: usize) -> Result<Array2<T>> {
    check_label(model, label)?;
    let fwd = model.forward_full(tokens)?;
    let p = fwd.result.probabilities[label];
    // y_hat = sigmoid(a), so dy/da = y(1 - y)
    let mut dlogit = Array1::zeros(model.n_labels());
    dlogit[label] = p * (T::one() - p);
    let mut scratch = model.params.zeros_like();
    model.backward(&fwd, dlogit.view(), &mut scratch)
}

/// Saliency of every token of `tokens` for each of `labels`, one vector per
/// label. Occlusion shares its masked forward passes across labels.
pub fn saliency_many<T: Real>(
    model: &ProtoModel<T>,
    tokens: &[u32],
    labels: &[usize],
    method: SaliencyMethod,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    for &l in labels {
        check_label(model, l)?;
    }
    let n = tokens.len();
    match method {
        SaliencyMethod::ProtoAttention => {
            let r = model.forward_tokens(tokens)?;
            Ok(labels
                .iter()
                .map(|&l| r.token_scores(l, n).into_iter().map(Real::as_f64).collect())
                .collect())
        }
        SaliencyMethod::Occlusion => {
            let base = model.forward_tokens(tokens)?.probabilities;
            let mut out = vec![vec![0.0; n]; labels.len()];
            let mut masked = tokens.to_vec();
            for j in 0..n {
                if tokens[j] == MASK {
                    continue;
                }
                masked[j] = MASK;
                let p = model.forward_tokens(&masked)?.probabilities;
                masked[j] = tokens[j];
                for (o, &l) in out.iter_mut().zip(labels) {
                    o[j] = (base[l] - p[l]).as_f64().max(0.0);
                }
            }
            Ok(out)
        }
        SaliencyMethod::Gradient | SaliencyMethod::InputXGradient => labels
            .iter()
            .map(|&l| {
                let grad = probability_gradient(model, tokens, l)?;
                let emb = &model.params.encoder.token_embedding;
                Ok((0..n)
                    .map(|j| {
                        let gj = grad.row(j);
                        let s = if method == SaliencyMethod::Gradient {
                            gj.dot(&gj).sqrt()
                        } else {
                            gj.dot(&emb.row(tokens[j] as usize)).abs()
                        };
                        s.as_f64()
                    })
                    .collect())
            })
            .collect(),
        SaliencyMethod::RandomControl => Ok(labels
            .iter()
            .map(|_| (0..n).map(|_| rng.random::<f64>()).collect())
            .collect()),
    }
}

pub fn saliency<T: Real>(
    model: &ProtoModel<T>,
    tokens: &[u32],
    label: usize,
    method: SaliencyMethod,
    rng: &mut impl Rng,
) -> Result<Saliency> {
    let scores = saliency_many(model, tokens, &[label], method, rng)?.pop().expect("one label");
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("{method} saliency produced {bad}")));
    }
    Ok(Saliency { method, label, scores })
}

/// Words ranked by attention mass summed over the positive documents of
/// `label` in `corpus`. Ties are ordered by word. Tokens are reported by
/// their vocabulary entry, so out-of-vocabulary words pool under `[UNK]`.
pub fn top_attended_words<T: Real + Send + Sync>(
    model: &ProtoModel<T>,
    corpus: &Corpus,
    label: usize,
    m: usize,
) -> Result<Vec<(String, f64)>> {
    check_label(model, label)?;
    check_vocab(model, corpus)?;
    let name = &model.labels[label];
    let Some(corpus_label) = corpus.label_id(name) else {
        return Ok(Vec::new());
    };
    let mut mass: HashMap<u32, f64> = HashMap::new();
    for doc in corpus.documents.iter().filter(|d| d.has_label(corpus_label)) {
        let r = model.forward(doc)?;
        for (&t, s) in doc.tokens.iter().zip(r.token_scores(label, doc.tokens.len())) {
            *mass.entry(t).or_default() += s.as_f64();
        }
    }
    let mut ranked: Vec<(String, f64)> = mass
        .into_iter()
        .map(|(t, s)| (model.vocab.token(t).unwrap_or("[UNK]").to_string(), s))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(m);
    Ok(ranked)
}

/// The `k` labels with the highest probability, ties to the lower label id.
pub fn top_labels<T: Real>(probabilities: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probabilities.len()).collect();
    order.sort_by(|&a, &b| {
        probabilities[b]
            .partial_cmp(&probabilities[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// What to put into a document explanation.
#[derive(Clone, Debug)]
pub struct ExplainOptions {
    pub method: SaliencyMethod,
    pub top_k: usize,
    /// Typical exemplars per label; needs an index.
    pub exemplars: usize,
    pub seed: u64,
}

/// Explanation report for one tokenized document: the `top_k` most probable
/// labels with token saliency and, when `index` is given, exemplars taken
/// from `train`.
pub fn explain_document(
    model: &ProtoModel<f32>,
    model_hash: &str,
    doc: &ExplainedDocument,
    tokens: &[u32],
    exemplars: Option<(&ExemplarIndex, &Corpus)>,
    opts: &ExplainOptions,
) -> Result<ExplanationReport> {
    let r = model.forward_tokens(tokens)?;
    let picked = top_labels(r.probabilities.as_slice().expect("contiguous"), opts.top_k);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let scores = saliency_many(model, tokens, &picked, opts.method, &mut rng)?;
    let labels = picked
        .iter()
        .zip(scores)
        .map(|(&c, token_scores)| {
            let exemplars = match exemplars {
                Some((index, train)) if opts.exemplars > 0 => index
                    .query(c, opts.exemplars, ExemplarMode::Typical)?
                    .iter()
                    .map(|e| {
                        let words = train.document(&e.doc_id).map(|d| d.words.clone()).unwrap_or_default();
                        ReportExemplar::from_exemplar(e, words)
                    })
                    .collect(),
                _ => Vec::new(),
            };
            Ok(ReportLabel {
                label: model.labels[c].clone(),
                probability: r.probabilities[c] as f64,
                distance: model.variant.is_proto().then(|| r.scores[c] as f64),
                token_scores,
                exemplars,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    render_report(doc, model_hash, &model.vocab.content_hash(), labels)
}
