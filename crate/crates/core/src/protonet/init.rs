//! Data-driven initialization of attention vectors and prototypes.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gaussian, head_forward, ModelVariant, ProtoModel};
use crate::corpus::{informative_tokens, Corpus, TfidfTable};
use crate::encoder::encode;
use crate::{Error, Real, Result};

/// Standard deviation of prototypes for labels without training positives.
pub(crate) const EMPTY_PROTOTYPE_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelCoverage {
    pub label: String,
    /// Informative token types above the threshold.
    pub informative_tokens: usize,
    /// Occurrences of those tokens averaged into the attention vector.
    pub occurrences: usize,
    /// True when the label fell back to a random vector.
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionCoverage {
    pub h: f64,
    pub labels: Vec<LabelCoverage>,
    pub fallbacks: usize,
}

impl AttentionCoverage {
    /// Median informative-token count over labels with at least one
    /// positive training document.
    pub fn median_informative(&self, train_freq: &[usize]) -> Option<f64> {
        let mut n: Vec<usize> = self
            .labels
            .iter()
            .zip(train_freq)
            .filter(|(_, &f)| f > 0)
            .map(|(l, _)| l.informative_tokens)
            .collect();
        if n.is_empty() {
            return None;
        }
        n.sort_unstable();
        let m = n.len();
        Some(if m % 2 == 1 {
            n[m / 2] as f64
        } else {
            (n[m / 2 - 1] + n[m / 2]) as f64 / 2.0
        })
    }
}

/// Attention vectors set to the mean encoder output `g` over every
/// occurrence of a label's informative tokens (TF-IDF above `h`) in that
/// label's positive training documents. Labels without positives or
/// informative tokens get a Gaussian vector with standard deviation
/// `1/sqrt(D)`.
pub fn init_attention<T: Real>(
    model: &ProtoModel<T>,
    train: &Corpus,
    tfidf: &TfidfTable,
    h: f64,
    rng: &mut impl Rng,
) -> Result<(Array2<T>, AttentionCoverage)> {
    let c = model.n_labels();
    let d = model.encoder_config.output_dim;
    if tfidf.rows.len() != c {
        return Err(Error::Contract(format!(
            "TF-IDF table has {} label rows, model has {c} labels",
            tfidf.rows.len()
        )));
    }
    let informative: Vec<_> = (0..c)
        .map(|l| informative_tokens(l, tfidf, h))
        .collect::<Result<_>>()?;
    let mut sums = Array2::<f64>::zeros((c, d));
    let mut counts = vec![0usize; c];
    for doc in &train.documents {
        if !doc.labels.iter().any(|&l| doc.tokens.iter().any(|t| informative[l].contains(t))) {
            continue;
        }
        let g = encode(&doc.tokens, &model.params.encoder, &model.encoder_config)?.g;
        for &l in &doc.labels {
            for (j, t) in doc.tokens.iter().enumerate() {
                if informative[l].contains(t) {
                    let mut row = sums.row_mut(l);
                    row += &g.row(j).mapv(|x| x.as_f64());
                    counts[l] += 1;
                }
            }
        }
    }
    let std = 1.0 / (d as f64).sqrt();
    let mut w = Array2::<T>::zeros((c, d));
    let mut labels = Vec::with_capacity(c);
    for l in 0..c {
        let fallback = counts[l] == 0;
        if fallback {
            w.row_mut(l).assign(&gaussian::<T>(1, d, std, rng).row(0));
        } else {
            let n = counts[l] as f64;
            w.row_mut(l).assign(&sums.row(l).mapv(|x| T::lit(x / n)));
        }
        labels.push(LabelCoverage {
            label: model.labels[l].clone(),
            informative_tokens: informative[l].len(),
            occurrences: counts[l],
            fallback,
        });
    }
    let fallbacks = labels.iter().filter(|l| l.fallback).count();
    Ok((w, AttentionCoverage { h, labels, fallbacks }))
}

/// Prototypes set to the mean document vector of each label's positive
/// training documents: the label-wise `v_pc` for label-wise variants, the
/// mean-pooled `v_p` for plain variants or when `pooled` is set. Labels
/// without positives get a Gaussian vector with standard deviation 0.01.
pub fn init_prototypes<T: Real>(
    model: &ProtoModel<T>,
    train: &Corpus,
    pooled: bool,
    rng: &mut impl Rng,
) -> Result<Array2<T>> {
    let c = model.n_labels();
    let d = model.encoder_config.output_dim;
    let variant = if pooled || !model.variant.is_labelwise() {
        ModelVariant::ProtoPlain
    } else {
        ModelVariant::ProtoLabelwise
    };
    let mut head = model.params.head.clone();
    if head.prototypes.nrows() != c {
        head.prototypes = Array2::zeros((c, d));
    }
    let mut sums = Array2::<f64>::zeros((c, d));
    let mut counts = vec![0usize; c];
    for doc in &train.documents {
        if doc.labels.is_empty() {
            continue;
        }
        let g = encode(&doc.tokens, &model.params.encoder, &model.encoder_config)?.g;
        let r = head_forward(&head, variant, g.view())?;
        for &l in &doc.labels {
            let mut row = sums.row_mut(l);
            row += &r.vectors.row(l).mapv(|x| x.as_f64());
            counts[l] += 1;
        }
    }
    let mut u = Array2::<T>::zeros((c, d));
    for l in 0..c {
        let row: Array1<T> = if counts[l] == 0 {
            gaussian::<T>(1, d, EMPTY_PROTOTYPE_STD, rng).row(0).to_owned()
        } else {
            let n = counts[l] as f64;
            sums.row(l).mapv(|x| T::lit(x / n))
        };
        u.row_mut(l).assign(&row);
    }
    Ok(u)
}
