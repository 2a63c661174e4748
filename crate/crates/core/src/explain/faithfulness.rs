use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_label, check_vocab, saliency_many, SaliencyMethod};
use crate::corpus::{Corpus, MASK};
use crate::metrics::roc_auc;
use crate::protonet::ProtoModel;
use crate::{Error, Real, Result};

/// Masked fractions, in tenths.
pub const THRESHOLDS: [usize; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub fraction: f64,
    pub roc_auc_macro: f64,
    /// ROC AUC per evaluated label, in `FaithfulnessReport::labels` order.
    pub per_label: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub method: SaliencyMethod,
    pub labels: Vec<String>,
    /// Requested labels skipped because they are all-positive or
    /// all-negative in the evaluation corpus.
    pub excluded: Vec<String>,
    pub unmasked_roc_auc_macro: f64,
    pub unmasked_per_label: Vec<f64>,
    pub thresholds: Vec<ThresholdScore>,
    /// Mean macro ROC AUC over the thresholds. Lower is more faithful.
    pub score: f64,
    /// Mean over thresholds for each evaluated label.
    pub per_label_scores: Vec<f64>,
}

/// Positions in masking order: highest saliency first, ties to the earlier
/// position.
pub fn masking_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Copy of `tokens` with the `ceil(tenths / 10 * n)` most salient
/// positions replaced by the mask token.
pub fn mask_most_salient(tokens: &[u32], order: &[usize], tenths: usize) -> Vec<u32> {
    let count = (tenths * tokens.len()).div_ceil(10);
    let mut out = tokens.to_vec();
    for &j in order.iter().take(count) {
        out[j] = MASK;
    }
    out
}

fn logit<T: Real>(model: &ProtoModel<T>, tokens: &[u32], label: usize) -> Result<f64> {
    let s = model.forward_tokens(tokens)?.scores[label].as_f64();
    Ok(if model.variant.is_proto() { -s } else { s })
}

/// Per document: unmasked logits, then logits per threshold, each indexed
/// by evaluated label.
type DocScores = (Vec<f64>, Vec<Vec<f64>>);

/// Masks the most salient tokens of every document of `eval` at each
/// threshold, separately for each label, and measures macro ROC AUC over
/// `labels` on the masked copies. `seed` drives the random control.
pub fn faithfulness<T: Real + Send + Sync>(
    model: &ProtoModel<T>,
    eval: &Corpus,
    labels: &[usize],
    method: SaliencyMethod,
    seed: u64,
) -> Result<FaithfulnessReport> {
    check_vocab(model, eval)?;
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for &l in labels {
        check_label(model, l)?;
        let name = &model.labels[l];
        let positives = eval
            .label_id(name)
            .map_or(0, |cl| eval.documents.iter().filter(|d| d.has_label(cl)).count());
        if positives == 0 || positives == eval.len() {
            log::warn!("label `{name}` is degenerate in the evaluation corpus; excluded from faithfulness");
            excluded.push(name.clone());
        } else {
            kept.push(l);
        }
    }
    if kept.is_empty() {
        return Err(Error::Validation(
            "no evaluated label has both positive and negative documents".into(),
        ));
    }
    let truth: Vec<Vec<bool>> = kept
        .iter()
        .map(|&l| {
            let cl = eval.label_id(&model.labels[l]).expect("checked above");
            eval.documents.iter().map(|d| d.has_label(cl)).collect()
        })
        .collect();

    let per_doc: Vec<DocScores> = crate::thread_pool().install(|| {
        eval.documents
            .par_iter()
            .enumerate()
            .map(|(i, doc)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let sal = saliency_many(model, &doc.tokens, &kept, method, &mut rng)?;
                let unmasked = kept
                    .iter()
                    .map(|&l| logit(model, &doc.tokens, l))
                    .collect::<Result<Vec<_>>>()?;
                let mut masked = vec![Vec::with_capacity(kept.len()); THRESHOLDS.len()];
                for (&l, scores) in kept.iter().zip(&sal) {
                    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
                        return Err(Error::Numeric(format!("{method} saliency produced {bad} on {}", doc.id)));
                    }
                    let order = masking_order(scores);
                    for (t, &tenths) in THRESHOLDS.iter().enumerate() {
                        let tokens = mask_most_salient(&doc.tokens, &order, tenths);
                        masked[t].push(logit(model, &tokens, l)?);
                    }
                }
                Ok((unmasked, masked))
            })
            .collect::<Result<_>>()
    })?;

    let auc_per_label = |column: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
        (0..kept.len())
            .map(|k| {
                let scores: Vec<f64> = (0..eval.len()).map(|i| column(i, k)).collect();
                roc_auc(&scores, &truth[k]).expect("non-degenerate label")
            })
            .collect()
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    let unmasked_per_label = auc_per_label(&|i, k| per_doc[i].0[k]);
    let thresholds: Vec<ThresholdScore> = THRESHOLDS
        .iter()
        .enumerate()
        .map(|(t, &tenths)| {
            let per_label = auc_per_label(&|i, k| per_doc[i].1[t][k]);
            ThresholdScore {
                fraction: tenths as f64 / 10.0,
                roc_auc_macro: mean(&per_label),
                per_label,
            }
        })
        .collect();
    let per_label_scores = (0..kept.len())
        .map(|k| thresholds.iter().map(|t| t.per_label[k]).sum::<f64>() / thresholds.len() as f64)
        .collect();
    let score = thresholds.iter().map(|t| t.roc_auc_macro).sum::<f64>() / thresholds.len() as f64;
    Ok(FaithfulnessReport {
        method,
        labels: kept.iter().map(|&l| model.labels[l].clone()).collect(),
        excluded,
        unmasked_roc_auc_macro: mean(&unmasked_per_label),
        unmasked_per_label,
        thresholds,
        score,
        per_label_scores,
    })
}
