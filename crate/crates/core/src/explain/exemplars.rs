use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_label, check_vocab};
use crate::corpus::Corpus;
use crate::protonet::ProtoModel;
use crate::{Error, Real, Result};

/// Attended tokens reported per exemplar.
pub const DEFAULT_SPAN_TOKENS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarMode {
    /// Closest to the prototype first.
    Typical,
    /// Furthest from the prototype first.
    Atypical,
}

impl fmt::Display for ExemplarMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExemplarMode::Typical => "typical",
            ExemplarMode::Atypical => "atypical",
        })
    }
}

impl FromStr for ExemplarMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "typical" => Ok(ExemplarMode::Typical),
            "atypical" => Ok(ExemplarMode::Atypical),
            other => Err(Error::Contract(format!(
                "unknown exemplar mode `{other}` (expected typical or atypical)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeExemplar {
    pub doc_id: String,
    pub distance: f64,
    pub attention: Vec<f64>,
    /// Half-open `[start, end)` token ranges around the most attended
    /// tokens, merged when adjacent.
    pub top_spans: Vec<[usize; 2]>,
}

/// Spans covering the `k` highest scores (ties to the earlier position),
/// merged where they touch and sorted by start.
pub(crate) fn top_spans(scores: &[f64], k: usize) -> Vec<[usize; 2]> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    let mut spans: Vec<[usize; 2]> = Vec::new();
    for j in picked {
        match spans.last_mut() {
            Some(last) if last[1] == j => last[1] = j + 1,
            _ => spans.push([j, j + 1]),
        }
    }
    spans
}

fn require_prototypes<T>(model: &ProtoModel<T>) -> Result<()> {
    if !model.variant.is_proto() {
        return Err(Error::Contract(format!(
            "exemplar retrieval needs prototypes, `{}` has none",
            model.variant
        )));
    }
    Ok(())
}

fn rank(entries: &mut [(usize, f64)], corpus: &Corpus, mode: ExemplarMode) {
    entries.sort_by(|a, b| {
        let by_distance = match mode {
            ExemplarMode::Typical => a.1.total_cmp(&b.1),
            ExemplarMode::Atypical => b.1.total_cmp(&a.1),
        };
        by_distance.then_with(|| corpus.documents[a.0].id.cmp(&corpus.documents[b.0].id))
    });
}

/// Candidate documents for `label`: its positives, or every document when
/// `positives_only` is false.
fn candidates(corpus: &Corpus, name: &str, positives_only: bool) -> Vec<usize> {
    let corpus_label = corpus.label_id(name);
    (0..corpus.len())
        .filter(|&i| !positives_only || corpus_label.is_some_and(|l| corpus.documents[i].has_label(l)))
        .collect()
}

fn materialize<T: Real>(
    model: &ProtoModel<T>,
    corpus: &Corpus,
    label: usize,
    ranked: &[(usize, f64)],
    k: usize,
) -> Result<Vec<PrototypeExemplar>> {
    ranked
        .iter()
        .take(k)
        .map(|&(i, distance)| {
            let doc = &corpus.documents[i];
            let r = model.forward(doc)?;
            let attention: Vec<f64> = r
                .token_scores(label, doc.tokens.len())
                .into_iter()
                .map(Real::as_f64)
                .collect();
            Ok(PrototypeExemplar {
                doc_id: doc.id.clone(),
                distance,
                top_spans: top_spans(&attention, DEFAULT_SPAN_TOKENS),
                attention,
            })
        })
        .collect()
}

/// Training documents ranked by their distance to the prototype of `label`,
/// ties broken by document id. A label without positive documents yields
/// an empty list and a logged warning.
pub fn retrieve_exemplars<T: Real + Send + Sync>(
    model: &ProtoModel<T>,
    train: &Corpus,
    label: usize,
    k: usize,
    mode: ExemplarMode,
    positives_only: bool,
) -> Result<Vec<PrototypeExemplar>> {
    check_label(model, label)?;
    require_prototypes(model)?;
    check_vocab(model, train)?;
    let cands = candidates(train, &model.labels[label], positives_only);
    if cands.is_empty() {
        log::warn!("label `{}` has no candidate documents for exemplars", model.labels[label]);
        return Ok(Vec::new());
    }
    let mut ranked: Vec<(usize, f64)> = crate::thread_pool().install(|| {
        cands
            .par_iter()
            .map(|&i| Ok((i, model.forward(&train.documents[i])?.scores[label].as_f64())))
            .collect::<Result<_>>()
    })?;
    rank(&mut ranked, train, mode);
    materialize(model, train, label, &ranked, k)
}

/// Every label's positive training documents ranked as exemplars, built
/// once so queries need no forward passes.
#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarIndex {
    /// Per label, closest to the prototype first.
    ranked: Vec<Vec<PrototypeExemplar>>,
}

impl ExemplarIndex {
    pub fn build<T: Real + Send + Sync>(model: &ProtoModel<T>, train: &Corpus) -> Result<Self> {
        require_prototypes(model)?;
        check_vocab(model, train)?;
        let outputs = crate::thread_pool().install(|| {
            train
                .documents
                .par_iter()
                .map(|d| model.forward(d))
                .collect::<Result<Vec<_>>>()
        })?;
        let ranked = model
            .labels
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let mut entries: Vec<(usize, f64)> = candidates(train, name, true)
                    .into_iter()
                    .map(|i| (i, outputs[i].scores[c].as_f64()))
                    .collect();
                rank(&mut entries, train, ExemplarMode::Typical);
                entries
                    .into_iter()
                    .map(|(i, distance)| {
                        let doc = &train.documents[i];
                        let attention: Vec<f64> = outputs[i]
                            .token_scores(c, doc.tokens.len())
                            .into_iter()
                            .map(Real::as_f64)
                            .collect();
                        PrototypeExemplar {
                            doc_id: doc.id.clone(),
                            distance,
                            top_spans: top_spans(&attention, DEFAULT_SPAN_TOKENS),
                            attention,
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(ExemplarIndex { ranked })
    }

    pub fn n_labels(&self) -> usize {
        self.ranked.len()
    }

    pub fn positives(&self, label: usize) -> usize {
        self.ranked.get(label).map_or(0, Vec::len)
    }

    /// Same result as [`retrieve_exemplars`] over positives for the model
    /// and corpus the index was built from.
    pub fn query(&self, label: usize, k: usize, mode: ExemplarMode) -> Result<Vec<PrototypeExemplar>> {
        let list = self.ranked.get(label).ok_or_else(|| {
            Error::Contract(format!("label id {label} out of range for {} labels", self.ranked.len()))
        })?;
        Ok(match mode {
            ExemplarMode::Typical => list.iter().take(k).cloned().collect(),
            ExemplarMode::Atypical => {
                let mut rev: Vec<PrototypeExemplar> = list.clone();
                // descending distance, ties still by ascending id
                rev.sort_by(|a, b| b.distance.total_cmp(&a.distance).then_with(|| a.doc_id.cmp(&b.doc_id)));
                rev.truncate(k);
                rev
            }
        })
    }
}
