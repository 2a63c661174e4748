use std::collections::{BTreeMap, BTreeSet};

use super::Corpus;
use crate::{Error, Result};

/// Class-conditional TF-IDF.
///
/// `tf(t, c)` is the share of token `t` among all tokens of the positive
/// documents of label `c`; `idf(t) = ln(N / df(t))` over the whole corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct TfidfTable {
    /// Per label: token id -> score, only for tokens seen in its positives.
    pub rows: Vec<BTreeMap<u32, f64>>,
    /// Document frequency per token id.
    pub df: Vec<usize>,
    pub n_docs: usize,
}

impl TfidfTable {
    pub fn score(&self, label: usize, token: u32) -> f64 {
        self.rows
            .get(label)
            .and_then(|r| r.get(&token))
            .copied()
            .unwrap_or(0.0)
    }
}

pub fn compute_tfidf(corpus: &Corpus) -> TfidfTable {
    let n_docs = corpus.len();
    let mut df = vec![0usize; corpus.vocab.len()];
    let mut seen = vec![usize::MAX; corpus.vocab.len()];
    for (i, d) in corpus.documents.iter().enumerate() {
        for &t in &d.tokens {
            if seen[t as usize] != i {
                seen[t as usize] = i;
                df[t as usize] += 1;
            }
        }
    }

    let mut counts: Vec<BTreeMap<u32, usize>> = vec![BTreeMap::new(); corpus.n_labels()];
    let mut totals = vec![0usize; corpus.n_labels()];
    for d in &corpus.documents {
        for &c in &d.labels {
            totals[c] += d.tokens.len();
            let row = &mut counts[c];
            for &t in &d.tokens {
                *row.entry(t).or_default() += 1;
            }
        }
    }

    let rows = counts
        .into_iter()
        .zip(&totals)
        .map(|(row, &total)| {
            row.into_iter()
                .map(|(t, n)| {
                    let tf = n as f64 / total as f64;
                    let idf = (n_docs as f64 / df[t as usize] as f64).ln();
                    (t, tf * idf)
                })
                .collect()
        })
        .collect();
    TfidfTable { rows, df, n_docs }
}

/// Tokens whose TF-IDF for `label` exceeds `h`, reserved ids excluded.
pub fn informative_tokens(label: usize, table: &TfidfTable, h: f64) -> Result<BTreeSet<u32>> {
    let row = table
        .rows
        .get(label)
        .ok_or_else(|| Error::Contract(format!("label {label} has no TF-IDF row")))?;
    Ok(row
        .iter()
        .filter(|&(&t, &s)| t >= 3 && s > h)
        .map(|(&t, _)| t)
        .collect())
}
