use std::fmt::Write as _;

use html_escape::encode_text;
use serde::{Deserialize, Serialize};

use super::PrototypeExemplar;
use crate::{Error, Result};

/// The document being explained, with the hash of the vocabulary it was
/// tokenized with.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplainedDocument {
    pub doc_id: String,
    pub words: Vec<String>,
    pub vocab_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportExemplar {
    pub doc_id: String,
    pub distance: f64,
    pub top_spans: Vec<[usize; 2]>,
    /// Exemplar text for the HTML view; not part of the JSON report.
    #[serde(skip)]
    pub words: Vec<String>,
}

impl ReportExemplar {
    pub fn from_exemplar(e: &PrototypeExemplar, words: Vec<String>) -> Self {
        ReportExemplar {
            doc_id: e.doc_id.clone(),
            distance: e.distance,
            top_spans: e.top_spans.clone(),
            words,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportLabel {
    pub label: String,
    pub probability: f64,
    /// Distance to the prototype; null for linear heads.
    pub distance: Option<f64>,
    pub token_scores: Vec<f64>,
    pub exemplars: Vec<ReportExemplar>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplanationReport {
    pub doc_id: String,
    pub model_hash: String,
    pub labels: Vec<ReportLabel>,
    #[serde(skip)]
    pub words: Vec<String>,
}

impl ExplanationReport {
    /// Structural checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Validation(format!("report {}: {what}", self.doc_id)));
        if self.doc_id.is_empty() {
            return bad("empty doc_id".into());
        }
        if self.model_hash.len() != 64 || !self.model_hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return bad(format!("model_hash `{}` is not a SHA-256 hex digest", self.model_hash));
        }
        let n = self.labels.first().map(|l| l.token_scores.len());
        for l in &self.labels {
            if !(0.0..=1.0).contains(&l.probability) {
                return bad(format!("probability {} of {} outside [0,1]", l.probability, l.label));
            }
            if l.distance.is_some_and(|d| !(d.is_finite() && d >= 0.0)) {
                return bad(format!("distance of {} is not a finite non-negative number", l.label));
            }
            if Some(l.token_scores.len()) != n {
                return bad(format!("token_scores of {} differ in length from the first label", l.label));
            }
            if l.token_scores.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                return bad(format!("token_scores of {} must be finite and non-negative", l.label));
            }
            for e in &l.exemplars {
                if !(e.distance.is_finite() && e.distance >= 0.0) {
                    return bad(format!("exemplar {} has invalid distance", e.doc_id));
                }
                if e.top_spans.iter().any(|s| s[0] >= s[1]) {
                    return bad(format!("exemplar {} has an empty or reversed span", e.doc_id));
                }
            }
        }
        Ok(())
    }
}

/// Parses and validates a JSON explanation report.
pub fn parse_report(json: &str) -> Result<ExplanationReport> {
    let report: ExplanationReport =
        serde_json::from_str(json).map_err(|e| Error::Validation(format!("report schema: {e}")))?;
    report.validate()?;
    Ok(report)
}

/// Assembles a report. Every label's token scores must cover the document.
pub fn render_report(
    doc: &ExplainedDocument,
    model_hash: &str,
    model_vocab_hash: &str,
    labels: Vec<ReportLabel>,
) -> Result<ExplanationReport> {
    if doc.vocab_hash != model_vocab_hash {
        return Err(Error::Contract(format!(
            "document {} was tokenized with vocabulary {}, model uses {}",
            doc.doc_id, doc.vocab_hash, model_vocab_hash
        )));
    }
    if let Some(l) = labels.iter().find(|l| l.token_scores.len() != doc.words.len()) {
        return Err(Error::Contract(format!(
            "{} token scores for label {} but document has {} tokens",
            l.token_scores.len(),
            l.label,
            doc.words.len()
        )));
    }
    let report = ExplanationReport {
        doc_id: doc.doc_id.clone(),
        model_hash: model_hash.to_string(),
        labels,
        words: doc.words.clone(),
    };
    report.validate()?;
    Ok(report)
}

const STYLE: &str = "body{font-family:sans-serif;max-width:60em;margin:2em auto;line-height:1.6}\
.label{border-top:1px solid #ccc;padding:.5em 0}\
.highlight span{padding:0 .1em;border-radius:2px}\
.exemplar{background:#f6f6f6;margin:.5em 0 .5em 2em;padding:.5em}\
.exemplar mark{background:#ffd27f}\
.meta{color:#666;font-size:.9em}";

fn write_highlights(out: &mut String, words: &[String], scores: &[f64]) {
    let max = scores.iter().cloned().fold(0.0_f64, f64::max);
    for (w, &s) in words.iter().zip(scores) {
        let alpha = if max > 0.0 { s / max } else { 0.0 };
        let _ = write!(
            out,
            "<span style=\"background:rgba(255,140,0,{alpha:.3})\" title=\"{s:.4}\">{}</span> ",
            encode_text(w)
        );
    }
}

fn write_exemplar(out: &mut String, e: &ReportExemplar) {
    let _ = write!(
        out,
        "<div class=\"exemplar\"><h3>{} <span class=\"meta\">distance {:.4}</span></h3><p>",
        encode_text(&e.doc_id),
        e.distance
    );
    for (j, w) in e.words.iter().enumerate() {
        let marked = e.top_spans.iter().any(|s| s[0] <= j && j < s[1]);
        if marked {
            let _ = write!(out, "<mark>{}</mark> ", encode_text(w));
        } else {
            let _ = write!(out, "{} ", encode_text(w));
        }
    }
    out.push_str("</p></div>\n");
}

/// Self-contained HTML view: one highlight block per label followed by
/// its exemplar panels.
pub fn render_html(report: &ExplanationReport) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Explanation of {id}</title>\
         <style>{STYLE}</style></head><body>\n<h1>Document {id}</h1>\n<p class=\"meta\">model {hash}</p>\n",
        id = encode_text(&report.doc_id),
        hash = encode_text(&report.model_hash),
    );
    if report.labels.is_empty() {
        out.push_str("<p>No labels predicted.</p>\n");
    }
    for l in &report.labels {
        let distance = l.distance.map(|d| format!(", distance {d:.4}")).unwrap_or_default();
        let _ = write!(
            out,
            "<section class=\"label\"><h2>{} <span class=\"meta\">probability {:.4}{distance}</span></h2>\n\
             <div class=\"highlight\">",
            encode_text(&l.label),
            l.probability
        );
        write_highlights(&mut out, &report.words, &l.token_scores);
        out.push_str("</div>\n");
        for e in &l.exemplars {
            write_exemplar(&mut out, e);
        }
        out.push_str("</section>\n");
    }
    out.push_str("</body></html>\n");
    out
}
