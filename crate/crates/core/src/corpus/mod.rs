//! Corpus ingestion, vocabulary, TF-IDF statistics, patient-disjoint
//! splitting and synthetic corpus generation.

mod synthetic;
mod tfidf;
mod tokenize;
mod vocab;

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use synthetic::{generate_synthetic, SyntheticSpec, SyntheticTruth, INDICATIVE_POOL};
pub use tfidf::{compute_tfidf, informative_tokens, TfidfTable};
pub use tokenize::tokenize;
pub use vocab::{Vocabulary, MASK, PAD, RESERVED, UNK};

/// Default context size; longer notes are truncated.
pub const DEFAULT_MAX_LEN: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub id: String,
    pub patient_id: String,
    pub text: String,
    /// Token strings, aligned with `tokens`.
    pub words: Vec<String>,
    /// Token ids under the owning corpus' vocabulary.
    pub tokens: Vec<u32>,
    /// Sorted, de-duplicated label ids.
    pub labels: Vec<usize>,
}

impl Document {
    pub fn has_label(&self, label: usize) -> bool {
        self.labels.binary_search(&label).is_ok()
    }
}

/// One line of the corpus file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub patient_id: String,
    pub text: String,
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub label_vocab: Vec<String>,
    /// Positive training documents per label. For split corpora this is
    /// always the training split's count.
    pub label_train_freq: Vec<usize>,
    pub vocab: Vocabulary,
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Fixed token vocabulary; unseen tokens map to UNK. When absent a
    /// vocabulary is built from the file with `min_freq` 1.
    pub vocab: Option<Vocabulary>,
    /// Fixed label vocabulary; unknown labels are a validation error. When
    /// absent, the sorted set of label names in the file is used.
    pub labels: Option<Vec<String>>,
    pub max_len: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            vocab: None,
            labels: None,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

/// Reads a line-delimited JSON corpus.
pub fn load_corpus(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Corpus> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push((i + 1, rec));
    }
    Corpus::from_records(records, opts).map_err(|e| match e {
        Error::Parse { line, message, .. } => Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        },
        other => other,
    })
}

impl Corpus {
    /// Builds a corpus from `(line number, record)` pairs.
    pub fn from_records(records: Vec<(usize, Record)>, opts: &LoadOptions) -> Result<Self> {
        let label_vocab = match &opts.labels {
            Some(l) => l.clone(),
            None => {
                let mut names: Vec<String> = records
                    .iter()
                    .flat_map(|(_, r)| r.labels.iter().cloned())
                    .collect();
                names.sort();
                names.dedup();
                names
            }
        };
        let label_index: HashMap<&str, usize> = label_vocab
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();

        let mut documents = Vec::with_capacity(records.len());
        for (line, rec) in records {
            let mut words = tokenize(&rec.text);
            if words.is_empty() {
                return Err(Error::Parse {
                    path: Default::default(),
                    line,
                    message: format!("document `{}` has no tokens", rec.id),
                });
            }
            words.truncate(opts.max_len.max(1));
            let mut labels = Vec::with_capacity(rec.labels.len());
            for name in &rec.labels {
                match label_index.get(name.as_str()) {
                    Some(&i) => labels.push(i),
                    None => {
                        return Err(Error::Validation(format!(
                            "line {line}: unknown label `{name}` in document `{}`",
                            rec.id
                        )))
                    }
                }
            }
            labels.sort_unstable();
            labels.dedup();
            documents.push(Document {
                id: rec.id,
                patient_id: rec.patient_id,
                text: rec.text,
                words,
                tokens: Vec::new(),
                labels,
            });
        }

        let vocab = match &opts.vocab {
            Some(v) => v.clone(),
            None => Vocabulary::from_word_lists(documents.iter().map(|d| d.words.as_slice()), 1),
        };
        let mut corpus = Corpus {
            documents,
            label_train_freq: vec![0; label_vocab.len()],
            label_vocab,
            vocab,
        };
        corpus.reindex_tokens();
        corpus.label_train_freq = corpus.label_counts();
        Ok(corpus)
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn n_labels(&self) -> usize {
        self.label_vocab.len()
    }

    /// Positive document count per label in this corpus.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.label_vocab.len()];
        for d in &self.documents {
            for &l in &d.labels {
                counts[l] += 1;
            }
        }
        counts
    }

    pub fn label_id(&self, name: &str) -> Option<usize> {
        self.label_vocab.iter().position(|l| l == name)
    }

    pub fn document(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }

    /// Returns a copy whose token ids follow `vocab`.
    pub fn with_vocab(&self, vocab: &Vocabulary) -> Corpus {
        let mut c = self.clone();
        c.vocab = vocab.clone();
        c.reindex_tokens();
        c
    }

    fn reindex_tokens(&mut self) {
        for d in &mut self.documents {
            d.tokens = self.vocab.encode(&d.words);
        }
    }

    pub fn to_records(&self) -> Vec<Record> {
        self.documents
            .iter()
            .map(|d| Record {
                id: d.id.clone(),
                patient_id: d.patient_id.clone(),
                text: d.text.clone(),
                labels: d.labels.iter().map(|&l| self.label_vocab[l].clone()).collect(),
            })
            .collect()
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for rec in self.to_records() {
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    fn subset(&self, keep: impl Fn(&Document) -> bool) -> Corpus {
        Corpus {
            documents: self.documents.iter().filter(|d| keep(d)).cloned().collect(),
            label_vocab: self.label_vocab.clone(),
            label_train_freq: self.label_train_freq.clone(),
            vocab: self.vocab.clone(),
        }
    }
}

pub fn read_label_vocab(path: impl AsRef<Path>) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().to_string())
        .collect())
}

pub fn write_label_vocab(labels: &[String], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::new();
    for l in labels {
        s.push_str(l);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

/// Patient-disjoint train/val/test split.
///
/// Patients (in order of first appearance) are shuffled with `seed`; the
/// first `round(train * P)` go to train, the next `round(val * P)` to
/// validation and the rest to test. All three splits carry the training
/// split's label frequencies.
pub fn split(corpus: &Corpus, ratios: SplitRatios, seed: u64) -> Result<Splits> {
    let SplitRatios { train, val, test } = ratios;
    if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r))
        || (train + val + test - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split ratios must be in [0,1] and sum to 1, got {train}/{val}/{test}"
        )));
    }
    let mut patients: Vec<&str> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for d in &corpus.documents {
        if seen.insert(d.patient_id.as_str()) {
            patients.push(&d.patient_id);
        }
    }
    let n = patients.len();
    if n < 3 {
        return Err(Error::Config(format!(
            "need at least 3 patients for a 3-way split, found {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let n_train = ((train * n as f64).round() as usize).min(n);
    let n_val = ((val * n as f64).round() as usize).min(n - n_train);

    let mut assignment: HashMap<&str, u8> = HashMap::with_capacity(n);
    for (i, p) in patients.iter().enumerate() {
        let part = if i < n_train {
            0
        } else if i < n_train + n_val {
            1
        } else {
            2
        };
        assignment.insert(p, part);
    }
    let part_of = |d: &Document| assignment[d.patient_id.as_str()];
    let train = corpus.subset(|d| part_of(d) == 0);
    let freq = train.label_counts();
    let mut splits = Splits {
        val: corpus.subset(|d| part_of(d) == 1),
        test: corpus.subset(|d| part_of(d) == 2),
        train,
    };
    for c in [&mut splits.train, &mut splits.val, &mut splits.test] {
        c.label_train_freq = freq.clone();
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn rec(id: &str, patient: &str, text: &str, labels: &[&str]) -> (usize, Record) {
        (
            1,
            Record {
                id: id.into(),
                patient_id: patient.into(),
                text: text.into(),
                labels: labels.iter().map(|s| s.to_string()).collect(),
            },
        )
    }

    fn write(dir: &Path, lines: &[&str]) -> std::path::PathBuf {
        let p = dir.join("c.jsonl");
        fs::write(&p, lines.join("\n")).unwrap();
        p
    }

    #[test]
    fn loads_minimal_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            &[r#"{"id":"d1","patient_id":"p1","text":"fever cough","labels":["PNA"]}"#],
        );
        let c = load_corpus(&p, &LoadOptions::default()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.documents[0].tokens.len(), 2);
        assert_eq!(c.documents[0].labels, vec![0]);
        assert_eq!(c.label_vocab, ["PNA"]);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &[]);
        let c = load_corpus(&p, &LoadOptions::default()).unwrap();
        assert!(c.is_empty());
        assert_eq!(c.n_labels(), 0);
    }

    #[test]
    fn long_text_is_truncated() {
        let text = vec!["tok"; 700].join(" ");
        let c = Corpus::from_records(vec![rec("d", "p", &text, &[])], &LoadOptions::default())
            .unwrap();
        assert_eq!(c.documents[0].tokens.len(), 512);
    }

    #[test]
    fn missing_field_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            &[
                r#"{"id":"d1","patient_id":"p1","text":"a","labels":[]}"#,
                r#"{"id":"d2","patient_id":"p1","labels":[]}"#,
            ],
        );
        match load_corpus(&p, &LoadOptions::default()) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("text"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_label_with_fixed_vocab() {
        let opts = LoadOptions {
            labels: Some(vec!["A".into()]),
            ..Default::default()
        };
        let err = Corpus::from_records(vec![rec("d", "p", "x", &["B"])], &opts).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn fixed_vocab_maps_unseen_to_unk() {
        let vocab = Vocabulary::from_tokens(["fever"]);
        let opts = LoadOptions {
            vocab: Some(vocab),
            ..Default::default()
        };
        let c = Corpus::from_records(vec![rec("d", "p", "fever chills", &[])], &opts).unwrap();
        assert_eq!(c.documents[0].tokens, vec![3, UNK]);
    }

    fn patients_corpus(docs_per_patient: &[usize]) -> Corpus {
        let mut records = Vec::new();
        for (p, &n) in docs_per_patient.iter().enumerate() {
            for k in 0..n {
                records.push(rec(&format!("d{p}_{k}"), &format!("p{p}"), "some text", &["A"]));
            }
        }
        Corpus::from_records(records, &LoadOptions::default()).unwrap()
    }

    fn patient_set(c: &Corpus) -> HashSet<String> {
        c.documents.iter().map(|d| d.patient_id.clone()).collect()
    }

    #[test]
    fn split_ten_patients() {
        let c = patients_corpus(&[1; 10]);
        let s = split(&c, SplitRatios::default(), 3).unwrap();
        assert_eq!(
            (patient_set(&s.train).len(), patient_set(&s.val).len(), patient_set(&s.test).len()),
            (8, 1, 1)
        );
    }

    #[test]
    fn patient_documents_stay_together() {
        let mut sizes = vec![1; 9];
        sizes.insert(4, 3);
        let c = patients_corpus(&sizes);
        for seed in 0..20 {
            let s = split(&c, SplitRatios::default(), seed).unwrap();
            let holders = [&s.train, &s.val, &s.test]
                .iter()
                .filter(|c| c.documents.iter().any(|d| d.patient_id == "p4"))
                .count();
            assert_eq!(holders, 1);
            let with_p4 = [&s.train, &s.val, &s.test]
                .iter()
                .map(|c| c.documents.iter().filter(|d| d.patient_id == "p4").count())
                .max()
                .unwrap();
            assert_eq!(with_p4, 3);
        }
    }

    #[test]
    fn split_rejects_too_few_patients() {
        let c = patients_corpus(&[2, 2]);
        assert!(matches!(split(&c, SplitRatios::default(), 0), Err(Error::Config(_))));
        let bad = SplitRatios {
            train: 0.5,
            val: 0.1,
            test: 0.1,
        };
        assert!(matches!(split(&patients_corpus(&[1; 5]), bad, 0), Err(Error::Config(_))));
    }

    proptest::proptest! {
        #[test]
        fn splits_are_patient_disjoint(
            sizes in proptest::collection::vec(1usize..4, 3..40),
            seed in 0u64..1000,
            train in 0.3f64..0.9,
        ) {
            let c = patients_corpus(&sizes);
            let val = (1.0 - train) / 2.0;
            let ratios = SplitRatios { train, val, test: 1.0 - train - val };
            let s = split(&c, ratios, seed).unwrap();
            let (a, b, t) = (patient_set(&s.train), patient_set(&s.val), patient_set(&s.test));
            proptest::prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&t) && b.is_disjoint(&t));
            proptest::prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), c.len());
            let p = sizes.len() as f64;
            proptest::prop_assert!((a.len() as f64 - train * p).abs() <= 1.0);
            proptest::prop_assert!((b.len() as f64 - val * p).abs() <= 1.0);
        }
    }
}
