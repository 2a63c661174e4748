use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{Corpus, LoadOptions, Record};
use crate::{Error, Result};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
/// Syllables used for indicative words (two syllables each).
const INDICATIVE_SYLLABLES: usize = 64;
/// Number of distinct indicative words available.
pub const INDICATIVE_POOL: usize = INDICATIVE_SYLLABLES * INDICATIVE_SYLLABLES;

/// Parameters of the planted-signal corpus generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_labels: usize,
    pub zipf_exponent: f64,
    pub n_docs: usize,
    pub tokens_per_doc: usize,
    pub indicative_tokens_per_label: usize,
    pub noise_vocab_size: usize,
    pub mean_labels_per_doc: f64,
    /// Share of token positions filled with indicative tokens.
    pub indicative_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_labels: 50,
            zipf_exponent: 1.2,
            n_docs: 2000,
            tokens_per_doc: 32,
            indicative_tokens_per_label: 8,
            noise_vocab_size: 1000,
            mean_labels_per_doc: 3.0,
            indicative_rate: 0.3,
            seed: 0,
        }
    }
}

/// Planted indicative tokens per label name.
pub type SyntheticTruth = BTreeMap<String, Vec<String>>;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = self.n_labels > 0
            && self.n_docs > 0
            && self.tokens_per_doc > 0
            && self.indicative_tokens_per_label > 0
            && self.noise_vocab_size > 0
            && self.mean_labels_per_doc > 0.0
            && self.zipf_exponent >= 0.0;
        if !positive {
            return Err(Error::Config(
                "synthetic spec counts must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.indicative_rate) {
            return Err(Error::Config("indicative_rate must be in [0,1]".into()));
        }
        let needed = self.n_labels * self.indicative_tokens_per_label;
        if needed > INDICATIVE_POOL {
            return Err(Error::Config(format!(
                "{} labels x {} indicative tokens = {needed} exceeds the indicative vocabulary of {INDICATIVE_POOL}",
                self.n_labels, self.indicative_tokens_per_label
            )));
        }
        let noise_pool = syllables().len().pow(3);
        if self.noise_vocab_size > noise_pool {
            return Err(Error::Config(format!(
                "noise_vocab_size {} exceeds the noise vocabulary of {noise_pool}",
                self.noise_vocab_size
            )));
        }
        Ok(())
    }

    pub fn label_names(&self) -> Vec<String> {
        let width = (self.n_labels.saturating_sub(1)).to_string().len().max(2);
        (0..self.n_labels).map(|i| format!("D{i:0width$}")).collect()
    }
}

fn syllables() -> Vec<String> {
    let mut out = Vec::with_capacity(CONSONANTS.len() * VOWELS.len());
    for &c in CONSONANTS {
        for &v in VOWELS {
            out.push(String::from_utf8(vec![c, v]).unwrap());
        }
    }
    out
}

fn indicative_word(syl: &[String], i: usize) -> String {
    format!("{}{}", syl[i / INDICATIVE_SYLLABLES], syl[i % INDICATIVE_SYLLABLES])
}

fn noise_word(syl: &[String], i: usize) -> String {
    let n = syl.len();
    format!("{}{}{}", syl[i / (n * n)], syl[(i / n) % n], syl[i % n])
}

/// Generates a corpus whose labels follow a Zipf law and whose documents
/// mix planted per-label indicative tokens with uniform noise.
///
/// Indicative words have four letters, noise words six, so the two sets
/// never overlap. Output is a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Corpus, SyntheticTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let syl = syllables();
    let k = spec.indicative_tokens_per_label;

    let picks = index::sample(&mut rng, INDICATIVE_POOL, spec.n_labels * k).into_vec();
    let indicative: Vec<Vec<String>> = picks
        .chunks(k)
        .map(|ch| ch.iter().map(|&i| indicative_word(&syl, i)).collect())
        .collect();
    let noise: Vec<String> = index::sample(&mut rng, syl.len().pow(3), spec.noise_vocab_size)
        .into_iter()
        .map(|i| noise_word(&syl, i))
        .collect();

    let weights: Vec<f64> = (1..=spec.n_labels)
        .map(|r| (r as f64).powf(-spec.zipf_exponent))
        .collect();
    let poisson = Poisson::new(spec.mean_labels_per_doc)
        .map_err(|e| Error::Config(format!("mean_labels_per_doc: {e}")))?;
    let names = spec.label_names();

    let n_indicative = (spec.indicative_rate * spec.tokens_per_doc as f64).round() as usize;
    let mut records = Vec::with_capacity(spec.n_docs);
    let mut patient = 0usize;
    let mut patient_left = 0usize;
    for d in 0..spec.n_docs {
        if patient_left == 0 {
            patient += 1;
            let u: f64 = rng.random();
            patient_left = if u < 0.7 {
                1
            } else if u < 0.9 {
                2
            } else {
                3
            };
        }
        patient_left -= 1;

        let count = (poisson.sample(&mut rng) as usize).clamp(1, spec.n_labels);
        let labels = weighted_without_replacement(&weights, count, &mut rng);

        let mut slots: Vec<usize> = index::sample(&mut rng, spec.tokens_per_doc, n_indicative).into_vec();
        slots.sort_unstable();
        let mut words: Vec<&str> = vec![""; spec.tokens_per_doc];
        for (i, &pos) in slots.iter().enumerate() {
            let label = labels[i % labels.len()];
            words[pos] = &indicative[label][rng.random_range(0..k)];
        }
        for w in words.iter_mut().filter(|w| w.is_empty()) {
            *w = &noise[rng.random_range(0..noise.len())];
        }

        records.push((
            d + 1,
            Record {
                id: format!("doc{d:05}"),
                patient_id: format!("P{patient:05}"),
                text: words.join(" "),
                labels: labels.iter().map(|&l| names[l].clone()).collect(),
            },
        ));
    }

    let opts = LoadOptions {
        labels: Some(names.clone()),
        max_len: spec.tokens_per_doc.max(super::DEFAULT_MAX_LEN),
        ..Default::default()
    };
    let corpus = Corpus::from_records(records, &opts)?;
    let truth = names.into_iter().zip(indicative).collect();
    Ok((corpus, truth))
}

/// Draws `count` distinct indices with probability proportional to the
/// remaining weights. Returned sorted.
fn weighted_without_replacement(weights: &[f64], count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut w = weights.to_vec();
    let mut total: f64 = w.iter().sum();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut r = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &wi) in w.iter().enumerate() {
            if wi == 0.0 {
                continue;
            }
            pick = Some(i);
            if r < wi {
                break;
            }
            r -= wi;
        }
        let i = pick.expect("positive weight left");
        out.push(i);
        total -= w[i];
        w[i] = 0.0;
    }
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_labels: 6,
            n_docs: 80,
            tokens_per_doc: 20,
            noise_vocab_size: 50,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn single_label_spec_labels_every_document() {
        let spec = SyntheticSpec {
            n_labels: 1,
            mean_labels_per_doc: 1.0,
            ..small(1)
        };
        let (c, truth) = generate_synthetic(&spec).unwrap();
        assert!(c.documents.iter().all(|d| d.labels == vec![0]));
        assert_eq!(truth.len(), 1);
    }

    #[test]
    fn same_seed_same_corpus() {
        let (a, ta) = generate_synthetic(&small(9)).unwrap();
        let (b, tb) = generate_synthetic(&small(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate_synthetic(&small(10)).unwrap();
        assert_ne!(a.documents, c.documents);
    }

    #[test]
    fn planted_tokens_are_disjoint_and_present() {
        let (c, truth) = generate_synthetic(&small(4)).unwrap();
        let mut all = HashSet::new();
        for toks in truth.values() {
            assert_eq!(toks.len(), 8);
            for t in toks {
                assert!(all.insert(t.clone()), "duplicate planted token {t}");
                assert_eq!(t.len(), 4);
            }
        }
        for d in &c.documents {
            assert_eq!(d.tokens.len(), 20);
            // 30% of 20 positions = 6 indicative tokens, round-robin over labels
            let planted: usize = d.words.iter().filter(|w| all.contains(*w)).count();
            assert_eq!(planted, 6);
            for &l in &d.labels {
                let own = &truth[&c.label_vocab[l]];
                if d.labels.len() <= 6 {
                    assert!(d.words.iter().any(|w| own.contains(w)));
                }
            }
            for w in d.words.iter().filter(|w| all.contains(*w)) {
                let owner = truth.iter().find(|(_, v)| v.contains(w)).unwrap().0;
                assert!(d.labels.contains(&c.label_id(owner).unwrap()));
            }
        }
    }

    #[test]
    fn too_many_indicative_tokens_is_config_error() {
        let spec = SyntheticSpec {
            n_labels: 600,
            indicative_tokens_per_label: 8,
            ..small(0)
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn label_frequencies_are_monotone_in_rank() {
        for seed in 0..5 {
            let spec = SyntheticSpec {
                n_labels: 8,
                n_docs: 10_000,
                tokens_per_doc: 4,
                noise_vocab_size: 10,
                seed,
                ..Default::default()
            };
            let (c, _) = generate_synthetic(&spec).unwrap();
            let counts = c.label_counts();
            for w in counts.windows(2) {
                assert!(w[0] >= w[1], "seed {seed}: {counts:?}");
            }
        }
    }

    #[test]
    fn tail_inversions_stay_within_sampling_noise() {
        // Adjacent tail ranks differ by a few percent in expectation, so
        // with 50 labels an inversion can occur by chance; it must stay
        // within three standard deviations of a difference of counts.
        let spec = SyntheticSpec {
            n_docs: 10_000,
            tokens_per_doc: 4,
            noise_vocab_size: 10,
            seed: 5,
            ..Default::default()
        };
        let (c, _) = generate_synthetic(&spec).unwrap();
        let counts = c.label_counts();
        for w in counts.windows(2) {
            let (a, b) = (w[0] as f64, w[1] as f64);
            assert!(b - a <= 3.0 * (a + b).sqrt(), "{counts:?}");
        }
        let blocks: Vec<usize> = counts.chunks(10).map(|b| b.iter().sum()).collect();
        for w in blocks.windows(2) {
            assert!(w[0] > w[1], "{blocks:?}");
        }
    }

    #[test]
    fn desk_scale_label_counts_match_simulation_oracle() {
        // Expected counts from an independent Monte Carlo of the same
        // sampling process (Poisson(3) label count clamped to >= 1, Zipf 1.2
        // weights, draws without replacement), 200 replicates of 2000 docs.
        // The with-replacement approximation slots/H = 1843 overstates the
        // head because a document cannot hold a label twice.
        const EXPECTED_TOP: f64 = 1261.9;
        const EXPECTED_RAREST: f64 = 20.9;
        let mut top = 0.0;
        let mut rarest = 0.0;
        let seeds = 5;
        for seed in 0..seeds {
            let spec = SyntheticSpec {
                tokens_per_doc: 4,
                seed,
                ..Default::default()
            };
            let (c, _) = generate_synthetic(&spec).unwrap();
            let counts = c.label_counts();
            top += counts[0] as f64;
            rarest += counts[49] as f64;
        }
        top /= seeds as f64;
        rarest /= seeds as f64;
        assert!((top - EXPECTED_TOP).abs() < 0.03 * EXPECTED_TOP, "top {top}");
        assert!((rarest - EXPECTED_RAREST).abs() < 4.0, "rarest {rarest}");
    }
}
