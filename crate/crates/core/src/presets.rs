//! Named bundles of corpus spec, split ratios, encoder and training
//! configuration.

use serde::{Deserialize, Serialize};

use crate::corpus::{generate_synthetic, split, Corpus, SplitRatios, Splits, SyntheticSpec, SyntheticTruth};
use crate::encoder::EncoderConfig;
use crate::protonet::TrainConfig;
use crate::{Error, Result};

pub const PRESET_NAMES: [&str; 3] = ["overfit", "desk", "rare-labels"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub spec: SyntheticSpec,
    pub ratios: SplitRatios,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    /// Labels analysed by the faithfulness evaluation.
    pub designated_labels: Vec<String>,
    /// Train and evaluate on the whole corpus without splitting.
    pub no_split: bool,
}

fn encoder(embed_dim: usize, blocks: usize, output_dim: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 0,
        embed_dim,
        blocks,
        heads: 4,
        ff_dim: 4 * embed_dim,
        output_dim,
        max_len: crate::corpus::DEFAULT_MAX_LEN,
    }
}

pub fn preset(name: &str) -> Result<Preset> {
    match name {
        "overfit" => Ok(Preset {
            name: name.into(),
            spec: SyntheticSpec {
                n_labels: 4,
                zipf_exponent: 0.5,
                n_docs: 32,
                tokens_per_doc: 16,
                noise_vocab_size: 200,
                mean_labels_per_doc: 1.5,
                ..Default::default()
            },
            ratios: SplitRatios::default(),
            encoder: encoder(32, 1, 16),
            train: TrainConfig {
                lr_encoder: 1e-3,
                lr_head: 1e-2,
                total_steps: 500,
                batch_size: 8,
                eval_every: 25,
                ..Default::default()
            },
            designated_labels: vec!["D00".into(), "D01".into(), "D02".into()],
            no_split: true,
        }),
        "desk" => Ok(Preset {
            name: name.into(),
            spec: SyntheticSpec::default(),
            ratios: SplitRatios::default(),
            encoder: encoder(64, 1, 32),
            train: TrainConfig {
                lr_encoder: 3e-2,
                lr_head: 1e-2,
                total_steps: 3000,
                batch_size: 10,
                eval_every: 50,
                convergence_loss: Some(0.12),
                ..Default::default()
            },
            designated_labels: vec!["D01".into(), "D04".into(), "D09".into()],
            no_split: false,
        }),
        "rare-labels" => Ok(Preset {
            name: name.into(),
            spec: SyntheticSpec {
                n_labels: 80,
                zipf_exponent: 1.4,
                n_docs: 2500,
                ..Default::default()
            },
            ratios: SplitRatios {
                train: 0.6,
                val: 0.2,
                test: 0.2,
            },
            encoder: encoder(64, 1, 32),
            train: TrainConfig {
                lr_encoder: 3e-2,
                lr_head: 1e-2,
                total_steps: 2000,
                batch_size: 10,
                eval_every: 50,
                ..Default::default()
            },
            designated_labels: vec!["D01".into(), "D04".into(), "D09".into()],
            no_split: false,
        }),
        other => Err(Error::Config(format!(
            "unknown preset `{other}` (expected one of {})",
            PRESET_NAMES.join(", ")
        ))),
    }
}

/// Corpus, planted truth and splits of a preset at `seed`. The corpus seed
/// and the split seed both derive from `seed`. For `no_split` presets all
/// three splits are the full corpus.
pub struct PresetData {
    pub corpus: Corpus,
    pub truth: SyntheticTruth,
    pub splits: Splits,
}

impl Preset {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.spec.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn generate(&self) -> Result<PresetData> {
        let (corpus, truth) = generate_synthetic(&self.spec)?;
        let splits = if self.no_split {
            let mut c = corpus.clone();
            c.label_train_freq = c.label_counts();
            Splits {
                train: c.clone(),
                val: c.clone(),
                test: c,
            }
        } else {
            split(&corpus, self.ratios, self.spec.seed)?
        };
        Ok(PresetData { corpus, truth, splits })
    }
}
