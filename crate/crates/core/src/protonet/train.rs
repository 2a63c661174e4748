//! Mini-batch training with AdamW and a linear warmup/decay schedule.

use std::collections::HashSet;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    bce_logit_grad, document_loss, forward_params, backward_params, init_attention,
    init_prototypes, AttentionCoverage, ModelParams, ModelVariant, ProtoModel,
};
use crate::corpus::{compute_tfidf, Corpus, MASK};
use crate::encoder::EncoderConfig;
use crate::metrics::MetricReport;
use crate::params::ParamSet;
use crate::{Error, Real, Result};

pub const DEFAULT_WARMUP_FRACTION: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Encoder weights except the reduction layer.
    pub lr_encoder: f64,
    /// Reduction layer, attention vectors, prototypes and linear heads.
    pub lr_head: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Defaults to 5% of `total_steps`.
    pub warmup_steps: Option<usize>,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub proto_mean_init: bool,
    pub attention_tfidf_init: bool,
    /// TF-IDF threshold for informative tokens.
    pub h: f64,
    /// Initialize prototypes from mean-pooled vectors instead of label-wise ones.
    pub pooled_prototype_init: bool,
    /// Steps between validation passes.
    pub eval_every: usize,
    /// Validation loss per (document, label) term below which training
    /// counts as converged.
    pub convergence_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_encoder: 5e-5,
            lr_head: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: None,
            total_steps: 1000,
            batch_size: 10,
            seed: 0,
            proto_mean_init: true,
            attention_tfidf_init: false,
            h: 0.05,
            pooled_prototype_init: false,
            eval_every: 50,
            convergence_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_encoder > 0.0 && self.lr_head > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must be in [0,1)".into()));
        }
        if self.warmup() > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup(),
                self.total_steps
            )));
        }
        Ok(())
    }

    pub fn warmup(&self) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| (DEFAULT_WARMUP_FRACTION * self.total_steps as f64).round() as usize)
    }
}

/// Learning rate at 0-based `step`: linear warmup over `warmup` steps, then
/// linear decay reaching 0 at `total`.
pub fn lr_at(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        base * (total - step) as f64 / (total - warmup).max(1) as f64
    }
}

/// Adaptive moment estimation with decoupled weight decay.
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update; `lr` maps a tensor name to its learning rate.
    pub fn step<P: ParamSet<T>>(&mut self, params: &mut P, grads: &P, lr: impl Fn(&str) -> f64) {
        let grads = grads.tensors();
        if self.m.is_empty() {
            self.m = grads.iter().map(|(_, g)| vec![T::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let c1 = T::lit(1.0 - self.beta1.powi(self.t));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t));
        let eps = T::lit(self.eps);
        for (i, ((name, mut p), (_, g))) in params.tensors_mut().into_iter().zip(grads).enumerate() {
            let rate = lr(&name);
            let step = T::lit(rate);
            let decay = T::lit(1.0 - rate * self.weight_decay);
            let p = p.as_slice_mut().expect("contiguous parameter");
            let g = g.as_slice().expect("contiguous gradient");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] = p[k] * decay - step * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

fn is_encoder_group(name: &str) -> bool {
    name.starts_with("encoder.") && !name.starts_with("encoder.reduce_")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub val_loss_per_term: f64,
    pub val_roc_auc_macro: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub variant: ModelVariant,
    pub total_steps: usize,
    pub warmup_steps: usize,
    /// Summed batch loss per step.
    pub step_losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    /// Step of the kept checkpoint; `None` when no validation ran.
    pub best_step: Option<usize>,
    pub best_val_roc_auc_macro: Option<f64>,
    /// First evaluated step with validation loss per term below the
    /// configured threshold.
    pub steps_to_convergence: Option<usize>,
    pub attention_coverage: Option<AttentionCoverage>,
}

/// Loss and ranking metrics of a model on a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub loss_per_term: f64,
    pub report: MetricReport,
}

/// Ranking scores (the sigmoid argument) and probabilities, documents x
/// labels, computed in parallel and assembled in document order.
pub fn predict_corpus<T: Real + Send + Sync>(
    model: &ProtoModel<T>,
    corpus: &Corpus,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let c = model.n_labels();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = crate::thread_pool().install(|| {
        corpus
            .documents
            .par_iter()
            .map(|d| {
                let r = model.forward(d)?;
                let logits = if model.variant.is_proto() {
                    r.scores.iter().map(|&s| -s.as_f64()).collect()
                } else {
                    r.scores.iter().map(|&s| s.as_f64()).collect()
                };
                Ok((logits, r.probabilities.iter().map(|&p| p.as_f64()).collect()))
            })
            .collect::<Result<_>>()
    })?;
    let mut logits = Array2::zeros((rows.len(), c));
    let mut probs = Array2::zeros((rows.len(), c));
    for (i, (l, p)) in rows.into_iter().enumerate() {
        logits.row_mut(i).assign(&Array1::from(l));
        probs.row_mut(i).assign(&Array1::from(p));
    }
    Ok((logits, probs))
}

pub fn truth_matrix(corpus: &Corpus, n_labels: usize) -> Array2<bool> {
    let mut y = Array2::from_elem((corpus.len(), n_labels), false);
    for (i, d) in corpus.documents.iter().enumerate() {
        for &l in &d.labels {
            y[[i, l]] = true;
        }
    }
    y
}

/// Summed and per-term loss plus the metric report of `model` on `corpus`.
pub fn evaluate<T: Real + Send + Sync>(model: &ProtoModel<T>, corpus: &Corpus) -> Result<Evaluation> {
    let (logits, probs) = predict_corpus(model, corpus)?;
    let truth = truth_matrix(corpus, model.n_labels());
    let loss = super::loss(probs.view(), truth.view());
    let terms = (corpus.len() * model.n_labels()).max(1);
    let report = MetricReport::compute(logits.view(), truth.view(), &model.labels, &model.label_train_freq)?;
    Ok(Evaluation {
        loss,
        loss_per_term: loss / terms as f64,
        report,
    })
}

fn check_compatible(train: &Corpus, val: &Corpus) -> Result<()> {
    if train.label_vocab != val.label_vocab {
        return Err(Error::Validation("train and validation label vocabularies differ".into()));
    }
    if train.vocab.content_hash() != val.vocab.content_hash() {
        return Err(Error::Validation("train and validation token vocabularies differ".into()));
    }
    let patients: HashSet<&str> = train.documents.iter().map(|d| d.patient_id.as_str()).collect();
    if let Some(d) = val.documents.iter().find(|d| patients.contains(d.patient_id.as_str())) {
        if !std::ptr::eq(train, val) {
            return Err(Error::Validation(format!(
                "patient {} appears in both train and validation",
                d.patient_id
            )));
        }
    }
    Ok(())
}

/// Builds and initializes a model for `train`, then optimizes the summed
/// BCE loss. The checkpoint with the best validation macro ROC AUC is kept
/// (ties go to the lower validation loss). Passing the training corpus as
/// `val` is allowed and evaluates on the training data.
pub fn train(
    train: &Corpus,
    val: &Corpus,
    encoder_config: EncoderConfig,
    variant: ModelVariant,
    config: &TrainConfig,
) -> Result<(ProtoModel<f32>, TrainStats)> {
    config.validate()?;
    check_compatible(train, val)?;
    if train.is_empty() && config.total_steps > 0 {
        return Err(Error::Validation("training corpus is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ProtoModel::<f32>::new(
        encoder_config,
        variant,
        train.label_vocab.clone(),
        train.vocab.clone(),
        train.label_counts(),
        &mut rng,
    )?;

    let mut stats = TrainStats {
        variant,
        total_steps: config.total_steps,
        warmup_steps: config.warmup(),
        step_losses: Vec::with_capacity(config.total_steps),
        evals: Vec::new(),
        best_step: None,
        best_val_roc_auc_macro: None,
        steps_to_convergence: None,
        attention_coverage: None,
    };
    if config.attention_tfidf_init && variant.is_labelwise() {
        let table = compute_tfidf(train);
        let (w, coverage) = init_attention(&model, train, &table, config.h, &mut rng)?;
        model.params.head.attention = w;
        stats.attention_coverage = Some(coverage);
    }
    if config.proto_mean_init && variant.is_proto() {
        model.params.head.prototypes =
            init_prototypes(&model, train, config.pooled_prototype_init, &mut rng)?;
    }
    if config.total_steps == 0 {
        return Ok((model, stats));
    }

    let pool = crate::thread_pool();
    let mut adam = AdamW::new(config);
    let warmup = config.warmup();
    let total = config.total_steps;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by(|&a, &b| train.documents[a].id.cmp(&train.documents[b].id));
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let bs = config.batch_size.min(train.len());
    let mut best: Option<(f64, f64, ModelParams<f32>, Vec<Option<f64>>)> = None;

    let mut evaluate_now = |model: &ProtoModel<f32>, step: usize, stats: &mut TrainStats| -> Result<()> {
        if val.is_empty() {
            return Ok(());
        }
        let e = evaluate(model, val)?;
        let auc = e.report.roc_auc_macro;
        stats.evals.push(EvalPoint {
            step,
            val_loss_per_term: e.loss_per_term,
            val_roc_auc_macro: auc,
        });
        if let Some(th) = config.convergence_loss {
            if stats.steps_to_convergence.is_none() && e.loss_per_term < th {
                stats.steps_to_convergence = Some(step);
            }
        }
        let key = auc.unwrap_or(f64::NEG_INFINITY);
        let better = match &best {
            None => true,
            Some((a, l, _, _)) => key > *a || (key == *a && e.loss_per_term < *l),
        };
        if better {
            let per_label = e.report.per_label.iter().map(|l| l.roc_auc).collect();
            best = Some((key, e.loss_per_term, model.params.clone(), per_label));
            stats.best_step = Some(step);
            stats.best_val_roc_auc_macro = auc;
        }
        Ok(())
    };
    evaluate_now(&model, 0, &mut stats)?;

    for step in 0..total {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let mut batch: Vec<usize> = order[cursor..cursor + bs].to_vec();
        cursor += bs;
        batch.sort_by(|&a, &b| train.documents[a].id.cmp(&train.documents[b].id));

        let per_doc: Vec<(f64, ModelParams<f32>)> = pool.install(|| {
            batch
                .par_iter()
                .map(|&i| {
                    let doc = &train.documents[i];
                    let fwd = forward_params(&model.params, &model.encoder_config, variant, &doc.tokens)?;
                    let loss = document_loss(fwd.result.probabilities.view(), &doc.labels);
                    let dlogit = bce_logit_grad(fwd.result.probabilities.view(), &doc.labels);
                    let mut g = model.params.zeros_like();
                    backward_params(&fwd, dlogit.view(), &model.params, &model.encoder_config, variant, &mut g)?;
                    Ok((loss, g))
                })
                .collect::<Result<_>>()
        })?;
        let mut grads = model.params.zeros_like();
        let mut loss = 0.0;
        for (l, g) in &per_doc {
            loss += l;
            grads.accumulate(g);
        }
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite {
                step,
                batch: batch.iter().map(|&i| train.documents[i].id.clone()).collect(),
            });
        }
        stats.step_losses.push(loss);

        let mask_row = model.params.encoder.token_embedding.row(MASK as usize).to_owned();
        let lr_enc = lr_at(config.lr_encoder, step, warmup, total);
        let lr_head = lr_at(config.lr_head, step, warmup, total);
        adam.step(&mut model.params, &grads, |name| {
            if is_encoder_group(name) {
                lr_enc
            } else {
                lr_head
            }
        });
        model
            .params
            .encoder
            .token_embedding
            .row_mut(MASK as usize)
            .assign(&mask_row);
        if !model.params.all_finite() {
            return Err(Error::NonFinite {
                step,
                batch: batch.iter().map(|&i| train.documents[i].id.clone()).collect(),
            });
        }

        if (step + 1) % config.eval_every == 0 || step + 1 == total {
            evaluate_now(&model, step + 1, &mut stats)?;
        }
    }

    if let Some((_, _, params, per_label)) = best {
        model.params = params;
        model.label_val_roc_auc = per_label;
    }
    Ok((model, stats))
}
