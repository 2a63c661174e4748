use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use protodx::corpus::{
    generate_synthetic, load_corpus, read_label_vocab, split, write_label_vocab, Corpus, LoadOptions, Record,
    SplitRatios, SyntheticSpec,
};
use protodx::explain::{
    explain_document, faithfulness, render_html, ExemplarIndex, ExplainOptions, ExplainedDocument, FaithfulnessReport,
    SaliencyMethod,
};
use protodx::metrics::MetricReport;
use protodx::presets::{preset, PRESET_NAMES};
use protodx::protonet::{evaluate, load_model, save_model, train, ModelVariant, ProtoModel};

use crate::manifest::{write_json, Manifest};

/// Bad flag combinations detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "protodx", version, about = "Prototype-distance multi-label text classification")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted label tokens and split it.
    GenData(GenDataArgs),
    /// Train a model and save the best validation checkpoint.
    Train(TrainArgs),
    /// Score a corpus and report ranking metrics.
    Eval(EvalArgs),
    /// Explain the predictions for one document.
    Explain(ExplainArgs),
    /// Measure how fast performance drops when salient tokens are masked.
    Faithfulness(FaithfulnessArgs),
    /// Serve predictions and exemplars over HTTP.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn on(self) -> bool {
        matches!(self, OnOff::On)
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Html,
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    /// Named preset (overfit, desk, rare-labels).
    #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
    preset: Option<String>,
    /// JSON file with generator parameters.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Label vocabulary, one per line. Defaults to the labels seen in the
    /// training and validation files.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value = "proto_labelwise")]
    variant: String,
    /// Preset supplying encoder and optimizer settings.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Output dimension of the reduction layer.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, value_enum)]
    attn_init: Option<OnOff>,
    #[arg(long, value_enum)]
    proto_init: Option<OnOff>,
    /// TF-IDF threshold for attention initialization.
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr_encoder: Option<f64>,
    #[arg(long)]
    lr_head: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Also print the frequency-bucket table to stderr.
    #[arg(long)]
    buckets: bool,
    /// Directory for metrics.json and the manifest; stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    doc_id: String,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    /// Typical exemplars per label.
    #[arg(long, default_value_t = 0)]
    exemplars: usize,
    /// Corpus the exemplars are drawn from; defaults to --corpus.
    #[arg(long)]
    train_corpus: Option<PathBuf>,
    #[arg(long, default_value = "proto_attention")]
    method: String,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for the report and manifest; stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct FaithfulnessArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated label names.
    #[arg(long, value_delimiter = ',', required = true)]
    labels: Vec<String>,
    /// A saliency method, or `all`.
    #[arg(long, default_value = "all")]
    method: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Training corpus for the exemplar index.
    #[arg(long)]
    train_corpus: Option<PathBuf>,
    /// Origin allowed by CORS; repeatable.
    #[arg(long)]
    allow_origin: Vec<String>,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Explain(a) => explain_cmd(a),
        Command::Faithfulness(a) => faithfulness_cmd(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let (spec, ratios, no_split, extra) = match (&a.preset, &a.spec) {
        (Some(name), _) => {
            let p = preset(name)?.with_seed(a.seed);
            let extra = serde_json::to_value(&p)?;
            (p.spec, p.ratios, p.no_split, extra)
        }
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut spec: SyntheticSpec = serde_json::from_str(&text)
                .map_err(|e| protodx::Error::Config(format!("{}: {e}", path.display())))?;
            spec.seed = a.seed;
            (spec, SplitRatios::default(), false, Value::Null)
        }
        (None, None) => return Err(usage(format!("one of --preset ({}) or --spec is required", PRESET_NAMES.join(", ")))),
    };
    let (corpus, truth) = generate_synthetic(&spec)?;
    let out = &a.out;
    fs::create_dir_all(out)?;
    let mut manifest = Manifest::new(
        "gen-data",
        Some(a.seed),
        json!({ "args": a, "spec": spec, "ratios": ratios, "no_split": no_split, "preset": extra }),
    );
    corpus.write_jsonl(out.join("corpus.jsonl"))?;
    if no_split {
        for name in ["train", "val", "test"] {
            corpus.write_jsonl(out.join(format!("{name}.jsonl")))?;
        }
    } else {
        let s = split(&corpus, ratios, spec.seed)?;
        s.train.write_jsonl(out.join("train.jsonl"))?;
        s.val.write_jsonl(out.join("val.jsonl"))?;
        s.test.write_jsonl(out.join("test.jsonl"))?;
    }
    write_label_vocab(&corpus.label_vocab, out.join("labels.txt"))?;
    write_json(&out.join("truth.json"), &truth)?;
    for f in ["corpus.jsonl", "train.jsonl", "val.jsonl", "test.jsonl", "labels.txt", "truth.json"] {
        manifest.record(out, f)?;
    }
    manifest.write(out)?;
    eprintln!("wrote {} documents, {} labels to {}", corpus.len(), corpus.n_labels(), out.display());
    Ok(())
}

fn read_records(path: &Path) -> anyhow::Result<Vec<Record>> {
    let text = fs::read_to_string(path).map_err(protodx::Error::from).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                protodx::Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                }
                .into()
            })
        })
        .collect()
}

/// Loads a corpus under a model's vocabularies, with the model's training
/// label frequencies.
fn load_for_model(path: &Path, model: &ProtoModel<f32>) -> anyhow::Result<Corpus> {
    let opts = LoadOptions {
        vocab: Some(model.vocab.clone()),
        labels: Some(model.labels.clone()),
        max_len: model.encoder_config.max_len,
    };
    let mut c = load_corpus(path, &opts).with_context(|| format!("loading {}", path.display()))?;
    c.label_train_freq = model.label_train_freq.clone();
    Ok(c)
}

fn load_model_dir(path: &Path) -> anyhow::Result<ProtoModel<f32>> {
    load_model(path).with_context(|| format!("loading model from {}", path.display()))
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let variant: ModelVariant = a.variant.parse()?;
    let p = preset(&a.preset)?;
    let mut encoder = p.encoder.clone();
    let mut config = p.train.clone();
    config.seed = a.seed;
    if let Some(d) = a.dim {
        encoder.output_dim = d;
    }
    if let Some(v) = a.attn_init {
        config.attention_tfidf_init = v.on();
    }
    if let Some(v) = a.proto_init {
        config.proto_mean_init = v.on();
    }
    if let Some(h) = a.h {
        config.h = h;
    }
    if let Some(s) = a.steps {
        config.total_steps = s;
    }
    if let Some(lr) = a.lr_encoder {
        config.lr_encoder = lr;
    }
    if let Some(lr) = a.lr_head {
        config.lr_head = lr;
    }
    if let Some(b) = a.batch_size {
        config.batch_size = b;
    }
    config.validate()?;

    let labels = match &a.labels {
        Some(path) => read_label_vocab(path)?,
        None => {
            let mut names: Vec<String> = read_records(&a.train)?
                .into_iter()
                .chain(read_records(&a.val)?)
                .flat_map(|r| r.labels)
                .collect();
            names.sort();
            names.dedup();
            names
        }
    };
    let train_opts = LoadOptions {
        labels: Some(labels.clone()),
        max_len: encoder.max_len,
        ..Default::default()
    };
    let train_corpus = load_corpus(&a.train, &train_opts).with_context(|| format!("loading {}", a.train.display()))?;
    // Identical files mean "validate on the training data" (the overfit preset).
    let same_file = fs::read(&a.train)? == fs::read(&a.val)?;
    let val_corpus = if same_file {
        None
    } else {
        let opts = LoadOptions {
            vocab: Some(train_corpus.vocab.clone()),
            labels: Some(labels),
            max_len: encoder.max_len,
        };
        let mut v = load_corpus(&a.val, &opts).with_context(|| format!("loading {}", a.val.display()))?;
        v.label_train_freq = train_corpus.label_train_freq.clone();
        Some(v)
    };

    let out = a.out.clone();
    fs::create_dir_all(&out)?;
    let manifest_config = json!({ "args": &a, "variant": variant, "encoder": &encoder, "train": &config });
    let val = val_corpus.as_ref().unwrap_or(&train_corpus);
    let (model, stats) = match train(&train_corpus, val, encoder, variant, &config) {
        Ok(r) => r,
        Err(e) => {
            if !e.is_validation() {
                let diag = match &e {
                    protodx::Error::NonFinite { step, batch } => {
                        json!({ "error": e.to_string(), "step": step, "batch": batch })
                    }
                    _ => json!({ "error": e.to_string() }),
                };
                write_json(&out.join("diagnostics.json"), &json!({ "config": manifest_config, "failure": diag }))?;
                eprintln!("diagnostics written to {}", out.join("diagnostics.json").display());
            }
            return Err(e.into());
        }
    };
    save_model(&model, out.join("model"))?;
    write_json(&out.join("stats.json"), &stats)?;
    let mut manifest = Manifest::new("train", Some(a.seed), manifest_config);
    for f in ["model/model.json", "model/tensors.bin", "model/vocab.txt", "stats.json"] {
        manifest.record(&out, f)?;
    }
    manifest.write(&out)?;
    eprintln!(
        "trained {variant}: best step {:?}, validation macro ROC AUC {:?}",
        stats.best_step, stats.best_val_roc_auc_macro
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    documents: usize,
    loss: f64,
    loss_per_term: f64,
    #[serde(flatten)]
    report: MetricReport,
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<()> {
    let model = load_model_dir(&a.model)?;
    let corpus = load_for_model(&a.corpus, &model)?;
    let e = evaluate(&model, &corpus)?;
    let output = EvalOutput {
        documents: corpus.len(),
        loss: e.loss,
        loss_per_term: e.loss_per_term,
        report: e.report,
    };
    if a.buckets {
        for b in &output.report.buckets {
            eprintln!("{:>10}  labels {:>3}  macro ROC AUC {:.4}", b.bucket, b.n_labels, b.roc_auc_macro);
        }
    }
    emit(a.out.as_deref(), "metrics.json", &serde_json::to_string_pretty(&output)?, || {
        Manifest::new("eval", None, json!({ "args": &a }))
    })
}

/// Writes `content` to `out/name` plus a manifest, or to stdout.
fn emit(out: Option<&Path>, name: &str, content: &str, manifest: impl FnOnce() -> Manifest) -> anyhow::Result<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(name), format!("{content}\n"))?;
            let mut m = manifest();
            m.record(dir, name)?;
            m.write(dir)
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            match writeln!(stdout, "{content}") {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
                r => Ok(r?),
            }
        }
    }
}

fn explain_cmd(a: ExplainArgs) -> anyhow::Result<()> {
    let method: SaliencyMethod = a.method.parse()?;
    if a.top_k == 0 {
        return Err(usage("--top-k must be at least 1"));
    }
    let model = load_model_dir(&a.model)?;
    let corpus = load_for_model(&a.corpus, &model)?;
    let doc = corpus
        .document(&a.doc_id)
        .ok_or_else(|| protodx::Error::Validation(format!("no document `{}` in {}", a.doc_id, a.corpus.display())))?;
    let model_hash = model.model_hash()?;
    let exemplar_source = if a.exemplars > 0 {
        if !model.variant.is_proto() {
            return Err(protodx::Error::Contract(format!("{} has no prototypes to draw exemplars from", model.variant)).into());
        }
        let train = match &a.train_corpus {
            Some(p) => load_for_model(p, &model)?,
            None => corpus.clone(),
        };
        let index = ExemplarIndex::build(&model, &train)?;
        Some((index, train))
    } else {
        None
    };
    let explained = ExplainedDocument {
        doc_id: doc.id.clone(),
        words: doc.words.clone(),
        vocab_hash: corpus.vocab.content_hash(),
    };
    let opts = ExplainOptions {
        method,
        top_k: a.top_k,
        exemplars: a.exemplars,
        seed: a.seed,
    };
    let report = explain_document(
        &model,
        &model_hash,
        &explained,
        &doc.tokens,
        exemplar_source.as_ref().map(|(i, c)| (i, c)),
        &opts,
    )?;
    let (name, content) = match a.format {
        Format::Json => ("explanation.json", serde_json::to_string_pretty(&report)?),
        Format::Html => ("explanation.html", render_html(&report)),
    };
    emit(a.out.as_deref(), name, content.trim_end(), || {
        Manifest::new("explain", Some(a.seed), json!({ "args": &a }))
    })
}

fn faithfulness_cmd(a: FaithfulnessArgs) -> anyhow::Result<()> {
    let methods: Vec<SaliencyMethod> = if a.method == "all" {
        SaliencyMethod::ALL.to_vec()
    } else {
        vec![a.method.parse()?]
    };
    let model = load_model_dir(&a.model)?;
    let corpus = load_for_model(&a.corpus, &model)?;
    let ids = a
        .labels
        .iter()
        .map(|name| {
            model
                .label_id(name)
                .ok_or_else(|| anyhow!(protodx::Error::Validation(format!("unknown label `{name}`"))))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let reports = methods
        .iter()
        .map(|&m| faithfulness(&model, &corpus, &ids, m, a.seed))
        .collect::<protodx::Result<Vec<FaithfulnessReport>>>()?;
    for r in &reports {
        eprintln!("{:>18}  score {:.4}  per label {:?}", r.method.name(), r.score, r.per_label_scores);
    }
    fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("faithfulness.json"), &reports)?;
    let mut m = Manifest::new("faithfulness", Some(a.seed), json!({ "args": &a }));
    m.record(&a.out, "faithfulness.json")?;
    m.write(&a.out)
}

fn serve_cmd(a: ServeArgs) -> anyhow::Result<()> {
    let model = load_model_dir(&a.model)?;
    let train = a.train_corpus.as_deref().map(|p| load_for_model(p, &model)).transpose()?;
    let state = Arc::new(protodx_server::AppState::new(model, train)?);
    // Reject bad origins as usage errors before binding.
    let _ = protodx_server::router(state.clone(), &a.allow_origin).map_err(usage)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(protodx_server::serve(state, a.addr, &a.allow_origin))?;
    Ok(())
}
