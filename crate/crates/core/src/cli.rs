//! Sub-command driver: `topics`, `train`, `eval`, `predict`, `verify`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::container::{Container, ContainerError};
use crate::corpus::{
    attach_embeddings, build_vocab, parse_conll, parse_embeddings, write_conll, BioTag, CorpusError, TaggedDocument,
    TypeInventory, OUTSIDE,
};
use crate::evaluation::{encode_spans, gold_spans, typed_spans};
use crate::model::{ModelConfig, ModelError, PredictedDocument, TaggerModel};
use crate::topics::{assign_domains, fit_topics, TopicError};
use crate::training::{evaluate_predictions, train, OutputPaths, TrainError};
use crate::verify::{run_checks, Tamper};

#[derive(Debug, Parser)]
#[command(name = "tada", version, about = "Topic-aware domain-adaptive keyphrase tagger")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a topic model on the training corpus and write pseudo-domain labels.
    Topics(RunArgs),
    /// Train the tagger; writes per-epoch, best and final checkpoints plus a metric log.
    Train(RunArgs),
    /// Score a checkpoint on the labeled test corpus.
    Eval(RunArgs),
    /// Tag the test corpus (tokens only, or labeled) and write predictions.conll.
    Predict(RunArgs),
    /// Run the built-in invariant checks.
    Verify {
        #[arg(long, hide = true)]
        tamper_transitions: bool,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `--key value` overrides applied after the file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("verification failed: {0}")]
    Verify(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verify(_) => 1,
            CliError::Data(_) => 2,
            CliError::Config(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Checkpoint(_) => 5,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TopicError> for CliError {
    fn from(e: TopicError) -> Self {
        match e {
            TopicError::InvalidTopicCount(_) | TopicError::InvalidHyperparameter(_) | TopicError::UnknownKind(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numerics(_) => CliError::Numeric(e.to_string()),
            ModelError::Corpus(_) | ModelError::EmbeddingWidth { .. } | ModelError::MissingEmbeddings => {
                CliError::Data(e.to_string())
            }
            ModelError::Container(_) | ModelError::MissingParameter(_) | ModelError::Shape(_) => {
                CliError::Checkpoint(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            return CliError::Numeric(e.to_string());
        }
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Corpus(c) => c.into(),
            TrainError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| io_error(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn create_output_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn required<'a>(path: &'a Option<PathBuf>, key: &'static str) -> Result<&'a Path, CliError> {
    path.as_deref().ok_or(CliError::Config(format!("`{key}` is required")))
}

/// Reads a labeled corpus; attaches precomputed vectors when the encoder uses them.
fn load_corpus(path: &Path, embeddings: Option<&Path>, config: &RunConfig) -> Result<Vec<TaggedDocument>, CliError> {
    let docs = parse_conll(&read_text(path)?).map_err(|e| io_error(path, e))?;
    if docs.is_empty() {
        return Err(io_error(path, CorpusError::Empty));
    }
    finish_corpus(docs, embeddings, config)
}

fn finish_corpus(
    mut docs: Vec<TaggedDocument>,
    embeddings: Option<&Path>,
    config: &RunConfig,
) -> Result<Vec<TaggedDocument>, CliError> {
    if config.encoder.use_precomputed {
        let path = embeddings.ok_or(CliError::Config("precomputed embeddings are enabled but no file is configured".into()))?;
        let table = parse_embeddings(&read_text(path)?).map_err(|e| io_error(path, e))?;
        attach_embeddings(&mut docs, table).map_err(|e| io_error(path, e))?;
    }
    Ok(docs)
}

/// Reads documents to tag: either a labeled corpus or one token per line.
fn load_unlabeled(path: &Path, embeddings: Option<&Path>, config: &RunConfig) -> Result<Vec<TaggedDocument>, CliError> {
    let text = read_text(path)?;
    let labeled = text
        .lines()
        .any(|l| !l.trim().is_empty() && !l.starts_with("#doc") && l.contains('\t'));
    let docs = if labeled {
        parse_conll(&text).map_err(|e| io_error(path, e))?
    } else {
        parse_tokens(&text)
    };
    if docs.is_empty() {
        return Err(io_error(path, CorpusError::Empty));
    }
    finish_corpus(docs, embeddings, config)
}

fn parse_tokens(text: &str) -> Vec<TaggedDocument> {
    let mut docs = Vec::new();
    let mut id: Option<String> = None;
    let mut tokens: Vec<String> = Vec::new();
    let flush = |id: &mut Option<String>, tokens: &mut Vec<String>, docs: &mut Vec<TaggedDocument>| {
        if tokens.is_empty() {
            return;
        }
        let n = tokens.len();
        let doc_id = id.take().unwrap_or_else(|| format!("d{}", docs.len()));
        docs.push(TaggedDocument {
            doc_id,
            tokens: std::mem::take(tokens),
            ki_tags: vec![BioTag::O; n],
            kc_tags: vec![OUTSIDE.to_string(); n],
            precomputed_embeddings: None,
        });
    };
    for line in text.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("#doc") {
            flush(&mut id, &mut tokens, &mut docs);
            id = Some(rest.trim().to_string());
        } else if line.is_empty() {
            flush(&mut id, &mut tokens, &mut docs);
        } else {
            tokens.push(line.to_string());
        }
    }
    flush(&mut id, &mut tokens, &mut docs);
    docs
}

/// `doc_id<TAB>label` lines.
pub fn parse_domains(text: &str) -> Result<BTreeMap<String, usize>, CorpusError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let label = match cols.as_slice() {
            [_, label] => label.trim().parse::<usize>().ok(),
            _ => None,
        };
        let label = label.ok_or(CorpusError::Ragged {
            line: i + 1,
            found: cols.len(),
        })?;
        out.insert(cols[0].to_string(), label);
    }
    Ok(out)
}

pub fn write_domains(docs: &[TaggedDocument], labels: &[usize]) -> String {
    let mut out = String::new();
    for (d, l) in docs.iter().zip(labels) {
        let _ = writeln!(out, "{}\t{l}", d.doc_id);
    }
    out
}

fn cmd_topics(config: &RunConfig) -> Result<String, CliError> {
    let docs = load_corpus(required(&config.corpus, "corpus")?, None, config)?;
    let fit = fit_topics(&docs, &config.topics)?;
    let labels = assign_domains(&fit);
    create_output_dir(&config.output_dir)?;
    write_text(&config.output_dir.join("domains.tsv"), &write_domains(&docs, &labels))?;
    let model_path = config.output_dir.join("topics.model");
    fit.to_container().write(&model_path).map_err(|e| io_error(&model_path, e))?;
    let mut counts = vec![0usize; fit.k];
    for &l in &labels {
        counts[l] += 1;
    }
    let mut out = format!("K={} model={}\n", fit.k, fit.kind);
    for (k, n) in counts.iter().enumerate() {
        let _ = writeln!(out, "domain {k}: {n} documents");
    }
    Ok(out)
}

fn cmd_train(config: &RunConfig) -> Result<String, CliError> {
    let corpus = required(&config.corpus, "corpus")?;
    let docs = load_corpus(corpus, config.embeddings.as_deref(), config)?;
    let dev = match &config.dev_corpus {
        Some(p) => load_corpus(p, config.dev_embeddings.as_deref(), config)?,
        None => docs.clone(),
    };
    let domains_path = config.domains_path();
    let table = parse_domains(&read_text(&domains_path)?).map_err(|e| io_error(&domains_path, e))?;
    let num_domains = config.topics.k;
    let mut domains = Vec::with_capacity(docs.len());
    for d in &docs {
        let label = *table.get(&d.doc_id).ok_or_else(|| CorpusError::MissingDomain(d.doc_id.clone()))?;
        if label >= num_domains {
            return Err(CorpusError::DomainOutOfRange {
                label,
                topics: num_domains,
            }
            .into());
        }
        domains.push(label);
    }
    let vocab = build_vocab(&docs, config.min_count)?;
    let inventory = match &config.types {
        Some(t) => TypeInventory::new(t),
        None => TypeInventory::from_corpus(&docs),
    };
    for d in &docs {
        for t in &d.kc_tags {
            inventory.label_id(t)?;
        }
    }
    let mut encoder = config.encoder.clone();
    if encoder.use_precomputed {
        encoder.embedding_width = docs[0].embedding_width().unwrap_or(encoder.embedding_width);
    }
    let model_config = ModelConfig {
        encoder,
        vocab_size: vocab.len(),
        kc_classes: inventory.num_classes(),
        num_domains,
        discriminator_hidden: config.discriminator_hidden,
        constrain_transitions: config.constrain_transitions,
    };
    let mut model = TaggerModel::new(model_config, vocab, inventory, config.train.seed)?;
    let paths = OutputPaths {
        dir: config.output_dir.clone(),
    };
    let outcome = train(&mut model, &docs, &domains, &dev, &config.train, Some(&paths))?;
    let last = outcome.log.last().map(|r| (r.dev_ki_f1, r.dev_kic_f1)).unwrap_or((0.0, 0.0));
    Ok(format!(
        "trained {} epochs ({} steps); final dev KI F1={:.4} KIC F1={:.4}; best epoch {} (KIC F1={:.4})\n",
        outcome.log.len(),
        outcome.steps.len(),
        last.0,
        last.1,
        outcome.best_epoch,
        outcome.best_dev_kic_f1
    ))
}

/// Loads the checkpoint and checks it against the run configuration.
fn load_checkpoint(config: &RunConfig) -> Result<TaggerModel, CliError> {
    let path = config.checkpoint_path();
    let container = Container::read(&path, "model").map_err(|e| match e {
        ContainerError::Io(_) => io_error(&path, e),
        other => CliError::Checkpoint(format!("{}: {other}", path.display())),
    })?;
    let model = TaggerModel::from_container(&container).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
    let (want, have) = (&config.encoder, &model.config.encoder);
    let mut problems = Vec::new();
    if want.use_precomputed != have.use_precomputed {
        problems.push(format!("use_precomputed {} vs {}", want.use_precomputed, have.use_precomputed));
    }
    if !want.use_precomputed && want.embedding_width != have.embedding_width {
        problems.push(format!("embedding_width {} vs {}", want.embedding_width, have.embedding_width));
    }
    if want.lstm_hidden != have.lstm_hidden {
        problems.push(format!("lstm_hidden {} vs {}", want.lstm_hidden, have.lstm_hidden));
    }
    if want.lstm_layers != have.lstm_layers {
        problems.push(format!("lstm_layers {} vs {}", want.lstm_layers, have.lstm_layers));
    }
    if config.topics.k != model.config.num_domains {
        problems.push(format!("num_topics {} vs {}", config.topics.k, model.config.num_domains));
    }
    if let Some(types) = &config.types {
        let declared = TypeInventory::new(types);
        if declared != model.inventory {
            problems.push(format!("types {:?} vs {:?}", declared.types(), model.inventory.types()));
        }
    }
    if !problems.is_empty() {
        return Err(CliError::Checkpoint(format!(
            "{} does not match the configuration (config vs checkpoint): {}",
            path.display(),
            problems.join(", ")
        )));
    }
    Ok(model)
}

fn cmd_eval(config: &RunConfig) -> Result<String, CliError> {
    let model = load_checkpoint(config)?;
    let test = load_corpus(required(&config.test_corpus, "test_corpus")?, config.test_embeddings.as_deref(), config)?;
    let predicted = model.predict_documents(&test, config.train.batch_size.max(16))?;
    let report = evaluate_predictions(&test, &predicted);
    create_output_dir(&config.output_dir)?;
    write_text(&config.output_dir.join("eval.tsv"), &report.to_tsv())?;
    Ok(report.to_text())
}

/// Predictions as a corpus: typed spans re-encoded as strict BIO.
pub fn predictions_as_corpus(docs: &[TaggedDocument], predicted: &[PredictedDocument]) -> Vec<TaggedDocument> {
    docs.iter()
        .zip(predicted)
        .map(|(d, p)| {
            let spans = typed_spans(&p.ki, &p.kc);
            let bounds: Vec<(usize, usize)> = spans.iter().map(|&(s, e, _)| (s, e)).collect();
            let mut kc = vec![OUTSIDE.to_string(); d.len()];
            for (s, e, kind) in &spans {
                for label in &mut kc[*s..*e] {
                    *label = kind.clone();
                }
            }
            TaggedDocument {
                doc_id: d.doc_id.clone(),
                tokens: d.tokens.clone(),
                ki_tags: encode_spans(&bounds, d.len()),
                kc_tags: kc,
                precomputed_embeddings: None,
            }
        })
        .collect()
}

fn cmd_predict(config: &RunConfig) -> Result<String, CliError> {
    let model = load_checkpoint(config)?;
    let docs = load_unlabeled(required(&config.test_corpus, "test_corpus")?, config.test_embeddings.as_deref(), config)?;
    let predicted = model.predict_documents(&docs, config.train.batch_size.max(16))?;
    let out = predictions_as_corpus(&docs, &predicted);
    create_output_dir(&config.output_dir)?;
    let path = config.output_dir.join("predictions.conll");
    write_text(&path, &write_conll(&out))?;
    let spans = gold_spans(&out).len();
    Ok(format!("tagged {} documents, {spans} keyphrases -> {}\n", out.len(), path.display()))
}

fn cmd_verify(tamper: Tamper) -> Result<String, CliError> {
    let results = run_checks(tamper);
    let mut out = String::new();
    for r in &results {
        let _ = writeln!(
            out,
            "{} {:<40} margin={:.3e} (observed {:.3e}, bound {:.1e}) {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.margin(),
            r.observed,
            r.bound,
            r.detail
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        let _ = writeln!(out, "all {} checks passed", results.len());
        Ok(out)
    } else {
        print!("{out}");
        Err(CliError::Verify(failed.join(", ")))
    }
}

/// Runs one command and returns its printed report.
pub fn execute(cli: Cli) -> Result<String, CliError> {
    let load = |a: &RunArgs| RunConfig::load(a.config.as_deref(), &a.overrides);
    match cli.command {
        Command::Topics(a) => cmd_topics(&load(&a)?),
        Command::Train(a) => cmd_train(&load(&a)?),
        Command::Eval(a) => cmd_eval(&load(&a)?),
        Command::Predict(a) => cmd_predict(&load(&a)?),
        Command::Verify { tamper_transitions } => cmd_verify(Tamper {
            nan_transitions: tamper_transitions,
        }),
    }
}

/// Parses arguments, runs, prints, and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 3 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(report) => {
            print!("{report}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
