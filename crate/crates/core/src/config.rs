//! Flat `key = value` run configuration with command-line overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::EncoderConfig;
use crate::topics::{TopicKind, TopicSettings};
use crate::training::{OptimizerKind, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("`{0}` is required")]
    Missing(&'static str),
    #[error("override `{0}` has no value")]
    DanglingOverride(String),
    #[error("cannot read configuration {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

const KEYS: &[&str] = &[
    "corpus",
    "dev_corpus",
    "test_corpus",
    "embeddings",
    "dev_embeddings",
    "test_embeddings",
    "domains",
    "output_dir",
    "checkpoint",
    "types",
    "topic_model",
    "num_topics",
    "lda_alpha",
    "lda_beta",
    "topic_iterations",
    "embedding_width",
    "lstm_hidden",
    "lstm_layers",
    "use_precomputed",
    "dropout_rate",
    "discriminator_hidden",
    "constrain_transitions",
    "min_count",
    "epochs",
    "batch_size",
    "learning_rate",
    "optimizer",
    "lambda",
    "epsilon",
    "adversarial",
    "seed",
    "gradient_clip_norm",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub dev_corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub dev_embeddings: Option<PathBuf>,
    pub test_embeddings: Option<PathBuf>,
    /// Domain labels read by `train`; defaults to `<output_dir>/domains.tsv`.
    pub domains: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Model read by `eval` and `predict`; defaults to `<output_dir>/best.model`.
    pub checkpoint: Option<PathBuf>,
    /// Declared type inventory; inferred from the training corpus when absent.
    pub types: Option<Vec<String>>,
    pub topics: TopicSettings,
    pub encoder: EncoderConfig,
    pub discriminator_hidden: usize,
    pub constrain_transitions: bool,
    pub min_count: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: None,
            dev_corpus: None,
            test_corpus: None,
            embeddings: None,
            dev_embeddings: None,
            test_embeddings: None,
            domains: None,
            output_dir: PathBuf::from("out"),
            checkpoint: None,
            types: None,
            topics: TopicSettings::default(),
            encoder: EncoderConfig::default(),
            discriminator_hidden: 32,
            constrain_transitions: false,
            min_count: 1,
            train: TrainConfig::default(),
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1 });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Turns `--key value` pairs into key/value pairs; dashes in keys map to underscores.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| ConfigError::UnknownKey(flag.clone()))?
            .replace('-', "_");
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            continue;
        }
        let value = it.next().ok_or_else(|| ConfigError::DanglingOverride(flag.clone()))?;
        out.push((key, value.clone()));
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_flag(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: "expected true or false".into(),
        }),
    }
}

impl RunConfig {
    /// Builds a configuration from file pairs followed by overrides (later wins).
    /// A seed is mandatory so every run is reproducible.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut merged: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in pairs {
            if !KEYS.contains(&k.as_str()) {
                return Err(ConfigError::UnknownKey(k.clone()));
            }
            merged.insert(k, v);
        }
        let mut c = RunConfig::default();
        for (&k, &v) in &merged {
            let path = || Some(PathBuf::from(v));
            match k {
                "corpus" => c.corpus = path(),
                "dev_corpus" => c.dev_corpus = path(),
                "test_corpus" => c.test_corpus = path(),
                "embeddings" => c.embeddings = path(),
                "dev_embeddings" => c.dev_embeddings = path(),
                "test_embeddings" => c.test_embeddings = path(),
                "domains" => c.domains = path(),
                "output_dir" => c.output_dir = PathBuf::from(v),
                "checkpoint" => c.checkpoint = path(),
                "types" => {
                    let types: Vec<String> = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect();
                    if types.is_empty() || types.iter().any(|t| t == crate::corpus::OUTSIDE) {
                        return Err(ConfigError::BadValue {
                            key: k.into(),
                            value: v.into(),
                            reason: "expected a comma-separated list of type names other than O".into(),
                        });
                    }
                    c.types = Some(types);
                }
                "topic_model" => c.topics.kind = parse_value::<TopicKind>(k, v)?,
                "num_topics" => c.topics.k = parse_value(k, v)?,
                "lda_alpha" => c.topics.alpha = Some(parse_value(k, v)?),
                "lda_beta" => c.topics.beta = parse_value(k, v)?,
                "topic_iterations" => c.topics.iterations = parse_value(k, v)?,
                "embedding_width" => c.encoder.embedding_width = parse_value(k, v)?,
                "lstm_hidden" => c.encoder.lstm_hidden = parse_value(k, v)?,
                "lstm_layers" => c.encoder.lstm_layers = parse_value(k, v)?,
                "use_precomputed" => c.encoder.use_precomputed = parse_flag(k, v)?,
                "dropout_rate" => c.encoder.dropout_rate = parse_value(k, v)?,
                "discriminator_hidden" => c.discriminator_hidden = parse_value(k, v)?,
                "constrain_transitions" => c.constrain_transitions = parse_flag(k, v)?,
                "min_count" => c.min_count = parse_value(k, v)?,
                "epochs" => c.train.epochs = parse_value(k, v)?,
                "batch_size" => c.train.batch_size = parse_value(k, v)?,
                "learning_rate" => c.train.learning_rate = parse_value(k, v)?,
                "optimizer" => c.train.optimizer = parse_value::<OptimizerKind>(k, v)?,
                "lambda" => c.train.lambda = parse_value(k, v)?,
                "epsilon" => c.train.epsilon = parse_value(k, v)?,
                "adversarial" => c.train.adversarial = parse_flag(k, v)?,
                "seed" => {
                    let seed = parse_value(k, v)?;
                    c.train.seed = seed;
                    c.topics.seed = seed;
                }
                "gradient_clip_norm" => c.train.clip_norm = parse_value(k, v)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        if !merged.contains_key("seed") {
            return Err(ConfigError::Missing("seed"));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut pairs = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_path_buf(),
                    source,
                })?;
                parse_pairs(&text)?
            }
            None => Vec::new(),
        };
        pairs.extend(parse_overrides(overrides)?);
        Self::from_pairs(&pairs)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: &str| {
            Err(ConfigError::BadValue {
                key: key.into(),
                value: String::new(),
                reason: reason.into(),
            })
        };
        if self.topics.k == 0 {
            return bad("num_topics", "must be positive");
        }
        if self.topics.iterations == 0 {
            return bad("topic_iterations", "must be positive");
        }
        if self.min_count == 0 {
            return bad("min_count", "must be positive");
        }
        if self.discriminator_hidden == 0 {
            return bad("discriminator_hidden", "must be positive");
        }
        if let Err(e) = self.encoder.validate() {
            return bad("encoder", &e.to_string());
        }
        if let Err(e) = self.train.validate() {
            return bad("training", &e.to_string());
        }
        Ok(())
    }

    pub fn domains_path(&self) -> PathBuf {
        self.domains.clone().unwrap_or_else(|| self.output_dir.join("domains.tsv"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("best.model"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn file_then_overrides() {
        let mut pairs = parse_pairs("# run\nseed = 4\nlambda = 0.5\ntypes = Task, Process\n\nadversarial = false\n").unwrap();
        pairs.extend(parse_overrides(&s(&["--lambda", "0.25", "--batch-size=3"])).unwrap());
        let c = RunConfig::from_pairs(&pairs).unwrap();
        assert_eq!(c.train.lambda, 0.25);
        assert_eq!(c.train.batch_size, 3);
        assert_eq!(c.train.seed, 4);
        assert_eq!(c.topics.seed, 4);
        assert!(!c.train.adversarial);
        assert_eq!(c.types, Some(s(&["Task", "Process"])));
        assert_eq!(c.domains_path(), PathBuf::from("out/domains.tsv"));
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(RunConfig::from_pairs(&[]), Err(ConfigError::Missing("seed"))));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(parse_pairs("seed 3"), Err(ConfigError::Syntax { line: 1 })));
        let p = |k: &str, v: &str| vec![("seed".to_string(), "1".to_string()), (k.to_string(), v.to_string())];
        assert!(matches!(RunConfig::from_pairs(&p("colour", "red")), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(RunConfig::from_pairs(&p("epochs", "many")), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::from_pairs(&p("dropout_rate", "1.0")), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::from_pairs(&p("lambda", "-1")), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::from_pairs(&p("topic_model", "pca")), Err(ConfigError::BadValue { .. })));
        assert!(matches!(parse_overrides(&s(&["--seed"])), Err(ConfigError::DanglingOverride(_))));
    }
}
