//! The tagging network: token encoder, BiLSTM stack, and the three heads
//! (CRF keyphrase identification, softmax keyphrase classification, and a
//! gradient-reversed domain discriminator).

pub mod crf;
mod encoder;
mod heads;

pub use crf::{crf_decode, crf_negative_log_likelihood, CrfParameters, CrfVars, NUM_TAGS};
pub use encoder::{encode, Latent, Mode};
pub use heads::{domain_logits, domain_loss, emissions, kc_logits, kc_loss, predict, GradientFlow, Prediction};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::container::{Container, ContainerError};
use crate::corpus::{encode_batch, CorpusError, BioTag, EncodedBatch, TaggedDocument, TypeInventory, Vocabulary, OUTSIDE};
use crate::numerics::{NumericsError, ParameterStore, Tape, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("sequence {0} has zero length")]
    EmptySequence(usize),
    #[error("label {0} out of range")]
    InvalidLabel(usize),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("precomputed embedding width {found} does not match embedding_width {expected}")]
    EmbeddingWidth { expected: usize, found: usize },
    #[error("batch carries no precomputed embeddings but the encoder expects them")]
    MissingEmbeddings,
    #[error("batch has no unmasked tokens")]
    NoTokens,
    #[error("domain discrimination needs at least 2 domains, got {0}")]
    TooFewDomains(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub embedding_width: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub use_precomputed: bool,
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embedding_width: 64,
            lstm_hidden: 64,
            lstm_layers: 2,
            use_precomputed: false,
            dropout_rate: 0.1,
        }
    }
}

impl EncoderConfig {
    /// Encoder output concatenated with the final BiLSTM layer output.
    pub fn latent_width(&self) -> usize {
        self.embedding_width + 2 * self.lstm_hidden
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embedding_width == 0 || self.lstm_hidden == 0 || self.lstm_layers == 0 {
            return Err(ModelError::Config("encoder sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Everything needed to shape the parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub vocab_size: usize,
    /// KC classes including O.
    pub kc_classes: usize,
    pub num_domains: usize,
    pub discriminator_hidden: usize,
    /// Hard-mask the O->I transition.
    pub constrain_transitions: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        if self.kc_classes < 1 || self.discriminator_hidden == 0 {
            return Err(ModelError::Config("head sizes must be positive".into()));
        }
        if self.num_domains < 1 {
            return Err(ModelError::Config("num_domains must be positive".into()));
        }
        if !self.encoder.use_precomputed && self.vocab_size < 2 {
            return Err(ModelError::Config("vocabulary must include the reserved ids".into()));
        }
        Ok(())
    }

    /// Expected `(name, shape)` of every parameter.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let e = &self.encoder;
        let h = e.lstm_hidden;
        let latent = e.latent_width();
        let mut out = Vec::new();
        if !e.use_precomputed {
            out.push(("embed".to_string(), vec![self.vocab_size, e.embedding_width]));
        }
        for layer in 0..e.lstm_layers {
            let input = if layer == 0 { e.embedding_width } else { 2 * h };
            for dir in ["fw", "bw"] {
                out.push((format!("lstm.{layer}.{dir}.w"), vec![input + h, 4 * h]));
                out.push((format!("lstm.{layer}.{dir}.b"), vec![4 * h]));
            }
        }
        out.push(("ki.w".into(), vec![latent, NUM_TAGS]));
        out.push(("ki.b".into(), vec![NUM_TAGS]));
        out.push((crf::TRANSITIONS.into(), vec![NUM_TAGS, NUM_TAGS]));
        out.push((crf::START.into(), vec![NUM_TAGS]));
        out.push((crf::END.into(), vec![NUM_TAGS]));
        out.push(("kc.w".into(), vec![latent, self.kc_classes]));
        out.push(("kc.b".into(), vec![self.kc_classes]));
        out.push(("disc.w1".into(), vec![latent, self.discriminator_hidden]));
        out.push(("disc.b1".into(), vec![self.discriminator_hidden]));
        out.push(("disc.w2".into(), vec![self.discriminator_hidden, self.num_domains]));
        out.push(("disc.b2".into(), vec![self.num_domains]));
        out
    }

    /// Parameters owned by the shared feature extractor.
    pub fn is_encoder_parameter(name: &str) -> bool {
        name == "embed" || name.starts_with("lstm.")
    }
}

/// Seeded initialization.
///
/// LSTM weights are uniform in ±1/sqrt(hidden); the forget-gate bias starts
/// at 1 and all other biases at 0. Gate order within the `4 * hidden`
/// block is input, forget, candidate, output.
pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<ParameterStore, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let h = config.encoder.lstm_hidden;
    for (name, shape) in config.parameter_shapes() {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if name.starts_with("lstm.") && name.ends_with(".w") {
            let bound = 1.0 / (h as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        } else if name.starts_with("lstm.") && name.ends_with(".b") {
            (0..n).map(|i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 }).collect()
        } else if name == "embed" {
            (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect()
        } else if name.ends_with(".w") || name.ends_with(".w1") || name.ends_with(".w2") {
            let bound = 1.0 / (shape[0] as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        } else {
            vec![0.0; n]
        };
        store.insert(&name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

/// Tag sequences predicted for one document.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedDocument {
    pub ki: Vec<BioTag>,
    pub kc: Vec<String>,
}

/// Encodes documents for prediction only: gold labels and domains are ignored.
fn encode_unlabeled(docs: &[&TaggedDocument], vocab: &Vocabulary, inventory: &TypeInventory) -> Result<EncodedBatch, ModelError> {
    // gold tags may carry types outside the model's inventory; they are not used here
    let stripped: Vec<TaggedDocument> = docs
        .iter()
        .map(|d| TaggedDocument {
            ki_tags: vec![BioTag::O; d.len()],
            kc_tags: vec![OUTSIDE.to_string(); d.len()],
            ..(*d).clone()
        })
        .collect();
    let refs: Vec<&TaggedDocument> = stripped.iter().collect();
    Ok(encode_batch(&refs, vocab, &vec![0; refs.len()], inventory, 1)?)
}

/// A trained or freshly initialized tagger with its label maps.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggerModel {
    pub config: ModelConfig,
    pub params: ParameterStore,
    pub vocab: Vocabulary,
    pub inventory: TypeInventory,
}

impl TaggerModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, inventory: TypeInventory, seed: u64) -> Result<Self, ModelError> {
        if config.kc_classes != inventory.num_classes() {
            return Err(ModelError::Config("kc_classes must equal the type inventory size plus one".into()));
        }
        let params = init_parameters(&config, seed)?;
        Ok(TaggerModel {
            config,
            params,
            vocab,
            inventory,
        })
    }

    /// Decodes documents in chunks of `batch_size` (eval mode, no dropout).
    pub fn predict_documents(&self, docs: &[TaggedDocument], batch_size: usize) -> Result<Vec<PredictedDocument>, ModelError> {
        let mut out = Vec::with_capacity(docs.len());
        for chunk in docs.chunks(batch_size.max(1)) {
            let refs: Vec<&TaggedDocument> = chunk.iter().collect();
            let batch = encode_unlabeled(&refs, &self.vocab, &self.inventory)?;
            let mut tape = Tape::new();
            let latent = encode(&mut tape, &self.params, &self.config.encoder, &batch, Mode::Eval)?;
            for p in predict(&mut tape, &self.params, &latent, self.config.constrain_transitions)? {
                out.push(PredictedDocument {
                    ki: p.ki.iter().map(|&i| BioTag::from_id(i).expect("CRF tag id")).collect(),
                    kc: p.kc.iter().map(|&c| self.inventory.label_name(c).to_string()).collect(),
                });
            }
        }
        Ok(out)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("model");
        let e = &self.config.encoder;
        c.set("embedding_width", e.embedding_width);
        c.set("lstm_hidden", e.lstm_hidden);
        c.set("lstm_layers", e.lstm_layers);
        c.set("use_precomputed", e.use_precomputed);
        c.set("dropout_rate", e.dropout_rate);
        c.set("vocab_size", self.config.vocab_size);
        c.set("kc_classes", self.config.kc_classes);
        c.set("num_domains", self.config.num_domains);
        c.set("discriminator_hidden", self.config.discriminator_hidden);
        c.set("constrain_transitions", self.config.constrain_transitions);
        c.set("ki_labels", "O B I");
        c.lists.insert("types".into(), self.inventory.types().to_vec());
        c.lists.insert("vocab".into(), self.vocab.entries().to_vec());
        for (name, t) in self.params.iter() {
            c.arrays.push((name.to_string(), t.clone()));
        }
        c
    }

    /// Rebuilds a model, checking every parameter shape against the header.
    pub fn from_container(c: &Container) -> Result<Self, ModelError> {
        let encoder = EncoderConfig {
            embedding_width: c.parse("embedding_width")?,
            lstm_hidden: c.parse("lstm_hidden")?,
            lstm_layers: c.parse("lstm_layers")?,
            use_precomputed: c.parse("use_precomputed")?,
            dropout_rate: c.parse("dropout_rate")?,
        };
        let config = ModelConfig {
            encoder,
            vocab_size: c.parse("vocab_size")?,
            kc_classes: c.parse("kc_classes")?,
            num_domains: c.parse("num_domains")?,
            discriminator_hidden: c.parse("discriminator_hidden")?,
            constrain_transitions: c.parse("constrain_transitions")?,
        };
        config.validate()?;
        if c.get("ki_labels")? != "O B I" {
            return Err(ModelError::Config("unexpected KI label map".into()));
        }
        let inventory = TypeInventory::new(c.list("types")?);
        let vocab = Vocabulary::from_tokens(c.list("vocab")?.iter().cloned());
        if inventory.num_classes() != config.kc_classes {
            return Err(ModelError::Config("type list does not match kc_classes".into()));
        }
        if !config.encoder.use_precomputed && vocab.len() != config.vocab_size {
            return Err(ModelError::Config("vocabulary list does not match vocab_size".into()));
        }
        let mut params = ParameterStore::new();
        for (name, shape) in config.parameter_shapes() {
            let t = c.array(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(ContainerError::Shape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                }
                .into());
            }
            params.insert(&name, t.clone())?;
        }
        Ok(TaggerModel {
            config,
            params,
            vocab,
            inventory,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                embedding_width: 3,
                lstm_hidden: 2,
                lstm_layers: 1,
                use_precomputed: false,
                dropout_rate: 0.0,
            },
            vocab_size: 6,
            kc_classes: 3,
            num_domains: 2,
            discriminator_hidden: 4,
            constrain_transitions: false,
        }
    }

    #[test]
    fn latent_width_is_concatenation() {
        assert_eq!(tiny_config().encoder.latent_width(), 7);
    }

    #[test]
    fn forget_gate_bias_starts_at_one() {
        let p = init_parameters(&tiny_config(), 1).unwrap();
        assert_eq!(p.get("lstm.0.fw.b").unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let bound = 1.0 / 2f64.sqrt();
        assert!(p.get("lstm.0.bw.w").unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn container_roundtrip_and_shape_validation() {
        let inv = TypeInventory::new(["Process", "Task"]);
        let vocab = Vocabulary::from_tokens(["a", "b", "c", "d"].map(String::from));
        let m = TaggerModel::new(tiny_config(), vocab, inv, 4).unwrap();
        let c = m.to_container();
        let back = TaggerModel::from_container(&Container::from_bytes(&c.to_bytes(), "model").unwrap()).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.inventory, m.inventory);
        assert_eq!(back.vocab, m.vocab);
        for (name, t) in m.params.iter() {
            let b = back.params.get(name).unwrap();
            for (x, y) in t.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }

        let mut bad = c.clone();
        for (name, t) in bad.arrays.iter_mut() {
            if name == "kc.w" {
                *t = Tensor::zeros(&[7, 4]);
            }
        }
        assert!(matches!(
            TaggerModel::from_container(&bad),
            Err(ModelError::Container(ContainerError::Shape { .. }))
        ));
    }
}
