//! Joint optimisation: clean pass, sign-gradient latent perturbation,
//! adversarial pass, combined objective, clipped optimizer update.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::container::ContainerError;
use crate::corpus::{encode_batch, CorpusError, EncodedBatch, TaggedDocument};
use crate::evaluation::{document_spans, gold_spans, EvaluationReport, Span};
use crate::model::{
    domain_loss, emissions, encode, kc_loss, CrfVars, GradientFlow, Latent, ModelError, Mode, PredictedDocument,
    TaggerModel,
};
use crate::model::crf::negative_log_likelihood;
use crate::numerics::{GradientSet, NumericsError, ParameterStore, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("non-finite loss at step {step}: l_tag={l_tag} l_class={l_class} l_da={l_da} l_total_adv={l_total_adv:?}")]
    NonFiniteLoss {
        step: usize,
        l_tag: f64,
        l_class: f64,
        l_da: f64,
        l_total_adv: Option<f64>,
    },
    #[error("non-finite latent gradient")]
    NonFiniteGradient,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Model(ModelError::Numerics(e))
    }
}

impl TrainError {
    /// True for failures caused by non-finite arithmetic.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteLoss { .. }
                | TrainError::NonFiniteGradient
                | TrainError::Model(ModelError::Numerics(NumericsError::NonFinite { .. }))
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "momentum" => Ok(OptimizerKind::Momentum),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer `{other}` (expected sgd, momentum or adam)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Weight of the domain loss.
    pub lambda: f64,
    /// Perturbation size for the adversarial pass.
    pub epsilon: f64,
    pub adversarial: bool,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            lambda: 0.1,
            epsilon: 0.01,
            adversarial: true,
            seed: 0,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be >= 0");
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be >= 0");
        }
        if !(self.clip_norm > 0.0) {
            return bad("gradient_clip_norm must be positive");
        }
        Ok(())
    }
}

/// `l_tag + l_class + lambda * l_da`.
pub fn total_loss(l_tag: f64, l_class: f64, l_da: f64, lambda: f64) -> f64 {
    l_tag + l_class + lambda * l_da
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `epsilon * sign(g)` with `sign(0) = 0`.
pub fn fgsm_delta(gradient: &Tensor, epsilon: f64) -> Result<Tensor, TrainError> {
    if !gradient.is_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    if !(epsilon >= 0.0) {
        return Err(TrainError::Config("epsilon must be >= 0".into()));
    }
    Ok(gradient.map(|g| epsilon * sign(g)))
}

/// `x + epsilon * sign(g)`.
pub fn fgsm_perturb(latent: &Tensor, gradient: &Tensor, epsilon: f64) -> Result<Tensor, TrainError> {
    if latent.shape() != gradient.shape() {
        return Err(ModelError::Shape(format!(
            "latent {:?} vs gradient {:?}",
            latent.shape(),
            gradient.shape()
        ))
        .into());
    }
    let delta = fgsm_delta(gradient, epsilon)?;
    let data = latent.data().iter().zip(delta.data()).map(|(x, d)| x + d).collect();
    Ok(Tensor::new(latent.shape().to_vec(), data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub l_tag: f64,
    pub l_class: f64,
    pub l_da: f64,
    pub l_total: f64,
    pub l_total_adv: Option<f64>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Loss terms of one pass, as tape nodes.
pub struct Objective {
    pub l_tag: Var,
    pub l_class: Var,
    pub l_da: Var,
    pub l_total: Var,
}

/// Builds the three heads and the weighted total on top of `latent`.
pub fn objective(
    tape: &mut Tape,
    store: &ParameterStore,
    model: &TaggerModel,
    latent: &Latent,
    batch: &EncodedBatch,
    lambda: f64,
    flow: GradientFlow,
) -> Result<Objective, ModelError> {
    let em = emissions(tape, store, latent)?;
    let crf = CrfVars::bind(tape, store, model.config.constrain_transitions)?;
    let l_tag = negative_log_likelihood(tape, em, &crf, &batch.ki_labels, &batch.mask, batch.batch, batch.max_len)?;
    let l_class = kc_loss(tape, store, latent, &batch.kc_labels)?;
    let l_da = if model.config.num_domains < 2 && lambda == 0.0 {
        // discrimination is undefined with one domain; with zero weight it is simply absent
        tape.constant(Tensor::scalar(0.0))?
    } else {
        domain_loss(tape, store, latent, &batch.domain_labels, flow)?
    };
    let task = tape.add(l_tag, l_class)?;
    let weighted = tape.scale(l_da, lambda)?;
    let l_total = tape.add(task, weighted)?;
    Ok(Objective {
        l_tag,
        l_class,
        l_da,
        l_total,
    })
}

fn collect_gradients(tape: &Tape, grads: &crate::numerics::Gradients, store: &ParameterStore) -> GradientSet {
    let mut out = GradientSet::zeros_like(store);
    for (name, var) in tape.bound_params() {
        if let Some(g) = grads.get(*var) {
            out.accumulate(name, g);
        }
    }
    out
}

fn dropout_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Losses and summed parameter gradients of one step, without updating.
///
/// The perturbation direction is the true gradient of the clean total loss
/// with respect to the latent; parameter gradients go through the reversal
/// layer. The adversarial pass reuses the clean latent plus a constant offset,
/// so a single sweep from `L_total + L_total_adv` yields the summed gradients.
pub fn compute_gradients(
    model: &TaggerModel,
    batch: &EncodedBatch,
    config: &TrainConfig,
    step: usize,
) -> Result<(StepReport, GradientSet), TrainError> {
    let store = &model.params;
    let mut tape = Tape::new();
    let mode = Mode::Train {
        seed: dropout_seed(config.seed, step),
    };
    let latent = encode(&mut tape, store, &model.config.encoder, batch, mode)?;
    let clean = objective(&mut tape, store, model, &latent, batch, config.lambda, GradientFlow::Reverse)?;
    let mut report = StepReport {
        step,
        l_tag: tape.scalar(clean.l_tag),
        l_class: tape.scalar(clean.l_class),
        l_da: tape.scalar(clean.l_da),
        l_total: tape.scalar(clean.l_total),
        l_total_adv: None,
        grad_norm: 0.0,
    };

    let root = if config.adversarial {
        let g = tape.backward_unreversed(clean.l_total)?.get_or_zeros(&tape, latent.var);
        let delta = fgsm_delta(&g, config.epsilon)?;
        let offset = tape.constant(delta)?;
        let adv_var = tape.add(latent.var, offset)?;
        let adv = Latent {
            var: adv_var,
            ..latent.clone()
        };
        let adv_obj = objective(&mut tape, store, model, &adv, batch, config.lambda, GradientFlow::Reverse)?;
        report.l_total_adv = Some(tape.scalar(adv_obj.l_total));
        tape.add(clean.l_total, adv_obj.l_total)?
    } else {
        clean.l_total
    };
    let finite = [report.l_tag, report.l_class, report.l_da, report.l_total]
        .iter()
        .chain(report.l_total_adv.iter())
        .all(|v| v.is_finite());
    if !finite {
        return Err(TrainError::NonFiniteLoss {
            step,
            l_tag: report.l_tag,
            l_class: report.l_class,
            l_da: report.l_da,
            l_total_adv: report.l_total_adv,
        });
    }
    let grads = tape.backward(root)?;
    let grads = collect_gradients(&tape, &grads, store);
    report.grad_norm = grads.global_norm();
    Ok((report, grads))
}

/// Rescales so the global norm is at most `max_norm`; returns the original norm.
pub fn clip_gradients(grads: &mut GradientSet, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    steps: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

const MOMENTUM: f64 = 0.9;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn apply(&mut self, params: &mut ParameterStore, grads: &GradientSet) {
        self.steps += 1;
        let lr = self.learning_rate;
        let t = self.steps as i32;
        for (name, g) in grads.iter() {
            let p = match params.get_mut(name) {
                Some(p) => p.data_mut(),
                None => continue,
            };
            let g = g.data();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, d) in p.iter_mut().zip(g) {
                        *w -= lr * d;
                    }
                }
                OptimizerKind::Momentum => {
                    let v = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
                    for ((w, d), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                        *v = MOMENTUM * *v + d;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.second.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
                    let c1 = 1.0 - BETA1.powi(t);
                    let c2 = 1.0 - BETA2.powi(t);
                    for i in 0..g.len() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// One full step: gradients, clipping, update.
pub fn train_step(
    model: &mut TaggerModel,
    batch: &EncodedBatch,
    config: &TrainConfig,
    optimizer: &mut Optimizer,
    step: usize,
) -> Result<StepReport, TrainError> {
    let (report, mut grads) = compute_gradients(model, batch, config, step)?;
    if !grads.is_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    clip_gradients(&mut grads, config.clip_norm);
    optimizer.apply(&mut model.params, &grads);
    if !model.params.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step,
            l_tag: report.l_tag,
            l_class: report.l_class,
            l_da: report.l_da,
            l_total_adv: report.l_total_adv,
        });
    }
    Ok(report)
}

/// Per-epoch means of the step losses plus dev scores.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_tag: f64,
    pub l_class: f64,
    pub l_da: f64,
    pub l_total: f64,
    pub l_total_adv: Option<f64>,
    pub dev_ki_f1: f64,
    pub dev_kic_f1: f64,
}

impl EpochRecord {
    /// `epoch, l_tag, l_class, l_da, l_total, l_total_adv, dev_KI_F1, dev_KIC_F1`.
    pub fn to_tsv_line(&self) -> String {
        let adv = self.l_total_adv.map_or("NA".to_string(), |v| format!("{v:.10}"));
        format!(
            "{}\t{:.10}\t{:.10}\t{:.10}\t{:.10}\t{}\t{:.4}\t{:.4}",
            self.epoch, self.l_tag, self.l_class, self.l_da, self.l_total, adv, self.dev_ki_f1, self.dev_kic_f1
        )
    }
}

pub fn evaluate_predictions(gold: &[TaggedDocument], predicted: &[PredictedDocument]) -> EvaluationReport {
    let pred: Vec<Span> = gold
        .iter()
        .zip(predicted)
        .flat_map(|(d, p)| document_spans(&d.doc_id, &p.ki, &p.kc))
        .collect();
    EvaluationReport::from_spans(&pred, &gold_spans(gold))
}

/// Where checkpoints and the metric log go.
#[derive(Clone, Debug)]
pub struct OutputPaths {
    pub dir: PathBuf,
}

impl OutputPaths {
    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch-{epoch:03}.model"))
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.model")
    }
    pub fn final_model(&self) -> PathBuf {
        self.dir.join("final.model")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.tsv")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub steps: Vec<StepReport>,
    pub best_epoch: usize,
    pub best_dev_kic_f1: f64,
}

/// Seeded mini-batch training. Documents are reshuffled every epoch; after
/// each epoch the dev set is decoded and, when `output` is given, the epoch
/// checkpoint, the best-by-dev-KIC checkpoint and the metric log are written.
pub fn train(
    model: &mut TaggerModel,
    docs: &[TaggedDocument],
    domains: &[usize],
    dev: &[TaggedDocument],
    config: &TrainConfig,
    output: Option<&OutputPaths>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if docs.is_empty() {
        return Err(TrainError::Corpus(CorpusError::Empty));
    }
    if domains.len() != docs.len() {
        let missing = docs.get(domains.len()).map(|d| d.doc_id.clone()).unwrap_or_default();
        return Err(CorpusError::MissingDomain(missing).into());
    }
    if let Some(out) = output {
        std::fs::create_dir_all(&out.dir)?;
        std::fs::write(out.metrics(), "")?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut outcome = TrainOutcome {
        log: Vec::new(),
        steps: Vec::new(),
        best_epoch: 0,
        best_dev_kic_f1: f64::NEG_INFINITY,
    };
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        let mut n = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&TaggedDocument> = chunk.iter().map(|&i| &docs[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| domains[i]).collect();
            let batch = encode_batch(&refs, &model.vocab, &labels, &model.inventory, model.config.num_domains)?;
            let report = train_step(model, &batch, config, &mut optimizer, step)?;
            log::debug!(
                "step {step}: l_total={:.6} l_tag={:.6} l_class={:.6} l_da={:.6}",
                report.l_total,
                report.l_tag,
                report.l_class,
                report.l_da
            );
            sums[0] += report.l_tag;
            sums[1] += report.l_class;
            sums[2] += report.l_da;
            sums[3] += report.l_total;
            sums[4] += report.l_total_adv.unwrap_or(0.0);
            n += 1.0;
            step += 1;
            outcome.steps.push(report);
        }
        let predicted = model.predict_documents(dev, config.batch_size.max(16))?;
        let eval = evaluate_predictions(dev, &predicted);
        let record = EpochRecord {
            epoch,
            l_tag: sums[0] / n,
            l_class: sums[1] / n,
            l_da: sums[2] / n,
            l_total: sums[3] / n,
            l_total_adv: config.adversarial.then(|| sums[4] / n),
            dev_ki_f1: eval.ki.f1,
            dev_kic_f1: eval.kic.f1,
        };
        log::info!(
            "epoch {epoch}: l_total={:.5} dev KI F1={:.4} KIC F1={:.4}",
            record.l_total,
            record.dev_ki_f1,
            record.dev_kic_f1
        );
        let improved = record.dev_kic_f1 > outcome.best_dev_kic_f1;
        if improved {
            outcome.best_epoch = epoch;
            outcome.best_dev_kic_f1 = record.dev_kic_f1;
        }
        if let Some(out) = output {
            let c = model.to_container();
            c.write(&out.epoch_checkpoint(epoch))?;
            if improved {
                c.write(&out.best())?;
            }
            append_line(&out.metrics(), &record.to_tsv_line())?;
        }
        outcome.log.push(record);
    }
    if let Some(out) = output {
        model.to_container().write(&out.final_model())?;
    }
    Ok(outcome)
}

fn append_line(path: &Path, line: &str) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().append(true).create(true).open(path)?;
    let mut s = String::new();
    let _ = writeln!(s, "{line}");
    f.write_all(s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, parse_conll, TypeInventory, IGNORE_LABEL};
    use crate::model::{EncoderConfig, ModelConfig};
    use proptest::prelude::*;

    const CORPUS: &str = "#doc a\nwe\tO\tO\nuse\tO\tO\nneural\tB\tProcess\nnets\tI\tProcess\n\n\
#doc b\nthe\tO\tO\ntask\tB\tTask\nis\tO\tO\nhard\tO\tO\n\n\
#doc c\nneural\tB\tProcess\nnets\tI\tProcess\nsolve\tO\tO\nthe\tO\tO\ntask\tB\tTask\n";

    fn setup(adversarial: bool, lambda: f64, epsilon: f64) -> (TaggerModel, Vec<TaggedDocument>, TrainConfig) {
        let docs = parse_conll(CORPUS).unwrap();
        let vocab = build_vocab(&docs, 1).unwrap();
        let inv = TypeInventory::from_corpus(&docs);
        let config = ModelConfig {
            encoder: EncoderConfig {
                embedding_width: 4,
                lstm_hidden: 3,
                lstm_layers: 1,
                use_precomputed: false,
                dropout_rate: 0.0,
            },
            vocab_size: vocab.len(),
            kc_classes: inv.num_classes(),
            num_domains: 2,
            discriminator_hidden: 3,
            constrain_transitions: false,
        };
        let model = TaggerModel::new(config, vocab, inv, 7).unwrap();
        let tc = TrainConfig {
            epochs: 1,
            batch_size: 3,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Sgd,
            lambda,
            epsilon,
            adversarial,
            seed: 3,
            clip_norm: 1e9,
        };
        (model, docs, tc)
    }

    fn full_batch(model: &TaggerModel, docs: &[TaggedDocument]) -> EncodedBatch {
        let refs: Vec<_> = docs.iter().collect();
        encode_batch(&refs, &model.vocab, &[0, 1, 0], &model.inventory, 2).unwrap()
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.0, 2.0, 3.0, 0.5), 4.5);
        assert_eq!(total_loss(1.0, 2.0, 3.0, 0.0), 3.0);
        assert_eq!(total_loss(0.0, 0.0, 7.0, 0.25), 1.75);
    }

    #[test]
    fn fgsm_examples() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let g = Tensor::vector(vec![0.5, -0.3]);
        assert_eq!(fgsm_perturb(&x, &g, 0.1).unwrap().data(), &[1.1, 1.9]);
        assert_eq!(fgsm_perturb(&x, &g, 0.0).unwrap(), x);
        assert!(matches!(
            fgsm_perturb(&x, &Tensor::vector(vec![f64::NAN, 0.0]), 0.1),
            Err(TrainError::NonFiniteGradient)
        ));
    }

    proptest! {
        #[test]
        fn fgsm_bound(pairs in prop::collection::vec((-5.0f64..5.0, -1.0f64..1.0), 1..40), eps in 0.0f64..0.5) {
            let x = Tensor::vector(pairs.iter().map(|p| p.0).collect());
            let g = Tensor::vector(pairs.iter().map(|p| if p.1.abs() < 0.2 { 0.0 } else { p.1 }).collect());
            let adv = fgsm_perturb(&x, &g, eps).unwrap();
            for ((a, b), d) in adv.data().iter().zip(x.data()).zip(g.data()) {
                let diff = (a - b).abs();
                // adding then subtracting eps can round by one ulp of x
                prop_assert!(diff <= eps + 1e-12);
                if *d == 0.0 { prop_assert_eq!(a, b); } else { prop_assert!((diff - eps).abs() <= 1e-12); }
            }
        }
    }

    #[test]
    fn recomposition_holds() {
        for lambda in [0.0, 0.1, 1.0] {
            let (model, docs, tc) = setup(true, lambda, 0.01);
            let batch = full_batch(&model, &docs);
            let (r, _) = compute_gradients(&model, &batch, &tc, 0).unwrap();
            assert!((r.l_total - total_loss(r.l_tag, r.l_class, r.l_da, lambda)).abs() <= 1e-9);
            assert!(r.l_total_adv.is_some());
        }
    }

    #[test]
    fn zero_epsilon_doubles_the_clean_gradient() {
        let (model, docs, mut tc) = setup(true, 0.1, 0.0);
        let batch = full_batch(&model, &docs);
        let (r_adv, g_adv) = compute_gradients(&model, &batch, &tc, 0).unwrap();
        tc.adversarial = false;
        let (r, g) = compute_gradients(&model, &batch, &tc, 0).unwrap();
        assert_eq!(r.l_total_adv, None);
        assert_eq!(r_adv.l_total_adv, Some(r.l_total));
        for (name, a) in g_adv.iter() {
            let b = g.get(name).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - 2.0 * y).abs() <= 1e-12 * (1.0 + y.abs()), "{name}: {x} vs 2*{y}");
            }
        }
    }

    #[test]
    fn sgd_step_descends() {
        let (mut model, docs, mut tc) = setup(false, 0.1, 0.0);
        tc.learning_rate = 1e-2;
        let batch = full_batch(&model, &docs);
        let before = compute_gradients(&model, &batch, &tc, 0).unwrap().0.l_total;
        let mut opt = Optimizer::new(OptimizerKind::Sgd, tc.learning_rate);
        train_step(&mut model, &batch, &tc, &mut opt, 0).unwrap();
        let after = compute_gradients(&model, &batch, &tc, 0).unwrap().0.l_total;
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn plain_update_matches_manual_descent() {
        let (mut model, docs, tc) = setup(false, 0.1, 0.0);
        let batch = full_batch(&model, &docs);
        let (_, g) = compute_gradients(&model, &batch, &tc, 0).unwrap();
        let mut expected = model.params.clone();
        for (name, gt) in g.iter() {
            for (w, d) in expected.get_mut(name).unwrap().data_mut().iter_mut().zip(gt.data()) {
                *w -= tc.learning_rate * d;
            }
        }
        let mut opt = Optimizer::new(OptimizerKind::Sgd, tc.learning_rate);
        train_step(&mut model, &batch, &tc, &mut opt, 0).unwrap();
        assert_eq!(model.params, expected);
    }

    #[test]
    fn lambda_zero_leaves_encoder_untouched_by_domain_branch() {
        let (model, docs, tc) = setup(false, 0.0, 0.0);
        let batch = full_batch(&model, &docs);
        let (_, g) = compute_gradients(&model, &batch, &tc, 0).unwrap();
        let mut other = batch.clone();
        other.domain_labels = vec![1, 0, 1];
        let (_, g2) = compute_gradients(&model, &other, &tc, 0).unwrap();
        for (name, a) in g.iter() {
            if !name.starts_with("disc.") {
                assert_eq!(Some(a), g2.get(name), "{name}");
            }
        }
    }

    #[test]
    fn one_epoch_one_batch_is_one_step() {
        let (model, docs, tc) = setup(true, 0.1, 0.01);
        let mut a = model.clone();
        let out = train(&mut a, &docs, &[0, 1, 0], &docs, &tc, None).unwrap();
        assert_eq!(out.steps.len(), 1);

        // the single batch holds the documents in shuffled order
        let mut order: Vec<usize> = (0..3).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(tc.seed));
        let refs: Vec<_> = order.iter().map(|&i| &docs[i]).collect();
        let labels: Vec<usize> = order.iter().map(|&i| [0, 1, 0][i]).collect();
        let batch = encode_batch(&refs, &model.vocab, &labels, &model.inventory, 2).unwrap();
        let mut b = model.clone();
        let mut opt = Optimizer::new(tc.optimizer, tc.learning_rate);
        train_step(&mut b, &batch, &tc, &mut opt, 0).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn training_is_deterministic_and_writes_outputs() {
        let (model, docs, mut tc) = setup(true, 0.1, 0.01);
        tc.epochs = 3;
        tc.batch_size = 2;
        tc.optimizer = OptimizerKind::Adam;
        let dir = tempfile::tempdir().unwrap();
        let run = |sub: &str| {
            let out = OutputPaths { dir: dir.path().join(sub) };
            let mut m = model.clone();
            train(&mut m, &docs, &[0, 1, 0], &docs, &tc, Some(&out)).unwrap();
            (m, std::fs::read_to_string(out.metrics()).unwrap(), out)
        };
        let (m1, log1, out1) = run("a");
        let (m2, log2, _) = run("b");
        assert_eq!(m1.params, m2.params);
        assert_eq!(log1, log2);
        assert_eq!(log1.lines().count(), 3);
        assert_eq!(log1.lines().next().unwrap().split('\t').count(), 8);
        for p in [out1.epoch_checkpoint(3), out1.best(), out1.final_model()] {
            assert!(p.exists(), "{}", p.display());
        }
    }

    #[test]
    fn kc_labels_ignore_padding() {
        let (model, docs, _) = setup(false, 0.1, 0.0);
        let batch = full_batch(&model, &docs);
        assert_eq!(batch.kc_labels[5 + 4], IGNORE_LABEL);
    }
}
