//! Built-in oracle suite run by `tada verify`: every documented invariant,
//! checked at small scale.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{build_vocab, encode_batch, parse_conll, write_conll, BioTag, EncodedBatch, TaggedDocument, TypeInventory};
use crate::evaluation::{decode_spans, encode_spans, exact_match_f1, Span};
use crate::model::crf::{negative_log_likelihood, TRANSITIONS};
use crate::model::{
    domain_loss, encode, CrfParameters, CrfVars, EncoderConfig, GradientFlow, Latent, Mode, ModelConfig, ModelError,
    TaggerModel, NUM_TAGS,
};
use crate::numerics::{finite_difference_check, forward_backward, log_sum_exp, softmax, ParameterStore, Tape, Tensor, Var};
use crate::topics::{
    argmax_rows, factorize, fit_kmeans, fit_lda_observed, truncated_svd, BowMatrix, LdaParams,
};
use crate::training::{compute_gradients, fgsm_perturb, objective, total_loss, OptimizerKind, TrainConfig};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Observed error (or violation) and the bound it is held to.
    pub observed: f64,
    pub bound: f64,
    pub detail: String,
}

impl CheckResult {
    /// Distance to the bound; negative when failing.
    pub fn margin(&self) -> f64 {
        self.bound - self.observed
    }
}

/// Test-only corruption of the fixture model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tamper {
    pub nan_transitions: bool,
}

type CheckFn = fn(&Fixture) -> Result<(f64, f64), String>;

struct Fixture {
    model: TaggerModel,
    docs: Vec<TaggedDocument>,
    batch: EncodedBatch,
}

const FIXTURE: &str = "#doc v1\nwe\tO\tO\npropose\tO\tO\ngraph\tB\tProcess\nkernels\tI\tProcess\n\n\
#doc v2\nparsing\tB\tTask\nof\tI\tTask\ntext\tI\tTask\n\n\
#doc v3\nsilicon\tB\tMaterial\nwafers\tI\tMaterial\nare\tO\tO\netched\tO\tO\nfast\tO\tO\n";

fn fixture(tamper: Tamper) -> Result<Fixture, String> {
    let docs = parse_conll(FIXTURE).map_err(|e| e.to_string())?;
    let vocab = build_vocab(&docs, 1).map_err(|e| e.to_string())?;
    let inventory = TypeInventory::from_corpus(&docs);
    let config = ModelConfig {
        encoder: EncoderConfig {
            embedding_width: 4,
            lstm_hidden: 3,
            lstm_layers: 1,
            use_precomputed: false,
            dropout_rate: 0.0,
        },
        vocab_size: vocab.len(),
        kc_classes: inventory.num_classes(),
        num_domains: 2,
        discriminator_hidden: 3,
        constrain_transitions: false,
    };
    let mut model = TaggerModel::new(config, vocab, inventory, 17).map_err(|e| e.to_string())?;
    if tamper.nan_transitions {
        let t = model.params.get_mut(TRANSITIONS).ok_or("no transitions")?;
        t.data_mut().iter_mut().for_each(|v| *v = f64::NAN);
    }
    let refs: Vec<&TaggedDocument> = docs.iter().collect();
    let batch = encode_batch(&refs, &model.vocab, &[0, 1, 0], &model.inventory, 2).map_err(|e| e.to_string())?;
    Ok(Fixture { model, docs, batch })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---- numerics ----

fn primitive_gradients(_: &Fixture) -> Result<(f64, f64), String> {
    let mut r = rng(1);
    let mut s = ParameterStore::new();
    for (name, shape) in [("a", vec![3, 4]), ("b", vec![3, 4]), ("m", vec![4, 2]), ("v", vec![4])] {
        let n: usize = shape.iter().product();
        s.insert(name, Tensor::new(shape, (0..n).map(|_| r.gen_range(-2.0..2.0)).collect()).map_err(err)?)
            .map_err(err)?;
    }
    type Case = Box<dyn Fn(&mut Tape, &ParameterStore) -> Result<Var, crate::numerics::NumericsError>>;
    let cases: Vec<Case> = vec![
        Box::new(|t, s| { let a = t.param(s, "a")?; let b = t.param(s, "b")?; let r = t.mul(a, b)?; let r = t.sub(r, a)?; let r = t.tanh(r)?; t.sum(r) }),
        Box::new(|t, s| { let a = t.param(s, "a")?; let m = t.param(s, "m")?; let r = t.matmul(a, m)?; let r = t.sigmoid(r)?; t.sum(r) }),
        Box::new(|t, s| { let a = t.param(s, "a")?; let v = t.param(s, "v")?; let r = t.add_row_vec(a, v)?; let r = t.log_softmax_rows(r)?; let r = t.gather(r, vec![0, 5, 11])?; t.sum(r) }),
        Box::new(|t, s| { let a = t.param(s, "a")?; let r = t.log_sum_exp_rows(a)?; let r = t.exp(r)?; let r = t.log(r)?; let r = t.mul(r, r)?; t.sum(r) }),
        Box::new(|t, s| { let a = t.param(s, "a")?; let at = t.transpose(a)?; let r = t.slice_rows(at, 1, 3)?; let r = t.concat_cols(&[r, r])?; let r = t.tanh(r)?; t.sum(r) }),
        Box::new(|t, s| { let m = t.param(s, "m")?; let r = t.gather_rows(m, vec![3, 0, 3])?; let r = t.reverse_gradient(r)?; let r = t.scale(r, 1.5)?; let r = t.tanh(r)?; t.sum(r) }),
    ];
    let mut worst: f64 = 0.0;
    for f in &cases {
        worst = worst.max(finite_difference_check(&s, 1e-5, f).map_err(err)?);
    }
    Ok((worst, 1e-6))
}

fn log_sum_exp_bounds(_: &Fixture) -> Result<(f64, f64), String> {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = r.gen_range(1..12);
        let v: Vec<f64> = (0..n).map(|_| r.gen_range(-50.0..50.0)).collect();
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let l = log_sum_exp(&v);
        worst = worst.max(m - l).max(l - m - (n as f64).ln());
    }
    Ok((worst, 1e-12))
}

fn softmax_simplex(_: &Fixture) -> Result<(f64, f64), String> {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = r.gen_range(1..12);
        let v: Vec<f64> = (0..n).map(|_| r.gen_range(-30.0..30.0)).collect();
        let p = softmax(&v);
        if p.iter().any(|&x| !(x > 0.0)) {
            return Ok((1.0, 1e-12));
        }
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
    }
    Ok((worst, 1e-12))
}

fn tape_determinism(f: &Fixture) -> Result<(f64, f64), String> {
    let run = || {
        forward_backward(&f.model.params, |t, s| -> Result<Var, ModelError> {
            let l = encode(t, s, &f.model.config.encoder, &f.batch, Mode::Eval)?;
            Ok(objective(t, s, &f.model, &l, &f.batch, 0.1, GradientFlow::Reverse)?.l_total)
        })
    };
    let (a, ga) = run().map_err(err)?;
    let (b, gb) = run().map_err(err)?;
    Ok((if a.to_bits() == b.to_bits() && ga == gb { 0.0 } else { 1.0 }, 0.0))
}

// ---- corpus ----

fn corpus_roundtrip(f: &Fixture) -> Result<(f64, f64), String> {
    let again = parse_conll(&write_conll(&f.docs)).map_err(err)?;
    Ok((if again == f.docs { 0.0 } else { 1.0 }, 0.0))
}

fn mask_sum(f: &Fixture) -> Result<(f64, f64), String> {
    let tokens: usize = f.docs.iter().map(TaggedDocument::len).sum();
    Ok(((f.batch.token_count() as f64 - tokens as f64).abs(), 0.0))
}

// ---- topics ----

fn planted_bow(seed: u64) -> Result<BowMatrix, String> {
    let mut r = rng(seed);
    let terms: Vec<String> = (0..12).map(|i| format!("w{i:02}")).collect();
    let docs = 10;
    let mut counts = vec![0.0; docs * 12];
    for d in 0..docs {
        let base = if d % 2 == 0 { 0 } else { 6 };
        for _ in 0..15 {
            counts[d * 12 + base + r.gen_range(0..6)] += 1.0;
        }
    }
    BowMatrix::from_dense(terms, docs, counts).map_err(err)
}

fn lda_count_conservation(_: &Fixture) -> Result<(f64, f64), String> {
    let bow = planted_bow(4)?;
    let mut worst: f64 = 0.0;
    let p = LdaParams { k: 3, alpha: 0.5, beta: 0.01, iterations: 30, seed: 4 };
    fit_lda_observed(&bow, p, |_, s| {
        let n = s.total_tokens() as f64;
        let (a, b, c) = s.assignment_totals();
        for x in [a, b, c] {
            worst = worst.max((x as f64 - n).abs());
        }
    })
    .map_err(err)?;
    Ok((worst, 0.0))
}

fn lda_simplex(_: &Fixture) -> Result<(f64, f64), String> {
    let bow = planted_bow(5)?;
    let mut worst: f64 = 0.0;
    let p = LdaParams { k: 3, alpha: 0.5, beta: 0.01, iterations: 30, seed: 5 };
    fit_lda_observed(&bow, p, |_, s| {
        for m in [s.theta(), s.phi()] {
            let (rows, cols) = m.rows_cols();
            for r in 0..rows {
                let row = &m.data()[r * cols..(r + 1) * cols];
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                if row.iter().any(|&x| x < 0.0) {
                    worst = f64::INFINITY;
                }
            }
        }
    })
    .map_err(err)?;
    Ok((worst, 1e-9))
}

fn nmf_monotone(_: &Fixture) -> Result<(f64, f64), String> {
    let bow = planted_bow(6)?;
    let (_, _, trace) = factorize(&bow.counts, bow.docs, bow.vocab_size(), 3, 60, 6).map_err(err)?;
    let mut worst: f64 = 0.0;
    for w in trace.objective.windows(2) {
        // slack relative to the objective's magnitude
        worst = worst.max((w[1] - w[0]) / w[0].max(1.0));
    }
    if !trace.nonnegative {
        worst = f64::INFINITY;
    }
    Ok((worst.max(0.0), 1e-10))
}

fn kmeans_assignment(_: &Fixture) -> Result<(f64, f64), String> {
    let mut r = rng(7);
    let (n, dim, k) = (30, 3, 4);
    let points: Vec<f64> = (0..n * dim).map(|_| r.gen_range(-1.0..1.0)).collect();
    let (fit, trace) = fit_kmeans(&points, n, dim, k, 100, 7).map_err(err)?;
    let mut worst: f64 = 0.0;
    for w in trace.inertia.windows(2) {
        worst = worst.max(w[1] - w[0]);
    }
    if trace.converged {
        let c = fit.phi.data();
        for i in 0..n {
            let p = &points[i * dim..(i + 1) * dim];
            let d = |j: usize| -> f64 { (0..dim).map(|x| (p[x] - c[j * dim + x]).powi(2)).sum() };
            let mine = d(trace.assignments[i]);
            for j in 0..k {
                let other = d(j);
                if other < mine || (other == mine && j < trace.assignments[i]) {
                    worst = worst.max(mine - other).max(1e-300);
                }
            }
        }
    }
    Ok((worst.max(0.0), 1e-12))
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
fn jacobi_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[i * n + j].powi(2)).sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap_or(std::cmp::Ordering::Equal));
    ev
}

fn lsa_gram_oracle(_: &Fixture) -> Result<(f64, f64), String> {
    let mut r = rng(8);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let rows = r.gen_range(2..9);
        let cols = r.gen_range(2..9);
        let a: Vec<f64> = (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect();
        let k = r.gen_range(1..=rows.min(cols));
        let svd = truncated_svd(&a, rows, cols, k).map_err(err)?;
        let mut g = vec![0.0; cols * cols];
        for i in 0..cols {
            for j in 0..cols {
                g[i * cols + j] = (0..rows).map(|x| a[x * cols + i] * a[x * cols + j]).sum();
            }
        }
        let ev = jacobi_eigenvalues(g, cols);
        for j in 0..k {
            worst = worst.max((svd.singular_values[j] - ev[j].max(0.0).sqrt()).abs());
        }
    }
    Ok((worst, 1e-6))
}

fn argmax_scale_invariance(_: &Fixture) -> Result<(f64, f64), String> {
    let mut r = rng(9);
    let mut bad = 0.0;
    for _ in 0..100 {
        let k = r.gen_range(2..6);
        let row: Vec<f64> = (0..k).map(|_| r.gen_range(0.0..1.0)).collect();
        // a common factor keeps the ordering
        let factor = r.gen_range(0.1..10.0);
        let common: Vec<f64> = row.iter().map(|x| x * factor).collect();
        let a = argmax_rows(&Tensor::new(vec![1, k], row.clone()).map_err(err)?)[0];
        let b = argmax_rows(&Tensor::new(vec![1, k], common).map_err(err)?)[0];
        if a != b {
            bad += 1.0;
        }
    }
    Ok((bad, 0.0))
}

// ---- model ----

fn crf_finite(f: &Fixture) -> Result<(f64, f64), String> {
    let crf = CrfParameters::from_store(&f.model.params, false).map_err(err)?;
    let ok = crf.is_finite() && f.model.params.is_finite();
    Ok((if ok { 0.0 } else { 1.0 }, 0.0))
}

fn random_crf(r: &mut ChaCha8Rng) -> CrfParameters {
    let mut c = CrfParameters::zeros();
    for row in c.transitions.iter_mut() {
        for v in row.iter_mut() {
            *v = r.gen_range(-2.0..2.0);
        }
    }
    for v in c.start.iter_mut().chain(c.end.iter_mut()) {
        *v = r.gen_range(-2.0..2.0);
    }
    c
}

fn all_paths(n: usize) -> Vec<Vec<usize>> {
    (0..NUM_TAGS.pow(n as u32))
        .map(|mut code| {
            (0..n)
                .map(|_| {
                    let t = code % NUM_TAGS;
                    code /= NUM_TAGS;
                    t
                })
                .collect()
        })
        .collect()
}

fn crf_enumeration(f: &Fixture) -> Result<(f64, f64), String> {
    let mut r = rng(10);
    let mut worst: f64 = 0.0;
    let fixture_crf = CrfParameters::from_store(&f.model.params, false).map_err(err)?;
    for case in 0..40 {
        let crf = if case == 0 { fixture_crf.clone() } else { random_crf(&mut r) };
        let n = r.gen_range(1..=5);
        let em: Vec<[f64; NUM_TAGS]> = (0..n).map(|_| [0; NUM_TAGS].map(|_| r.gen_range(-2.0..2.0))).collect();
        let scores: Vec<f64> = all_paths(n).iter().map(|p| crf.path_score(&em, p)).collect();
        let log_z = crf.log_partition(&em);
        let brute = log_sum_exp(&scores);
        worst = worst.max((log_z - brute).abs());
        // normalization and dominance
        let total: f64 = scores.iter().map(|s| (s - log_z).exp()).sum();
        worst = worst.max((total - 1.0).abs());
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max(top - log_z);
        if !worst.is_finite() {
            worst = f64::INFINITY;
        }
    }
    Ok((if worst.is_nan() { f64::INFINITY } else { worst }, 1e-8))
}

fn crf_viterbi(_: &Fixture) -> Result<(f64, f64), String> {
    let mut r = rng(11);
    let mut mismatches = 0.0;
    for _ in 0..40 {
        let crf = random_crf(&mut r);
        let n = r.gen_range(1..=5);
        let em: Vec<[f64; NUM_TAGS]> = (0..n).map(|_| [0; NUM_TAGS].map(|_| r.gen_range(-2.0..2.0))).collect();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for p in all_paths(n) {
            let s = crf.path_score(&em, &p);
            let better = match &best {
                None => true,
                Some((bs, bp)) => s > *bs || (s == *bs && p.iter().rev().lt(bp.iter().rev())),
            };
            if better {
                best = Some((s, p));
            }
        }
        let (bs, _) = best.ok_or("no paths")?;
        let got = crf.viterbi(&em);
        if (crf.path_score(&em, &got) - bs).abs() > 1e-12 {
            mismatches += 1.0;
        }
    }
    Ok((mismatches, 0.0))
}

fn full_objective(f: &Fixture, flow: GradientFlow) -> impl Fn(&mut Tape, &ParameterStore) -> Result<Var, ModelError> + '_ {
    move |t, s| {
        let l = encode(t, s, &f.model.config.encoder, &f.batch, Mode::Eval)?;
        Ok(objective(t, s, &f.model, &l, &f.batch, 0.1, flow)?.l_total)
    }
}

fn model_finite_differences(f: &Fixture) -> Result<(f64, f64), String> {
    let e = finite_difference_check(&f.model.params, 1e-5, full_objective(f, GradientFlow::Reverse)).map_err(err)?;
    Ok((e, 1e-4))
}

fn reversal_exact(f: &Fixture) -> Result<(f64, f64), String> {
    let mut tape = Tape::new();
    let l = encode(&mut tape, &f.model.params, &f.model.config.encoder, &f.batch, Mode::Eval).map_err(err)?;
    let d = domain_loss(&mut tape, &f.model.params, &l, &f.batch.domain_labels, GradientFlow::Reverse).map_err(err)?;
    let flipped = tape.backward(d).map_err(err)?;
    let plain = tape.backward_unreversed(d).map_err(err)?;
    let mut worst: f64 = 0.0;
    for (name, var) in tape.bound_params() {
        if !ModelConfig::is_encoder_parameter(name) {
            continue;
        }
        let (a, b) = (flipped.get_or_zeros(&tape, *var), plain.get_or_zeros(&tape, *var));
        for (x, y) in a.data().iter().zip(b.data()) {
            if *x != -*y {
                worst = worst.max((x + y).abs()).max(f64::MIN_POSITIVE);
            }
        }
    }
    Ok((worst, 0.0))
}

fn eval_mode_dropout(f: &Fixture) -> Result<(f64, f64), String> {
    let values = |cfg: &EncoderConfig| -> Result<Tensor, String> {
        let mut t = Tape::new();
        let l: Latent = encode(&mut t, &f.model.params, cfg, &f.batch, Mode::Eval).map_err(err)?;
        Ok(l.values(&t))
    };
    let mut with = f.model.config.encoder.clone();
    with.dropout_rate = 0.5;
    let mut without = with.clone();
    without.dropout_rate = 0.0;
    Ok((if values(&with)? == values(&without)? { 0.0 } else { 1.0 }, 0.0))
}

// ---- training ----

fn train_config(lambda: f64, adversarial: bool) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 3,
        learning_rate: 1e-2,
        optimizer: OptimizerKind::Sgd,
        lambda,
        epsilon: 0.01,
        adversarial,
        seed: 1,
        clip_norm: 5.0,
    }
}

fn recomposition(f: &Fixture) -> Result<(f64, f64), String> {
    let mut worst: f64 = 0.0;
    for lambda in [0.0, 0.1, 1.0] {
        let (r, _) = compute_gradients(&f.model, &f.batch, &train_config(lambda, true), 0).map_err(err)?;
        worst = worst.max((r.l_total - total_loss(r.l_tag, r.l_class, r.l_da, lambda)).abs());
    }
    Ok((worst, 1e-9))
}

fn latent_gradient(f: &Fixture) -> Result<(Tensor, Tensor, f64), String> {
    let mut tape = Tape::new();
    let l = encode(&mut tape, &f.model.params, &f.model.config.encoder, &f.batch, Mode::Eval).map_err(err)?;
    let obj = objective(&mut tape, &f.model.params, &f.model, &l, &f.batch, 0.1, GradientFlow::Reverse).map_err(err)?;
    let g = tape.backward_unreversed(obj.l_total).map_err(err)?.get_or_zeros(&tape, l.var);
    Ok((tape.value(l.var).clone(), g, tape.scalar(obj.l_total)))
}

/// `L_total` with the latent replaced by a fixed tensor.
fn loss_at(f: &Fixture, x: &Tensor) -> Result<f64, String> {
    let mut tape = Tape::new();
    let l = encode(&mut tape, &f.model.params, &f.model.config.encoder, &f.batch, Mode::Eval).map_err(err)?;
    let var = tape.constant(x.clone()).map_err(err)?;
    let fixed = Latent { var, ..l };
    let obj = objective(&mut tape, &f.model.params, &f.model, &fixed, &f.batch, 0.1, GradientFlow::Reverse).map_err(err)?;
    Ok(tape.scalar(obj.l_total))
}

fn fgsm_bound(f: &Fixture) -> Result<(f64, f64), String> {
    let (x, g, _) = latent_gradient(f)?;
    let eps = 0.01;
    let adv = fgsm_perturb(&x, &g, eps).map_err(err)?;
    let mut worst: f64 = 0.0;
    for ((a, b), d) in adv.data().iter().zip(x.data()).zip(g.data()) {
        let diff = (a - b).abs();
        worst = worst.max(diff - eps);
        if *d != 0.0 {
            worst = worst.max((diff - eps).abs());
        } else if a != b {
            worst = worst.max(diff);
        }
    }
    let same = fgsm_perturb(&x, &g, 0.0).map_err(err)?;
    if same != x {
        worst = f64::INFINITY;
    }
    Ok((worst.max(0.0), 1e-12))
}

fn fgsm_first_order(f: &Fixture) -> Result<(f64, f64), String> {
    let (x, g, base) = latent_gradient(f)?;
    let adv = fgsm_perturb(&x, &g, 1e-4).map_err(err)?;
    let up = loss_at(f, &adv)?;
    Ok(((base - up).max(0.0), 1e-6))
}

fn training_determinism(f: &Fixture) -> Result<(f64, f64), String> {
    let cfg = train_config(0.1, true);
    let a = compute_gradients(&f.model, &f.batch, &cfg, 3).map_err(err)?;
    let b = compute_gradients(&f.model, &f.batch, &cfg, 3).map_err(err)?;
    Ok((if a == b { 0.0 } else { 1.0 }, 0.0))
}

fn lambda_zero_reduction(f: &Fixture) -> Result<(f64, f64), String> {
    let cfg = train_config(0.0, false);
    let (_, g1) = compute_gradients(&f.model, &f.batch, &cfg, 0).map_err(err)?;
    let mut other = f.batch.clone();
    other.domain_labels = other.domain_labels.iter().map(|d| 1 - d).collect();
    let (_, g2) = compute_gradients(&f.model, &other, &cfg, 0).map_err(err)?;
    let mut worst: f64 = 0.0;
    for (name, a) in g1.iter() {
        if name.starts_with("disc.") {
            continue;
        }
        let b = g2.get(name).ok_or("missing gradient")?;
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok((worst, 0.0))
}

// ---- evaluation ----

fn random_tags(r: &mut ChaCha8Rng, strict: bool) -> Vec<BioTag> {
    let n = r.gen_range(0..20);
    let mut out: Vec<BioTag> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut t = BioTag::from_id(r.gen_range(0..3)).expect("tag id");
        if strict && t == BioTag::I && matches!(out.last(), None | Some(BioTag::O)) {
            t = BioTag::B;
        }
        out.push(t);
    }
    out
}

fn bio_roundtrip(_: &Fixture) -> Result<(f64, f64), String> {
    let mut r = rng(12);
    let bad = (0..300)
        .filter(|_| {
            let tags = random_tags(&mut r, true);
            encode_spans(&decode_spans(&tags), tags.len()) != tags
        })
        .count();
    Ok((bad as f64, 0.0))
}

fn metric_properties(_: &Fixture) -> Result<(f64, f64), String> {
    let mut r = rng(13);
    let types = ["Material", "Process", "Task"];
    let mut worst: f64 = 0.0;
    for _ in 0..300 {
        let mut pred = Vec::new();
        let mut gold = Vec::new();
        for d in 0..3 {
            for (out, strict) in [(&mut pred, false), (&mut gold, true)] {
                let tags = random_tags(&mut r, strict);
                for (s, e) in decode_spans(&tags) {
                    out.push(Span {
                        doc_id: format!("d{d}"),
                        start: s,
                        end: e,
                        kind: Some(types[r.gen_range(0..3)].to_string()),
                    });
                }
            }
        }
        let ki = exact_match_f1(&pred, &gold, false);
        let kic = exact_match_f1(&pred, &gold, true);
        worst = worst.max(kic.f1 - ki.f1);
        for s in [ki, kic] {
            for v in [s.precision, s.recall, s.f1] {
                if !(0.0..=1.0).contains(&v) {
                    worst = f64::INFINITY;
                }
            }
            if (!pred.is_empty() || !gold.is_empty()) && ((s.f1 == 0.0) != (s.true_positives == 0)) {
                worst = f64::INFINITY;
            }
        }
        let mut shuffled = pred.clone();
        shuffled.reverse();
        if exact_match_f1(&shuffled, &gold, true) != kic {
            worst = f64::INFINITY;
        }
    }
    Ok((worst.max(0.0), 0.0))
}

fn crf_gradient_through_model(f: &Fixture) -> Result<(f64, f64), String> {
    // CRF term alone on emissions from the fixture model
    let e = finite_difference_check(&f.model.params, 1e-5, |t, s| -> Result<Var, ModelError> {
        let l = encode(t, s, &f.model.config.encoder, &f.batch, Mode::Eval)?;
        let em = crate::model::emissions(t, s, &l)?;
        let crf = CrfVars::bind(t, s, true)?;
        negative_log_likelihood(t, em, &crf, &f.batch.ki_labels, &f.batch.mask, f.batch.batch, f.batch.max_len)
    })
    .map_err(err)?;
    Ok((e, 1e-4))
}

const CHECKS: &[(&str, CheckFn)] = &[
    ("numerics.primitive_gradients", primitive_gradients),
    ("numerics.log_sum_exp_bounds", log_sum_exp_bounds),
    ("numerics.softmax_simplex", softmax_simplex),
    ("numerics.determinism", tape_determinism),
    ("corpus.roundtrip", corpus_roundtrip),
    ("corpus.mask_sum", mask_sum),
    ("topics.lda_count_conservation", lda_count_conservation),
    ("topics.lda_simplex", lda_simplex),
    ("topics.nmf_monotone_nonnegative", nmf_monotone),
    ("topics.kmeans_inertia_and_assignment", kmeans_assignment),
    ("topics.lsa_gram_oracle", lsa_gram_oracle),
    ("topics.argmax_scale_invariance", argmax_scale_invariance),
    ("model.crf_parameters_finite", crf_finite),
    ("model.crf_partition_enumeration", crf_enumeration),
    ("model.crf_viterbi_enumeration", crf_viterbi),
    ("model.crf_gradient_fd", crf_gradient_through_model),
    ("model.total_loss_gradient_fd", model_finite_differences),
    ("model.gradient_reversal_exact", reversal_exact),
    ("model.eval_mode_disables_dropout", eval_mode_dropout),
    ("training.loss_recomposition", recomposition),
    ("training.fgsm_bound", fgsm_bound),
    ("training.fgsm_first_order", fgsm_first_order),
    ("training.determinism", training_determinism),
    ("training.lambda_zero_reduction", lambda_zero_reduction),
    ("evaluation.bio_roundtrip", bio_roundtrip),
    ("evaluation.metric_properties", metric_properties),
];

/// Runs every check; errors inside a check count as failures.
pub fn run_checks(tamper: Tamper) -> Vec<CheckResult> {
    let fix = match fixture(tamper) {
        Ok(f) => f,
        Err(e) => {
            return vec![CheckResult {
                name: "fixture",
                passed: false,
                observed: f64::INFINITY,
                bound: 0.0,
                detail: e,
            }]
        }
    };
    CHECKS
        .iter()
        .map(|(name, check)| {
            let start = Instant::now();
            let result = check(&fix);
            let elapsed = start.elapsed().as_secs_f64();
            match result {
                Ok((observed, bound)) => CheckResult {
                    name,
                    passed: observed <= bound,
                    observed,
                    bound,
                    detail: format!("{elapsed:.2}s"),
                },
                Err(e) => CheckResult {
                    name,
                    passed: false,
                    observed: f64::INFINITY,
                    bound: 0.0,
                    detail: e,
                },
            }
        })
        .collect()
}
