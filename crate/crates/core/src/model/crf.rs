//! Linear-chain CRF over the three BIO labels.
//!
//! Emissions on the tape are time-major: row `t * batch + b` holds the
//! scores of token `t` in sequence `b`.

use crate::corpus::BioTag;
use crate::numerics::{log_sum_exp, NumericsError, ParameterStore, Tape, Tensor, Var};

use super::ModelError;

pub const NUM_TAGS: usize = 3;
/// Score given to the O->I transition when transitions are constrained.
pub const FORBIDDEN_SCORE: f64 = -1e4;

pub const TRANSITIONS: &str = "crf.transitions";
pub const START: &str = "crf.start";
pub const END: &str = "crf.end";

/// Plain-value CRF scores, `transitions[from][to]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfParameters {
    pub transitions: [[f64; NUM_TAGS]; NUM_TAGS],
    pub start: [f64; NUM_TAGS],
    pub end: [f64; NUM_TAGS],
}

impl CrfParameters {
    pub fn zeros() -> Self {
        CrfParameters {
            transitions: [[0.0; NUM_TAGS]; NUM_TAGS],
            start: [0.0; NUM_TAGS],
            end: [0.0; NUM_TAGS],
        }
    }

    pub fn from_store(store: &ParameterStore, constrained: bool) -> Result<Self, ModelError> {
        let get = |name: &str| {
            store
                .get(name)
                .ok_or_else(|| ModelError::MissingParameter(name.to_string()))
        };
        let (tr, st, en) = (get(TRANSITIONS)?, get(START)?, get(END)?);
        let mut p = CrfParameters::zeros();
        for i in 0..NUM_TAGS {
            for j in 0..NUM_TAGS {
                p.transitions[i][j] = tr.data()[i * NUM_TAGS + j];
            }
            p.start[i] = st.data()[i];
            p.end[i] = en.data()[i];
        }
        if constrained {
            p.transitions[BioTag::O.id()][BioTag::I.id()] += FORBIDDEN_SCORE;
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.transitions.iter().flatten().chain(&self.start).chain(&self.end).all(|v| v.is_finite())
    }

    /// Unnormalized score of one tag path.
    pub fn path_score(&self, emissions: &[[f64; NUM_TAGS]], tags: &[usize]) -> f64 {
        let mut s = self.start[tags[0]] + emissions[0][tags[0]];
        for t in 1..tags.len() {
            s += self.transitions[tags[t - 1]][tags[t]] + emissions[t][tags[t]];
        }
        s + self.end[tags[tags.len() - 1]]
    }

    /// Forward algorithm in log space.
    pub fn log_partition(&self, emissions: &[[f64; NUM_TAGS]]) -> f64 {
        let mut alpha: Vec<f64> = (0..NUM_TAGS).map(|j| self.start[j] + emissions[0][j]).collect();
        for e in &emissions[1..] {
            alpha = (0..NUM_TAGS)
                .map(|j| {
                    let scores: Vec<f64> = (0..NUM_TAGS).map(|i| alpha[i] + self.transitions[i][j]).collect();
                    log_sum_exp(&scores) + e[j]
                })
                .collect();
        }
        let last: Vec<f64> = (0..NUM_TAGS).map(|j| alpha[j] + self.end[j]).collect();
        log_sum_exp(&last)
    }

    /// Viterbi path. Ties resolve toward the smaller tag index both when
    /// choosing the final tag and at every back-pointer.
    pub fn viterbi(&self, emissions: &[[f64; NUM_TAGS]]) -> Vec<usize> {
        let n = emissions.len();
        if n == 0 {
            return Vec::new();
        }
        let mut score: Vec<f64> = (0..NUM_TAGS).map(|j| self.start[j] + emissions[0][j]).collect();
        let mut back = vec![[0usize; NUM_TAGS]; n];
        for t in 1..n {
            let mut next = vec![0.0; NUM_TAGS];
            for j in 0..NUM_TAGS {
                let mut best = 0;
                for i in 1..NUM_TAGS {
                    if score[i] + self.transitions[i][j] > score[best] + self.transitions[best][j] {
                        best = i;
                    }
                }
                back[t][j] = best;
                next[j] = score[best] + self.transitions[best][j] + emissions[t][j];
            }
            score = next;
        }
        let mut last = 0;
        for j in 1..NUM_TAGS {
            if score[j] + self.end[j] > score[last] + self.end[last] {
                last = j;
            }
        }
        let mut path = vec![0; n];
        path[n - 1] = last;
        for t in (1..n).rev() {
            path[t - 1] = back[t][path[t]];
        }
        path
    }
}

/// CRF parameters bound on a tape, with the optional O->I constraint folded in.
pub struct CrfVars {
    pub transitions: Var,
    pub start: Var,
    pub end: Var,
}

impl CrfVars {
    pub fn bind(tape: &mut Tape, store: &ParameterStore, constrained: bool) -> Result<Self, NumericsError> {
        let mut transitions = tape.param(store, TRANSITIONS)?;
        if constrained {
            let mut m = Tensor::zeros(&[NUM_TAGS, NUM_TAGS]);
            m.data_mut()[BioTag::O.id() * NUM_TAGS + BioTag::I.id()] = FORBIDDEN_SCORE;
            let c = tape.constant(m)?;
            transitions = tape.add(transitions, c)?;
        }
        Ok(CrfVars {
            transitions,
            start: tape.param(store, START)?,
            end: tape.param(store, END)?,
        })
    }
}

/// Mean over the batch of `log Z - score(gold)`.
///
/// `tags` and `mask` are batch-major `[batch, len]`; masks must be a
/// contiguous prefix of ones per row (right padding).
pub fn negative_log_likelihood(
    tape: &mut Tape,
    emissions: Var,
    crf: &CrfVars,
    tags: &[usize],
    mask: &[u8],
    batch: usize,
    len: usize,
) -> Result<Var, ModelError> {
    let shape = tape.value(emissions).shape().to_vec();
    if shape != [len * batch, NUM_TAGS] || tags.len() != batch * len || mask.len() != batch * len {
        return Err(ModelError::Shape(format!(
            "emissions {shape:?} for batch {batch} x len {len}"
        )));
    }
    let lengths: Vec<usize> = (0..batch)
        .map(|b| mask[b * len..(b + 1) * len].iter().take_while(|&&m| m == 1).count())
        .collect();
    if let Some(b) = lengths.iter().position(|&n| n == 0) {
        return Err(ModelError::EmptySequence(b));
    }
    for b in 0..batch {
        for t in 0..lengths[b] {
            if tags[b * len + t] >= NUM_TAGS {
                return Err(ModelError::InvalidLabel(tags[b * len + t]));
            }
        }
    }

    // forward algorithm
    let trans_t = tape.transpose(crf.transitions)?;
    let columns: Vec<Var> = (0..NUM_TAGS)
        .map(|j| tape.slice_rows(trans_t, j, j + 1))
        .collect::<Result<_, _>>()?;
    let e0 = tape.slice_rows(emissions, 0, batch)?;
    let mut alpha = tape.add_row_vec(e0, crf.start)?;
    for t in 1..len {
        let live: Vec<f64> = (0..batch).map(|b| if t < lengths[b] { 1.0 } else { 0.0 }).collect();
        if live.iter().all(|&m| m == 0.0) {
            break;
        }
        let mut cols = Vec::with_capacity(NUM_TAGS);
        for &col in &columns {
            let s = tape.add_row_vec(alpha, col)?;
            cols.push(tape.log_sum_exp_rows(s)?);
        }
        let stacked = tape.concat_cols(&cols)?;
        let et = tape.slice_rows(emissions, t * batch, (t + 1) * batch)?;
        let next = tape.add(stacked, et)?;
        alpha = if live.iter().all(|&m| m == 1.0) {
            next
        } else {
            let keep: Vec<f64> = live.iter().map(|m| 1.0 - m).collect();
            let a = tape.mask_rows(next, live)?;
            let b = tape.mask_rows(alpha, keep)?;
            tape.add(a, b)?
        };
    }
    let fin = tape.add_row_vec(alpha, crf.end)?;
    let log_z = tape.log_sum_exp_rows(fin)?;
    let log_z = tape.sum(log_z)?;

    // gold path score
    let mut emit_idx = Vec::new();
    let mut trans_idx = Vec::new();
    let mut start_idx = Vec::new();
    let mut end_idx = Vec::new();
    for b in 0..batch {
        let n = lengths[b];
        for t in 0..n {
            let tag = tags[b * len + t];
            emit_idx.push((t * batch + b) * NUM_TAGS + tag);
            if t > 0 {
                trans_idx.push(tags[b * len + t - 1] * NUM_TAGS + tag);
            }
        }
        start_idx.push(tags[b * len]);
        end_idx.push(tags[b * len + n - 1]);
    }
    let mut parts = vec![
        tape.gather(emissions, emit_idx)?,
        tape.gather(crf.start, start_idx)?,
        tape.gather(crf.end, end_idx)?,
    ];
    if !trans_idx.is_empty() {
        parts.push(tape.gather(crf.transitions, trans_idx)?);
    }
    let gold = tape.concat_rows(&parts)?;
    let gold = tape.sum(gold)?;
    let diff = tape.sub(log_z, gold)?;
    Ok(tape.scale(diff, 1.0 / batch as f64)?)
}

/// Converts a batch-major `[batch, len, 3]` tensor to time-major rows.
pub fn to_time_major(emissions: &Tensor) -> Result<(Tensor, usize, usize), ModelError> {
    let s = emissions.shape();
    if s.len() != 3 || s[2] != NUM_TAGS {
        return Err(ModelError::Shape(format!("expected [batch, len, 3], got {s:?}")));
    }
    let (batch, len) = (s[0], s[1]);
    let mut data = vec![0.0; batch * len * NUM_TAGS];
    for b in 0..batch {
        for t in 0..len {
            for j in 0..NUM_TAGS {
                data[(t * batch + b) * NUM_TAGS + j] = emissions.data()[(b * len + t) * NUM_TAGS + j];
            }
        }
    }
    Ok((Tensor::new(vec![len * batch, NUM_TAGS], data).expect("shape"), batch, len))
}

/// Value-level NLL for a `[batch, len, 3]` emission tensor.
pub fn crf_negative_log_likelihood(
    emissions: &Tensor,
    crf: &CrfParameters,
    tags: &[usize],
    mask: &[u8],
) -> Result<f64, ModelError> {
    let (tm, batch, len) = to_time_major(emissions)?;
    let mut store = ParameterStore::new();
    store.insert(TRANSITIONS, Tensor::new(vec![3, 3], crf.transitions.iter().flatten().copied().collect())?)?;
    store.insert(START, Tensor::vector(crf.start.to_vec()))?;
    store.insert(END, Tensor::vector(crf.end.to_vec()))?;
    let mut tape = Tape::new();
    let e = tape.constant(tm)?;
    let vars = CrfVars::bind(&mut tape, &store, false)?;
    let nll = negative_log_likelihood(&mut tape, e, &vars, tags, mask, batch, len)?;
    Ok(tape.scalar(nll))
}

/// Viterbi decode of every row of a `[batch, len, 3]` emission tensor.
pub fn crf_decode(emissions: &Tensor, crf: &CrfParameters, mask: &[u8]) -> Result<Vec<Vec<usize>>, ModelError> {
    let s = emissions.shape();
    if s.len() != 3 || s[2] != NUM_TAGS || mask.len() != s[0] * s[1] {
        return Err(ModelError::Shape(format!("expected [batch, len, 3], got {s:?}")));
    }
    let (batch, len) = (s[0], s[1]);
    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        let n = mask[b * len..(b + 1) * len].iter().take_while(|&&m| m == 1).count();
        if n == 0 {
            return Err(ModelError::EmptySequence(b));
        }
        let rows: Vec<[f64; NUM_TAGS]> = (0..n)
            .map(|t| {
                let o = (b * len + t) * NUM_TAGS;
                [emissions.data()[o], emissions.data()[o + 1], emissions.data()[o + 2]]
            })
            .collect();
        out.push(crf.viterbi(&rows));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_crf(rng: &mut ChaCha8Rng) -> CrfParameters {
        let mut p = CrfParameters::zeros();
        for i in 0..3 {
            for j in 0..3 {
                p.transitions[i][j] = rng.gen_range(-2.0..2.0);
            }
            p.start[i] = rng.gen_range(-2.0..2.0);
            p.end[i] = rng.gen_range(-2.0..2.0);
        }
        p
    }

    fn all_paths(n: usize) -> Vec<Vec<usize>> {
        (0..3usize.pow(n as u32))
            .map(|mut code| {
                (0..n)
                    .map(|_| {
                        let t = code % 3;
                        code /= 3;
                        t
                    })
                    .collect::<Vec<_>>()
                    .into_iter()
                    .rev()
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_token_closed_form() {
        let mut crf = CrfParameters::zeros();
        crf.start = [0.3, -0.2, 0.1];
        crf.end = [-0.5, 0.4, 0.0];
        let e = [1.5, -0.7, 0.2];
        let em = Tensor::new(vec![1, 1, 3], e.to_vec()).unwrap();
        let nll = crf_negative_log_likelihood(&em, &crf, &[0], &[1]).unwrap();
        let terms: Vec<f64> = (0..3).map(|j| e[j] + crf.start[j] + crf.end[j]).collect();
        let expected = log_sum_exp(&terms) - terms[0];
        assert!((nll - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_scores_give_n_log_3() {
        for n in 1..6 {
            let em = Tensor::zeros(&[1, n, 3]);
            let tags: Vec<usize> = (0..n).map(|t| t % 3).collect();
            let nll = crf_negative_log_likelihood(&em, &CrfParameters::zeros(), &tags, &vec![1; n]).unwrap();
            assert!((nll - n as f64 * 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_enumeration_and_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..40 {
            let n = rng.gen_range(1..=6);
            let crf = random_crf(&mut rng);
            let em: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]).collect();
            let scores: Vec<f64> = all_paths(n).iter().map(|p| crf.path_score(&em, p)).collect();
            let brute = log_sum_exp(&scores);
            let log_z = crf.log_partition(&em);
            assert!((log_z - brute).abs() < 1e-8);
            let total: f64 = scores.iter().map(|s| (s - log_z).exp()).sum();
            assert!((total - 1.0).abs() < 1e-8);
            assert!(scores.iter().all(|&s| s <= log_z));
        }
    }

    #[test]
    fn viterbi_examples() {
        let crf = CrfParameters::zeros();
        assert_eq!(crf.viterbi(&[[5.0, 1.0, 1.0]]), vec![0]);
        assert_eq!(crf.viterbi(&[[0.0; 3]; 4]), vec![0; 4]);
    }

    #[test]
    fn batched_nll_matches_per_sequence_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let crf = random_crf(&mut rng);
        let (batch, len) = (3, 4);
        let lengths = [4, 1, 2];
        let data: Vec<f64> = (0..batch * len * 3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let em = Tensor::new(vec![batch, len, 3], data.clone()).unwrap();
        let mut mask = vec![0u8; batch * len];
        let mut tags = vec![0usize; batch * len];
        let mut expected = 0.0;
        for b in 0..batch {
            let rows: Vec<[f64; 3]> = (0..lengths[b]).map(|t| {
                let o = (b * len + t) * 3;
                [data[o], data[o + 1], data[o + 2]]
            }).collect();
            let gold: Vec<usize> = (0..lengths[b]).map(|_| rng.gen_range(0..3)).collect();
            for t in 0..lengths[b] {
                mask[b * len + t] = 1;
                tags[b * len + t] = gold[t];
            }
            expected += crf.log_partition(&rows) - crf.path_score(&rows, &gold);
        }
        expected /= batch as f64;
        let nll = crf_negative_log_likelihood(&em, &crf, &tags, &mask).unwrap();
        assert!((nll - expected).abs() < 1e-10);
    }

    #[test]
    fn zero_length_sequence_rejected() {
        let em = Tensor::zeros(&[1, 2, 3]);
        assert!(matches!(
            crf_negative_log_likelihood(&em, &CrfParameters::zeros(), &[0, 0], &[0, 0]),
            Err(ModelError::EmptySequence(0))
        ));
    }

    #[test]
    fn nll_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (batch, len) = (2, 3);
        let mut store = ParameterStore::new();
        let r = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>();
        store.insert("em", Tensor::new(vec![batch * len, 3], r(&mut rng, batch * len * 3)).unwrap()).unwrap();
        store.insert(TRANSITIONS, Tensor::new(vec![3, 3], r(&mut rng, 9)).unwrap()).unwrap();
        store.insert(START, Tensor::vector(r(&mut rng, 3))).unwrap();
        store.insert(END, Tensor::vector(r(&mut rng, 3))).unwrap();
        let tags = [1, 2, 0, 0, 1, 0];
        let mask = [1, 1, 1, 1, 1, 0];
        for constrained in [false, true] {
            let err = finite_difference_check(&store, 1e-5, |t, s| -> Result<Var, ModelError> {
                let e = t.param(s, "em")?;
                let vars = CrfVars::bind(t, s, constrained)?;
                negative_log_likelihood(t, e, &vars, &tags, &mask, batch, len)
            })
            .unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }
}
