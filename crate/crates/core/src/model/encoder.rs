use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EncoderConfig, ModelError};
use crate::corpus::EncodedBatch;
use crate::numerics::{ParameterStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, masks drawn from a generator seeded with `seed`.
    Train { seed: u64 },
    Eval,
}

/// Token latents on a tape, time-major: row `t * batch + b`.
#[derive(Clone, Debug)]
pub struct Latent {
    pub var: Var,
    pub batch: usize,
    pub max_len: usize,
    pub width: usize,
    /// Batch-major `[batch, max_len]`, shared with the source batch.
    pub mask: Vec<u8>,
    pub lengths: Vec<usize>,
}

impl Latent {
    pub fn row(&self, b: usize, t: usize) -> usize {
        t * self.batch + b
    }

    /// Mask in the time-major row order of the latent.
    pub fn time_major_mask(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.batch * self.max_len];
        for b in 0..self.batch {
            for t in 0..self.max_len {
                out[self.row(b, t)] = self.mask[b * self.max_len + t] as f64;
            }
        }
        out
    }

    /// Reads the latent off the tape as `[batch, max_len, width]`.
    pub fn values(&self, tape: &Tape) -> Tensor {
        let src = tape.value(self.var).data();
        let mut data = vec![0.0; self.batch * self.max_len * self.width];
        for b in 0..self.batch {
            for t in 0..self.max_len {
                let from = self.row(b, t) * self.width;
                let to = (b * self.max_len + t) * self.width;
                data[to..to + self.width].copy_from_slice(&src[from..from + self.width]);
            }
        }
        Tensor::new(vec![self.batch, self.max_len, self.width], data).expect("shape")
    }
}

struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        let rng = match (&mut self.rng, self.rate > 0.0) {
            (Some(rng), true) => rng,
            _ => return Ok(x),
        };
        let keep = 1.0 - self.rate;
        let shape = tape.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let m = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        Ok(tape.mask(x, Tensor::new(shape, m)?)?)
    }
}

/// One direction of one LSTM layer over time-major input `[T*B, in]`.
/// State is reset to zero at every padded step, so the backward direction
/// starts fresh at each sequence's last real token.
fn lstm_direction(
    tape: &mut Tape,
    store: &ParameterStore,
    prefix: &str,
    input: Var,
    live: &[Vec<f64>],
    batch: usize,
    hidden: usize,
    backward: bool,
) -> Result<Var, ModelError> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let bias = tape.param(store, &format!("{prefix}.b"))?;
    let steps = live.len();
    let mut h = tape.constant(Tensor::zeros(&[batch, hidden]))?;
    let mut c = tape.constant(Tensor::zeros(&[batch, hidden]))?;
    let mut outputs = vec![None; steps];
    let order: Vec<usize> = if backward { (0..steps).rev().collect() } else { (0..steps).collect() };
    for t in order {
        let x = tape.slice_rows(input, t * batch, (t + 1) * batch)?;
        let z = tape.concat_cols(&[x, h])?;
        let z = tape.matmul(z, w)?;
        let z = tape.add_row_vec(z, bias)?;
        let i = tape.slice_cols(z, 0, hidden)?;
        let i = tape.sigmoid(i)?;
        let f = tape.slice_cols(z, hidden, 2 * hidden)?;
        let f = tape.sigmoid(f)?;
        let g = tape.slice_cols(z, 2 * hidden, 3 * hidden)?;
        let g = tape.tanh(g)?;
        let o = tape.slice_cols(z, 3 * hidden, 4 * hidden)?;
        let o = tape.sigmoid(o)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_new = tape.add(fc, ig)?;
        let tc = tape.tanh(c_new)?;
        let h_new = tape.mul(o, tc)?;
        if live[t].iter().all(|&m| m == 1.0) {
            c = c_new;
            h = h_new;
        } else {
            c = tape.mask_rows(c_new, live[t].clone())?;
            h = tape.mask_rows(h_new, live[t].clone())?;
        }
        outputs[t] = Some(h);
    }
    let outputs: Vec<Var> = outputs.into_iter().map(|v| v.expect("every step visited")).collect();
    Ok(tape.concat_rows(&outputs)?)
}

/// Embedding (or precomputed vectors) followed by the BiLSTM stack; the
/// latent is the per-token concatenation of the two, zeroed under padding.
pub fn encode(
    tape: &mut Tape,
    store: &ParameterStore,
    config: &EncoderConfig,
    batch: &EncodedBatch,
    mode: Mode,
) -> Result<Latent, ModelError> {
    config.validate()?;
    let (bsz, len) = (batch.batch, batch.max_len);
    if bsz == 0 || len == 0 {
        return Err(ModelError::Shape("empty batch".into()));
    }
    let mut dropout = Dropout {
        rate: config.dropout_rate,
        rng: match mode {
            Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Mode::Eval => None,
        },
    };

    let embedded = if config.use_precomputed {
        let emb = batch.embeddings.as_ref().ok_or(ModelError::MissingEmbeddings)?;
        let width = emb.shape()[2];
        if width != config.embedding_width {
            return Err(ModelError::EmbeddingWidth {
                expected: config.embedding_width,
                found: width,
            });
        }
        let mut data = vec![0.0; bsz * len * width];
        for b in 0..bsz {
            for t in 0..len {
                let from = (b * len + t) * width;
                let to = (t * bsz + b) * width;
                data[to..to + width].copy_from_slice(&emb.data()[from..from + width]);
            }
        }
        tape.constant(Tensor::new(vec![bsz * len, width], data)?)?
    } else {
        let table = tape.param(store, "embed")?;
        let ids: Vec<usize> = (0..len)
            .flat_map(|t| (0..bsz).map(move |b| (t, b)))
            .map(|(t, b)| batch.token_ids[b * len + t])
            .collect();
        tape.gather_rows(table, ids)?
    };
    let embedded = dropout.apply(tape, embedded)?;

    let live: Vec<Vec<f64>> = (0..len)
        .map(|t| (0..bsz).map(|b| batch.mask[b * len + t] as f64).collect())
        .collect();
    let mut x = embedded;
    for layer in 0..config.lstm_layers {
        let fw = lstm_direction(tape, store, &format!("lstm.{layer}.fw"), x, &live, bsz, config.lstm_hidden, false)?;
        let bw = lstm_direction(tape, store, &format!("lstm.{layer}.bw"), x, &live, bsz, config.lstm_hidden, true)?;
        x = tape.concat_cols(&[fw, bw])?;
        x = dropout.apply(tape, x)?;
    }
    let latent = tape.concat_cols(&[embedded, x])?;
    let row_mask: Vec<f64> = live.iter().flatten().copied().collect();
    let latent = if row_mask.iter().all(|&m| m == 1.0) {
        latent
    } else {
        tape.mask_rows(latent, row_mask)?
    };
    Ok(Latent {
        var: latent,
        batch: bsz,
        max_len: len,
        width: config.latent_width(),
        mask: batch.mask.clone(),
        lengths: batch.lengths.clone(),
    })
}
