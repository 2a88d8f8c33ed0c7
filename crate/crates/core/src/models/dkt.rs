//! Recurrent knowledge tracing: an LSTM (or vanilla RNN) over interaction
//! embeddings whose output layer scores every exercise.

use rand_chacha::ChaCha8Rng;

use super::{blend_rows, constant, init_bound, linear, to_window_major, Batch, Mode, ModelSpec, RecurrentCell, Vocab};
use crate::error::Result;
use crate::params::{Bound, Decay, ParamId, ParamStore};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone)]
pub struct Dkt {
    pub spec: ModelSpec,
    pub vocab: Vocab,
    pub params: ParamStore,
    embedding: ParamId,
    w_input: ParamId,
    w_hidden: ParamId,
    bias: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

impl Dkt {
    pub fn new(spec: ModelSpec, vocab: Vocab, rng: &mut ChaCha8Rng) -> Self {
        let d = spec.dim;
        let gates = match spec.cell {
            RecurrentCell::Lstm => 4,
            RecurrentCell::Rnn => 1,
        };
        let bound = init_bound(d);
        let mut params = ParamStore::new();
        let embedding = params.add_uniform(
            "dkt.interaction_embedding",
            &[vocab.interaction_rows(), d],
            bound,
            Decay::ExceptRows(vec![vocab.interaction_pad()]),
            rng,
        );
        let w_input = params.add_uniform("dkt.w_input", &[d, gates * d], bound, Decay::All, rng);
        let w_hidden = params.add_uniform("dkt.w_hidden", &[d, gates * d], bound, Decay::All, rng);
        let mut b = vec![0.0; gates * d];
        if spec.cell == RecurrentCell::Lstm {
            // gate order i, f, o, g; forget gate starts open
            b[d..2 * d].fill(1.0);
        }
        let bias = params.add(
            "dkt.bias",
            crate::tensor::Tensor::new(&[gates * d], b).expect("bias shape"),
            Decay::None,
        );
        let w_out = params.add_uniform("dkt.w_out", &[d, vocab.exercise_rows()], bound, Decay::All, rng);
        let b_out = params.add_const("dkt.b_out", &[vocab.exercise_rows()], 0.0);
        Dkt {
            spec,
            vocab,
            params,
            embedding,
            w_input,
            w_hidden,
            bias,
            w_out,
            b_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &Batch, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
        let (bsz, len, d) = (batch.size, batch.len, self.spec.dim);
        let inputs = batch.time_major(&batch.interaction_rows);
        let mask_tm = batch.time_major(&batch.mask);
        let x = tape.gather_rows(p[self.embedding], &inputs)?;
        let xw = tape.matmul(x, p[self.w_input])?;
        let bias = tape.tile(p[self.bias], bsz);
        let zeros = constant(tape, &[bsz, d], vec![0.0; bsz * d])?;
        let (mut h, mut c) = (zeros, zeros);
        let mut states = Vec::with_capacity(len);
        for t in 0..len {
            let keep = &mask_tm[t * bsz..(t + 1) * bsz];
            if t < batch.first_active_slot() {
                states.push(h);
                continue;
            }
            let xt = tape.slice_rows(xw, t * bsz, (t + 1) * bsz)?;
            let hw = tape.matmul(h, p[self.w_hidden])?;
            let pre = tape.add(xt, hw)?;
            let pre = tape.add(pre, bias)?;
            let (h_new, c_new) = match self.spec.cell {
                RecurrentCell::Lstm => lstm_gates(tape, pre, c)?,
                RecurrentCell::Rnn => (tape.tanh(pre)?, c),
            };
            if keep.iter().all(|&k| k > 0.0) {
                h = h_new;
                c = c_new;
            } else {
                // padding steps leave the state at its initial value
                h = blend_rows(tape, h_new, h, keep)?;
                if self.spec.cell == RecurrentCell::Lstm {
                    c = blend_rows(tape, c_new, c, keep)?;
                }
            }
            states.push(h);
        }
        let hs = tape.concat_rows(&states)?;
        let hs = match mode {
            Mode::Train => tape.dropout(hs, self.spec.dropout, rng)?,
            Mode::Eval => hs,
        };
        let logits = linear(tape, hs, p[self.w_out], p[self.b_out])?;
        let targets = batch.time_major(&batch.target_rows);
        let picked = tape.pick(logits, &targets)?;
        let probs = tape.sigmoid(picked)?;
        to_window_major(tape, batch, probs)
    }
}

/// One LSTM step, `x: [B, d_in]`, `h, c: [B, d]`, weights `[d_in, 4d]`,
/// `[d, 4d]` and bias `[4d]`. Gate order is input, forget, output,
/// candidate. Returns the new `(h, c)`.
pub fn lstm_step(tape: &mut Tape, x: Var, h: Var, c: Var, w_input: Var, w_hidden: Var, bias: Var) -> Result<(Var, Var)> {
    let xw = tape.matmul(x, w_input)?;
    let hw = tape.matmul(h, w_hidden)?;
    let pre = tape.add(xw, hw)?;
    let bias = tape.tile(bias, tape.shape(x)[0]);
    let pre = tape.add(pre, bias)?;
    lstm_gates(tape, pre, c)
}

fn lstm_gates(tape: &mut Tape, pre: Var, c: Var) -> Result<(Var, Var)> {
    let d = tape.shape(c)[1];
    let gi = tape.slice_cols(pre, 0, d)?;
    let gf = tape.slice_cols(pre, d, 2 * d)?;
    let go = tape.slice_cols(pre, 2 * d, 3 * d)?;
    let gg = tape.slice_cols(pre, 3 * d, 4 * d)?;
    let i = tape.sigmoid(gi)?;
    let f = tape.sigmoid(gf)?;
    let o = tape.sigmoid(go)?;
    let g = tape.tanh(gg)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let tc = tape.tanh(c_new)?;
    Ok((tape.mul(o, tc)?, c_new))
}
