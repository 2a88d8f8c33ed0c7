//! Dynamic key-value memory network.
//!
//! A static key matrix addresses `N` concept slots; a value matrix holds the
//! student's state per slot. Each slot first absorbs the input interaction
//! (erase then add) and is then read for the target exercise.

use rand_chacha::ChaCha8Rng;

use super::{constant, init_bound, linear, to_window_major, Batch, Mode, ModelSpec, Vocab};
use crate::error::Result;
use crate::params::{Bound, Decay, ParamId, ParamStore};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone)]
pub struct Dkvmn {
    pub spec: ModelSpec,
    pub vocab: Vocab,
    pub params: ParamStore,
    keys: ParamId,
    init_value: ParamId,
    exercise_embedding: ParamId,
    interaction_embedding: ParamId,
    w_erase: ParamId,
    b_erase: ParamId,
    w_add: ParamId,
    b_add: ParamId,
    w_summary: ParamId,
    b_summary: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

impl Dkvmn {
    pub fn new(spec: ModelSpec, vocab: Vocab, rng: &mut ChaCha8Rng) -> Self {
        let (d, n) = (spec.dim, spec.memory_slots);
        let bound = init_bound(d);
        let mut params = ParamStore::new();
        let keys = params.add_uniform("dkvmn.keys", &[n, d], bound, Decay::All, rng);
        let init_value = params.add_uniform("dkvmn.init_value", &[n, d], bound, Decay::All, rng);
        let exercise_embedding = params.add_uniform(
            "dkvmn.exercise_embedding",
            &[vocab.exercise_rows(), d],
            bound,
            Decay::ExceptRows(vec![vocab.exercise_pad()]),
            rng,
        );
        let interaction_embedding = params.add_uniform(
            "dkvmn.interaction_embedding",
            &[vocab.interaction_rows(), d],
            bound,
            Decay::ExceptRows(vec![vocab.interaction_pad()]),
            rng,
        );
        let w_erase = params.add_uniform("dkvmn.w_erase", &[d, d], bound, Decay::All, rng);
        let b_erase = params.add_const("dkvmn.b_erase", &[d], 0.0);
        let w_add = params.add_uniform("dkvmn.w_add", &[d, d], bound, Decay::All, rng);
        let b_add = params.add_const("dkvmn.b_add", &[d], 0.0);
        let w_summary = params.add_uniform("dkvmn.w_summary", &[2 * d, d], init_bound(2 * d), Decay::All, rng);
        let b_summary = params.add_const("dkvmn.b_summary", &[d], 0.0);
        let w_out = params.add_uniform("dkvmn.w_out", &[d, 1], bound, Decay::All, rng);
        let b_out = params.add_const("dkvmn.b_out", &[1], 0.0);
        Dkvmn {
            spec,
            vocab,
            params,
            keys,
            init_value,
            exercise_embedding,
            interaction_embedding,
            w_erase,
            b_erase,
            w_add,
            b_add,
            w_summary,
            b_summary,
            w_out,
            b_out,
        }
    }

    /// Softmax of each row of `k` against every key: `[rows, N]`.
    pub fn address(tape: &mut Tape, k: Var, keys: Var) -> Result<Var> {
        let scores = tape.matmul_t(k, keys, false, true)?;
        tape.softmax(scores, 1)
    }

    /// `r = w M` per batch row; `w: [B, N]`, `memory: [B, N, d]` -> `[B, d]`.
    pub fn read(tape: &mut Tape, w: Var, memory: Var) -> Result<Var> {
        let (bsz, n) = (tape.shape(w)[0], tape.shape(w)[1]);
        let d = tape.shape(memory)[2];
        let w3 = tape.reshape(w, &[bsz, 1, n])?;
        let r = tape.matmul(w3, memory)?;
        tape.reshape(r, &[bsz, d])
    }

    /// `M(i) <- M(i) * (1 - w(i) e) + w(i) a` for every slot.
    pub fn write(tape: &mut Tape, w: Var, erase: Var, add: Var, memory: Var) -> Result<Var> {
        tape.memory_write(memory, w, erase, add)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &Batch, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
        let (bsz, len, d, n) = (batch.size, batch.len, self.spec.dim, self.spec.memory_slots);
        let mask_tm = batch.time_major(&batch.mask);
        let k_in = tape.gather_rows(p[self.exercise_embedding], &batch.time_major(&batch.input_exercise_rows))?;
        let k_target = tape.gather_rows(p[self.exercise_embedding], &batch.time_major(&batch.target_rows))?;
        let v = tape.gather_rows(p[self.interaction_embedding], &batch.time_major(&batch.interaction_rows))?;
        // the key matrix is static, so every step's addressing is computed at once
        let w_in = Self::address(tape, k_in, p[self.keys])?;
        let w_target = Self::address(tape, k_target, p[self.keys])?;
        let erase_pre = linear(tape, v, p[self.w_erase], p[self.b_erase])?;
        let erase = tape.sigmoid(erase_pre)?;
        let add_pre = linear(tape, v, p[self.w_add], p[self.b_add])?;
        let add = tape.tanh(add_pre)?;

        let mut memory = tape.tile(p[self.init_value], bsz);
        let idle = constant(tape, &[bsz, d], vec![0.0; bsz * d])?;
        let mut reads = Vec::with_capacity(len);
        for t in 0..len {
            if t < batch.first_active_slot() {
                reads.push(idle);
                continue;
            }
            let keep = &mask_tm[t * bsz..(t + 1) * bsz];
            let w = tape.slice_rows(w_in, t * bsz, (t + 1) * bsz)?;
            // a zero write weight leaves memory untouched on padding
            let w = if keep.iter().all(|&k| k > 0.0) {
                w
            } else {
                let m: Vec<f64> = keep.iter().flat_map(|&k| std::iter::repeat_n(k, n)).collect();
                tape.mul_const(w, m)?
            };
            let e = tape.slice_rows(erase, t * bsz, (t + 1) * bsz)?;
            let a = tape.slice_rows(add, t * bsz, (t + 1) * bsz)?;
            memory = Self::write(tape, w, e, a, memory)?;
            let wq = tape.slice_rows(w_target, t * bsz, (t + 1) * bsz)?;
            reads.push(Self::read(tape, wq, memory)?);
        }
        let r = tape.concat_rows(&reads)?;
        let joined = tape.concat_cols(&[r, k_target])?;
        let f_pre = linear(tape, joined, p[self.w_summary], p[self.b_summary])?;
        let f = tape.tanh(f_pre)?;
        let f = match mode {
            Mode::Train => tape.dropout(f, self.spec.dropout, rng)?,
            Mode::Eval => f,
        };
        let logit = linear(tape, f, p[self.w_out], p[self.b_out])?;
        let probs = tape.sigmoid(logit)?;
        let probs = tape.reshape(probs, &[len * bsz])?;
        to_window_major(tape, batch, probs)
    }
}
