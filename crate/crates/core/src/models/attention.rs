//! Single-block, single-head self-attention models.
//!
//! SAKT queries past interactions with the embedding of the next exercise.
//! RKT additionally blends the learned weights with a distribution built
//! from exercise relations and an exponential forgetting kernel.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use super::{constant, init_bound, linear, Batch, Mode, ModelKind, ModelSpec, Vocab};
use crate::error::{KtError, Result};
use crate::params::{Bound, Decay, ParamId, ParamStore};
use crate::relation::{gap_hours, ForgetDiagnostics, RelationMatrix};
use crate::tensor::{Tape, Var};

/// Additive mask value for disallowed attention entries.
pub const MASK_VALUE: f64 = -1e9;
pub const LAYER_NORM_EPS: f64 = 1e-8;
/// Initial memory strength in hours.
pub const INITIAL_MEMORY_HOURS: f64 = 10.0;

/// Frozen contextual information for RKT.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationContext {
    pub matrix: RelationMatrix,
    students: Vec<String>,
    index: HashMap<String, usize>,
}

impl RelationContext {
    /// `students` get their own memory-strength offset; anyone else uses
    /// the shared fallback.
    pub fn new(matrix: RelationMatrix, students: Vec<String>) -> Self {
        let index = students
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        RelationContext {
            matrix,
            students,
            index,
        }
    }

    pub fn students(&self) -> &[String] {
        &self.students
    }

    pub fn memory_row(&self, student_id: &str) -> Option<usize> {
        self.index.get(student_id).copied()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `[size * len]` probabilities.
    pub probs: Var,
    /// `[size, len, len]`; row `i` is the distribution used to predict slot
    /// `i` (alpha for SAKT, beta for RKT).
    pub weights: Var,
}

#[derive(Debug, Clone)]
pub struct AttentionModel {
    pub spec: ModelSpec,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub relation: Option<RelationContext>,
    interaction_embedding: ParamId,
    exercise_embedding: ParamId,
    position_embedding: ParamId,
    w_query: ParamId,
    w_key: ParamId,
    w_value: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w_out: ParamId,
    b_out: ParamId,
    memory: Option<(ParamId, ParamId)>,
}

impl AttentionModel {
    pub fn new(spec: ModelSpec, vocab: Vocab, relation: Option<RelationContext>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = spec.dim;
        let bound = init_bound(d);
        let prefix = spec.kind.name();
        let name = |s: &str| format!("{prefix}.{s}");
        let mut params = ParamStore::new();
        let interaction_embedding = params.add_uniform(
            &name("interaction_embedding"),
            &[vocab.interaction_rows(), d],
            bound,
            Decay::ExceptRows(vec![vocab.interaction_pad()]),
            rng,
        );
        let exercise_embedding = params.add_uniform(
            &name("exercise_embedding"),
            &[vocab.exercise_rows(), d],
            bound,
            Decay::ExceptRows(vec![vocab.exercise_pad()]),
            rng,
        );
        let position_embedding = params.add_uniform(&name("position_embedding"), &[spec.window, d], bound, Decay::All, rng);
        let w_query = params.add_uniform(&name("w_query"), &[d, d], bound, Decay::All, rng);
        let w_key = params.add_uniform(&name("w_key"), &[d, d], bound, Decay::All, rng);
        let w_value = params.add_uniform(&name("w_value"), &[d, d], bound, Decay::All, rng);
        let ln1_gain = params.add_const(&name("ln1_gain"), &[d], 1.0);
        let ln1_bias = params.add_const(&name("ln1_bias"), &[d], 0.0);
        let ffn_w1 = params.add_uniform(&name("ffn_w1"), &[d, d], bound, Decay::All, rng);
        let ffn_b1 = params.add_const(&name("ffn_b1"), &[d], 0.0);
        let ffn_w2 = params.add_uniform(&name("ffn_w2"), &[d, d], bound, Decay::All, rng);
        let ffn_b2 = params.add_const(&name("ffn_b2"), &[d], 0.0);
        let ln2_gain = params.add_const(&name("ln2_gain"), &[d], 1.0);
        let ln2_bias = params.add_const(&name("ln2_bias"), &[d], 0.0);
        let w_out = params.add_uniform(&name("w_out"), &[d, 1], bound, Decay::All, rng);
        let b_out = params.add_const(&name("b_out"), &[1], 0.0);
        let memory = match (spec.kind, &relation) {
            (ModelKind::Rkt, Some(ctx)) => {
                if ctx.students().len() != spec.memory_students {
                    return Err(KtError::Config(format!(
                        "relation context has {} students, spec says {}",
                        ctx.students().len(),
                        spec.memory_students
                    )));
                }
                if ctx.matrix.num_exercises() != spec.num_exercises {
                    return Err(KtError::Config("relation matrix size differs from model".into()));
                }
                let raw = inverse_softplus(INITIAL_MEMORY_HOURS);
                let global = params.add_const(&name("memory_strength"), &[1], raw);
                // last row: fallback for students without their own offset
                let offsets = params.add_const(&name("memory_offsets"), &[spec.memory_students + 1, 1], 0.0);
                Some((global, offsets))
            }
            (ModelKind::Rkt, None) => {
                return Err(KtError::Config("rkt needs a relation matrix".into()));
            }
            _ => None,
        };
        let relation = if spec.kind == ModelKind::Rkt { relation } else { None };
        Ok(AttentionModel {
            spec,
            vocab,
            params,
            relation,
            interaction_embedding,
            exercise_embedding,
            position_embedding,
            w_query,
            w_key,
            w_value,
            ln1_gain,
            ln1_bias,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            ln2_gain,
            ln2_bias,
            w_out,
            b_out,
            memory,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, batch: &Batch, mode: Mode, rng: &mut ChaCha8Rng) -> Result<AttentionOutput> {
        let (bsz, len, d) = (batch.size, batch.len, self.spec.dim);
        let n = bsz * len;
        let x_int = tape.gather_rows(p[self.interaction_embedding], &batch.interaction_rows)?;
        let x_pos = tape.gather_rows(p[self.position_embedding], &batch.positions)?;
        let x = tape.add(x_int, x_pos)?;
        let query_emb = tape.gather_rows(p[self.exercise_embedding], &batch.target_rows)?;
        let q = tape.matmul(query_emb, p[self.w_query])?;
        let k = tape.matmul(x, p[self.w_key])?;
        let v = tape.matmul(x, p[self.w_value])?;
        let q3 = tape.reshape(q, &[bsz, len, d])?;
        let k3 = tape.reshape(k, &[bsz, len, d])?;
        let v3 = tape.reshape(v, &[bsz, len, d])?;
        let mask = causal_mask(batch);
        let alpha = attention_weights(tape, q3, k3, &mask)?;
        let weights = match (&self.relation, self.memory) {
            (Some(ctx), Some((global, offsets))) => {
                let scores = self.relation_scores(tape, batch, ctx, p[global], p[offsets])?;
                rkt_blend(tape, alpha, scores, &mask, self.spec.lambda)?
            }
            _ => alpha,
        };
        let y3 = tape.matmul(weights, v3)?;
        let y = tape.reshape(y3, &[n, d])?;
        let logit = self.transformer_block(tape, p, y, query_emb, mode, rng)?;
        let probs = tape.sigmoid(logit)?;
        Ok(AttentionOutput { probs, weights })
    }

    /// `R^E + R^T` for every (prediction slot, past slot) pair, `[B, L, L]`.
    fn relation_scores(&self, tape: &mut Tape, batch: &Batch, ctx: &RelationContext, global: Var, offsets: Var) -> Result<Var> {
        let (bsz, len) = (batch.size, batch.len);
        let fallback = self.spec.memory_students;
        let mut rel = vec![0.0; bsz * len * len];
        let mut neg_gap = vec![0.0; bsz * len * len];
        let mut diag = ForgetDiagnostics::default();
        for b in 0..bsz {
            for i in batch.first_valid[b]..len {
                let ri = b * len + i;
                for j in batch.first_valid[b]..=i {
                    let rj = b * len + j;
                    let at = ri * len + j;
                    rel[at] = ctx.matrix.get(batch.raw_targets[ri], batch.raw_input_exercises[rj]);
                    neg_gap[at] = -gap_hours(batch.timestamps[rj], batch.target_timestamps[ri], &mut diag);
                }
            }
        }
        let rows: Vec<usize> = batch
            .memory_rows
            .iter()
            .map(|r| r.filter(|&r| r < fallback).unwrap_or(fallback))
            .collect();
        let off = tape.gather_rows(offsets, &rows)?;
        let raw = tape.add(off, global)?;
        let strength = tape.softplus(raw)?;
        let strength = tape.reshape(strength, &[bsz])?;
        let strength = tape.repeat_elems(strength, len * len);
        let strength = tape.reshape(strength, &[bsz, len, len])?;
        let neg_gap = constant(tape, &[bsz, len, len], neg_gap)?;
        let ratio = tape.div(neg_gap, strength)?;
        let forget = tape.exp(ratio)?;
        let rel = constant(tape, &[bsz, len, len], rel)?;
        tape.add(rel, forget)
    }

    /// Residual + layer norm around the attention output, then the
    /// point-wise feed-forward layer with its own residual + layer norm,
    /// then a scalar logit per row.
    pub fn transformer_block(&self, tape: &mut Tape, p: &Bound, y: Var, query: Var, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
        let n = tape.shape(y)[0];
        let y = match mode {
            Mode::Train => tape.dropout(y, self.spec.dropout, rng)?,
            Mode::Eval => y,
        };
        let s1 = tape.add(y, query)?;
        let s1 = layer_norm_affine(tape, s1, p[self.ln1_gain], p[self.ln1_bias])?;
        let h = linear(tape, s1, p[self.ffn_w1], p[self.ffn_b1])?;
        let h = tape.relu(h)?;
        let f = linear(tape, h, p[self.ffn_w2], p[self.ffn_b2])?;
        let f = match mode {
            Mode::Train => tape.dropout(f, self.spec.dropout, rng)?,
            Mode::Eval => f,
        };
        let s2 = tape.add(s1, f)?;
        let s2 = layer_norm_affine(tape, s2, p[self.ln2_gain], p[self.ln2_bias])?;
        let logit = linear(tape, s2, p[self.w_out], p[self.b_out])?;
        tape.reshape(logit, &[n])
    }

    /// Attention distributions for inspection, `[size, len, len]` flattened.
    pub fn attention(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut tape = Tape::no_grad();
        let bound = self.params.bind(&mut tape);
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let out = self.forward(&mut tape, &bound, batch, Mode::Eval, &mut rng)?;
        Ok(tape.data(out.weights).to_vec())
    }
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Additive mask `[B, L, L]`: 0 where slot `j` is a valid input at or
/// before prediction slot `i`, `MASK_VALUE` elsewhere.
pub fn causal_mask(batch: &Batch) -> Vec<f64> {
    let len = batch.len;
    let mut m = vec![MASK_VALUE; batch.size * len * len];
    for b in 0..batch.size {
        for i in batch.first_valid[b]..len {
            let row = (b * len + i) * len;
            m[row + batch.first_valid[b]..=row + i].fill(0.0);
        }
    }
    m
}

/// `softmax(q k^T / sqrt(d) + mask)` over the last axis.
pub fn attention_weights(tape: &mut Tape, q3: Var, k3: Var, mask: &[f64]) -> Result<Var> {
    let d = tape.shape(q3)[2];
    let scores = tape.matmul_t(q3, k3, false, true)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let shape = tape.shape(scores).to_vec();
    let mask = constant(tape, &shape, mask.to_vec())?;
    let masked = tape.add(scores, mask)?;
    tape.softmax(masked, 2)
}

/// `lambda * alpha + (1 - lambda) * softmax(relation_scores + mask)`.
pub fn rkt_blend(tape: &mut Tape, alpha: Var, relation_scores: Var, mask: &[f64], lambda: f64) -> Result<Var> {
    let shape = tape.shape(relation_scores).to_vec();
    let axis = shape.len() - 1;
    let mask = constant(tape, &shape, mask.to_vec())?;
    let z = tape.add(relation_scores, mask)?;
    let r = tape.softmax(z, axis)?;
    let a = tape.scale(alpha, lambda);
    let b = tape.scale(r, 1.0 - lambda);
    tape.add(a, b)
}

fn layer_norm_affine(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let rows = tape.shape(x)[0];
    let normed = tape.layer_norm(x, LAYER_NORM_EPS);
    let g = tape.tile(gain, rows);
    let b = tape.tile(bias, rows);
    let scaled = tape.mul(normed, g)?;
    tape.add(scaled, b)
}
