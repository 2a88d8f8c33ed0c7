//! The four knowledge-tracing architectures and their shared plumbing.

mod attention;
mod dkt;
mod dkvmn;

pub use attention::{attention_weights, causal_mask, rkt_blend, AttentionModel, AttentionOutput, RelationContext};
pub use dkt::{lstm_step, Dkt};
pub use dkvmn::Dkvmn;

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{decode_interaction, EncodedWindow};
use crate::error::{KtError, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Probability clip applied before the log in the cross-entropy.
pub const PROB_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dkt,
    Dkvmn,
    Sakt,
    Rkt,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Dkt, ModelKind::Dkvmn, ModelKind::Sakt, ModelKind::Rkt];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Dkt => "dkt",
            ModelKind::Dkvmn => "dkvmn",
            ModelKind::Sakt => "sakt",
            ModelKind::Rkt => "rkt",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, ModelKind::Sakt | ModelKind::Rkt)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = KtError;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| KtError::Config(format!("unknown model `{s}` (dkt, dkvmn, sakt, rkt)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecurrentCell {
    Lstm,
    Rnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture hyperparameters; everything needed to rebuild parameter
/// shapes from a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub num_exercises: usize,
    pub dim: usize,
    pub window: usize,
    pub memory_slots: usize,
    pub lambda: f64,
    pub dropout: f64,
    pub cell: RecurrentCell,
    /// Training students with their own memory-strength offset (RKT).
    pub memory_students: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KtError::Config(m));
        if self.num_exercises == 0 {
            return bad("model needs at least one exercise".into());
        }
        if self.dim == 0 || self.window < 2 || self.memory_slots == 0 {
            return bad("dim, memory_slots must be >= 1 and window >= 2".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Maps raw exercise / interaction ids to embedding rows. Exercises absent
/// from training share one out-of-vocabulary row; padding has its own row.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    num_exercises: usize,
    seen: Vec<bool>,
}

impl Vocab {
    pub fn new(num_exercises: usize, seen: Vec<bool>) -> Self {
        assert_eq!(seen.len(), num_exercises);
        Vocab { num_exercises, seen }
    }

    pub fn all_seen(num_exercises: usize) -> Self {
        Self::new(num_exercises, vec![true; num_exercises])
    }

    pub fn num_exercises(&self) -> usize {
        self.num_exercises
    }

    pub fn seen(&self) -> &[bool] {
        &self.seen
    }

    pub fn is_seen(&self, exercise: u32) -> bool {
        self.seen.get(exercise as usize).copied().unwrap_or(false)
    }

    /// `E` exercise rows, one OOV row, one padding row.
    pub fn exercise_rows(&self) -> usize {
        self.num_exercises + 2
    }

    /// `2E` interaction rows, two OOV rows (by response), one padding row.
    pub fn interaction_rows(&self) -> usize {
        2 * self.num_exercises + 3
    }

    pub fn exercise_pad(&self) -> usize {
        self.num_exercises + 1
    }

    pub fn interaction_pad(&self) -> usize {
        2 * self.num_exercises + 2
    }

    pub fn exercise_row(&self, exercise: u32) -> usize {
        if self.is_seen(exercise) {
            exercise as usize
        } else {
            self.num_exercises
        }
    }

    pub fn interaction_row(&self, id: u32) -> usize {
        let (e, r) = decode_interaction(id, self.num_exercises);
        if self.is_seen(e) {
            id as usize
        } else {
            2 * self.num_exercises + usize::from(r)
        }
    }
}

/// A mini-batch of equal-length windows flattened window-major
/// (`row = window * len + slot`).
#[derive(Debug, Clone)]
pub struct Batch {
    pub size: usize,
    pub len: usize,
    pub interaction_rows: Vec<usize>,
    pub input_exercise_rows: Vec<usize>,
    pub target_rows: Vec<usize>,
    pub raw_input_exercises: Vec<u32>,
    pub raw_targets: Vec<u32>,
    pub labels: Vec<f64>,
    pub mask: Vec<f64>,
    pub timestamps: Vec<u64>,
    pub target_timestamps: Vec<u64>,
    /// Slot position counted from the first valid slot (0 on padding).
    pub positions: Vec<usize>,
    pub first_valid: Vec<usize>,
    /// Per-window row in the per-student memory table, if any.
    pub memory_rows: Vec<Option<usize>>,
    /// Valid targets whose exercise is out of vocabulary.
    pub oov_targets: usize,
}

impl Batch {
    pub fn new(windows: &[&EncodedWindow], vocab: &Vocab, memory_rows: Vec<Option<usize>>) -> Result<Self> {
        let size = windows.len();
        if size == 0 {
            return Err(KtError::Data("empty batch".into()));
        }
        assert_eq!(memory_rows.len(), size);
        let len = windows[0].len();
        let e = vocab.num_exercises();
        let n = size * len;
        let mut b = Batch {
            size,
            len,
            interaction_rows: Vec::with_capacity(n),
            input_exercise_rows: Vec::with_capacity(n),
            target_rows: Vec::with_capacity(n),
            raw_input_exercises: Vec::with_capacity(n),
            raw_targets: Vec::with_capacity(n),
            labels: Vec::with_capacity(n),
            mask: Vec::with_capacity(n),
            timestamps: Vec::with_capacity(n),
            target_timestamps: Vec::with_capacity(n),
            positions: Vec::with_capacity(n),
            first_valid: Vec::with_capacity(size),
            memory_rows,
            oov_targets: 0,
        };
        for w in windows {
            if w.len() != len {
                return Err(KtError::Data(format!(
                    "windows of different length in one batch ({} vs {len})",
                    w.len()
                )));
            }
            let first = w.first_valid();
            b.first_valid.push(first);
            for j in 0..len {
                let valid = w.valid_mask[j];
                if valid {
                    let id = w.interaction_ids[j] as usize;
                    if id >= 2 * e {
                        return Err(KtError::Index {
                            what: "interaction id",
                            index: id,
                            size: 2 * e,
                        });
                    }
                    if w.exercise_ids[j] as usize >= e {
                        return Err(KtError::Index {
                            what: "exercise id",
                            index: w.exercise_ids[j] as usize,
                            size: e,
                        });
                    }
                    let input_ex = w.input_exercise(j, e);
                    b.interaction_rows.push(vocab.interaction_row(w.interaction_ids[j]));
                    b.input_exercise_rows.push(vocab.exercise_row(input_ex));
                    b.target_rows.push(vocab.exercise_row(w.exercise_ids[j]));
                    b.raw_input_exercises.push(input_ex);
                    b.raw_targets.push(w.exercise_ids[j]);
                    b.positions.push(j - first);
                    if !vocab.is_seen(w.exercise_ids[j]) {
                        b.oov_targets += 1;
                    }
                } else {
                    b.interaction_rows.push(vocab.interaction_pad());
                    b.input_exercise_rows.push(vocab.exercise_pad());
                    b.target_rows.push(vocab.exercise_pad());
                    b.raw_input_exercises.push(0);
                    b.raw_targets.push(0);
                    b.positions.push(0);
                }
                b.labels.push(f64::from(w.labels[j]));
                b.mask.push(if valid { 1.0 } else { 0.0 });
                b.timestamps.push(w.timestamps[j]);
                b.target_timestamps.push(w.target_timestamps[j]);
            }
        }
        Ok(b)
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.0).count()
    }

    /// Window-major row index to time-major (`slot * size + window`).
    pub fn time_major<T: Copy>(&self, values: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(values.len());
        for t in 0..self.len {
            for b in 0..self.size {
                out.push(values[b * self.len + t]);
            }
        }
        out
    }

    /// For each window-major row, its position in time-major order.
    pub fn time_major_positions(&self) -> Vec<usize> {
        (0..self.size * self.len)
            .map(|r| (r % self.len) * self.size + r / self.len)
            .collect()
    }

    /// Earliest slot that is valid in any window.
    pub fn first_active_slot(&self) -> usize {
        self.first_valid.iter().copied().min().unwrap_or(self.len)
    }
}

/// Any of the four architectures.
#[derive(Debug, Clone)]
pub enum Model {
    Dkt(Dkt),
    Dkvmn(Dkvmn),
    Attention(AttentionModel),
}

impl Model {
    /// Freshly initialised model. RKT requires `relation`.
    pub fn new(spec: ModelSpec, vocab: Vocab, relation: Option<RelationContext>, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        if vocab.num_exercises() != spec.num_exercises {
            return Err(KtError::Config("vocabulary size differs from model spec".into()));
        }
        Ok(match spec.kind {
            ModelKind::Dkt => Model::Dkt(Dkt::new(spec, vocab, rng)),
            ModelKind::Dkvmn => Model::Dkvmn(Dkvmn::new(spec, vocab, rng)),
            ModelKind::Sakt | ModelKind::Rkt => {
                Model::Attention(AttentionModel::new(spec, vocab, relation, rng)?)
            }
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        match self {
            Model::Dkt(m) => &m.spec,
            Model::Dkvmn(m) => &m.spec,
            Model::Attention(m) => &m.spec,
        }
    }

    /// Mutable access to the fields that do not change parameter shapes
    /// (`lambda`, `dropout`). Changing shape fields leaves the model
    /// inconsistent.
    pub fn spec_mut(&mut self) -> &mut ModelSpec {
        match self {
            Model::Dkt(m) => &mut m.spec,
            Model::Dkvmn(m) => &mut m.spec,
            Model::Attention(m) => &mut m.spec,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.spec().kind
    }

    pub fn vocab(&self) -> &Vocab {
        match self {
            Model::Dkt(m) => &m.vocab,
            Model::Dkvmn(m) => &m.vocab,
            Model::Attention(m) => &m.vocab,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Dkt(m) => &m.params,
            Model::Dkvmn(m) => &m.params,
            Model::Attention(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Dkt(m) => &mut m.params,
            Model::Dkvmn(m) => &mut m.params,
            Model::Attention(m) => &mut m.params,
        }
    }

    pub fn relation(&self) -> Option<&RelationContext> {
        match self {
            Model::Attention(m) => m.relation.as_ref(),
            _ => None,
        }
    }

    /// Memory-table row of a student, for models that keep one.
    pub fn memory_row(&self, student_id: &str) -> Option<usize> {
        self.relation().and_then(|r| r.memory_row(student_id))
    }

    /// Probabilities for every row of `batch`, shape `[size * len]`,
    /// window-major. Padding rows carry meaningless values.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, batch: &Batch, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
        match self {
            Model::Dkt(m) => m.forward(tape, bound, batch, mode, rng),
            Model::Dkvmn(m) => m.forward(tape, bound, batch, mode, rng),
            Model::Attention(m) => Ok(m.forward(tape, bound, batch, mode, rng)?.probs),
        }
    }

    /// Inference-only probabilities.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut tape = Tape::no_grad();
        let bound = self.params().bind(&mut tape);
        let mut rng = rand::SeedableRng::seed_from_u64(0);
        let p = self.forward(&mut tape, &bound, batch, Mode::Eval, &mut rng)?;
        Ok(tape.data(p).to_vec())
    }
}

// ----- shared building blocks ---------------------------------------------

/// Uniform bound for a matrix with `fan` inputs.
pub(crate) fn init_bound(fan: usize) -> f64 {
    1.0 / (fan as f64).sqrt()
}

/// `x w + b` with the bias tiled over rows.
pub(crate) fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let rows = tape.shape(xw)[0];
    let bt = tape.tile(b, rows);
    tape.add(xw, bt)
}

/// Elementwise `value` where `keep` is 1, `fallback` where it is 0, with
/// `keep` given per row and broadcast over the row.
pub(crate) fn blend_rows(tape: &mut Tape, value: Var, fallback: Var, keep_rows: &[f64]) -> Result<Var> {
    let width = tape.shape(value)[1];
    let keep: Vec<f64> = keep_rows.iter().flat_map(|&k| std::iter::repeat_n(k, width)).collect();
    let drop: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
    let a = tape.mul_const(value, keep)?;
    let b = tape.mul_const(fallback, drop)?;
    tape.add(a, b)
}

/// Reorders a time-major `[len * size]` vector to window-major.
pub(crate) fn to_window_major(tape: &mut Tape, batch: &Batch, time_major: Var) -> Result<Var> {
    let n = batch.size * batch.len;
    let col = tape.reshape(time_major, &[n, 1])?;
    let picked = tape.gather_rows(col, &batch.time_major_positions())?;
    tape.reshape(picked, &[n])
}

/// Summed binary cross-entropy over rows with `mask` 1.
pub fn binary_ce_loss(tape: &mut Tape, probs: Var, labels: &[f64], mask: &[f64]) -> Result<Var> {
    let n = tape.value(probs).numel();
    if labels.len() != n || mask.len() != n {
        return Err(KtError::shape("binary_ce_loss", tape.shape(probs), &[labels.len(), mask.len()]));
    }
    let p = tape.clamp(probs, PROB_CLIP, 1.0 - PROB_CLIP);
    let log_p = tape.log(p)?;
    let q = tape.affine(p, -1.0, 1.0);
    let log_q = tape.log(q)?;
    let pos: Vec<f64> = labels.iter().zip(mask).map(|(r, m)| r * m).collect();
    let neg: Vec<f64> = labels.iter().zip(mask).map(|(r, m)| (1.0 - r) * m).collect();
    let a = tape.mul_const(log_p, pos)?;
    let b = tape.mul_const(log_q, neg)?;
    let s = tape.add(a, b)?;
    let total = tape.sum(s);
    Ok(tape.scale(total, -1.0))
}

/// Constant tensor helper.
pub(crate) fn constant(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Result<Var> {
    Ok(tape.constant(Tensor::new(shape, data)?))
}
