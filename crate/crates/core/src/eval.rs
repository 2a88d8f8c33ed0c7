//! Rolling next-response evaluation.
//!
//! Every interaction after a student's first is predicted exactly once,
//! from the interactions before it. Parameters stay fixed; the student's
//! state comes only from the context window. The first `L` interactions
//! are scored in one window; every later interaction `t` is scored from a
//! window holding interactions `t - L + 1 ..= t`, i.e. the `L - 1` most
//! recent ones as context.

use crate::data::{encode_window, window_sequences, EncodedWindow, StudentLog};
use crate::error::Result;
use crate::metrics::{accuracy, auc, log_loss};
use crate::models::{Batch, Model, PROB_CLIP};

/// One scored interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Index into the evaluated student slice.
    pub student: usize,
    /// Position of the predicted interaction in the student's log (0 for
    /// windowed predictions).
    pub step: usize,
    pub exercise: u32,
    pub correct: bool,
    pub prob: f64,
    /// The exercise was never seen in training.
    pub out_of_vocabulary: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub predictions: usize,
    /// Pooled over all predictions.
    pub auc: Option<f64>,
    pub acc: Option<f64>,
    pub loss: Option<f64>,
    /// Mean of per-student AUCs over students whose responses are mixed.
    pub student_mean_auc: Option<f64>,
    pub students_with_auc: usize,
    pub out_of_vocabulary: usize,
}

impl EvalReport {
    pub fn from_predictions(preds: &[Prediction]) -> Self {
        let scores: Vec<f64> = preds.iter().map(|p| p.prob).collect();
        let labels: Vec<bool> = preds.iter().map(|p| p.correct).collect();
        let mut per_student: Vec<f64> = Vec::new();
        let mut start = 0;
        while start < preds.len() {
            let mut end = start + 1;
            while end < preds.len() && preds[end].student == preds[start].student {
                end += 1;
            }
            if let Some(a) = auc(&scores[start..end], &labels[start..end]) {
                per_student.push(a);
            }
            start = end;
        }
        EvalReport {
            predictions: preds.len(),
            auc: auc(&scores, &labels),
            acc: accuracy(&scores, &labels),
            loss: log_loss(&scores, &labels, PROB_CLIP),
            student_mean_auc: (!per_student.is_empty())
                .then(|| per_student.iter().sum::<f64>() / per_student.len() as f64),
            students_with_auc: per_student.len(),
            out_of_vocabulary: preds.iter().filter(|p| p.out_of_vocabulary).count(),
        }
    }
}

/// A window plus the slots whose predictions it contributes.
struct Job {
    window: EncodedWindow,
    memory_row: Option<usize>,
    /// `(slot, step)` pairs to read out.
    slots: Vec<(usize, usize)>,
}

fn jobs_for(model: &Model, student: usize, log: &StudentLog) -> Vec<Job> {
    let spec = model.spec();
    let (len, e) = (spec.window, spec.num_exercises);
    let xs = &log.interactions;
    if xs.len() < 2 {
        return Vec::new();
    }
    let memory_row = model.memory_row(&log.student_id);
    let head = xs.len().min(len);
    let w = encode_window(student, &xs[..head], e, len);
    let first = w.first_valid();
    let mut jobs = vec![Job {
        slots: (first..len).map(|j| (j, j - first + 1)).collect(),
        window: w,
        memory_row,
    }];
    for t in len..xs.len() {
        jobs.push(Job {
            window: encode_window(student, &xs[t + 1 - len..=t], e, len),
            memory_row,
            slots: vec![(len - 1, t)],
        });
    }
    jobs
}

/// Scores every predictable interaction of `students` with `model`.
/// Predictions are ordered by student, then by step.
pub fn rolling_predictions(model: &Model, students: &[StudentLog], batch_size: usize) -> Result<Vec<Prediction>> {
    let jobs: Vec<Job> = students
        .iter()
        .enumerate()
        .flat_map(|(i, s)| jobs_for(model, i, s))
        .collect();
    let mut out = Vec::new();
    for chunk in jobs.chunks(batch_size.max(1)) {
        let windows: Vec<&EncodedWindow> = chunk.iter().map(|j| &j.window).collect();
        let rows = chunk.iter().map(|j| j.memory_row).collect();
        let batch = Batch::new(&windows, model.vocab(), rows)?;
        let probs = model.predict(&batch)?;
        for (b, job) in chunk.iter().enumerate() {
            for &(slot, step) in &job.slots {
                let r = b * batch.len + slot;
                let exercise = job.window.exercise_ids[slot];
                out.push(Prediction {
                    student: job.window.student,
                    step,
                    exercise,
                    correct: job.window.labels[slot] == 1,
                    prob: probs[r],
                    out_of_vocabulary: !model.vocab().is_seen(exercise),
                });
            }
        }
    }
    Ok(out)
}

/// Scores the same non-overlapping windows used for training (each
/// interaction predicted once, with context restarting at every window
/// boundary). Cheaper than [`rolling_predictions`]; used for model
/// selection.
pub fn window_predictions(model: &Model, students: &[StudentLog], batch_size: usize) -> Result<Vec<Prediction>> {
    let spec = model.spec();
    let windows = window_sequences(students.iter().enumerate(), spec.num_exercises, spec.window);
    let mut out = Vec::new();
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&EncodedWindow> = chunk.iter().collect();
        let rows = chunk
            .iter()
            .map(|w| model.memory_row(&students[w.student].student_id))
            .collect();
        let batch = Batch::new(&refs, model.vocab(), rows)?;
        let probs = model.predict(&batch)?;
        for (b, w) in chunk.iter().enumerate() {
            for slot in w.first_valid()..w.len() {
                let exercise = w.exercise_ids[slot];
                out.push(Prediction {
                    student: w.student,
                    step: 0,
                    exercise,
                    correct: w.labels[slot] == 1,
                    prob: probs[b * batch.len + slot],
                    out_of_vocabulary: !model.vocab().is_seen(exercise),
                });
            }
        }
    }
    Ok(out)
}

pub fn evaluate(model: &Model, students: &[StudentLog], batch_size: usize) -> Result<EvalReport> {
    Ok(EvalReport::from_predictions(&rolling_predictions(model, students, batch_size)?))
}
