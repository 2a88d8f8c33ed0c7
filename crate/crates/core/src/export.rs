//! Attention weights in long CSV form for inspection and plotting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{encode_window, StudentLog};
use crate::error::{KtError, Result};
use crate::models::{Batch, Model};

/// Attention of one window. Row `r` predicts target `r`; column `c` is the
/// past interaction at valid slot `c`. Only the valid part is kept.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub student_id: String,
    /// Number of valid slots `n`; `weights` is `n * n`, row-major.
    pub size: usize,
    pub weights: Vec<f64>,
    /// Exercise of the input interaction in each column.
    pub input_exercises: Vec<u32>,
    /// Exercise predicted in each row.
    pub target_exercises: Vec<u32>,
}

impl AttentionMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,weight,exercise_row,exercise_col\n");
        for r in 0..self.size {
            for c in 0..self.size {
                let _ = writeln!(
                    out,
                    "{r},{c},{:?},{},{}",
                    self.get(r, c),
                    self.target_exercises[r],
                    self.input_exercises[c]
                );
            }
        }
        out
    }
}

/// Attention over a student's most recent `L` interactions.
pub fn attention_for_student(model: &Model, student: &StudentLog) -> Result<AttentionMap> {
    let Model::Attention(m) = model else {
        return Err(KtError::Config(format!(
            "attention export needs sakt or rkt, not {}",
            model.kind()
        )));
    };
    let (len, e) = (m.spec.window, m.spec.num_exercises);
    let xs = &student.interactions;
    if xs.len() < 2 {
        return Err(KtError::Data(format!(
            "student `{}` has fewer than 2 interactions",
            student.student_id
        )));
    }
    let chunk = &xs[xs.len().saturating_sub(len)..];
    let w = encode_window(0, chunk, e, len);
    let batch = Batch::new(&[&w], &m.vocab, vec![model.memory_row(&student.student_id)])?;
    let full = m.attention(&batch)?;
    let first = w.first_valid();
    let size = len - first;
    let mut weights = Vec::with_capacity(size * size);
    for i in first..len {
        weights.extend_from_slice(&full[i * len + first..(i + 1) * len]);
    }
    Ok(AttentionMap {
        student_id: student.student_id.clone(),
        size,
        weights,
        input_exercises: (first..len).map(|j| w.input_exercise(j, e)).collect(),
        target_exercises: w.exercise_ids[first..].to_vec(),
    })
}

/// Mean weight per `(row, col)` cell across maps, with the number of maps
/// covering the cell. CSV header `row,col,mean_weight,count`.
pub fn average_attention_csv(maps: &[AttentionMap]) -> String {
    let mut cells: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for m in maps {
        for r in 0..m.size {
            for c in 0..m.size {
                let cell = cells.entry((r, c)).or_insert((0.0, 0));
                cell.0 += m.get(r, c);
                cell.1 += 1;
            }
        }
    }
    let mut out = String::from("row,col,mean_weight,count\n");
    for ((r, c), (total, n)) in cells {
        let _ = writeln!(out, "{r},{c},{:?},{n}", total / n as f64);
    }
    out
}
