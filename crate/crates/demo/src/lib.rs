//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Three operations are exposed: the relation entry of a 2x2 response
//! table, the forgetting kernel as a curve, and the relation-and-recency
//! attention of one synthetic student as a heatmap. Everything returns
//! flat `f64` arrays so the page needs no glue beyond the generated module.

use kt_core::data::{generate_synthetic, SynthConfig};
use kt_core::relation::{
    accumulate_pairs, build_relation_matrix, forget_coefficients, phi, relation_distribution,
    relation_row_for_prediction, ContingencyTable, ForgetDiagnostics,
};
use wasm_bindgen::prelude::*;

/// `[phi, entry]` for a table of (earlier, later) response counts, where
/// `entry` is the value stored in the relation matrix (0 below `theta`).
#[wasm_bindgen]
pub fn relation_entry(n00: u32, n01: u32, n10: u32, n11: u32, same_skill: bool, theta: f64) -> Vec<f64> {
    let p = phi(&ContingencyTable::new(n00.into(), n01.into(), n10.into(), n11.into()));
    let value = p + if same_skill { 1.0 } else { 0.0 };
    vec![p, if value > theta { value } else { 0.0 }]
}

/// Forgetting coefficient at `points` evenly spaced gaps in
/// `[0, max_hours]`, as `[gap_0, coef_0, gap_1, coef_1, ...]`.
#[wasm_bindgen]
pub fn forgetting_curve(strength_hours: f64, max_hours: f64, points: usize) -> Vec<f64> {
    if !(strength_hours > 0.0) || points == 0 {
        return Vec::new();
    }
    let step = if points > 1 { max_hours / (points - 1) as f64 } else { 0.0 };
    let mut diag = ForgetDiagnostics::default();
    let mut out = Vec::with_capacity(2 * points);
    for k in 0..points {
        let gap = step * k as f64;
        let past = [0u64];
        let next = (gap * 3_600_000.0).round() as u64;
        let coef = forget_coefficients(&past, next, strength_hours, &mut diag).expect("positive strength")[0];
        out.extend([gap, coef]);
    }
    out
}

/// Relation-and-recency attention of one synthetic student.
///
/// A small cohort is generated from `seed`; relations are counted on every
/// student but the last, whose first `window` interactions are shown. The
/// result is `[n, weights (n * n, row i = target i + 1, zero for future
/// columns), target exercises (n), input exercises (n), input correct (n)]`.
#[wasm_bindgen]
pub fn relation_heatmap(seed: u32, halflife_hours: f64, strength_hours: f64, theta: f64, window: usize) -> Vec<f64> {
    let cfg = SynthConfig {
        students: 150,
        exercises: 30,
        skills: 5,
        forgetting_halflife: halflife_hours,
        seed: seed.into(),
        min_length: window.max(2) + 1,
        max_length: window.max(2) + 1,
        ..SynthConfig::default()
    };
    let Ok((log, world)) = generate_synthetic(&cfg) else {
        return Vec::new();
    };
    if !(strength_hours > 0.0) || !(0.0..2.0).contains(&theta) {
        return Vec::new();
    }
    let (cohort, shown) = log.students.split_at(log.students.len() - 1);
    let tables = accumulate_pairs(cohort, None);
    let Ok(matrix) = build_relation_matrix(&tables, &world.skill_of, theta) else {
        return Vec::new();
    };
    let xs = &shown[0].interactions[..window.max(2).min(shown[0].interactions.len())];
    let n = xs.len() - 1;
    let mut weights = vec![0.0; n * n];
    let mut diag = ForgetDiagnostics::default();
    for i in 0..n {
        let target = &xs[i + 1];
        let past = &xs[..=i];
        let exercises: Vec<u32> = past.iter().map(|x| x.exercise).collect();
        let times: Vec<u64> = past.iter().map(|x| x.timestamp_ms).collect();
        let rel = relation_row_for_prediction(target.exercise, &exercises, &matrix);
        let forget = forget_coefficients(&times, target.timestamp_ms, strength_hours, &mut diag)
            .expect("positive strength");
        let row = relation_distribution(&rel, &forget);
        weights[i * n..i * n + row.len()].copy_from_slice(&row);
    }
    let mut out = vec![n as f64];
    out.extend(weights);
    out.extend(xs[1..].iter().map(|x| f64::from(x.exercise)));
    out.extend(xs[..n].iter().map(|x| f64::from(x.exercise)));
    out.extend(xs[..n].iter().map(|x| f64::from(u8::from(x.correct))));
    out
}
