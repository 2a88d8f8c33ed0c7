//! Exercise relations mined from response data and skill tags, and the
//! exponential forgetting kernel.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::StudentLog;
use crate::error::{KtError, Result};

pub const DEFAULT_THETA: f64 = 0.8;
pub const MS_PER_HOUR: f64 = 3_600_000.0;

/// Counts of (response to earlier exercise `j`, response to later exercise
/// `i`). `n10` means `j` correct and `i` incorrect.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ContingencyTable {
    pub n00: u64,
    pub n01: u64,
    pub n10: u64,
    pub n11: u64,
}

impl ContingencyTable {
    pub fn new(n00: u64, n01: u64, n10: u64, n11: u64) -> Self {
        ContingencyTable { n00, n01, n10, n11 }
    }

    pub fn record(&mut self, earlier_correct: bool, later_correct: bool) {
        match (earlier_correct, later_correct) {
            (false, false) => self.n00 += 1,
            (false, true) => self.n01 += 1,
            (true, false) => self.n10 += 1,
            (true, true) => self.n11 += 1,
        }
    }

    /// `j` incorrect.
    pub fn n0_(&self) -> u64 {
        self.n00 + self.n01
    }

    /// `j` correct.
    pub fn n1_(&self) -> u64 {
        self.n10 + self.n11
    }

    /// `i` incorrect.
    pub fn n_0(&self) -> u64 {
        self.n00 + self.n10
    }

    /// `i` correct.
    pub fn n_1(&self) -> u64 {
        self.n01 + self.n11
    }

    pub fn n(&self) -> u64 {
        self.n00 + self.n01 + self.n10 + self.n11
    }

    pub fn merge(&mut self, other: &ContingencyTable) {
        self.n00 += other.n00;
        self.n01 += other.n01;
        self.n10 += other.n10;
        self.n11 += other.n11;
    }
}

/// Phi coefficient of a 2x2 table, 0 when any marginal is empty.
pub fn phi(t: &ContingencyTable) -> f64 {
    let denom = t.n1_() as f64 * t.n0_() as f64 * t.n_1() as f64 * t.n_0() as f64;
    if denom == 0.0 {
        return 0.0;
    }
    let num = t.n11 as f64 * t.n00 as f64 - t.n01 as f64 * t.n10 as f64;
    (num / denom.sqrt()).clamp(-1.0, 1.0)
}

/// Tables keyed by `(i, j)` where `j` was attempted before `i`.
pub type PairTables = HashMap<(u32, u32), ContingencyTable>;

/// Counts every ordered pair of positions `p_j < p_i` of each student.
/// `pair_cap` bounds the number of pairs taken per student (earliest
/// later-positions first); `None` takes all.
pub fn accumulate_pairs<'a>(
    students: impl IntoIterator<Item = &'a StudentLog>,
    pair_cap: Option<usize>,
) -> PairTables {
    let mut tables = PairTables::new();
    for s in students {
        let xs = &s.interactions;
        let mut budget = pair_cap.unwrap_or(usize::MAX);
        'outer: for pi in 1..xs.len() {
            for pj in 0..pi {
                if budget == 0 {
                    break 'outer;
                }
                budget -= 1;
                let (later, earlier) = (&xs[pi], &xs[pj]);
                tables
                    .entry((later.exercise, earlier.exercise))
                    .or_default()
                    .record(earlier.correct, later.correct);
            }
        }
    }
    tables
}

/// Sparse relation matrix; absent entries are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMatrix {
    num_exercises: usize,
    theta: f64,
    entries: BTreeMap<(u32, u32), f64>,
}

impl RelationMatrix {
    pub fn empty(num_exercises: usize, theta: f64) -> Self {
        RelationMatrix {
            num_exercises,
            theta,
            entries: BTreeMap::new(),
        }
    }

    pub fn num_exercises(&self) -> usize {
        self.num_exercises
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Relation of earlier exercise `j` to later exercise `i`.
    pub fn get(&self, i: u32, j: u32) -> f64 {
        self.entries.get(&(i, j)).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = ((u32, u32), f64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    /// Rebuilds a matrix from stored entries (no thresholding).
    pub fn from_entries(
        num_exercises: usize,
        theta: f64,
        entries: impl IntoIterator<Item = ((u32, u32), f64)>,
    ) -> Result<Self> {
        let mut m = RelationMatrix::empty(num_exercises, theta);
        for ((i, j), v) in entries {
            if i as usize >= num_exercises || j as usize >= num_exercises {
                return Err(KtError::Index {
                    what: "relation entry",
                    index: i.max(j) as usize,
                    size: num_exercises,
                });
            }
            m.entries.insert((i, j), v);
        }
        Ok(m)
    }

    /// Stores `value` when it exceeds the threshold.
    fn offer(&mut self, i: u32, j: u32, value: f64) {
        if value > self.theta {
            self.entries.insert((i, j), value);
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# exercises={} theta={}\ni,j,value\n",
            self.num_exercises, self.theta
        );
        for ((i, j), v) in self.iter() {
            let _ = writeln!(out, "{i},{j},{v:?}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| KtError::Data(format!("relation file: {m}"));
        let mut lines = text.lines();
        let head = lines.next().ok_or_else(|| bad("empty".into()))?;
        let mut num_exercises = None;
        let mut theta = None;
        for tok in head.trim_start_matches('#').split_whitespace() {
            match tok.split_once('=') {
                Some(("exercises", v)) => num_exercises = v.parse::<usize>().ok(),
                Some(("theta", v)) => theta = v.parse::<f64>().ok(),
                _ => {}
            }
        }
        let (Some(num_exercises), Some(theta)) = (num_exercises, theta) else {
            return Err(bad(format!("bad header `{head}`")));
        };
        if lines.next().map(str::trim) != Some("i,j,value") {
            return Err(bad("missing `i,j,value` column line".into()));
        }
        let mut m = RelationMatrix::empty(num_exercises, theta);
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let parsed = match f.as_slice() {
                [i, j, v] => i
                    .trim()
                    .parse::<u32>()
                    .ok()
                    .zip(j.trim().parse::<u32>().ok())
                    .zip(v.trim().parse::<f64>().ok()),
                _ => None,
            };
            let ((i, j), v) = parsed.ok_or_else(|| bad(format!("line {}: `{line}`", n + 3)))?;
            if i as usize >= num_exercises || j as usize >= num_exercises {
                return Err(bad(format!("line {}: exercise out of range", n + 3)));
            }
            m.entries.insert((i, j), v);
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| KtError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KtError::io(path, e))?;
        Self::from_text(&text)
    }
}

/// `A[i][j] = phi + sim` when that exceeds `theta`, where `sim` is 1 for
/// exercises sharing a skill tag. Same-skill pairs never observed together
/// get `phi = 0`.
pub fn build_relation_matrix(tables: &PairTables, skill_of: &[u32], theta: f64) -> Result<RelationMatrix> {
    if !(0.0..2.0).contains(&theta) {
        return Err(KtError::Config(format!("theta {theta} outside [0, 2)")));
    }
    let e_count = skill_of.len();
    let mut m = RelationMatrix::empty(e_count, theta);
    let mut by_skill: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (e, &s) in skill_of.iter().enumerate() {
        by_skill.entry(s).or_default().push(e as u32);
    }
    for group in by_skill.values() {
        for &i in group {
            for &j in group {
                let p = tables.get(&(i, j)).map_or(0.0, phi);
                m.offer(i, j, p + 1.0);
            }
        }
    }
    for (&(i, j), t) in tables {
        if (i as usize) >= e_count || (j as usize) >= e_count {
            return Err(KtError::Index {
                what: "exercise in pair table",
                index: i.max(j) as usize,
                size: e_count,
            });
        }
        if skill_of[i as usize] != skill_of[j as usize] {
            m.offer(i, j, phi(t));
        }
    }
    Ok(m)
}

/// Number of negative time gaps clamped to zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForgetDiagnostics {
    pub clamped: usize,
}

/// `exp(-(t_next - t_i) / strength)` with gaps in hours.
pub fn forget_coefficients(
    past_ms: &[u64],
    next_ms: u64,
    strength_hours: f64,
    diag: &mut ForgetDiagnostics,
) -> Result<Vec<f64>> {
    if !(strength_hours > 0.0) {
        return Err(KtError::Domain {
            op: "forget_coefficients",
            detail: format!("memory strength {strength_hours} must be positive"),
        });
    }
    Ok(past_ms
        .iter()
        .map(|&t| {
            let delta = gap_hours(t, next_ms, diag);
            (-delta / strength_hours).exp()
        })
        .collect())
}

/// Elapsed hours from `earlier_ms` to `later_ms`, clamped at zero.
pub fn gap_hours(earlier_ms: u64, later_ms: u64, diag: &mut ForgetDiagnostics) -> f64 {
    if later_ms < earlier_ms {
        diag.clamped += 1;
        0.0
    } else {
        (later_ms - earlier_ms) as f64 / MS_PER_HOUR
    }
}

/// `A[next][past_j]` for each past exercise.
pub fn relation_row_for_prediction(next: u32, past: &[u32], a: &RelationMatrix) -> Vec<f64> {
    past.iter().map(|&j| a.get(next, j)).collect()
}

/// `softmax(relations + forget)`: the relation-and-recency distribution over
/// past interactions used by RKT. Empty input gives an empty output.
pub fn relation_distribution(relations: &[f64], forget: &[f64]) -> Vec<f64> {
    assert_eq!(relations.len(), forget.len(), "one forget coefficient per relation");
    let z: Vec<f64> = relations.iter().zip(forget).map(|(a, b)| a + b).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// `lambda * attention + (1 - lambda) * relation`, elementwise.
pub fn blend_distributions(attention: &[f64], relation: &[f64], lambda: f64) -> Vec<f64> {
    assert_eq!(attention.len(), relation.len(), "distributions differ in length");
    attention
        .iter()
        .zip(relation)
        .map(|(a, r)| lambda * a + (1.0 - lambda) * r)
        .collect()
}
