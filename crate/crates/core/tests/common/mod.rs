//! Independent oracles shared by the integration tests: central finite
//! differences and plain scalar re-implementations of every model's
//! forward pass that read parameters by name.

#![allow(dead_code)]

pub mod oracle;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use kt_core::data::{generate_synthetic, window_sequences, EncodedWindow, InteractionLog, SynthConfig};
use kt_core::models::{binary_ce_loss, Batch, Mode, Model, ModelKind, ModelSpec, RecurrentCell, Vocab};
use kt_core::relation::{MS_PER_HOUR};
use kt_core::tensor::Tape;
use kt_core::train::build_relation_context;

pub fn small_log(students: usize, exercises: usize, skills: usize, seed: u64, max_length: usize) -> InteractionLog {
    let cfg = SynthConfig {
        students,
        exercises,
        skills,
        seed,
        min_length: 3,
        max_length,
        ..SynthConfig::default()
    };
    generate_synthetic(&cfg).unwrap().0
}

pub fn spec(kind: ModelKind, num_exercises: usize, dim: usize, window: usize, memory_students: usize) -> ModelSpec {
    ModelSpec {
        kind,
        num_exercises,
        dim,
        window,
        memory_slots: 5,
        lambda: 0.5,
        dropout: 0.1,
        cell: RecurrentCell::Lstm,
        memory_students,
    }
}

/// A model of `kind` built on `log` (relations and memory rows from all of
/// its students), with every window of the log.
pub fn model_and_windows(
    kind: ModelKind,
    log: &InteractionLog,
    num_exercises: usize,
    dim: usize,
    window: usize,
    seed: u64,
) -> (Model, Vec<EncodedWindow>) {
    let relation = (kind == ModelKind::Rkt).then(|| {
        build_relation_context(&log.students, &log.skill_table(num_exercises), 0.3, None).unwrap()
    });
    let n_mem = relation.as_ref().map_or(0, |r| r.students().len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(
        spec(kind, num_exercises, dim, window, n_mem),
        Vocab::all_seen(num_exercises),
        relation,
        &mut rng,
    )
    .unwrap();
    let windows = window_sequences(log.students.iter().enumerate(), num_exercises, window);
    (model, windows)
}

pub fn batch_of(model: &Model, log: &InteractionLog, windows: &[EncodedWindow]) -> Batch {
    let refs: Vec<&EncodedWindow> = windows.iter().collect();
    let rows = windows
        .iter()
        .map(|w| model.memory_row(&log.students[w.student].student_id))
        .collect();
    Batch::new(&refs, model.vocab(), rows).unwrap()
}

/// Mean training loss with a dropout stream reseeded on every call, so
/// that repeated evaluations see identical masks.
pub fn mean_loss(model: &Model, batch: &Batch, mode: Mode, dropout_seed: u64) -> f64 {
    let mut tape = Tape::no_grad();
    let bound = model.params().bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let p = model.forward(&mut tape, &bound, batch, mode, &mut rng).unwrap();
    let l = binary_ce_loss(&mut tape, p, &batch.labels, &batch.mask).unwrap();
    tape.data(l)[0] / batch.n_valid() as f64
}

pub fn analytic_grads(model: &Model, batch: &Batch, mode: Mode, dropout_seed: u64) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let p = model.forward(&mut tape, &bound, batch, mode, &mut rng).unwrap();
    let l = binary_ce_loss(&mut tape, p, &batch.labels, &batch.mask).unwrap();
    let mean = tape.scale(l, 1.0 / batch.n_valid() as f64);
    tape.backward(mean).unwrap();
    model.params().collect_grads(&tape, &bound)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub coords: usize,
    pub passed: usize,
    pub worst: f64,
}

impl GradCheck {
    pub fn pass_rate(&self) -> f64 {
        self.passed as f64 / self.coords as f64
    }
}

/// Compares every parameter coordinate's analytic gradient against a
/// central difference with step `h`. Relative error is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn gradcheck(model: &mut Model, batch: &Batch, mode: Mode, h: f64, tol: f64, floor: f64) -> GradCheck {
    let seed = 99;
    let analytic = analytic_grads(model, batch, mode, seed);
    let mut out = GradCheck {
        coords: 0,
        passed: 0,
        worst: 0.0,
    };
    let n_params = model.params().len();
    for k in 0..n_params {
        let n = analytic[k].len();
        for i in 0..n {
            let id = kt_core::params::ParamId(k);
            let orig = model.params().get(id).value.data()[i];
            model.params_mut().get_mut(id).value.data_mut()[i] = orig + h;
            let up = mean_loss(model, batch, mode, seed);
            model.params_mut().get_mut(id).value.data_mut()[i] = orig - h;
            let down = mean_loss(model, batch, mode, seed);
            model.params_mut().get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            out.coords += 1;
            if rel <= tol {
                out.passed += 1;
            }
            out.worst = out.worst.max(rel);
        }
    }
    out
}

// ----- scalar reference forwards ---------------------------------------------

fn p<'a>(model: &'a Model, name: &str) -> &'a [f64] {
    let id = model.params().find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    model.params().get(id).value.data()
}

fn row(table: &[f64], r: usize, width: usize) -> &[f64] {
    &table[r * width..(r + 1) * width]
}

/// `x W` for a row vector `x` and row-major `W: [x.len(), cols]`.
fn vecmat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        for c in 0..cols {
            out[c] += xi * w[i * cols + c];
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let s = 1.0 / (var + 1e-8).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * s * g + b)
        .collect()
}

/// One LSTM step with gate order (input, forget, output, candidate).
pub fn lstm_step(x: &[f64], h: &[f64], c: &[f64], wx: &[f64], wh: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = h.len();
    let mut pre = vecmat(x, wx, 4 * d);
    let hw = vecmat(h, wh, 4 * d);
    for k in 0..4 * d {
        pre[k] += hw[k] + b[k];
    }
    let mut h2 = vec![0.0; d];
    let mut c2 = vec![0.0; d];
    for k in 0..d {
        let i = sigmoid(pre[k]);
        let f = sigmoid(pre[d + k]);
        let o = sigmoid(pre[2 * d + k]);
        let g = pre[3 * d + k].tanh();
        c2[k] = f * c[k] + i * g;
        h2[k] = o * c2[k].tanh();
    }
    (h2, c2)
}

/// DKVMN erase-then-add write on a row-major `[N, d]` memory.
pub fn dkvmn_write(memory: &[f64], w: &[f64], erase: &[f64], add: &[f64]) -> Vec<f64> {
    let d = erase.len();
    let mut out = memory.to_vec();
    for (n, wn) in w.iter().enumerate() {
        for k in 0..d {
            out[n * d + k] = memory[n * d + k] * (1.0 - wn * erase[k]) + wn * add[k];
        }
    }
    out
}

pub fn dkvmn_read(memory: &[f64], w: &[f64]) -> Vec<f64> {
    let d = memory.len() / w.len();
    let mut r = vec![0.0; d];
    for (n, wn) in w.iter().enumerate() {
        for k in 0..d {
            r[k] += wn * memory[n * d + k];
        }
    }
    r
}

/// Probabilities of every valid slot of `w`, in slot order, computed with
/// scalar loops (eval mode).
pub fn reference_forward(model: &Model, w: &EncodedWindow, memory_row: Option<usize>) -> Vec<f64> {
    let spec = model.spec();
    let vocab = model.vocab();
    let (d, e) = (spec.dim, spec.num_exercises);
    let first = w.first_valid();
    let slots: Vec<usize> = (first..w.len()).collect();
    let inter = |j: usize| vocab.interaction_row(w.interaction_ids[j]);
    let target = |j: usize| vocab.exercise_row(w.exercise_ids[j]);
    match spec.kind {
        ModelKind::Dkt => {
            let emb = p(model, "dkt.interaction_embedding");
            let (wx, wh, b) = (p(model, "dkt.w_input"), p(model, "dkt.w_hidden"), p(model, "dkt.bias"));
            let (wo, bo) = (p(model, "dkt.w_out"), p(model, "dkt.b_out"));
            let rows = vocab.exercise_rows();
            let (mut h, mut c) = (vec![0.0; d], vec![0.0; d]);
            slots
                .iter()
                .map(|&j| {
                    (h, c) = lstm_step(row(emb, inter(j), d), &h, &c, wx, wh, b);
                    let t = target(j);
                    let logit: f64 = (0..d).map(|k| h[k] * wo[k * rows + t]).sum::<f64>() + bo[t];
                    sigmoid(logit)
                })
                .collect()
        }
        ModelKind::Dkvmn => {
            let n = spec.memory_slots;
            let keys = p(model, "dkvmn.keys");
            let ex = p(model, "dkvmn.exercise_embedding");
            let it = p(model, "dkvmn.interaction_embedding");
            let address = |k: &[f64]| softmax(&(0..n).map(|s| dot(k, row(keys, s, d))).collect::<Vec<_>>());
            let mut memory = p(model, "dkvmn.init_value").to_vec();
            slots
                .iter()
                .map(|&j| {
                    let k_in = row(ex, vocab.exercise_row(w.input_exercise(j, e)), d);
                    let v = row(it, inter(j), d);
                    let mut er = vecmat(v, p(model, "dkvmn.w_erase"), d);
                    let mut ad = vecmat(v, p(model, "dkvmn.w_add"), d);
                    for k in 0..d {
                        er[k] = sigmoid(er[k] + p(model, "dkvmn.b_erase")[k]);
                        ad[k] = (ad[k] + p(model, "dkvmn.b_add")[k]).tanh();
                    }
                    memory = dkvmn_write(&memory, &address(k_in), &er, &ad);
                    let k_t = row(ex, target(j), d);
                    let r = dkvmn_read(&memory, &address(k_t));
                    let joined: Vec<f64> = r.iter().chain(k_t).copied().collect();
                    let mut f = vecmat(&joined, p(model, "dkvmn.w_summary"), d);
                    for k in 0..d {
                        f[k] = (f[k] + p(model, "dkvmn.b_summary")[k]).tanh();
                    }
                    sigmoid(dot(&f, p(model, "dkvmn.w_out")) + p(model, "dkvmn.b_out")[0])
                })
                .collect()
        }
        ModelKind::Sakt | ModelKind::Rkt => {
            let pre = spec.kind.name();
            let q = |s: &str| p(model, &format!("{pre}.{s}"));
            let (it, ex, pos) = (q("interaction_embedding"), q("exercise_embedding"), q("position_embedding"));
            let xs: Vec<Vec<f64>> = slots
                .iter()
                .map(|&j| {
                    row(it, inter(j), d)
                        .iter()
                        .zip(row(pos, j - first, d))
                        .map(|(a, b)| a + b)
                        .collect()
                })
                .collect();
            let keys: Vec<Vec<f64>> = xs.iter().map(|x| vecmat(x, q("w_key"), d)).collect();
            let values: Vec<Vec<f64>> = xs.iter().map(|x| vecmat(x, q("w_value"), d)).collect();
            slots
                .iter()
                .enumerate()
                .map(|(a, &i)| {
                    let qe = row(ex, target(i), d);
                    let query = vecmat(qe, q("w_query"), d);
                    let scores: Vec<f64> = (0..=a).map(|b| dot(&query, &keys[b]) / (d as f64).sqrt()).collect();
                    let mut weights = softmax(&scores);
                    if spec.kind == ModelKind::Rkt {
                        let ctx = model.relation().unwrap();
                        let offsets = q("memory_offsets");
                        let off = offsets[memory_row.filter(|&r| r < spec.memory_students).unwrap_or(spec.memory_students)];
                        let strength = softplus(q("memory_strength")[0] + off);
                        let z: Vec<f64> = (0..=a)
                            .map(|b| {
                                let j = slots[b];
                                let rel = ctx.matrix.get(w.exercise_ids[i], w.input_exercise(j, e));
                                let gap = w.target_timestamps[i].saturating_sub(w.timestamps[j]) as f64 / MS_PER_HOUR;
                                rel + (-gap / strength).exp()
                            })
                            .collect();
                        let r = softmax(&z);
                        let lam = spec.lambda;
                        weights = weights.iter().zip(&r).map(|(x, y)| lam * x + (1.0 - lam) * y).collect();
                    }
                    let mut y = vec![0.0; d];
                    for (b, wb) in weights.iter().enumerate() {
                        for k in 0..d {
                            y[k] += wb * values[b][k];
                        }
                    }
                    let s1_in: Vec<f64> = y.iter().zip(qe).map(|(a, b)| a + b).collect();
                    let s1 = layer_norm(&s1_in, q("ln1_gain"), q("ln1_bias"));
                    let mut h = vecmat(&s1, q("ffn_w1"), d);
                    for k in 0..d {
                        h[k] = (h[k] + q("ffn_b1")[k]).max(0.0);
                    }
                    let mut f = vecmat(&h, q("ffn_w2"), d);
                    for k in 0..d {
                        f[k] += q("ffn_b2")[k] + s1[k];
                    }
                    let s2 = layer_norm(&f, q("ln2_gain"), q("ln2_bias"));
                    sigmoid(dot(&s2, q("w_out")) + q("b_out")[0])
                })
                .collect()
        }
    }
}
