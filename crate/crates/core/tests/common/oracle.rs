//! Random-instance comparisons of library building blocks against exact
//! or scalar-loop oracles. Each returns the largest absolute error seen.

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kt_core::metrics::auc;
use kt_core::models::{attention_weights, lstm_step, rkt_blend, Dkvmn};
use kt_core::relation::{phi, ContingencyTable};
use kt_core::tensor::{Tape, Tensor, Var};

use super::{dkvmn_read, dkvmn_write, softmax};

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
    tape.constant(Tensor::new(shape, data).unwrap())
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn big(v: u64) -> BigInt {
    BigInt::from(v)
}

fn rational_to_f64(r: &BigRational) -> f64 {
    // numerator and denominator may exceed f64 range only for absurd
    // counts; the test sizes keep both well inside it
    let n: f64 = r.numer().to_string().parse().unwrap();
    let d: f64 = r.denom().to_string().parse().unwrap();
    n / d
}

/// Phi coefficient against exact integer arithmetic for the numerator and
/// the product of margins.
pub fn phi_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let cap = if k % 4 == 0 { 3 } else { 5000 };
        let c: Vec<u64> = (0..4).map(|_| rng.random_range(0..cap)).collect();
        let t = ContingencyTable::new(c[0], c[1], c[2], c[3]);
        let num = big(c[3]) * big(c[0]) - big(c[2]) * big(c[1]);
        let den = big(c[2] + c[3]) * big(c[0] + c[1]) * big(c[1] + c[3]) * big(c[0] + c[2]);
        let expect = if den == BigInt::from(0) {
            0.0
        } else {
            let n: f64 = num.to_string().parse().unwrap();
            let d: f64 = den.to_string().parse().unwrap();
            n / d.sqrt()
        };
        worst = worst.max((phi(&t) - expect).abs());
    }
    worst
}

/// AUC against the exact pairwise win fraction (ties count one half).
pub fn auc_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    while compared < instances {
        let n = rng.random_range(2..60);
        let levels = rng.random_range(2..12);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        let (mut wins, mut pos, mut neg) = (BigRational::from_integer(0.into()), 0u64, 0u64);
        for i in 0..n {
            if !labels[i] {
                neg += 1;
                continue;
            }
            pos += 1;
            for j in 0..n {
                if labels[j] {
                    continue;
                }
                if scores[i] > scores[j] {
                    wins += BigRational::from_integer(1.into());
                } else if scores[i] == scores[j] {
                    wins += BigRational::new(1.into(), 2.into());
                }
            }
        }
        let got = auc(&scores, &labels);
        if pos == 0 || neg == 0 {
            assert_eq!(got, None);
            continue;
        }
        let exact = wins / BigRational::from_integer(big(pos * neg));
        worst = worst.max((got.unwrap() - rational_to_f64(&exact)).abs());
        compared += 1;
    }
    worst
}

/// Tape softmax along the last axis of rank-2 and rank-3 tensors.
pub fn softmax_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let rank3 = k % 2 == 1;
        let (a, b, c) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..9));
        let shape: Vec<usize> = if rank3 { vec![a, b, c] } else { vec![a * b, c] };
        let scale = [1.0, 10.0, 60.0][k % 3];
        let data = uniform(&mut rng, a * b * c, scale);
        let mut tape = Tape::no_grad();
        let x = leaf(&mut tape, &shape, data.clone());
        let y = tape.softmax(x, shape.len() - 1).unwrap();
        let expect: Vec<f64> = data.chunks(c).flat_map(softmax).collect();
        worst = worst.max(max_abs(tape.data(y), &expect));
    }
    worst
}

pub fn lstm_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (bsz, d_in, d) = (rng.random_range(1..4), rng.random_range(1..7), rng.random_range(1..7));
        let x = uniform(&mut rng, bsz * d_in, 2.0);
        let h = uniform(&mut rng, bsz * d, 1.0);
        let c = uniform(&mut rng, bsz * d, 2.0);
        let wx = uniform(&mut rng, d_in * 4 * d, 1.0);
        let wh = uniform(&mut rng, d * 4 * d, 1.0);
        let b = uniform(&mut rng, 4 * d, 1.0);
        let mut tape = Tape::no_grad();
        let vars = [
            leaf(&mut tape, &[bsz, d_in], x.clone()),
            leaf(&mut tape, &[bsz, d], h.clone()),
            leaf(&mut tape, &[bsz, d], c.clone()),
            leaf(&mut tape, &[d_in, 4 * d], wx.clone()),
            leaf(&mut tape, &[d, 4 * d], wh.clone()),
            leaf(&mut tape, &[4 * d], b.clone()),
        ];
        let (h2, c2) = lstm_step(&mut tape, vars[0], vars[1], vars[2], vars[3], vars[4], vars[5]).unwrap();
        for r in 0..bsz {
            let (eh, ec) = super::lstm_step(
                &x[r * d_in..(r + 1) * d_in],
                &h[r * d..(r + 1) * d],
                &c[r * d..(r + 1) * d],
                &wx,
                &wh,
                &b,
            );
            worst = worst.max(max_abs(&tape.data(h2)[r * d..(r + 1) * d], &eh));
            worst = worst.max(max_abs(&tape.data(c2)[r * d..(r + 1) * d], &ec));
        }
    }
    worst
}

/// Key addressing, read and erase-add write of the key-value memory.
pub fn dkvmn_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (bsz, n, d) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
        let k = uniform(&mut rng, bsz * d, 2.0);
        let keys = uniform(&mut rng, n * d, 2.0);
        let memory = uniform(&mut rng, bsz * n * d, 1.0);
        let erase: Vec<f64> = (0..bsz * d).map(|_| rng.random::<f64>()).collect();
        let add = uniform(&mut rng, bsz * d, 1.0);
        let mut tape = Tape::no_grad();
        let kv = leaf(&mut tape, &[bsz, d], k.clone());
        let keys_v = leaf(&mut tape, &[n, d], keys.clone());
        let mem_v = leaf(&mut tape, &[bsz, n, d], memory.clone());
        let er_v = leaf(&mut tape, &[bsz, d], erase.clone());
        let add_v = leaf(&mut tape, &[bsz, d], add.clone());
        let w = Dkvmn::address(&mut tape, kv, keys_v).unwrap();
        let r = Dkvmn::read(&mut tape, w, mem_v).unwrap();
        let written = Dkvmn::write(&mut tape, w, er_v, add_v, mem_v).unwrap();
        for b in 0..bsz {
            let kb = &k[b * d..(b + 1) * d];
            let scores: Vec<f64> = (0..n)
                .map(|s| kb.iter().zip(&keys[s * d..(s + 1) * d]).map(|(x, y)| x * y).sum())
                .collect();
            let ew = softmax(&scores);
            let mb = &memory[b * n * d..(b + 1) * n * d];
            worst = worst.max(max_abs(&tape.data(w)[b * n..(b + 1) * n], &ew));
            worst = worst.max(max_abs(&tape.data(r)[b * d..(b + 1) * d], &dkvmn_read(mb, &ew)));
            let em = dkvmn_write(mb, &ew, &erase[b * d..(b + 1) * d], &add[b * d..(b + 1) * d]);
            worst = worst.max(max_abs(&tape.data(written)[b * n * d..(b + 1) * n * d], &em));
        }
    }
    worst
}

/// Causal scaled dot-product weights and their blend with the relation
/// distribution, over left-padded windows.
pub fn attention_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (bsz, len, d) = (rng.random_range(1..4), rng.random_range(2..9), rng.random_range(1..7));
        let first: Vec<usize> = (0..bsz).map(|_| rng.random_range(0..len)).collect();
        let q = uniform(&mut rng, bsz * len * d, 2.0);
        let k = uniform(&mut rng, bsz * len * d, 2.0);
        let rel = uniform(&mut rng, bsz * len * len, 3.0);
        let lambda: f64 = rng.random();
        let mut mask = vec![-1e9; bsz * len * len];
        for b in 0..bsz {
            for i in first[b]..len {
                for j in first[b]..=i {
                    mask[(b * len + i) * len + j] = 0.0;
                }
            }
        }
        let mut tape = Tape::no_grad();
        let qv = leaf(&mut tape, &[bsz, len, d], q.clone());
        let kv = leaf(&mut tape, &[bsz, len, d], k.clone());
        let rv = leaf(&mut tape, &[bsz, len, len], rel.clone());
        let alpha = attention_weights(&mut tape, qv, kv, &mask).unwrap();
        let beta = rkt_blend(&mut tape, alpha, rv, &mask, lambda).unwrap();
        for b in 0..bsz {
            for i in first[b]..len {
                let at = |base: usize, j: usize| base + (b * len + j) * d;
                let scores: Vec<f64> = (first[b]..=i)
                    .map(|j| (0..d).map(|t| q[at(0, i) + t] * k[at(0, j) + t]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let ea = softmax(&scores);
                let er = softmax(&(first[b]..=i).map(|j| rel[(b * len + i) * len + j]).collect::<Vec<_>>());
                let row = (b * len + i) * len;
                let ga = &tape.data(alpha)[row..row + len];
                let gb = &tape.data(beta)[row..row + len];
                for j in 0..len {
                    let (wa, wb) = if j >= first[b] && j <= i {
                        let t = j - first[b];
                        (ea[t], lambda * ea[t] + (1.0 - lambda) * er[t])
                    } else {
                        (0.0, 0.0)
                    };
                    worst = worst.max((ga[j] - wa).abs()).max((gb[j] - wb).abs());
                }
            }
        }
    }
    worst
}
