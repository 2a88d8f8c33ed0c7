mod common;

use common::{batch_of, model_and_windows, reference_forward, small_log};
use kt_core::data::{encode_window, EncodedWindow};
use kt_core::models::{Batch, Model, ModelKind};
use kt_core::optim::Adam;
use kt_core::train::train_step;
use kt_core::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn predict_one(model: &Model, w: &EncodedWindow, row: Option<usize>) -> Vec<f64> {
    let batch = Batch::new(&[w], model.vocab(), vec![row]).unwrap();
    model.predict(&batch).unwrap()
}

#[test]
fn batched_forward_matches_scalar_reference_for_every_model() {
    for kind in ModelKind::ALL {
        for seed in 0..4 {
            let log = small_log(12, 15, 4, seed, 14);
            let (model, windows) = model_and_windows(kind, &log, 15, 6, 9, seed);
            let batch = batch_of(&model, &log, &windows);
            let probs = model.predict(&batch).unwrap();
            for (b, w) in windows.iter().enumerate() {
                let row = model.memory_row(&log.students[w.student].student_id);
                let expect = reference_forward(&model, w, row);
                for (k, slot) in (w.first_valid()..w.len()).enumerate() {
                    let got = probs[b * batch.len + slot];
                    assert!((got - expect[k]).abs() < 1e-9, "{kind} window {b} slot {slot}: {got} vs {}", expect[k]);
                }
            }
        }
    }
}

#[test]
fn all_zero_parameters_predict_one_half() {
    let log = small_log(6, 10, 3, 1, 12);
    for kind in ModelKind::ALL {
        let (mut model, windows) = model_and_windows(kind, &log, 10, 4, 8, 1);
        for p in model.params_mut().iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let batch = batch_of(&model, &log, &windows);
        let probs = model.predict(&batch).unwrap();
        for (r, &m) in batch.mask.iter().enumerate() {
            if m > 0.0 {
                assert_eq!(probs[r], 0.5, "{kind}");
            }
        }
    }
}

#[test]
fn predictions_do_not_depend_on_later_interactions() {
    let (len, e) = (10, 12);
    let log = small_log(8, e, 3, 5, 10);
    for kind in ModelKind::ALL {
        let (model, _) = model_and_windows(kind, &log, e, 6, len, 3);
        for s in log.students.iter().filter(|s| s.interactions.len() >= 4) {
            let xs = &s.interactions[..s.interactions.len().min(len)];
            let row = model.memory_row(&s.student_id);
            let base_w = encode_window(0, xs, e, len);
            let base = predict_one(&model, &base_w, row);
            let first = base_w.first_valid();
            // Interaction `k` first appears as the target of slot
            // `first + k - 1`; every earlier slot must be unaffected.
            for k in 2..xs.len() {
                let mut changed = xs.to_vec();
                changed[k].exercise = (changed[k].exercise + 5) % e as u32;
                changed[k].correct = !changed[k].correct;
                changed[k].timestamp_ms += 7_200_000;
                for later in changed.iter_mut().skip(k + 1) {
                    later.timestamp_ms += 7_200_000;
                }
                let w = encode_window(0, &changed, e, len);
                let got = predict_one(&model, &w, row);
                for slot in first..first + k - 1 {
                    assert_eq!(got[slot], base[slot], "{kind}: slot {slot} saw interaction {k}");
                }
                assert_ne!(got[first + k - 1], base[first + k - 1], "{kind}: slot must see its own target");
            }
        }
    }
}

#[test]
fn rkt_with_lambda_one_reproduces_sakt_bit_for_bit() {
    let log = small_log(20, 15, 4, 8, 30);
    let (sakt, windows) = model_and_windows(ModelKind::Sakt, &log, 15, 8, 10, 4);
    let (mut rkt, _) = model_and_windows(ModelKind::Rkt, &log, 15, 8, 10, 9);
    rkt.spec_mut().lambda = 1.0;
    for p in sakt.params().iter() {
        let name = p.name.replacen("sakt.", "rkt.", 1);
        let id = rkt.params().find(&name).unwrap();
        rkt.params_mut().get_mut(id).value.data_mut().copy_from_slice(p.value.data());
    }
    let a = sakt.predict(&batch_of(&sakt, &log, &windows)).unwrap();
    let b = rkt.predict(&batch_of(&rkt, &log, &windows)).unwrap();
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn every_model_can_memorise_a_small_batch() {
    let log = small_log(8, 10, 3, 2, 9);
    for kind in ModelKind::ALL {
        let (mut model, windows) = model_and_windows(kind, &log, 10, 16, 8, 0);
        let windows: Vec<EncodedWindow> = windows.into_iter().take(8).collect();
        let batch = batch_of(&model, &log, &windows);
        let cfg = TrainConfig {
            learning_rate: 0.01,
            l2: 0.0,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(cfg.adam(), model.params());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        model.spec_mut().dropout = 0.0;
        let mut loss = f64::INFINITY;
        for _ in 0..200 {
            let out = train_step(&mut model, &mut adam, &batch, &mut rng).unwrap();
            loss = out.loss_sum / out.n_valid as f64;
        }
        assert!(loss < 0.15, "{kind}: loss {loss}");
    }
}
