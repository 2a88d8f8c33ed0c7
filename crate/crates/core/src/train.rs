//! Mini-batch training with validation-based model selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::{split_students, window_sequences, EncodedWindow, InteractionLog, Split, StudentLog};
use crate::error::{KtError, Result};
use crate::eval::{evaluate, window_predictions, EvalReport};
use crate::metrics::{accuracy, auc};
use crate::models::{binary_ce_loss, Batch, Model, ModelKind, Mode, RelationContext, Vocab};
use crate::optim::Adam;
use crate::relation::{accumulate_pairs, build_relation_matrix};
use crate::tensor::Tape;

const SHUFFLE_STREAM: u64 = 0x5117_f1e5;
const DROPOUT_STREAM: u64 = 0xd80f_0a7e;

/// Students partitioned by split, in log order.
#[derive(Debug, Clone, Default)]
pub struct DataSplits {
    pub train: Vec<StudentLog>,
    pub validation: Vec<StudentLog>,
    pub test: Vec<StudentLog>,
}

impl DataSplits {
    pub fn new(log: &InteractionLog, cfg: &TrainConfig) -> Self {
        let labels = split_students(log.students.len(), cfg.test_fraction, cfg.validation_fraction, cfg.split_seed);
        let mut s = DataSplits::default();
        for (student, split) in log.students.iter().zip(labels) {
            match split {
                Split::Train => s.train.push(student.clone()),
                Split::Validation => s.validation.push(student.clone()),
                Split::Test => s.test.push(student.clone()),
            }
        }
        s
    }
}

/// Exercises that occur in `students`.
pub fn seen_exercises(students: &[StudentLog], num_exercises: usize) -> Vec<bool> {
    let mut seen = vec![false; num_exercises];
    for x in students.iter().flat_map(|s| &s.interactions) {
        if let Some(v) = seen.get_mut(x.exercise as usize) {
            *v = true;
        }
    }
    seen
}

/// Relation matrix counted on `train` only, with one memory-strength row
/// per training student.
pub fn build_relation_context(
    train: &[StudentLog],
    skill_of: &[u32],
    theta: f64,
    pair_cap: Option<usize>,
) -> Result<RelationContext> {
    let tables = accumulate_pairs(train, pair_cap);
    let matrix = build_relation_matrix(&tables, skill_of, theta)?;
    Ok(RelationContext::new(matrix, train.iter().map(|s| s.student_id.clone()).collect()))
}

/// Fresh model for `cfg` whose vocabulary (and relations, for RKT) come
/// from the training students.
pub fn build_model(cfg: &TrainConfig, num_exercises: usize, skill_of: &[u32], train: &[StudentLog]) -> Result<Model> {
    let vocab = Vocab::new(num_exercises, seen_exercises(train, num_exercises));
    let (relation, memory_students) = if cfg.model == ModelKind::Rkt {
        let ctx = build_relation_context(train, skill_of, cfg.theta, cfg.pair_cap)?;
        let n = ctx.students().len();
        (Some(ctx), n)
    } else {
        (None, 0)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Model::new(cfg.model_spec(num_exercises, memory_students), vocab, relation, &mut rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub auc: Option<f64>,
    pub acc: Option<f64>,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,split,loss,auc,acc";

    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
        format!("{},{},{:.6},{},{}", self.epoch, self.split, self.loss, opt(self.auc), opt(self.acc))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_validation_auc: Option<f64>,
}

/// Loss sum, valid-row count and valid-row (prob, label) pairs of one step.
pub struct StepOutput {
    pub loss_sum: f64,
    pub n_valid: usize,
    pub probs: Vec<f64>,
    pub labels: Vec<bool>,
}

/// One forward/backward/update on `batch`. The objective is the mean
/// cross-entropy over valid rows.
pub fn train_step(model: &mut Model, adam: &mut Adam, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<StepOutput> {
    let n_valid = batch.n_valid();
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let probs = model.forward(&mut tape, &bound, batch, Mode::Train, rng)?;
    let total = binary_ce_loss(&mut tape, probs, &batch.labels, &batch.mask)?;
    let loss_sum = tape.data(total)[0];
    let mut out = StepOutput {
        loss_sum,
        n_valid,
        probs: Vec::with_capacity(n_valid),
        labels: Vec::with_capacity(n_valid),
    };
    for (i, &m) in batch.mask.iter().enumerate() {
        if m > 0.0 {
            out.probs.push(tape.data(probs)[i]);
            out.labels.push(batch.labels[i] > 0.5);
        }
    }
    if n_valid == 0 {
        return Ok(out);
    }
    let mean = tape.scale(total, 1.0 / n_valid as f64);
    tape.backward(mean)?;
    let grads = model.params().collect_grads(&tape, &bound);
    adam.step(model.params_mut(), &grads)?;
    Ok(out)
}

/// Trains `model` for `cfg.epochs` epochs and keeps the parameters of the
/// epoch with the best validation AUC (the last epoch when there is no
/// validation signal). `on_epoch` sees every train and validation record.
pub fn fit(
    model: &mut Model,
    train: &[StudentLog],
    validation: &[StudentLog],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FitSummary> {
    let spec = model.spec().clone();
    let windows = window_sequences(train.iter().enumerate(), spec.num_exercises, spec.window);
    if windows.is_empty() {
        return Err(KtError::Data("no training windows (every student has fewer than 2 interactions)".into()));
    }
    let memory_rows: Vec<Option<usize>> = windows
        .iter()
        .map(|w| model.memory_row(&train[w.student].student_id))
        .collect();
    let mut adam = Adam::new(cfg.adam(), model.params());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_STREAM);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut summary = FitSummary {
        history: Vec::new(),
        best_epoch: 0,
        best_validation_auc: None,
    };
    let mut best_params = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss, mut n) = (0.0, 0usize);
        let (mut probs, mut labels) = (Vec::new(), Vec::new());
        for chunk in order.chunks(cfg.batch_size) {
            let ws: Vec<&EncodedWindow> = chunk.iter().map(|&i| &windows[i]).collect();
            let rows = chunk.iter().map(|&i| memory_rows[i]).collect();
            let batch = Batch::new(&ws, model.vocab(), rows)?;
            let step = train_step(model, &mut adam, &batch, &mut dropout_rng)?;
            loss += step.loss_sum;
            n += step.n_valid;
            probs.extend(step.probs);
            labels.extend(step.labels);
        }
        let record = EpochRecord {
            epoch,
            split: "train",
            loss: loss / n.max(1) as f64,
            auc: auc(&probs, &labels),
            acc: accuracy(&probs, &labels),
        };
        on_epoch(&record);
        summary.history.push(record);

        let mut improved = validation.is_empty();
        if !validation.is_empty() {
            let preds = window_predictions(model, validation, cfg.eval_batch_size)?;
            let report = EvalReport::from_predictions(&preds);
            let record = EpochRecord {
                epoch,
                split: "validation",
                loss: report.loss.unwrap_or(f64::NAN),
                auc: report.auc,
                acc: report.acc,
            };
            on_epoch(&record);
            summary.history.push(record);
            improved = match (report.auc, summary.best_validation_auc) {
                (Some(a), Some(b)) => a > b,
                (Some(_), None) => true,
                (None, _) => summary.best_epoch == 0,
            };
            if improved && report.auc.is_some() {
                summary.best_validation_auc = report.auc;
            }
        }
        if improved {
            summary.best_epoch = epoch;
            best_params = Some(model.params().clone());
        }
    }
    if let Some(best) = best_params {
        model.params_mut().load_from(&best)?;
    }
    Ok(summary)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub splits: DataSplits,
    pub fit: FitSummary,
    pub test: EvalReport,
}

/// Split, build, fit and evaluate on the held-out test students.
pub fn train_and_evaluate(
    log: &InteractionLog,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let num_exercises = log.num_exercises();
    if num_exercises == 0 {
        return Err(KtError::Data("log has no interactions".into()));
    }
    let skill_of = log.skill_table(num_exercises);
    let splits = DataSplits::new(log, cfg);
    let mut model = build_model(cfg, num_exercises, &skill_of, &splits.train)?;
    let fit = fit(&mut model, &splits.train, &splits.validation, cfg, on_epoch)?;
    let test = evaluate(&model, &splits.test, cfg.eval_batch_size)?;
    Ok(TrainOutcome {
        model,
        splits,
        fit,
        test,
    })
}
