//! Repeated training runs of several models on one log.

use std::fmt::Write as _;

use crate::config::TrainConfig;
use crate::data::InteractionLog;
use crate::error::Result;
use crate::metrics::median;
use crate::models::ModelKind;
use crate::train::{train_and_evaluate, EpochRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRun {
    pub model: ModelKind,
    pub seed: u64,
    pub auc: Option<f64>,
    pub acc: Option<f64>,
    pub student_mean_auc: Option<f64>,
    pub best_epoch: usize,
}

/// Trains every model once per seed with otherwise identical settings.
/// Only the initialisation/shuffling seed varies; the student split is
/// fixed by `base.split_seed`.
pub fn compare(
    log: &InteractionLog,
    base: &TrainConfig,
    models: &[ModelKind],
    seeds: &[u64],
    on_run: &mut dyn FnMut(&CompareRun),
) -> Result<Vec<CompareRun>> {
    let mut runs = Vec::new();
    for &seed in seeds {
        for &model in models {
            let cfg = TrainConfig {
                model,
                seed,
                ..base.clone()
            };
            let outcome = train_and_evaluate(log, &cfg, &mut |_: &EpochRecord| {})?;
            let run = CompareRun {
                model,
                seed,
                auc: outcome.test.auc,
                acc: outcome.test.acc,
                student_mean_auc: outcome.test.student_mean_auc,
                best_epoch: outcome.fit.best_epoch,
            };
            on_run(&run);
            runs.push(run);
        }
    }
    Ok(runs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSummary {
    pub model: ModelKind,
    pub runs: usize,
    pub median_auc: Option<f64>,
    pub min_auc: Option<f64>,
    pub max_auc: Option<f64>,
    pub median_acc: Option<f64>,
}

/// Per-model median and range, in first-appearance order of the models.
pub fn summarize(runs: &[CompareRun]) -> Vec<ModelSummary> {
    let mut models: Vec<ModelKind> = Vec::new();
    for r in runs {
        if !models.contains(&r.model) {
            models.push(r.model);
        }
    }
    models
        .into_iter()
        .map(|model| {
            let mine: Vec<&CompareRun> = runs.iter().filter(|r| r.model == model).collect();
            let aucs: Vec<f64> = mine.iter().filter_map(|r| r.auc).collect();
            let accs: Vec<f64> = mine.iter().filter_map(|r| r.acc).collect();
            ModelSummary {
                model,
                runs: mine.len(),
                median_auc: median(&aucs),
                min_auc: aucs.iter().copied().reduce(f64::min),
                max_auc: aucs.iter().copied().reduce(f64::max),
                median_acc: median(&accs),
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

pub fn runs_csv(runs: &[CompareRun]) -> String {
    let mut out = String::from("model,seed,auc,acc,student_mean_auc,best_epoch\n");
    for r in runs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.model,
            r.seed,
            opt(r.auc),
            opt(r.acc),
            opt(r.student_mean_auc),
            r.best_epoch
        );
    }
    out
}

pub fn summary_csv(summaries: &[ModelSummary]) -> String {
    let mut out = String::from("model,runs,median_auc,min_auc,max_auc,median_acc\n");
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.model,
            s.runs,
            opt(s.median_auc),
            opt(s.min_auc),
            opt(s.max_auc),
            opt(s.median_acc)
        );
    }
    out
}
