//! `ktrace`: generate, ingest, train, evaluate and compare knowledge
//! tracing models from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use kt_core::checkpoint;
use kt_core::compare::{compare, runs_csv, summarize, summary_csv};
use kt_core::config::resolve_toml;
use kt_core::data::{generate_synthetic, ingest_log, ColumnMapping, InteractionLog, StudentLog, SynthConfig};
use kt_core::eval::{rolling_predictions, EvalReport};
use kt_core::export::{attention_for_student, average_attention_csv};
use kt_core::models::ModelKind;
use kt_core::relation::{accumulate_pairs, build_relation_matrix};
use kt_core::train::{train_and_evaluate, DataSplits, EpochRecord};
use kt_core::{KtError, TrainConfig};

/// Environment variable naming the default root for output directories.
const OUT_ROOT_VAR: &str = "KT_OUT_ROOT";

#[derive(Parser)]
#[command(name = "ktrace", version, about = "Knowledge tracing with DKT, DKVMN, SAKT and RKT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interaction log with planted skills and forgetting.
    Synth(SynthArgs),
    /// Read an interaction CSV (optionally with renamed columns) into canonical form.
    Ingest(IngestArgs),
    /// Build the exercise relation matrix from the training students.
    Relations(RelationsArgs),
    /// Train a model, keep the best validation epoch and score the test students.
    Train(TrainArgs),
    /// Score a checkpoint with rolling next-response prediction.
    Evaluate(EvaluateArgs),
    /// Write attention weights of an attention model as CSV.
    ExportAttention(ExportArgs),
    /// Train several models over several seeds and summarise test AUC.
    Compare(CompareArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set dim=64` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct OutArgs {
    /// Output directory [default: $KT_OUT_ROOT/<command> or runs/<command>].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct IngestArgs {
    /// Input CSV.
    input: PathBuf,
    /// TOML file mapping canonical column names to the file's names.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Rename one column, e.g. `--column student_id=user_id` (repeatable).
    #[arg(long = "column", value_name = "CANONICAL=ACTUAL")]
    columns: Vec<String>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct DataArgs {
    /// Interaction CSV in canonical form.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct RelationsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Count pairs over every student instead of the training split.
    #[arg(long)]
    all_students: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which students to score: test, validation, train or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write one line per prediction to this CSV.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Student whose most recent window is exported.
    #[arg(long, conflicts_with = "average")]
    student: Option<String>,
    /// Average the maps of every student in the chosen split.
    #[arg(long)]
    average: bool,
    /// Split used with `--average`.
    #[arg(long, default_value = "test")]
    split: String,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated models.
    #[arg(long, default_value = "dkt,dkvmn,sakt,rkt", value_delimiter = ',')]
    models: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2,3,4", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[command(flatten)]
    out: OutArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 3 configuration, 4 data or I/O, 5 numerical failure, 1 anything else.
fn exit_code(e: &KtError) -> u8 {
    match e {
        KtError::Config(_) => 3,
        KtError::Data(_) | KtError::Io { .. } | KtError::Csv { .. } | KtError::Checkpoint(_) | KtError::Index { .. } => 4,
        KtError::NonFiniteGradient(_) | KtError::Domain { .. } => 5,
        _ => 1,
    }
}

fn run(command: Command) -> kt_core::Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Ingest(a) => ingest(a),
        Command::Relations(a) => relations(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::ExportAttention(a) => export_attention(a),
        Command::Compare(a) => compare_cmd(a),
    }
}

fn out_dir(out: &OutArgs, command: &str) -> kt_core::Result<PathBuf> {
    let dir = match &out.out {
        Some(d) => d.clone(),
        None => {
            let root = std::env::var_os(OUT_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            root.join(command)
        }
    };
    fs::create_dir_all(&dir).map_err(|e| KtError::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> kt_core::Result<()> {
    fs::write(path, text).map_err(|e| KtError::io(path, e))
}

fn load_log(data: &DataArgs) -> kt_core::Result<InteractionLog> {
    let ingested = ingest_log(&data.data, &ColumnMapping::default())?;
    if !ingested.report.rejected.is_empty() {
        eprintln!(
            "warning: skipped {} malformed rows in {}",
            ingested.report.rejected.len(),
            data.data.display()
        );
    }
    Ok(ingested.log)
}

fn synth(a: SynthArgs) -> kt_core::Result<()> {
    let cfg: SynthConfig = resolve_toml(a.config.config.as_deref(), &a.config.overrides)?;
    cfg.validate()?;
    let dir = out_dir(&a.out, "synth")?;
    write(&dir.join("synth.toml"), &cfg.to_toml())?;
    let (log, _) = generate_synthetic(&cfg)?;
    let path = dir.join("interactions.csv");
    log.write_csv(&path)?;
    println!(
        "wrote {} interactions of {} students to {}",
        log.num_interactions(),
        log.students.len(),
        path.display()
    );
    Ok(())
}

fn ingest(a: IngestArgs) -> kt_core::Result<()> {
    let schema: ColumnMapping = resolve_toml(a.schema.as_deref(), &a.columns)?;
    let dir = out_dir(&a.out, "ingest")?;
    let got = ingest_log(&a.input, &schema)?;
    got.log.write_csv(&dir.join("interactions.csv"))?;
    got.manifest.save(&dir.join("manifest.toml"))?;
    let mut rejected = String::from("line,reason\n");
    for r in &got.report.rejected {
        rejected.push_str(&format!("{},\"{}\"\n", r.line, r.reason.replace('"', "'")));
    }
    write(&dir.join("rejected.csv"), &rejected)?;
    println!(
        "read {} rows: kept {} interactions of {} students, rejected {}, skill conflicts {}",
        got.report.rows_read,
        got.log.num_interactions(),
        got.log.students.len(),
        got.report.rejected.len(),
        got.report.skill_conflicts
    );
    Ok(())
}

fn relations(a: RelationsArgs) -> kt_core::Result<()> {
    let cfg = TrainConfig::resolve(a.config.config.as_deref(), &a.config.overrides)?;
    let dir = out_dir(&a.out, "relations")?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    let log = load_log(&a.data)?;
    let num_exercises = log.num_exercises();
    let students: Vec<StudentLog> = if a.all_students {
        log.students.clone()
    } else {
        DataSplits::new(&log, &cfg).train
    };
    let tables = accumulate_pairs(&students, cfg.pair_cap);
    let matrix = build_relation_matrix(&tables, &log.skill_table(num_exercises), cfg.theta)?;
    let path = dir.join("relations.csv");
    matrix.save(&path)?;
    println!(
        "{} non-zero relations among {} exercises (theta {}) -> {}",
        matrix.nnz(),
        num_exercises,
        cfg.theta,
        path.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> kt_core::Result<()> {
    let cfg = TrainConfig::resolve(a.config.config.as_deref(), &a.config.overrides)?;
    let dir = out_dir(&a.out, "train")?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    let log = load_log(&a.data)?;
    let metrics_path = dir.join("metrics.csv");
    let mut metrics = format!("{}\n", EpochRecord::CSV_HEADER);
    let start = Instant::now();
    let outcome = train_and_evaluate(&log, &cfg, &mut |r| {
        println!("{}", r.csv_line());
        metrics.push_str(&r.csv_line());
        metrics.push('\n');
    })?;
    write(&metrics_path, &metrics)?;
    checkpoint::save(&outcome.model, &cfg, &dir.join("model.ckpt"))?;
    write(&dir.join("test_report.txt"), &report_text(&outcome.test))?;
    println!(
        "{}: best epoch {}, test {} ({:.1}s)",
        cfg.model,
        outcome.fit.best_epoch,
        report_line(&outcome.test),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn pick_split(log: &InteractionLog, cfg: &TrainConfig, split: &str) -> kt_core::Result<Vec<StudentLog>> {
    let s = DataSplits::new(log, cfg);
    match split {
        "test" => Ok(s.test),
        "validation" => Ok(s.validation),
        "train" => Ok(s.train),
        "all" => Ok(log.students.clone()),
        other => Err(KtError::Config(format!(
            "unknown split `{other}` (test, validation, train, all)"
        ))),
    }
}

fn evaluate(a: EvaluateArgs) -> kt_core::Result<()> {
    let (model, cfg) = checkpoint::load(&a.checkpoint)?;
    let log = load_log(&a.data)?;
    let students = pick_split(&log, &cfg, &a.split)?;
    let preds = rolling_predictions(&model, &students, cfg.eval_batch_size)?;
    if let Some(path) = &a.predictions {
        let mut out = String::from("student_id,step,exercise_id,response,prob\n");
        for p in &preds {
            out.push_str(&format!(
                "{},{},{},{},{:?}\n",
                students[p.student].student_id,
                p.step,
                p.exercise,
                u8::from(p.correct),
                p.prob
            ));
        }
        write(path, &out)?;
    }
    let report = EvalReport::from_predictions(&preds);
    print!("{}", report_text(&report));
    Ok(())
}

fn export_attention(a: ExportArgs) -> kt_core::Result<()> {
    let (model, cfg) = checkpoint::load(&a.checkpoint)?;
    let log = load_log(&a.data)?;
    let text = if a.average {
        let students = pick_split(&log, &cfg, &a.split)?;
        let maps = students
            .iter()
            .filter(|s| s.interactions.len() >= 2)
            .map(|s| attention_for_student(&model, s))
            .collect::<kt_core::Result<Vec<_>>>()?;
        average_attention_csv(&maps)
    } else {
        let id = a
            .student
            .as_deref()
            .ok_or_else(|| KtError::Config("pass --student ID or --average".into()))?;
        let student = log
            .students
            .iter()
            .find(|s| s.student_id == id)
            .ok_or_else(|| KtError::Data(format!("student `{id}` not in {}", a.data.data.display())))?;
        attention_for_student(&model, student)?.to_csv()
    };
    write(&a.out, &text)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn compare_cmd(a: CompareArgs) -> kt_core::Result<()> {
    let base = TrainConfig::resolve(a.config.config.as_deref(), &a.config.overrides)?;
    let models = a
        .models
        .iter()
        .map(|m| m.trim().parse::<ModelKind>())
        .collect::<kt_core::Result<Vec<_>>>()?;
    let dir = out_dir(&a.out, "compare")?;
    write(&dir.join("config.toml"), &base.to_toml())?;
    let log = load_log(&a.data)?;
    let start = Instant::now();
    let runs = compare(&log, &base, &models, &a.seeds, &mut |r| {
        println!(
            "{} seed {}: auc {} acc {} ({:.0}s elapsed)",
            r.model,
            r.seed,
            fmt_opt(r.auc),
            fmt_opt(r.acc),
            start.elapsed().as_secs_f64()
        );
    })?;
    let summary = summarize(&runs);
    write(&dir.join("runs.csv"), &runs_csv(&runs))?;
    let table = summary_csv(&summary);
    write(&dir.join("summary.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
}

fn report_line(r: &EvalReport) -> String {
    format!("auc {} acc {} over {} predictions", fmt_opt(r.auc), fmt_opt(r.acc), r.predictions)
}

fn report_text(r: &EvalReport) -> String {
    format!(
        "predictions {}\nauc {}\nacc {}\nloss {}\nstudent_mean_auc {} ({} students)\nout_of_vocabulary {}\n",
        r.predictions,
        fmt_opt(r.auc),
        fmt_opt(r.acc),
        fmt_opt(r.loss),
        fmt_opt(r.student_mean_auc),
        r.students_with_auc,
        r.out_of_vocabulary
    )
}
