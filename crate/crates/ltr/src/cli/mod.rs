//! Command-line interface: train, eval, predict, attention, significance,
//! synth, and config-dump subcommands.
//!
//! Exit codes: 0 on success, 1 on runtime errors, 2 on usage errors.

pub mod settings;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::data::{self, Dataset};
use crate::diff::Tensor;
use crate::metrics::{self, MetricReport};
use crate::model::{init_params, parse_encoder_kinds, ScorerVariant};
use crate::objective;
use crate::synth::generate_synthetic;
use crate::train::{self, load_checkpoint, save_checkpoint};

use settings::{NormalizeKind, Settings};

#[derive(Debug, Error)]
pub enum CliError {
    /// Command misuse: missing required inputs, bad flag or config values.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Message(String),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Objective(#[from] objective::ObjectiveError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Checkpoint(#[from] train::CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Parser)]
#[command(
    name = "ltr",
    version,
    about = "Listwise learning to rank with attention-regularized document encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// Flat `key = value` config file; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for generated files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scorer variant: listnet, sa, or rsa.
    #[arg(long)]
    variant: Option<String>,
    /// Active encoder kinds, a subset of "+>-<".
    #[arg(long, allow_hyphen_values = true)]
    encoders: Option<String>,
    /// Feature normalization: none or query-minmax.
    #[arg(long)]
    normalize: Option<String>,
    #[arg(long = "hidden-dim")]
    hidden_dim: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Optimizer: adam or sgd.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "epochs")]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; keeps the checkpoint with the best validation NDCG@10.
    Train {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Checkpoint output path (default: <out>/model.ckpt).
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Score a dataset with a checkpoint and report ERR/NDCG at 1, 3, 5, 10.
    Eval {
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write per-document scores (qid, doc index, score) in input order.
    Predict {
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Export learned and ideal attention matrices for one query.
    Attention {
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        qid: Option<String>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Paired t-test between two per-query metric files.
    Significance {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Generate synthetic LETOR splits (train/valid/test).
    Synth {
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long = "valid-queries")]
        valid_queries: Option<usize>,
        #[arg(long = "test-queries")]
        test_queries: Option<usize>,
        #[arg(long = "docs-per-query")]
        docs_per_query: Option<usize>,
        #[arg(long)]
        features: Option<usize>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Print the effective configuration as `key = value` lines.
    ConfigDump {
        #[command(flatten)]
        common: CommonArgs,
    },
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e @ CliError::Usage(_)) => {
            eprintln!("usage error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train { train, valid, model, common } => {
            let mut s = build_settings(&common)?;
            override_path(&mut s.train_path, train);
            override_path(&mut s.valid_path, valid);
            override_path(&mut s.model_path, model);
            cmd_train(&s)
        }
        Command::Eval { test, model, common } => {
            let mut s = build_settings(&common)?;
            override_path(&mut s.test_path, test);
            override_path(&mut s.model_path, model);
            cmd_eval(&s)
        }
        Command::Predict { test, model, common } => {
            let mut s = build_settings(&common)?;
            override_path(&mut s.test_path, test);
            override_path(&mut s.model_path, model);
            cmd_predict(&s)
        }
        Command::Attention { test, model, qid, common } => {
            let mut s = build_settings(&common)?;
            override_path(&mut s.test_path, test);
            override_path(&mut s.model_path, model);
            if qid.is_some() {
                s.qid = qid;
            }
            cmd_attention(&s)
        }
        Command::Significance { a, b } => cmd_significance(&a, &b),
        Command::Synth { queries, valid_queries, test_queries, docs_per_query, features, common } => {
            let mut s = build_settings(&common)?;
            if let Some(x) = queries {
                s.synth_queries = x;
            }
            if let Some(x) = valid_queries {
                s.synth_valid_queries = x;
            }
            if let Some(x) = test_queries {
                s.synth_test_queries = x;
            }
            if let Some(x) = docs_per_query {
                s.synth_docs_per_query = x;
            }
            if let Some(x) = features {
                s.synth_features = x;
            }
            cmd_synth(&s)
        }
        Command::ConfigDump { common } => {
            let s = build_settings(&common)?;
            print!("{}", s.dump());
            Ok(())
        }
    }
}

fn override_path(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn build_settings(common: &CommonArgs) -> Result<Settings, CliError> {
    let mut s = Settings::default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        s.apply_kv(&text).map_err(CliError::Usage)?;
    }
    if let Some(v) = &common.variant {
        s.variant = ScorerVariant::from_token(v).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(e) = &common.encoders {
        s.encoders = parse_encoder_kinds(e).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(n) = &common.normalize {
        s.normalize = NormalizeKind::from_token(n).map_err(CliError::Usage)?;
    }
    if let Some(o) = &common.optimizer {
        s.optimizer =
            train::OptimizerKind::from_token(o).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(x) = common.seed {
        s.seed = x;
    }
    if let Some(x) = &common.out {
        s.out_dir = Some(x.clone());
    }
    if let Some(x) = common.hidden_dim {
        s.hidden_dim = x;
    }
    if let Some(x) = common.lr {
        s.learning_rate = x;
    }
    if let Some(x) = common.batch_size {
        s.batch_size = x;
    }
    if let Some(x) = common.max_epochs {
        s.max_epochs = x;
    }
    if let Some(x) = common.patience {
        s.patience = x;
    }
    Ok(s)
}

fn require<'a>(slot: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf, CliError> {
    slot.as_ref().ok_or_else(|| CliError::Usage(format!("missing required {flag}")))
}

fn load_dataset(path: &Path, s: &Settings) -> Result<Dataset, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::Message(format!("cannot open {}: {e}", path.display())))?;
    let ds = data::parse_letor(BufReader::new(file))?.with_k_max_floor(s.k_max_floor);
    Ok(match s.normalize {
        NormalizeKind::QueryMinMax => data::normalize_query_minmax(&ds),
        NormalizeKind::None => ds,
    })
}

fn out_dir(s: &Settings) -> PathBuf {
    s.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn cmd_train(s: &Settings) -> Result<(), CliError> {
    let train_path = require(&s.train_path, "--train PATH")?;
    let valid_path = require(&s.valid_path, "--valid PATH")?;
    let train_ds = load_dataset(train_path, s)?;
    let valid_ds = load_dataset(valid_path, s)?;
    if train_ds.num_queries() == 0 {
        return Err(CliError::Message(format!("{} holds no queries", train_path.display())));
    }

    let model_config = s.model_config(train_ds.feature_dim);
    let model = init_params(&model_config)?;
    let (best, history) =
        train::train_with_logger(model, &train_ds, &valid_ds, &s.train_config(), |e| {
            println!(
                "epoch {}\ttrain-loss {:.6}\tvalid-ndcg10 {:.6}\t({:.2}s)",
                e.epoch, e.train_loss, e.valid_ndcg10, e.seconds
            );
        })?;

    let out = out_dir(s);
    fs::create_dir_all(&out)?;
    let model_path = s.model_path.clone().unwrap_or_else(|| out.join("model.ckpt"));
    save_checkpoint(&best, &model_path)?;
    fs::write(out.join("history.tsv"), history.to_tsv())?;
    println!("best epoch {}", history.best_epoch);
    println!("validation ndcg@10 {:.17e}", history.best().valid_ndcg10);
    println!("checkpoint {}", model_path.display());
    println!("history {}", out.join("history.tsv").display());
    Ok(())
}

fn cmd_eval(s: &Settings) -> Result<(), CliError> {
    let model_path = require(&s.model_path, "--model PATH")?;
    let test_path = require(&s.test_path, "--test PATH")?;
    let model = load_checkpoint(model_path)?;
    let ds = load_dataset(test_path, s)?;
    let report = metrics::evaluate(&model, &ds)?;

    let header = MetricReport::header_row();
    let row = report.summary_row(model.config.variant.token());
    println!("{header}");
    println!("{row}");
    if let Some(out) = &s.out_dir {
        fs::create_dir_all(out)?;
        fs::write(out.join("metrics.tsv"), format!("{header}\n{row}\n"))?;
        fs::write(out.join("per_query.tsv"), report.per_query_table())?;
        println!("per-query metrics {}", out.join("per_query.tsv").display());
    }
    Ok(())
}

fn cmd_predict(s: &Settings) -> Result<(), CliError> {
    let model_path = require(&s.model_path, "--model PATH")?;
    let test_path = require(&s.test_path, "--test PATH")?;
    let model = load_checkpoint(model_path)?;
    let ds = load_dataset(test_path, s)?;

    let mut text = String::from("qid\tdoc\tscore\n");
    for group in &ds.groups {
        let scores = model.score_group(group)?;
        for (i, score) in scores.iter().enumerate() {
            text.push_str(&format!("{}\t{}\t{:.17e}\n", group.qid, i, score));
        }
    }
    match &s.out_dir {
        Some(out) => {
            fs::create_dir_all(out)?;
            let path = out.join("predictions.tsv");
            fs::write(&path, text)?;
            println!("predictions {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn write_csv(path: &Path, t: &Tensor) -> Result<(), CliError> {
    let mut text = String::new();
    for i in 0..t.rows() {
        let row: Vec<String> = t.row(i).iter().map(|v| format!("{v:.9}")).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Portable graymap (text PGM), one gray level per attention weight.
fn write_pgm(path: &Path, t: &Tensor) -> Result<(), CliError> {
    let mut text = format!("P2\n{} {}\n255\n", t.cols(), t.rows());
    for i in 0..t.rows() {
        let row: Vec<String> = t
            .row(i)
            .iter()
            .map(|v| ((v * 255.0).round().clamp(0.0, 255.0) as u32).to_string())
            .collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn cmd_attention(s: &Settings) -> Result<(), CliError> {
    let model_path = require(&s.model_path, "--model PATH")?;
    let test_path = require(&s.test_path, "--test PATH")?;
    let qid = s.qid.as_ref().ok_or_else(|| CliError::Usage("missing required --qid".into()))?;

    let model = load_checkpoint(model_path)?;
    if !model.config.variant.uses_encoders() {
        return Err(CliError::Message("the listnet variant has no attention to export".into()));
    }
    let ds = load_dataset(test_path, s)?;
    let group = ds
        .groups
        .iter()
        .find(|g| &g.qid == qid)
        .ok_or_else(|| CliError::Message(format!("unknown qid {qid:?}")))?;

    let (_, sigmas) = model.forward_group(group)?;
    let out = out_dir(s);
    fs::create_dir_all(&out)?;
    for (kind, sigma) in &sigmas {
        let ideal = objective::ideal_attention(&group.relevance, *kind, ds.k_max)?;
        let stem = format!("attention_{qid}_{}", kind.slug());
        write_csv(&out.join(format!("{stem}_learned.csv")), sigma)?;
        write_csv(&out.join(format!("{stem}_ideal.csv")), &ideal.matrix)?;
        write_pgm(&out.join(format!("{stem}_learned.pgm")), sigma)?;
        write_pgm(&out.join(format!("{stem}_ideal.pgm")), &ideal.matrix)?;
        let bce = objective::attention_regularizer(sigma, &ideal)?;
        println!("encoder {} mean-bce {:.6}", kind.symbol(), bce);
    }
    println!("wrote {} matrices to {}", sigmas.len() * 2, out.display());
    Ok(())
}

enum MetricFile {
    /// Per-query table with a qid column and named metric columns.
    PerQuery { qids: Vec<String>, columns: Vec<(String, Vec<f64>)> },
    /// Bare numbers, one per line.
    Plain(Vec<f64>),
}

fn read_metric_file(path: &Path) -> Result<MetricFile, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Message(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let Some(first) = lines.next() else {
        return Err(CliError::Message(format!("{} is empty", path.display())));
    };
    let bad = |line: &str| CliError::Message(format!("{}: bad line {line:?}", path.display()));
    if first.starts_with("qid\t") {
        let names: Vec<String> = first.split('\t').skip(1).map(str::to_string).collect();
        let mut qids = Vec::new();
        let mut columns: Vec<(String, Vec<f64>)> =
            names.into_iter().map(|n| (n, Vec::new())).collect();
        for line in lines {
            let mut parts = line.split('\t');
            qids.push(parts.next().ok_or_else(|| bad(line))?.to_string());
            for (ci, tok) in parts.enumerate() {
                let col = columns.get_mut(ci).ok_or_else(|| bad(line))?;
                col.1.push(tok.parse().map_err(|_| bad(line))?);
            }
        }
        Ok(MetricFile::PerQuery { qids, columns })
    } else {
        let mut values = vec![first.trim().parse().map_err(|_| bad(first))?];
        for line in lines {
            values.push(line.trim().parse().map_err(|_| bad(line))?);
        }
        Ok(MetricFile::Plain(values))
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

fn cmd_significance(a_path: &Path, b_path: &Path) -> Result<(), CliError> {
    let a = read_metric_file(a_path)?;
    let b = read_metric_file(b_path)?;
    println!("metric\tmean_a\tmean_b\tdiff\tt\tdf\tp");
    match (a, b) {
        (MetricFile::Plain(a), MetricFile::Plain(b)) => {
            let r = metrics::paired_t_test(&a, &b)?;
            println!(
                "values\t{:.6}\t{:.6}\t{:+.6}\t{:.4}\t{}\t{:.6}",
                mean(&a),
                mean(&b),
                mean(&a) - mean(&b),
                r.t,
                r.df,
                r.p
            );
        }
        (
            MetricFile::PerQuery { qids: qa, columns: ca },
            MetricFile::PerQuery { qids: qb, columns: cb },
        ) => {
            if qa != qb {
                return Err(CliError::Message(
                    "the two files cover different qid sequences".into(),
                ));
            }
            if ca.len() != cb.len() {
                return Err(CliError::Message(format!(
                    "column count mismatch: {} vs {}",
                    ca.len(),
                    cb.len()
                )));
            }
            for ((name_a, va), (name_b, vb)) in ca.iter().zip(&cb) {
                if name_a != name_b {
                    return Err(CliError::Message(format!(
                        "column mismatch: {name_a} vs {name_b}"
                    )));
                }
                let r = metrics::paired_t_test(va, vb)?;
                println!(
                    "{name_a}\t{:.6}\t{:.6}\t{:+.6}\t{:.4}\t{}\t{:.6}",
                    mean(va),
                    mean(vb),
                    mean(va) - mean(vb),
                    r.t,
                    r.df,
                    r.p
                );
            }
        }
        _ => {
            return Err(CliError::Message(
                "cannot mix a per-query table with a plain value file".into(),
            ))
        }
    }
    Ok(())
}

fn cmd_synth(s: &Settings) -> Result<(), CliError> {
    let out = require(&s.out_dir, "--out DIR")?;
    let total = s.synth_queries + s.synth_valid_queries + s.synth_test_queries;
    if total == 0 {
        return Err(CliError::Usage("nothing to generate: all split sizes are zero".into()));
    }
    let ds = generate_synthetic(s.seed, total, s.synth_docs_per_query, s.synth_features);
    fs::create_dir_all(out)?;
    let mut start = 0usize;
    for (name, count) in [
        ("train.txt", s.synth_queries),
        ("valid.txt", s.synth_valid_queries),
        ("test.txt", s.synth_test_queries),
    ] {
        if count == 0 {
            continue;
        }
        let part = ds.slice_groups(start, count);
        start += count;
        let path = out.join(name);
        fs::write(&path, data::serialize_letor(&part))?;
        let stats = data::dataset_stats(&part);
        println!(
            "{}: {} queries, {} documents, avg {:.2} docs/query, grades {:?}",
            path.display(),
            stats.num_queries,
            stats.num_documents,
            stats.avg_docs_per_query,
            stats.grade_histogram
        );
    }
    Ok(())
}
