//! `hashprint` command line: data generation, training, adaptation,
//! inference, evaluation, store maintenance and the leave-classes-out
//! experiment. Machine-readable JSON goes to stdout, progress to stderr.

mod records;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hashprint::datagen::{generate_split, SyntheticSpec};
use hashprint::pipeline::{
    evaluate, leave_k_out_experiment, run_adaptation_stage, run_inference_stage, run_training_stage_with,
    DatasetSplit, PipelineConfig, TrainedModel,
};
use hashprint::store::HashStore;
use hashprint::write_atomic;
use serde::de::DeserializeOwned;
use serde_json::json;
use sha2::{Digest, Sha256};

use records::{read_predictions, read_samples, to_jsonl, PredictionRecord, SampleRecord};

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<hashprint::Error> for CliError {
    fn from(e: hashprint::Error) -> Self {
        let code = if matches!(e, hashprint::Error::NonFinite(_)) { 3 } else { 2 };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "hashprint", version, about = "Detect and attribute generated content with embedding digests")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/test1/test2/pool JSONL files).
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the embedder and build the digest store.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        /// Unlabelled pool for pseudo-labelling.
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        store: PathBuf,
    },
    /// Add a new class to a store without touching the model.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long = "class")]
        class_name: String,
        #[arg(long)]
        exemplars: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify every record of a dataset file.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Score predictions against a labelled dataset file.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value = "human")]
        human_label: String,
    },
    /// Train without some classes, then add them back from exemplars.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test1: PathBuf,
        #[arg(long)]
        test2: Option<PathBuf>,
        #[arg(long)]
        pool: Option<PathBuf>,
        /// Comma-separated class names; empty trains on everything.
        #[arg(long, default_value = "")]
        exclude: String,
        #[arg(long, default_value_t = 50)]
        exemplars: usize,
    },
    /// Inspect or prune a digest store.
    Store {
        #[command(subcommand)]
        action: StoreAction,
    },
}

#[derive(Subcommand)]
enum StoreAction {
    Inspect {
        #[arg(long)]
        store: PathBuf,
    },
    Prune {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        retention: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn print(value: serde_json::Value) {
    println!("{value}");
}

fn store_stats(store: &HashStore) -> serde_json::Value {
    let counts: BTreeMap<&str, usize> = store
        .labels()
        .iter()
        .map(String::as_str)
        .zip(store.class_counts())
        .collect();
    json!({
        "entries": store.len(),
        "dim": store.dim(),
        "labels": store.labels(),
        "class_counts": counts,
        "size_bits": store.size_bits(),
    })
}

fn load_config(path: &Path) -> CliResult<PipelineConfig> {
    let cfg: PipelineConfig = read_json(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(config: &Path, out_dir: &Path) -> CliResult {
    let spec: SyntheticSpec = read_json(config)?;
    spec.validate()?;
    let split = generate_split(&spec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::data(format!("{}: {e}", out_dir.display())))?;
    let files = [
        ("train", &split.train_labeled),
        ("test1", &split.test_clean),
        ("test2", &split.test_augmented),
        ("pool", &split.unlabeled_pool),
    ];
    let mut counts = BTreeMap::new();
    for (name, samples) in files {
        let path = out_dir.join(format!("{name}.jsonl"));
        write_atomic(&path, &to_jsonl(samples.iter().map(SampleRecord::from_sample)))?;
        counts.insert(name, samples.len());
    }
    print(json!({ "records": counts }));
    Ok(())
}

fn train(config: &Path, train: &Path, pool: Option<&Path>, model_out: &Path, store_out: &Path) -> CliResult {
    let cfg = load_config(config)?;
    let train_samples = read_samples(train)?;
    let pool_samples = pool.map(read_samples).transpose()?.unwrap_or_default();
    let data = DatasetSplit::new(train_samples, Vec::new(), Vec::new(), pool_samples);
    data.validate()?;
    let outcome = run_training_stage_with(&data, &cfg, |e| {
        eprintln!(
            "epoch {:>3}  loss {:.6}  acc {:.4}  pseudo {}",
            e.epoch + 1,
            e.mean_loss,
            e.accuracy,
            e.pseudo_count
        );
    })?;
    outcome.model.save(model_out)?;
    outcome.store.save(store_out)?;
    print(json!({
        "epochs": outcome.epochs,
        "model_sha256": sha256_hex(&outcome.model.to_bytes()),
        "store": store_stats(&outcome.store),
    }));
    Ok(())
}

fn adapt(model: &Path, store: &Path, class_name: &str, exemplars: &Path, out: &Path) -> CliResult {
    let before = sha256_hex(&read_bytes(model)?);
    let trained = TrainedModel::from_bytes(&read_bytes(model)?)?;
    let mut db = HashStore::from_bytes(&read_bytes(store)?)?;
    let samples = read_samples(exemplars)?;
    let added = run_adaptation_stage(&trained, &mut db, class_name, &samples)?;
    db.save(out)?;
    let after = sha256_hex(&read_bytes(model)?);
    print(json!({
        "class": class_name,
        "added": added,
        "model_sha256_before": before,
        "model_sha256_after": after,
        "store": store_stats(&db),
    }));
    Ok(())
}

fn infer(model: &Path, store: &Path, input: &Path, out: &Path, k: usize) -> CliResult {
    let trained = TrainedModel::load(model)?;
    let db = HashStore::load(store)?;
    let samples = read_samples(input)?;
    let preds = if samples.is_empty() {
        Vec::new()
    } else {
        run_inference_stage(&trained, &db, &samples, k)?
    };
    let records = samples.iter().zip(preds).map(|(s, p)| PredictionRecord {
        id: s.id.clone(),
        label: p.label,
        confidence: p.confidence,
    });
    write_atomic(out, &to_jsonl(records))?;
    print(json!({ "predictions": samples.len() }));
    Ok(())
}

fn eval(predictions: &Path, truth: &Path, human_label: &str) -> CliResult {
    let preds = read_predictions(predictions)?;
    let truth = read_samples(truth)?;
    let mut by_id = BTreeMap::new();
    for p in &preds {
        if by_id.insert(p.id.as_str(), p.label.as_str()).is_some() {
            return Err(CliError::data(format!("duplicate prediction id {:?}", p.id)));
        }
    }
    let truth_ids: HashSet<&str> = truth.iter().map(|s| s.id.as_str()).collect();
    if truth_ids.len() != truth.len() || truth_ids.len() != by_id.len() || !by_id.keys().all(|id| truth_ids.contains(id))
    {
        return Err(CliError::data("prediction ids and truth ids differ"));
    }
    let mut predicted = Vec::with_capacity(truth.len());
    let mut actual = Vec::with_capacity(truth.len());
    for s in &truth {
        let label = s
            .label
            .as_deref()
            .ok_or_else(|| CliError::data(format!("truth record {:?} has no label", s.id)))?;
        predicted.push(by_id[s.id.as_str()]);
        actual.push(label);
    }
    let metrics = evaluate(&predicted, &actual, human_label)?;
    print(serde_json::to_value(metrics).expect("metrics serialize"));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn experiment(
    config: &Path,
    train: &Path,
    test1: &Path,
    test2: Option<&Path>,
    pool: Option<&Path>,
    exclude: &str,
    exemplars: usize,
) -> CliResult {
    let cfg = load_config(config)?;
    let excluded: Vec<String> = exclude
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect();
    let data = DatasetSplit::new(
        read_samples(train)?,
        read_samples(test1)?,
        test2.map(read_samples).transpose()?.unwrap_or_default(),
        pool.map(read_samples).transpose()?.unwrap_or_default(),
    );
    data.validate()?;
    eprintln!("training without {excluded:?}");
    let report = leave_k_out_experiment(&data, &cfg, &excluded, exemplars)?;
    print(serde_json::to_value(report).expect("report serializes"));
    Ok(())
}

fn store_cmd(action: &StoreAction) -> CliResult {
    match action {
        StoreAction::Inspect { store } => {
            print(store_stats(&HashStore::load(store)?));
        }
        StoreAction::Prune { store, retention, out } => {
            let db = HashStore::load(store)?;
            let pruned = db.prune(*retention)?;
            pruned.save(out)?;
            print(json!({ "before": store_stats(&db), "after": store_stats(&pruned) }));
        }
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::GenData { config, out_dir } => gen_data(config, out_dir),
        Command::Train {
            config,
            train: t,
            pool,
            model,
            store,
        } => train(config, t, pool.as_deref(), model, store),
        Command::Adapt {
            model,
            store,
            class_name,
            exemplars,
            out,
        } => adapt(model, store, class_name, exemplars, out),
        Command::Infer {
            model,
            store,
            input,
            out,
            k,
        } => infer(model, store, input, out, *k),
        Command::Eval {
            predictions,
            truth,
            human_label,
        } => eval(predictions, truth, human_label),
        Command::Experiment {
            config,
            train: t,
            test1,
            test2,
            pool,
            exclude,
            exemplars,
        } => experiment(config, t, test1, test2.as_deref(), pool.as_deref(), exclude, *exemplars),
        Command::Store { action } => store_cmd(action),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            // help and version go to stdout, usage errors to stderr
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
