//! Subcommand implementations and artifact writing.

use std::io::Write;
use std::path::{Path, PathBuf};

use icnn_metric::episodes::{LabeledDataset, Split};
use icnn_metric::icnn;
use icnn_metric::trainer::{self, RunMetrics};
use icnn_metric::Error as CoreError;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checks::{self, CheckProfile};
use crate::config::{ConfigError, RunConfig};

/// Process failure carrying the exit code: 1 runtime, 2 config, 3 data.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn runtime(msg: impl Into<String>) -> Self {
        Failure { code: 1, message: msg.into() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Failure { code: 2, message: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Failure { code: 3, message: msg.into() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::config(e.to_string())
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Data(_) => Failure::data(e.to_string()),
            other => Failure::runtime(other.to_string()),
        }
    }
}

fn io_runtime(e: std::io::Error, what: &str) -> Failure {
    Failure::runtime(format!("{what}: {e}"))
}

/// Build the dataset named by the config and apply its class split.
pub fn build_dataset(cfg: &RunConfig) -> Result<LabeledDataset, Failure> {
    let mut ds = match cfg.dataset.kind.as_str() {
        "synth" => LabeledDataset::synth_gaussian(
            cfg.dataset.seed,
            cfg.dataset.n_classes,
            cfg.dataset.per_class,
            cfg.dataset.dim,
            cfg.dataset.center_sep,
            cfg.dataset.noise_sigma,
        )
        .map_err(|e| Failure::data(e.to_string()))?,
        "csv" => {
            let path = cfg.dataset.path.as_ref().expect("validated");
            LabeledDataset::load_csv(Path::new(path)).map_err(|e| Failure::data(e.to_string()))?
        }
        _ => unreachable!("validated"),
    };
    let total = ds.n_classes();
    let (tr, va, te) = (
        cfg.dataset.train_classes,
        cfg.dataset.val_classes,
        cfg.dataset.test_classes,
    );
    if tr + va + te != total {
        return Err(Failure::data(format!(
            "class split {tr}+{va}+{te} does not cover the {total} dataset classes"
        )));
    }
    ds.split_classes(cfg.dataset.split_seed, tr, va, te)
        .map_err(|e| Failure::data(e.to_string()))?;
    Ok(ds)
}

fn dataset_digest(ds: &LabeledDataset) -> String {
    let mut h = Sha256::new();
    for v in ds.features().data() {
        h.update(v.to_le_bytes());
    }
    for &l in ds.labels() {
        h.update((l as u64).to_le_bytes());
    }
    format!("sha256:{:x}", h.finalize())
}

#[derive(Serialize)]
struct DatasetManifest {
    kind: String,
    digest: String,
    rows: usize,
    dim: usize,
    classes: usize,
    train_classes: usize,
    val_classes: usize,
    test_classes: usize,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool_version: &'static str,
    seed: u64,
    config: &'a RunConfig,
    dataset: DatasetManifest,
    outputs: Vec<String>,
}

fn write_manifest(
    dir: &Path,
    cfg: &RunConfig,
    ds: &LabeledDataset,
    outputs: &[&str],
) -> Result<(), Failure> {
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.train.seed,
        config: cfg,
        dataset: DatasetManifest {
            kind: cfg.dataset.kind.clone(),
            digest: dataset_digest(ds),
            rows: ds.n(),
            dim: ds.dim(),
            classes: ds.n_classes(),
            train_classes: ds.classes_in(Split::Train).len(),
            val_classes: ds.classes_in(Split::Val).len(),
            test_classes: ds.classes_in(Split::Test).len(),
        },
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Failure::runtime(format!("manifest serialization: {e}")))?;
    std::fs::write(dir.join("manifest.json"), json + "\n")
        .map_err(|e| io_runtime(e, "writing manifest.json"))?;
    Ok(())
}

fn write_metrics_jsonl(dir: &Path, metrics: &RunMetrics) -> Result<(), Failure> {
    let mut out = String::new();
    for rec in &metrics.epochs {
        out.push_str(
            &serde_json::to_string(rec)
                .map_err(|e| Failure::runtime(format!("metrics serialization: {e}")))?,
        );
        out.push('\n');
    }
    #[derive(Serialize)]
    struct FinalLine<'a> {
        #[serde(rename = "final")]
        final_metrics: &'a Option<icnn_metric::trainer::FinalMetrics>,
        warnings: &'a [String],
    }
    out.push_str(
        &serde_json::to_string(&FinalLine {
            final_metrics: &metrics.final_metrics,
            warnings: &metrics.warnings,
        })
        .map_err(|e| Failure::runtime(format!("metrics serialization: {e}")))?,
    );
    out.push('\n');
    std::fs::write(dir.join("metrics.jsonl"), out)
        .map_err(|e| io_runtime(e, "writing metrics.jsonl"))?;
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<(), Failure> {
    let train_cfg = cfg.train_config()?;
    let ds = build_dataset(cfg)?;
    let dir = out_dir.map(PathBuf::from).unwrap_or_else(|| cfg.out_dir());
    std::fs::create_dir_all(&dir).map_err(|e| io_runtime(e, "creating the run directory"))?;

    let (enc, mut metrics) = trainer::train(&ds, &train_cfg)?;
    let eval = trainer::evaluate_jobs(
        &enc,
        &ds,
        Split::Test,
        &train_cfg.episode,
        train_cfg.eval_tasks,
        train_cfg.seed,
        train_cfg.jobs,
    )?;
    metrics.final_metrics = Some(icnn_metric::trainer::FinalMetrics {
        test_accuracy: eval.mean_accuracy,
        ci95: eval.ci95,
        eval_tasks: train_cfg.eval_tasks,
        best_epoch: metrics.best_epoch,
    });

    write_manifest(
        &dir,
        cfg,
        &ds,
        &["metrics.jsonl", "checkpoint.txt", "embeddings.csv"],
    )?;
    write_metrics_jsonl(&dir, &metrics)?;
    enc.save(&dir.join("checkpoint.txt"))?;

    let points = trainer::dump_eval_embeddings(
        &enc,
        &ds,
        Split::Test,
        &train_cfg.episode,
        train_cfg.seed,
        cfg.output.embed_rows,
    )?;
    let mut emb_csv = String::from("task,label");
    for i in 0..enc.output_dim() {
        emb_csv.push_str(&format!(",e{i}"));
    }
    emb_csv.push('\n');
    for p in &points {
        emb_csv.push_str(&format!("{},{}", p.task, p.label));
        for v in &p.coords {
            emb_csv.push_str(&format!(",{v}"));
        }
        emb_csv.push('\n');
    }
    std::fs::write(dir.join("embeddings.csv"), emb_csv)
        .map_err(|e| io_runtime(e, "writing embeddings.csv"))?;

    println!(
        "test accuracy {:.4} ± {:.4} over {} tasks (best epoch {}, {:.1}s train)",
        eval.mean_accuracy,
        eval.ci95,
        train_cfg.eval_tasks,
        metrics.best_epoch,
        metrics.wall_clock_secs
    );
    for w in &metrics.warnings {
        eprintln!("warning: {w}");
    }
    println!("artifacts in {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct ScorePoint {
    index: usize,
    label: String,
    lambda: f64,
    omega: f64,
    gamma: f64,
}

#[derive(Serialize)]
struct ScoreOutput {
    score: f64,
    loss: f64,
    k1: usize,
    k2: usize,
    points: Vec<ScorePoint>,
    warnings: Vec<String>,
}

pub fn cmd_score(csv_path: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    let icnn_cfg = cfg.icnn_config()?;
    let ds = LabeledDataset::load_csv(csv_path).map_err(|e| Failure::data(e.to_string()))?;
    let (terms, score) = icnn::icnn_score(ds.features(), ds.labels(), &icnn_cfg)?;
    let out = ScoreOutput {
        score,
        loss: terms.loss,
        k1: terms.k1,
        k2: terms.k2,
        points: (0..ds.n())
            .map(|i| ScorePoint {
                index: i,
                label: ds.label_name(ds.labels()[i]).to_string(),
                lambda: terms.lambda[i],
                omega: terms.omega[i],
                gamma: terms.gamma[i],
            })
            .collect(),
        warnings: terms.warnings.clone(),
    };
    let json = serde_json::to_string_pretty(&out)
        .map_err(|e| Failure::runtime(format!("score serialization: {e}")))?;
    println!("{json}");
    Ok(())
}

pub struct CheckArgs {
    pub filter: Option<String>,
    pub inject_fault: Option<String>,
    pub full_profile: bool,
    pub grad_seeds: Option<u64>,
}

pub fn cmd_check(args: &CheckArgs) -> Result<(), Failure> {
    let mut profile = if args.full_profile { CheckProfile::full() } else { CheckProfile::quick() };
    if let Some(s) = args.grad_seeds {
        profile.grad_seeds = s;
    }
    let outcomes = checks::run_checks(
        args.filter.as_deref(),
        args.inject_fault.as_deref(),
        &profile,
    );
    if outcomes.is_empty() {
        return Err(Failure::config(format!(
            "no checks match filter {:?}",
            args.filter.as_deref().unwrap_or("")
        )));
    }
    let name_w = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(10);
    let mut all_pass = true;
    for o in &outcomes {
        println!(
            "{:<w$}  {}  {}",
            o.name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            w = name_w
        );
        all_pass &= o.pass;
    }
    if all_pass {
        Ok(())
    } else {
        Err(Failure::runtime("one or more checks failed"))
    }
}

pub fn cmd_ablate(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<(), Failure> {
    let train_cfg = cfg.train_config()?;
    let ds = build_dataset(cfg)?;
    let dir = out_dir.map(PathBuf::from).unwrap_or_else(|| cfg.out_dir());
    std::fs::create_dir_all(&dir).map_err(|e| io_runtime(e, "creating the run directory"))?;

    let rows = trainer::run_ablation_grid(&ds, &train_cfg);
    let mut csv = String::from("setting,description,ways,shots,mean_accuracy,ci95,error\n");
    for r in &rows {
        let acc = r.mean_accuracy.map_or(String::new(), |v| format!("{v:.6}"));
        let ci = r.ci95.map_or(String::new(), |v| format!("{v:.6}"));
        let err = r.error.clone().unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.setting, r.description, r.ways, r.shots, acc, ci, err
        ));
        let shown = if let Some(a) = r.mean_accuracy {
            format!("{a:.4} ± {:.4}", r.ci95.unwrap_or(0.0))
        } else {
            format!("failed: {err}")
        };
        println!("({}) {:<50} {}", r.setting, r.description, shown);
    }
    std::fs::write(dir.join("ablation.csv"), csv)
        .map_err(|e| io_runtime(e, "writing ablation.csv"))?;
    write_manifest(&dir, cfg, &ds, &["ablation.csv"])?;
    println!("ablation table in {}", dir.join("ablation.csv").display());
    Ok(())
}

/// Write output through a buffered handle (stdout can be a pipe in tests).
pub fn flush_stdout() {
    let _ = std::io::stdout().flush();
}
