//! Episodic training and evaluation: per task, encode support and query in
//! one batch, form prototypes, combine the enabled loss terms, and take one
//! optimizer step; evaluate on fresh tasks with a frozen encoder.

use std::time::Instant;

use crate::encoder::{encoder_init, MlpEncoder, OptimizerState};
use crate::episodes::{sample_task, task_rng, EpisodeSpec, LabeledDataset, RngStream, Split};
use crate::error::{Error, Result};
use crate::icnn::{self, IcnnConfig, TaskEmbeddings};
use crate::protonet;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::triplet::{self, TripletConfig};

/// Enabled loss terms and their weights.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossCombo {
    pub cross_entropy: Option<f64>,
    pub proto_triplet: Option<f64>,
    pub icnn: Option<f64>,
}

impl LossCombo {
    pub fn cross_entropy_only() -> Self {
        LossCombo { cross_entropy: Some(1.0), proto_triplet: None, icnn: None }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [self.cross_entropy, self.proto_triplet, self.icnn];
        if weights.iter().all(Option::is_none) {
            return Err(Error::invalid("loss combo must enable at least one term"));
        }
        if weights.iter().flatten().any(|&w| w < 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if weights.iter().flatten().all(|&w| w == 0.0) {
            return Err(Error::invalid("loss weights must not all be zero"));
        }
        Ok(())
    }
}

impl Default for LossCombo {
    /// Cross-entropy + proto-triplet + full-data separability loss, each
    /// weighted 1.
    fn default() -> Self {
        LossCombo {
            cross_entropy: Some(1.0),
            proto_triplet: Some(1.0),
            icnn: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam { learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64 },
    SgdMomentum { learning_rate: f64, momentum: f64 },
}

impl OptimizerConfig {
    pub fn adam_default() -> Self {
        OptimizerConfig::Adam { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    /// The momentum preset: lr 1e-4, momentum 0.9.
    pub fn sgd_preset() -> Self {
        OptimizerConfig::SgdMomentum { learning_rate: 1e-4, momentum: 0.9 }
    }

    pub fn base_learning_rate(&self) -> f64 {
        match self {
            OptimizerConfig::Adam { learning_rate, .. } => *learning_rate,
            OptimizerConfig::SgdMomentum { learning_rate, .. } => *learning_rate,
        }
    }

    fn build(&self, enc: &MlpEncoder) -> OptimizerState {
        match *self {
            OptimizerConfig::Adam { learning_rate, beta1, beta2, epsilon } => {
                OptimizerState::adam(enc, learning_rate, beta1, beta2, epsilon)
            }
            OptimizerConfig::SgdMomentum { learning_rate, momentum } => {
                OptimizerState::sgd_momentum(enc, learning_rate, momentum)
            }
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainConfig {
    pub episode: EpisodeSpec,
    pub epochs: usize,
    pub tasks_per_epoch: usize,
    pub val_tasks: usize,
    pub eval_tasks: usize,
    pub seed: u64,
    pub losses: LossCombo,
    pub icnn: IcnnConfig,
    pub triplet: TripletConfig,
    pub optimizer: OptimizerConfig,
    /// Halve the learning rate every this many epochs (0 disables decay).
    pub lr_step: usize,
    /// Hidden/output layer widths appended to the input dim; `None` gives
    /// input -> 64 -> 64 -> 32.
    pub encoder_dims: Option<Vec<usize>>,
    /// Worker threads for evaluation (1 = sequential; never changes results).
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episode: EpisodeSpec { ways: 5, shots: 5, queries_per_class: 15 },
            epochs: 200,
            tasks_per_epoch: 100,
            val_tasks: 500,
            eval_tasks: 1000,
            seed: 0,
            losses: LossCombo::default(),
            icnn: IcnnConfig::default(),
            triplet: TripletConfig::default(),
            optimizer: OptimizerConfig::adam_default(),
            lr_step: 20,
            encoder_dims: None,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    pub fn resolve_encoder_dims(&self, input_dim: usize) -> Vec<usize> {
        match &self.encoder_dims {
            Some(hidden) => {
                let mut dims = vec![input_dim];
                dims.extend(hidden);
                dims
            }
            None => vec![input_dim, 64, 64, 32],
        }
    }

    fn validate_against(&self, ds: &LabeledDataset) -> Result<Split> {
        self.losses.validate()?;
        self.icnn.validate()?;
        self.triplet.validate(self.episode.ways)?;
        if self.tasks_per_epoch == 0 && self.epochs > 0 {
            return Err(Error::invalid("tasks_per_epoch must be positive"));
        }
        if self.jobs == 0 {
            return Err(Error::invalid("jobs must be at least 1"));
        }
        let need = self.episode.shots + self.episode.queries_per_class;
        let check_split = |split: Split| -> Result<()> {
            let classes = ds.classes_in(split);
            if classes.len() < self.episode.ways {
                return Err(Error::data(format!(
                    "{split:?} split has {} classes, episode needs {}",
                    classes.len(),
                    self.episode.ways
                )));
            }
            if ds.min_class_size(split) < need {
                return Err(Error::data(format!(
                    "{split:?} split has a class with fewer than {need} rows"
                )));
            }
            Ok(())
        };
        check_split(Split::Train)?;
        // validation falls back to fresh train-split tasks when no val classes
        let val_split = if ds.classes_in(Split::Val).len() >= self.episode.ways
            && ds.min_class_size(Split::Val) >= need
        {
            Split::Val
        } else {
            Split::Train
        };
        Ok(val_split)
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss_total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_cross_entropy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_proto_triplet: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_icnn: Option<f64>,
    pub val_accuracy: f64,
}

/// Final evaluation summary attached after testing.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FinalMetrics {
    pub test_accuracy: f64,
    pub ci95: f64,
    pub eval_tasks: usize,
    pub best_epoch: usize,
}

/// Training/evaluation metrics of one run. The wall clock is never
/// serialized: rerunning an identical config must reproduce identical bytes.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunMetrics {
    pub epochs: Vec<EpochRecord>,
    #[serde(rename = "final")]
    pub final_metrics: Option<FinalMetrics>,
    pub best_epoch: usize,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Evaluation outcome over a task stream.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub per_task: Vec<f64>,
}

/// Mean and 95% confidence half-width 1.96·σ/√n with population σ.
pub fn mean_ci(accs: &[f64]) -> (f64, f64) {
    if accs.is_empty() {
        return (0.0, 0.0);
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

fn stack_task_batch(support: &Tensor, query: &Tensor) -> Result<Tensor> {
    let (ns, d) = support.dims2()?;
    let (nq, d2) = query.dims2()?;
    if d != d2 {
        return Err(Error::ShapeMismatch {
            op: "task batch",
            lhs: support.shape().to_vec(),
            rhs: query.shape().to_vec(),
        });
    }
    let mut data = Vec::with_capacity((ns + nq) * d);
    data.extend_from_slice(support.data());
    data.extend_from_slice(query.data());
    Tensor::matrix(ns + nq, d, data)
}

/// Forward values of per-term losses for one task, plus the gradient step.
struct TaskStep {
    total: f64,
    cross_entropy: Option<f64>,
    proto_triplet: Option<f64>,
    icnn: Option<f64>,
    warnings: Vec<String>,
}

fn train_task_step(
    enc: &mut MlpEncoder,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    support_x: &Tensor,
    support_y: &[usize],
    query_x: &Tensor,
    query_y: &[usize],
) -> Result<TaskStep> {
    let ways = cfg.episode.ways;
    let batch = stack_task_batch(support_x, query_x)?;
    let n_support = support_x.shape()[0];
    let n = batch.shape()[0];

    let mut tape = Tape::new();
    let pass = enc.encode(&mut tape, &batch)?;
    let sup = tape.gather_rows(pass.output, &(0..n_support).collect::<Vec<_>>())?;
    let qry = tape.gather_rows(pass.output, &(n_support..n).collect::<Vec<_>>())?;
    let protos = protonet::compute_prototypes(&mut tape, sup, support_y, ways)?;

    let mut total = None;
    let mut ce_val = None;
    let mut pt_val = None;
    let mut icnn_val = None;
    let mut warnings = Vec::new();
    let add_term = |tape: &mut Tape, term, w: f64, total: &mut Option<crate::tape::Var>| {
        let scaled = tape.scale(term, w)?;
        *total = Some(match *total {
            None => scaled,
            Some(t) => tape.add(t, scaled)?,
        });
        Ok::<(), Error>(())
    };

    if let Some(w) = cfg.losses.cross_entropy {
        let logits = protonet::classify(&mut tape, qry, protos)?;
        let ce = protonet::cross_entropy(&mut tape, logits, query_y)?;
        ce_val = Some(tape.value(ce).item());
        add_term(&mut tape, ce, w, &mut total)?;
    }
    if let Some(w) = cfg.losses.proto_triplet {
        let pt = triplet::task_proto_triplet(&mut tape, qry, query_y, protos, &cfg.triplet)?;
        pt_val = Some(tape.value(pt).item());
        add_term(&mut tape, pt, w, &mut total)?;
    }
    if let Some(w) = cfg.losses.icnn {
        let te = TaskEmbeddings {
            all: pass.output,
            support_rows: (0..n_support).collect(),
            query_rows: (n_support..n).collect(),
            support_y: support_y.to_vec(),
            query_y: query_y.to_vec(),
        };
        let task_icnn = icnn::icnn_task_loss(&mut tape, &te, Some(protos), &cfg.icnn)?;
        icnn_val = Some(tape.value(task_icnn.loss).item());
        for (_, part) in &task_icnn.parts {
            warnings.extend(part.terms.warnings.iter().cloned());
        }
        add_term(&mut tape, task_icnn.loss, w, &mut total)?;
    }

    let total = total.expect("validated combo has at least one term");
    let total_val = tape.value(total).item();
    let grads = tape.backward(total)?;
    opt.apply_update(enc, &grads, &pass)?;
    Ok(TaskStep {
        total: total_val,
        cross_entropy: ce_val,
        proto_triplet: pt_val,
        icnn: icnn_val,
        warnings,
    })
}

/// Accuracy of a frozen encoder on one sampled task.
fn task_accuracy(
    enc: &MlpEncoder,
    ds: &LabeledDataset,
    split: Split,
    spec: &EpisodeSpec,
    seed: u64,
    stream: RngStream,
    epoch: u64,
    index: u64,
) -> Result<f64> {
    let mut rng = task_rng(seed, stream, epoch, index);
    let task = sample_task(ds, split, spec, &mut rng)?;
    let sup_emb = enc.encode_values(&task.support_x)?;
    let qry_emb = enc.encode_values(&task.query_x)?;
    let protos = protonet::prototypes_values(&sup_emb, &task.support_y, spec.ways)?;
    let logits = protonet::classify_values(&qry_emb, &protos)?;
    Ok(protonet::accuracy(&logits, &task.query_y))
}

fn accuracy_over_tasks(
    enc: &MlpEncoder,
    ds: &LabeledDataset,
    split: Split,
    spec: &EpisodeSpec,
    n_tasks: usize,
    seed: u64,
    stream: RngStream,
    epoch: u64,
    jobs: usize,
) -> Result<Vec<f64>> {
    if jobs <= 1 || n_tasks < 2 {
        return (0..n_tasks)
            .map(|i| task_accuracy(enc, ds, split, spec, seed, stream, epoch, i as u64))
            .collect();
    }
    // frozen encoder clones per worker; results are ordered by task index so
    // parallelism never changes the output
    let chunk = n_tasks.div_ceil(jobs);
    let mut out = vec![0.0; n_tasks];
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for (w, slot) in out.chunks_mut(chunk).enumerate() {
            let enc = enc.clone();
            let start = w * chunk;
            handles.push(scope.spawn(move || -> Result<()> {
                for (off, cell) in slot.iter_mut().enumerate() {
                    *cell = task_accuracy(
                        &enc,
                        ds,
                        split,
                        spec,
                        seed,
                        stream,
                        epoch,
                        (start + off) as u64,
                    )?;
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("evaluation worker panicked")?;
        }
        Ok(())
    })?;
    Ok(out)
}

/// Episodic training. Returns the best-validation-epoch encoder and the
/// per-epoch metrics (final test metrics are attached by `evaluate`).
pub fn train(ds: &LabeledDataset, cfg: &TrainConfig) -> Result<(MlpEncoder, RunMetrics)> {
    let started = Instant::now();
    let val_split = cfg.validate_against(ds)?;
    let dims = cfg.resolve_encoder_dims(ds.dim());
    let mut enc = encoder_init(crate::episodes::mix64(&[cfg.seed, 0x656e_63]), &dims)?;
    let mut opt = cfg.optimizer.build(&enc);
    let base_lr = cfg.optimizer.base_learning_rate();

    let mut best = enc.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut warnings: Vec<String> = Vec::new();

    for epoch in 0..cfg.epochs {
        if cfg.lr_step > 0 {
            opt.set_learning_rate(base_lr * 0.5f64.powi((epoch / cfg.lr_step) as i32));
        }
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for idx in 0..cfg.tasks_per_epoch {
            let mut rng = task_rng(cfg.seed, RngStream::Train, epoch as u64, idx as u64);
            let task = sample_task(ds, Split::Train, &cfg.episode, &mut rng)?;
            let step = train_task_step(
                &mut enc,
                &mut opt,
                cfg,
                &task.support_x,
                &task.support_y,
                &task.query_x,
                &task.query_y,
            )?;
            sums.0 += step.total;
            sums.1 += step.cross_entropy.unwrap_or(0.0);
            sums.2 += step.proto_triplet.unwrap_or(0.0);
            sums.3 += step.icnn.unwrap_or(0.0);
            for w in step.warnings {
                if !warnings.contains(&w) {
                    warnings.push(w);
                }
            }
        }
        let nt = cfg.tasks_per_epoch as f64;
        let val_accs = accuracy_over_tasks(
            &enc,
            ds,
            val_split,
            &cfg.episode,
            cfg.val_tasks,
            cfg.seed,
            RngStream::Val,
            epoch as u64,
            cfg.jobs,
        )?;
        let (val_acc, _) = mean_ci(&val_accs);
        // ties prefer the later epoch: equal validation, more training
        if val_acc >= best_val {
            best_val = val_acc;
            best = enc.clone();
            best_epoch = epoch;
        }
        records.push(EpochRecord {
            epoch,
            train_loss_total: sums.0 / nt,
            loss_cross_entropy: cfg.losses.cross_entropy.map(|_| sums.1 / nt),
            loss_proto_triplet: cfg.losses.proto_triplet.map(|_| sums.2 / nt),
            loss_icnn: cfg.losses.icnn.map(|_| sums.3 / nt),
            val_accuracy: val_acc,
        });
    }

    let metrics = RunMetrics {
        epochs: records,
        final_metrics: None,
        best_epoch,
        warnings,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((best, metrics))
}

/// Frozen-encoder evaluation over `n_tasks` freshly sampled tasks.
pub fn evaluate(
    enc: &MlpEncoder,
    ds: &LabeledDataset,
    split: Split,
    spec: &EpisodeSpec,
    n_tasks: usize,
    seed: u64,
) -> Result<EvalResult> {
    evaluate_jobs(enc, ds, split, spec, n_tasks, seed, 1)
}

pub fn evaluate_jobs(
    enc: &MlpEncoder,
    ds: &LabeledDataset,
    split: Split,
    spec: &EpisodeSpec,
    n_tasks: usize,
    seed: u64,
    jobs: usize,
) -> Result<EvalResult> {
    let per_task =
        accuracy_over_tasks(enc, ds, split, spec, n_tasks, seed, RngStream::Test, 0, jobs)?;
    let (mean_accuracy, ci95) = mean_ci(&per_task);
    Ok(EvalResult { mean_accuracy, ci95, per_task })
}

/// One embedded evaluation point for external projection plots.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EmbeddedPoint {
    pub task: usize,
    pub label: String,
    pub coords: Vec<f64>,
}

/// Query embeddings from the evaluation stream, capped at `cap` rows.
pub fn dump_eval_embeddings(
    enc: &MlpEncoder,
    ds: &LabeledDataset,
    split: Split,
    spec: &EpisodeSpec,
    seed: u64,
    cap: usize,
) -> Result<Vec<EmbeddedPoint>> {
    let mut out = Vec::with_capacity(cap);
    let mut task_idx = 0u64;
    while out.len() < cap {
        let mut rng = task_rng(seed, RngStream::Embed, 0, task_idx);
        let task = sample_task(ds, split, spec, &mut rng)?;
        let emb = enc.encode_values(&task.query_x)?;
        for (row, &y) in task.query_y.iter().enumerate() {
            if out.len() >= cap {
                break;
            }
            out.push(EmbeddedPoint {
                task: task_idx as usize,
                label: ds.label_name(task.class_ids[y]).to_string(),
                coords: emb.row(row).to_vec(),
            });
        }
        task_idx += 1;
    }
    Ok(out)
}

/// One row of the ablation grid.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub description: String,
    pub ways: usize,
    pub shots: usize,
    pub mean_accuracy: Option<f64>,
    pub ci95: Option<f64>,
    pub error: Option<String>,
}

/// The grid rows: the 8 data-choice settings of the separability loss and
/// the 4 triplet combinations.
pub fn ablation_settings() -> Vec<(&'static str, &'static str, LossCombo, icnn::IcnnMode)> {
    use icnn::IcnnMode::*;
    let icnn_only = |mode| {
        (
            LossCombo { cross_entropy: None, proto_triplet: None, icnn: Some(1.0) },
            mode,
        )
    };
    let ce_icnn = |mode| {
        (
            LossCombo { cross_entropy: Some(1.0), proto_triplet: None, icnn: Some(1.0) },
            mode,
        )
    };
    let mut rows = Vec::new();
    let (c, m) = icnn_only(SupportOnly);
    rows.push(("i", "icnn support only", c, m));
    let (c, m) = icnn_only(SupportPlusQuery);
    rows.push(("ii", "icnn support + query", c, m));
    let (c, m) = ce_icnn(SupportOnly);
    rows.push(("iii", "cross-entropy + icnn support only", c, m));
    let (c, m) = ce_icnn(SupportPlusQuery);
    rows.push(("iv", "cross-entropy + icnn support + query", c, m));
    let (c, m) = icnn_only(QueryVsPrototypes);
    rows.push(("v", "icnn support + query vs prototypes", c, m));
    let (c, m) = ce_icnn(QueryVsPrototypes);
    rows.push(("vi", "cross-entropy + icnn support + query vs prototypes", c, m));
    let (c, m) = icnn_only(Full);
    rows.push(("vii", "icnn full task data", c, m));
    let (c, m) = ce_icnn(Full);
    rows.push(("viii", "cross-entropy + icnn full task data", c, m));
    rows.push((
        "pt",
        "proto-triplet",
        LossCombo { cross_entropy: None, proto_triplet: Some(1.0), icnn: None },
        Full,
    ));
    rows.push((
        "ce_pt",
        "cross-entropy + proto-triplet",
        LossCombo { cross_entropy: Some(1.0), proto_triplet: Some(1.0), icnn: None },
        Full,
    ));
    rows.push((
        "pt_icnn",
        "proto-triplet + full icnn",
        LossCombo { cross_entropy: None, proto_triplet: Some(1.0), icnn: Some(1.0) },
        Full,
    ));
    rows.push((
        "ce_pt_icnn",
        "cross-entropy + proto-triplet + full icnn",
        LossCombo::default(),
        Full,
    ));
    rows
}

/// Train and evaluate all 12 ablation settings with a shared seed and
/// dataset; a failing row is recorded and the grid continues.
pub fn run_ablation_grid(ds: &LabeledDataset, base: &TrainConfig) -> Vec<AblationRow> {
    let mut rows = Vec::with_capacity(12);
    for (setting, description, losses, mode) in ablation_settings() {
        let mut cfg = base.clone();
        cfg.losses = losses;
        cfg.icnn.mode = mode;
        let outcome = train(ds, &cfg).and_then(|(enc, _)| {
            evaluate_jobs(
                &enc,
                ds,
                Split::Test,
                &cfg.episode,
                cfg.eval_tasks,
                cfg.seed,
                cfg.jobs,
            )
        });
        let row = match outcome {
            Ok(eval) => AblationRow {
                setting: setting.to_string(),
                description: description.to_string(),
                ways: cfg.episode.ways,
                shots: cfg.episode.shots,
                mean_accuracy: Some(eval.mean_accuracy),
                ci95: Some(eval.ci95),
                error: None,
            },
            Err(e) => AblationRow {
                setting: setting.to_string(),
                description: description.to_string(),
                ways: cfg.episode.ways,
                shots: cfg.episode.shots,
                mean_accuracy: None,
                ci95: None,
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }
    rows
}
