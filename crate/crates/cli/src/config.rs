//! Run configuration: a TOML document with sections mirroring the training,
//! loss, and dataset settings. Every key is overridable on the command line
//! as `--section.key value`; defaults are materialized into the manifest.

use std::path::{Path, PathBuf};

use icnn_metric::episodes::EpisodeSpec;
use icnn_metric::icnn::{IcnnConfig, IcnnMode, LambdaVariant, VarianceMode};
use icnn_metric::trainer::{LossCombo, OptimizerConfig, TrainConfig};
use icnn_metric::triplet::TripletConfig;
use serde::{Deserialize, Serialize};

/// Configuration-stage error (exit code 2 at the CLI boundary).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn d_true_one() -> f64 {
    1.0
}

/// Accept either a scalar or a list for list-typed keys, so single-element
/// command-line overrides like `--train.encoder_dims 64` parse.
fn one_or_many<'de, D, T>(de: D) -> Result<Vec<T>, D::Error>
where
    D: serde::Deserializer<'de>,
    T: Deserialize<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany<T> {
        One(T),
        Many(Vec<T>),
    }
    Ok(match OneOrMany::deserialize(de)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct DatasetSection {
    /// "synth" or "csv".
    #[serde(default = "default_kind")]
    pub kind: String,
    /// CSV path (csv kind only).
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_center_sep")]
    pub center_sep: f64,
    #[serde(default = "d_true_one")]
    pub noise_sigma: f64,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_train_classes")]
    pub train_classes: usize,
    #[serde(default = "default_val_classes")]
    pub val_classes: usize,
    #[serde(default = "default_test_classes")]
    pub test_classes: usize,
}

fn default_kind() -> String {
    "synth".to_string()
}
fn default_n_classes() -> usize {
    16
}
fn default_per_class() -> usize {
    50
}
fn default_dim() -> usize {
    32
}
fn default_center_sep() -> f64 {
    5.0
}
fn default_train_classes() -> usize {
    8
}
fn default_val_classes() -> usize {
    3
}
fn default_test_classes() -> usize {
    5
}

impl Default for DatasetSection {
    fn default() -> Self {
        toml::from_str("").expect("empty section fills defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSection {
    #[serde(default = "default_ways")]
    pub ways: usize,
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default = "default_queries")]
    pub queries_per_class: usize,
}

fn default_ways() -> usize {
    5
}
fn default_shots() -> usize {
    5
}
fn default_queries() -> usize {
    15
}

impl Default for EpisodeSection {
    fn default() -> Self {
        toml::from_str("").expect("empty section fills defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_tasks_per_epoch")]
    pub tasks_per_epoch: usize,
    #[serde(default = "default_val_tasks")]
    pub val_tasks: usize,
    #[serde(default = "default_eval_tasks")]
    pub eval_tasks: usize,
    #[serde(default)]
    pub seed: u64,
    /// Enabled loss terms.
    #[serde(default = "default_losses", deserialize_with = "one_or_many")]
    pub losses: Vec<String>,
    #[serde(default = "d_true_one")]
    pub weight_cross_entropy: f64,
    #[serde(default = "d_true_one")]
    pub weight_proto_triplet: f64,
    #[serde(default = "d_true_one")]
    pub weight_icnn: f64,
    #[serde(default = "default_lr_step")]
    pub lr_step: usize,
    /// Hidden/output widths after the input dim; empty = default 64,64,32.
    #[serde(default, deserialize_with = "one_or_many")]
    pub encoder_dims: Vec<usize>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_epochs() -> usize {
    200
}
fn default_tasks_per_epoch() -> usize {
    100
}
fn default_val_tasks() -> usize {
    500
}
fn default_eval_tasks() -> usize {
    1000
}
fn default_losses() -> Vec<String> {
    vec!["cross_entropy".into(), "proto_triplet".into(), "icnn".into()]
}
fn default_lr_step() -> usize {
    20
}
fn default_jobs() -> usize {
    1
}

impl Default for TrainSection {
    fn default() -> Self {
        toml::from_str("").expect("empty section fills defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    /// "adam" or "sgd_momentum".
    #[serde(default = "default_opt_kind")]
    pub kind: String,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_opt_eps")]
    pub epsilon: f64,
}

fn default_opt_kind() -> String {
    "adam".to_string()
}
fn default_lr() -> f64 {
    1e-3
}
fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_opt_eps() -> f64 {
    1e-8
}

impl Default for OptimizerSection {
    fn default() -> Self {
        toml::from_str("").expect("empty section fills defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcnnSection {
    /// 0 means automatic.
    #[serde(default)]
    pub k_neighbors: usize,
    #[serde(default = "d_true_one")]
    pub p: f64,
    #[serde(default = "d_true_one")]
    pub q: f64,
    #[serde(default = "d_true_one")]
    pub r: f64,
    /// "split" or "original".
    #[serde(default = "default_lambda_variant")]
    pub lambda_variant: String,
    /// "batch" or "per_point".
    #[serde(default = "default_variance_mode")]
    pub variance_mode: String,
    #[serde(default = "default_icnn_eps")]
    pub epsilon: f64,
    /// "support_only" | "support_plus_query" | "query_vs_prototypes" | "full".
    #[serde(default = "default_icnn_mode")]
    pub mode: String,
}

fn default_lambda_variant() -> String {
    "split".to_string()
}
fn default_variance_mode() -> String {
    "batch".to_string()
}
fn default_icnn_eps() -> f64 {
    1e-12
}
fn default_icnn_mode() -> String {
    "full".to_string()
}

impl Default for IcnnSection {
    fn default() -> Self {
        toml::from_str("").expect("empty section fills defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletSection {
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// 0 means ways − 1.
    #[serde(default)]
    pub k_negatives: usize,
}

fn default_margin() -> f64 {
    0.5
}

impl Default for TripletSection {
    fn default() -> Self {
        toml::from_str("").expect("empty section fills defaults")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: String,
    #[serde(default = "default_embed_rows")]
    pub embed_rows: usize,
}

fn default_out_dir() -> String {
    "run".to_string()
}
fn default_embed_rows() -> usize {
    1000
}

impl Default for OutputSection {
    fn default() -> Self {
        toml::from_str("").expect("empty section fills defaults")
    }
}

/// The whole config document with all defaults materialized.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub episode: EpisodeSection,
    pub train: TrainSection,
    pub optimizer: OptimizerSection,
    pub icnn: IcnnSection,
    pub triplet: TripletSection,
    pub output: OutputSection,
}

impl RunConfig {
    /// Load a TOML file (or start from defaults when `path` is None) and
    /// apply `--section.key value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut doc: toml::Table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    ConfigError(format!("cannot read config file {}: {e}", p.display()))
                })?;
                text.parse().map_err(|e| {
                    ConfigError(format!("cannot parse {}: {e}", p.display()))
                })?
            }
            None => toml::Table::new(),
        };
        for (key, value) in overrides {
            apply_override(&mut doc, key, value)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e| ConfigError(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        match self.dataset.kind.as_str() {
            "synth" => {}
            "csv" => {
                if self.dataset.path.is_none() {
                    return Err(ConfigError("dataset.kind = \"csv\" needs dataset.path".into()));
                }
            }
            other => {
                return Err(ConfigError(format!(
                    "dataset.kind must be \"synth\" or \"csv\", got {other:?}"
                )))
            }
        }
        for l in &self.train.losses {
            if !matches!(l.as_str(), "cross_entropy" | "proto_triplet" | "icnn") {
                return Err(ConfigError(format!(
                    "unknown loss {l:?} (expected cross_entropy, proto_triplet, icnn)"
                )));
            }
        }
        self.icnn_config().map_err(|e| ConfigError(e.to_string()))?;
        self.optimizer_config()?;
        Ok(())
    }

    pub fn episode_spec(&self) -> Result<EpisodeSpec, ConfigError> {
        EpisodeSpec::new(
            self.episode.ways,
            self.episode.shots,
            self.episode.queries_per_class,
        )
        .map_err(|e| ConfigError(e.to_string()))
    }

    pub fn loss_combo(&self) -> LossCombo {
        let has = |name: &str| self.train.losses.iter().any(|l| l == name);
        LossCombo {
            cross_entropy: has("cross_entropy").then_some(self.train.weight_cross_entropy),
            proto_triplet: has("proto_triplet").then_some(self.train.weight_proto_triplet),
            icnn: has("icnn").then_some(self.train.weight_icnn),
        }
    }

    pub fn icnn_config(&self) -> Result<IcnnConfig, ConfigError> {
        let lambda_variant = match self.icnn.lambda_variant.as_str() {
            "split" => LambdaVariant::Split,
            "original" => LambdaVariant::Original,
            other => {
                return Err(ConfigError(format!(
                    "icnn.lambda_variant must be \"split\" or \"original\", got {other:?}"
                )))
            }
        };
        let variance_mode = match self.icnn.variance_mode.as_str() {
            "batch" => VarianceMode::Batch,
            "per_point" => VarianceMode::PerPoint,
            other => {
                return Err(ConfigError(format!(
                    "icnn.variance_mode must be \"batch\" or \"per_point\", got {other:?}"
                )))
            }
        };
        let mode = match self.icnn.mode.as_str() {
            "support_only" => IcnnMode::SupportOnly,
            "support_plus_query" => IcnnMode::SupportPlusQuery,
            "query_vs_prototypes" => IcnnMode::QueryVsPrototypes,
            "full" => IcnnMode::Full,
            other => return Err(ConfigError(format!("unknown icnn.mode {other:?}"))),
        };
        let cfg = IcnnConfig {
            k_neighbors: (self.icnn.k_neighbors > 0).then_some(self.icnn.k_neighbors),
            p: self.icnn.p,
            q: self.icnn.q,
            r: self.icnn.r,
            lambda_variant,
            variance_mode,
            epsilon: self.icnn.epsilon,
            mode,
        };
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn triplet_config(&self) -> TripletConfig {
        TripletConfig {
            margin: self.triplet.margin,
            k_negatives: (self.triplet.k_negatives > 0).then_some(self.triplet.k_negatives),
        }
    }

    pub fn optimizer_config(&self) -> Result<OptimizerConfig, ConfigError> {
        match self.optimizer.kind.as_str() {
            "adam" => Ok(OptimizerConfig::Adam {
                learning_rate: self.optimizer.learning_rate,
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                epsilon: self.optimizer.epsilon,
            }),
            "sgd_momentum" => Ok(OptimizerConfig::SgdMomentum {
                learning_rate: self.optimizer.learning_rate,
                momentum: self.optimizer.momentum,
            }),
            other => Err(ConfigError(format!(
                "optimizer.kind must be \"adam\" or \"sgd_momentum\", got {other:?}"
            ))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        Ok(TrainConfig {
            episode: self.episode_spec()?,
            epochs: self.train.epochs,
            tasks_per_epoch: self.train.tasks_per_epoch,
            val_tasks: self.train.val_tasks,
            eval_tasks: self.train.eval_tasks,
            seed: self.train.seed,
            losses: self.loss_combo(),
            icnn: self.icnn_config()?,
            triplet: self.triplet_config(),
            optimizer: self.optimizer_config()?,
            lr_step: self.train.lr_step,
            encoder_dims: if self.train.encoder_dims.is_empty() {
                None
            } else {
                Some(self.train.encoder_dims.clone())
            },
            jobs: self.train.jobs,
        })
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.output.dir)
    }
}

/// Parse a CLI value string into the most specific TOML value: bool, integer,
/// float, a comma list of those, or a bare string.
fn parse_value(raw: &str) -> toml::Value {
    if raw.contains(',') {
        let items: Vec<toml::Value> = raw.split(',').map(|s| parse_value(s.trim())).collect();
        return toml::Value::Array(items);
    }
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

fn apply_override(doc: &mut toml::Table, key: &str, value: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError(format!(
            "override key {key:?} must have the form section.field"
        )));
    }
    let section = doc
        .entry(parts[0].to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let table = section.as_table_mut().ok_or_else(|| {
        ConfigError(format!("config section {:?} is not a table", parts[0]))
    })?;
    table.insert(parts[1].to_string(), parse_value(value));
    Ok(())
}
