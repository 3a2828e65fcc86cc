//! Checkpoints, run configuration and run directories.
//!
//! Checkpoints are JSON. Floats are written with the shortest decimal that
//! round-trips (`ryu`) and parsed with exact rounding, so `load(save(x))`
//! reproduces every parameter bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::{CombinePolicy, DistillConfig};
use crate::ensemble::{WeightMode, EPS_W};
use crate::error::{Error, Result};
use crate::model::{Activation, DenseLayer, MlpArchitecture, MlpParameters};
use crate::numerics::EPS_LOG;
use crate::optim::{OptimizerKind, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS_ADAM};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMetadata {
    pub seed: u64,
    pub epochs: usize,
    pub final_train_loss: f64,
    /// RFC 3339, UTC.
    pub created_at: String,
}

/// One layer as nested arrays: `weights[out][in]`, `biases[out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerArrays {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub architecture: MlpArchitecture,
    pub parameters: Vec<LayerArrays>,
    pub metadata: CheckpointMetadata,
}

impl Checkpoint {
    pub fn new(params: &MlpParameters, seed: u64, epochs: usize, final_train_loss: f64) -> Self {
        let parameters = params
            .layers()
            .iter()
            .map(|l| LayerArrays {
                weights: l.weights.chunks(l.in_dim).map(<[f64]>::to_vec).collect(),
                biases: l.biases.clone(),
            })
            .collect();
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            architecture: params.architecture(),
            parameters,
            metadata: CheckpointMetadata {
                seed,
                epochs,
                final_train_loss,
                created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            },
        }
    }

    /// Rebuilds parameters, checking every layer against the architecture.
    pub fn to_parameters(&self) -> Result<MlpParameters> {
        self.architecture
            .validate()
            .map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
        let shapes = self.architecture.layer_shapes();
        if shapes.len() != self.parameters.len() {
            return Err(Error::ShapeMismatch {
                layer: self.parameters.len().min(shapes.len()),
                message: format!(
                    "architecture has {} layers, checkpoint stores {}",
                    shapes.len(),
                    self.parameters.len()
                ),
            });
        }
        let mut layers = Vec::with_capacity(shapes.len());
        for (i, ((in_dim, out_dim), arrays)) in shapes.into_iter().zip(&self.parameters).enumerate() {
            if arrays.weights.len() != out_dim {
                return Err(Error::ShapeMismatch {
                    layer: i,
                    message: format!("expected {out_dim} weight rows, found {}", arrays.weights.len()),
                });
            }
            if let Some((r, row)) = arrays.weights.iter().enumerate().find(|(_, r)| r.len() != in_dim) {
                return Err(Error::ShapeMismatch {
                    layer: i,
                    message: format!("weight row {r} has {} entries, expected {in_dim}", row.len()),
                });
            }
            if arrays.biases.len() != out_dim {
                return Err(Error::ShapeMismatch {
                    layer: i,
                    message: format!("expected {out_dim} biases, found {}", arrays.biases.len()),
                });
            }
            layers.push(DenseLayer {
                in_dim,
                out_dim,
                weights: arrays.weights.concat(),
                biases: arrays.biases.clone(),
            });
        }
        MlpParameters::from_layers(self.architecture.activation, layers)
    }

    /// Checkpoint with `created_at` cleared, for content comparisons.
    pub fn without_timestamp(&self) -> Self {
        let mut c = self.clone();
        c.metadata.created_at.clear();
        c
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(checkpoint)?;
    fs::write(path, text).map_err(|e| Error::io(format!("cannot write {}", path.display()), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("cannot read {}", path.display()), e))?;
    parse_checkpoint(&text)
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::MalformedCheckpoint("missing format_version".into()))?;
    if version != u64::from(CHECKPOINT_FORMAT_VERSION) {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_FORMAT_VERSION,
            found: u32::try_from(version).unwrap_or(u32::MAX),
        });
    }
    let checkpoint: Checkpoint =
        serde_json::from_value(value).map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
    checkpoint.to_parameters()?;
    Ok(checkpoint)
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Every knob of a run. Unknown keys are rejected both in files and on the
/// command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every other seed is derived from it.
    pub seed: u64,

    // data
    pub num_classes: usize,
    pub input_dim: usize,
    /// Gaussian components per class. Components are spaced evenly on a
    /// circle with classes alternating, so more than one makes the class
    /// regions non-convex.
    pub modes_per_class: usize,
    /// Radius of the circle the component means sit on.
    pub class_radius: f64,
    pub cov_scale: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Fraction of training rows that keep their labels.
    pub labeled_fraction: f64,
    /// Fraction of training rows held out as validation.
    pub val_fraction: f64,
    /// Train teachers on the unlabeled rows too, labels restored.
    pub include_unlabeled_in_teachers: bool,
    /// External training rows (CSV); replaces the synthetic mixture.
    pub train_csv: Option<PathBuf>,
    /// External test rows (CSV); required with `train_csv`.
    pub test_csv: Option<PathBuf>,

    // model and optimizer
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub n_teachers: usize,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,

    // distillation
    pub lambda: f64,
    pub weight_mode: WeightMode,
    pub enable_teacher_weighting: bool,
    pub enable_labeled_loss_weighting: bool,
    pub enable_disagreement_weighting: bool,
    pub combine_policy: CombinePolicy,
    pub eps_log: f64,
    pub eps_w: f64,

    // harness
    /// Student repetitions per method.
    pub n_seeds: usize,
    /// Grid for `sweep`.
    pub lambdas: Vec<f64>,
    pub output_dir: PathBuf,
    /// Write one JSON line per sample per epoch during `distill`.
    pub verbose_log: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            num_classes: 3,
            input_dim: 2,
            modes_per_class: 3,
            class_radius: 2.5,
            cov_scale: 0.2,
            train_per_class: 1334,
            test_per_class: 334,
            labeled_fraction: 0.5,
            val_fraction: 0.0,
            include_unlabeled_in_teachers: false,
            train_csv: None,
            test_csv: None,
            hidden_dims: vec![32],
            activation: Activation::Relu,
            n_teachers: 5,
            teacher_epochs: 30,
            student_epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps_adam: DEFAULT_EPS_ADAM,
            lambda: 10.0,
            weight_mode: WeightMode::InverseLoss,
            enable_teacher_weighting: true,
            enable_labeled_loss_weighting: true,
            enable_disagreement_weighting: true,
            combine_policy: CombinePolicy::Sum,
            eps_log: EPS_LOG,
            eps_w: EPS_W,
            n_seeds: 5,
            lambdas: vec![0.0, 1.0, 5.0, 10.0, 15.0, 25.0, 50.0],
            output_dir: PathBuf::from("runs"),
            verbose_log: false,
        }
    }
}

impl RunConfig {
    /// Names accepted as config keys and `--key` flags.
    pub fn keys() -> Vec<String> {
        match serde_json::to_value(RunConfig::default()) {
            Ok(serde_json::Value::Object(map)) => map.keys().cloned().collect(),
            _ => unreachable!("RunConfig serializes to an object"),
        }
    }

    /// Loads TOML, or JSON when the extension is `.json`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("cannot read {}", path.display()), e))?;
        let cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its command-line text. Values are read as JSON where
    /// possible (`10`, `true`, `[32,16]`); a comma list becomes an array and
    /// anything else is taken as a string.
    pub fn apply_override(&mut self, key: &str, raw: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let mut value = serde_json::to_value(&*self)?;
        let map = value.as_object_mut().expect("RunConfig serializes to an object");
        if !map.contains_key(&key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        let string = || serde_json::Value::String(raw.to_string());
        let parsed = match serde_json::from_str::<serde_json::Value>(raw) {
            Ok(v) => v,
            Err(_) if raw.contains(',') => serde_json::from_str(&format!("[{raw}]")).unwrap_or_else(|_| string()),
            Err(_) => string(),
        };
        // A scalar given for a list key means a one-element list.
        let parsed = match (&map[&key], parsed) {
            (serde_json::Value::Array(_), v @ serde_json::Value::Number(_)) => serde_json::Value::Array(vec![v]),
            (_, v) => v,
        };
        map.insert(key.clone(), parsed);
        let updated: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("--{key} {raw}: {e}")))?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.distill_config().validate()?;
        if self.n_teachers < 2 {
            return Err(Error::Config("n_teachers must be >= 2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be >= 1".into()));
        }
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("lambdas must be a non-empty list of values >= 0".into()));
        }
        if self.train_csv.is_some() != self.test_csv.is_some() {
            return Err(Error::Config("train_csv and test_csv must be given together".into()));
        }
        if self.train_csv.is_none() && (self.train_per_class == 0 || self.test_per_class == 0) {
            return Err(Error::Config("train_per_class and test_per_class must be positive".into()));
        }
        if self.modes_per_class == 0 {
            return Err(Error::Config("modes_per_class must be >= 1".into()));
        }
        if self.cov_scale.is_nan() || self.cov_scale <= 0.0 {
            return Err(Error::Config("cov_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn architecture(&self) -> MlpArchitecture {
        MlpArchitecture {
            input_dim: self.input_dim,
            hidden_dims: self.hidden_dims.clone(),
            num_classes: self.num_classes,
            activation: self.activation,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            lambda: self.lambda,
            weight_mode: self.weight_mode,
            enable_teacher_weighting: self.enable_teacher_weighting,
            enable_labeled_loss_weighting: self.enable_labeled_loss_weighting,
            enable_disagreement_weighting: self.enable_disagreement_weighting,
            combine_policy: self.combine_policy,
            eps_log: self.eps_log,
            eps_w: self.eps_w,
        }
    }
}

// ---------------------------------------------------------------------------
// Run directories
// ---------------------------------------------------------------------------

/// Creates `<root>/<UTC timestamp>-seed<seed>`, adding `-1`, `-2`, ... when
/// the name is taken. Existing directories are never reused.
pub fn create_run_dir(root: impl AsRef<Path>, seed: u64) -> Result<PathBuf> {
    let root = root.as_ref();
    fs::create_dir_all(root).map_err(|e| Error::io(format!("cannot create {}", root.display()), e))?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{stamp}-seed{seed}");
    for k in 0.. {
        let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(format!("cannot create {}", dir.display()), e)),
        }
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_parameters;

    fn sample_checkpoint() -> Checkpoint {
        let arch = MlpArchitecture {
            input_dim: 3,
            hidden_dims: vec![4, 2],
            num_classes: 3,
            activation: Activation::Tanh,
        };
        let params = init_parameters(&arch, 17).unwrap();
        Checkpoint::new(&params, 17, 5, 0.123_456_789_012_345_67)
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let c = sample_checkpoint();
        save_checkpoint(&path, &c).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, c);
        let (a, b) = (c.to_parameters().unwrap(), back.to_parameters().unwrap());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn future_version_is_rejected() {
        let mut v = serde_json::to_value(sample_checkpoint()).unwrap();
        v["format_version"] = serde_json::json!(CHECKPOINT_FORMAT_VERSION + 1);
        let err = parse_checkpoint(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::VersionMismatch { found: 2, .. }), "{err}");
    }

    #[test]
    fn truncated_array_names_the_layer() {
        let mut c = sample_checkpoint();
        c.parameters[1].weights[0].pop();
        let err = parse_checkpoint(&serde_json::to_string(&c).unwrap()).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { layer: 1, .. }), "{err}");
        assert!(err.to_string().contains("layer 1"));

        let mut c = sample_checkpoint();
        c.parameters[2].biases.pop();
        assert!(matches!(
            parse_checkpoint(&serde_json::to_string(&c).unwrap()),
            Err(Error::ShapeMismatch { layer: 2, .. })
        ));
    }

    #[test]
    fn malformed_documents_are_rejected() {
        assert!(matches!(parse_checkpoint("{not json"), Err(Error::MalformedCheckpoint(_))));
        assert!(matches!(parse_checkpoint("{}"), Err(Error::MalformedCheckpoint(_))));
        assert!(matches!(load_checkpoint("/nonexistent/c.json"), Err(Error::MissingFile(_))));
    }

    #[test]
    fn config_defaults_match_documented_values() {
        let c = RunConfig::default();
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.lambda, 10.0);
        assert_eq!(c.n_teachers, 5);
        assert_eq!(c.lambdas, vec![0.0, 1.0, 5.0, 10.0, 15.0, 25.0, 50.0]);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_files_reject_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.toml");
        fs::write(&good, "seed = 3\nlambda = 15.0\nhidden_dims = [8]\nweight_mode = \"literal_eq1\"\n").unwrap();
        let c = RunConfig::load(&good).unwrap();
        assert_eq!((c.seed, c.lambda, c.hidden_dims.clone()), (3, 15.0, vec![8]));
        assert_eq!(c.weight_mode, WeightMode::LiteralEq1);

        let bad = dir.path().join("bad.toml");
        fs::write(&bad, "lamda = 15.0\n").unwrap();
        assert!(matches!(RunConfig::load(&bad), Err(Error::Config(_))));

        let json = dir.path().join("c.json");
        fs::write(&json, r#"{"seed": 9, "combine_policy": "interleave"}"#).unwrap();
        let c = RunConfig::load(&json).unwrap();
        assert_eq!(c.combine_policy, CombinePolicy::Interleave);

        assert!(matches!(RunConfig::load(dir.path().join("missing.toml")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.apply_override("lr", "1").unwrap();
        assert_eq!(c.lr, 1.0);
        c.apply_override("hidden-dims", "16,8").unwrap();
        assert_eq!(c.hidden_dims, vec![16, 8]);
        c.apply_override("lambdas", "0,10").unwrap();
        assert_eq!(c.lambdas, vec![0.0, 10.0]);
        c.apply_override("lambdas", "5").unwrap();
        assert_eq!(c.lambdas, vec![5.0]);
        c.apply_override("weight_mode", "literal_eq1").unwrap();
        assert_eq!(c.weight_mode, WeightMode::LiteralEq1);
        c.apply_override("enable_teacher_weighting", "false").unwrap();
        assert!(!c.enable_teacher_weighting);
        c.apply_override("train_csv", "data/train.csv").unwrap();
        assert_eq!(c.train_csv, Some(PathBuf::from("data/train.csv")));
        assert!(matches!(c.apply_override("lamda", "3"), Err(Error::Config(_))));
        assert!(c.apply_override("batch_size", "many").is_err());
        assert!(c.apply_override("weight_mode", "bogus").is_err());
    }

    #[test]
    fn run_dirs_never_collide() {
        let root = tempfile::tempdir().unwrap();
        let a = create_run_dir(root.path(), 7).unwrap();
        let b = create_run_dir(root.path(), 7).unwrap();
        assert_ne!(a, b);
        assert!(a.is_dir() && b.is_dir());
        assert!(a.file_name().unwrap().to_string_lossy().contains("seed7"));
    }
}
