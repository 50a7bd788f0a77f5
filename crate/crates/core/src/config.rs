//! Experiment configuration: a TOML file with the exact key set of
//! [`ExperimentSpec`]. Unknown keys are hard errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, SyntheticKind, TrainTest};
use crate::error::{Error, Result};
use crate::harness::{CostModel, ExecMode, PartitionMode, Strategy, TrainConfig};

/// A full experiment: dataset, model, shared training hyperparameters, cost
/// constants, and the sweep grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    /// Root for run directories; overridden by `--out` or `ECDNN_OUT`.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainSpec,
    #[serde(default)]
    pub costs: CostModel,
    pub sweep: SweepSpec,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Where the data comes from: a synthetic generator, a CSV file, or an IDX
/// image/label pair. File-based datasets without explicit test files get a
/// seeded 80/20 split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Gaussians {
        n: usize,
        dim: usize,
        classes: usize,
        noise: f64,
        seed: u64,
    },
    Spirals {
        n: usize,
        classes: usize,
        noise: f64,
        seed: u64,
    },
    XorRings {
        n: usize,
        classes: usize,
        noise: f64,
        seed: u64,
    },
    Csv {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        #[serde(default)]
        seed: u64,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<TrainTest> {
        match self {
            DatasetSpec::Gaussians {
                n,
                dim,
                classes,
                noise,
                seed,
            } => data::generate_synthetic(SyntheticKind::Gaussians, *n, *dim, *classes, *noise, *seed),
            DatasetSpec::Spirals {
                n,
                classes,
                noise,
                seed,
            } => data::generate_synthetic(SyntheticKind::Spirals, *n, 2, *classes, *noise, *seed),
            DatasetSpec::XorRings {
                n,
                classes,
                noise,
                seed,
            } => data::generate_synthetic(SyntheticKind::XorRings, *n, 2, *classes, *noise, *seed),
            DatasetSpec::Csv { train, test, seed } => {
                let train_ds = data::load_csv(train)?;
                match test {
                    Some(test_path) => pair(train_ds, data::load_csv(test_path)?),
                    None => data::train_test_split(train_ds, *seed),
                }
            }
            DatasetSpec::Idx {
                images,
                labels,
                test_images,
                test_labels,
                seed,
            } => {
                let train_ds = data::load_idx(images, labels)?;
                match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => pair(train_ds, data::load_idx(ti, tl)?),
                    (None, None) => data::train_test_split(train_ds, *seed),
                    _ => Err(Error::Config(
                        "dataset.idx needs both test_images and test_labels or neither".into(),
                    )),
                }
            }
        }
    }
}

/// Align a separately loaded train/test pair on dimension and class count.
fn pair(train: data::Dataset, test: data::Dataset) -> Result<TrainTest> {
    if train.dim() != test.dim() {
        return Err(Error::Config(format!(
            "train has {} features but test has {}",
            train.dim(),
            test.dim()
        )));
    }
    let classes = train.classes().max(test.classes());
    Ok(TrainTest {
        train: train.with_classes(classes)?,
        test: test.with_classes(classes)?,
    })
}

/// Network shape: hidden layer widths. Input and output widths come from
/// the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub hidden: Vec<usize>,
}

/// Training hyperparameters shared by every run of the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    pub total_iterations: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_l2")]
    pub l2: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta_schedule")]
    pub beta_schedule: Vec<(f64, f64)>,
    /// Compression iteration count; mutually exclusive with
    /// `compress_fraction`.
    #[serde(default)]
    pub compress_iterations: Option<u64>,
    /// Compression length as a fraction of the total mini-batch count;
    /// defaults to 0.10 when neither option is given.
    #[serde(default)]
    pub compress_fraction: Option<f64>,
    #[serde(default = "default_relabel_fraction")]
    pub relabel_fraction: f64,
    #[serde(default)]
    pub execution: ExecMode,
    #[serde(default)]
    pub partition_mode: PartitionMode,
    #[serde(default)]
    pub identical_workers: bool,
    /// Write worker snapshots at every sync point.
    #[serde(default)]
    pub checkpoints: bool,
    /// Dump relabeled `(x, y, ybar)` triples at every compression.
    #[serde(default)]
    pub dump_relabeled: bool,
}

fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

fn default_batch_size() -> usize {
    32
}

fn default_momentum() -> f64 {
    0.9
}

fn default_l2() -> f64 {
    1e-4
}

fn default_alpha() -> f64 {
    0.6
}

fn default_beta_schedule() -> Vec<(f64, f64)> {
    vec![(0.0, 0.4), (0.2, 0.6)]
}

fn default_relabel_fraction() -> f64 {
    0.7
}

/// The sweep grid: every `(tau, workers, seed)` combination yields one run
/// per strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub taus: Vec<u64>,
    pub workers: Vec<usize>,
    pub seeds: Vec<u64>,
}

/// Compression length from a fraction of the total mini-batch count:
/// `ceil(fraction * total)`, guarded against float dust just above an
/// integer.
pub fn derive_p(total_minibatches: u64, fraction: f64) -> Result<u64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "compression fraction must be in (0, 1], got {fraction}"
        )));
    }
    let raw = fraction * total_minibatches as f64;
    Ok((raw - 1e-9).ceil().max(0.0) as u64)
}

impl ExperimentSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("name must not be empty".into()));
        }
        if self.train.strategies.is_empty() {
            return Err(Error::Config("train.strategies must not be empty".into()));
        }
        let mut seen = Vec::new();
        for s in &self.train.strategies {
            if seen.contains(s) {
                return Err(Error::Config(format!("train.strategies repeats {s}")));
            }
            seen.push(*s);
        }
        if self.sweep.taus.is_empty() || self.sweep.workers.is_empty() || self.sweep.seeds.is_empty()
        {
            return Err(Error::Config(
                "sweep.taus, sweep.workers and sweep.seeds must all be nonempty".into(),
            ));
        }
        if self.sweep.taus.contains(&0) {
            return Err(Error::Config("sweep.taus entries must be >= 1".into()));
        }
        if self.sweep.workers.contains(&0) {
            return Err(Error::Config("sweep.workers entries must be >= 1".into()));
        }
        if self.train.compress_iterations.is_some() && self.train.compress_fraction.is_some() {
            return Err(Error::Config(
                "train.compress_iterations and train.compress_fraction are mutually exclusive"
                    .into(),
            ));
        }
        self.resolve_p()?;
        // Validate hyperparameters once through a probe config.
        self.to_train_config(
            self.train.strategies[0],
            self.sweep.taus[0],
            self.sweep.workers[0],
            self.sweep.seeds[0],
        )?
        .validate()
    }

    /// The compression iteration count this spec asks for.
    pub fn resolve_p(&self) -> Result<u64> {
        match (self.train.compress_iterations, self.train.compress_fraction) {
            (Some(p), None) => Ok(p),
            (None, Some(f)) => derive_p(self.train.total_iterations, f),
            (None, None) => derive_p(self.train.total_iterations, 0.10),
            (Some(_), Some(_)) => Err(Error::Config(
                "train.compress_iterations and train.compress_fraction are mutually exclusive"
                    .into(),
            )),
        }
    }

    /// Concrete run configuration for one sweep point.
    pub fn to_train_config(
        &self,
        strategy: Strategy,
        tau: u64,
        workers: usize,
        seed: u64,
    ) -> Result<TrainConfig> {
        Ok(TrainConfig {
            strategy,
            workers,
            sync_every: tau,
            total_iterations: self.train.total_iterations,
            batch_size: self.train.batch_size,
            hidden_layers: self.model.hidden.clone(),
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            l2: self.train.l2,
            alpha: self.train.alpha,
            beta_schedule: self.train.beta_schedule.clone(),
            compress_iterations: self.resolve_p()?,
            relabel_fraction: self.train.relabel_fraction,
            seed,
            partition_mode: self.train.partition_mode,
            identical_workers: self.train.identical_workers,
            execution: self.train.execution,
            costs: self.costs,
            checkpoint_dir: None,
            relabel_dump_dir: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_toml() -> String {
        r#"
name = "spirals-demo"
output_dir = "out"

[dataset.spirals]
n = 3000
classes = 3
noise = 0.15
seed = 7

[model]
hidden = [32, 32]

[train]
strategies = ["s-dnn", "e-dnn", "ma-dnn", "ec-dnn"]
total_iterations = 2000
learning_rate = 0.05

[sweep]
taus = [10, 50, 200]
workers = [4]
seeds = [1, 2, 3, 4, 5]
"#
        .to_string()
    }

    #[test]
    fn parses_sample_with_defaults() {
        let spec = ExperimentSpec::from_toml_str(&sample_toml()).unwrap();
        assert_eq!(spec.train.batch_size, 32);
        assert_eq!(spec.train.alpha, 0.6);
        assert_eq!(spec.train.beta_schedule, vec![(0.0, 0.4), (0.2, 0.6)]);
        assert_eq!(spec.train.relabel_fraction, 0.7);
        assert_eq!(spec.resolve_p().unwrap(), 200);
        assert_eq!(spec.costs, CostModel::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let spec = ExperimentSpec::from_toml_str(&sample_toml()).unwrap();
        let text = spec.to_toml_string().unwrap();
        let back = ExperimentSpec::from_toml_str(&text).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let text = sample_toml().replace("[model]", "mystery_key = 3\n\n[model]");
        let err = ExperimentSpec::from_toml_str(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mystery_key"), "{msg}");

        let nested = sample_toml().replace("learning_rate = 0.05", "learning_rate = 0.05\ntypo = 1");
        assert!(ExperimentSpec::from_toml_str(&nested).is_err());
    }

    #[test]
    fn derive_p_instances() {
        assert_eq!(derive_p(2000, 0.10).unwrap(), 200);
        assert_eq!(derive_p(1, 1.0).unwrap(), 1);
        assert_eq!(derive_p(1234, 0.05).unwrap(), 62);
        assert_eq!(derive_p(5, 1.0).unwrap(), 5);
        assert!(derive_p(10, 0.0).is_err());
        assert!(derive_p(10, 1.5).is_err());
    }

    #[test]
    fn compress_knobs_are_exclusive() {
        let text = sample_toml().replace(
            "learning_rate = 0.05",
            "learning_rate = 0.05\ncompress_iterations = 10\ncompress_fraction = 0.2",
        );
        assert!(ExperimentSpec::from_toml_str(&text).is_err());
    }

    #[test]
    fn sweep_lists_must_be_nonempty() {
        let text = sample_toml().replace("taus = [10, 50, 200]", "taus = []");
        assert!(ExperimentSpec::from_toml_str(&text).is_err());
    }

    #[test]
    fn synthetic_dataset_loads() {
        let spec = ExperimentSpec::from_toml_str(&sample_toml()).unwrap();
        let tt = spec.dataset.load().unwrap();
        assert_eq!(tt.train.len() + tt.test.len(), 3000);
        assert_eq!(tt.train.classes(), 3);
        assert_eq!(tt.train.dim(), 2);
    }
}
