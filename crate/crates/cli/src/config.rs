//! Experiment configuration files.
//!
//! ```toml
//! seeds = [1, 2, 3]
//! output_dir = "out"
//!
//! [dataset]
//! kind = "synthetic"
//! num_classes = 10
//!
//! [protocol]
//! kind = "equally-split"
//! num_tasks = 5
//!
//! [train]
//! method = "ewc-dr"
//! lambda = 10.0
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use consolidate::scenario::{
    big_start_groups, equal_groups, load_idx, make_synthetic, train_test_split, TaskStream,
};
use consolidate::trainer::{AnchorPolicy, Milestone, PenaltyStep, TrainConfig};
use consolidate::Method;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default = "defaults::num_classes")]
        num_classes: usize,
        #[serde(default = "defaults::feature_dim")]
        feature_dim: usize,
        #[serde(default = "defaults::per_class")]
        per_class: usize,
        #[serde(default = "defaults::separation")]
        separation: f64,
    },
    /// Pre-split MNIST-style files.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "defaults::yes")]
        normalize: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Protocol {
    EquallySplit {
        #[serde(default = "defaults::num_tasks")]
        num_tasks: usize,
    },
    BigStart {
        initial_classes: usize,
        incremental_tasks: usize,
    },
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::EquallySplit {
            num_tasks: defaults::num_tasks(),
        }
    }
}

/// Training section. `method` is kept as text so a bad name can be reported
/// as a config error; `"none"` disables consolidation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub method: String,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_milestones: Vec<Milestone>,
    pub gamma: f64,
    pub si_xi: f64,
    pub hidden: Vec<usize>,
    pub head_init_scale: f64,
    pub anchor_policy: AnchorPolicy,
    pub penalty_step: PenaltyStep,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            method: d.method.map_or("none".into(), |m| m.as_str().into()),
            lambda: d.lambda,
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.lr,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            lr_milestones: d.lr_milestones,
            gamma: d.gamma,
            si_xi: d.si_xi,
            hidden: d.hidden,
            head_init_scale: d.head_init_scale,
            anchor_policy: d.anchor_policy,
            penalty_step: d.penalty_step,
        }
    }
}

pub fn parse_method(name: &str) -> Result<Option<Method>, CliError> {
    match name {
        "none" | "finetune" | "fine-tune" => Ok(None),
        other => other
            .parse::<Method>()
            .map(Some)
            .map_err(|e| CliError::Usage(e.to_string())),
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            lr_milestones: self.lr_milestones.clone(),
            lambda: self.lambda,
            method: parse_method(&self.method)?,
            gamma: self.gamma,
            si_xi: self.si_xi,
            seed,
            hidden: self.hidden.clone(),
            head_init_scale: self.head_init_scale,
            anchor_policy: self.anchor_policy,
            penalty_step: self.penalty_step,
            execution: Default::default(),
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "defaults::seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub protocol: Protocol,
    #[serde(default)]
    pub train: TrainSection,
    /// Directory the config was read from; relative paths hang off it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

mod defaults {
    use std::path::PathBuf;

    use consolidate::scenario::reference;

    pub fn num_classes() -> usize {
        reference::NUM_CLASSES
    }
    pub fn feature_dim() -> usize {
        reference::FEATURE_DIM
    }
    pub fn per_class() -> usize {
        reference::PER_CLASS
    }
    pub fn separation() -> f64 {
        reference::SEPARATION
    }
    pub fn num_tasks() -> usize {
        reference::NUM_TASKS
    }
    pub fn yes() -> bool {
        true
    }
    pub fn seeds() -> Vec<u64> {
        vec![1]
    }
    pub fn output_dir() -> PathBuf {
        PathBuf::from("out")
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.seeds.is_empty() {
            return usage("seeds must list at least one seed".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return usage("seeds must be distinct".into());
        }
        self.train.to_train_config(self.seeds[0])?;
        if let DatasetSpec::Synthetic {
            num_classes,
            feature_dim,
            per_class,
            separation,
        } = self.dataset
        {
            if num_classes < 2 || feature_dim == 0 || per_class < 2 || !(separation > 0.0) {
                return usage(
                    "synthetic dataset needs num_classes >= 2, feature_dim >= 1, per_class >= 2, separation > 0".into(),
                );
            }
        }
        match self.protocol {
            Protocol::EquallySplit { num_tasks } if num_tasks == 0 => usage("num_tasks must be positive".into()),
            Protocol::BigStart {
                initial_classes,
                incremental_tasks,
            } if initial_classes == 0 || incremental_tasks == 0 => {
                usage("big-start needs initial_classes and incremental_tasks >= 1".into())
            }
            _ => Ok(()),
        }
    }

    pub fn method(&self) -> Result<Option<Method>, CliError> {
        parse_method(&self.train.method)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Builds the task stream for `seed`. Synthetic data, the train/test split
    /// and the class order all derive from the seed.
    pub fn stream(&self, seed: u64) -> Result<TaskStream, CliError> {
        let (train, test) = match &self.dataset {
            DatasetSpec::Synthetic {
                num_classes,
                feature_dim,
                per_class,
                separation,
            } => {
                let data = make_synthetic(*num_classes, *feature_dim, *per_class, *separation, seed)?;
                train_test_split(&data, seed)?
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                normalize,
            } => {
                let train = load_idx(&self.resolve(train_images), &self.resolve(train_labels), *normalize)?;
                let test = load_idx(&self.resolve(test_images), &self.resolve(test_labels), *normalize)?;
                // Label spaces come from the max label of each file; align them.
                let classes = train.num_classes().max(test.num_classes());
                let widen = |d: consolidate::LabeledDataset| {
                    let dim = d.feature_dim();
                    consolidate::LabeledDataset::new(d.samples().to_vec(), classes, dim)
                };
                (widen(train)?, widen(test)?)
            }
        };
        let groups = match self.protocol {
            Protocol::EquallySplit { num_tasks } => equal_groups(train.num_classes(), num_tasks, seed),
            Protocol::BigStart {
                initial_classes,
                incremental_tasks,
            } => big_start_groups(train.num_classes(), initial_classes, incremental_tasks, seed),
        }
        .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(TaskStream::from_groups(&train, &test, &groups)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_everything_but_the_dataset() {
        let cfg = RunConfig::parse("[dataset]\nkind = \"synthetic\"\n").unwrap();
        assert_eq!(cfg.seeds, vec![1]);
        assert_eq!(cfg.train, TrainSection::default());
        assert_eq!(cfg.protocol, Protocol::default());
        assert!(RunConfig::parse("seeds = [1]\n").is_err());
    }

    #[test]
    fn unknown_method_is_a_usage_error() {
        let err = RunConfig::parse("[dataset]\nkind = \"synthetic\"\n[train]\nmethod = \"lwf\"\n").unwrap_err();
        assert!(matches!(err, CliError::Usage(ref m) if m.contains("unknown method")), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[dataset]\nkind = \"synthetic\"\n[train]\nlamda = 3.0\n").is_err());
    }
}
