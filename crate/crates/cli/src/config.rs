//! JSON run configuration: which model, which dataset, and every training
//! knob. Validated before any thread starts.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use driftnet::models::ModelSpec;
use driftnet::optim::OptimizerKind;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    /// Sweep grid; only read by the `sweep` subcommand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepGrid>,
    /// Output directory. `--out` takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Synthetic digit-sequence reduction tasks (pairs with `rnn`).
    ListReduction { train: usize, valid: usize },
    /// Synthetic two-hop deduction graphs (pairs with `ggsnn`).
    TwoHop {
        train: usize,
        valid: usize,
        #[serde(default = "default_graph_nodes")]
        nodes: usize,
    },
    /// Synthetic planted-rule binary trees (pairs with `tree_rnn`).
    Trees {
        train: usize,
        valid: usize,
        depth: (usize, usize),
        vocab: usize,
    },
    /// Binarized s-expression treebank files (pairs with `tree_rnn`).
    Sst {
        train_path: PathBuf,
        valid_path: PathBuf,
    },
    /// IDX image/label files (pairs with `mlp`).
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        valid_images: PathBuf,
        valid_labels: PathBuf,
    },
}

fn default_graph_nodes() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "one")]
    pub threads: usize,
    #[serde(default = "one")]
    pub max_active_keys: usize,
    #[serde(default = "one")]
    pub min_update_frequency: usize,
    /// Per-node accumulation thresholds overriding the global one.
    #[serde(default)]
    pub muf_overrides: HashMap<String, usize>,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub replicas: usize,
    /// Nodes to replicate when `replicas > 1`; empty means every
    /// parameterized node.
    #[serde(default)]
    pub replicate: Vec<String>,
    /// Early-stop threshold on validation accuracy in [0, 1].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
    /// Explicit node-to-worker pins; unnamed nodes follow the default
    /// heuristic (each parameterized node on its own worker round-robin,
    /// neighbors joining their producer).
    #[serde(default)]
    pub placement: HashMap<String, usize>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub max_active_keys: Vec<usize>,
    pub min_update_frequency: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            max_active_keys: vec![1, 4, 8, 16],
            min_update_frequency: vec![10, 50, 250],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.epochs == 0 {
            bail!("train.epochs must be at least 1");
        }
        if t.threads == 0 {
            bail!("train.threads must be at least 1");
        }
        if t.max_active_keys == 0 {
            bail!("train.max_active_keys must be at least 1");
        }
        if t.min_update_frequency == 0 {
            bail!("train.min_update_frequency must be at least 1");
        }
        if t.replicas == 0 {
            bail!("train.replicas must be at least 1");
        }
        for (node, &muf) in &t.muf_overrides {
            if muf == 0 {
                bail!("train.muf_overrides[{node}] must be at least 1");
            }
        }
        if let Some(a) = t.target_accuracy {
            if !(0.0..=1.0).contains(&a) {
                bail!("train.target_accuracy must lie in [0, 1], got {a}");
            }
        }
        if let Some(grid) = &self.sweep {
            if grid.max_active_keys.is_empty() || grid.min_update_frequency.is_empty() {
                bail!("sweep grid axes must be non-empty");
            }
            if grid
                .max_active_keys
                .iter()
                .chain(&grid.min_update_frequency)
                .any(|&v| v == 0)
            {
                bail!("sweep grid values must be at least 1");
            }
        }

        use DatasetSpec::*;
        let fits = matches!(
            (&self.model, &self.dataset),
            (ModelSpec::Rnn { .. }, ListReduction { .. })
                | (ModelSpec::Ggsnn { .. }, TwoHop { .. })
                | (ModelSpec::TreeRnn { .. }, Trees { .. } | Sst { .. })
                | (ModelSpec::Mlp { .. }, Mnist { .. })
        );
        if !fits {
            bail!(
                "dataset kind does not fit model family `{}`",
                self.model.family_name()
            );
        }
        match &self.dataset {
            ListReduction { train, valid }
            | TwoHop { train, valid, .. }
            | Trees { train, valid, .. } => {
                if *train == 0 || *valid == 0 {
                    bail!("synthetic dataset sizes must be at least 1");
                }
            }
            Sst { .. } | Mnist { .. } => {}
        }
        if let TwoHop { nodes, .. } = &self.dataset {
            if *nodes < 8 {
                bail!("two-hop graphs need at least 8 nodes, got {nodes}");
            }
        }
        Ok(())
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub threads: Option<usize>,
    pub max_active_keys: Option<usize>,
    pub min_update_frequency: Option<usize>,
    pub replicas: Option<usize>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.threads {
            self.train.threads = v;
        }
        if let Some(v) = o.max_active_keys {
            self.train.max_active_keys = v;
        }
        if let Some(v) = o.min_update_frequency {
            self.train.min_update_frequency = v;
        }
        if let Some(v) = o.replicas {
            self.train.replicas = v;
        }
        if let Some(v) = o.seed {
            self.train.seed = v;
        }
    }
}
