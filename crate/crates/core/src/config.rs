//! Experiment configuration with the protocol's default hyperparameters.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::TaskSchedule;
use crate::error::{Error, Result};

/// On/off switches for each mechanism.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodFlags {
    /// Class-reweighted classification loss.
    pub cw: bool,
    /// Distillation from the previous task's global model.
    pub kd: bool,
    /// Embedding replay buffer and replay loss.
    pub mr: bool,
    /// Class-aware classifier aggregation.
    pub ca: bool,
    /// Forgetting-aware adaptive loss weights.
    pub ab: bool,
    /// Prototype-guided drift compensation.
    pub dc: bool,
    /// Gradient projection on the feature extractor.
    pub gp: bool,
}

impl MethodFlags {
    pub const NONE: MethodFlags = MethodFlags {
        cw: false,
        kd: false,
        mr: false,
        ca: false,
        ab: false,
        dc: false,
        gp: false,
    };

    pub const ALL: MethodFlags = MethodFlags {
        cw: true,
        kd: true,
        mr: true,
        ca: true,
        ab: true,
        dc: true,
        gp: true,
    };

    /// `+CW+KD` style label; `none` when everything is off.
    pub fn label(&self) -> String {
        let names = [
            (self.cw, "CW"),
            (self.kd, "KD"),
            (self.mr, "MR"),
            (self.ca, "CA"),
            (self.ab, "AB"),
            (self.dc, "DC"),
            (self.gp, "GP"),
        ];
        let on: Vec<&str> = names.iter().filter(|(f, _)| *f).map(|(_, n)| *n).collect();
        if on.is_empty() {
            "none".to_string()
        } else {
            format!("+{}", on.join("+"))
        }
    }
}

impl Default for MethodFlags {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default = "defaults::per_class")]
        per_class: usize,
        #[serde(default = "defaults::input_dim")]
        input_dim: usize,
        #[serde(default = "defaults::cluster_spread")]
        cluster_spread: f64,
    },
    /// Pre-extracted features; each CSV needs a sidecar `.json` manifest.
    File { train: PathBuf, test: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            per_class: defaults::per_class(),
            input_dim: defaults::input_dim(),
            cluster_spread: defaults::cluster_spread(),
        }
    }
}

mod defaults {
    pub fn per_class() -> usize {
        150
    }
    pub fn input_dim() -> usize {
        16
    }
    pub fn cluster_spread() -> f64 {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed of a single run.
    pub seed: u64,
    /// Seed list for multi-run suites.
    pub seeds: Vec<u64>,
    pub classes: usize,
    pub tasks: usize,
    /// Explicit class sets; overrides the contiguous split of `classes` into `tasks`.
    pub schedule: Option<Vec<Vec<usize>>>,
    pub clients: usize,
    /// Global rounds per task.
    pub rounds: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub boost: f64,
    pub sensitivity: f64,
    pub lambda_distill: f64,
    pub lambda_replay: f64,
    pub lambda_distill_max: f64,
    pub lambda_replay_max: f64,
    pub memory_budget: usize,
    pub batch_size: usize,
    pub replay_batch_size: usize,
    pub dirichlet_alpha: f64,
    /// Extractor widths; the last entry is the embedding dimension.
    pub hidden: Vec<usize>,
    /// Evaluate after every round as well as after every task.
    pub per_round_eval: bool,
    pub methods: MethodFlags,
    pub data: DataSource,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: (0..5).collect(),
            classes: 12,
            tasks: 3,
            schedule: None,
            clients: 5,
            rounds: 5,
            local_epochs: 5,
            learning_rate: 1e-3,
            temperature: 2.0,
            boost: 1.5,
            sensitivity: 2.0,
            lambda_distill: 0.5,
            lambda_replay: 0.3,
            lambda_distill_max: 1.5,
            lambda_replay_max: 1.0,
            memory_budget: 1000,
            batch_size: 32,
            replay_batch_size: 32,
            dirichlet_alpha: 0.5,
            hidden: vec![64],
            per_round_eval: false,
            methods: MethodFlags::ALL,
            data: DataSource::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn embedding_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(0)
    }

    pub fn task_schedule(&self) -> Result<TaskSchedule> {
        match &self.schedule {
            Some(sets) => {
                let sets: Vec<BTreeSet<usize>> =
                    sets.iter().map(|s| s.iter().copied().collect()).collect();
                if sets.len() != self.tasks {
                    return Err(Error::Config(format!(
                        "schedule lists {} tasks but tasks = {}",
                        sets.len(),
                        self.tasks
                    )));
                }
                if sets
                    .iter()
                    .zip(self.schedule.iter().flatten())
                    .any(|(set, raw)| set.len() != raw.len())
                {
                    return Err(Error::Config(
                        "schedule repeats a class within a task".into(),
                    ));
                }
                TaskSchedule::new(sets, self.classes)
            }
            None => TaskSchedule::contiguous(self.classes, self.tasks),
        }
    }

    /// Field-level validation; messages name the offending key.
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.classes < 2 {
            return fail("classes", format!("need at least 2, got {}", self.classes));
        }
        if self.tasks == 0 {
            return fail("tasks", "need at least 1".into());
        }
        if self.clients == 0 {
            return fail("clients", "need at least 1".into());
        }
        if self.rounds == 0 {
            return fail("rounds", "need at least 1".into());
        }
        if self.local_epochs == 0 {
            return fail("local_epochs", "need at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size", "need at least 1".into());
        }
        if self.replay_batch_size == 0 {
            return fail("replay_batch_size", "need at least 1".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return fail(
                "hidden",
                format!(
                    "widths must be positive and non-empty, got {:?}",
                    self.hidden
                ),
            );
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("temperature", self.temperature),
            ("dirichlet_alpha", self.dirichlet_alpha),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return fail(field, format!("must be positive and finite, got {v}"));
            }
        }
        if !(self.boost.is_finite() && self.boost > 1.0) {
            return fail("boost", format!("must exceed 1, got {}", self.boost));
        }
        let nonneg = [
            ("sensitivity", self.sensitivity),
            ("lambda_distill", self.lambda_distill),
            ("lambda_replay", self.lambda_replay),
        ];
        for (field, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return fail(field, format!("must be non-negative, got {v}"));
            }
        }
        if self
            .lambda_distill_max
            .partial_cmp(&self.lambda_distill)
            .is_none_or(|o| o.is_lt())
        {
            return fail("lambda_distill_max", "must be >= lambda_distill".into());
        }
        if self
            .lambda_replay_max
            .partial_cmp(&self.lambda_replay)
            .is_none_or(|o| o.is_lt())
        {
            return fail("lambda_replay_max", "must be >= lambda_replay".into());
        }
        if self.methods.mr && self.memory_budget == 0 {
            return fail(
                "memory_budget",
                "must be positive when replay is enabled".into(),
            );
        }
        if self.seeds.is_empty() {
            return fail("seeds", "need at least one seed".into());
        }
        match &self.data {
            DataSource::Synthetic {
                per_class,
                input_dim,
                cluster_spread,
            } => {
                if *per_class < 2 {
                    return fail(
                        "data.per_class",
                        format!("need at least 2, got {per_class}"),
                    );
                }
                if *input_dim == 0 {
                    return fail("data.input_dim", "must be positive".into());
                }
                if !(cluster_spread.is_finite() && *cluster_spread >= 0.0) {
                    return fail(
                        "data.cluster_spread",
                        format!("must be >= 0, got {cluster_spread}"),
                    );
                }
            }
            DataSource::File { .. } => {}
        }
        self.task_schedule().map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("schedule: {m}")),
            other => other,
        })?;
        Ok(())
    }

    /// Short stable digest of the full configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .take(6)
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn with_methods(&self, methods: MethodFlags) -> Self {
        Self {
            methods,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_protocol_values() {
        let c = ExperimentConfig::default();
        assert_eq!((c.rounds, c.local_epochs), (5, 5));
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!((c.temperature, c.boost, c.sensitivity), (2.0, 1.5, 2.0));
        assert_eq!((c.lambda_distill, c.lambda_replay), (0.5, 0.3));
        assert_eq!((c.lambda_distill_max, c.lambda_replay_max), (1.5, 1.0));
        assert_eq!(
            (c.memory_budget, c.clients, c.dirichlet_alpha),
            (1000, 5, 0.5)
        );
        assert_eq!(c.embedding_dim(), 64);
        c.validate().unwrap();
    }

    #[test]
    fn validation_names_the_field() {
        let c = ExperimentConfig {
            dirichlet_alpha: -1.0,
            ..Default::default()
        };
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("dirichlet_alpha"));
        let c = ExperimentConfig {
            schedule: Some(vec![vec![0, 1], vec![1]]),
            classes: 3,
            tasks: 2,
            ..Default::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("schedule"));
    }

    #[test]
    fn flag_labels() {
        assert_eq!(MethodFlags::NONE.label(), "none");
        assert_eq!(MethodFlags::ALL.label(), "+CW+KD+MR+CA+AB+DC+GP");
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), a.with_seed(9).hash());
    }
}
