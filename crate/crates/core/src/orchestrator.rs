//! The task/round loop: broadcast, parallel local training, class-aware
//! aggregation and cumulative evaluation, plus the comparison suites built
//! on top of it.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{local_train, ClientState, ClientTrace, RoundContext};
use crate::config::{DataSource, ExperimentConfig, MethodFlags};
use crate::data::{self, cumulative_test_set, dirichlet_partition, split_tasks, Dataset};
use crate::error::{Error, Result};
use crate::memory::{compute_drift, PrototypeStore, StoreRole};
use crate::nn::ModelParams;
use crate::rng::{self, Purpose};
use crate::server;

/// Accuracy overall and per class; classes absent from the test set are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
}

impl Evaluation {
    /// Accuracy over the samples whose label is in `classes`.
    pub fn subset_accuracy(&self, classes: &BTreeSet<usize>) -> Option<f64> {
        let (mut correct, mut total) = (0u64, 0u64);
        for &c in classes {
            correct += self.confusion[c][c];
            total += self.confusion[c].iter().sum::<u64>();
        }
        (total > 0).then(|| correct as f64 / total as f64)
    }
}

/// Argmax-over-logits accuracy (lowest index wins ties).
pub fn evaluate(model: &ModelParams, test: &Dataset) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let classes = model.num_classes();
    let logits = model.forward(test.features())?;
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (row, &y) in logits.iter_rows().zip(test.labels()) {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        confusion[y][best] += 1;
    }
    let correct: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: u64 = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    Ok(Evaluation {
        accuracy: correct as f64 / test.len() as f64,
        per_class,
        confusion,
    })
}

/// `A_T`, `PD = A_1 - A_T` and `mean(A_t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub final_accuracy: f64,
    pub degradation: f64,
    pub average: f64,
}

pub fn summarize_accuracies(accuracies: &[f64]) -> Result<AccuracySummary> {
    let (first, last) = match (accuracies.first(), accuracies.last()) {
        (Some(&f), Some(&l)) => (f, l),
        _ => return Err(Error::Config("need at least one task evaluation".into())),
    };
    Ok(AccuracySummary {
        final_accuracy: last,
        degradation: first - last,
        average: accuracies.iter().sum::<f64>() / accuracies.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    pub accuracy: f64,
    pub old_accuracy: Option<f64>,
    pub new_accuracy: Option<f64>,
    /// Mean `||delta_c||` against this task's snapshot after its last round.
    pub drift_mean_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub task: usize,
    pub round: usize,
    pub mean_forgetting: Option<f64>,
    pub mean_lambda_distill: f64,
    pub mean_lambda_replay: f64,
    pub conflict_rate: f64,
    pub accuracy: Option<f64>,
}

/// Per-round aggregation record (JSON lines).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationRecord {
    pub task: usize,
    pub round: usize,
    pub comm_cost_bytes: u64,
    pub teacher_fingerprint: Option<String>,
    pub drift_mean_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    /// `A_t` after each task on the cumulative test set.
    pub accuracies: Vec<f64>,
    pub final_accuracy: f64,
    /// `A_1 - A_T`
    pub degradation: f64,
    pub average_accuracy: f64,
    pub per_class_final: Vec<Option<f64>>,
    pub tasks: Vec<TaskRecord>,
    pub rounds: Vec<RoundRecord>,
    pub comm_cost_total_bytes: u64,
    pub comm_cost_per_client_round_bytes: Vec<u64>,
    pub total_steps: usize,
    pub conflict_steps: usize,
    /// Smallest post-projection `g' . g_stab` seen in the run.
    pub min_projected_dot: Option<f64>,
    /// Largest `||g'|| - ||g_plas||` seen in the run.
    pub max_norm_excess: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub client_traces: Vec<ClientTrace>,
    pub aggregation: Vec<AggregationRecord>,
}

/// Training and test sets for a config.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSource::Synthetic {
            per_class,
            input_dim,
            cluster_spread,
        } => data::generate_synthetic(
            cfg.classes,
            *per_class,
            *input_dim,
            *cluster_spread,
            cfg.seed,
        ),
        DataSource::File { train, test } => {
            let train = data::load_feature_file(train)?;
            let test = data::load_feature_file(test)?;
            for (name, ds) in [("train", &train), ("test", &test)] {
                if ds.num_classes() != cfg.classes {
                    return Err(Error::Config(format!(
                        "data.{name}: file declares {} classes but classes = {}",
                        ds.num_classes(),
                        cfg.classes
                    )));
                }
            }
            if train.input_dim() != test.input_dim() {
                return Err(Error::shape(
                    "test feature width",
                    train.input_dim(),
                    test.input_dim(),
                ));
            }
            Ok((train, test))
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Runs the full protocol for one config and seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    let schedule = cfg.task_schedule()?;
    let task_data = split_tasks(&train, &schedule)?;
    let partitions = task_data
        .iter()
        .enumerate()
        .map(|(t, td)| {
            let seed = rng::derive_seed(cfg.seed, Purpose::Partition, 0, t as u64 + 1, 0);
            dirichlet_partition(td, cfg.clients, cfg.dirichlet_alpha, seed)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut init_rng = rng::stream(cfg.seed, Purpose::Init, 0, 0, 0);
    let mut global = ModelParams::init(train.input_dim(), &cfg.hidden, cfg.classes, &mut init_rng)?;
    let d = global.embedding_dim();
    let mut global_prototypes = PrototypeStore::new(StoreRole::Global, d);
    let mut states: Vec<ClientState> = (0..cfg.clients)
        .map(|i| ClientState::new(i, cfg.classes, d, cfg.memory_budget))
        .collect();

    let mut client_traces = Vec::new();
    let mut aggregation = Vec::new();
    let mut task_records = Vec::new();
    let mut round_records = Vec::new();
    let mut accuracies = Vec::new();
    let mut last_eval = None;
    let mut per_round_cost = Vec::new();
    let mut teacher: Option<ModelParams> = None;
    let mut snapshot: Option<PrototypeStore> = None;

    for t in 1..=schedule.num_tasks() {
        if t > 1 {
            teacher = Some(global.clone());
            snapshot = Some(global_prototypes.snapshot(t));
        }
        let task_classes = schedule.task_classes(t)?.clone();
        let active = schedule.cumulative_classes(t)?;
        let client_data: Vec<Dataset> = partitions[t - 1]
            .clients
            .iter()
            .map(|idx| task_data[t - 1].subset(idx))
            .collect();
        let teacher_fingerprint = teacher.as_ref().map(ModelParams::fingerprint);
        let cost = server::comm_cost(global.total_params() as u64, active.len() as u64, d as u64);

        for r in 1..=cfg.rounds {
            let ctx = RoundContext {
                global: &global,
                global_prototypes: &global_prototypes,
                snapshot: snapshot.as_ref(),
                teacher: teacher.as_ref(),
                task: t,
                round: r,
                classes_seen: active.len(),
                task_classes: &task_classes,
            };
            let results = states
                .par_iter_mut()
                .zip(client_data.par_iter())
                .map(|(state, data)| local_train(state, ctx, data, cfg))
                .collect::<Result<Vec<_>>>()?;
            let (updates, traces): (Vec<_>, Vec<_>) = results.into_iter().unzip();

            let params: Vec<&ModelParams> = updates.iter().map(|u| &u.params).collect();
            let protos: Vec<&PrototypeStore> = updates.iter().map(|u| &u.prototypes).collect();
            let counts: Vec<Vec<u64>> = updates.iter().map(|u| u.counts.clone()).collect();
            let agg =
                server::aggregate(&params, &protos, &counts, &global, &active, cfg.methods.ca)?;
            let server::Aggregate {
                model,
                prototypes,
                weights,
            } = agg;
            global = model;
            global_prototypes = prototypes;
            let drift_norm = match &snapshot {
                Some(s) => compute_drift(&global_prototypes, s)?.mean_norm(),
                None => 0.0,
            };

            let accuracy = if cfg.per_round_eval {
                Some(evaluate(&global, &cumulative_test_set(&test, &schedule, t)?)?.accuracy)
            } else {
                None
            };
            round_records.push(RoundRecord {
                task: t,
                round: r,
                mean_forgetting: mean(traces.iter().filter_map(|tr| tr.forgetting)),
                mean_lambda_distill: mean(traces.iter().map(|tr| tr.lambda_distill)).unwrap_or(0.0),
                mean_lambda_replay: mean(traces.iter().map(|tr| tr.lambda_replay)).unwrap_or(0.0),
                conflict_rate: {
                    let steps: usize = traces.iter().map(|tr| tr.steps).sum();
                    let conflicts: usize = traces.iter().map(|tr| tr.conflict_steps).sum();
                    if steps == 0 {
                        0.0
                    } else {
                        conflicts as f64 / steps as f64
                    }
                },
                accuracy,
            });
            aggregation.push(AggregationRecord {
                task: t,
                round: r,
                comm_cost_bytes: cost * cfg.clients as u64,
                teacher_fingerprint: teacher_fingerprint.clone(),
                drift_mean_norm: drift_norm,
                class_weights: cfg.methods.ca.then_some(weights.per_class),
            });
            per_round_cost.push(cost);
            client_traces.extend(traces);
        }

        let eval = evaluate(&global, &cumulative_test_set(&test, &schedule, t)?)?;
        let old: BTreeSet<usize> = active.difference(&task_classes).copied().collect();
        task_records.push(TaskRecord {
            task: t,
            accuracy: eval.accuracy,
            old_accuracy: eval.subset_accuracy(&old),
            new_accuracy: eval.subset_accuracy(&task_classes),
            drift_mean_norm: aggregation.last().map_or(0.0, |a| a.drift_mean_norm),
        });
        accuracies.push(eval.accuracy);
        last_eval = Some(eval);
    }

    let summary = summarize_accuracies(&accuracies)?;
    let final_eval = last_eval.expect("at least one task");
    let report = MetricsReport {
        method: cfg.methods.label(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        final_accuracy: summary.final_accuracy,
        degradation: summary.degradation,
        average_accuracy: summary.average,
        accuracies,
        per_class_final: final_eval.per_class,
        tasks: task_records,
        rounds: round_records,
        comm_cost_total_bytes: per_round_cost.iter().sum::<u64>() * cfg.clients as u64,
        comm_cost_per_client_round_bytes: per_round_cost,
        total_steps: client_traces.iter().map(|t| t.steps).sum(),
        conflict_steps: client_traces.iter().map(|t| t.conflict_steps).sum(),
        min_projected_dot: client_traces
            .iter()
            .filter_map(|t| t.min_projected_dot)
            .reduce(f64::min),
        max_norm_excess: client_traces
            .iter()
            .filter_map(|t| t.max_norm_excess)
            .reduce(f64::max),
    };
    Ok(RunOutput {
        report,
        client_traces,
        aggregation,
    })
}

/// The comparison methods of the baseline suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    FedAvg,
    FedAvgKd,
    FedAvgReplay,
    Full,
    Joint,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::FedAvg,
        Method::FedAvgKd,
        Method::FedAvgReplay,
        Method::Full,
        Method::Joint,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::FedAvg => "FedAvg",
            Method::FedAvgKd => "FedAvg+KD",
            Method::FedAvgReplay => "FedAvg+Replay",
            Method::Full => "MLFCIL",
            Method::Joint => "Joint",
        }
    }

    pub fn flags(&self) -> MethodFlags {
        match self {
            Method::FedAvg => MethodFlags::NONE,
            Method::FedAvgKd => MethodFlags {
                kd: true,
                ..MethodFlags::NONE
            },
            Method::FedAvgReplay => MethodFlags {
                mr: true,
                ..MethodFlags::NONE
            },
            Method::Full | Method::Joint => MethodFlags::ALL,
        }
    }

    /// The method's config derived from `base`. The joint oracle trains one
    /// task holding every class for `rounds * tasks` rounds.
    pub fn configure(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.with_methods(self.flags());
        if *self == Method::Joint {
            cfg.rounds = base.rounds * base.tasks;
            cfg.tasks = 1;
            cfg.schedule = None;
        }
        cfg
    }
}

/// The eleven flag combinations of the ablation grid, in table order.
pub fn ablation_lattice() -> Vec<(String, MethodFlags)> {
    let base = MethodFlags {
        cw: true,
        kd: true,
        mr: true,
        ca: true,
        ..MethodFlags::NONE
    };
    let rows = [
        MethodFlags::NONE,
        MethodFlags {
            cw: true,
            ..MethodFlags::NONE
        },
        MethodFlags {
            cw: true,
            kd: true,
            ..MethodFlags::NONE
        },
        MethodFlags {
            cw: true,
            kd: true,
            mr: true,
            ..MethodFlags::NONE
        },
        base,
        MethodFlags { ab: true, ..base },
        MethodFlags { dc: true, ..base },
        MethodFlags { gp: true, ..base },
        MethodFlags {
            ab: true,
            dc: true,
            ..base
        },
        MethodFlags {
            ab: true,
            gp: true,
            ..base
        },
        MethodFlags::ALL,
    ];
    rows.iter()
        .map(|flags| {
            let label = match *flags {
                MethodFlags::NONE => "FedAvg (none)".to_string(),
                MethodFlags::ALL => "Full (all)".to_string(),
                other => other.label(),
            };
            (label, *flags)
        })
        .collect()
}

/// Dirichlet concentrations of the Non-IID sweep.
pub const NONIID_ALPHAS: [f64; 5] = [0.1, 0.3, 0.5, 1.0, 5.0];

/// One (row label, seed) result of a suite.
#[derive(Clone, Debug)]
pub struct SuiteCell {
    pub label: String,
    pub seed: u64,
    pub output: RunOutput,
}

/// Runs every `(label, config)` for every seed, in parallel. Results come
/// back in row-major `(config, seed)` order regardless of scheduling.
pub fn run_suite(rows: &[(String, ExperimentConfig)], seeds: &[u64]) -> Result<Vec<SuiteCell>> {
    let jobs: Vec<(&String, ExperimentConfig, u64)> = rows
        .iter()
        .flat_map(|(label, cfg)| seeds.iter().map(move |&s| (label, cfg.with_seed(s), s)))
        .collect();
    jobs.into_par_iter()
        .map(|(label, cfg, seed)| {
            Ok(SuiteCell {
                label: label.clone(),
                seed,
                output: run_experiment(&cfg)?,
            })
        })
        .collect()
}

/// FedAvg, FedAvg+KD, FedAvg+Replay, full method and the joint oracle.
pub fn baseline_rows(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    Method::ALL
        .iter()
        .map(|m| (m.name().to_string(), m.configure(base)))
        .collect()
}

pub fn run_baseline_suite(base: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<SuiteCell>> {
    run_suite(&baseline_rows(base), seeds)
}

pub fn ablation_rows(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    ablation_lattice()
        .into_iter()
        .map(|(label, flags)| (label, base.with_methods(flags)))
        .collect()
}

/// `(method, alpha)` rows for FedAvg and the full method.
pub fn noniid_rows(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    [Method::Full, Method::FedAvg]
        .iter()
        .flat_map(|m| {
            NONIID_ALPHAS.iter().map(move |&alpha| {
                let mut cfg = m.configure(base);
                cfg.dirichlet_alpha = alpha;
                (format!("{}@{alpha}", m.name()), cfg)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    #[test]
    fn metric_arithmetic_matches_reported_rows() {
        let s = summarize_accuracies(&[78.2, 70.5, 67.8]).unwrap();
        assert_eq!(format!("{:.1}", s.average), "72.2");
        assert_eq!(format!("{:.1}", s.degradation), "10.4");
        let s = summarize_accuracies(&[78.2, 52.4, 41.3]).unwrap();
        assert_eq!(format!("{:.1}", s.average), "57.3");
        assert_eq!(format!("{:.1}", s.degradation), "36.9");
        let s = summarize_accuracies(&[0.6]).unwrap();
        assert_eq!(
            (s.average, s.degradation, s.final_accuracy),
            (0.6, 0.0, 0.6)
        );
        assert!(summarize_accuracies(&[]).is_err());
    }

    fn one_hot_model(classes: usize) -> ModelParams {
        let mut eye = vec![0.0; classes * classes];
        for i in 0..classes {
            eye[i * classes + i] = 1.0;
        }
        let ext = Linear::new(classes, classes, eye.clone(), vec![0.0; classes]).unwrap();
        let cls = Linear::new(classes, classes, eye, vec![0.0; classes]).unwrap();
        ModelParams::from_layers(vec![ext], cls).unwrap()
    }

    #[test]
    fn evaluation_cases() {
        let classes = 3;
        let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&l| {
                (0..classes)
                    .map(|c| if c == l { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let test = Dataset::new(
            crate::nn::Matrix::from_rows(&rows).unwrap(),
            labels,
            classes,
            data::Split::Test,
        )
        .unwrap();
        let perfect = evaluate(&one_hot_model(classes), &test).unwrap();
        assert_eq!(perfect.accuracy, 1.0);
        let total: u64 = perfect.confusion.iter().flatten().sum();
        assert_eq!(total, 9);

        let ext = Linear::new(3, 3, vec![0.0; 9], vec![0.0; 3]).unwrap();
        let cls = Linear::new(3, 3, vec![0.0; 9], vec![0.0; 3]).unwrap();
        let constant = ModelParams::from_layers(vec![ext], cls).unwrap();
        let chance = evaluate(&constant, &test).unwrap();
        assert!((chance.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(chance.per_class, vec![Some(1.0), Some(0.0), Some(0.0)]);
    }

    #[test]
    fn lattice_shape() {
        let rows = ablation_lattice();
        assert_eq!(rows.len(), 11);
        assert_eq!(rows[0].1, MethodFlags::NONE);
        assert_eq!(rows[10].1, MethodFlags::ALL);
        assert_eq!(
            rows[1].1,
            MethodFlags {
                cw: true,
                ..MethodFlags::NONE
            }
        );
        assert_eq!(rows[4].0, "+CW+KD+MR+CA");
        assert_eq!(rows[9].0, "+CW+KD+MR+CA+AB+GP");
    }

    #[test]
    fn joint_oracle_is_single_task_with_equal_budget() {
        let base = ExperimentConfig::default();
        let joint = Method::Joint.configure(&base);
        assert_eq!(joint.tasks, 1);
        assert_eq!(joint.rounds, base.rounds * base.tasks);
        assert_eq!(Method::FedAvg.flags(), MethodFlags::NONE);
    }
}
