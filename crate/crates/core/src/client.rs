//! Client-side local training.
//!
//! One call to [`local_train`] runs a full round at one client: class
//! weights from cumulative counts, a forgetting score on the replay buffer,
//! adaptive loss weights, and `E_L` epochs of minibatch steps that combine
//! the classification, distillation and replay losses. On the feature
//! extractor the plasticity gradient is projected away from the stability
//! gradient whenever the two conflict.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::memory::{
    compute_drift, per_class_quota, DriftTable, PrototypeStore, ReplayBuffer, ReplayEntry,
    StoreRole,
};
use crate::nn::{
    self, AdamConfig, GradientVector, Matrix, ModelParams, OptimizerState, ParamGroup, UpdateRule,
};
use crate::rng::{self, Purpose};

/// Per-class loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub boost: f64,
    pub seen: BTreeSet<usize>,
    pub new: BTreeSet<usize>,
}

/// Inverse-frequency weights `sum_c' n_c' / (|seen| n_c)`, times `boost` for
/// new classes. A seen class with no local samples gets the neutral weight
/// 1 before boosting; classes outside `seen` get 1.
pub fn compute_class_weights(
    counts: &[u64],
    seen: &BTreeSet<usize>,
    new: &BTreeSet<usize>,
    boost: f64,
) -> ClassWeights {
    let total: u64 = seen
        .iter()
        .map(|&c| counts.get(c).copied().unwrap_or(0))
        .sum();
    let n_seen = seen.len().max(1) as f64;
    let weights = (0..counts.len())
        .map(|c| {
            let base = if seen.contains(&c) && counts[c] > 0 {
                total as f64 / (n_seen * counts[c] as f64)
            } else {
                1.0
            };
            if new.contains(&c) {
                base * boost
            } else {
                base
            }
        })
        .collect();
    ClassWeights {
        weights,
        boost,
        seen: seen.clone(),
        new: new.clone(),
    }
}

/// Worst-case buffer error over the drift-compensated and raw views.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingScore {
    pub score: f64,
    pub compensated_error: f64,
    pub raw_error: f64,
}

fn argmax(row: &[f64]) -> usize {
    // lowest index wins ties
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn classifier_error(
    params: &ModelParams,
    embeddings: Vec<Vec<f64>>,
    labels: &[usize],
) -> Result<f64> {
    let logits = params.forward_classifier(&Matrix::from_rows(&embeddings)?)?;
    let wrong = logits
        .iter_rows()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) != y)
        .count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// `None` when the buffer is empty.
pub fn forgetting_score(
    params: &ModelParams,
    buffer: &ReplayBuffer,
    drift: &DriftTable,
) -> Result<Option<ForgettingScore>> {
    if buffer.is_empty() {
        return Ok(None);
    }
    let labels: Vec<usize> = buffer.entries().iter().map(|e| e.label).collect();
    let raw: Vec<Vec<f64>> = buffer
        .entries()
        .iter()
        .map(|e| e.embedding.clone())
        .collect();
    let compensated: Vec<Vec<f64>> = buffer
        .entries()
        .iter()
        .map(|e| drift.compensate_entry(&e.embedding, e.label))
        .collect();
    let compensated_error = classifier_error(params, compensated, &labels)?;
    let raw_error = classifier_error(params, raw, &labels)?;
    Ok(Some(ForgettingScore {
        score: compensated_error.max(raw_error),
        compensated_error,
        raw_error,
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeightSchedule {
    pub base_distill: f64,
    pub base_replay: f64,
    pub sensitivity: f64,
    pub max_distill: f64,
    pub max_replay: f64,
}

impl LossWeightSchedule {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            base_distill: cfg.lambda_distill,
            base_replay: cfg.lambda_replay,
            sensitivity: cfg.sensitivity,
            max_distill: cfg.lambda_distill_max,
            max_replay: cfg.lambda_replay_max,
        }
    }

    pub fn bases(&self) -> AdaptiveWeights {
        AdaptiveWeights {
            distill: self.base_distill,
            replay: self.base_replay,
        }
    }
}

impl Default for LossWeightSchedule {
    fn default() -> Self {
        Self::from_config(&ExperimentConfig::default())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveWeights {
    pub distill: f64,
    pub replay: f64,
}

impl AdaptiveWeights {
    pub const ZERO: AdaptiveWeights = AdaptiveWeights {
        distill: 0.0,
        replay: 0.0,
    };
}

/// `lambda = min(lambda0 (1 + gamma F), lambda_max)` for both terms.
pub fn adapt_loss_weights(forgetting: f64, schedule: &LossWeightSchedule) -> AdaptiveWeights {
    let factor = 1.0 + schedule.sensitivity * forgetting;
    AdaptiveWeights {
        distill: (schedule.base_distill * factor).min(schedule.max_distill),
        replay: (schedule.base_replay * factor).min(schedule.max_replay),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub gradient: GradientVector,
    /// `g_plas . g_stab < 0` before projection.
    pub conflict: bool,
    pub dot_before: f64,
}

/// Removes the component of `g_plas` that opposes `g_stab`. A zero
/// stability gradient leaves `g_plas` untouched.
pub fn project_gradient(g_plas: &GradientVector, g_stab: &GradientVector) -> Result<Projection> {
    let dot = g_plas.dot(g_stab)?;
    let stab_sq = g_stab.norm_squared();
    if stab_sq == 0.0 || dot >= 0.0 {
        return Ok(Projection {
            gradient: g_plas.clone(),
            conflict: dot < 0.0,
            dot_before: dot,
        });
    }
    let mut gradient = g_plas.clone();
    gradient.add_scaled(-dot / stab_sq, g_stab)?;
    Ok(Projection {
        gradient,
        conflict: true,
        dot_before: dot,
    })
}

/// Cross-entropy of the classifier on (compensated) stored embeddings.
pub fn replay_loss(params: &ModelParams, batch: &[(Vec<f64>, usize)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("replay batch is empty".into()));
    }
    let rows: Vec<&[f64]> = batch.iter().map(|(z, _)| z.as_slice()).collect();
    let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
    nn::loss(
        params,
        nn::LossSpec::Replay {
            embeddings: &Matrix::from_rows(&rows)?,
            labels: &labels,
        },
    )
}

/// State a client keeps across rounds and tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub id: usize,
    pub prototypes: PrototypeStore,
    pub buffer: ReplayBuffer,
    counts: Vec<u64>,
}

impl ClientState {
    pub fn new(id: usize, classes: usize, embedding_dim: usize, memory_budget: usize) -> Self {
        Self {
            id,
            prototypes: PrototypeStore::new(StoreRole::Local { client: id }, embedding_dim),
            buffer: ReplayBuffer::new(memory_budget, embedding_dim),
            counts: vec![0; classes],
        }
    }

    /// Cumulative per-class sample counts.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
}

/// Per-round upload to the server.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    pub params: ModelParams,
    pub prototypes: PrototypeStore,
    pub counts: Vec<u64>,
}

/// One JSON-lines trace record per client and round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientTrace {
    pub client: usize,
    pub task: usize,
    pub round: usize,
    #[serde(rename = "F")]
    pub forgetting: Option<f64>,
    pub compensated_error: Option<f64>,
    pub raw_error: Option<f64>,
    #[serde(rename = "lambda_d")]
    pub lambda_distill: f64,
    #[serde(rename = "lambda_r")]
    pub lambda_replay: f64,
    pub steps: usize,
    pub conflict_steps: usize,
    pub conflict_rate: f64,
    pub loss_cls: f64,
    pub loss_distill: f64,
    pub loss_replay: f64,
    pub samples_seen: u64,
    pub drift_mean_norm: f64,
    pub mean_cos_before: Option<f64>,
    pub mean_cos_after: Option<f64>,
    /// Smallest `g'_plas . g_stab` over projected steps.
    pub min_projected_dot: Option<f64>,
    /// Largest `||g'_plas|| - ||g_plas||` over all steps.
    pub max_norm_excess: Option<f64>,
}

/// Everything the server broadcasts for one round.
#[derive(Clone, Copy, Debug)]
pub struct RoundContext<'a> {
    pub global: &'a ModelParams,
    pub global_prototypes: &'a PrototypeStore,
    pub snapshot: Option<&'a PrototypeStore>,
    pub teacher: Option<&'a ModelParams>,
    /// 1-based task index.
    pub task: usize,
    /// 1-based round index within the task.
    pub round: usize,
    /// `|Y_{1:t}|`
    pub classes_seen: usize,
    pub task_classes: &'a BTreeSet<usize>,
}

#[derive(Default)]
struct TraceAccumulator {
    steps: usize,
    conflicts: usize,
    loss_cls: f64,
    loss_distill: f64,
    loss_replay: f64,
    cos_before: Vec<f64>,
    cos_after: Vec<f64>,
    min_projected_dot: Option<f64>,
    max_norm_excess: Option<f64>,
}

fn cosine(a: &GradientVector, b: &GradientVector, dot: f64) -> Option<f64> {
    let denom = a.norm() * b.norm();
    (denom > 0.0).then(|| dot / denom)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs one round of local training for `state.id` on `data`.
pub fn local_train(
    state: &mut ClientState,
    ctx: RoundContext<'_>,
    data: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<(ClientUpdate, ClientTrace)> {
    if ctx.task == 0 || ctx.round == 0 {
        return Err(Error::Config("task and round indices are 1-based".into()));
    }
    let flags = cfg.methods;
    let classes = ctx.global.num_classes();
    if state.counts.len() != classes {
        return Err(Error::shape(
            "client class counts",
            classes,
            state.counts.len(),
        ));
    }
    let distilling = ctx.task > 1 && flags.kd;
    if distilling && ctx.teacher.is_none() {
        return Err(Error::Config(format!(
            "task {} needs a teacher model for distillation",
            ctx.task
        )));
    }
    let seed_of = |purpose| {
        rng::stream(
            cfg.seed,
            purpose,
            state.id as u64,
            ctx.task as u64,
            ctx.round as u64,
        )
    };
    let mut shuffle_rng = seed_of(Purpose::Shuffle);
    let mut buffer_rng = seed_of(Purpose::Buffer);
    let mut replay_rng = seed_of(Purpose::Replay);

    let mut params = ctx.global.clone();
    let quota = per_class_quota(cfg.memory_budget, ctx.classes_seen);
    if flags.mr {
        state.buffer.rebalance(quota, &mut buffer_rng);
    }

    let drift = match (flags.dc, ctx.snapshot) {
        (true, Some(snapshot)) if ctx.task > 1 => compute_drift(ctx.global_prototypes, snapshot)?,
        _ => DriftTable::empty(params.embedding_dim()),
    };

    let schedule = LossWeightSchedule::from_config(cfg);
    let mut score = None;
    let mut lambdas = if ctx.task == 1 {
        AdaptiveWeights::ZERO
    } else if flags.ab {
        score = forgetting_score(&params, &state.buffer, &drift)?;
        match score {
            Some(s) => adapt_loss_weights(s.score, &schedule),
            None => schedule.bases(),
        }
    } else {
        schedule.bases()
    };
    if !flags.kd {
        lambdas.distill = 0.0;
    }
    if !flags.mr {
        lambdas.replay = 0.0;
    }

    let present = data.classes_present();
    let new_classes: BTreeSet<usize> = present.intersection(ctx.task_classes).copied().collect();
    let class_weights = if flags.cw {
        let seen: BTreeSet<usize> = (0..classes)
            .filter(|&c| state.counts[c] > 0)
            .chain(present.iter().copied())
            .collect();
        compute_class_weights(&state.counts, &seen, &new_classes, cfg.boost).weights
    } else {
        vec![1.0; classes]
    };

    let mut trace = ClientTrace {
        client: state.id,
        task: ctx.task,
        round: ctx.round,
        forgetting: score.map(|s| s.score),
        compensated_error: score.map(|s| s.compensated_error),
        raw_error: score.map(|s| s.raw_error),
        lambda_distill: lambdas.distill,
        lambda_replay: lambdas.replay,
        steps: 0,
        conflict_steps: 0,
        conflict_rate: 0.0,
        loss_cls: 0.0,
        loss_distill: 0.0,
        loss_replay: 0.0,
        samples_seen: 0,
        drift_mean_norm: drift.mean_norm(),
        mean_cos_before: None,
        mean_cos_after: None,
        min_projected_dot: None,
        max_norm_excess: None,
    };

    if data.is_empty() {
        let update = ClientUpdate {
            client: state.id,
            params,
            prototypes: state.prototypes.clone(),
            counts: state.counts.clone(),
        };
        return Ok((update, trace));
    }
    if data.input_dim() != params.input_dim() {
        return Err(Error::shape(
            "client data width",
            params.input_dim(),
            data.input_dim(),
        ));
    }

    let mut optimizer = OptimizerState::new(
        &params,
        AdamConfig::with_learning_rate(cfg.learning_rate),
        UpdateRule::Adam,
    );
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut acc = TraceAccumulator::default();
    for _epoch in 0..cfg.local_epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| data.features().row(i)).collect();
            let inputs = Matrix::from_rows(&rows)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            train_step(
                &mut params,
                &mut optimizer,
                state,
                StepInputs {
                    inputs: &inputs,
                    labels: &labels,
                    class_weights: &class_weights,
                    lambdas,
                    teacher: if distilling && lambdas.distill > 0.0 {
                        ctx.teacher
                    } else {
                        None
                    },
                    drift: &drift,
                    quota,
                },
                cfg,
                &mut buffer_rng,
                &mut replay_rng,
                &mut acc,
            )?;
        }
    }

    let steps = acc.steps.max(1) as f64;
    trace.steps = acc.steps;
    trace.conflict_steps = acc.conflicts;
    trace.conflict_rate = acc.conflicts as f64 / steps;
    trace.loss_cls = acc.loss_cls / steps;
    trace.loss_distill = acc.loss_distill / steps;
    trace.loss_replay = acc.loss_replay / steps;
    trace.samples_seen = (data.len() * cfg.local_epochs) as u64;
    trace.mean_cos_before = mean(&acc.cos_before);
    trace.mean_cos_after = mean(&acc.cos_after);
    trace.min_projected_dot = acc.min_projected_dot;
    trace.max_norm_excess = acc.max_norm_excess;

    let update = ClientUpdate {
        client: state.id,
        params,
        prototypes: state.prototypes.clone(),
        counts: state.counts.clone(),
    };
    Ok((update, trace))
}

struct StepInputs<'a> {
    inputs: &'a Matrix,
    labels: &'a [usize],
    class_weights: &'a [f64],
    lambdas: AdaptiveWeights,
    teacher: Option<&'a ModelParams>,
    drift: &'a DriftTable,
    quota: usize,
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    params: &mut ModelParams,
    optimizer: &mut OptimizerState,
    state: &mut ClientState,
    step: StepInputs<'_>,
    cfg: &ExperimentConfig,
    buffer_rng: &mut rng::StreamRng,
    replay_rng: &mut rng::StreamRng,
    acc: &mut TraceAccumulator,
) -> Result<()> {
    let flags = cfg.methods;
    let trace = params.trace_features(step.inputs)?;
    let embeddings = trace.embeddings();

    // prototypes, counts and buffer see embeddings from the current extractor
    for (z, &y) in embeddings.iter_rows().zip(step.labels) {
        state.prototypes.update(y, z)?;
        state.counts[y] += 1;
        if flags.mr {
            state.buffer.observe(y);
            state.buffer.insert(z, y, step.quota, buffer_rng)?;
        }
    }

    let logits = params.forward_classifier(embeddings)?;
    let cls = nn::weighted_cross_entropy_grad(&logits, step.labels, step.class_weights)?;
    let (cls_c, dz_cls) = params.backward_classifier(embeddings, &cls.d_logits, true);
    let g_plas = GradientVector {
        group: ParamGroup::FeatureExtractor,
        values: params.backward_extractor(&trace, &dz_cls.expect("requested")),
    };
    let mut grad_c = GradientVector {
        group: ParamGroup::Classifier,
        values: cls_c,
    };
    acc.loss_cls += cls.loss;

    let mut g_stab = None;
    if let Some(teacher) = step.teacher {
        let teacher_logits = teacher.forward(step.inputs)?;
        let kd = nn::kd_loss_grad(&logits, &teacher_logits, cfg.temperature)?;
        let (kd_c, dz_kd) = params.backward_classifier(embeddings, &kd.d_logits, true);
        let kd_f = GradientVector {
            group: ParamGroup::FeatureExtractor,
            values: params.backward_extractor(&trace, &dz_kd.expect("requested")),
        };
        grad_c.add_scaled(
            step.lambdas.distill,
            &GradientVector {
                group: ParamGroup::Classifier,
                values: kd_c,
            },
        )?;
        g_stab = Some(kd_f.scaled(step.lambdas.distill));
        acc.loss_distill += kd.loss;
    }

    if step.lambdas.replay > 0.0 {
        let batch_size = cfg.replay_batch_size.min(state.buffer.len());
        if let Some(batch) = state.buffer.sample(batch_size, replay_rng) {
            let (rows, labels): (Vec<Vec<f64>>, Vec<usize>) = batch
                .iter()
                .map(|e: &&ReplayEntry| {
                    (step.drift.compensate_entry(&e.embedding, e.label), e.label)
                })
                .unzip();
            let compensated = Matrix::from_rows(&rows)?;
            let replay_logits = params.forward_classifier(&compensated)?;
            let ones = vec![1.0; params.num_classes()];
            let rep = nn::weighted_cross_entropy_grad(&replay_logits, &labels, &ones)?;
            let (rep_c, _) = params.backward_classifier(&compensated, &rep.d_logits, false);
            grad_c.add_scaled(
                step.lambdas.replay,
                &GradientVector {
                    group: ParamGroup::Classifier,
                    values: rep_c,
                },
            )?;
            acc.loss_replay += rep.loss;
        }
    }

    acc.steps += 1;
    let grad_f = match g_stab {
        None => g_plas,
        Some(g_stab) => {
            let projection = project_gradient(&g_plas, &g_stab)?;
            if projection.conflict {
                acc.conflicts += 1;
            }
            if let Some(cos) = cosine(&g_plas, &g_stab, projection.dot_before) {
                acc.cos_before.push(cos);
            }
            let mut g_prime = if flags.gp {
                projection.gradient
            } else {
                g_plas.clone()
            };
            if flags.gp {
                let after = g_prime.dot(&g_stab)?;
                if let Some(cos) = cosine(&g_prime, &g_stab, after) {
                    acc.cos_after.push(cos);
                }
                if projection.conflict {
                    acc.min_projected_dot =
                        Some(acc.min_projected_dot.map_or(after, |m| m.min(after)));
                }
                let excess = g_prime.norm() - g_plas.norm();
                acc.max_norm_excess = Some(acc.max_norm_excess.map_or(excess, |m| m.max(excess)));
            }
            g_prime.add_scaled(1.0, &g_stab)?;
            g_prime
        }
    };
    nn::optimizer_step(params, optimizer, &grad_f, &grad_c)
}
