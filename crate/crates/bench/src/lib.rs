//! Fixtures for the criterion benches: a warmed-up client entering its
//! second task, and a batch of client updates ready for aggregation.

use std::collections::BTreeSet;

use fcil_core::client::{local_train, RoundContext};
use fcil_core::data::split_tasks;
use fcil_core::orchestrator::load_data;
use fcil_core::rng::{self, Purpose};
use fcil_core::server::{aggregate, aggregate_prototypes, Aggregate};
use fcil_core::{
    ClientState, ClientTrace, ClientUpdate, Dataset, ExperimentConfig, ModelParams, PrototypeStore,
    Result,
};

pub struct Scenario {
    pub cfg: ExperimentConfig,
    global: ModelParams,
    prototypes: PrototypeStore,
    snapshot: PrototypeStore,
    warm: ClientState,
    second_task: Dataset,
    second_classes: BTreeSet<usize>,
    updates: Vec<ClientUpdate>,
}

impl Scenario {
    /// One client trains task 1 on all of its data, then every client's
    /// task-2 update is taken as the same warm update.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let (train, _) = load_data(&cfg)?;
        let schedule = cfg.task_schedule()?;
        let tasks = split_tasks(&train, &schedule)?;
        let first_classes = schedule.task_classes(1)?.clone();
        let second_classes = schedule.task_classes(2)?.clone();
        let d = cfg.embedding_dim();
        let empty = PrototypeStore::new(fcil_core::memory::StoreRole::Global, d);
        let mut init_rng = rng::stream(cfg.seed, Purpose::Init, 0, 0, 0);
        let init = ModelParams::init(train.input_dim(), &cfg.hidden, cfg.classes, &mut init_rng)?;

        let mut warm = ClientState::new(0, cfg.classes, d, cfg.memory_budget);
        let ctx = RoundContext {
            global: &init,
            global_prototypes: &empty,
            snapshot: None,
            teacher: None,
            task: 1,
            round: 1,
            classes_seen: first_classes.len(),
            task_classes: &first_classes,
        };
        let (update, _) = local_train(&mut warm, ctx, &tasks[0], &cfg)?;
        let prototypes =
            aggregate_prototypes(&[&update.prototypes], std::slice::from_ref(&update.counts))?;
        let snapshot = prototypes.snapshot(2);
        let updates = vec![update; cfg.clients];
        Ok(Self {
            global: updates[0].params.clone(),
            prototypes,
            snapshot,
            warm,
            second_task: tasks[1].clone(),
            second_classes,
            updates,
            cfg,
        })
    }

    /// One full local round of task 2 with every mechanism enabled.
    pub fn train_round(&self) -> Result<ClientTrace> {
        let mut state = self.warm.clone();
        let ctx = RoundContext {
            global: &self.global,
            global_prototypes: &self.prototypes,
            snapshot: Some(&self.snapshot),
            teacher: Some(&self.global),
            task: 2,
            round: 1,
            classes_seen: self.snapshot.len() + self.second_classes.len(),
            task_classes: &self.second_classes,
        };
        Ok(local_train(&mut state, ctx, &self.second_task, &self.cfg)?.1)
    }

    /// Server-side aggregation of all client updates.
    pub fn aggregate(&self) -> Result<Aggregate> {
        let params: Vec<&ModelParams> = self.updates.iter().map(|u| &u.params).collect();
        let protos: Vec<&PrototypeStore> = self.updates.iter().map(|u| &u.prototypes).collect();
        let counts: Vec<Vec<u64>> = self.updates.iter().map(|u| u.counts.clone()).collect();
        let active: BTreeSet<usize> = (0..self.cfg.classes).collect();
        aggregate(
            &params,
            &protos,
            &counts,
            &self.global,
            &active,
            self.cfg.methods.ca,
        )
    }
}
