use fcil_core::orchestrator::{ablation_lattice, noniid_rows, summarize_accuracies, Method};
use fcil_core::{run_experiment, DataSource, ExperimentConfig, MethodFlags};

/// A reduced protocol that keeps every mechanism active but runs fast.
fn small() -> ExperimentConfig {
    ExperimentConfig {
        classes: 6,
        tasks: 3,
        clients: 3,
        rounds: 2,
        local_epochs: 2,
        memory_budget: 60,
        data: DataSource::Synthetic {
            per_class: 40,
            input_dim: 6,
            cluster_spread: 1.0,
        },
        ..ExperimentConfig::default()
    }
}

#[test]
fn identical_configs_give_identical_reports() {
    let cfg = small();
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(
        serde_json::to_string(&a.report).unwrap(),
        serde_json::to_string(&b.report).unwrap()
    );
    assert_eq!(
        serde_json::to_string(&a.client_traces).unwrap(),
        serde_json::to_string(&b.client_traces).unwrap()
    );
    let c = run_experiment(&cfg.with_seed(1)).unwrap();
    assert_ne!(a.report.accuracies, c.report.accuracies);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let cfg = small();
    let serial = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let a = serial.install(|| run_experiment(&cfg).unwrap());
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(
        serde_json::to_string(&a.report).unwrap(),
        serde_json::to_string(&b.report).unwrap()
    );
}

#[test]
fn all_flags_off_is_fedavg() {
    let cfg = small();
    let plain = run_experiment(&cfg.with_methods(MethodFlags::NONE)).unwrap();
    let baseline = run_experiment(&Method::FedAvg.configure(&cfg)).unwrap();
    assert_eq!(plain.report.accuracies, baseline.report.accuracies);
    assert_eq!(plain.report.conflict_steps, 0);
    assert!(plain
        .client_traces
        .iter()
        .all(|t| t.lambda_distill == 0.0 && t.lambda_replay == 0.0));
}

#[test]
fn single_task_has_no_teacher_and_no_degradation() {
    let cfg = ExperimentConfig {
        tasks: 1,
        ..small()
    };
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.report.accuracies.len(), 1);
    assert_eq!(out.report.degradation, 0.0);
    assert_eq!(out.report.average_accuracy, out.report.final_accuracy);
    assert!(out
        .aggregation
        .iter()
        .all(|a| a.teacher_fingerprint.is_none() && a.drift_mean_norm == 0.0));
    assert!(out
        .client_traces
        .iter()
        .all(|t| t.lambda_distill == 0.0 && t.lambda_replay == 0.0));
}

#[test]
fn teacher_is_fixed_within_each_task() {
    let out = run_experiment(&small()).unwrap();
    let fingerprints: Vec<(usize, Option<String>)> = out
        .aggregation
        .iter()
        .map(|a| (a.task, a.teacher_fingerprint.clone()))
        .collect();
    for t in 2..=3 {
        let per_task: Vec<_> = fingerprints.iter().filter(|(task, _)| *task == t).collect();
        assert!(per_task
            .iter()
            .all(|(_, f)| f.is_some() && *f == per_task[0].1));
    }
    assert_ne!(fingerprints[2].1, fingerprints[4].1);
}

#[test]
fn report_fields_are_consistent() {
    let out = run_experiment(&small()).unwrap();
    let r = &out.report;
    assert!(r.accuracies.iter().all(|a| (0.0..=1.0).contains(a)));
    let s = summarize_accuracies(&r.accuracies).unwrap();
    assert_eq!(r.degradation, r.accuracies[0] - r.accuracies[2]);
    assert_eq!(r.average_accuracy, s.average);
    assert_eq!(r.tasks.len(), 3);
    assert!(r.tasks[0].old_accuracy.is_none() && r.tasks[1].old_accuracy.is_some());
    assert_eq!(r.per_class_final.len(), 6);
    assert_eq!(
        r.comm_cost_total_bytes,
        r.comm_cost_per_client_round_bytes.iter().sum::<u64>() * 3
    );
    assert!(r.min_projected_dot.unwrap() >= -1e-12);
    assert!(r.max_norm_excess.unwrap() <= 1e-12);
    // conflicts show up as soon as distillation starts
    let t2r1: Vec<_> = out
        .client_traces
        .iter()
        .filter(|t| t.task == 2 && t.round == 1)
        .collect();
    assert!(t2r1.iter().map(|t| t.conflict_steps).sum::<usize>() > 0);
}

#[test]
fn per_round_evaluation_is_optional() {
    let cfg = ExperimentConfig {
        per_round_eval: true,
        ..small()
    };
    let out = run_experiment(&cfg).unwrap();
    assert!(out.report.rounds.iter().all(|r| r.accuracy.is_some()));
    let last = out.report.rounds.last().unwrap().accuracy.unwrap();
    assert_eq!(last, out.report.final_accuracy);
}

#[test]
fn suite_shapes() {
    let lattice = ablation_lattice();
    assert_eq!(lattice.len(), 11);
    for pair in lattice.windows(2).take(4) {
        let (a, b) = (pair[0].1, pair[1].1);
        let diff = [
            a.cw != b.cw,
            a.kd != b.kd,
            a.mr != b.mr,
            a.ca != b.ca,
            a.ab != b.ab,
            a.dc != b.dc,
            a.gp != b.gp,
        ];
        assert_eq!(diff.iter().filter(|&&d| d).count(), 1);
    }
    assert_eq!(noniid_rows(&small()).len(), 10);
    let base = small();
    let kd = Method::FedAvgKd.configure(&base).methods;
    assert!(kd.kd && !kd.ab && !kd.mr);
    let replay = Method::FedAvgReplay.configure(&base).methods;
    assert!(replay.mr && !replay.ab && !replay.dc && !replay.kd);
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let cfg = ExperimentConfig {
        clients: 0,
        ..small()
    };
    let err = run_experiment(&cfg).unwrap_err();
    assert!(err.to_string().contains("clients"));
}
