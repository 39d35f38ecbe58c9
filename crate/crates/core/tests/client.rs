use std::collections::BTreeSet;

use fcil_core::client::{
    adapt_loss_weights, compute_class_weights, local_train, project_gradient, LossWeightSchedule,
    RoundContext,
};
use fcil_core::data::{generate_synthetic, Split};
use fcil_core::memory::StoreRole;
use fcil_core::nn::{self, AdamConfig, LossSpec, Matrix, UpdateRule};
use fcil_core::rng::{self, Purpose};
use fcil_core::{
    ClientState, Dataset, ExperimentConfig, GradientVector, MethodFlags, ModelParams,
    OptimizerState, ParamGroup, PrototypeStore,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grad(values: Vec<f64>) -> GradientVector {
    GradientVector {
        group: ParamGroup::FeatureExtractor,
        values,
    }
}

#[test]
fn adaptive_weight_endpoints() {
    let s = LossWeightSchedule::default();
    let w0 = adapt_loss_weights(0.0, &s);
    assert_eq!((w0.distill, w0.replay), (0.5, 0.3));
    let w1 = adapt_loss_weights(1.0, &s);
    assert_eq!(w1.distill, 1.5);
    assert_eq!(w1.distill, s.max_distill);
    assert!((w1.replay - 0.9).abs() < 1e-15);
    let w = adapt_loss_weights(0.35, &s);
    assert!((w.distill - 0.85).abs() < 1e-12 && (w.replay - 0.51).abs() < 1e-12);
}

#[test]
fn adaptive_weights_are_monotone_and_bounded() {
    let s = LossWeightSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut fs: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..=1.0)).collect();
    fs.sort_by(f64::total_cmp);
    let mut prev = adapt_loss_weights(0.0, &s);
    for f in fs {
        let w = adapt_loss_weights(f, &s);
        assert!(
            w.distill >= prev.distill && w.replay >= prev.replay,
            "F = {f}"
        );
        assert!((0.5..=1.5).contains(&w.distill) && (0.3..=1.0).contains(&w.replay));
        prev = w;
    }
}

#[test]
fn projection_hand_examples() {
    let p = project_gradient(&grad(vec![1.0, -1.0]), &grad(vec![0.0, 1.0])).unwrap();
    assert!(p.conflict);
    assert_eq!(p.gradient.values, vec![1.0, 0.0]);
    assert_eq!(p.gradient.dot(&grad(vec![0.0, 1.0])).unwrap(), 0.0);

    let p = project_gradient(&grad(vec![-2.0, 3.0]), &grad(vec![2.0, -3.0])).unwrap();
    assert!(p.gradient.values.iter().all(|v| v.abs() < 1e-15));

    let p = project_gradient(&grad(vec![1.0, 0.0]), &grad(vec![0.0, 4.0])).unwrap();
    assert!(!p.conflict);
    assert_eq!(p.gradient.values, vec![1.0, 0.0]);

    let p = project_gradient(&grad(vec![1.0, 2.0]), &grad(vec![0.0, 0.0])).unwrap();
    assert_eq!(p.gradient.values, vec![1.0, 2.0]);
    assert!(project_gradient(&grad(vec![1.0]), &grad(vec![1.0, 2.0])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn projection_is_never_adversarial_and_never_grows(
        pair in (1usize..40).prop_flat_map(|n| (
            prop::collection::vec(-1e3f64..1e3, n),
            prop::collection::vec(-1e3f64..1e3, n),
        ))
    ) {
        let (plas, stab) = (grad(pair.0), grad(pair.1));
        let p = project_gradient(&plas, &stab).unwrap();
        let after = p.gradient.dot(&stab).unwrap();
        let scale = plas.norm() * stab.norm();
        prop_assert!(after >= -1e-12 * scale.max(1.0), "dot after {}", after);
        prop_assert!(p.gradient.norm() <= plas.norm() * (1.0 + 1e-12) + 1e-12);
    }
}

#[test]
fn class_weight_examples() {
    let all: BTreeSet<usize> = [0, 1].into_iter().collect();
    let none = BTreeSet::new();
    let w = compute_class_weights(&[90, 10], &all, &none, 1.5);
    assert!((w.weights[0] - 0.5556).abs() < 1e-4 && (w.weights[1] - 5.0).abs() < 1e-12);
    let zero = compute_class_weights(&[0, 10], &all, &none, 1.5);
    assert_eq!(zero.weights[0], 1.0);
}

struct Fixture {
    cfg: ExperimentConfig,
    global: ModelParams,
    data: Dataset,
    task_classes: BTreeSet<usize>,
}

fn fixture(classes: usize, spread: f64, per_class: usize, methods: MethodFlags) -> Fixture {
    let cfg = ExperimentConfig {
        classes,
        tasks: 1,
        clients: 1,
        methods,
        ..ExperimentConfig::default()
    };
    let (train, _) = generate_synthetic(classes, per_class, 8, spread, 3).unwrap();
    let mut rng = rng::stream(cfg.seed, Purpose::Init, 0, 0, 0);
    let global = ModelParams::init(8, &cfg.hidden, classes, &mut rng).unwrap();
    Fixture {
        cfg,
        global,
        data: train,
        task_classes: (0..classes).collect(),
    }
}

fn ctx<'a>(
    f: &'a Fixture,
    protos: &'a PrototypeStore,
    teacher: Option<&'a ModelParams>,
    task: usize,
) -> RoundContext<'a> {
    RoundContext {
        global: &f.global,
        global_prototypes: protos,
        snapshot: None,
        teacher,
        task,
        round: 1,
        classes_seen: f.task_classes.len(),
        task_classes: &f.task_classes,
    }
}

fn accuracy(model: &ModelParams, data: &Dataset) -> f64 {
    let logits = model.forward(data.features()).unwrap();
    let correct = logits
        .iter_rows()
        .zip(data.labels())
        .filter(|(row, &y)| {
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            best == y
        })
        .count();
    correct as f64 / data.len() as f64
}

#[test]
fn separable_two_class_task_converges() {
    let f = fixture(2, 0.3, 300, MethodFlags::ALL);
    let protos = PrototypeStore::new(StoreRole::Global, f.cfg.embedding_dim());
    let mut state = ClientState::new(0, 2, f.cfg.embedding_dim(), f.cfg.memory_budget);
    let (update, trace) =
        local_train(&mut state, ctx(&f, &protos, None, 1), &f.data, &f.cfg).unwrap();
    let acc = accuracy(&update.params, &f.data);
    assert!(acc > 0.95, "training accuracy {acc}");
    assert_eq!((trace.lambda_distill, trace.lambda_replay), (0.0, 0.0));
    // counts are the exact number of processed samples per class
    for c in 0..2 {
        let n = f.data.labels().iter().filter(|&&y| y == c).count() as u64;
        assert_eq!(update.counts[c], n * f.cfg.local_epochs as u64);
    }
}

#[test]
fn first_task_reduces_to_plain_weighted_cross_entropy() {
    let f = fixture(3, 1.0, 60, MethodFlags::ALL);
    let protos = PrototypeStore::new(StoreRole::Global, f.cfg.embedding_dim());
    let mut state = ClientState::new(4, 3, f.cfg.embedding_dim(), f.cfg.memory_budget);
    let (update, _) = local_train(&mut state, ctx(&f, &protos, None, 1), &f.data, &f.cfg).unwrap();

    // reference trainer: weighted CE only, same shuffles and optimizer
    let weights =
        compute_class_weights(&[0, 0, 0], &f.task_classes, &f.task_classes, f.cfg.boost).weights;
    let mut params = f.global.clone();
    let mut opt = OptimizerState::new(
        &params,
        AdamConfig::with_learning_rate(f.cfg.learning_rate),
        UpdateRule::Adam,
    );
    let mut shuffle = rng::stream(f.cfg.seed, Purpose::Shuffle, 4, 1, 1);
    let mut order: Vec<usize> = (0..f.data.len()).collect();
    for _ in 0..f.cfg.local_epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(f.cfg.batch_size) {
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| f.data.features().row(i)).collect();
            let inputs = Matrix::from_rows(&rows).unwrap();
            let labels: Vec<usize> = chunk.iter().map(|&i| f.data.labels()[i]).collect();
            let spec = LossSpec::Classification {
                inputs: &inputs,
                labels: &labels,
                class_weights: &weights,
            };
            let gf = nn::grad(&params, spec, ParamGroup::FeatureExtractor).unwrap();
            let gc = nn::grad(&params, spec, ParamGroup::Classifier).unwrap();
            nn::optimizer_step(&mut params, &mut opt, &gf, &gc).unwrap();
        }
    }
    assert_eq!(params.fingerprint(), update.params.fingerprint());
    assert_eq!(params, update.params);
}

#[test]
fn teacher_equal_to_student_gives_zero_stability_gradient() {
    let f = fixture(3, 1.0, 20, MethodFlags::ALL);
    let inputs = f.data.features();
    let teacher_logits = f.global.forward(inputs).unwrap();
    let spec = LossSpec::Distillation {
        inputs,
        teacher_logits: &teacher_logits,
        temperature: 2.0,
    };
    assert_eq!(nn::loss(&f.global, spec).unwrap(), 0.0);
    let g_stab = nn::grad(&f.global, spec, ParamGroup::FeatureExtractor).unwrap();
    assert!(g_stab.values.iter().all(|&v| v == 0.0));
    let g_plas = grad((0..g_stab.len()).map(|i| (i as f64).sin()).collect());
    let p = project_gradient(&g_plas, &g_stab).unwrap();
    assert_eq!(p.gradient, g_plas);
    assert!(!p.conflict);
}

#[test]
fn empty_client_returns_the_broadcast_model() {
    let f = fixture(3, 1.0, 20, MethodFlags::ALL);
    let protos = PrototypeStore::new(StoreRole::Global, f.cfg.embedding_dim());
    let mut state = ClientState::new(1, 3, f.cfg.embedding_dim(), f.cfg.memory_budget);
    let empty = f.data.subset(&[]);
    assert_eq!(empty.split(), Split::Train);
    let (update, trace) =
        local_train(&mut state, ctx(&f, &protos, None, 1), &empty, &f.cfg).unwrap();
    assert_eq!(update.params, f.global);
    assert!(update.counts.iter().all(|&n| n == 0));
    assert_eq!(trace.steps, 0);
}

#[test]
fn conflicts_appear_once_distillation_starts() {
    let f = fixture(4, 1.0, 60, MethodFlags::ALL);
    let protos = PrototypeStore::new(StoreRole::Global, f.cfg.embedding_dim());
    let mut state = ClientState::new(0, 4, f.cfg.embedding_dim(), f.cfg.memory_budget);
    let first: Vec<usize> = (0..f.data.len())
        .filter(|&i| f.data.labels()[i] < 2)
        .collect();
    let second: Vec<usize> = (0..f.data.len())
        .filter(|&i| f.data.labels()[i] >= 2)
        .collect();
    let (update, _) = local_train(
        &mut state,
        ctx(&f, &protos, None, 1),
        &f.data.subset(&first),
        &f.cfg,
    )
    .unwrap();

    let later = Fixture {
        global: update.params.clone(),
        task_classes: [2, 3].into_iter().collect(),
        cfg: f.cfg.clone(),
        data: f.data.subset(&second),
    };
    let (_, trace) = local_train(
        &mut state,
        ctx(&later, &protos, Some(&update.params), 2),
        &later.data,
        &later.cfg,
    )
    .unwrap();
    assert!(trace.conflict_steps > 0);
    assert!(trace.min_projected_dot.unwrap() >= -1e-12);
    assert!(trace.max_norm_excess.unwrap() <= 1e-12);
    assert!(trace.forgetting.is_some());
}
