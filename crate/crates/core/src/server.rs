//! Server-side aggregation: uniform feature-extractor averaging, class-aware
//! classifier aggregation, prototype fusion and the communication-cost model.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{PrototypeStore, StoreRole};
use crate::nn::{Linear, ModelParams};

/// Per-class client weights `alpha[c][i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    pub per_class: Vec<Vec<f64>>,
}

impl AggregationWeights {
    pub fn class(&self, c: usize) -> &[f64] {
        &self.per_class[c]
    }

    pub fn uniform(clients: usize, classes: usize) -> Self {
        Self {
            per_class: vec![vec![1.0 / clients as f64; clients]; classes],
        }
    }
}

/// `alpha_i^c = n_i^c / sum_j n_j^c`, or `1/N` for every client when no
/// client has seen class `c`. `counts[i][c]` is client `i`'s count.
pub fn class_aggregation_weights(counts: &[Vec<u64>]) -> Result<AggregationWeights> {
    let clients = counts.len();
    if clients == 0 {
        return Err(Error::Config(
            "aggregation needs at least one client".into(),
        ));
    }
    let classes = counts[0].len();
    if let Some(bad) = counts.iter().find(|row| row.len() != classes) {
        return Err(Error::shape("per-client class counts", classes, bad.len()));
    }
    let per_class = (0..classes)
        .map(|c| {
            let total: u64 = counts.iter().map(|row| row[c]).sum();
            if total == 0 {
                vec![1.0 / clients as f64; clients]
            } else {
                counts
                    .iter()
                    .map(|row| row[c] as f64 / total as f64)
                    .collect()
            }
        })
        .collect();
    Ok(AggregationWeights { per_class })
}

/// Unweighted element-wise mean of the clients' feature extractors.
pub fn aggregate_feature_extractor(extractors: &[&[Linear]]) -> Result<Vec<Linear>> {
    let first = extractors
        .first()
        .ok_or_else(|| Error::Config("aggregation needs at least one client".into()))?;
    let scale = 1.0 / extractors.len() as f64;
    let mut out: Vec<Linear> = first.to_vec();
    for layer in &mut out {
        layer.weight.iter_mut().for_each(|v| *v = 0.0);
        layer.bias.iter_mut().for_each(|v| *v = 0.0);
    }
    for ext in extractors {
        if ext.len() != out.len() {
            return Err(Error::shape("extractor depth", out.len(), ext.len()));
        }
        for (acc, layer) in out.iter_mut().zip(ext.iter()) {
            if layer.in_dim != acc.in_dim || layer.out_dim != acc.out_dim {
                return Err(Error::shape(
                    "extractor layer size",
                    acc.num_params(),
                    layer.num_params(),
                ));
            }
            for (a, v) in acc.weight.iter_mut().zip(&layer.weight) {
                *a += v;
            }
            for (a, v) in acc.bias.iter_mut().zip(&layer.bias) {
                *a += v;
            }
        }
    }
    for layer in &mut out {
        layer.weight.iter_mut().for_each(|v| *v *= scale);
        layer.bias.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(out)
}

/// Per-class weighted row aggregation for `c` in `active_classes`; other
/// rows keep the previous global values.
pub fn aggregate_classifier(
    classifiers: &[&Linear],
    weights: &AggregationWeights,
    previous: &Linear,
    active_classes: &BTreeSet<usize>,
) -> Result<Linear> {
    if classifiers.is_empty() {
        return Err(Error::Config(
            "aggregation needs at least one client".into(),
        ));
    }
    if weights.per_class.len() != previous.out_dim {
        return Err(Error::shape(
            "aggregation weight classes",
            previous.out_dim,
            weights.per_class.len(),
        ));
    }
    for cls in classifiers {
        if cls.in_dim != previous.in_dim || cls.out_dim != previous.out_dim {
            return Err(Error::shape(
                "classifier size",
                previous.num_params(),
                cls.num_params(),
            ));
        }
    }
    let d = previous.in_dim;
    let mut out = previous.clone();
    for &c in active_classes {
        if c >= previous.out_dim {
            return Err(Error::LabelOutOfRange {
                row: c,
                label: c,
                classes: previous.out_dim,
            });
        }
        let alpha = weights.class(c);
        if alpha.len() != classifiers.len() {
            return Err(Error::shape(
                "aggregation weights per class",
                classifiers.len(),
                alpha.len(),
            ));
        }
        let row = &mut out.weight[c * d..(c + 1) * d];
        row.iter_mut().for_each(|v| *v = 0.0);
        let mut bias = 0.0;
        for (cls, &a) in classifiers.iter().zip(alpha) {
            for (r, v) in row.iter_mut().zip(&cls.weight[c * d..(c + 1) * d]) {
                *r += a * v;
            }
            bias += a * cls.bias[c];
        }
        out.bias[c] = bias;
    }
    Ok(out)
}

/// `p_c = (1/N_c) sum_i n_i^c p_i^c` for every class with `N_c > 0`.
pub fn aggregate_prototypes(
    local: &[&PrototypeStore],
    counts: &[Vec<u64>],
) -> Result<PrototypeStore> {
    let first = local
        .first()
        .ok_or_else(|| Error::Config("aggregation needs at least one client".into()))?;
    if local.len() != counts.len() {
        return Err(Error::shape(
            "prototype stores per client",
            counts.len(),
            local.len(),
        ));
    }
    let dim = first.dim();
    let classes = counts[0].len();
    let mut global = PrototypeStore::new(StoreRole::Global, dim);
    for c in 0..classes {
        let total: u64 = counts.iter().map(|row| row[c]).sum();
        if total == 0 {
            continue;
        }
        let mut acc = vec![0.0; dim];
        let mut contributing = 0;
        for (store, row) in local.iter().zip(counts) {
            if store.dim() != dim {
                return Err(Error::shape("prototype dimension", dim, store.dim()));
            }
            let n = row[c];
            if n == 0 {
                continue;
            }
            let p = store.get(c).ok_or_else(|| {
                Error::Config(format!(
                    "client reports {n} samples of class {c} but no prototype"
                ))
            })?;
            for (a, v) in acc.iter_mut().zip(&p.vector) {
                *a += n as f64 * v;
            }
            contributing += n;
        }
        debug_assert_eq!(contributing, total);
        acc.iter_mut().for_each(|v| *v /= total as f64);
        global.set(c, total, acc)?;
    }
    Ok(global)
}

/// Bytes uploaded per client per round: 4-byte parameters plus a 4-byte
/// count and a `d`-float prototype per seen class.
pub fn comm_cost(num_params: u64, classes_seen: u64, embedding_dim: u64) -> u64 {
    num_params * 4 + classes_seen * (4 + embedding_dim * 4)
}

/// Output of one aggregation round.
#[derive(Clone, Debug)]
pub struct Aggregate {
    pub model: ModelParams,
    pub prototypes: PrototypeStore,
    pub weights: AggregationWeights,
}

/// Full server step. With `class_aware` off the classifier is a plain
/// uniform average over all clients and rows.
pub fn aggregate(
    params: &[&ModelParams],
    prototypes: &[&PrototypeStore],
    counts: &[Vec<u64>],
    previous: &ModelParams,
    active_classes: &BTreeSet<usize>,
    class_aware: bool,
) -> Result<Aggregate> {
    let extractors: Vec<&[Linear]> = params.iter().map(|p| p.extractor.as_slice()).collect();
    let extractor = aggregate_feature_extractor(&extractors)?;
    let classifiers: Vec<&Linear> = params.iter().map(|p| &p.classifier).collect();
    let (weights, classifier) = if class_aware {
        let w = class_aggregation_weights(counts)?;
        let cls = aggregate_classifier(&classifiers, &w, &previous.classifier, active_classes)?;
        (w, cls)
    } else {
        let w = AggregationWeights::uniform(params.len(), previous.num_classes());
        let all: BTreeSet<usize> = (0..previous.num_classes()).collect();
        let cls = aggregate_classifier(&classifiers, &w, &previous.classifier, &all)?;
        (w, cls)
    };
    let model = ModelParams::from_layers(extractor, classifier)?;
    let prototypes = aggregate_prototypes(prototypes, counts)?;
    Ok(Aggregate {
        model,
        prototypes,
        weights,
    })
}
