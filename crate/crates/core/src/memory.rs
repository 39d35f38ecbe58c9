//! Knowledge-preservation state kept by each client: online class
//! prototypes, the class-quota reservoir replay buffer over embeddings, and
//! prototype-guided drift compensation.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreRole {
    Local { client: usize },
    Global,
    Snapshot { task: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub count: u64,
    pub vector: Vec<f64>,
}

/// Per-class mean embeddings with observation counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStore {
    role: StoreRole,
    dim: usize,
    classes: BTreeMap<usize, Prototype>,
}

impl PrototypeStore {
    pub fn new(role: StoreRole, dim: usize) -> Self {
        Self {
            role,
            dim,
            classes: BTreeMap::new(),
        }
    }

    pub fn role(&self) -> StoreRole {
        self.role
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, class: usize) -> Option<&Prototype> {
        self.classes.get(&class)
    }

    pub fn count(&self, class: usize) -> u64 {
        self.classes.get(&class).map_or(0, |p| p.count)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Prototype)> {
        self.classes.iter().map(|(&c, p)| (c, p))
    }

    /// Online running-mean update `p <- (n p + z) / (n + 1)`, `n <- n + 1`.
    pub fn update(&mut self, class: usize, z: &[f64]) -> Result<()> {
        if !matches!(self.role, StoreRole::Local { .. }) {
            return Err(Error::Config(format!(
                "online prototype updates need a local store, not {:?}",
                self.role
            )));
        }
        if z.len() != self.dim {
            return Err(Error::shape("prototype embedding", self.dim, z.len()));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding for class {class}")));
        }
        match self.classes.get_mut(&class) {
            None => {
                self.classes.insert(
                    class,
                    Prototype {
                        count: 1,
                        vector: z.to_vec(),
                    },
                );
            }
            Some(p) => {
                let n = p.count as f64;
                for (pv, zv) in p.vector.iter_mut().zip(z) {
                    *pv = (n * *pv + zv) / (n + 1.0);
                }
                p.count += 1;
            }
        }
        Ok(())
    }

    /// Inserts an aggregated or broadcast prototype.
    pub fn set(&mut self, class: usize, count: u64, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::shape("prototype vector", self.dim, vector.len()));
        }
        self.classes.insert(class, Prototype { count, vector });
        Ok(())
    }

    /// Frozen copy taken at a task transition.
    pub fn snapshot(&self, task: usize) -> Self {
        Self {
            role: StoreRole::Snapshot { task },
            ..self.clone()
        }
    }

    /// `{class: {count, vector}}` checkpoint view.
    pub fn checkpoint_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.classes).expect("prototype map serializes")
    }
}

/// `M_c = max(5, floor(M_max / |Y_{1:t}|))`
pub fn per_class_quota(budget: usize, classes_seen: usize) -> usize {
    (budget / classes_seen.max(1)).max(5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub embedding: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InsertOutcome {
    Appended,
    /// Class below quota but buffer full: took the slot of an entry from the
    /// most populous class.
    Evicted {
        class: usize,
    },
    Replaced,
    Discarded,
}

/// Class-quota reservoir buffer of `(embedding, label)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    entries: Vec<ReplayEntry>,
    budget: usize,
    dim: usize,
    seen: BTreeMap<usize, u64>,
}

impl ReplayBuffer {
    pub fn new(budget: usize, dim: usize) -> Self {
        Self {
            entries: Vec::new(),
            budget,
            dim,
            seen: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    pub fn seen(&self, class: usize) -> u64 {
        self.seen.get(&class).copied().unwrap_or(0)
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.entries.iter().filter(|e| e.label == class).count()
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.label).or_insert(0) += 1;
        }
        counts
    }

    /// Counts one more streamed sample of `class`; returns the new total.
    pub fn observe(&mut self, class: usize) -> u64 {
        let n = self.seen.entry(class).or_insert(0);
        *n += 1;
        *n
    }

    fn class_slots(&self, class: usize) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].label == class)
            .collect()
    }

    /// Offers `z` of `class` to the buffer. The seen counter for `class` must
    /// already include this sample (see [`ReplayBuffer::observe`]).
    pub fn insert<R: Rng + ?Sized>(
        &mut self,
        z: &[f64],
        class: usize,
        quota: usize,
        rng: &mut R,
    ) -> Result<InsertOutcome> {
        if z.len() != self.dim {
            return Err(Error::shape("replay embedding", self.dim, z.len()));
        }
        if self.budget == 0 || quota == 0 {
            return Ok(InsertOutcome::Discarded);
        }
        let entry = || ReplayEntry {
            embedding: z.to_vec(),
            label: class,
        };
        let held = self.class_count(class);
        if held < quota {
            if self.entries.len() < self.budget {
                self.entries.push(entry());
                return Ok(InsertOutcome::Appended);
            }
            let (victim, victim_count) = self
                .class_counts()
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .expect("full buffer has entries");
            if victim != class && victim_count > held {
                let slots = self.class_slots(victim);
                let slot = slots[rng.random_range(0..slots.len())];
                self.entries[slot] = entry();
                return Ok(InsertOutcome::Evicted { class: victim });
            }
        }
        if held == 0 {
            return Ok(InsertOutcome::Discarded);
        }
        // keep with probability quota / n; Algorithm R draw
        let n = self.seen(class).max(held as u64 + 1);
        if rng.random_range(0..n) < quota as u64 {
            let slots = self.class_slots(class);
            let slot = slots[rng.random_range(0..slots.len())];
            self.entries[slot] = entry();
            Ok(InsertOutcome::Replaced)
        } else {
            Ok(InsertOutcome::Discarded)
        }
    }

    /// Down-samples every class holding more than `quota` entries uniformly
    /// at random to exactly `quota`.
    pub fn rebalance<R: Rng + ?Sized>(&mut self, quota: usize, rng: &mut R) {
        let mut drop = vec![false; self.entries.len()];
        for (class, count) in self.class_counts() {
            if count > quota {
                let mut slots = self.class_slots(class);
                slots.shuffle(rng);
                for &s in &slots[quota..] {
                    drop[s] = true;
                }
            }
        }
        let mut keep = drop.iter().map(|d| !d);
        self.entries.retain(|_| keep.next().unwrap_or(true));
    }

    /// `batch` entries uniformly without replacement, or with replacement
    /// when `batch` exceeds the buffer size. `None` when empty.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Option<Vec<&ReplayEntry>> {
        if self.entries.is_empty() {
            return None;
        }
        let len = self.entries.len();
        let picked = if batch <= len {
            index::sample(rng, len, batch)
                .into_iter()
                .map(|i| &self.entries[i])
                .collect()
        } else {
            (0..batch)
                .map(|_| &self.entries[rng.random_range(0..len)])
                .collect()
        };
        Some(picked)
    }

    pub fn checkpoint_json(&self) -> serde_json::Value {
        let mut by_class: BTreeMap<usize, Vec<&Vec<f64>>> = BTreeMap::new();
        for e in &self.entries {
            by_class.entry(e.label).or_default().push(&e.embedding);
        }
        let view: BTreeMap<usize, serde_json::Value> = by_class
            .into_iter()
            .map(|(c, vs)| (c, serde_json::json!({ "count": vs.len(), "vectors": vs })))
            .collect();
        serde_json::to_value(view).expect("buffer view serializes")
    }
}

/// Per-class drift vectors `delta_c = p_c(global) - p_c(snapshot)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftTable {
    dim: usize,
    deltas: BTreeMap<usize, Vec<f64>>,
}

impl DriftTable {
    /// No compensation for any class.
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            deltas: BTreeMap::new(),
        }
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.deltas.get(&class).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.deltas.iter().map(|(&c, d)| (c, d.as_slice()))
    }

    /// `z + delta_label`, or `z` unchanged when the class has no entry.
    pub fn compensate_entry(&self, z: &[f64], label: usize) -> Vec<f64> {
        match self.get(label) {
            Some(delta) => compensate(z, delta),
            None => z.to_vec(),
        }
    }

    pub fn mean_norm(&self) -> f64 {
        if self.deltas.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .deltas
            .values()
            .map(|d| d.iter().map(|v| v * v).sum::<f64>().sqrt())
            .sum();
        total / self.deltas.len() as f64
    }
}

/// Drift for every class present in both stores.
pub fn compute_drift(global: &PrototypeStore, snapshot: &PrototypeStore) -> Result<DriftTable> {
    if global.dim != snapshot.dim {
        return Err(Error::shape(
            "drift prototype dims",
            global.dim,
            snapshot.dim,
        ));
    }
    let deltas = global
        .classes
        .iter()
        .filter_map(|(&c, g)| {
            snapshot.classes.get(&c).map(|s| {
                let d = g.vector.iter().zip(&s.vector).map(|(a, b)| a - b).collect();
                (c, d)
            })
        })
        .collect();
    Ok(DriftTable {
        dim: global.dim,
        deltas,
    })
}

/// `z~ = z + delta`
pub fn compensate(z: &[f64], delta: &[f64]) -> Vec<f64> {
    debug_assert_eq!(z.len(), delta.len());
    z.iter().zip(delta).map(|(a, b)| a + b).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_update_sets_prototype() {
        let mut store = PrototypeStore::new(StoreRole::Local { client: 0 }, 2);
        store.update(3, &[1.0, -2.0]).unwrap();
        let p = store.get(3).unwrap();
        assert_eq!(p.vector, vec![1.0, -2.0]);
        assert_eq!(p.count, 1);
        store.update(3, &[3.0, 0.0]).unwrap();
        assert_eq!(store.get(3).unwrap().vector, vec![2.0, -1.0]);
    }

    #[test]
    fn online_updates_need_local_role_and_matching_dims() {
        let mut global = PrototypeStore::new(StoreRole::Global, 2);
        assert!(global.update(0, &[1.0, 1.0]).is_err());
        let mut local = PrototypeStore::new(StoreRole::Local { client: 1 }, 2);
        assert!(matches!(local.update(0, &[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn running_mean_equals_batch_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = PrototypeStore::new(StoreRole::Local { client: 0 }, 4);
        let samples: Vec<Vec<f64>> = (0..1000)
            .map(|_| (0..4).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect();
        for s in &samples {
            store.update(0, s).unwrap();
        }
        for k in 0..4 {
            let mean = samples.iter().map(|s| s[k]).sum::<f64>() / 1000.0;
            assert!((store.get(0).unwrap().vector[k] - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn quota_values() {
        assert_eq!(per_class_quota(1000, 45), 22);
        assert_eq!(per_class_quota(100, 30), 5);
        assert_eq!(per_class_quota(1000, 1), 1000);
    }

    #[test]
    fn insert_respects_quota_and_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut buf = ReplayBuffer::new(10, 1);
        buf.observe(0);
        assert_eq!(
            buf.insert(&[0.0], 0, 3, &mut rng).unwrap(),
            InsertOutcome::Appended
        );
        for k in 1..200 {
            buf.observe(k % 4);
            buf.insert(&[k as f64], k % 4, 3, &mut rng).unwrap();
            assert!(buf.class_counts().values().all(|&n| n <= 3));
            assert!(buf.len() <= 10);
        }
    }

    #[test]
    fn full_buffer_evicts_from_largest_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // quota 5 with 3 classes over a budget of 10
        let mut buf = ReplayBuffer::new(10, 1);
        for k in 0..10 {
            buf.observe(k % 2);
            buf.insert(&[k as f64], k % 2, 5, &mut rng).unwrap();
        }
        assert_eq!(buf.len(), 10);
        buf.observe(2);
        assert_eq!(
            buf.insert(&[99.0], 2, 5, &mut rng).unwrap(),
            InsertOutcome::Evicted { class: 0 }
        );
        assert_eq!(buf.len(), 10);
        assert_eq!(buf.class_count(2), 1);
    }

    #[test]
    fn rebalance_trims_to_quota() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut buf = ReplayBuffer::new(100, 1);
        for k in 0..60 {
            buf.observe(k % 2);
            buf.insert(&[k as f64], k % 2, 50, &mut rng).unwrap();
        }
        assert_eq!(buf.class_count(0), 30);
        buf.rebalance(12, &mut rng);
        assert_eq!(buf.class_count(0), 12);
        assert_eq!(buf.class_count(1), 12);
        // survivors keep their labels
        assert!(buf
            .entries()
            .iter()
            .all(|e| (e.embedding[0] as usize) % 2 == e.label));
    }

    #[test]
    fn sample_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut buf = ReplayBuffer::new(10, 1);
        assert!(buf.sample(4, &mut rng).is_none());
        buf.observe(1);
        buf.insert(&[7.0], 1, 5, &mut rng).unwrap();
        let one = buf.sample(1, &mut rng).unwrap();
        assert_eq!(one[0].embedding, vec![7.0]);
        for k in 0..4 {
            buf.observe(0);
            buf.insert(&[k as f64], 0, 5, &mut rng).unwrap();
        }
        let mut all: Vec<f64> = buf
            .sample(5, &mut rng)
            .unwrap()
            .iter()
            .map(|e| e.embedding[0])
            .collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, vec![0.0, 1.0, 2.0, 3.0, 7.0]);
        assert_eq!(buf.sample(9, &mut rng).unwrap().len(), 9);
    }

    #[test]
    fn drift_cases() {
        let mut g = PrototypeStore::new(StoreRole::Global, 2);
        g.set(0, 4, vec![1.0, 1.0]).unwrap();
        g.set(1, 4, vec![3.0, -1.0]).unwrap();
        g.set(5, 1, vec![0.0, 0.0]).unwrap();
        let same = compute_drift(&g, &g.snapshot(1)).unwrap();
        assert!(same.iter().all(|(_, d)| d.iter().all(|&v| v == 0.0)));

        let mut shifted = PrototypeStore::new(StoreRole::Snapshot { task: 1 }, 2);
        shifted.set(0, 4, vec![0.5, 3.0]).unwrap();
        shifted.set(1, 4, vec![2.5, 1.0]).unwrap();
        let drift = compute_drift(&g, &shifted).unwrap();
        assert_eq!(drift.len(), 2);
        assert_eq!(drift.get(0).unwrap(), &[0.5, -2.0]);
        assert_eq!(drift.get(1).unwrap(), &[0.5, -2.0]);
        assert!(drift.get(5).is_none());
        assert_eq!(drift.compensate_entry(&[1.0, 1.0], 5), vec![1.0, 1.0]);
    }

    #[test]
    fn compensate_inverse() {
        let z = [0.25, -3.0, 8.0];
        let d = [1.5, 0.5, -2.0];
        let neg: Vec<f64> = d.iter().map(|v| -v).collect();
        assert_eq!(compensate(&compensate(&z, &d), &neg), z.to_vec());
        assert_eq!(compensate(&z, &[0.0; 3]), z.to_vec());
    }

    #[test]
    fn checkpoint_schema() {
        let mut s = PrototypeStore::new(StoreRole::Local { client: 0 }, 2);
        s.update(4, &[1.0, 2.0]).unwrap();
        let v = s.checkpoint_json();
        assert_eq!(v["4"]["count"], 1);
        assert_eq!(v["4"]["vector"][1], 2.0);
    }
}
