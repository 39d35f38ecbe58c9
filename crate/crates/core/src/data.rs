//! Datasets, class-incremental task schedules and Dirichlet Non-IID
//! client partitions.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::{self, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(
                "dataset labels",
                features.rows(),
                labels.len(),
            ));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                classes: num_classes,
            });
        }
        if let Some(row) = features
            .iter_rows()
            .position(|r| r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite(format!("dataset feature row {row}")));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes_present(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.features.row(i)).collect();
        let features = if rows.is_empty() {
            Matrix::zeros(0, self.features.cols())
        } else {
            Matrix::from_rows(&rows).expect("rows share width")
        };
        Dataset {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// Samples whose label is in `classes`, order preserved.
    pub fn filter_classes(&self, classes: &BTreeSet<usize>) -> Dataset {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        self.subset(&idx)
    }
}

/// Isotropic Gaussian clusters around random class means, split 80/20 per
/// class into train and test.
pub fn generate_synthetic(
    classes: usize,
    per_class: usize,
    input_dim: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if classes < 2 || per_class < 2 || input_dim == 0 {
        return Err(Error::Config(format!(
            "synthetic data needs classes >= 2, per_class >= 2, input_dim >= 1 (got {classes}, {per_class}, {input_dim})"
        )));
    }
    if !(cluster_spread.is_finite() && cluster_spread >= 0.0) {
        return Err(Error::Config(format!(
            "cluster spread must be >= 0, got {cluster_spread}"
        )));
    }
    let mut rng = rng::stream(seed, Purpose::Data, 0, 0, 0);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let n_train = (per_class * 4 / 5).clamp(1, per_class - 1);

    let mut train_rows = Vec::with_capacity(classes * n_train);
    let mut train_labels = Vec::with_capacity(classes * n_train);
    let mut test_rows = Vec::with_capacity(classes * (per_class - n_train));
    let mut test_labels = Vec::with_capacity(classes * (per_class - n_train));
    for c in 0..classes {
        let mean: Vec<f64> = (0..input_dim).map(|_| unit.sample(&mut rng)).collect();
        for k in 0..per_class {
            let row: Vec<f64> = mean
                .iter()
                .map(|m| m + cluster_spread * unit.sample(&mut rng))
                .collect();
            if k < n_train {
                train_rows.push(row);
                train_labels.push(c);
            } else {
                test_rows.push(row);
                test_labels.push(c);
            }
        }
    }
    let train = Dataset::new(
        Matrix::from_rows(&train_rows)?,
        train_labels,
        classes,
        Split::Train,
    )?;
    let test = Dataset::new(
        Matrix::from_rows(&test_rows)?,
        test_labels,
        classes,
        Split::Test,
    )?;
    Ok((train, test))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureManifest {
    #[serde(rename = "C")]
    pub classes: usize,
    #[serde(rename = "D_in")]
    pub input_dim: usize,
    pub split: Split,
}

/// Sidecar manifest path: the feature file path with a `.json` extension.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Reads a CSV feature file (`label,f0,...,f{D-1}`) plus its JSON manifest.
pub fn load_feature_file(path: &Path) -> Result<Dataset> {
    let parse_err = |path: &Path, message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let mpath = manifest_path(path);
    let mfile = File::open(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: FeatureManifest = serde_json::from_reader(BufReader::new(mfile))
        .map_err(|e| parse_err(&mpath, e.to_string()))?;
    if manifest.classes == 0 || manifest.input_dim == 0 {
        return Err(parse_err(&mpath, "C and D_in must be positive".into()));
    }

    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, e.to_string()))?
        .clone();
    let expected: Vec<String> = std::iter::once("label".to_string())
        .chain((0..manifest.input_dim).map(|i| format!("f{i}")))
        .collect();
    if headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(parse_err(
            path,
            format!("header must be `label,f0,...,f{}`", manifest.input_dim - 1),
        ));
    }

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(path, format!("row {row}: {e}")))?;
        let found = record.len().saturating_sub(1);
        if found != manifest.input_dim {
            return Err(Error::RowWidth {
                row,
                expected: manifest.input_dim,
                found,
            });
        }
        let label: usize = record[0]
            .parse()
            .map_err(|_| parse_err(path, format!("row {row}: invalid label `{}`", &record[0])))?;
        if label >= manifest.classes {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                classes: manifest.classes,
            });
        }
        let features = record
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| parse_err(path, format!("row {row}: {e}")))?;
        rows.push(features);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(parse_err(path, "no samples".into()));
    }
    Dataset::new(
        Matrix::from_rows(&rows)?,
        labels,
        manifest.classes,
        manifest.split,
    )
}

/// Writes `dataset` in the feature-file format, including the manifest.
pub fn write_feature_file(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..dataset.input_dim()).map(|i| format!("f{i}")))
        .collect();
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for (row, label) in dataset.features.iter_rows().zip(&dataset.labels) {
        write!(out, "{label}").map_err(io)?;
        for v in row {
            // `{:?}` prints the shortest representation that parses back exactly
            write!(out, ",{v:?}").map_err(io)?;
        }
        writeln!(out).map_err(io)?;
    }
    out.flush().map_err(io)?;

    let manifest = FeatureManifest {
        classes: dataset.num_classes,
        input_dim: dataset.input_dim(),
        split: dataset.split,
    };
    let mpath = manifest_path(path);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))
}

/// Disjoint class sets `Y_1..Y_T` covering `0..C`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    class_sets: Vec<BTreeSet<usize>>,
    num_classes: usize,
}

impl TaskSchedule {
    pub fn new(class_sets: Vec<BTreeSet<usize>>, num_classes: usize) -> Result<Self> {
        if class_sets.is_empty() {
            return Err(Error::Config(
                "task schedule needs at least one task".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for (t, set) in class_sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::Config(format!("task {} has no classes", t + 1)));
            }
            for &c in set {
                if c >= num_classes {
                    return Err(Error::Config(format!(
                        "task {} lists class {c} but there are only {num_classes} classes",
                        t + 1
                    )));
                }
                if !seen.insert(c) {
                    return Err(Error::Config(format!(
                        "class {c} appears in more than one task"
                    )));
                }
            }
        }
        if seen.len() != num_classes {
            let missing: Vec<usize> = (0..num_classes).filter(|c| !seen.contains(c)).collect();
            return Err(Error::Config(format!(
                "schedule does not cover classes {missing:?}"
            )));
        }
        Ok(Self {
            class_sets,
            num_classes,
        })
    }

    /// Consecutive class-index ranges; earlier tasks absorb any remainder.
    pub fn contiguous(num_classes: usize, tasks: usize) -> Result<Self> {
        if tasks == 0 || tasks > num_classes {
            return Err(Error::Config(format!(
                "cannot split {num_classes} classes into {tasks} non-empty tasks"
            )));
        }
        let base = num_classes / tasks;
        let extra = num_classes % tasks;
        let mut start = 0;
        let sets = (0..tasks)
            .map(|t| {
                let size = base + usize::from(t < extra);
                let set = (start..start + size).collect();
                start += size;
                set
            })
            .collect();
        Self::new(sets, num_classes)
    }

    pub fn num_tasks(&self) -> usize {
        self.class_sets.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `Y_t` for 1-based `t`.
    pub fn task_classes(&self, t: usize) -> Result<&BTreeSet<usize>> {
        self.check_task(t)?;
        Ok(&self.class_sets[t - 1])
    }

    /// `Y_{1:t}` for 1-based `t`.
    pub fn cumulative_classes(&self, t: usize) -> Result<BTreeSet<usize>> {
        self.check_task(t)?;
        Ok(self.class_sets[..t].iter().flatten().copied().collect())
    }

    pub fn class_sets(&self) -> &[BTreeSet<usize>] {
        &self.class_sets
    }

    fn check_task(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.class_sets.len() {
            return Err(Error::Config(format!(
                "task index {t} outside 1..={}",
                self.class_sets.len()
            )));
        }
        Ok(())
    }
}

/// Per-task datasets: task `t` holds exactly the samples labelled in `Y_t`.
pub fn split_tasks(dataset: &Dataset, schedule: &TaskSchedule) -> Result<Vec<Dataset>> {
    if dataset.num_classes() != schedule.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes but the schedule covers {}",
            dataset.num_classes(),
            schedule.num_classes()
        )));
    }
    Ok(schedule
        .class_sets()
        .iter()
        .map(|set| dataset.filter_classes(set))
        .collect())
}

/// Test samples for every class seen up to task `t` (1-based).
pub fn cumulative_test_set(test: &Dataset, schedule: &TaskSchedule, t: usize) -> Result<Dataset> {
    let classes = schedule.cumulative_classes(t)?;
    Ok(test.filter_classes(&classes))
}

/// One task's split of sample indices across clients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub clients: Vec<Vec<usize>>,
    pub alpha: f64,
    pub seed: u64,
}

impl ClientPartition {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }
}

/// Largest-remainder apportionment of `total` items by `shares`.
pub fn apportion(total: usize, shares: &[f64]) -> Vec<usize> {
    let sum: f64 = shares.iter().sum();
    let quotas: Vec<f64> = shares.iter().map(|s| s / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn dirichlet_shares<R: Rng + ?Sized>(clients: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.iter().map(|d| d / sum).collect()
    } else {
        // every draw underflowed: the limit is a point mass on one client
        let mut shares = vec![0.0; clients];
        shares[rng.random_range(0..clients)] = 1.0;
        shares
    }
}

/// Splits every class of `task_data` across `clients` with proportions drawn
/// from `Dirichlet(alpha * 1)` and largest-remainder rounding.
pub fn dirichlet_partition(
    task_data: &Dataset,
    clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<ClientPartition> {
    if clients == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Config(format!(
            "Dirichlet alpha must be positive, got {alpha}"
        )));
    }
    let mut rng = rng::stream(seed, Purpose::Partition, 0, 0, 0);
    let mut assignment = vec![Vec::new(); clients];
    for class in task_data.classes_present() {
        let mut idx: Vec<usize> = (0..task_data.len())
            .filter(|&i| task_data.labels[i] == class)
            .collect();
        idx.shuffle(&mut rng);
        let shares = dirichlet_shares(clients, alpha, &mut rng);
        let counts = apportion(idx.len(), &shares);
        let mut start = 0;
        for (client, &n) in counts.iter().enumerate() {
            assignment[client].extend_from_slice(&idx[start..start + n]);
            start += n;
        }
    }
    for list in &mut assignment {
        list.sort_unstable();
    }
    Ok(ClientPartition {
        clients: assignment,
        alpha,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(labels: &[usize], classes: usize) -> Dataset {
        let rows: Vec<Vec<f64>> = labels.iter().map(|&l| vec![l as f64, 1.0]).collect();
        Dataset::new(
            Matrix::from_rows(&rows).unwrap(),
            labels.to_vec(),
            classes,
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn synthetic_split_arithmetic() {
        let (train, test) = generate_synthetic(12, 100, 5, 1.0, 3).unwrap();
        for c in 0..12 {
            assert_eq!(train.labels().iter().filter(|&&l| l == c).count(), 80);
            assert_eq!(test.labels().iter().filter(|&&l| l == c).count(), 20);
        }
        assert_eq!(train.split(), Split::Train);
        assert_eq!(test.split(), Split::Test);
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let a = generate_synthetic(4, 10, 3, 0.5, 42).unwrap();
        let b = generate_synthetic(4, 10, 3, 0.5, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(4, 10, 3, 0.5, 43).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn zero_spread_collapses_classes() {
        let (train, _) = generate_synthetic(2, 6, 4, 0.0, 1).unwrap();
        let first: Vec<&[f64]> = (0..train.len())
            .filter(|&i| train.labels()[i] == 0)
            .map(|i| train.features().row(i))
            .collect();
        assert!(first.windows(2).all(|w| w[0] == w[1]));
        let other = (0..train.len()).find(|&i| train.labels()[i] == 1).unwrap();
        assert_ne!(first[0], train.features().row(other));
    }

    #[test]
    fn schedule_rejects_overlap_and_gaps() {
        let sets = |v: &[&[usize]]| v.iter().map(|s| s.iter().copied().collect()).collect();
        assert!(TaskSchedule::new(sets(&[&[0, 1], &[1, 2]]), 3).is_err());
        assert!(TaskSchedule::new(sets(&[&[0], &[2]]), 3).is_err());
        assert!(TaskSchedule::new(sets(&[&[0], &[]]), 1).is_err());
        let s = TaskSchedule::new(sets(&[&[2, 0], &[1]]), 3).unwrap();
        assert_eq!(s.cumulative_classes(2).unwrap().len(), 3);
        assert!(s.task_classes(0).is_err());
        assert!(s.task_classes(3).is_err());
    }

    #[test]
    fn contiguous_schedule_of_reference_shape() {
        let s = TaskSchedule::contiguous(45, 3).unwrap();
        assert!(s.class_sets().iter().all(|set| set.len() == 15));
        let uneven = TaskSchedule::contiguous(7, 3).unwrap();
        let sizes: Vec<usize> = uneven.class_sets().iter().map(BTreeSet::len).collect();
        assert_eq!(sizes, vec![3, 2, 2]);
    }

    #[test]
    fn split_tasks_matches_filter_oracle() {
        let labels: Vec<usize> = (0..60).map(|i| (i * 7) % 6).collect();
        let data = toy(&labels, 6);
        let schedule = TaskSchedule::contiguous(6, 3).unwrap();
        let tasks = split_tasks(&data, &schedule).unwrap();
        assert_eq!(tasks.iter().map(Dataset::len).sum::<usize>(), data.len());
        for (t, task) in tasks.iter().enumerate() {
            let set = &schedule.class_sets()[t];
            let oracle: Vec<usize> = labels.iter().copied().filter(|l| set.contains(l)).collect();
            assert_eq!(task.labels(), oracle.as_slice());
        }
        let single = TaskSchedule::contiguous(6, 1).unwrap();
        assert_eq!(split_tasks(&data, &single).unwrap()[0], data);
    }

    #[test]
    fn cumulative_test_sets_grow() {
        let labels: Vec<usize> = (0..30).map(|i| i % 6).collect();
        let data = toy(&labels, 6);
        let schedule = TaskSchedule::contiguous(6, 3).unwrap();
        let sizes: Vec<usize> = (1..=3)
            .map(|t| cumulative_test_set(&data, &schedule, t).unwrap().len())
            .collect();
        assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(cumulative_test_set(&data, &schedule, 3).unwrap(), data);
        let first = cumulative_test_set(&data, &schedule, 1).unwrap();
        assert!(first.labels().iter().all(|&l| l < 2));
        assert!(cumulative_test_set(&data, &schedule, 4).is_err());
    }

    #[test]
    fn apportion_conserves_counts() {
        assert_eq!(apportion(10, &[0.5, 0.5]), vec![5, 5]);
        assert_eq!(apportion(10, &[0.33, 0.33, 0.34]), vec![3, 3, 4]);
        assert_eq!(apportion(1, &[0.5, 0.5]), vec![1, 0]);
        assert_eq!(apportion(7, &[1.0]), vec![7]);
    }

    #[test]
    fn single_client_gets_everything() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let p = dirichlet_partition(&toy(&labels, 4), 1, 0.5, 9).unwrap();
        assert_eq!(p.clients[0], (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn huge_concentration_splits_evenly() {
        let labels: Vec<usize> = (0..2000).map(|i| i % 2).collect();
        let p = dirichlet_partition(&toy(&labels, 2), 5, 1e6, 4).unwrap();
        for class in 0..2 {
            for client in &p.clients {
                let n = client.iter().filter(|&&i| labels[i] == class).count();
                assert!((n as i64 - 200).abs() <= 2, "{n}");
            }
        }
    }

    #[test]
    fn partition_rejects_bad_arguments() {
        let d = toy(&[0, 1], 2);
        assert!(dirichlet_partition(&d, 0, 0.5, 1).is_err());
        assert!(dirichlet_partition(&d, 2, 0.0, 1).is_err());
    }
}
