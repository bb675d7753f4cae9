//! Labeled datasets and class-incremental task streams.
//!
//! A [`TaskStream`] assigns every class to exactly one task. Labels inside the
//! stream are remapped to head indices in order of first appearance: the
//! classes of task 1 become `0..|Y¹|`, those of task 2 follow, and so on. The
//! original class ids stay available through [`Task::classes`].

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor1;

pub mod idx;

pub use idx::{load_idx, write_idx_images, write_idx_labels};

/// Fraction of each class held out for testing when a dataset is split here.
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Tensor1,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    samples: Vec<Sample>,
    num_classes: usize,
    feature_dim: usize,
}

impl LabeledDataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize, feature_dim: usize) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.label >= num_classes {
                return Err(Error::invalid(format!(
                    "sample {i} has label {} but only {num_classes} classes exist",
                    s.label
                )));
            }
            if s.features.len() != feature_dim {
                return Err(Error::shape(format!(
                    "sample {i} has {} features, expected {feature_dim}",
                    s.features.len()
                )));
            }
        }
        Ok(Self {
            samples,
            num_classes,
            feature_dim,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Samples whose label is `class`.
    pub fn of_class(&self, class: usize) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.label == class).cloned().collect()
    }
}

/// Gaussian blobs: class means on a sphere of radius `separation`, unit
/// isotropic noise, `per_class` samples per class in class-major order.
pub fn make_synthetic(
    num_classes: usize,
    feature_dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(Error::invalid("synthetic data needs at least 2 classes"));
    }
    if feature_dim == 0 || per_class == 0 {
        return Err(Error::invalid("feature_dim and per_class must be positive"));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::invalid(format!("separation must be positive, got {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x * separation / norm).collect();
            }
        })
        .collect();
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for (label, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let x = mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect();
            samples.push(Sample {
                features: Tensor1::new(x),
                label,
            });
        }
    }
    LabeledDataset::new(samples, num_classes, feature_dim)
}

/// Seeded per-class train/test split.
pub fn train_test_split(data: &LabeledDataset, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..data.num_classes {
        let mut members = data.of_class(class);
        members.shuffle(&mut rng);
        let n = members.len();
        let n_test = if n < 2 {
            0
        } else {
            ((n as f64 * TEST_FRACTION).round() as usize).clamp(1, n - 1)
        };
        test.extend(members.drain(..n_test));
        train.extend(members);
    }
    Ok((
        LabeledDataset::new(train, data.num_classes, data.feature_dim)?,
        LabeledDataset::new(test, data.num_classes, data.feature_dim)?,
    ))
}

/// One step of a class-incremental stream. Labels are head indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    id: usize,
    classes: Vec<usize>,
    label_offset: usize,
    train: LabeledDataset,
    test: LabeledDataset,
}

impl Task {
    /// 1-based position in the stream.
    pub fn id(&self) -> usize {
        self.id
    }

    /// Original class ids introduced by this task.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// Head indices introduced by this task.
    pub fn head_classes(&self) -> std::ops::Range<usize> {
        self.label_offset..self.label_offset + self.classes.len()
    }

    pub fn test(&self) -> &LabeledDataset {
        &self.test
    }
}

/// An ordered sequence of tasks with pairwise disjoint classes.
///
/// Training data is only reachable through [`TaskStream::train_split`], which
/// counts reads per task so exemplar-free access can be audited.
#[derive(Debug)]
pub struct TaskStream {
    tasks: Vec<Task>,
    train_reads: Vec<AtomicUsize>,
}

impl Clone for TaskStream {
    fn clone(&self) -> Self {
        Self::from_tasks(self.tasks.clone())
    }
}

impl PartialEq for TaskStream {
    fn eq(&self, other: &Self) -> bool {
        self.tasks == other.tasks
    }
}

impl TaskStream {
    fn from_tasks(tasks: Vec<Task>) -> Self {
        let train_reads = tasks.iter().map(|_| AtomicUsize::new(0)).collect();
        Self { tasks, train_reads }
    }

    /// Builds a stream from class groups over pre-split data.
    pub fn from_groups(train: &LabeledDataset, test: &LabeledDataset, groups: &[Vec<usize>]) -> Result<Self> {
        if train.num_classes != test.num_classes || train.feature_dim != test.feature_dim {
            return Err(Error::invalid("train and test sets describe different label or feature spaces"));
        }
        if groups.is_empty() || groups.iter().any(Vec::is_empty) {
            return Err(Error::invalid("every task needs at least one class"));
        }
        let mut head_index = vec![None; train.num_classes];
        let mut next = 0;
        for group in groups {
            for &c in group {
                if c >= train.num_classes {
                    return Err(Error::invalid(format!("class {c} outside the label space")));
                }
                if head_index[c].is_some() {
                    return Err(Error::invalid(format!("class {c} assigned to more than one task")));
                }
                head_index[c] = Some(next);
                next += 1;
            }
        }
        let mut tasks = Vec::with_capacity(groups.len());
        let mut offset = 0;
        for (t, group) in groups.iter().enumerate() {
            let seen = offset + group.len();
            let pick = |data: &LabeledDataset| -> Result<LabeledDataset> {
                let samples = data
                    .samples
                    .iter()
                    .filter(|s| group.contains(&s.label))
                    .map(|s| Sample {
                        features: s.features.clone(),
                        label: head_index[s.label].expect("grouped class"),
                    })
                    .collect();
                LabeledDataset::new(samples, seen, data.feature_dim)
            };
            let (task_train, task_test) = (pick(train)?, pick(test)?);
            if task_train.is_empty() || task_test.is_empty() {
                return Err(Error::invalid(format!("task {} has an empty train or test split", t + 1)));
            }
            tasks.push(Task {
                id: t + 1,
                classes: group.clone(),
                label_offset: offset,
                train: task_train,
                test: task_test,
            });
            offset = seen;
        }
        Ok(Self::from_tasks(tasks))
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Task by 0-based index.
    pub fn task(&self, index: usize) -> Option<&Task> {
        self.tasks.get(index)
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    /// Training split of task `index` (0-based). Every call is counted.
    pub fn train_split(&self, index: usize) -> Option<&LabeledDataset> {
        let task = self.tasks.get(index)?;
        self.train_reads[index].fetch_add(1, Ordering::Relaxed);
        Some(&task.train)
    }

    pub fn train_read_counts(&self) -> Vec<usize> {
        self.train_reads.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    /// Number of classes seen once task `index` (0-based) is done.
    pub fn seen_classes_after(&self, index: usize) -> usize {
        self.tasks[..=index].iter().map(|t| t.classes.len()).sum()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.classes.len()).collect()
    }
}

fn shuffled_classes(num_classes: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1a5));
    order
}

/// Class groups for the equally-split protocol.
pub fn equal_groups(num_classes: usize, num_tasks: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if num_tasks == 0 || num_classes % num_tasks != 0 {
        return Err(Error::invalid(format!(
            "{num_classes} classes cannot be split evenly into {num_tasks} tasks"
        )));
    }
    let per = num_classes / num_tasks;
    Ok(shuffled_classes(num_classes, seed).chunks(per).map(<[usize]>::to_vec).collect())
}

/// Class groups for the big-start protocol.
pub fn big_start_groups(
    num_classes: usize,
    initial_classes: usize,
    num_incremental: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if initial_classes == 0 || initial_classes > num_classes {
        return Err(Error::invalid(format!(
            "initial class count {initial_classes} must lie in 1..={num_classes}"
        )));
    }
    let rest = num_classes - initial_classes;
    if num_incremental == 0 || rest == 0 || rest % num_incremental != 0 {
        return Err(Error::invalid(format!(
            "{rest} remaining classes cannot be split evenly into {num_incremental} incremental tasks"
        )));
    }
    let order = shuffled_classes(num_classes, seed);
    let mut groups = vec![order[..initial_classes].to_vec()];
    groups.extend(order[initial_classes..].chunks(rest / num_incremental).map(<[usize]>::to_vec));
    Ok(groups)
}

/// Parameters of the desk-scale reference stream: 10 Gaussian classes in 16
/// dimensions, separation 3, split equally into 5 tasks.
pub mod reference {
    pub const NUM_CLASSES: usize = 10;
    pub const FEATURE_DIM: usize = 16;
    pub const PER_CLASS: usize = 100;
    pub const SEPARATION: f64 = 3.0;
    pub const NUM_TASKS: usize = 5;
}

/// The reference stream for `seed`; the seed drives both data generation and
/// the class-to-task assignment.
pub fn reference_stream(seed: u64) -> Result<TaskStream> {
    use reference::*;
    let data = make_synthetic(NUM_CLASSES, FEATURE_DIM, PER_CLASS, SEPARATION, seed)?;
    split_equally(&data, NUM_TASKS, seed)
}

/// Equally-split stream over a single dataset (80/20 per-class split).
pub fn split_equally(data: &LabeledDataset, num_tasks: usize, seed: u64) -> Result<TaskStream> {
    let groups = equal_groups(data.num_classes, num_tasks, seed)?;
    let (train, test) = train_test_split(data, seed)?;
    TaskStream::from_groups(&train, &test, &groups)
}

/// Big-start stream over a single dataset (80/20 per-class split).
pub fn split_big_start(
    data: &LabeledDataset,
    initial_classes: usize,
    num_incremental: usize,
    seed: u64,
) -> Result<TaskStream> {
    let groups = big_start_groups(data.num_classes, initial_classes, num_incremental, seed)?;
    let (train, test) = train_test_split(data, seed)?;
    TaskStream::from_groups(&train, &test, &groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(classes: usize, per: usize) -> LabeledDataset {
        make_synthetic(classes, 3, per, 2.0, 7).unwrap()
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let d = make_synthetic(10, 4, 100, 3.0, 1).unwrap();
        assert_eq!(d.len(), 1000);
        for c in 0..10 {
            assert_eq!(d.of_class(c).len(), 100);
        }
        assert_eq!(d, make_synthetic(10, 4, 100, 3.0, 1).unwrap());
        assert_ne!(d, make_synthetic(10, 4, 100, 3.0, 2).unwrap());
    }

    #[test]
    fn synthetic_rejects_bad_parameters() {
        assert!(make_synthetic(10, 4, 10, 0.0, 1).is_err());
        assert!(make_synthetic(1, 4, 10, 1.0, 1).is_err());
        assert!(make_synthetic(3, 4, 0, 1.0, 1).is_err());
    }

    #[test]
    fn equal_split_sizes() {
        let groups = equal_groups(100, 10, 3).unwrap();
        assert!(groups.iter().all(|g| g.len() == 10));
        let s = split_equally(&blobs(10, 10), 1, 0).unwrap();
        assert_eq!(s.class_counts(), vec![10]);
        assert!(equal_groups(10, 3, 0).is_err());
        assert_eq!(equal_groups(100, 10, 3).unwrap(), groups);
    }

    #[test]
    fn big_start_sizes() {
        let sizes = |g: Vec<Vec<usize>>| g.iter().map(Vec::len).collect::<Vec<_>>();
        assert_eq!(sizes(big_start_groups(100, 50, 5, 0).unwrap()), vec![50, 10, 10, 10, 10, 10]);
        let mut want = vec![40];
        want.extend([3; 20]);
        assert_eq!(sizes(big_start_groups(100, 40, 20, 0).unwrap()), want);
        assert!(big_start_groups(100, 100, 0, 0).is_err());
        assert!(big_start_groups(100, 50, 3, 0).is_err());
    }

    #[test]
    fn labels_are_remapped_to_head_order() {
        let s = split_equally(&blobs(6, 10), 3, 5).unwrap();
        for (t, task) in s.tasks().iter().enumerate() {
            let range = task.head_classes();
            assert!(task.test().samples().iter().all(|x| range.contains(&x.label)));
            let train = s.train_split(t).unwrap();
            assert!(train.samples().iter().all(|x| range.contains(&x.label)));
            assert_eq!(train.num_classes(), s.seen_classes_after(t));
        }
        assert_eq!(s.train_read_counts(), vec![1, 1, 1]);
    }

    #[test]
    fn overlapping_groups_rejected() {
        let (tr, te) = train_test_split(&blobs(4, 10), 0).unwrap();
        assert!(TaskStream::from_groups(&tr, &te, &[vec![0, 1], vec![1, 2]]).is_err());
        assert!(TaskStream::from_groups(&tr, &te, &[vec![0, 9]]).is_err());
    }
}
