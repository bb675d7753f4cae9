//! Accuracy bookkeeping: `a_{t,j}` matrices, last and average incremental
//! accuracy, and forgetting transfer.
//!
//! Task indices in this module are 1-based, matching `a_{t,j}` notation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::par::{map_indexed, Execution};
use crate::scenario::LabeledDataset;

/// How `A_t` combines per-task accuracies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Plain mean over tasks `j ≤ t`.
    #[default]
    TaskBalanced,
    /// Mean weighted by each task's test-set size.
    SampleWeighted,
}

/// Top-1 accuracy in percent, predicting the argmax over `seen_classes`
/// (ties go to the lowest class index).
pub fn accuracy(net: &Network, test: &LabeledDataset, seen_classes: &[usize]) -> Result<f64> {
    accuracy_with(net, test, seen_classes, Execution::default())
}

pub fn accuracy_with(
    net: &Network,
    test: &LabeledDataset,
    seen_classes: &[usize],
    exec: Execution,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::invalid("accuracy of an empty test set"));
    }
    if let Some(&c) = seen_classes.iter().find(|&&c| c >= net.num_classes()) {
        return Err(Error::invalid(format!("seen class {c} has no head row")));
    }
    let mut sorted = seen_classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if let Some(s) = test.samples().iter().find(|s| sorted.binary_search(&s.label).is_err()) {
        return Err(Error::invalid(format!("test label {} is not a seen class", s.label)));
    }
    let samples = test.samples();
    let hits = map_indexed(exec, samples.len(), |i| -> Result<bool> {
        let z = net.logits(&samples[i].features)?;
        let mut best = sorted[0];
        for &c in &sorted[1..] {
            if z.get(c) > z.get(best) {
                best = c;
            }
        }
        Ok(best == samples[i].label)
    });
    let mut correct = 0usize;
    for h in hits {
        correct += h? as usize;
    }
    Ok(100.0 * correct as f64 / samples.len() as f64)
}

/// Lower-triangular record of `a_{t,j}` (accuracy on task `j` after training
/// task `t`), plus the pre-learning accuracies `a_{j−1,j}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Option<f64>>>,
    pre_learning: Vec<Option<f64>>,
    test_sizes: Vec<Option<usize>>,
}

fn check_percent(v: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&v) {
        return Err(Error::invalid(format!("accuracy {v} outside [0, 100]")));
    }
    Ok(())
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            rows: (1..=num_tasks).map(|t| vec![None; t]).collect(),
            pre_learning: vec![None; num_tasks],
            test_sizes: vec![None; num_tasks],
        }
    }

    /// Builds a complete matrix from full lower-triangular rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = AccuracyMatrix::new(rows.len());
        for (t, row) in rows.iter().enumerate() {
            if row.len() != t + 1 {
                return Err(Error::invalid(format!("row {} needs {} entries", t + 1, t + 1)));
            }
            for (j, &v) in row.iter().enumerate() {
                m.record(t + 1, j + 1, v)?;
            }
        }
        Ok(m)
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    fn check_index(&self, t: usize, j: usize) -> Result<()> {
        if j == 0 || t == 0 || j > t || t > self.num_tasks() {
            return Err(Error::invalid(format!(
                "a_{{{t},{j}}} is outside the lower triangle of a {}-task matrix",
                self.num_tasks()
            )));
        }
        Ok(())
    }

    pub fn record(&mut self, t: usize, j: usize, value: f64) -> Result<()> {
        self.check_index(t, j)?;
        check_percent(value)?;
        self.rows[t - 1][j - 1] = Some(value);
        Ok(())
    }

    /// Records `a_{j−1,j}`.
    pub fn record_pre_learning(&mut self, j: usize, value: f64) -> Result<()> {
        self.check_index(j, j)?;
        check_percent(value)?;
        self.pre_learning[j - 1] = Some(value);
        Ok(())
    }

    pub fn record_test_size(&mut self, j: usize, n: usize) -> Result<()> {
        self.check_index(j, j)?;
        self.test_sizes[j - 1] = Some(n);
        Ok(())
    }

    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        self.check_index(t, j).ok()?;
        self.rows[t - 1][j - 1]
    }

    pub fn pre_learning(&self, j: usize) -> Option<f64> {
        self.pre_learning.get(j.checked_sub(1)?).copied().flatten()
    }

    /// True once rows `1..=t` are filled.
    pub fn is_complete_through(&self, t: usize) -> bool {
        t <= self.num_tasks() && self.rows[..t].iter().all(|r| r.iter().all(Option::is_some))
    }

    pub fn is_complete(&self) -> bool {
        self.num_tasks() > 0 && self.is_complete_through(self.num_tasks())
    }

    fn require_complete(&self) -> Result<()> {
        if self.is_complete() {
            Ok(())
        } else {
            Err(Error::invalid("accuracy matrix is incomplete"))
        }
    }

    /// `A_t`, the accuracy over all tasks seen after training task `t`.
    pub fn incremental_accuracy(&self, t: usize, weighting: Weighting) -> Result<f64> {
        if t == 0 || !self.is_complete_through(t) {
            return Err(Error::invalid(format!("row {t} of the accuracy matrix is incomplete")));
        }
        let row = self.rows[t - 1].iter().map(|v| v.expect("complete row"));
        match weighting {
            Weighting::TaskBalanced => Ok(row.sum::<f64>() / t as f64),
            Weighting::SampleWeighted => {
                let sizes: Option<Vec<usize>> = self.test_sizes[..t].iter().copied().collect();
                let sizes = sizes.ok_or_else(|| Error::invalid("sample weighting needs every task's test size"))?;
                let total: usize = sizes.iter().sum();
                if total == 0 {
                    return Err(Error::invalid("sample weighting over empty test sets"));
                }
                Ok(row.zip(&sizes).map(|(a, &n)| a * n as f64).sum::<f64>() / total as f64)
            }
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Serde(e.to_string());
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.num_tasks()).map(|j| format!("a_{j}")));
        w.write_record(&header).map_err(err)?;
        for (t, row) in self.rows.iter().enumerate() {
            let mut rec = vec![(t + 1).to_string()];
            for j in 0..self.num_tasks() {
                rec.push(row.get(j).copied().flatten().map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| Error::Serde(e.to_string()))
    }

    /// Parses the CSV written by [`AccuracyMatrix::write_csv`].
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut rows = Vec::new();
        for (t, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::Serde(e.to_string()))?;
            let row: std::result::Result<Vec<f64>, _> =
                rec.iter().skip(1).take(t + 1).map(str::parse::<f64>).collect();
            rows.push(row.map_err(|e| Error::Serde(e.to_string()))?);
        }
        AccuracyMatrix::from_rows(&rows)
    }
}

/// `A_last = A_T`.
pub fn a_last(m: &AccuracyMatrix) -> Result<f64> {
    a_last_weighted(m, Weighting::TaskBalanced)
}

pub fn a_last_weighted(m: &AccuracyMatrix, weighting: Weighting) -> Result<f64> {
    m.require_complete()?;
    m.incremental_accuracy(m.num_tasks(), weighting)
}

/// `A_avg = (1/T) Σ_t A_t`.
pub fn a_avg(m: &AccuracyMatrix) -> Result<f64> {
    a_avg_weighted(m, Weighting::TaskBalanced)
}

pub fn a_avg_weighted(m: &AccuracyMatrix, weighting: Weighting) -> Result<f64> {
    m.require_complete()?;
    let mut sum = 0.0;
    for t in 1..=m.num_tasks() {
        sum += m.incremental_accuracy(t, weighting)?;
    }
    Ok(sum / m.num_tasks() as f64)
}

/// `F_{t,j} = 100·(a_{j,j} − a_{t,j}) / (a_{j,j} − a_{j−1,j})` for `j < t`.
pub fn forgetting_transfer(m: &AccuracyMatrix, t: usize, j: usize) -> Result<f64> {
    if j >= t {
        return Err(Error::invalid(format!("forgetting transfer needs j < t, got t={t}, j={j}")));
    }
    m.check_index(t, j)?;
    let missing = |what: &str| Error::invalid(format!("{what} not recorded"));
    let ajj = m.get(j, j).ok_or_else(|| missing("a_{j,j}"))?;
    let atj = m.get(t, j).ok_or_else(|| missing("a_{t,j}"))?;
    let before = m.pre_learning(j).ok_or_else(|| missing("a_{j-1,j}"))?;
    let denom = ajj - before;
    if denom == 0.0 {
        return Err(Error::UndefinedMetric(format!(
            "F_{{{t},{j}}}: task {j} accuracy did not change while learning it"
        )));
    }
    Ok(100.0 * (ajj - atj) / denom)
}

/// Machine-readable summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub a_last: f64,
    pub a_avg: f64,
    pub incremental: Vec<f64>,
    pub matrix: Vec<Vec<f64>>,
    /// `a_{t,j}` cells as text, with `F_{t,j}` in brackets below the diagonal.
    pub table: Vec<Vec<String>>,
}

impl MatrixReport {
    pub fn from_matrix(m: &AccuracyMatrix, weighting: Weighting) -> Result<Self> {
        m.require_complete()?;
        let t_max = m.num_tasks();
        let mut incremental = Vec::with_capacity(t_max);
        let mut matrix = Vec::with_capacity(t_max);
        let mut table = Vec::with_capacity(t_max);
        for t in 1..=t_max {
            incremental.push(m.incremental_accuracy(t, weighting)?);
            let row: Vec<f64> = (1..=t).map(|j| m.get(t, j).expect("complete")).collect();
            table.push(
                row.iter()
                    .enumerate()
                    .map(|(j0, a)| {
                        let j = j0 + 1;
                        if j == t {
                            return format!("{a:.2}");
                        }
                        match forgetting_transfer(m, t, j) {
                            Ok(f) => format!("{a:.2} [{f:.2}]"),
                            Err(_) => format!("{a:.2} [n/a]"),
                        }
                    })
                    .collect(),
            );
            matrix.push(row);
        }
        Ok(Self {
            a_last: a_last_weighted(m, weighting)?,
            a_avg: a_avg_weighted(m, weighting)?,
            incremental,
            matrix,
            table,
        })
    }
}
