//! Ranking and classification scores, the results matrix and transfer metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reciprocal rank of `label` if it is among the top `k` logits, else 0.
/// Equal logits rank the lower index first.
pub fn mrr_at_k(logits: &[f64], label: usize, k: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange { label, classes: logits.len() });
    }
    if k == 0 || logits.len() < k {
        return Err(Error::InvalidArgument(format!("top-{k} ranking over {} classes", logits.len())));
    }
    let target = logits[label];
    let ahead = logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > target || (v == target && j < label))
        .count();
    Ok(if ahead < k { 1.0 / (ahead + 1) as f64 } else { 0.0 })
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = j;
        }
    }
    best
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("accuracy"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Forward transfer in percent against a from-scratch reference score.
pub fn fwt(r_ii: f64, reference: f64) -> Result<f64> {
    if reference == 0.0 {
        return Err(Error::InvalidArgument("forward transfer against a zero reference".into()));
    }
    Ok((r_ii - reference) / reference * 100.0)
}

/// Backward transfer in percent: final score of a task against its score right
/// after it was trained.
pub fn bwt(r_mi: f64, r_ii: f64) -> Result<f64> {
    if r_ii == 0.0 {
        return Err(Error::InvalidArgument("backward transfer against a zero score".into()));
    }
    Ok((r_mi - r_ii) / r_ii * 100.0)
}

/// Which score a task is judged by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mrr5,
    Acc,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Mrr5 => "mrr5",
            Metric::Acc => "acc",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        match s {
            "mrr5" => Some(Metric::Mrr5),
            "acc" => Some(Metric::Acc),
            _ => None,
        }
    }
}

/// One line of the metric stream. `epoch` is `None` for the evaluation that
/// follows each completed stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub order: String,
    pub stage: usize,
    pub task: String,
    pub epoch: Option<usize>,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// `R^(j,i)`: score on task `i` after training through stage `j` (`j ≥ i`).
#[derive(Clone, Debug, PartialEq)]
pub struct ResultsMatrix {
    pub tasks: Vec<String>,
    pub cells: BTreeMap<(usize, usize), f64>,
}

impl ResultsMatrix {
    pub fn get(&self, after: usize, on: usize) -> Option<f64> {
        self.cells.get(&(after, on)).copied()
    }

    /// Cells the protocol expects but the stream lacks.
    pub fn missing(&self) -> Vec<(usize, usize)> {
        let m = self.tasks.len();
        (0..m)
            .flat_map(|j| (0..=j).map(move |i| (j, i)))
            .filter(|c| !self.cells.contains_key(c))
            .collect()
    }

    /// `R^(i,i)` for every task.
    pub fn diagonal(&self) -> Vec<Option<f64>> {
        (0..self.tasks.len()).map(|i| self.get(i, i)).collect()
    }

    /// `R^(M,i)` for every task.
    pub fn final_row(&self) -> Vec<Option<f64>> {
        let last = self.tasks.len().saturating_sub(1);
        (0..self.tasks.len()).map(|i| self.get(last, i)).collect()
    }

    /// Forward transfer per task; absent for the first task and wherever the
    /// reference or diagonal is unavailable.
    pub fn fwt_row(&self, reference: &[Option<f64>]) -> Vec<Option<f64>> {
        (0..self.tasks.len())
            .map(|i| {
                if i == 0 {
                    return None;
                }
                let (r, base) = (self.get(i, i)?, reference.get(i).copied().flatten()?);
                fwt(r, base).ok()
            })
            .collect()
    }

    /// Backward transfer per task; absent for the last task.
    pub fn bwt_row(&self) -> Vec<Option<f64>> {
        let m = self.tasks.len();
        (0..m)
            .map(|i| {
                if i + 1 == m {
                    return None;
                }
                bwt(self.get(m - 1, i)?, self.get(i, i)?).ok()
            })
            .collect()
    }
}

/// Collects the post-stage test scores of a run. `tasks` lists task names in
/// training order; records with an epoch, another split, or an unknown task
/// are ignored.
pub fn build_results_matrix(records: &[MetricRecord], tasks: &[String]) -> Result<ResultsMatrix> {
    let mut cells = BTreeMap::new();
    for r in records {
        if r.epoch.is_some() || r.split != "test" || Metric::parse(&r.metric).is_none() {
            continue;
        }
        let Some(on) = tasks.iter().position(|t| *t == r.task) else { continue };
        if on > r.stage || r.stage >= tasks.len() {
            continue;
        }
        match cells.insert((r.stage, on), r.value) {
            Some(prev) if prev.to_bits() != r.value.to_bits() => {
                return Err(Error::DuplicateCell { after: r.stage, on })
            }
            _ => {}
        }
    }
    Ok(ResultsMatrix { tasks: tasks.to_vec(), cells })
}
