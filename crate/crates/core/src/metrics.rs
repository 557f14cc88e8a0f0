//! AUC, log loss and the analysis tables built from evaluation passes.

use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::controller::SelectionOutput;
use crate::data::{frequency_groups, Dataset, GroundTruth};
use crate::numeric::bce_loss;
use crate::{Error, Result};

fn check_lengths(scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput(alloc::format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Rank-sum AUC with average ranks for tied scores.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Undefined("AUC needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].total_cmp(&scores[order[i]]) == Ordering::Equal {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1.0 {
                rank_sum += rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean binary cross-entropy with the training clamp.
pub fn logloss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::InvalidInput("log loss of an empty set".into()));
    }
    let total: f64 = scores.iter().zip(labels).map(|(&p, &y)| bce_loss(p, y)).sum();
    Ok(total / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    G1,
    G2,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::G1 => "G1",
            Group::G2 => "G2",
        }
    }
}

/// AUC of one model inside one frequency group of one field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAuc {
    pub field: usize,
    pub group: Group,
    /// `None` when the group holds a single class.
    pub auc: Option<f64>,
    pub n: usize,
}

/// Difference `a − b` of two models' AUCs inside one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDelta {
    pub field: usize,
    pub group: Group,
    /// `None` when the group holds a single class.
    pub delta_auc: Option<f64>,
    pub n: usize,
}

fn subset_auc(preds: &[f64], labels: &[f64], rows: &[usize]) -> Option<f64> {
    let s: Vec<f64> = rows.iter().map(|&r| preds[r]).collect();
    let y: Vec<f64> = rows.iter().map(|&r| labels[r]).collect();
    auc(&s, &y).ok()
}

/// Per-field G1/G2 AUC of one set of predictions on `ds`.
pub fn group_auc(preds: &[f64], ds: &Dataset, fields: &[usize]) -> Result<Vec<GroupAuc>> {
    let labels = ds.labels();
    check_lengths(preds, &labels)?;
    let mut out = Vec::with_capacity(2 * fields.len());
    for &field in fields {
        let groups = frequency_groups(ds, field)?;
        for (group, rows) in [(Group::G1, &groups.g1_instances), (Group::G2, &groups.g2_instances)] {
            out.push(GroupAuc {
                field,
                group,
                auc: subset_auc(preds, &labels, rows),
                n: rows.len(),
            });
        }
    }
    Ok(out)
}

/// Per-field G1/G2 AUC differences `a − b` on the same dataset.
pub fn group_breakdown(preds_a: &[f64], preds_b: &[f64], ds: &Dataset, fields: &[usize]) -> Result<Vec<GroupDelta>> {
    let a = group_auc(preds_a, ds, fields)?;
    let b = group_auc(preds_b, ds, fields)?;
    Ok(a.into_iter()
        .zip(b)
        .map(|(a, b)| GroupDelta {
            field: a.field,
            group: a.group,
            delta_auc: match (a.auc, b.auc) {
                (Some(x), Some(y)) => Some(x - y),
                _ => None,
            },
            n: a.n,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDistance {
    pub a: usize,
    pub b: usize,
    pub l1: f64,
}

/// Mean of `r_k · SN_k(E)` over instances, one row per sub-network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubnetProfile {
    pub rows: Vec<Vec<f64>>,
    pub pairwise_l1: Vec<PairDistance>,
}

impl SubnetProfile {
    pub fn max_pairwise_l1(&self) -> Option<f64> {
        self.pairwise_l1.iter().map(|p| p.l1).reduce(f64::max)
    }
}

pub fn subnet_profile(outputs: &[SelectionOutput]) -> Result<SubnetProfile> {
    let first = outputs
        .first()
        .ok_or(Error::InvalidInput("profile of an empty set".into()))?;
    let (k, n) = first.per_subnet.shape();
    let mut rows = alloc::vec![alloc::vec![0.0; n]; k];
    for out in outputs {
        for (i, row) in rows.iter_mut().enumerate() {
            let r = out.gates[i];
            for (acc, v) in row.iter_mut().zip(out.per_subnet.row(i)) {
                *acc += r * v;
            }
        }
    }
    let m = outputs.len() as f64;
    rows.iter_mut().flatten().for_each(|v| *v /= m);
    let mut pairwise_l1 = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            let l1 = rows[a].iter().zip(&rows[b]).map(|(x, y)| (x - y).abs()).sum();
            pairwise_l1.push(PairDistance { a, b, l1 });
        }
    }
    Ok(SubnetProfile { rows, pairwise_l1 })
}

/// Fraction of instances whose hard selection keeps each field.
pub fn selection_rates(outputs: &[SelectionOutput], threshold: f64) -> Vec<f64> {
    let Some(first) = outputs.first() else {
        return Vec::new();
    };
    let mut counts = alloc::vec![0usize; first.importance.len()];
    for out in outputs {
        for (c, &i) in counts.iter_mut().zip(&out.importance) {
            if i >= threshold {
                *c += 1;
            }
        }
    }
    counts.iter().map(|&c| c as f64 / outputs.len() as f64).collect()
}

/// Mean aggregated importance `I` over the instances of each planted mode.
pub fn mode_importance(outputs: &[SelectionOutput], ds: &Dataset, truth: &GroundTruth) -> Result<Vec<Vec<f64>>> {
    check_lengths(&alloc::vec![0.0; outputs.len()], &alloc::vec![0.0; ds.len()])?;
    let fields = ds.field_count();
    let mut sums = alloc::vec![alloc::vec![0.0; fields]; truth.modes.len()];
    let mut counts = alloc::vec![0usize; truth.modes.len()];
    for (out, inst) in outputs.iter().zip(ds.instances()) {
        if let Some(m) = truth.mode_of(inst) {
            counts[m] += 1;
            for (s, v) in sums[m].iter_mut().zip(&out.importance) {
                *s += v;
            }
        }
    }
    for (row, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            row.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    Ok(sums)
}

/// Indices of the `k` largest entries, ties broken by lower index.
pub fn top_fields(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// `(precision, recall)` of a selected field set against a planted one.
/// Precision is `None` for an empty selection.
pub fn precision_recall(selected: &[usize], planted: &[usize]) -> (Option<f64>, f64) {
    let hits = selected.iter().filter(|f| planted.contains(f)).count() as f64;
    let precision = (!selected.is_empty()).then(|| hits / selected.len() as f64);
    let recall = if planted.is_empty() {
        1.0
    } else {
        hits / planted.len() as f64
    };
    (precision, recall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeQuality {
    pub mode: usize,
    pub instances: usize,
    /// Fields kept for more than half of the mode's instances.
    pub selected: Vec<usize>,
    pub planted: Vec<usize>,
    pub precision: Option<f64>,
    pub recall: f64,
}

/// Majority-vote hard selection per mode compared with the planted sets.
pub fn selection_quality(
    outputs: &[SelectionOutput],
    ds: &Dataset,
    truth: &GroundTruth,
    threshold: f64,
) -> Result<Vec<ModeQuality>> {
    check_lengths(&alloc::vec![0.0; outputs.len()], &alloc::vec![0.0; ds.len()])?;
    let fields = ds.field_count();
    let mut kept = alloc::vec![alloc::vec![0usize; fields]; truth.modes.len()];
    let mut counts = alloc::vec![0usize; truth.modes.len()];
    for (out, inst) in outputs.iter().zip(ds.instances()) {
        if let Some(m) = truth.mode_of(inst) {
            counts[m] += 1;
            for (c, &i) in kept[m].iter_mut().zip(&out.importance) {
                if i >= threshold {
                    *c += 1;
                }
            }
        }
    }
    Ok(truth
        .modes
        .iter()
        .enumerate()
        .map(|(m, mode)| {
            let selected: Vec<usize> = (0..fields).filter(|&f| 2 * kept[m][f] > counts[m]).collect();
            let (precision, recall) = precision_recall(&selected, &mode.informative_fields);
            ModeQuality {
                mode: m,
                instances: counts[m],
                selected,
                planted: mode.informative_fields.clone(),
                precision,
                recall,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub train_loss: f64,
    pub valid_auc: Option<f64>,
    pub valid_logloss: Option<f64>,
    pub steps: u64,
}

/// Everything reported about one trained model on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub backbone: String,
    pub transferred: bool,
    pub n: usize,
    pub auc: f64,
    pub logloss: f64,
    pub group_auc: Vec<GroupAuc>,
    pub subnet_profile: Option<SubnetProfile>,
    pub selection_rates: Option<Vec<f64>>,
    pub selection_quality: Option<Vec<ModeQuality>>,
    pub history: Vec<EpochRecord>,
}
