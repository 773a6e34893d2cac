//! Binary-call and score metrics for per-residue interface predictions.
//!
//! Degenerate denominators (no positives, constant series, ...) report a value
//! of 0 (0.5 for ROC-AUC) and set [`Metric::degenerate`] instead of producing NaN.

use std::fmt::Write as _;

use serde::Serialize;

use crate::batch::ChainRole;
use crate::error::{Error, Result};

/// Clamp applied to scores before taking logs in [`bce`].
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metric {
    pub value: f64,
    pub degenerate: bool,
}

impl Metric {
    fn ok(value: f64) -> Metric {
        Metric {
            value,
            degenerate: false,
        }
    }

    fn degenerate(value: f64) -> Metric {
        Metric {
            value,
            degenerate: true,
        }
    }

    fn ratio(num: f64, den: f64) -> Metric {
        if den == 0.0 {
            Metric::degenerate(0.0)
        } else {
            Metric::ok(num / den)
        }
    }

    pub fn flag(&self) -> &'static str {
        if self.degenerate {
            "degenerate"
        } else {
            ""
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConfusionMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub n: u64,
    pub iou: Metric,
    pub precision: Metric,
    pub recall: Metric,
    pub f1: Metric,
    pub mcc: Metric,
}

fn check_lengths(a: usize, b: usize, mask: Option<&[bool]>) -> Result<()> {
    if a != b || mask.is_some_and(|m| m.len() != a) {
        return Err(Error::Shape(format!(
            "metric inputs differ in length: {a}, {b}{}",
            mask.map(|m| format!(", mask {}", m.len()))
                .unwrap_or_default()
        )));
    }
    Ok(())
}

fn valid(mask: Option<&[bool]>, i: usize) -> bool {
    mask.is_none_or(|m| m[i])
}

/// IoU, precision, recall, F1 and MCC of 0/1 calls against 0/1 labels.
pub fn confusion_metrics(
    calls: &[u8],
    labels: &[u8],
    mask: Option<&[bool]>,
) -> Result<ConfusionMetrics> {
    check_lengths(calls.len(), labels.len(), mask)?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..calls.len() {
        if !valid(mask, i) {
            continue;
        }
        match (calls[i] != 0, labels[i] != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(from_counts(tp, fp, fn_, tn))
}

pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionMetrics {
    let (tpf, fpf, fnf, tnf) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
    let mcc_den = ((tpf + fpf) * (tpf + fnf) * (tnf + fpf) * (tnf + fnf)).sqrt();
    ConfusionMetrics {
        tp,
        fp,
        fn_,
        tn,
        n: tp + fp + fn_ + tn,
        iou: Metric::ratio(tpf, tpf + fpf + fnf),
        precision: Metric::ratio(tpf, tpf + fpf),
        recall: Metric::ratio(tpf, tpf + fnf),
        f1: Metric::ratio(2.0 * tpf, 2.0 * tpf + fpf + fnf),
        mcc: Metric::ratio(tpf * tnf - fpf * fnf, mcc_den),
    }
}

fn collect(scores: &[f64], labels: &[u8], mask: Option<&[bool]>) -> Result<Vec<(f64, bool)>> {
    check_lengths(scores.len(), labels.len(), mask)?;
    Ok((0..scores.len())
        .filter(|&i| valid(mask, i))
        .map(|i| (scores[i], labels[i] != 0))
        .collect())
}

/// Sample Pearson correlation between scores and labels.
pub fn pcc(scores: &[f64], labels: &[u8], mask: Option<&[bool]>) -> Result<Metric> {
    let pts = collect(scores, labels, mask)?;
    if pts.len() < 2 {
        return Ok(Metric::degenerate(0.0));
    }
    let n = pts.len() as f64;
    let mean_s = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| f64::from(u8::from(p.1))).sum::<f64>() / n;
    let (mut cov, mut var_s, mut var_y) = (0.0, 0.0, 0.0);
    for &(s, y) in &pts {
        let ds = s - mean_s;
        let dy = f64::from(u8::from(y)) - mean_y;
        cov += ds * dy;
        var_s += ds * ds;
        var_y += dy * dy;
    }
    if var_s == 0.0 || var_y == 0.0 {
        return Ok(Metric::degenerate(0.0));
    }
    Ok(Metric::ok(
        (cov / (var_s.sqrt() * var_y.sqrt())).clamp(-1.0, 1.0),
    ))
}

/// Area under the ROC curve from midranks: the probability that a random
/// positive outscores a random negative, counting ties as one half.
pub fn roc_auc(scores: &[f64], labels: &[u8], mask: Option<&[bool]>) -> Result<Metric> {
    let mut pts = collect(scores, labels, mask)?;
    let positives = pts.iter().filter(|p| p.1).count();
    let negatives = pts.len() - positives;
    if positives == 0 || negatives == 0 {
        return Ok(Metric::degenerate(0.5));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pts.len() {
        let mut j = i;
        while j < pts.len() && pts[j].0 == pts[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let midrank = (i + 1 + j) as f64 / 2.0;
        rank_sum += midrank * pts[i..j].iter().filter(|p| p.1).count() as f64;
        i = j;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok(Metric::ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}

/// Average precision: precision at each distinct score threshold (descending,
/// ties grouped) weighted by the recall it adds.
pub fn pr_auc(scores: &[f64], labels: &[u8], mask: Option<&[bool]>) -> Result<Metric> {
    let mut pts = collect(scores, labels, mask)?;
    let positives = pts.iter().filter(|p| p.1).count();
    if positives == 0 {
        return Ok(Metric::degenerate(0.0));
    }
    pts.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp, mut area) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < pts.len() {
        let mut j = i;
        let before = tp;
        while j < pts.len() && pts[j].0 == pts[i].0 {
            if pts[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        if tp > before {
            area += (tp as f64 / (tp + fp) as f64) * ((tp - before) as f64 / positives as f64);
        }
        i = j;
    }
    Ok(Metric::ok(area))
}

/// Mean squared error between labels and scores in `[0, 1]`.
pub fn brier(scores: &[f64], labels: &[u8], mask: Option<&[bool]>) -> Result<Metric> {
    let pts = collect(scores, labels, mask)?;
    if let Some(&(s, _)) = pts.iter().find(|p| !(0.0..=1.0).contains(&p.0)) {
        return Err(Error::Data(format!("score {s} outside [0,1]")));
    }
    if pts.is_empty() {
        return Ok(Metric::degenerate(0.0));
    }
    let total: f64 = pts
        .iter()
        .map(|&(s, y)| (f64::from(u8::from(y)) - s).powi(2))
        .sum();
    Ok(Metric::ok(total / pts.len() as f64))
}

/// Mean binary cross-entropy with scores clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub fn bce(scores: &[f64], labels: &[u8], mask: Option<&[bool]>) -> Result<Metric> {
    let pts = collect(scores, labels, mask)?;
    if pts.is_empty() {
        return Ok(Metric::degenerate(0.0));
    }
    let total: f64 = pts
        .iter()
        .map(|&(s, y)| {
            let s = s.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            if y {
                -s.ln()
            } else {
                -(1.0 - s).ln()
            }
        })
        .sum();
    Ok(Metric::ok(total / pts.len() as f64))
}

/// Confusion metrics at each grid threshold (clamped into `[0, 1]`); a
/// residue is called when `score >= threshold`.
pub fn threshold_sweep(
    scores: &[f64],
    labels: &[u8],
    mask: Option<&[bool]>,
    grid: &[f64],
) -> Result<Vec<(f64, ConfusionMetrics)>> {
    check_lengths(scores.len(), labels.len(), mask)?;
    grid.iter()
        .map(|&t| {
            let t = t.clamp(0.0, 1.0);
            let calls: Vec<u8> = scores.iter().map(|&s| u8::from(s >= t)).collect();
            Ok((t, confusion_metrics(&calls, labels, mask)?))
        })
        .collect()
}

/// `0, step, 2·step, ..., 1`.
pub fn uniform_grid(step: f64) -> Vec<f64> {
    let n = (1.0 / step).round() as usize;
    (0..=n).map(|k| (k as f64 * step).min(1.0)).collect()
}

/// Every metric for one chain role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoleMetrics {
    pub confusion: ConfusionMetrics,
    pub pcc: Metric,
    pub roc_auc: Metric,
    pub pr_auc: Metric,
    pub brier: Metric,
    pub bce: Metric,
}

impl RoleMetrics {
    pub fn compute(scores: &[f64], labels: &[u8], threshold: f64) -> Result<RoleMetrics> {
        let calls: Vec<u8> = scores.iter().map(|&s| u8::from(s >= threshold)).collect();
        Ok(RoleMetrics {
            confusion: confusion_metrics(&calls, labels, None)?,
            pcc: pcc(scores, labels, None)?,
            roc_auc: roc_auc(scores, labels, None)?,
            pr_auc: pr_auc(scores, labels, None)?,
            brier: brier(scores, labels, None)?,
            bce: bce(scores, labels, None)?,
        })
    }

    pub fn named(&self) -> [(&'static str, Metric); 10] {
        let c = &self.confusion;
        [
            ("iou", c.iou),
            ("precision", c.precision),
            ("recall", c.recall),
            ("f1", c.f1),
            ("mcc", c.mcc),
            ("pcc", self.pcc),
            ("roc_auc", self.roc_auc),
            ("pr_auc", self.pr_auc),
            ("brier", self.brier),
            ("bce", self.bce),
        ]
    }
}

/// Scores, labels and the threshold of one role across a dataset.
#[derive(Debug, Clone, Default)]
pub struct RoleSeries {
    /// Per complex: `(scores, labels)`.
    pub complexes: Vec<(Vec<f64>, Vec<u8>)>,
    pub threshold: f64,
}

/// Pooled metrics per role plus per-complex means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub roles: Vec<(ChainRole, RoleMetrics)>,
    /// Mean over complexes of each score metric, keyed like [`RoleMetrics::named`].
    pub per_complex: Vec<(ChainRole, Vec<(&'static str, f64)>)>,
}

impl MetricsReport {
    /// Residues are pooled across complexes for the primary values.
    pub fn from_series(series: &[(ChainRole, RoleSeries)]) -> Result<MetricsReport> {
        let mut roles = Vec::new();
        let mut per_complex = Vec::new();
        for (role, s) in series {
            if s.complexes.is_empty() {
                continue;
            }
            let scores: Vec<f64> = s
                .complexes
                .iter()
                .flat_map(|c| c.0.iter().copied())
                .collect();
            let labels: Vec<u8> = s
                .complexes
                .iter()
                .flat_map(|c| c.1.iter().copied())
                .collect();
            roles.push((*role, RoleMetrics::compute(&scores, &labels, s.threshold)?));

            let each: Vec<RoleMetrics> = s
                .complexes
                .iter()
                .map(|(sc, lb)| RoleMetrics::compute(sc, lb, s.threshold))
                .collect::<Result<_>>()?;
            let names = each[0].named().map(|(n, _)| n);
            let means = names
                .iter()
                .enumerate()
                .map(|(k, &name)| {
                    (
                        name,
                        each.iter().map(|m| m.named()[k].1.value).sum::<f64>() / each.len() as f64,
                    )
                })
                .collect();
            per_complex.push((*role, means));
        }
        Ok(MetricsReport { roles, per_complex })
    }

    /// CSV `role,metric,value,flag`; per-complex means use a `_per_complex` suffix.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("role,metric,value,flag\n");
        for (role, m) in &self.roles {
            for (name, metric) in m.named() {
                writeln!(out, "{role},{name},{},{}", metric.value, metric.flag()).unwrap();
            }
            let c = &m.confusion;
            for (name, count) in [
                ("tp", c.tp),
                ("fp", c.fp),
                ("fn", c.fn_),
                ("tn", c.tn),
                ("n", c.n),
            ] {
                writeln!(out, "{role},{name},{count},").unwrap();
            }
        }
        for (role, means) in &self.per_complex {
            for (name, value) in means {
                writeln!(out, "{role},{name}_per_complex,{value},").unwrap();
            }
        }
        out
    }
}

/// CSV `role,threshold,metric,value` for a sweep.
pub fn sweep_csv(rows: &[(ChainRole, Vec<(f64, ConfusionMetrics)>)]) -> String {
    let mut out = String::from("role,threshold,metric,value\n");
    for (role, sweep) in rows {
        for (t, c) in sweep {
            for (name, m) in [
                ("iou", c.iou),
                ("precision", c.precision),
                ("recall", c.recall),
                ("f1", c.f1),
                ("mcc", c.mcc),
            ] {
                writeln!(out, "{role},{t},{name},{}", m.value).unwrap();
            }
        }
    }
    out
}
