//! Receiver operating characteristic curves for circuit recovery against a
//! ground-truth edge set, with pessimistic handling of score ties.

use crate::discovery::{CircuitSequence, ScoreMap};
use crate::error::{AblateError, Result};
use crate::graph::Granularity;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RocCurve {
    /// Monotone nondecreasing in FPR, endpoints (0,0) and (1,1) included.
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub truth_fingerprint: String,
}

fn truth_fingerprint(truth: &BTreeSet<usize>, universe: usize) -> String {
    let edges: Vec<usize> = truth.iter().copied().collect();
    format!("{universe}:{edges:?}")
}

fn check_truth(truth: &BTreeSet<usize>, universe: usize) -> Result<()> {
    if truth.is_empty() {
        return Err(AblateError::InvalidConfig("empty ground-truth circuit".into()));
    }
    if truth.iter().any(|&e| e >= universe) {
        return Err(AblateError::InvalidConfig(
            "ground truth not contained in the edge universe".into(),
        ));
    }
    Ok(())
}

fn finish(mut points: Vec<RocPoint>, fp: String) -> RocCurve {
    // ensure endpoints; keep FPR (then TPR) nondecreasing
    if points.first().map_or(true, |p| p.fpr > 0.0 || p.tpr > 0.0) {
        points.insert(
            0,
            RocPoint {
                threshold: f64::INFINITY,
                fpr: 0.0,
                tpr: 0.0,
            },
        );
    }
    if points.last().map_or(true, |p| p.fpr < 1.0 || p.tpr < 1.0) {
        points.push(RocPoint {
            threshold: f64::NEG_INFINITY,
            fpr: 1.0,
            tpr: 1.0,
        });
    }
    let mut auc = 0.0;
    for w in points.windows(2) {
        auc += (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0;
    }
    RocCurve {
        points,
        auc,
        truth_fingerprint: fp,
    }
}

fn rates(circuit: &BTreeSet<usize>, truth: &BTreeSet<usize>, universe: usize) -> (f64, f64) {
    let tp = circuit.intersection(truth).count() as f64;
    let fp = circuit.difference(truth).count() as f64;
    let negatives = (universe - truth.len()) as f64;
    let fpr = if negatives == 0.0 { 0.0 } else { fp / negatives };
    (fpr, tp / truth.len() as f64)
}

/// ROC curve from a nested circuit sequence. Points are the per-circuit
/// (FPR, TPR) pairs joined by the trapezoid rule.
pub fn roc_curve(seq: &CircuitSequence, truth: &BTreeSet<usize>, universe: usize) -> Result<RocCurve> {
    check_truth(truth, universe)?;
    seq.validate()?;
    let mut points = Vec::new();
    // ascending threshold gives shrinking circuits; emit in growing order
    for (t, c) in seq.entries.iter().rev() {
        if c.granularity != Granularity::Edges {
            return Err(AblateError::GranularityMismatch(
                "ROC requires edge-level circuits".into(),
            ));
        }
        let members = c.member_set();
        if members.iter().any(|&e| e >= universe) {
            return Err(AblateError::InvalidConfig(
                "circuit not contained in the edge universe".into(),
            ));
        }
        let (fpr, tpr) = rates(&members, truth, universe);
        points.push(RocPoint {
            threshold: *t,
            fpr,
            tpr,
        });
    }
    Ok(finish(points, truth_fingerprint(truth, universe)))
}

/// ROC curve directly from edge scores with pessimistic tie handling: for
/// each tie group, the curve first moves right through all tied non-truth
/// edges, then up through the tied truth edges.
pub fn roc_from_scores(scores: &ScoreMap, truth: &BTreeSet<usize>) -> Result<RocCurve> {
    if scores.granularity != Granularity::Edges {
        return Err(AblateError::GranularityMismatch(
            "score-based ROC requires edge scores".into(),
        ));
    }
    let universe = scores.scores.len();
    check_truth(truth, universe)?;
    let mut distinct: Vec<f64> = scores.scores.clone();
    distinct.sort_by(|a, b| b.partial_cmp(a).unwrap());
    distinct.dedup();

    let negatives = (universe - truth.len()) as f64;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    for t in distinct {
        let group: Vec<usize> = (0..universe).filter(|&e| scores.scores[e] == t).collect();
        let group_fp = group.iter().filter(|e| !truth.contains(e)).count();
        let group_tp = group.len() - group_fp;
        fp += group_fp;
        if group_fp > 0 {
            points.push(RocPoint {
                threshold: t,
                fpr: fp as f64 / negatives.max(1.0),
                tpr: tp as f64 / truth.len() as f64,
            });
        }
        tp += group_tp;
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / negatives.max(1.0),
            tpr: tp as f64 / truth.len() as f64,
        });
    }
    Ok(finish(points, truth_fingerprint(truth, universe)))
}
