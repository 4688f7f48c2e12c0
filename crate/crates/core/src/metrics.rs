//! Faithfulness metrics: logit-difference-recovered in both averaging
//! orders, KL divergence, correct-answer percentage, answer probability,
//! MSE, and per-prompt distribution statistics.

use crate::data::AnswerSpec;
use crate::error::{AblateError, Result};
use crate::tensor::{self, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Denominators smaller than this are excluded (MeanOfRatios) or reject the
/// whole metric (RatioOfMeans).
pub const DENOM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AveragingOrder {
    /// 100 * E[F_c - F_i] / E[M_c - M_i]
    RatioOfMeans,
    /// E[100 * (F_c - F_i) / (M_c - M_i)]
    MeanOfRatios,
}

/// Per-prompt logit difference (correct minus incorrect), averaged over the
/// prompt's answer entries. Entries with an empty incorrect set contribute
/// nothing.
pub fn logit_diff(logits: &Tensor, answer: &AnswerSpec) -> Result<Option<f64>> {
    let entries = match answer {
        AnswerSpec::Tokens(e) => e,
        AnswerSpec::Regression { .. } => {
            return Err(AblateError::MetricRejected(
                "logit difference requires token answers".into(),
            ))
        }
    };
    let mut acc = 0.0;
    let mut n = 0usize;
    for e in entries {
        if e.correct.is_empty() || e.incorrect.is_empty() {
            continue;
        }
        let row = logits.row(e.position);
        let c: f64 = e.correct.iter().map(|&t| row[t]).sum::<f64>() / e.correct.len() as f64;
        let i: f64 = e.incorrect.iter().map(|&t| row[t]).sum::<f64>() / e.incorrect.len() as f64;
        acc += c - i;
        n += 1;
    }
    Ok(if n == 0 { None } else { Some(acc / n as f64) })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogitDiffRecovered {
    pub percent: f64,
    pub order: AveragingOrder,
    /// Per-prompt recovered percentages (MeanOfRatios terms).
    pub per_prompt: Vec<Option<f64>>,
    /// Prompts excluded for near-zero full-model denominators, with the
    /// offending denominator. Reported, never silent.
    pub excluded: Vec<(usize, f64)>,
}

/// Percentage of the full model's logit difference recovered by the ablated
/// model, in either averaging order. `f_logits` are the ablated outputs,
/// `m_logits` the full-model outputs.
pub fn logit_diff_recovered(
    f_logits: &[Tensor],
    m_logits: &[Tensor],
    answers: &[AnswerSpec],
    order: AveragingOrder,
) -> Result<LogitDiffRecovered> {
    if f_logits.len() != m_logits.len() || f_logits.len() != answers.len() {
        return Err(AblateError::MetricRejected(
            "batch size mismatch between logits and answers".into(),
        ));
    }
    let mut f_diffs = Vec::new();
    let mut m_diffs = Vec::new();
    for ((f, m), a) in f_logits.iter().zip(m_logits).zip(answers) {
        a.validate()?;
        let fd = logit_diff(f, a)?;
        let md = logit_diff(m, a)?;
        match (fd, md) {
            (Some(fd), Some(md)) => {
                f_diffs.push(fd);
                m_diffs.push(md);
            }
            _ => {
                f_diffs.push(f64::NAN);
                m_diffs.push(f64::NAN);
            }
        }
    }
    let valid: Vec<usize> = (0..f_diffs.len()).filter(|&i| m_diffs[i].is_finite()).collect();
    if valid.is_empty() {
        return Err(AblateError::MetricRejected("no prompts with answer entries".into()));
    }
    let mut excluded = Vec::new();
    let mut per_prompt = vec![None; f_diffs.len()];
    for &i in &valid {
        if m_diffs[i].abs() < DENOM_EPS {
            excluded.push((i, m_diffs[i]));
        } else {
            per_prompt[i] = Some(100.0 * f_diffs[i] / m_diffs[i]);
        }
    }
    let percent = match order {
        AveragingOrder::RatioOfMeans => {
            let n = valid.len() as f64;
            let fm: f64 = valid.iter().map(|&i| f_diffs[i]).sum::<f64>() / n;
            let mm: f64 = valid.iter().map(|&i| m_diffs[i]).sum::<f64>() / n;
            if mm.abs() < DENOM_EPS {
                return Err(AblateError::MetricRejected(format!(
                    "mean full-model logit difference {mm} too close to zero"
                )));
            }
            100.0 * fm / mm
        }
        AveragingOrder::MeanOfRatios => {
            let included: Vec<f64> = per_prompt.iter().flatten().copied().collect();
            if included.is_empty() {
                return Err(AblateError::MetricRejected(
                    "all prompts excluded by near-zero denominators".into(),
                ));
            }
            included.iter().sum::<f64>() / included.len() as f64
        }
    };
    Ok(LogitDiffRecovered {
        percent,
        order,
        per_prompt,
        excluded,
    })
}

/// Mean KL(softmax(reference) || softmax(other)) in nats over prompts and
/// positions. The full model is the reference distribution by default.
pub fn kl_divergence(f_logits: &[Tensor], m_logits: &[Tensor]) -> Result<f64> {
    let per = kl_divergence_per_prompt(f_logits, m_logits)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Per-prompt mean KL(full || ablated) over positions.
pub fn kl_divergence_per_prompt(f_logits: &[Tensor], m_logits: &[Tensor]) -> Result<Vec<f64>> {
    if f_logits.len() != m_logits.len() || f_logits.is_empty() {
        return Err(AblateError::MetricRejected("batch size mismatch or empty".into()));
    }
    let mut out = Vec::with_capacity(f_logits.len());
    for (f, m) in f_logits.iter().zip(m_logits) {
        if !f.all_finite() || !m.all_finite() {
            return Err(AblateError::NonFinite("logits".into()));
        }
        let pf = tensor::softmax_rows(f);
        let pm = tensor::softmax_rows(m);
        let rows = f.rows();
        let mut acc = 0.0;
        for r in 0..rows {
            acc += tensor::kl_probs(pm.row(r), pf.row(r));
        }
        out.push(acc / rows as f64);
    }
    Ok(out)
}

/// Percent of answer entries whose argmax (over an optional candidate
/// restriction) is a correct token. Argmax ties break to the lowest id.
pub fn correct_answer_percent(
    f_logits: &[Tensor],
    answers: &[AnswerSpec],
    candidate_restriction: Option<&BTreeSet<usize>>,
) -> Result<f64> {
    let per = correct_answer_flags(f_logits, answers, candidate_restriction)?;
    if per.is_empty() {
        return Err(AblateError::MetricRejected("no answer entries".into()));
    }
    Ok(100.0 * per.iter().filter(|&&c| c).count() as f64 / per.len() as f64)
}

/// Per-(prompt, entry) correctness flags.
pub fn correct_answer_flags(
    f_logits: &[Tensor],
    answers: &[AnswerSpec],
    candidate_restriction: Option<&BTreeSet<usize>>,
) -> Result<Vec<bool>> {
    if f_logits.len() != answers.len() {
        return Err(AblateError::MetricRejected("batch size mismatch".into()));
    }
    if f_logits.is_empty() {
        return Err(AblateError::MetricRejected("empty batch".into()));
    }
    let mut flags = Vec::new();
    for (logits, answer) in f_logits.iter().zip(answers) {
        let entries = match answer {
            AnswerSpec::Tokens(e) => e,
            AnswerSpec::Regression { .. } => {
                return Err(AblateError::MetricRejected(
                    "correct-answer percent requires token answers".into(),
                ))
            }
        };
        for e in entries {
            if let Some(r) = candidate_restriction {
                if !e.correct.iter().any(|t| r.contains(t)) {
                    return Err(AblateError::MetricRejected(format!(
                        "candidate restriction excludes every correct token at position {}",
                        e.position
                    )));
                }
            }
            let row = logits.row(e.position);
            let mut best: Option<(usize, f64)> = None;
            for (t, &v) in row.iter().enumerate() {
                if let Some(r) = candidate_restriction {
                    if !r.contains(&t) {
                        continue;
                    }
                }
                // strict greater-than: ties break to the lowest token id
                if best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((t, v));
                }
            }
            let (argmax, _) = best.expect("nonempty vocabulary");
            flags.push(e.correct.contains(&argmax));
        }
    }
    Ok(flags)
}

/// Mean probability of the correct answer tokens under softmax over the
/// full vocabulary.
pub fn answer_probability(f_logits: &[Tensor], answers: &[AnswerSpec]) -> Result<f64> {
    let per = answer_probability_per_prompt(f_logits, answers)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub fn answer_probability_per_prompt(f_logits: &[Tensor], answers: &[AnswerSpec]) -> Result<Vec<f64>> {
    if f_logits.len() != answers.len() || f_logits.is_empty() {
        return Err(AblateError::MetricRejected("batch size mismatch or empty".into()));
    }
    let mut out = Vec::with_capacity(f_logits.len());
    for (logits, answer) in f_logits.iter().zip(answers) {
        let entries = match answer {
            AnswerSpec::Tokens(e) => e,
            AnswerSpec::Regression { .. } => {
                return Err(AblateError::MetricRejected(
                    "answer probability requires token answers".into(),
                ))
            }
        };
        let probs = tensor::softmax_rows(logits);
        let mut acc = 0.0;
        let mut n = 0usize;
        for e in entries {
            let row = probs.row(e.position);
            acc += e.correct.iter().map(|&t| row[t]).sum::<f64>();
            n += 1;
        }
        out.push(if n == 0 { 0.0 } else { acc / n as f64 });
    }
    Ok(out)
}

/// Mean squared error over all positions and prompts.
pub fn mse(f_outputs: &[Tensor], targets: &[Tensor]) -> Result<f64> {
    let per = mse_per_prompt(f_outputs, targets)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub fn mse_per_prompt(f_outputs: &[Tensor], targets: &[Tensor]) -> Result<Vec<f64>> {
    if f_outputs.len() != targets.len() || f_outputs.is_empty() {
        return Err(AblateError::MetricRejected("batch size mismatch or empty".into()));
    }
    let mut out = Vec::with_capacity(f_outputs.len());
    for (f, t) in f_outputs.iter().zip(targets) {
        if f.shape != t.shape {
            return Err(AblateError::ShapeMismatch {
                op: "mse",
                lhs: f.shape.clone(),
                rhs: t.shape.clone(),
            });
        }
        let s: f64 = f
            .data
            .iter()
            .zip(&t.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        out.push(s / f.len() as f64);
    }
    Ok(out)
}

/// Quartiles by linear interpolation between order statistics (type-7),
/// IQR, and points beyond 1.5 * IQR from the quartiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub iqr: f64,
    /// Indices into the input vector of values beyond 1.5 * IQR.
    pub outliers: Vec<usize>,
}

fn quantile_type7(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n as f64 - 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn distribution_stats(per_prompt: &[f64]) -> Result<DistributionStats> {
    if per_prompt.is_empty() {
        return Err(AblateError::MetricRejected("empty value vector".into()));
    }
    let mut sorted: Vec<f64> = per_prompt.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let q1 = quantile_type7(&sorted, 0.25);
    let median = quantile_type7(&sorted, 0.5);
    let q3 = quantile_type7(&sorted, 0.75);
    let iqr = q3 - q1;
    let lo = q1 - 1.5 * iqr;
    let hi = q3 + 1.5 * iqr;
    let outliers = per_prompt
        .iter()
        .enumerate()
        .filter(|(_, &v)| v < lo || v > hi)
        .map(|(i, _)| i)
        .collect();
    Ok(DistributionStats {
        min: sorted[0],
        q1,
        median,
        q3,
        max: *sorted.last().unwrap(),
        mean: per_prompt.iter().sum::<f64>() / per_prompt.len() as f64,
        iqr,
        outliers,
    })
}

/// Per-prompt and aggregate results for one metric under one ablation
/// methodology.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub metric: String,
    pub per_prompt: Vec<f64>,
    pub aggregate: DistributionStats,
    /// Prompts excluded from aggregation, with reasons.
    pub excluded: Vec<(usize, String)>,
    /// Fingerprint of the AblationSpec used.
    pub spec_fingerprint: String,
}

impl FaithfulnessReport {
    pub fn new(metric: &str, per_prompt: Vec<f64>, excluded: Vec<(usize, String)>, spec_fingerprint: String) -> Result<Self> {
        let aggregate = distribution_stats(&per_prompt)?;
        Ok(FaithfulnessReport {
            metric: metric.to_string(),
            per_prompt,
            aggregate,
            excluded,
            spec_fingerprint,
        })
    }
}
