//! Automatic circuit discovery: greedy edge pruning (ACDC), differentiable
//! mask learning (subnetwork probing, SP), and first-order attribution
//! scores (HISP), each in edge and node variants, plus threshold sweeps
//! producing nested circuit sequences.

use crate::ablation::{build_donor_cache, run_ablated, AblationSpec, DonorCache};
use crate::data::{AnswerSpec, PromptPairBatch};
use crate::error::{AblateError, Result};
use crate::graph::{Circuit, Granularity, NodeId, PatchableModel};
use crate::metrics;
use crate::tensor::{Tape, Tensor, Var};

/// Divergence (or objective) used to judge an ablation during discovery.
///
/// KL has zero gradient at the clean point (it sits at its minimum), so the
/// gradient-based methods use logit difference or MSE objectives instead.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscoveryMetric {
    /// KL(full || ablated), mean over prompts and positions.
    Kl,
    /// MSE between ablated and full outputs.
    MseToFull,
    /// Mean logit difference (correct minus incorrect) from the answer spec.
    LogitDiff,
    /// MSE between outputs and the corrupt-side regression targets.
    MseToCorrupt,
}

impl std::str::FromStr for DiscoveryMetric {
    type Err = AblateError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(DiscoveryMetric::Kl),
            "mse_to_full" => Ok(DiscoveryMetric::MseToFull),
            "logit_diff" => Ok(DiscoveryMetric::LogitDiff),
            "mse_to_corrupt" => Ok(DiscoveryMetric::MseToCorrupt),
            other => Err(AblateError::InvalidConfig(format!("unknown metric `{other}`"))),
        }
    }
}

/// Importance score for every edge (or source node) of a model.
#[derive(Clone, Debug)]
pub struct ScoreMap {
    pub granularity: Granularity,
    /// Indexed by edge index (edges) or source index (nodes).
    pub scores: Vec<f64>,
    pub algorithm: String,
    pub task: String,
}

impl ScoreMap {
    pub fn validate(&self, model: &PatchableModel) -> Result<()> {
        let expected = match self.granularity {
            Granularity::Edges => model.n_edges(),
            Granularity::Nodes => model.sources.len(),
        };
        if self.scores.len() != expected {
            return Err(AblateError::InvalidConfig(format!(
                "score map covers {} members, model has {expected}",
                self.scores.len()
            )));
        }
        Ok(())
    }
}

/// Nested circuits swept over importance thresholds: the circuit at a lower
/// threshold contains every circuit at a higher threshold.
#[derive(Clone, Debug)]
pub struct CircuitSequence {
    /// Ordered by ascending threshold; circuits monotone nonincreasing.
    pub entries: Vec<(f64, Circuit)>,
}

impl CircuitSequence {
    pub fn validate(&self) -> Result<()> {
        for w in self.entries.windows(2) {
            let (t0, c0) = &w[0];
            let (t1, c1) = &w[1];
            if t1 < t0 {
                return Err(AblateError::InvalidConfig(
                    "circuit sequence thresholds not ascending".into(),
                ));
            }
            if !c1.member_set().is_subset(&c0.member_set()) {
                return Err(AblateError::InvalidConfig(format!(
                    "circuits not nested between thresholds {t0} and {t1}"
                )));
            }
        }
        Ok(())
    }
}

fn divergence(
    metric: DiscoveryMetric,
    outputs: &[Tensor],
    full_outputs: &[Tensor],
) -> Result<f64> {
    match metric {
        DiscoveryMetric::Kl => metrics::kl_divergence(outputs, full_outputs),
        DiscoveryMetric::MseToFull => metrics::mse(outputs, full_outputs),
        _ => Err(AblateError::InvalidConfig(
            "ACDC requires a divergence metric (kl or mse_to_full)".into(),
        )),
    }
}

/// Greedy reverse-topological edge pruning.
///
/// Starting from the full edge set, edges are visited by descending
/// destination (then ascending source within a destination); an edge is
/// removed iff ablating it, in addition to everything already removed,
/// changes the divergence against the current kept-set baseline by strictly
/// less than `threshold`.
pub fn acdc(
    model: &PatchableModel,
    batch: &PromptPairBatch,
    spec: &AblationSpec,
    metric: DiscoveryMetric,
    threshold: f64,
) -> Result<Circuit> {
    let donors = build_donor_cache(model, &spec.value, batch, spec.direction)?;
    acdc_with_donors(model, batch, spec, &donors, metric, threshold)
}

fn acdc_with_donors(
    model: &PatchableModel,
    batch: &PromptPairBatch,
    spec: &AblationSpec,
    donors: &DonorCache,
    metric: DiscoveryMetric,
    threshold: f64,
) -> Result<Circuit> {
    let full_outputs: Vec<Tensor> = batch
        .pairs
        .iter()
        .map(|p| Ok(model.forward(&p.clean)?.output))
        .collect::<Result<_>>()?;
    let eval = |kept: &[bool]| -> Result<f64> {
        let circuit = Circuit::edges((0..model.n_edges()).filter(|&e| kept[e]));
        let outs = run_ablated(model, &circuit, spec, batch, donors)?;
        let outputs: Vec<Tensor> = outs.into_iter().map(|o| o.output).collect();
        divergence(metric, &outputs, &full_outputs)
    };

    let mut kept = vec![true; model.n_edges()];
    let mut baseline = eval(&kept)?;
    for d_idx in (0..model.dests.len()).rev() {
        for &e_idx in &model.edges_into[d_idx] {
            kept[e_idx] = false;
            let candidate = eval(&kept)?;
            if !candidate.is_finite() {
                let (src, dst) = model.edge_endpoints(e_idx);
                return Err(AblateError::NonFinite(format!(
                    "divergence while ablating edge {src}->{dst}"
                )));
            }
            if (candidate - baseline).abs() < threshold {
                baseline = candidate;
            } else {
                kept[e_idx] = true;
            }
        }
    }
    Ok(Circuit::edges((0..model.n_edges()).filter(|&e| kept[e])))
}

/// ACDC over a threshold grid, returning the nested circuit sequence.
pub fn acdc_sweep(
    model: &PatchableModel,
    batch: &PromptPairBatch,
    spec: &AblationSpec,
    metric: DiscoveryMetric,
    thresholds: &[f64],
) -> Result<CircuitSequence> {
    let donors = build_donor_cache(model, &spec.value, batch, spec.direction)?;
    let mut ts: Vec<f64> = thresholds.to_vec();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut entries = Vec::with_capacity(ts.len());
    for t in ts {
        entries.push((t, acdc_with_donors(model, batch, spec, &donors, metric, t)?));
    }
    let seq = CircuitSequence { entries };
    seq.validate()?;
    Ok(seq)
}

// ---------------------------------------------------------------------------
// Taped factorized forward
// ---------------------------------------------------------------------------

/// Forward pass on a tape where each edge's contribution to its destination
/// is produced by `edge_term(tape, edge index, source output var)`.
/// Returns the logits var.
pub fn graph_forward<F>(
    tape: &mut Tape,
    model: &PatchableModel,
    tokens: &[usize],
    mut edge_term: F,
) -> Result<Var>
where
    F: FnMut(&mut Tape, usize, Var) -> Result<Var>,
{
    let t = tokens.len();
    let d = model.spec.d_model;
    let emb = tape.constant(model.embed(tokens)?);
    let mut src_vars = vec![emb];
    let mut dst_vars: Vec<Var> = Vec::with_capacity(model.dests.len());
    let mut logits = None;
    for (d_idx, dst) in model.dests.iter().enumerate() {
        let mut acc = tape.constant(Tensor::zeros(vec![t, d]));
        for &e_idx in &model.edges_into[d_idx] {
            let s = model.edges[e_idx].src;
            let term = edge_term(tape, e_idx, src_vars[s])?;
            acc = tape.add(acc, term)?;
        }
        dst_vars.push(acc);
        match *dst {
            NodeId::V { layer, head } => {
                let wq = tape.constant(model.spec.weight(&format!("attn.{layer}.{head}.w_q"))?.clone());
                let wk = tape.constant(model.spec.weight(&format!("attn.{layer}.{head}.w_k"))?.clone());
                let wv = tape.constant(model.spec.weight(&format!("attn.{layer}.{head}.w_v"))?.clone());
                let wo = tape.constant(model.spec.weight(&format!("attn.{layer}.{head}.w_o"))?.clone());
                let q = tape.matmul(dst_vars[d_idx - 2], wq)?;
                let k = tape.matmul(dst_vars[d_idx - 1], wk)?;
                let v = tape.matmul(dst_vars[d_idx], wv)?;
                let raw = tape.matmul_nt(q, k)?;
                let scores = tape.scale(raw, 1.0 / (model.spec.d_head as f64).sqrt());
                let attn = tape.softmax_rows(scores);
                let mixed = tape.matmul(attn, v)?;
                src_vars.push(tape.matmul(mixed, wo)?);
            }
            NodeId::MlpIn { layer } => {
                let w_in = tape.constant(model.spec.weight(&format!("mlp.{layer}.w_in"))?.clone());
                let b_in = tape.constant(model.spec.weight(&format!("mlp.{layer}.b_in"))?.clone());
                let w_out = tape.constant(model.spec.weight(&format!("mlp.{layer}.w_out"))?.clone());
                let b_out = tape.constant(model.spec.weight(&format!("mlp.{layer}.b_out"))?.clone());
                let pre0 = tape.matmul(dst_vars[d_idx], w_in)?;
                let pre = tape.add_row(pre0, b_in)?;
                let hidden = tape.relu(pre);
                let post0 = tape.matmul(hidden, w_out)?;
                src_vars.push(tape.add_row(post0, b_out)?);
            }
            NodeId::OutputIn => {
                let un = tape.constant(model.spec.weight("unembed")?.clone());
                logits = Some(tape.matmul(dst_vars[d_idx], un)?);
            }
            _ => {}
        }
    }
    Ok(logits.expect("OutputIn is last"))
}

/// Taped loss for a prompt: the discovery objective as a scalar var.
pub fn taped_loss(
    tape: &mut Tape,
    metric: DiscoveryMetric,
    logits: Var,
    full_logits: &Tensor,
    answer: &AnswerSpec,
) -> Result<Var> {
    match metric {
        DiscoveryMetric::Kl => {
            let p = tape.constant(crate::tensor::softmax_rows(full_logits));
            tape.kl_from_probs(p, logits)
        }
        DiscoveryMetric::MseToFull => {
            let target = tape.constant(full_logits.clone());
            tape.mse_to(logits, target)
        }
        DiscoveryMetric::LogitDiff => {
            let entries = match answer {
                AnswerSpec::Tokens(e) => e,
                AnswerSpec::Regression { .. } => {
                    return Err(AblateError::MetricRejected(
                        "logit difference requires token answers".into(),
                    ))
                }
            };
            let mut w = Tensor::zeros(full_logits.shape.clone());
            let n = entries.len().max(1) as f64;
            for e in entries {
                for &c in &e.correct {
                    *w.at_mut(e.position, c) += 1.0 / (e.correct.len() as f64 * n);
                }
                for &i in &e.incorrect {
                    *w.at_mut(e.position, i) -= 1.0 / (e.incorrect.len() as f64 * n);
                }
            }
            let wc = tape.constant(w);
            let prod = tape.mul(logits, wc)?;
            Ok(tape.sum(prod))
        }
        DiscoveryMetric::MseToCorrupt => {
            let target = match answer {
                AnswerSpec::Regression {
                    incorrect: Some(t), ..
                } => t.clone(),
                _ => {
                    return Err(AblateError::MetricRejected(
                        "mse_to_corrupt requires regression answers with corrupt targets".into(),
                    ))
                }
            };
            let tc = tape.constant(target);
            tape.mse_to(logits, tc)
        }
    }
}

/// Subnetwork probing: learn one mask parameter per edge (or per source
/// node) by deterministic full-batch gradient descent.
///
/// The masked forward interpolates each edge's contribution between the
/// masked model's own activation and the donor:
/// `sigmoid(theta) * activation + (1 - sigmoid(theta)) * donor`. The loss
/// is the divergence to the full model plus `lambda` times the summed mask
/// values. Returns the final mask values in [0, 1] as scores.
#[allow(clippy::too_many_arguments)]
pub fn subnetwork_probing(
    model: &PatchableModel,
    batch: &PromptPairBatch,
    spec: &AblationSpec,
    metric: DiscoveryMetric,
    granularity: Granularity,
    lambda: f64,
    steps: usize,
    lr: f64,
) -> Result<ScoreMap> {
    if !matches!(metric, DiscoveryMetric::Kl | DiscoveryMetric::MseToFull) {
        return Err(AblateError::InvalidConfig(
            "subnetwork probing requires a divergence metric (kl or mse_to_full)".into(),
        ));
    }
    let donors = build_donor_cache(model, &spec.value, batch, spec.direction)?;
    let n_masks = match granularity {
        Granularity::Edges => model.n_edges(),
        Granularity::Nodes => model.sources.len(),
    };
    let mask_of_edge = |e: usize| -> usize {
        match granularity {
            Granularity::Edges => e,
            Granularity::Nodes => model.edges[e].src,
        }
    };
    let full_logits: Vec<Tensor> = batch
        .pairs
        .iter()
        .map(|p| Ok(model.forward(&p.clean)?.output))
        .collect::<Result<_>>()?;

    // initial mask value 0.9
    let mut theta = vec![(0.9f64 / 0.1).ln(); n_masks];
    let n = batch.len() as f64;
    for step in 0..steps {
        let mut grad = vec![0.0; n_masks];
        for (i, pair) in batch.pairs.iter().enumerate() {
            let mut tape = Tape::new();
            let theta_vars: Vec<Var> = theta.iter().map(|&t| tape.leaf(Tensor::scalar(t))).collect();
            let m_vars: Vec<Var> = theta_vars.iter().map(|&t| tape.sigmoid(t)).collect();
            let donor_vars: Vec<Var> = donors
                .donors(i)
                .iter()
                .map(|d| tape.constant(d.clone()))
                .collect();
            let logits = graph_forward(&mut tape, model, &pair.clean, |tape, e_idx, src_var| {
                tape.lerp(m_vars[mask_of_edge(e_idx)], src_var, donor_vars[model.edges[e_idx].src])
            })?;
            let loss = taped_loss(&mut tape, metric, logits, &full_logits[i], &pair.answer)?;
            if !tape.value(loss).as_scalar().is_finite() {
                return Err(AblateError::NonFinite(format!("SP loss at step {step}")));
            }
            let grads = tape.backward(loss)?;
            for (g, &tv) in grad.iter_mut().zip(&theta_vars) {
                if let Some(gt) = grads.get(tv) {
                    *g += gt.as_scalar() / n;
                }
            }
        }
        // sparsity term: d/dtheta lambda * sum(sigmoid(theta))
        for (g, t) in grad.iter_mut().zip(&theta) {
            let s = 1.0 / (1.0 + (-t).exp());
            *g += lambda * s * (1.0 - s);
        }
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t -= lr * g;
        }
    }
    Ok(ScoreMap {
        granularity,
        scores: theta.iter().map(|&t| 1.0 / (1.0 + (-t).exp())).collect(),
        algorithm: "sp".into(),
        task: String::new(),
    })
}

/// First-order attribution scores: for each edge (or node),
/// `|mean over prompts of sum((donor - clean) * d metric / d activation)|`
/// evaluated on the clean forward pass.
pub fn hisp(
    model: &PatchableModel,
    batch: &PromptPairBatch,
    spec: &AblationSpec,
    metric: DiscoveryMetric,
    granularity: Granularity,
) -> Result<ScoreMap> {
    let donors = build_donor_cache(model, &spec.value, batch, spec.direction)?;
    let full_logits: Vec<Tensor> = batch
        .pairs
        .iter()
        .map(|p| Ok(model.forward(&p.clean)?.output))
        .collect::<Result<_>>()?;
    let mut acc = vec![0.0; model.n_edges()];
    let n = batch.len() as f64;
    for (i, pair) in batch.pairs.iter().enumerate() {
        let t = pair.clean.len();
        let d = model.spec.d_model;
        let mut tape = Tape::new();
        let mut hooks: Vec<Option<Var>> = vec![None; model.n_edges()];
        let logits = graph_forward(&mut tape, model, &pair.clean, |tape, e_idx, src_var| {
            let z = tape.leaf(Tensor::zeros(vec![t, d]));
            hooks[e_idx] = Some(z);
            tape.add(src_var, z)
        })?;
        let loss = taped_loss(&mut tape, metric, logits, &full_logits[i], &pair.answer)?;
        let grads = tape.backward(loss)?;
        let clean_cache = model.forward(&pair.clean)?.cache;
        let donor_set = donors.donors(i);
        for e_idx in 0..model.n_edges() {
            let z = hooks[e_idx].expect("every edge hooked");
            let g = match grads.get(z) {
                Some(g) => g,
                None => continue,
            };
            if !g.all_finite() {
                return Err(AblateError::NonFinite(format!("HISP gradient on edge {e_idx}")));
            }
            let s = model.edges[e_idx].src;
            let delta_dot: f64 = donor_set[s]
                .data
                .iter()
                .zip(&clean_cache.src_out[s].data)
                .zip(&g.data)
                .map(|((dv, cv), gv)| (dv - cv) * gv)
                .sum();
            acc[e_idx] += delta_dot / n;
        }
    }
    let scores = match granularity {
        Granularity::Edges => acc.iter().map(|a| a.abs()).collect(),
        Granularity::Nodes => (0..model.sources.len())
            .map(|s| model.edges_out_of[s].iter().map(|&e| acc[e]).sum::<f64>().abs())
            .collect(),
    };
    Ok(ScoreMap {
        granularity,
        scores,
        algorithm: "hisp".into(),
        task: String::new(),
    })
}

/// Convert scores to a nested circuit sequence over thresholds.
///
/// Default thresholds are the sorted distinct score values plus one above
/// the maximum (giving the empty circuit). An edge enters the circuit at
/// threshold t iff its score is >= t; node scores include an edge iff both
/// endpoint components score >= t (edges into the output always pass the
/// destination test).
pub fn scores_to_circuit_sequence(
    model: &PatchableModel,
    scores: &ScoreMap,
    thresholds: Option<&[f64]>,
) -> Result<CircuitSequence> {
    scores.validate(model)?;
    let mut ts: Vec<f64> = match thresholds {
        Some(t) => t.to_vec(),
        None => {
            let mut v = scores.scores.clone();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v.dedup();
            let top = v.last().copied().unwrap_or(0.0) + 1.0;
            v.push(top);
            v
        }
    };
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let edge_score_ok = |e: usize, t: f64| -> bool {
        match scores.granularity {
            Granularity::Edges => scores.scores[e] >= t,
            Granularity::Nodes => {
                let src_ok = scores.scores[model.edges[e].src] >= t;
                let dst_ok = match model.dests[model.edges[e].dst].component_source() {
                    Some(comp) => {
                        let c = model.source_index(comp).expect("component exists");
                        scores.scores[c] >= t
                    }
                    None => true, // the output node is always included
                };
                src_ok && dst_ok
            }
        }
    };
    let entries: Vec<(f64, Circuit)> = ts
        .into_iter()
        .map(|t| {
            (
                t,
                Circuit::edges((0..model.n_edges()).filter(|&e| edge_score_ok(e, t))),
            )
        })
        .collect();
    let seq = CircuitSequence { entries };
    seq.validate()?;
    Ok(seq)
}
