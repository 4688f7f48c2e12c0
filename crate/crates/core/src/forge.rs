//! Analytically constructed toy transformers with known algorithms and
//! methodology-relative ground-truth circuits.
//!
//! Two models are forged: Reverse (emit the input sequence reversed) and
//! X-Proportion (emit, at each position, the proportion of tokens so far
//! that are "x"). Both are 2-layer, 1-head models whose weights implement a
//! RASP-lite program exactly: selector matrices via large-logit attention
//! patterns, aggregates via value averaging, and maps via one-hidden-layer
//! relu lookup over the finite input lattice. Construction is verified by an
//! exhaustive check against the RASP-lite oracle; ground-truth circuits are
//! derived empirically per ablation methodology.

use crate::ablation::{build_donor_cache, run_ablated, AblationSpec, AblationValue, Component, Direction, TargetSet, TokenPositions};
use crate::data::{AnswerSpec, PromptPair, PromptPairBatch, TokenAnswer};
use crate::error::{AblateError, Result};
use crate::graph::{build_model, Circuit, ModelSpec, PatchableModel};
use crate::metrics;
use crate::rasp::{reverse_program, xproportion_program, RaspLiteProgram};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Logit scale for near-one-hot attention selectors. At sequence length 5
/// the resulting selector error is far below 1e-6.
pub const SELECTOR_HARDNESS: f64 = 100.0;

/// Half-width of the relu tent functions used for lookup MLPs. Must be
/// smaller than half the minimum gap of the looked-up value lattice
/// (1/4 - 1/5 = 0.05 for inverse lengths).
const TENT_DELTA: f64 = 0.02;

/// Gate weight that switches a tent unit off unless the gating one-hot
/// coordinate is 1. Must exceed the dynamic range of the tent argument.
const GATE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Reverse,
    XProportion,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Reverse => "reverse",
            Task::XProportion => "xproportion",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = AblateError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reverse" => Ok(Task::Reverse),
            "xproportion" => Ok(Task::XProportion),
            other => Err(AblateError::InvalidConfig(format!("unknown task `{other}`"))),
        }
    }
}

/// A forged model with its behavioral oracle and both methodology-relative
/// ground-truth circuits.
#[derive(Clone, Debug)]
pub struct GroundTruthBundle {
    pub task: Task,
    pub model: PatchableModel,
    pub oracle: RaspLiteProgram,
    pub zero_ablation_circuit: Circuit,
    pub resample_ablation_circuit: Circuit,
}

impl GroundTruthBundle {
    /// Encode a comma-separated prompt like `"y,x,z,x,w"` to token ids.
    pub fn encode(&self, prompt: &str) -> Result<Vec<usize>> {
        let vocab = &self.model.spec.vocab;
        prompt
            .split(',')
            .map(|w| {
                vocab
                    .iter()
                    .position(|v| v == w.trim())
                    .ok_or_else(|| AblateError::InvalidConfig(format!("token `{w}` not in vocabulary")))
            })
            .collect()
    }
}

fn zeros_map(spec: &ModelSpec) -> BTreeMap<String, Tensor> {
    let mut w = BTreeMap::new();
    w.insert("embed.tokens".into(), Tensor::zeros(vec![spec.vocab.len(), spec.d_model]));
    w.insert("embed.pos".into(), Tensor::zeros(vec![spec.max_seq_len, spec.d_model]));
    for l in 0..spec.n_layers {
        for h in 0..spec.n_heads {
            for n in ["w_q", "w_k", "w_v"] {
                w.insert(format!("attn.{l}.{h}.{n}"), Tensor::zeros(vec![spec.d_model, spec.d_head]));
            }
            w.insert(format!("attn.{l}.{h}.w_o"), Tensor::zeros(vec![spec.d_head, spec.d_model]));
        }
        w.insert(format!("mlp.{l}.w_in"), Tensor::zeros(vec![spec.d_model, spec.d_mlp]));
        w.insert(format!("mlp.{l}.b_in"), Tensor::zeros(vec![1, spec.d_mlp]));
        w.insert(format!("mlp.{l}.w_out"), Tensor::zeros(vec![spec.d_mlp, spec.d_model]));
        w.insert(format!("mlp.{l}.b_out"), Tensor::zeros(vec![1, spec.d_model]));
    }
    w
}

/// Build the X-Proportion model.
///
/// Residual layout (`d_model` = 11): token one-hot dims 0..4 over
/// {w, x, y, z}, position one-hot dims 4..9, "is x" indicator dim 9,
/// output dim 10.
///
/// Layer 0 attention is unused (all-zero weights). MLP 0 copies the "x"
/// token coordinate through a relu into the indicator dim. Layer 1
/// attention attends uniformly over positions j <= i (prefix-mean selector
/// built from positional one-hots) with the indicator as its value, writing
/// the proportion to the output dim. MLP 1 is unused. The unembedding reads
/// the output dim as a 1-dimensional regression head.
fn xproportion_spec() -> ModelSpec {
    let vocab: Vec<String> = ["w", "x", "y", "z"].iter().map(|s| s.to_string()).collect();
    let (n_tok, n_pos) = (4usize, 5usize);
    let d_model = n_tok + n_pos + 2;
    let (dim_pos, dim_isx, dim_out) = (n_tok, n_tok + n_pos, n_tok + n_pos + 1);
    let mut spec = ModelSpec {
        n_layers: 2,
        n_heads: 1,
        d_model,
        d_head: n_pos,
        d_mlp: 2,
        vocab,
        max_seq_len: n_pos,
        use_positional_embedding: true,
        weights: BTreeMap::new(),
    };
    spec.weights = zeros_map(&spec);

    let tok_x = 1; // index of "x" in the sorted vocabulary
    {
        let e = spec.weights.get_mut("embed.tokens").unwrap();
        for t in 0..n_tok {
            *e.at_mut(t, t) = 1.0;
        }
        let p = spec.weights.get_mut("embed.pos").unwrap();
        for i in 0..n_pos {
            *p.at_mut(i, dim_pos + i) = 1.0;
        }
    }
    // MLP 0: is_x = relu(token_x)
    *spec.weights.get_mut("mlp.0.w_in").unwrap().at_mut(tok_x, 0) = 1.0;
    *spec.weights.get_mut("mlp.0.w_out").unwrap().at_mut(0, dim_isx) = 1.0;
    // Layer 1 attention: prefix-mean selector. Q_i = pos one-hot; K_j has
    // hardness * sqrt(d_head) at head dims i >= j so the pre-softmax logit
    // (after the engine's 1/sqrt(d_head) scaling) is `hardness` iff j <= i.
    let scale = SELECTOR_HARDNESS * (spec.d_head as f64).sqrt();
    {
        let wq = spec.weights.get_mut("attn.1.0.w_q").unwrap();
        for i in 0..n_pos {
            *wq.at_mut(dim_pos + i, i) = 1.0;
        }
        let wk = spec.weights.get_mut("attn.1.0.w_k").unwrap();
        for j in 0..n_pos {
            for i in j..n_pos {
                *wk.at_mut(dim_pos + j, i) = scale;
            }
        }
        *spec.weights.get_mut("attn.1.0.w_v").unwrap().at_mut(dim_isx, 0) = 1.0;
        *spec.weights.get_mut("attn.1.0.w_o").unwrap().at_mut(0, dim_out) = 1.0;
    }
    let mut un = Tensor::zeros(vec![d_model, 1]);
    *un.at_mut(dim_out, 0) = 1.0;
    spec.weights.insert("unembed".into(), un);
    spec
}

/// Build the Reverse model.
///
/// Residual layout (`d_model` = 17): token one-hot dims 0..3 over {0,1,2},
/// position one-hot dims 3..8, inverse-length dim 8, target-position
/// one-hot dims 9..14, output token one-hot dims 14..17.
///
/// Layer 0 attention attends uniformly everywhere (zero Q/K weights) with
/// the position-0 indicator as its value, writing 1/length to the
/// inverse-length dim. MLP 0 is a relu tent-function lookup over the
/// inverse-length lattice {1, 1/2, ..., 1/5}, gated per position, that
/// writes the one-hot of the reflected position `length - 1 - i` to the
/// target dims. Layer 1 attention attends to the target position (Q from
/// target dims, K from position dims) and copies that position's token
/// one-hot to the output dims. MLP 1 is unused. The unembedding maps output
/// dims to logits.
fn reverse_spec() -> ModelSpec {
    let vocab: Vec<String> = ["0", "1", "2"].iter().map(|s| s.to_string()).collect();
    let (n_tok, n_pos) = (3usize, 5usize);
    let d_model = n_tok + n_pos + 1 + n_pos + n_tok;
    let dim_pos = n_tok;
    let dim_invlen = n_tok + n_pos;
    let dim_target = dim_invlen + 1;
    let dim_out = dim_target + n_pos;
    // one gated tent (3 relus) per (length, position) pair with pos < length
    let combos: Vec<(usize, usize)> = (1..=n_pos)
        .flat_map(|len| (0..len).map(move |i| (len, i)))
        .collect();
    let mut spec = ModelSpec {
        n_layers: 2,
        n_heads: 1,
        d_model,
        d_head: n_pos,
        d_mlp: combos.len() * 3,
        vocab,
        max_seq_len: n_pos,
        use_positional_embedding: true,
        weights: BTreeMap::new(),
    };
    spec.weights = zeros_map(&spec);

    {
        let e = spec.weights.get_mut("embed.tokens").unwrap();
        for t in 0..n_tok {
            *e.at_mut(t, t) = 1.0;
        }
        let p = spec.weights.get_mut("embed.pos").unwrap();
        for i in 0..n_pos {
            *p.at_mut(i, dim_pos + i) = 1.0;
        }
    }
    // Layer 0: uniform attention (zero scores) over the whole sequence;
    // value = indicator of position 0, so the head output is 1/length.
    *spec.weights.get_mut("attn.0.0.w_v").unwrap().at_mut(dim_pos, 0) = 1.0;
    *spec.weights.get_mut("attn.0.0.w_o").unwrap().at_mut(0, dim_invlen) = 1.0;
    // MLP 0: target position lookup. For each (length, i), a tent on the
    // inverse-length value 1/length gated to fire only at position i,
    // writing 1 to target dim length-1-i. The tent is exact on the
    // inverse-length lattice because lattice gaps exceed 2 * TENT_DELTA.
    {
        let w_in = spec.weights.get_mut("mlp.0.w_in").unwrap();
        for (u, &(_, i)) in combos.iter().enumerate() {
            for k in 0..3 {
                *w_in.at_mut(dim_invlen, 3 * u + k) = 1.0;
                *w_in.at_mut(dim_pos + i, 3 * u + k) = GATE;
            }
        }
        let b_in = spec.weights.get_mut("mlp.0.b_in").unwrap();
        for (u, &(len, _)) in combos.iter().enumerate() {
            let v = 1.0 / len as f64;
            b_in.row_mut(0)[3 * u] = -v + TENT_DELTA - GATE;
            b_in.row_mut(0)[3 * u + 1] = -v - GATE;
            b_in.row_mut(0)[3 * u + 2] = -v - TENT_DELTA - GATE;
        }
        let w_out = spec.weights.get_mut("mlp.0.w_out").unwrap();
        for (u, &(len, i)) in combos.iter().enumerate() {
            let target = dim_target + (len - 1 - i);
            *w_out.at_mut(3 * u, target) = 1.0 / TENT_DELTA;
            *w_out.at_mut(3 * u + 1, target) = -2.0 / TENT_DELTA;
            *w_out.at_mut(3 * u + 2, target) = 1.0 / TENT_DELTA;
        }
    }
    // Layer 1: attend to the target position and copy its token one-hot.
    let scale = SELECTOR_HARDNESS * (spec.d_head as f64).sqrt();
    {
        let wq = spec.weights.get_mut("attn.1.0.w_q").unwrap();
        for i in 0..n_pos {
            *wq.at_mut(dim_target + i, i) = scale;
        }
        let wk = spec.weights.get_mut("attn.1.0.w_k").unwrap();
        for j in 0..n_pos {
            *wk.at_mut(dim_pos + j, j) = 1.0;
        }
        let wv = spec.weights.get_mut("attn.1.0.w_v").unwrap();
        for t in 0..n_tok {
            *wv.at_mut(t, t) = 1.0;
        }
        let wo = spec.weights.get_mut("attn.1.0.w_o").unwrap();
        for t in 0..n_tok {
            *wo.at_mut(t, dim_out + t) = 1.0;
        }
    }
    // Unembedding: output token dims to logits, scaled for a sharp softmax.
    let mut un = Tensor::zeros(vec![d_model, n_tok]);
    for t in 0..n_tok {
        *un.at_mut(dim_out + t, t) = 10.0;
    }
    spec.weights.insert("unembed".into(), un);
    spec
}

/// Per-position oracle outputs for a token sequence.
pub fn oracle_outputs(task: Task, oracle: &RaspLiteProgram, tokens: &[usize]) -> Result<Vec<f64>> {
    let _ = task;
    oracle.eval(tokens)
}

fn all_sequences(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for len in 1..=max_len {
        let count = vocab.pow(len as u32);
        for code in 0..count {
            let mut c = code;
            out.push(
                (0..len)
                    .map(|_| {
                        let t = c % vocab;
                        c /= vocab;
                        t
                    })
                    .collect(),
            );
        }
    }
    out
}

/// Exhaustive model-vs-oracle agreement over all sequences of length <= 5.
fn self_check(task: Task, model: &PatchableModel, oracle: &RaspLiteProgram) -> Result<()> {
    for tokens in all_sequences(model.spec.vocab.len(), model.spec.max_seq_len) {
        let out = model.forward(&tokens)?.output;
        let want = oracle.eval(&tokens)?;
        match task {
            Task::XProportion => {
                for (p, &w) in want.iter().enumerate() {
                    let got = out.at(p, 0);
                    if (got - w).abs() >= 1e-6 {
                        return Err(AblateError::SelfCheck(format!(
                            "xproportion {tokens:?} pos {p}: model {got} vs oracle {w}"
                        )));
                    }
                }
            }
            Task::Reverse => {
                for (p, &w) in want.iter().enumerate() {
                    let row = out.row(p);
                    let argmax = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                        .unwrap()
                        .0;
                    if argmax != w as usize {
                        return Err(AblateError::SelfCheck(format!(
                            "reverse {tokens:?} pos {p}: model argmax {argmax} vs oracle {w}"
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Generate an index-aligned clean/corrupt batch with oracle answers.
/// Sequences are uniform over the task alphabet at length 5.
pub fn gen_dataset(task: Task, bundle_model: &PatchableModel, oracle: &RaspLiteProgram, n: usize, seed: u64) -> Result<PromptPairBatch> {
    if n == 0 {
        return Err(AblateError::InvalidConfig("dataset size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = bundle_model.spec.vocab.len();
    let len = bundle_model.spec.max_seq_len;
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let clean: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
        let corrupt: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
        let answer = match task {
            Task::Reverse => {
                let want = oracle.eval(&clean)?;
                AnswerSpec::Tokens(
                    want.iter()
                        .enumerate()
                        .map(|(p, &w)| {
                            let correct = w as usize;
                            TokenAnswer {
                                position: p,
                                correct: vec![correct],
                                incorrect: (0..vocab).filter(|&t| t != correct).collect(),
                            }
                        })
                        .collect(),
                )
            }
            Task::XProportion => {
                let targets = oracle.eval(&clean)?;
                let corrupt_targets = oracle.eval(&corrupt)?;
                AnswerSpec::Regression {
                    targets: Tensor::matrix(len, 1, targets)?,
                    incorrect: Some(Tensor::matrix(len, 1, corrupt_targets)?),
                }
            }
        };
        pairs.push(PromptPair { clean, corrupt, answer });
    }
    Ok(PromptPairBatch { pairs })
}

/// Per-input divergence between an ablated output and the clean output,
/// used when deriving ground truth.
fn task_divergence(task: Task, ablated: &Tensor, clean: &Tensor) -> Result<f64> {
    match task {
        // KL(clean || ablated), mean over positions
        Task::Reverse => Ok(metrics::kl_divergence_per_prompt(
            &[ablated.clone()],
            &[clean.clone()],
        )?[0]),
        Task::XProportion => Ok(metrics::mse_per_prompt(&[ablated.clone()], &[clean.clone()])?[0]),
    }
}

fn max_divergence(
    task: Task,
    model: &PatchableModel,
    circuit: &Circuit,
    spec: &AblationSpec,
    batch: &PromptPairBatch,
    donors: &crate::ablation::DonorCache,
    clean_outs: &[Tensor],
) -> Result<f64> {
    let outs = run_ablated(model, circuit, spec, batch, donors)?;
    let mut worst: f64 = 0.0;
    for (o, c) in outs.iter().zip(clean_outs) {
        worst = worst.max(task_divergence(task, &o.output, c)?);
    }
    Ok(worst)
}

/// Derive the minimal edge circuit whose complement-ablation under `value`
/// changes the task output by less than `tol` on every batch input:
/// greedy backward elimination over edges in reverse topological order,
/// iterated to a fixpoint, followed by exhaustive single-edge minimality
/// verification.
pub fn derive_ground_truth(
    task: Task,
    model: &PatchableModel,
    value: AblationValue,
    batch: &PromptPairBatch,
    tol: f64,
) -> Result<Circuit> {
    if !(tol > 0.0) {
        return Err(AblateError::GroundTruth(format!("tolerance must be positive, got {tol}")));
    }
    let spec = AblationSpec {
        component: Component::Edge,
        value: value.clone(),
        token_positions: TokenPositions::All,
        direction: Direction::AblateClean,
        set: TargetSet::Complement,
    };
    let donors = build_donor_cache(model, &value, batch, spec.direction)?;
    let clean_outs: Vec<Tensor> = batch
        .pairs
        .iter()
        .map(|p| Ok(model.forward(&p.clean)?.output))
        .collect::<Result<_>>()?;

    let mut kept: Vec<usize> = (0..model.n_edges()).collect();
    loop {
        let mut changed = false;
        // reverse topological order: later edges first
        for e in (0..model.n_edges()).rev() {
            if !kept.contains(&e) {
                continue;
            }
            let candidate: Vec<usize> = kept.iter().copied().filter(|&k| k != e).collect();
            let d = max_divergence(task, model, &Circuit::edges(candidate.clone()), &spec, batch, &donors, &clean_outs)?;
            if d < tol {
                kept = candidate;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let circuit = Circuit::edges(kept.clone());
    // condition (a): the derived set itself is faithful
    let d = max_divergence(task, model, &circuit, &spec, batch, &donors, &clean_outs)?;
    if d >= tol {
        return Err(AblateError::GroundTruth(format!(
            "derived circuit not faithful under its own methodology: {d} >= {tol}"
        )));
    }
    // condition (b): no single edge is removable
    for &e in &kept {
        let candidate: Vec<usize> = kept.iter().copied().filter(|&k| k != e).collect();
        let d = max_divergence(task, model, &Circuit::edges(candidate), &spec, batch, &donors, &clean_outs)?;
        if d < tol {
            let (src, dst) = model.edge_endpoints(e);
            return Err(AblateError::GroundTruth(format!(
                "minimality violated: edge {src}->{dst} removable ({d} < {tol})"
            )));
        }
    }
    Ok(circuit)
}

fn forge(task: Task) -> Result<GroundTruthBundle> {
    let (spec, oracle) = match task {
        Task::Reverse => (reverse_spec(), reverse_program()),
        Task::XProportion => (xproportion_spec(), xproportion_program(1)),
    };
    let model = build_model(spec)?;
    self_check(task, &model, &oracle)?;
    let batch = gen_dataset(task, &model, &oracle, 50, 0xF0C5)?;
    let tol = 1e-6;
    let resample = derive_ground_truth(task, &model, AblationValue::Resample, &batch, tol)?;
    let zero = derive_ground_truth(task, &model, AblationValue::Zero, &batch, tol)?;
    // resample circuit is a subset of the zero circuit for these tasks: the
    // extra zero-circuit edges carry only positional information, which is
    // constant across same-length donors.
    if !resample.member_set().is_subset(&zero.member_set()) {
        return Err(AblateError::GroundTruth(
            "resample circuit not a subset of the zero circuit".into(),
        ));
    }
    Ok(GroundTruthBundle {
        task,
        model,
        oracle,
        zero_ablation_circuit: zero,
        resample_ablation_circuit: resample,
    })
}

/// Build and verify the X-Proportion bundle.
pub fn forge_xproportion() -> Result<GroundTruthBundle> {
    forge(Task::XProportion)
}

/// Build and verify the Reverse bundle.
pub fn forge_reverse() -> Result<GroundTruthBundle> {
    forge(Task::Reverse)
}

pub fn forge_task(task: Task) -> Result<GroundTruthBundle> {
    forge(task)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NodeId;
    use std::collections::BTreeSet;

    fn edge_set(model: &PatchableModel, pairs: &[(&str, &str)]) -> BTreeSet<usize> {
        pairs
            .iter()
            .map(|(s, d)| {
                let src: NodeId = s.parse().unwrap();
                let dst: NodeId = d.parse().unwrap();
                model.edge_index(src, dst).unwrap()
            })
            .collect()
    }

    #[test]
    fn xproportion_matches_table_values() {
        let b = forge_xproportion().unwrap();
        let tokens = b.encode("y,x,z,x,w").unwrap();
        let out = b.model.forward(&tokens).unwrap().output;
        let expected = [0.0, 0.5, 1.0 / 3.0, 0.5, 0.4];
        for (p, &w) in expected.iter().enumerate() {
            assert!((out.at(p, 0) - w).abs() < 1e-6, "pos {p}: {}", out.at(p, 0));
        }
        // single "x" -> 1.0
        let out = b.model.forward(&b.encode("x").unwrap()).unwrap().output;
        assert!((out.at(0, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn reverse_matches_table_values() {
        let b = forge_reverse().unwrap();
        let tokens = b.encode("1,0,2,2,2").unwrap();
        let out = b.model.forward(&tokens).unwrap().output;
        let expected = [2usize, 2, 2, 0, 1];
        for (p, &w) in expected.iter().enumerate() {
            let row = out.row(p);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, w, "pos {p}");
        }
    }

    #[test]
    fn xproportion_ground_truth_edges() {
        let b = forge_xproportion().unwrap();
        let resample = edge_set(
            &b.model,
            &[("input", "mlp_in.0"), ("mlp.0", "v.1.0"), ("attn.1.0", "output_in")],
        );
        assert_eq!(b.resample_ablation_circuit.member_set(), resample);
        let zero = edge_set(
            &b.model,
            &[
                ("input", "mlp_in.0"),
                ("mlp.0", "v.1.0"),
                ("attn.1.0", "output_in"),
                ("input", "q.1.0"),
                ("input", "k.1.0"),
            ],
        );
        assert_eq!(b.zero_ablation_circuit.member_set(), zero);
    }

    #[test]
    fn reverse_ground_truth_edges() {
        let b = forge_reverse().unwrap();
        let resample = edge_set(&b.model, &[("input", "v.1.0"), ("attn.1.0", "output_in")]);
        assert_eq!(b.resample_ablation_circuit.member_set(), resample);
        let zero = edge_set(
            &b.model,
            &[
                ("input", "v.0.0"),
                ("input", "mlp_in.0"),
                ("attn.0.0", "mlp_in.0"),
                ("mlp.0", "q.1.0"),
                ("input", "k.1.0"),
                ("input", "v.1.0"),
                ("attn.1.0", "output_in"),
            ],
        );
        assert_eq!(b.zero_ablation_circuit.member_set(), zero);
    }

    #[test]
    fn ground_truth_faithful_under_own_methodology() {
        for task in [Task::Reverse, Task::XProportion] {
            let b = forge_task(task).unwrap();
            let batch = gen_dataset(task, &b.model, &b.oracle, 1000, 7).unwrap();
            for (circuit, value) in [
                (&b.resample_ablation_circuit, AblationValue::Resample),
                (&b.zero_ablation_circuit, AblationValue::Zero),
            ] {
                let spec = AblationSpec {
                    value: value.clone(),
                    ..AblationSpec::resample_edges()
                };
                let donors = build_donor_cache(&b.model, &value, &batch, spec.direction).unwrap();
                let outs = run_ablated(&b.model, circuit, &spec, &batch, &donors).unwrap();
                for (o, pair) in outs.iter().zip(&batch.pairs) {
                    let clean = b.model.forward(&pair.clean).unwrap().output;
                    let d = task_divergence(task, &o.output, &clean).unwrap();
                    let tol = match task {
                        Task::Reverse => 1e-6,
                        Task::XProportion => 1e-9,
                    };
                    assert!(d < tol, "{task:?} {value:?} divergence {d}");
                }
            }
        }
    }

    #[test]
    fn resample_circuit_fails_under_zero_ablation() {
        // the central finding: the resample ground truth, complement-ablated
        // with zeros, visibly breaks the task
        let b = forge_xproportion().unwrap();
        let batch = gen_dataset(Task::XProportion, &b.model, &b.oracle, 200, 11).unwrap();
        let spec = AblationSpec::zero_edges();
        let donors = build_donor_cache(&b.model, &AblationValue::Zero, &batch, spec.direction).unwrap();
        let outs = run_ablated(&b.model, &b.resample_ablation_circuit, &spec, &batch, &donors).unwrap();
        let mut worst: f64 = 0.0;
        for (o, pair) in outs.iter().zip(&batch.pairs) {
            let clean = b.model.forward(&pair.clean).unwrap().output;
            worst = worst.max(task_divergence(Task::XProportion, &o.output, &clean).unwrap());
        }
        assert!(worst > 1e-4, "worst divergence {worst}");
    }

    #[test]
    fn dataset_deterministic_and_distinct() {
        let b = forge_reverse().unwrap();
        let a = gen_dataset(Task::Reverse, &b.model, &b.oracle, 1000, 42).unwrap();
        let c = gen_dataset(Task::Reverse, &b.model, &b.oracle, 1000, 42).unwrap();
        assert_eq!(a, c);
        let distinct = a.pairs.iter().filter(|p| p.clean != p.corrupt).count();
        assert!(distinct >= 950, "{distinct}");
        // clean answers equal oracle outputs
        for p in &a.pairs {
            let want = b.oracle.eval(&p.clean).unwrap();
            if let AnswerSpec::Tokens(entries) = &p.answer {
                for (e, &w) in entries.iter().zip(&want) {
                    assert_eq!(e.correct, vec![w as usize]);
                }
            } else {
                panic!("reverse answers are token answers");
            }
        }
    }

    #[test]
    fn degenerate_tolerance_rejected() {
        let b = forge_xproportion().unwrap();
        let batch = gen_dataset(Task::XProportion, &b.model, &b.oracle, 10, 3).unwrap();
        assert!(derive_ground_truth(Task::XProportion, &b.model, AblationValue::Zero, &batch, 0.0).is_err());
    }
}
