//! The ablation engine: `F(x) = M(x | do(a = ã)), a ∉ C` and its
//! token-position variant for every combination of the six-tuple
//! (granularity, component, value, token positions, direction, set).
//!
//! Edge patching always visits every in-edge of every destination and picks
//! the clean or donor row per edge, so wall-clock is independent of how many
//! edges are patched.

use crate::data::PromptPairBatch;
use crate::error::{AblateError, Result};
use crate::graph::{Circuit, Granularity, ModelOutput, NodeId, PatchPlan, PatchableModel, Positions, DEFAULT_PATH_BOUND};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};

/// What value replaces an ablated activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AblationValue {
    Zero,
    GaussianNoise { sigma: f64, seed: u64 },
    Resample,
    Mean { per_position: bool },
}

pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;

/// Which kind of graph component is intervened on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    Node,
    Edge,
    Branch,
}

/// Which token positions are ablated.
///
/// `CircuitSpecific` uses the position qualifiers attached to circuit
/// members; with `TargetSet::Complement` this means: ablate non-circuit
/// components at all positions AND circuit components at the positions not
/// listed for them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenPositions {
    All,
    CircuitSpecific,
}

/// Whether the ablation destroys the clean signal (model runs on clean
/// input, donors from the corrupt side) or restores it (model runs on
/// corrupt input, donors from the clean side).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    AblateClean,
    RestoreClean,
}

/// Whether the ablation targets the circuit or its complement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetSet {
    Circuit,
    Complement,
}

/// The six-tuple defining one ablation methodology. Granularity is fixed at
/// heads + MLPs with Q/K/V-split channels in this artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub component: Component,
    pub value: AblationValue,
    pub token_positions: TokenPositions,
    pub direction: Direction,
    pub set: TargetSet,
}

impl AblationSpec {
    /// Edge resample-ablation of the complement at all positions: the
    /// methodology used by the discovery algorithms.
    pub fn resample_edges() -> Self {
        AblationSpec {
            component: Component::Edge,
            value: AblationValue::Resample,
            token_positions: TokenPositions::All,
            direction: Direction::AblateClean,
            set: TargetSet::Complement,
        }
    }

    pub fn zero_edges() -> Self {
        AblationSpec {
            value: AblationValue::Zero,
            ..AblationSpec::resample_edges()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let AblationValue::GaussianNoise { sigma, .. } = self.value {
            if !(sigma > 0.0) {
                return Err(AblateError::InvalidConfig(format!(
                    "gaussian noise sigma must be positive, got {sigma}"
                )));
            }
        }
        Ok(())
    }

    /// Stable fingerprint for report provenance.
    pub fn fingerprint(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Zero,
    Noise,
    CorruptRun,
    CleanRun,
    MeanOverDataset,
}

/// Replacement activations ã per (source, token position), per prompt.
#[derive(Clone, Debug)]
pub struct DonorCache {
    pub provenance: Provenance,
    /// One donor set per prompt (or a single shared set for Zero/Mean).
    per_prompt: Vec<Vec<Tensor>>,
    shared: bool,
}

impl DonorCache {
    pub fn donors(&self, prompt: usize) -> &[Tensor] {
        if self.shared {
            &self.per_prompt[0]
        } else {
            &self.per_prompt[prompt]
        }
    }

    pub fn n_prompts(&self) -> usize {
        self.per_prompt.len()
    }
}

fn donor_side<'a>(pair: &'a crate::data::PromptPair, direction: Direction) -> &'a [usize] {
    match direction {
        Direction::AblateClean => &pair.corrupt,
        Direction::RestoreClean => &pair.clean,
    }
}

fn model_side<'a>(pair: &'a crate::data::PromptPair, direction: Direction) -> &'a [usize] {
    match direction {
        Direction::AblateClean => &pair.clean,
        Direction::RestoreClean => &pair.corrupt,
    }
}

/// Build the donor cache for a value kind and direction over a batch.
///
/// `AblateClean` draws donors from the corrupt side (or zero/noise/mean);
/// `RestoreClean` draws donors from the clean side while the model runs on
/// the corrupt inputs. Resample pairing is index-aligned.
pub fn build_donor_cache(
    model: &PatchableModel,
    value: &AblationValue,
    batch: &PromptPairBatch,
    direction: Direction,
) -> Result<DonorCache> {
    if batch.is_empty() {
        return Err(AblateError::InvalidConfig("empty donor batch".into()));
    }
    match value {
        AblationValue::Zero => {
            let t = batch.pairs[0].clean.len();
            let zeros: Vec<Tensor> = model
                .sources
                .iter()
                .map(|_| Tensor::zeros(vec![t, model.spec.d_model]))
                .collect();
            Ok(DonorCache {
                provenance: Provenance::Zero,
                per_prompt: vec![zeros],
                shared: true,
            })
        }
        AblationValue::Resample => {
            batch.check_pair_lengths()?;
            let mut per_prompt = Vec::with_capacity(batch.len());
            for pair in &batch.pairs {
                let out = model.forward(donor_side(pair, direction))?;
                per_prompt.push(out.cache.src_out);
            }
            Ok(DonorCache {
                provenance: match direction {
                    Direction::AblateClean => Provenance::CorruptRun,
                    Direction::RestoreClean => Provenance::CleanRun,
                },
                per_prompt,
                shared: false,
            })
        }
        AblationValue::GaussianNoise { sigma, seed } => {
            // noise is applied to the token embeddings of the model-input
            // side; activations are re-derived by a forward pass.
            let normal = Normal::new(0.0, *sigma)
                .map_err(|e| AblateError::InvalidConfig(format!("noise sigma: {e}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut per_prompt = Vec::with_capacity(batch.len());
            for pair in &batch.pairs {
                let mut emb = model.embed(model_side(pair, direction))?;
                for v in &mut emb.data {
                    *v += normal.sample(&mut rng);
                }
                let plan = PatchPlan::empty(model.n_edges(), emb.rows());
                let out = model.forward_patched_from_embedding(emb, &plan, &[])?;
                per_prompt.push(out.cache.src_out);
            }
            Ok(DonorCache {
                provenance: Provenance::Noise,
                per_prompt,
                shared: false,
            })
        }
        AblationValue::Mean { per_position } => {
            let t = batch.pairs[0].clean.len();
            for (i, pair) in batch.pairs.iter().enumerate() {
                let side = donor_side(pair, direction);
                if side.len() != t {
                    return Err(AblateError::PairLengthMismatch {
                        pair: i,
                        clean: t,
                        corrupt: side.len(),
                    });
                }
            }
            let d = model.spec.d_model;
            let mut acc: Vec<Tensor> = model
                .sources
                .iter()
                .map(|_| Tensor::zeros(vec![t, d]))
                .collect();
            for pair in &batch.pairs {
                let out = model.forward(donor_side(pair, direction))?;
                for (a, s) in acc.iter_mut().zip(&out.cache.src_out) {
                    for (av, sv) in a.data.iter_mut().zip(&s.data) {
                        *av += sv;
                    }
                }
            }
            let n = batch.len() as f64;
            for a in &mut acc {
                for v in &mut a.data {
                    *v /= n;
                }
            }
            if !*per_position {
                // pool over positions as well
                for a in &mut acc {
                    let mut pooled = vec![0.0; d];
                    for p in 0..t {
                        for (j, &v) in a.row(p).iter().enumerate() {
                            pooled[j] += v;
                        }
                    }
                    for v in &mut pooled {
                        *v /= t as f64;
                    }
                    for p in 0..t {
                        a.row_mut(p).copy_from_slice(&pooled);
                    }
                }
            }
            Ok(DonorCache {
                provenance: Provenance::MeanOverDataset,
                per_prompt: vec![acc],
                shared: true,
            })
        }
    }
}

/// Positions at which a target member is ablated, given the token-position
/// rule and whether the member is in the circuit.
fn member_patch_positions(
    in_circuit: Option<&Positions>,
    targets_circuit: bool,
    token_positions: TokenPositions,
    seq_len: usize,
) -> Vec<usize> {
    match (token_positions, targets_circuit) {
        (TokenPositions::All, true) => {
            if in_circuit.is_some() {
                (0..seq_len).collect()
            } else {
                vec![]
            }
        }
        (TokenPositions::All, false) => {
            if in_circuit.is_none() {
                (0..seq_len).collect()
            } else {
                vec![]
            }
        }
        (TokenPositions::CircuitSpecific, true) => match in_circuit {
            Some(Positions::All) => (0..seq_len).collect(),
            Some(Positions::Specific(set)) => set.iter().copied().filter(|&p| p < seq_len).collect(),
            None => vec![],
        },
        (TokenPositions::CircuitSpecific, false) => match in_circuit {
            // circuit member: ablate at every position NOT specified
            Some(Positions::All) => vec![],
            Some(Positions::Specific(set)) => (0..seq_len).filter(|p| !set.contains(p)).collect(),
            // non-circuit member: ablate everywhere
            None => (0..seq_len).collect(),
        },
    }
}

/// Build the per-(edge, position) patch plan implementing `spec` for
/// `circuit` on a sequence of length `seq_len`.
pub fn build_patch_plan(
    model: &PatchableModel,
    circuit: &Circuit,
    spec: &AblationSpec,
    seq_len: usize,
) -> Result<PatchPlan> {
    circuit.validate(model)?;
    let targets_circuit = spec.set == TargetSet::Circuit;
    let mut plan = PatchPlan::empty(model.n_edges(), seq_len);
    match spec.component {
        Component::Edge => {
            if circuit.granularity != Granularity::Edges {
                return Err(AblateError::GranularityMismatch(
                    "edge ablation requires an edge-level circuit".into(),
                ));
            }
            for e in 0..model.n_edges() {
                let in_circuit = circuit.members.get(&e);
                for p in member_patch_positions(in_circuit, targets_circuit, spec.token_positions, seq_len) {
                    plan.set(e, p, true);
                }
            }
        }
        Component::Node => {
            if circuit.granularity != Granularity::Nodes {
                return Err(AblateError::GranularityMismatch(
                    "node ablation requires a node-level circuit".into(),
                ));
            }
            // node patching = patching all out-edges of the node with the
            // node's donor output
            for s in 0..model.sources.len() {
                let in_circuit = circuit.members.get(&s);
                for p in member_patch_positions(in_circuit, targets_circuit, spec.token_positions, seq_len) {
                    for &e_idx in &model.edges_out_of[s] {
                        plan.set(e_idx, p, true);
                    }
                }
            }
        }
        Component::Branch => {
            return Err(AblateError::GranularityMismatch(
                "branch ablation is evaluated by the treeified oracle".into(),
            ));
        }
    }
    Ok(plan)
}

/// Run the model with the ablation defined by (circuit, spec) on every
/// prompt in the batch.
pub fn run_ablated(
    model: &PatchableModel,
    circuit: &Circuit,
    spec: &AblationSpec,
    batch: &PromptPairBatch,
    donors: &DonorCache,
) -> Result<Vec<ModelOutput>> {
    spec.validate()?;
    if spec.component == Component::Branch {
        return run_branch_ablated(model, circuit, spec, batch, donors);
    }
    let mut outs = Vec::with_capacity(batch.len());
    for (i, pair) in batch.pairs.iter().enumerate() {
        let tokens = model_side(pair, spec.direction);
        let plan = build_patch_plan(model, circuit, spec, tokens.len())?;
        let out = model.forward_patched(tokens, &plan, donors.donors(i))?;
        outs.push(out);
    }
    Ok(outs)
}

/// Straightforward reference implementation of edge/node patching:
/// recomputes every destination input from scratch by memoized recursion
/// over sources. Used to validate the fast path.
pub fn run_ablated_naive(
    model: &PatchableModel,
    circuit: &Circuit,
    spec: &AblationSpec,
    batch: &PromptPairBatch,
    donors: &DonorCache,
) -> Result<Vec<Tensor>> {
    let mut outs = Vec::with_capacity(batch.len());
    for (i, pair) in batch.pairs.iter().enumerate() {
        let tokens = model_side(pair, spec.direction);
        let plan = build_patch_plan(model, circuit, spec, tokens.len())?;
        let donor_set = donors.donors(i);
        let mut memo: HashMap<usize, Tensor> = HashMap::new();
        let out_in = naive_dst_in(model, model.dests.len() - 1, tokens, &plan, donor_set, &mut memo)?;
        outs.push(model.unembed(&out_in)?);
    }
    Ok(outs)
}

fn naive_src_out(
    model: &PatchableModel,
    s_idx: usize,
    tokens: &[usize],
    plan: &PatchPlan,
    donors: &[Tensor],
    memo: &mut HashMap<usize, Tensor>,
) -> Result<Tensor> {
    if let Some(t) = memo.get(&s_idx) {
        return Ok(t.clone());
    }
    let out = match model.sources[s_idx] {
        NodeId::Input => model.embed(tokens)?,
        NodeId::AttnHeadOut { layer, head } => {
            let q_idx = model.dest_index(NodeId::Q { layer, head }).unwrap();
            let q = naive_dst_in(model, q_idx, tokens, plan, donors, memo)?;
            let k = naive_dst_in(model, q_idx + 1, tokens, plan, donors, memo)?;
            let v = naive_dst_in(model, q_idx + 2, tokens, plan, donors, memo)?;
            model.attn_head(layer, head, &q, &k, &v)?
        }
        NodeId::MlpOut { layer } => {
            let d_idx = model.dest_index(NodeId::MlpIn { layer }).unwrap();
            let x = naive_dst_in(model, d_idx, tokens, plan, donors, memo)?;
            model.mlp(layer, &x)?
        }
        _ => unreachable!("destinations are not sources"),
    };
    memo.insert(s_idx, out.clone());
    Ok(out)
}

fn naive_dst_in(
    model: &PatchableModel,
    d_idx: usize,
    tokens: &[usize],
    plan: &PatchPlan,
    donors: &[Tensor],
    memo: &mut HashMap<usize, Tensor>,
) -> Result<Tensor> {
    let t = tokens.len();
    let mut inp = Tensor::zeros(vec![t, model.spec.d_model]);
    for &e_idx in &model.edges_into[d_idx] {
        let s = model.edges[e_idx].src;
        let clean = naive_src_out(model, s, tokens, plan, donors, memo)?;
        for p in 0..t {
            let row = if plan.patched(e_idx, p) {
                donors[s].row(p)
            } else {
                clean.row(p)
            };
            for (o, &v) in inp.row_mut(p).iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    Ok(inp)
}

// ---------------------------------------------------------------------------
// Branch (treeified) ablation
// ---------------------------------------------------------------------------

/// Evaluate the treeified model: every input-to-output path carries the
/// clean signal iff all of its edges are in the kept set; other paths carry
/// the donor signal from the `Input` leaf.
///
/// The output depends on a path's state only through whether its suffix is
/// fully kept, so the exponential tree collapses to two evaluations per
/// component.
pub fn branch_ablate_oracle(
    model: &PatchableModel,
    kept_edges: &BTreeSet<usize>,
    tokens: &[usize],
    input_donor: &Tensor,
) -> Result<Tensor> {
    model.enumerate_paths(DEFAULT_PATH_BOUND)?;
    let mut memo: HashMap<(usize, bool), Tensor> = HashMap::new();
    let out_idx = model.dests.len() - 1;
    let out_in = tree_dst_in(model, out_idx, true, kept_edges, tokens, input_donor, &mut memo)?;
    model.unembed(&out_in)
}

fn tree_src_out(
    model: &PatchableModel,
    s_idx: usize,
    suffix_kept: bool,
    kept: &BTreeSet<usize>,
    tokens: &[usize],
    input_donor: &Tensor,
    memo: &mut HashMap<(usize, bool), Tensor>,
) -> Result<Tensor> {
    if let Some(t) = memo.get(&(s_idx, suffix_kept)) {
        return Ok(t.clone());
    }
    let out = match model.sources[s_idx] {
        NodeId::Input => {
            if suffix_kept {
                model.embed(tokens)?
            } else {
                input_donor.clone()
            }
        }
        NodeId::AttnHeadOut { layer, head } => {
            let q_idx = model.dest_index(NodeId::Q { layer, head }).unwrap();
            let q = tree_dst_in(model, q_idx, suffix_kept, kept, tokens, input_donor, memo)?;
            let k = tree_dst_in(model, q_idx + 1, suffix_kept, kept, tokens, input_donor, memo)?;
            let v = tree_dst_in(model, q_idx + 2, suffix_kept, kept, tokens, input_donor, memo)?;
            model.attn_head(layer, head, &q, &k, &v)?
        }
        NodeId::MlpOut { layer } => {
            let d_idx = model.dest_index(NodeId::MlpIn { layer }).unwrap();
            let x = tree_dst_in(model, d_idx, suffix_kept, kept, tokens, input_donor, memo)?;
            model.mlp(layer, &x)?
        }
        _ => unreachable!(),
    };
    memo.insert((s_idx, suffix_kept), out.clone());
    Ok(out)
}

fn tree_dst_in(
    model: &PatchableModel,
    d_idx: usize,
    suffix_kept: bool,
    kept: &BTreeSet<usize>,
    tokens: &[usize],
    input_donor: &Tensor,
    memo: &mut HashMap<(usize, bool), Tensor>,
) -> Result<Tensor> {
    let t = tokens.len();
    let mut inp = Tensor::zeros(vec![t, model.spec.d_model]);
    for &e_idx in &model.edges_into[d_idx] {
        let s = model.edges[e_idx].src;
        let child_kept = suffix_kept && kept.contains(&e_idx);
        let out = tree_src_out(model, s, child_kept, kept, tokens, input_donor, memo)?;
        for (o, &v) in inp.data.iter_mut().zip(&out.data) {
            *o += v;
        }
    }
    Ok(inp)
}

fn run_branch_ablated(
    model: &PatchableModel,
    circuit: &Circuit,
    spec: &AblationSpec,
    batch: &PromptPairBatch,
    donors: &DonorCache,
) -> Result<Vec<ModelOutput>> {
    if circuit.granularity != Granularity::Edges {
        return Err(AblateError::GranularityMismatch(
            "branch ablation requires an edge-level circuit".into(),
        ));
    }
    // ablated set per spec.set; kept = everything else
    let kept: BTreeSet<usize> = match spec.set {
        TargetSet::Circuit => (0..model.n_edges()).filter(|e| !circuit.contains(*e)).collect(),
        TargetSet::Complement => circuit.member_set(),
    };
    let mut outs = Vec::with_capacity(batch.len());
    for (i, pair) in batch.pairs.iter().enumerate() {
        let tokens = model_side(pair, spec.direction);
        let donor_set = donors.donors(i);
        let output = branch_ablate_oracle(model, &kept, tokens, &donor_set[0])?;
        // branch ablation has no single factorized cache; store the clean one
        let cache = model.forward(tokens)?.cache;
        outs.push(ModelOutput { output, cache });
    }
    Ok(outs)
}
