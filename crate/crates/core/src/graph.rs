//! The patchable transformer and its graph formulations.
//!
//! A model is a stack of attention + MLP layers without layer norm. Three
//! equivalent formulations are exposed: the residual view (reference), the
//! factorized view in which every destination channel reads the sum of all
//! prior source outputs (the domain of edge patching), and path enumeration
//! over the factorized DAG (the domain of branch ablation).
//!
//! Attention-head granularity with Q/K/V-split destination channels.

use crate::error::{AblateError, Result};
use crate::tensor::{self, Tensor};
use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;

/// A vertex of the factorized graph: either a source (component output) or a
/// destination channel (component input).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeId {
    // sources
    Input,
    AttnHeadOut { layer: usize, head: usize },
    MlpOut { layer: usize },
    // destination channels
    Q { layer: usize, head: usize },
    K { layer: usize, head: usize },
    V { layer: usize, head: usize },
    MlpIn { layer: usize },
    OutputIn,
}

impl NodeId {
    pub fn is_source(&self) -> bool {
        matches!(
            self,
            NodeId::Input | NodeId::AttnHeadOut { .. } | NodeId::MlpOut { .. }
        )
    }

    pub fn is_dest(&self) -> bool {
        !self.is_source()
    }

    /// The source whose input this destination channel feeds, or `None` for
    /// `OutputIn`.
    pub fn component_source(&self) -> Option<NodeId> {
        match *self {
            NodeId::Q { layer, head } | NodeId::K { layer, head } | NodeId::V { layer, head } => {
                Some(NodeId::AttnHeadOut { layer, head })
            }
            NodeId::MlpIn { layer } => Some(NodeId::MlpOut { layer }),
            NodeId::OutputIn => None,
            _ => None,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            NodeId::Input => write!(f, "input"),
            NodeId::AttnHeadOut { layer, head } => write!(f, "attn.{layer}.{head}"),
            NodeId::MlpOut { layer } => write!(f, "mlp.{layer}"),
            NodeId::Q { layer, head } => write!(f, "q.{layer}.{head}"),
            NodeId::K { layer, head } => write!(f, "k.{layer}.{head}"),
            NodeId::V { layer, head } => write!(f, "v.{layer}.{head}"),
            NodeId::MlpIn { layer } => write!(f, "mlp_in.{layer}"),
            NodeId::OutputIn => write!(f, "output_in"),
        }
    }
}

impl std::str::FromStr for NodeId {
    type Err = AblateError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('.').collect();
        let parse = |p: &str| -> Result<usize> {
            p.parse()
                .map_err(|_| AblateError::InvalidCircuit(format!("bad node id `{s}`")))
        };
        match parts.as_slice() {
            ["input"] => Ok(NodeId::Input),
            ["output_in"] => Ok(NodeId::OutputIn),
            ["attn", l, h] => Ok(NodeId::AttnHeadOut {
                layer: parse(l)?,
                head: parse(h)?,
            }),
            ["mlp", l] => Ok(NodeId::MlpOut { layer: parse(l)? }),
            ["q", l, h] => Ok(NodeId::Q {
                layer: parse(l)?,
                head: parse(h)?,
            }),
            ["k", l, h] => Ok(NodeId::K {
                layer: parse(l)?,
                head: parse(h)?,
            }),
            ["v", l, h] => Ok(NodeId::V {
                layer: parse(l)?,
                head: parse(h)?,
            }),
            ["mlp_in", l] => Ok(NodeId::MlpIn { layer: parse(l)? }),
            _ => Err(AblateError::InvalidCircuit(format!("bad node id `{s}`"))),
        }
    }
}

/// An edge of the factorized graph, by source and destination index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
}

/// Architecture and weights of a small transformer.
///
/// Weight names and shapes:
/// - `embed.tokens`: `[vocab, d_model]`
/// - `embed.pos`: `[max_seq_len, d_model]` (when positional embedding used)
/// - `attn.{l}.{h}.w_q|w_k|w_v`: `[d_model, d_head]`
/// - `attn.{l}.{h}.w_o`: `[d_head, d_model]`
/// - `mlp.{l}.w_in`: `[d_model, d_mlp]`, `mlp.{l}.b_in`: `[1, d_mlp]`
/// - `mlp.{l}.w_out`: `[d_mlp, d_model]`, `mlp.{l}.b_out`: `[1, d_model]`
/// - `unembed`: `[d_model, d_out]`
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab: Vec<String>,
    pub max_seq_len: usize,
    pub use_positional_embedding: bool,
    pub weights: BTreeMap<String, Tensor>,
}

/// One of {relu, gelu (tanh approximation)} for the MLP nonlinearity.
/// The toy models use relu only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Relu,
    GeluTanh,
}

impl ModelSpec {
    pub fn weight(&self, name: &str) -> Result<&Tensor> {
        self.weights
            .get(name)
            .ok_or_else(|| AblateError::MissingWeight(name.to_string()))
    }

    /// Output dimension, read off the unembedding matrix.
    pub fn d_out(&self) -> Result<usize> {
        Ok(self.weight("unembed")?.cols())
    }

    fn check_weight(&self, name: &str, expected: Vec<usize>) -> Result<()> {
        let w = self.weight(name)?;
        if w.shape != expected {
            return Err(AblateError::BadWeight {
                name: name.to_string(),
                expected,
                got: w.shape.clone(),
            });
        }
        if !w.all_finite() {
            return Err(AblateError::NonFinite(format!("weight `{name}`")));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check_weight("embed.tokens", vec![self.vocab.len(), self.d_model])?;
        if self.use_positional_embedding {
            self.check_weight("embed.pos", vec![self.max_seq_len, self.d_model])?;
        }
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                for w in ["w_q", "w_k", "w_v"] {
                    self.check_weight(&format!("attn.{l}.{h}.{w}"), vec![self.d_model, self.d_head])?;
                }
                self.check_weight(&format!("attn.{l}.{h}.w_o"), vec![self.d_head, self.d_model])?;
            }
            self.check_weight(&format!("mlp.{l}.w_in"), vec![self.d_model, self.d_mlp])?;
            self.check_weight(&format!("mlp.{l}.b_in"), vec![1, self.d_mlp])?;
            self.check_weight(&format!("mlp.{l}.w_out"), vec![self.d_mlp, self.d_model])?;
            self.check_weight(&format!("mlp.{l}.b_out"), vec![1, self.d_model])?;
        }
        let un = self.weight("unembed")?;
        if un.rows() != self.d_model {
            return Err(AblateError::BadWeight {
                name: "unembed".into(),
                expected: vec![self.d_model, un.cols()],
                got: un.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Whether a given (edge, token position) is patched during a forward pass.
#[derive(Clone, Debug)]
pub struct PatchPlan {
    n_edges: usize,
    seq_len: usize,
    bits: Vec<bool>,
}

impl PatchPlan {
    pub fn empty(n_edges: usize, seq_len: usize) -> Self {
        PatchPlan {
            n_edges,
            seq_len,
            bits: vec![false; n_edges * seq_len],
        }
    }

    pub fn set(&mut self, edge: usize, pos: usize, patched: bool) {
        self.bits[edge * self.seq_len + pos] = patched;
    }

    pub fn set_edge(&mut self, edge: usize, patched: bool) {
        for p in 0..self.seq_len {
            self.set(edge, p, patched);
        }
    }

    #[inline]
    pub fn patched(&self, edge: usize, pos: usize) -> bool {
        self.bits[edge * self.seq_len + pos]
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn count_patched_edges(&self) -> usize {
        (0..self.n_edges)
            .filter(|&e| (0..self.seq_len).any(|p| self.patched(e, p)))
            .count()
    }

    pub fn is_noop(&self) -> bool {
        self.bits.iter().all(|&b| !b)
    }
}

/// Activation cache from one forward pass: every source output and every
/// destination-channel input, per token position.
#[derive(Clone, Debug)]
pub struct Cache {
    pub src_out: Vec<Tensor>,
    pub dst_in: Vec<Tensor>,
}

/// Per-position output vectors plus the full activation cache.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub output: Tensor,
    pub cache: Cache,
}

/// A small transformer plus its factorized computational graph, with indexed
/// source nodes, destination channels and edges. Immutable after build.
#[derive(Clone, Debug)]
pub struct PatchableModel {
    pub spec: ModelSpec,
    pub nonlinearity: Nonlinearity,
    pub sources: Vec<NodeId>,
    pub dests: Vec<NodeId>,
    pub edges: Vec<Edge>,
    /// Edge indices into each destination, ordered by source index.
    pub edges_into: Vec<Vec<usize>>,
    /// Edge indices out of each source, ordered by destination index.
    pub edges_out_of: Vec<Vec<usize>>,
}

/// Default cap on treeified path enumeration.
pub const DEFAULT_PATH_BOUND: u64 = 100_000;

/// Build a [`PatchableModel`] from a validated spec, enumerating sources,
/// destination channels and edges in topological order.
pub fn build_model(spec: ModelSpec) -> Result<PatchableModel> {
    spec.validate()?;

    let mut sources = vec![NodeId::Input];
    let mut dests = Vec::new();
    for layer in 0..spec.n_layers {
        for head in 0..spec.n_heads {
            dests.push(NodeId::Q { layer, head });
            dests.push(NodeId::K { layer, head });
            dests.push(NodeId::V { layer, head });
        }
        dests.push(NodeId::MlpIn { layer });
        for head in 0..spec.n_heads {
            sources.push(NodeId::AttnHeadOut { layer, head });
        }
        sources.push(NodeId::MlpOut { layer });
    }
    dests.push(NodeId::OutputIn);

    // sources visible to a destination channel: everything computed strictly
    // before it. Attention runs before the MLP within a layer.
    let n_prior = |dst: &NodeId| -> usize {
        match *dst {
            NodeId::Q { layer, .. } | NodeId::K { layer, .. } | NodeId::V { layer, .. } => {
                1 + layer * (spec.n_heads + 1)
            }
            NodeId::MlpIn { layer } => 1 + layer * (spec.n_heads + 1) + spec.n_heads,
            NodeId::OutputIn => sources.len(),
            _ => unreachable!("not a destination"),
        }
    };

    let mut edges = Vec::new();
    let mut edges_into = vec![Vec::new(); dests.len()];
    let mut edges_out_of = vec![Vec::new(); sources.len()];
    for (d_idx, dst) in dests.iter().enumerate() {
        for s_idx in 0..n_prior(dst) {
            let e_idx = edges.len();
            edges.push(Edge {
                src: s_idx,
                dst: d_idx,
            });
            edges_into[d_idx].push(e_idx);
            edges_out_of[s_idx].push(e_idx);
        }
    }

    Ok(PatchableModel {
        nonlinearity: Nonlinearity::Relu,
        spec,
        sources,
        dests,
        edges,
        edges_into,
        edges_out_of,
    })
}

impl PatchableModel {
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn source_index(&self, n: NodeId) -> Option<usize> {
        self.sources.iter().position(|&s| s == n)
    }

    pub fn dest_index(&self, n: NodeId) -> Option<usize> {
        self.dests.iter().position(|&d| d == n)
    }

    pub fn edge_index(&self, src: NodeId, dst: NodeId) -> Option<usize> {
        let s = self.source_index(src)?;
        let d = self.dest_index(dst)?;
        self.edges.iter().position(|e| e.src == s && e.dst == d)
    }

    pub fn edge_endpoints(&self, e_idx: usize) -> (NodeId, NodeId) {
        let e = self.edges[e_idx];
        (self.sources[e.src], self.dests[e.dst])
    }

    /// Deterministic edge ordering: by destination topological index, then
    /// source index.
    pub fn enumerate_edges(&self) -> Vec<Edge> {
        self.edges.clone()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() > self.spec.max_seq_len {
            return Err(AblateError::SequenceTooLong {
                len: tokens.len(),
                max: self.spec.max_seq_len,
            });
        }
        for &t in tokens {
            if t >= self.spec.vocab.len() {
                return Err(AblateError::UnknownToken {
                    id: t,
                    vocab: self.spec.vocab.len(),
                });
            }
        }
        Ok(())
    }

    /// Token + positional embedding: the output of the `Input` source.
    pub fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let d = self.spec.d_model;
        let we = self.spec.weight("embed.tokens")?;
        let mut out = Tensor::zeros(vec![tokens.len(), d]);
        for (p, &t) in tokens.iter().enumerate() {
            out.row_mut(p).copy_from_slice(we.row(t));
        }
        if self.spec.use_positional_embedding {
            let wp = self.spec.weight("embed.pos")?;
            for p in 0..tokens.len() {
                let row = wp.row(p);
                for (o, &v) in out.row_mut(p).iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        Ok(out)
    }

    /// Scaled dot-product attention for head (layer, head) given per-channel
    /// inputs of shape `[T, d_model]`. No causal mask; selector patterns are
    /// encoded in the weights.
    pub fn attn_head(&self, layer: usize, head: usize, q_in: &Tensor, k_in: &Tensor, v_in: &Tensor) -> Result<Tensor> {
        let wq = self.spec.weight(&format!("attn.{layer}.{head}.w_q"))?;
        let wk = self.spec.weight(&format!("attn.{layer}.{head}.w_k"))?;
        let wv = self.spec.weight(&format!("attn.{layer}.{head}.w_v"))?;
        let wo = self.spec.weight(&format!("attn.{layer}.{head}.w_o"))?;
        let q = tensor::matmul(q_in, wq)?;
        let k = tensor::matmul(k_in, wk)?;
        let v = tensor::matmul(v_in, wv)?;
        let scores = tensor::scale(&tensor::matmul_nt(&q, &k)?, 1.0 / (self.spec.d_head as f64).sqrt());
        let attn = tensor::softmax_rows(&scores);
        let mixed = tensor::matmul(&attn, &v)?;
        tensor::matmul(&mixed, wo)
    }

    pub fn mlp(&self, layer: usize, x: &Tensor) -> Result<Tensor> {
        let w_in = self.spec.weight(&format!("mlp.{layer}.w_in"))?;
        let b_in = self.spec.weight(&format!("mlp.{layer}.b_in"))?;
        let w_out = self.spec.weight(&format!("mlp.{layer}.w_out"))?;
        let b_out = self.spec.weight(&format!("mlp.{layer}.b_out"))?;
        let pre = tensor::add_row(&tensor::matmul(x, w_in)?, b_in)?;
        let hidden = match self.nonlinearity {
            Nonlinearity::Relu => tensor::relu(&pre),
            Nonlinearity::GeluTanh => tensor::gelu_tanh(&pre),
        };
        tensor::add_row(&tensor::matmul(&hidden, w_out)?, b_out)
    }

    pub fn unembed(&self, resid: &Tensor) -> Result<Tensor> {
        tensor::matmul(resid, self.spec.weight("unembed")?)
    }

    /// Forward pass in the factorized view with a full activation cache.
    pub fn forward(&self, tokens: &[usize]) -> Result<ModelOutput> {
        let plan = PatchPlan::empty(self.n_edges(), tokens.len());
        self.forward_patched(tokens, &plan, &[])
    }

    /// Factorized forward pass with per-(edge, position) patching.
    ///
    /// `donors[src]` holds the replacement activation for each source (same
    /// shape as the source output); it may be empty when the plan is a no-op.
    /// Every in-edge of every destination is visited regardless of how many
    /// are patched, so runtime is independent of the patch-set size.
    pub fn forward_patched(&self, tokens: &[usize], plan: &PatchPlan, donors: &[Tensor]) -> Result<ModelOutput> {
        self.check_tokens(tokens)?;
        let emb = self.embed(tokens)?;
        self.forward_patched_from_embedding(emb, plan, donors)
    }

    /// As [`forward_patched`](Self::forward_patched) but starting from an
    /// explicit `Input` activation (used for Gaussian-noise donor runs).
    pub fn forward_patched_from_embedding(&self, embedding: Tensor, plan: &PatchPlan, donors: &[Tensor]) -> Result<ModelOutput> {
        if !plan.is_noop() && donors.len() != self.sources.len() {
            return Err(AblateError::MissingDonor(format!(
                "expected {} donor tensors, got {}",
                self.sources.len(),
                donors.len()
            )));
        }
        let t = embedding.rows();
        let d = self.spec.d_model;
        let mut src_out: Vec<Tensor> = Vec::with_capacity(self.sources.len());
        src_out.push(embedding);
        let mut dst_in: Vec<Tensor> = Vec::with_capacity(self.dests.len());
        let mut output = None;

        for (d_idx, dst) in self.dests.iter().enumerate() {
            let mut inp = Tensor::zeros(vec![t, d]);
            for &e_idx in &self.edges_into[d_idx] {
                let s = self.edges[e_idx].src;
                for p in 0..t {
                    let row = if plan.patched(e_idx, p) {
                        let donor = &donors[s];
                        donor.row(p)
                    } else {
                        src_out[s].row(p)
                    };
                    for (o, &v) in inp.row_mut(p).iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
            dst_in.push(inp);
            match *dst {
                NodeId::V { layer, head } => {
                    let q_in = &dst_in[d_idx - 2];
                    let k_in = &dst_in[d_idx - 1];
                    let v_in = &dst_in[d_idx];
                    let out = self.attn_head(layer, head, q_in, k_in, v_in)?;
                    src_out.push(out);
                }
                NodeId::MlpIn { layer } => {
                    let out = self.mlp(layer, &dst_in[d_idx])?;
                    src_out.push(out);
                }
                NodeId::OutputIn => {
                    output = Some(self.unembed(&dst_in[d_idx])?);
                }
                _ => {}
            }
        }

        Ok(ModelOutput {
            output: output.expect("OutputIn is always last"),
            cache: Cache { src_out, dst_in },
        })
    }

    /// Forward pass in the standard residual view; oracle for view
    /// equivalence.
    pub fn residual_forward(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut resid = self.embed(tokens)?;
        for layer in 0..self.spec.n_layers {
            let x = resid.clone();
            for head in 0..self.spec.n_heads {
                let out = self.attn_head(layer, head, &x, &x, &x)?;
                resid = tensor::add(&resid, &out)?;
            }
            let m = self.mlp(layer, &resid)?;
            resid = tensor::add(&resid, &m)?;
        }
        self.unembed(&resid)
    }

    /// Number of input-to-output paths in the treeified view, by dynamic
    /// programming over the DAG.
    pub fn path_count(&self) -> u64 {
        let mut from_source: Vec<Option<u64>> = vec![None; self.sources.len()];
        // process sources in reverse topological order (later sources first)
        for s_idx in (0..self.sources.len()).rev() {
            let mut total: u64 = 0;
            for &e_idx in &self.edges_out_of[s_idx] {
                let dst = self.dests[self.edges[e_idx].dst];
                total += match dst.component_source() {
                    None => 1, // OutputIn
                    Some(comp) => {
                        let c_idx = self.source_index(comp).expect("component source exists");
                        from_source[c_idx].expect("reverse topo order")
                    }
                };
            }
            from_source[s_idx] = Some(total);
        }
        from_source[0].unwrap_or(0)
    }

    /// Enumerate every input-to-output edge chain, failing if the count
    /// exceeds `bound` (the count is exponential in depth).
    pub fn enumerate_paths(&self, bound: u64) -> Result<Vec<Vec<usize>>> {
        let count = self.path_count();
        if count > bound {
            return Err(AblateError::PathBoundExceeded { count, bound });
        }
        let mut paths = Vec::new();
        let mut stack = Vec::new();
        self.dfs_paths(0, &mut stack, &mut paths);
        debug_assert_eq!(paths.len() as u64, count);
        Ok(paths)
    }

    fn dfs_paths(&self, s_idx: usize, stack: &mut Vec<usize>, paths: &mut Vec<Vec<usize>>) {
        for &e_idx in &self.edges_out_of[s_idx] {
            stack.push(e_idx);
            let dst = self.dests[self.edges[e_idx].dst];
            match dst.component_source() {
                None => paths.push(stack.clone()),
                Some(comp) => {
                    let c_idx = self.source_index(comp).expect("component exists");
                    self.dfs_paths(c_idx, stack, paths);
                }
            }
            stack.pop();
        }
    }
}

// ---------------------------------------------------------------------------
// Circuits
// ---------------------------------------------------------------------------

/// Token-position qualification of a circuit member.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Positions {
    All,
    Specific(BTreeSet<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    Edges,
    Nodes,
}

/// A set of edges (or source nodes) within a bound model, each optionally
/// token-position-qualified.
#[derive(Clone, Debug, PartialEq)]
pub struct Circuit {
    pub granularity: Granularity,
    /// Edge index (or source index for node circuits) -> positions.
    pub members: BTreeMap<usize, Positions>,
}

impl Circuit {
    pub fn edges<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Circuit {
            granularity: Granularity::Edges,
            members: iter.into_iter().map(|e| (e, Positions::All)).collect(),
        }
    }

    pub fn nodes<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Circuit {
            granularity: Granularity::Nodes,
            members: iter.into_iter().map(|e| (e, Positions::All)).collect(),
        }
    }

    pub fn empty_edges() -> Self {
        Circuit::edges([])
    }

    pub fn full_edges(model: &PatchableModel) -> Self {
        Circuit::edges(0..model.n_edges())
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.members.contains_key(&idx)
    }

    pub fn member_set(&self) -> BTreeSet<usize> {
        self.members.keys().copied().collect()
    }

    pub fn has_position_qualifiers(&self) -> bool {
        self.members
            .values()
            .any(|p| matches!(p, Positions::Specific(_)))
    }

    pub fn validate(&self, model: &PatchableModel) -> Result<()> {
        let universe = match self.granularity {
            Granularity::Edges => model.n_edges(),
            Granularity::Nodes => model.sources.len(),
        };
        for (&idx, pos) in &self.members {
            if idx >= universe {
                return Err(AblateError::InvalidCircuit(format!(
                    "member index {idx} out of range ({universe})"
                )));
            }
            if let Positions::Specific(set) = pos {
                for &p in set {
                    if p >= model.spec.max_seq_len {
                        return Err(AblateError::InvalidCircuit(format!(
                            "token position {p} out of range ({})",
                            model.spec.max_seq_len
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// All components of the graph not in the circuit, at the same granularity.
/// Position qualifiers do not survive complementation; the ablation engine
/// applies the token-position rule directly.
pub fn complement(circuit: &Circuit, model: &PatchableModel) -> Result<Circuit> {
    circuit.validate(model)?;
    let universe = match circuit.granularity {
        Granularity::Edges => model.n_edges(),
        Granularity::Nodes => model.sources.len(),
    };
    let members = (0..universe)
        .filter(|i| !circuit.contains(*i))
        .map(|i| (i, Positions::All))
        .collect();
    Ok(Circuit {
        granularity: circuit.granularity,
        members,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::{random_model, random_spec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_layer_one_head_nodes() {
        let m = random_model(0, 2, 1);
        assert_eq!(
            m.sources,
            vec![
                NodeId::Input,
                NodeId::AttnHeadOut { layer: 0, head: 0 },
                NodeId::MlpOut { layer: 0 },
                NodeId::AttnHeadOut { layer: 1, head: 0 },
                NodeId::MlpOut { layer: 1 },
            ]
        );
        assert_eq!(
            m.dests,
            vec![
                NodeId::Q { layer: 0, head: 0 },
                NodeId::K { layer: 0, head: 0 },
                NodeId::V { layer: 0, head: 0 },
                NodeId::MlpIn { layer: 0 },
                NodeId::Q { layer: 1, head: 0 },
                NodeId::K { layer: 1, head: 0 },
                NodeId::V { layer: 1, head: 0 },
                NodeId::MlpIn { layer: 1 },
                NodeId::OutputIn,
            ]
        );
        // 3*1 + 2 + 3*3 + 4 + 5 = 23
        assert_eq!(m.n_edges(), 23);
    }

    #[test]
    fn edge_count_matches_prior_source_enumeration() {
        // brute-force: count prior sources per destination
        for (layers, heads) in [(1, 2), (2, 1), (3, 2)] {
            let m = random_model(1, layers, heads);
            let mut expected = 0;
            for d_idx in 0..m.dests.len() {
                let d = m.dests[d_idx];
                let prior = match d {
                    NodeId::Q { layer, .. } | NodeId::K { layer, .. } | NodeId::V { layer, .. } => {
                        1 + layer * (heads + 1)
                    }
                    NodeId::MlpIn { layer } => 1 + layer * (heads + 1) + heads,
                    NodeId::OutputIn => m.sources.len(),
                    _ => unreachable!(),
                };
                expected += prior;
            }
            assert_eq!(m.n_edges(), expected);
        }
    }

    #[test]
    fn one_layer_two_head_no_mlp_edges() {
        // 1-layer 2-head: edges into Q/K/V of both heads come only from
        // Input (2 heads * 3 channels = 6), MlpIn gets Input + 2 heads = 3,
        // OutputIn gets all 4 sources.
        let m = random_model(2, 1, 2);
        let into_qkv: usize = m
            .dests
            .iter()
            .enumerate()
            .filter(|(_, d)| matches!(d, NodeId::Q { .. } | NodeId::K { .. } | NodeId::V { .. }))
            .map(|(i, _)| m.edges_into[i].len())
            .sum();
        assert_eq!(into_qkv, 6);
        let out_in = m.dest_index(NodeId::OutputIn).unwrap();
        assert_eq!(m.edges_into[out_in].len(), 4);
    }

    #[test]
    fn zero_layer_model_single_edge() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = random_spec(&mut rng, 0, 0);
        let m = build_model(spec).unwrap();
        assert_eq!(m.sources, vec![NodeId::Input]);
        assert_eq!(m.dests, vec![NodeId::OutputIn]);
        assert_eq!(m.n_edges(), 1);
        assert_eq!(m.path_count(), 1);
        assert_eq!(m.enumerate_paths(10).unwrap().len(), 1);
    }

    #[test]
    fn malformed_weight_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut spec = random_spec(&mut rng, 1, 1);
        spec.weights
            .insert("attn.0.0.w_q".into(), Tensor::zeros(vec![3, 3]));
        let err = build_model(spec).unwrap_err();
        assert!(err.to_string().contains("attn.0.0.w_q"), "{err}");
    }

    #[test]
    fn view_equivalence_200_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for i in 0..200 {
            let layers = 1 + (i % 3);
            let heads = 1 + (i % 2);
            let spec = random_spec(&mut rng, layers, heads);
            let m = build_model(spec).unwrap();
            let len = 1 + (i % 6);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..5)).collect();
            let fact = m.forward(&tokens).unwrap().output;
            let resid = m.residual_forward(&tokens).unwrap();
            for (a, b) in fact.data.iter().zip(&resid.data) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn destination_input_reconstruction() {
        let m = random_model(5, 2, 2);
        let tokens = vec![0, 1, 2, 3];
        let out = m.forward(&tokens).unwrap();
        for (d_idx, _) in m.dests.iter().enumerate() {
            let mut sum = Tensor::zeros(vec![tokens.len(), m.spec.d_model]);
            for &e_idx in &m.edges_into[d_idx] {
                let s = m.edges[e_idx].src;
                for (acc, v) in sum.data.iter_mut().zip(&out.cache.src_out[s].data) {
                    *acc += v;
                }
            }
            for (a, b) in sum.data.iter().zip(&out.cache.dst_in[d_idx].data) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn topological_order_valid() {
        let m = random_model(6, 3, 2);
        // every edge goes forward: source computed before destination's component
        for e in &m.edges {
            let src = m.sources[e.src];
            let dst = m.dests[e.dst];
            if let Some(comp) = dst.component_source() {
                let c_idx = m.source_index(comp).unwrap();
                assert!(e.src < c_idx, "{src} -> {dst}");
            }
        }
    }

    #[test]
    fn path_count_matches_dfs() {
        for seed in 0..5 {
            let m = random_model(seed, 2, 1);
            let paths = m.enumerate_paths(DEFAULT_PATH_BOUND).unwrap();
            assert_eq!(paths.len() as u64, m.path_count());
            for p in &paths {
                // starts at Input, ends at OutputIn
                assert_eq!(m.edges[p[0]].src, 0);
                assert_eq!(m.dests[m.edges[*p.last().unwrap()].dst], NodeId::OutputIn);
                // consecutive edges connect through components
                for w in p.windows(2) {
                    let comp = m.dests[m.edges[w[0]].dst].component_source().unwrap();
                    assert_eq!(m.sources[m.edges[w[1]].src], comp);
                }
            }
        }
    }

    #[test]
    fn path_bound_rejected_with_count() {
        let m = random_model(7, 2, 2);
        let err = m.enumerate_paths(1).unwrap_err();
        match err {
            AblateError::PathBoundExceeded { count, bound } => {
                assert_eq!(count, m.path_count());
                assert_eq!(bound, 1);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn removing_edge_decreases_path_count() {
        // removing an edge strictly decreases path count unless it lies on
        // no path; here every edge lies on some path.
        let m = random_model(8, 2, 1);
        let all = m.enumerate_paths(DEFAULT_PATH_BOUND).unwrap();
        for e in 0..m.n_edges() {
            let remaining = all.iter().filter(|p| !p.contains(&e)).count();
            assert!(remaining < all.len(), "edge {e} on no path");
        }
    }

    #[test]
    fn complement_involution_and_partition() {
        let m = random_model(9, 2, 1);
        let c = Circuit::edges([0, 3, 7, 22]);
        let comp = complement(&c, &m).unwrap();
        assert_eq!(comp.len(), m.n_edges() - 4);
        let back = complement(&comp, &m).unwrap();
        assert_eq!(back.member_set(), c.member_set());
        let mut union = c.member_set();
        union.extend(comp.member_set());
        assert_eq!(union.len(), m.n_edges());
    }

    #[test]
    fn unknown_token_rejected() {
        let m = random_model(10, 1, 1);
        assert!(m.forward(&[0, 99]).is_err());
    }

    #[test]
    fn node_id_roundtrip() {
        for n in [
            NodeId::Input,
            NodeId::AttnHeadOut { layer: 1, head: 0 },
            NodeId::MlpOut { layer: 2 },
            NodeId::Q { layer: 0, head: 3 },
            NodeId::MlpIn { layer: 1 },
            NodeId::OutputIn,
        ] {
            let s = n.to_string();
            let parsed: NodeId = s.parse().unwrap();
            assert_eq!(parsed, n);
        }
    }
}
