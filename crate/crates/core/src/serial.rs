//! File formats: model weights (JSON with base64 little-endian float64
//! blobs, sorted keys), circuits (CSV `src,dst,token_pos`), score maps
//! (CSV), ROC points (CSV `threshold,fpr,tpr`), faithfulness reports
//! (JSON), and run manifests (JSON with content hashes). All UTF-8 with LF
//! line endings; serialization is deterministic so files are diffable.

use crate::discovery::ScoreMap;
use crate::error::{AblateError, Result};
use crate::graph::{Circuit, Granularity, ModelSpec, NodeId, PatchableModel, Positions};
use crate::metrics::FaithfulnessReport;
use crate::roc::RocCurve;
use crate::tensor::Tensor;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};

// ---------------------------------------------------------------------------
// Model weights
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct WeightBlob {
    shape: Vec<usize>,
    /// base64 of little-endian float64 values, row-major.
    data: String,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    n_layers: usize,
    n_heads: usize,
    d_model: usize,
    d_head: usize,
    d_mlp: usize,
    vocab: Vec<String>,
    max_seq_len: usize,
    use_positional_embedding: bool,
    weights: BTreeMap<String, WeightBlob>,
}

fn tensor_to_blob(t: &Tensor) -> WeightBlob {
    let mut bytes = Vec::with_capacity(t.data.len() * 8);
    for v in &t.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    WeightBlob {
        shape: t.shape.clone(),
        data: B64.encode(bytes),
    }
}

fn blob_to_tensor(name: &str, b: &WeightBlob) -> Result<Tensor> {
    let bytes = B64
        .decode(&b.data)
        .map_err(|e| AblateError::Parse(format!("weight `{name}`: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(AblateError::Parse(format!(
            "weight `{name}`: byte length {} not a multiple of 8",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(b.shape.clone(), data)
}

/// Serialize a model spec to deterministic JSON (sorted keys).
pub fn model_to_json(spec: &ModelSpec) -> Result<String> {
    let file = ModelFile {
        n_layers: spec.n_layers,
        n_heads: spec.n_heads,
        d_model: spec.d_model,
        d_head: spec.d_head,
        d_mlp: spec.d_mlp,
        vocab: spec.vocab.clone(),
        max_seq_len: spec.max_seq_len,
        use_positional_embedding: spec.use_positional_embedding,
        weights: spec
            .weights
            .iter()
            .map(|(k, v)| (k.clone(), tensor_to_blob(v)))
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)? + "\n")
}

pub fn model_from_json(json: &str) -> Result<ModelSpec> {
    let file: ModelFile = serde_json::from_str(json)?;
    let mut weights = BTreeMap::new();
    for (name, blob) in &file.weights {
        weights.insert(name.clone(), blob_to_tensor(name, blob)?);
    }
    let spec = ModelSpec {
        n_layers: file.n_layers,
        n_heads: file.n_heads,
        d_model: file.d_model,
        d_head: file.d_head,
        d_mlp: file.d_mlp,
        vocab: file.vocab,
        max_seq_len: file.max_seq_len,
        use_positional_embedding: file.use_positional_embedding,
        weights,
    };
    spec.validate()?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Circuits
// ---------------------------------------------------------------------------

/// Serialize an edge circuit to CSV with header `src,dst,token_pos`.
/// A member at all positions has an empty `token_pos`; position-qualified
/// members emit one row per position.
pub fn circuit_to_csv(model: &PatchableModel, circuit: &Circuit) -> Result<String> {
    if circuit.granularity != Granularity::Edges {
        return Err(AblateError::GranularityMismatch(
            "circuit files store edge circuits".into(),
        ));
    }
    circuit.validate(model)?;
    let mut out = String::from("src,dst,token_pos\n");
    for (&e_idx, pos) in &circuit.members {
        let (src, dst) = model.edge_endpoints(e_idx);
        match pos {
            Positions::All => out.push_str(&format!("{src},{dst},\n")),
            Positions::Specific(set) => {
                for p in set {
                    out.push_str(&format!("{src},{dst},{p}\n"));
                }
            }
        }
    }
    Ok(out)
}

pub fn circuit_from_csv(model: &PatchableModel, csv: &str) -> Result<Circuit> {
    let mut lines = csv.lines();
    match lines.next() {
        Some("src,dst,token_pos") => {}
        other => {
            return Err(AblateError::Parse(format!(
                "bad circuit header: {other:?}"
            )))
        }
    }
    let mut members: BTreeMap<usize, Positions> = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(AblateError::Parse(format!("circuit line {}: `{line}`", n + 2)));
        }
        let src: NodeId = fields[0].parse()?;
        let dst: NodeId = fields[1].parse()?;
        let e_idx = model.edge_index(src, dst).ok_or_else(|| {
            AblateError::InvalidCircuit(format!("no edge {src}->{dst} in this model"))
        })?;
        if fields[2].is_empty() {
            members.insert(e_idx, Positions::All);
        } else {
            let p: usize = fields[2]
                .parse()
                .map_err(|_| AblateError::Parse(format!("bad token position `{}`", fields[2])))?;
            match members.entry(e_idx).or_insert_with(|| Positions::Specific(BTreeSet::new())) {
                Positions::Specific(set) => {
                    set.insert(p);
                }
                Positions::All => {
                    return Err(AblateError::Parse(format!(
                        "edge {src}->{dst} listed both with and without positions"
                    )))
                }
            }
        }
    }
    let c = Circuit {
        granularity: Granularity::Edges,
        members,
    };
    c.validate(model)?;
    Ok(c)
}

// ---------------------------------------------------------------------------
// Scores, ROC, reports
// ---------------------------------------------------------------------------

/// Score map CSV: `edge,src,dst,token_pos,score`. Node score maps use the
/// source index and name with an empty destination.
pub fn scores_to_csv(model: &PatchableModel, scores: &ScoreMap) -> Result<String> {
    scores.validate(model)?;
    let mut out = String::from("edge,src,dst,token_pos,score\n");
    match scores.granularity {
        Granularity::Edges => {
            for (e_idx, s) in scores.scores.iter().enumerate() {
                let (src, dst) = model.edge_endpoints(e_idx);
                out.push_str(&format!("{e_idx},{src},{dst},,{s:.17e}\n"));
            }
        }
        Granularity::Nodes => {
            for (s_idx, s) in scores.scores.iter().enumerate() {
                let src = model.sources[s_idx];
                out.push_str(&format!("{s_idx},{src},,,{s:.17e}\n"));
            }
        }
    }
    Ok(out)
}

/// Parse a score map CSV produced by [`scores_to_csv`].
pub fn scores_from_csv(model: &PatchableModel, csv: &str) -> Result<ScoreMap> {
    let mut lines = csv.lines();
    match lines.next() {
        Some("edge,src,dst,token_pos,score") => {}
        other => return Err(AblateError::Parse(format!("bad scores header: {other:?}"))),
    }
    let mut rows: Vec<(usize, bool, f64)> = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(AblateError::Parse(format!("scores line {}: `{line}`", n + 2)));
        }
        let idx: usize = fields[0]
            .parse()
            .map_err(|_| AblateError::Parse(format!("bad index `{}`", fields[0])))?;
        let score: f64 = fields[4]
            .parse()
            .map_err(|_| AblateError::Parse(format!("bad score `{}`", fields[4])))?;
        rows.push((idx, fields[2].is_empty(), score));
    }
    if rows.is_empty() {
        return Err(AblateError::Parse("empty score file".into()));
    }
    let node_level = rows[0].1;
    let (granularity, expected) = if node_level {
        (Granularity::Nodes, model.sources.len())
    } else {
        (Granularity::Edges, model.n_edges())
    };
    let mut scores = vec![f64::NAN; expected];
    for (idx, is_node, score) in rows {
        if is_node != node_level {
            return Err(AblateError::Parse("mixed edge and node rows".into()));
        }
        if idx >= expected {
            return Err(AblateError::Parse(format!("index {idx} out of range")));
        }
        scores[idx] = score;
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(AblateError::Parse("score file does not cover every component".into()));
    }
    let sm = ScoreMap {
        granularity,
        scores,
        algorithm: "file".into(),
        task: "file".into(),
    };
    sm.validate(model)?;
    Ok(sm)
}

pub fn roc_to_csv(curve: &RocCurve) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
    }
    out
}

/// Per-prompt metric CSV: `prompt,value`.
pub fn per_prompt_csv(values: &[f64]) -> String {
    let mut out = String::from("prompt,value\n");
    for (i, v) in values.iter().enumerate() {
        out.push_str(&format!("{i},{v:.17e}\n"));
    }
    out
}

pub fn report_to_json(report: &FaithfulnessReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

/// Run manifest: resolved config, content hashes of every emitted file,
/// and a completion flag. The timestamp is the only nondeterministic field
/// in any output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub timestamp: String,
    pub config: BTreeMap<String, String>,
    /// file name -> sha256 hex of contents
    pub files: BTreeMap<String, String>,
    pub complete: bool,
    pub notes: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn manifest_to_json(m: &Manifest) -> Result<String> {
    Ok(serde_json::to_string_pretty(m)? + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::forge_xproportion;
    use crate::graph::build_model;

    #[test]
    fn model_json_roundtrip_and_deterministic() {
        let b = forge_xproportion().unwrap();
        let json = model_to_json(&b.model.spec).unwrap();
        let back = model_from_json(&json).unwrap();
        assert_eq!(back, b.model.spec);
        assert_eq!(model_to_json(&back).unwrap(), json);
        // sorted keys: "d_head" precedes "d_mlp" precedes "d_model"
        let dh = json.find("d_head").unwrap();
        let dm = json.find("d_mlp").unwrap();
        assert!(dh < dm);
    }

    #[test]
    fn circuit_csv_roundtrip() {
        let b = forge_xproportion().unwrap();
        let c = &b.resample_ablation_circuit;
        let csv = circuit_to_csv(&b.model, c).unwrap();
        let back = circuit_from_csv(&b.model, &csv).unwrap();
        assert_eq!(&back, c);
    }

    #[test]
    fn circuit_csv_with_positions_roundtrip() {
        use std::collections::BTreeSet;
        let b = forge_xproportion().unwrap();
        let mut c = Circuit::edges([0, 5]);
        c.members.insert(
            7,
            Positions::Specific([1usize, 3].into_iter().collect::<BTreeSet<_>>()),
        );
        let csv = circuit_to_csv(&b.model, &c).unwrap();
        let back = circuit_from_csv(&b.model, &csv).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_circuit_rows_rejected() {
        let b = forge_xproportion().unwrap();
        assert!(circuit_from_csv(&b.model, "wrong,header\n").is_err());
        assert!(circuit_from_csv(&b.model, "src,dst,token_pos\nbogus,mlp_in.0,\n").is_err());
        // edge that does not exist (wrong direction)
        assert!(circuit_from_csv(&b.model, "src,dst,token_pos\nmlp.1,q.0.0,\n").is_err());
    }

    #[test]
    fn corrupted_weight_blob_rejected() {
        let b = forge_xproportion().unwrap();
        let json = model_to_json(&b.model.spec).unwrap();
        let bad = json.replacen("\"shape\": [\n", "\"shape\": [\n        999,\n", 1);
        assert!(model_from_json(&bad).is_err());
        let spec2 = model_from_json(&json).unwrap();
        assert!(build_model(spec2).is_ok());
    }

    #[test]
    fn scores_csv_roundtrip() {
        use crate::discovery::ScoreMap;
        let b = forge_xproportion().unwrap();
        let sm = ScoreMap {
            granularity: Granularity::Edges,
            scores: (0..b.model.n_edges()).map(|e| e as f64 * 0.25).collect(),
            algorithm: "t".into(),
            task: "t".into(),
        };
        let csv = scores_to_csv(&b.model, &sm).unwrap();
        let back = scores_from_csv(&b.model, &csv).unwrap();
        assert_eq!(back.scores, sm.scores);
        assert_eq!(back.granularity, sm.granularity);
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
