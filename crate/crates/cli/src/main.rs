//! `ablate`: build the toy task models, run circuit discovery, measure
//! faithfulness under a chosen ablation methodology, and compute ROC
//! curves against ground-truth circuits.
//!
//! All outputs are deterministic given the config and seeds; the only
//! nondeterministic field is the manifest timestamp.

mod config;

use ablate_core::ablation::{
    build_donor_cache, run_ablated, AblationSpec, AblationValue, Component, Direction, TargetSet,
    TokenPositions, DEFAULT_NOISE_SIGMA,
};
use ablate_core::discovery::{
    acdc_sweep, hisp, subnetwork_probing, DiscoveryMetric,
};
use ablate_core::forge::{forge_task, gen_dataset, GroundTruthBundle, Task};
use ablate_core::graph::{complement, Circuit, Granularity, PatchableModel};
use ablate_core::metrics::{kl_divergence_per_prompt, mse_per_prompt, FaithfulnessReport};
use ablate_core::roc::{roc_curve, roc_from_scores, RocCurve};
use ablate_core::serial;
use ablate_core::tensor::Tensor;
use clap::{Parser, Subcommand};
use config::Config;
use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

#[derive(Parser)]
#[command(name = "ablate", version, about = "Circuit ablation and faithfulness measurement on toy transformers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Path to a key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `dataset.seed` config key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing). Default: ./out
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a toy task bundle: model weights and both ground-truth circuits.
    Forge,
    /// Run a discovery algorithm and score it against a ground truth.
    Discover,
    /// Measure faithfulness of a circuit under an ablation methodology.
    Evaluate,
    /// Compute a ROC curve from a score file and a truth circuit.
    Roc,
    /// Time edge patching across patch-set sizes.
    Bench,
    /// Run the built-in invariant checks.
    Selftest,
}

/// Collects output files, then writes them with a manifest.
struct Emitter {
    out_dir: PathBuf,
    files: Vec<(String, String)>,
}

impl Emitter {
    fn add(&mut self, name: &str, content: String) {
        self.files.push((name.to_string(), content));
    }

    fn finish(self, cfg: &Config, mut notes: Vec<String>, complete: bool) -> Result<(), String> {
        std::fs::create_dir_all(&self.out_dir)
            .map_err(|e| format!("cannot create {}: {e}", self.out_dir.display()))?;
        let mut hashes = std::collections::BTreeMap::new();
        for (name, content) in &self.files {
            let path = self.out_dir.join(name);
            std::fs::write(&path, content).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
            hashes.insert(name.clone(), serial::sha256_hex(content.as_bytes()));
        }
        if !complete {
            notes.push("partial output: the run did not complete".into());
        }
        let manifest = serial::Manifest {
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs().to_string())
                .unwrap_or_default(),
            config: cfg.resolved(),
            files: hashes,
            complete,
            notes,
        };
        let json = serial::manifest_to_json(&manifest).map_err(|e| e.to_string())?;
        std::fs::write(self.out_dir.join("manifest.json"), json)
            .map_err(|e| format!("cannot write manifest: {e}"))?;
        Ok(())
    }
}

const TIE_NOTE: &str =
    "roc tie handling: pessimistic (tied non-truth edges enter before tied truth edges)";

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(text) => match Config::parse(&text) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            },
            Err(e) => return fail(&format!("cannot read {}: {e}", path.display())),
        },
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("dataset.seed", seed.to_string());
    }
    let out_dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let mut emitter = Emitter { out_dir, files: Vec::new() };

    let result = match cli.cmd {
        Cmd::Forge => cmd_forge(&cfg, &mut emitter),
        Cmd::Discover => cmd_discover(&cfg, &mut emitter),
        Cmd::Evaluate => cmd_evaluate(&cfg, &mut emitter),
        Cmd::Roc => cmd_roc(&cfg, &mut emitter),
        Cmd::Bench => cmd_bench(&cfg, &mut emitter),
        Cmd::Selftest => return run_selftest(),
    };
    match result {
        Ok(notes) => match emitter.finish(&cfg, notes, true) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(&e),
        },
        Err(e) => {
            // flag partial outputs in the manifest, then exit nonzero
            let _ = emitter.finish(&cfg, vec![format!("error: {e}")], false);
            fail(&e)
        }
    }
}

fn fail(msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::FAILURE
}

fn load_bundle(cfg: &Config) -> Result<GroundTruthBundle, String> {
    let task: Task = cfg.require("task")?.parse().map_err(|e| format!("{e}"))?;
    forge_task(task).map_err(|e| e.to_string())
}

fn dataset(cfg: &Config, b: &GroundTruthBundle) -> Result<ablate_core::data::PromptPairBatch, String> {
    let n = cfg.usize_or("dataset.n", 30)?;
    let seed = cfg.u64_or("dataset.seed", 0)?;
    gen_dataset(b.task, &b.model, &b.oracle, n, seed).map_err(|e| e.to_string())
}

fn default_div_metric(task: Task) -> DiscoveryMetric {
    match task {
        Task::XProportion => DiscoveryMetric::MseToFull,
        Task::Reverse => DiscoveryMetric::Kl,
    }
}

fn default_grad_metric(task: Task) -> DiscoveryMetric {
    match task {
        Task::XProportion => DiscoveryMetric::MseToCorrupt,
        Task::Reverse => DiscoveryMetric::LogitDiff,
    }
}

fn truth_set(name: &str, b: &GroundTruthBundle, model: &PatchableModel) -> Result<BTreeSet<usize>, String> {
    match name {
        "resample" => Ok(b.resample_ablation_circuit.member_set()),
        "zero" => Ok(b.zero_ablation_circuit.member_set()),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {path}: {e}"))?;
            let c = serial::circuit_from_csv(model, &text).map_err(|e| e.to_string())?;
            Ok(c.member_set())
        }
    }
}

// ---------------------------------------------------------------------------
// forge
// ---------------------------------------------------------------------------

fn cmd_forge(cfg: &Config, em: &mut Emitter) -> Result<Vec<String>, String> {
    cfg.check_keys(&["task", "dataset.seed"])?;
    let b = load_bundle(cfg)?;
    em.add("model.json", serial::model_to_json(&b.model.spec).map_err(|e| e.to_string())?);
    em.add(
        "circuit_zero.csv",
        serial::circuit_to_csv(&b.model, &b.zero_ablation_circuit).map_err(|e| e.to_string())?,
    );
    em.add(
        "circuit_resample.csv",
        serial::circuit_to_csv(&b.model, &b.resample_ablation_circuit).map_err(|e| e.to_string())?,
    );
    Ok(vec![format!("task: {}", b.task.name())])
}

// ---------------------------------------------------------------------------
// discover
// ---------------------------------------------------------------------------

fn cmd_discover(cfg: &Config, em: &mut Emitter) -> Result<Vec<String>, String> {
    cfg.check_keys(&[
        "task", "algorithm", "metric", "truth", "dataset.n", "dataset.seed",
        "acdc.thresholds", "sp.lambda", "sp.steps", "sp.lr",
    ])?;
    let b = load_bundle(cfg)?;
    let batch = dataset(cfg, &b)?;
    let spec = AblationSpec::resample_edges();
    let algorithm = cfg.str_or("algorithm", "acdc");
    let truth_name = cfg.str_or("truth", "resample");
    let truth = truth_set(&truth_name, &b, &b.model)?;
    let mut notes = vec![TIE_NOTE.to_string()];

    let curve: RocCurve = match algorithm.as_str() {
        "acdc" => {
            let metric: DiscoveryMetric = match cfg.get("metric") {
                Some(m) => m.parse().map_err(|e| format!("{e}"))?,
                None => default_div_metric(b.task),
            };
            let thresholds = cfg.f64_list_or("acdc.thresholds", &[0.0, 1e-6, 1e6])?;
            let seq = acdc_sweep(&b.model, &batch, &spec, metric, &thresholds)
                .map_err(|e| e.to_string())?;
            for (i, (t, c)) in seq.entries.iter().enumerate() {
                em.add(
                    &format!("circuit_{i:02}.csv"),
                    serial::circuit_to_csv(&b.model, c).map_err(|e| e.to_string())?,
                );
                notes.push(format!("circuit_{i:02}.csv: threshold {t}"));
            }
            roc_curve(&seq, &truth, b.model.n_edges()).map_err(|e| e.to_string())?
        }
        "sp" | "hisp" => {
            let scores = if algorithm == "sp" {
                let metric: DiscoveryMetric = match cfg.get("metric") {
                    Some(m) => m.parse().map_err(|e| format!("{e}"))?,
                    None => default_div_metric(b.task),
                };
                subnetwork_probing(
                    &b.model,
                    &batch,
                    &spec,
                    metric,
                    Granularity::Edges,
                    cfg.f64_or("sp.lambda", 1.0)?,
                    cfg.usize_or("sp.steps", 200)?,
                    cfg.f64_or("sp.lr", 0.1)?,
                )
                .map_err(|e| e.to_string())?
            } else {
                let metric: DiscoveryMetric = match cfg.get("metric") {
                    Some(m) => m.parse().map_err(|e| format!("{e}"))?,
                    None => default_grad_metric(b.task),
                };
                hisp(&b.model, &batch, &spec, metric, Granularity::Edges)
                    .map_err(|e| e.to_string())?
            };
            em.add(
                "scores.csv",
                serial::scores_to_csv(&b.model, &scores).map_err(|e| e.to_string())?,
            );
            roc_from_scores(&scores, &truth).map_err(|e| e.to_string())?
        }
        other => return Err(format!("unknown algorithm `{other}` (acdc, sp, hisp)")),
    };
    em.add("roc.csv", serial::roc_to_csv(&curve));
    notes.push(format!("truth: {truth_name}"));
    notes.push(format!("auc: {}", curve.auc));
    println!("{} vs {truth_name} truth: AUC {}", algorithm, curve.auc);
    Ok(notes)
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn parse_ablation_spec(cfg: &Config) -> Result<AblationSpec, String> {
    let component = match cfg.str_or("ablation.component", "edge").as_str() {
        "edge" => Component::Edge,
        "node" => Component::Node,
        "branch" => Component::Branch,
        other => return Err(format!("unknown ablation.component `{other}`")),
    };
    let value = match cfg.str_or("ablation.value", "resample").as_str() {
        "zero" => AblationValue::Zero,
        "resample" => AblationValue::Resample,
        "mean" => AblationValue::Mean { per_position: true },
        "mean_pooled" => AblationValue::Mean { per_position: false },
        "noise" => AblationValue::GaussianNoise {
            sigma: cfg.f64_or("ablation.noise_sigma", DEFAULT_NOISE_SIGMA)?,
            seed: cfg.u64_or("ablation.noise_seed", 0)?,
        },
        other => return Err(format!("unknown ablation.value `{other}`")),
    };
    let token_positions = match cfg.str_or("ablation.positions", "all").as_str() {
        "all" => TokenPositions::All,
        "circuit" => TokenPositions::CircuitSpecific,
        other => return Err(format!("unknown ablation.positions `{other}`")),
    };
    let direction = match cfg.str_or("ablation.direction", "ablate").as_str() {
        "ablate" => Direction::AblateClean,
        "restore" => Direction::RestoreClean,
        other => return Err(format!("unknown ablation.direction `{other}`")),
    };
    let set = match cfg.str_or("ablation.set", "complement").as_str() {
        "circuit" => TargetSet::Circuit,
        "complement" => TargetSet::Complement,
        other => return Err(format!("unknown ablation.set `{other}`")),
    };
    Ok(AblationSpec { component, value, token_positions, direction, set })
}

fn load_circuit(name: &str, b: &GroundTruthBundle, node_level: bool) -> Result<Circuit, String> {
    let edge_circuit = match name {
        "empty" => Circuit::empty_edges(),
        "full" => Circuit::full_edges(&b.model),
        "resample_truth" => b.resample_ablation_circuit.clone(),
        "zero_truth" => b.zero_ablation_circuit.clone(),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {path}: {e}"))?;
            serial::circuit_from_csv(&b.model, &text).map_err(|e| e.to_string())?
        }
    };
    if !node_level {
        return Ok(edge_circuit);
    }
    // node-level evaluation of a named circuit: include every source that
    // occurs as an endpoint of a member edge
    let mut node = Circuit::nodes([]);
    for &e in &edge_circuit.member_set() {
        let src = b.model.edges[e].src;
        node.members.insert(src, ablate_core::graph::Positions::All);
    }
    Ok(node)
}

fn cmd_evaluate(cfg: &Config, em: &mut Emitter) -> Result<Vec<String>, String> {
    cfg.check_keys(&[
        "task", "circuit", "metric", "dataset.n", "dataset.seed",
        "ablation.component", "ablation.value", "ablation.positions",
        "ablation.direction", "ablation.set", "ablation.noise_sigma", "ablation.noise_seed",
    ])?;
    let b = load_bundle(cfg)?;
    let batch = dataset(cfg, &b)?;
    let spec = parse_ablation_spec(cfg)?;
    let circuit = load_circuit(
        &cfg.str_or("circuit", "resample_truth"),
        &b,
        spec.component == Component::Node,
    )?;
    let metric = cfg.str_or(
        "metric",
        match b.task {
            Task::XProportion => "mse",
            Task::Reverse => "kl",
        },
    );

    let donors = build_donor_cache(&b.model, &spec.value, &batch, spec.direction)
        .map_err(|e| e.to_string())?;
    let outs = run_ablated(&b.model, &circuit, &spec, &batch, &donors).map_err(|e| e.to_string())?;
    let full: Vec<Tensor> = batch
        .pairs
        .iter()
        .map(|p| Ok(b.model.forward(&p.clean).map_err(|e| e.to_string())?.output))
        .collect::<Result<_, String>>()?;
    let ablated: Vec<Tensor> = outs.into_iter().map(|o| o.output).collect();
    let per_prompt = match metric.as_str() {
        "kl" => kl_divergence_per_prompt(&ablated, &full).map_err(|e| e.to_string())?,
        "mse" => mse_per_prompt(&ablated, &full).map_err(|e| e.to_string())?,
        other => return Err(format!("unknown metric `{other}` (kl, mse)")),
    };
    let report = FaithfulnessReport::new(&metric, per_prompt.clone(), vec![], spec.fingerprint())
        .map_err(|e| e.to_string())?;
    em.add("per_prompt.csv", serial::per_prompt_csv(&per_prompt));
    em.add("faithfulness.json", serial::report_to_json(&report).map_err(|e| e.to_string())?);
    println!(
        "{} over {} prompts: mean {:.6e}, median {:.6e}",
        metric,
        report.per_prompt.len(),
        report.aggregate.mean,
        report.aggregate.median
    );
    Ok(vec![format!("circuit members: {}", circuit.len())])
}

// ---------------------------------------------------------------------------
// roc
// ---------------------------------------------------------------------------

fn cmd_roc(cfg: &Config, em: &mut Emitter) -> Result<Vec<String>, String> {
    cfg.check_keys(&["task", "scores", "truth", "dataset.seed"])?;
    let b = load_bundle(cfg)?;
    let scores_path = cfg.require("scores")?;
    let text = std::fs::read_to_string(&scores_path)
        .map_err(|e| format!("cannot read {scores_path}: {e}"))?;
    let scores = serial::scores_from_csv(&b.model, &text).map_err(|e| e.to_string())?;
    let truth_name = cfg.str_or("truth", "resample");
    let truth = truth_set(&truth_name, &b, &b.model)?;
    let curve = roc_from_scores(&scores, &truth).map_err(|e| e.to_string())?;
    em.add("roc.csv", serial::roc_to_csv(&curve));
    println!("AUC {} vs {truth_name} truth", curve.auc);
    Ok(vec![TIE_NOTE.to_string(), format!("truth: {truth_name}"), format!("auc: {}", curve.auc)])
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

fn cmd_bench(cfg: &Config, em: &mut Emitter) -> Result<Vec<String>, String> {
    cfg.check_keys(&["task", "sizes", "rounds", "reps", "dataset.n", "dataset.seed"])?;
    let b = load_bundle(cfg)?;
    let batch = dataset(cfg, &b)?;
    let sizes = cfg.usize_list_or("sizes", &[1, 5, 11, 22])?;
    let rounds = cfg.usize_or("rounds", 9)?;
    let reps = cfg.usize_or("reps", 10)?;
    let spec = AblationSpec {
        set: TargetSet::Circuit,
        ..AblationSpec::resample_edges()
    };
    let donors = build_donor_cache(&b.model, &spec.value, &batch, spec.direction)
        .map_err(|e| e.to_string())?;
    for &k in &sizes {
        if k > b.model.n_edges() {
            return Err(format!("patch size {k} exceeds edge count {}", b.model.n_edges()));
        }
    }
    let circuits: Vec<Circuit> = sizes.iter().map(|&k| Circuit::edges(0..k)).collect();
    for c in &circuits {
        run_ablated(&b.model, c, &spec, &batch, &donors).map_err(|e| e.to_string())?;
    }
    let mut best = vec![f64::INFINITY; sizes.len()];
    for _ in 0..rounds {
        for (i, c) in circuits.iter().enumerate() {
            let start = Instant::now();
            for _ in 0..reps {
                run_ablated(&b.model, c, &spec, &batch, &donors).map_err(|e| e.to_string())?;
            }
            best[i] = best[i].min(start.elapsed().as_secs_f64());
        }
    }
    let mut csv = String::from("patched_edges,seconds\n");
    for (k, s) in sizes.iter().zip(&best) {
        csv.push_str(&format!("{k},{s}\n"));
        println!("patch size {k}: {s:.6}s (best of {rounds} rounds x {reps} reps)");
    }
    em.add("timing.csv", csv);
    let max = best.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = best.iter().cloned().fold(f64::INFINITY, f64::min);
    let ratio = max / min;
    println!("max/min ratio {ratio:.3}");
    Ok(vec![
        "timing.csv holds wall-clock measurements and is not reproducible byte-for-byte".into(),
        format!("max/min ratio: {ratio}"),
    ])
}

// ---------------------------------------------------------------------------
// selftest
// ---------------------------------------------------------------------------

fn run_selftest() -> ExitCode {
    match selftest_impl() {
        Ok(()) => {
            println!("selftest: ok");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn selftest_impl() -> Result<(), String> {
    use ablate_core::ablation::run_ablated_naive;
    use ablate_core::testkit::random_model;

    // forging runs the exhaustive behavioral self-check internally
    for task in [Task::XProportion, Task::Reverse] {
        let b = forge_task(task).map_err(|e| e.to_string())?;
        println!("selftest: {} bundle ok ({} edges)", task.name(), b.model.n_edges());
        // circuit files round-trip
        for c in [&b.zero_ablation_circuit, &b.resample_ablation_circuit] {
            let csv = serial::circuit_to_csv(&b.model, c).map_err(|e| e.to_string())?;
            let back = serial::circuit_from_csv(&b.model, &csv).map_err(|e| e.to_string())?;
            if &back != c {
                return Err("circuit round-trip mismatch".into());
            }
        }
        // complement of the complement is the identity
        let comp = complement(&b.resample_ablation_circuit, &b.model).map_err(|e| e.to_string())?;
        let back = complement(&comp, &b.model).map_err(|e| e.to_string())?;
        if back.member_set() != b.resample_ablation_circuit.member_set() {
            return Err("complement involution violated".into());
        }
        // model weights round-trip
        let json = serial::model_to_json(&b.model.spec).map_err(|e| e.to_string())?;
        if serial::model_from_json(&json).map_err(|e| e.to_string())? != b.model.spec {
            return Err("model weight round-trip mismatch".into());
        }
    }

    // fast path vs reference on a few seeded triples
    use ablate_core::data::{AnswerSpec, PromptPair, PromptPairBatch};
    for trial in 0..5u64 {
        let model = random_model(trial, 2, 2);
        let vocab = model.spec.vocab.len();
        let tok = |i: u64| ((trial * 7 + i * 3 + 1) as usize) % vocab;
        let batch = PromptPairBatch {
            pairs: vec![PromptPair {
                clean: (0..4).map(tok).collect(),
                corrupt: (0..4).map(|i| tok(i + 2)).collect(),
                answer: AnswerSpec::Regression {
                    targets: Tensor::zeros(vec![4, 1]),
                    incorrect: None,
                },
            }],
        };
        let spec = AblationSpec::resample_edges();
        let donors = build_donor_cache(&model, &spec.value, &batch, spec.direction)
            .map_err(|e| e.to_string())?;
        let mut circuit = Circuit::empty_edges();
        for e in 0..model.n_edges() {
            if (e as u64 + trial) % 2 == 0 {
                circuit.members.insert(e, ablate_core::graph::Positions::All);
            }
        }
        let fast = run_ablated(&model, &circuit, &spec, &batch, &donors).map_err(|e| e.to_string())?;
        let naive = run_ablated_naive(&model, &circuit, &spec, &batch, &donors).map_err(|e| e.to_string())?;
        let worst = fast[0]
            .output
            .data
            .iter()
            .zip(&naive[0].data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        if worst > 1e-9 {
            return Err(format!("fast/reference divergence {worst}"));
        }
    }
    println!("selftest: edge patching matches reference implementation");
    Ok(())
}
