//! Integration tests for the ablation engine: identity cases, the
//! fast-path-vs-reference equivalence, complement duality, donor
//! arithmetic, and the treeified branch oracle.

use ablate_core::ablation::{
    build_donor_cache, build_patch_plan, branch_ablate_oracle, run_ablated, run_ablated_naive,
    AblationSpec, AblationValue, Component, Direction, TargetSet, TokenPositions,
};
use ablate_core::data::{AnswerSpec, PromptPair, PromptPairBatch};
use ablate_core::graph::{complement, Circuit, NodeId, PatchPlan, Positions};
use ablate_core::tensor::Tensor;
use ablate_core::testkit::random_model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, len: usize, vocab: usize) -> PromptPairBatch {
    PromptPairBatch {
        pairs: (0..n)
            .map(|_| PromptPair {
                clean: random_tokens(rng, len, vocab),
                corrupt: random_tokens(rng, len, vocab),
                answer: AnswerSpec::Regression {
                    targets: Tensor::zeros(vec![len, 1]),
                    incorrect: None,
                },
            })
            .collect(),
    }
}

fn random_edge_circuit(rng: &mut ChaCha8Rng, n_edges: usize, seq_len: usize) -> Circuit {
    let mut c = Circuit::empty_edges();
    for e in 0..n_edges {
        if rng.gen_bool(0.5) {
            if rng.gen_bool(0.25) {
                let set: BTreeSet<usize> =
                    (0..seq_len).filter(|_| rng.gen_bool(0.5)).collect();
                if set.is_empty() {
                    continue;
                }
                c.members.insert(e, Positions::Specific(set));
            } else {
                c.members.insert(e, Positions::All);
            }
        }
    }
    c
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape, b.shape);
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn empty_patch_plan_is_bit_identical_to_clean() {
    for seed in 0..5 {
        let model = random_model(seed, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let tokens = random_tokens(&mut rng, 5, model.spec.vocab.len());
        let clean = model.forward(&tokens).unwrap();
        let plan = PatchPlan::empty(model.n_edges(), tokens.len());
        assert!(plan.is_noop());
        let patched = model.forward_patched(&tokens, &plan, &[]).unwrap();
        assert_eq!(clean.output.data, patched.output.data);
    }
}

#[test]
fn self_donor_resample_is_identity() {
    // donors drawn from the same prompt the model runs on: patching any set
    // of edges changes nothing
    let model = random_model(3, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tokens = random_tokens(&mut rng, 5, model.spec.vocab.len());
    let batch = PromptPairBatch {
        pairs: vec![PromptPair {
            clean: tokens.clone(),
            corrupt: tokens.clone(),
            answer: AnswerSpec::Regression {
                targets: Tensor::zeros(vec![5, 1]),
                incorrect: None,
            },
        }],
    };
    let donors =
        build_donor_cache(&model, &AblationValue::Resample, &batch, Direction::AblateClean).unwrap();
    let clean = model.forward(&tokens).unwrap();
    for trial in 0..20 {
        let mut rng2 = ChaCha8Rng::seed_from_u64(trial);
        let circuit = random_edge_circuit(&mut rng2, model.n_edges(), 5);
        let spec = AblationSpec {
            token_positions: TokenPositions::CircuitSpecific,
            ..AblationSpec::resample_edges()
        };
        let outs = run_ablated(&model, &circuit, &spec, &batch, &donors).unwrap();
        assert!(max_abs_diff(&clean.output, &outs[0].output) < 1e-9);
    }
}

#[test]
fn complement_duality() {
    // ablating the complement of C targeting Complement == ablating
    // complement(C) targeting Circuit
    let model = random_model(11, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let batch = random_batch(&mut rng, 4, 5, model.spec.vocab.len());
    let donors =
        build_donor_cache(&model, &AblationValue::Resample, &batch, Direction::AblateClean).unwrap();
    for trial in 0..20 {
        let mut rng2 = ChaCha8Rng::seed_from_u64(900 + trial);
        let mut circuit = Circuit::empty_edges();
        for e in 0..model.n_edges() {
            if rng2.gen_bool(0.5) {
                circuit.members.insert(e, Positions::All);
            }
        }
        let comp = complement(&circuit, &model).unwrap();
        let spec_c = AblationSpec {
            set: TargetSet::Complement,
            ..AblationSpec::resample_edges()
        };
        let spec_d = AblationSpec {
            set: TargetSet::Circuit,
            ..AblationSpec::resample_edges()
        };
        let a = run_ablated(&model, &circuit, &spec_c, &batch, &donors).unwrap();
        let b = run_ablated(&model, &comp, &spec_d, &batch, &donors).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.output.data, y.output.data);
        }
    }
}

#[test]
fn fast_path_matches_naive_reference() {
    // 100 random (model, circuit, donor-kind) triples
    let mut rng = ChaCha8Rng::seed_from_u64(5150);
    for trial in 0..100u64 {
        let layers = 1 + (trial % 2) as usize;
        let heads = 1 + (trial % 3) as usize / 2 + 1;
        let model = random_model(trial, layers, heads);
        let batch = random_batch(&mut rng, 2, 4, model.spec.vocab.len());
        let value = match trial % 4 {
            0 => AblationValue::Zero,
            1 => AblationValue::Resample,
            2 => AblationValue::GaussianNoise { sigma: 0.1, seed: trial },
            _ => AblationValue::Mean { per_position: trial % 8 < 4 },
        };
        let direction = if trial % 5 == 0 {
            Direction::RestoreClean
        } else {
            Direction::AblateClean
        };
        let donors = build_donor_cache(&model, &value, &batch, direction).unwrap();
        let circuit = random_edge_circuit(&mut rng, model.n_edges(), 4);
        let spec = AblationSpec {
            component: Component::Edge,
            value,
            token_positions: if trial % 2 == 0 {
                TokenPositions::All
            } else {
                TokenPositions::CircuitSpecific
            },
            direction,
            set: if trial % 3 == 0 {
                TargetSet::Circuit
            } else {
                TargetSet::Complement
            },
        };
        let fast = run_ablated(&model, &circuit, &spec, &batch, &donors).unwrap();
        let naive = run_ablated_naive(&model, &circuit, &spec, &batch, &donors).unwrap();
        for (f, n) in fast.iter().zip(&naive) {
            assert!(
                max_abs_diff(&f.output, n) < 1e-9,
                "trial {trial}: fast/naive divergence {}",
                max_abs_diff(&f.output, n)
            );
        }
    }
}

#[test]
fn node_patching_matches_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for trial in 0..30u64 {
        let model = random_model(trial + 500, 2, 2);
        let batch = random_batch(&mut rng, 2, 4, model.spec.vocab.len());
        let donors = build_donor_cache(
            &model,
            &AblationValue::Resample,
            &batch,
            Direction::AblateClean,
        )
        .unwrap();
        let mut circuit = Circuit::nodes([]);
        for s in 0..model.sources.len() {
            if rng.gen_bool(0.5) {
                circuit.members.insert(s, Positions::All);
            }
        }
        let spec = AblationSpec {
            component: Component::Node,
            ..AblationSpec::resample_edges()
        };
        let fast = run_ablated(&model, &circuit, &spec, &batch, &donors).unwrap();
        let naive = run_ablated_naive(&model, &circuit, &spec, &batch, &donors).unwrap();
        for (f, n) in fast.iter().zip(&naive) {
            assert!(max_abs_diff(&f.output, n) < 1e-9);
        }
    }
}

#[test]
fn branch_oracle_all_kept_is_clean() {
    let model = random_model(19, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let tokens = random_tokens(&mut rng, 5, model.spec.vocab.len());
    let kept: BTreeSet<usize> = (0..model.n_edges()).collect();
    let donor = Tensor::zeros(vec![5, model.spec.d_model]);
    let out = branch_ablate_oracle(&model, &kept, &tokens, &donor).unwrap();
    let clean = model.forward(&tokens).unwrap();
    assert_eq!(out.data, clean.output.data);
}

#[test]
fn branch_oracle_none_kept_runs_on_donor() {
    // with no kept edges every path carries the donor input, so the output
    // is a clean run from the donor embedding
    let model = random_model(23, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let tokens = random_tokens(&mut rng, 5, model.spec.vocab.len());
    let donor_tokens = random_tokens(&mut rng, 5, model.spec.vocab.len());
    let donor_emb = model.embed(&donor_tokens).unwrap();
    let out = branch_ablate_oracle(&model, &BTreeSet::new(), &tokens, &donor_emb).unwrap();
    let donor_run = model.forward(&donor_tokens).unwrap();
    assert!(max_abs_diff(&out, &donor_run.output) < 1e-12);
}

#[test]
fn branch_matches_edge_patching_on_final_layer_edges() {
    // every input-to-output path crosses exactly one edge into the final
    // destination, so branch and edge ablation agree when only those edges
    // are ablated
    for seed in 0..100u64 {
        let model = random_model(seed, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
        let tokens = random_tokens(&mut rng, 4, model.spec.vocab.len());
        let donor_tokens = random_tokens(&mut rng, 4, model.spec.vocab.len());
        let donor_out = model.forward(&donor_tokens).unwrap();
        let donor_emb = model.embed(&donor_tokens).unwrap();

        let out_idx = model.dests.len() - 1;
        let final_edges: Vec<usize> = model.edges_into[out_idx].clone();
        let ablated: BTreeSet<usize> = final_edges
            .iter()
            .copied()
            .filter(|_| rng.gen_bool(0.5))
            .collect();

        let kept: BTreeSet<usize> =
            (0..model.n_edges()).filter(|e| !ablated.contains(e)).collect();
        let branch = branch_ablate_oracle(&model, &kept, &tokens, &donor_emb).unwrap();

        let mut plan = PatchPlan::empty(model.n_edges(), tokens.len());
        for &e in &ablated {
            plan.set_edge(e, true);
        }
        let edge = model
            .forward_patched(&tokens, &plan, &donor_out.cache.src_out)
            .unwrap();
        assert!(
            max_abs_diff(&branch, &edge.output) < 1e-9,
            "seed {seed}: {}",
            max_abs_diff(&branch, &edge.output)
        );
    }
}

#[test]
fn mean_donor_is_arithmetic_mean_of_runs() {
    let model = random_model(29, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let batch = random_batch(&mut rng, 3, 5, model.spec.vocab.len());
    let donors = build_donor_cache(
        &model,
        &AblationValue::Mean { per_position: true },
        &batch,
        Direction::AblateClean,
    )
    .unwrap();
    // manual mean over the corrupt-side source activations
    let runs: Vec<_> = batch
        .pairs
        .iter()
        .map(|p| model.forward(&p.corrupt).unwrap().cache.src_out)
        .collect();
    for s in 0..model.sources.len() {
        let got = &donors.donors(0)[s];
        for i in 0..got.data.len() {
            let want = runs.iter().map(|r| r[s].data[i]).sum::<f64>() / runs.len() as f64;
            assert!((got.data[i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn position_pooled_mean_is_constant_across_positions() {
    let model = random_model(31, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let batch = random_batch(&mut rng, 3, 5, model.spec.vocab.len());
    let donors = build_donor_cache(
        &model,
        &AblationValue::Mean { per_position: false },
        &batch,
        Direction::AblateClean,
    )
    .unwrap();
    for s in 0..model.sources.len() {
        let t = &donors.donors(0)[s];
        for p in 1..t.rows() {
            assert_eq!(t.row(p), t.row(0));
        }
    }
}

#[test]
fn mean_ablation_is_dataset_size_sensitive() {
    // the mean donor over 10 prompts differs from the mean over 100
    let model = random_model(37, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let big = random_batch(&mut rng, 100, 5, model.spec.vocab.len());
    let small = PromptPairBatch {
        pairs: big.pairs[..10].to_vec(),
    };
    let d_small = build_donor_cache(
        &model,
        &AblationValue::Mean { per_position: true },
        &small,
        Direction::AblateClean,
    )
    .unwrap();
    let d_big = build_donor_cache(
        &model,
        &AblationValue::Mean { per_position: true },
        &big,
        Direction::AblateClean,
    )
    .unwrap();
    let mut max = 0.0f64;
    for s in 0..model.sources.len() {
        max = max.max(max_abs_diff(&d_small.donors(0)[s], &d_big.donors(0)[s]));
    }
    assert!(max > 1e-6, "mean donors unexpectedly identical: {max}");
}

#[test]
fn constant_activations_make_mean_ablation_a_noop() {
    // when every prompt is identical, the dataset mean equals the clean
    // activation and mean ablation changes nothing
    let model = random_model(41, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let tokens = random_tokens(&mut rng, 5, model.spec.vocab.len());
    let batch = PromptPairBatch {
        pairs: (0..8)
            .map(|_| PromptPair {
                clean: tokens.clone(),
                corrupt: tokens.clone(),
                answer: AnswerSpec::Regression {
                    targets: Tensor::zeros(vec![5, 1]),
                    incorrect: None,
                },
            })
            .collect(),
    };
    let donors = build_donor_cache(
        &model,
        &AblationValue::Mean { per_position: true },
        &batch,
        Direction::AblateClean,
    )
    .unwrap();
    let spec = AblationSpec {
        value: AblationValue::Mean { per_position: true },
        ..AblationSpec::resample_edges()
    };
    let clean = model.forward(&tokens).unwrap();
    let outs = run_ablated(&model, &Circuit::empty_edges(), &spec, &batch, &donors).unwrap();
    for o in &outs {
        assert!(max_abs_diff(&clean.output, &o.output) < 1e-9);
    }
}

#[test]
fn gaussian_noise_donors_are_seed_deterministic() {
    let model = random_model(43, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let batch = random_batch(&mut rng, 3, 5, model.spec.vocab.len());
    let a = build_donor_cache(
        &model,
        &AblationValue::GaussianNoise { sigma: 0.1, seed: 7 },
        &batch,
        Direction::AblateClean,
    )
    .unwrap();
    let b = build_donor_cache(
        &model,
        &AblationValue::GaussianNoise { sigma: 0.1, seed: 7 },
        &batch,
        Direction::AblateClean,
    )
    .unwrap();
    let c = build_donor_cache(
        &model,
        &AblationValue::GaussianNoise { sigma: 0.1, seed: 8 },
        &batch,
        Direction::AblateClean,
    )
    .unwrap();
    assert_eq!(a.donors(1)[2].data, b.donors(1)[2].data);
    assert_ne!(a.donors(1)[2].data, c.donors(1)[2].data);
}

#[test]
fn circuit_specific_positions_govern_the_plan() {
    // complement ablation with position qualifiers: circuit member at
    // positions {1,3} is patched at {0,2,4}; non-members at all positions
    let model = random_model(47, 1, 1);
    let e_keep = model
        .edge_index(NodeId::Input, NodeId::MlpIn { layer: 0 })
        .unwrap();
    let mut circuit = Circuit::empty_edges();
    circuit.members.insert(
        e_keep,
        Positions::Specific([1usize, 3].into_iter().collect()),
    );
    let spec = AblationSpec {
        token_positions: TokenPositions::CircuitSpecific,
        ..AblationSpec::resample_edges()
    };
    let plan = build_patch_plan(&model, &circuit, &spec, 5).unwrap();
    for p in 0..5 {
        assert_eq!(plan.patched(e_keep, p), p != 1 && p != 3);
    }
    for e in 0..model.n_edges() {
        if e != e_keep {
            for p in 0..5 {
                assert!(plan.patched(e, p));
            }
        }
    }
}

#[test]
fn restore_clean_runs_on_corrupt_side() {
    // restoring every edge from the clean run on the corrupt input
    // reproduces the clean output
    let model = random_model(53, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let batch = random_batch(&mut rng, 3, 5, model.spec.vocab.len());
    let donors = build_donor_cache(
        &model,
        &AblationValue::Resample,
        &batch,
        Direction::RestoreClean,
    )
    .unwrap();
    let spec = AblationSpec {
        direction: Direction::RestoreClean,
        set: TargetSet::Circuit,
        ..AblationSpec::resample_edges()
    };
    let full = Circuit::full_edges(&model);
    let outs = run_ablated(&model, &full, &spec, &batch, &donors).unwrap();
    for (pair, o) in batch.pairs.iter().zip(&outs) {
        let clean = model.forward(&pair.clean).unwrap();
        assert!(max_abs_diff(&clean.output, &o.output) < 1e-9);
    }
}

#[test]
fn wrong_granularity_combinations_rejected() {
    let model = random_model(59, 1, 1);
    let node_circuit = Circuit::nodes([0]);
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    let batch = random_batch(&mut rng, 1, 4, model.spec.vocab.len());
    let donors =
        build_donor_cache(&model, &AblationValue::Zero, &batch, Direction::AblateClean).unwrap();
    let edge_spec = AblationSpec::resample_edges();
    assert!(run_ablated(&model, &node_circuit, &edge_spec, &batch, &donors).is_err());
    let node_spec = AblationSpec {
        component: Component::Node,
        ..AblationSpec::resample_edges()
    };
    assert!(run_ablated(&model, &Circuit::edges([0]), &node_spec, &batch, &donors).is_err());
}
