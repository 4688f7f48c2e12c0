//! Shared fixtures for the patching benchmarks.

use ablate_core::ablation::{build_donor_cache, AblationSpec, DonorCache, TargetSet};
use ablate_core::data::PromptPairBatch;
use ablate_core::forge::{forge_xproportion, gen_dataset, Task};
use ablate_core::graph::PatchableModel;

pub struct PatchingFixture {
    pub model: PatchableModel,
    pub batch: PromptPairBatch,
    pub spec: AblationSpec,
    pub donors: DonorCache,
}

/// The 23-edge X-Proportion model with a fixed resample donor cache,
/// ready for timing `run_ablated` across patch-set sizes.
pub fn patching_fixture() -> PatchingFixture {
    let b = forge_xproportion().expect("forge");
    let batch = gen_dataset(Task::XProportion, &b.model, &b.oracle, 20, 17).expect("dataset");
    let spec = AblationSpec {
        set: TargetSet::Circuit,
        ..AblationSpec::resample_edges()
    };
    let donors = build_donor_cache(&b.model, &spec.value, &batch, spec.direction).expect("donors");
    PatchingFixture {
        model: b.model,
        batch,
        spec,
        donors,
    }
}
