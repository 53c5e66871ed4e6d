//! The seeded planted-object suite shared by tests, the acceptance target and
//! the command line.

use super::{build_toy, plant_objects, synth_image, PlantSpec, ToyConfig, ToyModel};
use crate::decoder::{collect_visual_hidden, ModelBackend, VisualInput};
use crate::error::Result;
use crate::revision::build_sas_table;

/// "picture shows"
pub const FIXTURE_PROMPT: [u32; 2] = [23, 24];
/// "dog", present in the image.
pub const FIXTURE_GROUNDED: u32 = 31;
/// "cat", absent but preferred by the final layer.
pub const FIXTURE_DISTRACTOR: u32 = 32;
/// Image seeds are offset from model seeds so the two streams never coincide.
pub const IMAGE_SEED_OFFSET: u64 = 1000;

#[derive(Debug, Clone)]
pub struct PlantedCase {
    pub seed: u64,
    pub model: ToyModel,
    pub visual: VisualInput,
    pub prompt: Vec<u32>,
    pub spec: PlantSpec,
}

pub fn default_spec(designated_step: usize) -> PlantSpec {
    PlantSpec {
        grounded_token: FIXTURE_GROUNDED,
        distractor_token: FIXTURE_DISTRACTOR,
        strength: 1.0,
        designated_step,
        region: None,
    }
}

/// Suite member `seed` with the default plant at step 0.
pub fn planted_case(seed: u64) -> Result<PlantedCase> {
    planted_case_with(seed, default_spec(0))
}

pub fn planted_case_with(seed: u64, spec: PlantSpec) -> Result<PlantedCase> {
    let config = ToyConfig::with_seed(seed);
    let model = plant_objects(&build_toy(config.clone())?, spec.clone())?;
    Ok(PlantedCase {
        seed,
        visual: VisualInput::Embeddings(synth_image(&config, IMAGE_SEED_OFFSET + seed)),
        model,
        prompt: FIXTURE_PROMPT.to_vec(),
        spec,
    })
}

impl PlantedCase {
    /// Mean over `layers` of SAS(grounded) - SAS(distractor).
    pub fn sas_gap(&self, layers: &[usize], n_image_tokens: usize) -> Result<f64> {
        let (session, _) = self.model.prefill(&self.prompt, &self.visual)?;
        let hidden = collect_visual_hidden(&self.model, &session, layers)?;
        let table = build_sas_table(&hidden, self.model.unembedding(), layers, self.model.dims().n_layers)?;
        let mut total = 0.0;
        for &l in layers {
            total += table.sas(l, self.spec.grounded_token, n_image_tokens)?
                - table.sas(l, self.spec.distractor_token, n_image_tokens)?;
        }
        Ok(total / layers.len() as f64)
    }
}
