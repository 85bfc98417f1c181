//! The synthetic pipeline end to end, with one run seed fanned out into
//! independent per-stage seeds.

use crate::config::PipelineConfig;
use crate::error::Result;
use crate::grid::GridIndex;
use crate::rng::{derive_seed, stream};
use crate::store::{precompute, ParticleStore, StoredWeights};
use crate::synthetic::{
    draw_posterior_ensemble, generate_margins, generate_survey, generate_truth, DemographicMargins, GroundTruth,
    PosteriorEnsemble, SurveySample,
};
use crate::weights::{DirichletEstimator, WeightEstimator};

/// Per-stage seeds derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSeeds {
    pub truth: u64,
    pub ensemble: u64,
    pub weights: u64,
    pub precompute: u64,
}

impl StageSeeds {
    pub fn from_run(seed: u64) -> Self {
        Self {
            truth: seed,
            ensemble: derive_seed(seed, stream::ENSEMBLE_SEED),
            weights: derive_seed(seed, stream::WEIGHTS_SEED),
            precompute: derive_seed(seed, stream::PRECOMPUTE_SEED),
        }
    }
}

/// Outputs of the generation stage.
#[derive(Debug, Clone)]
pub struct SyntheticInputs {
    pub truth: GroundTruth,
    pub ensemble: PosteriorEnsemble,
    pub margins: DemographicMargins,
    pub survey: SurveySample,
}

pub fn generate_inputs(config: &PipelineConfig, seeds: StageSeeds) -> Result<SyntheticInputs> {
    let g = &config.generation;
    let grid = GridIndex::new(config.grid.clone())?;
    let truth = generate_truth(config, seeds.truth)?;
    let ensemble = draw_posterior_ensemble(&truth, g.ensemble_size, g.dispersion, seeds.ensemble)?;
    let margins = generate_margins(&grid, g.margins, seeds.truth)?;
    let survey = generate_survey(&truth, &grid, &margins, g.survey_size, seeds.truth)?;
    Ok(SyntheticInputs { truth, ensemble, margins, survey })
}

pub fn estimate_weights(
    grid: &GridIndex,
    survey: &SurveySample,
    margins: &DemographicMargins,
    prior_alpha: f64,
    replicates: usize,
    seed: u64,
) -> Result<StoredWeights> {
    let table = DirichletEstimator { prior_alpha, replicates }.estimate(survey, grid, seed)?;
    let weights = StoredWeights { margins: margins.clone(), table };
    weights.joint(grid)?;
    Ok(weights)
}

/// A complete synthetic run held in memory.
#[derive(Debug, Clone)]
pub struct SyntheticRun {
    pub config: PipelineConfig,
    pub seeds: StageSeeds,
    pub inputs: SyntheticInputs,
    pub weights: StoredWeights,
    pub store: ParticleStore,
}

/// Generate, estimate weights and precompute with settings from `config`.
pub fn synthetic_run(config: &PipelineConfig, seed: u64, threads: Option<usize>) -> Result<SyntheticRun> {
    let seeds = StageSeeds::from_run(seed);
    let g = &config.generation;
    let grid = GridIndex::new(config.grid.clone())?;
    let inputs = generate_inputs(config, seeds)?;
    let weights = estimate_weights(&grid, &inputs.survey, &inputs.margins, g.prior_alpha, g.weight_replicates, seeds.weights)?;
    let store = precompute(&config.grid, &inputs.ensemble, &weights, g.particles, seeds.precompute, threads)?;
    Ok(SyntheticRun { config: config.clone(), seeds, inputs, weights, store })
}
