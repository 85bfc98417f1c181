//! Fixtures shared by the criterion benches in `benches/`.

use prevalence_core::pipeline::{synthetic_run, SyntheticRun};
use prevalence_core::store::{quantize, ParticleBlock, ParticleStore, StoreParams};
use prevalence_core::{GridConfig, GridIndex, PipelineConfig};

/// Desk-grid synthetic run with `particles` particles thinned from
/// `ensemble` draws and `replicates` weight replicates.
pub fn desk_run(ensemble: usize, particles: usize, replicates: usize) -> SyntheticRun {
    let mut config = PipelineConfig::desk();
    config.generation.ensemble_size = ensemble;
    config.generation.particles = particles;
    config.generation.weight_replicates = replicates;
    config.generation.survey_size = 20_000;
    synthetic_run(&config, 1, None).expect("desk run")
}

/// Store over an arbitrary grid filled with cheap deterministic particles;
/// only the memory layout matters for aggregation timing.
pub fn filled_store(config: GridConfig, particles: usize) -> ParticleStore {
    let grid = GridIndex::new(config.clone()).expect("valid grid");
    let n_d = config.diseases.len();
    let blocks = (0..grid.len())
        .map(|cell| ParticleBlock {
            cell,
            probabilities: (0..n_d * particles).map(|k| quantize(((cell + 13 * k) % 997) as f64 / 997.0)).collect(),
            weights: (0..particles).map(|b| 1.0 + ((cell + b) % 7) as f32).collect(),
            mean_weight: 4.0,
        })
        .collect();
    let params = StoreParams { particles, original_size: particles, stride: 1, replicates: particles, seed: 0 };
    ParticleStore::from_blocks(config, params, blocks, None).expect("consistent blocks")
}
