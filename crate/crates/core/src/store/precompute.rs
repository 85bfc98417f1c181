use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{quantize, ParticleBlock, ParticleStore, StoreParams, StoredWeights};
use crate::config::GridConfig;
use crate::error::{Error, Result};
use crate::grid::GridIndex;
use crate::model::{design_vector, logistic, FieldShape};
use crate::rng::substream;
use crate::synthetic::{EnsembleProvenance, PosteriorEnsemble};
use crate::weights::JointWeights;

/// Evenly strided subsequence of `particles` draws: stride `⌊B/P⌋`, first
/// index 0.
pub fn thin_sample(ensemble: &PosteriorEnsemble, particles: usize) -> Result<PosteriorEnsemble> {
    let available = ensemble.len();
    if particles == 0 {
        return Err(Error::InvalidArgument("particle count must be at least 1".into()));
    }
    if particles > available {
        return Err(Error::ThinningTooLarge { requested: particles, available });
    }
    let stride = available / particles;
    let draws = (0..particles).map(|i| ensemble.draws[i * stride].clone()).collect();
    Ok(PosteriorEnsemble {
        shape: ensemble.shape,
        draws,
        provenance: EnsembleProvenance {
            size: particles,
            original_size: ensemble.provenance.original_size,
            stride: ensemble.provenance.stride * stride,
            ..ensemble.provenance
        },
    })
}

/// The comorbidity scores `ε_b` of one cell, one per particle.
pub fn comorbidity_scores(seed: u64, cell: usize, particles: usize) -> Vec<f64> {
    let mut rng = substream(seed, cell as u64);
    (0..particles).map(|_| rng.sample(StandardNormal)).collect()
}

/// Unquantized disease probabilities of one cell, disease-major
/// (`out[j * P + b]`), with particle `b` evaluated under draw `b`.
pub fn raw_cell_particles(grid: &GridIndex, cell: usize, thinned: &PosteriorEnsemble, seed: u64) -> Result<Vec<f64>> {
    if cell >= grid.len() {
        return Err(Error::OffGrid(format!("cell {cell} of {}", grid.len())));
    }
    if thinned.shape != FieldShape::for_grid(grid.config()) {
        return Err(Error::DimensionMismatch("ensemble shape does not match the grid".into()));
    }
    let profile = grid.profile(cell);
    let design = design_vector(grid.config(), &profile);
    let p = thinned.len();
    let n_d = thinned.shape.n_diseases;
    let eps = comorbidity_scores(seed, cell, p);
    let mut eta = vec![0.0; n_d];
    let mut out = vec![0.0; n_d * p];
    for (b, draw) in thinned.draws.iter().enumerate() {
        draw.linear_predictor_for(&design, profile.location, profile.cohort, eps[b], &mut eta)?;
        for (j, v) in eta.iter().enumerate() {
            out[j * p + b] = logistic(*v);
        }
    }
    Ok(out)
}

/// Particles of one cell paired with weight replicate `b mod W`.
pub fn precompute_cell(cell: usize, thinned: &PosteriorEnsemble, joint: &JointWeights, seed: u64) -> Result<ParticleBlock> {
    let grid = joint.grid();
    let raw = raw_cell_particles(grid, cell, thinned, seed)?;
    let w = joint.replicates();
    if w == 0 {
        return Err(Error::MissingWeights(format!("cell {cell}: weight table has no replicates")));
    }
    let weights = (0..thinned.len()).map(|b| joint.weight(cell, b % w) as f32).collect();
    Ok(ParticleBlock {
        cell,
        probabilities: raw.into_iter().map(quantize).collect(),
        weights,
        mean_weight: joint.mean_weight(cell),
    })
}

/// Thin the ensemble and precompute every grid cell.
///
/// `threads` sizes a dedicated pool; `None` uses the global one.
pub fn precompute(
    grid: &GridConfig,
    ensemble: &PosteriorEnsemble,
    weights: &StoredWeights,
    particles: usize,
    seed: u64,
    threads: Option<usize>,
) -> Result<ParticleStore> {
    let index = GridIndex::new(grid.clone())?;
    let thinned = thin_sample(ensemble, particles)?;
    let joint = weights.joint(&index)?;
    let run = || -> Result<Vec<ParticleBlock>> {
        (0..index.len()).into_par_iter().map(|cell| precompute_cell(cell, &thinned, &joint, seed)).collect()
    };
    let blocks = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let params = StoreParams {
        particles,
        original_size: thinned.provenance.original_size,
        stride: thinned.provenance.stride,
        replicates: joint.replicates(),
        seed,
    };
    ParticleStore::from_blocks(grid.clone(), params, blocks, Some(weights.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PipelineConfig;
    use crate::model::ParameterDraw;
    use crate::synthetic::{draw_posterior_ensemble, generate_truth};

    fn tagged_ensemble(b: usize) -> PosteriorEnsemble {
        let grid = GridConfig::desk();
        let shape = FieldShape::for_grid(&grid);
        let draws = (0..b)
            .map(|i| {
                let mut d = ParameterDraw::zeros(shape);
                d.field.get_mut(0, 0).intercept = i as f64;
                d
            })
            .collect();
        PosteriorEnsemble {
            shape,
            draws,
            provenance: EnsembleProvenance { seed: 0, size: b, dispersion: 0.0, original_size: b, stride: 1 },
        }
    }

    #[test]
    fn thinning_3000_to_300_takes_every_tenth() {
        let thinned = thin_sample(&tagged_ensemble(3000), 300).unwrap();
        let idx: Vec<usize> = thinned.draws.iter().map(|d| d.field.get(0, 0).intercept as usize).collect();
        assert_eq!(idx, (0..300).map(|i| 10 * i).collect::<Vec<_>>());
        assert_eq!(thinned.provenance.stride, 10);
        assert_eq!(thinned.provenance.original_size, 3000);
    }

    #[test]
    fn thinning_to_full_size_is_identity_and_too_many_fails() {
        let e = tagged_ensemble(7);
        assert_eq!(thin_sample(&e, 7).unwrap().draws, e.draws);
        assert!(matches!(thin_sample(&e, 8), Err(Error::ThinningTooLarge { requested: 8, available: 7 })));
    }

    #[test]
    fn thinned_mean_is_close_to_full_mean() {
        let cfg = PipelineConfig::desk();
        let truth = generate_truth(&cfg, 3).unwrap();
        let ens = draw_posterior_ensemble(&truth, 3000, 0.1, 4).unwrap();
        let thinned = thin_sample(&ens, 300).unwrap();
        let mean = |e: &PosteriorEnsemble| e.draws.iter().map(|d| d.field.get(1, 1).intercept).sum::<f64>() / e.len() as f64;
        assert!((mean(&ens) - mean(&thinned)).abs() < 4.0 * 0.1 / 300f64.sqrt());
    }

    #[test]
    fn zero_coefficients_give_one_half() {
        let grid = GridIndex::new(GridConfig::desk()).unwrap();
        let mut e = tagged_ensemble(5);
        for d in &mut e.draws {
            *d = ParameterDraw::zeros(e.shape);
        }
        let raw = raw_cell_particles(&grid, 17, &e, 1).unwrap();
        assert!(raw.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn particles_match_independent_recomputation() {
        let cfg = PipelineConfig::desk();
        let grid = GridIndex::new(cfg.grid.clone()).unwrap();
        let truth = generate_truth(&cfg, 9).unwrap();
        let ens = draw_posterior_ensemble(&truth, 40, 0.05, 10).unwrap();
        let cell = 311;
        let raw = raw_cell_particles(&grid, cell, &ens, 77).unwrap();
        let eps = comorbidity_scores(77, cell, 40);
        let profile = grid.profile(cell);
        for b in 0..40 {
            let probs = ens.draws[b].predictive_probability(&cfg.grid, &profile, eps[b]).unwrap();
            for (j, p) in probs.iter().enumerate() {
                assert_eq!(raw[j * 40 + b], *p);
            }
        }
    }
}
