use crate::conditioning::ConditioningSet;
use crate::error::{Error, Result};
use crate::store::{ParticleStore, QUANT_MAX};

/// Per-particle weighted sums for one group of cells.
///
/// `numerator[b] = Σ π_b(cell) w_b(cell)` and `denominator[b] = Σ w_b(cell)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSums {
    pub numerator: Vec<f64>,
    pub denominator: Vec<f64>,
    /// Sum of the posterior-mean joint weights of the cells.
    pub weight: f64,
    /// Number of cells added.
    pub cells: usize,
}

impl ParticleSums {
    pub fn new(particles: usize) -> Self {
        Self { numerator: vec![0.0; particles], denominator: vec![0.0; particles], weight: 0.0, cells: 0 }
    }

    /// True when every particle has positive weight.
    pub fn is_supported(&self) -> bool {
        self.cells > 0 && self.denominator.iter().all(|&d| d > 0.0)
    }

    /// Self-normalized prevalence per particle.
    pub fn prevalences(&self) -> Result<Vec<f64>> {
        if !self.is_supported() {
            return Err(Error::EmptySubgroup("the selected cells carry zero population weight".into()));
        }
        Ok(self.numerator.iter().zip(&self.denominator).map(|(n, d)| n / d).collect())
    }
}

/// Add one cell's particles of `disease` into `sums`.
///
/// With `replicate_resolved` each particle uses its own weight replicate;
/// otherwise every particle uses the cell's posterior-mean weight.
#[inline]
pub fn accumulate_cell(
    store: &ParticleStore,
    disease: usize,
    cell: usize,
    replicate_resolved: bool,
    sums: &mut ParticleSums,
) {
    let probs = store.disease_particles(cell, disease);
    let mean = store.mean_weight(cell);
    if replicate_resolved {
        let weights = store.particle_weights(cell);
        for (((num, den), &q), &w) in sums.numerator.iter_mut().zip(sums.denominator.iter_mut()).zip(probs).zip(weights) {
            let w = w as f64;
            *num += q as f64 / QUANT_MAX * w;
            *den += w;
        }
    } else {
        for ((num, den), &q) in sums.numerator.iter_mut().zip(sums.denominator.iter_mut()).zip(probs) {
            *num += q as f64 / QUANT_MAX * mean;
            *den += mean;
        }
    }
    sums.weight += mean;
    sums.cells += 1;
}

pub(crate) fn disease_index(store: &ParticleStore, disease: usize) -> Result<()> {
    if disease >= store.n_diseases() {
        return Err(Error::UnknownDisease(format!("index {disease}")));
    }
    Ok(())
}

/// Weighted sums over every cell selected by `cond`.
pub fn aggregate_sums(
    store: &ParticleStore,
    disease: usize,
    cond: &ConditioningSet,
    replicate_resolved: bool,
) -> Result<ParticleSums> {
    disease_index(store, disease)?;
    cond.validate(store.grid())?;
    let mut sums = ParticleSums::new(store.particles());
    for cell in cond.cells(store.grid()) {
        accumulate_cell(store, disease, cell, replicate_resolved, &mut sums);
    }
    Ok(sums)
}

/// Subgroup prevalence per particle:
/// `Σ π_b(cell) w_b(cell) / Σ w_b(cell)` over the cells matching `cond`.
pub fn aggregate_prevalence(
    store: &ParticleStore,
    disease: usize,
    cond: &ConditioningSet,
    replicate_resolved: bool,
) -> Result<Vec<f64>> {
    aggregate_sums(store, disease, cond, replicate_resolved)?.prevalences()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GridConfig;
    use crate::grid::{Dimension, GridIndex};
    use crate::store::{dequantize, quantize, ParticleBlock, StoreParams};

    fn store_from(probs: impl Fn(usize, usize) -> f64, weight: impl Fn(usize, usize) -> f32) -> ParticleStore {
        let grid = GridConfig::desk();
        let n = GridIndex::new(grid.clone()).unwrap().len();
        let p = 3;
        let n_d = grid.diseases.len();
        let blocks = (0..n)
            .map(|cell| ParticleBlock {
                cell,
                probabilities: (0..n_d * p).map(|k| quantize(probs(cell, k % p))).collect(),
                weights: (0..p).map(|b| weight(cell, b)).collect(),
                mean_weight: (0..p).map(|b| weight(cell, b) as f64).sum::<f64>() / p as f64,
            })
            .collect();
        let params = StoreParams { particles: p, original_size: p, stride: 1, replicates: p, seed: 0 };
        ParticleStore::from_blocks(grid, params, blocks, None).unwrap()
    }

    #[test]
    fn fully_fixed_returns_the_cell_particles() {
        let store = store_from(|c, b| (c * 3 + b) as f64 / 2000.0, |_, _| 1.0);
        let grid = store.grid().clone();
        let cell = 201;
        let cond = ConditioningSet::exact(&grid, &grid.profile(cell));
        let got = aggregate_prevalence(&store, 2, &cond, true).unwrap();
        let want: Vec<f64> = store.disease_particles(cell, 2).iter().map(|&q| dequantize(q)).collect();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-15);
        }
    }

    #[test]
    fn midpoint_of_two_equal_cells() {
        let store = store_from(|c, _| if c % 2 == 0 { 0.2 } else { 0.4 }, |_, _| 0.5);
        let grid = store.grid().clone();
        let p = grid.profile(0);
        let cond = ConditioningSet::exact(&grid, &p).with(Dimension::Binary(0), crate::conditioning::Constraint::Free);
        let got = aggregate_prevalence(&store, 0, &cond, true).unwrap();
        let expect = (dequantize(quantize(0.2)) + dequantize(quantize(0.4))) / 2.0;
        assert!(got.iter().all(|v| (v - expect).abs() < 1e-15));
        assert!((expect - 0.3).abs() < 1e-5);
    }

    #[test]
    fn zero_weight_is_an_empty_subgroup() {
        let store = store_from(|_, _| 0.1, |c, _| if c < 8 { 0.0 } else { 1.0 });
        let grid = store.grid().clone();
        let cond = ConditioningSet::exact(&grid, &grid.profile(3));
        assert!(matches!(aggregate_prevalence(&store, 0, &cond, true), Err(Error::EmptySubgroup(_))));
        assert!(matches!(aggregate_prevalence(&store, 9, &cond, true), Err(Error::UnknownDisease(_))));
    }

    #[test]
    fn mean_weight_mode_uses_one_weight_for_all_particles() {
        let store = store_from(|c, b| ((c + b) % 7) as f64 / 10.0, |c, b| (1 + (c + 2 * b) % 5) as f32);
        let cond = ConditioningSet::free().fix(Dimension::Cohort, 1);
        let grid = store.grid().clone();
        let got = aggregate_prevalence(&store, 1, &cond, false).unwrap();
        for b in 0..3 {
            let (mut num, mut den) = (0.0, 0.0);
            for cell in (0..grid.len()).filter(|&c| cond.allows(&grid, &grid.profile(c))) {
                num += store.probability(cell, 1, b) * store.mean_weight(cell);
                den += store.mean_weight(cell);
            }
            assert!((got[b] - num / den).abs() < 1e-12);
        }
    }
}
