//! Checks of a store against the synthetic truth it was built from.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditioningSet, Constraint};
use crate::error::{Error, Result};
use crate::grid::Dimension;
use crate::query::{aggregate_prevalence, credible_band};
use crate::rng::{stream, substream};
use crate::store::{dequantize, ParticleStore};
use crate::synthetic::GroundTruth;

/// Acceptable range of the empirical coverage of nominal 90% bands.
pub const COVERAGE_RANGE: (f64, f64) = (0.85, 0.95);

/// Largest tolerated disagreement between the aggregator and the
/// enumeration oracle.
pub const ORACLE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub pairs: usize,
    pub covered: usize,
    pub fraction: f64,
    pub level: f64,
    /// Every sampled band had zero width, so coverage is meaningless.
    pub degenerate: bool,
}

/// A true individual-level cell prevalence `logistic(η + γ ε*)` with a
/// fresh `ε*`, one per sampled pair.
pub fn truth_value(truth: &GroundTruth, store: &ParticleStore, cell: usize, disease: usize, eps: f64) -> Result<f64> {
    let profile = store.grid().profile(cell);
    Ok(truth.draw.predictive_probability(store.config(), &profile, eps)?[disease])
}

/// Fraction of `pairs` random (cell, disease) truths inside the cells'
/// credible bands.
pub fn coverage(store: &ParticleStore, truth: &GroundTruth, pairs: usize, level: f64, seed: u64) -> Result<CoverageReport> {
    if truth.grid.digest() != store.config().digest() {
        return Err(Error::Digest("ground truth was generated for a different grid".into()));
    }
    if pairs == 0 {
        return Err(Error::InvalidArgument("coverage needs at least one pair".into()));
    }
    let mut rng = substream(seed, stream::COVERAGE);
    let (mut covered, mut degenerate) = (0, true);
    for _ in 0..pairs {
        let cell = rng.random_range(0..store.n_cells());
        let disease = rng.random_range(0..store.n_diseases());
        let eps: f64 = rng.sample(StandardNormal);
        let particles: Vec<f64> = store.disease_particles(cell, disease).iter().map(|&q| dequantize(q)).collect();
        let (lo, hi) = credible_band(&particles, level)?;
        degenerate &= lo == hi;
        let value = truth_value(truth, store, cell, disease, eps)?;
        if lo <= value && value <= hi {
            covered += 1;
        }
    }
    Ok(CoverageReport { pairs, covered, fraction: covered as f64 / pairs as f64, level, degenerate })
}

/// Random conditioning set: each dimension free, fixed or a random subset.
pub fn random_conditioning<R: Rng + ?Sized>(store: &ParticleStore, rng: &mut R) -> ConditioningSet {
    let grid = store.grid();
    let mut cond = ConditioningSet::free();
    for dim in grid.dimensions() {
        let card = grid.cardinality(dim);
        cond = match rng.random_range(0..3) {
            0 => cond,
            1 => cond.fix(dim, rng.random_range(0..card)),
            _ => {
                let values: Vec<usize> = (0..card).filter(|_| rng.random_bool(0.5)).collect();
                if values.is_empty() {
                    cond
                } else {
                    cond.with(dim, Constraint::Set(values.into_iter().collect()))
                }
            }
        };
    }
    cond
}

/// Per-particle prevalence by scanning every grid cell; `None` when no
/// cell with weight matches.
pub fn enumeration_oracle(store: &ParticleStore, disease: usize, cond: &ConditioningSet, resolved: bool) -> Option<Vec<f64>> {
    let grid = store.grid();
    let p = store.particles();
    let (mut num, mut den) = (vec![0.0; p], vec![0.0; p]);
    let mut any = false;
    for cell in 0..grid.len() {
        let profile = grid.profile(cell);
        let keep = grid.dimensions().into_iter().all(|d: Dimension| cond.constraint(d).allows(grid.coordinate(&profile, d)));
        if !keep {
            continue;
        }
        any = true;
        let block = store.block(cell);
        for b in 0..p {
            let w = if resolved { block.weights[b] as f64 } else { block.mean_weight };
            num[b] += dequantize(block.probabilities[disease * p + b]) * w;
            den[b] += w;
        }
    }
    if !any || den.iter().any(|&d| d <= 0.0) {
        return None;
    }
    Some(num.iter().zip(&den).map(|(n, d)| n / d).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub checks: usize,
    pub empty: usize,
    pub max_abs_error: f64,
}

/// Compare the aggregator with the enumeration oracle on random queries.
pub fn oracle_spot_checks(store: &ParticleStore, checks: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = substream(seed, stream::COVERAGE + 1);
    let mut report = OracleReport { checks, empty: 0, max_abs_error: 0.0 };
    for _ in 0..checks {
        let cond = random_conditioning(store, &mut rng);
        let disease = rng.random_range(0..store.n_diseases());
        let resolved = rng.random_bool(0.5);
        let fast = aggregate_prevalence(store, disease, &cond, resolved);
        match (fast, enumeration_oracle(store, disease, &cond, resolved)) {
            (Err(Error::EmptySubgroup(_)), None) => report.empty += 1,
            (Ok(a), Some(b)) => {
                for (x, y) in a.iter().zip(&b) {
                    report.max_abs_error = report.max_abs_error.max((x - y).abs());
                }
            }
            (Ok(_), None) => report.max_abs_error = f64::INFINITY,
            (Err(Error::EmptySubgroup(_)), Some(_)) => report.max_abs_error = f64::INFINITY,
            (Err(e), _) => return Err(e),
        }
    }
    Ok(report)
}
