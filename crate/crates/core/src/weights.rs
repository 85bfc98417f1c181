//! Post-stratification weights.
//!
//! The joint weight of a full profile factors as
//! `p(x | I) = p(x_demo | I) · p(x_risk | x_demo, I)`: the demographic share
//! comes from census margins, the risk-category distribution from the
//! survey. Risk distributions are estimated per demographic cell
//! (location, cohort, sex), pooling ages within a cohort.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditioningSet;
use crate::error::{Error, Result};
use crate::grid::{DemographicCell, GridIndex};
use crate::query::quantile_sorted;
use crate::rng::substream;
use crate::synthetic::{sample_dirichlet, DemographicMargins, SurveySample};

/// Default symmetric Dirichlet concentration.
pub const DEFAULT_PRIOR_ALPHA: f64 = 0.5;

/// Relative frequencies of risk categories within one demographic cell.
#[derive(Debug, Clone, PartialEq)]
pub enum EmpiricalWeights {
    Supported { weights: Vec<f64>, n: u64 },
    /// No respondent in the cell: the frequency ratio is 0/0.
    ZeroSupport,
}

/// Risk-category counts for every demographic cell.
pub fn category_counts(sample: &SurveySample, grid: &GridIndex) -> Vec<Vec<u64>> {
    let categories = grid.config().n_risk_categories();
    let mut counts = vec![vec![0u64; categories]; grid.n_demographic_cells()];
    for p in &sample.records {
        counts[grid.demographic_index(grid.demographic_cell(p))][p.risk_category()] += 1;
    }
    counts
}

/// Joint-to-marginal indicator ratio for one demographic cell.
pub fn empirical_weights(sample: &SurveySample, grid: &GridIndex, cell: DemographicCell) -> EmpiricalWeights {
    let categories = grid.config().n_risk_categories();
    let mut joint = vec![0u64; categories];
    for p in sample.records.iter().filter(|p| grid.demographic_cell(p) == cell) {
        joint[p.risk_category()] += 1;
    }
    let n: u64 = joint.iter().sum();
    if n == 0 {
        return EmpiricalWeights::ZeroSupport;
    }
    EmpiricalWeights::Supported { weights: joint.iter().map(|&c| c as f64 / n as f64).collect(), n }
}

/// Where a cell's estimate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightSource {
    Cell,
    /// Cell was empty; counts pooled over the locations of its region.
    Region,
    /// Region was empty too; counts pooled over all locations.
    Pooled,
    /// No data at all; prior only.
    Prior,
}

/// Posterior of one cell's risk-category distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub mean: Vec<f64>,
    pub replicates: Vec<Vec<f64>>,
    pub source: WeightSource,
}

/// Draw `replicates` vectors from `Dirichlet(counts + α)`.
pub fn dirichlet_weight_posterior<R: Rng + ?Sized>(
    counts: &[u64],
    prior_alpha: f64,
    replicates: usize,
    rng: &mut R,
) -> Result<WeightEntry> {
    if !(prior_alpha > 0.0 && prior_alpha.is_finite()) {
        return Err(Error::InvalidArgument("prior_alpha must be positive".into()));
    }
    if replicates == 0 || counts.is_empty() {
        return Err(Error::InvalidArgument("need at least one replicate and one category".into()));
    }
    let alpha: Vec<f64> = counts.iter().map(|&c| c as f64 + prior_alpha).collect();
    let total: f64 = alpha.iter().sum();
    let mean = alpha.iter().map(|a| a / total).collect();
    let replicates = (0..replicates).map(|_| sample_dirichlet(rng, &alpha)).collect();
    Ok(WeightEntry { mean, replicates, source: WeightSource::Cell })
}

/// Posterior replicates of `ω` for every demographic cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub categories: usize,
    pub replicates: usize,
    /// Indexed like [`GridIndex::demographic_index`].
    pub entries: Vec<WeightEntry>,
}

impl WeightTable {
    pub fn entry(&self, grid: &GridIndex, cell: DemographicCell) -> Result<&WeightEntry> {
        self.entries
            .get(grid.demographic_index(cell))
            .ok_or_else(|| Error::MissingWeights(format!("{cell:?}")))
    }

    /// Every mean and replicate lies on the simplex within `tol`.
    pub fn max_simplex_error(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| std::iter::once(&e.mean).chain(&e.replicates))
            .map(|v| {
                let negative = v.iter().fold(0.0f64, |m, &x| m.max(-x));
                negative.max((v.iter().sum::<f64>() - 1.0).abs())
            })
            .fold(0.0, f64::max)
    }

    /// Delimited dump: cell, category, mean, q05, q95.
    pub fn write_debug_csv<W: Write>(&self, grid: &GridIndex, out: W) -> Result<()> {
        let cfg = grid.config();
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["cell", "category", "mean", "q05", "q95"])?;
        for (i, entry) in self.entries.iter().enumerate() {
            let cell = grid.demographic_from_index(i);
            let label = format!("{}/{}/{}", cfg.locations[cell.location], cfg.cohorts[cell.cohort], cell.sex);
            for k in 0..self.categories {
                let mut draws: Vec<f64> = entry.replicates.iter().map(|r| r[k]).collect();
                draws.sort_by(f64::total_cmp);
                w.write_record([
                    label.clone(),
                    k.to_string(),
                    format!("{:.6}", entry.mean[k]),
                    format!("{:.6}", quantile_sorted(&draws, 0.05)),
                    format!("{:.6}", quantile_sorted(&draws, 0.95)),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Anything that can turn a survey into a weight table.
pub trait WeightEstimator {
    fn estimate(&self, sample: &SurveySample, grid: &GridIndex, seed: u64) -> Result<WeightTable>;
}

/// Per-cell Dirichlet-multinomial posterior with region-level fallback for
/// cells no respondent falls in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirichletEstimator {
    pub prior_alpha: f64,
    pub replicates: usize,
}

impl Default for DirichletEstimator {
    fn default() -> Self {
        Self { prior_alpha: DEFAULT_PRIOR_ALPHA, replicates: 300 }
    }
}

impl WeightEstimator for DirichletEstimator {
    fn estimate(&self, sample: &SurveySample, grid: &GridIndex, seed: u64) -> Result<WeightTable> {
        let counts = category_counts(sample, grid);
        let cfg = grid.config();
        let categories = cfg.n_risk_categories();
        let pooled = |cell: DemographicCell, same_region: bool| -> Vec<u64> {
            let region = cfg.region_of(cell.location);
            let mut total = vec![0u64; categories];
            for l in 0..cfg.n_locations() {
                if same_region && (region.is_none() || cfg.region_of(l) != region) {
                    continue;
                }
                let d = grid.demographic_index(DemographicCell { location: l, ..cell });
                for (t, c) in total.iter_mut().zip(&counts[d]) {
                    *t += c;
                }
            }
            total
        };
        let entries = (0..grid.n_demographic_cells())
            .into_par_iter()
            .map(|d| {
                let cell = grid.demographic_from_index(d);
                let (counts, source) = if counts[d].iter().any(|&c| c > 0) {
                    (counts[d].clone(), WeightSource::Cell)
                } else {
                    let region = pooled(cell, true);
                    if region.iter().any(|&c| c > 0) {
                        (region, WeightSource::Region)
                    } else {
                        let all = pooled(cell, false);
                        let source = if all.iter().any(|&c| c > 0) { WeightSource::Pooled } else { WeightSource::Prior };
                        (all, source)
                    }
                };
                let mut rng = substream(seed, d as u64);
                let mut entry = dirichlet_weight_posterior(&counts, self.prior_alpha, self.replicates, &mut rng)?;
                entry.source = source;
                Ok(entry)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(WeightTable { categories, replicates: self.replicates, entries })
    }
}

/// The full joint cell-weight function `p(x | I)` over the grid.
#[derive(Debug, Clone)]
pub struct JointWeights {
    grid: GridIndex,
    /// `p(x_demo)` of one age within each demographic cell.
    shares: Vec<f64>,
    table: WeightTable,
}

/// Combine census shares with risk-category posteriors.
pub fn demographic_decomposition(grid: &GridIndex, margins: &DemographicMargins, table: &WeightTable) -> Result<JointWeights> {
    if table.entries.len() != grid.n_demographic_cells() {
        return Err(Error::MissingWeights(format!(
            "table has {} cells, grid needs {}",
            table.entries.len(),
            grid.n_demographic_cells()
        )));
    }
    if table.categories != grid.config().n_risk_categories() {
        return Err(Error::DimensionMismatch("weight table category count does not match the grid".into()));
    }
    let counts = (0..grid.n_demographic_cells())
        .map(|d| margins.count(grid, grid.demographic_from_index(d)))
        .collect::<Result<Vec<u64>>>()?;
    let total = counts.iter().sum::<u64>() as f64 * grid.config().n_ages() as f64;
    if total <= 0.0 {
        return Err(Error::InvalidArgument("margins hold no population".into()));
    }
    let shares = counts.iter().map(|&c| c as f64 / total).collect();
    Ok(JointWeights { grid: grid.clone(), shares, table: table.clone() })
}

impl JointWeights {
    pub fn grid(&self) -> &GridIndex {
        &self.grid
    }

    pub fn table(&self) -> &WeightTable {
        &self.table
    }

    pub fn replicates(&self) -> usize {
        self.table.replicates
    }

    /// Joint weight of a cell under weight replicate `r`.
    pub fn weight(&self, cell: usize, replicate: usize) -> f64 {
        let p = self.grid.profile(cell);
        let d = self.grid.demographic_index(self.grid.demographic_cell(&p));
        self.shares[d] * self.table.entries[d].replicates[replicate][p.risk_category()]
    }

    /// Joint weight of a cell under the posterior mean of `ω`.
    pub fn mean_weight(&self, cell: usize) -> f64 {
        let p = self.grid.profile(cell);
        let d = self.grid.demographic_index(self.grid.demographic_cell(&p));
        self.shares[d] * self.table.entries[d].mean[p.risk_category()]
    }

    fn weight_of(&self, cell: usize, replicate: Option<usize>) -> f64 {
        match replicate {
            Some(r) => self.weight(cell, r),
            None => self.mean_weight(cell),
        }
    }

    /// Sum over the whole grid; 1 up to rounding.
    pub fn total(&self, replicate: Option<usize>) -> f64 {
        (0..self.grid.len()).map(|c| self.weight_of(c, replicate)).sum()
    }
}

/// Restrict the joint to a conditioning set and renormalize.
///
/// Returns `(cell id, weight)` pairs in cell order; weights sum to 1.
pub fn marginalize_weights(
    joint: &JointWeights,
    cond: &ConditioningSet,
    replicate: Option<usize>,
) -> Result<Vec<(usize, f64)>> {
    cond.validate(&joint.grid)?;
    let cells = cond.cells(&joint.grid);
    let weights: Vec<f64> = cells.iter().map(|&c| joint.weight_of(c, replicate)).collect();
    let total: f64 = weights.iter().sum();
    if cells.is_empty() || total <= 0.0 {
        return Err(Error::EmptySubgroup("the conditioning set has zero population weight".into()));
    }
    Ok(cells.into_iter().zip(weights).map(|(c, w)| (c, w / total)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{GridConfig, MarginsRegime, PipelineConfig};
    use crate::grid::{CovariateProfile, Dimension};
    use crate::synthetic::{generate_margins, generate_survey, generate_truth};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn desk_grid() -> GridIndex {
        GridIndex::new(GridConfig::desk()).unwrap()
    }

    fn profile(l: usize, c: usize, age: i32, bits: u32) -> CovariateProfile {
        CovariateProfile { location: l, cohort: c, age, binaries: bits }
    }

    #[test]
    fn empirical_counting_and_zero_support() {
        let grid = desk_grid();
        let sample = SurveySample { records: vec![profile(0, 0, 60, 0b010), profile(0, 0, 63, 0b100), profile(1, 0, 60, 0)] };
        let cell = DemographicCell { location: 0, cohort: 0, sex: 0 };
        match empirical_weights(&sample, &grid, cell) {
            EmpiricalWeights::Supported { weights, n } => {
                assert_eq!(n, 2);
                assert_eq!(weights, vec![0.0, 0.5, 0.5, 0.0]);
            }
            other => panic!("{other:?}"),
        }
        let empty = DemographicCell { location: 2, cohort: 1, sex: 1 };
        assert_eq!(empirical_weights(&sample, &grid, empty), EmpiricalWeights::ZeroSupport);
    }

    #[test]
    fn empirical_matches_hash_count_oracle() {
        let cfg = PipelineConfig::desk();
        let grid = desk_grid();
        let truth = generate_truth(&cfg, 4).unwrap();
        let margins = generate_margins(&grid, MarginsRegime::Uniform { mean: 10.0 }, 0).unwrap();
        let sample = generate_survey(&truth, &grid, &margins, 500, 6).unwrap();
        let mut tally: HashMap<(usize, usize, usize, usize), u64> = HashMap::new();
        let mut marginal: HashMap<(usize, usize, usize), u64> = HashMap::new();
        for p in &sample.records {
            *tally.entry((p.location, p.cohort, p.sex(), p.risk_category())).or_default() += 1;
            *marginal.entry((p.location, p.cohort, p.sex())).or_default() += 1;
        }
        for d in 0..grid.n_demographic_cells() {
            let cell = grid.demographic_from_index(d);
            let key = (cell.location, cell.cohort, cell.sex);
            match (empirical_weights(&sample, &grid, cell), marginal.get(&key)) {
                (EmpiricalWeights::ZeroSupport, None) => {}
                (EmpiricalWeights::Supported { weights, .. }, Some(&m)) => {
                    for (k, w) in weights.iter().enumerate() {
                        let joint = tally.get(&(key.0, key.1, key.2, k)).copied().unwrap_or(0);
                        assert_eq!(*w, joint as f64 / m as f64);
                    }
                }
                other => panic!("mismatch at {d}: {other:?}"),
            }
        }
    }

    #[test]
    fn dirichlet_closed_form_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = dirichlet_weight_posterior(&[1, 1, 0, 0, 0, 0, 0, 0], 1.0, 5, &mut rng).unwrap();
        let expected = [0.2, 0.2, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1];
        for (m, x) in e.mean.iter().zip(expected) {
            assert!((m - x).abs() < 1e-15);
        }
        let e = dirichlet_weight_posterior(&[0; 8], 1.0, 5, &mut rng).unwrap();
        assert!(e.mean.iter().all(|&m| (m - 0.125).abs() < 1e-15));
        assert_eq!(e.replicates.len(), 5);
        assert!(dirichlet_weight_posterior(&[0; 8], 0.0, 5, &mut rng).is_err());
        assert!(dirichlet_weight_posterior(&[0; 8], 1.0, 0, &mut rng).is_err());
    }

    #[test]
    fn dirichlet_draws_match_closed_form_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let counts = [3u64, 0, 12, 5, 1, 0, 7, 2];
        let alpha0 = 0.5;
        let n = 10_000;
        let e = dirichlet_weight_posterior(&counts, alpha0, n, &mut rng).unwrap();
        let a: Vec<f64> = counts.iter().map(|&c| c as f64 + alpha0).collect();
        let a_sum: f64 = a.iter().sum();
        for k in 0..8 {
            let draws: Vec<f64> = e.replicates.iter().map(|r| r[k]).collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let closed_mean = a[k] / a_sum;
            let closed_var = a[k] * (a_sum - a[k]) / (a_sum * a_sum * (a_sum + 1.0));
            assert!((mean - closed_mean).abs() <= 3.0 * (var / n as f64).sqrt(), "mean {k}");
            let m4 = draws.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n as f64;
            let var_se = ((m4 - var * var) / n as f64).sqrt();
            assert!((var - closed_var).abs() <= 3.0 * var_se, "variance {k}: {var} vs {closed_var}");
        }
    }

    #[test]
    fn posterior_mean_converges_to_empirical() {
        let cfg = PipelineConfig::desk();
        let grid = desk_grid();
        let truth = generate_truth(&cfg, 8).unwrap();
        let margins = generate_margins(&grid, MarginsRegime::Uniform { mean: 10.0 }, 0).unwrap();
        let estimator = DirichletEstimator { prior_alpha: 0.5, replicates: 2 };
        let mut gaps = Vec::new();
        for n in [1_000, 10_000, 100_000] {
            let sample = generate_survey(&truth, &grid, &margins, n, 77).unwrap();
            let table = estimator.estimate(&sample, &grid, 1).unwrap();
            let mut gap = 0.0f64;
            for d in 0..grid.n_demographic_cells() {
                if let EmpiricalWeights::Supported { weights, .. } = empirical_weights(&sample, &grid, grid.demographic_from_index(d)) {
                    for (a, b) in weights.iter().zip(&table.entries[d].mean) {
                        gap = gap.max((a - b).abs());
                    }
                }
            }
            gaps.push(gap);
        }
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }

    #[test]
    fn zero_support_falls_back_to_region() {
        let grid = desk_grid();
        // Only location 0 (region north) observed.
        let sample = SurveySample { records: (0..40).map(|i| profile(0, 0, 60, (i % 4) << 1)).collect() };
        let table = DirichletEstimator { prior_alpha: 0.5, replicates: 3 }.estimate(&sample, &grid, 0).unwrap();
        let at = |l, c, s| table.entries[grid.demographic_index(DemographicCell { location: l, cohort: c, sex: s })].source;
        assert_eq!(at(0, 0, 0), WeightSource::Cell);
        assert_eq!(at(1, 0, 0), WeightSource::Region);
        assert_eq!(at(2, 0, 0), WeightSource::Pooled);
        assert_eq!(at(0, 1, 0), WeightSource::Prior);
        assert!(table.max_simplex_error() < 1e-9);
    }

    fn random_joint(seed: u64) -> JointWeights {
        let cfg = PipelineConfig::desk();
        let grid = desk_grid();
        let truth = generate_truth(&cfg, seed).unwrap();
        let margins = generate_margins(&grid, MarginsRegime::LogNormal { mean: 500.0, cv: 0.8 }, seed).unwrap();
        let sample = generate_survey(&truth, &grid, &margins, 300, seed).unwrap();
        let table = DirichletEstimator { prior_alpha: 0.5, replicates: 4 }.estimate(&sample, &grid, seed).unwrap();
        demographic_decomposition(&grid, &margins, &table).unwrap()
    }

    #[test]
    fn decomposition_sums_to_one() {
        let joint = random_joint(3);
        assert!((joint.total(None) - 1.0).abs() < 1e-9);
        for r in 0..joint.replicates() {
            assert!((joint.total(Some(r)) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn decomposition_trivial_cases() {
        // One demographic cell, uniform categories: 1/8 each.
        let grid = GridIndex::new(GridConfig::with_dims(1, 1, 1, 4).unwrap()).unwrap();
        let uniform = WeightEntry { mean: vec![0.125; 8], replicates: vec![vec![0.125; 8]], source: WeightSource::Cell };
        let table = WeightTable { categories: 8, replicates: 1, entries: vec![uniform; 2] };
        let margins = DemographicMargins { counts: vec![Some(10), Some(0)] };
        let joint = demographic_decomposition(&grid, &margins, &table).unwrap();
        for cell in 0..grid.len() {
            let expected = if grid.profile(cell).sex() == 0 { 0.125 } else { 0.0 };
            assert_eq!(joint.mean_weight(cell), expected);
        }

        // Two equal cells, degenerate categories: two profiles at 0.5.
        let grid = GridIndex::new(GridConfig::with_dims(2, 1, 1, 2).unwrap()).unwrap();
        let degenerate = WeightEntry { mean: vec![1.0, 0.0], replicates: vec![vec![1.0, 0.0]], source: WeightSource::Cell };
        let table = WeightTable { categories: 2, replicates: 1, entries: vec![degenerate; 4] };
        let margins = DemographicMargins { counts: vec![Some(5), Some(0), Some(5), Some(0)] };
        let joint = demographic_decomposition(&grid, &margins, &table).unwrap();
        let positive: Vec<f64> = (0..grid.len()).map(|c| joint.weight(c, 0)).filter(|&w| w > 0.0).collect();
        assert_eq!(positive, vec![0.5, 0.5]);

        let missing = DemographicMargins { counts: vec![Some(5), None, Some(5), Some(0)] };
        assert!(matches!(demographic_decomposition(&grid, &missing, &table), Err(Error::MissingMargins(_))));
    }

    #[test]
    fn marginalize_trivial_cases() {
        let joint = random_joint(5);
        let grid = joint.grid().clone();
        let p = grid.profile(200);
        assert_eq!(marginalize_weights(&joint, &ConditioningSet::exact(&grid, &p), Some(1)).unwrap(), vec![(200, 1.0)]);
        let free = marginalize_weights(&joint, &ConditioningSet::free(), None).unwrap();
        assert_eq!(free.len(), grid.len());
        for (c, w) in free {
            assert!((w - joint.mean_weight(c)).abs() < 1e-15);
        }
        let none = ConditioningSet::free().restrict(Dimension::Location, []);
        assert!(matches!(marginalize_weights(&joint, &none, None), Err(Error::EmptySubgroup(_))));
    }

    #[test]
    fn marginalize_matches_filter_oracle_and_chains() {
        let joint = random_joint(6);
        let grid = joint.grid().clone();
        let s1 = ConditioningSet::free().restrict(Dimension::Location, [0, 2, 3]).fix(Dimension::Binary(0), 1);
        let s2 = ConditioningSet::free().restrict(Dimension::Cohort, [1, 2]).fix(Dimension::Binary(2), 0);
        let got = marginalize_weights(&joint, &s1, Some(2)).unwrap();
        let filtered: Vec<(usize, f64)> =
            (0..grid.len()).filter(|&c| s1.allows(&grid, &grid.profile(c))).map(|c| (c, joint.weight(c, 2))).collect();
        let total: f64 = filtered.iter().map(|x| x.1).sum();
        assert_eq!(got.len(), filtered.len());
        for ((c1, w1), (c2, w2)) in got.iter().zip(&filtered) {
            assert_eq!(c1, c2);
            assert!((w1 - w2 / total).abs() < 1e-12);
        }
        // Restricting the already restricted weights again equals restricting once by s1 ∧ s2.
        let once = marginalize_weights(&joint, &s1.and(&s2), Some(2)).unwrap();
        let inner: Vec<(usize, f64)> = got.iter().copied().filter(|(c, _)| s2.allows(&grid, &grid.profile(*c))).collect();
        let inner_total: f64 = inner.iter().map(|x| x.1).sum();
        for ((c1, w1), (c2, w2)) in once.iter().zip(&inner) {
            assert_eq!(c1, c2);
            assert!((w1 - w2 / inner_total).abs() < 1e-12);
        }
    }
}
