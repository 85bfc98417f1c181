//! Synthetic stand-ins for the fitted model and the external registries:
//! a ground-truth parameter set, a posterior ensemble scattered around it,
//! census-style demographic margins and a survey sample.

use std::io::{Read, Write};

use nalgebra::DVector;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::{Gamma, LogNormal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{GridConfig, MarginsRegime, PipelineConfig};
use crate::error::{Error, Result};
use crate::grid::{CovariateProfile, DemographicCell, GridIndex};
use crate::linalg::psd_cholesky;
use crate::model::{kernel_correlation, Coefficient, CoefficientField, FieldShape, ParameterDraw};
use crate::rng::{stream, substream};

/// The known truth behind a synthetic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub grid: GridConfig,
    pub draw: ParameterDraw,
    /// Risk-category distribution per demographic cell, indexed like
    /// [`GridIndex::demographic_index`].
    pub weight_tables: Vec<Vec<f64>>,
    pub seed: u64,
}

impl GroundTruth {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Prior means of the true coefficients by design column.
fn coefficient_prior(covariate: usize) -> (f64, f64) {
    match covariate {
        0 => (-1.8, 0.4),
        1 => (0.35, 0.1),
        2 => (0.1, 0.2),
        _ => (0.3, 0.15),
    }
}

/// Draw a ground truth whose location fields are correlated through the
/// configured kernel.
pub fn generate_truth(config: &PipelineConfig, seed: u64) -> Result<GroundTruth> {
    let grid = &config.grid;
    grid.validate()?;
    if config.kernel.n_locations() != grid.n_locations() {
        return Err(Error::Config("kernel size does not match the number of locations".into()));
    }
    let index = GridIndex::new(grid.clone())?;
    let shape = FieldShape::for_grid(grid);
    let chol = psd_cholesky(&kernel_correlation(&config.kernel).matrix);
    let n = grid.n_locations();

    let mut rng = substream(seed, stream::COEFFICIENTS);
    let correlated_field = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        (&chol * z).iter().copied().collect()
    };
    let mut coefficients = Vec::with_capacity(shape.n_diseases * shape.n_covariates);
    for _disease in 0..shape.n_diseases {
        for h in 0..shape.n_covariates {
            let (mean, sd) = coefficient_prior(h);
            let intercept = mean + sd * rng.sample::<f64, _>(StandardNormal);
            let scale0 = 0.25 * (1.0 + 0.2 * rng.sample::<f64, _>(StandardNormal)).abs();
            let scale1 = 0.05 * rng.sample::<f64, _>(StandardNormal);
            let field0 = correlated_field(&mut rng);
            let field1 = correlated_field(&mut rng);
            coefficients.push(Coefficient { intercept, scale0, scale1, field0, field1 });
        }
    }
    let g = &config.generation;
    let loadings = (0..shape.n_diseases)
        .map(|_| g.comorbidity_loading + g.comorbidity_loading_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let draw = ParameterDraw::new(CoefficientField::new(shape, coefficients)?, loadings)?;

    let categories = grid.n_risk_categories();
    let mut rng = substream(seed, stream::WEIGHT_TABLES);
    let base = sample_dirichlet(&mut rng, &vec![2.0; categories]);
    let concentration: Vec<f64> = base.iter().map(|b| 20.0 * b).collect();
    let weight_tables = (0..index.n_demographic_cells())
        .map(|_| sample_dirichlet(&mut rng, &concentration))
        .collect();

    Ok(GroundTruth { grid: grid.clone(), draw, weight_tables, seed })
}

/// One Dirichlet draw via normalized Gamma variates.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: &[f64]) -> Vec<f64> {
    loop {
        let mut draws: Vec<f64> = alpha
            .iter()
            .map(|&a| Gamma::new(a, 1.0).expect("positive concentration").sample(rng))
            .collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            for d in &mut draws {
                *d /= total;
            }
            return draws;
        }
    }
}

/// Provenance of a simulated posterior sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleProvenance {
    pub seed: u64,
    pub size: usize,
    pub dispersion: f64,
    /// Ensemble size before thinning; equals `size` for unthinned ensembles.
    pub original_size: usize,
    /// Thinning stride; 1 for unthinned ensembles.
    pub stride: usize,
}

/// An ordered sample of posterior draws.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEnsemble {
    pub shape: FieldShape,
    pub draws: Vec<ParameterDraw>,
    pub provenance: EnsembleProvenance,
}

impl PosteriorEnsemble {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }
}

/// Simulate `size` posterior draws as independent Gaussian perturbations of
/// every scalar parameter of the truth.
pub fn draw_posterior_ensemble(truth: &GroundTruth, size: usize, dispersion: f64, seed: u64) -> Result<PosteriorEnsemble> {
    if size == 0 {
        return Err(Error::InvalidArgument("ensemble size must be at least 1".into()));
    }
    if !(dispersion >= 0.0 && dispersion.is_finite()) {
        return Err(Error::InvalidArgument("dispersion must be finite and non-negative".into()));
    }
    let shape = truth.draw.shape();
    let base = truth.draw.to_flat();
    let draws = (0..size)
        .into_par_iter()
        .map(|b| {
            if dispersion == 0.0 {
                return Ok(truth.draw.clone());
            }
            let mut rng = substream(seed, b as u64);
            let flat: Vec<f64> =
                base.iter().map(|&v| v + dispersion * rng.sample::<f64, _>(StandardNormal)).collect();
            ParameterDraw::from_flat(shape, &flat)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorEnsemble {
        shape,
        draws,
        provenance: EnsembleProvenance { seed, size, dispersion, original_size: size, stride: 1 },
    })
}

/// Population counts per demographic cell (location, cohort, sex).
///
/// A cohort's count applies to each age it is observed at.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemographicMargins {
    /// Indexed like [`GridIndex::demographic_index`]; `None` when the cell
    /// is absent from the source.
    pub counts: Vec<Option<u64>>,
}

impl DemographicMargins {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn count(&self, grid: &GridIndex, cell: DemographicCell) -> Result<u64> {
        self.counts.get(grid.demographic_index(cell)).copied().flatten().ok_or_else(|| {
            Error::MissingMargins(format!(
                "location {} cohort {} sex {}",
                grid.config().locations[cell.location],
                grid.config().cohorts[cell.cohort],
                cell.sex
            ))
        })
    }

    pub fn write_csv<W: Write>(&self, grid: &GridIndex, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["location", "cohort", "sex", "count"])?;
        for (i, count) in self.counts.iter().enumerate() {
            if let Some(count) = count {
                let cell = grid.demographic_from_index(i);
                w.write_record([
                    grid.config().locations[cell.location].clone(),
                    grid.config().cohorts[cell.cohort].to_string(),
                    cell.sex.to_string(),
                    count.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(grid: &GridIndex, input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["location", "cohort", "sex", "count"] {
            return Err(Error::InvalidArgument("margins header must be location,cohort,sex,count".into()));
        }
        let mut counts = vec![None; grid.n_demographic_cells()];
        for (row, record) in r.records().enumerate() {
            let record = record?;
            let bad = |what: &str| Error::InvalidArgument(format!("margins row {}: {what}", row + 1));
            let location = grid.config().location_index(&record[0]).ok_or_else(|| bad("unknown location"))?;
            let year: i32 = record[1].parse().map_err(|_| bad("cohort is not a year"))?;
            let cohort = grid.config().cohorts.iter().position(|&c| c == year).ok_or_else(|| bad("unknown cohort"))?;
            let sex: usize = record[2].parse().ok().filter(|&s| s < 2).ok_or_else(|| bad("sex must be 0 or 1"))?;
            let count: u64 = record[3].parse().map_err(|_| bad("count must be a non-negative integer"))?;
            let slot = &mut counts[grid.demographic_index(DemographicCell { location, cohort, sex })];
            if slot.replace(count).is_some() {
                return Err(bad("duplicate cell"));
            }
        }
        let margins = Self { counts };
        if margins.total() == 0 {
            return Err(Error::InvalidArgument("margins hold no population".into()));
        }
        Ok(margins)
    }
}

/// Draw census-style counts for every demographic cell. Counts are at least 1.
pub fn generate_margins(grid: &GridIndex, regime: MarginsRegime, seed: u64) -> Result<DemographicMargins> {
    let n = grid.n_demographic_cells();
    let counts = match regime {
        MarginsRegime::Uniform { mean } => vec![Some(mean.round().max(1.0) as u64); n],
        MarginsRegime::LogNormal { mean, cv } => {
            let sigma2 = (1.0 + cv * cv).ln();
            let dist = LogNormal::new(mean.ln() - 0.5 * sigma2, sigma2.sqrt())
                .map_err(|e| Error::Config(format!("log-normal margins: {e}")))?;
            let mut rng = substream(seed, stream::MARGINS);
            (0..n).map(|_| Some(dist.sample(&mut rng).round().max(1.0) as u64)).collect()
        }
    };
    Ok(DemographicMargins { counts })
}

/// Survey records; profiles only, no outcomes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurveySample {
    pub records: Vec<CovariateProfile>,
}

impl SurveySample {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv<W: Write>(&self, grid: &GridIndex, out: W) -> Result<()> {
        let cfg = grid.config();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["location".to_string(), "cohort".into(), "age".into()];
        header.extend(cfg.binaries.iter().cloned());
        w.write_record(&header)?;
        for p in &self.records {
            let mut row = vec![cfg.locations[p.location].clone(), cfg.cohorts[p.cohort].to_string(), p.age.to_string()];
            row.extend((0..cfg.n_binaries()).map(|i| u8::from(p.binary(i)).to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(grid: &GridIndex, input: R) -> Result<Self> {
        let cfg = grid.config();
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        let mut expected = vec!["location".to_string(), "cohort".into(), "age".into()];
        expected.extend(cfg.binaries.iter().cloned());
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::InvalidArgument(format!("survey header must be {}", expected.join(","))));
        }
        let mut records = Vec::new();
        for (row, record) in r.records().enumerate() {
            let record = record?;
            let bad = |what: &str| Error::InvalidArgument(format!("survey row {}: {what}", row + 1));
            let location = cfg.location_index(&record[0]).ok_or_else(|| bad("unknown location"))?;
            let year: i32 = record[1].parse().map_err(|_| bad("cohort is not a year"))?;
            let cohort = cfg.cohorts.iter().position(|&c| c == year).ok_or_else(|| bad("unknown cohort"))?;
            let age: i32 = record[2].parse().map_err(|_| bad("age is not an integer"))?;
            let mut binaries = 0u32;
            for i in 0..cfg.n_binaries() {
                match &record[3 + i] {
                    "0" => {}
                    "1" => binaries |= 1 << i,
                    _ => return Err(bad("binary factors must be 0 or 1")),
                }
            }
            let profile = CovariateProfile { location, cohort, age, binaries };
            grid.check(&profile).map_err(|e| bad(&e.to_string()))?;
            records.push(profile);
        }
        Ok(Self { records })
    }
}

/// Sample `n` respondents: demographics proportional to the margins with a
/// uniform age, risk factors from the true weight table of their cell.
pub fn generate_survey(
    truth: &GroundTruth,
    grid: &GridIndex,
    margins: &DemographicMargins,
    n: usize,
    seed: u64,
) -> Result<SurveySample> {
    if n == 0 {
        return Err(Error::InvalidArgument("survey size must be at least 1".into()));
    }
    if truth.weight_tables.len() != grid.n_demographic_cells() {
        return Err(Error::DimensionMismatch("truth weight tables do not match the grid".into()));
    }
    let weights: Vec<u64> = margins.counts.iter().map(|c| c.unwrap_or(0)).collect();
    if weights.len() != grid.n_demographic_cells() {
        return Err(Error::DimensionMismatch("margins do not match the grid".into()));
    }
    let demographic = WeightedIndex::new(&weights).map_err(|_| Error::InvalidArgument("margins are empty".into()))?;
    let categories = truth
        .weight_tables
        .iter()
        .map(|t| WeightedIndex::new(t).map_err(|e| Error::InvalidArgument(format!("truth weight table: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let cfg = grid.config();
    let mut rng = substream(seed, stream::SURVEY);
    let records = (0..n)
        .map(|_| {
            let d = demographic.sample(&mut rng);
            let cell = grid.demographic_from_index(d);
            let age = rng.random_range(cfg.age_min..=cfg.age_max);
            let category = categories[d].sample(&mut rng) as u32;
            CovariateProfile { location: cell.location, cohort: cell.cohort, age, binaries: cell.sex as u32 | category << 1 }
        })
        .collect();
    Ok(SurveySample { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::KernelSpec;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn desk() -> (PipelineConfig, GridIndex) {
        let cfg = PipelineConfig::desk();
        let grid = GridIndex::new(cfg.grid.clone()).unwrap();
        (cfg, grid)
    }

    #[test]
    fn truth_is_deterministic() {
        let (cfg, _) = desk();
        let a = generate_truth(&cfg, 11).unwrap();
        let b = generate_truth(&cfg, 11).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_ne!(a, generate_truth(&cfg, 12).unwrap());
        for t in &a.weight_tables {
            assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn perfectly_correlated_kernel_gives_identical_fields() {
        let (mut cfg, _) = desk();
        cfg.kernel = KernelSpec::new(4, vec![(vec![vec![0.0; 4]; 4], 1.0)]).unwrap();
        let truth = generate_truth(&cfg, 5).unwrap();
        for c in &truth.draw.field.coefficients {
            assert!(c.field0.iter().all(|&v| v == c.field0[0]));
            assert!(c.field1.iter().all(|&v| v == c.field1[0]));
        }
    }

    #[test]
    fn identity_kernel_fields_pass_independence_screen() {
        // Sign contingency table of ξ at two locations across 200 seeds.
        let (cfg, _) = desk();
        let mut table = [[0.0f64; 2]; 2];
        for seed in 0..200 {
            let truth = generate_truth(&cfg, seed).unwrap();
            let c = truth.draw.field.get(0, 1);
            table[usize::from(c.field0[0] > 0.0)][usize::from(c.field0[1] > 0.0)] += 1.0;
        }
        let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
        let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
        let mut stat = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let expected = rows[i] * cols[j] / 200.0;
                stat += (table[i][j] - expected).powi(2) / expected;
            }
        }
        let p = 1.0 - ChiSquared::new(1.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi-square {stat}, p = {p}");
    }

    #[test]
    fn zero_dispersion_reproduces_truth() {
        let (cfg, _) = desk();
        let truth = generate_truth(&cfg, 1).unwrap();
        let ens = draw_posterior_ensemble(&truth, 7, 0.0, 2).unwrap();
        assert_eq!(ens.len(), 7);
        assert!(ens.draws.iter().all(|d| *d == truth.draw));
        assert!(draw_posterior_ensemble(&truth, 0, 0.1, 2).is_err());
        assert!(draw_posterior_ensemble(&truth, 3, -0.1, 2).is_err());
    }

    #[test]
    fn ensemble_mean_is_close_to_truth() {
        let (cfg, _) = desk();
        let truth = generate_truth(&cfg, 1).unwrap();
        let (b, dispersion) = (3000, 0.1);
        let ens = draw_posterior_ensemble(&truth, b, dispersion, 99).unwrap();
        assert_eq!(ens.len(), 3000);
        let base = truth.draw.to_flat();
        let mut mean = vec![0.0; base.len()];
        for d in &ens.draws {
            for (m, v) in mean.iter_mut().zip(d.to_flat()) {
                *m += v / b as f64;
            }
        }
        let bound = 4.0 * dispersion / (b as f64).sqrt();
        for (k, (m, t)) in mean.iter().zip(&base).enumerate().step_by(7) {
            assert!((m - t).abs() < bound, "parameter {k}: {m} vs {t}");
        }
    }

    #[test]
    fn margins_regimes() {
        let (_, grid) = desk();
        let uniform = generate_margins(&grid, MarginsRegime::Uniform { mean: 250.0 }, 0).unwrap();
        assert!(uniform.counts.iter().all(|&c| c == Some(250)));
        assert_eq!(uniform.total(), 250 * grid.n_demographic_cells() as u64);

        let cv = 0.6;
        let mut values = Vec::new();
        for seed in 0..100 {
            let m = generate_margins(&grid, MarginsRegime::LogNormal { mean: 10_000.0, cv }, seed).unwrap();
            assert_eq!(m.total(), m.counts.iter().map(|c| c.unwrap()).sum::<u64>());
            values.extend(m.counts.iter().map(|c| c.unwrap() as f64));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let empirical = sd / mean;
        assert!((empirical - cv).abs() < 0.2 * cv, "cv {empirical}");
    }

    #[test]
    fn margins_csv_round_trip() {
        let (_, grid) = desk();
        let m = generate_margins(&grid, MarginsRegime::LogNormal { mean: 100.0, cv: 0.3 }, 4).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&grid, &mut buf).unwrap();
        assert!(buf.starts_with(b"location,cohort,sex,count\n"));
        assert_eq!(DemographicMargins::read_csv(&grid, buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn survey_size_and_degenerate_table() {
        let (cfg, grid) = desk();
        let mut truth = generate_truth(&cfg, 3).unwrap();
        for t in &mut truth.weight_tables {
            t.iter_mut().for_each(|v| *v = 0.0);
            t[2] = 1.0;
        }
        let margins = generate_margins(&grid, MarginsRegime::Uniform { mean: 10.0 }, 0).unwrap();
        let survey = generate_survey(&truth, &grid, &margins, 1234, 8).unwrap();
        assert_eq!(survey.len(), 1234);
        assert!(survey.records.iter().all(|p| p.risk_category() == 2));
        assert!(survey.records.iter().all(|p| grid.check(p).is_ok()));

        let mut buf = Vec::new();
        survey.write_csv(&grid, &mut buf).unwrap();
        assert_eq!(SurveySample::read_csv(&grid, buf.as_slice()).unwrap(), survey);

        let empty = DemographicMargins { counts: vec![Some(0); grid.n_demographic_cells()] };
        assert!(generate_survey(&truth, &grid, &empty, 10, 0).is_err());
        assert!(generate_survey(&truth, &grid, &margins, 0, 0).is_err());
    }

    #[test]
    fn survey_frequencies_match_truth_tables() {
        let mut cfg = PipelineConfig::desk();
        cfg.grid = GridConfig::with_dims(1, 1, 5, 3).unwrap();
        cfg.kernel = KernelSpec::identity(1);
        let grid = GridIndex::new(cfg.grid.clone()).unwrap();
        let truth = generate_truth(&cfg, 21).unwrap();
        let margins = generate_margins(&grid, MarginsRegime::Uniform { mean: 1000.0 }, 0).unwrap();
        let survey = generate_survey(&truth, &grid, &margins, 200_000, 13).unwrap();
        for d in 0..grid.n_demographic_cells() {
            let in_cell: Vec<_> = survey.records.iter().filter(|p| grid.demographic_index(grid.demographic_cell(p)) == d).collect();
            let n = in_cell.len() as f64;
            for (k, &p) in truth.weight_tables[d].iter().enumerate() {
                let freq = in_cell.iter().filter(|r| r.risk_category() == k).count() as f64 / n;
                let se = (p * (1.0 - p) / n).sqrt();
                assert!((freq - p).abs() <= 3.0 * se, "cell {d} category {k}: {freq} vs {p}");
            }
        }
    }
}
