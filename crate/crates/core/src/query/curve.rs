use serde::{Deserialize, Serialize};

use super::aggregate::{accumulate_cell, disease_index, ParticleSums};
use super::band::{credible_band, DEFAULT_BAND_LEVEL};
use crate::conditioning::{ConditioningSet, Constraint};
use crate::error::{Error, Result};
use crate::grid::{Dimension, GridIndex};
use crate::store::ParticleStore;

/// Most curves a stratified view may carry.
pub const MAX_STRATA: usize = 5;

/// Multiplier of the per-100,000 scale.
pub const PER_100K: f64 = 100_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum View {
    ByYear,
    ByAge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scale {
    Prevalence,
    #[serde(rename = "PER_100K")]
    Per100k,
    Absolute,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrevalenceQuery {
    pub disease: String,
    pub view: View,
    pub conditioning: ConditioningSet,
    pub stratify_by: Option<Dimension>,
    pub bands: bool,
    pub band_level: f64,
    /// Pair each particle with its own weight replicate, carrying the
    /// uncertainty of the risk-factor distribution into the bands.
    pub replicate_resolved: bool,
    pub scale: Scale,
}

impl PrevalenceQuery {
    pub fn new(disease: impl Into<String>, view: View) -> Self {
        Self {
            disease: disease.into(),
            view,
            conditioning: ConditioningSet::free(),
            stratify_by: None,
            bands: true,
            band_level: DEFAULT_BAND_LEVEL,
            replicate_resolved: true,
            scale: Scale::Prevalence,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    /// Year or age.
    pub x: i32,
    pub mean: f64,
    pub band: Option<(f64, f64)>,
    /// Population share of the point's cells under the mean weights.
    pub weight: f64,
    /// Census population of the point's cells; `None` without margins.
    pub population: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrevalenceCurve {
    pub label: String,
    /// Value index of the stratum, when stratified.
    pub level: Option<usize>,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet {
    pub view: View,
    /// Axis values having at least one supported point, ascending.
    pub axis: Vec<i32>,
    pub curves: Vec<PrevalenceCurve>,
}

/// Value indices a query stratifies over.
pub fn strata_levels(grid: &GridIndex, cond: &ConditioningSet, dim: Dimension) -> Result<Vec<usize>> {
    let name = grid.dimension_name(dim);
    if let Constraint::Fixed(_) = cond.constraint(dim) {
        return Err(Error::InvalidArgument(format!("cannot stratify by `{name}`: it is fixed by a filter")));
    }
    let levels = cond.allowed_values(grid, dim);
    if levels.len() > MAX_STRATA {
        let labels: Vec<String> = levels.iter().map(|&v| grid.level_label(dim, v)).collect();
        return Err(Error::TooManyStrata {
            dimension: name.clone(),
            levels: levels.len(),
            max: MAX_STRATA,
            guidance: format!(
                "restrict it to at most {MAX_STRATA} of [{}], e.g. {}",
                labels.join(", "),
                labels.iter().take(MAX_STRATA).map(|l| format!("f={name}:{l}")).collect::<Vec<_>>().join("&")
            ),
        });
    }
    Ok(levels)
}

/// Population per cell from the store's census margins and mean weights.
fn cell_population(store: &ParticleStore) -> Option<impl Fn(usize) -> f64 + '_> {
    let population = store.population()?;
    let grid = store.grid();
    if population.margins.counts.iter().any(Option::is_none) {
        return None;
    }
    Some(move |cell: usize| {
        let p = grid.profile(cell);
        let d = grid.demographic_index(grid.demographic_cell(&p));
        population.margins.counts[d].unwrap_or(0) as f64 * population.table.entries[d].mean[p.risk_category()]
    })
}

/// Prevalence curves for a query; one curve, or one per stratum.
pub fn curve(store: &ParticleStore, query: &PrevalenceQuery) -> Result<CurveSet> {
    let grid = store.grid();
    let cfg = grid.config();
    let disease = cfg.diseases.index_of(&query.disease)?;
    disease_index(store, disease)?;
    if !(query.band_level > 0.0 && query.band_level < 1.0) {
        return Err(Error::InvalidArgument(format!("band level {} is not in (0, 1)", query.band_level)));
    }
    let cond = &query.conditioning;
    cond.validate(grid)?;
    let levels = match query.stratify_by {
        Some(dim) => strata_levels(grid, cond, dim)?,
        None => vec![0],
    };
    let cells = cond.cells(grid);
    if cells.is_empty() {
        return Err(Error::EmptySubgroup("no grid cell matches the filters".into()));
    }

    let (origin, n_points) = match query.view {
        View::ByYear => (cfg.year_min, cfg.n_years()),
        View::ByAge => (cfg.age_min, cfg.n_ages()),
    };
    let n_levels = levels.len();
    let p = store.particles();
    let mut sums: Vec<ParticleSums> = (0..n_points * n_levels).map(|_| ParticleSums::new(p)).collect();
    let population = cell_population(store);
    let mut pop = vec![0.0; n_points * n_levels];
    for &cell in &cells {
        let profile = grid.profile(cell);
        let x = match query.view {
            View::ByYear => grid.year(&profile),
            View::ByAge => profile.age,
        };
        let point = (x - origin) as usize;
        let level = match query.stratify_by {
            Some(dim) => {
                let v = grid.coordinate(&profile, dim);
                levels.iter().position(|&l| l == v).expect("selected cell lies in an allowed level")
            }
            None => 0,
        };
        let slot = point * n_levels + level;
        accumulate_cell(store, disease, cell, query.replicate_resolved, &mut sums[slot]);
        if let Some(f) = &population {
            pop[slot] += f(cell);
        }
    }

    let axis: Vec<usize> =
        (0..n_points).filter(|&i| (0..n_levels).any(|l| sums[i * n_levels + l].is_supported())).collect();
    if axis.is_empty() {
        return Err(Error::EmptySubgroup("the selected cells carry zero population weight".into()));
    }

    let mut curves = Vec::with_capacity(n_levels);
    for (li, &level) in levels.iter().enumerate() {
        let mut points = Vec::new();
        for &i in &axis {
            let slot = i * n_levels + li;
            let s = &sums[slot];
            if !s.is_supported() {
                continue;
            }
            let particles = s.prevalences()?;
            let mean = particles.iter().sum::<f64>() / p as f64;
            let band = if query.bands { Some(credible_band(&particles, query.band_level)?) } else { None };
            points.push(CurvePoint {
                x: origin + i as i32,
                mean,
                band,
                weight: s.weight,
                population: population.as_ref().map(|_| pop[slot]),
            });
        }
        let (label, level) = match query.stratify_by {
            Some(dim) => (format!("{}={}", grid.dimension_name(dim), grid.level_label(dim, level)), Some(level)),
            None => ("all".to_string(), None),
        };
        curves.push(PrevalenceCurve { label, level, points });
    }
    Ok(CurveSet { view: query.view, axis: axis.iter().map(|&i| origin + i as i32).collect(), curves })
}

/// Rescale a prevalence curve to expected case counts.
///
/// `Per100k` multiplies by 100,000; `Absolute` by the census population of
/// each point's subgroup.
pub fn expected_cases(curve: &PrevalenceCurve, scale: Scale) -> Result<PrevalenceCurve> {
    let mut out = curve.clone();
    for point in &mut out.points {
        let factor = match scale {
            Scale::Prevalence => 1.0,
            Scale::Per100k => PER_100K,
            Scale::Absolute => point.population.ok_or_else(|| {
                Error::MissingMargins(format!("no census population for point {} of `{}`", point.x, curve.label))
            })?,
        };
        point.mean *= factor;
        point.band = point.band.map(|(lo, hi)| (lo * factor, hi * factor));
    }
    Ok(out)
}
