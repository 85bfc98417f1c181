//! Wire representation of queries and answers, shared by the HTTP service
//! and the command line so both emit byte-identical JSON.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::band::DEFAULT_BAND_LEVEL;
use super::curve::{curve, expected_cases, PrevalenceQuery, Scale, View, MAX_STRATA};
use crate::conditioning::{ConditioningSet, Constraint};
use crate::error::{Error, Result};
use crate::grid::{Dimension, GridIndex};
use crate::store::ParticleStore;

pub const LICENSE: &str = "CC BY-NC-SA 4.0";

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("parameter `{key}`: expected true or false, got `{value}`"))),
    }
}

pub fn parse_view(value: &str) -> Result<View> {
    match value.to_ascii_lowercase().as_str() {
        "year" | "by_year" | "by-year" => Ok(View::ByYear),
        "age" | "by_age" | "by-age" => Ok(View::ByAge),
        _ => Err(Error::InvalidArgument(format!("parameter `view`: expected BY_YEAR or BY_AGE, got `{value}`"))),
    }
}

pub fn parse_scale(value: &str) -> Result<Scale> {
    match value.to_ascii_lowercase().as_str() {
        "prevalence" => Ok(Scale::Prevalence),
        "per100k" | "per_100k" | "per-100k" => Ok(Scale::Per100k),
        "absolute" => Ok(Scale::Absolute),
        _ => Err(Error::InvalidArgument(format!(
            "parameter `scale`: expected PREVALENCE, PER_100K or ABSOLUTE, got `{value}`"
        ))),
    }
}

/// Value index of a label along `dim`.
pub fn parse_level(grid: &GridIndex, dim: Dimension, label: &str) -> Result<usize> {
    let cfg = grid.config();
    let unknown = || Error::UnknownLevel { dimension: grid.dimension_name(dim), value: label.to_string() };
    match dim {
        Dimension::Location => cfg.location_index(label).ok_or_else(unknown),
        Dimension::Cohort => {
            let year: i32 = label.parse().map_err(|_| bad_filter(grid, dim, label))?;
            cfg.cohorts.iter().position(|&c| c == year).ok_or_else(|| bad_filter(grid, dim, label))
        }
        Dimension::Age => {
            let age: i32 = label.parse().map_err(|_| bad_filter(grid, dim, label))?;
            if (cfg.age_min..=cfg.age_max).contains(&age) {
                Ok((age - cfg.age_min) as usize)
            } else {
                Err(bad_filter(grid, dim, label))
            }
        }
        Dimension::Binary(_) => match label {
            "0" => Ok(0),
            "1" => Ok(1),
            _ => Err(bad_filter(grid, dim, label)),
        },
    }
}

fn bad_filter(grid: &GridIndex, dim: Dimension, label: &str) -> Error {
    Error::InvalidArgument(format!("parameter `f`: `{label}` is not a level of `{}`", grid.dimension_name(dim)))
}

/// Build a conditioning set from `dimension:value[,value...]` filters.
///
/// Repeated filters on one dimension accumulate; `region:<id>` selects the
/// region's locations.
pub fn parse_filters<S: AsRef<str>>(grid: &GridIndex, filters: &[S]) -> Result<ConditioningSet> {
    let mut selected: BTreeMap<Dimension, BTreeSet<usize>> = BTreeMap::new();
    for filter in filters {
        let filter = filter.as_ref();
        let (name, values) = filter
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("parameter `f`: `{filter}` is not dimension:value")))?;
        let name = name.trim();
        for value in values.split(',').map(str::trim) {
            if value.is_empty() {
                return Err(Error::InvalidArgument(format!("parameter `f`: empty value in `{filter}`")));
            }
            if name == "region" {
                let region = grid
                    .config()
                    .regions
                    .iter()
                    .find(|r| r.id == value)
                    .ok_or_else(|| Error::UnknownLevel { dimension: "region".into(), value: value.into() })?;
                let entry = selected.entry(Dimension::Location).or_default();
                for loc in &region.locations {
                    entry.insert(parse_level(grid, Dimension::Location, loc)?);
                }
                continue;
            }
            let dim = grid
                .dimension_by_name(name)
                .ok_or_else(|| Error::InvalidArgument(format!("parameter `f`: unknown dimension `{name}`")))?;
            selected.entry(dim).or_default().insert(parse_level(grid, dim, value)?);
        }
    }
    let mut cond = ConditioningSet::free();
    for (dim, values) in selected {
        cond = if values.len() == 1 {
            cond.fix(dim, *values.iter().next().unwrap())
        } else {
            cond.restrict(dim, values)
        };
    }
    Ok(cond)
}

/// Parse URL-style parameters into a query. Keys: `disease` (required),
/// `view`, `f` (repeatable), `stratify`, `bands`, `level`, `scale`,
/// `replicates`.
pub fn parse_query<K: AsRef<str>, V: AsRef<str>>(grid: &GridIndex, params: &[(K, V)]) -> Result<PrevalenceQuery> {
    let mut disease = None;
    let mut query = PrevalenceQuery::new(String::new(), View::ByYear);
    let mut filters = Vec::new();
    let mut stratify = None;
    for (key, value) in params {
        let (key, value) = (key.as_ref(), value.as_ref());
        match key {
            "disease" => disease = Some(value.to_string()),
            "view" => query.view = parse_view(value)?,
            "f" => filters.push(value.to_string()),
            "stratify" if value.is_empty() => stratify = None,
            "stratify" => {
                stratify = Some(grid.dimension_by_name(value).ok_or_else(|| {
                    Error::InvalidArgument(format!("parameter `stratify`: unknown dimension `{value}`"))
                })?)
            }
            "bands" => query.bands = parse_bool(key, value)?,
            "level" => {
                query.band_level = value
                    .parse::<f64>()
                    .ok()
                    .filter(|l| *l > 0.0 && *l < 1.0)
                    .ok_or_else(|| Error::InvalidArgument(format!("parameter `level`: `{value}` is not in (0, 1)")))?
            }
            "scale" => query.scale = parse_scale(value)?,
            "replicates" => query.replicate_resolved = parse_bool(key, value)?,
            other => return Err(Error::InvalidArgument(format!("unknown parameter `{other}`"))),
        }
    }
    query.disease = disease.ok_or_else(|| Error::InvalidArgument("parameter `disease` is required".into()))?;
    grid.config().diseases.index_of(&query.disease)?;
    query.conditioning = parse_filters(grid, &filters)?;
    query.stratify_by = stratify;
    Ok(query)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    /// Aligned with the response axis; `null` where the stratum is empty.
    pub mean: Vec<Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lo: Option<Vec<Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hi: Option<Vec<Option<f64>>>,
    /// Population share of each point's subgroup.
    pub weight: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveResponse {
    pub disease: String,
    pub disease_name: String,
    pub view: View,
    pub scale: Scale,
    pub unit: String,
    pub filters: BTreeMap<String, Vec<String>>,
    pub stratify: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub band_level: Option<f64>,
    pub replicate_resolved: bool,
    pub axis: Vec<i32>,
    pub series: Vec<Series>,
    pub store_digest: String,
}

fn unit(scale: Scale) -> &'static str {
    match scale {
        Scale::Prevalence => "proportion",
        Scale::Per100k => "cases per 100,000",
        Scale::Absolute => "cases",
    }
}

/// Run a query and package the result for the wire.
pub fn run_query(store: &ParticleStore, query: &PrevalenceQuery) -> Result<CurveResponse> {
    let grid = store.grid();
    let cfg = grid.config();
    let set = curve(store, query)?;
    let mut series = Vec::with_capacity(set.curves.len());
    for c in &set.curves {
        let scaled = expected_cases(c, query.scale)?;
        let at = |x: i32| scaled.points.iter().find(|p| p.x == x);
        let mean = set.axis.iter().map(|&x| at(x).map(|p| p.mean)).collect();
        let weight = set.axis.iter().map(|&x| at(x).map(|p| p.weight)).collect();
        let (lo, hi) = if query.bands {
            (
                Some(set.axis.iter().map(|&x| at(x).and_then(|p| p.band).map(|b| b.0)).collect()),
                Some(set.axis.iter().map(|&x| at(x).and_then(|p| p.band).map(|b| b.1)).collect()),
            )
        } else {
            (None, None)
        };
        series.push(Series { label: c.label.clone(), mean, lo, hi, weight });
    }
    let mut filters = BTreeMap::new();
    for dim in query.conditioning.constrained_dimensions() {
        if !matches!(query.conditioning.constraint(dim), Constraint::Free) {
            let labels =
                query.conditioning.allowed_values(grid, dim).into_iter().map(|v| grid.level_label(dim, v)).collect();
            filters.insert(grid.dimension_name(dim), labels);
        }
    }
    let disease = cfg.diseases.index_of(&query.disease)?;
    Ok(CurveResponse {
        disease: query.disease.clone(),
        disease_name: cfg.diseases.names[disease].clone(),
        view: query.view,
        scale: query.scale,
        unit: unit(query.scale).to_string(),
        filters,
        stratify: query.stratify_by.map(|d| grid.dimension_name(d)),
        band_level: query.bands.then_some(query.band_level),
        replicate_resolved: query.replicate_resolved,
        axis: set.axis,
        series,
        store_digest: store.digest_hex(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseEntry {
    pub id: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionEntry {
    pub id: String,
    pub locations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionEntry {
    pub name: String,
    pub levels: Vec<String>,
}

/// Everything a client needs to build valid queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub diseases: Vec<DiseaseEntry>,
    pub regions: Vec<RegionEntry>,
    pub locations: Vec<String>,
    pub cohorts: Vec<i32>,
    pub age_span: [i32; 2],
    pub year_window: [i32; 2],
    pub dimensions: Vec<DimensionEntry>,
    /// Dimensions with at most the maximum number of strata.
    pub stratifiable: Vec<String>,
    pub max_strata: usize,
    pub default_band_level: f64,
    pub particles: usize,
    pub license: String,
    pub store_digest: String,
}

pub fn catalog(store: &ParticleStore) -> Catalog {
    let grid = store.grid();
    let cfg = grid.config();
    let dimensions: Vec<DimensionEntry> = grid
        .dimensions()
        .into_iter()
        .map(|d| DimensionEntry {
            name: grid.dimension_name(d),
            levels: (0..grid.cardinality(d)).map(|v| grid.level_label(d, v)).collect(),
        })
        .collect();
    Catalog {
        diseases: cfg
            .diseases
            .ids
            .iter()
            .zip(&cfg.diseases.names)
            .map(|(id, name)| DiseaseEntry { id: id.clone(), name: name.clone() })
            .collect(),
        regions: cfg.regions.iter().map(|r| RegionEntry { id: r.id.clone(), locations: r.locations.clone() }).collect(),
        locations: cfg.locations.clone(),
        cohorts: cfg.cohorts.clone(),
        age_span: [cfg.age_min, cfg.age_max],
        year_window: [cfg.year_min, cfg.year_max],
        stratifiable: dimensions.iter().filter(|d| d.levels.len() <= MAX_STRATA).map(|d| d.name.clone()).collect(),
        dimensions,
        max_strata: MAX_STRATA,
        default_band_level: DEFAULT_BAND_LEVEL,
        particles: store.particles(),
        license: LICENSE.to_string(),
        store_digest: store.digest_hex(),
    }
}
