//! Aggregation of stored particles into subgroup prevalence curves.

mod aggregate;
mod band;
mod curve;
mod wire;

pub use aggregate::{accumulate_cell, aggregate_prevalence, aggregate_sums, ParticleSums};
pub use band::{credible_band, quantile_sorted, DEFAULT_BAND_LEVEL};
pub use curve::{
    curve, expected_cases, strata_levels, CurvePoint, CurveSet, PrevalenceCurve, PrevalenceQuery, Scale, View,
    MAX_STRATA, PER_100K,
};
pub use wire::{
    catalog, parse_filters, parse_level, parse_query, parse_scale, parse_view, run_query, Catalog, CurveResponse,
    DiseaseEntry, DimensionEntry, RegionEntry, Series, LICENSE,
};
