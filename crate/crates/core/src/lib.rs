//! Precomputed posterior-predictive prevalence for chronic diseases.
//!
//! The pipeline: simulate a posterior ensemble of a spatio-temporal
//! multivariate logistic model ([`synthetic`]), estimate the joint
//! covariate weights of the population ([`weights`]), precompute a thinned
//! particle sample of `p(y*, x | I)` for every grid cell ([`store`]), and
//! answer subgroup queries by weighted summation ([`query`]).

pub mod conditioning;
pub mod config;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod query;
pub mod rng;
pub mod store;
pub mod synthetic;
pub mod validation;
pub mod weights;

pub use conditioning::{ConditioningSet, Constraint};
pub use config::{DiseasePanel, GenerationSettings, GridConfig, MarginsRegime, PipelineConfig, Region};
pub use error::{Error, Result};
pub use grid::{enumerate_grid, CovariateProfile, DemographicCell, Dimension, GridIndex};
pub use model::{inv_logit, logistic, DesignLayout, FieldShape, KernelSpec, ParameterDraw};
pub use query::{
    aggregate_prevalence, catalog, credible_band, curve, expected_cases, parse_query, run_query, Catalog,
    CurveResponse, PrevalenceQuery, Scale, View,
};
pub use store::{read_store, write_store, ParticleBlock, ParticleStore, StoreParams, StoredWeights};
pub use synthetic::{DemographicMargins, GroundTruth, PosteriorEnsemble, SurveySample};
pub use weights::{JointWeights, WeightTable};
