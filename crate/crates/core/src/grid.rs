//! Covariate grid enumeration.
//!
//! Cells are ordered location-major, then cohort, then age, then the binary
//! combination. Within a combination, binary factor `i` is bit `i`, so the
//! demographic factor (sex) is the lowest bit and the remaining bits form
//! the risk category.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::GridConfig;
use crate::error::{Error, Result};

/// One cell of the covariate grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CovariateProfile {
    /// Location index into `GridConfig::locations`.
    pub location: usize,
    /// Cohort index into `GridConfig::cohorts`.
    pub cohort: usize,
    /// Age in years.
    pub age: i32,
    /// Binary factors, factor `i` at bit `i`.
    pub binaries: u32,
}

impl CovariateProfile {
    pub fn binary(&self, i: usize) -> bool {
        self.binaries >> i & 1 == 1
    }

    pub fn sex(&self) -> usize {
        (self.binaries & 1) as usize
    }

    /// Joint category of the risk factors (every binary but the first).
    pub fn risk_category(&self) -> usize {
        (self.binaries >> 1) as usize
    }
}

/// A grid dimension a conditioning set or a stratification can refer to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dimension {
    Location,
    Cohort,
    Age,
    Binary(usize),
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dimension::Location => f.write_str("location"),
            Dimension::Cohort => f.write_str("cohort"),
            Dimension::Age => f.write_str("age"),
            Dimension::Binary(i) => write!(f, "binary{i}"),
        }
    }
}

/// Index of a demographic cell: (location, cohort, sex).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DemographicCell {
    pub location: usize,
    pub cohort: usize,
    pub sex: usize,
}

/// Bijection between cell ids and covariate profiles.
#[derive(Debug, Clone)]
pub struct GridIndex {
    config: Arc<GridConfig>,
    n_locations: usize,
    n_cohorts: usize,
    n_ages: usize,
    n_combos: usize,
    len: usize,
}

impl GridIndex {
    pub fn new(config: GridConfig) -> Result<Self> {
        config.validate()?;
        let len = config.total_cells()?;
        Ok(Self {
            n_locations: config.n_locations(),
            n_cohorts: config.n_cohorts(),
            n_ages: config.n_ages(),
            n_combos: 1 << config.n_binaries(),
            len,
            config: Arc::new(config),
        })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_combos(&self) -> usize {
        self.n_combos
    }

    /// Dimensions in enumeration order.
    pub fn dimensions(&self) -> Vec<Dimension> {
        let mut dims = vec![Dimension::Location, Dimension::Cohort, Dimension::Age];
        dims.extend((0..self.config.n_binaries()).map(Dimension::Binary));
        dims
    }

    pub fn cardinality(&self, dim: Dimension) -> usize {
        match dim {
            Dimension::Location => self.n_locations,
            Dimension::Cohort => self.n_cohorts,
            Dimension::Age => self.n_ages,
            Dimension::Binary(_) => 2,
        }
    }

    pub fn dimension_name(&self, dim: Dimension) -> String {
        match dim {
            Dimension::Binary(i) => self.config.binaries[i].clone(),
            other => other.to_string(),
        }
    }

    /// Look up a dimension by its wire name.
    pub fn dimension_by_name(&self, name: &str) -> Option<Dimension> {
        match name {
            "location" | "lhu" => Some(Dimension::Location),
            "cohort" => Some(Dimension::Cohort),
            "age" => Some(Dimension::Age),
            other => self.config.binaries.iter().position(|b| b == other).map(Dimension::Binary),
        }
    }

    /// Value index of `profile` along `dim`.
    pub fn coordinate(&self, profile: &CovariateProfile, dim: Dimension) -> usize {
        match dim {
            Dimension::Location => profile.location,
            Dimension::Cohort => profile.cohort,
            Dimension::Age => (profile.age - self.config.age_min) as usize,
            Dimension::Binary(i) => (profile.binaries >> i & 1) as usize,
        }
    }

    /// Human-readable label of a value index along `dim`.
    pub fn level_label(&self, dim: Dimension, index: usize) -> String {
        match dim {
            Dimension::Location => self.config.locations[index].clone(),
            Dimension::Cohort => self.config.cohorts[index].to_string(),
            Dimension::Age => (self.config.age_min + index as i32).to_string(),
            Dimension::Binary(_) => index.to_string(),
        }
    }

    pub fn check(&self, profile: &CovariateProfile) -> Result<()> {
        if profile.location >= self.n_locations {
            return Err(Error::UnknownLocation(profile.location));
        }
        if profile.cohort >= self.n_cohorts {
            return Err(Error::UnknownCohort(profile.cohort));
        }
        if profile.age < self.config.age_min || profile.age > self.config.age_max {
            return Err(Error::OffGrid(format!("age {} outside {}-{}", profile.age, self.config.age_min, self.config.age_max)));
        }
        if profile.binaries as usize >= self.n_combos {
            return Err(Error::OffGrid(format!("binary combination {:#b} has too many factors", profile.binaries)));
        }
        let year = self.year(profile);
        if year < self.config.year_min || year > self.config.year_max {
            return Err(Error::OffGrid(format!("survey year {year} outside the configured window")));
        }
        Ok(())
    }

    pub fn cell_id(&self, profile: &CovariateProfile) -> Result<usize> {
        self.check(profile)?;
        let age = (profile.age - self.config.age_min) as usize;
        Ok(((profile.location * self.n_cohorts + profile.cohort) * self.n_ages + age) * self.n_combos
            + profile.binaries as usize)
    }

    /// Inverse of [`cell_id`](Self::cell_id). Panics on out-of-range ids.
    pub fn profile(&self, id: usize) -> CovariateProfile {
        assert!(id < self.len, "cell id {id} out of range");
        let binaries = (id % self.n_combos) as u32;
        let rest = id / self.n_combos;
        let age = rest % self.n_ages;
        let rest = rest / self.n_ages;
        let cohort = rest % self.n_cohorts;
        let location = rest / self.n_cohorts;
        CovariateProfile { location, cohort, age: self.config.age_min + age as i32, binaries }
    }

    /// Survey year of a profile: birth cohort plus age.
    pub fn year(&self, profile: &CovariateProfile) -> i32 {
        self.config.cohorts[profile.cohort] + profile.age
    }

    pub fn n_demographic_cells(&self) -> usize {
        self.n_locations * self.n_cohorts * 2
    }

    pub fn demographic_cell(&self, profile: &CovariateProfile) -> DemographicCell {
        DemographicCell { location: profile.location, cohort: profile.cohort, sex: profile.sex() }
    }

    pub fn demographic_index(&self, cell: DemographicCell) -> usize {
        (cell.location * self.n_cohorts + cell.cohort) * 2 + cell.sex
    }

    pub fn demographic_from_index(&self, index: usize) -> DemographicCell {
        DemographicCell { location: index / 2 / self.n_cohorts, cohort: index / 2 % self.n_cohorts, sex: index % 2 }
    }

    pub fn profiles(&self) -> impl Iterator<Item = CovariateProfile> + '_ {
        (0..self.len).map(|id| self.profile(id))
    }
}

/// Build the grid index for a configuration.
pub fn enumerate_grid(config: &GridConfig) -> Result<GridIndex> {
    GridIndex::new(config.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn full_scale_dimensions() {
        let twelve_ages = GridConfig::with_dims(107, 5, 12, 4).unwrap();
        assert_eq!(enumerate_grid(&twelve_ages).unwrap().len(), 102_720);
        let sixteen_ages = GridConfig::with_dims(107, 5, 16, 4).unwrap();
        assert_eq!(enumerate_grid(&sixteen_ages).unwrap().len(), 136_960);
    }

    #[test]
    fn desk_dimensions() {
        assert_eq!(enumerate_grid(&GridConfig::desk()).unwrap().len(), 480);
    }

    #[test]
    fn round_trip_random_ids() {
        let grid = enumerate_grid(&GridConfig::with_dims(107, 5, 16, 4).unwrap()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let id = rng.random_range(0..grid.len());
            assert_eq!(grid.cell_id(&grid.profile(id)).unwrap(), id);
        }
    }

    #[test]
    fn ordering_is_location_major() {
        let grid = enumerate_grid(&GridConfig::desk()).unwrap();
        let first = grid.profile(0);
        assert_eq!((first.location, first.cohort, first.age, first.binaries), (0, 0, 60, 0));
        assert_eq!(grid.profile(1).binaries, 1);
        assert_eq!(grid.profile(8).age, 61);
        assert_eq!(grid.profile(40).cohort, 1);
        assert_eq!(grid.profile(120).location, 1);
    }

    #[test]
    fn off_grid_profiles_are_rejected() {
        let grid = enumerate_grid(&GridConfig::desk()).unwrap();
        let ok = CovariateProfile { location: 3, cohort: 2, age: 64, binaries: 7 };
        assert!(grid.cell_id(&ok).is_ok());
        assert!(matches!(grid.cell_id(&CovariateProfile { location: 4, ..ok }), Err(Error::UnknownLocation(4))));
        assert!(matches!(grid.cell_id(&CovariateProfile { cohort: 3, ..ok }), Err(Error::UnknownCohort(3))));
        assert!(grid.cell_id(&CovariateProfile { age: 65, ..ok }).is_err());
        assert!(grid.cell_id(&CovariateProfile { binaries: 8, ..ok }).is_err());
    }

    #[test]
    fn demographic_index_round_trips() {
        let grid = enumerate_grid(&GridConfig::desk()).unwrap();
        for i in 0..grid.n_demographic_cells() {
            assert_eq!(grid.demographic_index(grid.demographic_from_index(i)), i);
        }
    }
}
