//! Partial covariate assignments selecting a subpopulation.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::grid::{CovariateProfile, Dimension, GridIndex};

/// Constraint on one grid dimension, in value indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Constraint {
    Free,
    Fixed(usize),
    Set(BTreeSet<usize>),
}

impl Constraint {
    pub fn allows(&self, value: usize) -> bool {
        match self {
            Constraint::Free => true,
            Constraint::Fixed(v) => *v == value,
            Constraint::Set(s) => s.contains(&value),
        }
    }

    fn intersect(&self, other: &Constraint) -> Constraint {
        match (self, other) {
            (Constraint::Free, c) | (c, Constraint::Free) => c.clone(),
            (a, b) => {
                let values = |c: &Constraint| -> BTreeSet<usize> {
                    match c {
                        Constraint::Fixed(v) => BTreeSet::from([*v]),
                        Constraint::Set(s) => s.clone(),
                        Constraint::Free => unreachable!(),
                    }
                };
                let common: BTreeSet<usize> = values(a).intersection(&values(b)).copied().collect();
                if common.len() == 1 {
                    Constraint::Fixed(*common.iter().next().unwrap())
                } else {
                    Constraint::Set(common)
                }
            }
        }
    }
}

/// A conditioning set `s`: per-dimension constraints, FREE when absent.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConditioningSet {
    constraints: BTreeMap<Dimension, Constraint>,
}

impl ConditioningSet {
    /// Everything free: the whole population.
    pub fn free() -> Self {
        Self::default()
    }

    /// Fix every dimension to the coordinates of `profile`.
    pub fn exact(grid: &GridIndex, profile: &CovariateProfile) -> Self {
        let mut set = Self::free();
        for dim in grid.dimensions() {
            set = set.fix(dim, grid.coordinate(profile, dim));
        }
        set
    }

    pub fn fix(mut self, dim: Dimension, value: usize) -> Self {
        self.constraints.insert(dim, Constraint::Fixed(value));
        self
    }

    pub fn restrict(mut self, dim: Dimension, values: impl IntoIterator<Item = usize>) -> Self {
        self.constraints.insert(dim, Constraint::Set(values.into_iter().collect()));
        self
    }

    pub fn with(mut self, dim: Dimension, constraint: Constraint) -> Self {
        match constraint {
            Constraint::Free => self.constraints.remove(&dim),
            c => self.constraints.insert(dim, c),
        };
        self
    }

    pub fn constraint(&self, dim: Dimension) -> &Constraint {
        self.constraints.get(&dim).unwrap_or(&Constraint::Free)
    }

    pub fn constrained_dimensions(&self) -> impl Iterator<Item = Dimension> + '_ {
        self.constraints.keys().copied()
    }

    pub fn is_free(&self, dim: Dimension) -> bool {
        matches!(self.constraint(dim), Constraint::Free)
    }

    /// Conjunction `self ∧ other`.
    pub fn and(&self, other: &ConditioningSet) -> ConditioningSet {
        let mut out = self.clone();
        for (dim, c) in &other.constraints {
            let merged = out.constraint(*dim).intersect(c);
            out.constraints.insert(*dim, merged);
        }
        out
    }

    /// Check that every referenced value exists on the grid.
    pub fn validate(&self, grid: &GridIndex) -> Result<()> {
        for (dim, c) in &self.constraints {
            if let Dimension::Binary(i) = dim {
                if *i >= grid.config().n_binaries() {
                    return Err(Error::OffGrid(format!("no binary factor {i}")));
                }
            }
            let card = grid.cardinality(*dim);
            let bad = match c {
                Constraint::Free => None,
                Constraint::Fixed(v) => (*v >= card).then_some(*v),
                Constraint::Set(s) => s.iter().copied().find(|&v| v >= card),
            };
            if let Some(v) = bad {
                return Err(Error::OffGrid(format!("value {v} not on dimension {}", grid.dimension_name(*dim))));
            }
        }
        Ok(())
    }

    pub fn allows(&self, grid: &GridIndex, profile: &CovariateProfile) -> bool {
        self.constraints.iter().all(|(dim, c)| c.allows(grid.coordinate(profile, *dim)))
    }

    /// Allowed value indices along `dim`, ascending.
    pub fn allowed_values(&self, grid: &GridIndex, dim: Dimension) -> Vec<usize> {
        let card = grid.cardinality(dim);
        match self.constraint(dim) {
            Constraint::Free => (0..card).collect(),
            Constraint::Fixed(v) => if *v < card { vec![*v] } else { Vec::new() },
            Constraint::Set(s) => s.iter().copied().filter(|&v| v < card).collect(),
        }
    }

    /// Ids of all grid cells satisfying the set, ascending.
    pub fn cells(&self, grid: &GridIndex) -> Vec<usize> {
        let cfg = grid.config();
        let locations = self.allowed_values(grid, Dimension::Location);
        let cohorts = self.allowed_values(grid, Dimension::Cohort);
        let ages = self.allowed_values(grid, Dimension::Age);
        let combos: Vec<usize> = (0..grid.n_combos())
            .filter(|&combo| {
                (0..cfg.n_binaries()).all(|i| self.constraint(Dimension::Binary(i)).allows(combo >> i & 1))
            })
            .collect();
        let (n_c, n_a, n_b) = (cfg.n_cohorts(), cfg.n_ages(), grid.n_combos());
        let mut out = Vec::with_capacity(locations.len() * cohorts.len() * ages.len() * combos.len());
        for &l in &locations {
            for &c in &cohorts {
                for &a in &ages {
                    let base = ((l * n_c + c) * n_a + a) * n_b;
                    out.extend(combos.iter().map(|&b| base + b));
                }
            }
        }
        out
    }
}
