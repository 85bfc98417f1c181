//! The multivariate logistic model.
//!
//! For a profile `x` in location `l` and cohort `c`, disease `j` has linear
//! predictor `η_j = Σ_h β_jh(l, c) x_h + γ_j ε` and probability
//! `π_j = logit⁻¹(η_j)`. Coefficients evolve linearly over cohorts:
//!
//! ```text
//! β_jh(l, c) = β⁰_jh + λ⁰_jh ξ⁰_jh(l) + (c − c₀) λ¹_jh ξ¹_jh(l)
//! ```
//!
//! where the location fields `ξ` are standard Gaussian with a correlation
//! matrix built as a convex combination of kernels `exp(−D_m)`.
//!
//! The design vector is `[1, standardized age, binary factors...]`, see
//! [`DesignLayout`]. Cohort offsets `c − c₀` are counted in cohort steps.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::GridConfig;
use crate::error::{Error, Result};
use crate::grid::CovariateProfile;
use crate::linalg;

/// Logistic function. Rejects non-finite input.
pub fn inv_logit(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite("inv_logit argument"));
    }
    Ok(logistic(x))
}

/// Numerically stable logistic for already-validated input.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Identifies the column order of the design vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignLayout {
    pub tag: u16,
    pub columns: Vec<String>,
}

impl DesignLayout {
    /// Tag of the `[intercept, age, binaries...]` layout.
    pub const INTERCEPT_AGE_BINARIES: u16 = 1;

    pub fn for_grid(grid: &GridConfig) -> Self {
        let mut columns = vec!["intercept".to_string(), "age_std".to_string()];
        columns.extend(grid.binaries.iter().cloned());
        Self { tag: Self::INTERCEPT_AGE_BINARIES, columns }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }
}

/// Number of design columns for a grid.
pub fn n_covariates(grid: &GridConfig) -> usize {
    2 + grid.n_binaries()
}

/// Design vector of a profile.
pub fn design_vector(grid: &GridConfig, profile: &CovariateProfile) -> Vec<f64> {
    let mut x = Vec::with_capacity(n_covariates(grid));
    x.push(1.0);
    x.push(grid.standardized_age(profile.age));
    x.extend((0..grid.n_binaries()).map(|i| if profile.binary(i) { 1.0 } else { 0.0 }));
    x
}

/// Distance-based kernel components mixed into the location correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    n: usize,
    components: Vec<(DMatrix<f64>, f64)>,
}

impl KernelSpec {
    pub fn new(n: usize, components: Vec<(Vec<Vec<f64>>, f64)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Kernel("at least one kernel component is required".into()));
        }
        let mut total = 0.0;
        let mut out = Vec::with_capacity(components.len());
        for (m, (rows, weight)) in components.into_iter().enumerate() {
            if !(weight >= 0.0 && weight.is_finite()) {
                return Err(Error::Kernel(format!("component {m} has invalid weight {weight}")));
            }
            total += weight;
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return Err(Error::Kernel(format!("component {m} is not {n}x{n}")));
            }
            let d = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
            for i in 0..n {
                if d[(i, i)] != 0.0 {
                    return Err(Error::Kernel(format!("component {m} has non-zero diagonal at {i}")));
                }
                for j in 0..n {
                    let (a, b) = (d[(i, j)], d[(j, i)]);
                    if a.is_nan() || a < 0.0 {
                        return Err(Error::Kernel(format!("component {m} has invalid distance at ({i},{j})")));
                    }
                    let same = a == b || (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
                    if !same {
                        return Err(Error::Kernel(format!("component {m} is asymmetric at ({i},{j})")));
                    }
                }
            }
            out.push((d, weight));
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Kernel(format!("mixing weights sum to {total}, not 1")));
        }
        Ok(Self { n, components: out })
    }

    /// Single component with infinite off-diagonal distances: independent locations.
    pub fn identity(n: usize) -> Self {
        let d = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { f64::INFINITY });
        Self { n, components: vec![(d, 1.0)] }
    }

    pub fn n_locations(&self) -> usize {
        self.n
    }

    pub fn components(&self) -> &[(DMatrix<f64>, f64)] {
        &self.components
    }
}

/// Raw convex combination `Σ_m w_m exp(−D_m)`.
pub fn kernel_combination(spec: &KernelSpec) -> DMatrix<f64> {
    let n = spec.n;
    let mut m = DMatrix::zeros(n, n);
    for (d, w) in &spec.components {
        for j in 0..n {
            for i in 0..n {
                m[(i, j)] += w * (-d[(i, j)]).exp();
            }
        }
    }
    m
}

/// Location correlation matrix, repaired to positive semidefinite when needed.
#[derive(Debug, Clone)]
pub struct KernelCorrelation {
    pub matrix: DMatrix<f64>,
    pub repaired: bool,
}

/// Eigenvalues below `-REPAIR_TOL` trigger the PSD repair.
const REPAIR_TOL: f64 = 1e-10;

pub fn kernel_correlation(spec: &KernelSpec) -> KernelCorrelation {
    let raw = kernel_combination(spec);
    let repaired = spec.n > 1 && linalg::min_eigenvalue(&raw) < -REPAIR_TOL;
    let mut matrix = if repaired { linalg::nearest_correlation(&raw) } else { raw };
    linalg::finalize_correlation(&mut matrix);
    KernelCorrelation { matrix, repaired }
}

/// Parameters of one `β_jh(·,·)` trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    /// β⁰: level shared by all locations.
    pub intercept: f64,
    /// λ⁰: scale of the location field at the base cohort.
    pub scale0: f64,
    /// λ¹: scale of the per-cohort slope field.
    pub scale1: f64,
    /// ξ⁰: one value per location.
    pub field0: Vec<f64>,
    /// ξ¹: one value per location.
    pub field1: Vec<f64>,
}

impl Coefficient {
    pub fn constant(value: f64, n_locations: usize) -> Self {
        Self {
            intercept: value,
            scale0: 0.0,
            scale1: 0.0,
            field0: vec![0.0; n_locations],
            field1: vec![0.0; n_locations],
        }
    }

    /// `β⁰ + λ⁰ξ⁰(l) + (c − c₀)λ¹ξ¹(l)`, no bounds checks.
    #[inline]
    pub fn value(&self, location: usize, cohort_offset: f64) -> f64 {
        self.intercept + self.scale0 * self.field0[location] + cohort_offset * self.scale1 * self.field1[location]
    }
}

/// Shape of a coefficient field; fixes the flat parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldShape {
    pub n_diseases: usize,
    pub n_covariates: usize,
    pub n_locations: usize,
    pub n_cohorts: usize,
    pub base_cohort: usize,
}

impl FieldShape {
    pub fn for_grid(grid: &GridConfig) -> Self {
        Self {
            n_diseases: grid.diseases.len(),
            n_covariates: n_covariates(grid),
            n_locations: grid.n_locations(),
            n_cohorts: grid.n_cohorts(),
            base_cohort: 0,
        }
    }

    /// Number of scalars in a flattened [`ParameterDraw`].
    pub fn flat_len(&self) -> usize {
        self.n_diseases * self.n_covariates * (3 + 2 * self.n_locations) + self.n_diseases
    }
}

/// All `β_jh` trajectories, row-major over (disease, covariate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientField {
    pub shape: FieldShape,
    pub coefficients: Vec<Coefficient>,
}

impl CoefficientField {
    pub fn new(shape: FieldShape, coefficients: Vec<Coefficient>) -> Result<Self> {
        if coefficients.len() != shape.n_diseases * shape.n_covariates {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients for a {}x{} field",
                coefficients.len(),
                shape.n_diseases,
                shape.n_covariates
            )));
        }
        for (k, c) in coefficients.iter().enumerate() {
            if c.field0.len() != shape.n_locations || c.field1.len() != shape.n_locations {
                return Err(Error::DimensionMismatch(format!("coefficient {k} has the wrong number of locations")));
            }
            if !(c.scale0.is_finite() && c.scale1.is_finite()) {
                return Err(Error::NonFinite("coefficient scale"));
            }
        }
        if shape.base_cohort >= shape.n_cohorts {
            return Err(Error::UnknownCohort(shape.base_cohort));
        }
        Ok(Self { shape, coefficients })
    }

    pub fn zeros(shape: FieldShape) -> Self {
        let coefficients = vec![Coefficient::constant(0.0, shape.n_locations); shape.n_diseases * shape.n_covariates];
        Self { shape, coefficients }
    }

    pub fn get(&self, disease: usize, covariate: usize) -> &Coefficient {
        &self.coefficients[disease * self.shape.n_covariates + covariate]
    }

    pub fn get_mut(&mut self, disease: usize, covariate: usize) -> &mut Coefficient {
        &mut self.coefficients[disease * self.shape.n_covariates + covariate]
    }

    /// `β_jh(l, c)` with `c` a cohort index.
    pub fn coefficient_at(&self, disease: usize, covariate: usize, location: usize, cohort: usize) -> Result<f64> {
        if location >= self.shape.n_locations {
            return Err(Error::UnknownLocation(location));
        }
        if cohort >= self.shape.n_cohorts {
            return Err(Error::UnknownCohort(cohort));
        }
        if disease >= self.shape.n_diseases || covariate >= self.shape.n_covariates {
            return Err(Error::DimensionMismatch(format!("no coefficient ({disease}, {covariate})")));
        }
        Ok(self.get(disease, covariate).value(location, self.cohort_offset(cohort)))
    }

    #[inline]
    pub fn cohort_offset(&self, cohort: usize) -> f64 {
        cohort as f64 - self.shape.base_cohort as f64
    }
}

/// One posterior draw: coefficient field plus comorbidity loadings `γ`.
///
/// The comorbidity score `ε` itself is not part of the draw; callers pass
/// one standard Gaussian value per evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterDraw {
    pub field: CoefficientField,
    pub loadings: Vec<f64>,
}

impl ParameterDraw {
    pub fn new(field: CoefficientField, loadings: Vec<f64>) -> Result<Self> {
        if loadings.len() != field.shape.n_diseases {
            return Err(Error::DimensionMismatch(format!(
                "{} loadings for {} diseases",
                loadings.len(),
                field.shape.n_diseases
            )));
        }
        if loadings.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("comorbidity loading"));
        }
        Ok(Self { field, loadings })
    }

    pub fn zeros(shape: FieldShape) -> Self {
        Self { field: CoefficientField::zeros(shape), loadings: vec![0.0; shape.n_diseases] }
    }

    pub fn shape(&self) -> FieldShape {
        self.field.shape
    }

    /// `η = B(l, c) x + γ ε` for an explicit design vector.
    pub fn linear_predictor_for(
        &self,
        design: &[f64],
        location: usize,
        cohort: usize,
        comorbidity: f64,
        out: &mut [f64],
    ) -> Result<()> {
        let shape = self.field.shape;
        if design.len() != shape.n_covariates || out.len() != shape.n_diseases {
            return Err(Error::DimensionMismatch(format!(
                "design of length {} / output of length {} for a {}x{} field",
                design.len(),
                out.len(),
                shape.n_diseases,
                shape.n_covariates
            )));
        }
        if location >= shape.n_locations {
            return Err(Error::UnknownLocation(location));
        }
        if cohort >= shape.n_cohorts {
            return Err(Error::UnknownCohort(cohort));
        }
        if !comorbidity.is_finite() {
            return Err(Error::NonFinite("comorbidity score"));
        }
        let offset = self.field.cohort_offset(cohort);
        for (j, eta) in out.iter_mut().enumerate() {
            let row = &self.field.coefficients[j * shape.n_covariates..(j + 1) * shape.n_covariates];
            let mut acc = 0.0;
            for (coef, x) in row.iter().zip(design) {
                acc += coef.value(location, offset) * x;
            }
            *eta = acc + self.loadings[j] * comorbidity;
        }
        Ok(())
    }

    pub fn linear_predictor(&self, grid: &GridConfig, profile: &CovariateProfile, comorbidity: f64) -> Result<Vec<f64>> {
        if grid.n_locations() != self.field.shape.n_locations || n_covariates(grid) != self.field.shape.n_covariates {
            return Err(Error::DimensionMismatch("draw does not match the grid".into()));
        }
        let design = design_vector(grid, profile);
        let mut out = vec![0.0; self.field.shape.n_diseases];
        self.linear_predictor_for(&design, profile.location, profile.cohort, comorbidity, &mut out)?;
        Ok(out)
    }

    /// Elementwise logistic of the linear predictor.
    pub fn predictive_probability(
        &self,
        grid: &GridConfig,
        profile: &CovariateProfile,
        comorbidity: f64,
    ) -> Result<Vec<f64>> {
        let mut eta = self.linear_predictor(grid, profile, comorbidity)?;
        for v in &mut eta {
            *v = logistic(*v);
        }
        Ok(eta)
    }

    /// Flatten as, per (disease, covariate): β⁰, λ⁰, λ¹, ξ⁰[..], ξ¹[..]; then γ.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.field.shape.flat_len());
        for c in &self.field.coefficients {
            out.extend([c.intercept, c.scale0, c.scale1]);
            out.extend_from_slice(&c.field0);
            out.extend_from_slice(&c.field1);
        }
        out.extend_from_slice(&self.loadings);
        out
    }

    pub fn from_flat(shape: FieldShape, flat: &[f64]) -> Result<Self> {
        if flat.len() != shape.flat_len() {
            return Err(Error::DimensionMismatch(format!(
                "flat draw of length {} for shape needing {}",
                flat.len(),
                shape.flat_len()
            )));
        }
        let n = shape.n_locations;
        let stride = 3 + 2 * n;
        let count = shape.n_diseases * shape.n_covariates;
        let coefficients = flat[..count * stride]
            .chunks_exact(stride)
            .map(|c| Coefficient {
                intercept: c[0],
                scale0: c[1],
                scale1: c[2],
                field0: c[3..3 + n].to_vec(),
                field1: c[3 + n..].to_vec(),
            })
            .collect();
        let field = CoefficientField::new(shape, coefficients)?;
        Self::new(field, flat[count * stride..].to_vec())
    }
}
