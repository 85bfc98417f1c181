//! Key-value configuration files.
//!
//! A config file is a list of `key = value` lines; `#` starts a comment.
//! Grid keys describe the covariate grid and are covered by the grid digest.
//! Generation keys only steer the synthetic pipeline.
//!
//! ```text
//! locations = 101 102 201 202
//! regions   = north:101,102 south:201,202
//! cohorts   = 1950 1952 1954
//! ages      = 60-64
//! years     = 2010-2018
//! binaries  = sex smoking education
//! diseases  = cardio:Cardiovascular resp:Respiratory
//! kernel    = pm10.txt:0.6 distance.txt:0.4
//! ensemble_size = 3000
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::KernelSpec;

/// Largest number of grid cells a store may index.
pub const MAX_CELLS: usize = u32::MAX as usize;

/// Ordered list of diseases with display names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiseasePanel {
    pub ids: Vec<String>,
    pub names: Vec<String>,
}

impl DiseasePanel {
    pub fn new(ids: Vec<String>, names: Vec<String>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Config("disease panel is empty".into()));
        }
        if ids.len() != names.len() {
            return Err(Error::Config("disease ids and names differ in length".into()));
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Config(format!("duplicate disease id `{id}`")));
            }
        }
        Ok(Self { ids, names })
    }

    /// Panel whose display names equal the ids.
    pub fn from_ids<S: AsRef<str>>(ids: &[S]) -> Result<Self> {
        let ids: Vec<String> = ids.iter().map(|s| s.as_ref().to_string()).collect();
        Self::new(ids.clone(), ids)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.ids
            .iter()
            .position(|d| d == id)
            .ok_or_else(|| Error::UnknownDisease(id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub id: String,
    pub locations: Vec<String>,
}

/// The covariate grid: every dimension a profile can take.
///
/// The first entry of `binaries` is the demographic factor (sex); the
/// remaining entries are the risk factors whose joint categories the
/// weight model estimates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    pub locations: Vec<String>,
    pub regions: Vec<Region>,
    pub cohorts: Vec<i32>,
    pub age_min: i32,
    pub age_max: i32,
    pub year_min: i32,
    pub year_max: i32,
    pub binaries: Vec<String>,
    pub diseases: DiseasePanel,
}

impl GridConfig {
    /// The default desk-scale grid: 4 locations, 3 cohorts, 5 ages and
    /// 3 binary factors, 480 cells in total.
    pub fn desk() -> Self {
        let locations: Vec<String> = ["101", "102", "201", "202"].iter().map(|s| s.to_string()).collect();
        Self {
            regions: vec![
                Region { id: "north".into(), locations: locations[..2].to_vec() },
                Region { id: "south".into(), locations: locations[2..].to_vec() },
            ],
            locations,
            cohorts: vec![1950, 1952, 1954],
            age_min: 60,
            age_max: 64,
            year_min: 2010,
            year_max: 2018,
            binaries: vec!["sex".into(), "smoking".into(), "education".into()],
            diseases: DiseasePanel::new(
                vec!["cardio".into(), "resp".into(), "tumors".into(), "diabetes".into()],
                vec![
                    "Cardiovascular".into(),
                    "Respiratory".into(),
                    "Tumors".into(),
                    "Diabetes".into(),
                ],
            )
            .expect("static panel"),
        }
    }

    /// A grid with the given cardinalities and synthetic labels. Cohorts are
    /// consecutive birth years starting at 1950; the year window is the
    /// tightest one covering every cell.
    pub fn with_dims(n_locations: usize, n_cohorts: usize, n_ages: usize, n_binaries: usize) -> Result<Self> {
        if n_locations == 0 || n_cohorts == 0 || n_ages == 0 || n_binaries == 0 {
            return Err(Error::Config("every grid dimension needs at least one level".into()));
        }
        let cohorts: Vec<i32> = (0..n_cohorts as i32).map(|k| 1950 + k).collect();
        let age_min = 50;
        let age_max = age_min + n_ages as i32 - 1;
        let mut binaries = vec!["sex".to_string()];
        for name in ["smoking", "education", "economic"].iter().take(n_binaries.saturating_sub(1)) {
            binaries.push(name.to_string());
        }
        for k in binaries.len()..n_binaries {
            binaries.push(format!("factor{k}"));
        }
        let locations: Vec<String> = (0..n_locations).map(|l| format!("L{l:03}")).collect();
        let grid = Self {
            regions: vec![Region { id: "all".into(), locations: locations.clone() }],
            locations,
            year_min: cohorts[0] + age_min,
            year_max: cohorts[n_cohorts - 1] + age_max,
            cohorts,
            age_min,
            age_max,
            binaries,
            diseases: DiseasePanel::from_ids(&["d0"])?,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn n_locations(&self) -> usize {
        self.locations.len()
    }

    pub fn n_cohorts(&self) -> usize {
        self.cohorts.len()
    }

    pub fn n_ages(&self) -> usize {
        (self.age_max - self.age_min + 1) as usize
    }

    pub fn n_binaries(&self) -> usize {
        self.binaries.len()
    }

    /// Number of risk-factor categories: all combinations of the binaries
    /// after the demographic one.
    pub fn n_risk_categories(&self) -> usize {
        1 << (self.binaries.len() - 1)
    }

    pub fn n_years(&self) -> usize {
        (self.year_max - self.year_min + 1) as usize
    }

    pub fn ages(&self) -> impl Iterator<Item = i32> {
        self.age_min..=self.age_max
    }

    pub fn years(&self) -> impl Iterator<Item = i32> {
        self.year_min..=self.year_max
    }

    pub fn location_index(&self, id: &str) -> Option<usize> {
        self.locations.iter().position(|l| l == id)
    }

    pub fn region_of(&self, location: usize) -> Option<usize> {
        let id = &self.locations[location];
        self.regions.iter().position(|r| r.locations.iter().any(|l| l == id))
    }

    /// Age centred on the middle of the span and scaled by its half-width.
    pub fn standardized_age(&self, age: i32) -> f64 {
        let mid = 0.5 * (self.age_min + self.age_max) as f64;
        let half = 0.5 * (self.age_max - self.age_min) as f64;
        let half = if half > 0.0 { half } else { 1.0 };
        (age as f64 - mid) / half
    }

    /// Product of the dimension cardinalities, checked against `MAX_CELLS`.
    pub fn total_cells(&self) -> Result<usize> {
        let binaries = 1usize
            .checked_shl(self.binaries.len() as u32)
            .filter(|_| self.binaries.len() < usize::BITS as usize)
            .ok_or_else(|| Error::Config("too many binary factors".into()))?;
        [self.n_locations(), self.n_cohorts(), self.n_ages(), binaries]
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .filter(|&n| n <= MAX_CELLS)
            .ok_or_else(|| Error::Config("grid exceeds the addressable cell count".into()))
    }

    pub fn validate(&self) -> Result<()> {
        fn unique<'a>(what: &str, items: impl Iterator<Item = &'a String>) -> Result<()> {
            let mut seen = HashSet::new();
            for item in items {
                if !seen.insert(item) {
                    return Err(Error::Config(format!("duplicate {what} `{item}`")));
                }
            }
            Ok(())
        }
        if self.locations.is_empty() {
            return Err(Error::Config("no locations".into()));
        }
        unique("location", self.locations.iter())?;
        unique("region", self.regions.iter().map(|r| &r.id))?;
        let mut assigned = HashSet::new();
        for region in &self.regions {
            for loc in &region.locations {
                if self.location_index(loc).is_none() {
                    return Err(Error::Config(format!("region `{}` names unknown location `{loc}`", region.id)));
                }
                if !assigned.insert(loc) {
                    return Err(Error::Config(format!("location `{loc}` belongs to more than one region")));
                }
            }
        }
        if self.cohorts.is_empty() {
            return Err(Error::Config("no cohorts".into()));
        }
        if self.cohorts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("cohorts must be strictly increasing".into()));
        }
        if self.age_min > self.age_max {
            return Err(Error::Config("age span is empty".into()));
        }
        if self.binaries.is_empty() {
            return Err(Error::Config("at least the demographic binary factor is required".into()));
        }
        if self.binaries.len() > 8 {
            return Err(Error::Config("at most 8 binary factors are supported".into()));
        }
        unique("binary factor", self.binaries.iter())?;
        let reserved = ["location", "lhu", "region", "cohort", "age", "year"];
        if let Some(b) = self.binaries.iter().find(|b| reserved.contains(&b.as_str())) {
            return Err(Error::Config(format!("binary factor name `{b}` is reserved")));
        }
        let first_year = self.cohorts[0] + self.age_min;
        let last_year = self.cohorts[self.cohorts.len() - 1] + self.age_max;
        if self.year_min > first_year || self.year_max < last_year {
            return Err(Error::Config(format!(
                "year window {}-{} does not contain every cohort+age year ({first_year}-{last_year})",
                self.year_min, self.year_max
            )));
        }
        self.total_cells()?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the grid.
    pub fn digest(&self) -> [u8; 32] {
        let canonical = serde_json::to_vec(self).expect("grid config serializes");
        Sha256::digest(&canonical).into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }
}

/// How synthetic census margins are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "lowercase")]
pub enum MarginsRegime {
    /// Every demographic cell holds `mean` people.
    Uniform { mean: f64 },
    /// Cell sizes are log-normal with the given mean and coefficient of variation.
    LogNormal { mean: f64, cv: f64 },
}

/// Settings of the synthetic generation pipeline. Not part of the grid digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub ensemble_size: usize,
    pub dispersion: f64,
    pub survey_size: usize,
    pub margins: MarginsRegime,
    pub weight_replicates: usize,
    pub prior_alpha: f64,
    pub particles: usize,
    /// Mean of the true comorbidity loadings.
    pub comorbidity_loading: f64,
    /// Spread of the true comorbidity loadings across diseases.
    pub comorbidity_loading_sd: f64,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            ensemble_size: 3000,
            dispersion: 0.02,
            survey_size: 20_000,
            margins: MarginsRegime::LogNormal { mean: 5_000.0, cv: 0.5 },
            weight_replicates: 300,
            prior_alpha: 0.5,
            particles: 300,
            comorbidity_loading: 0.8,
            comorbidity_loading_sd: 0.2,
        }
    }
}

/// A parsed config file: grid, spatial kernel and generation settings.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub grid: GridConfig,
    pub kernel: KernelSpec,
    pub generation: GenerationSettings,
}

impl PipelineConfig {
    /// Desk grid, identity kernel, default generation settings.
    pub fn desk() -> Self {
        let grid = GridConfig::desk();
        let kernel = KernelSpec::identity(grid.n_locations());
        Self { grid, kernel, generation: GenerationSettings::default() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    /// Parse config text; kernel files are resolved relative to `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let entries = parse_entries(text)?;
        let mut grid = GridConfig::desk();
        let mut generation = GenerationSettings::default();
        let mut kernel_entries: Option<(usize, String)> = None;
        let mut margins_kind = None;
        let mut margins_mean = None;
        let mut margins_cv = None;
        let mut regions: Option<Vec<Region>> = None;

        for (line, key, value) in &entries {
            let line = *line;
            let words = || value.split_whitespace().map(str::to_string).collect::<Vec<_>>();
            match key.as_str() {
                "locations" => grid.locations = words(),
                "regions" => {
                    let mut list = Vec::new();
                    for word in value.split_whitespace() {
                        let (id, locs) = word.split_once(':').ok_or_else(|| syntax(line, "region entries are id:loc,loc"))?;
                        list.push(Region {
                            id: id.to_string(),
                            locations: locs.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect(),
                        });
                    }
                    regions = Some(list);
                }
                "cohorts" => {
                    grid.cohorts = value
                        .split_whitespace()
                        .map(|w| w.parse().map_err(|_| syntax(line, "cohorts must be integer birth years")))
                        .collect::<Result<_>>()?
                }
                "ages" => (grid.age_min, grid.age_max) = parse_range(value, line)?,
                "years" => (grid.year_min, grid.year_max) = parse_range(value, line)?,
                "binaries" => grid.binaries = words(),
                "diseases" => {
                    let (mut ids, mut names) = (Vec::new(), Vec::new());
                    for word in value.split_whitespace() {
                        let (id, name) = word.split_once(':').unwrap_or((word, word));
                        ids.push(id.to_string());
                        names.push(name.replace('_', " "));
                    }
                    grid.diseases = DiseasePanel::new(ids, names)?;
                }
                "kernel" => kernel_entries = Some((line, value.clone())),
                "ensemble_size" => generation.ensemble_size = parse_num(value, line)?,
                "dispersion" => generation.dispersion = parse_num(value, line)?,
                "survey_size" => generation.survey_size = parse_num(value, line)?,
                "weight_replicates" => generation.weight_replicates = parse_num(value, line)?,
                "prior_alpha" => generation.prior_alpha = parse_num(value, line)?,
                "particles" => generation.particles = parse_num(value, line)?,
                "comorbidity_loading" => generation.comorbidity_loading = parse_num(value, line)?,
                "comorbidity_loading_sd" => generation.comorbidity_loading_sd = parse_num(value, line)?,
                "margins" => margins_kind = Some((line, value.clone())),
                "margins_mean" => margins_mean = Some(parse_num::<f64>(value, line)?),
                "margins_cv" => margins_cv = Some(parse_num::<f64>(value, line)?),
                other => return Err(syntax(line, &format!("unknown key `{other}`"))),
            }
        }

        grid.regions = match regions {
            Some(r) => r,
            None if grid.locations != GridConfig::desk().locations => {
                vec![Region { id: "all".into(), locations: grid.locations.clone() }]
            }
            None => grid.regions,
        };
        grid.validate()?;

        let mean = margins_mean.unwrap_or(5_000.0);
        generation.margins = match margins_kind.as_ref().map(|(l, v)| (*l, v.as_str())) {
            None | Some((_, "lognormal")) => MarginsRegime::LogNormal { mean, cv: margins_cv.unwrap_or(0.5) },
            Some((_, "uniform")) => MarginsRegime::Uniform { mean },
            Some((line, other)) => return Err(syntax(line, &format!("unknown margins regime `{other}`"))),
        };
        validate_generation(&generation)?;

        let kernel = match kernel_entries {
            None => KernelSpec::identity(grid.n_locations()),
            Some((line, value)) => {
                let mut components = Vec::new();
                for word in value.split_whitespace() {
                    let (file, weight) = word.rsplit_once(':').ok_or_else(|| syntax(line, "kernel entries are file:weight"))?;
                    let weight: f64 = weight.parse().map_err(|_| syntax(line, "kernel weight must be a number"))?;
                    let matrix = read_matrix(&base_dir.join(file))?;
                    components.push((matrix, weight));
                }
                KernelSpec::new(grid.n_locations(), components)?
            }
        };
        Ok(Self { grid, kernel, generation })
    }
}

fn validate_generation(g: &GenerationSettings) -> Result<()> {
    if g.ensemble_size == 0 {
        return Err(Error::Config("ensemble_size must be at least 1".into()));
    }
    if !(g.dispersion >= 0.0 && g.dispersion.is_finite()) {
        return Err(Error::Config("dispersion must be finite and non-negative".into()));
    }
    if g.survey_size == 0 || g.weight_replicates == 0 || g.particles == 0 {
        return Err(Error::Config("survey_size, weight_replicates and particles must be positive".into()));
    }
    if !(g.prior_alpha > 0.0 && g.prior_alpha.is_finite()) {
        return Err(Error::Config("prior_alpha must be positive".into()));
    }
    match g.margins {
        MarginsRegime::Uniform { mean } | MarginsRegime::LogNormal { mean, .. } if mean.is_nan() || mean < 1.0 => {
            return Err(Error::Config("margins_mean must be at least 1".into()))
        }
        MarginsRegime::LogNormal { cv, .. } if !(cv >= 0.0 && cv.is_finite()) => {
            return Err(Error::Config("margins_cv must be non-negative".into()))
        }
        _ => {}
    }
    if !(g.comorbidity_loading.is_finite() && g.comorbidity_loading_sd >= 0.0) {
        return Err(Error::Config("comorbidity loading settings are invalid".into()));
    }
    Ok(())
}

fn syntax(line: usize, message: &str) -> Error {
    Error::ConfigSyntax { line, message: message.to_string() }
}

fn parse_num<T: std::str::FromStr>(value: &str, line: usize) -> Result<T> {
    value.trim().parse().map_err(|_| syntax(line, &format!("`{value}` is not a valid number")))
}

fn parse_range(value: &str, line: usize) -> Result<(i32, i32)> {
    let (lo, hi) = value.trim().split_once('-').ok_or_else(|| syntax(line, "ranges are written lo-hi"))?;
    Ok((parse_num(lo, line)?, parse_num(hi, line)?))
}

/// Split config text into `(line, key, value)` triples, rejecting duplicates.
fn parse_entries(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| syntax(line, "expected `key = value`"))?;
        let key = key.trim().to_string();
        if let Some(prev) = seen.insert(key.clone(), line) {
            return Err(syntax(line, &format!("`{key}` already set on line {prev}")));
        }
        out.push((line, key, value.trim().to_string()));
    }
    Ok(out)
}

/// Read a dense whitespace-separated matrix, one row per line.
pub fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })?;
    parse_matrix(&text).map_err(|message| Error::Parse { path: path.to_path_buf(), message })
}

pub fn parse_matrix(text: &str) -> std::result::Result<Vec<Vec<f64>>, String> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|w| match w {
                "inf" | "Inf" | "INF" => Ok(f64::INFINITY),
                _ => w.parse::<f64>().map_err(|_| format!("line {}: `{w}` is not a number", i + 1)),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn format_matrix(matrix: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in matrix {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

/// Resolve a possibly relative path against a base directory.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
