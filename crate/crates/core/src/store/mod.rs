//! Precomputed per-cell particles of the joint `p(y*, x | I)`.
//!
//! Each cell keeps `P` particles. Particle `b` holds one disease probability
//! per disease, quantized to 16 bits, and the cell's joint weight under
//! weight replicate `b mod W` as a 32-bit float. Queries only ever sum over
//! these cell-level aggregates; nothing in a store is indexed by respondent.

mod format;
mod precompute;

pub use format::{
    read_ensemble, read_header, read_store, read_weights, write_ensemble, write_store, write_weights, ContainerKind, StoreHeader,
    StoredWeights, FORMAT_VERSION, HEADER_LEN, MAGIC,
};
pub use precompute::{comorbidity_scores, precompute, precompute_cell, raw_cell_particles, thin_sample};

use crate::config::GridConfig;
use crate::error::{Error, Result};
use crate::grid::GridIndex;
use crate::model::DesignLayout;

/// Default number of stored particles per cell.
pub const DEFAULT_PARTICLES: usize = 300;

/// Largest value of the 16-bit probability encoding.
pub const QUANT_MAX: f64 = u16::MAX as f64;

/// Encode a probability in 16-bit fixed point.
#[inline]
pub fn quantize(p: f64) -> u16 {
    (p.clamp(0.0, 1.0) * QUANT_MAX).round() as u16
}

#[inline]
pub fn dequantize(q: u16) -> f64 {
    q as f64 / QUANT_MAX
}

/// Stored particles of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleBlock {
    pub cell: usize,
    /// Disease-major: `probabilities[j * P + b]`.
    pub probabilities: Vec<u16>,
    /// Joint weight carried by each particle.
    pub weights: Vec<f32>,
    /// Joint weight under the posterior-mean weight table.
    pub mean_weight: f64,
}

/// Settings recorded in a store header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreParams {
    pub particles: usize,
    pub original_size: usize,
    pub stride: usize,
    pub replicates: usize,
    pub seed: u64,
}

/// A loaded particle store. Immutable; share it freely across threads.
#[derive(Debug, Clone)]
pub struct ParticleStore {
    grid: GridIndex,
    layout: DesignLayout,
    params: StoreParams,
    probabilities: Vec<u16>,
    weights: Vec<f32>,
    mean_weights: Vec<f64>,
    population: Option<StoredWeights>,
    digest: [u8; 32],
}

impl ParticleStore {
    /// Assemble a store from blocks covering every grid cell exactly once.
    pub fn from_blocks(
        grid: GridConfig,
        params: StoreParams,
        mut blocks: Vec<ParticleBlock>,
        population: Option<StoredWeights>,
    ) -> Result<Self> {
        let index = GridIndex::new(grid)?;
        let n_d = index.config().diseases.len();
        let p = params.particles;
        if p == 0 {
            return Err(Error::InvalidArgument("a store needs at least one particle".into()));
        }
        blocks.sort_by_key(|b| b.cell);
        if blocks.len() != index.len() || blocks.iter().enumerate().any(|(i, b)| b.cell != i) {
            return Err(Error::InvalidArgument("blocks must cover the grid exactly once".into()));
        }
        let mut probabilities = Vec::with_capacity(index.len() * n_d * p);
        let mut weights = Vec::with_capacity(index.len() * p);
        let mut mean_weights = Vec::with_capacity(index.len());
        for block in blocks {
            if block.probabilities.len() != n_d * p || block.weights.len() != p {
                return Err(Error::DimensionMismatch(format!("block {} has the wrong particle count", block.cell)));
            }
            if block.weights.iter().any(|w| !w.is_finite() || *w < 0.0) || block.mean_weight.is_nan() || block.mean_weight < 0.0 {
                return Err(Error::InvalidArgument(format!("block {} has a negative weight", block.cell)));
            }
            probabilities.extend_from_slice(&block.probabilities);
            weights.extend_from_slice(&block.weights);
            mean_weights.push(block.mean_weight);
        }
        let layout = DesignLayout::for_grid(index.config());
        let mut store = Self {
            grid: index,
            layout,
            params,
            probabilities,
            weights,
            mean_weights,
            population,
            digest: [0; 32],
        };
        store.digest = format::payload_digest(&store);
        Ok(store)
    }

    pub(crate) fn from_parts(
        grid: GridIndex,
        params: StoreParams,
        probabilities: Vec<u16>,
        weights: Vec<f32>,
        mean_weights: Vec<f64>,
        population: Option<StoredWeights>,
        digest: [u8; 32],
    ) -> Self {
        let layout = DesignLayout::for_grid(grid.config());
        Self { grid, layout, params, probabilities, weights, mean_weights, population, digest }
    }

    pub fn grid(&self) -> &GridIndex {
        &self.grid
    }

    pub fn config(&self) -> &GridConfig {
        self.grid.config()
    }

    pub fn layout(&self) -> &DesignLayout {
        &self.layout
    }

    pub fn params(&self) -> StoreParams {
        self.params
    }

    pub fn particles(&self) -> usize {
        self.params.particles
    }

    pub fn n_cells(&self) -> usize {
        self.grid.len()
    }

    pub fn n_diseases(&self) -> usize {
        self.grid.config().diseases.len()
    }

    /// SHA-256 of the serialized payload; identifies the store's content.
    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest)
    }

    /// Quantized probabilities of `disease` in `cell`, one per particle.
    #[inline]
    pub fn disease_particles(&self, cell: usize, disease: usize) -> &[u16] {
        let p = self.params.particles;
        let start = (cell * self.n_diseases() + disease) * p;
        &self.probabilities[start..start + p]
    }

    #[inline]
    pub fn probability(&self, cell: usize, disease: usize, particle: usize) -> f64 {
        dequantize(self.disease_particles(cell, disease)[particle])
    }

    #[inline]
    pub fn particle_weights(&self, cell: usize) -> &[f32] {
        let p = self.params.particles;
        &self.weights[cell * p..(cell + 1) * p]
    }

    #[inline]
    pub fn mean_weight(&self, cell: usize) -> f64 {
        self.mean_weights[cell]
    }

    pub fn block(&self, cell: usize) -> ParticleBlock {
        let n = self.n_diseases() * self.params.particles;
        ParticleBlock {
            cell,
            probabilities: self.probabilities[cell * n..(cell + 1) * n].to_vec(),
            weights: self.particle_weights(cell).to_vec(),
            mean_weight: self.mean_weights[cell],
        }
    }

    /// Census margins and the weight table the store was built with.
    pub fn population(&self) -> Option<&StoredWeights> {
        self.population.as_ref()
    }

    pub(crate) fn raw_probabilities(&self) -> &[u16] {
        &self.probabilities
    }
}
