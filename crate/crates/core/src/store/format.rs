//! Binary container shared by particle stores, posterior ensembles and
//! weight tables. Little-endian throughout.
//!
//! ```text
//! offset  size  field
//!      0     8  magic "PREVSTOR"
//!      8     2  format version (u16)
//!     10     2  container kind (u16): 1 particles, 2 ensemble, 3 weights
//!     12     4  particles per cell, or ensemble size (u32)
//!     16     4  ensemble size before thinning (u32)
//!     20     4  thinning stride (u32)
//!     24     2  number of diseases (u16)
//!     26     2  design layout tag (u16)
//!     28     4  weight replicates (u32)
//!     32     8  creation seed (u64)
//!     40     8  number of blocks (u64)
//!     48     8  bytes per block (u64)
//!     56     8  metadata length (u64)
//!     64     8  weight section length (u64)
//!     72    32  SHA-256 of the canonical grid config
//!    104    32  SHA-256 of everything after the header
//!    136    16  reserved, zero
//!    152     8  first 8 bytes of SHA-256 over header bytes 0..152
//! ```
//!
//! The payload follows: metadata JSON, a block offset index (u64 per
//! block, absolute file offsets), the blocks, then the weight section.
//!
//! Particle blocks hold `n_d × P` u16 probabilities (disease-major), `P`
//! f32 weights and one f64 mean weight. Ensemble blocks hold one flattened
//! draw as f64. The weight section holds, per demographic cell, the census
//! count (u64, `u64::MAX` when absent), the estimate source (u8), the
//! posterior mean (f64 per category) and the replicates (f64 per category).

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ParticleStore, StoreParams};
use crate::config::GridConfig;
use crate::error::{Error, Result};
use crate::grid::GridIndex;
use crate::model::{DesignLayout, FieldShape, ParameterDraw};
use crate::synthetic::{DemographicMargins, EnsembleProvenance, PosteriorEnsemble};
use crate::weights::{demographic_decomposition, JointWeights, WeightEntry, WeightSource, WeightTable};

pub const MAGIC: &[u8; 8] = b"PREVSTOR";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 160;
const CHECKSUM_AT: usize = 152;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerKind {
    Particles = 1,
    Ensemble = 2,
    Weights = 3,
}

impl ContainerKind {
    fn from_u16(v: u16) -> Result<Self> {
        match v {
            1 => Ok(Self::Particles),
            2 => Ok(Self::Ensemble),
            3 => Ok(Self::Weights),
            other => Err(Error::Format(format!("unknown container kind {other}"))),
        }
    }
}

/// Decoded fixed-size header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreHeader {
    pub version: u16,
    pub kind: ContainerKind,
    pub particles: u32,
    pub original_size: u32,
    pub stride: u32,
    pub n_diseases: u16,
    pub layout_tag: u16,
    pub replicates: u32,
    pub seed: u64,
    pub n_blocks: u64,
    pub block_size: u64,
    pub meta_len: u64,
    pub weights_len: u64,
    pub grid_digest: [u8; 32],
    pub payload_digest: [u8; 32],
}

impl StoreHeader {
    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..8].copy_from_slice(MAGIC);
        b[8..10].copy_from_slice(&self.version.to_le_bytes());
        b[10..12].copy_from_slice(&(self.kind as u16).to_le_bytes());
        b[12..16].copy_from_slice(&self.particles.to_le_bytes());
        b[16..20].copy_from_slice(&self.original_size.to_le_bytes());
        b[20..24].copy_from_slice(&self.stride.to_le_bytes());
        b[24..26].copy_from_slice(&self.n_diseases.to_le_bytes());
        b[26..28].copy_from_slice(&self.layout_tag.to_le_bytes());
        b[28..32].copy_from_slice(&self.replicates.to_le_bytes());
        b[32..40].copy_from_slice(&self.seed.to_le_bytes());
        b[40..48].copy_from_slice(&self.n_blocks.to_le_bytes());
        b[48..56].copy_from_slice(&self.block_size.to_le_bytes());
        b[56..64].copy_from_slice(&self.meta_len.to_le_bytes());
        b[64..72].copy_from_slice(&self.weights_len.to_le_bytes());
        b[72..104].copy_from_slice(&self.grid_digest);
        b[104..136].copy_from_slice(&self.payload_digest);
        let check = Sha256::digest(&b[..CHECKSUM_AT]);
        b[CHECKSUM_AT..].copy_from_slice(&check[..8]);
        b
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("file of {} bytes is shorter than the header", bytes.len())));
        }
        let b = &bytes[..HEADER_LEN];
        if &b[0..8] != MAGIC {
            return Err(Error::Format("bad magic; not a PREVSTOR container".into()));
        }
        let check = Sha256::digest(&b[..CHECKSUM_AT]);
        if b[CHECKSUM_AT..] != check[..8] {
            return Err(Error::Digest("header checksum does not match".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes(b[o..o + 2].try_into().unwrap());
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let version = u16_at(8);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version} (expected {FORMAT_VERSION})")));
        }
        Ok(Self {
            version,
            kind: ContainerKind::from_u16(u16_at(10))?,
            particles: u32_at(12),
            original_size: u32_at(16),
            stride: u32_at(20),
            n_diseases: u16_at(24),
            layout_tag: u16_at(26),
            replicates: u32_at(28),
            seed: u64_at(32),
            n_blocks: u64_at(40),
            block_size: u64_at(48),
            meta_len: u64_at(56),
            weights_len: u64_at(64),
            grid_digest: b[72..104].try_into().unwrap(),
            payload_digest: b[104..136].try_into().unwrap(),
        })
    }

    fn total_len(&self) -> Option<u64> {
        let index = self.n_blocks.checked_mul(8)?;
        let blocks = self.n_blocks.checked_mul(self.block_size)?;
        (HEADER_LEN as u64).checked_add(self.meta_len)?.checked_add(index)?.checked_add(blocks)?.checked_add(self.weights_len)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    grid: GridConfig,
    layout: DesignLayout,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    shape: Option<FieldShape>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    provenance: Option<EnsembleProvenance>,
}

/// Census margins plus the weight table, as embedded in a container.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredWeights {
    pub margins: DemographicMargins,
    pub table: WeightTable,
}

impl StoredWeights {
    pub fn joint(&self, grid: &GridIndex) -> Result<JointWeights> {
        demographic_decomposition(grid, &self.margins, &self.table)
    }
}

/// Everything written after the header.
trait Payload {
    fn meta(&self) -> Result<Vec<u8>>;
    fn n_blocks(&self) -> u64;
    fn block_size(&self) -> u64;
    fn write_block(&self, i: usize, out: &mut Vec<u8>);
    fn weights(&self) -> Option<&StoredWeights>;
}

struct HashWriter(Sha256);

impl Write for HashWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

fn weights_len(w: Option<&StoredWeights>) -> u64 {
    w.map_or(0, |w| {
        let r = w.table.categories as u64;
        w.table.entries.len() as u64 * (9 + 8 * r + 8 * r * w.table.replicates as u64)
    })
}

fn emit_weights<W: Write>(w: &StoredWeights, out: &mut W) -> io::Result<()> {
    let mut buf = Vec::new();
    for (entry, count) in w.table.entries.iter().zip(&w.margins.counts) {
        buf.clear();
        buf.extend_from_slice(&count.unwrap_or(u64::MAX).to_le_bytes());
        buf.push(match entry.source {
            WeightSource::Cell => 0,
            WeightSource::Region => 1,
            WeightSource::Pooled => 2,
            WeightSource::Prior => 3,
        });
        for m in &entry.mean {
            buf.extend_from_slice(&m.to_le_bytes());
        }
        for rep in &entry.replicates {
            for v in rep {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn emit_payload<P: Payload, W: Write>(payload: &P, meta: &[u8], out: &mut W) -> io::Result<()> {
    out.write_all(meta)?;
    let first = (HEADER_LEN + meta.len()) as u64 + 8 * payload.n_blocks();
    let mut index = Vec::with_capacity(8 * payload.n_blocks() as usize);
    for i in 0..payload.n_blocks() {
        index.extend_from_slice(&(first + i * payload.block_size()).to_le_bytes());
    }
    out.write_all(&index)?;
    let mut buf = Vec::with_capacity(payload.block_size() as usize);
    for i in 0..payload.n_blocks() as usize {
        buf.clear();
        payload.write_block(i, &mut buf);
        debug_assert_eq!(buf.len() as u64, payload.block_size());
        out.write_all(&buf)?;
    }
    if let Some(w) = payload.weights() {
        emit_weights(w, out)?;
    }
    Ok(())
}

fn digest_payload<P: Payload>(payload: &P) -> Result<[u8; 32]> {
    let meta = payload.meta()?;
    let mut hasher = HashWriter(Sha256::new());
    emit_payload(payload, &meta, &mut hasher)?;
    Ok(hasher.0.finalize().into())
}

fn write_container<P: Payload>(path: &Path, payload: &P, mut header: StoreHeader) -> Result<()> {
    let meta = payload.meta()?;
    header.meta_len = meta.len() as u64;
    header.n_blocks = payload.n_blocks();
    header.block_size = payload.block_size();
    header.weights_len = weights_len(payload.weights());
    header.payload_digest = digest_payload(payload)?;

    let tmp = path.with_extension("tmp-write");
    {
        let mut out = BufWriter::with_capacity(1 << 20, fs::File::create(&tmp)?);
        out.write_all(&header.encode())?;
        emit_payload(payload, &meta, &mut out)?;
        out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Validated view of a container's bytes.
struct Container<'a> {
    header: StoreHeader,
    meta: Meta,
    grid: GridIndex,
    bytes: &'a [u8],
}

impl<'a> Container<'a> {
    fn parse(bytes: &'a [u8], expected: ContainerKind) -> Result<Self> {
        let header = StoreHeader::decode(bytes)?;
        if header.kind != expected {
            return Err(Error::Format(format!("expected a {expected:?} container, found {:?}", header.kind)));
        }
        let total = header.total_len().ok_or_else(|| Error::Format("header sizes overflow".into()))?;
        if (bytes.len() as u64) < total {
            return Err(Error::Format(format!("truncated file: {} of {total} bytes", bytes.len())));
        }
        if bytes.len() as u64 != total {
            return Err(Error::Format(format!("trailing data: {} bytes, expected {total}", bytes.len())));
        }
        let digest: [u8; 32] = Sha256::digest(&bytes[HEADER_LEN..]).into();
        if digest != header.payload_digest {
            return Err(Error::Digest("payload digest does not match the header".into()));
        }
        let meta_end = HEADER_LEN + header.meta_len as usize;
        let meta: Meta = serde_json::from_slice(&bytes[HEADER_LEN..meta_end])
            .map_err(|e| Error::Format(format!("metadata: {e}")))?;
        if meta.grid.digest() != header.grid_digest {
            return Err(Error::Digest("grid config digest does not match the header".into()));
        }
        if meta.layout.tag != header.layout_tag {
            return Err(Error::Format("design layout tag mismatch".into()));
        }
        let grid = GridIndex::new(meta.grid.clone())?;
        let first = meta_end as u64 + 8 * header.n_blocks;
        for i in 0..header.n_blocks as usize {
            let at = meta_end + 8 * i;
            let offset = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            if offset != first + i as u64 * header.block_size {
                return Err(Error::Format(format!("block index entry {i} is inconsistent")));
            }
        }
        Ok(Self { header, meta, grid, bytes })
    }

    fn blocks(&self) -> &'a [u8] {
        let start = HEADER_LEN + self.header.meta_len as usize + 8 * self.header.n_blocks as usize;
        &self.bytes[start..start + (self.header.n_blocks * self.header.block_size) as usize]
    }

    fn weights(&self) -> Result<Option<StoredWeights>> {
        if self.header.weights_len == 0 {
            return Ok(None);
        }
        let start = self.bytes.len() - self.header.weights_len as usize;
        let section = &self.bytes[start..];
        let categories = self.grid.config().n_risk_categories();
        let replicates = self.header.replicates as usize;
        let n = self.grid.n_demographic_cells();
        let per_cell = 9 + 8 * categories + 8 * categories * replicates;
        if section.len() != n * per_cell {
            return Err(Error::Format("weight section size does not match the grid".into()));
        }
        let mut counts = Vec::with_capacity(n);
        let mut entries = Vec::with_capacity(n);
        for chunk in section.chunks_exact(per_cell) {
            let count = u64::from_le_bytes(chunk[0..8].try_into().unwrap());
            counts.push((count != u64::MAX).then_some(count));
            let source = match chunk[8] {
                0 => WeightSource::Cell,
                1 => WeightSource::Region,
                2 => WeightSource::Pooled,
                3 => WeightSource::Prior,
                other => return Err(Error::Format(format!("unknown weight source {other}"))),
            };
            let mean: Vec<f64> =
                chunk[9..9 + 8 * categories].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let reps: Vec<Vec<f64>> = chunk[9 + 8 * categories..]
                .chunks_exact(8 * categories)
                .map(|r| r.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
                .collect();
            entries.push(WeightEntry { mean, replicates: reps, source });
        }
        Ok(Some(StoredWeights {
            margins: DemographicMargins { counts },
            table: WeightTable { categories, replicates, entries },
        }))
    }
}

fn base_header(kind: ContainerKind, grid: &GridConfig) -> StoreHeader {
    StoreHeader {
        version: FORMAT_VERSION,
        kind,
        particles: 0,
        original_size: 0,
        stride: 0,
        n_diseases: grid.diseases.len() as u16,
        layout_tag: DesignLayout::INTERCEPT_AGE_BINARIES,
        replicates: 0,
        seed: 0,
        n_blocks: 0,
        block_size: 0,
        meta_len: 0,
        weights_len: 0,
        grid_digest: grid.digest(),
        payload_digest: [0; 32],
    }
}

fn meta_json(grid: &GridConfig, shape: Option<FieldShape>, provenance: Option<EnsembleProvenance>) -> Result<Vec<u8>> {
    let meta = Meta { grid: grid.clone(), layout: DesignLayout::for_grid(grid), shape, provenance };
    Ok(serde_json::to_vec(&meta)?)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit the header")))
}

impl Payload for ParticleStore {
    fn meta(&self) -> Result<Vec<u8>> {
        meta_json(self.config(), None, None)
    }

    fn n_blocks(&self) -> u64 {
        self.n_cells() as u64
    }

    fn block_size(&self) -> u64 {
        let p = self.particles() as u64;
        2 * self.n_diseases() as u64 * p + 4 * p + 8
    }

    fn write_block(&self, cell: usize, out: &mut Vec<u8>) {
        let n = self.n_diseases() * self.particles();
        for q in &self.raw_probabilities()[cell * n..(cell + 1) * n] {
            out.extend_from_slice(&q.to_le_bytes());
        }
        for w in self.particle_weights(cell) {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.extend_from_slice(&self.mean_weight(cell).to_le_bytes());
    }

    fn weights(&self) -> Option<&StoredWeights> {
        self.population()
    }
}

pub(super) fn payload_digest(store: &ParticleStore) -> [u8; 32] {
    digest_payload(store).expect("in-memory payload serializes")
}

/// Write a particle store atomically.
pub fn write_store(path: &Path, store: &ParticleStore) -> Result<()> {
    let params = store.params();
    let mut header = base_header(ContainerKind::Particles, store.config());
    header.particles = to_u32(params.particles, "particle count")?;
    header.original_size = to_u32(params.original_size, "ensemble size")?;
    header.stride = to_u32(params.stride, "stride")?;
    header.replicates = to_u32(store.population().map_or(params.replicates, |w| w.table.replicates), "replicates")?;
    header.seed = params.seed;
    write_container(path, store, header)
}

/// Read and fully verify a particle store.
pub fn read_store(path: &Path) -> Result<ParticleStore> {
    let bytes = fs::read(path)?;
    decode_store(&bytes)
}

pub(crate) fn decode_store(bytes: &[u8]) -> Result<ParticleStore> {
    let c = Container::parse(bytes, ContainerKind::Particles)?;
    let h = &c.header;
    let p = h.particles as usize;
    let n_d = h.n_diseases as usize;
    if n_d != c.grid.config().diseases.len() || h.n_blocks != c.grid.len() as u64 || p == 0 {
        return Err(Error::Format("header does not match the embedded grid".into()));
    }
    if h.block_size != (2 * n_d * p + 4 * p + 8) as u64 {
        return Err(Error::Format("block size does not match the particle layout".into()));
    }
    let n_cells = c.grid.len();
    let mut probabilities = Vec::with_capacity(n_cells * n_d * p);
    let mut weights = Vec::with_capacity(n_cells * p);
    let mut mean_weights = Vec::with_capacity(n_cells);
    for block in c.blocks().chunks_exact(h.block_size as usize) {
        let (probs, rest) = block.split_at(2 * n_d * p);
        let (ws, mean) = rest.split_at(4 * p);
        probabilities.extend(probs.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])));
        weights.extend(ws.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())));
        mean_weights.push(f64::from_le_bytes(mean.try_into().unwrap()));
    }
    let params = StoreParams {
        particles: p,
        original_size: h.original_size as usize,
        stride: h.stride as usize,
        replicates: h.replicates as usize,
        seed: h.seed,
    };
    let population = c.weights()?;
    let digest = h.payload_digest;
    Ok(ParticleStore::from_parts(c.grid, params, probabilities, weights, mean_weights, population, digest))
}

/// Read only the header of a container file.
pub fn read_header(path: &Path) -> Result<StoreHeader> {
    use std::io::Read;
    let mut buf = vec![0u8; HEADER_LEN];
    let mut f = fs::File::open(path)?;
    let n = f.read(&mut buf)?;
    StoreHeader::decode(&buf[..n])
}

struct EnsemblePayload<'a> {
    grid: &'a GridConfig,
    ensemble: &'a PosteriorEnsemble,
}

impl Payload for EnsemblePayload<'_> {
    fn meta(&self) -> Result<Vec<u8>> {
        meta_json(self.grid, Some(self.ensemble.shape), Some(self.ensemble.provenance))
    }

    fn n_blocks(&self) -> u64 {
        self.ensemble.len() as u64
    }

    fn block_size(&self) -> u64 {
        8 * self.ensemble.shape.flat_len() as u64
    }

    fn write_block(&self, i: usize, out: &mut Vec<u8>) {
        for v in self.ensemble.draws[i].to_flat() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn weights(&self) -> Option<&StoredWeights> {
        None
    }
}

pub fn write_ensemble(path: &Path, grid: &GridConfig, ensemble: &PosteriorEnsemble) -> Result<()> {
    if ensemble.shape != FieldShape::for_grid(grid) {
        return Err(Error::DimensionMismatch("ensemble shape does not match the grid".into()));
    }
    let mut header = base_header(ContainerKind::Ensemble, grid);
    header.particles = to_u32(ensemble.len(), "ensemble size")?;
    header.original_size = to_u32(ensemble.provenance.original_size, "ensemble size")?;
    header.stride = to_u32(ensemble.provenance.stride, "stride")?;
    header.seed = ensemble.provenance.seed;
    write_container(path, &EnsemblePayload { grid, ensemble }, header)
}

pub fn read_ensemble(path: &Path) -> Result<(GridConfig, PosteriorEnsemble)> {
    let bytes = fs::read(path)?;
    let c = Container::parse(&bytes, ContainerKind::Ensemble)?;
    let shape = c.meta.shape.ok_or_else(|| Error::Format("ensemble metadata lacks the field shape".into()))?;
    let provenance = c.meta.provenance.ok_or_else(|| Error::Format("ensemble metadata lacks provenance".into()))?;
    if c.header.block_size != 8 * shape.flat_len() as u64 {
        return Err(Error::Format("block size does not match the field shape".into()));
    }
    let draws = c
        .blocks()
        .chunks_exact(c.header.block_size as usize)
        .map(|block| {
            let flat: Vec<f64> = block.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            ParameterDraw::from_flat(shape, &flat)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((c.meta.grid, PosteriorEnsemble { shape, draws, provenance }))
}

struct WeightsPayload<'a> {
    grid: &'a GridConfig,
    weights: &'a StoredWeights,
}

impl Payload for WeightsPayload<'_> {
    fn meta(&self) -> Result<Vec<u8>> {
        meta_json(self.grid, None, None)
    }

    fn n_blocks(&self) -> u64 {
        0
    }

    fn block_size(&self) -> u64 {
        0
    }

    fn write_block(&self, _: usize, _: &mut Vec<u8>) {}

    fn weights(&self) -> Option<&StoredWeights> {
        Some(self.weights)
    }
}

pub fn write_weights(path: &Path, grid: &GridConfig, weights: &StoredWeights, seed: u64) -> Result<()> {
    let index = GridIndex::new(grid.clone())?;
    if weights.table.entries.len() != index.n_demographic_cells() || weights.margins.counts.len() != index.n_demographic_cells() {
        return Err(Error::DimensionMismatch("weight table does not match the grid".into()));
    }
    let mut header = base_header(ContainerKind::Weights, grid);
    header.replicates = to_u32(weights.table.replicates, "replicates")?;
    header.seed = seed;
    write_container(path, &WeightsPayload { grid, weights }, header)
}

pub fn read_weights(path: &Path) -> Result<(GridConfig, StoredWeights)> {
    let bytes = fs::read(path)?;
    let c = Container::parse(&bytes, ContainerKind::Weights)?;
    let weights = c.weights()?.ok_or_else(|| Error::Format("weights container has no weight section".into()))?;
    Ok((c.meta.grid, weights))
}
