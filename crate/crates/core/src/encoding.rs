//! Multiresolution hash-grid positional encoding with trilinear
//! interpolation, plus the gradient accumulation into table entries.

use serde::{Deserialize, Serialize};

use crate::io::{read_blob_file, write_blob_file, BlobError};
use crate::math::{Real, Vec3};
use crate::rng::{CounterRng, Domain};

/// Spatial-hash multipliers: fixed large odd primes, XOR-combined per
/// coordinate. Pinned here so hashed indices are reproducible across builds.
pub const HASH_PRIMES: [u64; 3] = [2_654_435_761, 805_459_861, 3_674_653_429];

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct HashGridConfig {
    /// Number of resolution levels L.
    pub levels: usize,
    /// Vertices per axis at level 0.
    pub base_resolution: usize,
    /// Per-level resolution scale factor.
    pub growth: f64,
    /// Table entries per level T (power of two).
    pub table_size: usize,
    /// Floats per entry F.
    pub feature_dim: usize,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        HashGridConfig {
            levels: 8,
            base_resolution: 16,
            growth: 1.5,
            table_size: 1 << 14,
            feature_dim: 2,
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) {
        assert!(self.levels >= 1, "need at least one level");
        assert!(self.table_size.is_power_of_two(), "T must be a power of two");
        assert!(self.feature_dim >= 1);
        assert!(self.growth > 1.0);
        assert!(self.base_resolution >= 2);
    }

    /// Vertices per axis at `level`.
    pub fn resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.growth.powi(level as i32)).floor() as usize
    }

    pub fn feature_len(&self) -> usize {
        self.levels * self.feature_dim
    }

    pub fn table_floats(&self) -> usize {
        self.levels * self.table_size * self.feature_dim
    }

    /// Index of an integer vertex coordinate within one level's table.
    /// Levels whose full vertex grid fits in the table are addressed
    /// directly; larger levels use the XOR-of-prime-multiples hash.
    pub fn hash_index(&self, level: usize, coords: [u32; 3]) -> usize {
        let res = self.resolution(level);
        if res * res * res <= self.table_size {
            coords[0] as usize + res * coords[1] as usize + res * res * coords[2] as usize
        } else {
            let h = (coords[0] as u64).wrapping_mul(HASH_PRIMES[0])
                ^ (coords[1] as u64).wrapping_mul(HASH_PRIMES[1])
                ^ (coords[2] as u64).wrapping_mul(HASH_PRIMES[2]);
            (h & (self.table_size as u64 - 1)) as usize
        }
    }

    /// MACs per encoded sample (weight products + blend accumulation);
    /// the backward accumulation costs the same.
    pub fn macs_per_sample(&self) -> u64 {
        (self.levels * (16 + 8 * self.feature_dim)) as u64
    }
}

#[derive(Clone, Debug)]
pub struct HashGrid<T> {
    pub config: HashGridConfig,
    /// Level-major flat storage: [level][entry][feature].
    pub tables: Vec<T>,
}

/// One interpolation corner: table offset (within the full flat buffer) and
/// trilinear weight.
struct Corner<T> {
    offset: usize,
    weight: T,
}

impl<T: Real> HashGrid<T> {
    /// Entries initialized uniformly in [-1e-4, 1e-4].
    pub fn init(config: HashGridConfig, rng: &CounterRng) -> Self {
        config.validate();
        let mut stream = rng.stream(Domain::ParamInit, &[0xA5]);
        let tables = (0..config.table_floats())
            .map(|_| T::from_f64(stream.uniform(-1e-4, 1e-4)))
            .collect();
        HashGrid { config, tables }
    }

    pub fn zeros(config: HashGridConfig) -> Self {
        config.validate();
        let tables = vec![T::zero(); config.table_floats()];
        HashGrid { config, tables }
    }

    /// The 8 interpolation corners for `position` at `level`. Positions are
    /// clamped to [0,1]^3; scene bounds are expected to map to the unit cube.
    fn corners(&self, level: usize, position: Vec3<T>, out: &mut [Corner<T>; 8]) {
        let res = self.config.resolution(level);
        let cells = (res - 1) as f64;
        let level_base = level * self.config.table_size * self.config.feature_dim;
        let mut c0 = [0u32; 3];
        let mut frac = [T::zero(); 3];
        for a in 0..3 {
            let p = position[a].as_f64().clamp(0.0, 1.0) * cells;
            let f = p.floor().min(cells - 1.0).max(0.0);
            c0[a] = f as u32;
            frac[a] = T::from_f64(p - f);
        }
        for (k, corner) in out.iter_mut().enumerate() {
            let mut coords = c0;
            let mut w = T::one();
            for a in 0..3 {
                if (k >> a) & 1 == 1 {
                    coords[a] += 1;
                    w = w * frac[a];
                } else {
                    w = w * (T::one() - frac[a]);
                }
            }
            let idx = self.config.hash_index(level, coords);
            corner.offset = level_base + idx * self.config.feature_dim;
            corner.weight = w;
        }
    }

    /// Trilinear blend of the hashed corner entries at every level,
    /// written into `out` (length `feature_len`).
    pub fn encode_into(&self, position: Vec3<T>, out: &mut [T]) {
        let f_dim = self.config.feature_dim;
        debug_assert_eq!(out.len(), self.config.feature_len());
        let mut corners: [Corner<T>; 8] = std::array::from_fn(|_| Corner {
            offset: 0,
            weight: T::zero(),
        });
        for level in 0..self.config.levels {
            self.corners(level, position, &mut corners);
            let dst = &mut out[level * f_dim..(level + 1) * f_dim];
            for v in dst.iter_mut() {
                *v = T::zero();
            }
            for corner in corners.iter() {
                let entry = &self.tables[corner.offset..corner.offset + f_dim];
                for (d, &e) in dst.iter_mut().zip(entry) {
                    *d = *d + corner.weight * e;
                }
            }
        }
    }

    pub fn encode(&self, position: Vec3<T>) -> Vec<T> {
        let mut out = vec![T::zero(); self.config.feature_len()];
        self.encode_into(position, &mut out);
        out
    }

    /// Adjoint of `encode`: each corner entry receives
    /// `upstream * trilinear weight`, accumulated additively into
    /// `grad_tables` (same layout as `tables`).
    pub fn encode_backward(&self, position: Vec3<T>, upstream: &[T], grad_tables: &mut [T]) {
        let f_dim = self.config.feature_dim;
        debug_assert_eq!(upstream.len(), self.config.feature_len());
        debug_assert_eq!(grad_tables.len(), self.tables.len());
        let mut corners: [Corner<T>; 8] = std::array::from_fn(|_| Corner {
            offset: 0,
            weight: T::zero(),
        });
        for level in 0..self.config.levels {
            self.corners(level, position, &mut corners);
            let up = &upstream[level * f_dim..(level + 1) * f_dim];
            for corner in corners.iter() {
                let dst = &mut grad_tables[corner.offset..corner.offset + f_dim];
                for (d, &u) in dst.iter_mut().zip(up) {
                    *d = *d + corner.weight * u;
                }
            }
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), BlobError> {
        let data: Vec<f32> = self.tables.iter().map(|v| v.as_f64() as f32).collect();
        write_blob_file(path, &self.config, &[("tables", &data)])
    }

    pub fn load(path: &std::path::Path) -> Result<Self, BlobError> {
        let (config, blobs) = read_blob_file::<HashGridConfig>(path)?;
        config.validate();
        let (_, data) = blobs
            .into_iter()
            .find(|(n, _)| n == "tables")
            .ok_or_else(|| BlobError::Format("missing tables blob".into()))?;
        if data.len() != config.table_floats() {
            return Err(BlobError::Format("table length mismatch".into()));
        }
        Ok(HashGrid {
            config,
            tables: data.into_iter().map(|v| T::from_f64(v as f64)).collect(),
        })
    }
}
