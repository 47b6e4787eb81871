//! Pixel and ray sampling: draws training rays, marches them through the
//! occupancy grid, and maintains the grid's density EMA.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{add, scale, Real, Vec3};
use crate::rng::{CounterRng, Domain};
use crate::scene::Dataset;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("empty train split")]
    EmptyTrainSplit,
}

#[derive(Clone, Copy, Debug)]
pub struct Ray<T> {
    pub origin: Vec3<T>,
    /// Unit direction.
    pub dir: Vec3<T>,
    pub t_near: T,
    pub t_far: T,
}

/// Flattened point samples along a set of rays.
///
/// Per ray, `ts` is strictly increasing and `deltas[i]` is the segment to the
/// next surviving sample (the last sample's segment runs to `t_far`).
#[derive(Clone, Debug, Default)]
pub struct SampleBatch<T> {
    /// Sample positions in unit-cube coordinates.
    pub positions: Vec<Vec3<T>>,
    /// Per-sample unit view direction (the ray's direction).
    pub view_dirs: Vec<Vec3<T>>,
    /// Segment lengths in world units.
    pub deltas: Vec<T>,
    /// Distance along the ray, world units.
    pub ts: Vec<T>,
    pub ray_ids: Vec<u32>,
    /// Prefix index per ray, length n_rays + 1.
    pub ray_offsets: Vec<usize>,
}

impl<T: Real> SampleBatch<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn n_rays(&self) -> usize {
        self.ray_offsets.len().saturating_sub(1)
    }

    pub fn ray_range(&self, ray: usize) -> std::ops::Range<usize> {
        self.ray_offsets[ray]..self.ray_offsets[ray + 1]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OccupancyConfig {
    /// Cells per axis.
    pub resolution: usize,
    pub decay: f64,
    pub threshold: f64,
}

impl Default for OccupancyConfig {
    fn default() -> Self {
        OccupancyConfig {
            resolution: 64,
            decay: 0.95,
            threshold: 0.01,
        }
    }
}

/// Coarse density cache over the unit cube: per-cell EMA of point density
/// estimates, thresholded into occupancy bits that gate ray sampling.
#[derive(Clone, Debug)]
pub struct OccupancyGrid {
    pub config: OccupancyConfig,
    pub ema: Vec<f64>,
    pub occupied: Vec<bool>,
}

impl OccupancyGrid {
    /// Starts fully occupied so early iterations sample everywhere.
    pub fn new(config: OccupancyConfig) -> Self {
        let n = config.resolution.pow(3);
        OccupancyGrid {
            config,
            ema: vec![1.0; n],
            occupied: vec![true; n],
        }
    }

    pub fn empty(config: OccupancyConfig) -> Self {
        let n = config.resolution.pow(3);
        OccupancyGrid {
            config,
            ema: vec![0.0; n],
            occupied: vec![false; n],
        }
    }

    pub fn cell_count(&self) -> usize {
        self.ema.len()
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.occupied.iter().filter(|&&o| o).count() as f64 / self.occupied.len() as f64
    }

    #[inline]
    pub fn cell_of(&self, unit_pos: [f64; 3]) -> usize {
        let r = self.config.resolution;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let c = (unit_pos[a].clamp(0.0, 1.0) * r as f64) as usize;
            idx[a] = c.min(r - 1);
        }
        (idx[2] * r + idx[1]) * r + idx[0]
    }

    #[inline]
    pub fn is_occupied(&self, unit_pos: [f64; 3]) -> bool {
        self.occupied[self.cell_of(unit_pos)]
    }

    pub fn set_cell(&mut self, cell: usize, occupied: bool) {
        self.occupied[cell] = occupied;
        self.ema[cell] = if occupied {
            self.config.threshold * 2.0
        } else {
            0.0
        };
    }

    /// Stochastic EMA refresh: every cell's value becomes
    /// max(decay * ema, sigma at one jittered point in the cell), then the
    /// occupancy bits are rederived from the threshold.
    pub fn update<F>(&mut self, sigma_at: F, iteration: u64, rng: &CounterRng)
    where
        F: Fn([f64; 3]) -> f64 + Sync,
    {
        let r = self.config.resolution;
        let decay = self.config.decay;
        let cell_size = 1.0 / r as f64;
        self.ema
            .par_iter_mut()
            .enumerate()
            .for_each(|(cell, ema)| {
                let mut stream = rng.stream(Domain::OccupancyJitter, &[iteration, cell as u64]);
                let z = cell / (r * r);
                let y = (cell / r) % r;
                let x = cell % r;
                let p = [
                    (x as f64 + stream.next_f64()) * cell_size,
                    (y as f64 + stream.next_f64()) * cell_size,
                    (z as f64 + stream.next_f64()) * cell_size,
                ];
                *ema = (decay * *ema).max(sigma_at(p));
            });
        let threshold = self.config.threshold;
        for (bit, &e) in self.occupied.iter_mut().zip(&self.ema) {
            *bit = e > threshold;
        }
    }

    /// Raw bitfield dump (x-fastest order) with a JSON header; debug aid.
    pub fn dump(&self, path: &std::path::Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut bytes = vec![0u8; self.occupied.len().div_ceil(8)];
        for (i, &o) in self.occupied.iter().enumerate() {
            if o {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        let header = serde_json::json!({
            "resolution": self.config.resolution,
            "threshold": self.config.threshold,
            "decay": self.config.decay,
            "bit_order": "x_fastest",
            "bitfield_bytes": bytes.len(),
        });
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header_bytes = serde_json::to_vec(&header)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        w.write_all(&bytes)?;
        Ok(())
    }
}

/// Uniform draw over all train-split pixels. With `no_replacement`, a seeded
/// permutation of the pixel space is used instead (n_rays must not exceed
/// the pixel count).
pub fn sample_pixels<T: Real>(
    dataset: &Dataset,
    n_rays: usize,
    iteration: u64,
    rng: &CounterRng,
    no_replacement: bool,
) -> Result<(Vec<Ray<T>>, Vec<[T; 3]>), SamplerError> {
    let train_views: Vec<usize> = dataset.train_view_indices();
    if train_views.is_empty() {
        return Err(SamplerError::EmptyTrainSplit);
    }
    let (w, h) = dataset.resolution();
    let pixels_per_view = w * h;
    let total = train_views.len() * pixels_per_view;

    let flat_indices: Vec<usize> = if no_replacement {
        assert!(n_rays <= total, "not enough pixels for no-replacement draw");
        let mut perm: Vec<usize> = (0..total).collect();
        let mut stream = rng.stream(Domain::PixelSampling, &[iteration]);
        for i in (1..total).rev() {
            let j = stream.next_below((i + 1) as u64) as usize;
            perm.swap(i, j);
        }
        perm.truncate(n_rays);
        perm
    } else {
        let mut stream = rng.stream(Domain::PixelSampling, &[iteration]);
        (0..n_rays)
            .map(|_| stream.next_below(total as u64) as usize)
            .collect()
    };

    let mut rays = Vec::with_capacity(n_rays);
    let mut gt = Vec::with_capacity(n_rays);
    for flat in flat_indices {
        let view_idx = train_views[flat / pixels_per_view];
        let pix = flat % pixels_per_view;
        let (px, py) = (pix % w, pix / w);
        let view = &dataset.views[view_idx];
        let (origin, dir) = view.camera.ray_for_pixel(px, py);
        let ray = clip_to_bounds(
            [
                T::from_f64(origin[0]),
                T::from_f64(origin[1]),
                T::from_f64(origin[2]),
            ],
            [
                T::from_f64(dir[0]),
                T::from_f64(dir[1]),
                T::from_f64(dir[2]),
            ],
            dataset.bounds_min.map(T::from_f64),
            dataset.bounds_max.map(T::from_f64),
        );
        rays.push(ray);
        let c = view.image.get(px, py);
        gt.push([
            T::from_f64(c[0] as f64),
            T::from_f64(c[1] as f64),
            T::from_f64(c[2] as f64),
        ]);
    }
    Ok((rays, gt))
}

/// Slab intersection of a ray with the scene bounds; rays that miss get
/// t_near = t_far = 0 and yield no samples.
pub fn clip_to_bounds<T: Real>(
    origin: Vec3<T>,
    dir: Vec3<T>,
    bounds_min: Vec3<T>,
    bounds_max: Vec3<T>,
) -> Ray<T> {
    let mut t0 = T::zero();
    let mut t1 = T::from_f64(f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < T::from_f64(1e-12) {
            if origin[a] < bounds_min[a] || origin[a] > bounds_max[a] {
                t1 = T::zero();
                t0 = T::zero();
                break;
            }
            continue;
        }
        let inv = T::one() / dir[a];
        let mut ta = (bounds_min[a] - origin[a]) * inv;
        let mut tb = (bounds_max[a] - origin[a]) * inv;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    if t1 < t0 {
        t0 = T::zero();
        t1 = T::zero();
    }
    Ray {
        origin,
        dir,
        t_near: t0,
        t_far: t1,
    }
}

/// Marches every ray with per-ray stratified jitter, keeping samples whose
/// cell is occupied. Occluded samples are deliberately not pruned; the
/// mining stage is expected to down-weight them.
pub fn sample_points<T: Real>(
    rays: &[Ray<T>],
    occgrid: &OccupancyGrid,
    step_size: T,
    bounds_min: Vec3<T>,
    bounds_max: Vec3<T>,
    iteration: u64,
    rng: &CounterRng,
    jitter: bool,
) -> SampleBatch<T> {
    assert!(step_size > T::zero());
    let extent = [
        bounds_max[0] - bounds_min[0],
        bounds_max[1] - bounds_min[1],
        bounds_max[2] - bounds_min[2],
    ];

    let per_ray: Vec<(Vec<T>, Vec<Vec3<T>>)> = rays
        .par_iter()
        .enumerate()
        .map(|(j, ray)| {
            let offset = if jitter {
                let mut stream = rng.stream(Domain::RayJitter, &[iteration, j as u64]);
                T::from_f64(stream.next_f64())
            } else {
                T::zero()
            };
            let mut ts = Vec::new();
            let mut ps = Vec::new();
            let mut k = 0u64;
            loop {
                let t = ray.t_near + (offset + T::from_usize(k as usize)) * step_size;
                if t >= ray.t_far {
                    break;
                }
                let wp = add(ray.origin, scale(ray.dir, t));
                let unit = [
                    ((wp[0] - bounds_min[0]) / extent[0]).as_f64(),
                    ((wp[1] - bounds_min[1]) / extent[1]).as_f64(),
                    ((wp[2] - bounds_min[2]) / extent[2]).as_f64(),
                ];
                if occgrid.is_occupied(unit) {
                    ts.push(t);
                    ps.push([
                        T::from_f64(unit[0].clamp(0.0, 1.0)),
                        T::from_f64(unit[1].clamp(0.0, 1.0)),
                        T::from_f64(unit[2].clamp(0.0, 1.0)),
                    ]);
                }
                k += 1;
            }
            (ts, ps)
        })
        .collect();

    let total: usize = per_ray.iter().map(|(ts, _)| ts.len()).sum();
    let mut batch = SampleBatch {
        positions: Vec::with_capacity(total),
        view_dirs: Vec::with_capacity(total),
        deltas: Vec::with_capacity(total),
        ts: Vec::with_capacity(total),
        ray_ids: Vec::with_capacity(total),
        ray_offsets: Vec::with_capacity(rays.len() + 1),
    };
    batch.ray_offsets.push(0);
    for (j, (ts, ps)) in per_ray.into_iter().enumerate() {
        let n = ts.len();
        for i in 0..n {
            let delta = if i + 1 < n {
                ts[i + 1] - ts[i]
            } else {
                rays[j].t_far - ts[i]
            };
            batch.deltas.push(delta);
            batch.ts.push(ts[i]);
            batch.positions.push(ps[i]);
            batch.view_dirs.push(rays[j].dir);
            batch.ray_ids.push(j as u32);
        }
        batch.ray_offsets.push(batch.positions.len());
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use crate::scene::{generate_scene, make_dataset};

    fn unit_ray() -> Ray<f64> {
        Ray {
            origin: [-1.0, 0.0, 0.0],
            dir: [1.0, 0.0, 0.0],
            t_near: 0.0,
            t_far: 1.0,
        }
    }

    fn unit_bounds() -> ([f64; 3], [f64; 3]) {
        ([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0])
    }

    #[test]
    fn dense_grid_uniform_steps() {
        let grid = OccupancyGrid::new(OccupancyConfig {
            resolution: 4,
            ..Default::default()
        });
        let (lo, hi) = unit_bounds();
        let rng = CounterRng::new(0);
        let batch = sample_points(&[unit_ray()], &grid, 0.1, lo, hi, 0, &rng, false);
        assert_eq!(batch.len(), 10);
        for &d in &batch.deltas {
            assert!((d - 0.1).abs() < 1e-12, "delta {d}");
        }
        assert_eq!(batch.ray_offsets, vec![0, 10]);
        assert_eq!(batch.ray_ids, vec![0; 10]);
    }

    #[test]
    fn empty_grid_yields_no_samples() {
        let grid = OccupancyGrid::empty(OccupancyConfig {
            resolution: 4,
            ..Default::default()
        });
        let (lo, hi) = unit_bounds();
        let rng = CounterRng::new(0);
        let batch = sample_points(&[unit_ray()], &grid, 0.1, lo, hi, 0, &rng, true);
        assert_eq!(batch.len(), 0);
        assert_eq!(batch.ray_offsets, vec![0, 0]);
    }

    #[test]
    fn half_occupied_volume_halves_sample_count() {
        // occupy x < 0.5 (unit coords): half the volume
        let mut grid = OccupancyGrid::empty(OccupancyConfig {
            resolution: 8,
            ..Default::default()
        });
        let r = 8;
        for z in 0..r {
            for y in 0..r {
                for x in 0..r / 2 {
                    grid.set_cell((z * r + y) * r + x, true);
                }
            }
        }
        let (lo, hi) = unit_bounds();
        let rng = CounterRng::new(3);
        let mut rays = Vec::new();
        let mut stream = rng.stream(crate::rng::Domain::Misc, &[0]);
        for _ in 0..100 {
            // rays crossing the full cube along x at random (y, z)
            let y = stream.uniform(-0.99, 0.99);
            let z = stream.uniform(-0.99, 0.99);
            rays.push(Ray {
                origin: [-1.0, y, z],
                dir: [1.0, 0.0, 0.0],
                t_near: 0.0,
                t_far: 2.0,
            });
        }
        let dense_grid = OccupancyGrid::new(OccupancyConfig {
            resolution: 8,
            ..Default::default()
        });
        let dense = sample_points(&rays, &dense_grid, 0.05, lo, hi, 0, &rng, true);
        let half = sample_points(&rays, &grid, 0.05, lo, hi, 0, &rng, true);
        let ratio = half.len() as f64 / dense.len() as f64;
        assert!(
            (ratio - 0.5).abs() < 0.05,
            "ratio {ratio} ({} vs {})",
            half.len(),
            dense.len()
        );
    }

    #[test]
    fn per_ray_t_monotone_and_deltas_consistent() {
        let scene = generate_scene("spheres", 1).unwrap();
        let dataset = make_dataset(&scene, 8, (16, 16), 9).unwrap();
        let rng = CounterRng::new(2);
        let (rays, _gt) = sample_pixels::<f64>(&dataset, 64, 5, &rng, false).unwrap();
        let grid = OccupancyGrid::new(OccupancyConfig {
            resolution: 16,
            ..Default::default()
        });
        let (lo, hi) = unit_bounds();
        let batch = sample_points(&rays, &grid, 0.05, lo, hi, 5, &rng, true);
        assert!(batch.len() > 0);
        for ray in 0..batch.n_rays() {
            let range = batch.ray_range(ray);
            let idxs: Vec<usize> = range.collect();
            for w in idxs.windows(2) {
                assert!(batch.ts[w[1]] > batch.ts[w[0]], "t not increasing");
                let d = batch.ts[w[1]] - batch.ts[w[0]];
                assert!((batch.deltas[w[0]] - d).abs() < 1e-9);
            }
            if let Some(&last) = idxs.last() {
                let expect = rays[ray].t_far - batch.ts[last];
                assert!((batch.deltas[last] - expect).abs() < 1e-9);
                assert!(batch.deltas[last] >= 0.0);
            }
        }
    }

    #[test]
    fn pixel_draw_is_deterministic() {
        let scene = generate_scene("spheres", 1).unwrap();
        let dataset = make_dataset(&scene, 8, (8, 8), 9).unwrap();
        let rng = CounterRng::new(7);
        let (r1, g1) = sample_pixels::<f32>(&dataset, 32, 11, &rng, false).unwrap();
        let (r2, g2) = sample_pixels::<f32>(&dataset, 32, 11, &rng, false).unwrap();
        assert_eq!(g1, g2);
        for (a, b) in r1.iter().zip(&r2) {
            assert_eq!(a.origin, b.origin);
            assert_eq!(a.dir, b.dir);
        }
        let (r3, _) = sample_pixels::<f32>(&dataset, 32, 12, &rng, false).unwrap();
        assert!(r1
            .iter()
            .zip(&r3)
            .any(|(a, b)| a.dir != b.dir || a.origin != b.origin));
    }

    #[test]
    fn no_replacement_covers_every_pixel_once() {
        let scene = generate_scene("spheres", 1).unwrap();
        let dataset = make_dataset(&scene, 8, (8, 8), 9).unwrap();
        let train_pixels = 7 * 8 * 8;
        let rng = CounterRng::new(7);
        let (rays, _) = sample_pixels::<f32>(&dataset, train_pixels, 0, &rng, true).unwrap();
        assert_eq!(rays.len(), train_pixels);
        // distinct (origin, dir) per pixel: count unique directions by bits
        let mut keys: Vec<[u32; 6]> = rays
            .iter()
            .map(|r| {
                [
                    r.origin[0].to_bits(),
                    r.origin[1].to_bits(),
                    r.origin[2].to_bits(),
                    r.dir[0].to_bits(),
                    r.dir[1].to_bits(),
                    r.dir[2].to_bits(),
                ]
            })
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), train_pixels);
    }

    #[test]
    fn pixel_draw_uniform_over_views_chi_square() {
        let scene = generate_scene("spheres", 1).unwrap();
        let dataset = make_dataset(&scene, 16, (8, 8), 9).unwrap();
        let train_views = dataset.train_view_indices();
        assert_eq!(train_views.len(), 14);
        let rng = CounterRng::new(13);
        let n = 100_000;
        // map rays back to views by matching camera origin
        let origins: Vec<[f64; 3]> = train_views
            .iter()
            .map(|&v| dataset.views[v].camera.position)
            .collect();
        let mut counts = vec![0u64; origins.len()];
        let mut drawn = 0;
        let mut iter = 0u64;
        while drawn < n {
            let take = 10_000.min(n - drawn);
            let (rays, _) = sample_pixels::<f64>(&dataset, take, iter, &rng, false).unwrap();
            for r in rays {
                let vi = origins
                    .iter()
                    .position(|o| {
                        (o[0] - r.origin[0]).abs() < 1e-9
                            && (o[1] - r.origin[1]).abs() < 1e-9
                            && (o[2] - r.origin[2]).abs() < 1e-9
                    })
                    .expect("ray origin matches a train camera");
                counts[vi] += 1;
            }
            drawn += take;
            iter += 1;
        }
        let expect = n as f64 / counts.len() as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expect).powi(2) / expect)
            .sum();
        // df = 13, p = 0.001 critical value
        assert!(chi2 < 34.528, "chi2 {chi2}");
    }

    #[test]
    fn occupancy_decays_to_empty_on_zero_field() {
        let mut grid = OccupancyGrid::new(OccupancyConfig {
            resolution: 8,
            decay: 0.5,
            threshold: 0.01,
        });
        let rng = CounterRng::new(1);
        for it in 0..10 {
            grid.update(|_| 0.0, it, &rng);
        }
        // 0.5^10 < 0.01
        assert_eq!(grid.occupied_fraction(), 0.0);
        for &e in &grid.ema {
            assert!((e - 0.5f64.powi(10)).abs() < 1e-12);
        }
    }

    #[test]
    fn occupancy_saturates_on_dense_field() {
        let mut grid = OccupancyGrid::empty(OccupancyConfig {
            resolution: 8,
            ..Default::default()
        });
        let rng = CounterRng::new(1);
        grid.update(|_| 100.0, 0, &rng);
        assert_eq!(grid.occupied_fraction(), 1.0);
    }

    #[test]
    fn bounds_clip_misses_yield_zero_range() {
        let (lo, hi) = unit_bounds();
        let r = clip_to_bounds([5.0, 5.0, 5.0], [1.0, 0.0, 0.0], lo, hi);
        assert_eq!(r.t_near, 0.0);
        assert_eq!(r.t_far, 0.0);
        let r = clip_to_bounds([-2.0, 0.0, 0.0], [1.0, 0.0, 0.0], lo, hi);
        assert!((r.t_near - 1.0).abs() < 1e-12);
        assert!((r.t_far - 3.0).abs() < 1e-12);
    }

    #[test]
    fn occupancy_dump_writes_bitfield() {
        let dir = tempfile::tempdir().unwrap();
        let grid = OccupancyGrid::new(OccupancyConfig {
            resolution: 4,
            ..Default::default()
        });
        let path = dir.path().join("occ.bin");
        grid.dump(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + header_len]).unwrap();
        assert_eq!(header["resolution"], 4);
        assert_eq!(bytes.len() - 8 - header_len, 64usize.div_ceil(8));
    }
}
