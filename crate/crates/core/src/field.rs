//! The radiance field network: hash-encoded density MLP plus color MLP with
//! explicit pre-activation outputs.
//!
//! Two forward modes share one arithmetic path: inference retains nothing,
//! training additionally records per-layer intermediates on a [`Tape`] that
//! the manual backward pass consumes exactly once. Outputs of the two modes
//! are bit-identical.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{HashGrid, HashGridConfig};
use crate::evalbench::cost::{CostLedger, Phase};
use crate::io::{read_blob_file, write_blob_file, BlobError};
use crate::math::{logistic, Real, Vec3};
use crate::rng::{CounterRng, Domain};

use thiserror::Error;

/// Samples per parallel work unit. Fixed (not thread-count dependent) so
/// gradient merge order, and therefore bit-level results, do not change with
/// the worker pool size.
const CHUNK: usize = 512;

/// Chunks merged per wave during backward; bounds transient partial-gradient
/// memory to WAVE buffers.
const WAVE: usize = 8;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("non-finite input at sample {0}")]
    NonFinite(usize),
    #[error("gradient shape mismatch: {0} grads for {1} tape samples")]
    GradShape(usize, usize),
}

/// Gradient accumulation order: `Deterministic` merges fixed-size chunk
/// buffers in index order (bit-exact across runs and thread counts), `Fast`
/// lets the runtime reduce in whatever order finishes first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParallelMode {
    Deterministic,
    Fast,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FieldConfig {
    pub grid: HashGridConfig,
    /// Hidden width of the density MLP (one hidden layer).
    pub density_hidden: usize,
    /// Latent features handed from the density MLP to the color MLP.
    pub latent_dim: usize,
    /// Hidden width of the color MLP.
    pub color_hidden: usize,
    /// Hidden layer count of the color MLP.
    pub color_hidden_layers: usize,
    /// Sinusoid bands for the view-direction encoding.
    pub dir_bands: usize,
    /// Density pre-activations are clamped to this before exp.
    pub sigma_clamp: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            grid: HashGridConfig::default(),
            density_hidden: 64,
            latent_dim: 15,
            color_hidden: 64,
            color_hidden_layers: 2,
            dir_bands: 4,
            sigma_clamp: 10.0,
        }
    }
}

impl FieldConfig {
    /// A reduced architecture for fast experiments and tests.
    pub fn small() -> Self {
        FieldConfig {
            grid: HashGridConfig {
                levels: 4,
                base_resolution: 16,
                growth: 1.9,
                table_size: 1 << 12,
                feature_dim: 2,
            },
            density_hidden: 16,
            latent_dim: 7,
            color_hidden: 16,
            color_hidden_layers: 2,
            dir_bands: 2,
            sigma_clamp: 10.0,
        }
    }

    pub fn dir_enc_dim(&self) -> usize {
        6 * self.dir_bands
    }

    pub fn color_input_dim(&self) -> usize {
        self.latent_dim + self.dir_enc_dim()
    }

    /// Floats recorded on the tape per sample: position, hash features,
    /// density hidden pre-activations, density output (sigma' + latent),
    /// encoded direction, and each color hidden pre-activation.
    pub fn tape_floats_per_sample(&self) -> usize {
        3 + self.grid.feature_len()
            + self.density_hidden
            + (1 + self.latent_dim)
            + self.dir_enc_dim()
            + self.color_hidden * self.color_hidden_layers
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![
            (self.grid.feature_len(), self.density_hidden),
            (self.density_hidden, 1 + self.latent_dim),
            (self.color_input_dim(), self.color_hidden),
        ];
        for _ in 1..self.color_hidden_layers {
            dims.push((self.color_hidden, self.color_hidden));
        }
        dims.push((self.color_hidden, 3));
        dims
    }

    /// MACs of one sample's forward pass (either mode).
    pub fn forward_macs_per_sample(&self) -> u64 {
        let linear: usize = self.layer_dims().iter().map(|(i, o)| i * o).sum();
        self.grid.macs_per_sample() + linear as u64 + self.dir_enc_dim() as u64 + 4
    }

    /// MACs of one sample's backward pass: weight gradients plus input
    /// gradients per layer, plus the encoding's corner accumulation.
    pub fn backward_macs_per_sample(&self) -> u64 {
        let linear: usize = self.layer_dims().iter().map(|(i, o)| i * o).sum();
        self.grid.macs_per_sample() + 2 * linear as u64
    }
}

#[derive(Clone, Debug)]
pub struct Dense<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major: w[o * in_dim + i].
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Real> Dense<T> {
    fn init(in_dim: usize, out_dim: usize, stream: &mut crate::rng::Stream) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| T::from_f64(stream.uniform(-bound, bound)))
            .collect();
        Dense {
            in_dim,
            out_dim,
            w,
            b: vec![T::zero(); out_dim],
        }
    }

    #[inline]
    fn forward(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.in_dim);
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = self.b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc = acc + *wi * *xi;
            }
            *out_v = acc;
        }
    }

    /// Accumulates dL/dw and dL/db from `delta` = dL/d(out) and writes
    /// dL/d(x) into `dx`.
    #[inline]
    fn backward(&self, x: &[T], delta: &[T], dw: &mut [T], db: &mut [T], dx: &mut [T]) {
        for v in dx.iter_mut().take(self.in_dim) {
            *v = T::zero();
        }
        for o in 0..self.out_dim {
            let d = delta[o];
            db[o] = db[o] + d;
            let w_row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let g_row = &mut dw[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                g_row[i] = g_row[i] + d * x[i];
                dx[i] = dx[i] + w_row[i] * d;
            }
        }
    }
}

/// Activated and pre-activation outputs for a sample batch.
#[derive(Clone, Debug, Default)]
pub struct FieldOutput<T> {
    pub sigma_pre: Vec<T>,
    pub color_pre: Vec<[T; 3]>,
    pub sigma: Vec<T>,
    pub color: Vec<[T; 3]>,
}

impl<T: Real> FieldOutput<T> {
    fn with_len(n: usize) -> Self {
        FieldOutput {
            sigma_pre: vec![T::zero(); n],
            color_pre: vec![[T::zero(); 3]; n],
            sigma: vec![T::zero(); n],
            color: vec![[T::zero(); 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }
}

/// Density activation: exp with an upper clamp on the pre-activation.
pub fn activate_sigma<T: Real>(sigma_pre: T, clamp: T) -> T {
    sigma_pre.min(clamp).exp()
}

/// d(sigma)/d(sigma'): the activated value below the clamp, zero above it.
pub fn activate_sigma_grad<T: Real>(sigma_pre: T, sigma: T, clamp: T) -> T {
    if sigma_pre < clamp {
        sigma
    } else {
        T::zero()
    }
}

pub fn activate_color<T: Real>(c_pre: [T; 3]) -> [T; 3] {
    [logistic(c_pre[0]), logistic(c_pre[1]), logistic(c_pre[2])]
}

/// Recorded intermediates of a training-mode forward pass. Consumed (moved)
/// by `FieldParams::backward`, so a tape cannot be replayed.
#[derive(Debug)]
pub struct Tape<T> {
    n: usize,
    per_sample: usize,
    data: Vec<T>,
}

impl<T: Real> Tape<T> {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn float_count(&self) -> u64 {
        (self.n * self.per_sample) as u64
    }

    fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.per_sample..(i + 1) * self.per_sample]
    }
}

/// Offsets into one tape row.
struct TapeLayout {
    pos: usize,
    feats: usize,
    density_hidden: usize,
    density_out: usize,
    dir_enc: usize,
    color_hidden: usize,
    color_hidden_width: usize,
}

impl TapeLayout {
    fn new(cfg: &FieldConfig) -> Self {
        let pos = 0;
        let feats = pos + 3;
        let density_hidden = feats + cfg.grid.feature_len();
        let density_out = density_hidden + cfg.density_hidden;
        let dir_enc = density_out + 1 + cfg.latent_dim;
        let color_hidden = dir_enc + cfg.dir_enc_dim();
        TapeLayout {
            pos,
            feats,
            density_hidden,
            density_out,
            dir_enc,
            color_hidden,
            color_hidden_width: cfg.color_hidden,
        }
    }
}

pub const BLOCK_HASH_TABLE: usize = 0;

#[derive(Clone, Debug)]
pub struct FieldParams<T> {
    pub config: FieldConfig,
    pub grid: HashGrid<T>,
    pub density: Vec<Dense<T>>,
    pub color: Vec<Dense<T>>,
}

/// Parameter gradients, blocks aligned with `FieldParams::blocks`.
#[derive(Clone, Debug)]
pub struct FieldGrads<T> {
    pub blocks: Vec<Vec<T>>,
}

impl<T: Real> FieldGrads<T> {
    pub fn zeros_like(params: &FieldParams<T>) -> Self {
        FieldGrads {
            blocks: params
                .blocks()
                .iter()
                .map(|b| vec![T::zero(); b.len()])
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &FieldGrads<T>) {
        for (dst, src) in self.blocks.iter_mut().zip(&other.blocks) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *d + *s;
            }
        }
    }

    pub fn max_abs_diff(&self, other: &FieldGrads<T>) -> T {
        let mut m = T::zero();
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            for (x, y) in a.iter().zip(b) {
                m = m.max((*x - *y).abs());
            }
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: FieldConfig,
    layer_dims: Vec<(usize, usize)>,
    activations: Vec<String>,
}

impl<T: Real> FieldParams<T> {
    pub fn init(config: FieldConfig, rng: &CounterRng) -> Self {
        let grid = HashGrid::init(config.grid.clone(), rng);
        let mut block = 1u64;
        let mut next = |in_dim: usize, out_dim: usize| {
            let mut stream = rng.stream(Domain::ParamInit, &[block]);
            block += 1;
            Dense::init(in_dim, out_dim, &mut stream)
        };
        let density = vec![
            next(config.grid.feature_len(), config.density_hidden),
            next(config.density_hidden, 1 + config.latent_dim),
        ];
        let mut color = vec![next(config.color_input_dim(), config.color_hidden)];
        for _ in 1..config.color_hidden_layers {
            color.push(next(config.color_hidden, config.color_hidden));
        }
        color.push(next(config.color_hidden, 3));
        FieldParams {
            config,
            grid,
            density,
            color,
        }
    }

    /// All-zero MLP weights/biases (hash grid still randomly initialized);
    /// used by tests exercising the bias-only output case.
    pub fn zeros(config: FieldConfig, rng: &CounterRng) -> Self {
        let mut p = Self::init(config, rng);
        for layer in p.density.iter_mut().chain(p.color.iter_mut()) {
            layer.w.iter_mut().for_each(|v| *v = T::zero());
            layer.b.iter_mut().for_each(|v| *v = T::zero());
        }
        p
    }

    /// Parameter blocks in a stable order: hash tables first, then each
    /// dense layer's weights and biases.
    pub fn blocks(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![&self.grid.tables];
        for layer in self.density.iter().chain(self.color.iter()) {
            out.push(&layer.w);
            out.push(&layer.b);
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![&mut self.grid.tables];
        for layer in self.density.iter_mut().chain(self.color.iter_mut()) {
            out.push(&mut layer.w);
            out.push(&mut layer.b);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Density-only evaluation at one unit-cube position (the color branch
    /// is skipped); used by the occupancy refresh.
    pub fn sigma_at(&self, position: Vec3<T>, clamp: T) -> T {
        let cfg = &self.config;
        let mut feats = vec![T::zero(); cfg.grid.feature_len()];
        self.grid.encode_into(position, &mut feats);
        let mut z1 = vec![T::zero(); cfg.density_hidden];
        self.density[0].forward(&feats, &mut z1);
        for v in z1.iter_mut() {
            *v = v.max(T::zero());
        }
        let mut z2 = vec![T::zero(); 1 + cfg.latent_dim];
        self.density[1].forward(&z1, &mut z2);
        activate_sigma(z2[0], clamp)
    }

    fn check_finite(points: &[Vec3<T>], dirs: &[Vec3<T>]) -> Result<(), FieldError> {
        for (i, (p, d)) in points.iter().zip(dirs).enumerate() {
            if !(p.iter().all(|v| v.is_finite()) && d.iter().all(|v| v.is_finite())) {
                return Err(FieldError::NonFinite(i));
            }
        }
        Ok(())
    }

    fn dir_encode(&self, dir: Vec3<T>, out: &mut [T]) {
        let mut k = 0;
        for band in 0..self.config.dir_bands {
            let freq = T::from_f64((1u64 << band) as f64 * std::f64::consts::PI);
            for &d in dir.iter() {
                let arg = freq * d;
                out[k] = arg.sin();
                out[k + 1] = arg.cos();
                k += 2;
            }
        }
    }

    /// One sample through the network. The identical arithmetic runs in both
    /// modes; `tape_row` only receives copies of intermediates.
    #[allow(clippy::too_many_arguments)]
    fn forward_sample(
        &self,
        point: Vec3<T>,
        dir: Vec3<T>,
        scratch: &mut Scratch<T>,
        mut tape_row: Option<&mut [T]>,
        out_sigma_pre: &mut T,
        out_color_pre: &mut [T; 3],
        out_sigma: &mut T,
        out_color: &mut [T; 3],
    ) {
        let cfg = &self.config;
        self.grid.encode_into(point, &mut scratch.feats);
        self.density[0].forward(&scratch.feats, &mut scratch.dz1);
        for (a, z) in scratch.da1.iter_mut().zip(&scratch.dz1) {
            *a = z.max(T::zero());
        }
        self.density[1].forward(&scratch.da1, &mut scratch.dz2);
        let sigma_pre = scratch.dz2[0];

        self.dir_encode(dir, &mut scratch.dir_enc);
        scratch.cx[..cfg.latent_dim].copy_from_slice(&scratch.dz2[1..1 + cfg.latent_dim]);
        scratch.cx[cfg.latent_dim..].copy_from_slice(&scratch.dir_enc);

        let mut input = scratch.cx.clone();
        for (l, layer) in self.color.iter().enumerate() {
            if l < cfg.color_hidden_layers {
                let z = &mut scratch.cz[l];
                layer.forward(&input, z);
                input.resize(layer.out_dim, T::zero());
                for (a, zv) in input.iter_mut().zip(z.iter()) {
                    *a = zv.max(T::zero());
                }
            } else {
                layer.forward(&input, &mut scratch.c_out);
            }
        }

        if let Some(row) = tape_row.as_deref_mut() {
            let layout = TapeLayout::new(cfg);
            row[layout.pos..layout.pos + 3].copy_from_slice(&point);
            row[layout.feats..layout.feats + scratch.feats.len()].copy_from_slice(&scratch.feats);
            row[layout.density_hidden..layout.density_hidden + scratch.dz1.len()]
                .copy_from_slice(&scratch.dz1);
            row[layout.density_out..layout.density_out + scratch.dz2.len()]
                .copy_from_slice(&scratch.dz2);
            row[layout.dir_enc..layout.dir_enc + scratch.dir_enc.len()]
                .copy_from_slice(&scratch.dir_enc);
            for (l, z) in scratch.cz.iter().enumerate() {
                let off = layout.color_hidden + l * layout.color_hidden_width;
                row[off..off + z.len()].copy_from_slice(z);
            }
        }

        *out_sigma_pre = sigma_pre;
        *out_color_pre = [scratch.c_out[0], scratch.c_out[1], scratch.c_out[2]];
        *out_sigma = activate_sigma(sigma_pre, T::from_f64(cfg.sigma_clamp));
        *out_color = activate_color(*out_color_pre);
    }

    fn forward_batch(
        &self,
        points: &[Vec3<T>],
        dirs: &[Vec3<T>],
        tape: Option<&mut Tape<T>>,
    ) -> FieldOutput<T> {
        assert_eq!(points.len(), dirs.len());
        let n = points.len();
        let mut out = FieldOutput::with_len(n);
        if n == 0 {
            return out;
        }
        let per_sample = self.config.tape_floats_per_sample();
        let n_chunks = n.div_ceil(CHUNK);

        // disjoint per-chunk output and tape regions; no shared mutable
        // state, so the parallel schedule cannot change results
        let tape_chunks: Vec<Option<&mut [T]>> = match tape {
            Some(t) => t.data.chunks_mut(CHUNK * per_sample).map(Some).collect(),
            None => (0..n_chunks).map(|_| None).collect(),
        };
        let work: Vec<_> = out
            .sigma_pre
            .chunks_mut(CHUNK)
            .zip(out.color_pre.chunks_mut(CHUNK))
            .zip(out.sigma.chunks_mut(CHUNK))
            .zip(out.color.chunks_mut(CHUNK))
            .zip(tape_chunks)
            .enumerate()
            .map(|(ci, ((((sp, cp), sg), cl), tp))| (ci, sp, cp, sg, cl, tp))
            .collect();

        work.into_par_iter()
            .for_each(|(ci, sigma_pre, color_pre, sigma, color, mut tape_chunk)| {
                let mut scratch = Scratch::new(&self.config);
                let base = ci * CHUNK;
                for i in 0..sigma_pre.len() {
                    let tape_row = tape_chunk
                        .as_deref_mut()
                        .map(|t| &mut t[i * per_sample..(i + 1) * per_sample]);
                    self.forward_sample(
                        points[base + i],
                        dirs[base + i],
                        &mut scratch,
                        tape_row,
                        &mut sigma_pre[i],
                        &mut color_pre[i],
                        &mut sigma[i],
                        &mut color[i],
                    );
                }
            });
        out
    }

    /// Forward pass retaining no intermediates.
    pub fn forward_inference(
        &self,
        points: &[Vec3<T>],
        dirs: &[Vec3<T>],
        ledger: &mut CostLedger,
    ) -> Result<FieldOutput<T>, FieldError> {
        Self::check_finite(points, dirs)?;
        ledger.add_macs(
            Phase::ForwardInference,
            points.len() as u64 * self.config.forward_macs_per_sample(),
        );
        Ok(self.forward_batch(points, dirs, None))
    }

    /// Forward pass recording intermediates; outputs are bit-identical to
    /// `forward_inference` on the same inputs.
    pub fn forward_training(
        &self,
        points: &[Vec3<T>],
        dirs: &[Vec3<T>],
        ledger: &mut CostLedger,
    ) -> Result<(FieldOutput<T>, Tape<T>), FieldError> {
        Self::check_finite(points, dirs)?;
        ledger.add_macs(
            Phase::ForwardTraining,
            points.len() as u64 * self.config.forward_macs_per_sample(),
        );
        let per_sample = self.config.tape_floats_per_sample();
        let mut tape = Tape {
            n: points.len(),
            per_sample,
            data: vec![T::zero(); points.len() * per_sample],
        };
        let out = self.forward_batch(points, dirs, Some(&mut tape));
        ledger.retain_floats(tape.float_count());
        Ok((out, tape))
    }

    /// Backward pass from pre-activation gradients to parameter gradients.
    /// Consumes the tape (a tape can be used exactly once); roughly twice
    /// the forward MAC count.
    pub fn backward(
        &self,
        tape: Tape<T>,
        grad_sigma_pre: &[T],
        grad_color_pre: &[[T; 3]],
        mode: ParallelMode,
        ledger: &mut CostLedger,
    ) -> Result<FieldGrads<T>, FieldError> {
        if grad_sigma_pre.len() != tape.n || grad_color_pre.len() != tape.n {
            return Err(FieldError::GradShape(grad_sigma_pre.len(), tape.n));
        }
        ledger.add_macs(
            Phase::Backward,
            tape.n as u64 * self.config.backward_macs_per_sample(),
        );

        let chunk_grads = |range: std::ops::Range<usize>| -> FieldGrads<T> {
            let mut grads = FieldGrads::zeros_like(self);
            let mut scratch = BackwardScratch::new(&self.config);
            for i in range {
                self.backward_sample(
                    tape.row(i),
                    grad_sigma_pre[i],
                    grad_color_pre[i],
                    &mut grads,
                    &mut scratch,
                );
            }
            grads
        };

        let n_chunks = tape.n.div_ceil(CHUNK);
        let ranges: Vec<std::ops::Range<usize>> = (0..n_chunks)
            .map(|c| c * CHUNK..((c + 1) * CHUNK).min(tape.n))
            .collect();

        let mut total = FieldGrads::zeros_like(self);
        match mode {
            ParallelMode::Deterministic => {
                // fixed chunking + in-order merge: results independent of
                // thread schedule
                for wave in ranges.chunks(WAVE) {
                    let partials: Vec<FieldGrads<T>> =
                        wave.par_iter().map(|r| chunk_grads(r.clone())).collect();
                    for p in &partials {
                        total.add_assign(p);
                    }
                }
            }
            ParallelMode::Fast => {
                if let Some(merged) = ranges
                    .into_par_iter()
                    .map(chunk_grads)
                    .reduce_with(|mut a, b| {
                        a.add_assign(&b);
                        a
                    })
                {
                    total = merged;
                }
            }
        }
        ledger.release_floats(tape.float_count());
        Ok(total)
    }

    fn backward_sample(
        &self,
        row: &[T],
        d_sigma_pre: T,
        d_color_pre: [T; 3],
        grads: &mut FieldGrads<T>,
        s: &mut BackwardScratch<T>,
    ) {
        let cfg = &self.config;
        let layout = TapeLayout::new(cfg);
        let pos: Vec3<T> = [row[0], row[1], row[2]];
        let feats = &row[layout.feats..layout.feats + cfg.grid.feature_len()];
        let dz1 = &row[layout.density_hidden..layout.density_hidden + cfg.density_hidden];
        let dz2 = &row[layout.density_out..layout.density_out + 1 + cfg.latent_dim];
        let dir_enc = &row[layout.dir_enc..layout.dir_enc + cfg.dir_enc_dim()];

        // color MLP, last layer first; block indices follow FieldParams::blocks
        let n_color = self.color.len();
        let color_block0 = 1 + 2 * self.density.len();
        s.delta[..3].copy_from_slice(&d_color_pre);
        let mut delta_len = 3;
        for l in (0..n_color).rev() {
            let layer = &self.color[l];
            // layer input: activated previous hidden, or the latent+direction
            // concat for the first layer
            let input: &[T] = if l == 0 {
                s.cx[..cfg.latent_dim].copy_from_slice(&dz2[1..1 + cfg.latent_dim]);
                s.cx[cfg.latent_dim..].copy_from_slice(dir_enc);
                &s.cx
            } else {
                let z = &row[layout.color_hidden + (l - 1) * layout.color_hidden_width
                    ..layout.color_hidden + l * layout.color_hidden_width];
                for (a, zv) in s.act.iter_mut().zip(z) {
                    *a = zv.max(T::zero());
                }
                &s.act[..layer.in_dim]
            };
            let (dw, db) = {
                let pair = &mut grads.blocks[color_block0 + 2 * l..color_block0 + 2 * l + 2];
                let (a, b) = pair.split_at_mut(1);
                (&mut a[0], &mut b[0])
            };
            layer.backward(
                input,
                &s.delta[..delta_len],
                dw,
                db,
                &mut s.dx[..layer.in_dim],
            );
            delta_len = layer.in_dim;
            if l > 0 {
                let z = &row[layout.color_hidden + (l - 1) * layout.color_hidden_width
                    ..layout.color_hidden + l * layout.color_hidden_width];
                for k in 0..delta_len {
                    s.delta[k] = if z[k] > T::zero() {
                        s.dx[k]
                    } else {
                        T::zero()
                    };
                }
            } else {
                s.delta[..delta_len].copy_from_slice(&s.dx[..delta_len]);
            }
        }

        // density MLP: upstream is [d_sigma_pre, d_latent from color input]
        s.dz2_grad[0] = d_sigma_pre;
        s.dz2_grad[1..1 + cfg.latent_dim].copy_from_slice(&s.delta[..cfg.latent_dim]);
        for (a, zv) in s.act.iter_mut().zip(dz1) {
            *a = zv.max(T::zero());
        }
        {
            let layer = &self.density[1];
            let (dw, db) = {
                let pair = &mut grads.blocks[3..5];
                let (a, b) = pair.split_at_mut(1);
                (&mut a[0], &mut b[0])
            };
            layer.backward(
                &s.act[..layer.in_dim],
                &s.dz2_grad,
                dw,
                db,
                &mut s.dx[..layer.in_dim],
            );
        }
        for k in 0..cfg.density_hidden {
            s.delta[k] = if dz1[k] > T::zero() {
                s.dx[k]
            } else {
                T::zero()
            };
        }
        {
            let layer = &self.density[0];
            let (dw, db) = {
                let pair = &mut grads.blocks[1..3];
                let (a, b) = pair.split_at_mut(1);
                (&mut a[0], &mut b[0])
            };
            layer.backward(
                feats,
                &s.delta[..cfg.density_hidden],
                dw,
                db,
                &mut s.dx[..layer.in_dim],
            );
        }
        self.grid
            .encode_backward(pos, &s.dx[..cfg.grid.feature_len()], &mut grads.blocks[0]);
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), BlobError> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            layer_dims: self.config.layer_dims(),
            activations: vec![
                "relu".into(),
                "exp_clamped".into(),
                "relu".into(),
                "logistic".into(),
            ],
        };
        let blocks = self.blocks();
        let data: Vec<Vec<f32>> = blocks
            .iter()
            .map(|b| b.iter().map(|v| v.as_f64() as f32).collect())
            .collect();
        let named: Vec<(String, &[f32])> = data
            .iter()
            .enumerate()
            .map(|(i, d)| (format!("block{i}"), d.as_slice()))
            .collect();
        let refs: Vec<(&str, &[f32])> = named.iter().map(|(n, d)| (n.as_str(), *d)).collect();
        write_blob_file(path, &header, &refs)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, BlobError> {
        let (header, blobs) = read_blob_file::<CheckpointHeader>(path)?;
        let rng = CounterRng::new(0);
        let mut params = FieldParams::<T>::init(header.config, &rng);
        {
            let mut blocks = params.blocks_mut();
            if blocks.len() != blobs.len() {
                return Err(BlobError::Format(format!(
                    "expected {} blocks, found {}",
                    blocks.len(),
                    blobs.len()
                )));
            }
            for (dst, (_, src)) in blocks.iter_mut().zip(&blobs) {
                if dst.len() != src.len() {
                    return Err(BlobError::Format("block length mismatch".into()));
                }
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = T::from_f64(s as f64);
                }
            }
        }
        Ok(params)
    }
}

/// Per-thread forward working memory.
struct Scratch<T> {
    feats: Vec<T>,
    dz1: Vec<T>,
    da1: Vec<T>,
    dz2: Vec<T>,
    dir_enc: Vec<T>,
    cx: Vec<T>,
    cz: Vec<Vec<T>>,
    c_out: Vec<T>,
}

impl<T: Real> Scratch<T> {
    fn new(cfg: &FieldConfig) -> Self {
        Scratch {
            feats: vec![T::zero(); cfg.grid.feature_len()],
            dz1: vec![T::zero(); cfg.density_hidden],
            da1: vec![T::zero(); cfg.density_hidden],
            dz2: vec![T::zero(); 1 + cfg.latent_dim],
            dir_enc: vec![T::zero(); cfg.dir_enc_dim()],
            cx: vec![T::zero(); cfg.color_input_dim()],
            cz: (0..cfg.color_hidden_layers)
                .map(|_| vec![T::zero(); cfg.color_hidden])
                .collect(),
            c_out: vec![T::zero(); 3],
        }
    }
}

struct BackwardScratch<T> {
    delta: Vec<T>,
    dx: Vec<T>,
    act: Vec<T>,
    cx: Vec<T>,
    dz2_grad: Vec<T>,
}

impl<T: Real> BackwardScratch<T> {
    fn new(cfg: &FieldConfig) -> Self {
        let max_dim = cfg
            .layer_dims()
            .iter()
            .flat_map(|&(i, o)| [i, o])
            .max()
            .unwrap_or(0)
            .max(cfg.grid.feature_len());
        BackwardScratch {
            delta: vec![T::zero(); max_dim],
            dx: vec![T::zero(); max_dim],
            act: vec![T::zero(); max_dim],
            cx: vec![T::zero(); cfg.color_input_dim()],
            dz2_grad: vec![T::zero(); 1 + cfg.latent_dim],
        }
    }
}
