//! Training orchestration: the hard-mined two-forward-one-backward schedule,
//! the one-pass baseline, and the adaptive-moment optimizer.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalbench::cost::{CostLedger, IterationCosts, Phase};
use crate::evalbench::{cap_psnr, psnr, skewness};
use crate::field::{FieldConfig, FieldError, FieldGrads, FieldParams, ParallelMode};
use crate::hardmine::{
    self, draw_hard_indices, draw_hard_indices_with_replacement, mining_step, reweight_factor,
};
use crate::image::Image;
use crate::math::{Real, Vec3};
use crate::renderer::{
    backward_to_preactivations, composite, composite_ray_terminated, composite_retained_floats,
    grad_cache_floats, pixel_loss, RendererError,
};
use crate::rng::{CounterRng, Domain};
use crate::sampler::{
    clip_to_bounds, sample_pixels, sample_points, OccupancyConfig, OccupancyGrid, SamplerError,
};
use crate::scene::Dataset;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("sampler: {0}")]
    Sampler(#[from] SamplerError),
    #[error("field: {0}")]
    Field(#[from] FieldError),
    #[error("renderer: {0}")]
    Renderer(#[from] RendererError),
    #[error("metrics csv: {0}")]
    Csv(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Baseline,
    Hardmine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub mode: TrainMode,
    pub n_rays: usize,
    pub iterations: usize,
    /// Stop once cumulative network MACs (forward + backward) exceed this.
    pub budget_macs: Option<u64>,
    pub lr_hash: f64,
    pub lr_mlp: f64,
    pub seed: u64,
    pub deterministic: bool,
    /// Occupancy grid refresh period K.
    pub occupancy_period: usize,
    /// Validation PSNR every this many iterations (0: only at the end).
    pub eval_period: usize,
    pub b_min: usize,
    pub with_replacement: bool,
    pub reweight: bool,
    /// Defaults to 1 / number of training images.
    pub alpha_tau: Option<f64>,
    /// Ray-march step count across the bounds diagonal.
    pub max_steps_per_ray: usize,
    pub occ_resolution: usize,
    /// Pins b to round(fraction * B); measurement/ablation use only.
    pub force_b_fraction: Option<f64>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            mode: TrainMode::Hardmine,
            n_rays: 1024,
            iterations: 3000,
            budget_macs: None,
            lr_hash: 1e-2,
            lr_mlp: 1e-3,
            seed: 0,
            deterministic: true,
            occupancy_period: 16,
            eval_period: 250,
            b_min: hardmine::DEFAULT_B_MIN,
            with_replacement: false,
            reweight: false,
            alpha_tau: None,
            max_steps_per_ray: 64,
            occ_resolution: 64,
            force_b_fraction: None,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.99;
pub const ADAM_EPS: f64 = 1e-15;

/// Per-block first/second moment estimates with bias correction.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &FieldParams<T>) -> Self {
        let shapes: Vec<usize> = params.blocks().iter().map(|b| b.len()).collect();
        AdamState {
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }
}

/// Bias-corrected adaptive-moment update of one parameter block in place.
/// With `skip_zero_grad` (the hash-table convention), entries whose gradient
/// is exactly zero are left untouched: their moments neither decay nor step,
/// so rarely-visited table entries are not churned by unrelated iterations.
pub fn adam_update<T: Real>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    skip_zero_grad: bool,
) {
    let b1 = T::from_f64(ADAM_BETA1);
    let b2 = T::from_f64(ADAM_BETA2);
    let eps = T::from_f64(ADAM_EPS);
    let corr1 = T::from_f64(1.0 - ADAM_BETA1.powi(step as i32));
    let corr2 = T::from_f64(1.0 - ADAM_BETA2.powi(step as i32));
    let lr = T::from_f64(lr);
    for i in 0..params.len() {
        if skip_zero_grad && grads[i] == T::zero() {
            continue;
        }
        m[i] = b1 * m[i] + (T::one() - b1) * grads[i];
        v[i] = b2 * v[i] + (T::one() - b2) * grads[i] * grads[i];
        let m_hat = m[i] / corr1;
        let v_hat = v[i] / corr2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One adaptive-moment update. The hash table gets `lr_hash` and the
/// skip-zero-grad rule, MLP blocks get `lr_mlp`. Non-finite gradients skip
/// the step entirely (returns false).
pub fn optimizer_step<T: Real>(
    params: &mut FieldParams<T>,
    grads: &FieldGrads<T>,
    state: &mut AdamState<T>,
    lr_hash: f64,
    lr_mlp: f64,
) -> bool {
    if !grads.is_finite() {
        return false;
    }
    state.step += 1;
    let mut blocks = params.blocks_mut();
    for (bi, block) in blocks.iter_mut().enumerate() {
        let hash = bi == crate::field::BLOCK_HASH_TABLE;
        let lr = if hash { lr_hash } else { lr_mlp };
        adam_update(
            block,
            &grads.blocks[bi],
            &mut state.m[bi],
            &mut state.v[bi],
            state.step,
            lr,
            hash,
        );
    }
    true
}

/// One row of the metrics log (one training iteration).
#[derive(Clone, Debug, PartialEq)]
pub struct IterationMetrics {
    pub iter: u64,
    pub wallclock_ms: f64,
    pub loss: f64,
    pub batch: usize,
    pub hard_batch: usize,
    pub r: f64,
    pub tau: f64,
    pub tau_ema: f64,
    pub skew_g: f64,
    pub macs_fwd: u64,
    pub macs_bwd: u64,
    pub graph_floats: u64,
    pub psnr_val: Option<f64>,
}

pub const METRICS_HEADER: &str =
    "iter,wallclock_ms,loss,B,b,R,tau,tau_ema,skew_g,macs_fwd,macs_bwd,graph_floats,psnr_val";

pub fn metrics_to_csv(rows: &[IterationMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in rows {
        let psnr = m
            .psnr_val
            .map(|p| format!("{}", cap_psnr(p)))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            m.iter,
            m.wallclock_ms,
            m.loss,
            m.batch,
            m.hard_batch,
            m.r,
            m.tau,
            m.tau_ema,
            m.skew_g,
            m.macs_fwd,
            m.macs_bwd,
            m.graph_floats,
            psnr
        ));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<IterationMetrics>, TrainError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| TrainError::Csv("empty file".into()))?;
    if header.trim() != METRICS_HEADER {
        return Err(TrainError::Csv(format!(
            "schema mismatch: expected columns '{METRICS_HEADER}', got '{header}'"
        )));
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 13 {
            return Err(TrainError::Csv(format!(
                "row {}: expected 13 fields, got {}",
                ln + 2,
                f.len()
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64, TrainError> {
            s.parse()
                .map_err(|_| TrainError::Csv(format!("row {}: bad {what}: '{s}'", ln + 2)))
        };
        rows.push(IterationMetrics {
            iter: parse(f[0], "iter")? as u64,
            wallclock_ms: parse(f[1], "wallclock_ms")?,
            loss: parse(f[2], "loss")?,
            batch: parse(f[3], "B")? as usize,
            hard_batch: parse(f[4], "b")? as usize,
            r: parse(f[5], "R")?,
            tau: parse(f[6], "tau")?,
            tau_ema: parse(f[7], "tau_ema")?,
            skew_g: parse(f[8], "skew_g")?,
            macs_fwd: parse(f[9], "macs_fwd")? as u64,
            macs_bwd: parse(f[10], "macs_bwd")? as u64,
            graph_floats: parse(f[11], "graph_floats")? as u64,
            psnr_val: if f[12].is_empty() {
                None
            } else {
                Some(parse(f[12], "psnr_val")?)
            },
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainerEvents {
    pub empty_batches: u64,
    pub skipped_steps: u64,
    pub padded_draws: u64,
}

pub struct Trainer<T: Real> {
    pub trainer_config: TrainerConfig,
    pub params: FieldParams<T>,
    pub adam: AdamState<T>,
    pub occgrid: OccupancyGrid,
    pub ledger: CostLedger,
    pub tau_ema: f64,
    pub alpha_tau: f64,
    pub dataset: Dataset,
    pub iter: u64,
    pub events: TrainerEvents,
    rng: CounterRng,
    step_size: T,
    background: [T; 3],
}

impl<T: Real> Trainer<T> {
    pub fn new(field_config: FieldConfig, trainer_config: TrainerConfig, dataset: Dataset) -> Self {
        let rng = CounterRng::new(trainer_config.seed);
        let params = FieldParams::init(field_config, &rng);
        let adam = AdamState::new(&params);
        let occgrid = OccupancyGrid::new(OccupancyConfig {
            resolution: trainer_config.occ_resolution,
            ..Default::default()
        });
        let diag = {
            let mut s = 0.0;
            for a in 0..3 {
                let e = dataset.bounds_max[a] - dataset.bounds_min[a];
                s += e * e;
            }
            s.sqrt()
        };
        let step_size = T::from_f64(diag / trainer_config.max_steps_per_ray as f64);
        let alpha_tau = trainer_config
            .alpha_tau
            .unwrap_or(1.0 / dataset.n_train_images() as f64);
        let background = [
            T::from_f64(dataset.background[0] as f64),
            T::from_f64(dataset.background[1] as f64),
            T::from_f64(dataset.background[2] as f64),
        ];
        Trainer {
            trainer_config,
            params,
            adam,
            occgrid,
            ledger: CostLedger::new(),
            tau_ema: 1.0,
            alpha_tau,
            dataset,
            iter: 0,
            events: TrainerEvents::default(),
            rng,
            step_size,
            background,
        }
    }

    fn parallel_mode(&self) -> ParallelMode {
        if self.trainer_config.deterministic {
            ParallelMode::Deterministic
        } else {
            ParallelMode::Fast
        }
    }

    fn bounds(&self) -> (Vec3<T>, Vec3<T>) {
        (
            self.dataset.bounds_min.map(T::from_f64),
            self.dataset.bounds_max.map(T::from_f64),
        )
    }

    fn maybe_update_occupancy(&mut self) {
        let k = self.trainer_config.occupancy_period;
        if k == 0 || self.iter % k as u64 != 0 {
            return;
        }
        let params = &self.params;
        let clamp = T::from_f64(params.config.sigma_clamp);
        self.occgrid.update(
            |p| {
                let pos = [T::from_f64(p[0]), T::from_f64(p[1]), T::from_f64(p[2])];
                params.sigma_at(pos, clamp).as_f64()
            },
            self.iter,
            &self.rng,
        );
        self.ledger.add_macs(
            Phase::Occupancy,
            self.occgrid.cell_count() as u64 * params.config.forward_macs_per_sample(),
        );
    }

    /// One training iteration in the configured mode.
    pub fn step(&mut self) -> Result<IterationMetrics, TrainError> {
        let start = Instant::now();
        self.maybe_update_occupancy();

        let cfg = &self.trainer_config;
        let (rays, gt) = sample_pixels::<T>(&self.dataset, cfg.n_rays, self.iter, &self.rng, false)?;
        let (lo, hi) = self.bounds();
        let batch = sample_points(
            &rays,
            &self.occgrid,
            self.step_size,
            lo,
            hi,
            self.iter,
            &self.rng,
            true,
        );
        let total = batch.len();

        if total == 0 {
            self.events.empty_batches += 1;
            let costs = self.ledger.end_iteration().clone();
            let metrics = self.finish_metrics(start, f64::NAN, 0, 0, 0.0, 1.0, f64::NAN, &costs);
            self.iter += 1;
            return Ok(metrics);
        }

        let metrics = match cfg.mode {
            TrainMode::Hardmine => self.step_hardmine(start, &batch, &gt)?,
            TrainMode::Baseline => self.step_baseline(start, &batch, &gt)?,
        };
        self.iter += 1;
        Ok(metrics)
    }

    /// Hard-mined iteration: inference pass over the full batch, gradient
    /// cache at the pre-activations, importance draw, then a graph-building
    /// pass and backward over the hard subset only.
    fn step_hardmine(
        &mut self,
        start: Instant,
        batch: &crate::sampler::SampleBatch<T>,
        gt: &[[T; 3]],
    ) -> Result<IterationMetrics, TrainError> {
        let cfg = self.trainer_config.clone();
        let total = batch.len();
        let outputs =
            self.params
                .forward_inference(&batch.positions, &batch.view_dirs, &mut self.ledger)?;

        let render = composite(batch, &outputs, self.background, &mut self.ledger)?;
        let retained = composite_retained_floats(total, batch.n_rays());
        self.ledger.retain_floats(retained);
        let (loss, _per_ray) = pixel_loss(&render.colors, gt);

        let clamp = T::from_f64(self.params.config.sigma_clamp);
        let cache =
            backward_to_preactivations(batch, &outputs, &render, gt, clamp, &mut self.ledger)?;
        self.ledger.retain_floats(grad_cache_floats(total));

        let mining = mining_step(&cache, self.tau_ema, self.alpha_tau, cfg.b_min);
        self.tau_ema = mining.tau_ema;
        let hard = match cfg.force_b_fraction {
            Some(f) => ((f * total as f64).round() as usize).clamp(1, total),
            None => mining.b,
        };
        let skew = skewness(&mining.g_hat).unwrap_or(f64::NAN);

        let mut stream = self.rng.stream(Domain::HardDraw, &[self.iter]);
        let draw = if cfg.with_replacement {
            draw_hard_indices_with_replacement(&mining.g, hard, &mut stream)
        } else {
            draw_hard_indices(&mining.g, hard, &mut stream)
        };
        self.events.padded_draws += draw.padded as u64;

        let hard_points: Vec<Vec3<T>> =
            draw.indices.iter().map(|&i| batch.positions[i]).collect();
        let hard_dirs: Vec<Vec3<T>> = draw.indices.iter().map(|&i| batch.view_dirs[i]).collect();
        let (_hard_out, tape) =
            self.params
                .forward_training(&hard_points, &hard_dirs, &mut self.ledger)?;

        // cached gradients restricted to the hard indices, backpropagated
        // unmodified (re-weighting is an off-by-default ablation)
        let mut d_sigma: Vec<T> = Vec::with_capacity(hard);
        let mut d_color: Vec<[T; 3]> = Vec::with_capacity(hard);
        for &i in &draw.indices {
            let scale = if cfg.reweight {
                T::from_f64(reweight_factor(mining.g_hat[i], total))
            } else {
                T::one()
            };
            d_sigma.push(cache.d_sigma_pre[i] * scale);
            d_color.push([
                cache.d_color_pre[i][0] * scale,
                cache.d_color_pre[i][1] * scale,
                cache.d_color_pre[i][2] * scale,
            ]);
        }

        let grads = self
            .params
            .backward(tape, &d_sigma, &d_color, self.parallel_mode(), &mut self.ledger)?;
        self.ledger.release_floats(retained + grad_cache_floats(total));

        if !optimizer_step(
            &mut self.params,
            &grads,
            &mut self.adam,
            cfg.lr_hash,
            cfg.lr_mlp,
        ) {
            self.events.skipped_steps += 1;
        }

        let costs = self.ledger.end_iteration().clone();
        Ok(self.finish_metrics(
            start,
            loss.as_f64(),
            total,
            hard,
            mining.r,
            mining.tau,
            skew,
            &costs,
        ))
    }

    /// Baseline iteration: one graph-building forward over the whole batch
    /// and a full backward. Mining statistics are still logged (they cost a
    /// norm per sample) so distribution analyses can run on baseline runs.
    fn step_baseline(
        &mut self,
        start: Instant,
        batch: &crate::sampler::SampleBatch<T>,
        gt: &[[T; 3]],
    ) -> Result<IterationMetrics, TrainError> {
        let cfg = self.trainer_config.clone();
        let total = batch.len();
        let (outputs, tape) =
            self.params
                .forward_training(&batch.positions, &batch.view_dirs, &mut self.ledger)?;

        let render = composite(batch, &outputs, self.background, &mut self.ledger)?;
        let retained = composite_retained_floats(total, batch.n_rays());
        self.ledger.retain_floats(retained);
        let (loss, _per_ray) = pixel_loss(&render.colors, gt);

        let clamp = T::from_f64(self.params.config.sigma_clamp);
        let cache =
            backward_to_preactivations(batch, &outputs, &render, gt, clamp, &mut self.ledger)?;
        self.ledger.retain_floats(grad_cache_floats(total));

        // telemetry only; does not influence the update
        let mining = mining_step(&cache, self.tau_ema, self.alpha_tau, cfg.b_min);
        self.tau_ema = mining.tau_ema;
        let skew = skewness(&mining.g_hat).unwrap_or(f64::NAN);

        let grads = self.params.backward(
            tape,
            &cache.d_sigma_pre,
            &cache.d_color_pre,
            self.parallel_mode(),
            &mut self.ledger,
        )?;
        self.ledger.release_floats(retained + grad_cache_floats(total));

        if !optimizer_step(
            &mut self.params,
            &grads,
            &mut self.adam,
            cfg.lr_hash,
            cfg.lr_mlp,
        ) {
            self.events.skipped_steps += 1;
        }

        let costs = self.ledger.end_iteration().clone();
        Ok(self.finish_metrics(
            start,
            loss.as_f64(),
            total,
            total,
            mining.r,
            mining.tau,
            skew,
            &costs,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_metrics(
        &self,
        start: Instant,
        loss: f64,
        batch: usize,
        hard_batch: usize,
        r: f64,
        tau: f64,
        skew_g: f64,
        costs: &IterationCosts,
    ) -> IterationMetrics {
        // wallclock is zeroed in deterministic mode so reruns reproduce the
        // metrics file bit for bit
        let wallclock_ms = if self.trainer_config.deterministic {
            0.0
        } else {
            start.elapsed().as_secs_f64() * 1e3
        };
        IterationMetrics {
            iter: self.iter,
            wallclock_ms,
            loss,
            batch,
            hard_batch,
            r,
            tau,
            tau_ema: self.tau_ema,
            skew_g,
            macs_fwd: costs.phase(Phase::ForwardInference) + costs.phase(Phase::ForwardTraining),
            macs_bwd: costs.phase(Phase::Backward),
            graph_floats: costs.peak_graph_floats,
            psnr_val: None,
        }
    }

    /// Renders one dataset view with the current parameters (inference
    /// only; unjittered sampling so renders are reproducible).
    pub fn render_view(&self, view_index: usize, early_termination: bool) -> Result<Image, TrainError> {
        render_view(
            &self.params,
            &self.occgrid,
            &self.dataset,
            view_index,
            self.step_size,
            early_termination,
        )
    }

    /// Mean capped PSNR over the validation views.
    pub fn validation_psnr(&self) -> Result<f64, TrainError> {
        let val = self.dataset.val_view_indices();
        let mut sum = 0.0;
        for &vi in &val {
            let img = self.render_view(vi, false)?;
            let db = psnr(&img, &self.dataset.views[vi].image).expect("same resolution");
            sum += cap_psnr(db);
        }
        Ok(sum / val.len().max(1) as f64)
    }
}

/// Inference render of a dataset view; shared by the trainer's periodic
/// evaluation and the CLI render command. Costs go to a throwaway ledger so
/// evaluation never pollutes training budgets.
pub fn render_view<T: Real>(
    params: &FieldParams<T>,
    occgrid: &OccupancyGrid,
    dataset: &Dataset,
    view_index: usize,
    step_size: T,
    early_termination: bool,
) -> Result<Image, TrainError> {
    let camera = &dataset.views[view_index].camera;
    let (w, h) = (camera.width, camera.height);
    let lo = dataset.bounds_min.map(T::from_f64);
    let hi = dataset.bounds_max.map(T::from_f64);
    let background = [
        T::from_f64(dataset.background[0] as f64),
        T::from_f64(dataset.background[1] as f64),
        T::from_f64(dataset.background[2] as f64),
    ];
    let mut rays = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (o, d) = camera.ray_for_pixel(x, y);
            rays.push(clip_to_bounds(
                [T::from_f64(o[0]), T::from_f64(o[1]), T::from_f64(o[2])],
                [T::from_f64(d[0]), T::from_f64(d[1]), T::from_f64(d[2])],
                lo,
                hi,
            ));
        }
    }
    let rng = CounterRng::new(0);
    let batch = sample_points(&rays, occgrid, step_size, lo, hi, 0, &rng, false);
    let mut eval_ledger = CostLedger::new();
    let outputs = params.forward_inference(&batch.positions, &batch.view_dirs, &mut eval_ledger)?;
    let mut img = Image::new(w, h);
    if early_termination {
        for ray in 0..batch.n_rays() {
            let r = batch.ray_range(ray);
            let px = composite_ray_terminated(
                &outputs.sigma[r.clone()],
                &outputs.color[r.clone()],
                &batch.deltas[r],
                background,
                T::from_f64(1e-4),
            );
            img.pixels[ray] = [
                px[0].as_f64() as f32,
                px[1].as_f64() as f32,
                px[2].as_f64() as f32,
            ];
        }
    } else {
        let render = composite(&batch, &outputs, background, &mut eval_ledger)?;
        for (ray, px) in render.colors.iter().enumerate() {
            img.pixels[ray] = [
                px[0].as_f64() as f32,
                px[1].as_f64() as f32,
                px[2].as_f64() as f32,
            ];
        }
    }
    Ok(img)
}

/// Outcome of a full training run.
pub struct TrainOutputs<T: Real> {
    pub params: FieldParams<T>,
    pub occgrid: OccupancyGrid,
    pub metrics: Vec<IterationMetrics>,
    pub costs: Vec<IterationCosts>,
    pub events: TrainerEvents,
    pub final_psnr: Option<f64>,
}

/// Runs to the iteration or MAC budget, evaluating validation PSNR on the
/// configured period and once at the end.
pub fn train<T: Real>(
    field_config: FieldConfig,
    trainer_config: TrainerConfig,
    dataset: Dataset,
) -> Result<TrainOutputs<T>, TrainError> {
    let mut trainer = Trainer::<T>::new(field_config, trainer_config.clone(), dataset);
    let mut metrics = Vec::with_capacity(trainer_config.iterations);
    let mut spent_macs = 0u64;
    for i in 0..trainer_config.iterations {
        let mut row = trainer.step()?;
        spent_macs += row.macs_fwd + row.macs_bwd;
        let do_eval = trainer_config.eval_period > 0
            && (i + 1) % trainer_config.eval_period == 0;
        if do_eval {
            row.psnr_val = Some(trainer.validation_psnr()?);
        }
        let over_budget = trainer_config
            .budget_macs
            .map(|b| spent_macs >= b)
            .unwrap_or(false);
        if over_budget && row.psnr_val.is_none() {
            row.psnr_val = Some(trainer.validation_psnr()?);
        }
        metrics.push(row);
        if over_budget {
            break;
        }
    }
    let final_psnr = if trainer.dataset.val_view_indices().is_empty() {
        None
    } else {
        match metrics.last().and_then(|m| m.psnr_val) {
            Some(p) => Some(p),
            None => {
                let p = trainer.validation_psnr()?;
                if let Some(last) = metrics.last_mut() {
                    last.psnr_val = Some(p);
                }
                Some(p)
            }
        }
    };
    Ok(TrainOutputs {
        params: trainer.params,
        occgrid: trainer.occgrid,
        metrics,
        costs: trainer.ledger.snapshots().to_vec(),
        events: trainer.events,
        final_psnr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::HashGridConfig;
    use crate::scene::{generate_scene, make_dataset};

    fn tiny_field() -> FieldConfig {
        FieldConfig {
            grid: HashGridConfig {
                levels: 2,
                base_resolution: 8,
                growth: 2.0,
                table_size: 1 << 8,
                feature_dim: 2,
            },
            density_hidden: 8,
            latent_dim: 4,
            color_hidden: 8,
            color_hidden_layers: 2,
            dir_bands: 2,
            sigma_clamp: 10.0,
        }
    }

    fn tiny_dataset(seed: u64) -> Dataset {
        let scene = generate_scene("spheres", seed).unwrap();
        make_dataset(&scene, 8, (12, 12), seed).unwrap()
    }

    fn tiny_trainer_config(mode: TrainMode) -> TrainerConfig {
        TrainerConfig {
            mode,
            n_rays: 24,
            iterations: 4,
            seed: 7,
            deterministic: true,
            occupancy_period: 0,
            eval_period: 0,
            b_min: 4,
            max_steps_per_ray: 12,
            occ_resolution: 8,
            ..Default::default()
        }
    }

    #[test]
    fn adam_scalar_probe() {
        // f(x) = x^2 from x = 1 at lr 0.1: momentum overshoots the zero
        // crossing around step 11, so |x| shrinks monotonically up to there
        // and the trajectory settles near zero by step 50
        let mut x = vec![1.0f64];
        let mut m = vec![0.0f64];
        let mut v = vec![0.0f64];
        let mut prev = 1.0f64;
        for t in 1..=50u64 {
            let g = vec![2.0 * x[0]];
            adam_update(&mut x, &g, &mut m, &mut v, t, 0.1, false);
            if t <= 10 {
                assert!(x[0].abs() < prev, "step {t}: |x| did not shrink");
            }
            assert!(x[0].abs() <= 1.0, "step {t}: overshot the start");
            prev = x[0].abs();
        }
        assert!(x[0].abs() < 0.05, "final |x| = {}", x[0].abs());
    }

    #[test]
    fn adam_identical_inputs_identical_updates() {
        let mut p = vec![0.4f64, 0.4];
        let g = vec![0.3f64, 0.3];
        let mut m = vec![0.0f64; 2];
        let mut v = vec![0.0f64; 2];
        adam_update(&mut p, &g, &mut m, &mut v, 1, 0.01, false);
        assert_eq!(p[0], p[1]);
        assert_eq!(m[0], m[1]);
    }

    #[test]
    fn optimizer_zero_grads_leave_params() {
        let rng = CounterRng::new(3);
        let mut params = FieldParams::<f64>::init(tiny_field(), &rng);
        let before: Vec<Vec<f64>> = params.blocks().iter().map(|b| b.to_vec()).collect();
        let grads = FieldGrads::zeros_like(&params);
        let mut adam = AdamState::new(&params);
        assert!(optimizer_step(&mut params, &grads, &mut adam, 1e-2, 1e-3));
        for (a, b) in params.blocks().iter().zip(&before) {
            assert_eq!(*a, b.as_slice());
        }
    }

    #[test]
    fn optimizer_skips_non_finite_grads() {
        let rng = CounterRng::new(4);
        let mut params = FieldParams::<f64>::init(tiny_field(), &rng);
        let before: Vec<Vec<f64>> = params.blocks().iter().map(|b| b.to_vec()).collect();
        let mut grads = FieldGrads::zeros_like(&params);
        grads.blocks[1][0] = f64::NAN;
        let mut adam = AdamState::new(&params);
        assert!(!optimizer_step(&mut params, &grads, &mut adam, 1e-2, 1e-3));
        assert_eq!(adam.step, 0);
        for (a, b) in params.blocks().iter().zip(&before) {
            assert_eq!(*a, b.as_slice());
        }
    }

    #[test]
    fn zero_budget_returns_initialization() {
        let mut cfg = tiny_trainer_config(TrainMode::Hardmine);
        cfg.iterations = 0;
        let dataset = tiny_dataset(1);
        let out = train::<f64>(tiny_field(), cfg.clone(), dataset).unwrap();
        let rng = CounterRng::new(cfg.seed);
        let fresh = FieldParams::<f64>::init(tiny_field(), &rng);
        for (a, b) in out.params.blocks().iter().zip(fresh.blocks().iter()) {
            assert_eq!(a, b);
        }
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn fixed_seed_reproduces_run_bit_for_bit() {
        let cfg = tiny_trainer_config(TrainMode::Hardmine);
        let out1 = train::<f32>(tiny_field(), cfg.clone(), tiny_dataset(1)).unwrap();
        let out2 = train::<f32>(tiny_field(), cfg, tiny_dataset(1)).unwrap();
        assert_eq!(metrics_to_csv(&out1.metrics), metrics_to_csv(&out2.metrics));
        for (a, b) in out1.params.blocks().iter().zip(out2.params.blocks().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn baseline_loss_trajectory_is_deterministic() {
        let cfg = tiny_trainer_config(TrainMode::Baseline);
        let out1 = train::<f32>(tiny_field(), cfg.clone(), tiny_dataset(2)).unwrap();
        let out2 = train::<f32>(tiny_field(), cfg, tiny_dataset(2)).unwrap();
        let l1: Vec<f64> = out1.metrics.iter().map(|m| m.loss).collect();
        let l2: Vec<f64> = out2.metrics.iter().map(|m| m.loss).collect();
        assert_eq!(l1, l2);
    }

    #[test]
    fn empty_batch_skips_update() {
        let cfg = tiny_trainer_config(TrainMode::Hardmine);
        let mut trainer = Trainer::<f64>::new(tiny_field(), cfg, tiny_dataset(1));
        for c in 0..trainer.occgrid.cell_count() {
            trainer.occgrid.set_cell(c, false);
        }
        let before: Vec<Vec<f64>> = trainer.params.blocks().iter().map(|b| b.to_vec()).collect();
        let row = trainer.step().unwrap();
        assert_eq!(row.batch, 0);
        assert_eq!(trainer.events.empty_batches, 1);
        assert!(row.loss.is_nan());
        for (a, b) in trainer.params.blocks().iter().zip(&before) {
            assert_eq!(*a, b.as_slice());
        }
    }

    #[test]
    fn first_iteration_matches_baseline_when_tau_pinned() {
        // alpha_tau = 0 keeps tau_ema at its 1.0 initialization, so the
        // mined batch is the full batch and the update must coincide
        let mut hm_cfg = tiny_trainer_config(TrainMode::Hardmine);
        hm_cfg.alpha_tau = Some(0.0);
        hm_cfg.b_min = 1;
        let mut base_cfg = hm_cfg.clone();
        base_cfg.mode = TrainMode::Baseline;

        let mut hm = Trainer::<f64>::new(tiny_field(), hm_cfg, tiny_dataset(3));
        let mut base = Trainer::<f64>::new(tiny_field(), base_cfg, tiny_dataset(3));
        let row_hm = hm.step().unwrap();
        let row_base = base.step().unwrap();
        assert!(row_hm.batch > 0);
        assert_eq!(row_hm.hard_batch, row_hm.batch);
        assert_eq!(row_hm.loss, row_base.loss);
        let mut max_diff = 0.0f64;
        for (a, b) in hm.params.blocks().iter().zip(base.params.blocks().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                max_diff = max_diff.max((x - y).abs());
            }
        }
        assert!(max_diff < 1e-9, "max param diff {max_diff}");
    }

    #[test]
    fn hardmine_network_macs_below_baseline_when_b_small() {
        let mut hm_cfg = tiny_trainer_config(TrainMode::Hardmine);
        hm_cfg.force_b_fraction = Some(0.25);
        hm_cfg.iterations = 3;
        let mut base_cfg = tiny_trainer_config(TrainMode::Baseline);
        base_cfg.iterations = 3;
        let hm = train::<f32>(tiny_field(), hm_cfg, tiny_dataset(1)).unwrap();
        let base = train::<f32>(tiny_field(), base_cfg, tiny_dataset(1)).unwrap();
        for (a, b) in hm.costs.iter().zip(&base.costs) {
            assert!(a.network_macs() <= b.network_macs());
        }
    }

    #[test]
    fn graph_float_peaks_follow_the_two_pass_contract() {
        let field = tiny_field();
        let fps = field.tape_floats_per_sample() as u64;
        let mut hm_cfg = tiny_trainer_config(TrainMode::Hardmine);
        hm_cfg.force_b_fraction = Some(0.5);
        hm_cfg.iterations = 2;
        let hm = train::<f32>(field.clone(), hm_cfg.clone(), tiny_dataset(1)).unwrap();
        for m in &hm.metrics {
            let overhead = 7 * m.batch as u64 + 4 * hm_cfg.n_rays as u64;
            assert_eq!(m.graph_floats, m.hard_batch as u64 * fps + overhead);
        }
        let mut base_cfg = tiny_trainer_config(TrainMode::Baseline);
        base_cfg.iterations = 2;
        let base = train::<f32>(field, base_cfg.clone(), tiny_dataset(1)).unwrap();
        for m in &base.metrics {
            let overhead = 7 * m.batch as u64 + 4 * base_cfg.n_rays as u64;
            assert_eq!(m.graph_floats, m.batch as u64 * fps + overhead);
        }
    }

    #[test]
    fn loss_improves_on_tiny_scene() {
        let mut cfg = tiny_trainer_config(TrainMode::Hardmine);
        cfg.iterations = 150;
        cfg.occupancy_period = 16;
        let out = train::<f32>(tiny_field(), cfg, tiny_dataset(1)).unwrap();
        let first = out.metrics[0].loss;
        let tail: f64 = out.metrics[out.metrics.len() - 20..]
            .iter()
            .map(|m| m.loss)
            .sum::<f64>()
            / 20.0;
        assert!(
            tail < first,
            "loss did not improve: first {first}, tail mean {tail}"
        );
    }

    #[test]
    fn metrics_csv_roundtrip_and_schema_check() {
        let cfg = tiny_trainer_config(TrainMode::Hardmine);
        let out = train::<f32>(tiny_field(), cfg, tiny_dataset(1)).unwrap();
        let csv = metrics_to_csv(&out.metrics);
        let parsed = parse_metrics_csv(&csv).unwrap();
        assert_eq!(parsed.len(), out.metrics.len());
        for (a, b) in parsed.iter().zip(&out.metrics) {
            assert_eq!(a.iter, b.iter);
            assert_eq!(a.batch, b.batch);
            assert_eq!(a.macs_fwd, b.macs_fwd);
            if !b.loss.is_nan() {
                assert_eq!(a.loss, b.loss);
            }
        }
        // a file missing a column is rejected with a schema error
        let broken = csv.replace(",graph_floats", "");
        let err = parse_metrics_csv(&broken).unwrap_err();
        assert!(matches!(err, TrainError::Csv(msg) if msg.contains("schema mismatch")));
    }

    #[test]
    fn budget_stops_within_one_iteration() {
        let mut cfg = tiny_trainer_config(TrainMode::Baseline);
        cfg.iterations = 100;
        let probe = train::<f32>(tiny_field(), cfg.clone(), tiny_dataset(1)).unwrap();
        let per_iter = probe.metrics[0].macs_fwd + probe.metrics[0].macs_bwd;
        let budget = 3 * per_iter + per_iter / 2;
        cfg.budget_macs = Some(budget);
        let out = train::<f32>(tiny_field(), cfg, tiny_dataset(1)).unwrap();
        let spent: u64 = out.metrics.iter().map(|m| m.macs_fwd + m.macs_bwd).sum();
        assert!(out.metrics.len() < 100);
        assert!(spent >= budget, "stopped before the budget was exhausted");
        // everything before the final iteration was still under budget
        let before_last: u64 = out.metrics[..out.metrics.len() - 1]
            .iter()
            .map(|m| m.macs_fwd + m.macs_bwd)
            .sum();
        assert!(before_last < budget, "stopped late");
    }

    #[test]
    fn render_views_are_reproducible_and_termination_is_benign() {
        let mut cfg = tiny_trainer_config(TrainMode::Hardmine);
        cfg.iterations = 30;
        cfg.occupancy_period = 8;
        let dataset = tiny_dataset(1);
        let mut trainer = Trainer::<f32>::new(tiny_field(), cfg, dataset);
        for _ in 0..30 {
            trainer.step().unwrap();
        }
        let v = trainer.dataset.val_view_indices()[0];
        let a = trainer.render_view(v, false).unwrap();
        let b = trainer.render_view(v, false).unwrap();
        assert_eq!(a, b);
        let t = trainer.render_view(v, true).unwrap();
        assert!(a.max_abs_diff(&t) < 1e-3);
    }
}
