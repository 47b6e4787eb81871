//! Differentiable volume rendering: front-to-back alpha compositing, the
//! pixel loss, and the analytic backward pass from pixel loss down to the
//! field's pre-activation outputs.

use rayon::prelude::*;
use thiserror::Error;

use crate::evalbench::cost::{CostLedger, Phase};
use crate::field::{activate_sigma_grad, FieldOutput};
use crate::math::Real;
use crate::sampler::SampleBatch;

#[derive(Debug, Error)]
pub enum RendererError {
    #[error("misaligned lengths: batch {0}, outputs {1}")]
    Misaligned(usize, usize),
    #[error("non-finite intermediate in ray {0}")]
    NonFinite(usize),
}

/// Nominal compositing MACs per sample / per ray, for the cost ledger.
pub const COMPOSITE_MACS_PER_SAMPLE: u64 = 7;
pub const COMPOSITE_MACS_PER_RAY: u64 = 3;
pub const BACKWARD_MACS_PER_SAMPLE: u64 = 18;

/// Floats the compositing stage keeps alive for the backward chain:
/// weights, transmittance and alpha per sample, color and final
/// transmittance per ray.
pub fn composite_retained_floats(n_samples: usize, n_rays: usize) -> u64 {
    (3 * n_samples + 4 * n_rays) as u64
}

/// The gradient cache holds d(sigma') + 3 x d(color') per sample.
pub fn grad_cache_floats(n_samples: usize) -> u64 {
    4 * n_samples as u64
}

#[derive(Clone, Debug)]
pub struct RenderResult<T> {
    /// Composited pixel color per ray (background applied).
    pub colors: Vec<[T; 3]>,
    /// w_i = T_i * alpha_i per sample.
    pub weights: Vec<T>,
    /// Transmittance T_i before each sample.
    pub trans: Vec<T>,
    /// alpha_i = 1 - exp(-sigma_i * delta_i) per sample.
    pub alpha: Vec<T>,
    /// Transmittance remaining after the last sample, per ray.
    pub final_trans: Vec<T>,
}

/// Per-sample pixel-loss gradients at the pre-activation outputs.
#[derive(Clone, Debug)]
pub struct GradCache<T> {
    pub d_sigma_pre: Vec<T>,
    pub d_color_pre: Vec<[T; 3]>,
}

impl<T: Real> GradCache<T> {
    pub fn len(&self) -> usize {
        self.d_sigma_pre.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_sigma_pre.is_empty()
    }
}

/// Front-to-back compositing of one ray. This single kernel is shared by the
/// training renderer and the ground-truth oracle, so identical per-step
/// (sigma, color, delta) inputs produce bit-identical pixels.
///
/// Writes per-sample weight/transmittance/alpha into the provided slices and
/// returns (pixel color, final transmittance).
pub fn composite_ray<T: Real>(
    sigma: &[T],
    color: &[[T; 3]],
    delta: &[T],
    background: [T; 3],
    weights: &mut [T],
    trans: &mut [T],
    alpha: &mut [T],
) -> ([T; 3], T) {
    let mut t_cur = T::one();
    let mut pixel = [T::zero(); 3];
    for i in 0..sigma.len() {
        let a = T::one() - (-sigma[i] * delta[i]).exp();
        let w = t_cur * a;
        alpha[i] = a;
        trans[i] = t_cur;
        weights[i] = w;
        for k in 0..3 {
            pixel[k] = pixel[k] + w * color[i][k];
        }
        t_cur = t_cur * (T::one() - a);
    }
    for k in 0..3 {
        pixel[k] = pixel[k] + t_cur * background[k];
    }
    (pixel, t_cur)
}

/// Compositing variant with early ray termination once transmittance falls
/// below `epsilon`; inference-only (remaining samples get zero weight).
pub fn composite_ray_terminated<T: Real>(
    sigma: &[T],
    color: &[[T; 3]],
    delta: &[T],
    background: [T; 3],
    epsilon: T,
) -> [T; 3] {
    let mut t_cur = T::one();
    let mut pixel = [T::zero(); 3];
    for i in 0..sigma.len() {
        if t_cur < epsilon {
            break;
        }
        let a = T::one() - (-sigma[i] * delta[i]).exp();
        let w = t_cur * a;
        for k in 0..3 {
            pixel[k] = pixel[k] + w * color[i][k];
        }
        t_cur = t_cur * (T::one() - a);
    }
    for k in 0..3 {
        pixel[k] = pixel[k] + t_cur * background[k];
    }
    pixel
}

/// Composites every ray of a batch.
pub fn composite<T: Real>(
    batch: &SampleBatch<T>,
    outputs: &FieldOutput<T>,
    background: [T; 3],
    ledger: &mut CostLedger,
) -> Result<RenderResult<T>, RendererError> {
    if batch.len() != outputs.len() {
        return Err(RendererError::Misaligned(batch.len(), outputs.len()));
    }
    let n = batch.len();
    let n_rays = batch.n_rays();
    ledger.add_macs(
        Phase::Compositing,
        n as u64 * COMPOSITE_MACS_PER_SAMPLE + n_rays as u64 * COMPOSITE_MACS_PER_RAY,
    );
    let mut result = RenderResult {
        colors: vec![[T::zero(); 3]; n_rays],
        weights: vec![T::zero(); n],
        trans: vec![T::zero(); n],
        alpha: vec![T::zero(); n],
        final_trans: vec![T::zero(); n_rays],
    };

    // disjoint per-ray regions; compositing order within a ray is sequential
    let offsets = &batch.ray_offsets;
    let mut w_rest = result.weights.as_mut_slice();
    let mut t_rest = result.trans.as_mut_slice();
    let mut a_rest = result.alpha.as_mut_slice();
    let mut jobs = Vec::with_capacity(n_rays);
    for ray in 0..n_rays {
        let len = offsets[ray + 1] - offsets[ray];
        let (w, wr) = w_rest.split_at_mut(len);
        let (t, tr) = t_rest.split_at_mut(len);
        let (a, ar) = a_rest.split_at_mut(len);
        w_rest = wr;
        t_rest = tr;
        a_rest = ar;
        jobs.push((ray, w, t, a));
    }
    let colors_and_finals: Vec<([T; 3], T)> = jobs
        .into_par_iter()
        .map(|(ray, w, t, a)| {
            let r = offsets[ray]..offsets[ray + 1];
            composite_ray(
                &outputs.sigma[r.clone()],
                &outputs.color[r.clone()],
                &batch.deltas[r],
                background,
                w,
                t,
                a,
            )
        })
        .collect();
    for (ray, (c, ft)) in colors_and_finals.into_iter().enumerate() {
        result.colors[ray] = c;
        result.final_trans[ray] = ft;
    }
    Ok(result)
}

/// Mean over rays of the squared error summed over RGB; per-ray values are
/// exposed for the loss-PDF analysis.
pub fn pixel_loss<T: Real>(pred: &[[T; 3]], gt: &[[T; 3]]) -> (T, Vec<T>) {
    assert_eq!(pred.len(), gt.len());
    let per_ray: Vec<T> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let mut s = T::zero();
            for k in 0..3 {
                let d = p[k] - g[k];
                s = s + d * d;
            }
            s
        })
        .collect();
    let n = T::from_usize(per_ray.len().max(1));
    let total: T = per_ray.iter().copied().sum();
    (total / n, per_ray)
}

/// Exact analytic chain from the pixel loss through compositing and the
/// activations to (sigma', c'). The transmittance coupling (each sample's
/// density shades every later sample on its ray) is handled with an O(n)
/// suffix sum per ray.
pub fn backward_to_preactivations<T: Real>(
    batch: &SampleBatch<T>,
    outputs: &FieldOutput<T>,
    render: &RenderResult<T>,
    gt: &[[T; 3]],
    sigma_clamp: T,
    ledger: &mut CostLedger,
) -> Result<GradCache<T>, RendererError> {
    let n = batch.len();
    if outputs.len() != n || render.weights.len() != n {
        return Err(RendererError::Misaligned(n, outputs.len()));
    }
    let n_rays = batch.n_rays();
    assert_eq!(gt.len(), n_rays);
    ledger.add_macs(Phase::Compositing, n as u64 * BACKWARD_MACS_PER_SAMPLE);

    let mut cache = GradCache {
        d_sigma_pre: vec![T::zero(); n],
        d_color_pre: vec![[T::zero(); 3]; n],
    };
    let inv_n_rays = T::one() / T::from_usize(n_rays.max(1));
    let two = T::from_f64(2.0);

    let offsets = &batch.ray_offsets;
    let mut ds_rest = cache.d_sigma_pre.as_mut_slice();
    let mut dc_rest = cache.d_color_pre.as_mut_slice();
    let mut jobs = Vec::with_capacity(n_rays);
    for ray in 0..n_rays {
        let len = offsets[ray + 1] - offsets[ray];
        let (ds, dsr) = ds_rest.split_at_mut(len);
        let (dc, dcr) = dc_rest.split_at_mut(len);
        ds_rest = dsr;
        dc_rest = dcr;
        jobs.push((ray, ds, dc));
    }

    let bad_ray = jobs
        .into_par_iter()
        .map(|(ray, ds, dc)| {
            let range = offsets[ray]..offsets[ray + 1];
            let pixel = render.colors[ray];
            // dL/dC for this ray
            let g = [
                two * (pixel[0] - gt[ray][0]) * inv_n_rays,
                two * (pixel[1] - gt[ray][1]) * inv_n_rays,
                two * (pixel[2] - gt[ray][2]) * inv_n_rays,
            ];
            // suffix = sum_{j>i} w_j c_j + T_final * background_term; the
            // background term is exactly pixel - sum_j w_j c_j, so seed the
            // suffix with it instead of recomputing the background product
            let mut suffix = [T::zero(); 3];
            {
                let mut acc = [T::zero(); 3];
                for i in range.clone() {
                    for k in 0..3 {
                        acc[k] = acc[k] + render.weights[i] * outputs.color[i][k];
                    }
                }
                for k in 0..3 {
                    suffix[k] = pixel[k] - acc[k];
                }
            }
            for (local, i) in range.clone().enumerate().rev() {
                let w = render.weights[i];
                let c = outputs.color[i];
                // color branch: dL/dc_i = w_i * g
                let d_c = [w * g[0], w * g[1], w * g[2]];
                // density branch: dL/dsigma_i = delta_i * (T_{i+1} (g.c_i) - g.S_i)
                let t_next = render.trans[i] * (T::one() - render.alpha[i]);
                let g_dot_c = g[0] * c[0] + g[1] * c[1] + g[2] * c[2];
                let g_dot_s = g[0] * suffix[0] + g[1] * suffix[1] + g[2] * suffix[2];
                let d_sigma = batch.deltas[i] * (t_next * g_dot_c - g_dot_s);
                // chain through the activations to the pre-activations
                let d_act = activate_sigma_grad(outputs.sigma_pre[i], outputs.sigma[i], sigma_clamp);
                ds[local] = d_sigma * d_act;
                for k in 0..3 {
                    dc[local][k] = d_c[k] * c[k] * (T::one() - c[k]);
                }
                if !ds[local].is_finite() {
                    return Some(ray);
                }
                for k in 0..3 {
                    suffix[k] = suffix[k] + w * c[k];
                }
            }
            None
        })
        .find_any(|r| r.is_some())
        .flatten();
    if let Some(ray) = bad_ray {
        return Err(RendererError::NonFinite(ray));
    }
    Ok(cache)
}
