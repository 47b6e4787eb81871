//! Cross-module checks: the full gradient chain against finite differences,
//! masked-backward equivalence through the renderer's gradient cache, and
//! sampler/occupancy behavior against the analytic scene oracle.

use hardnerf::encoding::HashGridConfig;
use hardnerf::evalbench::cost::CostLedger;
use hardnerf::field::{FieldConfig, FieldParams, ParallelMode};
use hardnerf::math::Vec3;
use hardnerf::renderer::{backward_to_preactivations, composite, pixel_loss};
use hardnerf::rng::{CounterRng, Domain};
use hardnerf::sampler::{sample_pixels, sample_points, OccupancyConfig, OccupancyGrid};
use hardnerf::scene::{generate_scene, make_dataset};

fn tiny_field() -> FieldConfig {
    FieldConfig {
        grid: HashGridConfig {
            levels: 2,
            base_resolution: 6,
            growth: 2.0,
            table_size: 1 << 7,
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

/// A hand-built 2-ray batch with a few samples per ray.
fn tiny_batch(samples_per_ray: &[usize], seed: u64) -> hardnerf::sampler::SampleBatch<f64> {
    let rng = CounterRng::new(seed);
    let mut s = rng.stream(Domain::Misc, &[0]);
    let mut batch = hardnerf::sampler::SampleBatch::<f64>::default();
    batch.ray_offsets.push(0);
    for (j, &n) in samples_per_ray.iter().enumerate() {
        let dir = hardnerf::math::normalize([
            s.uniform(-1.0, 1.0),
            s.uniform(-1.0, 1.0),
            s.uniform(-1.0, 1.0),
        ]);
        let mut t = 0.1;
        for _ in 0..n {
            let step = s.uniform(0.05, 0.2);
            batch.positions.push([s.next_f64(), s.next_f64(), s.next_f64()]);
            batch.view_dirs.push(dir);
            batch.ts.push(t);
            batch.deltas.push(step);
            batch.ray_ids.push(j as u32);
            t += step;
        }
        batch.ray_offsets.push(batch.positions.len());
    }
    batch
}

fn full_loss(
    params: &FieldParams<f64>,
    batch: &hardnerf::sampler::SampleBatch<f64>,
    gt: &[[f64; 3]],
    bg: [f64; 3],
) -> f64 {
    let mut ledger = CostLedger::new();
    let out = params
        .forward_inference(&batch.positions, &batch.view_dirs, &mut ledger)
        .unwrap();
    let render = composite(batch, &out, bg, &mut ledger).unwrap();
    pixel_loss(&render.colors, gt).0
}

/// End-to-end analytic gradients (pixel loss -> compositing -> activations
/// -> MLPs -> hash encode) against central finite differences over every
/// parameter, on a 2-ray 5-sample instance.
#[test]
fn full_chain_gradients_match_finite_differences() {
    let mut params = FieldParams::<f64>::init(tiny_field(), &CounterRng::new(11));
    // lift hash entries out of the tiny init range so gradients are well
    // above the finite-difference noise floor
    for v in params.grid.tables.iter_mut() {
        *v *= 3000.0;
    }
    let batch = tiny_batch(&[5, 5], 12);
    let gt = vec![[0.9, 0.2, 0.4], [0.1, 0.7, 0.6]];
    let bg = [0.5; 3];

    let mut ledger = CostLedger::new();
    let (out, tape) = params
        .forward_training(&batch.positions, &batch.view_dirs, &mut ledger)
        .unwrap();
    let render = composite(&batch, &out, bg, &mut ledger).unwrap();
    let cache = backward_to_preactivations(&batch, &out, &render, &gt, 10.0, &mut ledger).unwrap();
    let grads = params
        .backward(
            tape,
            &cache.d_sigma_pre,
            &cache.d_color_pre,
            ParallelMode::Deterministic,
            &mut ledger,
        )
        .unwrap();

    let h = 1e-5;
    let mut checked = 0;
    for bi in 0..grads.blocks.len() {
        for i in 0..grads.blocks[bi].len() {
            let g = grads.blocks[bi][i];
            if bi == hardnerf::field::BLOCK_HASH_TABLE && g == 0.0 {
                continue;
            }
            let orig = params.blocks_mut()[bi][i];
            params.blocks_mut()[bi][i] = orig + h;
            let up = full_loss(&params, &batch, &gt, bg);
            params.blocks_mut()[bi][i] = orig - h;
            let down = full_loss(&params, &batch, &gt, bg);
            params.blocks_mut()[bi][i] = orig;
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(g.abs());
            assert!(
                (fd - g).abs() < 1e-3 * denom + 1e-10,
                "block {bi} param {i}: fd {fd} vs analytic {g}"
            );
            checked += 1;
        }
    }
    assert!(checked > 100);
}

/// The renderer's gradient cache restricted to a subset and fed to the
/// field backward must equal end-to-end differentiation with the other
/// samples' upstream gradients zeroed.
#[test]
fn cached_subset_backward_equals_masked_full_backward() {
    let params = FieldParams::<f64>::init(tiny_field(), &CounterRng::new(21));
    let batch = tiny_batch(&[4, 3, 5], 22);
    let gt = vec![[0.8, 0.1, 0.3], [0.2, 0.9, 0.5], [0.4, 0.4, 0.9]];
    let bg = [0.5; 3];
    let n = batch.len();

    let mut ledger = CostLedger::new();
    let (out, tape) = params
        .forward_training(&batch.positions, &batch.view_dirs, &mut ledger)
        .unwrap();
    let render = composite(&batch, &out, bg, &mut ledger).unwrap();
    let cache = backward_to_preactivations(&batch, &out, &render, &gt, 10.0, &mut ledger).unwrap();

    let subset: Vec<usize> = (0..n).step_by(2).collect();

    // route A: zero the cache outside the subset, run the full-batch backward
    let mut masked_sigma = vec![0.0; n];
    let mut masked_color = vec![[0.0; 3]; n];
    for &i in &subset {
        masked_sigma[i] = cache.d_sigma_pre[i];
        masked_color[i] = cache.d_color_pre[i];
    }
    let full = params
        .backward(
            tape,
            &masked_sigma,
            &masked_color,
            ParallelMode::Deterministic,
            &mut ledger,
        )
        .unwrap();

    // route B: rebuild the graph over the subset only, feed the cached rows
    let sub_points: Vec<Vec3<f64>> = subset.iter().map(|&i| batch.positions[i]).collect();
    let sub_dirs: Vec<Vec3<f64>> = subset.iter().map(|&i| batch.view_dirs[i]).collect();
    let sub_sigma: Vec<f64> = subset.iter().map(|&i| cache.d_sigma_pre[i]).collect();
    let sub_color: Vec<[f64; 3]> = subset.iter().map(|&i| cache.d_color_pre[i]).collect();
    let (_, tape_b) = params
        .forward_training(&sub_points, &sub_dirs, &mut ledger)
        .unwrap();
    let sub = params
        .backward(
            tape_b,
            &sub_sigma,
            &sub_color,
            ParallelMode::Deterministic,
            &mut ledger,
        )
        .unwrap();

    let diff = full.max_abs_diff(&sub);
    assert!(diff < 1e-9, "max param-grad diff {diff}");
}

/// With an occupancy grid voxelized from the analytic scene, no emitted
/// sample lies in a zero-density region farther than one cell diagonal from
/// any primitive.
#[test]
fn oracle_grid_pruning_is_sound() {
    let scene = generate_scene("spheres", 1).unwrap();
    let res = 24usize;
    let grid = scene.voxelize(res);
    let dataset = make_dataset(&scene, 8, (16, 16), 2).unwrap();
    let rng = CounterRng::new(3);
    let (rays, _) = sample_pixels::<f64>(&dataset, 128, 0, &rng, false).unwrap();
    let batch = sample_points(
        &rays,
        &grid,
        0.05,
        scene.bounds_min,
        scene.bounds_max,
        0,
        &rng,
        true,
    );
    assert!(batch.len() > 0);
    let extent = scene.bounds_max[0] - scene.bounds_min[0];
    let cell_diagonal = (extent / res as f64) * 3f64.sqrt();
    for p_unit in &batch.positions {
        let world = [
            scene.bounds_min[0] + p_unit[0] * extent,
            scene.bounds_min[1] + p_unit[1] * extent,
            scene.bounds_min[2] + p_unit[2] * extent,
        ];
        let (density, _) = scene.eval(world);
        if density == 0.0 {
            let d = scene.min_distance(world);
            assert!(
                d <= cell_diagonal,
                "pruned-grid sample {world:?} is {d} from the nearest surface"
            );
        }
    }
}

/// Updating the occupancy grid against the analytic field (the converged
/// ideal) lands the occupied fraction within a factor of two of the oracle
/// voxelization.
#[test]
fn occupancy_converges_to_oracle_fraction() {
    let scene = generate_scene("spheres", 1).unwrap();
    let res = 16usize;
    let oracle = scene.voxelize(res);
    let true_fraction = oracle.occupied_fraction();
    assert!(true_fraction > 0.0);

    let mut grid = OccupancyGrid::new(OccupancyConfig {
        resolution: res,
        ..Default::default()
    });
    let rng = CounterRng::new(5);
    let extent = scene.bounds_max[0] - scene.bounds_min[0];
    for it in 0..120 {
        grid.update(
            |unit| {
                let world = [
                    scene.bounds_min[0] + unit[0] * extent,
                    scene.bounds_min[1] + unit[1] * extent,
                    scene.bounds_min[2] + unit[2] * extent,
                ];
                scene.eval(world).0
            },
            it,
            &rng,
        );
    }
    let got = grid.occupied_fraction();
    assert!(
        got >= 0.5 * true_fraction && got <= 2.0 * true_fraction,
        "occupied fraction {got} vs oracle {true_fraction}"
    );
}

/// The compositing kernel invoked from the ground-truth renderer and from
/// the differentiable renderer is the same code path: identical per-step
/// inputs produce bit-identical pixels.
#[test]
fn ground_truth_and_renderer_share_the_compositor() {
    let rng = CounterRng::new(9);
    let mut s = rng.stream(Domain::Misc, &[1]);
    let n = 32;
    let sigma: Vec<f64> = (0..n).map(|_| s.uniform(0.0, 20.0)).collect();
    let color: Vec<[f64; 3]> = (0..n)
        .map(|_| [s.next_f64(), s.next_f64(), s.next_f64()])
        .collect();
    let delta: Vec<f64> = (0..n).map(|_| s.uniform(0.01, 0.1)).collect();
    let bg = [0.5; 3];
    let run = || {
        let mut w = vec![0.0; n];
        let mut t = vec![0.0; n];
        let mut a = vec![0.0; n];
        hardnerf::renderer::composite_ray(&sigma, &color, &delta, bg, &mut w, &mut t, &mut a)
    };
    let (p1, t1) = run();
    let (p2, t2) = run();
    assert_eq!(p1.map(f64::to_bits), p2.map(f64::to_bits));
    assert_eq!(t1.to_bits(), t2.to_bits());
}
