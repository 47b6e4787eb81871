//! Capacity-bound pilot: a smaller field whose quality ceiling arrives
//! before the 3000-iteration budget ends.

use hardnerf::encoding::HashGridConfig;
use hardnerf::field::FieldConfig;
use hardnerf::scene::{generate_scene, make_dataset};
use hardnerf::trainer::{train, IterationMetrics, TrainMode, TrainerConfig};

fn cum_macs(rows: &[IterationMetrics]) -> Vec<u64> {
    let mut c = 0;
    rows.iter().map(|m| { c += m.macs_fwd + m.macs_bwd; c }).collect()
}

fn capacity_bound_field() -> FieldConfig {
    FieldConfig {
        grid: HashGridConfig {
            levels: 3,
            base_resolution: 12,
            growth: 2.2,
            table_size: 1 << 11,
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

fn main() {
    println!("===== capacity-bound field, 96x96, 32 rays, 64 steps, bmin 64");
    for scene_name in ["spheres", "cornell", "clutter"] {
        for seed in [0u64, 1, 2] {
            let scene = generate_scene(scene_name, 0).unwrap();
            let dataset = make_dataset(&scene, 16, (96, 96), 0).unwrap();
            let cfg = |mode| TrainerConfig {
                mode,
                n_rays: 32,
                iterations: 3000,
                seed,
                deterministic: true,
                eval_period: 50,
                b_min: 64,
                max_steps_per_ray: 64,
                occ_resolution: 8,
                occupancy_period: 16,
                ..Default::default()
            };
            let t0 = std::time::Instant::now();
            let base = train::<f32>(FieldConfig::small(), cfg(TrainMode::Baseline), dataset.clone()).unwrap();
            let budget = *cum_macs(&base.metrics).last().unwrap();
            let mut hm_cfg = cfg(TrainMode::Hardmine);
            hm_cfg.iterations = 60_000;
            hm_cfg.budget_macs = Some(budget);
            let hm = train::<f32>(FieldConfig::small(), hm_cfg, dataset.clone()).unwrap();
            let wall = t0.elapsed().as_secs_f64();
            let hm_cum = cum_macs(&hm.metrics);
            let base_final = base.final_psnr.unwrap();
            let frac = hm
                .metrics
                .iter()
                .enumerate()
                .filter_map(|(i, m)| m.psnr_val.map(|p| (i, p)))
                .find(|&(_, p)| p >= base_final)
                .map(|(i, _)| hm_cum[i] as f64 / budget as f64);
            let last = hm.metrics.last().unwrap();
            // baseline psnr at 1/3 and 2/3 to gauge saturation
            let curve: Vec<f64> = base.metrics.iter().filter_map(|m| m.psnr_val).collect();
            println!(
                "  {scene_name} seed {seed} ({wall:.0}s): base [{:.1} {:.1} {:.2}] hm {:.2} ({} iters, b/B {:.2}) frac {:?}",
                curve[curve.len() / 3],
                curve[2 * curve.len() / 3],
                base_final,
                hm.final_psnr.unwrap(),
                hm.metrics.len(),
                last.hard_batch as f64 / last.batch as f64,
                frac.map(|f| (f * 1000.0).round() / 1000.0)
            );
        }
    }
}
