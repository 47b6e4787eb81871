//! Traces the mined run's b/B and cumulative-budget trajectory.

use hardnerf::field::FieldConfig;
use hardnerf::scene::{generate_scene, make_dataset};
use hardnerf::trainer::{train, IterationMetrics, TrainMode, TrainerConfig};

fn cum_macs(rows: &[IterationMetrics]) -> Vec<u64> {
    let mut c = 0;
    rows.iter().map(|m| { c += m.macs_fwd + m.macs_bwd; c }).collect()
}

fn main() {
    for scene_name in ["spheres", "clutter"] {
        let scene = generate_scene(scene_name, 0).unwrap();
        let dataset = make_dataset(&scene, 16, (96, 96), 0).unwrap();
        let cfg = |mode| TrainerConfig {
            mode,
            n_rays: 32,
            iterations: 3000,
            seed: 0,
            deterministic: true,
            eval_period: 100,
            b_min: 32,
            max_steps_per_ray: 64,
            occ_resolution: 16,
            occupancy_period: 16,
            ..Default::default()
        };
        let base = train::<f32>(FieldConfig::small(), cfg(TrainMode::Baseline), dataset.clone()).unwrap();
        let budget = *cum_macs(&base.metrics).last().unwrap();
        let mut hm_cfg = cfg(TrainMode::Hardmine);
        hm_cfg.iterations = 60_000;
        hm_cfg.budget_macs = Some(budget);
        let hm = train::<f32>(FieldConfig::small(), hm_cfg, dataset).unwrap();
        let hm_cum = cum_macs(&hm.metrics);
        println!("== {scene_name}: base final {:.2}, budget {budget}", base.final_psnr.unwrap());
        println!("  iter | b/B    | cum budget frac | B     | psnr(hm) psnr(base)");
        for &it in &[100usize, 300, 500, 800, 1200, 1600, 2000, 2500, 3000, 3500, 4000] {
            if it >= hm.metrics.len() { continue; }
            let m = &hm.metrics[it - 1];
            let psnr_hm = hm.metrics[..it].iter().rev().find_map(|r| r.psnr_val);
            let psnr_b = if it <= base.metrics.len() {
                base.metrics[..it].iter().rev().find_map(|r| r.psnr_val)
            } else { None };
            println!(
                "  {it:5} | {:.3} | {:.3} | {:5} | {:?} {:?}",
                m.hard_batch as f64 / m.batch as f64,
                hm_cum[it - 1] as f64 / budget as f64,
                m.batch,
                psnr_hm.map(|p| (p * 10.0).round() / 10.0),
                psnr_b.map(|p| (p * 10.0).round() / 10.0)
            );
        }
    }
}
