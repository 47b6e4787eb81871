//! Pilot experiment: runs the baseline and hard-mining trainers on the toy
//! scenes at bench scale and prints the statistics the acceptance suite
//! gates on. Used to calibrate thresholds before they are pinned.

use hardnerf::field::FieldConfig;
use hardnerf::scene::{generate_scene, make_dataset};
use hardnerf::trainer::{train, IterationMetrics, TrainMode, TrainerConfig};

fn bench_config(mode: TrainMode, seed: u64) -> TrainerConfig {
    TrainerConfig {
        mode,
        n_rays: 192,
        iterations: 3000,
        seed,
        deterministic: true,
        eval_period: 250,
        b_min: 64,
        max_steps_per_ray: 32,
        occ_resolution: 16,
        occupancy_period: 16,
        ..Default::default()
    }
}

fn cum_macs(rows: &[IterationMetrics]) -> Vec<u64> {
    let mut cum = 0;
    rows.iter()
        .map(|m| {
            cum += m.macs_fwd + m.macs_bwd;
            cum
        })
        .collect()
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

fn main() {
    for scene_name in ["spheres", "cornell", "clutter"] {
        let scene = generate_scene(scene_name, 0).unwrap();
        let dataset = make_dataset(&scene, 16, (32, 32), 0).unwrap();

        let t0 = std::time::Instant::now();
        let base = train::<f32>(
            FieldConfig::small(),
            bench_config(TrainMode::Baseline, 0),
            dataset.clone(),
        )
        .unwrap();
        let t_base = t0.elapsed().as_secs_f64();

        // hardmine runs to the baseline's MAC budget
        let base_cum = cum_macs(&base.metrics);
        let budget = *base_cum.last().unwrap();
        let mut hm_cfg = bench_config(TrainMode::Hardmine, 0);
        hm_cfg.iterations = 30_000;
        hm_cfg.budget_macs = Some(budget);
        let t0 = std::time::Instant::now();
        let hm = train::<f32>(FieldConfig::small(), hm_cfg, dataset.clone()).unwrap();
        let t_hm = t0.elapsed().as_secs_f64();

        // loss gap over matched iterations after 500
        let matched = base.metrics.len().min(hm.metrics.len());
        let mut gaps: Vec<f64> = (500..matched)
            .filter(|&i| base.metrics[i].loss > 0.0)
            .map(|i| (hm.metrics[i].loss - base.metrics[i].loss).abs() / base.metrics[i].loss)
            .collect();
        gaps.sort_by(f64::total_cmp);
        let median_gap = gaps[gaps.len() / 2];

        // tau^-1 and skewness trends over the hardmine run
        let xs: Vec<f64> = (0..hm.metrics.len()).map(|i| i as f64).collect();
        let tau_inv: Vec<f64> = hm.metrics.iter().map(|m| 1.0 / m.tau_ema).collect();
        let tau_slope = slope(&xs, &tau_inv);
        let skews: Vec<(f64, f64)> = hm
            .metrics
            .iter()
            .enumerate()
            .filter(|(i, m)| *i >= 100 && m.skew_g.is_finite())
            .map(|(i, m)| (i as f64, m.skew_g))
            .collect();
        let skew_slope = slope(
            &skews.iter().map(|p| p.0).collect::<Vec<_>>(),
            &skews.iter().map(|p| p.1).collect::<Vec<_>>(),
        );
        let skew_at = |it: usize| -> f64 {
            let window: Vec<f64> = hm
                .metrics
                .iter()
                .skip(it.saturating_sub(50))
                .take(100)
                .filter(|m| m.skew_g.is_finite())
                .map(|m| m.skew_g)
                .collect();
            window.iter().sum::<f64>() / window.len() as f64
        };

        // budget fraction for hardmine to reach baseline's final psnr
        let hm_cum = cum_macs(&hm.metrics);
        let base_final_psnr = base.final_psnr.unwrap();
        let frac = hm
            .metrics
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.psnr_val.map(|p| (i, p)))
            .find(|&(_, p)| p >= base_final_psnr)
            .map(|(i, _)| hm_cum[i] as f64 / budget as f64);

        let hm_last = hm.metrics.last().unwrap();
        println!("== {scene_name}");
        println!(
            "  baseline: {} iters {:.1}s, final loss {:.5}, psnr {:.2}",
            base.metrics.len(),
            t_base,
            base.metrics.last().unwrap().loss,
            base_final_psnr
        );
        println!(
            "  hardmine: {} iters {:.1}s (matched budget), final psnr {:.2}, tau_ema {:.2}, b/B {:.3}",
            hm.metrics.len(),
            t_hm,
            hm.final_psnr.unwrap(),
            hm_last.tau_ema,
            hm_last.hard_batch as f64 / hm_last.batch as f64
        );
        println!(
            "  median loss gap after 500: {:.3}, tau_inv slope {:.2e}, skew slope {:.2e}",
            median_gap, tau_slope, skew_slope
        );
        println!(
            "  skew at 100: {:.2}, at 2000: {:.2}; budget fraction to baseline psnr: {:?}",
            skew_at(100),
            skew_at(2000),
            frac
        );
    }
}
