use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::Args;
use serde::{Deserialize, Serialize};

use hardnerf::field::{FieldConfig, FieldParams};
use hardnerf::image::Image;
use hardnerf::io::{read_blob_file, write_blob_file};
use hardnerf::sampler::{OccupancyConfig, OccupancyGrid};
use hardnerf::scene::{generate_scene, load_dataset, make_dataset, save_dataset, Dataset};
use hardnerf::trainer::{
    metrics_to_csv, parse_metrics_csv, render_view, train, IterationMetrics, TrainMode,
    TrainerConfig,
};

/// Resolved configuration echoed next to every command's outputs.
#[derive(Serialize, Deserialize, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub scene: Option<String>,
    pub views: Option<usize>,
    pub resolution: Option<usize>,
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub trainer: Option<TrainerConfig>,
    pub field: Option<FieldConfig>,
}

fn write_config_echo(out: &Path, config: &RunConfig) -> anyhow::Result<()> {
    let json = serde_json::to_string_pretty(config)?;
    // round-trip check: the echoed config must parse back identically
    let parsed: RunConfig = serde_json::from_str(&json)?;
    if &parsed != config {
        bail!("config echo failed to round-trip");
    }
    std::fs::write(out.join("config.json"), json)?;
    Ok(())
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Scene preset: spheres | cornell | clutter.
    #[arg(long, default_value = "spheres")]
    pub scene: String,
    #[arg(long, default_value_t = 16)]
    pub views: usize,
    /// Square image resolution in pixels.
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "dataset")]
    pub out: PathBuf,
}

pub fn cmd_generate(args: GenerateArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("unwritable path {}", args.out.display()))?;
    let scene = generate_scene(&args.scene, args.seed)?;
    let mut dataset = make_dataset(&scene, args.views, (args.resolution, args.resolution), args.seed)?;
    dataset.preset = args.scene.clone();
    save_dataset(&dataset, &args.out)?;
    write_config_echo(
        &args.out,
        &RunConfig {
            command: "generate".into(),
            scene: Some(args.scene),
            views: Some(args.views),
            resolution: Some(args.resolution),
            dataset: None,
            out: args.out.clone(),
            trainer: None,
            field: None,
        },
    )?;
    println!(
        "wrote {} views ({} train / {} val) to {}",
        dataset.views.len(),
        dataset.train_view_indices().len(),
        dataset.val_view_indices().len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    /// Existing dataset directory; omit to generate one in memory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "spheres")]
    pub scene: String,
    #[arg(long, default_value_t = 16)]
    pub views: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, value_parser = parse_mode, default_value = "hardmine")]
    pub mode: TrainMode,
    #[arg(long, default_value_t = 3000)]
    pub iters: usize,
    /// Stop once cumulative network MACs exceed this.
    #[arg(long)]
    pub budget_macs: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = false)]
    pub deterministic: bool,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Hard batch size floor.
    #[arg(long, default_value_t = 256)]
    pub bmin: usize,
    /// Ablation: multinomial draw with replacement.
    #[arg(long, default_value_t = false)]
    pub with_replacement: bool,
    /// Ablation: 1/(B p_i) importance re-weighting of selected gradients.
    #[arg(long, default_value_t = false)]
    pub reweight: bool,
    #[arg(long, default_value_t = 1024)]
    pub n_rays: usize,
    #[arg(long, default_value_t = 250)]
    pub eval_period: usize,
    #[arg(long, default_value_t = 64)]
    pub steps_per_ray: usize,
    #[arg(long, default_value_t = 64)]
    pub occ_resolution: usize,
    /// Use the reduced architecture (fast CPU experiments).
    #[arg(long, default_value_t = false)]
    pub small_net: bool,
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    match s {
        "baseline" => Ok(TrainMode::Baseline),
        "hardmine" => Ok(TrainMode::Hardmine),
        other => Err(format!("unknown mode '{other}' (expected baseline|hardmine)")),
    }
}

fn load_or_generate(args: &TrainArgs) -> anyhow::Result<Dataset> {
    match &args.data {
        Some(dir) => {
            if !dir.join("manifest.json").is_file() {
                bail!("missing dataset: no manifest.json in {}", dir.display());
            }
            Ok(load_dataset(dir)?)
        }
        None => {
            let scene = generate_scene(&args.scene, args.seed)?;
            let mut d = make_dataset(&scene, args.views, (args.resolution, args.resolution), args.seed)?;
            d.preset = args.scene.clone();
            Ok(d)
        }
    }
}

pub fn save_occupancy(grid: &OccupancyGrid, path: &Path) -> anyhow::Result<()> {
    let ema: Vec<f32> = grid.ema.iter().map(|&v| v as f32).collect();
    write_blob_file(path, &grid.config, &[("ema", &ema)])?;
    Ok(())
}

pub fn load_occupancy(path: &Path) -> anyhow::Result<OccupancyGrid> {
    let (config, blobs) = read_blob_file::<OccupancyConfig>(path)?;
    let (_, ema) = blobs
        .into_iter()
        .find(|(n, _)| n == "ema")
        .ok_or_else(|| anyhow!("missing ema blob"))?;
    let mut grid = OccupancyGrid::empty(config);
    let threshold = grid.config.threshold;
    grid.ema = ema.into_iter().map(|v| v as f64).collect();
    grid.occupied = grid.ema.iter().map(|&e| e > threshold).collect();
    Ok(grid)
}

pub fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("unwritable path {}", args.out.display()))?;
    let dataset = load_or_generate(&args)?;
    let field_config = if args.small_net {
        FieldConfig::small()
    } else {
        FieldConfig::default()
    };
    let trainer_config = TrainerConfig {
        mode: args.mode,
        n_rays: args.n_rays,
        iterations: args.iters,
        budget_macs: args.budget_macs,
        seed: args.seed,
        deterministic: args.deterministic,
        eval_period: args.eval_period,
        b_min: args.bmin,
        with_replacement: args.with_replacement,
        reweight: args.reweight,
        max_steps_per_ray: args.steps_per_ray,
        occ_resolution: args.occ_resolution,
        ..Default::default()
    };
    write_config_echo(
        &args.out,
        &RunConfig {
            command: "train".into(),
            scene: Some(dataset.preset.clone()),
            views: Some(dataset.views.len()),
            resolution: Some(dataset.resolution().0),
            dataset: args.data.clone(),
            out: args.out.clone(),
            trainer: Some(trainer_config.clone()),
            field: Some(field_config.clone()),
        },
    )?;

    let outputs = train::<f32>(field_config, trainer_config.clone(), dataset)?;
    for row in &outputs.metrics {
        if let Some(p) = row.psnr_val {
            println!(
                "iter {} loss {:.6} B {} b {} tau_ema {:.3} psnr {:.2}",
                row.iter, row.loss, row.batch, row.hard_batch, row.tau_ema, p
            );
        }
    }
    std::fs::write(args.out.join("metrics.csv"), metrics_to_csv(&outputs.metrics))?;
    outputs.params.save(&args.out.join("checkpoint.bin"))?;
    save_occupancy(&outputs.occgrid, &args.out.join("occupancy.bin"))?;
    println!(
        "done: {} iterations, final psnr {:.2} dB, checkpoint {}",
        outputs.metrics.len(),
        outputs.final_psnr.unwrap_or(f64::NAN),
        args.out.join("checkpoint.bin").display()
    );
    Ok(())
}

#[derive(Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory with the cameras to render.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "renders")]
    pub out: PathBuf,
    /// Render every view instead of just the validation split.
    #[arg(long, default_value_t = false)]
    pub all_views: bool,
    /// Early ray termination during compositing (inference-only).
    #[arg(long, default_value_t = false)]
    pub early_termination: bool,
}

pub fn cmd_render(args: RenderArgs) -> anyhow::Result<()> {
    if !args.checkpoint.is_file() {
        bail!("missing checkpoint: {}", args.checkpoint.display());
    }
    std::fs::create_dir_all(&args.out)?;
    let dataset = load_dataset(&args.data)?;
    let params = FieldParams::<f32>::load(&args.checkpoint)?;
    let occ_path = args
        .checkpoint
        .parent()
        .map(|p| p.join("occupancy.bin"))
        .filter(|p| p.is_file());
    let occgrid = match occ_path {
        Some(p) => load_occupancy(&p)?,
        None => OccupancyGrid::new(OccupancyConfig::default()),
    };
    let diag = {
        let mut s = 0.0;
        for a in 0..3 {
            let e = dataset.bounds_max[a] - dataset.bounds_min[a];
            s += e * e;
        }
        s.sqrt()
    };
    let step = (diag / 64.0) as f32;
    let view_indices: Vec<usize> = if args.all_views {
        (0..dataset.views.len()).collect()
    } else {
        dataset.val_view_indices()
    };
    let mut psnr_sum = 0.0;
    let mut psnr_count = 0usize;
    for &vi in &view_indices {
        let img: Image = render_view(
            &params,
            &occgrid,
            &dataset,
            vi,
            step,
            args.early_termination,
        )?;
        img.write_ppm(&args.out.join(format!("view_{vi:03}.ppm")))?;
        img.write_pfm(&args.out.join(format!("view_{vi:03}.pfm")))?;
        let db = hardnerf::evalbench::psnr(&img, &dataset.views[vi].image)?;
        psnr_sum += hardnerf::evalbench::cap_psnr(db);
        psnr_count += 1;
        println!("view {vi}: psnr {:.2} dB", hardnerf::evalbench::cap_psnr(db));
    }
    if psnr_count > 0 {
        println!("mean psnr {:.2} dB over {psnr_count} views", psnr_sum / psnr_count as f64);
    }
    Ok(())
}

#[derive(Args)]
pub struct CompareArgs {
    /// Metrics CSV of the baseline run.
    #[arg(long)]
    pub baseline: PathBuf,
    /// Metrics CSV of the hard-mining run.
    #[arg(long)]
    pub hardmine: PathBuf,
    #[arg(long, default_value = "comparison")]
    pub out: PathBuf,
}

#[derive(Serialize, Debug)]
pub struct CompareSummary {
    pub baseline_total_macs: u64,
    pub baseline_final_psnr: f64,
    pub hardmine_psnr_at_matched_budget: f64,
    pub psnr_delta_at_matched_budget: f64,
    /// Fraction of the baseline MAC budget the mined run needed to reach the
    /// baseline's final PSNR; null when it never reached it.
    pub budget_fraction_to_baseline_psnr: Option<f64>,
}

/// Cumulative network MACs and the PSNR checkpoints of one run.
fn psnr_curve(rows: &[IterationMetrics]) -> Vec<(u64, f64)> {
    let mut cum = 0u64;
    let mut out = Vec::new();
    for r in rows {
        cum += r.macs_fwd + r.macs_bwd;
        if let Some(p) = r.psnr_val {
            out.push((cum, p));
        }
    }
    out
}

fn psnr_at_budget(curve: &[(u64, f64)], budget: u64) -> Option<f64> {
    curve
        .iter()
        .take_while(|(c, _)| *c <= budget)
        .last()
        .map(|&(_, p)| p)
}

fn check_matched_configs(a: &Path, b: &Path) -> anyhow::Result<()> {
    let sibling = |p: &Path| p.parent().map(|d| d.join("config.json"));
    let (Some(ca), Some(cb)) = (sibling(a), sibling(b)) else {
        return Ok(());
    };
    if !(ca.is_file() && cb.is_file()) {
        return Ok(());
    }
    let va: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ca)?)?;
    let vb: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(cb)?)?;
    for key in ["scene", "views", "resolution"] {
        if va[key] != vb[key] {
            bail!(
                "mismatched configs: {key} differs ({} vs {})",
                va[key], vb[key]
            );
        }
    }
    if va["trainer"]["seed"] != vb["trainer"]["seed"] {
        bail!(
            "mismatched configs: seed differs ({} vs {})",
            va["trainer"]["seed"], vb["trainer"]["seed"]
        );
    }
    Ok(())
}

pub fn cmd_compare(args: CompareArgs) -> anyhow::Result<()> {
    check_matched_configs(&args.baseline, &args.hardmine)?;
    let base = parse_metrics_csv(&std::fs::read_to_string(&args.baseline)?)?;
    let hm = parse_metrics_csv(&std::fs::read_to_string(&args.hardmine)?)?;
    if base.is_empty() || hm.is_empty() {
        bail!("empty metrics file");
    }
    std::fs::create_dir_all(&args.out)?;

    let base_curve = psnr_curve(&base);
    let hm_curve = psnr_curve(&hm);
    if base_curve.is_empty() || hm_curve.is_empty() {
        bail!("no psnr checkpoints in metrics (train with --eval-period > 0)");
    }

    let mut curves = String::from("run,cum_macs,psnr\n");
    for (c, p) in &base_curve {
        curves.push_str(&format!("baseline,{c},{p}\n"));
    }
    for (c, p) in &hm_curve {
        curves.push_str(&format!("hardmine,{c},{p}\n"));
    }
    std::fs::write(args.out.join("psnr_vs_macs.csv"), curves)?;

    let baseline_total = base_curve.last().unwrap().0;
    let baseline_final = base_curve.last().unwrap().1;
    let hm_at_budget = psnr_at_budget(&hm_curve, baseline_total)
        .unwrap_or_else(|| hm_curve.first().unwrap().1);
    let fraction = hm_curve
        .iter()
        .find(|(_, p)| *p >= baseline_final)
        .map(|&(c, _)| c as f64 / baseline_total as f64);
    let summary = CompareSummary {
        baseline_total_macs: baseline_total,
        baseline_final_psnr: baseline_final,
        hardmine_psnr_at_matched_budget: hm_at_budget,
        psnr_delta_at_matched_budget: hm_at_budget - baseline_final,
        budget_fraction_to_baseline_psnr: fraction,
    };
    let json = serde_json::to_string_pretty(&summary)?;
    std::fs::write(args.out.join("summary.json"), &json)?;
    println!("{json}");
    Ok(())
}

#[derive(Args)]
pub struct OccgridArgs {
    #[arg(long, default_value = "spheres")]
    pub scene: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub iters: usize,
    #[arg(long, default_value = "occgrid.bin")]
    pub out: PathBuf,
}

pub fn cmd_occgrid(args: OccgridArgs) -> anyhow::Result<()> {
    let scene = generate_scene(&args.scene, args.seed)?;
    let mut dataset = make_dataset(&scene, 8, (32, 32), args.seed)?;
    dataset.preset = args.scene.clone();
    let trainer_config = TrainerConfig {
        iterations: args.iters,
        n_rays: 256,
        eval_period: 0,
        occ_resolution: 32,
        seed: args.seed,
        ..Default::default()
    };
    let outputs = train::<f32>(FieldConfig::small(), trainer_config, dataset)?;
    outputs.occgrid.dump(&args.out)?;
    println!(
        "occupancy after {} iters: {:.1}% occupied, dumped to {}",
        args.iters,
        100.0 * outputs.occgrid.occupied_fraction(),
        args.out.display()
    );
    Ok(())
}
