use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use raydecomp::harness::{
    brdf_log_rmse, illum_log_rmse, label_agreement, make_fixture, mean_vertex_distance,
    FixtureConfig, FixtureKind, MetricsReport,
};
use raydecomp::io::write_pfm;
use raydecomp::optimizer::{run_map, StageSchedule, TRACE_CSV_HEADER};
use raydecomp::posterior::HyperParameters;
use raydecomp::renderer::{grad_image, render_image, RenderSettings};
use raydecomp::scene::{load_scene, save_scene, Block, Scene, ALL_BLOCKS};

#[derive(Parser)]
#[command(name = "raydecomp", about = "Radiometric scene decomposition", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render every camera of a scene to PFM images.
    Render(CommonArgs),
    /// Validate analytic gradients against finite differences per block.
    GradCheck(CommonArgs),
    /// Run the full MAP decomposition and write checkpoints and results.
    Decompose(CommonArgs),
    /// Compare an estimated scene against a ground-truth scene.
    Metrics(MetricsArgs),
    /// Generate a synthetic fixture scene with rendered observations.
    Synth(SynthArgs),
    /// Export the geometric eigenbasis of a scene as JSON.
    Bases(CommonArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Path to scene.json.
    #[arg(long)]
    scene: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the render seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key config override, e.g. --set settings.max_bounces=2.
    /// Repeatable; last write wins.
    #[arg(long = "set")]
    set: Vec<String>,
    /// Rayon worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Estimated scene.json.
    #[arg(long)]
    scene: PathBuf,
    /// Ground-truth scene.json.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    /// Fixture name: sphere_quad, two_material_plane, teapot_room_mini.
    #[arg(long)]
    fixture: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key override into the fixture config, e.g. --set resolution=64.
    #[arg(long = "set")]
    set: Vec<String>,
    #[arg(long)]
    threads: Option<usize>,
}

/// Everything the subcommands can override through --set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    settings: RenderSettings,
    hyper: HyperParameters,
    schedule: StageSchedule,
}

fn apply_override(root: &mut serde_json::Value, spec: &str) -> anyhow::Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override '{spec}' is not key=value"))?;
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        if !node.is_object() {
            bail!("override path '{key}' crosses a non-object");
        }
        node = node
            .as_object_mut()
            .unwrap()
            .entry(p.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    let leaf = *parts.last().unwrap();
    let value = serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
    node.as_object_mut()
        .with_context(|| format!("override path '{key}' crosses a non-object"))?
        .insert(leaf.to_string(), value);
    Ok(())
}

/// Defaults, then the scene file's hyper table, then --set, then --seed.
fn build_config(
    scene_hyper: Option<serde_json::Value>,
    sets: &[String],
    seed: Option<u64>,
) -> anyhow::Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(h) = scene_hyper {
        merge(&mut value, &h);
    }
    for s in sets {
        apply_override(&mut value, s)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(value).context("invalid configuration")?;
    if let Some(s) = seed {
        cfg.settings.rng_seed = s;
    }
    cfg.settings.validate()?;
    cfg.hyper.validate()?;
    cfg.schedule.validate()?;
    Ok(cfg)
}

fn merge(dst: &mut serde_json::Value, src: &serde_json::Value) {
    if let (Some(d), Some(s)) = (dst.as_object_mut(), src.as_object()) {
        for (k, v) in s {
            match d.get_mut(k) {
                Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                _ => {
                    d.insert(k.clone(), v.clone());
                }
            }
        }
    }
}

fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn out_dir(out: &Option<PathBuf>, scene: &Path) -> PathBuf {
    out.clone()
        .unwrap_or_else(|| scene.parent().unwrap_or(Path::new(".")).join("out"))
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Render(a) => cmd_render(a),
        Cmd::GradCheck(a) => cmd_grad_check(a),
        Cmd::Decompose(a) => cmd_decompose(a),
        Cmd::Metrics(a) => cmd_metrics(a),
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Bases(a) => cmd_bases(a),
    }
}

fn cmd_render(a: CommonArgs) -> anyhow::Result<()> {
    init_threads(a.threads);
    let (scene, hyper) = load_scene(&a.scene)?;
    let cfg = build_config(hyper, &a.set, a.seed)?;
    let dir = out_dir(&a.out, &a.scene);
    std::fs::create_dir_all(&dir)?;
    for v in 0..scene.cameras.len() {
        let img = render_image(&scene, v, &cfg.settings)?;
        write_pfm(&dir.join(format!("render_{v}.pfm")), &img)?;
    }
    println!("rendered {} images to {}", scene.cameras.len(), dir.display());
    Ok(())
}

/// Blocks the scene can exercise: texture needs the flag, segmentation needs
/// more than one material, geometry needs weights.
fn applicable_blocks(scene: &Scene) -> Vec<Block> {
    ALL_BLOCKS
        .iter()
        .copied()
        .filter(|b| match b {
            Block::Texture => scene.texture.enabled,
            Block::Segmentation => scene.materials.len() > 1,
            Block::Geometry => !scene.geometry_weights.is_empty(),
            _ => true,
        })
        .collect()
}

fn bump_scene(scene: &Scene, block: Block, idx: usize, h: f64) -> anyhow::Result<Scene> {
    use raydecomp::scene::{flatten_parameters, unflatten_parameters};
    Ok(match block {
        Block::Illumination => {
            // Frozen CDF keeps the light-sampling stream identical.
            let mut rad = scene.illumination.radiance.clone();
            rad[idx / 3][idx % 3] += h;
            let mut out = scene.clone();
            out.illumination = scene.illumination.with_radiance_frozen_cdf(rad);
            out
        }
        Block::Geometry => {
            // The analytic gradient follows shading normals only; the oracle
            // freezes vertex positions accordingly.
            let mut w = scene.geometry_weights.clone();
            w[idx] += h;
            let mut out = scene.clone();
            out.mesh = scene.mesh.with_shading_normals_for(&scene.bases, &w);
            out
        }
        _ => {
            let mut pv = flatten_parameters(scene, &[block]);
            pv.blocks[0].1[idx] += h;
            unflatten_parameters(scene, &pv)?
        }
    })
}

fn cmd_grad_check(a: CommonArgs) -> anyhow::Result<()> {
    init_threads(a.threads);
    let (scene, hyper) = load_scene(&a.scene)?;
    let cfg = build_config(hyper, &a.set, a.seed)?;
    let blocks = applicable_blocks(&scene);
    if blocks.is_empty() {
        println!("no active blocks; nothing to check");
        return Ok(());
    }
    let image_sum = |s: &Scene, settings: &RenderSettings| -> anyhow::Result<[f64; 3]> {
        let img = render_image(s, 0, settings)?;
        let mut total = [0.0f64; 3];
        for p in &img.pixels {
            for l in 0..3 {
                total[l] += p[l];
            }
        }
        Ok(total)
    };
    let mut worst_overall = 0.0f64;
    let mut any_failed = false;
    for block in blocks {
        let mut settings = cfg.settings.clone();
        settings.use_soft_segmentation = block == Block::Segmentation;
        let (_, bundle) = grad_image(&scene, 0, &settings, &[block])?;
        let g = bundle.get(block).expect("active block");
        // The largest-magnitude coordinates, up to 8 of them.
        let mut order: Vec<usize> = (0..g.len()).collect();
        let mag = |v: &[f64; 3]| v[0].abs() + v[1].abs() + v[2].abs();
        order.sort_by(|&i, &j| mag(&g[j]).partial_cmp(&mag(&g[i])).unwrap());
        order.truncate(8);
        let h = 1e-4;
        let mut worst = 0.0f64;
        for idx in order {
            if mag(&g[idx]) == 0.0 {
                continue;
            }
            let plus = image_sum(&bump_scene(&scene, block, idx, h)?, &settings)?;
            let minus = image_sum(&bump_scene(&scene, block, idx, -h)?, &settings)?;
            for l in 0..3 {
                let fd = (plus[l] - minus[l]) / (2.0 * h);
                let an = g[idx][l];
                let denom = fd.abs().max(an.abs());
                if denom > 1e-6 {
                    worst = worst.max((fd - an).abs() / denom);
                }
            }
        }
        println!("{:<14} max rel error {:.3e}", block.name(), worst);
        worst_overall = worst_overall.max(worst);
        if worst > 1e-2 {
            any_failed = true;
        }
    }
    if any_failed {
        bail!("gradient check failed (max rel error {worst_overall:.3e} > 1e-2)");
    }
    Ok(())
}

fn cmd_decompose(a: CommonArgs) -> anyhow::Result<()> {
    init_threads(a.threads);
    let (scene, hyper) = load_scene(&a.scene)?;
    let cfg = build_config(hyper, &a.set, a.seed)?;
    let dir = out_dir(&a.out, &a.scene);
    std::fs::create_dir_all(&dir)?;
    let result = run_map(&scene, &cfg.hyper, &cfg.schedule, &cfg.settings, Some(&dir))?;

    let final_dir = dir.join("final");
    std::fs::create_dir_all(&final_dir)?;
    save_scene(&result.scene, &final_dir, Some(serde_json::to_value(&cfg)?))?;
    let csv: String = std::iter::once(TRACE_CSV_HEADER.to_string())
        .chain(result.trace.iter().map(|r| r.csv_row()))
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(dir.join("trace.csv"), csv)?;
    for v in 0..result.scene.cameras.len() {
        let img = render_image(&result.scene, v, &cfg.settings)?;
        write_pfm(&final_dir.join(format!("render_{v}.pfm")), &img)?;
    }
    write_pfm(
        &final_dir.join("illumination.pfm"),
        &result.scene.illumination.to_image(),
    )?;
    write_segmentation_ply(&result.scene, &final_dir.join("segmentation.ply"))?;
    std::fs::write(
        final_dir.join("posterior.json"),
        serde_json::to_string_pretty(&result.final_breakdown)?,
    )?;
    println!(
        "decomposition finished: {} accepted steps, final log posterior {:.6}",
        result.trace.iter().filter(|r| r.accepted).count(),
        result.final_breakdown.total
    );
    Ok(())
}

fn write_segmentation_ply(scene: &Scene, path: &Path) -> anyhow::Result<()> {
    // A fixed palette keeps labels visually distinct.
    const PALETTE: [[f64; 3]; 8] = [
        [0.9, 0.2, 0.2],
        [0.2, 0.7, 0.2],
        [0.2, 0.3, 0.9],
        [0.9, 0.8, 0.1],
        [0.8, 0.2, 0.8],
        [0.1, 0.8, 0.8],
        [0.95, 0.55, 0.1],
        [0.6, 0.6, 0.6],
    ];
    let labels = scene.segmentation.labels(&scene.bases);
    let colors: Vec<[f64; 3]> = labels.iter().map(|&k| PALETTE[k % PALETTE.len()]).collect();
    raydecomp::io::write_ply(
        path,
        &scene.mesh.vertices,
        &scene.mesh.triangles,
        None,
        Some(&colors),
    )?;
    Ok(())
}

fn cmd_metrics(a: MetricsArgs) -> anyhow::Result<()> {
    init_threads(a.threads);
    let (est, _) = load_scene(&a.scene)?;
    let (gt, _) = load_scene(&a.gt)?;
    let k = est.materials.len().max(gt.materials.len());
    let est_labels = est.segmentation.labels(&est.bases);
    let gt_labels = gt.segmentation.labels(&gt.bases);
    let agreement = if est_labels.len() == gt_labels.len() {
        label_agreement(&est_labels, &gt_labels, k)
    } else {
        0.0
    };
    let mut brdf = Vec::new();
    for (e, g) in est.materials.iter().zip(&gt.materials) {
        brdf.push(brdf_log_rmse(e, g, &gt.basis)?);
    }
    let report = MetricsReport {
        version: 1,
        brdf_log_rmse: brdf,
        mean_vertex_distance: mean_vertex_distance(&est.mesh, &gt.mesh),
        illum_log_rmse: illum_log_rmse(&est.illumination, &gt.illumination)?,
        label_agreement: agreement,
    };
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("metrics.json"), &json)?;
    }
    println!("{json}");
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    init_threads(a.threads);
    let kind = FixtureKind::parse(&a.fixture)?;
    let mut value = serde_json::to_value(FixtureConfig::default())?;
    for s in &a.set {
        apply_override(&mut value, s)?;
    }
    let mut cfg: FixtureConfig = serde_json::from_value(value)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let fixture = make_fixture(kind, &cfg)?;
    std::fs::create_dir_all(&a.out)?;
    save_scene(
        &fixture.scene,
        &a.out,
        Some(serde_json::json!({ "fixture": a.fixture, "fixture_config": cfg })),
    )?;
    println!(
        "wrote fixture '{}' ({} triangles, {} views) to {}",
        a.fixture,
        fixture.scene.mesh.triangles.len(),
        fixture.scene.cameras.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_bases(a: CommonArgs) -> anyhow::Result<()> {
    init_threads(a.threads);
    let (scene, _) = load_scene(&a.scene)?;
    let dir = out_dir(&a.out, &a.scene);
    std::fs::create_dir_all(&dir)?;
    let n = scene.bases.n_bases();
    let t_count = scene.mesh.triangles.len();
    let per_triangle: Vec<Vec<f64>> = (0..t_count)
        .map(|t| (0..n).map(|j| scene.bases.per_triangle[(t, j)]).collect())
        .collect();
    let out = serde_json::json!({
        "version": 1,
        "n_bases": n,
        "eigenvalues": scene.bases.eigenvalues,
        "per_triangle": per_triangle,
    });
    std::fs::write(dir.join("bases.json"), serde_json::to_string(&out)?)?;
    println!("wrote {n} bases for {t_count} triangles to {}", dir.display());
    Ok(())
}
