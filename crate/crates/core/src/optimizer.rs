//! MAP estimation: initialization, the four-stage coarse-to-fine schedule,
//! and accept/reject gradient ascent with per-coordinate step scaling.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::brdf::DsbrdfMaterial;
use crate::error::{contract, Result};
use crate::illumination::EnvironmentMap;
use crate::posterior::{log_posterior, HyperParameters, PosteriorBreakdown};
use crate::renderer::RenderSettings;
use crate::scene::{
    block_len, flatten_parameters, unflatten_parameters, Block, ParameterVector, Scene,
};
use crate::segmentation::init_segmentation;

/// Gradient steps per block group within one round.
pub const ALTERNATION_STEPS: usize = 10;
/// Coordinate-descent passes available to geometry refinement when the
/// shading-normal gradient stalls (it cannot see silhouette-driven descent).
const GEOMETRY_COORD_SWEEPS: usize = 4;
const GEOMETRY_COORD_STEP: f64 = 0.08;
const GEOMETRY_COORD_DOUBLINGS: usize = 3;
pub const MAX_STEP_HALVINGS: usize = 20;
pub const DEFAULT_SEGMENTATION_COLOR_WEIGHT: f64 = 2.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    /// Maximum rounds; each round runs ALTERNATION_STEPS steps per group.
    pub max_rounds: usize,
    /// Relative posterior change below which the stage stops.
    pub tolerance: f64,
    /// Base gradient-ascent step.
    pub step_size: f64,
    pub samples_per_pixel: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            max_rounds: 5,
            tolerance: 1e-4,
            step_size: 0.05,
            samples_per_pixel: 4,
        }
    }
}

/// Four stages in fixed order: reflectance/illumination alternation, then
/// +segmentation, +texture, +geometry.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StageSchedule {
    pub stages: Vec<StageConfig>,
    /// Geometry refinement weights switched on in stage 4.
    pub n_geometry_weights: usize,
    pub segmentation_color_weight: f64,
}

impl Default for StageSchedule {
    fn default() -> Self {
        let spp = [4usize, 8, 8, 16];
        StageSchedule {
            stages: spp
                .iter()
                .map(|&s| StageConfig {
                    samples_per_pixel: s,
                    ..Default::default()
                })
                .collect(),
            n_geometry_weights: 16,
            segmentation_color_weight: DEFAULT_SEGMENTATION_COLOR_WEIGHT,
        }
    }
}

impl StageSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(contract("schedule must have exactly 4 stages"));
        }
        for s in &self.stages {
            if !(s.tolerance > 0.0) || !(s.step_size > 0.0) || s.samples_per_pixel == 0 {
                return Err(contract("invalid stage config"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub stage: usize,
    pub round: usize,
    pub group: String,
    pub iteration: usize,
    pub seed: u64,
    /// Negative log posterior of the incumbent, at this row's seed.
    pub e_incumbent: f64,
    /// Negative log posterior of the accepted candidate (equals e_incumbent
    /// when no proposal was accepted).
    pub e_accepted: f64,
    pub halvings: usize,
    pub accepted: bool,
}

pub const TRACE_CSV_HEADER: &str =
    "stage,round,group,iteration,seed,e_incumbent,e_accepted,halvings,accepted";

impl TraceRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.stage,
            self.round,
            self.group,
            self.iteration,
            self.seed,
            self.e_incumbent,
            self.e_accepted,
            self.halvings,
            self.accepted
        )
    }
}

pub struct MapResult {
    pub scene: Scene,
    pub trace: Vec<TraceRow>,
    pub final_breakdown: PosteriorBreakdown,
}

fn group_name(blocks: &[Block]) -> String {
    blocks.iter().map(|b| b.name()).collect::<Vec<_>>().join("+")
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut x = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Negative log posterior, value only.
pub fn energy(
    scene: &Scene,
    settings: &RenderSettings,
    hyper: &HyperParameters,
) -> Result<(f64, PosteriorBreakdown)> {
    let (bd, _) = log_posterior(scene, settings, hyper, &[])?;
    if !bd.total.is_finite() {
        return Err(contract(format!("non-finite posterior: {bd:?}")));
    }
    Ok((-bd.total, bd))
}

// ---------------------------------------------------------------------------
// Initialization

/// Golden-section search over a constant gray environment value, minimizing
/// the negative log likelihood with all-Psi-zero materials. Returns the
/// constant map at the minimizer.
pub fn init_illumination_scale(
    scene: &Scene,
    settings: &RenderSettings,
    hyper: &HyperParameters,
) -> Result<EnvironmentMap> {
    let mean_obs = {
        let mut sum = 0.0;
        let mut n = 0usize;
        for obs in &scene.observations {
            for (p, &m) in obs.image.pixels.iter().zip(&obs.validity_mask) {
                if m {
                    sum += p[0] + p[1] + p[2];
                    n += 3;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    };
    let (w, h) = (scene.illumination.width, scene.illumination.height);
    if mean_obs <= 0.0 {
        log::warn!("all-black observations; illumination scale at search lower bound");
        return Ok(EnvironmentMap::constant(w, h, [1e-6; 3]));
    }
    let mut probe = scene.clone();
    for m in &mut probe.materials {
        m.psi = vec![0.0; scene.basis.n_coeffs];
    }
    // Likelihood only: priors are constant in this 1-D search except the
    // illumination terms, which would bias the scale.
    let hyper_ll = HyperParameters {
        lambda_coefficient: 0.0,
        lambda_hue: 0.0,
        lambda_texture_entropy: 0.0,
        lambda_texture_smoothness: 0.0,
        lambda_illum_sparsity: 0.0,
        lambda_illum_entropy: 0.0,
        lambda_illum_chromaticity: 0.0,
        ..hyper.clone()
    };
    let mut eval = |ln_v: f64| -> Result<f64> {
        probe.illumination = EnvironmentMap::constant(w, h, [ln_v.exp(); 3]);
        Ok(energy(&probe, settings, &hyper_ll)?.0)
    };
    // Bracket three decades either side of the observed mean.
    let center = mean_obs.ln();
    let (mut a, mut b) = (center - 3.0 * std::f64::consts::LN_10, center + 3.0 * std::f64::consts::LN_10);
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = eval(c)?;
    let mut fd = eval(d)?;
    for _ in 0..40 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = eval(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = eval(d)?;
        }
    }
    let best = if fc < fd { c } else { d };
    Ok(EnvironmentMap::constant(w, h, [best.exp(); 3]))
}

/// Psi = 0 for every material, then gradient-ascent fitting of the diffuse
/// lobe colors only (all other coordinates masked out).
pub fn init_reflectance(
    scene: &Scene,
    settings: &RenderSettings,
    hyper: &HyperParameters,
    steps: usize,
) -> Result<Vec<DsbrdfMaterial>> {
    let mut work = scene.clone();
    for m in &mut work.materials {
        m.psi = vec![0.0; scene.basis.n_coeffs];
    }
    let mut stepper = Stepper::new();
    let active = [Block::LobeColors];
    let nl = scene.basis.n_lobes;
    let seed = settings.rng_seed;
    let mut settings = settings.clone();
    settings.rng_seed = mix(seed, 0xd1ff);
    let (mut e_inc, _) = energy(&work, &settings, hyper)?;
    let mut scale = 1.0;
    for _ in 0..steps {
        let (bd, mut grad) = log_posterior(&work, &settings, hyper, &active)?;
        if !bd.total.is_finite() {
            return Err(contract("non-finite posterior in reflectance init"));
        }
        // Only the diffuse lobe's color moves.
        let g = grad.get_mut(Block::LobeColors).expect("active");
        for (k, m) in work.materials.iter().enumerate() {
            for r in 0..nl {
                if r != m.diffuse_lobe_index {
                    for l in 0..3 {
                        g[(k * nl + r) * 3 + l] = 0.0;
                    }
                }
            }
        }
        stepper.absorb(&grad, &work);
        match stepper.descend(&work, &grad, &settings, hyper, scale, e_inc)? {
            Some((next, e_next, halvings)) => {
                work = next;
                e_inc = e_next;
                scale = adapt_scale(scale, halvings);
            }
            None => break,
        }
    }
    Ok(work.materials)
}

// ---------------------------------------------------------------------------
// Gradient stepper

/// Running RMS of gradient magnitudes per coordinate; steps are
/// gradient / sqrt(rms), so coordinates with persistently large gradients
/// move at comparable relative rates. Illumination steps multiplicatively:
/// the block is stored linearly, but stepped in the log domain.
struct Stepper {
    rms: HashMap<Block, f64>,
}

const RMS_DECAY: f64 = 0.9;
const RMS_EPS: f64 = 1e-12;

impl Stepper {
    fn new() -> Self {
        Stepper {
            rms: HashMap::new(),
        }
    }

    /// Log-domain gradient for illumination, native elsewhere.
    fn effective_grad(grad: &ParameterVector, scene: &Scene) -> ParameterVector {
        let mut out = grad.clone();
        if let Some(g) = out.get_mut(Block::Illumination) {
            for (i, texel) in scene.illumination.radiance.iter().enumerate() {
                for l in 0..3 {
                    g[i * 3 + l] *= texel[l];
                }
            }
        }
        out
    }

    /// One RMS scalar per block. Per-coordinate normalization would turn the
    /// proposal into a sign step and let zero-gradient coordinates drift as
    /// fast as informative ones; the block scalar keeps the true gradient
    /// direction and only normalizes the overall magnitude.
    fn absorb(&mut self, grad: &ParameterVector, scene: &Scene) {
        let eff = Self::effective_grad(grad, scene);
        for (b, g) in &eff.blocks {
            let ms = g.iter().map(|x| x * x).sum::<f64>() / g.len().max(1) as f64;
            let acc = self.rms.entry(*b).or_insert(0.0);
            *acc = if *acc == 0.0 {
                ms
            } else {
                RMS_DECAY * *acc + (1.0 - RMS_DECAY) * ms
            };
        }
    }

    fn propose(&self, scene: &Scene, grad: &ParameterVector, step: f64) -> Result<Scene> {
        let eff = Self::effective_grad(grad, scene);
        let active: Vec<Block> = eff.blocks.iter().map(|(b, _)| *b).collect();
        let mut pv = flatten_parameters(scene, &active);
        for ((b, x), (_, g)) in pv.blocks.iter_mut().zip(&eff.blocks) {
            let norm = (self.rms[b] + RMS_EPS).sqrt();
            match b {
                Block::Illumination => {
                    for (xi, gi) in x.iter_mut().zip(g) {
                        *xi *= (step * gi / norm).clamp(-5.0, 5.0).exp();
                    }
                }
                _ => {
                    for (xi, gi) in x.iter_mut().zip(g) {
                        *xi += step * gi / norm;
                    }
                }
            }
            if *b == Block::LobeColors {
                for xi in x.iter_mut() {
                    *xi = xi.max(0.0);
                }
            }
        }
        unflatten_parameters(scene, &pv)
    }

    /// One accepted step or None when MAX_STEP_HALVINGS proposals all fail.
    /// Candidate and incumbent energies share the settings seed, so Monte
    /// Carlo noise cannot fake descent.
    fn descend(
        &self,
        scene: &Scene,
        grad: &ParameterVector,
        settings: &RenderSettings,
        hyper: &HyperParameters,
        scale: f64,
        e_incumbent: f64,
    ) -> Result<Option<(Scene, f64, usize)>> {
        let mut step = scale;
        for halving in 0..=MAX_STEP_HALVINGS {
            let cand = self.propose(scene, grad, step)?;
            let (e_cand, _) = energy(&cand, settings, hyper)?;
            if e_cand <= e_incumbent {
                return Ok(Some((cand, e_cand, halving)));
            }
            step *= 0.5;
        }
        Ok(None)
    }
}

fn adapt_scale(scale: f64, halvings: usize) -> f64 {
    if halvings == 0 {
        (scale * 1.3).min(10.0)
    } else {
        (scale * 0.5f64.powi(halvings as i32)).max(1e-6)
    }
}

// ---------------------------------------------------------------------------
// MAP driver

fn stage_groups(stage: usize) -> Vec<Vec<Block>> {
    let mut groups = vec![vec![Block::Psi, Block::LobeColors], vec![Block::Illumination]];
    if stage >= 1 {
        groups.push(vec![Block::Segmentation]);
    }
    if stage >= 2 {
        groups.push(vec![Block::Texture]);
    }
    if stage >= 3 {
        groups.push(vec![Block::Geometry]);
    }
    groups
}

/// Majority material per vertex seeds the texture with its region's diffuse
/// color, so switching the texture on does not jump the rendered image.
fn seed_texture_from_materials(scene: &mut Scene) {
    let mut colors = vec![[0.0f64; 3]; scene.mesh.vertices.len()];
    let mut counts = vec![0usize; scene.mesh.vertices.len()];
    for (t, tri) in scene.mesh.triangles.iter().enumerate() {
        let m = &scene.materials[scene.material_index_at(t)];
        let c = m.lobe_colors[m.diffuse_lobe_index];
        for &v in tri {
            for l in 0..3 {
                colors[v][l] += c[l];
            }
            counts[v] += 1;
        }
    }
    for (c, &n) in colors.iter_mut().zip(&counts) {
        if n > 0 {
            for l in c.iter_mut() {
                *l /= n as f64;
            }
        }
    }
    scene.texture.per_vertex_rgb = colors;
    scene.texture.enabled = true;
}

/// Full MAP estimation. Deterministic for fixed inputs and seed. Writes a
/// checkpoint scene per stage boundary when `out_dir` is given.
pub fn run_map(
    scene: &Scene,
    hyper: &HyperParameters,
    schedule: &StageSchedule,
    base_settings: &RenderSettings,
    out_dir: Option<&Path>,
) -> Result<MapResult> {
    schedule.validate()?;
    hyper.validate()?;
    base_settings.validate()?;
    let mut work = scene.clone();
    let mut trace: Vec<TraceRow> = Vec::new();

    // Init: illumination scale, then segmentation clustering, then diffuse
    // colors; Psi starts at zero.
    let mut init_settings = base_settings.clone();
    init_settings.samples_per_pixel = schedule.stages[0].samples_per_pixel;
    work.illumination = init_illumination_scale(&work, &init_settings, hyper)?;
    let seg = init_segmentation(
        &work.mesh,
        &work.bases,
        work.materials.len(),
        schedule.segmentation_color_weight,
        work.segmentation.tau,
        base_settings.rng_seed,
    )?;
    work.segmentation = seg.segmentation;
    work.materials = init_reflectance(&work, &init_settings, hyper, ALTERNATION_STEPS)?;
    work.texture.enabled = false;
    work.geometry_weights = Vec::new();

    for (stage, cfg) in schedule.stages.iter().enumerate() {
        if stage == 2 && !work.texture.enabled {
            seed_texture_from_materials(&mut work);
        }
        if stage == 3 && work.geometry_weights.is_empty() {
            let n = schedule.n_geometry_weights.min(work.bases.n_bases());
            work.geometry_weights = vec![0.0; n];
        }

        let mut settings = base_settings.clone();
        settings.samples_per_pixel = cfg.samples_per_pixel;
        let mut stepper = Stepper::new();
        let mut scales: HashMap<String, f64> = HashMap::new();
        let mut prev_round_energy: Option<f64> = None;

        for round in 0..cfg.max_rounds {
            let round_seed = mix(base_settings.rng_seed, (stage as u64) << 32 | round as u64);
            settings.rng_seed = round_seed;
            for blocks in stage_groups(stage) {
                if blocks.iter().any(|b| block_len(&work, *b) == 0) {
                    continue;
                }
                let name = group_name(&blocks);
                settings.use_soft_segmentation = blocks.contains(&Block::Segmentation);
                let (mut e_inc, _) = energy(&work, &settings, hyper)?;
                let mut scale = *scales.get(&name).unwrap_or(&cfg.step_size);
                for iteration in 0..ALTERNATION_STEPS {
                    let (bd, grad) = log_posterior(&work, &settings, hyper, &blocks)?;
                    if !bd.total.is_finite() {
                        return Err(contract(format!(
                            "non-finite posterior in stage {stage} group {name}: {bd:?}"
                        )));
                    }
                    stepper.absorb(&grad, &work);
                    let e_before = e_inc;
                    let outcome =
                        stepper.descend(&work, &grad, &settings, hyper, scale, e_inc)?;
                    let (accepted, e_acc, halvings) = match outcome {
                        Some((next, e_next, h)) => {
                            work = next;
                            e_inc = e_next;
                            scale = adapt_scale(scale, h);
                            (true, e_next, h)
                        }
                        None => (false, e_inc, MAX_STEP_HALVINGS),
                    };
                    trace.push(TraceRow {
                        stage,
                        round,
                        group: name.clone(),
                        iteration,
                        seed: round_seed,
                        e_incumbent: e_before,
                        e_accepted: e_acc,
                        halvings,
                        accepted,
                    });
                    if !accepted {
                        break;
                    }
                }
                scales.insert(name, scale);
                settings.use_soft_segmentation = false;
            }
            // Convergence at round boundaries, on a fixed probe seed.
            let mut probe = settings.clone();
            probe.rng_seed = mix(base_settings.rng_seed, 0xc0ffee ^ stage as u64);
            let (e_round, _) = energy(&work, &probe, hyper)?;
            if let Some(prev) = prev_round_energy {
                if (prev - e_round).abs() <= cfg.tolerance * prev.abs().max(1.0) {
                    break;
                }
            }
            prev_round_energy = Some(e_round);
        }

        if let Some(dir) = out_dir {
            let stage_dir = dir.join(format!("stage_{stage}"));
            std::fs::create_dir_all(&stage_dir)
                .map_err(|e| crate::error::Error::Io(e.to_string()))?;
            crate::scene::save_scene(&work, &stage_dir, None)?;
            let csv: String = std::iter::once(TRACE_CSV_HEADER.to_string())
                .chain(trace.iter().map(|r| r.csv_row()))
                .collect::<Vec<_>>()
                .join("\n");
            std::fs::write(stage_dir.join("trace.csv"), csv)
                .map_err(|e| crate::error::Error::Io(e.to_string()))?;
        }
    }

    let mut final_settings = base_settings.clone();
    final_settings.samples_per_pixel = schedule.stages[3].samples_per_pixel;
    final_settings.rng_seed = mix(base_settings.rng_seed, 0xf17a1);
    let (_, final_breakdown) = energy(&work, &final_settings, hyper)?;
    Ok(MapResult {
        scene: work,
        trace,
        final_breakdown,
    })
}

/// Geometry-only refinement with the stage machinery: rounds of accepted
/// gradient steps on the refinement weights alone.
pub fn refine_geometry(
    scene: &Scene,
    hyper: &HyperParameters,
    base_settings: &RenderSettings,
    n_weights: usize,
    rounds: usize,
    step_size: f64,
) -> Result<(Scene, Vec<TraceRow>)> {
    let mut work = scene.clone();
    let n = n_weights.min(work.bases.n_bases());
    if work.geometry_weights.len() != n {
        work.geometry_weights = vec![0.0; n];
    }
    let mut settings = base_settings.clone();
    let mut stepper = Stepper::new();
    let mut scale = step_size;
    let mut trace = Vec::new();
    let blocks = [Block::Geometry];
    let mut sweeps_left = GEOMETRY_COORD_SWEEPS;
    for round in 0..rounds {
        settings.rng_seed = mix(base_settings.rng_seed, 0x9e0 ^ (round as u64));
        let (mut e_inc, _) = energy(&work, &settings, hyper)?;
        for iteration in 0..ALTERNATION_STEPS {
            let (bd, grad) = log_posterior(&work, &settings, hyper, &blocks)?;
            if !bd.total.is_finite() {
                return Err(contract("non-finite posterior in geometry refinement"));
            }
            stepper.absorb(&grad, &work);
            let e_before = e_inc;
            let outcome = stepper.descend(&work, &grad, &settings, hyper, scale, e_inc)?;
            let (accepted, e_acc, halvings) = match outcome {
                Some((next, e_next, h)) => {
                    work = next;
                    e_inc = e_next;
                    scale = adapt_scale(scale, h);
                    (true, e_next, h)
                }
                None => (false, e_inc, MAX_STEP_HALVINGS),
            };
            trace.push(TraceRow {
                stage: 3,
                round,
                group: "geometry".to_string(),
                iteration,
                seed: settings.rng_seed,
                e_incumbent: e_before,
                e_accepted: e_acc,
                halvings,
                accepted,
            });
            if !accepted {
                // The gradient holds visibility fixed, so descent directions
                // whose energy gain comes through the silhouette are invisible
                // to it. When it stalls, probe coordinates directly: those
                // energy evaluations see visibility changes.
                if sweeps_left > 0 {
                    sweeps_left -= 1;
                    e_inc = coordinate_sweep(
                        &mut work,
                        &settings,
                        hyper,
                        e_inc,
                        round,
                        &mut trace,
                    )?;
                } else {
                    break;
                }
            }
        }
    }
    Ok((work, trace))
}

/// One greedy coordinate-descent pass over the geometry weights. Each
/// coordinate tries +-GEOMETRY_COORD_STEP, doubling while the energy at the
/// shared seed keeps dropping. Returns the incumbent energy after the pass.
fn coordinate_sweep(
    work: &mut Scene,
    settings: &RenderSettings,
    hyper: &HyperParameters,
    mut e_inc: f64,
    round: usize,
    trace: &mut Vec<TraceRow>,
) -> Result<f64> {
    let n = work.geometry_weights.len();
    for j in 0..n {
        let mut moved = false;
        for dir in [1.0, -1.0] {
            if moved {
                break;
            }
            let mut step = dir * GEOMETRY_COORD_STEP;
            for _ in 0..=GEOMETRY_COORD_DOUBLINGS {
                let mut cand = work.clone();
                cand.geometry_weights[j] += step;
                cand.mesh = cand
                    .mesh
                    .refine_vertices(&cand.bases, &cand.geometry_weights)?;
                let (e_cand, _) = energy(&cand, settings, hyper)?;
                if e_cand <= e_inc {
                    trace.push(TraceRow {
                        stage: 3,
                        round,
                        group: "geometry-sweep".to_string(),
                        iteration: j,
                        seed: settings.rng_seed,
                        e_incumbent: e_inc,
                        e_accepted: e_cand,
                        halvings: 0,
                        accepted: true,
                    });
                    *work = cand;
                    e_inc = e_cand;
                    moved = true;
                    step *= 2.0;
                } else {
                    break;
                }
            }
        }
    }
    Ok(e_inc)
}
