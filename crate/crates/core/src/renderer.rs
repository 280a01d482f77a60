//! Forward path tracing of predicted pixel irradiance and the matching
//! family of path-space gradient estimators.
//!
//! Radiance and gradients share one tracing routine; gradient bookkeeping
//! never touches the RNG, so the radiance estimate of a gradient pass is
//! bitwise identical to a plain render under the same seed.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::brdf::{
    eval_brdf, grad_brdf, grad_brdf_costheta_h, half_angles, pdf_brdf, sample_brdf,
};
use crate::error::{contract, Result};
use crate::io::HdrImage;
use crate::mesh::{Hit, Ray};
use crate::scene::{block_len, Block, Camera, Scene};
use crate::texture::texture_at;
use crate::{rgb_add, rgb_mul, rgb_scale, Rgb, Vec3};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    pub samples_per_pixel: usize,
    pub max_bounces: usize,
    /// Light samples per bounce for the direct integral.
    pub direct_light_samples: usize,
    pub rng_seed: u64,
    /// Blend materials by softmax weights instead of the hard argmax.
    pub use_soft_segmentation: bool,
    /// Mixture weight of the specular half of the BRDF proposal.
    pub specular_weight: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            samples_per_pixel: 16,
            max_bounces: 4,
            direct_light_samples: 1,
            rng_seed: 0,
            use_soft_segmentation: false,
            specular_weight: crate::brdf::DEFAULT_SPECULAR_WEIGHT,
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_pixel == 0 || self.direct_light_samples == 0 {
            return Err(contract("sample counts must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.specular_weight) {
            return Err(contract("specular_weight must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Samples whose radiance came back non-finite and were dropped.
pub static NAN_DISCARD_COUNT: AtomicU64 = AtomicU64::new(0);

/// Balance heuristic: weights for (light, brdf) proposals; sums to 1 exactly.
pub fn balance(pdf_light: f64, pdf_brdf: f64) -> (f64, f64) {
    let total = pdf_light + pdf_brdf;
    if total <= 0.0 {
        return (0.0, 1.0);
    }
    let wl = pdf_light / total;
    (wl, 1.0 - wl)
}

// ---------------------------------------------------------------------------
// Gradient containers

/// Sparse per-pixel gradient: d(pixel radiance per channel)/d(scalar param),
/// keyed by (block, flat index within the block's scene layout).
#[derive(Debug, Clone, Default)]
pub struct PixelGrad {
    pub deposits: HashMap<(Block, usize), Rgb>,
}

impl PixelGrad {
    fn add(&mut self, b: Block, idx: usize, v: Rgb) {
        if v == [0.0, 0.0, 0.0] {
            return;
        }
        let e = self.deposits.entry((b, idx)).or_insert([0.0; 3]);
        for l in 0..3 {
            e[l] += v[l];
        }
    }

    fn scale(&mut self, s: f64) {
        for v in self.deposits.values_mut() {
            for l in 0..3 {
                v[l] *= s;
            }
        }
    }
}

/// Dense per-block accumulators of d(summed radiance)/d(param), one Rgb per
/// scalar parameter, aligned with the scene's flat block layout.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub blocks: Vec<(Block, Vec<Rgb>)>,
}

impl GradientBundle {
    pub fn new(scene: &Scene, active: &[Block]) -> Self {
        let blocks = crate::scene::ALL_BLOCKS
            .iter()
            .filter(|b| active.contains(b))
            .map(|&b| (b, vec![[0.0; 3]; block_len(scene, b)]))
            .collect();
        GradientBundle { blocks }
    }

    pub fn get(&self, b: Block) -> Option<&[Rgb]> {
        self.blocks.iter().find(|(k, _)| *k == b).map(|(_, v)| v.as_slice())
    }

    pub fn add_pixel(&mut self, pg: &PixelGrad) {
        for (&(b, idx), v) in &pg.deposits {
            if let Some((_, slot)) = self.blocks.iter_mut().find(|(k, _)| *k == b) {
                for l in 0..3 {
                    slot[idx][l] += v[l];
                }
            }
        }
    }

    pub fn merge(&mut self, other: &GradientBundle) {
        for ((ba, va), (bb, vb)) in self.blocks.iter_mut().zip(&other.blocks) {
            debug_assert_eq!(*ba, *bb);
            for (a, b) in va.iter_mut().zip(vb) {
                for l in 0..3 {
                    a[l] += b[l];
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks
            .iter()
            .all(|(_, v)| v.iter().flatten().all(|x| x.is_finite()))
    }
}

/// Precomputed context for gradient passes.
pub struct GradCtx {
    /// d(vertex normal)/d(w_j), per vertex; present when geometry is active.
    normal_jac: Option<Vec<Vec<Vec3>>>,
    j_count: usize,
}

impl GradCtx {
    pub fn new(scene: &Scene, active: &[Block]) -> Self {
        let j_count = scene.geometry_weights.len();
        let normal_jac = if active.contains(&Block::Geometry) && j_count > 0 {
            Some(scene.mesh.vertex_normal_jacobian(&scene.bases, j_count))
        } else {
            None
        };
        GradCtx { normal_jac, j_count }
    }
}

/// Per-path log-derivative sums (the running Sigma of the gradient recursion)
/// and per-term local values share this shape.
#[derive(Debug, Clone)]
struct DlogF {
    /// Per (material, coefficient): d log f per channel.
    psi: Vec<Rgb>,
    /// Per (material, lobe): d log f_lambda / d c_{r,lambda} (diagonal).
    lobe: Vec<Rgb>,
    /// Sparse per vertex: d log f_lambda / d tex_{v,lambda} (diagonal).
    tex: Vec<(usize, Rgb)>,
    /// Per (material, basis) soft-segmentation coefficient.
    seg: Vec<Rgb>,
    /// Per geometry weight: d log(f * cos) per channel.
    geom: Vec<Rgb>,
}

impl DlogF {
    fn zeros(scene: &Scene, j_count: usize) -> Self {
        let k = scene.materials.len();
        DlogF {
            psi: vec![[0.0; 3]; k * scene.basis.n_coeffs],
            lobe: vec![[0.0; 3]; k * scene.basis.n_lobes],
            tex: Vec::new(),
            seg: vec![[0.0; 3]; scene.segmentation.n_materials() * scene.segmentation.n_bases()],
            geom: vec![[0.0; 3]; j_count],
        }
    }

    fn add(&mut self, o: &DlogF) {
        for (a, b) in self.psi.iter_mut().zip(&o.psi) {
            for l in 0..3 {
                a[l] += b[l];
            }
        }
        for (a, b) in self.lobe.iter_mut().zip(&o.lobe) {
            for l in 0..3 {
                a[l] += b[l];
            }
        }
        self.tex.extend(o.tex.iter().copied());
        for (a, b) in self.seg.iter_mut().zip(&o.seg) {
            for l in 0..3 {
                a[l] += b[l];
            }
        }
        for (a, b) in self.geom.iter_mut().zip(&o.geom) {
            for l in 0..3 {
                a[l] += b[l];
            }
        }
    }
}

/// Writes term (x) (sigma + local) into the pixel gradient for the active
/// reflectance/geometry blocks. Diagonal parameters (lobe colors, texture)
/// expand to their per-channel flat indices.
#[allow(clippy::too_many_arguments)]
fn deposit_term(
    active: &[Block],
    term: Rgb,
    sigma: &DlogF,
    local: Option<&DlogF>,
    pg: &mut PixelGrad,
) {
    if term == [0.0, 0.0, 0.0] {
        return;
    }
    let combined = |s: &Rgb, l: Option<&Rgb>| -> Rgb {
        let mut out = *s;
        if let Some(l) = l {
            for i in 0..3 {
                out[i] += l[i];
            }
        }
        out
    };
    if active.contains(&Block::Psi) {
        for i in 0..sigma.psi.len() {
            let v = combined(&sigma.psi[i], local.map(|l| &l.psi[i]));
            pg.add(Block::Psi, i, rgb_mul(term, v));
        }
    }
    if active.contains(&Block::LobeColors) {
        for i in 0..sigma.lobe.len() {
            let v = combined(&sigma.lobe[i], local.map(|l| &l.lobe[i]));
            for lam in 0..3 {
                if v[lam] != 0.0 {
                    let mut d = [0.0; 3];
                    d[lam] = term[lam] * v[lam];
                    pg.add(Block::LobeColors, i * 3 + lam, d);
                }
            }
        }
    }
    if active.contains(&Block::Texture) {
        let mut emit = |entries: &[(usize, Rgb)]| {
            for &(v_idx, v) in entries {
                for lam in 0..3 {
                    if v[lam] != 0.0 {
                        let mut d = [0.0; 3];
                        d[lam] = term[lam] * v[lam];
                        pg.add(Block::Texture, v_idx * 3 + lam, d);
                    }
                }
            }
        };
        emit(&sigma.tex);
        if let Some(l) = local {
            emit(&l.tex);
        }
    }
    if active.contains(&Block::Segmentation) {
        for i in 0..sigma.seg.len() {
            let v = combined(&sigma.seg[i], local.map(|l| &l.seg[i]));
            pg.add(Block::Segmentation, i, rgb_mul(term, v));
        }
    }
    if active.contains(&Block::Geometry) {
        for i in 0..sigma.geom.len() {
            let v = combined(&sigma.geom[i], local.map(|l| &l.geom[i]));
            pg.add(Block::Geometry, i, rgb_mul(term, v));
        }
    }
}

// ---------------------------------------------------------------------------
// Surface shading

/// Everything fixed about one surface interaction.
struct Surface {
    hit: Hit,
    /// Soft or one-hot material weights.
    weights: Vec<f64>,
    /// Diffuse override color when the texture is enabled.
    tex_color: Option<Rgb>,
}

fn surface_at(scene: &Scene, settings: &RenderSettings, hit: Hit) -> Surface {
    let k = scene.materials.len();
    let weights = if settings.use_soft_segmentation && k > 1 {
        scene.segmentation.soft_weights(&scene.bases, hit.triangle)
    } else {
        let mut w = vec![0.0; k];
        w[scene.material_index_at(hit.triangle)] = 1.0;
        w
    };
    let tex_color = if scene.texture.enabled {
        Some(texture_at(&scene.texture, &scene.mesh, &hit, [0.0; 3]))
    } else {
        None
    };
    Surface { hit, weights, tex_color }
}

/// Blended BRDF value and the per-material values behind it.
fn eval_surface_f(
    scene: &Scene,
    surf: &Surface,
    theta_d: f64,
    theta_h: f64,
) -> Result<(Rgb, Vec<Rgb>)> {
    let mut total = [0.0f64; 3];
    let mut per_mat = vec![[0.0f64; 3]; scene.materials.len()];
    for (k, mat) in scene.materials.iter().enumerate() {
        if surf.weights[k] == 0.0 {
            continue;
        }
        let f = eval_brdf(mat, &scene.basis, theta_d, theta_h, surf.tex_color)?;
        per_mat[k] = f;
        for l in 0..3 {
            total[l] += surf.weights[k] * f[l];
        }
    }
    Ok((total, per_mat))
}

/// d n_s / d w_j at a hit: chain through the normalized barycentric
/// interpolation of vertex normals.
fn shading_normal_derivs(scene: &Scene, ctx: &GradCtx, hit: &Hit) -> Vec<Vec3> {
    let Some(jac) = &ctx.normal_jac else {
        return Vec::new();
    };
    let [ia, ib, ic] = scene.mesh.triangles[hit.triangle];
    let m = hit.bary[0] * scene.mesh.vertex_normals[ia]
        + hit.bary[1] * scene.mesh.vertex_normals[ib]
        + hit.bary[2] * scene.mesh.vertex_normals[ic];
    let len = m.norm();
    if len < 1e-30 {
        return vec![Vec3::zeros(); ctx.j_count];
    }
    let n = m / len;
    (0..ctx.j_count)
        .map(|j| {
            let dm = hit.bary[0] * jac[ia][j] + hit.bary[1] * jac[ib][j] + hit.bary[2] * jac[ic][j];
            (dm - n * n.dot(&dm)) / len
        })
        .collect()
}

/// Local log-derivatives of one term f(omega_i, omega_o) * cos at a surface.
#[allow(clippy::too_many_arguments)]
fn local_dlogf(
    scene: &Scene,
    active: &[Block],
    ctx: &GradCtx,
    surf: &Surface,
    dn_dw: &[Vec3],
    omega_i: &Vec3,
    omega_o: &Vec3,
    f_total: &Rgb,
    per_mat: &[Rgb],
    theta_d: f64,
    theta_h: f64,
    cos_i: f64,
) -> Result<DlogF> {
    let mut out = DlogF::zeros(scene, ctx.j_count);
    let inv_f = [
        if f_total[0] > 0.0 { 1.0 / f_total[0] } else { 0.0 },
        if f_total[1] > 0.0 { 1.0 / f_total[1] } else { 0.0 },
        if f_total[2] > 0.0 { 1.0 / f_total[2] } else { 0.0 },
    ];
    let n_coeffs = scene.basis.n_coeffs;
    let n_lobes = scene.basis.n_lobes;
    let need_psi = active.contains(&Block::Psi);
    let need_lobe = active.contains(&Block::LobeColors);
    let need_tex = active.contains(&Block::Texture) && scene.texture.enabled;
    for (k, mat) in scene.materials.iter().enumerate() {
        if !need_psi && !need_lobe && !need_tex {
            break;
        }
        let wk = surf.weights[k];
        if wk == 0.0 {
            continue;
        }
        let g = grad_brdf(mat, &scene.basis, theta_d, theta_h, surf.tex_color)?;
        if need_psi {
            for b in 0..n_coeffs {
                for l in 0..3 {
                    out.psi[k * n_coeffs + b][l] = wk * g.d_psi[b][l] * inv_f[l];
                }
            }
        }
        if need_lobe {
            for r in 0..n_lobes {
                if surf.tex_color.is_some() && r == mat.diffuse_lobe_index {
                    continue; // texture owns this lobe's color
                }
                for l in 0..3 {
                    out.lobe[k * n_lobes + r][l] = wk * g.d_lobe_color[r] * inv_f[l];
                }
            }
        }
        if need_tex {
            // d f / d tex = sum_k w_k * lobe_factor(diffuse lobe of k).
            let e = g.d_lobe_color[mat.diffuse_lobe_index];
            let tri = scene.mesh.triangles[surf.hit.triangle];
            for (slot, &v) in tri.iter().enumerate() {
                let b = surf.hit.bary[slot];
                let d = [
                    wk * e * b * inv_f[0],
                    wk * e * b * inv_f[1],
                    wk * e * b * inv_f[2],
                ];
                if d != [0.0, 0.0, 0.0] {
                    out.tex.push((v, d));
                }
            }
        }
    }
    if active.contains(&Block::Segmentation)
        && scene.materials.len() > 1
        && !surf.weights.iter().all(|&w| w == 0.0)
    {
        // Only the soft relaxation is differentiable.
        if surf.weights.iter().filter(|&&w| w > 0.0).count() > 1 {
            let dl_dw: Vec<Rgb> = per_mat.to_vec();
            let kk = scene.segmentation.n_materials();
            let nn = scene.segmentation.n_bases();
            let mut tmp = vec![vec![[0.0f64; 3]; nn]; kk];
            scene
                .segmentation
                .accumulate_soft_grad(&scene.bases, surf.hit.triangle, &dl_dw, &mut tmp);
            for k in 0..kk {
                for n in 0..nn {
                    for l in 0..3 {
                        out.seg[k * nn + n][l] = tmp[k][n][l] * inv_f[l];
                    }
                }
            }
        }
    }
    if active.contains(&Block::Geometry) && !dn_dw.is_empty() {
        // f depends on n_s through u = cos theta_h = h . n_s; cos_i = w_i . n_s.
        let mut df_du = [0.0f64; 3];
        for (k, mat) in scene.materials.iter().enumerate() {
            let wk = surf.weights[k];
            if wk == 0.0 {
                continue;
            }
            let d = grad_brdf_costheta_h(mat, &scene.basis, theta_d, theta_h, surf.tex_color)?;
            for l in 0..3 {
                df_du[l] += wk * d[l];
            }
        }
        let n_s = surf.hit.shading_normal;
        let h = half_vector(omega_i, omega_o, &n_s);
        for (j, dn) in dn_dw.iter().enumerate() {
            let du = h.dot(dn);
            let dcos = omega_i.dot(dn);
            for l in 0..3 {
                let mut v = df_du[l] * du * inv_f[l];
                if cos_i > 0.0 {
                    v += dcos / cos_i;
                }
                out.geom[j][l] = v;
            }
        }
    }
    Ok(out)
}

/// Half vector of (omega_i, omega_o); falls back to the normal when the pair
/// is degenerate.
fn half_vector(omega_i: &Vec3, omega_o: &Vec3, n: &Vec3) -> Vec3 {
    let h = omega_i + omega_o;
    let len = h.norm();
    if len < 1e-12 {
        *n
    } else {
        h / len
    }
}

// ---------------------------------------------------------------------------
// Path tracing

struct GradState<'a> {
    active: &'a [Block],
    ctx: &'a GradCtx,
    pg: &'a mut PixelGrad,
}

/// Traces one eye-path sample. When `grad` is present, gradient deposits are
/// written alongside; the returned radiance is identical either way.
fn trace_sample(
    scene: &Scene,
    ray0: &Ray,
    settings: &RenderSettings,
    rng: &mut ChaCha8Rng,
    mut grad: Option<&mut GradState>,
) -> Result<Rgb> {
    let env = &scene.illumination;
    let j_count = grad.as_ref().map_or(0, |g| g.ctx.j_count);
    let mut out = [0.0f64; 3];
    let mut throughput = [1.0f64; 3];
    let mut sigma = grad.as_ref().map(|_| DlogF::zeros(scene, j_count));
    let mut ray = ray0.clone();
    let mut hit = match scene.mesh.intersect(&ray) {
        Some(h) => h,
        None => {
            let v = env.lookup(&ray.direction);
            if let Some(g) = grad.as_mut() {
                if g.active.contains(&Block::Illumination) {
                    for (idx, w) in env.lookup_weights(&ray.direction) {
                        for lam in 0..3 {
                            let mut d = [0.0; 3];
                            d[lam] = w;
                            g.pg.add(Block::Illumination, idx * 3 + lam, d);
                        }
                    }
                }
            }
            return Ok(v);
        }
    };
    for _bounce in 0..=settings.max_bounces {
        let omega_o = -ray.direction;
        if hit.geometric_normal.dot(&omega_o) <= 0.0 {
            break; // backface: terminate with zero
        }
        let n_s = hit.shading_normal;
        let n_g = hit.geometric_normal;
        let surf = surface_at(scene, settings, hit.clone());
        let dn_dw = match grad.as_ref() {
            Some(g) if g.active.contains(&Block::Geometry) => {
                shading_normal_derivs(scene, g.ctx, &hit)
            }
            _ => Vec::new(),
        };

        // Direct lighting: N light samples, MIS against the BRDF proposal.
        let n_light = settings.direct_light_samples;
        for _ in 0..n_light {
            let (dir, pdf_l) = env.sample_light(rng);
            let cos_g = dir.dot(&n_g);
            let cos_i = dir.dot(&n_s).max(0.0);
            if cos_g <= 0.0 || cos_i <= 0.0 || pdf_l <= 0.0 {
                continue;
            }
            let shadow = Ray { origin: hit.position, direction: dir };
            if scene.mesh.occluded(&shadow, f64::INFINITY) {
                continue;
            }
            let (theta_d, theta_h) = half_angles(&dir, &omega_o, &n_s);
            let (f, per_mat) = eval_surface_f(scene, &surf, theta_d, theta_h)?;
            let pdf_b =
                pdf_brdf(&scene.basis, &dir, &omega_o, &n_g, settings.specular_weight)?;
            let (w_l, _) = balance(pdf_l, pdf_b);
            let radiance = env.lookup(&dir);
            let scale = w_l * cos_i / (pdf_l * n_light as f64);
            let term = rgb_mul(throughput, rgb_scale(rgb_mul(f, radiance), scale));
            for l in 0..3 {
                out[l] += term[l];
            }
            if let Some(g) = grad.as_mut() {
                let local = local_dlogf(
                    scene, g.active, g.ctx, &surf, &dn_dw, &dir, &omega_o, &f, &per_mat,
                    theta_d, theta_h, cos_i,
                )?;
                deposit_term(g.active, term, sigma.as_ref().unwrap(), Some(&local), g.pg);
                if g.active.contains(&Block::Illumination) {
                    // d term / d L_texel (diagonal), with the path's Sigma
                    // not applying (earlier factors are L-independent).
                    let base = rgb_scale(rgb_mul(throughput, f), scale);
                    for (idx, w) in env.lookup_weights(&dir) {
                        for lam in 0..3 {
                            let mut d = [0.0; 3];
                            d[lam] = base[lam] * w;
                            g.pg.add(Block::Illumination, idx * 3 + lam, d);
                        }
                    }
                }
            }
        }

        // BRDF half of the direct estimate doubles as the continuation sample.
        let (omega_i, pdf_b) =
            sample_brdf(&scene.basis, &omega_o, &n_g, settings.specular_weight, rng)?;
        let cos_i = omega_i.dot(&n_s).max(0.0);
        let (theta_d, theta_h) = half_angles(&omega_i, &omega_o, &n_s);
        let (f, per_mat) = eval_surface_f(scene, &surf, theta_d, theta_h)?;
        if pdf_b <= 0.0 || cos_i <= 0.0 {
            break;
        }
        let next_ray = Ray { origin: hit.position, direction: omega_i };
        let next_hit = scene.mesh.intersect(&next_ray);
        let local = match grad.as_ref() {
            Some(g) => Some(local_dlogf(
                scene, g.active, g.ctx, &surf, &dn_dw, &omega_i, &omega_o, &f, &per_mat,
                theta_d, theta_h, cos_i,
            )?),
            None => None,
        };
        match next_hit {
            None => {
                // Environment visible along the BRDF sample: MIS direct term.
                let pdf_l = env.pdf_light(&omega_i);
                let (_, w_b) = balance(pdf_l, pdf_b);
                let radiance = env.lookup(&omega_i);
                let scale = w_b * cos_i / pdf_b;
                let term = rgb_mul(throughput, rgb_scale(rgb_mul(f, radiance), scale));
                for l in 0..3 {
                    out[l] += term[l];
                }
                if let Some(g) = grad.as_mut() {
                    deposit_term(
                        g.active,
                        term,
                        sigma.as_ref().unwrap(),
                        local.as_ref(),
                        g.pg,
                    );
                    if g.active.contains(&Block::Illumination) {
                        let base = rgb_scale(rgb_mul(throughput, f), scale);
                        for (idx, w) in env.lookup_weights(&omega_i) {
                            for lam in 0..3 {
                                let mut d = [0.0; 3];
                                d[lam] = base[lam] * w;
                                g.pg.add(Block::Illumination, idx * 3 + lam, d);
                            }
                        }
                    }
                }
                break;
            }
            Some(nh) => {
                if _bounce == settings.max_bounces {
                    break;
                }
                let t = rgb_scale(f, cos_i / pdf_b);
                throughput = rgb_mul(throughput, t);
                if let (Some(s), Some(l)) = (sigma.as_mut(), local.as_ref()) {
                    s.add(l);
                }
                ray = next_ray;
                hit = nh;
                // A zero throughput still traces on: both render and gradient
                // passes must consume the same RNG stream.
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Pixel and image entry points

fn mix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

pub fn pixel_rng(seed: u64, camera_index: usize, px: usize, py: usize) -> ChaCha8Rng {
    let h = mix64(
        seed ^ mix64(camera_index as u64 ^ mix64((px as u64) << 32 | py as u64)),
    );
    ChaCha8Rng::seed_from_u64(h)
}

pub fn render_pixel(
    scene: &Scene,
    camera: &Camera,
    px: usize,
    py: usize,
    settings: &RenderSettings,
    rng: &mut ChaCha8Rng,
) -> Result<Rgb> {
    settings.validate()?;
    let mut sum = [0.0f64; 3];
    for _ in 0..settings.samples_per_pixel {
        let jx: f64 = rng.gen();
        let jy: f64 = rng.gen();
        let ray = camera.primary_ray(px, py, jx, jy);
        let v = trace_sample(scene, &ray, settings, rng, None)?;
        if v.iter().all(|x| x.is_finite()) {
            sum = rgb_add(sum, v);
        } else {
            NAN_DISCARD_COUNT.fetch_add(1, Ordering::Relaxed);
        }
    }
    Ok(rgb_scale(sum, 1.0 / settings.samples_per_pixel as f64))
}

/// Radiance plus sparse per-pixel gradient deposits for the active blocks.
/// Bitwise-identical radiance to `render_pixel` under the same RNG state.
#[allow(clippy::too_many_arguments)]
pub fn grad_pixel(
    scene: &Scene,
    camera: &Camera,
    px: usize,
    py: usize,
    settings: &RenderSettings,
    active: &[Block],
    ctx: &GradCtx,
    rng: &mut ChaCha8Rng,
) -> Result<(Rgb, PixelGrad)> {
    settings.validate()?;
    let mut sum = [0.0f64; 3];
    let mut pg = PixelGrad::default();
    for _ in 0..settings.samples_per_pixel {
        let jx: f64 = rng.gen();
        let jy: f64 = rng.gen();
        let ray = camera.primary_ray(px, py, jx, jy);
        let mut sample_pg = PixelGrad::default();
        let mut gs = GradState { active, ctx, pg: &mut sample_pg };
        let v = trace_sample(scene, &ray, settings, rng, Some(&mut gs))?;
        if v.iter().all(|x| x.is_finite()) {
            sum = rgb_add(sum, v);
            for (&(b, idx), val) in &sample_pg.deposits {
                pg.add(b, idx, *val);
            }
        } else {
            NAN_DISCARD_COUNT.fetch_add(1, Ordering::Relaxed);
        }
    }
    let inv = 1.0 / settings.samples_per_pixel as f64;
    pg.scale(inv);
    Ok((rgb_scale(sum, inv), pg))
}

/// Deterministic pixel-parallel render; per-pixel RNG streams make the result
/// independent of thread count.
pub fn render_image(
    scene: &Scene,
    camera_index: usize,
    settings: &RenderSettings,
) -> Result<HdrImage> {
    let camera = scene
        .cameras
        .get(camera_index)
        .ok_or_else(|| contract("camera index out of range"))?;
    let (w, h) = (camera.image_width, camera.image_height);
    let rows: Result<Vec<Vec<Rgb>>> = (0..h)
        .into_par_iter()
        .map(|py| {
            (0..w)
                .map(|px| {
                    let mut rng = pixel_rng(settings.rng_seed, camera_index, px, py);
                    render_pixel(scene, camera, px, py, settings, &mut rng)
                })
                .collect()
        })
        .collect();
    let mut img = HdrImage::new(w, h);
    for (py, row) in rows?.into_iter().enumerate() {
        for (px, v) in row.into_iter().enumerate() {
            img.set(px, py, v);
        }
    }
    Ok(img)
}

/// Renders and accumulates d(sum of pixel radiance)/d(params) over a whole
/// camera; merge order is fixed by row index, independent of threading.
pub fn grad_image(
    scene: &Scene,
    camera_index: usize,
    settings: &RenderSettings,
    active: &[Block],
) -> Result<(HdrImage, GradientBundle)> {
    let camera = scene
        .cameras
        .get(camera_index)
        .ok_or_else(|| contract("camera index out of range"))?;
    let ctx = GradCtx::new(scene, active);
    let (w, h) = (camera.image_width, camera.image_height);
    let rows: Result<Vec<(Vec<Rgb>, GradientBundle)>> = (0..h)
        .into_par_iter()
        .map(|py| {
            let mut bundle = GradientBundle::new(scene, active);
            let mut row = Vec::with_capacity(w);
            for px in 0..w {
                let mut rng = pixel_rng(settings.rng_seed, camera_index, px, py);
                let (v, pg) =
                    grad_pixel(scene, camera, px, py, settings, active, &ctx, &mut rng)?;
                bundle.add_pixel(&pg);
                row.push(v);
            }
            Ok((row, bundle))
        })
        .collect();
    let mut img = HdrImage::new(w, h);
    let mut total = GradientBundle::new(scene, active);
    for (py, (row, bundle)) in rows?.into_iter().enumerate() {
        for (px, v) in row.into_iter().enumerate() {
            img.set(px, py, v);
        }
        total.merge(&bundle);
    }
    Ok((img, total))
}
