//! Synthetic fixtures, mesh perturbation, and evaluation metrics.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::brdf::{eval_brdf, least_specular_lobe, DsbrdfMaterial, MoGPrior, ReflectanceBasisSet};
use crate::error::{contract, Result};
use crate::illumination::EnvironmentMap;
use crate::mesh::{build_geometric_bases, TriangleMesh};
use crate::renderer::{render_image, RenderSettings};
use crate::scene::{Camera, Observation, Scene};
use crate::segmentation::MaterialSegmentation;
use crate::texture::DiffuseTexture;
use crate::{Rgb, Vec3};

// ---------------------------------------------------------------------------
// Procedural meshes

/// UV sphere; 2*lon*(lat-1) triangles (lat bands, two caps of lon each).
pub fn uv_sphere(center: Vec3, radius: f64, lon: usize, lat: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    assert!(lon >= 3 && lat >= 3);
    let mut vertices = vec![center + Vec3::new(0.0, radius, 0.0)];
    for i in 1..lat {
        let theta = std::f64::consts::PI * i as f64 / lat as f64;
        for j in 0..lon {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / lon as f64;
            vertices.push(
                center
                    + radius
                        * Vec3::new(theta.sin() * phi.cos(), theta.cos(), theta.sin() * phi.sin()),
            );
        }
    }
    vertices.push(center + Vec3::new(0.0, -radius, 0.0));
    let bottom = vertices.len() - 1;
    let ring = |i: usize, j: usize| 1 + (i - 1) * lon + (j % lon);
    let mut triangles = Vec::new();
    for j in 0..lon {
        triangles.push([0, ring(1, j + 1), ring(1, j)]);
    }
    for i in 1..lat - 1 {
        for j in 0..lon {
            let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j + 1), ring(i + 1, j));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    for j in 0..lon {
        triangles.push([bottom, ring(lat - 1, j), ring(lat - 1, j + 1)]);
    }
    (vertices, triangles)
}

/// Axis-aligned-ish quad from four corners (counter-clockwise), two triangles.
pub fn quad(corners: [Vec3; 4]) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    (corners.to_vec(), vec![[0, 1, 2], [0, 2, 3]])
}

/// Regular grid plane in the xz plane at y=0, size x size cells.
pub fn grid_plane(origin: Vec3, extent: f64, cells: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let mut vertices = Vec::new();
    for z in 0..=cells {
        for x in 0..=cells {
            vertices.push(
                origin
                    + Vec3::new(
                        extent * x as f64 / cells as f64,
                        0.0,
                        extent * z as f64 / cells as f64,
                    ),
            );
        }
    }
    let idx = |x: usize, z: usize| z * (cells + 1) + x;
    let mut triangles = Vec::new();
    for z in 0..cells {
        for x in 0..cells {
            triangles.push([idx(x, z), idx(x + 1, z + 1), idx(x + 1, z)]);
            triangles.push([idx(x, z), idx(x, z + 1), idx(x + 1, z + 1)]);
        }
    }
    (vertices, triangles)
}

pub fn merge_meshes(parts: &[(Vec<Vec3>, Vec<[usize; 3]>)]) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (v, t) in parts {
        let base = vertices.len();
        vertices.extend_from_slice(v);
        triangles.extend(t.iter().map(|tri| [tri[0] + base, tri[1] + base, tri[2] + base]));
    }
    (vertices, triangles)
}

// ---------------------------------------------------------------------------
// Materials

/// Material whose BRDF is the constant rho/pi: only the diffuse lobe carries
/// color, scaled so the lobe factor times color equals rho/pi.
pub fn lambertian_material(basis: &ReflectanceBasisSet, rho: Rgb) -> DsbrdfMaterial {
    let diffuse = least_specular_lobe(basis);
    let e = {
        // Diffuse lobe factor at psi = 0; constant when gamma = 0.
        let kappa = basis.lobes[diffuse].kappa_mean.eval(0.0);
        kappa.exp() - 1.0
    };
    let mut lobe_colors = vec![[0.0; 3]; basis.n_lobes];
    lobe_colors[diffuse] = [
        rho[0] / (std::f64::consts::PI * e),
        rho[1] / (std::f64::consts::PI * e),
        rho[2] / (std::f64::consts::PI * e),
    ];
    DsbrdfMaterial {
        psi: vec![0.0; basis.n_coeffs],
        lobe_colors,
        diffuse_lobe_index: diffuse,
    }
}

/// Glossy material: diffuse base plus a strong specular lobe.
pub fn glossy_material(basis: &ReflectanceBasisSet, diffuse_rho: Rgb, specular: f64) -> DsbrdfMaterial {
    let mut mat = lambertian_material(basis, diffuse_rho);
    let spec_lobe = (0..basis.n_lobes)
        .max_by(|&a, &b| {
            basis.lobes[a]
                .gamma_mean
                .eval(0.0)
                .partial_cmp(&basis.lobes[b].gamma_mean.eval(0.0))
                .unwrap()
        })
        .unwrap();
    mat.lobe_colors[spec_lobe] = [specular; 3];
    mat
}

/// Fraction of reflectance carried by lobes other than the diffuse one,
/// averaged over a uniform theta_h grid at normal incidence (theta_d = 0).
/// Uniform grid weighting, not solid angle: the statistic must stay sensitive
/// to narrow specular lobes. The interreflection test's statistic.
pub fn specular_energy_share(mat: &DsbrdfMaterial, basis: &ReflectanceBasisSet) -> f64 {
    let grid = 256;
    let mut diffuse = 0.0;
    let mut total = 0.0;
    for i in 0..grid {
        let theta_h = std::f64::consts::FRAC_PI_2 * (i as f64 + 0.5) / grid as f64;
        for r in 0..basis.n_lobes {
            let kappa = basis.kappa(r, &mat.psi, 0.0);
            let (gamma, _) = basis.gamma(r, &mat.psi, 0.0);
            let e = (kappa * theta_h.cos().powf(gamma)).exp() - 1.0;
            let c: f64 = mat.lobe_colors[r].iter().sum();
            let v = (e * c).max(0.0);
            total += v;
            if r == mat.diffuse_lobe_index {
                diffuse += v;
            }
        }
    }
    if total <= 0.0 {
        return 0.0;
    }
    1.0 - diffuse / total
}

// ---------------------------------------------------------------------------
// Fixtures

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub resolution: usize,
    pub views: usize,
    pub spp: usize,
    pub max_bounces: usize,
    pub env_width: usize,
    pub env_height: usize,
    pub n_geometric_bases: usize,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            resolution: 64,
            views: 3,
            spp: 64,
            max_bounces: 2,
            env_width: 16,
            env_height: 8,
            n_geometric_bases: 16,
            seed: 0,
        }
    }
}

/// Ground truth record stored with each fixture.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub materials: Vec<DsbrdfMaterial>,
    pub labels: Vec<usize>,
    pub illumination: EnvironmentMap,
    pub vertices: Vec<Vec3>,
    pub texture: Option<DiffuseTexture>,
}

pub struct Fixture {
    /// Scene in its ground-truth state with rendered observations attached.
    pub scene: Scene,
    pub gt: GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureKind {
    SphereQuad,
    TwoMaterialPlane,
    TeapotRoomMini,
}

impl FixtureKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sphere_quad" => Ok(FixtureKind::SphereQuad),
            "two_material_plane" => Ok(FixtureKind::TwoMaterialPlane),
            "teapot_room_mini" => Ok(FixtureKind::TeapotRoomMini),
            _ => Err(contract(format!("unknown fixture '{s}'"))),
        }
    }
}

/// Environment with two bright blobs on a dim base; breaks symmetry without
/// concentrating all energy in one texel.
pub fn two_blob_environment(width: usize, height: usize) -> EnvironmentMap {
    let mut rad = vec![[0.05; 3]; width * height];
    let centers = [(0.25f64, 0.3f64, [6.0, 5.0, 4.0]), (0.7, 0.6, [2.0, 2.5, 3.5])];
    for r in 0..height {
        for c in 0..width {
            let y = (r as f64 + 0.5) / height as f64;
            let x = (c as f64 + 0.5) / width as f64;
            for (cx, cy, color) in &centers {
                let mut dx = (x - cx).abs();
                dx = dx.min(1.0 - dx);
                let d2 = dx * dx + (y - cy) * (y - cy);
                let g = (-d2 / 0.02).exp();
                for l in 0..3 {
                    rad[r * width + c][l] += g * color[l];
                }
            }
        }
    }
    EnvironmentMap::from_radiance(width, height, rad)
}

fn ring_cameras(
    views: usize,
    target: Vec3,
    distance: f64,
    elevation: f64,
    resolution: usize,
) -> Result<Vec<Camera>> {
    let mut cams = Vec::new();
    for v in 0..views {
        let ang = 2.0 * std::f64::consts::PI * v as f64 / views.max(1) as f64 + 0.3;
        let eye = target
            + distance * Vec3::new(ang.cos() * 0.8, elevation + 0.1 * (v as f64), ang.sin() * 0.8);
        cams.push(Camera::look_at(eye, target, resolution as f64 * 1.2, resolution, resolution)?);
    }
    Ok(cams)
}

/// Builds a fixture: ground-truth scene plus observations rendered from it.
/// Deterministic for a fixed config.
pub fn make_fixture(kind: FixtureKind, cfg: &FixtureConfig) -> Result<Fixture> {
    let basis = ReflectanceBasisSet::synthetic_fallback();
    let coeff_prior = MoGPrior::synthetic_fallback(basis.n_coeffs);

    let (vertices, triangles, labels, materials, texture, center, radius, elevation) = match kind {
        FixtureKind::SphereQuad => {
            // Glossy floor directly under the sphere: from the elevated ring
            // cameras its mirror directions pass through the sphere, so the
            // floor's specular evidence is almost entirely interreflection.
            let sphere = uv_sphere(Vec3::new(0.0, 0.0, 0.0), 1.0, 32, 16);
            let n_sphere = sphere.1.len();
            let q = quad([
                Vec3::new(-0.95, -1.02, -0.95),
                Vec3::new(-0.95, -1.02, 0.95),
                Vec3::new(0.95, -1.02, 0.95),
                Vec3::new(0.95, -1.02, -0.95),
            ]);
            let (v, t) = merge_meshes(&[sphere, q]);
            let labels: Vec<usize> =
                (0..t.len()).map(|i| usize::from(i >= n_sphere)).collect();
            let materials = vec![
                lambertian_material(&basis, [0.7, 0.35, 0.25]),
                glossy_material(&basis, [0.04, 0.04, 0.05], 0.4),
            ];
            (v, t, labels, materials, None, Vec3::zeros(), 1.6, 1.3)
        }
        FixtureKind::TwoMaterialPlane => {
            let (v, t) = grid_plane(Vec3::new(-1.5, 0.0, -1.5), 3.0, 6);
            // Checker over 2x2 cell blocks.
            let cells = 6;
            // Quadrant checker: low-frequency enough for the smooth bases to
            // represent the indicator exactly.
            let labels: Vec<usize> = (0..t.len())
                .map(|i| {
                    let cell = i / 2;
                    let (cx, cz) = (cell % cells, cell / cells);
                    (cx / 3 + cz / 3) % 2
                })
                .collect();
            let mut m1 = lambertian_material(&basis, [0.75, 0.2, 0.15]);
            m1.psi[0] = 0.4;
            let mut m2 = glossy_material(&basis, [0.1, 0.25, 0.7], 0.05);
            m2.psi[1] = -0.3;
            (v, t, labels, vec![m1, m2], None, Vec3::zeros(), 2.2, 0.55)
        }
        FixtureKind::TeapotRoomMini => {
            let body = uv_sphere(Vec3::new(-0.6, 0.45, 0.0), 0.45, 14, 8);
            let spout = uv_sphere(Vec3::new(0.7, 0.3, 0.4), 0.3, 12, 7);
            let floor = grid_plane(Vec3::new(-1.8, 0.0, -1.8), 3.6, 4);
            let n_body = body.1.len();
            let n_spout = spout.1.len();
            let (v, t) = merge_meshes(&[body, spout, floor]);
            let labels: Vec<usize> = (0..t.len())
                .map(|i| {
                    if i < n_body {
                        0
                    } else if i < n_body + n_spout {
                        1
                    } else {
                        2
                    }
                })
                .collect();
            let materials = vec![
                glossy_material(&basis, [0.5, 0.2, 0.12], 0.03),
                lambertian_material(&basis, [0.2, 0.5, 0.3]),
                lambertian_material(&basis, [0.45, 0.45, 0.4]),
            ];
            // The texture replaces every material's diffuse lobe color, so
            // off-floor vertices carry their part's diffuse color and the
            // floor stripes average to the floor material's diffuse color.
            let mut tex = DiffuseTexture::constant(v.len(), [0.0; 3]);
            let n_floor_v = 25;
            let first_floor_v = v.len() - n_floor_v;
            let diffuse_of = |k: usize| {
                let m: &DsbrdfMaterial = &materials[k];
                m.lobe_colors[m.diffuse_lobe_index]
            };
            for (i, vertex) in v.iter().enumerate() {
                tex.per_vertex_rgb[i] = if i >= first_floor_v {
                    let base = diffuse_of(2);
                    let s = ((vertex.x * 2.0).floor() as i64).rem_euclid(2);
                    let scale = if s == 0 { 1.25 } else { 0.75 };
                    [base[0] * scale, base[1] * scale, base[2] * scale]
                } else {
                    // Body and spout are disjoint spheres; pick by distance.
                    let d_body = (vertex - Vec3::new(-0.6, 0.45, 0.0)).norm();
                    let d_spout = (vertex - Vec3::new(0.7, 0.3, 0.4)).norm();
                    diffuse_of(if d_body < d_spout { 0 } else { 1 })
                };
            }
            (v, t, labels, materials, Some(tex), Vec3::new(0.0, 0.3, 0.0), 2.4, 0.55)
        }
    };

    let mut mesh = TriangleMesh::new(vertices, triangles)?;
    // Triangle colors: ground-truth diffuse colors; they seed the distance
    // matrix exactly as observed colors would at convergence.
    mesh.triangle_colors = labels
        .iter()
        .map(|&k| materials[k].lobe_colors[materials[k].diffuse_lobe_index])
        .collect();

    let illumination = two_blob_environment(cfg.env_width, cfg.env_height);
    let cameras = ring_cameras(cfg.views, center, radius * 2.6, elevation, cfg.resolution)?;

    let dist = mesh.triangle_distance_matrix((1.0, 1.0, 1.0))?;
    let sigma = dist.median_finite().max(1e-9);
    let n_bases = cfg.n_geometric_bases.min(mesh.triangles.len());
    let bases = build_geometric_bases(&mesh, &dist, sigma, n_bases)?;

    // Segmentation coefficients fit to the GT labels (+-1 targets).
    let k_count = materials.len();
    let mut a = vec![vec![0.0; n_bases]; k_count];
    for (k, row) in a.iter_mut().enumerate() {
        for (n, an) in row.iter_mut().enumerate() {
            *an = (0..mesh.triangles.len())
                .map(|t| {
                    let target = if labels[t] == k { 1.0 } else { -1.0 };
                    bases.per_triangle[(t, n)] * target
                })
                .sum();
        }
    }
    let segmentation = MaterialSegmentation::new(a, crate::segmentation::DEFAULT_SEGMENTATION_TAU)?;

    let texture_state = texture
        .clone()
        .unwrap_or_else(|| DiffuseTexture::constant(mesh.vertices.len(), [0.0; 3]));

    let mut scene = Scene {
        mesh,
        bases,
        basis,
        coeff_prior,
        materials: materials.clone(),
        segmentation,
        texture: texture_state,
        illumination: illumination.clone(),
        cameras,
        observations: Vec::new(),
        geometry_weights: Vec::new(),
    };
    scene.validate()?;

    // Observations: render the ground truth.
    let settings = RenderSettings {
        samples_per_pixel: cfg.spp,
        max_bounces: cfg.max_bounces,
        rng_seed: cfg.seed ^ 0x9e3779b97f4a7c15,
        ..Default::default()
    };
    let mut observations = Vec::new();
    for v in 0..scene.cameras.len() {
        let img = render_image(&scene, v, &settings)?;
        observations.push(Observation::full(v, img));
    }
    scene.observations = observations;
    scene.validate()?;

    let gt = GroundTruth {
        materials,
        labels,
        illumination,
        vertices: scene.mesh.vertices.clone(),
        texture,
    };
    Ok(Fixture { scene, gt })
}

// ---------------------------------------------------------------------------
// Perturbation

/// Gaussian offsets along vertex normals (sigma relative to mean edge length)
/// followed by uniform-weight Laplacian smoothing. The result becomes the new
/// rest state: initial vertices and normals are reset to it.
pub fn perturb_mesh(
    mesh: &TriangleMesh,
    noise_sigma: f64,
    smoothing_iterations: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TriangleMesh> {
    let sigma = noise_sigma * mesh.mean_edge_length();
    let mut vertices = mesh.vertices.clone();
    if sigma > 0.0 {
        for (v, n) in vertices.iter_mut().zip(&mesh.vertex_normals) {
            // Box-Muller keeps the dependency surface small.
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen();
            let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            *v += sigma * g * n;
        }
    }
    // Vertex adjacency from triangle edges.
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); vertices.len()];
    for t in &mesh.triangles {
        for (i, j) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            if !neighbors[i].contains(&j) {
                neighbors[i].push(j);
            }
            if !neighbors[j].contains(&i) {
                neighbors[j].push(i);
            }
        }
    }
    // Uniform-weight Laplacian smoothing, shrink-compensated: each iteration
    // is a positive step followed by a slightly larger negative one (Taubin
    // lambda/mu), so repeated smoothing removes noise without collapsing
    // closed surfaces toward their centroid.
    for _ in 0..smoothing_iterations {
        for step in [0.5, -0.53] {
            let prev = vertices.clone();
            for (i, v) in vertices.iter_mut().enumerate() {
                if neighbors[i].is_empty() {
                    continue;
                }
                let mean = neighbors[i].iter().map(|&j| prev[j]).sum::<Vec3>()
                    / neighbors[i].len() as f64;
                *v = prev[i] + step * (mean - prev[i]);
            }
        }
    }
    let mut out = TriangleMesh::new(vertices, mesh.triangles.clone())?;
    out.triangle_colors = mesh.triangle_colors.clone();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub brdf_log_rmse: Vec<f64>,
    pub mean_vertex_distance: f64,
    pub illum_log_rmse: f64,
    pub label_agreement: f64,
}

/// RMSE of log(f + eps) over a 90x90 (theta_d, theta_h) grid, 3 channels.
pub fn brdf_log_rmse(
    est: &DsbrdfMaterial,
    gt: &DsbrdfMaterial,
    basis: &ReflectanceBasisSet,
) -> Result<f64> {
    const EPS: f64 = 1e-4;
    let grid = 90;
    let mut sum = 0.0;
    for i in 0..grid {
        for j in 0..grid {
            let theta_d = std::f64::consts::FRAC_PI_2 * i as f64 / (grid - 1) as f64;
            let theta_h = std::f64::consts::FRAC_PI_2 * j as f64 / (grid - 1) as f64;
            let fe = eval_brdf(est, basis, theta_d, theta_h, None)?;
            let fg = eval_brdf(gt, basis, theta_d, theta_h, None)?;
            for l in 0..3 {
                let d = (fe[l] + EPS).ln() - (fg[l] + EPS).ln();
                sum += d * d;
            }
        }
    }
    Ok((sum / (grid * grid * 3) as f64).sqrt())
}

/// Mean distance from each estimated vertex to the closest point on the
/// ground-truth surface.
pub fn mean_vertex_distance(est: &TriangleMesh, gt: &TriangleMesh) -> f64 {
    let sum: f64 = est.vertices.iter().map(|v| est_to_gt(v, gt)).sum();
    sum / est.vertices.len() as f64
}

fn est_to_gt(v: &Vec3, gt: &TriangleMesh) -> f64 {
    gt.closest_point(v).1
}

/// Log-RMSE between environment maps after aligning global scale by the
/// median luminance ratio. The decomposition is scale-ambiguous.
pub fn illum_log_rmse(est: &EnvironmentMap, gt: &EnvironmentMap) -> Result<f64> {
    if est.width != gt.width || est.height != gt.height {
        return Err(contract("environment dimensions differ"));
    }
    let eps_e = 1e-6 * est.mean_radiance().max(1e-300);
    let eps_g = 1e-6 * gt.mean_radiance().max(1e-300);
    let mut ratios: Vec<f64> = est
        .radiance
        .iter()
        .zip(&gt.radiance)
        .map(|(e, g)| {
            (crate::illumination::luminance(g) + eps_g) / (crate::illumination::luminance(e) + eps_e)
        })
        .collect();
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let s = ratios[ratios.len() / 2];
    let mut sum = 0.0;
    for (e, g) in est.radiance.iter().zip(&gt.radiance) {
        for l in 0..3 {
            let d = (s * e[l] + eps_g).ln() - (g[l] + eps_g).ln();
            sum += d * d;
        }
    }
    Ok((sum / (est.radiance.len() * 3) as f64).sqrt())
}

/// Fraction of triangles whose label matches under the best permutation of
/// material indices (exhaustive for small K, greedy beyond 6).
pub fn label_agreement(est: &[usize], gt: &[usize], k: usize) -> f64 {
    assert_eq!(est.len(), gt.len());
    let n = est.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&e, &g) in est.iter().zip(gt) {
        confusion[e.min(k - 1)][g.min(k - 1)] += 1;
    }
    let best = if k <= 6 {
        let mut perm: Vec<usize> = (0..k).collect();
        let mut best = 0usize;
        permute(&mut perm, 0, &mut |p| {
            let score: usize = (0..k).map(|e| confusion[e][p[e]]).sum();
            if score > best {
                best = score;
            }
        });
        best
    } else {
        // Greedy matching.
        let mut used = vec![false; k];
        let mut total = 0usize;
        for e in 0..k {
            let g = (0..k)
                .filter(|&g| !used[g])
                .max_by_key(|&g| confusion[e][g])
                .unwrap();
            used[g] = true;
            total += confusion[e][g];
        }
        total
    };
    best as f64 / n as f64
}

fn permute(v: &mut Vec<usize>, i: usize, f: &mut impl FnMut(&[usize])) {
    if i == v.len() {
        f(v);
        return;
    }
    for j in i..v.len() {
        v.swap(i, j);
        permute(v, i + 1, f);
        v.swap(i, j);
    }
}

/// Mean absolute deviation of dihedral angles from flatness; decreases under
/// smoothing.
pub fn mean_dihedral_deviation(mesh: &TriangleMesh) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..mesh.triangles.len() {
        for &j in &mesh.adjacency[i] {
            if j > i {
                sum += 1.0 - mesh.triangle_normal(i).dot(&mesh.triangle_normal(j));
                n += 1;
            }
        }
    }
    sum / n.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn uv_sphere_triangle_count_and_radius() {
        let (v, t) = uv_sphere(Vec3::zeros(), 1.0, 32, 16);
        assert_eq!(t.len(), 2 * 32 * (16 - 1));
        for p in &v {
            assert!((p.norm() - 1.0).abs() < 1e-12);
        }
        let mesh = TriangleMesh::new(v, t).unwrap();
        // Closed manifold: every edge shared by exactly two triangles.
        for adj in &mesh.adjacency {
            assert_eq!(adj.len(), 3);
        }
    }

    #[test]
    fn lambertian_material_is_constant_rho_over_pi() {
        let basis = ReflectanceBasisSet::synthetic_fallback();
        let rho = [0.6, 0.4, 0.2];
        let mat = lambertian_material(&basis, rho);
        for (td, th) in [(0.0, 0.0), (0.3, 0.7), (1.2, 0.1), (1.5, 1.5)] {
            let f = eval_brdf(&mat, &basis, td, th, None).unwrap();
            for l in 0..3 {
                assert!(
                    (f[l] - rho[l] / std::f64::consts::PI).abs() < 1e-12,
                    "td={td} th={th}: {f:?}"
                );
            }
        }
    }

    #[test]
    fn specular_share_separates_materials() {
        let basis = ReflectanceBasisSet::synthetic_fallback();
        let lam = lambertian_material(&basis, [0.5; 3]);
        assert!(specular_energy_share(&lam, &basis) < 1e-12);
        let glossy = glossy_material(&basis, [0.1; 3], 0.5);
        assert!(specular_energy_share(&glossy, &basis) > 0.3);
    }

    #[test]
    fn brdf_log_rmse_identity_and_scale() {
        let basis = ReflectanceBasisSet::synthetic_fallback();
        let mat = lambertian_material(&basis, [0.9, 0.9, 0.9]);
        assert!(brdf_log_rmse(&mat, &mat, &basis).unwrap() < 1e-12);
        // High-kappa material scaled by e in linear f -> log offset ~ 1.
        let mut big = lambertian_material(&basis, [300.0; 3]);
        let mut scaled = big.clone();
        for c in &mut scaled.lobe_colors[big.diffuse_lobe_index] {
            *c *= std::f64::consts::E;
        }
        big.psi = vec![0.0; basis.n_coeffs];
        let r = brdf_log_rmse(&scaled, &big, &basis).unwrap();
        assert!((r - 1.0).abs() < 0.05, "r = {r}");
    }

    #[test]
    fn mean_vertex_distance_analytic_sphere() {
        let (v1, t1) = uv_sphere(Vec3::zeros(), 1.0, 24, 12);
        let (v2, t2) = uv_sphere(Vec3::zeros(), 1.1, 24, 12);
        let m1 = TriangleMesh::new(v1, t1).unwrap();
        let m2 = TriangleMesh::new(v2, t2).unwrap();
        let d = mean_vertex_distance(&m1, &m1);
        assert!(d < 1e-12);
        // Vertices of the 1.1 sphere lie ~0.1 above the unit sphere's surface,
        // slightly less because the inner mesh is a chordal approximation.
        let d = mean_vertex_distance(&m2, &m1);
        assert!(d > 0.08 && d < 0.11, "d = {d}");
    }

    #[test]
    fn mean_vertex_distance_matches_brute_force() {
        let (v1, t1) = uv_sphere(Vec3::new(0.2, 0.1, -0.1), 0.9, 10, 6);
        let (v2, t2) = uv_sphere(Vec3::zeros(), 1.0, 9, 7);
        let m1 = TriangleMesh::new(v1, t1).unwrap();
        let m2 = TriangleMesh::new(v2, t2).unwrap();
        let fast = mean_vertex_distance(&m1, &m2);
        let mut brute_sum = 0.0;
        for v in &m1.vertices {
            let mut best = f64::INFINITY;
            for i in 0..m2.triangles.len() {
                let [a, b, c] = m2.triangle_vertices(i);
                let p = crate::mesh::closest_point_on_triangle(v, &a, &b, &c);
                best = best.min((p - v).norm());
            }
            brute_sum += best;
        }
        let brute = brute_sum / m1.vertices.len() as f64;
        assert!((fast - brute).abs() < 1e-10, "{fast} vs {brute}");
    }

    #[test]
    fn metrics_invariant_to_rigid_transform() {
        use nalgebra::Rotation3;
        let (v1, t1) = uv_sphere(Vec3::zeros(), 1.0, 12, 8);
        let (v2, t2) = uv_sphere(Vec3::new(0.1, 0.0, 0.0), 1.05, 10, 7);
        let rot = Rotation3::from_euler_angles(0.4, -0.8, 1.2);
        let shift = Vec3::new(3.0, -2.0, 1.0);
        let xf = |v: &Vec<Vec3>| v.iter().map(|p| rot * p + shift).collect::<Vec<_>>();
        let m1 = TriangleMesh::new(v1.clone(), t1.clone()).unwrap();
        let m2 = TriangleMesh::new(v2.clone(), t2.clone()).unwrap();
        let m1r = TriangleMesh::new(xf(&v1), t1).unwrap();
        let m2r = TriangleMesh::new(xf(&v2), t2).unwrap();
        let a = mean_vertex_distance(&m2, &m1);
        let b = mean_vertex_distance(&m2r, &m1r);
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn label_agreement_permutation_invariant() {
        let gt = vec![0, 0, 1, 1, 2, 2];
        let est = vec![2, 2, 0, 0, 1, 1];
        assert!((label_agreement(&est, &gt, 3) - 1.0).abs() < 1e-12);
        let est2 = vec![2, 2, 0, 0, 1, 0];
        assert!((label_agreement(&est2, &gt, 3) - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn perturb_zero_sigma_zero_smoothing_is_identity() {
        let (v, t) = uv_sphere(Vec3::zeros(), 1.0, 10, 6);
        let mesh = TriangleMesh::new(v, t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = perturb_mesh(&mesh, 0.0, 0, &mut rng).unwrap();
        for (a, b) in p.vertices.iter().zip(&mesh.vertices) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn perturb_moves_but_stays_bounded() {
        let (v, t) = uv_sphere(Vec3::zeros(), 1.0, 16, 10);
        let mesh = TriangleMesh::new(v, t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = perturb_mesh(&mesh, 0.5, 10, &mut rng).unwrap();
        let d = mean_vertex_distance(&p, &mesh);
        // Noise contributes up to ~sigma x mean edge; uniform Laplacian
        // smoothing additionally shrinks the sphere, hence the 2x slack.
        let bound = 2.0 * 0.5 * mesh.mean_edge_length();
        assert!(d > 0.0 && d < bound, "d = {d}, bound = {bound}");
        // Initial state reset to the perturbed shape.
        for (a, b) in p.initial_vertices.iter().zip(&p.vertices) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn smoothing_reduces_dihedral_deviation() {
        let (v, t) = uv_sphere(Vec3::zeros(), 1.0, 16, 10);
        let mesh = TriangleMesh::new(v, t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noisy = perturb_mesh(&mesh, 0.5, 0, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let smoothed = perturb_mesh(&mesh, 0.5, 10, &mut rng).unwrap();
        assert!(mean_dihedral_deviation(&smoothed) < mean_dihedral_deviation(&noisy));
    }

    #[test]
    fn illum_log_rmse_scale_aligned() {
        let gt = two_blob_environment(8, 4);
        let mut est = gt.clone();
        let scaled: Vec<Rgb> = est
            .radiance
            .iter()
            .map(|p| [p[0] * 5.0, p[1] * 5.0, p[2] * 5.0])
            .collect();
        est.set_radiance(scaled);
        assert!(illum_log_rmse(&est, &gt).unwrap() < 1e-6);
    }

    #[test]
    fn fixture_deterministic() {
        let cfg = FixtureConfig {
            resolution: 8,
            views: 1,
            spp: 2,
            max_bounces: 1,
            n_geometric_bases: 8,
            ..Default::default()
        };
        let a = make_fixture(FixtureKind::TwoMaterialPlane, &cfg).unwrap();
        let b = make_fixture(FixtureKind::TwoMaterialPlane, &cfg).unwrap();
        for (oa, ob) in a.scene.observations.iter().zip(&b.scene.observations) {
            for (pa, pb) in oa.image.pixels.iter().zip(&ob.image.pixels) {
                for l in 0..3 {
                    assert_eq!(pa[l].to_bits(), pb[l].to_bits());
                }
            }
        }
    }

    #[test]
    fn sphere_quad_fixture_shape() {
        let cfg = FixtureConfig {
            resolution: 8,
            views: 1,
            spp: 2,
            max_bounces: 1,
            n_geometric_bases: 8,
            ..Default::default()
        };
        let f = make_fixture(FixtureKind::SphereQuad, &cfg).unwrap();
        assert_eq!(f.scene.mesh.triangles.len(), 960 + 2);
        assert_eq!(f.scene.materials.len(), 2);
        // Segmentation fit reproduces the GT labels.
        let labels = f.scene.segmentation.labels(&f.scene.bases);
        let agree = label_agreement(&labels, &f.gt.labels, 2);
        assert!(agree >= 0.95, "agreement {agree}");
    }
}
