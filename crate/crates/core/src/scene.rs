//! Scene aggregate and the parameter-vector flattening used by the optimizer,
//! plus the on-disk scene description format.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::brdf::{DsbrdfMaterial, MoGPrior, ReflectanceBasisSet};
use crate::error::{contract, Result};
use crate::illumination::EnvironmentMap;
use crate::io::{self, HdrImage};
use crate::mesh::{build_geometric_bases, GeometricBases, Ray, TriangleMesh};
use crate::segmentation::MaterialSegmentation;
use crate::texture::DiffuseTexture;
use crate::Vec3;

/// Pinhole camera with an orthonormal (right, up, forward) basis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Camera {
    pub eye: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
    pub focal_length_pixels: f64,
    pub image_width: usize,
    pub image_height: usize,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let axes = [self.right, self.up, self.forward];
        for a in &axes {
            if (a.norm() - 1.0).abs() > 1e-6 {
                return Err(contract("camera axis not unit length"));
            }
        }
        for i in 0..3 {
            for j in i + 1..3 {
                if axes[i].dot(&axes[j]).abs() > 1e-6 {
                    return Err(contract("camera axes not orthogonal"));
                }
            }
        }
        if !(self.focal_length_pixels > 0.0) {
            return Err(contract("focal length must be positive"));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(contract("zero image dimension"));
        }
        Ok(())
    }

    /// Camera looking at `target` with +y as the up hint.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        focal_length_pixels: f64,
        image_width: usize,
        image_height: usize,
    ) -> Result<Camera> {
        let forward = (target - eye).normalize();
        let world_up = if forward.y.abs() > 0.999 {
            Vec3::new(1.0, 0.0, 0.0)
        } else {
            Vec3::new(0.0, 1.0, 0.0)
        };
        let right = forward.cross(&world_up).normalize();
        let up = right.cross(&forward);
        let cam = Camera {
            eye,
            right,
            up,
            forward,
            focal_length_pixels,
            image_width,
            image_height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Eye ray through pixel (px, py) with sub-pixel offset (jx, jy) in [0,1).
    /// Pixel rows run top-down.
    pub fn primary_ray(&self, px: usize, py: usize, jx: f64, jy: f64) -> Ray {
        let x = px as f64 + jx - self.image_width as f64 / 2.0;
        let y = py as f64 + jy - self.image_height as f64 / 2.0;
        let dir = (x * self.right - y * self.up + self.focal_length_pixels * self.forward).normalize();
        Ray {
            origin: self.eye,
            direction: dir,
        }
    }
}

/// One observed HDR image with a per-pixel validity mask.
#[derive(Debug, Clone)]
pub struct Observation {
    pub camera_index: usize,
    pub image: HdrImage,
    pub validity_mask: Vec<bool>,
}

impl Observation {
    pub fn full(camera_index: usize, image: HdrImage) -> Self {
        let mask = vec![true; image.pixels.len()];
        Observation {
            camera_index,
            image,
            validity_mask: mask,
        }
    }

    pub fn validate(&self, cameras: &[Camera]) -> Result<()> {
        let cam = cameras
            .get(self.camera_index)
            .ok_or_else(|| contract("observation camera index out of range"))?;
        if self.image.width != cam.image_width || self.image.height != cam.image_height {
            return Err(contract("observation dimensions do not match camera"));
        }
        if self.validity_mask.len() != self.image.pixels.len() {
            return Err(contract("validity mask length mismatch"));
        }
        for (p, &m) in self.image.pixels.iter().zip(&self.validity_mask) {
            if m && p.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(contract("masked-in observation pixel not finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// The full decomposition state: geometry, reflectance, segmentation, texture,
/// illumination, and the observations being explained.
#[derive(Debug, Clone)]
pub struct Scene {
    pub mesh: TriangleMesh,
    pub bases: GeometricBases,
    pub basis: ReflectanceBasisSet,
    pub coeff_prior: MoGPrior,
    pub materials: Vec<DsbrdfMaterial>,
    pub segmentation: MaterialSegmentation,
    pub texture: DiffuseTexture,
    pub illumination: EnvironmentMap,
    pub cameras: Vec<Camera>,
    pub observations: Vec<Observation>,
    /// Geometry refinement weights w; mesh.vertices always reflects them.
    pub geometry_weights: Vec<f64>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        self.basis.validate()?;
        if self.materials.is_empty() {
            return Err(contract("scene needs at least one material"));
        }
        if self.segmentation.n_materials() != self.materials.len() {
            return Err(contract("segmentation material count mismatch"));
        }
        if self.segmentation.n_bases() > self.bases.n_bases() {
            return Err(contract("segmentation uses more bases than available"));
        }
        for m in &self.materials {
            if m.psi.len() != self.basis.n_coeffs || m.lobe_colors.len() != self.basis.n_lobes {
                return Err(contract("material shape does not match basis"));
            }
        }
        if self.texture.per_vertex_rgb.len() != self.mesh.vertices.len() {
            return Err(contract("texture resolution does not match vertex count"));
        }
        if self.geometry_weights.len() > self.bases.n_bases() {
            return Err(contract("more geometry weights than bases"));
        }
        for cam in &self.cameras {
            cam.validate()?;
        }
        for obs in &self.observations {
            obs.validate(&self.cameras)?;
        }
        Ok(())
    }

    /// Material index at a hit's triangle (hard assignment).
    pub fn material_index_at(&self, tri: usize) -> usize {
        self.segmentation.material_at(&self.bases, tri)
    }
}

// ---------------------------------------------------------------------------
// Parameter flattening

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    Psi,
    LobeColors,
    Illumination,
    Texture,
    Segmentation,
    Geometry,
}

/// Declared optimizer order; flattening always follows it.
pub const ALL_BLOCKS: [Block; 6] = [
    Block::Psi,
    Block::LobeColors,
    Block::Illumination,
    Block::Texture,
    Block::Segmentation,
    Block::Geometry,
];

impl Block {
    pub fn name(self) -> &'static str {
        match self {
            Block::Psi => "psi",
            Block::LobeColors => "lobe_colors",
            Block::Illumination => "illumination",
            Block::Texture => "texture",
            Block::Segmentation => "segmentation",
            Block::Geometry => "geometry",
        }
    }

    pub fn from_name(s: &str) -> Result<Block> {
        ALL_BLOCKS
            .iter()
            .copied()
            .find(|b| b.name() == s)
            .ok_or_else(|| contract(format!("unknown parameter block '{s}'")))
    }
}

/// Active parameter blocks, ordered as in [`ALL_BLOCKS`].
pub type BlockSet = Vec<Block>;

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    /// (block, values) in declared order; only active blocks present.
    pub blocks: Vec<(Block, Vec<f64>)>,
}

impl ParameterVector {
    pub fn flat(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|(_, v)| v.iter().copied()).collect()
    }

    pub fn get(&self, b: Block) -> Option<&[f64]> {
        self.blocks.iter().find(|(k, _)| *k == b).map(|(_, v)| v.as_slice())
    }

    pub fn get_mut(&mut self, b: Block) -> Option<&mut Vec<f64>> {
        self.blocks.iter_mut().find(|(k, _)| *k == b).map(|(_, v)| v)
    }
}

/// Expected flat length of one block for this scene's shape.
pub fn block_len(scene: &Scene, b: Block) -> usize {
    match b {
        Block::Psi => scene.materials.len() * scene.basis.n_coeffs,
        Block::LobeColors => scene.materials.len() * scene.basis.n_lobes * 3,
        Block::Illumination => scene.illumination.radiance.len() * 3,
        Block::Texture => scene.texture.per_vertex_rgb.len() * 3,
        Block::Segmentation => scene.segmentation.n_materials() * scene.segmentation.n_bases(),
        Block::Geometry => scene.geometry_weights.len(),
    }
}

/// Extracts the active blocks of the scene, in declared order. All blocks are
/// stored in their native linear domain; log-domain stepping for illumination
/// is the optimizer's concern.
pub fn flatten_parameters(scene: &Scene, active: &[Block]) -> ParameterVector {
    let mut blocks = Vec::new();
    for &b in &ALL_BLOCKS {
        if !active.contains(&b) {
            continue;
        }
        let v = match b {
            Block::Psi => scene.materials.iter().flat_map(|m| m.psi.iter().copied()).collect(),
            Block::LobeColors => scene
                .materials
                .iter()
                .flat_map(|m| m.lobe_colors.iter().flatten().copied())
                .collect(),
            Block::Illumination => scene.illumination.radiance.iter().flatten().copied().collect(),
            Block::Texture => scene.texture.per_vertex_rgb.iter().flatten().copied().collect(),
            Block::Segmentation => scene.segmentation.a.iter().flatten().copied().collect(),
            Block::Geometry => scene.geometry_weights.clone(),
        };
        blocks.push((b, v));
    }
    ParameterVector { blocks }
}

/// Returns the scene with the vector's blocks replaced; everything else is
/// untouched. Texture values clamp at zero; geometry weights re-refine the
/// mesh from its initial vertices.
pub fn unflatten_parameters(scene: &Scene, vec: &ParameterVector) -> Result<Scene> {
    let mut out = scene.clone();
    for (b, v) in &vec.blocks {
        let expect = block_len(scene, *b);
        if v.len() != expect {
            return Err(contract(format!(
                "block {} has length {}, expected {expect}",
                b.name(),
                v.len()
            )));
        }
        match b {
            Block::Psi => {
                let nb = scene.basis.n_coeffs;
                for (i, m) in out.materials.iter_mut().enumerate() {
                    m.psi.copy_from_slice(&v[i * nb..(i + 1) * nb]);
                }
            }
            Block::LobeColors => {
                let nl = scene.basis.n_lobes;
                for (i, m) in out.materials.iter_mut().enumerate() {
                    for r in 0..nl {
                        let base = (i * nl + r) * 3;
                        m.lobe_colors[r] = [v[base], v[base + 1], v[base + 2]];
                    }
                }
            }
            Block::Illumination => {
                let rad: Vec<crate::Rgb> =
                    v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
                out.illumination.set_radiance(rad);
            }
            Block::Texture => {
                for (t, c) in out.texture.per_vertex_rgb.iter_mut().zip(v.chunks_exact(3)) {
                    *t = [c[0].max(0.0), c[1].max(0.0), c[2].max(0.0)];
                }
            }
            Block::Segmentation => {
                let n = scene.segmentation.n_bases();
                for (k, row) in out.segmentation.a.iter_mut().enumerate() {
                    row.copy_from_slice(&v[k * n..(k + 1) * n]);
                }
            }
            Block::Geometry => {
                out.geometry_weights = v.clone();
                out.mesh = out.mesh.refine_vertices(&out.bases, v)?;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// On-disk scene description

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFile {
    pub version: u32,
    /// Relative path to an ASCII PLY or OBJ mesh.
    pub mesh: String,
    /// Relative path to a reflectance basis JSON; synthetic fallback if absent.
    #[serde(default)]
    pub basis: Option<String>,
    pub cameras: Vec<Camera>,
    pub observations: Vec<ObservationFile>,
    pub environment: EnvironmentFile,
    #[serde(default = "default_n_bases")]
    pub n_geometric_bases: usize,
    #[serde(default = "default_distance_weights")]
    pub distance_weights: (f64, f64, f64),
    /// Saved optimization state; absent fields take neutral defaults.
    #[serde(default)]
    pub state: Option<SceneState>,
    /// Hyperparameter table, consumed by the posterior; kept opaque here.
    #[serde(default)]
    pub hyper: Option<serde_json::Value>,
}

fn default_n_bases() -> usize {
    32
}

fn default_distance_weights() -> (f64, f64, f64) {
    (1.0, 1.0, 1.0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationFile {
    pub camera_index: usize,
    /// Relative path to a PFM image.
    pub image: String,
    /// Optional relative path to a PFM mask (luminance > 0.5 is valid).
    #[serde(default)]
    pub mask: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvironmentFile {
    Image { image: String },
    Constant { width: usize, height: usize, value: [f64; 3] },
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct SceneState {
    #[serde(default)]
    pub materials: Option<Vec<DsbrdfMaterial>>,
    #[serde(default)]
    pub segmentation: Option<MaterialSegmentation>,
    #[serde(default)]
    pub texture: Option<DiffuseTexture>,
    #[serde(default)]
    pub geometry_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub n_materials: Option<usize>,
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    base.join(rel)
}

/// Loads a scene description JSON; all referenced paths are relative to it.
/// Returns the scene and the raw hyperparameter table, if present.
pub fn load_scene(path: &Path) -> Result<(Scene, Option<serde_json::Value>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| contract(format!("cannot read scene file {}: {e}", path.display())))?;
    let file: SceneFile = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mesh_data = io::read_mesh(&resolve(base, &file.mesh))?;
    let mut mesh = TriangleMesh::from_data(mesh_data)?;

    let (basis, coeff_prior) = match &file.basis {
        Some(rel) => crate::brdf::BasisFile::load(&resolve(base, rel))?,
        None => {
            let b = ReflectanceBasisSet::synthetic_fallback();
            let p = MoGPrior::synthetic_fallback(b.n_coeffs);
            (b, p)
        }
    };

    let mut observations = Vec::new();
    for obs in &file.observations {
        let image = io::read_pfm(&resolve(base, &obs.image))?;
        let mask = match &obs.mask {
            Some(m) => {
                let mi = io::read_pfm(&resolve(base, m))?;
                if mi.width != image.width || mi.height != image.height {
                    return Err(contract("mask dimensions do not match observation"));
                }
                mi.pixels.iter().map(|p| crate::illumination::luminance(p) > 0.5).collect()
            }
            None => vec![true; image.pixels.len()],
        };
        observations.push(Observation {
            camera_index: obs.camera_index,
            image,
            validity_mask: mask,
        });
    }

    let illumination = match &file.environment {
        EnvironmentFile::Image { image } => {
            EnvironmentMap::from_image(&io::read_pfm(&resolve(base, image))?)
        }
        EnvironmentFile::Constant { width, height, value } => {
            EnvironmentMap::constant(*width, *height, *value)
        }
    };

    // Triangle colors seed the distance matrix; project observations onto the
    // mesh to get per-triangle means, nearest-neighbor fill for the rest.
    project_triangle_colors(&mut mesh, &file.cameras, &observations);

    let dist = mesh.triangle_distance_matrix(file.distance_weights)?;
    let sigma = dist.median_finite().max(1e-9);
    let n_bases = file.n_geometric_bases.min(mesh.triangles.len());
    let bases = build_geometric_bases(&mesh, &dist, sigma, n_bases)?;

    let state = file.state.clone().unwrap_or_default();
    let n_materials = state
        .materials
        .as_ref()
        .map(|m| m.len())
        .or(state.n_materials)
        .unwrap_or(1);
    let materials = state
        .materials
        .unwrap_or_else(|| vec![DsbrdfMaterial::neutral(&basis); n_materials]);
    let segmentation = match state.segmentation {
        Some(s) => s,
        None => {
            let mut a = vec![vec![0.0; n_bases]; n_materials];
            // Deterministic symmetry break: material 0 wins everywhere.
            if n_materials > 1 {
                a[0][0] = 0.0;
            }
            MaterialSegmentation::new(a, crate::segmentation::DEFAULT_SEGMENTATION_TAU)?
        }
    };
    let texture = state
        .texture
        .unwrap_or_else(|| DiffuseTexture::constant(mesh.vertices.len(), [0.5; 3]));
    let geometry_weights = state.geometry_weights.unwrap_or_default();
    let mesh = if geometry_weights.is_empty() {
        mesh
    } else {
        mesh.refine_vertices(&bases, &geometry_weights)?
    };

    let scene = Scene {
        mesh,
        bases,
        basis,
        coeff_prior,
        materials,
        segmentation,
        texture,
        illumination,
        cameras: file.cameras,
        observations,
        geometry_weights,
    };
    scene.validate()?;
    Ok((scene, file.hyper))
}

/// Writes the scene and its assets into `dir` as scene.json + PLY/PFM files.
pub fn save_scene(scene: &Scene, dir: &Path, hyper: Option<serde_json::Value>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    io::write_ply(
        &dir.join("mesh.ply"),
        &scene.mesh.initial_vertices,
        &scene.mesh.triangles,
        None,
        Some(&scene.mesh.triangle_colors),
    )?;
    io::write_pfm(&dir.join("environment.pfm"), &scene.illumination.to_image())?;
    let mut observations = Vec::new();
    for (i, obs) in scene.observations.iter().enumerate() {
        let name = format!("observation_{i}.pfm");
        io::write_pfm(&dir.join(&name), &obs.image)?;
        let mask_name = if obs.validity_mask.iter().all(|&m| m) {
            None
        } else {
            let name = format!("mask_{i}.pfm");
            let mut img = HdrImage::new(obs.image.width, obs.image.height);
            for (p, &m) in img.pixels.iter_mut().zip(&obs.validity_mask) {
                *p = if m { [1.0; 3] } else { [0.0; 3] };
            }
            io::write_pfm(&dir.join(&name), &img)?;
            Some(name)
        };
        observations.push(ObservationFile {
            camera_index: obs.camera_index,
            image: name,
            mask: mask_name,
        });
    }
    let basis_file = crate::brdf::BasisFile {
        version: 1,
        basis: scene.basis.clone(),
        prior: scene.coeff_prior.to_data(),
    };
    basis_file.save(&dir.join("basis.json"))?;
    let file = SceneFile {
        version: 1,
        mesh: "mesh.ply".into(),
        basis: Some("basis.json".into()),
        cameras: scene.cameras.clone(),
        observations,
        environment: EnvironmentFile::Image {
            image: "environment.pfm".into(),
        },
        n_geometric_bases: scene.bases.n_bases(),
        distance_weights: default_distance_weights(),
        state: Some(SceneState {
            materials: Some(scene.materials.clone()),
            segmentation: Some(scene.segmentation.clone()),
            texture: Some(scene.texture.clone()),
            geometry_weights: Some(scene.geometry_weights.clone()),
            n_materials: Some(scene.materials.len()),
        }),
        hyper,
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(dir.join("scene.json"), text)?;
    Ok(())
}

/// Mean observed color per triangle from all observations; uncovered
/// triangles filled from the nearest covered centroid.
pub fn project_triangle_colors(
    mesh: &mut TriangleMesh,
    cameras: &[Camera],
    observations: &[Observation],
) {
    let t_count = mesh.triangles.len();
    let mut sums = vec![[0.0f64; 3]; t_count];
    let mut counts = vec![0usize; t_count];
    for obs in observations {
        let Some(cam) = cameras.get(obs.camera_index) else { continue };
        for py in 0..cam.image_height {
            for px in 0..cam.image_width {
                if !obs.validity_mask[py * cam.image_width + px] {
                    continue;
                }
                let ray = cam.primary_ray(px, py, 0.5, 0.5);
                if let Some(hit) = mesh.intersect(&ray) {
                    let p = obs.image.at(px, py);
                    for l in 0..3 {
                        sums[hit.triangle][l] += p[l];
                    }
                    counts[hit.triangle] += 1;
                }
            }
        }
    }
    crate::mesh::fill_triangle_colors(mesh, &sums, &counts);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brdf::MoGPrior;

    fn tiny_scene() -> Scene {
        // Two-triangle quad in the xz plane.
        let vertices = vec![
            Vec3::new(-1.0, 0.0, -1.0),
            Vec3::new(1.0, 0.0, -1.0),
            Vec3::new(1.0, 0.0, 1.0),
            Vec3::new(-1.0, 0.0, 1.0),
        ];
        let triangles = vec![[0usize, 2, 1], [0, 3, 2]];
        let mut mesh = TriangleMesh::new(vertices, triangles).unwrap();
        mesh.triangle_colors = vec![[0.5; 3]; mesh.triangles.len()];
        let dist = mesh.triangle_distance_matrix((1.0, 1.0, 1.0)).unwrap();
        let bases =
            build_geometric_bases(&mesh, &dist, dist.median_finite().max(1e-9), 2).unwrap();
        let basis = ReflectanceBasisSet::synthetic_fallback();
        let coeff_prior = MoGPrior::synthetic_fallback(basis.n_coeffs);
        let materials = vec![DsbrdfMaterial::neutral(&basis), DsbrdfMaterial::neutral(&basis)];
        let segmentation =
            MaterialSegmentation::new(vec![vec![0.1, -0.2], vec![0.3, 0.4]], 0.1).unwrap();
        let texture = DiffuseTexture::constant(4, [0.25, 0.5, 0.75]);
        let illumination = EnvironmentMap::constant(4, 2, [1.0; 3]);
        let camera = Camera::look_at(Vec3::new(0.0, 3.0, 0.01), Vec3::zeros(), 16.0, 8, 8).unwrap();
        let obs = Observation::full(0, HdrImage::new(8, 8));
        Scene {
            mesh,
            bases,
            basis,
            coeff_prior,
            materials,
            segmentation,
            texture,
            illumination,
            cameras: vec![camera],
            observations: vec![obs],
            geometry_weights: vec![0.0, 0.0],
        }
    }

    #[test]
    fn camera_axes_validated() {
        let mut cam = Camera::look_at(Vec3::new(0.0, 0.0, -5.0), Vec3::zeros(), 32.0, 16, 16).unwrap();
        cam.validate().unwrap();
        cam.up = Vec3::new(0.0, 1.0, 0.5);
        assert!(cam.validate().is_err());
    }

    #[test]
    fn primary_ray_center_is_forward() {
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, -5.0), Vec3::zeros(), 32.0, 16, 16).unwrap();
        let ray = cam.primary_ray(7, 7, 1.0, 1.0);
        assert!((ray.direction - cam.forward).norm() < 1e-12);
    }

    #[test]
    fn flatten_sizes() {
        let scene = tiny_scene();
        let v = flatten_parameters(&scene, &[Block::Psi]);
        assert_eq!(v.flat().len(), 2 * scene.basis.n_coeffs);
        let v = flatten_parameters(&scene, &[]);
        assert!(v.flat().is_empty());
        let v = flatten_parameters(&scene, &ALL_BLOCKS);
        let expect: usize = ALL_BLOCKS.iter().map(|&b| block_len(&scene, b)).sum();
        assert_eq!(v.flat().len(), expect);
    }

    #[test]
    fn round_trip_all_subsets_bitwise() {
        let scene = tiny_scene();
        for mask in 0..(1u32 << 6) {
            let active: Vec<Block> = ALL_BLOCKS
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &b)| b)
                .collect();
            let v0 = flatten_parameters(&scene, &active);
            let s1 = unflatten_parameters(&scene, &v0).unwrap();
            let v1 = flatten_parameters(&s1, &active);
            assert_eq!(v0.blocks.len(), v1.blocks.len());
            for ((b0, a), (b1, b)) in v0.blocks.iter().zip(&v1.blocks) {
                assert_eq!(b0, b1);
                assert_eq!(a.len(), b.len());
                for (x, y) in a.iter().zip(b) {
                    assert_eq!(x.to_bits(), y.to_bits(), "block {}", b0.name());
                }
            }
        }
    }

    #[test]
    fn unflatten_replaces_only_active() {
        let scene = tiny_scene();
        let mut v = flatten_parameters(&scene, &[Block::Psi]);
        for x in v.get_mut(Block::Psi).unwrap() {
            *x = 0.25;
        }
        let s1 = unflatten_parameters(&scene, &v).unwrap();
        assert!(s1.materials.iter().all(|m| m.psi.iter().all(|&p| p == 0.25)));
        assert_eq!(s1.texture.per_vertex_rgb, scene.texture.per_vertex_rgb);
        assert_eq!(s1.illumination.radiance, scene.illumination.radiance);
    }

    #[test]
    fn unflatten_wrong_length_errors() {
        let scene = tiny_scene();
        let v = ParameterVector {
            blocks: vec![(Block::Texture, vec![0.0; 5])],
        };
        assert!(unflatten_parameters(&scene, &v).is_err());
    }

    #[test]
    fn unflatten_texture_clamps_negative() {
        let scene = tiny_scene();
        let mut v = flatten_parameters(&scene, &[Block::Texture]);
        v.get_mut(Block::Texture).unwrap()[0] = -1.0;
        let s1 = unflatten_parameters(&scene, &v).unwrap();
        assert_eq!(s1.texture.per_vertex_rgb[0][0], 0.0);
    }

    #[test]
    fn unflatten_geometry_moves_vertices() {
        let scene = tiny_scene();
        let v = ParameterVector {
            blocks: vec![(Block::Geometry, vec![0.5, 0.0])],
        };
        let s1 = unflatten_parameters(&scene, &v).unwrap();
        assert!(s1
            .mesh
            .vertices
            .iter()
            .zip(&scene.mesh.vertices)
            .any(|(a, b)| (a - b).norm() > 1e-9));
        // Weights back to zero restore the initial vertices.
        let v0 = ParameterVector {
            blocks: vec![(Block::Geometry, vec![0.0, 0.0])],
        };
        let s2 = unflatten_parameters(&s1, &v0).unwrap();
        for (a, b) in s2.mesh.vertices.iter().zip(&scene.mesh.initial_vertices) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn scene_file_round_trip() {
        let scene = tiny_scene();
        let dir = tempfile::tempdir().unwrap();
        save_scene(&scene, dir.path(), None).unwrap();
        let (loaded, hyper) = load_scene(&dir.path().join("scene.json")).unwrap();
        assert!(hyper.is_none());
        assert_eq!(loaded.materials.len(), scene.materials.len());
        assert_eq!(loaded.segmentation.a, scene.segmentation.a);
        assert_eq!(loaded.texture.per_vertex_rgb, scene.texture.per_vertex_rgb);
        assert_eq!(loaded.illumination.radiance, scene.illumination.radiance);
        assert_eq!(loaded.mesh.triangles, scene.mesh.triangles);
        for (a, b) in loaded.mesh.vertices.iter().zip(&scene.mesh.vertices) {
            assert!((a - b).norm() < 1e-5);
        }
    }

    #[test]
    fn observation_scale_shifts_log_uniformly() {
        let mut img = HdrImage::new(2, 2);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = [0.5 + i as f64, 1.0 + i as f64, 1.5 + i as f64];
        }
        let s = 3.7;
        let scaled: Vec<f64> = img
            .pixels
            .iter()
            .flatten()
            .map(|v| (v * s).ln() - v.ln())
            .collect();
        for d in scaled {
            assert!((d - s.ln()).abs() < 1e-12);
        }
    }
}
