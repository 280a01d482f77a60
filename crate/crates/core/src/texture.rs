//! Per-vertex diffuse texture and its entropy / spatial-smoothness priors.
//!
//! The smoothed-histogram entropy here is shared with the illumination module.

use serde::{Deserialize, Serialize};

use crate::mesh::{Hit, TriangleMesh};
use crate::Rgb;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffuseTexture {
    pub per_vertex_rgb: Vec<Rgb>,
    /// Stages before texture estimation render with material lobe colors.
    pub enabled: bool,
}

impl DiffuseTexture {
    pub fn constant(n_vertices: usize, color: Rgb) -> Self {
        DiffuseTexture {
            per_vertex_rgb: vec![color; n_vertices],
            enabled: false,
        }
    }
}

/// Barycentric interpolation of the vertex colors on the hit triangle.
/// `fallback` (the owning material's diffuse lobe color) is returned when the
/// texture is disabled.
pub fn texture_at(tex: &DiffuseTexture, mesh: &TriangleMesh, hit: &Hit, fallback: Rgb) -> Rgb {
    if !tex.enabled {
        return fallback;
    }
    let [a, b, c] = mesh.triangles[hit.triangle];
    let mut out = [0.0f64; 3];
    for l in 0..3 {
        out[l] = hit.bary[0] * tex.per_vertex_rgb[a][l]
            + hit.bary[1] * tex.per_vertex_rgb[b][l]
            + hit.bary[2] * tex.per_vertex_rgb[c][l];
    }
    out
}

// ---------------------------------------------------------------------------
// Smoothed-histogram entropy

/// Kernel-smoothed histogram entropy over a fixed range.
///
/// Each sample spreads a truncated-Gaussian kernel (width `sigma_bins` bins,
/// cut at five sigma) over the bin grid, normalized per sample. The reported
/// entropy is the mixture entropy minus the mean per-sample kernel entropy, so
/// identical samples give exactly zero and well-separated clusters give the
/// discrete cluster entropy.
#[derive(Debug, Clone, Copy)]
pub struct SmoothedEntropy {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
    pub sigma_bins: f64,
}

pub const DEFAULT_ENTROPY_BINS: usize = 64;
pub const DEFAULT_ENTROPY_SIGMA_BINS: f64 = 2.0;
const KERNEL_CUTOFF_SIGMAS: f64 = 5.0;

impl SmoothedEntropy {
    pub fn over_range(lo: f64, hi: f64, bins: usize) -> Self {
        SmoothedEntropy {
            lo,
            hi,
            bins,
            sigma_bins: DEFAULT_ENTROPY_SIGMA_BINS,
        }
    }

    /// Entropy and d(entropy)/d(sample) for every sample.
    pub fn value_and_grad(&self, samples: &[f64]) -> (f64, Vec<f64>) {
        let m = samples.len();
        if m == 0 || self.hi - self.lo < 1e-300 {
            return (0.0, vec![0.0; m]);
        }
        let width = (self.hi - self.lo) / self.bins as f64;
        let sigma = self.sigma_bins * width;
        let pad = (KERNEL_CUTOFF_SIGMAS * self.sigma_bins).ceil() as i64;
        let total_bins = self.bins as i64 + 2 * pad;
        let center = |b: i64| self.lo + (b - pad) as f64 * width + 0.5 * width;

        // Per-sample normalized kernel weights and the mixture histogram.
        let mut p = vec![0.0f64; total_bins as usize];
        let mut kernel_entropy_mean = 0.0;
        let support = |x: f64| -> (i64, i64) {
            let radius = KERNEL_CUTOFF_SIGMAS * sigma;
            let b0 = (((x - radius - self.lo) / width).floor() as i64 + pad).max(0);
            let b1 = (((x + radius - self.lo) / width).ceil() as i64 + pad).min(total_bins - 1);
            (b0, b1)
        };
        let weights = |x: f64| -> (i64, Vec<f64>, f64) {
            let (b0, b1) = support(x);
            let mut w: Vec<f64> = (b0..=b1)
                .map(|b| {
                    let d = center(b) - x;
                    (-d * d / (2.0 * sigma * sigma)).exp()
                })
                .collect();
            let s: f64 = w.iter().sum();
            for v in &mut w {
                *v /= s;
            }
            (b0, w, s)
        };
        for &x in samples {
            let (b0, w, _) = weights(x);
            let mut hk = 0.0;
            for (i, &wi) in w.iter().enumerate() {
                p[(b0 + i as i64) as usize] += wi / m as f64;
                if wi > 0.0 {
                    hk -= wi * wi.ln();
                }
            }
            kernel_entropy_mean += hk / m as f64;
        }
        let mut h_mix = 0.0;
        for &pb in &p {
            if pb > 0.0 {
                h_mix -= pb * pb.ln();
            }
        }
        let value = h_mix - kernel_entropy_mean;

        // dH/dx_m = (1/M) sum_b k_b'(x_m) (ln k_b(x_m) - ln p_b).
        let mut grad = vec![0.0f64; m];
        for (mi, &x) in samples.iter().enumerate() {
            let (b0, w, s) = weights(x);
            // s' = sum_b w_raw_b * (t_b - x)/sigma^2; with w normalized,
            // k_b' = k_b * ((t_b - x)/sigma^2 - s'/s).
            let mut s_ratio = 0.0; // s'/s
            for (i, &wi) in w.iter().enumerate() {
                let d = center(b0 + i as i64) - x;
                s_ratio += wi * d / (sigma * sigma);
            }
            let _ = s;
            let mut g = 0.0;
            for (i, &wi) in w.iter().enumerate() {
                if wi <= 0.0 {
                    continue;
                }
                let d = center(b0 + i as i64) - x;
                let kprime = wi * (d / (sigma * sigma) - s_ratio);
                let pb = p[(b0 + i as i64) as usize];
                g += kprime * (wi.ln() - pb.ln());
            }
            grad[mi] = g / m as f64;
        }
        (value, grad)
    }
}

/// Entropy prior on the diffuse texture: log p = -H, summed per channel over
/// intensity in [0, max]. Returns the log prior and its gradient per vertex.
pub fn logp_texture_entropy(tex: &DiffuseTexture, bins: usize) -> (f64, Vec<Rgb>) {
    let n = tex.per_vertex_rgb.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let mut logp = 0.0;
    let mut grad = vec![[0.0f64; 3]; n];
    for l in 0..3 {
        let samples: Vec<f64> = tex.per_vertex_rgb.iter().map(|c| c[l]).collect();
        let max = samples.iter().cloned().fold(0.0f64, f64::max);
        let est = SmoothedEntropy::over_range(0.0, max, bins);
        let (h, g) = est.value_and_grad(&samples);
        logp -= h;
        for (v, gv) in g.iter().enumerate() {
            grad[v][l] = -gv;
        }
    }
    (logp, grad)
}

/// Same as [`logp_texture_entropy`] but with a caller-fixed histogram range;
/// used by finite-difference oracles so the binning does not move with the
/// perturbed sample.
pub fn logp_texture_entropy_with_range(
    tex: &DiffuseTexture,
    bins: usize,
    range: (f64, f64),
) -> (f64, Vec<Rgb>) {
    let n = tex.per_vertex_rgb.len();
    let mut logp = 0.0;
    let mut grad = vec![[0.0f64; 3]; n];
    for l in 0..3 {
        let samples: Vec<f64> = tex.per_vertex_rgb.iter().map(|c| c[l]).collect();
        let est = SmoothedEntropy::over_range(range.0, range.1, bins);
        let (h, g) = est.value_and_grad(&samples);
        logp -= h;
        for (v, gv) in g.iter().enumerate() {
            grad[v][l] = -gv;
        }
    }
    (logp, grad)
}

/// Spatial smoothness over 1-ring mesh edges:
/// sum over edges (u, v) of -|c_u - c_v|^2 * exp(-d(u,v)^2 / sigma_f^2).
pub fn logp_texture_smoothness(
    tex: &DiffuseTexture,
    mesh: &TriangleMesh,
    falloff_sigma: f64,
) -> (f64, Vec<Rgb>) {
    let n = tex.per_vertex_rgb.len();
    let mut logp = 0.0;
    let mut grad = vec![[0.0f64; 3]; n];
    let mut seen = std::collections::HashSet::new();
    for tri in &mesh.triangles {
        for (u, v) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
            let key = (u.min(v), u.max(v));
            if !seen.insert(key) {
                continue;
            }
            let d = (mesh.vertices[u] - mesh.vertices[v]).norm();
            let w = (-d * d / (falloff_sigma * falloff_sigma)).exp();
            for l in 0..3 {
                let diff = tex.per_vertex_rgb[u][l] - tex.per_vertex_rgb[v][l];
                logp -= diff * diff * w;
                grad[u][l] -= 2.0 * diff * w;
                grad[v][l] += 2.0 * diff * w;
            }
        }
    }
    (logp, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Ray;
    use crate::Vec3;

    fn quad_mesh() -> TriangleMesh {
        TriangleMesh::new(
            vec![
                Vec3::new(0.0, 0.0, 0.0),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(1.0, 1.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    fn hit_quad(mesh: &TriangleMesh, x: f64, y: f64) -> Hit {
        let ray = Ray {
            origin: Vec3::new(x, y, 1.0),
            direction: Vec3::new(0.0, 0.0, -1.0),
        };
        mesh.intersect(&ray).unwrap()
    }

    #[test]
    fn texture_at_constant_and_vertex() {
        let mesh = quad_mesh();
        let mut tex = DiffuseTexture::constant(4, [0.3, 0.4, 0.5]);
        tex.enabled = true;
        let hit = hit_quad(&mesh, 0.4, 0.3);
        let c = texture_at(&tex, &mesh, &hit, [9.0; 3]);
        for l in 0..3 {
            assert!((c[l] - [0.3, 0.4, 0.5][l]).abs() < 1e-12);
        }
        // One-hot barycentric at a vertex returns that vertex's color.
        tex.per_vertex_rgb[1] = [1.0, 0.0, 0.0];
        let hit = hit_quad(&mesh, 0.999999, 1e-6);
        let c = texture_at(&tex, &mesh, &hit, [9.0; 3]);
        assert!((c[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn texture_at_random_barycentric_matches_weighted_sum() {
        let mesh = quad_mesh();
        let mut tex = DiffuseTexture {
            per_vertex_rgb: vec![
                [0.1, 0.2, 0.3],
                [0.9, 0.1, 0.4],
                [0.2, 0.8, 0.6],
                [0.5, 0.5, 0.1],
            ],
            enabled: true,
        };
        let hit = hit_quad(&mesh, 0.7, 0.2);
        let c = texture_at(&tex, &mesh, &hit, [9.0; 3]);
        let [a, b, cc] = mesh.triangles[hit.triangle];
        for l in 0..3 {
            let want = hit.bary[0] * tex.per_vertex_rgb[a][l]
                + hit.bary[1] * tex.per_vertex_rgb[b][l]
                + hit.bary[2] * tex.per_vertex_rgb[cc][l];
            assert!((c[l] - want).abs() < 1e-12);
        }
        tex.enabled = false;
        assert_eq!(texture_at(&tex, &mesh, &hit, [9.0; 3]), [9.0; 3]);
    }

    #[test]
    fn entropy_zero_for_constant_texture() {
        let tex = DiffuseTexture {
            per_vertex_rgb: vec![[0.7, 0.2, 0.9]; 40],
            enabled: true,
        };
        let (logp, grad) = logp_texture_entropy(&tex, 64);
        assert!(logp.abs() < 1e-10, "logp = {logp}");
        assert!(grad.iter().flatten().all(|g| g.abs() < 1e-8));
    }

    #[test]
    fn entropy_two_valued_is_log2() {
        let mut colors = vec![[0.0f64; 3]; 40];
        for c in colors.iter_mut().skip(20) {
            *c = [1.0, 1.0, 1.0];
        }
        let tex = DiffuseTexture {
            per_vertex_rgb: colors,
            enabled: true,
        };
        let (logp, _) = logp_texture_entropy(&tex, 64);
        // log p = -H summed over 3 channels, each log 2.
        assert!((logp + 3.0 * (2.0f64).ln()).abs() < 1e-6, "logp = {logp}");
    }

    #[test]
    fn entropy_gradient_matches_fd() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let colors: Vec<Rgb> = (0..30)
            .map(|_| [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)])
            .collect();
        let tex = DiffuseTexture {
            per_vertex_rgb: colors,
            enabled: true,
        };
        let range = (0.0, 1.0);
        let (_, grad) = logp_texture_entropy_with_range(&tex, 64, range);
        let h = 1e-6;
        for v in (0..30).step_by(7) {
            for l in 0..3 {
                let mut tp = tex.clone();
                tp.per_vertex_rgb[v][l] += h;
                let mut tm = tex.clone();
                tm.per_vertex_rgb[v][l] -= h;
                let (lp, _) = logp_texture_entropy_with_range(&tp, 64, range);
                let (lm, _) = logp_texture_entropy_with_range(&tm, 64, range);
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - grad[v][l]).abs() / fd.abs().max(1e-3) < 1e-2,
                    "v={v} l={l} fd={fd} g={}",
                    grad[v][l]
                );
            }
        }
    }

    #[test]
    fn smoothness_constant_is_zero_and_single_edge_closed_form() {
        let mesh = quad_mesh();
        let tex = DiffuseTexture {
            per_vertex_rgb: vec![[0.5; 3]; 4],
            enabled: true,
        };
        let (lp, _) = logp_texture_smoothness(&tex, &mesh, 1.0);
        assert_eq!(lp, 0.0);

        // Single unit-difference edge with w == 1 contributes -1.
        let tri = TriangleMesh::new(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 1.0)],
            vec![[0, 1, 2]],
        );
        // Degenerate positions rejected; use a tiny triangle and huge sigma so w ~= 1.
        drop(tri);
        let mesh2 = TriangleMesh::new(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1e-6, 0.0, 0.0), Vec3::new(0.0, 1e-6, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let tex2 = DiffuseTexture {
            per_vertex_rgb: vec![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
            enabled: true,
        };
        let (lp, _) = logp_texture_smoothness(&tex2, &mesh2, 1e6);
        // Edges (0,1) and (0,2) each carry diff 1 in channel 0.
        assert!((lp + 2.0).abs() < 1e-9, "lp = {lp}");
    }

    #[test]
    fn smoothness_gradient_matches_fd() {
        use rand::{Rng, SeedableRng};
        let mesh = quad_mesh();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let tex = DiffuseTexture {
            per_vertex_rgb: (0..4)
                .map(|_| [rng.gen(), rng.gen(), rng.gen()])
                .collect(),
            enabled: true,
        };
        let (_, grad) = logp_texture_smoothness(&tex, &mesh, 1.3);
        let h = 1e-6;
        for v in 0..4 {
            for l in 0..3 {
                let mut tp = tex.clone();
                tp.per_vertex_rgb[v][l] += h;
                let mut tm = tex.clone();
                tm.per_vertex_rgb[v][l] -= h;
                let (lp, _) = logp_texture_smoothness(&tp, &mesh, 1.3);
                let (lm, _) = logp_texture_smoothness(&tm, &mesh, 1.3);
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - grad[v][l]).abs() / fd.abs().max(1e-4) < 1e-4);
            }
        }
    }

    #[test]
    fn priors_invariant_to_vertex_reordering() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let colors: Vec<Rgb> = (0..10).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let tex = DiffuseTexture {
            per_vertex_rgb: colors.clone(),
            enabled: true,
        };
        let mut rev = colors;
        rev.reverse();
        let tex_rev = DiffuseTexture {
            per_vertex_rgb: rev,
            enabled: true,
        };
        let (a, _) = logp_texture_entropy(&tex, 64);
        let (b, _) = logp_texture_entropy(&tex_rev, 64);
        assert!((a - b).abs() < 1e-10);
    }
}
