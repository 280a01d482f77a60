//! Material segmentation over the spectral geometric bases: per-material
//! latent layers, hard argmax labels, and a softmax relaxation for gradients.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::mesh::{GeometricBases, TriangleMesh};
use crate::Rgb;

/// Segmentation of mesh triangles into K materials. Each material has a
/// latent layer m^(k) = sum_n a_k[n] g^(n) over the geometric bases; the
/// assignment is the per-triangle argmax, relaxed by softmax(m / tau).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaterialSegmentation {
    /// K x N coefficient rows, one per material.
    pub a: Vec<Vec<f64>>,
    /// Softmax temperature for the relaxed assignment.
    pub tau: f64,
}

pub const DEFAULT_SEGMENTATION_TAU: f64 = 0.05;

impl MaterialSegmentation {
    pub fn new(a: Vec<Vec<f64>>, tau: f64) -> Result<Self> {
        if a.is_empty() {
            return Err(contract("segmentation needs at least one material"));
        }
        let n = a[0].len();
        if a.iter().any(|row| row.len() != n) {
            return Err(contract("ragged segmentation coefficient rows"));
        }
        if !(tau > 0.0) {
            return Err(contract("segmentation tau must be positive"));
        }
        Ok(MaterialSegmentation { a, tau })
    }

    /// Single-material segmentation (everything is material 0).
    pub fn trivial(n_bases: usize) -> Self {
        MaterialSegmentation {
            a: vec![vec![0.0; n_bases]],
            tau: DEFAULT_SEGMENTATION_TAU,
        }
    }

    pub fn n_materials(&self) -> usize {
        self.a.len()
    }

    pub fn n_bases(&self) -> usize {
        self.a[0].len()
    }

    /// Latent layer values m^(k) for one triangle.
    pub fn latents(&self, bases: &GeometricBases, tri: usize) -> Vec<f64> {
        self.a
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(n, &an)| an * bases.per_triangle[(tri, n)])
                    .sum()
            })
            .collect()
    }

    /// Hard assignment: argmax over latents, ties to the lowest index.
    pub fn material_at(&self, bases: &GeometricBases, tri: usize) -> usize {
        let m = self.latents(bases, tri);
        let mut best = 0;
        for k in 1..m.len() {
            if m[k] > m[best] {
                best = k;
            }
        }
        best
    }

    /// Hard labels for every triangle.
    pub fn labels(&self, bases: &GeometricBases) -> Vec<usize> {
        (0..bases.per_triangle.nrows())
            .map(|t| self.material_at(bases, t))
            .collect()
    }

    /// softmax(m / tau) for one triangle.
    pub fn soft_weights(&self, bases: &GeometricBases, tri: usize) -> Vec<f64> {
        let m = self.latents(bases, tri);
        let max = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = m.iter().map(|&x| ((x - max) / self.tau).exp()).collect();
        let sum: f64 = w.iter().sum();
        for x in &mut w {
            *x /= sum;
        }
        w
    }

    /// Deposits d(loss)/d(a[k][n]) given d(loss)/d(soft weight k) for one
    /// triangle, per channel. `out` has K rows of N entries.
    ///
    /// dw_k/da_{k',n} = (1/tau) w_k (delta_{kk'} - w_{k'}) g_t^(n).
    pub fn accumulate_soft_grad(
        &self,
        bases: &GeometricBases,
        tri: usize,
        dl_dw: &[Rgb],
        out: &mut [Vec<Rgb>],
    ) {
        let w = self.soft_weights(bases, tri);
        let k_count = self.n_materials();
        // inner_l = sum_k dl_dw[k][l] * w[k]
        let mut inner = [0.0f64; 3];
        for k in 0..k_count {
            for l in 0..3 {
                inner[l] += dl_dw[k][l] * w[k];
            }
        }
        for kp in 0..k_count {
            // dL/dm_{k'} = (1/tau) w_{k'} (dl_dw[k'] - inner)
            let mut dm = [0.0f64; 3];
            for l in 0..3 {
                dm[l] = w[kp] / self.tau * (dl_dw[kp][l] - inner[l]);
            }
            for n in 0..self.n_bases() {
                let g = bases.per_triangle[(tri, n)];
                for l in 0..3 {
                    out[kp][n][l] += dm[l] * g;
                }
            }
        }
    }
}

/// Result of segmentation initialization.
pub struct SegmentationInit {
    pub segmentation: MaterialSegmentation,
    /// k-means labels the coefficients were fitted to.
    pub kmeans_labels: Vec<usize>,
    /// Fraction of triangles whose argmax label reproduces the k-means label.
    pub agreement: f64,
}

/// Initializes K materials by k-means over per-triangle features
/// [g^(1..N), color * color_weight], then least-squares fits the coefficient
/// rows to +/-1 indicator targets. Basis columns are orthonormal, so the
/// least-squares solution is a_k = G^T t_k.
pub fn init_segmentation(
    mesh: &TriangleMesh,
    bases: &GeometricBases,
    k: usize,
    color_weight: f64,
    tau: f64,
    seed: u64,
) -> Result<SegmentationInit> {
    let t_count = bases.per_triangle.nrows();
    if k == 0 || k > t_count {
        return Err(contract(format!("invalid material count {k} for {t_count} triangles")));
    }
    let n_bases = bases.per_triangle.ncols();
    let dim = n_bases + 3;
    let mut feats = DMatrix::zeros(t_count, dim);
    for t in 0..t_count {
        for n in 0..n_bases {
            feats[(t, n)] = bases.per_triangle[(t, n)];
        }
        for l in 0..3 {
            feats[(t, n_bases + l)] = mesh.triangle_colors[t][l] * color_weight;
        }
    }
    let labels = kmeans(&feats, k, 20, seed);

    let mut a = vec![vec![0.0; n_bases]; k];
    for (kk, row) in a.iter_mut().enumerate() {
        for (n, an) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for t in 0..t_count {
                let target = if labels[t] == kk { 1.0 } else { -1.0 };
                acc += bases.per_triangle[(t, n)] * target;
            }
            *an = acc;
        }
    }
    let segmentation = MaterialSegmentation::new(a, tau)?;
    let rep = segmentation.labels(bases);
    let agree = rep.iter().zip(&labels).filter(|(a, b)| a == b).count();
    Ok(SegmentationInit {
        segmentation,
        kmeans_labels: labels,
        agreement: agree as f64 / t_count as f64,
    })
}

/// Lloyd's algorithm with k-means++ seeding; best inertia over `restarts`.
pub fn kmeans(feats: &DMatrix<f64>, k: usize, restarts: usize, seed: u64) -> Vec<usize> {
    let n = feats.nrows();
    let dim = feats.ncols();
    let mut best_labels = vec![0usize; n];
    let mut best_inertia = f64::INFINITY;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist2 = |row: usize, c: &[f64]| -> f64 {
        let mut d = 0.0;
        for j in 0..dim {
            let diff = feats[(row, j)] - c[j];
            d += diff * diff;
        }
        d
    };
    for _ in 0..restarts {
        // k-means++ seeding.
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
        let first = rng.gen_range(0..n);
        centers.push((0..dim).map(|j| feats[(first, j)]).collect());
        let mut min_d2: Vec<f64> = (0..n).map(|r| dist2(r, &centers[0])).collect();
        while centers.len() < k {
            let total: f64 = min_d2.iter().sum();
            let pick = if total > 0.0 {
                let mut u = rng.gen::<f64>() * total;
                let mut idx = n - 1;
                for (r, &d) in min_d2.iter().enumerate() {
                    if u < d {
                        idx = r;
                        break;
                    }
                    u -= d;
                }
                idx
            } else {
                rng.gen_range(0..n)
            };
            let c: Vec<f64> = (0..dim).map(|j| feats[(pick, j)]).collect();
            for r in 0..n {
                min_d2[r] = min_d2[r].min(dist2(r, &c));
            }
            centers.push(c);
        }
        // Lloyd iterations.
        let mut labels = vec![0usize; n];
        for _ in 0..100 {
            let mut changed = false;
            for r in 0..n {
                let mut best = 0;
                let mut bd = dist2(r, &centers[0]);
                for (c, center) in centers.iter().enumerate().skip(1) {
                    let d = dist2(r, center);
                    if d < bd {
                        bd = d;
                        best = c;
                    }
                }
                if labels[r] != best {
                    labels[r] = best;
                    changed = true;
                }
            }
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for r in 0..n {
                counts[labels[r]] += 1;
                for j in 0..dim {
                    sums[labels[r]][j] += feats[(r, j)];
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    for j in 0..dim {
                        centers[c][j] = sums[c][j] / counts[c] as f64;
                    }
                } else {
                    // Re-seed an empty cluster at the farthest point.
                    let far = (0..n)
                        .max_by(|&a, &b| {
                            dist2(a, &centers[labels[a]])
                                .partial_cmp(&dist2(b, &centers[labels[b]]))
                                .unwrap()
                        })
                        .unwrap();
                    for j in 0..dim {
                        centers[c][j] = feats[(far, j)];
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = (0..n).map(|r| dist2(r, &centers[labels[r]])).sum();
        if inertia < best_inertia {
            best_inertia = inertia;
            best_labels = labels;
        }
    }
    // Canonical label order: clusters renumbered by first occurrence.
    let mut remap = vec![usize::MAX; k];
    let mut next = 0;
    for l in &best_labels {
        if remap[*l] == usize::MAX {
            remap[*l] = next;
            next += 1;
        }
    }
    best_labels.iter().map(|&l| remap[l]).collect()
}
