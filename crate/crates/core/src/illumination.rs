//! Equirectangular environment map: lookup, luminance importance sampling,
//! and the three illumination priors (log-gradient sparsity, entropy,
//! Dirichlet chromaticity).

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::texture::SmoothedEntropy;
use crate::{Rgb, Vec3};

/// Rec. 709 luminance weights.
pub const LUMA: [f64; 3] = [0.2126, 0.7152, 0.0722];

pub fn luminance(c: &Rgb) -> f64 {
    LUMA[0] * c[0] + LUMA[1] * c[1] + LUMA[2] * c[2]
}

/// Infinitely-distant equirectangular radiance map. Row 0 spans theta near 0
/// (the +Y pole); phi in [0, 2pi) across the width; +Y is up.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvironmentMap {
    pub width: usize,
    pub height: usize,
    /// Row-major H x W linear radiance.
    pub radiance: Vec<Rgb>,
    #[serde(skip)]
    cdf: Option<LightCdf>,
}

#[derive(Debug, Clone)]
struct LightCdf {
    /// Cumulative over rows of summed texel weights.
    row_cdf: Vec<f64>,
    /// Per row, cumulative over columns.
    col_cdf: Vec<f64>,
    /// Solid-angle pdf per texel (0 when the map is black).
    texel_pdf: Vec<f64>,
    total: f64,
}

impl PartialEq for EnvironmentMap {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height && self.radiance == other.radiance
    }
}

impl EnvironmentMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self::from_radiance(width, height, vec![[0.0; 3]; width * height])
    }

    pub fn constant(width: usize, height: usize, value: Rgb) -> Self {
        Self::from_radiance(width, height, vec![value; width * height])
    }

    pub fn from_radiance(width: usize, height: usize, radiance: Vec<Rgb>) -> Self {
        assert_eq!(radiance.len(), width * height);
        let mut env = EnvironmentMap {
            width,
            height,
            radiance,
            cdf: None,
        };
        env.rebuild_cdf();
        env
    }

    pub fn from_image(img: &crate::io::HdrImage) -> Self {
        Self::from_radiance(img.width, img.height, img.pixels.clone())
    }

    pub fn to_image(&self) -> crate::io::HdrImage {
        crate::io::HdrImage {
            width: self.width,
            height: self.height,
            pixels: self.radiance.clone(),
        }
    }

    /// Replaces the radiance grid and rebuilds the sampling tables.
    pub fn set_radiance(&mut self, radiance: Vec<Rgb>) {
        assert_eq!(radiance.len(), self.width * self.height);
        self.radiance = radiance;
        self.rebuild_cdf();
    }

    /// Replaces the radiance grid but keeps the sampling tables of the current
    /// map. Used by finite-difference oracles so a radiance perturbation does
    /// not move the light proposal distribution.
    pub fn with_radiance_frozen_cdf(&self, radiance: Vec<Rgb>) -> Self {
        assert_eq!(radiance.len(), self.width * self.height);
        EnvironmentMap {
            width: self.width,
            height: self.height,
            radiance,
            cdf: self.cdf.clone(),
        }
    }

    /// Exact solid angle of a texel in the given row.
    pub fn texel_solid_angle(&self, row: usize) -> f64 {
        let t0 = row as f64 * PI / self.height as f64;
        let t1 = (row + 1) as f64 * PI / self.height as f64;
        (2.0 * PI / self.width as f64) * (t0.cos() - t1.cos())
    }

    pub fn rebuild_cdf(&mut self) {
        let (w, h) = (self.width, self.height);
        let mut col_cdf = vec![0.0; w * h];
        let mut row_cdf = vec![0.0; h];
        let mut texel_weight = vec![0.0; w * h];
        let mut total = 0.0;
        for r in 0..h {
            let omega = self.texel_solid_angle(r);
            let mut row_sum = 0.0;
            for c in 0..w {
                let wt = luminance(&self.radiance[r * w + c]).max(0.0) * omega;
                texel_weight[r * w + c] = wt;
                row_sum += wt;
                col_cdf[r * w + c] = row_sum;
            }
            total += row_sum;
            row_cdf[r] = total;
        }
        let mut texel_pdf = vec![0.0; w * h];
        if total > 0.0 {
            for r in 0..h {
                let omega = self.texel_solid_angle(r);
                for c in 0..w {
                    texel_pdf[r * w + c] = texel_weight[r * w + c] / (total * omega);
                }
            }
            for r in 0..h {
                row_cdf[r] /= total;
                let row_total = col_cdf[r * w + w - 1];
                if row_total > 0.0 {
                    for c in 0..w {
                        col_cdf[r * w + c] /= row_total;
                    }
                }
            }
            // Guard against accumulation shortfall.
            row_cdf[h - 1] = 1.0;
            for r in 0..h {
                col_cdf[r * w + w - 1] = 1.0;
            }
        }
        self.cdf = Some(LightCdf {
            row_cdf,
            col_cdf,
            texel_pdf,
            total,
        });
    }

    fn cdf(&self) -> &LightCdf {
        self.cdf.as_ref().expect("cdf built at construction")
    }

    /// (row, col) of the texel containing a unit direction.
    pub fn direction_to_texel(&self, d: &Vec3) -> (usize, usize) {
        let theta = d.y.clamp(-1.0, 1.0).acos();
        let mut phi = d.z.atan2(d.x);
        if phi < 0.0 {
            phi += 2.0 * PI;
        }
        let row = ((theta / PI) * self.height as f64) as usize;
        let col = ((phi / (2.0 * PI)) * self.width as f64) as usize;
        (row.min(self.height - 1), col.min(self.width - 1))
    }

    /// Direction of the texel center.
    pub fn texel_center_direction(&self, row: usize, col: usize) -> Vec3 {
        let theta = (row as f64 + 0.5) * PI / self.height as f64;
        let phi = (col as f64 + 0.5) * 2.0 * PI / self.width as f64;
        Vec3::new(theta.sin() * phi.cos(), theta.cos(), theta.sin() * phi.sin())
    }

    /// The four (texel index, weight) pairs of the bilinear footprint of a
    /// direction, with phi wraparound and nearest-row clamping at the poles.
    pub fn lookup_weights(&self, d: &Vec3) -> [(usize, f64); 4] {
        let theta = d.y.clamp(-1.0, 1.0).acos();
        let mut phi = d.z.atan2(d.x);
        if phi < 0.0 {
            phi += 2.0 * PI;
        }
        let x = (phi / (2.0 * PI)) * self.width as f64 - 0.5;
        let y = (theta / PI) * self.height as f64 - 0.5;
        let x0f = x.floor();
        let y0f = y.floor();
        let fx = x - x0f;
        let fy = y - y0f;
        let wrap = |c: i64| -> usize { c.rem_euclid(self.width as i64) as usize };
        let clampr = |r: i64| -> usize { r.clamp(0, self.height as i64 - 1) as usize };
        let x0 = wrap(x0f as i64);
        let x1 = wrap(x0f as i64 + 1);
        let y0 = clampr(y0f as i64);
        let y1 = clampr(y0f as i64 + 1);
        [
            (y0 * self.width + x0, (1.0 - fx) * (1.0 - fy)),
            (y0 * self.width + x1, fx * (1.0 - fy)),
            (y1 * self.width + x0, (1.0 - fx) * fy),
            (y1 * self.width + x1, fx * fy),
        ]
    }

    /// Bilinear radiance lookup.
    pub fn lookup(&self, d: &Vec3) -> Rgb {
        let mut out = [0.0f64; 3];
        for (idx, w) in self.lookup_weights(d) {
            for l in 0..3 {
                out[l] += w * self.radiance[idx][l];
            }
        }
        out
    }

    /// Draws a direction with probability proportional to texel luminance
    /// times solid angle, jittered uniformly (in solid angle) within the
    /// texel. Falls back to uniform sphere sampling on an all-black map.
    pub fn sample_light<R: Rng>(&self, rng: &mut R) -> (Vec3, f64) {
        let cdf = self.cdf();
        if cdf.total <= 0.0 {
            let z: f64 = rng.gen_range(-1.0..1.0);
            let phi: f64 = rng.gen_range(0.0..2.0 * PI);
            let s = (1.0 - z * z).max(0.0).sqrt();
            return (Vec3::new(s * phi.cos(), z, s * phi.sin()), 1.0 / (4.0 * PI));
        }
        let ur: f64 = rng.gen();
        let row = cdf.row_cdf.partition_point(|&c| c < ur).min(self.height - 1);
        let uc: f64 = rng.gen();
        let base = row * self.width;
        let col = cdf.col_cdf[base..base + self.width]
            .partition_point(|&c| c < uc)
            .min(self.width - 1);
        // Uniform-in-solid-angle jitter within the texel.
        let t0 = (row as f64 * PI / self.height as f64).cos();
        let t1 = ((row + 1) as f64 * PI / self.height as f64).cos();
        let ct = t0 + (t1 - t0) * rng.gen::<f64>();
        let st = (1.0 - ct * ct).max(0.0).sqrt();
        let phi = (col as f64 + rng.gen::<f64>()) * 2.0 * PI / self.width as f64;
        let dir = Vec3::new(st * phi.cos(), ct, st * phi.sin());
        (dir, cdf.texel_pdf[base + col])
    }

    /// Density of [`Self::sample_light`] at a direction.
    pub fn pdf_light(&self, d: &Vec3) -> f64 {
        let cdf = self.cdf();
        if cdf.total <= 0.0 {
            return 1.0 / (4.0 * PI);
        }
        let (r, c) = self.direction_to_texel(d);
        cdf.texel_pdf[r * self.width + c]
    }

    pub fn mean_radiance(&self) -> f64 {
        let n = (self.radiance.len() * 3) as f64;
        self.radiance.iter().flatten().sum::<f64>() / n
    }
}

// ---------------------------------------------------------------------------
// Priors

/// Hyper-Laplacian sparsity on forward differences of log radiance:
/// sum over texels of -(1/b) * (sqrt(sum_l dtheta^2 + dphi^2 + 1e-8))^alpha.
/// The log is taken on L + eps with eps relative to the map mean, which makes
/// the value invariant to global rescaling.
pub fn logp_illum_gradient_sparsity(env: &EnvironmentMap, b: f64, alpha: f64) -> (f64, Vec<Rgb>) {
    const ROOT_REG: f64 = 1e-8;
    let (w, h) = (env.width, env.height);
    let eps = 1e-6 * env.mean_radiance().max(1e-300);
    let logl: Vec<Rgb> = env
        .radiance
        .iter()
        .map(|p| [
            (p[0] + eps).ln(),
            (p[1] + eps).ln(),
            (p[2] + eps).ln(),
        ])
        .collect();
    let mut value = 0.0;
    let mut grad_log = vec![[0.0f64; 3]; w * h];
    for r in 0..h {
        for c in 0..w {
            let idx = r * w + c;
            let down = if r + 1 < h { Some((r + 1) * w + c) } else { None };
            let right = r * w + (c + 1) % w;
            let mut sq = ROOT_REG;
            let mut dth = [0.0f64; 3];
            let mut dph = [0.0f64; 3];
            for l in 0..3 {
                if let Some(dn) = down {
                    dth[l] = logl[dn][l] - logl[idx][l];
                }
                dph[l] = logl[right][l] - logl[idx][l];
                sq += dth[l] * dth[l] + dph[l] * dph[l];
            }
            let root = sq.sqrt();
            value -= root.powf(alpha) / b;
            // d(value)/d(diff) = -(alpha/b) root^(alpha-2) * diff
            let scale = -(alpha / b) * root.powf(alpha - 2.0);
            for l in 0..3 {
                if let Some(dn) = down {
                    grad_log[dn][l] += scale * dth[l];
                    grad_log[idx][l] -= scale * dth[l];
                }
                grad_log[right][l] += scale * dph[l];
                grad_log[idx][l] -= scale * dph[l];
            }
        }
    }
    // Chain d/dL = d/dlogL * 1/(L + eps); eps is held fixed w.r.t. L here.
    let grad = env
        .radiance
        .iter()
        .zip(&grad_log)
        .map(|(p, g)| [
            g[0] / (p[0] + eps),
            g[1] / (p[1] + eps),
            g[2] / (p[2] + eps),
        ])
        .collect();
    (value, grad)
}

/// Entropy of the log-luminance distribution via the shared smoothed
/// histogram; returns (-H, gradient of -H). The posterior applies this with a
/// configurable sign (the text of the source model prefers LARGE entropy).
pub fn logp_illum_entropy(env: &EnvironmentMap, bins: usize) -> (f64, Vec<Rgb>) {
    let eps = 1e-9 * env.mean_radiance().max(1e-300);
    let lums: Vec<f64> = env.radiance.iter().map(|p| (luminance(p) + eps).ln()).collect();
    let lo = lums.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = lums.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    logp_illum_entropy_with_range(env, bins, (lo, hi))
}

/// Range-frozen variant for finite-difference oracles.
pub fn logp_illum_entropy_with_range(
    env: &EnvironmentMap,
    bins: usize,
    range: (f64, f64),
) -> (f64, Vec<Rgb>) {
    let eps = 1e-9 * env.mean_radiance().max(1e-300);
    let lums: Vec<f64> = env.radiance.iter().map(|p| luminance(p) + eps).collect();
    let samples: Vec<f64> = lums.iter().map(|l| l.ln()).collect();
    let est = SmoothedEntropy::over_range(range.0, range.1, bins);
    let (h, g) = est.value_and_grad(&samples);
    let grad = env
        .radiance
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let d_dlum = -g[i] / lums[i];
            [d_dlum * LUMA[0], d_dlum * LUMA[1], d_dlum * LUMA[2]]
        })
        .collect();
    (-h, grad)
}

/// Dirichlet prior on per-texel chromaticity:
/// sum over texels and channels of (alpha - 1) log(L_l / sum L), with
/// chromaticities clamped at 1e-6. Zero-total texels are skipped.
pub fn logp_illum_chromaticity(env: &EnvironmentMap, alpha: f64) -> (f64, Vec<Rgb>) {
    const CHROMA_FLOOR: f64 = 1e-6;
    let mut value = 0.0;
    let mut grad = vec![[0.0f64; 3]; env.radiance.len()];
    for (i, p) in env.radiance.iter().enumerate() {
        let sum = p[0] + p[1] + p[2];
        if sum <= 0.0 {
            continue;
        }
        for l in 0..3 {
            let rho = p[l] / sum;
            if rho < CHROMA_FLOOR {
                value += (alpha - 1.0) * CHROMA_FLOOR.ln();
                // Clamped: zero gradient.
            } else {
                value += (alpha - 1.0) * rho.ln();
                for m in 0..3 {
                    let d = if m == l { 1.0 / p[l] } else { 0.0 } - 1.0 / sum;
                    grad[i][m] += (alpha - 1.0) * d;
                }
            }
        }
    }
    (value, grad)
}
