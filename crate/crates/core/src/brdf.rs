//! DSBRDF reflectance: evaluation, importance sampling, analytic parameter
//! gradients, and the coefficient / hue priors.
//!
//! A material is f_lambda(theta_d, theta_h) =
//!   sum_r (exp{kappa_r(theta_d) * cos^gamma_r(theta_d)(theta_h)} - 1) * c_{r,lambda},
//! where kappa_r and gamma_r are mean curves plus a Psi-weighted combination of
//! basis curves. A single Psi vector of length B jointly parameterizes the
//! kappa and gamma curves of all lobes; the data-file layout fixes which basis
//! entry drives which curve.

use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::{Rgb, Vec3};

/// Number of theta_d knots in every curve.
pub const CURVE_KNOTS: usize = 90;

/// Counts BRDF evaluations whose unclamped value went negative.
pub static NEGATIVE_EVAL_COUNT: AtomicU64 = AtomicU64::new(0);

/// Piecewise-linear curve over a uniform theta_d grid on [0, pi/2].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub knots: Vec<f64>,
}

impl Curve {
    pub fn constant(v: f64) -> Self {
        Curve {
            knots: vec![v; CURVE_KNOTS],
        }
    }

    pub fn from_fn(f: impl Fn(f64) -> f64) -> Self {
        let knots = (0..CURVE_KNOTS)
            .map(|i| f(i as f64 / (CURVE_KNOTS - 1) as f64 * FRAC_PI_2))
            .collect();
        Curve { knots }
    }

    pub fn eval(&self, theta_d: f64) -> f64 {
        let n = self.knots.len();
        let x = (theta_d / FRAC_PI_2).clamp(0.0, 1.0) * (n - 1) as f64;
        let i = (x.floor() as usize).min(n - 2);
        let frac = x - i as f64;
        self.knots[i] * (1.0 - frac) + self.knots[i + 1] * frac
    }
}

/// Per-lobe mean and basis curves for kappa and gamma.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LobeBasis {
    pub kappa_mean: Curve,
    pub gamma_mean: Curve,
    /// B curves each; entry b is scaled by Psi_b.
    pub kappa_bases: Vec<Curve>,
    pub gamma_bases: Vec<Curve>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReflectanceBasisSet {
    pub n_lobes: usize,
    pub n_coeffs: usize,
    pub lobes: Vec<LobeBasis>,
}

impl ReflectanceBasisSet {
    pub fn validate(&self) -> Result<()> {
        if self.lobes.len() != self.n_lobes {
            return Err(config("lobe count mismatch in basis set"));
        }
        for lobe in &self.lobes {
            if lobe.kappa_bases.len() != self.n_coeffs || lobe.gamma_bases.len() != self.n_coeffs {
                return Err(config("basis curve count does not match n_coeffs"));
            }
            for c in [&lobe.kappa_mean, &lobe.gamma_mean]
                .into_iter()
                .chain(lobe.kappa_bases.iter())
                .chain(lobe.gamma_bases.iter())
            {
                if c.knots.len() != CURVE_KNOTS {
                    return Err(config("curve must have 90 knots"));
                }
                if c.knots.iter().any(|v| !v.is_finite()) {
                    return Err(config("non-finite curve knot"));
                }
            }
        }
        Ok(())
    }

    /// kappa_r(theta_d) for material psi.
    pub fn kappa(&self, lobe: usize, psi: &[f64], theta_d: f64) -> f64 {
        let lb = &self.lobes[lobe];
        let mut v = lb.kappa_mean.eval(theta_d);
        for (b, &p) in psi.iter().enumerate() {
            v += p * lb.kappa_bases[b].eval(theta_d);
        }
        v
    }

    /// gamma_r(theta_d), clamped to >= 0 (exponent of a cosine).
    pub fn gamma(&self, lobe: usize, psi: &[f64], theta_d: f64) -> (f64, bool) {
        let lb = &self.lobes[lobe];
        let mut v = lb.gamma_mean.eval(theta_d);
        for (b, &p) in psi.iter().enumerate() {
            v += p * lb.gamma_bases[b].eval(theta_d);
        }
        if v < 0.0 {
            (0.0, true)
        } else {
            (v, false)
        }
    }

    /// Mean gamma of the most specular lobe at theta_d = 0; drives the
    /// specular half of the sampling proposal.
    pub fn max_mean_gamma_at_zero(&self) -> f64 {
        self.lobes
            .iter()
            .map(|l| l.gamma_mean.eval(0.0))
            .fold(0.0, f64::max)
    }

    /// Hand-designed three-lobe fallback (diffuse / glossy / specular) used
    /// when no learned basis file is supplied.
    pub fn synthetic_fallback() -> Self {
        let b = 7;
        let zero_bases = || vec![Curve::constant(0.0); b];
        // Diffuse: gamma == 0 so the lobe is angle-independent.
        let mut diffuse = LobeBasis {
            kappa_mean: Curve::constant(0.6),
            gamma_mean: Curve::constant(0.0),
            kappa_bases: zero_bases(),
            gamma_bases: zero_bases(),
        };
        diffuse.kappa_bases[0] = Curve::constant(0.5);
        diffuse.kappa_bases[5] = Curve::from_fn(|t| 0.3 * (t / FRAC_PI_2 - 0.5));

        let mut glossy = LobeBasis {
            kappa_mean: Curve::from_fn(|t| 0.8 * t.cos()),
            gamma_mean: Curve::from_fn(|t| 25.0 - 8.0 * t / FRAC_PI_2),
            kappa_bases: zero_bases(),
            gamma_bases: zero_bases(),
        };
        glossy.kappa_bases[1] = Curve::constant(0.6);
        glossy.gamma_bases[3] = Curve::constant(10.0);
        glossy.kappa_bases[5] = Curve::from_fn(|t| 0.2 * (t / FRAC_PI_2 - 0.5));

        let mut specular = LobeBasis {
            kappa_mean: Curve::from_fn(|t| 1.2 * t.cos()),
            gamma_mean: Curve::from_fn(|t| 250.0 * (1.0 - 0.4 * t / FRAC_PI_2)),
            kappa_bases: zero_bases(),
            gamma_bases: zero_bases(),
        };
        specular.kappa_bases[2] = Curve::constant(0.8);
        specular.gamma_bases[4] = Curve::from_fn(|t| 100.0 * (1.0 - 0.5 * t / FRAC_PI_2));
        specular.kappa_bases[6] = Curve::from_fn(|t| 0.4 * (t / FRAC_PI_2 - 0.5));

        let set = ReflectanceBasisSet {
            n_lobes: 3,
            n_coeffs: b,
            lobes: vec![diffuse, glossy, specular],
        };
        set.validate().expect("fallback basis is valid");
        set
    }
}

/// Basis/prior data file contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasisFile {
    pub version: u32,
    pub basis: ReflectanceBasisSet,
    pub prior: MoGPriorData,
}

impl BasisFile {
    pub fn load(path: &std::path::Path) -> Result<(ReflectanceBasisSet, MoGPrior)> {
        let text = std::fs::read_to_string(path)?;
        let file: BasisFile = serde_json::from_str(&text)?;
        file.basis.validate()?;
        let prior = MoGPrior::from_data(&file.prior, file.basis.n_coeffs)?;
        Ok((file.basis, prior))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// One material: coefficient vector Psi plus per-lobe colors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsbrdfMaterial {
    pub psi: Vec<f64>,
    pub lobe_colors: Vec<Rgb>,
    /// Index of the least specular lobe; its color is overridden by the
    /// diffuse texture when texture estimation is enabled.
    pub diffuse_lobe_index: usize,
}

impl DsbrdfMaterial {
    /// Gray diffuse start; sharp lobes begin near zero so specularity has to
    /// be earned from the data rather than carried in from the init.
    pub fn neutral(basis: &ReflectanceBasisSet) -> Self {
        let diffuse = least_specular_lobe(basis);
        let mut lobe_colors = vec![[0.01, 0.01, 0.01]; basis.n_lobes];
        lobe_colors[diffuse] = [0.5, 0.5, 0.5];
        DsbrdfMaterial {
            psi: vec![0.0; basis.n_coeffs],
            lobe_colors,
            diffuse_lobe_index: diffuse,
        }
    }
}

/// Lobe with the smallest mean gamma at theta_d = 0.
pub fn least_specular_lobe(basis: &ReflectanceBasisSet) -> usize {
    let mut best = 0;
    let mut best_gamma = f64::INFINITY;
    for (r, lobe) in basis.lobes.iter().enumerate() {
        let g = lobe.gamma_mean.eval(0.0);
        if g < best_gamma {
            best_gamma = g;
            best = r;
        }
    }
    best
}

/// Per-lobe factor exp{kappa cos^gamma theta_h} - 1; this is both the lobe's
/// contribution scale and d f_lambda / d c_{r,lambda}.
fn lobe_factor(basis: &ReflectanceBasisSet, lobe: usize, psi: &[f64], theta_d: f64, theta_h: f64) -> f64 {
    let kappa = basis.kappa(lobe, psi, theta_d);
    let (gamma, _) = basis.gamma(lobe, psi, theta_d);
    let u = theta_h.cos().clamp(0.0, 1.0);
    (kappa * u.powf(gamma)).exp() - 1.0
}

pub fn eval_brdf(
    mat: &DsbrdfMaterial,
    basis: &ReflectanceBasisSet,
    theta_d: f64,
    theta_h: f64,
    diffuse_override: Option<Rgb>,
) -> Result<Rgb> {
    check_angles(theta_d, theta_h)?;
    let mut f = [0.0f64; 3];
    for r in 0..basis.n_lobes {
        let e = lobe_factor(basis, r, &mat.psi, theta_d, theta_h);
        let c = lobe_color(mat, r, diffuse_override);
        for l in 0..3 {
            f[l] += e * c[l];
        }
    }
    if f.iter().any(|&v| v < 0.0) {
        NEGATIVE_EVAL_COUNT.fetch_add(1, Ordering::Relaxed);
    }
    Ok([f[0].max(0.0), f[1].max(0.0), f[2].max(0.0)])
}

fn lobe_color(mat: &DsbrdfMaterial, r: usize, diffuse_override: Option<Rgb>) -> Rgb {
    match diffuse_override {
        Some(c) if r == mat.diffuse_lobe_index => c,
        _ => mat.lobe_colors[r],
    }
}

fn check_angles(theta_d: f64, theta_h: f64) -> Result<()> {
    const SLACK: f64 = 1e-9;
    if !(-SLACK..=FRAC_PI_2 + SLACK).contains(&theta_d)
        || !(-SLACK..=FRAC_PI_2 + SLACK).contains(&theta_h)
    {
        return Err(contract(format!(
            "angles out of range: theta_d={theta_d}, theta_h={theta_h}"
        )));
    }
    Ok(())
}

/// Analytic partials of `eval_brdf`.
#[derive(Debug, Clone)]
pub struct BrdfGrad {
    /// d f_lambda / d Psi_b, indexed [b][lambda].
    pub d_psi: Vec<[f64; 3]>,
    /// d f_lambda / d c_{r,lambda} per lobe (diagonal across channels).
    pub d_lobe_color: Vec<f64>,
}

pub fn grad_brdf(
    mat: &DsbrdfMaterial,
    basis: &ReflectanceBasisSet,
    theta_d: f64,
    theta_h: f64,
    diffuse_override: Option<Rgb>,
) -> Result<BrdfGrad> {
    check_angles(theta_d, theta_h)?;
    let b_count = basis.n_coeffs;
    let u = theta_h.cos().clamp(0.0, 1.0);
    let mut d_psi = vec![[0.0f64; 3]; b_count];
    let mut d_lobe_color = vec![0.0f64; basis.n_lobes];
    // Track per-channel unclamped value so the clamp's zero subgradient applies.
    let mut raw = [0.0f64; 3];
    let mut lobe_terms: Vec<(f64, f64, f64, bool, Rgb)> = Vec::with_capacity(basis.n_lobes);
    for r in 0..basis.n_lobes {
        let kappa = basis.kappa(r, &mat.psi, theta_d);
        let (gamma, clamped) = basis.gamma(r, &mat.psi, theta_d);
        let c = lobe_color(mat, r, diffuse_override);
        let e = (kappa * u.powf(gamma)).exp() - 1.0;
        for l in 0..3 {
            raw[l] += e * c[l];
        }
        d_lobe_color[r] = e;
        lobe_terms.push((kappa, gamma, e, clamped, c));
    }
    let active = [raw[0] >= 0.0, raw[1] >= 0.0, raw[2] >= 0.0];
    for (r, &(kappa, gamma, e, gamma_clamped, c)) in lobe_terms.iter().enumerate() {
        let lb = &basis.lobes[r];
        let upg = u.powf(gamma);
        let exp_term = e + 1.0;
        // cos^g * ln(cos) -> 0 as cos -> 0 when g > 0; at g == 0 the gamma
        // partial is suppressed by the clamp or by zero bases.
        let upg_lnu = if u > 1e-300 { upg * u.ln() } else { 0.0 };
        for b in 0..b_count {
            let dkappa = lb.kappa_bases[b].eval(theta_d);
            let dgamma = if gamma_clamped { 0.0 } else { lb.gamma_bases[b].eval(theta_d) };
            let dlobe = exp_term * (dkappa * upg + kappa * dgamma * upg_lnu);
            for l in 0..3 {
                if active[l] {
                    d_psi[b][l] += dlobe * c[l];
                }
            }
        }
    }
    Ok(BrdfGrad { d_psi, d_lobe_color })
}

/// d f_lambda / d(cos theta_h), with the same per-channel clamp subgradient
/// as `eval_brdf`. Drives the shading-normal chain of geometry gradients.
pub fn grad_brdf_costheta_h(
    mat: &DsbrdfMaterial,
    basis: &ReflectanceBasisSet,
    theta_d: f64,
    theta_h: f64,
    diffuse_override: Option<Rgb>,
) -> Result<Rgb> {
    check_angles(theta_d, theta_h)?;
    let u = theta_h.cos().clamp(0.0, 1.0);
    let mut raw = [0.0f64; 3];
    let mut d = [0.0f64; 3];
    for r in 0..basis.n_lobes {
        let kappa = basis.kappa(r, &mat.psi, theta_d);
        let (gamma, _) = basis.gamma(r, &mat.psi, theta_d);
        let c = lobe_color(mat, r, diffuse_override);
        let e = (kappa * u.powf(gamma)).exp();
        for l in 0..3 {
            raw[l] += (e - 1.0) * c[l];
        }
        // d/du exp(kappa u^gamma) = exp(..) kappa gamma u^(gamma-1).
        let du = if gamma == 0.0 || u <= 0.0 {
            0.0
        } else {
            e * kappa * gamma * u.powf(gamma - 1.0)
        };
        for l in 0..3 {
            d[l] += du * c[l];
        }
    }
    for l in 0..3 {
        if raw[l] < 0.0 {
            d[l] = 0.0;
        }
    }
    Ok(d)
}

/// (theta_d, theta_h) of a direction pair in the halfway parameterization.
pub fn half_angles(omega_i: &Vec3, omega_o: &Vec3, normal: &Vec3) -> (f64, f64) {
    let h = omega_i + omega_o;
    let len = h.norm();
    if len < 1e-12 {
        return (FRAC_PI_2, FRAC_PI_2);
    }
    let h = h / len;
    let theta_h = h.dot(normal).clamp(-1.0, 1.0).acos().min(FRAC_PI_2);
    let theta_d = h.dot(omega_i).clamp(-1.0, 1.0).acos().min(FRAC_PI_2);
    (theta_d, theta_h)
}

// ---------------------------------------------------------------------------
// Sampling

/// Default mixture weight of the specular proposal half.
pub const DEFAULT_SPECULAR_WEIGHT: f64 = 0.5;

fn orthonormal_frame(n: &Vec3) -> (Vec3, Vec3) {
    let a = if n.x.abs() > 0.9 {
        Vec3::new(0.0, 1.0, 0.0)
    } else {
        Vec3::new(1.0, 0.0, 0.0)
    };
    let t = n.cross(&a).normalize();
    let b = n.cross(&t);
    (t, b)
}

/// Draws omega_i from the mixture proposal (cosine hemisphere + power-cosine
/// lobe around the mirror reflection of omega_o). Lobe samples that land below
/// the horizon are reflected back across the tangent plane, which keeps the
/// pdf normalized over the hemisphere in closed form.
pub fn sample_brdf<R: Rng>(
    basis: &ReflectanceBasisSet,
    omega_o: &Vec3,
    normal: &Vec3,
    specular_weight: f64,
    rng: &mut R,
) -> Result<(Vec3, f64)> {
    if (normal.norm() - 1.0).abs() > 1e-6 {
        return Err(contract("degenerate normal"));
    }
    let cos_o = omega_o.dot(normal);
    if cos_o <= 0.0 {
        return Err(contract("omega_o must be in the upper hemisphere"));
    }
    let exponent = basis.max_mean_gamma_at_zero();
    let refl = 2.0 * cos_o * normal - omega_o;
    let pick_spec = rng.gen::<f64>() < specular_weight;
    let omega_i = if pick_spec {
        let (t, b) = orthonormal_frame(&refl);
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        let cos_a = u1.powf(1.0 / (exponent + 1.0));
        let sin_a = (1.0 - cos_a * cos_a).max(0.0).sqrt();
        let phi = 2.0 * PI * u2;
        let mut w = cos_a * refl + sin_a * (phi.cos() * t + phi.sin() * b);
        let wn = w.dot(normal);
        if wn < 0.0 {
            w -= 2.0 * wn * normal; // mirror below-horizon samples back up
        }
        w.normalize()
    } else {
        let (t, b) = orthonormal_frame(normal);
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        let r = u1.sqrt();
        let phi = 2.0 * PI * u2;
        let z = (1.0 - u1).max(0.0).sqrt();
        (r * phi.cos() * t + r * phi.sin() * b + z * normal).normalize()
    };
    let pdf = pdf_brdf(basis, &omega_i, omega_o, normal, specular_weight)?;
    Ok((omega_i, pdf))
}

/// Mixture proposal density over the upper hemisphere; exactly the density
/// realized by `sample_brdf`.
pub fn pdf_brdf(
    basis: &ReflectanceBasisSet,
    omega_i: &Vec3,
    omega_o: &Vec3,
    normal: &Vec3,
    specular_weight: f64,
) -> Result<f64> {
    let cos_i = omega_i.dot(normal);
    if cos_i < 0.0 {
        return Ok(0.0);
    }
    let cos_o = omega_o.dot(normal);
    if cos_o <= 0.0 {
        return Err(contract("omega_o must be in the upper hemisphere"));
    }
    let cosine_pdf = cos_i / PI;
    if specular_weight == 0.0 {
        return Ok(cosine_pdf);
    }
    let exponent = basis.max_mean_gamma_at_zero();
    let refl = 2.0 * cos_o * normal - omega_o;
    let norm = (exponent + 1.0) / (2.0 * PI);
    let lobe = |w: &Vec3| -> f64 {
        let c = refl.dot(w);
        if c > 0.0 {
            norm * c.powf(exponent)
        } else {
            0.0
        }
    };
    let mirrored = omega_i - 2.0 * cos_i * normal;
    let spec_pdf = lobe(omega_i) + lobe(&mirrored);
    Ok((1.0 - specular_weight) * cosine_pdf + specular_weight * spec_pdf)
}

// ---------------------------------------------------------------------------
// Priors

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoGPriorData {
    pub components: Vec<MoGComponentData>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoGComponentData {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

#[derive(Clone)]
struct MoGComponent {
    log_weight: f64,
    mean: DVector<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
    log_norm: f64,
}

/// Mixture-of-Gaussians prior over Psi.
#[derive(Clone)]
pub struct MoGPrior {
    components: Vec<MoGComponent>,
    dim: usize,
}

impl std::fmt::Debug for MoGPrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MoGPrior")
            .field("components", &self.components.len())
            .field("dim", &self.dim)
            .finish()
    }
}

impl MoGPrior {
    pub fn from_data(data: &MoGPriorData, dim: usize) -> Result<Self> {
        if data.components.is_empty() {
            return Err(config("MoG prior has no components"));
        }
        let total: f64 = data.components.iter().map(|c| c.weight).sum();
        if total <= 0.0 {
            return Err(config("MoG weights must be positive"));
        }
        let mut components = Vec::new();
        for c in &data.components {
            if c.mean.len() != dim || c.cov.len() != dim || c.cov.iter().any(|r| r.len() != dim) {
                return Err(config("MoG component shape mismatch"));
            }
            let cov = DMatrix::from_fn(dim, dim, |i, j| c.cov[i][j]);
            let chol = Cholesky::new(cov).ok_or_else(|| config("MoG covariance not SPD"))?;
            let log_det: f64 = (0..dim).map(|i| chol.l()[(i, i)].ln() * 2.0).sum();
            let log_norm = -0.5 * (dim as f64 * (2.0 * PI).ln() + log_det);
            components.push(MoGComponent {
                log_weight: (c.weight / total).ln(),
                mean: DVector::from_column_slice(&c.mean),
                chol,
                log_norm,
            });
        }
        Ok(MoGPrior { components, dim })
    }

    /// Single broad isotropic Gaussian fallback.
    pub fn synthetic_fallback(dim: usize) -> Self {
        let data = MoGPriorData {
            components: vec![MoGComponentData {
                weight: 1.0,
                mean: vec![0.0; dim],
                cov: (0..dim)
                    .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                    .collect(),
            }],
        };
        Self::from_data(&data, dim).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn to_data(&self) -> MoGPriorData {
        MoGPriorData {
            components: self
                .components
                .iter()
                .map(|c| {
                    let l = c.chol.l();
                    let cov = &l * l.transpose();
                    MoGComponentData {
                        weight: c.log_weight.exp(),
                        mean: c.mean.iter().copied().collect(),
                        cov: (0..self.dim)
                            .map(|i| (0..self.dim).map(|j| cov[(i, j)]).collect())
                            .collect(),
                    }
                })
                .collect(),
        }
    }
}

/// log sum_i pi_i N(psi | mu_i, Sigma_i) and its gradient w.r.t. psi.
pub fn logp_coefficient_prior(prior: &MoGPrior, psi: &[f64]) -> Result<(f64, Vec<f64>)> {
    if psi.len() != prior.dim {
        return Err(contract("psi dimension mismatch"));
    }
    let x = DVector::from_column_slice(psi);
    let mut log_terms = Vec::with_capacity(prior.components.len());
    let mut grads = Vec::with_capacity(prior.components.len());
    for c in &prior.components {
        let diff = &x - &c.mean;
        let solved = c.chol.solve(&diff); // Sigma^-1 (psi - mu)
        let quad = diff.dot(&solved);
        log_terms.push(c.log_weight + c.log_norm - 0.5 * quad);
        grads.push(-solved);
    }
    let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = log_terms.iter().map(|t| (t - max).exp()).sum();
    let logp = max + sum_exp.ln();
    let mut grad = DVector::zeros(prior.dim);
    for (t, g) in log_terms.iter().zip(&grads) {
        let resp = (t - logp).exp();
        grad += g * resp;
    }
    Ok((logp, grad.iter().copied().collect()))
}

/// Hue vector: unit projection of chromaticity off the gray point, or None for
/// gray / all-zero colors.
pub fn hue_vector(c: &Rgb) -> Option<Vec3> {
    let sum = c[0] + c[1] + c[2];
    if sum <= 0.0 {
        return None;
    }
    let v = Vec3::new(c[0] / sum - 1.0 / 3.0, c[1] / sum - 1.0 / 3.0, c[2] / sum - 1.0 / 3.0);
    let len = v.norm();
    if len < 1e-9 {
        None
    } else {
        Some(v / len)
    }
}

/// Pairwise von Mises-Fisher alignment of lobe hues:
/// sum over pairs (r, r') of kappa_h * h(c_r) . h(c_r'). Gray or zero lobes
/// are skipped and contribute zero gradient.
pub fn logp_hue_prior(mat: &DsbrdfMaterial, kappa_h: f64) -> (f64, Vec<Rgb>) {
    let r_count = mat.lobe_colors.len();
    let hues: Vec<Option<Vec3>> = mat.lobe_colors.iter().map(hue_vector).collect();
    let mut logp = 0.0;
    let mut grad = vec![[0.0f64; 3]; r_count];
    for r in 0..r_count {
        for rp in r + 1..r_count {
            let (Some(hr), Some(hrp)) = (&hues[r], &hues[rp]) else {
                continue;
            };
            logp += kappa_h * hr.dot(hrp);
            // d(h_r . h_r')/dc_r = (dh_r/dc_r)^T h_r'
            for (idx, other) in [(r, hrp), (rp, hr)] {
                let d = hue_jacobian_apply(&mat.lobe_colors[idx], other);
                for l in 0..3 {
                    grad[idx][l] += kappa_h * d[l];
                }
            }
        }
    }
    (logp, grad)
}

/// (dh/dc)^T v for the hue vector of color c.
fn hue_jacobian_apply(c: &Rgb, v: &Vec3) -> [f64; 3] {
    let sum = c[0] + c[1] + c[2];
    let rho = Vec3::new(c[0] / sum, c[1] / sum, c[2] / sum);
    let g = Vec3::repeat(1.0 / 3.0);
    let u = rho - g;
    let len = u.norm();
    let h = u / len;
    // dh/du = (I - h h^T)/|u|; du/dc_j has rows (delta_ij - rho_i)/sum.
    let m = (v - h * h.dot(v)) / len; // (dh/du)^T v
    let mut out = [0.0f64; 3];
    for j in 0..3 {
        // column j of du/dc: (e_i=j - rho)/sum
        let col = (Vec3::ith(j, 1.0) - rho) / sum;
        out[j] = col.dot(&m);
    }
    out
}
