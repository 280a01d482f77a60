//! Log posterior: log-Laplace image likelihood plus weighted log priors,
//! with a scalar gradient over the active parameter blocks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brdf::{logp_coefficient_prior, logp_hue_prior};
use crate::error::{contract, Result};
use crate::illumination::{
    logp_illum_chromaticity, logp_illum_entropy, logp_illum_gradient_sparsity,
};
use crate::renderer::{grad_pixel, pixel_rng, GradCtx, RenderSettings};
use crate::scene::{block_len, Block, ParameterVector, Scene, ALL_BLOCKS};
use crate::texture::{logp_texture_entropy, logp_texture_smoothness};

pub const DEFAULT_SIGMA_LIKELIHOOD: f64 = 0.5;

/// Likelihood noise scale plus one weight and internal constant per prior.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParameters {
    pub sigma_likelihood: f64,
    pub lambda_coefficient: f64,
    pub lambda_hue: f64,
    pub lambda_texture_entropy: f64,
    pub lambda_texture_smoothness: f64,
    pub lambda_illum_sparsity: f64,
    pub lambda_illum_entropy: f64,
    pub lambda_illum_chromaticity: f64,
    /// Hyper-Laplacian scale of the illumination gradient prior.
    pub sparsity_b: f64,
    /// Hyper-Laplacian exponent, in (0, 1].
    pub alpha_sparsity: f64,
    /// Dirichlet concentration of the chromaticity prior; > 1 favors gray.
    pub alpha_dirichlet: f64,
    /// Concentration of the pairwise lobe-hue alignment prior.
    pub kappa_hue: f64,
    /// Histogram resolution of the entropy priors.
    pub entropy_bins: usize,
    /// Edge-length falloff scale of the texture smoothness prior.
    pub sigma_smoothness: f64,
    /// When set, high illumination entropy raises the posterior instead of
    /// lowering it.
    pub reward_illum_entropy: bool,
}

impl Default for HyperParameters {
    fn default() -> Self {
        HyperParameters {
            sigma_likelihood: DEFAULT_SIGMA_LIKELIHOOD,
            lambda_coefficient: 1.0,
            lambda_hue: 1.0,
            lambda_texture_entropy: 0.1,
            lambda_texture_smoothness: 0.1,
            lambda_illum_sparsity: 1.0,
            lambda_illum_entropy: 0.1,
            lambda_illum_chromaticity: 1.0,
            sparsity_b: 1.0,
            alpha_sparsity: 0.7,
            alpha_dirichlet: 1.5,
            kappa_hue: 1.0,
            entropy_bins: crate::texture::DEFAULT_ENTROPY_BINS,
            sigma_smoothness: 0.1,
            reward_illum_entropy: false,
        }
    }
}

impl HyperParameters {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_likelihood > 0.0) {
            return Err(contract("sigma_likelihood must be positive"));
        }
        for (name, v) in [
            ("lambda_coefficient", self.lambda_coefficient),
            ("lambda_hue", self.lambda_hue),
            ("lambda_texture_entropy", self.lambda_texture_entropy),
            ("lambda_texture_smoothness", self.lambda_texture_smoothness),
            ("lambda_illum_sparsity", self.lambda_illum_sparsity),
            ("lambda_illum_entropy", self.lambda_illum_entropy),
            ("lambda_illum_chromaticity", self.lambda_illum_chromaticity),
        ] {
            if !(v >= 0.0) {
                return Err(contract(format!("{name} must be >= 0")));
            }
        }
        if !(self.sparsity_b > 0.0)
            || !(self.alpha_sparsity > 0.0 && self.alpha_sparsity <= 1.0)
            || !(self.kappa_hue >= 0.0)
            || !(self.sigma_smoothness > 0.0)
            || self.entropy_bins < 2
        {
            return Err(contract("invalid prior constant"));
        }
        Ok(())
    }
}

/// Per-term values after weighting; `total` is their sum.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PosteriorBreakdown {
    pub likelihood: f64,
    pub coefficient: f64,
    pub hue: f64,
    pub texture_entropy: f64,
    pub texture_smoothness: f64,
    pub illum_sparsity: f64,
    pub illum_entropy: f64,
    pub illum_chromaticity: f64,
    pub total: f64,
}

impl PosteriorBreakdown {
    pub const CSV_HEADER: &'static str = "likelihood,coefficient,hue,texture_entropy,\
texture_smoothness,illum_sparsity,illum_entropy,illum_chromaticity,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.likelihood,
            self.coefficient,
            self.hue,
            self.texture_entropy,
            self.texture_smoothness,
            self.illum_sparsity,
            self.illum_entropy,
            self.illum_chromaticity,
            self.total
        )
    }
}

pub fn zero_gradient(scene: &Scene, active: &[Block]) -> ParameterVector {
    let blocks = ALL_BLOCKS
        .iter()
        .filter(|b| active.contains(b))
        .map(|&b| (b, vec![0.0; block_len(scene, b)]))
        .collect();
    ParameterVector { blocks }
}

fn grad_add(dst: &mut ParameterVector, src: &ParameterVector) {
    for ((bd, vd), (bs, vs)) in dst.blocks.iter_mut().zip(&src.blocks) {
        debug_assert_eq!(bd, bs);
        for (d, s) in vd.iter_mut().zip(vs) {
            *d += s;
        }
    }
}

/// Mean observed radiance over masked-in pixels and channels; the radiance
/// floor for the log residual is 1e-8 times this.
fn observation_mean(scene: &Scene) -> f64 {
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
}

/// Log-Laplace likelihood over all masked-in pixels of all observations, with
/// its gradient over the active blocks. Deterministic for a fixed seed.
pub fn log_likelihood(
    scene: &Scene,
    settings: &RenderSettings,
    hyper: &HyperParameters,
    active: &[Block],
) -> Result<(f64, ParameterVector)> {
    settings.validate()?;
    hyper.validate()?;
    if scene.observations.is_empty() {
        return Err(contract("scene has no observations"));
    }
    for obs in &scene.observations {
        obs.validate(&scene.cameras)?;
    }
    let floor = (1e-8 * observation_mean(scene)).max(1e-300);
    let inv_sigma2 = 1.0 / (hyper.sigma_likelihood * hyper.sigma_likelihood);
    let ctx = GradCtx::new(scene, active);

    let mut value = 0.0;
    let mut grad = zero_gradient(scene, active);
    for obs in &scene.observations {
        let cam = &scene.cameras[obs.camera_index];
        let (w, h) = (cam.image_width, cam.image_height);
        let rows: Result<Vec<(f64, ParameterVector)>> = (0..h)
            .into_par_iter()
            .map(|py| {
                let mut row_value = 0.0;
                let mut row_grad = zero_gradient(scene, active);
                for px in 0..w {
                    if !obs.validity_mask[py * w + px] {
                        continue;
                    }
                    let mut rng = pixel_rng(settings.rng_seed, obs.camera_index, px, py);
                    let (pred, pg) =
                        grad_pixel(scene, cam, px, py, settings, active, &ctx, &mut rng)?;
                    let observed = obs.image.at(px, py);
                    let mut wl = [0.0f64; 3];
                    for l in 0..3 {
                        let i_obs = observed[l].max(floor);
                        let i_hat = pred[l].max(floor);
                        let r = i_hat.ln() - i_obs.ln();
                        row_value -= r.abs() * inv_sigma2;
                        // The floor is flat: no gradient once the prediction
                        // clamps. f64::signum(0.0) is 1; an exact-zero
                        // residual takes the subgradient 0 instead.
                        if pred[l] > floor && r != 0.0 {
                            wl[l] = -r.signum() * inv_sigma2 / i_hat;
                        }
                    }
                    for (&(b, idx), dep) in &pg.deposits {
                        let g = row_grad.get_mut(b).expect("active block present");
                        g[idx] += wl[0] * dep[0] + wl[1] * dep[1] + wl[2] * dep[2];
                    }
                }
                Ok((row_value, row_grad))
            })
            .collect();
        // Fixed merge order keeps the result independent of thread count.
        for (v, g) in rows? {
            value += v;
            grad_add(&mut grad, &g);
        }
    }
    Ok((value, grad))
}

/// Likelihood plus every weighted log prior. Prior values always enter the
/// total; prior gradients land only in active blocks.
pub fn log_posterior(
    scene: &Scene,
    settings: &RenderSettings,
    hyper: &HyperParameters,
    active: &[Block],
) -> Result<(PosteriorBreakdown, ParameterVector)> {
    let (ll, mut grad) = log_likelihood(scene, settings, hyper, active)?;
    let mut bd = PosteriorBreakdown {
        likelihood: ll,
        ..Default::default()
    };

    if hyper.lambda_coefficient > 0.0 {
        let nb = scene.basis.n_coeffs;
        for (k, m) in scene.materials.iter().enumerate() {
            let (v, g) = logp_coefficient_prior(&scene.coeff_prior, &m.psi)?;
            bd.coefficient += hyper.lambda_coefficient * v;
            if let Some(dst) = grad.get_mut(Block::Psi) {
                for (b, gb) in g.iter().enumerate() {
                    dst[k * nb + b] += hyper.lambda_coefficient * gb;
                }
            }
        }
    }

    if hyper.lambda_hue > 0.0 {
        let nl = scene.basis.n_lobes;
        for (k, m) in scene.materials.iter().enumerate() {
            let (v, g) = logp_hue_prior(m, hyper.kappa_hue);
            bd.hue += hyper.lambda_hue * v;
            if let Some(dst) = grad.get_mut(Block::LobeColors) {
                for (r, gr) in g.iter().enumerate() {
                    for l in 0..3 {
                        dst[(k * nl + r) * 3 + l] += hyper.lambda_hue * gr[l];
                    }
                }
            }
        }
    }

    if scene.texture.enabled {
        if hyper.lambda_texture_entropy > 0.0 {
            let (v, g) = logp_texture_entropy(&scene.texture, hyper.entropy_bins);
            bd.texture_entropy = hyper.lambda_texture_entropy * v;
            add_rgb_grad(&mut grad, Block::Texture, &g, hyper.lambda_texture_entropy);
        }
        if hyper.lambda_texture_smoothness > 0.0 {
            let (v, g) =
                logp_texture_smoothness(&scene.texture, &scene.mesh, hyper.sigma_smoothness);
            bd.texture_smoothness = hyper.lambda_texture_smoothness * v;
            add_rgb_grad(&mut grad, Block::Texture, &g, hyper.lambda_texture_smoothness);
        }
    }

    if hyper.lambda_illum_sparsity > 0.0 {
        let (v, g) = logp_illum_gradient_sparsity(
            &scene.illumination,
            hyper.sparsity_b,
            hyper.alpha_sparsity,
        );
        bd.illum_sparsity = hyper.lambda_illum_sparsity * v;
        add_rgb_grad(&mut grad, Block::Illumination, &g, hyper.lambda_illum_sparsity);
    }
    if hyper.lambda_illum_entropy > 0.0 {
        // The module returns -H; the flag flips the sign to reward entropy.
        let sign = if hyper.reward_illum_entropy { -1.0 } else { 1.0 };
        let (v, g) = logp_illum_entropy(&scene.illumination, hyper.entropy_bins);
        bd.illum_entropy = hyper.lambda_illum_entropy * sign * v;
        add_rgb_grad(&mut grad, Block::Illumination, &g, hyper.lambda_illum_entropy * sign);
    }
    if hyper.lambda_illum_chromaticity > 0.0 {
        let (v, g) = logp_illum_chromaticity(&scene.illumination, hyper.alpha_dirichlet);
        bd.illum_chromaticity = hyper.lambda_illum_chromaticity * v;
        add_rgb_grad(&mut grad, Block::Illumination, &g, hyper.lambda_illum_chromaticity);
    }

    bd.total = bd.likelihood
        + bd.coefficient
        + bd.hue
        + bd.texture_entropy
        + bd.texture_smoothness
        + bd.illum_sparsity
        + bd.illum_entropy
        + bd.illum_chromaticity;
    Ok((bd, grad))
}

fn add_rgb_grad(grad: &mut ParameterVector, block: Block, g: &[crate::Rgb], scale: f64) {
    if let Some(dst) = grad.get_mut(block) {
        for (i, v) in g.iter().enumerate() {
            for l in 0..3 {
                dst[i * 3 + l] += scale * v[l];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{make_fixture, FixtureConfig, FixtureKind};
    use crate::renderer::render_image;
    use crate::scene::{flatten_parameters, unflatten_parameters, Observation};
    use crate::texture::DiffuseTexture;

    fn fixture_scene() -> (Scene, RenderSettings) {
        let cfg = FixtureConfig {
            resolution: 8,
            views: 1,
            spp: 4,
            max_bounces: 1,
            n_geometric_bases: 8,
            ..Default::default()
        };
        let f = make_fixture(FixtureKind::SphereQuad, &cfg).unwrap();
        let settings = RenderSettings {
            samples_per_pixel: 4,
            max_bounces: 1,
            rng_seed: 17,
            ..Default::default()
        };
        (f.scene, settings)
    }

    /// Observations re-rendered with the likelihood's own seed and settings:
    /// the prediction reproduces them bitwise.
    fn self_consistent(scene: &mut Scene, settings: &RenderSettings) {
        let mut obs = Vec::new();
        for v in 0..scene.cameras.len() {
            let img = render_image(scene, v, settings).unwrap();
            obs.push(Observation::full(v, img));
        }
        scene.observations = obs;
    }

    #[test]
    fn perfect_fit_likelihood_is_zero() {
        let (mut scene, settings) = fixture_scene();
        self_consistent(&mut scene, &settings);
        let hyper = HyperParameters::default();
        let (v, _) = log_likelihood(&scene, &settings, &hyper, &[]).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn likelihood_negative_off_fit_and_scale_invariant() {
        let (mut scene, settings) = fixture_scene();
        self_consistent(&mut scene, &settings);
        // Perturb one material's diffuse color.
        let j = scene.materials[0].diffuse_lobe_index;
        scene.materials[0].lobe_colors[j][0] *= 1.3;
        let hyper = HyperParameters::default();
        let (v, _) = log_likelihood(&scene, &settings, &hyper, &[]).unwrap();
        assert!(v < 0.0);

        // Scale observations and illumination together: log residuals and
        // therefore the value are unchanged (up to fp rounding).
        let s = 7.0;
        let mut scaled = scene.clone();
        for obs in &mut scaled.observations {
            for p in &mut obs.image.pixels {
                for l in 0..3 {
                    p[l] *= s;
                }
            }
        }
        let rad: Vec<crate::Rgb> = scaled
            .illumination
            .radiance
            .iter()
            .map(|p| [p[0] * s, p[1] * s, p[2] * s])
            .collect();
        scaled.illumination = scaled.illumination.with_radiance_frozen_cdf(rad);
        let (vs, _) = log_likelihood(&scaled, &settings, &hyper, &[]).unwrap();
        assert!((vs - v).abs() <= 1e-9 * v.abs(), "{v} vs {vs}");
    }

    #[test]
    fn sigma_scales_likelihood() {
        let (mut scene, settings) = fixture_scene();
        self_consistent(&mut scene, &settings);
        scene.materials[0].psi[0] += 0.3;
        let mut hyper = HyperParameters::default();
        let (v1, _) = log_likelihood(&scene, &settings, &hyper, &[]).unwrap();
        hyper.sigma_likelihood *= 2.0;
        let (v2, _) = log_likelihood(&scene, &settings, &hyper, &[]).unwrap();
        assert!((v1 - 4.0 * v2).abs() < 1e-9 * v1.abs());
    }

    #[test]
    fn zero_weights_posterior_equals_likelihood() {
        let (mut scene, settings) = fixture_scene();
        self_consistent(&mut scene, &settings);
        scene.materials[0].psi[1] -= 0.2;
        let hyper = HyperParameters {
            lambda_coefficient: 0.0,
            lambda_hue: 0.0,
            lambda_texture_entropy: 0.0,
            lambda_texture_smoothness: 0.0,
            lambda_illum_sparsity: 0.0,
            lambda_illum_entropy: 0.0,
            lambda_illum_chromaticity: 0.0,
            ..Default::default()
        };
        let (ll, gl) = log_likelihood(&scene, &settings, &hyper, &[Block::Psi]).unwrap();
        let (bd, gp) = log_posterior(&scene, &settings, &hyper, &[Block::Psi]).unwrap();
        assert_eq!(bd.total, ll);
        for (a, b) in gl.flat().iter().zip(gp.flat().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn posterior_decomposes_additively() {
        let (mut scene, settings) = fixture_scene();
        self_consistent(&mut scene, &settings);
        scene.texture = DiffuseTexture {
            per_vertex_rgb: scene
                .mesh
                .vertices
                .iter()
                .map(|v| [0.2 + 0.1 * v.x.sin().abs(), 0.25, 0.3])
                .collect(),
            enabled: true,
        };
        let full = HyperParameters::default();
        let (bd, _) = log_posterior(&scene, &settings, &full, &[]).unwrap();
        let zero = HyperParameters {
            lambda_coefficient: 0.0,
            lambda_hue: 0.0,
            lambda_texture_entropy: 0.0,
            lambda_texture_smoothness: 0.0,
            lambda_illum_sparsity: 0.0,
            lambda_illum_entropy: 0.0,
            lambda_illum_chromaticity: 0.0,
            ..Default::default()
        };
        let mut sum = bd.likelihood;
        let singles: Vec<HyperParameters> = vec![
            HyperParameters { lambda_coefficient: 1.0, ..zero.clone() },
            HyperParameters { lambda_hue: 1.0, ..zero.clone() },
            HyperParameters { lambda_texture_entropy: 0.1, ..zero.clone() },
            HyperParameters { lambda_texture_smoothness: 0.1, ..zero.clone() },
            HyperParameters { lambda_illum_sparsity: 1.0, ..zero.clone() },
            HyperParameters { lambda_illum_entropy: 0.1, ..zero.clone() },
            HyperParameters { lambda_illum_chromaticity: 1.0, ..zero.clone() },
        ];
        for h in &singles {
            let (b, _) = log_posterior(&scene, &settings, h, &[]).unwrap();
            sum += b.total - b.likelihood;
        }
        assert!((sum - bd.total).abs() < 1e-10 * bd.total.abs().max(1.0));
    }

    #[test]
    fn single_prior_matches_module_value() {
        let (mut scene, settings) = fixture_scene();
        self_consistent(&mut scene, &settings);
        let hyper = HyperParameters {
            lambda_coefficient: 0.0,
            lambda_hue: 0.0,
            lambda_texture_entropy: 0.0,
            lambda_texture_smoothness: 0.0,
            lambda_illum_sparsity: 2.5,
            lambda_illum_entropy: 0.0,
            lambda_illum_chromaticity: 0.0,
            ..Default::default()
        };
        let (bd, _) = log_posterior(&scene, &settings, &hyper, &[]).unwrap();
        let (v, _) = logp_illum_gradient_sparsity(
            &scene.illumination,
            hyper.sparsity_b,
            hyper.alpha_sparsity,
        );
        assert!((bd.illum_sparsity - 2.5 * v).abs() < 1e-12 * v.abs().max(1.0));
        assert_eq!(bd.total, bd.likelihood + bd.illum_sparsity);
    }

    #[test]
    fn likelihood_gradient_matches_crn_fd_on_illum_scale() {
        let (mut scene, settings) = fixture_scene();
        self_consistent(&mut scene, &settings);
        // Move off the optimum so residual signs are stable under +-h.
        let j = scene.materials[0].diffuse_lobe_index;
        scene.materials[0].lobe_colors[j][1] *= 1.4;
        let hyper = HyperParameters::default();
        let (_, grad) =
            log_likelihood(&scene, &settings, &hyper, &[Block::Illumination]).unwrap();
        let g = grad.get(Block::Illumination).unwrap();
        // d/ds at s=1 of likelihood(s * L) contracts the full block.
        let mut analytic = 0.0;
        for (i, texel) in scene.illumination.radiance.iter().enumerate() {
            for l in 0..3 {
                analytic += texel[l] * g[i * 3 + l];
            }
        }
        let h = 1e-4;
        let scaled = |s: f64| {
            let rad: Vec<crate::Rgb> = scene
                .illumination
                .radiance
                .iter()
                .map(|p| [p[0] * s, p[1] * s, p[2] * s])
                .collect();
            let mut out = scene.clone();
            out.illumination = scene.illumination.with_radiance_frozen_cdf(rad);
            out
        };
        let (vp, _) = log_likelihood(&scaled(1.0 + h), &settings, &hyper, &[]).unwrap();
        let (vm, _) = log_likelihood(&scaled(1.0 - h), &settings, &hyper, &[]).unwrap();
        let fd = (vp - vm) / (2.0 * h);
        assert!(
            (fd - analytic).abs() <= 1e-2 * fd.abs().max(analytic.abs()),
            "fd {fd}, analytic {analytic}"
        );
    }

    #[test]
    fn posterior_gradient_matches_crn_fd_per_coordinate() {
        let (mut scene, settings) = fixture_scene();
        self_consistent(&mut scene, &settings);
        scene.materials[0].psi[0] += 0.15;
        scene.materials[1].lobe_colors[0][2] += 0.02;
        // Entropy prior's histogram range is data-dependent; keep it off so
        // the finite difference stays smooth.
        let hyper = HyperParameters {
            lambda_illum_entropy: 0.0,
            ..Default::default()
        };
        let active = [Block::Psi, Block::LobeColors, Block::Illumination];
        let (_, grad) = log_posterior(&scene, &settings, &hyper, &active).unwrap();

        let check = |block: Block, idx: usize, h: f64| {
            let bump = |s: f64| {
                if block == Block::Illumination {
                    let mut rad = scene.illumination.radiance.clone();
                    rad[idx / 3][idx % 3] += s;
                    let mut out = scene.clone();
                    out.illumination = scene.illumination.with_radiance_frozen_cdf(rad);
                    out
                } else {
                    let mut pv = flatten_parameters(&scene, &[block]);
                    pv.blocks[0].1[idx] += s;
                    unflatten_parameters(&scene, &pv).unwrap()
                }
            };
            let (bp, _) = log_posterior(&bump(h), &settings, &hyper, &[]).unwrap();
            let (bm, _) = log_posterior(&bump(-h), &settings, &hyper, &[]).unwrap();
            let fd = (bp.total - bm.total) / (2.0 * h);
            let an = grad.get(block).unwrap()[idx];
            assert!(
                (fd - an).abs() <= 2e-2 * fd.abs().max(an.abs()) + 1e-6,
                "{block:?}[{idx}]: fd {fd}, analytic {an}"
            );
        };
        check(Block::Psi, 0, 1e-4);
        check(Block::LobeColors, 2, 1e-5);
        // A mid-luminance texel: away from the entropy range endpoints.
        check(Block::Illumination, 7 * 3 + 1, 1e-4);
    }

    #[test]
    fn inactive_blocks_absent_from_gradient() {
        let (mut scene, settings) = fixture_scene();
        self_consistent(&mut scene, &settings);
        let hyper = HyperParameters::default();
        let (_, grad) = log_posterior(&scene, &settings, &hyper, &[Block::Psi]).unwrap();
        assert_eq!(grad.blocks.len(), 1);
        assert_eq!(grad.blocks[0].0, Block::Psi);
    }

    #[test]
    fn deterministic_across_calls() {
        let (mut scene, settings) = fixture_scene();
        self_consistent(&mut scene, &settings);
        scene.materials[0].psi[2] += 0.1;
        let hyper = HyperParameters::default();
        let a = log_posterior(&scene, &settings, &hyper, &[Block::Psi]).unwrap();
        let b = log_posterior(&scene, &settings, &hyper, &[Block::Psi]).unwrap();
        assert_eq!(a.0.total.to_bits(), b.0.total.to_bits());
        for (x, y) in a.1.flat().iter().zip(b.1.flat().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn hyper_round_trips_through_json_with_defaults() {
        let h: HyperParameters = serde_json::from_str("{}").unwrap();
        assert_eq!(h.sigma_likelihood, DEFAULT_SIGMA_LIKELIHOOD);
        let h: HyperParameters =
            serde_json::from_str(r#"{"sigma_likelihood": 0.25, "entropy_bins": 32}"#).unwrap();
        assert_eq!(h.sigma_likelihood, 0.25);
        assert_eq!(h.entropy_bins, 32);
        assert!(serde_json::from_str::<HyperParameters>(r#"{"sigma_likelihood": -1}"#)
            .unwrap()
            .validate()
            .is_err());
    }
}
