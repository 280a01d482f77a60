//! End-to-end acceptance suite. Each numbered criterion prints one PASS/FAIL
//! line; the test fails if any criterion fails.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use raydecomp::brdf::{
    hue_vector, logp_coefficient_prior, logp_hue_prior, pdf_brdf, sample_brdf,
    DsbrdfMaterial, MoGPrior, ReflectanceBasisSet,
};
use raydecomp::harness::{
    brdf_log_rmse, label_agreement, lambertian_material, make_fixture, mean_vertex_distance,
    perturb_mesh, specular_energy_share, two_blob_environment, uv_sphere, FixtureConfig,
    FixtureKind,
};
use raydecomp::illumination::{
    logp_illum_chromaticity, logp_illum_entropy_with_range, logp_illum_gradient_sparsity,
    EnvironmentMap,
};
use raydecomp::mesh::{build_geometric_bases, Ray, TriangleMesh};
use raydecomp::optimizer::{refine_geometry, run_map, StageConfig, StageSchedule, TraceRow};
use raydecomp::posterior::HyperParameters;
use raydecomp::renderer::{balance, grad_image, render_image, RenderSettings};
use raydecomp::scene::{
    flatten_parameters, unflatten_parameters, Block, Camera, Observation, Scene, ALL_BLOCKS,
};
use raydecomp::segmentation::MaterialSegmentation;
use raydecomp::texture::{
    logp_texture_entropy_with_range, logp_texture_smoothness, DiffuseTexture,
};
use raydecomp::Vec3;

struct Report {
    lines: Vec<(usize, &'static str, bool, String)>,
}

impl Report {
    fn record(&mut self, id: usize, name: &'static str, pass: bool, detail: String) {
        println!(
            "criterion {id:2} [{}] {name}: {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
        self.lines.push((id, name, pass, detail));
    }
}

#[test]
fn acceptance_criteria() {
    let mut report = Report {
        lines: Vec::new(),
    };
    criterion_1_gradient_correctness(&mut report);
    criterion_2_furnace(&mut report);
    let mut traces: Vec<Vec<TraceRow>> = Vec::new();
    criterion_3_interreflection(&mut report, &mut traces);
    criterion_4_geometry_refinement(&mut report, &mut traces);
    criterion_5_6_reflectance_and_segmentation(&mut report, &mut traces);
    criterion_7_priors(&mut report);
    criterion_8_mc_infrastructure(&mut report);
    criterion_9_eigenbasis(&mut report);
    criterion_10_monotone_map(&mut report, &traces);

    let failed: Vec<_> = report.lines.iter().filter(|l| !l.2).collect();
    assert!(
        failed.is_empty(),
        "failed criteria: {:?}",
        failed.iter().map(|l| l.0).collect::<Vec<_>>()
    );
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness per block, CRN finite differences

fn bump_scene(scene: &Scene, block: Block, idx: usize, h: f64) -> Scene {
    match block {
        Block::Illumination => {
            let mut rad = scene.illumination.radiance.clone();
            rad[idx / 3][idx % 3] += h;
            let mut out = scene.clone();
            out.illumination = scene.illumination.with_radiance_frozen_cdf(rad);
            out
        }
        Block::Geometry => {
            let mut w = scene.geometry_weights.clone();
            w[idx] += h;
            let mut out = scene.clone();
            out.mesh = scene.mesh.with_shading_normals_for(&scene.bases, &w);
            out
        }
        _ => {
            let mut pv = flatten_parameters(scene, &[block]);
            pv.blocks[0].1[idx] += h;
            unflatten_parameters(scene, &pv).unwrap()
        }
    }
}

fn image_sum(scene: &Scene, view: usize, settings: &RenderSettings) -> [f64; 3] {
    let img = render_image(scene, view, settings).unwrap();
    let mut out = [0.0; 3];
    for p in &img.pixels {
        for l in 0..3 {
            out[l] += p[l];
        }
    }
    out
}

fn criterion_1_gradient_correctness(report: &mut Report) {
    let cfg = FixtureConfig {
        resolution: 64,
        views: 3,
        spp: 4,
        max_bounces: 2,
        n_geometric_bases: 8,
        ..Default::default()
    };
    let mut f = make_fixture(FixtureKind::SphereQuad, &cfg).unwrap();
    f.scene.texture = DiffuseTexture {
        per_vertex_rgb: vec![[0.3, 0.25, 0.2]; f.scene.mesh.vertices.len()],
        enabled: true,
    };
    f.scene.geometry_weights = vec![0.0; 4];
    let mut worst_overall = 0.0f64;
    let mut detail = String::new();
    for &block in &ALL_BLOCKS {
        let settings = RenderSettings {
            samples_per_pixel: 4,
            max_bounces: 2,
            rng_seed: 101,
            use_soft_segmentation: block == Block::Segmentation,
            ..Default::default()
        };
        if block == Block::Segmentation {
            // Away from softmax saturation so finite differences see slope.
            for row in &mut f.scene.segmentation.a {
                for v in row.iter_mut() {
                    *v *= 0.05;
                }
            }
        }
        let (_, bundle) = grad_image(&f.scene, 0, &settings, &[block]).unwrap();
        let g = bundle.get(block).unwrap();
        let mag = |v: &[f64; 3]| v[0].abs() + v[1].abs() + v[2].abs();
        let mut order: Vec<usize> = (0..g.len()).filter(|&i| mag(&g[i]) > 0.0).collect();
        order.sort_by(|&i, &j| mag(&g[j]).partial_cmp(&mag(&g[i])).unwrap());
        order.truncate(4);
        let h = match block {
            Block::LobeColors | Block::Texture | Block::Geometry => 1e-5,
            _ => 1e-4,
        };
        let mut worst = 0.0f64;
        for &idx in &order {
            let plus = image_sum(&bump_scene(&f.scene, block, idx, h), 0, &settings);
            let minus = image_sum(&bump_scene(&f.scene, block, idx, -h), 0, &settings);
            for l in 0..3 {
                let fd = (plus[l] - minus[l]) / (2.0 * h);
                let an = g[idx][l];
                let denom = fd.abs().max(an.abs());
                if denom > 1e-6 {
                    worst = worst.max((fd - an).abs() / denom);
                }
            }
        }
        detail.push_str(&format!("{}={:.1e} ", block.name(), worst));
        worst_overall = worst_overall.max(worst);
        if block == Block::Segmentation {
            for row in &mut f.scene.segmentation.a {
                for v in row.iter_mut() {
                    *v /= 0.05;
                }
            }
        }
    }
    report.record(
        1,
        "gradient correctness",
        worst_overall <= 1e-2,
        format!("max rel err {worst_overall:.2e} ({detail})"),
    );
}

// ---------------------------------------------------------------------------
// 2. Furnace test

fn criterion_2_furnace(report: &mut Report) {
    let basis = ReflectanceBasisSet::synthetic_fallback();
    let rho = [0.6, 0.4, 0.2];
    let l0 = [1.5, 1.0, 0.5];
    let (v, t) = uv_sphere(Vec3::zeros(), 1.0, 32, 16);
    let mut mesh = TriangleMesh::new(v, t).unwrap();
    mesh.triangle_colors = vec![[0.5; 3]; mesh.triangles.len()];
    let dist = mesh.triangle_distance_matrix((1.0, 1.0, 1.0)).unwrap();
    let bases = build_geometric_bases(&mesh, &dist, dist.median_finite(), 4).unwrap();
    let n_v = mesh.vertices.len();
    let scene = Scene {
        mesh,
        bases,
        basis: basis.clone(),
        coeff_prior: MoGPrior::synthetic_fallback(basis.n_coeffs),
        materials: vec![lambertian_material(&basis, rho)],
        segmentation: MaterialSegmentation::trivial(4),
        texture: DiffuseTexture::constant(n_v, [0.0; 3]),
        illumination: EnvironmentMap::constant(16, 8, l0),
        cameras: vec![
            Camera::look_at(Vec3::new(0.0, 0.0, 3.5), Vec3::zeros(), 64.0, 16, 16).unwrap(),
        ],
        observations: Vec::new(),
        geometry_weights: Vec::new(),
    };
    let settings = RenderSettings {
        samples_per_pixel: 256,
        max_bounces: 2,
        rng_seed: 11,
        ..Default::default()
    };
    // Central 8x8 block: every ray hits the sphere; the mean is the furnace
    // estimate at 256 spp per pixel.
    let img = render_image(&scene, 0, &settings).unwrap();
    let mut mean = [0.0f64; 3];
    for px in 4..12 {
        for py in 4..12 {
            let p = img.at(px, py);
            for l in 0..3 {
                mean[l] += p[l] / 64.0;
            }
        }
    }
    let mut worst = 0.0f64;
    for l in 0..3 {
        let expect = rho[l] * l0[l];
        worst = worst.max((mean[l] - expect).abs() / expect);
    }
    report.record(
        2,
        "furnace test",
        worst <= 0.02,
        format!("max rel dev {worst:.4}"),
    );
}

// ---------------------------------------------------------------------------
// 3. Interreflection test

/// Decomposition starts from neutral materials; the fixture scene carries the
/// ground truth, which must not leak into the estimate.
fn neutralize_materials(scene: &mut Scene) {
    let neutral = DsbrdfMaterial::neutral(&scene.basis);
    for m in &mut scene.materials {
        *m = neutral.clone();
    }
}

fn quad_material_share(scene: &Scene) -> f64 {
    // The quad is the last two triangles of the sphere_quad fixture.
    let t_count = scene.mesh.triangles.len();
    let k = scene.material_index_at(t_count - 1);
    specular_energy_share(&scene.materials[k], &scene.basis)
}

fn small_schedule(rounds: &[usize; 4], spp: &[usize; 4]) -> StageSchedule {
    StageSchedule {
        stages: (0..4)
            .map(|i| StageConfig {
                max_rounds: rounds[i],
                samples_per_pixel: spp[i],
                ..Default::default()
            })
            .collect(),
        n_geometry_weights: 8,
        ..Default::default()
    }
}

fn criterion_3_interreflection(report: &mut Report, traces: &mut Vec<Vec<TraceRow>>) {
    let cfg = FixtureConfig {
        resolution: 24,
        views: 3,
        spp: 48,
        max_bounces: 2,
        n_geometric_bases: 8,
        ..Default::default()
    };
    let mut f = make_fixture(FixtureKind::SphereQuad, &cfg).unwrap();
    neutralize_materials(&mut f.scene);
    let hyper = HyperParameters::default();
    let schedule = small_schedule(&[3, 1, 1, 1], &[4, 4, 4, 4]);
    let run = |bounces: usize| {
        let settings = RenderSettings {
            samples_per_pixel: 4,
            max_bounces: bounces,
            rng_seed: 7,
            ..Default::default()
        };
        run_map(&f.scene, &hyper, &schedule, &settings, None).unwrap()
    };
    let with = run(2);
    let without = run(0);
    let share_with = quad_material_share(&with.scene);
    let share_without = quad_material_share(&without.scene);
    traces.push(with.trace);
    traces.push(without.trace);
    report.record(
        3,
        "interreflection separation",
        share_with > 0.3 && share_without < 0.1,
        format!("share(indirect)={share_with:.3}, share(direct-only)={share_without:.3}"),
    );
}

// ---------------------------------------------------------------------------
// 4. Geometry refinement on a perturbed sphere

fn criterion_4_geometry_refinement(report: &mut Report, traces: &mut Vec<Vec<TraceRow>>) {
    let basis = ReflectanceBasisSet::synthetic_fallback();
    let (v, t) = uv_sphere(Vec3::zeros(), 1.0, 16, 8);
    let gt_mesh = TriangleMesh::new(v, t).unwrap();
    let mut reductions = Vec::new();
    for seed in [0u64, 1, 2] {
        // GT scene for observations.
        let mut mesh = gt_mesh.clone();
        mesh.triangle_colors = vec![[0.5; 3]; mesh.triangles.len()];
        let dist = mesh.triangle_distance_matrix((1.0, 1.0, 1.0)).unwrap();
        let bases = build_geometric_bases(&mesh, &dist, dist.median_finite(), 32).unwrap();
        let n_v = mesh.vertices.len();
        let mk_scene = |mesh: TriangleMesh,
                        bases: raydecomp::mesh::GeometricBases| -> Scene {
            Scene {
                mesh,
                bases,
                basis: basis.clone(),
                coeff_prior: MoGPrior::synthetic_fallback(basis.n_coeffs),
                materials: vec![lambertian_material(&basis, [0.65, 0.4, 0.3])],
                segmentation: MaterialSegmentation::trivial(4),
                texture: DiffuseTexture::constant(n_v, [0.0; 3]),
                illumination: two_blob_environment(16, 8),
                cameras: (0..5)
                    .map(|i| {
                        // Varied azimuth and elevation so normals and
                        // silhouettes are observed from independent angles.
                        let a = 1.26 * i as f64 + 0.4;
                        let el = 0.15 + 0.25 * (i as f64 - 2.0);
                        Camera::look_at(
                            3.0 * Vec3::new(a.cos(), el, a.sin()).normalize(),
                            Vec3::zeros(),
                            38.0,
                            32,
                            32,
                        )
                        .unwrap()
                    })
                    .collect(),
                observations: Vec::new(),
                geometry_weights: Vec::new(),
            }
        };
        let mut gt_scene = mk_scene(mesh, bases);
        let obs_settings = RenderSettings {
            samples_per_pixel: 128,
            max_bounces: 0,
            rng_seed: 1000 + seed,
            ..Default::default()
        };
        let observations: Vec<Observation> = (0..gt_scene.cameras.len())
            .map(|v| Observation::full(v, render_image(&gt_scene, v, &obs_settings).unwrap()))
            .collect();
        gt_scene.observations = observations.clone();

        // Perturbed initial geometry; bases rebuilt on the perturbed mesh.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let perturbed = perturb_mesh(&gt_scene.mesh, 0.5, 10, &mut rng).unwrap();
        let dist = perturbed.triangle_distance_matrix((1.0, 1.0, 1.0)).unwrap();
        let pbases = build_geometric_bases(&perturbed, &dist, dist.median_finite(), 32).unwrap();
        let d0 = mean_vertex_distance(&perturbed, &gt_mesh);
        let mut scene = mk_scene(perturbed, pbases);
        scene.observations = observations;

        let hyper = HyperParameters::default();
        let settings = RenderSettings {
            samples_per_pixel: 48,
            max_bounces: 0,
            rng_seed: 13 + seed,
            ..Default::default()
        };
        let (refined, trace) =
            refine_geometry(&scene, &hyper, &settings, 32, 8, 0.15).unwrap();
        traces.push(trace);
        let d1 = mean_vertex_distance(&refined.mesh, &gt_mesh);
        reductions.push(1.0 - d1 / d0);
    }
    let mean_reduction = reductions.iter().sum::<f64>() / reductions.len() as f64;
    report.record(
        4,
        "geometry refinement",
        mean_reduction >= 0.15,
        format!(
            "mean vertex-distance reduction {:.1}% (per seed: {})",
            100.0 * mean_reduction,
            reductions
                .iter()
                .map(|r| format!("{:.1}%", 100.0 * r))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 5 + 6. Reflectance recovery and segmentation agreement

/// Best material-index permutation by label agreement, then per-GT-material
/// rmse of the matched estimate.
/// Per-ground-truth-material brdf_log_rmse of the decomposition's recovered
/// reflectance. Two reconstructions precede the comparison: the diffuse lobe
/// color comes from the region's mean texture color when the texture layer is
/// enabled (the texture owns that lobe's color), and all lobe colors are
/// divided by the global reflectance-illumination gauge, estimated as the
/// energy ratio between the ground-truth and fitted environments. That
/// product is the observable quantity; the split is not.
fn matched_rmse(est: &Scene, gt_materials: &[DsbrdfMaterial], gt_labels: &[usize], gt_env: &EnvironmentMap) -> Vec<f64> {
    let k = gt_materials.len();
    let est_labels: Vec<usize> = (0..est.mesh.triangles.len())
        .map(|t| est.material_index_at(t))
        .collect();
    let energy = |env: &EnvironmentMap| -> f64 {
        env.radiance.iter().map(raydecomp::illumination::luminance).sum()
    };
    let gauge = energy(gt_env) / energy(&est.illumination).max(1e-12);
    let mut mean_tex = vec![[0.0f64; 3]; k];
    let mut counts = vec![0usize; k];
    for (t, tri) in est.mesh.triangles.iter().enumerate() {
        let e = est_labels[t].min(k - 1);
        for &v in tri {
            for l in 0..3 {
                mean_tex[e][l] += est.texture.per_vertex_rgb[v][l];
            }
        }
        counts[e] += 3;
    }
    for (c, &n) in mean_tex.iter_mut().zip(&counts) {
        if n > 0 {
            for l in c.iter_mut() {
                *l /= n as f64;
            }
        }
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&e, &g) in est_labels.iter().zip(gt_labels) {
        confusion[e.min(k - 1)][g.min(k - 1)] += 1;
    }
    // Exhaustive permutations; k <= 3 here.
    let mut best_perm: Vec<usize> = (0..k).collect();
    let mut best = 0usize;
    let mut perm: Vec<usize> = (0..k).collect();
    permute(&mut perm, 0, &mut |p: &[usize]| {
        let score: usize = (0..k).map(|e| confusion[e][p[e]]).sum();
        if score > best {
            best = score;
            best_perm = p.to_vec();
        }
    });
    // best_perm[e] = gt index matched to estimated material e.
    let mut rmse = vec![f64::NAN; k];
    for e in 0..k {
        let g = best_perm[e];
        let mut em = est.materials[e.min(est.materials.len() - 1)].clone();
        if est.texture.enabled {
            em.lobe_colors[em.diffuse_lobe_index] = mean_tex[e];
        }
        for c in &mut em.lobe_colors {
            for l in 0..3 {
                c[l] /= gauge;
            }
        }
        rmse[g] = brdf_log_rmse(&em, &gt_materials[g], &est.basis).unwrap();
    }
    rmse
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

fn criterion_5_6_reflectance_and_segmentation(
    report: &mut Report,
    traces: &mut Vec<Vec<TraceRow>>,
) {
    let hyper = HyperParameters::default();
    let schedule = small_schedule(&[5, 3, 2, 1], &[8, 8, 8, 8]);
    let mut all_ok = true;
    let mut detail = String::new();
    let mut seg_agreement = 0.0;
    for (kind, name) in [
        (FixtureKind::TwoMaterialPlane, "two_material_plane"),
        (FixtureKind::TeapotRoomMini, "teapot_room_mini"),
    ] {
        let cfg = FixtureConfig {
            resolution: 24,
            views: 3,
            spp: 48,
            max_bounces: 2,
            n_geometric_bases: if kind == FixtureKind::TeapotRoomMini { 24 } else { 8 },
            ..Default::default()
        };
        let mut f = make_fixture(kind, &cfg).unwrap();
        neutralize_materials(&mut f.scene);
        let settings = RenderSettings {
            samples_per_pixel: 4,
            max_bounces: 2,
            rng_seed: 23,
            ..Default::default()
        };
        let result = run_map(&f.scene, &hyper, &schedule, &settings, None).unwrap();
        let k = f.gt.materials.len();
        let neutral = DsbrdfMaterial::neutral(&f.scene.basis);
        let final_rmse = matched_rmse(&result.scene, &f.gt.materials, &f.gt.labels, &f.gt.illumination);
        let mut fixture_ok = true;
        for (g, gt_mat) in f.gt.materials.iter().enumerate() {
            let init = brdf_log_rmse(&neutral, gt_mat, &f.scene.basis).unwrap();
            let fin = final_rmse[g];
            let ok = fin <= 0.5 * init && fin <= 3.0;
            fixture_ok &= ok;
            detail.push_str(&format!("{name}[m{g}]: {fin:.2} (init {init:.2}) "));
        }
        all_ok &= fixture_ok;
        if kind == FixtureKind::TwoMaterialPlane {
            let est_labels: Vec<usize> = (0..result.scene.mesh.triangles.len())
                .map(|t| result.scene.material_index_at(t))
                .collect();
            seg_agreement = label_agreement(&est_labels, &f.gt.labels, k);
        }
        traces.push(result.trace);
    }
    report.record(5, "reflectance recovery", all_ok, detail);
    report.record(
        6,
        "segmentation recovery",
        seg_agreement >= 0.9,
        format!("two_material_plane agreement {:.1}%", 100.0 * seg_agreement),
    );
}

// ---------------------------------------------------------------------------
// 7. Prior property suite

fn fd_ok(value: impl Fn(f64) -> f64, grad: f64, h: f64, tol: f64) -> bool {
    let fd = (value(h) - value(-h)) / (2.0 * h);
    (fd - grad).abs() <= tol * fd.abs().max(grad.abs()).max(1e-9)
}

fn criterion_7_priors(report: &mut Report) {
    let mut ok = true;
    let mut notes = Vec::new();

    // Coefficient MoG: closed form for a single standard Gaussian.
    let prior = MoGPrior::synthetic_fallback(3);
    let psi = [0.3, -0.5, 0.1];
    let (v, g) = logp_coefficient_prior(&prior, &psi).unwrap();
    let expect = -0.5 * psi.iter().map(|x| x * x).sum::<f64>()
        - 1.5 * (2.0 * std::f64::consts::PI).ln();
    ok &= (v - expect).abs() < 1e-12;
    ok &= g.iter().zip(&psi).all(|(gi, x)| (gi + x).abs() < 1e-12);

    // Hue prior: aligned hues maximal, FD on one coordinate.
    let basis = ReflectanceBasisSet::synthetic_fallback();
    let mut mat = DsbrdfMaterial::neutral(&basis);
    mat.lobe_colors = vec![[0.8, 0.3, 0.2], [0.2, 0.6, 0.4], [0.5, 0.5, 0.5]];
    let (_, gh) = logp_hue_prior(&mat, 2.0);
    ok &= fd_ok(
        |h| {
            let mut m = mat.clone();
            m.lobe_colors[0][1] += h;
            logp_hue_prior(&m, 2.0).0
        },
        gh[0][1],
        1e-6,
        1e-4,
    );
    let aligned = DsbrdfMaterial {
        lobe_colors: vec![[0.9, 0.4, 0.2], [0.45, 0.2, 0.1], [0.225, 0.1, 0.05]],
        ..mat.clone()
    };
    ok &= logp_hue_prior(&aligned, 2.0).0 >= logp_hue_prior(&mat, 2.0).0;
    ok &= hue_vector(&[0.0; 3]).is_none();

    // Texture entropy + smoothness FD.
    let (v, t) = uv_sphere(Vec3::zeros(), 1.0, 8, 5);
    let mesh = TriangleMesh::new(v, t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tex = DiffuseTexture {
        per_vertex_rgb: (0..mesh.vertices.len())
            .map(|_| [rng.gen::<f64>(), rng.gen(), rng.gen()])
            .collect(),
        enabled: true,
    };
    let range = (0.0, 1.0);
    let (_, ge) = logp_texture_entropy_with_range(&tex, 32, range);
    ok &= fd_ok(
        |h| {
            let mut t2 = tex.clone();
            t2.per_vertex_rgb[5][0] += h;
            logp_texture_entropy_with_range(&t2, 32, range).0
        },
        ge[5][0],
        1e-6,
        1e-3,
    );
    let (_, gs) = logp_texture_smoothness(&tex, &mesh, 0.1);
    ok &= fd_ok(
        |h| {
            let mut t2 = tex.clone();
            t2.per_vertex_rgb[5][0] += h;
            logp_texture_smoothness(&t2, &mesh, 0.1).0
        },
        gs[5][0],
        1e-6,
        1e-4,
    );
    // Constant texture is the smoothness maximum.
    let flat = DiffuseTexture::constant(mesh.vertices.len(), [0.4; 3]);
    ok &= logp_texture_smoothness(&flat, &mesh, 0.1).0 == 0.0;

    // Illumination sparsity: scale invariance at 1e-10 and FD.
    let env = two_blob_environment(8, 4);
    let (vs, gsp) = logp_illum_gradient_sparsity(&env, 1.0, 0.7);
    let scaled = env.with_radiance_frozen_cdf(
        env.radiance.iter().map(|p| [7.0 * p[0], 7.0 * p[1], 7.0 * p[2]]).collect(),
    );
    let (vs2, _) = logp_illum_gradient_sparsity(&scaled, 1.0, 0.7);
    let scale_err_sparsity = (vs - vs2).abs() / vs.abs().max(1.0);
    ok &= scale_err_sparsity <= 1e-10;
    ok &= fd_ok(
        |h| {
            let mut rad = env.radiance.clone();
            rad[9][1] += h;
            // Mean shift from one texel is second order; hold eps comparable.
            logp_illum_gradient_sparsity(&env.with_radiance_frozen_cdf(rad), 1.0, 0.7).0
        },
        gsp[9][1],
        1e-7,
        1e-2,
    );

    // Illumination entropy FD with frozen range.
    let lums: Vec<f64> = env
        .radiance
        .iter()
        .map(|p| (raydecomp::illumination::luminance(p) + 1e-12).ln())
        .collect();
    let lo = lums.iter().cloned().fold(f64::INFINITY, f64::min) - 0.5;
    let hi = lums.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 0.5;
    let (_, gen_) = logp_illum_entropy_with_range(&env, 32, (lo, hi));
    ok &= fd_ok(
        |h| {
            let mut rad = env.radiance.clone();
            rad[9][1] += h;
            logp_illum_entropy_with_range(&env.with_radiance_frozen_cdf(rad), 32, (lo, hi)).0
        },
        gen_[9][1],
        1e-6,
        1e-3,
    );

    // Chromaticity: scale invariance at 1e-10, gray maximal, FD.
    let (vc, gc) = logp_illum_chromaticity(&env, 1.5);
    let (vc2, _) = logp_illum_chromaticity(&scaled, 1.5);
    ok &= (vc - vc2).abs() / vc.abs().max(1.0) <= 1e-10;
    let gray = EnvironmentMap::constant(8, 4, [2.0; 3]);
    ok &= logp_illum_chromaticity(&gray, 1.5).0 >= vc;
    // FD at the strongest-gradient coordinate; near-gray texels sit at the
    // prior's maximum where both sides vanish.
    let (ti, tl) = (0..gc.len())
        .flat_map(|i| (0..3).map(move |l| (i, l)))
        .max_by(|a, b| gc[a.0][a.1].abs().partial_cmp(&gc[b.0][b.1].abs()).unwrap())
        .unwrap();
    ok &= fd_ok(
        |h| {
            let mut rad = env.radiance.clone();
            rad[ti][tl] += h;
            logp_illum_chromaticity(&env.with_radiance_frozen_cdf(rad), 1.5).0
        },
        gc[ti][tl],
        1e-7,
        1e-3,
    );
    notes.push(format!("sparsity scale err {scale_err_sparsity:.1e}"));

    report.record(7, "prior property suite", ok, notes.join(", "));
}

// ---------------------------------------------------------------------------
// 8. Monte Carlo infrastructure

fn criterion_8_mc_infrastructure(report: &mut Report) {
    let mut ok = true;
    let mut notes = Vec::new();

    // BVH vs brute force on 10k rays.
    let (v, t) = uv_sphere(Vec3::zeros(), 1.0, 18, 9);
    let mesh = TriangleMesh::new(v, t).unwrap();
    let eps = mesh.intersect_eps();
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut disagreements = 0usize;
    for _ in 0..10_000 {
        let origin = Vec3::new(
            rng.gen_range(-2.5..2.5),
            rng.gen_range(-2.5..2.5),
            rng.gen_range(-2.5..2.5),
        );
        let d = Vec3::new(
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        if d.norm() < 1e-9 {
            continue;
        }
        let ray = Ray {
            origin,
            direction: d.normalize(),
        };
        let fast = mesh.intersect(&ray);
        let mut brute: Option<f64> = None;
        for tri in 0..mesh.triangles.len() {
            let [a, b, c] = mesh.triangle_vertices(tri);
            let e1 = b - a;
            let e2 = c - a;
            let p = ray.direction.cross(&e2);
            let det = e1.dot(&p);
            if det.abs() < 1e-14 {
                continue;
            }
            let inv = 1.0 / det;
            let s = ray.origin - a;
            let u = s.dot(&p) * inv;
            if !(0.0..=1.0).contains(&u) {
                continue;
            }
            let q = s.cross(&e1);
            let w = ray.direction.dot(&q) * inv;
            if w < 0.0 || u + w > 1.0 {
                continue;
            }
            let tt = e2.dot(&q) * inv;
            if tt > eps && brute.map_or(true, |b| tt < b) {
                brute = Some(tt);
            }
        }
        match (fast, brute) {
            (None, None) => {}
            (Some(h), Some(tb)) if (h.t - tb).abs() <= 1e-9 * tb.max(1.0) => {}
            _ => disagreements += 1,
        }
    }
    ok &= disagreements == 0;
    notes.push(format!("bvh disagreements {disagreements}"));

    // Light pdf normalizes within 1%.
    let env = two_blob_environment(16, 8);
    let grid = 64;
    let mut integral = 0.0;
    for i in 0..grid {
        for j in 0..2 * grid {
            let theta = std::f64::consts::PI * (i as f64 + 0.5) / grid as f64;
            let phi = 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / (2 * grid) as f64;
            let d = Vec3::new(theta.sin() * phi.cos(), theta.cos(), theta.sin() * phi.sin());
            let dw = theta.sin() * (std::f64::consts::PI / grid as f64)
                * (std::f64::consts::PI / grid as f64);
            integral += env.pdf_light(&d) * dw;
        }
    }
    ok &= (integral - 1.0).abs() <= 0.01;
    notes.push(format!("light pdf integral {integral:.4}"));

    // BRDF proposal pdf normalizes within 1%.
    let basis = ReflectanceBasisSet::synthetic_fallback();
    let n = Vec3::new(0.0, 0.0, 1.0);
    let wo = Vec3::new(0.4, 0.1, 0.9).normalize();
    let mut integral = 0.0;
    for i in 0..grid {
        for j in 0..2 * grid {
            let theta = std::f64::consts::FRAC_PI_2 * (i as f64 + 0.5) / grid as f64;
            let phi = 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / (2 * grid) as f64;
            let wi = Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
            let dw = theta.sin() * (std::f64::consts::FRAC_PI_2 / grid as f64)
                * (std::f64::consts::PI / grid as f64);
            integral += pdf_brdf(&basis, &wi, &wo, &n, 0.5).unwrap() * dw;
        }
    }
    ok &= (integral - 1.0).abs() <= 0.01;
    notes.push(format!("brdf pdf integral {integral:.4}"));

    // Sampled direction pdfs match the closed form bitwise.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let (wi, pdf) = sample_brdf(&basis, &wo, &n, 0.5, &mut rng).unwrap();
        ok &= pdf.to_bits() == pdf_brdf(&basis, &wi, &wo, &n, 0.5).unwrap().to_bits();
    }

    // MIS weights sum to 1 exactly.
    for (a, b) in [(0.3, 0.9), (1e-9, 1e9), (5.0, 0.0)] {
        let (wl, wb) = balance(a, b);
        ok &= wl + wb == 1.0;
    }

    // Determinism: bitwise-identical renders.
    let cfg = FixtureConfig {
        resolution: 12,
        views: 1,
        spp: 4,
        max_bounces: 2,
        n_geometric_bases: 8,
        ..Default::default()
    };
    let f = make_fixture(FixtureKind::SphereQuad, &cfg).unwrap();
    let settings = RenderSettings {
        samples_per_pixel: 4,
        max_bounces: 2,
        rng_seed: 5,
        ..Default::default()
    };
    let a = render_image(&f.scene, 0, &settings).unwrap();
    let b = render_image(&f.scene, 0, &settings).unwrap();
    ok &= a
        .pixels
        .iter()
        .zip(&b.pixels)
        .all(|(x, y)| (0..3).all(|l| x[l].to_bits() == y[l].to_bits()));

    report.record(8, "mc infrastructure", ok, notes.join(", "));
}

// ---------------------------------------------------------------------------
// 9. Eigenbasis suite

fn criterion_9_eigenbasis(report: &mut Report) {
    let (v, t) = raydecomp::harness::grid_plane(Vec3::new(-1.0, 0.0, -1.0), 2.0, 5);
    let mut mesh = TriangleMesh::new(v, t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    mesh.triangle_colors = (0..mesh.triangles.len())
        .map(|_| [rng.gen(), rng.gen(), rng.gen()])
        .collect();
    let dist = mesh.triangle_distance_matrix((1.0, 1.0, 1.0)).unwrap();
    let sigma = dist.median_finite();
    let n_bases = 10;
    let bases = build_geometric_bases(&mesh, &dist, sigma, n_bases).unwrap();
    let n = mesh.triangles.len();

    let mut ortho_err = 0.0f64;
    for a in 0..n_bases {
        for b in 0..n_bases {
            let dot: f64 = (0..n)
                .map(|i| bases.per_triangle[(i, a)] * bases.per_triangle[(i, b)])
                .sum();
            ortho_err = ortho_err.max((dot - if a == b { 1.0 } else { 0.0 }).abs());
        }
    }

    let s2 = sigma * sigma;
    let mut resid = 0.0f64;
    for b in 0..n_bases {
        for i in 0..n {
            let sv: f64 = (0..n)
                .map(|j| {
                    let d = dist.get(i, j);
                    (-d * d / s2).exp() * bases.per_triangle[(j, b)]
                })
                .sum();
            resid = resid.max((sv - bases.eigenvalues[b] * bases.per_triangle[(i, b)]).abs());
        }
    }

    // Dijkstra spot check: triangle inequality tightness along edges already
    // covered by the oracle test; here assert symmetry and zero diagonal.
    let mut sym_ok = true;
    for i in 0..n {
        sym_ok &= dist.get(i, i) == 0.0;
        for j in 0..n {
            sym_ok &= dist.get(i, j) == dist.get(j, i);
        }
    }

    report.record(
        9,
        "eigenbasis suite",
        ortho_err <= 1e-4 && resid <= 1e-6 && sym_ok,
        format!("ortho err {ortho_err:.1e}, eigen residual {resid:.1e}"),
    );
}

// ---------------------------------------------------------------------------
// 10. Monotone MAP

fn criterion_10_monotone_map(report: &mut Report, traces: &[Vec<TraceRow>]) {
    let mut rows = 0usize;
    let mut violations = 0usize;
    for trace in traces {
        for row in trace {
            if row.accepted {
                rows += 1;
                if row.e_accepted > row.e_incumbent {
                    violations += 1;
                }
            }
        }
    }
    report.record(
        10,
        "monotone MAP",
        violations == 0 && rows > 0,
        format!("{rows} accepted steps, {violations} violations"),
    );
}
