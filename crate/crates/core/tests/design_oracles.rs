mod common;

use common::*;
use fmt_core::config::{DesignSupport, InclusionSection, RunConfig};
use fmt_core::design::extend_system;
use fmt_core::forward::{add_noise, MeasurementSet, NoiseModel};
use fmt_core::illum::{ccd_solve, reweighted_l1, CcdProblem, ReweightConfig};
use fmt_core::linalg::DenseMatrix;
use fmt_core::pipeline::LEAKAGE_TOL;
use fmt_core::Experiment;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

fn gaussian(r: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| scale * r.sample::<f64, _>(StandardNormal))
        .collect();
    DenseMatrix::from_row_major(rows, cols, data).unwrap()
}

fn weighted_objective(v: &DenseMatrix, y: &[f64], s: &[f64], mu: f64, h: &[f64]) -> f64 {
    let vs = v.matvec(s);
    let res: f64 = vs.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    0.5 * res + mu * s.iter().zip(h).map(|(a, b)| a.abs() * b).sum::<f64>()
}

#[test]
fn orthonormal_design_has_closed_form() {
    let mut r = rng(11);
    for _ in 0..10 {
        let a = DMatrix::from_fn(60, 20, |_, _| r.sample::<f64, _>(StandardNormal));
        let q = a.qr().q();
        let v = DenseMatrix::from_row_major(
            60,
            20,
            (0..60)
                .flat_map(|i| (0..20).map(move |j| (i, j)))
                .map(|(i, j)| q[(i, j)])
                .collect(),
        )
        .unwrap();
        let y: Vec<f64> = (0..60)
            .map(|_| 2.0 * r.sample::<f64, _>(StandardNormal))
            .collect();
        let mu = r.gen_range(0.0..1.0);
        let p_max = r.gen_range(0.5..2.0);
        let problem = CcdProblem::new(&v, &y).unwrap();
        let res = ccd_solve(&problem, mu, &[1.0; 20], p_max, &[0.0; 20], 50, 0.0).unwrap();
        let corr = v.matvec_t(&y);
        for (s, c) in res.sigma.iter().zip(&corr) {
            let want = (c - mu).max(0.0).min(p_max);
            assert!((s - want).abs() <= 1e-12, "{s} vs {want}");
        }
    }
}

#[test]
fn box_holds_and_objective_never_rises_over_ten_thousand_sweeps() {
    let mut r = rng(12);
    let mut sweeps = 0;
    for _ in 0..100 {
        let (rows, cols) = (r.gen_range(10..40), r.gen_range(5..30));
        let v = gaussian(&mut r, rows, cols, 1.0);
        let y: Vec<f64> = (0..rows)
            .map(|_| 3.0 * r.sample::<f64, _>(StandardNormal))
            .collect();
        let p_max = r.gen_range(0.1..2.0);
        let mu = r.gen_range(0.0..2.0);
        let h: Vec<f64> = (0..cols).map(|_| r.gen_range(0.0..3.0)).collect();
        let problem = CcdProblem::new(&v, &y).unwrap();
        let mut s: Vec<f64> = (0..cols).map(|_| r.gen_range(0.0..=p_max)).collect();
        let mut prev = problem.objective(&s, mu, &h);
        for _ in 0..100 {
            s = ccd_solve(&problem, mu, &h, p_max, &s, 1, 0.0)
                .unwrap()
                .sigma;
            sweeps += 1;
            assert!(s.iter().all(|&x| (0.0..=p_max).contains(&x)));
            let obj = problem.objective(&s, mu, &h);
            assert!(obj <= prev + 1e-12 * prev.abs().max(1.0));
            prev = obj;
        }
    }
    assert_eq!(sweeps, 10_000);
}

/// Accelerated projected gradient on the box: the weighted ℓ1 term is linear
/// there, so the projection is the exact proximal step.
fn projected_gradient(v: &DenseMatrix, y: &[f64], mu: f64, h: &[f64], p_max: f64) -> Vec<f64> {
    let cols = v.cols();
    let gram = {
        let m = DMatrix::from_row_slice(v.rows(), cols, v.data());
        (m.transpose() * &m).symmetric_eigenvalues().max()
    };
    let t = 1.0 / gram;
    let mut x = vec![0.0; cols];
    let mut z = x.clone();
    let mut p = 1.0f64;
    for _ in 0..50_000 {
        let vz = v.matvec(&z);
        let res: Vec<f64> = vz.iter().zip(y).map(|(a, b)| a - b).collect();
        let g = v.matvec_t(&res);
        let xn: Vec<f64> = (0..cols)
            .map(|j| (z[j] - t * (g[j] + mu * h[j])).clamp(0.0, p_max))
            .collect();
        let pn = (1.0 + (1.0 + 4.0 * p * p).sqrt()) / 2.0;
        z = (0..cols)
            .map(|j| xn[j] + (p - 1.0) / pn * (xn[j] - x[j]))
            .collect();
        x = xn;
        p = pn;
    }
    x
}

#[test]
fn ccd_matches_projected_gradient() {
    let mut r = rng(13);
    for _ in 0..10 {
        let v = gaussian(&mut r, 30, 15, 1.0);
        let y: Vec<f64> = (0..30)
            .map(|_| 2.0 * r.sample::<f64, _>(StandardNormal))
            .collect();
        let h: Vec<f64> = (0..15).map(|_| r.gen_range(0.5..2.0)).collect();
        let (mu, p_max) = (r.gen_range(0.1..1.0), r.gen_range(0.3..1.5));
        let problem = CcdProblem::new(&v, &y).unwrap();
        let ccd = ccd_solve(&problem, mu, &h, p_max, &[0.0; 15], 100_000, 1e-15)
            .unwrap()
            .sigma;
        let pg = projected_gradient(&v, &y, mu, &h, p_max);
        let (a, b) = (
            weighted_objective(&v, &y, &ccd, mu, &h),
            weighted_objective(&v, &y, &pg, mu, &h),
        );
        assert!((a - b).abs() <= 1e-9 * b, "{a} vs {b}");
    }
}

#[test]
fn reweighting_recovers_supports_single_pass_misses() {
    let (mut reweighted, mut single) = (0, 0);
    for seed in 0..20 {
        let mut r = rng(seed);
        let v = gaussian(&mut r, 40, 100, 1.0 / 40f64.sqrt());
        let mut x0 = vec![0.0; 100];
        let mut k = 0;
        while k < 5 {
            let j = r.gen_range(0..100);
            if x0[j] == 0.0 {
                x0[j] = r.gen_range(0.2..1.0);
                k += 1;
            }
        }
        let y = v.matvec(&x0);
        let problem = CcdProblem::new(&v, &y).unwrap();
        let cfg = ReweightConfig {
            sweeps: 5000,
            tol: 1e-10,
            ..ReweightConfig::with_p_max(0.01, 1.0)
        };
        let support = |s: &[f64]| s.iter().map(|&v| v != 0.0).collect::<Vec<_>>();
        let truth = support(&x0);
        let multi = reweighted_l1(&problem, &cfg, &[0.0; 100], 1.0).unwrap();
        let once = reweighted_l1(
            &problem,
            &ReweightConfig {
                outer_iters: 1,
                ..cfg
            },
            &[0.0; 100],
            1.0,
        )
        .unwrap();
        reweighted += (support(&multi.sigma) == truth) as usize;
        single += (support(&once.sigma) == truth) as usize;
        // small coordinates die off monotonically
        assert!(
            multi.nnz_history.windows(2).all(|w| w[1] <= w[0]),
            "{:?}",
            multi.nnz_history
        );
    }
    assert!(reweighted >= 18, "reweighted {reweighted}/20");
    assert!(single <= 12, "single pass {single}/20");
}

#[test]
fn huge_epsilon_reduces_to_uniform_weights() {
    let mut r = rng(14);
    let v = gaussian(&mut r, 100, 40, 1.0);
    let y: Vec<f64> = (0..100)
        .map(|_| 2.0 * r.sample::<f64, _>(StandardNormal))
        .collect();
    let problem = CcdProblem::new(&v, &y).unwrap();
    let eps = 1e3;
    let cfg = ReweightConfig {
        mu: 0.5,
        epsilon: eps,
        outer_iters: 10,
        sweeps: 20_000,
        tol: 1e-14,
    };
    let rw = reweighted_l1(&problem, &cfg, &[0.0; 40], 1.0).unwrap();
    let uniform = ccd_solve(
        &problem,
        cfg.mu,
        &[1.0 / eps; 40],
        1.0,
        &[0.0; 40],
        20_000,
        1e-15,
    )
    .unwrap();
    for (a, b) in rw.sigma.iter().zip(&uniform.sigma) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn interior_penalty_keeps_surface_designs_on_top() {
    let mut cfg = RunConfig::default();
    cfg.phantom.dims_mm = [6.0; 3];
    cfg.inclusions = Some(vec![InclusionSection {
        min_corner: [1.0, 1.0, 4.0],
        max_corner: [2.0, 5.0, 5.0],
        intensity: 100.0,
    }]);
    cfg.lasers.grid_center = [3.0, 3.0];
    cfg.lasers.nx = 3;
    cfg.lasers.ny = 3;
    cfg.detector.rows = 3;
    cfg.detector.cols = 3;
    cfg.detector.pitch_mm = 2.0;
    cfg.detector.height_mm = 4.0;
    cfg.illum.support = DesignSupport::Surface;
    cfg.illum.mu = 1e-6;
    let exp = Experiment::new(cfg.phantom_spec()).unwrap();
    let pattern = exp.initial_pattern().unwrap();
    let phi_e = exp.excitation(&pattern).unwrap();
    let meas = exp.measure(&exp.truth, &phi_e, 0).unwrap();
    let mut settings = cfg.loop_settings();
    let leak = |settings: &fmt_core::LoopSettings| {
        let (v, _, init) = exp
            .design_problem(&exp.truth, &phi_e, &meas, &pattern, settings)
            .unwrap();
        let (vt, yt) = extend_system(
            &v,
            &meas.stacked(),
            settings.gamma_interior,
            exp.mesh.illum_allowed(),
        )
        .unwrap();
        let problem = CcdProblem::new(&vt, &yt).unwrap();
        let s = reweighted_l1(&problem, &settings.illum, &init, 1.0)
            .unwrap()
            .sigma;
        let allowed = exp.mesh.illum_allowed();
        let off = v
            .columns
            .iter()
            .zip(&s)
            .filter(|(&c, _)| !allowed[c])
            .map(|(_, &x)| x);
        off.fold(0.0, f64::max)
    };
    settings.gamma_interior = 0.0;
    let free = leak(&settings);
    settings.gamma_interior = 1e3;
    let penalized = leak(&settings);
    assert!(
        free > 1e-3 * cfg.lasers.p_max,
        "unpenalized design stays on top ({free}); test is vacuous"
    );
    assert!(
        penalized < LEAKAGE_TOL * cfg.lasers.p_max,
        "leakage {penalized}"
    );
    let design = exp
        .design(&exp.truth, &phi_e, &meas, &pattern, &settings)
        .unwrap();
    design
        .pattern
        .check_feasible(exp.mesh.illum_allowed())
        .unwrap();
}

#[test]
fn multiplicative_noise_statistics() {
    let n = 100_000;
    let set = MeasurementSet {
        n_sources: 1,
        n_pixels: n,
        y: vec![2.0; n],
        p_e: vec![1.0; n],
        p_f: vec![2.0; n],
        mask: (0..n).map(|i| i % 10 != 0).collect(),
        noise_seed: 0,
    };
    let sigma = 0.01;
    let model = NoiseModel::Gaussian { sigma_rel: sigma };
    let a = add_noise(&set, model, 5).unwrap();
    let rel: Vec<f64> =
        a.y.iter()
            .zip(&set.mask)
            .filter(|(_, &m)| m)
            .map(|(y, _)| y / 2.0 - 1.0)
            .collect();
    let mean = rel.iter().sum::<f64>() / rel.len() as f64;
    let sd = (rel.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / rel.len() as f64).sqrt();
    assert!(mean.abs() < 4.0 * sigma / (rel.len() as f64).sqrt());
    assert!((sd / sigma - 1.0).abs() < 0.02);
    assert!(a
        .y
        .iter()
        .zip(&set.mask)
        .filter(|(_, &m)| !m)
        .all(|(y, _)| *y == 2.0));
    assert_eq!(add_noise(&set, model, 5).unwrap().y, a.y);
    assert_ne!(add_noise(&set, model, 6).unwrap().y, a.y);
    assert_eq!(add_noise(&set, NoiseModel::None, 5).unwrap().y, set.y);
}
