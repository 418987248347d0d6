//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use fmt_core::config::{InclusionSection, RunConfig};
use fmt_core::linalg::DenseMatrix;
use fmt_core::mesh::{MeshGrid, Point};
use nalgebra::{DMatrix, Matrix4, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gauss-Legendre nodes and weights on [0, 1] by Newton iteration on P_n.
pub fn gauss_legendre01(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push(((x + 1.0) / 2.0, w / 2.0));
    }
    out
}

/// Collapsed (Duffy) tensor rule on the unit tetrahedron; exact for
/// polynomials of total degree <= 2n - 3.
pub fn tet_rule(n: usize) -> Vec<([f64; 3], f64)> {
    let g = gauss_legendre01(n);
    let mut out = Vec::new();
    for &(u, wu) in &g {
        for &(v, wv) in &g {
            for &(w, ww) in &g {
                let x = u;
                let y = (1.0 - u) * v;
                let z = (1.0 - u) * (1.0 - v) * w;
                let jac = (1.0 - u) * (1.0 - u) * (1.0 - v);
                out.push(([x, y, z], wu * wv * ww * jac));
            }
        }
    }
    out
}

/// Collapsed rule on the unit triangle.
pub fn tri_rule(n: usize) -> Vec<([f64; 2], f64)> {
    let g = gauss_legendre01(n);
    let mut out = Vec::new();
    for &(u, wu) in &g {
        for &(v, wv) in &g {
            out.push(([u, (1.0 - u) * v], wu * wv * (1.0 - u)));
        }
    }
    out
}

/// Affine coefficients of the four barycentric functions: `u_i(x) = c[i]·[1, x, y, z]`.
pub fn barycentric_coeffs(p: &[Point; 4]) -> [[f64; 4]; 4] {
    let m = Matrix4::from_fn(|r, c| if c == 0 { 1.0 } else { p[r][c - 1] });
    let inv = m.try_inverse().expect("non-degenerate tetrahedron");
    let mut out = [[0.0; 4]; 4];
    for (i, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = inv[(c, i)];
        }
    }
    out
}

pub fn eval_bary(c: &[f64; 4], x: Point) -> f64 {
    Vector4::new(1.0, x[0], x[1], x[2]).dot(&Vector4::from_column_slice(c))
}

pub fn tet_volume(p: &[Point; 4]) -> f64 {
    let e =
        |a: usize| nalgebra::Vector3::new(p[a][0] - p[0][0], p[a][1] - p[0][1], p[a][2] - p[0][2]);
    e(1).cross(&e(2)).dot(&e(3)).abs() / 6.0
}

pub fn random_tet(r: &mut ChaCha8Rng) -> [Point; 4] {
    loop {
        let p: [Point; 4] =
            std::array::from_fn(|_| std::array::from_fn(|_| r.gen_range(-2.0..2.0)));
        if tet_volume(&p) > 0.05 {
            return p;
        }
    }
}

/// Dense `S = K + C + A/(2ζ)` assembled from scratch by quadrature, with
/// boundary faces found as tetrahedron faces owned by a single element.
pub fn dense_system_oracle(
    mesh: &MeshGrid,
    mu_a: &[f64],
    kappa: &[f64],
    zeta: f64,
) -> DMatrix<f64> {
    let n = mesh.n_nodes();
    let xs = mesh.node_coords();
    let mut s = DMatrix::zeros(n, n);
    let rule = tet_rule(4);
    let mut faces: std::collections::HashMap<[usize; 3], usize> = Default::default();
    for tet in mesh.tets() {
        let p = tet.map(|v| xs[v]);
        let c = barycentric_coeffs(&p);
        let vol = tet_volume(&p);
        let km = tet.iter().map(|&v| kappa[v]).sum::<f64>() / 4.0;
        for a in 0..4 {
            for b in 0..4 {
                let gd: f64 = (1..4).map(|d| c[a][d] * c[b][d]).sum();
                s[(tet[a], tet[b])] += km * vol * gd;
            }
        }
        for &(xi, w) in &rule {
            let x: Point = std::array::from_fn(|d| {
                p[0][d]
                    + xi[0] * (p[1][d] - p[0][d])
                    + xi[1] * (p[2][d] - p[0][d])
                    + xi[2] * (p[3][d] - p[0][d])
            });
            let u: [f64; 4] = std::array::from_fn(|i| eval_bary(&c[i], x));
            let mua: f64 = (0..4).map(|i| mu_a[tet[i]] * u[i]).sum();
            for a in 0..4 {
                for b in 0..4 {
                    s[(tet[a], tet[b])] += 6.0 * vol * w * mua * u[a] * u[b];
                }
            }
        }
        for skip in 0..4 {
            let mut f: Vec<usize> = (0..4).filter(|&i| i != skip).map(|i| tet[i]).collect();
            f.sort();
            *faces.entry([f[0], f[1], f[2]]).or_default() += 1;
        }
    }
    let trule = tri_rule(4);
    for (f, count) in faces {
        if count != 1 {
            continue;
        }
        let p = f.map(|v| xs[v]);
        let e1 = nalgebra::Vector3::from_fn(|d, _| p[1][d] - p[0][d]);
        let e2 = nalgebra::Vector3::from_fn(|d, _| p[2][d] - p[0][d]);
        let area = e1.cross(&e2).norm() / 2.0;
        for &(xi, w) in &trule {
            let u = [1.0 - xi[0] - xi[1], xi[0], xi[1]];
            for a in 0..3 {
                for b in 0..3 {
                    s[(f[a], f[b])] += 2.0 * area * w * u[a] * u[b] / (2.0 * zeta);
                }
            }
        }
    }
    s
}

/// Inverse of the assembled system matrix through nalgebra.
pub fn dense_inverse(mesh_s: &fmt_core::linalg::CsrMatrix) -> DMatrix<f64> {
    let d = mesh_s.to_dense();
    let m = DMatrix::from_row_slice(d.rows(), d.cols(), d.data());
    m.try_inverse().expect("invertible system")
}

pub fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |a, b| a.max(b.abs()))
}

/// A cube with random box inclusions of random intensity.
pub fn random_config(edge: f64, seed: u64) -> RunConfig {
    let mut r = rng(seed);
    let mut cfg = RunConfig::default();
    cfg.phantom.dims_mm = [edge; 3];
    let boxes = (0..r.gen_range(1..=3))
        .map(|_| {
            let lo: [f64; 3] = std::array::from_fn(|_| r.gen_range(0.0..edge - 1.0).floor());
            let hi: [f64; 3] =
                std::array::from_fn(|d| (lo[d] + r.gen_range(1.0..3.0)).min(edge).floor());
            InclusionSection {
                min_corner: lo,
                max_corner: hi,
                intensity: r.gen_range(10.0..200.0),
            }
        })
        .collect();
    cfg.inclusions = Some(boxes);
    let n = if edge <= 5.0 { 3 } else { 4 };
    cfg.lasers.grid_center = [edge / 2.0, edge / 2.0];
    cfg.lasers.pitch_mm = 1.0;
    cfg.lasers.nx = n;
    cfg.lasers.ny = n;
    cfg.lasers.power = r.gen_range(0.2..1.0);
    cfg.detector.rows = n;
    cfg.detector.cols = n;
    cfg.detector.pitch_mm = edge / n as f64;
    cfg.detector.height_mm = edge / 2.0;
    cfg.validate().unwrap();
    cfg
}

pub struct Lasso {
    pub w: DenseMatrix,
    pub y: Vec<f64>,
    pub lambda: f64,
}

pub fn lasso_instance(seed: u64, rows: usize, cols: usize) -> Lasso {
    let mut r = rng(seed);
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| r.sample::<f64, _>(StandardNormal))
        .collect();
    let w = DenseMatrix::from_row_major(rows, cols, data).unwrap();
    let mut x0 = vec![0.0; cols];
    for _ in 0..8 {
        x0[r.gen_range(0..cols)] = r.gen_range(0.5..2.0);
    }
    let mut y = w.matvec(&x0);
    y.iter_mut()
        .for_each(|v| *v += 0.05 * r.sample::<f64, _>(StandardNormal));
    let lambda = 0.1 * max_abs(w.matvec_t(&y));
    Lasso { w, y, lambda }
}

pub fn lasso_objective(p: &Lasso, x: &[f64]) -> f64 {
    let wx = p.w.matvec(x);
    let res: f64 = wx.iter().zip(&p.y).map(|(a, b)| (a - b) * (a - b)).sum();
    0.5 * res + p.lambda * x.iter().map(|v| v.abs()).sum::<f64>()
}

/// Nonnegative lasso by exact cyclic coordinate minimization.
pub fn cd_oracle(p: &Lasso) -> Vec<f64> {
    let cols: Vec<Vec<f64>> = p.w.to_columns();
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
    let mut x = vec![0.0; cols.len()];
    let mut r = p.y.clone();
    for _ in 0..100_000 {
        let mut change = 0.0f64;
        for j in 0..cols.len() {
            let rho: f64 =
                cols[j].iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() + norms[j] * x[j];
            let new = ((rho - p.lambda) / norms[j]).max(0.0);
            let d = new - x[j];
            if d != 0.0 {
                r.iter_mut().zip(&cols[j]).for_each(|(ri, c)| *ri -= c * d);
                x[j] = new;
                change = change.max(d.abs());
            }
        }
        if change < 1e-15 {
            break;
        }
    }
    x
}
