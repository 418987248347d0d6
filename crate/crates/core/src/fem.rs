//! Steady-state diffusion FEM: assembly of `S = K + C + A/(2ζ)` and solves.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{FmtError, Result};
use crate::linalg::{norm2, pcg, CsrMatrix, EnvelopeCholesky};
use crate::mesh::{element_geometry, MeshGrid};

/// Largest system factored directly; bigger ones use preconditioned CG.
pub const DIRECT_SOLVE_MAX_NODES: usize = 50_000;
pub const CG_TOL: f64 = 1e-10;
pub const CG_MAX_ITERS: usize = 10_000;
/// Acceptance bound on the relative residual of every solve.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpticalMedium {
    pub mu_a: Vec<f64>,
    pub mu_s: Vec<f64>,
    pub g: f64,
    pub zeta: f64,
    /// speed of light in the medium, mm/s (unused at steady state)
    pub c: f64,
    pub eta: f64,
    pub kappa: Vec<f64>,
}

pub fn diffusion_coefficient(mu_a: f64, mu_s: f64, g: f64) -> f64 {
    1.0 / (3.0 * (1.0 - g) * (mu_a + mu_s))
}

impl OpticalMedium {
    pub fn new(
        mu_a: Vec<f64>,
        mu_s: Vec<f64>,
        g: f64,
        zeta: f64,
        c: f64,
        eta: f64,
    ) -> Result<Self> {
        FmtError::check_len("mu_s", mu_a.len(), mu_s.len())?;
        if let Some(v) = mu_a.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(FmtError::param("mu_a", format!("must be > 0, got {v}")));
        }
        if let Some(v) = mu_s.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(FmtError::param("mu_s", format!("must be > 0, got {v}")));
        }
        if !(g > -1.0 && g < 1.0) {
            return Err(FmtError::param(
                "g",
                format!("must lie in (-1, 1), got {g}"),
            ));
        }
        if !(zeta > 0.0) || !zeta.is_finite() {
            return Err(FmtError::param("zeta", format!("must be > 0, got {zeta}")));
        }
        if !(c > 0.0) {
            return Err(FmtError::param("c", format!("must be > 0, got {c}")));
        }
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(FmtError::param("eta", format!("must be > 0, got {eta}")));
        }
        let kappa = mu_a
            .iter()
            .zip(&mu_s)
            .map(|(&a, &s)| diffusion_coefficient(a, s, g))
            .collect();
        Ok(Self {
            mu_a,
            mu_s,
            g,
            zeta,
            c,
            eta,
            kappa,
        })
    }

    pub fn homogeneous(
        n: usize,
        mu_a: f64,
        mu_s: f64,
        g: f64,
        zeta: f64,
        c: f64,
        eta: f64,
    ) -> Result<Self> {
        Self::new(vec![mu_a; n], vec![mu_s; n], g, zeta, c, eta)
    }

    pub fn len(&self) -> usize {
        self.mu_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu_a.is_empty()
    }
}

/// Assembled `S` with a lazily computed, shareable factorization.
#[derive(Debug)]
pub struct SystemMatrix {
    matrix: CsrMatrix,
    factor: OnceLock<std::result::Result<EnvelopeCholesky, (usize, f64)>>,
}

impl SystemMatrix {
    pub fn from_csr(matrix: CsrMatrix) -> Self {
        Self {
            matrix,
            factor: OnceLock::new(),
        }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.n_rows()
    }

    pub fn uses_direct_solver(&self) -> bool {
        self.dim() <= DIRECT_SOLVE_MAX_NODES
    }

    fn factorization(&self) -> Result<&EnvelopeCholesky> {
        let f = self.factor.get_or_init(|| {
            EnvelopeCholesky::factor(&self.matrix).map_err(|e| match e {
                FmtError::NotPositiveDefinite { pivot, value } => (pivot, value),
                _ => (usize::MAX, f64::NAN),
            })
        });
        f.as_ref()
            .map_err(|&(pivot, value)| FmtError::NotPositiveDefinite { pivot, value })
    }

    /// Verifies positive definiteness by factoring (or checking the diagonal
    /// on the iterative path).
    pub fn check_spd(&self) -> Result<()> {
        if self.uses_direct_solver() {
            self.factorization().map(|_| ())
        } else {
            match self
                .matrix
                .diagonal()
                .iter()
                .enumerate()
                .find(|(_, d)| !(**d > 0.0))
            {
                Some((i, &d)) => Err(FmtError::NotPositiveDefinite { pivot: i, value: d }),
                None => Ok(()),
            }
        }
    }

    pub fn relative_residual(&self, x: &[f64], b: &[f64]) -> f64 {
        let bn = norm2(b);
        let ax = self.matrix.mul_vec(x);
        let r: Vec<f64> = ax.iter().zip(b).map(|(u, v)| u - v).collect();
        if bn == 0.0 {
            norm2(&r)
        } else {
            norm2(&r) / bn
        }
    }
}

/// Per-element mass-type coefficient `∫ u_k u_i u_j dV` over a tetrahedron
/// of volume `vol` (multinomial identity for barycentric monomials).
pub fn triple_product_integral(vol: f64, i: usize, j: usize, k: usize) -> f64 {
    if i == j && j == k {
        vol / 20.0
    } else if i == j || j == k || i == k {
        vol / 60.0
    } else {
        vol / 120.0
    }
}

/// `∫ u_i u_j dS` over a linear triangle of the given area.
pub fn boundary_mass_entry(area: f64, i: usize, j: usize) -> f64 {
    if i == j {
        area / 6.0
    } else {
        area / 12.0
    }
}

/// Assembles `S = K(κ) + C(μa) + A/(2ζ)` on the mesh.
pub fn assemble_system(mesh: &MeshGrid, medium: &OpticalMedium) -> Result<SystemMatrix> {
    let n = mesh.n_nodes();
    FmtError::check_len("optical medium coefficients", n, medium.len())?;
    let mut trip = Vec::with_capacity(mesh.n_tets() * 16 + mesh.surface_tris().len() * 9);
    for (t, tet) in mesh.tets().iter().enumerate() {
        let geo = element_geometry(mesh, t)?;
        let kappa_mean: f64 = tet.iter().map(|&v| medium.kappa[v]).sum::<f64>() / 4.0;
        for a in 0..4 {
            for b in 0..4 {
                let gd: f64 = (0..3).map(|d| geo.grads[a][d] * geo.grads[b][d]).sum();
                let stiff = kappa_mean * geo.volume * gd;
                let mass: f64 = (0..4)
                    .map(|k| medium.mu_a[tet[k]] * triple_product_integral(geo.volume, a, b, k))
                    .sum();
                trip.push((tet[a], tet[b], stiff + mass));
            }
        }
    }
    let robin = 1.0 / (2.0 * medium.zeta);
    for tri in mesh.surface_tris() {
        let area = mesh.triangle_area(tri);
        for a in 0..3 {
            for b in 0..3 {
                trip.push((
                    tri.nodes[a],
                    tri.nodes[b],
                    robin * boundary_mass_entry(area, a, b),
                ));
            }
        }
    }
    let s = SystemMatrix::from_csr(CsrMatrix::from_triplets(n, n, &trip));
    s.check_spd()?;
    Ok(s)
}

/// Stiffness matrix `K` alone (diagnostics and tests).
pub fn assemble_stiffness(mesh: &MeshGrid, kappa: &[f64]) -> Result<CsrMatrix> {
    FmtError::check_len("kappa", mesh.n_nodes(), kappa.len())?;
    let mut trip = Vec::with_capacity(mesh.n_tets() * 16);
    for (t, tet) in mesh.tets().iter().enumerate() {
        let geo = element_geometry(mesh, t)?;
        let kappa_mean: f64 = tet.iter().map(|&v| kappa[v]).sum::<f64>() / 4.0;
        for a in 0..4 {
            for b in 0..4 {
                let gd: f64 = (0..3).map(|d| geo.grads[a][d] * geo.grads[b][d]).sum();
                trip.push((tet[a], tet[b], kappa_mean * geo.volume * gd));
            }
        }
    }
    Ok(CsrMatrix::from_triplets(
        mesh.n_nodes(),
        mesh.n_nodes(),
        &trip,
    ))
}

/// Solves `S Φ = Q` for one right-hand side.
pub fn solve(s: &SystemMatrix, q: &[f64]) -> Result<Vec<f64>> {
    FmtError::check_len("right-hand side", s.dim(), q.len())?;
    if q.iter().all(|&v| v == 0.0) {
        return Ok(vec![0.0; s.dim()]);
    }
    if let Some(i) = q.iter().position(|v| !v.is_finite()) {
        return Err(FmtError::param("Q", format!("non-finite entry at {i}")));
    }
    let x = if s.uses_direct_solver() {
        s.factorization()?.solve(q)
    } else {
        pcg(s.matrix(), q, CG_TOL, CG_MAX_ITERS)?.0
    };
    let res = s.relative_residual(&x, q);
    if !(res < SOLVE_RESIDUAL_TOL) {
        return Err(FmtError::SolverDiverged {
            iterations: 0,
            residual: res,
        });
    }
    Ok(x)
}

/// Column-by-column solve of a multi right-hand side system.
pub fn solve_many(s: &SystemMatrix, qs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if s.uses_direct_solver() {
            s.factorization()?;
        }
        qs.par_iter().map(|q| solve(s, q)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    qs.iter().map(|q| solve(s, q)).collect()
}
