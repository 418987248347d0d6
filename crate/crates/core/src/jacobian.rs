//! Sensitivity matrix `W(Σ)` mapping fluorescence to Born ratios.
//!
//! Row `(l, k)` is `η (g_k ⊙ Φ^e_l) / (Γ_k · Φ^e_l)` where `g_k` solves
//! `S^f g_k = Γ_k`. Only `M` adjoint solves are needed, one per pixel.

use std::io::{Read, Write};

use crate::error::{FmtError, Result};
use crate::fem::{solve_many, SystemMatrix};
use crate::forward::{detector_powers, measurement_mask, Gamma};
use crate::linalg::{DenseMatrix, LinearOperator};

const DUMP_MAGIC: &[u8; 8] = b"FMTWMAT1";

/// Adjoint detector fields, one `N`-vector per pixel.
pub fn adjoint_detector_fields(s_f: &SystemMatrix, gamma: &Gamma) -> Result<Vec<Vec<f64>>> {
    let rhs: Vec<Vec<f64>> = (0..gamma.n_pixels()).map(|k| gamma.dense_row(k)).collect();
    solve_many(s_f, &rhs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrix {
    pub matrix: DenseMatrix,
    /// `(l, k)` for every row
    pub row_index: Vec<(usize, usize)>,
}

impl SensitivityMatrix {
    pub fn apply(&self, c: &[f64]) -> Vec<f64> {
        self.matrix.matvec(c)
    }

    /// Row-major binary dump: magic, rows (u64 LE), cols (u64 LE), f64 LE data.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(self.matrix.rows() as u64).to_le_bytes())?;
        w.write_all(&(self.matrix.cols() as u64).to_le_bytes())?;
        for v in self.matrix.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<DenseMatrix> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(FmtError::Parse {
                path: "<W dump>".into(),
                reason: "bad magic".into(),
            });
        }
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let rows = u64::from_le_bytes(b) as usize;
        r.read_exact(&mut b)?;
        let cols = u64::from_le_bytes(b) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        DenseMatrix::from_row_major(rows, cols, data)
    }
}

impl LinearOperator for SensitivityMatrix {
    fn nrows(&self) -> usize {
        self.matrix.rows()
    }
    fn ncols(&self) -> usize {
        self.matrix.cols()
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.matrix.apply(x, out)
    }
    fn apply_t(&self, r: &[f64], out: &mut [f64]) {
        self.matrix.apply_t(r, out)
    }
}

/// Assembles `W` from adjoint fields `g`, excitation fields and `Γ`.
/// Rows whose denominator falls under the floor are dropped.
pub fn assemble_w(
    g: &[Vec<f64>],
    phi_e: &[Vec<f64>],
    gamma: &Gamma,
    eta: f64,
    floor_rel: f64,
) -> Result<SensitivityMatrix> {
    FmtError::check_len("adjoint fields", gamma.n_pixels(), g.len())?;
    let n = gamma.n_nodes();
    for phi in phi_e {
        FmtError::check_len("excitation field", n, phi.len())?;
    }
    let m = gamma.n_pixels();
    let p_e = detector_powers(gamma, phi_e);
    let mask = measurement_mask(&p_e, floor_rel);
    let row_index: Vec<(usize, usize)> = (0..p_e.len())
        .filter(|&r| mask[r])
        .map(|r| (r / m, r % m))
        .collect();
    if row_index.is_empty() {
        return Err(FmtError::AllMasked);
    }
    let mut w = DenseMatrix::zeros(row_index.len(), n);
    for (row, &(l, k)) in row_index.iter().enumerate() {
        let scale = eta / p_e[l * m + k];
        for ((o, gi), pi) in w.row_mut(row).iter_mut().zip(&g[k]).zip(&phi_e[l]) {
            *o = scale * gi * pi;
        }
    }
    Ok(SensitivityMatrix {
        matrix: w,
        row_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble_system, OpticalMedium};
    use crate::forward::{build_gamma, DetectorPlane, DENOMINATOR_FLOOR};
    use crate::mesh::build_grid;

    #[test]
    fn zero_gamma_row_gives_zero_adjoint() {
        let mesh = build_grid([2.0, 2.0, 2.0], 1.0).unwrap();
        let med =
            OpticalMedium::homogeneous(mesh.n_nodes(), 0.01, 1.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        let s = assemble_system(&mesh, &med).unwrap();
        let gamma = Gamma::from_rows(mesh.n_nodes(), vec![vec![], vec![(20, 0.5)]]);
        let g = adjoint_detector_fields(&s, &gamma).unwrap();
        assert!(g[0].iter().all(|&v| v == 0.0));
        assert!(s.relative_residual(&g[1], &gamma.dense_row(1)) < 1e-8);
    }

    #[test]
    fn eta_scales_linearly() {
        // fine enough for the discrete maximum principle, so W >= 0
        let mesh = build_grid([2.0, 2.0, 2.0], 0.5).unwrap();
        let med =
            OpticalMedium::homogeneous(mesh.n_nodes(), 0.01, 1.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        let s = assemble_system(&mesh, &med).unwrap();
        let det = DetectorPlane::centered(&mesh, 2, 2, 1.0, 4.0, 80.0).unwrap();
        let gamma = build_gamma(&mesh, &det).unwrap();
        let g = adjoint_detector_fields(&s, &gamma).unwrap();
        let mut q = vec![0.0; mesh.n_nodes()];
        q[mesh.illum_nodes()[4]] = 0.5;
        let phi = vec![crate::fem::solve(&s, &q).unwrap()];
        let w1 = assemble_w(&g, &phi, &gamma, 1.0, DENOMINATOR_FLOOR).unwrap();
        let w2 = assemble_w(&g, &phi, &gamma, 2.0, DENOMINATOR_FLOOR).unwrap();
        for (a, b) in w1.matrix.data().iter().zip(w2.matrix.data()) {
            assert_eq!(2.0 * a, *b);
        }
        assert!(w1.matrix.data().iter().all(|&v| v >= 0.0));
        let zero = w1.apply(&vec![0.0; mesh.n_nodes()]);
        assert!(zero.iter().all(|&v| v == 0.0));

        let mut buf = Vec::new();
        w1.write_binary(&mut buf).unwrap();
        assert_eq!(
            SensitivityMatrix::read_binary(buf.as_slice()).unwrap(),
            w1.matrix
        );
    }
}
