//! Design matrix `V(C)` mapping laser powers to predicted Born ratios.
//!
//! With `g_k = (S^f)^{-1} Γ_k` and `h_k = (S^e)^{-1} η (g_k ⊙ C)`, row `(l, k)`
//! restricted to candidate node `j` is `h_k(j) / (2ζ d_{l,k})`, where the
//! denominators `d_{l,k} = Γ_k · Φ^e_l` are frozen at the fields of the
//! pattern being improved. Multiplying by a power vector (W/mm²) therefore
//! reproduces the Born ratios of that pattern.

use crate::error::{FmtError, Result};
use crate::fem::{solve_many, SystemMatrix};
use crate::forward::{detector_powers, measurement_mask, Gamma};
use crate::jacobian::adjoint_detector_fields;
use crate::linalg::{norm2, DenseMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub matrix: DenseMatrix,
    /// mesh node of every column
    pub columns: Vec<usize>,
    /// `(l, k)` of every row
    pub row_index: Vec<(usize, usize)>,
    /// `d_{l,k}` of every row
    pub denominators: Vec<f64>,
    /// `h_k` restricted to the columns, one vector per pixel
    pub h: Vec<Vec<f64>>,
    /// factor turning a laser power into a nodal load
    pub source_scale: f64,
}

impl DesignMatrix {
    /// Rebuilds row `r` from the cached adjoint products.
    pub fn row_from_adjoint(&self, r: usize) -> Vec<f64> {
        let (_, k) = self.row_index[r];
        let s = self.source_scale / self.denominators[r];
        self.h[k].iter().map(|v| v * s).collect()
    }

    /// Expands a column-space vector to a nodal vector of length `n`.
    pub fn scatter(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (&node, &v) in self.columns.iter().zip(x) {
            out[node] = v;
        }
        out
    }

    /// Restricts a nodal vector to the columns.
    pub fn gather(&self, nodal: &[f64]) -> Vec<f64> {
        self.columns.iter().map(|&i| nodal[i]).collect()
    }
}

/// Inputs shared by every design-matrix assembly of one experiment.
pub struct DesignInputs<'a> {
    pub s_e: &'a SystemMatrix,
    pub gamma: &'a Gamma,
    /// adjoint detector fields `g_k`
    pub adjoint: &'a [Vec<f64>],
    pub eta: f64,
    pub zeta: f64,
    pub floor_rel: f64,
}

/// Full assembly including the adjoint solves (`2M` solves in total).
#[allow(clippy::too_many_arguments)]
pub fn assemble_v(
    s_e: &SystemMatrix,
    s_f: &SystemMatrix,
    gamma: &Gamma,
    c: &[f64],
    phi_e_prev: &[Vec<f64>],
    eta: f64,
    zeta: f64,
    support: &[usize],
    floor_rel: f64,
) -> Result<DesignMatrix> {
    let g = adjoint_detector_fields(s_f, gamma)?;
    let inputs = DesignInputs {
        s_e,
        gamma,
        adjoint: &g,
        eta,
        zeta,
        floor_rel,
    };
    assemble_v_with_adjoint(&inputs, c, phi_e_prev, support)
}

/// Assembly reusing precomputed adjoint fields (`M` solves).
pub fn assemble_v_with_adjoint(
    inputs: &DesignInputs<'_>,
    c: &[f64],
    phi_e_prev: &[Vec<f64>],
    support: &[usize],
) -> Result<DesignMatrix> {
    let n = inputs.gamma.n_nodes();
    FmtError::check_len("fluorescence", n, c.len())?;
    FmtError::check_len(
        "adjoint fields",
        inputs.gamma.n_pixels(),
        inputs.adjoint.len(),
    )?;
    if let Some(i) = c.iter().position(|&v| v < 0.0) {
        return Err(FmtError::param(
            "C",
            format!("negative fluorescence at node {i}"),
        ));
    }
    if let Some(&j) = support.iter().find(|&&j| j >= n) {
        return Err(FmtError::param("support", format!("node {j} out of range")));
    }
    let m = inputs.gamma.n_pixels();
    let rhs: Vec<Vec<f64>> = inputs
        .adjoint
        .iter()
        .map(|g| {
            g.iter()
                .zip(c)
                .map(|(gi, ci)| inputs.eta * gi * ci)
                .collect()
        })
        .collect();
    let h_full = solve_many(inputs.s_e, &rhs)?;
    let h: Vec<Vec<f64>> = h_full
        .iter()
        .map(|hk| support.iter().map(|&j| hk[j]).collect())
        .collect();

    let p_e = detector_powers(inputs.gamma, phi_e_prev);
    let mask = measurement_mask(&p_e, inputs.floor_rel);
    let rows: Vec<usize> = (0..p_e.len()).filter(|&r| mask[r]).collect();
    if rows.is_empty() {
        return Err(FmtError::AllMasked);
    }
    let source_scale = 1.0 / (2.0 * inputs.zeta);
    let mut matrix = DenseMatrix::zeros(rows.len(), support.len());
    let mut row_index = Vec::with_capacity(rows.len());
    let mut denominators = Vec::with_capacity(rows.len());
    for (r, &flat) in rows.iter().enumerate() {
        let (l, k) = (flat / m, flat % m);
        let s = source_scale / p_e[flat];
        for (o, v) in matrix.row_mut(r).iter_mut().zip(&h[k]) {
            *o = v * s;
        }
        row_index.push((l, k));
        denominators.push(p_e[flat]);
    }
    Ok(DesignMatrix {
        matrix,
        columns: support.to_vec(),
        row_index,
        denominators,
        h,
        source_scale,
    })
}

/// Appends `γ s e_j` rows (target 0) for every column whose node is not
/// allowed to carry a laser, where `s` is the largest column norm of `V`.
/// The scale makes `γ` dimensionless: at `γ = 10³` the penalty outweighs
/// any column by a factor of a million in the normal equations.
pub fn extend_system(
    v: &DesignMatrix,
    y: &[f64],
    gamma: f64,
    allowed: &[bool],
) -> Result<(DenseMatrix, Vec<f64>)> {
    if !(gamma >= 0.0) {
        return Err(FmtError::param("illum.gamma_interior", "must be >= 0"));
    }
    FmtError::check_len("design targets", v.matrix.rows(), y.len())?;
    let mut vt = v.matrix.clone();
    let mut yt = y.to_vec();
    if gamma > 0.0 {
        let cols = v.columns.len();
        let scale = v
            .matrix
            .to_columns()
            .iter()
            .map(|c| norm2(c))
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        let extra: Vec<Vec<f64>> = v
            .columns
            .iter()
            .enumerate()
            .filter(|(_, &node)| !allowed[node])
            .map(|(j, _)| {
                let mut row = vec![0.0; cols];
                row[j] = gamma * scale;
                row
            })
            .collect();
        yt.extend(std::iter::repeat_n(0.0, extra.len()));
        vt.append_rows(&extra)?;
    }
    Ok((vt, yt))
}
