//! Illumination pattern design: reweighted ℓ1 with box-constrained cyclic
//! coordinate descent, and splitting of a pattern into single-laser sources.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{FmtError, Result};
use crate::forward::PointSource;
use crate::linalg::{dot, norm2, DenseMatrix};
use crate::mesh::MeshGrid;
use crate::recon::shrink;

/// Guard for relative-change denominators.
pub const REL_CHANGE_DELTA: f64 = 1e-12;
const RESIDUAL_REFRESH: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlluminationPattern {
    /// laser power per mesh node
    pub power: Vec<f64>,
    pub p_max: f64,
    /// target bound on the number of lasers (reported, not enforced)
    pub l_max: usize,
    /// set when the design collapsed to an empty pattern
    pub all_zero_warning: bool,
}

impl IlluminationPattern {
    pub fn from_sources(n: usize, sources: &[PointSource], p_max: f64, l_max: usize) -> Self {
        let mut power = vec![0.0; n];
        for s in sources {
            power[s.node] += s.power;
        }
        Self {
            power,
            p_max,
            l_max,
            all_zero_warning: false,
        }
    }

    pub fn nnz(&self) -> usize {
        self.power.iter().filter(|&&p| p != 0.0).count()
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.power.len())
            .filter(|&i| self.power[i] != 0.0)
            .collect()
    }

    pub fn exceeds_laser_bound(&self) -> bool {
        self.nnz() > self.l_max
    }

    /// `0 <= Σ <= p_max` with support on allowed nodes only.
    pub fn check_feasible(&self, allowed: &[bool]) -> Result<()> {
        FmtError::check_len("pattern", allowed.len(), self.power.len())?;
        for (i, &p) in self.power.iter().enumerate() {
            if !(p >= 0.0) || p > self.p_max {
                return Err(FmtError::InfeasiblePattern(format!(
                    "power {p} at node {i} outside [0, {}]",
                    self.p_max
                )));
            }
            if p != 0.0 && !allowed[i] {
                return Err(FmtError::InfeasiblePattern(format!(
                    "laser at node {i} outside the illumination face"
                )));
            }
        }
        Ok(())
    }

    /// `‖a - b‖ / max(‖b‖, δ)`
    pub fn relative_change(&self, previous: &IlluminationPattern) -> f64 {
        let diff: Vec<f64> = self
            .power
            .iter()
            .zip(&previous.power)
            .map(|(a, b)| a - b)
            .collect();
        norm2(&diff) / norm2(&previous.power).max(REL_CHANGE_DELTA)
    }

    pub fn write_csv<W: Write>(&self, mesh: &MeshGrid, mut w: W) -> Result<()> {
        writeln!(w, "node_id,x,y,z,power")?;
        for i in self.support() {
            let p = mesh.node_coords()[i];
            writeln!(w, "{i},{},{},{},{}", p[0], p[1], p[2], self.power[i])?;
        }
        Ok(())
    }

    pub fn read_csv(text: &str, path: &str, n: usize, p_max: f64, l_max: usize) -> Result<Self> {
        let mut power = vec![0.0; n];
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = |why: &str| FmtError::Parse {
                path: path.to_string(),
                reason: format!("line {}: {why}", ln + 1),
            };
            if f.len() != 5 {
                return Err(bad("expected node_id,x,y,z,power"));
            }
            let node: usize = f[0].trim().parse().map_err(|_| bad("bad node id"))?;
            let p: f64 = f[4].trim().parse().map_err(|_| bad("bad power"))?;
            if node >= n {
                return Err(bad("node id out of range"));
            }
            power[node] = p;
        }
        Ok(Self {
            power,
            p_max,
            l_max,
            all_zero_warning: false,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReweightConfig {
    pub mu: f64,
    pub epsilon: f64,
    pub outer_iters: usize,
    /// coordinate-descent sweeps per outer iteration
    pub sweeps: usize,
    pub tol: f64,
}

impl ReweightConfig {
    /// Defaults for a given power cap: `ε = 0.01 p_max`.
    pub fn with_p_max(mu: f64, p_max: f64) -> Self {
        Self {
            mu,
            epsilon: 0.01 * p_max,
            outer_iters: 10,
            sweeps: 200,
            tol: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(FmtError::param("illum.mu", "must be > 0"));
        }
        if !(self.epsilon > 0.0) {
            return Err(FmtError::param("illum.epsilon", "must be > 0"));
        }
        if self.outer_iters == 0 || self.sweeps == 0 {
            return Err(FmtError::param(
                "illum",
                "outer_iters and sweeps must be > 0",
            ));
        }
        if !(self.tol >= 0.0) {
            return Err(FmtError::param("illum.tol", "must be >= 0"));
        }
        Ok(())
    }
}

/// Column-major copy of `Ṽ` with cached squared column norms.
#[derive(Debug, Clone)]
pub struct CcdProblem {
    columns: Vec<Vec<f64>>,
    sq_norms: Vec<f64>,
    target: Vec<f64>,
}

impl CcdProblem {
    pub fn new(v: &DenseMatrix, y: &[f64]) -> Result<Self> {
        FmtError::check_len("design targets", v.rows(), y.len())?;
        let columns = v.to_columns();
        let sq_norms = columns.iter().map(|c| dot(c, c)).collect();
        Ok(Self {
            columns,
            sq_norms,
            target: y.to_vec(),
        })
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn n_rows(&self) -> usize {
        self.target.len()
    }

    fn residual(&self, sigma: &[f64]) -> Vec<f64> {
        let mut r = self.target.clone();
        for (col, &s) in self.columns.iter().zip(sigma) {
            if s != 0.0 {
                r.iter_mut().zip(col).for_each(|(ri, v)| *ri -= v * s);
            }
        }
        r
    }

    /// `½‖Ỹ - ṼΣ‖² + μ Σ h_j |Σ_j|`
    pub fn objective(&self, sigma: &[f64], mu: f64, weights: &[f64]) -> f64 {
        let r = self.residual(sigma);
        let pen: f64 = sigma.iter().zip(weights).map(|(s, h)| h * s.abs()).sum();
        0.5 * dot(&r, &r) + mu * pen
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcdResult {
    pub sigma: Vec<f64>,
    pub sweeps: usize,
    /// objective after every sweep
    pub objective_log: Vec<f64>,
}

/// Box-constrained cyclic coordinate descent for the weighted ℓ1 problem.
pub fn ccd_solve(
    problem: &CcdProblem,
    mu: f64,
    weights: &[f64],
    p_max: f64,
    sigma0: &[f64],
    max_sweeps: usize,
    tol: f64,
) -> Result<CcdResult> {
    let n = problem.n_cols();
    FmtError::check_len("weights", n, weights.len())?;
    FmtError::check_len("initial pattern", n, sigma0.len())?;
    if !(p_max > 0.0) {
        return Err(FmtError::param("lasers.p_max", "must be > 0"));
    }
    if sigma0.iter().any(|&s| !(0.0..=p_max).contains(&s)) {
        return Err(FmtError::InfeasiblePattern(
            "initial pattern outside [0, p_max]".into(),
        ));
    }
    let mut sigma = sigma0.to_vec();
    for j in 0..n {
        if problem.sq_norms[j] == 0.0 {
            sigma[j] = 0.0;
        }
    }
    let mut r = problem.residual(&sigma);
    let mut log = Vec::new();
    let mut sweeps = 0;
    for sweep in 1..=max_sweeps {
        sweeps = sweep;
        let mut max_change = 0.0f64;
        for j in 0..n {
            let nj = problem.sq_norms[j];
            if nj == 0.0 {
                continue;
            }
            let col = &problem.columns[j];
            let old = sigma[j];
            // V_j^T r^(j) with r^(j) = r + V_j Σ_j
            let rho = dot(col, &r) + nj * old;
            let new = (shrink(rho, mu * weights[j]) / nj).clamp(0.0, p_max);
            let delta = new - old;
            if delta != 0.0 {
                r.iter_mut().zip(col).for_each(|(ri, v)| *ri -= v * delta);
                sigma[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if sweep % RESIDUAL_REFRESH == 0 {
            r = problem.residual(&sigma);
        }
        let pen: f64 = sigma.iter().zip(weights).map(|(s, h)| h * s).sum();
        log.push(0.5 * dot(&r, &r) + mu * pen);
        if max_change < tol * p_max {
            break;
        }
    }
    Ok(CcdResult {
        sigma,
        sweeps,
        objective_log: log,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReweightResult {
    /// solution in column space
    pub sigma: Vec<f64>,
    pub outer_iters: usize,
    pub nnz_history: Vec<usize>,
    pub all_zero_warning: bool,
}

/// Reweighted ℓ1 minimization: `h¹ = 1`, `h^{k+1}_i = 1 / (|Σ^k_i| + ε)`.
pub fn reweighted_l1(
    problem: &CcdProblem,
    config: &ReweightConfig,
    sigma_init: &[f64],
    p_max: f64,
) -> Result<ReweightResult> {
    config.validate()?;
    let n = problem.n_cols();
    let mut weights = vec![1.0; n];
    let mut sigma_prev = sigma_init.to_vec();
    let mut nnz_history = Vec::new();
    let mut outer = 0;
    for k in 1..=config.outer_iters {
        outer = k;
        let res = ccd_solve(
            problem,
            config.mu,
            &weights,
            p_max,
            &sigma_prev,
            config.sweeps,
            config.tol,
        )?;
        let sigma = res.sigma;
        let nnz = sigma.iter().filter(|&&s| s != 0.0).count();
        nnz_history.push(nnz);
        if k == 1 && nnz == 0 {
            return Ok(ReweightResult {
                sigma,
                outer_iters: 1,
                nnz_history,
                all_zero_warning: true,
            });
        }
        let diff: Vec<f64> = sigma.iter().zip(&sigma_prev).map(|(a, b)| a - b).collect();
        let change = norm2(&diff) / norm2(&sigma_prev).max(REL_CHANGE_DELTA);
        for (h, s) in weights.iter_mut().zip(&sigma) {
            *h = 1.0 / (s.abs() + config.epsilon);
        }
        sigma_prev = sigma;
        if k > 1 && change < config.tol {
            break;
        }
    }
    Ok(ReweightResult {
        sigma: sigma_prev,
        outer_iters: outer,
        nnz_history,
        all_zero_warning: false,
    })
}

/// One single-node source per nonzero entry, in node order.
pub fn split_pattern(pattern: &IlluminationPattern) -> Result<Vec<PointSource>> {
    let sources: Vec<PointSource> = pattern
        .power
        .iter()
        .enumerate()
        .filter(|(_, &p)| p != 0.0)
        .map(|(node, &power)| PointSource { node, power })
        .collect();
    if sources.is_empty() {
        return Err(FmtError::EmptyPattern);
    }
    Ok(sources)
}

/// `n` geometrically spaced values from `lo` to `hi` inclusive.
pub fn geometric_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo) || n == 0 {
        return Err(FmtError::param("mu-sweep", "need 0 < lo <= hi and n >= 1"));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let ratio = (hi / lo).ln() / (n - 1) as f64;
    Ok((0..n).map(|i| lo * (ratio * i as f64).exp()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub mu: f64,
    pub nnz: usize,
    pub objective: f64,
}

/// Runs the reweighted design for each μ of a geometric grid.
pub fn mu_sweep(
    problem: &CcdProblem,
    base: &ReweightConfig,
    sigma_init: &[f64],
    p_max: f64,
    mus: &[f64],
) -> Result<Vec<SweepPoint>> {
    let run = |&mu: &f64| -> Result<SweepPoint> {
        let cfg = ReweightConfig { mu, ..*base };
        let res = reweighted_l1(problem, &cfg, sigma_init, p_max)?;
        let ones = vec![1.0; problem.n_cols()];
        Ok(SweepPoint {
            mu,
            nnz: res.sigma.iter().filter(|&&s| s != 0.0).count(),
            objective: problem.objective(&res.sigma, mu, &ones),
        })
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        mus.par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    mus.iter().map(run).collect()
}
