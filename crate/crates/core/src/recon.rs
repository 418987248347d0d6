//! Sparse reconstruction of the fluorescence distribution with FISTA.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FmtError, Result};
use crate::linalg::{dot, norm2, LinearOperator};

pub const DEFAULT_LAMBDA: f64 = 1e-4;
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 2000;

const POWER_TOL: f64 = 1e-8;
const POWER_MAX_ITERS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub lambda: f64,
    /// elastic-net mix: 1 = lasso, 0 = ridge
    pub alpha: f64,
    pub max_iters: usize,
    /// relative objective change that stops the iteration
    pub tol: f64,
    /// restrict the solution to `C >= 0`
    pub nonnegative: bool,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            alpha: 1.0,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            nonnegative: true,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(FmtError::param("recon.lambda", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(FmtError::param("recon.alpha", "must lie in [0, 1]"));
        }
        if self.max_iters == 0 {
            return Err(FmtError::param("recon.max_iters", "must be > 0"));
        }
        if !(self.tol >= 0.0) {
            return Err(FmtError::param("recon.tol", "must be >= 0"));
        }
        Ok(())
    }

    /// `R(C) = λ(α‖C‖₁ + (1-α)/2 ‖C‖²)`
    pub fn penalty(&self, c: &[f64]) -> f64 {
        let l1: f64 = c.iter().map(|v| v.abs()).sum();
        let l2: f64 = dot(c, c);
        self.lambda * (self.alpha * l1 + 0.5 * (1.0 - self.alpha) * l2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    pub objective: f64,
    pub nnz: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluorescenceImage {
    pub c: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub lipschitz: f64,
    pub log: Vec<IterationLog>,
}

impl FluorescenceImage {
    pub fn write_log_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iter,objective,nnz")?;
        for e in &self.log {
            writeln!(w, "{},{:e},{}", e.iter, e.objective, e.nnz)?;
        }
        Ok(())
    }
}

/// `τ_θ(x)_i = sign(x_i) max(|x_i| - θ, 0)`
pub fn soft_threshold(x: &[f64], theta: f64) -> Vec<f64> {
    x.iter().map(|&v| shrink(v, theta)).collect()
}

#[inline]
pub(crate) fn shrink(v: f64, theta: f64) -> f64 {
    if v > theta {
        v - theta
    } else if v < -theta {
        v + theta
    } else {
        0.0
    }
}

/// Proximal map of `s R` for the elastic-net penalty.
pub fn prox_elastic_net(z: &[f64], s: f64, lambda: f64, alpha: f64) -> Vec<f64> {
    let scale = 1.0 / (1.0 + (1.0 - alpha) * lambda * s);
    let theta = alpha * lambda * s;
    z.iter().map(|&v| scale * shrink(v, theta)).collect()
}

/// Largest eigenvalue of `W^T W` by power iteration.
pub fn lipschitz_constant<Op: LinearOperator + ?Sized>(w: &Op) -> Result<f64> {
    let n = w.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut wv = vec![0.0; w.nrows()];
    let mut wtwv = vec![0.0; n];
    let mut prev = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        w.apply(&v, &mut wv);
        let rayleigh = dot(&wv, &wv);
        w.apply_t(&wv, &mut wtwv);
        let nrm = norm2(&wtwv);
        if nrm == 0.0 {
            return Err(FmtError::param("W", "zero matrix has no Lipschitz step"));
        }
        v.iter_mut().zip(&wtwv).for_each(|(a, b)| *a = b / nrm);
        if prev > 0.0 && ((rayleigh - prev) / rayleigh).abs() < POWER_TOL {
            return Ok(rayleigh);
        }
        prev = rayleigh;
    }
    Ok(prev)
}

/// Constant step `1 / L` for the proximal gradient iteration.
pub fn lipschitz_step<Op: LinearOperator + ?Sized>(w: &Op) -> Result<f64> {
    Ok(1.0 / lipschitz_constant(w)?)
}

/// FISTA with constant step size, started from `C = 0`.
///
/// Returns the iterate with the lowest objective seen.
pub fn fista<Op: LinearOperator + ?Sized>(
    w: &Op,
    y: &[f64],
    config: &ReconConfig,
) -> Result<FluorescenceImage> {
    config.validate()?;
    FmtError::check_len("measurements", w.nrows(), y.len())?;
    let n = w.ncols();
    let m = w.nrows();
    let lip = lipschitz_constant(w)?;
    let step = 1.0 / lip;

    let objective = |wx: &[f64], x: &[f64]| -> f64 {
        let res: f64 = wx.iter().zip(y).map(|(a, b)| (b - a) * (b - a)).sum();
        0.5 * res + config.penalty(x)
    };

    let mut c = vec![0.0; n];
    let mut wc = vec![0.0; m];
    let mut x_prev = vec![0.0; n];
    let mut wx_prev = vec![0.0; m];
    let mut x = vec![0.0; n];
    let mut wx = vec![0.0; m];
    let mut grad = vec![0.0; n];
    let mut resid = vec![0.0; m];
    let mut p = 1.0f64;

    let mut best = c.clone();
    let mut best_obj = objective(&wc, &c);
    let mut prev_obj = best_obj;
    let mut log = Vec::new();
    let mut iterations = 0;

    let scale = 1.0 / (1.0 + (1.0 - config.alpha) * config.lambda * step);
    let theta = config.alpha * config.lambda * step;

    for k in 1..=config.max_iters {
        iterations = k;
        for ((r, yi), wci) in resid.iter_mut().zip(y).zip(&wc) {
            *r = yi - wci;
        }
        w.apply_t(&resid, &mut grad);
        for i in 0..n {
            let mut v = scale * shrink(c[i] + step * grad[i], theta);
            if config.nonnegative && v < 0.0 {
                v = 0.0;
            }
            x[i] = v;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FmtError::NonFinite { iteration: k });
        }
        w.apply(&x, &mut wx);
        let obj = objective(&wx, &x);
        if !obj.is_finite() {
            return Err(FmtError::NonFinite { iteration: k });
        }
        log.push(IterationLog {
            iter: k,
            objective: obj,
            nnz: x.iter().filter(|&&v| v != 0.0).count(),
        });
        if obj < best_obj {
            best_obj = obj;
            best.copy_from_slice(&x);
        }

        let p_next = (1.0 + (1.0 + 4.0 * p * p).sqrt()) / 2.0;
        let beta = (p - 1.0) / p_next;
        p = p_next;
        let mut clamped = false;
        for i in 0..n {
            let mut v = x[i] + beta * (x[i] - x_prev[i]);
            if config.nonnegative && v < 0.0 {
                v = 0.0;
                clamped = true;
            }
            c[i] = v;
        }
        if clamped {
            w.apply(&c, &mut wc);
        } else {
            for i in 0..m {
                wc[i] = wx[i] + beta * (wx[i] - wx_prev[i]);
            }
        }
        std::mem::swap(&mut x_prev, &mut x);
        std::mem::swap(&mut wx_prev, &mut wx);

        let change = (prev_obj - obj).abs() / prev_obj.abs().max(f64::MIN_POSITIVE);
        prev_obj = obj;
        if change < config.tol {
            break;
        }
    }

    Ok(FluorescenceImage {
        c: best,
        objective: best_obj,
        iterations,
        lipschitz: lip,
        log,
    })
}
