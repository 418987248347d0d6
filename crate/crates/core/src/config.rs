//! TOML run configuration with defaults matching the reference phantom.
//!
//! Unknown keys are rejected and every range violation is reported with
//! the dotted key path, e.g. `phantom.mu_a`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FmtError, Result};
use crate::forward::NoiseModel;
use crate::illum::ReweightConfig;
use crate::pipeline::{DetectorSpec, Inclusion, LaserGrid, LoopSettings, PhantomSpec, SliceAxis};
use crate::recon::ReconConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomSection,
    pub inclusions: Option<Vec<InclusionSection>>,
    pub lasers: LaserSection,
    pub detector: DetectorSection,
    pub recon: ReconSection,
    pub illum: IllumSection,
    #[serde(rename = "loop")]
    pub loop_: LoopSection,
    pub noise: NoiseSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub dims_mm: [f64; 3],
    pub spacing_mm: f64,
    pub mu_a: f64,
    pub mu_s: f64,
    pub g: f64,
    pub zeta: f64,
    pub eta: f64,
    /// speed of light in the medium, mm/s
    pub c: f64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self {
            dims_mm: [15.0, 15.0, 15.0],
            spacing_mm: 1.0,
            mu_a: 0.01,
            mu_s: 1.0,
            g: 0.0,
            zeta: 1.0,
            eta: 1.0,
            c: 2.2e11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InclusionSection {
    pub min_corner: [f64; 3],
    pub max_corner: [f64; 3],
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LaserSection {
    pub grid_center: [f64; 2],
    pub pitch_mm: f64,
    pub nx: usize,
    pub ny: usize,
    pub power: f64,
    pub p_max: f64,
    /// target bound on the laser count, reported when exceeded
    pub l_max: usize,
}

impl Default for LaserSection {
    fn default() -> Self {
        Self {
            grid_center: [7.5, 7.5],
            pitch_mm: 1.0,
            nx: 10,
            ny: 10,
            power: 1.0,
            p_max: 1.0,
            l_max: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub rows: usize,
    pub cols: usize,
    pub pitch_mm: f64,
    pub height_mm: f64,
    pub acceptance_deg: f64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            rows: 30,
            cols: 60,
            pitch_mm: 1.0,
            height_mm: 10.0,
            acceptance_deg: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconSection {
    pub lambda: f64,
    pub alpha: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ReconSection {
    fn default() -> Self {
        let d = ReconConfig::default();
        Self {
            lambda: d.lambda,
            alpha: d.alpha,
            max_iters: d.max_iters,
            tol: d.tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignSupport {
    /// columns restricted to the illumination face
    Top,
    /// all surface nodes, with the interior penalty rows
    Surface,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IllumSection {
    pub mu: f64,
    /// defaults to `0.01 p_max`
    pub epsilon: Option<f64>,
    pub outer_iters: usize,
    pub sweeps: usize,
    pub tol: f64,
    pub gamma_interior: f64,
    pub support: DesignSupport,
}

impl Default for IllumSection {
    fn default() -> Self {
        Self {
            mu: 1.5e-8,
            epsilon: None,
            outer_iters: 10,
            sweeps: 200,
            tol: 1e-6,
            gamma_interior: 0.0,
            support: DesignSupport::Top,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopSection {
    pub rounds_max: usize,
    pub stop_tol: f64,
}

impl Default for LoopSection {
    fn default() -> Self {
        Self {
            rounds_max: 10,
            stop_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    /// "none" or "gaussian"
    pub model: String,
    pub sigma_rel: f64,
    pub seed: u64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            model: "none".into(),
            sigma_rel: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
    pub slice_axes: Vec<SliceAxis>,
    pub slice_coords: [f64; 3],
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: "run".into(),
            slice_axes: vec![SliceAxis::Top, SliceAxis::Left, SliceAxis::Front],
            slice_coords: [13.0, 9.0, 6.0],
        }
    }
}

/// The two 1x1x10 mm bars of the reference phantom, 3 mm below the top face
/// and 6 mm apart (centre to centre).
pub fn default_inclusions() -> Vec<InclusionSection> {
    vec![
        InclusionSection {
            min_corner: [4.0, 3.0, 11.0],
            max_corner: [5.0, 13.0, 12.0],
            intensity: 100.0,
        },
        InclusionSection {
            min_corner: [10.0, 3.0, 11.0],
            max_corner: [11.0, 13.0, 12.0],
            intensity: 100.0,
        },
    ]
}

fn cfg_err(key: &str, reason: impl Into<String>) -> FmtError {
    FmtError::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(cfg_err(key, format!("must be > 0, got {v}")))
    }
}

fn non_negative(key: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(cfg_err(key, format!("must be >= 0, got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| cfg_err("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            cfg_err(
                &path.display().to_string(),
                format!("cannot read config: {e}"),
            )
        })?;
        Self::from_toml_str(&text)
    }

    pub fn inclusions(&self) -> Vec<InclusionSection> {
        self.inclusions.clone().unwrap_or_else(default_inclusions)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.phantom;
        for (i, d) in p.dims_mm.iter().enumerate() {
            positive(&format!("phantom.dims_mm[{i}]"), *d)?;
        }
        positive("phantom.spacing_mm", p.spacing_mm)?;
        for (i, d) in p.dims_mm.iter().enumerate() {
            let r = d / p.spacing_mm;
            if (r - r.round()).abs() > 1e-9 * r.max(1.0) {
                return Err(cfg_err(
                    &format!("phantom.dims_mm[{i}]"),
                    "must be an integer multiple of phantom.spacing_mm",
                ));
            }
        }
        positive("phantom.mu_a", p.mu_a)?;
        positive("phantom.mu_s", p.mu_s)?;
        if !(p.g > -1.0 && p.g < 1.0) {
            return Err(cfg_err(
                "phantom.g",
                format!("must lie in (-1, 1), got {}", p.g),
            ));
        }
        positive("phantom.zeta", p.zeta)?;
        positive("phantom.eta", p.eta)?;
        positive("phantom.c", p.c)?;

        for (i, inc) in self.inclusions().iter().enumerate() {
            let key = format!("inclusions[{i}]");
            non_negative(&format!("{key}.intensity"), inc.intensity)?;
            for a in 0..3 {
                if !(inc.min_corner[a] <= inc.max_corner[a]) {
                    return Err(cfg_err(
                        &format!("{key}.min_corner"),
                        "must not exceed max_corner",
                    ));
                }
                if inc.min_corner[a] < 0.0 || inc.max_corner[a] > p.dims_mm[a] {
                    return Err(cfg_err(&key, "inclusion must lie inside the phantom"));
                }
            }
        }

        let l = &self.lasers;
        positive("lasers.pitch_mm", l.pitch_mm)?;
        if l.nx == 0 || l.ny == 0 {
            return Err(cfg_err("lasers.nx", "laser grid must be non-empty"));
        }
        positive("lasers.p_max", l.p_max)?;
        positive("lasers.power", l.power)?;
        if l.power > l.p_max {
            return Err(cfg_err("lasers.power", "must not exceed lasers.p_max"));
        }
        let half_x = (l.nx as f64 - 1.0) * l.pitch_mm / 2.0;
        let half_y = (l.ny as f64 - 1.0) * l.pitch_mm / 2.0;
        let eps = 1e-9;
        if l.grid_center[0] - half_x < -eps
            || l.grid_center[0] + half_x > p.dims_mm[0] + eps
            || l.grid_center[1] - half_y < -eps
            || l.grid_center[1] + half_y > p.dims_mm[1] + eps
        {
            return Err(cfg_err(
                "lasers.grid_center",
                "laser grid must lie on the top face",
            ));
        }

        let d = &self.detector;
        if d.rows == 0 || d.cols == 0 {
            return Err(cfg_err("detector.rows", "detector must have pixels"));
        }
        positive("detector.pitch_mm", d.pitch_mm)?;
        positive("detector.height_mm", d.height_mm)?;
        if !(d.acceptance_deg > 0.0 && d.acceptance_deg <= 90.0) {
            return Err(cfg_err("detector.acceptance_deg", "must lie in (0, 90]"));
        }

        let r = &self.recon;
        positive("recon.lambda", r.lambda)?;
        if !(0.0..=1.0).contains(&r.alpha) {
            return Err(cfg_err("recon.alpha", "must lie in [0, 1]"));
        }
        if r.max_iters == 0 {
            return Err(cfg_err("recon.max_iters", "must be > 0"));
        }
        non_negative("recon.tol", r.tol)?;

        let il = &self.illum;
        positive("illum.mu", il.mu)?;
        if let Some(e) = il.epsilon {
            positive("illum.epsilon", e)?;
        }
        if il.outer_iters == 0 {
            return Err(cfg_err("illum.outer_iters", "must be > 0"));
        }
        if il.sweeps == 0 {
            return Err(cfg_err("illum.sweeps", "must be > 0"));
        }
        non_negative("illum.tol", il.tol)?;
        non_negative("illum.gamma_interior", il.gamma_interior)?;

        if self.loop_.rounds_max == 0 {
            return Err(cfg_err("loop.rounds_max", "must be > 0"));
        }
        non_negative("loop.stop_tol", self.loop_.stop_tol)?;

        let n = &self.noise;
        match n.model.as_str() {
            "none" | "gaussian" => {}
            other => {
                return Err(cfg_err(
                    "noise.model",
                    format!("expected \"none\" or \"gaussian\", got {other:?}"),
                ))
            }
        }
        non_negative("noise.sigma_rel", n.sigma_rel)?;
        Ok(())
    }

    pub fn noise_model(&self) -> NoiseModel {
        match self.noise.model.as_str() {
            "gaussian" => NoiseModel::Gaussian {
                sigma_rel: self.noise.sigma_rel,
            },
            _ => NoiseModel::None,
        }
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        let p = &self.phantom;
        PhantomSpec {
            dims: p.dims_mm,
            spacing: p.spacing_mm,
            mu_a: p.mu_a,
            mu_s: p.mu_s,
            g: p.g,
            zeta: p.zeta,
            c: p.c,
            eta: p.eta,
            inclusions: self
                .inclusions()
                .iter()
                .map(|i| Inclusion {
                    min_corner: i.min_corner,
                    max_corner: i.max_corner,
                    intensity: i.intensity,
                })
                .collect(),
            lasers: LaserGrid {
                center: self.lasers.grid_center,
                pitch: self.lasers.pitch_mm,
                nx: self.lasers.nx,
                ny: self.lasers.ny,
                power: self.lasers.power,
                p_max: self.lasers.p_max,
                l_max: self.lasers.l_max,
            },
            detector: DetectorSpec {
                rows: self.detector.rows,
                cols: self.detector.cols,
                pitch: self.detector.pitch_mm,
                height: self.detector.height_mm,
                acceptance_deg: self.detector.acceptance_deg,
            },
            noise: self.noise_model(),
            seed: self.noise.seed,
        }
    }

    pub fn recon_config(&self) -> ReconConfig {
        ReconConfig {
            lambda: self.recon.lambda,
            alpha: self.recon.alpha,
            max_iters: self.recon.max_iters,
            tol: self.recon.tol,
            nonnegative: true,
        }
    }

    pub fn reweight_config(&self) -> ReweightConfig {
        let mut c = ReweightConfig::with_p_max(self.illum.mu, self.lasers.p_max);
        if let Some(e) = self.illum.epsilon {
            c.epsilon = e;
        }
        c.outer_iters = self.illum.outer_iters;
        c.sweeps = self.illum.sweeps;
        c.tol = self.illum.tol;
        c
    }

    pub fn loop_settings(&self) -> LoopSettings {
        LoopSettings {
            recon: self.recon_config(),
            illum: self.reweight_config(),
            gamma_interior: self.illum.gamma_interior,
            support: self.illum.support,
            rounds_max: self.loop_.rounds_max,
            stop_tol: self.loop_.stop_tol,
        }
    }
}
