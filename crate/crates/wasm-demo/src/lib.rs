//! A 10 mm phantom small enough to solve interactively in the browser.
//!
//! Three operations: the excitation field of one laser, a reconstruction at
//! a chosen λ, and the next pattern designed at a chosen μ. Images are
//! row-major `side x side` slices with the top face in row 0.

use fmt_core::config::{InclusionSection, RunConfig};
use fmt_core::forward::MeasurementSet;
use fmt_core::io::slice;
use fmt_core::pipeline::SliceAxis;
use fmt_core::{Experiment, IlluminationPattern, MetricsReport, Result};
use wasm_bindgen::prelude::*;

/// The demo phantom: two bars 1 mm under the top face, 4x4 lasers, 4x4 pixels.
pub fn demo_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.phantom.dims_mm = [10.0, 10.0, 10.0];
    cfg.inclusions = Some(vec![
        InclusionSection {
            min_corner: [2.0, 2.0, 8.0],
            max_corner: [3.0, 8.0, 9.0],
            intensity: 100.0,
        },
        InclusionSection {
            min_corner: [7.0, 2.0, 8.0],
            max_corner: [8.0, 8.0, 9.0],
            intensity: 100.0,
        },
    ]);
    cfg.lasers.grid_center = [5.0, 5.0];
    cfg.lasers.pitch_mm = 2.0;
    cfg.lasers.nx = 4;
    cfg.lasers.ny = 4;
    cfg.detector.rows = 4;
    cfg.detector.cols = 4;
    cfg.detector.pitch_mm = 3.0;
    cfg.detector.height_mm = 5.0;
    cfg.recon.max_iters = 300;
    cfg
}

/// Native core of the demo; [`Demo`] only converts errors for JavaScript.
pub struct Scene {
    pub cfg: RunConfig,
    pub exp: Experiment,
    pub pattern: IlluminationPattern,
    phi_e: Vec<Vec<f64>>,
    meas: MeasurementSet,
    pub recon: Option<Vec<f64>>,
    pub metrics: Option<MetricsReport>,
}

impl Scene {
    pub fn new() -> Result<Self> {
        let cfg = demo_config();
        cfg.validate()?;
        let exp = Experiment::new(cfg.phantom_spec())?;
        let pattern = exp.initial_pattern()?;
        let phi_e = exp.excitation(&pattern)?;
        let meas = exp.measure(&exp.truth, &phi_e, cfg.noise.seed)?;
        Ok(Self {
            cfg,
            exp,
            pattern,
            phi_e,
            meas,
            recon: None,
            metrics: None,
        })
    }

    /// Nodes along one cube edge.
    pub fn side(&self) -> usize {
        self.exp.mesh.counts()[0] + 1
    }

    /// Vertical slice through the bars (constant y).
    fn front(&self, values: &[f64]) -> Result<Vec<f64>> {
        let d = self.cfg.phantom.dims_mm;
        Ok(slice(
            &self.exp.mesh,
            values,
            SliceAxis::Front,
            [0.0, d[1] / 2.0, 0.0],
        )?
        .values)
    }

    pub fn truth_slice(&self) -> Result<Vec<f64>> {
        self.front(&self.exp.truth)
    }

    /// Field of a unit laser at `(x, y)` on the top face, sliced at that `y`.
    pub fn excitation_slice(&self, x: f64, y: f64) -> Result<Vec<f64>> {
        let d = self.cfg.phantom.dims_mm;
        let node = self.exp.mesh.nearest_node([x, y, d[2]]);
        let mut power = vec![0.0; self.exp.n_nodes()];
        power[node] = self.pattern.p_max;
        let single = IlluminationPattern {
            power,
            ..self.pattern.clone()
        };
        let phi = self.exp.excitation(&single)?.remove(0);
        let at = self.exp.mesh.node_coords()[node];
        Ok(slice(&self.exp.mesh, &phi, SliceAxis::Front, at)?.values)
    }

    pub fn reconstruct(&mut self, lambda: f64) -> Result<Vec<f64>> {
        let mut rc = self.cfg.recon_config();
        rc.lambda = lambda;
        let img = self.exp.reconstruct(&self.phi_e, &self.meas, &rc)?;
        self.metrics = Some(fmt_core::evaluate(&img.c, &self.exp.truth)?);
        let out = self.front(&img.c)?;
        self.recon = Some(img.c);
        Ok(out)
    }

    /// Top-face power map of the next pattern, designed from the last
    /// reconstruction (or the truth when none exists yet).
    pub fn design(&mut self, mu: f64) -> Result<Vec<f64>> {
        let mut settings = self.cfg.loop_settings();
        settings.illum.mu = mu;
        let c = self.recon.as_deref().unwrap_or(&self.exp.truth);
        let design = self
            .exp
            .design(c, &self.phi_e, &self.meas, &self.pattern, &settings)?;
        Ok(slice(
            &self.exp.mesh,
            &design.pattern.power,
            SliceAxis::Top,
            [0.0, 0.0, self.cfg.phantom.dims_mm[2]],
        )?
        .values)
    }
}

fn js(e: fmt_core::FmtError) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    scene: Scene,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> std::result::Result<Demo, JsError> {
        Ok(Demo {
            scene: Scene::new().map_err(js)?,
        })
    }

    pub fn side(&self) -> usize {
        self.scene.side()
    }

    pub fn truth(&self) -> std::result::Result<Vec<f64>, JsError> {
        self.scene.truth_slice().map_err(js)
    }

    pub fn excitation(&self, x: f64, y: f64) -> std::result::Result<Vec<f64>, JsError> {
        self.scene.excitation_slice(x, y).map_err(js)
    }

    pub fn reconstruct(&mut self, lambda: f64) -> std::result::Result<Vec<f64>, JsError> {
        self.scene.reconstruct(lambda).map_err(js)
    }

    /// `[mse, dice, vr, snr_db]` of the last reconstruction, empty before one.
    pub fn metrics(&self) -> Vec<f64> {
        self.scene
            .metrics
            .map(|m| vec![m.mse, m.dice, m.vr, m.snr_db])
            .unwrap_or_default()
    }

    pub fn design(&mut self, mu: f64) -> std::result::Result<Vec<f64>, JsError> {
        self.scene.design(mu).map_err(js)
    }
}
