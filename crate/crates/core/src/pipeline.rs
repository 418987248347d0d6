//! The two-step loop: reconstruct `C` under the current pattern, design the
//! next pattern from `C`, and repeat until the pattern stops moving.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::DesignSupport;
use crate::design::{assemble_v_with_adjoint, extend_system, DesignInputs, DesignMatrix};
use crate::error::{FmtError, Result};
use crate::fem::{assemble_system, OpticalMedium, SystemMatrix};
use crate::forward::{
    add_noise, born_measurements, build_gamma, emission_fields, excitation_fields, DetectorPlane,
    Gamma, MeasurementSet, NoiseModel, PointSource, DENOMINATOR_FLOOR,
};
use crate::illum::{reweighted_l1, split_pattern, CcdProblem, IlluminationPattern, ReweightConfig};
use crate::jacobian::{adjoint_detector_fields, assemble_w, SensitivityMatrix};
use crate::mesh::{build_grid, MeshGrid, Point};
use crate::metrics::{evaluate, MetricsReport};
use crate::recon::{fista, FluorescenceImage, ReconConfig};

const BOX_TOL: f64 = 1e-9;
/// Off-face power below this fraction of `p_max` counts as penalty leakage.
pub const LEAKAGE_TOL: f64 = 1e-6;

/// Axis-aligned box of constant fluorescence; bounds are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    pub min_corner: Point,
    pub max_corner: Point,
    pub intensity: f64,
}

impl Inclusion {
    pub fn contains(&self, p: Point) -> bool {
        (0..3).all(|a| p[a] >= self.min_corner[a] - BOX_TOL && p[a] <= self.max_corner[a] + BOX_TOL)
    }
}

/// Regular laser grid on the top face.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaserGrid {
    pub center: [f64; 2],
    pub pitch: f64,
    pub nx: usize,
    pub ny: usize,
    pub power: f64,
    pub p_max: f64,
    pub l_max: usize,
}

impl LaserGrid {
    /// One source per grid point, snapped to the nearest top-face node.
    pub fn sources(&self, mesh: &MeshGrid) -> Result<Vec<PointSource>> {
        let z = mesh.top_z();
        let mut out: Vec<PointSource> = Vec::with_capacity(self.nx * self.ny);
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let x = self.center[0] + (ix as f64 - (self.nx as f64 - 1.0) / 2.0) * self.pitch;
                let y = self.center[1] + (iy as f64 - (self.ny as f64 - 1.0) / 2.0) * self.pitch;
                let node = mesh.nearest_node([x, y, z]);
                if !mesh.illum_allowed()[node] {
                    return Err(FmtError::param(
                        "lasers",
                        "grid point off the illumination face",
                    ));
                }
                if out.iter().any(|s| s.node == node) {
                    return Err(FmtError::param(
                        "lasers.pitch_mm",
                        format!("two lasers snap to node {node}; pitch finer than the mesh"),
                    ));
                }
                out.push(PointSource {
                    node,
                    power: self.power,
                });
            }
        }
        out.sort_by_key(|s| s.node);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub rows: usize,
    pub cols: usize,
    pub pitch: f64,
    pub height: f64,
    pub acceptance_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Point,
    pub spacing: f64,
    pub mu_a: f64,
    pub mu_s: f64,
    pub g: f64,
    pub zeta: f64,
    pub c: f64,
    pub eta: f64,
    pub inclusions: Vec<Inclusion>,
    pub lasers: LaserGrid,
    pub detector: DetectorSpec,
    pub noise: NoiseModel,
    pub seed: u64,
}

impl PhantomSpec {
    /// Nodal ground truth: each node takes the largest intensity of the
    /// inclusions containing it.
    pub fn truth(&self, mesh: &MeshGrid) -> Vec<f64> {
        mesh.node_coords()
            .iter()
            .map(|&p| {
                self.inclusions
                    .iter()
                    .filter(|inc| inc.contains(p))
                    .map(|inc| inc.intensity)
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, inc) in self.inclusions.iter().enumerate() {
            let inside = (0..3).all(|a| {
                inc.min_corner[a] >= -BOX_TOL
                    && inc.max_corner[a] <= self.dims[a] + BOX_TOL
                    && inc.min_corner[a] <= inc.max_corner[a]
            });
            if !inside {
                return Err(FmtError::param(
                    "inclusions",
                    format!("inclusion {i} does not lie inside the phantom"),
                ));
            }
            if !(inc.intensity >= 0.0) {
                return Err(FmtError::param(
                    "inclusions",
                    format!("inclusion {i} has negative intensity"),
                ));
            }
        }
        if !(self.lasers.power > 0.0 && self.lasers.power <= self.lasers.p_max) {
            return Err(FmtError::param("lasers.power", "must lie in (0, p_max]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceAxis {
    /// plane of constant z
    Top,
    /// plane of constant x
    Left,
    /// plane of constant y
    Front,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopSettings {
    pub recon: ReconConfig,
    pub illum: ReweightConfig,
    pub gamma_interior: f64,
    pub support: DesignSupport,
    pub rounds_max: usize,
    pub stop_tol: f64,
}

/// Everything that stays fixed across rounds: mesh, system matrix, `Γ`, the
/// adjoint detector fields and the ground truth.
pub struct Experiment {
    pub spec: PhantomSpec,
    pub mesh: MeshGrid,
    /// shared by excitation and emission (same optical properties)
    pub system: SystemMatrix,
    pub detector: DetectorPlane,
    pub gamma: Gamma,
    pub adjoint: Vec<Vec<f64>>,
    pub truth: Vec<f64>,
    pub floor_rel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub pattern: IlluminationPattern,
    pub nnz_history: Vec<usize>,
    pub outer_iters: usize,
    /// `‖Ỹ - ṼΣ‖` for the designed and for the current pattern
    pub residual_designed: f64,
    pub residual_current: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    /// 0 = initial pattern
    pub round: usize,
    pub pattern: IlluminationPattern,
    pub laser_count: usize,
    pub reconstruction: FluorescenceImage,
    pub metrics: MetricsReport,
    pub design: Design,
    /// relative change from `pattern` to the designed pattern
    pub pattern_change: f64,
    pub wall_time_s: f64,
}

/// Serializable per-round digest; contains no timing so it is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub laser_count: usize,
    pub laser_bound_exceeded: bool,
    pub metrics: MetricsReport,
    pub fista_iterations: usize,
    pub fista_objective: f64,
    pub designed_laser_count: usize,
    pub design_nnz_history: Vec<usize>,
    pub pattern_change: f64,
}

impl RoundRecord {
    pub fn summary(&self) -> RoundSummary {
        RoundSummary {
            round: self.round,
            laser_count: self.laser_count,
            laser_bound_exceeded: self.pattern.exceeds_laser_bound(),
            metrics: self.metrics,
            fista_iterations: self.reconstruction.iterations,
            fista_objective: self.reconstruction.objective,
            designed_laser_count: self.design.pattern.nnz(),
            design_nnz_history: self.design.nnz_history.clone(),
            pattern_change: self.pattern_change,
        }
    }
}

#[derive(Debug)]
pub struct LoopOutcome {
    pub records: Vec<RoundRecord>,
    /// the pattern change fell under `stop_tol`
    pub converged: bool,
    /// the failure that ended the loop early, if any
    pub failure: Option<FmtError>,
}

impl LoopOutcome {
    pub fn best_round(&self) -> Option<usize> {
        best_round(&self.records)
    }
}

/// Index of the round with the lowest MSE (equivalently the highest SNR).
pub fn best_round(records: &[RoundRecord]) -> Option<usize> {
    records
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.metrics.mse.total_cmp(&b.1.metrics.mse))
        .map(|(i, _)| i)
}

fn round_err(round: usize, e: FmtError) -> FmtError {
    FmtError::Round {
        round,
        source: Box::new(e),
    }
}

impl Experiment {
    pub fn new(spec: PhantomSpec) -> Result<Self> {
        spec.validate()?;
        let mesh = build_grid(spec.dims, spec.spacing)?;
        let medium = OpticalMedium::homogeneous(
            mesh.n_nodes(),
            spec.mu_a,
            spec.mu_s,
            spec.g,
            spec.zeta,
            spec.c,
            spec.eta,
        )?;
        let system = assemble_system(&mesh, &medium)?;
        let d = spec.detector;
        let detector =
            DetectorPlane::centered(&mesh, d.rows, d.cols, d.pitch, d.height, d.acceptance_deg)?;
        let gamma = build_gamma(&mesh, &detector)?;
        let adjoint = adjoint_detector_fields(&system, &gamma)?;
        let truth = spec.truth(&mesh);
        Ok(Self {
            spec,
            mesh,
            system,
            detector,
            gamma,
            adjoint,
            truth,
            floor_rel: DENOMINATOR_FLOOR,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.mesh.n_nodes()
    }

    pub fn initial_pattern(&self) -> Result<IlluminationPattern> {
        let l = self.spec.lasers;
        let sources = l.sources(&self.mesh)?;
        Ok(IlluminationPattern::from_sources(
            self.n_nodes(),
            &sources,
            l.p_max,
            l.l_max,
        ))
    }

    /// Excitation fields of every laser of `pattern`, in node order.
    pub fn excitation(&self, pattern: &IlluminationPattern) -> Result<Vec<Vec<f64>>> {
        let sources = split_pattern(pattern)?;
        let loads: Vec<Vec<f64>> = sources
            .iter()
            .map(|s| s.load_vector(self.n_nodes(), self.spec.zeta))
            .collect();
        excitation_fields(&self.system, &loads)
    }

    /// Synthetic measurements of fluorescence `c` under the given
    /// excitation fields, with the configured noise.
    pub fn measure(
        &self,
        c: &[f64],
        phi_e: &[Vec<f64>],
        noise_seed: u64,
    ) -> Result<MeasurementSet> {
        let phi_f = emission_fields(&self.system, c, phi_e, self.spec.eta)?;
        let clean = born_measurements(&self.gamma, phi_e, &phi_f, self.floor_rel)?;
        add_noise(&clean, self.spec.noise, noise_seed)
    }

    pub fn sensitivity(&self, phi_e: &[Vec<f64>]) -> Result<SensitivityMatrix> {
        assemble_w(
            &self.adjoint,
            phi_e,
            &self.gamma,
            self.spec.eta,
            self.floor_rel,
        )
    }

    pub fn reconstruct(
        &self,
        phi_e: &[Vec<f64>],
        meas: &MeasurementSet,
        config: &ReconConfig,
    ) -> Result<FluorescenceImage> {
        let w = self.sensitivity(phi_e)?;
        fista(&w, &meas.stacked(), config)
    }

    /// Candidate laser nodes for the design step.
    pub fn design_columns(&self, support: DesignSupport) -> Vec<usize> {
        match support {
            DesignSupport::Top => self.mesh.illum_nodes(),
            DesignSupport::Surface => self.mesh.surface_nodes(),
        }
    }

    /// Design matrix, extended CCD problem and clamped starting point for
    /// the estimate `c` under `current`.
    pub fn design_problem(
        &self,
        c: &[f64],
        phi_e: &[Vec<f64>],
        meas: &MeasurementSet,
        current: &IlluminationPattern,
        settings: &LoopSettings,
    ) -> Result<(DesignMatrix, CcdProblem, Vec<f64>)> {
        let columns = self.design_columns(settings.support);
        let inputs = DesignInputs {
            s_e: &self.system,
            gamma: &self.gamma,
            adjoint: &self.adjoint,
            eta: self.spec.eta,
            zeta: self.spec.zeta,
            floor_rel: self.floor_rel,
        };
        let v = assemble_v_with_adjoint(&inputs, c, phi_e, &columns)?;
        let (vt, yt) = extend_system(
            &v,
            &meas.stacked(),
            settings.gamma_interior,
            self.mesh.illum_allowed(),
        )?;
        let problem = CcdProblem::new(&vt, &yt)?;
        let p_max = current.p_max;
        let init: Vec<f64> = v
            .gather(&current.power)
            .iter()
            .map(|p| p.clamp(0.0, p_max))
            .collect();
        Ok((v, problem, init))
    }

    /// Designs the next pattern from the estimate `c`, the excitation fields
    /// of `current` and the measurements taken under it.
    pub fn design(
        &self,
        c: &[f64],
        phi_e: &[Vec<f64>],
        meas: &MeasurementSet,
        current: &IlluminationPattern,
        settings: &LoopSettings,
    ) -> Result<Design> {
        let (v, problem, init) = self.design_problem(c, phi_e, meas, current, settings)?;
        let p_max = current.p_max;
        let res = reweighted_l1(&problem, &settings.illum, &init, p_max)?;
        let no_weights = vec![0.0; problem.n_cols()];
        let residual_designed = (2.0 * problem.objective(&res.sigma, 0.0, &no_weights)).sqrt();
        let residual_current = (2.0 * problem.objective(&init, 0.0, &no_weights)).sqrt();
        let mut pattern = IlluminationPattern {
            power: v.scatter(&res.sigma, self.n_nodes()),
            p_max,
            l_max: current.l_max,
            all_zero_warning: res.all_zero_warning,
        };
        // columns off the illumination face may only carry penalty leakage
        for (p, &ok) in pattern.power.iter_mut().zip(self.mesh.illum_allowed()) {
            if !ok && p.abs() < LEAKAGE_TOL * p_max {
                *p = 0.0;
            }
        }
        pattern.check_feasible(self.mesh.illum_allowed())?;
        Ok(Design {
            pattern,
            nnz_history: res.nnz_history,
            outer_iters: res.outer_iters,
            residual_designed,
            residual_current,
        })
    }

    /// One full round under `pattern`.
    pub fn run_round(
        &self,
        round: usize,
        pattern: &IlluminationPattern,
        settings: &LoopSettings,
    ) -> Result<RoundRecord> {
        let start = Instant::now();
        let go = || -> Result<RoundRecord> {
            pattern.check_feasible(self.mesh.illum_allowed())?;
            let phi_e = self.excitation(pattern)?;
            let meas = self.measure(
                &self.truth,
                &phi_e,
                self.spec.seed.wrapping_add(round as u64),
            )?;
            let reconstruction = self.reconstruct(&phi_e, &meas, &settings.recon)?;
            let design = self.design(&reconstruction.c, &phi_e, &meas, pattern, settings)?;
            let metrics = evaluate(&reconstruction.c, &self.truth)?;
            let pattern_change = design.pattern.relative_change(pattern);
            Ok(RoundRecord {
                round,
                pattern: pattern.clone(),
                laser_count: pattern.nnz(),
                reconstruction,
                metrics,
                design,
                pattern_change,
                wall_time_s: 0.0,
            })
        };
        let mut rec = go().map_err(|e| round_err(round, e))?;
        rec.wall_time_s = start.elapsed().as_secs_f64();
        Ok(rec)
    }

    /// Alternates reconstruction and design from `initial`; `on_round` sees
    /// every record as soon as it is complete.
    pub fn run_loop_with(
        &self,
        initial: IlluminationPattern,
        settings: &LoopSettings,
        mut on_round: impl FnMut(&RoundRecord),
    ) -> LoopOutcome {
        let mut records = Vec::new();
        let mut pattern = initial;
        for round in 0..settings.rounds_max {
            match self.run_round(round, &pattern, settings) {
                Ok(rec) => {
                    on_round(&rec);
                    let converged = rec.pattern_change < settings.stop_tol;
                    pattern = rec.design.pattern.clone();
                    records.push(rec);
                    if converged {
                        return LoopOutcome {
                            records,
                            converged: true,
                            failure: None,
                        };
                    }
                }
                Err(e) => {
                    return LoopOutcome {
                        records,
                        converged: false,
                        failure: Some(e),
                    }
                }
            }
        }
        LoopOutcome {
            records,
            converged: false,
            failure: None,
        }
    }

    pub fn run_loop(&self, initial: IlluminationPattern, settings: &LoopSettings) -> LoopOutcome {
        self.run_loop_with(initial, settings, |_| {})
    }
}

/// Builds the experiment from `spec` and runs the loop from its laser grid.
pub fn run_loop(spec: PhantomSpec, settings: &LoopSettings) -> Result<(Experiment, LoopOutcome)> {
    let exp = Experiment::new(spec)?;
    let initial = exp.initial_pattern()?;
    let out = exp.run_loop(initial, settings);
    Ok((exp, out))
}

/// `|A ∩ B| / |A ∪ B|` of two pattern supports; 1 when both are empty.
pub fn support_jaccard(a: &IlluminationPattern, b: &IlluminationPattern) -> f64 {
    let sa = a.support();
    let sb = b.support();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let common = sa.iter().filter(|i| sb.binary_search(i).is_ok()).count();
    common as f64 / (sa.len() + sb.len() - common) as f64
}
