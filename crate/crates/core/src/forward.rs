//! Free-space detector model, field synthesis and normalized Born ratios.
//!
//! The transport matrix `Γ` uses a Lambertian inverse-square kernel from
//! top-face nodes to pixels on a plane parallel to the top face:
//! `Γ[k, i] = a_i cosθ / (π d²)` inside the pixel's acceptance cone.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FmtError, Result};
use crate::fem::{solve_many, SystemMatrix};
use crate::mesh::{Face, MeshGrid, Point};

/// Relative denominator floor: excitation powers at or below
/// `DENOMINATOR_FLOOR * max(P_e)` are masked.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorPlane {
    pub rows: usize,
    pub cols: usize,
    pub pitch: f64,
    /// height of the plane above the top face
    pub height: f64,
    /// half-angle of each pixel's acceptance cone, degrees
    pub acceptance_deg: f64,
    pixels: Vec<Point>,
}

impl DetectorPlane {
    /// Pixel grid centred over the top face; columns run along x, rows along y.
    pub fn centered(
        mesh: &MeshGrid,
        rows: usize,
        cols: usize,
        pitch: f64,
        height: f64,
        acceptance_deg: f64,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(FmtError::param(
                "detector",
                "rows and cols must be positive",
            ));
        }
        if !(pitch > 0.0) {
            return Err(FmtError::param("detector.pitch_mm", "must be > 0"));
        }
        if !(height > 0.0) {
            return Err(FmtError::param(
                "detector.height_mm",
                "detector plane must lie strictly above the top face",
            ));
        }
        if !(acceptance_deg > 0.0 && acceptance_deg <= 90.0) {
            return Err(FmtError::param(
                "detector.acceptance_deg",
                "must lie in (0, 90]",
            ));
        }
        let [dx, dy, _] = mesh.dims();
        let z = mesh.top_z() + height;
        let mut pixels = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let x = dx / 2.0 + (c as f64 - (cols as f64 - 1.0) / 2.0) * pitch;
                let y = dy / 2.0 + (r as f64 - (rows as f64 - 1.0) / 2.0) * pitch;
                pixels.push([x, y, z]);
            }
        }
        Ok(Self {
            rows,
            cols,
            pitch,
            height,
            acceptance_deg,
            pixels,
        })
    }

    pub fn n_pixels(&self) -> usize {
        self.pixels.len()
    }

    pub fn pixels(&self) -> &[Point] {
        &self.pixels
    }
}

/// Lambertian inverse-square coupling between a surface patch of area
/// `area` at `node` and a detector at `pixel` (plane normal along +z).
pub fn lambertian_weight(area: f64, node: Point, pixel: Point) -> f64 {
    let d = [pixel[0] - node[0], pixel[1] - node[1], pixel[2] - node[2]];
    let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    let cos = d[2] / d2.sqrt();
    area * cos / (std::f64::consts::PI * d2)
}

/// Sparse `M x N` transport matrix stored by pixel row.
#[derive(Debug, Clone, PartialEq)]
pub struct Gamma {
    n_nodes: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl Gamma {
    pub fn from_rows(n_nodes: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        Self { n_nodes, rows }
    }

    pub fn n_pixels(&self) -> usize {
        self.rows.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn row(&self, k: usize) -> &[(usize, f64)] {
        &self.rows[k]
    }

    /// Pixels that see no node at all.
    pub fn zero_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.is_empty()).count()
    }

    /// `Γ_k · φ`
    pub fn row_dot(&self, k: usize, phi: &[f64]) -> f64 {
        self.rows[k].iter().map(|&(i, g)| g * phi[i]).sum()
    }

    pub fn apply(&self, phi: &[f64]) -> Vec<f64> {
        (0..self.n_pixels()).map(|k| self.row_dot(k, phi)).collect()
    }

    /// Dense copy of row `k`.
    pub fn dense_row(&self, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_nodes];
        for &(i, g) in &self.rows[k] {
            v[i] = g;
        }
        v
    }

    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.rows[k]
            .iter()
            .find(|(j, _)| *j == i)
            .map(|&(_, g)| g)
            .unwrap_or(0.0)
    }
}

pub fn build_gamma(mesh: &MeshGrid, det: &DetectorPlane) -> Result<Gamma> {
    let top = mesh.top_z();
    if det.pixels.iter().any(|p| !(p[2] > top)) {
        return Err(FmtError::param(
            "detector.height_mm",
            "detector plane must lie strictly above the top face",
        ));
    }
    let area = mesh.nodal_face_area(Face::Top);
    let cos_min = det.acceptance_deg.to_radians().cos();
    let nodes = mesh.illum_nodes();
    let coords = mesh.node_coords();
    let rows = det
        .pixels
        .iter()
        .map(|&px| {
            nodes
                .iter()
                .filter_map(|&i| {
                    let p = coords[i];
                    let d = [px[0] - p[0], px[1] - p[1], px[2] - p[2]];
                    let cos = d[2] / (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    // small slack so a cone of exactly 90 degrees keeps grazing nodes
                    (cos >= cos_min - 1e-15 && area[i] > 0.0)
                        .then(|| (i, lambertian_weight(area[i], p, px)))
                })
                .collect()
        })
        .collect();
    Ok(Gamma {
        n_nodes: mesh.n_nodes(),
        rows,
    })
}

/// Single-node laser: the load `power / (2ζ)` is lumped at `node`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointSource {
    pub node: usize,
    pub power: f64,
}

impl PointSource {
    pub fn load_vector(&self, n: usize, zeta: f64) -> Vec<f64> {
        let mut q = vec![0.0; n];
        q[self.node] = self.power / (2.0 * zeta);
        q
    }
}

/// `Φ^E`: one excitation field per source load vector.
pub fn excitation_fields(s_e: &SystemMatrix, sources: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    solve_many(s_e, sources)
}

/// `Q^f_l = η (C ⊙ Φ^e_l)`
pub fn emission_source(c: &[f64], phi_e: &[f64], eta: f64) -> Result<Vec<f64>> {
    FmtError::check_len("excitation field", c.len(), phi_e.len())?;
    if let Some(i) = c.iter().position(|&v| v < 0.0) {
        return Err(FmtError::param(
            "C",
            format!("negative fluorescence at node {i}"),
        ));
    }
    Ok(c.iter().zip(phi_e).map(|(ci, pi)| eta * ci * pi).collect())
}

/// Emission fields `Φ^F` for a fluorescence distribution.
pub fn emission_fields(
    s_f: &SystemMatrix,
    c: &[f64],
    phi_e: &[Vec<f64>],
    eta: f64,
) -> Result<Vec<Vec<f64>>> {
    let q: Vec<Vec<f64>> = phi_e
        .iter()
        .map(|p| emission_source(c, p, eta))
        .collect::<Result<_>>()?;
    solve_many(s_f, &q)
}

/// Excitation detector powers `P_e[l][k] = Γ_k · Φ^e_l`, row-major `L x M`.
pub fn detector_powers(gamma: &Gamma, fields: &[Vec<f64>]) -> Vec<f64> {
    fields.iter().flat_map(|phi| gamma.apply(phi)).collect()
}

/// Usable-measurement mask (`true` = kept) for excitation powers.
pub fn measurement_mask(p_e: &[f64], floor_rel: f64) -> Vec<bool> {
    let max = p_e.iter().cloned().fold(0.0f64, f64::max);
    let floor = floor_rel * max;
    p_e.iter().map(|&p| p > floor && max > 0.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub n_sources: usize,
    pub n_pixels: usize,
    /// Born ratios, row-major `L x M`; zero where masked.
    pub y: Vec<f64>,
    pub p_e: Vec<f64>,
    pub p_f: Vec<f64>,
    /// `true` where the measurement is usable.
    pub mask: Vec<bool>,
    pub noise_seed: u64,
}

impl MeasurementSet {
    pub fn n_unmasked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Unmasked Born ratios in `(l, k)` order.
    pub fn stacked(&self) -> Vec<f64> {
        self.y
            .iter()
            .zip(&self.mask)
            .filter_map(|(&y, &m)| m.then_some(y))
            .collect()
    }

    /// `(l, k)` of every unmasked measurement.
    pub fn row_index(&self) -> Vec<(usize, usize)> {
        (0..self.y.len())
            .filter(|&r| self.mask[r])
            .map(|r| (r / self.n_pixels, r % self.n_pixels))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "l,k,Y,P_e,P_f,masked")?;
        for r in 0..self.y.len() {
            writeln!(
                w,
                "{},{},{:e},{:e},{:e},{}",
                r / self.n_pixels,
                r % self.n_pixels,
                self.y[r],
                self.p_e[r],
                self.p_f[r],
                u8::from(!self.mask[r])
            )?;
        }
        Ok(())
    }

    pub fn read_csv(text: &str, path: &str) -> Result<Self> {
        let bad = |line: usize, why: &str| FmtError::Parse {
            path: path.to_string(),
            reason: format!("line {line}: {why}"),
        };
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(ln + 1, "expected 6 fields"));
            }
            let u = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| bad(ln + 1, "bad index"))
            };
            let x = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| bad(ln + 1, "bad number"))
            };
            rows.push((
                u(f[0])?,
                u(f[1])?,
                x(f[2])?,
                x(f[3])?,
                x(f[4])?,
                u(f[5])? != 0,
            ));
        }
        let n_sources = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let n_pixels = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        if rows.len() != n_sources * n_pixels {
            return Err(bad(0, "measurement table is not a complete L x M grid"));
        }
        let mut set = MeasurementSet {
            n_sources,
            n_pixels,
            y: vec![0.0; rows.len()],
            p_e: vec![0.0; rows.len()],
            p_f: vec![0.0; rows.len()],
            mask: vec![false; rows.len()],
            noise_seed: 0,
        };
        for (l, k, y, pe, pf, masked) in rows {
            let r = l * n_pixels + k;
            set.y[r] = y;
            set.p_e[r] = pe;
            set.p_f[r] = pf;
            set.mask[r] = !masked;
        }
        Ok(set)
    }
}

/// Normalized Born ratios `Y_{l,k} = (Γ_k Φ^f_l) / (Γ_k Φ^e_l)`.
pub fn born_measurements(
    gamma: &Gamma,
    phi_e: &[Vec<f64>],
    phi_f: &[Vec<f64>],
    floor_rel: f64,
) -> Result<MeasurementSet> {
    FmtError::check_len("emission fields", phi_e.len(), phi_f.len())?;
    let p_e = detector_powers(gamma, phi_e);
    let p_f = detector_powers(gamma, phi_f);
    let mask = measurement_mask(&p_e, floor_rel);
    if !mask.iter().any(|&m| m) {
        return Err(FmtError::AllMasked);
    }
    let y = p_e
        .iter()
        .zip(&p_f)
        .zip(&mask)
        .map(|((&e, &f), &m)| if m { f / e } else { 0.0 })
        .collect();
    Ok(MeasurementSet {
        n_sources: phi_e.len(),
        n_pixels: gamma.n_pixels(),
        y,
        p_e,
        p_f,
        mask,
        noise_seed: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum NoiseModel {
    None,
    Gaussian { sigma_rel: f64 },
}

/// Multiplicative Gaussian noise `Y (1 + σ ξ)`, deterministic in `seed`.
pub fn add_noise(set: &MeasurementSet, model: NoiseModel, seed: u64) -> Result<MeasurementSet> {
    let mut out = set.clone();
    out.noise_seed = seed;
    match model {
        NoiseModel::None => Ok(out),
        NoiseModel::Gaussian { sigma_rel } => {
            if !(sigma_rel >= 0.0) || !sigma_rel.is_finite() {
                return Err(FmtError::param("noise.sigma_rel", "must be >= 0"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (y, &m) in out.y.iter_mut().zip(&set.mask) {
                let xi: f64 = StandardNormal.sample(&mut rng);
                if m {
                    *y *= 1.0 + sigma_rel * xi;
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble_system, OpticalMedium};
    use crate::mesh::build_grid;

    #[test]
    fn kernel_directly_below() {
        let w = lambertian_weight(1.0, [0.0, 0.0, 0.0], [0.0, 0.0, 10.0]);
        assert!((w - 1.0 / (100.0 * std::f64::consts::PI)).abs() < 1e-18);
    }

    #[test]
    fn kernel_inverse_square() {
        let n = [0.0, 0.0, 0.0];
        let a = lambertian_weight(1.0, n, [3.0, 4.0, 5.0]);
        let b = lambertian_weight(1.0, n, [6.0, 8.0, 10.0]);
        assert!((a / b - 4.0).abs() < 1e-12);
    }

    #[test]
    fn gamma_only_touches_top_face() {
        let mesh = build_grid([3.0, 3.0, 3.0], 1.0).unwrap();
        let det = DetectorPlane::centered(&mesh, 4, 4, 1.0, 10.0, 90.0).unwrap();
        let g = build_gamma(&mesh, &det).unwrap();
        assert_eq!(g.zero_rows(), 0);
        for k in 0..g.n_pixels() {
            for &(i, v) in g.row(k) {
                assert!(mesh.illum_allowed()[i]);
                assert!(v > 0.0);
            }
        }
        let interior = mesh.node_at(1, 1, 1).unwrap();
        assert!((0..g.n_pixels()).all(|k| g.get(k, interior) == 0.0));
    }

    #[test]
    fn narrow_cone_leaves_far_pixels_blind() {
        let mesh = build_grid([2.0, 2.0, 2.0], 1.0).unwrap();
        let det = DetectorPlane::centered(&mesh, 1, 41, 1.0, 1.0, 10.0).unwrap();
        let g = build_gamma(&mesh, &det).unwrap();
        assert!(g.zero_rows() > 0);
    }

    #[test]
    fn detector_must_be_above() {
        let mesh = build_grid([2.0, 2.0, 2.0], 1.0).unwrap();
        assert!(DetectorPlane::centered(&mesh, 2, 2, 1.0, 0.0, 45.0).is_err());
    }

    #[test]
    fn emission_source_cases() {
        assert_eq!(
            emission_source(&[0.0; 3], &[1.0, 2.0, 3.0], 1.0).unwrap(),
            vec![0.0; 3]
        );
        assert_eq!(
            emission_source(&[0.0, 1.0, 0.0], &[1.0; 3], 1.0).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        assert!(emission_source(&[-1.0], &[1.0], 1.0).is_err());
        let c = [0.5, 2.0, 0.25];
        let p = [3.0, 0.1, 8.0];
        let q = emission_source(&c, &p, 0.3).unwrap();
        for i in 0..3 {
            assert_eq!(q[i], 0.3 * c[i] * p[i]);
        }
    }

    fn small_setup() -> (MeshGrid, SystemMatrix, Gamma) {
        let mesh = build_grid([3.0, 3.0, 3.0], 1.0).unwrap();
        let med =
            OpticalMedium::homogeneous(mesh.n_nodes(), 0.01, 1.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        let s = assemble_system(&mesh, &med).unwrap();
        let det = DetectorPlane::centered(&mesh, 3, 3, 1.0, 5.0, 60.0).unwrap();
        let g = build_gamma(&mesh, &det).unwrap();
        (mesh, s, g)
    }

    #[test]
    fn zero_fluorescence_gives_zero_ratios() {
        let (mesh, s, g) = small_setup();
        let n = mesh.n_nodes();
        let src = PointSource {
            node: mesh.illum_nodes()[5],
            power: 1.0,
        }
        .load_vector(n, 1.0);
        let pe = excitation_fields(&s, &[src]).unwrap();
        let pf = emission_fields(&s, &vec![0.0; n], &pe, 1.0).unwrap();
        let m = born_measurements(&g, &pe, &pf, DENOMINATOR_FLOOR).unwrap();
        assert!(m.stacked().iter().all(|&y| y == 0.0));
    }

    #[test]
    fn all_masked_is_an_error() {
        let (mesh, _, g) = small_setup();
        let zero = vec![vec![0.0; mesh.n_nodes()]];
        assert!(matches!(
            born_measurements(&g, &zero, &zero, DENOMINATOR_FLOOR),
            Err(FmtError::AllMasked)
        ));
    }

    #[test]
    fn noise_identity_and_determinism() {
        let set = MeasurementSet {
            n_sources: 1,
            n_pixels: 4,
            y: vec![1.0, 2.0, 3.0, 0.0],
            p_e: vec![1.0; 4],
            p_f: vec![1.0; 4],
            mask: vec![true, true, true, false],
            noise_seed: 0,
        };
        let none = add_noise(&set, NoiseModel::Gaussian { sigma_rel: 0.0 }, 3).unwrap();
        assert_eq!(none.y, set.y);
        let a = add_noise(&set, NoiseModel::Gaussian { sigma_rel: 0.1 }, 3).unwrap();
        let b = add_noise(&set, NoiseModel::Gaussian { sigma_rel: 0.1 }, 3).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.y[3], 0.0);
        assert!(add_noise(&set, NoiseModel::Gaussian { sigma_rel: -1.0 }, 3).is_err());
    }

    #[test]
    fn measurement_csv_round_trip() {
        let set = MeasurementSet {
            n_sources: 2,
            n_pixels: 2,
            y: vec![0.25, 1.5e-7, 0.0, 3.0],
            p_e: vec![1.0, 2.0, 0.0, 4.0],
            p_f: vec![0.25, 3e-7, 0.0, 12.0],
            mask: vec![true, true, false, true],
            noise_seed: 0,
        };
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let back = MeasurementSet::read_csv(std::str::from_utf8(&buf).unwrap(), "mem").unwrap();
        assert_eq!(back, set);
    }
}
