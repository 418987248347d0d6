//! Plain-text artifacts: nodal field CSV, PGM slices and run directories.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{FmtError, Result};
use crate::mesh::{MeshGrid, Point};
use crate::pipeline::{Experiment, LoopOutcome, RoundRecord, RoundSummary, SliceAxis};

pub fn write_field_csv<W: Write>(mesh: &MeshGrid, values: &[f64], mut w: W) -> Result<()> {
    FmtError::check_len("field", mesh.n_nodes(), values.len())?;
    writeln!(w, "node_id,x,y,z,value")?;
    for (i, (p, v)) in mesh.node_coords().iter().zip(values).enumerate() {
        writeln!(w, "{i},{},{},{},{:e}", p[0], p[1], p[2], v)?;
    }
    Ok(())
}

/// Reads `node_id,x,y,z,value`; every node in `0..n` must appear once.
pub fn read_field_csv(text: &str, path: &str, n: usize) -> Result<Vec<f64>> {
    let bad = |line: usize, why: &str| FmtError::Parse {
        path: path.to_string(),
        reason: format!("line {line}: {why}"),
    };
    let mut out = vec![f64::NAN; n];
    let mut seen = vec![false; n];
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(ln + 1, "expected node_id,x,y,z,value"));
        }
        let i: usize = f[0]
            .trim()
            .parse()
            .map_err(|_| bad(ln + 1, "bad node id"))?;
        let v: f64 = f[4].trim().parse().map_err(|_| bad(ln + 1, "bad value"))?;
        if i >= n {
            return Err(bad(ln + 1, "node id out of range"));
        }
        if seen[i] {
            return Err(bad(ln + 1, "duplicate node id"));
        }
        seen[i] = true;
        out[i] = v;
    }
    if let Some(i) = seen.iter().position(|&s| !s) {
        return Err(bad(0, &format!("node {i} missing")));
    }
    Ok(out)
}

pub fn read_field_file(path: &Path, n: usize) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    read_field_csv(&text, &path.display().to_string(), n)
}

/// Row-major image of the grid plane through `point`; the vertical axis
/// runs from high to low coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

pub fn slice(mesh: &MeshGrid, values: &[f64], axis: SliceAxis, point: Point) -> Result<Slice> {
    FmtError::check_len("field", mesh.n_nodes(), values.len())?;
    let [nx, ny, nz] = mesh.counts();
    let at = mesh.grid_index(mesh.nearest_node(point));
    // (horizontal axis, vertical axis, fixed axis)
    let (h, v, fixed) = match axis {
        SliceAxis::Top => (0, 1, 2),
        SliceAxis::Left => (1, 2, 0),
        SliceAxis::Front => (0, 2, 1),
    };
    let n = [nx + 1, ny + 1, nz + 1];
    let (width, height) = (n[h], n[v]);
    let mut out = Vec::with_capacity(width * height);
    for row in 0..height {
        for col in 0..width {
            let mut idx = [0usize; 3];
            idx[h] = col;
            idx[v] = height - 1 - row;
            idx[fixed] = at[fixed];
            let node = mesh
                .node_at(idx[0], idx[1], idx[2])
                .expect("index inside grid");
            out.push(values[node]);
        }
    }
    Ok(Slice {
        width,
        height,
        values: out,
    })
}

/// Plain PGM with pixel `round(255 x / max x)`; all zero when `max <= 0`.
pub fn write_pgm<W: Write>(s: &Slice, mut w: W) -> Result<()> {
    let max = s.values.iter().cloned().fold(0.0f64, f64::max);
    writeln!(w, "P2\n{} {}\n255", s.width, s.height)?;
    for row in s.values.chunks(s.width) {
        let line: Vec<String> = row
            .iter()
            .map(|&x| {
                let p = if max > 0.0 {
                    (255.0 * x.max(0.0) / max).round()
                } else {
                    0.0
                };
                (p as u8).to_string()
            })
            .collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| FmtError::Io(e.into()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

pub fn axis_name(axis: SliceAxis) -> &'static str {
    match axis {
        SliceAxis::Top => "top",
        SliceAxis::Left => "left",
        SliceAxis::Front => "front",
    }
}

pub fn write_slices(
    dir: &Path,
    stem: &str,
    mesh: &MeshGrid,
    values: &[f64],
    axes: &[SliceAxis],
    point: Point,
) -> Result<()> {
    for &axis in axes {
        let s = slice(mesh, values, axis, point)?;
        let mut w = create_file(&dir.join(format!("{stem}_{}.pgm", axis_name(axis))))?;
        write_pgm(&s, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

/// Layout of a loop run directory.
pub struct RunDir {
    pub root: PathBuf,
    pub slice_axes: Vec<SliceAxis>,
    pub slice_point: Point,
}

impl RunDir {
    pub fn new(
        root: impl Into<PathBuf>,
        slice_axes: Vec<SliceAxis>,
        slice_point: Point,
    ) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            slice_axes,
            slice_point,
        })
    }

    pub fn round_dir(&self, round: usize) -> PathBuf {
        self.root.join(format!("round_{round:02}"))
    }

    pub fn write_truth(&self, exp: &Experiment) -> Result<()> {
        let mut w = create_file(&self.root.join("truth.csv"))?;
        write_field_csv(&exp.mesh, &exp.truth, &mut w)?;
        w.flush()?;
        write_slices(
            &self.root,
            "truth",
            &exp.mesh,
            &exp.truth,
            &self.slice_axes,
            self.slice_point,
        )
    }

    /// `pattern.csv`, `recon.csv`, `designed_pattern.csv`, slices and
    /// `metrics.json` of one round.
    pub fn write_round(&self, exp: &Experiment, rec: &RoundRecord) -> Result<()> {
        let dir = self.round_dir(rec.round);
        fs::create_dir_all(&dir)?;
        let mut w = create_file(&dir.join("pattern.csv"))?;
        rec.pattern.write_csv(&exp.mesh, &mut w)?;
        w.flush()?;
        let mut w = create_file(&dir.join("designed_pattern.csv"))?;
        rec.design.pattern.write_csv(&exp.mesh, &mut w)?;
        w.flush()?;
        let mut w = create_file(&dir.join("recon.csv"))?;
        write_field_csv(&exp.mesh, &rec.reconstruction.c, &mut w)?;
        w.flush()?;
        let mut w = create_file(&dir.join("fista_log.csv"))?;
        rec.reconstruction.write_log_csv(&mut w)?;
        w.flush()?;
        write_slices(
            &dir,
            "recon",
            &exp.mesh,
            &rec.reconstruction.c,
            &self.slice_axes,
            self.slice_point,
        )?;
        write_json(&dir.join("metrics.json"), &rec.summary())
    }

    /// `summary.json`: per-round digests, best round, stop reason and timings.
    pub fn write_summary(&self, outcome: &LoopOutcome) -> Result<()> {
        #[derive(Serialize)]
        struct Summary<'a> {
            rounds: Vec<RoundSummary>,
            best_round: Option<usize>,
            converged: bool,
            failure: Option<String>,
            wall_time_s: Vec<f64>,
            finished_unix_s: u64,
            #[serde(skip_serializing_if = "Option::is_none")]
            note: Option<&'a str>,
        }
        let finished = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let s = Summary {
            rounds: outcome.records.iter().map(RoundRecord::summary).collect(),
            best_round: outcome.best_round(),
            converged: outcome.converged,
            failure: outcome.failure.as_ref().map(|e| e.to_string()),
            wall_time_s: outcome.records.iter().map(|r| r.wall_time_s).collect(),
            finished_unix_s: finished,
            note: outcome
                .records
                .last()
                .filter(|r| r.design.pattern.all_zero_warning)
                .map(|_| "design collapsed to an empty pattern"),
        };
        write_json(&self.root.join("summary.json"), &s)
    }
}
