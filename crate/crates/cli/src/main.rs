use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fmt_core::config::RunConfig;
use fmt_core::forward::MeasurementSet;
use fmt_core::illum::{geometric_grid, mu_sweep, IlluminationPattern};
use fmt_core::io::{
    create_file, read_field_file, write_field_csv, write_json, write_slices, RunDir,
};
use fmt_core::metrics::evaluate;
use fmt_core::pipeline::Experiment;

/// Fluorescence tomography with optimized illumination patterns.
#[derive(Parser)]
#[command(name = "fmt", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration; defaults apply to missing keys
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// output directory (overrides output.dir)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// noise seed (overrides noise.seed)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// reconstruction weight (overrides recon.lambda)
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// design weight (overrides illum.mu)
    #[arg(long, global = true)]
    mu: Option<f64>,
    /// suppress progress output
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate measurements of the configured phantom
    Forward {
        /// illumination pattern CSV (default: configured laser grid)
        #[arg(long)]
        pattern: Option<PathBuf>,
    },
    /// Reconstruct the fluorescence distribution from measurements
    Reconstruct {
        #[arg(long)]
        measurements: PathBuf,
        /// pattern the measurements were taken with (default: laser grid)
        #[arg(long)]
        pattern: Option<PathBuf>,
    },
    /// Design the next illumination pattern from a reconstruction
    Optimize {
        /// reconstructed fluorescence CSV
        #[arg(long)]
        recon: PathBuf,
        /// current pattern (default: laser grid)
        #[arg(long)]
        pattern: Option<PathBuf>,
        /// measurements under the current pattern (default: simulated)
        #[arg(long)]
        measurements: Option<PathBuf>,
        /// geometric sweep `lo:hi:n` of the design weight
        #[arg(long, value_name = "LO:HI:N")]
        mu_sweep: Option<String>,
    },
    /// Run the alternating reconstruction / design loop
    Loop {
        /// maximum number of rounds (overrides loop.rounds_max)
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Compare a reconstruction with the ground truth
    Metrics {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    quiet: bool,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn experiment(&self) -> Result<Experiment> {
        self.log("assembling system and detector coupling");
        Ok(Experiment::new(self.cfg.phantom_spec())?)
    }

    fn pattern(&self, exp: &Experiment, path: Option<&Path>) -> Result<IlluminationPattern> {
        match path {
            None => Ok(exp.initial_pattern()?),
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let l = &self.cfg.lasers;
                let pat = IlluminationPattern::read_csv(
                    &text,
                    &p.display().to_string(),
                    exp.n_nodes(),
                    l.p_max,
                    l.l_max,
                )?;
                pat.check_feasible(exp.mesh.illum_allowed())?;
                Ok(pat)
            }
        }
    }

    fn slices(&self, stem: &str, exp: &Experiment, values: &[f64]) -> Result<()> {
        let o = &self.cfg.output;
        write_slices(
            &self.out,
            stem,
            &exp.mesh,
            values,
            &o.slice_axes,
            o.slice_coords,
        )?;
        Ok(())
    }
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.noise.seed = s;
    }
    if let Some(l) = g.lambda {
        cfg.recon.lambda = l;
    }
    if let Some(m) = g.mu {
        cfg.illum.mu = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_sweep(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        bail!("--mu-sweep expects lo:hi:n, got {s:?}");
    }
    let lo: f64 = parts[0].parse().context("--mu-sweep lo")?;
    let hi: f64 = parts[1].parse().context("--mu-sweep hi")?;
    let n: usize = parts[2].parse().context("--mu-sweep n")?;
    Ok(geometric_grid(lo, hi, n)?)
}

fn write_field(ctx: &Ctx, exp: &Experiment, name: &str, values: &[f64]) -> Result<()> {
    let mut w = create_file(&ctx.out.join(name))?;
    write_field_csv(&exp.mesh, values, &mut w)?;
    w.flush()?;
    Ok(())
}

fn write_pattern(ctx: &Ctx, exp: &Experiment, name: &str, p: &IlluminationPattern) -> Result<()> {
    let mut w = create_file(&ctx.out.join(name))?;
    p.write_csv(&exp.mesh, &mut w)?;
    w.flush()?;
    Ok(())
}

fn read_measurements(path: &Path) -> Result<MeasurementSet> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(MeasurementSet::read_csv(
        &text,
        &path.display().to_string(),
    )?)
}

fn cmd_forward(ctx: &Ctx, pattern: Option<&Path>) -> Result<()> {
    let exp = ctx.experiment()?;
    let pat = ctx.pattern(&exp, pattern)?;
    ctx.log(format!(
        "solving {} excitation and emission fields",
        pat.nnz()
    ));
    let phi_e = exp.excitation(&pat)?;
    let meas = exp.measure(&exp.truth, &phi_e, ctx.cfg.noise.seed)?;
    fs::create_dir_all(&ctx.out)?;
    let mut w = create_file(&ctx.out.join("measurements.csv"))?;
    meas.write_csv(&mut w)?;
    w.flush()?;
    write_pattern(ctx, &exp, "pattern.csv", &pat)?;
    write_field(ctx, &exp, "truth.csv", &exp.truth)?;
    let mut total = vec![0.0; exp.n_nodes()];
    for phi in &phi_e {
        total.iter_mut().zip(phi).for_each(|(t, p)| *t += p);
    }
    write_field(ctx, &exp, "excitation.csv", &total)?;
    ctx.slices("truth", &exp, &exp.truth)?;
    ctx.slices("excitation", &exp, &total)?;
    ctx.log(format!(
        "{} measurements ({} usable) written to {}",
        meas.y.len(),
        meas.n_unmasked(),
        ctx.out.display()
    ));
    Ok(())
}

fn cmd_reconstruct(ctx: &Ctx, measurements: &Path, pattern: Option<&Path>) -> Result<()> {
    let exp = ctx.experiment()?;
    let pat = ctx.pattern(&exp, pattern)?;
    let meas = read_measurements(measurements)?;
    if meas.n_sources != pat.nnz() || meas.n_pixels != exp.gamma.n_pixels() {
        bail!(
            "measurements are {} lasers x {} pixels but the pattern has {} lasers and the detector {} pixels",
            meas.n_sources,
            meas.n_pixels,
            pat.nnz(),
            exp.gamma.n_pixels()
        );
    }
    let phi_e = exp.excitation(&pat)?;
    ctx.log("running FISTA");
    let img = exp.reconstruct(&phi_e, &meas, &ctx.cfg.recon_config())?;
    fs::create_dir_all(&ctx.out)?;
    write_field(ctx, &exp, "recon.csv", &img.c)?;
    let mut w = create_file(&ctx.out.join("fista_log.csv"))?;
    img.write_log_csv(&mut w)?;
    w.flush()?;
    ctx.slices("recon", &exp, &img.c)?;
    let m = evaluate(&img.c, &exp.truth)?;
    write_json(&ctx.out.join("metrics.json"), &m)?;
    ctx.log(format!(
        "{} iterations, objective {:e}; dice {:.4}, mse {:.4e}",
        img.iterations, img.objective, m.dice, m.mse
    ));
    Ok(())
}

fn cmd_optimize(
    ctx: &Ctx,
    recon: &Path,
    pattern: Option<&Path>,
    measurements: Option<&Path>,
    sweep: Option<&str>,
) -> Result<()> {
    let exp = ctx.experiment()?;
    let c = read_field_file(recon, exp.n_nodes())?;
    let pat = ctx.pattern(&exp, pattern)?;
    let phi_e = exp.excitation(&pat)?;
    let meas = match measurements {
        Some(p) => read_measurements(p)?,
        None => exp.measure(&exp.truth, &phi_e, ctx.cfg.noise.seed)?,
    };
    if meas.n_sources != pat.nnz() {
        bail!(
            "measurements have {} lasers, pattern has {}",
            meas.n_sources,
            pat.nnz()
        );
    }
    let settings = ctx.cfg.loop_settings();
    fs::create_dir_all(&ctx.out)?;
    if let Some(s) = sweep {
        let mus = parse_sweep(s)?;
        ctx.log(format!("sweeping {} design weights", mus.len()));
        let (_, problem, init) = exp.design_problem(&c, &phi_e, &meas, &pat, &settings)?;
        let points = mu_sweep(&problem, &settings.illum, &init, pat.p_max, &mus)?;
        let mut w = create_file(&ctx.out.join("mu_sweep.csv"))?;
        writeln!(w, "mu,lasers,objective")?;
        for p in &points {
            writeln!(w, "{:e},{},{:e}", p.mu, p.nnz, p.objective)?;
            ctx.log(format!("mu {:.3e}: {} lasers", p.mu, p.nnz));
        }
        w.flush()?;
        return Ok(());
    }
    let design = exp.design(&c, &phi_e, &meas, &pat, &settings)?;
    write_pattern(ctx, &exp, "designed_pattern.csv", &design.pattern)?;
    if design.pattern.all_zero_warning {
        ctx.log("warning: design collapsed to an empty pattern; decrease --mu");
    }
    if design.pattern.exceeds_laser_bound() {
        ctx.log(format!(
            "warning: {} lasers exceed the bound of {}",
            design.pattern.nnz(),
            design.pattern.l_max
        ));
    }
    ctx.log(format!(
        "designed {} lasers (outer iterations {}, residual {:.3e} -> {:.3e})",
        design.pattern.nnz(),
        design.outer_iters,
        design.residual_current,
        design.residual_designed
    ));
    Ok(())
}

fn cmd_loop(ctx: &Ctx, rounds: Option<usize>) -> Result<()> {
    let exp = ctx.experiment()?;
    let mut settings = ctx.cfg.loop_settings();
    if let Some(r) = rounds {
        if r == 0 {
            bail!("--rounds must be > 0");
        }
        settings.rounds_max = r;
    }
    let o = &ctx.cfg.output;
    let run = RunDir::new(&ctx.out, o.slice_axes.clone(), o.slice_coords)?;
    run.write_truth(&exp)?;
    let initial = exp.initial_pattern()?;
    let mut write_err = None;
    let outcome = exp.run_loop_with(initial, &settings, |rec| {
        let m = &rec.metrics;
        ctx.log(format!(
            "round {}: {} lasers, dice {:.4}, vr {:.4}, mse {:.4e}, snr {:.3} dB, next {} lasers ({:.1}s)",
            rec.round,
            rec.laser_count,
            m.dice,
            m.vr,
            m.mse,
            m.snr_db,
            rec.design.pattern.nnz(),
            rec.wall_time_s
        ));
        if write_err.is_none() {
            write_err = run.write_round(&exp, rec).err();
        }
    });
    run.write_summary(&outcome)?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    if let Some(e) = outcome.failure {
        return Err(anyhow::Error::new(e).context(format!(
            "loop stopped after {} complete rounds",
            outcome.records.len()
        )));
    }
    if let Some(b) = outcome.best_round() {
        ctx.log(format!(
            "{} after {} rounds; best round {}",
            if outcome.converged {
                "converged"
            } else {
                "stopped"
            },
            outcome.records.len(),
            b
        ));
    }
    Ok(())
}

fn cmd_metrics(ctx: &Ctx, recon: &Path, truth: &Path) -> Result<()> {
    let truth_text =
        fs::read_to_string(truth).with_context(|| format!("reading {}", truth.display()))?;
    let n = truth_text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .count();
    let t = fmt_core::io::read_field_csv(&truth_text, &truth.display().to_string(), n)?;
    let x = read_field_file(recon, n)?;
    let m = evaluate(&x, &t)?;
    fs::create_dir_all(&ctx.out)?;
    write_json(&ctx.out.join("metrics.json"), &m)?;
    println!("{}", serde_json_line(&m)?);
    Ok(())
}

fn serde_json_line(m: &fmt_core::MetricsReport) -> Result<String> {
    Ok(format!(
        "mse {:.6e} dice {:.6} vr {:.6} snr_db {} roi {}/{}",
        m.mse,
        m.dice,
        m.vr,
        if m.snr_db.is_finite() {
            format!("{:.6}", m.snr_db)
        } else {
            "inf".into()
        },
        m.roi_recon,
        m.roi_truth
    ))
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FMT_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("FMT_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let cfg = load_config(&cli.global)?;
    let out = cli
        .global
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    let ctx = Ctx {
        cfg,
        out,
        quiet: cli.global.quiet,
    };
    match &cli.cmd {
        Command::Forward { pattern } => cmd_forward(&ctx, pattern.as_deref()),
        Command::Reconstruct {
            measurements,
            pattern,
        } => cmd_reconstruct(&ctx, measurements, pattern.as_deref()),
        Command::Optimize {
            recon,
            pattern,
            measurements,
            mu_sweep,
        } => cmd_optimize(
            &ctx,
            recon,
            pattern.as_deref(),
            measurements.as_deref(),
            mu_sweep.as_deref(),
        ),
        Command::Loop { rounds } => cmd_loop(&ctx, *rounds),
        Command::Metrics { recon, truth } => cmd_metrics(&ctx, recon, truth),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
