use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bathy_core::config::{EstimatorChoice, RunConfig};
use bathy_core::draping;
use bathy_core::estimator::{self, LearnedEstimator, Lambertian, NormalEstimator};
use bathy_core::heightfield::{self, HeightField};
use bathy_core::{eval, recon, survey};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "sss-bathy", version, about = "Sidescan sonar to bathymetry on synthetic surveys")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// `key = value` run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides one configuration key; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a terrain grid.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate a lawnmower survey over a grid.
    Simulate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Georeference a survey on a grid to produce training data.
    Drape {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        survey: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the learned normal estimator on a draped dataset.
    TrainEstimator {
        #[arg(long)]
        draped: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a saved estimator.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Per-epoch CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fit a SIREN bathymetry to a survey.
    Reconstruct {
        #[arg(long)]
        survey: PathBuf,
        /// Output directory for model.srn, bathymetry.grd, coverage.grd and recon_log.csv.
        #[arg(long)]
        out_dir: PathBuf,
        /// Reference grid: supplies the export lattice and, for gt-normals, the normals.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Saved learned estimator, required with `estimator = learned`.
        #[arg(long)]
        estimator_file: Option<PathBuf>,
    },
    /// Compare a reconstructed grid with ground truth.
    Evaluate {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Output stem: writes STEM.csv, STEM.txt and STEM_pdf.csv.
        #[arg(long)]
        out: PathBuf,
        /// Grid whose data cells select the evaluated region.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
}

/// Bad invocation rather than bad data.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Optimization produced non-finite values.
#[derive(Debug)]
struct NumericalFailure(String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<NumericalFailure>() || matches!(cause.downcast_ref(), Some(bathy_core::Error::Numerical(_))) {
            return 3;
        }
    }
    2
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) if !p.is_file() => return Err(usage(format!("config file {} not found", p.display()))),
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())).map_err(|e| usage(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    for a in &g.set {
        cfg.set_assignment(a).map_err(|e| usage(format!("--set {a}: {e}")))?;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| usage(format!("invalid configuration: {e}")))?;
    Ok(cfg)
}

fn read_grid(path: &Path) -> Result<HeightField> {
    heightfield::read_grid(path).with_context(|| format!("reading grid {}", path.display()))
}

fn read_survey(path: &Path) -> Result<survey::Survey> {
    survey::read_survey(path).with_context(|| format!("reading survey {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Generate { out } => {
            let field = heightfield::generate_terrain(&cfg.terrain)?;
            heightfield::write_grid(&field, &out).with_context(|| format!("writing {}", out.display()))?;
            log::info!("wrote {}×{} grid to {}", field.ncols(), field.nrows(), out.display());
        }
        Command::Simulate { grid, out } => {
            let field = read_grid(&grid)?;
            let s = survey::simulate_survey(&field, &cfg.survey())?;
            survey::write_survey(&s, &out).with_context(|| format!("writing {}", out.display()))?;
            log::info!("simulated {} lines, {} pings", s.lines.len(), s.ping_count());
        }
        Command::Drape { grid, survey: sp, out } => {
            let field = read_grid(&grid)?;
            let s = read_survey(&sp)?;
            let d = draping::drape_survey(&field, &s);
            draping::write_draped(&d, &out).with_context(|| format!("writing {}", out.display()))?;
            let windows = draping::make_training_windows(&d.lines, &cfg.windows())?;
            log::info!("draped {} pings; {} training windows", d.pings().count(), windows.len());
        }
        Command::TrainEstimator { draped, out, resume, log: log_path } => {
            let d = draping::read_draped(&draped).with_context(|| format!("reading {}", draped.display()))?;
            let windows = draping::make_training_windows(&d.lines, &cfg.windows())?;
            if windows.len() < 2 {
                bail!("draped dataset yields {} training windows; need at least 2", windows.len());
            }
            let (ti, vi) = estimator::split_indices(windows.len(), cfg.val_fraction, cfg.seed);
            let train: Vec<_> = ti.iter().map(|&i| windows[i].clone()).collect();
            let val: Vec<_> = vi.iter().map(|&i| windows[i].clone()).collect();
            let init = match resume {
                Some(p) => Some(LearnedEstimator::load(&p).with_context(|| format!("loading estimator {}", p.display()))?),
                None => None,
            };
            let (est, log) = estimator::train_learned_estimator(&train, &val, &cfg.loss, &cfg.train(), init)?;
            for e in &log {
                let m = &e.val_metrics;
                log::info!(
                    "epoch {}: train {:.5} val {:.5} mae {:.5} rel {:.5} rmse {:.5} delta {:.1}/{:.1}/{:.1}",
                    e.epoch, e.train_loss, e.val_loss, m.mae, m.rel, m.rmse, m.delta[0], m.delta[1], m.delta[2]
                );
            }
            est.save(&out).with_context(|| format!("writing {}", out.display()))?;
            if let Some(p) = log_path {
                let mut csv = String::from("epoch,train_loss,val_loss,val_mae,val_rel,val_rmse,val_delta1,val_delta2,val_delta3,lr\n");
                for e in &log {
                    let m = &e.val_metrics;
                    csv.push_str(&format!(
                        "{},{},{},{},{},{},{},{},{},{}\n",
                        e.epoch, e.train_loss, e.val_loss, m.mae, m.rel, m.rmse, m.delta[0], m.delta[1], m.delta[2], e.lr
                    ));
                }
                fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Reconstruct { survey: sp, out_dir, grid, estimator_file } => {
            let reference = grid.as_deref().map(read_grid).transpose()?;
            if cfg.estimator == EstimatorChoice::GtNormals && reference.is_none() {
                return Err(usage("estimator gt-normals needs --grid for oracle normals"));
            }
            let learned = match (cfg.estimator, &estimator_file) {
                (EstimatorChoice::Learned, None) => return Err(usage("estimator learned needs --estimator-file")),
                (EstimatorChoice::Learned, Some(p)) => {
                    Some(LearnedEstimator::load(p).with_context(|| format!("loading estimator {}", p.display()))?)
                }
                _ => None,
            };
            let s = read_survey(&sp)?;
            let gain = cfg.survey.gain;
            let input = match cfg.estimator {
                EstimatorChoice::GtNormals => {
                    let field = reference.as_ref().expect("checked above");
                    recon::ReconInput::from_draped(&draping::drape_survey(field, &s))
                }
                EstimatorChoice::Lambertian => recon::ReconInput::from_estimates(&s, Lambertian.estimate_survey(&s, gain))?,
                EstimatorChoice::Learned => {
                    let est = learned.as_ref().expect("checked above");
                    recon::ReconInput::from_estimates(&s, est.estimate_survey(&s, gain))?
                }
            };
            let lattice = match reference {
                Some(f) => f,
                None => {
                    let t = &cfg.terrain;
                    HeightField::constant(t.origin.0, t.origin.1, t.cell_size, t.ncols, t.nrows, 0.0)?
                }
            };
            let rc = cfg.recon();
            log::info!("reconstructing from {} constrained bins, {} altimeter points", input.bin_count(), input.altimeter.len());
            let out = recon::optimize(&input, lattice.extent(), &rc)?;
            fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            out.model.save(out_dir.join("model.srn"))?;
            recon::write_log_csv(&out.log, out_dir.join("recon_log.csv"))?;
            let bathy = recon::export_like(&out.model, &lattice)?;
            heightfield::write_grid(&bathy, out_dir.join("bathymetry.grd"))?;
            let all: Vec<usize> = (0..input.pings.len()).collect();
            let (samples, _) = recon::normal_samples(&out.model, &input, &all, &rc);
            let mask = recon::coverage_mask(&lattice, samples.iter().map(|s| s.point), cfg.coverage_radius);
            let mut cover = HeightField::constant(lattice.origin().0, lattice.origin().1, lattice.cell_size(), lattice.ncols(), lattice.nrows(), 1.0)?;
            for (i, &m) in mask.iter().enumerate() {
                if !m {
                    cover.set_nodata(i % lattice.ncols(), i / lattice.ncols());
                }
            }
            heightfield::write_grid(&cover, out_dir.join("coverage.grd"))?;
            if let Some(msg) = out.diverged {
                return Err(NumericalFailure(msg).into());
            }
            if let Some(last) = out.log.last() {
                log::info!("final loss {:.6} (normal {:.6}, height {:.6})", last.loss_total, last.loss_normal, last.loss_height);
            }
        }
        Command::Evaluate { recon: rp, gt, out, mask } => {
            let r = read_grid(&rp)?;
            let g = read_grid(&gt)?;
            let mask = match mask {
                Some(p) => {
                    let m = read_grid(&p)?;
                    if !m.same_lattice(&g) {
                        bail!("mask grid {} is not on the ground-truth lattice", p.display());
                    }
                    Some((0..m.nrows()).flat_map(|row| (0..m.ncols()).map(move |c| (c, row))).map(|(c, row)| m.get(c, row).is_some()).collect::<Vec<_>>())
                }
                None => None,
            };
            let m = eval::map_metrics(&r, &g, mask.as_deref())?;
            eval::write_map_report(&m, &out).with_context(|| format!("writing report {}", out.display()))?;
            print!("{}", eval::map_metrics_text(&m));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
