//! Seed-replicated runs and their on-disk artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use nefem::driver::{self, Algorithm, Checkpoint, EnrichmentPolicy, RunConfig, RunSummary};
use nefem::linsolve::{SolverConfig, SolverMethod};
use nefem::problems::{fem_reference, ErrorNorms, ReferenceSolution};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Experiment, Resolved};
use crate::CliError;

pub const AGGREGATE_SCHEMA: &str = "nefem-aggregate v1";

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Stat { mean, std: var.sqrt(), min, max })
    }
}

#[derive(Debug, Serialize)]
pub struct Aggregate {
    pub schema: &'static str,
    pub experiment: &'static str,
    pub seeds: Vec<u64>,
    pub e_l2: Option<Stat>,
    pub e_h1: Option<Stat>,
    pub energy: Option<Stat>,
    pub relative_h1: Option<Stat>,
    pub final_cond: Option<Stat>,
    pub final_eta: Option<Stat>,
    /// Plain P1 on the same mesh, against the same truth.
    pub p1_baseline: Option<ErrorNorms>,
}

#[derive(Debug, Serialize)]
pub struct Level {
    pub nx: usize,
    pub h: f64,
    pub energy: Stat,
    pub e_l2: Stat,
    pub e_h1: Stat,
}

#[derive(Debug, Serialize)]
pub struct ConvergenceAggregate {
    pub schema: &'static str,
    pub experiment: &'static str,
    pub seeds: Vec<u64>,
    pub levels: Vec<Level>,
    /// Least-squares slope of log(mean energy error) against log h.
    pub energy_slope: f64,
}

pub struct Options {
    pub out: PathBuf,
    pub overwrite: bool,
    pub dump_estimator: bool,
}

/// Output directory assembled under a hidden sibling and renamed into place.
struct Staging {
    tmp: PathBuf,
    target: PathBuf,
    overwrite: bool,
}

impl Staging {
    fn new(target: &Path, overwrite: bool) -> Result<Self, CliError> {
        if target.exists() && !overwrite {
            return Err(CliError::Config(format!("{} exists; pass --overwrite to replace it", target.display())));
        }
        let name = target.file_name().ok_or_else(|| CliError::Config("--out: needs a directory name".into()))?;
        let mut tmp_name = std::ffi::OsString::from(".");
        tmp_name.push(name);
        tmp_name.push(".partial");
        let tmp = target.with_file_name(tmp_name);
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        Ok(Self { tmp, target: target.to_path_buf(), overwrite })
    }

    fn commit(self) -> Result<(), CliError> {
        if self.target.exists() {
            if !self.overwrite {
                return Err(CliError::Config(format!("{} appeared during the run", self.target.display())));
            }
            fs::remove_dir_all(&self.target)?;
        }
        fs::rename(&self.tmp, &self.target)?;
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    driver::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| CliError::Config(format!("workers: {e}")))
}

/// Runs one seed and writes its history, summary and checkpoint into `dir`.
fn run_seed(
    cfg: &RunConfig,
    reference: Option<&ReferenceSolution>,
    dir: &Path,
    checkpoint: bool,
    dump: bool,
) -> Result<RunSummary, CliError> {
    let out = driver::run(cfg, reference)?;
    fs::create_dir_all(dir)?;
    let mut csv = Vec::new();
    out.history.write_csv(&mut csv)?;
    driver::write_atomic(&dir.join("history.csv"), &csv)?;
    let summary = RunSummary::new(cfg, &out)?;
    write_json(&dir.join("summary.json"), &summary)?;
    if checkpoint {
        driver::save_run(&dir.join("checkpoint.json"), &Checkpoint::new(cfg, &out.space, &out.adam, &out.history)?)?;
    }
    if dump && cfg.input_mode() == nefem::neuralnet::InputMode::Spatial {
        let problem = cfg.problem.build()?;
        let scheme = nefem::assembly::QuadratureScheme::new(out.space.mesh(), cfg.quad_degree, None)?;
        let field = nefem::estimator::estimate(&out.space, problem.as_ref(), &out.c, &scheme, cfg.edge_points)?;
        let mut buf = Vec::new();
        field.write_csv(&mut buf)?;
        driver::write_atomic(&dir.join("estimator.csv"), &buf)?;
    }
    info!("seed {} done: {:?}", cfg.seed, summary.final_errors);
    Ok(summary)
}

fn reference_for(cfg: &RunConfig) -> Result<Option<Arc<ReferenceSolution>>, CliError> {
    let problem = cfg.problem.build()?;
    if problem.exact([0.5, 0.5], nefem::mesh::Side::Outside).is_some() {
        return Ok(None);
    }
    info!("computing the {0}x{0} reference solution", cfg.reference_nx);
    // Jacobi CG stalls on the fine mesh; a sparse Cholesky factorization of a
    // 2D grid is cheap regardless of the configured size limit.
    let solver = SolverConfig { method: SolverMethod::Direct, ..cfg.solver };
    Ok(Some(Arc::new(fem_reference(problem.as_ref(), cfg.reference_nx, cfg.quad_degree, &solver)?)))
}

pub fn run_experiment(exp: Experiment, r: &Resolved, opts: &Options) -> Result<(), CliError> {
    let staging = Staging::new(&opts.out, opts.overwrite)?;
    let reference = reference_for(&r.run)?;
    let summaries: Vec<RunSummary> = pool(r.workers)?.install(|| {
        r.seeds
            .par_iter()
            .map(|&seed| {
                let cfg = RunConfig { seed, ..r.run.clone() };
                run_seed(&cfg, reference.as_deref(), &staging.tmp.join(format!("seed-{seed}")), true, opts.dump_estimator)
            })
            .collect::<Result<Vec<_>, _>>()
    })?;

    let baseline_cfg = RunConfig { algorithm: Algorithm::Plain, policy: EnrichmentPolicy::None, epochs: 0, cond_every: 0, ..r.run.clone() };
    let p1_baseline = driver::run(&baseline_cfg, reference.as_deref())?.final_errors;

    let pick = |f: &dyn Fn(&RunSummary) -> Option<f64>| Stat::of(&summaries.iter().filter_map(f).collect::<Vec<_>>());
    let agg = Aggregate {
        schema: AGGREGATE_SCHEMA,
        experiment: exp.name(),
        seeds: r.seeds.clone(),
        e_l2: pick(&|s| s.final_errors.map(|e| e.l2)),
        e_h1: pick(&|s| s.final_errors.map(|e| e.h1)),
        energy: pick(&|s| s.final_errors.map(|e| e.energy)),
        relative_h1: pick(&|s| s.relative_h1),
        final_cond: pick(&|s| s.final_cond),
        final_eta: pick(&|s| s.final_eta),
        p1_baseline,
    };
    write_json(&staging.tmp.join("aggregate.json"), &agg)?;
    driver::write_atomic(
        &staging.tmp.join("config.toml"),
        toml::to_string(&r.table).map_err(|e| CliError::Config(e.to_string()))?.as_bytes(),
    )?;
    staging.commit()?;
    println!("{}", serde_json::to_string_pretty(&agg)?);
    Ok(())
}

pub fn run_convergence(r: &Resolved, opts: &Options) -> Result<(), CliError> {
    if r.levels.len() < 2 {
        return Err(CliError::Config("levels: need at least two mesh levels".into()));
    }
    let staging = Staging::new(&opts.out, opts.overwrite)?;
    let pool = pool(r.workers)?;
    let mut levels = Vec::new();
    for &nx in &r.levels {
        let base = RunConfig { nx, ..r.run.clone() };
        base.validate()?;
        let width = base.problem.build()?.domain().width();
        let summaries: Vec<RunSummary> = pool.install(|| {
            r.seeds
                .par_iter()
                .map(|&seed| {
                    let cfg = RunConfig { seed, ..base.clone() };
                    run_seed(&cfg, None, &staging.tmp.join(format!("nx-{nx}")).join(format!("seed-{seed}")), false, false)
                })
                .collect::<Result<Vec<_>, _>>()
        })?;
        let errs: Vec<ErrorNorms> = summaries.iter().filter_map(|s| s.final_errors).collect();
        if errs.len() != summaries.len() {
            return Err(CliError::Config("convergence needs a problem with an exact solution".into()));
        }
        let col = |f: fn(&ErrorNorms) -> f64| Stat::of(&errs.iter().map(f).collect::<Vec<_>>()).expect("non-empty");
        levels.push(Level { nx, h: width / nx as f64, energy: col(|e| e.energy), e_l2: col(|e| e.l2), e_h1: col(|e| e.h1) });
    }
    let hs: Vec<f64> = levels.iter().map(|l| l.h).collect();
    let es: Vec<f64> = levels.iter().map(|l| l.energy.mean).collect();
    let agg = ConvergenceAggregate {
        schema: AGGREGATE_SCHEMA,
        experiment: Experiment::Convergence.name(),
        seeds: r.seeds.clone(),
        energy_slope: driver::loglog_slope(&hs, &es),
        levels,
    };
    write_json(&staging.tmp.join("aggregate.json"), &agg)?;
    driver::write_atomic(
        &staging.tmp.join("config.toml"),
        toml::to_string(&r.table).map_err(|e| CliError::Config(e.to_string()))?.as_bytes(),
    )?;
    staging.commit()?;
    println!("{}", serde_json::to_string_pretty(&agg)?);
    Ok(())
}
