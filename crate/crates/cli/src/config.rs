//! Experiment files: embedded defaults overlaid with a user TOML file.

use nefem::driver::RunConfig;
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Ex1,
    Ex2,
    Ex3,
    Convergence,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Ex1 => "ex1",
            Experiment::Ex2 => "ex2",
            Experiment::Ex3 => "ex3",
            Experiment::Convergence => "convergence",
        }
    }

    pub fn default_toml(self) -> &'static str {
        match self {
            Experiment::Ex1 => include_str!("../configs/ex1.toml"),
            Experiment::Ex2 => include_str!("../configs/ex2.toml"),
            Experiment::Ex3 => include_str!("../configs/ex3.toml"),
            Experiment::Convergence => include_str!("../configs/convergence.toml"),
        }
    }
}

/// A fully resolved experiment.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub run: RunConfig,
    pub seeds: Vec<u64>,
    pub levels: Vec<usize>,
    pub workers: usize,
    /// The merged table, echoed next to the results.
    pub table: Table,
}

/// Recursive overlay; a user `[problem]` of a different kind replaces the default.
fn overlay(base: &mut Table, user: Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(u)) => {
                if k == "problem" && u.get("kind").is_some_and(|kind| b.get("kind") != Some(kind)) {
                    *b = u;
                } else {
                    overlay(b, u);
                }
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn resolve(exp: Experiment, user: Option<&str>) -> Result<Resolved, CliError> {
    let mut table: Table = exp.default_toml().parse().map_err(|e| CliError::Config(format!("embedded {} config: {e}", exp.name())))?;
    if let Some(text) = user {
        let u: Table = text.parse().map_err(|e| CliError::Config(format!("config file: {e}")))?;
        overlay(&mut table, u);
    }
    let mut run_table = table.clone();
    let seeds = take_list(&mut run_table, "seeds")?.unwrap_or_else(|| vec![0]);
    let levels = take_list(&mut run_table, "levels")?.unwrap_or_default().into_iter().map(|l| l as usize).collect();
    let workers = match run_table.remove("workers") {
        None => 1,
        Some(Value::Integer(n)) if n >= 1 => n as usize,
        Some(v) => return Err(CliError::Config(format!("workers: expected a positive integer, got {v}"))),
    };
    let run: RunConfig = run_table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    run.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Resolved { run, seeds, levels, workers, table })
}

fn take_list(t: &mut Table, key: &str) -> Result<Option<Vec<u64>>, CliError> {
    let Some(v) = t.remove(key) else { return Ok(None) };
    let bad = || CliError::Config(format!("{key}: expected a list of non-negative integers"));
    let arr = v.as_array().ok_or_else(bad)?;
    arr.iter().map(|x| x.as_integer().filter(|n| *n >= 0).map(|n| n as u64).ok_or_else(bad)).collect::<Result<_, _>>().map(Some)
}

/// `0,3,7` or the half-open range `0..6`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Config(format!("--seeds: cannot parse {s:?}"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a >= b {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}
