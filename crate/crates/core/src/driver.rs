//! Training loops: plain network-enriched GFEM and the adaptive variant with
//! estimator-driven enrichment and freezing. Also histories, summaries and
//! checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::assembly::{apply_dirichlet, assemble_with_cache, loss_theta_gradient, ritz_loss, PointCache, QuadratureScheme, ReducedSystem};
use crate::enrichspace::{Enrichment, EnrichmentSpace};
use crate::error::{NefemError, Result};
use crate::estimator::{doerfler_mark, estimate, marked_interior_nodes, percentage_mark};
use crate::linsolve::{scaled_condition_number, solve_spd, SolverConfig};
use crate::mesh::{Mesh, Point};
use crate::neuralnet::{mix_seed, AdamState, InputMode, MlpEnrichment};
use crate::problems::{
    error_norms, error_norms_cached, exact_norms, ErrorNorms, Example1, Example2, Example3, Problem, ReferenceSolution, Truth,
};

pub const HISTORY_SCHEMA: &str = "nefem-history v1";
pub const SUMMARY_SCHEMA: &str = "nefem-summary v1";
pub const RUN_FORMAT: &str = "nefem-run";
pub const RUN_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSelector {
    Ex1 {
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_amplitude")]
        p: f64,
    },
    Ex2,
    Ex3 {
        #[serde(default = "default_a1")]
        a1: f64,
        #[serde(default = "default_a2")]
        a2: f64,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_center")]
        center: Point,
        #[serde(default)]
        literal_distance: bool,
    },
}

fn default_eps() -> f64 {
    0.02
}
fn default_amplitude() -> f64 {
    1.5
}
fn default_a1() -> f64 {
    0.1
}
fn default_a2() -> f64 {
    1.0
}
fn default_radius() -> f64 {
    0.5
}
fn default_center() -> Point {
    [0.0, 0.15]
}

impl ProblemSelector {
    pub fn build(&self) -> Result<Arc<dyn Problem>> {
        Ok(match *self {
            ProblemSelector::Ex1 { eps, p } => Arc::new(Example1::new(eps, p)?),
            ProblemSelector::Ex2 => Arc::new(Example2),
            ProblemSelector::Ex3 { a1, a2, radius, center, literal_distance } => {
                Arc::new(Example3::new(a1, a2, radius, center, literal_distance)?)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnrichmentPolicy {
    /// No enrichment: plain P1.
    None,
    AllInterior,
    EstimatorMarked,
    InterfaceCut,
}

/// Starting value of the trainable slopes `a_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlopeInit {
    /// `a_k = 1 / n_k`: every activation starts at effective slope one.
    UnitEffective,
    /// `a_k = 1`: activations start at effective slope `n_k`. With Adam the
    /// slopes move about `lr` per step, so high-frequency targets are out of
    /// reach within a few hundred epochs unless the slopes start here.
    One,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Plain,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSelector,
    pub algorithm: Algorithm,
    pub policy: EnrichmentPolicy,
    pub nx: usize,
    pub dims: [usize; 4],
    pub scales: [u32; 2],
    pub slope_init: SlopeInit,
    pub lr: f64,
    pub epochs: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub h1: usize,
    pub h2: usize,
    pub seed: u64,
    pub quad_degree: usize,
    pub edge_points: usize,
    pub solver: SolverConfig,
    /// Scaled condition number every this many epochs and at the end; 0 disables.
    pub cond_every: usize,
    /// Errors every this many epochs and at the end; 0 keeps only the final value.
    pub error_every: usize,
    /// Extra estimator evaluations in adaptive runs; 0 keeps only trigger epochs.
    pub estimate_every: usize,
    /// Rule degree on fine sub-triangles when comparing with a reference.
    pub reference_sub_degree: usize,
    pub reference_nx: usize,
    /// Fill the wall-time column. Off by default so reruns are byte-identical.
    pub record_timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::example1()
    }
}

impl RunConfig {
    pub fn example1() -> Self {
        Self {
            problem: ProblemSelector::Ex1 { eps: default_eps(), p: default_amplitude() },
            algorithm: Algorithm::Plain,
            policy: EnrichmentPolicy::AllInterior,
            nx: 32,
            dims: [2, 20, 20, 1],
            scales: [150, 2],
            slope_init: SlopeInit::One,
            lr: 1e-3,
            epochs: 60,
            alpha1: 0.6,
            alpha2: 0.6,
            h1: 50,
            h2: 50,
            seed: 0,
            quad_degree: 20,
            edge_points: 25,
            solver: SolverConfig::default(),
            cond_every: 10,
            error_every: 10,
            estimate_every: 10,
            reference_sub_degree: 2,
            reference_nx: 512,
            record_timing: false,
        }
    }

    pub fn example2() -> Self {
        Self {
            problem: ProblemSelector::Ex2,
            algorithm: Algorithm::Adaptive,
            policy: EnrichmentPolicy::EstimatorMarked,
            epochs: 200,
            error_every: 1,
            ..Self::example1()
        }
    }

    pub fn example3() -> Self {
        Self {
            problem: ProblemSelector::Ex3 {
                a1: default_a1(),
                a2: default_a2(),
                radius: default_radius(),
                center: default_center(),
                literal_distance: false,
            },
            policy: EnrichmentPolicy::InterfaceCut,
            dims: [3, 20, 20, 1],
            scales: [10, 2],
            // Untrained enrichments only keep the O(h) rate when they start smooth.
            slope_init: SlopeInit::UnitEffective,
            epochs: 0,
            error_every: 1,
            ..Self::example1()
        }
    }

    pub fn input_mode(&self) -> InputMode {
        if self.policy == EnrichmentPolicy::InterfaceCut {
            InputMode::SpatialDistance
        } else {
            InputMode::Spatial
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NefemError::InvalidConfig(m));
        if self.nx == 0 {
            return bad("nx: must be at least 1".into());
        }
        self.problem.build().map_err(|e| NefemError::InvalidConfig(format!("problem: {e}")))?;
        if self.policy != EnrichmentPolicy::None && self.dims[0] != self.input_mode().input_dim() {
            return bad(format!("dims: input width {} does not match the {:?} policy", self.dims[0], self.policy));
        }
        if self.dims[3] != 1 {
            return bad("dims: output width must be 1".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr: must be positive, got {}", self.lr));
        }
        if self.scales.contains(&0) {
            return bad("scales: must be positive".into());
        }
        if self.algorithm == Algorithm::Adaptive {
            if self.policy != EnrichmentPolicy::EstimatorMarked {
                return bad("policy: adaptive runs use estimator-marked enrichment".into());
            }
            if !(self.alpha1 > 0.0 && self.alpha1 <= 1.0) {
                return bad(format!("alpha1: must lie in (0, 1], got {}", self.alpha1));
            }
            if !(self.alpha2 > 0.0 && self.alpha2 < 1.0) {
                return bad(format!("alpha2: must lie in (0, 1), got {}", self.alpha2));
            }
            if self.h1 == 0 || self.h2 == 0 {
                return bad("h1, h2: must be at least 1".into());
            }
        } else if self.policy == EnrichmentPolicy::EstimatorMarked {
            return bad("policy: estimator-marked enrichment needs the adaptive algorithm".into());
        }
        if self.policy == EnrichmentPolicy::InterfaceCut && !matches!(self.problem, ProblemSelector::Ex3 { .. }) {
            return bad("policy: interface-cut enrichment needs an interface problem".into());
        }
        // Only problems without an exact solution compare against a reference.
        if matches!(self.problem, ProblemSelector::Ex1 { .. }) && !self.reference_nx.is_multiple_of(self.nx) {
            return bad(format!("reference_nx: {} is not a multiple of nx {}", self.reference_nx, self.nx));
        }
        self.solver.validate()
    }

    fn is_trigger(&self, k: usize) -> bool {
        self.algorithm == Algorithm::Adaptive && k >= self.h1 && (k - self.h1).is_multiple_of(self.h2)
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub e_l2: Option<f64>,
    pub e_h1: Option<f64>,
    pub eta: Option<f64>,
    pub effectivity: Option<f64>,
    pub cond_scaled: Option<f64>,
    pub active_nodes: usize,
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    records: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn push(&mut self, r: EpochRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.epoch <= last.epoch {
                return Err(NefemError::InvalidConfig(format!("epoch {} after {}", r.epoch, last.epoch)));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# {HISTORY_SCHEMA}")?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "loss", "e_L2", "e_H1", "eta", "effectivity", "cond_scaled", "active_nodes", "wall_ms"])?;
        let opt = |x: Option<f64>| x.map(|v| format!("{v:e}")).unwrap_or_default();
        for r in &self.records {
            out.write_record([
                r.epoch.to_string(),
                format!("{:e}", r.loss),
                opt(r.e_l2),
                opt(r.e_h1),
                opt(r.eta),
                opt(r.effectivity),
                opt(r.cond_scaled),
                r.active_nodes.to_string(),
                opt(r.wall_ms),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Result of a training run.
#[derive(Debug)]
pub struct RunOutcome {
    pub space: EnrichmentSpace,
    pub c: Vec<f64>,
    pub history: TrainingHistory,
    pub adam: Vec<AdamState>,
    pub final_errors: Option<ErrorNorms>,
    pub final_eta: Option<f64>,
    pub final_cond: Option<f64>,
    /// Global estimator of the initial P1 solution (adaptive runs).
    pub initial_eta: Option<f64>,
    pub training_ms: f64,
}

enum TruthKind<'a> {
    Exact,
    Reference(&'a ReferenceSolution),
    Unavailable,
}

struct Solved {
    reduced: ReducedSystem,
    cache: PointCache,
    c: Vec<f64>,
    loss: f64,
}

struct Trainer<'a> {
    config: &'a RunConfig,
    problem: &'a dyn Problem,
    scheme: QuadratureScheme,
    truth: TruthKind<'a>,
    space: EnrichmentSpace,
    adam: Vec<AdamState>,
    active: Vec<bool>,
    history: TrainingHistory,
    elapsed: Duration,
}

impl<'a> Trainer<'a> {
    fn new(
        config: &'a RunConfig,
        problem: &'a dyn Problem,
        mesh: &Arc<Mesh>,
        space: EnrichmentSpace,
        reference: Option<&'a ReferenceSolution>,
    ) -> Result<Self> {
        let scheme = QuadratureScheme::new(mesh, config.quad_degree, problem.interface().as_ref())?;
        let truth = if problem.exact(mesh.node(0), crate::mesh::Side::Outside).is_some() {
            TruthKind::Exact
        } else if let Some(r) = reference {
            TruthKind::Reference(r)
        } else {
            TruthKind::Unavailable
        };
        let adam = space.enrichments().iter().map(|e| AdamState::new(e.as_network().map_or(0, |n| n.num_params()), config.lr)).collect();
        let active = vec![true; space.num_enriched()];
        Ok(Self { config, problem, scheme, truth, space, adam, active, history: TrainingHistory::default(), elapsed: Duration::ZERO })
    }

    fn solve(&mut self) -> Result<Solved> {
        self.space.refresh_cache();
        let (sys, cache) = assemble_with_cache(&self.space, self.problem, &self.scheme)?;
        let reduced = apply_dirichlet(&sys, self.space.mesh(), self.problem)?;
        let sol = solve_spd(&reduced.matrix, &reduced.rhs, &self.config.solver)?;
        let loss = ritz_loss(&reduced, &sol.x);
        let c = reduced.expand(&sol.x);
        Ok(Solved { reduced, cache, c, loss })
    }

    fn errors(&self, s: &Solved) -> Result<Option<ErrorNorms>> {
        match self.truth {
            TruthKind::Exact => Ok(Some(error_norms_cached(&s.cache, self.space.mesh(), &s.c, self.problem)?)),
            TruthKind::Reference(r) => Ok(Some(error_norms(
                &self.space,
                &s.c,
                &Truth::Reference(r),
                self.problem,
                &self.scheme,
                self.config.reference_sub_degree,
            )?)),
            TruthKind::Unavailable => Ok(None),
        }
    }

    fn eta(&self, s: &Solved) -> Result<Vec<f64>> {
        Ok(estimate(&self.space, self.problem, &s.c, &self.scheme, self.config.edge_points)?.eta_sq)
    }

    fn record(&mut self, k: usize, s: &Solved, eta: Option<f64>, last: bool) -> Result<Option<ErrorNorms>> {
        let every = |n: usize| n > 0 && k.is_multiple_of(n);
        let errs = if last || every(self.config.error_every) || eta.is_some() { self.errors(s)? } else { None };
        let cond = if self.config.cond_every > 0 && (last || every(self.config.cond_every)) {
            Some(scaled_condition_number(&s.reduced.matrix)?)
        } else {
            None
        };
        let effectivity = match (eta, errs) {
            (Some(e), Some(n)) if n.h1 > 0.0 => Some(e / n.h1),
            _ => None,
        };
        let rec = EpochRecord {
            epoch: k,
            loss: s.loss,
            e_l2: errs.map(|e| e.l2),
            e_h1: errs.map(|e| e.h1),
            eta,
            effectivity,
            cond_scaled: cond,
            active_nodes: self.active.iter().filter(|a| **a).count(),
            wall_ms: self.config.record_timing.then_some(self.elapsed.as_secs_f64() * 1e3),
        };
        debug!("epoch {k}: loss {:e} e_H1 {:?} eta {:?}", rec.loss, rec.e_h1, rec.eta);
        self.history.push(rec)?;
        Ok(errs)
    }

    fn step(&mut self, s: &Solved) -> Result<()> {
        let mask = self.active.clone();
        let grad = loss_theta_gradient(&self.space, &s.reduced, &s.cache, &s.c, Some(&mask))?;
        for (m, g) in grad.per_network.iter().enumerate() {
            if !self.active[m] {
                continue;
            }
            if let Some(net) = self.space.enrichment_mut(m).as_network_mut() {
                self.adam[m].step(net.params_mut(), g, None)?;
            }
        }
        Ok(())
    }

    /// Runs epochs `0..T` and the final solve. `select` is called at trigger
    /// epochs with the current solution.
    fn train(mut self, initial_eta: Option<f64>, candidates: &[usize]) -> Result<RunOutcome> {
        let t_total = self.config.epochs;
        for k in 0..t_total {
            let wrap = |e: NefemError| NefemError::Epoch { epoch: k, source: Box::new(e) };
            let started = Instant::now();
            let s = self.solve().map_err(wrap)?;
            let mut eta = None;
            if self.config.is_trigger(k) {
                let eta_sq = self.eta(&s).map_err(wrap)?;
                eta = Some(eta_sq.iter().sum::<f64>().sqrt());
                let mark = doerfler_mark(&eta_sq, self.config.alpha2, Some(candidates)).map_err(wrap)?;
                if !mark.reached {
                    info!("epoch {k}: marking threshold unreachable within the enriched set; training all of it");
                }
                let nodes = marked_interior_nodes(self.space.mesh(), &mark.elements);
                for (m, &node) in self.space.enriched_nodes().iter().enumerate() {
                    self.active[m] = nodes.binary_search(&node).is_ok();
                }
            }
            self.elapsed += started.elapsed();
            if eta.is_none()
                && self.config.algorithm == Algorithm::Adaptive
                && self.config.estimate_every > 0
                && k % self.config.estimate_every == 0
            {
                eta = Some(self.eta(&s).map_err(wrap)?.iter().sum::<f64>().sqrt());
            }
            self.record(k, &s, eta, false).map_err(wrap)?;
            let started = Instant::now();
            self.step(&s).map_err(wrap)?;
            self.elapsed += started.elapsed();
        }
        let wrap = |e: NefemError| NefemError::Epoch { epoch: t_total, source: Box::new(e) };
        let started = Instant::now();
        let s = self.solve().map_err(wrap)?;
        self.elapsed += started.elapsed();
        let final_eta =
            if self.config.algorithm == Algorithm::Adaptive { Some(self.eta(&s).map_err(wrap)?.iter().sum::<f64>().sqrt()) } else { None };
        let final_errors = self.record(t_total, &s, final_eta, true).map_err(wrap)?;
        let final_cond = self.history.last().and_then(|r| r.cond_scaled);
        info!("finished {} epochs in {:.1} s", t_total, self.elapsed.as_secs_f64());
        Ok(RunOutcome {
            space: self.space,
            c: s.c,
            history: self.history,
            adam: self.adam,
            final_errors,
            final_eta,
            final_cond,
            initial_eta,
            training_ms: self.elapsed.as_secs_f64() * 1e3,
        })
    }
}

/// Mesh of the configured problem's domain.
pub fn build_mesh(config: &RunConfig, problem: &dyn Problem) -> Result<Arc<Mesh>> {
    Ok(Arc::new(Mesh::structured(config.nx, config.nx, problem.domain())?))
}

/// Space with freshly initialized networks at `nodes`; network `m` is seeded
/// from the run seed and its node id.
pub fn build_space(config: &RunConfig, problem: &dyn Problem, mesh: &Arc<Mesh>, nodes: &[usize]) -> Result<EnrichmentSpace> {
    let mode = config.input_mode();
    let networks = nodes
        .iter()
        .map(|&i| {
            let mut net = MlpEnrichment::new(&config.dims, &config.scales, mode, mesh.node(i), mix_seed(config.seed, i as u64))?;
            if config.slope_init == SlopeInit::One {
                net.set_slopes(1.0, 1.0);
            }
            Ok(Enrichment::Network(net))
        })
        .collect::<Result<Vec<_>>>()?;
    attach_distance(EnrichmentSpace::new(mesh.clone(), nodes, networks)?, config, problem)
}

fn attach_distance(space: EnrichmentSpace, config: &RunConfig, problem: &dyn Problem) -> Result<EnrichmentSpace> {
    if config.input_mode() != InputMode::SpatialDistance {
        return Ok(space);
    }
    match (problem.quasi_distance(), problem.interface()) {
        (Some(d), Some(g)) => Ok(space.with_distance(d, g)),
        _ => Err(NefemError::MissingProblemData("quasi-distance")),
    }
}

/// Nodes enriched by a static policy.
pub fn policy_nodes(config: &RunConfig, problem: &dyn Problem, mesh: &Mesh) -> Result<Vec<usize>> {
    match config.policy {
        EnrichmentPolicy::None => Ok(Vec::new()),
        EnrichmentPolicy::AllInterior => Ok(mesh.interior_nodes()),
        EnrichmentPolicy::InterfaceCut => {
            let g = problem.interface().ok_or(NefemError::MissingProblemData("interface"))?;
            Ok(mesh.classify_interface(&g).cut_nodes.into_iter().filter(|&i| !mesh.is_boundary_node(i)).collect())
        }
        EnrichmentPolicy::EstimatorMarked => {
            Err(NefemError::InvalidConfig("policy: estimator-marked enrichment needs the adaptive algorithm".into()))
        }
    }
}

/// Plain training: every epoch solves without gradient tracking, then takes
/// one Adam step per network on the shortcut gradient.
pub fn run_nefem(config: &RunConfig, reference: Option<&ReferenceSolution>) -> Result<RunOutcome> {
    config.validate()?;
    if config.algorithm != Algorithm::Plain {
        return Err(NefemError::InvalidConfig("algorithm: run_nefem needs the plain algorithm".into()));
    }
    let problem = config.problem.build()?;
    let mesh = build_mesh(config, problem.as_ref())?;
    let nodes = policy_nodes(config, problem.as_ref(), &mesh)?;
    let space = build_space(config, problem.as_ref(), &mesh, &nodes)?;
    Trainer::new(config, problem.as_ref(), &mesh, space, reference)?.train(None, &[])
}

/// Adaptive training: enrich the vertices of the top `α₁` elements of the P1
/// estimator, then at trigger epochs train only networks touching the
/// Dörfler set; the rest are frozen with their Adam moments kept.
pub fn run_adaptive_nefem(config: &RunConfig, reference: Option<&ReferenceSolution>) -> Result<RunOutcome> {
    config.validate()?;
    if config.algorithm != Algorithm::Adaptive {
        return Err(NefemError::InvalidConfig("algorithm: run_adaptive_nefem needs the adaptive algorithm".into()));
    }
    let problem = config.problem.build()?;
    let mesh = build_mesh(config, problem.as_ref())?;

    let p1 = EnrichmentSpace::p1(mesh.clone());
    let mut initial = Trainer::new(config, problem.as_ref(), &mesh, p1, reference)?;
    let s = initial.solve()?;
    let eta_sq = initial.eta(&s)?;
    let marked = percentage_mark(&eta_sq, config.alpha1)?;
    let nodes = marked_interior_nodes(&mesh, &marked);
    info!("enriching {} of {} interior nodes", nodes.len(), mesh.interior_nodes().len());
    let space = build_space(config, problem.as_ref(), &mesh, &nodes)?;
    Trainer::new(config, problem.as_ref(), &mesh, space, reference)?.train(Some(eta_sq.iter().sum::<f64>().sqrt()), &marked)
}

/// Dispatches on the configured algorithm.
pub fn run(config: &RunConfig, reference: Option<&ReferenceSolution>) -> Result<RunOutcome> {
    match config.algorithm {
        Algorithm::Plain => run_nefem(config, reference),
        Algorithm::Adaptive => run_adaptive_nefem(config, reference),
    }
}

/// Assembles and solves on a given space and returns the coefficients and
/// errors, as the final step of a run does.
pub fn final_solve(
    config: &RunConfig,
    space: EnrichmentSpace,
    reference: Option<&ReferenceSolution>,
) -> Result<(Vec<f64>, Option<ErrorNorms>)> {
    let problem = config.problem.build()?;
    let mesh = space.mesh().clone();
    let mut tr = Trainer::new(config, problem.as_ref(), &mesh, space, reference)?;
    let s = tr.solve()?;
    let e = tr.errors(&s)?;
    Ok((s.c, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub config: RunConfig,
    pub problem: String,
    pub num_p1: usize,
    pub num_enriched: usize,
    pub num_dofs: usize,
    pub epochs: usize,
    pub final_loss: f64,
    pub final_errors: Option<ErrorNorms>,
    /// `|u|_{H¹}` of the exact solution, when known.
    pub exact_h1: Option<f64>,
    pub relative_h1: Option<f64>,
    pub final_eta: Option<f64>,
    pub initial_eta: Option<f64>,
    pub final_cond: Option<f64>,
    pub training_ms: f64,
}

impl RunSummary {
    pub fn new(config: &RunConfig, outcome: &RunOutcome) -> Result<Self> {
        let problem = config.problem.build()?;
        let mesh = outcome.space.mesh();
        let exact_h1 = if problem.exact(mesh.node(0), crate::mesh::Side::Outside).is_some() {
            let scheme = QuadratureScheme::new(mesh, config.quad_degree, problem.interface().as_ref())?;
            Some(exact_norms(problem.as_ref(), mesh, &scheme)?.h1)
        } else {
            None
        };
        let relative_h1 = match (exact_h1, outcome.final_errors) {
            (Some(u), Some(e)) if u > 0.0 => Some(e.h1 / u),
            _ => None,
        };
        Ok(Self {
            schema: SUMMARY_SCHEMA.into(),
            config: config.clone(),
            problem: problem.name().into(),
            num_p1: outcome.space.num_p1(),
            num_enriched: outcome.space.num_enriched(),
            num_dofs: outcome.space.num_dofs(),
            epochs: config.epochs,
            final_loss: outcome.history.last().map_or(f64::NAN, |r| r.loss),
            final_errors: outcome.final_errors,
            exact_h1,
            relative_h1,
            final_eta: outcome.final_eta,
            initial_eta: outcome.initial_eta,
            final_cond: outcome.final_cond,
            training_ms: outcome.training_ms,
        })
    }
}

/// Everything needed to restore a trained run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub enriched_nodes: Vec<usize>,
    pub networks: Vec<MlpEnrichment>,
    pub adam: Vec<AdamState>,
    pub history: TrainingHistory,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, space: &EnrichmentSpace, adam: &[AdamState], history: &TrainingHistory) -> Result<Self> {
        let networks = space
            .enrichments()
            .iter()
            .map(|e| e.as_network().cloned().ok_or_else(|| NefemError::Format("only network enrichments can be saved".into())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            format: RUN_FORMAT.into(),
            version: RUN_VERSION,
            config: config.clone(),
            enriched_nodes: space.enriched_nodes().to_vec(),
            networks,
            adam: adam.to_vec(),
            history: history.clone(),
        })
    }

    /// Rebuilds the enrichment space with the saved networks.
    pub fn space(&self) -> Result<EnrichmentSpace> {
        let problem = self.config.problem.build()?;
        let mesh = build_mesh(&self.config, problem.as_ref())?;
        let e = self.networks.iter().cloned().map(Enrichment::Network).collect();
        attach_distance(EnrichmentSpace::new(mesh, &self.enriched_nodes, e)?, &self.config, problem.as_ref())
    }
}

pub fn save_run(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_atomic(path, serde_json::to_string(checkpoint)?.as_bytes())
}

pub fn load_run(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let c: Checkpoint = serde_json::from_str(&text).map_err(|e| NefemError::Format(format!("{}: {e}", path.display())))?;
    if c.format != RUN_FORMAT || c.version != RUN_VERSION {
        return Err(NefemError::Format(format!("expected {RUN_FORMAT} v{RUN_VERSION}, found {} v{}", c.format, c.version)));
    }
    if c.networks.len() != c.enriched_nodes.len() || c.adam.len() != c.networks.len() {
        return Err(NefemError::Format("network, node and optimizer counts differ".into()));
    }
    Ok(c)
}

/// Writes through a sibling temporary file so readers never see partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub checked: usize,
    /// `max |g − g_fd|`.
    pub max_deviation: f64,
    /// `max |g_fd|`.
    pub max_gradient: f64,
    /// `max |g − g_fd| / max |g_fd|`.
    pub relative: f64,
}

/// Compares the shortcut parameter gradient with central differences of the
/// full assemble-and-solve loss on a 4×4 mesh with networks at two interior
/// nodes, every parameter perturbed by `step`.
pub fn gradient_check(seed: u64, step: f64, dims: [usize; 4], scales: [u32; 2]) -> Result<GradCheckReport> {
    let problem = Example1::paper();
    let mesh = Arc::new(Mesh::unit_square(4)?);
    let config = RunConfig { dims, scales, seed, nx: 4, reference_nx: 4, ..RunConfig::example1() };
    config.validate()?;
    let mut space = build_space(&config, &problem, &mesh, &[6, 12])?;
    let scheme = QuadratureScheme::new(&mesh, config.quad_degree, None)?;
    let solver = SolverConfig::default();
    let pipeline = |space: &mut EnrichmentSpace| -> Result<f64> {
        space.refresh_cache();
        let (sys, _) = assemble_with_cache(space, &problem, &scheme)?;
        let red = apply_dirichlet(&sys, &mesh, &problem)?;
        Ok(ritz_loss(&red, &solve_spd(&red.matrix, &red.rhs, &solver)?.x))
    };
    space.refresh_cache();
    let (sys, cache) = assemble_with_cache(&space, &problem, &scheme)?;
    let red = apply_dirichlet(&sys, &mesh, &problem)?;
    let c = red.expand(&solve_spd(&red.matrix, &red.rhs, &solver)?.x);
    let g = loss_theta_gradient(&space, &red, &cache, &c, None)?;

    let (mut dev, mut big, mut checked) = (0.0f64, 0.0f64, 0);
    for m in 0..space.num_enriched() {
        for k in 0..g.per_network[m].len() {
            let orig = space.enrichment(m).as_network().expect("network").params()[k];
            let set = |s: &mut EnrichmentSpace, v: f64| s.enrichment_mut(m).as_network_mut().expect("network").params_mut()[k] = v;
            set(&mut space, orig + step);
            let lp = pipeline(&mut space)?;
            set(&mut space, orig - step);
            let lm = pipeline(&mut space)?;
            set(&mut space, orig);
            let fd = (lp - lm) / (2.0 * step);
            dev = dev.max((fd - g.per_network[m][k]).abs());
            big = big.max(fd.abs());
            checked += 1;
        }
    }
    Ok(GradCheckReport { seed, checked, max_deviation: dev, max_gradient: big, relative: dev / big })
}

/// Least-squares slope of `log e` against `log h`.
pub fn loglog_slope(h: &[f64], e: &[f64]) -> f64 {
    let n = h.len() as f64;
    let (x, y): (Vec<f64>, Vec<f64>) = h.iter().zip(e).map(|(a, b)| (a.ln(), b.ln())).unzip();
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
