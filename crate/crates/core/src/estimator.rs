//! Residual a posteriori indicators and element marking.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{ElementPoints, QuadratureScheme};
use crate::enrichspace::EnrichmentSpace;
use crate::error::{NefemError, Result};
use crate::mesh::{barycentric_gradients, Mesh, Side};
use crate::problems::Problem;
use crate::quadrature::edge_rule;

pub const ESTIMATOR_SCHEMA: &str = "nefem-estimator v1";

/// Per-element squared indicators `η_K²` split into the interior residual and
/// the edge jump contributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorField {
    pub eta_sq: Vec<f64>,
    pub interior: Vec<f64>,
    pub edge: Vec<f64>,
}

impl EstimatorField {
    pub fn len(&self) -> usize {
        self.eta_sq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta_sq.is_empty()
    }

    pub fn total_sq(&self) -> f64 {
        self.eta_sq.iter().sum()
    }

    /// Global `η`.
    pub fn eta(&self) -> f64 {
        self.total_sq().sqrt()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# {ESTIMATOR_SCHEMA}")?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["element", "eta_sq", "interior", "edge"])?;
        for t in 0..self.len() {
            out.write_record([t.to_string(), fmt(self.eta_sq[t]), fmt(self.interior[t]), fmt(self.edge[t])])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn fmt(x: f64) -> String {
    format!("{x:e}")
}

/// `η_K² = h_K²‖f + ∇a·∇u_h + aΔu_h‖²_K + ½ Σ_{l ⊂ ∂K interior} h_l ‖[a ∂_n u_h]‖²_l`
/// with `h_K` the longest edge of `K`.
pub fn estimate(
    space: &EnrichmentSpace,
    problem: &dyn Problem,
    c: &[f64],
    scheme: &QuadratureScheme,
    edge_points: usize,
) -> Result<EstimatorField> {
    if c.len() != space.num_dofs() {
        return Err(NefemError::ShapeMismatch(format!("{} coefficients for {} dofs", c.len(), space.num_dofs())));
    }
    if !space.is_fresh() {
        return Err(NefemError::StaleCache { cache: 0, params: space.version() });
    }
    let mesh = space.mesh();
    let interior =
        (0..mesh.num_elements()).into_par_iter().map(|t| element_residual(space, problem, c, scheme, t)).collect::<Result<Vec<f64>>>()?;
    let edges = mesh.edges();
    let jumps = (0..edges.len())
        .into_par_iter()
        .map(|e| if edges[e].is_interior() { edge_jump(space, problem, c, e, edge_points) } else { Ok(0.0) })
        .collect::<Result<Vec<f64>>>()?;

    let mut edge = vec![0.0; mesh.num_elements()];
    for (e, j) in jumps.iter().enumerate() {
        let share = 0.5 * mesh.edge_length(e) * j;
        for t in edges[e].elements.iter().flatten() {
            edge[*t] += share;
        }
    }
    let eta_sq = interior.iter().zip(&edge).map(|(a, b)| a + b).collect();
    Ok(EstimatorField { eta_sq, interior, edge })
}

fn element_residual(space: &EnrichmentSpace, problem: &dyn Problem, c: &[f64], scheme: &QuadratureScheme, t: usize) -> Result<f64> {
    let mesh = space.mesh();
    let gl = barycentric_gradients(&mesh.vertices(t));
    let mut pts = ElementPoints::default();
    scheme.fill(mesh, t, &mut pts);
    let mut sum = 0.0;
    for q in 0..pts.len() {
        let x = pts.x[q];
        let ga = problem.coefficient_gradient(x, pts.side[q]).ok_or(NefemError::MissingProblemData("coefficient gradient"))?;
        let (_, g) = space.eval_basis_with(t, x, pts.lambda[q], &gl, None).interpolate(c);
        let lap: f64 = space.eval_basis_laplacian(t, x)?.iter().map(|(dof, l)| c[*dof] * l).sum();
        let r = problem.source(x, pts.side[q]) + ga[0] * g[0] + ga[1] * g[1] + problem.coefficient(x, pts.side[q]) * lap;
        sum += pts.w[q] * r * r;
    }
    if !sum.is_finite() {
        return Err(NefemError::NonFiniteIntegrand(t));
    }
    let h = mesh.element_diameter(t);
    Ok(h * h * sum)
}

/// `‖[a ∂_n u_h]‖²` on interior edge `e`, from the one-sided traces.
fn edge_jump(space: &EnrichmentSpace, problem: &dyn Problem, c: &[f64], e: usize, order: usize) -> Result<f64> {
    let mesh = space.mesh();
    let edge = &mesh.edges()[e];
    let (a, b) = (mesh.node(edge.nodes[0]), mesh.node(edge.nodes[1]));
    let len = mesh.edge_length(e);
    let n = [(b[1] - a[1]) / len, -(b[0] - a[0]) / len];
    let (t0, t1) = match edge.elements {
        [Some(t0), Some(t1)] => (t0, t1),
        _ => return Ok(0.0),
    };
    let (g0, g1) = (barycentric_gradients(&mesh.vertices(t0)), barycentric_gradients(&mesh.vertices(t1)));
    let rule = edge_rule(order, a, b)?;
    let mut sum = 0.0;
    for (x, w) in rule.points.iter().zip(&rule.weights) {
        let (_, d0) = space.eval_basis_with(t0, *x, mesh.barycentric(t0, *x), &g0, None).interpolate(c);
        let (_, d1) = space.eval_basis_with(t1, *x, mesh.barycentric(t1, *x), &g1, None).interpolate(c);
        let j = problem.coefficient(*x, Side::Outside) * ((d0[0] - d1[0]) * n[0] + (d0[1] - d1[1]) * n[1]);
        sum += w * j * j;
    }
    Ok(sum)
}

/// Element ids sorted by decreasing `η_K²`, ties by increasing id.
fn ranked(eta_sq: &[f64], candidates: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut ids: Vec<usize> = candidates.collect();
    ids.sort_by(|&i, &j| eta_sq[j].total_cmp(&eta_sq[i]).then(i.cmp(&j)));
    ids
}

/// The `⌈α₁|T|⌉` elements with the largest indicators, returned in increasing id order.
pub fn percentage_mark(eta_sq: &[f64], alpha1: f64) -> Result<Vec<usize>> {
    if !(alpha1 > 0.0 && alpha1 <= 1.0) {
        return Err(NefemError::InvalidConfig(format!("alpha1 must lie in (0, 1], got {alpha1}")));
    }
    let n = eta_sq.len();
    // Guard against 0.3 * 10 = 3.0000000000000004 rounding up to 4.
    let k = ((alpha1 * n as f64 - 1e-9).ceil() as usize).clamp(n.min(1), n);
    let mut out = ranked(eta_sq, 0..n);
    out.truncate(k);
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoerflerMark {
    /// Selected elements in increasing id order.
    pub elements: Vec<usize>,
    /// False when the candidates cannot reach the threshold and all were taken.
    pub reached: bool,
}

/// Smallest set of candidates whose indicators sum to at least
/// `α₂ Σ_{all K} η_K²`. Without `candidates` every element is eligible.
pub fn doerfler_mark(eta_sq: &[f64], alpha2: f64, candidates: Option<&[usize]>) -> Result<DoerflerMark> {
    if !(alpha2 > 0.0 && alpha2 < 1.0) {
        return Err(NefemError::InvalidConfig(format!("alpha2 must lie in (0, 1), got {alpha2}")));
    }
    let threshold = alpha2 * eta_sq.iter().sum::<f64>();
    let order = match candidates {
        Some(c) => ranked(eta_sq, c.iter().copied()),
        None => ranked(eta_sq, 0..eta_sq.len()),
    };
    let mut sum = 0.0;
    let mut take = order.len();
    let mut reached = false;
    for (k, t) in order.iter().enumerate() {
        sum += eta_sq[*t];
        if sum >= threshold {
            take = k + 1;
            reached = true;
            break;
        }
    }
    let mut elements = order[..take].to_vec();
    elements.sort_unstable();
    Ok(DoerflerMark { elements, reached })
}

/// Interior vertices of the given elements, sorted and deduplicated.
pub fn marked_interior_nodes(mesh: &Mesh, elements: &[usize]) -> Vec<usize> {
    let mut nodes: Vec<usize> = elements.iter().flat_map(|&t| mesh.triangles()[t]).filter(|&i| !mesh.is_boundary_node(i)).collect();
    nodes.sort_unstable();
    nodes.dedup();
    nodes
}
