//! Stiffness/load assembly on the enriched space, Dirichlet reduction, the
//! Ritz loss and its parameter gradient with the coefficients held fixed.

use rayon::prelude::*;

use crate::enrichspace::{BasisEval, EnrichmentSpace, MAX_LOCAL};
use crate::error::{NefemError, Result};
use crate::linsolve::CsrMatrix;
use crate::mesh::{barycentric_gradients, ElementSide, InterfaceGeometry, Mesh, Point, Side};
use crate::neuralnet::GradSample;
use crate::problems::Problem;
use crate::quadrature::{cut_element_rule, reference_rule, CutRule, QuadratureRule};

const CHUNK: usize = 2048;

/// Relative residual above which coefficients are not accepted as a solve.
pub const GRADIENT_RESIDUAL_LIMIT: f64 = 1e-8;

/// Per-element quadrature: the reference rule, or an interface-aligned rule
/// on cut elements.
#[derive(Debug, Clone)]
pub struct QuadratureScheme {
    rule: &'static QuadratureRule,
    sides: Vec<Side>,
    cut: Vec<Option<CutRule>>,
    grazing: usize,
}

/// Quadrature points of one element.
#[derive(Debug, Clone, Default)]
pub struct ElementPoints {
    pub x: Vec<Point>,
    pub lambda: Vec<[f64; 3]>,
    pub w: Vec<f64>,
    pub side: Vec<Side>,
}

impl ElementPoints {
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    fn clear(&mut self) {
        self.x.clear();
        self.lambda.clear();
        self.w.clear();
        self.side.clear();
    }
}

impl QuadratureScheme {
    pub fn new(mesh: &Mesh, degree: usize, geometry: Option<&InterfaceGeometry>) -> Result<Self> {
        let rule = reference_rule(degree)?;
        let ne = mesh.num_elements();
        let mut sides = vec![Side::Outside; ne];
        let mut cut = vec![None; ne];
        let mut grazing = 0;
        if let Some(g) = geometry {
            let cls = mesh.classify_interface(g);
            for t in 0..ne {
                match cls.tags[t] {
                    ElementSide::Inside => sides[t] = Side::Inside,
                    ElementSide::Outside => sides[t] = Side::Outside,
                    ElementSide::Cut => {
                        let r = cut_element_rule(t, &mesh.vertices(t), g, rule)?;
                        if r.grazing {
                            grazing += 1;
                            log::debug!("element {t} grazes the interface; integrated as uncut");
                        }
                        cut[t] = Some(r);
                    }
                }
            }
        }
        Ok(Self { rule, sides, cut, grazing })
    }

    pub fn degree(&self) -> usize {
        self.rule.degree
    }

    pub fn grazing_elements(&self) -> usize {
        self.grazing
    }

    pub fn is_cut(&self, t: usize) -> bool {
        self.cut[t].is_some()
    }

    pub fn fill(&self, mesh: &Mesh, t: usize, out: &mut ElementPoints) {
        out.clear();
        let v = mesh.vertices(t);
        if let Some(r) = &self.cut[t] {
            for ((x, w), s) in r.points.iter().zip(&r.weights).zip(&r.sides) {
                out.x.push(*x);
                out.lambda.push(mesh.barycentric(t, *x));
                out.w.push(*w);
                out.side.push(*s);
            }
            return;
        }
        let area = mesh.signed_area(t);
        for (l, w) in self.rule.points.iter().zip(&self.rule.weights) {
            out.x.push([l[0] * v[0][0] + l[1] * v[1][0] + l[2] * v[2][0], l[0] * v[0][1] + l[1] * v[1][1] + l[2] * v[2][1]]);
            out.lambda.push(*l);
            out.w.push(w * area);
            out.side.push(self.sides[t]);
        }
    }
}

/// Basis data stored at one quadrature point for reuse after the solve.
#[derive(Debug, Clone, Copy)]
pub struct PointRecord {
    pub x: Point,
    pub w: f64,
    pub a: f64,
    pub f: f64,
    pub side: Side,
    pub basis: BasisEval,
}

/// Quadrature-point records of every element, valid for one space version.
#[derive(Debug, Clone)]
pub struct PointCache {
    offsets: Vec<usize>,
    points: Vec<PointRecord>,
    version: u64,
}

impl PointCache {
    pub fn element(&self, t: usize) -> &[PointRecord] {
        &self.points[self.offsets[t]..self.offsets[t + 1]]
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }
}

#[derive(Debug, Clone)]
pub struct AssembledSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    pub num_p1: usize,
}

/// The system restricted to free DoFs, with the Dirichlet lifting moved to the
/// right-hand side.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    pub free: Vec<usize>,
    /// Full-length vector holding the prescribed values (zero on free DoFs).
    pub lifting: Vec<f64>,
}

impl ReducedSystem {
    pub fn expand(&self, c_free: &[f64]) -> Vec<f64> {
        let mut c = self.lifting.clone();
        for (k, &i) in self.free.iter().enumerate() {
            c[i] = c_free[k];
        }
        c
    }

    pub fn restrict(&self, c: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&i| c[i]).collect()
    }
}

fn sparsity(space: &EnrichmentSpace) -> Vec<Vec<usize>> {
    let mesh = space.mesh();
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); space.num_dofs()];
    for t in 0..mesh.num_elements() {
        let dofs = element_dofs(space, t);
        for &i in &dofs {
            rows[i].extend_from_slice(&dofs);
        }
    }
    for r in &mut rows {
        r.sort_unstable();
        r.dedup();
    }
    rows
}

fn element_dofs(space: &EnrichmentSpace, t: usize) -> Vec<usize> {
    let mut d: Vec<usize> = space.mesh().triangles()[t].to_vec();
    d.extend(space.element_enrichments(t).map(|(_, m)| space.num_p1() + m));
    d
}

struct Local {
    dofs: [usize; MAX_LOCAL],
    n: usize,
    k: [[f64; MAX_LOCAL]; MAX_LOCAL],
    f: [f64; MAX_LOCAL],
    records: Vec<PointRecord>,
}

fn element_contribution(
    space: &EnrichmentSpace,
    problem: &dyn Problem,
    scheme: &QuadratureScheme,
    t: usize,
    pts: &mut ElementPoints,
    keep: bool,
) -> Result<Local> {
    let mesh = space.mesh();
    scheme.fill(mesh, t, pts);
    let gl = barycentric_gradients(&mesh.vertices(t));
    let mut local = Local { dofs: [0; MAX_LOCAL], n: 0, k: [[0.0; MAX_LOCAL]; MAX_LOCAL], f: [0.0; MAX_LOCAL], records: Vec::new() };
    if keep {
        local.records.reserve(pts.len());
    }
    for q in 0..pts.len() {
        let (x, side, w) = (pts.x[q], pts.side[q], pts.w[q]);
        let b = space.eval_basis_with(t, x, pts.lambda[q], &gl, Some(side));
        let a = problem.coefficient(x, side);
        let f = problem.source(x, side);
        if !a.is_finite() || !f.is_finite() {
            return Err(NefemError::NonFiniteIntegrand(t));
        }
        let n = b.len();
        if q == 0 {
            local.n = n;
            for i in 0..n {
                local.dofs[i] = b.dof(i);
            }
        }
        for i in 0..n {
            let gi = b.grad(i);
            let vi = b.value(i);
            if !vi.is_finite() || !gi[0].is_finite() || !gi[1].is_finite() {
                return Err(NefemError::NonFiniteIntegrand(t));
            }
            local.f[i] += w * f * vi;
            for j in i..n {
                let gj = b.grad(j);
                local.k[i][j] += w * a * (gi[0] * gj[0] + gi[1] * gj[1]);
            }
        }
        if keep {
            local.records.push(PointRecord { x, w, a, f, side, basis: b });
        }
    }
    for i in 0..local.n {
        for j in 0..i {
            local.k[i][j] = local.k[j][i];
        }
    }
    Ok(local)
}

fn assemble_impl(
    space: &EnrichmentSpace,
    problem: &dyn Problem,
    scheme: &QuadratureScheme,
    keep: bool,
) -> Result<(AssembledSystem, Option<PointCache>)> {
    if !space.is_fresh() {
        return Err(NefemError::StaleCache { cache: 0, params: space.version() });
    }
    let mesh = space.mesh();
    let ne = mesh.num_elements();
    let mut matrix = CsrMatrix::from_pattern(&sparsity(space));
    let mut rhs = vec![0.0; space.num_dofs()];
    let mut offsets = Vec::with_capacity(ne + 1);
    offsets.push(0);
    let mut points = Vec::new();
    for start in (0..ne).step_by(CHUNK) {
        let end = (start + CHUNK).min(ne);
        let locals: Vec<Local> = (start..end)
            .into_par_iter()
            .map_init(ElementPoints::default, |pts, t| element_contribution(space, problem, scheme, t, pts, keep))
            .collect::<Result<_>>()?;
        for l in locals {
            for i in 0..l.n {
                rhs[l.dofs[i]] += l.f[i];
                for j in 0..l.n {
                    matrix.add(l.dofs[i], l.dofs[j], l.k[i][j]);
                }
            }
            if keep {
                points.extend_from_slice(&l.records);
                offsets.push(points.len());
            }
        }
    }
    let cache = keep.then(|| PointCache { offsets, points, version: space.version() });
    Ok((AssembledSystem { matrix, rhs, num_p1: space.num_p1() }, cache))
}

/// Assembles `A` and `F` over all DoFs.
pub fn assemble(space: &EnrichmentSpace, problem: &dyn Problem, scheme: &QuadratureScheme) -> Result<AssembledSystem> {
    Ok(assemble_impl(space, problem, scheme, false)?.0)
}

/// As [`assemble`], also keeping per-point basis data for the gradient pass.
pub fn assemble_with_cache(
    space: &EnrichmentSpace,
    problem: &dyn Problem,
    scheme: &QuadratureScheme,
) -> Result<(AssembledSystem, PointCache)> {
    let (s, c) = assemble_impl(space, problem, scheme, true)?;
    Ok((s, c.expect("cache requested")))
}

/// Eliminates the prescribed `(dof, value)` pairs. Only P1 DoFs may be constrained.
pub fn apply_constraints(system: &AssembledSystem, constraints: &[(usize, f64)]) -> Result<ReducedSystem> {
    let n = system.rhs.len();
    let mut fixed = vec![false; n];
    let mut lifting = vec![0.0; n];
    for &(i, v) in constraints {
        if i >= system.num_p1 {
            return Err(NefemError::ConstrainedEnrichment(i));
        }
        fixed[i] = true;
        lifting[i] = v;
    }
    let free: Vec<usize> = (0..n).filter(|&i| !fixed[i]).collect();
    let ag = system.matrix.mul(&lifting);
    let rhs = free.iter().map(|&i| system.rhs[i] - ag[i]).collect();
    Ok(ReducedSystem { matrix: system.matrix.submatrix(&free), rhs, free, lifting })
}

/// Fixes every boundary node's P1 DoF to the problem's Dirichlet data.
pub fn apply_dirichlet(system: &AssembledSystem, mesh: &Mesh, problem: &dyn Problem) -> Result<ReducedSystem> {
    let constraints: Vec<(usize, f64)> = mesh.boundary_node_ids().into_iter().map(|i| (i, problem.dirichlet(mesh.node(i)))).collect();
    apply_constraints(system, &constraints)
}

/// `½ cᵀAc − cᵀF` on the reduced system.
pub fn ritz_loss(system: &ReducedSystem, c_free: &[f64]) -> f64 {
    let ac = system.matrix.mul(c_free);
    let quad: f64 = c_free.iter().zip(&ac).map(|(a, b)| a * b).sum();
    let lin: f64 = c_free.iter().zip(&system.rhs).map(|(a, b)| a * b).sum();
    0.5 * quad - lin
}

/// Gradient of the Ritz loss with respect to each network's parameters.
/// Non-network enrichments get empty vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaGradient {
    pub per_network: Vec<Vec<f64>>,
}

impl ThetaGradient {
    pub fn flatten(&self) -> Vec<f64> {
        self.per_network.iter().flatten().copied().collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.per_network.iter().flatten().fold(0.0, |a, g| a.max(g.abs()))
    }
}

/// Shortcut parameter gradient with `c` held fixed:
/// `Σ_q w_q [a ∇u_h · ∂θ∇u_h − f ∂θ u_h]`, including the dependence of the
/// nodal interpolant on the parameters. `c` is the full coefficient vector;
/// `mask[m] == false` leaves network `m`'s gradient at exactly zero.
pub fn loss_theta_gradient(
    space: &EnrichmentSpace,
    reduced: &ReducedSystem,
    cache: &PointCache,
    c: &[f64],
    mask: Option<&[bool]>,
) -> Result<ThetaGradient> {
    if cache.version != space.version() || !space.is_fresh() {
        return Err(NefemError::StaleCache { cache: cache.version, params: space.version() });
    }
    let c_free = reduced.restrict(c);
    let res = crate::linsolve::relative_residual(&reduced.matrix, &c_free, &reduced.rhs);
    let scale = reduced.rhs.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale > 0.0 && !(res <= GRADIENT_RESIDUAL_LIMIT) {
        return Err(NefemError::UnconvergedCoefficients(res));
    }

    let mesh = space.mesh();
    let n1 = space.num_p1();
    let nm = space.num_enriched();
    let active = |m: usize| mask.is_none_or(|mk| mk[m]) && space.enrichment(m).as_network().is_some();
    let mut samples: Vec<Vec<GradSample>> = vec![Vec::new(); nm];
    let mut vertex: Vec<Vec<f64>> = (0..nm).map(|m| vec![0.0; space.patch_nodes(m).len()]).collect();

    for t in 0..mesh.num_elements() {
        if !space.has_enrichment(t) {
            continue;
        }
        let tri = mesh.triangles()[t];
        for p in cache.element(t) {
            let b = &p.basis;
            let (_, gu) = b.interpolate(c);
            let g = [p.w * p.a * gu[0], p.w * p.a * gu[1]];
            let s = p.w * p.f;
            for term in b.enrichment_terms() {
                let m = term.m;
                if !active(m) {
                    continue;
                }
                let cm = c[n1 + m];
                if cm == 0.0 {
                    continue;
                }
                let la = b.lambda[term.local];
                let gla = b.grad_lambda[term.local];
                let g_dot_gla = g[0] * gla[0] + g[1] * gla[1];
                samples[m].push(GradSample {
                    x: p.x,
                    distance: space.distance_at(m, p.x, p.side),
                    w_value: cm * (g_dot_gla - s * la),
                    w_grad: [cm * la * g[0], cm * la * g[1]],
                });
                let pn = space.patch_nodes(m);
                for (k, &node) in tri.iter().enumerate() {
                    let lb = b.lambda[k];
                    let glb = b.grad_lambda[k];
                    let pos = pn.binary_search(&node).expect("element vertex in patch");
                    vertex[m][pos] += cm * (-g_dot_gla * lb - la * (g[0] * glb[0] + g[1] * glb[1]) + s * la * lb);
                }
            }
        }
    }

    let per_network: Vec<Vec<f64>> = (0..nm)
        .into_par_iter()
        .map(|m| {
            let Some(net) = space.enrichment(m).as_network() else {
                return Vec::new();
            };
            let mut grad = vec![0.0; net.num_params()];
            if !active(m) {
                return grad;
            }
            net.accumulate_param_gradient(&samples[m], &mut grad);
            let vs: Vec<GradSample> = space
                .patch_nodes(m)
                .iter()
                .zip(&vertex[m])
                .map(|(&node, &wv)| {
                    let x = mesh.node(node);
                    GradSample { x, distance: space.distance_at(m, x, space.side_of(x)), w_value: wv, w_grad: [0.0; 2] }
                })
                .collect();
            net.accumulate_param_gradient(&vs, &mut grad);
            grad
        })
        .collect();
    Ok(ThetaGradient { per_network })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enrichspace::{AnalyticEnrichment, Enrichment};
    use crate::linsolve::{solve_spd, SolverConfig};
    use crate::mesh::Rect;
    use crate::neuralnet::{InputMode, MlpEnrichment};
    use crate::problems::{CustomProblem, Example1};
    use std::sync::Arc;

    fn constant_problem(a: f64, f: f64) -> CustomProblem {
        CustomProblem::new(Rect::UNIT, move |_| a, move |_| f)
    }

    fn net_space(mesh: Arc<Mesh>, nodes: &[usize], seed: u64) -> EnrichmentSpace {
        let nets = nodes
            .iter()
            .map(|&i| {
                let mut n = MlpEnrichment::new(&[2, 5, 5, 1], &[3, 2], InputMode::Spatial, mesh.node(i), seed + i as u64).unwrap();
                n.set_slopes(0.5, 0.7);
                Enrichment::Network(n)
            })
            .collect();
        EnrichmentSpace::new(mesh, nodes, nets).unwrap()
    }

    #[test]
    fn single_cell_rows_sum_to_zero() {
        let mesh = Arc::new(Mesh::unit_square(1).unwrap());
        let space = EnrichmentSpace::p1(mesh.clone());
        let scheme = QuadratureScheme::new(&mesh, 2, None).unwrap();
        let sys = assemble(&space, &constant_problem(1.0, 0.0), &scheme).unwrap();
        for i in 0..4 {
            let s: f64 = (0..4).map(|j| sys.matrix.get(i, j)).sum();
            assert!(s.abs() < 1e-14);
        }
    }

    #[test]
    fn load_vector_is_patch_area_over_three() {
        let mesh = Arc::new(Mesh::unit_square(4).unwrap());
        let space = EnrichmentSpace::p1(mesh.clone());
        let scheme = QuadratureScheme::new(&mesh, 2, None).unwrap();
        let sys = assemble(&space, &constant_problem(1.0, 1.0), &scheme).unwrap();
        for i in 0..mesh.num_nodes() {
            let area: f64 = mesh.node_patch(i).iter().map(|&t| mesh.signed_area(t)).sum();
            assert!((sys.rhs[i] - area / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn enriched_matrix_symmetric_with_zero_row_sums() {
        let mesh = Arc::new(Mesh::unit_square(4).unwrap());
        let space = net_space(mesh.clone(), &mesh.interior_nodes(), 1);
        let scheme = QuadratureScheme::new(&mesh, 20, None).unwrap();
        let p = Example1::paper();
        let sys = assemble(&space, &p, &scheme).unwrap();
        assert!(sys.matrix.max_asymmetry() < 1e-12);
        for i in 0..sys.matrix.nrows() {
            // Hat functions sum to one, so only the P1 columns cancel.
            let (cols, v) = sys.matrix.row(i);
            let sum: f64 = cols.iter().zip(v).filter(|(j, _)| **j < sys.num_p1).map(|(_, x)| x).sum();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(sum.abs() <= 1e-10 * norm, "row {i}: {sum}");
        }
    }

    #[test]
    fn matches_naive_double_loop() {
        let mesh = Arc::new(Mesh::unit_square(3).unwrap());
        let space = net_space(mesh.clone(), &[5, 6, 9], 4);
        let scheme = QuadratureScheme::new(&mesh, 10, None).unwrap();
        let p = Example1::new(0.3, 1.5).unwrap();
        let sys = assemble(&space, &p, &scheme).unwrap();
        // Oracle: for every pair of global DoFs integrate over every element via eval_basis.
        let n = space.num_dofs();
        let rule = reference_rule(10).unwrap();
        let mut dense = vec![vec![0.0; n]; n];
        for t in 0..mesh.num_elements() {
            let mr = crate::quadrature::map_rule(rule, &mesh.vertices(t)).unwrap();
            for (x, w) in mr.points.iter().zip(&mr.weights) {
                let b = space.eval_basis(t, *x, None).unwrap();
                let a = p.coefficient(*x, Side::Outside);
                for i in 0..n {
                    for j in 0..n {
                        let gi = (0..b.len()).find(|&k| b.dof(k) == i).map(|k| b.grad(k));
                        let gj = (0..b.len()).find(|&k| b.dof(k) == j).map(|k| b.grad(k));
                        if let (Some(gi), Some(gj)) = (gi, gj) {
                            dense[i][j] += w * a * (gi[0] * gj[0] + gi[1] * gj[1]);
                        }
                    }
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                assert!((dense[i][j] - sys.matrix.get(i, j)).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn coefficient_scaling_doubles_matrix() {
        let mesh = Arc::new(Mesh::unit_square(3).unwrap());
        let space = net_space(mesh.clone(), &[5, 6], 2);
        let scheme = QuadratureScheme::new(&mesh, 8, None).unwrap();
        let s1 = assemble(&space, &constant_problem(1.3, 0.7), &scheme).unwrap();
        let s2 = assemble(&space, &constant_problem(2.6, 0.7), &scheme).unwrap();
        for i in 0..s1.matrix.nrows() {
            for j in 0..s1.matrix.nrows() {
                assert_eq!(2.0 * s1.matrix.get(i, j), s2.matrix.get(i, j));
            }
        }
        assert_eq!(s1.rhs, s2.rhs);
    }

    #[test]
    fn linear_stub_enrichment_block_vanishes() {
        let mesh = Arc::new(Mesh::unit_square(4).unwrap());
        let nodes = mesh.interior_nodes();
        let e = nodes.iter().map(|_| Enrichment::Analytic(AnalyticEnrichment::linear(0.2, [1.0, 0.5]))).collect();
        let space = EnrichmentSpace::new(mesh.clone(), &nodes, e).unwrap();
        let scheme = QuadratureScheme::new(&mesh, 4, None).unwrap();
        let sys = assemble(&space, &constant_problem(1.0, 1.0), &scheme).unwrap();
        let n1 = space.num_p1();
        for i in n1..space.num_dofs() {
            let (c, v) = sys.matrix.row(i);
            for (&j, &a) in c.iter().zip(v) {
                assert!(a.abs() <= 1e-10, "({i},{j}) = {a}");
            }
        }
    }

    #[test]
    fn enrichment_constraint_rejected() {
        let mesh = Arc::new(Mesh::unit_square(2).unwrap());
        let space = net_space(mesh.clone(), &[4], 0);
        let scheme = QuadratureScheme::new(&mesh, 4, None).unwrap();
        let sys = assemble(&space, &constant_problem(1.0, 1.0), &scheme).unwrap();
        assert!(matches!(apply_constraints(&sys, &[(9, 0.0)]), Err(NefemError::ConstrainedEnrichment(9))));
    }

    #[test]
    fn linear_solution_reproduced() {
        let mesh = Arc::new(Mesh::unit_square(5).unwrap());
        let space = EnrichmentSpace::p1(mesh.clone());
        let scheme = QuadratureScheme::new(&mesh, 2, None).unwrap();
        let p = constant_problem(1.0, 0.0).with_dirichlet(|x| 1.0 + 2.0 * x[0] - 3.0 * x[1]);
        let sys = assemble(&space, &p, &scheme).unwrap();
        let red = apply_dirichlet(&sys, &mesh, &p).unwrap();
        let sol = solve_spd(&red.matrix, &red.rhs, &SolverConfig::default()).unwrap();
        let c = red.expand(&sol.x);
        for (i, x) in mesh.nodes().iter().enumerate() {
            assert!((c[i] - (1.0 + 2.0 * x[0] - 3.0 * x[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn ritz_loss_identities() {
        let red = ReducedSystem {
            matrix: CsrMatrix::from_dense(&[vec![2.0, 0.0], vec![0.0, 4.0]]),
            rhs: vec![2.0, 4.0],
            free: vec![0, 1],
            lifting: vec![0.0, 0.0],
        };
        assert_eq!(ritz_loss(&red, &[0.0, 0.0]), 0.0);
        assert_eq!(ritz_loss(&red, &[1.0, 1.0]), -3.0);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        for _ in 0..100 {
            let d: [f64; 2] = [rand::Rng::random_range(&mut rng, -1.0..1.0), rand::Rng::random_range(&mut rng, -1.0..1.0)];
            assert!(ritz_loss(&red, &[1.0, 1.0]) <= ritz_loss(&red, &[1.0 + d[0], 1.0 + d[1]]));
        }
    }

    fn pipeline_loss(space: &mut EnrichmentSpace, p: &dyn Problem, scheme: &QuadratureScheme) -> f64 {
        space.refresh_cache();
        let sys = assemble(space, p, scheme).unwrap();
        let red = apply_dirichlet(&sys, space.mesh(), p).unwrap();
        let sol = solve_spd(&red.matrix, &red.rhs, &SolverConfig::default()).unwrap();
        ritz_loss(&red, &sol.x)
    }

    #[test]
    fn shortcut_gradient_matches_full_pipeline() {
        let mesh = Arc::new(Mesh::unit_square(4).unwrap());
        let mut space = net_space(mesh.clone(), &[6, 12], 9);
        let p = Example1::paper();
        let scheme = QuadratureScheme::new(&mesh, 20, None).unwrap();
        let (sys, cache) = assemble_with_cache(&space, &p, &scheme).unwrap();
        let red = apply_dirichlet(&sys, &mesh, &p).unwrap();
        let sol = solve_spd(&red.matrix, &red.rhs, &SolverConfig::default()).unwrap();
        let c = red.expand(&sol.x);
        let g = loss_theta_gradient(&space, &red, &cache, &c, None).unwrap();
        let h = 1e-4;
        let scale = g.max_abs();
        for m in 0..2 {
            for k in (0..g.per_network[m].len()).step_by(7) {
                space.enrichment_mut(m).as_network_mut().unwrap().params_mut()[k] += h;
                let lp = pipeline_loss(&mut space, &p, &scheme);
                space.enrichment_mut(m).as_network_mut().unwrap().params_mut()[k] -= 2.0 * h;
                let lm = pipeline_loss(&mut space, &p, &scheme);
                space.enrichment_mut(m).as_network_mut().unwrap().params_mut()[k] += h;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - g.per_network[m][k]).abs() <= 1e-4 * scale, "net {m} param {k}: {fd} vs {}", g.per_network[m][k]);
            }
        }
    }

    #[test]
    fn zero_coefficients_zero_gradient_and_masking() {
        let mesh = Arc::new(Mesh::unit_square(4).unwrap());
        let space = net_space(mesh.clone(), &[6, 12], 3);
        let p = constant_problem(1.0, 0.0);
        let scheme = QuadratureScheme::new(&mesh, 6, None).unwrap();
        let (sys, cache) = assemble_with_cache(&space, &p, &scheme).unwrap();
        let red = apply_dirichlet(&sys, &mesh, &p).unwrap();
        let c = vec![0.0; space.num_dofs()];
        let g = loss_theta_gradient(&space, &red, &cache, &c, None).unwrap();
        assert_eq!(g.max_abs(), 0.0);

        let p = Example1::paper();
        let (sys, cache) = assemble_with_cache(&space, &p, &scheme).unwrap();
        let red = apply_dirichlet(&sys, &mesh, &p).unwrap();
        let sol = solve_spd(&red.matrix, &red.rhs, &SolverConfig::default()).unwrap();
        let c = red.expand(&sol.x);
        let g = loss_theta_gradient(&space, &red, &cache, &c, Some(&[true, false])).unwrap();
        assert!(g.per_network[1].iter().all(|&x| x == 0.0));
        assert!(g.per_network[0].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn unconverged_coefficients_rejected() {
        let mesh = Arc::new(Mesh::unit_square(4).unwrap());
        let space = net_space(mesh.clone(), &[6], 3);
        let p = Example1::paper();
        let scheme = QuadratureScheme::new(&mesh, 6, None).unwrap();
        let (sys, cache) = assemble_with_cache(&space, &p, &scheme).unwrap();
        let red = apply_dirichlet(&sys, &mesh, &p).unwrap();
        let c = vec![1.0; space.num_dofs()];
        assert!(matches!(loss_theta_gradient(&space, &red, &cache, &c, None), Err(NefemError::UnconvergedCoefficients(_))));
    }

    #[test]
    fn stale_cache_rejected() {
        let mesh = Arc::new(Mesh::unit_square(2).unwrap());
        let mut space = net_space(mesh.clone(), &[4], 3);
        space.enrichment_mut(0);
        let scheme = QuadratureScheme::new(&mesh, 2, None).unwrap();
        assert!(assemble(&space, &constant_problem(1.0, 1.0), &scheme).is_err());
    }

    #[test]
    fn poisson_matches_dense_oracle() {
        let mesh = Arc::new(Mesh::unit_square(8).unwrap());
        let space = EnrichmentSpace::p1(mesh.clone());
        let p = constant_problem(1.0, 1.0);
        let scheme = QuadratureScheme::new(&mesh, 2, None).unwrap();
        let sys = assemble(&space, &p, &scheme).unwrap();
        let red = apply_dirichlet(&sys, &mesh, &p).unwrap();
        let sol = solve_spd(&red.matrix, &red.rhs, &SolverConfig::default()).unwrap();
        // Dense Gaussian elimination oracle.
        let n = red.rhs.len();
        let mut a: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| red.matrix.get(i, j)).collect()).collect();
        let mut b = red.rhs.clone();
        for k in 0..n {
            for i in k + 1..n {
                let f = a[i][k] / a[k][k];
                for j in k..n {
                    a[i][j] -= f * a[k][j];
                }
                b[i] -= f * b[k];
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            x[i] = (b[i] - (i + 1..n).map(|j| a[i][j] * x[j]).sum::<f64>()) / a[i][i];
        }
        for i in 0..n {
            assert!((x[i] - sol.x[i]).abs() < 1e-9);
        }
    }
}
