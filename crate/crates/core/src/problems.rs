//! Model problems, quasi-distance functions, error norms and fine-mesh P1
//! reference solutions.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::assembly::{apply_dirichlet, assemble, ElementPoints, PointCache, QuadratureScheme};
use crate::enrichspace::EnrichmentSpace;
use crate::error::{NefemError, Result};
use crate::linsolve::{solve_spd, SolverConfig};
use crate::mesh::{barycentric_gradients, InterfaceGeometry, Mesh, Point, Rect, Side};
use crate::neuralnet::DistanceInput;
use crate::quadrature::{map_rule, reference_rule};

/// Distance-like network input with one-sided gradients across an interface.
pub trait QuasiDistance: Send + Sync {
    fn eval(&self, x: Point, side: Side) -> DistanceInput;
}

/// `D = |‖x − x_m‖ − R|` (default) or the smooth `D = ‖x − x_m‖`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleDistance {
    pub geometry: InterfaceGeometry,
    pub literal: bool,
}

impl CircleDistance {
    pub fn absolute(geometry: InterfaceGeometry) -> Self {
        Self { geometry, literal: false }
    }

    pub fn literal(geometry: InterfaceGeometry) -> Self {
        Self { geometry, literal: true }
    }
}

impl QuasiDistance for CircleDistance {
    fn eval(&self, x: Point, side: Side) -> DistanceInput {
        let d = [x[0] - self.geometry.center[0], x[1] - self.geometry.center[1]];
        let r = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let radial = if r > 0.0 { [d[0] / r, d[1] / r] } else { [0.0, 0.0] };
        if self.literal {
            return DistanceInput { value: r, grad: radial };
        }
        let sign = match side {
            Side::Inside => -1.0,
            Side::Outside => 1.0,
        };
        DistanceInput { value: (r - self.geometry.radius).abs(), grad: [sign * radial[0], sign * radial[1]] }
    }
}

/// Coefficient, data and (optionally) exact solution of `−∇·(a∇u) = f`.
/// `side` only matters for interface problems.
pub trait Problem: Send + Sync {
    fn name(&self) -> &str;
    fn domain(&self) -> Rect;
    fn coefficient(&self, x: Point, side: Side) -> f64;
    fn coefficient_gradient(&self, _x: Point, _side: Side) -> Option<[f64; 2]> {
        None
    }
    fn source(&self, x: Point, side: Side) -> f64;
    fn dirichlet(&self, _x: Point) -> f64 {
        0.0
    }
    fn exact(&self, _x: Point, _side: Side) -> Option<(f64, [f64; 2])> {
        None
    }
    fn interface(&self) -> Option<InterfaceGeometry> {
        None
    }
    fn quasi_distance(&self) -> Option<Arc<dyn QuasiDistance>> {
        None
    }
}

/// Oscillatory coefficient `a = 1/((2 + P sin(2πx/ε))(2 + P sin(2πy/ε)))`, `f = −1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example1 {
    pub eps: f64,
    pub p: f64,
}

impl Example1 {
    pub fn new(eps: f64, p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 2.0) {
            return Err(NefemError::InvalidProblem(format!("amplitude P must lie in (0, 2), got {p}")));
        }
        if !(eps > 0.0) {
            return Err(NefemError::InvalidProblem(format!("period eps must be positive, got {eps}")));
        }
        Ok(Self { eps, p })
    }

    pub fn paper() -> Self {
        Self { eps: 0.02, p: 1.5 }
    }

    fn factor(&self, t: f64) -> (f64, f64) {
        let k = 2.0 * PI / self.eps;
        (2.0 + self.p * (k * t).sin(), self.p * k * (k * t).cos())
    }
}

impl Problem for Example1 {
    fn name(&self) -> &str {
        "ex1"
    }

    fn domain(&self) -> Rect {
        Rect::UNIT
    }

    fn coefficient(&self, x: Point, _side: Side) -> f64 {
        1.0 / (self.factor(x[0]).0 * self.factor(x[1]).0)
    }

    fn coefficient_gradient(&self, x: Point, _side: Side) -> Option<[f64; 2]> {
        let (fx, dfx) = self.factor(x[0]);
        let (fy, dfy) = self.factor(x[1]);
        Some([-dfx / (fx * fx * fy), -dfy / (fx * fy * fy)])
    }

    fn source(&self, _x: Point, _side: Side) -> f64 {
        -1.0
    }
}

/// `u = U(x)U(y)`, `U(t) = sin 2πt + e^{−100(t−½)²} sin(50π(t−½))`, `a = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Example2;

impl Example2 {
    /// `U`, `U'`, `U''`.
    fn profile(t: f64) -> (f64, f64, f64) {
        let s = t - 0.5;
        let g = (-100.0 * s * s).exp();
        let dg = -200.0 * s * g;
        let ddg = (-200.0 + 40_000.0 * s * s) * g;
        let w = 50.0 * PI;
        let (sn, cs) = (w * s).sin_cos();
        let (s2, c2) = (2.0 * PI * t).sin_cos();
        let u = s2 + g * sn;
        let du = 2.0 * PI * c2 + dg * sn + g * w * cs;
        let ddu = -4.0 * PI * PI * s2 + ddg * sn + 2.0 * dg * w * cs - g * w * w * sn;
        (u, du, ddu)
    }
}

impl Problem for Example2 {
    fn name(&self) -> &str {
        "ex2"
    }

    fn domain(&self) -> Rect {
        Rect::UNIT
    }

    fn coefficient(&self, _x: Point, _side: Side) -> f64 {
        1.0
    }

    fn coefficient_gradient(&self, _x: Point, _side: Side) -> Option<[f64; 2]> {
        Some([0.0, 0.0])
    }

    fn source(&self, x: Point, _side: Side) -> f64 {
        let (ux, _, uxx) = Self::profile(x[0]);
        let (uy, _, uyy) = Self::profile(x[1]);
        -(uxx * uy + ux * uyy)
    }

    fn exact(&self, x: Point, _side: Side) -> Option<(f64, [f64; 2])> {
        let (ux, dux, _) = Self::profile(x[0]);
        let (uy, duy, _) = Self::profile(x[1]);
        Some((ux * uy, [dux * uy, ux * duy]))
    }
}

/// Circular interface problem on `[−1, 1]²` with piecewise-constant coefficient
/// `a₁` inside and `a₂` outside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example3 {
    pub a1: f64,
    pub a2: f64,
    pub geometry: InterfaceGeometry,
    pub distance: CircleDistance,
}

impl Example3 {
    pub fn new(a1: f64, a2: f64, radius: f64, center: Point, literal_distance: bool) -> Result<Self> {
        if !(a1 > 0.0 && a2 > 0.0) {
            return Err(NefemError::InvalidProblem("coefficients must be positive".into()));
        }
        // The stated exact solution balances fluxes only for R = 1/2.
        if radius != 0.5 {
            return Err(NefemError::InvalidProblem(format!("the exact solution requires R = 0.5, got {radius}")));
        }
        let reach = [center[0] - radius, center[0] + radius, center[1] - radius, center[1] + radius];
        if reach[0] <= -1.0 || reach[1] >= 1.0 || reach[2] <= -1.0 || reach[3] >= 1.0 {
            return Err(NefemError::InvalidProblem("circle must lie strictly inside [-1, 1]^2".into()));
        }
        let geometry = InterfaceGeometry::new(center, radius);
        let distance = if literal_distance { CircleDistance::literal(geometry) } else { CircleDistance::absolute(geometry) };
        Ok(Self { a1, a2, geometry, distance })
    }

    pub fn paper() -> Self {
        Self::new(0.1, 1.0, 0.5, [0.0, 0.15], false).expect("paper parameters are valid")
    }

    fn offset(&self, x: Point) -> ([f64; 2], f64) {
        let d = [x[0] - self.geometry.center[0], x[1] - self.geometry.center[1]];
        (d, d[0] * d[0] + d[1] * d[1])
    }

    /// Largest interface jumps over `n` equispaced points on the circle:
    /// `(|[u]|, |[a ∂_n u]|, ||[∂_n D]| − 2|)`.
    pub fn interface_jumps(&self, n: usize) -> (f64, f64, f64) {
        let mut worst = (0.0f64, 0.0f64, 0.0f64);
        for k in 0..n {
            let th = 2.0 * PI * (k as f64 + 0.5) / n as f64;
            let nrm = [th.cos(), th.sin()];
            let x = [self.geometry.center[0] + self.geometry.radius * nrm[0], self.geometry.center[1] + self.geometry.radius * nrm[1]];
            let (ui, gi) = self.exact(x, Side::Inside).expect("exact solution");
            let (uo, go) = self.exact(x, Side::Outside).expect("exact solution");
            let fi = self.a1 * (gi[0] * nrm[0] + gi[1] * nrm[1]);
            let fo = self.a2 * (go[0] * nrm[0] + go[1] * nrm[1]);
            let di = self.distance.eval(x, Side::Inside);
            let dout = self.distance.eval(x, Side::Outside);
            let jd = (dout.grad[0] - di.grad[0]) * nrm[0] + (dout.grad[1] - di.grad[1]) * nrm[1];
            worst.0 = worst.0.max((ui - uo).abs());
            worst.1 = worst.1.max((fi - fo).abs());
            worst.2 = worst.2.max((jd.abs() - 2.0).abs());
        }
        worst
    }
}

impl Problem for Example3 {
    fn name(&self) -> &str {
        "ex3"
    }

    fn domain(&self) -> Rect {
        Rect::square(-1.0, 1.0)
    }

    fn coefficient(&self, _x: Point, side: Side) -> f64 {
        match side {
            Side::Inside => self.a1,
            Side::Outside => self.a2,
        }
    }

    fn coefficient_gradient(&self, _x: Point, _side: Side) -> Option<[f64; 2]> {
        Some([0.0, 0.0])
    }

    fn source(&self, x: Point, side: Side) -> f64 {
        let (_, r2) = self.offset(x);
        match side {
            Side::Inside => 32.0 * self.a1 * self.a2 * r2,
            Side::Outside => 4.0 * self.a1 * self.a2,
        }
    }

    fn dirichlet(&self, x: Point) -> f64 {
        self.exact(x, self.geometry.side(x)).expect("exact solution").0
    }

    fn exact(&self, x: Point, side: Side) -> Option<(f64, [f64; 2])> {
        let (d, r2) = self.offset(x);
        let rr = self.geometry.radius * self.geometry.radius;
        Some(match side {
            Side::Inside => (-2.0 * self.a2 * r2 * r2, [-8.0 * self.a2 * r2 * d[0], -8.0 * self.a2 * r2 * d[1]]),
            Side::Outside => (-self.a1 * r2 + self.a1 * rr - 2.0 * self.a2 * rr * rr, [-2.0 * self.a1 * d[0], -2.0 * self.a1 * d[1]]),
        })
    }

    fn interface(&self) -> Option<InterfaceGeometry> {
        Some(self.geometry)
    }

    fn quasi_distance(&self) -> Option<Arc<dyn QuasiDistance>> {
        Some(Arc::new(self.distance))
    }
}

type ScalarFn = Arc<dyn Fn(Point) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(Point) -> [f64; 2] + Send + Sync>;
type ExactFn = Arc<dyn Fn(Point) -> (f64, [f64; 2]) + Send + Sync>;

/// Closure-defined problem without interface, for manufactured solutions.
#[derive(Clone)]
pub struct CustomProblem {
    domain: Rect,
    coefficient: ScalarFn,
    coefficient_gradient: Option<GradFn>,
    source: ScalarFn,
    dirichlet: ScalarFn,
    exact: Option<ExactFn>,
}

impl fmt::Debug for CustomProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomProblem").field("domain", &self.domain).finish_non_exhaustive()
    }
}

impl CustomProblem {
    pub fn new(
        domain: Rect,
        coefficient: impl Fn(Point) -> f64 + Send + Sync + 'static,
        source: impl Fn(Point) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            domain,
            coefficient: Arc::new(coefficient),
            coefficient_gradient: None,
            source: Arc::new(source),
            dirichlet: Arc::new(|_| 0.0),
            exact: None,
        }
    }

    pub fn with_dirichlet(mut self, g: impl Fn(Point) -> f64 + Send + Sync + 'static) -> Self {
        self.dirichlet = Arc::new(g);
        self
    }

    pub fn with_coefficient_gradient(mut self, g: impl Fn(Point) -> [f64; 2] + Send + Sync + 'static) -> Self {
        self.coefficient_gradient = Some(Arc::new(g));
        self
    }

    /// Sets the exact solution; Dirichlet data follow it.
    pub fn with_exact(mut self, u: impl Fn(Point) -> (f64, [f64; 2]) + Send + Sync + 'static) -> Self {
        let u: ExactFn = Arc::new(u);
        let g = u.clone();
        self.dirichlet = Arc::new(move |x| g(x).0);
        self.exact = Some(u);
        self
    }
}

impl Problem for CustomProblem {
    fn name(&self) -> &str {
        "custom"
    }

    fn domain(&self) -> Rect {
        self.domain
    }

    fn coefficient(&self, x: Point, _side: Side) -> f64 {
        (self.coefficient)(x)
    }

    fn coefficient_gradient(&self, x: Point, _side: Side) -> Option<[f64; 2]> {
        self.coefficient_gradient.as_ref().map(|g| g(x))
    }

    fn source(&self, x: Point, _side: Side) -> f64 {
        (self.source)(x)
    }

    fn dirichlet(&self, x: Point) -> f64 {
        (self.dirichlet)(x)
    }

    fn exact(&self, x: Point, _side: Side) -> Option<(f64, [f64; 2])> {
        self.exact.as_ref().map(|u| u(x))
    }
}

/// P1 solution on a fine structured mesh.
#[derive(Debug, Clone)]
pub struct ReferenceSolution {
    pub mesh: Arc<Mesh>,
    pub values: Vec<f64>,
}

impl ReferenceSolution {
    pub fn nx(&self) -> usize {
        self.mesh.nx()
    }

    /// Value and (elementwise constant) gradient at `x`.
    pub fn eval(&self, x: Point) -> Result<(f64, [f64; 2])> {
        let t = self.mesh.locate_point(x)?;
        Ok(self.eval_in(t, x))
    }

    fn eval_in(&self, t: usize, x: Point) -> (f64, [f64; 2]) {
        let tri = self.mesh.triangles()[t];
        let l = self.mesh.barycentric(t, x);
        let gl = barycentric_gradients(&self.mesh.vertices(t));
        let mut u = 0.0;
        let mut g = [0.0; 2];
        for k in 0..3 {
            let v = self.values[tri[k]];
            u += v * l[k];
            g[0] += v * gl[k][0];
            g[1] += v * gl[k][1];
        }
        (u, g)
    }
}

/// Plain P1 solve on an `nx × nx` mesh of the problem's domain.
pub fn fem_reference(problem: &dyn Problem, nx: usize, degree: usize, solver: &SolverConfig) -> Result<ReferenceSolution> {
    let mesh = Arc::new(Mesh::structured(nx, nx, problem.domain())?);
    let values = p1_solve(mesh.clone(), problem, degree, solver)?;
    Ok(ReferenceSolution { mesh, values })
}

/// Nodal values of the P1 Galerkin solution.
pub fn p1_solve(mesh: Arc<Mesh>, problem: &dyn Problem, degree: usize, solver: &SolverConfig) -> Result<Vec<f64>> {
    let space = EnrichmentSpace::p1(mesh.clone());
    let scheme = QuadratureScheme::new(&mesh, degree, problem.interface().as_ref())?;
    let sys = assemble(&space, problem, &scheme)?;
    let red = apply_dirichlet(&sys, &mesh, problem)?;
    let sol = solve_spd(&red.matrix, &red.rhs, solver)?;
    Ok(red.expand(&sol.x))
}

pub enum Truth<'a> {
    Exact(&'a dyn Problem),
    Reference(&'a ReferenceSolution),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorNorms {
    pub l2: f64,
    pub h1: f64,
    pub energy: f64,
}

#[derive(Default)]
struct Sums {
    l2: f64,
    h1: f64,
    e: f64,
}

impl Sums {
    fn add(&mut self, w: f64, a: f64, du: f64, dg: [f64; 2]) {
        let g2 = dg[0] * dg[0] + dg[1] * dg[1];
        self.l2 += w * du * du;
        self.h1 += w * g2;
        self.e += w * a * g2;
    }

    fn finish(self) -> ErrorNorms {
        ErrorNorms { l2: self.l2.sqrt(), h1: self.h1.sqrt(), energy: self.e.sqrt() }
    }
}

/// `‖u − u_h‖_{L²}`, `|u − u_h|_{H¹}` and `‖u − u_h‖_E`.
///
/// Exact truths use the element quadrature of `scheme`. A reference truth is
/// integrated over the fine-mesh triangles inside each coarse element with a
/// rule of degree `sub_degree`, so its kinks never fall inside a rule.
pub fn error_norms(
    space: &EnrichmentSpace,
    c: &[f64],
    truth: &Truth<'_>,
    problem: &dyn Problem,
    scheme: &QuadratureScheme,
    sub_degree: usize,
) -> Result<ErrorNorms> {
    if !space.is_fresh() {
        return Err(NefemError::StaleCache { cache: 0, params: space.version() });
    }
    let mesh = space.mesh();
    let mut sums = Sums::default();
    match truth {
        Truth::Exact(p) => {
            let mut pts = ElementPoints::default();
            for t in 0..mesh.num_elements() {
                scheme.fill(mesh, t, &mut pts);
                let gl = barycentric_gradients(&mesh.vertices(t));
                for q in 0..pts.len() {
                    let (x, side) = (pts.x[q], pts.side[q]);
                    let (u, g) = p.exact(x, side).ok_or(NefemError::MissingProblemData("exact solution"))?;
                    let (uh, gh) = space.eval_basis_with(t, x, pts.lambda[q], &gl, Some(side)).interpolate(c);
                    sums.add(pts.w[q], problem.coefficient(x, side), u - uh, [g[0] - gh[0], g[1] - gh[1]]);
                }
            }
        }
        Truth::Reference(r) => {
            let (cn, fnx) = (mesh.nx(), r.nx());
            if fnx % cn != 0 || mesh.ny() != mesh.nx() {
                return Err(NefemError::InvalidConfig(format!("reference nx {fnx} is not a multiple of the coarse nx {cn}")));
            }
            let s = fnx / cn;
            let rule = reference_rule(sub_degree)?;
            for t in 0..mesh.num_elements() {
                let v = mesh.vertices(t);
                let gl = barycentric_gradients(&v);
                for sub in subdivide(&v, s) {
                    let ft = r.mesh.locate_point(centroid(&sub))?;
                    let mr = map_rule(rule, &sub)?;
                    for (x, w) in mr.points.iter().zip(&mr.weights) {
                        let (u, g) = r.eval_in(ft, *x);
                        let side = space.side_of(*x);
                        let (uh, gh) = space.eval_basis_with(t, *x, mesh.barycentric(t, *x), &gl, Some(side)).interpolate(c);
                        sums.add(*w, problem.coefficient(*x, side), u - uh, [g[0] - gh[0], g[1] - gh[1]]);
                    }
                }
            }
        }
    }
    Ok(sums.finish())
}

/// Error norms against an exact solution reusing assembly-time point data.
pub fn error_norms_cached(cache: &PointCache, mesh: &Mesh, c: &[f64], problem: &dyn Problem) -> Result<ErrorNorms> {
    let mut sums = Sums::default();
    for t in 0..mesh.num_elements() {
        for p in cache.element(t) {
            let (u, g) = problem.exact(p.x, p.side).ok_or(NefemError::MissingProblemData("exact solution"))?;
            let (uh, gh) = p.basis.interpolate(c);
            sums.add(p.w, p.a, u - uh, [g[0] - gh[0], g[1] - gh[1]]);
        }
    }
    Ok(sums.finish())
}

/// `(‖u‖_{L²}, |u|_{H¹}, ‖u‖_E)` of the exact solution.
pub fn exact_norms(problem: &dyn Problem, mesh: &Mesh, scheme: &QuadratureScheme) -> Result<ErrorNorms> {
    let mut sums = Sums::default();
    let mut pts = ElementPoints::default();
    for t in 0..mesh.num_elements() {
        scheme.fill(mesh, t, &mut pts);
        for q in 0..pts.len() {
            let (u, g) = problem.exact(pts.x[q], pts.side[q]).ok_or(NefemError::MissingProblemData("exact solution"))?;
            sums.add(pts.w[q], problem.coefficient(pts.x[q], pts.side[q]), u, g);
        }
    }
    Ok(sums.finish())
}

fn centroid(v: &[Point; 3]) -> Point {
    [(v[0][0] + v[1][0] + v[2][0]) / 3.0, (v[0][1] + v[1][1] + v[2][1]) / 3.0]
}

/// Splits a triangle into `s²` congruent sub-triangles.
fn subdivide(v: &[Point; 3], s: usize) -> Vec<[Point; 3]> {
    let p = |i: usize, j: usize| {
        let (a, b) = (i as f64 / s as f64, j as f64 / s as f64);
        [v[0][0] + a * (v[1][0] - v[0][0]) + b * (v[2][0] - v[0][0]), v[0][1] + a * (v[1][1] - v[0][1]) + b * (v[2][1] - v[0][1])]
    };
    let mut out = Vec::with_capacity(s * s);
    for j in 0..s {
        for i in 0..s - j {
            out.push([p(i, j), p(i + 1, j), p(i, j + 1)]);
            if i + j + 1 < s {
                out.push([p(i + 1, j), p(i + 1, j + 1), p(i, j + 1)]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enrichspace::{AnalyticEnrichment, Enrichment};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn example1_bounds_and_gradient() {
        let p = Example1::paper();
        assert!(Example1::new(0.02, 2.0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-7;
        for _ in 0..1000 {
            let x = [rng.random::<f64>(), rng.random::<f64>()];
            let a = p.coefficient(x, Side::Outside);
            assert!((1.0 / 12.25 - 1e-15..=4.0 + 1e-15).contains(&a));
            assert_eq!(p.source(x, Side::Outside), -1.0);
        }
        for _ in 0..50 {
            let x = [rng.random::<f64>(), rng.random::<f64>()];
            let g = p.coefficient_gradient(x, Side::Outside).unwrap();
            let f = |y: Point| p.coefficient(y, Side::Outside);
            let fd = [(f([x[0] + h, x[1]]) - f([x[0] - h, x[1]])) / (2.0 * h), (f([x[0], x[1] + h]) - f([x[0], x[1] - h])) / (2.0 * h)];
            for k in 0..2 {
                assert!((g[k] - fd[k]).abs() <= 1e-7 * g[k].abs().max(1.0), "{g:?} vs {fd:?}");
            }
        }
    }

    #[test]
    fn example2_data() {
        let p = Example2;
        assert!(p.exact([0.5, 0.5], Side::Outside).unwrap().0.abs() < 1e-15);
        for k in 0..1000 {
            let t = k as f64 / 999.0;
            for x in [[t, 0.0], [t, 1.0], [0.0, t], [1.0, t]] {
                assert!(p.exact(x, Side::Outside).unwrap().0.abs() < 1e-12);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-5;
        for _ in 0..1000 {
            let x = [rng.random::<f64>(), rng.random::<f64>()];
            let u = |y: Point| p.exact(y, Side::Outside).unwrap().0;
            let lap = (u([x[0] + h, x[1]]) + u([x[0] - h, x[1]]) + u([x[0], x[1] + h]) + u([x[0], x[1] - h]) - 4.0 * u(x)) / (h * h);
            let f = p.source(x, Side::Outside);
            // Truncation error is about h² |∂⁴u| / 12 ≈ 5e-4, rounding about 1e-6.
            assert!((f + lap).abs() <= 2e-5 * f.abs().max(500.0), "{f} vs {}", -lap);
        }
    }

    #[test]
    fn example3_interface_conditions() {
        let p = Example3::paper();
        assert!((p.exact([0.5, 0.15], Side::Inside).unwrap().0 + 0.125).abs() < 1e-15);
        assert!((p.exact([0.5, 0.15], Side::Outside).unwrap().0 + 0.125).abs() < 1e-15);
        let (ju, jf, jd) = p.interface_jumps(1000);
        assert!(ju <= 1e-10 && jf <= 1e-10, "{ju} {jf}");
        assert!(jd <= 1e-15, "{jd}");
        assert!(Example3::new(0.1, 1.0, 0.9, [0.0, 0.15], false).is_err());
        assert!(Example3::new(0.1, 1.0, 0.5, [0.0, 0.6], false).is_err());
    }

    #[test]
    fn literal_distance_is_smooth() {
        let g = InterfaceGeometry::new([0.0, 0.15], 0.5);
        let d = CircleDistance::literal(g);
        let x = [0.5, 0.15];
        assert_eq!(d.eval(x, Side::Inside), d.eval(x, Side::Outside));
        let a = CircleDistance::absolute(g);
        assert_eq!(a.eval(x, Side::Inside).value, 0.0);
        assert_eq!(a.eval(x, Side::Inside).grad, [-1.0, 0.0]);
    }

    #[test]
    fn error_norm_identities() {
        let mesh = Arc::new(Mesh::unit_square(4).unwrap());
        let space = EnrichmentSpace::p1(mesh.clone());
        let p = CustomProblem::new(Rect::UNIT, |_| 1.0, |_| 0.0).with_exact(|x| (x[0], [1.0, 0.0]));
        let scheme = QuadratureScheme::new(&mesh, 4, None).unwrap();
        let zero = vec![0.0; space.num_dofs()];
        let e = error_norms(&space, &zero, &Truth::Exact(&p), &p, &scheme, 4).unwrap();
        assert!((e.l2 - 1.0 / 3f64.sqrt()).abs() < 1e-14);
        assert!((e.h1 - 1.0).abs() < 1e-14);
        let interp: Vec<f64> = mesh.nodes().iter().map(|x| x[0]).collect();
        let e = error_norms(&space, &interp, &Truth::Exact(&p), &p, &scheme, 4).unwrap();
        assert!(e.l2 < 1e-15 && e.h1 < 1e-14 && e.energy < 1e-14);
    }

    #[test]
    fn reference_self_comparison_is_zero() {
        let p = CustomProblem::new(Rect::UNIT, |_| 1.0, |_| 1.0);
        let r = fem_reference(&p, 8, 2, &SolverConfig::default()).unwrap();
        let space = EnrichmentSpace::p1(r.mesh.clone());
        let scheme = QuadratureScheme::new(&r.mesh, 2, None).unwrap();
        let e = error_norms(&space, &r.values, &Truth::Reference(&r), &p, &scheme, 2).unwrap();
        assert!(e.l2 < 1e-12 && e.h1 < 1e-12);
        for (i, x) in r.mesh.nodes().iter().enumerate() {
            assert!((r.eval(*x).unwrap().0 - r.values[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn coarse_against_fine_reference_uses_nested_triangles() {
        // A coarse P1 field compared with its own prolongation onto a 4× finer
        // mesh must give zero error: only exact if sub-triangles align with fine ones.
        let p = CustomProblem::new(Rect::UNIT, |_| 1.0, |_| 1.0);
        let coarse = Arc::new(Mesh::unit_square(4).unwrap());
        let cvals = p1_solve(coarse.clone(), &p, 2, &SolverConfig::default()).unwrap();
        let fine = Arc::new(Mesh::unit_square(16).unwrap());
        let cref = ReferenceSolution { mesh: coarse.clone(), values: cvals.clone() };
        let fvals: Vec<f64> = fine.nodes().iter().map(|x| cref.eval(*x).unwrap().0).collect();
        let r = ReferenceSolution { mesh: fine, values: fvals };
        let space = EnrichmentSpace::p1(coarse.clone());
        let scheme = QuadratureScheme::new(&coarse, 2, None).unwrap();
        let e = error_norms(&space, &cvals, &Truth::Reference(&r), &p, &scheme, 1).unwrap();
        assert!(e.l2 < 1e-14 && e.h1 < 1e-13, "{e:?}");
    }

    #[test]
    fn reference_converges_quadratically() {
        let pi = PI;
        let p =
            CustomProblem::new(Rect::UNIT, |_| 1.0, move |x| 2.0 * pi * pi * (pi * x[0]).sin() * (pi * x[1]).sin()).with_exact(move |x| {
                let (s0, c0) = (pi * x[0]).sin_cos();
                let (s1, c1) = (pi * x[1]).sin_cos();
                (s0 * s1, [pi * c0 * s1, pi * s0 * c1])
            });
        let mut errs = Vec::new();
        for nx in [64, 128, 256] {
            let r = fem_reference(&p, nx, 4, &SolverConfig::default()).unwrap();
            let space = EnrichmentSpace::p1(r.mesh.clone());
            let scheme = QuadratureScheme::new(&r.mesh, 4, None).unwrap();
            errs.push(error_norms(&space, &r.values, &Truth::Exact(&p), &p, &scheme, 4).unwrap().l2);
        }
        let slope = (errs[0] / errs[2]).ln() / 4f64.ln();
        assert!((slope - 2.0).abs() <= 0.2, "{errs:?} slope {slope}");
    }

    #[test]
    fn reference_is_deterministic() {
        let p = Example1::paper();
        let a = fem_reference(&p, 32, 4, &SolverConfig::default()).unwrap();
        let b = fem_reference(&p, 32, 4, &SolverConfig::default()).unwrap();
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn subdivision_partitions_area() {
        let v = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]];
        let subs = subdivide(&v, 5);
        assert_eq!(subs.len(), 25);
        let total: f64 = subs.iter().map(crate::mesh::triangle_signed_area).sum();
        assert!((total - 0.5).abs() < 1e-15);
        assert!(subs.iter().all(|s| crate::mesh::triangle_signed_area(s) > 0.0));
    }

    #[test]
    fn cached_norms_match_direct() {
        let mesh = Arc::new(Mesh::unit_square(4).unwrap());
        let nodes = mesh.interior_nodes();
        let e = nodes.iter().map(|_| Enrichment::Analytic(AnalyticEnrichment::new("q", |x| (x[0] * x[1], [x[1], x[0]], 0.0)))).collect();
        let space = EnrichmentSpace::new(mesh.clone(), &nodes, e).unwrap();
        let p = Example2;
        let scheme = QuadratureScheme::new(&mesh, 20, None).unwrap();
        let (_, cache) = crate::assembly::assemble_with_cache(&space, &p, &scheme).unwrap();
        let c: Vec<f64> = (0..space.num_dofs()).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = error_norms(&space, &c, &Truth::Exact(&p), &p, &scheme, 4).unwrap();
        let b = error_norms_cached(&cache, &mesh, &c, &p).unwrap();
        assert!((a.l2 - b.l2).abs() < 1e-14 && (a.h1 - b.h1).abs() < 1e-13);
    }
}
