//! The approximation space: P1 hats plus SGFEM-modified enrichments
//! `B_i = L_i (N_i − I_h N_i)`.
//!
//! DoFs `0..N` are the P1 functions of all mesh nodes; DoF `N + m` belongs to
//! the `m`-th enriched node (enriched nodes are kept sorted).

use std::fmt;
use std::sync::Arc;

use faer::{Mat, Side as LinSide};
use serde::{Deserialize, Serialize};

use crate::error::{NefemError, Result};
use crate::mesh::{barycentric_gradients, InterfaceGeometry, Mesh, Point, Side};
use crate::neuralnet::{DistanceInput, InputMode, MlpEnrichment};
use crate::problems::QuasiDistance;
use crate::quadrature::{map_rule, reference_rule};

/// Maximum number of basis functions active on one element (3 hats, 3 enrichments).
pub const MAX_LOCAL: usize = 6;

type AnalyticFn = dyn Fn(Point) -> (f64, [f64; 2], f64) + Send + Sync;

/// A fixed analytic enrichment `(value, gradient, laplacian)`, used for
/// structural tests through the same code path as networks.
#[derive(Clone)]
pub struct AnalyticEnrichment {
    name: String,
    f: Arc<AnalyticFn>,
}

impl AnalyticEnrichment {
    pub fn new(name: &str, f: impl Fn(Point) -> (f64, [f64; 2], f64) + Send + Sync + 'static) -> Self {
        Self { name: name.to_string(), f: Arc::new(f) }
    }

    pub fn linear(c0: f64, g: [f64; 2]) -> Self {
        Self::new("linear", move |x| (c0 + g[0] * x[0] + g[1] * x[1], g, 0.0))
    }
}

impl fmt::Debug for AnalyticEnrichment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AnalyticEnrichment({})", self.name)
    }
}

#[derive(Debug, Clone)]
pub enum Enrichment {
    Network(MlpEnrichment),
    Analytic(AnalyticEnrichment),
}

impl Enrichment {
    pub fn as_network(&self) -> Option<&MlpEnrichment> {
        match self {
            Enrichment::Network(n) => Some(n),
            Enrichment::Analytic(_) => None,
        }
    }

    pub fn as_network_mut(&mut self) -> Option<&mut MlpEnrichment> {
        match self {
            Enrichment::Network(n) => Some(n),
            Enrichment::Analytic(_) => None,
        }
    }

    pub fn needs_distance(&self) -> bool {
        matches!(self, Enrichment::Network(n) if n.input_mode() == InputMode::SpatialDistance)
    }

    pub fn value_grad(&self, x: Point, d: Option<DistanceInput>) -> (f64, [f64; 2]) {
        match self {
            Enrichment::Network(n) => n.eval_with_gradient(x, d),
            Enrichment::Analytic(a) => {
                let (v, g, _) = (a.f)(x);
                (v, g)
            }
        }
    }

    pub fn value_grad_laplacian(&self, x: Point) -> Result<(f64, [f64; 2], f64)> {
        match self {
            Enrichment::Network(n) => n.eval_with_laplacian(x),
            Enrichment::Analytic(a) => Ok((a.f)(x)),
        }
    }
}

/// One enrichment active on an element.
#[derive(Debug, Clone, Copy)]
struct Slot {
    local: usize,
    m: usize,
    /// Positions of the element's three vertices in `patch_nodes[m]`.
    idx: [usize; 3],
}

/// Per-point evaluation of one enrichment on an element.
#[derive(Debug, Clone, Copy, Default)]
pub struct EnrichmentTerm {
    pub m: usize,
    pub local: usize,
    /// `N(x)` and `∇N(x)`.
    pub n_value: f64,
    pub n_grad: [f64; 2],
    /// Element-local interpolant `ℓ` and its gradient.
    pub ell: f64,
    pub ell_grad: [f64; 2],
    /// `B(x)` and `∇B(x)`.
    pub value: f64,
    pub grad: [f64; 2],
}

/// All basis functions active at a point of one element.
#[derive(Debug, Clone, Copy)]
pub struct BasisEval {
    pub lambda: [f64; 3],
    pub grad_lambda: [[f64; 2]; 3],
    pub nodes: [usize; 3],
    pub terms: [EnrichmentTerm; 3],
    pub n_terms: usize,
    num_p1: usize,
}

impl BasisEval {
    pub fn len(&self) -> usize {
        3 + self.n_terms
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn enrichment_terms(&self) -> &[EnrichmentTerm] {
        &self.terms[..self.n_terms]
    }

    /// Global DoF of local function `k` (hats first).
    pub fn dof(&self, k: usize) -> usize {
        if k < 3 {
            self.nodes[k]
        } else {
            self.num_p1 + self.terms[k - 3].m
        }
    }

    pub fn value(&self, k: usize) -> f64 {
        if k < 3 {
            self.lambda[k]
        } else {
            self.terms[k - 3].value
        }
    }

    pub fn grad(&self, k: usize) -> [f64; 2] {
        if k < 3 {
            self.grad_lambda[k]
        } else {
            self.terms[k - 3].grad
        }
    }

    /// `u_h` and `∇u_h` for a global coefficient vector.
    pub fn interpolate(&self, c: &[f64]) -> (f64, [f64; 2]) {
        let mut u = 0.0;
        let mut g = [0.0; 2];
        for k in 0..self.len() {
            let ck = c[self.dof(k)];
            let gk = self.grad(k);
            u += ck * self.value(k);
            g[0] += ck * gk[0];
            g[1] += ck * gk[1];
        }
        (u, g)
    }
}

/// Summary of the per-element Gram diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GramSummary {
    pub min: f64,
    pub mean: f64,
    pub elements: usize,
}

#[derive(Clone)]
pub struct EnrichmentSpace {
    mesh: Arc<Mesh>,
    enriched: Vec<usize>,
    enrichments: Vec<Enrichment>,
    node_to_enr: Vec<Option<usize>>,
    patch_nodes: Vec<Vec<usize>>,
    slots: Vec<Vec<Slot>>,
    nodal: Vec<Vec<f64>>,
    distance: Option<Arc<dyn QuasiDistance>>,
    geometry: Option<InterfaceGeometry>,
    version: u64,
    cache_version: u64,
}

impl fmt::Debug for EnrichmentSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnrichmentSpace")
            .field("num_p1", &self.num_p1())
            .field("enriched", &self.enriched.len())
            .field("version", &self.version)
            .finish()
    }
}

impl EnrichmentSpace {
    /// `enriched_nodes` and `enrichments` are paired; they are stored sorted by node.
    pub fn new(mesh: Arc<Mesh>, enriched_nodes: &[usize], enrichments: Vec<Enrichment>) -> Result<Self> {
        if enriched_nodes.len() != enrichments.len() {
            return Err(NefemError::InvalidSpace(format!("{} enriched nodes but {} enrichments", enriched_nodes.len(), enrichments.len())));
        }
        let mut pairs: Vec<(usize, Enrichment)> = enriched_nodes.iter().copied().zip(enrichments).collect();
        pairs.sort_by_key(|p| p.0);
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(NefemError::InvalidSpace(format!("node {} enriched twice", w[0].0)));
            }
        }
        if let Some(&(i, _)) = pairs.iter().find(|p| p.0 >= mesh.num_nodes()) {
            return Err(NefemError::InvalidSpace(format!("node {i} is not a mesh node")));
        }
        let (enriched, enrichments): (Vec<usize>, Vec<Enrichment>) = pairs.into_iter().unzip();

        let mut node_to_enr = vec![None; mesh.num_nodes()];
        for (m, &i) in enriched.iter().enumerate() {
            node_to_enr[i] = Some(m);
        }
        let patch_nodes: Vec<Vec<usize>> = enriched.iter().map(|&i| mesh.patch_nodes(i)).collect();
        let mut slots = vec![Vec::new(); mesh.num_elements()];
        for (t, tri) in mesh.triangles().iter().enumerate() {
            for (local, &v) in tri.iter().enumerate() {
                if let Some(m) = node_to_enr[v] {
                    let pn = &patch_nodes[m];
                    let idx = tri.map(|w| pn.binary_search(&w).expect("patch contains element vertices"));
                    slots[t].push(Slot { local, m, idx });
                }
            }
        }
        let nodal = patch_nodes.iter().map(|p| vec![0.0; p.len()]).collect();
        let mut space = Self {
            mesh,
            enriched,
            enrichments,
            node_to_enr,
            patch_nodes,
            slots,
            nodal,
            distance: None,
            geometry: None,
            version: 1,
            cache_version: 0,
        };
        space.refresh_cache();
        Ok(space)
    }

    pub fn p1(mesh: Arc<Mesh>) -> Self {
        Self::new(mesh, &[], Vec::new()).expect("empty enrichment is valid")
    }

    /// Attaches the quasi-distance used by distance-mode networks.
    pub fn with_distance(mut self, distance: Arc<dyn QuasiDistance>, geometry: InterfaceGeometry) -> Self {
        self.distance = Some(distance);
        self.geometry = Some(geometry);
        self.version += 1;
        self.refresh_cache();
        self
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn num_p1(&self) -> usize {
        self.mesh.num_nodes()
    }

    pub fn num_enriched(&self) -> usize {
        self.enriched.len()
    }

    pub fn num_dofs(&self) -> usize {
        self.num_p1() + self.enriched.len()
    }

    pub fn enriched_nodes(&self) -> &[usize] {
        &self.enriched
    }

    pub fn enrichment_index(&self, node: usize) -> Option<usize> {
        self.node_to_enr[node]
    }

    pub fn enrichments(&self) -> &[Enrichment] {
        &self.enrichments
    }

    pub fn enrichment(&self, m: usize) -> &Enrichment {
        &self.enrichments[m]
    }

    /// Mutable access; invalidates the nodal cache.
    pub fn enrichment_mut(&mut self, m: usize) -> &mut Enrichment {
        self.version += 1;
        &mut self.enrichments[m]
    }

    pub fn enrichments_mut(&mut self) -> &mut [Enrichment] {
        self.version += 1;
        &mut self.enrichments
    }

    pub fn patch_nodes(&self, m: usize) -> &[usize] {
        &self.patch_nodes[m]
    }

    pub fn geometry(&self) -> Option<&InterfaceGeometry> {
        self.geometry.as_ref()
    }

    /// DoFs of the enrichments active on element `t`.
    pub fn element_enrichments(&self, t: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.slots[t].iter().map(|s| (s.local, s.m))
    }

    pub fn has_enrichment(&self, t: usize) -> bool {
        !self.slots[t].is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn is_fresh(&self) -> bool {
        self.cache_version == self.version
    }

    /// Side used for distance inputs when the caller does not specify one.
    pub fn side_of(&self, x: Point) -> Side {
        self.geometry.map_or(Side::Outside, |g| g.side(x))
    }

    pub(crate) fn distance_at(&self, m: usize, x: Point, side: Side) -> Option<DistanceInput> {
        if self.enrichments[m].needs_distance() {
            self.distance.as_ref().map(|d| d.eval(x, side))
        } else {
            None
        }
    }

    /// Re-evaluates every enrichment at the nodes of its patch.
    pub fn refresh_cache(&mut self) {
        for m in 0..self.enriched.len() {
            for k in 0..self.patch_nodes[m].len() {
                let p = self.mesh.node(self.patch_nodes[m][k]);
                let d = self.distance_at(m, p, self.side_of(p));
                self.nodal[m][k] = self.enrichments[m].value_grad(p, d).0;
            }
        }
        self.cache_version = self.version;
    }

    fn check_fresh(&self) -> Result<()> {
        if self.is_fresh() {
            Ok(())
        } else {
            Err(NefemError::StaleCache { cache: self.cache_version, params: self.version })
        }
    }

    /// Cached nodal values of enrichment `m` at the vertices of element `t`.
    pub fn vertex_values(&self, t: usize, m: usize) -> Option<[f64; 3]> {
        self.slots[t].iter().find(|s| s.m == m).map(|s| s.idx.map(|k| self.nodal[m][k]))
    }

    /// Basis functions active at `x` in element `t`. `side` selects the
    /// one-sided distance gradient in interface mode.
    pub fn eval_basis(&self, t: usize, x: Point, side: Option<Side>) -> Result<BasisEval> {
        self.check_fresh()?;
        let v = self.mesh.vertices(t);
        let lambda = self.mesh.barycentric(t, x);
        Ok(self.eval_basis_with(t, x, lambda, &barycentric_gradients(&v), side))
    }

    /// As [`eval_basis`](Self::eval_basis) with precomputed barycentrics; the
    /// caller guarantees the cache is fresh.
    pub(crate) fn eval_basis_with(
        &self,
        t: usize,
        x: Point,
        lambda: [f64; 3],
        grad_lambda: &[[f64; 2]; 3],
        side: Option<Side>,
    ) -> BasisEval {
        let mut out = BasisEval {
            lambda,
            grad_lambda: *grad_lambda,
            nodes: self.mesh.triangles()[t],
            terms: [EnrichmentTerm::default(); 3],
            n_terms: 0,
            num_p1: self.num_p1(),
        };
        let side = side.unwrap_or_else(|| self.side_of(x));
        for s in &self.slots[t] {
            let d = self.distance_at(s.m, x, side);
            let (nv, ng) = self.enrichments[s.m].value_grad(x, d);
            out.terms[out.n_terms] = self.term(s, nv, ng, &lambda, grad_lambda);
            out.n_terms += 1;
        }
        out
    }

    fn term(&self, s: &Slot, nv: f64, ng: [f64; 2], lambda: &[f64; 3], gl: &[[f64; 2]; 3]) -> EnrichmentTerm {
        let vals = s.idx.map(|k| self.nodal[s.m][k]);
        let ell = vals[0] * lambda[0] + vals[1] * lambda[1] + vals[2] * lambda[2];
        let ell_grad =
            [vals[0] * gl[0][0] + vals[1] * gl[1][0] + vals[2] * gl[2][0], vals[0] * gl[0][1] + vals[1] * gl[1][1] + vals[2] * gl[2][1]];
        let la = lambda[s.local];
        let gla = gl[s.local];
        let r = nv - ell;
        let rg = [ng[0] - ell_grad[0], ng[1] - ell_grad[1]];
        EnrichmentTerm {
            m: s.m,
            local: s.local,
            n_value: nv,
            n_grad: ng,
            ell,
            ell_grad,
            value: la * r,
            grad: [gla[0] * r + la * rg[0], gla[1] * r + la * rg[1]],
        }
    }

    /// `(dof, ΔB)` for each enrichment on element `t`; hats contribute nothing.
    pub fn eval_basis_laplacian(&self, t: usize, x: Point) -> Result<Vec<(usize, f64)>> {
        self.check_fresh()?;
        let v = self.mesh.vertices(t);
        let lambda = self.mesh.barycentric(t, x);
        let gl = barycentric_gradients(&v);
        let mut out = Vec::with_capacity(self.slots[t].len());
        for s in &self.slots[t] {
            let (nv, ng, lap) = self.enrichments[s.m].value_grad_laplacian(x)?;
            let term = self.term(s, nv, ng, &lambda, &gl);
            let gla = gl[s.local];
            let rg = [ng[0] - term.ell_grad[0], ng[1] - term.ell_grad[1]];
            let value = 2.0 * (gla[0] * rg[0] + gla[1] * rg[1]) + lambda[s.local] * lap;
            out.push((self.num_p1() + s.m, value));
        }
        Ok(out)
    }

    /// Smallest eigenvalue of the normalized L² Gram matrix of the element's
    /// enrichment functions, using a degree-20 rule.
    pub fn gram_diagnostic(&self, t: usize) -> Result<f64> {
        self.check_fresh()?;
        let k = self.slots[t].len();
        if k == 0 {
            return Err(NefemError::InvalidSpace(format!("element {t} carries no enrichment")));
        }
        let v = self.mesh.vertices(t);
        let rule = map_rule(reference_rule(20)?, &v)?;
        let gl = barycentric_gradients(&v);
        let mut columns = vec![Vec::with_capacity(rule.points.len()); k];
        for x in &rule.points {
            let b = self.eval_basis_with(t, *x, self.mesh.barycentric(t, *x), &gl, None);
            for (col, term) in columns.iter_mut().zip(b.enrichment_terms()) {
                col.push(term.value);
            }
        }
        normalized_gram_min_eigenvalue(&columns, &rule.weights)
    }

    /// Gram diagnostic over every element with at least one enrichment.
    pub fn gram_summary(&self) -> Result<Option<GramSummary>> {
        let mut vals = Vec::new();
        for t in 0..self.mesh.num_elements() {
            if self.has_enrichment(t) {
                vals.push(self.gram_diagnostic(t)?);
            }
        }
        if vals.is_empty() {
            return Ok(None);
        }
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        Ok(Some(GramSummary { min, mean, elements: vals.len() }))
    }
}

/// Smallest eigenvalue of the Gram matrix of `columns` (sampled functions)
/// after normalizing each to unit weighted L² norm. Zero-norm columns give 0.
pub fn normalized_gram_min_eigenvalue(columns: &[Vec<f64>], weights: &[f64]) -> Result<f64> {
    let k = columns.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).zip(weights).map(|((x, y), w)| w * x * y).sum::<f64>();
    let d: Vec<f64> = columns.iter().map(|c| dot(c, c)).collect();
    if d.iter().any(|&x| x <= 0.0) {
        return Ok(0.0);
    }
    let h = Mat::from_fn(k, k, |i, j| dot(&columns[i], &columns[j]) / (d[i] * d[j]).sqrt());
    let ev = h.self_adjoint_eigenvalues(LinSide::Lower).map_err(|e| NefemError::NotPositiveDefinite(format!("{e:?}")))?;
    Ok(ev.iter().copied().fold(f64::INFINITY, f64::min).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Rect;
    use crate::neuralnet::{mix_seed, MlpEnrichment};
    use crate::problems::CircleDistance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net_space(n: usize, seed: u64) -> EnrichmentSpace {
        let mesh = Arc::new(Mesh::unit_square(n).unwrap());
        let nodes = mesh.interior_nodes();
        let nets = nodes
            .iter()
            .map(|&i| {
                let mut net =
                    MlpEnrichment::new(&[2, 8, 8, 1], &[3, 2], InputMode::Spatial, mesh.node(i), mix_seed(seed, i as u64)).unwrap();
                net.set_slopes(0.5, 0.6);
                Enrichment::Network(net)
            })
            .collect();
        EnrichmentSpace::new(mesh, &nodes, nets).unwrap()
    }

    #[test]
    fn pure_p1_space() {
        let s = EnrichmentSpace::p1(Arc::new(Mesh::unit_square(4).unwrap()));
        assert_eq!(s.num_dofs(), 25);
        assert_eq!(s.num_enriched(), 0);
    }

    #[test]
    fn all_interior_dof_count() {
        let mesh = Arc::new(Mesh::unit_square(32).unwrap());
        let nodes = mesh.interior_nodes();
        let nets = nodes
            .iter()
            .map(|&i| Enrichment::Network(MlpEnrichment::new(&[2, 20, 20, 1], &[150, 2], InputMode::Spatial, mesh.node(i), 0).unwrap()))
            .collect();
        let s = EnrichmentSpace::new(mesh, &nodes, nets).unwrap();
        assert_eq!(s.num_dofs(), 2050);
    }

    #[test]
    fn cut_node_dof_count() {
        let mesh = Arc::new(Mesh::structured(32, 32, Rect::square(-1.0, 1.0)).unwrap());
        let g = InterfaceGeometry::new([0.0, 0.15], 0.5);
        let cls = mesh.classify_interface(&g);
        let nets = cls
            .cut_nodes
            .iter()
            .map(|&i| {
                Enrichment::Network(MlpEnrichment::new(&[3, 20, 20, 1], &[10, 2], InputMode::SpatialDistance, mesh.node(i), 1).unwrap())
            })
            .collect();
        let s = EnrichmentSpace::new(mesh.clone(), &cls.cut_nodes, nets).unwrap().with_distance(Arc::new(CircleDistance::absolute(g)), g);
        assert_eq!(s.num_enriched(), cls.cut_nodes.len());
        assert_eq!(s.num_dofs(), mesh.num_nodes() + cls.cut_nodes.len());
    }

    #[test]
    fn duplicate_nodes_rejected() {
        let mesh = Arc::new(Mesh::unit_square(2).unwrap());
        let e = || Enrichment::Analytic(AnalyticEnrichment::linear(0.0, [1.0, 0.0]));
        assert!(EnrichmentSpace::new(mesh, &[4, 4], vec![e(), e()]).is_err());
    }

    #[test]
    fn enrichments_vanish_at_nodes_and_hats_sum_to_one() {
        let s = net_space(4, 3);
        let mesh = s.mesh().clone();
        for t in 0..mesh.num_elements() {
            for (k, &v) in mesh.triangles()[t].iter().enumerate() {
                let b = s.eval_basis(t, mesh.node(v), None).unwrap();
                assert!((b.lambda[k] - 1.0).abs() < 1e-12);
                for term in b.enrichment_terms() {
                    assert!(term.value.abs() < 1e-12);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x = [rng.random::<f64>(), rng.random::<f64>()];
            let t = mesh.locate_point(x).unwrap();
            let b = s.eval_basis(t, x, None).unwrap();
            assert!((b.lambda.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let gs = b.grad_lambda.iter().fold([0.0, 0.0], |a, g| [a[0] + g[0], a[1] + g[1]]);
            assert!(gs[0].abs() < 1e-12 && gs[1].abs() < 1e-12);
        }
    }

    #[test]
    fn stale_cache_is_detected() {
        let mut s = net_space(3, 1);
        s.enrichment_mut(0).as_network_mut().unwrap().params_mut()[0] += 0.1;
        assert!(matches!(s.eval_basis(0, [0.1, 0.05], None), Err(NefemError::StaleCache { .. })));
        s.refresh_cache();
        assert!(s.eval_basis(0, [0.1, 0.05], None).is_ok());
    }

    #[test]
    fn enrichment_has_patch_support() {
        let s = net_space(4, 5);
        let mesh = s.mesh().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let x = [rng.random::<f64>(), rng.random::<f64>()];
            let t = mesh.locate_point(x).unwrap();
            let b = s.eval_basis(t, x, None).unwrap();
            let tri = mesh.triangles()[t];
            for term in b.enrichment_terms() {
                assert!(tri.contains(&s.enriched_nodes()[term.m]));
            }
        }
    }

    #[test]
    fn linear_stub_is_annihilated() {
        let mesh = Arc::new(Mesh::unit_square(4).unwrap());
        let nodes = mesh.interior_nodes();
        let e = nodes.iter().map(|_| Enrichment::Analytic(AnalyticEnrichment::linear(0.3, [1.0, -2.0]))).collect();
        let s = EnrichmentSpace::new(mesh.clone(), &nodes, e).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let x = [rng.random::<f64>(), rng.random::<f64>()];
            let t = mesh.locate_point(x).unwrap();
            for term in s.eval_basis(t, x, None).unwrap().enrichment_terms() {
                assert!(term.value.abs() < 1e-10 && term.grad[0].abs() < 1e-10 && term.grad[1].abs() < 1e-10);
            }
        }
    }

    #[test]
    fn quadratic_stub_laplacian_matches_symbolic() {
        let mesh = Arc::new(Mesh::unit_square(1).unwrap());
        let e = Enrichment::Analytic(AnalyticEnrichment::new("x^2", |x| (x[0] * x[0], [2.0 * x[0], 0.0], 2.0)));
        // Node 1 = (1, 0) belongs to both elements of the 1×1 mesh.
        let s = EnrichmentSpace::new(mesh.clone(), &[1], vec![e]).unwrap();
        let x = [0.7, 0.2];
        let t = mesh.locate_point(x).unwrap();
        let lap = s.eval_basis_laplacian(t, x).unwrap();
        // Element 0 = [(0,0), (1,0), (1,1)]: L_1 = x − y, ℓ = x (x² interpolated at x ∈ {0, 1}).
        assert_eq!(t, 0);
        let (l1, dl1) = (x[0] - x[1], [1.0, -1.0]);
        let expected = 2.0 * dl1[0] * (2.0 * x[0] - 1.0) + 2.0 * l1;
        assert_eq!(lap.len(), 1);
        assert!((lap[0].1 - expected).abs() < 1e-13, "{} vs {expected}", lap[0].1);
    }

    #[test]
    fn network_laplacian_matches_finite_differences() {
        let s = net_space(3, 7);
        let mesh = s.mesh().clone();
        let t = 5;
        let x = mesh.centroid(t);
        let lap = s.eval_basis_laplacian(t, x).unwrap();
        let h = 1e-4;
        let value = |y: Point, k: usize| s.eval_basis(t, y, None).unwrap().terms[k].value;
        for (k, &(_, l)) in lap.iter().enumerate() {
            let fd = (value([x[0] + h, x[1]], k) + value([x[0] - h, x[1]], k) + value([x[0], x[1] + h], k) + value([x[0], x[1] - h], k)
                - 4.0 * value(x, k))
                / (h * h);
            assert!((l - fd).abs() <= 1e-4 * l.abs().max(1.0), "{l} vs {fd}");
        }
    }

    #[test]
    fn basis_gradient_matches_finite_differences() {
        let s = net_space(3, 8);
        let mesh = s.mesh().clone();
        let t = 7;
        let x = mesh.centroid(t);
        let b = s.eval_basis(t, x, None).unwrap();
        let h = 1e-6;
        for k in 0..b.n_terms {
            let f = |y: Point| s.eval_basis(t, y, None).unwrap().terms[k].value;
            let fd = [(f([x[0] + h, x[1]]) - f([x[0] - h, x[1]])) / (2.0 * h), (f([x[0], x[1] + h]) - f([x[0], x[1] - h])) / (2.0 * h)];
            for c in 0..2 {
                assert!((b.terms[k].grad[c] - fd[c]).abs() < 1e-7 * b.terms[k].grad[c].abs().max(1.0));
            }
        }
    }

    #[test]
    fn laplacian_requires_spatial_mode() {
        let mesh = Arc::new(Mesh::structured(4, 4, Rect::square(-1.0, 1.0)).unwrap());
        let g = InterfaceGeometry::new([0.0, 0.15], 0.5);
        let net = MlpEnrichment::new(&[3, 4, 4, 1], &[1, 1], InputMode::SpatialDistance, mesh.node(12), 0).unwrap();
        let s = EnrichmentSpace::new(mesh.clone(), &[12], vec![Enrichment::Network(net)])
            .unwrap()
            .with_distance(Arc::new(CircleDistance::absolute(g)), g);
        let t = mesh.node_patch(12)[0];
        assert!(matches!(s.eval_basis_laplacian(t, mesh.centroid(t)), Err(NefemError::DistanceModeUnsupported)));
    }

    #[test]
    fn gram_single_and_degenerate() {
        let mesh = Arc::new(Mesh::unit_square(2).unwrap());
        let net = MlpEnrichment::new(&[2, 6, 6, 1], &[2, 1], InputMode::Spatial, mesh.node(4), 3).unwrap();
        let s = EnrichmentSpace::new(mesh.clone(), &[4], vec![Enrichment::Network(net)]).unwrap();
        let t = mesh.node_patch(4)[0];
        assert!((s.gram_diagnostic(t).unwrap() - 1.0).abs() < 1e-12);

        // Two copies of the same enrichment function are exactly dependent.
        let v = mesh.vertices(t);
        let rule = map_rule(reference_rule(20).unwrap(), &v).unwrap();
        let col: Vec<f64> = rule.points.iter().map(|x| s.eval_basis(t, *x, None).unwrap().terms[0].value).collect();
        let lam = normalized_gram_min_eigenvalue(&[col.clone(), col], &rule.weights).unwrap();
        assert!(lam < 1e-8, "{lam}");
    }

    #[test]
    fn gram_matches_dense_eigensolve() {
        let mesh = Arc::new(Mesh::unit_square(2).unwrap());
        let nodes = [0usize, 1, 4];
        let nets = nodes
            .iter()
            .map(|&i| {
                Enrichment::Network(MlpEnrichment::new(&[2, 6, 6, 1], &[2, 1], InputMode::Spatial, mesh.node(i), 20 + i as u64).unwrap())
            })
            .collect();
        let s = EnrichmentSpace::new(mesh.clone(), &nodes, nets).unwrap();
        let t = 0;
        assert_eq!(s.element_enrichments(t).count(), 3);
        let lam = s.gram_diagnostic(t).unwrap();
        // Oracle: Gram matrix from a composite rule (degree-20 rule on 16 sub-triangles)
        // and the closed-form 3×3 symmetric eigenvalue formula.
        let v = mesh.vertices(t);
        let mut g = [[0.0; 3]; 3];
        let n = 4;
        let rule = reference_rule(20).unwrap();
        for i in 0..n {
            for j in 0..n - i {
                let p = |a: usize, b: usize| {
                    let (a, b) = (a as f64 / n as f64, b as f64 / n as f64);
                    [
                        v[0][0] + a * (v[1][0] - v[0][0]) + b * (v[2][0] - v[0][0]),
                        v[0][1] + a * (v[1][1] - v[0][1]) + b * (v[2][1] - v[0][1]),
                    ]
                };
                let mut subs = vec![[p(i, j), p(i + 1, j), p(i, j + 1)]];
                if i + j + 1 < n {
                    subs.push([p(i + 1, j), p(i + 1, j + 1), p(i, j + 1)]);
                }
                for sub in subs {
                    let mr = map_rule(rule, &sub).unwrap();
                    for (x, w) in mr.points.iter().zip(&mr.weights) {
                        let b = s.eval_basis(t, *x, None).unwrap();
                        for a in 0..3 {
                            for c in 0..3 {
                                g[a][c] += w * b.terms[a].value * b.terms[c].value;
                            }
                        }
                    }
                }
            }
        }
        let h: Vec<Vec<f64>> = (0..3).map(|a| (0..3).map(|c| g[a][c] / (g[a][a] * g[c][c]).sqrt()).collect()).collect();
        // Trigonometric solution of the characteristic cubic.
        let p1 = h[0][1].powi(2) + h[0][2].powi(2) + h[1][2].powi(2);
        let q = (h[0][0] + h[1][1] + h[2][2]) / 3.0;
        let p2 = (h[0][0] - q).powi(2) + (h[1][1] - q).powi(2) + (h[2][2] - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let bm: Vec<Vec<f64>> = (0..3).map(|a| (0..3).map(|c| (h[a][c] - if a == c { q } else { 0.0 }) / p).collect()).collect();
        let det = bm[0][0] * (bm[1][1] * bm[2][2] - bm[1][2] * bm[2][1]) - bm[0][1] * (bm[1][0] * bm[2][2] - bm[1][2] * bm[2][0])
            + bm[0][2] * (bm[1][0] * bm[2][1] - bm[1][1] * bm[2][0]);
        let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
        let lmin = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        assert!((lam - lmin).abs() < 1e-10, "{lam} vs {lmin}");
    }
}
