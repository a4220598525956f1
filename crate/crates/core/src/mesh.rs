//! Structured triangulations of a rectangle and circular interface geometry.
//!
//! Every cell `(i, j)` of an `nx × ny` grid is split along the diagonal
//! from its lower-left to its upper-right corner into two counter-clockwise
//! triangles:
//!
//! ```text
//!  n01 ------ n11
//!   |  2c+1 /  |
//!   |     /    |
//!   |   /  2c  |
//!  n00 ------ n10
//! ```
//!
//! Nodes are numbered row-major (`j * (nx + 1) + i`) and cell `c = j * nx + i`
//! owns triangles `2c` (below the diagonal) and `2c + 1` (above it).

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{NefemError, Result};

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub const UNIT: Rect = Rect { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };

    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Self { x0, x1, y0, y1 }
    }

    pub fn square(lo: f64, hi: f64) -> Self {
        Self::new(lo, hi, lo, hi)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    /// Endpoints, smaller node id first.
    pub nodes: [usize; 2],
    /// Adjacent triangles; the second slot is `None` on the boundary.
    pub elements: [Option<usize>; 2],
    pub boundary: bool,
}

impl Edge {
    pub fn is_interior(&self) -> bool {
        !self.boundary
    }
}

#[derive(Debug, Clone)]
pub struct Mesh {
    nx: usize,
    ny: usize,
    bounds: Rect,
    nodes: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    edges: Vec<Edge>,
    /// `element_edges[t][k]` is the edge joining local vertices `k` and `k + 1`.
    element_edges: Vec<[usize; 3]>,
    node_patches: Vec<Vec<usize>>,
    boundary_nodes: Vec<bool>,
    h: f64,
}

impl Mesh {
    /// Builds the structured mesh over `bounds` with `nx × ny` cells.
    pub fn structured(nx: usize, ny: usize, bounds: Rect) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(NefemError::InvalidMesh(format!("cell counts must be positive, got {nx}x{ny}")));
        }
        if !(bounds.width() > 0.0 && bounds.height() > 0.0) || !bounds.area().is_finite() {
            return Err(NefemError::InvalidMesh(format!("degenerate bounds {bounds:?}")));
        }

        let dx = bounds.width() / nx as f64;
        let dy = bounds.height() / ny as f64;
        let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            // Pin the last row/column to the exact bound.
            let y = if j == ny { bounds.y1 } else { bounds.y0 + j as f64 * dy };
            for i in 0..=nx {
                let x = if i == nx { bounds.x1 } else { bounds.x0 + i as f64 * dx };
                nodes.push([x, y]);
            }
        }

        let node = |i: usize, j: usize| j * (nx + 1) + i;
        let mut triangles = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let (n00, n10, n11, n01) = (node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1));
                triangles.push([n00, n10, n11]);
                triangles.push([n00, n11, n01]);
            }
        }

        let mut edge_index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut edges: Vec<Edge> = Vec::new();
        let mut element_edges = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            let mut local = [0usize; 3];
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                let id = *edge_index.entry(key).or_insert_with(|| {
                    edges.push(Edge { nodes: [key.0, key.1], elements: [None, None], boundary: true });
                    edges.len() - 1
                });
                let e = &mut edges[id];
                if e.elements[0].is_none() {
                    e.elements[0] = Some(t);
                } else {
                    e.elements[1] = Some(t);
                    e.boundary = false;
                }
                local[k] = id;
            }
            element_edges.push(local);
        }

        let mut node_patches = vec![Vec::new(); nodes.len()];
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                node_patches[v].push(t);
            }
        }

        let mut boundary_nodes = vec![false; nodes.len()];
        for e in edges.iter().filter(|e| e.boundary) {
            boundary_nodes[e.nodes[0]] = true;
            boundary_nodes[e.nodes[1]] = true;
        }

        let h = (dx * dx + dy * dy).sqrt();
        Ok(Self { nx, ny, bounds, nodes, triangles, edges, element_edges, node_patches, boundary_nodes, h })
    }

    pub fn unit_square(n: usize) -> Result<Self> {
        Self::structured(n, n, Rect::UNIT)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn bounds(&self) -> Rect {
        self.bounds
    }

    /// Longest edge length.
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> Point {
        self.nodes[i]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn num_elements(&self) -> usize {
        self.triangles.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn element_edges(&self, t: usize) -> [usize; 3] {
        self.element_edges[t]
    }

    pub fn node_patch(&self, i: usize) -> &[usize] {
        &self.node_patches[i]
    }

    pub fn is_boundary_node(&self, i: usize) -> bool {
        self.boundary_nodes[i]
    }

    pub fn interior_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&i| !self.boundary_nodes[i]).collect()
    }

    pub fn boundary_node_ids(&self) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&i| self.boundary_nodes[i]).collect()
    }

    pub fn vertices(&self, t: usize) -> [Point; 3] {
        let [a, b, c] = self.triangles[t];
        [self.nodes[a], self.nodes[b], self.nodes[c]]
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        triangle_signed_area(&self.vertices(t))
    }

    pub fn centroid(&self, t: usize) -> Point {
        let [a, b, c] = self.vertices(t);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    /// Longest edge of element `t`.
    pub fn element_diameter(&self, t: usize) -> f64 {
        let v = self.vertices(t);
        (0..3).map(|k| dist(v[k], v[(k + 1) % 3])).fold(0.0, f64::max)
    }

    pub fn edge_length(&self, e: usize) -> f64 {
        let [a, b] = self.edges[e].nodes;
        dist(self.nodes[a], self.nodes[b])
    }

    /// Nodes sharing an element with `i`, including `i`, sorted.
    pub fn patch_nodes(&self, i: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.node_patches[i].iter().flat_map(|&t| self.triangles[t]).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Barycentric coordinates of `x` with respect to element `t`.
    pub fn barycentric(&self, t: usize, x: Point) -> [f64; 3] {
        barycentric(&self.vertices(t), x)
    }

    /// Returns the triangle containing `x`; on shared edges and vertices the
    /// lowest containing element id wins.
    pub fn locate_point(&self, x: Point) -> Result<usize> {
        let tol = 1e-12 * self.h;
        let b = self.bounds;
        if !(x[0] >= b.x0 - tol && x[0] <= b.x1 + tol && x[1] >= b.y0 - tol && x[1] <= b.y1 + tol) {
            return Err(NefemError::PointOutsideDomain { x: x[0], y: x[1] });
        }
        let dx = b.width() / self.nx as f64;
        let dy = b.height() / self.ny as f64;
        let fi = (x[0] - b.x0) / dx;
        let fj = (x[1] - b.y0) / dy;
        let ci = (fi.floor().max(0.0) as usize).min(self.nx - 1);
        let cj = (fj.floor().max(0.0) as usize).min(self.ny - 1);

        let mut best: Option<usize> = None;
        for j in cj.saturating_sub(1)..=(cj + 1).min(self.ny - 1) {
            for i in ci.saturating_sub(1)..=(ci + 1).min(self.nx - 1) {
                let c = j * self.nx + i;
                for t in [2 * c, 2 * c + 1] {
                    if best.is_some_and(|bt| bt <= t) {
                        continue;
                    }
                    let l = self.barycentric(t, x);
                    if l.iter().all(|&v| v >= -1e-12) {
                        best = Some(t);
                    }
                }
            }
        }
        best.ok_or(NefemError::PointOutsideDomain { x: x[0], y: x[1] })
    }

    /// Classifies every element against a circular interface.
    pub fn classify_interface(&self, geom: &InterfaceGeometry) -> InterfaceClassification {
        let snap = 1e-12 * self.h;
        let mut tags = Vec::with_capacity(self.num_elements());
        let mut snapped = vec![false; self.num_nodes()];
        for (i, &p) in self.nodes.iter().enumerate() {
            snapped[i] = geom.level_set(p).abs() <= snap;
        }
        let mut cut_nodes = Vec::new();
        for (t, tri) in self.triangles.iter().enumerate() {
            let phi: Vec<f64> = tri.iter().map(|&v| if snapped[v] { 0.0 } else { geom.level_set(self.nodes[v]) }).collect();
            let has_neg = phi.iter().any(|&p| p < 0.0);
            let has_pos = phi.iter().any(|&p| p > 0.0);
            let has_zero = phi.contains(&0.0);
            let v = self.vertices(t);
            let edge_crossing = (0..3).any(|k| !geom.segment_crossings(v[k], v[(k + 1) % 3]).is_empty());
            let tag = if (has_neg && has_pos) || has_zero || edge_crossing {
                ElementSide::Cut
            } else if has_neg {
                ElementSide::Inside
            } else {
                ElementSide::Outside
            };
            if tag == ElementSide::Cut {
                cut_nodes.extend_from_slice(tri);
            }
            tags.push(tag);
        }
        cut_nodes.sort_unstable();
        cut_nodes.dedup();
        InterfaceClassification { tags, cut_nodes, snapped_vertices: snapped.iter().filter(|&&s| s).count() }
    }

    /// Plain-text listing of nodes and elements.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# nodes {}", self.num_nodes())?;
        for (i, p) in self.nodes.iter().enumerate() {
            writeln!(w, "{i} {:.17e} {:.17e}", p[0], p[1])?;
        }
        writeln!(w, "# elements {}", self.num_elements())?;
        for (t, tri) in self.triangles.iter().enumerate() {
            writeln!(w, "{t} {} {} {}", tri[0], tri[1], tri[2])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ElementSide {
    Inside,
    Outside,
    Cut,
}

#[derive(Debug, Clone)]
pub struct InterfaceClassification {
    pub tags: Vec<ElementSide>,
    /// Vertices of cut elements, sorted.
    pub cut_nodes: Vec<usize>,
    /// Vertices snapped onto the interface.
    pub snapped_vertices: usize,
}

impl InterfaceClassification {
    pub fn cut_elements(&self) -> Vec<usize> {
        (0..self.tags.len()).filter(|&t| self.tags[t] == ElementSide::Cut).collect()
    }

    pub fn is_cut(&self, t: usize) -> bool {
        self.tags[t] == ElementSide::Cut
    }
}

/// Which subdomain a point belongs to: `Outside` is side 0, `Inside` side 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Side {
    #[default]
    Outside,
    Inside,
}

impl Side {
    pub fn index(self) -> usize {
        match self {
            Side::Outside => 0,
            Side::Inside => 1,
        }
    }
}

/// Circle `‖x − center‖ = radius` splitting the domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterfaceGeometry {
    pub center: Point,
    pub radius: f64,
}

impl InterfaceGeometry {
    pub fn new(center: Point, radius: f64) -> Self {
        Self { center, radius }
    }

    pub fn level_set(&self, x: Point) -> f64 {
        dist(x, self.center) - self.radius
    }

    pub fn side(&self, x: Point) -> Side {
        if self.level_set(x) < 0.0 {
            Side::Inside
        } else {
            Side::Outside
        }
    }

    /// Parameters `s ∈ (0, 1)` where `a + s (b − a)` meets the circle, ascending.
    pub fn segment_crossings(&self, a: Point, b: Point) -> Vec<f64> {
        let d = [b[0] - a[0], b[1] - a[1]];
        let f = [a[0] - self.center[0], a[1] - self.center[1]];
        let qa = d[0] * d[0] + d[1] * d[1];
        let qb = 2.0 * (f[0] * d[0] + f[1] * d[1]);
        let qc = f[0] * f[0] + f[1] * f[1] - self.radius * self.radius;
        let disc = qb * qb - 4.0 * qa * qc;
        // A chord shorter than 1e-6 of the segment is a tangency, not a crossing.
        if qa == 0.0 || disc <= 1e-12 * qa * qa {
            return Vec::new();
        }
        let sq = disc.sqrt();
        // Numerically stable pair of roots.
        let q = -0.5 * (qb + qb.signum() * sq);
        let (mut r1, mut r2) = if q != 0.0 { (q / qa, qc / q) } else { (0.0, 0.0) };
        if r1 > r2 {
            std::mem::swap(&mut r1, &mut r2);
        }
        let mut out = Vec::new();
        for r in [r1, r2] {
            if r > 0.0 && r < 1.0 && out.last().is_none_or(|&l: &f64| (r - l).abs() > 0.0) {
                out.push(r);
            }
        }
        out
    }
}

pub fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn triangle_signed_area(v: &[Point; 3]) -> f64 {
    0.5 * ((v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1]))
}

pub fn barycentric(v: &[Point; 3], x: Point) -> [f64; 3] {
    let det = (v[1][0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (v[1][1] - v[0][1]);
    let l1 = ((x[0] - v[0][0]) * (v[2][1] - v[0][1]) - (v[2][0] - v[0][0]) * (x[1] - v[0][1])) / det;
    let l2 = ((v[1][0] - v[0][0]) * (x[1] - v[0][1]) - (x[0] - v[0][0]) * (v[1][1] - v[0][1])) / det;
    [1.0 - l1 - l2, l1, l2]
}

/// Constant gradients of the three barycentric functions of a triangle.
pub fn barycentric_gradients(v: &[Point; 3]) -> [[f64; 2]; 3] {
    let det = 2.0 * triangle_signed_area(v);
    let g1 = [(v[2][1] - v[0][1]) / det, -(v[2][0] - v[0][0]) / det];
    let g2 = [-(v[1][1] - v[0][1]) / det, (v[1][0] - v[0][0]) / det];
    [[-g1[0] - g2[0], -g1[1] - g2[1]], g1, g2]
}
