//! Symmetric triangle rules, affine mapping, Gauss–Legendre edge rules and
//! interface-aligned composite rules for cut elements.

mod tables;

use std::sync::OnceLock;

use crate::error::{NefemError, Result};
use crate::mesh::{barycentric, dist, triangle_signed_area, InterfaceGeometry, Point, Side};

/// Highest exactness degree among the embedded rules.
pub const MAX_DEGREE: usize = 20;

/// Default number of Gauss–Legendre points on element edges.
pub const DEFAULT_EDGE_POINTS: usize = 25;

/// A rule on the reference triangle `(0,0), (1,0), (0,1)`, stored in
/// barycentric coordinates with weights normalized to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Cartesian coordinates on the reference triangle.
    pub fn reference_points(&self) -> impl Iterator<Item = Point> + '_ {
        self.points.iter().map(|l| [l[1], l[2]])
    }
}

/// Result of the monomial exactness check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonomialCheck {
    pub max_rel_err: f64,
    pub worst: (usize, usize),
    pub monomials: usize,
}

/// `∫_T̂ x^p y^q = p! q! / (p + q + 2)!` on the reference triangle.
pub fn reference_monomial_integral(p: usize, q: usize) -> f64 {
    // p!q!/(p+q+2)! = 1 / ((p+q+2)(p+q+1) binom(p+q, p))
    let n = p + q;
    let mut binom = 1.0f64;
    for k in 0..p.min(q) {
        binom = binom * (n - k) as f64 / (k + 1) as f64;
    }
    1.0 / ((n + 2) as f64 * (n + 1) as f64 * binom)
}

/// Checks every monomial `x^p y^q` with `p + q ≤ rule.degree`.
pub fn check_monomials(rule: &QuadratureRule) -> MonomialCheck {
    let mut out = MonomialCheck { max_rel_err: 0.0, worst: (0, 0), monomials: 0 };
    for n in 0..=rule.degree {
        for p in 0..=n {
            let q = n - p;
            let approx: f64 =
                rule.points.iter().zip(&rule.weights).map(|(l, w)| w * l[1].powi(p as i32) * l[2].powi(q as i32)).sum::<f64>() * 0.5;
            let exact = reference_monomial_integral(p, q);
            let rel = ((approx - exact) / exact).abs();
            if rel > out.max_rel_err {
                out.max_rel_err = rel;
                out.worst = (p, q);
            }
            out.monomials += 1;
        }
    }
    out
}

/// Validates positivity, normalization and exactness to `tol` relative.
pub fn validate_rule(rule: &QuadratureRule, tol: f64) -> Result<MonomialCheck> {
    if let Some(w) = rule.weights.iter().find(|&&w| !(w > 0.0)) {
        return Err(NefemError::QuadratureCheck { degree: rule.degree, p: 0, q: 0, rel_err: *w });
    }
    let check = check_monomials(rule);
    if check.max_rel_err > tol {
        return Err(NefemError::QuadratureCheck { degree: rule.degree, p: check.worst.0, q: check.worst.1, rel_err: check.max_rel_err });
    }
    Ok(check)
}

fn embedded_rules() -> &'static [QuadratureRule] {
    static RULES: OnceLock<Vec<QuadratureRule>> = OnceLock::new();
    RULES.get_or_init(|| {
        let rules: Vec<QuadratureRule> = tables::ORBIT_RULES.iter().map(|o| o.expand()).collect();
        for r in &rules {
            if let Err(e) = validate_rule(r, 1e-12) {
                panic!("embedded quadrature table is corrupt: {e}");
            }
        }
        rules
    })
}

/// Degrees of the embedded rules, ascending.
pub fn embedded_degrees() -> Vec<usize> {
    embedded_rules().iter().map(|r| r.degree).collect()
}

/// Smallest embedded rule of degree at least `requested_degree`.
pub fn reference_rule(requested_degree: usize) -> Result<&'static QuadratureRule> {
    embedded_rules()
        .iter()
        .find(|r| r.degree >= requested_degree)
        .ok_or(NefemError::UnsupportedDegree { requested: requested_degree, max: MAX_DEGREE })
}

/// Quadrature points and weights in physical coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MappedRule {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
}

impl MappedRule {
    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Maps `rule` onto a triangle with positive orientation.
pub fn map_rule(rule: &QuadratureRule, tri: &[Point; 3]) -> Result<MappedRule> {
    let area = triangle_signed_area(tri);
    if !(area > 0.0) {
        return Err(NefemError::DegenerateElement(usize::MAX));
    }
    let mut out = MappedRule { points: Vec::with_capacity(rule.len()), weights: Vec::with_capacity(rule.len()) };
    push_mapped(rule, tri, area, &mut out.points, &mut out.weights);
    Ok(out)
}

fn push_mapped(rule: &QuadratureRule, tri: &[Point; 3], area: f64, pts: &mut Vec<Point>, wts: &mut Vec<f64>) {
    for (l, &w) in rule.points.iter().zip(&rule.weights) {
        pts.push([l[0] * tri[0][0] + l[1] * tri[1][0] + l[2] * tri[2][0], l[0] * tri[0][1] + l[1] * tri[1][1] + l[2] * tri[2][1]]);
        wts.push(w * area);
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, then Newton on P_n.
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
                p1 = z;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        if n == 1 {
            z = 0.0;
            dp = 1.0;
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

/// Gauss–Legendre rule with `order` points on the segment `a → b`.
pub fn edge_rule(order: usize, a: Point, b: Point) -> Result<MappedRule> {
    let len = dist(a, b);
    if order == 0 || !(len > 0.0) {
        return Err(NefemError::DegenerateElement(usize::MAX));
    }
    let (xs, ws) = gauss_legendre(order);
    let points = xs
        .iter()
        .map(|&s| {
            let t = 0.5 * (s + 1.0);
            [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
        })
        .collect();
    let weights = ws.iter().map(|&w| 0.5 * w * len).collect();
    Ok(MappedRule { points, weights })
}

/// Composite rule on a cut element with a per-point side tag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CutRule {
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
    pub sides: Vec<Side>,
    /// The interface only grazed the element; the base rule was used unsplit.
    pub grazing: bool,
}

/// Splits a cut triangle along the chord joining its two interface crossings
/// and applies `base` on every sub-triangle. Side tags come from the exact
/// level set at each mapped point.
pub fn cut_element_rule(element: usize, tri: &[Point; 3], geom: &InterfaceGeometry, base: &QuadratureRule) -> Result<CutRule> {
    let area = triangle_signed_area(tri);
    if !(area > 0.0) {
        return Err(NefemError::DegenerateElement(element));
    }
    let h = (0..3).map(|k| dist(tri[k], tri[(k + 1) % 3])).fold(0.0, f64::max);
    let snap = 1e-12 * h;
    let phi: Vec<f64> = tri
        .iter()
        .map(|&p| {
            let v = geom.level_set(p);
            if v.abs() <= snap {
                0.0
            } else {
                v
            }
        })
        .collect();
    let crosses_edge = (0..3).any(|k| !geom.segment_crossings(tri[k], tri[(k + 1) % 3]).is_empty());
    let signs_differ = phi.iter().any(|&p| p < 0.0) && phi.iter().any(|&p| p > 0.0);
    if !signs_differ && !crosses_edge && !phi.contains(&0.0) {
        return Err(NefemError::ElementNotCut(element));
    }

    let subs = split_along_chord(tri, &phi, geom);
    let mut out = CutRule::default();
    match subs {
        Some(subs) => {
            for s in &subs {
                let a = triangle_signed_area(s);
                if a > 0.0 {
                    push_mapped(base, s, a, &mut out.points, &mut out.weights);
                }
            }
        }
        None => {
            log::debug!("element {element}: interface grazes the element, integrating unsplit");
            out.grazing = true;
            push_mapped(base, tri, area, &mut out.points, &mut out.weights);
        }
    }
    out.sides = out.points.iter().map(|&p| geom.side(p)).collect();
    Ok(out)
}

fn lerp(a: Point, b: Point, s: f64) -> Point {
    [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]
}

/// Sub-triangles (positively oriented) of a chord split, or `None` when the
/// interface does not separate the vertices.
fn split_along_chord(tri: &[Point; 3], phi: &[f64], geom: &InterfaceGeometry) -> Option<Vec<[Point; 3]>> {
    let sign = |v: f64| -> i8 {
        if v > 0.0 {
            1
        } else if v < 0.0 {
            -1
        } else {
            0
        }
    };
    let s: Vec<i8> = phi.iter().map(|&v| sign(v)).collect();
    let zeros = s.iter().filter(|&&x| x == 0).count();

    // Crossing on the edge (i, j) whose endpoints have opposite signs.
    let crossing = |i: usize, j: usize| -> Point {
        let c = geom.segment_crossings(tri[i], tri[j]);
        // Exactly one root lies strictly between opposite-sign endpoints.
        let t = c.first().copied().unwrap_or_else(|| phi[i] / (phi[i] - phi[j]));
        lerp(tri[i], tri[j], t)
    };

    match zeros {
        0 => {
            // Lone vertex: the one whose sign differs from the other two.
            let lone = (0..3).find(|&k| s[k] != s[(k + 1) % 3] && s[k] != s[(k + 2) % 3])?;
            let (a, b, c) = (lone, (lone + 1) % 3, (lone + 2) % 3);
            let p = crossing(a, b);
            let q = crossing(a, c);
            Some(vec![[tri[a], p, q], [p, tri[b], tri[c]], [p, tri[c], q]])
        }
        1 => {
            let z = (0..3).find(|&k| s[k] == 0)?;
            let (b, c) = ((z + 1) % 3, (z + 2) % 3);
            if s[b] == s[c] {
                return None;
            }
            let q = crossing(b, c);
            Some(vec![[tri[z], tri[b], q], [tri[z], q, tri[c]]])
        }
        _ => None,
    }
}

/// Convenience: barycentric coordinates for a batch of points in a triangle.
pub fn barycentric_batch(tri: &[Point; 3], pts: &[Point]) -> Vec<[f64; 3]> {
    pts.iter().map(|&p| barycentric(tri, p)).collect()
}
