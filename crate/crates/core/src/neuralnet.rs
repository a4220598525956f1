//! Two-hidden-layer sine networks used as enrichment functions.
//!
//! A network evaluates `N(x − p, [D(x)])` where `p` is the anchor node and
//! `D` an optional quasi-distance input. Hidden layer `k` applies
//! `sin(n_k a_k (W_k z + b_k))` with a fixed integer scale `n_k` and a
//! trainable slope `a_k`; the output layer is linear without bias.
//!
//! Flat parameter layout (the checkpoint order):
//!
//! | block | shape            |
//! |-------|------------------|
//! | `W1`  | `h1 × d`, row-major |
//! | `W2`  | `h2 × h1`, row-major |
//! | `W3`  | `1 × h2`         |
//! | `b1`  | `h1`             |
//! | `b2`  | `h2`             |
//! | `a1`, `a2` | scalars     |
//!
//! Derivatives are computed by hand: the forward pass carries the value and
//! its input Jacobian together, and a single reverse sweep over that augmented
//! computation yields the parameter gradient of any linear functional of
//! value and spatial gradient.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NefemError, Result};
use crate::mesh::Point;

/// Widest supported hidden layer.
pub const MAX_WIDTH: usize = 64;

const CHECKPOINT_FORMAT: &str = "nefem-network";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Spatial,
    SpatialDistance,
}

impl InputMode {
    pub fn input_dim(self) -> usize {
        match self {
            InputMode::Spatial => 2,
            InputMode::SpatialDistance => 3,
        }
    }
}

/// Quasi-distance value and its (one-sided) spatial gradient at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceInput {
    pub value: f64,
    pub grad: [f64; 2],
}

/// One term `w_v N(x) + w_g · ∇N(x)` of a linear functional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradSample {
    pub x: Point,
    pub distance: Option<DistanceInput>,
    pub w_value: f64,
    pub w_grad: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    d: usize,
    h1: usize,
    h2: usize,
    w1: usize,
    w2: usize,
    w3: usize,
    b1: usize,
    b2: usize,
    a1: usize,
    a2: usize,
    len: usize,
}

impl Layout {
    fn new(d: usize, h1: usize, h2: usize) -> Self {
        let w1 = 0;
        let w2 = w1 + h1 * d;
        let w3 = w2 + h2 * h1;
        let b1 = w3 + h2;
        let b2 = b1 + h1;
        let a1 = b2 + h2;
        let a2 = a1 + 1;
        Self { d, h1, h2, w1, w2, w3, b1, b2, a1, a2, len: a2 + 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkRecord", into = "NetworkRecord")]
pub struct MlpEnrichment {
    dims: [usize; 4],
    scales: [u32; 2],
    input_mode: InputMode,
    anchor: Point,
    seed: u64,
    params: Vec<f64>,
    #[serde(skip)]
    layout: Layout,
}

/// Serialized form of a network.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetworkRecord {
    format: String,
    version: u32,
    dims: Vec<usize>,
    scales: Vec<u32>,
    input_mode: InputMode,
    anchor: Point,
    seed: u64,
    params: Vec<f64>,
}

impl From<MlpEnrichment> for NetworkRecord {
    fn from(n: MlpEnrichment) -> Self {
        NetworkRecord {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dims: n.dims.to_vec(),
            scales: n.scales.to_vec(),
            input_mode: n.input_mode,
            anchor: n.anchor,
            seed: n.seed,
            params: n.params,
        }
    }
}

impl TryFrom<NetworkRecord> for MlpEnrichment {
    type Error = NefemError;

    fn try_from(r: NetworkRecord) -> Result<Self> {
        if r.format != CHECKPOINT_FORMAT {
            return Err(NefemError::Format(format!("unexpected format tag {:?}", r.format)));
        }
        if r.version != CHECKPOINT_VERSION {
            return Err(NefemError::Format(format!("unsupported network version {}", r.version)));
        }
        let mut net = MlpEnrichment::zeros(&r.dims, &r.scales, r.input_mode, r.anchor)?;
        if r.params.len() != net.params.len() {
            return Err(NefemError::Format(format!("expected {} parameters, found {}", net.params.len(), r.params.len())));
        }
        net.params = r.params;
        net.seed = r.seed;
        Ok(net)
    }
}

fn validate_shape(dims: &[usize], scales: &[u32], mode: InputMode) -> Result<([usize; 4], [u32; 2])> {
    if dims.len() != 4 {
        return Err(NefemError::InvalidNetwork(format!("expected two hidden layers, got dims {dims:?}")));
    }
    if dims[0] != mode.input_dim() {
        return Err(NefemError::InvalidNetwork(format!("input width {} inconsistent with {mode:?}", dims[0])));
    }
    if dims[3] != 1 {
        return Err(NefemError::InvalidNetwork("output width must be 1".into()));
    }
    if dims[1] == 0 || dims[2] == 0 || dims[1] > MAX_WIDTH || dims[2] > MAX_WIDTH {
        return Err(NefemError::InvalidNetwork(format!("hidden widths must lie in 1..={MAX_WIDTH}, got {dims:?}")));
    }
    if scales.len() != 2 || scales.iter().any(|&n| n < 1) {
        return Err(NefemError::InvalidNetwork(format!("scales must be two integers >= 1, got {scales:?}")));
    }
    Ok(([dims[0], dims[1], dims[2], dims[3]], [scales[0], scales[1]]))
}

/// Number of parameters for `dims = [d, h1, h2, 1]`.
pub fn parameter_count(dims: &[usize]) -> usize {
    let (d, h1, h2) = (dims[0], dims[1], dims[2]);
    h1 * d + h2 * h1 + h2 + h1 + h2 + 2
}

/// Stateless 64-bit mix used to derive per-network seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// Forward intermediates for one sample.
struct Tape {
    z: [f64; 3],
    pre1: [f64; MAX_WIDTH],
    h1: [f64; MAX_WIDTH],
    c1: [f64; MAX_WIDTH],
    dh1: [[f64; MAX_WIDTH]; 3],
    pre2: [f64; MAX_WIDTH],
    h2: [f64; MAX_WIDTH],
    c2: [f64; MAX_WIDTH],
    q: [[f64; MAX_WIDTH]; 3],
    value: f64,
    dz: [f64; 3],
}

impl Tape {
    fn new() -> Self {
        Self {
            z: [0.0; 3],
            pre1: [0.0; MAX_WIDTH],
            h1: [0.0; MAX_WIDTH],
            c1: [0.0; MAX_WIDTH],
            dh1: [[0.0; MAX_WIDTH]; 3],
            pre2: [0.0; MAX_WIDTH],
            h2: [0.0; MAX_WIDTH],
            c2: [0.0; MAX_WIDTH],
            q: [[0.0; MAX_WIDTH]; 3],
            value: 0.0,
            dz: [0.0; 3],
        }
    }
}

impl MlpEnrichment {
    fn zeros(dims: &[usize], scales: &[u32], input_mode: InputMode, anchor: Point) -> Result<Self> {
        let (dims, scales) = validate_shape(dims, scales, input_mode)?;
        let layout = Layout::new(dims[0], dims[1], dims[2]);
        Ok(Self { dims, scales, input_mode, anchor, seed: 0, params: vec![0.0; layout.len], layout })
    }

    /// Seeded fan-in uniform initialization; slopes start at `1 / n_k`.
    pub fn new(dims: &[usize], scales: &[u32], input_mode: InputMode, anchor: Point, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(dims, scales, input_mode, anchor)?;
        net.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = net.layout;
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, p: &mut [f64]| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut p[range] {
                *v = rng.random_range(-bound..bound);
            }
        };
        fill(l.w1..l.w2, l.d, &mut net.params);
        fill(l.w2..l.w3, l.h1, &mut net.params);
        fill(l.w3..l.b1, l.h2, &mut net.params);
        fill(l.b1..l.b2, l.d, &mut net.params);
        fill(l.b2..l.a1, l.h1, &mut net.params);
        net.params[l.a1] = 1.0 / net.scales[0] as f64;
        net.params[l.a2] = 1.0 / net.scales[1] as f64;
        Ok(net)
    }

    /// A network with all weights zero and unit effective slopes.
    pub fn zeroed(dims: &[usize], scales: &[u32], input_mode: InputMode, anchor: Point) -> Result<Self> {
        let mut net = Self::zeros(dims, scales, input_mode, anchor)?;
        let l = net.layout;
        net.params[l.a1] = 1.0 / net.scales[0] as f64;
        net.params[l.a2] = 1.0 / net.scales[1] as f64;
        Ok(net)
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn scales(&self) -> [u32; 2] {
        self.scales
    }

    pub fn input_mode(&self) -> InputMode {
        self.input_mode
    }

    pub fn anchor(&self) -> Point {
        self.anchor
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    // Parameter block accessors, used by tests that build nets by hand.
    pub fn set_w1(&mut self, row: usize, col: usize, v: f64) {
        let l = self.layout;
        self.params[l.w1 + row * l.d + col] = v;
    }

    pub fn set_w2(&mut self, row: usize, col: usize, v: f64) {
        let l = self.layout;
        self.params[l.w2 + row * l.h1 + col] = v;
    }

    pub fn set_w3(&mut self, col: usize, v: f64) {
        let l = self.layout;
        self.params[l.w3 + col] = v;
    }

    pub fn set_b1(&mut self, row: usize, v: f64) {
        let l = self.layout;
        self.params[l.b1 + row] = v;
    }

    pub fn set_b2(&mut self, row: usize, v: f64) {
        let l = self.layout;
        self.params[l.b2 + row] = v;
    }

    pub fn set_slopes(&mut self, a1: f64, a2: f64) {
        let l = self.layout;
        self.params[l.a1] = a1;
        self.params[l.a2] = a2;
    }

    fn inputs(&self, x: Point, distance: Option<DistanceInput>) -> [f64; 3] {
        let mut z = [x[0] - self.anchor[0], x[1] - self.anchor[1], 0.0];
        if self.input_mode == InputMode::SpatialDistance {
            z[2] = distance.map_or(0.0, |d| d.value);
        }
        z
    }

    fn forward(&self, z: [f64; 3], tape: &mut Tape) {
        let l = self.layout;
        let p = &self.params;
        let (n1, n2) = (self.scales[0] as f64, self.scales[1] as f64);
        let s1 = n1 * p[l.a1];
        let s2 = n2 * p[l.a2];
        let d = l.d;
        tape.z = z;
        for r in 0..l.h1 {
            let row = &p[l.w1 + r * d..l.w1 + (r + 1) * d];
            let mut acc = p[l.b1 + r];
            for k in 0..d {
                acc += row[k] * z[k];
            }
            let (sn, cs) = (s1 * acc).sin_cos();
            tape.pre1[r] = acc;
            tape.h1[r] = sn;
            tape.c1[r] = cs;
            for k in 0..d {
                tape.dh1[k][r] = cs * s1 * row[k];
            }
        }
        let w3 = &p[l.w3..l.w3 + l.h2];
        let mut value = 0.0;
        let mut dz = [0.0; 3];
        for r in 0..l.h2 {
            let row = &p[l.w2 + r * l.h1..l.w2 + (r + 1) * l.h1];
            let mut acc = p[l.b2 + r];
            let mut q = [0.0; 3];
            for c in 0..l.h1 {
                acc += row[c] * tape.h1[c];
                for k in 0..d {
                    q[k] += row[c] * tape.dh1[k][c];
                }
            }
            let (sn, cs) = (s2 * acc).sin_cos();
            tape.pre2[r] = acc;
            tape.h2[r] = sn;
            tape.c2[r] = cs;
            value += w3[r] * sn;
            for k in 0..d {
                tape.q[k][r] = q[k];
                dz[k] += w3[r] * cs * s2 * q[k];
            }
        }
        tape.value = value;
        tape.dz = dz;
    }

    fn spatial_gradient(&self, dz: [f64; 3], distance: Option<DistanceInput>) -> [f64; 2] {
        match (self.input_mode, distance) {
            (InputMode::SpatialDistance, Some(d)) => [dz[0] + dz[2] * d.grad[0], dz[1] + dz[2] * d.grad[1]],
            _ => [dz[0], dz[1]],
        }
    }

    /// Value and spatial gradient at `x`. In distance mode the chain-rule term
    /// `∂_D N ∇D` is included.
    pub fn eval_with_gradient(&self, x: Point, distance: Option<DistanceInput>) -> (f64, [f64; 2]) {
        let mut tape = Tape::new();
        self.forward(self.inputs(x, distance), &mut tape);
        (tape.value, self.spatial_gradient(tape.dz, distance))
    }

    pub fn eval(&self, x: Point, distance: Option<DistanceInput>) -> f64 {
        self.eval_with_gradient(x, distance).0
    }

    /// Value, gradient and Laplacian in spatial mode.
    pub fn eval_with_laplacian(&self, x: Point) -> Result<(f64, [f64; 2], f64)> {
        if self.input_mode != InputMode::Spatial {
            return Err(NefemError::DistanceModeUnsupported);
        }
        let l = self.layout;
        let p = &self.params;
        let mut tape = Tape::new();
        self.forward(self.inputs(x, None), &mut tape);
        let s1 = self.scales[0] as f64 * p[l.a1];
        let s2 = self.scales[1] as f64 * p[l.a2];
        // Second derivatives of the first hidden layer: d²h1/dz_k² = -h1 (s1 W1[:,k])².
        let mut d2h1 = [[0.0; MAX_WIDTH]; 2];
        for r in 0..l.h1 {
            for (k, row) in d2h1.iter_mut().enumerate() {
                let t = s1 * p[l.w1 + r * l.d + k];
                row[r] = -tape.h1[r] * t * t;
            }
        }
        let mut lap = 0.0;
        for r in 0..l.h2 {
            let row = &p[l.w2 + r * l.h1..l.w2 + (r + 1) * l.h1];
            let mut second = 0.0;
            for k in 0..2 {
                let q2: f64 = (0..l.h1).map(|c| row[c] * d2h1[k][c]).sum();
                let t = s2 * tape.q[k][r];
                second += -tape.h2[r] * t * t + tape.c2[r] * s2 * q2;
            }
            lap += p[l.w3 + r] * second;
        }
        Ok((tape.value, [tape.dz[0], tape.dz[1]], lap))
    }

    pub fn eval_laplacian(&self, x: Point) -> Result<f64> {
        Ok(self.eval_with_laplacian(x)?.2)
    }

    /// Adds `∂/∂θ Σ_s [w_v N(x_s) + w_g · ∇N(x_s)]` into `grad`, in sample order.
    pub fn accumulate_param_gradient(&self, batch: &[GradSample], grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer has the wrong length");
        let mut tape = Tape::new();
        for s in batch {
            let gz = match (self.input_mode, s.distance) {
                (InputMode::SpatialDistance, Some(d)) => [s.w_grad[0], s.w_grad[1], s.w_grad[0] * d.grad[0] + s.w_grad[1] * d.grad[1]],
                _ => [s.w_grad[0], s.w_grad[1], 0.0],
            };
            if s.w_value == 0.0 && gz.iter().all(|&g| g == 0.0) {
                continue;
            }
            self.forward(self.inputs(s.x, s.distance), &mut tape);
            self.backward(&tape, s.w_value, gz, grad);
        }
    }

    pub fn param_gradient(&self, batch: &[GradSample]) -> Vec<f64> {
        let mut g = vec![0.0; self.params.len()];
        self.accumulate_param_gradient(batch, &mut g);
        g
    }

    fn backward(&self, t: &Tape, w_value: f64, gz: [f64; 3], grad: &mut [f64]) {
        let l = self.layout;
        let p = &self.params;
        let d = l.d;
        let (n1, n2) = (self.scales[0] as f64, self.scales[1] as f64);
        let s1 = n1 * p[l.a1];
        let s2 = n2 * p[l.a2];
        let mut s1_bar = 0.0;
        let mut s2_bar = 0.0;

        let mut pre2_bar = [0.0; MAX_WIDTH];
        let mut q_bar = [[0.0; MAX_WIDTH]; 3];
        for r in 0..l.h2 {
            let w3 = p[l.w3 + r];
            let mut g3 = w_value * t.h2[r];
            let mut c2_bar = 0.0;
            let mut t2_bar = [0.0; 3];
            for k in 0..d {
                let t2 = s2 * t.q[k][r];
                g3 += gz[k] * t.c2[r] * t2;
                let dh2_bar = gz[k] * w3;
                c2_bar += dh2_bar * t2;
                t2_bar[k] = dh2_bar * t.c2[r];
            }
            grad[l.w3 + r] += g3;
            let h2_bar = w_value * w3;
            let u2_bar = h2_bar * t.c2[r] - c2_bar * t.h2[r];
            for k in 0..d {
                s2_bar += t2_bar[k] * t.q[k][r];
                q_bar[k][r] = s2 * t2_bar[k];
            }
            s2_bar += u2_bar * t.pre2[r];
            pre2_bar[r] = s2 * u2_bar;
            grad[l.b2 + r] += pre2_bar[r];
        }

        let mut h1_bar = [0.0; MAX_WIDTH];
        let mut dh1_bar = [[0.0; MAX_WIDTH]; 3];
        for r in 0..l.h2 {
            let base = l.w2 + r * l.h1;
            let pb = pre2_bar[r];
            for c in 0..l.h1 {
                let w = p[base + c];
                let mut g = pb * t.h1[c];
                h1_bar[c] += w * pb;
                for k in 0..d {
                    g += q_bar[k][r] * t.dh1[k][c];
                    dh1_bar[k][c] += w * q_bar[k][r];
                }
                grad[base + c] += g;
            }
        }

        for c in 0..l.h1 {
            let row = l.w1 + c * d;
            let mut c1_bar = 0.0;
            for k in 0..d {
                let t1 = s1 * p[row + k];
                c1_bar += dh1_bar[k][c] * t1;
                let t1_bar = dh1_bar[k][c] * t.c1[c];
                s1_bar += t1_bar * p[row + k];
                grad[row + k] += s1 * t1_bar;
            }
            let u1_bar = h1_bar[c] * t.c1[c] - c1_bar * t.h1[c];
            s1_bar += u1_bar * t.pre1[c];
            let pre1_bar = s1 * u1_bar;
            for k in 0..d {
                grad[row + k] += pre1_bar * t.z[k];
            }
            grad[l.b1 + c] += pre1_bar;
        }
        grad[l.a1] += n1 * s1_bar;
        grad[l.a2] += n2 * s2_bar;
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8, lr }
    }

    /// Applies one update. Entries with `mask[i] == false` are left untouched,
    /// moments included; the step counter advances only if something is updated.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], mask: Option<&[bool]>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NefemError::ShapeMismatch(format!(
                "adam state has {} entries, params {}, grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(mask) = mask {
            if mask.len() != params.len() {
                return Err(NefemError::ShapeMismatch("mask length".into()));
            }
        }
        let active = |i: usize| mask.is_none_or(|m| m[i]);
        if let Some(i) = (0..grads.len()).find(|&i| active(i) && !grads[i].is_finite()) {
            return Err(NefemError::NonFiniteGradient(i));
        }
        if !(0..grads.len()).any(active) {
            return Ok(());
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in (0..params.len()).filter(|&i| active(i)) {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
