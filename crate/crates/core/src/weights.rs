//! Carleman weights, kept in the log domain throughout.
//!
//! With `beta` the spatial bump and `gamma` the time profile,
//! `phi = gamma * (exp(mu*(beta + 6m)) - mu*exp(6*mu*(m + 1)))`,
//! `xi = gamma * exp(mu*(beta + 6m))` and `theta = exp(lambda * phi)`.
//! Only `log xi` and `ell = lambda * phi` are ever stored.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::SpatialMesh;
use crate::scenario::{AdaptedField, ScenarioTree};

/// Spatial bump `beta = 1 - psi^2` with `psi` monotone through
/// `(a, -1)`, `(c, 0)`, `(b, 1)` and `c` the centre of the inner region.
#[derive(Debug, Clone, Serialize)]
pub struct WeightBase {
    pub center: f64,
    /// `beta` at each interior grid point.
    pub values: Vec<f64>,
    /// Minimum of `|beta'|` over grid points outside the inner region.
    pub a0: f64,
    a_end: f64,
    b_end: f64,
    psi: [f64; 3],
}

impl WeightBase {
    pub fn build(mesh: &SpatialMesh) -> Result<Self> {
        let (lo, hi) = mesh.inner_interval;
        let center = 0.5 * (lo + hi);
        let p = center - mesh.a_end;
        let q = mesh.b_end - center;
        let psi = monotone_psi(p, q).ok_or_else(|| {
            Error::DegenerateBase(format!(
                "no monotone profile through the inner-region centre {center} on ({}, {})",
                mesh.a_end, mesh.b_end
            ))
        })?;
        let mut base = Self { center, values: Vec::new(), a0: 0.0, a_end: mesh.a_end, b_end: mesh.b_end, psi };
        base.values = (0..mesh.m).map(|i| base.beta(mesh.x(i))).collect();
        base.a0 = (0..mesh.m)
            .filter(|&i| !mesh.inner_mask[i])
            .map(|i| base.beta_prime(mesh.x(i)).abs())
            .fold(f64::INFINITY, f64::min);
        if !(base.a0 > 0.0) || !base.a0.is_finite() {
            return Err(Error::DegenerateBase(format!("gradient floor a0 = {} on the grid", base.a0)));
        }
        Ok(base)
    }

    fn psi_and_slope(&self, x: f64) -> (f64, f64) {
        let y = x - self.center;
        let [c1, c2, c3] = self.psi;
        (y * (c1 + y * (c2 + y * c3)), c1 + y * (2.0 * c2 + 3.0 * y * c3))
    }

    pub fn beta(&self, x: f64) -> f64 {
        let (psi, _) = self.psi_and_slope(x);
        1.0 - psi * psi
    }

    pub fn beta_prime(&self, x: f64) -> f64 {
        let (psi, slope) = self.psi_and_slope(x);
        -2.0 * psi * slope
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.a_end, self.b_end)
    }
}

/// Coefficients `[c1, c2, c3]` of `psi(y) = y*(c1 + c2*y + c3*y^2)` with
/// `psi(-p) = -1`, `psi(q) = 1` and `psi' > 0` on `[-p, q]`.
fn monotone_psi(p: f64, q: f64) -> Option<[f64; 3]> {
    let min_slope = |c: [f64; 3]| {
        (0..=400)
            .map(|j| {
                let y = -p + (p + q) * j as f64 / 400.0;
                c[0] + y * (2.0 * c[1] + 3.0 * y * c[2])
            })
            .fold(f64::INFINITY, f64::min)
    };
    let denom = p * q * (p + q);
    let quadratic = [(p * p + q * q) / denom, (p - q) / denom, 0.0];
    if (p * p - q * q).abs() < 2.0 * p * q {
        return Some(quadratic);
    }
    // cubic family parametrized by the slope at the centre
    let mut best: Option<([f64; 3], f64)> = None;
    let hi = 3.0 / p.min(q);
    for j in 1..=600 {
        let c1 = hi * j as f64 / 600.0;
        // c1 - c2 p + c3 p^2 = 1/p and c1 + c2 q + c3 q^2 = 1/q
        let r1 = 1.0 / p - c1;
        let r2 = 1.0 / q - c1;
        let det = q * q * (-p) - p * p * q;
        let c2 = (r1 * q * q - r2 * p * p) / det;
        let c3 = (-p * r2 - q * r1) / det;
        let c = [c1, c2, c3];
        let s = min_slope(c);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    best.filter(|&(_, s)| s > 0.0).map(|(c, _)| c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightVariant {
    Backward,
    BackwardRegularized,
    Forward,
    ForwardRegularized,
}

impl WeightVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Backward => "backward",
            Self::BackwardRegularized => "backward-regularized",
            Self::Forward => "forward",
            Self::ForwardRegularized => "forward-regularized",
        }
    }

    pub fn is_regularized(self) -> bool {
        matches!(self, Self::BackwardRegularized | Self::ForwardRegularized)
    }

    pub fn regularized(self) -> Self {
        match self {
            Self::Backward | Self::BackwardRegularized => Self::BackwardRegularized,
            Self::Forward | Self::ForwardRegularized => Self::ForwardRegularized,
        }
    }

    pub fn unregularized(self) -> Self {
        match self {
            Self::Backward | Self::BackwardRegularized => Self::Backward,
            Self::Forward | Self::ForwardRegularized => Self::Forward,
        }
    }

    pub const ALL: [Self; 4] =
        [Self::Backward, Self::BackwardRegularized, Self::Forward, Self::ForwardRegularized];
}

pub const PARAM_FLOOR: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightParams {
    pub lambda: f64,
    pub mu: f64,
    pub m: f64,
    pub horizon: f64,
    pub variant: WeightVariant,
    pub eps: f64,
    sigma: f64,
}

impl WeightParams {
    pub fn new(lambda: f64, mu: f64, m: f64, horizon: f64, variant: WeightVariant, eps: f64) -> Result<Self> {
        if !(lambda >= PARAM_FLOOR && mu >= PARAM_FLOOR) || !lambda.is_finite() || !mu.is_finite() {
            return Err(Error::Weights(format!("lambda and mu must be >= {PARAM_FLOOR}, got {lambda}, {mu}")));
        }
        if lambda < 1.0 || mu < 1.0 {
            log::warn!("lambda = {lambda}, mu = {mu} is below the regime lambda, mu >= 1");
        }
        if !(m >= 1.0) || !m.is_finite() {
            return Err(Error::Weights(format!("m must be >= 1, got {m}")));
        }
        if !(horizon > 0.0 && horizon < 1.0) {
            return Err(Error::Weights(format!("horizon must lie in (0, 1), got {horizon}")));
        }
        if mu * 6.0 * (m + 1.0) > 600.0 {
            return Err(Error::Weights(format!("mu*(6m + 6) = {} overflows the weight range", mu * 6.0 * (m + 1.0))));
        }
        if variant.is_regularized() && !(eps > 0.0 && eps < horizon / 4.0) {
            return Err(Error::Weights(format!("eps must lie in (0, T/4) = (0, {}), got {eps}", horizon / 4.0)));
        }
        let sigma = lambda * mu * mu * (mu * (6.0 * m - 4.0)).exp();
        if !(sigma > 2.0) {
            return Err(Error::Weights(format!("sigma = lambda*mu^2*exp(mu(6m-4)) = {sigma} must exceed 2")));
        }
        let eps = if variant.is_regularized() { eps } else { 0.0 };
        Ok(Self { lambda, mu, m, horizon, variant, eps, sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn with_variant(&self, variant: WeightVariant, eps: f64) -> Result<Self> {
        Self::new(self.lambda, self.mu, self.m, self.horizon, variant, eps)
    }
}

/// C2 smoothstep and its first two derivatives.
fn smoothstep(s: f64) -> [f64; 3] {
    let s = s.clamp(0.0, 1.0);
    [
        s * s * s * (10.0 + s * (-15.0 + 6.0 * s)),
        30.0 * s * s * (1.0 - s) * (1.0 - s),
        60.0 * s * (1.0 - s) * (1.0 - 2.0 * s),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BridgeKind {
    Quintic,
    Blend,
}

/// Monotone C2 bridge from the constant 1 to a power branch
/// `u(t)^-m` where `u` is affine in `t`.
#[derive(Debug, Clone, Copy)]
struct Bridge {
    t0: f64,
    t1: f64,
    /// The power branch sits at `t0` (decreasing bridge) or at `t1`.
    power_at_start: bool,
    u_at: f64,
    u_slope: f64,
    m: f64,
    kind: BridgeKind,
    quintic: [f64; 6],
}

fn power_branch(u: f64, du: f64, m: f64) -> [f64; 3] {
    let v = u.powf(-m);
    [v, -m * v / u * du, m * (m + 1.0) * v / (u * u) * du * du]
}

impl Bridge {
    fn new(t0: f64, t1: f64, power_at_start: bool, u_at: f64, u_slope: f64, m: f64) -> Self {
        let mut b = Self { t0, t1, power_at_start, u_at, u_slope, m, kind: BridgeKind::Quintic, quintic: [0.0; 6] };
        let len = t1 - t0;
        let p = b.power(if power_at_start { t0 } else { t1 });
        let one = [1.0, 0.0, 0.0];
        let (left, right) = if power_at_start { (p, one) } else { (one, p) };
        let f0 = left[0];
        let d0 = left[1] * len;
        let a0 = left[2] * len * len;
        let f1 = right[0];
        let d1 = right[1] * len;
        let a1 = right[2] * len * len;
        let df = f1 - f0;
        b.quintic = [
            f0,
            d0,
            0.5 * a0,
            10.0 * df - 6.0 * d0 - 4.0 * d1 - 1.5 * a0 + 0.5 * a1,
            -15.0 * df + 8.0 * d0 + 7.0 * d1 + 1.5 * a0 - a1,
            6.0 * df - 3.0 * d0 - 3.0 * d1 - 0.5 * a0 + 0.5 * a1,
        ];
        b
    }

    fn power(&self, t: f64) -> [f64; 3] {
        power_branch(self.u_at + self.u_slope * (t - self.t0), self.u_slope, self.m)
    }

    fn eval(&self, t: f64) -> [f64; 3] {
        let len = self.t1 - self.t0;
        let s = (t - self.t0) / len;
        match self.kind {
            BridgeKind::Quintic => {
                let c = &self.quintic;
                let v = c[0] + s * (c[1] + s * (c[2] + s * (c[3] + s * (c[4] + s * c[5]))));
                let d = c[1] + s * (2.0 * c[2] + s * (3.0 * c[3] + s * (4.0 * c[4] + s * 5.0 * c[5])));
                let a = 2.0 * c[2] + s * (6.0 * c[3] + s * (12.0 * c[4] + s * 20.0 * c[5]));
                [v, d / len, a / (len * len)]
            }
            BridgeKind::Blend => {
                let [g, g1, g2] = smoothstep(s);
                // weight of the power branch
                let (w, w1, w2) = if self.power_at_start { (1.0 - g, -g1, -g2) } else { (g, g1, g2) };
                let (w1, w2) = (w1 / len, w2 / (len * len));
                let [p, p1, p2] = self.power(t);
                [1.0 + w * (p - 1.0), w1 * (p - 1.0) + w * p1, w2 * (p - 1.0) + 2.0 * w1 * p1 + w * p2]
            }
        }
    }

    fn is_monotone(&self) -> bool {
        let sign = if self.power_at_start { -1.0 } else { 1.0 };
        (0..=BRIDGE_CHECK_POINTS).all(|j| {
            let t = self.t0 + (self.t1 - self.t0) * j as f64 / BRIDGE_CHECK_POINTS as f64;
            sign * self.eval(t)[1] >= -1e-12
        })
    }
}

const BRIDGE_CHECK_POINTS: usize = 4000;

/// Evaluator for the time profile of one weight variant.
#[derive(Debug, Clone)]
pub struct GammaCurve {
    params: WeightParams,
    /// Decreasing bridge on `[T/4, T/2]` of the unregularized profile.
    base_bridge: Bridge,
    /// Increasing bridge on `[T/2 + eps, 3T/4]` of the forward-regularized profile.
    forward_bridge: Option<Bridge>,
}

impl GammaCurve {
    pub fn new(params: WeightParams) -> Result<Self> {
        let t = params.horizon;
        let m = params.m;
        let mut base_bridge = Bridge::new(t / 4.0, t / 2.0, true, t / 4.0, 1.0, m);
        if !base_bridge.is_monotone() {
            base_bridge.kind = BridgeKind::Blend;
        }
        let mut curve = Self { params, base_bridge, forward_bridge: None };
        if params.variant == WeightVariant::ForwardRegularized {
            let eps = params.eps;
            let t0 = t / 2.0 + eps;
            let t1 = 0.75 * t;
            let mut bridge = Bridge::new(t0, t1, false, t - t0 + eps, -1.0, m);
            curve.forward_bridge = Some(bridge);
            if !bridge.is_monotone() || !curve.below_unregularized(t0, t1) {
                bridge.kind = BridgeKind::Blend;
                curve.forward_bridge = Some(bridge);
            }
            if !curve.below_unregularized(t0, t1) {
                return Err(Error::Weights(
                    "regularized forward profile exceeds the unregularized one".into(),
                ));
            }
        }
        Ok(curve)
    }

    fn below_unregularized(&self, t0: f64, t1: f64) -> bool {
        let bridge = self.forward_bridge.expect("forward bridge");
        (0..=BRIDGE_CHECK_POINTS).all(|j| {
            let t = t0 + (t1 - t0) * j as f64 / BRIDGE_CHECK_POINTS as f64;
            let mirrored = self.backward(self.params.horizon - t)[0];
            bridge.eval(t)[0] <= mirrored * (1.0 + 1e-14)
        })
    }

    pub fn params(&self) -> &WeightParams {
        &self.params
    }

    pub fn base_bridge_kind(&self) -> BridgeKind {
        self.base_bridge.kind
    }

    pub fn forward_bridge_kind(&self) -> Option<BridgeKind> {
        self.forward_bridge.map(|b| b.kind)
    }

    /// Unregularized backward profile for `t` in `(0, T]`.
    fn backward(&self, t: f64) -> [f64; 3] {
        let horizon = self.params.horizon;
        if t <= horizon / 4.0 {
            power_branch(t, 1.0, self.params.m)
        } else if t < horizon / 2.0 {
            self.base_bridge.eval(t)
        } else if t <= 0.75 * horizon {
            [1.0, 0.0, 0.0]
        } else {
            self.rising_tail(1.0 - 4.0 * (horizon - t) / horizon, 4.0 / horizon)
        }
    }

    /// `1 + r^sigma` with `r` affine, `dr/dt = slope`.
    fn rising_tail(&self, r: f64, slope: f64) -> [f64; 3] {
        let sigma = self.params.sigma;
        let r = r.max(0.0);
        [
            1.0 + r.powf(sigma),
            sigma * r.powf(sigma - 1.0) * slope,
            sigma * (sigma - 1.0) * r.powf(sigma - 2.0) * slope * slope,
        ]
    }

    pub fn evaluable(&self, t: f64) -> Result<()> {
        let horizon = self.params.horizon;
        let tol = 1e-12 * horizon;
        if !(t >= -tol && t <= horizon + tol) {
            return Err(Error::OutOfRange { t, variant: self.params.variant.name() });
        }
        match self.params.variant {
            WeightVariant::Backward if t <= tol => Err(Error::Singular { t }),
            WeightVariant::Forward if t >= horizon - tol => Err(Error::Singular { t }),
            _ => Ok(()),
        }
    }

    /// Value, first and second derivative.
    pub fn eval(&self, t: f64) -> Result<[f64; 3]> {
        self.evaluable(t)?;
        let horizon = self.params.horizon;
        let t = t.clamp(0.0, horizon);
        let eps = self.params.eps;
        Ok(match self.params.variant {
            WeightVariant::Backward => self.backward(t),
            WeightVariant::Forward => {
                let [v, d, a] = self.backward(horizon - t);
                [v, -d, a]
            }
            WeightVariant::BackwardRegularized => {
                if t <= horizon / 2.0 - eps {
                    self.backward(t + eps)
                } else if t <= 0.75 * horizon {
                    [1.0, 0.0, 0.0]
                } else {
                    self.backward(t)
                }
            }
            WeightVariant::ForwardRegularized => {
                if t <= horizon / 4.0 {
                    self.rising_tail(1.0 - 4.0 * t / horizon, -4.0 / horizon)
                } else if t <= horizon / 2.0 + eps {
                    [1.0, 0.0, 0.0]
                } else if t < 0.75 * horizon {
                    self.forward_bridge.expect("forward bridge").eval(t)
                } else {
                    power_branch(horizon - t + eps, -1.0, self.params.m)
                }
            }
        })
    }

    /// Junction times of this variant's piecewise definition.
    pub fn junctions(&self) -> Vec<f64> {
        let horizon = self.params.horizon;
        let eps = self.params.eps;
        match self.params.variant {
            WeightVariant::Backward => vec![horizon / 4.0, horizon / 2.0, 0.75 * horizon],
            WeightVariant::Forward => vec![horizon / 4.0, horizon / 2.0, 0.75 * horizon],
            WeightVariant::BackwardRegularized => {
                vec![horizon / 4.0 - eps, horizon / 2.0 - eps, 0.75 * horizon]
            }
            WeightVariant::ForwardRegularized => {
                vec![horizon / 4.0, horizon / 2.0 + eps, 0.75 * horizon]
            }
        }
    }
}

/// Value and first derivative of the time profile.
pub fn gamma(t: f64, params: &WeightParams) -> Result<(f64, f64)> {
    let [v, d, _] = GammaCurve::new(*params)?.eval(t)?;
    Ok((v, d))
}

/// Result of the one-sided finite-difference C2 check at one junction.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct JunctionCheck {
    pub t: f64,
    /// Jumps of value, first and second derivative estimates at `step`.
    pub jumps: [f64; 3],
    /// The same jumps at `2 step`.
    pub coarse_jumps: [f64; 3],
    /// Jumps below this are rounding noise.
    pub rounding: [f64; 3],
    pub passed: bool,
}

/// Signed differences of left and right one-sided estimates (value,
/// first, second derivative), each second-order accurate.
fn one_sided_gap(curve: &GammaCurve, t: f64, step: f64) -> Result<([f64; 3], f64)> {
    let f = |s: f64| curve.eval(s).map(|v| v[0]);
    let l = [f(t)?, f(t - step)?, f(t - 2.0 * step)?, f(t - 3.0 * step)?];
    let r = [l[0], f(t + step)?, f(t + 2.0 * step)?, f(t + 3.0 * step)?];
    let left = [
        3.0 * l[1] - 3.0 * l[2] + l[3],
        (3.0 * l[0] - 4.0 * l[1] + l[2]) / (2.0 * step),
        (2.0 * l[0] - 5.0 * l[1] + 4.0 * l[2] - l[3]) / (step * step),
    ];
    let right = [
        3.0 * r[1] - 3.0 * r[2] + r[3],
        (-3.0 * r[0] + 4.0 * r[1] - r[2]) / (2.0 * step),
        (2.0 * r[0] - 5.0 * r[1] + 4.0 * r[2] - r[3]) / (step * step),
    ];
    let scale = l.iter().chain(&r).fold(1.0f64, |a, v| a.max(v.abs()));
    Ok(([left[0] - right[0], left[1] - right[1], left[2] - right[2]], scale))
}

/// Checks that the one-sided estimates of the value and its first two
/// derivatives agree across every junction up to an O(step^2) error:
/// each jump must be at rounding level or shrink at least threefold when
/// the step is halved. A genuine discontinuity keeps its size.
pub fn check_junctions(curve: &GammaCurve, step: f64) -> Result<Vec<JunctionCheck>> {
    let mut out = Vec::new();
    for t in curve.junctions() {
        let (fine, scale) = one_sided_gap(curve, t, step)?;
        let (coarse, _) = one_sided_gap(curve, t, 2.0 * step)?;
        let mut check = JunctionCheck { t, jumps: [0.0; 3], coarse_jumps: [0.0; 3], rounding: [0.0; 3], passed: true };
        for k in 0..3 {
            check.jumps[k] = fine[k].abs();
            check.coarse_jumps[k] = coarse[k].abs();
            check.rounding[k] = 256.0 * f64::EPSILON * scale / step.powi(k as i32);
            check.passed &= check.jumps[k] <= check.rounding[k] || check.coarse_jumps[k] >= 3.0 * check.jumps[k];
        }
        out.push(check);
    }
    Ok(out)
}

/// Exponents of `lambda^a mu^b xi^c theta^d` times `exp(log_const)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PowerSpec {
    pub lambda: f64,
    pub mu: f64,
    pub xi: f64,
    pub theta: f64,
    pub log_const: f64,
}

impl PowerSpec {
    pub const ONE: Self = Self { lambda: 0.0, mu: 0.0, xi: 0.0, theta: 0.0, log_const: 0.0 };

    pub fn new(lambda: f64, mu: f64, xi: f64, theta: f64) -> Self {
        Self { lambda, mu, xi, theta, log_const: 0.0 }
    }

    pub fn with_const(mut self, log_const: f64) -> Self {
        self.log_const = log_const;
        self
    }
}

/// Time slot of the cached tables: the initial time, the midpoint of each
/// step, or the terminal time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Initial,
    Step(usize),
    Terminal,
}

/// Which tree depth carries the integrand of step `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Nodes at depth `k` (backward states, controls, sources).
    Parent,
    /// Nodes at depth `k + 1` (forward states).
    Child,
    /// Root only, no time factor.
    Initial,
    /// Leaves only, no time factor.
    Terminal,
}

/// Cached log-weights on the time slots of a tree times the mesh.
#[derive(Debug, Clone)]
pub struct WeightSystem {
    pub params: WeightParams,
    pub base: WeightBase,
    pub curve: GammaCurve,
    pub n_steps: usize,
    pub dt: f64,
    pub h: f64,
    times: Vec<f64>,
    log_xi: Vec<Vec<f64>>,
    ell: Vec<Vec<f64>>,
}

impl WeightSystem {
    pub fn new(params: WeightParams, mesh: &SpatialMesh, tree: &ScenarioTree) -> Result<Self> {
        let base = WeightBase::build(mesh)?;
        Self::with_base(params, base, mesh, tree)
    }

    pub fn with_base(params: WeightParams, base: WeightBase, mesh: &SpatialMesh, tree: &ScenarioTree) -> Result<Self> {
        if (params.horizon - tree.horizon).abs() > 1e-12 {
            return Err(Error::Weights(format!(
                "weight horizon {} differs from tree horizon {}",
                params.horizon, tree.horizon
            )));
        }
        let curve = GammaCurve::new(params)?;
        let mut times = vec![0.0];
        times.extend((0..tree.n_steps).map(|k| (k as f64 + 0.5) * tree.dt));
        times.push(tree.horizon);
        let mut log_xi = Vec::with_capacity(times.len());
        let mut ell = Vec::with_capacity(times.len());
        for &t in &times {
            let g = match curve.eval(t) {
                Ok(v) => v[0],
                Err(Error::Singular { .. }) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            let (lx, l): (Vec<f64>, Vec<f64>) = base.values.iter().map(|&b| point_weights(&params, g, b)).unzip();
            log_xi.push(lx);
            ell.push(l);
        }
        Ok(Self { params, base, curve, n_steps: tree.n_steps, dt: tree.dt, h: mesh.h, times, log_xi, ell })
    }

    pub fn slot_index(&self, slot: Slot) -> usize {
        match slot {
            Slot::Initial => 0,
            Slot::Step(k) => 1 + k,
            Slot::Terminal => self.n_steps + 1,
        }
    }

    pub fn slot_count(&self) -> usize {
        self.times.len()
    }

    pub fn slot_time(&self, slot: Slot) -> f64 {
        self.times[self.slot_index(slot)]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn log_xi(&self, slot: Slot) -> &[f64] {
        &self.log_xi[self.slot_index(slot)]
    }

    pub fn ell(&self, slot: Slot) -> &[f64] {
        &self.ell[self.slot_index(slot)]
    }

    /// `log(lambda^a mu^b xi^c theta^d)` at a cached slot and grid point.
    pub fn log_weight(&self, slot: Slot, i: usize, spec: &PowerSpec) -> Result<f64> {
        let s = self.slot_index(slot);
        combine(&self.params, spec, self.log_xi[s][i], self.ell[s][i], self.times[s])
    }

    /// Full table `[slot][point]` of log-weights.
    pub fn log_weight_table(&self, spec: &PowerSpec) -> Result<Vec<Vec<f64>>> {
        (0..self.times.len())
            .map(|s| {
                (0..self.base.values.len())
                    .map(|i| combine(&self.params, spec, self.log_xi[s][i], self.ell[s][i], self.times[s]))
                    .collect()
            })
            .collect()
    }

    /// Log-weights shifted by `offset` and clamped to `[-kappa, kappa]`.
    pub fn clamped_table(&self, spec: &PowerSpec, offset: f64, kappa: f64) -> Result<Vec<Vec<f64>>> {
        let mut table = self.log_weight_table(spec)?;
        for row in &mut table {
            for v in row.iter_mut() {
                *v = (*v - offset).clamp(-kappa, kappa);
            }
        }
        Ok(table)
    }

    /// `log E sum_k sum_i dt h w f^2` (interior layouts) or
    /// `log E sum_i h w f^2` (slab layouts), optionally restricted to `mask`.
    pub fn weighted_expectation_norm(
        &self,
        field: &AdaptedField,
        spec: &PowerSpec,
        layout: Layout,
        mask: Option<&[bool]>,
    ) -> Result<f64> {
        let mut terms = Vec::new();
        let m = field.m();
        let mut push = |depth: usize, slot: Slot, time_factor: f64| -> Result<()> {
            let row = (0..m).map(|i| self.log_weight(slot, i, spec)).collect::<Result<Vec<f64>>>()?;
            let lp = -(depth as f64) * std::f64::consts::LN_2 + time_factor.ln() + self.h.ln();
            let first = (1usize << depth) - 1;
            for node in first..(2 * first + 1) {
                let values = field.node(node);
                for i in 0..m {
                    if mask.is_some_and(|mk| !mk[i]) || values[i] == 0.0 {
                        continue;
                    }
                    terms.push(lp + row[i] + 2.0 * values[i].abs().ln());
                }
            }
            Ok(())
        };
        match layout {
            Layout::Parent => (0..self.n_steps).try_for_each(|k| push(k, Slot::Step(k), self.dt))?,
            Layout::Child => (0..self.n_steps).try_for_each(|k| push(k + 1, Slot::Step(k), self.dt))?,
            Layout::Initial => push(0, Slot::Initial, 1.0)?,
            Layout::Terminal => push(self.n_steps, Slot::Terminal, 1.0)?,
        }
        Ok(log_sum_exp(&terms))
    }

    /// Rows `(t, x, log xi, ell)` for plotting.
    pub fn table_rows(&self, mesh: &SpatialMesh) -> Vec<[f64; 4]> {
        let mut rows = Vec::with_capacity(self.times.len() * mesh.m);
        for (s, &t) in self.times.iter().enumerate() {
            for i in 0..mesh.m {
                rows.push([t, mesh.x(i), self.log_xi[s][i], self.ell[s][i]]);
            }
        }
        rows
    }
}

/// `(log xi, ell)` for time-profile value `g` and bump value `b`.
pub fn point_weights(params: &WeightParams, g: f64, b: f64) -> (f64, f64) {
    let mu = params.mu;
    let m = params.m;
    if g.is_infinite() {
        return (f64::INFINITY, f64::NEG_INFINITY);
    }
    let inner = mu * (b + 6.0 * m);
    let phi = g * (inner.exp() - mu * (6.0 * mu * (m + 1.0)).exp());
    (g.ln() + inner, params.lambda * phi)
}

fn combine(params: &WeightParams, spec: &PowerSpec, log_xi: f64, ell: f64, t: f64) -> Result<f64> {
    let mut v = spec.lambda * params.lambda.ln() + spec.mu * params.mu.ln() + spec.log_const;
    if ell == f64::NEG_INFINITY {
        if spec.theta > 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        if spec.theta < 0.0 {
            return Err(Error::Singular { t });
        }
        if spec.xi != 0.0 {
            return Ok(if spec.xi > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY });
        }
        return Ok(v);
    }
    if spec.xi != 0.0 {
        v += spec.xi * log_xi;
    }
    if spec.theta != 0.0 {
        v += spec.theta * ell;
    }
    Ok(v)
}

/// Named log-domain quantity in a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogTerm {
    pub name: String,
    pub log_value: f64,
}

/// Ordering of a regularized system against its unregularized parent on
/// the cached slots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegularizationCheck {
    /// Largest `gamma_eps - gamma` over the slot times.
    pub max_gamma_excess: f64,
    /// Largest `log theta - log theta_eps` over slots and points.
    pub max_log_theta_gap: f64,
    pub slots: usize,
}

impl RegularizationCheck {
    pub fn passed(&self) -> bool {
        self.max_gamma_excess <= 0.0 && self.max_log_theta_gap <= 0.0
    }
}

/// Compares `system` (regularized) with the unregularized system on the same grid.
pub fn regularization_check(system: &WeightSystem, mesh: &SpatialMesh, tree: &ScenarioTree) -> Result<RegularizationCheck> {
    let params = system.params;
    if !params.variant.is_regularized() {
        return Err(Error::Weights(format!("{} is not a regularized variant", params.variant.name())));
    }
    let raw = WeightSystem::with_base(params.with_variant(params.variant.unregularized(), 0.0)?, system.base.clone(), mesh, tree)?;
    let profile = |curve: &GammaCurve, t: f64| match curve.eval(t) {
        Ok(v) => Ok(v[0]),
        Err(Error::Singular { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    };
    let mut out = RegularizationCheck { max_gamma_excess: f64::NEG_INFINITY, max_log_theta_gap: f64::NEG_INFINITY, slots: 0 };
    for (s, &t) in system.times.iter().enumerate() {
        let excess = profile(&system.curve, t)? - profile(&raw.curve, t)?;
        out.max_gamma_excess = out.max_gamma_excess.max(excess);
        for (a, b) in raw.ell[s].iter().zip(&system.ell[s]) {
            // both -inf only where theta vanishes in each system
            let gap = if *a == f64::NEG_INFINITY { f64::NEG_INFINITY } else { a - b };
            out.max_log_theta_gap = out.max_log_theta_gap.max(gap);
        }
        out.slots += 1;
    }
    Ok(out)
}

/// Two-pass log-sum-exp in the given order; `-inf` for an empty sum.
pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max == f64::INFINITY {
        return max;
    }
    let sum: f64 = terms.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}
