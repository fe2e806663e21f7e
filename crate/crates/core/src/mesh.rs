//! Uniform 1-D grid on an interval with homogeneous Dirichlet boundary.
//!
//! Fields carry one value per interior grid point; boundary values are
//! implicitly zero. All discrete operators are written against that
//! convention so the inner product `h * sum(u * v)` makes the divergence
//! operators exact negative transposes of the gradient.

use serde::Serialize;

use crate::error::{Error, Result};

/// One real value per interior grid point.
pub type SpatialField = Vec<f64>;

const MASK_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpatialMesh {
    pub a_end: f64,
    pub b_end: f64,
    /// Interior point count.
    pub m: usize,
    pub h: f64,
    /// Grid-point indicator of the control region O'.
    pub ctrl_mask: Vec<bool>,
    /// Grid-point indicator of the interior subregion O1.
    pub inner_mask: Vec<bool>,
    pub ctrl_interval: (f64, f64),
    pub inner_interval: (f64, f64),
}

impl SpatialMesh {
    /// Builds the grid and the half-open interval masks `[lo, hi)`.
    pub fn new(
        a_end: f64,
        b_end: f64,
        m: usize,
        ctrl_interval: (f64, f64),
        inner_interval: (f64, f64),
    ) -> Result<Self> {
        if !(a_end.is_finite() && b_end.is_finite() && a_end < b_end) {
            return Err(Error::Mesh(format!(
                "domain endpoints must satisfy a < b, got ({a_end}, {b_end})"
            )));
        }
        if m < 5 {
            return Err(Error::Mesh(format!("need at least 5 interior points, got {m}")));
        }
        let (c_lo, c_hi) = ctrl_interval;
        let (i_lo, i_hi) = inner_interval;
        if !(a_end < c_lo && c_lo < c_hi && c_hi < b_end) {
            return Err(Error::Mesh(format!(
                "control interval ({c_lo}, {c_hi}) must lie strictly inside ({a_end}, {b_end})"
            )));
        }
        if !(c_lo < i_lo && i_lo < i_hi && i_hi < c_hi) {
            return Err(Error::Mesh(format!(
                "inner interval ({i_lo}, {i_hi}) must be nested strictly inside the control interval ({c_lo}, {c_hi})"
            )));
        }
        let h = (b_end - a_end) / (m as f64 + 1.0);
        let x = |i: usize| a_end + (i as f64 + 1.0) * h;
        let tol = MASK_EPS * (b_end - a_end);
        let in_interval = |xi: f64, lo: f64, hi: f64| xi >= lo - tol && xi < hi - tol;
        let ctrl_mask: Vec<bool> = (0..m).map(|i| in_interval(x(i), c_lo, c_hi)).collect();
        let inner_mask: Vec<bool> = (0..m).map(|i| in_interval(x(i), i_lo, i_hi)).collect();

        let n_ctrl = ctrl_mask.iter().filter(|&&b| b).count();
        let n_inner = inner_mask.iter().filter(|&&b| b).count();
        if n_ctrl < 3 {
            return Err(Error::Mesh(format!(
                "control region contains {n_ctrl} grid points, need at least 3"
            )));
        }
        if n_inner == 0 {
            return Err(Error::Mesh("inner region contains no grid points".into()));
        }
        if inner_mask.iter().zip(&ctrl_mask).any(|(&i, &c)| i && !c) {
            return Err(Error::Mesh("inner mask is not contained in control mask".into()));
        }
        Ok(Self {
            a_end,
            b_end,
            m,
            h,
            ctrl_mask,
            inner_mask,
            ctrl_interval,
            inner_interval,
        })
    }

    /// Coordinate of interior point `i` (0-based).
    pub fn x(&self, i: usize) -> f64 {
        self.a_end + (i as f64 + 1.0) * self.h
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.m).map(|i| self.x(i)).collect()
    }

    pub fn ctrl_count(&self) -> usize {
        self.ctrl_mask.iter().filter(|&&b| b).count()
    }

    pub fn inner_count(&self) -> usize {
        self.inner_mask.iter().filter(|&&b| b).count()
    }

    pub fn ctrl_indices(&self) -> Vec<usize> {
        (0..self.m).filter(|&i| self.ctrl_mask[i]).collect()
    }

    pub fn zeros(&self) -> SpatialField {
        vec![0.0; self.m]
    }

    pub fn sample(&self, f: impl Fn(f64) -> f64) -> SpatialField {
        (0..self.m).map(|i| f(self.x(i))).collect()
    }

    pub fn check(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.m {
            return Err(Error::Shape { expected: self.m, got: u.len() });
        }
        Ok(())
    }

    /// Central difference of the zero-extended field.
    pub fn gradient(&self, u: &[f64]) -> Result<SpatialField> {
        self.check(u)?;
        let mut out = vec![0.0; self.m];
        self.gradient_into(u, &mut out);
        Ok(out)
    }

    pub(crate) fn gradient_into(&self, u: &[f64], out: &mut [f64]) {
        let m = self.m;
        let inv = 0.5 / self.h;
        for i in 0..m {
            let left = if i == 0 { 0.0 } else { u[i - 1] };
            let right = if i + 1 == m { 0.0 } else { u[i + 1] };
            out[i] = (right - left) * inv;
        }
    }

    /// Divergence of a flux given at grid points, using the face-averaged
    /// stencil. This is the same skew matrix as [`Self::gradient`], so
    /// `<div b, v> = -<b, grad v>` holds exactly.
    pub fn divergence(&self, b: &[f64]) -> Result<SpatialField> {
        self.gradient(b)
    }

    /// Adds `scale * grad^T w` (Euclidean transpose) into `out`.
    pub(crate) fn gradient_transpose_add(&self, w: &[f64], scale: f64, out: &mut [f64]) {
        // grad is skew-symmetric, so grad^T = -grad.
        let m = self.m;
        let inv = 0.5 / self.h;
        for i in 0..m {
            let left = if i == 0 { 0.0 } else { w[i - 1] };
            let right = if i + 1 == m { 0.0 } else { w[i + 1] };
            out[i] -= scale * (right - left) * inv;
        }
    }

    /// Discrete `(a u')'` with face-averaged coefficient and Dirichlet ends.
    pub fn div_a_grad(&self, a: &[f64], u: &[f64], c0: f64) -> Result<SpatialField> {
        self.check(u)?;
        let op = DiffusionOperator::new(self, a, c0)?;
        let mut out = vec![0.0; self.m];
        op.apply_into(u, &mut out);
        Ok(out)
    }

    pub fn l2_inner(&self, u: &[f64], v: &[f64]) -> f64 {
        self.h * u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn l2_norm_sq(&self, u: &[f64]) -> f64 {
        self.l2_inner(u, u)
    }

    /// Discrete H^1_0 seminorm over all `m + 1` faces.
    pub fn h1_seminorm(&self, u: &[f64]) -> f64 {
        let m = self.m;
        let mut acc = 0.0;
        for f in 0..=m {
            let left = if f == 0 { 0.0 } else { u[f - 1] };
            let right = if f == m { 0.0 } else { u[f] };
            let d = right - left;
            acc += d * d;
        }
        (acc / self.h).sqrt()
    }
}

/// Symmetric tridiagonal stencil of `(a u')'` for one coefficient sample.
#[derive(Debug, Clone)]
pub struct DiffusionOperator {
    /// Face coefficients divided by h^2; `faces[f]` sits between points
    /// `f - 1` and `f` (index 0 and m are the boundary faces).
    faces: Vec<f64>,
}

impl DiffusionOperator {
    pub fn new(mesh: &SpatialMesh, a: &[f64], c0: f64) -> Result<Self> {
        mesh.check(a)?;
        for (i, &v) in a.iter().enumerate() {
            if !(v.is_finite() && v >= c0) {
                return Err(Error::Ellipticity { index: i, value: v, c0 });
            }
        }
        Ok(Self::new_unchecked(mesh, a))
    }

    pub(crate) fn new_unchecked(mesh: &SpatialMesh, a: &[f64]) -> Self {
        let m = mesh.m;
        let inv_h2 = 1.0 / (mesh.h * mesh.h);
        let mut faces = Vec::with_capacity(m + 1);
        faces.push(a[0] * inv_h2);
        for i in 1..m {
            faces.push(0.5 * (a[i - 1] + a[i]) * inv_h2);
        }
        faces.push(a[m - 1] * inv_h2);
        Self { faces }
    }

    pub fn len(&self) -> usize {
        self.faces.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        let m = self.len();
        for i in 0..m {
            let left = if i == 0 { 0.0 } else { u[i - 1] };
            let right = if i + 1 == m { 0.0 } else { u[i + 1] };
            out[i] = self.faces[i + 1] * (right - u[i]) - self.faces[i] * (u[i] - left);
        }
    }

    /// `out = (I + s * D) u`.
    pub fn shifted_apply_into(&self, s: f64, u: &[f64], out: &mut [f64]) {
        self.apply_into(u, out);
        for (o, &ui) in out.iter_mut().zip(u) {
            *o = ui + s * *o;
        }
    }

    /// Solves `(I - s * D) x = rhs` in place for `s >= 0` (Thomas algorithm;
    /// the matrix is symmetric and strictly diagonally dominant).
    pub fn solve_shifted(&self, s: f64, rhs: &mut [f64], scratch: &mut Vec<f64>) {
        let m = self.len();
        scratch.clear();
        scratch.resize(m, 0.0);
        let diag = |i: usize| 1.0 + s * (self.faces[i] + self.faces[i + 1]);
        // super/sub diagonal entry between i and i+1
        let off = |i: usize| -s * self.faces[i + 1];
        let mut denom = diag(0);
        scratch[0] = off(0) / denom;
        rhs[0] /= denom;
        for i in 1..m {
            let lower = off(i - 1);
            denom = diag(i) - lower * scratch[i - 1];
            if i + 1 < m {
                scratch[i] = off(i) / denom;
            }
            rhs[i] = (rhs[i] - lower * rhs[i - 1]) / denom;
        }
        for i in (0..m - 1).rev() {
            rhs[i] -= scratch[i] * rhs[i + 1];
        }
    }
}
