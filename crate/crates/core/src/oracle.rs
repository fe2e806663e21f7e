//! Dense reference solvers for small control problems.
//!
//! Both oracles assemble the normal equations from explicit columns of the
//! control-to-state map, so they never touch the transposed solvers used by
//! the iterative path.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::hum::{FunctionalWeights, HumFunctional};
use crate::mesh::{DiffusionOperator, SpatialField, SpatialMesh};

fn solve_spd(h: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    match h.clone().cholesky() {
        Some(c) => Ok(c.solve(&b)),
        None => h.lu().solve(&b).ok_or_else(|| Error::Numerical("singular normal matrix".into())),
    }
}

/// Minimizer of `f` from the dense system `(D + Phi^T Phi) x = -Phi^T phi0`,
/// where `Phi` has one column of state features per control unit vector.
pub fn dense_kkt_control(f: &HumFunctional) -> Result<Vec<f64>> {
    let n = f.dim();
    let phi0 = f.state_features(&f.state(&vec![0.0; n], false)?);
    let rows = phi0.len();
    let mut phi = DMatrix::<f64>::zeros(rows, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = f.state_features(&f.state(&e, true)?);
        phi.column_mut(j).copy_from_slice(&col);
        e[j] = 0.0;
    }
    let mut h = phi.transpose() * &phi;
    for (j, d) in f.control_diagonal().iter().enumerate() {
        h[(j, j)] += d;
    }
    let b = -(phi.transpose() * DVector::from_vec(phi0));
    Ok(solve_spd(h, b)?.iter().copied().collect())
}

/// Deterministic parabolic control problem on one mesh: `n_steps` backward
/// steps of size `dt` from `y_T` with a frozen diffusion coefficient.
#[derive(Debug, Clone)]
pub struct DeterministicProblem<'a> {
    pub mesh: &'a SpatialMesh,
    pub diffusion: &'a [f64],
    pub c0: f64,
    pub implicitness: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub terminal: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct DeterministicSolution {
    /// Control at each step, full mesh length (zero off the control set).
    pub controls: Vec<SpatialField>,
    /// States `y_0 .. y_N`.
    pub states: Vec<SpatialField>,
    pub residual: f64,
}

/// Penalized HUM for the deterministic problem with the same per-step
/// weights as the tree functional.
pub fn deterministic_hum(
    problem: &DeterministicProblem<'_>,
    weights: &FunctionalWeights,
    eps: f64,
) -> Result<DeterministicSolution> {
    let mesh = problem.mesh;
    let m = mesh.m;
    let n = problem.n_steps;
    let dt = problem.dt;
    let h = mesh.h;
    let theta = problem.implicitness;

    let op = DiffusionOperator::new(mesh, problem.diffusion, problem.c0)?;
    let mut a = DMatrix::<f64>::zeros(m, m);
    let mut unit = vec![0.0; m];
    let mut col = vec![0.0; m];
    for j in 0..m {
        unit[j] = 1.0;
        op.apply_into(&unit, &mut col);
        a.column_mut(j).copy_from_slice(&col);
        unit[j] = 0.0;
    }
    let id = DMatrix::<f64>::identity(m, m);
    let lu = (&id - &a * (theta * dt)).lu();
    let explicit = &id + &a * ((1.0 - theta) * dt);
    let propagate = lu.solve(&explicit).ok_or_else(|| Error::Numerical("singular implicit matrix".into()))?;
    let inject = lu.solve(&(&id * (-dt))).ok_or_else(|| Error::Numerical("singular implicit matrix".into()))?;
    let mut grad = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        if i > 0 {
            grad[(i, i - 1)] = -0.5 / h;
        }
        if i + 1 < m {
            grad[(i, i + 1)] = 0.5 / h;
        }
    }

    let ctrl = mesh.ctrl_indices();
    let nc = ctrl.len();
    let dim = n * nc;
    // y_k = y_free_k + sum_{j >= k} maps[k][j] u_j
    let mut free = vec![DVector::<f64>::zeros(m); n + 1];
    free[n] = DVector::from_column_slice(problem.terminal);
    for k in (0..n).rev() {
        free[k] = &propagate * &free[k + 1];
    }
    let mut maps = vec![DMatrix::<f64>::zeros(m, dim); n + 1];
    for k in (0..n).rev() {
        let mut mk = &propagate * &maps[k + 1];
        for (c, &i) in ctrl.iter().enumerate() {
            let mut column = mk.column_mut(k * nc + c);
            column += inject.column(i);
        }
        maps[k] = mk;
    }

    let mut blocks: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::new();
    for k in 0..n {
        let q = dt * h;
        let wy = DMatrix::from_diagonal(&DVector::from_iterator(m, weights.state[k].iter().map(|w| (q * w).sqrt())));
        blocks.push((&wy * &maps[k], &wy * &free[k]));
        if let Some(wg) = &weights.gradient {
            let s = DMatrix::from_diagonal(&DVector::from_iterator(m, wg[k].iter().map(|w| (q * w).sqrt())));
            let g = &s * &grad;
            blocks.push((&g * &maps[k], &g * &free[k]));
        }
    }
    let c = (h / eps).sqrt();
    blocks.push((&maps[0] * c, &free[0] * c));

    let mut hmat = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for (phi, phi0) in &blocks {
        hmat += phi.transpose() * phi;
        rhs -= phi.transpose() * phi0;
    }
    for k in 0..n {
        for (ci, &i) in ctrl.iter().enumerate() {
            hmat[(k * nc + ci, k * nc + ci)] += dt * h * weights.control[k][i];
        }
    }
    let u = solve_spd(hmat, rhs)?;
    let controls: Vec<SpatialField> = (0..n)
        .map(|k| {
            let mut row = vec![0.0; m];
            for (ci, &i) in ctrl.iter().enumerate() {
                row[i] = u[k * nc + ci];
            }
            row
        })
        .collect();
    let states: Vec<SpatialField> =
        (0..=n).map(|k| (&free[k] + &maps[k] * &u).iter().copied().collect()).collect();
    let residual = mesh.l2_norm_sq(&states[0]);
    Ok(DeterministicSolution { controls, states, residual })
}
