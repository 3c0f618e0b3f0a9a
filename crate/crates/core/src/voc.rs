//! Linear inhomogeneous solves through the tabulated fundamental solution,
//! a direct-integration oracle, and discrete residuals.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::par_map;
use crate::propagator::{integrate, BlockKind, BlockOperator, FundamentalSolution, VectorFn};
use crate::quad::simpson_weights;
use crate::spectral::{CoefVector, TimeGrid, Trajectory};

/// `ü + B(t)u̇ + A(t)u = f(t)`, `u(0) = u₀`, `u̇(0) = u₁` on `[0, T]`.
#[derive(Clone)]
pub struct LinearProblem {
    pub op: BlockOperator,
    pub u0: CoefVector,
    pub u1: CoefVector,
    pub forcing: VectorFn,
    pub horizon: f64,
}

impl std::fmt::Debug for LinearProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearProblem")
            .field("op", &self.op)
            .field("u0", &self.u0)
            .field("u1", &self.u1)
            .field("horizon", &self.horizon)
            .finish_non_exhaustive()
    }
}

impl LinearProblem {
    pub fn new(op: BlockOperator, u0: CoefVector, u1: CoefVector, forcing: VectorFn, horizon: f64) -> Result<Self> {
        let m = op.dim();
        for v in [&u0, &u1] {
            if v.len() != m {
                return Err(Error::Dimension {
                    expected: m,
                    got: v.len(),
                });
            }
        }
        let f0 = forcing(0.0);
        if f0.len() != m {
            return Err(Error::Dimension {
                expected: m,
                got: f0.len(),
            });
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self {
            op,
            u0,
            u1,
            forcing,
            horizon,
        })
    }

    pub fn homogeneous(op: BlockOperator, u0: CoefVector, u1: CoefVector, horizon: f64) -> Result<Self> {
        let m = op.dim();
        Self::new(op, u0, u1, zero_forcing(m), horizon)
    }
}

pub fn zero_forcing(m: usize) -> VectorFn {
    Arc::new(move |_| DVector::zeros(m))
}

fn output_indices(fs: &FundamentalSolution, grid: &TimeGrid) -> Result<Vec<usize>> {
    let idx = grid
        .nodes()
        .iter()
        .map(|&t| fs.grid().index_of(t))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| {
            Error::Config(format!(
                "output grid (step {}) is not a subset of the fundamental-solution grid (step {})",
                grid.step(),
                fs.grid().step()
            ))
        })?;
    Ok(idx)
}

/// `u(t_i) = v₁(t_i,t_k)x + v₂(t_i,t_k)y + ∫_{t_k}^{t_i} v₂(t_i,s) f(s) ds` with the
/// velocity from `v₃, v₄`, for output indices `out` (all `≥ start`).
/// `f[j]` is the forcing at fs node `start + j`.
pub(crate) fn representation(
    fs: &FundamentalSolution,
    start: usize,
    x: &CoefVector,
    y: &CoefVector,
    f: &[CoefVector],
    out: &[usize],
) -> (Vec<CoefVector>, Vec<CoefVector>) {
    let m = fs.dim();
    let dt = fs.grid().step();
    let mut state = DVector::zeros(2 * m);
    state.rows_mut(0, m).copy_from(x);
    state.rows_mut(m, m).copy_from(y);
    let rows: Vec<DVector<f64>> = par_map(out.len(), |k| {
        let i = out[k];
        let mut acc = fs.e(i, start) * &state;
        let w = simpson_weights(i - start, dt);
        for (jj, wj) in w.iter().enumerate() {
            let cols = fs.e(i, start + jj).columns(m, m);
            acc.gemv(*wj, &cols, &f[jj], 1.0);
        }
        acc
    });
    let u = rows.iter().map(|r| r.rows(0, m).into_owned()).collect();
    let v = rows.iter().map(|r| r.rows(m, m).into_owned()).collect();
    (u, v)
}

fn solve_with(p: &LinearProblem, fs: &FundamentalSolution, grid: &TimeGrid, kind: BlockKind) -> Result<Trajectory> {
    if fs.kind() != kind || p.op.kind() != kind {
        return Err(Error::Config(format!(
            "{kind:?} solve needs a {kind:?} operator and fundamental solution"
        )));
    }
    if fs.dim() != p.op.dim() {
        return Err(Error::Dimension {
            expected: p.op.dim(),
            got: fs.dim(),
        });
    }
    if fs.grid().start().abs() > 1e-12 {
        return Err(Error::Config("fundamental solution grid must start at 0".into()));
    }
    let out = output_indices(fs, grid)?;
    let last = *out.iter().max().expect("grid has nodes");
    let f: Vec<CoefVector> = fs.grid().nodes()[..=last].iter().map(|&t| (p.forcing)(t)).collect();
    if f.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(Error::Input("forcing is not finite on the grid".into()));
    }
    let (u, v) = representation(fs, 0, &p.u0, &p.u1, &f, &out);
    Ok(Trajectory {
        times: grid.nodes().to_vec(),
        u,
        v,
    })
}

/// Kozak representation `u(t) = C(t,0)u₀ + S(t,0)u₁ + ∫₀ᵗ S(t,s)f(s)ds`.
pub fn solve_undamped(p: &LinearProblem, fs: &FundamentalSolution, grid: &TimeGrid) -> Result<Trajectory> {
    solve_with(p, fs, grid, BlockKind::Undamped)
}

/// `u(t) = v₁(t,0)u₀ + v₂(t,0)u₁ + ∫₀ᵗ v₂(t,s)f(s)ds`.
pub fn solve_damped(p: &LinearProblem, fs: &FundamentalSolution, grid: &TimeGrid) -> Result<Trajectory> {
    solve_with(p, fs, grid, BlockKind::Damped)
}

/// Dispatch on the operator kind.
pub fn solve(p: &LinearProblem, fs: &FundamentalSolution, grid: &TimeGrid) -> Result<Trajectory> {
    solve_with(p, fs, grid, p.op.kind())
}

/// Integrate the inhomogeneous block system directly, node to node.
pub fn direct_integrate(p: &LinearProblem, grid: &TimeGrid, h: f64) -> Result<Trajectory> {
    p.op.check_step(h, grid.start(), grid.end())?;
    let m = p.op.dim();
    let forcing = p.forcing.clone();
    let full = move |t: f64| {
        let mut out = DVector::zeros(2 * m);
        out.rows_mut(m, m).copy_from(&forcing(t));
        out
    };
    let mut y = DMatrix::zeros(2 * m, 1);
    y.view_mut((0, 0), (m, 1)).copy_from(&p.u0);
    y.view_mut((m, 0), (m, 1)).copy_from(&p.u1);
    let t = grid.nodes();
    if t[0].abs() > 1e-12 {
        y = integrate(&p.op, 0.0, t[0], y, h, Some(&full))?;
    }
    let mut traj = Trajectory::zeros(t, m);
    for i in 0..t.len() {
        if i > 0 {
            y = integrate(&p.op, t[i - 1], t[i], y, h, Some(&full)).map_err(|e| match e {
                Error::Propagation { step, t: at, .. } => Error::Propagation {
                    step,
                    t: at,
                    context: format!(" in interval {i} of the direct integration"),
                },
                other => other,
            })?;
        }
        traj.u[i] = y.view((0, 0), (m, 1)).column(0).into_owned();
        traj.v[i] = y.view((m, 0), (m, 1)).column(0).into_owned();
    }
    Ok(traj)
}

/// Discrete residuals of a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Residual {
    /// `‖v̇_h + B v + A u − f‖` in discrete `L²(0,T;H)` over interior nodes.
    pub equation: f64,
    /// `‖u̇_h − v‖` in the same norm.
    pub velocity: f64,
    pub initial_u: f64,
    pub initial_v: f64,
}

/// First derivative at node `i`: five-point stencil when it fits, central otherwise.
fn derivative(x: &[CoefVector], i: usize, dt: f64, wide: bool) -> CoefVector {
    if wide {
        (-&x[i + 2] + &x[i + 1] * 8.0 - &x[i - 1] * 8.0 + &x[i - 2]) / (12.0 * dt)
    } else {
        (&x[i + 1] - &x[i - 1]) / (2.0 * dt)
    }
}

/// Residual of `ü + B(t)u̇ + A(t)u = rhs(t, u)` written as the first-order system
/// `u̇ = v`, `v̇ + Bv + Au = rhs`, with time derivatives from fourth-order
/// five-point stencils (central differences when the grid is too short).
pub fn residual<F>(traj: &Trajectory, op: &BlockOperator, u0: &CoefVector, u1: &CoefVector, rhs: F) -> Result<Residual>
where
    F: Fn(usize, f64, &CoefVector) -> CoefVector,
{
    let n = traj.len();
    if n < 3 {
        return Err(Error::Config("residual needs at least three time nodes".into()));
    }
    let grid = TimeGrid::from_nodes(traj.times.clone())?;
    let dt = grid.step();
    let wide = n >= 5;
    let range = if wide { 2..n - 2 } else { 1..n - 1 };
    let (mut eq, mut vel) = (0.0, 0.0);
    for i in range {
        let t = traj.times[i];
        let u = &traj.u[i];
        let mut r = derivative(&traj.v, i, dt, wide) + &*op.stiffness_at(t) * u - rhs(i, t, u);
        if let Some(b) = op.damping_at(t) {
            r += &*b * &traj.v[i];
        }
        eq += dt * r.norm_squared();
        vel += dt * (derivative(&traj.u, i, dt, wide) - &traj.v[i]).norm_squared();
    }
    Ok(Residual {
        equation: eq.sqrt(),
        velocity: vel.sqrt(),
        initial_u: (&traj.u[0] - u0).norm(),
        initial_v: (&traj.v[0] - u1).norm(),
    })
}

pub fn residual_linear(traj: &Trajectory, p: &LinearProblem) -> Result<Residual> {
    residual(traj, &p.op, &p.u0, &p.u1, |_, t, _| (p.forcing)(t))
}

/// `(M₁r₁ + M₂r₂ + M₂‖b‖_{L¹}) e^{M₂ a T}`.
pub fn gronwall_radius(m1: f64, m2: f64, r1: f64, r2: f64, b_l1: f64, a: f64, horizon: f64) -> f64 {
    (m1 * r1 + m2 * r2 + m2 * b_l1) * (m2 * a * horizon).exp()
}
