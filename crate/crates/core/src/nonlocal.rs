//! Nonlocal initial conditions `u(0) = g(u)`, `u̇(0) = h(u)`, superposition
//! operators, and the two fixed-point engines built on the variation-of-constants map.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Expr, Var};
use crate::forms::{kernel_lipschitz, KernelLipschitz};
use crate::propagator::{BlockOperator, FundamentalSolution, VectorFn};
use crate::quad::simpson_weights;
use crate::spectral::{padded_distance, weighted_product, CoefVector, SpectralBasis, TimeGrid, Trajectory};
use crate::voc::{gronwall_radius, representation, residual};

/// Fixed element added to `∫ κ(s,·)u(s,·) ds`.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum AffineOffset {
    #[default]
    Zero,
    /// A function of `(x, y)`, projected onto the basis.
    Field(Expr),
    /// Basis coordinates; entries beyond the basis dimension are dropped.
    Coefficients(Vec<f64>),
}

/// `g(u) = ∫₀ᵀ κ(s,·) u(s,·) ds + β`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlocalKernel {
    pub kernel: Expr,
    pub offset: AffineOffset,
}

impl NonlocalKernel {
    pub fn new(kernel: Expr, offset: AffineOffset) -> Self {
        Self { kernel, offset }
    }

    pub fn parse(kernel: &str, offset: AffineOffset) -> Result<Self> {
        Ok(Self::new(Expr::parse(kernel)?, offset))
    }

    pub fn zero() -> Self {
        Self::new(Expr::Const(0.0), AffineOffset::Zero)
    }

    pub fn constant(offset: AffineOffset) -> Self {
        Self::new(Expr::Const(0.0), offset)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum KernelMatrices {
    /// Kernel independent of space: multiplication is a scalar per node.
    Scalar(Vec<f64>),
    Full(Vec<DMatrix<f64>>),
}

/// A kernel discretized on a time grid: Simpson weights times projected
/// multiplication operators `𝒫 κ(s_j,·) 𝒫`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelOperator {
    times: Vec<f64>,
    weights: Vec<f64>,
    matrices: KernelMatrices,
    offset: CoefVector,
    lipschitz: KernelLipschitz,
}

impl KernelOperator {
    pub fn assemble(k: &NonlocalKernel, basis: &SpectralBasis, grid: &TimeGrid) -> Result<Self> {
        if grid.intervals() < 2 {
            return Err(Error::Config(format!(
                "kernel quadrature needs at least two time intervals, got {}",
                grid.intervals()
            )));
        }
        let times = grid.nodes().to_vec();
        let weights = simpson_weights(grid.intervals(), grid.step());
        let spatial = k.kernel.depends_on(Var::X) || k.kernel.depends_on(Var::Y);
        let matrices = if spatial {
            let mut mats = Vec::with_capacity(times.len());
            for &s in &times {
                let w: Vec<f64> = basis
                    .nodes()
                    .iter()
                    .zip(basis.weights())
                    .map(|(p, w)| w * k.kernel.eval(s, p[0], p[1]))
                    .collect();
                if w.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Input(format!("kernel is not finite at s = {s}")));
                }
                mats.push(weighted_product(basis.values(), &w, basis.values()));
            }
            KernelMatrices::Full(mats)
        } else {
            let vals: Vec<f64> = times.iter().map(|&s| k.kernel.eval(s, 0.0, 0.0)).collect();
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input("kernel is not finite on the grid".into()));
            }
            KernelMatrices::Scalar(vals)
        };
        let m = basis.dim();
        let offset = match &k.offset {
            AffineOffset::Zero => DVector::zeros(m),
            AffineOffset::Field(e) => basis.project(|x, y| e.eval(0.0, x, y))?,
            AffineOffset::Coefficients(c) => {
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Input("offset coefficients must be finite".into()));
                }
                DVector::from_fn(m, |i, _| c.get(i).copied().unwrap_or(0.0))
            }
        };
        let lipschitz = kernel_lipschitz(&k.kernel, basis, grid.end() - grid.start())?;
        Ok(Self {
            times,
            weights,
            matrices,
            offset,
            lipschitz,
        })
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn offset(&self) -> &CoefVector {
        &self.offset
    }

    pub fn set_offset(&mut self, offset: CoefVector) -> Result<()> {
        if offset.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: offset.len(),
            });
        }
        self.offset = offset;
        Ok(())
    }

    pub fn lipschitz(&self) -> KernelLipschitz {
        self.lipschitz
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// The integral part only, `∫ κ u ds`.
    pub fn integral(&self, u: &[CoefVector]) -> Result<CoefVector> {
        if u.len() != self.times.len() {
            return Err(Error::Dimension {
                expected: self.times.len(),
                got: u.len(),
            });
        }
        let mut acc = DVector::zeros(self.dim());
        match &self.matrices {
            KernelMatrices::Scalar(k) => {
                for ((w, k), u) in self.weights.iter().zip(k).zip(u) {
                    acc.axpy(w * k, u, 1.0);
                }
            }
            KernelMatrices::Full(mats) => {
                for ((w, k), u) in self.weights.iter().zip(mats).zip(u) {
                    acc.gemv(*w, k, u, 1.0);
                }
            }
        }
        Ok(acc)
    }

    pub fn apply(&self, u: &[CoefVector]) -> Result<CoefVector> {
        Ok(self.integral(u)? + &self.offset)
    }
}

/// `g(u)` for a trajectory covering the kernel's horizon.
pub fn apply_kernel(k: &NonlocalKernel, traj: &Trajectory, basis: &SpectralBasis) -> Result<CoefVector> {
    let grid = TimeGrid::from_nodes(traj.times.clone())?;
    KernelOperator::assemble(k, basis, &grid)?.apply(&traj.u)
}

/// Scalar law applied to function values or coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "law", content = "slope")]
pub enum PointLaw {
    Zero,
    Identity,
    Linear(f64),
    Tanh,
    Sin,
    /// `z / (1 + z²)`.
    Logistic,
}

impl PointLaw {
    pub fn eval(self, z: f64) -> f64 {
        match self {
            PointLaw::Zero => 0.0,
            PointLaw::Identity => z,
            PointLaw::Linear(c) => c * z,
            PointLaw::Tanh => z.tanh(),
            PointLaw::Sin => z.sin(),
            PointLaw::Logistic => z / (1.0 + z * z),
        }
    }

    /// Smallest `a` with `|law(z)| ≤ a|z|`, which is also its Lipschitz constant.
    pub fn slope_bound(self) -> f64 {
        match self {
            PointLaw::Zero => 0.0,
            PointLaw::Linear(c) => c.abs(),
            _ => 1.0,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name.trim() {
            "zero" | "0" => PointLaw::Zero,
            "identity" | "u" => PointLaw::Identity,
            "tanh" => PointLaw::Tanh,
            "sin" => PointLaw::Sin,
            "logistic" | "u/(1+u^2)" => PointLaw::Logistic,
            other => {
                if let Some(c) = other.strip_prefix("linear:") {
                    let c: f64 = c.trim().parse().map_err(|_| Error::Config(format!("bad slope in `{other}`")))?;
                    PointLaw::Linear(c)
                } else {
                    return Err(Error::Config(format!("unknown nonlinearity `{other}`")));
                }
            }
        })
    }

    pub fn name(self) -> String {
        match self {
            PointLaw::Zero => "zero".into(),
            PointLaw::Identity => "identity".into(),
            PointLaw::Linear(c) => format!("linear:{c}"),
            PointLaw::Tanh => "tanh".into(),
            PointLaw::Sin => "sin".into(),
            PointLaw::Logistic => "logistic".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Evaluation {
    /// `𝒫 law(u(x))`: evaluate at quadrature nodes, apply, project back.
    Pointwise,
    /// `law` applied to each coordinate.
    Modal,
}

/// `f(t, u) = law(u) + s(t)` with declared growth `‖f(t,u)‖ ≤ a‖u‖ + b(t)`.
#[derive(Clone)]
pub struct Nonlinearity {
    pub law: PointLaw,
    pub evaluation: Evaluation,
    /// Declared `a`.
    pub growth_a: f64,
    /// Declared constant part of `b(t)`; the source norm is added on top.
    pub growth_b: f64,
    /// Declared Lipschitz constant, if the law is to be used by the contraction engine.
    pub lipschitz: Option<f64>,
    /// Additive source term in basis coordinates.
    pub source: Option<VectorFn>,
}

impl std::fmt::Debug for Nonlinearity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Nonlinearity")
            .field("law", &self.law)
            .field("evaluation", &self.evaluation)
            .field("growth_a", &self.growth_a)
            .field("growth_b", &self.growth_b)
            .field("lipschitz", &self.lipschitz)
            .field("source", &self.source.is_some())
            .finish()
    }
}

impl Nonlinearity {
    pub fn new(law: PointLaw, evaluation: Evaluation) -> Self {
        Self {
            law,
            evaluation,
            growth_a: law.slope_bound(),
            growth_b: 0.0,
            lipschitz: Some(law.slope_bound()),
            source: None,
        }
    }

    pub fn zero() -> Self {
        Self::new(PointLaw::Zero, Evaluation::Modal)
    }

    pub fn with_source(mut self, source: VectorFn) -> Self {
        self.source = Some(source);
        self
    }

    pub fn apply(&self, basis: &SpectralBasis, t: f64, u: &CoefVector) -> CoefVector {
        let mut out = match (self.law, self.evaluation) {
            (PointLaw::Zero, _) => DVector::zeros(u.len()),
            (PointLaw::Identity, _) => u.clone(),
            (PointLaw::Linear(c), _) => u * c,
            (law, Evaluation::Modal) => u.map(|z| law.eval(z)),
            (law, Evaluation::Pointwise) => {
                let samples: Vec<f64> = basis.evaluate_nodes(u).into_iter().map(|z| law.eval(z)).collect();
                basis
                    .project_samples(&samples)
                    .unwrap_or_else(|_| DVector::from_element(u.len(), f64::NAN))
            }
        };
        if let Some(s) = &self.source {
            out += s(t);
        }
        out
    }

    /// `b(t)`: declared constant plus the source norm.
    pub fn b_at(&self, t: f64) -> f64 {
        self.growth_b + self.source.as_ref().map_or(0.0, |s| s(t).norm())
    }

    /// Sample the declared growth and Lipschitz bounds on random probes.
    pub fn verify(&self, basis: &SpectralBasis, horizon: f64, probes: usize, seed: u64) -> ProbeReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = basis.dim();
        let mut growth_excess = f64::NEG_INFINITY;
        let mut lipschitz_excess = f64::NEG_INFINITY;
        for _ in 0..probes {
            let t = rng.random_range(0.0..=horizon);
            let u = random_vector(&mut rng, m);
            let w = random_vector(&mut rng, m);
            let fu = self.apply(basis, t, &u);
            growth_excess = growth_excess.max(fu.norm() - self.growth_a * u.norm() - self.b_at(t));
            if let Some(l) = self.lipschitz {
                let fw = self.apply(basis, t, &w);
                lipschitz_excess = lipschitz_excess.max((fu - fw).norm() - l * (&u - &w).norm());
            }
        }
        ProbeReport {
            probes,
            growth_excess,
            lipschitz_excess: self.lipschitz.map(|_| lipschitz_excess),
            consistent: growth_excess <= 1e-9 && lipschitz_excess <= 1e-9,
        }
    }
}

fn random_vector(rng: &mut ChaCha8Rng, m: usize) -> CoefVector {
    let scale = 10f64.powf(rng.random_range(-2.0..2.0));
    DVector::from_fn(m, |_, _| scale * rng.random_range(-1.0..1.0))
}

/// Outcome of sampling declared constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeReport {
    pub probes: usize,
    /// `max (‖f(t,u)‖ − a‖u‖ − b(t))`; nonpositive when the declaration holds.
    pub growth_excess: f64,
    pub lipschitz_excess: Option<f64>,
    pub consistent: bool,
}

/// `N_f(u)(t) = f(t, u(t))` along a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Superposition {
    pub values: Vec<CoefVector>,
    /// `max_t (‖f(t,u(t))‖ − a‖u(t)‖ − b(t))`.
    pub growth_excess: f64,
    pub flagged: bool,
}

pub fn superpose(f: &Nonlinearity, basis: &SpectralBasis, traj: &Trajectory) -> Superposition {
    let mut excess = f64::NEG_INFINITY;
    let values: Vec<CoefVector> = traj
        .times
        .iter()
        .zip(&traj.u)
        .map(|(&t, u)| {
            let v = f.apply(basis, t, u);
            excess = excess.max(v.norm() - f.growth_a * u.norm() - f.b_at(t));
            v
        })
        .collect();
    Superposition {
        values,
        growth_excess: excess,
        flagged: excess > 1e-9,
    }
}

/// `ü + B(t)u̇ + A(t)u = f(t,u)`, `u(0) = g(u)`, `u̇(0) = h(u)`.
#[derive(Debug, Clone)]
pub struct SemilinearProblem {
    pub op: BlockOperator,
    pub basis: Arc<SpectralBasis>,
    pub f: Nonlinearity,
    pub g: KernelOperator,
    pub h: KernelOperator,
    pub horizon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixedPointConfig {
    /// Absolute sup-norm update tolerance.
    pub tol: f64,
    pub max_iter: usize,
    /// Relaxation weight for the relaxed engine.
    pub theta: f64,
    /// Homotopy steps in `λ` used when the direct relaxed iteration stalls.
    pub homotopy_steps: usize,
    /// Target contraction coefficient when choosing a partition.
    pub q_target: f64,
    pub inner_max: usize,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            theta: 1.0,
            homotopy_steps: 10,
            q_target: 0.9,
            inner_max: 200,
        }
    }
}

/// Constants entering the contraction and a-priori estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixedPointConstants {
    pub m1: f64,
    pub m2: f64,
    pub m1_sup: f64,
    pub m2_sup: f64,
    pub m2_integral: f64,
    pub lg: f64,
    pub lh: f64,
    pub l: Option<f64>,
    pub horizon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GronwallCheck {
    pub r1: f64,
    pub r2: f64,
    pub a: f64,
    pub b_l1: f64,
    pub radius: f64,
    pub max_iterate_norm: f64,
    pub inside: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub origin: String,
    pub sup_norm: f64,
    pub fixed_point_residual: f64,
    #[serde(skip)]
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointReport {
    pub method: &'static str,
    pub converged: bool,
    pub iterations: usize,
    pub update_norms: Vec<f64>,
    /// Successive update ratios, where both updates are above the noise floor.
    pub ratios: Vec<f64>,
    /// Largest ratio after the first three iterations.
    pub measured_ratio: Option<f64>,
    pub predicted_q: Option<f64>,
    /// Subinterval endpoints `0 = T_0 < … < T_N = T`.
    pub partition: Vec<f64>,
    pub partition_q: Option<f64>,
    pub constants: FixedPointConstants,
    pub residual_equation: f64,
    /// `‖u̇_h − v‖`: consistency of the displacement and velocity tracks.
    pub residual_velocity: f64,
    pub residual_g: f64,
    pub residual_h: f64,
    /// `sup_t ‖w − 𝒯(w)‖_H` at the returned iterate.
    pub fixed_point_residual: f64,
    pub theta: f64,
    pub lambda_reached: f64,
    pub gronwall: Option<GronwallCheck>,
    pub candidates: Vec<Candidate>,
    pub notes: Vec<String>,
}

fn check_problem(p: &SemilinearProblem, fs: &FundamentalSolution) -> Result<()> {
    let m = p.op.dim();
    for d in [fs.dim(), p.basis.dim(), p.g.dim(), p.h.dim()] {
        if d != m {
            return Err(Error::Dimension { expected: m, got: d });
        }
    }
    if fs.kind() != p.op.kind() {
        return Err(Error::Config("fundamental solution does not match the operator kind".into()));
    }
    let grid = fs.grid();
    if grid.start().abs() > 1e-12 || (grid.end() - p.horizon).abs() > 1e-9 * p.horizon {
        return Err(Error::Config(format!(
            "fundamental solution grid must span [0, {}], got [{}, {}]",
            p.horizon,
            grid.start(),
            grid.end()
        )));
    }
    for k in [&p.g, &p.h] {
        if k.times().len() != grid.len() || k.times().iter().zip(grid.nodes()).any(|(a, b)| (a - b).abs() > 1e-12) {
            return Err(Error::Config("kernels must be assembled on the fundamental-solution grid".into()));
        }
    }
    Ok(())
}

fn constants(p: &SemilinearProblem, fs: &FundamentalSolution) -> (FixedPointConstants, crate::propagator::PropagatorConstants) {
    let c = fs.constants();
    (
        FixedPointConstants {
            m1: c.m1,
            m2: c.m2,
            m1_sup: c.m1_sup,
            m2_sup: c.m2_sup,
            m2_integral: c.m2_integral,
            lg: p.g.lipschitz().into_v,
            lh: p.h.lipschitz().into_v,
            l: p.f.lipschitz,
            horizon: p.horizon,
        },
        c,
    )
}

/// `λ 𝒯(w)` on fs nodes `start..=end` from initial state `(x, y)` at `t_start`.
fn local_map(
    p: &SemilinearProblem,
    fs: &FundamentalSolution,
    w: &Trajectory,
    start: usize,
    end: usize,
    x: &CoefVector,
    y: &CoefVector,
    lambda: f64,
) -> (Vec<CoefVector>, Vec<CoefVector>) {
    let t = fs.grid().nodes();
    let f: Vec<CoefVector> = (start..=end).map(|j| p.f.apply(&p.basis, t[j], &w.u[j]) * lambda).collect();
    let out: Vec<usize> = (start..=end).collect();
    representation(fs, start, x, y, &f, &out)
}

/// Full map `λ𝒯(w)`.
fn full_map(p: &SemilinearProblem, fs: &FundamentalSolution, w: &Trajectory, lambda: f64) -> Result<Trajectory> {
    let x = p.g.apply(&w.u)? * lambda;
    let y = p.h.apply(&w.u)? * lambda;
    let n = fs.grid().len() - 1;
    let (u, v) = local_map(p, fs, w, 0, n, &x, &y, lambda);
    Ok(Trajectory {
        times: w.times.clone(),
        u,
        v,
    })
}

fn sup_update(a: &[CoefVector], b: &[CoefVector]) -> f64 {
    a.iter().zip(b).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
}

fn finish_report(
    p: &SemilinearProblem,
    fs: &FundamentalSolution,
    w: &Trajectory,
    report: &mut FixedPointReport,
) -> Result<()> {
    let gu = p.g.apply(&w.u)?;
    let hu = p.h.apply(&w.u)?;
    report.residual_g = (&w.u[0] - &gu).norm();
    report.residual_h = (&w.v[0] - &hu).norm();
    let res = residual(w, &p.op, &gu, &hu, |_, t, u| p.f.apply(&p.basis, t, u))?;
    report.residual_equation = res.equation;
    report.residual_velocity = res.velocity;
    let tw = full_map(p, fs, w, 1.0)?;
    report.fixed_point_residual = sup_update(&tw.u, &w.u);
    let noise = 1e-12 * (1.0 + w.sup_norm());
    report.ratios = report
        .update_norms
        .windows(2)
        .filter(|u| u[0] > noise && u[1] > noise)
        .map(|u| u[1] / u[0])
        .collect();
    report.measured_ratio = report
        .update_norms
        .windows(2)
        .enumerate()
        .filter(|(k, u)| *k >= 2 && u[0] > noise && u[1] > noise)
        .map(|(_, u)| u[1] / u[0])
        .reduce(f64::max);
    Ok(())
}

fn empty_report(method: &'static str, constants: FixedPointConstants, theta: f64) -> FixedPointReport {
    FixedPointReport {
        method,
        converged: false,
        iterations: 0,
        update_norms: Vec::new(),
        ratios: Vec::new(),
        measured_ratio: None,
        predicted_q: None,
        partition: Vec::new(),
        partition_q: None,
        constants,
        residual_equation: f64::NAN,
        residual_velocity: f64::NAN,
        residual_g: f64::NAN,
        residual_h: f64::NAN,
        fixed_point_residual: f64::NAN,
        theta,
        lambda_reached: 0.0,
        gronwall: None,
        candidates: Vec::new(),
        notes: Vec::new(),
    }
}

/// Banach iteration `w ↦ P(w)` from `w₀ ≡ 0`.
///
/// The predicted coefficient is `q = (M₁L_g + M₂L_h)√T + L·M_{2,T}`. When
/// `q ≥ 1`, `[0, T]` is cut into equal pieces whose coefficient is at most
/// `cfg.q_target`, and each outer sweep solves the pieces forward in order, each
/// started from the end state of the previous one (the first from `g`, `h` of
/// the current iterate).
pub fn contraction_solve(
    p: &SemilinearProblem,
    fs: &FundamentalSolution,
    cfg: &FixedPointConfig,
) -> Result<(Trajectory, FixedPointReport)> {
    check_problem(p, fs)?;
    let l = p
        .f
        .lipschitz
        .ok_or_else(|| Error::Config("the contraction engine needs a Lipschitz nonlinearity".into()))?;
    let (consts, pc) = constants(p, fs);
    let n = fs.grid().intervals();
    let dt = fs.grid().step();
    let q = (consts.m1 * consts.lg + consts.m2 * consts.lh) * p.horizon.sqrt() + l * consts.m2_integral;
    let mut report = empty_report("contraction", consts, 1.0);
    report.predicted_q = Some(q);
    report.lambda_reached = 1.0;

    let (k, q_piece) = if q < 1.0 {
        (n, q)
    } else {
        let piece_q = |k: usize| {
            (consts.m1_sup * consts.lg + consts.m2_sup * consts.lh) * (k as f64 * dt).sqrt()
                + l * pc.window_integral(k)
        };
        match (1..=n).rev().find(|&k| piece_q(k) <= cfg.q_target) {
            Some(k) => (k, piece_q(k)),
            None => {
                report.notes.push(format!(
                    "no subinterval length reaches q <= {}; using one grid interval per piece",
                    cfg.q_target
                ));
                (1, piece_q(1))
            }
        }
    };
    let mut bounds: Vec<usize> = (0..n).step_by(k).collect();
    bounds.push(n);
    report.partition = bounds.iter().map(|&i| fs.grid().nodes()[i]).collect();
    report.partition_q = Some(q_piece);
    let single = bounds.len() == 2;

    let m = p.op.dim();
    let mut w = Trajectory::zeros(fs.grid().nodes(), m);
    let mut track = Tracker::default();
    for it in 1..=cfg.max_iter {
        track.observe(p, &w)?;
        let old = w.u.clone();
        let mut x = p.g.apply(&w.u)?;
        let mut y = p.h.apply(&w.u)?;
        for piece in bounds.windows(2) {
            let (a, b) = (piece[0], piece[1]);
            let inner = if single { 1 } else { cfg.inner_max };
            for _ in 0..inner {
                let (u, v) = local_map(p, fs, &w, a, b, &x, &y, 1.0);
                let upd = sup_update(&u, &w.u[a..=b]);
                w.u.splice(a..=b, u);
                w.v.splice(a..=b, v);
                if upd < cfg.tol * 0.1 {
                    break;
                }
            }
            x = w.u[b].clone();
            y = w.v[b].clone();
        }
        let upd = sup_update(&w.u, &old);
        report.update_norms.push(upd);
        report.iterations = it;
        if !upd.is_finite() || upd > 1e12 {
            report.notes.push(format!("iteration diverged at step {it}"));
            break;
        }
        if upd < cfg.tol {
            report.converged = true;
            break;
        }
    }
    if report.update_norms.last().is_some_and(|u| u.is_finite()) {
        track.observe(p, &w)?;
        finish_report(p, fs, &w, &mut report)?;
        report.gronwall = Some(track.check(p, fs, &consts, cfg.tol));
    }
    Ok((w, report))
}

/// Relaxed iteration `w ← (1−θ)w + θ𝒯(w)`; if it does not reach the tolerance,
/// continuation in `λ` solves `w = λ𝒯(w)` for `λ = 1/K, 2/K, …, 1`.
pub fn relaxed_solve(
    p: &SemilinearProblem,
    fs: &FundamentalSolution,
    cfg: &FixedPointConfig,
) -> Result<(Trajectory, FixedPointReport)> {
    check_problem(p, fs)?;
    if !(cfg.theta > 0.0 && cfg.theta <= 1.0) {
        return Err(Error::Config(format!("theta must lie in (0, 1], got {}", cfg.theta)));
    }
    let (consts, _) = constants(p, fs);
    let mut report = empty_report("relaxed", consts, cfg.theta);
    let m = p.op.dim();
    let mut track = Tracker::default();
    let zero = Trajectory::zeros(fs.grid().nodes(), m);

    let mut w = zero.clone();
    let direct = relax(p, fs, &mut w, 1.0, cfg.theta, cfg, &mut report, &mut track)?;
    if direct {
        report.converged = true;
        report.lambda_reached = 1.0;
        push_candidate(p, fs, &w, "direct", cfg.tol, &mut report)?;
    } else {
        report.notes.push("direct relaxed iteration did not converge; continuing in lambda".into());
        let mut w_h = zero.clone();
        let mut theta = cfg.theta;
        let steps = cfg.homotopy_steps.max(1);
        let mut reached = 0.0;
        'outer: for s in 1..=steps {
            let lambda = s as f64 / steps as f64;
            let start = w_h.clone();
            loop {
                let mut trial = start.clone();
                if relax(p, fs, &mut trial, lambda, theta, cfg, &mut report, &mut track)? {
                    w_h = trial;
                    reached = lambda;
                    break;
                }
                theta /= 2.0;
                if theta < cfg.theta / 8.0 {
                    report.notes.push(format!("continuation stalled at lambda = {lambda}"));
                    break 'outer;
                }
            }
        }
        report.lambda_reached = reached;
        report.theta = theta;
        if reached == 1.0 {
            report.converged = true;
            push_candidate(p, fs, &w_h, "homotopy", cfg.tol, &mut report)?;
            w = w_h;
        } else if reached > 0.0 {
            w = w_h;
        }
    }

    finish_report(p, fs, &w, &mut report)?;
    report.gronwall = Some(track.check(p, fs, &consts, cfg.tol));
    Ok((w, report))
}

#[derive(Default)]
struct Tracker {
    r1: f64,
    r2: f64,
    max_norm: f64,
}

impl Tracker {
    fn observe(&mut self, p: &SemilinearProblem, w: &Trajectory) -> Result<()> {
        self.r1 = self.r1.max(p.g.apply(&w.u)?.norm());
        self.r2 = self.r2.max(p.h.apply(&w.u)?.norm());
        self.max_norm = self.max_norm.max(w.sup_norm());
        Ok(())
    }

    fn check(&self, p: &SemilinearProblem, fs: &FundamentalSolution, consts: &FixedPointConstants, tol: f64) -> GronwallCheck {
        let b: Vec<f64> = fs.grid().nodes().iter().map(|&t| p.f.b_at(t)).collect();
        let b_l1: f64 = simpson_weights(fs.grid().intervals(), fs.grid().step())
            .iter()
            .zip(&b)
            .map(|(w, b)| w * b)
            .sum();
        let radius = gronwall_radius(consts.m1, consts.m2_sup, self.r1, self.r2, b_l1, p.f.growth_a, p.horizon);
        GronwallCheck {
            r1: self.r1,
            r2: self.r2,
            a: p.f.growth_a,
            b_l1,
            radius,
            max_iterate_norm: self.max_norm,
            inside: self.max_norm <= radius * (1.0 + 1e-9) + tol,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn relax(
    p: &SemilinearProblem,
    fs: &FundamentalSolution,
    w: &mut Trajectory,
    lambda: f64,
    theta: f64,
    cfg: &FixedPointConfig,
    report: &mut FixedPointReport,
    track: &mut Tracker,
) -> Result<bool> {
    for _ in 0..cfg.max_iter {
        track.observe(p, w)?;
        let tw = full_map(p, fs, w, lambda)?;
        let upd = theta * sup_update(&tw.u, &w.u);
        for (a, b) in w.u.iter_mut().zip(&tw.u) {
            *a = &*a * (1.0 - theta) + b * theta;
        }
        for (a, b) in w.v.iter_mut().zip(&tw.v) {
            *a = &*a * (1.0 - theta) + b * theta;
        }
        report.update_norms.push(upd);
        report.iterations += 1;
        if !upd.is_finite() || upd > 1e12 {
            return Ok(false);
        }
        if upd < cfg.tol {
            track.max_norm = track.max_norm.max(w.sup_norm());
            // one exact application keeps the velocity track consistent with the map
            let tw = full_map(p, fs, w, lambda)?;
            *w = tw;
            return Ok(true);
        }
    }
    Ok(false)
}

fn push_candidate(
    p: &SemilinearProblem,
    fs: &FundamentalSolution,
    w: &Trajectory,
    origin: &str,
    tol: f64,
    report: &mut FixedPointReport,
) -> Result<()> {
    let tw = full_map(p, fs, w, 1.0)?;
    let res = sup_update(&tw.u, &w.u);
    if report.candidates.iter().all(|c| c.trajectory.sup_distance(w) > 10.0 * tol) {
        report.candidates.push(Candidate {
            origin: origin.into(),
            sup_norm: w.sup_norm(),
            fixed_point_residual: res,
            trajectory: w.clone(),
        });
    }
    Ok(())
}

/// A solved refinement level.
#[derive(Debug, Clone)]
pub struct RefinementLevel {
    pub trajectory: Trajectory,
    pub report: FixedPointReport,
    pub fs: FundamentalSolution,
}

/// One row of a Galerkin refinement table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementRow {
    pub m: usize,
    pub converged: bool,
    pub iterations: usize,
    /// `‖u_m − u_M‖_{L²(0,T;H)}` against the finest level.
    pub diff_to_finest: f64,
    /// `‖u_m − u_{m'}‖_{L²(0,T;H)}` against the next level in the list.
    pub diff_to_next: Option<f64>,
    /// `max_{s≤t} ‖S_m(t,s)𝒫_m y − S_M(t,s)y‖` for each probe `y`.
    pub s_action_diff: Vec<f64>,
    pub error: Option<String>,
}

/// Solve at each mode count and compare against the finest one.
pub fn galerkin_refine<F>(m_list: &[usize], probes: usize, seed: u64, mut solve: F) -> Result<Vec<RefinementRow>>
where
    F: FnMut(usize) -> Result<RefinementLevel>,
{
    if m_list.len() < 2 || m_list.windows(2).any(|p| p[1] < p[0]) {
        return Err(Error::Config("mode list must be nondecreasing with at least two entries".into()));
    }
    let levels: Vec<std::result::Result<RefinementLevel, String>> =
        m_list.iter().map(|&m| solve(m).map_err(|e| e.to_string())).collect();
    let finest_m = *m_list.last().expect("non-empty");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ys: Vec<CoefVector> = (0..probes)
        .map(|_| {
            let y = DVector::from_fn(finest_m, |_, _| rng.random_range(-1.0..1.0));
            let n = y.norm();
            y / n
        })
        .collect();
    let finest = levels.last().expect("non-empty").as_ref().ok();
    let mut rows = Vec::with_capacity(m_list.len());
    for (k, (&m, level)) in m_list.iter().zip(&levels).enumerate() {
        let mut row = RefinementRow {
            m,
            converged: false,
            iterations: 0,
            diff_to_finest: f64::NAN,
            diff_to_next: None,
            s_action_diff: vec![f64::NAN; probes],
            error: None,
        };
        match level {
            Err(e) => row.error = Some(e.clone()),
            Ok(lv) => {
                row.converged = lv.report.converged;
                row.iterations = lv.report.iterations;
                if let Some(f) = finest {
                    row.diff_to_finest = lv.trajectory.l2_distance(&f.trajectory);
                    row.s_action_diff = ys.iter().map(|y| s_action_gap(&lv.fs, &f.fs, y)).collect::<Result<_>>()?;
                }
                if let Some(Ok(next)) = levels.get(k + 1) {
                    row.diff_to_next = Some(lv.trajectory.l2_distance(&next.trajectory));
                }
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

fn s_action_gap(coarse: &FundamentalSolution, fine: &FundamentalSolution, y: &CoefVector) -> Result<f64> {
    if coarse.grid().len() != fine.grid().len() {
        return Err(Error::Config("refinement levels must share one time grid".into()));
    }
    let m = coarse.dim();
    let py = y.rows(0, m).into_owned();
    let n = coarse.grid().len();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..=i {
            let a = coarse.s(i, j) * &py;
            let b = fine.s(i, j) * y;
            worst = worst.max(padded_distance(&a, &b));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::SpatialDomain;
    use std::f64::consts::PI;

    fn unit_basis() -> SpectralBasis {
        SpectralBasis::build(SpatialDomain::interval(1.0), 1).unwrap()
    }

    fn traj_from(times: &[f64], f: impl Fn(f64) -> f64) -> Trajectory {
        let mut t = Trajectory::zeros(times, 1);
        for (i, &s) in times.iter().enumerate() {
            t.u[i][0] = f(s);
        }
        t
    }

    #[test]
    fn kernel_examples() {
        let b = unit_basis();
        let grid = TimeGrid::uniform(2.0, 20).unwrap();
        let avg = NonlocalKernel::parse("1/2", AffineOffset::Zero).unwrap();
        let g = apply_kernel(&avg, &traj_from(grid.nodes(), |_| 1.0), &b).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-14);

        let off = NonlocalKernel::constant(AffineOffset::Coefficients(vec![0.3]));
        let g = apply_kernel(&off, &traj_from(grid.nodes(), |s| s.sin()), &b).unwrap();
        assert_eq!(g[0], 0.3);

        let grid = TimeGrid::uniform(PI / 2.0, 100).unwrap();
        let gamma = NonlocalKernel::parse("0.7", AffineOffset::Zero).unwrap();
        let g = apply_kernel(&gamma, &traj_from(grid.nodes(), f64::cos), &b).unwrap();
        assert!((g[0] - 0.7).abs() < 1e-9);

        let coarse = TimeGrid::uniform(1.0, 1).unwrap();
        assert!(KernelOperator::assemble(&gamma, &b, &coarse).is_err());
    }

    #[test]
    fn spatial_kernel_matches_scalar_path() {
        let b = SpectralBasis::build(SpatialDomain::interval(PI), 6).unwrap();
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let mut traj = Trajectory::zeros(grid.nodes(), 6);
        for (i, u) in traj.u.iter_mut().enumerate() {
            *u = DVector::from_fn(6, |k, _| ((i + k) as f64).cos());
        }
        let scalar = NonlocalKernel::parse("exp(-t)", AffineOffset::Zero).unwrap();
        let spatial = NonlocalKernel::parse("exp(-t) + 0*x", AffineOffset::Zero).unwrap();
        let a = apply_kernel(&scalar, &traj, &b).unwrap();
        let c = apply_kernel(&spatial, &traj, &b).unwrap();
        assert!((a - c).amax() < 1e-12);
    }

    #[test]
    fn superposition_examples() {
        let b = unit_basis();
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let traj = traj_from(grid.nodes(), |t| 3.0 * t - 1.0);
        let z = superpose(&Nonlinearity::zero(), &b, &traj);
        assert!(z.values.iter().all(|v| v[0] == 0.0));
        let id = superpose(&Nonlinearity::new(PointLaw::Identity, Evaluation::Modal), &b, &traj);
        assert_eq!(id.values, traj.u);
        let sin = Nonlinearity::new(PointLaw::Sin, Evaluation::Modal);
        assert!(!superpose(&sin, &b, &traj).flagged);
        assert!(sin.verify(&b, 1.0, 200, 7).consistent);
        let mut liar = Nonlinearity::new(PointLaw::Identity, Evaluation::Modal);
        liar.growth_a = 0.5;
        assert!(superpose(&liar, &b, &traj).flagged);
        assert!(!liar.verify(&b, 1.0, 50, 7).consistent);
    }

    #[test]
    fn pointwise_laws_respect_declarations() {
        let b = SpectralBasis::build(SpatialDomain::interval(PI), 8).unwrap();
        for law in [PointLaw::Tanh, PointLaw::Logistic, PointLaw::Sin] {
            let f = Nonlinearity::new(law, Evaluation::Pointwise);
            let r = f.verify(&b, 1.0, 100, 3);
            assert!(r.consistent, "{law:?} {r:?}");
        }
    }

    #[test]
    fn law_names_round_trip() {
        for law in [PointLaw::Zero, PointLaw::Identity, PointLaw::Linear(-0.5), PointLaw::Tanh, PointLaw::Sin, PointLaw::Logistic] {
            assert_eq!(PointLaw::parse(&law.name()).unwrap(), law);
        }
        assert!(PointLaw::parse("cube").is_err());
    }

    fn toy(gamma: f64, horizon: f64, n: usize) -> (SemilinearProblem, FundamentalSolution) {
        let basis = Arc::new(unit_basis());
        let op = BlockOperator::constant(DMatrix::from_element(1, 1, 1.0), None);
        let grid = TimeGrid::uniform(horizon, n).unwrap();
        let fs = FundamentalSolution::build(&op, &grid, 1e-3, crate::propagator::Assembly::Direct).unwrap();
        let g = NonlocalKernel::new(Expr::Const(gamma), AffineOffset::Coefficients(vec![1.0]));
        let g = KernelOperator::assemble(&g, &basis, &grid).unwrap();
        let h = KernelOperator::assemble(&NonlocalKernel::zero(), &basis, &grid).unwrap();
        let p = SemilinearProblem {
            op,
            basis,
            f: Nonlinearity::zero(),
            g,
            h,
            horizon,
        };
        (p, fs)
    }

    #[test]
    fn contraction_toy_matches_closed_form() {
        let (p, fs) = toy(0.5, PI / 2.0, 100);
        let (w, r) = contraction_solve(&p, &fs, &FixedPointConfig::default()).unwrap();
        assert!(r.converged);
        let q = r.predicted_q.unwrap();
        assert!((q - PI / 4.0).abs() < 1e-3, "q = {q}");
        assert_eq!(r.partition.len(), 2);
        assert!((w.u[0][0] - 2.0).abs() < 1e-6, "u(0) = {}", w.u[0][0]);
        let measured = r.measured_ratio.unwrap();
        assert!(measured <= q + 1e-6, "{measured} > {q}");
        assert!(r.fixed_point_residual < 1e-7);
    }

    #[test]
    fn contraction_partitions_when_q_exceeds_one() {
        let (p, fs) = toy(0.8, PI / 2.0, 100);
        let (w, r) = contraction_solve(&p, &fs, &FixedPointConfig::default()).unwrap();
        assert!(r.predicted_q.unwrap() >= 1.0);
        assert!(r.partition.len() > 2);
        assert!(r.partition_q.unwrap() <= 0.9);
        assert!(r.converged, "{:?}", r.update_norms);
        assert!((w.u[0][0] - 5.0).abs() < 1e-5, "u(0) = {}", w.u[0][0]);
    }

    #[test]
    fn relaxed_toy_stays_in_gronwall_ball() {
        let (p, fs) = toy(0.5, PI / 2.0, 100);
        let cfg = FixedPointConfig {
            theta: 0.7,
            ..FixedPointConfig::default()
        };
        let (w, r) = relaxed_solve(&p, &fs, &cfg).unwrap();
        assert!(r.converged);
        assert!((w.u[0][0] - 2.0).abs() < 1e-6);
        let g = r.gronwall.unwrap();
        assert!(g.inside, "{g:?}");
        assert_eq!(r.candidates.len(), 1);
    }

}
