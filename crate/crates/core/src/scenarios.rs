//! Ready-made problems: the Neumann wave equation with time-dependent diffusivity,
//! the damped population model, and manufactured-solution wrappers around either.

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Expr, Var};
use crate::forms::{certify, CertifyOptions, CoefficientField, FormCertificate, FormSpec, Symbol};
use crate::nonlocal::{
    contraction_solve, relaxed_solve, AffineOffset, Evaluation, FixedPointConfig, FixedPointReport,
    KernelOperator, NonlocalKernel, Nonlinearity, PointLaw, SemilinearProblem,
};
use crate::propagator::{Assembly, BlockOperator, FundamentalSolution, VectorFn};
use crate::spectral::{CoefVector, SpatialDomain, SpectralBasis, TimeGrid, Trajectory};

/// Which fixed-point engine a scenario uses by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Contraction,
    Relaxed,
}

/// Resolution defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discretization {
    pub m: usize,
    /// Integrator step.
    pub h: f64,
    /// Number of time intervals of the solution grid.
    pub intervals: usize,
}

/// Declared nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonlinearitySpec {
    pub law: PointLaw,
    pub evaluation: Evaluation,
    pub growth_a: f64,
    pub growth_b: f64,
    pub lipschitz: Option<f64>,
}

impl NonlinearitySpec {
    pub fn new(law: PointLaw) -> Self {
        let n = Nonlinearity::new(law, Evaluation::Pointwise);
        Self {
            law,
            evaluation: n.evaluation,
            growth_a: n.growth_a,
            growth_b: n.growth_b,
            lipschitz: n.lipschitz,
        }
    }

    pub fn build(&self) -> Nonlinearity {
        Nonlinearity {
            law: self.law,
            evaluation: self.evaluation,
            growth_a: self.growth_a,
            growth_b: self.growth_b,
            lipschitz: self.lipschitz,
            source: None,
        }
    }
}

/// A prescribed exact solution `u*(t, x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manufactured {
    pub exact: Expr,
    /// Accept `u*` outside the basis span and target its projection instead.
    pub allow_projection: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub domain: SpatialDomain,
    pub form: FormSpec,
    pub nonlinearity: NonlinearitySpec,
    pub g: NonlocalKernel,
    pub h: NonlocalKernel,
    pub engine: Engine,
    pub discretization: Discretization,
    pub manufactured: Option<Manufactured>,
}

/// `ü − ∂ₓ((1 + t/2)∂ₓu) + u = tanh(u)` on `(0, π)` with Neumann conditions.
pub fn undamped_neumann() -> Scenario {
    let horizon = 1.0;
    Scenario {
        name: "undamped_neumann".into(),
        domain: SpatialDomain::interval(std::f64::consts::PI),
        form: FormSpec {
            gradient: CoefficientField::parse(Symbol::A, "1 + t/2", 1.0, 1.5).expect("valid"),
            zeroth: CoefficientField::constant(Symbol::C, 1.0),
            damping: None,
            horizon,
        },
        nonlinearity: NonlinearitySpec::new(PointLaw::Tanh),
        g: NonlocalKernel::new(
            Expr::Const(1.0 / (2.0 * horizon)),
            AffineOffset::Field(Expr::parse("0.5*exp(cos(x))").expect("valid")),
        ),
        h: NonlocalKernel::new(
            Expr::Const(1.0 / (2.0 * horizon)),
            AffineOffset::Field(Expr::parse("0.1*cos(2*x)").expect("valid")),
        ),
        engine: Engine::Relaxed,
        discretization: Discretization {
            m: 16,
            h: 1e-3,
            intervals: 100,
        },
        manufactured: None,
    }
}

/// Damped population model `ü + 0.5u̇ − ∂ₓ((1 + 0.1 sin t)∂ₓu) + 0.2u = u/(1+u²)`.
pub fn population() -> Scenario {
    let horizon = 1.0;
    Scenario {
        name: "population".into(),
        domain: SpatialDomain::interval(std::f64::consts::PI),
        form: FormSpec {
            gradient: CoefficientField::parse(Symbol::D, "1 + 0.1*sin(t)", 0.9, 1.1).expect("valid"),
            zeroth: CoefficientField::constant(Symbol::Mu, 0.2),
            damping: Some(CoefficientField::constant(Symbol::Sigma, 0.5)),
            horizon,
        },
        nonlinearity: NonlinearitySpec::new(PointLaw::Logistic),
        g: NonlocalKernel::new(
            Expr::parse(&format!("exp(-t)/{horizon}")).expect("valid"),
            AffineOffset::Field(Expr::parse("0.3*exp(cos(x))").expect("valid")),
        ),
        h: NonlocalKernel::new(
            Expr::parse(&format!("exp(-t)/{horizon}")).expect("valid"),
            AffineOffset::Field(Expr::parse("0.2*cos(x)").expect("valid")),
        ),
        engine: Engine::Contraction,
        discretization: Discretization {
            m: 16,
            h: 1e-3,
            intervals: 100,
        },
        manufactured: None,
    }
}

/// Constant-coefficient damped skeleton `ü + 2u̇ − ∂ₓ²u + u = 0`, used for
/// critically damped manufactured checks.
pub fn damped_skeleton() -> Scenario {
    let horizon = 1.0;
    Scenario {
        name: "damped".into(),
        domain: SpatialDomain::interval(std::f64::consts::PI),
        form: FormSpec {
            gradient: CoefficientField::constant(Symbol::A, 1.0),
            zeroth: CoefficientField::constant(Symbol::C, 1.0),
            damping: Some(CoefficientField::constant(Symbol::Sigma, 2.0)),
            horizon,
        },
        nonlinearity: NonlinearitySpec::new(PointLaw::Zero),
        g: NonlocalKernel::new(Expr::Const(1.0 / (2.0 * horizon)), AffineOffset::Zero),
        h: NonlocalKernel::new(Expr::Const(1.0 / (2.0 * horizon)), AffineOffset::Zero),
        engine: Engine::Relaxed,
        discretization: Discretization {
            m: 8,
            h: 1e-3,
            intervals: 100,
        },
        manufactured: None,
    }
}

pub fn by_name(name: &str) -> Result<Scenario> {
    match name {
        "undamped_neumann" | "neumann" => Ok(undamped_neumann()),
        "population" => Ok(population()),
        "damped" => Ok(damped_skeleton()),
        other => Err(Error::Config(format!(
            "unknown scenario `{other}` (expected undamped_neumann, population or damped)"
        ))),
    }
}

/// Wrap a skeleton so that `u*` is its exact solution.
///
/// The right side becomes `f(t,u) + s(t)` with
/// `s = 𝒫ü* + B𝒫u̇* + A𝒫u* − f(t, 𝒫u*)`, and the kernel offsets are chosen at
/// solve time so that `g(𝒫u*) = 𝒫u*(0)` and `h(𝒫u*) = 𝒫u̇*(0)` hold for the
/// discrete quadrature.
pub fn manufactured(exact: Expr, skeleton: Scenario) -> Scenario {
    Scenario {
        name: format!("manufactured:{}", skeleton.name),
        manufactured: Some(Manufactured {
            exact,
            allow_projection: false,
        }),
        ..skeleton
    }
}

/// Everything produced by one solve.
#[derive(Debug, Clone)]
pub struct Solution {
    pub basis: Arc<SpectralBasis>,
    pub op: BlockOperator,
    pub fs: FundamentalSolution,
    pub problem: SemilinearProblem,
    pub trajectory: Trajectory,
    pub report: FixedPointReport,
    pub exact_error: Option<ExactError>,
}

/// Error against a manufactured solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExactError {
    /// `sup_t ‖u(t) − u*(t)‖_H`, with `u*` sampled at quadrature nodes.
    pub sup_h: f64,
    /// `sup_t ‖u(t) − 𝒫u*(t)‖` in coordinates.
    pub sup_projected: f64,
    /// Largest relative projection defect of `u*` found by the span check.
    pub projection_defect: f64,
}

/// Resolution and solver overrides for one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub m: usize,
    pub h: f64,
    pub intervals: usize,
    pub engine: Engine,
    pub assembly: Assembly,
    pub fixed_point: FixedPointConfig,
}

impl Scenario {
    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            m: self.discretization.m,
            h: self.discretization.h,
            intervals: self.discretization.intervals,
            engine: self.engine,
            assembly: Assembly::Chained,
            fixed_point: FixedPointConfig::default(),
        }
    }

    pub fn horizon(&self) -> f64 {
        self.form.horizon
    }

    pub fn basis(&self, m: usize) -> Result<SpectralBasis> {
        SpectralBasis::build(self.domain, m)
    }

    pub fn grid(&self, intervals: usize) -> Result<TimeGrid> {
        TimeGrid::uniform(self.horizon(), intervals)
    }

    pub fn certify(&self, m: usize, opts: &CertifyOptions) -> Result<FormCertificate> {
        certify(&self.form, &self.basis(m)?, opts)
    }

    pub fn operator(&self, basis: &SpectralBasis) -> Result<BlockOperator> {
        BlockOperator::from_form(&self.form, basis)
    }

    /// Largest relative projection defect of `u*` over sample times, and where it occurs.
    pub fn projection_defect(&self, basis: &SpectralBasis) -> Result<(f64, f64)> {
        let Some(man) = &self.manufactured else {
            return Ok((0.0, 0.0));
        };
        let mut worst = (0.0f64, 0.0);
        for k in 0..=10 {
            let t = self.horizon() * k as f64 / 10.0;
            let samples: Vec<f64> = basis.nodes().iter().map(|p| man.exact.eval(t, p[0], p[1])).collect();
            if samples.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("exact solution is not finite at t = {t}")));
            }
            let pu = basis.evaluate_nodes(&basis.project_samples(&samples)?);
            let diff: Vec<f64> = samples.iter().zip(&pu).map(|(a, b)| a - b).collect();
            let d = basis.sample_norm(&diff) / (1.0 + basis.sample_norm(&samples));
            if d > worst.0 {
                worst = (d, t);
            }
        }
        Ok(worst)
    }

    /// Assemble the semilinear problem on `grid`; for manufactured scenarios
    /// this also fixes the source term and kernel offsets.
    pub fn problem(&self, basis: Arc<SpectralBasis>, op: BlockOperator, grid: &TimeGrid) -> Result<SemilinearProblem> {
        let mut f = self.nonlinearity.build();
        let mut g = KernelOperator::assemble(&self.g, &basis, grid)?;
        let mut h = KernelOperator::assemble(&self.h, &basis, grid)?;
        if let Some(man) = &self.manufactured {
            let (defect, t) = self.projection_defect(&basis)?;
            if defect > 1e-8 && !man.allow_projection {
                return Err(Error::OutsideSpan { defect, t });
            }
            let exact = Arc::new(Projected::new(&man.exact, basis.clone()));
            let law = f.clone();
            let (ex, opc, b) = (exact.clone(), op.clone(), basis.clone());
            let source: VectorFn = Arc::new(move |t| {
                let (u, ud, udd) = ex.at(t);
                let mut s = udd + opc.stiffness_at(t).as_ref() * &u;
                if let Some(bm) = opc.damping_at(t) {
                    s += bm.as_ref() * ud;
                }
                s - law.apply(&b, t, &u)
            });
            f = f.with_source(source);
            let star: Vec<CoefVector> = grid.nodes().iter().map(|&t| exact.at(t).0).collect();
            let (u0, u1, _) = exact.at(0.0);
            g.set_offset(u0 - g.integral(&star)?)?;
            h.set_offset(u1 - h.integral(&star)?)?;
        }
        Ok(SemilinearProblem {
            op,
            basis,
            f,
            g,
            h,
            horizon: self.horizon(),
        })
    }

    /// Build everything and run the fixed-point engine.
    pub fn solve(&self, opts: &RunOptions) -> Result<Solution> {
        let basis = Arc::new(self.basis(opts.m)?);
        let op = self.operator(&basis)?;
        let grid = self.grid(opts.intervals)?;
        let fs = FundamentalSolution::build(&op, &grid, opts.h, opts.assembly)?;
        self.solve_with(basis, op, fs, opts)
    }

    /// Run the engine against an already tabulated fundamental solution.
    pub fn solve_with(
        &self,
        basis: Arc<SpectralBasis>,
        op: BlockOperator,
        fs: FundamentalSolution,
        opts: &RunOptions,
    ) -> Result<Solution> {
        let problem = self.problem(basis.clone(), op.clone(), fs.grid())?;
        let (trajectory, report) = match opts.engine {
            Engine::Contraction => contraction_solve(&problem, &fs, &opts.fixed_point)?,
            Engine::Relaxed => relaxed_solve(&problem, &fs, &opts.fixed_point)?,
        };
        let exact_error = match &self.manufactured {
            Some(man) => Some(exact_error(&man.exact, &basis, &trajectory, self.projection_defect(&basis)?.0)?),
            None => None,
        };
        Ok(Solution {
            basis,
            op,
            fs,
            problem,
            trajectory,
            report,
            exact_error,
        })
    }
}

fn exact_error(exact: &Expr, basis: &SpectralBasis, traj: &Trajectory, defect: f64) -> Result<ExactError> {
    let mut sup_h = 0.0f64;
    let mut sup_projected = 0.0f64;
    for (&t, u) in traj.times.iter().zip(&traj.u) {
        let samples: Vec<f64> = basis.nodes().iter().map(|p| exact.eval(t, p[0], p[1])).collect();
        let pu = basis.project_samples(&samples)?;
        sup_projected = sup_projected.max((u - pu).norm());
        let diff: Vec<f64> = basis.evaluate_nodes(u).iter().zip(&samples).map(|(a, b)| a - b).collect();
        sup_h = sup_h.max(basis.sample_norm(&diff));
    }
    Ok(ExactError {
        sup_h,
        sup_projected,
        projection_defect: defect,
    })
}

/// `𝒫u*`, `𝒫u̇*`, `𝒫ü*` from symbolic time derivatives.
struct Projected {
    u: Expr,
    ut: Expr,
    utt: Expr,
    basis: Arc<SpectralBasis>,
}

impl Projected {
    fn new(u: &Expr, basis: Arc<SpectralBasis>) -> Self {
        let ut = u.derivative(Var::T);
        let utt = ut.derivative(Var::T);
        Self {
            u: u.clone(),
            ut,
            utt,
            basis,
        }
    }

    fn project(&self, e: &Expr, t: f64) -> CoefVector {
        let samples: Vec<f64> = self.basis.nodes().iter().map(|p| e.eval(t, p[0], p[1])).collect();
        self.basis
            .project_samples(&samples)
            .unwrap_or_else(|_| DVector::from_element(self.basis.dim(), f64::NAN))
    }

    fn at(&self, t: f64) -> (CoefVector, CoefVector, CoefVector) {
        (self.project(&self.u, t), self.project(&self.ut, t), self.project(&self.utt, t))
    }
}
