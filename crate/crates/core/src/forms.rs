//! Time-dependent forms `a(t;u,v) = ∫ a ∇u·∇v + ∫ c u v` and `b(t;u,v) = ∫ σ u v`,
//! their Galerkin matrices, the projected operators `A_m(t)`, and numerical
//! certificates for boundedness, coercivity and time regularity.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{CertificationFailure, Error, Result};
use crate::expr::{Expr, Var};
use crate::quad::simpson;
use crate::spectral::{weighted_product, DomainShape, SpectralBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Symbol {
    A,
    C,
    D,
    Mu,
    Sigma,
    Beta,
}

impl Symbol {
    pub fn name(self) -> &'static str {
        match self {
            Symbol::A => "a",
            Symbol::C => "c",
            Symbol::D => "d",
            Symbol::Mu => "mu",
            Symbol::Sigma => "sigma",
            Symbol::Beta => "beta",
        }
    }
}

/// A scalar coefficient `(t, x, y) ↦ value` with declared essential bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    pub symbol: Symbol,
    pub expr: Expr,
    pub lower: f64,
    pub upper: f64,
}

impl CoefficientField {
    pub fn new(symbol: Symbol, expr: Expr, lower: f64, upper: f64) -> Self {
        Self {
            symbol,
            expr,
            lower,
            upper,
        }
    }

    pub fn parse(symbol: Symbol, src: &str, lower: f64, upper: f64) -> Result<Self> {
        Ok(Self::new(symbol, Expr::parse(src)?, lower, upper))
    }

    pub fn constant(symbol: Symbol, value: f64) -> Self {
        Self::new(symbol, Expr::Const(value), value, value)
    }

    pub fn eval(&self, t: f64, x: f64, y: f64) -> f64 {
        self.expr.eval(t, x, y)
    }

    fn time_reversed(&self, horizon: f64) -> Self {
        Self {
            expr: self.expr.time_reversed(horizon),
            ..self.clone()
        }
    }
}

/// The pair of forms driving `ü + B(t)u̇ + A(t)u = f`.
#[derive(Debug, Clone, PartialEq)]
pub struct FormSpec {
    pub gradient: CoefficientField,
    pub zeroth: CoefficientField,
    pub damping: Option<CoefficientField>,
    pub horizon: f64,
}

/// Galerkin matrix of an operator at a fixed time.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix {
    pub entries: DMatrix<f64>,
    pub time: f64,
}

impl FormSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::Config(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        Ok(())
    }

    pub fn is_autonomous(&self) -> bool {
        !self.gradient.expr.depends_on(Var::T)
            && !self.zeroth.expr.depends_on(Var::T)
            && self
                .damping
                .as_ref()
                .is_none_or(|d| !d.expr.depends_on(Var::T))
    }

    /// Stiffness matrix `A(t)` with entries `a(t; Ψ_k, Ψ_j)`.
    pub fn stiffness(&self, basis: &SpectralBasis, t: f64) -> Result<OperatorMatrix> {
        let grad = nodal_weights(&self.gradient, basis, t)?;
        let zero = nodal_weights(&self.zeroth, basis, t)?;
        let mut a = weighted_product(basis.grad_x(), &grad, basis.grad_x());
        if basis.is_rectangle() {
            a += weighted_product(basis.grad_y(), &grad, basis.grad_y());
        }
        a += weighted_product(basis.values(), &zero, basis.values());
        Ok(OperatorMatrix {
            entries: a,
            time: t,
        })
    }

    /// Gradient part only, `∫ a ∇u·∇v`.
    pub fn gradient_part(&self, basis: &SpectralBasis, t: f64) -> Result<DMatrix<f64>> {
        let grad = nodal_weights(&self.gradient, basis, t)?;
        let mut a = weighted_product(basis.grad_x(), &grad, basis.grad_x());
        if basis.is_rectangle() {
            a += weighted_product(basis.grad_y(), &grad, basis.grad_y());
        }
        Ok(a)
    }

    /// Damping matrix `B(t)` with entries `∫ σ Ψ_k Ψ_j`, if the form is damped.
    pub fn damping_matrix(&self, basis: &SpectralBasis, t: f64) -> Result<Option<OperatorMatrix>> {
        let Some(field) = &self.damping else {
            return Ok(None);
        };
        let w = nodal_weights(field, basis, t)?;
        Ok(Some(OperatorMatrix {
            entries: weighted_product(basis.values(), &w, basis.values()),
            time: t,
        }))
    }

    /// The returned adjoint form `a_r*(t;u,v) = conj(a(T - t; v, u))`. For the real,
    /// symmetric forms assembled here this is time reversal of the coefficients.
    pub fn returned_adjoint(&self) -> FormSpec {
        FormSpec {
            gradient: self.gradient.time_reversed(self.horizon),
            zeroth: self.zeroth.time_reversed(self.horizon),
            damping: self
                .damping
                .as_ref()
                .map(|d| d.time_reversed(self.horizon)),
            horizon: self.horizon,
        }
    }
}

/// `assemble(form, basis, t)`: the stiffness matrix of `a(t;·,·)`.
pub fn assemble(form: &FormSpec, basis: &SpectralBasis, t: f64) -> Result<OperatorMatrix> {
    form.stiffness(basis, t)
}

fn nodal_weights(field: &CoefficientField, basis: &SpectralBasis, t: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(basis.nodes().len());
    for (p, w) in basis.nodes().iter().zip(basis.weights()) {
        let v = field.eval(t, p[0], p[1]);
        if !v.is_finite() {
            return Err(Error::Assembly {
                coefficient: field.symbol.name().into(),
                t,
            });
        }
        out.push(v * w);
    }
    Ok(out)
}

/// `A_m = P A P + α (I - P) diag(1 + λ) (I - P)` where `P` keeps the first `m_sub` modes.
pub fn build_am(
    stiffness: &OperatorMatrix,
    basis: &SpectralBasis,
    m_sub: usize,
    alpha: f64,
) -> Result<OperatorMatrix> {
    let m = basis.dim();
    if stiffness.entries.nrows() != m {
        return Err(Error::Dimension {
            expected: m,
            got: stiffness.entries.nrows(),
        });
    }
    if m_sub == 0 || m_sub > m {
        return Err(Error::Config(format!(
            "sub-dimension must lie in 1..={m}, got {m_sub}"
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    Ok(OperatorMatrix {
        entries: projected_operator(&stiffness.entries, basis.eigenvalues(), m_sub, alpha),
        time: stiffness.time,
    })
}

pub(crate) fn projected_operator(
    a: &DMatrix<f64>,
    eigenvalues: &[f64],
    m_sub: usize,
    alpha: f64,
) -> DMatrix<f64> {
    let m = a.nrows();
    let mut out = DMatrix::zeros(m, m);
    out.view_mut((0, 0), (m_sub, m_sub))
        .copy_from(&a.view((0, 0), (m_sub, m_sub)));
    for k in m_sub..m {
        out[(k, k)] = alpha * (1.0 + eigenvalues[k]);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CertifyOptions {
    pub sample_count: usize,
    /// `ω` in `Re a(t;u,u) + ω‖u‖²_H ≥ α‖u‖²_V`.
    pub shift: f64,
    /// Number of log-spaced `δ` values for the modulus of continuity.
    pub delta_count: usize,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            sample_count: 21,
            shift: 0.0,
            delta_count: 40,
        }
    }
}

/// Certified constants for a time-dependent form on a given basis.
///
/// The operator norm convention is `V → V'` in coordinates: for a matrix `M`,
/// `‖D^{-1/2} M D^{-1/2}‖₂` with `D = diag(1 + λ_k)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FormCertificate {
    pub bound_c: f64,
    pub coercivity_alpha: f64,
    pub shift: f64,
    /// Lower bound of the gradient part against `‖∇u‖²` on non-constant modes.
    pub gradient_alpha: Option<f64>,
    /// `(δ, ω(δ))`, nondecreasing in both entries.
    pub omega_samples: Vec<(f64, f64)>,
    /// `(∫ ω(δ)/δ^{3/2}, ∫ (ω(δ)/δ)²)` over `[δ_min, T]`.
    pub dini_integrals: (f64, f64),
    pub dini_divergence_suspected: bool,
    /// Sampling margin `ω(Δ/2)` folded into `bound_c` and `coercivity_alpha`.
    pub sampling_margin: f64,
    pub damping_accretivity: Option<f64>,
    pub square_root_property: &'static str,
    pub sample_times: Vec<f64>,
}

/// Check declared coefficient bounds, then certify `a` (and `b`, if present).
pub fn certify(
    form: &FormSpec,
    basis: &SpectralBasis,
    opts: &CertifyOptions,
) -> Result<FormCertificate> {
    form.validate()?;
    if opts.sample_count < 2 {
        return Err(Error::Config("certify needs at least two sample times".into()));
    }
    let times = sample_times(form.horizon, opts.sample_count);
    for field in [Some(&form.gradient), Some(&form.zeroth), form.damping.as_ref()]
        .into_iter()
        .flatten()
    {
        check_bounds(field, basis, &times)?;
    }
    let mut cert = certify_operator(
        |t| form.stiffness(basis, t).map(|m| m.entries),
        basis.eigenvalues(),
        form.horizon,
        opts,
    )?;
    cert.gradient_alpha = Some(gradient_coercivity(form, basis, &times)? - cert.sampling_margin);
    if form.damping.is_some() {
        let mut worst = f64::INFINITY;
        for &t in &times {
            if let Some(b) = form.damping_matrix(basis, t)? {
                worst = worst.min(min_eigenvalue(&symmetric_part(&b.entries)));
            }
        }
        cert.damping_accretivity = Some(worst);
    }
    Ok(cert)
}

/// Certify an arbitrary matrix family against the weighted `V` norm.
pub fn certify_operator<F>(
    stiffness: F,
    eigenvalues: &[f64],
    horizon: f64,
    opts: &CertifyOptions,
) -> Result<FormCertificate>
where
    F: Fn(f64) -> Result<DMatrix<f64>>,
{
    let scale: Vec<f64> = eigenvalues.iter().map(|l| 1.0 / (1.0 + l).sqrt()).collect();
    let scaled = |t: f64| -> Result<DMatrix<f64>> {
        let mut a = stiffness(t)?;
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Assembly {
                coefficient: "operator".into(),
                t,
            });
        }
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                a[(i, j)] *= scale[i] * scale[j];
            }
        }
        Ok(a)
    };
    let times = sample_times(horizon, opts.sample_count);

    let omega_samples = modulus_of_continuity(&scaled, horizon, opts)?;
    let dt = horizon / (opts.sample_count - 1) as f64;
    let margin = interpolate_omega(&omega_samples, dt / 2.0);

    let mut bound = 0.0f64;
    let mut alpha = f64::INFINITY;
    let mut witness = None;
    for &t in &times {
        let m = scaled(t)?;
        bound = bound.max(spectral_norm(&m));
        let mut sym = symmetric_part(&m);
        for (i, s) in scale.iter().enumerate() {
            sym[(i, i)] += opts.shift * s * s;
        }
        let eig = SymmetricEigen::new(sym);
        let (k, lo) = eig
            .eigenvalues
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty spectrum");
        if lo < alpha {
            alpha = lo;
            let y = eig.eigenvectors.column(k);
            let w: Vec<f64> = y.iter().zip(&scale).map(|(y, s)| y * s).collect();
            witness = Some((t, w));
        }
    }
    let coercivity_alpha = alpha - margin;
    if !(coercivity_alpha > 0.0) {
        let (t, w) = witness.expect("at least one sample time");
        return Err(Error::Certification(CertificationFailure::Coercivity {
            t,
            alpha: coercivity_alpha,
            witness: w,
        }));
    }
    let dini_integrals = dini_integrals(&omega_samples);
    let dini_divergence_suspected = dini_suspect(&omega_samples);
    Ok(FormCertificate {
        bound_c: bound + margin,
        coercivity_alpha,
        shift: opts.shift,
        gradient_alpha: None,
        omega_samples,
        dini_integrals,
        dini_divergence_suspected,
        sampling_margin: margin,
        damping_accretivity: None,
        square_root_property: "satisfied by construction (finite-dimensional, symmetric)",
        sample_times: times,
    })
}

fn sample_times(horizon: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| horizon * i as f64 / (n - 1) as f64)
        .collect()
}

fn check_bounds(field: &CoefficientField, basis: &SpectralBasis, times: &[f64]) -> Result<()> {
    let extra = boundary_points(basis);
    let tol = 1e-12 * (1.0 + field.lower.abs().max(field.upper.abs()));
    for &t in times {
        for p in basis.nodes().iter().chain(extra.iter()) {
            let v = field.eval(t, p[0], p[1]);
            if !v.is_finite() || v < field.lower - tol || v > field.upper + tol {
                return Err(Error::Certification(
                    CertificationFailure::CoefficientBound {
                        symbol: field.symbol.name().into(),
                        t,
                        x: p[0],
                        y: p[1],
                        value: v,
                        lower: field.lower,
                        upper: field.upper,
                    },
                ));
            }
        }
    }
    Ok(())
}

fn boundary_points(basis: &SpectralBasis) -> Vec<[f64; 2]> {
    match basis.domain().shape {
        DomainShape::Interval { length } => vec![[0.0, 0.0], [length, 0.0]],
        DomainShape::Rectangle { lx, ly } => {
            vec![[0.0, 0.0], [lx, 0.0], [0.0, ly], [lx, ly]]
        }
    }
}

fn gradient_coercivity(form: &FormSpec, basis: &SpectralBasis, times: &[f64]) -> Result<f64> {
    let idx: Vec<usize> = basis
        .eigenvalues()
        .iter()
        .enumerate()
        .filter(|(_, l)| **l > 1e-12)
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Ok(f64::INFINITY);
    }
    let mut worst = f64::INFINITY;
    for &t in times {
        let g = form.gradient_part(basis, t)?;
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |i, j| {
            let (a, b) = (idx[i], idx[j]);
            g[(a, b)] / (basis.eigenvalues()[a] * basis.eigenvalues()[b]).sqrt()
        });
        worst = worst.min(min_eigenvalue(&symmetric_part(&sub)));
    }
    Ok(worst)
}

fn modulus_of_continuity<F>(scaled: &F, horizon: f64, opts: &CertifyOptions) -> Result<Vec<(f64, f64)>>
where
    F: Fn(f64) -> Result<DMatrix<f64>>,
{
    let n_delta = opts.delta_count.max(2);
    let delta_min = horizon * 1e-4;
    let ratio = (horizon / delta_min).powf(1.0 / (n_delta - 1) as f64);
    let mut out = Vec::with_capacity(n_delta);
    let mut running = 0.0f64;
    for k in 0..n_delta {
        let delta = if k + 1 == n_delta {
            horizon
        } else {
            delta_min * ratio.powi(k as i32)
        };
        let n = opts.sample_count;
        let mut worst = 0.0f64;
        for i in 0..n {
            let t = (horizon - delta) * i as f64 / (n - 1) as f64;
            let d = scaled(t + delta)? - scaled(t)?;
            worst = worst.max(spectral_norm(&d));
        }
        running = running.max(worst);
        out.push((delta, running));
    }
    Ok(out)
}

fn interpolate_omega(samples: &[(f64, f64)], delta: f64) -> f64 {
    // smallest sampled δ at or above the query keeps the estimate an upper bound
    samples
        .iter()
        .find(|(d, _)| *d >= delta)
        .or(samples.last())
        .map_or(0.0, |(_, w)| *w)
}

fn dini_integrals(samples: &[(f64, f64)]) -> (f64, f64) {
    let mut first = 0.0;
    let mut second = 0.0;
    for p in samples.windows(2) {
        let ((d0, w0), (d1, w1)) = (p[0], p[1]);
        let h = d1 - d0;
        first += 0.5 * h * (w0 / d0.powf(1.5) + w1 / d1.powf(1.5));
        second += 0.5 * h * ((w0 / d0).powi(2) + (w1 / d1).powi(2));
    }
    (first, second)
}

/// Flags an integrand whose first decade above `δ_min` carries over a fifth of the total.
fn dini_suspect(samples: &[(f64, f64)]) -> bool {
    let (total1, total2) = dini_integrals(samples);
    let cutoff = samples[0].0 * 10.0;
    let head: Vec<_> = samples
        .iter()
        .copied()
        .filter(|(d, _)| *d <= cutoff * (1.0 + 1e-12))
        .collect();
    if head.len() < 2 {
        return false;
    }
    let (head1, head2) = dini_integrals(&head);
    (total1 > 0.0 && head1 > 0.2 * total1) || (total2 > 0.0 && head2 > 0.2 * total2)
}

pub(crate) fn symmetric_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(sym.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if m.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Lipschitz constants of `u ↦ ∫₀ᵀ κ(s,·) u(s,·) ds` from `L²(0,T;H)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelLipschitz {
    /// `‖κ‖_{L²(0,T;L^∞)}`: Lipschitz constant into `H`.
    pub into_h: f64,
    /// `‖∇κ‖_{L²(0,T;L^∞)}`.
    pub gradient: f64,
    /// Lipschitz constant into `V`, `√(into_h² + gradient²)`.
    pub into_v: f64,
}

pub fn kernel_lipschitz(kernel: &Expr, basis: &SpectralBasis, horizon: f64) -> Result<KernelLipschitz> {
    let points = sup_points(basis);
    let dx = kernel.derivative(Var::X);
    let dy = kernel.derivative(Var::Y);
    let rect = basis.is_rectangle();
    let mut bad = None;
    let sup_sq = |f: &dyn Fn(f64, f64, f64) -> f64, s: f64| -> f64 {
        points
            .iter()
            .map(|p| f(s, p[0], p[1]).abs())
            .fold(0.0, f64::max)
            .powi(2)
    };
    for s in [0.0, horizon / 2.0, horizon] {
        for p in &points {
            if !kernel.eval(s, p[0], p[1]).is_finite() {
                bad = Some((s, p[0], p[1]));
            }
        }
    }
    if let Some((s, x, y)) = bad {
        return Err(Error::Input(format!(
            "kernel is not finite at (s, x, y) = ({s}, {x}, {y})"
        )));
    }
    let value = |s: f64, x: f64, y: f64| kernel.eval(s, x, y);
    let grad = |s: f64, x: f64, y: f64| {
        let gx = dx.eval(s, x, y);
        let gy = if rect { dy.eval(s, x, y) } else { 0.0 };
        gx.hypot(gy)
    };
    let into_h = simpson(|s| sup_sq(&value, s), 0.0, horizon, 256).sqrt();
    let gradient = simpson(|s| sup_sq(&grad, s), 0.0, horizon, 256).sqrt();
    if !(into_h.is_finite() && gradient.is_finite()) {
        return Err(Error::Input("kernel norms are not finite".into()));
    }
    Ok(KernelLipschitz {
        into_h,
        gradient,
        into_v: into_h.hypot(gradient),
    })
}

fn sup_points(basis: &SpectralBasis) -> Vec<[f64; 2]> {
    let n = 64;
    let mut pts: Vec<[f64; 2]> = basis.nodes().to_vec();
    pts.extend(boundary_points(basis));
    match basis.domain().shape {
        DomainShape::Interval { length } => {
            pts.extend((0..=n).map(|i| [length * i as f64 / n as f64, 0.0]));
        }
        DomainShape::Rectangle { lx, ly } => {
            for i in 0..=n {
                for j in 0..=n {
                    pts.push([lx * i as f64 / n as f64, ly * j as f64 / n as f64]);
                }
            }
        }
    }
    pts
}

/// Rayleigh quotient `⟨A u, u⟩ / ‖u‖²_V` in coordinates.
pub fn rayleigh_v(a: &DMatrix<f64>, basis: &SpectralBasis, u: &DVector<f64>) -> f64 {
    let (_, v) = basis.norms(u);
    u.dot(&(a * u)) / (v * v)
}
