//! Neumann-Laplacian eigenbases on intervals and rectangles.
//!
//! Mode `k` on an interval of length `L` is `Ψ_0 = 1/√L`, `Ψ_k = √(2/L) cos(kπx/L)`
//! with eigenvalue `(kπ/L)²`. Rectangle modes are tensor products sorted by
//! eigenvalue. Coordinates in this basis are orthonormal in `H = L²(Ω)`, and
//! the `V = H¹(Ω)` norm is the weighted sum `Σ (1 + λ_k) |u_k|²`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::gauss_legendre;

/// Coordinates of an element of `span{Ψ_0, …, Ψ_{m-1}}`.
pub type CoefVector = DVector<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainShape {
    Interval { length: f64 },
    Rectangle { lx: f64, ly: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialDomain {
    pub shape: DomainShape,
    /// Gauss points per dimension; `None` picks `2m + 16`.
    pub quadrature_order: Option<usize>,
}

impl SpatialDomain {
    pub fn interval(length: f64) -> Self {
        Self {
            shape: DomainShape::Interval { length },
            quadrature_order: None,
        }
    }

    pub fn rectangle(lx: f64, ly: f64) -> Self {
        Self {
            shape: DomainShape::Rectangle { lx, ly },
            quadrature_order: None,
        }
    }

    pub fn with_quadrature(mut self, order: usize) -> Self {
        self.quadrature_order = Some(order);
        self
    }

    pub fn measure(&self) -> f64 {
        match self.shape {
            DomainShape::Interval { length } => length,
            DomainShape::Rectangle { lx, ly } => lx * ly,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.shape {
            DomainShape::Interval { length } => length.is_finite() && length > 0.0,
            DomainShape::Rectangle { lx, ly } => {
                lx.is_finite() && ly.is_finite() && lx > 0.0 && ly > 0.0
            }
        };
        if !ok {
            return Err(Error::Config(format!(
                "domain dimensions must be finite and positive: {:?}",
                self.shape
            )));
        }
        if self.quadrature_order == Some(0) {
            return Err(Error::Config("quadrature order must be positive".into()));
        }
        Ok(())
    }
}

/// Orthonormal Neumann eigenbasis with its quadrature tables.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    domain: SpatialDomain,
    eigenvalues: Vec<f64>,
    /// `(k, l)` frequency indices; `l = 0` on intervals.
    modes: Vec<(usize, usize)>,
    nodes: Vec<[f64; 2]>,
    weights: Vec<f64>,
    /// mode × node values of Ψ_k
    values: DMatrix<f64>,
    /// mode × node values of ∂Ψ_k/∂x and ∂Ψ_k/∂y
    grad_x: DMatrix<f64>,
    grad_y: DMatrix<f64>,
}

impl SpectralBasis {
    pub fn build(domain: SpatialDomain, m: usize) -> Result<Self> {
        domain.validate()?;
        if m == 0 {
            return Err(Error::Config("mode count must be at least 1".into()));
        }
        let order = domain.quadrature_order.unwrap_or(2 * m + 16);
        match domain.shape {
            DomainShape::Interval { length } => {
                let modes: Vec<_> = (0..m).map(|k| (k, 0)).collect();
                let (xs, ws) = gauss_legendre(order, 0.0, length);
                let nodes = xs.iter().map(|&x| [x, 0.0]).collect();
                Ok(Self::tabulate(domain, modes, nodes, ws))
            }
            DomainShape::Rectangle { lx, ly } => {
                let modes = rectangle_modes(lx, ly, m);
                let (xs, wx) = gauss_legendre(order, 0.0, lx);
                let (ys, wy) = gauss_legendre(order, 0.0, ly);
                let mut nodes = Vec::with_capacity(order * order);
                let mut weights = Vec::with_capacity(order * order);
                for (x, wxi) in xs.iter().zip(&wx) {
                    for (y, wyj) in ys.iter().zip(&wy) {
                        nodes.push([*x, *y]);
                        weights.push(wxi * wyj);
                    }
                }
                Ok(Self::tabulate(domain, modes, nodes, weights))
            }
        }
    }

    fn tabulate(
        domain: SpatialDomain,
        modes: Vec<(usize, usize)>,
        nodes: Vec<[f64; 2]>,
        weights: Vec<f64>,
    ) -> Self {
        let m = modes.len();
        let nq = nodes.len();
        let mut values = DMatrix::zeros(m, nq);
        let mut grad_x = DMatrix::zeros(m, nq);
        let mut grad_y = DMatrix::zeros(m, nq);
        let mut eigenvalues = Vec::with_capacity(m);
        for (i, &(k, l)) in modes.iter().enumerate() {
            eigenvalues.push(mode_eigenvalue(&domain.shape, k, l));
            for (q, p) in nodes.iter().enumerate() {
                let (v, gx, gy) = mode_value(&domain.shape, k, l, p[0], p[1]);
                values[(i, q)] = v;
                grad_x[(i, q)] = gx;
                grad_y[(i, q)] = gy;
            }
        }
        Self {
            domain,
            eigenvalues,
            modes,
            nodes,
            weights,
            values,
            grad_x,
            grad_y,
        }
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn domain(&self) -> &SpatialDomain {
        &self.domain
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn modes(&self) -> &[(usize, usize)] {
        &self.modes
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// mode × node table of basis values.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn grad_x(&self) -> &DMatrix<f64> {
        &self.grad_x
    }

    pub fn grad_y(&self) -> &DMatrix<f64> {
        &self.grad_y
    }

    pub fn is_rectangle(&self) -> bool {
        matches!(self.domain.shape, DomainShape::Rectangle { .. })
    }

    /// Gram matrix `⟨Ψ_j, Ψ_k⟩` under the stored quadrature.
    pub fn gram(&self) -> DMatrix<f64> {
        weighted_product(&self.values, &self.weights, &self.values)
    }

    /// Quadrature projection of nodal samples: `c_k = Σ_q w_q f(x_q) Ψ_k(x_q)`.
    pub fn project_samples(&self, samples: &[f64]) -> Result<CoefVector> {
        if samples.len() != self.nodes.len() {
            return Err(Error::Dimension {
                expected: self.nodes.len(),
                got: samples.len(),
            });
        }
        if let Some(q) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite sample at quadrature node {q} ({:?})",
                self.nodes[q]
            )));
        }
        let weighted = DVector::from_iterator(
            samples.len(),
            samples.iter().zip(&self.weights).map(|(f, w)| f * w),
        );
        Ok(&self.values * weighted)
    }

    pub fn project<F: Fn(f64, f64) -> f64>(&self, f: F) -> Result<CoefVector> {
        let samples: Vec<f64> = self.nodes.iter().map(|p| f(p[0], p[1])).collect();
        self.project_samples(&samples)
    }

    /// Values of `Σ c_k Ψ_k` at the quadrature nodes.
    pub fn evaluate_nodes(&self, coeffs: &CoefVector) -> Vec<f64> {
        self.values.tr_mul(coeffs).iter().copied().collect()
    }

    /// Point evaluation of `Σ c_k Ψ_k`.
    pub fn evaluate_at(&self, coeffs: &CoefVector, x: f64, y: f64) -> f64 {
        self.modes
            .iter()
            .zip(coeffs.iter())
            .map(|(&(k, l), c)| c * mode_value(&self.domain.shape, k, l, x, y).0)
            .sum()
    }

    /// `(‖u‖_H, ‖u‖_V)` in coordinates.
    pub fn norms(&self, u: &CoefVector) -> (f64, f64) {
        debug_assert_eq!(u.len(), self.dim());
        let h2: f64 = u.iter().map(|c| c * c).sum();
        let v2: f64 = u
            .iter()
            .zip(&self.eigenvalues)
            .map(|(c, l)| (1.0 + l) * c * c)
            .sum();
        (h2.sqrt(), v2.sqrt())
    }

    /// Diagonal of the `V` inner product, `1 + λ_k`.
    pub fn v_weights(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|l| 1.0 + l).collect()
    }

    /// Discrete `L²(Ω)` norm of nodal samples.
    pub fn sample_norm(&self, samples: &[f64]) -> f64 {
        samples
            .iter()
            .zip(&self.weights)
            .map(|(f, w)| w * f * f)
            .sum::<f64>()
            .sqrt()
    }
}

/// `Σ_q a[i,q] w_q b[j,q]`.
pub(crate) fn weighted_product(a: &DMatrix<f64>, w: &[f64], b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut bw = b.clone();
    for (q, wq) in w.iter().enumerate() {
        bw.column_mut(q).scale_mut(*wq);
    }
    a * bw.transpose()
}

fn mode_eigenvalue(shape: &DomainShape, k: usize, l: usize) -> f64 {
    match *shape {
        DomainShape::Interval { length } => (k as f64 * PI / length).powi(2),
        DomainShape::Rectangle { lx, ly } => {
            (k as f64 * PI / lx).powi(2) + (l as f64 * PI / ly).powi(2)
        }
    }
}

fn cosine_mode(k: usize, length: f64, x: f64) -> (f64, f64) {
    if k == 0 {
        (1.0 / length.sqrt(), 0.0)
    } else {
        let c = (2.0 / length).sqrt();
        let w = k as f64 * PI / length;
        (c * (w * x).cos(), -c * w * (w * x).sin())
    }
}

fn mode_value(shape: &DomainShape, k: usize, l: usize, x: f64, y: f64) -> (f64, f64, f64) {
    match *shape {
        DomainShape::Interval { length } => {
            let (v, d) = cosine_mode(k, length, x);
            (v, d, 0.0)
        }
        DomainShape::Rectangle { lx, ly } => {
            let (vx, dx) = cosine_mode(k, lx, x);
            let (vy, dy) = cosine_mode(l, ly, y);
            (vx * vy, dx * vy, vx * dy)
        }
    }
}

fn rectangle_modes(lx: f64, ly: f64, m: usize) -> Vec<(usize, usize)> {
    // enough candidates that the m smallest eigenvalues are among them
    let mut cands = Vec::new();
    let n = m + 1;
    for k in 0..n {
        for l in 0..n {
            cands.push((k, l));
        }
    }
    let shape = DomainShape::Rectangle { lx, ly };
    cands.sort_by(|a, b| {
        mode_eigenvalue(&shape, a.0, a.1)
            .total_cmp(&mode_eigenvalue(&shape, b.0, b.1))
            .then(a.cmp(b))
    });
    cands.truncate(m);
    cands
}

/// Uniform time grid `0 = t_0 < … < t_N = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, intervals: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) || intervals == 0 {
            return Err(Error::Config(format!(
                "time grid needs T > 0 and at least one interval (T = {horizon}, N = {intervals})"
            )));
        }
        let dt = horizon / intervals as f64;
        let mut nodes: Vec<f64> = (0..=intervals).map(|i| i as f64 * dt).collect();
        nodes[intervals] = horizon;
        Ok(Self { nodes })
    }

    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 || nodes.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Config(
                "time grid must be strictly increasing with at least two nodes".into(),
            ));
        }
        let dt = (nodes[nodes.len() - 1] - nodes[0]) / (nodes.len() - 1) as f64;
        if nodes
            .windows(2)
            .any(|p| ((p[1] - p[0]) - dt).abs() > 1e-9 * dt)
        {
            return Err(Error::Config("time grid must be uniform".into()));
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn intervals(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn start(&self) -> f64 {
        self.nodes[0]
    }

    pub fn end(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }

    pub fn step(&self) -> f64 {
        (self.end() - self.start()) / self.intervals() as f64
    }

    /// Index of the node equal to `t` (to 1e-9 relative to the step), if any.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let dt = self.step();
        let k = ((t - self.start()) / dt).round();
        if k < 0.0 || k as usize >= self.nodes.len() {
            return None;
        }
        let k = k as usize;
        ((self.nodes[k] - t).abs() <= 1e-9 * dt).then_some(k)
    }
}

/// Discrete trajectory: Galerkin coordinates of `u` and `u̇` on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub u: Vec<CoefVector>,
    pub v: Vec<CoefVector>,
}

impl Trajectory {
    pub fn zeros(times: &[f64], dim: usize) -> Self {
        Self {
            times: times.to_vec(),
            u: vec![DVector::zeros(dim); times.len()],
            v: vec![DVector::zeros(dim); times.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.u.first().map_or(0, |u| u.len())
    }

    /// `sup_t ‖u(t)‖_H`.
    pub fn sup_norm(&self) -> f64 {
        self.u.iter().map(|u| u.norm()).fold(0.0, f64::max)
    }

    /// `sup_t ‖u(t) - w(t)‖_H`, padding the shorter coordinate vectors with zeros.
    pub fn sup_distance(&self, other: &Trajectory) -> f64 {
        self.u
            .iter()
            .zip(&other.u)
            .map(|(a, b)| padded_distance(a, b))
            .fold(0.0, f64::max)
    }

    /// Discrete `L²(0,T;H)` distance (composite Simpson in time).
    pub fn l2_distance(&self, other: &Trajectory) -> f64 {
        let n = self.len() - 1;
        let dt = (self.times[n] - self.times[0]) / n as f64;
        let w = crate::quad::simpson_weights(n, dt);
        self.u
            .iter()
            .zip(&other.u)
            .zip(&w)
            .map(|((a, b), w)| w * padded_distance(a, b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn l2_norm(&self) -> f64 {
        let zero = Trajectory::zeros(&self.times, self.dim());
        self.l2_distance(&zero)
    }
}

pub(crate) fn padded_distance(a: &CoefVector, b: &CoefVector) -> f64 {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let x = a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_interval() -> SpatialDomain {
        SpatialDomain::interval(PI)
    }

    #[test]
    fn interval_spectrum() {
        let b = SpectralBasis::build(unit_interval(), 3).unwrap();
        let ev = b.eigenvalues();
        assert!((ev[0]).abs() < 1e-15 && (ev[1] - 1.0).abs() < 1e-14 && (ev[2] - 4.0).abs() < 1e-13);
        let b1 = SpectralBasis::build(unit_interval(), 1).unwrap();
        assert_eq!(b1.eigenvalues(), &[0.0]);
    }

    #[test]
    fn rectangle_spectrum() {
        let b = SpectralBasis::build(SpatialDomain::rectangle(PI, PI), 4).unwrap();
        let ev = b.eigenvalues();
        let want = [0.0, 1.0, 1.0, 2.0];
        for (a, w) in ev.iter().zip(want) {
            assert!((a - w).abs() < 1e-13, "{ev:?}");
        }
        assert!(ev.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn rejects_invalid_domain() {
        assert!(SpectralBasis::build(SpatialDomain::interval(-1.0), 3).is_err());
        assert!(SpectralBasis::build(SpatialDomain::rectangle(1.0, 0.0), 3).is_err());
        assert!(SpectralBasis::build(unit_interval(), 0).is_err());
    }

    #[test]
    fn gram_is_identity() {
        for m in [1, 4, 8, 16, 32] {
            let b = SpectralBasis::build(unit_interval(), m).unwrap();
            let g = b.gram() - DMatrix::identity(m, m);
            assert!(g.amax() < 1e-12, "m = {m}: {}", g.amax());
        }
        for m in [4, 9, 16] {
            let b = SpectralBasis::build(SpatialDomain::rectangle(2.0, 1.0), m).unwrap();
            let g = b.gram() - DMatrix::identity(m, m);
            assert!(g.amax() < 1e-12, "rect m = {m}: {}", g.amax());
        }
    }

    #[test]
    fn projection_examples() {
        let b = SpectralBasis::build(unit_interval(), 4).unwrap();
        let z = b.project(|_, _| 0.0).unwrap();
        assert_eq!(z.amax(), 0.0);
        let c = b.project(|x, _| x.cos()).unwrap();
        assert!((c[1] - (PI / 2.0).sqrt()).abs() < 1e-12);
        for k in [0, 2, 3] {
            assert!(c[k].abs() < 1e-12);
        }
        let psi2 = b.project(|x, _| (2.0 / PI).sqrt() * (2.0 * x).cos()).unwrap();
        let mut e2 = DVector::zeros(4);
        e2[2] = 1.0;
        assert!((psi2 - e2).amax() < 1e-12);
    }

    #[test]
    fn projection_rejects_non_finite_samples() {
        let b = SpectralBasis::build(unit_interval(), 2).unwrap();
        assert!(b.project(|x, _| if x > 1.0 { f64::NAN } else { 0.0 }).is_err());
    }

    #[test]
    fn norm_examples() {
        let b = SpectralBasis::build(SpatialDomain::interval(PI / 3f64.sqrt()), 2).unwrap();
        // λ_1 = 3 on (0, π/√3)
        assert!((b.eigenvalues()[1] - 3.0).abs() < 1e-13);
        let e0 = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(b.norms(&e0), (1.0, 1.0));
        let (h, v) = b.norms(&DVector::from_vec(vec![0.0, 1.0]));
        assert!((h - 1.0).abs() < 1e-15 && (v - 2.0).abs() < 1e-13);
        assert_eq!(b.norms(&DVector::zeros(2)), (0.0, 0.0));
    }

    #[test]
    fn point_evaluation_matches_nodes() {
        let b = SpectralBasis::build(SpatialDomain::rectangle(1.0, 2.0), 6).unwrap();
        let c = DVector::from_fn(6, |i, _| 1.0 / (1.0 + i as f64));
        let vals = b.evaluate_nodes(&c);
        for (q, p) in b.nodes().iter().enumerate().step_by(7) {
            assert!((vals[q] - b.evaluate_at(&c, p[0], p[1])).abs() < 1e-13);
        }
    }

    #[test]
    fn time_grid_lookup() {
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        assert_eq!(g.index_of(0.3), Some(3));
        assert_eq!(g.index_of(0.35), None);
        assert!(TimeGrid::from_nodes(vec![0.0, 0.1, 0.3]).is_err());
        assert!(TimeGrid::uniform(0.0, 3).is_err());
    }

    proptest! {
        #[test]
        fn project_evaluate_round_trip(coeffs in proptest::collection::vec(-3.0f64..3.0, 12)) {
            let b = SpectralBasis::build(unit_interval(), 12).unwrap();
            let c = DVector::from_vec(coeffs);
            let back = b.project_samples(&b.evaluate_nodes(&c)).unwrap();
            prop_assert!((back - &c).amax() < 1e-10);
        }

        #[test]
        fn embedding_and_self_adjointness(
            u in proptest::collection::vec(-3.0f64..3.0, 10),
            v in proptest::collection::vec(-3.0f64..3.0, 10),
            m_sub in 1usize..10,
        ) {
            let b = SpectralBasis::build(unit_interval(), 10).unwrap();
            let (u, v) = (DVector::from_vec(u), DVector::from_vec(v));
            let (h, vn) = b.norms(&u);
            prop_assert!(h <= vn);
            let proj = |w: &CoefVector| {
                let mut p = w.clone();
                p.rows_mut(m_sub, 10 - m_sub).fill(0.0);
                p
            };
            prop_assert!((proj(&u).dot(&v) - u.dot(&proj(&v))).abs() < 1e-12);
        }
    }
}
