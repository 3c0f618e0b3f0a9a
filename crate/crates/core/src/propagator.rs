//! Evolution families of the block first-order systems
//! `U̇ + 𝒜(t)U = F` with `𝒜(t) = (0 −I; A(t) B(t))`, their tabulation on a time
//! grid as fundamental solutions, and numerical checks of the defining identities.

use std::borrow::Cow;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DMatrixView, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forms::{projected_operator, spectral_norm, FormSpec};
use crate::par_map;
use crate::quad::simpson_weights;
use crate::spectral::{SpectralBasis, TimeGrid};

pub type MatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Undamped,
    Damped,
}

#[derive(Clone)]
enum Source {
    Closure(MatrixFn),
    Table {
        origin: f64,
        half_step: f64,
        mats: Arc<Vec<DMatrix<f64>>>,
        fallback: MatrixFn,
    },
}

impl Source {
    fn eval(&self, t: f64) -> Cow<'_, DMatrix<f64>> {
        match self {
            Source::Closure(f) => Cow::Owned(f(t)),
            Source::Table {
                origin,
                half_step,
                mats,
                fallback,
            } => {
                let k = (t - origin) / half_step;
                let r = k.round();
                if (k - r).abs() < 1e-6 && r >= 0.0 && (r as usize) < mats.len() {
                    Cow::Borrowed(&mats[r as usize])
                } else {
                    Cow::Owned(fallback(t))
                }
            }
        }
    }

    fn closure(&self) -> MatrixFn {
        match self {
            Source::Closure(f) => f.clone(),
            Source::Table { fallback, .. } => fallback.clone(),
        }
    }

    fn tabulate(&self, origin: f64, end: f64, half_step: f64) -> Source {
        let f = self.closure();
        let n = ((end - origin) / half_step).round() as usize;
        let mats = (0..=n).map(|k| f(origin + k as f64 * half_step)).collect();
        Source::Table {
            origin,
            half_step,
            mats: Arc::new(mats),
            fallback: f,
        }
    }
}

/// Time-dependent block operator `𝒜(t)` of the first-order reduction.
///
/// Undamped systems use `B ≡ 0`, which gives `u̇ = v`, `v̇ = −A(t)u`.
#[derive(Clone)]
pub struct BlockOperator {
    kind: BlockKind,
    dim: usize,
    stiffness: Source,
    damping: Option<Source>,
}

impl fmt::Debug for BlockOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlockOperator")
            .field("kind", &self.kind)
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

impl BlockOperator {
    pub fn undamped(dim: usize, stiffness: MatrixFn) -> Self {
        Self {
            kind: BlockKind::Undamped,
            dim,
            stiffness: Source::Closure(stiffness),
            damping: None,
        }
    }

    pub fn damped(dim: usize, stiffness: MatrixFn, damping: MatrixFn) -> Self {
        Self {
            kind: BlockKind::Damped,
            dim,
            stiffness: Source::Closure(stiffness),
            damping: Some(Source::Closure(damping)),
        }
    }

    /// Autonomous operator from fixed matrices.
    pub fn constant(a: DMatrix<f64>, b: Option<DMatrix<f64>>) -> Self {
        let dim = a.nrows();
        let a = Arc::new(a);
        let stiffness: MatrixFn = Arc::new(move |_| (*a).clone());
        match b {
            None => Self::undamped(dim, stiffness),
            Some(b) => {
                let b = Arc::new(b);
                Self::damped(dim, stiffness, Arc::new(move |_| (*b).clone()))
            }
        }
    }

    /// Galerkin operator of a form. Assembly failures surface as non-finite
    /// entries and are reported by the integrator at the offending step.
    pub fn from_form(form: &FormSpec, basis: &SpectralBasis) -> Result<Self> {
        Self::from_form_projected(form, basis, basis.dim(), 1.0)
    }

    /// As [`BlockOperator::from_form`], with `A(t)` replaced by `A_m(t)` for the
    /// leading `m_sub` modes and complement weight `alpha`.
    pub fn from_form_projected(
        form: &FormSpec,
        basis: &SpectralBasis,
        m_sub: usize,
        alpha: f64,
    ) -> Result<Self> {
        form.validate()?;
        let dim = basis.dim();
        if m_sub == 0 || m_sub > dim {
            return Err(Error::Config(format!(
                "sub-dimension must lie in 1..={dim}, got {m_sub}"
            )));
        }
        // surface assembly errors eagerly at the endpoints
        form.stiffness(basis, 0.0)?;
        form.stiffness(basis, form.horizon)?;
        let f = Arc::new(form.clone());
        let b = Arc::new(basis.clone());
        let (fa, ba) = (f.clone(), b.clone());
        let stiffness: MatrixFn = Arc::new(move |t| match fa.stiffness(&ba, t) {
            Ok(a) if m_sub < dim => projected_operator(&a.entries, ba.eigenvalues(), m_sub, alpha),
            Ok(a) => a.entries,
            Err(_) => DMatrix::from_element(dim, dim, f64::NAN),
        });
        if form.damping.is_none() {
            return Ok(Self::undamped(dim, stiffness));
        }
        form.damping_matrix(basis, 0.0)?;
        let damping: MatrixFn = Arc::new(move |t| match f.damping_matrix(&b, t) {
            Ok(Some(m)) => m.entries,
            _ => DMatrix::from_element(dim, dim, f64::NAN),
        });
        Ok(Self::damped(dim, stiffness, damping))
    }

    pub fn kind(&self) -> BlockKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stiffness_at(&self, t: f64) -> Cow<'_, DMatrix<f64>> {
        self.stiffness.eval(t)
    }

    pub fn damping_at(&self, t: f64) -> Option<Cow<'_, DMatrix<f64>>> {
        self.damping.as_ref().map(|d| d.eval(t))
    }

    /// `𝒜(t)` as a dense `2m × 2m` matrix.
    pub fn block_matrix(&self, t: f64) -> DMatrix<f64> {
        let m = self.dim;
        let mut out = DMatrix::zeros(2 * m, 2 * m);
        for i in 0..m {
            out[(i, m + i)] = -1.0;
        }
        out.view_mut((m, 0), (m, m))
            .copy_from(&*self.stiffness_at(t));
        if let Some(b) = self.damping_at(t) {
            out.view_mut((m, m), (m, m)).copy_from(&*b);
        }
        out
    }

    /// Same operator with coefficient matrices cached on the lattice
    /// `origin + k·step/2`, the stage times of a fixed-step integration.
    pub fn tabulated(&self, origin: f64, end: f64, step: f64) -> Self {
        let half = step / 2.0;
        Self {
            kind: self.kind,
            dim: self.dim,
            stiffness: self.stiffness.tabulate(origin, end, half),
            damping: self.damping.as_ref().map(|d| d.tabulate(origin, end, half)),
        }
    }

    /// Operator with `B ≡ 0` kept as an explicit damped block (for consistency checks).
    pub fn as_damped(&self) -> Self {
        let m = self.dim;
        let zero: MatrixFn = Arc::new(move |_| DMatrix::zeros(m, m));
        Self {
            kind: BlockKind::Damped,
            dim: m,
            stiffness: self.stiffness.clone(),
            damping: Some(self.damping.clone().unwrap_or(Source::Closure(zero))),
        }
    }

    /// Time-reversed operator `A_r(t) = A(T − t)ᵀ`.
    pub fn returned_adjoint(&self, horizon: f64) -> Result<Self> {
        if self.kind == BlockKind::Damped {
            return Err(Error::Input(
                "the returned adjoint is defined for undamped operators only".into(),
            ));
        }
        let f = self.stiffness.closure();
        Ok(Self::undamped(
            self.dim,
            Arc::new(move |t| f(horizon - t).transpose()),
        ))
    }

    /// Reject steps outside the explicit integrator's stability region,
    /// judged from the spectrum at a few sample times.
    pub fn check_step(&self, h: f64, start: f64, end: f64) -> Result<()> {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::Config(format!("step size must be positive, got {h}")));
        }
        for k in 0..5 {
            let t = start + (end - start) * k as f64 / 4.0;
            let a = self.stiffness_at(t);
            let rho_a = spectral_norm(&a);
            let rho_b = self.damping_at(t).map_or(0.0, |b| spectral_norm(&b));
            let z = h * (rho_a.sqrt() + rho_b);
            if !z.is_finite() {
                return Err(Error::Propagation {
                    step: 0,
                    t,
                    context: ": operator has non-finite entries".into(),
                });
            }
            if z > 2.5 {
                return Err(Error::Config(format!(
                    "step {h} is unstable for this operator (h·(√ρ(A) + ρ(B)) = {z:.3} at t = {t})"
                )));
            }
        }
        Ok(())
    }

    fn rhs(
        &self,
        a: &DMatrix<f64>,
        b: Option<&DMatrix<f64>>,
        y: &DMatrix<f64>,
        forcing: Option<&DVector<f64>>,
    ) -> DMatrix<f64> {
        let m = self.dim;
        let top = y.rows(0, m);
        let bot = y.rows(m, m);
        let mut out = DMatrix::zeros(2 * m, y.ncols());
        out.rows_mut(0, m).copy_from(&bot);
        let mut acc = -(a * top);
        if let Some(b) = b {
            acc -= b * bot;
        }
        out.rows_mut(m, m).copy_from(&acc);
        if let Some(f) = forcing {
            let mut c = out.column_mut(0);
            c += f;
        }
        out
    }
}

fn step_count(span: f64, h: f64) -> usize {
    if span == 0.0 {
        0
    } else {
        ((span.abs() / h) - 1e-9).ceil().max(1.0) as usize
    }
}

/// Classical fourth-order integration of `Ẏ = −𝒜(t)Y + F(t)` from `s` to `t`
/// (either direction). `forcing`, if given, is added to the first column.
pub(crate) fn integrate(
    op: &BlockOperator,
    s: f64,
    t: f64,
    y0: DMatrix<f64>,
    h: f64,
    forcing: Option<&(dyn Fn(f64) -> DVector<f64> + Sync)>,
) -> Result<DMatrix<f64>> {
    let n = step_count(t - s, h);
    let mut y = y0;
    if n == 0 {
        return Ok(y);
    }
    let dt = (t - s) / n as f64;
    for k in 0..n {
        let t0 = s + k as f64 * dt;
        let tm = t0 + dt / 2.0;
        let t1 = if k + 1 == n { t } else { t0 + dt };
        let (a0, am, a1) = (op.stiffness_at(t0), op.stiffness_at(tm), op.stiffness_at(t1));
        let (b0, bm, b1) = (op.damping_at(t0), op.damping_at(tm), op.damping_at(t1));
        let (f0, fm, f1) = match forcing {
            Some(f) => (Some(f(t0)), Some(f(tm)), Some(f(t1))),
            None => (None, None, None),
        };
        let k1 = op.rhs(&a0, b0.as_deref(), &y, f0.as_ref());
        let k2 = op.rhs(&am, bm.as_deref(), &(&y + &k1 * (dt / 2.0)), fm.as_ref());
        let k3 = op.rhs(&am, bm.as_deref(), &(&y + &k2 * (dt / 2.0)), fm.as_ref());
        let k4 = op.rhs(&a1, b1.as_deref(), &(&y + &k3 * dt), f1.as_ref());
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Propagation {
                step: k,
                t: t1,
                context: String::new(),
            });
        }
    }
    Ok(y)
}

/// Propagate the state `U0 = (u, u̇)` from `s` to `t ≥ s` with step `h`;
/// `forcing` is the `2m`-vector `F(t)`.
pub fn propagate(
    op: &BlockOperator,
    s: f64,
    t: f64,
    u0: &DVector<f64>,
    forcing: Option<&(dyn Fn(f64) -> DVector<f64> + Sync)>,
    h: f64,
) -> Result<DVector<f64>> {
    if t < s {
        return Err(Error::Input(format!("propagation needs s <= t (s = {s}, t = {t})")));
    }
    if u0.len() != 2 * op.dim {
        return Err(Error::Dimension {
            expected: 2 * op.dim,
            got: u0.len(),
        });
    }
    op.check_step(h, s, t)?;
    let y = integrate(op, s, t, DMatrix::from_column_slice(u0.len(), 1, u0.as_slice()), h, forcing)?;
    Ok(y.column(0).into_owned())
}

/// How the table entries `E(t_i, t_j)` are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Assembly {
    /// Integrate from every start node to every later node.
    Direct,
    /// Multiply one-interval propagators, `E(t_i, t_j) = E(t_i, t_{i−1}) E(t_{i−1}, t_j)`.
    Chained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    V1,
    V2,
    V3,
    V4,
}

/// Tabulated evolution family on a time grid, stored for pairs `t_j ≤ t_i`.
///
/// Each entry is the full `2m × 2m` matrix `E(t_i, t_j)`; undamped systems read
/// its blocks as `(C S; ∂ₜC ∂ₜS)`, damped ones as `(v₁ v₂; v₃ v₄)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalSolution {
    kind: BlockKind,
    dim: usize,
    grid: TimeGrid,
    step: f64,
    blocks: Vec<DMatrix<f64>>,
}

fn packed(i: usize, j: usize) -> usize {
    debug_assert!(j <= i);
    i * (i + 1) / 2 + j
}

impl FundamentalSolution {
    pub fn build(op: &BlockOperator, grid: &TimeGrid, h: f64, assembly: Assembly) -> Result<Self> {
        let n = grid.len();
        if n < 2 {
            return Err(Error::Config("fundamental solution needs at least two grid nodes".into()));
        }
        op.check_step(h, grid.start(), grid.end())?;
        let dt = grid.step();
        let step = dt / step_count(dt, h) as f64;
        let op = op.tabulated(grid.start(), grid.end(), step);
        let m2 = 2 * op.dim;
        let t = grid.nodes();
        let eye = DMatrix::<f64>::identity(m2, m2);
        let columns: Vec<Result<Vec<DMatrix<f64>>>> = match assembly {
            Assembly::Direct => par_map(n, |j| {
                let mut out = Vec::with_capacity(n - j);
                let mut y = eye.clone();
                out.push(y.clone());
                for i in j + 1..n {
                    y = integrate(&op, t[i - 1], t[i], y, step, None).map_err(|e| locate(e, i, j))?;
                    out.push(y.clone());
                }
                Ok(out)
            }),
            Assembly::Chained => {
                let one: Vec<Result<DMatrix<f64>>> = par_map(n - 1, |i| {
                    integrate(&op, t[i], t[i + 1], eye.clone(), step, None)
                        .map_err(|e| locate(e, i + 1, i))
                });
                let one: Vec<DMatrix<f64>> = one.into_iter().collect::<Result<_>>()?;
                par_map(n, |j| {
                    let mut out = Vec::with_capacity(n - j);
                    let mut y = eye.clone();
                    out.push(y.clone());
                    for p in &one[j..] {
                        y = p * &y;
                        out.push(y.clone());
                    }
                    Ok(out)
                })
            }
        };
        let columns: Vec<Vec<DMatrix<f64>>> = columns.into_iter().collect::<Result<_>>()?;
        let mut blocks = vec![DMatrix::zeros(0, 0); n * (n + 1) / 2];
        for (j, col) in columns.into_iter().enumerate() {
            for (k, e) in col.into_iter().enumerate() {
                blocks[packed(j + k, j)] = e;
            }
        }
        Ok(Self {
            kind: op.kind,
            dim: op.dim,
            grid: grid.clone(),
            step,
            blocks,
        })
    }

    pub fn kind(&self) -> BlockKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Effective integrator step used for the table.
    pub fn step(&self) -> f64 {
        self.step
    }

    /// `E(t_i, t_j)` for `j ≤ i`.
    pub fn e(&self, i: usize, j: usize) -> &DMatrix<f64> {
        assert!(j <= i, "fundamental solution stores only pairs s <= t");
        &self.blocks[packed(i, j)]
    }

    pub fn block(&self, i: usize, j: usize, b: Block) -> DMatrixView<'_, f64> {
        let m = self.dim;
        let (r, c) = match b {
            Block::V1 => (0, 0),
            Block::V2 => (0, m),
            Block::V3 => (m, 0),
            Block::V4 => (m, m),
        };
        self.e(i, j).view((r, c), (m, m))
    }

    /// `C(t_i, t_j)` (undamped) or `v₁`.
    pub fn c(&self, i: usize, j: usize) -> DMatrixView<'_, f64> {
        self.block(i, j, Block::V1)
    }

    /// `S(t_i, t_j)` (undamped) or `v₂`.
    pub fn s(&self, i: usize, j: usize) -> DMatrixView<'_, f64> {
        self.block(i, j, Block::V2)
    }

    pub fn dt_c(&self, i: usize, j: usize) -> DMatrixView<'_, f64> {
        self.block(i, j, Block::V3)
    }

    pub fn dt_s(&self, i: usize, j: usize) -> DMatrixView<'_, f64> {
        self.block(i, j, Block::V4)
    }

    /// Grid indices of `(t, s)`, if both are nodes and `s ≤ t`.
    pub fn index_pair(&self, t: f64, s: f64) -> Option<(usize, usize)> {
        let i = self.grid.index_of(t)?;
        let j = self.grid.index_of(s)?;
        (j <= i).then_some((i, j))
    }

    /// Norm bounds used by the fixed-point estimates.
    pub fn constants(&self) -> PropagatorConstants {
        let n = self.grid.len();
        let dt = self.grid.step();
        let norms: Vec<Vec<(f64, f64)>> = par_map(n, |i| {
            (0..=i)
                .map(|j| {
                    (
                        spectral_norm(&self.c(i, j).into_owned()),
                        spectral_norm(&self.s(i, j).into_owned()),
                    )
                })
                .collect()
        });
        let m1 = (0..n).map(|i| norms[i][0].0).fold(0.0, f64::max);
        let m2 = (0..n).map(|i| norms[i][0].1).fold(0.0, f64::max);
        let m1_sup = norms.iter().flatten().map(|p| p.0).fold(0.0, f64::max);
        let m2_sup = norms.iter().flatten().map(|p| p.1).fold(0.0, f64::max);
        let v2_norms: Vec<Vec<f64>> = norms.iter().map(|r| r.iter().map(|p| p.1).collect()).collect();
        let mut c = PropagatorConstants {
            m1,
            m2,
            m1_sup,
            m2_sup,
            m2_integral: 0.0,
            dt,
            v2_norms,
        };
        c.m2_integral = c.window_integral(n - 1);
        c
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[match self.kind {
            BlockKind::Undamped => 0u8,
            BlockKind::Damped => 1u8,
        }])?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&(self.grid.len() as u64).to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        for t in self.grid.nodes() {
            w.write_all(&t.to_le_bytes())?;
        }
        let n = self.grid.len();
        let blocks = [Block::V1, Block::V2, Block::V3, Block::V4];
        for i in 0..n {
            for j in 0..=i {
                for b in blocks {
                    let v = self.block(i, j, b);
                    for r in 0..self.dim {
                        for c in 0..self.dim {
                            w.write_all(&v[(r, c)].to_le_bytes())?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Input("not a fundamental-solution dump".into()));
        }
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind)?;
        let kind = match kind[0] {
            0 => BlockKind::Undamped,
            1 => BlockKind::Damped,
            k => return Err(Error::Input(format!("unknown block kind {k}"))),
        };
        let dim = read_u64(&mut r)? as usize;
        let n = read_u64(&mut r)? as usize;
        if dim == 0 || dim > 4096 || n < 2 || n > 1 << 20 {
            return Err(Error::Input(format!("implausible dump header (m = {dim}, nodes = {n})")));
        }
        let step = read_f64(&mut r)?;
        let nodes = (0..n).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let grid = TimeGrid::from_nodes(nodes)?;
        let m = dim;
        let mut blocks = Vec::with_capacity(n * (n + 1) / 2);
        for _ in 0..n * (n + 1) / 2 {
            let mut e = DMatrix::zeros(2 * m, 2 * m);
            for (r0, c0) in [(0, 0), (0, m), (m, 0), (m, m)] {
                for i in 0..m {
                    for j in 0..m {
                        e[(r0 + i, c0 + j)] = read_f64(&mut r)?;
                    }
                }
            }
            blocks.push(e);
        }
        Ok(Self {
            kind,
            dim,
            grid,
            step,
            blocks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

const MAGIC: &[u8; 8] = b"NLWFS\0\0\x01";

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn locate(e: Error, i: usize, j: usize) -> Error {
    match e {
        Error::Propagation { step, t, .. } => Error::Propagation {
            step,
            t,
            context: format!(" while tabulating E(t_{i}, t_{j})"),
        },
        other => other,
    }
}

/// Operator-norm bounds of a tabulated family, in `ℒ(H)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropagatorConstants {
    /// `sup_t ‖v₁(t,0)‖`.
    pub m1: f64,
    /// `sup_t ‖v₂(t,0)‖`.
    pub m2: f64,
    /// `sup_{s≤t} ‖v₁(t,s)‖`.
    pub m1_sup: f64,
    /// `sup_{s≤t} ‖v₂(t,s)‖`.
    pub m2_sup: f64,
    /// `sup_t ∫₀ᵗ ‖v₂(t,s)‖ ds`.
    pub m2_integral: f64,
    pub dt: f64,
    #[serde(skip)]
    v2_norms: Vec<Vec<f64>>,
}

impl PropagatorConstants {
    /// `sup_i ∫_{t_i − k·dt}^{t_i} ‖v₂(t_i, s)‖ ds` over windows of `k` intervals.
    pub fn window_integral(&self, k: usize) -> f64 {
        let mut worst = 0.0f64;
        for (i, row) in self.v2_norms.iter().enumerate() {
            let len = k.min(i);
            if len == 0 {
                continue;
            }
            let w = simpson_weights(len, self.dt);
            let v: f64 = w.iter().zip(&row[i - len..=i]).map(|(w, n)| w * n).sum();
            worst = worst.max(v);
        }
        worst
    }
}

/// Options for the finite-difference axiom checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxiomOptions {
    /// Base difference step; Richardson extrapolation combines `δ` and `δ/2`.
    pub delta: f64,
    /// Integrator substeps per `δ/2` for the short local propagations.
    pub substeps: usize,
}

impl Default for AxiomOptions {
    fn default() -> Self {
        Self {
            delta: 5e-3,
            substeps: 8,
        }
    }
}

/// Maximum defects of the fundamental-solution identities over the grid.
///
/// Derivative defects are relative: `‖lhs − rhs‖_F / (1 + ‖rhs‖_F)`. Identities
/// without a damped analogue are `None` for damped families.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxiomReport {
    pub kind: BlockKind,
    /// `S(t,t) = 0`, `C(t,t) = I`, `∂ₜS(t,t) = I`, `∂ₜC(t,t) = 0` (damped: `E(t,t) = I`).
    pub boundary: f64,
    /// `∂ₛS(t,s)|_{s=t} = −I`.
    pub boundary_s_derivative: f64,
    /// `∂²ₜS = −A(t)S` (damped: `∂²ₜv₁,₂ + B ∂ₜv₁,₂ + A v₁,₂ = 0`).
    pub s2a: f64,
    /// `∂²ₛS = −S A(s)` (damped: `∂ₛE = E 𝒜(s)`).
    pub s2b: f64,
    pub s2c: Option<f64>,
    pub s3a: Option<f64>,
    pub s3b: Option<f64>,
    /// `C(t,s)S(s,r) + S(t,s)∂ₛS(s,r) = S(t,r)` (damped: the `v₂` block of the composition).
    pub s4: f64,
    /// `‖E(t,r) − E(t,s)E(s,r)‖_F` over all grid triples.
    pub composition: f64,
    /// Lower blocks against centered differences of the upper blocks on the grid.
    pub block_consistency: f64,
    /// Empirical `(S0)` constant `M₁`.
    pub lipschitz_m1: f64,
    /// Empirical `(C0)` constant `C₁`.
    pub lipschitz_c1: f64,
    pub sup_s: f64,
    pub sup_dt_s: f64,
    pub sup_c: f64,
    pub fd_delta: f64,
}

impl AxiomReport {
    /// Largest derivative-identity defect.
    pub fn max_derivative_defect(&self) -> f64 {
        [Some(self.s2a), Some(self.s2b), self.s2c, self.s3a, self.s3b, Some(self.boundary_s_derivative)]
            .into_iter()
            .flatten()
            .fold(0.0, f64::max)
    }
}

fn rel(defect: &DMatrix<f64>, rhs: &DMatrix<f64>) -> f64 {
    defect.norm() / (1.0 + rhs.norm())
}

struct Local {
    /// `E(t_i ± δ, t_i)` and `E(t_i ± δ/2, t_i)`, ordered `[+δ, −δ, +δ/2, −δ/2]`.
    forward: Vec<[DMatrix<f64>; 4]>,
    /// `E(t_i, t_i ± δ)` etc., same ordering.
    backward: Vec<[DMatrix<f64>; 4]>,
    /// Nodes where `t_i ± δ` stays inside the grid span.
    interior: Vec<bool>,
}

fn local_propagators(fs: &FundamentalSolution, op: &BlockOperator, opts: &AxiomOptions) -> Result<Local> {
    let t = fs.grid.nodes();
    let (lo, hi) = (fs.grid.start(), fs.grid.end());
    let d = opts.delta;
    let m2 = 2 * fs.dim;
    let h = d / 2.0 / opts.substeps as f64;
    let eye = DMatrix::<f64>::identity(m2, m2);
    let offsets = [d, -d, d / 2.0, -d / 2.0];
    let interior: Vec<bool> = t.iter().map(|&ti| ti - d >= lo - 1e-12 && ti + d <= hi + 1e-12).collect();
    let pairs: Vec<Result<([DMatrix<f64>; 4], [DMatrix<f64>; 4])>> = par_map(t.len(), |i| {
        if !interior[i] {
            let z = || DMatrix::zeros(0, 0);
            return Ok(([z(), z(), z(), z()], [z(), z(), z(), z()]));
        }
        let f = |o: f64| integrate(op, t[i], t[i] + o, eye.clone(), h, None);
        let b = |o: f64| integrate(op, t[i] + o, t[i], eye.clone(), h, None);
        Ok((
            [f(offsets[0])?, f(offsets[1])?, f(offsets[2])?, f(offsets[3])?],
            [b(offsets[0])?, b(offsets[1])?, b(offsets[2])?, b(offsets[3])?],
        ))
    });
    let mut forward = Vec::with_capacity(t.len());
    let mut backward = Vec::with_capacity(t.len());
    for p in pairs {
        let (f, b) = p?;
        forward.push(f);
        backward.push(b);
    }
    Ok(Local {
        forward,
        backward,
        interior,
    })
}

/// Richardson-extrapolated second difference from samples at `±δ`, `±δ/2`.
fn second_diff(c: &DMatrix<f64>, p: &DMatrix<f64>, m: &DMatrix<f64>, ph: &DMatrix<f64>, mh: &DMatrix<f64>, d: f64) -> DMatrix<f64> {
    let full = (p - c * 2.0 + m) / (d * d);
    let half = (ph - c * 2.0 + mh) / (d * d / 4.0);
    (half * 4.0 - full) / 3.0
}

fn first_diff(p: &DMatrix<f64>, m: &DMatrix<f64>, ph: &DMatrix<f64>, mh: &DMatrix<f64>, d: f64) -> DMatrix<f64> {
    let full = (p - m) / (2.0 * d);
    let half = (ph - mh) / d;
    (half * 4.0 - full) / 3.0
}

/// Check the fundamental-solution identities for `fs`, which must have been
/// built from `op`.
pub fn check_axioms(fs: &FundamentalSolution, op: &BlockOperator, opts: &AxiomOptions) -> Result<AxiomReport> {
    let n = fs.grid.len();
    if n < 4 {
        return Err(Error::Config("axiom checks need a grid with at least four nodes".into()));
    }
    if op.dim != fs.dim || op.kind != fs.kind {
        return Err(Error::Dimension {
            expected: fs.dim,
            got: op.dim,
        });
    }
    let m = fs.dim;
    let t = fs.grid.nodes();
    let d = opts.delta;
    let local = local_propagators(fs, op, opts)?;
    let damped = fs.kind == BlockKind::Damped;
    let eye = DMatrix::<f64>::identity(m, m);
    let top = |e: &DMatrix<f64>| e.rows(0, m).into_owned();
    let sub = |e: &DMatrix<f64>, r: usize, c: usize| e.view((r, c), (m, m)).into_owned();

    let mut boundary = 0.0f64;
    for i in 0..n {
        let e = fs.e(i, i);
        boundary = boundary.max((e - DMatrix::<f64>::identity(2 * m, 2 * m)).amax());
    }

    // per-row maxima: [bnd_s, s2a, s2b, s2c, s3a, s3b]
    let rows: Vec<[f64; 6]> = par_map(n, |i| {
        let mut acc = [0.0f64; 6];
        let a_t = op.stiffness_at(t[i]).into_owned();
        let b_t = op.damping_at(t[i]).map(|b| b.into_owned());
        for j in 0..=i {
            let e = fs.e(i, j);
            if local.interior[i] {
                let f = &local.forward[i];
                let shifted: Vec<DMatrix<f64>> = f.iter().map(|l| l * e).collect();
                if damped {
                    let u = second_diff(&top(e), &top(&shifted[0]), &top(&shifted[1]), &top(&shifted[2]), &top(&shifted[3]), d);
                    let rhs = -(&a_t * top(e) + b_t.as_ref().unwrap() * e.rows(m, m));
                    acc[1] = acc[1].max(rel(&(u - &rhs), &rhs));
                } else {
                    let pick = |x: &DMatrix<f64>, c: usize| sub(x, 0, c);
                    // S block: column offset m; C block: column offset 0
                    let s2 = second_diff(&pick(e, m), &pick(&shifted[0], m), &pick(&shifted[1], m), &pick(&shifted[2], m), &pick(&shifted[3], m), d);
                    let rhs = -(&a_t * pick(e, m));
                    acc[1] = acc[1].max(rel(&(s2 - &rhs), &rhs));
                    let c2 = second_diff(&pick(e, 0), &pick(&shifted[0], 0), &pick(&shifted[1], 0), &pick(&shifted[2], 0), &pick(&shifted[3], 0), d);
                    let rhs = -(&a_t * pick(e, 0));
                    acc[4] = acc[4].max(rel(&(c2 - &rhs), &rhs));
                }
            }
            if local.interior[j] {
                let a_s = op.stiffness_at(t[j]).into_owned();
                let b = &local.backward[j];
                let shifted: Vec<DMatrix<f64>> = b.iter().map(|l| e * l).collect();
                if damped {
                    let ds = first_diff(&shifted[0], &shifted[1], &shifted[2], &shifted[3], d);
                    let rhs = e * op.block_matrix(t[j]);
                    acc[2] = acc[2].max(rel(&(ds - &rhs), &rhs));
                } else {
                    let s = |x: &DMatrix<f64>| sub(x, 0, m);
                    let s2 = second_diff(&s(e), &s(&shifted[0]), &s(&shifted[1]), &s(&shifted[2]), &s(&shifted[3]), d);
                    let rhs = -(s(e) * &a_s);
                    acc[2] = acc[2].max(rel(&(s2 - &rhs), &rhs));
                    let w = |x: &DMatrix<f64>| sub(x, m, m);
                    let w2 = second_diff(&w(e), &w(&shifted[0]), &w(&shifted[1]), &w(&shifted[2]), &w(&shifted[3]), d);
                    let rhs = -(w(e) * &a_s);
                    acc[5] = acc[5].max(rel(&(w2 - &rhs), &rhs));
                    if i == j {
                        let ds = first_diff(&s(&shifted[0]), &s(&shifted[1]), &s(&shifted[2]), &s(&shifted[3]), d);
                        acc[0] = acc[0].max(rel(&(&ds + &eye), &eye));
                        let dw = first_diff(&w(&shifted[0]), &w(&shifted[1]), &w(&shifted[2]), &w(&shifted[3]), d);
                        acc[3] = acc[3].max(dw.norm());
                    }
                }
            }
        }
        acc
    });
    let col = |k: usize| rows.iter().map(|r| r[k]).fold(0.0, f64::max);

    // composition over all triples r ≤ s ≤ t
    let comp: Vec<(f64, f64)> = par_map(n, |i| {
        let mut worst = (0.0f64, 0.0f64);
        for s in 0..=i {
            let ets = fs.e(i, s);
            for r in 0..=s {
                let prod = ets * fs.e(s, r);
                let diff = fs.e(i, r) - &prod;
                worst.0 = worst.0.max(diff.view((0, m), (m, m)).norm());
                worst.1 = worst.1.max(diff.norm());
            }
        }
        worst
    });
    let s4 = comp.iter().map(|c| c.0).fold(0.0, f64::max);
    let composition = comp.iter().map(|c| c.1).fold(0.0, f64::max);

    // lower blocks vs centered grid differences of the upper blocks
    let dt = fs.grid.step();
    let mut block_consistency = 0.0f64;
    for j in 0..n {
        for i in j + 1..n.saturating_sub(1) {
            let du = (top(fs.e(i + 1, j)) - top(fs.e(i - 1, j))) / (2.0 * dt);
            let lower = fs.e(i, j).rows(m, m).into_owned();
            block_consistency = block_consistency.max(rel(&(du - &lower), &lower));
        }
    }

    let mut lip_m1 = 0.0f64;
    let mut lip_c1 = 0.0f64;
    let mut sup_s = 0.0f64;
    let mut sup_dt_s = 0.0f64;
    let mut sup_c = 0.0f64;
    let stats: Vec<[f64; 5]> = par_map(n, |i| {
        let mut s = [0.0f64; 5];
        for j in 0..=i {
            s[2] = s[2].max(spectral_norm(&fs.s(i, j).into_owned()));
            s[3] = s[3].max(spectral_norm(&fs.dt_s(i, j).into_owned()));
            s[4] = s[4].max(spectral_norm(&fs.c(i, j).into_owned()));
            if i + 1 < n {
                let ds = fs.s(i + 1, j) - fs.s(i, j);
                let dc = fs.c(i + 1, j) - fs.c(i, j);
                s[0] = s[0].max(spectral_norm(&ds) / dt);
                s[1] = s[1].max(spectral_norm(&dc) / dt);
            }
        }
        s
    });
    for s in &stats {
        lip_m1 = lip_m1.max(s[0]);
        lip_c1 = lip_c1.max(s[1]);
        sup_s = sup_s.max(s[2]);
        sup_dt_s = sup_dt_s.max(s[3]);
        sup_c = sup_c.max(s[4]);
    }

    Ok(AxiomReport {
        kind: fs.kind,
        boundary,
        boundary_s_derivative: col(0),
        s2a: col(1),
        s2b: col(2),
        s2c: (!damped).then(|| col(3)),
        s3a: (!damped).then(|| col(4)),
        s3b: (!damped).then(|| col(5)),
        s4,
        composition,
        block_consistency,
        lipschitz_m1: lip_m1,
        lipschitz_c1: lip_c1,
        sup_s,
        sup_dt_s,
        sup_c,
        fd_delta: d,
    })
}

/// `max ‖S(t,s)ᵀ − S_r(T − s, T − t)‖` over stored pairs, where `fs_r` is the
/// family of the returned adjoint on the same grid.
pub fn adjoint_check(fs: &FundamentalSolution, fs_r: &FundamentalSolution) -> Result<f64> {
    if fs.dim != fs_r.dim {
        return Err(Error::Dimension {
            expected: fs.dim,
            got: fs_r.dim,
        });
    }
    if fs.grid.len() != fs_r.grid.len()
        || fs
            .grid
            .nodes()
            .iter()
            .zip(fs_r.grid.nodes())
            .any(|(a, b)| (a - b).abs() > 1e-12)
    {
        return Err(Error::Input("adjoint check needs both families on the same grid".into()));
    }
    if fs.kind == BlockKind::Damped || fs_r.kind == BlockKind::Damped {
        return Err(Error::Input("adjoint check applies to undamped families".into()));
    }
    let n = fs.grid.len() - 1;
    let rows: Vec<f64> = par_map(n + 1, |i| {
        (0..=i)
            .map(|j| spectral_norm(&(fs.s(i, j).transpose() - fs_r.s(n - j, n - i))))
            .fold(0.0, f64::max)
    });
    Ok(rows.into_iter().fold(0.0, f64::max))
}

/// Build both families for `form` and its returned adjoint and compare them.
pub fn adjoint_defect(form: &FormSpec, basis: &SpectralBasis, grid: &TimeGrid, h: f64) -> Result<f64> {
    let undamped = FormSpec {
        damping: None,
        ..form.clone()
    };
    let op = BlockOperator::from_form(&undamped, basis)?;
    let op_r = BlockOperator::from_form(&undamped.returned_adjoint(), basis)?;
    let fs = FundamentalSolution::build(&op, grid, h, Assembly::Chained)?;
    let fs_r = FundamentalSolution::build(&op_r, grid, h, Assembly::Chained)?;
    adjoint_check(&fs, &fs_r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{E, PI};

    fn scalar(a: f64, b: Option<f64>) -> BlockOperator {
        BlockOperator::constant(
            DMatrix::from_element(1, 1, a),
            b.map(|b| DMatrix::from_element(1, 1, b)),
        )
    }

    #[test]
    fn harmonic_quarter_period() {
        let op = scalar(1.0, None);
        let u = propagate(&op, 0.0, PI / 2.0, &DVector::from_vec(vec![1.0, 0.0]), None, 1e-3).unwrap();
        assert!(u[0].abs() < 1e-8 && (u[1] + 1.0).abs() < 1e-8, "{u}");
    }

    #[test]
    fn critically_damped_scalar() {
        let op = scalar(1.0, Some(2.0));
        let u = propagate(&op, 0.0, 1.0, &DVector::from_vec(vec![1.0, 0.0]), None, 1e-3).unwrap();
        assert!((u[0] - 2.0 / E).abs() < 1e-8);
    }

    #[test]
    fn zero_data_stays_zero() {
        let op = scalar(3.0, Some(0.5));
        let u = propagate(&op, 0.2, 1.7, &DVector::zeros(2), None, 1e-2).unwrap();
        assert_eq!(u, DVector::zeros(2));
    }

    #[test]
    fn propagate_rejects_bad_input() {
        let op = scalar(1.0, None);
        assert!(propagate(&op, 1.0, 0.0, &DVector::zeros(2), None, 1e-3).is_err());
        assert!(matches!(
            propagate(&op, 0.0, 1.0, &DVector::zeros(3), None, 1e-3),
            Err(Error::Dimension { .. })
        ));
        let stiff = scalar(1e8, None);
        assert!(matches!(
            propagate(&stiff, 0.0, 1.0, &DVector::zeros(2), None, 1e-3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn non_finite_state_reports_step() {
        let op = BlockOperator::undamped(
            1,
            Arc::new(|t| DMatrix::from_element(1, 1, if t > 0.5 { f64::NAN } else { 1.0 })),
        );
        let err = propagate(&op, 0.0, 1.0, &DVector::from_vec(vec![1.0, 0.0]), None, 0.1).unwrap_err();
        match err {
            Error::Propagation { step, .. } => assert!((4..=5).contains(&step)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fourth_order_convergence() {
        let op = scalar(4.0, None);
        let err = |h: f64| {
            let u = propagate(&op, 0.0, 2.0, &DVector::from_vec(vec![1.0, 0.0]), None, h).unwrap();
            (u[0] - (4.0f64).cos()).abs()
        };
        let ratio = err(0.02) / err(0.01);
        assert!(ratio > 14.0, "ratio {ratio}");
    }

    #[test]
    fn chained_and_direct_agree() {
        let op = BlockOperator::undamped(2, Arc::new(|t| DMatrix::from_row_slice(2, 2, &[1.0 + t, 0.1, 0.1, 2.0])));
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let a = FundamentalSolution::build(&op, &grid, 1e-2, Assembly::Direct).unwrap();
        let b = FundamentalSolution::build(&op, &grid, 1e-2, Assembly::Chained).unwrap();
        for i in 0..grid.len() {
            for j in 0..=i {
                assert!((a.e(i, j) - b.e(i, j)).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn dump_round_trip() {
        let op = scalar(2.0, Some(0.3));
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let fs = FundamentalSolution::build(&op, &grid, 1e-2, Assembly::Chained).unwrap();
        let mut buf = Vec::new();
        fs.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 1 + 8 + 8 + 8 + 5 * 8 + 15 * 4 * 8);
        let back = FundamentalSolution::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, fs);
        assert!(FundamentalSolution::read_from(&buf[..20]).is_err());
    }

    #[test]
    fn adjoint_of_single_mode_is_trivial() {
        let op = scalar(1.0, None);
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let fs = FundamentalSolution::build(&op, &grid, 1e-2, Assembly::Chained).unwrap();
        assert!(adjoint_check(&fs, &fs).unwrap() < 1e-12);
        assert_eq!(fs.s(2, 2)[(0, 0)], 0.0);
    }
}
