//! Run configuration files.
//!
//! A file names a base scenario and overrides any part of it:
//!
//! ```toml
//! [run]
//! command = "solve"
//! scenario = "population"
//! m = 8
//!
//! [form]
//! gradient = { symbol = "d", expr = "1 + 0.2*sin(t)", lower = 0.8, upper = 1.2 }
//!
//! [g]
//! kernel = "exp(-t)"
//! offset = "0.3*exp(cos(x))"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::forms::{CertifyOptions, CoefficientField, Symbol};
use crate::nonlocal::{AffineOffset, Evaluation, NonlocalKernel, PointLaw};
use crate::propagator::{Assembly, AxiomOptions};
use crate::scenarios::{self, Engine, Scenario};
use crate::spectral::{DomainShape, SpatialDomain};

pub const MAX_MODES: usize = 512;
pub const MIN_STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Certify,
    Axioms,
    Solve,
    Converge,
    Manufactured,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Certify => "certify",
            Command::Axioms => "axioms",
            Command::Solve => "solve",
            Command::Converge => "converge",
            Command::Manufactured => "manufactured",
        }
    }
}

/// `[run]` section.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub command: Option<Command>,
    pub scenario: Option<String>,
    pub m: Option<usize>,
    pub h: Option<f64>,
    pub intervals: Option<usize>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub theta: Option<f64>,
    pub homotopy_steps: Option<usize>,
    pub q_target: Option<f64>,
    pub engine: Option<Engine>,
    pub assembly: Option<Assembly>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub m_list: Option<Vec<usize>>,
    pub probes: Option<usize>,
    /// Exact solution for `manufactured` runs.
    pub exact: Option<String>,
    pub allow_projection: Option<bool>,
    pub dump_fs: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    /// `interval` or `rectangle`.
    pub shape: Option<String>,
    pub length: Option<f64>,
    pub lx: Option<f64>,
    pub ly: Option<f64>,
    pub quadrature: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub symbol: Symbol,
    pub expr: String,
    pub lower: f64,
    pub upper: f64,
}

impl FieldSpec {
    fn from_field(f: &CoefficientField) -> Self {
        Self {
            symbol: f.symbol,
            expr: f.expr.to_string(),
            lower: f.lower,
            upper: f.upper,
        }
    }

    fn build(&self) -> Result<CoefficientField> {
        CoefficientField::parse(self.symbol, &self.expr, self.lower, self.upper)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormSection {
    pub gradient: Option<FieldSpec>,
    pub zeroth: Option<FieldSpec>,
    pub damping: Option<FieldSpec>,
    /// Drop the damping term of the base scenario.
    pub undamped: Option<bool>,
    pub horizon: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearitySection {
    /// `zero`, `identity`, `linear:<c>`, `tanh`, `sin` or `logistic`.
    pub law: Option<String>,
    pub evaluation: Option<Evaluation>,
    pub growth_a: Option<f64>,
    pub growth_b: Option<f64>,
    pub lipschitz: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub kernel: Option<String>,
    /// Offset as a function of `x`, `y`.
    pub offset: Option<String>,
    /// Offset as basis coordinates.
    pub offset_coefficients: Option<Vec<f64>>,
}

impl KernelSection {
    fn from_kernel(k: &NonlocalKernel) -> Self {
        let (offset, offset_coefficients) = match &k.offset {
            AffineOffset::Zero => (None, None),
            AffineOffset::Field(e) => (Some(e.to_string()), None),
            AffineOffset::Coefficients(c) => (None, Some(c.clone())),
        };
        Self {
            kernel: Some(k.kernel.to_string()),
            offset,
            offset_coefficients,
        }
    }

    fn apply(&self, k: &mut NonlocalKernel, which: &str) -> Result<()> {
        if let Some(src) = &self.kernel {
            k.kernel = Expr::parse(src)?;
        }
        match (&self.offset, &self.offset_coefficients) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(format!(
                    "[{which}] sets both offset and offset_coefficients"
                )))
            }
            (Some(e), None) => k.offset = AffineOffset::Field(Expr::parse(e)?),
            (None, Some(c)) => k.offset = AffineOffset::Coefficients(c.clone()),
            (None, None) => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxiomSection {
    /// Time intervals of the grid the identities are checked on.
    pub intervals: Option<usize>,
    pub delta: Option<f64>,
    pub substeps: Option<usize>,
}

/// A configuration file as written on disk.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub domain: DomainSection,
    #[serde(default)]
    pub form: FormSection,
    #[serde(default)]
    pub nonlinearity: NonlinearitySection,
    #[serde(default)]
    pub g: KernelSection,
    #[serde(default)]
    pub h: KernelSection,
    #[serde(default)]
    pub certify: Option<CertifyOptions>,
    #[serde(default)]
    pub axioms: AxiomSection,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The complete description of a scenario, with every section filled in.
    pub fn from_scenario(s: &Scenario) -> Self {
        let (shape, length, lx, ly) = match s.domain.shape {
            DomainShape::Interval { length } => ("interval", Some(length), None, None),
            DomainShape::Rectangle { lx, ly } => ("rectangle", None, Some(lx), Some(ly)),
        };
        Self {
            run: RunSection {
                scenario: Some(s.name.clone()),
                m: Some(s.discretization.m),
                h: Some(s.discretization.h),
                intervals: Some(s.discretization.intervals),
                engine: Some(s.engine),
                exact: s.manufactured.as_ref().map(|m| m.exact.to_string()),
                allow_projection: s.manufactured.as_ref().map(|m| m.allow_projection),
                ..RunSection::default()
            },
            domain: DomainSection {
                shape: Some(shape.into()),
                length,
                lx,
                ly,
                quadrature: s.domain.quadrature_order,
            },
            form: FormSection {
                gradient: Some(FieldSpec::from_field(&s.form.gradient)),
                zeroth: Some(FieldSpec::from_field(&s.form.zeroth)),
                damping: s.form.damping.as_ref().map(FieldSpec::from_field),
                undamped: Some(s.form.damping.is_none()),
                horizon: Some(s.form.horizon),
            },
            nonlinearity: NonlinearitySection {
                law: Some(s.nonlinearity.law.name()),
                evaluation: Some(s.nonlinearity.evaluation),
                growth_a: Some(s.nonlinearity.growth_a),
                growth_b: Some(s.nonlinearity.growth_b),
                lipschitz: s.nonlinearity.lipschitz,
            },
            g: KernelSection::from_kernel(&s.g),
            h: KernelSection::from_kernel(&s.h),
            certify: None,
            axioms: AxiomSection::default(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Base scenario with every override of this file applied.
    pub fn scenario(&self) -> Result<Scenario> {
        let base = self.run.scenario.as_deref().unwrap_or("undamped_neumann");
        let base = base.strip_prefix("manufactured:").unwrap_or(base);
        let mut s = scenarios::by_name(base)?;
        let d = &self.domain;
        if d.shape.is_some() || d.length.is_some() || d.lx.is_some() || d.ly.is_some() {
            let shape = match d.shape.as_deref() {
                None | Some("interval") if d.lx.is_none() => DomainShape::Interval {
                    length: d.length.unwrap_or(s.domain.measure()),
                },
                None | Some("rectangle") => DomainShape::Rectangle {
                    lx: d.lx.ok_or_else(|| Error::Config("rectangle needs lx".into()))?,
                    ly: d.ly.ok_or_else(|| Error::Config("rectangle needs ly".into()))?,
                },
                Some(other) => return Err(Error::Config(format!("unknown domain shape `{other}`"))),
            };
            s.domain.shape = shape;
        }
        if let Some(q) = d.quadrature {
            s.domain = SpatialDomain {
                quadrature_order: Some(q),
                ..s.domain
            };
        }
        s.domain.validate()?;

        let f = &self.form;
        if let Some(g) = &f.gradient {
            s.form.gradient = g.build()?;
        }
        if let Some(z) = &f.zeroth {
            s.form.zeroth = z.build()?;
        }
        match (&f.damping, f.undamped) {
            (Some(_), Some(true)) => {
                return Err(Error::Config("[form] sets damping and undamped = true".into()))
            }
            (Some(b), _) => s.form.damping = Some(b.build()?),
            (None, Some(true)) => s.form.damping = None,
            _ => {}
        }
        if let Some(t) = f.horizon {
            s.form.horizon = t;
        }
        s.form.validate()?;

        let n = &self.nonlinearity;
        if let Some(law) = &n.law {
            let law = PointLaw::parse(law)?;
            s.nonlinearity = scenarios::NonlinearitySpec::new(law);
        }
        if let Some(e) = n.evaluation {
            s.nonlinearity.evaluation = e;
        }
        if let Some(a) = n.growth_a {
            s.nonlinearity.growth_a = a;
        }
        if let Some(b) = n.growth_b {
            s.nonlinearity.growth_b = b;
        }
        if n.lipschitz.is_some() {
            s.nonlinearity.lipschitz = n.lipschitz;
        }

        self.g.apply(&mut s.g, "g")?;
        self.h.apply(&mut s.h, "h")?;

        let r = &self.run;
        if let Some(m) = r.m {
            s.discretization.m = m;
        }
        if let Some(h) = r.h {
            s.discretization.h = h;
        }
        if let Some(n) = r.intervals {
            s.discretization.intervals = n;
        }
        if let Some(e) = r.engine {
            s.engine = e;
        }
        if let Some(exact) = &r.exact {
            s = scenarios::manufactured(Expr::parse(exact)?, s);
            if let Some(man) = s.manufactured.as_mut() {
                man.allow_projection = r.allow_projection.unwrap_or(false);
            }
        }
        validate_discretization(s.discretization.m, s.discretization.h, s.discretization.intervals)?;
        Ok(s)
    }

    pub fn certify_options(&self) -> CertifyOptions {
        self.certify.unwrap_or_default()
    }

    pub fn axiom_options(&self) -> AxiomOptions {
        let d = AxiomOptions::default();
        AxiomOptions {
            delta: self.axioms.delta.unwrap_or(d.delta),
            substeps: self.axioms.substeps.unwrap_or(d.substeps),
        }
    }
}

pub fn validate_discretization(m: usize, h: f64, intervals: usize) -> Result<()> {
    if m == 0 || m > MAX_MODES {
        return Err(Error::Config(format!("m must lie in 1..={MAX_MODES}, got {m}")));
    }
    if !(h.is_finite() && h >= MIN_STEP) {
        return Err(Error::Config(format!("h must be at least {MIN_STEP}, got {h}")));
    }
    if intervals < 2 {
        return Err(Error::Config(format!("the time grid needs at least 2 intervals, got {intervals}")));
    }
    Ok(())
}
