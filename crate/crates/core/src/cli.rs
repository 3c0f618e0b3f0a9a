//! Batch front end: resolve a run configuration, execute one pipeline and write
//! its artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde_json::{json, Value};

use crate::config::{validate_discretization, Command, ConfigFile};
use crate::error::{Error, Result};
use crate::forms::CertifyOptions;
use crate::nonlocal::{galerkin_refine, FixedPointConfig, RefinementLevel};
use crate::propagator::{check_axioms, Assembly, AxiomOptions, AxiomReport, FundamentalSolution};
use crate::scenarios::{Engine, RunOptions, Scenario, Solution};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_CERTIFICATION: i32 = 2;
pub const EXIT_NONCONVERGENCE: i32 = 3;

/// Thresholds a fundamental solution must meet for `axioms` to succeed.
pub const AXIOM_BOUNDARY_TOL: f64 = 1e-12;
pub const AXIOM_DERIVATIVE_TOL: f64 = 1e-5;
pub const AXIOM_COMPOSITION_TOL: f64 = 1e-6;

const DEFAULT_EXACT: &str = "cos(t)*cos(x)";
const DEFAULT_AXIOM_INTERVALS: usize = 20;

#[derive(Debug, Parser)]
#[command(name = "nlwave", version, about = "Nonlocal wave equations: certify forms, check propagators, solve")]
pub struct Cli {
    /// certify, axioms, solve, converge or manufactured; defaults to the config's command
    #[arg(value_parser = parse_command)]
    pub command: Option<Command>,
    /// Built-in scenario: undamped_neumann, population or damped
    #[arg(long)]
    pub scenario: Option<String>,
    /// TOML run configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of spatial modes
    #[arg(long)]
    pub m: Option<usize>,
    /// Integrator step
    #[arg(long)]
    pub h: Option<f64>,
    /// Time intervals of the solution grid
    #[arg(long)]
    pub intervals: Option<usize>,
    /// Fixed-point tolerance (sup norm of the update)
    #[arg(long)]
    pub tol: Option<f64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for randomized probes
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the tabulated fundamental solution
    #[arg(long)]
    pub dump_fs: bool,
    /// Mode counts for `converge`, comma separated
    #[arg(long, value_delimiter = ',')]
    pub m_list: Option<Vec<usize>>,
    /// Exact solution for `manufactured`
    #[arg(long)]
    pub exact: Option<String>,
    /// contraction or relaxed
    #[arg(long, value_parser = parse_engine)]
    pub engine: Option<Engine>,
}

fn parse_command(s: &str) -> std::result::Result<Command, String> {
    match s {
        "certify" => Ok(Command::Certify),
        "axioms" => Ok(Command::Axioms),
        "solve" => Ok(Command::Solve),
        "converge" => Ok(Command::Converge),
        "manufactured" => Ok(Command::Manufactured),
        other => Err(format!("unknown command `{other}`")),
    }
}

fn parse_engine(s: &str) -> std::result::Result<Engine, String> {
    match s {
        "contraction" => Ok(Engine::Contraction),
        "relaxed" => Ok(Engine::Relaxed),
        other => Err(format!("unknown engine `{other}`")),
    }
}

/// Fully resolved run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    pub file: ConfigFile,
    pub scenario: Scenario,
    pub options: RunOptions,
    pub certify: CertifyOptions,
    pub axioms: AxiomOptions,
    pub axiom_intervals: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub m_list: Vec<usize>,
    pub probes: usize,
    pub dump_fs: bool,
}

impl RunConfig {
    /// Merge command-line flags over the configuration file.
    pub fn resolve(cli: &Cli) -> Result<Self> {
        let mut file = match &cli.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let r = &mut file.run;
        if let Some(c) = cli.command {
            r.command = Some(c);
        }
        if cli.scenario.is_some() {
            r.scenario.clone_from(&cli.scenario);
        }
        r.m = cli.m.or(r.m);
        r.h = cli.h.or(r.h);
        r.intervals = cli.intervals.or(r.intervals);
        r.tol = cli.tol.or(r.tol);
        r.seed = cli.seed.or(r.seed);
        r.engine = cli.engine.or(r.engine);
        if cli.out.is_some() {
            r.out.clone_from(&cli.out);
        }
        if cli.m_list.is_some() {
            r.m_list.clone_from(&cli.m_list);
        }
        if cli.exact.is_some() {
            r.exact.clone_from(&cli.exact);
        }
        if cli.dump_fs {
            r.dump_fs = Some(true);
        }
        let command = r
            .command
            .ok_or_else(|| Error::Config("no command given on the command line or in [run]".into()))?;
        if command == Command::Manufactured && r.exact.is_none() {
            r.exact = Some(DEFAULT_EXACT.into());
        }
        Self::from_file(command, file)
    }

    pub fn from_file(command: Command, file: ConfigFile) -> Result<Self> {
        let scenario = file.scenario()?;
        let r = &file.run;
        let defaults = FixedPointConfig::default();
        let fixed_point = FixedPointConfig {
            tol: r.tol.unwrap_or(defaults.tol),
            max_iter: r.max_iter.unwrap_or(defaults.max_iter),
            theta: r.theta.unwrap_or(defaults.theta),
            homotopy_steps: r.homotopy_steps.unwrap_or(defaults.homotopy_steps),
            q_target: r.q_target.unwrap_or(defaults.q_target),
            inner_max: defaults.inner_max,
        };
        if !(fixed_point.tol.is_finite() && fixed_point.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", fixed_point.tol)));
        }
        let options = RunOptions {
            assembly: r.assembly.unwrap_or(Assembly::Chained),
            fixed_point,
            ..scenario.run_options()
        };
        let m_list = r.m_list.clone().unwrap_or_else(|| vec![4, 8, 16]);
        for &m in &m_list {
            validate_discretization(m, options.h, options.intervals)?;
        }
        let axiom_intervals = file.axioms.intervals.unwrap_or(DEFAULT_AXIOM_INTERVALS);
        if axiom_intervals < 3 {
            return Err(Error::Config("[axioms] intervals must be at least 3".into()));
        }
        Ok(Self {
            command,
            certify: file.certify_options(),
            axioms: file.axiom_options(),
            axiom_intervals,
            seed: r.seed.unwrap_or(0),
            out: r.out.clone().unwrap_or_else(|| PathBuf::from("nlwave-out")),
            m_list,
            probes: r.probes.unwrap_or(5),
            dump_fs: r.dump_fs.unwrap_or(false),
            scenario,
            options,
            file,
        })
    }
}

/// Result of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub exit_code: i32,
    pub outputs: Vec<PathBuf>,
    pub message: String,
}

/// Parse arguments, run, and return the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let fallback_out = cli.out.clone().unwrap_or_else(|| PathBuf::from("nlwave-out"));
    let cfg = match RunConfig::resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            let _ = write_diagnostic(&fallback_out, EXIT_CONFIG, &e, None);
            return EXIT_CONFIG;
        }
    };
    let outcome = run(&cfg);
    if outcome.exit_code == EXIT_OK {
        println!("{}", outcome.message);
    } else {
        eprintln!("{}", outcome.message);
    }
    outcome.exit_code
}

/// Execute a resolved run; artifacts go to `cfg.out`.
pub fn run(cfg: &RunConfig) -> Outcome {
    if let Err(e) = fs::create_dir_all(&cfg.out) {
        return Outcome {
            exit_code: EXIT_CONFIG,
            outputs: Vec::new(),
            message: format!("cannot create {}: {e}", cfg.out.display()),
        };
    }
    let mut ctx = Context {
        cfg,
        outputs: Vec::new(),
        manifest: base_manifest(cfg),
    };
    let result = match cfg.command {
        Command::Certify => ctx.certify().map(|_| EXIT_OK),
        Command::Axioms => ctx.axioms(),
        Command::Solve | Command::Manufactured => ctx.solve(),
        Command::Converge => ctx.converge(),
    };
    let (code, message) = match result {
        Ok(code) => (code, status_message(cfg.command, code)),
        Err(e) => {
            let code = exit_code_for(&e);
            let witness = match &e {
                Error::Certification(f) => serde_json::to_value(f).ok(),
                _ => None,
            };
            if let Ok(p) = write_diagnostic(&cfg.out, code, &e, witness) {
                ctx.outputs.push(p);
            }
            (code, format!("error: {e}"))
        }
    };
    if code != EXIT_OK && !ctx.outputs.iter().any(|p| p.ends_with("diagnostic.json")) {
        let e = Error::Input(message.clone());
        if let Ok(p) = write_diagnostic(&cfg.out, code, &e, None) {
            ctx.outputs.push(p);
        }
    }
    ctx.manifest["exit_code"] = json!(code);
    ctx.manifest["status"] = json!(message);
    let mut outputs = ctx.outputs.clone();
    outputs.push(cfg.out.join("manifest.json"));
    ctx.manifest["outputs"] = json!(outputs
        .iter()
        .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect::<Vec<_>>());
    let message = match write_json(&cfg.out.join("manifest.json"), &ctx.manifest) {
        Ok(_) => message,
        Err(e) => format!("{message}; could not write manifest: {e}"),
    };
    Outcome {
        exit_code: code,
        outputs,
        message,
    }
}

fn status_message(command: Command, code: i32) -> String {
    match code {
        EXIT_OK => format!("{}: ok", command.name()),
        EXIT_CERTIFICATION => format!("{}: certification or axiom check failed", command.name()),
        EXIT_NONCONVERGENCE => format!("{}: fixed-point iteration did not converge", command.name()),
        _ => format!("{}: failed", command.name()),
    }
}

pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Certification(_) => EXIT_CERTIFICATION,
        _ => EXIT_CONFIG,
    }
}

fn base_manifest(cfg: &RunConfig) -> Value {
    let o = &cfg.options;
    json!({
        "program": "nlwave",
        "version": env!("CARGO_PKG_VERSION"),
        "command": cfg.command.name(),
        "seed": cfg.seed,
        "scenario": cfg.scenario.name,
        "configuration": ConfigFile::from_scenario(&cfg.scenario),
        "resolved": {
            "m": o.m,
            "h": o.h,
            "intervals": o.intervals,
            "horizon": cfg.scenario.horizon(),
            "engine": o.engine,
            "assembly": o.assembly,
            "fixed_point": o.fixed_point,
            "certify": cfg.certify,
            "axioms": cfg.axioms,
            "axiom_intervals": cfg.axiom_intervals,
            "m_list": cfg.m_list,
            "probes": cfg.probes,
        },
    })
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| Error::Input(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_diagnostic(dir: &Path, code: i32, e: &Error, witness: Option<Value>) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("diagnostic.json");
    let kind = match e {
        Error::Config(_) => "config",
        Error::Input(_) => "input",
        Error::Dimension { .. } => "dimension",
        Error::Expr(_) => "expression",
        Error::Assembly { .. } => "assembly",
        Error::Certification(_) => "certification",
        Error::Propagation { .. } => "propagation",
        Error::OutsideSpan { .. } => "outside_span",
        Error::Io(_) => "io",
    };
    write_json(
        &path,
        &json!({ "exit_code": code, "kind": kind, "message": e.to_string(), "witness": witness }),
    )?;
    Ok(path)
}

/// CSV with a `# key = value` preamble, a header row and `.`-decimal numbers.
pub fn write_csv(path: &Path, preamble: &[(&str, String)], header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for (k, v) in preamble {
        writeln!(f, "# {k} = {v}")?;
    }
    writeln!(f, "{}", header.join(","))?;
    for r in rows {
        writeln!(f, "{}", r.join(","))?;
    }
    f.flush()?;
    Ok(())
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

struct Context<'a> {
    cfg: &'a RunConfig,
    outputs: Vec<PathBuf>,
    manifest: Value,
}

impl Context<'_> {
    fn emit_json(&mut self, name: &str, v: &impl serde::Serialize) -> Result<()> {
        let p = self.cfg.out.join(name);
        write_json(&p, v)?;
        self.outputs.push(p);
        Ok(())
    }

    fn dump(&mut self, fs: &FundamentalSolution) -> Result<()> {
        if self.cfg.dump_fs {
            let p = self.cfg.out.join("fs.bin");
            fs.save(&p)?;
            self.outputs.push(p);
        }
        Ok(())
    }

    fn certify(&mut self) -> Result<()> {
        let cert = self.cfg.scenario.certify(self.cfg.options.m, &self.cfg.certify)?;
        self.manifest["certificate"] = json!({
            "bound_c": cert.bound_c,
            "coercivity_alpha": cert.coercivity_alpha,
            "shift": cert.shift,
            "sampling_margin": cert.sampling_margin,
        });
        self.emit_json("certificate.json", &cert)
    }

    fn axioms(&mut self) -> Result<i32> {
        let s = &self.cfg.scenario;
        let basis = s.basis(self.cfg.options.m)?;
        let op = s.operator(&basis)?;
        let grid = s.grid(self.cfg.axiom_intervals)?;
        let fs = FundamentalSolution::build(&op, &grid, self.cfg.options.h, Assembly::Direct)?;
        let report = check_axioms(&fs, &op, &self.cfg.axioms)?;
        let failures = axiom_failures(&report);
        self.manifest["constants"] = serde_json::to_value(fs.constants()).unwrap_or(Value::Null);
        self.manifest["axiom_failures"] = json!(failures);
        self.emit_json("axioms.json", &report)?;
        self.dump(&fs)?;
        Ok(if failures.is_empty() { EXIT_OK } else { EXIT_CERTIFICATION })
    }

    fn solve(&mut self) -> Result<i32> {
        self.certify()?;
        let sol = self.cfg.scenario.solve(&self.cfg.options)?;
        let r = &sol.report;
        let q = r.predicted_q.unwrap_or_else(|| {
            let c = &r.constants;
            (c.m1 * c.lg + c.m2 * c.lh) * c.horizon.sqrt() + c.l.unwrap_or(f64::NAN) * c.m2_integral
        });
        self.manifest["constants"] = json!({
            "propagator": sol.fs.constants(),
            "fixed_point": r.constants,
            "predicted_q": q,
            "partition": r.partition,
            "partition_q": r.partition_q,
        });
        self.manifest["residual"] = json!({
            "equation": r.residual_equation,
            "velocity": r.residual_velocity,
            "initial_u": r.residual_g,
            "initial_v": r.residual_h,
            "fixed_point": r.fixed_point_residual,
        });
        self.manifest["converged"] = json!(r.converged);
        self.manifest["iterations"] = json!(r.iterations);
        if let Some(e) = &sol.exact_error {
            self.manifest["exact_error"] = serde_json::to_value(e).unwrap_or(Value::Null);
        }
        self.write_trajectory(&sol, q)?;
        self.emit_json("report.json", r)?;
        self.dump(&sol.fs)?;
        Ok(if r.converged { EXIT_OK } else { EXIT_NONCONVERGENCE })
    }

    fn write_trajectory(&mut self, sol: &Solution, q: f64) -> Result<()> {
        let m = sol.basis.dim();
        let c = &sol.report.constants;
        let preamble = [
            ("scenario", self.cfg.scenario.name.clone()),
            ("m", m.to_string()),
            ("h", num(self.cfg.options.h)),
            ("M1", num(c.m1)),
            ("M2", num(c.m2)),
            ("M2_integral", num(c.m2_integral)),
            ("L_g", num(c.lg)),
            ("L_h", num(c.lh)),
            ("predicted_q", num(q)),
            ("residual_equation", num(sol.report.residual_equation)),
        ];
        let mut header = vec!["t".to_string()];
        header.extend((0..m).map(|k| format!("u{k}")));
        header.extend((0..m).map(|k| format!("v{k}")));
        let tr = &sol.trajectory;
        let rows: Vec<Vec<String>> = (0..tr.len())
            .map(|i| {
                let mut row = vec![num(tr.times[i])];
                row.extend(tr.u[i].iter().map(|&x| num(x)));
                row.extend(tr.v[i].iter().map(|&x| num(x)));
                row
            })
            .collect();
        let p = self.cfg.out.join("trajectory.csv");
        write_csv(&p, &preamble, &header, &rows)?;
        self.outputs.push(p);
        Ok(())
    }

    fn converge(&mut self) -> Result<i32> {
        let s = &self.cfg.scenario;
        let opts = self.cfg.options;
        let rows = galerkin_refine(&self.cfg.m_list, self.cfg.probes, self.cfg.seed, |m| {
            let sol = s.solve(&RunOptions { m, ..opts })?;
            Ok(RefinementLevel {
                trajectory: sol.trajectory,
                report: sol.report,
                fs: sol.fs,
            })
        })?;
        let preamble = [
            ("scenario", s.name.clone()),
            ("m_list", format!("{:?}", self.cfg.m_list)),
            ("h", num(opts.h)),
            ("intervals", opts.intervals.to_string()),
            ("tol", num(opts.fixed_point.tol)),
            ("probes", self.cfg.probes.to_string()),
            ("seed", self.cfg.seed.to_string()),
            ("norm", "L2(0,T;H)".to_string()),
        ];
        let header: Vec<String> = ["m", "converged", "iterations", "diff_to_finest", "diff_to_next", "s_action_max"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.m.to_string(),
                    r.converged.to_string(),
                    r.iterations.to_string(),
                    num(r.diff_to_finest),
                    r.diff_to_next.map_or_else(String::new, num),
                    num(r.s_action_diff.iter().copied().fold(f64::NAN, f64::max)),
                ]
            })
            .collect();
        let p = self.cfg.out.join("convergence.csv");
        write_csv(&p, &preamble, &header, &table)?;
        self.outputs.push(p);
        self.emit_json("convergence.json", &rows)?;
        let all = rows.iter().all(|r| r.converged);
        self.manifest["converged"] = json!(all);
        Ok(if all { EXIT_OK } else { EXIT_NONCONVERGENCE })
    }
}

/// Names of the axiom thresholds a report violates.
pub fn axiom_failures(r: &AxiomReport) -> Vec<String> {
    let within = |v: f64, tol: f64| v <= tol;
    let mut out = Vec::new();
    if !within(r.boundary, AXIOM_BOUNDARY_TOL) {
        out.push(format!("boundary {:e}", r.boundary));
    }
    if !within(r.max_derivative_defect(), AXIOM_DERIVATIVE_TOL) {
        out.push(format!("derivative identities {:e}", r.max_derivative_defect()));
    }
    if !within(r.s4, AXIOM_DERIVATIVE_TOL) {
        out.push(format!("product identity {:e}", r.s4));
    }
    if !within(r.composition, AXIOM_COMPOSITION_TOL) {
        out.push(format!("composition {:e}", r.composition));
    }
    if !(r.lipschitz_m1.is_finite() && r.lipschitz_c1.is_finite()) {
        out.push("lipschitz constants not finite".into());
    }
    out
}
