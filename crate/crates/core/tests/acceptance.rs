//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if any criterion fails.

use std::f64::consts::{E, PI};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nlwave::expr::Expr;
use nlwave::nonlocal::{
    contraction_solve, galerkin_refine, AffineOffset, FixedPointConfig, KernelOperator, NonlocalKernel,
    Nonlinearity, RefinementLevel, SemilinearProblem,
};
use nlwave::propagator::{
    adjoint_check, adjoint_defect, check_axioms, Assembly, AxiomOptions, AxiomReport, BlockOperator,
    FundamentalSolution, MatrixFn, VectorFn,
};
use nlwave::scenarios::{self, RunOptions, Scenario};
use nlwave::spectral::{SpectralBasis, SpatialDomain, TimeGrid};
use nlwave::voc::{direct_integrate, solve, LinearProblem};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn fs_oracle() -> Check {
    let start = Instant::now();
    let lambdas = [0.0, 1.0, 4.0, 9.0];
    let op = BlockOperator::constant(DMatrix::from_diagonal(&DVector::from_row_slice(&lambdas)), None);
    let grid = TimeGrid::uniform(2.0, 20).map_err(err)?;
    let fs = FundamentalSolution::build(&op, &grid, 1e-3, Assembly::Direct).map_err(err)?;
    let t = grid.nodes();
    let mut worst = 0.0f64;
    for i in 0..t.len() {
        for j in 0..=i {
            let d = t[i] - t[j];
            for (k, &l) in lambdas.iter().enumerate() {
                let w = l.sqrt();
                let (s, c) = if l == 0.0 { (d, 1.0) } else { ((w * d).sin() / w, (w * d).cos()) };
                worst = worst.max((fs.s(i, j)[(k, k)] - s).abs()).max((fs.c(i, j)[(k, k)] - c).abs());
                for q in 0..4 {
                    if q != k {
                        worst = worst.max(fs.s(i, j)[(k, q)].abs()).max(fs.c(i, j)[(k, q)].abs());
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst < 1e-7 && secs < 5.0, format!("max error {worst:.2e}, {secs:.2} s"))
}

fn axioms_at(s: &Scenario, intervals: usize) -> Result<AxiomReport, String> {
    let basis = s.basis(16).map_err(err)?;
    let op = s.operator(&basis).map_err(err)?;
    let grid = s.grid(intervals).map_err(err)?;
    let fs = FundamentalSolution::build(&op, &grid, 1e-3, Assembly::Direct).map_err(err)?;
    check_axioms(&fs, &op, &AxiomOptions::default()).map_err(err)
}

fn axiom_suite() -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for s in [scenarios::undamped_neumann(), scenarios::population()] {
        let coarse = axioms_at(&s, 20)?;
        let fine = axioms_at(&s, 40)?;
        let stable = |a: f64, b: f64| a.is_finite() && b.is_finite() && (a - b).abs() <= 0.1 * a.abs().max(b.abs());
        for r in [&coarse, &fine] {
            ok &= r.boundary <= 1e-12 && r.s2a < 1e-5 && r.s2b < 1e-5 && r.composition < 1e-6;
        }
        ok &= stable(coarse.lipschitz_m1, fine.lipschitz_m1) && stable(coarse.lipschitz_c1, fine.lipschitz_c1);
        lines.push(format!(
            "{}: boundary {:.1e}, s2a {:.1e}, s2b {:.1e}, composition {:.1e}, M1 {:.3}/{:.3}, C1 {:.3}/{:.3}",
            s.name,
            coarse.boundary.max(fine.boundary),
            coarse.s2a.max(fine.s2a),
            coarse.s2b.max(fine.s2b),
            coarse.composition.max(fine.composition),
            coarse.lipschitz_m1,
            fine.lipschitz_m1,
            coarse.lipschitz_c1,
            fine.lipschitz_c1
        ));
    }
    ensure(ok, lines.join("; "))
}

fn adjoint_identity() -> Check {
    let horizon = 1.0;
    let grid = TimeGrid::uniform(horizon, 20).map_err(err)?;
    let stiffness: MatrixFn = Arc::new(|t| DMatrix::from_element(1, 1, 1.0 + t));
    let op = BlockOperator::undamped(1, stiffness);
    let op_r = op.returned_adjoint(horizon).map_err(err)?;
    let fs = FundamentalSolution::build(&op, &grid, 1e-3, Assembly::Direct).map_err(err)?;
    let fs_r = FundamentalSolution::build(&op_r, &grid, 1e-3, Assembly::Direct).map_err(err)?;
    let scalar = adjoint_check(&fs, &fs_r).map_err(err)?;
    let s = scenarios::undamped_neumann();
    let basis = s.basis(8).map_err(err)?;
    let neumann = adjoint_defect(&s.form, &basis, &grid, 1e-3).map_err(err)?;
    ensure(
        scalar < 1e-6 && neumann < 1e-6,
        format!("scalar a(t) = 1 + t: {scalar:.2e}, Neumann scenario m = 8: {neumann:.2e}"),
    )
}

fn random_problem(rng: &mut ChaCha8Rng, m: usize) -> LinearProblem {
    let lam: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..10.0)).collect();
    let freq: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..2.0)).collect();
    let mut off = DMatrix::from_fn(m, m, |_, _| rng.random_range(-0.05..0.05));
    off = (&off + off.transpose()) * 0.5;
    off.fill_diagonal(0.0);
    let stiffness: MatrixFn = Arc::new(move |t: f64| {
        let mut a = &off * t.cos();
        for k in 0..m {
            a[(k, k)] += lam[k] * (1.0 + 0.3 * (freq[k] * t).sin());
        }
        a
    });
    let amp: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let phase: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..PI)).collect();
    let forcing: VectorFn = Arc::new(move |t: f64| DVector::from_fn(m, |k, _| amp[k] * (t + phase[k]).sin()));
    let u0 = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
    let u1 = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
    LinearProblem::new(BlockOperator::undamped(m, stiffness), u0, u1, forcing, 1.0).expect("valid problem")
}

fn voc_vs_direct() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let grid = TimeGrid::uniform(1.0, 100).map_err(err)?;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let p = random_problem(&mut rng, 8);
        let fs = FundamentalSolution::build(&p.op, &grid, 1e-3, Assembly::Chained).map_err(err)?;
        let a = solve(&p, &fs, &grid).map_err(err)?;
        let b = direct_integrate(&p, &grid, 1e-3).map_err(err)?;
        worst = worst.max(a.sup_distance(&b));
    }
    let scalar = |h: f64| -> Result<f64, String> {
        let op = BlockOperator::constant(DMatrix::from_element(1, 1, 1.0), None);
        let grid = TimeGrid::uniform(2.0, 4).map_err(err)?;
        let fs = FundamentalSolution::build(&op, &grid, h, Assembly::Chained).map_err(err)?;
        let p = LinearProblem::homogeneous(op, DVector::from_element(1, 1.0), DVector::from_element(1, 0.0), 2.0)
            .map_err(err)?;
        let tr = solve(&p, &fs, &grid).map_err(err)?;
        Ok(tr.times.iter().zip(&tr.u).map(|(t, u)| (u[0] - t.cos()).abs()).fold(0.0, f64::max))
    };
    let (coarse, fine) = (scalar(0.1)?, scalar(0.05)?);
    let ratio = coarse / fine;
    ensure(
        worst < 1e-6 && ratio >= 14.0,
        format!("max disagreement {worst:.2e} over 20 problems; h-halving error ratio {ratio:.1}"),
    )
}

fn damped_representation() -> Check {
    let one = |v: f64| DVector::from_element(1, v);
    let crit = BlockOperator::constant(DMatrix::from_element(1, 1, 1.0), Some(DMatrix::from_element(1, 1, 2.0)));
    let grid = TimeGrid::uniform(1.0, 10).map_err(err)?;
    let fs = FundamentalSolution::build(&crit, &grid, 1e-3, Assembly::Chained).map_err(err)?;
    let p = LinearProblem::homogeneous(crit, one(1.0), one(0.0), 1.0).map_err(err)?;
    let u1 = solve(&p, &fs, &grid).map_err(err)?.u[10][0];
    let crit_err = (u1 - 2.0 / E).abs();

    let res = BlockOperator::constant(DMatrix::from_element(1, 1, 1.0), Some(DMatrix::zeros(1, 1)));
    let grid = TimeGrid::uniform(PI, 200).map_err(err)?;
    let fs = FundamentalSolution::build(&res, &grid, 1e-3, Assembly::Chained).map_err(err)?;
    let p = LinearProblem::new(res, one(0.0), one(0.0), Arc::new(|t: f64| DVector::from_element(1, t.sin())), PI)
        .map_err(err)?;
    let upi = solve(&p, &fs, &grid).map_err(err)?.u[200][0];
    let res_err = (upi - PI / 2.0).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_problem(&mut rng, 4);
    let grid = TimeGrid::uniform(1.0, 40).map_err(err)?;
    let damped = LinearProblem {
        op: p.op.as_damped(),
        ..p.clone()
    };
    let fs_u = FundamentalSolution::build(&p.op, &grid, 1e-3, Assembly::Chained).map_err(err)?;
    let fs_d = FundamentalSolution::build(&damped.op, &grid, 1e-3, Assembly::Chained).map_err(err)?;
    let a = solve(&p, &fs_u, &grid).map_err(err)?;
    let b = solve(&damped, &fs_d, &grid).map_err(err)?;
    let consistency = a.sup_distance(&b);
    ensure(
        crit_err < 1e-6 && res_err < 1e-6 && consistency < 1e-9,
        format!("critical u(1) error {crit_err:.2e}, resonance u(pi) error {res_err:.2e}, B = 0 vs undamped {consistency:.2e}"),
    )
}

fn toy(gamma: f64, intervals: usize) -> Result<(SemilinearProblem, FundamentalSolution), String> {
    let horizon = PI / 2.0;
    let basis = Arc::new(SpectralBasis::build(SpatialDomain::interval(1.0), 1).map_err(err)?);
    let op = BlockOperator::constant(DMatrix::from_element(1, 1, 1.0), None);
    let grid = TimeGrid::uniform(horizon, intervals).map_err(err)?;
    let fs = FundamentalSolution::build(&op, &grid, 1e-3, Assembly::Chained).map_err(err)?;
    let g = NonlocalKernel::new(Expr::constant(gamma), AffineOffset::Coefficients(vec![1.0]));
    let g = KernelOperator::assemble(&g, &basis, &grid).map_err(err)?;
    let h = KernelOperator::assemble(&NonlocalKernel::zero(), &basis, &grid).map_err(err)?;
    Ok((
        SemilinearProblem {
            op,
            basis,
            f: Nonlinearity::zero(),
            g,
            h,
            horizon,
        },
        fs,
    ))
}

fn contraction_engine() -> Check {
    let cfg = FixedPointConfig {
        tol: 1e-12,
        ..FixedPointConfig::default()
    };
    let (p, fs) = toy(0.5, 200)?;
    let (w, r) = contraction_solve(&p, &fs, &cfg).map_err(err)?;
    let q = r.predicted_q.unwrap_or(f64::NAN);
    let ratio = r.measured_ratio.unwrap_or(f64::NAN);
    let e_half = (w.u[0][0] - 2.0).abs();
    let (p, fs) = toy(0.8, 200)?;
    let (w8, r8) = contraction_solve(&p, &fs, &cfg).map_err(err)?;
    let q8 = r8.predicted_q.unwrap_or(f64::NAN);
    let e8 = (w8.u[0][0] - 5.0).abs();
    ensure(
        r.converged && e_half < 1e-8 && ratio <= q + 0.05 && (q - PI / 4.0).abs() < 1e-3
            && r8.converged && q8 >= 1.0 && r8.partition.len() > 2 && e8 < 1e-6,
        format!(
            "gamma 1/2: u(0) error {e_half:.1e}, ratio {ratio:.3} vs q {q:.3}; gamma 0.8: q {q8:.3}, {} pieces, u(0) error {e8:.1e}",
            r8.partition.len() - 1
        ),
    )
}

fn nonlocal_certification() -> Check {
    let mut ok = true;
    let mut lines = Vec::new();
    for s in [scenarios::undamped_neumann(), scenarios::population()] {
        let sol = s.solve(&s.run_options()).map_err(err)?;
        let r = &sol.report;
        let gr = r.gronwall.ok_or("missing Gronwall check")?;
        ok &= r.converged && r.residual_g < 1e-6 && r.residual_h < 1e-6 && r.residual_equation < 1e-4 && gr.inside;
        lines.push(format!(
            "{} ({}): |u(0)-g| {:.1e}, |u'(0)-h| {:.1e}, equation {:.1e}, iterates {:.3} <= radius {:.3}",
            s.name, r.method, r.residual_g, r.residual_h, r.residual_equation, gr.max_iterate_norm, gr.radius
        ));
    }
    ensure(ok, lines.join("; "))
}

fn galerkin_convergence() -> Check {
    let s = scenarios::population();
    let rows = galerkin_refine(&[4, 8, 16, 32], 5, 11, |m| {
        let sol = s.solve(&RunOptions { m, ..s.run_options() })?;
        Ok(RefinementLevel {
            trajectory: sol.trajectory,
            report: sol.report,
            fs: sol.fs,
        })
    })
    .map_err(err)?;
    let diffs: Vec<f64> = rows.iter().map(|r| r.diff_to_finest).collect();
    let nonincreasing = diffs.windows(2).all(|w| w[1] <= w[0]);
    let gap = diffs[2];
    let mut s_decreasing = true;
    for y in 0..5 {
        let col: Vec<f64> = rows[..3].iter().map(|r| r.s_action_diff[y]).collect();
        s_decreasing &= col.windows(2).all(|w| w[1] < w[0]);
    }
    let converged = rows.iter().all(|r| r.converged);
    ensure(
        converged && nonincreasing && gap < 1e-4 && s_decreasing,
        format!(
            "differences to m = 32: {}; S-action decreasing for all probes: {s_decreasing}",
            diffs.iter().map(|d| format!("{d:.2e}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn manufactured_solutions() -> Check {
    let s = scenarios::manufactured(Expr::parse("cos(t)*cos(x)").map_err(err)?, scenarios::undamped_neumann());
    let sol = s.solve(&s.run_options()).map_err(err)?;
    let cos_err = sol.exact_error.ok_or("missing exact error")?.sup_h;
    let mut analytic =
        scenarios::manufactured(Expr::parse("cos(t)*exp(cos(x))").map_err(err)?, scenarios::undamped_neumann());
    if let Some(m) = analytic.manufactured.as_mut() {
        m.allow_projection = true;
    }
    let at = |m: usize| -> Result<f64, String> {
        let sol = analytic.solve(&RunOptions { m, ..analytic.run_options() }).map_err(err)?;
        Ok(sol.exact_error.ok_or("missing exact error")?.sup_h)
    };
    let (e4, e8) = (at(4)?, at(8)?);
    ensure(
        sol.report.converged && cos_err < 1e-5 && e4 > 10.0 * e8,
        format!("cos t cos x: {cos_err:.2e}; analytic u*: m = 4 {e4:.2e}, m = 8 {e8:.2e}"),
    )
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let run = |name: &str, args: &[&str]| -> Result<Vec<(String, Vec<u8>)>, String> {
        let out = dir.path().join(name);
        let out_s = out.to_string_lossy().into_owned();
        let mut argv = vec!["nlwave"];
        argv.extend_from_slice(args);
        argv.extend_from_slice(&["--seed", "42", "--out", &out_s]);
        let code = nlwave::cli::main_with_args(argv);
        if code != 0 {
            return Err(format!("{name} exited with {code}"));
        }
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&out)
            .map_err(err)?
            .map(|e| {
                let e = e.expect("dir entry");
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).expect("readable"))
            })
            .collect();
        files.sort();
        Ok(files)
    };
    let solve = ["solve", "--scenario", "population", "--m", "8"];
    let converge = ["converge", "--scenario", "undamped_neumann", "--m-list", "4,8", "--intervals", "40"];
    let a = run("a", &solve)?;
    let b = run("b", &solve)?;
    let c = run("c", &converge)?;
    let d = run("d", &converge)?;
    let same = a == b && c == d;
    ensure(same, format!("{} + {} files compared byte for byte", a.len(), c.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("fundamental-solution oracle", fs_oracle),
        ("axiom suite", axiom_suite),
        ("adjoint identity", adjoint_identity),
        ("variation of constants vs direct integration", voc_vs_direct),
        ("damped representation", damped_representation),
        ("contraction engine", contraction_engine),
        ("nonlocal certification", nonlocal_certification),
        ("Galerkin convergence", galerkin_convergence),
        ("manufactured solutions", manufactured_solutions),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (k, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {}. {name}: {detail}", k + 1),
            Err(detail) => {
                println!("FAIL {}. {name}: {detail}", k + 1);
                failed.push(k + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
