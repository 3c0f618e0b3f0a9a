//! Browser front end for the `nlwave` solver.
//!
//! Every exported function takes plain arguments and returns a JSON string so
//! the page can stay framework-free. The `*_json` functions are ordinary Rust
//! and are what the native tests exercise.

use nlwave::expr::Expr;
use nlwave::forms::CertifyOptions;
use nlwave::scenarios::{self, RunOptions, Scenario, Solution};
use nlwave::spectral::DomainShape;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const MAX_FRAMES: usize = 101;
const X_SAMPLES: usize = 129;
const MAX_M: usize = 32;
const MAX_INTERVALS: usize = 200;

fn check_sizes(m: usize, intervals: usize) -> Result<(), String> {
    if m == 0 || m > MAX_M {
        return Err(format!("m must be in 1..={MAX_M}, got {m}"));
    }
    if !(2..=MAX_INTERVALS).contains(&intervals) {
        return Err(format!("intervals must be in 2..={MAX_INTERVALS}, got {intervals}"));
    }
    Ok(())
}

fn length(s: &Scenario) -> Result<f64, String> {
    match s.domain.shape {
        DomainShape::Interval { length } => Ok(length),
        DomainShape::Rectangle { .. } => Err(format!("scenario {} is two-dimensional", s.name)),
    }
}

fn options(s: &Scenario, m: usize, intervals: usize) -> RunOptions {
    let base = s.run_options();
    let h = base.h.min(s.horizon() / intervals as f64);
    RunOptions { m, intervals, h, ..base }
}

/// Sample `u(t, x)` on a uniform grid, thinning time to at most `MAX_FRAMES`.
fn frames(sol: &Solution, len: f64, exact: Option<&Expr>) -> Value {
    let traj = &sol.trajectory;
    let stride = traj.len().div_ceil(MAX_FRAMES).max(1);
    let xs: Vec<f64> = (0..X_SAMPLES).map(|i| len * i as f64 / (X_SAMPLES - 1) as f64).collect();
    let mut times = Vec::new();
    let mut u = Vec::new();
    let mut ex = Vec::new();
    for k in (0..traj.len()).step_by(stride) {
        let t = traj.times[k];
        times.push(t);
        u.push(xs.iter().map(|&x| sol.basis.evaluate_at(&traj.u[k], x, 0.0)).collect::<Vec<_>>());
        if let Some(e) = exact {
            ex.push(xs.iter().map(|&x| e.eval(t, x, 0.0)).collect::<Vec<_>>());
        }
    }
    let mut out = json!({ "x": xs, "t": times, "u": u });
    if exact.is_some() {
        out["exact"] = json!(ex);
    }
    out
}

fn report(sol: &Solution) -> Value {
    let r = &sol.report;
    json!({
        "method": r.method,
        "converged": r.converged,
        "iterations": r.iterations,
        "update_norms": r.update_norms,
        "measured_ratio": r.measured_ratio,
        "predicted_q": r.predicted_q,
        "partition": r.partition,
        "residual_equation": r.residual_equation,
        "residual_velocity": r.residual_velocity,
        "residual_g": r.residual_g,
        "residual_h": r.residual_h,
        "lambda_reached": r.lambda_reached,
        "gronwall": r.gronwall,
        "notes": r.notes,
    })
}

/// Solve a built-in scenario and return sampled frames plus the solver report.
pub fn solve_json(scenario: &str, m: usize, intervals: usize) -> Result<String, String> {
    check_sizes(m, intervals)?;
    let s = scenarios::by_name(scenario).map_err(|e| e.to_string())?;
    let len = length(&s)?;
    let sol = s.solve(&options(&s, m, intervals)).map_err(|e| e.to_string())?;
    let mut out = frames(&sol, len, None);
    out["scenario"] = json!(s.name);
    out["report"] = report(&sol);
    Ok(out.to_string())
}

/// Solve the undamped Neumann scenario with a source built from `exact` and
/// compare the result with it.
pub fn manufactured_json(exact: &str, m: usize, intervals: usize) -> Result<String, String> {
    check_sizes(m, intervals)?;
    let e = Expr::parse(exact).map_err(|e| e.to_string())?;
    let mut s = scenarios::manufactured(e.clone(), scenarios::undamped_neumann());
    if let Some(mf) = s.manufactured.as_mut() {
        mf.allow_projection = true;
    }
    let len = length(&s)?;
    let sol = s.solve(&options(&s, m, intervals)).map_err(|e| e.to_string())?;
    let mut out = frames(&sol, len, Some(&e));
    out["scenario"] = json!(s.name);
    out["report"] = report(&sol);
    out["error"] = json!(sol.exact_error);
    Ok(out.to_string())
}

/// Certify the form of a built-in scenario on `m` modes.
pub fn certify_json(scenario: &str, m: usize) -> Result<String, String> {
    check_sizes(m, 2)?;
    let s = scenarios::by_name(scenario).map_err(|e| e.to_string())?;
    let cert = s.certify(m, &CertifyOptions::default()).map_err(|e| e.to_string())?;
    Ok(json!({ "scenario": s.name, "certificate": cert }).to_string())
}

#[wasm_bindgen]
pub fn solve(scenario: &str, m: usize, intervals: usize) -> Result<String, JsValue> {
    solve_json(scenario, m, intervals).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn manufactured(exact: &str, m: usize, intervals: usize) -> Result<String, JsValue> {
    manufactured_json(exact, m, intervals).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn certify(scenario: &str, m: usize) -> Result<String, JsValue> {
    certify_json(scenario, m).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn scenario_names() -> String {
    json!(["undamped_neumann", "population", "damped"]).to_string()
}
