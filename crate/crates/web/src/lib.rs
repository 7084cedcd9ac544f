//! Browser bindings. Each operation takes the same INI text the CLI reads and
//! returns a JSON string; the `*_json` functions carry the logic so they can be
//! tested natively, the `#[wasm_bindgen]` wrappers only convert the error type.

use riccati_observers::config::parse_config;
use riccati_observers::ltv::{static_range_solvability, PeWindow};
use riccati_observers::sim::{excitation_sweep, run_scenario, RunLog};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Plots do not need every integration step.
const MAX_POINTS: usize = 1200;

fn series(log: &RunLog) -> Value {
    let stride = log.records.len().div_ceil(MAX_POINTS).max(1);
    let picked: Vec<_> = log.records.iter().step_by(stride).chain(std::iter::once(log.final_record())).collect();
    let col = |f: &dyn Fn(&riccati_observers::sim::StepRecord) -> Value| picked.iter().map(|r| f(r)).collect::<Vec<_>>();
    json!({
        "t": col(&|r| json!(r.t)),
        "x": col(&|r| json!(r.x.as_slice())),
        "xhat": col(&|r| json!(r.x_hat.as_slice())),
        "position_error": col(&|r| json!(r.position_error())),
        "bias_error": col(&|r| json!(r.bias_error())),
        "log_lyap": col(&|r| json!(finite(r.log_lyap()))),
    })
}

/// JSON has no infinities; a Lyapunov value of exactly zero becomes `null`.
fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn simulate_json(config: &str) -> Result<String, String> {
    let cfg = parse_config(config).map_err(|e| e.to_string())?;
    let (log, failure) = match run_scenario(&cfg) {
        Ok(log) => (log, None),
        Err(f) => (f.partial, Some(f.error.to_string())),
    };
    let s = log.summary();
    let out = json!({
        "variant": cfg.kind.name(),
        "trajectory": cfg.trajectory.name(),
        "sources": cfg.sources.points().iter().map(|z| z.as_slice().to_vec()).collect::<Vec<_>>(),
        "failure": failure,
        "summary": {
            "final_position_error": s.final_position_error,
            "final_bias_error": s.final_bias_error,
            "log_lyap_slope": finite(s.log_lyap_slope),
            "rate_lower_bound": finite(s.rate_bound),
            "tail_rms_position_error": s.tail_rms_position_error,
        },
        "series": series(&log),
    });
    Ok(out.to_string())
}

pub fn excitation_json(config: &str, window: f64, threshold: f64) -> Result<String, String> {
    let cfg = parse_config(config).map_err(|e| e.to_string())?;
    let w = PeWindow::new(window, (window / 600.0).min(1e-2)).map_err(|e| e.to_string())?;
    let rep = excitation_sweep(&cfg, w, threshold, false).map_err(|e| e.to_string())?;
    let conditions: Vec<Value> = rep
        .conditions
        .iter()
        .map(|c| json!({ "condition": c.kind.name(), "worst": c.worst, "worst_at": c.worst_at, "satisfied": c.satisfied }))
        .collect();
    Ok(json!({ "variant": rep.variant.name(), "window": window, "threshold": threshold,
               "conditions": conditions, "guaranteed": rep.guaranteed })
    .to_string())
}

pub fn check_static_json(config: &str) -> Result<String, String> {
    let cfg = parse_config(config).map_err(|e| e.to_string())?;
    let body = cfg.trajectory.position(0.0);
    let s = static_range_solvability(&cfg.sources, &body).map_err(|e| e.to_string())?;
    Ok(json!({
        "degenerate": s.has_solution_w,
        "w": s.w.as_slice(),
        "relative_residual": s.relative_residual,
        "body": body.as_slice(),
    })
    .to_string())
}

#[wasm_bindgen]
pub fn simulate(config: &str) -> Result<String, JsValue> {
    simulate_json(config).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn excitation(config: &str, window: f64, threshold: f64) -> Result<String, JsValue> {
    excitation_json(config, window, threshold).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn check_static(config: &str) -> Result<String, JsValue> {
    check_static_json(config).map_err(|e| JsValue::from_str(&e))
}
