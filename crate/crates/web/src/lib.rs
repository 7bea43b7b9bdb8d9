//! Browser demo: simulate a seeded crossing with a baseline policy, render
//! its log as SVG and score a batch of cases, all client side.

use crowdnav::episode_log::EpisodeTrace;
use crowdnav::eval::{eval_seeds, render_svg, run_policy_eval, EvalPolicy, Evaluator};
use crowdnav::pedestrian::OrcaParams;
use crowdnav::scenario::ScenarioConfig;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Cap on cases per evaluation so the page stays responsive.
pub const MAX_CASES: usize = 200;

#[derive(Debug, Serialize)]
pub struct Episode {
    pub status: String,
    pub steps: usize,
    pub log: String,
    pub svg: String,
}

fn baseline(config_json: &str, policy: &str) -> Result<Evaluator, String> {
    let scenario = ScenarioConfig::from_json_str(config_json).map_err(|e| e.to_string())?;
    let policy: EvalPolicy = policy.parse().map_err(|e: crowdnav::Error| e.to_string())?;
    if policy.is_learned() {
        return Err(format!(
            "the demo runs baselines only; {policy} needs a trained checkpoint"
        ));
    }
    Evaluator::new(policy, scenario, OrcaParams::default(), None).map_err(|e| e.to_string())
}

pub fn simulate_episode(config_json: &str, policy: &str, seed: u64) -> Result<Episode, String> {
    let trace = baseline(config_json, policy)?
        .run_episode(seed)
        .map_err(|e| e.to_string())?;
    Ok(Episode {
        status: format!("{:?}", trace.status()),
        steps: trace.steps.len(),
        log: trace.to_jsonl(),
        svg: render_svg(&trace),
    })
}

pub fn render_log(log: &str) -> Result<String, String> {
    EpisodeTrace::parse(log)
        .map(|t| render_svg(&t))
        .map_err(|e| e.to_string())
}

pub fn evaluate_cases(
    config_json: &str,
    policy: &str,
    cases: usize,
    seed: u64,
) -> Result<String, String> {
    if cases == 0 || cases > MAX_CASES {
        return Err(format!("cases must lie in 1..={MAX_CASES}"));
    }
    let ev = baseline(config_json, policy)?;
    let out = run_policy_eval(&ev, &eval_seeds(seed, cases), None).map_err(|e| e.to_string())?;
    serde_json::to_string(&out.report).map_err(|e| e.to_string())
}

/// Runs one episode; returns `{status, steps, log, svg}` as JSON.
#[wasm_bindgen]
pub fn simulate(config_json: &str, policy: &str, seed: u32) -> Result<String, JsValue> {
    let ep = simulate_episode(config_json, policy, u64::from(seed))
        .map_err(|e| JsValue::from_str(&e))?;
    serde_json::to_string(&ep).map_err(|e| JsValue::from_str(&e.to_string()))
}

/// SVG for a pasted JSONL log.
#[wasm_bindgen]
pub fn render(log: &str) -> Result<String, JsValue> {
    render_log(log).map_err(|e| JsValue::from_str(&e))
}

/// Aggregate report over `cases` seeded episodes, as JSON.
#[wasm_bindgen]
pub fn evaluate(config_json: &str, policy: &str, cases: u32, seed: u32) -> Result<String, JsValue> {
    evaluate_cases(config_json, policy, cases as usize, u64::from(seed))
        .map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"{"n_robots": 2, "n_humans": 4}"#;

    #[test]
    fn simulate_then_render_matches() {
        let ep = simulate_episode(SMALL, "orca", 3).unwrap();
        assert!(ep.steps > 0);
        assert_eq!(render_log(&ep.log).unwrap(), ep.svg);
        assert_eq!(ep.svg.matches("<polyline").count(), 6);
    }

    #[test]
    fn evaluate_reports_json() {
        let text = evaluate_cases(SMALL, "random", 5, 1).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["cases"], 5);
        assert_eq!(text, evaluate_cases(SMALL, "random", 5, 1).unwrap());
    }

    #[test]
    fn bad_inputs_are_reported() {
        assert!(simulate_episode(SMALL, "samarl", 0)
            .unwrap_err()
            .contains("checkpoint"));
        assert!(simulate_episode(r#"{"n_robots": 0}"#, "orca", 0).is_err());
        assert!(evaluate_cases(SMALL, "orca", 0, 0).is_err());
        assert!(render_log("{}").unwrap_err().contains("line 1"));
    }
}
