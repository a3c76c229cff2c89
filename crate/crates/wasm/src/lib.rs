//! Browser bindings. Every operation takes and returns JSON strings; the
//! `*_json` functions are plain Rust so they can be tested natively.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use faastrain::experiments::sync_scaling;
use faastrain::optimizer::{
    expected_improvement, search, DeploymentConfig, GoalMode, GpModel, ObjectiveModel, Observation,
    Probe, ProbeError, SearchLimits, SearchSpace, UserGoal,
};
use faastrain::storage::StoreParams;

#[derive(Debug, Deserialize)]
#[serde(default)]
pub struct SyncRequest {
    pub seed: u64,
    pub workers: Vec<usize>,
    pub length: usize,
    pub latency_ms: f64,
    pub bandwidth_mb_s: f64,
}

impl Default for SyncRequest {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: vec![2, 4, 8, 16, 32, 64],
            length: 10_000,
            latency_ms: 1.0,
            bandwidth_mb_s: 1000.0,
        }
    }
}

#[derive(Debug, Serialize)]
struct SyncPoint {
    method: &'static str,
    workers: usize,
    ul: f64,
    dl_shard: f64,
    ul_aggr: f64,
    dl_grad: f64,
    total: f64,
}

/// Per-step synchronization time of both methods for each worker count.
pub fn sync_scaling_json(request: &str) -> Result<String, String> {
    let r: SyncRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    if r.workers.iter().any(|&n| n == 0 || n > 256) || r.length == 0 || r.length > 1_000_000 {
        return Err("workers must be in 1..=256 and length in 1..=1000000".into());
    }
    let store = StoreParams {
        base_latency: r.latency_ms / 1000.0,
        bandwidth: r.bandwidth_mb_s * 1e6,
        ..StoreParams::parameter_store()
    };
    store.validate()?;
    let rows = sync_scaling(r.seed, &store, &r.workers, r.length).map_err(|e| e.to_string())?;
    let points: Vec<SyncPoint> = rows
        .iter()
        .map(|row| SyncPoint {
            method: row.method,
            workers: row.workers,
            ul: row.timing.ul_shard + row.timing.ul_grad,
            dl_shard: row.timing.dl_shard,
            ul_aggr: row.timing.ul_aggr,
            dl_grad: row.timing.dl_grad,
            total: row.timing.total(),
        })
        .collect();
    serde_json::to_string(&points).map_err(|e| e.to_string())
}

/// Toy deployment space shown in the demo: per-iteration time falls with
/// total memory until coordination overhead per worker takes over.
pub fn demo_space() -> SearchSpace {
    SearchSpace {
        min_workers: 1,
        max_workers: 20,
        min_memory: 512,
        max_memory: 10240,
        memory_step: 512,
    }
}

pub fn demo_surface(c: DeploymentConfig) -> (f64, f64) {
    let (w, m) = (c.workers as f64, c.memory_mb as f64 / 1024.0);
    let time = 400.0 / (w * m) + 0.8 * w;
    (time, time * w * m * 1e-3)
}

#[derive(Debug, Deserialize)]
pub struct SurfaceRequest {
    /// Probed points as (workers, memory_mb).
    pub probes: Vec<(u32, u32)>,
}

#[derive(Debug, Serialize)]
struct Cell {
    workers: u32,
    memory_mb: u32,
    truth: f64,
    mean: f64,
    sd: f64,
    ei: f64,
}

#[derive(Debug, Serialize)]
struct SurfaceResponse {
    cells: Vec<Cell>,
    next: Option<(u32, u32)>,
    best: Option<(u32, u32, f64)>,
}

/// Fits the optimizer's surrogate to the probed points of the toy surface
/// (fastest goal) and returns its posterior and expected improvement on
/// every grid cell. Values are iteration times; the surrogate works on
/// their logarithm, as the optimizer does.
pub fn gp_surface_json(request: &str) -> Result<String, String> {
    let r: SurfaceRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let space = demo_space();
    let probed: Vec<DeploymentConfig> = r
        .probes
        .iter()
        .map(|&(w, m)| DeploymentConfig::new(w, m))
        .collect();
    if let Some(c) = probed.iter().find(|c| !space.contains(c)) {
        return Err(format!("{c} is outside the demo space"));
    }
    let x: Vec<[f64; 2]> = probed.iter().map(|c| space.normalize(c)).collect();
    let y: Vec<f64> = probed.iter().map(|&c| demo_surface(c).0.ln()).collect();
    let gp = if y.is_empty() {
        GpModel::prior(0.0, 1.0)
    } else {
        GpModel::fit(&x, &y).map_err(|e| e.to_string())?
    };
    let y_best = y.iter().copied().fold(f64::INFINITY, f64::min);
    let mut cells = Vec::with_capacity(space.len());
    let mut next: Option<(DeploymentConfig, f64)> = None;
    for c in space.enumerate() {
        let (mu, sd) = gp.predict(&space.normalize(&c));
        let ei = if y.is_empty() {
            0.0
        } else {
            expected_improvement(mu, sd, y_best)
        };
        if !probed.contains(&c) && next.is_none_or(|(_, e)| ei > e) {
            next = Some((c, ei));
        }
        cells.push(Cell {
            workers: c.workers,
            memory_mb: c.memory_mb,
            truth: demo_surface(c).0,
            mean: mu.exp(),
            sd,
            ei,
        });
    }
    let best = probed
        .iter()
        .map(|&c| (c, demo_surface(c).0))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(c, t)| (c.workers, c.memory_mb, t));
    let response = SurfaceResponse {
        cells,
        next: next.map(|(c, _)| (c.workers, c.memory_mb)),
        best,
    };
    serde_json::to_string(&response).map_err(|e| e.to_string())
}

#[derive(Debug, Deserialize)]
#[serde(default)]
pub struct TraceRequest {
    pub seed: u64,
    pub k_max: usize,
    /// "fastest", "deadline" or "budget".
    pub mode: String,
    pub limit: f64,
}

impl Default for TraceRequest {
    fn default() -> Self {
        Self {
            seed: 0,
            k_max: 30,
            mode: "fastest".into(),
            limit: 40.0,
        }
    }
}

#[derive(Debug, Serialize)]
struct TraceStep {
    workers: u32,
    memory_mb: u32,
    time: f64,
    cost: f64,
    feasible: bool,
    incumbent: f64,
}

#[derive(Debug, Serialize)]
struct TraceResponse {
    steps: Vec<TraceStep>,
    best: (u32, u32),
    best_objective: f64,
    optimum: (u32, u32),
    optimum_objective: f64,
    stop: String,
}

/// Runs a full search on the toy surface and compares it with brute force.
pub fn optimizer_trace_json(request: &str) -> Result<String, String> {
    let r: TraceRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let goal = match r.mode.as_str() {
        "fastest" => UserGoal::fastest(),
        "deadline" => UserGoal::deadline(r.limit),
        "budget" => UserGoal::budget(r.limit),
        m => return Err(format!("unknown mode {m:?}")),
    };
    goal.validate().map_err(|e| e.to_string())?;
    let space = demo_space();
    let objective = ObjectiveModel::new(goal, 1.0);
    let limits = SearchLimits {
        k_max: r.k_max.clamp(1, 200),
        seed: r.seed,
        ..SearchLimits::default()
    };
    let mut profiler = |c: DeploymentConfig| -> Result<Probe, ProbeError> {
        let (time, cost) = demo_surface(c);
        Ok(Probe {
            iter_time: time,
            iter_cost: cost,
            wall_time: 0.0,
            cost: 0.0,
        })
    };
    let out =
        search(&objective, &mut profiler, &space, &limits, &[], &[]).map_err(|e| e.to_string())?;

    let mut all: Vec<Observation> = space
        .enumerate()
        .into_iter()
        .map(|c| {
            let (t, k) = demo_surface(c);
            Observation::new(c, t, k)
        })
        .collect();
    objective.evaluate(&mut all);
    let optimum = all
        .iter()
        .min_by(|a, b| {
            b.feasible
                .cmp(&a.feasible)
                .then(a.objective.total_cmp(&b.objective))
        })
        .ok_or("empty space")?;
    let raw = |o: &Observation| {
        if goal.mode == GoalMode::Deadline {
            o.iter_cost
        } else {
            o.iter_time
        }
    };

    let steps = out
        .observations
        .iter()
        .zip(&out.incumbents)
        .map(|(o, &inc)| TraceStep {
            workers: o.config.workers,
            memory_mb: o.config.memory_mb,
            time: o.iter_time,
            cost: o.iter_cost,
            feasible: o.feasible,
            incumbent: inc,
        })
        .collect();
    let best = out
        .observations
        .iter()
        .find(|o| o.config == out.best)
        .ok_or("no best observation")?;
    let response = TraceResponse {
        steps,
        best: (out.best.workers, out.best.memory_mb),
        best_objective: raw(best),
        optimum: (optimum.config.workers, optimum.config.memory_mb),
        optimum_objective: raw(optimum),
        stop: format!("{:?}", out.stop),
    };
    serde_json::to_string(&response).map_err(|e| e.to_string())
}

fn to_js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = syncScaling)]
pub fn sync_scaling_js(request: &str) -> Result<String, JsValue> {
    to_js(sync_scaling_json(request))
}

#[wasm_bindgen(js_name = gpSurface)]
pub fn gp_surface_js(request: &str) -> Result<String, JsValue> {
    to_js(gp_surface_json(request))
}

#[wasm_bindgen(js_name = optimizerTrace)]
pub fn optimizer_trace_js(request: &str) -> Result<String, JsValue> {
    to_js(optimizer_trace_json(request))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn sync_scaling_returns_both_methods() {
        let v: Value =
            serde_json::from_str(&sync_scaling_json(r#"{"workers":[4,8],"length":1000}"#).unwrap())
                .unwrap();
        let rows = v.as_array().unwrap();
        assert_eq!(rows.len(), 4);
        let dl = |method: &str, n: u64| {
            rows.iter()
                .find(|r| r["method"] == method && r["workers"] == n)
                .unwrap()["dl_grad"]
                .as_f64()
                .unwrap()
        };
        assert!(dl("centralized", 8) > dl("hierarchical", 8));
        assert!(sync_scaling_json(r#"{"workers":[0]}"#).is_err());
        assert!(sync_scaling_json("nope").is_err());
    }

    #[test]
    fn surface_proposes_an_unprobed_cell() {
        let v: Value = serde_json::from_str(
            &gp_surface_json(r#"{"probes":[[1,512],[20,10240],[5,4096]]}"#).unwrap(),
        )
        .unwrap();
        assert_eq!(v["cells"].as_array().unwrap().len(), 400);
        let next = v["next"].as_array().unwrap();
        let next = (next[0].as_u64().unwrap(), next[1].as_u64().unwrap());
        assert!(![(1, 512), (20, 10240), (5, 4096)].contains(&next));
        // the surrogate interpolates probed points
        let cell = v["cells"]
            .as_array()
            .unwrap()
            .iter()
            .find(|c| c["workers"] == 5 && c["memory_mb"] == 4096)
            .unwrap();
        let (mean, truth) = (
            cell["mean"].as_f64().unwrap(),
            cell["truth"].as_f64().unwrap(),
        );
        assert!((mean - truth).abs() / truth < 1e-4);
        assert!(gp_surface_json(r#"{"probes":[[99,512]]}"#).is_err());
        assert!(gp_surface_json(r#"{"probes":[]}"#).is_ok());
    }

    #[test]
    fn trace_reaches_the_optimum_neighbourhood() {
        let v: Value =
            serde_json::from_str(&optimizer_trace_json(r#"{"seed":1}"#).unwrap()).unwrap();
        let best = v["best_objective"].as_f64().unwrap();
        let opt = v["optimum_objective"].as_f64().unwrap();
        assert!(best <= opt * 1.05, "{best} vs {opt}");
        assert!(v["steps"].as_array().unwrap().len() <= 30);
        assert!(optimizer_trace_json(r#"{"mode":"cheapest"}"#).is_err());
    }
}
