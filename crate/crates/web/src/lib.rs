//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Three things are exposed: an anytime session over a loaded checkpoint
//! (start, expand, reduce with a live MAC meter), the per-level MAC table
//! of that checkpoint, and a replay of the small gated construction.

use std::path::Path;
use std::rc::Rc;

use serde_json::{json, Value};
use steppingnet::anytime::InferenceSession;
use steppingnet::cli::Checkpoint;
use steppingnet::construct::{construct, gating_toy};
use steppingnet::data::{BatchStream, Normalization};
use steppingnet::tensor::RngStream;
use steppingnet::Model;
use wasm_bindgen::prelude::*;

/// A checkpoint plus at most one live session.
pub struct Demo {
    model: Rc<Model>,
    norm: Normalization,
    original_macs: u64,
    session: Option<InferenceSession<Rc<Model>>>,
}

impl Demo {
    pub fn load(manifest: &str, weights: &[u8]) -> Result<Self, String> {
        let ck = Checkpoint::from_parts(manifest, weights, Path::new("upload")).map_err(|e| e.to_string())?;
        let model = ck.model().map_err(|e| e.to_string())?;
        Ok(Self {
            model: Rc::new(model),
            norm: ck.manifest.normalization,
            original_macs: ck.manifest.original_macs,
            session: None,
        })
    }

    pub fn subnets(&self) -> usize {
        self.model.subnets()
    }

    pub fn input_len(&self) -> usize {
        self.model.plan.input_len
    }

    pub fn mac_table(&self) -> Value {
        let rows: Vec<Value> = (1..=self.model.subnets())
            .map(|k| {
                let m = self.model.mac_count(k);
                json!({ "level": k, "mac_count": m, "mac_ratio": m as f64 / self.original_macs as f64 })
            })
            .collect();
        json!({ "original_macs": self.original_macs, "levels": rows })
    }

    fn state(&self, delta: u64) -> Result<Value, String> {
        let s = self.session.as_ref().ok_or("no session; call start first")?;
        let (prediction, p) = s.predict();
        Ok(json!({
            "level": s.level(),
            "cached_level": s.cached_level(),
            "prediction": prediction,
            "probabilities": p,
            "meter": s.meter(),
            "step_macs": delta,
            "mac_count_level": self.model.mac_count(s.level()),
        }))
    }

    /// `pixels` are raw intensities in `[0, 1]`; standardisation is applied here.
    pub fn start(&mut self, pixels: &[f32], level: usize) -> Result<Value, String> {
        if pixels.len() != self.input_len() {
            return Err(format!("expected {} pixels, got {}", self.input_len(), pixels.len()));
        }
        let mut x = pixels.to_vec();
        self.norm.apply_image(&mut x);
        let (s, _) = InferenceSession::start(Rc::clone(&self.model), &x, level).map_err(|e| e.to_string())?;
        let meter = s.meter();
        self.session = Some(s);
        self.state(meter)
    }

    pub fn expand(&mut self, level: usize) -> Result<Value, String> {
        let s = self.session.as_mut().ok_or("no session; call start first")?;
        let before = s.meter();
        s.expand(level).map_err(|e| e.to_string())?;
        let delta = s.meter() - before;
        self.state(delta)
    }

    pub fn reduce(&mut self, level: usize) -> Result<Value, String> {
        let s = self.session.as_mut().ok_or("no session; call start first")?;
        s.reduce(level).map_err(|e| e.to_string())?;
        self.state(0)
    }
}

/// Per-iteration log of the small gated construction: MACs seen by the
/// gates, whether each gate was open and how many units crossed it.
pub fn gating_log(seed: u64) -> Result<Value, String> {
    let (mut model, config, data) = gating_toy(seed);
    let mut batches = BatchStream::new(&data, 16, RngStream::new(seed).fork(2));
    let report = construct(&mut model, &config, &mut batches).map_err(|e| e.to_string())?;
    let iterations: Vec<Value> = report
        .iterations
        .iter()
        .map(|it| {
            json!({
                "iteration": it.iteration,
                "macs": it.macs,
                "macs_after": it.macs_after,
                "gate_open": it.boundaries.iter().map(|b| b.gate_open).collect::<Vec<_>>(),
                "moved_units": it.boundaries.iter().map(|b| b.moved_units).collect::<Vec<_>>(),
                "levels": it.levels,
            })
        })
        .collect();
    Ok(json!({
        "budgets": report.budgets,
        "initial_macs": report.initial_macs,
        "quantum": report.quantum,
        "budgets_met": report.budgets_met,
        "iterations": iterations,
    }))
}

fn js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub struct WebDemo(Demo);

#[wasm_bindgen]
impl WebDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(manifest: &str, weights: &[u8]) -> Result<WebDemo, JsValue> {
        Demo::load(manifest, weights).map(WebDemo).map_err(|e| JsValue::from_str(&e))
    }

    pub fn subnets(&self) -> usize {
        self.0.subnets()
    }

    pub fn input_len(&self) -> usize {
        self.0.input_len()
    }

    /// JSON: per-level MAC counts and ratios to the original network.
    pub fn mac_table(&self) -> String {
        self.0.mac_table().to_string()
    }

    pub fn start(&mut self, pixels: &[f32], level: usize) -> Result<String, JsValue> {
        js(self.0.start(pixels, level))
    }

    pub fn expand(&mut self, level: usize) -> Result<String, JsValue> {
        js(self.0.expand(level))
    }

    pub fn reduce(&mut self, level: usize) -> Result<String, JsValue> {
        js(self.0.reduce(level))
    }
}

/// JSON log of the small gated construction for the given seed.
#[wasm_bindgen]
pub fn gating_replay(seed: u32) -> Result<String, JsValue> {
    js(gating_log(seed as u64))
}
