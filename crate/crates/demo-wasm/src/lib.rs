//! Browser bindings: synthesize a scene, allocate tokens at chosen
//! thresholds, and inspect the selection overlays. Images cross the boundary
//! as RGBA bytes and statistics as JSON strings.

use mixres::boundary::{boundary_map, Connectivity};
use mixres::config::Policy;
use mixres::flops::{count_forward, count_trace, dense_counts};
use mixres::geometry::FINEST_SIDE;
use mixres::harness::manifest::{params_digest, RunConfig};
use mixres::harness::overlay::{cover_composite, selection_masks};
use mixres::harness::scene::{generate_scene, palette, Scene, SceneSpec};
use mixres::image::Image;
use mixres::model::Model;
use mixres::serialize::load_model;
use mixres::stage1::{AllocationTrace, ForwardOptions, Sample};
use mixres::tensor::Tape;
use serde_json::json;
use wasm_bindgen::prelude::wasm_bindgen;

type JsResult<T> = Result<T, String>;

fn rgba(img: &Image) -> Vec<u8> {
    img.data()
        .chunks_exact(3)
        .flat_map(|p| [p[0], p[1], p[2]].map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8).into_iter().chain([255]))
        .collect()
}

struct Allocation {
    trace: AllocationTrace,
    predictions: Vec<u16>,
}

#[wasm_bindgen]
pub struct Demo {
    model: Model,
    spec: SceneSpec,
    scene: Scene,
    last: Option<Allocation>,
}

#[wasm_bindgen]
impl Demo {
    /// Desk setup with a freshly initialized model.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> JsResult<Demo> {
        let seed = u64::from(seed);
        let run = RunConfig::desk();
        let model = Model::new(run.encoder, seed).map_err(|e| e.to_string())?;
        let spec = run.data.scene;
        let scene = generate_scene(seed, &spec).map_err(|e| e.to_string())?;
        Ok(Demo { model, spec, scene, last: None })
    }

    pub fn width(&self) -> u32 {
        self.spec.width
    }

    pub fn height(&self) -> u32 {
        self.spec.height
    }

    /// Replaces the model with trained parameters. `run_json` is the run
    /// configuration they were trained with; empty means the desk setup.
    pub fn load_params(&mut self, bytes: &[u8], run_json: &str) -> JsResult<String> {
        let run = if run_json.trim().is_empty() { RunConfig::desk() } else { RunConfig::from_json(run_json).map_err(|e| e.to_string())? };
        self.model = load_model(run.encoder, bytes).map_err(|e| e.to_string())?;
        self.spec = run.data.scene;
        self.scene = generate_scene(0, &self.spec).map_err(|e| e.to_string())?;
        self.last = None;
        Ok(json!({ "params_digest": params_digest(self.model.store()), "model": self.model.config().name }).to_string())
    }

    /// Synthesizes the scene for `seed` and returns its description.
    pub fn generate(&mut self, seed: u32) -> JsResult<String> {
        self.scene = generate_scene(u64::from(seed), &self.spec).map_err(|e| e.to_string())?;
        self.last = None;
        let bmap = boundary_map(&self.scene.labels, self.model.config().connectivity);
        Ok(json!({
            "seed": seed,
            "regions": self.scene.regions.len(),
            "uniform": self.scene.is_uniform(),
            "boundary_fraction": bmap.fraction(),
        })
        .to_string())
    }

    pub fn scene_rgba(&self) -> Vec<u8> {
        rgba(&self.scene.image)
    }

    /// The scene dimmed, with boundary pixels of the given connectivity (4
    /// or 8) in white.
    pub fn boundary_rgba(&self, connectivity: u8) -> JsResult<Vec<u8>> {
        let conn = Connectivity::try_from(connectivity).map_err(|e| e.to_string())?;
        let bmap = boundary_map(&self.scene.labels, conn);
        let mut img = self.scene.image.clone();
        for y in 0..img.height() {
            for x in 0..img.width() {
                let p = img.pixel(y, x);
                img.set_pixel(y, x, if bmap.get(y, x) { [1.0; 3] } else { p.map(|c| 0.35 * c) });
            }
        }
        Ok(rgba(&img))
    }

    /// Runs the encoder on the current scene. `source` picks what drives the
    /// splits: `model` (predicted scores), `oracle` (ground-truth boundary
    /// fractions) or `dense` (everything).
    pub fn allocate(&mut self, tau1: f64, tau2: f64, tau3: f64, source: &str) -> JsResult<String> {
        let policy = match source {
            "model" => Policy::Adaptive,
            "oracle" => Policy::OracleMix { rate: 1.0, seed: 0 },
            "dense" => Policy::Dense,
            other => return Err(format!("unknown source {other:?}")),
        };
        let thresholds = [tau1, tau2, tau3];
        if thresholds.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err("thresholds must be positive".into());
        }
        let opts = ForwardOptions { policy: Some(policy), thresholds: Some(thresholds), ..ForwardOptions::default() };
        let batch = [Sample { id: 0, image: &self.scene.image, labels: Some(&self.scene.labels) }];
        let mut tape = Tape::new();
        let pass = self.model.forward(&mut tape, &batch, &opts).map_err(|e| e.to_string())?;
        let trace = pass.traces[0].clone();
        let predictions = pass.predictions(&tape, 0);
        let cfg = self.model.config();
        let flops = count_trace(cfg, &trace).total;
        let dense = count_forward(cfg, dense_counts(cfg)).total;
        let cw = cfg.image_width / FINEST_SIDE;
        let labels = &self.scene.labels;
        let correct = (0..cfg.image_height)
            .flat_map(|y| (0..cfg.image_width).map(move |x| (y, x)))
            .filter(|&(y, x)| predictions[((y / FINEST_SIDE) * cw + x / FINEST_SIDE) as usize] == labels.get(y, x))
            .count();
        let rounds: Vec<_> = trace.rounds.iter().map(|r| json!({ "candidates": r.candidates, "selected": r.k() })).collect();
        let stats = json!({
            "counts": trace.counts(),
            "rounds": rounds,
            "flops": flops,
            "dense_flops": dense,
            "flops_ratio": flops as f64 / dense as f64,
            "pixel_accuracy": correct as f64 / (cfg.image_height * cfg.image_width) as f64,
        });
        self.last = Some(Allocation { trace, predictions });
        Ok(stats.to_string())
    }

    fn allocation(&self) -> JsResult<&Allocation> {
        self.last.as_ref().ok_or_else(|| "no allocation yet".to_string())
    }

    /// The scene tinted by the level of each pixel's finest token.
    pub fn cover_rgba(&self) -> JsResult<Vec<u8>> {
        let img = cover_composite(&self.scene.image, &self.allocation()?.trace).map_err(|e| e.to_string())?;
        Ok(rgba(&img))
    }

    /// White where round `round` (1-based) split a token.
    pub fn mask_rgba(&self, round: usize) -> JsResult<Vec<u8>> {
        let masks = selection_masks(self.spec.height, self.spec.width, &self.allocation()?.trace).map_err(|e| e.to_string())?;
        let m = masks.get(round.wrapping_sub(1)).ok_or_else(|| format!("round {round} out of range"))?;
        Ok(rgba(m))
    }

    /// Sanity-head class per finest cell, in class colors.
    pub fn prediction_rgba(&self) -> JsResult<Vec<u8>> {
        let a = self.allocation()?;
        let cw = self.spec.width / FINEST_SIDE;
        let mut img = Image::zeros(self.spec.height, self.spec.width);
        for y in 0..self.spec.height {
            for x in 0..self.spec.width {
                img.set_pixel(y, x, palette(a.predictions[((y / FINEST_SIDE) * cw + x / FINEST_SIDE) as usize]));
            }
        }
        Ok(rgba(&img))
    }
}
