//! Desk-scale experiment plumbing: synthetic scenes, training, evaluation,
//! run manifests and selection overlays.

pub mod eval;
pub mod manifest;
pub mod netpbm;
pub mod overlay;
pub mod scene;
pub mod train;

use std::path::Path;

use crate::error::Result;
use crate::model::Model;
use eval::{evaluate, EvalOptions, Evaluation};
use manifest::{params_digest, RunConfig, RunManifest, Split};
use scene::Scene;

/// Encoded overlay files of the first `count` scenes, named by scene and
/// round.
pub fn render_overlays(model: &Model, corpus: &[Scene], ev: &Evaluation, count: usize) -> Result<Vec<(String, Vec<u8>)>> {
    let cfg = model.config();
    let mut files = Vec::new();
    for res in ev.scenes.iter().take(count) {
        let masks = overlay::selection_masks(cfg.image_height, cfg.image_width, &res.trace)?;
        for (r, m) in masks.iter().enumerate() {
            files.push((format!("scene{:04}_round{}.ppm", res.index, r + 1), netpbm::encode_ppm(m)?));
        }
        let composite = overlay::cover_composite(&corpus[res.index].image, &res.trace)?;
        files.push((format!("scene{:04}_cover.ppm", res.index), netpbm::encode_ppm(&composite)?));
    }
    Ok(files)
}

/// Evaluates `model` on a split, writes overlays and `manifest.json` under
/// `out` when given, and returns the manifest.
pub fn run_eval(model: &Model, run: &RunConfig, split: Split, opts: &EvalOptions, seed: u64, overlays: usize, out: Option<&Path>) -> Result<RunManifest> {
    let corpus = run.data.corpus(&split)?;
    let ev = evaluate(model, &corpus, opts)?;
    let files = render_overlays(model, &corpus, &ev, overlays)?;
    let manifest = RunManifest {
        config_digest: model.config().digest_hex(),
        params_digest: params_digest(model.store()),
        seed,
        dataset: run.data.descriptor(split),
        policy: opts.policy.clone(),
        thresholds: opts.thresholds,
        connectivity: model.config().connectivity,
        metrics: ev.metrics,
        overlays: files.iter().map(|(n, _)| n.clone()).collect(),
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in &files {
            std::fs::write(dir.join(name), bytes)?;
        }
        std::fs::write(dir.join("manifest.json"), manifest.to_json())?;
    }
    Ok(manifest)
}
