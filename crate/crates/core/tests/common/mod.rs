#![allow(dead_code)]

use mixres::config::{EncoderConfig, ROUNDS};
use mixres::geometry::coarse_grid;
use mixres::harness::scene::{corpus_scene, Scene, SceneSpec};
use mixres::model::Model;
use mixres::stage1::{ForwardOptions, Sample};
use mixres::tensor::Tape;
use rand::Rng;

pub fn nano_scenes(seed: u64, count: usize) -> Vec<Scene> {
    let cfg = EncoderConfig::nano();
    let spec = SceneSpec::desk(cfg.image_height, cfg.image_width, cfg.num_classes as u16);
    (0..count as u64).map(|i| corpus_scene(seed, i, &spec).unwrap()).collect()
}

pub fn samples(scenes: &[Scene], labels: bool) -> Vec<Sample<'_>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| Sample { id: i as u64, image: &s.image, labels: labels.then_some(&s.labels) })
        .collect()
}

/// Random per-round selections, each frontier token kept with probability `p`.
pub fn random_selection(rng: &mut impl Rng, height: u32, width: u32, p: f64) -> [Vec<usize>; ROUNDS] {
    let mut set = coarse_grid(height, width).unwrap();
    let mut out: [Vec<usize>; ROUNDS] = Default::default();
    for sel in out.iter_mut() {
        let frontier = set.frontier().to_vec();
        *sel = (0..frontier.len()).filter(|_| rng.gen_bool(p)).collect();
        let parents: Vec<_> = sel.iter().map(|&i| frontier[i]).collect();
        set.allocate(&parents).unwrap();
    }
    out
}

pub fn forced(selections: Vec<[Vec<usize>; ROUNDS]>) -> ForwardOptions {
    ForwardOptions { forced: Some(selections), ..ForwardOptions::default() }
}

/// Total loss of a labeled forward pass.
pub fn loss(model: &Model, batch: &[Sample], opts: &ForwardOptions) -> f64 {
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, batch, opts).unwrap();
    tape.value(pass.loss.unwrap()).data()[0]
}

/// Max absolute difference between two equally long slices.
pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
