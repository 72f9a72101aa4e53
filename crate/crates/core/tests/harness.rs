use mixres::config::{EncoderConfig, Policy};
use mixres::geometry::coarse_grid;
use mixres::harness::eval::{evaluate, EvalOptions};
use mixres::harness::manifest::{params_digest, RunConfig, Split};
use mixres::harness::netpbm::{read_pgm, read_ppm, write_pgm16};
use mixres::harness::run_eval;
use mixres::harness::scene::corpus_scene;
use mixres::harness::train::{train, TrainConfig};
use mixres::model::Model;
use mixres::Error;

fn small_run(train_scenes: usize, heldout_scenes: usize) -> RunConfig {
    let mut run = RunConfig::desk();
    run.data.train_scenes = train_scenes;
    run.data.heldout_scenes = heldout_scenes;
    run
}

#[test]
fn zero_learning_rate_keeps_the_loss_constant() {
    let run = small_run(4, 0);
    let corpus = run.data.corpus(&Split::Train).unwrap();
    let mut model = Model::new(EncoderConfig::nano(), 3).unwrap();
    let before = params_digest(model.store());
    let cfg = TrainConfig { steps: 3, batch_size: 4, lr: 0.0, lr_final: 0.0, ..TrainConfig::default() };
    let log = train(&mut model, &corpus, &cfg, 1, |_| {}).unwrap();
    assert_eq!(log.steps.len(), 3);
    assert!(log.steps.iter().all(|s| s.loss == log.steps[0].loss));
    assert_eq!(params_digest(model.store()), before);
}

#[test]
fn training_reduces_the_loss() {
    let run = small_run(16, 0);
    let corpus = run.data.corpus(&Split::Train).unwrap();
    let mut model = Model::new(EncoderConfig::nano(), 3).unwrap();
    let cfg = TrainConfig { steps: 60, batch_size: 4, ..TrainConfig::default() };
    let log = train(&mut model, &corpus, &cfg, 1, |_| {}).unwrap();
    let mean = |s: &[mixres::harness::train::StepLog]| s.iter().map(|l| l.loss).sum::<f64>() / s.len() as f64;
    assert!(mean(&log.steps[50..]) < mean(&log.steps[..10]));
}

#[test]
fn non_finite_input_reports_divergence() {
    let run = small_run(2, 0);
    let mut corpus = run.data.corpus(&Split::Train).unwrap();
    for s in &mut corpus {
        s.image.set_pixel(5, 5, [f64::NAN; 3]);
    }
    let mut model = Model::new(EncoderConfig::nano(), 3).unwrap();
    let cfg = TrainConfig { steps: 2, batch_size: 2, ..TrainConfig::default() };
    assert!(matches!(train(&mut model, &corpus, &cfg, 1, |_| {}), Err(Error::Divergence { step: 0, .. })));
}

#[test]
fn empty_corpus_is_rejected() {
    let mut model = Model::new(EncoderConfig::nano(), 3).unwrap();
    assert!(matches!(train(&mut model, &[], &TrainConfig::default(), 1, |_| {}), Err(Error::Input(_))));
}

#[test]
fn uniform_corpus_drives_scores_below_the_first_threshold() {
    let mut run = small_run(64, 16);
    run.data.scene.uniform_fraction = 1.0;
    let corpus = run.data.corpus(&Split::Train).unwrap();
    let held = run.data.corpus(&Split::Heldout).unwrap();
    let mut model = Model::new(EncoderConfig::nano(), 1).unwrap();
    let cfg = TrainConfig { steps: 300, ..TrainConfig::default() };
    train(&mut model, &corpus, &cfg, 2, |_| {}).unwrap();
    let ev = evaluate(&model, &held, &EvalOptions::for_model(&model)).unwrap();
    let tau = model.config().thresholds[0];
    for s in &ev.scenes {
        let scores = &s.trace.rounds[0].scores;
        assert!(scores.iter().sum::<f64>() / (scores.len() as f64) < tau);
        assert_eq!(s.extra_tokens(), 0);
    }
    assert_eq!(ev.metrics.uniform_extra_tokens, 0);
}

#[test]
fn overlays_on_disk_match_the_traces() {
    let run = small_run(0, 4);
    let mut cfg = EncoderConfig::nano();
    cfg.thresholds = [0.45, 0.5, 0.5];
    let model = Model::new(cfg, 6).unwrap();
    let opts = EvalOptions::for_model(&model);
    let dir = tempfile::tempdir().unwrap();
    let manifest = run_eval(&model, &run, Split::Heldout, &opts, 6, 2, Some(dir.path())).unwrap();
    assert_eq!(manifest.overlays.len(), 2 * 4);
    let corpus = run.data.corpus(&Split::Heldout).unwrap();
    let ev = evaluate(&model, &corpus, &opts).unwrap();
    for res in ev.scenes.iter().take(2) {
        let mut set = coarse_grid(64, 64).unwrap();
        for (r, round) in res.trace.rounds.iter().enumerate() {
            let mask = read_ppm(&dir.path().join(format!("scene{:04}_round{}.ppm", res.index, r + 1))).unwrap();
            let frontier = set.frontier().to_vec();
            let chosen: Vec<_> = round.selected.iter().map(|&i| frontier[i]).collect();
            for y in 0..64 {
                for x in 0..64 {
                    let inside = chosen.iter().any(|k| k.rect().contains(y, x));
                    assert_eq!(mask.pixel(y, x), if inside { [1.0; 3] } else { [0.0; 3] });
                }
            }
            set.allocate(&chosen).unwrap();
        }
        assert!(dir.path().join(format!("scene{:04}_cover.ppm", res.index)).exists());
    }
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn eval_runs_are_byte_identical() {
    let run = small_run(0, 6);
    let model = Model::new(EncoderConfig::nano(), 2).unwrap();
    let opts = EvalOptions::for_model(&model);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_eval(&model, &run, Split::Heldout, &opts, 2, 3, Some(a.path())).unwrap();
    let mut other = opts.clone();
    other.batch_size = 4;
    run_eval(&model, &run, Split::Heldout, &other, 2, 3, Some(b.path())).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 3 * 4 + 1);
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn dense_policy_flops_are_constant_across_scenes() {
    let run = small_run(0, 12);
    let model = Model::new(EncoderConfig::nano(), 2).unwrap();
    let mut opts = EvalOptions::for_model(&model);
    opts.policy = Policy::Dense;
    let corpus = run.data.corpus(&Split::Heldout).unwrap();
    let ev = evaluate(&model, &corpus, &opts).unwrap();
    assert_eq!(ev.metrics.flops.std, 0.0);
    assert!(ev.metrics.flops_match);
    assert_eq!(ev.metrics.token_histograms[3].keys().copied().collect::<Vec<_>>(), vec![256]);
}

#[test]
fn label_maps_round_trip_through_pgm_files() {
    let scene = corpus_scene(4, 9, &RunConfig::desk().data.scene).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.pgm");
    write_pgm16(&path, &scene.labels).unwrap();
    assert_eq!(read_pgm(&path).unwrap(), scene.labels);
}
