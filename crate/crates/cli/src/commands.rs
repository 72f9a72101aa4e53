use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mixres::config::{EncoderConfig, Policy};
use mixres::flops::CorpusStats;
use mixres::geometry::NUM_LEVELS;
use mixres::harness::eval::{evaluate, EvalOptions};
use mixres::harness::manifest::{RunConfig, Split};
use mixres::harness::netpbm::{write_pgm16, write_ppm};
use mixres::harness::run_eval;
use mixres::harness::train::{train as train_model, TrainLog};
use mixres::model::Model;
use mixres::serialize::{encode_features, load_model, save_model};
use mixres::stage1::{ForwardOptions, Sample};
use mixres::tensor::Tape;
use mixres::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::{Common, SplitArg, Variant};

fn split_of(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Heldout => Split::Heldout,
    }
}

fn load_run(c: &Common) -> Result<RunConfig> {
    match &c.config {
        Some(path) => RunConfig::from_json(&fs::read_to_string(path)?),
        None => Ok(RunConfig::desk()),
    }
}

fn seed(c: &Common) -> u64 {
    c.seed.unwrap_or(0)
}

/// Applies `--policy` and `--tau` to the encoder that is about to be trained.
fn training_run(c: &Common, steps: Option<usize>) -> Result<RunConfig> {
    let mut run = load_run(c)?;
    if let Some(name) = &c.policy {
        run.encoder.policy = Policy::from_name(name, seed(c))?;
    }
    if let Some(tau) = c.tau {
        run.encoder.thresholds = tau;
    }
    if let Some(s) = steps {
        run.train.steps = s;
    }
    run.validate()?;
    Ok(run)
}

fn load_or_init(run: &RunConfig, params: Option<&Path>, seed: u64) -> Result<Model> {
    match params {
        Some(p) => load_model(run.encoder.clone(), &fs::read(p)?),
        None => Model::new(run.encoder.clone(), seed),
    }
}

/// Evaluation settings of `model` with `--policy` and `--tau` applied.
fn eval_options(c: &Common, run: &RunConfig, model: &Model) -> Result<EvalOptions> {
    let mut opts = EvalOptions::for_model(model);
    opts.batch_size = run.eval_batch_size;
    if let Some(name) = &c.policy {
        opts.policy = Policy::from_name(name, seed(c))?;
    }
    if let Some(tau) = c.tau {
        opts.thresholds = tau;
    }
    Ok(opts)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn gen(c: &Common, split: SplitArg, count: Option<usize>) -> Result<String> {
    let mut run = load_run(c)?;
    if let Some(s) = c.seed {
        run.data.seed = s;
    }
    let split = split_of(split);
    if let Some(n) = count {
        match split {
            Split::Train => run.data.train_scenes = n,
            Split::Heldout => run.data.heldout_scenes = n,
        }
    }
    let corpus = run.data.corpus(&split)?;
    fs::create_dir_all(&c.out)?;
    for (i, scene) in corpus.iter().enumerate() {
        write_ppm(&c.out.join(format!("scene{i:05}.ppm")), &scene.image)?;
        write_pgm16(&c.out.join(format!("scene{i:05}.pgm")), &scene.labels)?;
    }
    write_json(&c.out.join("dataset.json"), &run.data.descriptor(split))?;
    let uniform = corpus.iter().filter(|s| s.is_uniform()).count();
    Ok(json!({ "command": "gen", "scenes": corpus.len(), "uniform_scenes": uniform, "out": c.out }).to_string())
}

fn fit(run: &RunConfig, seed: u64, label: &str) -> Result<(Model, TrainLog)> {
    let corpus = run.data.corpus(&Split::Train)?;
    let mut model = Model::new(run.encoder.clone(), seed)?;
    let every = (run.train.steps / 10).max(1);
    let log = train_model(&mut model, &corpus, &run.train, seed, |s| {
        if s.step % every == 0 || s.step + 1 == run.train.steps {
            eprintln!("{label} step {:>5}  loss {:.5}  alloc {:.5}  head {:.5}", s.step, s.loss, s.alloc_loss, s.head_loss);
        }
    })?;
    Ok((model, log))
}

pub fn train(c: &Common, steps: Option<usize>) -> Result<String> {
    let run = training_run(c, steps)?;
    let (model, log) = fit(&run, seed(c), "train")?;
    fs::create_dir_all(&c.out)?;
    fs::write(c.out.join("run.json"), run.to_json())?;
    fs::write(c.out.join("params.bin"), save_model(&model))?;
    write_json(&c.out.join("train_log.json"), &log)?;
    let last = log.steps.last().map(|s| s.loss);
    Ok(json!({ "command": "train", "steps": log.steps.len(), "final_loss": last, "out": c.out }).to_string())
}

pub fn eval(c: &Common, params: Option<&Path>, split: SplitArg, overlays: usize, features: usize) -> Result<String> {
    let run = load_run(c)?;
    let model = load_or_init(&run, params, seed(c))?;
    let opts = eval_options(c, &run, &model)?;
    let split = split_of(split);
    let manifest = run_eval(&model, &run, split.clone(), &opts, seed(c), overlays, Some(&c.out))?;
    if features > 0 {
        let corpus = run.data.corpus(&split)?;
        let scenes = &corpus[..features.min(corpus.len())];
        for (start, chunk) in scenes.chunks(opts.batch_size).enumerate().map(|(b, ch)| (b * opts.batch_size, ch)) {
            let batch: Vec<Sample> = chunk
                .iter()
                .enumerate()
                .map(|(i, s)| Sample { id: (start + i) as u64, image: &s.image, labels: Some(&s.labels) })
                .collect();
            let fopts = ForwardOptions {
                batch_index: (start / opts.batch_size) as u64,
                policy: Some(opts.policy.clone()),
                thresholds: Some(opts.thresholds),
                ..ForwardOptions::default()
            };
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &batch, &fopts)?;
            for b in 0..batch.len() {
                fs::write(c.out.join(format!("scene{:04}.features", start + b)), encode_features(&pass.sample_emitted(&tape, b)))?;
            }
        }
    }
    let m = &manifest.metrics;
    Ok(json!({
        "command": "eval",
        "policy": manifest.policy.name(),
        "scenes": m.scenes,
        "allocator_mse": m.allocator_mse,
        "boundary_auc": m.boundary_auc,
        "miou": m.miou,
        "flops_mean": m.flops.mean,
        "flops_std": m.flops.std,
        "manifest": c.out.join("manifest.json"),
    })
    .to_string())
}

#[derive(Serialize)]
struct FlopsRow {
    policy: Policy,
    flops: CorpusStats,
    relative_to_dense: f64,
    mean_tokens: [f64; NUM_LEVELS],
    instrumented_matches_analytic: bool,
}

pub fn flops(c: &Common, params: Option<&Path>, split: SplitArg) -> Result<String> {
    let run = load_run(c)?;
    let model = load_or_init(&run, params, seed(c))?;
    let base = eval_options(c, &run, &model)?;
    let mut policies = vec![Policy::Dense];
    match &c.policy {
        Some(_) if base.policy != Policy::Dense => policies.push(base.policy.clone()),
        Some(_) => {}
        None => policies.extend([
            Policy::Adaptive,
            Policy::from_name("random_ratio", seed(c))?,
            Policy::OracleMix { rate: 1.0, seed: seed(c) },
        ]),
    }
    let corpus = run.data.corpus(&split_of(split))?;
    let mut rows: Vec<FlopsRow> = Vec::new();
    for policy in policies {
        let ev = evaluate(&model, &corpus, &EvalOptions { policy: policy.clone(), ..base.clone() })?;
        let n = ev.scenes.len() as f64;
        let mean_tokens = std::array::from_fn(|l| ev.scenes.iter().map(|s| s.counts[l] as f64).sum::<f64>() / n);
        let dense = rows.first().map_or(ev.metrics.flops.mean, |r| r.flops.mean);
        rows.push(FlopsRow {
            policy,
            flops: ev.metrics.flops,
            relative_to_dense: ev.metrics.flops.mean / dense,
            mean_tokens,
            instrumented_matches_analytic: ev.metrics.flops_match,
        });
    }
    fs::create_dir_all(&c.out)?;
    write_json(&c.out.join("flops.json"), &rows)?;
    let mut table = format!("{:<14} {:>14} {:>12} {:>8}  tokens per level\n", "policy", "mean FLOPs", "std", "× dense");
    for r in &rows {
        let tokens: Vec<String> = r.mean_tokens.iter().map(|t| format!("{t:.1}")).collect();
        let _ = writeln!(
            table,
            "{:<14} {:>14.0} {:>12.0} {:>8.3}  [{}]",
            r.policy.name(),
            r.flops.mean,
            r.flops.std,
            r.relative_to_dense,
            tokens.join(", ")
        );
    }
    eprint!("{table}");
    fs::write(c.out.join("flops.txt"), &table)?;
    Ok(json!({ "command": "flops", "policies": rows.len(), "table": c.out.join("flops.json") }).to_string())
}

#[derive(Serialize)]
struct AblationRow {
    label: String,
    policy: Policy,
    final_loss: Option<f64>,
    allocator_mse: f64,
    boundary_auc: Option<f64>,
    miou: f64,
    flops: CorpusStats,
}

fn variants(base: &EncoderConfig, variant: Variant, seed: u64) -> Result<Vec<(String, EncoderConfig)>> {
    let with = |f: &dyn Fn(&mut EncoderConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        cfg
    };
    Ok(match variant {
        Variant::Baseline => vec![("baseline".into(), base.clone())],
        Variant::Dense => vec![("dense".into(), with(&|c| c.policy = Policy::Dense))],
        Variant::RandomRatio => {
            let p = Policy::from_name("random_ratio", seed)?;
            vec![("random_ratio".into(), with(&|c| c.policy = p.clone()))]
        }
        Variant::OracleMix => [0.0, 0.1, 0.5, 1.0]
            .into_iter()
            .map(|rate| (format!("oracle_mix_{rate}"), with(&|c| c.policy = Policy::OracleMix { rate, seed })))
            .collect(),
        Variant::Stage1Only => vec![("stage1_only".into(), with(&|c| c.stage1_only = true))],
        Variant::NoAuxImage => vec![("no_aux_image".into(), with(&|c| c.aux_image = false))],
        Variant::NoResidual => vec![("no_residual".into(), with(&|c| c.feature_residual = false))],
    })
}

pub fn ablate(c: &Common, variant: Variant, steps: Option<usize>) -> Result<String> {
    let base = training_run(c, steps)?;
    let mut rows = Vec::new();
    for (label, encoder) in variants(&base.encoder, variant, seed(c))? {
        let run = RunConfig { encoder, ..base.clone() };
        run.validate()?;
        let (model, log) = fit(&run, seed(c), &label)?;
        let dir = c.out.join(&label);
        let mut opts = EvalOptions::for_model(&model);
        opts.batch_size = run.eval_batch_size;
        let manifest = run_eval(&model, &run, Split::Heldout, &opts, seed(c), 2, Some(&dir))?;
        fs::write(dir.join("run.json"), run.to_json())?;
        fs::write(dir.join("params.bin"), save_model(&model))?;
        let m = manifest.metrics;
        rows.push(AblationRow {
            label,
            policy: run.encoder.policy.clone(),
            final_loss: log.steps.last().map(|s| s.loss),
            allocator_mse: m.allocator_mse,
            boundary_auc: m.boundary_auc,
            miou: m.miou,
            flops: m.flops,
        });
    }
    if rows.is_empty() {
        return Err(Error::Input("no ablation runs".into()));
    }
    write_json(&c.out.join("ablation.json"), &rows)?;
    let summary: Vec<_> = rows.iter().map(|r| json!({ "label": r.label, "miou": r.miou, "flops_mean": r.flops.mean })).collect();
    Ok(json!({ "command": "ablate", "variant": variant, "runs": summary, "table": c.out.join("ablation.json") }).to_string())
}
