//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Exits 0 after reporting unless `ACCEPTANCE_STRICT=1` is set, in which case
//! any failing criterion makes the exit status nonzero.

mod common;

use std::time::{Duration, Instant};

use common::{forced, loss, max_diff, nano_scenes, random_selection, samples};
use mixres::boundary::{boundary_map, target_scores, Connectivity, LabelMap, IGNORE};
use mixres::clusterattn::{cluster, cluster_attention_block};
use mixres::config::{EncoderConfig, Policy};
use mixres::flops::{count_trace, FlopsReport};
use mixres::geometry::{coarse_grid, finest_cover, ScaleLevel, TokenKey, TokenSet, NUM_LEVELS};
use mixres::harness::eval::{evaluate, EvalOptions, Evaluation};
use mixres::harness::manifest::{RunConfig, Split};
use mixres::harness::run_eval;
use mixres::harness::scene::Scene;
use mixres::harness::train::train;
use mixres::model::Model;
use mixres::nn::{Block, Init, Linear};
use mixres::serialize::{load_model, save_model};
use mixres::stage1::{select, ForwardOptions};
use mixres::tensor::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn report(id: u32, name: &str, limit: Option<Duration>, elapsed: Duration, o: Outcome) -> bool {
    let in_time = limit.map_or(true, |l| elapsed < l);
    let pass = o.pass && in_time;
    let limit = limit.map_or(String::new(), |l| format!(" limit {:.0}s", l.as_secs_f64()));
    println!(
        "{} {id:>2} {name} ({:.2}s{limit}{}): {}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        if in_time { "" } else { ", over time" },
        o.detail
    );
    pass
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn threshold_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(0..300);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let tau = if n > 0 && rng.gen_bool(0.3) { scores[rng.gen_range(0..n)] } else { rng.gen_range(0.0..1.0) };
        let mut want = Vec::new();
        for (i, &s) in scores.iter().enumerate() {
            if s > tau {
                want.push(i);
            }
        }
        let got = select(&scores, tau);
        if got.len() != want.len() || got != want {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("1000 score vectors, {mismatches} mismatches"))
}

fn random_labels(rng: &mut ChaCha8Rng) -> LabelMap {
    let (h, w) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
    let classes = rng.gen_range(1..5u16);
    let blocky = rng.gen_bool(0.5);
    let (bh, bw) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
    let cells: Vec<u16> = (0..64).map(|_| rng.gen_range(0..classes)).collect();
    let labels = (0..h * w)
        .map(|i| {
            if rng.gen_bool(0.05) {
                IGNORE
            } else if blocky {
                let (y, x) = (i / w / bh, i % w / bw);
                cells[((y * 8 + x) % 64) as usize]
            } else {
                rng.gen_range(0..classes)
            }
        })
        .collect();
    LabelMap::new(h, w, labels).unwrap()
}

fn neighbors(conn: Connectivity) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for dy in -1..=1i64 {
        for dx in -1..=1i64 {
            let four = dy == 0 || dx == 0;
            if (dy, dx) != (0, 0) && (four || conn == Connectivity::Eight) {
                out.push((dy, dx));
            }
        }
    }
    out
}

fn boundary_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let (mut map_errors, mut score_errors, mut tokens) = (0, 0, 0);
    for _ in 0..500 {
        let labels = random_labels(&mut rng);
        let (h, w) = (labels.height() as i64, labels.width() as i64);
        for conn in [Connectivity::Four, Connectivity::Eight] {
            let got = boundary_map(&labels, conn);
            let mut want = vec![false; (h * w) as usize];
            for y in 0..h {
                for x in 0..w {
                    let here = labels.get(y as u32, x as u32);
                    if here == IGNORE {
                        continue;
                    }
                    for (dy, dx) in neighbors(conn) {
                        let (ny, nx) = (y + dy, x + dx);
                        if (0..h).contains(&ny) && (0..w).contains(&nx) {
                            let other = labels.get(ny as u32, nx as u32);
                            if other != IGNORE && other != here {
                                want[(y * w + x) as usize] = true;
                            }
                        }
                    }
                }
            }
            if got.bits() != want.as_slice() {
                map_errors += 1;
            }
            let keys: Vec<TokenKey> = (0..NUM_LEVELS as u8)
                .flat_map(|l| {
                    let side = ScaleLevel::new(l).unwrap().patch_side() as i64;
                    (0..h / side).flat_map(move |r| (0..w / side).map(move |c| TokenKey::new(l, r as u32, c as u32).unwrap()))
                })
                .collect();
            tokens += keys.len();
            let scores = target_scores(&got, &keys).unwrap();
            for (k, s) in keys.iter().zip(scores) {
                let r = k.rect();
                let mut count = 0u32;
                for y in r.y0..r.y0 + r.side {
                    for x in r.x0..r.x0 + r.side {
                        count += u32::from(want[(y as i64 * w + x as i64) as usize]);
                    }
                }
                if s != count as f64 / (r.side * r.side) as f64 {
                    score_errors += 1;
                }
            }
        }
    }
    outcome(
        map_errors == 0 && score_errors == 0,
        format!("500 maps × 2 connectivities, {map_errors} map mismatches, {score_errors} of {tokens} token scores wrong"),
    )
}

fn overlaps(a: &TokenKey, b: &TokenKey) -> bool {
    let (ra, rb) = (a.rect(), b.rect());
    ra.y0 < rb.y0 + rb.side && rb.y0 < ra.y0 + ra.side && ra.x0 < rb.x0 + rb.side && rb.x0 < ra.x0 + ra.side
}

fn quadtree_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let mut problems = Vec::new();
    for trial in 0..200 {
        let (h, w) = (32 * rng.gen_range(1..=4), 32 * rng.gen_range(1..=4));
        let mut set = coarse_grid(h, w).unwrap();
        for r in 0..3 {
            let p = rng.gen_range(0.0..1.0);
            let frontier = set.frontier().to_vec();
            let chosen: Vec<TokenKey> = frontier.iter().copied().filter(|_| rng.gen_bool(p)).collect();
            let before = set.counts();
            let kids = set.allocate(&chosen).unwrap();
            if set.counts()[r + 1] != before[r + 1] + 4 * chosen.len() || kids.len() != 4 * chosen.len() {
                problems.push(format!("trial {trial}: sibling count"));
            }
            for parent in &chosen {
                let pr = parent.rect();
                let mine: Vec<&TokenKey> = kids.iter().filter(|k| k.parent() == Some(*parent)).collect();
                let area: u32 = mine.iter().map(|k| k.rect().area()).sum();
                let inside = mine.iter().all(|k| {
                    let r = k.rect();
                    r.y0 >= pr.y0 && r.x0 >= pr.x0 && r.y0 + r.side <= pr.y0 + pr.side && r.x0 + r.side <= pr.x0 + pr.side
                });
                let disjoint = (0..mine.len()).all(|i| (i + 1..mine.len()).all(|j| !overlaps(mine[i], mine[j])));
                if mine.len() != 4 || area != pr.area() || !inside || !disjoint {
                    problems.push(format!("trial {trial}: children of {parent} do not tile it"));
                }
            }
        }
        for l in ScaleLevel::all() {
            let keys = set.level(l);
            let clashes = (0..keys.len()).map(|i| (i + 1..keys.len()).filter(|&j| overlaps(&keys[i], &keys[j])).count()).sum::<usize>();
            if clashes > 0 {
                problems.push(format!("trial {trial}: {clashes} overlaps at level {}", l.get()));
            }
        }
        let cover = finest_cover(&set).unwrap();
        for y in 0..h {
            for x in 0..w {
                let deepest = set.iter().filter(|k| k.rect().contains(y, x)).max_by_key(|k| k.level.get()).unwrap();
                if cover.pixel(y, x) != *deepest {
                    problems.push(format!("trial {trial}: cover differs at ({y}, {x})"));
                }
            }
        }
    }
    let first = problems.first().cloned().unwrap_or_default();
    outcome(problems.is_empty(), format!("200 traces, {} violations {first}", problems.len()))
}

fn gradient_check() -> Outcome {
    let model = Model::new(EncoderConfig::nano(), SEED + 3).unwrap();
    let scenes = nano_scenes(SEED + 3, 2);
    let batch = samples(&scenes, true);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    let opts = forced((0..2).map(|_| random_selection(&mut rng, 64, 64, 0.5)).collect());
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &batch, &opts).unwrap();
    let grads = tape.backward(pass.loss.unwrap(), model.store()).unwrap();
    let ids: Vec<_> = model.store().ids().collect();
    let h = 1e-5;
    let (mut bad, mut worst, mut nonzero) = (0, 0.0f64, 0);
    for _ in 0..200 {
        let id = ids[rng.gen_range(0..ids.len())];
        let j = rng.gen_range(0..model.store().get(id).len());
        let mut m = model.clone();
        m.store_mut().get_mut(id).data_mut()[j] += h;
        let up = loss(&m, &batch, &opts);
        m.store_mut().get_mut(id).data_mut()[j] -= 2.0 * h;
        let down = loss(&m, &batch, &opts);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(id).data()[j];
        let err = (analytic - numeric).abs();
        let rel = err / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
        if analytic.abs() > 1e-6 {
            nonzero += 1;
            worst = worst.max(rel);
        }
        if err > 1e-8 && rel >= 1e-4 {
            bad += 1;
        }
    }
    outcome(
        bad == 0,
        format!("200 parameters ({nonzero} with |grad| > 1e-6), {bad} outside tolerance, worst relative error among those {worst:.2e}"),
    )
}

fn padding_neutrality() -> Outcome {
    let model = Model::new(EncoderConfig::nano(), SEED + 4).unwrap();
    let scenes = nano_scenes(SEED + 4, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 4);
    let (mut worst, mut perturbed_changes) = (0.0f64, 0);
    for _ in 0..50 {
        let size = rng.gen_range(2..=4);
        let picked: Vec<Scene> = (0..size).map(|_| scenes[rng.gen_range(0..scenes.len())].clone()).collect();
        let sels: Vec<_> = (0..size)
            .map(|_| {
                let p = rng.gen_range(0.0..1.0);
                random_selection(&mut rng, 64, 64, p)
            })
            .collect();
        let run = |idx: &[usize], fill: f64| {
            let sub: Vec<Scene> = idx.iter().map(|&i| picked[i].clone()).collect();
            let opts = ForwardOptions { pad_fill: fill, ..forced(idx.iter().map(|&i| sels[i].clone()).collect()) };
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &samples(&sub, true), &opts).unwrap();
            let out: Vec<_> = (0..idx.len()).map(|b| (pass.sample_emitted(&tape, b), pass.sample_logits(&tape, b))).collect();
            (out, tape.value(pass.loss.unwrap()).data()[0])
        };
        let all: Vec<usize> = (0..size).collect();
        let (batched, loss_a) = run(&all, 0.0);
        let (noisy, loss_b) = run(&all, 1e3);
        if loss_a != loss_b || noisy.iter().zip(&batched).any(|(a, b)| a != b) {
            perturbed_changes += 1;
        }
        for b in 0..size {
            let (solo, _) = run(&[b], 0.0);
            let (se, sl) = &solo[0];
            let (be, bl) = &batched[b];
            worst = worst.max(max_diff(sl.data(), bl.data()));
            for (x, y) in se.iter().zip(be) {
                if x.0 != y.0 {
                    worst = f64::INFINITY;
                } else {
                    worst = worst.max(max_diff(x.1.data(), y.1.data()));
                }
            }
        }
    }
    outcome(
        worst <= 1e-12 && perturbed_changes == 0,
        format!("50 batches, worst solo/batch difference {worst:.1e}, {perturbed_changes} batches moved by padding"),
    )
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter().enumerate().map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i]).collect()
}

fn linear(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let (w, b) = (store.get(l.w).data(), store.get(l.b).data());
    (0..l.d_out).map(|j| (0..l.d_in).map(|k| x[k] * w[k * l.d_out + j]).sum::<f64>() + b[j]).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// A pre-norm block where every token attends to every token.
fn global_block(store: &ParamStore, blk: &Block, x: &Tensor, levels: &[usize]) -> Vec<Vec<f64>> {
    let (n, d) = (x.rows(), blk.dim);
    let dh = d / blk.heads;
    let ln = |l: &mixres::nn::LayerNorm, v: &[f64]| layer_norm(v, store.get(l.gamma).data(), store.get(l.beta).data());
    let hs: Vec<Vec<f64>> = (0..n).map(|i| ln(&blk.ln1, x.row(i))).collect();
    let q: Vec<Vec<f64>> = hs.iter().map(|h| linear(store, &blk.q, h)).collect();
    let v: Vec<Vec<f64>> = hs.iter().map(|h| linear(store, &blk.v, h)).collect();
    let table = store.get(blk.key_level.unwrap());
    let k: Vec<Vec<f64>> = hs
        .iter()
        .zip(levels)
        .map(|(h, &l)| linear(store, &blk.k, h).iter().zip(table.row(l)).map(|(a, b)| a + b).collect())
        .collect();
    (0..n)
        .map(|i| {
            let mut att = vec![0.0; d];
            for head in 0..blk.heads {
                let c = head * dh..(head + 1) * dh;
                let logits: Vec<f64> =
                    (0..n).map(|j| c.clone().map(|t| q[i][t] * k[j][t]).sum::<f64>() / (dh as f64).sqrt()).collect();
                let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
                let z: f64 = e.iter().sum();
                for t in c {
                    att[t] = (0..n).map(|j| e[j] / z * v[j][t]).sum();
                }
            }
            let x1: Vec<f64> = linear(store, &blk.proj, &att).iter().zip(x.row(i)).map(|(a, b)| a + b).collect();
            let hidden: Vec<f64> = linear(store, &blk.mlp.fc1, &ln(&blk.ln2, &x1)).into_iter().map(gelu).collect();
            linear(store, &blk.mlp.fc2, &hidden).iter().zip(&x1).map(|(a, b)| a + b).collect()
        })
        .collect()
}

fn random_tokens(rng: &mut ChaCha8Rng) -> Vec<TokenKey> {
    let (h, w) = (32 * rng.gen_range(1..=3), 32 * rng.gen_range(1..=3));
    let mut set: TokenSet = coarse_grid(h, w).unwrap();
    let p = rng.gen_range(0.2..0.9);
    for _ in 0..3 {
        let chosen: Vec<TokenKey> = set.frontier().iter().copied().filter(|_| rng.gen_bool(p)).collect();
        set.allocate(&chosen).unwrap();
    }
    set.iter().copied().collect()
}

fn cluster_limits() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 5);
    let (mut worst, mut locality_failures, mut locality_checks) = (0.0f64, 0, 0);
    for _ in 0..100 {
        let keys = loop {
            let keys = random_tokens(&mut rng);
            if keys.len() >= 8 {
                break keys;
            }
        };
        let n = keys.len();
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let d = heads * rng.gen_range(2..=4);
        let mut store = ParamStore::new();
        let blk = Block::new(&mut Init::new(&mut store, rng.gen()), "blk", d, heads, 2, Some(NUM_LEVELS));
        let x = Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let run = |x: &Tensor, cs: usize| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = cluster_attention_block(&mut tape, &store, &blk, xv, &keys, cs).unwrap();
            tape.value(y).clone()
        };
        let levels: Vec<usize> = keys.iter().map(|k| k.level.index()).collect();
        let want = global_block(&store, &blk, &x, &levels);
        let got = run(&x, n + rng.gen_range(0..4));
        for (i, row) in want.iter().enumerate() {
            worst = worst.max(max_diff(got.row(i), row));
        }

        let cs = rng.gen_range(1..=n / 4);
        let a = cluster(&keys, cs).unwrap();
        let mut i = rng.gen_range(0..n);
        if a.neighborhood(i).len() == n {
            i = a.order[0];
        }
        let hood = a.neighborhood(i);
        let outside: Vec<usize> = (0..n).filter(|j| !hood.contains(j)).collect();
        let j = outside[rng.gen_range(0..outside.len())];
        let base = run(&x, cs);
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[j * d..(j + 1) * d] {
            *v += rng.gen_range(-5.0..5.0);
        }
        locality_checks += 1;
        if run(&x2, cs).row(i) != base.row(i) {
            locality_failures += 1;
        }
    }
    outcome(
        worst <= 1e-12 && locality_failures == 0 && locality_checks == 100,
        format!("100 configurations, worst global difference {worst:.1e}, {locality_failures} of {locality_checks} locality checks failed"),
    )
}

struct Trained {
    model: Model,
    run: RunConfig,
    heldout: Vec<Scene>,
    initial_mse: f64,
    train_time: Duration,
    adaptive: Evaluation,
    dense: Evaluation,
}

fn dense_opts(model: &Model) -> EvalOptions {
    EvalOptions { policy: Policy::Dense, ..EvalOptions::for_model(model) }
}

fn train_desk() -> Trained {
    let t = Instant::now();
    let run = RunConfig::desk();
    let corpus = run.data.corpus(&Split::Train).unwrap();
    let heldout = run.data.corpus(&Split::Heldout).unwrap();
    let mut model = Model::new(run.encoder.clone(), SEED).unwrap();
    let initial_mse = evaluate(&model, &heldout, &dense_opts(&model)).unwrap().metrics.allocator_mse;
    train(&mut model, &corpus, &run.train, SEED, |_| {}).unwrap();
    let adaptive = evaluate(&model, &heldout, &EvalOptions::for_model(&model)).unwrap();
    let dense = evaluate(&model, &heldout, &dense_opts(&model)).unwrap();
    Trained { model, run, heldout, initial_mse, train_time: t.elapsed(), adaptive, dense }
}

fn flops_accountant(trained: &Trained) -> Outcome {
    let scenes = nano_scenes(SEED + 6, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 6);
    let mut mismatches = 0;
    let (mut stage1_only, mut no_aux) = (EncoderConfig::nano(), EncoderConfig::nano());
    stage1_only.stage1_only = true;
    no_aux.aux_image = false;
    let variants = [EncoderConfig::nano(), stage1_only, no_aux];
    for cfg in variants {
        let model = Model::new(cfg.clone(), SEED + 6).unwrap();
        for _ in 0..5 {
            let sel = (0..4)
                .map(|_| {
                    let p = rng.gen_range(0.0..1.0);
                    random_selection(&mut rng, 64, 64, p)
                })
                .collect();
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &samples(&scenes, true), &forced(sel)).unwrap();
            for (b, trace) in pass.traces.iter().enumerate() {
                let got = FlopsReport::from_scopes(tape.counter().by_scope(Some(b as u32)), 0);
                if got != count_trace(&cfg, trace) {
                    mismatches += 1;
                }
            }
        }
    }
    let (a, d) = (&trained.adaptive.metrics, &trained.dense.metrics);
    let exact = mismatches == 0 && a.flops_match && d.flops_match;
    let pass = exact && d.flops.std == 0.0 && a.uniform_scenes >= 1 && a.flops.mean < d.flops.mean;
    outcome(
        pass,
        format!(
            "instrumented == analytic: {exact}; dense {:.0} ± {:.0}; adaptive {:.0} ± {:.0} over {} scenes ({} uniform)",
            d.flops.mean, d.flops.std, a.flops.mean, a.flops.std, a.scenes, a.uniform_scenes
        ),
    )
}

fn learnability(trained: &Trained) -> Outcome {
    let mse = trained.dense.metrics.allocator_mse;
    let auc = trained.dense.metrics.boundary_auc.unwrap_or(0.0);
    let a = &trained.adaptive;
    let offenders = a.scenes.iter().filter(|s| s.uniform && s.extra_tokens() > 0).count();
    let pass = mse < 0.1 * trained.initial_mse && auc > 0.9 && offenders == 0;
    outcome(
        pass,
        format!(
            "MSE {:.4} → {mse:.5} (ratio {:.4}), AUC {auc:.4}, {offenders} of {} uniform scenes got {} extra tokens",
            trained.initial_mse,
            mse / trained.initial_mse,
            a.metrics.uniform_scenes,
            a.metrics.uniform_extra_tokens
        ),
    )
}

fn trend(trained: &Trained) -> Outcome {
    let (a, d) = (&trained.adaptive.metrics, &trained.dense.metrics);
    outcome(
        a.miou >= d.miou - 1.0 && a.flops.mean < d.flops.mean,
        format!("mIoU adaptive {:.2} vs dense {:.2}; FLOPs {:.0} vs {:.0}", a.miou, d.miou, a.flops.mean, d.flops.mean),
    )
}

fn determinism(trained: &Trained) -> Outcome {
    let reloaded = load_model(trained.model.config().clone(), &save_model(&trained.model)).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for (m, dir) in [&trained.model, &reloaded].into_iter().zip(&dirs) {
        run_eval(m, &trained.run, Split::Heldout, &EvalOptions::for_model(m), SEED, 8, Some(dir.path())).unwrap();
    }
    let listing = |d: &tempfile::TempDir| {
        let mut names: Vec<_> = std::fs::read_dir(d.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        names
    };
    let names = listing(&dirs[0]);
    let same_names = names == listing(&dirs[1]);
    let differing = names
        .iter()
        .filter(|n| std::fs::read(dirs[0].path().join(n)).unwrap() != std::fs::read(dirs[1].path().join(n)).ok().unwrap_or_default())
        .count();
    outcome(same_names && differing == 0, format!("{} files compared, {differing} differ", names.len()))
}

fn main() {
    let secs = Duration::from_secs;
    let mut passed = Vec::new();
    let (o, t) = timed(threshold_oracle);
    passed.push(report(1, "threshold selection oracle", Some(secs(1)), t, o));
    let (o, t) = timed(boundary_oracle);
    passed.push(report(2, "boundary oracle", Some(secs(5)), t, o));
    let (o, t) = timed(quadtree_invariants);
    passed.push(report(3, "quadtree invariants", Some(secs(10)), t, o));
    let (o, t) = timed(gradient_check);
    passed.push(report(4, "gradient correctness", Some(secs(300)), t, o));
    let (o, t) = timed(padding_neutrality);
    passed.push(report(5, "padding neutrality", Some(secs(60)), t, o));
    let (o, t) = timed(cluster_limits);
    passed.push(report(6, "cluster attention limits", Some(secs(60)), t, o));

    let trained = train_desk();
    println!(
        "      trained {} on {} scenes for {} steps in {:.1}s; {} held-out scenes",
        trained.model.config().name,
        trained.run.data.train_scenes,
        trained.run.train.steps,
        trained.train_time.as_secs_f64(),
        trained.heldout.len()
    );
    let (o, t) = timed(|| flops_accountant(&trained));
    passed.push(report(7, "FLOPs accountant", Some(secs(60)), t, o));
    let o = learnability(&trained);
    passed.push(report(8, "allocator learnability", Some(secs(1800)), trained.train_time, o));
    let o = trend(&trained);
    passed.push(report(9, "end-to-end trend", Some(secs(3600)), trained.train_time, o));
    let (o, t) = timed(|| determinism(&trained));
    passed.push(report(10, "determinism", None, t, o));

    let failed = passed.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", passed.len() - failed, passed.len());
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
