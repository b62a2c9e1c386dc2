//! Acceptance suite: one PASS/FAIL line per criterion with its wall time.
//! Runs as a plain binary so the lines appear in order and unbuffered.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{probe_loss, randn, rng};
use dbat::analysis::attn::attention_stats;
use dbat::analysis::dissect::unit_threshold;
use dbat::analysis::{cka, dissect, hsic1, ActivationMatrix, ConceptCorpus, DissectOptions, Gram};
use dbat::config::{DbaConfig, EncoderConfig, ModelConfig};
use dbat::dba::{AttentionStack, Dba};
use dbat::encoder::{Encoder, PatchMerge, StagePyramid, WindowBlock};
use dbat::layers::{AttentionRecord, Ctx, Init, Trace};
use dbat::merge::Merge;
use dbat::seghead::{self, metrics};
use dbat::tensor::{grad_check, GradCheckOptions, Graph, ParamStore, Precision, Tensor, Var, IGNORE_INDEX};
use dbat::train::ablation::{table_variants, AblationTable};
use dbat::train::data::{generate_scene, Preset};
use dbat::train::trainer::eval_batches;
use dbat::train::{evaluate, lr_at, train_synthetic, Checkpoint, CheckpointPolicy, TrainConfig, Trainer};
use dbat::{Dbat, DbatError, MergeConfig};
use rand::Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// 1
fn shape_law() -> Outcome {
    let cfg = EncoderConfig::default();
    let mut r = rng(1);
    let mut sizes = vec![(512, 512)];
    while sizes.len() < 11 {
        let (h, w) = (32 * r.gen_range(1..9), 32 * r.gen_range(1..9));
        if cfg.validate_input(h, w).is_ok() {
            sizes.push((h, w));
        }
    }
    for &(h, w) in &sizes {
        let mut store = ParamStore::new();
        let enc = ok(Encoder::new(&mut store, &mut Init::new(0), &cfg, h, w))?;
        let g = Graph::new(Precision::Single);
        let ctx = Ctx::new(&g, &store);
        let pyr = ok(enc.encode(&ctx, &g.constant(Tensor::zeros([1, 3, h, w]))))?;
        for i in 1..=4 {
            let s = pyr.maps[i - 1].shape();
            let want = [1, cfg.channels(i - 1), h / (2 << i), w / (2 << i)];
            ensure!(s == want, "{h}x{w} stage {i}: {s:?} != {want:?}");
        }
    }
    Ok(format!("{} sizes incl. 512x512", sizes.len()))
}

fn aggregate_loops(maps: &[Tensor], attn: &Tensor) -> Vec<f64> {
    let s = maps[0].shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![0.0; n * c * h * w];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    for (i, m) in maps.iter().enumerate() {
                        out[((b * c + ch) * h + y) * w + x] +=
                            attn.data()[((b * 4 + i) * h + y) * w + x] * m.data()[((b * c + ch) * h + y) * w + x];
                    }
                }
            }
        }
    }
    out
}

// 2
fn aggregate_oracle() -> Outcome {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (n, c, h, w) = (r.gen_range(1..3), r.gen_range(1..8), r.gen_range(1..6), r.gen_range(1..6));
        let maps: Vec<Tensor> = (0..4).map(|_| randn(&mut r, &[n, c, h, w])).collect();
        let g = Graph::new(Precision::Double);
        let logits = g.constant(Tensor::from_fn([n, 4, h, w], |_| r.gen_range(-4.0..4.0)));
        let weights = ok(logits.softmax(1))?;
        let attn = (*weights.value()).clone();
        let vars: [Var; 4] = [0, 1, 2, 3].map(|i| g.constant(maps[i].clone()));
        let out = ok(Dba::aggregate(&vars, &AttentionStack { weights }))?.value();
        for (e, (&a, b)) in out.data().iter().zip(aggregate_loops(&maps, &attn)).enumerate() {
            worst = worst.max((a - b).abs());
            let lo = maps.iter().map(|m| m.data()[e]).fold(f64::INFINITY, f64::min);
            let hi = maps.iter().map(|m| m.data()[e]).fold(f64::NEG_INFINITY, f64::max);
            ensure!(a >= lo - 1e-9 && a <= hi + 1e-9, "convexity violated at {e}");
        }
    }
    ensure!(worst <= 1e-6, "max abs diff {worst:e}");
    Ok(format!("max abs diff {worst:.1e}"))
}

// 3
fn mask_normalization() -> Outcome {
    let cfg = ModelConfig::default();
    let (model, store) = ok(Dbat::new(&cfg, 32, 3))?;
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let g = Graph::new(Precision::Single);
        let ctx = Ctx::new(&g, &store);
        let img = g.constant(randn(&mut r, &[1, 3, 32, 32]).rounded(Precision::Single));
        let out = ok(model.forward(&ctx, &img))?;
        let w = out.attn.ok_or("no masks")?.weights.value();
        let s = w.shape().to_vec();
        let px = s[2] * s[3];
        for b in 0..s[0] {
            for p in 0..px {
                let sum: f64 = (0..4).map(|i| w.data()[(b * 4 + i) * px + p]).sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
    }
    ensure!(worst <= 1e-6, "max |sum - 1| = {worst:e}");
    Ok(format!("100 passes, max |sum - 1| {worst:.1e}"))
}

fn check(name: &str, store: &mut ParamStore, f: impl for<'g> Fn(&'g Graph, &'g ParamStore) -> dbat::tensor::Result<Var<'g>>, cap: Option<usize>) -> Result<String, String> {
    let report = ok(grad_check(
        store,
        f,
        GradCheckOptions {
            tol: 1e-4,
            max_entries_per_param: cap,
            ..Default::default()
        },
    ))?;
    ensure!(report.passed(), "{name}: {report}");
    Ok(format!("{name} {:.1e}", report.max_rel_err))
}

// 4
fn gradient_suite() -> Outcome {
    let mut parts = Vec::new();
    let mut r = rng(4);

    for shifted in [false, true] {
        let mut store = ParamStore::new();
        let blk = ok(WindowBlock::new(&mut store, &mut Init::new(1), "blk", 4, 2, 2, 2, shifted))?;
        ok(store.insert("input", randn(&mut r, &[1, 4, 4, 4])))?;
        parts.push(check(
            if shifted { "shifted-window" } else { "window" },
            &mut store,
            |g, s| {
                let ctx = Ctx::new(g, s);
                let out = blk.forward(&ctx, &ctx.param("input").unwrap(), 0).unwrap();
                probe_loss(g, &out, 1)
            },
            None,
        )?);
    }

    let mut store = ParamStore::new();
    let pm = ok(PatchMerge::new(&mut store, &mut Init::new(2), "pm", 3))?;
    ok(store.insert("input", randn(&mut r, &[1, 3, 4, 4])))?;
    parts.push(check(
        "patch-merge",
        &mut store,
        |g, s| {
            let ctx = Ctx::new(g, s);
            probe_loss(g, &pm.forward_nchw(&ctx, &ctx.param("input").unwrap()).unwrap(), 2)
        },
        None,
    )?);

    let enc = EncoderConfig {
        embed_dim: 2,
        heads: [1, 1, 2, 2],
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let dba = ok(Dba::new(&mut store, &mut Init::new(3), &DbaConfig::default(), &enc))?;
    for s in 0..4 {
        let side = 2 << (3 - s);
        ok(store.insert(format!("input.map{}", s + 1), randn(&mut r, &[1, enc.channels(s), side, side])))?;
    }
    fn pyramid<'g>(ctx: &Ctx<'g>) -> StagePyramid<'g> {
        StagePyramid {
            maps: [1, 2, 3, 4].map(|i| ctx.param(&format!("input.map{i}")).unwrap()),
        }
    }
    parts.push(check(
        "dba",
        &mut store,
        |g, s| {
            let ctx = Ctx::new(g, s);
            probe_loss(g, &dba.forward(&ctx, &pyramid(&ctx)).unwrap().aggregated, 3)
        },
        None,
    )?);

    let mut store = ParamStore::new();
    let merge = ok(Merge::new(&mut store, &mut Init::new(4), &MergeConfig::default(), &enc, 2))?;
    ok(store.insert("input.map4", randn(&mut r, &[1, 16, 4, 4])))?;
    ok(store.insert("input.agg", randn(&mut r, &[1, 16, 4, 4])))?;
    parts.push(check(
        "merge",
        &mut store,
        |g, s| {
            let ctx = Ctx::new(g, s);
            let (out, _) = merge
                .forward(&ctx, &ctx.param("input.map4").unwrap(), &ctx.param("input.agg").unwrap())
                .unwrap();
            probe_loss(g, &out, 4)
        },
        None,
    )?);

    let (model, mut store) = ok(Dbat::new(&ModelConfig::default(), 32, 5))?;
    ok(store.insert("input.image", randn(&mut r, &[1, 3, 32, 32])))?;
    let labels: Vec<u8> = (0..32 * 32).map(|_| r.gen_range(0..4)).collect();
    parts.push(check(
        "full model",
        &mut store,
        |g, s| {
            let ctx = Ctx::new(g, s);
            let out = model.forward(&ctx, &ctx.param("input.image").unwrap()).unwrap();
            seghead::loss(&out.logits, &labels).map_err(|e| dbat::tensor::TensorError::Evaluation(e.to_string()))
        },
        Some(4),
    )?);
    Ok(parts.join(", "))
}

fn hsic1_loops(k: &Gram, l: &Gram) -> f64 {
    let m = k.m;
    let kt = |i: usize, j: usize| if i == j { 0.0 } else { k.get(i, j) };
    let lt = |i: usize, j: usize| if i == j { 0.0 } else { l.get(i, j) };
    let (mut tr, mut sk, mut sl, mut skl) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..m {
        for j in 0..m {
            tr += kt(i, j) * lt(j, i);
            sk += kt(i, j);
            sl += lt(i, j);
            for q in 0..m {
                skl += kt(i, j) * lt(j, q);
            }
        }
    }
    let mf = m as f64;
    (tr + sk * sl / ((mf - 1.0) * (mf - 2.0)) - 2.0 / (mf - 2.0) * skl) / (mf * (mf - 3.0))
}

fn random_matrix(r: &mut rand_chacha::ChaCha8Rng, m: usize, p: usize) -> ActivationMatrix {
    ActivationMatrix::new("x", m, p, (0..m * p).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

// 5
fn cka_hsic() -> Outcome {
    let mut r = rng(5);
    let x = random_matrix(&mut r, 64, 16);
    let y = random_matrix(&mut r, 64, 16);
    let self_sim = ok(cka(&x, &x))?;
    ensure!((self_sim - 1.0).abs() <= 1e-9, "cka(X,X) = {self_sim}");
    let scaled = ActivationMatrix::new("x", 64, 16, x.data.iter().map(|v| 3.7 * v).collect()).unwrap();
    let (a, b) = (ok(cka(&scaled, &y))?, ok(cka(&x, &y))?);
    ensure!((a - b).abs() <= 1e-9, "scaling changed cka: {a} vs {b}");
    let three = Gram { m: 3, data: vec![1.0; 9] };
    ensure!(hsic1(&three, &three).is_err(), "m=3 accepted");
    let ones = Gram { m: 4, data: vec![1.0; 16] };
    let hand = ok(hsic1(&ones, &ones))?;
    ensure!(hand == 0.0, "all-ones m=4 gives {hand}");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let m = r.gen_range(4..=32);
        let p = r.gen_range(1..8);
        let k = Gram::linear(&random_matrix(&mut r, m, p));
        let l = Gram::linear(&random_matrix(&mut r, m, p));
        let (fast, slow) = (ok(hsic1(&k, &l))?, hsic1_loops(&k, &l));
        let err = (fast - slow).abs() / slow.abs().max(1.0);
        worst = worst.max(err);
    }
    ensure!(worst <= 1e-9, "hsic1 vs loops: {worst:e}");
    Ok(format!("loop oracle max err {worst:.1e}"))
}

// 6
fn dissection() -> Outcome {
    let side = 16;
    let scenes: Vec<_> = (0..4).map(|i| generate_scene(60 + i, 4, side, 0.0, Preset::Textured).unwrap()).collect();
    let corpus = ok(ConceptCorpus::from_scenes(&scenes, 4))?;
    let px = side * side;
    let mut r = rng(6);
    // unit 0 indicator of texture 2, unit 1 constant, units 2..5 random
    let units = 6;
    let mut acts = vec![0.0; 4 * units * px];
    let mut on = 0;
    for b in 0..4 {
        for p in 0..px {
            let base = b * units * px;
            if corpus.labels[b][0][p] == 2 {
                acts[base + p] = 1.0;
                on += 1;
            }
            acts[base + px + p] = -0.5;
            for u in 2..units {
                acts[base + u * px + p] = r.gen_range(-1.0..1.0);
            }
        }
    }
    ensure!(on > 0, "texture 2 absent from the corpus");
    let t = Tensor::new([4, units, side, side], acts).unwrap();
    let total = 4 * px;
    let opts = DissectOptions {
        quantile: on as f64 / total as f64,
        iou_threshold: 0.04,
    };
    let rep = ok(dissect("probe", &t, &corpus, &opts))?;
    ensure!((rep.units[0].iou - 1.0).abs() < 1e-12, "indicator IoU {}", rep.units[0].iou);
    ensure!(rep.units[0].label.as_deref() == Some("texture2"), "indicator label {:?}", rep.units[0].label);
    ensure!(rep.units[1].label.is_none(), "constant unit labeled {:?}", rep.units[1].label);

    let mut worst = 0.0f64;
    for u in 2..units {
        let vals: Vec<f64> = (0..4).flat_map(|b| t.data()[(b * units + u) * px..(b * units + u + 1) * px].to_vec()).collect();
        let a = ok(unit_threshold(&vals, opts.quantile))?;
        let above = vals.iter().filter(|&&v| v > a).count() as f64 / total as f64;
        ensure!((above - opts.quantile).abs() <= 1.0 / total as f64, "unit {u}: {above} above vs q {}", opts.quantile);
        let mut best = 0.0f64;
        for (cat, category) in corpus.categories.iter().enumerate() {
            for k in 0..category.concepts.len() {
                let (mut i, mut un) = (0u64, 0u64);
                for (b, v) in vals.chunks(px).enumerate() {
                    for p in 0..px {
                        let m = v[p] > a;
                        let l = corpus.labels[b][cat][p] as usize == k;
                        i += (m && l) as u64;
                        un += (m || l) as u64;
                    }
                }
                if un > 0 {
                    best = best.max(i as f64 / un as f64);
                }
            }
        }
        worst = worst.max((rep.units[u].iou - best).abs());
    }
    ensure!(worst <= 1e-9, "IoU vs counting oracle {worst:e}");
    Ok(format!("counting oracle max diff {worst:.1e}"))
}

// 7
fn schedule() -> Outcome {
    let cfg = TrainConfig::reference();
    ensure!(cfg.warmup_steps == 1500, "reference warmup {}", cfg.warmup_steps);
    let at = |s| ok(lr_at(s, &cfg));
    ensure!(at(0)? == 0.0, "lr(0) = {}", at(0)?);
    ensure!((at(1500)? - 6e-5).abs() <= 1e-18, "lr(1500) = {}", at(1500)?);
    let w = cfg.warmup_steps as f64;
    let linear = cfg.lr_peak * w / w;
    let poly = cfg.lr_peak * (1.0 - (w - w) / (cfg.total_steps as f64 - w)).powf(cfg.poly_power);
    ensure!((linear - poly).abs() <= 1e-12 && (at(1500)? - poly).abs() <= 1e-12, "discontinuous at warmup");
    ensure!(at(cfg.total_steps)? == 0.0, "endpoint {}", at(cfg.total_steps)?);
    ensure!(lr_at(cfg.total_steps + 1, &cfg).is_err(), "step past the end accepted");
    Ok("lr(0)=0, lr(1500)=6e-5, endpoint 0".into())
}

// 8
fn metrics_case() -> Outcome {
    let rep = ok(metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], 2))?;
    ensure!((rep.pixel_acc - 0.75).abs() <= 1e-9, "pixel_acc {}", rep.pixel_acc);
    ensure!((rep.mean_acc - 0.75).abs() <= 1e-9, "mean_acc {}", rep.mean_acc);
    ensure!((rep.miou - 7.0 / 12.0).abs() <= 1e-9, "miou {}", rep.miou);
    let ignored = ok(metrics(&[0, 1, 0, 1], &[IGNORE_INDEX, 1, IGNORE_INDEX, IGNORE_INDEX], 2))?;
    ensure!(ignored.pixel_acc == 1.0, "IGNORE leaked: {}", ignored.pixel_acc);
    let total: u64 = ignored.confusion.iter().flatten().sum();
    ensure!(total == 1, "{total} pixels counted");
    Ok(format!("miou {:.6}", rep.miou))
}

// 9
fn determinism() -> Outcome {
    let model = ModelConfig::default();
    let train = TrainConfig {
        crop: 32,
        batch_size: 2,
        warmup_steps: 3,
        total_steps: 12,
        seed: 9,
        ..Default::default()
    };
    let run = |steps: u64| -> Result<Vec<u8>, String> {
        let mut tr = ok(Trainer::new(&model, &train))?;
        let out = ok(train_synthetic(&mut tr, steps, &mut std::io::sink(), &CheckpointPolicy::default()))?;
        ok(out.checkpoint.to_bytes())
    };
    let a = run(10)?;
    ensure!(a == run(10)?, "same-seed runs differ");

    let dir = ok(tempfile::tempdir())?;
    let p1 = dir.path().join("a.dbat");
    let p2 = dir.path().join("b.dbat");
    ok(std::fs::write(&p1, &a))?;
    let loaded = ok(dbat::train::load_checkpoint(&p1))?;
    ok(dbat::train::save_checkpoint(&loaded, &p2))?;
    ensure!(ok(std::fs::read(&p2))? == a, "save-load-save bytes differ");

    let mut tr = ok(Trainer::new(&model, &train))?;
    ok(train_synthetic(&mut tr, 4, &mut std::io::sink(), &CheckpointPolicy::default()))?;
    let mid = ok(Checkpoint::from_bytes(&ok(tr.checkpoint().to_bytes())?))?;
    let mut resumed = ok(Trainer::from_checkpoint(&mid))?;
    let out = ok(train_synthetic(&mut resumed, 10, &mut std::io::sink(), &CheckpointPolicy::default()))?;
    ensure!(ok(out.checkpoint.to_bytes())? == a, "resume from step 4 diverged from uninterrupted run");
    Ok(format!("{} byte checkpoints identical", a.len()))
}

fn train_and_eval(model: &ModelConfig, train: &TrainConfig, eval: &[dbat::train::Batch]) -> Result<dbat::seghead::MetricsReport, String> {
    let mut tr = ok(Trainer::new(model, train))?;
    ok(train_synthetic(&mut tr, train.total_steps as u64, &mut std::io::sink(), &CheckpointPolicy::default()))?;
    ok(evaluate(&tr.model, &tr.store, eval))
}

// 10
fn end_to_end() -> Outcome {
    let base = ModelConfig::default();
    ensure!(base.encoder.embed_dim == 16 && base.num_classes == 4, "toy defaults changed");
    let variants = table_variants(&base);
    let (full, backbone) = (&variants[0], &variants[2]);
    ensure!(backbone.model.ablation.disable_dba && backbone.model.ablation.disable_merge, "row 3 is not backbone-only");

    let flat = TrainConfig {
        seed: 10,
        ..Default::default()
    };
    ensure!(flat.crop == 64 && flat.total_steps == 500, "toy schedule changed");
    let mut tr = ok(Trainer::new(&full.model, &flat))?;
    ok(train_synthetic(&mut tr, 500, &mut std::io::sink(), &CheckpointPolicy::default()))?;
    let recent: Vec<_> = (493..=500).map(|s| tr.training_batch(s).unwrap()).collect();
    let train_acc = ok(evaluate(&tr.model, &tr.store, &recent))?.pixel_acc;
    ensure!(train_acc >= 0.90, "flat-color training pixel acc {train_acc:.4} < 0.90");

    let held_out = ok(eval_batches(1010, 8, 4, tr.scene_spec()))?;
    let full_flat = ok(evaluate(&tr.model, &tr.store, &held_out))?;
    let bb_flat = train_and_eval(&backbone.model, &flat, &held_out)?;
    let table = AblationTable::from_results(&[(full.name.clone(), full_flat), (backbone.name.clone(), bb_flat)]);
    println!("{}", table.to_markdown());

    let mut sums = [0.0; 2];
    for seed in 0..3 {
        let tex = TrainConfig {
            preset: Preset::Textured,
            seed,
            ..Default::default()
        };
        let eval = ok(eval_batches(999, 8, 4, dbat::train::SceneSpec {
            preset: Preset::Textured,
            ..tr.scene_spec()
        }))?;
        sums[0] += train_and_eval(&full.model, &tex, &eval)?.pixel_acc / 3.0;
        sums[1] += train_and_eval(&backbone.model, &tex, &eval)?.pixel_acc / 3.0;
    }
    ensure!(sums[0] >= sums[1], "textured: full {:.4} < backbone-only {:.4}", sums[0], sums[1]);
    Ok(format!(
        "flat train acc {train_acc:.4}; textured 3-seed mean full {:.4} vs backbone-only {:.4}",
        sums[0], sums[1]
    ))
}

// 11
fn attention_statistics() -> Outcome {
    let one = Trace {
        attention: vec![AttentionRecord {
            layer: "stage3.block0".into(),
            stage: 2,
            stride: 16,
            window: 1,
            weights: Tensor::ones([4, 2, 1, 1]),
        }],
        ..Default::default()
    };
    let rep = ok(attention_stats(&[one]))?;
    ensure!(rep.layers[0].heads.iter().all(|h| h.side == 0.0), "w=1 side not 0");

    let (w, t) = (4usize, 16usize);
    let mut pairs = 0.0;
    for q in 0..t {
        for k in 0..t {
            let (dy, dx) = ((q / w) as f64 - (k / w) as f64, (q % w) as f64 - (k % w) as f64);
            pairs += (dy * dy + dx * dx).sqrt();
        }
    }
    let oracle = 4.0 * pairs / (t * t) as f64;
    let uniform = Trace {
        attention: vec![AttentionRecord {
            layer: "stage1.block0".into(),
            stage: 0,
            stride: 4,
            window: w,
            weights: Tensor::full([2, 3, t, t], 1.0 / t as f64),
        }],
        ..Default::default()
    };
    let rep = ok(attention_stats(&[uniform]))?;
    for h in &rep.layers[0].heads {
        ensure!((h.distance - oracle).abs() <= 1e-6, "uniform distance {} vs {oracle}", h.distance);
    }

    let (model, store) = ok(Dbat::new(&ModelConfig::default(), 64, 11))?;
    let mut r = rng(11);
    let traces: Vec<Trace> = (0..2)
        .map(|_| dbat::analysis::probe(&model, &store, &randn(&mut r, &[2, 3, 64, 64])))
        .collect::<Result<_, DbatError>>()
        .map_err(|e| e.to_string())?;
    let means = ok(attention_stats(&traces))?.mask_means.ok_or("no mask means")?;
    let sum: f64 = means.iter().sum();
    ensure!((sum - 1.0).abs() <= 1e-6, "mask means sum {sum}");
    Ok(format!("uniform oracle d = {oracle:.4}, mask means sum {sum:.9}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, u64); 11] = [
        ("shape law", shape_law, 10),
        ("aggregation oracle", aggregate_oracle, 5),
        ("mask normalization", mask_normalization, 5),
        ("gradient suite", gradient_suite, 120),
        ("CKA / HSIC1", cka_hsic, 30),
        ("dissection", dissection, 30),
        ("schedule", schedule, 1),
        ("metrics", metrics_case, 1),
        ("determinism & persistence", determinism, 120),
        ("end-to-end smoke", end_to_end, 900),
        ("attention statistics", attention_statistics, 30),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f, budget)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|s| name.contains(s.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(_) if elapsed > Duration::from_secs(*budget) => Err(format!("took {elapsed:.1?}, budget {budget}s")),
            other => other,
        };
        match result {
            Ok(detail) => println!("PASS criterion {:>2} {name}: {detail} [{elapsed:.2?}]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {:>2} {name}: {why} [{elapsed:.2?}]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
