mod common;

use common::{assert_close, probe_loss, randn, rng};
use dbat::attention::windowed_attention;
use dbat::encoder::{Encoder, PatchEmbed, PatchMerge, WindowBlock};
use dbat::layers::{Ctx, Init};
use dbat::tensor::{grad_check, GradCheckOptions, Graph, ParamStore, Precision, Tensor};
use dbat::EncoderConfig;
use proptest::prelude::*;

fn tiny_encoder_cfg() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 4,
        heads: [1, 1, 2, 2],
        window_size: 2,
        mlp_ratio: 2,
        ..Default::default()
    }
}

#[test]
fn patch_embed_matches_flatten_then_linear() {
    let cfg = EncoderConfig::default();
    let mut store = ParamStore::new();
    let pe = PatchEmbed::new(&mut store, &mut Init::new(2), "pe", &cfg).unwrap();
    let mut r = rng(5);
    store.value_mut("pe.proj.bias").unwrap().data_mut().copy_from_slice(randn(&mut r, &[16]).data());
    let img = randn(&mut r, &[1, 3, 4, 4]);
    let g = Graph::new(Precision::Double);
    let ctx = Ctx::new(&g, &store);
    let out = pe.project(&ctx, &g.constant(img.clone())).unwrap();
    assert_eq!(out.shape(), vec![1, 1, 1, 16]);

    let w = store.value("pe.proj.weight").unwrap();
    let b = store.value("pe.proj.bias").unwrap();
    let mut flat = vec![0.0; 48];
    for c in 0..3 {
        for y in 0..4 {
            for x in 0..4 {
                flat[(y * 4 + x) * 3 + c] = img.data()[(c * 4 + y) * 4 + x];
            }
        }
    }
    let expect: Vec<f64> = (0..16)
        .map(|o| b.data()[o] + (0..48).map(|i| w.data()[o * 48 + i] * flat[i]).sum::<f64>())
        .collect();
    assert_close(out.value().data(), &expect, 1e-6);

    // the normalized output has zero mean and unit variance across channels
    let normed = pe.forward_nchw(&ctx, &g.constant(img)).unwrap().value();
    let mean: f64 = normed.data().iter().sum::<f64>() / 16.0;
    let var: f64 = normed.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
    assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-3);
}

#[test]
fn patch_embed_zero_image_zero_bias() {
    let cfg = EncoderConfig::default();
    let mut store = ParamStore::new();
    let pe = PatchEmbed::new(&mut store, &mut Init::new(2), "pe", &cfg).unwrap();
    let g = Graph::new(Precision::Double);
    let ctx = Ctx::new(&g, &store);
    let out = pe.project(&ctx, &g.constant(Tensor::zeros([2, 3, 64, 64]))).unwrap();
    assert!(out.value().data().iter().all(|&v| v == 0.0));
    let full = pe.forward_nchw(&ctx, &g.constant(Tensor::zeros([2, 3, 64, 64]))).unwrap();
    assert_eq!(full.shape(), vec![2, 16, 16, 16]);
}

#[test]
fn patch_merge_block_oracle_and_constant_input() {
    let c = 3;
    let mut store = ParamStore::new();
    let pm = PatchMerge::new(&mut store, &mut Init::new(9), "pm", c).unwrap();
    let mut r = rng(1);
    let x = randn(&mut r, &[1, c, 2, 2]);
    let g = Graph::new(Precision::Double);
    let ctx = Ctx::new(&g, &store);
    let out = pm.forward_nchw(&ctx, &g.constant(x.clone())).unwrap().value();
    assert_eq!(out.shape(), &[1, 2 * c, 1, 1]);

    let mut cat = vec![0.0; 4 * c];
    for dy in 0..2 {
        for dx in 0..2 {
            for ch in 0..c {
                cat[(dy * 2 + dx) * c + ch] = x.data()[(ch * 2 + dy) * 2 + dx];
            }
        }
    }
    let mean = cat.iter().sum::<f64>() / cat.len() as f64;
    let var = cat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cat.len() as f64;
    let normed: Vec<f64> = cat.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
    let w = store.value("pm.reduction.weight").unwrap();
    let expect: Vec<f64> = (0..2 * c)
        .map(|o| (0..4 * c).map(|i| w.data()[o * 4 * c + i] * normed[i]).sum())
        .collect();
    assert_close(out.data(), &expect, 1e-6);

    let constant = Tensor::from_fn([1, c, 4, 4], |i| (i / 16) as f64 + 0.5);
    let out = pm.forward_nchw(&ctx, &g.constant(constant)).unwrap().value();
    assert_eq!(out.shape(), &[1, 2 * c, 2, 2]);
    for plane in out.data().chunks(4) {
        assert!(plane.iter().all(|&v| (v - plane[0]).abs() < 1e-12));
    }
}

#[test]
fn window_of_one_attends_to_itself() {
    let mut store = ParamStore::new();
    let blk = WindowBlock::new(&mut store, &mut Init::new(0), "b", 8, 2, 1, 2, false).unwrap();
    let g = Graph::new(Precision::Double);
    let ctx = Ctx::recording(&g, &store);
    let mut r = rng(3);
    let x = g.constant(randn(&mut r, &[1, 4, 4, 8]));
    let out = blk.forward(&ctx, &x, 0).unwrap();
    assert_eq!(out.shape(), vec![1, 4, 4, 8]);
    let trace = ctx.take_trace();
    assert!(trace.attention[0].weights.data().iter().all(|&a| a == 1.0));
}

#[test]
fn identical_tokens_share_attention() {
    // a 2x2 window where only the first two keys are visible and identical
    let g = Graph::new(Precision::Double);
    let token = [0.3, -0.7, 1.1, 0.25];
    let q = g.constant(Tensor::from_fn([1, 2, 2, 4], |i| token[i % 4]));
    let mut mask = vec![0.0; 16];
    for qi in 0..4 {
        mask[qi * 4 + 2] = -1e9;
        mask[qi * 4 + 3] = -1e9;
    }
    let mask = g.constant(Tensor::new([1, 1, 4, 4], mask).unwrap());
    let (_, attn) = windowed_attention(&q, &q, &q, 1, 2, None, Some(&mask)).unwrap();
    for row in attn.value().data().chunks(4) {
        assert!((row[0] - 0.5).abs() < 1e-6 && (row[1] - 0.5).abs() < 1e-6, "{row:?}");
    }
}

#[test]
fn shifted_block_preserves_shape_and_rows_sum_to_one() {
    let mut store = ParamStore::new();
    let blk = WindowBlock::new(&mut store, &mut Init::new(4), "b", 8, 2, 2, 2, true).unwrap();
    let g = Graph::new(Precision::Double);
    let ctx = Ctx::recording(&g, &store);
    let mut r = rng(8);
    let x = g.constant(randn(&mut r, &[2, 4, 4, 8]));
    assert_eq!(blk.forward(&ctx, &x, 0).unwrap().shape(), vec![2, 4, 4, 8]);
    for row in ctx.take_trace().attention[0].weights.data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn window_block_gradients() {
    for shifted in [false, true] {
        let mut store = ParamStore::new();
        let blk = WindowBlock::new(&mut store, &mut Init::new(6), "b", 4, 2, 2, 2, shifted).unwrap();
        let mut r = rng(12);
        store.insert("input", randn(&mut r, &[1, 4, 4, 4])).unwrap();
        let report = grad_check(
            &mut store,
            |g, s| {
                let ctx = Ctx::new(g, s);
                let out = blk.forward(&ctx, &ctx.param("input").unwrap(), 0).unwrap();
                probe_loss(g, &out, 1)
            },
            GradCheckOptions {
                eps: 1e-4,
                tol: 1e-4,
                max_entries_per_param: None,
            },
        )
        .unwrap();
        assert!(report.passed(), "shifted={shifted}: {report}");
    }
}

#[test]
fn patch_merge_gradients() {
    let mut store = ParamStore::new();
    let pm = PatchMerge::new(&mut store, &mut Init::new(1), "pm", 3).unwrap();
    let mut r = rng(2);
    store.insert("input", randn(&mut r, &[1, 3, 4, 4])).unwrap();
    let report = grad_check(
        &mut store,
        |g, s| {
            let ctx = Ctx::new(g, s);
            let out = pm.forward_nchw(&ctx, &ctx.param("input").unwrap()).unwrap();
            probe_loss(g, &out, 3)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn map4_loss_reaches_patch_embedding() {
    let cfg = tiny_encoder_cfg();
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut Init::new(0), &cfg, 32, 32).unwrap();
    let mut r = rng(4);
    let img = randn(&mut r, &[1, 3, 32, 32]);
    let g = Graph::new(Precision::Double);
    let ctx = Ctx::new(&g, &store);
    let pyr = enc.encode(&ctx, &g.constant(img.clone())).unwrap();
    let loss = probe_loss(&g, &pyr.maps[3], 9).unwrap();
    let grads = g.backward(loss).unwrap();
    let gw = grads.param("encoder.patch_embed.proj.weight").unwrap();
    assert!(gw.data().iter().any(|&v| v != 0.0));
    drop(ctx);

    let report = grad_check(
        &mut store,
        |g, s| {
            let ctx = Ctx::new(g, s);
            let pyr = enc.encode(&ctx, &g.constant(img.clone())).unwrap();
            probe_loss(g, &pyr.maps[3], 9)
        },
        GradCheckOptions {
            max_entries_per_param: Some(3),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn encode_is_deterministic_and_batch_equivariant() {
    let cfg = EncoderConfig::default();
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &mut Init::new(3), &cfg, 32, 32).unwrap();
    let mut r = rng(10);
    let imgs = randn(&mut r, &[3, 3, 32, 32]);
    let per = 3 * 32 * 32;
    let perm = [2, 0, 1];
    let mut shuffled = Vec::with_capacity(imgs.numel());
    for &p in &perm {
        shuffled.extend_from_slice(&imgs.data()[p * per..(p + 1) * per]);
    }
    let shuffled = Tensor::new([3, 3, 32, 32], shuffled).unwrap();
    let run = |t: &Tensor| {
        let g = Graph::new(Precision::Single);
        let ctx = Ctx::new(&g, &store);
        let p = enc.encode(&ctx, &g.constant(t.clone())).unwrap();
        p.maps.map(|m| (*m.value()).clone())
    };
    let a = run(&imgs);
    let b = run(&imgs);
    assert_eq!(a, b);
    let c = run(&shuffled);
    for (ma, mc) in a.iter().zip(&c) {
        let per = ma.numel() / 3;
        for (i, &p) in perm.iter().enumerate() {
            assert_close(&mc.data()[i * per..(i + 1) * per], &ma.data()[p * per..(p + 1) * per], 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(12) })]

    #[test]
    fn stage_shape_law(kh in 1usize..5, kw in 1usize..5, n in 1usize..3) {
        let (h, w) = (32 * kh, 32 * kw);
        let cfg = EncoderConfig { window_size: 2, ..Default::default() };
        prop_assume!(cfg.validate_input(h, w).is_ok());
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut Init::new(0), &cfg, h, w).unwrap();
        let g = Graph::new(Precision::Single);
        let ctx = Ctx::new(&g, &store);
        let pyr = enc.encode(&ctx, &g.constant(Tensor::zeros([n, 3, h, w]))).unwrap();
        for (i, m) in pyr.maps.iter().enumerate() {
            let s = 2 << (i + 1);
            prop_assert_eq!(m.shape(), vec![n, 16 << i, h / s, w / s]);
        }
    }

    #[test]
    fn window_block_keeps_shape(heads in 1usize..4, window in 1usize..4, tiles in 1usize..3) {
        let dim = 4 * heads;
        let side = window * tiles;
        let mut store = ParamStore::new();
        let blk = WindowBlock::new(&mut store, &mut Init::new(1), "b", dim, heads, window, 2, false).unwrap();
        let g = Graph::new(Precision::Single);
        let ctx = Ctx::new(&g, &store);
        let x = g.constant(Tensor::from_fn([1, side, side, dim], |i| (i as f64).sin()));
        prop_assert_eq!(blk.forward(&ctx, &x, 0).unwrap().shape(), vec![1, side, side, dim]);
    }
}
