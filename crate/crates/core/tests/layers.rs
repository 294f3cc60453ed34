mod common;

use common::oracles::sharing_gap;
use common::{close, mm, random, randomize, rng, row_stochastic};
use psvit_core::arch::{count_params, preset, toy_patch, CellChoice, Genotype, PoolingMode, StageSpec};
use psvit_core::layers::{
    attention_correlation, AttentionMaps, ClassifierHead, Ctx, EncoderLayer, EncoderLayerConfig, HeadMaps,
    HeadMode, ImageClassifier, MultiHeadAttention, ParamStore, TokenPool1d, TokenPool2d, VitModel,
};
use psvit_core::{Tape, Tensor};

#[test]
fn sharing_layer_reproduces_basic_layer_with_its_maps() {
    for seed in 0..10 {
        let (gap, same_maps) = sharing_gap(seed);
        assert!(gap <= 1e-12, "seed {seed}: {gap:e}");
        assert!(same_maps);
    }
}

#[test]
fn sharing_layer_requires_matching_maps() {
    let mut r = rng(1);
    let mut store = ParamStore::new();
    let shared = EncoderLayer::new(&mut store, "b", EncoderLayerConfig::new(8, 2, true), &mut r).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let x = tape.constant(random(&mut r, &[5, 8], 1.0));
    assert!(shared.forward(&ctx, x, None).is_err());
    let wrong = HeadMaps::from_values(&tape, &AttentionMaps::identity(2, 4));
    assert!(shared.forward(&ctx, x, Some(&wrong)).is_err());
    let heads = HeadMaps::from_values(&tape, &AttentionMaps::identity(1, 5));
    assert!(shared.forward(&ctx, x, Some(&heads)).is_err());
}

#[test]
fn identity_maps_give_per_token_projection() {
    let mut r = rng(2);
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "m", EncoderLayerConfig::new(4, 2, true), &mut r).unwrap();
    randomize(&mut store, &mut r, 0.7);
    let x = random(&mut r, &[3, 4], 1.0);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let maps = HeadMaps::from_values(&tape, &AttentionMaps::identity(2, 3));
    let (out, _) = attn.forward(&ctx, tape.constant(x.clone()), Some(&maps)).unwrap();

    let lin = |x: &[f64], w: &Tensor, b: &Tensor, n: usize| {
        let mut y = mm(x, w.data(), n, 4, 4);
        for (i, v) in y.iter_mut().enumerate() {
            *v += b.data()[i % 4];
        }
        y
    };
    let v = lin(x.data(), store.get(attn.value.weight), store.get(attn.value.bias), 3);
    let want = lin(&v, store.get(attn.proj.weight), store.get(attn.proj.bias), 3);
    assert!(close(out.value().data(), &want, 1e-12));
}

#[test]
fn zeroed_branch_outputs_make_layer_identity() {
    for share in [false, true] {
        let mut r = rng(3);
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, "l", EncoderLayerConfig::new(8, 2, share), &mut r).unwrap();
        randomize(&mut store, &mut r, 0.5);
        layer.zero_branch_outputs(&mut store);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = random(&mut r, &[5, 8], 2.0);
        let maps = HeadMaps::from_values(&tape, &AttentionMaps::identity(2, 5));
        let (y, _) = layer.forward(&ctx, tape.constant(x.clone()), Some(&maps)).unwrap();
        assert_eq!(y.value(), x);
        assert_eq!(y.shape(), vec![5, 8]);
    }
}

/// Straight-line multi-head attention over plain slices.
fn reference_mha(x: &[f64], n: usize, d: usize, heads: usize, w: [(&[f64], &[f64]); 4]) -> Vec<f64> {
    let lin = |x: &[f64], (wt, b): (&[f64], &[f64])| {
        let mut y = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                let mut acc = b[j];
                for p in 0..d {
                    acc += x[i * d + p] * wt[p * d + j];
                }
                y[i * d + j] = acc;
            }
        }
        y
    };
    let (q, k, v) = (lin(x, w[0]), lin(x, w[1]), lin(x, w[2]));
    let dh = d / heads;
    let mut cat = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                cat[i * d + h * dh + c] = (0..n).map(|j| e[j] / z * v[j * d + h * dh + c]).sum();
            }
        }
    }
    lin(&cat, w[3])
}

#[test]
fn multi_head_attention_matches_reference() {
    let mut r = rng(0);
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "m", EncoderLayerConfig::new(4, 2, false), &mut r).unwrap();
    randomize(&mut store, &mut r, 1.0);
    let x = random(&mut r, &[3, 4], 1.0);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let (out, maps) = attn.forward(&ctx, tape.constant(x.clone()), None).unwrap();
    let (q, k) = attn.query_key.as_ref().unwrap();
    let p = |l: &psvit_core::layers::Linear| (store.get(l.weight).data(), store.get(l.bias).data());
    let want = reference_mha(x.data(), 3, 4, 2, [p(q), p(k), p(&attn.value), p(&attn.proj)]);
    assert!(close(out.value().data(), &want, 1e-12));
    assert!(maps.to_values().is_row_stochastic(1e-6));
}

#[test]
fn token_pool_1d_matches_direct_oracle() {
    let mut r = rng(4);
    let mut store = ParamStore::new();
    let pool = TokenPool1d::new(&mut store, "p", 2, 3, &mut r).unwrap();
    randomize(&mut store, &mut r, 1.0);
    let x = random(&mut r, &[5, 2], 1.0);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let y = pool.forward(&ctx, tape.constant(x.clone())).unwrap().value();
    assert_eq!(y.shape(), &[3, 3]);

    let w = store.get(pool.weight).data();
    let b = store.get(pool.bias).data();
    let mut conv = [0.0; 5 * 3];
    for t in 0..5i64 {
        for o in 0..3 {
            let mut acc = b[o];
            for tap in 0..3i64 {
                let src = t + tap - 1;
                if (0..5).contains(&src) {
                    for i in 0..2 {
                        acc += w[(o * 2 + i) * 3 + tap as usize] * x.data()[src as usize * 2 + i];
                    }
                }
            }
            conv[t as usize * 3 + o] = acc;
        }
    }
    let mut want = Vec::new();
    for out_t in 0..3i64 {
        for o in 0..3 {
            let m = (out_t * 2 - 1..=out_t * 2 + 1)
                .filter(|s| (0..5).contains(s))
                .map(|s| conv[s as usize * 3 + o])
                .fold(f64::NEG_INFINITY, f64::max);
            want.push(m);
        }
    }
    assert!(close(y.data(), &want, 1e-12));
}

#[test]
fn token_pool_2d_matches_direct_oracle() {
    let mut r = rng(5);
    let mut store = ParamStore::new();
    let pool = TokenPool2d::new(&mut store, "p", 2, 2, &mut r).unwrap();
    randomize(&mut store, &mut r, 1.0);
    let x = random(&mut r, &[2, 2, 2], 1.0);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let y = pool.forward(&ctx, tape.constant(x.clone())).unwrap().value();
    assert_eq!(y.shape(), &[1, 1, 2]);
    let w = store.get(pool.weight).data();
    let b = store.get(pool.bias).data();
    for o in 0..2 {
        // window centred on (0, 0): taps (1..3, 1..3) cover the whole 2×2 input
        let mut acc = b[o];
        for iy in 0..2 {
            for ix in 0..2 {
                for c in 0..2 {
                    acc += w[((o * 2 + c) * 3 + iy + 1) * 3 + ix + 1] * x.data()[(iy * 2 + ix) * 2 + c];
                }
            }
        }
        assert!((y.data()[o] - acc).abs() < 1e-12);
    }
}

#[test]
fn pooling_reproduces_reference_token_counts() {
    let mut r = rng(6);
    let mut store = ParamStore::new();
    let p1 = TokenPool1d::new(&mut store, "a", 1, 1, &mut r).unwrap();
    let p2 = TokenPool2d::new(&mut store, "b", 1, 1, &mut r).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    for chain in [[197, 99, 50], [785, 393, 197]] {
        let mut x = tape.constant(Tensor::zeros([chain[0], 1]));
        for &want in &chain[1..] {
            x = p1.forward(&ctx, x).unwrap();
            assert_eq!(x.shape()[0], want);
        }
    }
    let mut x = tape.constant(Tensor::zeros([28, 28, 1]));
    for want in [14, 7] {
        x = p2.forward(&ctx, x).unwrap();
        assert_eq!(x.shape(), vec![want, want, 1]);
    }
}

fn toy_2d(cells: CellChoice) -> Genotype {
    let patch = psvit_core::arch::PatchSpec {
        cls: false,
        ..toy_patch()
    };
    let stages = [(64, 8, 2), (16, 12, 2), (4, 16, 4)]
        .into_iter()
        .map(|(n, d, h)| StageSpec::with_cells(n, d, h, vec![cells]))
        .collect();
    Genotype::new(PoolingMode::TwoD, patch, stages, 10)
}

#[test]
fn model_parameter_count_matches_cost_model() {
    let mut cases = vec![preset("toy").unwrap(), preset("toy-sharing2").unwrap(), toy_2d(CellChoice::Basic)];
    cases.push(toy_2d(CellChoice::SharedPair));
    for g in cases {
        let m = VitModel::new(&g, &mut rng(7)).unwrap();
        assert_eq!(m.store.numel() as u64, count_params(&g, true).unwrap().total, "{}", g.cell_string());
    }
}

#[test]
fn model_shapes_and_maps() {
    for g in [preset("toy").unwrap(), toy_2d(CellChoice::SharedPair)] {
        let m = VitModel::new(&g, &mut rng(8)).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &m.store);
        let img = random(&mut rng(9), &[32, 32, 3], 1.0);
        let (logits, trace) = m.forward_traced(&ctx, &img).unwrap();
        assert_eq!(logits.shape(), vec![1, 10]);
        assert_eq!(trace.len(), g.depth());
        for (plan, maps) in g.layers().iter().zip(&trace) {
            let v = maps.to_values();
            assert_eq!(v.tokens(), plan.tokens);
            assert!(v.is_row_stochastic(1e-6));
        }
        assert_eq!(m.num_classes(), 10);
    }
}

#[test]
fn cls_head_ignores_other_tokens_and_gap_of_constant() {
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let cls = ClassifierHead::new(&mut store, "c", HeadMode::ClsToken, 4, 3, &mut r);
    let gap = ClassifierHead::new(&mut store, "g", HeadMode::Gap, 4, 3, &mut r);
    randomize(&mut store, &mut r, 1.0);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let a = random(&mut r, &[5, 4], 1.0);
    let mut b = a.clone();
    for v in &mut b.data_mut()[4..] {
        *v += 3.0;
    }
    let la = cls.forward(&ctx, tape.constant(a), true).unwrap().value();
    let lb = cls.forward(&ctx, tape.constant(b), true).unwrap().value();
    assert_eq!(la, lb);

    let c = [0.3, -1.2, 2.0, 0.7];
    let feats = Tensor::from_fn([6, 4], |i| c[i % 4]);
    let got = gap.forward(&ctx, tape.constant(feats), false).unwrap().value();
    let w = store.get(gap.linear.weight);
    let bias = store.get(gap.linear.bias);
    let mut want = mm(&c, w.data(), 1, 4, 3);
    for (v, b) in want.iter_mut().zip(bias.data()) {
        *v += b;
    }
    assert!(close(got.data(), &want, 1e-12));
}

#[test]
fn correlation_matches_covariance_formula() {
    let mut r = rng(11);
    for _ in 0..5 {
        let a = AttentionMaps::new(1, 4, row_stochastic(&mut r, 4)).unwrap();
        let b = AttentionMaps::new(1, 4, row_stochastic(&mut r, 4)).unwrap();
        let n = 16.0;
        let (x, y) = (a.data(), b.data());
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let sxx: f64 = x.iter().map(|p| p * p).sum();
        let syy: f64 = y.iter().map(|q| q * q).sum();
        let want = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
        let got = attention_correlation(&a, &b).unwrap()[0];
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}
