//! Checks shared by the unit-style tests and the acceptance report.

use psvit_core::arch::{CellChoice, Genotype, PatchSpec, PoolingMode, StageSpec};
use psvit_core::layers::{Ctx, EncoderLayer, EncoderLayerConfig, ImageClassifier, ParamId, ParamStore, VitModel};
use psvit_core::{Tape, Tensor, Var};

use super::fd::{op_error, store_error};
use super::{random, randomize, rng};

fn copy_param(store: &mut ParamStore, from: ParamId, to: ParamId) {
    let t = store.get(from).clone();
    store.set(to, t).unwrap();
}

/// A sharing layer fed a basic layer's maps, with the basic layer's remaining
/// weights, against that basic layer. Returns the largest output difference and
/// whether the maps were passed through unchanged.
pub fn sharing_gap(seed: u64) -> (f64, bool) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let basic = EncoderLayer::new(&mut store, "a", EncoderLayerConfig::new(8, 2, false), &mut r).unwrap();
    let shared = EncoderLayer::new(&mut store, "b", EncoderLayerConfig::new(8, 2, true), &mut r).unwrap();
    randomize(&mut store, &mut r, 0.5);
    let pairs = [
        (basic.norm1.params(), shared.norm1.params()),
        (basic.attn.value.params(), shared.attn.value.params()),
        (basic.attn.proj.params(), shared.attn.proj.params()),
        (basic.norm2.params(), shared.norm2.params()),
        (basic.fc1.params(), shared.fc1.params()),
        (basic.fc2.params(), shared.fc2.params()),
    ];
    for (from, to) in pairs {
        for (f, t) in from.into_iter().zip(to) {
            copy_param(&mut store, f, t);
        }
    }
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let x = tape.constant(random(&mut r, &[5, 8], 1.0));
    let (want, maps) = basic.forward(&ctx, x, None).unwrap();
    let (got, passed) = shared.forward(&ctx, x, Some(&maps)).unwrap();
    (want.value().max_abs_diff(&got.value()), passed.to_values() == maps.to_values())
}

fn t(seed: u64, shape: &[usize]) -> Tensor {
    random(&mut rng(seed), shape, 1.0)
}

/// Worst gradient error of every differentiable op, by name.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    vec![
        ("add", op_error(&[t(1, &[3, 4]), t(2, &[3, 4])], |_, v| v[0].add(v[1]))),
        ("sub", op_error(&[t(1, &[3, 4]), t(2, &[3, 4])], |_, v| v[0].sub(v[1]))),
        ("mul", op_error(&[t(1, &[3, 4]), t(2, &[3, 4])], |_, v| v[0].mul(v[1]))),
        ("scale", op_error(&[t(3, &[2, 5])], |_, v| Ok(v[0].scale(-1.7)))),
        ("add_bias", op_error(&[t(1, &[3, 4]), t(2, &[4])], |_, v| v[0].add_bias(v[1]))),
        ("transpose", op_error(&[t(4, &[3, 2])], |_, v| v[0].transpose())),
        ("reshape", op_error(&[t(5, &[3, 4])], |_, v| v[0].reshape([2, 6]))),
        ("slice_cols", op_error(&[t(6, &[3, 5])], |_, v| v[0].slice_cols(1, 4))),
        ("slice_rows", op_error(&[t(7, &[4, 3])], |_, v| v[0].slice_rows(1, 3))),
        ("concat_cols", op_error(&[t(8, &[3, 2]), t(9, &[3, 1])], |_, v| Var::concat_cols(&[v[0], v[1]]))),
        ("concat_rows", op_error(&[t(8, &[2, 3]), t(9, &[1, 3])], |_, v| Var::concat_rows(&[v[0], v[1]]))),
        ("gelu", op_error(&[t(10, &[3, 4])], |_, v| Ok(v[0].gelu()))),
        ("sum", op_error(&[t(11, &[2, 3])], |_, v| Ok(v[0].sum()))),
        ("matmul", op_error(&[t(1, &[3, 4]), t(2, &[4, 2])], |_, v| v[0].matmul(v[1]))),
        ("linear", op_error(&[t(1, &[3, 4]), t(2, &[4, 5]), t(3, &[5])], |_, v| v[0].linear(v[1], v[2]))),
        ("softmax axis 1", op_error(&[t(1, &[3, 4])], |_, v| v[0].softmax(1))),
        ("softmax axis 0", op_error(&[t(2, &[3, 4])], |_, v| v[0].softmax(0))),
        ("layer_norm", op_error(&[t(3, &[3, 6]), t(4, &[6]), t(5, &[6])], |_, v| v[0].layer_norm(v[1], v[2], 1e-6))),
        ("mean rows", op_error(&[t(6, &[3, 4])], |_, v| v[0].mean(&[0]))),
        ("mean all", op_error(&[t(7, &[2, 3, 2])], |_, v| v[0].mean(&[0, 2]))),
        ("cross_entropy", op_error(&[t(8, &[4, 5])], |_, v| v[0].cross_entropy(&[0, 3, 4, 3], 0.1))),
        ("maxpool1d", op_error(&[t(1, &[7, 3])], |_, v| v[0].maxpool1d(3, 2, 1))),
        ("conv1d", op_error(&[t(2, &[6, 2]), t(3, &[3, 2, 3]), t(4, &[3])], |_, v| v[0].conv1d(v[1], v[2], 3, 1, 1))),
        ("conv1d strided", op_error(&[t(2, &[7, 2]), t(3, &[2, 2, 3]), t(4, &[2])], |_, v| v[0].conv1d(v[1], v[2], 3, 2, 0))),
        ("conv2d", op_error(&[t(5, &[4, 4, 2]), t(6, &[3, 2, 3, 3]), t(7, &[3])], |_, v| v[0].conv2d(v[1], v[2], 3, 2, 1))),
        ("conv2d stride 1", op_error(&[t(5, &[3, 3, 1]), t(6, &[2, 1, 3, 3]), t(7, &[2])], |_, v| v[0].conv2d(v[1], v[2], 3, 1, 1))),
    ]
}

fn pair_loss<'t>(ctx: &Ctx<'t>, first: &EncoderLayer, layer: &EncoderLayer, x: &Tensor, w: &Tensor) -> Var<'t> {
    let (y, maps) = first.forward(ctx, ctx.constant(x.clone()), None).unwrap();
    let (z, _) = layer.forward(ctx, y, Some(&maps)).unwrap();
    z.mul(ctx.constant(w.clone())).unwrap().sum()
}

/// Two stacked encoder layers, the second basic or sharing.
pub fn encoder_pair_error(share: bool) -> f64 {
    let mut r = rng(20);
    let mut store = ParamStore::new();
    let first = EncoderLayer::new(&mut store, "a", EncoderLayerConfig::new(8, 2, false), &mut r).unwrap();
    let layer = EncoderLayer::new(&mut store, "b", EncoderLayerConfig::new(8, 2, share), &mut r).unwrap();
    randomize(&mut store, &mut r, 0.4);
    let x = random(&mut r, &[5, 8], 1.0);
    let w = random(&mut r, &[5, 8], 1.0);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    pair_loss(&ctx, &first, &layer, &x, &w).backward().unwrap();
    let grads = ctx.grads();
    assert_eq!(grads.len(), store.len());
    store_error(&store, |c| pair_loss(c, &first, &layer, &x, &w).value().item().unwrap(), &grads)
}

/// Three-stage 1D model (with a sharing pair) and two-stage 2D model, dims ≤ 16.
pub fn small_models() -> [Genotype; 2] {
    let patch = PatchSpec { image: 8, patch: 2, channels: 2, cls: true };
    let stages = vec![
        StageSpec::with_cells(17, 8, 2, vec![CellChoice::Basic]),
        StageSpec::with_cells(9, 12, 2, vec![CellChoice::SharedPair]),
        StageSpec::with_cells(5, 16, 4, vec![CellChoice::Basic]),
    ];
    let one_d = Genotype::new(PoolingMode::OneD, patch, stages, 3);
    let patch2 = PatchSpec { cls: false, ..patch };
    let stages2 = vec![
        StageSpec::with_cells(16, 8, 2, vec![CellChoice::SharedPair]),
        StageSpec::with_cells(4, 16, 4, vec![CellChoice::Basic]),
    ];
    let two_d = Genotype::new(PoolingMode::TwoD, patch2, stages2, 3);
    [one_d, two_d]
}

/// Every parameter of a whole model under a label-smoothed batch loss.
pub fn model_error(g: &Genotype) -> f64 {
    let mut r = rng(21);
    let mut m = VitModel::new(g, &mut r).unwrap();
    randomize(&mut m.store, &mut r, 0.3);
    let side = g.patch.image;
    let imgs = [random(&mut r, &[side, side, g.patch.channels], 1.0), random(&mut r, &[side, side, g.patch.channels], 1.0)];
    let refs: Vec<&Tensor> = imgs.iter().collect();
    let loss = |ctx: &Ctx<'_>| -> f64 {
        m.batch_logits(ctx, &refs).unwrap().cross_entropy(&[1, 2], 0.1).unwrap().value().item().unwrap()
    };
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &m.store);
    m.batch_logits(&ctx, &refs).unwrap().cross_entropy(&[1, 2], 0.1).unwrap().backward().unwrap();
    let grads = ctx.grads();
    assert_eq!(grads.len(), m.store.len());
    store_error(&m.store, loss, &grads)
}
