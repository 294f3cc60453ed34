//! Central finite differences against the tape's gradients.

use psvit_core::layers::{Ctx, ParamId, ParamStore};
use psvit_core::{Result, Tape, Tensor, Var};

use super::{random, rng};

pub const H: f64 = 1e-5;

pub fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / fd.abs().max(1.0)
}

/// Reduces any output to a scalar through a fixed random weighting so every
/// output element carries a distinct cotangent.
fn scalarize<'t>(tape: &'t Tape, out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    if out.shape().is_empty() {
        return Ok(out);
    }
    let w = tape.constant(random(&mut rng(seed), &out.shape(), 1.0));
    Ok(out.mul(w)?.sum())
}

/// Worst relative error of `f`'s gradient over every entry of every input.
pub fn op_error(inputs: &[Tensor], f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>) -> f64 {
    let eval = |vals: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars).unwrap();
        scalarize(&tape, out, 99).unwrap().value().item().unwrap()
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = scalarize(&tape, f(&tape, &vars).unwrap(), 99).unwrap();
    loss.backward().unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let g = v.grad().expect("input reached by loss");
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(g.data()[j], fd));
        }
    }
    worst
}

/// Worst relative error of `ad` against d(loss)/d(param) for every entry it covers.
pub fn store_error(store: &ParamStore, loss: impl Fn(&Ctx<'_>) -> f64, ad: &[(ParamId, Tensor)]) -> f64 {
    let mut worst = 0.0f64;
    let mut scratch = store.clone();
    for (id, g) in ad {
        for j in 0..g.numel() {
            let base = store.get(*id).data()[j];
            scratch.get_mut(*id).data_mut()[j] = base + H;
            let plus = loss(&Ctx::new(&Tape::new(), &scratch));
            scratch.get_mut(*id).data_mut()[j] = base - H;
            let minus = loss(&Ctx::new(&Tape::new(), &scratch));
            scratch.get_mut(*id).data_mut()[j] = base;
            worst = worst.max(rel_err(g.data()[j], (plus - minus) / (2.0 * H)));
        }
    }
    worst
}
