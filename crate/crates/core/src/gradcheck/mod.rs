//! Central finite-difference gradient checking.
//!
//! The checked function maps inputs (and the parameters in a store) to any
//! tensor `y`; the scalar probed is `sum(y ⊙ r)` for a fixed random `r`, so
//! every output element contributes. The relative error of a coordinate is
//! `|a − n| / max(|a|, |n|, 1e-3)` with analytic `a` and numeric `n`; the
//! floor keeps exact-zero gradients from dividing by zero. A coordinate whose
//! estimate disagrees is re-probed with a 100× smaller step, and the better of
//! the two estimates counts.

pub mod suite;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const REL_ERR_FLOOR: f64 = 1e-3;
/// Errors above this trigger a second estimate with a 100× smaller step.
const RETRY_ABOVE: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    /// Coordinates sampled per tensor; smaller tensors are checked fully.
    pub coords_per_tensor: usize,
    /// Step is `step_scale · max(1, |x|)`.
    pub step_scale: f64,
    pub seed: u64,
    pub include_params: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            coords_per_tensor: 12,
            step_scale: 1e-4,
            seed: 0,
            include_params: true,
        }
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

/// Returns the maximum relative error over the sampled input and parameter
/// coordinates.
pub fn max_rel_error<F>(store: &mut ParamStore, inputs: &[Tensor], opts: &CheckOptions, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &mut ParamStore, &[Var]) -> Result<Var>,
{
    let mut rng = Rng::new(opts.seed ^ 0x5eed);
    let eval = |store: &mut ParamStore, inputs: &[Tensor], weights: Option<&Tensor>| -> Result<(Tape, Var, Vec<Var>, Tensor)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let y = f(&mut tape, store, &vars)?;
        let r = match weights {
            Some(r) => r.clone(),
            None => {
                let mut wr = Rng::new(opts.seed ^ 0xfeed);
                let s = tape.shape(y);
                Tensor::from_vec(s, (0..s.numel()).map(|_| wr.range(-1.0, 1.0)).collect())?
            }
        };
        let rv = tape.constant(r.clone());
        let prod = tape.mul(y, rv)?;
        let loss = tape.sum(prod);
        Ok((tape, loss, vars, r))
    };

    let (mut tape, loss, vars, r) = eval(store, inputs, None)?;
    tape.backward(loss)?;
    store.zero_grads();
    store.accumulate_grads(&tape);
    let input_grads: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(tape);

    let probe = |store: &mut ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let (tape, loss, _, _) = eval(store, inputs, Some(&r))?;
        Ok(tape.value(loss).item())
    };

    // Central difference at step `h`, then at `h / 100` when the first
    // estimate disagrees: a ReLU-type kink inside `[x − h, x + h]` spoils the
    // wide estimate but usually leaves the narrow one, while a wrong
    // analytic gradient disagrees at every step.
    let coord_err = |a: f64, h: f64, diff: &mut dyn FnMut(f64) -> Result<f64>| -> Result<f64> {
        let wide = rel_err(a, diff(h)?);
        if wide <= RETRY_ABOVE {
            return Ok(wide);
        }
        Ok(wide.min(rel_err(a, diff(h / 100.0)?)))
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, g) in input_grads.iter().enumerate() {
        for idx in sample_coords(work[ti].numel(), opts.coords_per_tensor, &mut rng) {
            let x0 = work[ti].data()[idx];
            let mut diff = |h: f64| -> Result<f64> {
                work[ti].data_mut()[idx] = x0 + h;
                let lp = probe(store, &work)?;
                work[ti].data_mut()[idx] = x0 - h;
                let lm = probe(store, &work)?;
                work[ti].data_mut()[idx] = x0;
                Ok((lp - lm) / (2.0 * h))
            };
            let h = opts.step_scale * x0.abs().max(1.0);
            worst = worst.max(coord_err(g.data()[idx], h, &mut diff)?);
        }
    }

    if opts.include_params {
        let names: Vec<String> = store.params().map(|p| p.name.clone()).collect();
        for name in names {
            let id = store.id(&name).expect("listed above");
            let g = store.param(id).grad.clone().expect("accumulated above");
            for idx in sample_coords(g.numel(), opts.coords_per_tensor, &mut rng) {
                let x0 = store.param(id).value.data()[idx];
                let mut diff = |h: f64| -> Result<f64> {
                    store.param_mut(id).value.data_mut()[idx] = x0 + h;
                    let lp = probe(store, inputs)?;
                    store.param_mut(id).value.data_mut()[idx] = x0 - h;
                    let lm = probe(store, inputs)?;
                    store.param_mut(id).value.data_mut()[idx] = x0;
                    Ok((lp - lm) / (2.0 * h))
                };
                let h = opts.step_scale * x0.abs().max(1.0);
                worst = worst.max(coord_err(g.data()[idx], h, &mut diff)?);
            }
        }
    }
    Ok(worst)
}

fn sample_coords(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    (0..k).map(|_| rng.below(n)).collect()
}
