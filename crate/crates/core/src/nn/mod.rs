//! Layers with forward passes recorded on a [`Tape`].
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; a [`Ctx`] bundles the tape,
//! the store and the train/eval flag for one forward pass.

mod conv;
mod norm;
mod transformer;

pub use conv::{Conv2d, ConvBlock};
pub use norm::{BatchNorm2d, LayerNorm};
pub use transformer::{Linear, Mlp, MultiHeadAttention};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::param::{BufferId, ParamId, ParamStore};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Shape, Tensor};

pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a mut ParamStore,
    pub train: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a mut ParamStore, train: bool) -> Self {
        Self { tape, store, train }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.store.leaf(self.tape, id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Silu => tape.silu(x),
            Activation::Gelu => tape.gelu(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// Registers parameters under a dotted name prefix. Each parameter's initial
/// values come from its own stream seeded by `(seed, full name)`.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            seed,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        let prefix = self.full(name);
        Builder {
            store: self.store,
            seed: self.seed,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn rng(&self, full: &str) -> Rng {
        Rng::new(derive_seed(self.seed, full))
    }

    fn param_with(&mut self, name: &str, shape: Shape, mut f: impl FnMut(&mut Rng) -> f64) -> Result<ParamId> {
        let full = self.full(name);
        let mut rng = self.rng(&full);
        self.store.get_or_insert(&full, shape, || {
            let data = (0..shape.numel()).map(|_| f(&mut rng)).collect();
            Tensor::from_vec(shape, data).expect("sized by shape")
        })
    }

    /// Kaiming-uniform over fan-in: `U(−√(6/fan_in), √(6/fan_in))`.
    pub fn kaiming_uniform(&mut self, name: &str, shape: Shape, fan_in: usize) -> Result<ParamId> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        self.param_with(name, shape, |r| r.range(-bound, bound))
    }

    pub fn trunc_normal(&mut self, name: &str, shape: Shape, std: f64) -> Result<ParamId> {
        self.param_with(name, shape, |r| r.trunc_normal(std))
    }

    pub fn constant(&mut self, name: &str, shape: Shape, value: f64) -> Result<ParamId> {
        self.param_with(name, shape, |_| value)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> Result<BufferId> {
        let full = self.full(name);
        self.store.get_or_insert_buffer(&full, value)
    }
}

/// `(n, c, h, w)` feature map to `(n, 1, h·w, c)` tokens, row-major over space.
pub fn to_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let [n, c, h, w] = tape.shape(x).0;
    let flat = tape.reshape(x, Shape::new(n, c, h * w, 1))?;
    tape.permute(flat, [0, 3, 2, 1])
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(tape: &mut Tape, t: Var, h: usize, w: usize) -> Result<Var> {
    let [n, _, _, c] = tape.shape(t).0;
    let p = tape.permute(t, [0, 3, 2, 1])?;
    tape.reshape(p, Shape::new(n, c, h, w))
}

/// Fixed 2-D sinusoidal embedding of a `h × w` grid as a `(1, 1, h·w, d)`
/// tensor. The first half of the channels encodes the row, the second half
/// the column; each half alternates sin/cos over geometric frequencies.
pub fn sincos_2d(h: usize, w: usize, d: usize) -> Tensor {
    let half = d / 2;
    let pairs = (half / 2).max(1);
    let mut data = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * d..(y * w + x + 1) * d];
            for (axis, pos) in [(0usize, y as f64), (1, x as f64)] {
                for i in 0..half {
                    let k = i / 2;
                    let freq = 1.0 / 10_000f64.powf(k as f64 / pairs as f64);
                    let v = if i % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
                    let col = axis * half + i;
                    if col < d {
                        row[col] = v;
                    }
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(1, 1, h * w, d), data).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_round_trip_is_row_major() {
        let mut tape = Tape::new();
        let x = Tensor::create(Shape::new(2, 3, 2, 4), crate::Init::Uniform { seed: 3, lo: 0.0, hi: 1.0 }).unwrap();
        let xv = tape.constant(x.clone());
        let t = to_tokens(&mut tape, xv).unwrap();
        assert_eq!(tape.shape(t), Shape::new(2, 1, 8, 3));
        // token index = y·w + x; channel is the last axis
        assert_eq!(tape.value(t).at(1, 0, 6, 2), x.at(1, 2, 1, 2));
        let back = from_tokens(&mut tape, t, 2, 4).unwrap();
        assert_eq!(tape.value(back), &x);
    }

    #[test]
    fn sincos_rows_are_distinct() {
        let e = sincos_2d(4, 4, 16);
        let rows: Vec<&[f64]> = e.data().chunks(16).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let d: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-6, "positions {i} and {j} collide");
            }
        }
    }
}
