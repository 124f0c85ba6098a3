#![allow(dead_code)]

pub mod oracles;

use tinyformer::{Init, Shape, Tensor};

pub fn uniform(shape: Shape, seed: u64) -> Tensor {
    Tensor::create(shape, Init::Uniform { seed, lo: -1.0, hi: 1.0 }).unwrap()
}

pub fn linf(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_abs_diff(b)
}
