//! Dense rank-4 tensors in `(batch, channel, height, width)` order.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Four extents `(n, c, h, w)`. Matrices and token sequences use the
/// trailing two axes and keep leading extents at 1.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self([n, c, h, w])
    }

    pub const fn scalar() -> Self {
        Self([1, 1, 1, 1])
    }

    /// Shape of an `r × s` matrix view.
    pub const fn matrix(r: usize, s: usize) -> Self {
        Self([1, 1, r, s])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn checked_numel(&self) -> Result<usize> {
        self.0
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or(Error::Overflow)
    }

    /// Product of extents before `axis` and after it.
    pub(crate) fn outer_inner(&self, axis: usize) -> (usize, usize) {
        let outer = self.0[..axis].iter().product();
        let inner = self.0[axis + 1..].iter().product();
        (outer, inner)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n}, {c}, {h}, {w})")
    }
}

/// Initialization recipe for [`Tensor::create`].
#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Uniform { seed: u64, lo: f64, hi: f64 },
    Normal { seed: u64, mean: f64, std: f64 },
    Literal(Vec<f64>),
}

/// Row-major `f64` storage; `data.len() == shape.numel()` always holds.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn create(shape: Shape, init: Init) -> Result<Self> {
        let len = shape.checked_numel()?;
        let data = match init {
            Init::Zeros => vec![0.0; len],
            Init::Ones => vec![1.0; len],
            Init::Uniform { seed, lo, hi } => {
                let mut rng = Rng::new(seed);
                (0..len).map(|_| rng.range(lo, hi)).collect()
            }
            Init::Normal { seed, mean, std } => {
                let mut rng = Rng::new(seed);
                (0..len).map(|_| rng.normal(mean, std)).collect()
            }
            Init::Literal(values) => {
                if values.len() != len {
                    return Err(Error::Shape {
                        op: "tensor_create",
                        detail: format!("literal has {} values, shape {:?} needs {len}", values.len(), shape),
                    });
                }
                values
            }
        };
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            data: vec![0.0; shape.numel()],
            shape,
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            data: vec![value; shape.numel()],
            shape,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        Self::create(shape, Init::Literal(data))
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Shape::scalar(),
            data: vec![v],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, sc, sh, sw] = self.shape.0;
        self.data[((n * sc + c) * sh + h) * sw + w]
    }

    pub fn reshaped(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOW: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOW).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.4}")?;
        }
        if self.data.len() > SHOW {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_literal() {
        let z = Tensor::create(Shape::new(1, 1, 2, 2), Init::Zeros).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let l = Tensor::create(Shape::scalar(), Init::Literal(vec![3.5])).unwrap();
        assert_eq!(l.data(), &[3.5]);
    }

    #[test]
    fn literal_length_mismatch() {
        let r = Tensor::create(Shape::new(1, 1, 2, 2), Init::Literal(vec![1.0; 3]));
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn extent_overflow() {
        let s = Shape::new(usize::MAX, 2, 1, 1);
        assert!(matches!(Tensor::create(s, Init::Zeros), Err(Error::Overflow)));
    }

    #[test]
    fn seeded_uniform_is_reproducible() {
        let s = Shape::new(1, 2, 2, 2);
        let init = Init::Uniform { seed: 7, lo: 0.0, hi: 1.0 };
        let a = Tensor::create(s, init.clone()).unwrap();
        let b = Tensor::create(s, init).unwrap();
        // Oracle: drive the documented generator directly.
        let mut rng = Rng::new(7);
        let expect: Vec<f64> = (0..8).map(|_| rng.range(0.0, 1.0)).collect();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.data(), &expect[..]);
        assert!(a.data().iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn zero_extent_is_allowed() {
        let t = Tensor::create(Shape::new(0, 3, 4, 4), Init::Ones).unwrap();
        assert_eq!(t.numel(), 0);
    }
}
