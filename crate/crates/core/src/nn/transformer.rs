use super::{Activation, Builder, Ctx};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::param::ParamId;
use crate::tensor::Shape;

/// Row-wise affine map on token tensors `(n, 1, t, d_in)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = b.trunc_normal("weight", Shape::new(1, 1, d_in, d_out), 0.02)?;
        let bias = if bias {
            Some(b.constant("bias", Shape::new(1, 1, 1, d_out), 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias, d_in, d_out })
    }

    /// Kaiming-uniform weights over `d_in` and a zero bias, for layers
    /// followed by a ReLU.
    pub fn kaiming(b: &mut Builder<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = b.kaiming_uniform("weight", Shape::new(1, 1, d_in, d_out), d_in)?;
        let bias = Some(b.constant("bias", Shape::new(1, 1, 1, d_out), 0.0)?);
        Ok(Self { weight, bias, d_in, d_out })
    }

    /// Like [`Linear::new`] with a bias whose entries all start at `bias`.
    pub fn with_bias(b: &mut Builder<'_>, d_in: usize, d_out: usize, bias: f64) -> Result<Self> {
        let weight = b.trunc_normal("weight", Shape::new(1, 1, d_in, d_out), 0.02)?;
        let bias = Some(b.constant("bias", Shape::new(1, 1, 1, d_out), bias)?);
        Ok(Self { weight, bias, d_in, d_out })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|id| ctx.param(id));
        ctx.tape.linear(x, w, b)
    }
}

/// Two linear layers with a hidden width of `ratio · d` and an activation in
/// between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new(b: &mut Builder<'_>, d: usize, hidden: usize, d_out: usize, act: Activation) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut b.sub("fc1"), d, hidden, true)?,
            fc2: Linear::new(&mut b.sub("fc2"), hidden, d_out, true)?,
            act,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = self.act.apply(ctx.tape, h);
        self.fc2.forward(ctx, h)
    }
}

/// Scaled dot-product attention over `heads` heads with bias-free
/// projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub d: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder<'_>, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::InvalidArgument(format!("width {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            wq: Linear::new(&mut b.sub("q"), d, d, false)?,
            wk: Linear::new(&mut b.sub("k"), d, d, false)?,
            wv: Linear::new(&mut b.sub("v"), d, d, false)?,
            wo: Linear::new(&mut b.sub("o"), d, d, false)?,
            d,
            heads,
        })
    }

    fn split_heads(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x);
        let r = ctx.tape.reshape(x, Shape::new(s.n(), s.h(), self.heads, self.d / self.heads))?;
        ctx.tape.permute(r, [0, 2, 1, 3])
    }

    /// `q` is `(n, 1, t_q, d)`; `k` and `v` are `(n, 1, t_kv, d)`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, q: Var, k: Var, v: Var) -> Result<Var> {
        let (sq, sk) = (ctx.tape.shape(q), ctx.tape.shape(k));
        if sq.c() != 1 || sk.c() != 1 || sq.n() != sk.n() || ctx.tape.shape(v) != sk {
            return Err(Error::Shape {
                op: "attention",
                detail: format!("q {sq:?}, k {sk:?}, v {:?}", ctx.tape.shape(v)),
            });
        }
        let qp = self.wq.forward(ctx, q)?;
        let kp = self.wk.forward(ctx, k)?;
        let vp = self.wv.forward(ctx, v)?;
        let qh = self.split_heads(ctx, qp)?;
        let kh = self.split_heads(ctx, kp)?;
        let vh = self.split_heads(ctx, vp)?;
        let dh = (self.d / self.heads) as f64;
        let scores = ctx.tape.matmul(qh, kh, false, true)?;
        let scores = ctx.tape.scale(scores, 1.0 / dh.sqrt());
        let attn = ctx.tape.softmax(scores);
        let out = ctx.tape.matmul(attn, vh, false, false)?;
        let merged = ctx.tape.permute(out, [0, 2, 1, 3])?;
        let merged = ctx.tape.reshape(merged, Shape::new(sq.n(), 1, sq.h(), self.d))?;
        self.wo.forward(ctx, merged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::param::ParamStore;
    use crate::tensor::{Init, Tensor};

    fn mat(t: &Tensor) -> Vec<Vec<f64>> {
        let [_, _, r, c] = t.shape().0;
        (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
    }

    fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.iter()
            .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
            .collect()
    }

    /// Scalar-loop attention for a single batch element.
    fn attention_oracle(m: &MultiHeadAttention, store: &ParamStore, q: &[Vec<f64>], kv: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let w = |l: &Linear| mat(&store.param(l.weight).value);
        let (qp, kp, vp) = (matmul(q, &w(&m.wq)), matmul(kv, &w(&m.wk)), matmul(kv, &w(&m.wv)));
        let dh = m.d / m.heads;
        let mut merged = vec![vec![0.0; m.d]; q.len()];
        for h in 0..m.heads {
            for i in 0..q.len() {
                let mut s: Vec<f64> = (0..kv.len())
                    .map(|j| (0..dh).map(|e| qp[i][h * dh + e] * kp[j][h * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                s.iter_mut().for_each(|v| *v = (*v - mx).exp());
                let z: f64 = s.iter().sum();
                for e in 0..dh {
                    merged[i][h * dh + e] = (0..kv.len()).map(|j| s[j] / z * vp[j][h * dh + e]).sum();
                }
            }
        }
        matmul(&merged, &w(&m.wo))
    }

    fn run(m: &MultiHeadAttention, store: &mut ParamStore, q: &Tensor, kv: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let (qv, kvv) = (tape.constant(q.clone()), tape.constant(kv.clone()));
        let mut ctx = Ctx::new(&mut tape, store, false);
        let y = m.forward(&mut ctx, qv, kvv, kvv).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn attention_matches_scalar_oracle() {
        for (heads, tq, tk) in [(1, 3, 5), (4, 6, 2), (2, 1, 7)] {
            let mut store = ParamStore::new();
            let m = MultiHeadAttention::new(&mut Builder::new(&mut store, 9), 8, heads).unwrap();
            for id in [m.wq.weight, m.wk.weight, m.wv.weight, m.wo.weight] {
                // widen the weights so the softmax is far from uniform
                store.param_mut(id).value.data_mut().iter_mut().for_each(|v| *v *= 25.0);
            }
            let q = Tensor::create(Shape::new(1, 1, tq, 8), Init::Normal { seed: 1, mean: 0.0, std: 1.0 }).unwrap();
            let kv = Tensor::create(Shape::new(1, 1, tk, 8), Init::Normal { seed: 2, mean: 0.0, std: 1.0 }).unwrap();
            let got = mat(&run(&m, &mut store, &q, &kv));
            let want = attention_oracle(&m, &store, &mat(&q), &mat(&kv));
            for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
                assert!((g - w).abs() < 1e-10, "heads={heads}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn single_key_returns_projected_value() {
        let mut store = ParamStore::new();
        let m = MultiHeadAttention::new(&mut Builder::new(&mut store, 4), 4, 2).unwrap();
        let q = Tensor::create(Shape::new(1, 1, 3, 4), Init::Normal { seed: 5, mean: 0.0, std: 3.0 }).unwrap();
        let kv = Tensor::create(Shape::new(1, 1, 1, 4), Init::Normal { seed: 6, mean: 0.0, std: 1.0 }).unwrap();
        let got = run(&m, &mut store, &q, &kv);
        let w = |l: &Linear| mat(&store.param(l.weight).value);
        let expect = matmul(&matmul(&mat(&kv), &w(&m.wv)), &w(&m.wo));
        for row in mat(&got) {
            for (g, e) in row.iter().zip(&expect[0]) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_queries_average_values_uniformly() {
        let mut store = ParamStore::new();
        let m = MultiHeadAttention::new(&mut Builder::new(&mut store, 4), 4, 1).unwrap();
        let q = Tensor::zeros(Shape::new(1, 1, 2, 4));
        let kv = Tensor::create(Shape::new(1, 1, 5, 4), Init::Normal { seed: 7, mean: 0.0, std: 1.0 }).unwrap();
        let got = run(&m, &mut store, &q, &kv);
        let kvm = mat(&kv);
        let mean: Vec<f64> = (0..4).map(|j| kvm.iter().map(|r| r[j]).sum::<f64>() / 5.0).collect();
        let w = |l: &Linear| mat(&store.param(l.weight).value);
        let expect = matmul(&matmul(&[mean], &w(&m.wv)), &w(&m.wo));
        for (g, e) in mat(&got)[1].iter().zip(&expect[0]) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_hand_computed() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut Builder::new(&mut store, 0), 2, 2, 1, Activation::Relu).unwrap();
        store.assign("fc1.weight", Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, -1.0, 2.0, 1.0]).unwrap()).unwrap();
        store.assign("fc1.bias", Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, -5.0]).unwrap()).unwrap();
        store.assign("fc2.weight", Tensor::from_vec(Shape::new(1, 1, 2, 1), vec![3.0, 7.0]).unwrap()).unwrap();
        store.assign("fc2.bias", Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.5]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap());
        let mut ctx = Ctx::new(&mut tape, &mut store, false);
        let y = mlp.forward(&mut ctx, x).unwrap();
        // hidden = relu([1+4, -1+2-5]) = [5, 0]; out = 15 + 0.5
        assert_eq!(tape.value(y).item(), 15.5);
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(MultiHeadAttention::new(&mut Builder::new(&mut ParamStore::new(), 0), 6, 4).is_err());
    }
}
