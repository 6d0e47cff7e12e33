//! Reverse-mode automatic differentiation over coarse, fused operations.

use super::kernels::{
    attention_backward, attention_forward, gelu, gelu_grad, layer_norm_backward, layer_norm_rows,
    masked_softmax, Rows,
};
use super::tensor::{gemm, Float, Tensor};
use super::EncoderError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type Backward<F> = Box<dyn FnOnce(&Tensor<F>) -> Vec<Tensor<F>>>;

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, F),
    AddConst(Var),
    Sum(Vec<Var>),
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        means: Vec<F>,
        rstds: Vec<F>,
    },
    Gelu(Var),
    Embed {
        table: Var,
        pos: Var,
        ids: Vec<u32>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<F>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<F>,
        probs: Vec<F>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: Option<Backward<F>>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Records a computation for one backward pass.
pub struct Tape<F: Float> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Tape { nodes: Vec::new() }
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// Adds a `1 x n` row vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((bv.rows, bv.cols), (1, av.cols), "bias shape");
        let mut out = av.clone();
        for r in out.data.chunks_exact_mut(av.cols) {
            for (x, &y) in r.iter_mut().zip(&bv.data) {
                *x += y;
            }
        }
        self.push(out, Op::AddBias(a, b))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x *= s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_const(&mut self, a: Var, c: F) -> Var {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x += c);
        self.push(out, Op::AddConst(a))
    }

    /// Sum of scalars.
    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let s = xs.iter().map(|&v| self.value(v).scalar()).sum();
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::Sum(xs.to_vec()))
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        let (means, rstds) = layer_norm_rows(
            &xv.data,
            xv.cols,
            &self.value(g).data,
            &self.value(b).data,
            &mut out.data,
        );
        self.push(
            out,
            Op::LayerNorm {
                x,
                g,
                b,
                means,
                rstds,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = gelu(*v));
        self.push(out, Op::Gelu(x))
    }

    /// `table[ids[i]] + pos[i]` for every position `i`.
    pub fn embed(&mut self, table: Var, pos: Var, ids: &[u32]) -> Var {
        let (t, p) = (self.value(table), self.value(pos));
        assert!(ids.len() <= p.rows, "sequence longer than the positional table");
        let d = t.cols;
        let mut out = Tensor::zeros(ids.len(), d);
        for (i, &id) in ids.iter().enumerate() {
            let row = out.row_mut(i);
            for ((o, &a), &b) in row.iter_mut().zip(t.row(id as usize)).zip(p.row(i)) {
                *o = a + b;
            }
        }
        self.push(
            out,
            Op::Embed {
                table,
                pos,
                ids: ids.to_vec(),
            },
        )
    }

    /// Causal multi-head self-attention on a packed `L x 3d` `[q | k | v]` input.
    pub fn causal_attention(&mut self, qkv: Var, heads: usize) -> Var {
        let v = self.value(qkv);
        let (l, d) = (v.rows, v.cols / 3);
        let rows = |c: usize| Rows {
            data: &v.data[c..],
            rows: l,
            rs: 3 * d,
        };
        let mut out = Tensor::zeros(l, d);
        let probs = attention_forward(rows(0), rows(d), rows(2 * d), 0, d, heads, &mut out.data);
        self.push(out, Op::Attention { qkv, heads, probs })
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(rows.len(), xv.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// `sum_i weights[i] * -log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[F]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len());
        assert_eq!(lv.rows, weights.len());
        let mut probs = Vec::with_capacity(lv.data.len());
        let mut loss = F::zero();
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            let row = lv.row(i);
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<F>().ln();
            loss += w * (lse - row[t]);
            probs.extend(masked_softmax(row, None));
        }
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        )
    }

    /// Records an externally defined operation. `backward` maps the output
    /// gradient to one gradient per input, in order.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<F>,
        backward: impl FnOnce(&Tensor<F>) -> Vec<Tensor<F>> + 'static,
    ) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Some(Box::new(backward)),
            },
        )
    }

    /// Gradients of the scalar `loss` with respect to the first `n_leaves`
    /// recorded values (zeros where the loss does not depend on them).
    pub fn backward(mut self, loss: Var, n_leaves: usize) -> Vec<Tensor<F>> {
        assert_eq!(self.value(loss).data.len(), 1, "loss must be a scalar");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, F::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            if matches!(op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(op, &g, &mut grads);
        }
        (0..n_leaves)
            .map(|i| {
                grads[i].take().unwrap_or_else(|| {
                    let v = &self.nodes[i].value;
                    Tensor::zeros(v.rows, v.cols)
                })
            })
            .collect()
    }

    fn propagate(&self, op: Op<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let mut acc = |v: Var, t: Tensor<F>| match &mut grads[v.0] {
            Some(e) => e.add_assign(&t),
            slot => *slot = Some(t),
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let mut da = Tensor::zeros(av.rows, av.cols);
                gemm(F::one(), g.view(), bv.view().t(), F::zero(), da.view_mut());
                let mut db = Tensor::zeros(bv.rows, bv.cols);
                gemm(F::one(), av.view().t(), g.view(), F::zero(), db.view_mut());
                acc(a, da);
                acc(b, db);
            }
            Op::AddBias(a, b) => {
                let mut db = Tensor::zeros(1, g.cols);
                for r in g.data.chunks_exact(g.cols) {
                    for (x, &y) in db.data.iter_mut().zip(r) {
                        *x += y;
                    }
                }
                acc(a, g.clone());
                acc(b, db);
            }
            Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.data.iter_mut().for_each(|x| *x *= s);
                acc(a, d);
            }
            Op::AddConst(a) => acc(a, g.clone()),
            Op::Sum(xs) => {
                for x in xs {
                    acc(x, g.clone());
                }
            }
            Op::LayerNorm {
                x,
                g: gamma,
                b,
                means,
                rstds,
            } => {
                let xv = val(x);
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                let mut dg = Tensor::zeros(1, xv.cols);
                let mut db = Tensor::zeros(1, xv.cols);
                layer_norm_backward(
                    &xv.data,
                    xv.cols,
                    &val(gamma).data,
                    &means,
                    &rstds,
                    &g.data,
                    &mut dx.data,
                    &mut dg.data,
                    &mut db.data,
                );
                acc(x, dx);
                acc(gamma, dg);
                acc(b, db);
            }
            Op::Gelu(x) => {
                let xv = val(x);
                let mut dx = g.clone();
                for (d, &v) in dx.data.iter_mut().zip(&xv.data) {
                    *d *= gelu_grad(v);
                }
                acc(x, dx);
            }
            Op::Embed { table, pos, ids } => {
                let (tv, pv) = (val(table), val(pos));
                let mut dt = Tensor::zeros(tv.rows, tv.cols);
                let mut dp = Tensor::zeros(pv.rows, pv.cols);
                for (i, &id) in ids.iter().enumerate() {
                    let gr = g.row(i);
                    for (x, &y) in dt.row_mut(id as usize).iter_mut().zip(gr) {
                        *x += y;
                    }
                    dp.row_mut(i).copy_from_slice(gr);
                }
                acc(table, dt);
                acc(pos, dp);
            }
            Op::Attention { qkv, heads, probs } => {
                let qv = val(qkv);
                let mut dq = Tensor::zeros(qv.rows, qv.cols);
                attention_backward(
                    &qv.data,
                    &probs,
                    &g.data,
                    qv.rows,
                    qv.cols / 3,
                    heads,
                    &mut dq.data,
                );
                acc(qkv, dq);
            }
            Op::GatherRows { x, rows } => {
                let xv = val(x);
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for (i, &r) in rows.iter().enumerate() {
                    for (a, &b) in dx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *a += b;
                    }
                }
                acc(x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let lv = val(logits);
                let c = lv.cols;
                let s = g.scalar();
                let mut dl = Tensor::from_vec(lv.rows, c, probs);
                for (i, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
                    let row = dl.row_mut(i);
                    row[t] -= F::one();
                    row.iter_mut().for_each(|x| *x *= w * s);
                }
                acc(logits, dl);
            }
            Op::Custom { inputs, backward } => {
                let backward = backward.expect("custom backward runs once");
                let gs = backward(g);
                assert_eq!(gs.len(), inputs.len(), "custom op gradient count");
                for (v, t) in inputs.into_iter().zip(gs) {
                    acc(v, t);
                }
            }
        }
    }
}

/// Runs `f` on a fresh tape whose first leaves are `params`, then returns the
/// loss and the gradient of every parameter.
pub fn grad<F, P>(
    params: &[Tensor<F>],
    f: P,
) -> Result<(F, Vec<Tensor<F>>), EncoderError>
where
    F: Float,
    P: FnOnce(&mut Tape<F>, &[Var]) -> Result<Var, EncoderError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.value(loss).scalar();
    if !value.is_finite() {
        return Err(EncoderError::NonFinite(format!("loss {value:?}")));
    }
    let grads = tape.backward(loss, vars.len());
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check<P>(params: Vec<Tensor<f64>>, f: P)
    where
        P: Fn(&mut Tape<f64>, &[Var]) -> Var + Copy,
    {
        let (_, grads) = grad(&params, |t, v| Ok(f(t, v))).unwrap();
        let eval = |ps: &[Tensor<f64>]| grad(ps, |t, v| Ok(f(t, v))).unwrap().0;
        for (pi, p) in params.iter().enumerate() {
            for j in 0..p.data.len() {
                let h = 1e-5;
                let mut plus = params.clone();
                plus[pi].data[j] += h;
                let mut minus = params.clone();
                minus[pi].data[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let g = grads[pi].data[j];
                assert!((fd - g).abs() < 1e-6 * (1.0 + g.abs()), "param {pi}[{j}]: fd {fd} vs {g}");
            }
        }
    }

    fn t(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut s = seed;
        let data = (0..rows * cols)
            .map(|_| {
                s = crate::util::mix64(s);
                (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    #[test]
    fn linear_gelu_layernorm_ce() {
        check(
            vec![t(3, 4, 1), t(4, 5, 2), t(1, 5, 3), t(1, 5, 4), t(1, 5, 5)],
            |tp, v| {
                let y = tp.linear(v[0], v[1], v[2]);
                let y = tp.gelu(y);
                let y = tp.layer_norm(y, v[3], v[4]);
                tp.cross_entropy(y, &[0, 3, 4], &[1.0, 0.5, 2.0])
            },
        );
    }

    #[test]
    fn embed_attention_gather() {
        // 5 positions, d = 4, 2 heads.
        check(vec![t(7, 4, 9), t(6, 4, 8), t(4, 12, 7), t(4, 3, 6)], |tp, v| {
            let x = tp.embed(v[0], v[1], &[1, 3, 3, 0, 6]);
            let qkv = tp.matmul(x, v[2]);
            let a = tp.causal_attention(qkv, 2);
            let a = tp.add(a, x);
            let r = tp.gather_rows(a, &[1, 4, 4]);
            let logits = tp.matmul(r, v[3]);
            let l = tp.cross_entropy(logits, &[2, 0, 1], &[1.0, 1.0, 0.3]);
            let l2 = tp.scale(l, 0.7);
            let l3 = tp.add_const(l2, 4.0);
            tp.sum(&[l3, l])
        });
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let ps = vec![t(2, 2, 1), t(2, 2, 2)];
        let (_, g) = grad(&ps, |tp, v| {
            let x = tp.gelu(v[0]);
            Ok(tp.cross_entropy(x, &[0, 1], &[1.0, 1.0]))
        })
        .unwrap();
        assert!(g[1].data.iter().all(|&x| x == 0.0));
    }
}
