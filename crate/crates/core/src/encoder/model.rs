use serde::{Deserialize, Serialize};

use super::kernels::{attention_forward, gelu, layer_norm_rows, masked_softmax, Rows};
use super::params::{normal_tensor, ParamSet};
use super::tape::{Tape, Var};
use super::tensor::{Float, Tensor};
use super::vocab::{TokenSeq, Vocab};
use super::EncoderError;
use crate::util::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Hidden width of the two prediction heads.
    pub head_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            n_blocks: 2,
            n_heads: 4,
            d_ff: 256,
            head_hidden: 64,
        }
    }
}

/// The two prediction heads on top of an EOS hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Logits over the next lab group.
    NextGroup,
    /// Logits `[negative, positive]` for the outcome.
    Outcome,
}

const PER_BLOCK: usize = 12;
const LN1_G: usize = 0;
const LN1_B: usize = 1;
const W_QKV: usize = 2;
const B_QKV: usize = 3;
const W_O: usize = 4;
const B_O: usize = 5;
const LN2_G: usize = 6;
const LN2_B: usize = 7;
const W_1: usize = 8;
const B_1: usize = 9;
const W_2: usize = 10;
const B_2: usize = 11;

/// Causal encoder weights plus its vocabulary.
///
/// Tensor order: token embedding, positional embedding, then per block
/// `ln1.{g,b}, qkv.{w,b}, out.{w,b}, ln2.{g,b}, ff1.{w,b}, ff2.{w,b}`, the
/// final norm `lnf.{g,b}`, and each head as `{w1, b1, w2, b2}` (next group,
/// then outcome).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F> {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub weights: ParamSet<F>,
}

impl<F: Float> EncoderParams<F> {
    pub fn init(config: EncoderConfig, vocab: Vocab, seed: u64) -> Result<Self, EncoderError> {
        let EncoderConfig {
            d_model: d,
            n_blocks,
            n_heads,
            d_ff,
            head_hidden,
        } = config;
        if d == 0 || n_heads == 0 || d % n_heads != 0 || d_ff == 0 || head_hidden == 0 {
            return Err(EncoderError::Shape(format!(
                "d_model {d} must be a positive multiple of n_heads {n_heads}"
            )));
        }
        vocab.check_layout()?;
        let mut rng = stream_rng(seed, 0xE4C0);
        let std = 0.02;
        let resid_std = std / ((2 * n_blocks.max(1)) as f64).sqrt();
        let ones = |n: usize| Tensor::filled(1, n, F::one());
        let zeros = |n: usize| Tensor::zeros(1, n);
        let mut w = ParamSet::default();
        w.push("tok_emb", normal_tensor(vocab.len(), d, std, &mut rng));
        w.push("pos_emb", normal_tensor(vocab.max_len, d, std, &mut rng));
        for b in 0..n_blocks {
            let p = |s: &str| format!("block{b}.{s}");
            w.push(p("ln1.g"), ones(d));
            w.push(p("ln1.b"), zeros(d));
            w.push(p("qkv.w"), normal_tensor(d, 3 * d, std, &mut rng));
            w.push(p("qkv.b"), zeros(3 * d));
            w.push(p("out.w"), normal_tensor(d, d, resid_std, &mut rng));
            w.push(p("out.b"), zeros(d));
            w.push(p("ln2.g"), ones(d));
            w.push(p("ln2.b"), zeros(d));
            w.push(p("ff1.w"), normal_tensor(d, d_ff, std, &mut rng));
            w.push(p("ff1.b"), zeros(d_ff));
            w.push(p("ff2.w"), normal_tensor(d_ff, d, resid_std, &mut rng));
            w.push(p("ff2.b"), zeros(d));
        }
        w.push("lnf.g", ones(d));
        w.push("lnf.b", zeros(d));
        let k = vocab.num_groups();
        for (name, out) in [("next", k), ("outcome", 2)] {
            w.push(
                format!("{name}.w1"),
                normal_tensor(d, head_hidden, (1.0 / d as f64).sqrt(), &mut rng),
            );
            w.push(format!("{name}.b1"), zeros(head_hidden));
            w.push(format!("{name}.w2"), normal_tensor(head_hidden, out, std, &mut rng));
            w.push(format!("{name}.b2"), zeros(out));
        }
        Ok(EncoderParams {
            config,
            vocab,
            weights: w,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.vocab.num_groups()
    }

    fn block(&self, b: usize) -> usize {
        2 + b * PER_BLOCK
    }

    fn lnf(&self) -> usize {
        2 + self.config.n_blocks * PER_BLOCK
    }

    fn head_base(&self, head: Head) -> usize {
        self.lnf()
            + 2
            + match head {
                Head::NextGroup => 0,
                Head::Outcome => 4,
            }
    }

    pub(crate) fn expected_shapes(config: &EncoderConfig, vocab: &Vocab) -> Vec<(usize, usize)> {
        let (d, f, h) = (config.d_model, config.d_ff, config.head_hidden);
        let mut s = vec![(vocab.len(), d), (vocab.max_len, d)];
        for _ in 0..config.n_blocks {
            s.extend([
                (1, d),
                (1, d),
                (d, 3 * d),
                (1, 3 * d),
                (d, d),
                (1, d),
                (1, d),
                (1, d),
                (d, f),
                (1, f),
                (f, d),
                (1, d),
            ]);
        }
        s.extend([(1, d), (1, d)]);
        for out in [vocab.num_groups(), 2] {
            s.extend([(d, h), (1, h), (h, out), (1, out)]);
        }
        s
    }

    /// Checks every tensor against the shapes implied by config and vocab.
    pub fn check_shapes(&self) -> Result<(), EncoderError> {
        let want = Self::expected_shapes(&self.config, &self.vocab);
        let got: Vec<_> = self.weights.tensors.iter().map(Tensor::shape).collect();
        if want != got {
            return Err(EncoderError::Shape(format!(
                "expected {} tensors with shapes {want:?}, found {got:?}",
                want.len()
            )));
        }
        Ok(())
    }

    pub fn cast<G: Float>(&self) -> EncoderParams<G> {
        EncoderParams {
            config: self.config,
            vocab: self.vocab.clone(),
            weights: self.weights.cast(),
        }
    }

    /// Final-normed hidden states of every position, recorded on `tape`.
    /// `v` holds the tape leaves of `self.weights`, in order.
    pub fn hidden_on_tape(&self, tape: &mut Tape<F>, v: &[Var], ids: &[u32]) -> Result<Var, EncoderError> {
        if ids.len() > self.vocab.max_len {
            return Err(EncoderError::TooLong {
                len: ids.len(),
                max: self.vocab.max_len,
            });
        }
        let mut x = tape.embed(v[0], v[1], ids);
        for b in 0..self.config.n_blocks {
            let p = |i: usize| v[self.block(b) + i];
            let h = tape.layer_norm(x, p(LN1_G), p(LN1_B));
            let qkv = tape.linear(h, p(W_QKV), p(B_QKV));
            let a = tape.causal_attention(qkv, self.config.n_heads);
            let o = tape.linear(a, p(W_O), p(B_O));
            x = tape.add(x, o);
            let h = tape.layer_norm(x, p(LN2_G), p(LN2_B));
            let f = tape.linear(h, p(W_1), p(B_1));
            let f = tape.gelu(f);
            let f = tape.linear(f, p(W_2), p(B_2));
            x = tape.add(x, f);
        }
        let f = self.lnf();
        Ok(tape.layer_norm(x, v[f], v[f + 1]))
    }

    pub fn head_on_tape(&self, tape: &mut Tape<F>, v: &[Var], head: Head, rows: Var) -> Var {
        let base = self.head_base(head);
        let h = tape.linear(rows, v[base], v[base + 1]);
        let h = tape.gelu(h);
        tape.linear(h, v[base + 2], v[base + 3])
    }

    /// Head logits for one hidden state, without recording gradients.
    pub fn head_logits(&self, head: Head, hidden: &[F]) -> Vec<F> {
        let base = self.head_base(head);
        let t = &self.weights.tensors;
        mlp_forward(hidden, &t[base], &t[base + 1], &t[base + 2], &t[base + 3])
    }

    pub fn next_group_probs(&self, hidden: &[F]) -> Vec<F> {
        masked_softmax(&self.head_logits(Head::NextGroup, hidden), None)
    }

    /// `P(positive | prefix)` from the outcome head.
    pub fn outcome_prob(&self, hidden: &[F]) -> F {
        masked_softmax(&self.head_logits(Head::Outcome, hidden), None)[1]
    }

    /// Hidden states at every position and head logits at every EOS.
    pub fn forward(&self, seq: &TokenSeq) -> Result<ForwardOutput<F>, EncoderError> {
        let mut cache = EncoderCache::new(self);
        let hidden = cache.extend(&seq.ids)?;
        let rows: Vec<&[F]> = seq.eos_positions.iter().map(|&e| hidden.row(e)).collect();
        let stack = |head: Head, n: usize| {
            let mut out = Tensor::zeros(rows.len(), n);
            for (i, r) in rows.iter().enumerate() {
                out.row_mut(i).copy_from_slice(&self.head_logits(head, r));
            }
            out
        };
        Ok(ForwardOutput {
            next_logits: stack(Head::NextGroup, self.num_groups()),
            outcome_logits: stack(Head::Outcome, 2),
            hidden,
        })
    }
}

/// `gelu(x W1 + b1) W2 + b2` for a single row.
pub(crate) fn mlp_forward<F: Float>(
    x: &[F],
    w1: &Tensor<F>,
    b1: &Tensor<F>,
    w2: &Tensor<F>,
    b2: &Tensor<F>,
) -> Vec<F> {
    let xt = Tensor::from_vec(1, x.len(), x.to_vec());
    let mut h = xt.matmul(w1);
    for (a, &b) in h.data.iter_mut().zip(&b1.data) {
        *a = gelu(*a + b);
    }
    let mut o = h.matmul(w2);
    o.data.iter_mut().zip(&b2.data).for_each(|(a, &b)| *a += b);
    o.data
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<F> {
    /// `L x d_model` final-normed hidden states.
    pub hidden: Tensor<F>,
    /// One row per EOS position.
    pub next_logits: Tensor<F>,
    pub outcome_logits: Tensor<F>,
}

/// Key/value cache for extending a prefix block by block without recomputing
/// earlier positions.
#[derive(Debug, Clone)]
pub struct EncoderCache<'a, F> {
    params: &'a EncoderParams<F>,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    len: usize,
    last: Vec<F>,
}

fn linear_rows<F: Float>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let mut y = x.matmul(w);
    for r in y.data.chunks_exact_mut(y.cols) {
        r.iter_mut().zip(&b.data).for_each(|(a, &c)| *a += c);
    }
    y
}

fn layer_norm<F: Float>(x: &Tensor<F>, g: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let mut out = Tensor::zeros(x.rows, x.cols);
    layer_norm_rows(&x.data, x.cols, &g.data, &b.data, &mut out.data);
    out
}

impl<'a, F: Float> EncoderCache<'a, F> {
    pub fn new(params: &'a EncoderParams<F>) -> Self {
        let n = params.config.n_blocks;
        EncoderCache {
            params,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
            last: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Hidden state of the most recent position.
    pub fn last_hidden(&self) -> &[F] {
        &self.last
    }

    /// Appends `ids` and returns their final-normed hidden states.
    pub fn extend(&mut self, ids: &[u32]) -> Result<Tensor<F>, EncoderError> {
        let p = self.params;
        let cfg = p.config;
        let d = cfg.d_model;
        let t = &p.weights.tensors;
        let (start, r) = (self.len, ids.len());
        if start + r > p.vocab.max_len {
            return Err(EncoderError::TooLong {
                len: start + r,
                max: p.vocab.max_len,
            });
        }
        if r == 0 {
            return Ok(Tensor::zeros(0, d));
        }
        let mut x = Tensor::zeros(r, d);
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= p.vocab.len() {
                return Err(EncoderError::Vocab(format!("token id {id} out of range")));
            }
            let row = x.row_mut(i);
            for ((o, &a), &b) in row.iter_mut().zip(t[0].row(id as usize)).zip(t[1].row(start + i)) {
                *o = a + b;
            }
        }
        for b in 0..cfg.n_blocks {
            let w = |i: usize| &t[p.block(b) + i];
            let h = layer_norm(&x, w(LN1_G), w(LN1_B));
            let qkv = linear_rows(&h, w(W_QKV), w(B_QKV));
            for row in qkv.data.chunks_exact(3 * d) {
                self.keys[b].extend_from_slice(&row[d..2 * d]);
                self.values[b].extend_from_slice(&row[2 * d..]);
            }
            let total = start + r;
            let mut a = Tensor::zeros(r, d);
            attention_forward(
                Rows {
                    data: &qkv.data,
                    rows: r,
                    rs: 3 * d,
                },
                Rows {
                    data: &self.keys[b],
                    rows: total,
                    rs: d,
                },
                Rows {
                    data: &self.values[b],
                    rows: total,
                    rs: d,
                },
                start,
                d,
                cfg.n_heads,
                &mut a.data,
            );
            x.add_assign(&linear_rows(&a, w(W_O), w(B_O)));
            let h = layer_norm(&x, w(LN2_G), w(LN2_B));
            let mut f = linear_rows(&h, w(W_1), w(B_1));
            f.data.iter_mut().for_each(|v| *v = gelu(*v));
            x.add_assign(&linear_rows(&f, w(W_2), w(B_2)));
        }
        let lnf = p.lnf();
        let out = layer_norm(&x, &t[lnf], &t[lnf + 1]);
        self.len += r;
        self.last = out.row(r - 1).to_vec();
        Ok(out)
    }
}
