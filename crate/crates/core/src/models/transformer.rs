//! Single-stack transformer encoder classifier.
//!
//! Token embedding, `blocks` pre-norm encoder blocks (two-head self-attention
//! and a GELU feed-forward with expansion 4), mean pooling over positions,
//! then a linear head. Each block is one partition layer; the embedding and
//! head form the always-active segment.
//!
//! Parameter layout:
//!
//! ```text
//! embedding [V×D] | head W [C×D] | head b [C] | block 0 | block 1 | ...
//! block = ln1.g [D] ln1.b [D]  Wq [D×D] bq [D]  Wk bk  Wv bv  Wo bo
//!         ln2.g [D] ln2.b [D]  W1 [4D×D] b1 [4D]  W2 [D×4D] b2 [D]
//! ```
//!
//! Weight matrices are row-major `[out × in]`.

use super::{argmax, log_sum_exp, softmax_into, Batch, Differentiable, Objective};
use crate::error::{Error, Result};
use crate::param::LayerPartition;
use crate::real::Real;
use crate::rng::GaussianStream;

pub const HEADS: usize = 2;
pub const FFN_EXPANSION: usize = 4;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerShape {
    pub vocab: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub blocks: usize,
    pub num_classes: usize,
}

impl TransformerShape {
    pub fn block_params(&self) -> usize {
        BlockLayout::new(self.dim).total
    }

    pub fn always_active_params(&self) -> usize {
        self.vocab * self.dim + self.num_classes * self.dim + self.num_classes
    }

    pub fn total_params(&self) -> usize {
        self.always_active_params() + self.blocks * self.block_params()
    }
}

/// Offsets of each tensor inside one block.
#[derive(Debug, Clone, Copy)]
struct BlockLayout {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

impl BlockLayout {
    fn new(d: usize) -> Self {
        let h = FFN_EXPANSION * d;
        let mut at = 0;
        let mut take = |n: usize| {
            let start = at;
            at += n;
            start
        };
        let ln1_g = take(d);
        let ln1_b = take(d);
        let wq = take(d * d);
        let bq = take(d);
        let wk = take(d * d);
        let bk = take(d);
        let wv = take(d * d);
        let bv = take(d);
        let wo = take(d * d);
        let bo = take(d);
        let ln2_g = take(d);
        let ln2_b = take(d);
        let w1 = take(h * d);
        let b1 = take(h);
        let w2 = take(d * h);
        let b2 = take(d);
        Self {
            ln1_g,
            ln1_b,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_g,
            ln2_b,
            w1,
            b1,
            w2,
            b2,
            total: at,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TinyTransformer {
    shape: TransformerShape,
    layout: BlockLayout,
    seed: u64,
    partition: LayerPartition,
}

pub fn make_tiny_transformer(
    vocab: usize,
    seq_len: usize,
    dim: usize,
    blocks: usize,
    num_classes: usize,
    seed: u64,
) -> Result<TinyTransformer> {
    if vocab == 0 || seq_len == 0 || dim == 0 || num_classes == 0 {
        return Err(Error::Argument("transformer sizes must be ≥ 1".into()));
    }
    if !dim.is_multiple_of(HEADS) {
        return Err(Error::Argument(format!(
            "dim {dim} is not divisible by {HEADS} heads"
        )));
    }
    let shape = TransformerShape {
        vocab,
        seq_len,
        dim,
        blocks,
        num_classes,
    };
    let layout = BlockLayout::new(dim);
    let partition =
        LayerPartition::build(&vec![layout.total; blocks], shape.always_active_params())?;
    Ok(TinyTransformer {
        shape,
        layout,
        seed,
        partition,
    })
}

/// `y[r] = W x[r] + b` for `rows` rows.
fn linear<T: Real>(
    x: &[T],
    rows: usize,
    w: &[T],
    b: &[T],
    in_dim: usize,
    out_dim: usize,
) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * out_dim);
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = b[o];
            for (&wi, &xi) in wr.iter().zip(xr) {
                acc += wi * xi;
            }
            y.push(acc);
        }
    }
    y
}

/// Accumulates `dW`, `db` and `dx` for `y = W x + b`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Real>(
    dy: &[T],
    x: &[T],
    rows: usize,
    w: &[T],
    in_dim: usize,
    out_dim: usize,
    dw: &mut [T],
    db: &mut [T],
    dx: &mut [T],
) {
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let dxr = &mut dx[r * in_dim..(r + 1) * in_dim];
        for o in 0..out_dim {
            let g = dy[r * out_dim + o];
            db[o] += g;
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            let dwr = &mut dw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                dwr[i] += g * xr[i];
                dxr[i] += g * wr[i];
            }
        }
    }
}

struct NormCache<T> {
    out: Vec<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

fn layer_norm<T: Real>(x: &[T], rows: usize, dim: usize, g: &[T], b: &[T]) -> NormCache<T> {
    let n = T::from_usize(dim);
    let eps = T::from_f64(LN_EPS);
    let mut out = Vec::with_capacity(rows * dim);
    let mut xhat = Vec::with_capacity(rows * dim);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for i in 0..dim {
            let h = (xr[i] - mean) * inv;
            xhat.push(h);
            out.push(g[i] * h + b[i]);
        }
    }
    NormCache { out, xhat, inv_std }
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<T: Real>(
    dy: &[T],
    cache: &NormCache<T>,
    rows: usize,
    dim: usize,
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
    dx: &mut [T],
) {
    let n = T::from_usize(dim);
    for r in 0..rows {
        let dyr = &dy[r * dim..(r + 1) * dim];
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for i in 0..dim {
            dg[i] += dyr[i] * xh[i];
            db[i] += dyr[i];
            let d = dyr[i] * g[i];
            mean_d += d;
            mean_dx += d * xh[i];
        }
        mean_d /= n;
        mean_dx /= n;
        let inv = cache.inv_std[r];
        for i in 0..dim {
            let d = dyr[i] * g[i];
            dx[r * dim + i] += inv * (d - mean_d - xh[i] * mean_dx);
        }
    }
}

fn gelu_consts<T: Real>() -> (T, T) {
    (
        T::from_f64((2.0 / std::f64::consts::PI).sqrt()),
        T::from_f64(0.044_715),
    )
}

/// Tanh-approximated GELU.
fn gelu<T: Real>(u: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::from_f64(0.5);
    half * u * (T::one() + (c * (u + k * u * u * u)).tanh())
}

fn gelu_derivative<T: Real>(u: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (u + k * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + three * k * u * u)
}

struct BlockCache<T> {
    x_in: Vec<T>,
    ln1: NormCache<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
    ln2: NormCache<T>,
    pre_act: Vec<T>,
    act: Vec<T>,
}

struct SequenceCache<T> {
    tokens: Vec<usize>,
    blocks: Vec<BlockCache<T>>,
    pooled: Vec<T>,
    logits: Vec<T>,
}

impl TinyTransformer {
    pub fn shape(&self) -> TransformerShape {
        self.shape
    }

    fn head_offsets(&self) -> (usize, usize, usize) {
        let emb = 0;
        let head_w = self.shape.vocab * self.shape.dim;
        let head_b = head_w + self.shape.num_classes * self.shape.dim;
        (emb, head_w, head_b)
    }

    fn block_offset(&self, block: usize) -> usize {
        self.partition.layers()[block].offset
    }

    fn tokens(&self, row: &[f64]) -> Vec<usize> {
        row.iter()
            .take(self.shape.seq_len)
            .map(|&t| (t.max(0.0) as usize).min(self.shape.vocab - 1))
            .collect()
    }

    /// Attention for all heads; returns (probs [H×S×S], ctx [S×D]).
    fn attention<T: Real>(&self, q: &[T], k: &[T], v: &[T], s: usize) -> (Vec<T>, Vec<T>) {
        let d = self.shape.dim;
        let hd = d / HEADS;
        let scale = T::one() / T::from_usize(hd).sqrt();
        let mut probs = vec![T::zero(); HEADS * s * s];
        let mut ctx = vec![T::zero(); s * d];
        let mut scores = vec![T::zero(); s];
        for h in 0..HEADS {
            let off = h * hd;
            for i in 0..s {
                let qi = &q[i * d + off..i * d + off + hd];
                for j in 0..s {
                    let kj = &k[j * d + off..j * d + off + hd];
                    scores[j] = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                let p = &mut probs[(h * s + i) * s..(h * s + i + 1) * s];
                softmax_into(&scores, p);
                let ci = &mut ctx[i * d + off..i * d + off + hd];
                for j in 0..s {
                    let vj = &v[j * d + off..j * d + off + hd];
                    for (c, &vv) in ci.iter_mut().zip(vj) {
                        *c += p[j] * vv;
                    }
                }
            }
        }
        (probs, ctx)
    }

    fn forward_sequence<T: Real>(&self, params: &[T], row: &[f64], keep: bool) -> SequenceCache<T> {
        let d = self.shape.dim;
        let hidden = FFN_EXPANSION * d;
        let tokens = self.tokens(row);
        let s = tokens.len();
        let (emb, head_w, head_b) = self.head_offsets();

        let mut x = Vec::with_capacity(s * d);
        for &t in &tokens {
            x.extend_from_slice(&params[emb + t * d..emb + (t + 1) * d]);
        }

        let mut caches = Vec::new();
        for b in 0..self.shape.blocks {
            let p = &params[self.block_offset(b)..self.block_offset(b) + self.layout.total];
            let l = &self.layout;
            let ln1 = layer_norm(&x, s, d, &p[l.ln1_g..l.ln1_g + d], &p[l.ln1_b..l.ln1_b + d]);
            let q = linear(
                &ln1.out,
                s,
                &p[l.wq..l.wq + d * d],
                &p[l.bq..l.bq + d],
                d,
                d,
            );
            let k = linear(
                &ln1.out,
                s,
                &p[l.wk..l.wk + d * d],
                &p[l.bk..l.bk + d],
                d,
                d,
            );
            let v = linear(
                &ln1.out,
                s,
                &p[l.wv..l.wv + d * d],
                &p[l.bv..l.bv + d],
                d,
                d,
            );
            let (probs, ctx) = self.attention(&q, &k, &v, s);
            let o = linear(&ctx, s, &p[l.wo..l.wo + d * d], &p[l.bo..l.bo + d], d, d);
            let mut x_mid = x.clone();
            x_mid.iter_mut().zip(&o).for_each(|(a, &b)| *a += b);

            let ln2 = layer_norm(
                &x_mid,
                s,
                d,
                &p[l.ln2_g..l.ln2_g + d],
                &p[l.ln2_b..l.ln2_b + d],
            );
            let pre_act = linear(
                &ln2.out,
                s,
                &p[l.w1..l.w1 + hidden * d],
                &p[l.b1..l.b1 + hidden],
                d,
                hidden,
            );
            let act: Vec<T> = pre_act.iter().map(|&u| gelu(u)).collect();
            let f = linear(
                &act,
                s,
                &p[l.w2..l.w2 + d * hidden],
                &p[l.b2..l.b2 + d],
                hidden,
                d,
            );
            let mut x_out = x_mid;
            x_out.iter_mut().zip(&f).for_each(|(a, &b)| *a += b);

            let x_in = std::mem::replace(&mut x, x_out);
            if keep {
                caches.push(BlockCache {
                    x_in,
                    ln1,
                    q,
                    k,
                    v,
                    probs,
                    ctx,
                    ln2,
                    pre_act,
                    act,
                });
            }
        }

        let inv_s = T::one() / T::from_usize(s);
        let mut pooled = vec![T::zero(); d];
        for r in 0..s {
            for i in 0..d {
                pooled[i] += x[r * d + i];
            }
        }
        pooled.iter_mut().for_each(|v| *v *= inv_s);
        let c = self.shape.num_classes;
        let logits = linear(
            &pooled,
            1,
            &params[head_w..head_w + c * d],
            &params[head_b..head_b + c],
            d,
            c,
        );
        SequenceCache {
            tokens,
            blocks: caches,
            pooled,
            logits,
        }
    }

    fn backward_sequence<T: Real>(
        &self,
        params: &[T],
        cache: &SequenceCache<T>,
        label: usize,
        weight: T,
        grad: &mut [T],
    ) {
        let d = self.shape.dim;
        let hidden = FFN_EXPANSION * d;
        let c = self.shape.num_classes;
        let s = cache.tokens.len();
        let (emb, head_w, head_b) = self.head_offsets();

        let mut dlogits = vec![T::zero(); c];
        softmax_into(&cache.logits, &mut dlogits);
        dlogits[label] -= T::one();
        dlogits.iter_mut().for_each(|g| *g *= weight);

        let mut dpooled = vec![T::zero(); d];
        {
            let (gw, gb) = grad[head_w..head_b + c].split_at_mut(c * d);
            linear_backward(
                &dlogits,
                &cache.pooled,
                1,
                &params[head_w..head_w + c * d],
                d,
                c,
                gw,
                gb,
                &mut dpooled,
            );
        }
        let inv_s = T::one() / T::from_usize(s);
        let mut dx: Vec<T> = (0..s * d).map(|i| dpooled[i % d] * inv_s).collect();

        for b in (0..self.shape.blocks).rev() {
            let bc = &cache.blocks[b];
            let start = self.block_offset(b);
            let p = &params[start..start + self.layout.total];
            let g = &mut grad[start..start + self.layout.total];
            let l = &self.layout;

            // Feed-forward branch: x_out = x_mid + W2 gelu(W1 ln2(x_mid) + b1) + b2.
            let mut dact = vec![T::zero(); s * hidden];
            {
                let (gw2, gb2) = g[l.w2..l.b2 + d].split_at_mut(d * hidden);
                linear_backward(
                    &dx,
                    &bc.act,
                    s,
                    &p[l.w2..l.w2 + d * hidden],
                    hidden,
                    d,
                    gw2,
                    gb2,
                    &mut dact,
                );
            }
            let dpre: Vec<T> = dact
                .iter()
                .zip(&bc.pre_act)
                .map(|(&da, &u)| da * gelu_derivative(u))
                .collect();
            let mut dln2 = vec![T::zero(); s * d];
            {
                let (gw1, gb1) = g[l.w1..l.b1 + hidden].split_at_mut(hidden * d);
                linear_backward(
                    &dpre,
                    &bc.ln2.out,
                    s,
                    &p[l.w1..l.w1 + hidden * d],
                    d,
                    hidden,
                    gw1,
                    gb1,
                    &mut dln2,
                );
            }
            let mut dx_mid = dx;
            {
                let (gg, gb) = g[l.ln2_g..l.ln2_b + d].split_at_mut(d);
                layer_norm_backward(
                    &dln2,
                    &bc.ln2,
                    s,
                    d,
                    &p[l.ln2_g..l.ln2_g + d],
                    gg,
                    gb,
                    &mut dx_mid,
                );
            }

            // Attention branch: x_mid = x_in + Wo attn(ln1(x_in)) + bo.
            let mut dctx = vec![T::zero(); s * d];
            {
                let (gwo, gbo) = g[l.wo..l.bo + d].split_at_mut(d * d);
                linear_backward(
                    &dx_mid,
                    &bc.ctx,
                    s,
                    &p[l.wo..l.wo + d * d],
                    d,
                    d,
                    gwo,
                    gbo,
                    &mut dctx,
                );
            }
            let (dq, dk, dv) = self.attention_backward(&dctx, bc, s);
            let mut dln1 = vec![T::zero(); s * d];
            for (dy, w_at, b_at) in [(&dq, l.wq, l.bq), (&dk, l.wk, l.bk), (&dv, l.wv, l.bv)] {
                let (gw, rest) = g[w_at..].split_at_mut(d * d);
                debug_assert_eq!(b_at, w_at + d * d);
                linear_backward(
                    dy,
                    &bc.ln1.out,
                    s,
                    &p[w_at..w_at + d * d],
                    d,
                    d,
                    gw,
                    &mut rest[..d],
                    &mut dln1,
                );
            }
            let mut dx_in = dx_mid;
            {
                let (gg, gb) = g[l.ln1_g..l.ln1_b + d].split_at_mut(d);
                layer_norm_backward(
                    &dln1,
                    &bc.ln1,
                    s,
                    d,
                    &p[l.ln1_g..l.ln1_g + d],
                    gg,
                    gb,
                    &mut dx_in,
                );
            }
            debug_assert_eq!(bc.x_in.len(), s * d);
            dx = dx_in;
        }

        for (r, &t) in cache.tokens.iter().enumerate() {
            let ge = &mut grad[emb + t * d..emb + (t + 1) * d];
            for i in 0..d {
                ge[i] += dx[r * d + i];
            }
        }
    }

    fn attention_backward<T: Real>(
        &self,
        dctx: &[T],
        bc: &BlockCache<T>,
        s: usize,
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let d = self.shape.dim;
        let hd = d / HEADS;
        let scale = T::one() / T::from_usize(hd).sqrt();
        let mut dq = vec![T::zero(); s * d];
        let mut dk = vec![T::zero(); s * d];
        let mut dv = vec![T::zero(); s * d];
        let mut dp = vec![T::zero(); s];
        for h in 0..HEADS {
            let off = h * hd;
            for i in 0..s {
                let p = &bc.probs[(h * s + i) * s..(h * s + i + 1) * s];
                let dci = &dctx[i * d + off..i * d + off + hd];
                for j in 0..s {
                    let vj = &bc.v[j * d + off..j * d + off + hd];
                    dp[j] = dci.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    for t in 0..hd {
                        dv[j * d + off + t] += p[j] * dci[t];
                    }
                }
                let row_dot: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                for j in 0..s {
                    let ds = p[j] * (dp[j] - row_dot) * scale;
                    for t in 0..hd {
                        dq[i * d + off + t] += ds * bc.k[j * d + off + t];
                        dk[j * d + off + t] += ds * bc.q[i * d + off + t];
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

impl<T: Real> Objective<T> for TinyTransformer {
    fn name(&self) -> &str {
        "transformer"
    }

    fn partition(&self) -> &LayerPartition {
        &self.partition
    }

    fn loss(&self, params: &[T], batch: &Batch) -> T {
        let labels = batch.class_labels();
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate().take(batch.rows()) {
            let cache = self.forward_sequence(params, batch.row(r), false);
            total += log_sum_exp(&cache.logits) - cache.logits[label];
        }
        total / T::from_usize(batch.rows())
    }

    fn init_params(&self, seed: u64) -> Vec<T> {
        let d = self.shape.dim;
        let mut out = vec![T::zero(); self.partition.total_len()];
        let mut stream = GaussianStream::new(seed ^ self.seed);
        let (emb, head_w, head_b) = self.head_offsets();
        super::fill_normal(&mut out[emb..head_w], 0.1, &mut stream);
        let std_in = (1.0 / d as f64).sqrt();
        super::fill_normal(&mut out[head_w..head_b], std_in, &mut stream);
        let l = self.layout;
        let hidden = FFN_EXPANSION * d;
        for b in 0..self.shape.blocks {
            let p = &mut out[self.block_offset(b)..self.block_offset(b) + l.total];
            p[l.ln1_g..l.ln1_g + d]
                .iter_mut()
                .for_each(|v| *v = T::one());
            p[l.ln2_g..l.ln2_g + d]
                .iter_mut()
                .for_each(|v| *v = T::one());
            for w in [l.wq, l.wk, l.wv, l.wo] {
                super::fill_normal(&mut p[w..w + d * d], std_in, &mut stream);
            }
            super::fill_normal(&mut p[l.w1..l.w1 + hidden * d], std_in, &mut stream);
            super::fill_normal(
                &mut p[l.w2..l.w2 + d * hidden],
                (1.0 / hidden as f64).sqrt(),
                &mut stream,
            );
        }
        out
    }

    fn accuracy(&self, params: &[T], batch: &Batch) -> Option<f64> {
        let labels = batch.class_labels();
        let correct = (0..batch.rows())
            .filter(|&r| {
                argmax(&self.forward_sequence(params, batch.row(r), false).logits) == labels[r]
            })
            .count();
        Some(correct as f64 / batch.rows() as f64)
    }
}

impl<T: Real> Differentiable<T> for TinyTransformer {
    fn gradient(&self, params: &[T], batch: &Batch) -> Vec<T> {
        let labels = batch.class_labels();
        let weight = T::one() / T::from_usize(batch.rows());
        let mut grad = vec![T::zero(); params.len()];
        for (r, &label) in labels.iter().enumerate().take(batch.rows()) {
            let cache = self.forward_sequence(params, batch.row(r), true);
            self.backward_sequence(params, &cache, label, weight, &mut grad);
        }
        grad
    }
}
