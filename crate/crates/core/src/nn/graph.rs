//! A small reverse-mode tape covering exactly the operators the video UNet
//! needs. Nodes are appended in evaluation order, so the backward pass is a
//! single reverse sweep.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::rng::VidimRng;
use crate::tensor::{gemm, Mat, Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-5;
const QK_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a `[N, C, H, W]` feature map is cut into attention sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenLayout {
    /// One sequence per (clip, pixel) running over `frames` frames.
    Temporal { frames: usize },
    /// One sequence per frame running over its pixels.
    Spatial,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Film { x: Var, modulation: Var },
    Dropout { x: Var, mask: Vec<T> },
    AvgPool2(Var),
    Upsample2(Var),
    ConcatChannels(Var, Var),
    DepthToSpace { x: Var, factor: usize },
    ToTokens { x: Var, layout: TokenLayout },
    FromTokens { x: Var, layout: TokenLayout },
    Attention(AttentionCache<T>),
    AddMaskedRow { x: Var, row: Var, mask: Vec<bool> },
    SelectFrames { x: Var, frames: usize, keep: Vec<usize> },
}

struct AttentionCache<T> {
    q: Var,
    k: Var,
    v: Var,
    gain: Var,
    heads: usize,
    seq_len: usize,
    qn: Vec<T>,
    kn: Vec<T>,
    qnorm: Vec<T>,
    knorm: Vec<T>,
    probs: Vec<T>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    dropout_rng: Option<VidimRng>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn t<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), dropout_rng: None }
    }

    /// Training-mode graph drawing dropout masks from `rng`.
    pub fn training(rng: VidimRng) -> Self {
        Self { nodes: Vec::new(), dropout_rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.needs(i));
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is requested (parameters, or inputs under
    /// differentiation).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        self.push(value, Op::Silu(a), &[a])
    }

    /// `y = x w^T + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let inp = *xs.last().ok_or_else(|| shape_err!("linear on a scalar"))?;
        if ws.len() != 2 || ws[1] != inp {
            return Err(shape_err!("linear weight {:?} vs input {:?}", ws, xs));
        }
        let out = ws[0];
        let rows = self.value(x).len() / inp.max(1);
        let mut y = vec![T::zero(); rows * out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != out {
                return Err(shape_err!("linear bias {} vs out {}", bv.len(), out));
            }
            for r in 0..rows {
                y[r * out..(r + 1) * out].copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            Mat::new(self.value(x).data(), rows, inp),
            Mat::t(self.value(w).data(), out, inp),
            &mut y,
            T::one(),
            beta,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let value = Tensor::from_vec(&shape, y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// 2-D convolution over `[N, C, H, W]` with a square `[O, C, k, k]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(shape_err!("conv2d weight {:?} vs input {:?}", ws, xs));
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(shape_err!("conv2d kernel {} does not fit {}x{}", k, h, wd));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geo = ConvGeom { c, h, w: wd, k, stride, pad, ho, wo };
        let p = ho * wo;
        let ckk = c * k * k;
        let mut y = vec![T::zero(); n * o * p];
        let bias = match b {
            Some(b) => {
                let bv = self.value(b).data();
                if bv.len() != o {
                    return Err(shape_err!("conv2d bias {} vs out {}", bv.len(), o));
                }
                Some(bv.to_vec())
            }
            None => None,
        };
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * p] };
        for i in 0..n {
            let xi = &xv[i * c * h * wd..(i + 1) * c * h * wd];
            let yi = &mut y[i * o * p..(i + 1) * o * p];
            if let Some(bias) = &bias {
                for (oc, &bv) in bias.iter().enumerate() {
                    yi[oc * p..(oc + 1) * p].fill(bv);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            let colv: &[T] = if geo.is_pointwise() {
                xi
            } else {
                im2col(xi, &geo, &mut cols);
                &cols
            };
            gemm(Mat::new(wv, o, ckk), Mat::new(colv, ckk, p), yi, T::one(), beta);
        }
        let value = Tensor::from_vec(&[n, o, ho, wo], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || groups == 0 || !xs[1].is_multiple_of(groups) {
            return Err(shape_err!("group_norm with {} groups on {:?}", groups, xs));
        }
        let (n, c) = (xs[0], xs[1]);
        let hw = xs[2] * xs[3];
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(shape_err!("group_norm affine width vs {} channels", c));
        }
        let cg = c / groups;
        let span = cg * hw;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut y = vec![T::zero(); xv.len()];
        let mut mean = vec![T::zero(); n * groups];
        let mut rstd = vec![T::zero(); n * groups];
        for i in 0..n {
            for g in 0..groups {
                let off = (i * c + g * cg) * hw;
                let seg = &xv[off..off + span];
                let (m, var) = mean_var(seg);
                let r = T::one() / (var + t(NORM_EPS)).sqrt();
                mean[i * groups + g] = m;
                rstd[i * groups + g] = r;
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    let (ga, be) = (gv[ch], bv[ch]);
                    let base = off + cc * hw;
                    for j in base..base + hw {
                        y[j] = (xv[j] - m) * r * ga + be;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&xs, y)?;
        Ok(self.push(value, Op::GroupNorm { x, gamma, beta, groups, mean, rstd }, &[x, gamma, beta]))
    }

    /// Normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let d = *xs.last().ok_or_else(|| shape_err!("layer_norm on a scalar"))?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(shape_err!("layer_norm affine width vs {}", d));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / d;
        let mut y = vec![T::zero(); xv.len()];
        let mut mean = vec![T::zero(); rows];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let seg = &xv[r * d..(r + 1) * d];
            let (m, var) = mean_var(seg);
            let rs = T::one() / (var + t(NORM_EPS)).sqrt();
            mean[r] = m;
            rstd[r] = rs;
            for j in 0..d {
                y[r * d + j] = (seg[j] - m) * rs * gv[j] + bv[j];
            }
        }
        let value = Tensor::from_vec(&xs, y)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, mean, rstd }, &[x, gamma, beta]))
    }

    /// `x * (1 + scale) + shift` with `[scale | shift] = modulation[n]`, one
    /// row per leading index of `x`.
    pub fn film(&mut self, x: Var, modulation: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ms = self.value(modulation).shape().to_vec();
        if xs.len() != 4 || ms.len() != 2 || ms[0] != xs[0] || ms[1] != 2 * xs[1] {
            return Err(shape_err!("film modulation {:?} vs features {:?}", ms, xs));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let xv = self.value(x).data();
        let mv = self.value(modulation).data();
        let mut y = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let sc = T::one() + mv[i * 2 * c + ch];
                let sh = mv[i * 2 * c + c + ch];
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    y[j] = xv[j] * sc + sh;
                }
            }
        }
        let value = Tensor::from_vec(&xs, y)?;
        Ok(self.push(value, Op::Film { x, modulation }, &[x, modulation]))
    }

    /// Inverted dropout; the identity in evaluation mode or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut() else { return x };
        if rate <= 0.0 {
            return x;
        }
        let keep = t::<T>(1.0 / (1.0 - rate));
        let n = self.nodes[x.0].value.len();
        let mask: Vec<T> = (0..n).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
        let value = Tensor::from_vec(
            self.value(x).shape(),
            self.value(x).data().iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
        )
        .expect("dropout keeps shape");
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || !xs[2].is_multiple_of(2) || !xs[3].is_multiple_of(2) {
            return Err(shape_err!("avg_pool2 needs even spatial dims, got {:?}", xs));
        }
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let q = t::<T>(0.25);
        let mut y = vec![T::zero(); nc * ho * wo];
        for i in 0..nc {
            let src = &xv[i * h * w..];
            for r in 0..ho {
                for cidx in 0..wo {
                    let a = src[2 * r * w + 2 * cidx] + src[2 * r * w + 2 * cidx + 1];
                    let b = src[(2 * r + 1) * w + 2 * cidx] + src[(2 * r + 1) * w + 2 * cidx + 1];
                    y[i * ho * wo + r * wo + cidx] = (a + b) * q;
                }
            }
        }
        let value = Tensor::from_vec(&[xs[0], xs[1], ho, wo], y)?;
        Ok(self.push(value, Op::AvgPool2(x), &[x]))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(shape_err!("upsample2 on {:?}", xs));
        }
        let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let xv = self.value(x).data();
        let mut y = vec![T::zero(); nc * 4 * h * w];
        for i in 0..nc {
            for r in 0..2 * h {
                for cidx in 0..2 * w {
                    y[i * 4 * h * w + r * 2 * w + cidx] = xv[i * h * w + (r / 2) * w + cidx / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[xs[0], xs[1], 2 * h, 2 * w], y)?;
        Ok(self.push(value, Op::Upsample2(x), &[x]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let asz = self.value(a).shape().to_vec();
        let bsz = self.value(b).shape().to_vec();
        if asz.len() != 4 || bsz.len() != 4 || asz[0] != bsz[0] || asz[2..] != bsz[2..] {
            return Err(shape_err!("concat_channels {:?} with {:?}", asz, bsz));
        }
        let (n, ca, cb, hw) = (asz[0], asz[1], bsz[1], asz[2] * asz[3]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut y = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            y.extend_from_slice(&av[i * ca * hw..(i + 1) * ca * hw]);
            y.extend_from_slice(&bv[i * cb * hw..(i + 1) * cb * hw]);
        }
        let value = Tensor::from_vec(&[n, ca + cb, asz[2], asz[3]], y)?;
        Ok(self.push(value, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// `[N, C r^2, H, W] -> [N, C, H r, W r]`.
    pub fn depth_to_space(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let rr = factor * factor;
        if xs.len() != 4 || factor == 0 || !xs[1].is_multiple_of(rr) {
            return Err(shape_err!("depth_to_space({}) on {:?}", factor, xs));
        }
        let (n, c, h, w) = (xs[0], xs[1] / rr, xs[2], xs[3]);
        let xv = self.value(x).data();
        let mut y = vec![T::zero(); xv.len()];
        for_depth_to_space(n, c, h, w, factor, |src, dst| y[dst] = xv[src]);
        let value = Tensor::from_vec(&[n, c, h * factor, w * factor], y)?;
        Ok(self.push(value, Op::DepthToSpace { x, factor }, &[x]))
    }

    /// `[N, C, H, W] -> [S * L, C]` token rows, sequences contiguous.
    pub fn to_tokens(&mut self, x: Var, layout: TokenLayout) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        check_token_layout(&xs, layout)?;
        let xv = self.value(x).data();
        let c = xs[1];
        let mut y = vec![T::zero(); xv.len()];
        for_each_token(&xs, layout, |n, p, row| {
            let hw = xs[2] * xs[3];
            for ch in 0..c {
                y[row * c + ch] = xv[(n * c + ch) * hw + p];
            }
        });
        let rows = xv.len() / c;
        let value = Tensor::from_vec(&[rows, c], y)?;
        // the node remembers the feature map shape through its input
        Ok(self.push(value, Op::ToTokens { x, layout }, &[x]))
    }

    /// Inverse of [`Graph::to_tokens`] back to the shape of `like`.
    pub fn from_tokens(&mut self, x: Var, layout: TokenLayout, shape: &[usize]) -> Result<Var> {
        check_token_layout(shape, layout)?;
        let c = shape[1];
        let xv = self.value(x).data();
        if xv.len() != shape.iter().product::<usize>() || self.value(x).shape().last() != Some(&c) {
            return Err(shape_err!("tokens {:?} do not fill {:?}", self.value(x).shape(), shape));
        }
        let hw = shape[2] * shape[3];
        let mut y = vec![T::zero(); xv.len()];
        for_each_token(shape, layout, |n, p, row| {
            for ch in 0..c {
                y[(n * c + ch) * hw + p] = xv[row * c + ch];
            }
        });
        let value = Tensor::from_vec(shape, y)?;
        Ok(self.push(value, Op::FromTokens { x, layout }, &[x]))
    }

    /// Multi-head attention with unit-normalized queries and keys:
    /// `logits = gain[h] * <q/|q|, k/|k|>`. Inputs are `[S * seq_len, C]`
    /// token rows; `gain` holds one learned scale per head.
    pub fn qk_norm_attention(&mut self, q: Var, k: Var, v: Var, gain: Var, heads: usize, seq_len: usize) -> Result<Var> {
        let qs = self.value(q).shape().to_vec();
        if qs.len() != 2 || self.value(k).shape() != &qs[..] || self.value(v).shape() != &qs[..] {
            return Err(shape_err!("attention q/k/v shapes differ"));
        }
        let (rows, c) = (qs[0], qs[1]);
        if heads == 0 || c % heads != 0 {
            return Err(crate::Error::Config(alloc::format!("{c} channels not divisible by {heads} heads")));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(shape_err!("{} token rows not divisible by sequence length {}", rows, seq_len));
        }
        if self.value(gain).len() != heads {
            return Err(shape_err!("attention gain has {} entries for {} heads", self.value(gain).len(), heads));
        }
        let dh = c / heads;
        let seqs = rows / seq_len;
        let (qv, kv, vv, gv) = (self.value(q).data(), self.value(k).data(), self.value(v).data(), self.value(gain).data());
        let (qn, qnorm) = normalize_heads(qv, rows, heads, dh);
        let (kn, knorm) = normalize_heads(kv, rows, heads, dh);
        let l = seq_len;
        let mut probs = vec![T::zero(); seqs * heads * l * l];
        let mut out = vec![T::zero(); rows * c];
        let mut logits = vec![T::zero(); l];
        for s in 0..seqs {
            for h in 0..heads {
                let g = gv[h];
                for i in 0..l {
                    let qi = &qn[(s * l + i) * c + h * dh..][..dh];
                    let mut mx = T::neg_infinity();
                    for j in 0..l {
                        let kj = &kn[(s * l + j) * c + h * dh..][..dh];
                        let d = g * dot(qi, kj);
                        logits[j] = d;
                        mx = mx.max(d);
                    }
                    let mut z = T::zero();
                    for lj in logits.iter_mut() {
                        *lj = (*lj - mx).exp();
                        z += *lj;
                    }
                    let prow = &mut probs[((s * heads + h) * l + i) * l..][..l];
                    for j in 0..l {
                        prow[j] = logits[j] / z;
                    }
                    let orow = &mut out[(s * l + i) * c + h * dh..][..dh];
                    for j in 0..l {
                        let pj = prow[j];
                        let vj = &vv[(s * l + j) * c + h * dh..][..dh];
                        for d in 0..dh {
                            orow[d] += pj * vj[d];
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&qs, out)?;
        let cache = AttentionCache { q, k, v, gain, heads, seq_len, qn, kn, qnorm, knorm, probs };
        Ok(self.push(value, Op::Attention(cache), &[q, k, v, gain]))
    }

    /// Attention probabilities of the most recent attention node that produced
    /// `out`, laid out `[S, heads, L, L]`.
    pub fn attention_probs(&self, out: Var) -> Option<&[T]> {
        match &self.nodes[out.0].op {
            Op::Attention(c) => Some(&c.probs),
            _ => None,
        }
    }

    /// `x[n] + row` for the rows where `mask[n]` is set.
    pub fn add_masked_row(&mut self, x: Var, row: Var, mask: &[bool]) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let d = self.value(row).len();
        if xs.len() != 2 || xs[1] != d || xs[0] != mask.len() {
            return Err(shape_err!("masked row {} / mask {} vs {:?}", d, mask.len(), xs));
        }
        let mut y = self.value(x).clone();
        let rv = self.value(row).data().to_vec();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                for j in 0..d {
                    y.data_mut()[i * d + j] += rv[j];
                }
            }
        }
        Ok(self.push(y, Op::AddMaskedRow { x, row, mask: mask.to_vec() }, &[x, row]))
    }

    /// Keep frames `keep` out of every group of `frames` leading entries.
    pub fn select_frames(&mut self, x: Var, frames: usize, keep: &[usize]) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.is_empty() || frames == 0 || !xs[0].is_multiple_of(frames) || keep.iter().any(|&k| k >= frames) {
            return Err(shape_err!("select_frames {:?} of {} from {:?}", keep, frames, xs));
        }
        let clips = xs[0] / frames;
        let inner: usize = xs[1..].iter().product();
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(clips * keep.len() * inner);
        for b in 0..clips {
            for &f in keep {
                let src = (b * frames + f) * inner;
                y.extend_from_slice(&xv[src..src + inner]);
            }
        }
        let mut shape = xs;
        shape[0] = clips * keep.len();
        let value = Tensor::from_vec(&shape, y)?;
        Ok(self.push(value, Op::SelectFrames { x, frames, keep: keep.to_vec() }, &[x]))
    }

    /// Reverse sweep from `out` seeded with `seed` (same shape as `out`).
    pub fn backward(&self, out: Var, seed: Tensor<T>) -> Result<Grads<T>> {
        self.value(out).ensure_same_shape(&seed, "backward seed")?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *b, || g.clone());
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, || g.map(|v| v * s));
            }
            Op::Silu(a) => {
                let xv = self.value(*a);
                self.accumulate(grads, *a, || {
                    let d = xv
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&x, &gy)| {
                            let s = sigmoid(x);
                            gy * s * (T::one() + x * (T::one() - s))
                        })
                        .collect();
                    Tensor::from_vec(xv.shape(), d).unwrap()
                });
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (out, inp) = (wv.dim(0), wv.dim(1));
                let rows = xv.len() / inp;
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); rows * inp];
                    gemm(Mat::new(gd, rows, out), Mat::new(wv.data(), out, inp), &mut dx, T::one(), T::zero());
                    self.accumulate(grads, *x, || Tensor::from_vec(xv.shape(), dx).unwrap());
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); out * inp];
                    gemm(Mat::t(gd, rows, out), Mat::new(xv.data(), rows, inp), &mut dw, T::one(), T::zero());
                    self.accumulate(grads, *w, || Tensor::from_vec(wv.shape(), dw).unwrap());
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); out];
                        for r in 0..rows {
                            for (j, d) in db.iter_mut().enumerate() {
                                *d += gd[r * out + j];
                            }
                        }
                        self.accumulate(grads, *b, || Tensor::from_vec(&[out], db).unwrap());
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let xs = xv.shape();
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, k) = (wv.dim(0), wv.dim(2));
                let ys = node.value.shape();
                let (ho, wo) = (ys[2], ys[3]);
                let geo = ConvGeom { c, h, w: wd, k, stride: *stride, pad: *pad, ho, wo };
                let p = ho * wo;
                let ckk = c * k * k;
                let want_x = self.needs(*x);
                let want_w = self.needs(*w);
                let mut dx = if want_x { vec![T::zero(); xv.len()] } else { Vec::new() };
                let mut dw = if want_w { vec![T::zero(); wv.len()] } else { Vec::new() };
                let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * p] };
                let mut dcols = if want_x && !geo.is_pointwise() { vec![T::zero(); ckk * p] } else { Vec::new() };
                for i in 0..n {
                    let gi = &gd[i * o * p..(i + 1) * o * p];
                    let xi = &xv.data()[i * c * h * wd..(i + 1) * c * h * wd];
                    if want_w {
                        let colv: &[T] = if geo.is_pointwise() {
                            xi
                        } else {
                            im2col(xi, &geo, &mut cols);
                            &cols
                        };
                        gemm(Mat::new(gi, o, p), Mat::t(colv, ckk, p), &mut dw, T::one(), T::one());
                    }
                    if want_x {
                        let dxi = &mut dx[i * c * h * wd..(i + 1) * c * h * wd];
                        if geo.is_pointwise() {
                            gemm(Mat::t(wv.data(), o, ckk), Mat::new(gi, o, p), dxi, T::one(), T::zero());
                        } else {
                            gemm(Mat::t(wv.data(), o, ckk), Mat::new(gi, o, p), &mut dcols, T::one(), T::zero());
                            col2im(&dcols, &geo, dxi);
                        }
                    }
                }
                if want_x {
                    self.accumulate(grads, *x, || Tensor::from_vec(xs, dx).unwrap());
                }
                if want_w {
                    self.accumulate(grads, *w, || Tensor::from_vec(wv.shape(), dw).unwrap());
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); o];
                        for i in 0..n {
                            for (oc, d) in db.iter_mut().enumerate() {
                                *d += gd[(i * o + oc) * p..(i * o + oc + 1) * p].iter().fold(T::zero(), |a, &v| a + v);
                            }
                        }
                        self.accumulate(grads, *b, || Tensor::from_vec(&[o], db).unwrap());
                    }
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma).data();
                let xs = xv.shape();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let cg = c / groups;
                let span = T::from_usize(cg * hw).unwrap();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for i in 0..n {
                    for g in 0..*groups {
                        let (m, r) = (mean[i * groups + g], rstd[i * groups + g]);
                        let off = (i * c + g * cg) * hw;
                        let (mut s1, mut s2) = (T::zero(), T::zero());
                        for cc in 0..cg {
                            let ch = g * cg + cc;
                            for j in off + cc * hw..off + (cc + 1) * hw {
                                let xh = (xv.data()[j] - m) * r;
                                dg[ch] += gd[j] * xh;
                                db[ch] += gd[j];
                                let dxh = gd[j] * gv[ch];
                                s1 += dxh;
                                s2 += dxh * xh;
                            }
                        }
                        let (m1, m2) = (s1 / span, s2 / span);
                        for cc in 0..cg {
                            let ch = g * cg + cc;
                            for j in off + cc * hw..off + (cc + 1) * hw {
                                let xh = (xv.data()[j] - m) * r;
                                dx[j] = r * (gd[j] * gv[ch] - m1 - xh * m2);
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, || Tensor::from_vec(xs, dx).unwrap());
                self.accumulate(grads, *gamma, || Tensor::from_vec(&[c], dg).unwrap());
                self.accumulate(grads, *beta, || Tensor::from_vec(&[c], db).unwrap());
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma).data();
                let d = gv.len();
                let rows = xv.len() / d;
                let dn = T::from_usize(d).unwrap();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                for r in 0..rows {
                    let (m, rs) = (mean[r], rstd[r]);
                    let (mut s1, mut s2) = (T::zero(), T::zero());
                    for j in 0..d {
                        let idx = r * d + j;
                        let xh = (xv.data()[idx] - m) * rs;
                        dg[j] += gd[idx] * xh;
                        db[j] += gd[idx];
                        let dxh = gd[idx] * gv[j];
                        s1 += dxh;
                        s2 += dxh * xh;
                    }
                    let (m1, m2) = (s1 / dn, s2 / dn);
                    for j in 0..d {
                        let idx = r * d + j;
                        let xh = (xv.data()[idx] - m) * rs;
                        dx[idx] = rs * (gd[idx] * gv[j] - m1 - xh * m2);
                    }
                }
                self.accumulate(grads, *x, || Tensor::from_vec(xv.shape(), dx).unwrap());
                self.accumulate(grads, *gamma, || Tensor::from_vec(&[d], dg).unwrap());
                self.accumulate(grads, *beta, || Tensor::from_vec(&[d], db).unwrap());
            }
            Op::Film { x, modulation } => {
                let xv = self.value(*x);
                let mv = self.value(*modulation);
                let xs = xv.shape();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dm = vec![T::zero(); mv.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let sc = T::one() + mv.data()[i * 2 * c + ch];
                        let base = (i * c + ch) * hw;
                        let (mut ds, mut dsh) = (T::zero(), T::zero());
                        for j in base..base + hw {
                            dx[j] = gd[j] * sc;
                            ds += gd[j] * xv.data()[j];
                            dsh += gd[j];
                        }
                        dm[i * 2 * c + ch] = ds;
                        dm[i * 2 * c + c + ch] = dsh;
                    }
                }
                self.accumulate(grads, *x, || Tensor::from_vec(xs, dx).unwrap());
                self.accumulate(grads, *modulation, || Tensor::from_vec(mv.shape(), dm).unwrap());
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, || {
                    Tensor::from_vec(g.shape(), gd.iter().zip(mask).map(|(&a, &m)| a * m).collect()).unwrap()
                });
            }
            Op::AvgPool2(x) => {
                let xs = self.value(*x).shape();
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let (ho, wo) = (h / 2, w / 2);
                let q = t::<T>(0.25);
                self.accumulate(grads, *x, || {
                    let mut dx = vec![T::zero(); nc * h * w];
                    for i in 0..nc {
                        for r in 0..h {
                            for cidx in 0..w {
                                dx[i * h * w + r * w + cidx] = gd[i * ho * wo + (r / 2) * wo + cidx / 2] * q;
                            }
                        }
                    }
                    Tensor::from_vec(xs, dx).unwrap()
                });
            }
            Op::Upsample2(x) => {
                let xs = self.value(*x).shape();
                let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                self.accumulate(grads, *x, || {
                    let mut dx = vec![T::zero(); nc * h * w];
                    for i in 0..nc {
                        for r in 0..2 * h {
                            for cidx in 0..2 * w {
                                dx[i * h * w + (r / 2) * w + cidx / 2] += gd[i * 4 * h * w + r * 2 * w + cidx];
                            }
                        }
                    }
                    Tensor::from_vec(xs, dx).unwrap()
                });
            }
            Op::ConcatChannels(a, b) => {
                let asz = self.value(*a).shape();
                let bsz = self.value(*b).shape();
                let (n, ca, cb, hw) = (asz[0], asz[1], bsz[1], asz[2] * asz[3]);
                self.accumulate(grads, *a, || {
                    let mut d = Vec::with_capacity(n * ca * hw);
                    for i in 0..n {
                        d.extend_from_slice(&gd[i * (ca + cb) * hw..][..ca * hw]);
                    }
                    Tensor::from_vec(asz, d).unwrap()
                });
                self.accumulate(grads, *b, || {
                    let mut d = Vec::with_capacity(n * cb * hw);
                    for i in 0..n {
                        d.extend_from_slice(&gd[(i * (ca + cb) + ca) * hw..][..cb * hw]);
                    }
                    Tensor::from_vec(bsz, d).unwrap()
                });
            }
            Op::DepthToSpace { x, factor } => {
                let xs = self.value(*x).shape();
                let rr = factor * factor;
                self.accumulate(grads, *x, || {
                    let mut dx = vec![T::zero(); gd.len()];
                    for_depth_to_space(xs[0], xs[1] / rr, xs[2], xs[3], *factor, |src, dst| dx[src] = gd[dst]);
                    Tensor::from_vec(xs, dx).unwrap()
                });
            }
            Op::ToTokens { x, layout } => {
                let xs = self.value(*x).shape().to_vec();
                let c = xs[1];
                let hw = xs[2] * xs[3];
                self.accumulate(grads, *x, || {
                    let mut dx = vec![T::zero(); gd.len()];
                    for_each_token(&xs, *layout, |n, p, row| {
                        for ch in 0..c {
                            dx[(n * c + ch) * hw + p] = gd[row * c + ch];
                        }
                    });
                    Tensor::from_vec(&xs, dx).unwrap()
                });
            }
            Op::FromTokens { x, layout } => {
                let shape = node.value.shape().to_vec();
                let c = shape[1];
                let hw = shape[2] * shape[3];
                let xs = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, || {
                    let mut dx = vec![T::zero(); gd.len()];
                    for_each_token(&shape, *layout, |n, p, row| {
                        for ch in 0..c {
                            dx[row * c + ch] = gd[(n * c + ch) * hw + p];
                        }
                    });
                    Tensor::from_vec(&xs, dx).unwrap()
                });
            }
            Op::Attention(cache) => self.backprop_attention(cache, gd, grads),
            Op::AddMaskedRow { x, row, mask } => {
                self.accumulate(grads, *x, || g.clone());
                let d = self.value(*row).len();
                self.accumulate(grads, *row, || {
                    let mut dr = vec![T::zero(); d];
                    for (i, &m) in mask.iter().enumerate() {
                        if m {
                            for j in 0..d {
                                dr[j] += gd[i * d + j];
                            }
                        }
                    }
                    Tensor::from_vec(&[d], dr).unwrap()
                });
            }
            Op::SelectFrames { x, frames, keep } => {
                let xs = self.value(*x).shape();
                let inner: usize = xs[1..].iter().product();
                let clips = xs[0] / frames;
                self.accumulate(grads, *x, || {
                    let mut dx = vec![T::zero(); xs.iter().product()];
                    for b in 0..clips {
                        for (ki, &f) in keep.iter().enumerate() {
                            let dst = (b * frames + f) * inner;
                            let src = (b * keep.len() + ki) * inner;
                            for j in 0..inner {
                                dx[dst + j] += gd[src + j];
                            }
                        }
                    }
                    Tensor::from_vec(xs, dx).unwrap()
                });
            }
        }
    }

    fn backprop_attention(&self, cache: &AttentionCache<T>, gd: &[T], grads: &mut [Option<Tensor<T>>]) {
        let AttentionCache { q, k, v, gain, heads, seq_len, qn, kn, qnorm, knorm, probs } = cache;
        let shape = self.value(*q).shape().to_vec();
        let (rows, c) = (shape[0], shape[1]);
        let (heads, l) = (*heads, *seq_len);
        let dh = c / heads;
        let seqs = rows / l;
        let vv = self.value(*v).data();
        let gv = self.value(*gain).data();
        let mut dqn = vec![T::zero(); rows * c];
        let mut dkn = vec![T::zero(); rows * c];
        let mut dv = vec![T::zero(); rows * c];
        let mut dgain = vec![T::zero(); heads];
        let mut dp = vec![T::zero(); l];
        for s in 0..seqs {
            for h in 0..heads {
                let g = gv[h];
                for i in 0..l {
                    let prow = &probs[((s * heads + h) * l + i) * l..][..l];
                    let go = &gd[(s * l + i) * c + h * dh..][..dh];
                    let mut acc = T::zero();
                    for j in 0..l {
                        let vj = &vv[(s * l + j) * c + h * dh..][..dh];
                        dp[j] = dot(go, vj);
                        acc += prow[j] * dp[j];
                        let dvj = &mut dv[(s * l + j) * c + h * dh..][..dh];
                        for d in 0..dh {
                            dvj[d] += prow[j] * go[d];
                        }
                    }
                    let qi_off = (s * l + i) * c + h * dh;
                    for j in 0..l {
                        let dl = prow[j] * (dp[j] - acc);
                        if dl == T::zero() {
                            continue;
                        }
                        let kj_off = (s * l + j) * c + h * dh;
                        let cos = dot(&qn[qi_off..qi_off + dh], &kn[kj_off..kj_off + dh]);
                        dgain[h] += dl * cos;
                        let sc = dl * g;
                        for d in 0..dh {
                            dqn[qi_off + d] += sc * kn[kj_off + d];
                            dkn[kj_off + d] += sc * qn[qi_off + d];
                        }
                    }
                }
            }
        }
        let unnormalize = |dn: &[T], nrm: &[T], unit: &[T]| {
            let mut out = vec![T::zero(); rows * c];
            for r in 0..rows {
                for h in 0..heads {
                    let off = r * c + h * dh;
                    let inv = T::one() / nrm[r * heads + h];
                    let proj = dot(&dn[off..off + dh], &unit[off..off + dh]);
                    for d in 0..dh {
                        out[off + d] = (dn[off + d] - unit[off + d] * proj) * inv;
                    }
                }
            }
            out
        };
        if self.needs(*q) {
            let dq = unnormalize(&dqn, qnorm, qn);
            self.accumulate(grads, *q, || Tensor::from_vec(&shape, dq).unwrap());
        }
        if self.needs(*k) {
            let dk = unnormalize(&dkn, knorm, kn);
            self.accumulate(grads, *k, || Tensor::from_vec(&shape, dk).unwrap());
        }
        self.accumulate(grads, *v, || Tensor::from_vec(&shape, dv).unwrap());
        self.accumulate(grads, *gain, || Tensor::from_vec(&[heads], dgain).unwrap());
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, make: impl FnOnce() -> Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        let d = make();
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(d.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(d),
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn mean_var<T: Scalar>(seg: &[T]) -> (T, T) {
    let n = T::from_usize(seg.len()).unwrap();
    let m = seg.iter().fold(T::zero(), |a, &v| a + v) / n;
    let var = seg.iter().fold(T::zero(), |a, &v| a + (v - m) * (v - m)) / n;
    (m, var)
}

fn normalize_heads<T: Scalar>(x: &[T], rows: usize, heads: usize, dh: usize) -> (Vec<T>, Vec<T>) {
    let c = heads * dh;
    let mut unit = vec![T::zero(); rows * c];
    let mut norms = vec![T::zero(); rows * heads];
    for r in 0..rows {
        for h in 0..heads {
            let off = r * c + h * dh;
            let seg = &x[off..off + dh];
            let nrm = (dot(seg, seg) + t(QK_EPS * QK_EPS)).sqrt();
            norms[r * heads + h] = nrm;
            for d in 0..dh {
                unit[off + d] = seg[d] / nrm;
            }
        }
    }
    (unit, norms)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ow` whose input column `ow * stride + kj - pad` is inside the image.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = if g.pad > kj { (g.pad - kj).div_ceil(g.stride) } else { 0 };
    if g.w + g.pad <= kj {
        return (0, 0);
    }
    let hi = ((g.w - 1 + g.pad - kj) / g.stride + 1).min(g.wo);
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.ho * g.wo;
    for ch in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ch * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kj);
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &x[(ch * g.h + ih as usize) * g.w..][..g.w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        drow[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (j, d) in drow[lo..hi].iter_mut().enumerate() {
                            *d = src[first + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    dx.fill(T::zero());
    let p = g.ho * g.wo;
    for ch in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ch * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.pad;
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dx[(ch * g.h + ih as usize) * g.w..][..g.w];
                    let srow = &src[oh * g.wo + lo..oh * g.wo + hi];
                    if g.stride == 1 {
                        for (d, &v) in drow[first..first + hi - lo].iter_mut().zip(srow) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in srow.iter().enumerate() {
                            drow[first + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

fn for_depth_to_space(n: usize, c: usize, h: usize, w: usize, r: usize, mut f: impl FnMut(usize, usize)) {
    let (ho, wo) = (h * r, w * r);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let sc = ch * r * r + i * r + j;
                    for y in 0..h {
                        for x in 0..w {
                            let src = ((b * c * r * r + sc) * h + y) * w + x;
                            let dst = ((b * c + ch) * ho + y * r + i) * wo + x * r + j;
                            f(src, dst);
                        }
                    }
                }
            }
        }
    }
}

fn check_token_layout(shape: &[usize], layout: TokenLayout) -> Result<()> {
    if shape.len() != 4 {
        return Err(shape_err!("token layout needs [N, C, H, W], got {:?}", shape));
    }
    if let TokenLayout::Temporal { frames } = layout {
        if frames == 0 || !shape[0].is_multiple_of(frames) {
            return Err(shape_err!("{} maps are not a whole number of {}-frame clips", shape[0], frames));
        }
    }
    Ok(())
}

/// Calls `f(map_index, pixel, token_row)` for every token.
fn for_each_token(shape: &[usize], layout: TokenLayout, mut f: impl FnMut(usize, usize, usize)) {
    let (n, hw) = (shape[0], shape[2] * shape[3]);
    match layout {
        TokenLayout::Temporal { frames } => {
            for m in 0..n {
                let (b, fr) = (m / frames, m % frames);
                for p in 0..hw {
                    f(m, p, (b * hw + p) * frames + fr);
                }
            }
        }
        TokenLayout::Spatial => {
            for m in 0..n {
                for p in 0..hw {
                    f(m, p, m * hw + p);
                }
            }
        }
    }
}
