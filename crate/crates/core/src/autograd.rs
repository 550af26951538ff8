//! A small reverse-mode automatic differentiation tape.
//!
//! Only the operations the denoiser needs are provided. Each op caches what its
//! backward pass needs (padded inputs, normalized activations, attention
//! probabilities). Layouts: feature maps are `[N, C, H, W]`, token sequences
//! are `[N, L, D]`, linear weights are `[out, in]`, conv kernels are
//! `[out, in, k, k]`. Every op works sample by sample, so a sample's result
//! never depends on what else is in the batch.

use crate::tensor::{matmul, Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        xpad: Vec<F>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Silu {
        x: Var,
    },
    AddChannelBias {
        x: Var,
        b: Var,
    },
    AvgPool2 {
        x: Var,
    },
    Upsample2 {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    AddBroadcast {
        x: Var,
        y: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    ToTokens {
        x: Var,
    },
    FromTokens {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mask: Vec<bool>,
        heads: usize,
        probs: Vec<F>,
    },
    Mse {
        pred: Var,
        target: Vec<F>,
    },
    SumSq {
        x: Var,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(s.len(), 4, "expected a [N, C, H, W] tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn dims3(s: &[usize]) -> (usize, usize, usize) {
    assert_eq!(s.len(), 3, "expected a [N, L, D] tensor, got {s:?}");
    (s[0], s[1], s[2])
}

fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

#[inline]
fn axpy<F: Float>(a: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with 16 independent partial sums (vectorizes; fixed order).
#[inline]
fn dot<F: Float>(x: &[F], y: &[F]) -> F {
    let mut acc = [F::zero(); 16];
    let xc = x.chunks_exact(16);
    let yc = y.chunks_exact(16);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..16 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut tail = F::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    let mut s = F::zero();
    for v in acc {
        s += v;
    }
    s + tail
}

/// `acc[j] += sum_t taps[t] * plane[off_t + j]` over a 3x3 stencil whose
/// rows are `wp` apart.
#[inline]
fn stencil3<F: Float>(taps: &[F], plane: &[F], wp: usize, acc: &mut [F]) {
    let n = acc.len();
    let r0 = &plane[..n + 2];
    let r1 = &plane[wp..wp + n + 2];
    let r2 = &plane[2 * wp..2 * wp + n + 2];
    let t: [F; 9] = taps.try_into().unwrap();
    let (a0, a1, a2) = (&r0[..n], &r0[1..n + 1], &r0[2..n + 2]);
    let (b0, b1, b2) = (&r1[..n], &r1[1..n + 1], &r1[2..n + 2]);
    let (c0, c1, c2) = (&r2[..n], &r2[1..n + 1], &r2[2..n + 2]);
    for j in 0..n {
        let u = t[0] * a0[j] + t[1] * a1[j] + t[2] * a2[j];
        let v = t[3] * b0[j] + t[4] * b1[j] + t[5] * b2[j];
        let w = t[6] * c0[j] + t[7] * c1[j] + t[8] * c2[j];
        acc[j] += u + v + w;
    }
}

/// Geometry of a zero-padded plane used by the direct convolution.
///
/// A `h x w` plane padded by `p` is stored with row stride `wp = w + 2p` plus
/// `2p` trailing zeros, so every kernel tap is one contiguous shifted slice of
/// length `h * wp` (the `2p` extra columns per output row are discarded).
#[derive(Clone, Copy)]
struct Padded {
    h: usize,
    w: usize,
    p: usize,
    wp: usize,
    plen: usize,
    olen: usize,
}

impl Padded {
    fn new(h: usize, w: usize, k: usize) -> Self {
        let p = k / 2;
        let wp = w + 2 * p;
        Self {
            h,
            w,
            p,
            wp,
            plen: (h + 2 * p) * wp + 2 * p,
            olen: h * wp,
        }
    }
}

fn pad_plane<F: Float>(g: &Padded, src: &[F], dst: &mut [F]) {
    for y in 0..g.h {
        let o = (y + g.p) * g.wp + g.p;
        dst[o..o + g.w].copy_from_slice(&src[y * g.w..(y + 1) * g.w]);
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input (parameter).
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Same-padded, stride-1 2-D convolution with an odd square kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, ci, h, wd) = dims4(self.value(x).shape());
        let ws = self.value(w).shape().to_vec();
        assert!(ws.len() == 4 && ws[1] == ci && ws[2] == ws[3] && ws[2] % 2 == 1);
        let (co, k) = (ws[0], ws[2]);
        let g = Padded::new(h, wd, k);
        let hw = h * wd;
        let mut xpad = vec![F::zero(); n * ci * g.plen];
        let mut out = vec![F::zero(); n * co * hw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            for (plane, src) in xpad.chunks_exact_mut(g.plen).zip(xv.chunks_exact(hw)) {
                pad_plane(&g, src, plane);
            }
            let mut acc = vec![F::zero(); g.olen];
            for s in 0..n {
                let xs = &xpad[s * ci * g.plen..(s + 1) * ci * g.plen];
                for c in 0..co {
                    acc.fill(bv.map_or(F::zero(), |bv| bv[c]));
                    for (i, plane) in xs.chunks_exact(g.plen).enumerate() {
                        let taps = &wv[(c * ci + i) * k * k..(c * ci + i + 1) * k * k];
                        if k == 3 {
                            stencil3(taps, plane, g.wp, &mut acc);
                            continue;
                        }
                        for ky in 0..k {
                            for kx in 0..k {
                                let off = ky * g.wp + kx;
                                axpy(taps[ky * k + kx], &plane[off..off + g.olen], &mut acc);
                            }
                        }
                    }
                    let o = &mut out[(s * co + c) * hw..(s * co + c + 1) * hw];
                    for y in 0..h {
                        o[y * wd..(y + 1) * wd].copy_from_slice(&acc[y * g.wp..y * g.wp + wd]);
                    }
                }
            }
        }
        let value = Tensor::new(&[n, co, h, wd], out).unwrap();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Conv2d { x, w, b, k, xpad }, &inputs)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (n, c, h, w) = dims4(self.value(x).shape());
        assert!(c % groups == 0, "{c} channels not divisible by {groups} groups");
        let cg = c / groups;
        let m = cg * h * w;
        let eps = F::c(GROUP_NORM_EPS);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); n * groups];
        let mut out = vec![F::zero(); xv.len()];
        let inv_m = F::one() / F::c(m as f64);
        for s in 0..n {
            for g in 0..groups {
                let base = (s * c + g * cg) * h * w;
                let seg = &xv[base..base + m];
                let mean = seg.iter().copied().sum::<F>() * inv_m;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_m;
                let r = F::one() / (var + eps).sqrt();
                rstd[s * groups + g] = r;
                for (i, &v) in seg.iter().enumerate() {
                    let xh = (v - mean) * r;
                    let ch = g * cg + i / (h * w);
                    xhat[base + i] = xh;
                    out[base + i] = xh * gv[ch] + bv[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out).unwrap();
        self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Normalizes every row over the last axis, then applies `gamma[d]` and
    /// `beta[d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().expect("layer_norm needs at least one axis");
        let eps = F::c(GROUP_NORM_EPS);
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        assert!(gv.len() == d && bv.len() == d);
        let inv_d = F::one() / F::c(d as f64);
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(xv.len() / d);
        let mut out = vec![F::zero(); xv.len()];
        for (r, row) in xv.chunks_exact(d).enumerate() {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let inv = F::one() / (var + eps).sqrt();
            rstd.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * inv;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gv[j] + bv[j];
            }
        }
        let value = Tensor::new(&shape, out).unwrap();
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Smooth gated activation `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Silu { x }, &[x])
    }

    /// Adds `b[n, c]` to every spatial position of `x[n, c, :, :]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x).shape());
        assert_eq!(self.value(b).shape(), &[n, c]);
        let mut value = self.value(x).clone();
        let bv = self.value(b).data();
        for (i, chunk) in value.data_mut().chunks_mut(h * w).enumerate() {
            let add = bv[i];
            chunk.iter_mut().for_each(|v| *v += add);
        }
        self.push(value, Op::AddChannelBias { x, b }, &[x, b])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x).shape());
        assert!(h % 2 == 0 && w % 2 == 0);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let q = F::c(0.25);
        let mut out = vec![F::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * wo + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * q;
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out).unwrap();
        self.push(value, Op::AvgPool2 { x }, &[x])
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x).shape());
        let (ho, wo) = (2 * h, 2 * w);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    dst[y * wo + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(&[n, c, ho, wo], out).unwrap();
        self.push(value, Op::Upsample2 { x }, &[x])
    }

    /// Channel concatenation `[a ‖ b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = dims4(self.value(a).shape());
        let (nb, cb, hb, wb) = dims4(self.value(b).shape());
        assert!(n == nb && h == hb && w == wb, "concat spatial mismatch");
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&av[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&bv[s * cb * hw..(s + 1) * cb * hw]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], out).unwrap();
        self.push(value, Op::Concat { a, b }, &[a, b])
    }

    /// `y = x W^T + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let kdim = *xs.last().unwrap();
        assert!(ws.len() == 2 && ws[1] == kdim, "linear: {xs:?} vs weight {ws:?}");
        let mdim = ws[0];
        let rows = self.value(x).len() / kdim;
        let mut out = vec![F::zero(); rows * mdim];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..rows {
                out[r * mdim..(r + 1) * mdim].copy_from_slice(bv);
            }
        }
        matmul(
            rows,
            kdim,
            mdim,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            b.is_some(),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = mdim;
        let value = Tensor::new(&shape, out).unwrap();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Linear { x, w, b }, &inputs)
    }

    /// Row lookup: `ids` has `n * l` entries, result is `[n, l, D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], n: usize, l: usize) -> Var {
        assert_eq!(ids.len(), n * l);
        let ts = self.value(table).shape();
        let (v, d) = (ts[0], ts[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(n * l * d);
        for &id in ids {
            assert!(id < v, "token id {id} outside vocabulary of {v}");
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(&[n, l, d], out).unwrap();
        self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// `x[n, ...] + y[...]` for every sample `n`.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Var {
        let per = self.value(y).len();
        assert_eq!(&self.value(x).shape()[1..], self.value(y).shape());
        let mut value = self.value(x).clone();
        let yv = self.value(y).data();
        for chunk in value.data_mut().chunks_mut(per) {
            for (a, &b) in chunk.iter_mut().zip(yv) {
                *a += b;
            }
        }
        self.push(value, Op::AddBroadcast { x, y }, &[x, y])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add { a, b }, &[a, b])
    }

    /// `[N, C, H, W] -> [N, H*W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x).shape());
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(s * hw + p) * c + ch] = xv[(s * c + ch) * hw + p];
                }
            }
        }
        let value = Tensor::new(&[n, hw, c], out).unwrap();
        self.push(value, Op::ToTokens { x }, &[x])
    }

    /// `[N, H*W, C] -> [N, C, H, W]`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let (n, hw, c) = dims3(self.value(x).shape());
        assert_eq!(hw, h * w);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); xv.len()];
        for s in 0..n {
            for p in 0..hw {
                for ch in 0..c {
                    out[(s * c + ch) * hw + p] = xv[(s * hw + p) * c + ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out).unwrap();
        self.push(value, Op::FromTokens { x }, &[x])
    }

    /// Masked multi-head scaled dot-product attention.
    ///
    /// `mask[n * lk + j]` marks key `j` of sample `n` as attendable. A sample
    /// whose keys are all masked gets a zero context.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &[bool], heads: usize) -> Var {
        let (n, lq, d) = dims3(self.value(q).shape());
        let (nk, lk, dk) = dims3(self.value(k).shape());
        assert!(n == nk && d == dk && self.value(v).shape() == [n, lk, d]);
        assert_eq!(mask.len(), n * lk);
        assert!(d % heads == 0);
        let dh = d / heads;
        let scale = F::one() / F::c(dh as f64).sqrt();
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![F::zero(); n * heads * lq * lk];
        let mut out = vec![F::zero(); n * lq * d];
        let mut scores = vec![F::zero(); lk];
        for s in 0..n {
            let m = &mask[s * lk..(s + 1) * lk];
            if !m.iter().any(|&b| b) {
                continue;
            }
            for hd in 0..heads {
                for i in 0..lq {
                    let qi = &qv[(s * lq + i) * d + hd * dh..][..dh];
                    let mut mx = F::neg_infinity();
                    for j in 0..lk {
                        if !m[j] {
                            continue;
                        }
                        let kj = &kv[(s * lk + j) * d + hd * dh..][..dh];
                        let sc = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<F>() * scale;
                        scores[j] = sc;
                        mx = mx.max(sc);
                    }
                    let p = &mut probs[((s * heads + hd) * lq + i) * lk..][..lk];
                    let mut z = F::zero();
                    for j in 0..lk {
                        if m[j] {
                            let e = (scores[j] - mx).exp();
                            p[j] = e;
                            z += e;
                        }
                    }
                    let o = &mut out[(s * lq + i) * d + hd * dh..][..dh];
                    for j in 0..lk {
                        if m[j] {
                            p[j] = p[j] / z;
                            let vj = &vv[(s * lk + j) * d + hd * dh..][..dh];
                            for (a, &b) in o.iter_mut().zip(vj) {
                                *a += p[j] * b;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[n, lq, d], out).unwrap();
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                mask: mask.to_vec(),
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<F>) -> Var {
        assert_eq!(self.value(pred).shape(), target.shape());
        let pv = self.value(pred).data();
        let n = F::c(pv.len() as f64);
        let loss = pv
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<F>()
            / n;
        self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            &[pred],
        )
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_sq();
        self.push(Tensor::scalar(s), Op::SumSq { x }, &[x])
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), F::one()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Tensor<F>>], v: Var) -> &'a mut [F] {
        let shape = self.value(v).shape();
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(shape))
            .data_mut()
    }

    fn backprop_node(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, k, xpad } => {
                let (n, ci, h, wd) = dims4(self.value(*x).shape());
                let co = self.value(*w).shape()[0];
                let k = *k;
                let g = Padded::new(h, wd, k);
                let hw = h * wd;
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db = self.grad_buf(grads, *b);
                        for (j, plane) in gd.chunks_exact(hw).enumerate() {
                            db[j % co] += plane.iter().copied().sum::<F>();
                        }
                    }
                }
                let (need_w, need_x) = (self.needs(*w), self.needs(*x));
                if !need_w && !need_x {
                    return;
                }
                // Output gradient laid out with the padded row stride and a
                // zero margin of `lead` on both ends; the discarded columns
                // stay zero so they contribute nothing.
                let lead = (k - 1) * g.wp + k - 1;
                let glen = g.olen + 2 * lead;
                let mut gpad = vec![F::zero(); co * glen];
                let mut dw = vec![F::zero(); if need_w { co * ci * k * k } else { 0 }];
                let mut dx = vec![F::zero(); if need_x { n * ci * hw } else { 0 }];
                let mut dxpad = vec![F::zero(); g.plen];
                let wv = self.value(*w).data();
                let flipped: Vec<F> = wv
                    .chunks_exact(k * k)
                    .flat_map(|t| t.iter().rev().copied())
                    .collect();
                for s in 0..n {
                    for c in 0..co {
                        let src = &gd[(s * co + c) * hw..(s * co + c + 1) * hw];
                        let dst = &mut gpad[c * glen + lead..c * glen + lead + g.olen];
                        for y in 0..h {
                            dst[y * g.wp..y * g.wp + wd].copy_from_slice(&src[y * wd..(y + 1) * wd]);
                        }
                    }
                    for i in 0..ci {
                        let plane = &xpad[(s * ci + i) * g.plen..(s * ci + i + 1) * g.plen];
                        dxpad.fill(F::zero());
                        for c in 0..co {
                            let gc = &gpad[c * glen..(c + 1) * glen];
                            let go = &gc[lead..lead + g.olen];
                            let t0 = (c * ci + i) * k * k;
                            if k == 3 {
                                if need_w {
                                    for ky in 0..3 {
                                        for kx in 0..3 {
                                            let off = ky * g.wp + kx;
                                            dw[t0 + ky * 3 + kx] += dot(go, &plane[off..off + g.olen]);
                                        }
                                    }
                                }
                                if need_x {
                                    stencil3(&flipped[t0..t0 + 9], gc, g.wp, &mut dxpad);
                                }
                                continue;
                            }
                            for ky in 0..k {
                                for kx in 0..k {
                                    let off = ky * g.wp + kx;
                                    if need_w {
                                        dw[t0 + ky * k + kx] += dot(go, &plane[off..off + g.olen]);
                                    }
                                    if need_x {
                                        axpy(wv[t0 + ky * k + kx], go, &mut dxpad[off..off + g.olen]);
                                    }
                                }
                            }
                        }
                        if need_x {
                            let d = &mut dx[(s * ci + i) * hw..(s * ci + i + 1) * hw];
                            for y in 0..h {
                                let o = (y + g.p) * g.wp + g.p;
                                d[y * wd..(y + 1) * wd].copy_from_slice(&dxpad[o..o + wd]);
                            }
                        }
                    }
                }
                if need_w {
                    for (a, b) in self.grad_buf(grads, *w).iter_mut().zip(&dw) {
                        *a += *b;
                    }
                }
                if need_x {
                    for (a, b) in self.grad_buf(grads, *x).iter_mut().zip(&dx) {
                        *a += *b;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).len();
                let gv = self.value(*gamma).data();
                let mut dgam = vec![F::zero(); d];
                let mut dbet = vec![F::zero(); d];
                let mut dx = vec![F::zero(); gd.len()];
                let inv_d = F::one() / F::c(d as f64);
                for (r, &inv) in rstd.iter().enumerate() {
                    let g = &gd[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let (mut m1, mut m2) = (F::zero(), F::zero());
                    for j in 0..d {
                        dgam[j] += g[j] * xh[j];
                        dbet[j] += g[j];
                        let dxh = g[j] * gv[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    let (m1, m2) = (m1 * inv_d, m2 * inv_d);
                    for j in 0..d {
                        dx[r * d + j] = inv * (g[j] * gv[j] - m1 - xh[j] * m2);
                    }
                }
                for (var, buf) in [(*x, dx), (*gamma, dgam), (*beta, dbet)] {
                    if self.needs(var) {
                        for (a, b) in self.grad_buf(grads, var).iter_mut().zip(&buf) {
                            *a += *b;
                        }
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let (n, c, h, w) = dims4(self.value(*x).shape());
                let hw = h * w;
                let cg = c / groups;
                let m = cg * hw;
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dgam = vec![F::zero(); c];
                    let mut dbet = vec![F::zero(); c];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for p in 0..hw {
                                dgam[ch] += gd[base + p] * xhat[base + p];
                                dbet[ch] += gd[base + p];
                            }
                        }
                    }
                    if self.needs(*gamma) {
                        for (a, b) in self.grad_buf(grads, *gamma).iter_mut().zip(&dgam) {
                            *a += *b;
                        }
                    }
                    if self.needs(*beta) {
                        for (a, b) in self.grad_buf(grads, *beta).iter_mut().zip(&dbet) {
                            *a += *b;
                        }
                    }
                }
                if self.needs(*x) {
                    let gv = self.value(*gamma).data();
                    let mf = F::c(m as f64);
                    let dx = self.grad_buf(grads, *x);
                    let mut dxh = vec![F::zero(); m];
                    for s in 0..n {
                        for gi in 0..*groups {
                            let base = (s * c + gi * cg) * hw;
                            let mut sum = F::zero();
                            let mut dot = F::zero();
                            for j in 0..m {
                                let v = gd[base + j] * gv[gi * cg + j / hw];
                                dxh[j] = v;
                                sum += v;
                                dot += v * xhat[base + j];
                            }
                            let r = rstd[s * groups + gi] / mf;
                            for j in 0..m {
                                dx[base + j] += r * (mf * dxh[j] - sum - xhat[base + j] * dot);
                            }
                        }
                    }
                }
            }
            Op::Silu { x } => {
                let xv = self.value(*x).data();
                let dx = self.grad_buf(grads, *x);
                for ((d, &v), &gg) in dx.iter_mut().zip(xv).zip(gd) {
                    let s = sigmoid(v);
                    *d += gg * s * (F::one() + v * (F::one() - s));
                }
            }
            Op::AddChannelBias { x, b } => {
                let (_, _, h, w) = dims4(self.value(*x).shape());
                if self.needs(*x) {
                    for (d, &gg) in self.grad_buf(grads, *x).iter_mut().zip(gd) {
                        *d += gg;
                    }
                }
                if self.needs(*b) {
                    let db = self.grad_buf(grads, *b);
                    for (i, chunk) in gd.chunks(h * w).enumerate() {
                        db[i] += chunk.iter().copied().sum::<F>();
                    }
                }
            }
            Op::AvgPool2 { x } => {
                let (n, c, h, w) = dims4(self.value(*x).shape());
                let (ho, wo) = (h / 2, w / 2);
                let q = F::c(0.25);
                let dx = self.grad_buf(grads, *x);
                for p in 0..n * c {
                    let src = &gd[p * ho * wo..(p + 1) * ho * wo];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..ho {
                        for xx in 0..wo {
                            let v = src[y * wo + xx] * q;
                            let i = 2 * y * w + 2 * xx;
                            dst[i] += v;
                            dst[i + 1] += v;
                            dst[i + w] += v;
                            dst[i + w + 1] += v;
                        }
                    }
                }
            }
            Op::Upsample2 { x } => {
                let (n, c, h, w) = dims4(self.value(*x).shape());
                let (ho, wo) = (2 * h, 2 * w);
                let dx = self.grad_buf(grads, *x);
                for p in 0..n * c {
                    let src = &gd[p * ho * wo..(p + 1) * ho * wo];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for y in 0..ho {
                        for xx in 0..wo {
                            dst[(y / 2) * w + xx / 2] += src[y * wo + xx];
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = dims4(self.value(*a).shape());
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                let ct = ca + cb;
                if self.needs(*a) {
                    let da = self.grad_buf(grads, *a);
                    for s in 0..n {
                        for (d, &gg) in da[s * ca * hw..(s + 1) * ca * hw]
                            .iter_mut()
                            .zip(&gd[s * ct * hw..(s * ct + ca) * hw])
                        {
                            *d += gg;
                        }
                    }
                }
                if self.needs(*b) {
                    let db = self.grad_buf(grads, *b);
                    for s in 0..n {
                        for (d, &gg) in db[s * cb * hw..(s + 1) * cb * hw]
                            .iter_mut()
                            .zip(&gd[(s * ct + ca) * hw..(s + 1) * ct * hw])
                        {
                            *d += gg;
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let kdim = *self.value(*x).shape().last().unwrap();
                let mdim = self.value(*w).shape()[0];
                let rows = self.value(*x).len() / kdim;
                if self.needs(*x) {
                    let wv = self.value(*w).data();
                    let dx = self.grad_buf(grads, *x);
                    matmul(rows, mdim, kdim, gd, false, wv, false, dx, true);
                }
                if self.needs(*w) {
                    let xv = self.value(*x).data();
                    let dw = self.grad_buf(grads, *w);
                    matmul(mdim, rows, kdim, gd, true, xv, false, dw, true);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db = self.grad_buf(grads, *b);
                        for r in 0..rows {
                            for (d, &gg) in db.iter_mut().zip(&gd[r * mdim..(r + 1) * mdim]) {
                                *d += gg;
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).shape()[1];
                let dt = self.grad_buf(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    for (a, &gg) in dt[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *a += gg;
                    }
                }
            }
            Op::AddBroadcast { x, y } => {
                if self.needs(*x) {
                    for (d, &gg) in self.grad_buf(grads, *x).iter_mut().zip(gd) {
                        *d += gg;
                    }
                }
                if self.needs(*y) {
                    let per = self.value(*y).len();
                    let dy = self.grad_buf(grads, *y);
                    for chunk in gd.chunks(per) {
                        for (d, &gg) in dy.iter_mut().zip(chunk) {
                            *d += gg;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs(*v) {
                        for (d, &gg) in self.grad_buf(grads, *v).iter_mut().zip(gd) {
                            *d += gg;
                        }
                    }
                }
            }
            Op::ToTokens { x } => {
                let (n, c, h, w) = dims4(self.value(*x).shape());
                let hw = h * w;
                let dx = self.grad_buf(grads, *x);
                for s in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            dx[(s * c + ch) * hw + p] += gd[(s * hw + p) * c + ch];
                        }
                    }
                }
            }
            Op::FromTokens { x } => {
                let (n, hw, c) = dims3(self.value(*x).shape());
                let dx = self.grad_buf(grads, *x);
                for s in 0..n {
                    for p in 0..hw {
                        for ch in 0..c {
                            dx[(s * hw + p) * c + ch] += gd[(s * c + ch) * hw + p];
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                mask,
                heads,
                probs,
            } => {
                let (n, lq, d) = dims3(self.value(*q).shape());
                let lk = self.value(*k).shape()[1];
                let dh = d / heads;
                let scale = F::one() / F::c(dh as f64).sqrt();
                let (qv, kv, vv) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut dq = vec![F::zero(); qv.len()];
                let mut dk = vec![F::zero(); kv.len()];
                let mut dv = vec![F::zero(); vv.len()];
                let mut dp = vec![F::zero(); lk];
                for s in 0..n {
                    let m = &mask[s * lk..(s + 1) * lk];
                    if !m.iter().any(|&b| b) {
                        continue;
                    }
                    for hd in 0..*heads {
                        for i in 0..lq {
                            let p = &probs[((s * heads + hd) * lq + i) * lk..][..lk];
                            let go = &gd[(s * lq + i) * d + hd * dh..][..dh];
                            let mut dot = F::zero();
                            for j in 0..lk {
                                if !m[j] {
                                    continue;
                                }
                                let vj = &vv[(s * lk + j) * d + hd * dh..][..dh];
                                dp[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum::<F>();
                                dot += p[j] * dp[j];
                                let dvj = &mut dv[(s * lk + j) * d + hd * dh..][..dh];
                                for (a, &b) in dvj.iter_mut().zip(go) {
                                    *a += p[j] * b;
                                }
                            }
                            for j in 0..lk {
                                if !m[j] {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - dot) * scale;
                                let qo = (s * lq + i) * d + hd * dh;
                                let ko = (s * lk + j) * d + hd * dh;
                                for e in 0..dh {
                                    dq[qo + e] += ds * kv[ko + e];
                                    dk[ko + e] += ds * qv[qo + e];
                                }
                            }
                        }
                    }
                }
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.needs(var) {
                        for (a, b) in self.grad_buf(grads, var).iter_mut().zip(&buf) {
                            *a += *b;
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred).data();
                let c = F::c(2.0) * gd[0] / F::c(pv.len() as f64);
                let dp = self.grad_buf(grads, *pred);
                for ((d, &p), &t) in dp.iter_mut().zip(pv).zip(target) {
                    *d += c * (p - t);
                }
            }
            Op::SumSq { x } => {
                let xv = self.value(*x).data();
                let c = F::c(2.0) * gd[0];
                for (d, &v) in self.grad_buf(grads, *x).iter_mut().zip(xv) {
                    *d += c * v;
                }
            }
        }
    }
}

pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, rng::standard_normal(&mut rng::stream(seed, &[]), n)).unwrap()
    }

    /// Compares tape gradients of `f` against central differences (h = 1e-5).
    fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let eval = |vals: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
            let root = f(&mut tape, &vars);
            (tape.value(root).data()[0], tape, vars, root)
        };
        let (_, tape, vars, root) = eval(inputs);
        let grads = tape.backward(root);
        let h = 1e-5;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).expect("input reached").data();
            for j in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let a = analytic[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(err < 1e-4, "input {i} elem {j}: tape {a} vs numeric {numeric}");
            }
        }
    }

    fn loss(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
        let target = randn(tape.value(y).shape(), seed);
        tape.mse(y, &target)
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
        let (n, ci, h, wd) = dims4(x.shape());
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let p = (k / 2) as isize;
        let mut out = vec![0.0; n * co * h * wd];
        for s in 0..n {
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[o];
                        for i in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (sy, sx) = (y as isize + ky as isize - p, xx as isize + kx as isize - p);
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((o * ci + i) * k + ky) * k + kx]
                                        * x.data()[((s * ci + i) * h + sy as usize) * wd + sx as usize];
                                }
                            }
                        }
                        out[((s * co + o) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        for k in [1, 3, 5] {
            let x = randn(&[2, 3, 5, 7], 1);
            let w = randn(&[4, 3, k, k], 2);
            let b = randn(&[4], 3);
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.param(x.clone()), tape.param(w.clone()), tape.param(b.clone()));
            let y = tape.conv2d(xv, wv, Some(bv));
            let expect = naive_conv(&x, &w, b.data());
            for (a, e) in tape.value(y).data().iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12, "k={k}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_gradients() {
        for k in [1, 3, 5] {
            let inputs = [randn(&[2, 2, 4, 5], 4), randn(&[3, 2, k, k], 5), randn(&[3], 6)];
            check(&inputs, |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]));
                loss(t, y, 7)
            });
        }
    }

    #[test]
    fn group_norm_and_silu_gradients() {
        let inputs = [randn(&[2, 4, 3, 3], 8), randn(&[4], 9), randn(&[4], 10)];
        check(&inputs, |t, v| {
            let y = t.group_norm(v[0], v[1], v[2], 2);
            let y = t.silu(y);
            loss(t, y, 11)
        });
    }

    #[test]
    fn resampling_and_concat_gradients() {
        let inputs = [randn(&[2, 2, 4, 4], 12), randn(&[2, 3, 2, 2], 13), randn(&[2, 5], 14)];
        check(&inputs, |t, v| {
            let p = t.avg_pool2(v[0]);
            let c = t.concat(p, v[1]);
            let u = t.upsample2(c);
            let y = t.add_channel_bias(u, v[2]);
            loss(t, y, 15)
        });
    }

    #[test]
    fn linear_embedding_and_broadcast_gradients() {
        let inputs = [randn(&[6, 3], 16), randn(&[4, 3], 17), randn(&[4], 18), randn(&[2, 3], 19)];
        check(&inputs, |t, v| {
            let e = t.embedding(v[0], &[1, 5, 0, 2, 2, 3], 3, 2);
            let e = t.add_broadcast(e, v[3]);
            let y = t.linear(e, v[1], Some(v[2]));
            let y = t.add(y, y);
            loss(t, y, 20)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let inputs = [randn(&[2, 3, 5], 30), randn(&[5], 31), randn(&[5], 32)];
        check(&inputs, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            let y = t.silu(y);
            loss(t, y, 33)
        });
    }

    #[test]
    fn attention_and_token_layout_gradients() {
        let inputs = [randn(&[2, 4, 2, 2], 21), randn(&[2, 3, 4], 22), randn(&[2, 3, 4], 23)];
        // second sample has every key masked
        let mask = [true, false, true, false, false, false];
        check(&inputs, |t, v| {
            let q = t.to_tokens(v[0]);
            let a = t.attention(q, v[1], v[2], &mask, 2);
            let y = t.from_tokens(a, 2, 2);
            let s = t.sum_sq(y);
            let l = loss(t, y, 24);
            t.add(s, l)
        });
    }

    #[test]
    fn fully_masked_sample_gets_zero_context() {
        let mut tape = Tape::<f64>::new();
        let q = tape.param(randn(&[1, 2, 4], 25));
        let k = tape.param(randn(&[1, 3, 4], 26));
        let v = tape.param(randn(&[1, 3, 4], 27));
        let a = tape.attention(q, k, v, &[false; 3], 1);
        assert!(tape.value(a).data().iter().all(|&x| x == 0.0));
        let s = tape.sum_sq(a);
        let g = tape.backward(s);
        assert!(g.get(q).map_or(true, |t| t.data().iter().all(|&x| x == 0.0)));
    }
}
