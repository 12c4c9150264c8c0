//! Forward and backward kernels for every op kind.
//!
//! Activations are sample-major: `(n, …per-sample shape)`. Kernels are
//! generic over [`Real`] so the same code runs on `f32`/`f64` values and on
//! dual numbers.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Values saved by a forward kernel for its backward pass.
#[derive(Debug, Clone)]
pub(crate) enum Saved<S> {
    None,
    Input(Tensor<S>),
    /// im2col matrix `(n·oh·ow, c·kh·kw)` and the input shape.
    Conv { cols: Tensor<S>, in_shape: Vec<usize> },
    /// Flat input index selected for every pooled output.
    ArgMax { index: Vec<usize>, in_shape: Vec<usize> },
    /// Softmax output.
    Probs(Tensor<S>),
    Shape(Vec<usize>),
    Attention(Box<AttentionSaved<S>>),
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionSaved<S> {
    x2: Tensor<S>,
    q: Tensor<S>,
    k: Tensor<S>,
    v: Tensor<S>,
    /// `(n, heads, seq, seq)` attention probabilities.
    probs: Vec<S>,
    in_shape: Vec<usize>,
}

fn rows_view<S: Real>(x: &Tensor<S>, last: usize) -> Result<Tensor<S>> {
    let rows = x.numel() / last;
    x.clone().reshape(&[rows, last])
}

pub(crate) fn dense_forward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    if x.shape().last() != Some(&d_in) {
        return Err(Error::shape("dense input", x.shape(), w.shape()));
    }
    let mut y = rows_view(x, d_in)?.matmul(w)?;
    if let Some(b) = bias {
        for row in y.data_mut().chunks_mut(d_out) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    y.reshape(&shape)
}

pub(crate) struct DenseGrads<S> {
    pub x: Option<Tensor<S>>,
    pub w: Option<Tensor<S>>,
    pub b: Option<Tensor<S>>,
}

pub(crate) fn dense_backward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    gy: &Tensor<S>,
    want: [bool; 3],
) -> Result<DenseGrads<S>> {
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    let g2 = rows_view(gy, d_out)?;
    let gx = if want[0] {
        Some(g2.matmul_nt(w)?.reshape(x.shape())?)
    } else {
        None
    };
    let gw = if want[1] {
        Some(rows_view(x, d_in)?.matmul_tn(&g2)?)
    } else {
        None
    };
    let gb = if want[2] {
        Some(column_sums(&g2))
    } else {
        None
    };
    Ok(DenseGrads { x: gx, w: gw, b: gb })
}

fn column_sums<S: Real>(m: &Tensor<S>) -> Tensor<S> {
    let cols = m.shape()[1];
    let mut out = vec![S::zero(); cols];
    for row in m.data().chunks(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::new([cols], out).expect("column sums")
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(in_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if in_shape.len() != 4 || w_shape.len() != 4 || in_shape[1] != w_shape[1] {
            return Err(Error::shape("conv2d input vs weight", in_shape, w_shape));
        }
        let (h, w) = (in_shape[2], in_shape[3]);
        let (kh, kw) = (w_shape[2], w_shape[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw || stride == 0 {
            return Err(Error::shape("conv2d window", in_shape, w_shape));
        }
        Ok(ConvGeom {
            n: in_shape[0],
            c: in_shape[1],
            h,
            w,
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Calls `f(col_row, col_index, input_flat_index)` for each in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let plen = self.patch_len();
        for b in 0..self.n {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let row = (b * self.oh + oy) * self.ow + ox;
                    for ch in 0..self.c {
                        for ky in 0..self.kh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for kx in 0..self.kw {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                let col = (ch * self.kh + ky) * self.kw + kx;
                                let src = ((b * self.c + ch) * self.h + iy as usize) * self.w
                                    + ix as usize;
                                f(row * plen + col, col, src);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `(n, o, oh, ow)` from a `(n·oh·ow, o)` matrix.
fn rows_to_nchw<S: Real>(m: &Tensor<S>, n: usize, o: usize, oh: usize, ow: usize) -> Tensor<S> {
    let mut out = vec![S::zero(); n * o * oh * ow];
    let hw = oh * ow;
    for b in 0..n {
        for p in 0..hw {
            let src = &m.data()[(b * hw + p) * o..(b * hw + p + 1) * o];
            for (ch, &v) in src.iter().enumerate() {
                out[(b * o + ch) * hw + p] = v;
            }
        }
    }
    Tensor::new([n, o, oh, ow], out).expect("nchw")
}

fn nchw_to_rows<S: Real>(t: &Tensor<S>) -> Tensor<S> {
    let s = t.shape();
    let (n, o, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = vec![S::zero(); n * o * hw];
    for b in 0..n {
        for ch in 0..o {
            for p in 0..hw {
                out[(b * hw + p) * o + ch] = t.data()[(b * o + ch) * hw + p];
            }
        }
    }
    Tensor::new([n * hw, o], out).expect("rows")
}

pub(crate) fn conv_forward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<S>, Saved<S>)> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    let plen = g.patch_len();
    let mut cols = vec![S::zero(); g.n * g.oh * g.ow * plen];
    g.for_each_tap(|dst, _, src| cols[dst] = x.data()[src]);
    let cols = Tensor::new([g.n * g.oh * g.ow, plen], cols)?;
    let o = w.shape()[0];
    let wm = w.clone().reshape(&[o, plen])?;
    let mut y = cols.matmul_nt(&wm)?;
    if let Some(b) = bias {
        for row in y.data_mut().chunks_mut(o) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    let y = rows_to_nchw(&y, g.n, o, g.oh, g.ow);
    Ok((
        y,
        Saved::Conv {
            cols,
            in_shape: x.shape().to_vec(),
        },
    ))
}

pub(crate) fn conv_backward<S: Real>(
    cols: &Tensor<S>,
    in_shape: &[usize],
    w: &Tensor<S>,
    stride: usize,
    pad: usize,
    gy: &Tensor<S>,
    want: [bool; 3],
) -> Result<DenseGrads<S>> {
    let g = ConvGeom::new(in_shape, w.shape(), stride, pad)?;
    let o = w.shape()[0];
    let plen = g.patch_len();
    let g2 = nchw_to_rows(gy);
    let gx = if want[0] {
        let wm = w.clone().reshape(&[o, plen])?;
        let gcols = g2.matmul(&wm)?;
        let mut gx = vec![S::zero(); in_shape.iter().product()];
        g.for_each_tap(|src, _, dst| gx[dst] += gcols.data()[src]);
        Some(Tensor::new(in_shape.to_vec(), gx)?)
    } else {
        None
    };
    let gw = if want[1] {
        Some(g2.matmul_tn(cols)?.reshape(w.shape())?)
    } else {
        None
    };
    let gb = if want[2] { Some(column_sums(&g2)) } else { None };
    Ok(DenseGrads { x: gx, w: gw, b: gb })
}

/// Per-channel affine map over axis 1.
pub(crate) fn channel_affine<S: Real>(x: &Tensor<S>, scale: &[S], shift: &[S]) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.len() < 2 || s[1] != scale.len() {
        return Err(Error::shape("batchnorm channels", s, &[scale.len()]));
    }
    let inner: usize = s[2..].iter().product();
    let c = s[1];
    let mut y = x.clone();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        let ch = (i / inner) % c;
        *v = *v * scale[ch] + shift[ch];
    }
    Ok(y)
}

pub(crate) fn channel_scale<S: Real>(g: &Tensor<S>, scale: &[S]) -> Tensor<S> {
    let s = g.shape();
    let inner: usize = s[2..].iter().product();
    let c = s[1];
    let mut out = g.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v *= scale[(i / inner) % c];
    }
    out
}

fn pool_geom(in_shape: &[usize], kernel: usize, stride: usize) -> Result<(usize, usize)> {
    if in_shape.len() != 4 || in_shape[2] < kernel || in_shape[3] < kernel || stride == 0 {
        return Err(Error::shape("pooling window", in_shape, &[kernel, stride]));
    }
    Ok((
        (in_shape[2] - kernel) / stride + 1,
        (in_shape[3] - kernel) / stride + 1,
    ))
}

pub(crate) fn avgpool_forward<S: Real>(x: &Tensor<S>, kernel: usize, stride: usize) -> Result<Tensor<S>> {
    let s = x.shape();
    let (oh, ow) = pool_geom(s, kernel, stride)?;
    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
    let inv = S::from_f64(1.0 / (kernel * kernel) as f64);
    let mut out = vec![S::zero(); nc * oh * ow];
    for p in 0..nc {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = S::zero();
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        acc += x.data()[(p * h + oy * stride + ky) * w + ox * stride + kx];
                    }
                }
                out[(p * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    Tensor::new([s[0], s[1], oh, ow], out)
}

pub(crate) fn avgpool_backward<S: Real>(
    in_shape: &[usize],
    kernel: usize,
    stride: usize,
    gy: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (oh, ow) = pool_geom(in_shape, kernel, stride)?;
    let (nc, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let inv = S::from_f64(1.0 / (kernel * kernel) as f64);
    let mut gx = vec![S::zero(); nc * h * w];
    for p in 0..nc {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gy.data()[(p * oh + oy) * ow + ox] * inv;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        gx[(p * h + oy * stride + ky) * w + ox * stride + kx] += g;
                    }
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gx)
}

pub(crate) fn maxpool_forward<S: Real>(
    x: &Tensor<S>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<S>, Saved<S>)> {
    let s = x.shape();
    let (oh, ow) = pool_geom(s, kernel, stride)?;
    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(nc * oh * ow);
    let mut index = Vec::with_capacity(nc * oh * ow);
    for p in 0..nc {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (p * h + oy * stride) * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = (p * h + oy * stride + ky) * w + ox * stride + kx;
                        if x.data()[i].primal() > x.data()[best].primal() {
                            best = i;
                        }
                    }
                }
                out.push(x.data()[best]);
                index.push(best);
            }
        }
    }
    Ok((
        Tensor::new([s[0], s[1], oh, ow], out)?,
        Saved::ArgMax {
            index,
            in_shape: s.to_vec(),
        },
    ))
}

pub(crate) fn maxpool_backward<S: Real>(index: &[usize], in_shape: &[usize], gy: &Tensor<S>) -> Result<Tensor<S>> {
    let mut gx = vec![S::zero(); in_shape.iter().product()];
    for (&i, &g) in index.iter().zip(gy.data()) {
        gx[i] += g;
    }
    Tensor::new(in_shape.to_vec(), gx)
}

/// Row softmax over the last axis, shifted by the row's primal maximum.
pub(crate) fn softmax_rows<S: Real>(data: &mut [S], len: usize) {
    for row in data.chunks_mut(len) {
        let m = row
            .iter()
            .map(|v| v.primal())
            .fold(f64::NEG_INFINITY, f64::max);
        let shift = S::from_f64(m);
        let mut total = S::zero();
        for v in row.iter_mut() {
            *v = (*v - shift).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
}

/// `p ⊙ (g − Σ g⊙p)` row by row.
fn softmax_rows_backward<S: Real>(p: &[S], g: &[S], len: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(p.len());
    for (pr, gr) in p.chunks(len).zip(g.chunks(len)) {
        let mut dot = S::zero();
        for (&a, &b) in pr.iter().zip(gr) {
            dot += a * b;
        }
        out.extend(pr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    out
}

pub(crate) fn softmax_forward<S: Real>(x: &Tensor<S>) -> Tensor<S> {
    let len = *x.shape().last().unwrap();
    let mut y = x.clone();
    softmax_rows(y.data_mut(), len);
    y
}

pub(crate) fn softmax_backward<S: Real>(p: &Tensor<S>, gy: &Tensor<S>) -> Result<Tensor<S>> {
    let len = *p.shape().last().unwrap();
    Tensor::new(p.shape().to_vec(), softmax_rows_backward(p.data(), gy.data(), len))
}

pub(crate) fn attention_forward<S: Real>(
    x: &Tensor<S>,
    wq: &Tensor<S>,
    wk: &Tensor<S>,
    wv: &Tensor<S>,
    heads: usize,
    head_dim: usize,
) -> Result<(Tensor<S>, Saved<S>)> {
    let s = x.shape();
    if s.len() != 3 || wq.shape()[0] != s[2] {
        return Err(Error::shape("attention input", s, wq.shape()));
    }
    let (n, seq, d) = (s[0], s[1], s[2]);
    let hd = heads * head_dim;
    let x2 = x.clone().reshape(&[n * seq, d])?;
    let q = x2.matmul(wq)?;
    let k = x2.matmul(wk)?;
    let v = x2.matmul(wv)?;
    let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut probs = vec![S::zero(); n * heads * seq * seq];
    let mut out = vec![S::zero(); n * seq * hd];
    for b in 0..n {
        for h in 0..heads {
            let base = (b * heads + h) * seq * seq;
            let p = &mut probs[base..base + seq * seq];
            for i in 0..seq {
                let qi = &q.data()[(b * seq + i) * hd + h * head_dim..][..head_dim];
                for j in 0..seq {
                    let kj = &k.data()[(b * seq + j) * hd + h * head_dim..][..head_dim];
                    let mut acc = S::zero();
                    for (&a, &c) in qi.iter().zip(kj) {
                        acc += a * c;
                    }
                    p[i * seq + j] = acc * scale;
                }
            }
            softmax_rows(p, seq);
            for i in 0..seq {
                let dst = &mut out[(b * seq + i) * hd + h * head_dim..][..head_dim];
                for j in 0..seq {
                    let pij = p[i * seq + j];
                    let vj = &v.data()[(b * seq + j) * hd + h * head_dim..][..head_dim];
                    for (o, &vv) in dst.iter_mut().zip(vj) {
                        *o += pij * vv;
                    }
                }
            }
        }
    }
    let y = Tensor::new([n, seq, hd], out)?;
    Ok((
        y,
        Saved::Attention(Box::new(AttentionSaved {
            x2,
            q,
            k,
            v,
            probs,
            in_shape: s.to_vec(),
        })),
    ))
}

/// The `(n, heads, seq, seq)` probabilities of [`attention_forward`].
pub(crate) fn attention_probs<S: Real>(
    x: &Tensor<S>,
    wq: &Tensor<S>,
    wk: &Tensor<S>,
    wv: &Tensor<S>,
    heads: usize,
    head_dim: usize,
) -> Result<Tensor<S>> {
    let (_, saved) = attention_forward(x, wq, wk, wv, heads, head_dim)?;
    let Saved::Attention(a) = saved else {
        unreachable!("attention_forward saves attention state")
    };
    let (n, seq) = (a.in_shape[0], a.in_shape[1]);
    Tensor::new([n, heads, seq, seq], a.probs)
}

pub(crate) struct AttentionGrads<S> {
    pub x: Option<Tensor<S>>,
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
}

pub(crate) fn attention_backward<S: Real>(
    saved: &AttentionSaved<S>,
    wq: &Tensor<S>,
    wk: &Tensor<S>,
    wv: &Tensor<S>,
    heads: usize,
    head_dim: usize,
    gy: &Tensor<S>,
    want_x: bool,
) -> Result<AttentionGrads<S>> {
    let (n, seq) = (saved.in_shape[0], saved.in_shape[1]);
    let hd = heads * head_dim;
    let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());
    let (q, k, v) = (saved.q.data(), saved.k.data(), saved.v.data());
    let g = gy.data();
    let mut gq = vec![S::zero(); n * seq * hd];
    let mut gk = vec![S::zero(); n * seq * hd];
    let mut gv = vec![S::zero(); n * seq * hd];
    let mut gp = vec![S::zero(); seq * seq];
    for b in 0..n {
        for h in 0..heads {
            let p = &saved.probs[(b * heads + h) * seq * seq..][..seq * seq];
            let at = |row: usize| (b * seq + row) * hd + h * head_dim;
            // gP = G_h V_hᵀ, gV_h = P_hᵀ G_h
            for i in 0..seq {
                let gi = &g[at(i)..][..head_dim];
                for j in 0..seq {
                    let vj = &v[at(j)..][..head_dim];
                    let mut acc = S::zero();
                    for (&a, &c) in gi.iter().zip(vj) {
                        acc += a * c;
                    }
                    gp[i * seq + j] = acc;
                    let pij = p[i * seq + j];
                    let dst = at(j);
                    for (t, &gg) in gi.iter().enumerate() {
                        gv[dst + t] += pij * gg;
                    }
                }
            }
            let gs = softmax_rows_backward(p, &gp, seq);
            for i in 0..seq {
                for j in 0..seq {
                    let w = gs[i * seq + j] * scale;
                    let (qi, kj) = (at(i), at(j));
                    for t in 0..head_dim {
                        gq[qi + t] += w * k[kj + t];
                        gk[kj + t] += w * q[qi + t];
                    }
                }
            }
        }
    }
    let gq = Tensor::new([n * seq, hd], gq)?;
    let gk = Tensor::new([n * seq, hd], gk)?;
    let gv = Tensor::new([n * seq, hd], gv)?;
    let gx = if want_x {
        let mut gx = gq.matmul_nt(wq)?;
        gx.add_assign(&gk.matmul_nt(wk)?)?;
        gx.add_assign(&gv.matmul_nt(wv)?)?;
        Some(gx.reshape(&saved.in_shape)?)
    } else {
        None
    };
    Ok(AttentionGrads {
        x: gx,
        wq: saved.x2.matmul_tn(&gq)?,
        wk: saved.x2.matmul_tn(&gk)?,
        wv: saved.x2.matmul_tn(&gv)?,
    })
}
