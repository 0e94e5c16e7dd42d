//! Forward and backward kernels on flat buffers. Shape checking happens in
//! `tape.rs` before any kernel is called.

use super::{numel, strides, TensorError};
use crate::scalar::Scalar;

pub(super) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// For every flat index of `out`, the flat index of `src` it reads under
/// broadcasting. `src` must be broadcast-compatible with `out`.
pub(super) fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - src.len();
    let src_strides = strides(src);
    let mut eff = vec![0; rank];
    for i in 0..src.len() {
        eff[i + offset] = if src[i] == 1 { 0 } else { src_strides[i] };
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..n {
        map.push(pos);
        for d in (0..rank).rev() {
            counter[d] += 1;
            pos += eff[d];
            if counter[d] < out[d] {
                break;
            }
            pos -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
    map
}

/// Sums `grad` back onto a source of `n` elements through a broadcast map.
pub(super) fn reduce_by_map<S: Scalar>(grad: &[S], map: &[usize], n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n];
    for (g, &i) in grad.iter().zip(map) {
        out[i] += *g;
    }
    out
}

/// `[m,k] x [k,n]`.
pub(super) fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `[m,k] x [n,k]^T`.
pub(super) fn matmul_bt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `[k,m]^T x [k,n]`.
pub(super) fn matmul_at<S: Scalar>(a: &[S], b: &[S], k: usize, m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    out
}

pub(super) fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Geometry of a 2-D convolution over NCHW input with OIHW weights.
#[derive(Debug, Clone, Copy)]
pub(super) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// `[C*kh*kw, out_h*out_w]` patch matrix of one image.
    fn im2col<S: Scalar>(&self, image: &[S]) -> Vec<S> {
        let mut cols = vec![S::zero(); self.patch() * self.positions()];
        let pos = self.positions();
        for c in 0..self.in_ch {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            cols[row * pos + oy * self.out_w + ox] = image
                                [(c * self.height + iy as usize) * self.width + ix as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add<S: Scalar>(&self, cols: &[S], image: &mut [S]) {
        let pos = self.positions();
        for c in 0..self.in_ch {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            image[(c * self.height + iy as usize) * self.width + ix as usize] +=
                                cols[row * pos + oy * self.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn conv2d_forward<S: Scalar>(
    g: &ConvGeom,
    input: &[S],
    weight: &[S],
    bias: Option<&[S]>,
) -> Vec<S> {
    let img = g.in_ch * g.height * g.width;
    let per_out = g.out_ch * g.positions();
    let mut out = Vec::with_capacity(g.batch * per_out);
    for n in 0..g.batch {
        let cols = g.im2col(&input[n * img..(n + 1) * img]);
        let mut y = matmul(weight, &cols, g.out_ch, g.patch(), g.positions());
        if let Some(b) = bias {
            for o in 0..g.out_ch {
                for v in &mut y[o * g.positions()..(o + 1) * g.positions()] {
                    *v += b[o];
                }
            }
        }
        out.extend_from_slice(&y);
    }
    out
}

/// Returns gradients for (input, weight, bias).
pub(super) fn conv2d_backward<S: Scalar>(
    g: &ConvGeom,
    input: &[S],
    weight: &[S],
    grad: &[S],
    need_input: bool,
) -> (Option<Vec<S>>, Vec<S>, Vec<S>) {
    let img = g.in_ch * g.height * g.width;
    let pos = g.positions();
    let per_out = g.out_ch * pos;
    let mut d_input = need_input.then(|| vec![S::zero(); g.batch * img]);
    let mut d_weight = vec![S::zero(); g.out_ch * g.patch()];
    let mut d_bias = vec![S::zero(); g.out_ch];
    for n in 0..g.batch {
        let gy = &grad[n * per_out..(n + 1) * per_out];
        for o in 0..g.out_ch {
            for &v in &gy[o * pos..(o + 1) * pos] {
                d_bias[o] += v;
            }
        }
        let cols = g.im2col(&input[n * img..(n + 1) * img]);
        let dw = matmul_bt(gy, &cols, g.out_ch, pos, g.patch());
        for (acc, v) in d_weight.iter_mut().zip(dw) {
            *acc += v;
        }
        if let Some(dx) = d_input.as_mut() {
            let dcols = matmul_at(weight, gy, g.out_ch, g.patch(), pos);
            g.col2im_add(&dcols, &mut dx[n * img..(n + 1) * img]);
        }
    }
    (d_input, d_weight, d_bias)
}

/// Non-overlapping max pooling over `[N,C,H,W]`; ties keep the lowest flat
/// index in the window. Returns (output, argmax source index per output).
pub(super) fn maxpool_forward<S: Scalar>(
    input: &[S],
    shape: &[usize],
    size: usize,
) -> (Vec<S>, Vec<usize>, [usize; 2]) {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(nc * oh * ow);
    let mut arg = Vec::with_capacity(nc * oh * ow);
    for plane in 0..nc {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (oy * size) * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg, [oh, ow])
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
pub(super) fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(super) fn l2_normalize_forward<S: Scalar>(
    x: &[S],
    shape: &[usize],
    axis: usize,
    floor: S,
) -> (Vec<S>, Vec<S>) {
    let (outer, len, inner) = lanes(shape, axis);
    let mut out = vec![S::zero(); x.len()];
    let mut norms = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mut ss = S::zero();
            for k in 0..len {
                ss += x[idx(k)] * x[idx(k)];
            }
            let norm = ss.sqrt().max(floor);
            for k in 0..len {
                out[idx(k)] = x[idx(k)] / norm;
            }
            norms.push(norm);
        }
    }
    (out, norms)
}

pub(super) fn l2_normalize_backward<S: Scalar>(
    x: &[S],
    y: &[S],
    norms: &[S],
    grad: &[S],
    shape: &[usize],
    axis: usize,
    floor: S,
) -> Vec<S> {
    let (outer, len, inner) = lanes(shape, axis);
    let mut dx = vec![S::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let norm = norms[o * inner + i];
            let mut ss = S::zero();
            for k in 0..len {
                ss += x[idx(k)] * x[idx(k)];
            }
            if ss.sqrt() < floor {
                for k in 0..len {
                    dx[idx(k)] = grad[idx(k)] / norm;
                }
                continue;
            }
            let mut dot = S::zero();
            for k in 0..len {
                dot += y[idx(k)] * grad[idx(k)];
            }
            for k in 0..len {
                dx[idx(k)] = (grad[idx(k)] - y[idx(k)] * dot) / norm;
            }
        }
    }
    dx
}

pub(super) fn pairwise_sq_forward<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, d: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ai = &a[i * d..(i + 1) * d];
        for j in 0..n {
            let bj = &b[j * d..(j + 1) * d];
            let mut acc = S::zero();
            for (&x, &y) in ai.iter().zip(bj) {
                let diff = x - y;
                acc += diff * diff;
            }
            out.push(acc);
        }
    }
    out
}

pub(super) fn pairwise_sq_backward<S: Scalar>(
    a: &[S],
    b: &[S],
    grad: &[S],
    m: usize,
    n: usize,
    d: usize,
) -> (Vec<S>, Vec<S>) {
    let two = S::one() + S::one();
    let mut da = vec![S::zero(); m * d];
    let mut db = vec![S::zero(); n * d];
    for i in 0..m {
        for j in 0..n {
            let g = grad[i * n + j] * two;
            if g == S::zero() {
                continue;
            }
            for k in 0..d {
                let diff = a[i * d + k] - b[j * d + k];
                da[i * d + k] += g * diff;
                db[j * d + k] -= g * diff;
            }
        }
    }
    (da, db)
}
