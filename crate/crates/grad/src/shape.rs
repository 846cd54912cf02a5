//! Element-wise arithmetic, activations and layout operators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, GradError, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{Float, Tensor};

/// Splits a shape around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Float> Graph<T> {
    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        let ng = self.ng(a) || self.ng(b);
        let op = match name {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        self.push(value, op, ng, name)
    }

    fn unary(&mut self, x: Var, name: &'static str, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let v = self.value(x);
        let value = Tensor::new(v.shape(), v.data().iter().map(|&e| f(e)).collect())?;
        let ng = self.ng(x);
        self.push(value, op, ng, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y)
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, "mul_scalar", Op::Scale { x, s }, |e| e * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, "add_scalar", Op::Shift { x }, |e| e + s)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        if self.tracking_kinks() {
            let signs: Vec<bool> = self.value(x).data().iter().map(|&e| e >= T::zero()).collect();
            self.note_kinks(signs.into_iter());
        }
        self.unary(x, "abs", Op::Abs { x }, |e| e.abs())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "square", Op::Square { x }, |e| e * e)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "tanh", Op::Tanh { x }, |e| e.tanh())
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: T) -> Result<Var> {
        if self.tracking_kinks() {
            let signs: Vec<bool> = self.value(x).data().iter().map(|&e| e > T::zero()).collect();
            self.note_kinks(signs.into_iter());
        }
        self.unary(x, "leaky_relu", Op::LeakyRelu { x, alpha }, |e| {
            if e > T::zero() {
                e
            } else {
                alpha * e
            }
        })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.leaky_relu(x, T::zero())
    }

    /// Mean of all elements, as a scalar (shape `[]`).
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(GradError::Contract("mean of an empty tensor".into()));
        }
        let m = crate::tensor::sum(v.data()) / T::from_usize(v.numel()).unwrap();
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean { x }, ng, "mean")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = crate::tensor::sum(self.value(x).data());
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, ng, "sum")
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`. The mask is a pure function of `seed`.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(GradError::Contract(format!("dropout p={p} outside [0,1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        // Drop when a uniform 32-bit draw falls below p * 2^32.
        let threshold = (p * 4294967296.0).round() as u64;
        let mut draws = vec![0u32; n];
        rng.fill(&mut draws[..]);
        let mask: Vec<T> = draws
            .iter()
            .map(|&u| if u64::from(u) < threshold { T::zero() } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&e, &m)| e * m).collect();
        let value = Tensor::new(v.shape(), data)?;
        let ng = self.ng(x);
        self.push(value, Op::Dropout { x, mask }, ng, "dropout")
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.shape().len() {
            return Err(shape_err("softmax", v.shape(), &[axis]));
        }
        let (outer, len, inner) = axis_extents(v.shape(), axis);
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            let base = o * len * inner;
            for i in 0..inner {
                let idx = |k: usize| base + k * inner + i;
                let mut mx = T::neg_infinity();
                for k in 0..len {
                    mx = mx.max(src[idx(k)]);
                }
                let mut s = T::zero();
                for k in 0..len {
                    let e = (src[idx(k)] - mx).exp();
                    out[idx(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    out[idx(k)] = out[idx(k)] / s;
                }
            }
        }
        let value = Tensor::new(v.shape(), out)?;
        let ng = self.ng(x);
        self.push(value, Op::Softmax { x, axis }, ng, "softmax")
    }

    /// `(N, C*r*r, H, W)` to `(N, C, H*r, W*r)`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let [n, cr, h, w] = self.value(x).dims4("pixel_shuffle")?;
        if r == 0 || cr % (r * r) != 0 {
            return Err(shape_err("pixel_shuffle", self.shape(x), &[r * r]));
        }
        let c = cr / (r * r);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let (oh, ow) = (h * r, w * r);
        for b in 0..n {
            for ch in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        let ic = ch * r * r + i * r + j;
                        let sp = &src[((b * cr + ic) * h) * w..((b * cr + ic) * h + h) * w];
                        for y in 0..h {
                            for xx in 0..w {
                                out[((b * c + ch) * oh + y * r + i) * ow + xx * r + j] = sp[y * w + xx];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let ng = self.ng(x);
        self.push(value, Op::PixelShuffle { x, r }, ng, "pixel_shuffle")
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| GradError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(&shape, out)?;
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
            "concat",
        )
    }

    /// Constant padding of the two spatial axes of an NCHW tensor.
    pub fn pad2d(&mut self, x: Var, top: usize, bottom: usize, left: usize, right: usize, value: T) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("pad2d")?;
        let (oh, ow) = (h + top + bottom, w + left + right);
        let src = self.value(x).data();
        let mut out = vec![value; n * c * oh * ow];
        for (pi, plane) in src.chunks(h * w).enumerate() {
            for y in 0..h {
                let d = (pi * oh + y + top) * ow + left;
                out[d..d + w].copy_from_slice(&plane[y * w..(y + 1) * w]);
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let ng = self.ng(x);
        self.push(value, Op::Pad2d { x, top, left }, ng, "pad2d")
    }

    /// Spatial window `[top, top+h) x [left, left+w)` of an NCHW tensor.
    pub fn crop2d(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let [n, c, ih, iw] = self.value(x).dims4("crop2d")?;
        if top + h > ih || left + w > iw {
            return Err(shape_err("crop2d", self.shape(x), &[top + h, left + w]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * h * w);
        for plane in src.chunks(ih * iw) {
            for y in top..top + h {
                out.extend_from_slice(&plane[y * iw + left..y * iw + left + w]);
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let ng = self.ng(x);
        self.push(value, Op::Crop2d { x, top, left }, ng, "crop2d")
    }
}

pub(crate) fn softmax_backward<T: Float>(y: &Tensor<T>, axis: usize, g: &[T]) -> Vec<T> {
    let (outer, len, inner) = axis_extents(y.shape(), axis);
    let yv = y.data();
    let mut dx = vec![T::zero(); yv.len()];
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let mut dot = T::zero();
            for k in 0..len {
                let idx = base + k * inner + i;
                dot += g[idx] * yv[idx];
            }
            for k in 0..len {
                let idx = base + k * inner + i;
                dx[idx] = yv[idx] * (g[idx] - dot);
            }
        }
    }
    dx
}

/// Adjoint of pixel shuffle; `out_shape` is the shuffled (output) shape.
pub(crate) fn pixel_unshuffle<T: Float>(out_shape: &[usize], r: usize, g: &[T]) -> Vec<T> {
    let (n, c, oh, ow) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
    let (h, w) = (oh / r, ow / r);
    let cr = c * r * r;
    let mut dx = vec![T::zero(); g.len()];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let ic = ch * r * r + i * r + j;
                    for y in 0..h {
                        for xx in 0..w {
                            dx[((b * cr + ic) * h + y) * w + xx] =
                                g[((b * c + ch) * oh + y * r + i) * ow + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn split_axis<T: Float>(shape: &[usize], parts: &[Vec<usize>], axis: usize, g: &[T]) -> Vec<Vec<T>> {
    let (outer, _, inner) = axis_extents(shape, axis);
    let mut out: Vec<Vec<T>> = parts
        .iter()
        .map(|s| Vec::with_capacity(s.iter().product()))
        .collect();
    let mut off = 0;
    for _ in 0..outer {
        for (p, s) in out.iter_mut().zip(parts) {
            let chunk = s[axis] * inner;
            p.extend_from_slice(&g[off..off + chunk]);
            off += chunk;
        }
    }
    out
}

/// `buf` (shape `xs`) += window of `g` (shape `ys`) at (`top`, `left`).
pub(crate) fn crop_accumulate<T: Float>(ys: &[usize], g: &[T], xs: &[usize], top: usize, left: usize, buf: &mut [T]) {
    let (oh, ow) = (ys[2], ys[3]);
    let (h, w) = (xs[2], xs[3]);
    for (pi, plane) in buf.chunks_mut(h * w).enumerate() {
        for y in 0..h {
            let s = (pi * oh + y + top) * ow + left;
            for (d, &v) in plane[y * w..(y + 1) * w].iter_mut().zip(&g[s..s + w]) {
                *d += v;
            }
        }
    }
}

/// `buf` (shape `xs`) += `g` (shape `ys`) placed at (`top`, `left`).
pub(crate) fn pad_accumulate<T: Float>(ys: &[usize], g: &[T], xs: &[usize], top: usize, left: usize, buf: &mut [T]) {
    let (h, w) = (ys[2], ys[3]);
    let (ih, iw) = (xs[2], xs[3]);
    for (pi, plane) in g.chunks(h * w).enumerate() {
        for y in 0..h {
            let d = (pi * ih + y + top) * iw + left;
            for (dst, &v) in buf[d..d + w].iter_mut().zip(&plane[y * w..(y + 1) * w]) {
                *dst += v;
            }
        }
    }
}
