//! 2-D convolution and its transpose. Strided layers lower to GEMM through
//! im2col; stride-1 layers work on a zero-padded copy of the input.

use crate::error::{shape_err, GradError, Result};
use crate::graph::{accumulate, Graph, Op, Var};
use crate::tensor::{dot, Float, Tensor};

/// Hyper-parameters of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self {
            stride,
            pad,
            dilation: 1,
        }
    }

    pub fn dilated(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }
}

/// Geometry of a convolution from an image of `c x h x w` to `oh x ow`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, spec: ConvSpec) -> Option<Self> {
        let ConvSpec {
            stride,
            pad,
            dilation,
        } = spec;
        if stride == 0 || dilation == 0 {
            return None;
        }
        let span_h = dilation * (kh - 1) + 1;
        let span_w = dilation * (kw - 1) + 1;
        if h + 2 * pad < span_h || w + 2 * pad < span_w {
            return None;
        }
        Some(Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            dilation,
            oh: (h + 2 * pad - span_h) / stride + 1,
            ow: (w + 2 * pad - span_w) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Stride-1 lowering for this layer, if any.
    fn padded_path(&self, cout: usize) -> Option<Padded> {
        if self.stride != 1 || self.is_pointwise() {
            None
        } else if cout <= 4 {
            Some(Padded::Direct)
        } else if self.c >= 8 {
            Some(Padded::Shifted)
        } else {
            None
        }
    }

    fn padded_w(&self) -> usize {
        self.w + 2 * self.pad
    }

    /// Elements per zero-padded input plane.
    fn padded_plane(&self) -> usize {
        (self.h + 2 * self.pad) * self.padded_w()
    }

    /// Zero tail after the last plane so every shifted window stays in
    /// bounds.
    fn padded_len(&self) -> usize {
        self.c * self.padded_plane() + self.dilation * (self.kw - 1) + 1
    }

    /// Offset of tap `t` into a padded plane.
    fn tap_offset(&self, t: usize) -> usize {
        let (ki, kj) = (t / self.kw, t % self.kw);
        (ki * self.padded_w() + kj) * self.dilation
    }

    /// Output positions laid out with padded row width.
    fn wide_positions(&self) -> usize {
        self.oh * self.padded_w()
    }
}

/// Stride-1 strategies that work on a zero-padded copy of the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Padded {
    /// Explicit tap loops; few output channels make the GEMM degenerate.
    Direct,
    /// One GEMM per tap against a shifted view of the padded input.
    Shifted,
}

fn pad_input<T: Float>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let (wp, pp) = (g.padded_w(), g.padded_plane());
    let mut out = vec![T::zero(); g.padded_len()];
    for c in 0..g.c {
        for i in 0..g.h {
            let dst = c * pp + (i + g.pad) * wp + g.pad;
            out[dst..dst + g.w].copy_from_slice(&x[(c * g.h + i) * g.w..(c * g.h + i + 1) * g.w]);
        }
    }
    out
}

/// `o[x] += sum_j w[j] * row[x + j*d]`.
fn tap_row<T: Float, const K: usize>(o: &mut [T], row: &[T], w: &[T], d: usize) {
    let n = o.len();
    let rows: [&[T]; K] = std::array::from_fn(|j| &row[j * d..j * d + n]);
    let w: [T; K] = std::array::from_fn(|j| w[j]);
    for x in 0..n {
        let mut s = o[x];
        for j in 0..K {
            s += w[j] * rows[j][x];
        }
        o[x] = s;
    }
}

fn tap_row_dyn<T: Float>(o: &mut [T], row: &[T], w: &[T], d: usize) {
    let n = o.len();
    for (j, &wj) in w.iter().enumerate() {
        for (ov, &r) in o.iter_mut().zip(&row[j * d..j * d + n]) {
            *ov += wj * r;
        }
    }
}

macro_rules! by_width {
    ($kw:expr, $f:ident, $dynf:ident, ($($arg:expr),*)) => {
        match $kw {
            3 => $f::<T, 3>($($arg),*),
            4 => $f::<T, 4>($($arg),*),
            7 => $f::<T, 7>($($arg),*),
            _ => $dynf($($arg),*),
        }
    };
}

/// Accumulates the valid correlation of `planes` (rows of width `wp`) with
/// one `kh x kw` kernel into `out` (`oh x ow`).
#[allow(clippy::too_many_arguments)]
fn correlate_plane<T: Float>(out: &mut [T], ow: usize, plane: &[T], wp: usize, k: &[T], kh: usize, kw: usize, d: usize) {
    for (oi, o) in out.chunks_exact_mut(ow).enumerate() {
        for ki in 0..kh {
            let row = &plane[(oi + ki * d) * wp..];
            let wr = &k[ki * kw..(ki + 1) * kw];
            by_width!(kw, tap_row, tap_row_dyn, (o, row, wr, d));
        }
    }
}

fn direct_forward<T: Float>(g: &ConvGeom, xpad: &[T], w: &[T], cout: usize, out: &mut [T]) {
    let (pp, p, kk) = (g.padded_plane(), g.positions(), g.kh * g.kw);
    for co in 0..cout {
        let o = &mut out[co * p..(co + 1) * p];
        for ci in 0..g.c {
            let k = &w[(co * g.c + ci) * kk..(co * g.c + ci + 1) * kk];
            correlate_plane(o, g.ow, &xpad[ci * pp..], g.padded_w(), k, g.kh, g.kw, g.dilation);
        }
    }
}

/// Input gradient as a full correlation of `gy` with the flipped kernel,
/// accumulated into `dx`.
fn direct_backward_input<T: Float>(g: &ConvGeom, w: &[T], gy: &[T], cout: usize, dx: &mut [T]) {
    let (p, kk, d) = (g.positions(), g.kh * g.kw, g.dilation);
    let (sh, sw) = (d * (g.kh - 1), d * (g.kw - 1));
    let (hp, wp) = (g.h + 2 * g.pad, g.padded_w());
    // gy padded by the kernel span on every side; rows of width `gw`.
    let gw = g.ow + 2 * sw;
    let gplane = (g.oh + 2 * sh) * gw;
    let mut gpad = vec![T::zero(); cout * gplane + sw + 1];
    for co in 0..cout {
        for oi in 0..g.oh {
            let dst = co * gplane + (oi + sh) * gw + sw;
            gpad[dst..dst + g.ow].copy_from_slice(&gy[co * p + oi * g.ow..co * p + (oi + 1) * g.ow]);
        }
    }
    let mut dpad = vec![T::zero(); hp * wp];
    let mut flipped = vec![T::zero(); kk];
    for ci in 0..g.c {
        dpad.fill(T::zero());
        for co in 0..cout {
            let k = &w[(co * g.c + ci) * kk..(co * g.c + ci + 1) * kk];
            for (f, &v) in flipped.iter_mut().zip(k.iter().rev()) {
                *f = v;
            }
            correlate_plane(&mut dpad, wp, &gpad[co * gplane..], gw, &flipped, g.kh, g.kw, d);
        }
        for i in 0..g.h {
            let src = &dpad[(i + g.pad) * wp + g.pad..(i + g.pad) * wp + g.pad + g.w];
            for (a, &b) in dx[(ci * g.h + i) * g.w..(ci * g.h + i + 1) * g.w].iter_mut().zip(src) {
                *a += b;
            }
        }
    }
}

fn direct_backward_weight<T: Float>(g: &ConvGeom, xpad: &[T], gy: &[T], cout: usize, dw: &mut [T]) {
    let (pp, wp, p, kk, d) = (g.padded_plane(), g.padded_w(), g.positions(), g.kh * g.kw, g.dilation);
    for co in 0..cout {
        for ci in 0..g.c {
            let plane = &xpad[ci * pp..];
            let acc = &mut dw[(co * g.c + ci) * kk..(co * g.c + ci + 1) * kk];
            for oi in 0..g.oh {
                let gr = &gy[co * p + oi * g.ow..co * p + (oi + 1) * g.ow];
                for ki in 0..g.kh {
                    let row = &plane[(oi + ki * d) * wp..];
                    for kj in 0..g.kw {
                        acc[ki * g.kw + kj] += dot(gr, &row[kj * d..kj * d + g.ow]);
                    }
                }
            }
        }
    }
}

/// Forward through per-tap GEMMs; `out` is `cout x oh x ow`.
fn shifted_forward<T: Float>(g: &ConvGeom, xpad: &[T], w: &[T], cout: usize, out: &mut [T]) {
    let (kk, n, wp, pp) = (g.kh * g.kw, g.wide_positions(), g.padded_w(), g.padded_plane());
    let mut wide = vec![T::zero(); cout * n];
    for t in 0..kk {
        let beta = if t == 0 { T::zero() } else { T::one() };
        let b = &xpad[g.tap_offset(t)..];
        T::gemm(cout, g.c, n, T::one(), &w[t..], (g.c * kk, kk), b, (pp, 1), beta, &mut wide, (n, 1));
    }
    for (o, wr) in out.chunks_exact_mut(g.ow).zip(wide.chunks_exact(wp)) {
        o.copy_from_slice(&wr[..g.ow]);
    }
}

/// `gy` widened to padded row width with zero columns.
fn widen<T: Float>(g: &ConvGeom, gy: &[T], cout: usize) -> Vec<T> {
    let wp = g.padded_w();
    let mut wide = vec![T::zero(); cout * g.wide_positions()];
    for (dst, src) in wide.chunks_exact_mut(wp).zip(gy.chunks_exact(g.ow)).take(cout * g.oh) {
        dst[..g.ow].copy_from_slice(src);
    }
    wide
}

fn shifted_backward_weight<T: Float>(g: &ConvGeom, xpad: &[T], gwide: &[T], cout: usize, dw: &mut [T]) {
    let (kk, n, pp) = (g.kh * g.kw, g.wide_positions(), g.padded_plane());
    for t in 0..kk {
        let b = &xpad[g.tap_offset(t)..];
        T::gemm(cout, n, g.c, T::one(), gwide, (n, 1), b, (1, pp), T::one(), &mut dw[t..], (g.c * kk, kk));
    }
}

fn shifted_backward_input<T: Float>(g: &ConvGeom, w: &[T], gwide: &[T], cout: usize, dx: &mut [T]) {
    let (kk, n, wp, pp) = (g.kh * g.kw, g.wide_positions(), g.padded_w(), g.padded_plane());
    let mut dpad = vec![T::zero(); g.padded_len()];
    for t in 0..kk {
        let off = g.tap_offset(t);
        T::gemm(g.c, cout, n, T::one(), &w[t..], (kk, g.c * kk), gwide, (n, 1), T::one(), &mut dpad[off..], (pp, 1));
    }
    for c in 0..g.c {
        for i in 0..g.h {
            let src = &dpad[c * pp + (i + g.pad) * wp + g.pad..][..g.w];
            for (a, &b) in dx[(c * g.h + i) * g.w..(c * g.h + i + 1) * g.w].iter_mut().zip(src) {
                *a += b;
            }
        }
    }
}

/// Unfolds `x` (`c*h*w`) into `cols` (`c*kh*kw` rows by `oh*ow` columns).
pub(crate) fn im2col<T: Float>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let out = &mut cols[row * p..(row + 1) * p];
                let di = (ki * g.dilation) as isize - g.pad as isize;
                let dj = (kj * g.dilation) as isize - g.pad as isize;
                for oi in 0..g.oh {
                    let ii = (oi * g.stride) as isize + di;
                    let dst = &mut out[oi * g.ow..(oi + 1) * g.ow];
                    if ii < 0 || ii >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    if g.stride == 1 {
                        for (oj, d) in dst.iter_mut().enumerate() {
                            let jj = oj as isize + dj;
                            *d = if jj < 0 || jj >= g.w as isize {
                                T::zero()
                            } else {
                                src[jj as usize]
                            };
                        }
                    } else {
                        for (oj, d) in dst.iter_mut().enumerate() {
                            let jj = (oj * g.stride) as isize + dj;
                            *d = if jj < 0 || jj >= g.w as isize {
                                T::zero()
                            } else {
                                src[jj as usize]
                            };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds `cols` back into `x`.
pub(crate) fn col2im<T: Float>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src_row = &cols[row * p..(row + 1) * p];
                let di = (ki * g.dilation) as isize - g.pad as isize;
                let dj = (kj * g.dilation) as isize - g.pad as isize;
                for oi in 0..g.oh {
                    let ii = (oi * g.stride) as isize + di;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    let src = &src_row[oi * g.ow..(oi + 1) * g.ow];
                    for (oj, &s) in src.iter().enumerate() {
                        let jj = (oj * g.stride) as isize + dj;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn check_bias<T: Float>(graph: &Graph<T>, b: Option<Var>, cout: usize, op: &'static str) -> Result<()> {
    if let Some(b) = b {
        let bs = graph.shape(b);
        if bs != [cout] {
            return Err(shape_err(op, bs, &[cout]));
        }
    }
    Ok(())
}

fn add_bias<T: Float>(out: &mut [T], bias: &[T], plane: usize) {
    for (chan, &bv) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        for v in chan {
            *v += bv;
        }
    }
}

impl<T: Float> Graph<T> {
    /// Cross-correlation of `x` (`N,Cin,H,W`) with `w` (`Cout,Cin,kh,kw`)
    /// plus optional bias (`Cout`), with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let [n, cin, h, wd] = self.value(x).dims4("conv2d")?;
        let [cout, wcin, kh, kw] = self.value(w).dims4("conv2d")?;
        if wcin != cin {
            return Err(shape_err("conv2d", self.shape(x), self.shape(w)));
        }
        check_bias(self, b, cout, "conv2d")?;
        let geom = ConvGeom::new(cin, h, wd, kh, kw, spec).ok_or_else(|| {
            GradError::Contract(format!(
                "conv2d: kernel {kh}x{kw} with {spec:?} does not fit input {h}x{wd}"
            ))
        })?;
        let (k, p) = (geom.rows(), geom.positions());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * cout * p];
        let padded = geom.padded_path(cout);
        let keep_cols = self.ng(w) && padded.is_none();
        let mut cols_all = if geom.is_pointwise() || !keep_cols {
            None
        } else {
            Some(vec![T::zero(); n * k * p])
        };
        let mut scratch = Vec::new();
        for bi in 0..n {
            let xin = &xv[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let oi = &mut out[bi * cout * p..(bi + 1) * cout * p];
            match padded {
                Some(Padded::Direct) => {
                    direct_forward(&geom, &pad_input(&geom, xin), wv, cout, oi);
                    continue;
                }
                Some(Padded::Shifted) => {
                    shifted_forward(&geom, &pad_input(&geom, xin), wv, cout, oi);
                    continue;
                }
                None => {}
            }
            let cols: &[T] = if geom.is_pointwise() {
                xin
            } else if let Some(all) = cols_all.as_mut() {
                let c = &mut all[bi * k * p..(bi + 1) * k * p];
                im2col(&geom, xin, c);
                c
            } else {
                scratch.resize(k * p, T::zero());
                im2col(&geom, xin, &mut scratch);
                &scratch
            };
            T::gemm(cout, k, p, T::one(), wv, (k, 1), cols, (p, 1), T::zero(), oi, (p, 1));
        }
        if let Some(b) = b {
            add_bias(&mut out, self.value(b).data(), p);
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let value = Tensor::new(&[n, cout, geom.oh, geom.ow], out)?;
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: cols_all,
            },
            ng,
            "conv2d",
        )
    }

    /// Transposed convolution of `x` (`N,Cin,H,W`) with `w` (`Cin,Cout,kh,kw`).
    /// Output size is `(H-1)*stride - 2*pad + kh + output_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let [n, cin, h, wd] = self.value(x).dims4("conv_transpose2d")?;
        let [wcin, cout, kh, kw] = self.value(w).dims4("conv_transpose2d")?;
        if wcin != cin {
            return Err(shape_err("conv_transpose2d", self.shape(x), self.shape(w)));
        }
        check_bias(self, b, cout, "conv_transpose2d")?;
        if stride == 0 || output_pad >= stride {
            return Err(GradError::Contract(format!(
                "conv_transpose2d: output_pad {output_pad} must be < stride {stride}"
            )));
        }
        let oh = ((h - 1) * stride + kh + output_pad).checked_sub(2 * pad);
        let ow = ((wd - 1) * stride + kw + output_pad).checked_sub(2 * pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(GradError::Contract("conv_transpose2d: padding too large".into()));
        };
        // Geometry of the forward convolution this operator is the adjoint of.
        let geom = ConvGeom::new(cout, oh, ow, kh, kw, ConvSpec::new(stride, pad))
            .filter(|g| g.oh == h && g.ow == wd)
            .ok_or_else(|| GradError::Contract("conv_transpose2d: inconsistent geometry".into()))?;
        let (k, pin) = (geom.rows(), h * wd);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * cout * oh * ow];
        let mut cols = vec![T::zero(); k * pin];
        for bi in 0..n {
            // cols = W^T x, W viewed as Cin x (Cout*kh*kw)
            T::gemm(
                k,
                cin,
                pin,
                T::one(),
                wv,
                (1, k),
                &xv[bi * cin * pin..(bi + 1) * cin * pin],
                (pin, 1),
                T::zero(),
                &mut cols,
                (pin, 1),
            );
            col2im(&geom, &cols, &mut out[bi * cout * oh * ow..(bi + 1) * cout * oh * ow]);
        }
        if let Some(b) = b {
            add_bias(&mut out, self.value(b).data(), oh * ow);
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let value = Tensor::new(&[n, cout, oh, ow], out)?;
        self.push(value, Op::ConvTranspose2d { x, w, b, geom }, ng, "conv_transpose2d")
    }
}

fn bias_backward<T: Float>(
    graph: &Graph<T>,
    b: Option<Var>,
    g: &[T],
    plane: usize,
    grads: &mut [Option<Tensor<T>>],
) {
    if let Some(b) = b {
        accumulate(graph, grads, b, |buf| {
            let c = buf.len();
            for (i, chan) in g.chunks(plane).enumerate() {
                let mut s = T::zero();
                for &v in chan {
                    s += v;
                }
                buf[i % c] += s;
            }
        });
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Float>(
    graph: &Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: &ConvGeom,
    cols: Option<&[T]>,
    g: &[T],
    grads: &mut [Option<Tensor<T>>],
) {
    let [n, cin, h, wd] = graph.value(x).dims4("conv2d").unwrap();
    let cout = graph.shape(w)[0];
    let (k, p) = (geom.rows(), geom.positions());
    let xv = graph.value(x).data();
    let wv = graph.value(w).data();
    bias_backward(graph, b, g, p, grads);
    if let Some(path) = geom.padded_path(cout) {
        let plane = cin * h * wd;
        let mut dw_acc = graph.ng(w).then(|| vec![T::zero(); wv.len()]);
        let mut dx_acc = graph.ng(x).then(|| vec![T::zero(); n * plane]);
        for bi in 0..n {
            let gy = &g[bi * cout * p..(bi + 1) * cout * p];
            let gwide = (path == Padded::Shifted).then(|| widen(geom, gy, cout));
            if let Some(dw) = dw_acc.as_mut() {
                let xpad = pad_input(geom, &xv[bi * plane..(bi + 1) * plane]);
                match &gwide {
                    Some(gw) => shifted_backward_weight(geom, &xpad, gw, cout, dw),
                    None => direct_backward_weight(geom, &xpad, gy, cout, dw),
                }
            }
            if let Some(dx) = dx_acc.as_mut() {
                let dxi = &mut dx[bi * plane..(bi + 1) * plane];
                match &gwide {
                    Some(gw) => shifted_backward_input(geom, wv, gw, cout, dxi),
                    None => direct_backward_input(geom, wv, gy, cout, dxi),
                }
            }
        }
        if let Some(dw) = dw_acc {
            accumulate(graph, grads, w, |buf| crate::graph::add_into(buf, &dw));
        }
        if let Some(dx) = dx_acc {
            accumulate(graph, grads, x, |buf| crate::graph::add_into(buf, &dx));
        }
        return;
    }
    if graph.ng(w) {
        accumulate(graph, grads, w, |dw| {
            for bi in 0..n {
                let gy = &g[bi * cout * p..(bi + 1) * cout * p];
                let c: &[T] = if geom.is_pointwise() {
                    &xv[bi * cin * h * wd..(bi + 1) * cin * h * wd]
                } else {
                    &cols.expect("cols kept when weight needs grad")[bi * k * p..(bi + 1) * k * p]
                };
                // dW += dY * cols^T
                T::gemm(cout, p, k, T::one(), gy, (p, 1), c, (1, p), T::one(), dw, (k, 1));
            }
        });
    }
    if graph.ng(x) {
        accumulate(graph, grads, x, |dx| {
            let mut dcols = vec![T::zero(); k * p];
            for bi in 0..n {
                let gy = &g[bi * cout * p..(bi + 1) * cout * p];
                let dxi = &mut dx[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                if geom.is_pointwise() {
                    T::gemm(cin, cout, p, T::one(), wv, (1, k), gy, (p, 1), T::one(), dxi, (p, 1));
                } else {
                    T::gemm(k, cout, p, T::one(), wv, (1, k), gy, (p, 1), T::zero(), &mut dcols, (p, 1));
                    col2im(geom, &dcols, dxi);
                }
            }
        });
    }
}

pub(crate) fn conv_transpose2d_backward<T: Float>(
    graph: &Graph<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: &ConvGeom,
    g: &[T],
    grads: &mut [Option<Tensor<T>>],
) {
    let [n, cin, h, wd] = graph.value(x).dims4("conv_transpose2d").unwrap();
    let cout = geom.c;
    let (k, pin) = (geom.rows(), h * wd);
    let plane_out = geom.h * geom.w;
    bias_backward(graph, b, g, plane_out, grads);
    if !graph.ng(w) && !graph.ng(x) {
        return;
    }
    let xv = graph.value(x).data();
    let wv = graph.value(w).data();
    let mut cols = vec![T::zero(); k * pin];
    let mut dw_acc = graph.ng(w).then(|| vec![T::zero(); cin * k]);
    let mut dx_acc = graph.ng(x).then(|| vec![T::zero(); n * cin * pin]);
    for bi in 0..n {
        im2col(geom, &g[bi * cout * plane_out..(bi + 1) * cout * plane_out], &mut cols);
        if let Some(dw) = dw_acc.as_mut() {
            // dW += x * cols^T
            let xi = &xv[bi * cin * pin..(bi + 1) * cin * pin];
            T::gemm(cin, pin, k, T::one(), xi, (pin, 1), &cols, (1, pin), T::one(), dw, (k, 1));
        }
        if let Some(dx) = dx_acc.as_mut() {
            let dxi = &mut dx[bi * cin * pin..(bi + 1) * cin * pin];
            T::gemm(cin, k, pin, T::one(), wv, (k, 1), &cols, (pin, 1), T::zero(), dxi, (pin, 1));
        }
    }
    if let Some(dw) = dw_acc {
        accumulate(graph, grads, w, |buf| crate::graph::add_into(buf, &dw));
    }
    if let Some(dx) = dx_acc {
        accumulate(graph, grads, x, |buf| crate::graph::add_into(buf, &dx));
    }
}
