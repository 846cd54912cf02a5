use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use crate::conv::{self, ConvGeom};
use crate::error::{GradError, Result};
use crate::tensor::{Float, Tensor};
use crate::{norm, shape};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    InstanceNorm {
        x: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    LeakyRelu {
        x: Var,
        alpha: T,
    },
    Tanh {
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Shift {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Mean {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Abs {
        x: Var,
    },
    Square {
        x: Var,
    },
    Pad2d {
        x: Var,
        top: usize,
        left: usize,
    },
    Crop2d {
        x: Var,
        top: usize,
        left: usize,
    },
    /// Scalar output whose derivative w.r.t. `x` was computed during the
    /// forward pass (fused losses).
    CachedGrad {
        x: Var,
        grad: Vec<T>,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

/// Tape of operations recorded during a forward pass.
///
/// Nodes are appended in evaluation order, so a reverse sweep over the
/// tape visits every node after all of its consumers.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    kinks: Option<DefaultHasher>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kinks: None,
        }
    }

    /// Graph that fingerprints the branch taken at every non-smooth point
    /// (ReLU sign, |x| sign, sort orders, masks). Used by gradient checks to
    /// discard finite differences that straddle a kink.
    pub fn with_kink_tracking() -> Self {
        Self {
            nodes: Vec::new(),
            kinks: Some(DefaultHasher::new()),
        }
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks.as_ref().map(|h| h.finish())
    }

    pub(crate) fn tracking_kinks(&self) -> bool {
        self.kinks.is_some()
    }

    /// Feeds branch decisions into the kink signature (no-op unless kink
    /// tracking is on).
    pub fn note_kinks(&mut self, bits: impl Iterator<Item = bool>) {
        if let Some(h) = self.kinks.as_mut() {
            let mut word = 0u64;
            let mut n = 0;
            for b in bits {
                word = (word << 1) | b as u64;
                n += 1;
                if n == 64 {
                    h.write_u64(word);
                    word = 0;
                    n = 0;
                }
            }
            h.write_u64(word);
            h.write_usize(n);
        }
    }

    pub fn note_kink_words(&mut self, words: impl Iterator<Item = usize>) {
        if let Some(h) = self.kinks.as_mut() {
            for w in words {
                h.write_usize(w);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true, "param")
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        needs_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(GradError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub(crate) fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_val = &self.nodes[root.0].value;
        if root_val.numel() != 1 {
            return Err(GradError::Contract(format!(
                "backward requires a scalar root, got shape {:?}",
                root_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_val.shape(), T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &gout, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let g = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => conv::conv2d_backward(self, *x, *w, *b, geom, cols.as_deref(), g, grads),
            Op::ConvTranspose2d { x, w, b, geom } => {
                conv::conv_transpose2d_backward(self, *x, *w, *b, geom, g, grads)
            }
            Op::InstanceNorm { x, xhat, inv_std } => {
                if self.ng(*x) {
                    let dx = norm::instance_norm_backward(y.shape(), xhat, inv_std, g);
                    accumulate(self, grads, *x, |buf| {
                        for (d, s) in buf.iter_mut().zip(&dx) {
                            *d += *s;
                        }
                    });
                }
            }
            Op::LeakyRelu { x, alpha } => {
                let xv = self.nodes[x.0].value.data();
                let alpha = *alpha;
                accumulate(self, grads, *x, |buf| {
                    for ((d, &xi), &gi) in buf.iter_mut().zip(xv).zip(g) {
                        *d += if xi > T::zero() { gi } else { alpha * gi };
                    }
                });
            }
            Op::Tanh { x } => {
                let yv = y.data();
                accumulate(self, grads, *x, |buf| {
                    for ((d, &yi), &gi) in buf.iter_mut().zip(yv).zip(g) {
                        *d += gi * (T::one() - yi * yi);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let dx = shape::softmax_backward(y, *axis, g);
                accumulate(self, grads, *x, |buf| add_into(buf, &dx));
            }
            Op::Dropout { x, mask } => {
                accumulate(self, grads, *x, |buf| {
                    for ((d, &m), &gi) in buf.iter_mut().zip(mask).zip(g) {
                        *d += m * gi;
                    }
                });
            }
            Op::PixelShuffle { x, r } => {
                let dx = shape::pixel_unshuffle(y.shape(), *r, g);
                accumulate(self, grads, *x, |buf| add_into(buf, &dx));
            }
            Op::Add { a, b } => {
                accumulate(self, grads, *a, |buf| add_into(buf, g));
                accumulate(self, grads, *b, |buf| add_into(buf, g));
            }
            Op::Sub { a, b } => {
                accumulate(self, grads, *a, |buf| add_into(buf, g));
                accumulate(self, grads, *b, |buf| {
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d -= gi;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                accumulate(self, grads, *a, |buf| {
                    for ((d, &bi), &gi) in buf.iter_mut().zip(bv).zip(g) {
                        *d += bi * gi;
                    }
                });
                accumulate(self, grads, *b, |buf| {
                    for ((d, &ai), &gi) in buf.iter_mut().zip(av).zip(g) {
                        *d += ai * gi;
                    }
                });
            }
            Op::Scale { x, s } => {
                let s = *s;
                accumulate(self, grads, *x, |buf| {
                    for (d, &gi) in buf.iter_mut().zip(g) {
                        *d += s * gi;
                    }
                });
            }
            Op::Shift { x } => accumulate(self, grads, *x, |buf| add_into(buf, g)),
            Op::Concat { parts, axis } => {
                let shapes: Vec<Vec<usize>> = parts
                    .iter()
                    .map(|p| self.nodes[p.0].value.shape().to_vec())
                    .collect();
                let pieces = shape::split_axis(y.shape(), &shapes, *axis, g);
                for (p, piece) in parts.iter().zip(pieces) {
                    accumulate(self, grads, *p, |buf| add_into(buf, &piece));
                }
            }
            Op::Mean { x } => {
                let n = T::from_usize(self.nodes[x.0].value.numel()).unwrap();
                let gi = g[0] / n;
                accumulate(self, grads, *x, |buf| {
                    for d in buf.iter_mut() {
                        *d += gi;
                    }
                });
            }
            Op::Sum { x } => {
                let gi = g[0];
                accumulate(self, grads, *x, |buf| {
                    for d in buf.iter_mut() {
                        *d += gi;
                    }
                });
            }
            Op::Abs { x } => {
                let xv = self.nodes[x.0].value.data();
                accumulate(self, grads, *x, |buf| {
                    for ((d, &xi), &gi) in buf.iter_mut().zip(xv).zip(g) {
                        if xi > T::zero() {
                            *d += gi;
                        } else if xi < T::zero() {
                            *d -= gi;
                        }
                    }
                });
            }
            Op::Square { x } => {
                let xv = self.nodes[x.0].value.data();
                let two = T::lit(2.0);
                accumulate(self, grads, *x, |buf| {
                    for ((d, &xi), &gi) in buf.iter_mut().zip(xv).zip(g) {
                        *d += two * xi * gi;
                    }
                });
            }
            Op::Pad2d { x, top, left } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (top, left) = (*top, *left);
                accumulate(self, grads, *x, |buf| {
                    shape::crop_accumulate(y.shape(), g, &xs, top, left, buf)
                });
            }
            Op::Crop2d { x, top, left } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (top, left) = (*top, *left);
                accumulate(self, grads, *x, |buf| {
                    shape::pad_accumulate(y.shape(), g, &xs, top, left, buf)
                });
            }
            Op::CachedGrad { x, grad } => {
                let s = g[0];
                accumulate(self, grads, *x, |buf| {
                    for (d, &gi) in buf.iter_mut().zip(grad) {
                        *d += s * gi;
                    }
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn add_into<T: Float>(buf: &mut [T], src: &[T]) {
    for (d, &s) in buf.iter_mut().zip(src) {
        *d += s;
    }
}

/// Runs `f` on the gradient buffer of `v`, allocating it on first use.
/// No-op when `v` does not require a gradient.
pub(crate) fn accumulate<T: Float>(
    graph: &Graph<T>,
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    f: impl FnOnce(&mut [T]),
) {
    if !graph.ng(v) {
        return;
    }
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(graph.nodes[v.0].value.shape()));
    }
    f(slot.as_mut().unwrap().data_mut());
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the root w.r.t. `v`; `None` if `v` does not influence the
    /// root or does not require a gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
