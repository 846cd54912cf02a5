use crate::error::Result;
use crate::graph::{Graph, Op, Var};
use crate::tensor::{dot, sum, Float, Tensor};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

impl<T: Float> Graph<T> {
    /// Per-sample, per-channel normalization over the spatial axes, without
    /// affine parameters.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("instance_norm")?;
        let plane = h * w;
        let eps = T::lit(INSTANCE_NORM_EPS);
        let inv_plane = T::one() / T::from_usize(plane).unwrap();
        let xv = self.value(x).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        for (src, dst) in xv.chunks(plane).zip(xhat.chunks_mut(plane)) {
            let mean = sum(src) * inv_plane;
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v - mean;
            }
            let var = dot(dst, dst) * inv_plane;
            let is = T::one() / (var + eps).sqrt();
            for d in dst.iter_mut() {
                *d *= is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(&[n, c, h, w], xhat.clone())?;
        let ng = self.ng(x);
        self.push(value, Op::InstanceNorm { x, xhat, inv_std }, ng, "instance_norm")
    }
}

pub(crate) fn instance_norm_backward<T: Float>(
    shape: &[usize],
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
) -> Vec<T> {
    let plane = shape[2] * shape[3];
    let inv_plane = T::one() / T::from_usize(plane).unwrap();
    let mut dx = vec![T::zero(); g.len()];
    for (((gs, xs), ds), &is) in g
        .chunks(plane)
        .zip(xhat.chunks(plane))
        .zip(dx.chunks_mut(plane))
        .zip(inv_std)
    {
        let mg = sum(gs) * inv_plane;
        let mgx = dot(gs, xs) * inv_plane;
        for ((d, &gi), &xi) in ds.iter_mut().zip(gs).zip(xs) {
            *d = is * (gi - mg - xi * mgx);
        }
    }
    dx
}
