//! Scalar training losses.

use crate::error::{shape_err, GradError, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{Float, Tensor};

impl<T: Float> Graph<T> {
    /// `mean((pred - target)^2)`.
    pub fn least_squares_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// `mean((pred - target)^2)` against a constant target value.
    pub fn least_squares_to(&mut self, pred: Var, target: T) -> Result<Var> {
        let d = self.add_scalar(pred, -target)?;
        let sq = self.square(d)?;
        self.mean(sq)
    }

    /// `mean(|a - b|)`.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let ad = self.abs(d)?;
        self.mean(ad)
    }

    /// Cross-entropy of `logits` (`N,C,H,W`) against per-cell `labels`,
    /// each cell weighted by `weights[label]`, averaged over the cells where
    /// `mask` is set. An empty mask yields 0.
    pub fn weighted_masked_ce(&mut self, logits: Var, labels: &[usize], weights: &[T], mask: &[bool]) -> Result<Var> {
        let [n, c, h, w] = self.value(logits).dims4("weighted_masked_ce")?;
        let cells = n * h * w;
        if labels.len() != cells || mask.len() != cells {
            return Err(shape_err("weighted_masked_ce", self.shape(logits), &[labels.len(), mask.len()]));
        }
        if weights.len() != c {
            return Err(shape_err("weighted_masked_ce", &[c], &[weights.len()]));
        }
        // Masks and labels may be derived from other values in the graph.
        self.note_kinks(mask.iter().copied());
        self.note_kink_words(labels.iter().copied());
        let plane = h * w;
        let lv = self.value(logits).data();
        let count = mask.iter().filter(|&&m| m).count();
        let mut grad = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        if count > 0 {
            let inv = T::one() / T::from_usize(count).unwrap();
            let mut probs = vec![T::zero(); c];
            for b in 0..n {
                for p in 0..plane {
                    let cell = b * plane + p;
                    if !mask[cell] {
                        continue;
                    }
                    let label = labels[cell];
                    if label >= c {
                        return Err(GradError::Contract(format!("label {label} out of range for {c} classes")));
                    }
                    let at = |k: usize| (b * c + k) * plane + p;
                    let mut mx = T::neg_infinity();
                    for k in 0..c {
                        mx = mx.max(lv[at(k)]);
                    }
                    let mut s = T::zero();
                    for (k, pk) in probs.iter_mut().enumerate() {
                        *pk = (lv[at(k)] - mx).exp();
                        s += *pk;
                    }
                    let wl = weights[label];
                    total += wl * (s.ln() - (lv[at(label)] - mx));
                    for (k, &pk) in probs.iter().enumerate() {
                        let onehot = if k == label { T::one() } else { T::zero() };
                        grad[at(k)] = wl * inv * (pk / s - onehot);
                    }
                }
            }
            total = total * inv;
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(total),
            Op::CachedGrad { x: logits, grad },
            ng,
            "weighted_masked_ce",
        )
    }

    /// Lovász-Softmax loss of class probabilities `probs` (`N,C,H,W`)
    /// against `labels`, averaged over the classes present in `labels`.
    /// All cells of the batch are pooled into one set.
    pub fn lovasz_softmax(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        self.lovasz_softmax_masked(probs, labels, None)
    }

    /// [`Graph::lovasz_softmax`] restricted to the cells where `mask` is
    /// true. An empty selection gives 0.
    pub fn lovasz_softmax_masked(&mut self, probs: Var, labels: &[usize], mask: Option<&[bool]>) -> Result<Var> {
        let [n, c, h, w] = self.value(probs).dims4("lovasz_softmax")?;
        let plane = h * w;
        let total_cells = n * plane;
        if labels.len() != total_cells || mask.is_some_and(|m| m.len() != total_cells) {
            return Err(shape_err("lovasz_softmax", self.shape(probs), &[labels.len()]));
        }
        let selected: Vec<usize> = match mask {
            Some(m) => (0..total_cells).filter(|&i| m[i]).collect(),
            None => (0..total_cells).collect(),
        };
        let cells = selected.len();
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(GradError::Contract(format!("label {bad} out of range for {c} classes")));
        }
        let pv = self.value(probs).data().to_vec();
        let at = |cell: usize, k: usize| {
            let (b, p) = (cell / plane, cell % plane);
            (b * c + k) * plane + p
        };
        let mut present = vec![false; c];
        for &cell in &selected {
            present[labels[cell]] = true;
        }
        let present: Vec<usize> = (0..c).filter(|&k| present[k]).collect();
        let mut grad = vec![T::zero(); pv.len()];
        let mut total = T::zero();
        let mut orders = Vec::new();
        let mut errors = vec![T::zero(); cells];
        for &k in &present {
            for (e, &cell) in errors.iter_mut().zip(&selected) {
                let fg = labels[cell] == k;
                let p = pv[at(cell, k)];
                *e = if fg { T::one() - p } else { p };
            }
            let mut order: Vec<usize> = (0..cells).collect();
            order.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap().then(a.cmp(&b)));
            let deltas = lovasz_grad(order.iter().map(|&i| labels[selected[i]] == k));
            for (&i, &d) in order.iter().zip(&deltas) {
                let cell = selected[i];
                total += errors[i] * d;
                let sign = if labels[cell] == k { -T::one() } else { T::one() };
                grad[at(cell, k)] = sign * d;
            }
            orders.extend(order.iter().map(|&i| selected[i]));
        }
        if !present.is_empty() {
            let inv = T::one() / T::from_usize(present.len()).unwrap();
            total = total * inv;
            for g in grad.iter_mut() {
                *g = *g * inv;
            }
        }
        self.note_kink_words(orders.into_iter());
        let ng = self.ng(probs);
        self.push(
            Tensor::scalar(total),
            Op::CachedGrad { x: probs, grad },
            ng,
            "lovasz_softmax",
        )
    }
}

/// Increments of the Jaccard loss along a sorted sequence of foreground
/// flags: entry `i` is `J(first i+1) - J(first i)`.
pub fn lovasz_grad<T: Float>(fg_sorted: impl Iterator<Item = bool> + Clone) -> Vec<T> {
    let gts = fg_sorted.clone().filter(|&f| f).count();
    let mut out = Vec::new();
    let mut cum_fg = 0usize;
    let mut cum_bg = 0usize;
    let mut prev = T::zero();
    for f in fg_sorted {
        if f {
            cum_fg += 1;
        } else {
            cum_bg += 1;
        }
        let inter = T::from_usize(gts - cum_fg).unwrap();
        let union = T::from_usize(gts + cum_bg).unwrap();
        let jac = T::one() - inter / union;
        out.push(jac - prev);
        prev = jac;
    }
    out
}
