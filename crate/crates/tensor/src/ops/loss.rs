use crate::element::Element;
use crate::error::{invalid, shape_err, Result};
use crate::tape::{Backward, BackwardCx, Tape, Var};
use crate::tensor::Tensor;

struct CrossEntropyBackward<E> {
    probs: Vec<E>,
    labels: Vec<usize>,
    classes: usize,
}

impl<E: Element> Backward<E> for CrossEntropyBackward<E> {
    fn backward(&self, cx: &BackwardCx<'_, E>) -> Result<Vec<Option<Tensor<E>>>> {
        let rows = self.labels.len();
        let scale = cx.grad.item() / E::from_usize(rows).expect("rows");
        let mut d = self.probs.clone();
        for (r, &l) in self.labels.iter().enumerate() {
            d[r * self.classes + l] -= E::one();
        }
        d.iter_mut().for_each(|v| *v *= scale);
        Ok(vec![Some(Tensor::from_parts(cx.inputs[0].shape().to_vec(), d))])
    }
}

struct PairwiseBackward;

impl<E: Element> Backward<E> for PairwiseBackward {
    fn backward(&self, cx: &BackwardCx<'_, E>) -> Result<Vec<Option<Tensor<E>>>> {
        let s = cx.inputs[0].shape();
        let (p, n, d) = (s[0], s[1], s[2]);
        let (x, dist, g) = (cx.inputs[0].data(), cx.output.data(), cx.grad.data());
        let mut dx = vec![E::zero(); x.len()];
        for part in 0..p {
            for i in 0..n {
                for j in 0..n {
                    let k = (part * n + i) * n + j;
                    if i == j || dist[k] <= E::zero() {
                        continue;
                    }
                    let c = g[k] / dist[k];
                    let (xi, xj) = ((part * n + i) * d, (part * n + j) * d);
                    for t in 0..d {
                        let diff = c * (x[xi + t] - x[xj + t]);
                        dx[xi + t] += diff;
                        dx[xj + t] -= diff;
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(s.to_vec(), dx))])
    }
}

impl<E: Element> Tape<E> {
    /// Mean softmax cross-entropy of `logits [R, K]` against `labels` (length R).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(&[logits])?;
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return shape_err("cross_entropy", format!("logits {:?} with {} labels", s, labels.len()));
        }
        let (rows, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return invalid("cross_entropy", format!("label {} out of range for {} classes", bad, k));
        }
        let xd = self.value(logits).data();
        let mut probs = vec![E::zero(); rows * k];
        let mut total = E::zero();
        for r in 0..rows {
            let row = &xd[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(E::neg_infinity(), E::max);
            let mut z = E::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                probs[r * k + j] = e;
                z += e;
            }
            probs[r * k..(r + 1) * k].iter_mut().for_each(|p| *p /= z);
            total += m + z.ln() - row[labels[r]];
        }
        let value = Tensor::scalar(total / E::from_usize(rows).expect("rows"));
        Ok(self.record(value, &[logits], CrossEntropyBackward { probs, labels: labels.to_vec(), classes: k }))
    }

    /// Euclidean distances within each group: `x [P, N, D] -> [P, N, N]`.
    /// The gradient of a zero distance is taken as zero.
    pub fn pairwise_distance(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return shape_err("pairwise_distance", format!("expected [P, N, D], got {:?}", s));
        }
        let (p, n, d) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let mut out = vec![E::zero(); p * n * n];
        for part in 0..p {
            for i in 0..n {
                for j in (i + 1)..n {
                    let (xi, xj) = ((part * n + i) * d, (part * n + j) * d);
                    let sq: E = (0..d).map(|t| (xd[xi + t] - xd[xj + t]) * (xd[xi + t] - xd[xj + t])).sum();
                    let dist = sq.sqrt();
                    out[(part * n + i) * n + j] = dist;
                    out[(part * n + j) * n + i] = dist;
                }
            }
        }
        let value = Tensor::from_parts(vec![p, n, n], out);
        Ok(self.record(value, &[x], PairwiseBackward))
    }
}
