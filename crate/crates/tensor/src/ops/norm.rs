use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};
use crate::tape::{Backward, BackwardCx, Tape, Var};
use crate::tensor::Tensor;
use crate::Mode;

/// Per-channel batch statistics produced by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats<E> {
    pub mean: Vec<E>,
    /// Unbiased variance, as used for running-statistic updates.
    pub var: Vec<E>,
}

impl<E: Element> BatchStats<E> {
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&self, mean: &mut [E], var: &mut [E], momentum: f64) {
        let m = E::from_f64_lossy(momentum);
        let keep = E::one() - m;
        for (r, b) in mean.iter_mut().zip(&self.mean) {
            *r = keep * *r + m * *b;
        }
        for (r, b) in var.iter_mut().zip(&self.var) {
            *r = keep * *r + m * *b;
        }
    }
}

struct BatchNormBackward<E> {
    mean: Vec<E>,
    inv_std: Vec<E>,
    train: bool,
}

fn bn_dims(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let s = shape[2..].iter().product();
    (n, c, s)
}

impl<E: Element> Backward<E> for BatchNormBackward<E> {
    fn backward(&self, cx: &BackwardCx<'_, E>) -> Result<Vec<Option<Tensor<E>>>> {
        let (x, gamma) = (cx.inputs[0].data(), cx.inputs[1].data());
        let g = cx.grad.data();
        let (n, c, s) = bn_dims(cx.inputs[0].shape());
        let m = E::from_usize(n * s).expect("count");
        let mut sum_g = vec![E::zero(); c];
        let mut sum_gx = vec![E::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                let (mu, inv) = (self.mean[ch], self.inv_std[ch]);
                let mut sg = E::zero();
                let mut sgx = E::zero();
                for i in base..base + s {
                    sg += g[i];
                    sgx += g[i] * (x[i] - mu) * inv;
                }
                sum_g[ch] += sg;
                sum_gx[ch] += sgx;
            }
        }
        let dx = cx.needs[0].then(|| {
            let mut dx = vec![E::zero(); x.len()];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * s;
                    let (mu, inv) = (self.mean[ch], self.inv_std[ch]);
                    let k = gamma[ch] * inv;
                    if self.train {
                        let mg = sum_g[ch] / m;
                        let mgx = sum_gx[ch] / m;
                        for i in base..base + s {
                            let xhat = (x[i] - mu) * inv;
                            dx[i] = k * (g[i] - mg - xhat * mgx);
                        }
                    } else {
                        for i in base..base + s {
                            dx[i] = k * g[i];
                        }
                    }
                }
            }
            Tensor::from_parts(cx.inputs[0].shape().to_vec(), dx)
        });
        Ok(vec![
            dx,
            cx.needs[1].then(|| Tensor::from_parts(vec![c], sum_gx)),
            cx.needs[2].then(|| Tensor::from_parts(vec![c], sum_g)),
        ])
    }
}

struct LayerNormBackward<E> {
    inv_std: Vec<E>,
    mean: Vec<E>,
}

impl<E: Element> Backward<E> for LayerNormBackward<E> {
    fn backward(&self, cx: &BackwardCx<'_, E>) -> Result<Vec<Option<Tensor<E>>>> {
        let (x, gamma) = (cx.inputs[0].data(), cx.inputs[1].data());
        let g = cx.grad.data();
        let d = gamma.len();
        let rows = x.len() / d.max(1);
        let de = E::from_usize(d).expect("dim");
        let mut dx = vec![E::zero(); x.len()];
        let mut dgamma = vec![E::zero(); d];
        let mut dbeta = vec![E::zero(); d];
        for r in 0..rows {
            let (mu, inv) = (self.mean[r], self.inv_std[r]);
            let xr = &x[r * d..(r + 1) * d];
            let gr = &g[r * d..(r + 1) * d];
            let mut s1 = E::zero();
            let mut s2 = E::zero();
            for j in 0..d {
                let xhat = (xr[j] - mu) * inv;
                let gh = gr[j] * gamma[j];
                s1 += gh;
                s2 += gh * xhat;
                dgamma[j] += gr[j] * xhat;
                dbeta[j] += gr[j];
            }
            for j in 0..d {
                let xhat = (xr[j] - mu) * inv;
                dx[r * d + j] = inv * (gr[j] * gamma[j] - s1 / de - xhat * s2 / de);
            }
        }
        Ok(vec![
            cx.needs[0].then(|| Tensor::from_parts(cx.inputs[0].shape().to_vec(), dx)),
            cx.needs[1].then(|| Tensor::from_parts(vec![d], dgamma)),
            cx.needs[2].then(|| Tensor::from_parts(vec![d], dbeta)),
        ])
    }
}

impl<E: Element> Tape<E> {
    /// Batch normalization over every axis except axis 1 (channels); covers
    /// `[N, C]`, `[N, C, H, W]` and `[N, C, T, H, W]` inputs alike.
    ///
    /// Train mode normalizes with batch statistics and returns them so the
    /// caller can update running statistics; eval mode uses `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        running: Option<(&[E], &[E])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<E>>)> {
        self.check(&[x, gamma, beta])?;
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return shape_err("batch_norm", format!("need at least [N, C], got {:?}", shape));
        }
        let (n, c, s) = bn_dims(&shape);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("batch_norm", format!("affine parameters must have shape [{}]", c));
        }
        let eps = E::from_f64_lossy(eps);
        let xd = self.value(x).data();
        let (mean, var_biased, stats) = match mode {
            Mode::Train => {
                let count = n * s;
                if count == 0 {
                    return shape_err("batch_norm", "empty batch");
                }
                let mut mean = vec![E::zero(); c];
                let mut var = vec![E::zero(); c];
                for b in 0..n {
                    for (ch, m) in mean.iter_mut().enumerate() {
                        let base = (b * c + ch) * s;
                        *m += xd[base..base + s].iter().copied().sum::<E>();
                    }
                }
                let ce = E::from_usize(count).expect("count");
                mean.iter_mut().for_each(|m| *m /= ce);
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * s;
                        let mu = mean[ch];
                        var[ch] += xd[base..base + s].iter().map(|v| (*v - mu) * (*v - mu)).sum::<E>();
                    }
                }
                let unbiased_div = E::from_usize(count.saturating_sub(1).max(1)).expect("count");
                let unbiased: Vec<E> = var.iter().map(|v| *v / unbiased_div).collect();
                var.iter_mut().for_each(|v| *v /= ce);
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
            Mode::Eval => {
                let (rm, rv) = running.ok_or(TensorError::MissingRunningStats)?;
                if rm.len() != c || rv.len() != c {
                    return shape_err("batch_norm", "running statistics length mismatch");
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
        };
        let inv_std: Vec<E> = var_biased.iter().map(|v| E::one() / (*v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![E::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                let k = gd[ch] * inv_std[ch];
                let off = bd[ch] - mean[ch] * k;
                for i in base..base + s {
                    out[i] = xd[i] * k + off;
                }
            }
        }
        let value = Tensor::from_parts(shape, out);
        let var =
            self.record(value, &[x, gamma, beta], BatchNormBackward { mean, inv_std, train: mode == Mode::Train });
        Ok((var, stats))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check(&[x, gamma, beta])?;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::Shape { op: "layer_norm", detail: "scalar input".into() })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err("layer_norm", format!("affine parameters must have shape [{}]", d));
        }
        let eps = E::from_f64_lossy(eps);
        let de = E::from_usize(d).expect("dim");
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xd.len() / d.max(1);
        let mut out = vec![E::zero(); xd.len()];
        let mut means = Vec::with_capacity(rows);
        let mut invs = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = &xd[r * d..(r + 1) * d];
            let mu = xr.iter().copied().sum::<E>() / de;
            let var = xr.iter().map(|v| (*v - mu) * (*v - mu)).sum::<E>() / de;
            let inv = E::one() / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (xr[j] - mu) * inv * gd[j] + bd[j];
            }
            means.push(mu);
            invs.push(inv);
        }
        let value = Tensor::from_parts(shape, out);
        Ok(self.record(value, &[x, gamma, beta], LayerNormBackward { inv_std: invs, mean: means }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_without_running_stats_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3]));
        let g = tape.constant(Tensor::ones(vec![3]));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let err = tape.batch_norm(x, g, b, Mode::Eval, None, 1e-5).unwrap_err();
        assert!(matches!(err, TensorError::MissingRunningStats));
    }

    #[test]
    fn running_update_uses_momentum() {
        let stats = BatchStats { mean: vec![1.0f64], var: vec![3.0] };
        let (mut m, mut v) = (vec![0.0], vec![1.0]);
        stats.update_running(&mut m, &mut v, 0.1);
        assert!((m[0] - 0.1).abs() < 1e-15);
        assert!((v[0] - 1.2).abs() < 1e-15);
    }
}
