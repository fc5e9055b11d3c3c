use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tape::{Backward, BackwardCx, Tape, Var};
use crate::tensor::Tensor;

/// `(outer, len, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis { op, axis, rank: shape.len() });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn removed(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

struct SumAllBackward;

impl<E: Element> Backward<E> for SumAllBackward {
    fn backward(&self, cx: &BackwardCx<'_, E>) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(vec![Some(Tensor::full(cx.inputs[0].shape().to_vec(), cx.grad.item()))])
    }
}

struct AxisBackward {
    axis: usize,
    /// `Some` for max (argmax per output slot), `None` for mean with `scale`.
    argmax: Option<Vec<usize>>,
    scale: f64,
}

impl<E: Element> Backward<E> for AxisBackward {
    fn backward(&self, cx: &BackwardCx<'_, E>) -> Result<Vec<Option<Tensor<E>>>> {
        let shape = cx.inputs[0].shape();
        let (outer, len, inner) = split_axis(shape, self.axis, "reduce")?;
        let g = cx.grad.data();
        let mut dx = vec![E::zero(); cx.inputs[0].numel()];
        match &self.argmax {
            Some(argmax) => {
                for o in 0..outer {
                    for i in 0..inner {
                        let slot = o * inner + i;
                        dx[(o * len + argmax[slot]) * inner + i] = g[slot];
                    }
                }
            }
            None => {
                let s = E::from_f64_lossy(self.scale);
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut dx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d = *gv * s;
                        }
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(shape.to_vec(), dx))])
    }
}

struct SoftmaxBackward {
    axis: usize,
}

impl<E: Element> Backward<E> for SoftmaxBackward {
    fn backward(&self, cx: &BackwardCx<'_, E>) -> Result<Vec<Option<Tensor<E>>>> {
        let shape = cx.output.shape();
        let (outer, len, inner) = split_axis(shape, self.axis, "softmax")?;
        let (y, g) = (cx.output.data(), cx.grad.data());
        let mut dx = vec![E::zero(); y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let dot: E = (0..len).map(|l| y[at(l)] * g[at(l)]).sum();
                for l in 0..len {
                    dx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(shape.to_vec(), dx))])
    }
}

impl<E: Element> Tape<E> {
    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let value = Tensor::scalar(self.value(x).sum());
        Ok(self.record(value, &[x], SumAllBackward))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean along `axis`; the axis is removed from the output shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(&[x])?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis, "mean_axis")?;
        let xd = self.value(x).data();
        let mut out = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xd[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += *s;
                }
            }
        }
        let inv = E::one() / E::from_usize(len.max(1)).expect("len");
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::from_parts(removed(&shape, axis), out);
        Ok(self.record(value, &[x], AxisBackward { axis, argmax: None, scale: 1.0 / len.max(1) as f64 }))
    }

    /// Sum along `axis`; the axis is removed from the output shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len =
            *self.shape(x).get(axis).ok_or(TensorError::Axis { op: "sum_axis", axis, rank: self.shape(x).len() })?;
        let m = self.mean_axis(x, axis)?;
        self.scale(m, len as f64)
    }

    /// Maximum along `axis` together with the index that produced it. On ties
    /// the first maximal index wins and receives the whole gradient.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        self.check(&[x])?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis, "max_axis")?;
        if len == 0 {
            return Err(TensorError::Invalid { op: "max_axis", detail: "empty axis".into() });
        }
        let xd = self.value(x).data();
        let mut out = vec![E::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            out[o * inner..(o + 1) * inner].copy_from_slice(&xd[o * len * inner..(o * len + 1) * inner]);
            for l in 1..len {
                let src = &xd[(o * len + l) * inner..(o * len + l + 1) * inner];
                for i in 0..inner {
                    if src[i] > out[o * inner + i] {
                        out[o * inner + i] = src[i];
                        argmax[o * inner + i] = l;
                    }
                }
            }
        }
        let value = Tensor::from_parts(removed(&shape, axis), out);
        let var = self.record(value, &[x], AxisBackward { axis, argmax: Some(argmax.clone()), scale: 1.0 });
        Ok((var, argmax))
    }

    /// Numerically stabilized softmax along `axis`. Entries equal to `-inf`
    /// receive probability exactly zero.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(&[x])?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis, "softmax")?;
        let xd = self.value(x).data();
        let mut out = vec![E::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| xd[at(l)]).fold(E::neg_infinity(), |a, b| a.max(b));
                let mut total = E::zero();
                for l in 0..len {
                    let e = (xd[at(l)] - m).exp();
                    out[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[at(l)] /= total;
                }
            }
        }
        let value = Tensor::from_parts(shape, out);
        Ok(self.record(value, &[x], SoftmaxBackward { axis }))
    }
}
