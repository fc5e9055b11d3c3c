use std::sync::Arc;

use crate::element::Element;
use crate::error::{invalid, shape_err, Result, TensorError};
use crate::tape::{Backward, BackwardCx, Tape, Var};
use crate::tensor::{contiguous_strides, Tensor};

/// Marks an output slot of [`Tape::gather`] that is filled with zero.
pub const GATHER_ZERO: u32 = u32::MAX;

struct ReshapeBackward;

impl<E: Element> Backward<E> for ReshapeBackward {
    fn backward(&self, cx: &BackwardCx<'_, E>) -> Result<Vec<Option<Tensor<E>>>> {
        Ok(vec![Some(cx.grad.reshape(cx.inputs[0].shape().to_vec())?)])
    }
}

struct GatherBackward {
    index: Arc<Vec<u32>>,
}

impl<E: Element> Backward<E> for GatherBackward {
    fn backward(&self, cx: &BackwardCx<'_, E>) -> Result<Vec<Option<Tensor<E>>>> {
        let mut dx = vec![E::zero(); cx.inputs[0].numel()];
        for (g, &i) in cx.grad.data().iter().zip(self.index.iter()) {
            if i != GATHER_ZERO {
                dx[i as usize] += *g;
            }
        }
        Ok(vec![Some(Tensor::from_parts(cx.inputs[0].shape().to_vec(), dx))])
    }
}

struct ConcatBackward {
    axis: usize,
    sizes: Vec<usize>,
}

impl<E: Element> Backward<E> for ConcatBackward {
    fn backward(&self, cx: &BackwardCx<'_, E>) -> Result<Vec<Option<Tensor<E>>>> {
        let shape = cx.output.shape();
        let outer: usize = shape[..self.axis].iter().product();
        let inner: usize = shape[self.axis + 1..].iter().product();
        let total = shape[self.axis];
        let g = cx.grad.data();
        let mut start = 0;
        let mut out = Vec::with_capacity(self.sizes.len());
        for (k, &len) in self.sizes.iter().enumerate() {
            if !cx.needs[k] {
                out.push(None);
                start += len;
                continue;
            }
            let mut d = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * total + start) * inner;
                d.extend_from_slice(&g[base..base + len * inner]);
            }
            out.push(Some(Tensor::from_parts(cx.inputs[k].shape().to_vec(), d)));
            start += len;
        }
        Ok(out)
    }
}

/// Source offsets realizing `permute(shape, axes)`.
pub fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<u32> {
    let src_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let numel: usize = shape.iter().product();
    let mut index = Vec::with_capacity(numel);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..numel {
        index.push(off as u32);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    index
}

impl<E: Element> Tape<E> {
    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.check(&[x])?;
        let value = self.value(x).reshape(shape)?;
        Ok(self.record(value, &[x], ReshapeBackward))
    }

    /// Output element `i` is `x.flat[index[i]]`, or zero for [`GATHER_ZERO`].
    /// The backward pass scatter-adds, so repeated indices are allowed.
    pub fn gather(&mut self, x: Var, out_shape: impl Into<Vec<usize>>, index: Arc<Vec<u32>>) -> Result<Var> {
        self.check(&[x])?;
        let out_shape = out_shape.into();
        if out_shape.iter().product::<usize>() != index.len() {
            return shape_err("gather", format!("index length {} for shape {:?}", index.len(), out_shape));
        }
        let xd = self.value(x).data();
        let n = xd.len();
        let mut out = Vec::with_capacity(index.len());
        for &i in index.iter() {
            if i == GATHER_ZERO {
                out.push(E::zero());
            } else if (i as usize) < n {
                out.push(xd[i as usize]);
            } else {
                return invalid("gather", format!("index {} out of bounds for {} elements", i, n));
            }
        }
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.record(value, &[x], GatherBackward { index }))
    }

    /// Reorders axes: output axis `k` is input axis `axes[k]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() {
            return shape_err("permute", format!("axes {:?} for rank {}", axes, shape.len()));
        }
        for &a in axes {
            if a >= shape.len() || seen[a] {
                return Err(TensorError::Axis { op: "permute", axis: a, rank: shape.len() });
            }
            seen[a] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let index = permute_index(&shape, axes);
        self.gather(x, out_shape, Arc::new(index))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis { op: "narrow", axis, rank: shape.len() });
        }
        if start + len > shape[axis] {
            return shape_err("narrow", format!("[{}, {}) exceeds extent {}", start, start + len, shape[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            index.extend((base..base + len * inner).map(|i| i as u32));
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(x, out_shape, Arc::new(index))
    }

    /// Concatenation along an existing axis.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.check(xs)?;
        let Some(&first) = xs.first() else {
            return invalid("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis { op: "concat", axis, rank: base.len() });
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return shape_err("concat", format!("{:?} vs {:?}", s, base));
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &len) in xs.iter().zip(&sizes) {
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_parts(shape, out);
        Ok(self.record(value, xs, ConcatBackward { axis, sizes }))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let mut expanded = Vec::with_capacity(xs.len());
        for &x in xs {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(x));
            expanded.push(self.reshape(x, s)?);
        }
        self.concat(&expanded, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_transposes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![2, 3], |i| i as f64));
        let y = tape.permute(x, &[1, 0]).unwrap();
        assert_eq!(tape.shape(y), &[3, 2]);
        assert_eq!(tape.value(y).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn narrow_and_concat_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![2, 5, 3], |i| i as f64));
        let a = tape.narrow(x, 1, 0, 2).unwrap();
        let b = tape.narrow(x, 1, 2, 3).unwrap();
        let y = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn gather_rejects_out_of_bounds() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![2]));
        assert!(tape.gather(x, vec![1], Arc::new(vec![5])).is_err());
    }
}
