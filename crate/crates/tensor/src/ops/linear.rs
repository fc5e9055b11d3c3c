use crate::element::{gemm, Element, MatLayout};
use crate::error::{shape_err, Result};
use crate::tape::{Backward, BackwardCx, Tape, Var};
use crate::tensor::Tensor;

struct LinearBackward {
    rows: usize,
    din: usize,
    dout: usize,
}

impl<E: Element> Backward<E> for LinearBackward {
    fn backward(&self, cx: &BackwardCx<'_, E>) -> Result<Vec<Option<Tensor<E>>>> {
        let (m, din, dout) = (self.rows, self.din, self.dout);
        let (x, w, g) = (cx.inputs[0].data(), cx.inputs[1].data(), cx.grad.data());
        let gl = MatLayout::row_major(m, dout);
        let xl = MatLayout::row_major(m, din);
        let wl = MatLayout::row_major(dout, din);
        let dx = cx.needs[0].then(|| {
            let mut dx = vec![E::zero(); m * din];
            gemm(E::one(), g, gl, w, wl, E::zero(), &mut dx, xl);
            Tensor::from_parts(cx.inputs[0].shape().to_vec(), dx)
        });
        let dw = cx.needs[1].then(|| {
            let mut dw = vec![E::zero(); dout * din];
            gemm(E::one(), g, gl.t(), x, xl, E::zero(), &mut dw, wl);
            Tensor::from_parts(vec![dout, din], dw)
        });
        let mut out = vec![dx, dw];
        if cx.inputs.len() == 3 {
            out.push(cx.needs[2].then(|| {
                let mut db = vec![E::zero(); dout];
                for r in 0..m {
                    for (d, v) in db.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                        *d += *v;
                    }
                }
                Tensor::from_parts(vec![dout], db)
            }));
        }
        Ok(out)
    }
}

struct MatmulBackward {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    transpose_b: bool,
}

impl MatmulBackward {
    fn b_layout(&self) -> MatLayout {
        if self.transpose_b {
            MatLayout::row_major(self.n, self.k).t()
        } else {
            MatLayout::row_major(self.k, self.n)
        }
    }
}

impl<E: Element> Backward<E> for MatmulBackward {
    fn backward(&self, cx: &BackwardCx<'_, E>) -> Result<Vec<Option<Tensor<E>>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let (a, b, g) = (cx.inputs[0].data(), cx.inputs[1].data(), cx.grad.data());
        let al = MatLayout::row_major(m, k);
        let bl = self.b_layout();
        let gl = MatLayout::row_major(m, n);
        let mut da = cx.needs[0].then(|| vec![E::zero(); a.len()]);
        let mut db = cx.needs[1].then(|| vec![E::zero(); b.len()]);
        for i in 0..self.batch {
            let gs = &g[i * m * n..];
            if let Some(da) = da.as_mut() {
                gemm(E::one(), gs, gl, &b[i * k * n..], bl.t(), E::zero(), &mut da[i * m * k..], al);
            }
            if let Some(db) = db.as_mut() {
                gemm(E::one(), &a[i * m * k..], al.t(), gs, gl, E::zero(), &mut db[i * k * n..], bl);
            }
        }
        Ok(vec![
            da.map(|d| Tensor::from_parts(cx.inputs[0].shape().to_vec(), d)),
            db.map(|d| Tensor::from_parts(cx.inputs[1].shape().to_vec(), d)),
        ])
    }
}

impl<E: Element> Tape<E> {
    /// Affine map on the trailing axis: `x [..., Din]`, `w [Dout, Din]`,
    /// optional `bias [Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let mut vars = vec![x, w];
        vars.extend(bias);
        self.check(&vars)?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let Some(&din) = xs.last() else {
            return shape_err("linear", "scalar input");
        };
        if ws.len() != 2 || ws[1] != din {
            return shape_err("linear", format!("input {:?} vs weight {:?}", xs, ws));
        }
        let dout = ws[0];
        if let Some(b) = bias {
            if self.shape(b) != [dout] {
                return shape_err("linear", format!("bias {:?} vs out dim {}", self.shape(b), dout));
            }
        }
        let m = xs.iter().product::<usize>() / din.max(1);
        let mut out = vec![E::zero(); m * dout];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for r in 0..m {
                out[r * dout..(r + 1) * dout].copy_from_slice(bd);
            }
        }
        let beta = if bias.is_some() { E::one() } else { E::zero() };
        gemm(
            E::one(),
            self.value(x).data(),
            MatLayout::row_major(m, din),
            self.value(w).data(),
            MatLayout::row_major(dout, din).t(),
            beta,
            &mut out,
            MatLayout::row_major(m, dout),
        );
        let mut shape = xs;
        *shape.last_mut().expect("rank >= 1") = dout;
        let value = Tensor::from_parts(shape, out);
        Ok(self.record(value, &vars, LinearBackward { rows: m, din, dout }))
    }

    /// Batched matrix product over matching leading axes:
    /// `a [..., M, K] x b [..., K, N]`, or `b [..., N, K]` when `transpose_b`.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        self.check(&[a, b])?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return shape_err("matmul", format!("{:?} x {:?}", sa, sb));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if transpose_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if k != kb {
            return shape_err("matmul", format!("inner extents {} vs {}", k, kb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let op = MatmulBackward { batch, m, k, n, transpose_b };
        let bl = op.b_layout();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![E::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                E::one(),
                &ad[i * m * k..],
                MatLayout::row_major(m, k),
                &bd[i * k * n..],
                bl,
                E::zero(),
                &mut out[i * m * n..],
                MatLayout::row_major(m, n),
            );
        }
        let mut shape = sa;
        shape[r - 1] = n;
        let value = Tensor::from_parts(shape, out);
        Ok(self.record(value, &[a, b], op))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_zero_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![2, 3], |i| i as f64 - 2.0));
        let w = tape.constant(Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let b = tape.constant(Tensor::zeros(vec![3]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn zero_weight_gives_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(vec![4, 2], |i| i as f64));
        let w = tape.constant(Tensor::zeros(vec![3, 2]));
        let b = tape.constant(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let y = tape.linear(x, w, Some(b)).unwrap();
        for r in 0..4 {
            assert_eq!(&tape.value(y).data()[r * 3..r * 3 + 3], &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3]));
        let w = tape.constant(Tensor::zeros(vec![3, 4]));
        assert!(tape.linear(x, w, None).is_err());
        assert!(tape.matmul(x, w, true).is_err());
    }
}
