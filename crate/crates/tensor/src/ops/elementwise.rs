use crate::element::Element;
use crate::error::{shape_err, Result};
use crate::tape::{Backward, BackwardCx, Tape, Var};
use crate::tensor::{contiguous_strides, Tensor};

/// Numpy-style broadcast of two shapes (trailing axes aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len()).map(|i| if i < lead || shape[i - lead] == 1 { 0 } else { own[i - lead] }).collect()
}

/// Calls `f(out_index, a_offset, b_offset)` over the broadcast grid.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let numel: usize = out.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..numel {
        f(i, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct BinaryBackward {
    kind: BinaryKind,
    out_shape: Vec<usize>,
}

impl<E: Element> Backward<E> for BinaryBackward {
    fn backward(&self, cx: &BackwardCx<'_, E>) -> Result<Vec<Option<Tensor<E>>>> {
        let (a, b, g) = (cx.inputs[0], cx.inputs[1], cx.grad.data());
        if a.shape() == b.shape() {
            let ga = cx.needs[0].then(|| match self.kind {
                BinaryKind::Add | BinaryKind::Sub => cx.grad.clone(),
                BinaryKind::Mul => {
                    Tensor::from_parts(a.shape().to_vec(), g.iter().zip(b.data()).map(|(g, b)| *g * *b).collect())
                }
            });
            let gb = cx.needs[1].then(|| match self.kind {
                BinaryKind::Add => cx.grad.clone(),
                BinaryKind::Sub => cx.grad.map(|v| -v),
                BinaryKind::Mul => {
                    Tensor::from_parts(b.shape().to_vec(), g.iter().zip(a.data()).map(|(g, a)| *g * *a).collect())
                }
            });
            return Ok(vec![ga, gb]);
        }
        let sa = broadcast_strides(a.shape(), &self.out_shape);
        let sb = broadcast_strides(b.shape(), &self.out_shape);
        let mut ga = cx.needs[0].then(|| vec![E::zero(); a.numel()]);
        let mut gb = cx.needs[1].then(|| vec![E::zero(); b.numel()]);
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast(&self.out_shape, &sa, &sb, |i, oa, ob| {
            let gi = g[i];
            if let Some(ga) = ga.as_mut() {
                ga[oa] += match self.kind {
                    BinaryKind::Add | BinaryKind::Sub => gi,
                    BinaryKind::Mul => gi * bd[ob],
                };
            }
            if let Some(gb) = gb.as_mut() {
                gb[ob] += match self.kind {
                    BinaryKind::Add => gi,
                    BinaryKind::Sub => -gi,
                    BinaryKind::Mul => gi * ad[oa],
                };
            }
        });
        Ok(vec![
            ga.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
            gb.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
        ])
    }
}

#[derive(Clone, Copy)]
enum UnaryKind {
    Relu,
    Gelu,
    Scale(f64),
    Shift,
    Sqrt,
    Exp,
}

struct UnaryBackward {
    kind: UnaryKind,
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu<E: Element>(x: E) -> E {
    let half = E::from_f64_lossy(0.5);
    half * x * (E::one() + (x * E::from_f64_lossy(INV_SQRT_2)).erf())
}

fn gelu_grad<E: Element>(x: E) -> E {
    let half = E::from_f64_lossy(0.5);
    let cdf = half * (E::one() + (x * E::from_f64_lossy(INV_SQRT_2)).erf());
    let pdf = E::from_f64_lossy(INV_SQRT_2PI) * (-(x * x) * half).exp();
    cdf + x * pdf
}

impl<E: Element> Backward<E> for UnaryBackward {
    fn backward(&self, cx: &BackwardCx<'_, E>) -> Result<Vec<Option<Tensor<E>>>> {
        let x = cx.inputs[0].data();
        let y = cx.output.data();
        let g = cx.grad.data();
        let data: Vec<E> = match self.kind {
            UnaryKind::Relu => g.iter().zip(x).map(|(g, x)| if *x > E::zero() { *g } else { E::zero() }).collect(),
            UnaryKind::Gelu => g.iter().zip(x).map(|(g, x)| *g * gelu_grad(*x)).collect(),
            UnaryKind::Scale(s) => {
                let s = E::from_f64_lossy(s);
                g.iter().map(|g| *g * s).collect()
            }
            UnaryKind::Shift => g.to_vec(),
            UnaryKind::Sqrt => {
                g.iter().zip(y).map(|(g, y)| if *y > E::zero() { *g / (*y + *y) } else { E::zero() }).collect()
            }
            UnaryKind::Exp => g.iter().zip(y).map(|(g, y)| *g * *y).collect(),
        };
        Ok(vec![Some(Tensor::from_parts(cx.inputs[0].shape().to_vec(), data))])
    }
}

impl<E: Element> Tape<E> {
    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind, op: &'static str) -> Result<Var> {
        self.check(&[a, b])?;
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: E, y: E| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let (out_shape, data) = if ta.shape() == tb.shape() {
            (ta.shape().to_vec(), ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect())
        } else {
            let Some(out_shape) = broadcast_shape(ta.shape(), tb.shape()) else {
                return shape_err(op, format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape()));
            };
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let mut data = vec![E::zero(); out_shape.iter().product()];
            let (ad, bd) = (ta.data(), tb.data());
            for_each_broadcast(&out_shape, &sa, &sb, |i, oa, ob| data[i] = f(ad[oa], bd[ob]));
            (out_shape, data)
        };
        let value = Tensor::from_parts(out_shape.clone(), data);
        Ok(self.record(value, &[a, b], BinaryBackward { kind, out_shape }))
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub, "sub")
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul, "mul")
    }

    fn unary(&mut self, x: Var, kind: UnaryKind, f: impl Fn(E) -> E) -> Result<Var> {
        self.check(&[x])?;
        let value = self.value(x).map(f);
        Ok(self.record(value, &[x], UnaryBackward { kind }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Relu, |v| if v > E::zero() { v } else { E::zero() })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Gelu, gelu)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let se = E::from_f64_lossy(s);
        self.unary(x, UnaryKind::Scale(s), move |v| v * se)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let ce = E::from_f64_lossy(c);
        self.unary(x, UnaryKind::Shift, move |v| v + ce)
    }

    /// Square root; the gradient at zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Sqrt, |v| v.max(E::zero()).sqrt())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, UnaryKind::Exp, |v| v.exp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn broadcast_add_and_reduce_in_backward() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_fn(vec![2, 3], |i| i as f64), true);
        let b = tape.leaf(Tensor::new(vec![3], vec![10.0, 20.0, 30.0]).unwrap(), true);
        let c = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[0.0, 20.0, 60.0, 30.0, 80.0, 150.0]);
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[3.0, 5.0, 7.0]);
        assert_eq!(tape.grad(a).unwrap().data(), &[10.0, 20.0, 30.0, 10.0, 20.0, 30.0]);
    }

    #[test]
    fn gelu_reference_points() {
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert_eq!(gelu(0.0f64), 0.0);
    }
}
