//! Convolutions lowered to matrix multiplication.
//!
//! All three public convolutions share one 3D kernel over `[N, C, T, H, W]`:
//! a 2D convolution is the `T = 1`, `kt = 1` case and a temporal convolution
//! is the `kh = kw = 1` case. For every output frame the receptive fields are
//! unfolded into a `[Cin·kt·kh·kw, H'·W']` column matrix and multiplied by the
//! `[Cout, Cin·kt·kh·kw]` weight matrix.

use crate::element::{gemm, Element, MatLayout};
use crate::error::{invalid, shape_err, Result};
use crate::tape::{Backward, BackwardCx, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geom {
    n: usize,
    cin: usize,
    t: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
}

impl Geom {
    fn new(x: &[usize], wt: &[usize], stride: [usize; 3], pad: [usize; 3], op: &'static str) -> Result<Self> {
        if x.len() != 5 || wt.len() != 5 {
            return shape_err(op, format!("expected rank-5 input and weight, got {:?} and {:?}", x, wt));
        }
        if stride.contains(&0) {
            return invalid(op, format!("stride must be positive, got {:?}", stride));
        }
        if x[1] != wt[1] {
            return shape_err(op, format!("input channels {} vs weight channels {}", x[1], wt[1]));
        }
        let dims = [x[2], x[3], x[4]];
        let k = [wt[2], wt[3], wt[4]];
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = dims[a] + 2 * pad[a];
            if k[a] == 0 || k[a] > padded {
                return shape_err(op, format!("kernel {:?} does not fit padded input {:?}", k, dims));
            }
            out[a] = (padded - k[a]) / stride[a] + 1;
        }
        Ok(Geom { n: x[0], cin: x[1], t: x[2], h: x[3], w: x[4], cout: wt[0], k, stride, pad, out })
    }

    fn kdim(&self) -> usize {
        self.cin * self.k[0] * self.k[1] * self.k[2]
    }

    fn plane_out(&self) -> usize {
        self.out[1] * self.out[2]
    }

    fn pointwise(&self) -> bool {
        self.k == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.out[0], self.out[1], self.out[2]]
    }

    /// Layout of the `[Cout, H'W']` slab of output frame `(n, t)`.
    fn out_slab(&self, n: usize, t: usize) -> (usize, MatLayout) {
        let p = self.plane_out();
        let off = (n * self.cout * self.out[0] + t) * p;
        (off, MatLayout::strided(self.cout, p, self.out[0] * p, 1))
    }

    /// Layout of the `[Cin, HW]` slab of input frame `(n, t)`.
    fn in_slab(&self, n: usize, t: usize) -> (usize, MatLayout) {
        let p = self.h * self.w;
        let off = (n * self.cin * self.t + t) * p;
        (off, MatLayout::strided(self.cin, p, self.t * p, 1))
    }

    fn im2col<E: Element>(&self, x: &[E], n: usize, to: usize, cols: &mut [E]) {
        let [kt, kh, kw] = self.k;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.pad;
        let (ho, wo) = (self.out[1], self.out[2]);
        let p = ho * wo;
        let mut row = 0;
        for ci in 0..self.cin {
            for a in 0..kt {
                let ti = (to * st + a) as isize - pt as isize;
                for b in 0..kh {
                    for c in 0..kw {
                        let dst = &mut cols[row * p..(row + 1) * p];
                        row += 1;
                        if ti < 0 || ti >= self.t as isize {
                            dst.fill(E::zero());
                            continue;
                        }
                        let base = ((n * self.cin + ci) * self.t + ti as usize) * self.h * self.w;
                        for y in 0..ho {
                            let hi = (y * sh + b) as isize - ph as isize;
                            let seg = &mut dst[y * wo..(y + 1) * wo];
                            if hi < 0 || hi >= self.h as isize {
                                seg.fill(E::zero());
                                continue;
                            }
                            let src = &x[base + hi as usize * self.w..base + (hi as usize + 1) * self.w];
                            if sw == 1 {
                                let (lo, hi_x) = valid_range(wo, c, pw, self.w);
                                seg[..lo].fill(E::zero());
                                seg[hi_x..].fill(E::zero());
                                if hi_x > lo {
                                    let s0 = lo + c - pw;
                                    seg[lo..hi_x].copy_from_slice(&src[s0..s0 + (hi_x - lo)]);
                                }
                            } else {
                                for (xo, v) in seg.iter_mut().enumerate() {
                                    let wi = (xo * sw + c) as isize - pw as isize;
                                    *v = if wi < 0 || wi >= self.w as isize { E::zero() } else { src[wi as usize] };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<E: Element>(&self, cols: &[E], n: usize, to: usize, dx: &mut [E]) {
        let [kt, kh, kw] = self.k;
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.pad;
        let (ho, wo) = (self.out[1], self.out[2]);
        let p = ho * wo;
        let mut row = 0;
        for ci in 0..self.cin {
            for a in 0..kt {
                let ti = (to * st + a) as isize - pt as isize;
                for b in 0..kh {
                    for c in 0..kw {
                        let src = &cols[row * p..(row + 1) * p];
                        row += 1;
                        if ti < 0 || ti >= self.t as isize {
                            continue;
                        }
                        let base = ((n * self.cin + ci) * self.t + ti as usize) * self.h * self.w;
                        for y in 0..ho {
                            let hi = (y * sh + b) as isize - ph as isize;
                            if hi < 0 || hi >= self.h as isize {
                                continue;
                            }
                            let seg = &src[y * wo..(y + 1) * wo];
                            let dst = &mut dx[base + hi as usize * self.w..base + (hi as usize + 1) * self.w];
                            if sw == 1 {
                                let (lo, hi_x) = valid_range(wo, c, pw, self.w);
                                if hi_x > lo {
                                    let s0 = lo + c - pw;
                                    for (d, s) in dst[s0..s0 + (hi_x - lo)].iter_mut().zip(&seg[lo..hi_x]) {
                                        *d += *s;
                                    }
                                }
                            } else {
                                for (xo, v) in seg.iter().enumerate() {
                                    let wi = (xo * sw + c) as isize - pw as isize;
                                    if wi >= 0 && (wi as usize) < self.w {
                                        dst[wi as usize] += *v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose input column `xo + c - pad` lies in `[0, w)`.
fn valid_range(wo: usize, c: usize, pad: usize, w: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(c).min(wo);
    let hi = (w + pad).saturating_sub(c).min(wo).max(lo);
    (lo, hi)
}

fn conv_forward<E: Element>(g: &Geom, x: &[E], wt: &[E]) -> Vec<E> {
    let mut out = vec![E::zero(); g.out_shape().iter().product()];
    let kdim = g.kdim();
    let wl = MatLayout::row_major(g.cout, kdim);
    if g.pointwise() {
        for n in 0..g.n {
            for t in 0..g.t {
                let (xo, xl) = g.in_slab(n, t);
                let (oo, ol) = g.out_slab(n, t);
                gemm(E::one(), wt, wl, &x[xo..], xl, E::zero(), &mut out[oo..], ol);
            }
        }
        return out;
    }
    let p = g.plane_out();
    let mut cols = vec![E::zero(); kdim * p];
    for n in 0..g.n {
        for t in 0..g.out[0] {
            g.im2col(x, n, t, &mut cols);
            let (oo, ol) = g.out_slab(n, t);
            gemm(E::one(), wt, wl, &cols, MatLayout::row_major(kdim, p), E::zero(), &mut out[oo..], ol);
        }
    }
    out
}

struct ConvBackward {
    geom: Geom,
}

impl<E: Element> Backward<E> for ConvBackward {
    fn backward(&self, cx: &BackwardCx<'_, E>) -> Result<Vec<Option<Tensor<E>>>> {
        let g = &self.geom;
        let (x, wt, dy) = (cx.inputs[0].data(), cx.inputs[1].data(), cx.grad.data());
        let kdim = g.kdim();
        let p = g.plane_out();
        let wl = MatLayout::row_major(g.cout, kdim);
        let mut dx = if cx.needs[0] { Some(vec![E::zero(); x.len()]) } else { None };
        let mut dw = if cx.needs[1] { Some(vec![E::zero(); wt.len()]) } else { None };

        if g.pointwise() {
            for n in 0..g.n {
                for t in 0..g.t {
                    let (xo, xl) = g.in_slab(n, t);
                    let (oo, ol) = g.out_slab(n, t);
                    if let Some(dw) = dw.as_mut() {
                        gemm(E::one(), &dy[oo..], ol, &x[xo..], xl.t(), E::one(), dw, wl);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(E::one(), wt, wl.t(), &dy[oo..], ol, E::one(), &mut dx[xo..], xl);
                    }
                }
            }
        } else {
            let cl = MatLayout::row_major(kdim, p);
            let mut cols = vec![E::zero(); kdim * p];
            let mut dcols = vec![E::zero(); kdim * p];
            for n in 0..g.n {
                for t in 0..g.out[0] {
                    let (oo, ol) = g.out_slab(n, t);
                    if let Some(dw) = dw.as_mut() {
                        g.im2col(x, n, t, &mut cols);
                        gemm(E::one(), &dy[oo..], ol, &cols, cl.t(), E::one(), dw, wl);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(E::one(), wt, wl.t(), &dy[oo..], ol, E::zero(), &mut dcols, cl);
                        g.col2im(&dcols, n, t, dx);
                    }
                }
            }
        }
        Ok(vec![
            dx.map(|d| Tensor::from_parts(cx.inputs[0].shape().to_vec(), d)),
            dw.map(|d| Tensor::from_parts(cx.inputs[1].shape().to_vec(), d)),
        ])
    }
}

/// Reshapes the gradient of a re-viewed convolution back to the caller's shapes.
struct ViewBackward {
    x_shape: Vec<usize>,
    w_shape: Vec<usize>,
    geom: Geom,
}

impl<E: Element> Backward<E> for ViewBackward {
    fn backward(&self, cx: &BackwardCx<'_, E>) -> Result<Vec<Option<Tensor<E>>>> {
        let x5 = cx.inputs[0].reshape(vec![self.geom.n, self.geom.cin, self.geom.t, self.geom.h, self.geom.w])?;
        let w5 = cx.inputs[1].reshape(vec![
            self.geom.cout,
            self.geom.cin,
            self.geom.k[0],
            self.geom.k[1],
            self.geom.k[2],
        ])?;
        let g5 = cx.grad.reshape(self.geom.out_shape())?;
        let inner = BackwardCx { inputs: vec![&x5, &w5], output: cx.output, grad: &g5, needs: cx.needs.clone() };
        let grads = ConvBackward { geom: self.geom }.backward(&inner)?;
        let mut it = grads.into_iter();
        let dx = it.next().flatten().map(|d| d.reshape(self.x_shape.clone())).transpose()?;
        let dw = it.next().flatten().map(|d| d.reshape(self.w_shape.clone())).transpose()?;
        Ok(vec![dx, dw])
    }
}

impl<E: Element> Tape<E> {
    /// 3D convolution: input `[N, Cin, T, H, W]`, weight `[Cout, Cin, kt, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: [usize; 3], padding: [usize; 3]) -> Result<Var> {
        self.check(&[x, w])?;
        let geom = Geom::new(self.shape(x), self.shape(w), stride, padding, "conv3d")?;
        let out = conv_forward(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::from_parts(geom.out_shape(), out);
        Ok(self.record(value, &[x, w], ConvBackward { geom }))
    }

    /// 2D convolution: input `[N, Cin, H, W]`, weight `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: [usize; 2], padding: [usize; 2]) -> Result<Var> {
        self.check(&[x, w])?;
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return shape_err("conv2d", format!("expected rank-4 input and weight, got {:?} and {:?}", xs, ws));
        }
        let x5 = [xs[0], xs[1], 1, xs[2], xs[3]];
        let w5 = [ws[0], ws[1], 1, ws[2], ws[3]];
        let geom = Geom::new(&x5, &w5, [1, stride[0], stride[1]], [0, padding[0], padding[1]], "conv2d")?;
        let out = conv_forward(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::from_parts(vec![geom.n, geom.cout, geom.out[1], geom.out[2]], out);
        Ok(self.record(value, &[x, w], ViewBackward { x_shape: xs, w_shape: ws, geom }))
    }

    /// Convolution along `T` only: input `[N, C, T, H, W]`, weight `[Cout, C, kt]`
    /// with odd `kt`, stride 1 and padding `kt / 2`, so `T` is preserved.
    pub fn conv1d_temporal(&mut self, x: Var, w: Var) -> Result<Var> {
        self.check(&[x, w])?;
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 5 || ws.len() != 3 {
            return shape_err(
                "conv1d_temporal",
                format!("expected [N,C,T,H,W] and [Cout,C,kt], got {:?} and {:?}", xs, ws),
            );
        }
        if ws[2] % 2 == 0 {
            return invalid("conv1d_temporal", format!("temporal kernel size must be odd, got {}", ws[2]));
        }
        let w5 = [ws[0], ws[1], ws[2], 1, 1];
        let geom = Geom::new(&xs, &w5, [1, 1, 1], [ws[2] / 2, 0, 0], "conv1d_temporal")?;
        let out = conv_forward(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::from_parts(geom.out_shape(), out);
        Ok(self.record(value, &[x, w], ViewBackward { x_shape: xs, w_shape: ws, geom }))
    }
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for w in 1..6 {
            for pad in 0..3 {
                for c in 0..(2 * pad + 1) {
                    for wo in 1..8 {
                        let (lo, hi) = valid_range(wo, c, pad, w);
                        for xo in 0..wo {
                            let wi = xo as isize + c as isize - pad as isize;
                            let inside = wi >= 0 && (wi as usize) < w;
                            assert_eq!(inside, xo >= lo && xo < hi, "w={w} pad={pad} c={c} xo={xo}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_zero_stride_and_oversized_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        assert!(tape.conv2d(x, w, [0, 1], [1, 1]).is_err());
        let big = tape.constant(Tensor::zeros(vec![1, 1, 7, 7]));
        assert!(tape.conv2d(x, big, [1, 1], [1, 1]).is_err());
        let wrong_c = tape.constant(Tensor::zeros(vec![1, 2, 3, 3]));
        assert!(tape.conv2d(x, wrong_c, [1, 1], [1, 1]).is_err());
    }

    #[test]
    fn temporal_rejects_even_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 4, 2, 2]));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 2]));
        assert!(tape.conv1d_temporal(x, w).is_err());
    }
}
