//! Bilinear resampling with half-pixel centers (`align_corners = false`).
//!
//! Output pixel `i` samples source coordinate `(i + 0.5) * in / out - 0.5`,
//! clamped below at 0; the upper neighbour is clamped to the last row/column.

use crate::element::Element;
use crate::error::{invalid, shape_err, Result};
use crate::tape::{Backward, BackwardCx, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

struct ResizeBackward {
    ty: Vec<Tap>,
    tx: Vec<Tap>,
}

impl<E: Element> Backward<E> for ResizeBackward {
    fn backward(&self, cx: &BackwardCx<'_, E>) -> Result<Vec<Option<Tensor<E>>>> {
        let s = cx.inputs[0].shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (self.ty.len(), self.tx.len());
        let g = cx.grad.data();
        let mut dx = vec![E::zero(); planes * h * w];
        for p in 0..planes {
            let src = &g[p * ho * wo..(p + 1) * ho * wo];
            let dst = &mut dx[p * h * w..(p + 1) * h * w];
            for (y, ty) in self.ty.iter().enumerate() {
                let fy = E::from_f64_lossy(ty.frac);
                for (x, tx) in self.tx.iter().enumerate() {
                    let fx = E::from_f64_lossy(tx.frac);
                    let v = src[y * wo + x];
                    let top = v * (E::one() - fy);
                    let bot = v * fy;
                    dst[ty.lo * w + tx.lo] += top * (E::one() - fx);
                    dst[ty.lo * w + tx.hi] += top * fx;
                    dst[ty.hi * w + tx.lo] += bot * (E::one() - fx);
                    dst[ty.hi * w + tx.hi] += bot * fx;
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(s.to_vec(), dx))])
    }
}

/// Resizes a single `[h, w]` plane; shared with image preprocessing.
pub fn resize_plane(src: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let ty = taps(h, ho);
    let tx = taps(w, wo);
    let mut out = vec![0.0; ho * wo];
    for (y, a) in ty.iter().enumerate() {
        for (x, b) in tx.iter().enumerate() {
            let top = src[a.lo * w + b.lo] * (1.0 - b.frac) + src[a.lo * w + b.hi] * b.frac;
            let bot = src[a.hi * w + b.lo] * (1.0 - b.frac) + src[a.hi * w + b.hi] * b.frac;
            out[y * wo + x] = top * (1.0 - a.frac) + bot * a.frac;
        }
    }
    out
}

impl<E: Element> Tape<E> {
    /// Bilinear resize of `[N, C, H, W]` to `[N, C, target.0, target.1]`.
    pub fn bilinear_resize(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        self.check(&[x])?;
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err("bilinear_resize", format!("expected [N, C, H, W], got {:?}", s));
        }
        let (ho, wo) = target;
        if ho == 0 || wo == 0 {
            return invalid("bilinear_resize", format!("target size must be positive, got {:?}", target));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        if h == 0 || w == 0 {
            return shape_err("bilinear_resize", "empty input plane");
        }
        let ty = taps(h, ho);
        let tx = taps(w, wo);
        let xd = self.value(x).data();
        let mut out = vec![E::zero(); planes * ho * wo];
        for p in 0..planes {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for (y, a) in ty.iter().enumerate() {
                let fy = E::from_f64_lossy(a.frac);
                for (xo, b) in tx.iter().enumerate() {
                    let fx = E::from_f64_lossy(b.frac);
                    let top = src[a.lo * w + b.lo] * (E::one() - fx) + src[a.lo * w + b.hi] * fx;
                    let bot = src[a.hi * w + b.lo] * (E::one() - fx) + src[a.hi * w + b.hi] * fx;
                    dst[y * wo + xo] = top * (E::one() - fy) + bot * fy;
                }
            }
        }
        let value = Tensor::from_parts(vec![s[0], s[1], ho, wo], out);
        Ok(self.record(value, &[x], ResizeBackward { ty, tx }))
    }
}
