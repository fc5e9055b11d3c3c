//! Shifted-window partitioning of `[N, T, H, W, D]` token grids.
//!
//! The grid is zero-padded up to window multiples, cyclically shifted by
//! `-shift`, and cut into windows. Axes no longer than their window use a
//! single window spanning the axis with no shift.

use std::sync::Arc;

use gaitforge_tensor::{Element, Tape, Tensor, Var, GATHER_ZERO};

use crate::error::{config, precondition, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub grid: [usize; 3],
    /// Configured window, used for relative-position indexing.
    pub window: [usize; 3],
    /// Effective window after clamping to the grid.
    pub effective: [usize; 3],
    pub shift: [usize; 3],
    pub padded: [usize; 3],
}

impl WindowPlan {
    pub fn new(grid: [usize; 3], window: [usize; 3], shift: [usize; 3]) -> Result<Self> {
        if grid.contains(&0) || window.contains(&0) {
            return precondition(format!("grid {:?} and window {:?} must be positive", grid, window));
        }
        for a in 0..3 {
            if shift[a] >= window[a] {
                return config(format!("shift {:?} must be smaller than window {:?}", shift, window));
            }
        }
        let mut effective = window;
        let mut eff_shift = shift;
        let mut padded = grid;
        for a in 0..3 {
            if grid[a] <= window[a] {
                effective[a] = grid[a];
                eff_shift[a] = 0;
            } else {
                padded[a] = grid[a].div_ceil(window[a]) * window[a];
            }
        }
        Ok(WindowPlan { grid, window, effective, shift: eff_shift, padded })
    }

    pub fn counts(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.padded[a] / self.effective[a])
    }

    pub fn num_windows(&self) -> usize {
        self.counts().iter().product()
    }

    pub fn window_len(&self) -> usize {
        self.effective.iter().product()
    }

    fn original(&self, axis: usize, shifted: usize) -> Option<usize> {
        let o = (shifted + self.shift[axis]) % self.padded[axis];
        (o < self.grid[axis]).then_some(o)
    }

    fn region(&self, axis: usize, shifted: usize) -> usize {
        let (p, w, s) = (self.padded[axis], self.effective[axis], self.shift[axis]);
        if s == 0 || shifted < p - w {
            0
        } else if shifted < p - s {
            1
        } else {
            2
        }
    }

    /// Shifted padded coordinate of window `win`, slot `slot`.
    fn coords(&self, win: usize, slot: usize) -> [usize; 3] {
        let c = self.counts();
        let e = self.effective;
        let (wt, rest) = (win / (c[1] * c[2]), win % (c[1] * c[2]));
        let (wh, ww) = (rest / c[2], rest % c[2]);
        let (st, rest) = (slot / (e[1] * e[2]), slot % (e[1] * e[2]));
        let (sh, sw) = (rest / e[2], rest % e[2]);
        [wt * e[0] + st, wh * e[1] + sh, ww * e[2] + sw]
    }

    /// Flat grid position (`t * H * W + h * W + w`) feeding each window slot,
    /// `None` for padding; ordered `[window][slot]`.
    pub fn sources(&self) -> Vec<Option<usize>> {
        let (nw, l) = (self.num_windows(), self.window_len());
        let [_, h, w] = self.grid;
        let mut out = Vec::with_capacity(nw * l);
        for win in 0..nw {
            for slot in 0..l {
                let p = self.coords(win, slot);
                let src = match (self.original(0, p[0]), self.original(1, p[1]), self.original(2, p[2])) {
                    (Some(a), Some(b), Some(c)) => Some((a * h + b) * w + c),
                    _ => None,
                };
                out.push(src);
            }
        }
        out
    }

    /// Whether query `q` may attend to key `k` within window `win`.
    pub fn allowed(&self, win: usize, q: usize, k: usize) -> bool {
        let (pq, pk) = (self.coords(win, q), self.coords(win, k));
        let region = |p: [usize; 3]| [0, 1, 2].map(|a| self.region(a, p[a]));
        let pad = |p: [usize; 3]| (0..3).any(|a| self.original(a, p[a]).is_none());
        if region(pq) != region(pk) {
            return false;
        }
        !(pad(pk) && !pad(pq))
    }

    /// Additive mask `[num_windows, L, L]` (0 or -inf), or `None` when every
    /// pair is allowed.
    pub fn mask<E: Element>(&self) -> Option<Tensor<E>> {
        let (nw, l) = (self.num_windows(), self.window_len());
        if self.shift == [0, 0, 0] && self.padded == self.grid {
            return None;
        }
        let mut m = vec![E::zero(); nw * l * l];
        for win in 0..nw {
            for q in 0..l {
                for k in 0..l {
                    if !self.allowed(win, q, k) {
                        m[(win * l + q) * l + k] = E::neg_infinity();
                    }
                }
            }
        }
        Some(Tensor::new(vec![nw, l, l], m).expect("mask shape"))
    }

    /// Row of the relative-position table for each `(query, key)` pair,
    /// `[L * L]`, indexed against the configured window.
    pub fn relative_index(&self) -> Vec<usize> {
        let l = self.window_len();
        let e = self.effective;
        let w = self.window;
        let coord = |s: usize| [s / (e[1] * e[2]), (s / e[2]) % e[1], s % e[2]];
        let mut out = Vec::with_capacity(l * l);
        for q in 0..l {
            for k in 0..l {
                let (a, b) = (coord(q), coord(k));
                let d = [0, 1, 2].map(|i| a[i] + w[i] - 1 - b[i]);
                out.push((d[0] * (2 * w[1] - 1) + d[1]) * (2 * w[2] - 1) + d[2]);
            }
        }
        out
    }
}

/// Rows of the relative-position bias table for `window`.
pub fn bias_table_len(window: [usize; 3]) -> usize {
    window.iter().map(|w| 2 * w - 1).product()
}

/// `[N, T, H, W, D] -> [N * num_windows, L, D]`.
pub fn window_partition<E: Element>(tape: &mut Tape<E>, x: Var, plan: &WindowPlan) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 5 || s[1..4] != plan.grid {
        return precondition(format!("token grid {:?} does not match plan grid {:?}", s, plan.grid));
    }
    let (n, d) = (s[0], s[4]);
    let cells = plan.grid.iter().product::<usize>();
    let sources = plan.sources();
    let mut index = Vec::with_capacity(n * sources.len() * d);
    for b in 0..n {
        for src in &sources {
            match src {
                Some(p) => index.extend((0..d).map(|c| ((b * cells + p) * d + c) as u32)),
                None => index.extend(std::iter::repeat_n(GATHER_ZERO, d)),
            }
        }
    }
    let shape = vec![n * plan.num_windows(), plan.window_len(), d];
    Ok(tape.gather(x, shape, Arc::new(index))?)
}

/// Inverse of [`window_partition`]: drops padding and undoes the shift.
pub fn window_reverse<E: Element>(tape: &mut Tape<E>, windows: Var, plan: &WindowPlan, n: usize) -> Result<Var> {
    let s = tape.shape(windows).to_vec();
    let slots = plan.num_windows() * plan.window_len();
    if s.len() != 3 || s[0] * s[1] != n * slots || s[1] != plan.window_len() {
        return precondition(format!("windows {:?} do not match plan for batch {}", s, n));
    }
    let d = s[2];
    let cells = plan.grid.iter().product::<usize>();
    let mut slot_of = vec![0usize; cells];
    for (slot, src) in plan.sources().iter().enumerate() {
        if let Some(p) = src {
            slot_of[*p] = slot;
        }
    }
    let mut index = Vec::with_capacity(n * cells * d);
    for b in 0..n {
        for &slot in &slot_of {
            index.extend((0..d).map(|c| ((b * slots + slot) * d + c) as u32));
        }
    }
    let [t, h, w] = plan.grid;
    Ok(tape.gather(windows, vec![n, t, h, w, d], Arc::new(index))?)
}
