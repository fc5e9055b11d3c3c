use rand::Rng;

use super::frame::{SilhouetteFrame, SilhouetteSequence};

/// Per-sequence spatial augmentation. Each transform fires independently
/// with its probability; a probability of 0 disables it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    pub flip: f64,
    pub rotate: f64,
    pub max_rotation_deg: f64,
    pub perspective: f64,
    /// Largest absolute entry of the affine jitter matrix.
    pub perspective_strength: f64,
    pub erase: f64,
    /// Erased area as a fraction of the frame, `(min, max)`.
    pub erase_area: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            flip: 0.5,
            rotate: 0.3,
            max_rotation_deg: 10.0,
            perspective: 0.3,
            perspective_strength: 0.08,
            erase: 0.3,
            erase_area: (0.02, 0.15),
        }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        AugmentPolicy { flip: 0.0, rotate: 0.0, perspective: 0.0, erase: 0.0, ..Self::default() }
    }

    pub fn is_identity(&self) -> bool {
        self.flip <= 0.0 && self.rotate <= 0.0 && self.perspective <= 0.0 && self.erase <= 0.0
    }

    /// Draws the transform parameters for one sequence of `h x w` frames.
    pub fn draw<R: Rng + ?Sized>(&self, h: usize, w: usize, rng: &mut R) -> AugmentRecord {
        let mut rec = AugmentRecord::default();
        if self.flip > 0.0 && rng.gen::<f64>() < self.flip {
            rec.flip = true;
        }
        if self.rotate > 0.0 && rng.gen::<f64>() < self.rotate {
            rec.rotation_deg = Some(rng.gen_range(-self.max_rotation_deg..=self.max_rotation_deg));
        }
        if self.perspective > 0.0 && rng.gen::<f64>() < self.perspective {
            let s = self.perspective_strength;
            let mut m = [0.0; 4];
            for v in &mut m {
                *v = rng.gen_range(-s..=s);
            }
            rec.affine = Some([1.0 + m[0], m[1], m[2], 1.0 + m[3]]);
        }
        if self.erase > 0.0 && rng.gen::<f64>() < self.erase {
            let area = rng.gen_range(self.erase_area.0..=self.erase_area.1) * (h * w) as f64;
            let aspect: f64 = rng.gen_range(0.3f64.ln()..=(1.0f64 / 0.3).ln()).exp();
            let eh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
            let ew = ((area / aspect).sqrt().round() as usize).clamp(1, w);
            let y = rng.gen_range(0..=h - eh);
            let x = rng.gen_range(0..=w - ew);
            rec.erase = Some((y, x, eh, ew));
        }
        rec
    }
}

/// The concrete transform applied to every frame of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentRecord {
    pub flip: bool,
    pub rotation_deg: Option<f64>,
    /// Row-major 2x2 matrix about the frame centre.
    pub affine: Option<[f64; 4]>,
    /// `(y, x, height, width)` set to background.
    pub erase: Option<(usize, usize, usize, usize)>,
}

impl AugmentRecord {
    pub fn flip_only() -> Self {
        AugmentRecord { flip: true, ..Self::default() }
    }

    /// Applies the transform; sampling is nearest-neighbour so binary masks
    /// stay binary.
    pub fn apply(&self, frame: &SilhouetteFrame) -> SilhouetteFrame {
        let (h, w) = (frame.height, frame.width);
        let mut out = frame.clone();
        if self.flip {
            out = SilhouetteFrame::from_fn(h, w, |y, x| frame.get(y, w - 1 - x));
        }
        // Inverse map output -> source, composed from rotation then affine.
        let mut inv = [1.0, 0.0, 0.0, 1.0];
        if let Some(deg) = self.rotation_deg {
            let (s, c) = deg.to_radians().sin_cos();
            inv = mul(inv, [c, s, -s, c]);
        }
        if let Some(a) = self.affine {
            let det = a[0] * a[3] - a[1] * a[2];
            inv = mul(inv, [a[3] / det, -a[1] / det, -a[2] / det, a[0] / det]);
        }
        if inv != [1.0, 0.0, 0.0, 1.0] {
            let src = out;
            let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
            out = SilhouetteFrame::from_fn(h, w, |y, x| {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let sy = inv[0] * dy + inv[1] * dx + cy;
                let sx = inv[2] * dy + inv[3] * dx + cx;
                if sy < 0.0 || sx < 0.0 {
                    return 0;
                }
                let (iy, ix) = (sy as usize, sx as usize);
                if iy >= h || ix >= w {
                    0
                } else {
                    src.get(iy, ix)
                }
            });
        }
        if let Some((ey, ex, eh, ew)) = self.erase {
            for y in ey..(ey + eh).min(h) {
                for x in ex..(ex + ew).min(w) {
                    out.mask[y * w + x] = 0;
                }
            }
        }
        out
    }

    pub fn apply_sequence(&self, seq: &SilhouetteSequence) -> SilhouetteSequence {
        seq.with_frames(seq.frames.iter().map(|f| self.apply(f)).collect())
    }
}

fn mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [a[0] * b[0] + a[1] * b[2], a[0] * b[1] + a[1] * b[3], a[2] * b[0] + a[3] * b[2], a[2] * b[1] + a[3] * b[3]]
}

/// Draws one transform and applies it to every frame of `seq`.
pub fn spatial_augment<R: Rng + ?Sized>(
    seq: &SilhouetteSequence,
    rng: &mut R,
    policy: &AugmentPolicy,
) -> (SilhouetteSequence, AugmentRecord) {
    let (h, w) = seq.frame_size();
    let rec = policy.draw(h, w, rng);
    (rec.apply_sequence(seq), rec)
}
