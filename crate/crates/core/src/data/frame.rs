use gaitforge_tensor::resize_plane;

use crate::backbone::INPUT_SIZE;
use crate::error::{precondition, GaitError, Result};

pub const FOREGROUND: u8 = 255;
pub const THRESHOLD: u8 = 128;

/// One 8-bit silhouette mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SilhouetteFrame {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<u8>,
}

impl SilhouetteFrame {
    pub fn new(height: usize, width: usize, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != height * width {
            return precondition(format!("mask has {} pixels, expected {}x{}", mask.len(), height, width));
        }
        Ok(SilhouetteFrame { height, width, mask })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        SilhouetteFrame { height, width, mask: vec![0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut mask = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                mask.push(f(y, x));
            }
        }
        SilhouetteFrame { height, width, mask }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.mask[y * self.width + x]
    }

    pub fn is_foreground(&self, y: usize, x: usize) -> bool {
        self.get(y, x) >= THRESHOLD
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&v| v >= THRESHOLD).count()
    }

    pub fn is_binary(&self) -> bool {
        self.mask.iter().all(|&v| v == 0 || v == FOREGROUND)
    }

    pub fn binarized(&self) -> Self {
        let mask = self.mask.iter().map(|&v| if v >= THRESHOLD { FOREGROUND } else { 0 }).collect();
        SilhouetteFrame { height: self.height, width: self.width, mask }
    }

    /// Inclusive `(top, bottom, left, right)` of the foreground, if any.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut top, mut bottom, mut left, mut right) = (usize::MAX, 0, usize::MAX, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_foreground(y, x) {
                    top = top.min(y);
                    bottom = bottom.max(y);
                    left = left.min(x);
                    right = right.max(x);
                }
            }
        }
        (top != usize::MAX).then_some((top, bottom, left, right))
    }
}

/// Ordered frames of one walk with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteSequence {
    pub frames: Vec<SilhouetteFrame>,
    pub subject: String,
    pub condition: String,
    pub view: String,
    pub ordered: bool,
}

impl SilhouetteSequence {
    pub fn new(frames: Vec<SilhouetteFrame>, subject: &str, condition: &str, view: &str) -> Result<Self> {
        let Some(first) = frames.first() else {
            return precondition(format!("sequence {}/{}/{} has no frames", subject, condition, view));
        };
        let (h, w) = (first.height, first.width);
        if frames.iter().any(|f| f.height != h || f.width != w) {
            return Err(GaitError::Format(format!("sequence {}/{}/{} mixes frame sizes", subject, condition, view)));
        }
        Ok(SilhouetteSequence {
            frames,
            subject: subject.to_string(),
            condition: condition.to_string(),
            view: view.to_string(),
            ordered: true,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_size(&self) -> (usize, usize) {
        self.frames.first().map_or((0, 0), |f| (f.height, f.width))
    }

    pub fn with_frames(&self, frames: Vec<SilhouetteFrame>) -> Self {
        SilhouetteSequence { frames, ..self.clone() }
    }

    pub fn normalized(&self) -> Result<Self> {
        let frames = self.frames.iter().map(normalize_silhouette).collect::<Result<Vec<_>>>()?;
        Ok(self.with_frames(frames))
    }
}

/// Aligns a raw mask to 64x44: crop to the foreground box, scale the crop
/// to height 64, centre horizontally on the foreground centroid and keep a
/// 44-pixel window, then binarize at 128.
pub fn normalize_silhouette(raw: &SilhouetteFrame) -> Result<SilhouetteFrame> {
    let (top, bottom, left, right) = raw.bounding_box().ok_or(GaitError::EmptySilhouette)?;
    let (out_h, out_w) = INPUT_SIZE;
    let (ch, cw) = (bottom - top + 1, right - left + 1);
    let mut crop = Vec::with_capacity(ch * cw);
    for y in top..=bottom {
        for x in left..=right {
            crop.push(raw.get(y, x) as f64);
        }
    }
    let sw = ((cw as f64 * out_h as f64 / ch as f64).round() as usize).max(1);
    let scaled = resize_plane(&crop, ch, cw, out_h, sw);

    let (mut mass, mut moment) = (0.0, 0.0);
    for (i, &v) in scaled.iter().enumerate() {
        mass += v;
        moment += v * ((i % sw) as f64 + 0.5);
    }
    let cx = if mass > 0.0 { moment / mass } else { sw as f64 / 2.0 };
    let start = (cx - out_w as f64 / 2.0).round() as i64;

    Ok(SilhouetteFrame::from_fn(out_h, out_w, |y, x| {
        let sx = start + x as i64;
        if sx < 0 || sx >= sw as i64 {
            return 0;
        }
        if scaled[y * sw + sx as usize] >= THRESHOLD as f64 {
            FOREGROUND
        } else {
            0
        }
    }))
}
