use super::frame::SilhouetteFrame;
use super::sampler::Dataset;
use crate::error::{config, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PatchCount {
    pub dumb: usize,
    pub total: usize,
}

impl PatchCount {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.dumb as f64 / self.total as f64
        }
    }
}

/// Counts non-overlapping `patch x patch` tiles that are entirely foreground
/// or entirely background. Frames are padded with background up to a
/// multiple of the patch size.
pub fn count_dumb_patches(frame: &SilhouetteFrame, patch: usize) -> Result<PatchCount> {
    if patch == 0 {
        return config("patch size must be positive");
    }
    let (ph, pw) = (frame.height.div_ceil(patch), frame.width.div_ceil(patch));
    let mut dumb = 0;
    for py in 0..ph {
        for px in 0..pw {
            let (mut fg, mut bg) = (false, false);
            for y in py * patch..(py + 1) * patch {
                for x in px * patch..(px + 1) * patch {
                    if y < frame.height && x < frame.width && frame.is_foreground(y, x) {
                        fg = true;
                    } else {
                        bg = true;
                    }
                }
            }
            if !(fg && bg) {
                dumb += 1;
            }
        }
    }
    Ok(PatchCount { dumb, total: ph * pw })
}

pub fn dumb_patch_fraction(frame: &SilhouetteFrame, patch: usize) -> Result<f64> {
    Ok(count_dumb_patches(frame, patch)?.fraction())
}

/// Fraction over every patch of every frame in the dataset.
pub fn dataset_dumb_patch_fraction(dataset: &Dataset, patch: usize) -> Result<f64> {
    if patch == 0 {
        return config("patch size must be positive");
    }
    let mut acc = PatchCount::default();
    for frame in dataset.sequences.iter().flat_map(|s| &s.frames) {
        let c = count_dumb_patches(frame, patch)?;
        acc.dumb += c.dumb;
        acc.total += c.total;
    }
    Ok(acc.fraction())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_frames_are_dumb() {
        let black = SilhouetteFrame::blank(64, 44);
        let white = SilhouetteFrame::from_fn(64, 44, |_, _| 255);
        for p in [1, 3, 4, 16] {
            assert_eq!(dumb_patch_fraction(&black, p).unwrap(), 1.0);
        }
        assert_eq!(dumb_patch_fraction(&white, 4).unwrap(), 1.0);
    }

    #[test]
    fn padding_counts_as_background() {
        // 4x4 white frame at patch 3: the top-left tile is all white, the
        // other three mix white pixels with padding.
        let white = SilhouetteFrame::from_fn(4, 4, |_, _| 255);
        assert_eq!(count_dumb_patches(&white, 3).unwrap(), PatchCount { dumb: 1, total: 4 });
    }

    #[test]
    fn zero_patch_rejected() {
        assert!(dumb_patch_fraction(&SilhouetteFrame::blank(4, 4), 0).is_err());
    }
}
