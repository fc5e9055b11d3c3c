use std::collections::BTreeMap;

use gaitforge_tensor::Tensor;
use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::augment::AugmentPolicy;
use super::frame::{SilhouetteFrame, SilhouetteSequence, THRESHOLD};
use crate::error::{config, precondition, Result};

pub const DEFAULT_FRAMES: usize = 30;

/// In-memory collection of sequences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<SilhouetteSequence>,
}

impl Dataset {
    pub fn new(sequences: Vec<SilhouetteSequence>) -> Self {
        Dataset { sequences }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Sorted distinct subject identifiers; a subject's label is its index.
    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.sequences.iter().map(|q| q.subject.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    /// Sequence indices grouped by subject label.
    pub fn by_subject(&self) -> Vec<Vec<usize>> {
        let subjects = self.subjects();
        let pos: BTreeMap<&str, usize> = subjects.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut groups = vec![Vec::new(); subjects.len()];
        for (i, q) in self.sequences.iter().enumerate() {
            groups[pos[q.subject.as_str()]].push(i);
        }
        groups
    }

    pub fn filter(&self, keep: impl Fn(&SilhouetteSequence) -> bool) -> Dataset {
        Dataset::new(self.sequences.iter().filter(|s| keep(s)).cloned().collect())
    }

    pub fn normalized(&self) -> Result<Dataset> {
        Ok(Dataset::new(self.sequences.iter().map(|s| s.normalized()).collect::<Result<_>>()?))
    }

    pub fn frame_count(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub q: usize,
    pub k: usize,
    pub frames: usize,
    pub ordered: bool,
}

impl BatchSpec {
    pub fn new(q: usize, k: usize) -> Self {
        BatchSpec { q, k, frames: DEFAULT_FRAMES, ordered: true }
    }

    pub fn clips(&self) -> usize {
        self.q * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.q < 2 || self.k < 2 {
            return config(format!("batch needs q >= 2 and k >= 2, got ({}, {})", self.q, self.k));
        }
        if self.frames == 0 {
            return config("frames per clip must be positive");
        }
        Ok(())
    }
}

/// `clips [q*k, T, 1, H, W]` with values in {0, 1}.
#[derive(Debug, Clone)]
pub struct Batch {
    pub clips: Tensor<f32>,
    pub labels: Vec<usize>,
    pub sequences: Vec<usize>,
    pub frame_indices: Vec<Vec<usize>>,
}

/// Frame indices for one clip of `len` frames.
pub fn select_frames<R: Rng + ?Sized>(len: usize, t: usize, ordered: bool, rng: &mut R) -> Vec<usize> {
    if ordered {
        let start = if len > t { rng.gen_range(0..=len - t) } else { rng.gen_range(0..len) };
        (0..t).map(|i| (start + i) % len).collect()
    } else {
        (0..t).map(|_| rng.gen_range(0..len)).collect()
    }
}

pub fn sample_batch<R: Rng + ?Sized>(dataset: &Dataset, spec: &BatchSpec, rng: &mut R) -> Result<Batch> {
    sample_batch_with(dataset, spec, &AugmentPolicy::none(), rng)
}

/// Draws `q` subjects, `k` distinct sequences of each and `T` frames per
/// sequence, augmenting each clip with one transform.
pub fn sample_batch_with<R: Rng + ?Sized>(
    dataset: &Dataset,
    spec: &BatchSpec,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<Batch> {
    spec.validate()?;
    let groups = dataset.by_subject();
    let eligible: Vec<usize> = (0..groups.len()).filter(|&s| groups[s].len() >= spec.k).collect();
    if eligible.len() < spec.q {
        return precondition(format!(
            "batch needs {} subjects with >= {} sequences, dataset has {}",
            spec.q,
            spec.k,
            eligible.len()
        ));
    }
    let (h, w) = dataset.sequences[groups[eligible[0]][0]].frame_size();
    let plane = h * w;
    let mut data = Vec::with_capacity(spec.clips() * spec.frames * plane);
    let (mut labels, mut sequences, mut frame_indices) = (Vec::new(), Vec::new(), Vec::new());

    for &subject in eligible.choose_multiple(rng, spec.q) {
        let group = &groups[subject];
        for pick in index::sample(rng, group.len(), spec.k) {
            let seq = &dataset.sequences[group[pick]];
            if seq.frame_size() != (h, w) {
                return precondition("batch sequences must share one frame size");
            }
            let idx = select_frames(seq.len(), spec.frames, spec.ordered, rng);
            let rec = (!policy.is_identity()).then(|| policy.draw(h, w, rng));
            for &i in &idx {
                let frame = match &rec {
                    Some(r) => r.apply(&seq.frames[i]),
                    None => seq.frames[i].clone(),
                };
                data.extend(frame.mask.iter().map(|&v| if v >= THRESHOLD { 1.0f32 } else { 0.0 }));
            }
            labels.push(subject);
            sequences.push(group[pick]);
            frame_indices.push(idx);
        }
    }
    let clips = Tensor::new(vec![spec.clips(), spec.frames, 1, h, w], data)?;
    Ok(Batch { clips, labels, sequences, frame_indices })
}

/// Whole-sequence tensor `[1, T, 1, H, W]`.
pub fn sequence_tensor(seq: &SilhouetteSequence) -> Result<Tensor<f32>> {
    let (h, w) = seq.frame_size();
    let data =
        seq.frames.iter().flat_map(|f| f.mask.iter().map(|&v| if v >= THRESHOLD { 1.0f32 } else { 0.0 })).collect();
    Ok(Tensor::new(vec![1, seq.len(), 1, h, w], data)?)
}

/// Uniformly random frame permutation; the result is marked unordered.
pub fn shuffle_frames<R: Rng + ?Sized>(seq: &SilhouetteSequence, rng: &mut R) -> Result<SilhouetteSequence> {
    if seq.len() < 2 {
        return precondition("shuffling needs at least 2 frames");
    }
    let mut frames: Vec<SilhouetteFrame> = seq.frames.clone();
    frames.shuffle(rng);
    let mut out = seq.with_frames(frames);
    out.ordered = false;
    Ok(out)
}
