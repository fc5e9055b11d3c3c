//! Embedding extraction and gallery/probe retrieval metrics.

use std::fmt::Write as _;

use gaitforge_tensor::Tensor;
use rand::Rng;

use crate::data::{sequence_tensor, shuffle_frames, Dataset, SilhouetteSequence};
use crate::error::{precondition, Result};
use crate::model::GaitModel;

/// Frames per batched forward pass during extraction.
pub const EXTRACT_FRAME_BUDGET: usize = 120;

/// Identity of one embedded sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SampleMeta {
    pub subject: String,
    pub condition: String,
    pub view: String,
}

impl SampleMeta {
    pub fn of(seq: &SilhouetteSequence) -> Self {
        SampleMeta { subject: seq.subject.clone(), condition: seq.condition.clone(), view: seq.view.clone() }
    }
}

/// Per-part embeddings `[P, D]` of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PartEmbedding {
    pub meta: SampleMeta,
    pub features: Tensor<f32>,
}

impl PartEmbedding {
    /// Sum over parts of the Euclidean distance between part vectors.
    pub fn distance(&self, other: &PartEmbedding) -> f64 {
        let d = *self.features.shape().last().unwrap_or(&0);
        self.features
            .data()
            .chunks(d.max(1))
            .zip(other.features.data().chunks(d.max(1)))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt())
            .sum()
    }
}

/// Eval-mode embeddings of whole sequences. Sequences of equal length are
/// batched together up to [`EXTRACT_FRAME_BUDGET`] frames.
pub fn extract_embeddings(model: &GaitModel<f32>, sequences: &[SilhouetteSequence]) -> Result<Vec<PartEmbedding>> {
    if let Some(s) = sequences.iter().find(|s| s.is_empty()) {
        return precondition(format!("sequence {}/{}/{} has no frames", s.subject, s.condition, s.view));
    }
    let mut out: Vec<Option<PartEmbedding>> = vec![None; sequences.len()];
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.sort_by_key(|&i| (sequences[i].len(), sequences[i].frame_size(), i));
    let mut start = 0;
    while start < order.len() {
        let first = &sequences[order[start]];
        let per_batch = (EXTRACT_FRAME_BUDGET / first.len()).max(1);
        let mut end = start + 1;
        while end < order.len()
            && end - start < per_batch
            && sequences[order[end]].len() == first.len()
            && sequences[order[end]].frame_size() == first.frame_size()
        {
            end += 1;
        }
        let group = &order[start..end];
        let mut data = Vec::new();
        for &i in group {
            data.extend_from_slice(sequence_tensor(&sequences[i])?.data());
        }
        let (h, w) = first.frame_size();
        let clips = Tensor::new(vec![group.len(), first.len(), 1, h, w], data)?;
        let emb = model.embed(clips)?;
        let (p, d) = (emb.shape()[1], emb.shape()[2]);
        for (j, &i) in group.iter().enumerate() {
            let features = Tensor::new(vec![p, d], emb.data()[j * p * d..(j + 1) * p * d].to_vec())?;
            out[i] = Some(PartEmbedding { meta: SampleMeta::of(&sequences[i]), features });
        }
        start = end;
    }
    Ok(out.into_iter().map(|e| e.expect("every sequence embedded")).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalOptions {
    /// Skip gallery entries recorded from the probe's view.
    pub exclude_identical_view: bool,
    /// Skip gallery entries with the probe's subject, condition and view,
    /// for evaluating a set against itself.
    pub exclude_same_sequence: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    /// 1-based rank of the first correct match per probe; `None` for probes
    /// whose subject has no valid gallery entry.
    pub ranks: Vec<Option<usize>>,
    pub excluded: Vec<SampleMeta>,
    pub options: EvalOptions,
}

impl EvalReport {
    pub fn evaluated(&self) -> usize {
        self.ranks.iter().filter(|r| r.is_some()).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "probes = {}", self.evaluated());
        let _ = writeln!(s, "excluded_probes = {}", self.excluded.len());
        let _ = writeln!(s, "exclude_identical_view = {}", self.options.exclude_identical_view);
        let _ = writeln!(s, "rank1 = {:.4}", self.rank1);
        let _ = writeln!(s, "rank5 = {:.4}", self.rank5);
        let _ = writeln!(s, "rank10 = {:.4}", self.rank10);
        let _ = writeln!(s, "mAP = {:.4}", self.map);
        s
    }
}

/// Ranks the gallery for every probe by summed per-part distance.
pub fn evaluate(gallery: &[PartEmbedding], probes: &[PartEmbedding], options: EvalOptions) -> Result<EvalReport> {
    if gallery.is_empty() {
        return precondition("gallery is empty");
    }
    let mut ranks = Vec::with_capacity(probes.len());
    let mut excluded = Vec::new();
    let (mut hits, mut ap_sum) = ([0usize; 3], 0.0);
    for probe in probes {
        let mut scored: Vec<(f64, usize, bool)> = gallery
            .iter()
            .enumerate()
            .filter(|(_, g)| !(options.exclude_identical_view && g.meta.view == probe.meta.view))
            .filter(|(_, g)| !(options.exclude_same_sequence && g.meta == probe.meta))
            .map(|(i, g)| (probe.distance(g), i, g.meta.subject == probe.meta.subject))
            .collect();
        let relevant = scored.iter().filter(|s| s.2).count();
        if relevant == 0 {
            excluded.push(probe.meta.clone());
            ranks.push(None);
            continue;
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let first = scored.iter().position(|s| s.2).unwrap() + 1;
        for (h, k) in hits.iter_mut().zip([1, 5, 10]) {
            if first <= k {
                *h += 1;
            }
        }
        let (mut found, mut ap) = (0usize, 0.0);
        for (i, s) in scored.iter().enumerate() {
            if s.2 {
                found += 1;
                ap += found as f64 / (i + 1) as f64;
            }
        }
        ap_sum += ap / relevant as f64;
        ranks.push(Some(first));
    }
    let n = ranks.len() - excluded.len();
    if n == 0 {
        return precondition("no probe subject appears in the gallery");
    }
    let frac = |h: usize| h as f64 / n as f64;
    Ok(EvalReport {
        rank1: frac(hits[0]),
        rank5: frac(hits[1]),
        rank10: frac(hits[2]),
        map: ap_sum / n as f64,
        ranks,
        excluded,
        options,
    })
}

/// Splits each subject's sequences by sorted condition: the first `train`
/// conditions, the next `gallery`, and the rest as probes.
pub fn split_by_condition(dataset: &Dataset, train: usize, gallery: usize) -> (Dataset, Dataset, Dataset) {
    let mut parts = (Vec::new(), Vec::new(), Vec::new());
    let subjects = dataset.subjects();
    for subject in &subjects {
        let mut conds: Vec<&str> =
            dataset.sequences.iter().filter(|s| &s.subject == subject).map(|s| s.condition.as_str()).collect();
        conds.sort();
        conds.dedup();
        for seq in dataset.sequences.iter().filter(|s| &s.subject == subject) {
            let rank = conds.iter().position(|c| *c == seq.condition).unwrap();
            let target = if rank < train {
                &mut parts.0
            } else if rank < train + gallery {
                &mut parts.1
            } else {
                &mut parts.2
            };
            target.push(seq.clone());
        }
    }
    (Dataset::new(parts.0), Dataset::new(parts.1), Dataset::new(parts.2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShuffleReport {
    pub intact: EvalReport,
    pub shuffled: EvalReport,
}

impl ShuffleReport {
    /// Rank-1 lost by shuffling the probes.
    pub fn delta(&self) -> f64 {
        self.intact.rank1 - self.shuffled.rank1
    }

    pub fn map_delta(&self) -> f64 {
        self.intact.map - self.shuffled.map
    }

    pub fn to_text(&self) -> String {
        format!(
            "rank1 = {:.4}\nshuffled_rank1 = {:.4}\ndelta = {:.4}\nmAP = {:.4}\nshuffled_mAP = {:.4}\nmAP_delta = {:.4}\n",
            self.intact.rank1,
            self.shuffled.rank1,
            self.delta(),
            self.intact.map,
            self.shuffled.map,
            self.map_delta()
        )
    }
}

/// Evaluates intact probes and per-sequence shuffled copies against the
/// same gallery.
pub fn shuffled_eval<R: Rng + ?Sized>(
    model: &GaitModel<f32>,
    gallery: &Dataset,
    probes: &Dataset,
    options: EvalOptions,
    rng: &mut R,
) -> Result<ShuffleReport> {
    let g = extract_embeddings(model, &gallery.sequences)?;
    let p = extract_embeddings(model, &probes.sequences)?;
    let shuffled = probes.sequences.iter().map(|s| shuffle_frames(s, rng)).collect::<Result<Vec<_>>>()?;
    let ps = extract_embeddings(model, &shuffled)?;
    Ok(ShuffleReport { intact: evaluate(&g, &p, options)?, shuffled: evaluate(&g, &ps, options)? })
}
