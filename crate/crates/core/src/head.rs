//! Temporal pooling, horizontal pooling, separate part FCs with BNNeck, and
//! the triplet + cross-entropy objective.

use std::str::FromStr;
use std::sync::Arc;

use gaitforge_tensor::{BatchStats, Element, Mode, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{config, precondition, GaitError, Result};
use crate::layers::{lecun_normal, BN_EPS, BN_MOMENTUM};
use crate::params::{BufferId, ParamId, ParamStore, Session, StatsUpdate};

pub const EMBED_DIM: usize = 256;
pub const TRIPLET_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HpPooling {
    /// Strip maximum plus strip mean.
    MaxMean,
    Max,
}

impl HpPooling {
    pub fn name(self) -> &'static str {
        match self {
            HpPooling::MaxMean => "max+mean",
            HpPooling::Max => "max",
        }
    }
}

impl FromStr for HpPooling {
    type Err = GaitError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "max+mean" | "maxmean" => Ok(HpPooling::MaxMean),
            "max" => Ok(HpPooling::Max),
            _ => Err(GaitError::Config(format!("unknown pooling '{}'", s))),
        }
    }
}

/// Element-wise maximum over `axis` (the frame axis).
pub fn temporal_pooling<E: Element>(tape: &mut Tape<E>, x: Var, axis: usize) -> Result<Var> {
    if tape.shape(x).get(axis) == Some(&0) {
        return precondition("temporal pooling over zero frames");
    }
    Ok(tape.max_axis(x, axis)?.0)
}

/// `map [N, C, H, W] -> [N, P, C]`, pooling `P` equal-height strips.
pub fn horizontal_pooling<E: Element>(tape: &mut Tape<E>, map: Var, parts: usize, pooling: HpPooling) -> Result<Var> {
    let s = tape.shape(map).to_vec();
    if s.len() != 4 {
        return precondition(format!("horizontal pooling expects [N, C, H, W], got {:?}", s));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if parts == 0 || h % parts != 0 {
        return precondition(format!("height {} not divisible by {} parts", h, parts));
    }
    let strips = tape.reshape(map, vec![n, c, parts, (h / parts) * w])?;
    let mut pooled = tape.max_axis(strips, 3)?.0;
    if pooling == HpPooling::MaxMean {
        let mean = tape.mean_axis(strips, 3)?;
        pooled = tape.add(pooled, mean)?;
    }
    Ok(tape.permute(pooled, &[0, 2, 1])?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub parts: usize,
    pub in_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub pooling: HpPooling,
}

#[derive(Debug, Clone)]
pub struct Head {
    pub config: HeadConfig,
    /// Per part `[embed_dim, in_dim]`.
    pub fc: Vec<ParamId>,
    pub bn_weight: Vec<ParamId>,
    pub bn_bias: Vec<ParamId>,
    pub bn_mean: Vec<BufferId>,
    pub bn_var: Vec<BufferId>,
    /// Per part `[num_classes, embed_dim]`.
    pub cls: Vec<ParamId>,
}

pub struct HeadOutput {
    /// Pre-BN `[N, P, dim]`, used for triplet loss and retrieval.
    pub embeddings: Var,
    /// `[N, P, num_classes]`.
    pub logits: Var,
}

impl Head {
    pub fn build<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        config: HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.parts == 0 || config.in_dim == 0 || config.embed_dim == 0 || config.num_classes == 0 {
            return config_err(&config);
        }
        let (d, c) = (config.embed_dim, config.in_dim);
        let mut head = Head {
            config: config.clone(),
            fc: Vec::new(),
            bn_weight: Vec::new(),
            bn_bias: Vec::new(),
            bn_mean: Vec::new(),
            bn_var: Vec::new(),
            cls: Vec::new(),
        };
        for i in 0..config.parts {
            head.fc.push(store.add_param(format!("head.fc.{i}.weight"), lecun_normal(vec![d, c], c, rng))?);
            head.bn_weight.push(store.add_param(format!("head.bn.{i}.weight"), Tensor::ones(vec![d]))?);
            head.bn_bias.push(store.add_param(format!("head.bn.{i}.bias"), Tensor::zeros(vec![d]))?);
            head.bn_mean.push(store.add_buffer(format!("head.bn.{i}.running_mean"), Tensor::zeros(vec![d]))?);
            head.bn_var.push(store.add_buffer(format!("head.bn.{i}.running_var"), Tensor::ones(vec![d]))?);
        }
        for i in 0..config.parts {
            let k = config.num_classes;
            head.cls.push(store.add_param(format!("head.cls.{i}.weight"), lecun_normal(vec![k, d], d, rng))?);
        }
        Ok(head)
    }

    fn stacked<E: Element>(&self, s: &mut Session<'_, E>, ids: &[ParamId]) -> Result<Var> {
        let vars: Vec<Var> = ids.iter().map(|&id| s.param(id)).collect();
        Ok(s.tape.stack(&vars)?)
    }

    /// `parts [N, P, in_dim]`.
    pub fn forward<E: Element>(&self, s: &mut Session<'_, E>, parts: Var) -> Result<HeadOutput> {
        let sh = s.tape.shape(parts).to_vec();
        let (p, d, k) = (self.config.parts, self.config.embed_dim, self.config.num_classes);
        if sh.len() != 3 || sh[1] != p || sh[2] != self.config.in_dim {
            return precondition(format!("head expects [N, {}, {}], got {:?}", p, self.config.in_dim, sh));
        }
        let n = sh[0];
        let x = s.tape.permute(parts, &[1, 0, 2])?;
        let fc = self.stacked(s, &self.fc)?;
        let emb = s.tape.matmul(x, fc, true)?;
        let embeddings = s.tape.permute(emb, &[1, 0, 2])?;

        let flat = s.tape.reshape(embeddings, vec![n, p * d])?;
        let g = self.stacked(s, &self.bn_weight)?;
        let g = s.tape.reshape(g, vec![p * d])?;
        let b = self.stacked(s, &self.bn_bias)?;
        let b = s.tape.reshape(b, vec![p * d])?;
        let normed = match s.mode {
            Mode::Train => {
                let (y, stats) = s.tape.batch_norm(flat, g, b, Mode::Train, None, BN_EPS)?;
                let stats = stats.expect("train-mode statistics");
                for i in 0..p {
                    let part = BatchStats {
                        mean: stats.mean[i * d..(i + 1) * d].to_vec(),
                        var: stats.var[i * d..(i + 1) * d].to_vec(),
                    };
                    s.push_update(StatsUpdate {
                        mean: self.bn_mean[i],
                        var: self.bn_var[i],
                        stats: part,
                        momentum: BN_MOMENTUM,
                    });
                }
                y
            }
            Mode::Eval => {
                let mut rm = Vec::with_capacity(p * d);
                let mut rv = Vec::with_capacity(p * d);
                for i in 0..p {
                    rm.extend_from_slice(s.buffer(self.bn_mean[i]).data());
                    rv.extend_from_slice(s.buffer(self.bn_var[i]).data());
                }
                s.tape.batch_norm(flat, g, b, Mode::Eval, Some((&rm, &rv)), BN_EPS)?.0
            }
        };
        let normed = s.tape.reshape(normed, vec![n, p, d])?;
        let normed = s.tape.permute(normed, &[1, 0, 2])?;
        let cls = self.stacked(s, &self.cls)?;
        let logits = s.tape.matmul(normed, cls, true)?;
        let logits = s.tape.permute(logits, &[1, 0, 2])?;
        debug_assert_eq!(s.tape.shape(logits), [n, p, k]);
        Ok(HeadOutput { embeddings, logits })
    }
}

fn config_err<T>(c: &HeadConfig) -> Result<T> {
    config(format!("head dimensions must be positive: {:?}", c))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub triplet_margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { triplet_margin: TRIPLET_MARGIN }
    }
}

pub struct TripletOutput {
    pub loss: Var,
    /// Non-zero terms summed over parts.
    pub nonzero: usize,
}

/// `(anchor, positive, negative)` index triples of a labelled batch.
pub fn triplets(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let n = labels.len();
    let mut out = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] != labels[a] {
                    out.push((a, p, q));
                }
            }
        }
    }
    out
}

/// Batch-all triplet loss on `embeddings [N, P, dim]`: per part, the mean of
/// the non-zero hinge terms `max(0, d(a,p) - d(a,n) + margin)`, then the mean
/// over parts.
pub fn triplet_loss<E: Element>(
    tape: &mut Tape<E>,
    embeddings: Var,
    labels: &[usize],
    margin: f64,
) -> Result<TripletOutput> {
    let s = tape.shape(embeddings).to_vec();
    if s.len() != 3 || s[0] != labels.len() {
        return precondition(format!("embeddings {:?} with {} labels", s, labels.len()));
    }
    if margin < 0.0 {
        return config("triplet margin must be non-negative");
    }
    let (n, p) = (s[0], s[1]);
    let trip = triplets(labels);
    if trip.is_empty() {
        return precondition("batch holds no valid triplet");
    }
    let m = trip.len();
    let x = tape.permute(embeddings, &[1, 0, 2])?;
    let d = tape.pairwise_distance(x)?;
    let mut ap = Vec::with_capacity(p * m);
    let mut an = Vec::with_capacity(p * m);
    for part in 0..p {
        for &(a, pos, neg) in &trip {
            ap.push(((part * n + a) * n + pos) as u32);
            an.push(((part * n + a) * n + neg) as u32);
        }
    }
    let dap = tape.gather(d, vec![p, m], Arc::new(ap))?;
    let dan = tape.gather(d, vec![p, m], Arc::new(an))?;
    let diff = tape.sub(dap, dan)?;
    let shifted = tape.add_scalar(diff, margin)?;
    let terms = tape.relu(shifted)?;
    let values = tape.value(terms).data();
    let mut weights = vec![E::zero(); p * m];
    let mut nonzero = 0;
    for part in 0..p {
        let row = &values[part * m..(part + 1) * m];
        let cnt = row.iter().filter(|v| **v > E::zero()).count();
        nonzero += cnt;
        if cnt > 0 {
            let w = E::from_f64_lossy(1.0 / (cnt * p) as f64);
            weights[part * m..(part + 1) * m].iter_mut().for_each(|x| *x = w);
        }
    }
    let w = tape.constant(Tensor::new(vec![p, m], weights)?);
    let weighted = tape.mul(terms, w)?;
    let loss = tape.sum(weighted)?;
    Ok(TripletOutput { loss, nonzero })
}

/// Softmax cross-entropy of `logits [N, P, K]`, averaged over parts and batch.
pub fn cross_entropy_loss<E: Element>(tape: &mut Tape<E>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 3 || s[0] != labels.len() {
        return precondition(format!("logits {:?} with {} labels", s, labels.len()));
    }
    let (n, p, k) = (s[0], s[1], s[2]);
    let flat = tape.reshape(logits, vec![n * p, k])?;
    let rows: Vec<usize> = labels.iter().flat_map(|&l| std::iter::repeat_n(l, p)).collect();
    Ok(tape.cross_entropy(flat, &rows)?)
}

pub struct LossOutput {
    pub total: Var,
    pub triplet: f64,
    pub ce: f64,
    pub nonzero: usize,
}

/// `L = L_triplet + L_ce`.
pub fn combined_loss<E: Element>(
    tape: &mut Tape<E>,
    out: &HeadOutput,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let tri = triplet_loss(tape, out.embeddings, labels, cfg.triplet_margin)?;
    let ce = cross_entropy_loss(tape, out.logits, labels)?;
    let total = tape.add(tri.loss, ce)?;
    Ok(LossOutput {
        triplet: tape.value(tri.loss).item().to_f64_lossy(),
        ce: tape.value(ce).item().to_f64_lossy(),
        total,
        nonzero: tri.nonzero,
    })
}
