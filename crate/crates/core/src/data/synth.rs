//! Procedural stick-figure walkers.
//!
//! A walker is rendered on a treadmill: the pose depends only on the cycle
//! position `u = frac(f * t + phase / 2pi)`, quantized to 1/65536, so two
//! frames with equal `u` and equal nuisance draw are identical.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::frame::{SilhouetteFrame, SilhouetteSequence, FOREGROUND};
use super::sampler::Dataset;
use crate::error::{config, Result};

pub const RAW_SIZE: usize = 64;
const PHASE_STEPS: f64 = 65536.0;

/// Body and gait parameters. Lengths are fractions of standing height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WalkerIdentity {
    pub thigh: f64,
    pub shin: f64,
    pub torso: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub head_radius: f64,
    pub torso_width: f64,
    pub limb_width: f64,
    /// Forward torso lean in radians.
    pub lean: f64,
    /// Gait cycles per frame.
    pub frequency: f64,
    /// Peak hip swing in radians.
    pub stride: f64,
    /// Cycle offset in radians.
    pub phase: f64,
    /// 0 is a side view; positive angles turn the walker towards the camera.
    pub view_deg: f64,
}

struct Range {
    name: &'static str,
    lo: f64,
    hi: f64,
}

const RANGES: [Range; 13] = [
    Range { name: "thigh", lo: 0.20, hi: 0.30 },
    Range { name: "shin", lo: 0.20, hi: 0.30 },
    Range { name: "torso", lo: 0.24, hi: 0.36 },
    Range { name: "upper_arm", lo: 0.12, hi: 0.20 },
    Range { name: "forearm", lo: 0.10, hi: 0.18 },
    Range { name: "head_radius", lo: 0.05, hi: 0.08 },
    Range { name: "torso_width", lo: 0.08, hi: 0.18 },
    Range { name: "limb_width", lo: 0.04, hi: 0.09 },
    Range { name: "lean", lo: 0.0, hi: 0.2 },
    Range { name: "frequency", lo: 0.03, hi: 0.15 },
    Range { name: "stride", lo: 0.2, hi: 0.7 },
    Range { name: "phase", lo: 0.0, hi: TAU },
    Range { name: "view_deg", lo: -80.0, hi: 80.0 },
];

impl Default for WalkerIdentity {
    fn default() -> Self {
        WalkerIdentity {
            thigh: 0.25,
            shin: 0.24,
            torso: 0.30,
            upper_arm: 0.16,
            forearm: 0.14,
            head_radius: 0.065,
            torso_width: 0.13,
            limb_width: 0.065,
            lean: 0.06,
            frequency: 0.0625,
            stride: 0.42,
            phase: 0.0,
            view_deg: 0.0,
        }
    }
}

impl WalkerIdentity {
    fn fields(&self) -> [f64; 13] {
        [
            self.thigh,
            self.shin,
            self.torso,
            self.upper_arm,
            self.forearm,
            self.head_radius,
            self.torso_width,
            self.limb_width,
            self.lean,
            self.frequency,
            self.stride,
            self.phase,
            self.view_deg,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (v, r) in self.fields().iter().zip(&RANGES) {
            if !(r.lo..=r.hi).contains(v) {
                return config(format!("walker {} = {} outside [{}, {}]", r.name, v, r.lo, r.hi));
            }
        }
        Ok(())
    }

    /// Random body shape and gait inside the central part of each range.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut pick = |r: &Range| {
            let span = r.hi - r.lo;
            rng.gen_range(r.lo + 0.1 * span..=r.hi - 0.1 * span)
        };
        let v: Vec<f64> = RANGES.iter().map(&mut pick).collect();
        WalkerIdentity {
            thigh: v[0],
            shin: v[1],
            torso: v[2],
            upper_arm: v[3],
            forearm: v[4],
            head_radius: v[5],
            torso_width: v[6],
            limb_width: v[7],
            lean: v[8],
            frequency: v[9],
            stride: v[10],
            phase: rng.gen_range(0.0..TAU),
            view_deg: 0.0,
        }
    }

    /// Quantized cycle position of frame `t`, in [0, 1).
    pub fn cycle_position(&self, t: usize) -> f64 {
        let u = self.frequency * t as f64 + self.phase / TAU;
        let q = (u.rem_euclid(1.0) * PHASE_STEPS).round() % PHASE_STEPS;
        q / PHASE_STEPS
    }
}

/// Per-sequence recording conditions drawn from the seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nuisance {
    /// Standing height in pixels.
    pub scale: f64,
    pub offset_x: f64,
    pub ground_y: f64,
    pub view_jitter_deg: f64,
}

impl Nuisance {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Nuisance {
            scale: rng.gen_range(44.0..52.0),
            offset_x: rng.gen_range(-6.0..6.0),
            ground_y: rng.gen_range(58.0..62.0),
            view_jitter_deg: rng.gen_range(-3.0..3.0),
        }
    }
}

#[derive(Clone, Copy)]
struct P3 {
    x: f64,
    y: f64,
    z: f64,
}

impl P3 {
    fn new(x: f64, y: f64, z: f64) -> Self {
        P3 { x, y, z }
    }

    fn along(self, len: f64, angle: f64) -> P3 {
        // `angle` is measured from straight down towards walking direction.
        P3 { x: self.x + len * angle.sin(), y: self.y - len * angle.cos(), z: self.z }
    }
}

struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    r: f64,
}

impl Capsule {
    fn contains(&self, p: (f64, f64)) -> bool {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 { (((p.0 - self.a.0) * dx + (p.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let (cx, cy) = (self.a.0 + t * dx - p.0, self.a.1 + t * dy - p.1);
        cx * cx + cy * cy <= self.r * self.r
    }
}

/// Renders the pose at cycle position `u` to a binary 64x64 frame.
pub fn render_pose(id: &WalkerIdentity, u: f64, nuisance: &Nuisance) -> SilhouetteFrame {
    let theta = TAU * u;
    let view = (id.view_deg + nuisance.view_jitter_deg).to_radians();
    let leg = id.thigh + id.shin;
    let hip_half = 0.35 * id.torso_width;
    let shoulder_half = 0.5 * id.torso_width;

    let mut segments: Vec<(P3, P3, f64)> = Vec::new();
    let mut ankles = Vec::new();
    let hip_c = P3::new(0.0, leg, 0.0);
    for (side, offset) in [(-1.0, 0.0), (1.0, PI)] {
        let a = id.stride * (theta + offset).sin();
        let swing = (theta + offset).cos().max(0.0);
        let knee_flex = 1.1 * id.stride * swing + 0.05;
        let hip = P3::new(0.0, leg, side * hip_half);
        let knee = hip.along(id.thigh, a);
        let ankle = knee.along(id.shin, a - knee_flex);
        let toe = P3::new(ankle.x + 0.07, ankle.y, ankle.z);
        ankles.push(ankle.y);
        segments.push((hip, knee, id.limb_width / 2.0));
        segments.push((knee, ankle, id.limb_width / 2.2));
        segments.push((ankle, toe, id.limb_width / 2.5));
    }
    let shoulder_c = P3::new(hip_c.x + id.torso * id.lean.sin(), hip_c.y + id.torso * id.lean.cos(), 0.0);
    for (side, offset) in [(-1.0, PI), (1.0, 0.0)] {
        let b = 0.6 * id.stride * (theta + offset).sin();
        let elbow_flex = 0.3 + 0.15 * (1.0 + (theta + offset).sin());
        let shoulder = P3::new(shoulder_c.x, shoulder_c.y - 0.02, side * shoulder_half);
        let elbow = shoulder.along(id.upper_arm, b);
        let wrist = elbow.along(id.forearm, b + elbow_flex);
        segments.push((shoulder, elbow, id.limb_width / 2.4));
        segments.push((elbow, wrist, id.limb_width / 2.8));
    }
    let ground = ankles.iter().cloned().fold(f64::INFINITY, f64::min) - id.limb_width / 2.5;

    // The torso's projected width blends its side depth and frontal width.
    let depth = 0.6 * id.torso_width;
    let torso_r = 0.5 * (depth * view.cos().abs() + id.torso_width * view.sin().abs());
    let head_c = P3::new(shoulder_c.x, shoulder_c.y + 0.03 + id.head_radius, 0.0);

    let standing = leg + id.torso * id.lean.cos() + 0.03 + 2.0 * id.head_radius;
    let s = nuisance.scale / standing;
    let cx = RAW_SIZE as f64 / 2.0 + nuisance.offset_x;
    let project = |p: P3| (cx + s * (p.x * view.cos() + p.z * view.sin()), nuisance.ground_y - s * (p.y - ground));
    let mut capsules: Vec<Capsule> =
        segments.iter().map(|&(a, b, r)| Capsule { a: project(a), b: project(b), r: (s * r).max(0.7) }).collect();
    capsules.push(Capsule { a: project(hip_c), b: project(shoulder_c), r: s * torso_r });
    let head = project(head_c);
    capsules.push(Capsule { a: head, b: head, r: s * id.head_radius });

    SilhouetteFrame::from_fn(RAW_SIZE, RAW_SIZE, |y, x| {
        let p = (x as f64 + 0.5, y as f64 + 0.5);
        if capsules.iter().any(|c| c.contains(p)) {
            FOREGROUND
        } else {
            0
        }
    })
}

/// `t` raw 64x64 frames; deterministic in `(identity, seed)`.
pub fn synth_walker_raw(id: &WalkerIdentity, t: usize, seed: u64) -> Result<SilhouetteSequence> {
    id.validate()?;
    let nuisance = Nuisance::from_seed(seed);
    let frames = (0..t).map(|i| render_pose(id, id.cycle_position(i), &nuisance)).collect();
    SilhouetteSequence::new(frames, "walker", "synthetic", &format!("{:03}", id.view_deg.round() as i64))
}

/// `t` frames normalized to 64x44.
pub fn synth_walker(id: &WalkerIdentity, t: usize, seed: u64) -> Result<SilhouetteSequence> {
    synth_walker_raw(id, t, seed)?.normalized()
}

/// Which cue separates the corpus identities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusVariant {
    /// Body shape and gait both vary.
    Full,
    /// One body shape and stride; identities differ only in frequency.
    MotionOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub subjects: usize,
    pub sequences: usize,
    pub views_deg: Vec<f64>,
    pub frames: usize,
    pub seed: u64,
    pub variant: CorpusVariant,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            subjects: 40,
            sequences: 8,
            views_deg: vec![0.0, 30.0],
            frames: 30,
            seed: 2023,
            variant: CorpusVariant::Full,
        }
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d1_049b_133a_111b);
    z ^ (z >> 31)
}

pub fn subject_name(i: usize) -> String {
    format!("{:03}", i)
}

pub fn condition_name(i: usize) -> String {
    format!("nm-{:02}", i + 1)
}

pub fn view_name(deg: f64) -> String {
    format!("{:03}", deg.round() as i64)
}

/// Identities of a corpus, one per subject.
pub fn corpus_identities(cfg: &CorpusConfig) -> Vec<WalkerIdentity> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed));
    match cfg.variant {
        CorpusVariant::Full => (0..cfg.subjects).map(|_| WalkerIdentity::random(&mut rng)).collect(),
        CorpusVariant::MotionOnly => {
            let base = WalkerIdentity::default();
            let (lo, hi) = (0.04, 0.13);
            (0..cfg.subjects)
                .map(|i| {
                    let f = if cfg.subjects > 1 { lo + (hi - lo) * i as f64 / (cfg.subjects - 1) as f64 } else { lo };
                    WalkerIdentity { frequency: f, ..base }
                })
                .collect()
        }
    }
}

/// Raw 64x64 corpus. Each sequence draws its own start phase, recording
/// nuisance and a small jitter of stride and frequency.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Dataset> {
    if cfg.subjects == 0 || cfg.sequences == 0 || cfg.frames == 0 || cfg.views_deg.is_empty() {
        return config("corpus needs at least one subject, sequence, view and frame");
    }
    let ids = corpus_identities(cfg);
    let mut sequences = Vec::with_capacity(cfg.subjects * cfg.sequences * cfg.views_deg.len());
    for (si, base) in ids.iter().enumerate() {
        for q in 0..cfg.sequences {
            for (vi, &view) in cfg.views_deg.iter().enumerate() {
                let seed = mix(cfg.seed ^ mix(((si as u64) << 32) | ((q as u64) << 8) | vi as u64));
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let id = WalkerIdentity {
                    phase: rng.gen_range(0.0..TAU),
                    stride: base.stride * rng.gen_range(0.96..1.04),
                    frequency: base.frequency * rng.gen_range(0.985..1.015),
                    view_deg: view,
                    ..*base
                };
                let mut seq = synth_walker_raw(&id, cfg.frames, rng.gen())?;
                seq.subject = subject_name(si);
                seq.condition = condition_name(q);
                seq.view = view_name(view);
                sequences.push(seq);
            }
        }
    }
    Ok(Dataset::new(sequences))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_identity_is_valid() {
        WalkerIdentity::default().validate().unwrap();
    }

    #[test]
    fn out_of_range_rejected() {
        let id = WalkerIdentity { stride: 2.0, ..WalkerIdentity::default() };
        assert!(synth_walker(&id, 3, 0).is_err());
    }

    #[test]
    fn random_identities_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            WalkerIdentity::random(&mut rng).validate().unwrap();
        }
    }

    #[test]
    fn frames_have_foreground() {
        let seq = synth_walker_raw(&WalkerIdentity::default(), 16, 1).unwrap();
        for f in &seq.frames {
            assert!(f.foreground_count() > 100);
            let (top, bottom, ..) = f.bounding_box().unwrap();
            assert!(top > 0 && bottom < RAW_SIZE - 1);
        }
    }
}
