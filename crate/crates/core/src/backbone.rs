//! DeepGaitV2 and SwinGait backbones.

use std::fmt;
use std::str::FromStr;

use gaitforge_tensor::{Element, Tape, Var};
use rand::Rng;

use crate::blocks::{BlockKind, BlockSpec, ResBlock};
use crate::config::{join, KeyValues};
use crate::error::{config, precondition, GaitError, Result};
use crate::layers::{Conv, ConvDims, Linear, Norm};
use crate::params::{ParamStore, Session};
use crate::swin::{default_heads, SwinBlock};

pub const INPUT_SIZE: (usize, usize) = (64, 44);
/// Spatial size the stage-2 map is resized to before tokenization.
pub const SWIN_RESIZE: (usize, usize) = (30, 20);
pub const PATCH: usize = 2;
pub const WINDOW_2D: [usize; 3] = [1, 3, 5];
pub const WINDOW_3D: [usize; 3] = [3, 3, 5];

#[allow(non_camel_case_types)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    DeepGaitV2_2D,
    DeepGaitV2_3D,
    DeepGaitV2_P3D,
    SwinGait2D,
    SwinGait3D,
}

impl Family {
    pub const ALL: [Family; 5] =
        [Family::DeepGaitV2_2D, Family::DeepGaitV2_3D, Family::DeepGaitV2_P3D, Family::SwinGait2D, Family::SwinGait3D];

    pub fn name(self) -> &'static str {
        match self {
            Family::DeepGaitV2_2D => "DeepGaitV2-2D",
            Family::DeepGaitV2_3D => "DeepGaitV2-3D",
            Family::DeepGaitV2_P3D => "DeepGaitV2-P3D",
            Family::SwinGait2D => "SwinGait-2D",
            Family::SwinGait3D => "SwinGait-3D",
        }
    }

    pub fn is_swin(self) -> bool {
        matches!(self, Family::SwinGait2D | Family::SwinGait3D)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = GaitError;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| GaitError::Config(format!("unknown family '{}'", s)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConvKind {
    TwoD,
    ThreeD,
    P3D,
}

impl ConvKind {
    pub fn name(self) -> &'static str {
        match self {
            ConvKind::TwoD => "2D",
            ConvKind::ThreeD => "3D",
            ConvKind::P3D => "P3D",
        }
    }

    fn block(self) -> BlockKind {
        match self {
            ConvKind::TwoD => BlockKind::Res2D,
            ConvKind::ThreeD => BlockKind::Res3D,
            ConvKind::P3D => BlockKind::ResP3D,
        }
    }
}

impl FromStr for ConvKind {
    type Err = GaitError;
    fn from_str(s: &str) -> Result<Self> {
        [ConvKind::TwoD, ConvKind::ThreeD, ConvKind::P3D]
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| GaitError::Config(format!("unknown conv kind '{}'", s)))
    }
}

/// `2 * sum(B) + 2`.
pub fn depth_of(blocks: [usize; 4]) -> Result<usize> {
    if blocks.contains(&0) {
        return config(format!("block counts {:?} must all be at least 1", blocks));
    }
    Ok(2 * blocks.iter().sum::<usize>() + 2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub family: Family,
    pub base_channels: usize,
    pub block_counts: [usize; 4],
    /// Kind of stage 2 (and 3, 4 for the conv families). Stage 1 is always 2D.
    /// Only configurable for SwinGait.
    pub swin_conv_kind: Option<ConvKind>,
    pub part_count: usize,
    pub drop_path_rate: f64,
    pub input_size: (usize, usize),
}

impl BackboneConfig {
    pub fn new(family: Family, base_channels: usize, block_counts: [usize; 4]) -> Self {
        let (kind, parts, dpr) = match family {
            Family::SwinGait2D => (Some(ConvKind::TwoD), SWIN_RESIZE.0 / PATCH, 0.1),
            Family::SwinGait3D => (Some(ConvKind::ThreeD), SWIN_RESIZE.0 / PATCH, 0.1),
            _ => (None, INPUT_SIZE.0 / 4, 0.0),
        };
        BackboneConfig {
            family,
            base_channels,
            block_counts,
            swin_conv_kind: kind,
            part_count: parts,
            drop_path_rate: dpr,
            input_size: INPUT_SIZE,
        }
    }

    pub fn conv_kind(&self) -> ConvKind {
        match self.family {
            Family::DeepGaitV2_2D => ConvKind::TwoD,
            Family::DeepGaitV2_3D => ConvKind::ThreeD,
            Family::DeepGaitV2_P3D => ConvKind::P3D,
            Family::SwinGait2D => self.swin_conv_kind.unwrap_or(ConvKind::TwoD),
            Family::SwinGait3D => self.swin_conv_kind.unwrap_or(ConvKind::ThreeD),
        }
    }

    pub fn depth(&self) -> Result<usize> {
        depth_of(self.block_counts)
    }

    /// Channel width of the final features.
    pub fn out_channels(&self) -> usize {
        8 * self.base_channels
    }

    /// Rows available to horizontal pooling.
    pub fn pooled_rows(&self) -> usize {
        if self.family.is_swin() {
            SWIN_RESIZE.0 / PATCH
        } else {
            self.input_size.0 / 4
        }
    }

    pub fn validate(&self) -> Result<()> {
        depth_of(self.block_counts)?;
        if self.base_channels == 0 {
            return config("base_channels must be at least 1");
        }
        match (self.family, self.swin_conv_kind) {
            (Family::SwinGait2D, Some(k)) if k != ConvKind::TwoD => {
                return config("SwinGait-2D keeps set-based 2D conv stages");
            }
            (f, Some(_)) if !f.is_swin() => {
                return config(format!("swin_conv_kind does not apply to {}", f));
            }
            _ => {}
        }
        let (h, w) = self.input_size;
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return config(format!("input size {:?} must be divisible by 4 for two stride-2 stages", self.input_size));
        }
        if self.part_count == 0 || !self.pooled_rows().is_multiple_of(self.part_count) {
            return config(format!("part_count {} must divide {} pooled rows", self.part_count, self.pooled_rows()));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return config(format!("drop_path_rate {} outside [0, 1)", self.drop_path_rate));
        }
        Ok(())
    }

    pub fn write_kv(&self, out: &mut String) {
        out.push_str(&format!("family = {}\n", self.family));
        out.push_str(&format!("base_channels = {}\n", self.base_channels));
        out.push_str(&format!("block_counts = {}\n", join(&self.block_counts)));
        if let Some(k) = self.swin_conv_kind {
            out.push_str(&format!("swin_conv_kind = {}\n", k.name()));
        }
        out.push_str(&format!("part_count = {}\n", self.part_count));
        out.push_str(&format!("drop_path_rate = {}\n", self.drop_path_rate));
    }

    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let family: Family = kv.take("family").ok_or_else(|| GaitError::Config("missing 'family'".into()))?.parse()?;
        let c = kv.take_parsed::<usize>("base_channels")?.unwrap_or(64);
        let b = kv.take_list::<usize>("block_counts")?.unwrap_or_else(|| vec![1, 4, 4, 1]);
        let Ok(blocks) = <[usize; 4]>::try_from(b.as_slice()) else {
            return config(format!("block_counts needs four entries, got {:?}", b));
        };
        let mut cfg = BackboneConfig::new(family, c, blocks);
        if let Some(k) = kv.take("swin_conv_kind") {
            cfg.swin_conv_kind = Some(k.parse()?);
        }
        if let Some(p) = kv.take_parsed("part_count")? {
            cfg.part_count = p;
        }
        if let Some(r) = kv.take_parsed("drop_path_rate")? {
            cfg.drop_path_rate = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Per-sample output shape of every stage for a `t`-frame input:
    /// `[T, C, H, W]` for conv stages, `[T, H, W, D]` for token stages.
    pub fn plan(&self, t: usize) -> Result<Vec<StageShape>> {
        self.validate()?;
        if t == 0 {
            return precondition("sequences need at least one frame");
        }
        let c = self.base_channels;
        let (h, w) = self.input_size;
        let mut out = vec![
            StageShape::new("conv0", [t, c, h, w]),
            StageShape::new("stage1", [t, c, h, w]),
            StageShape::new("stage2", [t, 2 * c, h / 2, w / 2]),
        ];
        if self.family.is_swin() {
            let (gh, gw) = (SWIN_RESIZE.0 / PATCH, SWIN_RESIZE.1 / PATCH);
            out.push(StageShape::new("tokens", [t, gh, gw, 8 * c]));
            out.push(StageShape::new("stage3", [t, gh, gw, 4 * c]));
            out.push(StageShape::new("stage4", [t, gh, gw, 8 * c]));
        } else {
            out.push(StageShape::new("stage3", [t, 4 * c, h / 4, w / 4]));
            out.push(StageShape::new("stage4", [t, 8 * c, h / 4, w / 4]));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageShape {
    pub name: String,
    pub shape: Vec<usize>,
}

impl StageShape {
    pub fn new(name: &str, shape: [usize; 4]) -> Self {
        StageShape { name: name.to_string(), shape: shape.to_vec() }
    }
}

#[derive(Debug, Clone)]
pub struct SwinStage {
    pub embed: Linear,
    pub blocks: Vec<SwinBlock>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub conv0: Conv,
    pub bn0: Norm,
    /// Conv stages in order: four for DeepGaitV2, two for SwinGait.
    pub conv_stages: Vec<Vec<ResBlock>>,
    pub swin_stages: Vec<SwinStage>,
}

pub struct BackboneOutput {
    /// `[N, T, 8C, H/4, W/4]` for conv families, `[N, T, 15, 10, 8C]` for SwinGait.
    pub features: Var,
    pub trace: Vec<StageShape>,
}

fn frames_to_volume<E: Element>(tape: &mut Tape<E>, x: Var, n: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let y = tape.reshape(x, vec![n, s[0] / n, s[1], s[2], s[3]])?;
    Ok(tape.permute(y, &[0, 2, 1, 3, 4])?)
}

fn volume_to_frames<E: Element>(tape: &mut Tape<E>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let y = tape.permute(x, &[0, 2, 1, 3, 4])?;
    Ok(tape.reshape(y, vec![s[0] * s[2], s[1], s[3], s[4]])?)
}

impl Backbone {
    pub fn build<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        config: BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let conv0 = Conv::build(store, "conv0.0.conv", ConvDims::Two, 1, c, [1, 3, 3], [1, 1, 1], rng)?;
        let bn0 = Norm::build(store, "conv0.0.bn", c)?;
        let widths = [c, 2 * c, 4 * c, 8 * c];
        let strides = [1, 2, 2, 1];
        let n_conv = if config.family.is_swin() { 2 } else { 4 };
        let mut conv_stages = Vec::new();
        let mut cin = c;
        for si in 0..n_conv {
            let kind = if si == 0 { BlockKind::Res2D } else { config.conv_kind().block() };
            let mut blocks = Vec::new();
            for bi in 0..config.block_counts[si] {
                let stride = if bi == 0 { strides[si] } else { 1 };
                let spec = BlockSpec::residual(kind, cin, widths[si], stride);
                blocks.push(ResBlock::build(store, &format!("stage{}.{}", si + 1, bi), spec, rng)?);
                cin = widths[si];
            }
            conv_stages.push(blocks);
        }
        let mut swin_stages = Vec::new();
        if config.family.is_swin() {
            let (kind, window) = match config.family {
                Family::SwinGait2D => (BlockKind::Swin2D, WINDOW_2D),
                _ => (BlockKind::Swin3D, WINDOW_3D),
            };
            let total = config.block_counts[2] + config.block_counts[3];
            let mut seen = 0;
            let mut din = 2 * c * PATCH * PATCH;
            for (si, &d) in widths.iter().enumerate().skip(2) {
                let embed = Linear::build(store, &format!("embed{}.0", si + 1), din, d, true, rng)?;
                let mut blocks = Vec::new();
                for bi in 0..config.block_counts[si] {
                    let rate = if total > 1 { config.drop_path_rate * seen as f64 / (total - 1) as f64 } else { 0.0 };
                    let spec = BlockSpec {
                        kind,
                        in_channels: d,
                        out_channels: d,
                        stride: 1,
                        window,
                        shifted: bi % 2 == 1,
                        heads: default_heads(d),
                        drop_path_rate: rate,
                    };
                    blocks.push(SwinBlock::build(store, &format!("stage{}.{}", si + 1, bi), spec, rng)?);
                    seen += 1;
                }
                swin_stages.push(SwinStage { embed, blocks });
                din = d;
            }
        }
        Ok(Backbone { config, conv0, bn0, conv_stages, swin_stages })
    }

    /// `x [N, T, 1, H, W]`.
    pub fn forward<E: Element>(&self, s: &mut Session<'_, E>, x: Var) -> Result<BackboneOutput> {
        let shape = s.tape.shape(x).to_vec();
        let (h, w) = self.config.input_size;
        if shape.len() != 5 || shape[2] != 1 || shape[3] != h || shape[4] != w {
            return precondition(format!("expected input [N, T, 1, {}, {}], got {:?}", h, w, shape));
        }
        let (n, t) = (shape[0], shape[1]);
        if n == 0 || t == 0 {
            return precondition("empty batch or sequence");
        }
        let mut trace = Vec::new();
        let per_frame = |tape: &Tape<E>, v: Var| {
            let s = tape.shape(v);
            vec![t, s[1], s[2], s[3]]
        };
        let per_volume = |tape: &Tape<E>, v: Var| {
            let s = tape.shape(v);
            vec![t, s[1], s[3], s[4]]
        };

        let mut y = s.tape.reshape(x, vec![n * t, 1, h, w])?;
        y = self.conv0.forward(s, y)?;
        y = self.bn0.forward(s, y)?;
        y = s.tape.relu(y)?;
        trace.push(StageShape { name: "conv0".into(), shape: per_frame(s.tape, y) });

        let mut volume = false;
        for (si, blocks) in self.conv_stages.iter().enumerate() {
            let wants_volume = blocks.first().is_some_and(|b| b.spec.kind != BlockKind::Res2D);
            if wants_volume && !volume {
                y = frames_to_volume(s.tape, y, n)?;
                volume = true;
            }
            for b in blocks {
                y = b.forward(s, y)?;
            }
            let shape = if volume { per_volume(s.tape, y) } else { per_frame(s.tape, y) };
            trace.push(StageShape { name: format!("stage{}", si + 1), shape });
        }
        if volume {
            y = volume_to_frames(s.tape, y)?;
        }

        if self.swin_stages.is_empty() {
            let fs = s.tape.shape(y).to_vec();
            let features = s.tape.reshape(y, vec![n, t, fs[1], fs[2], fs[3]])?;
            return Ok(BackboneOutput { features, trace });
        }

        let c2 = s.tape.shape(y)[1];
        let (rh, rw) = SWIN_RESIZE;
        let (gh, gw) = (rh / PATCH, rw / PATCH);
        y = s.tape.bilinear_resize(y, SWIN_RESIZE)?;
        y = s.tape.reshape(y, vec![n * t, c2, gh, PATCH, gw, PATCH])?;
        y = s.tape.permute(y, &[0, 2, 4, 1, 3, 5])?;
        y = s.tape.reshape(y, vec![n, t, gh, gw, c2 * PATCH * PATCH])?;
        trace.push(StageShape { name: "tokens".into(), shape: s.tape.shape(y)[1..].to_vec() });
        for (si, stage) in self.swin_stages.iter().enumerate() {
            y = stage.embed.forward(s, y)?;
            for b in &stage.blocks {
                y = b.forward(s, y)?;
            }
            trace.push(StageShape { name: format!("stage{}", si + 3), shape: s.tape.shape(y)[1..].to_vec() });
        }
        Ok(BackboneOutput { features: y, trace })
    }

    /// Multiply-accumulates per input frame counting convolutions, linear
    /// maps and attention products; `t` only matters for 3D windows.
    pub fn count_macs(&self, t: usize) -> Result<u64> {
        let mut hw = self.config.input_size;
        let mut total = self.conv0.macs(hw);
        for blocks in &self.conv_stages {
            for b in blocks {
                total += b.macs(hw);
                hw = b.out_hw(hw);
            }
        }
        let grid = [t.max(1), SWIN_RESIZE.0 / PATCH, SWIN_RESIZE.1 / PATCH];
        let tokens = (grid[1] * grid[2]) as u64;
        for stage in &self.swin_stages {
            total += tokens * (stage.embed.din * stage.embed.dout) as u64;
            for b in &stage.blocks {
                total += b.macs(grid)?;
            }
        }
        Ok(total)
    }
}
