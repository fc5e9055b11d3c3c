//! Residual convolution units and stochastic depth.

use gaitforge_tensor::{Element, Mode, Tensor, Var};
use rand::Rng;

use crate::error::{config, precondition, Result};
use crate::layers::{Conv, ConvDims, Norm};
use crate::params::{ParamStore, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Res2D,
    Res3D,
    ResP3D,
    Swin2D,
    Swin3D,
}

impl BlockKind {
    pub fn is_swin(self) -> bool {
        matches!(self, BlockKind::Swin2D | BlockKind::Swin3D)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Spatial stride; temporal stride is always 1.
    pub stride: usize,
    /// `(t, h, w)` window for Swin kinds.
    pub window: [usize; 3],
    pub shifted: bool,
    pub heads: usize,
    pub drop_path_rate: f64,
}

impl BlockSpec {
    pub fn residual(kind: BlockKind, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        BlockSpec {
            kind,
            in_channels,
            out_channels,
            stride,
            window: [1, 1, 1],
            shifted: false,
            heads: 1,
            drop_path_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return config("block channel counts must be positive");
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return config(format!("drop path rate {} outside [0, 1)", self.drop_path_rate));
        }
        if self.kind.is_swin() {
            if self.stride != 1 {
                return config("Swin blocks do not downsample");
            }
            if self.window.contains(&0) {
                return config("window extents must be at least 1");
            }
            if self.heads == 0 || !self.out_channels.is_multiple_of(self.heads) {
                return config(format!("{} channels not divisible by {} heads", self.out_channels, self.heads));
            }
            if self.in_channels != self.out_channels {
                return config("Swin blocks preserve the channel count");
            }
        } else if self.stride != 1 && self.stride != 2 {
            return config(format!("stride {} not in {{1, 2}}", self.stride));
        }
        Ok(())
    }
}

/// Zeroes the residual branch per sample with probability `rate` and scales
/// survivors by `1 / (1 - rate)` in train mode; identity otherwise. Axis 0 is
/// the sample axis.
pub fn drop_path<E: Element, R: Rng + ?Sized>(
    tape: &mut gaitforge_tensor::Tape<E>,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return precondition(format!("drop path rate {} outside [0, 1)", rate));
    }
    if rate == 0.0 || mode == Mode::Eval {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let n = shape[0];
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<E> =
        (0..n).map(|_| if rng.gen::<f64>() < rate { E::zero() } else { E::from_f64_lossy(keep) }).collect();
    let mut mshape = vec![1; shape.len()];
    mshape[0] = n;
    let m = tape.constant(Tensor::new(mshape, mask)?);
    Ok(tape.mul(x, m)?)
}

/// One residual unit of the convolutional families.
///
/// * `Res2D`: 3x3 conv pair on `[N*T, C, H, W]`.
/// * `Res3D`: 3x3x3 conv pair on `[N, C, T, H, W]`.
/// * `ResP3D`: 1x3x3 conv, 3x1x1 temporal conv, 1x3x3 conv on `[N, C, T, H, W]`.
///
/// Every conv is followed by batch norm; ReLU follows all but the last, and
/// the sum with the shortcut.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub spec: BlockSpec,
    pub conv1: Conv,
    pub bn1: Norm,
    pub temporal: Option<(Conv, Norm)>,
    pub conv2: Conv,
    pub bn2: Norm,
    pub shortcut: Option<(Conv, Norm)>,
}

impl ResBlock {
    pub fn build<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        prefix: &str,
        spec: BlockSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let (dims, k) = match spec.kind {
            BlockKind::Res2D => (ConvDims::Two, [1, 3, 3]),
            BlockKind::Res3D => (ConvDims::Three, [3, 3, 3]),
            BlockKind::ResP3D => (ConvDims::Three, [1, 3, 3]),
            _ => return config("ResBlock requires a convolution kind"),
        };
        let (cin, cout, s) = (spec.in_channels, spec.out_channels, spec.stride);
        let conv1 = Conv::build(store, &format!("{prefix}.conv1"), dims, cin, cout, k, [1, s, s], rng)?;
        let bn1 = Norm::build(store, &format!("{prefix}.bn1"), cout)?;
        let temporal = if spec.kind == BlockKind::ResP3D {
            let c = Conv::build(store, &format!("{prefix}.tconv"), dims, cout, cout, [3, 1, 1], [1, 1, 1], rng)?;
            Some((c, Norm::build(store, &format!("{prefix}.tbn"), cout)?))
        } else {
            None
        };
        let conv2 = Conv::build(store, &format!("{prefix}.conv2"), dims, cout, cout, k, [1, 1, 1], rng)?;
        let bn2 = Norm::build(store, &format!("{prefix}.bn2"), cout)?;
        let shortcut = if cin != cout || s != 1 {
            let c = Conv::build(store, &format!("{prefix}.shortcut.conv"), dims, cin, cout, [1, 1, 1], [1, s, s], rng)?;
            Some((c, Norm::build(store, &format!("{prefix}.shortcut.bn"), cout)?))
        } else {
            None
        };
        Ok(ResBlock { spec, conv1, bn1, temporal, conv2, bn2, shortcut })
    }

    pub fn forward<E: Element>(&self, s: &mut Session<'_, E>, x: Var) -> Result<Var> {
        let want = if self.spec.kind == BlockKind::Res2D { 4 } else { 5 };
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != want || shape[1] != self.spec.in_channels {
            return precondition(format!(
                "{:?} block expects rank {} with {} channels, got {:?}",
                self.spec.kind, want, self.spec.in_channels, shape
            ));
        }
        let mut y = self.conv1.forward(s, x)?;
        y = self.bn1.forward(s, y)?;
        y = s.tape.relu(y)?;
        if let Some((conv, bn)) = &self.temporal {
            y = conv.forward(s, y)?;
            y = bn.forward(s, y)?;
            y = s.tape.relu(y)?;
        }
        y = self.conv2.forward(s, y)?;
        y = self.bn2.forward(s, y)?;
        let short = match &self.shortcut {
            Some((conv, bn)) => {
                let z = conv.forward(s, x)?;
                bn.forward(s, z)?
            }
            None => x,
        };
        let sum = s.tape.add(y, short)?;
        Ok(s.tape.relu(sum)?)
    }

    pub fn out_hw(&self, hw: (usize, usize)) -> (usize, usize) {
        self.conv1.out_hw(hw)
    }

    /// Multiply-accumulates per frame for input extent `hw`.
    pub fn macs(&self, hw: (usize, usize)) -> u64 {
        let out = self.out_hw(hw);
        let mut total = self.conv1.macs(hw) + self.conv2.macs(out);
        if let Some((c, _)) = &self.temporal {
            total += c.macs(out);
        }
        if let Some((c, _)) = &self.shortcut {
            total += c.macs(hw);
        }
        total
    }
}
