//! Window attention and the 2D/3D Swin blocks.

use std::sync::Arc;

use gaitforge_tensor::{Element, Tensor, Var};
use rand::Rng;

use crate::blocks::{drop_path, BlockKind, BlockSpec};
use crate::error::{precondition, Result};
use crate::layers::{LayerNorm, Linear};
use crate::params::{ParamId, ParamStore, Session};
use crate::window::{bias_table_len, window_partition, window_reverse, WindowPlan};

pub const MLP_RATIO: usize = 4;

/// Default head count for width `dim`: one head per 32 channels.
pub fn default_heads(dim: usize) -> usize {
    (dim / 32).max(1)
}

#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    /// `[table_len, heads]`.
    pub rel_bias: ParamId,
    pub heads: usize,
    pub window: [usize; 3],
}

impl WindowAttention {
    pub fn build<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        prefix: &str,
        dim: usize,
        heads: usize,
        window: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        let qkv = Linear::build(store, &format!("{prefix}.qkv"), dim, 3 * dim, true, rng)?;
        let proj = Linear::build(store, &format!("{prefix}.proj"), dim, dim, true, rng)?;
        let table = Tensor::randn(vec![bias_table_len(window), heads], 0.02, rng);
        let rel_bias = store.add_param(format!("{prefix}.rel_bias"), table)?;
        Ok(WindowAttention { qkv, proj, rel_bias, heads, window })
    }

    /// Softmax attention weights `[N * nW, heads, L, L]` and the values
    /// `[N * nW, heads, L, D / heads]` for `windows [N * nW, L, D]`, with an
    /// optional additive mask `[nW, L, L]`.
    pub fn attention<E: Element>(
        &self,
        s: &mut Session<'_, E>,
        windows: Var,
        plan: &WindowPlan,
        mask: Option<&Tensor<E>>,
    ) -> Result<(Var, Var)> {
        let shape = s.tape.shape(windows).to_vec();
        let (bw, l, d) = (shape[0], shape[1], shape[2]);
        let h = self.heads;
        if d % h != 0 {
            return precondition(format!("width {} not divisible by {} heads", d, h));
        }
        let dh = d / h;
        let nw = plan.num_windows();
        if let Some(m) = mask {
            if m.shape() != [nw, l, l] || bw % nw != 0 {
                return precondition(format!("mask {:?} does not match windows {:?}", m.shape(), shape));
            }
        }
        let qkv = self.qkv.forward(s, windows)?;
        let qkv = s.tape.reshape(qkv, vec![bw, l, 3, h, dh])?;
        let qkv = s.tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let p = s.tape.narrow(qkv, 0, i, 1)?;
            parts.push(s.tape.reshape(p, vec![bw, h, l, dh])?);
        }
        let scores = s.tape.matmul(parts[0], parts[1], true)?;
        let mut scores = s.tape.scale(scores, 1.0 / (dh as f64).sqrt())?;

        let rel = plan.relative_index();
        let index: Vec<u32> = (0..h).flat_map(|head| rel.iter().map(move |&r| (r * h + head) as u32)).collect();
        let table = s.param(self.rel_bias);
        let bias = s.tape.gather(table, vec![h, l, l], Arc::new(index))?;
        scores = s.tape.add(scores, bias)?;

        if let Some(m) = mask {
            let mv = s.tape.constant(m.reshape(vec![nw, 1, l, l])?);
            let grouped = s.tape.reshape(scores, vec![bw / nw, nw, h, l, l])?;
            let masked = s.tape.add(grouped, mv)?;
            scores = s.tape.reshape(masked, vec![bw, h, l, l])?;
        }
        Ok((s.tape.softmax(scores, 3)?, parts[2]))
    }

    /// `windows [N * nW, L, D] -> [N * nW, L, D]`.
    pub fn forward<E: Element>(
        &self,
        s: &mut Session<'_, E>,
        windows: Var,
        plan: &WindowPlan,
        mask: Option<&Tensor<E>>,
    ) -> Result<Var> {
        let shape = s.tape.shape(windows).to_vec();
        let (attn, values) = self.attention(s, windows, plan, mask)?;
        let out = s.tape.matmul(attn, values, false)?;
        let out = s.tape.permute(out, &[0, 2, 1, 3])?;
        let out = s.tape.reshape(out, shape)?;
        self.proj.forward(s, out)
    }

    pub fn macs(&self, tokens: usize, window_len: usize) -> u64 {
        let d = self.qkv.din as u64;
        let t = tokens as u64;
        4 * t * d * d + 2 * t * window_len as u64 * d
    }
}

/// Pre-norm Swin block on `[N, T, H, W, D]`. `Swin2D` windows never span
/// frames; `Swin3D` windows do.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub spec: BlockSpec,
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SwinBlock {
    pub fn build<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        prefix: &str,
        spec: BlockSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        if !spec.kind.is_swin() {
            return precondition("SwinBlock requires a Swin kind");
        }
        if spec.kind == BlockKind::Swin2D && spec.window[0] != 1 {
            return precondition("Swin2D windows must have temporal extent 1");
        }
        let d = spec.out_channels;
        Ok(SwinBlock {
            norm1: LayerNorm::build(store, &format!("{prefix}.norm1"), d)?,
            attn: WindowAttention::build(store, &format!("{prefix}.attn"), d, spec.heads, spec.window, rng)?,
            norm2: LayerNorm::build(store, &format!("{prefix}.norm2"), d)?,
            fc1: Linear::build(store, &format!("{prefix}.mlp.fc1"), d, MLP_RATIO * d, true, rng)?,
            fc2: Linear::build(store, &format!("{prefix}.mlp.fc2"), MLP_RATIO * d, d, true, rng)?,
            spec,
        })
    }

    pub fn shift(&self) -> [usize; 3] {
        if self.spec.shifted {
            self.spec.window.map(|w| w / 2)
        } else {
            [0, 0, 0]
        }
    }

    pub fn plan(&self, grid: [usize; 3]) -> Result<WindowPlan> {
        WindowPlan::new(grid, self.spec.window, self.shift())
    }

    pub fn forward<E: Element>(&self, s: &mut Session<'_, E>, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x).to_vec();
        if shape.len() != 5 || shape[4] != self.spec.out_channels {
            return precondition(format!(
                "Swin block expects [N, T, H, W, {}], got {:?}",
                self.spec.out_channels, shape
            ));
        }
        let n = shape[0];
        let plan = self.plan([shape[1], shape[2], shape[3]])?;
        let mask = plan.mask::<E>();

        let h = self.norm1.forward(s, x)?;
        let win = window_partition(s.tape, h, &plan)?;
        let win = self.attn.forward(s, win, &plan, mask.as_ref())?;
        let h = window_reverse(s.tape, win, &plan, n)?;
        let mode = s.mode;
        let h = drop_path(s.tape, h, self.spec.drop_path_rate, mode, &mut s.rng)?;
        let x = s.tape.add(x, h)?;

        let h = self.norm2.forward(s, x)?;
        let h = self.fc1.forward(s, h)?;
        let h = s.tape.gelu(h)?;
        let h = self.fc2.forward(s, h)?;
        let h = drop_path(s.tape, h, self.spec.drop_path_rate, mode, &mut s.rng)?;
        Ok(s.tape.add(x, h)?)
    }

    /// Multiply-accumulates per frame for a `grid` of tokens.
    pub fn macs(&self, grid: [usize; 3]) -> Result<u64> {
        let plan = self.plan(grid)?;
        let tokens_per_frame = grid[1] * grid[2];
        let d = self.spec.out_channels as u64;
        let mlp = 2 * MLP_RATIO as u64 * d * d * tokens_per_frame as u64;
        Ok(self.attn.macs(tokens_per_frame, plan.window_len()) + mlp)
    }
}
