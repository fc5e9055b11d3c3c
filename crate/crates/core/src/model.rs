//! Backbone + head, checkpointing and warm start.

use std::path::Path;

use gaitforge_tensor::{Checkpoint, Element, Entry, Mode, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig, StageShape};
use crate::config::KeyValues;
use crate::error::{GaitError, Result};
use crate::head::{horizontal_pooling, temporal_pooling, Head, HeadConfig, HeadOutput, HpPooling, EMBED_DIM};
use crate::params::{LrGroup, ParamStore, Session};

pub const META_CONFIG: &str = "meta.config";

/// Prefixes copied from a DeepGaitV2 checkpoint into SwinGait.
pub const WARM_START_PREFIXES: [&str; 4] = ["conv0.", "stage1.", "stage2.", "head."];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub pooling: HpPooling,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, num_classes: usize) -> Self {
        ModelConfig { backbone, embed_dim: EMBED_DIM, num_classes, pooling: HpPooling::MaxMean }
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            parts: self.backbone.part_count,
            in_dim: self.backbone.out_channels(),
            embed_dim: self.embed_dim,
            num_classes: self.num_classes,
            pooling: self.pooling,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.backbone.write_kv(&mut s);
        s.push_str(&format!("embed_dim = {}\n", self.embed_dim));
        s.push_str(&format!("num_classes = {}\n", self.num_classes));
        s.push_str(&format!("hp_pooling = {}\n", self.pooling.name()));
        s
    }

    /// Consumes the model keys of `kv`, leaving the rest.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let backbone = BackboneConfig::from_kv(kv)?;
        let mut cfg = ModelConfig::new(backbone, 1);
        if let Some(d) = kv.take_parsed("embed_dim")? {
            cfg.embed_dim = d;
        }
        if let Some(k) = kv.take_parsed("num_classes")? {
            cfg.num_classes = k;
        }
        if let Some(p) = kv.take("hp_pooling") {
            cfg.pooling = p.parse()?;
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let cfg = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }
}

pub struct ModelOutput {
    pub features: Var,
    /// `[N, P, 8C]` after temporal and horizontal pooling.
    pub parts: Var,
    pub head: HeadOutput,
    pub trace: Vec<StageShape>,
}

#[derive(Debug, Clone)]
pub struct GaitModel<E: Element> {
    pub config: ModelConfig,
    pub store: ParamStore<E>,
    pub backbone: Backbone,
    pub head: Head,
}

impl<E: Element> GaitModel<E> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::build(&mut store, config.backbone.clone(), &mut rng)?;
        let head = Head::build(&mut store, config.head(), &mut rng)?;
        Ok(GaitModel { config, store, backbone, head })
    }

    /// Pools backbone features to `[N, P, 8C]`.
    pub fn pool<'a>(&self, s: &mut Session<'a, E>, features: Var) -> Result<Var> {
        let map = temporal_pooling(s.tape, features, 1)?;
        let map = if self.config.backbone.family.is_swin() { s.tape.permute(map, &[0, 3, 1, 2])? } else { map };
        horizontal_pooling(s.tape, map, self.config.backbone.part_count, self.config.pooling)
    }

    /// `clips [N, T, 1, H, W]` through backbone, pooling and head.
    pub fn forward<'a>(&self, s: &mut Session<'a, E>, clips: Var) -> Result<ModelOutput> {
        let out = self.backbone.forward(s, clips)?;
        let parts = self.pool(s, out.features)?;
        let head = self.head.forward(s, parts)?;
        Ok(ModelOutput { features: out.features, parts, head, trace: out.trace })
    }

    /// Backbone parameters, or everything with `include_head`.
    pub fn count_params(&self, include_head: bool) -> usize {
        self.store.numel_where(|n| include_head || !n.starts_with("head."))
    }

    /// Multiply-accumulates per silhouette frame.
    pub fn count_flops(&self) -> Result<u64> {
        self.backbone.count_macs(30)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.store.to_checkpoint();
        let text = self.config.to_text().into_bytes();
        ck.push(META_CONFIG, Entry::U8 { shape: vec![text.len()], data: text });
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let Some(Entry::U8 { data, .. }) = ck.get(META_CONFIG) else {
            return Err(GaitError::Format(format!("checkpoint lacks '{}'", META_CONFIG)));
        };
        let text = String::from_utf8(data.clone()).map_err(|_| GaitError::Format("config is not UTF-8".into()))?;
        let mut model = Self::build(ModelConfig::from_text(&text)?, 0)?;
        model.store.load_checkpoint(ck)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Copies stem, stage 1-2 and head tensors that exist under the same name
    /// in `ck` and marks the copied parameters for the reduced learning rate.
    /// Returns the copied names.
    pub fn warm_start_from(&mut self, ck: &Checkpoint) -> Result<Vec<String>> {
        let mut copied = Vec::new();
        for (name, entry) in &ck.entries {
            if !WARM_START_PREFIXES.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let Some(current) = self.store.get(name) else { continue };
            let Some(value) = entry.to_tensor::<E>() else { continue };
            if current.shape() != value.shape() {
                return Err(GaitError::ParamShape {
                    name: name.clone(),
                    expected: current.shape().to_vec(),
                    found: value.shape().to_vec(),
                });
            }
            self.store.set(name, value)?;
            if let Some(id) = self.store.find(name) {
                self.store.param_mut(id).group = LrGroup::WarmStart;
            }
            copied.push(name.clone());
        }
        Ok(copied)
    }

    /// Eval-mode forward of one batch, returning pre-BN embeddings `[N, P, dim]`.
    pub fn embed(&self, clips: gaitforge_tensor::Tensor<E>) -> Result<gaitforge_tensor::Tensor<E>> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(clips);
        let mut s = Session::new(&mut tape, &self.store, Mode::Eval, 0);
        let out = self.forward(&mut s, x)?;
        drop(s);
        Ok(tape.value(out.head.embeddings).clone())
    }
}
