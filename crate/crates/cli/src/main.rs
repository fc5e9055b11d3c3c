use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gaitforge::config::KeyValues;
use gaitforge::data::synth::{generate_corpus, CorpusConfig, CorpusVariant};
use gaitforge::data::{dataset_dumb_patch_fraction, load_dataset, save_dataset, Dataset, Layout};
use gaitforge::diagnostics::{check_blocks, check_pipeline};
use gaitforge::eval::{evaluate, extract_embeddings, shuffled_eval, split_by_condition, EvalOptions};
use gaitforge::tensor::Checkpoint;
use gaitforge::train::{train, DirObserver, TrainConfig};
use gaitforge::{BackboneConfig, Family, GaitModel, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FRAME_SIZE: (usize, usize) = (64, 44);

#[derive(Parser)]
#[command(name = "gaitforge", version, about = "Gait recognition from binary silhouettes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes train.log, checkpoints and model.gfc to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rank-k accuracy and mAP of a probe set against a gallery.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        exclude_identical_view: bool,
    },
    /// Compares retrieval with intact and frame-shuffled probes.
    AblateShuffle {
        #[arg(long)]
        ckpt: PathBuf,
        /// Uses <data>/gallery and <data>/probe when present, otherwise the
        /// first condition of each subject as gallery and the rest as probes.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        exclude_identical_view: bool,
    },
    /// Depth, stage shapes, parameter count and MACs of a configuration.
    Inspect {
        #[arg(long, conflicts_with_all = ["family", "ckpt"])]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "family")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        family: Option<Family>,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, value_delimiter = ',', num_args = 4)]
        blocks: Option<Vec<usize>>,
        /// Sequence length for the stage shapes.
        #[arg(long, default_value_t = 30)]
        frames: usize,
    },
    /// Writes a synthetic walker corpus as <out>/train, <out>/gallery and <out>/probe.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        subjects: usize,
        #[arg(long, default_value_t = 2023)]
        seed: u64,
        /// Sequences per subject and view.
        #[arg(long, default_value_t = 8)]
        sequences: usize,
        #[arg(long, default_value_t = 30)]
        frames: usize,
        #[arg(long, value_enum, default_value_t = Variant::Full)]
        variant: Variant,
        #[arg(long, value_enum, default_value_t = LayoutArg::Gsq)]
        layout: LayoutArg,
        /// Conditions per subject used for training; one more is the gallery.
        #[arg(long, default_value_t = 5)]
        train_conditions: usize,
    },
    /// Fraction of patches that are entirely foreground or background.
    Patches {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "4,16")]
        patch: Vec<usize>,
    },
    /// Finite-difference gradient checks of every block and model family.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        family: Option<Family>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Full,
    Motion,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Gsq,
    Pgm,
}

/// Loads a dataset and brings frames to the model input size.
fn load(dir: &Path) -> Result<Dataset> {
    let data = load_dataset(dir).with_context(|| format!("reading {}", dir.display()))?;
    if data.is_empty() {
        bail!("no sequences under {}", dir.display());
    }
    if data.sequences.iter().all(|s| s.frame_size() == FRAME_SIZE) {
        Ok(data)
    } else {
        Ok(data.normalized()?)
    }
}

fn options(exclude_identical_view: bool) -> EvalOptions {
    EvalOptions { exclude_identical_view, ..Default::default() }
}

fn cmd_train(config: &Path, data: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let mut cfg = TrainConfig::from_text(&text)?;
    let dataset = load(data)?;
    let subjects = dataset.subjects().len();
    if KeyValues::parse(&text)?.take("num_classes").is_none() {
        cfg.model.num_classes = subjects;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut model = GaitModel::<f32>::build(cfg.model.clone(), cfg.seed)?;
    if let Some(path) = &cfg.warm_start {
        let ck = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
        let copied = model.warm_start_from(&ck)?;
        println!("warm_start = {} tensors from {}", copied.len(), path.display());
    }
    let mut observer = DirObserver::create(out, true)?;
    let summary = train(&mut model, &dataset, &cfg, &mut observer)?;
    model.save(out.join("model.gfc"))?;
    println!("steps = {}", summary.steps);
    println!("model = {}", out.join("model.gfc").display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, gallery: &Path, probe: &Path, exclude: bool) -> Result<()> {
    let model = GaitModel::<f32>::load(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    let g = extract_embeddings(&model, &load(gallery)?.sequences)?;
    let p = extract_embeddings(&model, &load(probe)?.sequences)?;
    print!("{}", evaluate(&g, &p, options(exclude))?.to_text());
    Ok(())
}

fn cmd_ablate(ckpt: &Path, data: &Path, seed: u64, exclude: bool) -> Result<()> {
    let model = GaitModel::<f32>::load(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    let (gallery, probe) = if data.join("gallery").is_dir() && data.join("probe").is_dir() {
        (load(&data.join("gallery"))?, load(&data.join("probe"))?)
    } else {
        let (_, g, p) = split_by_condition(&load(data)?, 0, 1);
        (g, p)
    };
    if probe.is_empty() {
        bail!("no probe sequences: every subject needs at least two conditions");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    print!("{}", shuffled_eval(&model, &gallery, &probe, options(exclude), &mut rng)?.to_text());
    Ok(())
}

fn cmd_inspect(
    config: Option<&Path>,
    ckpt: Option<&Path>,
    family: Option<Family>,
    channels: usize,
    blocks: Option<Vec<usize>>,
    frames: usize,
) -> Result<()> {
    let model = if let Some(path) = ckpt {
        GaitModel::<f32>::load(path)?
    } else {
        let cfg = if let Some(path) = config {
            let mut kv = KeyValues::parse(&fs::read_to_string(path)?)?;
            // Training keys may share the file.
            ModelConfig::from_kv(&mut kv)?
        } else {
            let Some(family) = family else { bail!("pass --config, --ckpt or --family") };
            let blocks = match blocks {
                Some(b) => [b[0], b[1], b[2], b[3]],
                None if family.is_swin() => [1, 4, 4, 2],
                None => [1, 4, 4, 1],
            };
            ModelConfig::new(BackboneConfig::new(family, channels, blocks), 1)
        };
        GaitModel::<f32>::build(cfg, 0)?
    };
    let b = &model.config.backbone;
    println!("family = {}", b.family);
    println!("base_channels = {}", b.base_channels);
    println!("block_counts = {:?}", b.block_counts);
    println!("depth = {}", b.depth()?);
    for stage in b.plan(frames)? {
        println!("{} = {:?}", stage.name, stage.shape);
    }
    println!("params_backbone = {}", model.count_params(false));
    println!("params_total = {}", model.count_params(true));
    println!("macs_per_frame = {}", model.count_flops()?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    out: &Path,
    subjects: usize,
    seed: u64,
    sequences: usize,
    frames: usize,
    variant: Variant,
    layout: LayoutArg,
    train_conditions: usize,
) -> Result<()> {
    let cfg = CorpusConfig {
        subjects,
        sequences,
        frames,
        seed,
        variant: match variant {
            Variant::Full => CorpusVariant::Full,
            Variant::Motion => CorpusVariant::MotionOnly,
        },
        ..Default::default()
    };
    let layout = match layout {
        LayoutArg::Gsq => Layout::Gsq,
        LayoutArg::Pgm => Layout::Pgm,
    };
    let corpus = generate_corpus(&cfg)?.normalized()?;
    let (tr, g, p) = split_by_condition(&corpus, train_conditions, 1);
    for (name, part) in [("train", &tr), ("gallery", &g), ("probe", &p)] {
        save_dataset(part, out.join(name), layout)?;
        println!("{} = {} sequences", name, part.len());
    }
    Ok(())
}

fn cmd_patches(data: &Path, sizes: &[usize]) -> Result<()> {
    let dataset = load_dataset(data)?;
    if dataset.is_empty() {
        bail!("no sequences under {}", data.display());
    }
    for &p in sizes {
        println!("patch_{} = {:.4}", p, dataset_dumb_patch_fraction(&dataset, p)?);
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, family: Option<Family>) -> Result<bool> {
    let mut reports = if family.is_none() { check_blocks(seed)? } else { Vec::new() };
    let families: Vec<Family> = family.map_or(Family::ALL.to_vec(), |f| vec![f]);
    for f in families {
        reports.push(check_pipeline(f, 2, seed)?);
    }
    let mut ok = true;
    for r in &reports {
        ok &= r.pass();
        println!(
            "{} max_rel_err={:.4e} coords={} {}",
            r.name,
            r.max_relative_error,
            r.checked,
            if r.pass() { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, data, out, seed } => cmd_train(&config, &data, &out, seed),
        Command::Eval { ckpt, gallery, probe, exclude_identical_view } => {
            cmd_eval(&ckpt, &gallery, &probe, exclude_identical_view)
        }
        Command::AblateShuffle { ckpt, data, seed, exclude_identical_view } => {
            cmd_ablate(&ckpt, &data, seed, exclude_identical_view)
        }
        Command::Inspect { config, ckpt, family, channels, blocks, frames } => {
            cmd_inspect(config.as_deref(), ckpt.as_deref(), family, channels, blocks, frames)
        }
        Command::Synth { out, subjects, seed, sequences, frames, variant, layout, train_conditions } => {
            cmd_synth(&out, subjects, seed, sequences, frames, variant, layout, train_conditions)
        }
        Command::Patches { data, patch } => cmd_patches(&data, &patch),
        Command::Gradcheck { seed, family } => {
            if !cmd_gradcheck(seed, family)? {
                std::process::exit(1);
            }
            Ok(())
        }
    }
}
