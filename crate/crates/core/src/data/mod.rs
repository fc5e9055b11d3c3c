//! Silhouette frames, alignment, augmentation, batch sampling, dumb-patch
//! statistics, synthetic walkers and dataset files.

mod augment;
mod frame;
mod io;
mod patches;
mod sampler;
pub mod synth;

pub use augment::{spatial_augment, AugmentPolicy, AugmentRecord};
pub use frame::{normalize_silhouette, SilhouetteFrame, SilhouetteSequence, FOREGROUND, THRESHOLD};
pub use io::{decode_gsq, decode_pgm, encode_gsq, encode_pgm, load_dataset, save_dataset, Layout, GSQ_MAGIC};
pub use patches::{count_dumb_patches, dataset_dumb_patch_fraction, dumb_patch_fraction, PatchCount};
pub use sampler::{
    sample_batch, sample_batch_with, select_frames, sequence_tensor, shuffle_frames, Batch, BatchSpec, Dataset,
    DEFAULT_FRAMES,
};
pub use synth::{generate_corpus, synth_walker, synth_walker_raw, CorpusConfig, CorpusVariant, WalkerIdentity};
