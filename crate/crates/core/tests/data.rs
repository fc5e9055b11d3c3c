use std::collections::BTreeMap;

use gaitforge::data::synth::{
    generate_corpus, render_pose, synth_walker, synth_walker_raw, CorpusConfig, Nuisance, WalkerIdentity, RAW_SIZE,
};
use gaitforge::data::{
    count_dumb_patches, dataset_dumb_patch_fraction, decode_gsq, dumb_patch_fraction, encode_gsq, load_dataset,
    normalize_silhouette, sample_batch, sample_batch_with, save_dataset, select_frames, shuffle_frames,
    spatial_augment, AugmentPolicy, AugmentRecord, BatchSpec, Dataset, Layout, SilhouetteFrame, SilhouetteSequence,
    FOREGROUND,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn walker_frame() -> SilhouetteFrame {
    render_pose(&WalkerIdentity::default(), 0.3, &Nuisance::from_seed(1))
}

fn shift_x(f: &SilhouetteFrame, dx: isize) -> SilhouetteFrame {
    SilhouetteFrame::from_fn(f.height, f.width, |y, x| {
        let sx = x as isize - dx;
        if sx < 0 || sx >= f.width as isize {
            0
        } else {
            f.get(y, sx as usize)
        }
    })
}

fn small_corpus(subjects: usize, sequences: usize) -> Dataset {
    generate_corpus(&CorpusConfig { subjects, sequences, frames: 6, ..Default::default() }).unwrap()
}

#[test]
fn normalization_of_tall_rectangle() {
    let raw = SilhouetteFrame::from_fn(
        128,
        128,
        |y, x| if (14..114).contains(&y) && (50..80).contains(&x) { 255 } else { 0 },
    );
    let out = normalize_silhouette(&raw).unwrap();
    assert_eq!((out.height, out.width), (64, 44));
    assert!(out.is_binary());
    assert_eq!(out.bounding_box().map(|b| (b.0, b.1)), Some((0, 63)));
    // 30 x 100 scales to 19 x 64 and is centred in the window.
    let (_, _, left, right) = out.bounding_box().unwrap();
    assert_eq!(right - left + 1, 19);
    assert!((left as isize - (43 - right) as isize).abs() <= 1);
}

#[test]
fn normalization_is_translation_invariant() {
    let f = walker_frame();
    let a = normalize_silhouette(&f).unwrap();
    assert_eq!(normalize_silhouette(&shift_x(&f, 10)).unwrap(), a);
    assert_eq!(normalize_silhouette(&shift_x(&f, -7)).unwrap(), a);
}

#[test]
fn normalized_frame_is_near_fixed_point() {
    let once = normalize_silhouette(&walker_frame()).unwrap();
    let twice = normalize_silhouette(&once).unwrap();
    let differ = once.mask.iter().zip(&twice.mask).filter(|(a, b)| a != b).count();
    assert!(differ * 50 <= once.foreground_count(), "{} of {}", differ, once.foreground_count());
}

#[test]
fn empty_frame_rejected() {
    assert!(normalize_silhouette(&SilhouetteFrame::blank(64, 64)).is_err());
}

#[test]
fn disabled_augmentation_is_identity() {
    let seq = synth_walker(&WalkerIdentity::default(), 5, 3).unwrap();
    let (out, rec) = spatial_augment(&seq, &mut rng(0), &AugmentPolicy::none());
    assert_eq!(out, seq);
    assert_eq!(rec, AugmentRecord::default());
}

#[test]
fn double_flip_is_identity() {
    let seq = synth_walker(&WalkerIdentity::default(), 4, 3).unwrap();
    let flip = AugmentRecord::flip_only();
    let once = flip.apply_sequence(&seq);
    assert_ne!(once, seq);
    assert_eq!(flip.apply_sequence(&once), seq);
}

#[test]
fn one_transform_per_sequence() {
    let seq = synth_walker(&WalkerIdentity::default(), 6, 3).unwrap();
    let policy = AugmentPolicy { flip: 1.0, rotate: 1.0, perspective: 1.0, erase: 1.0, ..Default::default() };
    let mut r = rng(11);
    for _ in 0..5 {
        let (out, rec) = spatial_augment(&seq, &mut r, &policy);
        assert!(rec.flip && rec.rotation_deg.is_some() && rec.affine.is_some() && rec.erase.is_some());
        assert_eq!(out.len(), seq.len());
        for (o, f) in out.frames.iter().zip(&seq.frames) {
            assert_eq!(*o, rec.apply(f));
            assert!(o.is_binary());
        }
    }
}

#[test]
fn batch_sizes_follow_q_times_k() {
    let data = small_corpus(32, 16);
    let mut r = rng(1);
    for (q, k) in [(32, 4), (8, 16)] {
        let spec = BatchSpec { frames: 3, ..BatchSpec::new(q, k) };
        let b = sample_batch(&data, &spec, &mut r).unwrap();
        assert_eq!(b.clips.shape(), &[128, 3, 1, 64, 64]);
        assert_eq!(b.labels.len(), 128);
        let mut per: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (l, s) in b.labels.iter().zip(&b.sequences) {
            per.entry(*l).or_default().push(*s);
        }
        assert_eq!(per.len(), q);
        for seqs in per.values_mut() {
            seqs.sort();
            seqs.dedup();
            assert_eq!(seqs.len(), k);
        }
    }
    assert!(sample_batch(&data, &BatchSpec::new(33, 4), &mut r).is_err());
    assert!(sample_batch(&data, &BatchSpec::new(2, 33), &mut r).is_err());
    assert!(sample_batch(&data, &BatchSpec::new(1, 4), &mut r).is_err());
}

#[test]
fn short_sequence_wraps_cyclically() {
    let mut r = rng(2);
    for _ in 0..20 {
        let idx = select_frames(5, 30, true, &mut r);
        assert_eq!(idx.len(), 30);
        for w in idx.windows(2) {
            assert_eq!(w[1], (w[0] + 1) % 5);
        }
    }
}

#[test]
fn batch_clip_frames_match_sequences() {
    let data = small_corpus(3, 2);
    let spec = BatchSpec { frames: 4, ..BatchSpec::new(2, 2) };
    let b = sample_batch(&data, &spec, &mut rng(4)).unwrap();
    let plane = 64 * 64;
    for (c, (&s, idx)) in b.sequences.iter().zip(&b.frame_indices).enumerate() {
        for (t, &i) in idx.iter().enumerate() {
            let start = (c * 4 + t) * plane;
            let got = &b.clips.data()[start..start + plane];
            let expect: Vec<f32> =
                data.sequences[s].frames[i].mask.iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect();
            assert_eq!(got, expect.as_slice());
        }
    }
}

#[test]
fn augmented_batch_stays_binary() {
    let data = small_corpus(3, 2).normalized().unwrap();
    let spec = BatchSpec { frames: 4, ..BatchSpec::new(3, 2) };
    let b = sample_batch_with(&data, &spec, &AugmentPolicy::default(), &mut rng(5)).unwrap();
    assert!(b.clips.data().iter().all(|&v| v == 0.0 || v == 1.0));
}

fn numbered(len: usize) -> SilhouetteSequence {
    let frames = (0..len).map(|i| SilhouetteFrame::from_fn(1, 1, |_, _| i as u8)).collect();
    SilhouetteSequence::new(frames, "s", "c", "v").unwrap()
}

#[test]
fn shuffle_rejects_single_frame() {
    assert!(shuffle_frames(&numbered(1), &mut rng(0)).is_err());
}

#[test]
fn shuffle_identity_frequency() {
    let seq = numbered(3);
    let mut r = rng(6);
    let n = 10_000;
    let hits = (0..n).filter(|_| shuffle_frames(&seq, &mut r).unwrap().frames == seq.frames).count() as f64;
    let p = 1.0 / 6.0;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    assert!((hits - n as f64 * p).abs() <= 3.0 * sigma, "{} identities", hits);
}

#[test]
fn dumb_patch_trivial_cases() {
    let black = SilhouetteFrame::blank(64, 64);
    let white = SilhouetteFrame::from_fn(64, 64, |_, _| FOREGROUND);
    for p in [1, 4, 16, 7] {
        assert_eq!(dumb_patch_fraction(&black, p).unwrap(), 1.0);
    }
    assert_eq!(dumb_patch_fraction(&white, 4).unwrap(), 1.0);
    let f = walker_frame();
    assert_eq!(dumb_patch_fraction(&f, 1).unwrap(), 1.0);
    let checker = SilhouetteFrame::from_fn(64, 64, |y, x| if (y / 2 + x / 2) % 2 == 0 { 255 } else { 0 });
    assert_eq!(dumb_patch_fraction(&checker, 4).unwrap(), 0.0);
    assert!(dumb_patch_fraction(&checker, 0).is_err());
    // A 5x5 frame at patch 4 pads to 2x2 patches.
    assert_eq!(count_dumb_patches(&SilhouetteFrame::blank(5, 5), 4).unwrap().total, 4);
}

#[test]
fn dumb_patch_oracle() {
    let f = walker_frame();
    for p in [2, 4, 8, 16] {
        let (mut dumb, mut total) = (0, 0);
        for py in (0..64).step_by(p) {
            for px in (0..64).step_by(p) {
                let vals: Vec<bool> = (py..py + p)
                    .flat_map(|y| (px..px + p).map(move |x| (y, x)))
                    .map(|(y, x)| f.is_foreground(y, x))
                    .collect();
                total += 1;
                if vals.iter().all(|&v| v) || vals.iter().all(|&v| !v) {
                    dumb += 1;
                }
            }
        }
        let c = count_dumb_patches(&f, p).unwrap();
        assert_eq!((c.dumb, c.total), (dumb, total));
    }
}

#[test]
fn corpus_has_more_dumb_small_patches() {
    let data = small_corpus(6, 2);
    let small = dataset_dumb_patch_fraction(&data, 4).unwrap();
    let large = dataset_dumb_patch_fraction(&data, 16).unwrap();
    assert!(small > large, "{} vs {}", small, large);
}

#[test]
fn walker_is_deterministic() {
    let id = WalkerIdentity::random(&mut rng(9));
    assert_eq!(synth_walker(&id, 12, 5).unwrap(), synth_walker(&id, 12, 5).unwrap());
    assert_ne!(synth_walker_raw(&id, 12, 5).unwrap(), synth_walker_raw(&id, 12, 6).unwrap());
}

#[test]
fn half_cycle_phase_shift() {
    // Frequency 1/16: a phase of pi is exactly 8 frames.
    let id = WalkerIdentity { frequency: 0.0625, ..Default::default() };
    let shifted = WalkerIdentity { phase: std::f64::consts::PI, ..id };
    let a = synth_walker_raw(&id, 32, 1).unwrap();
    let b = synth_walker_raw(&shifted, 32, 1).unwrap();
    for t in 0..24 {
        assert_eq!(b.frames[t], a.frames[t + 8], "frame {}", t);
    }
    let mut ma: Vec<&Vec<u8>> = a.frames[..16].iter().map(|f| &f.mask).collect();
    let mut mb: Vec<&Vec<u8>> = b.frames[..16].iter().map(|f| &f.mask).collect();
    ma.sort();
    mb.sort();
    assert_eq!(ma, mb);
}

#[test]
fn frequency_only_identities() {
    let slow = WalkerIdentity { frequency: 0.05, ..Default::default() };
    let fast = WalkerIdentity { frequency: 0.1, ..Default::default() };
    let a = synth_walker(&slow, 10, 4).unwrap();
    let b = synth_walker(&fast, 10, 4).unwrap();
    assert_eq!(a.frames[0], b.frames[0]);
    assert_eq!(a.frames[2], b.frames[1]);
    assert_ne!(a, b);
}

#[test]
fn invalid_identity_rejected() {
    let id = WalkerIdentity { thigh: 0.9, ..Default::default() };
    assert!(synth_walker(&id, 3, 0).is_err());
}

#[test]
fn corpus_layout() {
    let data = small_corpus(3, 4);
    assert_eq!(data.len(), 3 * 4 * 2);
    assert_eq!(data.subjects(), vec!["000", "001", "002"]);
    assert!(data.sequences.iter().all(|s| s.frame_size() == (RAW_SIZE, RAW_SIZE) && s.len() == 6));
}

fn sorted(d: &Dataset) -> Vec<SilhouetteSequence> {
    let mut v = d.sequences.clone();
    v.sort_by(|a, b| (&a.subject, &a.condition, &a.view).cmp(&(&b.subject, &b.condition, &b.view)));
    v
}

#[test]
fn save_load_round_trip() {
    let data = small_corpus(2, 2);
    for layout in [Layout::Gsq, Layout::Pgm] {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&data, dir.path(), layout).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(sorted(&back), sorted(&data));
    }
}

#[test]
fn empty_directory_is_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_dataset(dir.path()).unwrap().is_empty());
}

#[test]
fn index_counts_match_files_on_disk() {
    let data = generate_corpus(&CorpusConfig { subjects: 10, sequences: 3, frames: 2, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&data, dir.path(), Layout::Gsq).unwrap();
    let on_disk = walk(dir.path());
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(on_disk, 10 * 3 * 2);
    assert_eq!(back.len(), on_disk);
    assert_eq!(back.subjects().len(), 10);
}

fn walk(p: &std::path::Path) -> usize {
    std::fs::read_dir(p)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|q| if q.is_dir() { walk(&q) } else { usize::from(q.extension().is_some_and(|e| e == "gsq")) })
        .sum()
}

#[test]
fn malformed_gsq_rejected() {
    let f = walker_frame();
    let mut bytes = encode_gsq(&[f.clone(), f]).unwrap();
    assert_eq!(decode_gsq(&bytes).unwrap().len(), 2);
    bytes.pop();
    assert!(decode_gsq(&bytes).is_err());
    bytes[0] = b'X';
    assert!(decode_gsq(&bytes).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn normalized_shape_and_x_invariance(u in 0.0f64..1.0, seed in 0u64..50, dx in -4isize..4) {
        let f = render_pose(&WalkerIdentity::default(), u, &Nuisance::from_seed(seed));
        let a = normalize_silhouette(&f).unwrap();
        prop_assert_eq!((a.height, a.width), (64, 44));
        prop_assert!(a.is_binary());
        let (_, _, l, r) = f.bounding_box().unwrap();
        if l as isize + dx >= 0 && r as isize + dx < 64 {
            prop_assert_eq!(normalize_silhouette(&shift_x(&f, dx)).unwrap(), a);
        }
    }

    #[test]
    fn ordered_sampling_is_consecutive(len in 1usize..40, t in 1usize..35, seed: u64) {
        let idx = select_frames(len, t, true, &mut rng(seed));
        prop_assert_eq!(idx.len(), t);
        for w in idx.windows(2) {
            prop_assert_eq!(w[1], (w[0] + 1) % len);
        }
        let un = select_frames(len, t, false, &mut rng(seed));
        prop_assert!(un.iter().all(|&i| i < len));
    }

    #[test]
    fn shuffle_preserves_multiset(len in 2usize..20, seed: u64) {
        let seq = numbered(len);
        let s = shuffle_frames(&seq, &mut rng(seed)).unwrap();
        prop_assert!(!s.ordered);
        let mut v: Vec<u8> = s.frames.iter().map(|f| f.mask[0]).collect();
        v.sort();
        prop_assert_eq!(v, (0..len as u8).collect::<Vec<_>>());
    }

    #[test]
    fn augmentation_keeps_binarity_and_length(seed: u64) {
        let seq = synth_walker(&WalkerIdentity::default(), 3, 2).unwrap();
        let (out, _) = spatial_augment(&seq, &mut rng(seed), &AugmentPolicy::default());
        prop_assert_eq!(out.len(), 3);
        prop_assert!(out.frames.iter().all(|f| f.is_binary() && (f.height, f.width) == (64, 44)));
    }

    #[test]
    fn dumb_fraction_in_unit_interval(u in 0.0f64..1.0, p in 1usize..20) {
        let f = render_pose(&WalkerIdentity::default(), u, &Nuisance::from_seed(0));
        let v = dumb_patch_fraction(&f, p).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }
}
