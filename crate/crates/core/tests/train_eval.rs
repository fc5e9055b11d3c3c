use gaitforge::data::synth::{generate_corpus, CorpusConfig};
use gaitforge::data::{shuffle_frames, AugmentPolicy, BatchSpec, Dataset};
use gaitforge::eval::{
    evaluate, extract_embeddings, shuffled_eval, split_by_condition, EvalOptions, PartEmbedding, SampleMeta,
};
use gaitforge::tensor::Tensor;
use gaitforge::train::{
    group_rates, lr_at, train, MemoryObserver, Optimizer, OptimizerConfig, ScheduleConfig, StepRecord, TrainConfig,
    TrainObserver,
};
use gaitforge::{BackboneConfig, Family, GaitModel, LrGroup, ModelConfig, ParamStore};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar_store(w: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add_param("w", Tensor::new(vec![1], vec![w]).unwrap()).unwrap();
    s
}

fn w(s: &ParamStore<f64>) -> f64 {
    s.get("w").unwrap().item()
}

#[test]
fn sgd_step_on_half_square() {
    let mut store = scalar_store(1.0);
    let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::sgd() };
    let mut opt = Optimizer::new(cfg).unwrap();
    // f(w) = w^2 / 2, so the gradient is w.
    let g = Tensor::new(vec![1], vec![w(&store)]).unwrap();
    opt.step(&mut store, &[Some(g)], |_| 0.1).unwrap();
    assert!((w(&store) - 0.9).abs() < 1e-15);
}

#[test]
fn adamw_minimises_a_quadratic() {
    // f(w) = (w - 3)^2, no decay so the optimum stays at 3.
    let mut store = scalar_store(0.0);
    let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::adamw() };
    let mut opt = Optimizer::new(cfg).unwrap();
    let mut reached = None;
    for step in 0..1000 {
        let g = Tensor::new(vec![1], vec![2.0 * (w(&store) - 3.0)]).unwrap();
        opt.step(&mut store, &[Some(g)], |_| 0.05).unwrap();
        if (w(&store) - 3.0).abs() < 1e-3 && reached.is_none() {
            reached = Some(step);
        }
    }
    assert!(reached.is_some());
    assert!((w(&store) - 3.0).abs() < 1e-3, "{}", w(&store));
}

#[test]
fn zero_gradient_leaves_parameters() {
    for cfg in [OptimizerConfig::sgd(), OptimizerConfig::adamw()] {
        let mut store = scalar_store(0.7);
        store.add_param("frozen", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig { weight_decay: 0.0, ..cfg }).unwrap();
        for _ in 0..3 {
            opt.step(&mut store, &[Some(Tensor::zeros(vec![1])), None], |_| 0.1).unwrap();
        }
        assert_eq!(w(&store), 0.7);
        // Parameters without a gradient are never touched, even with decay.
        let mut opt = Optimizer::new(cfg).unwrap();
        opt.step(&mut store, &[Some(Tensor::ones(vec![1])), None], |_| 0.1).unwrap();
        assert_eq!(store.get("frozen").unwrap().data(), &[1.0, -2.0]);
    }
    let mut store = scalar_store(1.0);
    let mut opt = Optimizer::new(OptimizerConfig::sgd()).unwrap();
    assert!(opt.step(&mut store, &[None], |_| 0.1).is_err());
    assert!(opt.step(&mut store, &[], |_| 0.1).is_err());
}

#[test]
fn schedule_examples() {
    let ms = ScheduleConfig::multistep(vec![20_000, 40_000, 50_000], 60_000);
    assert!((lr_at(45_000, &ms, 0.1, 0.0).unwrap() - 0.1 * 0.01).abs() < 1e-15);
    assert_eq!(lr_at(0, &ms, 0.1, 0.0).unwrap(), 0.1);
    assert!((lr_at(20_000, &ms, 0.1, 0.0).unwrap() - 0.01).abs() < 1e-15);
    let cos = ScheduleConfig::cosine(60_000, 80_000);
    assert_eq!(lr_at(0, &cos, 3e-4, 3e-5).unwrap(), 3e-4);
    assert_eq!(lr_at(60_000, &cos, 3e-4, 3e-5).unwrap(), 3e-5);
    assert_eq!(lr_at(79_999, &cos, 3e-4, 3e-5).unwrap(), 3e-5);
    assert!(lr_at(80_000, &cos, 3e-4, 3e-5).is_err());
}

fn tiny_model(family: Family, classes: usize, seed: u64) -> GaitModel<f32> {
    GaitModel::build(ModelConfig::new(BackboneConfig::new(family, 2, [1, 1, 1, 1]), classes), seed).unwrap()
}

fn tiny_corpus(subjects: usize, sequences: usize, frames: usize) -> Dataset {
    generate_corpus(&CorpusConfig { subjects, sequences, frames, ..Default::default() }).unwrap().normalized().unwrap()
}

fn tiny_config(model: &GaitModel<f32>, steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig::recipe(model.config.clone(), BatchSpec { frames: 3, ..BatchSpec::new(2, 2) }, steps);
    cfg.seed = 17;
    cfg
}

#[test]
fn zero_steps_writes_only_the_initial_checkpoint() {
    let data = tiny_corpus(2, 2, 3);
    let mut model = tiny_model(Family::DeepGaitV2_P3D, 2, 0);
    let before = model.to_checkpoint();
    let mut obs = MemoryObserver::default();
    let cfg = tiny_config(&model, 0);
    let summary = train(&mut model, &data, &cfg, &mut obs).unwrap();
    assert_eq!(summary.steps, 0);
    assert!(obs.records.is_empty());
    assert_eq!(obs.checkpoints.len(), 1);
    assert_eq!(obs.checkpoints[0].0, 0);
    assert_eq!(obs.checkpoints[0].1, before);
    assert_eq!(obs.header.len(), 1);
    assert!(obs.header[0].contains("momentum=0.9"), "{}", obs.header[0]);
}

#[test]
fn training_is_bit_reproducible() {
    let data = tiny_corpus(3, 2, 4);
    let run = || {
        let mut model = tiny_model(Family::DeepGaitV2_3D, 3, 5);
        let mut cfg = tiny_config(&model, 3);
        cfg.checkpoint_every = 2;
        let mut obs = MemoryObserver::default();
        train(&mut model, &data, &cfg, &mut obs).unwrap();
        obs
    };
    let (a, b) = (run(), run());
    assert_eq!(a.records, b.records);
    assert_eq!(a.checkpoints, b.checkpoints);
    assert_eq!(a.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(), vec![0, 2, 3]);
    assert_ne!(a.checkpoints[0].1, a.checkpoints[2].1);
    for r in &a.records {
        let line = r.log_line();
        assert!(
            line.starts_with(&format!("step={} lr=", r.step)) && line.contains(" l_tri=") && line.contains(" nzt=")
        );
    }
}

#[test]
fn observer_can_stop_early() {
    struct StopAt(usize, MemoryObserver);
    impl TrainObserver for StopAt {
        fn record(&mut self, r: &StepRecord) -> gaitforge::Result<()> {
            self.1.record(r)
        }
        fn checkpoint(&mut self, step: usize, m: &GaitModel<f32>) -> gaitforge::Result<()> {
            self.1.checkpoint(step, m)
        }
        fn should_stop(&self, last: &StepRecord) -> bool {
            last.step + 1 >= self.0
        }
    }
    let data = tiny_corpus(2, 2, 3);
    let mut model = tiny_model(Family::DeepGaitV2_2D, 2, 0);
    let mut obs = StopAt(2, MemoryObserver::default());
    let cfg = tiny_config(&model, 10);
    let summary = train(&mut model, &data, &cfg, &mut obs).unwrap();
    assert_eq!(summary.steps, 2);
    assert_eq!(obs.1.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(), vec![0, 2]);
}

#[test]
fn too_few_classes_rejected() {
    let data = tiny_corpus(3, 2, 3);
    let mut model = tiny_model(Family::DeepGaitV2_2D, 2, 0);
    let cfg = tiny_config(&model, 1);
    assert!(train(&mut model, &data, &cfg, &mut MemoryObserver::default()).is_err());
}

#[test]
fn warm_start_group_runs_at_reduced_rate() {
    let conv = tiny_model(Family::DeepGaitV2_3D, 2, 1);
    let mut swin = tiny_model(Family::SwinGait3D, 2, 2);
    let copied = swin.warm_start_from(&conv.to_checkpoint()).unwrap();
    let mut cfg = tiny_config(&swin, 1);
    cfg.augment = AugmentPolicy::none();
    assert_eq!(group_rates(&cfg, 0).unwrap(), (3e-4, 3e-4 * 0.1));
    assert!((group_rates(&cfg, 0).unwrap().1 - 3e-5).abs() < 1e-18);

    let data = tiny_corpus(2, 2, 3);
    let before = swin.store.clone();
    train(&mut swin, &data, &cfg, &mut MemoryObserver::default()).unwrap();
    // First AdamW step: the bias-corrected update is lr * g / (|g| + eps)
    // plus the decoupled decay lr * wd * w, so no entry moves further than
    // its group's rate and entries with a clear gradient move by about it.
    let mut largest = [0.0f64; 2];
    for (p, q) in before.params().iter().zip(swin.store.params()) {
        let warm = p.group == LrGroup::WarmStart;
        assert_eq!(warm, copied.contains(&p.name), "{}", p.name);
        let lr = if warm { 3e-5 } else { 3e-4 };
        for (a, b) in p.value.data().iter().zip(q.value.data()) {
            let step = (*a as f64 * (1.0 - lr * 2e-2) - *b as f64).abs();
            assert!(step <= lr * 1.01 + 2e-7, "{} moved {} at lr {}", p.name, step, lr);
            let slot = &mut largest[usize::from(warm)];
            *slot = slot.max(step);
        }
    }
    assert!((largest[1] - 3e-5).abs() < 3e-5 * 0.02, "{:?}", largest);
    assert!((largest[0] - 3e-4).abs() < 3e-4 * 0.02, "{:?}", largest);
}

fn meta(subject: usize, cond: &str, view: &str) -> SampleMeta {
    SampleMeta { subject: format!("{:03}", subject), condition: cond.into(), view: view.into() }
}

fn point(subject: usize, cond: &str, view: &str, v: Vec<f32>) -> PartEmbedding {
    PartEmbedding { meta: meta(subject, cond, view), features: Tensor::new(vec![1, v.len()], v).unwrap() }
}

#[test]
fn third_place_gives_ap_one_third() {
    let gallery = vec![point(1, "g", "0", vec![1.0]), point(2, "g", "0", vec![2.0]), point(0, "g", "0", vec![3.0])];
    let probe = vec![point(0, "p", "0", vec![0.0])];
    let r = evaluate(&gallery, &probe, EvalOptions::default()).unwrap();
    assert_eq!(r.ranks, vec![Some(3)]);
    assert_eq!((r.rank1, r.rank5), (0.0, 1.0));
    assert!((r.map - 1.0 / 3.0).abs() < 1e-12);
    assert!(r.to_text().contains("mAP = 0.3333"));
}

#[test]
fn self_matches_excluded_with_duplicates() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut set = Vec::new();
    for s in 0..5 {
        let v: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        set.push(point(s, "a", "0", v.clone()));
        set.push(point(s, "b", "0", v));
    }
    let r = evaluate(&set, &set, EvalOptions { exclude_same_sequence: true, ..Default::default() }).unwrap();
    assert_eq!(r.rank1, 1.0);
    assert_eq!(r.map, 1.0);
}

#[test]
fn random_embeddings_sit_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = 10;
    let (reps, probes) = (50, 200);
    let mut hits = 0.0;
    for _ in 0..reps {
        let g: Vec<PartEmbedding> =
            (0..s).map(|i| point(i, "g", "0", (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect();
        let p: Vec<PartEmbedding> =
            (0..probes).map(|i| point(i % s, "p", "0", (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect();
        hits += evaluate(&g, &p, EvalOptions::default()).unwrap().rank1 * probes as f64;
    }
    let n = (reps * probes) as f64;
    let p = 1.0 / s as f64;
    let sigma = (p * (1.0 - p) / n).sqrt();
    assert!((hits / n - p).abs() <= 3.0 * sigma, "{}", hits / n);
}

#[test]
fn split_by_condition_partitions_each_subject() {
    let data = generate_corpus(&CorpusConfig { subjects: 3, sequences: 8, frames: 1, ..Default::default() }).unwrap();
    let (tr, g, p) = split_by_condition(&data, 5, 1);
    assert_eq!((tr.len(), g.len(), p.len()), (3 * 5 * 2, 3 * 2, 3 * 2 * 2));
    assert!(g.sequences.iter().all(|s| s.condition == "nm-06"));
    assert!(p.sequences.iter().all(|s| s.condition == "nm-07" || s.condition == "nm-08"));
}

#[test]
fn extraction_duplicates_and_shuffles() {
    let data = tiny_corpus(2, 1, 5);
    let mut seqs = data.sequences.clone();
    seqs.push(data.sequences[0].clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shuffled = shuffle_frames(&data.sequences[0], &mut rng).unwrap();
    seqs.push(shuffled);
    let n = seqs.len();
    for (family, invariant) in [(Family::DeepGaitV2_2D, true), (Family::DeepGaitV2_P3D, false)] {
        let model = tiny_model(family, 2, 3);
        let emb = extract_embeddings(&model, &seqs).unwrap();
        assert_eq!(emb[0].features, emb[n - 2].features);
        let diff = emb[0].features.max_abs_diff(&emb[n - 1].features);
        if invariant {
            assert!(diff <= 1e-5, "{}", diff);
        } else {
            assert!(diff > 1e-3, "{}", diff);
        }
    }
    let mut bad = seqs[0].clone();
    bad.frames.clear();
    assert!(extract_embeddings(&tiny_model(Family::DeepGaitV2_2D, 2, 3), &[bad]).is_err());
}

#[test]
fn untrained_model_shuffle_report() {
    let data = generate_corpus(&CorpusConfig { subjects: 4, sequences: 3, frames: 4, ..Default::default() })
        .unwrap()
        .normalized()
        .unwrap();
    let (_, g, p) = split_by_condition(&data, 1, 1);
    let model = tiny_model(Family::DeepGaitV2_2D, 4, 0);
    let r = shuffled_eval(&model, &g, &p, EvalOptions::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(r.intact.evaluated(), 8);
    assert!(r.delta().abs() <= 1e-9, "{}", r.delta());
    assert!(r.to_text().contains("delta = "));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_order_and_duplicates(seed: u64, subjects in 2usize..6, gsize in 1usize..10, psize in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pt = |i: usize, c: &str| point(i % subjects, c, "0", (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut g: Vec<PartEmbedding> = (0..gsize).map(|i| pt(i, "g")).collect();
        g.push(pt(0, "g"));
        let p: Vec<PartEmbedding> = (0..psize).map(|i| pt(i, "p")).collect();
        if let Ok(r) = evaluate(&g, &p, EvalOptions::default()) {
            prop_assert!(r.rank1 <= r.rank5 && r.rank5 <= r.rank10);
            prop_assert!((0.0..=1.0).contains(&r.map) && (0.0..=1.0).contains(&r.rank1));
        }
        g.extend(p.iter().cloned());
        let r = evaluate(&g, &p, EvalOptions::default()).unwrap();
        prop_assert_eq!(r.rank1, 1.0);
    }
}
