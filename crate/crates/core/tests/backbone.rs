use gaitforge::blocks::{BlockKind, BlockSpec, ResBlock};
use gaitforge::params::{ParamStore, Session};
use gaitforge::tensor::{Mode, Tape, Tensor};
use gaitforge::{depth_of, BackboneConfig, ConvKind, Family, GaitModel, ModelConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn forward_shapes(family: Family, c: usize, t: usize) -> (Vec<(String, Vec<usize>)>, Vec<usize>) {
    let cfg = ModelConfig::new(BackboneConfig::new(family, c, [1, 1, 1, 1]), 5);
    let model = GaitModel::<f32>::build(cfg, 1).unwrap();
    let mut tape = Tape::no_grad();
    let x = tape.constant(Tensor::full(vec![2, t, 1, 64, 44], 1.0f32));
    let mut s = Session::new(&mut tape, &model.store, Mode::Eval, 0);
    let out = model.forward(&mut s, x).unwrap();
    drop(s);
    let trace = out.trace.iter().map(|st| (st.name.clone(), st.shape.clone())).collect();
    (trace, tape.shape(out.head.embeddings).to_vec())
}

#[test]
fn trace_matches_plan_for_every_family() {
    for family in Family::ALL {
        for t in [1, 3] {
            let (trace, emb) = forward_shapes(family, 4, t);
            let plan = BackboneConfig::new(family, 4, [1, 1, 1, 1]).plan(t).unwrap();
            let expect: Vec<(String, Vec<usize>)> = plan.into_iter().map(|s| (s.name, s.shape)).collect();
            assert_eq!(trace, expect, "{} T={}", family, t);
            let parts = if family.is_swin() { 15 } else { 16 };
            assert_eq!(emb, vec![2, parts, 256]);
        }
    }
}

#[test]
fn conv_family_plan_follows_table_layout() {
    let plan = BackboneConfig::new(Family::DeepGaitV2_3D, 64, [1, 4, 4, 1]).plan(30).unwrap();
    let shapes: Vec<Vec<usize>> = plan.iter().map(|s| s.shape.clone()).collect();
    assert_eq!(
        shapes,
        vec![
            vec![30, 64, 64, 44],
            vec![30, 64, 64, 44],
            vec![30, 128, 32, 22],
            vec![30, 256, 16, 11],
            vec![30, 512, 16, 11]
        ]
    );
    let swin = BackboneConfig::new(Family::SwinGait3D, 64, [1, 4, 4, 2]).plan(30).unwrap();
    assert_eq!(swin[3].shape, vec![30, 15, 10, 512]);
    assert_eq!(swin[4].shape, vec![30, 15, 10, 256]);
    assert_eq!(swin[5].shape, vec![30, 15, 10, 512]);
}

#[test]
fn depth_formula() {
    assert_eq!(depth_of([1, 1, 1, 1]).unwrap(), 10);
    assert_eq!(depth_of([1, 2, 2, 1]).unwrap(), 14);
    assert_eq!(depth_of([1, 4, 4, 1]).unwrap(), 22);
    assert_eq!(depth_of([1, 4, 8, 1]).unwrap(), 30);
    assert!(depth_of([1, 0, 1, 1]).is_err());
}

#[test]
fn config_validation() {
    let mut c = BackboneConfig::new(Family::SwinGait2D, 16, [1, 1, 1, 1]);
    c.swin_conv_kind = Some(ConvKind::ThreeD);
    assert!(c.validate().is_err());
    let mut c = BackboneConfig::new(Family::DeepGaitV2_2D, 16, [1, 1, 1, 1]);
    c.swin_conv_kind = Some(ConvKind::TwoD);
    assert!(c.validate().is_err());
    let mut c = BackboneConfig::new(Family::DeepGaitV2_2D, 16, [1, 1, 1, 1]);
    c.part_count = 5;
    assert!(c.validate().is_err());
    let mut c = BackboneConfig::new(Family::SwinGait3D, 16, [1, 1, 1, 1]);
    c.swin_conv_kind = Some(ConvKind::P3D);
    assert!(c.validate().is_ok());
    assert!(BackboneConfig::new(Family::DeepGaitV2_P3D, 0, [1, 1, 1, 1]).validate().is_err());
}

#[test]
fn family_names_parse() {
    for f in Family::ALL {
        assert_eq!(f.name().parse::<Family>().unwrap(), f);
        assert_eq!(f.name().to_lowercase().parse::<Family>().unwrap(), f);
    }
    assert!("DeepGaitV3".parse::<Family>().is_err());
}

#[test]
fn model_config_text_roundtrip() {
    let mut b = BackboneConfig::new(Family::SwinGait3D, 32, [1, 2, 2, 2]);
    b.swin_conv_kind = Some(ConvKind::P3D);
    let cfg = ModelConfig::new(b, 74);
    assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    assert!(ModelConfig::from_text("family = DeepGaitV2-2D\nbogus = 1\n").is_err());
}

#[test]
fn checkpoint_roundtrip_restores_outputs() {
    let cfg = ModelConfig::new(BackboneConfig::new(Family::DeepGaitV2_P3D, 4, [1, 1, 1, 1]), 3);
    let model = GaitModel::<f32>::build(cfg, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gfc");
    model.save(&path).unwrap();
    let loaded = GaitModel::<f32>::load(&path).unwrap();
    assert_eq!(loaded.config, model.config);
    let x = Tensor::randn(vec![1, 3, 1, 64, 44], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(model.embed(x.clone()).unwrap(), loaded.embed(x).unwrap());
}

#[test]
fn warm_start_copies_shared_prefixes() {
    let conv =
        GaitModel::<f32>::build(ModelConfig::new(BackboneConfig::new(Family::DeepGaitV2_3D, 4, [1, 1, 1, 1]), 3), 1)
            .unwrap();
    let mut swin =
        GaitModel::<f32>::build(ModelConfig::new(BackboneConfig::new(Family::SwinGait3D, 4, [1, 1, 1, 1]), 3), 2)
            .unwrap();
    let copied = swin.warm_start_from(&conv.to_checkpoint()).unwrap();
    assert!(copied.iter().any(|n| n.starts_with("conv0.")));
    assert!(copied.iter().any(|n| n.starts_with("stage2.")));
    assert!(copied.iter().any(|n| n.starts_with("head.cls.")));
    assert!(copied.iter().all(|n| !n.starts_with("stage3.") && !n.starts_with("embed")));
    // Conv models have 16 parts, SwinGait 15: part 15 has no counterpart.
    assert!(!copied.iter().any(|n| n.starts_with("head.fc.15.")));
    for name in &copied {
        assert_eq!(swin.store.get(name), conv.store.get(name), "{}", name);
    }
    // SwinGait-2D has 2D stage-2 blocks: the 3D kernels do not fit.
    let mut swin2 =
        GaitModel::<f32>::build(ModelConfig::new(BackboneConfig::new(Family::SwinGait2D, 4, [1, 1, 1, 1]), 3), 2)
            .unwrap();
    assert!(swin2.warm_start_from(&conv.to_checkpoint()).is_err());
}

#[test]
fn residual_block_shapes_and_params() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (kind, rank5) in [(BlockKind::Res2D, false), (BlockKind::Res3D, true), (BlockKind::ResP3D, true)] {
        let mut store = ParamStore::<f64>::new();
        let block = ResBlock::build(&mut store, "b", BlockSpec::residual(kind, 3, 6, 2), &mut rng).unwrap();
        let shape = if rank5 { vec![2, 3, 4, 8, 6] } else { vec![2, 3, 8, 6] };
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(shape, 1.0, &mut rng));
        let mut s = Session::new(&mut tape, &store, Mode::Train, 0);
        let y = block.forward(&mut s, x).unwrap();
        drop(s);
        let expect = if rank5 { vec![2, 6, 4, 4, 3] } else { vec![2, 6, 4, 3] };
        assert_eq!(tape.shape(y), expect.as_slice());
        let weights: usize = store
            .params()
            .iter()
            .filter(|p| p.name.ends_with(".weight") && p.value.rank() > 1)
            .map(|p| p.value.numel())
            .sum();
        let expect_w = match kind {
            BlockKind::Res2D => 3 * 6 * 9 + 6 * 6 * 9 + 3 * 6,
            BlockKind::Res3D => 3 * 6 * 27 + 6 * 6 * 27 + 3 * 6,
            _ => 3 * 6 * 9 + 6 * 6 * 3 + 6 * 6 * 9 + 3 * 6,
        };
        assert_eq!(weights, expect_w, "{:?}", kind);
    }
}

#[test]
fn flops_scale_with_width() {
    let m = |c| {
        GaitModel::<f32>::build(ModelConfig::new(BackboneConfig::new(Family::DeepGaitV2_2D, c, [1, 1, 1, 1]), 2), 0)
            .unwrap()
            .count_flops()
            .unwrap()
    };
    // Every layer but the 1-channel stem is quadratic in width.
    let (a, b) = (m(8) as f64, m(16) as f64);
    assert!((b / a - 4.0).abs() < 0.05, "{}", b / a);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn depth_is_twice_blocks_plus_two(b in prop::array::uniform4(1usize..10)) {
        prop_assert_eq!(depth_of(b).unwrap(), 2 * b.iter().sum::<usize>() + 2);
    }

    #[test]
    fn plan_is_linear_in_t(t in 1usize..40, c in 1usize..9) {
        for f in Family::ALL {
            let p = BackboneConfig::new(f, c, [1, 1, 1, 1]).plan(t).unwrap();
            prop_assert!(p.iter().all(|s| s.shape[0] == t));
            prop_assert_eq!(p.last().unwrap().shape.iter().product::<usize>() % (8 * c), 0);
        }
    }
}
