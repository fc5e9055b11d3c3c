use gaitforge_tensor::{Checkpoint, Entry, Mode, Tape, Tensor};
use proptest::prelude::*;

fn tensor_strategy(max_rank: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(1usize..5, 1..=max_rank).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(-50.0f64..50.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in tensor_strategy(3), axis_seed in 0usize..3) {
        let axis = axis_seed % x.rank();
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(x.clone());
        let s = tape.softmax(v, axis).unwrap();
        let sums = tape.sum_axis(s, axis).unwrap();
        for &total in tape.value(sums).data() {
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
        prop_assert!(tape.value(s).data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn checkpoint_round_trip(a in tensor_strategy(4), b in tensor_strategy(2), raw in prop::collection::vec(any::<u8>(), 0..40)) {
        let mut ck = Checkpoint::new();
        ck.push("a", Entry::F64(a.clone()));
        ck.push("b.weight", Entry::F32(b.cast()));
        ck.push("meta", Entry::U8 { shape: vec![raw.len()], data: raw.clone() });
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.get("a").unwrap().to_tensor::<f64>().unwrap(), a);
    }

    #[test]
    fn batch_norm_output_is_standardized(x in tensor_strategy(1).prop_filter("need spread", |t| t.numel() >= 2)) {
        // [N, 1] with a single channel.
        let n = x.numel();
        let spread = x.data().iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) - x.data().iter().fold(f64::INFINITY, |m, &v| m.min(v));
        prop_assume!(spread > 1e-3);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.reshape(vec![n, 1]).unwrap());
        let g = tape.constant(Tensor::ones(vec![1]));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let (y, stats) = tape.batch_norm(xv, g, b, Mode::Train, None, 0.0).unwrap();
        let y = tape.value(y).data();
        let mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-6);
        let stats = stats.unwrap();
        let mu = x.data().iter().sum::<f64>() / n as f64;
        let unbiased = x.data().iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1) as f64;
        prop_assert!((stats.mean[0] - mu).abs() < 1e-9);
        prop_assert!((stats.var[0] - unbiased).abs() < 1e-6 * unbiased.max(1.0));
    }

    #[test]
    fn permute_then_inverse_is_identity(x in tensor_strategy(4)) {
        let rank = x.rank();
        let axes: Vec<usize> = (0..rank).rev().collect();
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(x.clone());
        let p = tape.permute(v, &axes).unwrap();
        let back = tape.permute(p, &axes).unwrap();
        prop_assert_eq!(tape.value(back), &x);
    }
}

#[test]
fn layer_norm_rows_are_standardized() {
    let x = Tensor::from_fn(vec![3, 8], |i| ((i * 37) % 11) as f64 - 4.0);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x);
    let g = tape.constant(Tensor::ones(vec![8]));
    let b = tape.constant(Tensor::zeros(vec![8]));
    let y = tape.layer_norm(xv, g, b, 0.0).unwrap();
    for row in tape.value(y).data().chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn bilinear_closed_forms() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::full(vec![1, 1, 3, 5], 2.5));
    let up = tape.bilinear_resize(c, (7, 4)).unwrap();
    assert!(tape.value(up).data().iter().all(|&v| (v - 2.5).abs() < 1e-12));

    let x = Tensor::from_fn(vec![1, 2, 3, 4], |i| i as f64 * 0.5);
    let xv = tape.constant(x.clone());
    let same = tape.bilinear_resize(xv, (3, 4)).unwrap();
    assert_eq!(tape.value(same), &x);

    // f(r, c) = 2r + c is affine, so half-pixel sampling reproduces it at the
    // clamped source coordinates 0, 0.25, 0.75, 1.
    let src = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
    let out = tape.bilinear_resize(src, (4, 4)).unwrap();
    let s = [0.0, 0.25, 0.75, 1.0];
    for y in 0..4 {
        for x in 0..4 {
            assert!((tape.value(out).at(&[0, 0, y, x]) - (2.0 * s[y] + s[x])).abs() < 1e-12);
        }
    }
}
