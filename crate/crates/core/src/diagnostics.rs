//! Central-difference gradient checks of the blocks and whole models in
//! 64-bit mode.

use gaitforge_tensor::{grad_check, GradCheckOptions, Mode, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, Family};
use crate::blocks::{BlockKind, BlockSpec, ResBlock};
use crate::error::Result;
use crate::model::{GaitModel, ModelConfig};
use crate::params::{ParamStore, Session};
use crate::swin::SwinBlock;

/// Tolerance on the maximum relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_relative_error: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn pass(&self) -> bool {
        self.max_relative_error < GRAD_TOLERANCE
    }
}

/// A fixed random linear read-out, so the checked function is smooth in
/// the network output.
fn readout(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let r = tape.constant(Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p)?)
}

/// Checks the gradient of `readout(forward(x))` with respect to `input` and
/// every parameter of `store`, sampling up to `coords` coordinates of each.
fn check_store<F>(
    name: String,
    store: &ParamStore<f64>,
    input: Tensor<f64>,
    coords: usize,
    forward: F,
) -> Result<GradReport>
where
    F: Fn(&mut Session<'_, f64>, Var) -> Result<Var>,
{
    let ids: Vec<_> = store.ids().collect();
    let run = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let mut s = Session::new(tape, store, Mode::Train, 11);
        for (&id, &v) in ids.iter().zip(&vars[1..]) {
            s.bind(id, v);
        }
        let y = forward(&mut s, vars[0])?;
        drop(s);
        readout(tape, y, 5)
    };
    let mut inputs = vec![input];
    inputs.extend(store.params().iter().map(|p| p.value.clone()));
    // Surface configuration errors before the closure has to unwrap.
    {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        run(&mut tape, &vars)?;
    }
    // Entries that vanish by symmetry (a key bias under softmax) leave only
    // roundoff, so they are judged against the tensor's gradient scale.
    let opts = GradCheckOptions {
        tolerance: GRAD_TOLERANCE,
        max_coords_per_input: Some(coords),
        relative_floor: 1e-3,
        seed: 3,
        ..Default::default()
    };
    let report = grad_check(|tape, vars| Ok(run(tape, vars).expect("forward validated above")), &inputs, &opts)?;
    Ok(GradReport { name, max_relative_error: report.max_relative_error, checked: report.checked })
}

/// Every residual block kind with identity and projection shortcuts, and
/// both Swin block kinds with and without shifted windows.
pub fn check_blocks(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for kind in [BlockKind::Res2D, BlockKind::Res3D, BlockKind::ResP3D] {
        for (cin, cout, stride) in [(3, 3, 1), (2, 4, 2)] {
            let mut store = ParamStore::<f64>::new();
            let block = ResBlock::build(&mut store, "b", BlockSpec::residual(kind, cin, cout, stride), &mut rng)?;
            let shape = if kind == BlockKind::Res2D { vec![2, cin, 6, 5] } else { vec![2, cin, 3, 6, 5] };
            let x = Tensor::randn(shape, 1.0, &mut rng);
            let name = format!("{:?} {}->{} stride {}", kind, cin, cout, stride);
            out.push(check_store(name, &store, x, 40, |s, v| block.forward(s, v))?);
        }
    }
    for (kind, window, grid) in [(BlockKind::Swin2D, [1, 3, 5], [1, 6, 5]), (BlockKind::Swin3D, [3, 3, 5], [4, 6, 5])] {
        for shifted in [false, true] {
            let spec = BlockSpec {
                kind,
                in_channels: 8,
                out_channels: 8,
                stride: 1,
                window,
                shifted,
                heads: 2,
                drop_path_rate: 0.0,
            };
            let mut store = ParamStore::<f64>::new();
            let block = SwinBlock::build(&mut store, "s", spec, &mut rng)?;
            let x = Tensor::randn(vec![2, grid[0], grid[1], grid[2], 8], 1.0, &mut rng);
            let name = format!("{:?}{}", kind, if shifted { " shifted" } else { "" });
            out.push(check_store(name, &store, x, 30, |s, v| block.forward(s, v))?);
        }
    }
    Ok(out)
}

/// The full model (backbone, pooling and head) at width `c` with one block
/// per stage, on a 2-clip, 2-frame batch.
pub fn check_pipeline(family: Family, c: usize, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = GaitModel::<f64>::build(ModelConfig::new(BackboneConfig::new(family, c, [1, 1, 1, 1]), 3), seed)?;
    let x = Tensor::randn(vec![2, 2, 1, 64, 44], 1.0, &mut rng);
    check_store(format!("{} C={} pipeline", family, c), &model.store, x, 6, |s, v| {
        let out = model.forward(s, v)?;
        let e = readout(s.tape, out.head.embeddings, 7)?;
        let l = readout(s.tape, out.head.logits, 8)?;
        Ok(s.tape.add(e, l)?)
    })
}
