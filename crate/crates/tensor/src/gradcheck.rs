//! Central-difference verification of analytic gradients (64-bit only).

use rand::rngs::StdRng;
use rand::seq::index::sample;
use rand::SeedableRng;

use crate::error::{invalid, Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Coordinates checked per input; `None` checks all of them.
    pub max_coords_per_input: Option<usize>,
    /// Denominator floor of the relative error, so vanishing gradients are
    /// compared absolutely.
    pub abs_floor: f64,
    /// Raises the floor of each input to this fraction of its largest
    /// analytic gradient, so entries that vanish by symmetry are compared
    /// against the tensor's gradient scale rather than a fixed constant.
    pub relative_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-6,
            tolerance: 1e-5,
            max_coords_per_input: None,
            abs_floor: 1e-3,
            relative_floor: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// `(input, flat coordinate)` of the worst mismatch.
    pub worst: Option<(usize, usize)>,
    pub pass: bool,
}

fn eval_loss<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::no_grad();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares `d f / d inputs` from the tape with `(f(x+e) - f(x-e)) / 2e`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&opts.epsilon) {
        return invalid("grad_check", format!("epsilon {} outside [1e-7, 1e-4]", opts.epsilon));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    drop(tape);

    let mut rng = StdRng::seed_from_u64(opts.seed);
    let mut report =
        GradCheckReport { max_relative_error: 0.0, max_abs_error: 0.0, checked: 0, worst: None, pass: true };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let scale = analytic[which].data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = opts.abs_floor.max(opts.relative_floor * scale);
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = input.data()[c];
            work[which].data_mut()[c] = orig + opts.epsilon;
            let plus = eval_loss(&f, &work)?;
            work[which].data_mut()[c] = orig - opts.epsilon;
            let minus = eval_loss(&f, &work)?;
            work[which].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = analytic[which].data()[c];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_relative_error || !rel.is_finite() {
                report.max_relative_error = rel;
                report.worst = Some((which, c));
            }
        }
    }
    report.pass = report.max_relative_error < opts.tolerance;
    Ok(report)
}
