//! Parameterized primitives shared by the blocks.

use gaitforge_tensor::{Element, Mode, Tensor, Var};
use rand::Rng;

use crate::error::Result;
use crate::params::{BufferId, ParamId, ParamStore, Session, StatsUpdate};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// He-normal initialization, `std = sqrt(2 / fan_in)`.
pub fn he_normal<E: Element, R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<E> {
    Tensor::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

/// LeCun-normal initialization, `std = sqrt(1 / fan_in)`.
pub fn lecun_normal<E: Element, R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<E> {
    Tensor::randn(shape, (1.0 / fan_in.max(1) as f64).sqrt(), rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvDims {
    /// `[N, C, H, W]` input, `kernel[0] == 1`.
    Two,
    /// `[N, C, T, H, W]` input.
    Three,
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub dims: ConvDims,
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv {
    /// "Same" padding for odd kernels.
    #[allow(clippy::too_many_arguments)]
    pub fn build<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        name: &str,
        dims: ConvDims,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = cin * kernel.iter().product::<usize>();
        let shape = match dims {
            ConvDims::Two => vec![cout, cin, kernel[1], kernel[2]],
            ConvDims::Three => vec![cout, cin, kernel[0], kernel[1], kernel[2]],
        };
        let weight = store.add_param(format!("{}.weight", name), he_normal(shape, fan_in, rng))?;
        let padding = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
        Ok(Conv { weight, dims, cin, cout, kernel, stride, padding })
    }

    pub fn forward<E: Element>(&self, s: &mut Session<'_, E>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = match self.dims {
            ConvDims::Two => {
                s.tape.conv2d(x, w, [self.stride[1], self.stride[2]], [self.padding[1], self.padding[2]])?
            }
            ConvDims::Three => s.tape.conv3d(x, w, self.stride, self.padding)?,
        };
        Ok(y)
    }

    /// Output spatial extent for input `(h, w)`.
    pub fn out_hw(&self, hw: (usize, usize)) -> (usize, usize) {
        (
            gaitforge_tensor::conv_out_len(hw.0, self.kernel[1], self.stride[1], self.padding[1]),
            gaitforge_tensor::conv_out_len(hw.1, self.kernel[2], self.stride[2], self.padding[2]),
        )
    }

    /// Multiply-accumulates per output frame for input `(h, w)`.
    pub fn macs(&self, hw: (usize, usize)) -> u64 {
        let (ho, wo) = self.out_hw(hw);
        (self.cout * self.cin * self.kernel.iter().product::<usize>() * ho * wo) as u64
    }
}

/// Batch normalization over axis 1 with running statistics.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl Norm {
    pub fn build<E: Element>(store: &mut ParamStore<E>, name: &str, channels: usize) -> Result<Self> {
        Ok(Norm {
            gamma: store.add_param(format!("{}.weight", name), Tensor::ones(vec![channels]))?,
            beta: store.add_param(format!("{}.bias", name), Tensor::zeros(vec![channels]))?,
            running_mean: store.add_buffer(format!("{}.running_mean", name), Tensor::zeros(vec![channels]))?,
            running_var: store.add_buffer(format!("{}.running_var", name), Tensor::ones(vec![channels]))?,
        })
    }

    pub fn forward<E: Element>(&self, s: &mut Session<'_, E>, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        let mode = s.mode;
        let (y, stats) = match mode {
            Mode::Train => s.tape.batch_norm(x, g, b, mode, None, BN_EPS)?,
            Mode::Eval => {
                let store = s.store();
                let (rm, rv) =
                    (store.buffer(self.running_mean).value.clone(), store.buffer(self.running_var).value.clone());
                s.tape.batch_norm(x, g, b, mode, Some((rm.data(), rv.data())), BN_EPS)?
            }
        };
        if let Some(stats) = stats {
            s.push_update(StatsUpdate { mean: self.running_mean, var: self.running_var, stats, momentum: BN_MOMENTUM });
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn build<E: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<E>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_param(format!("{}.weight", name), lecun_normal(vec![dout, din], din, rng))?;
        let bias =
            if bias { Some(store.add_param(format!("{}.bias", name), Tensor::zeros(vec![dout]))?) } else { None };
        Ok(Linear { weight, bias, din, dout })
    }

    pub fn forward<E: Element>(&self, s: &mut Session<'_, E>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        Ok(s.tape.linear(x, w, b)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn build<E: Element>(store: &mut ParamStore<E>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add_param(format!("{}.weight", name), Tensor::ones(vec![dim]))?,
            beta: store.add_param(format!("{}.bias", name), Tensor::zeros(vec![dim]))?,
        })
    }

    pub fn forward<E: Element>(&self, s: &mut Session<'_, E>, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        Ok(s.tape.layer_norm(x, g, b, LN_EPS)?)
    }
}
