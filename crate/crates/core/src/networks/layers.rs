use rand::Rng;

use super::params::{normal_tensor, uniform_tensor, BnUpdate, Bound, ParamSet};
use crate::error::Result;
use crate::tensor::{self, BatchNormMode, ConvSpec, Tape, Tensor, Var};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// How batch norms normalize during a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running buffers receive an update.
    Train,
    /// Batch statistics; running buffers untouched.
    BatchStats,
    /// Running statistics.
    Eval,
}

/// Per-pass state shared by the layers of one component.
pub struct Pass<'a> {
    pub(crate) params: &'a ParamSet,
    pub(crate) bound: &'a Bound,
    pub(crate) mode: NormMode,
    pub(crate) updates: Vec<BnUpdate>,
}

impl<'a> Pass<'a> {
    pub fn new(params: &'a ParamSet, bound: &'a Bound, mode: NormMode) -> Self {
        Pass {
            params,
            bound,
            mode,
            updates: Vec::new(),
        }
    }

    pub fn into_updates(self) -> Vec<BnUpdate> {
        self.updates
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    weight: usize,
    bias: Option<usize>,
    spec: ConvSpec,
    pub(crate) c_in: usize,
    pub(crate) c_out: usize,
}

impl Conv2d {
    /// Kaiming-normal weights (fan-in, ReLU gain); zero bias.
    pub(crate) fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        spec: ConvSpec,
        with_bias: bool,
    ) -> Self {
        let std = (2.0 / (c_in * k * k) as f32).sqrt();
        let weight = ps.add(format!("{name}.weight"), normal_tensor(rng, &[c_out, c_in, k, k], std));
        let bias = with_bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Conv2d {
            weight,
            bias,
            spec,
            c_in,
            c_out,
        }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, pass: &Pass<'_>, x: Var) -> Result<Var> {
        let b = self.bias.map(|i| pass.bound.var(i));
        tensor::conv2d(tape, x, pass.bound.var(self.weight), b, self.spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d {
    weight: usize,
    spec: ConvSpec,
}

impl ConvTranspose2d {
    pub(crate) fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        spec: ConvSpec,
    ) -> Self {
        // Each output pixel sees about c_in * (k / stride)^2 inputs.
        let fan = (c_in * k * k) as f32 / (spec.stride * spec.stride) as f32;
        let weight = ps.add(
            format!("{name}.weight"),
            normal_tensor(rng, &[c_in, c_out, k, k], (2.0 / fan).sqrt()),
        );
        ConvTranspose2d { weight, spec }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, pass: &Pass<'_>, x: Var) -> Result<Var> {
        tensor::conv_transpose2d(tape, x, pass.bound.var(self.weight), None, self.spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

impl BatchNorm2d {
    pub(crate) fn new(ps: &mut ParamSet, name: &str, c: usize) -> Self {
        BatchNorm2d {
            gamma: ps.add(format!("{name}.weight"), Tensor::full(&[c], 1.0)),
            beta: ps.add(format!("{name}.bias"), Tensor::zeros(&[c])),
            mean: ps.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c])),
            var: ps.add_buffer(format!("{name}.running_var"), Tensor::full(&[c], 1.0)),
        }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, pass: &mut Pass<'_>, x: Var) -> Result<Var> {
        let (g, b) = (pass.bound.var(self.gamma), pass.bound.var(self.beta));
        match pass.mode {
            NormMode::Eval => {
                let mode = BatchNormMode::Eval {
                    mean: pass.params.buffer(self.mean).data(),
                    var: pass.params.buffer(self.var).data(),
                };
                Ok(tensor::batch_norm(tape, x, g, b, mode, BN_EPS)?.0)
            }
            NormMode::Train | NormMode::BatchStats => {
                let (y, stats) = tensor::batch_norm(tape, x, g, b, BatchNormMode::Train, BN_EPS)?;
                if pass.mode == NormMode::Train {
                    pass.updates.push(BnUpdate {
                        mean_buf: self.mean,
                        var_buf: self.var,
                        stats: stats.expect("train mode returns stats"),
                    });
                }
                Ok(y)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    weight: usize,
    bias: usize,
}

impl Linear {
    /// Uniform in `+-1/sqrt(fan_in)` for weights and bias.
    pub(crate) fn new(ps: &mut ParamSet, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let bound = 1.0 / (d_in as f32).sqrt();
        Linear {
            weight: ps.add(format!("{name}.weight"), uniform_tensor(rng, &[d_out, d_in], bound)),
            bias: ps.add(format!("{name}.bias"), uniform_tensor(rng, &[d_out], bound)),
        }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, pass: &Pass<'_>, x: Var) -> Result<Var> {
        tensor::linear(tape, x, pass.bound.var(self.weight), pass.bound.var(self.bias))
    }
}

/// Convolution, batch norm, then optionally ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub(crate) conv: Conv2d,
    bn: BatchNorm2d,
    relu: bool,
}

impl ConvBn {
    pub(crate) fn new(
        ps: &mut ParamSet,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        relu: bool,
    ) -> Self {
        let spec = ConvSpec::new(stride, k / 2);
        ConvBn {
            conv: Conv2d::new(ps, rng, &format!("{name}.conv"), c_in, c_out, k, spec, false),
            bn: BatchNorm2d::new(ps, &format!("{name}.bn"), c_out),
            relu,
        }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, pass: &mut Pass<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, pass, x)?;
        let y = self.bn.forward(tape, pass, y)?;
        Ok(if self.relu { tensor::relu(tape, y) } else { y })
    }
}

/// Transposed convolution, batch norm, ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct UpBlock {
    up: ConvTranspose2d,
    bn: BatchNorm2d,
}

impl UpBlock {
    pub(crate) fn new(ps: &mut ParamSet, rng: &mut impl Rng, name: &str, c_in: usize, c_out: usize, ratio: usize) -> Self {
        let (k, spec) = if ratio == 1 {
            (3, ConvSpec::new(1, 1))
        } else {
            (2 * ratio, ConvSpec::new(ratio, ratio / 2))
        };
        UpBlock {
            up: ConvTranspose2d::new(ps, rng, &format!("{name}.up"), c_in, c_out, k, spec),
            bn: BatchNorm2d::new(ps, &format!("{name}.bn"), c_out),
        }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, pass: &mut Pass<'_>, x: Var) -> Result<Var> {
        let y = self.up.forward(tape, pass, x)?;
        let y = self.bn.forward(tape, pass, y)?;
        Ok(tensor::relu(tape, y))
    }
}
