use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{ConvBn, Linear, NormMode, Pass};
use super::params::{BnUpdate, Bound, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{self, Tape, Var};

/// Shape of the shared student architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub in_channels: usize,
    /// Square input side length.
    pub input_size: usize,
    /// Channel width of each residual stage; one tap per stage.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub classes: usize,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::config("backbone needs at least one stage of nonzero width"));
        }
        if self.blocks_per_stage == 0 || self.in_channels == 0 || self.classes < 2 {
            return Err(Error::config(
                "backbone needs >= 1 block per stage, >= 1 input channel and >= 2 classes",
            ));
        }
        let down = 1usize << (self.widths.len() - 1);
        if self.input_size == 0 || self.input_size % down != 0 {
            return Err(Error::config(format!(
                "input size {} is not divisible by the total stride {down}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Number of tap points.
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    fn stride(stage: usize) -> usize {
        if stage == 0 {
            1
        } else {
            2
        }
    }

    /// `(channels, height, width)` of each tap, shallow to deep.
    pub fn tap_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut size = self.input_size;
        self.widths
            .iter()
            .enumerate()
            .map(|(s, &c)| {
                size /= Self::stride(s);
                (c, size, size)
            })
            .collect()
    }

    pub fn final_shape(&self) -> (usize, usize, usize) {
        *self.tap_shapes().last().expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

impl BasicBlock {
    fn forward(&self, tape: &mut Tape, pass: &mut Pass<'_>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(tape, pass, x)?;
        let y = self.conv2.forward(tape, pass, y)?;
        let s = match &self.shortcut {
            Some(sc) => sc.forward(tape, pass, x)?,
            None => x,
        };
        let y = tensor::add(tape, y, s)?;
        Ok(tensor::relu(tape, y))
    }
}

/// Outputs of one student pass.
#[derive(Clone, Debug)]
pub struct StudentOutput {
    pub logits: Var,
    /// Post-activation stage outputs, shallow to deep; the last one is the
    /// final pre-pooling map.
    pub taps: Vec<Var>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Residual CNN with one tap per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentBackbone {
    spec: BackboneSpec,
    pub params: ParamSet,
    stem: ConvBn,
    stages: Vec<Vec<BasicBlock>>,
    head: Linear,
}

impl StudentBackbone {
    pub fn new(spec: &BackboneSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut ps = ParamSet::new();
        let w0 = spec.widths[0];
        let stem = ConvBn::new(&mut ps, rng, "stem", spec.in_channels, w0, 3, 1, true);
        let mut c_in = w0;
        let mut stages = Vec::new();
        for (s, &c) in spec.widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..spec.blocks_per_stage {
                let stride = if b == 0 { BackboneSpec::stride(s) } else { 1 };
                let name = format!("stage{s}.block{b}");
                let conv1 = ConvBn::new(&mut ps, rng, &format!("{name}.conv1"), c_in, c, 3, stride, true);
                let conv2 = ConvBn::new(&mut ps, rng, &format!("{name}.conv2"), c, c, 3, 1, false);
                let shortcut = (stride != 1 || c_in != c)
                    .then(|| ConvBn::new(&mut ps, rng, &format!("{name}.shortcut"), c_in, c, 1, stride, false));
                blocks.push(BasicBlock {
                    conv1,
                    conv2,
                    shortcut,
                });
                c_in = c;
            }
            stages.push(blocks);
        }
        let head = Linear::new(&mut ps, rng, "fc", c_in, spec.classes);
        Ok(StudentBackbone {
            spec: spec.clone(),
            params: ps,
            stem,
            stages,
            head,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Runs the network on `x` of shape (B, in_channels, size, size).
    pub fn forward_with_taps(&self, tape: &mut Tape, bound: &Bound, x: Var, mode: NormMode) -> Result<StudentOutput> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        if c != self.spec.in_channels || h != self.spec.input_size || w != self.spec.input_size {
            return Err(Error::invalid(format!(
                "input {:?} does not match backbone input ({}, {}, {})",
                tape.value(x).shape(),
                self.spec.in_channels,
                self.spec.input_size,
                self.spec.input_size
            )));
        }
        let mut pass = Pass::new(&self.params, bound, mode);
        let mut y = self.stem.forward(tape, &mut pass, x)?;
        let mut taps = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for block in stage {
                y = block.forward(tape, &mut pass, y)?;
            }
            taps.push(y);
        }
        let pooled = tensor::global_avg_pool(tape, y)?;
        let logits = self.head.forward(tape, &pass, pooled)?;
        Ok(StudentOutput {
            logits,
            taps,
            bn_updates: pass.into_updates(),
        })
    }
}
