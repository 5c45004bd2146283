use rand::Rng;

use super::layers::{Conv2d, ConvBn, Linear, NormMode, Pass};
use super::params::{BnUpdate, Bound, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{self, ConvSpec, Tape, Var};

/// Outputs of one fusion pass.
#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// Channel concatenation of the students' final maps.
    pub concat: Var,
    /// Encoded map with a single student's final shape.
    pub fused: Var,
    pub logits: Var,
    pub bn_updates: Vec<BnUpdate>,
}

/// Encoder from the concatenated student maps to one student-shaped map,
/// followed by a pooled linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModule {
    pub params: ParamSet,
    students: usize,
    channels: usize,
    reduce: ConvBn,
    refine: ConvBn,
    classifier: Linear,
}

impl FusionModule {
    pub fn new(students: usize, channels: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let mut ps = ParamSet::new();
        let reduce = ConvBn::new(&mut ps, rng, "encoder.reduce", students * channels, channels, 1, 1, true);
        let refine = ConvBn::new(&mut ps, rng, "encoder.refine", channels, channels, 3, 1, true);
        let classifier = Linear::new(&mut ps, rng, "classifier", channels, classes);
        FusionModule {
            params: ps,
            students,
            channels,
            reduce,
            refine,
            classifier,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// `features` are the final maps of all common students, in chain order.
    pub fn fuse(&self, tape: &mut Tape, bound: &Bound, features: &[Var], mode: NormMode) -> Result<FusionOutput> {
        if features.len() != self.students {
            return Err(Error::invalid(format!(
                "fusion module expects {} feature maps, got {}",
                self.students,
                features.len()
            )));
        }
        let first = tape.value(features[0]).dims4()?;
        if first.1 != self.channels {
            return Err(Error::invalid(format!(
                "fusion module expects {} channels, got {}",
                self.channels, first.1
            )));
        }
        for (i, &f) in features.iter().enumerate() {
            if tape.value(f).dims4()? != first {
                return Err(Error::invalid(format!(
                    "student {} feature shape {:?} differs from {:?}",
                    i + 1,
                    tape.value(f).shape(),
                    tape.value(features[0]).shape()
                )));
            }
        }
        let concat = tensor::concat_channels(tape, features)?;
        let mut pass = Pass::new(&self.params, bound, mode);
        let y = self.reduce.forward(tape, &mut pass, concat)?;
        let fused = self.refine.forward(tape, &mut pass, y)?;
        let pooled = tensor::global_avg_pool(tape, fused)?;
        let logits = self.classifier.forward(tape, &pass, pooled)?;
        Ok(FusionOutput {
            concat,
            fused,
            logits,
            bn_updates: pass.into_updates(),
        })
    }
}

/// Learned 1x1 expansion from a student's channel count to the concatenated
/// channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAligner {
    pub params: ParamSet,
    conv: Conv2d,
}

impl ChannelAligner {
    pub fn new(channels: usize, students: usize, rng: &mut impl Rng) -> Self {
        let mut ps = ParamSet::new();
        let conv = Conv2d::new(
            &mut ps,
            rng,
            "expand",
            channels,
            channels * students,
            1,
            ConvSpec::new(1, 0),
            true,
        );
        ChannelAligner { params: ps, conv }
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn align_channels(&self, tape: &mut Tape, bound: &Bound, f: Var) -> Result<Var> {
        let (_, c, _, _) = tape.value(f).dims4()?;
        if c != self.conv.c_in {
            return Err(Error::invalid(format!(
                "aligner expects {} channels, got {c}",
                self.conv.c_in
            )));
        }
        let pass = Pass::new(&self.params, bound, NormMode::Eval);
        self.conv.forward(tape, &pass, f)
    }
}
