use rand::Rng;

use super::backbone::BackboneSpec;
use super::layers::{NormMode, Pass, UpBlock};
use super::params::{BnUpdate, Bound, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Outputs of one self-distillation pass.
#[derive(Clone, Debug)]
pub struct SdOutput {
    /// Reconstructions of taps `1..M-1`, ordered shallow to deep so that
    /// index `m` lines up with the student's tap `m`.
    pub levels: Vec<Var>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Top-down stack of upsampling blocks mapping the deepest tap back to the
/// shapes of the shallower taps.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfDistillModule {
    pub params: ParamSet,
    /// `blocks[m]` maps tap `m + 1` to tap `m`.
    blocks: Vec<UpBlock>,
    shapes: Vec<(usize, usize, usize)>,
}

impl SelfDistillModule {
    pub fn new(spec: &BackboneSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.tap_shapes();
        let mut ps = ParamSet::new();
        let mut blocks = Vec::with_capacity(shapes.len().saturating_sub(1));
        // Registered deep to shallow so parameter order follows data flow.
        let mut rev = Vec::new();
        for m in (0..shapes.len().saturating_sub(1)).rev() {
            let (c_hi, h_hi, _) = shapes[m + 1];
            let (c_lo, h_lo, _) = shapes[m];
            if h_lo % h_hi != 0 || !(h_lo / h_hi == 1 || (h_lo / h_hi) % 2 == 0) {
                return Err(Error::config(format!(
                    "unsupported spatial ratio {h_lo}/{h_hi} between taps {m} and {}",
                    m + 1
                )));
            }
            rev.push(UpBlock::new(&mut ps, rng, &format!("block{m}"), c_hi, c_lo, h_lo / h_hi));
        }
        while let Some(b) = rev.pop() {
            blocks.push(b);
        }
        Ok(SelfDistillModule {
            params: ps,
            blocks,
            shapes,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn outputs(&self) -> usize {
        self.blocks.len()
    }

    /// Applies the blocks top-down starting from a deepest-tap-shaped `top`.
    pub fn sd_forward(&self, tape: &mut Tape, bound: &Bound, top: Var, mode: NormMode) -> Result<SdOutput> {
        let (_, c, h, w) = tape.value(top).dims4()?;
        if (c, h, w) != *self.shapes.last().expect("at least one level") {
            return Err(Error::invalid(format!(
                "self-distillation input {:?} does not match the deepest tap {:?}",
                tape.value(top).shape(),
                self.shapes.last()
            )));
        }
        let mut pass = Pass::new(&self.params, bound, mode);
        let mut levels = vec![top; self.blocks.len()];
        let mut y = top;
        for m in (0..self.blocks.len()).rev() {
            y = self.blocks[m].forward(tape, &mut pass, y)?;
            levels[m] = y;
        }
        Ok(SdOutput {
            levels,
            bn_updates: pass.into_updates(),
        })
    }
}
