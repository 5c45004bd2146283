//! Student backbone, fusion module, channel aligner and self-distillation
//! module, built on the tape in [`crate::tensor`].
//!
//! Components own their parameters in a [`ParamSet`]. A forward pass binds
//! the set onto a tape (as trainable leaves or as constants) and returns tape
//! handles plus any batch-norm running-statistics updates, which the caller
//! commits with [`ParamSet::apply_bn_updates`].

mod backbone;
mod fusion;
mod group;
mod layers;
mod params;
mod sd;

pub use backbone::{BackboneSpec, StudentBackbone, StudentOutput};
pub use fusion::{ChannelAligner, FusionModule, FusionOutput};
pub use group::{build_group, component_names, StudentGroup};
pub use layers::{NormMode, BN_EPS, BN_MOMENTUM};
pub use params::{BnUpdate, Bound, ParamSet};
pub use sd::{SdOutput, SelfDistillModule};
