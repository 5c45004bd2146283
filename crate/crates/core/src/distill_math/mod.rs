//! Loss terms and feature transforms of the distillation method.
//!
//! Everything here is a pure `f64` function of its inputs. Each differentiable
//! term comes with a `_grad` companion returning the gradient with respect to
//! the trainable argument(s); targets are treated as constants.

mod attention;
mod logits;
mod matching;
mod objective;
mod types;

pub use attention::{
    attention_map, attention_map_vjp, attention_to_feature, diversify_attention, diversity_threshold, RATIO_EPS,
};
pub use logits::{
    base_loss, base_loss_grad, cross_entropy, cross_entropy_grad, ensemble_logits, fusion_loss, fusion_loss_grad,
    kl_divergence, kl_divergence_grad, softened_prediction, LOG_EPS,
};
pub use matching::{
    chain_diversity_loss, chain_diversity_loss_grad, leader_feature_loss, leader_feature_loss_grad,
    leader_self_loss, leader_self_loss_grad, naive_diversity_loss, naive_diversity_loss_grad, normalized_l2_match,
    normalized_l2_match_grad, sd_chain_diversity_loss, sd_chain_diversity_loss_grad, sd_module_loss,
    sd_module_loss_grad, NORM_EPS,
};
pub use objective::{common_student_loss, leader_loss};
pub use types::{AttentionMap, FeatureMap, Logits, LossTerm, LossValue, SampleMap, SoftPrediction};
