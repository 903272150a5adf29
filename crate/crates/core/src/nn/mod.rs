//! Model definitions, forward passes, losses and data.

pub mod data;
pub mod forward;
pub mod loss;
pub mod model;

pub use forward::{bind, forward, predict, Batch, Bound, ForwardMode};
pub use loss::{ce_loss, combined_loss, eval_loss, kl_loss, loss_and_grads, perplexity, LossKind, ModelGrads};
pub use model::{Family, Model, ModelSpec, ParamSlot};
