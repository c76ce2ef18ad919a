//! Minimal differentiable building blocks.
//!
//! Layers expose explicit `forward`/`backward` pairs instead of a tape:
//! `forward` returns whatever the backward pass needs, `backward` returns
//! gradients in the same order as the layer's [`Params::params`].

mod adam;
mod layers;
mod loss;
mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use layers::{
    linear, linear_backward, max_pool_points, max_pool_points_backward, relu, relu_backward,
    shared_point_mlp, LiftLayer, Linear, Mlp, MlpCache, PerPointFeatures, POINT_FEATURE_WIDTH,
};
pub use loss::softmax_cross_entropy;
pub use tensor::{glorot_uniform, install_grads, Params, Parameter, Tensor};
