//! Differentiable computation for sigmoid feedforward networks.
//!
//! [`Graph`] is a matrix-valued reverse-mode tape. MLP input Jacobians are
//! built from ordinary graph nodes ([`mlp_graph_with_jacobian`]), so losses
//! that contain a Jacobian can be differentiated with respect to parameters
//! without special casing.

mod check;
mod graph;
mod mlp;
mod params;

pub use check::{
    checked_grad, finite_difference_check, grad, relative_error, GradReport, LossBuilder,
};
pub use graph::{sigmoid, sigmoid_prime, Gradients, Graph, Mat, NodeId};
pub use mlp::{
    mlp_forward, mlp_graph, mlp_graph_with_jacobian, mlp_input_jacobian, Activation, Mlp, MlpSpec,
};
pub use params::{glorot_uniform, ParamStore};
