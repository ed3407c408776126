//! Dense tensors, reverse-mode autodiff and the neural building blocks the
//! rest of the engine is written against.

mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod program;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{compare_gradient, finite_diff_check, param_grad_check, relative_error, GradReport};
pub use graph::{accumulate, Graph, HasParams, NamedGrads, Param};
pub use nn::{Activation, LayerNorm, Linear, Mlp, SelfAttention, TransformerBlock};
pub use program::{eval_graph, Evaluation, Input, Instr, Program};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
