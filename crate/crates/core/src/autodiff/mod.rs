//! Reverse-mode differentiation, small MLPs, losses and optimizers.

mod checkpoint;
mod loss;
mod mlp;
mod optim;
mod tape;

pub use checkpoint::{checkpoint_to_string, parse_checkpoint, read_checkpoint, write_checkpoint};
pub use loss::{cross_entropy, pseudo_huber, pseudo_huber_distance, Target};
pub use mlp::{
    build_mlp, forward, Activation, Head, Mlp, MlpNodes, MlpSpec, ParamVector, Segment, Weights,
    PROB_CLAMP,
};
pub use optim::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tape::{sigmoid, Adjoints, Tape, Var, VarRange};
