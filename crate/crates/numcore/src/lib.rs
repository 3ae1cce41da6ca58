//! Numerical substrate: dense arrays, a reverse-mode tape, Adam, gradient
//! clipping, Xavier initialization and finite-difference gradient checks.

pub mod array;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod optim;
pub mod tape;

pub use array::{matmul, Array};
pub use error::{NumError, Result};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck};
pub use init::{xavier_init, xavier_limit};
pub use optim::{clip_gradients, global_norm, AdamConfig, AdamState, ClipMode};
pub use tape::{selu, sigmoid, CustomOp, Tape, Var, PROB_EPS, SELU_ALPHA, SELU_LAMBDA};
