//! Dense matrices, the reverse-mode tape, parameter storage with Adam, and a
//! central-difference gradient checker.

mod gradcheck;
mod matrix;
mod params;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::Matrix;
pub use params::{adam_step, Param, ParamGroup, ParamId, ParamStore, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tape::{bce_loss, Activation, Gradients, Tape, Var, BCE_EPS};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}
