//! Dense matrices and the hand-differentiated layers built on them.

pub mod gradcheck;
pub mod layers;
mod matrix;
pub mod params;

pub use gradcheck::{grad_check, GradCheckError, GradCheckReport};
pub use layers::{AttentionCache, AttentionInputGrads, CrossAttention, Linear};
pub use matrix::Matrix;
pub(crate) use matrix::{read_u32, read_u64};
pub use params::Parameters;
