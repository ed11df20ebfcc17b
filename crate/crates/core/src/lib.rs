pub mod autograd;
pub mod cam;
pub mod crf;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod tensor;

pub use error::{CtdnError, Result};
