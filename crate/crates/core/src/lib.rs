pub mod align;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod harness;
pub mod objectives;
pub mod params;
pub mod prompt;
pub mod synthdata;
pub mod tensor;
pub mod text_encoder;
pub mod unet;

pub use error::{Error, Result};
