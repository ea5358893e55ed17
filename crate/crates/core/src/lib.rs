//! Memory-equipped self-attention (SAN-M) and DFSMN sub-layers in an
//! attention encoder-decoder for speech recognition, with a small
//! reverse-mode autodiff, a training loop, a low-frame-rate front end and
//! analysis tools.

mod binio;

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod error;
pub mod frontend;
pub mod kv;
pub mod memory;
pub mod model;
pub mod sanm;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ParseErrorKind, Result};
pub use tensor::Tensor;
