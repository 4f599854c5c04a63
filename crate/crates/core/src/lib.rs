pub mod error;
pub mod io;
pub mod lsq;
pub mod merge;
pub mod tensor;

pub use error::{Error, ErrorCategory, Result};
pub use tensor::{elementwise_combine, frobenius_norm, DType, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/least_squares.md")]
    mod least_squares {}
    #[doc = include_str!("../../../book/src/sample_weighted.md")]
    mod sample_weighted {}
    #[doc = include_str!("../../../book/src/norm_aware.md")]
    mod norm_aware {}
    #[doc = include_str!("../../../book/src/strategies.md")]
    mod strategies {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
