pub mod analyze;
pub mod backbone;
pub mod baselines;
pub mod checkpoint;
pub mod context;
pub mod data;
pub mod embed;
pub mod error;
pub mod matrix;
pub mod model;
pub mod reprogram;
pub mod series;
pub mod synth;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use matrix::{Matrix, Param, Parameters};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    pub mod data {}
    #[doc = include_str!("../../../book/src/prompts.md")]
    pub mod prompts {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    pub mod synthetic {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    pub mod analysis {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
