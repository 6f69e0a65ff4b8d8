//! Ex ante accuracy of dispersion forecasts under unanticipated market shocks.

pub mod accuracy;
pub mod bootstrap;
pub mod dataio;
pub mod error;
pub mod lmm;
pub mod measures;
pub mod panel;
pub mod pipeline;
pub mod predictor;
pub mod rng;
pub mod scenarios;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/measures.md")]
    mod measures {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/forecast.md")]
    mod forecast {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/bootstrap.md")]
    mod bootstrap {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
