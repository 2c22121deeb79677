//! Vacant parking space forecasting with graph-gated recurrent networks.
//!
//! Lots are joined into a graph by walking distance ([`graph`]). Models in
//! [`models`] read windows of normalized occupancy built by [`data`] and are
//! fitted by [`training`] on a small reverse-mode engine ([`autodiff`]).
//! [`forecasting`] turns trained models into direct or iterative forecasts,
//! and [`metrics`] scores them.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod forecasting;
pub mod fsutil;
pub mod graph;
pub mod metrics;
pub mod models;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/graph.md")]
    mod graph {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/forecasting.md")]
    mod forecasting {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
