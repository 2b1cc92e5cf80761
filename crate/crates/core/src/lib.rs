//! Multi-tab website fingerprinting: traffic synthesis, defenses, features,
//! a small autodiff engine, the attention model and its metrics.

pub mod aggregate;
pub mod defenses;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod trace;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/traces.md")]
    mod traces {}
    #[doc = include_str!("../../../book/src/synthesis.md")]
    mod synthesis {}
    #[doc = include_str!("../../../book/src/defenses.md")]
    mod defenses {}
    #[doc = include_str!("../../../book/src/aggregation.md")]
    mod aggregation {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
