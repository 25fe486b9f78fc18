pub mod contamination;
pub mod data;
pub mod diagnostics;
pub mod inference;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod trainer;

// Book chapters, compiled and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/architecture.md")]
    mod architecture {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/contamination.md")]
    mod contamination {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
