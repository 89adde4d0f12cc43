//! The chapters of `book/` compiled as doc-tests, so the snippets stay in
//! step with the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/molecules.md")]
pub mod molecules {}

#[doc = include_str!("../../../book/src/statistics.md")]
pub mod statistics {}

#[doc = include_str!("../../../book/src/weighting.md")]
pub mod weighting {}

#[doc = include_str!("../../../book/src/pretraining.md")]
pub mod pretraining {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
