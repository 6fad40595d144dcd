//! Compiles every code block in the guide under `book/` as a doctest, so
//! `cargo test --doc` keeps the narrative and the library in sync. One
//! module per chapter makes a failing snippet traceable to its file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/kernels.md")]
pub mod kernels {}

#[doc = include_str!("../../../book/src/gaussian-processes.md")]
pub mod gaussian_processes {}

#[doc = include_str!("../../../book/src/optimizer.md")]
pub mod optimizer {}

#[doc = include_str!("../../../book/src/latent-fusion.md")]
pub mod latent_fusion {}

#[doc = include_str!("../../../book/src/data-pipeline.md")]
pub mod data_pipeline {}

#[doc = include_str!("../../../book/src/baselines.md")]
pub mod baselines {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
