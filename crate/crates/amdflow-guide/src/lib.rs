//! Doc-tested mirror of the mdbook guide in `book/`.
//!
//! Each chapter is included verbatim as module documentation, so
//! `cargo test -p amdflow-guide --doc` compiles and runs every code
//! example in the guide. A drifting example fails the build instead of
//! quietly misleading readers.

#![doc = include_str!("../../../book/src/introduction.md")]

#[doc = include_str!("../../../book/src/structures.md")]
pub mod structures {}

#[doc = include_str!("../../../book/src/candidates.md")]
pub mod candidates {}

#[doc = include_str!("../../../book/src/screening.md")]
pub mod screening {}

#[doc = include_str!("../../../book/src/filtering.md")]
pub mod filtering {}

#[doc = include_str!("../../../book/src/calculations.md")]
pub mod calculations {}

#[doc = include_str!("../../../book/src/thermodynamics.md")]
pub mod thermodynamics {}

#[doc = include_str!("../../../book/src/engine.md")]
pub mod engine {}

#[doc = include_str!("../../../book/src/running.md")]
pub mod running {}
