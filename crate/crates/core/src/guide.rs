//! The long-form guide, one module per book chapter.
//!
//! Each module's documentation is included verbatim from `book/src/`, so the
//! rendered book and the rustdoc guide are the same text and `cargo test`
//! compiles and runs every example the book shows. A failing doc-test names
//! the chapter module it came from.

#[doc = include_str!("../../../book/src/overview.md")]
pub mod overview {}

#[doc = include_str!("../../../book/src/propagators.md")]
pub mod propagators {}

#[doc = include_str!("../../../book/src/algebra.md")]
pub mod algebra {}

#[doc = include_str!("../../../book/src/perturbation.md")]
pub mod perturbation {}

#[doc = include_str!("../../../book/src/states.md")]
pub mod states {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
