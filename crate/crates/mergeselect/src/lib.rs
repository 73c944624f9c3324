//! Merge-select sparse attention, long-context position scaling, and a small
//! training harness for validating both against dense oracles.

pub mod attention;
pub mod error;
pub mod harness;
pub mod model;
pub mod num;
pub mod positional;
pub mod recursion;

pub use error::{MsError, Result};

// Compile and run every code block in the guide alongside the unit tests,
// so the book cannot drift from the crate it documents.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/attention.md")]
    pub struct Attention;
    #[doc = include_str!("../../../book/src/positional.md")]
    pub struct Positional;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/recursion.md")]
    pub struct Recursion;
    #[doc = include_str!("../../../book/src/harness.md")]
    pub struct Harness;
}
