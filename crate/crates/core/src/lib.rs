pub mod agents;
pub mod citeval;
pub mod communities;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod llm;
pub mod pipeline;
pub mod synthetic;
pub mod traversal;
mod util;

pub use error::{Error, Result};

// The guide's code samples run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/quickstart.md")]
    mod quickstart {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/graph.md")]
    mod graph {}
    #[doc = include_str!("../../../book/src/communities.md")]
    mod communities {}
    #[doc = include_str!("../../../book/src/generation.md")]
    mod generation {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/outputs.md")]
    mod outputs {}
}
