//! Generative retrieval over embedding corpora.
//!
//! Items are clustered into a tree ([`semtree`]) and named by their paths. A
//! sequence-to-sequence model ([`seq2seq`]) learns to generate those paths
//! from query text; [`decode`] keeps generation on real paths, and
//! [`pipeline`] expands the generated paths into candidates and reranks them.

pub mod config;
pub mod corpus;
pub mod decode;
pub mod embed_store;
pub mod pipeline;
pub mod semtree;
pub mod seq2seq;
pub mod vecmath;
