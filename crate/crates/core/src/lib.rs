//! Margin-trained embedding digests stored in a cosine k-NN database, for
//! telling human from generated content and attributing the generator.
//!
//! The crate is organized around three stages: train an embedder with an
//! ArcFace-style loss ([`losses`], [`embedder`]), store L2-normalized digests
//! in a [`store::HashStore`], then classify by nearest neighbours. New
//! generator classes are added by appending digests; nothing is retrained.

mod codec;
pub mod embedder;
pub mod error;
pub mod featurizer;
pub mod datagen;
pub mod losses;
pub mod numeric;
pub mod pipeline;
pub mod store;

pub use codec::write_atomic;
pub use error::{Error, Result};
