//! Zero-resource speech pattern discovery.
//!
//! The pipeline discovers acoustic tokens from unlabeled speech with a grid
//! of left-to-right HMM tokenizers (`hmmtok`, orchestrated by `matlayers`),
//! cross-refines the token inventories by boundary fusion and LDA relabeling
//! (`reinforce`), trains a multi-target bottleneck network on the token
//! labels (`mdnn`), and feeds the bottleneck features back for further
//! iterations. Discovered tokens and features drive query-by-example spoken
//! term detection (`matching`) and are scored by `evalkit`.
//!
//! All on-disk artifacts (features, labels, models, manifests) live in
//! `corpusio` so every stage is resumable and inspectable.

pub mod corpusio;
pub mod error;
pub mod evalkit;
pub mod frontend;
pub mod hmmtok;
pub mod matching;
pub mod matlayers;
pub mod mdnn;
pub mod reinforce;
pub mod types;

#[cfg(feature = "oracle")]
pub mod oracle;

pub use error::{Error, Result};
pub use types::{FeatureSequence, FeatureSet, Labeling, LayerId, Segment};
