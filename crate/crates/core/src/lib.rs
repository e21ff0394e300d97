//! Contrastive acoustic word embeddings for zero-resource languages.
//!
//! The crate covers the whole pipeline: MFCC features ([`feats`]), labelled
//! word segments and a synthetic language-family corpus ([`corpus`]), the
//! recurrent encoder ([`encoder`]) and its contrastive training ([`train`]),
//! same-different evaluation ([`eval`]), query-by-example search ([`qbe`]),
//! and the cross-lingual experiment protocols ([`expt`]).

mod binio;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod expt;
pub mod feats;
pub mod linalg;
pub mod qbe;
pub mod train;

pub use corpus::{PositivePair, SegmentStore, SyntheticFamilySpec, WordSegment};
pub use encoder::{CellType, EncoderConfig, EncoderParams};
pub use error::{AweError, Result};
pub use eval::{ApResult, LabelledEmbedding};
pub use feats::{FeatureSequence, MfccConfig, Waveform};
pub use train::TrainConfig;
