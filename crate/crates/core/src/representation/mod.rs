//! Token, sequence and label representations.

pub mod encoder;
pub mod labels;
pub mod plm;

use crate::tape::Matrix;

pub use encoder::RecurrentEncoder;
pub use labels::{embed_labels, LabelEmbeddingMatrix, LabelProvenance, WordVectors};
pub use plm::{embed_text, ContextualEncoder};

/// Contextual token embeddings, `l × d_plm`, with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualEmbedding {
    pub matrix: Matrix,
    pub mask: Vec<bool>,
}

/// Bidirectional encoding, `l × 2H`; masked rows are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub matrix: Matrix,
    pub mask: Vec<bool>,
}
