//! Desk-scale video-language alignment: a spatio-temporal graph transformer
//! block over patch tokens, trained with contrastive and soft-alignment
//! losses, with every gradient checked against finite differences.

pub mod bench;
pub mod block;
pub mod cli;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod eval;
pub mod graph;
pub mod loss;
pub mod model;
pub mod param;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Result, StgtError};

/// Runs every code block in the book as a doc-test so the guide cannot
/// drift out of sync with the library.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $path))]
            mod $name {}
        };
    }

    chapter!(intro, "intro.md");
    chapter!(tensors_and_gradients, "tensors-and-gradients.md");
    chapter!(positional_embeddings, "positional-embeddings.md");
    chapter!(spatio_temporal_graph, "spatio-temporal-graph.md");
    chapter!(graph_attention, "graph-attention.md");
    chapter!(alignment_losses, "alignment-losses.md");
    chapter!(training_and_retrieval, "training-and-retrieval.md");
    chapter!(cli, "cli.md");
    chapter!(file_formats, "file-formats.md");
}
