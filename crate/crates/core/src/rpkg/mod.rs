//! Relational prior knowledge graphs: class embeddings plus pairwise
//! statistics (co-occurrence, relative orientation, relative distance)
//! gathered from an annotated corpus.

mod corpus;
mod embeddings;
mod graph;
mod io;
mod priors;

pub use corpus::{
    ingest_corpus, read_corpus, AnnotatedImage, BBox, Corpus, LabelMap, ObjectInstance,
};
pub use embeddings::{
    embeddings_json, load_class_embeddings, parse_class_embeddings, save_class_embeddings,
    synthetic_embeddings,
};
pub use graph::{
    assemble_rpkg, build_rpkg, ComputedPriors, Relation, RelationalPriorKnowledgeGraph,
};
pub use io::{load_rpkg, read_rpkg, save_rpkg, write_rpkg, RPKG_VERSION};
pub use priors::{compute_cooccurrence, compute_distance, compute_orientation};
