//! Procedural corpus, synthetic multi-view generation and the on-disk
//! dataset layout (`manifest.json` plus one stacked-view PGM per sample).

mod corpus;
mod dataset;
mod image;

pub use corpus::{
    child_seed, procedural_corpus, render_shape, ShapeClass, ShapeParams, NOISE_SIGMA,
};
pub use dataset::{
    make_multiview, make_multiview_chain, Dataset, DatasetConfig, Manifest, MultiViewSample,
    SampleEntry, Split, ViewEntry, MANIFEST_FILE,
};
pub use image::{decode_pgm, encode_pgm, Image};
