//! Manifests, stratified splitting, batching and image decoding.

mod batch;
mod manifest;
mod pnm;
mod split;
mod synthetic;

pub use batch::batch_iter;
pub use manifest::{
    class_counts, load_manifest, rebalance, Manifest, Record, Source, CLASS_NAMES, CLASS_SIZES,
};
pub use pnm::{decode_image, encode_pgm, encode_ppm, read_image, write_image};
pub use split::{split_counts, stratified_split, Partition, SplitAssignment};
pub use synthetic::{generate_shapes, render_shape, SHAPE_CLASSES};
