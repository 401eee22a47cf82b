//! Bags, datasets and their on-disk formats.

mod bag;
mod bagfile;
mod kfold;
mod manifest;
mod synth;

pub use bag::{Bag, Dataset, Split};
pub use bagfile::{decode_bag, encode_bag, read_bag_file, write_bag_file, BAG_MAGIC, BAG_VERSION};
pub use kfold::{stratified_kfold, stratified_kfold_labels, Fold};
pub use manifest::{load_manifest, write_dataset, LATENT_FILE, MANIFEST_FILE};
pub use synth::{synth_dataset, SynthConfig};
