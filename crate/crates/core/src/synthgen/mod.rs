//! Synthetic person images with exact parsing ground truth.

mod dataset;
mod io;
mod parts;
mod render;

pub use dataset::{dataset_identities, downsample_parsing, generate_dataset, DatasetSplit};
pub use io::{load_dataset, save_dataset, ManifestEntry, SPLITS};
pub use parts::{PartLabel, PartVocabulary, IGNORE, MAX_PARTS};
pub use render::{generate_identities, IdentitySpec, Renderer, Rgb, SynthConfig, SyntheticSample};
