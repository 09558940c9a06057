//! Synthetic data, annotation files and run artifacts.

pub mod annotations;
pub mod persist;
pub mod synthetic;

pub use annotations::{load_annotations, save_annotations};
pub use persist::{ArtifactEntry, ArtifactKind, Manifest, RunDir};
pub use synthetic::{generate_synthetic, SyntheticConfig};
