//! Semi-supervised keypoint localization.
//!
//! A localization network predicts one heatmap per keypoint. Besides the
//! supervised heatmap loss on labeled images, training uses three
//! unsupervised terms that also apply to unlabeled images:
//!
//! * semantic consistency: representations pooled from the feature map under
//!   each heatmap must be classifiable by keypoint index;
//! * transformation equivariance: heatmaps of a warped image must match the
//!   warped heatmaps of the original;
//! * transformation invariance: the pooled representations must not change
//!   under the warp.

pub mod data_io;
pub mod datamodel;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod heatmap;
pub mod losses;
pub mod nn;
pub mod sampling;
pub mod training;
pub mod warp;

pub use error::{Error, Result};
