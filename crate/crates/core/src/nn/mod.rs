//! Keypoint localization network, keypoint classifier and the pieces needed
//! to train them.

pub mod adam;
pub mod backbone;
pub mod checkpoint;
pub mod kcn;
pub mod layers;
pub mod repr;

pub use backbone::{kln_forward, Backbone, KlnOutput, ReferenceCnn, ReferenceCnnConfig};
pub use kcn::{kcn_forward, Kcn, KcnConfig, KcnGrads};
pub use repr::{extract_representations, KeypointRepresentation};
