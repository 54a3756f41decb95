//! Cascade graph neural networks for RGB-D salient object detection.
//!
//! Everything is built on a small reverse-mode tensor library ([`tensor`]):
//! twin toy encoders ([`backbone`]), graph-based reasoning over multi-scale
//! appearance and geometry nodes ([`graph`]), the cascaded multi-level
//! variant ([`cascade`]), end-to-end models and training ([`model`],
//! [`train`]), synthetic RGB-D scenes ([`data`]) and saliency metrics
//! ([`metrics`]).

pub mod ablation;
pub mod backbone;
pub mod cascade;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

/// Input stream a node or encoder belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    /// Color image.
    Appearance,
    /// Depth map.
    Geometry,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Appearance, Modality::Geometry];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn input_channels(self) -> usize {
        match self {
            Modality::Appearance => 3,
            Modality::Geometry => 1,
        }
    }

    /// Short name used in parameter names.
    pub fn tag(self) -> &'static str {
        match self {
            Modality::Appearance => "rgb",
            Modality::Geometry => "depth",
        }
    }
}
