//! Dual-modality ensemble transfer learning for breast ultrasound: B-mode and
//! strain-elastography images stacked into 4-channel samples, two fine-tuned
//! CNN backbones fused at their penultimate features, and patient-level
//! evaluation with voting, recognition rates, PPV statistics and Grad-CAM.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod ensemble;
pub mod error;
pub mod gradcam;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod training;
pub mod types;

pub use error::{Error, ErrorKind, Result};
pub use types::{Label, Modality, ProbRow, Roi};
