//! Dataset handling: manifests, image pairs, stacking, augmentation,
//! patient-level splitting and synthetic phantoms.

pub mod augment;
pub mod image;
pub mod manifest;
pub mod split;
pub mod stack;
pub mod synth;

pub use self::augment::{augment, AugmentParams};
pub use self::image::{crop_lesion, load_pair, resize_pair, ImagePair, INPUT_SIDE};
pub use self::manifest::{parse_manifest, DatasetManifest, ImageRecord, ManifestRow, PatientRecord};
pub use self::split::{split_patients, SplitPlan};
pub use self::stack::{stack_modalities, StackedSample};
pub use self::synth::{generate_synthetic, SignalChannels, SynthConfig};

use crate::error::Result;
use crate::types::Modality;

/// Load, optionally lesion-crop, resize and stack one manifest record.
pub fn prepare_sample(
    manifest: &DatasetManifest,
    record: &ImageRecord,
    modality: Modality,
    crop: bool,
    side: usize,
) -> Result<StackedSample> {
    let mut pair = self::image::load_record(manifest, record)?;
    if crop {
        if let Some(roi) = record.roi {
            pair = crop_lesion(&pair, roi)?;
        }
    }
    let pair = resize_pair(&pair, side)?;
    stack_modalities(&pair, modality)
}
