use ndarray::{Array3, Axis};

use crate::dataio::image::ImagePair;
use crate::error::{Error, Result};
use crate::types::{Label, Modality};

/// Per-channel RGB statistics of the pretraining corpus.
pub const RGB_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const RGB_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// A C×H×W model input with values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct StackedSample {
    pub tensor: Array3<f32>,
    pub label: Label,
    pub patient_id: String,
    pub image_id: String,
    pub modality: Modality,
}

impl StackedSample {
    pub fn channels(&self) -> usize {
        self.tensor.dim().0
    }

    pub fn side(&self) -> (usize, usize) {
        let (_, h, w) = self.tensor.dim();
        (h, w)
    }
}

/// Stack a square pair into model channels.
///
/// `B` replicates gray three times, `Se` keeps `[R, G, B]`, `Bse` gives
/// `[gray, R, G, B]`. No spatial registration is attempted.
pub fn stack_modalities(pair: &ImagePair, modality: Modality) -> Result<StackedSample> {
    let (gh, gw) = pair.gray_dims();
    let (ch, cw) = pair.color_dims();
    if (gh, gw) != (ch, cw) {
        return Err(Error::SizeMismatch(format!(
            "gray {gh}x{gw} vs color {ch}x{cw}"
        )));
    }
    let mut t = Array3::zeros((modality.channels(), gh, gw));
    match modality {
        Modality::B => {
            for c in 0..3 {
                t.index_axis_mut(Axis(0), c).assign(&pair.gray);
            }
        }
        Modality::Se => {
            for c in 0..3 {
                t.index_axis_mut(Axis(0), c)
                    .assign(&pair.color.index_axis(Axis(2), c));
            }
        }
        Modality::Bse => {
            t.index_axis_mut(Axis(0), 0).assign(&pair.gray);
            for c in 0..3 {
                t.index_axis_mut(Axis(0), c + 1)
                    .assign(&pair.color.index_axis(Axis(2), c));
            }
        }
    }
    Ok(StackedSample {
        tensor: t,
        label: pair.label,
        patient_id: pair.patient_id.clone(),
        image_id: pair.image_id.clone(),
        modality,
    })
}

/// Mean/std used to standardize each channel of a modality. The gray plane
/// of `Bse` uses the average of the RGB statistics.
pub fn channel_stats(modality: Modality) -> Vec<(f32, f32)> {
    let rgb = RGB_MEAN.iter().copied().zip(RGB_STD.iter().copied());
    match modality {
        Modality::B | Modality::Se => rgb.collect(),
        Modality::Bse => {
            let gm = RGB_MEAN.iter().sum::<f32>() / 3.0;
            let gs = RGB_STD.iter().sum::<f32>() / 3.0;
            std::iter::once((gm, gs)).chain(rgb).collect()
        }
    }
}

/// Standardize a [0,1] C×H×W tensor in place.
pub fn standardize(tensor: &mut Array3<f32>, modality: Modality) {
    for (c, (m, s)) in channel_stats(modality).into_iter().enumerate() {
        tensor
            .index_axis_mut(Axis(0), c)
            .mapv_inplace(|v| (v - m) / s);
    }
}
