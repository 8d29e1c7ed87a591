//! Online training augmentation: upscale, random crop back to the input side,
//! random horizontal flip. Every channel gets the same geometric transform.

use ndarray::{s, Array3, Axis};
use rand::Rng;

use crate::dataio::image::resize_plane;
use crate::dataio::stack::StackedSample;

/// Geometric parameters of one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentParams {
    pub upscaled: usize,
    pub crop_x: usize,
    pub crop_y: usize,
    pub flip: bool,
}

/// Side length the input is upscaled to before cropping (256 for a 224 input).
pub fn upscaled_side(side: usize) -> usize {
    (side * 256 + 112) / 224
}

pub fn draw_params<R: Rng + ?Sized>(side: usize, rng: &mut R) -> AugmentParams {
    let upscaled = upscaled_side(side);
    let slack = upscaled - side;
    AugmentParams {
        upscaled,
        crop_x: rng.gen_range(0..=slack),
        crop_y: rng.gen_range(0..=slack),
        flip: rng.gen_bool(0.5),
    }
}

pub fn augment<R: Rng + ?Sized>(sample: &StackedSample, rng: &mut R) -> StackedSample {
    let (h, w) = sample.side();
    debug_assert_eq!(h, w, "augmentation expects square samples");
    let params = draw_params(h, rng);
    apply(sample, params)
}

pub fn apply(sample: &StackedSample, params: AugmentParams) -> StackedSample {
    let (side, _) = sample.side();
    let c = sample.channels();
    let mut out = Array3::zeros((c, side, side));
    for ch in 0..c {
        let up = resize_plane(
            sample.tensor.index_axis(Axis(0), ch),
            params.upscaled,
            params.upscaled,
        );
        let crop = up.slice(s![
            params.crop_y..params.crop_y + side,
            params.crop_x..params.crop_x + side
        ]);
        out.index_axis_mut(Axis(0), ch).assign(&crop);
    }
    let mut result = StackedSample {
        tensor: out,
        ..sample.clone()
    };
    if params.flip {
        result = flip_horizontal(&result);
    }
    result
}

pub fn flip_horizontal(sample: &StackedSample) -> StackedSample {
    StackedSample {
        tensor: sample.tensor.slice(s![.., .., ..;-1]).to_owned(),
        ..sample.clone()
    }
}
