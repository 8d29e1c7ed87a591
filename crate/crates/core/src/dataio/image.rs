//! Paired B-mode / elastography images and the geometric operations applied
//! to them before stacking.

use std::path::Path;

use image::{ColorType, DynamicImage};
use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::dataio::manifest::{DatasetManifest, ImageRecord};
use crate::error::{Error, Result};
use crate::types::{Label, Roi};

/// Model input side length.
pub const INPUT_SIDE: usize = 224;

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    /// H×W intensities in [0,1].
    pub gray: Array2<f32>,
    /// H×W×3 intensities in [0,1].
    pub color: Array3<f32>,
    pub label: Label,
    pub patient_id: String,
    pub image_id: String,
}

impl ImagePair {
    pub fn gray_dims(&self) -> (usize, usize) {
        self.gray.dim()
    }

    pub fn color_dims(&self) -> (usize, usize) {
        let (h, w, _) = self.color.dim();
        (h, w)
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Decode a record's image pair and attach its label.
pub fn load_pair(record: &ImageRecord, label: Label) -> Result<ImagePair> {
    let bmode = decode(&record.bmode_path)?;
    let gray = bmode.to_luma8();
    let (w, h) = gray.dimensions();
    let gray = Array2::from_shape_vec(
        (h as usize, w as usize),
        gray.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect(),
    )
    .expect("luma buffer matches dimensions");

    let elasto = decode(&record.elasto_path)?;
    match elasto.color() {
        ColorType::Rgb8 | ColorType::Rgba8 | ColorType::Rgb16 | ColorType::Rgba16 => {}
        other => {
            return Err(Error::ChannelCount {
                path: record.elasto_path.clone(),
                expected: 3,
                found: usize::from(other.channel_count()),
            })
        }
    }
    let rgb = elasto.to_rgb8();
    let (w, h) = rgb.dimensions();
    let color = Array3::from_shape_vec(
        (h as usize, w as usize, 3),
        rgb.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect(),
    )
    .expect("rgb buffer matches dimensions");

    Ok(ImagePair {
        gray,
        color,
        label,
        patient_id: record.patient_id.clone(),
        image_id: record.image_id.clone(),
    })
}

/// Load a manifest record, looking its label up in the manifest.
pub fn load_record(manifest: &DatasetManifest, record: &ImageRecord) -> Result<ImagePair> {
    let label = manifest
        .label_of(&record.patient_id)
        .ok_or_else(|| Error::InvalidSplit(format!("unknown patient {}", record.patient_id)))?;
    load_pair(record, label)
}

/// Crop both modalities with the same rectangle.
pub fn crop_lesion(pair: &ImagePair, roi: Roi) -> Result<ImagePair> {
    if roi.w == 0 || roi.h == 0 {
        return Err(Error::EmptyRoi);
    }
    for (h, w) in [pair.gray_dims(), pair.color_dims()] {
        if !roi.fits(w, h) {
            return Err(Error::RoiOutOfBounds {
                image_id: pair.image_id.clone(),
                roi: roi.to_string(),
                width: w,
                height: h,
            });
        }
    }
    let rows = roi.y..roi.y + roi.h;
    let cols = roi.x..roi.x + roi.w;
    Ok(ImagePair {
        gray: pair
            .gray
            .slice(ndarray::s![rows.clone(), cols.clone()])
            .to_owned(),
        color: pair.color.slice(ndarray::s![rows, cols, ..]).to_owned(),
        label: pair.label,
        patient_id: pair.patient_id.clone(),
        image_id: pair.image_id.clone(),
    })
}

/// Resize both modalities to `side`×`side` with bilinear interpolation.
pub fn resize_pair(pair: &ImagePair, side: usize) -> Result<ImagePair> {
    if side < 1 {
        return Err(Error::InvalidSize(side));
    }
    let (gh, gw) = pair.gray_dims();
    let (ch, cw) = pair.color_dims();
    if gh == 0 || gw == 0 || ch == 0 || cw == 0 {
        return Err(Error::SizeMismatch("empty image".into()));
    }
    let gray = resize_plane(pair.gray.view(), side, side);
    let mut color = Array3::zeros((side, side, 3));
    for c in 0..3 {
        let plane = resize_plane(pair.color.index_axis(Axis(2), c), side, side);
        color.index_axis_mut(Axis(2), c).assign(&plane);
    }
    Ok(ImagePair {
        gray,
        color,
        label: pair.label,
        patient_id: pair.patient_id.clone(),
        image_id: pair.image_id.clone(),
    })
}

/// Half-pixel-centred bilinear resampling (no antialiasing), the same
/// convention as `align_corners=False` interpolation in common DL toolkits.
pub fn resize_plane(src: ArrayView2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (in_h, in_w) = src.dim();
    if in_h == out_h && in_w == out_w {
        return src.to_owned();
    }
    let ys = axis_taps(in_h, out_h);
    let xs = axis_taps(in_w, out_w);
    let mut out = Array2::zeros((out_h, out_w));
    for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
            let top = lerp(src[[y0, x0]], src[[y0, x1]], lx);
            let bottom = lerp(src[[y1, x0]], src[[y1, x1]], lx);
            out[[oy, ox]] = lerp(top, bottom, ly);
        }
    }
    out
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Source index pair and blend weight for each output coordinate.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f32 / out_len as f32;
    (0..out_len)
        .map(|o| {
            let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src as usize).min(in_len - 1);
            let i1 = if i0 + 1 < in_len { i0 + 1 } else { i0 };
            (i0, i1, src - i0 as f32)
        })
        .collect()
}
