//! Grad-CAM heatmaps for single backbones and the fused ensemble, plus
//! colour overlays.
//!
//! Each activation channel is weighted by the spatial mean of the target
//! score's gradient; the weighted sum is rectified, bilinearly upsampled to
//! the input size and max-normalized. For the ensemble the AlexNet-side
//! weighted maps are resampled onto the ResNet-side grid before summation.

use std::path::Path;
use std::str::FromStr;

use candle_core::{Tensor, Var};
use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::dataio::image::resize_plane;
use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};
use crate::nn::{Backbone, NUM_CLASSES};
use crate::types::Label;

pub const DEFAULT_ALPHA: f32 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// Values at input resolution, non-negative.
    pub grid: Array2<f32>,
    pub normalized: bool,
    /// Spatial size of the activation grid the map was computed on.
    pub source_size: (usize, usize),
    pub target_class: Label,
}

impl Heatmap {
    pub fn max(&self) -> f32 {
        self.grid.iter().copied().fold(0.0, f32::max)
    }

    /// `(row, col)` of the largest value; the first one on ties.
    pub fn peak(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut v = f32::NEG_INFINITY;
        for ((r, c), &x) in self.grid.indexed_iter() {
            if x > v {
                v = x;
                best = (r, c);
            }
        }
        best
    }

    /// Export as JSON `{"rows", "cols", "target_class", "data"}`.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let (rows, cols) = self.grid.dim();
        let value = serde_json::json!({
            "rows": rows,
            "cols": cols,
            "target_class": self.target_class,
            "source_size": [self.source_size.0, self.source_size.1],
            "data": self.grid.iter().copied().collect::<Vec<f32>>(),
        });
        std::fs::write(path, serde_json::to_vec(&value)?).map_err(|e| Error::io(path, e))
    }
}

fn to_array3(t: &Tensor) -> Result<Array3<f32>> {
    let t = match t.rank() {
        4 => t.squeeze(0)?,
        3 => t.clone(),
        _ => return Err(Error::NoConvLayer),
    };
    let (k, h, w) = t.dims3()?;
    let v = t.flatten_all()?.to_vec1::<f32>()?;
    Ok(Array3::from_shape_vec((k, h, w), v).expect("dims match"))
}

/// `Σ_k mean(grad_k) · act_k` before rectification.
pub fn weighted_map(act: &Array3<f32>, grad: &Array3<f32>) -> Result<Array2<f32>> {
    if act.dim() != grad.dim() {
        return Err(Error::Shape(format!(
            "activation {:?} vs gradient {:?}",
            act.dim(),
            grad.dim()
        )));
    }
    let (_, h, w) = act.dim();
    let mut map = Array2::zeros((h, w));
    for (a, g) in act.axis_iter(Axis(0)).zip(grad.axis_iter(Axis(0))) {
        let weight = g.mean().unwrap_or(0.0);
        map.scaled_add(weight, &a);
    }
    Ok(map)
}

/// Rectify, upsample and max-normalize a combined map.
pub fn finalize(map: &Array2<f32>, out: (usize, usize), target: Label) -> Heatmap {
    let rect = map.mapv(|v| v.max(0.0));
    let mut grid = resize_plane(rect.view(), out.0, out.1).mapv(|v| v.max(0.0));
    let max = grid.iter().copied().fold(0.0f32, f32::max);
    if max > 0.0 {
        grid.mapv_inplace(|v| v / max);
    }
    Heatmap {
        grid,
        normalized: true,
        source_size: map.dim(),
        target_class: target,
    }
}

fn resolve_target(logits: &Tensor, target: Option<usize>) -> Result<usize> {
    match target {
        Some(t) if t >= NUM_CLASSES => Err(Error::ClassOutOfRange(t)),
        Some(t) => Ok(t),
        None => Ok(logits.squeeze(0)?.argmax(0)?.to_scalar::<u32>()? as usize),
    }
}

/// Weighted maps of each tapped activation for the target logit of a
/// single-sample forward pass. Returns the maps and the resolved target.
pub fn grad_cam_maps(logits: &Tensor, acts: &[&Var], target: Option<usize>) -> Result<(Vec<Array2<f32>>, usize)> {
    if acts.is_empty() {
        return Err(Error::NoConvLayer);
    }
    let (n, k) = logits.dims2()?;
    if n != 1 {
        return Err(Error::Shape(format!("Grad-CAM takes one sample, got {n}")));
    }
    let t = resolve_target(logits, target)?;
    if t >= k {
        return Err(Error::ClassOutOfRange(t));
    }
    let score = logits.get(0)?.get(t)?;
    let grads = score.backward()?;
    let mut maps = Vec::with_capacity(acts.len());
    for act in acts {
        let a = to_array3(act.as_tensor())?;
        let g = match grads.get(act.as_tensor()) {
            Some(g) => to_array3(g)?,
            None => Array3::zeros(a.dim()),
        };
        maps.push(weighted_map(&a, &g)?);
    }
    Ok((maps, t))
}

fn input_size(x: &Tensor) -> Result<(usize, usize)> {
    let (n, _, h, w) = x.dims4()?;
    if n != 1 {
        return Err(Error::Shape(format!("Grad-CAM takes one sample, got {n}")));
    }
    Ok((h, w))
}

/// Grad-CAM of a backbone whose penultimate features feed `head`.
/// With `grid`, the weighted map is resampled onto that grid before
/// rectification, as the ensemble does for its AlexNet side.
pub fn gradcam_with_head<F>(
    model: &Backbone,
    x: &Tensor,
    head: F,
    target: Option<usize>,
    grid: Option<(usize, usize)>,
) -> Result<Heatmap>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let size = input_size(x)?;
    let (feats, act) = model.cam_features(x)?;
    let logits = head(&feats)?;
    let (maps, t) = grad_cam_maps(&logits, &[&act], target)?;
    let map = match grid {
        Some((h, w)) => resize_plane(maps[0].view(), h, w),
        None => maps[0].clone(),
    };
    Ok(finalize(&map, size, Label::from_index(t)?))
}

/// Grad-CAM of a backbone's own classifier; `target` defaults to the
/// predicted class.
pub fn gradcam_single(model: &Backbone, x: &Tensor, target: Option<usize>) -> Result<Heatmap> {
    if !model.has_head() {
        return Err(Error::MissingHead);
    }
    gradcam_with_head(model, x, |f| model.classify_features(f), target, None)
}

/// Grad-CAM through the fused head into both extractors.
pub fn gradcam_ensemble(model: &EnsembleModel, x: &Tensor, target: Option<usize>) -> Result<Heatmap> {
    let size = input_size(x)?;
    let (fa, act_a) = model.extractor_a().cam_features(x)?;
    let (fb, act_b) = model.extractor_b().cam_features(x)?;
    let logits = model.head_logits(&Tensor::cat(&[&fa, &fb], 1)?)?;
    let (maps, t) = grad_cam_maps(&logits, &[&act_a, &act_b], target)?;
    let (gh, gw) = maps[1].dim();
    let combined = resize_plane(maps[0].view(), gh, gw) + &maps[1];
    Ok(finalize(&combined, size, Label::from_index(t)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colormap {
    Jet,
    Hot,
}

impl FromStr for Colormap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jet" => Ok(Self::Jet),
            "hot" => Ok(Self::Hot),
            other => Err(Error::Config(format!("unknown colormap {other:?}"))),
        }
    }
}

impl Colormap {
    /// RGB in `[0, 1]` for `v` in `[0, 1]`.
    pub fn color(self, v: f32) -> [f32; 3] {
        let v = v.clamp(0.0, 1.0);
        match self {
            Colormap::Jet => {
                let f = |x: f32| (1.5 - (4.0 * v - x).abs()).clamp(0.0, 1.0);
                [f(3.0), f(2.0), f(1.0)]
            }
            Colormap::Hot => [
                (3.0 * v).min(1.0),
                (3.0 * v - 1.0).clamp(0.0, 1.0),
                (3.0 * v - 2.0).clamp(0.0, 1.0),
            ],
        }
    }
}

/// Blend the colour-mapped heatmap over `source` with per-pixel weight
/// `alpha · h`; the source is resized to the heatmap first if needed.
pub fn overlay(heatmap: &Heatmap, source: &RgbImage, colormap: Colormap, alpha: f32) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let (h, w) = heatmap.grid.dim();
    let src = if source.dimensions() != (w as u32, h as u32) {
        image::imageops::resize(source, w as u32, h as u32, image::imageops::FilterType::Triangle)
    } else {
        source.clone()
    };
    if src.dimensions() != (w as u32, h as u32) {
        return Err(Error::SizeMismatch(format!("{:?} vs {w}x{h}", src.dimensions())));
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let v = heatmap.grid[[y as usize, x as usize]];
        let a = alpha * v;
        let c = colormap.color(v);
        let s = src.get_pixel(x, y).0;
        let mix = |i: usize| ((1.0 - a) * s[i] as f32 + a * 255.0 * c[i]).round().clamp(0.0, 255.0) as u8;
        *px = Rgb([mix(0), mix(1), mix(2)]);
    }
    Ok(out)
}

/// `<image_id>_<modality>_<class>.png`
pub fn overlay_file_name(image_id: &str, modality: &str, class: Label) -> String {
    format!("{image_id}_{modality}_{}.png", class.code())
}
