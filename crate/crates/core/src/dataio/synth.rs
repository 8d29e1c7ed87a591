//! Deterministic synthetic phantoms standing in for clinical image pairs.
//!
//! Benign lesions are smooth, moderately hypoechoic ellipses with posterior
//! enhancement and soft elastography. Malignant lesions are spiculated, dark,
//! shadowing and stiff. With a single-modality signal, the other modality's
//! lesion appearance is drawn from a random pseudo-class per image, so it
//! carries no information about the label.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::manifest::{parse_manifest, write_manifest, DatasetManifest, ManifestRow};
use crate::error::{Error, Result};
use crate::types::{rng_stream, Label, Roi};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignalChannels {
    /// Class signal only in the B-mode image.
    #[serde(alias = "gray")]
    GrayOnly,
    /// Class signal only in the elastography image.
    #[serde(alias = "color")]
    ColorOnly,
    Both,
}

impl std::str::FromStr for SignalChannels {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gray" | "grayonly" => Ok(Self::GrayOnly),
            "color" | "coloronly" => Ok(Self::ColorOnly),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!("unknown signal {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Inclusive range of images per patient.
    pub images_per_patient: (usize, usize),
    /// Fraction of malignant patients.
    pub class_balance: f64,
    pub signal_channels: SignalChannels,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 40,
            images_per_patient: (3, 5),
            class_balance: 0.5,
            signal_channels: SignalChannels::Both,
            image_size: 160,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.images_per_patient;
        if self.n_patients == 0 {
            return Err(Error::InvalidSynthConfig("n_patients must be positive".into()));
        }
        if lo == 0 || hi < lo {
            return Err(Error::InvalidSynthConfig(format!(
                "images_per_patient range {lo}..={hi} is invalid"
            )));
        }
        if !(self.class_balance > 0.0 && self.class_balance < 1.0) {
            return Err(Error::InvalidSynthConfig(format!(
                "class_balance must lie in (0,1), got {}",
                self.class_balance
            )));
        }
        if self.image_size < 32 {
            return Err(Error::InvalidSynthConfig(format!(
                "image_size {} is below the 32 px minimum",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn n_malignant(&self) -> usize {
        ((self.n_patients as f64 * self.class_balance).round() as usize).min(self.n_patients)
    }
}

/// Patient-level lesion traits shared by all of that patient's images.
struct PatientTraits {
    radius: f64,
    aspect: f64,
    angle: f64,
    spikes: Vec<(f64, f64)>,
}

/// Appearance class actually rendered for one modality of one image.
#[derive(Clone, Copy)]
struct Appearance {
    malignant: bool,
}

/// Write phantom PNGs and `manifest.jsonl` under `out_dir`.
pub fn generate_synthetic(config: &SynthConfig, out_dir: &Path) -> Result<(DatasetManifest, Vec<PathBuf>)> {
    config.validate()?;
    let bdir = out_dir.join("bmode");
    let edir = out_dir.join("elasto");
    for d in [out_dir, &bdir, &edir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let n_mal = config.n_malignant();
    let n_ben = config.n_patients - n_mal;
    let mut rng = rng_stream(config.seed, "synth");
    let mut rows = Vec::new();
    let mut written = Vec::new();
    let (lo, hi) = config.images_per_patient;

    for p in 0..config.n_patients {
        let label = if p < n_ben {
            Label::Benign
        } else {
            Label::Malignant
        };
        let pid = format!("SP{p:03}");
        let traits = patient_traits(&mut rng, config.image_size, label);
        let n_images = rng.gen_range(lo..=hi);
        for i in 0..n_images {
            let image_id = format!("{pid}_{i}");
            let truth = Appearance {
                malignant: label == Label::Malignant,
            };
            let noise_class = Appearance {
                malignant: rng.gen_bool(0.5),
            };
            let (gray_look, color_look) = match config.signal_channels {
                SignalChannels::Both => (truth, truth),
                SignalChannels::GrayOnly => (truth, noise_class),
                SignalChannels::ColorOnly => (noise_class, truth),
            };
            let (gray, color, roi) =
                render_pair(&mut rng, config.image_size, &traits, gray_look, color_look);

            let brel = PathBuf::from("bmode").join(format!("{image_id}.png"));
            let erel = PathBuf::from("elasto").join(format!("{image_id}.png"));
            let bpath = out_dir.join(&brel);
            let epath = out_dir.join(&erel);
            gray.save(&bpath)?;
            color.save(&epath)?;
            written.push(bpath);
            written.push(epath);
            rows.push(ManifestRow {
                patient_id: pid.clone(),
                label: Some(label),
                image_id,
                bmode_path: brel,
                elasto_path: erel,
                roi: Some(roi),
                histological_type: Some(
                    match label {
                        Label::Benign => "synthetic-fibroadenoma",
                        Label::Malignant => "synthetic-idc",
                    }
                    .into(),
                ),
                strain_ratio: None,
            });
        }
    }

    let mpath = out_dir.join("manifest.jsonl");
    write_manifest(&mpath, &rows)?;
    written.push(mpath.clone());
    Ok((parse_manifest(&mpath)?, written))
}

fn patient_traits(rng: &mut ChaCha8Rng, size: usize, label: Label) -> PatientTraits {
    let s = size as f64;
    let n_spikes = if label == Label::Malignant { rng.gen_range(7..=11) } else { 0 };
    let spikes = (0..n_spikes)
        .map(|_| (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.25..0.55)))
        .collect();
    PatientTraits {
        radius: s * rng.gen_range(0.13..0.19),
        aspect: rng.gen_range(0.6..0.9),
        angle: rng.gen_range(-0.4..0.4),
        spikes,
    }
}

/// Spiculated boundary: radius multiplier at polar angle `theta`.
fn boundary(theta: f64, spikes: &[(f64, f64)]) -> f64 {
    1.0 + spikes
        .iter()
        .map(|&(at, amp)| {
            let d = (theta - at).cos();
            amp * d.max(0.0).powi(24)
        })
        .sum::<f64>()
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Stiffness to color: soft red, intermediate green, hard blue.
pub fn stiffness_color(s: f64) -> [f64; 3] {
    let s = s.clamp(0.0, 1.0);
    if s < 0.5 {
        [1.0 - 2.0 * s, 2.0 * s, 0.0]
    } else {
        [0.0, 2.0 - 2.0 * s, 2.0 * s - 1.0]
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn render_pair(
    rng: &mut ChaCha8Rng,
    size: usize,
    traits: &PatientTraits,
    gray_look: Appearance,
    color_look: Appearance,
) -> (GrayImage, RgbImage, Roi) {
    let s = size as f64;
    let scale = rng.gen_range(0.9..1.1);
    let a = traits.radius * scale;
    let b = a * traits.aspect;
    let reach = a * REACH;
    let cx = rng.gen_range(reach..s - reach);
    let cy = rng.gen_range(reach..s - reach * 1.3);
    let (sin, cos) = (traits.angle + rng.gen_range(-0.15..0.15)).sin_cos();

    let no_spikes: &[(f64, f64)] = &[];
    let gray_spikes = if gray_look.malignant {
        if traits.spikes.is_empty() {
            // Pseudo-malignant appearance for a benign patient.
            &DEFAULT_SPIKES[..]
        } else {
            &traits.spikes[..]
        }
    } else {
        no_spikes
    };
    let (lesion_level, posterior) = if gray_look.malignant {
        (rng.gen_range(0.06..0.14), 0.55)
    } else {
        (rng.gen_range(0.26..0.34), 1.25)
    };
    let stiff_lesion = if color_look.malignant {
        rng.gen_range(0.78..0.95)
    } else {
        rng.gen_range(0.04..0.16)
    };
    let stiff_halo = if color_look.malignant { 1.35 } else { 1.05 };

    let speckle = Normal::new(0.0, 0.11).expect("valid sigma");
    let color_noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let mut gray_raw = vec![0.0f64; size * size];
    let mut stiff = vec![0.0f64; size * size];
    let bg_stiff = rng.gen_range(0.30..0.45);

    let mut bbox = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = (dx * cos + dy * sin) / a;
            let v = (-dx * sin + dy * cos) / b;
            let rho = (u * u + v * v).sqrt();
            let theta = v.atan2(u);

            let edge = boundary(theta, gray_spikes);
            let inside = 1.0 - smoothstep(edge - 0.08, edge + 0.02, rho);
            // Fixed reach, so the box does not depend on the appearance.
            if rho < REACH {
                bbox.0 = bbox.0.min(x);
                bbox.1 = bbox.1.min(y);
                bbox.2 = bbox.2.max(x);
                bbox.3 = bbox.3.max(y);
            }

            // Posterior acoustic feature directly below the lesion.
            let below = if dy > 0.0 && dx.abs() < a {
                let fall = (-(dy / a)).exp();
                1.0 + (posterior - 1.0) * fall * (1.0 - inside)
            } else {
                1.0
            };
            let bg = 0.48 * below;
            let tissue = bg + (lesion_level - bg) * inside;
            gray_raw[y * size + x] = tissue * (1.0 + speckle.sample(rng));

            let halo = 1.0 - smoothstep(0.8, stiff_halo, rho);
            stiff[y * size + x] = bg_stiff + (stiff_lesion - bg_stiff) * halo;
        }
    }

    // 3x3 box blur gives the speckle some spatial correlation.
    let mut gray = GrayImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            let mut n = 0.0;
            for yy in y.saturating_sub(1)..=(y + 1).min(size - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(size - 1) {
                    acc += gray_raw[yy * size + xx];
                    n += 1.0;
                }
            }
            gray.put_pixel(x as u32, y as u32, image::Luma([to_u8(acc / n)]));
        }
    }
    let mut color = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let rgb = stiffness_color(stiff[y * size + x] + color_noise.sample(rng));
            color.put_pixel(
                x as u32,
                y as u32,
                Rgb([to_u8(rgb[0]), to_u8(rgb[1]), to_u8(rgb[2])]),
            );
        }
    }

    let margin = (0.1 * a).ceil() as usize;
    let x0 = bbox.0.saturating_sub(margin);
    let y0 = bbox.1.saturating_sub(margin);
    let x1 = (bbox.2 + margin).min(size - 1);
    let y1 = (bbox.3 + margin).min(size - 1);
    (gray, color, Roi::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
}

/// Outer extent of any rendered lesion, in units of the major semi-axis.
const REACH: f64 = 1.6;

const DEFAULT_SPIKES: [(f64, f64); 8] = [
    (0.3, 0.4),
    (1.1, 0.35),
    (1.9, 0.5),
    (2.6, 0.3),
    (3.4, 0.45),
    (4.2, 0.4),
    (5.0, 0.35),
    (5.8, 0.5),
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::image::load_record;
    use ndarray::{s, Axis};

    fn cfg(n: usize, signal: SignalChannels, seed: u64) -> SynthConfig {
        SynthConfig {
            n_patients: n,
            images_per_patient: (3, 5),
            class_balance: 0.5,
            signal_channels: signal,
            image_size: 64,
            seed,
        }
    }

    #[test]
    fn class_counts_follow_config() {
        let dir = tempfile::tempdir().unwrap();
        let (m, files) = generate_synthetic(&cfg(20, SignalChannels::Both, 1), dir.path()).unwrap();
        assert_eq!(m.patients_with_label(Label::Benign).len(), 10);
        assert_eq!(m.patients_with_label(Label::Malignant).len(), 10);
        assert_eq!(files.len(), 2 * m.images.len() + 1);
        for pid in m.patients.keys() {
            let n = m.images_of(pid).count();
            assert!((3..=5).contains(&n));
        }
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let c = cfg(4, SignalChannels::Both, 42);
        let (_, fa) = generate_synthetic(&c, a.path()).unwrap();
        let (_, fb) = generate_synthetic(&c, b.path()).unwrap();
        assert_eq!(fa.len(), fb.len());
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{x:?}");
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(4, SignalChannels::Both, 0);
        c.class_balance = 1.0;
        assert!(generate_synthetic(&c, dir.path()).is_err());
        let mut c = cfg(0, SignalChannels::Both, 0);
        c.n_patients = 0;
        assert!(generate_synthetic(&c, dir.path()).is_err());
    }

    #[test]
    fn unwritable_output_directory() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let err = generate_synthetic(&cfg(4, SignalChannels::Both, 0), &blocker.join("sub"));
        assert!(matches!(err, Err(Error::Io { .. })));
    }

    #[test]
    fn roi_encloses_lesion() {
        let dir = tempfile::tempdir().unwrap();
        let (m, _) = generate_synthetic(&cfg(6, SignalChannels::Both, 3), dir.path()).unwrap();
        for rec in &m.images {
            let roi = rec.roi.unwrap();
            assert!(roi.w >= 8 && roi.h >= 8, "{roi}");
            assert!(roi.fits(64, 64));
        }
    }

    /// Per-image statistics inside the lesion box: gray mean and blue-minus-red.
    fn roi_stats(m: &DatasetManifest) -> Vec<(f64, f64, Label)> {
        m.images
            .iter()
            .map(|rec| {
                let pair = load_record(m, rec).unwrap();
                let r = rec.roi.unwrap();
                let g = pair.gray.slice(s![r.y..r.y + r.h, r.x..r.x + r.w]);
                let c = pair.color.slice(s![r.y..r.y + r.h, r.x..r.x + r.w, ..]);
                let gm = g.mean().unwrap() as f64;
                let bm = c.index_axis(Axis(2), 2).mean().unwrap() as f64;
                let rm = c.index_axis(Axis(2), 0).mean().unwrap() as f64;
                (gm, bm - rm, pair.label)
            })
            .collect()
    }

    /// Brute-force threshold classifier: choose the threshold and polarity
    /// maximizing accuracy on `fit`, report accuracy on `eval`.
    fn threshold_accuracy(fit: &[(f64, Label)], eval: &[(f64, Label)]) -> f64 {
        let mut best = (0.0, f64::NEG_INFINITY, true);
        let mut cuts: Vec<f64> = fit.iter().map(|p| p.0).collect();
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for t in cuts {
            for above_is_malignant in [true, false] {
                let acc = accuracy(fit, t, above_is_malignant);
                if acc > best.0 {
                    best = (acc, t, above_is_malignant);
                }
            }
        }
        accuracy(eval, best.1, best.2)
    }

    fn accuracy(data: &[(f64, Label)], t: f64, above_is_malignant: bool) -> f64 {
        let ok = data
            .iter()
            .filter(|(v, l)| {
                let pred = if (*v > t) == above_is_malignant {
                    Label::Malignant
                } else {
                    Label::Benign
                };
                pred == *l
            })
            .count();
        ok as f64 / data.len() as f64
    }

    #[test]
    fn gray_only_signal_is_confined_to_gray_plane() {
        let dir = tempfile::tempdir().unwrap();
        let (m, _) = generate_synthetic(&cfg(40, SignalChannels::GrayOnly, 17), dir.path()).unwrap();
        let stats = roi_stats(&m);
        // Fit on even patients, evaluate on odd ones.
        let (fit, eval): (Vec<_>, Vec<_>) = stats
            .iter()
            .zip(&m.images)
            .partition(|(_, rec)| rec.patient_id[2..].parse::<usize>().unwrap() % 2 == 0);
        let gray_fit: Vec<_> = fit.iter().map(|(s, _)| (s.0, s.2)).collect();
        let gray_eval: Vec<_> = eval.iter().map(|(s, _)| (s.0, s.2)).collect();
        let col_fit: Vec<_> = fit.iter().map(|(s, _)| (s.1, s.2)).collect();
        let col_eval: Vec<_> = eval.iter().map(|(s, _)| (s.1, s.2)).collect();
        let gray_acc = threshold_accuracy(&gray_fit, &gray_eval);
        let color_acc = threshold_accuracy(&col_fit, &col_eval);
        assert!(gray_acc >= 0.9, "gray accuracy {gray_acc}");
        assert!((color_acc - 0.5).abs() <= 0.15, "color accuracy {color_acc}");
    }

    #[test]
    fn color_only_signal_is_confined_to_color_planes() {
        let dir = tempfile::tempdir().unwrap();
        let (m, _) = generate_synthetic(&cfg(40, SignalChannels::ColorOnly, 5), dir.path()).unwrap();
        let stats = roi_stats(&m);
        let gray: Vec<_> = stats.iter().map(|s| (s.0, s.2)).collect();
        let color: Vec<_> = stats.iter().map(|s| (s.1, s.2)).collect();
        // Patients are ordered benign-then-malignant, so interleave for fit/eval.
        let fit = |v: &[(f64, Label)]| v.iter().step_by(2).copied().collect::<Vec<_>>();
        let ev = |v: &[(f64, Label)]| v.iter().skip(1).step_by(2).copied().collect::<Vec<_>>();
        assert!(threshold_accuracy(&fit(&color), &ev(&color)) >= 0.9);
        assert!((threshold_accuracy(&fit(&gray), &ev(&gray)) - 0.5).abs() <= 0.15);
    }
}
