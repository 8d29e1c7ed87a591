//! Backbone abstraction: a network is an ordered list of stages, each owning
//! at most one parameter group. Freezing, prefix caching and Grad-CAM taps are
//! all expressed in terms of stage boundaries.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{Device, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::alexnet::AlexNet;
use crate::nn::layers::{Init, Linear, ParamRef, ParamStore, Pass};
use crate::nn::resnet::ResNet18;
use crate::types::rng_stream;

pub const NUM_CLASSES: usize = 2;

/// Environment variable overriding the pretrained-weight cache directory.
pub const WEIGHTS_DIR_ENV: &str = "BSEFUSE_WEIGHTS_DIR";

#[derive(Debug, Clone, Copy)]
pub struct StageInfo {
    pub name: &'static str,
    pub has_params: bool,
}

impl StageInfo {
    pub const fn new(name: &'static str, has_params: bool) -> Self {
        Self { name, has_params }
    }
}

pub trait Network: Send + Sync {
    fn arch(&self) -> &'static str;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Current stages, including the classifier when attached.
    fn stages(&self) -> &'static [StageInfo];
    fn forward_stage(&self, i: usize, x: &Tensor, pass: &mut Pass) -> Result<Tensor>;
    /// Stage whose output is the last convolutional activation.
    fn cam_stage(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn first_conv(&self) -> ParamRef;
    fn classifier(&self) -> Option<(&'static str, Linear)>;
    fn attach_classifier(&mut self, num_classes: usize, init: &mut Init) -> Result<()>;
    fn remove_classifier(&mut self) -> bool;
}

pub type Constructor = fn(usize, &mut Init) -> Result<Box<dyn Network>>;

/// Named architecture constructors. Extra backbones register here.
pub struct Registry {
    entries: BTreeMap<String, Constructor>,
}

impl Default for Registry {
    fn default() -> Self {
        let mut r = Self {
            entries: BTreeMap::new(),
        };
        r.register("alexnet", |k, init| Ok(Box::new(AlexNet::new(k, init)?)));
        r.register("resnet18", |k, init| Ok(Box::new(ResNet18::new(k, init)?)));
        r
    }
}

impl Registry {
    pub fn register(&mut self, name: &str, ctor: Constructor) {
        self.entries.insert(name.to_string(), ctor);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn canonical(name: &str) -> String {
        match name.to_ascii_lowercase().as_str() {
            "resnet" | "resnet-18" | "resnet_18" => "resnet18".into(),
            other => other.into(),
        }
    }

    pub fn build(&self, name: &str, source: &WeightSource) -> Result<Backbone> {
        let name = Self::canonical(name);
        let ctor = self
            .entries
            .get(&name)
            .ok_or_else(|| Error::UnknownArchitecture(name.clone()))?;
        let seed = match source {
            WeightSource::Seeded(s) => *s,
            WeightSource::Pretrained(_) => 0,
        };
        let mut rng = rng_stream(seed, &format!("init/{name}"));
        let net = ctor(NUM_CLASSES, &mut Init { rng: &mut rng })?;
        let backbone = Backbone {
            net,
            input_channels: 3,
        };
        match source {
            WeightSource::Pretrained(dir) => load_pretrained(&backbone, dir)?,
            WeightSource::Seeded(seed) => calibrate_batch_norm(&backbone, *seed)?,
        }
        Ok(backbone)
    }
}

/// Where initial backbone weights come from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightSource {
    /// ImageNet weights exported to `<dir>/<arch>.safetensors` with a
    /// `<arch>.safetensors.sha256` digest next to it.
    Pretrained(PathBuf),
    /// Deterministic random initialization, for offline use.
    Seeded(u64),
}

impl WeightSource {
    /// Pretrained weights from `$BSEFUSE_WEIGHTS_DIR`, or the default cache.
    pub fn pretrained_default() -> Self {
        WeightSource::Pretrained(default_weights_dir())
    }
}

pub fn default_weights_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(WEIGHTS_DIR_ENV) {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_default();
    home.join(".cache").join("bsefuse").join("weights")
}

pub fn load_backbone(name: &str, source: &WeightSource) -> Result<Backbone> {
    Registry::default().build(name, source)
}

/// Set batch-norm running statistics from a fixed standard-normal batch, so
/// seeded networks see well-scaled activations in evaluation mode as
/// pretrained ones do.
fn calibrate_batch_norm(backbone: &Backbone, seed: u64) -> Result<()> {
    let has_bn = backbone.store().iter_params().any(|(_, p)| p.name.ends_with("running_mean"));
    if !has_bn {
        return Ok(());
    }
    let mut rng = rng_stream(seed, &format!("bn-calibration/{}", backbone.arch()));
    let normal = rand_distr::StandardNormal;
    let shape = (16, backbone.input_channels(), 96, 96);
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let data: Vec<f32> = (0..n).map(|_| rand_distr::Distribution::sample(&normal, &mut rng)).collect();
    let x = Tensor::from_vec(data, shape, &Device::Cpu)?;
    backbone.forward_range(&x, 0..backbone.feature_end(), &mut Pass::calibrate())?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn load_pretrained(backbone: &Backbone, dir: &Path) -> Result<()> {
    let arch = backbone.arch();
    let file = dir.join(format!("{arch}.safetensors"));
    let digest_file = dir.join(format!("{arch}.safetensors.sha256"));
    if !file.is_file() {
        return Err(Error::WeightsUnavailable(format!(
            "{} not found (set {WEIGHTS_DIR_ENV} or use seeded weights)",
            file.display()
        )));
    }
    let expected = std::fs::read_to_string(&digest_file)
        .map_err(|_| Error::WeightsUnavailable(format!("{} not found", digest_file.display())))?
        .split_whitespace()
        .next()
        .unwrap_or_default()
        .to_ascii_lowercase();
    let actual = sha256_file(&file)?;
    if expected != actual {
        return Err(Error::WeightChecksum {
            path: file,
            expected,
            actual,
        });
    }
    let tensors = candle_core::safetensors::load(&file, &Device::Cpu)?;
    let head = backbone.net.classifier().map(|(g, _)| g);
    for (group, param) in backbone.store().iter_params() {
        let is_head = Some(group.name.as_str()) == head;
        match tensors.get(&param.name) {
            Some(t) if t.dims() == param.var.dims() => {
                param.var.set(&t.to_dtype(candle_core::DType::F32)?)?;
            }
            // 1000-way ImageNet classifier: keep the fresh 2-way head.
            Some(_) | None if is_head => {}
            Some(t) => {
                return Err(Error::Shape(format!(
                    "pretrained {} has shape {:?}, model expects {:?}",
                    param.name,
                    t.dims(),
                    param.var.dims()
                )))
            }
            None => {
                return Err(Error::WeightsUnavailable(format!(
                    "{} lacks tensor {}",
                    file.display(),
                    param.name
                )))
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FreezePolicy {
    /// Only the three fully connected layers train.
    AlexNetLast3,
    /// Stem and residual stages 1–3 frozen; stage 4 and the classifier train.
    ResNetFreezeFirst4,
    AllFrozen,
    /// Explicit list of trainable groups; everything else is frozen.
    Custom(Vec<String>),
}

impl FreezePolicy {
    /// Default fine-tuning policy for an architecture.
    pub fn default_for(arch: &str) -> Self {
        match arch {
            "alexnet" => FreezePolicy::AlexNetLast3,
            "resnet18" => FreezePolicy::ResNetFreezeFirst4,
            _ => FreezePolicy::AllFrozen,
        }
    }

    pub fn id(&self) -> String {
        match self {
            FreezePolicy::AlexNetLast3 => "alexnet_last3".into(),
            FreezePolicy::ResNetFreezeFirst4 => "resnet_freeze_first4".into(),
            FreezePolicy::AllFrozen => "all_frozen".into(),
            FreezePolicy::Custom(g) => format!("custom:{}", g.join("+")),
        }
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl From<FreezePolicy> for String {
    fn from(p: FreezePolicy) -> Self {
        p.id()
    }
}

impl TryFrom<String> for FreezePolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alexnet_last3" => Ok(Self::AlexNetLast3),
            "resnet_freeze_first4" => Ok(Self::ResNetFreezeFirst4),
            "all_frozen" => Ok(Self::AllFrozen),
            other => match other.strip_prefix("custom:") {
                Some(list) => Ok(Self::Custom(
                    list.split('+').filter(|g| !g.is_empty()).map(String::from).collect(),
                )),
                None => Err(Error::Config(format!("unknown freeze policy {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InflationPolicy {
    /// New input slices are zero: the extra planes contribute nothing.
    #[serde(alias = "zero")]
    ZeroInit,
    /// New input slices are the mean of the RGB slices.
    #[serde(alias = "mean")]
    MeanInit,
}

impl FromStr for InflationPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" | "zero_init" => Ok(Self::ZeroInit),
            "mean" | "mean_init" => Ok(Self::MeanInit),
            other => Err(Error::Config(format!("unknown inflation policy {other:?}"))),
        }
    }
}

/// A convolutional backbone with an optional 2-way classifier.
pub struct Backbone {
    net: Box<dyn Network>,
    input_channels: usize,
}

impl fmt::Debug for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backbone")
            .field("arch", &self.arch())
            .field("input_channels", &self.input_channels)
            .field("has_head", &self.has_head())
            .field("trainable", &self.trainable_mask())
            .finish()
    }
}

impl Backbone {
    pub fn arch(&self) -> &'static str {
        self.net.arch()
    }

    pub fn feature_dim(&self) -> usize {
        self.net.feature_dim()
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn has_head(&self) -> bool {
        self.net.classifier().is_some()
    }

    pub fn store(&self) -> &ParamStore {
        self.net.store()
    }

    pub fn stages(&self) -> &'static [StageInfo] {
        self.net.stages()
    }

    pub fn cam_stage(&self) -> usize {
        self.net.cam_stage()
    }

    /// Index one past the last feature stage (the classifier stage, if any).
    pub fn feature_end(&self) -> usize {
        let n = self.stages().len();
        if self.has_head() {
            n - 1
        } else {
            n
        }
    }

    pub fn group_names(&self) -> Vec<String> {
        self.store().groups().iter().map(|g| g.name.clone()).collect()
    }

    /// `(group, trainable)` in network order.
    pub fn trainable_mask(&self) -> Vec<(String, bool)> {
        self.store()
            .groups()
            .iter()
            .map(|g| (g.name.clone(), g.trainable))
            .collect()
    }

    /// First stage that owns a trainable group; everything before it can be
    /// evaluated once and cached.
    pub fn trainable_start(&self) -> usize {
        self.stages()
            .iter()
            .position(|s| s.has_params && self.store().is_trainable(s.name))
            .unwrap_or(self.stages().len())
    }

    pub fn forward_range(&self, x: &Tensor, range: Range<usize>, pass: &mut Pass) -> Result<Tensor> {
        let mut y = x.clone();
        for i in range {
            y = self.net.forward_stage(i, &y, pass)?;
        }
        Ok(y)
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x
            .dims4()
            .map_err(|_| Error::Shape(format!("expected N×C×H×W input, got {:?}", x.dims())))?;
        if c != self.input_channels {
            return Err(Error::Shape(format!(
                "{} expects {} input channels, got {c}",
                self.arch(),
                self.input_channels
            )));
        }
        if h < 32 || w < 32 {
            return Err(Error::Shape(format!("input {h}×{w} is too small")));
        }
        Ok(())
    }

    /// Penultimate activations, N×feature_dim, in evaluation mode.
    pub fn extract_features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.forward_range(x, 0..self.feature_end(), &mut Pass::eval())
    }

    /// Class logits, N×2.
    pub fn logits(&self, x: &Tensor, pass: &mut Pass) -> Result<Tensor> {
        if !self.has_head() {
            return Err(Error::MissingHead);
        }
        self.check_input(x)?;
        self.forward_range(x, 0..self.stages().len(), pass)
    }

    /// Softmax class probabilities `[benign, malignant]` per row.
    pub fn forward_classify(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.logits(x, &mut Pass::eval())?;
        Ok(candle_nn::ops::softmax_last_dim(&logits)?)
    }

    /// Apply the classifier to precomputed penultimate features.
    pub fn classify_features(&self, features: &Tensor) -> Result<Tensor> {
        let (_, head) = self.net.classifier().ok_or(Error::MissingHead)?;
        head.forward(self.store(), features)
    }

    /// Evaluation-mode forward that exposes the last convolutional activation
    /// as a leaf variable, returning `(features, activation)`.
    pub fn cam_features(&self, x: &Tensor) -> Result<(Tensor, Var)> {
        self.check_input(x)?;
        let mut pass = Pass::eval();
        let cam = self.cam_stage();
        let act = self.forward_range(x, 0..cam + 1, &mut pass)?;
        let act = Var::from_tensor(&act.detach())?;
        let feats = self.forward_range(act.as_tensor(), cam + 1..self.feature_end(), &mut pass)?;
        Ok((feats, act))
    }

    pub fn apply_freeze_policy(&mut self, policy: &FreezePolicy) -> Result<()> {
        let known = self.group_names();
        let require = |names: &[&str]| -> Result<()> {
            for n in names {
                if !known.iter().any(|k| k == n) {
                    return Err(Error::UnknownGroup((*n).to_string()));
                }
            }
            Ok(())
        };
        let trainable: Vec<String> = match policy {
            FreezePolicy::AlexNetLast3 => {
                require(&["conv1", "conv2", "conv3", "conv4", "conv5", "fc6", "fc7"])?;
                ["fc6", "fc7", "fc8"].iter().map(|s| s.to_string()).collect()
            }
            FreezePolicy::ResNetFreezeFirst4 => {
                require(&["stem", "layer1", "layer2", "layer3", "layer4"])?;
                ["layer4", "fc"].iter().map(|s| s.to_string()).collect()
            }
            FreezePolicy::AllFrozen => Vec::new(),
            FreezePolicy::Custom(groups) => {
                let refs: Vec<&str> = groups.iter().map(String::as_str).collect();
                require(&refs)?;
                groups.clone()
            }
        };
        let store = self.net.store_mut();
        store.set_all_trainable(false);
        for g in &trainable {
            if store.group_index(g).is_some() {
                store.set_trainable(g, true)?;
            }
        }
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.net.store_mut().set_all_trainable(false);
    }

    /// Widen the first convolution to `n` input channels. New slices go in
    /// front of the existing ones, so a gray plane stacked at channel 0 meets
    /// the new weights and channels 1.. keep the original RGB filters.
    pub fn inflate_input_channels(&mut self, n: usize, policy: InflationPolicy) -> Result<()> {
        if n < 3 {
            return Err(Error::InvalidChannels(n));
        }
        if n < self.input_channels {
            return Err(Error::Shape(format!(
                "cannot shrink input from {} to {n} channels",
                self.input_channels
            )));
        }
        if n == self.input_channels {
            return Ok(());
        }
        let r = self.net.first_conv();
        let w = self.store().param(r).var.as_tensor().detach();
        let (o, c, kh, kw) = w.dims4()?;
        let extra = n - c;
        let fresh = match policy {
            InflationPolicy::ZeroInit => Tensor::zeros((o, extra, kh, kw), w.dtype(), w.device())?,
            InflationPolicy::MeanInit => {
                let rgb = w.narrow(1, c - 3, 3)?;
                rgb.mean_keepdim(1)?.repeat((1, extra, 1, 1))?
            }
        };
        let widened = Tensor::cat(&[&fresh, &w], 1)?;
        self.net.store_mut().replace(r, &widened)?;
        self.input_channels = n;
        Ok(())
    }

    /// Drop the classification layer, leaving a feature extractor.
    pub fn strip_classifier(mut self) -> Result<Backbone> {
        if self.net.remove_classifier() {
            Ok(self)
        } else {
            Err(Error::AlreadyStripped)
        }
    }

    pub fn attach_classifier(&mut self, seed: u64) -> Result<()> {
        let mut rng = rng_stream(seed, &format!("head/{}", self.arch()));
        self.net.attach_classifier(NUM_CLASSES, &mut Init { rng: &mut rng })
    }

    pub fn set_input_channels_unchecked(&mut self, n: usize) {
        self.input_channels = n;
    }
}
