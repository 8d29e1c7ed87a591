//! Feature-level fusion of two fine-tuned backbones, and the soft-voting
//! baseline.

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::layers::{Init, Linear, ParamStore};
use crate::nn::{Backbone, NUM_CLASSES};
use crate::types::{argmax_class, check_distribution, rng_stream, Label, ProbRow};

/// Name of the head's parameter group and tensor prefix.
pub const HEAD: &str = "head";

/// Two frozen feature extractors feeding one trainable linear softmax head.
/// Features are concatenated as `[a, b]`.
pub struct EnsembleModel {
    a: Backbone,
    b: Backbone,
    head_store: ParamStore,
    head: Linear,
}

impl std::fmt::Debug for EnsembleModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnsembleModel")
            .field("a", &self.a.arch())
            .field("b", &self.b.arch())
            .field("head_width", &self.head_width())
            .finish()
    }
}

/// Fuse two extractors. Classifiers still attached are stripped, both
/// extractors are frozen, and a fresh seeded `(d_a + d_b) → 2` head is added.
pub fn build_ensemble(a: Backbone, b: Backbone, seed: u64) -> Result<EnsembleModel> {
    let mut a = if a.has_head() { a.strip_classifier()? } else { a };
    let mut b = if b.has_head() { b.strip_classifier()? } else { b };
    if a.input_channels() != b.input_channels() {
        return Err(Error::Shape(format!(
            "extractors take {} and {} input channels",
            a.input_channels(),
            b.input_channels()
        )));
    }
    let probe = Tensor::zeros((1, a.input_channels(), 64, 64), candle_core::DType::F32, &Device::Cpu)?;
    for ext in [&a, &b] {
        let width = ext.extract_features(&probe)?.dim(1)?;
        if width != ext.feature_dim() {
            return Err(Error::FeatureDim(format!(
                "{} emits {width} features, declares {}",
                ext.arch(),
                ext.feature_dim()
            )));
        }
    }
    a.freeze_all();
    b.freeze_all();
    let width = a.feature_dim() + b.feature_dim();
    let mut head_store = ParamStore::new();
    let g = head_store.add_group(HEAD);
    let mut rng = rng_stream(seed, "ensemble/head");
    let head = Linear::output(&mut head_store, g, HEAD, width, NUM_CLASSES, &mut Init { rng: &mut rng })?;
    Ok(EnsembleModel {
        a,
        b,
        head_store,
        head,
    })
}

impl EnsembleModel {
    pub fn extractor_a(&self) -> &Backbone {
        &self.a
    }

    pub fn extractor_b(&self) -> &Backbone {
        &self.b
    }

    pub fn head_store(&self) -> &ParamStore {
        &self.head_store
    }

    pub fn input_channels(&self) -> usize {
        self.a.input_channels()
    }

    pub fn head_width(&self) -> usize {
        self.a.feature_dim() + self.b.feature_dim()
    }

    /// Copies of the head weight `(2 × width)` and bias `(2)`.
    pub fn head_tensors(&self) -> Result<(Tensor, Tensor)> {
        Ok((
            self.head_store.param(self.head.weight).var.as_tensor().copy()?,
            self.head_store.param(self.head.bias).var.as_tensor().copy()?,
        ))
    }

    pub fn set_head(&self, weight: &Tensor, bias: &Tensor) -> Result<()> {
        self.head_store.set(self.head.weight, weight)?;
        self.head_store.set(self.head.bias, bias)
    }

    /// Concatenated penultimate features, N × (d_a + d_b).
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let fa = self.a.extract_features(x)?;
        let fb = self.b.extract_features(x)?;
        Ok(Tensor::cat(&[&fa, &fb], 1)?)
    }

    pub fn head_logits(&self, features: &Tensor) -> Result<Tensor> {
        let width = features.dim(1)?;
        if width != self.head_width() {
            return Err(Error::FeatureDim(format!(
                "head expects {} features, got {width}",
                self.head_width()
            )));
        }
        self.head.forward(&self.head_store, features)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.head_logits(&self.features(x)?)
    }

    /// Softmax over `[benign, malignant]` of the head on fused features.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::softmax_last_dim(&self.logits(x)?)?)
    }

    pub fn into_parts(self) -> (Backbone, Backbone, ParamStore) {
        (self.a, self.b, self.head_store)
    }
}

pub fn ensemble_forward(model: &EnsembleModel, x: &Tensor) -> Result<Tensor> {
    model.forward(x)
}

/// Average two probability matrices row by row; ties go to malignant.
pub fn soft_vote(a: &[ProbRow], b: &[ProbRow]) -> Result<(Vec<ProbRow>, Vec<Label>)> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let mut probs = Vec::with_capacity(a.len());
    let mut classes = Vec::with_capacity(a.len());
    for (&ra, &rb) in a.iter().zip(b) {
        check_distribution(ra)?;
        check_distribution(rb)?;
        let m = [(ra[0] + rb[0]) / 2.0, (ra[1] + rb[1]) / 2.0];
        probs.push(m);
        classes.push(argmax_class(m));
    }
    Ok((probs, classes))
}
