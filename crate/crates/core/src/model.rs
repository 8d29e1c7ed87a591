//! The three trainable model kinds behind one type.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};
use crate::nn::Backbone;
use crate::types::ProbRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    AlexNet,
    #[serde(alias = "resnet")]
    ResNet18,
    Ensemble,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::AlexNet, ModelKind::ResNet18, ModelKind::Ensemble];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::AlexNet => "alexnet",
            ModelKind::ResNet18 => "resnet18",
            ModelKind::Ensemble => "ensemble",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::AlexNet => "AlexNet",
            ModelKind::ResNet18 => "ResNet",
            ModelKind::Ensemble => "Ensemble",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "alexnet" => Ok(ModelKind::AlexNet),
            "resnet" | "resnet18" => Ok(ModelKind::ResNet18),
            "ensemble" => Ok(ModelKind::Ensemble),
            other => Err(Error::Config(format!("unknown model {other:?}"))),
        }
    }
}

pub enum Model {
    Single(Backbone),
    Ensemble(EnsembleModel),
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Model::Single(b) => b.fmt(f),
            Model::Ensemble(e) => e.fmt(f),
        }
    }
}

impl Model {
    pub fn name(&self) -> &'static str {
        match self {
            Model::Single(b) => b.arch(),
            Model::Ensemble(_) => "ensemble",
        }
    }

    pub fn input_channels(&self) -> usize {
        match self {
            Model::Single(b) => b.input_channels(),
            Model::Ensemble(e) => e.input_channels(),
        }
    }

    /// Softmax probabilities in evaluation mode, N×2.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Model::Single(b) => b.forward_classify(x),
            Model::Ensemble(e) => e.forward(x),
        }
    }

    pub fn probability_rows(&self, x: &Tensor) -> Result<Vec<ProbRow>> {
        let p = self.probabilities(x)?.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
        Ok(p.into_iter().map(|r| [r[0], r[1]]).collect())
    }
}
