//! CNN backbones on candle: AlexNet and ResNet-18 with torchvision parameter
//! names, stage-wise freezing and input-channel inflation.

pub mod alexnet;
pub mod layers;
pub mod network;
pub mod resnet;

pub use layers::{ParamStore, Pass, Snapshot};
pub use network::{
    default_weights_dir, load_backbone, Backbone, FreezePolicy, InflationPolicy, Network,
    Registry, StageInfo, WeightSource, NUM_CLASSES, WEIGHTS_DIR_ENV,
};
