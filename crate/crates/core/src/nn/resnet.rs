//! ResNet-18: 7×7 stem, four residual stages of two basic blocks each, global
//! average pooling and one fully connected layer. Parameter names follow the
//! torchvision layout.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::layers::{
    global_avg_pool, max_pool_3x3_s2, BatchNorm2d, Conv2d, Init, Linear, ParamRef, ParamStore,
    Pass,
};
use crate::nn::network::{Network, StageInfo};

pub const FEATURE_DIM: usize = 512;

struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(
        store: &mut ParamStore,
        group: usize,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(store, group, &format!("{prefix}.conv1"), c_in, c_out, 3, stride, 1, false, init)?;
        let bn1 = BatchNorm2d::new(store, group, &format!("{prefix}.bn1"), c_out)?;
        let conv2 = Conv2d::new(store, group, &format!("{prefix}.conv2"), c_out, c_out, 3, 1, 1, false, init)?;
        let bn2 = BatchNorm2d::new(store, group, &format!("{prefix}.bn2"), c_out)?;
        let downsample = if stride != 1 || c_in != c_out {
            let c = Conv2d::new(store, group, &format!("{prefix}.downsample.0"), c_in, c_out, 1, stride, 0, false, init)?;
            let b = BatchNorm2d::new(store, group, &format!("{prefix}.downsample.1"), c_out)?;
            Some((c, b))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            downsample,
        })
    }

    fn forward(&self, s: &ParamStore, x: &Tensor, pass: &Pass) -> Result<Tensor> {
        let y = self.bn1.forward(s, &self.conv1.forward(s, x)?, pass)?.relu()?;
        let y = self.bn2.forward(s, &self.conv2.forward(s, &y)?, pass)?;
        let shortcut = match &self.downsample {
            Some((c, b)) => b.forward(s, &c.forward(s, x)?, pass)?,
            None => x.clone(),
        };
        Ok((y + shortcut)?.relu()?)
    }
}

pub struct ResNet18 {
    store: ParamStore,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    layers: [[BasicBlock; 2]; 4],
    fc: Option<Linear>,
}

const STAGES: [StageInfo; 7] = [
    StageInfo::new("stem", true),
    StageInfo::new("layer1", true),
    StageInfo::new("layer2", true),
    StageInfo::new("layer3", true),
    StageInfo::new("layer4", true),
    StageInfo::new("pool", false),
    StageInfo::new("fc", true),
];

impl ResNet18 {
    pub fn new(num_classes: usize, init: &mut Init) -> Result<Self> {
        let mut store = ParamStore::new();
        let g = store.add_group("stem");
        let conv1 = Conv2d::new(&mut store, g, "conv1", 3, 64, 7, 2, 3, false, init)?;
        let bn1 = BatchNorm2d::new(&mut store, g, "bn1", 64)?;
        let widths = [64, 128, 256, 512];
        let mut layers = Vec::with_capacity(4);
        let mut c_in = 64;
        for (i, &c_out) in widths.iter().enumerate() {
            let name = format!("layer{}", i + 1);
            let g = store.add_group(&name);
            let stride = if i == 0 { 1 } else { 2 };
            let b0 = BasicBlock::new(&mut store, g, &format!("{name}.0"), c_in, c_out, stride, init)?;
            let b1 = BasicBlock::new(&mut store, g, &format!("{name}.1"), c_out, c_out, 1, init)?;
            layers.push([b0, b1]);
            c_in = c_out;
        }
        let g = store.add_group("fc");
        let fc = Linear::output(&mut store, g, "fc", FEATURE_DIM, num_classes, init)?;
        Ok(Self {
            store,
            conv1,
            bn1,
            layers: layers.try_into().ok().expect("four residual stages"),
            fc: Some(fc),
        })
    }
}

impl Network for ResNet18 {
    fn arch(&self) -> &'static str {
        "resnet18"
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn stages(&self) -> &'static [StageInfo] {
        if self.fc.is_some() {
            &STAGES
        } else {
            &STAGES[..6]
        }
    }

    fn forward_stage(&self, i: usize, x: &Tensor, pass: &mut Pass) -> Result<Tensor> {
        let s = &self.store;
        match i {
            0 => {
                let y = self.bn1.forward(s, &self.conv1.forward(s, x)?, pass)?.relu()?;
                max_pool_3x3_s2(&y, 1)
            }
            1..=4 => {
                let [b0, b1] = &self.layers[i - 1];
                let y = b0.forward(s, x, pass)?;
                b1.forward(s, &y, pass)
            }
            5 => global_avg_pool(x),
            6 => self.fc.as_ref().expect("stage 6 exists only with a head").forward(s, x),
            _ => unreachable!("resnet18 has {} stages", STAGES.len()),
        }
    }

    fn cam_stage(&self) -> usize {
        4
    }

    fn feature_dim(&self) -> usize {
        FEATURE_DIM
    }

    fn first_conv(&self) -> ParamRef {
        self.conv1.weight
    }

    fn classifier(&self) -> Option<(&'static str, Linear)> {
        self.fc.map(|l| ("fc", l))
    }

    fn attach_classifier(&mut self, num_classes: usize, init: &mut Init) -> Result<()> {
        if self.fc.is_none() {
            let g = self.store.add_group("fc");
            self.fc = Some(Linear::output(&mut self.store, g, "fc", FEATURE_DIM, num_classes, init)?);
        }
        Ok(())
    }

    fn remove_classifier(&mut self) -> bool {
        if self.fc.take().is_some() {
            self.store.pop_group("fc");
            true
        } else {
            false
        }
    }
}
