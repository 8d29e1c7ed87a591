//! AlexNet: five convolutional layers followed by three fully connected
//! layers. Parameter names follow the torchvision layout so exported
//! pretrained weights load directly.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::layers::{
    adaptive_avg_pool2d, dropout, max_pool_3x3_s2, max_pool_3x3_s2_sliced, Conv2d, Init, Linear, ParamRef, ParamStore,
    Pass,
};
use crate::nn::network::{Network, StageInfo};

pub const FEATURE_DIM: usize = 4096;
const POOLED: usize = 6;

pub struct AlexNet {
    store: ParamStore,
    convs: [Conv2d; 5],
    fc6: Linear,
    fc7: Linear,
    fc8: Option<Linear>,
}

const STAGES: [StageInfo; 9] = [
    StageInfo::new("conv1", true),
    StageInfo::new("conv2", true),
    StageInfo::new("conv3", true),
    StageInfo::new("conv4", true),
    StageInfo::new("conv5", true),
    StageInfo::new("pool", false),
    StageInfo::new("fc6", true),
    StageInfo::new("fc7", true),
    StageInfo::new("fc8", true),
];

impl AlexNet {
    pub fn new(num_classes: usize, init: &mut Init) -> Result<Self> {
        let mut store = ParamStore::new();
        // (prefix, c_in, c_out, kernel, stride, pad)
        let spec = [
            ("features.0", 3, 64, 11, 4, 2),
            ("features.3", 64, 192, 5, 1, 2),
            ("features.6", 192, 384, 3, 1, 1),
            ("features.8", 384, 256, 3, 1, 1),
            ("features.10", 256, 256, 3, 1, 1),
        ];
        let mut convs = Vec::with_capacity(5);
        for (i, (prefix, ci, co, k, s, p)) in spec.into_iter().enumerate() {
            let g = store.add_group(STAGES[i].name);
            convs.push(Conv2d::new(&mut store, g, prefix, ci, co, k, s, p, true, init)?);
        }
        let g6 = store.add_group("fc6");
        let fc6 = Linear::hidden(&mut store, g6, "classifier.1", 256 * POOLED * POOLED, 4096, init)?;
        let g7 = store.add_group("fc7");
        let fc7 = Linear::hidden(&mut store, g7, "classifier.4", 4096, 4096, init)?;
        let g8 = store.add_group("fc8");
        let fc8 = Linear::output(&mut store, g8, "classifier.6", 4096, num_classes, init)?;
        Ok(Self {
            store,
            convs: convs.try_into().expect("five conv layers"),
            fc6,
            fc7,
            fc8: Some(fc8),
        })
    }
}

impl Network for AlexNet {
    fn arch(&self) -> &'static str {
        "alexnet"
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn stages(&self) -> &'static [StageInfo] {
        if self.fc8.is_some() {
            &STAGES
        } else {
            &STAGES[..8]
        }
    }

    fn forward_stage(&self, i: usize, x: &Tensor, pass: &mut Pass) -> Result<Tensor> {
        let s = &self.store;
        match i {
            0 | 1 => max_pool_3x3_s2(&self.convs[i].forward(s, x)?.relu()?, 0),
            2..=4 => Ok(self.convs[i].forward(s, x)?.relu()?),
            5 => {
                let y = max_pool_3x3_s2_sliced(x)?;
                Ok(adaptive_avg_pool2d(&y, POOLED, POOLED)?.flatten_from(1)?)
            }
            6 => {
                let active = s.is_trainable("fc6");
                let y = dropout(x, 0.5, active, pass)?;
                Ok(self.fc6.forward(s, &y)?.relu()?)
            }
            7 => {
                let active = s.is_trainable("fc7");
                let y = dropout(x, 0.5, active, pass)?;
                Ok(self.fc7.forward(s, &y)?.relu()?)
            }
            8 => self
                .fc8
                .as_ref()
                .expect("stage 8 exists only with a head")
                .forward(s, x),
            _ => unreachable!("alexnet has {} stages", STAGES.len()),
        }
    }

    fn cam_stage(&self) -> usize {
        4
    }

    fn feature_dim(&self) -> usize {
        FEATURE_DIM
    }

    fn first_conv(&self) -> ParamRef {
        self.convs[0].weight
    }

    fn classifier(&self) -> Option<(&'static str, Linear)> {
        self.fc8.map(|l| ("fc8", l))
    }

    fn attach_classifier(&mut self, num_classes: usize, init: &mut Init) -> Result<()> {
        if self.fc8.is_none() {
            let g = self.store.add_group("fc8");
            self.fc8 = Some(Linear::output(&mut self.store, g, "classifier.6", 4096, num_classes, init)?);
        }
        Ok(())
    }

    fn remove_classifier(&mut self) -> bool {
        if self.fc8.take().is_some() {
            self.store.pop_group("fc8");
            true
        } else {
            false
        }
    }
}
