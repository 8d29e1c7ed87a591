//! Parameter storage organised in named groups, and the handful of layers the
//! two backbones need.
//!
//! Parameters live in [`ParamStore`] as candle [`Var`]s. A frozen group hands
//! out detached tensors, so no gradient ever reaches it and the optimizer never
//! sees it.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Param {
    /// Fully qualified name, e.g. `features.0.weight` or `layer4.1.bn2.running_var`.
    pub name: String,
    pub var: Var,
    /// Buffers (batch-norm running statistics) are state, not optimized.
    pub buffer: bool,
}

#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub trainable: bool,
    pub params: Vec<Param>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    group: usize,
    index: usize,
}

/// Deep copy of every parameter and buffer, in store order.
#[derive(Debug, Clone)]
pub struct Snapshot(pub Vec<(String, Tensor)>);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    groups: Vec<ParamGroup>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_group(&mut self, name: &str) -> usize {
        self.groups.push(ParamGroup {
            name: name.to_string(),
            trainable: true,
            params: Vec::new(),
        });
        self.groups.len() - 1
    }

    pub fn add(&mut self, group: usize, name: &str, value: Tensor, buffer: bool) -> Result<ParamRef> {
        let var = Var::from_tensor(&value)?;
        let g = &mut self.groups[group];
        g.params.push(Param {
            name: name.to_string(),
            var,
            buffer,
        });
        Ok(ParamRef {
            group,
            index: g.params.len() - 1,
        })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn is_trainable(&self, group: &str) -> bool {
        self.group(group).is_some_and(|g| g.trainable)
    }

    pub fn set_trainable(&mut self, group: &str, trainable: bool) -> Result<()> {
        let g = self
            .groups
            .iter_mut()
            .find(|g| g.name == group)
            .ok_or_else(|| Error::UnknownGroup(group.to_string()))?;
        g.trainable = trainable;
        Ok(())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for g in &mut self.groups {
            g.trainable = trainable;
        }
    }

    /// Remove the last group; used to strip a classifier.
    pub fn pop_group(&mut self, name: &str) -> Option<ParamGroup> {
        if self.groups.last().is_some_and(|g| g.name == name) {
            self.groups.pop()
        } else {
            None
        }
    }

    pub fn param(&self, r: ParamRef) -> &Param {
        &self.groups[r.group].params[r.index]
    }

    pub fn group_of(&self, r: ParamRef) -> &ParamGroup {
        &self.groups[r.group]
    }

    /// Value for the forward pass: tracked only when the owning group trains.
    pub fn get(&self, r: ParamRef) -> Tensor {
        let g = &self.groups[r.group];
        let p = &g.params[r.index];
        if g.trainable && !p.buffer {
            p.var.as_tensor().clone()
        } else {
            p.var.as_tensor().detach()
        }
    }

    /// Overwrite a parameter in place; shapes must agree.
    pub fn set(&self, r: ParamRef, value: &Tensor) -> Result<()> {
        let p = self.param(r);
        if p.var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "{}: expected {:?}, got {:?}",
                p.name,
                p.var.dims(),
                value.dims()
            )));
        }
        p.var.set(value)?;
        Ok(())
    }

    /// Replace a parameter with a fresh variable, possibly of a new shape.
    pub fn replace(&mut self, r: ParamRef, value: &Tensor) -> Result<()> {
        let var = Var::from_tensor(&value.copy()?)?;
        self.groups[r.group].params[r.index].var = var;
        Ok(())
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.groups
            .iter()
            .filter(|g| g.trainable)
            .flat_map(|g| g.params.iter().filter(|p| !p.buffer).map(|p| p.var.clone()))
            .collect()
    }

    pub fn iter_params(&self) -> impl Iterator<Item = (&ParamGroup, &Param)> {
        self.groups
            .iter()
            .flat_map(|g| g.params.iter().map(move |p| (g, p)))
    }

    pub fn find(&self, name: &str) -> Option<&Param> {
        self.iter_params().map(|(_, p)| p).find(|p| p.name == name)
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        let items = self
            .iter_params()
            .map(|(_, p)| Ok((p.name.clone(), p.var.as_tensor().copy()?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Snapshot(items))
    }

    /// Copy of the trainable groups only, buffers included.
    pub fn snapshot_trainable(&self) -> Result<Snapshot> {
        let items = self
            .iter_params()
            .filter(|(g, _)| g.trainable)
            .map(|(_, p)| Ok((p.name.clone(), p.var.as_tensor().copy()?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Snapshot(items))
    }

    /// Restore a possibly partial snapshot, matching tensors by name.
    pub fn restore_named(&self, snap: &Snapshot) -> Result<()> {
        for (name, t) in &snap.0 {
            let p = self
                .find(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("model has no tensor {name}")))?;
            if p.var.dims() != t.dims() {
                return Err(Error::CheckpointMismatch(format!(
                    "{name} {:?} does not fit {:?}",
                    t.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(t)?;
        }
        Ok(())
    }

    pub fn restore(&self, snap: &Snapshot) -> Result<()> {
        let params: Vec<_> = self.iter_params().map(|(_, p)| p).collect();
        if params.len() != snap.0.len() {
            return Err(Error::CheckpointMismatch(format!(
                "snapshot holds {} tensors, model has {}",
                snap.0.len(),
                params.len()
            )));
        }
        for (p, (name, t)) in params.into_iter().zip(&snap.0) {
            if &p.name != name || p.var.dims() != t.dims() {
                return Err(Error::CheckpointMismatch(format!(
                    "{name} {:?} does not fit {} {:?}",
                    t.dims(),
                    p.name,
                    p.var.dims()
                )));
            }
            p.var.set(t)?;
        }
        Ok(())
    }

    pub fn n_parameters(&self) -> usize {
        self.iter_params()
            .filter(|(_, p)| !p.buffer)
            .map(|(_, p)| p.var.elem_count())
            .sum()
    }
}

/// Forward-pass mode. Training mode enables dropout and batch statistics, but
/// only inside trainable groups; frozen groups always run as in evaluation.
pub struct Pass<'a> {
    pub train: bool,
    /// Overwrite every batch-norm running statistic with this batch's.
    pub calibrate: bool,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Pass<'a> {
    pub fn eval() -> Self {
        Self {
            train: false,
            calibrate: false,
            rng: None,
        }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            train: true,
            calibrate: false,
            rng: Some(rng),
        }
    }

    pub fn calibrate() -> Self {
        Self {
            train: false,
            calibrate: true,
            rng: None,
        }
    }
}

/// Seeded initializers.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn he_normal(&mut self, shape: &[usize], fan: usize) -> Result<Tensor> {
        let std = (2.0 / fan as f64).sqrt();
        self.normal(shape, std)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f32, std as f32).map_err(|e| Error::Config(e.to_string()))?;
        let data: Vec<f32> = (0..n).map(|_| dist.sample(self.rng)).collect();
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the customary linear-layer default.
    pub fn uniform_fan_in(&mut self, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound);
        let data: Vec<f32> = (0..n).map(|_| dist.sample(self.rng)).collect();
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
    }
}

pub fn zeros(shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::zeros(shape, DType::F32, &Device::Cpu)?)
}

pub fn ones(shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::ones(shape, DType::F32, &Device::Cpu)?)
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamRef,
    pub bias: Option<ParamRef>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Register a conv layer, He-initialized with fan-out (the usual choice
    /// for ReLU networks).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        group: usize,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: &mut Init,
    ) -> Result<Self> {
        let w = init.he_normal(&[c_out, c_in, kernel, kernel], c_out * kernel * kernel)?;
        let weight = store.add(group, &format!("{prefix}.weight"), w, false)?;
        let bias = if bias {
            Some(store.add(group, &format!("{prefix}.bias"), zeros(&[c_out])?, false)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let w = store.get(self.weight);
        let y = if store.group_of(self.weight).trainable {
            conv2d_unfolded(x, &w, self.stride, self.padding)?
        } else {
            x.conv2d(&w, self.padding, self.stride, 1, 1)?
        };
        match self.bias {
            Some(b) => {
                let b = store.get(b).reshape((1, (), 1, 1))?;
                Ok(y.broadcast_add(&b)?)
            }
            None => Ok(y),
        }
    }
}

/// Convolution as shifted slices plus one matmul. Same result as
/// `conv2d`, but its backward pass is matmul and slice gradients, which are
/// much faster on CPU than the transposed convolution candle uses.
pub fn conv2d_unfolded(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, c_w, kh, kw) = w.dims4()?;
    if c != c_w {
        return Err(Error::Shape(format!("conv input has {c} channels, kernel expects {c_w}")));
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wd + 2 * padding - kw) / stride + 1;
    let extra = stride - 1;
    let xp = x
        .pad_with_zeros(2, padding, padding + extra)?
        .pad_with_zeros(3, padding, padding + extra)?;
    let mut cols = Vec::with_capacity(kh * kw);
    for i in 0..kh {
        for j in 0..kw {
            let s = xp.narrow(2, i, ho * stride)?.narrow(3, j, wo * stride)?;
            let s = if stride > 1 {
                s.reshape((n, c, ho, stride, wo, stride))?
                    .narrow(3, 0, 1)?
                    .narrow(5, 0, 1)?
                    .reshape((n, c, ho, wo))?
            } else {
                s
            };
            cols.push(s);
        }
    }
    // (C·kh·kw) × (N·Ho·Wo), so the weight gradient is a single 2-D matmul.
    let cols = Tensor::stack(&cols, 2)?
        .reshape((n, c * kh * kw, ho * wo))?
        .transpose(0, 1)?
        .reshape((c * kh * kw, n * ho * wo))?;
    let y = w.reshape((o, c * kh * kw))?.matmul(&cols)?;
    Ok(y.reshape((o, n, ho, wo))?.transpose(0, 1)?.contiguous()?)
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm2d {
    pub weight: ParamRef,
    pub bias: ParamRef,
    pub running_mean: ParamRef,
    pub running_var: ParamRef,
}

impl BatchNorm2d {
    const EPS: f64 = 1e-5;
    const MOMENTUM: f64 = 0.1;

    pub fn new(store: &mut ParamStore, group: usize, prefix: &str, c: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add(group, &format!("{prefix}.weight"), ones(&[c])?, false)?,
            bias: store.add(group, &format!("{prefix}.bias"), zeros(&[c])?, false)?,
            running_mean: store.add(group, &format!("{prefix}.running_mean"), zeros(&[c])?, true)?,
            running_var: store.add(group, &format!("{prefix}.running_var"), ones(&[c])?, true)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, pass: &Pass) -> Result<Tensor> {
        let trainable = store.group_of(self.weight).trainable;
        let gamma = store.get(self.weight).reshape((1, (), 1, 1))?;
        let beta = store.get(self.bias).reshape((1, (), 1, 1))?;
        let batch_stats = pass.calibrate || (pass.train && trainable);
        let (mean, var) = if batch_stats {
            let (n, _, h, w) = x.dims4()?;
            let count = (n * h * w) as f64;
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered
                .sqr()?
                .mean_keepdim(0)?
                .mean_keepdim(2)?
                .mean_keepdim(3)?;
            // Running statistics track the unbiased variance.
            let unbiased = (var.detach().flatten_all()? * (count / (count - 1.0).max(1.0)))?;
            let m = if pass.calibrate { 1.0 } else { Self::MOMENTUM };
            let rm = store.param(self.running_mean).var.as_tensor();
            let rv = store.param(self.running_var).var.as_tensor();
            let new_rm = ((rm * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
            let new_rv = ((rv * (1.0 - m))? + (unbiased * m)?)?;
            store.set(self.running_mean, &new_rm)?;
            store.set(self.running_var, &new_rv)?;
            if pass.calibrate {
                (mean.detach(), var.detach())
            } else {
                (mean, var)
            }
        } else {
            (
                store.get(self.running_mean).reshape((1, (), 1, 1))?,
                store.get(self.running_var).reshape((1, (), 1, 1))?,
            )
        };
        let xhat = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        Ok(xhat.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamRef,
    pub bias: ParamRef,
}

impl Linear {
    pub fn from_tensors(
        store: &mut ParamStore,
        group: usize,
        prefix: &str,
        weight: Tensor,
        bias: Tensor,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(group, &format!("{prefix}.weight"), weight, false)?,
            bias: store.add(group, &format!("{prefix}.bias"), bias, false)?,
        })
    }

    /// He-initialized hidden layer.
    pub fn hidden(
        store: &mut ParamStore,
        group: usize,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let w = init.he_normal(&[d_out, d_in], d_in)?;
        Self::from_tensors(store, group, prefix, w, zeros(&[d_out])?)
    }

    /// Output layer with `U(±1/sqrt(d_in))` weights and bias.
    pub fn output(
        store: &mut ParamStore,
        group: usize,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let w = init.uniform_fan_in(&[d_out, d_in], d_in)?;
        let b = init.uniform_fan_in(&[d_out], d_in)?;
        Self::from_tensors(store, group, prefix, w, b)
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let w = store.get(self.weight);
        let b = store.get(self.bias);
        // W·xᵀ keeps the weight gradient contiguous, avoiding a strided
        // accumulation over the full matrix in backward.
        Ok(w.matmul(&x.t()?)?.t()?.broadcast_add(&b)?)
    }
}

/// Inverted dropout with a mask drawn from the pass's seeded stream. A no-op
/// in evaluation mode or when `active` is false.
pub fn dropout(x: &Tensor, p: f32, active: bool, pass: &mut Pass) -> Result<Tensor> {
    if !(pass.train && active) || p <= 0.0 {
        return Ok(x.clone());
    }
    let rng = pass
        .rng
        .as_deref_mut()
        .expect("training pass carries a random stream");
    let keep = 1.0 - p;
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| if rng.gen::<f32>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?;
    Ok((x * mask)?)
}

/// 3×3/2 max pooling with optional zero padding. Zero padding is exact for
/// non-negative (post-ReLU) inputs.
pub fn max_pool_3x3_s2(x: &Tensor, pad: usize) -> Result<Tensor> {
    let x = if pad > 0 {
        x.pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?
    } else {
        x.clone()
    };
    Ok(x.max_pool2d_with_stride(3, 2)?)
}

/// 3×3 stride-2 max pooling as the maximum of nine strided slices; unlike
/// candle's pooling it supports backward.
pub fn max_pool_3x3_s2_sliced(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h < 3 || w < 3 {
        return Err(Error::Shape(format!("max pool needs at least 3x3, got {h}x{w}")));
    }
    let (ho, wo) = ((h - 3) / 2 + 1, (w - 3) / 2 + 1);
    let xp = x.pad_with_zeros(2, 0, 1)?.pad_with_zeros(3, 0, 1)?;
    let mut out: Option<Tensor> = None;
    for i in 0..3 {
        for j in 0..3 {
            let s = xp
                .narrow(2, i, 2 * ho)?
                .narrow(3, j, 2 * wo)?
                .reshape((n, c, ho, 2, wo, 2))?
                .narrow(3, 0, 1)?
                .narrow(5, 0, 1)?
                .reshape((n, c, ho, wo))?;
            out = Some(match out {
                Some(m) => m.maximum(&s)?,
                None => s,
            });
        }
    }
    Ok(out.expect("nine slices"))
}

/// Adaptive average pooling to `out_h`×`out_w`, expressed as a matmul with a
/// fixed bin-averaging matrix so it stays differentiable.
pub fn adaptive_avg_pool2d(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let bins = |len: usize, out: usize| -> Vec<(usize, usize)> {
        (0..out)
            .map(|i| ((i * len) / out, ((i + 1) * len).div_ceil(out)))
            .collect()
    };
    let ys = bins(h, out_h);
    let xs = bins(w, out_w);
    let mut m = vec![0f32; h * w * out_h * out_w];
    for (oy, &(y0, y1)) in ys.iter().enumerate() {
        for (ox, &(x0, x1)) in xs.iter().enumerate() {
            let area = ((y1 - y0) * (x1 - x0)) as f32;
            let col = oy * out_w + ox;
            for y in y0..y1 {
                for xx in x0..x1 {
                    m[(y * w + xx) * out_h * out_w + col] = 1.0 / area;
                }
            }
        }
    }
    let m = Tensor::from_vec(m, (h * w, out_h * out_w), x.device())?;
    Ok(x
        .reshape((n * c, h * w))?
        .matmul(&m)?
        .reshape((n, c, out_h, out_w))?)
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}
