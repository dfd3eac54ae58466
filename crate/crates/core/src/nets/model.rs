use rand::Rng;

use super::layers::{BatchNorm, Conv2d, Layer, Relu, Sequential};
use super::{Mode, Param, StateTensor, Tensor};
use crate::error::{CirkdError, Result};

/// Layer widths and strides of a convolutional encoder. Every layer is a
/// same-padded 3x3 convolution, optionally batch norm, then ReLU.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderSpec {
    pub in_ch: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub batch_norm: bool,
}

impl EncoderSpec {
    /// Spreads a total downsampling factor (1, 2 or 4) over the leading layers.
    fn strides_for(layers: usize, feature_stride: usize) -> Result<Vec<usize>> {
        let halvings = match feature_stride {
            1 => 0,
            2 => 1,
            4 => 2,
            s => return Err(CirkdError::Param(format!("feature stride must be 1, 2 or 4, got {s}"))),
        };
        if halvings > layers {
            return Err(CirkdError::Param(format!(
                "{layers} layers cannot reach feature stride {feature_stride}"
            )));
        }
        Ok((0..layers).map(|i| if i < halvings { 2 } else { 1 }).collect())
    }

    /// Two layers: 8 channels, then `d_s`.
    pub fn student(in_ch: usize, d_s: usize, feature_stride: usize) -> Result<Self> {
        Ok(Self {
            in_ch,
            widths: vec![8, d_s],
            strides: Self::strides_for(2, feature_stride)?,
            batch_norm: false,
        })
    }

    /// Three layers: `width`, `width`, then `d_t`.
    pub fn teacher(in_ch: usize, width: usize, d_t: usize, feature_stride: usize) -> Result<Self> {
        Ok(Self {
            in_ch,
            widths: vec![width, width, d_t],
            strides: Self::strides_for(3, feature_stride)?,
            batch_norm: false,
        })
    }

    pub fn with_batch_norm(mut self, on: bool) -> Self {
        self.batch_norm = on;
        self
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("encoder has layers")
    }

    pub fn feature_stride(&self) -> usize {
        self.strides.iter().product()
    }

    fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Sequential {
        let mut layers = Vec::new();
        let mut cin = self.in_ch;
        for (&w, &s) in self.widths.iter().zip(&self.strides) {
            layers.push(Layer::Conv(Conv2d::he(cin, w, 3, s, rng)));
            if self.batch_norm {
                layers.push(Layer::BatchNorm(BatchNorm::new(w)));
            }
            layers.push(Layer::Relu(Relu::default()));
            cin = w;
        }
        Sequential::new(layers)
    }
}

/// Outputs of a segmentation forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SegOutput {
    /// Encoder output (classifier input), not normalized.
    pub features: Tensor,
    pub logits: Tensor,
}

/// Feature extractor plus per-pixel classifier.
#[derive(Debug, Clone)]
pub struct Segmenter {
    pub spec: EncoderSpec,
    pub encoder: Sequential,
    pub classifier: Conv2d,
}

impl Segmenter {
    pub fn new<R: Rng + ?Sized>(spec: EncoderSpec, num_classes: usize, rng: &mut R) -> Self {
        let encoder = spec.build(rng);
        let d = spec.feature_dim();
        let mut classifier = Conv2d::he(d, num_classes, 1, 1, rng);
        // classifier starts near zero so initial predictions are close to uniform
        classifier.weight.value.iter_mut().for_each(|w| *w *= 0.1);
        Self {
            spec,
            encoder,
            classifier,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_ch
    }

    pub fn forward(&mut self, images: &Tensor, mode: Mode) -> Result<SegOutput> {
        let features = self.encoder.forward(images, mode)?;
        let logits = self.classifier.forward(&features)?;
        logits.check_finite("classifier output")?;
        Ok(SegOutput { features, logits })
    }

    /// Backpropagates logit gradients plus optional extra gradients arriving
    /// directly at the features; returns the input gradient.
    pub fn backward(&mut self, grad_feat: Option<&Tensor>, grad_logits: &Tensor) -> Result<Tensor> {
        let mut g = self.classifier.backward(grad_logits)?;
        if let Some(extra) = grad_feat {
            g.add_assign(extra)?;
        }
        self.encoder.backward(&g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.encoder.params_mut();
        ps.push(&mut self.classifier.weight);
        ps.push(&mut self.classifier.bias);
        ps
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut ps = self.encoder.params();
        ps.push(&self.classifier.weight);
        ps.push(&self.classifier.bias);
        ps
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Parameters followed by batch-norm running statistics.
    pub fn state_tensors(&self) -> Vec<StateTensor> {
        let params = self
            .params()
            .into_iter()
            .map(|p| StateTensor::new(p.shape.clone(), p.value.clone()));
        let buffers = self
            .encoder
            .buffers()
            .into_iter()
            .map(|b| StateTensor::new(vec![b.len()], b.clone()));
        params.chain(buffers).collect()
    }

    pub fn load_state(&mut self, tensors: &[StateTensor]) -> Result<()> {
        let mut params: Vec<(Vec<usize>, &mut Vec<f64>)> = Vec::new();
        let mut buffers: Vec<(Vec<usize>, &mut Vec<f64>)> = Vec::new();
        for layer in self.encoder.layers.iter_mut() {
            match layer {
                Layer::Conv(c) => {
                    params.push((c.weight.shape.clone(), &mut c.weight.value));
                    params.push((c.bias.shape.clone(), &mut c.bias.value));
                }
                Layer::BatchNorm(bn) => {
                    params.push((bn.gamma.shape.clone(), &mut bn.gamma.value));
                    params.push((bn.beta.shape.clone(), &mut bn.beta.value));
                    buffers.push((vec![bn.channels], &mut bn.running_mean));
                    buffers.push((vec![bn.channels], &mut bn.running_var));
                }
                Layer::Relu(_) => {}
            }
        }
        let cls = &mut self.classifier;
        params.push((cls.weight.shape.clone(), &mut cls.weight.value));
        params.push((cls.bias.shape.clone(), &mut cls.bias.value));
        params.extend(buffers);
        load_slots(params, tensors)
    }
}

fn load_slots(slots: Vec<(Vec<usize>, &mut Vec<f64>)>, tensors: &[StateTensor]) -> Result<()> {
    if slots.len() != tensors.len() {
        return Err(CirkdError::State(format!(
            "checkpoint holds {} tensors, model expects {}",
            tensors.len(),
            slots.len()
        )));
    }
    for (i, ((shape, dst), t)) in slots.into_iter().zip(tensors).enumerate() {
        if shape != t.shape {
            return Err(CirkdError::State(format!(
                "tensor {i}: checkpoint shape {:?}, model shape {shape:?}",
                t.shape
            )));
        }
        dst.copy_from_slice(&t.data);
    }
    Ok(())
}

/// Student-side map from `d_s` to the teacher width `d_t`:
/// 1x1 conv, batch norm, ReLU, 1x1 conv, batch norm.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub net: Sequential,
}

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(d_s: usize, d_hidden: usize, d_t: usize, rng: &mut R) -> Self {
        Self {
            net: Sequential::new(vec![
                Layer::Conv(Conv2d::he(d_s, d_hidden, 1, 1, rng)),
                Layer::BatchNorm(BatchNorm::new(d_hidden)),
                Layer::Relu(Relu::default()),
                Layer::Conv(Conv2d::he(d_hidden, d_t, 1, 1, rng)),
                Layer::BatchNorm(BatchNorm::new(d_t)),
            ]),
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.net.forward(x, mode)
    }

    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        self.net.backward(g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.net.params_mut()
    }

    pub fn zero_grad(&mut self) {
        self.net.zero_grad();
    }
}
