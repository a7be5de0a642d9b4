//! Small convolutional embedding network and its class-activation head.
//!
//! Feature maps are `[n, channels, h, w]` tensors on a tape. The head is a 1x1
//! convolution producing per-class score maps (CAMs); image logits are the
//! spatial mean of those maps, so `classify` and `cam` always agree.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::{Tape, Tensor, Var};

/// Smallest accepted input side.
pub const MIN_INPUT_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Channel widths including the input, e.g. `[3, 8, 16, 16]`.
    pub channels: Vec<usize>,
    /// Apply a 2x average pool after this conv layer (0-based).
    pub pool_after: Option<usize>,
    /// Number of foreground classes scored by the head.
    pub classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: vec![3, 8, 16, 16],
            pool_after: Some(1),
            classes: 4,
        }
    }
}

impl EncoderConfig {
    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("at least one channel width")
    }

    /// Spatial downsampling factor of the feature map.
    pub fn stride(&self) -> usize {
        if self.pool_after.is_some() {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return Err(Error::Config(format!("bad encoder widths {:?}", self.channels)));
        }
        if self.classes == 0 {
            return Err(Error::Config("encoder needs at least one class".into()));
        }
        if let Some(p) = self.pool_after {
            if p + 1 >= self.channels.len() {
                return Err(Error::Config(format!("pool_after {p} beyond last conv layer")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub convs: Vec<ConvLayer>,
    pub classifier_weight: Tensor,
    pub classifier_bias: Tensor,
}

/// Tape handles for [`EncoderParams`].
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub convs: Vec<(Var, Var)>,
    pub head: HeadVars,
    pub pool_after: Option<usize>,
}

/// Tape handles for the 1x1 class-scoring head.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

/// Kaiming-style uniform bound for ReLU layers.
pub(crate) fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let convs = config
            .channels
            .windows(2)
            .map(|io| {
                let (cin, cout) = (io[0], io[1]);
                let b = kaiming_bound(cin * 9);
                ConvLayer {
                    weight: Tensor::uniform(&[cout, cin, 3, 3], -b, b, rng),
                    bias: Tensor::zeros(&[cout]),
                }
            })
            .collect();
        let c = config.out_channels();
        let b = (3.0 / c as f64).sqrt();
        Ok(EncoderParams {
            config: config.clone(),
            convs,
            classifier_weight: Tensor::uniform(&[config.classes, c], -b, b, rng),
            classifier_bias: Tensor::zeros(&[config.classes]),
        })
    }

    /// Builds handles from leaves produced in `named()` order.
    pub fn vars_from(&self, leaves: &[Var]) -> EncoderVars {
        let n = self.convs.len();
        EncoderVars {
            convs: (0..n).map(|i| (leaves[2 * i], leaves[2 * i + 1])).collect(),
            head: HeadVars {
                weight: leaves[2 * n],
                bias: leaves[2 * n + 1],
            },
            pool_after: self.config.pool_after,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> (Vec<Var>, EncoderVars) {
        let leaves = self.leaves(tape);
        let vars = self.vars_from(&leaves);
        (leaves, vars)
    }
}

impl Parameters for EncoderParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.convs.iter().enumerate() {
            out.push((format!("encoder.conv{i}.weight"), &l.weight));
            out.push((format!("encoder.conv{i}.bias"), &l.bias));
        }
        out.push(("encoder.head.weight".into(), &self.classifier_weight));
        out.push(("encoder.head.bias".into(), &self.classifier_bias));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.convs.iter_mut().enumerate() {
            out.push((format!("encoder.conv{i}.weight"), &mut l.weight));
            out.push((format!("encoder.conv{i}.bias"), &mut l.bias));
        }
        out.push(("encoder.head.weight".into(), &mut self.classifier_weight));
        out.push(("encoder.head.bias".into(), &mut self.classifier_bias));
        out
    }
}

/// Embeds a batch of images `[n, 3, h, w]` into feature maps `[n, c, h', w']`.
pub fn embed(tape: &mut Tape, images: Var, vars: &EncoderVars) -> Result<Var> {
    let s = tape.shape(images).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid("embed", format!("expected [n,3,h,w], got {s:?}")));
    }
    if s[2] < MIN_INPUT_SIDE || s[3] < MIN_INPUT_SIDE {
        return Err(Error::precondition(
            "embed",
            format!("input {}x{} smaller than {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}", s[2], s[3]),
        ));
    }
    let mut x = images;
    for (i, &(w, b)) in vars.convs.iter().enumerate() {
        let y = tape.conv3x3(x, w, b)?;
        x = tape.relu(y);
        if vars.pool_after == Some(i) {
            x = tape.avgpool2d(x, 2)?;
        }
    }
    Ok(x)
}

/// Per-class score maps `[n, classes, h, w]`.
pub fn cam(tape: &mut Tape, features: Var, head: HeadVars) -> Result<Var> {
    let (fc, wc) = (
        tape.shape(features).get(1).copied(),
        tape.shape(head.weight).get(1).copied(),
    );
    if fc != wc {
        return Err(Error::shape("cam", tape.shape(features), tape.shape(head.weight)));
    }
    tape.conv1x1(features, head.weight, head.bias)
}

/// Pre-sigmoid logits `[n, classes]`: spatial means of the class maps.
pub fn classify(tape: &mut Tape, features: Var, head: HeadVars) -> Result<Var> {
    let maps = cam(tape, features, head)?;
    tape.mean_trailing(maps, 2)
}
