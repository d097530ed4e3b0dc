//! The 3-D encoder-decoder proposal network and the false-positive head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{Conv3d, Deconv3d};
use super::layers::{relu, relu_backward, Dense, ResidualBlock, ResidualCache};
use super::pool::{maxpool3d_backward, maxpool3d_forward, Pooled};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::proposal::VALUES_PER_ANCHOR;

/// Spatial stride of the proposal feature map and the divisor input
/// cubes must respect.
pub const FEATURE_STRIDE: usize = 4;
pub const INPUT_MULTIPLE: usize = 16;

/// Layer widths and head sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Channels of `[conv1, conv2, res1, res2, res3, res4]`.
    pub widths: [usize; 6],
    pub n_scales: usize,
    pub head_hidden: usize,
    pub fp_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            widths: [8, 16, 32, 32, 64, 64],
            n_scales: 3,
            head_hidden: 64,
            fp_hidden: 64,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0)
            || self.n_scales == 0
            || self.head_hidden == 0
            || self.fp_hidden == 0
        {
            return Err(Error::Config(format!(
                "network sizes must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Channels of the feature map handed to the false-positive stage.
    pub fn feature_channels(&self) -> usize {
        self.widths[2] + 3
    }
}

/// Proposal network: strided stem, residual encoder down to stride 16, two
/// upsampling stages with skip connections back to stride 4, a location map
/// and a 1×1×1 head producing `5N` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalNet<T> {
    pub conv1: Conv3d<T>,
    pub conv2: Conv3d<T>,
    pub res1: ResidualBlock<T>,
    pub res2: ResidualBlock<T>,
    pub res3: ResidualBlock<T>,
    pub res4: ResidualBlock<T>,
    pub up1: Deconv3d<T>,
    pub dec1: ResidualBlock<T>,
    pub up2: Deconv3d<T>,
    pub dec2: ResidualBlock<T>,
    pub head1: Conv3d<T>,
    pub head2: Conv3d<T>,
}

/// Every activation needed by [`ProposalNet::backward`].
#[derive(Debug, Clone)]
pub struct ProposalCache<T> {
    input: Tensor<T>,
    a1: Tensor<T>,
    a2: Tensor<T>,
    p1: Pooled<T>,
    r1: ResidualCache<T>,
    p2: Pooled<T>,
    r2: ResidualCache<T>,
    p3: Pooled<T>,
    r3: ResidualCache<T>,
    r4: ResidualCache<T>,
    u1: Tensor<T>,
    c1: Tensor<T>,
    d1: ResidualCache<T>,
    u2: Tensor<T>,
    c2: Tensor<T>,
    d2: ResidualCache<T>,
    /// Decoder features with the location map appended.
    pub features: Tensor<T>,
    h1: Tensor<T>,
    /// Head output `[5N, D/4, H/4, W/4]`.
    pub output: Tensor<T>,
}

macro_rules! for_each_layer {
    ($self:expr, $conv:ident, $res:ident, $deconv:ident) => {{
        $conv!("conv1", $self.conv1);
        $conv!("conv2", $self.conv2);
        $res!("res1", $self.res1);
        $res!("res2", $self.res2);
        $res!("res3", $self.res3);
        $res!("res4", $self.res4);
        $deconv!("up1", $self.up1);
        $res!("dec1", $self.dec1);
        $deconv!("up2", $self.up2);
        $res!("dec2", $self.dec2);
        $conv!("head1", $self.head1);
        $conv!("head2", $self.head2);
    }};
}

impl<T: Scalar> ProposalNet<T> {
    pub fn new(config: &NetConfig, rng: &mut impl Rng) -> Self {
        let [w0, w1, w2, w3, w4, w5] = config.widths;
        let mut head2 = Conv3d::same(
            config.head_hidden,
            VALUES_PER_ANCHOR * config.n_scales,
            1,
            0.1,
            rng,
        );
        // Start every anchor near a 2% prior so untrained maps propose little.
        for s in 0..config.n_scales {
            head2.bias.data_mut()[s * VALUES_PER_ANCHOR + 4] = T::from_f64(-4.0);
        }
        Self {
            conv1: Conv3d::new(1, w0, 3, 2, 1, 1.0, rng),
            conv2: Conv3d::same(w0, w1, 3, 1.0, rng),
            res1: ResidualBlock::new(w1, w2, rng),
            res2: ResidualBlock::new(w2, w3, rng),
            res3: ResidualBlock::new(w3, w4, rng),
            res4: ResidualBlock::new(w4, w5, rng),
            up1: Deconv3d::new(w5, w3, 2, 2, rng),
            dec1: ResidualBlock::new(2 * w3, w3, rng),
            up2: Deconv3d::new(w3, w2, 2, 2, rng),
            dec2: ResidualBlock::new(2 * w2, w2, rng),
            head1: Conv3d::same(w2 + 3, config.head_hidden, 1, 1.0, rng),
            head2,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            res1: self.res1.zeros_like(),
            res2: self.res2.zeros_like(),
            res3: self.res3.zeros_like(),
            res4: self.res4.zeros_like(),
            up1: self.up1.zeros_like(),
            dec1: self.dec1.zeros_like(),
            up2: self.up2.zeros_like(),
            dec2: self.dec2.zeros_like(),
            head1: self.head1.zeros_like(),
            head2: self.head2.zeros_like(),
        }
    }

    pub fn n_scales(&self) -> usize {
        self.head2.bias.len() / VALUES_PER_ANCHOR
    }

    /// Parameter tensors with stable dotted names, in declaration order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        macro_rules! conv {
            ($n:literal, $l:expr) => {
                out.push((format!("{}.weight", $n), &$l.weight));
                out.push((format!("{}.bias", $n), &$l.bias));
            };
        }
        macro_rules! res {
            ($n:literal, $l:expr) => {
                out.push((format!("{}.conv1.weight", $n), &$l.conv1.weight));
                out.push((format!("{}.conv1.bias", $n), &$l.conv1.bias));
                out.push((format!("{}.conv2.weight", $n), &$l.conv2.weight));
                out.push((format!("{}.conv2.bias", $n), &$l.conv2.bias));
                if let Some(p) = &$l.projection {
                    out.push((format!("{}.proj.weight", $n), &p.weight));
                    out.push((format!("{}.proj.bias", $n), &p.bias));
                }
            };
        }
        for_each_layer!(self, conv, res, conv);
        out
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    /// Mutable parameters in the same order as [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        macro_rules! conv {
            ($n:literal, $l:expr) => {
                out.extend($l.params_mut());
            };
        }
        macro_rules! res {
            ($n:literal, $l:expr) => {
                out.extend($l.params_mut());
            };
        }
        for_each_layer!(self, conv, res, conv);
        out
    }

    /// Forward a `[1, D, H, W]` cube (extents multiples of 16) with its
    /// `[3, D/4, H/4, W/4]` location map.
    pub fn forward(&self, input: &Tensor<T>, location: &Tensor<T>) -> Result<ProposalCache<T>> {
        let sp = input.spatial();
        if input.channels() != 1 || sp.iter().any(|&n| n == 0 || n % INPUT_MULTIPLE != 0) {
            return Err(Error::shape(
                "proposal_forward",
                &[1, INPUT_MULTIPLE, INPUT_MULTIPLE, INPUT_MULTIPLE],
                input.shape(),
            ));
        }
        let fs = sp.map(|n| n / FEATURE_STRIDE);
        location.expect_shape("proposal_forward location", &[3, fs[0], fs[1], fs[2]])?;
        let a1 = relu(&self.conv1.forward(input)?);
        let a2 = relu(&self.conv2.forward(&a1)?);
        let p1 = maxpool3d_forward(&a2, 2, 2)?;
        let r1 = self.res1.forward(&p1.output)?;
        let p2 = maxpool3d_forward(&r1.output, 2, 2)?;
        let r2 = self.res2.forward(&p2.output)?;
        let p3 = maxpool3d_forward(&r2.output, 2, 2)?;
        let r3 = self.res3.forward(&p3.output)?;
        let r4 = self.res4.forward(&r3.output)?;
        let u1 = relu(&self.up1.forward(&r4.output)?);
        let c1 = Tensor::concat_channels(&[&u1, &r2.output])?;
        let d1 = self.dec1.forward(&c1)?;
        let u2 = relu(&self.up2.forward(&d1.output)?);
        let c2 = Tensor::concat_channels(&[&u2, &r1.output])?;
        let d2 = self.dec2.forward(&c2)?;
        let features = Tensor::concat_channels(&[&d2.output, location])?;
        let h1 = relu(&self.head1.forward(&features)?);
        let output = self.head2.forward(&h1)?;
        Ok(ProposalCache {
            input: input.clone(),
            a1,
            a2,
            p1,
            r1,
            p2,
            r2,
            p3,
            r3,
            r4,
            u1,
            c1,
            d1,
            u2,
            c2,
            d2,
            features,
            h1,
            output,
        })
    }

    /// Accumulate parameter gradients for `grad_output` on the head output
    /// and optional `grad_features` on [`ProposalCache::features`]. The
    /// location channels carry no parameters, so their gradient is dropped.
    pub fn backward(
        &self,
        cache: &ProposalCache<T>,
        grad_output: &Tensor<T>,
        grad_features: Option<&Tensor<T>>,
        grads: &mut Self,
    ) -> Result<()> {
        let g_h1 = self
            .head2
            .backward(&cache.h1, grad_output, &mut grads.head2)?;
        let g_h1 = relu_backward(&cache.h1, &g_h1);
        let mut g_feat = self
            .head1
            .backward(&cache.features, &g_h1, &mut grads.head1)?;
        if let Some(extra) = grad_features {
            g_feat.axpy(T::one(), extra)?;
        }
        let w2 = cache.d2.output.channels();
        let g_d2 = g_feat.split_channels(&[w2, 3])?.swap_remove(0);
        let g_c2 = self
            .dec2
            .backward(&cache.c2, &cache.d2, &g_d2, &mut grads.dec2)?;
        let mut parts = g_c2.split_channels(&[cache.u2.channels(), cache.r1.output.channels()])?;
        let mut g_r1 = parts.pop().expect("two parts");
        let g_u2 = relu_backward(&cache.u2, &parts[0]);
        let g_d1 = self.up2.backward(&cache.d1.output, &g_u2, &mut grads.up2)?;
        let g_c1 = self
            .dec1
            .backward(&cache.c1, &cache.d1, &g_d1, &mut grads.dec1)?;
        let mut parts = g_c1.split_channels(&[cache.u1.channels(), cache.r2.output.channels()])?;
        let mut g_r2 = parts.pop().expect("two parts");
        let g_u1 = relu_backward(&cache.u1, &parts[0]);
        let g_r4 = self.up1.backward(&cache.r4.output, &g_u1, &mut grads.up1)?;
        let g_r3 = self
            .res4
            .backward(&cache.r3.output, &cache.r4, &g_r4, &mut grads.res4)?;
        let g_p3 = self
            .res3
            .backward(&cache.p3.output, &cache.r3, &g_r3, &mut grads.res3)?;
        g_r2.axpy(
            T::one(),
            &maxpool3d_backward(cache.r2.output.shape(), &cache.p3.argmax, &g_p3)?,
        )?;
        let g_p2 = self
            .res2
            .backward(&cache.p2.output, &cache.r2, &g_r2, &mut grads.res2)?;
        g_r1.axpy(
            T::one(),
            &maxpool3d_backward(cache.r1.output.shape(), &cache.p2.argmax, &g_p2)?,
        )?;
        let g_p1 = self
            .res1
            .backward(&cache.p1.output, &cache.r1, &g_r1, &mut grads.res1)?;
        let g_a2 = maxpool3d_backward(cache.a2.shape(), &cache.p1.argmax, &g_p1)?;
        let g_a2 = relu_backward(&cache.a2, &g_a2);
        let g_a1 = self.conv2.backward(&cache.a1, &g_a2, &mut grads.conv2)?;
        let g_a1 = relu_backward(&cache.a1, &g_a1);
        self.conv1.backward(&cache.input, &g_a1, &mut grads.conv1)?;
        Ok(())
    }
}

/// Classifier on flattened aligned cross-section features: two dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct FpHead<T> {
    pub fc1: Dense<T>,
    pub fc2: Dense<T>,
}

#[derive(Debug, Clone)]
pub struct FpCache<T> {
    input: Tensor<T>,
    hidden: Tensor<T>,
    /// Logits `[B, 1]`.
    pub logits: Tensor<T>,
}

impl<T: Scalar> FpHead<T> {
    pub fn new(inputs: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Dense::new(inputs, hidden, 1.0, rng),
            fc2: Dense::new(hidden, 1, 0.1, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.fc1.weight.shape()[1]
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("fp.fc1.weight".into(), &self.fc1.weight),
            ("fp.fc1.bias".into(), &self.fc1.bias),
            ("fp.fc2.weight".into(), &self.fc2.weight),
            ("fp.fc2.bias".into(), &self.fc2.bias),
        ]
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.fc1
            .params_mut()
            .into_iter()
            .chain(self.fc2.params_mut())
            .collect()
    }

    /// `x` is `[B, inputs]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<FpCache<T>> {
        let hidden = relu(&self.fc1.forward(x)?);
        let logits = self.fc2.forward(&hidden)?;
        Ok(FpCache {
            input: x.clone(),
            hidden,
            logits,
        })
    }

    /// Returns the gradient with respect to the `[B, inputs]` input.
    pub fn backward(
        &self,
        cache: &FpCache<T>,
        grad_logits: &Tensor<T>,
        grads: &mut Self,
    ) -> Result<Tensor<T>> {
        let g_h = self
            .fc2
            .backward(&cache.hidden, grad_logits, &mut grads.fc2)?;
        let g_h = relu_backward(&cache.hidden, &g_h);
        self.fc1.backward(&cache.input, &g_h, &mut grads.fc1)
    }
}
