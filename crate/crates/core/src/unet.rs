//! Two-level UNet: image encoder, skip-connected decoder and segmentation head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Padding, Result, TensorError, Var};

/// Convolution weight and bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    padding: Padding,
}

impl Conv {
    /// He-initialised `k×k` convolution with zero bias; same padding.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        Self {
            weight: store.add_he(
                format!("{name}.weight"),
                &[cout, cin, k, k],
                cin * k * k,
                rng,
            ),
            bias: store.add_zeros(format!("{name}.bias"), &[cout]),
            padding: Padding::Same,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(p[self.weight], Some(p[self.bias]), self.padding)
    }
}

/// conv3×3 → ReLU → conv3×3 → ReLU.
#[derive(Debug, Clone, Copy)]
pub struct DoubleConv {
    first: Conv,
    second: Conv,
}

impl DoubleConv {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self {
            first: Conv::new(store, rng, &format!("{name}.0"), cin, cout, 3),
            second: Conv::new(store, rng, &format!("{name}.1"), cout, cout, 3),
        }
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.first.forward(p, x)?.relu()?;
        self.second.forward(p, h)?.relu()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Channels of the first level; the second level and bottleneck use 2× and 4×.
    pub base_channels: usize,
    pub num_classes: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 16,
            num_classes: 3,
        }
    }
}

impl UNetConfig {
    pub fn bottleneck_channels(&self) -> usize {
        4 * self.base_channels
    }
}

/// Encoder output: the bottleneck map F_m plus full- and half-resolution skips.
#[derive(Debug, Clone)]
pub struct FeatureBundle<'t> {
    pub bottleneck: Var<'t>,
    pub skips: Vec<Var<'t>>,
}

#[derive(Debug, Clone)]
pub struct UNetParams {
    pub config: UNetConfig,
    enc1: DoubleConv,
    enc2: DoubleConv,
    bottleneck: DoubleConv,
    up2: Conv,
    dec2: DoubleConv,
    up1: Conv,
    dec1: DoubleConv,
    head_conv: Conv,
    head_out: Conv,
}

impl UNetParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: UNetConfig) -> Self {
        let c = config.base_channels;
        Self {
            config,
            enc1: DoubleConv::new(store, rng, "unet.enc1", config.in_channels, c),
            enc2: DoubleConv::new(store, rng, "unet.enc2", c, 2 * c),
            bottleneck: DoubleConv::new(store, rng, "unet.bottleneck", 2 * c, 4 * c),
            up2: Conv::new(store, rng, "unet.up2", 4 * c, 2 * c, 3),
            dec2: DoubleConv::new(store, rng, "unet.dec2", 4 * c, 2 * c),
            up1: Conv::new(store, rng, "unet.up1", 2 * c, c, 3),
            dec1: DoubleConv::new(store, rng, "unet.dec1", 2 * c, c),
            head_conv: Conv::new(store, rng, "unet.head.conv", 3 * c, c, 3),
            head_out: Conv::new(store, rng, "unet.head.out", c, config.num_classes, 1),
        }
    }

    /// `[B, Cin, H, W]` → bottleneck `[B, 4c, H/4, W/4]` and skips
    /// `[B, c, H, W]`, `[B, 2c, H/2, W/2]`.
    pub fn encode_image<'t>(&self, p: &Bound<'t>, image: Var<'t>) -> Result<FeatureBundle<'t>> {
        let shape = image.shape();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(TensorError::InvalidShape {
                op: "encode_image",
                shape,
                reason: format!("expected [B, {}, H, W]", self.config.in_channels),
            });
        }
        if shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(TensorError::InvalidShape {
                op: "encode_image",
                shape,
                reason: "spatial dims must be divisible by 4".into(),
            });
        }
        let s1 = self.enc1.forward(p, image)?;
        let s2 = self.enc2.forward(p, s1.maxpool2()?)?;
        let bottleneck = self.bottleneck.forward(p, s2.maxpool2()?)?;
        Ok(FeatureBundle {
            bottleneck,
            skips: vec![s1, s2],
        })
    }

    /// Decodes a bottleneck-shaped map back to `[B, c, H, W]` (pre-head).
    pub fn decode<'t>(&self, p: &Bound<'t>, fused: Var<'t>, skips: &[Var<'t>]) -> Result<Var<'t>> {
        let [s1, s2] = skips else {
            return Err(TensorError::InvalidShape {
                op: "decode",
                shape: vec![skips.len()],
                reason: "expected two skip maps".into(),
            });
        };
        let (fs, s2s) = (fused.shape(), s2.shape());
        let c = self.config.base_channels;
        if fs.len() != 4
            || s2s.len() != 4
            || fs[1] != 4 * c
            || s2s[2] != 2 * fs[2]
            || s2s[3] != 2 * fs[3]
        {
            return Err(TensorError::ShapeMismatch {
                op: "decode",
                lhs: fs,
                rhs: s2s,
            });
        }
        let u2 = self.up2.forward(p, fused.upsample2()?)?.relu()?;
        let d2 = self.dec2.forward(p, Var::concat(&[u2, *s2], 1)?)?;
        let u1 = self.up1.forward(p, d2.upsample2()?)?.relu()?;
        self.dec1.forward(p, Var::concat(&[u1, *s1], 1)?)
    }

    /// concat(decoder, attention map, first skip) → conv3×3 → ReLU → conv1×1 → logits.
    pub fn segmentation_head<'t>(
        &self,
        p: &Bound<'t>,
        decoder_out: Var<'t>,
        attention_map: Var<'t>,
        first_skip: Var<'t>,
    ) -> Result<Var<'t>> {
        let (a, b, c) = (
            decoder_out.shape(),
            attention_map.shape(),
            first_skip.shape(),
        );
        for other in [&b, &c] {
            if other.len() != 4 || a.len() != 4 || other[0] != a[0] || other[2..] != a[2..] {
                return Err(TensorError::ShapeMismatch {
                    op: "segmentation_head",
                    lhs: a.clone(),
                    rhs: other.clone(),
                });
            }
        }
        let x = Var::concat(&[decoder_out, attention_map, first_skip], 1)?;
        let h = self.head_conv.forward(p, x)?.relu()?;
        self.head_out.forward(p, h)
    }
}
