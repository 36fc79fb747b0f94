//! The segmentation network and its ablation wirings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Variant};
use crate::align::{contrastive_loss, AlignmentBatch};
use crate::fusion::{to_spatial, unflatten, FusionParams};
use crate::params::{Bound, ParamStore};
use crate::prompt::{
    build_vocabulary, render_prompt, tokenize, Modality, PromptSpec, TokenSequence, Vocabulary,
};
use crate::synthdata::SampleRecord;
use crate::tensor::{Result, Tensor, TensorError, Var};
use crate::text_encoder::{pool_text, TextEncoderConfig, TextEncoderParams};
use crate::unet::{Conv, UNetConfig, UNetParams};

/// Organ phrase used in prompts for multi-class segmentation.
pub const MULTI_ORGAN_PHRASE: &str = "abdomen";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub unet: UNetConfig,
    pub text: TextEncoderConfig,
    pub fusion_dim: usize,
}

impl ModelConfig {
    pub fn from_run(run: &RunConfig, vocab_size: usize) -> Self {
        Self {
            variant: run.variant,
            unet: UNetConfig {
                in_channels: 1,
                base_channels: run.base_channels,
                num_classes: run.num_classes,
            },
            text: TextEncoderConfig {
                vocab_size,
                dim: run.text_dim,
                max_len: run.max_len,
            },
            fusion_dim: run.fusion_dim,
        }
    }
}

/// Vocabulary covering every prompt the harness renders.
pub fn prompt_vocabulary(organ: &str) -> Vocabulary {
    let corpus: Vec<String> = [Modality::Mri, Modality::Ct]
        .into_iter()
        .flat_map(|m| [true, false].map(|t| PromptSpec::new(m, organ, 1, 1, t)))
        .map(|s| render_prompt(&s.expect("valid template")).expect("valid template"))
        .collect();
    build_vocabulary(&corpus).expect("non-empty corpus")
}

pub fn organ_phrase(num_classes: usize, organ_names: &[String]) -> String {
    match organ_names {
        [single] if num_classes == 1 => single.clone(),
        _ => MULTI_ORGAN_PHRASE.to_string(),
    }
}

/// Token ids for each sample's prompt.
pub fn prompt_tokens(
    records: &[&SampleRecord],
    organ: &str,
    include_time: bool,
    vocab: &Vocabulary,
    len: usize,
) -> crate::Result<Vec<TokenSequence>> {
    records
        .iter()
        .map(|r| {
            let spec = PromptSpec::new(r.modality, organ, r.i, r.n, include_time)?;
            Ok(tokenize(&render_prompt(&spec)?, vocab, len)?)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    unet: UNetParams,
    text: Option<TextEncoderParams>,
    fusion: FusionParams,
    /// Joint text-image map back to bottleneck channels.
    fuse_out: Conv,
    /// Joint map to first-level channels for the head.
    attn_out: Conv,
    /// Concatenated image and pooled text tokens back to the fusion width.
    concat_proj: Option<Conv>,
}

/// Forward results for one batch.
#[derive(Debug, Clone)]
pub struct Forward<'t> {
    /// `[B, K, H, W]` probabilities.
    pub probs: Var<'t>,
    /// Pooled projected image and text vectors, `[B, d]` each.
    pub aligned: Option<(Var<'t>, Var<'t>)>,
    pub attention: Option<Var<'t>>,
}

impl Model {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: ModelConfig) -> Self {
        let c = config.unet.base_channels;
        let d = config.fusion_dim;
        let bottleneck = config.unet.bottleneck_channels();
        let unet = UNetParams::new(store, rng, config.unet);
        let text = config
            .variant
            .uses_text()
            .then(|| TextEncoderParams::new(store, rng, config.text));
        let fusion = FusionParams::new(store, rng, bottleneck, config.text.dim, d);
        let fuse_out = Conv::new(store, rng, "fusion.out", d, bottleneck, 1);
        let attn_out = Conv::new(store, rng, "fusion.map", d, c, 1);
        let concat_proj = (config.variant == Variant::NoModalityFusion)
            .then(|| Conv::new(store, rng, "fusion.concat", 2 * d, d, 1));
        Self {
            config,
            unet,
            text,
            fusion,
            fuse_out,
            attn_out,
            concat_proj,
        }
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        images: Var<'t>,
        tokens: &[TokenSequence],
    ) -> Result<Forward<'t>> {
        let features = self.unet.encode_image(p, images)?;
        let f_m = features.bottleneck;
        let fs = f_m.shape();
        let (b, h, w) = (fs[0], fs[2], fs[3]);
        let image_tokens = self.fusion.project_image(p, f_m)?;

        let (joint, aligned, attention) = match &self.text {
            None => {
                let att = self.fusion.attend(p, image_tokens, None)?;
                (to_spatial(att.output, h, w)?, None, Some(att.weights))
            }
            Some(text) => {
                if tokens.len() != b {
                    return Err(TensorError::ShapeMismatch {
                        op: "model_forward",
                        lhs: fs,
                        rhs: vec![tokens.len()],
                    });
                }
                let enc = text.encode(p, tokens)?;
                let text_tokens = self.fusion.project_text(p, enc.features)?;
                let pooled_text = pool_text(text_tokens, &enc.pad_mask)?;
                let pooled_image = image_tokens.mean_axis(1)?;
                let aligned = Some((pooled_image, pooled_text));
                match self.concat_proj {
                    Some(proj) => {
                        let d = self.config.fusion_dim;
                        let ones = p[self.fuse_out.bias]
                            .tape()
                            .constant(Tensor::full([1, 1, h, w], 1.0));
                        let text_map = pooled_text.reshape([b, d, 1, 1])?.mul(ones)?;
                        let image_map = unflatten(image_tokens, h, w)?;
                        let joint = proj.forward(p, Var::concat(&[image_map, text_map], 1)?)?;
                        (joint, aligned, None)
                    }
                    None => {
                        let att = self.fusion.cross_attention(
                            p,
                            image_tokens,
                            text_tokens,
                            Some(&enc.pad_mask),
                        )?;
                        (to_spatial(att.output, h, w)?, aligned, Some(att.weights))
                    }
                }
            }
        };

        let fused = f_m.add(self.fuse_out.forward(p, joint)?)?;
        let decoded = self.unet.decode(p, fused, &features.skips)?;
        let attention_map = self.attn_out.forward(p, joint)?.upsample2()?.upsample2()?;
        let logits = self
            .unet
            .segmentation_head(p, decoded, attention_map, features.skips[0])?;
        Ok(Forward {
            probs: logits.sigmoid()?,
            aligned,
            attention,
        })
    }
}

/// Loss terms of one training step.
#[derive(Debug, Clone, Copy)]
pub struct StepLoss<'t> {
    pub total: Var<'t>,
    pub seg: Option<Var<'t>>,
    pub align: Option<Var<'t>>,
}

/// Segmentation loss plus `beta` times the contrastive loss. With `seg = false`
/// (alignment warm-up) the contrastive loss is returned unweighted.
pub fn step_loss<'t>(
    out: &Forward<'t>,
    target: Var<'t>,
    run: &RunConfig,
    seg: bool,
) -> Result<StepLoss<'t>> {
    let seg_term = if seg {
        Some(crate::objectives::seg_loss(
            out.probs,
            target,
            run.tversky_alpha,
            run.tversky_beta,
        )?)
    } else {
        None
    };
    let beta = run.effective_beta();
    let align_term = match out.aligned {
        Some((img, txt)) if beta > 0.0 => {
            let batch = AlignmentBatch::new(img, txt, run.tau, run.lambda)?;
            Some(contrastive_loss(&batch)?)
        }
        _ => None,
    };
    let total = match (seg_term, align_term) {
        (Some(s), Some(a)) => s.add(a.scale(beta)?)?,
        (Some(s), None) => s,
        (None, Some(a)) => a,
        (None, None) => {
            return Err(TensorError::InvalidShape {
                op: "step_loss",
                shape: vec![],
                reason: "no loss term is active".into(),
            })
        }
    };
    Ok(StepLoss {
        total,
        seg: seg_term,
        align: align_term,
    })
}
