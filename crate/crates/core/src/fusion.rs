//! Projection of image and text features into a shared space and single-head
//! attention over their concatenation.

use rand::Rng;

use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Padding, Result, Tensor, TensorError, Var};
use crate::text_encoder::MASKED_SCORE;

#[derive(Debug, Clone, Copy)]
pub struct FusionParams {
    pub image_channels: usize,
    pub text_dim: usize,
    pub dim: usize,
    image_w: ParamId,
    image_b: ParamId,
    text_w: ParamId,
    text_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

/// Attention output together with its weights.
#[derive(Debug, Clone, Copy)]
pub struct Attended<'t> {
    /// `[B, S, d]`.
    pub output: Var<'t>,
    /// `[B, S, S]`, query × key.
    pub weights: Var<'t>,
}

impl FusionParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        image_channels: usize,
        text_dim: usize,
        dim: usize,
    ) -> Self {
        Self {
            image_channels,
            text_dim,
            dim,
            image_w: store.add_he(
                "fusion.image_proj.weight",
                &[dim, image_channels, 1, 1],
                image_channels,
                rng,
            ),
            image_b: store.add_zeros("fusion.image_proj.bias", &[dim]),
            text_w: store.add_he("fusion.text_proj.weight", &[text_dim, dim], text_dim, rng),
            text_b: store.add_zeros("fusion.text_proj.bias", &[dim]),
            wq: store.add_he("fusion.wq", &[dim, dim], dim, rng),
            wk: store.add_he("fusion.wk", &[dim, dim], dim, rng),
            wv: store.add_he("fusion.wv", &[dim, dim], dim, rng),
        }
    }

    pub fn query_weight(&self) -> ParamId {
        self.wq
    }

    pub fn key_weight(&self) -> ParamId {
        self.wk
    }

    pub fn value_weight(&self) -> ParamId {
        self.wv
    }

    /// `[B, C, H', W']` → `[B, H'W', d]` image tokens, row-major over (h, w).
    pub fn project_image<'t>(&self, p: &Bound<'t>, f_m: Var<'t>) -> Result<Var<'t>> {
        let shape = f_m.shape();
        if shape.len() != 4 || shape[1] != self.image_channels {
            return Err(TensorError::InvalidShape {
                op: "project_image",
                shape,
                reason: format!("expected [B, {}, H, W]", self.image_channels),
            });
        }
        let mapped = f_m.conv2d(p[self.image_w], Some(p[self.image_b]), Padding::Same)?;
        flatten(mapped)
    }

    /// `[B, L, D]` → `[B, L, d]`.
    pub fn project_text<'t>(&self, p: &Bound<'t>, f_t: Var<'t>) -> Result<Var<'t>> {
        let shape = f_t.shape();
        if shape.len() != 3 || shape[2] != self.text_dim {
            return Err(TensorError::InvalidShape {
                op: "project_text",
                shape,
                reason: format!("expected [B, L, {}]", self.text_dim),
            });
        }
        f_t.matmul(p[self.text_w])?.add(p[self.text_b])
    }

    pub fn project<'t>(
        &self,
        p: &Bound<'t>,
        f_m: Var<'t>,
        f_t: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (m, t) = (f_m.shape(), f_t.shape());
        if m.first() != t.first() {
            return Err(TensorError::ShapeMismatch {
                op: "project",
                lhs: m,
                rhs: t,
            });
        }
        Ok((self.project_image(p, f_m)?, self.project_text(p, f_t)?))
    }

    /// Single-head scaled dot-product attention of the sequence `s` over itself.
    ///
    /// `key_mask`, when given, holds one flag per `[B, S]` position; flagged
    /// positions receive no attention weight.
    pub fn attend<'t>(
        &self,
        p: &Bound<'t>,
        s: Var<'t>,
        key_mask: Option<&[bool]>,
    ) -> Result<Attended<'t>> {
        let shape = s.shape();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(TensorError::InvalidShape {
                op: "attend",
                shape,
                reason: format!("expected [B, S, {}]", self.dim),
            });
        }
        let (b, n) = (shape[0], shape[1]);
        let q = s.matmul(p[self.wq])?;
        let k = s.matmul(p[self.wk])?;
        let v = s.matmul(p[self.wv])?;
        let mut scores = q
            .matmul(k.transpose()?)?
            .scale(1.0 / (self.dim as f64).sqrt())?;
        if let Some(mask) = key_mask {
            if mask.len() != b * n {
                return Err(TensorError::InvalidShape {
                    op: "attend",
                    shape: vec![mask.len()],
                    reason: format!("key mask needs {} entries", b * n),
                });
            }
            if mask.chunks(n).any(|row| row.iter().all(|&m| m)) {
                return Err(TensorError::InvalidShape {
                    op: "attend",
                    shape: vec![b, n],
                    reason: "a sequence has every key masked".into(),
                });
            }
            let bias = mask
                .iter()
                .map(|&m| if m { MASKED_SCORE } else { 0.0 })
                .collect();
            scores = scores.add(s.tape().constant(Tensor::new([b, 1, n], bias)?))?;
        }
        let weights = scores.softmax(2)?;
        Ok(Attended {
            output: weights.matmul(v)?,
            weights,
        })
    }

    /// Attention over `[F_m′; F_t′]`; output `[B, H'W' + L, d]`.
    pub fn cross_attention<'t>(
        &self,
        p: &Bound<'t>,
        image_tokens: Var<'t>,
        text_tokens: Var<'t>,
        text_pad_mask: Option<&[bool]>,
    ) -> Result<Attended<'t>> {
        let (m, t) = (image_tokens.shape(), text_tokens.shape());
        if m.len() != 3 || t.len() != 3 || m[0] != t[0] || m[2] != t[2] {
            return Err(TensorError::ShapeMismatch {
                op: "cross_attention",
                lhs: m,
                rhs: t,
            });
        }
        let joint = Var::concat(&[image_tokens, text_tokens], 1)?;
        let mask = match text_pad_mask {
            Some(pad) => {
                let (b, hw, l) = (m[0], m[1], t[1]);
                if pad.len() != b * l {
                    return Err(TensorError::InvalidShape {
                        op: "cross_attention",
                        shape: vec![pad.len()],
                        reason: format!("text mask needs {} entries", b * l),
                    });
                }
                let mut mask = Vec::with_capacity(b * (hw + l));
                for row in pad.chunks(l) {
                    mask.extend(std::iter::repeat_n(false, hw));
                    mask.extend_from_slice(row);
                }
                Some(mask)
            }
            None => None,
        };
        self.attend(p, joint, mask.as_deref())
    }
}

/// `[B, C, H, W]` → `[B, H·W, C]`.
pub fn flatten(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(TensorError::InvalidShape {
            op: "flatten",
            shape: s,
            reason: "expected [B, C, H, W]".into(),
        });
    }
    x.reshape([s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
}

/// `[B, H·W, C]` → `[B, C, H, W]`.
pub fn unflatten(x: Var<'_>, h: usize, w: usize) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != h * w {
        return Err(TensorError::InvalidShape {
            op: "unflatten",
            shape: s,
            reason: format!("expected [B, {}, C]", h * w),
        });
    }
    x.permute(&[0, 2, 1])?.reshape([s[0], s[2], h, w])
}

/// Keeps the first `h·w` tokens of `[B, S, d]` and lays them out as `[B, d, h, w]`.
pub fn to_spatial(f: Var<'_>, h: usize, w: usize) -> Result<Var<'_>> {
    let s = f.shape();
    if s.len() != 3 || s[1] < h * w {
        return Err(TensorError::InvalidShape {
            op: "to_spatial",
            shape: s,
            reason: format!("need at least {} tokens", h * w),
        });
    }
    unflatten(f.narrow(1, 0, h * w)?, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fusion() -> (ParamStore, FusionParams) {
        let mut store = ParamStore::new();
        let f = FusionParams::new(&mut store, &mut ChaCha8Rng::seed_from_u64(2), 64, 16, 32);
        (store, f)
    }

    #[test]
    fn projection_and_attention_shapes() {
        let (store, f) = fusion();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let fm = tape.constant(Tensor::from_fn([1, 64, 8, 8], |i| (i % 7) as f64 * 0.1));
        let ft = tape.constant(Tensor::from_fn([1, 12, 16], |i| (i % 5) as f64 * 0.1));
        let (im, tx) = f.project(&p, fm, ft).unwrap();
        assert_eq!(im.shape(), vec![1, 64, 32]);
        assert_eq!(tx.shape(), vec![1, 12, 32]);
        let att = f.cross_attention(&p, im, tx, None).unwrap();
        assert_eq!(att.output.shape(), vec![1, 76, 32]);
        assert_eq!(
            to_spatial(att.output, 8, 8).unwrap().shape(),
            vec![1, 32, 8, 8]
        );
    }

    #[test]
    fn zero_inputs_project_to_zero() {
        let (store, f) = fusion();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let fm = tape.constant(Tensor::zeros([2, 64, 4, 4]));
        let ft = tape.constant(Tensor::zeros([2, 5, 16]));
        let (im, tx) = f.project(&p, fm, ft).unwrap();
        assert!(im.to_vec().iter().chain(&tx.to_vec()).all(|&v| v == 0.0));
    }

    #[test]
    fn flatten_orders_tokens_row_major() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([1, 2, 2, 3], |i| i as f64));
        let tokens = flatten(x).unwrap();
        // token (h=0, w=1) holds channel values 1 and 7
        assert_eq!(&tokens.to_vec()[2..4], &[1.0, 7.0]);
        assert_eq!(unflatten(tokens, 2, 3).unwrap().to_vec(), x.to_vec());
        assert_eq!(to_spatial(tokens, 2, 3).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn to_spatial_rejects_short_sequences() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 60, 32]));
        assert!(to_spatial(x, 8, 8).is_err());
    }

    #[test]
    fn masked_text_keys_get_no_weight() {
        let (store, f) = fusion();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let im = tape.constant(Tensor::from_fn([1, 4, 32], |i| ((i * 3) % 11) as f64 * 0.1));
        let tx = tape.constant(Tensor::from_fn([1, 3, 32], |i| ((i * 5) % 7) as f64 * 0.1));
        let att = f
            .cross_attention(&p, im, tx, Some(&[false, true, true]))
            .unwrap();
        let w = att.weights.to_vec();
        for row in w.chunks(7) {
            assert_eq!(&row[5..], &[0.0, 0.0]);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
