//! Small trainable text encoder producing the temporal features F_t.
//!
//! Token and position embeddings feed one masked self-attention block and a
//! two-layer feed-forward network, each wrapped in a residual connection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{Bound, ParamId, ParamStore};
use crate::prompt::TokenSequence;
use crate::tensor::{Result, Tensor, TensorError, Var};

/// Additive score for masked attention keys; `exp` of it underflows to exactly 0.
pub(crate) const MASKED_SCORE: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone)]
pub struct TextEncoderParams {
    pub config: TextEncoderConfig,
    embed: ParamId,
    position: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
}

/// Encoder output for a batch of token sequences.
#[derive(Debug, Clone)]
pub struct TextEncoding<'t> {
    /// F_t, `[B, L, D]`.
    pub features: Var<'t>,
    /// Self-attention weights, `[B, L, L]` (query × key).
    pub attention: Var<'t>,
    /// `[B·L]`, true at padding positions.
    pub pad_mask: Vec<bool>,
}

impl TextEncoderParams {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: TextEncoderConfig) -> Self {
        let TextEncoderConfig {
            vocab_size: v,
            dim: d,
            max_len: l,
        } = config;
        Self {
            config,
            embed: store.add_he("text.embed", &[v, d], d, rng),
            position: store.add_he("text.position", &[l, d], d, rng),
            wq: store.add_he("text.attn.wq", &[d, d], d, rng),
            wk: store.add_he("text.attn.wk", &[d, d], d, rng),
            wv: store.add_he("text.attn.wv", &[d, d], d, rng),
            wo: store.add_he("text.attn.wo", &[d, d], d, rng),
            ff1_w: store.add_he("text.ff1.weight", &[d, 2 * d], d, rng),
            ff1_b: store.add_zeros("text.ff1.bias", &[2 * d]),
            ff2_w: store.add_he("text.ff2.weight", &[2 * d, d], 2 * d, rng),
            ff2_b: store.add_zeros("text.ff2.bias", &[d]),
        }
    }

    pub fn encode<'t>(&self, p: &Bound<'t>, batch: &[TokenSequence]) -> Result<TextEncoding<'t>> {
        let TextEncoderConfig {
            vocab_size,
            dim,
            max_len,
        } = self.config;
        let b = batch.len();
        if b == 0 || batch.iter().any(|s| s.len() != max_len) {
            return Err(TensorError::InvalidShape {
                op: "encode_text",
                shape: batch.iter().map(TokenSequence::len).collect(),
                reason: format!("expected a non-empty batch of length-{max_len} sequences"),
            });
        }
        let ids: Vec<usize> = batch.iter().flat_map(|s| s.ids.iter().copied()).collect();
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(TensorError::Index {
                op: "encode_text",
                index: bad,
                bound: vocab_size,
            });
        }
        let pad_mask: Vec<bool> = batch.iter().flat_map(TokenSequence::pad_mask).collect();
        let tape = p[self.embed].tape();

        let x = p[self.embed]
            .embed(&ids, &[b, max_len])?
            .add(p[self.position])?;

        // Key mask: padding keys are excluded unless the whole sequence is
        // padding, in which case position 0 stays visible.
        let mut bias = vec![0.0; b * max_len];
        for s in 0..b {
            let row = &pad_mask[s * max_len..(s + 1) * max_len];
            let all_pad = row.iter().all(|&m| m);
            for (j, &masked) in row.iter().enumerate() {
                if masked && !(all_pad && j == 0) {
                    bias[s * max_len + j] = MASKED_SCORE;
                }
            }
        }
        let bias = tape.constant(Tensor::new([b, 1, max_len], bias)?);

        let q = x.matmul(p[self.wq])?;
        let k = x.matmul(p[self.wk])?;
        let v = x.matmul(p[self.wv])?;
        let scores = q
            .matmul(k.transpose()?)?
            .scale(1.0 / (dim as f64).sqrt())?
            .add(bias)?;
        let attention = scores.softmax(2)?;
        let x1 = x.add(attention.matmul(v)?.matmul(p[self.wo])?)?;

        let hidden = x1.matmul(p[self.ff1_w])?.add(p[self.ff1_b])?.relu()?;
        let features = x1.add(hidden.matmul(p[self.ff2_w])?.add(p[self.ff2_b])?)?;
        Ok(TextEncoding {
            features,
            attention,
            pad_mask,
        })
    }
}

/// Mean of F_t over non-padding positions: `[B, L, D]` → `[B, D]`.
pub fn pool_text<'t>(features: Var<'t>, pad_mask: &[bool]) -> Result<Var<'t>> {
    let shape = features.shape();
    if shape.len() != 3 || pad_mask.len() != shape[0] * shape[1] {
        return Err(TensorError::InvalidShape {
            op: "pool_text",
            shape,
            reason: "mask must have one entry per token".into(),
        });
    }
    let (b, l) = (shape[0], shape[1]);
    let mut weights = vec![0.0; b * l];
    for s in 0..b {
        let row = &pad_mask[s * l..(s + 1) * l];
        let count = row.iter().filter(|&&m| !m).count();
        if count == 0 {
            return Err(TensorError::InvalidShape {
                op: "pool_text",
                shape: vec![b, l],
                reason: format!("sample {s} is all padding"),
            });
        }
        for (j, &m) in row.iter().enumerate() {
            if !m {
                weights[s * l + j] = 1.0 / count as f64;
            }
        }
    }
    let w = features.tape().constant(Tensor::new([b, l, 1], weights)?);
    features.mul(w)?.sum_axis(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::PAD_ID;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(l: usize) -> (ParamStore, TextEncoderParams) {
        let mut store = ParamStore::new();
        let cfg = TextEncoderConfig {
            vocab_size: 20,
            dim: 16,
            max_len: l,
        };
        let enc = TextEncoderParams::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), cfg);
        (store, enc)
    }

    fn seq(ids: &[usize], l: usize) -> TokenSequence {
        let mut ids = ids.to_vec();
        ids.resize(l, PAD_ID);
        TokenSequence { ids }
    }

    #[test]
    fn output_shape_and_identical_rows() {
        let (store, enc) = encoder(12);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let s = seq(&[3, 4, 5, 2], 12);
        let out = enc.encode(&p, &[s.clone(), s]).unwrap();
        assert_eq!(out.features.shape(), vec![2, 12, 16]);
        let v = out.features.to_vec();
        assert_eq!(v[..12 * 16], v[12 * 16..]);
    }

    #[test]
    fn padding_keys_get_zero_weight() {
        let (store, enc) = encoder(6);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let out = enc.encode(&p, &[seq(&[3, 4], 6)]).unwrap();
        let a = out.attention.to_vec();
        for q in 0..6 {
            let row = &a[q * 6..(q + 1) * 6];
            assert!(row[2..].iter().all(|&w| w == 0.0), "{row:?}");
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn all_padding_attends_to_first_position() {
        let (store, enc) = encoder(5);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let out = enc.encode(&p, &[seq(&[], 5)]).unwrap();
        assert!(out.features.value().is_finite());
        let a = out.attention.to_vec();
        for q in 0..5 {
            assert_eq!(&a[q * 5..(q + 1) * 5], &[1.0, 0.0, 0.0, 0.0, 0.0]);
        }
        assert!(pool_text(out.features, &out.pad_mask).is_err());
    }

    #[test]
    fn rejects_ids_outside_vocabulary() {
        let (store, enc) = encoder(4);
        let tape = Tape::new();
        let p = store.bind(&tape);
        assert!(matches!(
            enc.encode(&p, &[seq(&[20], 4)]),
            Err(TensorError::Index { index: 20, .. })
        ));
    }

    #[test]
    fn pooling_is_mean_over_content() {
        let tape = Tape::new();
        let f = tape.leaf(&Tensor::from_fn([1, 3, 2], |i| i as f64));
        // rows: [0,1], [2,3], [4,5]; positions 0 and 1 are content
        let pooled = pool_text(f, &[false, false, true]).unwrap();
        assert_eq!(pooled.shape(), vec![1, 2]);
        assert_eq!(pooled.to_vec(), vec![1.0, 2.0]);
        let single = pool_text(f, &[true, false, true]).unwrap();
        assert_eq!(single.to_vec(), vec![2.0, 3.0]);
    }
}
