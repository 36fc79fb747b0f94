//! Bidirectional contrastive alignment between pooled image and text vectors.

use crate::tensor::{Result, Tensor, TensorError, Var};

/// Norm floor used by the cosine similarity.
pub const NORM_EPS: f64 = 1e-8;

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Matched rows of image and text vectors, both `[Nb, D]`.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentBatch<'t> {
    pub image_vecs: Var<'t>,
    pub text_vecs: Var<'t>,
    pub tau: f64,
    pub lambda: f64,
}

impl<'t> AlignmentBatch<'t> {
    pub fn new(image_vecs: Var<'t>, text_vecs: Var<'t>, tau: f64, lambda: f64) -> Result<Self> {
        let (a, b) = (image_vecs.shape(), text_vecs.shape());
        if a.len() != 2 || a != b || a[0] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "alignment_batch",
                lhs: a,
                rhs: b,
            });
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(TensorError::Domain {
                op: "tau",
                value: tau,
            });
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(TensorError::Domain {
                op: "lambda",
                value: lambda,
            });
        }
        Ok(Self {
            image_vecs,
            text_vecs,
            tau,
            lambda,
        })
    }

    pub fn len(&self) -> usize {
        self.image_vecs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cosine similarities `[Nb, Nb]`, row = image, column = text.
    pub fn similarity(&self) -> Result<Var<'t>> {
        similarity_matrix(self.image_vecs, self.text_vecs)
    }
}

/// Spatial mean per channel: `[B, C, H, W]` → `[B, C]`.
pub fn pool_image(f_m: Var<'_>) -> Result<Var<'_>> {
    let s = f_m.shape();
    if s.len() != 4 {
        return Err(TensorError::InvalidShape {
            op: "pool_image",
            shape: s,
            reason: "expected [B, C, H, W]".into(),
        });
    }
    f_m.reshape([s[0], s[1], s[2] * s[3]])?.mean_axis(2)
}

/// Rows divided by `max(‖row‖, ε)`.
fn normalize_rows(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    let norm = x
        .square()?
        .sum_axis(s.len() - 1)?
        .clamp(NORM_EPS * NORM_EPS, f64::INFINITY)?
        .sqrt()?;
    let mut keep = norm.shape();
    keep.push(1);
    x.div(norm.reshape(keep)?)
}

/// Cosine similarity of two `[D]` vectors.
pub fn cosine_sim<'t>(u: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    let (a, b) = (u.shape(), v.shape());
    if a.len() != 1 || a != b {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_sim",
            lhs: a,
            rhs: b,
        });
    }
    normalize_rows(u)?.mul(normalize_rows(v)?)?.sum()
}

/// Pairwise cosine similarities of `[N, D]` and `[M, D]` rows → `[N, M]`.
pub fn similarity_matrix<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(TensorError::ShapeMismatch {
            op: "similarity_matrix",
            lhs: sa,
            rhs: sb,
        });
    }
    normalize_rows(a)?.matmul(normalize_rows(b)?.transpose()?)
}

/// Mean over rows of `−log softmax(logits)[i, i]` with softmax along `axis`.
fn matched_nll(logits: Var<'_>, axis: usize) -> Result<Var<'_>> {
    let n = logits.shape()[0];
    let eye = Tensor::from_fn([n, n], |k| if k / n == k % n { 1.0 } else { 0.0 });
    let picked = logits.log_softmax(axis)?.mul(logits.tape().constant(eye))?;
    picked.sum()?.scale(-1.0 / n as f64)
}

/// Image-to-text InfoNCE: each image row against all text columns.
pub fn loss_i2t<'t>(batch: &AlignmentBatch<'t>) -> Result<Var<'t>> {
    matched_nll(batch.similarity()?.scale(1.0 / batch.tau)?, 1)
}

/// Text-to-image InfoNCE: each text column against all image rows.
pub fn loss_t2i<'t>(batch: &AlignmentBatch<'t>) -> Result<Var<'t>> {
    matched_nll(batch.similarity()?.scale(1.0 / batch.tau)?, 0)
}

/// `λ·loss_i2t + (1 − λ)·loss_t2i`.
pub fn contrastive_loss<'t>(batch: &AlignmentBatch<'t>) -> Result<Var<'t>> {
    let logits = batch.similarity()?.scale(1.0 / batch.tau)?;
    let i2t = matched_nll(logits, 1)?.scale(batch.lambda)?;
    let t2i = matched_nll(logits, 0)?.scale(1.0 - batch.lambda)?;
    i2t.add(t2i)
}
