//! Segmentation losses on probability maps and overlap metrics on binary masks.

use crate::tensor::{Result, Tensor, TensorError, Var};

/// Probability clamp applied before the logarithms in [`bce`].
pub const BCE_EPS: f64 = 1e-7;
pub const TVERSKY_SMOOTH: f64 = 1.0;
pub const THRESHOLD: f64 = 0.5;

fn check_pair(op: &'static str, pred: Var<'_>, target: Var<'_>) -> Result<Vec<usize>> {
    let (a, b) = (pred.shape(), target.shape());
    if a != b || a.len() < 2 {
        return Err(TensorError::ShapeMismatch { op, lhs: a, rhs: b });
    }
    Ok(a)
}

/// Mean binary cross-entropy over every element.
pub fn bce<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    check_pair("bce", pred, target)?;
    let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let pos = target.mul(p.log()?)?;
    let neg = target
        .neg()?
        .add_scalar(1.0)?
        .mul(p.neg()?.add_scalar(1.0)?.log()?)?;
    pos.add(neg)?.mean()?.neg()
}

/// Soft TP, FP and FN per (sample, class), each `[B, K]`.
fn soft_counts<'t>(op: &'static str, pred: Var<'t>, target: Var<'t>) -> Result<[Var<'t>; 3]> {
    let s = check_pair(op, pred, target)?;
    let flat = [s[0], s[1], s[2..].iter().product()];
    let (p, y) = (pred.reshape(flat)?, target.reshape(flat)?);
    let tp = p.mul(y)?.sum_axis(2)?;
    let fp = p.mul(y.neg()?.add_scalar(1.0)?)?.sum_axis(2)?;
    let fn_ = p.neg()?.add_scalar(1.0)?.mul(y)?.sum_axis(2)?;
    Ok([tp, fp, fn_])
}

/// `1 − (TP + s)/(TP + α·FP + β·FN + s)` averaged over samples and classes.
pub fn tversky_smoothed<'t>(
    pred: Var<'t>,
    target: Var<'t>,
    alpha: f64,
    beta: f64,
    smooth: f64,
) -> Result<Var<'t>> {
    for (name, v) in [
        ("tversky_alpha", alpha),
        ("tversky_beta", beta),
        ("tversky_smooth", smooth),
    ] {
        if !(v >= 0.0) {
            return Err(TensorError::Domain { op: name, value: v });
        }
    }
    let [tp, fp, fn_] = soft_counts("tversky", pred, target)?;
    let num = tp.add_scalar(smooth)?;
    let den = tp
        .add(fp.scale(alpha)?)?
        .add(fn_.scale(beta)?)?
        .add_scalar(smooth)?;
    num.div(den)?.mean()?.neg()?.add_scalar(1.0)
}

/// Tversky loss with smoothing [`TVERSKY_SMOOTH`].
pub fn tversky<'t>(pred: Var<'t>, target: Var<'t>, alpha: f64, beta: f64) -> Result<Var<'t>> {
    tversky_smoothed(pred, target, alpha, beta, TVERSKY_SMOOTH)
}

/// `1 − (2·Σpy + s)/(Σp + Σy + s)` averaged over samples and classes.
pub fn soft_dice_loss<'t>(pred: Var<'t>, target: Var<'t>, smooth: f64) -> Result<Var<'t>> {
    let s = check_pair("soft_dice", pred, target)?;
    let flat = [s[0], s[1], s[2..].iter().product()];
    let (p, y) = (pred.reshape(flat)?, target.reshape(flat)?);
    let inter = p.mul(y)?.sum_axis(2)?;
    let num = inter.scale(2.0)?.add_scalar(smooth)?;
    let den = p.sum_axis(2)?.add(y.sum_axis(2)?)?.add_scalar(smooth)?;
    num.div(den)?.mean()?.neg()?.add_scalar(1.0)
}

/// Mean of [`bce`] and [`tversky`].
pub fn seg_loss<'t>(pred: Var<'t>, target: Var<'t>, alpha: f64, beta: f64) -> Result<Var<'t>> {
    bce(pred, target)?
        .add(tversky(pred, target, alpha, beta)?)?
        .scale(0.5)
}

pub fn binarize(probs: &[f64], threshold: f64) -> Vec<bool> {
    probs.iter().map(|&p| p >= threshold).collect()
}

fn overlap(pred: &[bool], target: &[bool]) -> (usize, usize, usize) {
    assert_eq!(pred.len(), target.len(), "mask lengths differ");
    let (mut inter, mut a, mut b) = (0, 0, 0);
    for (&p, &t) in pred.iter().zip(target) {
        inter += (p && t) as usize;
        a += p as usize;
        b += t as usize;
    }
    (inter, a, b)
}

/// `2|A∩B|/(|A|+|B|)`; 1 when both masks are empty.
pub fn dice(pred: &[bool], target: &[bool]) -> f64 {
    let (inter, a, b) = overlap(pred, target);
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

/// `|A∩B|/|A∪B|`; 1 when both masks are empty.
pub fn jaccard(pred: &[bool], target: &[bool]) -> f64 {
    let (inter, a, b) = overlap(pred, target);
    let union = a + b - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-class Dice and Jaccard averaged over samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub dice: Vec<f64>,
    pub jaccard: Vec<f64>,
}

/// Binarizes `probs` at `threshold` and scores every (sample, class) mask
/// against the binary `target`; both are `[B, K, ...]`.
pub fn class_scores(probs: &Tensor, target: &Tensor, threshold: f64) -> Result<ClassScores> {
    let (a, b) = (probs.shape(), target.shape());
    if a != b || a.len() < 2 {
        return Err(TensorError::ShapeMismatch {
            op: "class_scores",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    let (n, k) = (a[0], a[1]);
    let plane: usize = a[2..].iter().product();
    let mut scores = ClassScores {
        dice: vec![0.0; k],
        jaccard: vec![0.0; k],
    };
    for (i, (p, t)) in probs
        .data()
        .chunks(plane)
        .zip(target.data().chunks(plane))
        .enumerate()
    {
        let pred = binarize(p, threshold);
        let truth: Vec<bool> = t.iter().map(|&v| v >= 0.5).collect();
        scores.dice[i % k] += dice(&pred, &truth) / n as f64;
        scores.jaccard[i % k] += jaccard(&pred, &truth) / n as f64;
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn pair<'t>(tape: &'t Tape, p: &[f64], y: &[f64]) -> (Var<'t>, Var<'t>) {
        let shape = [1, 1, p.len()];
        (
            tape.leaf(&Tensor::new(shape, p.to_vec()).unwrap()),
            tape.constant(Tensor::new(shape, y.to_vec()).unwrap()),
        )
    }

    #[test]
    fn bce_examples() {
        let tape = Tape::new();
        let (p, y) = pair(&tape, &[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]);
        assert!(bce(p, y).unwrap().item().unwrap() <= 1e-6);
        let (p, y) = pair(&tape, &[0.5], &[1.0]);
        assert!((bce(p, y).unwrap().item().unwrap() - 2f64.ln()).abs() < 1e-12);
        let (p, y) = pair(&tape, &[0.0, 1.0], &[1.0, 0.0]);
        let worst = bce(p, y).unwrap().item().unwrap();
        assert!((worst + BCE_EPS.ln()).abs() < 1e-6, "{worst}");
    }

    #[test]
    fn tversky_examples() {
        let tape = Tape::new();
        let (p, y) = pair(&tape, &[1.0, 0.0, 1.0, 0.0], &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(tversky(p, y, 0.5, 0.5).unwrap().item().unwrap(), 0.0);
        // TP = 1, FP = 1, FN = 1
        let (p, y) = pair(&tape, &[1.0, 1.0, 0.0], &[1.0, 0.0, 1.0]);
        assert_eq!(
            tversky_smoothed(p, y, 0.5, 0.5, 0.0)
                .unwrap()
                .item()
                .unwrap(),
            0.5
        );
        assert!(tversky(p, y, -1.0, 0.5).is_err());
    }

    #[test]
    fn seg_loss_is_mean_of_parts() {
        let tape = Tape::new();
        let (p, y) = pair(&tape, &[0.9, 0.2, 0.6, 0.4], &[1.0, 0.0, 0.0, 1.0]);
        let a = bce(p, y).unwrap().item().unwrap();
        let b = tversky(p, y, 0.5, 0.5).unwrap().item().unwrap();
        let s = seg_loss(p, y, 0.5, 0.5).unwrap().item().unwrap();
        assert!((s - (a + b) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn metric_examples() {
        let a = [true, true, false, false];
        let b = [true, false, true, false];
        assert_eq!(dice(&a, &b), 0.5);
        assert!((jaccard(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((dice(&a, &a), jaccard(&a, &a)), (1.0, 1.0));
        let c = [false, false, true, true];
        assert_eq!((dice(&a, &c), jaccard(&a, &c)), (0.0, 0.0));
        let empty = [false; 4];
        assert_eq!((dice(&empty, &empty), jaccard(&empty, &empty)), (1.0, 1.0));
        assert_eq!((dice(&empty, &a), jaccard(&a, &empty)), (0.0, 0.0));
    }

    #[test]
    fn class_scores_average_per_class() {
        // two samples, two classes, two pixels
        let probs = Tensor::new([2, 2, 2], vec![0.9, 0.1, 0.0, 0.0, 0.9, 0.9, 0.0, 0.7]).unwrap();
        let target = Tensor::new([2, 2, 2], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let s = class_scores(&probs, &target, THRESHOLD).unwrap();
        assert!((s.dice[0] - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(s.dice[1], 0.5);
        assert!((s.jaccard[0] - 0.75).abs() < 1e-15);
    }
}
