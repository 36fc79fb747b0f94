//! 2-D cross-correlation via im2col + GEMM.

use super::kernels::gemm;
use super::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding that preserves the spatial size (odd kernels only).
    Same,
    /// No padding.
    Valid,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], padding: Padding) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: if x.len() != 4 { x.to_vec() } else { k.to_vec() },
                reason: "expected rank-4 input [B,C,H,W] and kernel [Cout,Cin,kh,kw]".into(),
            });
        }
        if x[1] != k[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: k.to_vec(),
            });
        }
        let (kh, kw) = (k[2], k[3]);
        let (pad_h, pad_w) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(TensorError::InvalidShape {
                        op: "conv2d",
                        shape: k.to_vec(),
                        reason: "same padding needs odd kernel sizes".into(),
                    });
                }
                (kh / 2, kw / 2)
            }
            Padding::Valid => (0, 0),
        };
        if x[2] + 2 * pad_h < kh || x[3] + 2 * pad_w < kw {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: x.to_vec(),
                reason: "kernel larger than the padded input".into(),
            });
        }
        Ok(Self {
            batch: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: k[0],
            kh,
            kw,
            pad_h,
            pad_w,
            ho: x[2] + 2 * pad_h - kh + 1,
            wo: x[3] + 2 * pad_w - kw + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.ho, self.wo]
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1 unpadded kernels read the input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad_h == 0 && self.pad_w == 0
    }

    /// Range of output columns `ox` whose input column `ox + kj - pad_w` is in bounds.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad_w.saturating_sub(kj).min(self.wo);
        let hi = (self.w + self.pad_w).saturating_sub(kj).min(self.wo);
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let (h, w, ho, wo) = (self.h, self.w, self.ho, self.wo);
        for c in 0..self.cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * ho * wo;
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..ho {
                        let dst = &mut col[row + oy * wo..row + (oy + 1) * wo];
                        let iy = (oy + ki) as isize - self.pad_h as isize;
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        if hi > lo {
                            let src = iy as usize * w + lo + kj - self.pad_w;
                            dst[lo..hi].copy_from_slice(&plane[src..src + hi - lo]);
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], gx: &mut [f64]) {
        let (h, w, ho, wo) = (self.h, self.w, self.ho, self.wo);
        for c in 0..self.cin {
            let plane = &mut gx[c * h * w..(c + 1) * h * w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * ho * wo;
                    let (lo, hi) = self.valid_cols(kj);
                    if hi <= lo {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy + ki) as isize - self.pad_h as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &col[row + oy * wo + lo..row + oy * wo + hi];
                        let at = iy as usize * w + lo + kj - self.pad_w;
                        for (d, s) in plane[at..at + hi - lo].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], k: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let (pl, px) = (self.patch_len(), self.pixels());
        let in_len = self.cin * self.h * self.w;
        let out_len = self.cout * px;
        let mut out = vec![0.0; self.batch * out_len];
        let mut col = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; pl * px]
        };
        for b in 0..self.batch {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let ob = &mut out[b * out_len..(b + 1) * out_len];
            if let Some(bias) = bias {
                for (co, &bv) in bias.iter().enumerate() {
                    ob[co * px..(co + 1) * px].fill(bv);
                }
            }
            let cols = if self.is_pointwise() {
                xb
            } else {
                self.im2col(xb, &mut col);
                &col
            };
            gemm(self.cout, pl, px, k, false, cols, false, ob, 1.0);
        }
        out
    }

    /// Accumulates input, kernel and bias gradients for upstream gradient `g`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        x: &[f64],
        k: &[f64],
        g: &[f64],
        mut gx: Option<&mut [f64]>,
        mut gk: Option<&mut [f64]>,
        mut gb: Option<&mut [f64]>,
    ) {
        let (pl, px) = (self.patch_len(), self.pixels());
        let in_len = self.cin * self.h * self.w;
        let out_len = self.cout * px;
        let pointwise = self.is_pointwise();
        let mut col = if pointwise || gk.is_none() {
            Vec::new()
        } else {
            vec![0.0; pl * px]
        };
        let mut dcol = if pointwise || gx.is_none() {
            Vec::new()
        } else {
            vec![0.0; pl * px]
        };
        for b in 0..self.batch {
            let gy = &g[b * out_len..(b + 1) * out_len];
            let xb = &x[b * in_len..(b + 1) * in_len];
            if let Some(gb) = gb.as_deref_mut() {
                for (co, acc) in gb.iter_mut().enumerate() {
                    *acc += gy[co * px..(co + 1) * px].iter().sum::<f64>();
                }
            }
            if let Some(gk) = gk.as_deref_mut() {
                let cols = if pointwise {
                    xb
                } else {
                    self.im2col(xb, &mut col);
                    &col
                };
                gemm(self.cout, px, pl, gy, false, cols, true, gk, 1.0);
            }
            if let Some(gx) = gx.as_deref_mut() {
                let gxb = &mut gx[b * in_len..(b + 1) * in_len];
                if pointwise {
                    gemm(pl, self.cout, px, k, true, gy, false, gxb, 1.0);
                } else {
                    gemm(pl, self.cout, px, k, true, gy, false, &mut dcol, 0.0);
                    self.col2im(&dcol, gxb);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-summation reference convolution.
    fn naive(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.cout * g.ho * g.wo];
        for b in 0..g.batch {
            for co in 0..g.cout {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut s = 0.0;
                        for c in 0..g.cin {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = (oy + ki) as isize - g.pad_h as isize;
                                    let ix = (ox + kj) as isize - g.pad_w as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize
                                    {
                                        continue;
                                    }
                                    s += x
                                        [((b * g.cin + c) * g.h + iy as usize) * g.w + ix as usize]
                                        * k[((co * g.cin + c) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                        out[((b * g.cout + co) * g.ho + oy) * g.wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_path_matches_direct_summation() {
        for (xs, ks, pad) in [
            ([2, 3, 5, 7], [4, 3, 3, 3], Padding::Same),
            ([1, 2, 6, 6], [3, 2, 3, 5], Padding::Valid),
            ([1, 2, 4, 4], [2, 2, 5, 5], Padding::Same),
            ([2, 3, 4, 4], [5, 3, 1, 1], Padding::Same),
        ] {
            let g = ConvGeom::new(&xs, &ks, pad).unwrap();
            let x: Vec<f64> = (0..xs.iter().product::<usize>())
                .map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0)
                .collect();
            let k: Vec<f64> = (0..ks.iter().product::<usize>())
                .map(|i| ((i * 13 % 7) as f64 - 3.0) / 2.0)
                .collect();
            let fast = g.forward(&x, &k, None);
            let slow = naive(&g, &x, &k);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn even_kernel_with_same_padding_is_rejected() {
        assert!(ConvGeom::new(&[1, 1, 4, 4], &[1, 1, 2, 2], Padding::Same).is_err());
        assert!(ConvGeom::new(&[1, 2, 4, 4], &[1, 1, 3, 3], Padding::Same).is_err());
    }
}
