use std::sync::Arc;

use crate::error::{dim_err, Result};
use crate::gemm::gemm;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    fn cols_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols_width(&self) -> usize {
        self.n * self.h_out * self.w_out
    }
}

/// Unfolds `x` into a `(C_in·k·k) × (N·H'·W')` matrix.
fn im2col(x: &[f64], g: &Geometry) -> Vec<f64> {
    let width = g.cols_width();
    let mut cols = vec![0.0; g.cols_rows() * width];
    let plane = g.h_out * g.w_out;
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * width..(row + 1) * width];
                for b in 0..g.n {
                    let src = &x[(b * g.c_in + c) * g.h * g.w..];
                    for oy in 0..g.h_out {
                        let iy = (oy + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.w_out {
                            let ix = (ox + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            dst[b * plane + oy * g.w_out + ox] = src[iy as usize * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], g: &Geometry) -> Vec<f64> {
    let width = g.cols_width();
    let mut x = vec![0.0; g.n * g.c_in * g.h * g.w];
    let plane = g.h_out * g.w_out;
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * width..(row + 1) * width];
                for b in 0..g.n {
                    let base = (b * g.c_in + c) * g.h * g.w;
                    for oy in 0..g.h_out {
                        let iy = (oy + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for ox in 0..g.w_out {
                            let ix = (ox + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            x[base + iy as usize * g.w + ix as usize] += src[b * plane + oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

impl Tensor {
    /// 2-d cross-correlation (no kernel flip), stride 1, zero padding.
    ///
    /// `self` is `N×C_in×H×W`, `weight` is `C_out×C_in×k×k` with `k` odd and
    /// the optional bias is `[C_out]`. Output spatial size is `H + 2·padding − k + 1`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, padding: usize) -> Result<Tensor> {
        let [n, c_in, h, w] = *self.shape() else {
            return dim_err(format!("conv2d: input must be N×C×H×W, got {:?}", self.shape()));
        };
        let [c_out, wc_in, k, k2] = *weight.shape() else {
            return dim_err(format!("conv2d: weight must be 4-d, got {:?}", weight.shape()));
        };
        if wc_in != c_in {
            return dim_err(format!("conv2d: input has {c_in} channels, kernel expects {wc_in}"));
        }
        if k != k2 || k % 2 == 0 {
            return dim_err(format!("conv2d: kernel must be square with odd size, got {k}×{k2}"));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return dim_err(format!("conv2d: {k}×{k} kernel exceeds padded {h}×{w} input"));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return dim_err(format!("conv2d: bias shape {:?}, expected [{c_out}]", b.shape()));
            }
        }
        let g = Geometry {
            n,
            c_in,
            h,
            w,
            k,
            pad: padding,
            h_out: h + 2 * padding + 1 - k,
            w_out: w + 2 * padding + 1 - k,
        };
        let cols = Arc::new(im2col(self.data(), &g));
        let (rows, width) = (g.cols_rows(), g.cols_width());
        let plane = g.h_out * g.w_out;

        // out_mat is C_out × (N·H'·W'); scatter into N×C_out×H'×W'.
        let mut out_mat = vec![0.0; c_out * width];
        gemm(c_out, width, rows, weight.data(), false, &cols, false, &mut out_mat, 0.0);
        let mut out = vec![0.0; n * c_out * plane];
        for co in 0..c_out {
            let b = bias.map_or(0.0, |b| b.data()[co]);
            for bi in 0..n {
                let src = &out_mat[co * width + bi * plane..co * width + (bi + 1) * plane];
                let dst = &mut out[(bi * c_out + co) * plane..(bi * c_out + co + 1) * plane];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d = s + b);
            }
        }

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let weight_c = weight.clone();
        Ok(Tensor::from_op(
            vec![n, c_out, g.h_out, g.w_out],
            out,
            parents,
            Box::new(move |grad, needs| {
                let mut gmat = vec![0.0; c_out * width];
                for co in 0..c_out {
                    for bi in 0..n {
                        let src = &grad[(bi * c_out + co) * plane..(bi * c_out + co + 1) * plane];
                        gmat[co * width + bi * plane..co * width + (bi + 1) * plane].copy_from_slice(src);
                    }
                }
                let gx = needs[0].then(|| {
                    let mut gcols = vec![0.0; rows * width];
                    gemm(rows, width, c_out, weight_c.data(), true, &gmat, false, &mut gcols, 0.0);
                    col2im(&gcols, &g)
                });
                let gw = needs[1].then(|| {
                    let mut gw = vec![0.0; c_out * rows];
                    gemm(c_out, rows, width, &gmat, false, &cols, true, &mut gw, 0.0);
                    gw
                });
                let mut out = vec![gx, gw];
                if needs.len() > 2 {
                    out.push(needs[2].then(|| {
                        gmat.chunks_exact(width).map(|r| r.iter().sum()).collect()
                    }));
                }
                out
            }),
        ))
    }

    /// Global average pool over the spatial axes: `N×C×H×W` → `N×C`.
    pub fn avg_pool2d(&self) -> Result<Tensor> {
        let [n, c, h, w] = *self.shape() else {
            return dim_err(format!("avg_pool2d: expected N×C×H×W, got {:?}", self.shape()));
        };
        let area = h * w;
        if area == 0 {
            return dim_err("avg_pool2d: empty spatial extent");
        }
        let out = self
            .data()
            .chunks_exact(area)
            .map(|p| p.iter().sum::<f64>() / area as f64)
            .collect();
        Ok(Tensor::from_op(
            vec![n, c],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gx = g
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v / area as f64, area))
                    .collect();
                vec![Some(gx)]
            }),
        ))
    }
}
