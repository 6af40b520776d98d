//! Differentiable tensor operations.
//!
//! Shapes must match exactly except for the two documented broadcasts:
//! scalar ops and [`Tensor::add_bias`].

use std::sync::Arc;

use crate::error::{dim_err, Result};
use crate::gemm::gemm;
use crate::tensor::Tensor;

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn matrix_dims(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => dim_err(format!("{op}: expected a matrix, got shape {s:?}")),
    }
}

/// Rows × length of the last axis.
fn last_axis(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape().last() {
        Some(&0) | None => dim_err(format!("{op}: empty or missing last axis in {:?}", t.shape())),
        Some(&n) => Ok((t.numel() / n, n)),
    }
}

impl Tensor {
    /// Elementwise map with derivative expressed through input and output values.
    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        let x = self.clone();
        let y = Arc::new(out.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .zip(y.iter())
                    .map(|((g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|g, needs| {
                let gb = needs[1].then(|| g.iter().map(|v| -v).collect());
                vec![Some(g.to_vec()), gb]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| g.iter().zip(b.data()).map(|(g, b)| g * b).collect());
                let gb = needs[1].then(|| g.iter().zip(a.data()).map(|(g, a)| g * a).collect());
                vec![ga, gb]
            }),
        ))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("div", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(a, b)| a / b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| g.iter().zip(b.data()).map(|(g, b)| g / b).collect());
                let gb = needs[1].then(|| {
                    g.iter()
                        .zip(a.data())
                        .zip(b.data())
                        .map(|((g, a), b)| -g * a / (b * b))
                        .collect()
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        self.unary(|x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.unary(|x| x + s, |_, _| 1.0)
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(
            |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Subgradient 0 at the kink.
    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    /// `max(x, floor)`; the gradient passes only where `x > floor`.
    pub fn clamp_min(&self, floor: f64) -> Tensor {
        self.unary(
            move |x| x.max(floor),
            move |x, _| if x > floor { 1.0 } else { 0.0 },
        )
    }

    /// Huber-style smooth L1 with transition point `beta`.
    pub fn smooth_l1(&self, beta: f64) -> Tensor {
        self.unary(
            move |x| {
                if x.abs() < beta {
                    0.5 * x * x / beta
                } else {
                    x.abs() - 0.5 * beta
                }
            },
            move |x, _| {
                if x.abs() < beta {
                    x / beta
                } else {
                    x.signum()
                }
            },
        )
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        let total = self.data().iter().sum();
        Tensor::from_op(
            Vec::new(),
            vec![total],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        if self.numel() == 0 {
            return dim_err("mean of an empty tensor");
        }
        Ok(self.sum().mul_scalar(1.0 / self.numel() as f64))
    }

    /// Column sums of an `n×m` matrix, giving `[m]`.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (n, m) = matrix_dims("sum_rows", self)?;
        let mut out = vec![0.0; m];
        for row in self.data().chunks_exact(m.max(1)).take(n) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        Ok(Tensor::from_op(
            vec![m],
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.repeat(n))]),
        ))
    }

    pub fn mean_rows(&self) -> Result<Tensor> {
        let (n, _) = matrix_dims("mean_rows", self)?;
        if n == 0 {
            return dim_err("mean_rows over zero rows");
        }
        Ok(self.sum_rows()?.mul_scalar(1.0 / n as f64))
    }

    /// Broadcast add of a bias vector: along columns of an `n×m` matrix, or
    /// along channels of an `N×C×H×W` map.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (outer, channels, inner) = match self.shape() {
            [n, m] => (*n, *m, 1),
            [n, c, h, w] => (*n, *c, h * w),
            s => return dim_err(format!("add_bias: unsupported shape {s:?}")),
        };
        if bias.shape() != [channels] {
            return dim_err(format!(
                "add_bias: bias shape {:?} does not match {channels} channels",
                bias.shape()
            ));
        }
        let mut out = self.to_vec();
        for o in 0..outer {
            for (c, b) in bias.data().iter().enumerate() {
                let base = (o * channels + c) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += b);
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; channels];
                    for o in 0..outer {
                        for (c, acc) in gb.iter_mut().enumerate() {
                            let base = (o * channels + c) * inner;
                            *acc += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    gb
                });
                vec![Some(g.to_vec()), gb]
            }),
        ))
    }

    /// Multiplies each channel of an `N×C×H×W` map by a constant.
    pub fn scale_channels(&self, scale: &[f64]) -> Result<Tensor> {
        let [n, c, h, w] = *self.shape() else {
            return dim_err(format!("scale_channels: expected 4-d map, got {:?}", self.shape()));
        };
        if scale.len() != c {
            return dim_err(format!("scale_channels: {} scales for {c} channels", scale.len()));
        }
        let inner = h * w;
        let factors: Arc<Vec<f64>> = Arc::new(
            (0..n * c)
                .flat_map(|i| std::iter::repeat_n(scale[i % c], inner))
                .collect(),
        );
        let out = self.data().iter().zip(factors.iter()).map(|(x, s)| x * s).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().zip(factors.iter()).map(|(g, s)| g * s).collect())]),
        ))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = matrix_dims("matmul", self)?;
        let (k2, n) = matrix_dims("matmul", other)?;
        if k != k2 {
            return dim_err(format!(
                "matmul: inner dimensions {k} and {k2} differ ({:?} × {:?})",
                self.shape(),
                other.shape()
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, n, k, self.data(), false, other.data(), false, &mut out, 0.0);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, k, n, g, false, b.data(), true, &mut ga, 0.0);
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, n, m, a.data(), true, g, false, &mut gb, 0.0);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = matrix_dims("transpose", self)?;
        let flip = |src: &[f64], rows: usize, cols: usize| {
            let mut out = vec![0.0; src.len()];
            for i in 0..rows {
                for j in 0..cols {
                    out[j * rows + i] = src[i * cols + j];
                }
            }
            out
        };
        let out = flip(self.data(), r, c);
        Ok(Tensor::from_op(
            vec![c, r],
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(flip(g, c, r))]),
        ))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return dim_err(format!("reshape: {:?} into {:?}", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            shape,
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&self) -> Result<Tensor> {
        match self.shape().first() {
            Some(&n) if n > 0 => self.reshape(vec![n, self.numel() / n]),
            _ => dim_err(format!("flatten: bad leading axis in {:?}", self.shape())),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        let (rows, n) = last_axis("softmax", self)?;
        let mut out = self.to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - max).exp());
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
        let y = Arc::new(out.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; rows * n];
                for r in 0..rows {
                    let (gr, yr) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for j in 0..n {
                        gx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let (rows, n) = last_axis("log_softmax", self)?;
        let mut out = self.to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let y = Arc::new(out.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; rows * n];
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        gx[r * n + j] = gr[j] - y[r * n + j].exp() * total;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Row-wise gather from an `n×m` matrix: row `i` keeps the `k` columns
    /// `indices[i*k..(i+1)*k]`, giving `n×k`.
    pub fn gather_cols(&self, indices: &[usize], k: usize) -> Result<Tensor> {
        let (n, m) = matrix_dims("gather_cols", self)?;
        if indices.len() != n * k {
            return dim_err(format!("gather_cols: {} indices for {n} rows × {k}", indices.len()));
        }
        if let Some(bad) = indices.iter().find(|&&j| j >= m) {
            return dim_err(format!("gather_cols: column {bad} out of range for width {m}"));
        }
        let idx: Arc<Vec<usize>> = Arc::new(indices.to_vec());
        let out = (0..n * k).map(|p| self.data()[(p / k) * m + idx[p]]).collect();
        Ok(Tensor::from_op(
            vec![n, k],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; n * m];
                for (p, gv) in g.iter().enumerate() {
                    gx[(p / k) * m + idx[p]] += gv;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return dim_err("concat_cols: no inputs");
        };
        let (n, _) = matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = matrix_dims("concat_cols", p)?;
            if r != n {
                return dim_err(format!("concat_cols: row counts {n} and {r} differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
            }
        }
        Ok(Tensor::from_op(
            vec![n, total],
            out,
            parts.to_vec(),
            Box::new(move |g, needs| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (&w, &need) in widths.iter().zip(needs) {
                    grads.push(need.then(|| {
                        let mut gp = Vec::with_capacity(n * w);
                        for i in 0..n {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        gp
                    }));
                    offset += w;
                }
                grads
            }),
        ))
    }

    /// Concatenates along the leading axis; trailing axes must agree.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return dim_err("concat_rows: no inputs");
        };
        let trailing = first.shape().get(1..).unwrap_or(&[]).to_vec();
        if first.rank() == 0 {
            return dim_err("concat_rows: scalar input");
        }
        let mut lead = 0;
        for p in parts {
            if p.rank() == 0 || p.shape()[1..] != trailing[..] {
                return dim_err(format!(
                    "concat_rows: shape {:?} incompatible with {:?}",
                    p.shape(),
                    first.shape()
                ));
            }
            lead += p.shape()[0];
        }
        let sizes: Vec<usize> = parts.iter().map(Tensor::numel).collect();
        let mut out = Vec::with_capacity(sizes.iter().sum());
        parts.iter().for_each(|p| out.extend_from_slice(p.data()));
        let mut shape = vec![lead];
        shape.extend(trailing);
        Ok(Tensor::from_op(
            shape,
            out,
            parts.to_vec(),
            Box::new(move |g, needs| {
                let mut offset = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .map(|(&s, &need)| {
                        let gp = need.then(|| g[offset..offset + s].to_vec());
                        offset += s;
                        gp
                    })
                    .collect()
            }),
        ))
    }
}
