//! Differentiable operations.
//!
//! Each op validates shapes, computes the forward value, and registers a
//! closure that maps the output gradient onto the inputs. Closures
//! capture `Tensor` handles (cheap `Rc` clones); the graph stays a DAG
//! because outputs never capture themselves.

use super::Tensor;
use crate::error::{Error, Result};

const NEG_INF_MASK: f64 = -1e30;

/// Additive constant used to mask attention logits; large enough that
/// exp underflows to exactly 0.0 in f64 after max-subtraction.
pub fn neg_inf_mask() -> f64 {
    NEG_INF_MASK
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "add")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                a.accum_grad(g);
                b.accum_grad(g);
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "sub")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                a.accum_grad(g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                b.accum_grad(&neg);
            }),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape(self, other, "mul")?;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let bd = b.data();
                let ga: Vec<f64> = g.iter().zip(bd.iter()).map(|(g, b)| g * b).collect();
                drop(bd);
                a.accum_grad(&ga);
                let ad = a.data();
                let gb: Vec<f64> = g.iter().zip(ad.iter()).map(|(g, a)| g * a).collect();
                drop(ad);
                b.accum_grad(&gb);
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        let a = self.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                a.accum_grad(&ga);
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// Broadcast-add a `[cols]` bias to every row of a `[rows, cols]` matrix.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || bias.rank() != 1 || self.shape()[1] != bias.shape()[0] {
            return Err(Error::dimension(format!(
                "add_bias: shapes {:?} and {:?} incompatible",
                self.shape(),
                bias.shape()
            )));
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let bd = bias.to_vec();
        let data: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % cols])
            .collect();
        let (a, b) = (self.clone(), bias.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                a.accum_grad(g);
                let mut gb = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gb[c] += g[r * cols + c];
                    }
                }
                b.accum_grad(&gb);
            }),
        ))
    }

    /// 2D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape()[1] != other.shape()[0] {
            return Err(Error::dimension(format!(
                "matmul: shapes {:?} and {:?} incompatible",
                self.shape(),
                other.shape()
            )));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let ad = self.data();
        let bd = other.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = ad[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        drop(ad);
        drop(bd);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                // dA = g . B^T
                if a.needs_grad() {
                    let bd = b.data();
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i * k + p] += gv * bd[p * n + j];
                            }
                        }
                    }
                    drop(bd);
                    a.accum_grad(&ga);
                }
                // dB = A^T . g
                if b.needs_grad() {
                    let ad = a.data();
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    drop(ad);
                    b.accum_grad(&gb);
                }
            }),
        ))
    }

    pub fn transpose2(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::dimension(format!(
                "transpose2: expected rank 2, got shape {:?}",
                self.shape()
            )));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let d = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        drop(d);
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![c, r],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                a.accum_grad(&ga);
            }),
        ))
    }

    pub fn relu(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|v| v.max(0.0)).collect();
        let a = self.clone();
        let saved = data.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(saved.iter())
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                a.accum_grad(&ga);
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let a = self.clone();
        let saved = data.clone();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(saved.iter())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                a.accum_grad(&ga);
            }),
        )
    }

    /// Numerically-stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::dimension(format!(
                "softmax: axis {axis} invalid for shape {:?}",
                self.shape()
            )));
        }
        let shape = self.shape().to_vec();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let d = self.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..axis_len {
                    mx = mx.max(d[base + k * inner]);
                }
                let mut sum = 0.0;
                for k in 0..axis_len {
                    let e = (d[base + k * inner] - mx).exp();
                    out[base + k * inner] = e;
                    sum += e;
                }
                for k in 0..axis_len {
                    out[base + k * inner] /= sum;
                }
            }
        }
        drop(d);
        let a = self.clone();
        let saved = out.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * axis_len * inner + i;
                        let mut dot = 0.0;
                        for k in 0..axis_len {
                            let idx = base + k * inner;
                            dot += g[idx] * saved[idx];
                        }
                        for k in 0..axis_len {
                            let idx = base + k * inner;
                            ga[idx] = saved[idx] * (g[idx] - dot);
                        }
                    }
                }
                a.accum_grad(&ga);
            }),
        ))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().ok_or_else(|| {
            Error::dimension("layer_norm: rank-0 input".to_string())
        })?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::dimension(format!(
                "layer_norm: gain {:?} / bias {:?} must be [{d}]",
                gain.shape(),
                bias.shape()
            )));
        }
        let rows = self.len() / d;
        let x = self.data();
        let gd = gain.to_vec();
        let bd = bias.to_vec();
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for c in 0..d {
                let xh = (row[c] - mean) * istd;
                xhat[r * d + c] = xh;
                out[r * d + c] = gd[c] * xh + bd[c];
            }
        }
        drop(x);
        let (a, gt, bt) = (self.clone(), gain.clone(), bias.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g| {
                let gd = gt.data().clone();
                let mut ga = vec![0.0; g.len()];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for r in 0..rows {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for c in 0..d {
                        let idx = r * d + c;
                        let dxhat = g[idx] * gd[c];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat[idx];
                        ggain[c] += g[idx] * xhat[idx];
                        gbias[c] += g[idx];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for c in 0..d {
                        let idx = r * d + c;
                        let dxhat = g[idx] * gd[c];
                        ga[idx] =
                            inv_std[r] * (dxhat - mean_dxhat - xhat[idx] * mean_dxhat_xhat);
                    }
                }
                a.accum_grad(&ga);
                gt.accum_grad(&ggain);
                bt.accum_grad(&gbias);
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::dimension(format!(
                "reshape: {:?} ({} elems) to {:?} ({} elems)",
                self.shape(),
                self.len(),
                shape,
                n
            )));
        }
        let a = self.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |g| a.accum_grad(g)),
        ))
    }

    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        let n = self.len();
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g| {
                let ga = vec![g[0]; n];
                a.accum_grad(&ga);
            }),
        ))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.len() as f64;
        Ok(self.sum()?.scale(1.0 / n))
    }

    /// Mean over the rows of a `[rows, cols]` matrix where `keep[r]` is true.
    pub fn mean_rows_masked(&self, keep: &[bool]) -> Result<Tensor> {
        if self.rank() != 2 || keep.len() != self.shape()[0] {
            return Err(Error::dimension(format!(
                "mean_rows_masked: shape {:?} with {} mask entries",
                self.shape(),
                keep.len()
            )));
        }
        let count = keep.iter().filter(|k| **k).count();
        if count == 0 {
            return Err(Error::contract(
                "mean_rows_masked: no rows selected".to_string(),
            ));
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let d = self.data();
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            if keep[r] {
                for c in 0..cols {
                    out[c] += d[r * cols + c];
                }
            }
        }
        for v in out.iter_mut() {
            *v /= count as f64;
        }
        drop(d);
        let a = self.clone();
        let keep = keep.to_vec();
        Ok(Tensor::from_op(
            vec![cols],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0; rows * cols];
                for r in 0..rows {
                    if keep[r] {
                        for c in 0..cols {
                            ga[r * cols + c] = g[c] / count as f64;
                        }
                    }
                }
                a.accum_grad(&ga);
            }),
        ))
    }

    /// Rows `start..end` of a 2D matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.rank() != 2 || start >= end || end > self.shape()[0] {
            return Err(Error::dimension(format!(
                "slice_rows: {start}..{end} of shape {:?}",
                self.shape()
            )));
        }
        let cols = self.shape()[1];
        let rows = self.shape()[0];
        let data = self.data()[start * cols..end * cols].to_vec();
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![end - start, cols],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0; rows * cols];
                ga[start * cols..end * cols].copy_from_slice(g);
                a.accum_grad(&ga);
            }),
        ))
    }

    /// Columns `start..end` of a 2D matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.rank() != 2 || start >= end || end > self.shape()[1] {
            return Err(Error::dimension(format!(
                "slice_cols: {start}..{end} of shape {:?}",
                self.shape()
            )));
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let w = end - start;
        let d = self.data();
        let mut out = vec![0.0; rows * w];
        for r in 0..rows {
            out[r * w..(r + 1) * w].copy_from_slice(&d[r * cols + start..r * cols + end]);
        }
        drop(d);
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![rows, w],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0; rows * cols];
                for r in 0..rows {
                    ga[r * cols + start..r * cols + end]
                        .copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                a.accum_grad(&ga);
            }),
        ))
    }

    /// Stack 2D matrices with equal column counts along the row axis.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows: empty input".to_string()));
        }
        let cols = parts[0].shape().get(1).copied().ok_or_else(|| {
            Error::dimension("concat_rows: expected rank-2 parts".to_string())
        })?;
        let mut rows = 0;
        for p in parts {
            if p.rank() != 2 || p.shape()[1] != cols {
                return Err(Error::dimension(format!(
                    "concat_rows: part {:?} incompatible with {cols} columns",
                    p.shape()
                )));
            }
            rows += p.shape()[0];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data());
        }
        let handles: Vec<Tensor> = parts.to_vec();
        let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        Ok(Tensor::from_op(
            vec![rows, cols],
            data,
            parts.to_vec(),
            Box::new(move |g| {
                let mut off = 0;
                for (h, sz) in handles.iter().zip(sizes.iter()) {
                    h.accum_grad(&g[off..off + sz]);
                    off += sz;
                }
            }),
        ))
    }

    /// Stack 2D matrices with equal row counts along the column axis.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: empty input".to_string()));
        }
        let rows = parts[0].shape().first().copied().unwrap_or(0);
        let mut cols = 0;
        for p in parts {
            if p.rank() != 2 || p.shape()[0] != rows {
                return Err(Error::dimension(format!(
                    "concat_cols: part {:?} incompatible with {rows} rows",
                    p.shape()
                )));
            }
            cols += p.shape()[1];
        }
        let mut data = vec![0.0; rows * cols];
        let mut off = 0;
        for p in parts {
            let w = p.shape()[1];
            let pd = p.data();
            for r in 0..rows {
                data[r * cols + off..r * cols + off + w]
                    .copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let handles: Vec<Tensor> = parts.to_vec();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        Ok(Tensor::from_op(
            vec![rows, cols],
            data,
            parts.to_vec(),
            Box::new(move |g| {
                let mut off = 0;
                for (h, w) in handles.iter().zip(widths.iter()) {
                    let mut gp = vec![0.0; rows * w];
                    for r in 0..rows {
                        gp[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * cols + off..r * cols + off + w]);
                    }
                    h.accum_grad(&gp);
                    off += w;
                }
            }),
        ))
    }

    /// Row lookup into an embedding table `[V, D]`; gradients scatter-add
    /// back into the table.
    pub fn embedding(&self, ids: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::dimension(format!(
                "embedding: table must be rank 2, got {:?}",
                self.shape()
            )));
        }
        let (v, d) = (self.shape()[0], self.shape()[1]);
        for &id in ids {
            if id >= v {
                return Err(Error::index(format!(
                    "embedding: id {id} out of range for table of {v}"
                )));
            }
        }
        let td = self.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        drop(td);
        let table = self.clone();
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            vec![ids.len(), d],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gt = vec![0.0; v * d];
                for (row, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[id * d + c] += g[row * d + c];
                    }
                }
                table.accum_grad(&gt);
            }),
        ))
    }

    /// Summed token-level cross entropy of `[n, V]` logits against target
    /// ids; rows where `mask` is false are excluded.
    pub fn cross_entropy(&self, targets: &[usize], mask: Option<&[bool]>) -> Result<Tensor> {
        if self.rank() != 2 || self.shape()[0] != targets.len() {
            return Err(Error::dimension(format!(
                "cross_entropy: logits {:?} vs {} targets",
                self.shape(),
                targets.len()
            )));
        }
        if let Some(m) = mask {
            if m.len() != targets.len() {
                return Err(Error::dimension(format!(
                    "cross_entropy: {} mask entries for {} targets",
                    m.len(),
                    targets.len()
                )));
            }
        }
        let (n, v) = (self.shape()[0], self.shape()[1]);
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::index(format!(
                    "cross_entropy: target id {t} at row {r} out of vocabulary of {v}"
                )));
            }
        }
        let active: Vec<bool> = match mask {
            Some(m) => m.to_vec(),
            None => vec![true; n],
        };
        let d = self.data();
        let mut loss = 0.0;
        let mut probs = vec![0.0; n * v];
        for r in 0..n {
            if !active[r] {
                continue;
            }
            let row = &d[r * v..(r + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..v {
                let e = (row[c] - mx).exp();
                probs[r * v + c] = e;
                sum += e;
            }
            for c in 0..v {
                probs[r * v + c] /= sum;
            }
            loss += sum.ln() + mx - row[targets[r]];
        }
        drop(d);
        let a = self.clone();
        let targets = targets.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0; n * v];
                for r in 0..n {
                    if !active[r] {
                        continue;
                    }
                    for c in 0..v {
                        ga[r * v + c] = g[0] * probs[r * v + c];
                    }
                    ga[r * v + targets[r]] -= g[0];
                }
                a.accum_grad(&ga);
            }),
        ))
    }

    /// 2D cross-correlation over `[N, C, H, W]` input with `[O, C, kh, kw]`
    /// kernels (no kernel flip).
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        if self.rank() != 4 || weight.rank() != 4 {
            return Err(Error::dimension(format!(
                "conv2d: input {:?} / weight {:?} must be rank 4",
                self.shape(),
                weight.shape()
            )));
        }
        let (n, c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let (o, wc, kh, kw) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        if wc != c {
            return Err(Error::dimension(format!(
                "conv2d: input channels {c} != kernel channels {wc}"
            )));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d: stride must be >= 1".to_string()));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dimension(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(Error::dimension(format!(
                    "conv2d: bias {:?} must be [{o}]",
                    b.shape()
                )));
            }
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let xd = self.data();
        let wd = weight.data();
        let bd: Option<Vec<f64>> = bias.map(|b| b.to_vec());
        let mut out = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            for oc in 0..o {
                let base_out = (b * o + oc) * oh * ow;
                let bias_v = bd.as_ref().map(|v| v[oc]).unwrap_or(0.0);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias_v;
                        for ic in 0..c {
                            let base_in = (b * c + ic) * h * w;
                            let base_w = ((oc * c + ic) * kh) * kw;
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += xd[base_in + iy as usize * w + ix as usize]
                                        * wd[base_w + ky * kw + kx];
                                }
                            }
                        }
                        out[base_out + oy * ow + ox] = acc;
                    }
                }
            }
        }
        drop(xd);
        drop(wd);
        let x = self.clone();
        let wt = weight.clone();
        let bt = bias.cloned();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            vec![n, o, oh, ow],
            out,
            parents,
            Box::new(move |g| {
                let xd = x.data();
                let wd = wt.data();
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                let mut gb = vec![0.0; o];
                for b in 0..n {
                    for oc in 0..o {
                        let base_out = (b * o + oc) * oh * ow;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[base_out + oy * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                gb[oc] += gv;
                                for ic in 0..c {
                                    let base_in = (b * c + ic) * h * w;
                                    let base_w = ((oc * c + ic) * kh) * kw;
                                    for ky in 0..kh {
                                        let iy =
                                            (oy * stride + ky) as isize - padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize
                                                - padding as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            let xi = base_in + iy as usize * w + ix as usize;
                                            let wi = base_w + ky * kw + kx;
                                            gx[xi] += wd[wi] * gv;
                                            gw[wi] += xd[xi] * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                drop(xd);
                drop(wd);
                x.accum_grad(&gx);
                wt.accum_grad(&gw);
                if let Some(b) = &bt {
                    b.accum_grad(&gb);
                }
            }),
        ))
    }

    /// Average pooling by an integer factor over `[N, C, H, W]`.
    pub fn avg_pool2d(&self, factor: usize) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(Error::dimension(format!(
                "avg_pool2d: expected rank 4, got {:?}",
                self.shape()
            )));
        }
        if factor == 0 {
            return Err(Error::contract("avg_pool2d: factor must be >= 1".to_string()));
        }
        let (n, c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::dimension(format!(
                "avg_pool2d: factor {factor} does not divide {h}x{w}"
            )));
        }
        let (oh, ow) = (h / factor, w / factor);
        let d = self.data();
        let inv = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += d[nc * h * w + (oy * factor + dy) * w + ox * factor + dx];
                        }
                    }
                    out[nc * oh * ow + oy * ow + ox] = acc * inv;
                }
            }
        }
        drop(d);
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[nc * oh * ow + oy * ow + ox] * inv;
                            for dy in 0..factor {
                                for dx in 0..factor {
                                    ga[nc * h * w
                                        + (oy * factor + dy) * w
                                        + ox * factor
                                        + dx] = gv;
                                }
                            }
                        }
                    }
                }
                a.accum_grad(&ga);
            }),
        ))
    }

    /// Replicate each cell into a `factor x factor` block; the exact
    /// right-inverse of `avg_pool2d`.
    pub fn avg_unpool2d(&self, factor: usize) -> Result<Tensor> {
        if self.rank() != 4 {
            return Err(Error::dimension(format!(
                "avg_unpool2d: expected rank 4, got {:?}",
                self.shape()
            )));
        }
        if factor == 0 {
            return Err(Error::contract(
                "avg_unpool2d: factor must be >= 1".to_string(),
            ));
        }
        let (n, c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let (oh, ow) = (h * factor, w * factor);
        let d = self.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[nc * oh * ow + oy * ow + ox] =
                        d[nc * h * w + (oy / factor) * w + ox / factor];
                }
            }
        }
        drop(d);
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            ga[nc * h * w + (oy / factor) * w + ox / factor] +=
                                g[nc * oh * ow + oy * ow + ox];
                        }
                    }
                }
                a.accum_grad(&ga);
            }),
        ))
    }

    /// Nearest-neighbor upsampling; identical to replication unpooling.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        self.avg_unpool2d(factor)
    }
}

/// Similarity / divergence measures used by the distillation losses.
/// Each is a fused scalar reduction with a hand-written backward pass.
impl Tensor {
    /// Euclidean norm of the elementwise difference.
    pub fn l2_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b, "l2_distance")?;
        let diff: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| x - y)
            .collect();
        let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (at, bt) = (a.clone(), b.clone());
        Ok(Tensor::from_op(
            vec![1],
            vec![norm],
            vec![a.clone(), b.clone()],
            Box::new(move |g| {
                if norm < 1e-12 {
                    return; // subgradient 0 at the kink
                }
                let ga: Vec<f64> = diff.iter().map(|d| g[0] * d / norm).collect();
                at.accum_grad(&ga);
                let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
                bt.accum_grad(&gb);
            }),
        ))
    }

    /// Sum of absolute differences.
    pub fn l1_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b, "l1_distance")?;
        let diff: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| x - y)
            .collect();
        let total: f64 = diff.iter().map(|v| v.abs()).sum();
        let (at, bt) = (a.clone(), b.clone());
        Ok(Tensor::from_op(
            vec![1],
            vec![total],
            vec![a.clone(), b.clone()],
            Box::new(move |g| {
                let ga: Vec<f64> = diff.iter().map(|d| g[0] * d.signum_or_zero()).collect();
                at.accum_grad(&ga);
                let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
                bt.accum_grad(&gb);
            }),
        ))
    }

    /// Maximum absolute difference.
    pub fn linf_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b, "linf_distance")?;
        let diff: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| x - y)
            .collect();
        let mut best = 0.0f64;
        let mut best_idx = 0usize;
        for (i, d) in diff.iter().enumerate() {
            if d.abs() > best {
                best = d.abs();
                best_idx = i;
            }
        }
        let sign = diff[best_idx].signum_or_zero();
        let n = diff.len();
        let (at, bt) = (a.clone(), b.clone());
        Ok(Tensor::from_op(
            vec![1],
            vec![best],
            vec![a.clone(), b.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0; n];
                ga[best_idx] = g[0] * sign;
                at.accum_grad(&ga);
                let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
                bt.accum_grad(&gb);
            }),
        ))
    }

    /// Cosine distance `1 - cos(a, b)`; 0 when either norm vanishes.
    pub fn cosine_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b, "cosine_distance")?;
        let ad = a.to_vec();
        let bd = b.to_vec();
        let na = ad.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = bd.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na < 1e-12 || nb < 1e-12 {
            return Ok(Tensor::scalar(0.0));
        }
        let dot: f64 = ad.iter().zip(bd.iter()).map(|(x, y)| x * y).sum();
        let cos = dot / (na * nb);
        let (at, bt) = (a.clone(), b.clone());
        Ok(Tensor::from_op(
            vec![1],
            vec![1.0 - cos],
            vec![a.clone(), b.clone()],
            Box::new(move |g| {
                // d(1-cos)/da_i = cos*a_i/na^2 - b_i/(na*nb)
                let ga: Vec<f64> = ad
                    .iter()
                    .zip(bd.iter())
                    .map(|(x, y)| g[0] * (cos * x / (na * na) - y / (na * nb)))
                    .collect();
                at.accum_grad(&ga);
                let gb: Vec<f64> = bd
                    .iter()
                    .zip(ad.iter())
                    .map(|(y, x)| g[0] * (cos * y / (nb * nb) - x / (na * nb)))
                    .collect();
                bt.accum_grad(&gb);
            }),
        ))
    }

    /// KL(p || q) between softmax-normalized flattened inputs with a
    /// 1e-12 floor inside the logs.
    pub fn kl_divergence(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape(a, b, "kl_divergence")?;
        let soft = |v: &[f64]| -> Vec<f64> {
            let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = v.iter().map(|x| (x - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect()
        };
        let p = soft(&a.data());
        let q = soft(&b.data());
        let kl: f64 = p
            .iter()
            .zip(q.iter())
            .map(|(p, q)| p * (p.max(1e-12).ln() - q.max(1e-12).ln()))
            .sum();
        let (at, bt) = (a.clone(), b.clone());
        Ok(Tensor::from_op(
            vec![1],
            vec![kl],
            vec![a.clone(), b.clone()],
            Box::new(move |g| {
                let ga: Vec<f64> = p
                    .iter()
                    .zip(q.iter())
                    .map(|(pi, qi)| {
                        g[0] * pi * ((pi.max(1e-12).ln() - qi.max(1e-12).ln()) - kl)
                    })
                    .collect();
                at.accum_grad(&ga);
                let gb: Vec<f64> = p
                    .iter()
                    .zip(q.iter())
                    .map(|(pi, qi)| g[0] * (qi - pi))
                    .collect();
                bt.accum_grad(&gb);
            }),
        ))
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}
