//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! autodiff graph and the no-grad inference paths.
//!
//! Broadcasting is limited to scalar-tensor pairs. Zero-sized dimensions are
//! allowed so that empty datasets and batches remain representable.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::dim(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                expected,
                values.len()
            )));
        }
        Ok(Self {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![value; n],
            grad: None,
            requires_grad: false,
        }
    }

    /// A rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            values: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::dim(format!(
                "gradient of length {} for tensor of shape {:?}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// The value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.values.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Number of rows when viewed as `[shape[0], rest]`.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Row `i` of the `[shape[0], rest]` view.
    pub fn row(&self, i: usize) -> &[f64] {
        let width = self.row_width();
        &self.values[i * width..(i + 1) * width]
    }

    pub fn row_width(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Gathers rows `indices` into a new tensor of shape `[indices.len(), ...]`.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let width = self.row_width();
        let mut values = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(indices.len());
        } else {
            shape[0] = indices.len();
        }
        Tensor {
            shape,
            values,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference to `other`.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `a[m×k] · b[k×n]`, accumulated in `i-p-j` order. Zero entries of `a` are
/// skipped, so a `0 · inf` product contributes nothing.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    for (a_row, out_row) in a.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(n)).take(m) {
        if k == 0 {
            break;
        }
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Row-wise softmax of an `[n×k]` block with per-row max subtraction.
pub(crate) fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    if k == 0 {
        return out;
    }
    for (row, dst) in logits.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &z) in dst.iter_mut().zip(row) {
            *d = (z - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// `log Σ exp(row)` computed stably.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Zero-padded 3×3 cross-correlation with stride 1:
/// `x[N,C,H,W] ⋆ k[F,C,3,3] → [N,F,H,W]`.
pub(crate) fn conv2d_forward(
    x: &[f64],
    k: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    f: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * f * h * w];
    let plane = h * w;
    for b in 0..n {
        for fo in 0..f {
            let out_plane = &mut out[(b * f + fo) * plane..(b * f + fo + 1) * plane];
            for ci in 0..c {
                let in_plane = &x[(b * c + ci) * plane..(b * c + ci + 1) * plane];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let kv = k[((fo * c + ci) * 3 + dy) * 3 + dx];
                        if kv == 0.0 {
                            continue;
                        }
                        for_each_tap(h, w, dy, dx, |oy, sy, ox0, sx0, len| {
                            let dst = &mut out_plane[oy * w + ox0..oy * w + ox0 + len];
                            let src = &in_plane[sy * w + sx0..sy * w + sx0 + len];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += kv * s;
                            }
                        });
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input and kernel.
pub(crate) fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    grad_out: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    f: usize,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane = h * w;
    let mut dx_all = need_input.then(|| vec![0.0; x.len()]);
    let mut dk_all = need_kernel.then(|| vec![0.0; k.len()]);
    for b in 0..n {
        for fo in 0..f {
            let g_plane = &grad_out[(b * f + fo) * plane..(b * f + fo + 1) * plane];
            for ci in 0..c {
                let base = (b * c + ci) * plane;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let kidx = ((fo * c + ci) * 3 + dy) * 3 + dx;
                        let kv = k[kidx];
                        let mut kacc = 0.0;
                        for_each_tap(h, w, dy, dx, |oy, sy, ox0, sx0, len| {
                            let g = &g_plane[oy * w + ox0..oy * w + ox0 + len];
                            let s0 = base + sy * w + sx0;
                            if let Some(dxv) = dx_all.as_mut() {
                                for (d, &gv) in dxv[s0..s0 + len].iter_mut().zip(g) {
                                    *d += kv * gv;
                                }
                            }
                            if need_kernel {
                                for (&s, &gv) in x[s0..s0 + len].iter().zip(g) {
                                    kacc += s * gv;
                                }
                            }
                        });
                        if let Some(dk) = dk_all.as_mut() {
                            dk[kidx] += kacc;
                        }
                    }
                }
            }
        }
    }
    (dx_all, dk_all)
}

/// Visits the valid output rows for kernel tap `(dy, dx)` with padding 1,
/// passing `(out_row, src_row, out_col0, src_col0, run_length)`.
#[inline]
fn for_each_tap(
    h: usize,
    w: usize,
    dy: usize,
    dx: usize,
    mut visit: impl FnMut(usize, usize, usize, usize, usize),
) {
    // source coordinate = output coordinate + tap - 1
    let oy_lo = if dy == 0 { 1 } else { 0 };
    let oy_hi = if dy == 2 { h.saturating_sub(1) } else { h };
    let ox_lo = if dx == 0 { 1 } else { 0 };
    let ox_hi = if dx == 2 { w.saturating_sub(1) } else { w };
    if ox_hi <= ox_lo {
        return;
    }
    let len = ox_hi - ox_lo;
    for oy in oy_lo..oy_hi {
        let sy = oy + dy - 1;
        let sx0 = ox_lo + dx - 1;
        visit(oy, sy, ox_lo, sx0, len);
    }
}

/// `sign(x)` with `sign(0) = 0`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert_eq!(Tensor::scalar(4.0).item().unwrap(), 4.0);
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn select_rows_gathers() {
        let t = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let s = t.select_rows(&[2, 0]);
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.values(), &[5., 6., 1., 2.]);
    }
}
