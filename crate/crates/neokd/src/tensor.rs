//! Dense `f32` tensors and the numeric kernels shared by the tape and the
//! plain (gradient-free) inference path.
//!
//! Keeping one set of kernels guarantees that a frozen network produces
//! bitwise-identical logits whether it is evaluated through the tape or
//! through [`crate::net::MultiExitNetwork::forward_all_exits`].

use crate::error::{Error, Result};

/// Dense n-dimensional array, row-major, 32-bit values.
///
/// A tensor optionally participates in gradient accumulation: when
/// `requires_grad` is set, a same-shape `grad` buffer is kept and training
/// code adds tape gradients into it.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::dim(format!("zero extent in shape {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::dim(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        debug_check_finite(&data, "Tensor::new");
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::new(vec![1], vec![v]).expect("scalar")
    }

    /// Mark this tensor as a gradient sink and allocate its accumulator.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(0.0);
        }
    }

    /// Add `g` into the accumulator. Contract error if the tensor does not
    /// require gradients or the buffer length differs.
    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<()> {
        let grad = self
            .grad
            .as_mut()
            .ok_or_else(|| Error::contract("accumulate_grad on tensor without requires_grad"))?;
        if grad.len() != g.len() {
            return Err(Error::contract(format!(
                "gradient length {} does not match tensor numel {}",
                g.len(),
                grad.len()
            )));
        }
        for (dst, src) in grad.iter_mut().zip(g) {
            *dst += src;
        }
        Ok(())
    }

    /// A plain copy that does not participate in any gradient bookkeeping.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Rows of a rank-2 tensor (leading extent otherwise).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// View row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn bits(&self) -> Vec<u32> {
        self.data.iter().map(|v| v.to_bits()).collect()
    }
}

/// Debug-mode guard: every op output must be finite. Disabled in release.
#[inline]
pub(crate) fn debug_check_finite(data: &[f32], what: &str) {
    debug_assert!(
        data.iter().all(|v| v.is_finite()),
        "non-finite value produced by {what}"
    );
}

// ──────────────────────────────────────────────────────────────────────
// Kernels. Reductions accumulate in f64 and round once, so results do not
// depend on how the loops get vectorized.
// ──────────────────────────────────────────────────────────────────────
pub(crate) mod kernels {
    /// `C = A·B` with A `[m×k]`, B `[k×n]`.
    pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0f32; m * n];
        let mut acc = vec![0f64; n];
        for i in 0..m {
            acc.fill(0.0);
            let arow = &a[i * k..(i + 1) * k];
            for (kk, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let aik = aik as f64;
                let brow = &b[kk * n..(kk + 1) * n];
                for (dst, &bv) in acc.iter_mut().zip(brow) {
                    *dst += aik * bv as f64;
                }
            }
            for (dst, &v) in out[i * n..(i + 1) * n].iter_mut().zip(acc.iter()) {
                *dst = v as f32;
            }
        }
        out
    }

    /// `C = A·Bᵀ` with A `[m×n]`, B `[k×n]`, C `[m×k]`.
    pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
        let mut out = vec![0f32; m * k];
        for i in 0..m {
            let arow = &a[i * n..(i + 1) * n];
            for kk in 0..k {
                let brow = &b[kk * n..(kk + 1) * n];
                let mut acc = 0f64;
                for (&av, &bv) in arow.iter().zip(brow) {
                    acc += av as f64 * bv as f64;
                }
                out[i * k + kk] = acc as f32;
            }
        }
        out
    }

    /// `C = Aᵀ·B` with A `[m×k]`, B `[m×n]`, C `[k×n]`.
    pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut acc = vec![0f64; k * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let brow = &b[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let av = av as f64;
                let dst = &mut acc[kk * n..(kk + 1) * n];
                for (d, &bv) in dst.iter_mut().zip(brow) {
                    *d += av * bv as f64;
                }
            }
        }
        acc.iter().map(|&v| v as f32).collect()
    }

    pub fn relu(x: &[f32]) -> Vec<f32> {
        x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
    }

    /// Row-stable softmax over the last axis of a `[rows×cols]` buffer.
    pub fn softmax_rows(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
        let mut out = vec![0f32; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0f64;
            let dst = &mut out[r * cols..(r + 1) * cols];
            for (d, &v) in dst.iter_mut().zip(row) {
                let e = ((v - max) as f64).exp();
                *d = e as f32;
                sum += e;
            }
            let inv = 1.0 / sum;
            for d in dst.iter_mut() {
                *d = (*d as f64 * inv) as f32;
            }
        }
        out
    }

    /// Per-row `log Σ exp` with max subtraction.
    pub fn log_sum_exp_rows(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
        let mut out = vec![0f32; rows];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0f64;
            for &v in row {
                sum += ((v - max) as f64).exp();
            }
            out[r] = (max as f64 + sum.ln()) as f32;
        }
        out
    }

    pub fn sum_f64(x: &[f32]) -> f64 {
        x.iter().map(|&v| v as f64).sum()
    }

    /// First index of the row maximum; ties go to the smallest index.
    pub fn argmax(row: &[f32]) -> usize {
        let mut best = 0;
        let mut best_v = row[0];
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v > best_v {
                best = i;
                best_v = v;
            }
        }
        best
    }
}
