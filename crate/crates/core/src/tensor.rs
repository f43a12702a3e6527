//! Dense row-major f64 tensors.
//!
//! The single numeric carrier for images, parameters, activations, and
//! gradients. Elementwise ops require equal shapes or a scalar operand;
//! general broadcasting is intentionally absent. Reductions use pairwise
//! summation, which keeps them deterministic and makes the mean of a
//! power-of-two block of identical values exact.

use crate::error::{HgError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn product(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    // Balanced base cases keep the tree exact for power-of-two blocks of
    // identical values (every partial sum is a scaling by two).
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        3 => (xs[0] + xs[1]) + xs[2],
        4 => (xs[0] + xs[1]) + (xs[2] + xs[3]),
        _ => {
            let mid = xs.len() / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if product(&shape) != data.len() {
            return Err(HgError::validation(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = product(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, v: f64) -> Self {
        let n = product(&shape);
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(HgError::numeric(format!("non-finite values in {context}")))
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if product(&shape) != self.data.len() {
            return Err(HgError::validation(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect::<Vec<_>>(),
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Elementwise combine with equal shapes or a scalar on either side.
    pub fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        if other.is_scalar() {
            let b = other.data[0];
            return Ok(self.map(|a| f(a, b)));
        }
        if self.is_scalar() {
            let a = self.data[0];
            return Ok(other.map(|b| f(a, b)));
        }
        Err(HgError::ShapeMismatch {
            op,
            lhs: self.shape.clone(),
            rhs: other.shape.clone(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(HgError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols("matmul")?;
        let (k2, n) = other.rows_cols("matmul")?;
        if k != k2 {
            return Err(HgError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = Tensor::zeros(vec![m, n]);
        gemm(
            m,
            k,
            n,
            &self.data,
            k as isize,
            1,
            &other.data,
            n as isize,
            1,
            &mut out.data,
        );
        Ok(out)
    }

    /// self * other^T without materializing the transpose.
    pub(crate) fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols("matmul_nt")?;
        let (n, k2) = other.rows_cols("matmul_nt")?;
        if k != k2 {
            return Err(HgError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = Tensor::zeros(vec![m, n]);
        gemm(
            m,
            k,
            n,
            &self.data,
            k as isize,
            1,
            &other.data,
            1,
            k as isize,
            &mut out.data,
        );
        Ok(out)
    }

    /// self^T * other without materializing the transpose.
    pub(crate) fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.rows_cols("matmul_tn")?;
        let (k2, n) = other.rows_cols("matmul_tn")?;
        if k != k2 {
            return Err(HgError::ShapeMismatch {
                op: "matmul_tn",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = Tensor::zeros(vec![m, n]);
        gemm(
            m,
            k,
            n,
            &self.data,
            1,
            m as isize,
            &other.data,
            n as isize,
            1,
            &mut out.data,
        );
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        pairwise_sum(&self.data)
    }

    pub fn mean(&self) -> f64 {
        pairwise_sum(&self.data) / self.data.len() as f64
    }

    /// Per-row mean of a [rows, cols] tensor, returned as [rows, 1].
    pub fn row_mean(&self) -> Result<Tensor> {
        let (r, c) = self.rows_cols("row_mean")?;
        let data = (0..r)
            .map(|i| pairwise_sum(&self.data[i * c..(i + 1) * c]) / c as f64)
            .collect();
        Ok(Tensor {
            shape: vec![r, 1],
            data,
        })
    }

    /// Mean over everything but the channel axis.
    ///
    /// [rows, channels*block] -> [rows, channels] (rows are batch items whose
    /// columns are channel-major flattened images), and [channels, h, w] ->
    /// [channels] for a single image.
    pub fn channel_mean(&self, channels: usize) -> Result<Tensor> {
        match self.shape.as_slice() {
            [r, cols] => {
                if channels == 0 || cols % channels != 0 {
                    return Err(HgError::validation(format!(
                        "channel_mean: {cols} columns not divisible by {channels} channels"
                    )));
                }
                let block = cols / channels;
                let mut data = Vec::with_capacity(r * channels);
                for i in 0..*r {
                    let row = &self.data[i * cols..(i + 1) * cols];
                    for ch in 0..channels {
                        data.push(pairwise_sum(&row[ch * block..(ch + 1) * block]) / block as f64);
                    }
                }
                Ok(Tensor {
                    shape: vec![*r, channels],
                    data,
                })
            }
            [c, h, w] => {
                if *c != channels {
                    return Err(HgError::validation(format!(
                        "channel_mean: image has {c} channels, asked for {channels}"
                    )));
                }
                let block = h * w;
                let data = (0..*c)
                    .map(|ch| pairwise_sum(&self.data[ch * block..(ch + 1) * block]) / block as f64)
                    .collect();
                Ok(Tensor {
                    shape: vec![*c],
                    data,
                })
            }
            _ => Err(HgError::validation(format!(
                "channel_mean: unsupported shape {:?}",
                self.shape
            ))),
        }
    }

    /// Column-wise concatenation of [rows, *] tensors.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(HgError::validation("concat_cols: no inputs"));
        }
        let (rows, _) = parts[0].rows_cols("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.rows_cols("concat_cols")?;
            if r != rows {
                return Err(HgError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Ok(Tensor {
            shape: vec![rows, total],
            data,
        })
    }

    /// Copy one row of a [rows, cols] tensor as [1, cols].
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let (r, c) = self.rows_cols("row")?;
        if i >= r {
            return Err(HgError::validation(format!("row {i} out of {r}")));
        }
        Ok(Tensor {
            shape: vec![1, c],
            data: self.data[i * c..(i + 1) * c].to_vec(),
        })
    }

    /// Stack equal-length 1-D or [1, n] tensors as rows of a matrix.
    pub fn stack_rows(rows: &[&Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(HgError::validation("stack_rows: no inputs"));
        }
        let n = rows[0].numel();
        let mut data = Vec::with_capacity(rows.len() * n);
        for r in rows {
            if r.numel() != n {
                return Err(HgError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![n],
                    rhs: r.shape.clone(),
                });
            }
            data.extend_from_slice(&r.data);
        }
        Ok(Tensor {
            shape: vec![rows.len(), n],
            data,
        })
    }

    /// Euclidean distance.
    pub fn l2_distance(&self, other: &Tensor) -> Result<f64> {
        let d = self.sub(other)?;
        Ok(pairwise_sum(&d.data.iter().map(|v| v * v).collect::<Vec<_>>()).sqrt())
    }

    /// Per-element root-mean-square distance.
    pub fn rms_distance(&self, other: &Tensor) -> Result<f64> {
        Ok(self.l2_distance(other)? / (self.numel() as f64).sqrt())
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    // SAFETY: shapes were validated by the callers; strides describe either
    // row-major layout or its transpose over buffers of m*k / k*n / m*n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let id = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = a.matmul(&id).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_matmuls_agree_with_explicit_transpose() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 1.5, 0.0, -2.0]).unwrap();
        // a * b^T
        let nt = a.matmul_nt(&b).unwrap();
        assert_eq!(nt.shape(), &[2, 2]);
        assert!((nt.data()[0] - (0.5 - 2.0 + 6.0)).abs() < 1e-12);
        // a^T * a
        let tn = a.matmul_tn(&a).unwrap();
        assert_eq!(tn.shape(), &[3, 3]);
        assert!((tn.data()[0] - (1.0 + 16.0)).abs() < 1e-12);
    }

    #[test]
    fn scalar_broadcast_rules() {
        let a = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = Tensor::scalar(2.0);
        assert_eq!(a.mul(&s).unwrap().data(), &[2.0, 4.0, 6.0]);
        assert_eq!(s.sub(&a).unwrap().data(), &[1.0, 0.0, -1.0]);
        let b = Tensor::zeros(vec![4]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn channel_mean_of_constant_channels_is_exact() {
        // 2 channels x 8 pixels; pairwise sums over power-of-two blocks of a
        // constant are exact for any representable constant.
        let c0 = 0.3;
        let c1 = -0.7;
        let mut data = vec![c0; 8];
        data.extend(vec![c1; 8]);
        let img = Tensor::new(vec![2, 2, 4], data.clone()).unwrap();
        assert_eq!(img.channel_mean(2).unwrap().data(), &[c0, c1]);
        let batch = Tensor::new(vec![1, 16], data).unwrap();
        assert_eq!(batch.channel_mean(2).unwrap().data(), &[c0, c1]);
    }

    #[test]
    fn concat_and_row_roundtrip() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![9.0, 8.0]).unwrap();
        let cat = Tensor::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 3]);
        assert_eq!(cat.row(1).unwrap().data(), &[3.0, 4.0, 8.0]);
    }
}
