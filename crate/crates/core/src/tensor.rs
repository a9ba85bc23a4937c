//! Dense row-major `f32` tensors and the matrix kernels shared by the graph.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
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

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of every axis but the last.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }
}

/// `out (+)= op(a) · op(b)` where `a` is stored `ar × ac` and `b` is stored
/// `br × bc`, both row-major; `ta`/`tb` select the transposed view.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    a: &[f32],
    (ar, ac): (usize, usize),
    ta: bool,
    b: &[f32],
    (br, bc): (usize, usize),
    tb: bool,
    out: &mut [f32],
    accumulate: bool,
) {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "gemm inner dimensions differ");
    assert_eq!(out.len(), m * n, "gemm output has wrong size");
    assert_eq!(a.len(), ar * ac);
    assert_eq!(b.len(), br * bc);
    let beta = if accumulate { 1.0 } else { 0.0 };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.fill(0.0);
        }
        return;
    }
    if m == 1 {
        // A single row is contiguous either way; packing would dominate.
        row_times(a, b, n, tb, out, accumulate);
        return;
    }
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `out` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
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
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out (+)= a · op(b)` for one row `a` of length `k`.
fn row_times(a: &[f32], b: &[f32], n: usize, tb: bool, out: &mut [f32], accumulate: bool) {
    let k = a.len();
    if !tb {
        if !accumulate {
            out.fill(0.0);
        }
        for (av, row) in a.iter().zip(b.chunks_exact(n)) {
            for (o, bv) in out.iter_mut().zip(row) {
                *o += av * bv;
            }
        }
        return;
    }
    for (o, row) in out.iter_mut().zip(b.chunks_exact(k)) {
        let mut lanes = [0.0f32; 8];
        let (head, tail) = row.split_at(k - k % 8);
        for (x, y) in a.chunks_exact(8).zip(head.chunks_exact(8)) {
            for ((acc, x), y) in lanes.iter_mut().zip(x).zip(y) {
                *acc += x * y;
            }
        }
        let mut s = lanes.iter().sum::<f32>();
        for (x, y) in a[k - k % 8..].iter().zip(tail) {
            s += x * y;
        }
        *o = if accumulate { *o + s } else { s };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], m: usize, k: usize, b: &[f32], n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f32], r: usize, c: usize) -> Vec<f32> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        for (m, k, n) in [(3, 4, 5), (1, 19, 6), (1, 3, 4)] {
            let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
            let b: Vec<f32> = (0..k * n).map(|i| (i as f32).sin()).collect();
            let want = naive(&a, m, k, &b, n);
            let at = transpose(&a, m, k);
            let bt = transpose(&b, k, n);
            for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
                let aa = if ta { &at } else { &a };
                let bb = if tb { &bt } else { &b };
                let ashape = if ta { (k, m) } else { (m, k) };
                let bshape = if tb { (n, k) } else { (k, n) };
                let mut out = vec![1.0; m * n];
                gemm(aa, ashape, ta, bb, bshape, tb, &mut out, false);
                for (x, y) in out.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-4);
                }
                gemm(aa, ashape, ta, bb, bshape, tb, &mut out, true);
                for (x, y) in out.iter().zip(&want) {
                    assert!((x - 2.0 * y).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn tensor_shape_checks() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::zeros(&[4, 2, 3]);
        assert_eq!((t.rows(), t.cols()), (8, 3));
    }
}
