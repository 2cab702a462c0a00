//! Raw dense kernels on row-major slices. Every output element is produced
//! by one fixed summation order, so the parallel and sequential paths agree
//! bit for bit.

use crate::par::{self, Exec};

/// Below this many multiply-adds the kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

fn exec_for(work: usize) -> Exec {
    if work >= PAR_THRESHOLD {
        Exec::available()
    } else {
        Exec::Sequential
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul_with(exec_for(m * k * n), a, b, m, k, n)
}

pub fn matmul_with(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    par::for_each_row(exec, &mut c, n, |i, out| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`.
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    par::for_each_row(exec_for(m * k * n), &mut c, n, |i, out| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in out.iter_mut().enumerate() {
            *o = dot(arow, &b[j * k..(j + 1) * k]);
        }
    });
    c
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`.
pub fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    par::for_each_row(exec_for(m * k * n), &mut c, n, |p, out| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    c
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Geometry of a 2-D convolution over a `[C×H×W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || k > h + 2 * pad || k > w + 2 * pad {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Rows of the unfolded patch matrix (`C_in·k·k`).
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_positions(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Input offset feeding patch row `r` at output position `(oy, ox)`.
    #[inline]
    fn source(&self, r: usize, oy: usize, ox: usize) -> Option<usize> {
        let c = r / (self.k * self.k);
        let ky = (r / self.k) % self.k;
        let kx = r % self.k;
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some(c * self.h * self.w + y as usize * self.w + x as usize)
        }
    }
}

/// Unfolds `input` into a `[C_in·k·k × H'·W']` patch matrix.
pub fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.out_positions();
    let mut out = vec![0.0; g.patch_len() * cols];
    for r in 0..g.patch_len() {
        let row = &mut out[r * cols..(r + 1) * cols];
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                if let Some(src) = g.source(r, oy, ox) {
                    row[oy * g.w_out + ox] = input[src];
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the input.
pub fn col2im(cols_grad: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.out_positions();
    let mut out = vec![0.0; g.c_in * g.h * g.w];
    for r in 0..g.patch_len() {
        let row = &cols_grad[r * cols..(r + 1) * cols];
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                if let Some(src) = g.source(r, oy, ox) {
                    out[src] += row[oy * g.w_out + ox];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn transposed_variants_agree_with_plain_product() {
        let (m, k, n) = (4, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let c = naive(&a, &b, m, k, n);
        let bt = transpose(&b, k, n);
        let at = transpose(&a, m, k);
        for (x, y) in matmul_a_bt(&a, &bt, m, k, n).iter().zip(&c) {
            assert!((x - y).abs() < 1e-14);
        }
        let atc = matmul_at_b(&a, &c, m, k, n);
        for (x, y) in atc.iter().zip(&naive(&at, &c, k, m, n)) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let (m, k, n) = (64, 48, 40);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.13).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.29).cos()).collect();
        assert_eq!(
            matmul_with(Exec::Sequential, &a, &b, m, k, n),
            matmul_with(Exec::Parallel, &a, &b, m, k, n)
        );
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 5, 6, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 5 * 6).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..g.patch_len() * g.out_positions())
            .map(|i| (i as f64 * 0.3).cos())
            .collect();
        let lhs = dot(&im2col(&x, &g), &y);
        let rhs = dot(&x, &col2im(&y, &g));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn geometry_rejects_bad_stride() {
        assert!(ConvGeom::new(1, 4, 4, 3, 0, 0).is_none());
        assert!(ConvGeom::new(1, 2, 2, 5, 1, 1).is_none());
        assert_eq!(ConvGeom::new(1, 32, 32, 4, 2, 1).unwrap().h_out, 16);
    }
}
