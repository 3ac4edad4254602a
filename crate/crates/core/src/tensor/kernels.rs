//! Raw buffer kernels shared by the tape's forward and backward passes.

/// A view of a row-major matrix buffer, optionally read as its transpose.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    /// Logical rows/cols after the optional transpose.
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// The transpose of a `rows x cols` buffer, i.e. a `cols x rows` view.
    pub fn t(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Mat {
            data,
            rows: cols,
            cols: rows,
            transposed: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a * b` (or `out += a * b` when `accumulate`), `out` row-major.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, out: &mut [f64], accumulate: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            out.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: pointers come from slices whose lengths were checked above
    // against the logical dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gather-style convolution layout: every output row reads `taps` input rows
/// (or zero padding), each contributing `cin` channels.
#[derive(Debug, Clone)]
pub(crate) struct GatherPlan {
    pub rows: usize,
    pub taps: usize,
    pub src: Vec<Option<u32>>,
}

impl GatherPlan {
    /// 3x3 neighbourhood over the first two axes of an `[A, B, S, C]` array,
    /// zero padded, applied independently per index of axis 2.
    pub fn spatial3x3(a: usize, b: usize, s: usize) -> Self {
        let rows = a * b * s;
        let mut src = Vec::with_capacity(rows * 9);
        for i in 0..a {
            for j in 0..b {
                for k in 0..s {
                    for di in -1isize..=1 {
                        for dj in -1isize..=1 {
                            let (ii, jj) = (i as isize + di, j as isize + dj);
                            if ii < 0 || jj < 0 || ii >= a as isize || jj >= b as isize {
                                src.push(None);
                            } else {
                                src.push(Some(((ii as usize * b + jj as usize) * s + k) as u32));
                            }
                        }
                    }
                }
            }
        }
        GatherPlan { rows, taps: 9, src }
    }

    /// Three-tap neighbourhood along axis 2 of an `[A, B, S, C]` array with
    /// reflect padding (`-1 -> 1`, `S -> S-2`, clamped for `S < 3`).
    pub fn spectral3_reflect(a: usize, b: usize, s: usize) -> Self {
        let rows = a * b * s;
        let mut src = Vec::with_capacity(rows * 3);
        let reflect = |k: isize| -> usize {
            let last = s as isize - 1;
            let r = if k < 0 {
                -k
            } else if k > last {
                2 * last - k
            } else {
                k
            };
            r.clamp(0, last) as usize
        };
        for p in 0..a * b {
            for k in 0..s {
                for o in -1isize..=1 {
                    src.push(Some((p * s + reflect(k as isize + o)) as u32));
                }
            }
        }
        GatherPlan { rows, taps: 3, src }
    }

    pub fn im2col(&self, x: &[f64], cin: usize) -> Vec<f64> {
        let width = self.taps * cin;
        let mut cols = vec![0.0; self.rows * width];
        for (row, out) in cols.chunks_exact_mut(width).enumerate() {
            for t in 0..self.taps {
                if let Some(s) = self.src[row * self.taps + t] {
                    let s = s as usize;
                    out[t * cin..(t + 1) * cin].copy_from_slice(&x[s * cin..(s + 1) * cin]);
                }
            }
        }
        cols
    }

    pub fn col2im(&self, cols: &[f64], cin: usize, dx: &mut [f64]) {
        let width = self.taps * cin;
        for (row, g) in cols.chunks_exact(width).enumerate() {
            for t in 0..self.taps {
                if let Some(s) = self.src[row * self.taps + t] {
                    let s = s as usize;
                    for (d, v) in dx[s * cin..(s + 1) * cin]
                        .iter_mut()
                        .zip(&g[t * cin..(t + 1) * cin])
                    {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source flat index for each destination element of `x.permute(axes)`.
pub(crate) fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        map.push(
            idx.iter()
                .zip(axes)
                .map(|(&i, &a)| i * src_strides[a])
                .sum(),
        );
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}
