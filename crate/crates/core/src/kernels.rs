//! Low-level loops shared by the tape operations.

/// Strided matrix with explicit row/column steps, so transposes are free.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

fn check_operands(m: usize, k: usize, n: usize, a: MatRef, b: MatRef) {
    let max_index = |r: MatRef, rows: usize, cols: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * r.rs + (cols as isize - 1) * r.cs
        }
    };
    assert!((max_index(a, m, k) as usize) < a.data.len().max(1));
    assert!((max_index(b, k, n) as usize) < b.data.len().max(1));
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]`, with `c` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f64, c: &mut [f64]) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    check_operands(m, k, n, a, b);
    // SAFETY: bounds of all three operands were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a[m×k]·b[k×n]` into a fresh row-major buffer.
pub(crate) fn gemm_new(m: usize, k: usize, n: usize, a: MatRef, b: MatRef) -> Vec<f64> {
    if m == 0 || n == 0 {
        return Vec::new();
    }
    check_operands(m, k, n, a, b);
    let mut c = Vec::with_capacity(m * n);
    // SAFETY: operand bounds are checked; with beta = 0 dgemm never reads c and
    // writes all m·n elements before the length is set.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

/// Geometry of a stride-1 convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.ph + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pw + 1 - self.kw
    }

    /// Rows of the column matrix: one per (channel, ky, kx).
    pub fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Columns of the column matrix: one per (image, oy, ox).
    pub fn p(&self) -> usize {
        self.n * self.out_h() * self.out_w()
    }
}

/// Unfolds `x[n,c,h,w]` into a `[k, p]` column matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut cols = Vec::with_capacity(g.k() * g.p());
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..oh {
                        let iy = oy as isize + ky as isize - g.ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            cols.extend(std::iter::repeat_n(0.0, ow));
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..][..g.w];
                        // output columns [lo, hi) read in-bounds input
                        let lo = g.pw.saturating_sub(kx).min(ow);
                        let hi = (g.w + g.pw).saturating_sub(kx).min(ow).max(lo);
                        cols.extend(std::iter::repeat_n(0.0, lo));
                        let start = lo + kx - g.pw;
                        cols.extend_from_slice(&src_row[start..start + hi - lo]);
                        cols.extend(std::iter::repeat_n(0.0, ow - hi));
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters a `[k, p]` column matrix back onto `dx`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let p = g.p();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src_row = &cols[row * p..(row + 1) * p];
                for n in 0..g.n {
                    let dst = &mut dx[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for oy in 0..oh {
                        let iy = oy as isize + ky as isize - g.ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..][..g.w];
                        let lo = g.pw.saturating_sub(kx).min(ow);
                        let hi = (g.w + g.pw).saturating_sub(kx).min(ow).max(lo);
                        let start = lo + kx - g.pw;
                        for (d, &s) in dst_row[start..start + hi - lo].iter_mut().zip(&src[oy * ow + lo..oy * ow + hi]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}
