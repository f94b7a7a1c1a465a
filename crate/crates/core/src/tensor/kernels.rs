//! Raw numeric kernels on flat slices. No shape checking happens here;
//! callers in `tape` validate extents first.

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// With `trans_a` the slice `a` holds a row-major `k×m` matrix, likewise
/// `trans_b` means `b` holds `n×k`. `c` is row-major `m×n`; when
/// `accumulate` is false its previous contents are overwritten.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major blocks whose lengths were asserted on entry.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.c_in
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source pixel for output `(oy, ox)` and kernel tap `(ky, kx)`, or
    /// `None` when the tap falls in the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.padding)?;
        let ix = (ox * self.stride + kx).checked_sub(self.padding)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }
}

/// Unfolds an HWC image into a `(out_h·out_w) × (k·k·c_in)` patch matrix
/// whose column order matches a `[k, k, c_in, c_out]` kernel.
pub(crate) fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.out_pixels() * plen];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * plen..][..plen];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                        let src = &input[(iy * g.w + ix) * g.c_in..][..g.c_in];
                        row[(ky * g.k + kx) * g.c_in..][..g.c_in].copy_from_slice(src);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the image.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    let plen = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * plen..][..plen];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                        let dst = &mut out[(iy * g.w + ix) * g.c_in..][..g.c_in];
                        let src = &row[(ky * g.k + kx) * g.c_in..][..g.c_in];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
    }
}
