//! Raw numeric kernels shared by forward and backward rules.

/// C = A·B + beta·C for row/column-strided f64 matrices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    n_c: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    debug_assert!(c.len() >= (m - 1) * n_c + n);
    // SAFETY: the caller passes slices whose extents cover every strided index;
    // the debug assertion above checks the output side.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n_c as isize,
            1,
        );
    }
}

/// Row-major [m,k]·[k,n].
pub(crate) fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (n, 1), 0.0, &mut c, n);
    c
}

pub(crate) fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Geometry of a 1-D convolution on a [channels, time] input.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub out_len: usize,
}

impl ConvGeom {
    pub fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }

    /// Input time index touched by output frame `t` and tap `k`, if inside the signal.
    #[inline]
    pub fn src(&self, t: usize, k: usize) -> Option<usize> {
        let pos = (t * self.stride + k * self.dilation) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < self.len).then_some(pos as usize)
    }

    /// im2col for group `g`: rows are (channel-in-group, tap), columns are output frames.
    pub fn im2col(&self, x: &[f64], g: usize) -> Vec<f64> {
        let cig = self.in_per_group();
        let mut col = vec![0.0; cig * self.kernel * self.out_len];
        for ci in 0..cig {
            let xrow = &x[(g * cig + ci) * self.len..(g * cig + ci + 1) * self.len];
            for k in 0..self.kernel {
                let row = &mut col[(ci * self.kernel + k) * self.out_len..][..self.out_len];
                for (t, slot) in row.iter_mut().enumerate() {
                    if let Some(s) = self.src(t, k) {
                        *slot = xrow[s];
                    }
                }
            }
        }
        col
    }

    pub fn col2im_add(&self, col: &[f64], g: usize, dx: &mut [f64]) {
        let cig = self.in_per_group();
        for ci in 0..cig {
            let base = (g * cig + ci) * self.len;
            for k in 0..self.kernel {
                let row = &col[(ci * self.kernel + k) * self.out_len..][..self.out_len];
                for (t, v) in row.iter().enumerate() {
                    if let Some(s) = self.src(t, k) {
                        dx[base + s] += v;
                    }
                }
            }
        }
    }
}
