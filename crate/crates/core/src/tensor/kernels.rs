//! Raw numeric kernels over flat row-major buffers. The tape wraps these with
//! shape checks and gradient bookkeeping.

/// Strided read-only view into a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// The transpose of a row-major `rows × cols` buffer.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            offset: 0,
            rs: 1,
            cs: cols,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "gemm view out of bounds");
        }
    }
}

/// Strided mutable destination.
pub(crate) struct ViewMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> ViewMut<'a> {
    pub fn row_major(data: &'a mut [f64], cols: usize) -> Self {
        ViewMut {
            data,
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }
}

/// `c ← alpha·a·b + beta·c` for `a: m×k`, `b: k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: ViewMut<'_>) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    if m > 0 && n > 0 {
        let last = c.offset + (m - 1) * c.rs + (n - 1) * c.cs;
        assert!(last < c.data.len(), "gemm output out of bounds");
    }
    // SAFETY: every pointer/stride combination was bounds-checked above and
    // the output does not alias the inputs (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Softmax along `axis` of a tensor with the given dims, max-subtracted.
pub(crate) fn softmax_axis(data: &[f64], dims: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(dims, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(data[idx(j)]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (data[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[idx(j)] /= sum;
            }
        }
    }
    out
}

pub(crate) fn axis_split(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// Output length and leading pad for "same-ceil" windows: `out = ceil(len / stride)`.
pub(crate) fn same_ceil(len: usize, window: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + window).saturating_sub(len);
    (out, total / 2)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct WindowGeom {
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub window: [usize; 3],
    pub stride: usize,
    pub pad: [usize; 3],
}

impl WindowGeom {
    pub fn new(in_dims: [usize; 3], window: [usize; 3], stride: usize) -> Self {
        let mut out_dims = [0; 3];
        let mut pad = [0; 3];
        for a in 0..3 {
            let (o, p) = same_ceil(in_dims[a], window[a], stride);
            out_dims[a] = o;
            pad[a] = p;
        }
        WindowGeom {
            in_dims,
            out_dims,
            window,
            stride,
            pad,
        }
    }

    pub fn out_positions(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn window_len(&self) -> usize {
        self.window.iter().product()
    }

    /// Input coordinate along `axis` for output index `o` and window offset `w`,
    /// or `None` when it falls in the padding.
    #[inline]
    fn coord(&self, axis: usize, o: usize, w: usize) -> Option<usize> {
        let pos = o * self.stride + w;
        if pos < self.pad[axis] {
            return None;
        }
        let c = pos - self.pad[axis];
        (c < self.in_dims[axis]).then_some(c)
    }

    /// Visit every (output position, window slot, input voxel) triple that is
    /// inside the input. Voxel indices are spatial (channel stride applied by caller).
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [_, ih, iw] = self.in_dims;
        let [od, oh, ow] = self.out_dims;
        let [kd, kh, kw] = self.window;
        let mut p = 0;
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut t = 0;
                    for dz in 0..kd {
                        let z = self.coord(0, oz, dz);
                        for dy in 0..kh {
                            let y = self.coord(1, oy, dy);
                            for dx in 0..kw {
                                let x = self.coord(2, ox, dx);
                                if let (Some(z), Some(y), Some(x)) = (z, y, x) {
                                    f(p, t, (z * ih + y) * iw + x);
                                }
                                t += 1;
                            }
                        }
                    }
                    p += 1;
                }
            }
        }
    }
}

/// Lower a channels-last volume into a `[positions × (window·cin)]` patch matrix.
pub(crate) fn im2col(x: &[f64], geom: &WindowGeom, cin: usize) -> Vec<f64> {
    let cols = geom.window_len() * cin;
    let mut out = vec![0.0; geom.out_positions() * cols];
    geom.for_each_tap(|p, t, v| {
        let dst = p * cols + t * cin;
        out[dst..dst + cin].copy_from_slice(&x[v * cin..(v + 1) * cin]);
    });
    out
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the volume.
pub(crate) fn col2im_add(dpatch: &[f64], geom: &WindowGeom, cin: usize, dx: &mut [f64]) {
    let cols = geom.window_len() * cin;
    geom.for_each_tap(|p, t, v| {
        let src = p * cols + t * cin;
        for c in 0..cin {
            dx[v * cin + c] += dpatch[src + c];
        }
    });
}

/// Max pooling with windows clipped to the input; returns values and the
/// flat input index of each maximum (first occurrence in scan order).
pub(crate) fn maxpool(x: &[f64], geom: &WindowGeom, channels: usize) -> (Vec<f64>, Vec<usize>) {
    let n = geom.out_positions() * channels;
    let mut best = vec![f64::NEG_INFINITY; n];
    let mut arg = vec![usize::MAX; n];
    geom.for_each_tap(|p, _, v| {
        for c in 0..channels {
            let val = x[v * channels + c];
            let o = p * channels + c;
            if arg[o] == usize::MAX || val > best[o] {
                best[o] = val;
                arg[o] = v * channels + c;
            }
        }
    });
    (best, arg)
}

/// Standard normal CDF via erf.
pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub(crate) fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
