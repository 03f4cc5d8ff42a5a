//! Forward and backward kernels on flat row-major buffers.
//!
//! Convolutions lower each sample to a patch matrix and call `dgemm`; the
//! direct sliding-window definition is the reference they are tested against.

use crate::error::{Error, Result};

/// `C = A' B'` (+ `C` when `accumulate`), where `A'` is `A` or its transpose.
/// `A'` is `m x k`, `B'` is `k x n`, `C` is `m x n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index dgemm touches given these
    // strides.
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

/// Geometry of a batched valid 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
}

impl Conv2dGeom {
    pub fn validate(&self) -> Result<()> {
        if self.stride_h == 0 || self.stride_w == 0 {
            return Err(Error::invalid("convolution stride must be at least 1"));
        }
        if self.k_h == 0 || self.k_w == 0 || self.k_h > self.height || self.k_w > self.width {
            return Err(Error::shape(format!(
                "kernel {}x{} does not fit input {}x{}",
                self.k_h, self.k_w, self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.height - self.k_h) / self.stride_h + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width - self.k_w) / self.stride_w + 1
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.k_h * self.k_w
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn in_size(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    fn out_size(&self) -> usize {
        self.out_ch * self.positions()
    }
}

fn im2col(g: &Conv2dGeom, x: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.in_ch {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for kh in 0..g.k_h {
            for kw in 0..g.k_w {
                let row = ((c * g.k_h + kh) * g.k_w + kw) * p;
                for oy in 0..oh {
                    let src = &plane[(oy * g.stride_h + kh) * g.width..];
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if g.stride_w == 1 {
                        dst.copy_from_slice(&src[kw..kw + ow]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = src[ox * g.stride_w + kw];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &Conv2dGeom, cols: &[f64], dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for kh in 0..g.k_h {
            for kw in 0..g.k_w {
                let row = ((c * g.k_h + kh) * g.k_w + kw) * p;
                for oy in 0..oh {
                    let dst = &mut plane[(oy * g.stride_h + kh) * g.width..];
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, s) in src.iter().enumerate() {
                        dst[ox * g.stride_w + kw] += s;
                    }
                }
            }
        }
    }
}

/// `y[b, o] = sum_c w[o, c] * x[b, c] (valid, strided) + bias[o]`.
pub fn conv2d_forward(g: &Conv2dGeom, x: &[f64], w: &[f64], bias: &[f64], y: &mut [f64]) {
    let (pl, p) = (g.patch_len(), g.positions());
    let mut cols = vec![0.0; pl * p];
    for b in 0..g.batch {
        im2col(g, &x[b * g.in_size()..(b + 1) * g.in_size()], &mut cols);
        let out = &mut y[b * g.out_size()..(b + 1) * g.out_size()];
        gemm(g.out_ch, pl, p, w, false, &cols, false, out, false);
        for (o, row) in out.chunks_exact_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v += bias[o]);
        }
    }
}

/// Accumulates into `dw`, `db` and, when given, `dx`.
pub fn conv2d_backward(
    g: &Conv2dGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let (pl, p) = (g.patch_len(), g.positions());
    let mut cols = vec![0.0; pl * p];
    let mut dcols = vec![0.0; if dx.is_some() { pl * p } else { 0 }];
    for b in 0..g.batch {
        let dy_b = &dy[b * g.out_size()..(b + 1) * g.out_size()];
        im2col(g, &x[b * g.in_size()..(b + 1) * g.in_size()], &mut cols);
        gemm(g.out_ch, p, pl, dy_b, false, &cols, true, dw, true);
        for (o, row) in dy_b.chunks_exact(p).enumerate() {
            db[o] += row.iter().sum::<f64>();
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(pl, g.out_ch, p, w, true, dy_b, false, &mut dcols, false);
            col2im(g, &dcols, &mut dx[b * g.in_size()..(b + 1) * g.in_size()]);
        }
    }
}

/// Non-overlapping average pooling over `[planes, h, w]`; `h` and `w` must be
/// multiples of the window.
pub fn avg_pool2d_forward(
    planes: usize,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    x: &[f64],
    y: &mut [f64],
) {
    let (oh, ow) = (h / ph, w / pw);
    let scale = 1.0 / (ph * pw) as f64;
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..ph {
                    let row = &src[(oy * ph + dy) * w + ox * pw..];
                    acc += row[..pw].iter().sum::<f64>();
                }
                dst[oy * ow + ox] = acc * scale;
            }
        }
    }
}

pub fn avg_pool2d_backward(
    planes: usize,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    dy: &[f64],
    dx: &mut [f64],
) {
    let (oh, ow) = (h / ph, w / pw);
    let scale = 1.0 / (ph * pw) as f64;
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] += src[(y / ph) * ow + x / pw] * scale;
            }
        }
    }
}

/// Non-overlapping max pooling over `[rows, len]`, trailing remainder dropped.
/// Returns the winning input offset of each output (first maximum on ties).
pub fn max_pool1d_forward(
    rows: usize,
    len: usize,
    window: usize,
    x: &[f64],
    y: &mut [f64],
) -> Vec<usize> {
    let out = len / window;
    let mut arg = vec![0; rows * out];
    for r in 0..rows {
        for o in 0..out {
            let start = r * len + o * window;
            let (mut best, mut best_i) = (x[start], start);
            for i in start + 1..start + window {
                if x[i] > best {
                    best = x[i];
                    best_i = i;
                }
            }
            y[r * out + o] = best;
            arg[r * out + o] = best_i;
        }
    }
    arg
}

/// Zero padding of `[planes, h, w]` by `(top, bottom, left, right)`.
pub fn pad2d_forward(
    planes: usize,
    h: usize,
    w: usize,
    pads: [usize; 4],
    x: &[f64],
    y: &mut [f64],
) {
    let (nh, nw) = (h + pads[0] + pads[1], w + pads[2] + pads[3]);
    for p in 0..planes {
        for r in 0..h {
            let src = &x[(p * h + r) * w..(p * h + r + 1) * w];
            let start = (p * nh + r + pads[0]) * nw + pads[2];
            y[start..start + w].copy_from_slice(src);
        }
    }
}

pub fn pad2d_backward(
    planes: usize,
    h: usize,
    w: usize,
    pads: [usize; 4],
    dy: &[f64],
    dx: &mut [f64],
) {
    let (nh, nw) = (h + pads[0] + pads[1], w + pads[2] + pads[3]);
    for p in 0..planes {
        for r in 0..h {
            let start = (p * nh + r + pads[0]) * nw + pads[2];
            let dst = &mut dx[(p * h + r) * w..(p * h + r + 1) * w];
            dst.iter_mut()
                .zip(&dy[start..start + w])
                .for_each(|(d, s)| *d += s);
        }
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn pooling_and_padding() {
        let mut y = [0.0];
        avg_pool2d_forward(1, 2, 2, 2, 2, &[1.0, 2.0, 3.0, 4.0], &mut y);
        assert_eq!(y, [2.5]);

        let mut y = [0.0; 2];
        let arg = max_pool1d_forward(1, 7, 3, &[1.0, 5.0, 5.0, 0.0, -1.0, -2.0, 9.0], &mut y);
        assert_eq!(y, [5.0, 0.0]);
        assert_eq!(arg, [1, 3]);

        let mut y = [0.0; 9];
        pad2d_forward(1, 2, 1, [1, 0, 0, 2], &[1.0, 2.0], &mut y);
        assert_eq!(y, [0., 0., 0., 1., 0., 0., 2., 0., 0.]);
        let mut dx = [0.0; 2];
        pad2d_backward(
            1,
            2,
            1,
            [1, 0, 0, 2],
            &[9., 9., 9., 3., 9., 9., 4., 9., 9.],
            &mut dx,
        );
        assert_eq!(dx, [3.0, 4.0]);
    }

    #[test]
    fn log_softmax_is_stable() {
        let l = log_softmax(&[1000.0, 0.0]);
        assert!(l[0].abs() < 1e-300 || l[0] == 0.0);
        assert!((l[1] + 1000.0).abs() < 1e-9);
    }
}
