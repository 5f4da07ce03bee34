//! Convolution kernels via im2col + GEMM.

use crate::tensor::{matmul, Real};

pub(crate) struct Conv1dGeom {
    pub batch: usize,
    pub steps: usize,
    pub cin: usize,
    pub cout: usize,
    pub taps: usize,
    pub dilation: usize,
}

impl Conv1dGeom {
    fn col_width(&self) -> usize {
        self.taps * self.cin
    }

    /// cols[(b, t), j * cin + c] = x[b, t - (taps - 1 - j) * dilation, c], zero
    /// before the start of the sequence.
    fn im2col<F: Real>(&self, x: &[F]) -> Vec<F> {
        let width = self.col_width();
        let mut cols = vec![F::zero(); self.batch * self.steps * width];
        for b in 0..self.batch {
            for t in 0..self.steps {
                let row = &mut cols[(b * self.steps + t) * width..][..width];
                for j in 0..self.taps {
                    let lag = (self.taps - 1 - j) * self.dilation;
                    if lag > t {
                        continue;
                    }
                    let src = (b * self.steps + t - lag) * self.cin;
                    row[j * self.cin..(j + 1) * self.cin].copy_from_slice(&x[src..src + self.cin]);
                }
            }
        }
        cols
    }
}

pub(crate) fn conv1d_forward<F: Real>(g: &Conv1dGeom, x: &[F], k: &[F], bias: Option<&[F]>) -> Vec<F> {
    let rows = g.batch * g.steps;
    let cols = g.im2col(x);
    let mut out = vec![F::zero(); rows * g.cout];
    matmul(&cols, k, &mut out, rows, g.col_width(), g.cout, false, false, false);
    if let Some(bias) = bias {
        for row in out.chunks_exact_mut(g.cout) {
            row.iter_mut().zip(bias).for_each(|(o, &b)| *o += b);
        }
    }
    out
}

pub(crate) fn conv1d_backward_kernel<F: Real>(g: &Conv1dGeom, x: &[F], dout: &[F], dk: &mut [F]) {
    let rows = g.batch * g.steps;
    let cols = g.im2col(x);
    matmul(&cols, dout, dk, g.col_width(), rows, g.cout, true, false, true);
}

pub(crate) fn conv1d_backward_input<F: Real>(g: &Conv1dGeom, k: &[F], dout: &[F], dx: &mut [F]) {
    let rows = g.batch * g.steps;
    let width = g.col_width();
    let mut dcols = vec![F::zero(); rows * width];
    matmul(dout, k, &mut dcols, rows, g.cout, width, false, true, false);
    for b in 0..g.batch {
        for t in 0..g.steps {
            let row = &dcols[(b * g.steps + t) * width..][..width];
            for j in 0..g.taps {
                let lag = (g.taps - 1 - j) * g.dilation;
                if lag > t {
                    continue;
                }
                let dst = (b * g.steps + t - lag) * g.cin;
                dx[dst..dst + g.cin]
                    .iter_mut()
                    .zip(&row[j * g.cin..(j + 1) * g.cin])
                    .for_each(|(d, &v)| *d += v);
            }
        }
    }
}

pub(crate) struct Conv2dGeom {
    pub images: usize,
    pub cin: usize,
    pub height: usize,
    pub width: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Upper bound on im2col buffer elements per chunk of images.
const COL_BUDGET: usize = 1 << 20;

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn plane(&self) -> usize {
        self.out_h() * self.out_w()
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn chunk(&self) -> usize {
        (COL_BUDGET / (self.col_rows() * self.plane()).max(1)).clamp(1, self.images.max(1))
    }

    /// Writes image `img` into column block `slot` of a `[C*kh*kw, ld]` buffer.
    fn im2col_image<F: Real>(&self, img: &[F], col: &mut [F], ld: usize, slot: usize) {
        let (oh, ow, plane) = (self.out_h(), self.out_w(), self.plane());
        let p = self.padding as isize;
        for c in 0..self.cin {
            let chan = &img[c * self.height * self.width..][..self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * ld + slot * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - p;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.height as isize {
                            line.iter_mut().for_each(|v| *v = F::zero());
                            continue;
                        }
                        let src = &chan[iy as usize * self.width..][..self.width];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - p;
                            *v = if ix < 0 || ix >= self.width as isize {
                                F::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_image<F: Real>(&self, col: &[F], ld: usize, slot: usize, img: &mut [F]) {
        let (oh, ow, plane) = (self.out_h(), self.out_w(), self.plane());
        let p = self.padding as isize;
        for c in 0..self.cin {
            let chan = &mut img[c * self.height * self.width..][..self.height * self.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * ld + slot * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - p;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst = &mut chan[iy as usize * self.width..][..self.width];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - p;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<F: Real>(g: &Conv2dGeom, x: &[F], k: &[F], bias: Option<&[F]>) -> Vec<F> {
    let (plane, rows, in_size) = (g.plane(), g.col_rows(), g.cin * g.height * g.width);
    let chunk = g.chunk();
    let mut out = vec![F::zero(); g.images * g.cout * plane];
    let mut col = vec![F::zero(); rows * chunk * plane];
    let mut tmp = vec![F::zero(); g.cout * chunk * plane];
    for start in (0..g.images).step_by(chunk) {
        let n = chunk.min(g.images - start);
        let ld = n * plane;
        for i in 0..n {
            g.im2col_image(&x[(start + i) * in_size..][..in_size], &mut col, ld, i);
        }
        matmul(k, &col, &mut tmp, g.cout, rows, ld, false, false, false);
        for i in 0..n {
            let dst = &mut out[(start + i) * g.cout * plane..][..g.cout * plane];
            for co in 0..g.cout {
                let b = bias.map_or(F::zero(), |b| b[co]);
                let src = &tmp[co * ld + i * plane..][..plane];
                dst[co * plane..(co + 1) * plane]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, &s)| *d = s + b);
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward<F: Real>(
    g: &Conv2dGeom,
    x: &[F],
    k: &[F],
    dout: &[F],
    mut dk: Option<&mut [F]>,
    mut dx: Option<&mut [F]>,
) {
    let (plane, rows, in_size) = (g.plane(), g.col_rows(), g.cin * g.height * g.width);
    let chunk = g.chunk();
    let mut col = vec![F::zero(); rows * chunk * plane];
    let mut gbuf = vec![F::zero(); g.cout * chunk * plane];
    for start in (0..g.images).step_by(chunk) {
        let n = chunk.min(g.images - start);
        let ld = n * plane;
        for i in 0..n {
            let src = &dout[(start + i) * g.cout * plane..][..g.cout * plane];
            for co in 0..g.cout {
                gbuf[co * ld + i * plane..][..plane].copy_from_slice(&src[co * plane..(co + 1) * plane]);
            }
        }
        if let Some(dk) = dk.as_deref_mut() {
            for i in 0..n {
                g.im2col_image(&x[(start + i) * in_size..][..in_size], &mut col, ld, i);
            }
            // dk[Cout, rows] += g[Cout, ld] * col^T
            matmul(&gbuf, &col, dk, g.cout, ld, rows, false, true, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcol[rows, ld] = k^T[rows, Cout] * g[Cout, ld]
            matmul(k, &gbuf, &mut col, rows, g.cout, ld, true, false, false);
            for i in 0..n {
                g.col2im_image(&col, ld, i, &mut dx[(start + i) * in_size..][..in_size]);
            }
        }
    }
}
