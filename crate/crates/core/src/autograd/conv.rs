//! 2-D convolution through im2col and a single GEMM per image.

use super::gemm::{sgemm, View};
use super::Tensor;

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `[c, h, w]` image into `[c*kh*kw, oh*ow]`.
fn im2col(x: &[f32], g: &Geometry, cols: &mut [f32]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `[c*kh*kw, oh*ow]` columns into an image.
fn col2im(cols: &[f32], g: &Geometry, x: &mut [f32]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ki) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.ow..(oy + 1) * g.ow];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * g.sw + kj) as isize - g.pw as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// Cross-correlation of `[b, c, h, w]` input with `[o, c, kh, kw]` weights.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Tensor {
        assert_eq!(self.rank(), 4, "conv2d input must be NCHW");
        assert_eq!(weight.rank(), 4, "conv2d weight must be OCKK");
        let (b, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (o, wc, kh, kw) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
        assert_eq!(c, wc, "conv2d channel mismatch");
        if let Some(bias) = bias {
            assert_eq!(bias.shape(), &[o], "conv2d bias shape");
        }
        assert!(
            h + 2 * padding.0 >= kh && w + 2 * padding.1 >= kw,
            "conv2d kernel too large"
        );
        let g = Geometry {
            c,
            h,
            w,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            oh: conv_output_size(h, kh, stride.0, padding.0),
            ow: conv_output_size(w, kw, stride.1, padding.1),
        };
        let (rows, p) = (g.rows(), g.cols());
        let x = self.shared_data();
        let wt = weight.shared_data();
        let mut out = vec![0.0f32; b * o * p];
        let mut cols = vec![0.0f32; rows * p];
        for bi in 0..b {
            im2col(&x[bi * c * h * w..(bi + 1) * c * h * w], &g, &mut cols);
            let dst = &mut out[bi * o * p..(bi + 1) * o * p];
            if let Some(bias) = bias {
                for (oc, chunk) in dst.chunks_mut(p).enumerate() {
                    chunk.fill(bias.data()[oc]);
                }
            }
            sgemm(
                1.0,
                View::row_major(&wt, o, rows),
                View::row_major(&cols, rows, p),
                1.0,
                dst,
            );
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            parents.push(bias.clone());
        }
        let has_bias = bias.is_some();
        Tensor::from_op(
            out,
            vec![b, o, g.oh, g.ow],
            parents,
            Box::new(move |grad| {
                let mut gx = vec![0.0f32; b * c * h * w];
                let mut gw = vec![0.0f32; o * rows];
                let mut cols = vec![0.0f32; rows * p];
                let mut gcols = vec![0.0f32; rows * p];
                for bi in 0..b {
                    let gy = &grad[bi * o * p..(bi + 1) * o * p];
                    im2col(&x[bi * c * h * w..(bi + 1) * c * h * w], &g, &mut cols);
                    sgemm(
                        1.0,
                        View::row_major(gy, o, p),
                        View::transposed(&cols, rows, p),
                        1.0,
                        &mut gw,
                    );
                    sgemm(
                        1.0,
                        View::transposed(&wt, o, rows),
                        View::row_major(gy, o, p),
                        0.0,
                        &mut gcols,
                    );
                    col2im(&gcols, &g, &mut gx[bi * c * h * w..(bi + 1) * c * h * w]);
                }
                let mut grads = vec![Some(gx), Some(gw)];
                if has_bias {
                    let mut gb = vec![0.0f32; o];
                    for bi in 0..b {
                        for (oc, acc) in gb.iter_mut().enumerate() {
                            let off = (bi * o + oc) * p;
                            *acc += grad[off..off + p].iter().sum::<f32>();
                        }
                    }
                    grads.push(Some(gb));
                }
                grads
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::grad_check;
    use super::*;

    /// Direct nested-loop convolution.
    fn naive(
        x: &[f32],
        (b, c, h, w): (usize, usize, usize, usize),
        wt: &[f32],
        (o, kh, kw): (usize, usize, usize),
        bias: &[f32],
        (sh, sw): (usize, usize),
        (ph, pw): (usize, usize),
    ) -> Vec<f32> {
        let oh = conv_output_size(h, kh, sh, ph);
        let ow = conv_output_size(w, kw, sw, pw);
        let mut out = vec![0.0; b * o * oh * ow];
        for bi in 0..b {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[oc];
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * sh + ki) as isize - ph as isize;
                                    let ix = (ox * sw + kj) as isize - pw as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                        * wt[((oc * c + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        out[((bi * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|i| ((i * 29 % 23) as f32 - 11.0) * scale).collect()
    }

    #[test]
    fn matches_direct_convolution() {
        for &(stride, pad) in &[((1, 1), (1, 1)), ((2, 2), (1, 1)), ((2, 1), (1, 1)), ((1, 2), (0, 0))] {
            let (b, c, h, w, o) = (2, 3, 6, 7, 4);
            let x = ramp(b * c * h * w, 0.1);
            let wt = ramp(o * c * 9, 0.05);
            let bias = ramp(o, 0.2);
            let y = Tensor::new(x.clone(), &[b, c, h, w]).conv2d(
                &Tensor::new(wt.clone(), &[o, c, 3, 3]),
                Some(&Tensor::new(bias.clone(), &[o])),
                stride,
                pad,
            );
            let expect = naive(&x, (b, c, h, w), &wt, (o, 3, 3), &bias, stride, pad);
            assert_eq!(y.numel(), expect.len());
            for (a, e) in y.data().iter().zip(&expect) {
                assert!((a - e).abs() < 1e-5, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (b, c, h, w, o) = (2, 2, 5, 6, 3);
        let wt = Tensor::new(ramp(o * c * 9, 0.05), &[o, c, 3, 3]);
        let bias = Tensor::new(ramp(o, 0.1), &[o]);
        let f = |t: &Tensor| t.conv2d(&wt, Some(&bias), (2, 1), (1, 1)).tanh().sum_all();
        assert!(grad_check(f, &ramp(b * c * h * w, 0.1), &[b, c, h, w], 2e-2) < 1e-2);
        let x = Tensor::new(ramp(b * c * h * w, 0.1), &[b, c, h, w]);
        let f = |t: &Tensor| x.conv2d(t, Some(&bias), (1, 2), (1, 1)).tanh().sum_all();
        assert!(grad_check(f, &ramp(o * c * 9, 0.05), &[o, c, 3, 3], 1e-2) < 1e-2);
        let f = |t: &Tensor| x.conv2d(&wt, Some(t), (1, 1), (1, 1)).tanh().sum_all();
        assert!(grad_check(f, &ramp(o, 0.1), &[o], 1e-2) < 1e-2);
    }
}
