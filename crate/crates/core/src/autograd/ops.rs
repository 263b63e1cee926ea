use std::rc::Rc;

use super::gemm::{sgemm, View};
use super::{numel, Tensor};

fn assert_same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (of `shape`) into axis order `axes`.
fn permute_raw(src: &[f32], shape: &[usize], axes: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, out_shape);
    }
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = src_strides[last];
    let mut base = 0usize;
    loop {
        let mut off = base;
        for _ in 0..inner {
            out.push(src[off]);
            off += inner_stride;
        }
        // Advance the odometer over all but the last axis.
        let mut axis = last;
        loop {
            if axis == 0 {
                return (out, out_shape);
            }
            axis -= 1;
            idx[axis] += 1;
            base += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            base -= src_strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

fn gelu_scalar(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_same_shape(self, other, "add");
        let data: Vec<f32> = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_same_shape(self, other, "sub");
        let data: Vec<f32> = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_same_shape(self, other, "mul");
        let a = self.shared_data();
        let b = other.shared_data();
        let data: Vec<f32> = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = g.iter().zip(b.iter()).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(a.iter()).map(|(g, x)| g * x).collect();
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// Adds `other`, whose shape must equal a suffix of `self`'s shape, to every
    /// leading slice (bias or positional-embedding broadcast).
    pub fn add_trailing(&self, other: &Tensor) -> Tensor {
        let k = other.rank();
        assert!(
            k <= self.rank() && self.shape()[self.rank() - k..] == *other.shape(),
            "add_trailing: {:?} is not a suffix of {:?}",
            other.shape(),
            self.shape()
        );
        let n = other.numel();
        let b = other.data();
        let mut data = self.to_vec();
        for chunk in data.chunks_mut(n) {
            for (v, bb) in chunk.iter_mut().zip(b) {
                *v += bb;
            }
        }
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let mut gb = vec![0.0; n];
                for chunk in g.chunks(n) {
                    for (acc, v) in gb.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                vec![Some(g.to_vec()), Some(gb)]
            }),
        )
    }

    pub fn scale(&self, s: f32) -> Tensor {
        let data = self.data().iter().map(|v| v * s).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().map(|v| v * s).collect())]),
        )
    }

    pub fn relu(&self) -> Tensor {
        let x = self.shared_data();
        let data = x.iter().map(|v| v.max(0.0)).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Tensor {
        let x = self.shared_data();
        let data = x.iter().map(|v| gelu_scalar(*v)).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.iter().zip(x.iter()).map(|(g, x)| g * gelu_grad_scalar(*x)).collect(),
                )]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let y: Rc<Vec<f32>> = Rc::new(self.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect());
        let yb = Rc::clone(&y);
        Tensor::from_op_shared(
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().zip(yb.iter()).map(|(g, y)| g * y * (1.0 - y)).collect())]),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let y: Rc<Vec<f32>> = Rc::new(self.data().iter().map(|v| v.tanh()).collect());
        let yb = Rc::clone(&y);
        Tensor::from_op_shared(
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().zip(yb.iter()).map(|(g, y)| g * (1.0 - y * y)).collect())]),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f32 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![s],
            vec![],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        self.sum_all().scale(1.0 / n as f32)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Tensor {
        let shape = self.shape();
        assert!(axis < shape.len(), "mean_axis: axis {axis} out of range");
        let pre: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let post: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![0.0f32; pre * post];
        for p in 0..pre {
            let dst = &mut out[p * post..(p + 1) * post];
            for k in 0..n {
                let src = &x[(p * n + k) * post..(p * n + k + 1) * post];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let inv = 1.0 / n as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0f32; pre * n * post];
                for p in 0..pre {
                    let src = &g[p * post..(p + 1) * post];
                    for k in 0..n {
                        let dst = &mut gx[(p * n + k) * post..(p * n + k + 1) * post];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(numel(shape), self.numel(), "reshape: {:?} -> {:?}", self.shape(), shape);
        Tensor::from_op_shared(
            self.shared_data(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        assert_eq!(axes.len(), self.rank(), "permute: wrong axis count");
        let mut check = axes.to_vec();
        check.sort_unstable();
        assert!(
            check.iter().enumerate().all(|(i, a)| i == *a),
            "permute: not a permutation"
        );
        let (data, out_shape) = permute_raw(self.data(), self.shape(), axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out_shape_b = out_shape.clone();
        Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g| vec![Some(permute_raw(g, &out_shape_b, &inverse).0)]),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Tensor {
        let r = self.rank();
        assert!(r >= 2);
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(&axes)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let shape = self.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow: out of range");
        let pre: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let post: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = Vec::with_capacity(pre * len * post);
        for p in 0..pre {
            out.extend_from_slice(&x[(p * n + start) * post..(p * n + start + len) * post]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Tensor::from_op(
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0f32; pre * n * post];
                for p in 0..pre {
                    gx[(p * n + start) * post..(p * n + start + len) * post]
                        .copy_from_slice(&g[p * len * post..(p + 1) * len * post]);
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape().to_vec();
        for p in parts {
            assert_eq!(p.rank(), first.len(), "concat: rank mismatch");
            for (i, (a, b)) in p.shape().iter().zip(&first).enumerate() {
                assert!(i == axis || a == b, "concat: shape mismatch off-axis");
            }
        }
        let pre: usize = first[..axis].iter().product();
        let post: usize = first[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.dim(axis)).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(pre * total * post);
        for p in 0..pre {
            for (t, &len) in parts.iter().zip(&lens) {
                out.extend_from_slice(&t.data()[p * len * post..(p + 1) * len * post]);
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        Tensor::from_op(
            out,
            out_shape,
            parts.to_vec(),
            Box::new(move |g| {
                let mut grads: Vec<Vec<f32>> = lens.iter().map(|l| Vec::with_capacity(pre * l * post)).collect();
                let mut off = 0;
                for _ in 0..pre {
                    for (gp, &len) in grads.iter_mut().zip(&lens) {
                        gp.extend_from_slice(&g[off..off + len * post]);
                        off += len * post;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        )
    }

    /// `[m, k] @ [k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert!(self.rank() == 2 && other.rank() == 2, "matmul expects matrices");
        let (m, k) = (self.dim(0), self.dim(1));
        let (k2, n) = (other.dim(0), other.dim(1));
        assert_eq!(k, k2, "matmul inner dims");
        let a = self.shared_data();
        let b = other.shared_data();
        let mut out = vec![0.0f32; m * n];
        sgemm(1.0, View::row_major(&a, m, k), View::row_major(&b, k, n), 0.0, &mut out);
        Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0f32; m * k];
                sgemm(1.0, View::row_major(g, m, n), View::transposed(&b, k, n), 0.0, &mut ga);
                let mut gb = vec![0.0f32; k * n];
                sgemm(1.0, View::transposed(&a, m, k), View::row_major(g, m, n), 0.0, &mut gb);
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// Affine map over the last axis: `x @ w^T + b` with `w: [out, in]`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Tensor {
        assert_eq!(weight.rank(), 2, "linear weight must be [out, in]");
        let (out_dim, in_dim) = (weight.dim(0), weight.dim(1));
        assert_eq!(
            *self.shape().last().expect("linear on scalar"),
            in_dim,
            "linear: input width {:?} vs weight {:?}",
            self.shape(),
            weight.shape()
        );
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[out_dim], "linear bias shape");
        }
        let rows = self.numel() / in_dim;
        let x = self.shared_data();
        let w = weight.shared_data();
        let mut out = vec![0.0f32; rows * out_dim];
        if let Some(b) = bias {
            for row in out.chunks_mut(out_dim) {
                row.copy_from_slice(b.data());
            }
        }
        sgemm(
            1.0,
            View::row_major(&x, rows, in_dim),
            View::transposed(&w, out_dim, in_dim),
            1.0,
            &mut out,
        );
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().unwrap() = out_dim;
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Tensor::from_op(
            out,
            out_shape,
            parents,
            Box::new(move |g| {
                let mut gx = vec![0.0f32; rows * in_dim];
                sgemm(
                    1.0,
                    View::row_major(g, rows, out_dim),
                    View::row_major(&w, out_dim, in_dim),
                    0.0,
                    &mut gx,
                );
                let mut gw = vec![0.0f32; out_dim * in_dim];
                sgemm(
                    1.0,
                    View::transposed(g, rows, out_dim),
                    View::row_major(&x, rows, in_dim),
                    0.0,
                    &mut gw,
                );
                let mut grads = vec![Some(gx), Some(gw)];
                if has_bias {
                    let mut gb = vec![0.0f32; out_dim];
                    for row in g.chunks(out_dim) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    grads.push(Some(gb));
                }
                grads
            }),
        )
    }

    /// Batched product `[g, m, k] @ [g, k, n]`, or `[g, m, k] @ [g, n, k]^T`
    /// when `transpose_rhs`.
    pub fn bmm(&self, other: &Tensor, transpose_rhs: bool) -> Tensor {
        assert!(self.rank() == 3 && other.rank() == 3, "bmm expects rank-3 operands");
        let (groups, m, k) = (self.dim(0), self.dim(1), self.dim(2));
        assert_eq!(other.dim(0), groups, "bmm group count");
        let n = if transpose_rhs {
            assert_eq!(other.dim(2), k, "bmm inner dims");
            other.dim(1)
        } else {
            assert_eq!(other.dim(1), k, "bmm inner dims");
            other.dim(2)
        };
        let a = self.shared_data();
        let b = other.shared_data();
        let mut out = vec![0.0f32; groups * m * n];
        fn rhs(b: &[f32], transpose: bool, k: usize, n: usize) -> View<'_, f32> {
            if transpose {
                View::transposed(b, n, k)
            } else {
                View::row_major(b, k, n)
            }
        }
        for gi in 0..groups {
            sgemm(
                1.0,
                View::row_major(&a[gi * m * k..(gi + 1) * m * k], m, k),
                rhs(&b[gi * k * n..(gi + 1) * k * n], transpose_rhs, k, n),
                0.0,
                &mut out[gi * m * n..(gi + 1) * m * n],
            );
        }
        Tensor::from_op(
            out,
            vec![groups, m, n],
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0f32; groups * m * k];
                let mut gb = vec![0.0f32; groups * k * n];
                for gi in 0..groups {
                    let gg = &g[gi * m * n..(gi + 1) * m * n];
                    let ag = &a[gi * m * k..(gi + 1) * m * k];
                    let bg = &b[gi * k * n..(gi + 1) * k * n];
                    let ga_g = &mut ga[gi * m * k..(gi + 1) * m * k];
                    let gb_g = &mut gb[gi * k * n..(gi + 1) * k * n];
                    if transpose_rhs {
                        // out = A B^T, B: [n, k]
                        sgemm(1.0, View::row_major(gg, m, n), View::row_major(bg, n, k), 0.0, ga_g);
                        sgemm(1.0, View::transposed(gg, m, n), View::row_major(ag, m, k), 0.0, gb_g);
                    } else {
                        sgemm(1.0, View::row_major(gg, m, n), View::transposed(bg, k, n), 0.0, ga_g);
                        sgemm(1.0, View::transposed(ag, m, k), View::row_major(gg, m, n), 0.0, gb_g);
                    }
                }
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn softmax_last(&self) -> Tensor {
        let n = *self.shape().last().expect("softmax on scalar");
        let mut y = self.to_vec();
        for row in y.chunks_mut(n) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = 1.0 / sum;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let y = Rc::new(y);
        let yb = Rc::clone(&y);
        Tensor::from_op_shared(
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0f32; g.len()];
                for ((gx_row, g_row), y_row) in gx.chunks_mut(n).zip(g.chunks(n)).zip(yb.chunks(n)) {
                    let dot: f32 = g_row.iter().zip(y_row).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in gx_row.iter_mut().zip(g_row).zip(y_row) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm_last(&self, gamma: &Tensor, beta: &Tensor, eps: f32) -> Tensor {
        let n = *self.shape().last().expect("layer_norm on scalar");
        assert_eq!(gamma.shape(), &[n], "layer_norm gamma shape");
        assert_eq!(beta.shape(), &[n], "layer_norm beta shape");
        let rows = self.numel() / n;
        let x = self.data();
        let gm = gamma.shared_data();
        let bt = beta.data();
        let mut xhat = vec![0.0f32; x.len()];
        let mut inv_std = vec![0.0f32; rows];
        let mut out = vec![0.0f32; x.len()];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gm[j] + bt[j];
            }
        }
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0f32; rows * n];
                let mut gg = vec![0.0f32; n];
                let mut gbeta = vec![0.0f32; n];
                let mut dxhat = vec![0.0f32; n];
                for r in 0..rows {
                    let g_row = &g[r * n..(r + 1) * n];
                    let h_row = &xhat[r * n..(r + 1) * n];
                    let mut mean_d = 0.0f32;
                    let mut mean_dh = 0.0f32;
                    for j in 0..n {
                        gg[j] += g_row[j] * h_row[j];
                        gbeta[j] += g_row[j];
                        dxhat[j] = g_row[j] * gm[j];
                        mean_d += dxhat[j];
                        mean_dh += dxhat[j] * h_row[j];
                    }
                    mean_d /= n as f32;
                    mean_dh /= n as f32;
                    for j in 0..n {
                        gx[r * n + j] = inv_std[r] * (dxhat[j] - mean_d - h_row[j] * mean_dh);
                    }
                }
                vec![Some(gx), Some(gg), Some(gbeta)]
            }),
        )
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize_last(&self) -> Tensor {
        const EPS: f32 = 1e-12;
        let n = *self.shape().last().expect("normalize on scalar");
        let rows = self.numel() / n;
        let x = self.data();
        let mut y = vec![0.0f32; x.len()];
        let mut norms = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(EPS);
            norms[r] = norm;
            for j in 0..n {
                y[r * n + j] = row[j] / norm;
            }
        }
        let y = Rc::new(y);
        let yb = Rc::clone(&y);
        Tensor::from_op_shared(
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0f32; g.len()];
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let yr = &yb[r * n..(r + 1) * n];
                    let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Multiplies a `[b, c, h, w]` tensor by a constant `[b, h, w]` spatial mask.
    pub fn mask_spatial(&self, keep: &[f32]) -> Tensor {
        assert_eq!(self.rank(), 4, "mask_spatial expects NCHW");
        let (b, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        assert_eq!(keep.len(), b * h * w, "mask_spatial: mask size");
        let keep: Rc<Vec<f32>> = Rc::new(keep.to_vec());
        let apply = move |src: &[f32], keep: &[f32]| -> Vec<f32> {
            let mut out = src.to_vec();
            let plane = h * w;
            for bi in 0..b {
                let m = &keep[bi * plane..(bi + 1) * plane];
                for ci in 0..c {
                    let off = (bi * c + ci) * plane;
                    for (v, k) in out[off..off + plane].iter_mut().zip(m) {
                        *v *= k;
                    }
                }
            }
            out
        };
        let data = apply(self.data(), &keep);
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| vec![Some(apply(g, &keep))]),
        )
    }

    /// Selects rows of a `[n, d]` matrix.
    pub fn gather_rows(&self, index: &[usize]) -> Tensor {
        assert_eq!(self.rank(), 2, "gather_rows expects a matrix");
        let (n, d) = (self.dim(0), self.dim(1));
        let x = self.data();
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            assert!(i < n, "gather_rows: index {i} out of range {n}");
            out.extend_from_slice(&x[i * d..(i + 1) * d]);
        }
        let index = index.to_vec();
        Tensor::from_op(
            out,
            vec![index.len(), d],
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0f32; n * d];
                for (r, &i) in index.iter().enumerate() {
                    for j in 0..d {
                        gx[i * d + j] += g[r * d + j];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Replaces masked tokens of a `[b, n, d]` tensor by the shared vector `embedding: [d]`.
    pub fn mask_replace(&self, mask: &[bool], embedding: &Tensor) -> Tensor {
        assert_eq!(self.rank(), 3, "mask_replace expects [b, n, d]");
        let d = self.dim(2);
        let tokens = self.dim(0) * self.dim(1);
        assert_eq!(mask.len(), tokens, "mask_replace: mask size");
        assert_eq!(embedding.shape(), &[d], "mask_replace: embedding shape");
        let mut out = self.to_vec();
        let e = embedding.data();
        for (t, &m) in mask.iter().enumerate() {
            if m {
                out[t * d..(t + 1) * d].copy_from_slice(e);
            }
        }
        let mask = mask.to_vec();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), embedding.clone()],
            Box::new(move |g| {
                let mut gx = g.to_vec();
                let mut ge = vec![0.0f32; d];
                for (t, &m) in mask.iter().enumerate() {
                    if m {
                        for j in 0..d {
                            ge[j] += g[t * d + j];
                            gx[t * d + j] = 0.0;
                        }
                    }
                }
                vec![Some(gx), Some(ge)]
            }),
        )
    }

    /// Mean softmax cross-entropy of `[n, c]` logits against class indices.
    pub fn cross_entropy(&self, targets: &[usize]) -> Tensor {
        assert_eq!(self.rank(), 2, "cross_entropy expects [n, c] logits");
        let (n, c) = (self.dim(0), self.dim(1));
        assert_eq!(targets.len(), n, "cross_entropy: target count");
        let x = self.data();
        let mut probs = vec![0.0f32; n * c];
        let mut loss = 0.0f64;
        for r in 0..n {
            let row = &x[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - log_z).exp();
            }
            loss += (log_z - row[targets[r]]) as f64;
        }
        let targets = targets.to_vec();
        Tensor::from_op(
            vec![(loss / n as f64) as f32],
            vec![],
            vec![self.clone()],
            Box::new(move |g| {
                let s = g[0] / n as f32;
                let mut gx: Vec<f32> = probs.iter().map(|p| p * s).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gx[r * c + t] -= s;
                }
                vec![Some(gx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::grad_check;
    use super::*;

    fn ramp(n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|i| ((i * 37 % 17) as f32 - 8.0) * scale).collect()
    }

    #[test]
    fn permute_matches_index_arithmetic() {
        let x = Tensor::new((0..24).map(|v| v as f32).collect(), &[2, 3, 4]);
        let y = x.permute(&[2, 0, 1]);
        assert_eq!(y.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(y.data()[c * 6 + a * 3 + b], (a * 12 + b * 4 + c) as f32);
                }
            }
        }
    }

    #[test]
    fn elementwise_gradients() {
        let x = ramp(12, 0.1);
        let w = Tensor::new(ramp(12, 0.05), &[3, 4]);
        let shape = [3, 4];
        assert!(grad_check(|t| t.mul(&w).gelu().sum_all(), &x, &shape, 1e-2) < 1e-2);
        assert!(grad_check(|t| t.sigmoid().mul(&t.tanh()).sum_all(), &x, &shape, 1e-2) < 1e-2);
        assert!(grad_check(|t| t.sub(&w).relu().mean_all(), &x, &shape, 1e-3) < 1e-2);
    }

    #[test]
    fn reduction_and_shape_gradients() {
        let x = ramp(24, 0.1);
        let w = Tensor::new(ramp(8, 0.3), &[2, 4]);
        let shape = [2, 3, 4];
        let f = |t: &Tensor| t.mean_axis(1).mul(&w).sum_all();
        assert!(grad_check(f, &x, &shape, 1e-2) < 1e-2);
        let f = |t: &Tensor| {
            let p = t.permute(&[1, 2, 0]).narrow(1, 1, 2);
            let q = Tensor::concat(&[p.clone(), p.scale(2.0)], 2);
            q.mul(&q).sum_all()
        };
        assert!(grad_check(f, &x, &shape, 1e-2) < 1e-2);
    }

    #[test]
    fn matmul_family_gradients() {
        let x = ramp(12, 0.1);
        let w = Tensor::new(ramp(20, 0.07), &[5, 4]);
        let b = Tensor::new(ramp(5, 0.2), &[5]);
        let f = |t: &Tensor| t.linear(&w, Some(&b)).tanh().sum_all();
        assert!(grad_check(f, &x, &[3, 4], 1e-2) < 1e-2);
        let m = Tensor::new(ramp(8, 0.1), &[4, 2]);
        let f = |t: &Tensor| t.matmul(&m).sigmoid().sum_all();
        assert!(grad_check(f, &x, &[3, 4], 1e-2) < 1e-2);
        let other = Tensor::new(ramp(24, 0.1), &[2, 3, 4]);
        let f = |t: &Tensor| t.bmm(&other, true).softmax_last().mul(&t.bmm(&other, true)).sum_all();
        assert!(grad_check(f, &ramp(24, 0.2), &[2, 3, 4], 1e-2) < 2e-2);
        let rhs = Tensor::new(ramp(16, 0.1), &[2, 4, 2]);
        let f = |t: &Tensor| t.bmm(&rhs, false).tanh().sum_all();
        assert!(grad_check(f, &ramp(24, 0.2), &[2, 3, 4], 1e-2) < 1e-2);
    }

    #[test]
    fn bmm_gradient_wrt_rhs() {
        let lhs = Tensor::new(ramp(24, 0.1), &[2, 3, 4]);
        let f = |t: &Tensor| lhs.bmm(t, true).tanh().sum_all();
        assert!(grad_check(f, &ramp(40, 0.1), &[2, 5, 4], 1e-2) < 1e-2);
        let f = |t: &Tensor| lhs.bmm(t, false).tanh().sum_all();
        assert!(grad_check(f, &ramp(40, 0.1), &[2, 4, 5], 1e-2) < 1e-2);
    }

    #[test]
    fn normalisation_gradients() {
        let x = ramp(12, 0.3);
        let g = Tensor::new(ramp(4, 0.2), &[4]);
        let b = Tensor::new(ramp(4, 0.1), &[4]);
        let w = Tensor::new(ramp(12, 0.5), &[3, 4]);
        let f = |t: &Tensor| t.layer_norm_last(&g, &b, 1e-5).mul(&w).sum_all();
        assert!(grad_check(f, &x, &[3, 4], 1e-2) < 2e-2);
        let f = |t: &Tensor| t.l2_normalize_last().mul(&w).sum_all();
        assert!(grad_check(f, &x, &[3, 4], 1e-2) < 1e-2);
        let y = Tensor::new(x.clone(), &[3, 4]).l2_normalize_last();
        for row in y.data().chunks(4) {
            let n: f32 = row.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn gather_mask_and_cross_entropy() {
        let x = ramp(12, 0.3);
        let w = Tensor::new(ramp(16, 0.5), &[4, 4]);
        let f = |t: &Tensor| t.gather_rows(&[2, 0, 2, 1]).mul(&w).sum_all();
        assert!(grad_check(f, &x, &[3, 4], 1e-2) < 1e-2);
        let f = |t: &Tensor| t.cross_entropy(&[1, 3, 0]);
        assert!(grad_check(f, &x, &[3, 4], 1e-2) < 1e-2);
        let tokens = Tensor::new(ramp(12, 0.3), &[1, 3, 4]);
        let f = |e: &Tensor| tokens.mask_replace(&[true, false, true], e).tanh().sum_all();
        assert!(grad_check(f, &ramp(4, 0.2), &[4], 1e-2) < 1e-2);
        let keep = vec![1.0, 0.0, 1.0, 1.0];
        let f = |t: &Tensor| t.mask_spatial(&keep).tanh().sum_all();
        assert!(grad_check(f, &ramp(8, 0.2), &[1, 2, 2, 2], 1e-2) < 1e-2);
    }

    #[test]
    fn add_trailing_gradient() {
        let x = Tensor::new(ramp(24, 0.1), &[2, 3, 4]);
        let f = |t: &Tensor| x.add_trailing(t).tanh().sum_all();
        assert!(grad_check(f, &ramp(12, 0.1), &[3, 4], 1e-2) < 1e-2);
    }

    #[test]
    fn untracked_ops_record_nothing() {
        let a = Tensor::new(vec![1.0, 2.0], &[2]);
        let b = a.mul(&a).sum_all();
        assert!(!b.requires_grad());
        assert!(b.backward().get(&a).is_none());
    }
}
