//! Stochastic photometric and geometric augmentation.
//!
//! Each image draws its own subset of ops. Geometric ops sample the source with
//! bilinear interpolation and edge replication, so shape never changes.

use crate::rng::RandomStream;
use crate::types::ImageBatch;

/// One applied op with its drawn parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum AugOp {
    Contrast {
        gain: f32,
        offset: f32,
    },
    Blur {
        sigma: f32,
    },
    Sharpen {
        amount: f32,
    },
    /// Source window `(x0, y0, w, h)` in pixels, resized back to full size.
    Crop {
        x0: f32,
        y0: f32,
        w: f32,
        h: f32,
    },
    /// Source positions of the four output corners (TL, TR, BR, BL).
    Perspective {
        corners: [(f32, f32); 4],
    },
    /// Control-grid displacements, `(dx, dy)` per grid point, row-major.
    PiecewiseAffine {
        rows: usize,
        cols: usize,
        disp: Vec<(f32, f32)>,
    },
}

impl AugOp {
    pub fn name(&self) -> &'static str {
        match self {
            AugOp::Contrast { .. } => "contrast",
            AugOp::Blur { .. } => "blur",
            AugOp::Sharpen { .. } => "sharpen",
            AugOp::Crop { .. } => "crop",
            AugOp::Perspective { .. } => "perspective",
            AugOp::PiecewiseAffine { .. } => "piecewise_affine",
        }
    }
}

pub const CONTRAST_GAIN: (f32, f32) = (0.7, 1.3);
pub const MAX_BLUR_SIGMA: f32 = 1.5;
pub const CROP_FRACTION: (f32, f32) = (0.9, 1.0);
/// Corner jitter as a fraction of the image width.
pub const PERSPECTIVE_JITTER: f32 = 0.08;
/// Control-point displacement as a fraction of the image height.
pub const PIECEWISE_DISPLACEMENT: f32 = 0.04;
const PIECEWISE_GRID: (usize, usize) = (3, 9);

/// Provenance of one view: the ops applied to each image, in order.
pub type ViewProvenance = Vec<Vec<AugOp>>;

#[derive(Debug, Clone)]
pub struct ViewTriple {
    pub view_mim: ImageBatch,
    pub view_online: ImageBatch,
    pub view_momentum: ImageBatch,
    /// Ordered as `[mim, online, momentum]`.
    pub provenance: [ViewProvenance; 3],
}

/// Draws the op list for one `h x w` image; each op is kept with probability `prob`.
pub fn draw_ops(h: usize, w: usize, prob: f64, rng: &mut RandomStream) -> Vec<AugOp> {
    let (hf, wf) = (h as f32, w as f32);
    let mut ops = Vec::new();
    let u = |rng: &mut RandomStream, lo: f32, hi: f32| rng.uniform(lo as f64, hi as f64) as f32;
    if rng.bernoulli(prob) {
        let gain = u(rng, CONTRAST_GAIN.0, CONTRAST_GAIN.1);
        let offset = u(rng, -0.1, 0.1);
        ops.push(AugOp::Contrast { gain, offset });
    }
    if rng.bernoulli(prob) {
        let sigma = u(rng, 0.3, MAX_BLUR_SIGMA);
        ops.push(AugOp::Blur { sigma });
    }
    if rng.bernoulli(prob) {
        let amount = u(rng, 0.2, 1.0);
        ops.push(AugOp::Sharpen { amount });
    }
    if rng.bernoulli(prob) {
        let cw = wf * u(rng, CROP_FRACTION.0, CROP_FRACTION.1);
        let ch = hf * u(rng, CROP_FRACTION.0, CROP_FRACTION.1);
        let x0 = u(rng, 0.0, wf - cw);
        let y0 = u(rng, 0.0, hf - ch);
        ops.push(AugOp::Crop { x0, y0, w: cw, h: ch });
    }
    if rng.bernoulli(prob) {
        let j = PERSPECTIVE_JITTER * wf;
        let base = [(0.0, 0.0), (wf - 1.0, 0.0), (wf - 1.0, hf - 1.0), (0.0, hf - 1.0)];
        let mut corners = [(0.0, 0.0); 4];
        for (c, (bx, by)) in corners.iter_mut().zip(base) {
            // Vertical jitter is bounded by the height so glyphs stay in frame.
            let jy = j.min(0.15 * hf);
            *c = (bx + u(rng, -j, j), by + u(rng, -jy, jy));
        }
        ops.push(AugOp::Perspective { corners });
    }
    if rng.bernoulli(prob) {
        let d = PIECEWISE_DISPLACEMENT * hf;
        let (rows, cols) = PIECEWISE_GRID;
        let disp = (0..rows * cols).map(|_| (u(rng, -d, d), u(rng, -d, d))).collect();
        ops.push(AugOp::PiecewiseAffine { rows, cols, disp });
    }
    ops
}

/// Applies `ops` in order to one `[3, h, w]` image and clips to `[0, 1]`.
pub fn apply_ops(image: &[f32], h: usize, w: usize, ops: &[AugOp]) -> Vec<f32> {
    let mut img = image.to_vec();
    for op in ops {
        img = match op {
            AugOp::Contrast { gain, offset } => linear_contrast(&img, *gain, *offset),
            AugOp::Blur { sigma } => gaussian_blur(&img, h, w, *sigma),
            AugOp::Sharpen { amount } => sharpen(&img, h, w, *amount),
            AugOp::Crop { x0, y0, w: cw, h: ch } => {
                let (sx, sy) = (cw / w as f32, ch / h as f32);
                warp(&img, h, w, |x, y| {
                    (x0 + (x + 0.5) * sx - 0.5, y0 + (y + 0.5) * sy - 0.5)
                })
            }
            AugOp::Perspective { corners } => {
                let hm = homography(h, w, corners);
                warp(&img, h, w, |x, y| {
                    let den = hm[6] * x + hm[7] * y + 1.0;
                    (
                        (hm[0] * x + hm[1] * y + hm[2]) / den,
                        (hm[3] * x + hm[4] * y + hm[5]) / den,
                    )
                })
            }
            AugOp::PiecewiseAffine { rows, cols, disp } => warp(&img, h, w, |x, y| {
                let (dx, dy) = piecewise_displacement(x, y, h, w, *rows, *cols, disp);
                (x + dx, y + dy)
            }),
        };
        for v in img.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    img
}

/// `gain * x + offset + (1 - gain) / 2`: contrast about mid-grey, exact identity at (1, 0).
pub fn linear_contrast(img: &[f32], gain: f32, offset: f32) -> Vec<f32> {
    let shift = offset + (1.0 - gain) * 0.5;
    img.iter().map(|v| (gain * v + shift).clamp(0.0, 1.0)).collect()
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let sigma = sigma.clamp(1e-3, MAX_BLUR_SIGMA);
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let plane = h * w;
    let mut tmp = vec![0.0f32; img.len()];
    let mut out = vec![0.0f32; img.len()];
    for c in 0..img.len() / plane {
        let src = &img[c * plane..(c + 1) * plane];
        let t = &mut tmp[c * plane..(c + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * src[y * w + xx];
                }
                t[y * w + x] = acc;
            }
        }
        let o = &mut out[c * plane..(c + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * t[yy * w + x];
                }
                o[y * w + x] = acc;
            }
        }
    }
    out
}

/// Unsharp mask: `x + amount * (x - blur(x))`.
pub fn sharpen(img: &[f32], h: usize, w: usize, amount: f32) -> Vec<f32> {
    let b = gaussian_blur(img, h, w, 1.0);
    img.iter()
        .zip(&b)
        .map(|(x, bx)| (x + amount * (x - bx)).clamp(0.0, 1.0))
        .collect()
}

fn sample_bilinear(plane: &[f32], h: usize, w: usize, x: f32, y: f32) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f32);
    let y = y.clamp(0.0, (h - 1) as f32);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f32, y - y0 as f32);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Inverse warp: output pixel `(x, y)` reads the source at `map(x, y)`.
fn warp(img: &[f32], h: usize, w: usize, map: impl Fn(f32, f32) -> (f32, f32)) -> Vec<f32> {
    let plane = h * w;
    let coords: Vec<(f32, f32)> = (0..plane).map(|i| map((i % w) as f32, (i / w) as f32)).collect();
    let mut out = vec![0.0f32; img.len()];
    for c in 0..img.len() / plane {
        let src = &img[c * plane..(c + 1) * plane];
        for (i, (sx, sy)) in coords.iter().enumerate() {
            out[c * plane + i] = sample_bilinear(src, h, w, *sx, *sy);
        }
    }
    out
}

/// Homography taking the output corners onto `corners`, as the eight free entries.
fn homography(h: usize, w: usize, corners: &[(f32, f32); 4]) -> [f32; 8] {
    let (wf, hf) = ((w - 1) as f64, (h - 1) as f64);
    let src = [(0.0, 0.0), (wf, 0.0), (wf, hf), (0.0, hf)];
    let mut a = [[0.0f64; 9]; 8];
    for (i, ((x, y), (u, v))) in src.iter().zip(corners).enumerate() {
        let (u, v) = (*u as f64, *v as f64);
        a[2 * i] = [*x, *y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, *x, *y, 1.0, -v * x, -v * y, v];
    }
    // Gauss-Jordan with partial pivoting on the augmented 8x9 system.
    for col in 0..8 {
        let piv = (col..8)
            .max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))
            .expect("non-empty range");
        a.swap(col, piv);
        let d = a[col][col];
        for v in a[col].iter_mut() {
            *v /= d;
        }
        for r in 0..8 {
            if r != col {
                let f = a[r][col];
                let pivot_row = a[col];
                for (v, p) in a[r].iter_mut().zip(pivot_row) {
                    *v -= f * p;
                }
            }
        }
    }
    let mut hm = [0.0f32; 8];
    for (i, v) in hm.iter_mut().enumerate() {
        *v = a[i][8] as f32;
    }
    hm
}

/// Displacement at `(x, y)`, linear inside each of the two triangles of a grid cell.
fn piecewise_displacement(
    x: f32,
    y: f32,
    h: usize,
    w: usize,
    rows: usize,
    cols: usize,
    disp: &[(f32, f32)],
) -> (f32, f32) {
    let gx = x / (w - 1).max(1) as f32 * (cols - 1) as f32;
    let gy = y / (h - 1).max(1) as f32 * (rows - 1) as f32;
    let (cx, cy) = ((gx.floor() as usize).min(cols - 2), (gy.floor() as usize).min(rows - 2));
    let (u, v) = (gx - cx as f32, gy - cy as f32);
    let at = |r: usize, c: usize| disp[r * cols + c];
    let (d00, d10, d01, d11) = (at(cy, cx), at(cy, cx + 1), at(cy + 1, cx), at(cy + 1, cx + 1));
    let lerp = |a: f32, b: f32, c: f32, s: f32, t: f32| a + s * (b - a) + t * (c - a);
    if u + v <= 1.0 {
        (lerp(d00.0, d10.0, d01.0, u, v), lerp(d00.1, d10.1, d01.1, u, v))
    } else {
        let (s, t) = (1.0 - v, 1.0 - u);
        (lerp(d11.0, d01.0, d10.0, s, t), lerp(d11.1, d01.1, d10.1, s, t))
    }
}

/// Independently augments every image of `batch`.
pub fn augment_view(batch: &ImageBatch, prob: f64, rng: &mut RandomStream) -> (ImageBatch, ViewProvenance) {
    let (b, _, h, w) = batch.shape();
    let mut pixels = Vec::with_capacity(batch.pixels.len());
    let mut provenance = Vec::with_capacity(b);
    for i in 0..b {
        let ops = draw_ops(h, w, prob, rng);
        pixels.extend(apply_ops(batch.image(i), h, w, &ops));
        provenance.push(ops);
    }
    (batch.with_pixels(pixels), provenance)
}

/// Three independent views: one for reconstruction, two for contrast.
pub fn make_views(batch: &ImageBatch, prob: f64, rng: &mut RandomStream) -> ViewTriple {
    let (view_mim, p0) = augment_view(batch, prob, rng);
    let (view_online, p1) = augment_view(batch, prob, rng);
    let (view_momentum, p2) = augment_view(batch, prob, rng);
    ViewTriple {
        view_mim,
        view_online,
        view_momentum,
        provenance: [p0, p1, p2],
    }
}
