//! Numeric kernels shared by the autograd graph and the data pipeline.
//!
//! All kernels are single-threaded and reduce in a fixed order, so results
//! are bitwise reproducible.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_dim(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad - kernel) / self.stride + 1
    }
}

/// `c = a · b` (accumulated into `c` when `beta` is 1).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices fully contained in the slices,
    // which callers size as m×k, k×n and m×n.
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

#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let p = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for (ox, slot) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *slot = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[base + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    dst: &mut [f64],
) {
    let p = oh * ow;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = ci * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(k: usize, g: ConvGeom) -> bool {
    k == 1 && g.stride == 1 && g.pad == 0
}

/// 2-d cross-correlation. `input` is `[N, Ci, H, W]`, `weight` `[Co, Ci, k, k]`.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeom) -> Tensor {
    let (n, ci, h, w) = input.dims4();
    let (co, wci, k, _) = weight.dims4();
    assert_eq!(ci, wci, "conv2d channel mismatch");
    let (oh, ow) = (g.out_dim(h, k), g.out_dim(w, k));
    let (kk, p) = (ci * k * k, oh * ow);
    let mut out = vec![0.0; n * co * p];
    let mut cols = if is_pointwise(k, g) { Vec::new() } else { vec![0.0; kk * p] };
    for b in 0..n {
        let src = &input.data()[b * ci * h * w..(b + 1) * ci * h * w];
        let cols_ref: &[f64] = if is_pointwise(k, g) {
            src
        } else {
            im2col(src, ci, h, w, k, g, oh, ow, &mut cols);
            &cols
        };
        let dst = &mut out[b * co * p..(b + 1) * co * p];
        if let Some(bias) = bias {
            for (o, row) in dst.chunks_mut(p).enumerate() {
                row.fill(bias.data()[o]);
            }
        }
        gemm(
            co,
            kk,
            p,
            weight.data(),
            (kk as isize, 1),
            cols_ref,
            (p as isize, 1),
            1.0,
            dst,
        );
    }
    Tensor::from_vec(&[n, co, oh, ow], out).expect("conv2d output size")
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    g: ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads {
    let (n, ci, h, w) = input.dims4();
    let (co, _, k, _) = weight.dims4();
    let (_, _, oh, ow) = grad_out.dims4();
    let (kk, p) = (ci * k * k, oh * ow);
    let (need_x, need_w, need_b) = need;
    let pointwise = is_pointwise(k, g);

    let mut dx = need_x.then(|| vec![0.0; input.len()]);
    let mut dw = need_w.then(|| vec![0.0; weight.len()]);
    let mut db = need_b.then(|| vec![0.0; co]);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; kk * p] };
    let mut dcols = if need_x && !pointwise { vec![0.0; kk * p] } else { Vec::new() };

    for b in 0..n {
        let go = &grad_out.data()[b * co * p..(b + 1) * co * p];
        if let Some(db) = db.as_mut() {
            for (o, row) in go.chunks(p).enumerate() {
                db[o] += row.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let src = &input.data()[b * ci * h * w..(b + 1) * ci * h * w];
            let cols_ref: &[f64] = if pointwise {
                src
            } else {
                im2col(src, ci, h, w, k, g, oh, ow, &mut cols);
                &cols
            };
            gemm(co, p, kk, go, (p as isize, 1), cols_ref, (1, p as isize), 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[b * ci * h * w..(b + 1) * ci * h * w];
            if pointwise {
                gemm(kk, co, p, weight.data(), (1, kk as isize), go, (p as isize, 1), 1.0, dst);
            } else {
                gemm(
                    kk,
                    co,
                    p,
                    weight.data(),
                    (1, kk as isize),
                    go,
                    (p as isize, 1),
                    0.0,
                    &mut dcols,
                );
                col2im(&dcols, ci, h, w, k, g, oh, ow, dst);
            }
        }
    }
    ConvGrads {
        input: dx.map(|d| Tensor::from_vec(input.shape(), d).unwrap()),
        weight: dw.map(|d| Tensor::from_vec(weight.shape(), d).unwrap()),
        bias: db.map(|d| Tensor::from_vec(&[co], d).unwrap()),
    }
}

/// Per-axis source taps for half-pixel bilinear resampling.
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling of the last two axes of a `[N, C, H, W]` tensor.
pub fn resize_bilinear(input: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = input.dims4();
    if (h, w) == (oh, ow) {
        return input.clone();
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in input.data().chunks(h * w) {
        for &(y0, y1, ly) in &ty {
            for &(x0, x1, lx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
                let bot = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
                out.push(top * (1.0 - ly) + bot * ly);
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out).unwrap()
}

pub fn resize_bilinear_backward(grad_out: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c, oh, ow) = grad_out.dims4();
    if (h, w) == (oh, ow) {
        return grad_out.clone();
    }
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![0.0; n * c * h * w];
    for (plane, go) in dx.chunks_mut(h * w).zip(grad_out.data().chunks(oh * ow)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let gv = go[oy * ow + ox];
                plane[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                plane[y0 * w + x1] += gv * (1.0 - ly) * lx;
                plane[y1 * w + x0] += gv * ly * (1.0 - lx);
                plane[y1 * w + x1] += gv * ly * lx;
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], dx).unwrap()
}

/// Nearest-neighbour resampling of a 2-d plane (`src = floor(dst · in / out)`).
pub fn resize_nearest_2d(input: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w) = input.dims2();
    let mut out = Tensor::zeros(&[oh, ow]);
    for y in 0..oh {
        let sy = (y * h / oh).min(h - 1);
        for x in 0..ow {
            let sx = (x * w / ow).min(w - 1);
            out.set2(y, x, input.get2(sy, sx));
        }
    }
    out
}

/// Bilinear resampling of a 2-d plane.
pub fn resize_bilinear_2d(input: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (h, w) = input.dims2();
    let as4 = input.clone().reshape(&[1, 1, h, w]).unwrap();
    resize_bilinear(&as4, oh, ow).reshape(&[oh, ow]).unwrap()
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, per output
/// element, the flat index of the winning input element.
pub fn maxpool2(input: &Tensor) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = input.dims4();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let data = input.data();
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                arg.push(best);
            }
        }
    }
    (Tensor::from_vec(&[n, c, oh, ow], out).unwrap(), arg)
}
