//! Raw compute kernels for the convolutional ops.
//!
//! All kernels operate on flat `[B, C, H, W]` row-major buffers. Inner
//! loops run over contiguous rows so the compiler can vectorize them.
//! Parallel kernels split work into disjoint output regions with a fixed
//! decomposition (per output plane or per output channel), and every
//! accumulation order is independent of the thread count, so results are
//! bit-identical no matter how many workers run.

use rayon::prelude::*;

/// 3x3 convolution, stride 1, zero padding 1.
/// `input`: [b, cin, h, w], `weight`: [cout, cin, 3, 3], `bias`: [cout].
pub fn conv3_forward(
    input: &[f32],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    cout: usize,
    bias: &[f32],
) -> Vec<f32> {
    let hw = h * w;
    let mut out = vec![0f32; b * cout * hw];
    out.par_chunks_mut(hw).enumerate().for_each(|(plane_idx, plane)| {
        let bi = plane_idx / cout;
        let k = plane_idx % cout;
        plane.fill(bias[k]);
        for c in 0..cin {
            let xp = &input[(bi * cin + c) * hw..][..hw];
            let wk = &weight[(k * cin + c) * 9..][..9];
            for dy in 0..3 {
                let (y0, y1) = tap_range(h, dy);
                for dx in 0..3 {
                    let wv = wk[dy * 3 + dx];
                    let (x0, x1) = tap_range(w, dx);
                    for y in y0..y1 {
                        let iy = y + dy - 1;
                        let orow = &mut plane[y * w + x0..y * w + x1];
                        let irow = &xp[iy * w + x0 + dx - 1..iy * w + x1 + dx - 1];
                        for (o, i) in orow.iter_mut().zip(irow) {
                            *o += wv * *i;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Output row/column range for which input index `pos + tap - 1` stays in
/// bounds, for a 3-tap kernel with padding 1.
#[inline]
fn tap_range(n: usize, tap: usize) -> (usize, usize) {
    match tap {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n - 1),
    }
}

/// Gradient w.r.t. the input of [`conv3_forward`].
pub fn conv3_backward_input(
    grad_out: &[f32],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    cout: usize,
) -> Vec<f32> {
    let hw = h * w;
    let mut grad_in = vec![0f32; b * cin * hw];
    grad_in.par_chunks_mut(hw).enumerate().for_each(|(plane_idx, dplane)| {
        let bi = plane_idx / cin;
        let c = plane_idx % cin;
        for k in 0..cout {
            let gp = &grad_out[(bi * cout + k) * hw..][..hw];
            let wk = &weight[(k * cin + c) * 9..][..9];
            for dy in 0..3 {
                let (y0, y1) = tap_range(h, dy);
                for dx in 0..3 {
                    let wv = wk[dy * 3 + dx];
                    let (x0, x1) = tap_range(w, dx);
                    for y in y0..y1 {
                        let iy = y + dy - 1;
                        let grow = &gp[y * w + x0..y * w + x1];
                        let drow = &mut dplane[iy * w + x0 + dx - 1..iy * w + x1 + dx - 1];
                        for (d, g) in drow.iter_mut().zip(grow) {
                            *d += wv * *g;
                        }
                    }
                }
            }
        }
    });
    grad_in
}

/// Gradients w.r.t. weight and bias of [`conv3_forward`].
/// Parallel over output channels: each channel owns its own weight and
/// bias slices, so no cross-thread accumulation happens.
pub fn conv3_backward_params(
    grad_out: &[f32],
    input: &[f32],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
) -> (Vec<f32>, Vec<f32>) {
    let hw = h * w;
    let mut grad_w = vec![0f32; cout * cin * 9];
    let mut grad_b = vec![0f32; cout];
    grad_w
        .par_chunks_mut(cin * 9)
        .zip(grad_b.par_iter_mut())
        .enumerate()
        .for_each(|(k, (gwk, gbk))| {
            let mut bias_acc = 0f64;
            for bi in 0..b {
                let gp = &grad_out[(bi * cout + k) * hw..][..hw];
                bias_acc += gp.iter().map(|v| *v as f64).sum::<f64>();
                for c in 0..cin {
                    let xp = &input[(bi * cin + c) * hw..][..hw];
                    for dy in 0..3 {
                        let (y0, y1) = tap_range(h, dy);
                        for dx in 0..3 {
                            let (x0, x1) = tap_range(w, dx);
                            let mut acc = 0f64;
                            for y in y0..y1 {
                                let iy = y + dy - 1;
                                let grow = &gp[y * w + x0..y * w + x1];
                                let irow = &xp[iy * w + x0 + dx - 1..iy * w + x1 + dx - 1];
                                let mut row = 0f32;
                                for (g, i) in grow.iter().zip(irow) {
                                    row += *g * *i;
                                }
                                acc += row as f64;
                            }
                            gwk[c * 9 + dy * 3 + dx] += acc as f32;
                        }
                    }
                }
            }
            *gbk = bias_acc as f32;
        });
    (grad_w, grad_b)
}

/// 1x1 convolution (per-pixel linear map across channels).
/// `weight`: [cout, cin], `bias`: [cout].
pub fn conv1_forward(
    input: &[f32],
    b: usize,
    cin: usize,
    hw: usize,
    weight: &[f32],
    cout: usize,
    bias: &[f32],
) -> Vec<f32> {
    let mut out = vec![0f32; b * cout * hw];
    out.par_chunks_mut(hw).enumerate().for_each(|(plane_idx, plane)| {
        let bi = plane_idx / cout;
        let k = plane_idx % cout;
        plane.fill(bias[k]);
        for c in 0..cin {
            let wv = weight[k * cin + c];
            let xp = &input[(bi * cin + c) * hw..][..hw];
            for (o, i) in plane.iter_mut().zip(xp) {
                *o += wv * *i;
            }
        }
    });
    out
}

pub fn conv1_backward_input(
    grad_out: &[f32],
    b: usize,
    cin: usize,
    hw: usize,
    weight: &[f32],
    cout: usize,
) -> Vec<f32> {
    let mut grad_in = vec![0f32; b * cin * hw];
    grad_in.par_chunks_mut(hw).enumerate().for_each(|(plane_idx, dplane)| {
        let bi = plane_idx / cin;
        let c = plane_idx % cin;
        for k in 0..cout {
            let wv = weight[k * cin + c];
            let gp = &grad_out[(bi * cout + k) * hw..][..hw];
            for (d, g) in dplane.iter_mut().zip(gp) {
                *d += wv * *g;
            }
        }
    });
    grad_in
}

pub fn conv1_backward_params(
    grad_out: &[f32],
    input: &[f32],
    b: usize,
    cin: usize,
    hw: usize,
    cout: usize,
) -> (Vec<f32>, Vec<f32>) {
    let mut grad_w = vec![0f32; cout * cin];
    let mut grad_b = vec![0f32; cout];
    grad_w
        .par_chunks_mut(cin)
        .zip(grad_b.par_iter_mut())
        .enumerate()
        .for_each(|(k, (gwk, gbk))| {
            let mut bias_acc = 0f64;
            for bi in 0..b {
                let gp = &grad_out[(bi * cout + k) * hw..][..hw];
                bias_acc += gp.iter().map(|v| *v as f64).sum::<f64>();
                for c in 0..cin {
                    let xp = &input[(bi * cin + c) * hw..][..hw];
                    let mut acc = 0f64;
                    for (g, i) in gp.iter().zip(xp) {
                        acc += (*g * *i) as f64;
                    }
                    gwk[c] += acc as f32;
                }
            }
            *gbk = bias_acc as f32;
        });
    (grad_w, grad_b)
}

/// 2x2 max pooling, stride 2. Returns pooled values and, per output
/// element, the plane-local flat index of the winning input (first
/// maximum in row-major window order on ties).
pub fn maxpool2_forward(
    input: &[f32],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0f32; planes * oh * ow];
    let mut arg = vec![0u32; planes * oh * ow];
    out.par_chunks_mut(oh * ow)
        .zip(arg.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(p, (oplane, aplane))| {
            let xp = &input[p * h * w..][..h * w];
            for y in 0..oh {
                for x in 0..ow {
                    let mut best_idx = (2 * y) * w + 2 * x;
                    let mut best = xp[best_idx];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = (2 * y + dy) * w + 2 * x + dx;
                        if xp[idx] > best {
                            best = xp[idx];
                            best_idx = idx;
                        }
                    }
                    oplane[y * ow + x] = best;
                    aplane[y * ow + x] = best_idx as u32;
                }
            }
        });
    (out, arg)
}

pub fn maxpool2_backward(
    grad_out: &[f32],
    arg: &[u32],
    planes: usize,
    h: usize,
    w: usize,
) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut grad_in = vec![0f32; planes * h * w];
    grad_in.par_chunks_mut(h * w).enumerate().for_each(|(p, dplane)| {
        let gp = &grad_out[p * oh * ow..][..oh * ow];
        let ap = &arg[p * oh * ow..][..oh * ow];
        for (g, a) in gp.iter().zip(ap) {
            dplane[*a as usize] += *g;
        }
    });
    grad_in
}

/// 2x2 transposed convolution, stride 2 (doubles spatial size).
/// `input`: [b, cin, h, w], `weight`: [cin, cout, 2, 2], `bias`: [cout],
/// output: [b, cout, 2h, 2w].
pub fn upconv2_forward(
    input: &[f32],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    cout: usize,
    bias: &[f32],
) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0f32; b * cout * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane_idx, oplane)| {
        let bi = plane_idx / cout;
        let j = plane_idx % cout;
        oplane.fill(bias[j]);
        for c in 0..cin {
            let xp = &input[(bi * cin + c) * h * w..][..h * w];
            for dy in 0..2 {
                for dx in 0..2 {
                    let wv = weight[((c * cout + j) * 2 + dy) * 2 + dx];
                    for y in 0..h {
                        let irow = &xp[y * w..y * w + w];
                        let orow = &mut oplane[(2 * y + dy) * ow + dx..];
                        for (x, i) in irow.iter().enumerate() {
                            orow[2 * x] += wv * *i;
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn upconv2_backward_input(
    grad_out: &[f32],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    cout: usize,
) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut grad_in = vec![0f32; b * cin * h * w];
    grad_in.par_chunks_mut(h * w).enumerate().for_each(|(plane_idx, dplane)| {
        let bi = plane_idx / cin;
        let c = plane_idx % cin;
        for j in 0..cout {
            let gp = &grad_out[(bi * cout + j) * oh * ow..][..oh * ow];
            for dy in 0..2 {
                for dx in 0..2 {
                    let wv = weight[((c * cout + j) * 2 + dy) * 2 + dx];
                    for y in 0..h {
                        let drow = &mut dplane[y * w..y * w + w];
                        let grow = &gp[(2 * y + dy) * ow + dx..];
                        for (x, d) in drow.iter_mut().enumerate() {
                            *d += wv * grow[2 * x];
                        }
                    }
                }
            }
        }
    });
    grad_in
}

pub fn upconv2_backward_params(
    grad_out: &[f32],
    input: &[f32],
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
) -> (Vec<f32>, Vec<f32>) {
    let (oh, ow) = (2 * h, 2 * w);
    let mut grad_w = vec![0f32; cin * cout * 4];
    grad_w.par_chunks_mut(4).enumerate().for_each(|(cj, gw4)| {
        let c = cj / cout;
        let j = cj % cout;
        for dy in 0..2 {
            for dx in 0..2 {
                let mut acc = 0f64;
                for bi in 0..b {
                    let xp = &input[(bi * cin + c) * h * w..][..h * w];
                    let gp = &grad_out[(bi * cout + j) * oh * ow..][..oh * ow];
                    for y in 0..h {
                        let irow = &xp[y * w..y * w + w];
                        let grow = &gp[(2 * y + dy) * ow + dx..];
                        let mut row = 0f32;
                        for (x, i) in irow.iter().enumerate() {
                            row += *i * grow[2 * x];
                        }
                        acc += row as f64;
                    }
                }
                gw4[dy * 2 + dx] = acc as f32;
            }
        }
    });
    let mut grad_b = vec![0f32; cout];
    grad_b.par_iter_mut().enumerate().for_each(|(j, gb)| {
        let mut acc = 0f64;
        for bi in 0..b {
            let gp = &grad_out[(bi * cout + j) * oh * ow..][..oh * ow];
            acc += gp.iter().map(|v| *v as f64).sum::<f64>();
        }
        *gb = acc as f32;
    });
    (grad_w, grad_b)
}
