//! 3x3 same-padding convolution primitives over channel-major f64 planes.
//!
//! Weight layout is `[out_channel][in_channel][ky*3+kx]`. Inputs are padded
//! by one pixel of zeros into scratch buffers so the inner loops stay
//! branch-free and vectorizable.

/// Copy `planes` channel planes of `h*w` into `(h+2)*(w+2)` zero-padded
/// scratch.
pub fn pad_planes(input: &[f64], planes: usize, h: usize, w: usize, padded: &mut Vec<f64>) {
    let (ph, pw) = (h + 2, w + 2);
    padded.clear();
    padded.resize(planes * ph * pw, 0.0);
    for c in 0..planes {
        let src = &input[c * h * w..(c + 1) * h * w];
        let dst = &mut padded[c * ph * pw..(c + 1) * ph * pw];
        for y in 0..h {
            dst[(y + 1) * pw + 1..(y + 1) * pw + 1 + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
}

/// `out[co] = bias[co] + sum_ci input[ci] * kernel[co][ci]`; `padded` must
/// hold the padded input planes.
pub fn forward(
    padded: &[f64],
    in_ch: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    let pw = w + 2;
    debug_assert_eq!(weights.len(), bias.len() * in_ch * 9);
    debug_assert_eq!(out.len(), bias.len() * h * w);
    for (co, &b) in bias.iter().enumerate() {
        let out_plane = &mut out[co * h * w..(co + 1) * h * w];
        out_plane.fill(b);
        for ci in 0..in_ch {
            let k = &weights[(co * in_ch + ci) * 9..(co * in_ch + ci) * 9 + 9];
            let pad_plane = &padded[ci * (h + 2) * pw..(ci + 1) * (h + 2) * pw];
            for y in 0..h {
                let p0 = &pad_plane[y * pw..y * pw + pw];
                let p1 = &pad_plane[(y + 1) * pw..(y + 1) * pw + pw];
                let p2 = &pad_plane[(y + 2) * pw..(y + 2) * pw + pw];
                let row = &mut out_plane[y * w..(y + 1) * w];
                for x in 0..w {
                    row[x] += k[0] * p0[x]
                        + k[1] * p0[x + 1]
                        + k[2] * p0[x + 2]
                        + k[3] * p1[x]
                        + k[4] * p1[x + 1]
                        + k[5] * p1[x + 2]
                        + k[6] * p2[x]
                        + k[7] * p2[x + 1]
                        + k[8] * p2[x + 2];
                }
            }
        }
    }
}

/// Gradient with respect to the convolution input: correlation of the padded
/// output gradient with the spatially flipped kernels, summed over output
/// channels. `padded_grad_out` must hold the padded grad-output planes.
pub fn backward_input(
    padded_grad_out: &[f64],
    out_ch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    weights: &[f64],
    grad_in: &mut [f64],
) {
    let pw = w + 2;
    grad_in.fill(0.0);
    for ci in 0..in_ch {
        let gi_plane = &mut grad_in[ci * h * w..(ci + 1) * h * w];
        for co in 0..out_ch {
            let k = &weights[(co * in_ch + ci) * 9..(co * in_ch + ci) * 9 + 9];
            let pad_plane = &padded_grad_out[co * (h + 2) * pw..(co + 1) * (h + 2) * pw];
            for y in 0..h {
                let p0 = &pad_plane[y * pw..y * pw + pw];
                let p1 = &pad_plane[(y + 1) * pw..(y + 1) * pw + pw];
                let p2 = &pad_plane[(y + 2) * pw..(y + 2) * pw + pw];
                let row = &mut gi_plane[y * w..(y + 1) * w];
                for x in 0..w {
                    row[x] += k[8] * p0[x]
                        + k[7] * p0[x + 1]
                        + k[6] * p0[x + 2]
                        + k[5] * p1[x]
                        + k[4] * p1[x + 1]
                        + k[3] * p1[x + 2]
                        + k[2] * p2[x]
                        + k[1] * p2[x + 1]
                        + k[0] * p2[x + 2];
                }
            }
        }
    }
}

/// Gradients with respect to kernel weights and bias. `padded_input` must
/// hold the padded forward input planes.
#[allow(clippy::too_many_arguments)]
pub fn backward_params(
    grad_out: &[f64],
    out_ch: usize,
    padded_input: &[f64],
    in_ch: usize,
    h: usize,
    w: usize,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    let pw = w + 2;
    for co in 0..out_ch {
        let go_plane = &grad_out[co * h * w..(co + 1) * h * w];
        grad_b[co] += go_plane.iter().sum::<f64>();
        for ci in 0..in_ch {
            let pad_plane = &padded_input[ci * (h + 2) * pw..(ci + 1) * (h + 2) * pw];
            let mut acc = [0.0f64; 9];
            for y in 0..h {
                let g = &go_plane[y * w..(y + 1) * w];
                let p0 = &pad_plane[y * pw..y * pw + pw];
                let p1 = &pad_plane[(y + 1) * pw..(y + 1) * pw + pw];
                let p2 = &pad_plane[(y + 2) * pw..(y + 2) * pw + pw];
                for x in 0..w {
                    let gv = g[x];
                    acc[0] += gv * p0[x];
                    acc[1] += gv * p0[x + 1];
                    acc[2] += gv * p0[x + 2];
                    acc[3] += gv * p1[x];
                    acc[4] += gv * p1[x + 1];
                    acc[5] += gv * p1[x + 2];
                    acc[6] += gv * p2[x];
                    acc[7] += gv * p2[x + 1];
                    acc[8] += gv * p2[x + 2];
                }
            }
            let gw = &mut grad_w[(co * in_ch + ci) * 9..(co * in_ch + ci) * 9 + 9];
            for (dst, a) in gw.iter_mut().zip(acc) {
                *dst += a;
            }
        }
    }
}
