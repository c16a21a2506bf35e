//! 1-D convolution kernels (forward and backward) backed by im2col + sgemm.
//!
//! Layouts, all row-major:
//! * activations `[B, C, T]`
//! * `conv1d` weight `[C_out, C_in, K]`
//! * `conv_transpose1d` weight `[C_in, C_out, K]`
//! * bias `[C_out]`

use matrixmultiply::sgemm;

pub fn conv_out_len(t: usize, k: usize, stride: usize, pad: usize) -> usize {
    (t + 2 * pad).saturating_sub(k) / stride + 1
}

pub fn conv_t_out_len(t: usize, k: usize, stride: usize, pad: usize) -> usize {
    (t - 1) * stride + k - 2 * pad
}

/// cols[(ci * k + j), to] = x[ci, to * stride + j - pad]
fn im2col(x: &[f32], c_in: usize, t: usize, k: usize, stride: usize, pad: usize, cols: &mut [f32]) {
    let t_out = conv_out_len(t, k, stride, pad);
    debug_assert_eq!(cols.len(), c_in * k * t_out);
    for ci in 0..c_in {
        let xrow = &x[ci * t..(ci + 1) * t];
        for j in 0..k {
            let row = &mut cols[(ci * k + j) * t_out..(ci * k + j + 1) * t_out];
            for (to, slot) in row.iter_mut().enumerate() {
                let src = (to * stride + j) as isize - pad as isize;
                *slot = if src >= 0 && (src as usize) < t {
                    xrow[src as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

/// x[ci, to * stride + j - pad] += cols[(ci * k + j), to]
fn col2im_add(
    cols: &[f32],
    c_in: usize,
    t: usize,
    k: usize,
    stride: usize,
    pad: usize,
    x: &mut [f32],
) {
    let t_out = conv_out_len(t, k, stride, pad);
    for ci in 0..c_in {
        let xrow = &mut x[ci * t..(ci + 1) * t];
        for j in 0..k {
            let row = &cols[(ci * k + j) * t_out..(ci * k + j + 1) * t_out];
            for (to, &v) in row.iter().enumerate() {
                let dst = (to * stride + j) as isize - pad as isize;
                if dst >= 0 && (dst as usize) < t {
                    xrow[dst as usize] += v;
                }
            }
        }
    }
}

/// y = w * im2col(x) + bias, one batch item at a time.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_forward(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    b: usize,
    c_in: usize,
    t: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    y: &mut [f32],
) {
    let t_out = conv_out_len(t, k, stride, pad);
    let ck = c_in * k;
    let mut cols = vec![0.0f32; ck * t_out];
    for bi in 0..b {
        im2col(&x[bi * c_in * t..(bi + 1) * c_in * t], c_in, t, k, stride, pad, &mut cols);
        let out = &mut y[bi * c_out * t_out..(bi + 1) * c_out * t_out];
        unsafe {
            sgemm(
                c_out, ck, t_out, 1.0,
                w.as_ptr(), ck as isize, 1,
                cols.as_ptr(), t_out as isize, 1,
                0.0,
                out.as_mut_ptr(), t_out as isize, 1,
            );
        }
        if let Some(bias) = bias {
            for co in 0..c_out {
                let bv = bias[co];
                for v in &mut out[co * t_out..(co + 1) * t_out] {
                    *v += bv;
                }
            }
        }
    }
}

/// Accumulates input/weight/bias gradients for conv1d.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    x: &[f32],
    w: &[f32],
    gy: &[f32],
    b: usize,
    c_in: usize,
    t: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gx: Option<&mut [f32]>,
    gw: Option<&mut [f32]>,
    mut gbias: Option<&mut [f32]>,
) {
    let t_out = conv_out_len(t, k, stride, pad);
    let ck = c_in * k;
    let mut cols = vec![0.0f32; ck * t_out];
    let mut gcols = vec![0.0f32; ck * t_out];
    let mut gx = gx;
    let mut gw = gw;
    for bi in 0..b {
        let gyb = &gy[bi * c_out * t_out..(bi + 1) * c_out * t_out];
        if let Some(gw) = gw.as_deref_mut() {
            im2col(&x[bi * c_in * t..(bi + 1) * c_in * t], c_in, t, k, stride, pad, &mut cols);
            // gw[c_out, ck] += gy[c_out, t_out] x cols^T
            unsafe {
                sgemm(
                    c_out, t_out, ck, 1.0,
                    gyb.as_ptr(), t_out as isize, 1,
                    cols.as_ptr(), 1, t_out as isize,
                    1.0,
                    gw.as_mut_ptr(), ck as isize, 1,
                );
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            // gcols = w^T x gy
            unsafe {
                sgemm(
                    ck, c_out, t_out, 1.0,
                    w.as_ptr(), 1, ck as isize,
                    gyb.as_ptr(), t_out as isize, 1,
                    0.0,
                    gcols.as_mut_ptr(), t_out as isize, 1,
                );
            }
            col2im_add(&gcols, c_in, t, k, stride, pad, &mut gx[bi * c_in * t..(bi + 1) * c_in * t]);
        }
        if let Some(gbias) = gbias.as_deref_mut() {
            for co in 0..c_out {
                gbias[co] += gyb[co * t_out..(co + 1) * t_out].iter().sum::<f32>();
            }
        }
    }
}

/// Transposed convolution: y[co, t*stride + j - pad] += (w^T x)[co*k + j, t].
#[allow(clippy::too_many_arguments)]
pub fn conv_t1d_forward(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    b: usize,
    c_in: usize,
    t: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    y: &mut [f32],
) {
    let t_out = conv_t_out_len(t, k, stride, pad);
    let ck = c_out * k;
    let mut cols = vec![0.0f32; ck * t];
    for bi in 0..b {
        let xb = &x[bi * c_in * t..(bi + 1) * c_in * t];
        // cols[ck, t] = w'[ck, c_in] x x[c_in, t], where w'[co*k + j, ci] = w[ci, co*k + j]
        unsafe {
            sgemm(
                ck, c_in, t, 1.0,
                w.as_ptr(), 1, ck as isize,
                xb.as_ptr(), t as isize, 1,
                0.0,
                cols.as_mut_ptr(), t as isize, 1,
            );
        }
        let out = &mut y[bi * c_out * t_out..(bi + 1) * c_out * t_out];
        out.fill(0.0);
        col2im_add(&cols, c_out, t_out, k, stride, pad, out);
        if let Some(bias) = bias {
            for co in 0..c_out {
                let bv = bias[co];
                for v in &mut out[co * t_out..(co + 1) * t_out] {
                    *v += bv;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_t1d_backward(
    x: &[f32],
    w: &[f32],
    gy: &[f32],
    b: usize,
    c_in: usize,
    t: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gx: Option<&mut [f32]>,
    gw: Option<&mut [f32]>,
    mut gbias: Option<&mut [f32]>,
) {
    let t_out = conv_t_out_len(t, k, stride, pad);
    let ck = c_out * k;
    let mut gcols = vec![0.0f32; ck * t];
    let mut gx = gx;
    let mut gw = gw;
    for bi in 0..b {
        let gyb = &gy[bi * c_out * t_out..(bi + 1) * c_out * t_out];
        // gcols = im2col(gy) in the conv1d sense with (t_out -> t) geometry.
        im2col(gyb, c_out, t_out, k, stride, pad, &mut gcols);
        if let Some(gw) = gw.as_deref_mut() {
            // gw'[ck, c_in] += gcols[ck, t] x x^T[t, c_in]; written through
            // the [c_in, ck] layout with swapped output strides.
            let xb = &x[bi * c_in * t..(bi + 1) * c_in * t];
            unsafe {
                sgemm(
                    ck, t, c_in, 1.0,
                    gcols.as_ptr(), t as isize, 1,
                    xb.as_ptr(), 1, t as isize,
                    1.0,
                    gw.as_mut_ptr(), 1, ck as isize,
                );
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            // gx[c_in, t] += w[c_in, ck] x gcols[ck, t]
            let gxb = &mut gx[bi * c_in * t..(bi + 1) * c_in * t];
            unsafe {
                sgemm(
                    c_in, ck, t, 1.0,
                    w.as_ptr(), ck as isize, 1,
                    gcols.as_ptr(), t as isize, 1,
                    1.0,
                    gxb.as_mut_ptr(), t as isize, 1,
                );
            }
        }
        if let Some(gbias) = gbias.as_deref_mut() {
            for co in 0..c_out {
                gbias[co] += gyb[co * t_out..(co + 1) * t_out].iter().sum::<f32>();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv1d(
        x: &[f32], w: &[f32], bias: Option<&[f32]>,
        c_in: usize, t: usize, c_out: usize, k: usize, stride: usize, pad: usize,
    ) -> Vec<f32> {
        let t_out = conv_out_len(t, k, stride, pad);
        let mut y = vec![0.0f32; c_out * t_out];
        for co in 0..c_out {
            for to in 0..t_out {
                let mut acc = bias.map_or(0.0, |b| b[co]);
                for ci in 0..c_in {
                    for j in 0..k {
                        let src = (to * stride + j) as isize - pad as isize;
                        if src >= 0 && (src as usize) < t {
                            acc += x[ci * t + src as usize] * w[(co * c_in + ci) * k + j];
                        }
                    }
                }
                y[co * t_out + to] = acc;
            }
        }
        y
    }

    fn arb(n: usize, seed: u32) -> Vec<f32> {
        (0..n)
            .map(|i| (((i as u32).wrapping_mul(2654435761).wrapping_add(seed * 97)) % 1000) as f32 / 500.0 - 1.0)
            .collect()
    }

    #[test]
    fn conv1d_matches_naive() {
        for (c_in, t, c_out, k, stride, pad) in
            [(1, 20, 3, 5, 1, 2), (2, 24, 4, 8, 4, 2), (3, 30, 2, 9, 5, 2), (2, 16, 2, 1, 1, 0)]
        {
            let x = arb(2 * c_in * t, 1);
            let w = arb(c_out * c_in * k, 2);
            let bias = arb(c_out, 3);
            let t_out = conv_out_len(t, k, stride, pad);
            let mut y = vec![0.0; 2 * c_out * t_out];
            conv1d_forward(&x, &w, Some(&bias), 2, c_in, t, c_out, k, stride, pad, &mut y);
            for bi in 0..2 {
                let want = naive_conv1d(&x[bi * c_in * t..(bi + 1) * c_in * t], &w, Some(&bias), c_in, t, c_out, k, stride, pad);
                for (a, b) in y[bi * c_out * t_out..(bi + 1) * c_out * t_out].iter().zip(&want) {
                    assert!((a - b).abs() < 1e-4, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn conv_t1d_inverts_shape_and_matches_scatter() {
        // Naive scatter reference.
        let (c_in, t, c_out, k, stride, pad) = (3usize, 7usize, 2usize, 8usize, 4usize, 2usize);
        let x = arb(c_in * t, 5);
        let w = arb(c_in * c_out * k, 6);
        let t_out = conv_t_out_len(t, k, stride, pad);
        assert_eq!(t_out, t * stride); // k = 2s, p = s/2 keeps exact upsampling
        let mut want = vec![0.0f32; c_out * t_out];
        for ci in 0..c_in {
            for ti in 0..t {
                for co in 0..c_out {
                    for j in 0..k {
                        let dst = (ti * stride + j) as isize - pad as isize;
                        if dst >= 0 && (dst as usize) < t_out {
                            want[co * t_out + dst as usize] += x[ci * t + ti] * w[(ci * c_out + co) * k + j];
                        }
                    }
                }
            }
        }
        let mut y = vec![0.0f32; c_out * t_out];
        conv_t1d_forward(&x, &w, None, 1, c_in, t, c_out, k, stride, pad, &mut y);
        for (a, b) in y.iter().zip(&want) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn conv1d_gradients_match_finite_differences() {
        let (c_in, t, c_out, k, stride, pad) = (2usize, 12usize, 3usize, 5usize, 2usize, 2usize);
        let b = 2usize;
        let x = arb(b * c_in * t, 7);
        let w = arb(c_out * c_in * k, 8);
        let bias = arb(c_out, 9);
        let t_out = conv_out_len(t, k, stride, pad);

        // Loss: weighted sum of outputs so the gradient is nontrivial.
        let coeff = arb(b * c_out * t_out, 10);
        let loss = |x: &[f32], w: &[f32], bias: &[f32]| -> f32 {
            let mut y = vec![0.0; b * c_out * t_out];
            conv1d_forward(x, w, Some(bias), b, c_in, t, c_out, k, stride, pad, &mut y);
            y.iter().zip(&coeff).map(|(a, c)| a * c).sum()
        };

        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; bias.len()];
        conv1d_backward(&x, &w, &coeff, b, c_in, t, c_out, k, stride, pad, Some(&mut gx), Some(&mut gw), Some(&mut gb));

        let h = 1e-2f32;
        let check = |analytic: &[f32], mut probe: Box<dyn FnMut(usize, f32) -> f32>, n: usize| {
            for i in (0..n).step_by(3) {
                let fd = (probe(i, h) - probe(i, -h)) / (2.0 * h);
                let a = analytic[i];
                assert!((fd - a).abs() <= 0.02 * fd.abs().max(a.abs()) + 3e-3, "i={i} fd={fd} a={a}");
            }
        };
        let (xc, wc, bc) = (x.clone(), w.clone(), bias.clone());
        check(&gx, Box::new({ let (w, bias) = (wc.clone(), bc.clone()); let x = xc.clone(); move |i, d| { let mut xp = x.clone(); xp[i] += d; loss(&xp, &w, &bias) } }), x.len());
        check(&gw, Box::new({ let (x, bias) = (xc.clone(), bc.clone()); let w = wc.clone(); move |i, d| { let mut wp = w.clone(); wp[i] += d; loss(&x, &wp, &bias) } }), w.len());
        check(&gb, Box::new({ let (x, w) = (xc, wc); let bias = bc; move |i, d| { let mut bp = bias.clone(); bp[i] += d; loss(&x, &w, &bp) } }), bias.len());
    }

    #[test]
    fn conv_t1d_gradients_match_finite_differences() {
        let (c_in, t, c_out, k, stride, pad) = (3usize, 6usize, 2usize, 8usize, 4usize, 2usize);
        let b = 2usize;
        let x = arb(b * c_in * t, 11);
        let w = arb(c_in * c_out * k, 12);
        let bias = arb(c_out, 13);
        let t_out = conv_t_out_len(t, k, stride, pad);

        let coeff = arb(b * c_out * t_out, 14);
        let loss = |x: &[f32], w: &[f32], bias: &[f32]| -> f32 {
            let mut y = vec![0.0; b * c_out * t_out];
            conv_t1d_forward(x, w, Some(bias), b, c_in, t, c_out, k, stride, pad, &mut y);
            y.iter().zip(&coeff).map(|(a, c)| a * c).sum()
        };

        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; bias.len()];
        conv_t1d_backward(&x, &w, &coeff, b, c_in, t, c_out, k, stride, pad, Some(&mut gx), Some(&mut gw), Some(&mut gb));

        let h = 1e-2f32;
        for i in (0..x.len()).step_by(2) {
            let mut xp = x.clone(); xp[i] += h;
            let mut xm = x.clone(); xm[i] -= h;
            let fd = (loss(&xp, &w, &bias) - loss(&xm, &w, &bias)) / (2.0 * h);
            assert!((fd - gx[i]).abs() <= 0.02 * fd.abs().max(gx[i].abs()) + 3e-3, "gx i={i}");
        }
        for i in (0..w.len()).step_by(3) {
            let mut wp = w.clone(); wp[i] += h;
            let mut wm = w.clone(); wm[i] -= h;
            let fd = (loss(&x, &wp, &bias) - loss(&x, &wm, &bias)) / (2.0 * h);
            assert!((fd - gw[i]).abs() <= 0.02 * fd.abs().max(gw[i].abs()) + 3e-3, "gw i={i}");
        }
        for i in 0..bias.len() {
            let mut bp = bias.clone(); bp[i] += h;
            let mut bm = bias.clone(); bm[i] -= h;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
            assert!((fd - gb[i]).abs() <= 0.02 * fd.abs().max(gb[i].abs()) + 3e-3, "gb i={i}");
        }
    }
}
