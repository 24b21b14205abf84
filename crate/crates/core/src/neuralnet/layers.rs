//! Convolution, pooling and dense kernels on channel-last buffers.
//!
//! Activations of one sample are stored `[position][channel]`, which makes
//! the im2col matrix of a width-3 convolution a strided view of its input.

use crate::error::{Error, Result};

/// `C = alpha * A B + beta * C` on strided views; bounds are checked here so
/// callers stay safe.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rs: usize, cs: usize, r: usize, cl: usize| (r - 1) * rs + (cl - 1) * cs;
    if k > 0 {
        assert!(last(rsa, csa, m, k) < a.len(), "gemm: A out of bounds");
        assert!(last(rsb, csb, k, n) < b.len(), "gemm: B out of bounds");
    }
    assert!(last(rsc, csc, m, n) < c.len(), "gemm: C out of bounds");
    // SAFETY: every index touched lies inside the slices (checked above) and
    // `c` is exclusively borrowed, so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Valid convolution of a channel-last input.
///
/// `kernel_t` is laid out `[tap][in_channel][out_channel]`; output is
/// `[position][out_channel]` with `len - width + 1` positions.
pub fn conv_forward_cl(
    input: &[f64],
    in_ch: usize,
    kernel_t: &[f64],
    bias: &[f64],
    width: usize,
    out: &mut [f64],
) {
    let out_ch = bias.len();
    let len = input.len() / in_ch;
    let out_len = len + 1 - width;
    for row in out.chunks_exact_mut(out_ch).take(out_len) {
        row.copy_from_slice(bias);
    }
    if in_ch == 1 {
        // Too narrow for a GEMM to pay off.
        for (i, row) in out.chunks_exact_mut(out_ch).take(out_len).enumerate() {
            for k in 0..width {
                let x = input[i + k];
                for (o, v) in row.iter_mut().zip(&kernel_t[k * out_ch..(k + 1) * out_ch]) {
                    *o += x * v;
                }
            }
        }
        return;
    }
    gemm(
        out_len,
        width * in_ch,
        out_ch,
        input,
        (in_ch, 1),
        kernel_t,
        (out_ch, 1),
        1.0,
        out,
        (out_ch, 1),
    );
}

/// Input gradient of [`conv_forward_cl`], accumulated into `d_input`.
pub fn conv_backward_input_cl(
    d_out: &[f64],
    out_ch: usize,
    kernel_t: &[f64],
    in_ch: usize,
    width: usize,
    d_input: &mut [f64],
) {
    let out_len = d_out.len() / out_ch;
    for k in 0..width {
        // d_input[(i + k) * in_ch + c] += sum_o d_out[i][o] * kernel_t[k][c][o]
        gemm(
            out_len,
            out_ch,
            in_ch,
            d_out,
            (out_ch, 1),
            &kernel_t[k * in_ch * out_ch..],
            (1, out_ch),
            1.0,
            &mut d_input[k * in_ch..],
            (in_ch, 1),
        );
    }
}

/// Kernel gradient (`[tap][in][out]`) and bias gradient, accumulated.
pub fn conv_backward_params_cl(
    input: &[f64],
    in_ch: usize,
    d_out: &[f64],
    out_ch: usize,
    width: usize,
    d_kernel_t: &mut [f64],
    d_bias: &mut [f64],
) {
    let out_len = d_out.len() / out_ch;
    for row in d_out.chunks_exact(out_ch) {
        for (b, d) in d_bias.iter_mut().zip(row) {
            *b += d;
        }
    }
    if in_ch == 1 {
        for (i, row) in d_out.chunks_exact(out_ch).enumerate() {
            for k in 0..width {
                let x = input[i + k];
                for (g, d) in d_kernel_t[k * out_ch..(k + 1) * out_ch].iter_mut().zip(row) {
                    *g += x * d;
                }
            }
        }
        return;
    }
    gemm(
        width * in_ch,
        out_len,
        out_ch,
        input,
        (1, in_ch),
        d_out,
        (out_ch, 1),
        1.0,
        d_kernel_t,
        (out_ch, 1),
    );
}

/// Average pooling with size and stride `pool`; a trailing partial window
/// is dropped.
pub fn avgpool_forward_cl(input: &[f64], ch: usize, pool: usize, out: &mut [f64]) {
    let out_len = input.len() / ch / pool;
    let scale = 1.0 / pool as f64;
    for (j, row) in out.chunks_exact_mut(ch).take(out_len).enumerate() {
        row.fill(0.0);
        for s in 0..pool {
            let src = &input[(j * pool + s) * ch..(j * pool + s + 1) * ch];
            for (o, v) in row.iter_mut().zip(src) {
                *o += v;
            }
        }
        for o in row.iter_mut() {
            *o *= scale;
        }
    }
}

/// Spread pooled gradients back; dropped positions receive zero.
pub fn avgpool_backward_cl(d_out: &[f64], ch: usize, pool: usize, d_input: &mut [f64]) {
    d_input.fill(0.0);
    let scale = 1.0 / pool as f64;
    for (j, row) in d_out.chunks_exact(ch).enumerate() {
        for s in 0..pool {
            let dst = &mut d_input[(j * pool + s) * ch..(j * pool + s + 1) * ch];
            for (d, g) in dst.iter_mut().zip(row) {
                *d = g * scale;
            }
        }
    }
}

pub fn relu_in_place(values: &mut [f64]) {
    for v in values {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zero the gradient wherever the activation was clipped.
pub fn relu_backward_in_place(activation: &[f64], grad: &mut [f64]) {
    for (g, a) in grad.iter_mut().zip(activation) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Softmax of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Valid cross-correlation on a channel-major input (`channels x length`)
/// with kernels laid out `[out][in][width]`; output is channel-major.
pub fn conv1d_forward(
    input: &[f64],
    in_ch: usize,
    kernels: &[f64],
    biases: &[f64],
    width: usize,
) -> Result<Vec<f64>> {
    let out_ch = biases.len();
    if in_ch == 0 || input.len() % in_ch != 0 {
        return Err(Error::ShapeMismatch {
            what: "input channels",
            expected: in_ch,
            got: input.len(),
        });
    }
    if kernels.len() != out_ch * in_ch * width {
        return Err(Error::ShapeMismatch {
            what: "kernel size",
            expected: out_ch * in_ch * width,
            got: kernels.len(),
        });
    }
    let len = input.len() / in_ch;
    if width == 0 || len < width {
        return Err(Error::SeriesTooShort { len, window: width });
    }
    let out_len = len + 1 - width;
    let mut input_cl = vec![0.0; input.len()];
    for c in 0..in_ch {
        for i in 0..len {
            input_cl[i * in_ch + c] = input[c * len + i];
        }
    }
    let kernel_t = transpose_kernel(kernels, out_ch, in_ch, width);
    let mut out_cl = vec![0.0; out_len * out_ch];
    conv_forward_cl(&input_cl, in_ch, &kernel_t, biases, width, &mut out_cl);
    let mut out = vec![0.0; out_len * out_ch];
    for i in 0..out_len {
        for o in 0..out_ch {
            out[o * out_len + i] = out_cl[i * out_ch + o];
        }
    }
    Ok(out)
}

/// `[out][in][width]` to `[width][in][out]`.
pub fn transpose_kernel(kernels: &[f64], out_ch: usize, in_ch: usize, width: usize) -> Vec<f64> {
    let mut t = vec![0.0; kernels.len()];
    for o in 0..out_ch {
        for c in 0..in_ch {
            for k in 0..width {
                t[(k * in_ch + c) * out_ch + o] = kernels[(o * in_ch + c) * width + k];
            }
        }
    }
    t
}

/// Inverse of [`transpose_kernel`].
pub fn untranspose_kernel(kernel_t: &[f64], out_ch: usize, in_ch: usize, width: usize) -> Vec<f64> {
    let mut k_out = vec![0.0; kernel_t.len()];
    for o in 0..out_ch {
        for c in 0..in_ch {
            for k in 0..width {
                k_out[(o * in_ch + c) * width + k] = kernel_t[(k * in_ch + c) * out_ch + o];
            }
        }
    }
    k_out
}

/// Direct triple loop; the reference the GEMM path is checked against.
pub fn conv1d_reference(
    input: &[f64],
    in_ch: usize,
    kernels: &[f64],
    biases: &[f64],
    width: usize,
) -> Vec<f64> {
    let out_ch = biases.len();
    let len = input.len() / in_ch;
    let out_len = len + 1 - width;
    let mut out = vec![0.0; out_ch * out_len];
    for o in 0..out_ch {
        for i in 0..out_len {
            let mut acc = biases[o];
            for c in 0..in_ch {
                for k in 0..width {
                    acc += kernels[(o * in_ch + c) * width + k] * input[c * len + i + k];
                }
            }
            out[o * out_len + i] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_examples() {
        let out = conv1d_forward(&[1.0, 2.0, 3.0, 4.0], 1, &[1.0, 1.0, 1.0], &[0.0], 3).unwrap();
        assert_eq!(out, vec![6.0, 9.0]);
        let x = [3.0, -1.0, 4.0, 1.0, -5.0];
        let id = conv1d_forward(&x, 1, &[0.0, 1.0, 0.0], &[0.0], 3).unwrap();
        assert_eq!(id, x[1..4].to_vec());
        assert!(conv1d_forward(&[1.0, 2.0], 1, &[1.0, 1.0, 1.0], &[0.0], 3).is_err());
    }

    #[test]
    fn gemm_conv_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(in_ch, out_ch, len) in &[(1, 64, 200), (64, 64, 99), (5, 3, 7)] {
            let x: Vec<f64> = (0..in_ch * len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..out_ch * in_ch * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..out_ch).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = conv1d_forward(&x, in_ch, &k, &b, 3).unwrap();
            let slow = conv1d_reference(&x, in_ch, &k, &b, 3);
            for (f, s) in fast.iter().zip(&slow) {
                assert!((f - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_transpose_round_trip() {
        let k: Vec<f64> = (0..2 * 3 * 3).map(|v| v as f64).collect();
        let t = transpose_kernel(&k, 2, 3, 3);
        assert_eq!(untranspose_kernel(&t, 2, 3, 3), k);
    }

    #[test]
    fn pooling_drops_trailing_position() {
        let x = [1.0, 10.0, 3.0, 20.0, 5.0, 30.0]; // 3 positions x 2 channels
        let mut out = [0.0; 2];
        avgpool_forward_cl(&x, 2, 2, &mut out);
        assert_eq!(out, [2.0, 15.0]);
        let mut d = [9.0; 6];
        avgpool_backward_cl(&[1.0, 2.0], 2, 2, &mut d);
        assert_eq!(d, [0.5, 1.0, 0.5, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        let p = softmax(&[-10.0, 10.0]);
        assert!((p[1] - (1.0 - 2.061_153_6e-9)).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
