//! Forward and backward passes for the network's layers.
//!
//! Convolutions run per sample through an im2col buffer and a GEMM, so a
//! sample's activations do not depend on which batch it arrived in. The
//! batched dense GEMM keeps that property row-wise (pinned by a test below),
//! which is what makes inference output independent of batch partitioning.

use super::{Elem, Tensor, TensorError};

/// `C(m,n) = alpha * A(m,k) x B(k,n) + beta * C` over plain slices.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Elem>(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [T],
    rsc: isize,
    csc: isize,
) {
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::from_f64(alpha),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            T::from_f64(beta),
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn conv_shapes<T: Elem>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize), TensorError> {
    let (b, c, h, w) = match *input.shape() {
        [b, c, h, w] => (b, c, h, w),
        _ => {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d input must be [B,C,H,W], got {:?}",
                input.shape()
            )))
        }
    };
    let f = match *weights.shape() {
        [f, wc, 3, 3] if wc == c => f,
        _ => {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d weights must be [F,{c},3,3], got {:?}",
                weights.shape()
            )))
        }
    };
    if bias.shape() != [f] {
        return Err(TensorError::ShapeMismatch(format!(
            "conv2d bias must be [{f}], got {:?}",
            bias.shape()
        )));
    }
    Ok((b, c, h, w, f))
}

/// Source/destination spans for one kernel column offset `dx`.
/// Returns `(dst_start, src_start, len)` within a row of width `w`.
#[inline]
fn shifted_span(dx: isize, w: usize) -> (usize, usize, usize) {
    match dx {
        -1 => (1, 0, w - 1),
        0 => (0, 0, w),
        _ => (0, 1, w - 1),
    }
}

/// Unfolds one `[C,H,W]` sample into `cols[C*9, H*W]` for a 3x3 kernel with
/// zero padding: `cols[(c*9 + ky*3 + kx), oh*W + ow] = x[c, oh+ky-1, ow+kx-1]`.
fn im2col<T: Elem>(sample: &[T], c_in: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    cols.fill(T::zero());
    for c in 0..c_in {
        let plane = &sample[c * hw..(c + 1) * hw];
        for ky in 0..3usize {
            let dy = ky as isize - 1;
            for kx in 0..3usize {
                let dx = kx as isize - 1;
                let row = &mut cols[(c * 9 + ky * 3 + kx) * hw..][..hw];
                let (dst0, src0, len) = shifted_span(dx, w);
                for oh in 0..h {
                    let ih = oh as isize + dy;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = &plane[ih as usize * w..][..w];
                    row[oh * w + dst0..][..len].copy_from_slice(&src[src0..][..len]);
                }
            }
        }
    }
}

/// Transpose of [`im2col`]: scatter-adds `cols` back onto a `[C,H,W]` sample.
fn col2im_add<T: Elem>(cols: &[T], c_in: usize, h: usize, w: usize, sample: &mut [T]) {
    let hw = h * w;
    for c in 0..c_in {
        let plane = &mut sample[c * hw..(c + 1) * hw];
        for ky in 0..3usize {
            let dy = ky as isize - 1;
            for kx in 0..3usize {
                let dx = kx as isize - 1;
                let row = &cols[(c * 9 + ky * 3 + kx) * hw..][..hw];
                let (dst0, src0, len) = shifted_span(dx, w);
                for oh in 0..h {
                    let ih = oh as isize + dy;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * w..][..w];
                    for i in 0..len {
                        dst[src0 + i] = dst[src0 + i] + row[oh * w + dst0 + i];
                    }
                }
            }
        }
    }
}

/// Same-padded 3x3 convolution: `[B,C,H,W] -> [B,F,H,W]`.
pub fn conv2d<T: Elem>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (b, c, h, w, f) = conv_shapes(input, weights, bias)?;
    let hw = h * w;
    let k = c * 9;
    let mut out = Tensor::zeros(&[b, f, h, w]);
    let mut cols = vec![T::zero(); k * hw];
    for s in 0..b {
        im2col(&input.values()[s * c * hw..], c, h, w, &mut cols);
        let out_sample = &mut out.values_mut()[s * f * hw..(s + 1) * f * hw];
        // out[f, hw] = W[f, k] x cols[k, hw]
        gemm(
            f,
            k,
            hw,
            1.0,
            weights.values(),
            k as isize,
            1,
            &cols,
            hw as isize,
            1,
            0.0,
            out_sample,
            hw as isize,
            1,
        );
        for fi in 0..f {
            let bv = bias.values()[fi];
            for v in &mut out_sample[fi * hw..(fi + 1) * hw] {
                *v = *v + bv;
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`conv2d`]. Accumulates weight and bias gradients and
/// returns the input gradient.
pub fn conv2d_backward<T: Elem>(
    input: &Tensor<T>,
    weights: &mut Tensor<T>,
    bias: &mut Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (b, c, h, w, f) = conv_shapes(input, weights, bias)?;
    if grad_out.shape() != [b, f, h, w] {
        return Err(TensorError::ShapeMismatch(format!(
            "conv2d grad_out must be [{b},{f},{h},{w}], got {:?}",
            grad_out.shape()
        )));
    }
    let hw = h * w;
    let k = c * 9;
    let mut grad_input = Tensor::zeros(&[b, c, h, w]);
    let mut cols = vec![T::zero(); k * hw];
    let mut grad_cols = vec![T::zero(); k * hw];
    for s in 0..b {
        let g = &grad_out.values()[s * f * hw..(s + 1) * f * hw];
        im2col(&input.values()[s * c * hw..], c, h, w, &mut cols);
        // grad_w[f, k] += g[f, hw] x cols^T[hw, k]
        gemm(
            f,
            hw,
            k,
            1.0,
            g,
            hw as isize,
            1,
            &cols,
            1,
            hw as isize,
            1.0,
            weights.grad_mut(),
            k as isize,
            1,
        );
        // grad_cols[k, hw] = w^T[k, f] x g[f, hw]
        gemm(
            k,
            f,
            hw,
            1.0,
            weights.values(),
            1,
            k as isize,
            g,
            hw as isize,
            1,
            0.0,
            &mut grad_cols,
            hw as isize,
            1,
        );
        col2im_add(&grad_cols, c, h, w, &mut grad_input.values_mut()[s * c * hw..]);
        let gb = bias.grad_mut();
        for fi in 0..f {
            let mut acc = 0.0f64;
            for v in &g[fi * hw..(fi + 1) * hw] {
                acc += v.as_f64();
            }
            gb[fi] = T::from_f64(gb[fi].as_f64() + acc);
        }
    }
    Ok(grad_input)
}

/// 2x2 max-pooling with stride 2: `[B,F,H,W] -> [B,F,H/2,W/2]`.
pub fn maxpool2<T: Elem>(input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (b, f, h, w) = match *input.shape() {
        [b, f, h, w] => (b, f, h, w),
        _ => {
            return Err(TensorError::ShapeMismatch(format!(
                "maxpool2 input must be [B,F,H,W], got {:?}",
                input.shape()
            )))
        }
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::OddSpatialExtent { h, w });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, f, oh, ow]);
    let x = input.values();
    let o = out.values_mut();
    for plane in 0..b * f {
        let src = &x[plane * h * w..];
        let dst = &mut o[plane * oh * ow..];
        for py in 0..oh {
            for px in 0..ow {
                let base = (2 * py) * w + 2 * px;
                let mut best = src[base];
                for &off in &[1, w, w + 1] {
                    let v = src[base + off];
                    if v > best {
                        best = v;
                    }
                }
                dst[py * ow + px] = best;
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`maxpool2`]: the gradient goes to the first maximal
/// element of each window in row-major scan order.
pub fn maxpool2_backward<T: Elem>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (b, f, h, w) = match *input.shape() {
        [b, f, h, w] => (b, f, h, w),
        _ => {
            return Err(TensorError::ShapeMismatch(format!(
                "maxpool2 input must be [B,F,H,W], got {:?}",
                input.shape()
            )))
        }
    };
    let (oh, ow) = (h / 2, w / 2);
    if grad_out.shape() != [b, f, oh, ow] {
        return Err(TensorError::ShapeMismatch(format!(
            "maxpool2 grad_out must be [{b},{f},{oh},{ow}], got {:?}",
            grad_out.shape()
        )));
    }
    let mut grad_input = Tensor::zeros(&[b, f, h, w]);
    let x = input.values();
    let g = grad_out.values();
    let gi = grad_input.values_mut();
    for plane in 0..b * f {
        let src = &x[plane * h * w..];
        let dst = &mut gi[plane * h * w..];
        let gsrc = &g[plane * oh * ow..];
        for py in 0..oh {
            for px in 0..ow {
                let base = (2 * py) * w + 2 * px;
                let mut best = src[base];
                let mut best_off = 0;
                for &off in &[1, w, w + 1] {
                    let v = src[base + off];
                    if v > best {
                        best = v;
                        best_off = off;
                    }
                }
                dst[base + best_off] = dst[base + best_off] + gsrc[py * ow + px];
            }
        }
    }
    Ok(grad_input)
}

/// Elementwise `max(0, x)`.
pub fn relu<T: Elem>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    out.clear_grad();
    for v in out.values_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    out
}

/// Backward pass of [`relu`]; the subgradient at 0 is 0.
pub fn relu_backward<T: Elem>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut grad_input = Tensor::zeros(input.shape());
    for ((gi, &x), &g) in grad_input
        .values_mut()
        .iter_mut()
        .zip(input.values())
        .zip(grad_out.values())
    {
        if x > T::zero() {
            *gi = g;
        }
    }
    grad_input
}

/// Affine map `x W + b`: `[B,N] x [N,M] -> [B,M]`.
pub fn dense<T: Elem>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (b, n) = match *input.shape() {
        [b, n] => (b, n),
        _ => {
            return Err(TensorError::ShapeMismatch(format!(
                "dense input must be [B,N], got {:?}",
                input.shape()
            )))
        }
    };
    let m = match *weights.shape() {
        [wn, m] if wn == n => m,
        _ => {
            return Err(TensorError::ShapeMismatch(format!(
                "dense weights must be [{n},M], got {:?}",
                weights.shape()
            )))
        }
    };
    if bias.shape() != [m] {
        return Err(TensorError::ShapeMismatch(format!(
            "dense bias must be [{m}], got {:?}",
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[b, m]);
    gemm(
        b,
        n,
        m,
        1.0,
        input.values(),
        n as isize,
        1,
        weights.values(),
        m as isize,
        1,
        0.0,
        out.values_mut(),
        m as isize,
        1,
    );
    for row in 0..b {
        let dst = &mut out.values_mut()[row * m..(row + 1) * m];
        for (v, &bv) in dst.iter_mut().zip(bias.values()) {
            *v = *v + bv;
        }
    }
    Ok(out)
}

/// Backward pass of [`dense`]. Accumulates weight and bias gradients and
/// returns the input gradient.
pub fn dense_backward<T: Elem>(
    input: &Tensor<T>,
    weights: &mut Tensor<T>,
    bias: &mut Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (b, n) = match *input.shape() {
        [b, n] => (b, n),
        _ => {
            return Err(TensorError::ShapeMismatch(format!(
                "dense input must be [B,N], got {:?}",
                input.shape()
            )))
        }
    };
    let m = weights.shape()[1];
    if grad_out.shape() != [b, m] {
        return Err(TensorError::ShapeMismatch(format!(
            "dense grad_out must be [{b},{m}], got {:?}",
            grad_out.shape()
        )));
    }
    // grad_w[n, m] += x^T[n, b] x g[b, m]
    gemm(
        n,
        b,
        m,
        1.0,
        input.values(),
        1,
        n as isize,
        grad_out.values(),
        m as isize,
        1,
        1.0,
        weights.grad_mut(),
        m as isize,
        1,
    );
    let gb = bias.grad_mut();
    for col in 0..m {
        let mut acc = 0.0f64;
        for row in 0..b {
            acc += grad_out.values()[row * m + col].as_f64();
        }
        gb[col] = T::from_f64(gb[col].as_f64() + acc);
    }
    // grad_x[b, n] = g[b, m] x w^T[m, n]
    let mut grad_input = Tensor::zeros(&[b, n]);
    gemm(
        b,
        m,
        n,
        1.0,
        grad_out.values(),
        m as isize,
        1,
        weights.values(),
        1,
        m as isize,
        0.0,
        grad_input.values_mut(),
        n as isize,
        1,
    );
    Ok(grad_input)
}

/// Row-wise softmax with max subtraction, computed in f64.
pub fn softmax<T: Elem>(logits: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (b, k) = match *logits.shape() {
        [b, k] => (b, k),
        _ => {
            return Err(TensorError::ShapeMismatch(format!(
                "softmax input must be [B,K], got {:?}",
                logits.shape()
            )))
        }
    };
    let mut out = Tensor::zeros(&[b, k]);
    for row in 0..b {
        let src = &logits.values()[row * k..(row + 1) * k];
        let max = src.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let mut exps = vec![0.0f64; k];
        let mut sum = 0.0f64;
        for (e, v) in exps.iter_mut().zip(src) {
            *e = (v.as_f64() - max).exp();
            sum += *e;
        }
        for (dst, e) in out.values_mut()[row * k..(row + 1) * k].iter_mut().zip(&exps) {
            *dst = T::from_f64(e / sum);
        }
    }
    Ok(out)
}

/// Mean categorical cross-entropy over the batch, plus the softmax
/// probabilities needed for the backward pass.
pub fn softmax_cross_entropy<T: Elem>(
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<(f64, Tensor<T>), TensorError> {
    let (b, k) = match *logits.shape() {
        [b, k] => (b, k),
        _ => {
            return Err(TensorError::ShapeMismatch(format!(
                "softmax_cross_entropy logits must be [B,K], got {:?}",
                logits.shape()
            )))
        }
    };
    if targets.len() != b {
        return Err(TensorError::ShapeMismatch(format!(
            "{} targets for batch of {b}",
            targets.len()
        )));
    }
    for (sample, &class) in targets.iter().enumerate() {
        if class >= k {
            return Err(TensorError::InvalidTarget { sample, class, classes: k });
        }
    }
    let probs = softmax(logits)?;
    let mut loss = 0.0f64;
    for (row, &target) in targets.iter().enumerate() {
        let src = &logits.values()[row * k..(row + 1) * k];
        let max = src.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let log_sum = src
            .iter()
            .map(|v| (v.as_f64() - max).exp())
            .sum::<f64>()
            .ln();
        loss -= src[target].as_f64() - max - log_sum;
    }
    Ok((loss / b as f64, probs))
}

/// Gradient of the mean cross-entropy with respect to the logits:
/// `(probs - onehot) / B`.
pub fn softmax_cross_entropy_backward<T: Elem>(
    probs: &Tensor<T>,
    targets: &[usize],
) -> Tensor<T> {
    let b = probs.shape()[0];
    let k = probs.shape()[1];
    let inv_b = 1.0 / b as f64;
    let mut grad = Tensor::zeros(&[b, k]);
    for (row, &target) in targets.iter().enumerate() {
        for col in 0..k {
            let p = probs.values()[row * k + col].as_f64();
            let onehot = if col == target { 1.0 } else { 0.0 };
            grad.values_mut()[row * k + col] = T::from_f64((p - onehot) * inv_b);
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let len = shape.iter().product();
        let values = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, values).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Central finite difference of `f` with respect to every element of
    /// the tensor selected by `pick`.
    fn numeric_grad<F>(x: &mut Tensor<f64>, mut f: F, h: f64) -> Vec<f64>
    where
        F: FnMut(&Tensor<f64>) -> f64,
    {
        let mut grads = Vec::with_capacity(x.len());
        for i in 0..x.len() {
            let orig = x.values()[i];
            x.values_mut()[i] = orig + h;
            let up = f(x);
            x.values_mut()[i] = orig - h;
            let down = f(x);
            x.values_mut()[i] = orig;
            grads.push((up - down) / (2.0 * h));
        }
        grads
    }

    #[test]
    fn conv2d_identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = random_tensor(&[1, 1, 4, 4], &mut rng);
        let mut w = vec![0.0; 9];
        w[4] = 1.0; // center tap
        let weights = Tensor::from_vec(&[1, 1, 3, 3], w).unwrap();
        let bias = Tensor::zeros(&[1]);
        let out = conv2d(&input, &weights, &bias).unwrap();
        assert_eq!(out.values(), input.values());
    }

    #[test]
    fn conv2d_all_ones_kernel_on_ones_counts_neighbors() {
        // 2x2 input of ones, 3x3 ones kernel, zero-padded: every output
        // position covers exactly the 4 input cells.
        let input = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64; 4]).unwrap();
        let weights = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let bias = Tensor::zeros(&[1]);
        let out = conv2d(&input, &weights, &bias).unwrap();
        assert_eq!(out.values(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn conv2d_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = random_tensor(&[2, 3, 5, 4], &mut rng);
        let weights = random_tensor(&[4, 3, 3, 3], &mut rng);
        let bias = random_tensor(&[4], &mut rng);
        let out = conv2d(&input, &weights, &bias).unwrap();

        let (bsz, c, h, w, f) = (2usize, 3usize, 5usize, 4usize, 4usize);
        for s in 0..bsz {
            for fi in 0..f {
                for oy in 0..h {
                    for ox in 0..w {
                        let mut acc = bias.values()[fi];
                        for ci in 0..c {
                            for ky in 0..3usize {
                                for kx in 0..3usize {
                                    let iy = oy as isize + ky as isize - 1;
                                    let ix = ox as isize + kx as isize - 1;
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = input.values()
                                        [((s * c + ci) * h + iy as usize) * w + ix as usize];
                                    let wv =
                                        weights.values()[((fi * c + ci) * 3 + ky) * 3 + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        let got = out.values()[((s * f + fi) * h + oy) * w + ox];
                        assert!((got - acc).abs() < 1e-12, "mismatch at {s},{fi},{oy},{ox}");
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut input = random_tensor(&[1, 2, 6, 6], &mut rng);
        let mut weights = random_tensor(&[3, 2, 3, 3], &mut rng);
        let mut bias = random_tensor(&[3], &mut rng);
        // Fixed projection makes the scalar loss sensitive to every output.
        let proj = random_tensor(&[1, 3, 6, 6], &mut rng);
        let loss = |i: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            let out = conv2d(i, w, b).unwrap();
            out.values()
                .iter()
                .zip(proj.values())
                .map(|(o, p)| o * p)
                .sum::<f64>()
        };

        let grad_input = conv2d_backward(&input, &mut weights, &mut bias, &proj).unwrap();
        let (w_snapshot, b_snapshot) = (weights.clone(), bias.clone());

        let num_i = numeric_grad(&mut input, |i| loss(i, &w_snapshot, &b_snapshot), 1e-4);
        for (a, n) in grad_input.values().iter().zip(&num_i) {
            assert!(rel_err(*a, *n) < 1e-5, "input grad {a} vs {n}");
        }
        let input_c = input.clone();
        let num_w = numeric_grad(&mut weights, |w| loss(&input_c, w, &b_snapshot), 1e-4);
        for (a, n) in w_snapshot.grad().unwrap().iter().zip(&num_w) {
            assert!(rel_err(*a, *n) < 1e-5, "weight grad {a} vs {n}");
        }
        let w_c = weights.clone();
        let num_b = numeric_grad(&mut bias, |b| loss(&input_c, &w_c, b), 1e-4);
        for (a, n) in b_snapshot.grad().unwrap().iter().zip(&num_b) {
            assert!(rel_err(*a, *n) < 1e-5, "bias grad {a} vs {n}");
        }
    }

    #[test]
    fn conv2d_is_linear_in_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&[1, 2, 4, 4], &mut rng);
        let y = random_tensor(&[1, 2, 4, 4], &mut rng);
        let weights = random_tensor(&[3, 2, 3, 3], &mut rng);
        let bias = Tensor::zeros(&[3]);
        let (a, b) = (0.7, -1.3);
        let mixed = Tensor::from_vec(
            &[1, 2, 4, 4],
            x.values()
                .iter()
                .zip(y.values())
                .map(|(xv, yv)| a * xv + b * yv)
                .collect(),
        )
        .unwrap();
        let lhs = conv2d(&mixed, &weights, &bias).unwrap();
        let cx = conv2d(&x, &weights, &bias).unwrap();
        let cy = conv2d(&y, &weights, &bias).unwrap();
        for ((l, xv), yv) in lhs.values().iter().zip(cx.values()).zip(cy.values()) {
            let rhs = a * xv + b * yv;
            assert!(rel_err(*l, rhs) < 1e-6);
        }
    }

    #[test]
    fn maxpool_takes_window_maximum() {
        let input = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let out = maxpool2(&input).unwrap();
        assert_eq!(out.values(), &[4.0]);
    }

    #[test]
    fn maxpool_rejects_odd_extent() {
        let input = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(matches!(
            maxpool2(&input),
            Err(TensorError::OddSpatialExtent { h: 3, w: 4 })
        ));
    }

    #[test]
    fn maxpool_tie_routes_gradient_to_first_in_scan_order() {
        let input = Tensor::from_vec(&[1, 1, 2, 2], vec![5.0f64; 4]).unwrap();
        let grad_out = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let gi = maxpool2_backward(&input, &grad_out).unwrap();
        assert_eq!(gi.values(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_gradient_matches_finite_differences_off_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut input = random_tensor(&[1, 2, 4, 4], &mut rng);
        let proj = random_tensor(&[1, 2, 2, 2], &mut rng);
        let loss = |x: &Tensor<f64>| {
            maxpool2(x)
                .unwrap()
                .values()
                .iter()
                .zip(proj.values())
                .map(|(o, p)| o * p)
                .sum::<f64>()
        };
        let analytic = maxpool2_backward(&input, &proj).unwrap();
        let numeric = numeric_grad(&mut input, loss, 1e-5);
        for (a, n) in analytic.values().iter().zip(&numeric) {
            assert!(rel_err(*a, *n) < 1e-5);
        }
    }

    #[test]
    fn dense_identity_passes_through() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0f64, 2.0]).unwrap();
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let out = dense(&x, &w, &b).unwrap();
        assert_eq!(out.values(), &[2.0, 3.0]);
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = random_tensor(&[3, 5], &mut rng);
        let mut w = random_tensor(&[5, 4], &mut rng);
        let mut b = random_tensor(&[4], &mut rng);
        let proj = random_tensor(&[3, 4], &mut rng);
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            dense(x, w, b)
                .unwrap()
                .values()
                .iter()
                .zip(proj.values())
                .map(|(o, p)| o * p)
                .sum::<f64>()
        };
        let gx = dense_backward(&x, &mut w, &mut b, &proj).unwrap();
        let (ws, bs) = (w.clone(), b.clone());
        let num_x = numeric_grad(&mut x, |t| loss(t, &ws, &bs), 1e-5);
        for (a, n) in gx.values().iter().zip(&num_x) {
            assert!(rel_err(*a, *n) < 1e-6);
        }
        let xc = x.clone();
        let num_w = numeric_grad(&mut w, |t| loss(&xc, t, &bs), 1e-5);
        for (a, n) in ws.grad().unwrap().iter().zip(&num_w) {
            assert!(rel_err(*a, *n) < 1e-6);
        }
        let wc = w.clone();
        let num_b = numeric_grad(&mut b, |t| loss(&xc, &wc, t), 1e-5);
        for (a, n) in bs.grad().unwrap().iter().zip(&num_b) {
            assert!(rel_err(*a, *n) < 1e-6);
        }
    }

    #[test]
    fn dense_rows_are_independent_of_batch_partition() {
        // Inference output must not depend on how the ROI is batched, so the
        // batched GEMM must give bit-identical rows for any batch size.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_tensor(&[37, 64], &mut rng).cast::<f32>();
        let w = random_tensor(&[64, 20], &mut rng).cast::<f32>();
        let b = random_tensor(&[20], &mut rng).cast::<f32>();
        let full = dense(&x, &w, &b).unwrap();
        for row in 0..37 {
            let single = Tensor::from_vec(
                &[1, 64],
                x.values()[row * 64..(row + 1) * 64].to_vec(),
            )
            .unwrap();
            let out = dense(&single, &w, &b).unwrap();
            for (a, e) in out.values().iter().zip(&full.values()[row * 20..]) {
                assert_eq!(a.to_bits(), e.to_bits(), "row {row} differs");
            }
        }
    }

    #[test]
    fn relu_clamps_and_kills_gradient() {
        let x = Tensor::from_vec(&[3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).values(), &[0.0, 0.0, 2.0]);
        let g = Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(relu_backward(&x, &g).values(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative_is_dead() {
        let x = Tensor::from_vec(&[4], vec![-3.0f64, -0.5, -2.0, -1e-9]).unwrap();
        let g = Tensor::from_vec(&[4], vec![1.0; 4]).unwrap();
        assert!(relu(&x).values().iter().all(|&v| v == 0.0));
        assert!(relu_backward(&x, &g).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform_logits_give_uniform_probs() {
        let logits = Tensor::from_vec(&[1, 15], vec![0.3f64; 15]).unwrap();
        let (loss, probs) = softmax_cross_entropy(&logits, &[7]).unwrap();
        for &p in probs.values() {
            assert!((p - 1.0 / 15.0).abs() < 1e-12);
        }
        assert!((loss - (15.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_two_class_example() {
        let logits = Tensor::from_vec(&[1, 2], vec![0.0f64, (3.0f64).ln()]).unwrap();
        let probs = softmax(&logits).unwrap();
        assert!((probs.values()[0] - 0.25).abs() < 1e-12);
        assert!((probs.values()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let logits = Tensor::from_vec(&[1, 3], vec![1e4f64, -1e4, 0.0]).unwrap();
        let probs = softmax(&logits).unwrap();
        let sum: f64 = probs.values().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!((probs.values()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_loss_vanishes_with_certain_correct_prediction() {
        let logits = Tensor::from_vec(&[1, 3], vec![50.0f64, 0.0, 0.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let logits = Tensor::<f64>::zeros(&[2, 15]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[0, 15]),
            Err(TensorError::InvalidTarget { sample: 1, class: 15, .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut logits = random_tensor(&[4, 6], &mut rng);
        let targets = [2usize, 0, 5, 3];
        let (_, probs) = softmax_cross_entropy(&logits, &targets).unwrap();
        let analytic = softmax_cross_entropy_backward(&probs, &targets);
        let numeric = numeric_grad(
            &mut logits,
            |t| softmax_cross_entropy(t, &targets).unwrap().0,
            1e-5,
        );
        for (a, n) in analytic.values().iter().zip(&numeric) {
            assert!(rel_err(*a, *n) < 1e-6, "{a} vs {n}");
        }
    }
}
