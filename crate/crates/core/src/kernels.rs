//! Serial numeric kernels behind the tape ops.
//!
//! Everything here is deterministic by construction: loops run in a fixed
//! order, with no thread-dependent reduction trees, so repeated runs produce
//! bit-identical results. The hot loops are written so the innermost axis is
//! contiguous and free of reductions, which LLVM turns into wide FMA code
//! under `target-cpu=native`; that is what keeps single-core training within
//! its time budget.

use crate::error::{CueError, Result};
use crate::tensor::{Scalar, Tensor};

/// `a[m,k] * b[k,n]`. The i-k-j loop order keeps the accumulator row
/// contiguous and vectorizable.
pub fn matmul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(CueError::Shape(format!(
            "matmul inner dims {k} vs {k2} (shapes {:?} x {:?})",
            a.shape(),
            b.shape()
        )));
    }
    let ad = a.data();
    let bd = b.data();
    let mut c = vec![E::ZERO; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = ad[i * k + l];
            let brow = &bd[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] = a_il.mul_add(brow[j], crow[j]);
            }
        }
    }
    Tensor::from_vec(&[m, n], c)
}

pub fn transpose2d<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (r, c) = dims2(x, "transpose")?;
    let xd = x.data();
    let mut out = vec![E::ZERO; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = xd[i * c + j];
        }
    }
    Tensor::from_vec(&[c, r], out)
}

fn dims2<E: Scalar>(t: &Tensor<E>, what: &str) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(CueError::Shape(format!(
            "{what} expects a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Output spatial size of a convolution; errors when it would collapse.
pub fn conv_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(CueError::Config("conv stride must be >= 1".into()));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(CueError::Config(format!(
            "conv kernel must be odd, got {kh}x{kw}"
        )));
    }
    let oh = (h + 2 * pad).checked_sub(kh).map(|d| d / stride + 1);
    let ow = (w + 2 * pad).checked_sub(kw).map(|d| d / stride + 1);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
        _ => Err(CueError::Shape(format!(
            "conv output collapses: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
        ))),
    }
}

/// Unfolds `x[h,w,cin]` into a `[(oh*ow), kh*kw*cin]` matrix whose column
/// order (di, dj, ci) matches the row-major layout of a `[kh,kw,cin,cout]`
/// kernel, so convolution is a single matmul.
pub fn im2col<E: Scalar>(
    x: &Tensor<E>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let (h, w, cin) = dims3(x)?;
    let (oh, ow) = conv_out_dims(h, w, kh, kw, stride, pad)?;
    let xd = x.data();
    let cols_per_row = kh * kw * cin;
    let mut cols = vec![E::ZERO; oh * ow * cols_per_row];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * cols_per_row..(oy * ow + ox + 1) * cols_per_row];
            for di in 0..kh {
                let iy = (oy * stride + di) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dj in 0..kw {
                    let ix = (ox * stride + dj) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * cin;
                    let dst = (di * kw + dj) * cin;
                    row[dst..dst + cin].copy_from_slice(&xd[src..src + cin]);
                }
            }
        }
    }
    Tensor::from_vec(&[oh * ow, cols_per_row], cols)
}

/// Adjoint of [`im2col`]: scatter-adds unfolded gradients back onto the
/// input raster.
pub fn col2im<E: Scalar>(
    cols: &Tensor<E>,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let (oh, ow) = conv_out_dims(h, w, kh, kw, stride, pad)?;
    let cols_per_row = kh * kw * cin;
    if cols.shape() != [oh * ow, cols_per_row] {
        return Err(CueError::Shape(format!(
            "col2im expects [{}, {}], got {:?}",
            oh * ow,
            cols_per_row,
            cols.shape()
        )));
    }
    let cd = cols.data();
    let mut x = vec![E::ZERO; h * w * cin];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cd[(oy * ow + ox) * cols_per_row..(oy * ow + ox + 1) * cols_per_row];
            for di in 0..kh {
                let iy = (oy * stride + di) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dj in 0..kw {
                    let ix = (ox * stride + dj) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * cin;
                    let src = (di * kw + dj) * cin;
                    for c in 0..cin {
                        x[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[h, w, cin], x)
}

fn dims3<E: Scalar>(t: &Tensor<E>) -> Result<(usize, usize, usize)> {
    if t.ndim() != 3 {
        return Err(CueError::Shape(format!(
            "expected [h,w,c] tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2]))
}

/// Cross-correlation convolution of `x[h,w,cin]` with `w[kh,kw,cin,cout]`
/// plus `bias[cout]`.
pub fn conv2d<E: Scalar>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let (h, w, cin) = dims3(x)?;
    let (kh, kw, wcin, cout) = kernel_dims(weight)?;
    if wcin != cin {
        return Err(CueError::Shape(format!(
            "conv input has {cin} channels, kernel expects {wcin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(CueError::Shape(format!(
            "conv bias shape {:?}, want [{cout}]",
            bias.shape()
        )));
    }
    let (oh, ow) = conv_out_dims(h, w, kh, kw, stride, pad)?;
    let wmat = weight.clone().reshape(&[kh * kw * cin, cout])?;
    let mut out = if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        let xmat = x.clone().reshape(&[h * w, cin])?;
        matmul(&xmat, &wmat)?
    } else {
        let cols = im2col(x, kh, kw, stride, pad)?;
        matmul(&cols, &wmat)?
    };
    let od = out.data_mut();
    let bd = bias.data();
    for r in 0..oh * ow {
        let row = &mut od[r * cout..(r + 1) * cout];
        for c in 0..cout {
            row[c] += bd[c];
        }
    }
    out.reshape(&[oh, ow, cout])
}

/// Gradients of [`conv2d`] w.r.t. input, kernel, and bias. Recomputes the
/// unfolded input instead of caching it; memory stays flat and the extra
/// pass is cheap next to the two matmuls.
pub fn conv2d_backward<E: Scalar>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    stride: usize,
    pad: usize,
    grad: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (h, w, cin) = dims3(x)?;
    let (kh, kw, _, cout) = kernel_dims(weight)?;
    let (oh, ow) = conv_out_dims(h, w, kh, kw, stride, pad)?;
    if grad.shape() != [oh, ow, cout] {
        return Err(CueError::Shape(format!(
            "conv grad shape {:?}, want [{oh}, {ow}, {cout}]",
            grad.shape()
        )));
    }
    let gmat = grad.clone().reshape(&[oh * ow, cout])?;
    let wmat = weight.clone().reshape(&[kh * kw * cin, cout])?;

    let mut db = vec![E::ZERO; cout];
    for r in 0..oh * ow {
        let row = &gmat.data()[r * cout..(r + 1) * cout];
        for c in 0..cout {
            db[c] += row[c];
        }
    }
    let db = Tensor::from_vec(&[cout], db)?;

    let (dw, dx) = if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        let xmat = x.clone().reshape(&[h * w, cin])?;
        let dw = matmul(&transpose2d(&xmat)?, &gmat)?;
        let dx = matmul(&gmat, &transpose2d(&wmat)?)?.reshape(&[h, w, cin])?;
        (dw, dx)
    } else {
        let cols = im2col(x, kh, kw, stride, pad)?;
        let dw = matmul(&transpose2d(&cols)?, &gmat)?;
        let dcols = matmul(&gmat, &transpose2d(&wmat)?)?;
        let dx = col2im(&dcols, h, w, cin, kh, kw, stride, pad)?;
        (dw, dx)
    };
    Ok((dx, dw.reshape(&[kh, kw, cin, cout])?, db))
}

fn kernel_dims<E: Scalar>(w: &Tensor<E>) -> Result<(usize, usize, usize, usize)> {
    if w.ndim() != 4 {
        return Err(CueError::Shape(format!(
            "conv kernel must be [kh,kw,cin,cout], got {:?}",
            w.shape()
        )));
    }
    Ok((w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]))
}

/// Source tap positions and weights along one axis for align-corners-false
/// bilinear resampling. Taps are clamped to the valid range, which
/// extends edge values.
fn upsample_taps(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            let i0 = src.floor();
            let frac = src - i0;
            let a = (i0.max(0.0) as usize).min(in_len - 1);
            let b = ((i0 + 1.0).max(0.0) as usize).min(in_len - 1);
            (a, b, frac)
        })
        .collect()
}

pub fn upsample_bilinear<E: Scalar>(x: &Tensor<E>, factor: usize) -> Result<Tensor<E>> {
    if factor == 0 {
        return Err(CueError::Config("upsample factor must be >= 1".into()));
    }
    let (h, w, c) = dims3(x)?;
    if factor == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let ys = upsample_taps(oh, h, factor);
    let xs = upsample_taps(ow, w, factor);
    let xd = x.data();
    let mut out = vec![E::ZERO; oh * ow * c];
    for oy in 0..oh {
        let (y0, y1, fy) = ys[oy];
        let wy1 = E::from_f64(fy);
        let wy0 = E::from_f64(1.0 - fy);
        for ox in 0..ow {
            let (x0, x1, fx) = xs[ox];
            let wx1 = E::from_f64(fx);
            let wx0 = E::from_f64(1.0 - fx);
            let dst = (oy * ow + ox) * c;
            let p00 = (y0 * w + x0) * c;
            let p01 = (y0 * w + x1) * c;
            let p10 = (y1 * w + x0) * c;
            let p11 = (y1 * w + x1) * c;
            for k in 0..c {
                let top = wx0 * xd[p00 + k] + wx1 * xd[p01 + k];
                let bot = wx0 * xd[p10 + k] + wx1 * xd[p11 + k];
                out[dst + k] = wy0 * top + wy1 * bot;
            }
        }
    }
    Tensor::from_vec(&[oh, ow, c], out)
}

pub fn upsample_bilinear_backward<E: Scalar>(
    grad: &Tensor<E>,
    h: usize,
    w: usize,
    factor: usize,
) -> Result<Tensor<E>> {
    let (oh, ow, c) = dims3(grad)?;
    if factor == 1 {
        return Ok(grad.clone());
    }
    if oh != h * factor || ow != w * factor {
        return Err(CueError::Shape(format!(
            "upsample grad shape {:?} inconsistent with input {h}x{w} factor {factor}",
            grad.shape()
        )));
    }
    let ys = upsample_taps(oh, h, factor);
    let xs = upsample_taps(ow, w, factor);
    let gd = grad.data();
    let mut out = vec![E::ZERO; h * w * c];
    for oy in 0..oh {
        let (y0, y1, fy) = ys[oy];
        let wy1 = E::from_f64(fy);
        let wy0 = E::from_f64(1.0 - fy);
        for ox in 0..ow {
            let (x0, x1, fx) = xs[ox];
            let wx1 = E::from_f64(fx);
            let wx0 = E::from_f64(1.0 - fx);
            let src = (oy * ow + ox) * c;
            let p00 = (y0 * w + x0) * c;
            let p01 = (y0 * w + x1) * c;
            let p10 = (y1 * w + x0) * c;
            let p11 = (y1 * w + x1) * c;
            for k in 0..c {
                let g = gd[src + k];
                out[p00 + k] += wy0 * wx0 * g;
                out[p01 + k] += wy0 * wx1 * g;
                out[p10 + k] += wy1 * wx0 * g;
                out[p11 + k] += wy1 * wx1 * g;
            }
        }
    }
    Tensor::from_vec(&[h, w, c], out)
}

/// Row-wise softmax of a matrix, stabilized by subtracting the row maximum.
pub fn row_softmax<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (r, c) = dims2(x, "row_softmax")?;
    if c == 0 {
        return Err(CueError::Shape("row_softmax on zero-width rows".into()));
    }
    let xd = x.data();
    let mut out = vec![E::ZERO; r * c];
    for i in 0..r {
        let row = &xd[i * c..(i + 1) * c];
        let orow = &mut out[i * c..(i + 1) * c];
        let mut m = row[0];
        for &v in &row[1..] {
            m = m.maxs(v);
        }
        let mut sum = E::ZERO;
        for j in 0..c {
            let e = (row[j] - m).exp();
            orow[j] = e;
            sum += e;
        }
        for v in orow.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::from_vec(&[r, c], out)
}

/// Backward of [`row_softmax`]: per row, `dx = s * (g - <g, s>)`.
pub fn row_softmax_backward<E: Scalar>(s: &Tensor<E>, grad: &Tensor<E>) -> Result<Tensor<E>> {
    let (r, c) = dims2(s, "row_softmax backward")?;
    if grad.shape() != s.shape() {
        return Err(CueError::Shape("softmax grad shape mismatch".into()));
    }
    let sd = s.data();
    let gd = grad.data();
    let mut out = vec![E::ZERO; r * c];
    for i in 0..r {
        let srow = &sd[i * c..(i + 1) * c];
        let grow = &gd[i * c..(i + 1) * c];
        let mut dot = E::ZERO;
        for j in 0..c {
            dot += srow[j] * grow[j];
        }
        let orow = &mut out[i * c..(i + 1) * c];
        for j in 0..c {
            orow[j] = srow[j] * (grow[j] - dot);
        }
    }
    Tensor::from_vec(&[r, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_left() {
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap().data(), b.data());
    }

    #[test]
    fn matmul_basis_selection() {
        let a = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![5.0, 7.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[5.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_tensor(&[3, 4], &mut rng);
        let b = random_tensor(&[4, 2], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut want = 0.0;
                for l in 0..4 {
                    want += a.at2(i, l) * b.at2(l, j);
                }
                assert!((c.at2(i, j) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn transpose_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tensor(&[3, 5], &mut rng);
        let back = transpose2d(&transpose2d(&a).unwrap()).unwrap();
        assert_eq!(a.data(), back.data());
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&[4, 4, 3], &mut rng);
        // 1x1 kernel holding the 3x3 channel identity.
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let b = Tensor::zeros(&[3]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), x.shape());
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_box_kernel_sums_window() {
        let x = Tensor::<f64>::full(&[5, 5, 1], 1.0);
        let w = Tensor::full(&[3, 3, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        // Same padding: interior pixels see the full 3x3 window.
        assert!((y.at3(2, 2, 0) - 9.0).abs() < 1e-12);
        // Corner sees a 2x2 window.
        assert!((y.at3(0, 0, 0) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&[5, 5, 2], &mut rng);
        let w = random_tensor(&[3, 3, 2, 4], &mut rng);
        let b = random_tensor(&[4], &mut rng);
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        for oy in 0..5usize {
            for ox in 0..5usize {
                for co in 0..4 {
                    let mut want = b.data()[co];
                    for di in 0..3usize {
                        for dj in 0..3usize {
                            let iy = oy as isize + di as isize - 1;
                            let ix = ox as isize + dj as isize - 1;
                            if iy < 0 || iy >= 5 || ix < 0 || ix >= 5 {
                                continue;
                            }
                            for ci in 0..2 {
                                want += x.at3(iy as usize, ix as usize, ci)
                                    * w.data()[((di * 3 + dj) * 2 + ci) * 4 + co];
                            }
                        }
                    }
                    assert!((y.at3(oy, ox, co) - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn conv_rejects_collapsing_output() {
        let x = Tensor::<f64>::zeros(&[2, 2, 1]);
        let w = Tensor::zeros(&[5, 5, 1, 1]);
        let b = Tensor::zeros(&[1]);
        assert!(conv2d(&x, &w, &b, 1, 0).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> pins the scatter indices to the
        // gather indices without enumerating them.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_tensor(&[5, 4, 2], &mut rng);
        let cols = im2col(&x, 3, 3, 2, 1).unwrap();
        let c = random_tensor(cols.shape(), &mut rng);
        let lhs: f64 = cols.data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        let back = col2im(&c, 5, 4, 2, 3, 3, 2, 1).unwrap();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn upsample_factor_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random_tensor(&[3, 3, 2], &mut rng);
        let y = upsample_bilinear(&x, 1).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn upsample_constant_extends() {
        let x = Tensor::<f64>::full(&[1, 1, 1], 3.5);
        let y = upsample_bilinear(&x, 4).unwrap();
        assert_eq!(y.shape(), &[4, 4, 1]);
        for &v in y.data() {
            assert!((v - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_matches_hand_bilinear() {
        let x = Tensor::from_vec(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = upsample_bilinear(&x, 2).unwrap();
        // Row 0 taps only the top row; sources at -0.25, 0.25, 0.75, 1.25
        // with edge clamping give 0, 0.25, 0.75, 1.
        let want_row0 = [0.0, 0.25, 0.75, 1.0];
        for (j, want) in want_row0.iter().enumerate() {
            assert!((y.at3(0, j, 0) - want).abs() < 1e-12, "col {j}");
        }
        // Column symmetry: same weights vertically.
        assert!((y.at3(1, 0, 0) - 0.5).abs() < 1e-12);
        assert!((y.at3(2, 3, 0) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = random_tensor(&[2, 3, 2], &mut rng);
        let y = upsample_bilinear(&x, 2).unwrap();
        let g = random_tensor(y.shape(), &mut rng);
        let dx = upsample_bilinear_backward(&g, 2, 3, 2).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn softmax_uniform_on_zero_row() {
        let x = Tensor::<f64>::zeros(&[1, 4]);
        let s = row_softmax(&x).unwrap();
        for &v in s.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let x = Tensor::from_vec(&[1, 2], vec![1000.0, 0.0]).unwrap();
        let s = row_softmax(&x).unwrap();
        assert!(s.check_finite("softmax").is_ok());
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1] < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = random_tensor(&[6, 5], &mut rng);
        let s = row_softmax(&x).unwrap();
        for i in 0..6 {
            let sum: f64 = (0..5).map(|j| s.at2(i, j)).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            for j in 0..5 {
                let v = s.at2(i, j);
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
