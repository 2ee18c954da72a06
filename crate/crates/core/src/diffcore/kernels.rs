//! Forward kernels and their vector-Jacobian products.
//!
//! Every kernel runs a fixed loop order, so outputs are bit-identical across
//! runs. Dot products and reductions accumulate in f64 before the final cast
//! back to f32 storage.

use crate::error::{Error, Result};

use super::tensor::Tensor;

pub const SQRT_EPS: f32 = 1e-12;

// ── conv2d ───────────────────────────────────────────────────────────

fn conv_out_side(side: usize, k: usize, stride: usize) -> usize {
    let pad = (k - 1) / 2;
    (side + 2 * pad - k) / stride + 1
}

pub fn conv2d_check(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 || k.rank() != 4 || b.rank() != 1 {
        return Err(Error::shape(
            "conv2d",
            format!("want ranks (3,4,1), got ({},{},{})", x.rank(), k.rank(), b.rank()),
        ));
    }
    let (kh, kw, cin, cout) = (k.dims()[0], k.dims()[1], k.dims()[2], k.dims()[3]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel sides must be odd, got {}x{}", kh, kw)));
    }
    if x.c() != cin {
        return Err(Error::shape("conv2d", format!("input channels {} != kernel cin {}", x.c(), cin)));
    }
    if b.dims()[0] != cout {
        return Err(Error::shape("conv2d", format!("bias len {} != kernel cout {}", b.dims()[0], cout)));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::shape("conv2d", format!("stride {} not in {{1,2}}", stride)));
    }
    Ok((conv_out_side(x.h(), kh, stride), conv_out_side(x.w(), kw, stride), cout))
}

/// Zero-padded ("same"-style) 2D convolution, stride 1 or 2.
pub fn conv2d(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let (oh, ow, cout) = conv2d_check(x, k, b, stride)?;
    let (h, w, cin) = (x.h(), x.w(), x.c());
    let (kh, kw) = (k.dims()[0], k.dims()[1]);
    let (pad_h, pad_w) = ((kh - 1) / 2, (kw - 1) / 2);
    let xd = x.data();
    let kd = k.data();
    let bd = b.data();

    let mut out = vec![0.0f32; oh * ow * cout];
    let mut acc = vec![0.0f64; cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for (co, a) in acc.iter_mut().enumerate() {
                *a = bd[co] as f64;
            }
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad_h as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad_w as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xrow = &xd[((iy as usize * w) + ix as usize) * cin..][..cin];
                    let krow = &kd[((ky * kw + kx) * cin) * cout..][..cin * cout];
                    for ci in 0..cin {
                        let xv = xrow[ci] as f64;
                        let ks = &krow[ci * cout..][..cout];
                        for (a, &kv) in acc.iter_mut().zip(ks) {
                            *a += xv * kv as f64;
                        }
                    }
                }
            }
            let orow = &mut out[(oy * ow + ox) * cout..][..cout];
            for (o, a) in orow.iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    }
    Tensor::new(vec![oh, ow, cout], out)
}

/// Gradients of conv2d w.r.t. input / kernel / bias; each side is computed
/// only when requested.
pub fn conv2d_vjp(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    gout: &Tensor,
    need: (bool, bool, bool),
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (h, w, cin) = (x.h(), x.w(), x.c());
    let (kh, kw, cout) = (k.dims()[0], k.dims()[1], k.dims()[3]);
    let (oh, ow) = (gout.dims()[0], gout.dims()[1]);
    let (pad_h, pad_w) = ((kh - 1) / 2, (kw - 1) / 2);
    let xd = x.data();
    let kd = k.data();
    let gd = gout.data();

    let mut gx = if need.0 { vec![0.0f64; h * w * cin] } else { Vec::new() };
    let mut gk = if need.1 { vec![0.0f64; kh * kw * cin * cout] } else { Vec::new() };
    let mut gb = if need.2 { vec![0.0f64; cout] } else { Vec::new() };

    for oy in 0..oh {
        for ox in 0..ow {
            let grow = &gd[(oy * ow + ox) * cout..][..cout];
            if need.2 {
                for (a, &g) in gb.iter_mut().zip(grow) {
                    *a += g as f64;
                }
            }
            if !need.0 && !need.1 {
                continue;
            }
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad_h as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad_w as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let in_base = ((iy as usize * w) + ix as usize) * cin;
                    let k_base = (ky * kw + kx) * cin * cout;
                    if need.0 {
                        for ci in 0..cin {
                            let ks = &kd[k_base + ci * cout..][..cout];
                            let mut a = 0.0f64;
                            for (&kv, &g) in ks.iter().zip(grow) {
                                a += kv as f64 * g as f64;
                            }
                            gx[in_base + ci] += a;
                        }
                    }
                    if need.1 {
                        for ci in 0..cin {
                            let xv = xd[in_base + ci] as f64;
                            let gks = &mut gk[k_base + ci * cout..][..cout];
                            for (a, &g) in gks.iter_mut().zip(grow) {
                                *a += xv * g as f64;
                            }
                        }
                    }
                }
            }
        }
    }

    let cast = |v: Vec<f64>, dims: &[usize]| {
        Tensor::new(dims.to_vec(), v.into_iter().map(|a| a as f32).collect()).expect("vjp dims")
    };
    (
        need.0.then(|| cast(gx, x.dims())),
        need.1.then(|| cast(gk, k.dims())),
        need.2.then(|| cast(gb, &[cout])),
    )
}

// ── resampling ───────────────────────────────────────────────────────

/// Nearest-neighbor 2x upsample of a rank-3 tensor.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::shape("nearest_upsample2", format!("want rank 3, got {:?}", x.dims())));
    }
    let (h, w, c) = (x.h(), x.w(), x.c());
    let xd = x.data();
    let mut out = vec![0.0f32; 4 * h * w * c];
    let ow = 2 * w;
    for y in 0..h {
        for xcol in 0..w {
            let src = &xd[(y * w + xcol) * c..][..c];
            for dy in 0..2 {
                for dx in 0..2 {
                    let dst = ((2 * y + dy) * ow + 2 * xcol + dx) * c;
                    out[dst..dst + c].copy_from_slice(src);
                }
            }
        }
    }
    Tensor::new(vec![2 * h, 2 * w, c], out)
}

pub fn upsample2_vjp(gout: &Tensor) -> Tensor {
    let (oh, ow, c) = (gout.dims()[0], gout.dims()[1], gout.dims()[2]);
    let (h, w) = (oh / 2, ow / 2);
    let gd = gout.data();
    let mut gx = vec![0.0f32; h * w * c];
    for y in 0..oh {
        for xcol in 0..ow {
            let src = &gd[(y * ow + xcol) * c..][..c];
            let dst = ((y / 2) * w + xcol / 2) * c;
            for ch in 0..c {
                gx[dst + ch] += src[ch];
            }
        }
    }
    Tensor::new(vec![h, w, c], gx).expect("vjp dims")
}

/// 2x average-pool downsample; sides must be even.
pub fn downsample_avg2(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 || x.h() % 2 != 0 || x.w() % 2 != 0 {
        return Err(Error::shape("downsample_avg2", format!("want even-sided rank 3, got {:?}", x.dims())));
    }
    let (h, w, c) = (x.h(), x.w(), x.c());
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0f32; oh * ow * c];
    for y in 0..oh {
        for xcol in 0..ow {
            for ch in 0..c {
                let mut a = 0.0f64;
                for dy in 0..2 {
                    for dx in 0..2 {
                        a += xd[((2 * y + dy) * w + 2 * xcol + dx) * c + ch] as f64;
                    }
                }
                out[(y * ow + xcol) * c + ch] = (a * 0.25) as f32;
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

pub fn downsample_avg2_vjp(gout: &Tensor) -> Tensor {
    let (oh, ow, c) = (gout.dims()[0], gout.dims()[1], gout.dims()[2]);
    let (h, w) = (2 * oh, 2 * ow);
    let gd = gout.data();
    let mut gx = vec![0.0f32; h * w * c];
    for y in 0..oh {
        for xcol in 0..ow {
            for ch in 0..c {
                let g = gd[(y * ow + xcol) * c + ch] * 0.25;
                for dy in 0..2 {
                    for dx in 0..2 {
                        gx[((2 * y + dy) * w + 2 * xcol + dx) * c + ch] = g;
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, c], gx).expect("vjp dims")
}

/// Reverses the width axis of a rank-3 tensor.
pub fn hflip(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::shape("hflip", format!("want rank 3, got {:?}", x.dims())));
    }
    let (h, w, c) = (x.h(), x.w(), x.c());
    let xd = x.data();
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..h {
        for xcol in 0..w {
            let src = &xd[(y * w + xcol) * c..][..c];
            let dst = (y * w + (w - 1 - xcol)) * c;
            out[dst..dst + c].copy_from_slice(src);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

// ── separable Gaussian blur ──────────────────────────────────────────

/// Normalized Gaussian taps with `2*radius + 1` entries.
pub fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f32> {
    let mut taps = Vec::with_capacity(2 * radius + 1);
    let mut sum = 0.0f64;
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        let v = (-d * d / (2.0 * sigma * sigma)).exp();
        taps.push(v);
        sum += v;
    }
    taps.into_iter().map(|v| (v / sum) as f32).collect()
}

fn blur_check(x: &Tensor, taps: &[f32], valid: bool) -> Result<(usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::shape("gaussian_blur", format!("want rank 3, got {:?}", x.dims())));
    }
    let t = taps.len();
    if t % 2 == 0 || t == 0 {
        return Err(Error::shape("gaussian_blur", format!("tap count {} must be odd", t)));
    }
    if valid {
        if x.h() < t || x.w() < t {
            return Err(Error::shape(
                "gaussian_blur",
                format!("image {}x{} smaller than {}-tap window", x.h(), x.w(), t),
            ));
        }
        Ok((x.h() - t + 1, x.w() - t + 1))
    } else {
        Ok((x.h(), x.w()))
    }
}

/// Separable blur along width then height. `valid` crops the border, the
/// alternative pads with zeros and keeps the size.
pub fn gaussian_blur(x: &Tensor, taps: &[f32], valid: bool) -> Result<Tensor> {
    let (oh, ow) = blur_check(x, taps, valid)?;
    let (h, w, c) = (x.h(), x.w(), x.c());
    let t = taps.len();
    let r = t / 2;

    // Horizontal pass: h x ow x c
    let mut mid = vec![0.0f32; h * ow * c];
    let xd = x.data();
    for y in 0..h {
        for ox in 0..ow {
            for ch in 0..c {
                let mut a = 0.0f64;
                for (ti, &tap) in taps.iter().enumerate() {
                    let ix = if valid {
                        (ox + ti) as isize
                    } else {
                        ox as isize + ti as isize - r as isize
                    };
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    a += tap as f64 * xd[(y * w + ix as usize) * c + ch] as f64;
                }
                mid[(y * ow + ox) * c + ch] = a as f32;
            }
        }
    }

    // Vertical pass: oh x ow x c
    let mut out = vec![0.0f32; oh * ow * c];
    for oy in 0..oh {
        for xcol in 0..ow {
            for ch in 0..c {
                let mut a = 0.0f64;
                for (ti, &tap) in taps.iter().enumerate() {
                    let iy = if valid {
                        (oy + ti) as isize
                    } else {
                        oy as isize + ti as isize - r as isize
                    };
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    a += tap as f64 * mid[(iy as usize * ow + xcol) * c + ch] as f64;
                }
                out[(oy * ow + xcol) * c + ch] = a as f32;
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// Adjoint of `gaussian_blur`. Zero-pad mode is self-adjoint for the
/// symmetric taps; valid mode scatters back onto the uncropped grid.
pub fn gaussian_blur_vjp(gout: &Tensor, taps: &[f32], valid: bool, in_dims: &[usize]) -> Tensor {
    if !valid {
        return gaussian_blur(gout, taps, false).expect("vjp dims");
    }
    let (h, w, c) = (in_dims[0], in_dims[1], in_dims[2]);
    let (oh, ow) = (gout.dims()[0], gout.dims()[1]);
    let gd = gout.data();

    // Adjoint of the vertical pass: oh x ow -> h x ow.
    let mut mid = vec![0.0f32; h * ow * c];
    for y in 0..h {
        for xcol in 0..ow {
            for ch in 0..c {
                let mut a = 0.0f64;
                for (ti, &tap) in taps.iter().enumerate() {
                    // forward: out[oy] += tap[ti] * in[oy + ti]
                    if y >= ti {
                        let oy = y - ti;
                        if oy < oh {
                            a += tap as f64 * gd[(oy * ow + xcol) * c + ch] as f64;
                        }
                    }
                }
                mid[(y * ow + xcol) * c + ch] = a as f32;
            }
        }
    }

    // Adjoint of the horizontal pass: h x ow -> h x w.
    let mut gx = vec![0.0f32; h * w * c];
    for y in 0..h {
        for xcol in 0..w {
            for ch in 0..c {
                let mut a = 0.0f64;
                for (ti, &tap) in taps.iter().enumerate() {
                    if xcol >= ti {
                        let ox = xcol - ti;
                        if ox < ow {
                            a += tap as f64 * mid[(y * ow + ox) * c + ch] as f64;
                        }
                    }
                }
                gx[(y * w + xcol) * c + ch] = a as f32;
            }
        }
    }
    Tensor::new(vec![h, w, c], gx).expect("vjp dims")
}

// ── elementwise and reductions ───────────────────────────────────────

pub fn binary_check(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("dims {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor::new(
        a.dims().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("zip dims")
}

pub fn clamp01(x: &Tensor) -> Tensor {
    x.map(|v| v.clamp(0.0, 1.0))
}

pub fn sqrt_eps(x: &Tensor) -> Tensor {
    x.map(|v| (v + SQRT_EPS).sqrt())
}

/// max(x, 0)^w, the per-scale weighting used by the multi-scale similarity
/// combination. The gradient is defined as 0 for x <= 0.
pub fn pow_weight(x: &Tensor, w: f32) -> Tensor {
    x.map(|v| if v > 0.0 { v.powf(w) } else { 0.0 })
}

pub fn sum_reduce64(x: &Tensor) -> f64 {
    x.data().iter().map(|&v| v as f64).sum()
}

pub fn mean_reduce64(x: &Tensor) -> f64 {
    sum_reduce64(x) / x.numel() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(dims: &[usize]) -> Tensor {
        Tensor::full(dims, 1.0)
    }

    #[test]
    fn conv2d_hand_computed_sums() {
        // 4x4 ones, 3x3 all-ones kernel, stride 1, zero pad:
        // corner sees a 2x2 window -> 4.0, center sees 3x3 -> 9.0.
        let x = ones(&[4, 4, 1]);
        let k = ones(&[3, 3, 1, 1]);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &k, &b, 1).unwrap();
        assert_eq!(y.dims(), &[4, 4, 1]);
        assert_eq!(y.at3(0, 0, 0), 4.0);
        assert_eq!(y.at3(0, 3, 0), 4.0);
        assert_eq!(y.at3(1, 1, 0), 9.0);
        assert_eq!(y.at3(1, 2, 0), 9.0);
        assert_eq!(y.at3(0, 1, 0), 6.0);
    }

    #[test]
    fn conv2d_stride2_shape() {
        let x = ones(&[8, 6, 2]);
        let k = ones(&[3, 3, 2, 5]);
        let b = Tensor::zeros(&[5]);
        let y = conv2d(&x, &k, &b, 2).unwrap();
        assert_eq!(y.dims(), &[4, 3, 5]);
    }

    #[test]
    fn conv2d_shape_errors_name_the_kind() {
        let x = ones(&[4, 4, 2]);
        let k = ones(&[3, 3, 1, 1]);
        let b = Tensor::zeros(&[1]);
        let err = conv2d(&x, &k, &b, 1).unwrap_err();
        assert!(err.to_string().contains("conv2d"), "{err}");
    }

    #[test]
    fn hflip_is_an_involution() {
        let x = Tensor::from_fn(&[3, 5, 2], |i| (i as f32).sin());
        let back = hflip(&hflip(&x).unwrap()).unwrap();
        assert_eq!(x, back);
    }

    #[test]
    fn upsample_then_downsample_is_identity() {
        let x = Tensor::from_fn(&[4, 6, 3], |i| (i % 13) as f32 * 0.07);
        let y = downsample_avg2(&upsample2(&x).unwrap()).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_valid_shrinks_and_preserves_constants() {
        let taps = gaussian_taps(1.5, 5);
        assert_eq!(taps.len(), 11);
        let x = Tensor::full(&[16, 13, 1], 0.625);
        let y = gaussian_blur(&x, &taps, true).unwrap();
        assert_eq!(y.dims(), &[6, 3, 1]);
        for &v in y.data() {
            assert!((v - 0.625).abs() < 1e-5);
        }
    }

    #[test]
    fn gaussian_taps_normalized() {
        let taps = gaussian_taps(1.0, 2);
        let s: f64 = taps.iter().map(|&t| t as f64).sum();
        assert!((s - 1.0).abs() < 1e-7);
    }

    #[test]
    fn symmetric_kernel_stride1_commutes_with_hflip() {
        // Left-right symmetric kernels make stride-1 conv flip-equivariant.
        // (Stride 2 breaks this: output centers land on even input columns,
        // which flip onto odd ones.)
        let x = Tensor::from_fn(&[6, 8, 2], |i| ((i * 37 % 101) as f32) * 0.01);
        let mut k = Tensor::from_fn(&[3, 3, 2, 2], |i| ((i * 13 % 19) as f32) * 0.05 - 0.4);
        let (kh, kw, ci, co) = (3, 3, 2, 2);
        let orig = k.clone();
        for y in 0..kh {
            for xx in 0..kw {
                for a in 0..ci {
                    for b in 0..co {
                        let idx = ((y * kw + xx) * ci + a) * co + b;
                        let mir = ((y * kw + (kw - 1 - xx)) * ci + a) * co + b;
                        k.data_mut()[idx] = 0.5 * (orig.data()[idx] + orig.data()[mir]);
                    }
                }
            }
        }
        let bias = Tensor::zeros(&[2]);
        let a = conv2d(&hflip(&x).unwrap(), &k, &bias, 1).unwrap();
        let b = hflip(&conv2d(&x, &k, &bias, 1).unwrap()).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-6, "{u} vs {v}");
        }
    }
}
