//! Image metrics and the photometric training loss.
//!
//! SSIM uses an 11x11 Gaussian window with sigma 1.5, evaluated at every
//! pixel; near the border the window is cut to the image and renormalized.

use std::path::Path;

use crate::error::Result;
use crate::image::Image;
use crate::lie::Vec3;

pub const SSIM_RADIUS: usize = 5;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 100.0;
pub const DEFAULT_LAMBDA: f64 = 0.2;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n)
}

/// `10 log10(1 / mse)`, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

fn kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    std::array::from_fn(|i| {
        let d = i as f64 - SSIM_RADIUS as f64;
        (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    })
}

/// Separable truncated Gaussian blur of one channel plane.
struct Window {
    w: usize,
    h: usize,
    k: [f64; 2 * SSIM_RADIUS + 1],
    norm: Vec<f64>,
}

impl Window {
    fn new(w: usize, h: usize) -> Self {
        let k = kernel();
        let mass = |len: usize, i: usize| -> f64 {
            let lo = i.saturating_sub(SSIM_RADIUS);
            let hi = (i + SSIM_RADIUS).min(len - 1);
            (lo..=hi).map(|j| k[j + SSIM_RADIUS - i]).sum()
        };
        let mx: Vec<f64> = (0..w).map(|x| mass(w, x)).collect();
        let my: Vec<f64> = (0..h).map(|y| mass(h, y)).collect();
        let norm = (0..h).flat_map(|y| mx.iter().map(|m| m * my[y]).collect::<Vec<_>>()).collect();
        Self { w, h, k, norm }
    }

    /// Unnormalized truncated convolution; symmetric as a linear map.
    fn convolve(&self, plane: &[f64]) -> Vec<f64> {
        let (w, h, r) = (self.w, self.h, SSIM_RADIUS);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(r);
                let hi = (x + r).min(w - 1);
                tmp[y * w + x] = (lo..=hi).map(|j| self.k[j + r - x] * plane[y * w + j]).sum();
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            for x in 0..w {
                out[y * w + x] = (lo..=hi).map(|j| self.k[j + r - y] * tmp[j * w + x]).sum();
            }
        }
        out
    }

    fn mean(&self, plane: &[f64]) -> Vec<f64> {
        self.convolve(plane).iter().zip(&self.norm).map(|(v, n)| v / n).collect()
    }

    /// Adjoint of `mean`.
    fn mean_adjoint(&self, plane: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = plane.iter().zip(&self.norm).map(|(v, n)| v / n).collect();
        self.convolve(&scaled)
    }
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data().iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM over pixels and channels, and optionally its gradient with
/// respect to `a`.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    a.check_same_shape(b)?;
    let (w, h) = (a.width(), a.height());
    let win = Window::new(w, h);
    let count = (w * h * 3) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h));
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = win.mean(&x);
        let my = win.mean(&y);
        let mxx = win.mean(&xx);
        let myy = win.mean(&yy);
        let mxy = win.mean(&xy);
        let n = w * h;
        let mut d_mx = vec![0.0; n];
        let mut d_sxx = vec![0.0; n];
        let mut d_sxy = vec![0.0; n];
        for p in 0..n {
            let sxx = mxx[p] - mx[p] * mx[p];
            let syy = myy[p] - my[p] * my[p];
            let sxy = mxy[p] - mx[p] * my[p];
            let num_a = 2.0 * mx[p] * my[p] + SSIM_C1;
            let num_b = 2.0 * sxy + SSIM_C2;
            let den_c = mx[p] * mx[p] + my[p] * my[p] + SSIM_C1;
            let den_d = sxx + syy + SSIM_C2;
            let s = num_a * num_b / (den_c * den_d);
            total += s;
            if want_grad {
                d_mx[p] = 2.0 * my[p] * num_b / (den_c * den_d) - 2.0 * mx[p] * s / den_c;
                d_sxx[p] = -s / den_d;
                d_sxy[p] = 2.0 * num_a / (den_c * den_d);
            }
        }
        if let Some(g) = grad.as_mut() {
            // sxx = E[x^2] - mx^2 and sxy = E[xy] - mx my, so each pixel's
            // statistics pull back through the window as
            // d/dx_q = W^T[dmx - 2 dsxx mx - dsxy my] + 2 x_q W^T[dsxx] + y_q W^T[dsxy].
            let lin: Vec<f64> = (0..n)
                .map(|p| d_mx[p] - 2.0 * d_sxx[p] * mx[p] - d_sxy[p] * my[p])
                .collect();
            let g_lin = win.mean_adjoint(&lin);
            let g_sxx = win.mean_adjoint(&d_sxx);
            let g_sxy = win.mean_adjoint(&d_sxy);
            let data = g.data_mut();
            for q in 0..n {
                data[3 * q + c] = (g_lin[q] + 2.0 * x[q] * g_sxx[q] + y[q] * g_sxy[q]) / count;
            }
        }
    }
    Ok((total / count, grad))
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to the first image.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let (s, g) = ssim_impl(a, b, true)?;
    Ok((s, g.expect("gradient requested")))
}

/// `(1 - lambda) L1 + lambda (1 - SSIM) / 2` and its gradient with respect to
/// `rendered`.
pub fn loss(rendered: &Image, target: &Image, lambda: f64) -> Result<(f64, Image)> {
    let l1v = l1(rendered, target)?;
    let n = rendered.data().len() as f64;
    let mut grad = Image::from_data(
        rendered.width(),
        rendered.height(),
        rendered
            .data()
            .iter()
            .zip(target.data())
            .map(|(r, t)| {
                let d = r - t;
                let sign = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                (1.0 - lambda) * sign / n
            })
            .collect(),
    )?;
    if lambda == 0.0 {
        return Ok(((1.0 - lambda) * l1v, grad));
    }
    let (s, gs) = ssim_with_grad(rendered, target)?;
    for (g, d) in grad.data_mut().iter_mut().zip(gs.data()) {
        *g -= 0.5 * lambda * d;
    }
    Ok(((1.0 - lambda) * l1v + lambda * (1.0 - s) / 2.0, grad))
}

/// Colormap stops for the error map: black, blue, red, yellow, white at
/// errors 0, 0.25, 0.5, 0.75 and 1.
pub const ERROR_COLORMAP: [[f64; 3]; 5] = [
    [0.0, 0.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 0.0, 0.0],
    [1.0, 1.0, 0.0],
    [1.0, 1.0, 1.0],
];

pub fn colormap(v: f64) -> Vec3 {
    let t = v.clamp(0.0, 1.0) * (ERROR_COLORMAP.len() - 1) as f64;
    let i = (t.floor() as usize).min(ERROR_COLORMAP.len() - 2);
    let f = t - i as f64;
    let a = Vec3::from(ERROR_COLORMAP[i]);
    let b = Vec3::from(ERROR_COLORMAP[i + 1]);
    a + (b - a) * f
}

/// Per-pixel mean absolute channel difference through `colormap`.
pub fn error_image(a: &Image, b: &Image) -> Result<Image> {
    a.check_same_shape(b)?;
    let mut out = Image::new(a.width(), a.height());
    for y in 0..a.height() {
        for x in 0..a.width() {
            let d = (a.pixel(x, y) - b.pixel(x, y)).abs().sum() / 3.0;
            out.set_pixel(x, y, colormap(d));
        }
    }
    Ok(out)
}

pub fn error_map(a: &Image, b: &Image, path: &Path) -> Result<Image> {
    let img = error_image(a, b)?;
    img.save_png(path)?;
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_data(w, h, (0..w * h * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn psnr_fixtures() {
        let a = Image::filled(8, 8, Vec3::repeat(0.3));
        let b = Image::filled(8, 8, Vec3::repeat(0.4));
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-6);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        assert!(psnr(&a, &Image::new(4, 4)).is_err());
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = random_image(1, 16, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_against_negative_is_negative() {
        let a = random_image(2, 16, 16);
        let neg = Image::from_data(16, 16, a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &neg).unwrap() < 0.0);
    }

    /// Straightforward per-pixel evaluation with explicit 2D windows.
    fn ssim_direct(a: &Image, b: &Image) -> f64 {
        let (w, h) = (a.width() as isize, a.height() as isize);
        let r = SSIM_RADIUS as isize;
        let mut total = 0.0;
        for c in 0..3 {
            for py in 0..h {
                for px in 0..w {
                    let (mut z, mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                    for qy in (py - r).max(0)..=(py + r).min(h - 1) {
                        for qx in (px - r).max(0)..=(px + r).min(w - 1) {
                            let d2 = ((qx - px).pow(2) + (qy - py).pow(2)) as f64;
                            let g = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
                            let x = a.pixel(qx as usize, qy as usize)[c];
                            let y = b.pixel(qx as usize, qy as usize)[c];
                            z += g;
                            mx += g * x;
                            my += g * y;
                            xx += g * x * x;
                            yy += g * y * y;
                            xy += g * x * y;
                        }
                    }
                    let (mx, my) = (mx / z, my / z);
                    let sxx = xx / z - mx * mx;
                    let syy = yy / z - my * my;
                    let sxy = xy / z - mx * my;
                    total += (2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2)
                        / ((mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2));
                }
            }
        }
        total / (w * h * 3) as f64
    }

    #[test]
    fn separable_ssim_matches_direct_windows() {
        for (w, h) in [(16, 16), (8, 8), (13, 7)] {
            let a = random_image(3, w, h);
            let b = random_image(4, w, h);
            assert!((ssim(&a, &b).unwrap() - ssim_direct(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let a = random_image(5, 8, 8);
        assert!(loss(&a, &a, 0.2).unwrap().0.abs() < 1e-12);
        let p = Image::filled(8, 8, Vec3::repeat(0.5));
        let q = Image::filled(8, 8, Vec3::repeat(0.25));
        assert!((loss(&p, &q, 0.0).unwrap().0 - 0.25).abs() < 1e-15);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let a = random_image(6, 8, 8);
        let b = random_image(7, 8, 8);
        for lambda in [0.2, 1.0] {
            let (_, g) = loss(&a, &b, lambda).unwrap();
            let mut num = Vec::new();
            for i in 0..a.data().len() {
                let h = 1e-6;
                let mut p = a.clone();
                p.data_mut()[i] += h;
                let mut m = a.clone();
                m.data_mut()[i] -= h;
                num.push((loss(&p, &b, lambda).unwrap().0 - loss(&m, &b, lambda).unwrap().0) / (2.0 * h));
            }
            let diff: f64 = g.data().iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = num.iter().map(|y| y * y).sum::<f64>().sqrt();
            assert!(diff / scale < 1e-4, "lambda {lambda}: {}", diff / scale);
        }
    }

    #[test]
    fn error_map_properties() {
        let a = random_image(8, 6, 5);
        let b = random_image(9, 6, 5);
        let zero = error_image(&a, &a).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert_eq!(error_image(&a, &b).unwrap(), error_image(&b, &a).unwrap());
        let base = Image::new(6, 5);
        let mut hot = base.clone();
        hot.set_pixel(2, 3, Vec3::repeat(1.0));
        let map = error_image(&hot, &base).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                let expect = if (x, y) == (2, 3) { Vec3::repeat(1.0) } else { Vec3::zeros() };
                assert_eq!(map.pixel(x, y), expect);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        error_map(&a, &b, &dir.path().join("e.png")).unwrap();
        assert!(dir.path().join("e.png").exists());
    }
}
