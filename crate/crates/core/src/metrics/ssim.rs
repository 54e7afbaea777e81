//! Mean structural similarity with a Gaussian window.

use ndarray::Array2;

use crate::raster::ImagePlane;
use crate::{Error, Result};

/// Default window side length.
pub const SSIM_WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Normalised 1-D Gaussian taps for a `window`-wide kernel.
pub(crate) fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let mut taps: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable valid-mode filtering with the same 1-D taps on rows and columns.
pub(crate) fn filter_valid(a: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let k = taps.len();
    let (h, w) = a.dim();
    let mut rows = Array2::zeros((h, w - k + 1));
    for i in 0..h {
        for j in 0..w - k + 1 {
            let mut acc = 0.0;
            for t in 0..k {
                acc += taps[t] * a[[i, j + t]];
            }
            rows[[i, j]] = acc;
        }
    }
    let mut out = Array2::zeros((h - k + 1, w - k + 1));
    for i in 0..h - k + 1 {
        for j in 0..w - k + 1 {
            let mut acc = 0.0;
            for t in 0..k {
                acc += taps[t] * rows[[i + t, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Mean SSIM over the valid window positions, with an 11x11 Gaussian window
/// (sigma 1.5) and stabilisers derived from the planes' declared range.
pub fn ssim(x: &ImagePlane, y: &ImagePlane) -> Result<f64> {
    ssim_with_window(x, y, SSIM_WINDOW)
}

/// SSIM with an explicit window side (odd, at least 3). The training loss
/// shrinks the window on images narrower than the default.
pub fn ssim_with_window(x: &ImagePlane, y: &ImagePlane, window: usize) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::shape_mismatch(
            "ssim inputs",
            format!("{:?}", x.dim()),
            format!("{:?}", y.dim()),
        ));
    }
    if x.range() != y.range() {
        return Err(Error::InvalidArgument(
            "ssim inputs must share a value range".into(),
        ));
    }
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "ssim window must be odd and >= 3, got {window}"
        )));
    }
    let (h, w) = x.dim();
    if h < window || w < window {
        return Err(Error::TooSmall {
            context: format!("{h}x{w} image vs {window}x{window} ssim window"),
        });
    }
    let range = x.range().span();
    let c1 = (K1 * range) * (K1 * range);
    let c2 = (K2 * range) * (K2 * range);
    let taps = gaussian_taps(window, SIGMA);

    let xs = x.pixels();
    let ys = y.pixels();
    let mu_x = filter_valid(xs, &taps);
    let mu_y = filter_valid(ys, &taps);
    let xx = filter_valid(&(xs * xs), &taps);
    let yy = filter_valid(&(ys * ys), &taps);
    let xy = filter_valid(&(xs * ys), &taps);

    let mut acc = 0.0;
    for ((mx, my), ((sxx, syy), sxy)) in mu_x
        .iter()
        .zip(mu_y.iter())
        .zip(xx.iter().zip(yy.iter()).zip(xy.iter()))
    {
        let var_x = sxx - mx * mx;
        let var_y = syy - my * my;
        let cov = sxy - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (var_x + var_y + c2);
        acc += num / den;
    }
    Ok(acc / mu_x.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::ValueRange;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn unit(values: Array2<f64>) -> ImagePlane {
        ImagePlane::new(values, ValueRange::Unit).unwrap()
    }

    #[test]
    fn identity_is_one() {
        let x = unit(Array2::from_shape_fn((16, 16), |(i, j)| {
            (((i * 13 + j * 7) % 17) as f64) / 17.0
        }));
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_planes_match_closed_form() {
        let x = unit(Array2::from_elem((16, 16), 0.2));
        let y = unit(Array2::from_elem((16, 16), 0.4));
        let c1 = 1e-4;
        let expected = (2.0 * 0.2 * 0.4 + c1) / (0.2f64 * 0.2 + 0.4 * 0.4 + c1);
        assert!((ssim(&x, &y).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn window_must_fit() {
        let x = unit(Array2::zeros((8, 8)));
        assert!(matches!(ssim(&x, &x), Err(crate::Error::TooSmall { .. })));
        assert!(ssim_with_window(&x, &x, 7).is_ok());
    }

    #[test]
    fn gaussian_taps_normalised_and_symmetric() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        for i in 0..5 {
            assert!((t[i] - t[10 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_in_arguments() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let x = unit(Array2::from_shape_fn((20, 20), |_| rng.random::<f64>()));
        let y = unit(Array2::from_shape_fn((20, 20), |_| rng.random::<f64>()));
        let a = ssim(&x, &y).unwrap();
        let b = ssim(&y, &x).unwrap();
        assert!((a - b).abs() < 1e-14);
        assert!(a < 1.0);
    }
}
