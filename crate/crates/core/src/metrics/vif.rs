//! Multi-scale visual information fidelity for fusion.
//!
//! Both sources and the fused image are decomposed over four dyadic scales
//! (Gaussian smoothing + 2x subsampling). At every sliding-window position of
//! every scale a scalar-gain Gaussian channel model yields the visual
//! information carried with distortion (through the fusion) and without it;
//! per position the more informative source is selected. Each scale
//! contributes the ratio of summed distorted to distortion-free information,
//! and scales are combined with fixed weights. Scales left without any valid
//! window on small inputs are dropped and the weights renormalised, so a
//! distortion-free triple scores exactly 1.

use ndarray::Array2;

use super::ssim::{filter_valid, gaussian_taps};
use crate::raster::{ImagePlane, ValueRange};
use crate::{Error, Result};

const SCALE_WINDOWS: [usize; 4] = [7, 5, 3, 3];
const SCALE_WEIGHTS: [f64; 4] = [0.45, 0.30, 0.15, 0.10];
/// Variance of the additive visual-noise channel, in the 8-bit domain.
const SIGMA_N_SQ: f64 = 2.0;
/// Floor applied to variance estimates.
const EPS: f64 = 2e-16;

/// Symmetric-padded separable smoothing (output size equals input size).
fn filter_same(a: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let k = taps.len();
    let c = k / 2;
    let (h, w) = a.dim();
    let mirror = |idx: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = idx;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - i - 1;
        }
        i as usize
    };
    let mut rows = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for t in 0..k {
                let jj = mirror(j as isize + t as isize - c as isize, w);
                acc += taps[t] * a[[i, jj]];
            }
            rows[[i, j]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for t in 0..k {
                let ii = mirror(i as isize + t as isize - c as isize, h);
                acc += taps[t] * rows[[ii, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

fn downsample2(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h.div_ceil(2), w.div_ceil(2)), |(i, j)| a[[2 * i, 2 * j]])
}

/// Distorted/distortion-free information of one source at every window
/// position, from Gaussian-weighted local moments.
fn channel_information(
    mu_x: &Array2<f64>,
    mu_f: &Array2<f64>,
    xx: &Array2<f64>,
    ff: &Array2<f64>,
    xf: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let dim = mu_x.dim();
    let mut vid = Array2::zeros(dim);
    let mut vind = Array2::zeros(dim);
    for i in 0..dim.0 {
        for j in 0..dim.1 {
            let mut sigma_x = xx[[i, j]] - mu_x[[i, j]] * mu_x[[i, j]];
            let sigma_f = ff[[i, j]] - mu_f[[i, j]] * mu_f[[i, j]];
            let cov = xf[[i, j]] - mu_x[[i, j]] * mu_f[[i, j]];
            let mut g = cov / (sigma_x + EPS);
            let mut sv = sigma_f - g * cov;
            if sigma_x < EPS {
                g = 0.0;
                sv = sigma_f;
                sigma_x = 0.0;
            }
            if sigma_f < EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = sigma_f;
                g = 0.0;
            }
            if sv < EPS {
                sv = EPS;
            }
            vid[[i, j]] = (1.0 + g * g * sigma_x / (sv + SIGMA_N_SQ)).log2();
            vind[[i, j]] = (1.0 + sigma_x / SIGMA_N_SQ).log2();
        }
    }
    (vid, vind)
}

/// Visual information fidelity of a fused image against its two sources.
pub fn vif_fusion(v: &ImagePlane, r: &ImagePlane, f: &ImagePlane) -> Result<f64> {
    if v.dim() != r.dim() || v.dim() != f.dim() {
        return Err(Error::shape_mismatch(
            "vif inputs",
            format!("{:?}", v.dim()),
            format!("{:?} / {:?}", r.dim(), f.dim()),
        ));
    }
    let (h, w) = v.dim();
    if h < SCALE_WINDOWS[0] || w < SCALE_WINDOWS[0] {
        return Err(Error::TooSmall {
            context: format!(
                "{h}x{w} image vs {0}x{0} finest analysis window",
                SCALE_WINDOWS[0]
            ),
        });
    }

    let mut vv = v.to_range(ValueRange::Byte).pixels().clone();
    let mut rr = r.to_range(ValueRange::Byte).pixels().clone();
    let mut ff = f.to_range(ValueRange::Byte).pixels().clone();

    let mut weighted = 0.0;
    let mut weight_mass = 0.0;
    for (scale, (&win, &p)) in SCALE_WINDOWS.iter().zip(SCALE_WEIGHTS.iter()).enumerate() {
        let taps = gaussian_taps(win, win as f64 / 5.0);
        if scale > 0 {
            vv = downsample2(&filter_same(&vv, &taps));
            rr = downsample2(&filter_same(&rr, &taps));
            ff = downsample2(&filter_same(&ff, &taps));
        }
        let (sh, sw) = vv.dim();
        if sh < win || sw < win {
            continue;
        }
        let mu_v = filter_valid(&vv, &taps);
        let mu_r = filter_valid(&rr, &taps);
        let mu_f = filter_valid(&ff, &taps);
        let v2 = filter_valid(&(&vv * &vv), &taps);
        let r2 = filter_valid(&(&rr * &rr), &taps);
        let f2 = filter_valid(&(&ff * &ff), &taps);
        let vf = filter_valid(&(&vv * &ff), &taps);
        let rf = filter_valid(&(&rr * &ff), &taps);

        let (vid_v, vind_v) = channel_information(&mu_v, &mu_f, &v2, &f2, &vf);
        let (vid_r, vind_r) = channel_information(&mu_r, &mu_f, &r2, &f2, &rf);

        let mut num = 0.0;
        let mut den = 0.0;
        for idx in 0..vid_v.len() {
            let i = (idx / vid_v.dim().1, idx % vid_v.dim().1);
            // take the source carrying more reference information here
            if vind_v[i] >= vind_r[i] {
                num += vid_v[i];
                den += vind_v[i];
            } else {
                num += vid_r[i];
                den += vind_r[i];
            }
        }
        if den > 0.0 {
            weighted += p * (num / den);
            weight_mass += p;
        }
    }
    if weight_mass == 0.0 {
        // no scale carried any information (all inputs constant)
        return Ok(0.0);
    }
    Ok(weighted / weight_mass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn unit(values: Array2<f64>) -> ImagePlane {
        ImagePlane::new(values, ValueRange::Unit).unwrap()
    }

    fn natural_like(seed: u64) -> ImagePlane {
        // smooth gradient plus seeded texture
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        unit(Array2::from_shape_fn((32, 32), |(i, j)| {
            let base = (i as f64 / 62.0) + (j as f64 / 124.0);
            (base + rng.random::<f64>() * 0.25).clamp(0.0, 1.0)
        }))
    }

    #[test]
    fn distortion_free_triple_scores_one() {
        let x = natural_like(1);
        let value = vif_fusion(&x, &x, &x).unwrap();
        assert!((value - 1.0).abs() < 1e-6, "got {value}");
    }

    #[test]
    fn constant_fused_image_scores_near_zero() {
        let v = natural_like(2);
        let r = natural_like(3);
        let f = unit(Array2::from_elem((32, 32), 0.5));
        let value = vif_fusion(&v, &r, &f).unwrap();
        assert!(value < 0.1, "got {value}");
    }

    #[test]
    fn rejects_images_below_the_finest_window() {
        let x = unit(Array2::zeros((6, 6)));
        assert!(matches!(
            vif_fusion(&x, &x, &x),
            Err(Error::TooSmall { .. })
        ));
    }

    #[test]
    fn transpose_invariant() {
        let v = natural_like(4);
        let r = natural_like(5);
        let f = natural_like(6);
        let t = |p: &ImagePlane| unit(p.pixels().t().to_owned());
        let a = vif_fusion(&v, &r, &f).unwrap();
        let b = vif_fusion(&t(&v), &t(&r), &t(&f)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn all_constant_inputs_carry_no_information() {
        let c = unit(Array2::from_elem((16, 16), 0.25));
        assert_eq!(vif_fusion(&c, &c, &c).unwrap(), 0.0);
    }
}
