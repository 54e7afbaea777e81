//! Fusion-quality metrics.
//!
//! Scalar statistics of a fused image (entropy, average gradient, spatial
//! frequency, standard deviation) plus the two pair-referenced metrics
//! (sum of correlations of differences, visual information fidelity) and
//! SSIM. [`evaluate_triple`] aggregates the six into a [`MetricReport`].

mod ssim;
mod vif;

pub use ssim::{ssim, ssim_with_window, SSIM_WINDOW};
pub use vif::vif_fusion;

use crate::parallelism;
use crate::raster::ImagePlane;
use crate::{Error, Result};

/// The six quality metrics for one (visible, infrared, fused) triple, with
/// the directional sub-values that compose SF and SCD.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub en: f64,
    pub ag: f64,
    pub sf: f64,
    pub sd: f64,
    pub scd: f64,
    pub vif: f64,
    /// Horizontal / vertical RMS difference components of SF.
    pub sf_h: f64,
    pub sf_v: f64,
    /// Correlation of the visible source with (fused - infrared), and of the
    /// infrared source with (fused - visible).
    pub scd_r_v: f64,
    pub scd_r_r: f64,
}

impl MetricReport {
    /// One CSV row: `pair_id,en,ag,sf,sd,scd,vif` with six decimal places.
    pub fn csv_row(&self, pair_id: &str) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            pair_id, self.en, self.ag, self.sf, self.sd, self.scd, self.vif
        )
    }

    pub fn values(&self) -> [f64; 6] {
        [self.en, self.ag, self.sf, self.sd, self.scd, self.vif]
    }
}

pub const CSV_HEADER: &str = "pair_id,en,ag,sf,sd,scd,vif";

/// Shannon entropy over `levels` equal-width bins of the plane's declared
/// range, in bits. Empty bins contribute nothing.
pub fn entropy(img: &ImagePlane, levels: usize) -> Result<f64> {
    if levels < 2 {
        return Err(Error::InvalidArgument(format!(
            "entropy needs at least 2 levels, got {levels}"
        )));
    }
    let lo = img.range().lo();
    let span = img.range().span();
    let mut counts = vec![0u64; levels];
    for v in img.pixels().iter() {
        let bin = (((v - lo) / span) * levels as f64).floor() as usize;
        counts[bin.min(levels - 1)] += 1;
    }
    let n = img.pixels().len() as f64;
    let mut en = 0.0;
    for c in counts {
        if c > 0 {
            let p = c as f64 / n;
            en -= p * p.log2();
        }
    }
    Ok(en)
}

/// Mean absolute first difference: `(|dh|_1 + |dv|_1) / (H * W)` with interior
/// forward differences. A single row or column contributes nothing in the
/// missing direction.
pub fn average_gradient(img: &ImagePlane) -> f64 {
    let p = img.pixels();
    let (h, w) = p.dim();
    let mut sum = 0.0;
    for i in 0..h {
        for j in 1..w {
            sum += (p[[i, j]] - p[[i, j - 1]]).abs();
        }
    }
    for i in 1..h {
        for j in 0..w {
            sum += (p[[i, j]] - p[[i - 1, j]]).abs();
        }
    }
    sum / (h * w) as f64
}

fn sf_components(img: &ImagePlane) -> (f64, f64) {
    let p = img.pixels();
    let (h, w) = p.dim();
    let mn = (h * w) as f64;
    let mut hsum = 0.0;
    for i in 0..h {
        for j in 1..w {
            let d = p[[i, j]] - p[[i, j - 1]];
            hsum += d * d;
        }
    }
    let mut vsum = 0.0;
    for i in 1..h {
        for j in 0..w {
            let d = p[[i, j]] - p[[i - 1, j]];
            vsum += d * d;
        }
    }
    ((hsum / mn).sqrt(), (vsum / mn).sqrt())
}

/// Spatial frequency: root sum of squares of the horizontal and vertical RMS
/// first differences, each normalised by the full pixel count.
pub fn spatial_frequency(img: &ImagePlane) -> f64 {
    let (h, v) = sf_components(img);
    (h * h + v * v).sqrt()
}

/// Mean squared deviation from the mean. Note: no square root; see
/// [`standard_deviation_rooted`] for the conventional variant.
pub fn standard_deviation(img: &ImagePlane) -> f64 {
    let p = img.pixels();
    let mu = p.sum() / p.len() as f64;
    p.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / p.len() as f64
}

/// Conventional (square-rooted) standard deviation, opt-in.
pub fn standard_deviation_rooted(img: &ImagePlane) -> f64 {
    standard_deviation(img).sqrt()
}

fn pearson(x: &ImagePlane, y: &ndarray::Array2<f64>, what: &'static str) -> Result<f64> {
    let xs = x.pixels();
    let n = xs.len() as f64;
    let mx = xs.sum() / n;
    let my = y.sum() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in xs.iter().zip(y.iter()) {
        let da = a - mx;
        let db = b - my;
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric {
            metric: "SCD",
            reason: format!("zero variance in {what}"),
        });
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Sum of correlations of differences: each source is correlated with the
/// fused image minus the *other* source.
pub fn scd(v: &ImagePlane, r: &ImagePlane, f: &ImagePlane) -> Result<f64> {
    let (rv, rr) = scd_components(v, r, f)?;
    Ok(rv + rr)
}

pub fn scd_components(v: &ImagePlane, r: &ImagePlane, f: &ImagePlane) -> Result<(f64, f64)> {
    if v.dim() != r.dim() || v.dim() != f.dim() {
        return Err(Error::shape_mismatch(
            "scd inputs",
            format!("{:?}", v.dim()),
            format!("{:?} / {:?}", r.dim(), f.dim()),
        ));
    }
    let d_vf = f.pixels() - r.pixels();
    let d_rf = f.pixels() - v.pixels();
    let rv = pearson(v, &d_vf, "visible source or fused-minus-infrared difference")?;
    let rr = pearson(r, &d_rf, "infrared source or fused-minus-visible difference")?;
    Ok((rv, rr))
}

/// Computes the full report for one triple. Either every metric succeeds or
/// the first failure is returned with the metric's identity attached.
pub fn evaluate_triple(v: &ImagePlane, r: &ImagePlane, f: &ImagePlane) -> Result<MetricReport> {
    if v.dim() != r.dim() || v.dim() != f.dim() {
        return Err(Error::shape_mismatch(
            "metric triple",
            format!("{:?}", v.dim()),
            format!("{:?} / {:?}", r.dim(), f.dim()),
        ));
    }
    let en = entropy(f, 256)?;
    let ag = average_gradient(f);
    let (sf_h, sf_v) = sf_components(f);
    let sf = (sf_h * sf_h + sf_v * sf_v).sqrt();
    let sd = standard_deviation(f);
    let (scd_r_v, scd_r_r) = scd_components(v, r, f)?;
    let vif = vif_fusion(v, r, f)?;
    Ok(MetricReport {
        en,
        ag,
        sf,
        sd,
        scd: scd_r_v + scd_r_r,
        vif,
        sf_h,
        sf_v,
        scd_r_v,
        scd_r_r,
    })
}

/// Evaluates a batch of triples, one worker per triple, preserving input
/// order in the output.
pub fn evaluate_batch(
    triples: &[(ImagePlane, ImagePlane, ImagePlane)],
) -> Vec<Result<MetricReport>> {
    parallelism::map_collect(triples.len(), |i| {
        let (v, r, f) = &triples[i];
        evaluate_triple(v, r, f)
    })
}
