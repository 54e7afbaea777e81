//! Image and mask data model: loading, value-range handling, colour-space
//! decoupling, saliency masks, and aligned patch extraction.
//!
//! All pixel data is `f64`. A plane always carries an explicit [`ValueRange`]
//! so conversions between the 8-bit file domain, the unit domain used by the
//! metrics, and the symmetric domain consumed by the network are total and
//! reversible (within one 8-bit quantisation step).

use std::path::Path;

use image::DynamicImage;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::{Error, Result};

/// Declared value interval of an [`ImagePlane`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ValueRange {
    /// 8-bit file domain, [0, 255].
    Byte,
    /// Unit domain, [0, 1].
    Unit,
    /// Symmetric domain, [-1, 1]; the network's input/output domain.
    Symmetric,
}

impl ValueRange {
    pub fn lo(self) -> f64 {
        match self {
            ValueRange::Byte | ValueRange::Unit => 0.0,
            ValueRange::Symmetric => -1.0,
        }
    }

    pub fn hi(self) -> f64 {
        match self {
            ValueRange::Byte => 255.0,
            ValueRange::Unit | ValueRange::Symmetric => 1.0,
        }
    }

    pub fn span(self) -> f64 {
        self.hi() - self.lo()
    }
}

/// A single-channel raster with an explicit value range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    pixels: Array2<f64>,
    range: ValueRange,
}

impl ImagePlane {
    /// Wraps a pixel array, checking that every value lies inside `range`.
    pub fn new(pixels: Array2<f64>, range: ValueRange) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::TooSmall {
                context: format!("image plane must be at least 1x1, got {h}x{w}"),
            });
        }
        let (lo, hi) = (range.lo(), range.hi());
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || **v < lo || **v > hi) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {bad} outside declared range [{lo}, {hi}]"
            )));
        }
        Ok(Self { pixels, range })
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    /// Affine remap onto `target`. Endpoints map to endpoints; the round trip
    /// back to the source range reproduces the input within one 8-bit step.
    pub fn to_range(&self, target: ValueRange) -> ImagePlane {
        if target == self.range {
            return self.clone();
        }
        let (slo, span_s) = (self.range.lo(), self.range.span());
        let (tlo, span_t) = (target.lo(), target.span());
        let scale = span_t / span_s;
        let pixels = self.pixels.mapv(|v| {
            let t = (v - slo) * scale + tlo;
            t.clamp(target.lo(), target.hi())
        });
        ImagePlane {
            pixels,
            range: target,
        }
    }

    /// Quantises to 8-bit levels (rounding) without changing the range tag.
    pub fn quantize_u8(&self) -> Vec<u8> {
        let byte = self.to_range(ValueRange::Byte);
        byte.pixels.iter().map(|v| v.round() as u8).collect()
    }
}

/// Three aligned colour channels in [0, 1].
#[derive(Debug, Clone)]
pub struct ColorImage {
    pub r: Array2<f64>,
    pub g: Array2<f64>,
    pub b: Array2<f64>,
}

impl ColorImage {
    pub fn new(r: Array2<f64>, g: Array2<f64>, b: Array2<f64>) -> Result<Self> {
        if r.dim() != g.dim() || r.dim() != b.dim() {
            return Err(Error::shape_mismatch(
                "colour channels",
                format!("{:?}", r.dim()),
                format!("{:?} / {:?}", g.dim(), b.dim()),
            ));
        }
        Ok(Self { r, g, b })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.r.dim()
    }
}

/// Luminance plane plus chroma planes. Chroma is stored in [0, 1] with 0.5 as
/// the neutral (achromatic) value.
#[derive(Debug, Clone)]
pub struct YCbCrImage {
    pub y: ImagePlane,
    pub cb: Array2<f64>,
    pub cr: Array2<f64>,
}

// BT.601 full-range analysis/synthesis coefficients.
const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;

/// Decouples an RGB image into luminance and chroma (BT.601 full range).
pub fn rgb_to_ycbcr(img: &ColorImage) -> YCbCrImage {
    let (h, w) = img.dim();
    let mut y = Array2::zeros((h, w));
    let mut cb = Array2::zeros((h, w));
    let mut cr = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let (r, g, b) = (img.r[[i, j]], img.g[[i, j]], img.b[[i, j]]);
            let yy = KR * r + KG * g + KB * b;
            y[[i, j]] = yy;
            cb[[i, j]] = (b - yy) / (2.0 * (1.0 - KB)) + 0.5;
            cr[[i, j]] = (r - yy) / (2.0 * (1.0 - KR)) + 0.5;
        }
    }
    YCbCrImage {
        y: ImagePlane {
            pixels: y.mapv(|v| v.clamp(0.0, 1.0)),
            range: ValueRange::Unit,
        },
        cb,
        cr,
    }
}

/// Inverse of [`rgb_to_ycbcr`]. Outputs are clamped to [0, 1].
pub fn ycbcr_to_rgb(img: &YCbCrImage) -> Result<ColorImage> {
    if img.y.dim() != img.cb.dim() || img.y.dim() != img.cr.dim() {
        return Err(Error::shape_mismatch(
            "ycbcr channels",
            format!("{:?}", img.y.dim()),
            format!("{:?} / {:?}", img.cb.dim(), img.cr.dim()),
        ));
    }
    let y = img.y.to_range(ValueRange::Unit);
    let (h, w) = y.dim();
    let mut r = Array2::zeros((h, w));
    let mut g = Array2::zeros((h, w));
    let mut b = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let yy = y.pixels[[i, j]];
            let pb = img.cb[[i, j]] - 0.5;
            let pr = img.cr[[i, j]] - 0.5;
            let rr = yy + 2.0 * (1.0 - KR) * pr;
            let bb = yy + 2.0 * (1.0 - KB) * pb;
            let gg = (yy - KR * rr - KB * bb) / KG;
            r[[i, j]] = rr.clamp(0.0, 1.0);
            g[[i, j]] = gg.clamp(0.0, 1.0);
            b[[i, j]] = bb.clamp(0.0, 1.0);
        }
    }
    ColorImage::new(r, g, b)
}

/// Binary foreground mask with entries in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMask {
    m: Array2<f64>,
}

impl SaliencyMask {
    pub fn new(m: Array2<f64>) -> Result<Self> {
        if m.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::InvalidArgument(
                "mask entries must be exactly 0 or 1".into(),
            ));
        }
        Ok(Self { m })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.m
    }

    pub fn dim(&self) -> (usize, usize) {
        self.m.dim()
    }

    /// The background mask `1 - m`.
    pub fn complement(&self) -> SaliencyMask {
        SaliencyMask {
            m: self.m.mapv(|v| 1.0 - v),
        }
    }

    /// Elementwise product with an aligned plane's pixel array.
    pub fn apply(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if self.m.dim() != x.dim() {
            return Err(Error::shape_mismatch(
                "mask vs plane",
                format!("{:?}", self.m.dim()),
                format!("{:?}", x.dim()),
            ));
        }
        Ok(&self.m * x)
    }
}

/// Result of generating a mask from intensity statistics.
#[derive(Debug, Clone)]
pub struct GeneratedMask {
    pub mask: SaliencyMask,
    /// Set when the source image was constant and no pixel could exceed its
    /// own quantile; the mask is then all zeros.
    pub degenerate: bool,
}

/// Thresholds `ir` at the given intensity quantile of its own pixels.
///
/// `quantile == 0` admits every pixel. With `keep_largest_component` set, only
/// the largest 4-connected foreground component is kept.
pub fn mask_from_quantile(
    ir: &ImagePlane,
    quantile: f64,
    keep_largest_component: bool,
) -> Result<GeneratedMask> {
    if !(0.0..1.0).contains(&quantile) {
        return Err(Error::InvalidArgument(format!(
            "quantile must lie in [0, 1), got {quantile}"
        )));
    }
    let (h, w) = ir.dim();
    if quantile == 0.0 {
        return Ok(GeneratedMask {
            mask: SaliencyMask {
                m: Array2::ones((h, w)),
            },
            degenerate: false,
        });
    }
    let mut sorted: Vec<f64> = ir.pixels().iter().copied().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((quantile * (sorted.len() - 1) as f64).floor() as usize).min(sorted.len() - 1);
    let threshold = sorted[idx];
    let mut m = ir.pixels().mapv(|v| if v > threshold { 1.0 } else { 0.0 });
    let degenerate = m.iter().all(|v| *v == 0.0);
    if keep_largest_component && !degenerate {
        m = largest_component(&m);
    }
    Ok(GeneratedMask {
        mask: SaliencyMask { m },
        degenerate,
    })
}

fn largest_component(m: &Array2<f64>) -> Array2<f64> {
    let (h, w) = m.dim();
    let mut label = vec![0usize; h * w];
    let mut sizes = vec![0usize; 1];
    let mut next = 1usize;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if label[start] != 0 || m[[start / w, start % w]] == 0.0 {
            continue;
        }
        sizes.push(0);
        stack.push(start);
        label[start] = next;
        while let Some(p) = stack.pop() {
            sizes[next] += 1;
            let (i, j) = (p / w, p % w);
            let mut visit = |q: usize| {
                if label[q] == 0 && m[[q / w, q % w]] == 1.0 {
                    label[q] = next;
                    stack.push(q);
                }
            };
            if i > 0 {
                visit(p - w);
            }
            if i + 1 < h {
                visit(p + w);
            }
            if j > 0 {
                visit(p - 1);
            }
            if j + 1 < w {
                visit(p + 1);
            }
        }
        next += 1;
    }
    let best = (1..next).max_by_key(|l| sizes[*l]).unwrap_or(0);
    let mut out = Array2::zeros((h, w));
    for p in 0..h * w {
        if label[p] == best {
            out[[p / w, p % w]] = 1.0;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// File i/o (8-bit PNG and TIFF only)
// ---------------------------------------------------------------------------

fn check_raster_ext(path: &Path) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "png" | "tif" | "tiff" => Ok(()),
        other => Err(Error::InvalidArgument(format!(
            "unsupported raster format '.{other}' for {} (png and tiff only)",
            path.display()
        ))),
    }
}

fn open_dynamic(path: &Path) -> Result<DynamicImage> {
    check_raster_ext(path)?;
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Decode {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            reason: "zero-sized image".into(),
        });
    }
    Ok(img)
}

/// Loads an 8-bit single- or three-channel raster as a grayscale plane in the
/// byte range. Three-channel inputs are reduced to luma (BT.601, rounded).
pub fn load_grayscale(path: &Path) -> Result<ImagePlane> {
    let img = open_dynamic(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut pixels = Array2::zeros((h, w));
    match img {
        DynamicImage::ImageLuma8(buf) => {
            for (j, i, p) in buf.enumerate_pixels() {
                pixels[[i as usize, j as usize]] = p.0[0] as f64;
            }
        }
        DynamicImage::ImageLumaA8(buf) => {
            for (j, i, p) in buf.enumerate_pixels() {
                pixels[[i as usize, j as usize]] = p.0[0] as f64;
            }
        }
        DynamicImage::ImageRgb8(buf) => {
            for (j, i, p) in buf.enumerate_pixels() {
                let [r, g, b] = p.0;
                pixels[[i as usize, j as usize]] =
                    (KR * r as f64 + KG * g as f64 + KB * b as f64).round();
            }
        }
        DynamicImage::ImageRgba8(buf) => {
            for (j, i, p) in buf.enumerate_pixels() {
                let [r, g, b, _] = p.0;
                pixels[[i as usize, j as usize]] =
                    (KR * r as f64 + KG * g as f64 + KB * b as f64).round();
            }
        }
        _ => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                reason: "only 8-bit rasters are supported".into(),
            })
        }
    }
    ImagePlane::new(pixels, ValueRange::Byte)
}

/// Loads an 8-bit three-channel raster with channels scaled to [0, 1].
/// Grayscale files are replicated across the three channels.
pub fn load_color(path: &Path) -> Result<ColorImage> {
    let img = open_dynamic(path)?;
    let rgb = match img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => img.to_rgb8(),
        _ => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                reason: "only 8-bit rasters are supported".into(),
            })
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut r = Array2::zeros((h, w));
    let mut g = Array2::zeros((h, w));
    let mut b = Array2::zeros((h, w));
    for (j, i, p) in rgb.enumerate_pixels() {
        r[[i as usize, j as usize]] = p.0[0] as f64 / 255.0;
        g[[i as usize, j as usize]] = p.0[1] as f64 / 255.0;
        b[[i as usize, j as usize]] = p.0[2] as f64 / 255.0;
    }
    ColorImage::new(r, g, b)
}

/// True when `path` decodes as a single-channel (grayscale) raster.
pub fn is_grayscale_file(path: &Path) -> Result<bool> {
    let img = open_dynamic(path)?;
    Ok(matches!(
        img,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_)
    ))
}

/// Loads a mask raster, binarising at half of the 8-bit range. The shape must
/// match `paired`.
pub fn load_mask(path: &Path, paired: &ImagePlane) -> Result<SaliencyMask> {
    let plane = load_grayscale(path)?;
    if plane.dim() != paired.dim() {
        return Err(Error::shape_mismatch(
            format!("mask {} vs paired image", path.display()),
            format!("{:?}", paired.dim()),
            format!("{:?}", plane.dim()),
        ));
    }
    let m = plane.pixels().mapv(|v| if v > 127.5 { 1.0 } else { 0.0 });
    Ok(SaliencyMask { m })
}

/// Writes a plane as an 8-bit grayscale raster (PNG or TIFF by extension).
pub fn save_plane(path: &Path, plane: &ImagePlane) -> Result<()> {
    check_raster_ext(path)?;
    let (h, w) = plane.dim();
    let data = plane.quantize_u8();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, data)
        .expect("buffer size matches dimensions");
    buf.save(path).map_err(|e| Error::Encode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes a colour image as an 8-bit RGB raster.
pub fn save_color(path: &Path, img: &ColorImage) -> Result<()> {
    check_raster_ext(path)?;
    let (h, w) = img.dim();
    let mut data = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            data.push((img.r[[i, j]] * 255.0).round().clamp(0.0, 255.0) as u8);
            data.push((img.g[[i, j]] * 255.0).round().clamp(0.0, 255.0) as u8);
            data.push((img.b[[i, j]] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, data)
        .expect("buffer size matches dimensions");
    buf.save(path).map_err(|e| Error::Encode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes a mask as a single-channel PNG (0 or 255).
pub fn save_mask(path: &Path, mask: &SaliencyMask) -> Result<()> {
    let plane = ImagePlane::new(mask.values().mapv(|v| v * 255.0), ValueRange::Byte)?;
    save_plane(path, &plane)
}

// ---------------------------------------------------------------------------
// Patch extraction
// ---------------------------------------------------------------------------

/// One aligned patch cropped from a source pair.
#[derive(Debug, Clone)]
pub struct Patch {
    pub ir: ImagePlane,
    pub vis: ImagePlane,
    pub mask: Option<SaliencyMask>,
    /// Index of the source pair this patch came from.
    pub pair_index: usize,
    /// Top-left (row, col) offset inside the source pair.
    pub offset: (usize, usize),
}

/// A set of fixed-size aligned patches with provenance.
#[derive(Debug, Clone, Default)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub patch_size: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn merge(mut sets: Vec<PatchSet>) -> PatchSet {
        let mut out = PatchSet::default();
        for s in &mut sets {
            out.patch_size = s.patch_size;
            out.patches.append(&mut s.patches);
        }
        out
    }
}

fn crop(pixels: &Array2<f64>, offset: (usize, usize), p: usize) -> Array2<f64> {
    pixels
        .slice(ndarray::s![offset.0..offset.0 + p, offset.1..offset.1 + p])
        .to_owned()
}

/// Crops `count` aligned `p x p` patches from a source pair at uniformly
/// sampled offsets. Deterministic for a fixed seed; the same offset is applied
/// to every plane (and the mask) of the pair.
pub fn crop_patches(
    ir: &ImagePlane,
    vis: &ImagePlane,
    mask: Option<&SaliencyMask>,
    p: usize,
    count: usize,
    pair_index: usize,
    seed: u64,
) -> Result<PatchSet> {
    if ir.dim() != vis.dim() {
        return Err(Error::shape_mismatch(
            "source pair",
            format!("{:?}", ir.dim()),
            format!("{:?}", vis.dim()),
        ));
    }
    if let Some(m) = mask {
        if m.dim() != ir.dim() {
            return Err(Error::shape_mismatch(
                "mask vs source pair",
                format!("{:?}", ir.dim()),
                format!("{:?}", m.dim()),
            ));
        }
    }
    let (h, w) = ir.dim();
    if p == 0 || p > h || p > w {
        return Err(Error::TooSmall {
            context: format!("patch size {p} does not fit a {h}x{w} image"),
        });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut patches = Vec::with_capacity(count);
    for _ in 0..count {
        let i = rng.random_range(0..=h - p);
        let j = rng.random_range(0..=w - p);
        patches.push(Patch {
            ir: ImagePlane {
                pixels: crop(ir.pixels(), (i, j), p),
                range: ir.range(),
            },
            vis: ImagePlane {
                pixels: crop(vis.pixels(), (i, j), p),
                range: vis.range(),
            },
            mask: mask.map(|m| SaliencyMask {
                m: crop(m.values(), (i, j), p),
            }),
            pair_index,
            offset: (i, j),
        });
    }
    Ok(PatchSet {
        patches,
        patch_size: p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn plane(values: Array2<f64>, range: ValueRange) -> ImagePlane {
        ImagePlane::new(values, range).unwrap()
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let img = plane(array![[0.0, 255.0, 128.0]], ValueRange::Byte);
        let sym = img.to_range(ValueRange::Symmetric);
        assert_eq!(sym.pixels()[[0, 0]], -1.0);
        assert_eq!(sym.pixels()[[0, 1]], 1.0);
        let expected = 2.0 * 128.0 / 255.0 - 1.0;
        assert!((sym.pixels()[[0, 2]] - expected).abs() < 1e-15);
    }

    #[test]
    fn normalize_round_trip_all_256_levels() {
        let values = Array2::from_shape_fn((16, 16), |(i, j)| (i * 16 + j) as f64);
        let img = plane(values, ValueRange::Byte);
        for target in [ValueRange::Unit, ValueRange::Symmetric] {
            let back = img.to_range(target).to_range(ValueRange::Byte);
            for (a, b) in img.pixels().iter().zip(back.pixels().iter()) {
                assert!((a - b).abs() < 1.0, "level {a} came back as {b}");
            }
        }
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(ImagePlane::new(array![[1.5]], ValueRange::Unit).is_err());
        assert!(ImagePlane::new(array![[f64::NAN]], ValueRange::Unit).is_err());
    }

    #[test]
    fn gray_pixel_has_neutral_chroma() {
        let v = 0.3;
        let img = ColorImage::new(
            Array2::from_elem((2, 2), v),
            Array2::from_elem((2, 2), v),
            Array2::from_elem((2, 2), v),
        )
        .unwrap();
        let ycc = rgb_to_ycbcr(&img);
        for p in ycc.cb.iter().chain(ycc.cr.iter()) {
            assert!((p - 0.5).abs() < 1e-12);
        }
        assert!((ycc.y.pixels()[[0, 0]] - v).abs() < 1e-12);
    }

    #[test]
    fn pure_red_matches_analysis_matrix() {
        let img = ColorImage::new(
            Array2::from_elem((1, 1), 1.0),
            Array2::zeros((1, 1)),
            Array2::zeros((1, 1)),
        )
        .unwrap();
        let ycc = rgb_to_ycbcr(&img);
        assert!((ycc.y.pixels()[[0, 0]] - 0.299).abs() < 1e-12);
        assert!((ycc.cb[[0, 0]] - (0.5 - 0.299 / (2.0 * 0.886))).abs() < 1e-12);
        assert!((ycc.cr[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ycbcr_round_trip_within_one_level() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mk = |rng: &mut ChaCha12Rng| {
            Array2::from_shape_fn((16, 16), |_| {
                (rng.random_range(0..=255u32) as f64) / 255.0
            })
        };
        for _ in 0..4 {
            let img = ColorImage::new(mk(&mut rng), mk(&mut rng), mk(&mut rng)).unwrap();
            let back = ycbcr_to_rgb(&rgb_to_ycbcr(&img)).unwrap();
            for (a, b) in img
                .r
                .iter()
                .zip(back.r.iter())
                .chain(img.g.iter().zip(back.g.iter()))
                .chain(img.b.iter().zip(back.b.iter()))
            {
                assert!((a - b).abs() <= 1.0 / 255.0, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn mask_complement_partitions_any_plane() {
        let m = SaliencyMask::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let x = array![[0.3, -0.7], [0.1, 0.9]];
        let sum = m.apply(&x).unwrap() + m.complement().apply(&x).unwrap();
        assert_eq!(sum, x);
    }

    #[test]
    fn quantile_mask_constant_image_is_degenerate() {
        let img = plane(Array2::from_elem((8, 8), 42.0), ValueRange::Byte);
        let out = mask_from_quantile(&img, 0.5, false).unwrap();
        assert!(out.degenerate);
        assert!(out.mask.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn quantile_mask_marks_hot_pixel() {
        let mut values = Array2::from_elem((16, 16), 10.0);
        values[[3, 5]] = 200.0;
        let img = plane(values, ValueRange::Byte);
        let out = mask_from_quantile(&img, 0.99, false).unwrap();
        assert!(!out.degenerate);
        assert_eq!(out.mask.values().sum(), 1.0);
        assert_eq!(out.mask.values()[[3, 5]], 1.0);
    }

    #[test]
    fn quantile_zero_admits_everything() {
        let img = plane(array![[1.0, 2.0], [3.0, 4.0]], ValueRange::Byte);
        let out = mask_from_quantile(&img, 0.0, false).unwrap();
        assert!(out.mask.values().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn largest_component_filter_keeps_the_biggest_blob() {
        let mut values = Array2::from_elem((8, 8), 0.0);
        for j in 0..4 {
            values[[1, j]] = 255.0;
        }
        values[[6, 6]] = 255.0;
        let img = plane(values, ValueRange::Byte);
        let out = mask_from_quantile(&img, 0.5, true).unwrap();
        assert_eq!(out.mask.values().sum(), 4.0);
        assert_eq!(out.mask.values()[[6, 6]], 0.0);
    }

    #[test]
    fn crop_exact_fit_has_single_offset() {
        let img = plane(Array2::zeros((64, 64)), ValueRange::Unit);
        let set = crop_patches(&img, &img, None, 64, 5, 0, 1).unwrap();
        assert_eq!(set.len(), 5);
        assert!(set.patches.iter().all(|p| p.offset == (0, 0)));
    }

    #[test]
    fn crop_is_deterministic_per_seed() {
        let values = Array2::from_shape_fn((40, 40), |(i, j)| (i + j) as f64 / 80.0);
        let img = plane(values, ValueRange::Unit);
        let a = crop_patches(&img, &img, None, 16, 10, 0, 9).unwrap();
        let b = crop_patches(&img, &img, None, 16, 10, 0, 9).unwrap();
        let offs = |s: &PatchSet| s.patches.iter().map(|p| p.offset).collect::<Vec<_>>();
        assert_eq!(offs(&a), offs(&b));
        let c = crop_patches(&img, &img, None, 16, 10, 0, 10).unwrap();
        assert_ne!(offs(&a), offs(&c));
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let img = plane(Array2::zeros((64, 64)), ValueRange::Unit);
        assert!(crop_patches(&img, &img, None, 128, 1, 0, 0).is_err());
    }

    #[test]
    fn file_round_trip_png() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = plane(Array2::from_elem((64, 64), 128.0), ValueRange::Byte);
        save_plane(&path, &img).unwrap();
        let back = load_grayscale(&path).unwrap();
        assert_eq!(back.dim(), (64, 64));
        assert!(back.pixels().iter().all(|v| *v == 128.0));
    }

    #[test]
    fn file_round_trip_tiff() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.tif");
        let values = Array2::from_shape_fn((9, 13), |(i, j)| ((i * 13 + j) % 256) as f64);
        let img = plane(values, ValueRange::Byte);
        save_plane(&path, &img).unwrap();
        let back = load_grayscale(&path).unwrap();
        assert_eq!(back.pixels(), img.pixels());
    }

    #[test]
    fn rgb_file_loads_via_luma() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let mut buf = image::RgbImage::new(4, 4);
        for p in buf.pixels_mut() {
            *p = image::Rgb([200, 30, 90]);
        }
        buf.save(&path).unwrap();
        let img = load_grayscale(&path).unwrap();
        let expected = (0.299 * 200.0 + 0.587 * 30.0 + 0.114 * 90.0f64).round();
        assert!(img.pixels().iter().all(|v| *v == expected));
    }

    #[test]
    fn truncated_file_is_a_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"\x89PNG\r\n\x1a\nnot really").unwrap();
        match load_grayscale(&path) {
            Err(Error::Decode { .. }) => {}
            other => panic!("expected decode error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_an_io_error() {
        match load_grayscale(Path::new("/nonexistent/x.png")) {
            Err(Error::Io { .. }) => {}
            other => panic!("expected io error, got {other:?}"),
        }
    }

    #[test]
    fn mask_shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let small = plane(Array2::from_elem((32, 32), 255.0), ValueRange::Byte);
        save_plane(&path, &small).unwrap();
        let paired = plane(Array2::zeros((64, 64)), ValueRange::Byte);
        assert!(matches!(
            load_mask(&path, &paired),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn all_white_mask_is_all_ones() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let white = plane(Array2::from_elem((8, 8), 255.0), ValueRange::Byte);
        save_plane(&path, &white).unwrap();
        let mask = load_mask(&path, &white).unwrap();
        assert!(mask.values().iter().all(|v| *v == 1.0));
    }
}
