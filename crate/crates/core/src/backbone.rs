//! Frozen deep-feature extractor.
//!
//! A 19-layer-configuration convolutional stack (sixteen 3x3 convolutions in
//! five stages separated by 2x2 max pooling) provides multi-level feature
//! taps: three full-resolution taps of 64/128/256 channels feeding the fusion
//! network's attention module, and five raw-resolution taps (one per stage)
//! feeding the contrastive objectives. Weights are never mutated after
//! loading; extraction is reentrant.
//!
//! Real pretrained weights are loaded from a [`Container`] file (see
//! `docs/weights-format.md` for repacking published weights). The
//! `"deterministic"` sentinel instead draws fixed-seed kernels so tests and
//! offline runs need no weights file.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::container::Container;
use crate::raster::{ImagePlane, ValueRange};
use crate::{Error, Result};

/// Minimum extent for the attention-module taps (input must cover the full
/// pooling pyramid used by inference).
pub const MAM_MIN_EXTENT: usize = 16;
/// Minimum extent for the contrastive taps. Pooling clamps at one pixel, so
/// the deepest stage stays well-formed down to 8x8 inputs.
pub const CONTRASTIVE_MIN_EXTENT: usize = 8;

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// (name, out channels, in channels, stage index) for the sixteen
/// convolutions of the 19-layer configuration.
const LAYERS: [(&str, usize, usize, usize); 16] = [
    ("conv1_1", 64, 3, 0),
    ("conv1_2", 64, 64, 0),
    ("conv2_1", 128, 64, 1),
    ("conv2_2", 128, 128, 1),
    ("conv3_1", 256, 128, 2),
    ("conv3_2", 256, 256, 2),
    ("conv3_3", 256, 256, 2),
    ("conv3_4", 256, 256, 2),
    ("conv4_1", 512, 256, 3),
    ("conv4_2", 512, 512, 3),
    ("conv4_3", 512, 512, 3),
    ("conv4_4", 512, 512, 3),
    ("conv5_1", 512, 512, 4),
    ("conv5_2", 512, 512, 4),
    ("conv5_3", 512, 512, 4),
    ("conv5_4", 512, 512, 4),
];

/// Post-activation layers tapped for the contrastive objectives, one per
/// stage (the second convolution of each).
const CONTRASTIVE_TAPS: [&str; 5] = ["conv1_2", "conv2_2", "conv3_2", "conv4_2", "conv5_2"];
/// Taps feeding the attention module: the 64/128/256-channel stages.
const MAM_TAPS: [&str; 3] = ["conv1_2", "conv2_2", "conv3_2"];

struct ConvLayer {
    name: &'static str,
    stage: usize,
    w: Arc<ArrayD<f64>>,
    b: Arc<ArrayD<f64>>,
}

/// One feature stack extracted at a named tap.
#[derive(Debug, Clone)]
pub struct FeatureTap {
    pub name: String,
    /// `[channels, height, width]`.
    pub data: Array3<f64>,
}

/// Ordered multi-level feature stacks, shallow to deep.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub taps: Vec<FeatureTap>,
}

impl FeaturePyramid {
    pub fn channel_counts(&self) -> Vec<usize> {
        self.taps.iter().map(|t| t.data.dim().0).collect()
    }

    pub fn tap_names(&self) -> Vec<&str> {
        self.taps.iter().map(|t| t.name.as_str()).collect()
    }
}

pub struct Backbone {
    layers: Vec<ConvLayer>,
    contrastive_evals: AtomicU64,
}

impl Backbone {
    /// Parses a weights source: a path, or `"deterministic"` /
    /// `"deterministic:SEED"` for fixed-seed random kernels.
    pub fn load(spec: &str) -> Result<Backbone> {
        if spec == "deterministic" {
            return Ok(Backbone::deterministic(0));
        }
        if let Some(seed) = spec.strip_prefix("deterministic:") {
            let seed: u64 = seed
                .parse()
                .map_err(|_| Error::Config(format!("bad extractor seed in '{spec}'")))?;
            return Ok(Backbone::deterministic(seed));
        }
        Backbone::from_file(Path::new(spec))
    }

    /// Fixed-seed random kernels (fan-in-scaled normal draws, zero biases).
    pub fn deterministic(seed: u64) -> Backbone {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let layers = LAYERS
            .iter()
            .map(|(name, co, ci, stage)| {
                let std = (2.0 / (ci * 9) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("positive std");
                let w = ArrayD::from_shape_fn(IxDyn(&[*co, *ci, 3, 3]), |_| dist.sample(&mut rng));
                ConvLayer {
                    name,
                    stage: *stage,
                    w: Arc::new(w),
                    b: Arc::new(ArrayD::zeros(IxDyn(&[*co]))),
                }
            })
            .collect();
        Backbone {
            layers,
            contrastive_evals: AtomicU64::new(0),
        }
    }

    /// Loads kernels from a weights container, checking every layer's shape.
    pub fn from_file(path: &Path) -> Result<Backbone> {
        let container = Container::read(path)?;
        let mut layers = Vec::with_capacity(LAYERS.len());
        for (name, co, ci, stage) in LAYERS {
            let expect_w = [co, ci, 3, 3];
            let w = container
                .get(&format!("{name}.weight"))
                .ok_or_else(|| Error::Container(format!("missing layer {name}.weight")))?;
            if w.shape() != expect_w {
                return Err(Error::Container(format!(
                    "layer {name}.weight has shape {:?}, expected {:?}",
                    w.shape(),
                    expect_w
                )));
            }
            let b = container
                .get(&format!("{name}.bias"))
                .ok_or_else(|| Error::Container(format!("missing layer {name}.bias")))?;
            if b.shape() != [co] {
                return Err(Error::Container(format!(
                    "layer {name}.bias has shape {:?}, expected [{co}]",
                    b.shape()
                )));
            }
            layers.push(ConvLayer {
                name,
                stage,
                w: Arc::new(w.clone()),
                b: Arc::new(b.clone()),
            });
        }
        Ok(Backbone {
            layers,
            contrastive_evals: AtomicU64::new(0),
        })
    }

    /// Writes the kernels to a weights container (converter/test support).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut container = Container::default();
        for layer in &self.layers {
            container
                .entries
                .push((format!("{}.weight", layer.name), layer.w.as_ref().clone()));
            container
                .entries
                .push((format!("{}.bias", layer.name), layer.b.as_ref().clone()));
        }
        container
            .metadata
            .insert("kind".into(), "feature-extractor".into());
        container.write(path)
    }

    /// SHA-256 over all kernel bytes; lets tests assert the frozen contract.
    pub fn parameter_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for layer in &self.layers {
            for v in layer.w.iter().chain(layer.b.iter()) {
                hasher.update(v.to_le_bytes());
            }
        }
        let mut out = String::new();
        for b in hasher.finalize() {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    /// Number of contrastive tap extractions performed so far.
    pub fn contrastive_eval_count(&self) -> u64 {
        self.contrastive_evals.load(Ordering::Relaxed)
    }

    /// Replicates a single-channel batch to three channels and applies the
    /// extractor's input normalisation (symmetric domain to standardised
    /// colour channels).
    fn preprocess(&self, tape: &Tape, x: Var) -> Var {
        let mut channels = Vec::with_capacity(3);
        for c in 0..3 {
            let k = 0.5 / IMAGENET_STD[c];
            let off = (0.5 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            let scaled = tape.scale(x, k);
            channels.push(tape.offset(scaled, off));
        }
        tape.concat_channels(&channels)
    }

    /// Runs the stack through `last_stage` (inclusive), returning post-ReLU
    /// activations for the requested tap names in their listed order.
    fn run_taps(&self, tape: &Tape, x: Var, names: &[&str], last_stage: usize) -> Vec<Var> {
        let mut cur = self.preprocess(tape, x);
        let mut stage = 0;
        let mut out = vec![None; names.len()];
        for layer in &self.layers {
            if layer.stage > last_stage {
                break;
            }
            if layer.stage > stage {
                cur = tape.maxpool2(cur);
                stage = layer.stage;
            }
            let w = tape.constant(layer.w.as_ref().clone());
            let b = tape.constant(layer.b.as_ref().clone());
            cur = tape.conv2d(cur, w, b, 1);
            cur = tape.relu(cur);
            if let Some(pos) = names.iter().position(|n| *n == layer.name) {
                out[pos] = Some(cur);
            }
            // nothing after the deepest requested tap matters
            if out.iter().all(|o| o.is_some()) {
                break;
            }
        }
        out.into_iter().map(|o| o.expect("tap reached")).collect()
    }

    /// Contrastive taps as tape nodes; gradients flow back into `x`.
    /// `x` is a `[B, 1, H, W]` batch in the symmetric domain.
    pub fn contrastive_taps_var(&self, tape: &Tape, x: Var) -> Result<Vec<Var>> {
        let shape = tape.value(x).shape().to_vec();
        let (h, w) = (shape[2], shape[3]);
        if h < CONTRASTIVE_MIN_EXTENT || w < CONTRASTIVE_MIN_EXTENT {
            return Err(Error::TooSmall {
                context: format!(
                    "{h}x{w} input vs stride-{CONTRASTIVE_MIN_EXTENT} deepest contrastive tap"
                ),
            });
        }
        self.contrastive_evals.fetch_add(1, Ordering::Relaxed);
        Ok(self.run_taps(tape, x, &CONTRASTIVE_TAPS, 4))
    }

    /// Contrastive taps of one plane (raw spatial sizes, shallow to deep).
    pub fn contrastive_taps(&self, img: &ImagePlane) -> Result<FeaturePyramid> {
        self.contrastive_taps_array(&img.to_range(ValueRange::Symmetric).pixels().clone())
    }

    /// As [`contrastive_taps`](Self::contrastive_taps) but for a raw
    /// symmetric-domain array (e.g. a masked image).
    pub fn contrastive_taps_array(&self, a: &Array2<f64>) -> Result<FeaturePyramid> {
        let tape = Tape::new();
        let x = tape.constant(to_batch(a));
        let vars = self.contrastive_taps_var(&tape, x)?;
        Ok(pyramid_from_vars(&tape, &vars, &CONTRASTIVE_TAPS))
    }

    /// The three attention-module taps, bilinearly resampled to the input's
    /// full resolution.
    pub fn mam_taps(&self, img: &ImagePlane) -> Result<FeaturePyramid> {
        let a = img.to_range(ValueRange::Symmetric).pixels().clone();
        let (h, w) = a.dim();
        if h < MAM_MIN_EXTENT || w < MAM_MIN_EXTENT {
            return Err(Error::TooSmall {
                context: format!("{h}x{w} input vs stride-{MAM_MIN_EXTENT} extractor pyramid"),
            });
        }
        let tape = Tape::new();
        let x = tape.constant(to_batch(&a));
        let vars = self.run_taps(&tape, x, &MAM_TAPS, 2);
        let mut pyramid = pyramid_from_vars(&tape, &vars, &MAM_TAPS);
        for tap in &mut pyramid.taps {
            if tap.data.dim().1 != h || tap.data.dim().2 != w {
                tap.data = bilinear_resize(&tap.data, h, w);
            }
        }
        Ok(pyramid)
    }
}

fn to_batch(a: &Array2<f64>) -> ArrayD<f64> {
    let (h, w) = a.dim();
    a.clone()
        .into_shape_with_order(IxDyn(&[1, 1, h, w]))
        .expect("batch view")
}

fn pyramid_from_vars(tape: &Tape, vars: &[Var], names: &[&str]) -> FeaturePyramid {
    let taps = vars
        .iter()
        .zip(names.iter())
        .map(|(v, name)| {
            let value = tape.value(*v);
            let shape = value.shape().to_vec();
            let data = value
                .as_ref()
                .clone()
                .into_shape_with_order(IxDyn(&[shape[1], shape[2], shape[3]]))
                .expect("single-sample tap")
                .into_dimensionality::<ndarray::Ix3>()
                .expect("3-D tap");
            FeatureTap {
                name: name.to_string(),
                data,
            }
        })
        .collect();
    FeaturePyramid { taps }
}

/// Bilinear resampling of a `[C, H, W]` stack (half-pixel centres).
pub fn bilinear_resize(a: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = a.dim();
    if (h, w) == (out_h, out_w) {
        return a.clone();
    }
    let mut out = Array3::zeros((c, out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ci in 0..c {
                let top = a[[ci, y0, x0]] * (1.0 - wx) + a[[ci, y0, x1]] * wx;
                let bot = a[[ci, y1, x0]] * (1.0 - wx) + a[[ci, y1, x1]] * wx;
                out[[ci, oy, ox]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn sym_plane(values: Array2<f64>) -> ImagePlane {
        ImagePlane::new(values, ValueRange::Symmetric).unwrap()
    }

    fn test_input(n: usize) -> ImagePlane {
        sym_plane(Array2::from_shape_fn((n, n), |(i, j)| {
            (((i * 31 + j * 17) % 41) as f64 / 20.0 - 1.0).clamp(-1.0, 1.0)
        }))
    }

    #[test]
    fn deterministic_seed_is_reproducible() {
        let a = Backbone::deterministic(0);
        let b = Backbone::deterministic(0);
        assert_eq!(a.parameter_digest(), b.parameter_digest());
        let c = Backbone::deterministic(1);
        assert_ne!(a.parameter_digest(), c.parameter_digest());
    }

    #[test]
    fn mam_taps_have_expected_widths_and_full_resolution() {
        let bb = Backbone::deterministic(0);
        let img = test_input(64);
        let pyr = bb.mam_taps(&img).unwrap();
        assert_eq!(pyr.channel_counts(), vec![64, 128, 256]);
        for tap in &pyr.taps {
            assert_eq!((tap.data.dim().1, tap.data.dim().2), (64, 64));
        }
        assert_eq!(pyr.tap_names(), vec!["conv1_2", "conv2_2", "conv3_2"]);
    }

    #[test]
    fn contrastive_taps_have_stage_widths_and_raw_sizes() {
        let bb = Backbone::deterministic(0);
        let img = test_input(64);
        let pyr = bb.contrastive_taps(&img).unwrap();
        assert_eq!(pyr.channel_counts(), vec![64, 128, 256, 512, 512]);
        let sizes: Vec<usize> = pyr.taps.iter().map(|t| t.data.dim().1).collect();
        assert_eq!(sizes, vec![64, 32, 16, 8, 4]);
    }

    #[test]
    fn extraction_is_deterministic() {
        let bb = Backbone::deterministic(3);
        let img = test_input(32);
        let a = bb.contrastive_taps(&img).unwrap();
        let b = bb.contrastive_taps(&img).unwrap();
        for (ta, tb) in a.taps.iter().zip(b.taps.iter()) {
            assert_eq!(ta.data, tb.data);
        }
    }

    #[test]
    fn too_small_inputs_are_rejected() {
        let bb = Backbone::deterministic(0);
        let img = test_input(8);
        assert!(matches!(bb.mam_taps(&img), Err(Error::TooSmall { .. })));
        // 8x8 still supports the contrastive path (pooling clamps at 1x1)
        let pyr = bb.contrastive_taps(&img).unwrap();
        let sizes: Vec<usize> = pyr.taps.iter().map(|t| t.data.dim().1).collect();
        assert_eq!(sizes, vec![8, 4, 2, 1, 1]);
        let tiny = test_input(6);
        assert!(matches!(
            bb.contrastive_taps(&tiny),
            Err(Error::TooSmall { .. })
        ));
    }

    #[test]
    fn identity_mask_matches_unmasked_taps() {
        let bb = Backbone::deterministic(0);
        let img = test_input(16);
        let ones = crate::raster::SaliencyMask::new(Array2::ones((16, 16))).unwrap();
        let masked = ones.apply(img.pixels()).unwrap();
        let a = bb.contrastive_taps(&img).unwrap();
        let b = bb.contrastive_taps_array(&masked).unwrap();
        for (ta, tb) in a.taps.iter().zip(b.taps.iter()) {
            assert_eq!(ta.data, tb.data);
        }
    }

    #[test]
    fn annihilating_mask_equals_zero_image_taps() {
        let bb = Backbone::deterministic(0);
        let img = test_input(16);
        let zeros = crate::raster::SaliencyMask::new(Array2::zeros((16, 16))).unwrap();
        let masked = zeros.apply(img.pixels()).unwrap();
        let a = bb.contrastive_taps_array(&masked).unwrap();
        let b = bb.contrastive_taps_array(&Array2::zeros((16, 16))).unwrap();
        for (ta, tb) in a.taps.iter().zip(b.taps.iter()) {
            assert_eq!(ta.data, tb.data);
        }
    }

    #[test]
    fn tap_shapes_do_not_depend_on_pixel_values() {
        let bb = Backbone::deterministic(0);
        let a = bb.mam_taps(&test_input(48)).unwrap();
        let flat = sym_plane(Array2::zeros((48, 48)));
        let b = bb.mam_taps(&flat).unwrap();
        for (ta, tb) in a.taps.iter().zip(b.taps.iter()) {
            assert_eq!(ta.data.dim(), tb.data.dim());
        }
    }

    #[test]
    fn eval_counter_counts_contrastive_extractions_only() {
        let bb = Backbone::deterministic(0);
        let img = test_input(16);
        assert_eq!(bb.contrastive_eval_count(), 0);
        bb.mam_taps(&img).unwrap();
        assert_eq!(bb.contrastive_eval_count(), 0);
        bb.contrastive_taps(&img).unwrap();
        bb.contrastive_taps(&img).unwrap();
        assert_eq!(bb.contrastive_eval_count(), 2);
    }

    #[test]
    fn container_round_trip_and_shape_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.bin");
        let bb = Backbone::deterministic(7);
        bb.save(&path).unwrap();
        let loaded = Backbone::from_file(&path).unwrap();
        assert_eq!(bb.parameter_digest(), loaded.parameter_digest());

        // corrupt the first layer's shape and expect it to be named
        let mut container = Container::read(&path).unwrap();
        container.entries[0].1 = ArrayD::zeros(IxDyn(&[64, 4, 3, 3]));
        container.write(&path).unwrap();
        match Backbone::from_file(&path) {
            Err(Error::Container(msg)) => assert!(msg.contains("conv1_1"), "{msg}"),
            Err(other) => panic!("expected container error, got {other:?}"),
            Ok(_) => panic!("expected container error, got a backbone"),
        }
    }

    #[test]
    fn bilinear_resize_preserves_constants() {
        let a = Array3::from_elem((2, 4, 4), 0.7);
        let up = bilinear_resize(&a, 9, 13);
        assert_eq!(up.dim(), (2, 9, 13));
        for v in up.iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }
}
