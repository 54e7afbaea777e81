//! The trainable fusion network.
//!
//! Encoder: four convolution blocks (two 3x3 convolutions each, batch
//! normalisation, leaky ReLU) of 32/64/128/256 channels, stride 1 throughout,
//! taking the two-channel (infrared, visible) stack. The attention module
//! applies channel attention to the deepest three encoder levels and to the
//! matching frozen-extractor taps of each source, concatenates the three
//! streams per level and fuses them with a 3x3 convolution back to the
//! encoder width. The decoder concatenates the fused levels with the shallow
//! encoder features and reduces 480 -> 256 -> 128 -> 64 -> 32 -> 1 with a
//! final tanh, so the fused plane lives in the symmetric domain at full input
//! resolution.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::backbone::{Backbone, FeaturePyramid, FeatureTap};
use crate::raster::{ImagePlane, ValueRange};
use crate::{Error, Result};

pub const ENCODER_WIDTHS: [usize; 4] = [32, 64, 128, 256];
/// Channel widths of the three attention levels (encoder levels 1..3).
pub const MAM_WIDTHS: [usize; 3] = [64, 128, 256];
/// Input extents are padded to this multiple before inference.
pub const PAD_MULTIPLE: usize = 16;
pub const MIN_EXTENT: usize = 16;

const LEAKY_SLOPE: f64 = 0.2;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
pub const CHECKPOINT_VERSION: u32 = 1;

const STREAMS: [&str; 3] = ["u", "r", "v"];

/// Ablation switches; parameter shapes are unaffected.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Channel attention becomes a pass-through.
    pub disable_ca: bool,
    /// The extractor taps are replaced by zeros in the fusion concat.
    pub disable_backbone_taps: bool,
}

/// Named trainable arrays in a fixed order.
#[derive(Debug, Clone)]
pub(crate) struct ParamSet {
    pub names: Vec<String>,
    pub arrays: Vec<ArrayD<f64>>,
}

impl ParamSet {
    fn push(&mut self, name: String, array: ArrayD<f64>) {
        self.names.push(name);
        self.arrays.push(array);
    }

    pub fn index_of(&self, name: &str) -> usize {
        self.names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }
}

/// Parameters bound onto a tape (leaves when training, constants otherwise),
/// aligned with the model's parameter order.
pub(crate) struct BoundParams {
    pub vars: Vec<Var>,
}

impl BoundParams {
    fn get(&self, params: &ParamSet, name: &str) -> Var {
        self.vars[params.index_of(name)]
    }
}

pub struct FusionModel {
    pub(crate) params: ParamSet,
    /// Running statistics per batch-norm layer: name -> (mean, var).
    pub(crate) running: BTreeMap<String, (Array1<f64>, Array1<f64>)>,
    pub config: ModelConfig,
    pub seed: u64,
}

/// Tape nodes produced by one forward pass.
pub(crate) struct ForwardOutput {
    /// `[B, 1, H, W]`, tanh range.
    pub fused: Var,
    /// Encoder levels `[B, C, H, W]`, 32/64/128/256 channels.
    pub f_u: Vec<Var>,
    /// Fused attention levels, 64/128/256 channels.
    #[allow(dead_code)]
    pub f_a: Vec<Var>,
    /// Batch statistics observed by every batch-norm layer this pass.
    pub bn_updates: Vec<(String, Array1<f64>, Array1<f64>)>,
}

impl FusionModel {
    pub fn new(seed: u64, config: ModelConfig) -> FusionModel {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParamSet {
            names: Vec::new(),
            arrays: Vec::new(),
        };
        let mut running = BTreeMap::new();

        let mut conv = |params: &mut ParamSet,
                        rng: &mut ChaCha12Rng,
                        name: String,
                        co: usize,
                        ci: usize,
                        k: usize| {
            let std = (2.0 / (ci * k * k) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            params.push(
                format!("{name}.w"),
                ArrayD::from_shape_fn(IxDyn(&[co, ci, k, k]), |_| dist.sample(rng)),
            );
            params.push(format!("{name}.b"), ArrayD::zeros(IxDyn(&[co])));
        };
        let mut bn = |params: &mut ParamSet,
                      running: &mut BTreeMap<String, (Array1<f64>, Array1<f64>)>,
                      name: String,
                      c: usize| {
            params.push(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[c])));
            params.push(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c])));
            running.insert(name, (Array1::zeros(c), Array1::ones(c)));
        };

        // encoder blocks
        let mut cin = 2;
        for (i, width) in ENCODER_WIDTHS.iter().enumerate() {
            for half in 0..2 {
                let src = if half == 0 { cin } else { *width };
                conv(
                    &mut params,
                    &mut rng,
                    format!("enc{i}.conv{half}"),
                    *width,
                    src,
                    3,
                );
                bn(&mut params, &mut running, format!("enc{i}.bn{half}"), *width);
            }
            cin = *width;
        }

        // channel-attention units: three 1x1 projections per stream per level
        for (level, width) in MAM_WIDTHS.iter().enumerate() {
            for stream in STREAMS {
                for proj in ["p", "q", "h"] {
                    conv(
                        &mut params,
                        &mut rng,
                        format!("ca{}.{stream}.{proj}", level + 1),
                        *width,
                        *width,
                        1,
                    );
                }
            }
            // fusion convolution over the concatenated streams
            conv(
                &mut params,
                &mut rng,
                format!("mam{}.conv", level + 1),
                *width,
                3 * width,
                3,
            );
        }

        // decoder
        let dec_widths = [480, 256, 128, 64, 32];
        for i in 0..4 {
            conv(
                &mut params,
                &mut rng,
                format!("dec{i}.conv"),
                dec_widths[i + 1],
                dec_widths[i],
                3,
            );
            bn(
                &mut params,
                &mut running,
                format!("dec{i}.bn"),
                dec_widths[i + 1],
            );
        }
        conv(&mut params, &mut rng, "dec4.conv".into(), 1, 32, 3);

        FusionModel {
            params,
            running,
            config,
            seed,
        }
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.arrays.iter().map(|a| a.len()).sum()
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.params.names
    }

    pub(crate) fn bind(&self, tape: &Tape, train: bool) -> BoundParams {
        let vars = self
            .params
            .arrays
            .iter()
            .map(|a| {
                if train {
                    tape.leaf(a.clone())
                } else {
                    tape.constant(a.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_block(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        name: &str,
        bn_name: &str,
        x: Var,
        train: bool,
        bn_updates: &mut Vec<(String, Array1<f64>, Array1<f64>)>,
    ) -> Var {
        let w = bound.get(&self.params, &format!("{name}.w"));
        let b = bound.get(&self.params, &format!("{name}.b"));
        let pad = tape.value(w).shape()[2] / 2;
        let y = tape.conv2d(x, w, b, pad);
        let gamma = bound.get(&self.params, &format!("{bn_name}.gamma"));
        let beta = bound.get(&self.params, &format!("{bn_name}.beta"));
        let y = if train {
            let (y, mean, var) = tape.batchnorm_train(y, gamma, beta, BN_EPS);
            bn_updates.push((bn_name.to_string(), mean, var));
            y
        } else {
            let (mean, var) = &self.running[bn_name];
            tape.batchnorm_eval(y, gamma, beta, mean, var, BN_EPS)
        };
        tape.leaky_relu(y, LEAKY_SLOPE)
    }

    /// Encoder over a `[B, 2, H, W]` input node.
    pub(crate) fn encode_on_tape(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        input: Var,
        train: bool,
        bn_updates: &mut Vec<(String, Array1<f64>, Array1<f64>)>,
    ) -> Vec<Var> {
        let mut levels = Vec::with_capacity(4);
        let mut cur = input;
        for i in 0..4 {
            cur = self.conv_block(
                tape,
                bound,
                &format!("enc{i}.conv0"),
                &format!("enc{i}.bn0"),
                cur,
                train,
                bn_updates,
            );
            cur = self.conv_block(
                tape,
                bound,
                &format!("enc{i}.conv1"),
                &format!("enc{i}.bn1"),
                cur,
                train,
                bn_updates,
            );
            levels.push(cur);
        }
        levels
    }

    /// Channel attention with a residual add. `f` is `[B, C, H, W]`.
    pub(crate) fn channel_attention_on_tape(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        unit: &str,
        f: Var,
    ) -> Var {
        if self.config.disable_ca {
            return f;
        }
        let project = |proj: &str| {
            let w = bound.get(&self.params, &format!("{unit}.{proj}.w"));
            let b = bound.get(&self.params, &format!("{unit}.{proj}.b"));
            tape.conv2d(f, w, b, 0)
        };
        let p = project("p");
        let q = project("q");
        let h_ = project("h");
        let shape = tape.value(f).shape().to_vec();
        let (bsz, c, hh, ww) = (shape[0], shape[1], shape[2], shape[3]);
        let mut outs = Vec::with_capacity(bsz);
        for bi in 0..bsz {
            let pb = tape.slice_batch(p, bi);
            let qb = tape.slice_batch(q, bi);
            let hb = tape.slice_batch(h_, bi);
            let mp = tape.reshape(pb, &[c, hh * ww]);
            let mq = tape.reshape(qb, &[c, hh * ww]);
            let mh = tape.reshape(hb, &[c, hh * ww]);
            let mqt = tape.transpose2(mq);
            let scores = tape.matmul(mp, mqt);
            let attn = tape.softmax_rows(scores);
            let attn_t = tape.transpose2(attn);
            let mixed = tape.matmul(attn_t, mh);
            outs.push(tape.reshape(mixed, &[1, c, hh, ww]));
        }
        let mixed = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_batch(&outs)
        };
        tape.add(mixed, f)
    }

    /// Per-level attention + concat + fusion convolution. Taps are
    /// `[B, C, H, W]` constants (or `None` when the ablation flag removes
    /// them, in which case zeros join the concat).
    pub(crate) fn mam_on_tape(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        f_u: &[Var],
        taps_r: Option<&[Var]>,
        taps_v: Option<&[Var]>,
    ) -> Vec<Var> {
        let mut fused_levels = Vec::with_capacity(3);
        for level in 1..=3 {
            let fu = f_u[level];
            let shape = tape.value(fu).shape().to_vec();
            let ca_u = self.channel_attention_on_tape(tape, bound, &format!("ca{level}.u"), fu);
            let zero = || tape.constant(ArrayD::zeros(IxDyn(&shape)));
            let ca_r = match taps_r {
                Some(taps) => {
                    let t = taps[level - 1];
                    self.channel_attention_on_tape(tape, bound, &format!("ca{level}.r"), t)
                }
                None => zero(),
            };
            let ca_v = match taps_v {
                Some(taps) => {
                    let t = taps[level - 1];
                    self.channel_attention_on_tape(tape, bound, &format!("ca{level}.v"), t)
                }
                None => zero(),
            };
            let cat = tape.concat_channels(&[ca_u, ca_r, ca_v]);
            let w = bound.get(&self.params, &format!("mam{level}.conv.w"));
            let b = bound.get(&self.params, &format!("mam{level}.conv.b"));
            fused_levels.push(tape.conv2d(cat, w, b, 1));
        }
        fused_levels
    }

    pub(crate) fn decode_on_tape(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        f_a: &[Var],
        f_u0: Var,
        train: bool,
        bn_updates: &mut Vec<(String, Array1<f64>, Array1<f64>)>,
    ) -> Var {
        let mut cur = tape.concat_channels(&[f_a[0], f_a[1], f_a[2], f_u0]);
        for i in 0..4 {
            cur = self.conv_block(
                tape,
                bound,
                &format!("dec{i}.conv"),
                &format!("dec{i}.bn"),
                cur,
                train,
                bn_updates,
            );
        }
        let w = bound.get(&self.params, "dec4.conv.w");
        let b = bound.get(&self.params, "dec4.conv.b");
        let y = tape.conv2d(cur, w, b, 1);
        tape.tanh(y)
    }

    /// Complete forward pass over a `[B, 2, H, W]` input node with
    /// pre-stacked extractor taps.
    pub(crate) fn forward_on_tape(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        input: Var,
        taps_r: Option<&[Var]>,
        taps_v: Option<&[Var]>,
        train: bool,
    ) -> ForwardOutput {
        let mut bn_updates = Vec::new();
        let f_u = self.encode_on_tape(tape, bound, input, train, &mut bn_updates);
        let f_a = self.mam_on_tape(tape, bound, &f_u, taps_r, taps_v);
        let fused = self.decode_on_tape(tape, bound, &f_a, f_u[0], train, &mut bn_updates);
        ForwardOutput {
            fused,
            f_u,
            f_a,
            bn_updates,
        }
    }

    /// Folds observed batch statistics into the running estimates.
    pub(crate) fn update_running_stats(&mut self, updates: &[(String, Array1<f64>, Array1<f64>)]) {
        for (name, mean, var) in updates {
            let entry = self.running.get_mut(name).expect("known bn layer");
            entry.0 = &entry.0 * (1.0 - BN_MOMENTUM) + &(mean * BN_MOMENTUM);
            entry.1 = &entry.1 * (1.0 - BN_MOMENTUM) + &(var * BN_MOMENTUM);
        }
    }

    // -- public forward-only operations ------------------------------------

    /// Encoder levels for one source pair (evaluation mode).
    pub fn encode(&self, ir: &ImagePlane, vis: &ImagePlane) -> Result<FeaturePyramid> {
        check_pair(ir, vis)?;
        let (h, w) = ir.dim();
        if h < MIN_EXTENT || w < MIN_EXTENT {
            return Err(Error::TooSmall {
                context: format!("{h}x{w} input vs {MIN_EXTENT}x{MIN_EXTENT} encoder minimum"),
            });
        }
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let input = tape.constant(stack_pair(ir, vis));
        let mut updates = Vec::new();
        let levels = self.encode_on_tape(&tape, &bound, input, false, &mut updates);
        Ok(pyramid_from_batch(&tape, &levels, "enc"))
    }

    /// Encoder pyramids for a batch of pairs, order preserved.
    pub fn encode_batch(&self, pairs: &[(ImagePlane, ImagePlane)]) -> Result<Vec<FeaturePyramid>> {
        pairs.iter().map(|(ir, vis)| self.encode(ir, vis)).collect()
    }

    /// Channel attention of one feature stack (`level` in 1..=3, `stream`
    /// one of "u", "r", "v").
    pub fn channel_attention(
        &self,
        level: usize,
        stream: &str,
        f: &Array3<f64>,
    ) -> Result<Array3<f64>> {
        if !(1..=3).contains(&level) || !STREAMS.contains(&stream) {
            return Err(Error::InvalidArgument(format!(
                "no attention unit for level {level} stream {stream}"
            )));
        }
        let (c, h, w) = f.dim();
        if c != MAM_WIDTHS[level - 1] {
            return Err(Error::shape_mismatch(
                "attention input channels",
                MAM_WIDTHS[level - 1].to_string(),
                c.to_string(),
            ));
        }
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = tape.constant(
            f.clone()
                .into_shape_with_order(IxDyn(&[1, c, h, w]))
                .unwrap(),
        );
        let y = self.channel_attention_on_tape(&tape, &bound, &format!("ca{level}.{stream}"), x);
        Ok(unbatch(&tape.value(y)))
    }

    /// Fuses the three per-level streams (evaluation mode). Pyramids carry
    /// the 64/128/256-channel levels; spatial sizes must agree per level.
    pub fn mam_fuse(
        &self,
        f_u: &FeaturePyramid,
        f_r: &FeaturePyramid,
        f_v: &FeaturePyramid,
    ) -> Result<FeaturePyramid> {
        if f_u.taps.len() != 3 || f_r.taps.len() != 3 || f_v.taps.len() != 3 {
            return Err(Error::InvalidArgument(
                "fusion expects three-level pyramids".into(),
            ));
        }
        for (i, ((u, r), v)) in f_u
            .taps
            .iter()
            .zip(f_r.taps.iter())
            .zip(f_v.taps.iter())
            .enumerate()
        {
            let (du, dr, dv) = (u.data.dim(), r.data.dim(), v.data.dim());
            if (du.1, du.2) != (dr.1, dr.2) || (du.1, du.2) != (dv.1, dv.2) {
                return Err(Error::shape_mismatch(
                    format!("attention level {} spatial sizes", i + 1),
                    format!("{}x{}", du.1, du.2),
                    format!("{}x{} / {}x{}", dr.1, dr.2, dv.1, dv.2),
                ));
            }
        }
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let as_vars = |p: &FeaturePyramid| -> Vec<Var> {
            p.taps
                .iter()
                .map(|t| {
                    let (c, h, w) = t.data.dim();
                    tape.constant(
                        t.data
                            .clone()
                            .into_shape_with_order(IxDyn(&[1, c, h, w]))
                            .unwrap(),
                    )
                })
                .collect()
        };
        let u = as_vars(f_u);
        let r = as_vars(f_r);
        let v = as_vars(f_v);
        // mam_on_tape indexes levels 1..=3 of the encoder pyramid
        let mut u_full = vec![u[0]];
        u_full.extend_from_slice(&u);
        let fused = self.mam_on_tape(&tape, &bound, &u_full, Some(&r), Some(&v));
        Ok(pyramid_from_batch(&tape, &fused, "mam"))
    }

    /// Decoder over the fused levels plus the shallow encoder level
    /// (evaluation mode). Returns the fused plane pixels in tanh range.
    pub fn decode(&self, fused: &FeaturePyramid, f_u0: &Array3<f64>) -> Result<Array2<f64>> {
        if fused.channel_counts() != MAM_WIDTHS.to_vec() {
            return Err(Error::shape_mismatch(
                "fused pyramid widths",
                format!("{MAM_WIDTHS:?}"),
                format!("{:?}", fused.channel_counts()),
            ));
        }
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let levels: Vec<Var> = fused
            .taps
            .iter()
            .map(|t| {
                let (c, h, w) = t.data.dim();
                tape.constant(
                    t.data
                        .clone()
                        .into_shape_with_order(IxDyn(&[1, c, h, w]))
                        .unwrap(),
                )
            })
            .collect();
        let (c0, h0, w0) = f_u0.dim();
        let u0 = tape.constant(
            f_u0.clone()
                .into_shape_with_order(IxDyn(&[1, c0, h0, w0]))
                .unwrap(),
        );
        let mut updates = Vec::new();
        let out = self.decode_on_tape(&tape, &bound, &levels, u0, false, &mut updates);
        let value = tape.value(out);
        let sh = value.shape().to_vec();
        Ok(value
            .as_ref()
            .clone()
            .into_shape_with_order(IxDyn(&[sh[2], sh[3]]))
            .unwrap()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap())
    }

    /// End-to-end fusion of one source pair. Extents are padded to the next
    /// multiple of 16 with mirrored borders and cropped back, so the output
    /// shape equals the input shape. Evaluation mode; deterministic.
    pub fn fuse(
        &self,
        backbone: &Backbone,
        ir: &ImagePlane,
        vis: &ImagePlane,
    ) -> Result<ImagePlane> {
        check_pair(ir, vis)?;
        let (h, w) = ir.dim();
        let ir_sym = ir.to_range(ValueRange::Symmetric);
        let vis_sym = vis.to_range(ValueRange::Symmetric);
        let ph = pad_to_multiple(h);
        let pw = pad_to_multiple(w);
        let ir_p = mirror_pad(ir_sym.pixels(), ph, pw);
        let vis_p = mirror_pad(vis_sym.pixels(), ph, pw);

        let (taps_r, taps_v) = if self.config.disable_backbone_taps {
            (None, None)
        } else {
            let ir_plane = ImagePlane::new(ir_p.clone(), ValueRange::Symmetric)?;
            let vis_plane = ImagePlane::new(vis_p.clone(), ValueRange::Symmetric)?;
            (
                Some(backbone.mam_taps(&ir_plane)?),
                Some(backbone.mam_taps(&vis_plane)?),
            )
        };

        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let mut input = ndarray::Array4::zeros((1, 2, ph, pw));
        input
            .index_axis_mut(Axis(0), 0)
            .index_axis_mut(Axis(0), 0)
            .assign(&ir_p);
        input
            .index_axis_mut(Axis(0), 0)
            .index_axis_mut(Axis(0), 1)
            .assign(&vis_p);
        let input = tape.constant(input.into_dyn());
        let tap_vars = |p: &Option<FeaturePyramid>| -> Option<Vec<Var>> {
            p.as_ref().map(|p| {
                p.taps
                    .iter()
                    .map(|t| {
                        let (c, th, tw) = t.data.dim();
                        tape.constant(
                            t.data
                                .clone()
                                .into_shape_with_order(IxDyn(&[1, c, th, tw]))
                                .unwrap(),
                        )
                    })
                    .collect()
            })
        };
        let r_vars = tap_vars(&taps_r);
        let v_vars = tap_vars(&taps_v);
        let out = self.forward_on_tape(
            &tape,
            &bound,
            input,
            r_vars.as_deref(),
            v_vars.as_deref(),
            false,
        );
        let value = tape.value(out.fused);
        let full = value
            .as_ref()
            .clone()
            .into_shape_with_order(IxDyn(&[ph, pw]))
            .unwrap();
        let cropped = full
            .slice(ndarray::s![..h, ..w])
            .to_owned()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        ImagePlane::new(cropped, ValueRange::Symmetric)
    }
}

fn check_pair(ir: &ImagePlane, vis: &ImagePlane) -> Result<()> {
    if ir.dim() != vis.dim() {
        return Err(Error::shape_mismatch(
            "source pair",
            format!("{:?}", ir.dim()),
            format!("{:?}", vis.dim()),
        ));
    }
    Ok(())
}

fn pad_to_multiple(n: usize) -> usize {
    n.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE
}

fn mirror_index(i: usize, n: usize) -> usize {
    let period = 2 * n;
    let m = i % period;
    if m < n {
        m
    } else {
        period - 1 - m
    }
}

/// Extends a plane to `(ph, pw)` by mirroring rows/columns (edge included).
pub(crate) fn mirror_pad(a: &Array2<f64>, ph: usize, pw: usize) -> Array2<f64> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((ph, pw), |(i, j)| {
        a[[mirror_index(i, h), mirror_index(j, w)]]
    })
}

/// Builds the `[1, 2, H, W]` network input from a source pair.
pub(crate) fn stack_pair(ir: &ImagePlane, vis: &ImagePlane) -> ArrayD<f64> {
    let ir = ir.to_range(ValueRange::Symmetric);
    let vis = vis.to_range(ValueRange::Symmetric);
    let (h, w) = ir.dim();
    let mut input = ndarray::Array4::zeros((1, 2, h, w));
    input
        .index_axis_mut(Axis(0), 0)
        .index_axis_mut(Axis(0), 0)
        .assign(ir.pixels());
    input
        .index_axis_mut(Axis(0), 0)
        .index_axis_mut(Axis(0), 1)
        .assign(vis.pixels());
    input.into_dyn()
}

fn unbatch(value: &ArrayD<f64>) -> Array3<f64> {
    let sh = value.shape().to_vec();
    value
        .clone()
        .into_shape_with_order(IxDyn(&[sh[1], sh[2], sh[3]]))
        .unwrap()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
}

fn pyramid_from_batch(tape: &Tape, levels: &[Var], prefix: &str) -> FeaturePyramid {
    let taps = levels
        .iter()
        .enumerate()
        .map(|(i, v)| FeatureTap {
            name: format!("{prefix}{i}"),
            data: unbatch(&tape.value(*v)),
        })
        .collect();
    FeaturePyramid { taps }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym(n: usize, phase: f64) -> ImagePlane {
        ImagePlane::new(
            Array2::from_shape_fn((n, n), |(i, j)| {
                ((i as f64 * 0.7 + j as f64 * 1.3 + phase).sin() * 0.8).clamp(-1.0, 1.0)
            }),
            ValueRange::Symmetric,
        )
        .unwrap()
    }

    #[test]
    fn encoder_widths_and_full_resolution() {
        let model = FusionModel::new(0, ModelConfig::default());
        let pyr = model.encode(&sym(16, 0.0), &sym(16, 1.0)).unwrap();
        assert_eq!(pyr.channel_counts(), vec![32, 64, 128, 256]);
        for tap in &pyr.taps {
            assert_eq!((tap.data.dim().1, tap.data.dim().2), (16, 16));
        }
    }

    #[test]
    fn encoder_rejects_undersized_input() {
        let model = FusionModel::new(0, ModelConfig::default());
        assert!(matches!(
            model.encode(&sym(8, 0.0), &sym(8, 1.0)),
            Err(Error::TooSmall { .. })
        ));
    }

    #[test]
    fn encode_batch_preserves_order() {
        let model = FusionModel::new(0, ModelConfig::default());
        let pairs = vec![(sym(16, 0.0), sym(16, 1.0)), (sym(16, 2.0), sym(16, 3.0))];
        let batch = model.encode_batch(&pairs).unwrap();
        assert_eq!(batch.len(), 2);
        let direct = model.encode(&pairs[1].0, &pairs[1].1).unwrap();
        assert_eq!(batch[1].taps[3].data, direct.taps[3].data);
    }

    #[test]
    fn attention_identity_projection_doubles_a_single_channel() {
        // with identity 1x1 projections and C = 1 the attention map is [[1]]
        // and the residual add doubles the input
        let mut model = FusionModel::new(0, ModelConfig::default());
        for (name, array) in model
            .params
            .names
            .clone()
            .iter()
            .zip(model.params.arrays.iter_mut())
        {
            if name.starts_with("ca1.u.") && name.ends_with(".w") {
                *array = ArrayD::ones(IxDyn(&[1, 1, 1, 1]));
            }
            if name.starts_with("ca1.u.") && name.ends_with(".b") {
                *array = ArrayD::zeros(IxDyn(&[1]));
            }
        }
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let f = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![0.1, 0.4, -0.3, 0.2]).unwrap(),
        );
        let y = model.channel_attention_on_tape(&tape, &bound, "ca1.u", f);
        let value = tape.value(y);
        let input = [0.1, 0.4, -0.3, 0.2];
        for (o, i) in value.iter().zip(input.iter()) {
            assert!((o - 2.0 * i).abs() < 1e-12, "{o} vs 2*{i}");
        }
    }

    #[test]
    fn attention_preserves_shape_and_stays_finite() {
        let model = FusionModel::new(1, ModelConfig::default());
        let f = Array3::from_shape_fn((64, 8, 8), |(c, i, j)| {
            ((c * 5 + i * 3 + j) as f64 * 0.37).sin()
        });
        let out = model.channel_attention(1, "u", &f).unwrap();
        assert_eq!(out.dim(), f.dim());
        assert!(out.iter().all(|v| v.is_finite()));

        let ablated = FusionModel::new(
            1,
            ModelConfig {
                disable_ca: true,
                disable_backbone_taps: false,
            },
        );
        let same = ablated.channel_attention(1, "u", &f).unwrap();
        assert_eq!(same, f);
    }

    #[test]
    fn mam_concat_widths_come_back_to_encoder_widths() {
        let model = FusionModel::new(0, ModelConfig::default());
        for (level, width) in MAM_WIDTHS.iter().enumerate() {
            let w = model.params.arrays[model
                .params
                .index_of(&format!("mam{}.conv.w", level + 1))]
            .shape()
            .to_vec();
            assert_eq!(w, vec![*width, 3 * width, 3, 3]);
        }
    }

    #[test]
    fn mam_fuse_shapes_and_mismatch_error() {
        let model = FusionModel::new(0, ModelConfig::default());
        let mk = |c: usize, n: usize| FeatureTap {
            name: format!("t{c}"),
            data: Array3::from_elem((c, n, n), 0.1),
        };
        let u = FeaturePyramid {
            taps: vec![mk(64, 16), mk(128, 16), mk(256, 16)],
        };
        let r = FeaturePyramid {
            taps: vec![mk(64, 16), mk(128, 16), mk(256, 16)],
        };
        let fused = model.mam_fuse(&u, &r, &r).unwrap();
        assert_eq!(fused.channel_counts(), vec![64, 128, 256]);
        for tap in &fused.taps {
            assert_eq!((tap.data.dim().1, tap.data.dim().2), (16, 16));
        }

        let bad = FeaturePyramid {
            taps: vec![mk(64, 16), mk(128, 8), mk(256, 16)],
        };
        match model.mam_fuse(&u, &bad, &r) {
            Err(Error::ShapeMismatch { context, .. }) => {
                assert!(context.contains("level 2"), "{context}")
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn zero_backbone_pyramids_still_fuse() {
        let model = FusionModel::new(0, ModelConfig::default());
        let mk = |c: usize| FeatureTap {
            name: format!("t{c}"),
            data: Array3::from_shape_fn((c, 16, 16), |(a, b, d)| {
                ((a + 2 * b + 3 * d) as f64 * 0.11).sin()
            }),
        };
        let zero = |c: usize| FeatureTap {
            name: format!("z{c}"),
            data: Array3::zeros((c, 16, 16)),
        };
        let u = FeaturePyramid {
            taps: vec![mk(64), mk(128), mk(256)],
        };
        let z = FeaturePyramid {
            taps: vec![zero(64), zero(128), zero(256)],
        };
        let fused = model.mam_fuse(&u, &z, &z).unwrap();
        assert_eq!(fused.channel_counts(), vec![64, 128, 256]);
        assert!(fused
            .taps
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn fuse_preserves_extent_and_range() {
        let model = FusionModel::new(0, ModelConfig::default());
        let bb = Backbone::deterministic(0);
        for n in [16, 20] {
            let out = model.fuse(&bb, &sym(n, 0.0), &sym(n, 1.0)).unwrap();
            assert_eq!(out.dim(), (n, n));
            assert!(out
                .pixels()
                .iter()
                .all(|v| v.is_finite() && *v >= -1.0 && *v <= 1.0));
        }
    }

    #[test]
    fn fuse_rejects_mismatched_pairs() {
        let model = FusionModel::new(0, ModelConfig::default());
        let bb = Backbone::deterministic(0);
        let a = sym(16, 0.0);
        let b = ImagePlane::new(Array2::zeros((16, 20)), ValueRange::Symmetric).unwrap();
        assert!(matches!(
            model.fuse(&bb, &a, &b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn fuse_is_deterministic() {
        let model = FusionModel::new(2, ModelConfig::default());
        let bb = Backbone::deterministic(0);
        let a = model.fuse(&bb, &sym(24, 0.5), &sym(24, 1.5)).unwrap();
        let b = model.fuse(&bb, &sym(24, 0.5), &sym(24, 1.5)).unwrap();
        assert_eq!(a.pixels(), b.pixels());
    }

    #[test]
    fn padding_arithmetic() {
        assert_eq!(pad_to_multiple(100), 112);
        assert_eq!(pad_to_multiple(64), 64);
        assert_eq!(pad_to_multiple(65), 80);
        let a = Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64);
        let p = mirror_pad(&a, 5, 5);
        assert_eq!(p[[0, 0]], 0.0);
        assert_eq!(p[[3, 0]], a[[2, 0]]);
        assert_eq!(p[[4, 0]], a[[1, 0]]);
        assert_eq!(p[[0, 4]], a[[0, 1]]);
    }

    #[test]
    fn parameter_count_matches_manifest_sum() {
        let model = FusionModel::new(0, ModelConfig::default());
        let total: usize = model.params.arrays.iter().map(|a| a.len()).sum();
        assert_eq!(model.parameter_count(), total);
        // the architecture lands in the single-digit millions
        assert!(total > 4_000_000 && total < 12_000_000, "got {total}");
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = FusionModel::new(9, ModelConfig::default());
        let b = FusionModel::new(9, ModelConfig::default());
        for (x, y) in a.params.arrays.iter().zip(b.params.arrays.iter()) {
            assert_eq!(x, y);
        }
    }
}
