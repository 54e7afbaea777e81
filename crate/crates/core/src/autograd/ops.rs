//! Differentiable operations.
//!
//! Convolution is im2col + one dgemm per sample; the batch dimension fans out
//! through [`parallelism::map_collect`] and per-sample weight-gradient
//! contributions are summed in sample order, so results do not depend on the
//! execution mode.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, Ix4, IxDyn};

use super::{Tape, Var};
use crate::parallelism;

fn binary_shapes_match(a: &ArrayD<f64>, b: &ArrayD<f64>) {
    assert_eq!(a.shape(), b.shape(), "elementwise operands must match");
}

impl Tape {
    // -- elementwise ------------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        binary_shapes_match(&va, &vb);
        let out = &*va + &*vb;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push_op(
            out,
            needs,
            Box::new(move |g, accum| {
                if na {
                    accum(var_id(a), g.clone());
                }
                if nb {
                    accum(var_id(b), g.clone());
                }
            }),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        binary_shapes_match(&va, &vb);
        let out = &*va - &*vb;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push_op(
            out,
            needs,
            Box::new(move |g, accum| {
                if na {
                    accum(var_id(a), g.clone());
                }
                if nb {
                    accum(var_id(b), g.mapv(|x| -x));
                }
            }),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        binary_shapes_match(&va, &vb);
        let out = &*va * &*vb;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push_op(
            out,
            needs,
            Box::new(move |g, accum| {
                if na {
                    accum(var_id(a), g * &*vb);
                }
                if nb {
                    accum(var_id(b), g * &*va);
                }
            }),
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        binary_shapes_match(&va, &vb);
        let out = &*va / &*vb;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push_op(
            out,
            needs,
            Box::new(move |g, accum| {
                if na {
                    accum(var_id(a), g / &*vb);
                }
                if nb {
                    accum(var_id(b), -(g * &*va) / (&*vb * &*vb));
                }
            }),
        )
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x * k);
        let na = self.needs_grad(a);
        self.push_op(
            out,
            na,
            Box::new(move |g, accum| accum(var_id(a), g.mapv(|x| x * k))),
        )
    }

    pub fn offset(&self, a: Var, k: f64) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x + k);
        let na = self.needs_grad(a);
        self.push_op(out, na, Box::new(move |g, accum| accum(var_id(a), g.clone())))
    }

    pub fn abs(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(f64::abs);
        let na = self.needs_grad(a);
        self.push_op(
            out,
            na,
            Box::new(move |g, accum| {
                accum(var_id(a), g * &va.mapv(|x| x.signum()));
            }),
        )
    }

    pub fn square(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x * x);
        let na = self.needs_grad(a);
        self.push_op(
            out,
            na,
            Box::new(move |g, accum| accum(var_id(a), g * &va.mapv(|x| 2.0 * x))),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(f64::tanh);
        let saved = out.clone();
        let na = self.needs_grad(a);
        self.push_op(
            out,
            na,
            Box::new(move |g, accum| accum(var_id(a), g * &saved.mapv(|y| 1.0 - y * y))),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| if x > 0.0 { x } else { slope * x });
        let na = self.needs_grad(a);
        self.push_op(
            out,
            na,
            Box::new(move |g, accum| {
                accum(
                    var_id(a),
                    g * &va.mapv(|x| if x > 0.0 { 1.0 } else { slope }),
                );
            }),
        )
    }

    /// Elementwise `max(a, floor)`; gradient flows only where `a > floor`.
    pub fn max_floor(&self, a: Var, floor: f64) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x.max(floor));
        let na = self.needs_grad(a);
        self.push_op(
            out,
            na,
            Box::new(move |g, accum| {
                accum(
                    var_id(a),
                    g * &va.mapv(|x| if x > floor { 1.0 } else { 0.0 }),
                );
            }),
        )
    }

    // -- reductions -------------------------------------------------------

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = ArrayD::from_elem(IxDyn(&[1]), va.sum());
        let na = self.needs_grad(a);
        self.push_op(
            out,
            na,
            Box::new(move |g, accum| {
                let s = g[[0]];
                accum(var_id(a), ArrayD::from_elem(va.shape(), s));
            }),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.len() as f64;
        let out = ArrayD::from_elem(IxDyn(&[1]), va.sum() / n);
        let na = self.needs_grad(a);
        self.push_op(
            out,
            na,
            Box::new(move |g, accum| {
                let s = g[[0]] / n;
                accum(var_id(a), ArrayD::from_elem(va.shape(), s));
            }),
        )
    }

    // -- shape ------------------------------------------------------------

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let old_shape: Vec<usize> = va.shape().to_vec();
        let out = va
            .as_ref()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape must preserve element count");
        let na = self.needs_grad(a);
        self.push_op(
            out,
            na,
            Box::new(move |g, accum| {
                let back = g
                    .to_owned()
                    .into_shape_with_order(IxDyn(&old_shape))
                    .expect("gradient reshapes back");
                accum(var_id(a), back);
            }),
        )
    }

    /// Concatenates 4-D activations along the channel axis.
    pub fn concat_channels(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|v| self.value(*v)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("channel concat");
        let needs = parts.iter().any(|v| self.needs_grad(*v));
        let meta: Vec<(Var, usize, bool)> = parts
            .iter()
            .zip(values.iter())
            .map(|(v, val)| (*v, val.shape()[1], self.needs_grad(*v)))
            .collect();
        self.push_op(
            out,
            needs,
            Box::new(move |g, accum| {
                let mut start = 0;
                for (v, ch, ng) in &meta {
                    if *ng {
                        let piece = g
                            .slice_axis(Axis(1), ndarray::Slice::from(start..start + ch))
                            .to_owned();
                        accum(var_id(*v), piece);
                    }
                    start += ch;
                }
            }),
        )
    }

    /// Concatenates 4-D activations along the batch axis.
    pub fn concat_batch(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|v| self.value(*v)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("batch concat");
        let needs = parts.iter().any(|v| self.needs_grad(*v));
        let meta: Vec<(Var, usize, bool)> = parts
            .iter()
            .zip(values.iter())
            .map(|(v, val)| (*v, val.shape()[0], self.needs_grad(*v)))
            .collect();
        self.push_op(
            out,
            needs,
            Box::new(move |g, accum| {
                let mut start = 0;
                for (v, n, ng) in &meta {
                    if *ng {
                        let piece = g
                            .slice_axis(Axis(0), ndarray::Slice::from(start..start + n))
                            .to_owned();
                        accum(var_id(*v), piece);
                    }
                    start += n;
                }
            }),
        )
    }

    /// Selects one sample of a 4-D batch, keeping the batch axis.
    pub fn slice_batch(&self, a: Var, index: usize) -> Var {
        let va = self.value(a);
        let shape: Vec<usize> = va.shape().to_vec();
        let out = va
            .slice_axis(Axis(0), ndarray::Slice::from(index..index + 1))
            .to_owned();
        let na = self.needs_grad(a);
        self.push_op(
            out,
            na,
            Box::new(move |g, accum| {
                let mut full = ArrayD::zeros(IxDyn(&shape));
                full.slice_axis_mut(Axis(0), ndarray::Slice::from(index..index + 1))
                    .assign(g);
                accum(var_id(a), full);
            }),
        )
    }

    // -- linear algebra ---------------------------------------------------

    /// 2-D matrix product.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let ma = va.view().into_dimensionality::<Ix2>().expect("matmul lhs 2-D");
        let mb = vb.view().into_dimensionality::<Ix2>().expect("matmul rhs 2-D");
        let out = ma.dot(&mb).into_dyn();
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        self.push_op(
            out,
            needs,
            Box::new(move |g, accum| {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let ma = va.view().into_dimensionality::<Ix2>().unwrap();
                let mb = vb.view().into_dimensionality::<Ix2>().unwrap();
                if na {
                    accum(var_id(a), gm.dot(&mb.t()).into_dyn());
                }
                if nb {
                    accum(var_id(b), ma.t().dot(&gm).into_dyn());
                }
            }),
        )
    }

    pub fn transpose2(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va
            .view()
            .into_dimensionality::<Ix2>()
            .expect("transpose 2-D")
            .t()
            .to_owned()
            .into_dyn();
        let na = self.needs_grad(a);
        self.push_op(
            out,
            na,
            Box::new(move |g, accum| {
                let gt = g.view().into_dimensionality::<Ix2>().unwrap().t().to_owned();
                accum(var_id(a), gt.into_dyn());
            }),
        )
    }

    /// Row-wise softmax of a 2-D matrix, with max subtraction.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let m = va.view().into_dimensionality::<Ix2>().expect("softmax 2-D");
        let mut out = Array2::zeros(m.raw_dim());
        for (row, mut orow) in m.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (x, o) in row.iter().zip(orow.iter_mut()) {
                *o = (x - max).exp();
                z += *o;
            }
            orow.mapv_inplace(|e| e / z);
        }
        let saved = out.clone();
        let na = self.needs_grad(a);
        self.push_op(
            out.into_dyn(),
            na,
            Box::new(move |g, accum| {
                let gm = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut da = Array2::zeros(saved.raw_dim());
                for i in 0..saved.nrows() {
                    let dot: f64 = gm.row(i).dot(&saved.row(i));
                    for j in 0..saved.ncols() {
                        da[[i, j]] = (gm[[i, j]] - dot) * saved[[i, j]];
                    }
                }
                accum(var_id(a), da.into_dyn());
            }),
        )
    }

    // -- neural-network blocks --------------------------------------------

    /// 2-D convolution, stride 1, zero padding `pad` on each side.
    /// `x`: `[B, Ci, H, W]`; `w`: `[Co, Ci, kh, kw]`; `b`: `[Co]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let vb = self.value(b);
        let xs = vx.view().into_dimensionality::<Ix4>().expect("conv input 4-D");
        let ws = vw.view().into_dimensionality::<Ix4>().expect("conv weight 4-D");
        let (bsz, ci, h, wd) = xs.dim();
        let (co, ciw, kh, kw) = ws.dim();
        assert_eq!(ci, ciw, "conv channel mismatch");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv input too small");
        let ho = h + 2 * pad - kh + 1;
        let wo = wd + 2 * pad - kw + 1;

        let w2 = ws
            .to_shape((co, ci * kh * kw))
            .expect("kernel matrix view")
            .to_owned();
        let samples = parallelism::map_collect(bsz, |bi| {
            let sample = xs.index_axis(Axis(0), bi);
            let cols = im2col(&sample.to_owned(), kh, kw, pad, ho, wo);
            let mut y = w2.dot(&cols);
            for (mut row, bias) in y.axis_iter_mut(Axis(0)).zip(vb.iter()) {
                row.mapv_inplace(|v| v + bias);
            }
            y
        });
        let mut out = ndarray::Array4::zeros((bsz, co, ho, wo));
        for (bi, y) in samples.into_iter().enumerate() {
            let reshaped = y.into_shape_with_order((co, ho, wo)).unwrap();
            out.index_axis_mut(Axis(0), bi).assign(&reshaped);
        }

        let needs = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        let (nx, nw, nb_) = (self.needs_grad(x), self.needs_grad(w), self.needs_grad(b));
        self.push_op(
            out.into_dyn(),
            needs,
            Box::new(move |g, accum| {
                let gs = g.view().into_dimensionality::<Ix4>().unwrap();
                let xs = vx.view().into_dimensionality::<Ix4>().unwrap();
                let ws = vw.view().into_dimensionality::<Ix4>().unwrap();
                let w2 = ws.to_shape((co, ci * kh * kw)).unwrap().to_owned();

                if nb_ {
                    let mut db = Array1::zeros(co);
                    for bi in 0..bsz {
                        let gb = gs.index_axis(Axis(0), bi);
                        for c in 0..co {
                            db[c] += gb.index_axis(Axis(0), c).sum();
                        }
                    }
                    accum(var_id(b), db.into_dyn());
                }

                // per-sample contributions, combined in sample order
                let parts = parallelism::map_collect(bsz, |bi| {
                    let gb = gs
                        .index_axis(Axis(0), bi)
                        .to_shape((co, ho * wo))
                        .unwrap()
                        .to_owned();
                    let dw_part = if nw {
                        let sample = xs.index_axis(Axis(0), bi).to_owned();
                        let cols = im2col(&sample, kh, kw, pad, ho, wo);
                        Some(gb.dot(&cols.t()))
                    } else {
                        None
                    };
                    let dx_part = if nx {
                        let dcols = w2.t().dot(&gb);
                        Some(col2im(&dcols, ci, h, wd, kh, kw, pad, ho, wo))
                    } else {
                        None
                    };
                    (dw_part, dx_part)
                });

                if nw {
                    let mut dw = Array2::zeros((co, ci * kh * kw));
                    for (dw_part, _) in &parts {
                        dw += dw_part.as_ref().unwrap();
                    }
                    let dw = dw.into_shape_with_order((co, ci, kh, kw)).unwrap();
                    accum(var_id(w), dw.into_dyn());
                }
                if nx {
                    let mut dx = ndarray::Array4::zeros((bsz, ci, h, wd));
                    for (bi, (_, dx_part)) in parts.into_iter().enumerate() {
                        dx.index_axis_mut(Axis(0), bi).assign(&dx_part.unwrap());
                    }
                    accum(var_id(x), dx.into_dyn());
                }
            }),
        )
    }

    /// 2x2 max pooling with stride 2 (floor semantics; a dimension of one is
    /// kept as-is so deep stages of tiny inputs stay well-formed).
    pub fn maxpool2(&self, x: Var) -> Var {
        let vx = self.value(x);
        let xs = vx.view().into_dimensionality::<Ix4>().expect("pool input 4-D");
        let (bsz, c, h, w) = xs.dim();
        let ho = if h == 1 { 1 } else { h / 2 };
        let wo = if w == 1 { 1 } else { w / 2 };
        let mut out = ndarray::Array4::zeros((bsz, c, ho, wo));
        let mut argmax = vec![0u32; bsz * c * ho * wo];
        let mut flat_idx = 0;
        for bi in 0..bsz {
            for ci in 0..c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let (i0, j0) = (2 * oh, 2 * ow);
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = 0u32;
                        for di in 0..2.min(h - i0) {
                            for dj in 0..2.min(w - j0) {
                                let v = xs[[bi, ci, i0 + di, j0 + dj]];
                                if v > best {
                                    best = v;
                                    best_at = ((i0 + di) * w + (j0 + dj)) as u32;
                                }
                            }
                        }
                        out[[bi, ci, oh, ow]] = best;
                        argmax[flat_idx] = best_at;
                        flat_idx += 1;
                    }
                }
            }
        }
        let nx = self.needs_grad(x);
        self.push_op(
            out.into_dyn(),
            nx,
            Box::new(move |g, accum| {
                let gs = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = ndarray::Array4::zeros((bsz, c, h, w));
                let mut flat_idx = 0;
                for bi in 0..bsz {
                    for ci in 0..c {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let at = argmax[flat_idx] as usize;
                                dx[[bi, ci, at / w, at % w]] += gs[[bi, ci, oh, ow]];
                                flat_idx += 1;
                            }
                        }
                    }
                }
                accum(var_id(x), dx.into_dyn());
            }),
        )
    }

    /// Batch normalisation using the statistics of the current batch.
    /// Returns the output plus the per-channel batch mean and (biased)
    /// variance so the caller can maintain running statistics.
    pub fn batchnorm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Array1<f64>, Array1<f64>) {
        let vx = self.value(x);
        let vg = self.value(gamma);
        let vb = self.value(beta);
        let xs = vx.view().into_dimensionality::<Ix4>().expect("bn input 4-D");
        let (bsz, c, h, w) = xs.dim();
        let n = (bsz * h * w) as f64;
        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        for ci in 0..c {
            let ch = xs.index_axis(Axis(1), ci);
            let mu = ch.sum() / n;
            mean[ci] = mu;
            var[ci] = ch.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        }
        let inv_std: Array1<f64> = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mut xhat = ndarray::Array4::zeros((bsz, c, h, w));
        let mut out = ndarray::Array4::zeros((bsz, c, h, w));
        for bi in 0..bsz {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let xh = (xs[[bi, ci, i, j]] - mean[ci]) * inv_std[ci];
                        xhat[[bi, ci, i, j]] = xh;
                        out[[bi, ci, i, j]] = vg[[ci]] * xh + vb[[ci]];
                    }
                }
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        let (nx, ng, nb_) = (
            self.needs_grad(x),
            self.needs_grad(gamma),
            self.needs_grad(beta),
        );
        let inv_std_saved = inv_std.clone();
        let out_var = self.push_op(
            out.into_dyn(),
            needs,
            Box::new(move |g, accum| {
                let gs = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dbeta = Array1::zeros(c);
                let mut dgamma = Array1::zeros(c);
                for bi in 0..bsz {
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                dbeta[ci] += gs[[bi, ci, i, j]];
                                dgamma[ci] += gs[[bi, ci, i, j]] * xhat[[bi, ci, i, j]];
                            }
                        }
                    }
                }
                if nx {
                    let mut dx = ndarray::Array4::zeros((bsz, c, h, w));
                    for bi in 0..bsz {
                        for ci in 0..c {
                            let k = vg[[ci]] * inv_std_saved[ci];
                            for i in 0..h {
                                for j in 0..w {
                                    dx[[bi, ci, i, j]] = k
                                        * (gs[[bi, ci, i, j]]
                                            - (dbeta[ci] + xhat[[bi, ci, i, j]] * dgamma[ci]) / n);
                                }
                            }
                        }
                    }
                    accum(var_id(x), dx.into_dyn());
                }
                if ng {
                    accum(var_id(gamma), dgamma.into_dyn());
                }
                if nb_ {
                    accum(var_id(beta), dbeta.into_dyn());
                }
            }),
        );
        (out_var, mean, var)
    }

    /// Batch normalisation with fixed (running) statistics: a per-channel
    /// affine map.
    pub fn batchnorm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Array1<f64>,
        var: &Array1<f64>,
        eps: f64,
    ) -> Var {
        let vx = self.value(x);
        let vg = self.value(gamma);
        let vb = self.value(beta);
        let xs = vx.view().into_dimensionality::<Ix4>().expect("bn input 4-D");
        let (bsz, c, h, w) = xs.dim();
        let inv_std: Array1<f64> = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mean = mean.clone();
        let mut out = ndarray::Array4::zeros((bsz, c, h, w));
        for bi in 0..bsz {
            for ci in 0..c {
                let k = vg[[ci]] * inv_std[ci];
                let off = vb[[ci]] - k * mean[ci];
                for i in 0..h {
                    for j in 0..w {
                        out[[bi, ci, i, j]] = k * xs[[bi, ci, i, j]] + off;
                    }
                }
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        let (nx, ng, nb_) = (
            self.needs_grad(x),
            self.needs_grad(gamma),
            self.needs_grad(beta),
        );
        self.push_op(
            out.into_dyn(),
            needs,
            Box::new(move |g, accum| {
                let gs = g.view().into_dimensionality::<Ix4>().unwrap();
                let xs = vx.view().into_dimensionality::<Ix4>().unwrap();
                if nx {
                    let mut dx = ndarray::Array4::zeros((bsz, c, h, w));
                    for bi in 0..bsz {
                        for ci in 0..c {
                            let k = vg[[ci]] * inv_std[ci];
                            for i in 0..h {
                                for j in 0..w {
                                    dx[[bi, ci, i, j]] = k * gs[[bi, ci, i, j]];
                                }
                            }
                        }
                    }
                    accum(var_id(x), dx.into_dyn());
                }
                if ng || nb_ {
                    let mut dgamma = Array1::zeros(c);
                    let mut dbeta = Array1::zeros(c);
                    for bi in 0..bsz {
                        for ci in 0..c {
                            for i in 0..h {
                                for j in 0..w {
                                    let xh = (xs[[bi, ci, i, j]] - mean[ci]) * inv_std[ci];
                                    dgamma[ci] += gs[[bi, ci, i, j]] * xh;
                                    dbeta[ci] += gs[[bi, ci, i, j]];
                                }
                            }
                        }
                    }
                    if ng {
                        accum(var_id(gamma), dgamma.into_dyn());
                    }
                    if nb_ {
                        accum(var_id(beta), dbeta.into_dyn());
                    }
                }
            }),
        )
    }
}

fn var_id(v: Var) -> usize {
    v.0
}

/// Unfolds a `[C, H, W]` sample into the `[C*kh*kw, Ho*Wo]` patch matrix for
/// stride-1 convolution with zero padding.
fn im2col(
    x: &ndarray::Array3<f64>,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for dv in 0..kh {
            for du in 0..kw {
                let row = (ci * kh + dv) * kw + du;
                for oh in 0..ho {
                    let ih = oh as isize + dv as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    // valid output columns: 0 <= ow + du - pad < w
                    let ow_lo = pad.saturating_sub(du);
                    let ow_hi = (w + pad - du).min(wo);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let iw_lo = ow_lo + du - pad;
                    for (k, ow) in (ow_lo..ow_hi).enumerate() {
                        cols[[row, oh * wo + ow]] = x[[ci, ih as usize, iw_lo + k]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds a patch-matrix gradient back onto the input.
#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ndarray::Array3<f64> {
    let mut dx = ndarray::Array3::zeros((c, h, w));
    for ci in 0..c {
        for dv in 0..kh {
            for du in 0..kw {
                let row = (ci * kh + dv) * kw + du;
                for oh in 0..ho {
                    let ih = oh as isize + dv as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let ow_lo = pad.saturating_sub(du);
                    let ow_hi = (w + pad - du).min(wo);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let iw_lo = ow_lo + du - pad;
                    for (k, ow) in (ow_lo..ow_hi).enumerate() {
                        dx[[ci, ih as usize, iw_lo + k]] += dcols[[row, oh * wo + ow]];
                    }
                }
            }
        }
    }
    dx
}
