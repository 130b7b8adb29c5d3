//! Structured ops: convolution, batched matmul, softmax, layer norm, linear,
//! nearest-neighbour upsampling. Convolutions lower to im2col + gemm and
//! parallelize over the batch axis; per-item work is deterministic and
//! partial results reduce in a fixed order.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix2, Ix4, IxDyn};
use rayon::prelude::*;

use super::tape::{cast, Scalar, Tape, Tid};

#[derive(Debug, Clone, Copy)]
pub struct Conv2dCfg {
    pub stride: usize,
    pub pad: usize,
}

impl Default for Conv2dCfg {
    fn default() -> Self {
        Self { stride: 1, pad: 1 }
    }
}

fn conv_out_len(inp: usize, k: usize, pad: usize, stride: usize) -> usize {
    (inp + 2 * pad - k) / stride + 1
}

/// im2col for one batch item: [Cin, H, W] -> [Cin*kh*kw, Ho*Wo].
fn im2col<F: Scalar>(
    x: &ndarray::ArrayView3<F>,
    kh: usize,
    kw: usize,
    cfg: Conv2dCfg,
) -> Array2<F> {
    let (cin, h, w) = x.dim();
    let ho = conv_out_len(h, kh, cfg.pad, cfg.stride);
    let wo = conv_out_len(w, kw, cfg.pad, cfg.stride);
    let mut col = Array2::<F>::zeros((cin * kh * kw, ho * wo));
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                for oh in 0..ho {
                    let ih = (oh * cfg.stride + ki) as isize - cfg.pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * cfg.stride + kj) as isize - cfg.pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        col[[row, oh * wo + ow]] = x[[c, ih as usize, iw as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Scatters column gradients back to the input layout.
fn col2im<F: Scalar>(
    dcol: &Array2<F>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    cfg: Conv2dCfg,
) -> Array3<F> {
    let ho = conv_out_len(h, kh, cfg.pad, cfg.stride);
    let wo = conv_out_len(w, kw, cfg.pad, cfg.stride);
    let mut dx = Array3::<F>::zeros((cin, h, w));
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                for oh in 0..ho {
                    let ih = (oh * cfg.stride + ki) as isize - cfg.pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * cfg.stride + kj) as isize - cfg.pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        dx[[c, ih as usize, iw as usize]] += dcol[[row, oh * wo + ow]];
                    }
                }
            }
        }
    }
    dx
}

impl<F: Scalar> Tape<F> {
    /// 2-D convolution, NCHW. `x` [B, Cin, H, W], `w` [Cout, Cin, kh, kw],
    /// `b` [Cout].
    pub fn conv2d(&mut self, x: Tid, w: Tid, b: Tid, cfg: Conv2dCfg) -> Tid {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let (batch, cin, h, wid) = xv.dim();
        let (cout, cin_w, kh, kw) = wv.dim();
        assert_eq!(cin, cin_w, "conv2d channel mismatch");
        assert_eq!(bv.len(), cout, "conv2d bias mismatch");
        let ho = conv_out_len(h, kh, cfg.pad, cfg.stride);
        let wo = conv_out_len(wid, kw, cfg.pad, cfg.stride);

        let wmat = wv
            .to_owned()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap();
        let outs: Vec<Array2<F>> = (0..batch)
            .into_par_iter()
            .map(|bi| {
                let col = im2col(&xv.index_axis(Axis(0), bi), kh, kw, cfg);
                let mut o = wmat.dot(&col);
                for (mut row, &bias) in o.rows_mut().into_iter().zip(bv.iter()) {
                    row.mapv_inplace(|v| v + bias);
                }
                o
            })
            .collect();
        let mut value = ndarray::Array4::<F>::zeros((batch, cout, ho, wo));
        for (bi, o) in outs.into_iter().enumerate() {
            value
                .index_axis_mut(Axis(0), bi)
                .assign(&o.into_shape_with_order((cout, ho, wo)).unwrap());
        }

        self.push(
            value.into_dyn(),
            vec![x, w, b],
            Some(Box::new(move |g, p, _| {
                let xv = p[0].view().into_dimensionality::<Ix4>().unwrap();
                let wv = p[1].view().into_dimensionality::<Ix4>().unwrap();
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let (batch, cin, h, wid) = xv.dim();
                let (cout, _, kh, kw) = wv.dim();
                let wmat = wv
                    .to_owned()
                    .into_shape_with_order((cout, cin * kh * kw))
                    .unwrap();
                let wmat_t = wmat.t().to_owned();

                let parts: Vec<(Array3<F>, Array2<F>, Array1<F>)> = (0..batch)
                    .into_par_iter()
                    .map(|bi| {
                        let col = im2col(&xv.index_axis(Axis(0), bi), kh, kw, cfg);
                        let go = gv
                            .index_axis(Axis(0), bi)
                            .to_owned()
                            .into_shape_with_order((cout, col.ncols()))
                            .unwrap();
                        let dw = go.dot(&col.t());
                        let db = go.sum_axis(Axis(1));
                        let dcol = wmat_t.dot(&go);
                        let dx = col2im(&dcol, cin, h, wid, kh, kw, cfg);
                        (dx, dw, db)
                    })
                    .collect();

                let mut dx = ndarray::Array4::<F>::zeros((batch, cin, h, wid));
                let mut dw = Array2::<F>::zeros((cout, cin * kh * kw));
                let mut db = Array1::<F>::zeros(cout);
                for (bi, (dxb, dwb, dbb)) in parts.into_iter().enumerate() {
                    dx.index_axis_mut(Axis(0), bi).assign(&dxb);
                    dw += &dwb;
                    db += &dbb;
                }
                vec![
                    dx.into_dyn(),
                    dw.into_shape_with_order((cout, cin, kh, kw)).unwrap().into_dyn(),
                    db.into_dyn(),
                ]
            })),
        )
    }

    /// Nearest-neighbour resize of the last two axes to `(th, tw)`.
    pub fn upsample_nearest(&mut self, x: Tid, th: usize, tw: usize) -> Tid {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (batch, c, h, w) = xv.dim();
        let src_i: Vec<usize> = (0..th).map(|i| i * h / th).collect();
        let src_j: Vec<usize> = (0..tw).map(|j| j * w / tw).collect();
        let mut value = ndarray::Array4::<F>::zeros((batch, c, th, tw));
        for bi in 0..batch {
            for ci in 0..c {
                for i in 0..th {
                    for j in 0..tw {
                        value[[bi, ci, i, j]] = xv[[bi, ci, src_i[i], src_j[j]]];
                    }
                }
            }
        }
        let (si, sj) = (src_i.clone(), src_j.clone());
        self.push(
            value.into_dyn(),
            vec![x],
            Some(Box::new(move |g, p, _| {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let (batch, c, _, _) = p[0].view().into_dimensionality::<Ix4>().unwrap().dim();
                let mut dx = ArrayD::<F>::zeros(p[0].raw_dim());
                let mut dxv = dx.view_mut().into_dimensionality::<Ix4>().unwrap();
                for bi in 0..batch {
                    for ci in 0..c {
                        for (i, &s) in si.iter().enumerate() {
                            for (j, &t) in sj.iter().enumerate() {
                                dxv[[bi, ci, s, t]] += gv[[bi, ci, i, j]];
                            }
                        }
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Batched matrix product: `a` [..., m, k] x `b` [..., k, n] with equal
    /// leading dimensions.
    pub fn matmul(&mut self, a: Tid, b: Tid) -> Tid {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let ra = ash.len();
        let rb = bsh.len();
        assert!(ra >= 2 && rb >= 2 && ra == rb, "matmul rank mismatch");
        assert_eq!(&ash[..ra - 2], &bsh[..rb - 2], "matmul leading dims differ");
        let (m, k) = (ash[ra - 2], ash[ra - 1]);
        let (kb, n) = (bsh[rb - 2], bsh[rb - 1]);
        assert_eq!(k, kb, "matmul inner dim mismatch");
        let lead: usize = ash[..ra - 2].iter().product();

        let av = self.value(a).as_standard_layout().to_owned().into_shape_with_order((lead, m, k)).unwrap();
        let bv = self.value(b).as_standard_layout().to_owned().into_shape_with_order((lead, k, n)).unwrap();
        let outs: Vec<Array2<F>> = (0..lead)
            .into_par_iter()
            .map(|i| av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i)))
            .collect();
        let mut value = Array3::<F>::zeros((lead, m, n));
        for (i, o) in outs.into_iter().enumerate() {
            value.index_axis_mut(Axis(0), i).assign(&o);
        }
        let mut out_shape = ash[..ra - 2].to_vec();
        out_shape.extend_from_slice(&[m, n]);
        let value = value.into_shape_with_order(IxDyn(&out_shape)).unwrap();

        self.push(
            value,
            vec![a, b],
            Some(Box::new(move |g, p, _| {
                let gv = g.as_standard_layout().to_owned().into_shape_with_order((lead, m, n)).unwrap();
                let av = p[0].as_standard_layout().to_owned().into_shape_with_order((lead, m, k)).unwrap();
                let bv = p[1].as_standard_layout().to_owned().into_shape_with_order((lead, k, n)).unwrap();
                let parts: Vec<(Array2<F>, Array2<F>)> = (0..lead)
                    .into_par_iter()
                    .map(|i| {
                        let gi = gv.index_axis(Axis(0), i);
                        let da = gi.dot(&bv.index_axis(Axis(0), i).t());
                        let db = av.index_axis(Axis(0), i).t().dot(&gi);
                        (da, db)
                    })
                    .collect();
                let mut da = Array3::<F>::zeros((lead, m, k));
                let mut db = Array3::<F>::zeros((lead, k, n));
                for (i, (pa, pb)) in parts.into_iter().enumerate() {
                    da.index_axis_mut(Axis(0), i).assign(&pa);
                    db.index_axis_mut(Axis(0), i).assign(&pb);
                }
                vec![
                    da.into_shape_with_order(p[0].raw_dim()).unwrap(),
                    db.into_shape_with_order(p[1].raw_dim()).unwrap(),
                ]
            })),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Tid) -> Tid {
        let last = self.shape(a).len() - 1;
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
            row.mapv_inplace(|x| (x - mx).exp());
            let s = row.iter().fold(F::zero(), |acc, &x| acc + x);
            row.mapv_inplace(|x| x / s);
        }
        let _ = last;
        self.push(
            value,
            vec![a],
            Some(Box::new(|g, _, y| {
                let mut out = g.clone();
                for (mut orow, yrow) in out.rows_mut().into_iter().zip(y.rows()) {
                    let dot = orow
                        .iter()
                        .zip(yrow.iter())
                        .fold(F::zero(), |acc, (&g, &y)| acc + g * y);
                    ndarray::Zip::from(&mut orow).and(&yrow).for_each(|o, &y| {
                        *o = y * (*o - dot);
                    });
                }
                vec![out]
            })),
        )
    }

    /// Layer normalisation over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Tid, gamma: Tid, beta: Tid, eps: f64) -> Tid {
        let d = *self.shape(x).last().unwrap();
        assert_eq!(self.shape(gamma), &[d]);
        assert_eq!(self.shape(beta), &[d]);
        let epsf: F = cast(eps);
        let inv_d: F = cast(1.0 / d as f64);
        let gv = self.value(gamma).clone();
        let bv = self.value(beta).clone();
        let mut value = self.value(x).clone();
        for mut row in value.rows_mut() {
            let mean = row.iter().fold(F::zero(), |a, &v| a + v) * inv_d;
            let var = row.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
            let inv_std = F::one() / (var + epsf).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * gv[[i]] + bv[[i]];
            }
        }
        self.push(
            value,
            vec![x, gamma, beta],
            Some(Box::new(move |g, p, _| {
                let x = p[0];
                let gamma = p[1];
                let mut dx = ArrayD::<F>::zeros(x.raw_dim());
                let d = *x.shape().last().unwrap();
                let inv_d: F = cast(1.0 / d as f64);
                let mut dgamma = Array1::<F>::zeros(d);
                let mut dbeta = Array1::<F>::zeros(d);
                for ((xrow, grow), mut dxrow) in x
                    .rows()
                    .into_iter()
                    .zip(g.rows())
                    .zip(dx.rows_mut())
                {
                    let mean = xrow.iter().fold(F::zero(), |a, &v| a + v) * inv_d;
                    let var = xrow
                        .iter()
                        .fold(F::zero(), |a, &v| a + (v - mean) * (v - mean))
                        * inv_d;
                    let inv_std = F::one() / (var + epsf).sqrt();
                    // xhat and the two reduction terms of the layer-norm grad.
                    let mut sum_gy = F::zero();
                    let mut sum_gy_xhat = F::zero();
                    for i in 0..d {
                        let xhat = (xrow[i] - mean) * inv_std;
                        let gy = grow[i] * gamma[[i]];
                        sum_gy += gy;
                        sum_gy_xhat += gy * xhat;
                        dgamma[i] += grow[i] * xhat;
                        dbeta[i] += grow[i];
                    }
                    for i in 0..d {
                        let xhat = (xrow[i] - mean) * inv_std;
                        let gy = grow[i] * gamma[[i]];
                        dxrow[i] = inv_std * (gy - inv_d * sum_gy - xhat * inv_d * sum_gy_xhat);
                    }
                }
                vec![dx, dgamma.into_dyn(), dbeta.into_dyn()]
            })),
        )
    }

    /// Dense layer over the last axis: x [..., in] -> [..., out].
    pub fn linear(&mut self, x: Tid, w: Tid, b: Tid) -> Tid {
        let xin = *self.shape(x).last().unwrap();
        let (win, wout) = {
            let s = self.shape(w);
            assert_eq!(s.len(), 2, "linear weight must be 2-D");
            (s[0], s[1])
        };
        assert_eq!(xin, win, "linear input dim mismatch");
        assert_eq!(self.shape(b), &[wout]);
        let lead: usize = self.shape(x)[..self.shape(x).len() - 1].iter().product();
        let x2 = self
            .value(x)
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((lead, xin))
            .unwrap();
        let wv = self.value(w).clone().into_dimensionality::<Ix2>().unwrap();
        let bv = self
            .value(b)
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let mut out = x2.dot(&wv);
        for mut row in out.rows_mut() {
            ndarray::Zip::from(&mut row).and(&bv).for_each(|o, &b| *o = *o + b);
        }
        let mut out_shape = self.shape(x)[..self.shape(x).len() - 1].to_vec();
        out_shape.push(wout);
        let value = out.into_shape_with_order(IxDyn(&out_shape)).unwrap();
        self.push(
            value,
            vec![x, w, b],
            Some(Box::new(move |g, p, _| {
                let g2 = g.as_standard_layout().to_owned().into_shape_with_order((lead, wout)).unwrap();
                let x2 = p[0].as_standard_layout().to_owned().into_shape_with_order((lead, xin)).unwrap();
                let wv = p[1].view().into_dimensionality::<Ix2>().unwrap();
                let dx = g2.dot(&wv.t());
                let dw = x2.t().dot(&g2);
                let db = g2.sum_axis(Axis(0));
                vec![
                    dx.into_shape_with_order(p[0].raw_dim()).unwrap(),
                    dw.into_dyn(),
                    db.into_dyn(),
                ]
            })),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;
    use rand::Rng;

    /// Central finite-difference check of d(sum(out * r))/d(input) for every
    /// input of a taped computation.
    fn fd_check<B>(build: B, input_shapes: &[&[usize]], tol: f64)
    where
        B: Fn(&mut Tape<f64>, &[Tid]) -> Tid,
    {
        let mut rng = rng_for(77, "fd-check", 0);
        let inputs: Vec<ArrayD<f64>> = input_shapes
            .iter()
            .map(|s| ArrayD::from_shape_fn(IxDyn(s), |_| rng.random::<f64>() - 0.5))
            .collect();

        let mut tape = Tape::<f64>::new();
        let ids: Vec<Tid> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = build(&mut tape, &ids);
        let r = ArrayD::from_shape_fn(tape.value(out).raw_dim(), |_| rng.random::<f64>() - 0.5);
        let grads = tape.backward_with(out, r.clone());

        let loss = |inputs: &[ArrayD<f64>]| -> f64 {
            let mut t = Tape::<f64>::new();
            let ids: Vec<Tid> = inputs.iter().map(|v| t.leaf(v.clone())).collect();
            let out = build(&mut t, &ids);
            (t.value(out) * &r).sum()
        };

        let eps = 1e-5;
        for (ii, id) in ids.iter().enumerate() {
            let analytic = grads[id.0].clone().expect("missing gradient");
            let mut worst: f64 = 0.0;
            let n = inputs[ii].len();
            let stride = (n / 17).max(1);
            for flat in (0..n).step_by(stride) {
                let mut plus = inputs.to_vec();
                let mut minus = inputs.to_vec();
                plus[ii].as_slice_mut().unwrap()[flat] += eps;
                minus[ii].as_slice_mut().unwrap()[flat] -= eps;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[flat];
                worst = worst.max((numeric - a).abs() / numeric.abs().max(a.abs()).max(1.0));
            }
            assert!(worst < tol, "input {ii}: worst rel err {worst}");
        }
    }

    #[test]
    fn fd_elementwise_ops() {
        fd_check(
            |t, ids| {
                let s = t.sigmoid(ids[0]);
                let m = t.mul(s, ids[1]);
                let a = t.add(m, ids[0]);
                let sl = t.silu(a);
                t.mean_all(sl)
            },
            &[&[3, 4], &[3, 4]],
            1e-6,
        );
    }

    #[test]
    fn fd_glu_and_cat() {
        fd_check(
            |t, ids| {
                let c = t.cat(&[ids[0], ids[1]], 1);
                let g = t.glu(c, 1);
                t.mean_all(g)
            },
            &[&[2, 3, 5], &[2, 3, 5]],
            1e-6,
        );
    }

    #[test]
    fn fd_reshape_permute_narrow() {
        fd_check(
            |t, ids| {
                let p = t.permute(ids[0], &[0, 2, 1]);
                let r = t.reshape(p, &[4, 6]);
                let nw = t.narrow(r, 0, 1, 2);
                t.mean_all(nw)
            },
            &[&[2, 3, 4]],
            1e-6,
        );
    }

    #[test]
    fn fd_reductions() {
        fd_check(
            |t, ids| {
                let s = t.sum_axis(ids[0], 1);
                let m = t.mean_axis(ids[1], 0);
                let q = t.mul(s, m);
                let r = t.reshape(q, &[1, 2, 4]);
                let rep = t.repeat_axis(r, 0, 3);
                t.mean_all(rep)
            },
            &[&[2, 3, 4], &[5, 2, 4]],
            1e-6,
        );
    }

    #[test]
    fn fd_conv2d() {
        fd_check(
            |t, ids| {
                let c = t.conv2d(ids[0], ids[1], ids[2], Conv2dCfg { stride: 1, pad: 1 });
                t.mean_all(c)
            },
            &[&[2, 3, 5, 4], &[4, 3, 3, 3], &[4]],
            1e-5,
        );
    }

    #[test]
    fn fd_conv2d_strided() {
        fd_check(
            |t, ids| {
                let c = t.conv2d(ids[0], ids[1], ids[2], Conv2dCfg { stride: 2, pad: 1 });
                t.mean_all(c)
            },
            &[&[2, 2, 7, 5], &[3, 2, 3, 3], &[3]],
            1e-5,
        );
    }

    #[test]
    fn fd_upsample() {
        fd_check(
            |t, ids| {
                let u = t.upsample_nearest(ids[0], 7, 5);
                t.mean_all(u)
            },
            &[&[2, 3, 4, 3]],
            1e-6,
        );
    }

    #[test]
    fn fd_matmul_softmax() {
        fd_check(
            |t, ids| {
                let m = t.matmul(ids[0], ids[1]);
                let s = t.softmax(m);
                let v = t.matmul(s, ids[2]);
                t.mean_all(v)
            },
            &[&[2, 3, 4], &[2, 4, 3], &[2, 3, 5]],
            1e-5,
        );
    }

    #[test]
    fn fd_layer_norm_linear() {
        fd_check(
            |t, ids| {
                let ln = t.layer_norm(ids[0], ids[1], ids[2], 1e-5);
                let li = t.linear(ln, ids[3], ids[4]);
                t.mean_all(li)
            },
            &[&[3, 6], &[6], &[6], &[6, 4], &[4]],
            1e-5,
        );
    }

    #[test]
    fn fd_loss_shape_ops() {
        fd_check(
            |t, ids| {
                let d = t.sub(ids[0], ids[1]);
                let sq = t.mul(d, d);
                let m = t.mean_all(sq);
                let c = t.clamp_min(m, 1e-12);
                let l = t.ln(c);
                t.scale(l, 1.0 / std::f64::consts::LN_10)
            },
            &[&[4, 5], &[4, 5]],
            1e-5,
        );
    }

    #[test]
    fn grad_accumulates_on_shared_input() {
        // y = x + x: dy/dx = 2.
        let mut t = Tape::<f64>::new();
        let x = t.leaf(ArrayD::from_elem(IxDyn(&[3]), 1.5));
        let y = t.add(x, x);
        let grads = t.backward(y);
        let gx = grads[x.0].as_ref().unwrap();
        assert!(gx.iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn clamp_floor_blocks_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(ArrayD::from_elem(IxDyn(&[1]), 1e-15));
        let c = t.clamp_min(x, 1e-12);
        let l = t.ln(c);
        let grads = t.backward(l);
        assert_eq!(grads[x.0].as_ref().unwrap()[[0]], 0.0);
        assert!((t.value(l)[[0]] - (1e-12f64).ln()).abs() < 1e-9);
    }
}
