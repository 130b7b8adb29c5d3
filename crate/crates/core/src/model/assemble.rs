//! Observation batches mapped onto model tensors.
//!
//! PRGs of equal bundle width are processed together: the conv stacks see
//! `[n_slots * n_streams * n_prg_in_group, C, bs*12, 14]` tensors. The last
//! PRG of a carrier may be shorter than the bundle size, so a forward pass
//! carries up to two groups. Stream order is rx-major: s = j * n_layers + l.

use ndarray::{ArrayD, IxDyn};

use crate::chansim::Observation;
use crate::grid::{GridLayout, SC_PER_RB, SYMBOLS_PER_SLOT};
use crate::nn::{cast, Scalar};

/// PRGs of one bundle width, in global PRG order.
#[derive(Debug, Clone)]
pub struct GroupLayout {
    pub bs_rb: usize,
    pub prg_indices: Vec<usize>,
}

pub fn group_prgs(layout: &GridLayout) -> Vec<GroupLayout> {
    let mut groups: Vec<GroupLayout> = Vec::new();
    for (i, &(_, len)) in layout.prg_spans.iter().enumerate() {
        match groups.iter_mut().find(|g| g.bs_rb == len) {
            Some(g) => g.prg_indices.push(i),
            None => groups.push(GroupLayout {
                bs_rb: len,
                prg_indices: vec![i],
            }),
        }
    }
    groups
}

/// Constant tensors for one group, ready to become tape leaves.
pub(crate) struct GroupConstants<F: Scalar> {
    /// CoarseNet input `[B*S*N_g, 8, H, 14]`: Re/Im y, Re/Im x, Re/Im y x^H,
    /// mask, reported sigma.
    pub coarse_in: ArrayD<F>,
    /// Pilot real/imag per stream `[B*S*N_g, 1, H, 14]`.
    pub x_re: ArrayD<F>,
    pub x_im: ArrayD<F>,
    /// Received samples per (slot, rx, prg): `[B, n_rx, N_g, H, 14]`.
    pub y_re_rx: ArrayD<F>,
    pub y_im_rx: ArrayD<F>,
    /// Mask per stream `[B*S*N_g, 1, H, 14]`.
    pub mask: ArrayD<F>,
}

pub(crate) fn build_group_constants<F: Scalar>(
    batch: &[&Observation],
    group: &GroupLayout,
) -> GroupConstants<F> {
    let b = batch.len();
    let layout = &batch[0].layout;
    let n_rx = batch[0].n_rx();
    let n_layers = batch[0].n_layers();
    let s = n_rx * n_layers;
    let n_g = group.prg_indices.len();
    let h = group.bs_rb * SC_PER_RB;
    let w = SYMBOLS_PER_SLOT;

    let mut coarse_in = ArrayD::<F>::zeros(IxDyn(&[b * s * n_g, 8, h, w]));
    let mut x_re = ArrayD::<F>::zeros(IxDyn(&[b * s * n_g, 1, h, w]));
    let mut x_im = ArrayD::<F>::zeros(IxDyn(&[b * s * n_g, 1, h, w]));
    let mut mask = ArrayD::<F>::zeros(IxDyn(&[b * s * n_g, 1, h, w]));
    let mut y_re_rx = ArrayD::<F>::zeros(IxDyn(&[b, n_rx, n_g, h, w]));
    let mut y_im_rx = ArrayD::<F>::zeros(IxDyn(&[b, n_rx, n_g, h, w]));

    for (bi, obs) in batch.iter().enumerate() {
        let sigma = cast::<F>(obs.sigma_reported);
        for j in 0..n_rx {
            for l in 0..n_layers {
                for (ni, &prg) in group.prg_indices.iter().enumerate() {
                    let range = layout.prg_subcarriers(prg);
                    let row = ((bi * n_rx + j) * n_layers + l) * n_g + ni;
                    for (fi, f) in range.clone().enumerate() {
                        for t in 0..w {
                            let m = layout.mask[[f, t]];
                            if m == 1 {
                                let y = obs.y[[j, f, t]];
                                let x = obs.pilots[[l, f, t]];
                                let ls = y * x.conj();
                                coarse_in[[row, 0, fi, t]] = cast(y.re);
                                coarse_in[[row, 1, fi, t]] = cast(y.im);
                                coarse_in[[row, 2, fi, t]] = cast(x.re);
                                coarse_in[[row, 3, fi, t]] = cast(x.im);
                                coarse_in[[row, 4, fi, t]] = cast(ls.re);
                                coarse_in[[row, 5, fi, t]] = cast(ls.im);
                                coarse_in[[row, 6, fi, t]] = F::one();
                                x_re[[row, 0, fi, t]] = cast(x.re);
                                x_im[[row, 0, fi, t]] = cast(x.im);
                                mask[[row, 0, fi, t]] = F::one();
                            }
                            coarse_in[[row, 7, fi, t]] = sigma;
                        }
                    }
                }
            }
        }
        for j in 0..n_rx {
            for (ni, &prg) in group.prg_indices.iter().enumerate() {
                let range = layout.prg_subcarriers(prg);
                for (fi, f) in range.enumerate() {
                    for t in 0..w {
                        if layout.mask[[f, t]] == 1 {
                            let y = obs.y[[j, f, t]];
                            y_re_rx[[bi, j, ni, fi, t]] = cast(y.re);
                            y_im_rx[[bi, j, ni, fi, t]] = cast(y.im);
                        }
                    }
                }
            }
        }
    }

    GroupConstants {
        coarse_in,
        x_re,
        x_im,
        y_re_rx,
        y_im_rx,
        mask,
    }
}

/// Ground-truth tensors matching the model's group layout:
/// `[B*S*N_g, 2, bs*12, 14]` per group.
pub fn build_group_targets<F: Scalar>(batch: &[&Observation], group: &GroupLayout) -> ArrayD<F> {
    let b = batch.len();
    let layout = &batch[0].layout;
    let n_rx = batch[0].n_rx();
    let n_layers = batch[0].n_layers();
    let n_g = group.prg_indices.len();
    let h = group.bs_rb * SC_PER_RB;
    let w = SYMBOLS_PER_SLOT;
    let mut out = ArrayD::<F>::zeros(IxDyn(&[b * n_rx * n_layers * n_g, 2, h, w]));
    for (bi, obs) in batch.iter().enumerate() {
        for j in 0..n_rx {
            for l in 0..n_layers {
                for (ni, &prg) in group.prg_indices.iter().enumerate() {
                    let row = ((bi * n_rx + j) * n_layers + l) * n_g + ni;
                    for (fi, f) in layout.prg_subcarriers(prg).enumerate() {
                        for t in 0..w {
                            let g = obs.g_true[[j, l, f, t]];
                            out[[row, 0, fi, t]] = cast(g.re);
                            out[[row, 1, fi, t]] = cast(g.im);
                        }
                    }
                }
            }
        }
    }
    out
}
