//! Loss assembly: per-step MSE, linearly increasing step weights, SNR
//! scaling, and the log10 batch objective.

use ndarray::{ArrayD, IxDyn};

use crate::chansim::Observation;
use crate::grid::SYMBOLS_PER_SLOT;
use crate::model::ModelForward;
use crate::nn::{cast, Scalar, Tid};
use crate::C64;

/// Floor applied inside the log10 so a perfect fit stays finite.
pub const LOSS_FLOOR: f64 = 1e-12;

/// Linearly increasing per-step weights w_t = 2(t+1)/((T+1)(T+2)),
/// summing to one over t = 0..=T.
pub fn step_weights(t_steps: usize) -> Vec<f64> {
    let t1 = (t_steps + 1) as f64;
    let norm = t1 * (t1 + 1.0);
    (0..=t_steps).map(|t| 2.0 * (t as f64 + 1.0) / norm).collect()
}

/// SNR scaling factor s = (10^(snr/10) + 1) * c.
pub fn snr_scale(snr_db: f64, c: f64) -> f64 {
    (10f64.powf(snr_db / 10.0) + 1.0) * c
}

/// Appends the training objective to a forward tape:
/// log10( (1/M) sum_m (1/s_m) sum_t w_t MSE_{t,m} ), MSE per RE summed over
/// streams, floored at [`LOSS_FLOOR`].
///
/// Returns the scalar loss node.
pub fn total_loss_tape<F: Scalar>(fwd: &mut ModelForward<F>, batch: &[&Observation]) -> Tid {
    let t_steps = fwd.n_steps() - 1;
    let weights = step_weights(t_steps);
    let m = batch.len() as f64;
    let n_re = (batch[0].n_subcarriers() * SYMBOLS_PER_SLOT) as f64;
    let scales: Vec<f64> = batch.iter().map(|o| snr_scale(o.snr_db, o.amp)).collect();

    // Targets and per-element weights 1/(M s_m |REs|) per group, constant
    // w.r.t. the parameters.
    let mut targets = Vec::with_capacity(fwd.groups.len());
    let mut evec = Vec::with_capacity(fwd.groups.len());
    for group in &fwd.groups {
        let target = crate::model::build_group_targets::<F>(batch, group);
        let shape = target.shape().to_vec();
        let n_g = group.prg_indices.len();
        let s = fwd.n_rx * fwd.n_layers;
        let mut w = ArrayD::<F>::zeros(IxDyn(&shape));
        for row in 0..shape[0] {
            let slot = row / (s * n_g);
            let val = cast::<F>(1.0 / (m * scales[slot] * n_re));
            w.index_axis_mut(ndarray::Axis(0), row).fill(val);
        }
        targets.push(fwd.tape.leaf(target));
        evec.push(w);
    }

    let mut acc: Option<Tid> = None;
    for (t, &wt) in weights.iter().enumerate() {
        for g in 0..fwd.groups.len() {
            let est = fwd.steps[t][g];
            let diff = fwd.tape.sub(est, targets[g]);
            let sq = fwd.tape.mul(diff, diff);
            let weighted = fwd.tape.mul_const(sq, &evec[g]);
            let mean = fwd.tape.mean_all(weighted);
            let n_elem = fwd.tape.value(weighted).len() as f64;
            let summed = fwd.tape.scale(mean, wt * n_elem);
            acc = Some(match acc {
                None => summed,
                Some(prev) => fwd.tape.add(prev, summed),
            });
        }
    }
    let total = acc.expect("loss over empty forward");
    let floored = fwd.tape.clamp_min(total, LOSS_FLOOR);
    let ln = fwd.tape.ln(floored);
    fwd.tape.scale(ln, 1.0 / std::f64::consts::LN_10)
}

/// Independent reference evaluation of the same objective from complex
/// estimate grids, used to pin the tape implementation.
pub fn total_loss_reference(
    estimates: &[Vec<ndarray::Array4<C64>>],
    batch: &[&Observation],
) -> f64 {
    let t_steps = estimates.len() - 1;
    let weights = step_weights(t_steps);
    let m = batch.len();
    let mut mean = 0.0;
    for (s_idx, obs) in batch.iter().enumerate() {
        let s_m = snr_scale(obs.snr_db, obs.amp);
        let n_re = (obs.n_subcarriers() * SYMBOLS_PER_SLOT) as f64;
        let mut inner = 0.0;
        for (t, w_t) in weights.iter().enumerate() {
            let est = &estimates[t][s_idx];
            let mse: f64 = est
                .iter()
                .zip(obs.g_true.iter())
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                / n_re;
            inner += w_t * mse;
        }
        mean += inner / s_m;
    }
    (mean / m as f64).max(LOSS_FLOOR).log10()
}
