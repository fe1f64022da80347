//! Enhancement loss, SI-SNR, permutation-invariant separation loss and the
//! weighted multi-task objective.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::signal::Representation;
use crate::tensor::Tensor;

/// Residual-energy floor in the SI-SNR denominator; caps perfect
/// reconstruction at `10·log10(‖s_target‖² / EPS)`.
pub const SI_SNR_EPS: f64 = 1e-8;

/// Default weight of the enhancement loss.
pub const DEFAULT_LAMBDA_SE: f64 = 0.1;

const DB: f64 = 10.0 / std::f64::consts::LN_10;

/// Intermediate quantities of one SI-SNR evaluation, kept for the gradient.
#[derive(Clone, Debug)]
pub struct SiSnrParts {
    pub value: f64,
    target: Vec<f64>,
    residual: Vec<f64>,
    target_energy: f64,
    residual_energy: f64,
    residual_floored: bool,
}

pub(crate) fn si_snr_parts(est: &[f64], reference: &[f64]) -> Result<SiSnrParts> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(Error::shape("si_snr", &[est.len()], &[reference.len()]));
    }
    let n = est.len() as f64;
    let me = est.iter().sum::<f64>() / n;
    let mr = reference.iter().sum::<f64>() / n;
    let e0: Vec<f64> = est.iter().map(|v| v - me).collect();
    let r0: Vec<f64> = reference.iter().map(|v| v - mr).collect();
    let rr: f64 = r0.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(Error::invalid("si_snr", "reference has zero energy"));
    }
    let alpha = e0.iter().zip(&r0).map(|(a, b)| a * b).sum::<f64>() / rr;
    let target: Vec<f64> = r0.iter().map(|v| alpha * v).collect();
    let residual: Vec<f64> = e0.iter().zip(&target).map(|(e, s)| e - s).collect();
    let target_energy = target.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
    let raw_residual: f64 = residual.iter().map(|v| v * v).sum();
    let residual_floored = raw_residual < SI_SNR_EPS;
    let residual_energy = raw_residual.max(SI_SNR_EPS);
    let value = DB * (target_energy / residual_energy).ln();
    Ok(SiSnrParts {
        value,
        target,
        residual,
        target_energy,
        residual_energy,
        residual_floored,
    })
}

impl SiSnrParts {
    /// d(SI-SNR)/d(est), including the zero-mean projection.
    pub(crate) fn grad_est(&self) -> Vec<f64> {
        let mut g: Vec<f64> = self
            .target
            .iter()
            .zip(&self.residual)
            .map(|(s, r)| {
                let from_target = 2.0 * s / self.target_energy;
                let from_residual = if self.residual_floored {
                    0.0
                } else {
                    2.0 * r / self.residual_energy
                };
                DB * (from_target - from_residual)
            })
            .collect();
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        for v in &mut g {
            *v -= mean;
        }
        g
    }
}

/// Scale-invariant SNR in dB. Both signals are zero-meaned first.
pub fn si_snr(est: &Tensor, reference: &Tensor) -> Result<f64> {
    if est.shape() != reference.shape() {
        return Err(Error::shape("si_snr", est.shape(), reference.shape()));
    }
    Ok(si_snr_parts(est.data(), reference.data())?.value)
}

/// Plain SNR in dB, `10·log10(‖ref‖² / ‖ref − est‖²)`, used for SDRi. This is
/// not the BSS-eval SDR: no distortion filter is fitted.
pub fn snr(est: &Tensor, reference: &Tensor) -> Result<f64> {
    if est.shape() != reference.shape() {
        return Err(Error::shape("snr", est.shape(), reference.shape()));
    }
    let rr = reference.sq_norm();
    if rr == 0.0 {
        return Err(Error::invalid("snr", "reference has zero energy"));
    }
    let err: f64 = est
        .data()
        .iter()
        .zip(reference.data())
        .map(|(e, r)| (r - e) * (r - e))
        .sum();
    Ok(DB * (rr / err.max(SI_SNR_EPS)).ln())
}

/// `(1 / (F·T')) ‖h_e − h_c‖²`.
pub fn se_loss(h_e: &Representation, h_c: &Representation) -> Result<f64> {
    let (a, b) = (h_e.tensor(), h_c.tensor());
    if a.shape() != b.shape() {
        return Err(Error::shape("se_loss", a.shape(), b.shape()));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// Graph form of [`se_loss`]; `h_c` is a detached target.
pub fn se_loss_graph(tape: &mut Tape, h_e: Var, h_c: &Tensor) -> Result<Var> {
    if tape.shape(h_e) != h_c.shape() {
        return Err(Error::shape("se_loss", tape.shape(h_e), h_c.shape()));
    }
    let target = tape.constant(h_c.clone())?;
    let diff = tape.sub(h_e, target)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

/// Result of the permutation search: `perm[k]` is the target index assigned
/// to estimate `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Upit {
    pub loss: f64,
    pub perm: Vec<usize>,
}

/// Pairwise SI-SNR matrix, `m[k][j] = si_snr(est_k, target_j)`.
pub fn pairwise_si_snr(estimates: &[Tensor], targets: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    if estimates.len() != targets.len() || estimates.is_empty() {
        return Err(Error::invalid(
            "upit_ss_loss",
            format!("{} estimates vs {} targets", estimates.len(), targets.len()),
        ));
    }
    estimates
        .iter()
        .map(|e| targets.iter().map(|t| si_snr(e, t)).collect())
        .collect()
}

/// Picks the permutation maximizing mean SI-SNR; the lexicographically
/// smallest permutation wins ties.
pub fn best_permutation(pairwise: &[Vec<f64>]) -> Upit {
    let c = pairwise.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for p in permutations(c) {
        let total: f64 = p.iter().enumerate().map(|(k, &j)| pairwise[k][j]).sum();
        let score = total / c as f64;
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, p));
        }
    }
    let (score, perm) = best.expect("at least one permutation");
    Upit { loss: -score, perm }
}

/// Utterance-level permutation-invariant SI-SNR loss:
/// `−max_π (1/C) Σ_k si_snr(est_k, target_π(k))`.
pub fn upit_ss_loss(estimates: &[Tensor], targets: &[Tensor]) -> Result<Upit> {
    Ok(best_permutation(&pairwise_si_snr(estimates, targets)?))
}

/// Graph form of [`upit_ss_loss`]. The permutation is chosen on values, then
/// the loss is recorded for the chosen assignment only.
pub fn upit_graph(tape: &mut Tape, estimates: &[Var], targets: &[Tensor]) -> Result<(Var, Upit)> {
    let values: Vec<Tensor> = estimates.iter().map(|&v| tape.value(v).clone()).collect();
    let upit = upit_ss_loss(&values, targets)?;
    let mut total: Option<Var> = None;
    for (k, &j) in upit.perm.iter().enumerate() {
        let s = tape.si_snr(estimates[k], &targets[j])?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let loss = tape.scale(total.expect("non-empty"), -1.0 / estimates.len() as f64)?;
    Ok((loss, upit))
}

/// The weighted multi-task objective of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub l_se: f64,
    pub l_ss: f64,
    pub lambda_se: f64,
    pub l_total: f64,
}

pub fn total_loss(l_se: f64, l_ss: f64, lambda_se: f64) -> LossBundle {
    LossBundle {
        l_se,
        l_ss,
        lambda_se,
        l_total: lambda_se * l_se + l_ss,
    }
}
