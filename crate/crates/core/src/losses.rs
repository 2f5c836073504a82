//! The four training loss terms and their weighted combination: central
//! moment discrepancy over the invariant representations, soft orthogonality
//! between subspaces, decoder reconstruction error, and binary cross-entropy,
//! all built on the tape so the whole objective is differentiable.

use crate::model::SubspaceReps;
use crate::tape::{Tape, TapeError, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("cmd needs at least 2 samples per side, got {rows}")]
    BatchTooSmall { rows: usize },
    #[error("cmd inputs must share their feature dim: {lhs} vs {rhs}")]
    DimMismatch { lhs: usize, rhs: usize },
    #[error("label {0} is not binary")]
    BadLabel(f64),
    #[error("labels ({labels}) and predictions ({preds}) disagree in length")]
    LabelCount { labels: usize, preds: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Loss-term weights and the CMD moment order.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub cmd_order: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.7,
            beta: 1.0,
            gamma: 0.7,
            cmd_order: 5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(format!(
                "loss weights must be nonnegative: alpha={} beta={} gamma={}",
                self.alpha, self.beta, self.gamma
            ));
        }
        if self.cmd_order < 1 {
            return Err("cmd_order must be at least 1".into());
        }
        Ok(())
    }

    /// Weighted sum in the same association order the tape uses, so the
    /// breakdown identity holds exactly.
    pub fn combine(&self, inv: f64, orth: f64, sim: f64, cls: f64) -> f64 {
        ((self.alpha * inv + self.beta * orth) + self.gamma * sim) + cls
    }
}

/// Scalar values of the loss terms for one step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub l_inv: f64,
    pub l_orth: f64,
    pub l_sim: f64,
    pub l_cls: f64,
    pub l_total: f64,
}

/// Central moment discrepancy of order `k_order` between two sample sets
/// `[B x d]` and `[B' x d]`.
///
/// Coordinates are rescaled by the joint per-coordinate range (clamped to at
/// least 1e-3), which realizes the range normalization: the mean-difference
/// norm is divided by |b-a| and each order-k central-moment difference by
/// |b-a|^k. The range estimate is itself differentiable through the min/max.
pub fn cmd(tape: &mut Tape, x: Var, y: Var, k_order: usize) -> Result<Var, LossError> {
    let (bx, dx) = (tape.shape(x)[0], tape.shape(x)[1]);
    let (by, dy) = (tape.shape(y)[0], tape.shape(y)[1]);
    if bx < 2 {
        return Err(LossError::BatchTooSmall { rows: bx });
    }
    if by < 2 {
        return Err(LossError::BatchTooSmall { rows: by });
    }
    if dx != dy {
        return Err(LossError::DimMismatch { lhs: dx, rhs: dy });
    }
    let joint = tape.concat(0, &[x, y])?;
    let mn = tape.column_min(joint)?;
    let mx = tape.column_max(joint)?;
    let range = tape.sub(mx, mn)?;
    let range = tape.max_const(range, 1e-3);
    let neg_mn = tape.scale(mn, -1.0);
    let rescale = |tape: &mut Tape, m: Var| -> Result<Var, TapeError> {
        let shifted = tape.add_row(m, neg_mn)?;
        tape.div_row(shifted, range)
    };
    let xs = rescale(tape, x)?;
    let ys = rescale(tape, y)?;

    let mean_x = tape.column_mean(xs)?;
    let mean_y = tape.column_mean(ys)?;
    let dmean = tape.sub(mean_x, mean_y)?;
    let dmean_sq = tape.sum_squares(dmean);
    let mut total = tape.sqrt(dmean_sq);

    let neg_mean_x = tape.scale(mean_x, -1.0);
    let neg_mean_y = tape.scale(mean_y, -1.0);
    let xc = tape.add_row(xs, neg_mean_x)?;
    let yc = tape.add_row(ys, neg_mean_y)?;
    for k in 2..=k_order {
        let xk = tape.pow_i(xc, k as u32);
        let yk = tape.pow_i(yc, k as u32);
        let cx = tape.column_mean(xk)?;
        let cy = tape.column_mean(yk)?;
        let diff = tape.sub(cx, cy)?;
        let sq = tape.sum_squares(diff);
        let norm = tape.sqrt(sq);
        total = tape.add(total, norm)?;
    }
    Ok(total)
}

/// Center the rows over the batch (skipped for a single row, which would
/// zero everything) and scale each row to unit L2 norm; zero rows stay zero
/// through the guarded division.
fn normalize_rows(tape: &mut Tape, m: Var) -> Result<Var, TapeError> {
    let rows = tape.shape(m)[0];
    let centered = if rows > 1 {
        let mean = tape.column_mean(m)?;
        let neg = tape.scale(mean, -1.0);
        tape.add_row(m, neg)?
    } else {
        m
    };
    let sq = tape.mul(centered, centered)?;
    let sums = tape.row_sum(sq)?;
    let sums = tape.max_const(sums, 1e-24);
    let norms = tape.sqrt(sums);
    tape.div_col(centered, norms)
}

/// Soft orthogonality: the squared Frobenius norms of the specific-invariant
/// products per modality plus both orderings of the cross-specific product,
/// on batch-centered, row-normalized representation matrices. Terms whose
/// matrices do not exist (ablated subspaces) simply drop out.
pub fn orthogonality_loss(
    tape: &mut Tape,
    h_a: Option<Var>,
    h_v: Option<Var>,
    g_a: Option<Var>,
    g_v: Option<Var>,
) -> Result<Var, LossError> {
    let hs_a = h_a.map(|v| normalize_rows(tape, v)).transpose()?;
    let hs_v = h_v.map(|v| normalize_rows(tape, v)).transpose()?;
    let hi_a = g_a.map(|v| normalize_rows(tape, v)).transpose()?;
    let hi_v = g_v.map(|v| normalize_rows(tape, v)).transpose()?;

    let mut pairs: Vec<(Var, Var)> = Vec::new();
    if let (Some(s), Some(i)) = (hs_a, hi_a) {
        pairs.push((s, i));
    }
    if let (Some(s), Some(i)) = (hs_v, hi_v) {
        pairs.push((s, i));
    }
    // Cross-specific constraints, both orderings as written.
    if let (Some(sa), Some(sv)) = (hs_a, hs_v) {
        pairs.push((sa, sv));
        pairs.push((sv, sa));
    }
    let mut total: Option<Var> = None;
    for (a, b) in pairs {
        let bt = tape.transpose(b)?;
        let prod = tape.matmul(a, bt)?;
        let term = tape.sum_squares(prod);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant_from(vec![1], vec![0.0])))
}

/// Mean squared reconstruction error against the projected sequence vectors,
/// normalized by the feature dim and averaged over both modalities.
pub fn reconstruction_loss(
    tape: &mut Tape,
    u_a: Var,
    recon_a: Var,
    u_v: Var,
    recon_v: Var,
) -> Result<Var, LossError> {
    let d = tape.shape(u_a)[1];
    let term = |tape: &mut Tape, u: Var, r: Var| -> Result<Var, TapeError> {
        let diff = tape.sub(u, r)?;
        let sq = tape.mul(diff, diff)?;
        let per_sample = tape.row_sum(sq)?;
        Ok(tape.mean_all(per_sample))
    };
    let ta = term(tape, u_a, recon_a)?;
    let tv = term(tape, u_v, recon_v)?;
    let sum = tape.add(ta, tv)?;
    Ok(tape.scale(sum, 0.5 / d as f64))
}

/// Mean binary cross-entropy with predictions clamped to
/// `[1e-7, 1 - 1e-7]`. Labels must be exactly 0 or 1.
pub fn classification_loss(
    tape: &mut Tape,
    y_hat: Var,
    labels: &[f64],
) -> Result<Var, LossError> {
    let b = tape.shape(y_hat)[0];
    if labels.len() != b {
        return Err(LossError::LabelCount {
            labels: labels.len(),
            preds: b,
        });
    }
    for &l in labels {
        if l != 0.0 && l != 1.0 {
            return Err(LossError::BadLabel(l));
        }
    }
    let y = tape.constant_from(vec![b, 1], labels.to_vec());
    let one_minus_y =
        tape.constant_from(vec![b, 1], labels.iter().map(|&l| 1.0 - l).collect());
    let p = tape.clamp(y_hat, 1e-7, 1.0 - 1e-7);
    let ln_p = tape.ln(p);
    let neg_p = tape.scale(p, -1.0);
    let one_minus_p = tape.add_const(neg_p, 1.0);
    let ln_q = tape.ln(one_minus_p);
    let pos = tape.mul(y, ln_p)?;
    let neg = tape.mul(one_minus_y, ln_q)?;
    let s = tape.add(pos, neg)?;
    let m = tape.mean_all(s);
    Ok(tape.scale(m, -1.0))
}

/// The full training objective. Terms whose weight is zero (or whose
/// subspaces are ablated away) are skipped entirely and reported as 0, so
/// `alpha = beta = gamma = 0` leaves exactly the classification loss.
pub fn combined_loss(
    tape: &mut Tape,
    reps: &SubspaceReps,
    y_hat: Var,
    labels: &[f64],
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown), LossError> {
    let l_inv = if weights.alpha > 0.0 {
        match (reps.g_a, reps.g_v) {
            (Some(ga), Some(gv)) => Some(cmd(tape, ga, gv, weights.cmd_order)?),
            _ => None,
        }
    } else {
        None
    };
    let l_orth = if weights.beta > 0.0 && (reps.h_a.is_some() || reps.g_a.is_some()) {
        let term = orthogonality_loss(tape, reps.h_a, reps.h_v, reps.g_a, reps.g_v)?;
        Some(term)
    } else {
        None
    };
    let l_sim = if weights.gamma > 0.0 {
        Some(reconstruction_loss(
            tape,
            reps.u_a,
            reps.recon_a,
            reps.u_v,
            reps.recon_v,
        )?)
    } else {
        None
    };
    let l_cls = classification_loss(tape, y_hat, labels)?;

    let mut total: Option<Var> = None;
    let mut check = 0.0f64;
    for (weight, term) in [
        (weights.alpha, l_inv),
        (weights.beta, l_orth),
        (weights.gamma, l_sim),
    ] {
        if let Some(t) = term {
            let scaled = tape.scale(t, weight);
            check += weight * tape.scalar_value(t);
            total = Some(match total {
                Some(acc) => tape.add(acc, scaled)?,
                None => scaled,
            });
        }
    }
    let total = match total {
        Some(acc) => tape.add(acc, l_cls)?,
        None => l_cls,
    };
    check += tape.scalar_value(l_cls);
    let breakdown = LossBreakdown {
        l_inv: l_inv.map_or(0.0, |v| tape.scalar_value(v)),
        l_orth: l_orth.map_or(0.0, |v| tape.scalar_value(v)),
        l_sim: l_sim.map_or(0.0, |v| tape.scalar_value(v)),
        l_cls: tape.scalar_value(l_cls),
        l_total: tape.scalar_value(total),
    };
    debug_assert!(
        (breakdown.l_total - check).abs() <= 1e-12,
        "loss breakdown identity violated: {} vs {check}",
        breakdown.l_total
    );
    Ok((total, breakdown))
}
