//! Loss terms: recommendation cross-entropy, cross-layer InfoNCE contrast,
//! alignment and uniformity constraints over the two session channels, and
//! their weighted combination. All losses are built from tape primitives,
//! so gradients flow to every tensor input.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, TensorId};

/// Weights of the combined objective and the contrast temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    /// Alignment strength (gamma_1).
    pub align_weight: f64,
    /// Uniformity strength (gamma_2).
    pub uniform_weight: f64,
    /// Cross-layer contrast strength (lambda_1).
    pub contrast_weight: f64,
    /// Alignment-and-uniformity block strength (lambda_2).
    pub constraint_weight: f64,
    /// L2 regularization strength (lambda_3).
    pub l2_weight: f64,
    /// InfoNCE temperature (tau).
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            align_weight: 0.25,
            uniform_weight: 1.0,
            contrast_weight: 0.0005,
            constraint_weight: 1.0,
            l2_weight: 1e-5,
            temperature: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("align_weight", self.align_weight),
            ("uniform_weight", self.uniform_weight),
            ("contrast_weight", self.contrast_weight),
            ("constraint_weight", self.constraint_weight),
            ("l2_weight", self.l2_weight),
        ];
        for (name, v) in named {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Form of the next-item objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecLossKind {
    /// Binary cross-entropy over the whole probability vector.
    FullBinary,
    /// Negative log-likelihood of the target alone.
    TargetOnly,
}

/// Full binary cross-entropy of a probability row against a one-hot
/// target: `-sum_i y_i ln p_i + (1 - y_i) ln(1 - p_i)`, with probabilities
/// clamped to [1e-12, 1 - 1e-12] before the logs.
pub fn recommendation_loss(tape: &mut Tape, probs: TensorId, target: usize) -> Result<TensorId> {
    recommendation_loss_with(tape, probs, target, RecLossKind::FullBinary)
}

pub fn recommendation_loss_with(
    tape: &mut Tape,
    probs: TensorId,
    target: usize,
    kind: RecLossKind,
) -> Result<TensorId> {
    let (rows, num_items) = tape.dims(probs);
    if rows != 1 {
        return Err(Error::Shape(format!(
            "recommendation loss expects a probability row, got {rows} rows"
        )));
    }
    if target >= num_items {
        return Err(Error::Input(format!(
            "target item {target} outside catalog of {num_items}"
        )));
    }
    let mut onehot = vec![0.0; num_items];
    onehot[target] = 1.0;
    let p = tape.clamp(probs, 1e-12, 1.0 - 1e-12);
    let ln_p = tape.ln(p)?;
    let y = tape.constant(1, num_items, onehot.clone());
    let hit = tape.mul(y, ln_p)?;
    let summed = match kind {
        RecLossKind::TargetOnly => tape.sum_all(hit),
        RecLossKind::FullBinary => {
            let inverse: Vec<f64> = onehot.iter().map(|y| 1.0 - y).collect();
            let y_inv = tape.constant(1, num_items, inverse);
            let one_minus_p = tape.affine(p, -1.0, 1.0);
            let ln_miss = tape.ln(one_minus_p)?;
            let miss = tape.mul(y_inv, ln_miss)?;
            let total = tape.add(hit, miss)?;
            tape.sum_all(total)
        }
    };
    Ok(tape.affine(summed, -1.0, 0.0))
}

/// Negative selection for the cross-layer contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastNegatives {
    /// Every other row of the table serves as a negative.
    Full,
    /// Per anchor, this many distinct negatives drawn uniformly without
    /// replacement (excluding the anchor itself).
    Sampled(usize),
}

#[derive(Debug, Clone)]
pub struct ContrastConfig {
    pub temperature: f64,
    pub negatives: ContrastNegatives,
    /// Divide the summed anchor terms by the anchor count. Off by default;
    /// the loss is a sum over anchors.
    pub mean_reduction: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            negatives: ContrastNegatives::Full,
            mean_reduction: false,
        }
    }
}

/// InfoNCE between row-paired holistic and layer-0 representations: for
/// each anchor i, `-ln( e^{cos(h_i, z_i)/tau} / sum_j e^{cos(h_i, z_j)/tau} )`,
/// summed over anchors. Computed through a log-sum-exp, never a raw ratio.
pub fn cross_layer_contrast_loss(
    tape: &mut Tape,
    holistic: TensorId,
    layer0: TensorId,
    config: &ContrastConfig,
    rng: &mut Rng,
) -> Result<TensorId> {
    contrast_loss_inner(tape, holistic, layer0, None, config, rng)
}

/// InfoNCE with the anchor sum restricted to the given rows (the
/// batch-restricted mode); negatives still span the whole table.
pub fn cross_layer_contrast_loss_anchored(
    tape: &mut Tape,
    holistic: TensorId,
    layer0: TensorId,
    anchor_rows: &[usize],
    config: &ContrastConfig,
    rng: &mut Rng,
) -> Result<TensorId> {
    contrast_loss_inner(tape, holistic, layer0, Some(anchor_rows), config, rng)
}

fn contrast_loss_inner(
    tape: &mut Tape,
    holistic: TensorId,
    layer0: TensorId,
    anchor_rows: Option<&[usize]>,
    config: &ContrastConfig,
    rng: &mut Rng,
) -> Result<TensorId> {
    let (m, d) = tape.dims(holistic);
    let (mz, dz) = tape.dims(layer0);
    if (m, d) != (mz, dz) {
        return Err(Error::Shape(format!(
            "contrast tables disagree: {m}x{d} vs {mz}x{dz}"
        )));
    }
    if config.temperature <= 0.0 {
        return Err(Error::Config("contrast temperature must be positive".into()));
    }
    if let Some(rows) = anchor_rows {
        if rows.is_empty() {
            return Ok(tape.constant_scalar(0.0));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::Shape(format!(
                "anchor row {bad} outside table of {m} rows"
            )));
        }
    }
    let inv_tau = 1.0 / config.temperature;
    let h_full = tape.l2_normalize_rows(holistic)?;
    let z = tape.l2_normalize_rows(layer0)?;
    let (h, z_paired, anchors): (TensorId, TensorId, Vec<usize>) = match anchor_rows {
        Some(rows) => (
            tape.gather_rows(h_full, rows.to_vec())?,
            tape.gather_rows(z, rows.to_vec())?,
            rows.to_vec(),
        ),
        None => (h_full, z, (0..m).collect()),
    };
    let num_anchors = anchors.len();
    let pos = tape.rowwise_dot(h, z_paired)?;
    let pos_scaled = tape.scale(pos, inv_tau);

    let lse = match config.negatives {
        ContrastNegatives::Full => {
            let sims = tape.matmul_bt(h, z)?;
            let scaled = tape.scale(sims, inv_tau);
            tape.lse_rows(scaled)
        }
        ContrastNegatives::Sampled(count) => {
            if count > m.saturating_sub(1) {
                return Err(Error::Config(format!(
                    "cannot sample {count} negatives from {m} rows"
                )));
            }
            if count == 0 {
                tape.lse_rows(pos_scaled)
            } else {
                let mut anchor_rep = Vec::with_capacity(num_anchors * count);
                let mut neg_idx = Vec::with_capacity(num_anchors * count);
                for (local, &anchor) in anchors.iter().enumerate() {
                    // Draw from [0, m-1) and skip over the anchor row.
                    for pick in rng.sample_distinct(m - 1, count) {
                        let idx = if pick >= anchor { pick + 1 } else { pick };
                        anchor_rep.push(local);
                        neg_idx.push(idx);
                    }
                }
                let anchor_mat = tape.gather_rows(h, anchor_rep)?;
                let negatives = tape.gather_rows(z, neg_idx)?;
                let dots = tape.rowwise_dot(anchor_mat, negatives)?;
                let neg_mat = tape.reshape(dots, num_anchors, count)?;
                let neg_scaled = tape.scale(neg_mat, inv_tau);
                let all = tape.concat_cols(pos_scaled, neg_scaled)?;
                tape.lse_rows(all)
            }
        }
    };
    let per_anchor = tape.sub(lse, pos_scaled)?;
    let total = tape.sum_all(per_anchor);
    Ok(if config.mean_reduction {
        tape.affine(total, 1.0 / num_anchors as f64, 0.0)
    } else {
        total
    })
}

/// Mean squared distance between the L2-normalized channel representations
/// of the same session, over the batch.
pub fn alignment_loss(tape: &mut Tape, channel_a: TensorId, channel_b: TensorId) -> Result<TensorId> {
    let (b, d) = tape.dims(channel_a);
    let (b2, d2) = tape.dims(channel_b);
    if (b, d) != (b2, d2) {
        return Err(Error::Shape(format!(
            "alignment channels disagree: {b}x{d} vs {b2}x{d2}"
        )));
    }
    let a = tape.l2_normalize_rows(channel_a)?;
    let c = tape.l2_normalize_rows(channel_b)?;
    let diff = tape.sub(a, c)?;
    let sq = tape.mul(diff, diff)?;
    let sum = tape.sum_all(sq);
    Ok(tape.affine(sum, 1.0 / b as f64, 0.0))
}

/// Per-channel uniformity:
/// `log mean_{s != s'} e^{-2 || s~ - s~' ||^2} / 2`, summed over the two
/// channels. Rows are L2-normalized, so the exponent is `4 cos - 4` and
/// stays within [-8, 0]. Batches below two sessions contribute zero.
pub fn uniformity_loss(tape: &mut Tape, channel_a: TensorId, channel_b: TensorId) -> Result<TensorId> {
    let (b, _) = tape.dims(channel_a);
    let (b2, _) = tape.dims(channel_b);
    if b != b2 {
        return Err(Error::Shape(format!(
            "uniformity channels disagree: {b} vs {b2} rows"
        )));
    }
    if b < 2 {
        eprintln!("warning: uniformity needs at least two sessions, got {b}; term skipped");
        return Ok(tape.constant_scalar(0.0));
    }
    let term_a = channel_uniformity(tape, channel_a, b)?;
    let term_b = channel_uniformity(tape, channel_b, b)?;
    tape.add(term_a, term_b)
}

fn channel_uniformity(tape: &mut Tape, channel: TensorId, b: usize) -> Result<TensorId> {
    let normed = tape.l2_normalize_rows(channel)?;
    let gram = tape.matmul_bt(normed, normed)?;
    // ||x - y||^2 = 2 - 2 cos, so e^{-2 ||.||^2} = e^{4 cos - 4}.
    let exponent = tape.affine(gram, 4.0, -4.0);
    let kernel = tape.exp(exponent);
    let mut off_diag = vec![1.0; b * b];
    for i in 0..b {
        off_diag[i * b + i] = 0.0;
    }
    let mask = tape.constant(b, b, off_diag);
    let masked = tape.mul(kernel, mask)?;
    let sum = tape.sum_all(masked);
    let mean = tape.affine(sum, 1.0 / (b * (b - 1)) as f64, 0.0);
    let log_mean = tape.ln(mean)?;
    Ok(tape.scale(log_mean, 0.5))
}

/// Weighted alignment-and-uniformity block.
pub fn combined_constraint(
    tape: &mut Tape,
    align: TensorId,
    uniform: TensorId,
    align_weight: f64,
    uniform_weight: f64,
) -> Result<TensorId> {
    let a = tape.scale(align, align_weight);
    let u = tape.scale(uniform, uniform_weight);
    tape.add(a, u)
}

/// Total objective:
/// `rec + lambda_1 contrast + lambda_2 constraint + lambda_3 ||params||^2`.
pub fn total_loss(
    tape: &mut Tape,
    rec: TensorId,
    contrast: TensorId,
    constraint: TensorId,
    params: &[TensorId],
    contrast_weight: f64,
    constraint_weight: f64,
    l2_weight: f64,
) -> Result<TensorId> {
    let mut loss = rec;
    let ccr = tape.scale(contrast, contrast_weight);
    loss = tape.add(loss, ccr)?;
    let au = tape.scale(constraint, constraint_weight);
    loss = tape.add(loss, au)?;
    if l2_weight != 0.0 && !params.is_empty() {
        let mut l2: Option<TensorId> = None;
        for &p in params {
            let sq = tape.mul(p, p)?;
            let s = tape.sum_all(sq);
            l2 = Some(match l2 {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
        let scaled = tape.scale(l2.expect("params nonempty"), l2_weight);
        loss = tape.add(loss, scaled)?;
    }
    Ok(loss)
}
