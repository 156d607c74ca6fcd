use super::{NnError, NnResult, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalLossConfig {
    /// Class-balance weight in `(0, 1]`.
    pub alpha: f64,
    /// Focusing exponent, `>= 0`.
    pub gamma: f64,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 2.0,
        }
    }
}

impl FocalLossConfig {
    pub fn validate(&self) -> NnResult<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) || !(self.gamma >= 0.0) {
            return Err(NnError::InvalidConfig(format!(
                "focal loss needs alpha in (0, 1] and gamma >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Loss and logit gradient for one row, from the log-probability of every
/// class. Returns `(loss, dloss/dlogits)` for the unnormalized row.
fn focal_row(log_probs: &[f64], label: usize, cfg: &FocalLossConfig) -> (f64, Vec<f64>) {
    let log_pt = log_probs[label];
    let pt = log_pt.exp();
    let q = (1.0 - pt).max(0.0);
    let (a, g) = (cfg.alpha, cfg.gamma);
    let loss = -a * q.powf(g) * log_pt;
    // p_t · dL/dp_t, which multiplies (δ_tj − p_j) in the logit gradient
    let focus_term = if g == 0.0 || q == 0.0 {
        0.0
    } else {
        g * q.powf(g - 1.0) * pt * log_pt
    };
    let pt_dl_dpt = a * (focus_term - q.powf(g));
    let grad = log_probs
        .iter()
        .enumerate()
        .map(|(j, &lp)| {
            let delta = if j == label { 1.0 } else { 0.0 };
            pt_dl_dpt * (delta - lp.exp())
        })
        .collect();
    (loss, grad)
}

fn check_labels(labels: &[usize], rows: usize, width: usize) -> NnResult<()> {
    if labels.len() != rows {
        return Err(NnError::ShapeMismatch(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= width) {
        return Err(NnError::ShapeMismatch(format!("label {bad} out of range for {width} classes")));
    }
    Ok(())
}

fn reduce<T: Scalar>(
    rows: Vec<Vec<f64>>,
    labels: &[usize],
    cfg: &FocalLossConfig,
    shape: &[usize],
) -> NnResult<(f64, Tensor<T>)> {
    let n = rows.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::new();
    for (lp, &label) in rows.iter().zip(labels) {
        let (l, g) = focal_row(lp, label, cfg);
        total += l;
        grad.extend(g.into_iter().map(|v| T::lit(v / n)));
    }
    Ok((total / n, Tensor::from_vec(shape, grad)?))
}

/// Batch-mean focal loss `−α(1−p_t)^γ·log(p_t)` on softmax probabilities.
/// The returned gradient is with respect to the logits that produced them.
pub fn focal_loss<T: Scalar>(
    probabilities: &Tensor<T>,
    labels: &[usize],
    cfg: &FocalLossConfig,
) -> NnResult<(f64, Tensor<T>)> {
    cfg.validate()?;
    probabilities.expect_rank(2, "focal loss input")?;
    let (rows, width) = (probabilities.shape()[0], probabilities.shape()[1]);
    check_labels(labels, rows, width)?;
    let mut log_rows = Vec::with_capacity(rows);
    for (r, row) in probabilities.data.chunks(width).enumerate() {
        let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        let sum: f64 = row.iter().sum();
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(NnError::InvalidProbability(format!("row {r}: {row:?}")));
        }
        log_rows.push(row.iter().map(|p| p.ln()).collect());
    }
    reduce(log_rows, labels, cfg, probabilities.shape())
}

/// Same loss computed from raw logits through a log-sum-exp, which stays
/// finite for saturated predictions.
pub fn focal_loss_from_logits<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    cfg: &FocalLossConfig,
) -> NnResult<(f64, Tensor<T>)> {
    cfg.validate()?;
    logits.expect_rank(2, "focal loss input")?;
    let (rows, width) = (logits.shape()[0], logits.shape()[1]);
    check_labels(labels, rows, width)?;
    let log_rows = logits
        .data
        .chunks(width)
        .map(|row| {
            let z: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            z.iter().map(|v| v - lse).collect()
        })
        .collect();
    reduce(log_rows, labels, cfg, logits.shape())
}
