//! Detection metrics. OOD is the positive class throughout.

use crate::error::{Error, Result};

pub use crate::trainer::accuracy;

fn check(id: &[f64], ood: &[f64]) -> Result<()> {
    if id.is_empty() || ood.is_empty() {
        return Err(Error::invalid("metric needs nonempty ID and OOD score lists"));
    }
    if id.iter().chain(ood).any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    Ok(())
}

/// Midranks (1-based) of `values`; tied values share the mean of their ranks.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j share their mean.
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// P(s_ood > s_id) + P(s_ood = s_id) / 2 via the Mann-Whitney statistic.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check(id_scores, ood_scores)?;
    let all: Vec<f64> = ood_scores.iter().chain(id_scores).copied().collect();
    let ranks = midranks(&all);
    let m = ood_scores.len() as f64;
    let n = id_scores.len() as f64;
    let rank_sum: f64 = ranks[..ood_scores.len()].iter().sum();
    let u = rank_sum - m * (m + 1.0) / 2.0;
    Ok(u / (m * n))
}

/// Smallest ID false-positive rate over thresholds whose OOD detection rate
/// (score >= threshold) reaches `tpr_target`.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr_target: f64) -> Result<f64> {
    check(id_scores, ood_scores)?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::invalid(format!("TPR target {tpr_target} outside (0, 1]")));
    }
    let mut ood = ood_scores.to_vec();
    ood.sort_by(|a, b| b.total_cmp(a));
    let m = ood.len();
    let needed = ((tpr_target * m as f64 - 1e-9).ceil() as usize).clamp(1, m);
    let threshold = ood[needed - 1];
    let flagged = id_scores.iter().filter(|&&s| s >= threshold).count();
    Ok(flagged as f64 / id_scores.len() as f64)
}
