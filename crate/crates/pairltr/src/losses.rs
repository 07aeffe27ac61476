//! Pairwise and pointwise training losses with bias-correction weights.
//!
//! All pairwise variants share the logistic base loss on score differences;
//! they differ only in the per-pair weight, which is treated as a constant
//! (stop-gradient) when differentiating. Losses are sums over pairs or items;
//! callers normalize if they need means.

use crate::bias::BiasParams;
use crate::em::{h_ij, m_ij};
use crate::error::{Error, Result};
use crate::mlp::sigmoid;

/// Numerically stable logistic pair loss ln(1 + exp(-(s_i - s_j))) with its
/// gradients on both scores.
pub fn pairwise_base_loss(score_i: f64, score_j: f64) -> (f64, f64, f64) {
    let d = score_i - score_j;
    let loss = if d > 0.0 {
        (-d).exp().ln_1p()
    } else {
        -d + d.exp().ln_1p()
    };
    let g = -sigmoid(-d);
    (loss, g, -g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLossVariant {
    /// Uncorrected pairwise loss over label-ordered pairs.
    Naive,
    /// Inverse-propensity weights from the examination model only.
    IpwPairwise,
    /// Trust-bias posterior weights on top of the propensity correction.
    BayesIpw,
    /// Bayes weights scaled by the rank-swap NDCG delta.
    Opt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointLossVariant {
    NaiveMse,
    NaiveCe,
    /// Positives reweighted by inverse examination propensity.
    Ipw,
}

/// One displayed list with model outputs; slot k sits at position k+1.
#[derive(Debug, Clone)]
pub struct SessionView<'a> {
    pub scores: &'a [f64],
    pub labels: &'a [f64],
    /// Ranker beta head per slot, used by the Bayes corrections.
    pub betas: &'a [f64],
    /// Measure the rank-swap delta on the logged presentation order instead
    /// of the current model ranking.
    pub logged_delta: bool,
}

impl<'a> SessionView<'a> {
    pub fn new(scores: &'a [f64], labels: &'a [f64], betas: &'a [f64]) -> Self {
        SessionView {
            scores,
            labels,
            betas,
            logged_delta: false,
        }
    }
}

impl SessionView<'_> {
    fn check(&self) -> Result<()> {
        let n = self.scores.len();
        if self.labels.len() != n || self.betas.len() != n {
            return Err(Error::DimMismatch {
                expected: n,
                got: self.labels.len().min(self.betas.len()),
            });
        }
        Ok(())
    }
}

/// Rank of every slot under the model scores: stable descending sort, ties
/// broken toward the lower slot index. Ranks are 1-based.
pub fn ranks_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0; scores.len()];
    for (rank0, &slot) in order.iter().enumerate() {
        ranks[slot] = rank0 + 1;
    }
    ranks
}

fn discount(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((1.0 + rank as f64).log2())
    } else {
        0.0
    }
}

/// |DCG@k difference| from swapping slots i and j in the current model
/// ranking, with linear label gains, normalized by the ideal DCG@k of the
/// labels. Zero when both slots rank below the cutoff or the ideal is zero.
pub fn delta_ndcg(scores: &[f64], labels: &[f64], i: usize, j: usize, k: usize) -> f64 {
    delta_ndcg_at_ranks(&ranks_by_score(scores), labels, i, j, k)
}

/// Same swap delta measured on the logged presentation order (slot k shown
/// at rank k+1).
pub fn delta_ndcg_logged(labels: &[f64], i: usize, j: usize, k: usize) -> f64 {
    let ranks: Vec<usize> = (1..=labels.len()).collect();
    delta_ndcg_at_ranks(&ranks, labels, i, j, k)
}

fn delta_ndcg_at_ranks(ranks: &[usize], labels: &[f64], i: usize, j: usize, k: usize) -> f64 {
    let mut ideal: Vec<f64> = labels.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let ideal_dcg: f64 = ideal
        .iter()
        .enumerate()
        .map(|(r0, &g)| g * discount(r0 + 1, k))
        .sum();
    if ideal_dcg <= 0.0 {
        return 0.0;
    }
    let dd = (discount(ranks[i], k) - discount(ranks[j], k)).abs();
    (labels[i] - labels[j]).abs() * dd / ideal_dcg
}

/// PBM-only examination posterior for a zero lower label: the trust-bias
/// correction with a perfect click signal (eps_plus = 1, eps_minus = 0).
fn h_pbm(theta_j_minus: f64, gamma: f64, beta_i: f64) -> f64 {
    h_ij(1.0, theta_j_minus, 1.0, 0.0, gamma, beta_i)
}

/// Correction weight for one label-ordered pair. `gamma` is the model's
/// preference probability for the pair; everything here is a constant with
/// respect to the scores.
#[allow(clippy::too_many_arguments)]
pub fn pair_weight(
    variant: PairLossVariant,
    params: &BiasParams,
    pos_i: usize,
    pos_j: usize,
    lower_zero: bool,
    gamma: f64,
    beta_i: f64,
    delta_z: f64,
) -> f64 {
    let theta_i = params.theta_at(pos_i);
    let theta_j = params.theta_at(pos_j);
    let ipw = 1.0 / (theta_i * theta_j);
    match variant {
        PairLossVariant::Naive => 1.0,
        PairLossVariant::IpwPairwise => {
            if lower_zero {
                ipw * h_pbm(params.theta_minus_at(pos_j), gamma, beta_i)
            } else {
                ipw
            }
        }
        PairLossVariant::BayesIpw | PairLossVariant::Opt => {
            let ep = params.eps_plus_at(pos_i, pos_j);
            let em = params.eps_minus_at(pos_i, pos_j);
            let mut w = ipw * m_ij(ep, em, gamma);
            if lower_zero {
                w *= h_ij(theta_i, params.theta_minus_at(pos_j), ep, em, gamma, beta_i);
            }
            if variant == PairLossVariant::Opt {
                w *= delta_z;
            }
            w
        }
    }
}

/// Weighted pairwise loss over all label-ordered pairs of one session.
/// Returns the loss and per-slot score gradients.
pub fn pairwise_session_loss(
    variant: PairLossVariant,
    view: &SessionView,
    params: &BiasParams,
    cutoff: usize,
) -> Result<(f64, Vec<f64>)> {
    let delta = |scores: &[f64], labels: &[f64], i: usize, j: usize| {
        if view.logged_delta {
            delta_ndcg_logged(labels, i, j, cutoff)
        } else {
            delta_ndcg(scores, labels, i, j, cutoff)
        }
    };
    pairwise_session_loss_impl(variant, view, params, &delta)
}

/// The rank-sensitive loss with a caller-supplied swap delta; the standard
/// entry point uses [`delta_ndcg`].
pub fn opt_session_loss_with_delta(
    view: &SessionView,
    params: &BiasParams,
    delta: &dyn Fn(usize, usize) -> f64,
) -> Result<(f64, Vec<f64>)> {
    pairwise_session_loss_impl(PairLossVariant::Opt, view, params, &|_, _, i, j| delta(i, j))
}

type SwapDelta<'a> = &'a dyn Fn(&[f64], &[f64], usize, usize) -> f64;

fn pairwise_session_loss_impl(
    variant: PairLossVariant,
    view: &SessionView,
    params: &BiasParams,
    delta: SwapDelta,
) -> Result<(f64, Vec<f64>)> {
    view.check()?;
    let n = view.scores.len();
    if params.n_positions() < n {
        return Err(Error::DimMismatch {
            expected: n,
            got: params.n_positions(),
        });
    }
    let mut loss = 0.0;
    let mut grads = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            if i == j || view.labels[i] <= view.labels[j] {
                continue;
            }
            let gamma = sigmoid(view.scores[i] - view.scores[j]);
            let delta_z = if variant == PairLossVariant::Opt {
                delta(view.scores, view.labels, i, j)
            } else {
                0.0
            };
            let w = pair_weight(
                variant,
                params,
                i + 1,
                j + 1,
                view.labels[j] <= 0.0,
                gamma,
                view.betas[i],
                delta_z,
            );
            let (l, gi, gj) = pairwise_base_loss(view.scores[i], view.scores[j]);
            loss += w * l;
            grads[i] += w * gi;
            grads[j] += w * gj;
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("pairwise loss"));
    }
    Ok((loss, grads))
}

/// Pointwise losses over the displayed slots of one session. The IPW and
/// cross-entropy variants require binary labels.
pub fn pointwise_session_loss(
    variant: PointLossVariant,
    scores: &[f64],
    labels: &[f64],
    params: &BiasParams,
) -> Result<(f64, Vec<f64>)> {
    let n = scores.len();
    if labels.len() != n {
        return Err(Error::DimMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    if variant != PointLossVariant::NaiveMse && labels.iter().any(|&c| c != 0.0 && c != 1.0) {
        return Err(Error::config(
            "cross-entropy and IPW pointwise losses need binary labels; \
             use a categorical label combine",
        ));
    }
    let mut loss = 0.0;
    let mut grads = vec![0.0; n];
    for slot in 0..n {
        let (s, c) = (scores[slot], labels[slot]);
        match variant {
            PointLossVariant::NaiveMse => {
                loss += (s - c).powi(2);
                grads[slot] = 2.0 * (s - c);
            }
            PointLossVariant::NaiveCe => {
                let (l, g) = binary_ce(s, c);
                loss += l;
                grads[slot] = g;
            }
            PointLossVariant::Ipw => {
                if c > 0.0 {
                    let w = 1.0 / params.theta_at(slot + 1);
                    let (l, g) = binary_ce(s, 1.0);
                    loss += w * l;
                    grads[slot] = w * g;
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("pointwise loss"));
    }
    Ok((loss, grads))
}

/// Stable sigmoid cross-entropy on a logit with its gradient.
fn binary_ce(logit: f64, target: f64) -> (f64, f64) {
    // ln(1 + exp(logit)) - target * logit, stable on both tails
    let softplus = if logit > 0.0 {
        logit + (-logit).exp().ln_1p()
    } else {
        logit.exp().ln_1p()
    };
    (softplus - target * logit, sigmoid(logit) - target)
}
