//! Pairwise regression-based EM for the bias parameters.
//!
//! The E-step evaluates closed-form posteriors per observed pair; the
//! acceptance suite checks them against the enumeration oracle. The M-step
//! averages posterior examination per position, re-estimates the trust
//! matrices from posterior ratios, and trains the gamma/beta regression heads
//! on Bernoulli-sampled targets. Updates blend incrementally per mini-batch.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bias::{BiasParams, DEFAULT_FLOOR};
use crate::error::{Error, Result};
use crate::letor::Dataset;
use crate::mlp::{sigmoid, ForwardRecord, Ranker};
use crate::oracle::PairBucket;
use crate::par::{accumulate_chunks, map_slice, ExecMode};
use crate::simulate::Session;

/// Parameter movement below this across a full epoch terminates EM early.
pub const PARAM_TOL: f64 = 1e-5;

// ---------------------------------------------------------------------------
// closed forms
// ---------------------------------------------------------------------------

/// Probability of observing a positive synthesized label pair: the sum of the
/// both-examined trust-bias branch and the lower-unexamined branch.
pub fn marginal_positive_pair(
    theta_i: f64,
    theta_j: f64,
    eps_plus: f64,
    eps_minus: f64,
    gamma: f64,
    beta_i: f64,
) -> f64 {
    let eps_bar = eps_plus * gamma + eps_minus * (1.0 - gamma);
    theta_i * theta_j * eps_bar + theta_i * (1.0 - theta_j) * beta_i
}

/// Posterior probability of a true positive preference given a positive label
/// pair and examination of both items.
pub fn m_ij(eps_plus: f64, eps_minus: f64, gamma: f64) -> f64 {
    let num = eps_plus * gamma;
    num / (num + eps_minus * (1.0 - gamma))
}

/// Posterior examination probability of the lower item given a positive pair
/// whose lower label is zero.
pub fn h_ij(
    theta_i: f64,
    theta_j_minus: f64,
    eps_plus: f64,
    eps_minus: f64,
    gamma: f64,
    beta_i: f64,
) -> f64 {
    let eps_bar = eps_plus * gamma + eps_minus * (1.0 - gamma);
    let num = theta_i * theta_j_minus * eps_bar;
    num / (num + theta_i * (1.0 - theta_j_minus) * beta_i)
}

/// P(e_i=1, e_j=1, r_i>r_j | positive label pair).
pub fn posterior_ee_rpos(
    theta_i: f64,
    theta_j: f64,
    eps_plus: f64,
    eps_minus: f64,
    gamma: f64,
    beta_i: f64,
) -> f64 {
    theta_i * theta_j * eps_plus * gamma
        / marginal_positive_pair(theta_i, theta_j, eps_plus, eps_minus, gamma, beta_i)
}

/// P(e=1 | label indicator) for a single displayed item under pointwise PBM.
pub fn item_exam_posterior(label_positive: bool, theta: f64, beta: f64) -> f64 {
    if label_positive {
        1.0
    } else {
        theta * (1.0 - beta) / (1.0 - theta * beta)
    }
}

/// P(r>0 | label indicator) for a single displayed item.
pub fn item_rel_posterior(label_positive: bool, theta: f64, beta: f64) -> f64 {
    if label_positive {
        1.0
    } else {
        beta * (1.0 - theta) / (1.0 - theta * beta)
    }
}

// ---------------------------------------------------------------------------
// data model
// ---------------------------------------------------------------------------

/// One ordered position pair from one session.
#[derive(Debug, Clone, PartialEq)]
pub struct PairObservation {
    /// 1-based displayed positions.
    pub pos_i: usize,
    pub pos_j: usize,
    /// doc_index within the owning query.
    pub doc_i: usize,
    pub doc_j: usize,
    pub c_i: f64,
    pub c_j: f64,
    pub bucket: PairBucket,
}

/// One displayed item occurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemObservation {
    pub position: usize,
    pub doc: usize,
    pub label: f64,
}

/// All ordered position pairs of a session, tagged with their observation
/// bucket. Training losses later consume only positive-pair buckets; the
/// M-step denominators need all of them.
pub fn extract_pairs(session: &Session) -> Vec<PairObservation> {
    let n = session.len();
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (c_i, c_j) = (session.synth[i], session.synth[j]);
            let bucket = if c_i > c_j {
                if c_j > 0.0 {
                    PairBucket::BothPositive
                } else {
                    PairBucket::LowerZero
                }
            } else {
                PairBucket::NonPositive
            };
            pairs.push(PairObservation {
                pos_i: i + 1,
                pos_j: j + 1,
                doc_i: session.ranked_docs[i],
                doc_j: session.ranked_docs[j],
                c_i,
                c_j,
                bucket,
            });
        }
    }
    pairs
}

/// Observations from one session, resolved to doc indices of its query.
#[derive(Debug, Clone)]
pub struct EmSession {
    pub query_idx: usize,
    pub items: Vec<ItemObservation>,
    pub pairs: Vec<PairObservation>,
}

#[derive(Debug, Clone)]
pub struct EmData {
    pub sessions: Vec<EmSession>,
    pub n_positions: usize,
}

impl EmData {
    pub fn from_sessions(sessions: &[Session], dataset: &Dataset) -> Result<EmData> {
        let qindex: HashMap<&str, usize> = dataset
            .queries
            .iter()
            .enumerate()
            .map(|(i, q)| (q.qid.as_str(), i))
            .collect();
        let mut out = Vec::with_capacity(sessions.len());
        let mut n_positions = 0;
        for s in sessions {
            let &query_idx = qindex
                .get(s.qid.as_str())
                .ok_or_else(|| Error::validation(format!("session qid {} not in dataset", s.qid)))?;
            n_positions = n_positions.max(s.len());
            let items = (0..s.len())
                .map(|slot| ItemObservation {
                    position: slot + 1,
                    doc: s.ranked_docs[slot],
                    label: s.synth[slot],
                })
                .collect();
            out.push(EmSession {
                query_idx,
                items,
                pairs: extract_pairs(s),
            });
        }
        if n_positions < 2 {
            return Err(Error::validation(
                "sessions must display at least 2 positions",
            ));
        }
        Ok(EmData {
            sessions: out,
            n_positions,
        })
    }
}

// ---------------------------------------------------------------------------
// E-step
// ---------------------------------------------------------------------------

/// Posterior over the hidden pair state for one observation. The four pair
/// masses sum to 1; the remaining fields are marginals of the same posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairPosterior {
    pub p_ee_rpos: f64,
    pub p_ee_rneg: f64,
    pub p_e_only: f64,
    pub p_rest: f64,
    pub p_exam_i: f64,
    pub p_exam_j: f64,
    pub p_rel_pair: f64,
    pub p_rel_i: f64,
}

/// Closed-form E-step for one pair. `gamma` and `beta_i` come from the
/// ranker heads.
#[allow(clippy::too_many_arguments)]
pub fn pair_posterior(
    bucket: PairBucket,
    theta_i: f64,
    theta_j: f64,
    theta_j_minus: f64,
    eps_plus: f64,
    eps_minus: f64,
    gamma: f64,
    beta_i: f64,
) -> Result<PairPosterior> {
    let eps_bar = eps_plus * gamma + eps_minus * (1.0 - gamma);
    // Couple the relevance relation with upper-item positivity; when the
    // heads disagree (gamma > beta) the conditional clamps at zero and the
    // effective positivity rate is gamma itself.
    let q = if gamma < 1.0 {
        ((beta_i - gamma) / (1.0 - gamma)).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let beta_eff = gamma + (1.0 - gamma) * q;

    let zero = Error::ZeroProbability { i: 0, j: 0 };
    match bucket {
        PairBucket::BothPositive => {
            if eps_bar <= 0.0 {
                return Err(zero);
            }
            let m = eps_plus * gamma / eps_bar;
            Ok(PairPosterior {
                p_ee_rpos: m,
                p_ee_rneg: 1.0 - m,
                p_e_only: 0.0,
                p_rest: 0.0,
                p_exam_i: 1.0,
                p_exam_j: 1.0,
                p_rel_pair: m,
                p_rel_i: m + (1.0 - m) * q,
            })
        }
        PairBucket::LowerZero => {
            let denom = theta_j_minus * eps_bar + (1.0 - theta_j_minus) * beta_eff;
            if denom <= 0.0 {
                return Err(zero);
            }
            Ok(PairPosterior {
                p_ee_rpos: theta_j_minus * eps_plus * gamma / denom,
                p_ee_rneg: theta_j_minus * eps_minus * (1.0 - gamma) / denom,
                p_e_only: (1.0 - theta_j_minus) * beta_eff / denom,
                p_rest: 0.0,
                p_exam_i: 1.0,
                p_exam_j: theta_j_minus * eps_bar / denom,
                p_rel_pair: (theta_j_minus * eps_plus * gamma + (1.0 - theta_j_minus) * gamma)
                    / denom,
                p_rel_i: (theta_j_minus * (eps_plus * gamma + eps_minus * (1.0 - gamma) * q)
                    + (1.0 - theta_j_minus) * beta_eff)
                    / denom,
            })
        }
        PairBucket::NonPositive => {
            let marginal = theta_i * theta_j * eps_bar + theta_i * (1.0 - theta_j) * beta_eff;
            let denom = 1.0 - marginal;
            if denom <= 0.0 {
                return Err(zero);
            }
            let tt = theta_i * theta_j;
            Ok(PairPosterior {
                p_ee_rpos: tt * gamma * (1.0 - eps_plus) / denom,
                p_ee_rneg: tt * (1.0 - gamma) * (1.0 - eps_minus) / denom,
                p_e_only: theta_i * (1.0 - theta_j) * (1.0 - beta_eff) / denom,
                p_rest: (1.0 - theta_i) / denom,
                p_exam_i: theta_i * (1.0 - theta_j * eps_bar - (1.0 - theta_j) * beta_eff) / denom,
                p_exam_j: (tt * (gamma * (1.0 - eps_plus) + (1.0 - gamma) * (1.0 - eps_minus))
                    + (1.0 - theta_i) * theta_j)
                    / denom,
                p_rel_pair: (tt * gamma * (1.0 - eps_plus) + (1.0 - theta_i) * gamma) / denom,
                p_rel_i: (tt * (gamma * (1.0 - eps_plus) + (1.0 - gamma) * q * (1.0 - eps_minus))
                    + (1.0 - theta_i) * beta_eff)
                    / denom,
            })
        }
    }
}

/// E-step for one observed pair, resolving bias parameters by position.
pub fn e_step(
    obs: &PairObservation,
    params: &BiasParams,
    gamma: f64,
    beta_i: f64,
) -> Result<PairPosterior> {
    pair_posterior(
        obs.bucket,
        params.theta_at(obs.pos_i),
        params.theta_at(obs.pos_j),
        params.theta_minus_at(obs.pos_j),
        params.eps_plus_at(obs.pos_i, obs.pos_j),
        params.eps_minus_at(obs.pos_i, obs.pos_j),
        gamma,
        beta_i,
    )
    .map_err(|_| Error::ZeroProbability {
        i: obs.pos_i,
        j: obs.pos_j,
    })
}

// ---------------------------------------------------------------------------
// M-step: position parameters
// ---------------------------------------------------------------------------

/// Sufficient statistics for the position parameters from one batch.
#[derive(Debug, Clone)]
pub struct MStepStats {
    n: usize,
    theta_sum: Vec<f64>,
    theta_cnt: Vec<f64>,
    theta_minus_sum: Vec<f64>,
    theta_minus_cnt: Vec<f64>,
    eps_plus_obs: Vec<f64>,
    eps_plus_tot: Vec<f64>,
    eps_minus_obs: Vec<f64>,
    eps_minus_tot: Vec<f64>,
}

impl MStepStats {
    pub fn new(n_positions: usize) -> Self {
        let n = n_positions;
        MStepStats {
            n,
            theta_sum: vec![0.0; n],
            theta_cnt: vec![0.0; n],
            theta_minus_sum: vec![0.0; n],
            theta_minus_cnt: vec![0.0; n],
            eps_plus_obs: vec![0.0; n * n],
            eps_plus_tot: vec![0.0; n * n],
            eps_minus_obs: vec![0.0; n * n],
            eps_minus_tot: vec![0.0; n * n],
        }
    }

    fn cell(&self, i: usize, j: usize) -> usize {
        (i - 1) * self.n + (j - 1)
    }

    /// Pointwise contribution of one displayed item.
    pub fn add_item(&mut self, position: usize, label_positive: bool, theta: f64, beta: f64) {
        let exam = item_exam_posterior(label_positive, theta, beta);
        self.theta_sum[position - 1] += exam;
        self.theta_cnt[position - 1] += 1.0;
        if !label_positive {
            self.theta_minus_sum[position - 1] += exam;
            self.theta_minus_cnt[position - 1] += 1.0;
        }
    }

    /// Pair contribution. Positive-pair buckets feed the numerators, every
    /// bucket feeds the total posterior mass in the denominators.
    pub fn add_pair(&mut self, obs: &PairObservation, post: &PairPosterior) {
        let cell = self.cell(obs.pos_i, obs.pos_j);
        if obs.bucket != PairBucket::NonPositive {
            self.eps_plus_obs[cell] += post.p_ee_rpos;
            self.eps_minus_obs[cell] += post.p_ee_rneg;
        }
        self.eps_plus_tot[cell] += post.p_ee_rpos;
        self.eps_minus_tot[cell] += post.p_ee_rneg;
    }

    pub fn merge(&mut self, other: &MStepStats) {
        let fields = [
            (&mut self.theta_sum, &other.theta_sum),
            (&mut self.theta_cnt, &other.theta_cnt),
            (&mut self.theta_minus_sum, &other.theta_minus_sum),
            (&mut self.theta_minus_cnt, &other.theta_minus_cnt),
            (&mut self.eps_plus_obs, &other.eps_plus_obs),
            (&mut self.eps_plus_tot, &other.eps_plus_tot),
            (&mut self.eps_minus_obs, &other.eps_minus_obs),
            (&mut self.eps_minus_tot, &other.eps_minus_tot),
        ];
        for (mine, theirs) in fields {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += b;
            }
        }
    }

    /// Batch estimates; cells with empty denominators keep the prior value.
    pub fn estimates(&self, prior: &BiasParams) -> BiasParams {
        let mut est = prior.clone();
        for p in 0..self.n.min(prior.n_positions()) {
            if self.theta_cnt[p] > 0.0 {
                est.theta[p] = self.theta_sum[p] / self.theta_cnt[p];
            }
            if self.theta_minus_cnt[p] > 0.0 {
                est.theta_minus[p] = self.theta_minus_sum[p] / self.theta_minus_cnt[p];
            }
        }
        for i in 1..=self.n {
            for j in 1..=self.n {
                if i == j {
                    continue;
                }
                let cell = self.cell(i, j);
                if self.eps_plus_tot[cell] > 0.0 {
                    est.eps_plus[i - 1][j - 1] = self.eps_plus_obs[cell] / self.eps_plus_tot[cell];
                }
                if self.eps_minus_tot[cell] > 0.0 {
                    est.eps_minus[i - 1][j - 1] =
                        self.eps_minus_obs[cell] / self.eps_minus_tot[cell];
                }
            }
        }
        est
    }
}

/// Position-parameter M-step: estimate from the batch statistics and blend
/// into the previous parameters with rate `alpha`.
pub fn m_step_positions(
    stats: &MStepStats,
    params: &BiasParams,
    alpha: f64,
    floor: f64,
) -> Result<BiasParams> {
    params.blend(&stats.estimates(params), alpha, floor)
}

// ---------------------------------------------------------------------------
// EM driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    /// Initial blend rate for mini-batch updates.
    pub alpha0: f64,
    /// Decay horizon in batches: alpha_t = alpha0 / (1 + t / t0). Zero
    /// disables decay.
    pub alpha_decay_batches: f64,
    /// Sessions per mini-batch; at least the data size means full-batch EM.
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate for the gamma/beta regression heads. Zero freezes the
    /// ranker entirely.
    pub head_lr: f64,
    pub seed: u64,
    pub floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            alpha0: 0.2,
            alpha_decay_batches: 100.0,
            batch_size: 256,
            epochs: 10,
            head_lr: 0.05,
            seed: 0,
            floor: DEFAULT_FLOOR,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.alpha0 && self.alpha0 <= 1.0) {
            return Err(Error::validation("alpha0 must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if self.head_lr < 0.0 {
            return Err(Error::validation("head_lr must be nonnegative"));
        }
        if !(0.0 < self.floor && self.floor < 0.5) {
            return Err(Error::validation("floor must lie in (0, 0.5)"));
        }
        Ok(())
    }

    fn alpha_at(&self, batch_counter: usize) -> f64 {
        if self.alpha_decay_batches > 0.0 {
            self.alpha0 / (1.0 + batch_counter as f64 / self.alpha_decay_batches)
        } else {
            self.alpha0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub batch: usize,
    pub param: String,
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmTrace {
    pub rows: Vec<TraceRow>,
    /// Observed-data log-likelihood at the end of each epoch.
    pub epoch_loglik: Vec<f64>,
}

impl EmTrace {
    pub fn write<W: std::io::Write>(&self, writer: &mut W) -> Result<()> {
        for r in &self.rows {
            writeln!(
                writer,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.epoch, r.batch, r.param, r.i, r.j, r.value
            )?;
        }
        for (epoch, ll) in self.epoch_loglik.iter().enumerate() {
            writeln!(writer, "{}\t-\tloglik\t0\t0\t{}", epoch + 1, ll)?;
        }
        Ok(())
    }
}

/// Observed-data log-likelihood: pointwise item indicators plus the three-way
/// pair events, both under the current parameters and head outputs.
pub fn log_likelihood(
    data: &EmData,
    dataset: &Dataset,
    params: &BiasParams,
    ranker: &Ranker,
    mode: ExecMode,
) -> Result<f64> {
    let per_session: Vec<Result<f64>> = map_slice(mode, &data.sessions, |session| {
        let query = &dataset.queries[session.query_idx];
        let mut score_by_doc: HashMap<usize, f64> = HashMap::new();
        let mut beta_by_doc: HashMap<usize, f64> = HashMap::new();
        for item in &session.items {
            if let std::collections::hash_map::Entry::Vacant(e) = beta_by_doc.entry(item.doc) {
                let rec = ranker.forward_record(&query.documents[item.doc].features)?;
                score_by_doc.insert(item.doc, rec.score);
                e.insert(sigmoid(rec.beta_logit));
            }
        }
        let mut ll = 0.0;
        for item in &session.items {
            let theta = params.theta_at(item.position);
            let p_pos = (theta * beta_by_doc[&item.doc]).clamp(1e-12, 1.0 - 1e-12);
            ll += if item.label > 0.0 {
                p_pos.ln()
            } else {
                (1.0 - p_pos).ln()
            };
        }
        for pair in &session.pairs {
            let gamma = sigmoid(score_by_doc[&pair.doc_i] - score_by_doc[&pair.doc_j]);
            let beta_i = beta_by_doc[&pair.doc_i];
            let theta_i = params.theta_at(pair.pos_i);
            let theta_j = params.theta_at(pair.pos_j);
            let theta_j_minus = params.theta_minus_at(pair.pos_j).min(theta_j);
            let eps_bar = params.eps_plus_at(pair.pos_i, pair.pos_j) * gamma
                + params.eps_minus_at(pair.pos_i, pair.pos_j) * (1.0 - gamma);
            // split of the positive-pair mass by the lower label's positivity
            let z =
                ((theta_j - theta_j_minus) / (theta_j * (1.0 - theta_j_minus))).clamp(0.0, 1.0);
            let p_a = theta_i * theta_j * z * eps_bar;
            let p_b =
                theta_i * theta_j * (1.0 - z) * eps_bar + theta_i * (1.0 - theta_j) * beta_i;
            let p = match pair.bucket {
                PairBucket::BothPositive => p_a,
                PairBucket::LowerZero => p_b,
                PairBucket::NonPositive => 1.0 - p_a - p_b,
            };
            ll += p.clamp(1e-12, 1.0).ln();
        }
        Ok(ll)
    });
    let mut total = 0.0;
    for r in per_session {
        total += r?;
    }
    Ok(total)
}

/// The pointwise slice of the likelihood only. With the heads frozen, the
/// position M-step is an exact maximizer of this part's EM bound, so it is
/// non-decreasing across full-batch iterations.
pub fn item_log_likelihood(
    data: &EmData,
    dataset: &Dataset,
    params: &BiasParams,
    ranker: &Ranker,
    mode: ExecMode,
) -> Result<f64> {
    let per_session: Vec<Result<f64>> = map_slice(mode, &data.sessions, |session| {
        let query = &dataset.queries[session.query_idx];
        let mut ll = 0.0;
        for item in &session.items {
            let beta = ranker.beta(&query.documents[item.doc].features)?;
            let p_pos =
                (params.theta_at(item.position) * beta).clamp(1e-12, 1.0 - 1e-12);
            ll += if item.label > 0.0 {
                p_pos.ln()
            } else {
                (1.0 - p_pos).ln()
            };
        }
        Ok(ll)
    });
    let mut total = 0.0;
    for r in per_session {
        total += r?;
    }
    Ok(total)
}

/// Head outputs for all unique documents in one batch, in deterministic
/// (query, doc) order.
struct BatchHeads {
    order: Vec<(usize, usize)>,
    index: HashMap<(usize, usize), usize>,
    records: Vec<ForwardRecord>,
}

impl BatchHeads {
    fn compute(
        data: &EmData,
        batch: &[usize],
        dataset: &Dataset,
        ranker: &Ranker,
        mode: ExecMode,
    ) -> Result<BatchHeads> {
        let mut unique: BTreeSet<(usize, usize)> = BTreeSet::new();
        for &s in batch {
            let session = &data.sessions[s];
            for item in &session.items {
                unique.insert((session.query_idx, item.doc));
            }
        }
        let order: Vec<(usize, usize)> = unique.into_iter().collect();
        let results: Vec<Result<ForwardRecord>> = map_slice(mode, &order, |&(q, d)| {
            ranker.forward_record(&dataset.queries[q].documents[d].features)
        });
        let mut records = Vec::with_capacity(order.len());
        for r in results {
            records.push(r?);
        }
        let index = order.iter().enumerate().map(|(k, &key)| (key, k)).collect();
        Ok(BatchHeads {
            order,
            index,
            records,
        })
    }

    fn score(&self, q: usize, d: usize) -> f64 {
        self.records[self.index[&(q, d)]].score
    }

    fn beta(&self, q: usize, d: usize) -> f64 {
        sigmoid(self.records[self.index[&(q, d)]].beta_logit)
    }
}

/// Regression M-step: one cross-entropy SGD step on the gamma and beta heads
/// against Bernoulli-sampled posterior targets. Gradients are averaged over
/// pairs and items separately so the learning rate is batch-size stable.
#[allow(clippy::too_many_arguments)]
fn m_step_regression(
    data: &EmData,
    batch: &[usize],
    posteriors: &[Vec<PairPosterior>],
    params: &BiasParams,
    heads: &BatchHeads,
    ranker: &mut Ranker,
    head_lr: f64,
    rng: &mut ChaCha8Rng,
    mode: ExecMode,
) -> Result<()> {
    let n_docs = heads.order.len();
    let mut d_score = vec![0.0; n_docs];
    let mut d_beta = vec![0.0; n_docs];
    let mut n_pairs = 0usize;
    let mut n_items = 0usize;
    for (&s, posts) in batch.iter().zip(posteriors) {
        let session = &data.sessions[s];
        for (pair, post) in session.pairs.iter().zip(posts) {
            let ki = heads.index[&(session.query_idx, pair.doc_i)];
            let kj = heads.index[&(session.query_idx, pair.doc_j)];
            let target = f64::from(rng.gen::<f64>() < post.p_rel_pair);
            let pred = sigmoid(heads.records[ki].score - heads.records[kj].score);
            let g = pred - target;
            d_score[ki] += g;
            d_score[kj] -= g;
            n_pairs += 1;
        }
        for item in &session.items {
            let k = heads.index[&(session.query_idx, item.doc)];
            let beta = sigmoid(heads.records[k].beta_logit);
            let p_rel =
                item_rel_posterior(item.label > 0.0, params.theta_at(item.position), beta);
            let target = f64::from(rng.gen::<f64>() < p_rel);
            d_beta[k] += beta - target;
            n_items += 1;
        }
    }
    if n_pairs > 0 {
        for g in &mut d_score {
            *g /= n_pairs as f64;
        }
    }
    if n_items > 0 {
        for g in &mut d_beta {
            *g /= n_items as f64;
        }
    }
    let doc_ids: Vec<usize> = (0..n_docs).collect();
    let grads = accumulate_chunks(mode, &doc_ids, 64, ranker.n_params(), |chunk, acc| {
        for &k in chunk {
            ranker
                .backward(&heads.records[k], d_score[k], d_beta[k], acc)
                .expect("gradient buffer sized to n_params");
        }
    });
    ranker.sgd_step(&grads, head_lr, Some(5.0))
}

fn max_param_delta(a: &BiasParams, b: &BiasParams) -> f64 {
    let mut d: f64 = 0.0;
    for (x, y) in a.theta.iter().zip(&b.theta) {
        d = d.max((x - y).abs());
    }
    for (x, y) in a.theta_minus.iter().zip(&b.theta_minus) {
        d = d.max((x - y).abs());
    }
    for (xs, ys) in a.eps_plus.iter().zip(&b.eps_plus) {
        for (x, y) in xs.iter().zip(ys) {
            d = d.max((x - y).abs());
        }
    }
    for (xs, ys) in a.eps_minus.iter().zip(&b.eps_minus) {
        for (x, y) in xs.iter().zip(ys) {
            d = d.max((x - y).abs());
        }
    }
    d
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Run mini-batch EM over the sessions. Returns the fitted bias parameters,
/// the updated ranker, and a trace of parameter trajectories plus per-epoch
/// log-likelihood. `epochs = 0` returns the inputs unchanged.
pub fn run_em(
    sessions: &[Session],
    dataset: &Dataset,
    init: &BiasParams,
    ranker: &Ranker,
    cfg: &EmConfig,
    mode: ExecMode,
) -> Result<(BiasParams, Ranker, EmTrace)> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok((init.clone(), ranker.clone(), EmTrace::default()));
    }
    let data = EmData::from_sessions(sessions, dataset)?;
    run_em_on(&data, dataset, init, ranker, cfg, mode)
}

/// EM loop on pre-extracted observations; [`run_em`] is the session-level
/// entry point.
pub fn run_em_on(
    data: &EmData,
    dataset: &Dataset,
    init: &BiasParams,
    ranker: &Ranker,
    cfg: &EmConfig,
    mode: ExecMode,
) -> Result<(BiasParams, Ranker, EmTrace)> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok((init.clone(), ranker.clone(), EmTrace::default()));
    }
    if init.n_positions() < data.n_positions {
        return Err(Error::DimMismatch {
            expected: data.n_positions,
            got: init.n_positions(),
        });
    }
    let mut params = init.project(cfg.floor);
    let mut ranker = ranker.clone();
    let mut trace = EmTrace::default();
    let mut batch_counter = 0usize;

    for epoch in 1..=cfg.epochs {
        let epoch_start = params.clone();
        let mut order: Vec<usize> = (0..data.sessions.len()).collect();
        {
            use rand::seq::SliceRandom;
            let mut shuffle_rng =
                ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ ((epoch as u64) << 32)));
            order.shuffle(&mut shuffle_rng);
        }
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let heads = BatchHeads::compute(data, batch, dataset, &ranker, mode)?;

            // E-step: closed-form posteriors for every pair in the batch,
            // plus pointwise stats, accumulated per session in order.
            let per_session: Vec<Result<(MStepStats, Vec<PairPosterior>)>> =
                map_slice(mode, batch, |&s| {
                    let session = &data.sessions[s];
                    let mut stats = MStepStats::new(data.n_positions);
                    for item in &session.items {
                        stats.add_item(
                            item.position,
                            item.label > 0.0,
                            params.theta_at(item.position),
                            heads.beta(session.query_idx, item.doc),
                        );
                    }
                    let mut posts = Vec::with_capacity(session.pairs.len());
                    for pair in &session.pairs {
                        let gamma = sigmoid(
                            heads.score(session.query_idx, pair.doc_i)
                                - heads.score(session.query_idx, pair.doc_j),
                        );
                        let beta_i = heads.beta(session.query_idx, pair.doc_i);
                        let post = e_step(pair, &params, gamma, beta_i)?;
                        stats.add_pair(pair, &post);
                        posts.push(post);
                    }
                    Ok((stats, posts))
                });
            let mut stats = MStepStats::new(data.n_positions);
            let mut posteriors = Vec::with_capacity(batch.len());
            for r in per_session {
                let (s, p) = r?;
                stats.merge(&s);
                posteriors.push(p);
            }

            // M-step
            let alpha = cfg.alpha_at(batch_counter);
            params = m_step_positions(&stats, &params, alpha, cfg.floor)?;
            if cfg.head_lr > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(
                    cfg.seed ^ ((epoch as u64) << 40) ^ ((batch_idx as u64) << 8) ^ 1,
                ));
                m_step_regression(
                    data,
                    batch,
                    &posteriors,
                    &params,
                    &heads,
                    &mut ranker,
                    cfg.head_lr,
                    &mut rng,
                    mode,
                )?;
            }

            for p in 0..data.n_positions {
                trace.rows.push(TraceRow {
                    epoch,
                    batch: batch_idx,
                    param: "theta".into(),
                    i: p + 1,
                    j: 0,
                    value: params.theta[p],
                });
                trace.rows.push(TraceRow {
                    epoch,
                    batch: batch_idx,
                    param: "theta_minus".into(),
                    i: p + 1,
                    j: 0,
                    value: params.theta_minus[p],
                });
            }
            batch_counter += 1;
        }

        // trust matrices once per epoch to keep the trace compact
        for i in 1..=data.n_positions {
            for j in 1..=data.n_positions {
                if i == j {
                    continue;
                }
                for (name, value) in [
                    ("eps_plus", params.eps_plus_at(i, j)),
                    ("eps_minus", params.eps_minus_at(i, j)),
                ] {
                    trace.rows.push(TraceRow {
                        epoch,
                        batch: usize::MAX,
                        param: name.into(),
                        i,
                        j,
                        value,
                    });
                }
            }
        }
        trace
            .epoch_loglik
            .push(log_likelihood(data, dataset, &params, &ranker, mode)?);

        if max_param_delta(&epoch_start, &params) < PARAM_TOL {
            break;
        }
    }
    Ok((params, ranker, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::letor::parse_letor;
    use crate::mlp::MlpSpec;
    use crate::oracle::{self, random_consistent_model};
    use crate::simulate::{simulate_dataset, SimConfig};

    #[test]
    fn closed_forms_match_worked_values() {
        let (ti, tj, tjm, ep, em, g, b) = (0.9, 0.5, 0.3, 0.9, 0.1, 0.6, 0.4);
        assert!((marginal_positive_pair(ti, tj, ep, em, g, b) - 0.441).abs() < 1e-12);
        assert!((m_ij(ep, em, g) - 0.54 / 0.58).abs() < 1e-12);
        assert!((h_ij(ti, tjm, ep, em, g, b) - 0.1566 / 0.4086).abs() < 1e-12);
        assert!((posterior_ee_rpos(ti, tj, ep, em, g, b) - 0.243 / 0.441).abs() < 1e-12);
    }

    #[test]
    fn e_step_matches_enumeration_oracle() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..300 {
            let m = random_consistent_model(&mut rng);
            for bucket in PairBucket::ALL {
                let want = match oracle::posterior(&m, bucket) {
                    Ok(p) => p,
                    Err(_) => continue, // zero-probability observation
                };
                let got = pair_posterior(
                    bucket,
                    m.theta_i,
                    m.theta_j,
                    m.theta_j_minus,
                    m.eps_plus,
                    m.eps_minus,
                    m.gamma,
                    m.beta_i,
                )
                .unwrap();
                for (a, b) in [
                    (got.p_ee_rpos, want.p_ee_rpos),
                    (got.p_ee_rneg, want.p_ee_rneg),
                    (got.p_e_only, want.p_e_only),
                    (got.p_rest, want.p_rest),
                    (got.p_exam_i, want.p_exam_i),
                    (got.p_exam_j, want.p_exam_j),
                    (got.p_rel_pair, want.p_rel_pair),
                    (got.p_rel_i, want.p_rel_i),
                ] {
                    assert!((a - b).abs() < 1e-10, "bucket {bucket:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn posterior_masses_sum_to_one() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let m = random_consistent_model(&mut rng);
            for bucket in PairBucket::ALL {
                if let Ok(p) = pair_posterior(
                    bucket,
                    m.theta_i,
                    m.theta_j,
                    m.theta_j_minus,
                    m.eps_plus,
                    m.eps_minus,
                    m.gamma,
                    m.beta_i,
                ) {
                    let total = p.p_ee_rpos + p.p_ee_rneg + p.p_e_only + p.p_rest;
                    assert!((total - 1.0).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn item_posteriors() {
        assert!((item_exam_posterior(false, 0.5, 0.4) - 0.375).abs() < 1e-12);
        assert!((item_rel_posterior(false, 0.5, 0.4) - 0.25).abs() < 1e-12);
        assert_eq!(item_exam_posterior(true, 0.5, 0.4), 1.0);
        // law of total probability recovers the prior
        let (theta, beta) = (0.37, 0.81);
        let p_pos = theta * beta;
        let back = p_pos + (1.0 - p_pos) * item_exam_posterior(false, theta, beta);
        assert!((back - theta).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_an_error() {
        let r = pair_posterior(PairBucket::BothPositive, 0.5, 0.5, 0.3, 0.0, 0.0, 0.5, 0.6);
        assert!(matches!(r, Err(Error::ZeroProbability { .. })));
    }

    fn toy_sessions() -> (Dataset, Vec<Session>) {
        let text = "\
2 qid:1 1:1.0 2:0.2\n\
0 qid:1 1:0.1 2:0.9\n\
3 qid:1 1:0.7 2:0.4\n\
1 qid:2 1:0.3 2:0.3\n\
4 qid:2 1:0.9 2:0.1\n\
0 qid:2 1:0.2 2:0.8\n";
        let dataset = parse_letor(text.as_bytes(), None).unwrap();
        let cfg = SimConfig {
            sessions_per_query: 40,
            list_size: 3,
            seed: 13,
            ..SimConfig::default()
        };
        let sessions = simulate_dataset(&dataset, &cfg, ExecMode::Sequential).unwrap();
        (dataset, sessions)
    }

    #[test]
    fn extract_pairs_buckets() {
        let session = Session {
            qid: "1".into(),
            ranked_docs: vec![0, 1, 2],
            clicks: vec![1, 0, 1],
            dwell: vec![2.0, 0.0, 0.5],
            synth: vec![2.0, 0.0, 1.0],
        };
        let pairs = extract_pairs(&session);
        assert_eq!(pairs.len(), 6);
        let find = |i: usize, j: usize| pairs.iter().find(|p| p.pos_i == i && p.pos_j == j).unwrap();
        assert_eq!(find(1, 2).bucket, PairBucket::LowerZero);
        assert_eq!(find(1, 3).bucket, PairBucket::BothPositive);
        assert_eq!(find(3, 2).bucket, PairBucket::LowerZero);
        assert_eq!(find(2, 1).bucket, PairBucket::NonPositive);
        assert_eq!(find(2, 3).bucket, PairBucket::NonPositive);
        assert_eq!(find(3, 1).bucket, PairBucket::NonPositive);
    }

    #[test]
    fn stats_keep_prior_on_empty_cells() {
        let prior = BiasParams::init_default(4).unwrap();
        let stats = MStepStats::new(4);
        assert_eq!(stats.estimates(&prior), prior);
    }

    #[test]
    fn epochs_zero_is_identity() {
        let (dataset, sessions) = toy_sessions();
        let init = BiasParams::init_default(3).unwrap();
        let ranker = Ranker::init(MlpSpec::new(2, vec![4], 1)).unwrap();
        let cfg = EmConfig {
            epochs: 0,
            ..EmConfig::default()
        };
        let (p, r, t) =
            run_em(&sessions, &dataset, &init, &ranker, &cfg, ExecMode::Sequential).unwrap();
        assert_eq!(p, init);
        assert_eq!(r, ranker);
        assert!(t.rows.is_empty());
    }

    #[test]
    fn run_em_smoke_and_determinism() {
        let (dataset, sessions) = toy_sessions();
        let init = BiasParams::init_default(3).unwrap();
        let ranker = Ranker::init(MlpSpec::new(2, vec![4], 1)).unwrap();
        let cfg = EmConfig {
            epochs: 3,
            batch_size: 16,
            seed: 9,
            ..EmConfig::default()
        };
        let (p1, r1, t1) =
            run_em(&sessions, &dataset, &init, &ranker, &cfg, ExecMode::Parallel).unwrap();
        let (p2, r2, t2) =
            run_em(&sessions, &dataset, &init, &ranker, &cfg, ExecMode::Sequential).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(r1.params, r2.params);
        assert_eq!(t1, t2);
        assert!(p1.constraints_hold());
        assert!(!t1.rows.is_empty());
        assert!(t1.epoch_loglik.len() <= 3);
        assert!(t1.epoch_loglik.iter().all(|ll| ll.is_finite()));
        // parameters actually moved
        assert!(max_param_delta(&p1, &init) > 0.0);
    }

    #[test]
    fn trace_serialization() {
        let mut trace = EmTrace::default();
        trace.rows.push(TraceRow {
            epoch: 1,
            batch: 0,
            param: "theta".into(),
            i: 1,
            j: 0,
            value: 0.5,
        });
        trace.epoch_loglik.push(-12.25);
        let mut buf = Vec::new();
        trace.write(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "1\t0\ttheta\t1\t0\t0.5\n1\t-\tloglik\t0\t0\t-12.25\n");
    }
}
