//! Mini-batch SGD training of the ranker on logged sessions.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bias::BiasParams;
use crate::error::{Error, Result};
use crate::letor::Dataset;
use crate::losses::{
    pairwise_session_loss, pointwise_session_loss, PairLossVariant, PointLossVariant, SessionView,
};
use crate::metrics::evaluate;
use crate::mlp::{sigmoid, ForwardRecord, Ranker};
use crate::par::{accumulate_chunks, map_slice, ExecMode};
use crate::simulate::Session;

/// Where the per-slot training labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    /// Editorial grades of the displayed documents: the full-information
    /// skyline. Incompatible with bias-corrected losses.
    RelevanceUpperBound,
    /// Raw binary clicks.
    ClickCategorical,
    /// Synthesized click/dwell labels.
    SynthesizedContinuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSpec {
    Pointwise(PointLossVariant),
    Pairwise(PairLossVariant),
}

impl LossSpec {
    fn is_bias_corrected(self) -> bool {
        !matches!(
            self,
            LossSpec::Pointwise(PointLossVariant::NaiveMse)
                | LossSpec::Pointwise(PointLossVariant::NaiveCe)
                | LossSpec::Pairwise(PairLossVariant::Naive)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub label_source: LabelSource,
    pub lr: f64,
    pub epochs: usize,
    /// Sessions per mini-batch.
    pub batch_size: usize,
    /// NDCG cutoff inside the rank-sensitive loss weights.
    pub loss_cutoff: usize,
    /// Validation metric cutoff for early stopping.
    pub eval_cutoff: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub clip: Option<f64>,
    pub seed: u64,
    /// Measure the rank-swap delta of the `Opt` loss on the logged order
    /// instead of the current model ranking.
    pub delta_logged: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossSpec::Pairwise(PairLossVariant::BayesIpw),
            label_source: LabelSource::SynthesizedContinuous,
            lr: 0.05,
            epochs: 30,
            batch_size: 64,
            loss_cutoff: 10,
            eval_cutoff: 5,
            patience: 5,
            clip: Some(5.0),
            seed: 0,
            delta_logged: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::validation("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if self.loss_cutoff == 0 || self.eval_cutoff == 0 {
            return Err(Error::validation("cutoffs must be positive"));
        }
        if self.label_source == LabelSource::RelevanceUpperBound && self.loss.is_bias_corrected() {
            return Err(Error::config(
                "the relevance upper bound uses unbiased labels; \
                 bias-corrected losses would double-correct",
            ));
        }
        if matches!(self.loss, LossSpec::Pointwise(PointLossVariant::Ipw))
            && self.label_source == LabelSource::SynthesizedContinuous
        {
            return Err(Error::config(
                "pointwise IPW needs binary labels; use the click label source",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// (epoch, mean train loss, validation NDCG if a valid split was given).
    pub history: Vec<(usize, f64, Option<f64>)>,
    pub epochs_run: usize,
    pub best_valid_ndcg: Option<f64>,
}

fn labels_for(
    session: &Session,
    dataset: &Dataset,
    query_idx: usize,
    source: LabelSource,
) -> Vec<f64> {
    match source {
        LabelSource::RelevanceUpperBound => session
            .ranked_docs
            .iter()
            .map(|&d| f64::from(dataset.queries[query_idx].documents[d].relevance))
            .collect(),
        LabelSource::ClickCategorical => session.clicks.iter().map(|&c| f64::from(c)).collect(),
        LabelSource::SynthesizedContinuous => session.synth.clone(),
    }
}

/// Train the ranker, returning the best model (by validation NDCG when a
/// validation split is provided, otherwise the final one) and the per-epoch
/// history. Early stopping kicks in after `patience` stale epochs.
pub fn train(
    ranker: &Ranker,
    sessions: &[Session],
    dataset: &Dataset,
    valid: Option<&Dataset>,
    params: &BiasParams,
    cfg: &TrainConfig,
    mode: ExecMode,
) -> Result<(Ranker, TrainReport)> {
    cfg.validate()?;
    if sessions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let qindex: HashMap<&str, usize> = dataset
        .queries
        .iter()
        .enumerate()
        .map(|(i, q)| (q.qid.as_str(), i))
        .collect();
    let session_query: Vec<usize> = sessions
        .iter()
        .map(|s| {
            qindex
                .get(s.qid.as_str())
                .copied()
                .ok_or_else(|| Error::validation(format!("session qid {} not in dataset", s.qid)))
        })
        .collect::<Result<_>>()?;

    let mut model = ranker.clone();
    let mut best = model.clone();
    let mut best_ndcg = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut report = TrainReport::default();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..sessions.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(
            cfg.seed ^ ((epoch as u64) << 20) ^ 0x517c_c1b7_2722_0a95,
        ));
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            epoch_loss += train_batch(
                &mut model,
                batch,
                sessions,
                dataset,
                &session_query,
                params,
                cfg,
                mode,
            )?;
            n_batches += 1;
        }
        let mean_loss = epoch_loss / n_batches as f64;

        let valid_ndcg = match valid {
            Some(v) => {
                let rep = evaluate(&model, v, &[cfg.eval_cutoff], mode)?;
                Some(rep.ndcg[0].1)
            }
            None => None,
        };
        report.history.push((epoch, mean_loss, valid_ndcg));
        report.epochs_run = epoch;

        if let Some(ndcg) = valid_ndcg {
            if ndcg > best_ndcg {
                best_ndcg = ndcg;
                best = model.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }

    if valid.is_some() {
        report.best_valid_ndcg = Some(best_ndcg);
        Ok((best, report))
    } else {
        Ok((model, report))
    }
}

/// One SGD step over a batch of sessions; returns the mean session loss.
#[allow(clippy::too_many_arguments)]
fn train_batch(
    model: &mut Ranker,
    batch: &[usize],
    sessions: &[Session],
    dataset: &Dataset,
    session_query: &[usize],
    params: &BiasParams,
    cfg: &TrainConfig,
    mode: ExecMode,
) -> Result<f64> {
    // forward every unique displayed doc once, deterministic order
    let mut unique: BTreeSet<(usize, usize)> = BTreeSet::new();
    for &s in batch {
        let q = session_query[s];
        for &d in &sessions[s].ranked_docs {
            unique.insert((q, d));
        }
    }
    let order: Vec<(usize, usize)> = unique.into_iter().collect();
    let recs: Vec<Result<ForwardRecord>> = map_slice(mode, &order, |&(q, d)| {
        model.forward_record(&dataset.queries[q].documents[d].features)
    });
    let mut records = Vec::with_capacity(order.len());
    for r in recs {
        records.push(r?);
    }
    let index: HashMap<(usize, usize), usize> =
        order.iter().enumerate().map(|(k, &key)| (key, k)).collect();

    // per-session losses and per-slot gradients, order-preserving
    let per_session: Vec<Result<(f64, Vec<f64>)>> = map_slice(mode, batch, |&s| {
        let session = &sessions[s];
        let q = session_query[s];
        let scores: Vec<f64> = session
            .ranked_docs
            .iter()
            .map(|&d| records[index[&(q, d)]].score)
            .collect();
        let betas: Vec<f64> = session
            .ranked_docs
            .iter()
            .map(|&d| sigmoid(records[index[&(q, d)]].beta_logit))
            .collect();
        let labels = labels_for(session, dataset, q, cfg.label_source);
        match cfg.loss {
            LossSpec::Pointwise(v) => pointwise_session_loss(v, &scores, &labels, params),
            LossSpec::Pairwise(v) => {
                let mut view = SessionView::new(&scores, &labels, &betas);
                view.logged_delta = cfg.delta_logged;
                pairwise_session_loss(v, &view, params, cfg.loss_cutoff)
            }
        }
    });

    // fold per-slot gradients into per-doc score gradients
    let mut d_score = vec![0.0; order.len()];
    let mut total_loss = 0.0;
    for (&s, r) in batch.iter().zip(per_session) {
        let (loss, slot_grads) = r?;
        total_loss += loss;
        let q = session_query[s];
        for (slot, &d) in sessions[s].ranked_docs.iter().enumerate() {
            d_score[index[&(q, d)]] += slot_grads[slot];
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for g in &mut d_score {
        *g *= scale;
    }

    let doc_ids: Vec<usize> = (0..order.len()).collect();
    let grads = accumulate_chunks(mode, &doc_ids, 64, model.n_params(), |chunk, acc| {
        for &k in chunk {
            model
                .backward(&records[k], d_score[k], 0.0, acc)
                .expect("gradient buffer sized to n_params");
        }
    });
    model.sgd_step(&grads, cfg.lr, cfg.clip)?;
    Ok(total_loss * scale)
}
