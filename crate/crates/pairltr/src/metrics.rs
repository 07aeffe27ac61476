//! Ranking quality metrics on graded relevance.

use std::io::Write;

use crate::error::{Error, Result};
use crate::letor::Dataset;
use crate::losses::ranks_by_score;
use crate::mlp::Ranker;
use crate::par::{map_slice, ExecMode};

fn gain(grade: u8) -> f64 {
    2f64.powi(i32::from(grade)) - 1.0
}

fn discount(rank: usize) -> f64 {
    1.0 / (1.0 + rank as f64).log2()
}

/// NDCG@k with exponential gains. `None` when the query has no relevant
/// documents (zero ideal DCG); such queries are skipped by [`evaluate`].
pub fn ndcg_at_k(scores: &[f64], grades: &[u8], k: usize) -> Result<Option<f64>> {
    if scores.len() != grades.len() {
        return Err(Error::DimMismatch {
            expected: scores.len(),
            got: grades.len(),
        });
    }
    if k == 0 {
        return Err(Error::validation("cutoff must be positive"));
    }
    let ranks = ranks_by_score(scores);
    let dcg: f64 = (0..scores.len())
        .filter(|&d| ranks[d] <= k)
        .map(|d| gain(grades[d]) * discount(ranks[d]))
        .sum();
    let mut sorted: Vec<u8> = grades.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let ideal: f64 = sorted
        .iter()
        .take(k)
        .enumerate()
        .map(|(r0, &g)| gain(g) * discount(r0 + 1))
        .sum();
    if ideal <= 0.0 {
        return Ok(None);
    }
    Ok(Some(dcg / ideal))
}

/// Average relevant position: mean rank of relevant documents (grade > 0),
/// lower is better. `None` when nothing is relevant.
pub fn arp(scores: &[f64], grades: &[u8]) -> Result<Option<f64>> {
    if scores.len() != grades.len() {
        return Err(Error::DimMismatch {
            expected: scores.len(),
            got: grades.len(),
        });
    }
    let ranks = ranks_by_score(scores);
    let mut sum = 0.0;
    let mut count = 0usize;
    for d in 0..scores.len() {
        if grades[d] > 0 {
            sum += ranks[d] as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(None);
    }
    Ok(Some(sum / count as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean NDCG per requested cutoff, averaged over contributing queries.
    pub ndcg: Vec<(usize, f64)>,
    pub arp: f64,
    pub n_queries: usize,
    /// Queries without any relevant document, excluded from the averages.
    pub skipped: usize,
}

impl EvalReport {
    /// `metric \t cutoff \t value` rows; ARP uses cutoff 0.
    pub fn write<W: Write>(&self, writer: &mut W) -> Result<()> {
        for &(k, v) in &self.ndcg {
            writeln!(writer, "ndcg\t{k}\t{v}")?;
        }
        writeln!(writer, "arp\t0\t{}", self.arp)?;
        writeln!(writer, "queries\t0\t{}", self.n_queries)?;
        writeln!(writer, "skipped\t0\t{}", self.skipped)?;
        Ok(())
    }
}

/// Score every query with the ranker and average NDCG@k and ARP over queries
/// that have at least one relevant document.
pub fn evaluate(
    ranker: &Ranker,
    dataset: &Dataset,
    cutoffs: &[usize],
    mode: ExecMode,
) -> Result<EvalReport> {
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(Error::validation("cutoffs must be positive and non-empty"));
    }
    type QueryStats = Option<(Vec<f64>, f64)>;
    let per_query: Vec<Result<QueryStats>> = map_slice(mode, &dataset.queries, |query| {
            let mut scores = Vec::with_capacity(query.documents.len());
            for doc in &query.documents {
                scores.push(ranker.score(&doc.features)?);
            }
            let grades: Vec<u8> = query.documents.iter().map(|d| d.relevance).collect();
            let Some(a) = arp(&scores, &grades)? else {
                return Ok(None);
            };
            let mut per_cut = Vec::with_capacity(cutoffs.len());
            for &k in cutoffs {
                per_cut.push(ndcg_at_k(&scores, &grades, k)?.expect("arp found relevant docs"));
            }
            Ok(Some((per_cut, a)))
        });

    let mut ndcg_sum = vec![0.0; cutoffs.len()];
    let mut arp_sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for r in per_query {
        match r? {
            Some((per_cut, a)) => {
                for (acc, v) in ndcg_sum.iter_mut().zip(per_cut) {
                    *acc += v;
                }
                arp_sum += a;
                used += 1;
            }
            None => skipped += 1,
        }
    }
    if used == 0 {
        return Err(Error::validation(
            "no query has a relevant document; metrics are undefined",
        ));
    }
    Ok(EvalReport {
        ndcg: cutoffs
            .iter()
            .zip(ndcg_sum)
            .map(|(&k, s)| (k, s / used as f64))
            .collect(),
        arp: arp_sum / used as f64,
        n_queries: dataset.queries.len(),
        skipped,
    })
}
