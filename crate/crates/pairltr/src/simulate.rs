//! Biased user-feedback simulation: position-dependent clicks, dwell times,
//! and synthesized labels over a fixed presented ranking.

use std::io::{BufRead, Write};

use rand::distributions::{Bernoulli, Distribution};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::error::{Error, Result};
use crate::letor::{Dataset, Query, MAX_GRADE};
use crate::par::{map_slice, ExecMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineKind {
    WeightedSum,
    WeightedProduct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombineSpec {
    pub kind: CombineKind,
    /// One weight per action channel: (click, dwell).
    pub weights: Vec<f64>,
}

impl CombineSpec {
    pub fn sum(w_click: f64, w_dwell: f64) -> Self {
        CombineSpec {
            kind: CombineKind::WeightedSum,
            weights: vec![w_click, w_dwell],
        }
    }

    /// Click-only labels: the continuous pipeline degenerates to the
    /// categorical one.
    pub fn categorical() -> Self {
        CombineSpec::sum(1.0, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Position-bias severity exponent for clicks.
    pub eta: f64,
    /// Click/dwell relevance noise floor.
    pub noise_eps: f64,
    /// Number of displayed positions per session.
    pub list_size: usize,
    pub sessions_per_query: usize,
    pub seed: u64,
    pub combine: CombineSpec,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            eta: 1.0,
            noise_eps: 0.1,
            list_size: 10,
            sessions_per_query: 16,
            seed: 0,
            combine: CombineSpec::sum(1.0, 1.0),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.list_size < 2 {
            return Err(Error::validation("list_size must be >= 2"));
        }
        if self.eta < 0.0 {
            return Err(Error::validation("eta must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.noise_eps) {
            return Err(Error::validation("noise_eps must lie in [0, 1)"));
        }
        if self.sessions_per_query == 0 {
            return Err(Error::validation("sessions_per_query must be positive"));
        }
        if self.combine.weights.len() != 2 {
            return Err(Error::validation("combine weights must have length 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub qid: String,
    /// doc_index displayed at positions 1..=N, in position order.
    pub ranked_docs: Vec<usize>,
    pub clicks: Vec<u8>,
    pub dwell: Vec<f64>,
    pub synth: Vec<f64>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.ranked_docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked_docs.is_empty()
    }
}

/// Examination propensity (1/position)^eta.
pub fn click_propensity(position: usize, eta: f64) -> Result<f64> {
    if position < 1 {
        return Err(Error::validation("position must be >= 1"));
    }
    Ok((1.0 / position as f64).powf(eta))
}

/// Noise-floored graded relevance-to-click mapping.
pub fn click_relevance_prob(grade: u8, noise_eps: f64) -> f64 {
    debug_assert!(grade <= MAX_GRADE);
    let max = (1u32 << MAX_GRADE) as f64 - 1.0;
    noise_eps + (1.0 - noise_eps) * (((1u32 << grade) as f64 - 1.0) / max)
}

/// Unbiased dwell-time mean for relevance grade y.
fn dwell_relevance_mean(grade: u8, noise_eps: f64) -> f64 {
    noise_eps + (1.0 - noise_eps) * grade as f64
}

fn dwell_relevance_std(grade: u8, noise_eps: f64) -> f64 {
    ((grade as f64).sqrt() + noise_eps) / (MAX_GRADE as f64 + 2.0)
}

/// Combine per-channel actions into the synthesized label.
pub fn combine(clicks: &[u8], dwell: &[f64], spec: &CombineSpec) -> Result<Vec<f64>> {
    if spec.weights.len() != 2 {
        return Err(Error::validation("combine weights must have length 2"));
    }
    if clicks.len() != dwell.len() {
        return Err(Error::DimMismatch {
            expected: clicks.len(),
            got: dwell.len(),
        });
    }
    let (w_click, w_dwell) = (spec.weights[0], spec.weights[1]);
    let out = clicks
        .iter()
        .zip(dwell)
        .map(|(&c, &d)| {
            let c = c as f64;
            match spec.kind {
                CombineKind::WeightedSum => w_click * c + w_dwell * d,
                CombineKind::WeightedProduct => pow00(c, w_click) * pow00(d, w_dwell),
            }
        })
        .collect();
    Ok(out)
}

// 0^0 := 1 so a zero weight disables a channel entirely.
fn pow00(base: f64, exp: f64) -> f64 {
    if exp == 0.0 {
        1.0
    } else {
        base.powf(exp)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum RankingPolicy<'a> {
    ByGradeDesc,
    /// Scores per doc_index, ranked descending with stable tie-break.
    ByScore(&'a [f64]),
    Random(u64),
}

/// Presented order of a query's documents, truncated by the caller if needed.
pub fn initial_ranking(query: &Query, policy: RankingPolicy) -> Vec<usize> {
    let n = query.documents.len();
    let mut order: Vec<usize> = (0..n).collect();
    match policy {
        RankingPolicy::ByGradeDesc => {
            order.sort_by_key(|&i| std::cmp::Reverse(query.documents[i].relevance));
        }
        RankingPolicy::ByScore(scores) => {
            debug_assert_eq!(scores.len(), n);
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        }
        RankingPolicy::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
        }
    }
    order
}

/// Deterministic per-session random substream keyed on (seed, qid, counter).
pub fn session_rng(seed: u64, qid: &str, counter: u64) -> ChaCha8Rng {
    let mut key = fnv1a(qid.as_bytes());
    key = splitmix64(key ^ counter.wrapping_mul(0x9e3779b97f4a7c15));
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ key))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Sample one session for a query against a fixed presented ranking.
pub fn sample_session<R: Rng>(
    query: &Query,
    ranking: &[usize],
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<Session> {
    let n = ranking.len().min(cfg.list_size);
    let ranked_docs: Vec<usize> = ranking[..n].to_vec();
    let mut clicks = vec![0u8; n];
    let mut dwell = vec![0.0f64; n];

    for (slot, &doc_idx) in ranked_docs.iter().enumerate() {
        let position = slot + 1;
        let grade = query.documents[doc_idx].relevance;
        let p_click =
            click_propensity(position, cfg.eta)? * click_relevance_prob(grade, cfg.noise_eps);
        let clicked = Bernoulli::new(p_click).unwrap().sample(rng);
        if clicked {
            clicks[slot] = 1;
            let i = position as f64;
            let delta = Normal::new(2.0 / (i + 2.0).sqrt(), 0.4 / (i + 2.0).sqrt())
                .unwrap()
                .sample(rng);
            let omega = Normal::new(
                dwell_relevance_mean(grade, cfg.noise_eps),
                dwell_relevance_std(grade, cfg.noise_eps),
            )
            .unwrap()
            .sample(rng);
            // Normal tails admit negative draws; dwell time cannot be negative.
            dwell[slot] = (delta * omega).max(0.0);
        }
    }

    let synth = combine(&clicks, &dwell, &cfg.combine)?;
    Ok(Session {
        qid: query.qid.clone(),
        ranked_docs,
        clicks,
        dwell,
        synth,
    })
}

/// Simulate `sessions_per_query` sessions for every query, by-grade presented
/// order. Queries are processed in parallel; each session owns its own
/// deterministic substream.
pub fn simulate_dataset(dataset: &Dataset, cfg: &SimConfig, mode: ExecMode) -> Result<Vec<Session>> {
    cfg.validate()?;
    let per_query: Vec<Result<Vec<Session>>> = map_slice(mode, &dataset.queries, |query| {
        let ranking = initial_ranking(query, RankingPolicy::ByGradeDesc);
        (0..cfg.sessions_per_query)
            .map(|s| {
                let mut rng = session_rng(cfg.seed, &query.qid, s as u64);
                sample_session(query, &ranking, cfg, &mut rng)
            })
            .collect()
    });
    let mut sessions = Vec::with_capacity(dataset.queries.len() * cfg.sessions_per_query);
    for group in per_query {
        sessions.extend(group?);
    }
    Ok(sessions)
}

/// One row per displayed item: `qid \t position \t doc_index \t click \t dwell \t synth`.
pub fn write_sessions<W: Write>(sessions: &[Session], writer: &mut W) -> Result<()> {
    for s in sessions {
        for (slot, &doc_idx) in s.ranked_docs.iter().enumerate() {
            writeln!(
                writer,
                "{}\t{}\t{}\t{}\t{}\t{}",
                s.qid,
                slot + 1,
                doc_idx,
                s.clicks[slot],
                s.dwell[slot],
                s.synth[slot]
            )?;
        }
    }
    Ok(())
}

pub fn read_sessions<R: BufRead>(reader: R) -> Result<Vec<Session>> {
    let mut sessions: Vec<Session> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 6 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse_err = |msg: &str| Error::Parse {
            line: lineno,
            msg: msg.into(),
        };
        let qid = fields[0].to_string();
        let position: usize = fields[1].parse().map_err(|_| parse_err("bad position"))?;
        let doc_index: usize = fields[2].parse().map_err(|_| parse_err("bad doc_index"))?;
        let click: u8 = fields[3].parse().map_err(|_| parse_err("bad click"))?;
        let dwell: f64 = fields[4].parse().map_err(|_| parse_err("bad dwell"))?;
        let synth: f64 = fields[5].parse().map_err(|_| parse_err("bad synth"))?;

        let start_new = position == 1;
        if start_new {
            sessions.push(Session {
                qid: qid.clone(),
                ranked_docs: Vec::new(),
                clicks: Vec::new(),
                dwell: Vec::new(),
                synth: Vec::new(),
            });
        }
        let current = sessions
            .last_mut()
            .ok_or_else(|| parse_err("first row must have position 1"))?;
        if current.qid != qid || current.ranked_docs.len() + 1 != position {
            return Err(parse_err("rows out of order"));
        }
        current.ranked_docs.push(doc_index);
        current.clicks.push(click);
        current.dwell.push(dwell);
        current.synth.push(synth);
    }
    Ok(sessions)
}
