//! Brute-force enumeration of the pairwise trust-bias generative model.
//!
//! This is the single source of truth the closed-form E-step must match. It
//! enumerates all hidden states (examination of both items, the relevance
//! relation, and the positivity of the upper item) against the three
//! observable pair outcomes and answers posterior queries by summation.

use rand::Rng;

use crate::error::{Error, Result};

/// Observable outcome for an ordered pair of displayed items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairBucket {
    /// c_i > c_j and c_j > 0.
    BothPositive,
    /// c_i > c_j and c_j = 0.
    LowerZero,
    /// not (c_i > c_j).
    NonPositive,
}

impl PairBucket {
    pub const ALL: [PairBucket; 3] = [
        PairBucket::BothPositive,
        PairBucket::LowerZero,
        PairBucket::NonPositive,
    ];
}

/// Bias and relevance parameters for one ordered position pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairModel {
    pub theta_i: f64,
    pub theta_j: f64,
    pub theta_j_minus: f64,
    pub eps_plus: f64,
    pub eps_minus: f64,
    pub gamma: f64,
    pub beta_i: f64,
}

impl PairModel {
    pub fn validate(&self) -> Result<()> {
        let open01 = |v: f64| v > 0.0 && v < 1.0;
        let all = [
            self.theta_i,
            self.theta_j,
            self.theta_j_minus,
            self.eps_plus,
            self.eps_minus,
            self.gamma,
            self.beta_i,
        ];
        if !all.iter().all(|&v| open01(v)) {
            return Err(Error::validation("all pair-model parameters must lie in (0, 1)"));
        }
        if self.eps_minus >= self.eps_plus {
            return Err(Error::validation("requires eps_minus < eps_plus"));
        }
        Ok(())
    }

    /// The enumeration additionally needs a consistent joint: the relevance
    /// relation implies positivity of the upper item (gamma <= beta_i), and
    /// conditioning on a zero label cannot raise the examination probability
    /// (theta_j_minus <= theta_j).
    pub fn validate_consistent(&self) -> Result<()> {
        self.validate()?;
        if self.gamma > self.beta_i {
            return Err(Error::validation(
                "consistent enumeration requires gamma <= beta_i",
            ));
        }
        if self.theta_j_minus > self.theta_j {
            return Err(Error::validation(
                "consistent enumeration requires theta_j_minus <= theta_j",
            ));
        }
        Ok(())
    }
}

/// One of the 16 raw hidden states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HiddenState {
    pub exam_i: bool,
    pub exam_j: bool,
    /// r_i > r_j
    pub rel_pair: bool,
    /// r_i > 0
    pub rel_pos: bool,
}

/// Full joint over (hidden state, observation bucket).
#[derive(Debug, Clone)]
pub struct JointTable {
    pub entries: Vec<(HiddenState, PairBucket, f64)>,
}

impl JointTable {
    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|(_, _, p)| p).sum()
    }

    pub fn marginal(&self, bucket: PairBucket) -> f64 {
        self.entries
            .iter()
            .filter(|(_, b, _)| *b == bucket)
            .map(|(_, _, p)| p)
            .sum()
    }
}

/// Posterior over hidden states given an observation, with the marginal
/// summaries the EM machinery consumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatePosterior {
    pub p_ee_rpos: f64,
    pub p_ee_rneg: f64,
    pub p_e_only: f64,
    pub p_rest: f64,
    pub p_exam_i: f64,
    pub p_exam_j: f64,
    pub p_rel_pair: f64,
    pub p_rel_i: f64,
}

fn hidden_prior(model: &PairModel, s: HiddenState) -> f64 {
    let pe_i = if s.exam_i { model.theta_i } else { 1.0 - model.theta_i };
    let pe_j = if s.exam_j { model.theta_j } else { 1.0 - model.theta_j };
    // Couple the relevance relation with positivity of the upper item so that
    // both marginals are honored: r_i > r_j forces r_i > 0, and the
    // conditional on the complement is chosen so P(r_i > 0) = beta_i.
    let q = ((model.beta_i - model.gamma) / (1.0 - model.gamma)).clamp(0.0, 1.0);
    let prel = match (s.rel_pair, s.rel_pos) {
        (true, true) => model.gamma,
        (true, false) => 0.0,
        (false, true) => (1.0 - model.gamma) * q,
        (false, false) => (1.0 - model.gamma) * (1.0 - q),
    };
    pe_i * pe_j * prel
}

/// P(c_j > 0 | e_j = 1) implied by theta_j and theta_j_minus.
fn lower_positive_given_exam(model: &PairModel) -> f64 {
    (model.theta_j - model.theta_j_minus) / (model.theta_j * (1.0 - model.theta_j_minus))
}

/// Observation distribution given a hidden state: (both_positive, lower_zero,
/// non_positive).
fn observation_probs(model: &PairModel, s: HiddenState) -> (f64, f64, f64) {
    if !s.exam_i {
        // unexamined upper item has c_i = 0, never a positive pair
        return (0.0, 0.0, 1.0);
    }
    if !s.exam_j {
        // c_j = 0; a positive pair needs c_i > 0, i.e. r_i > 0
        return if s.rel_pos { (0.0, 1.0, 0.0) } else { (0.0, 0.0, 1.0) };
    }
    let eps = if s.rel_pair { model.eps_plus } else { model.eps_minus };
    let z = lower_positive_given_exam(model);
    (z * eps, (1.0 - z) * eps, 1.0 - eps)
}

pub fn joint_table(model: &PairModel) -> Result<JointTable> {
    model.validate_consistent()?;
    let mut entries = Vec::with_capacity(48);
    for &exam_i in &[false, true] {
        for &exam_j in &[false, true] {
            for &rel_pair in &[false, true] {
                for &rel_pos in &[false, true] {
                    let s = HiddenState {
                        exam_i,
                        exam_j,
                        rel_pair,
                        rel_pos,
                    };
                    let prior = hidden_prior(model, s);
                    let (a, b, c) = observation_probs(model, s);
                    entries.push((s, PairBucket::BothPositive, prior * a));
                    entries.push((s, PairBucket::LowerZero, prior * b));
                    entries.push((s, PairBucket::NonPositive, prior * c));
                }
            }
        }
    }
    Ok(JointTable { entries })
}

pub fn posterior(model: &PairModel, bucket: PairBucket) -> Result<StatePosterior> {
    let table = joint_table(model)?;
    let marginal = table.marginal(bucket);
    if marginal <= 0.0 {
        return Err(Error::validation(format!(
            "observation {bucket:?} has zero probability"
        )));
    }
    let mut post = StatePosterior {
        p_ee_rpos: 0.0,
        p_ee_rneg: 0.0,
        p_e_only: 0.0,
        p_rest: 0.0,
        p_exam_i: 0.0,
        p_exam_j: 0.0,
        p_rel_pair: 0.0,
        p_rel_i: 0.0,
    };
    for (s, b, p) in &table.entries {
        if *b != bucket {
            continue;
        }
        let w = p / marginal;
        match (s.exam_i, s.exam_j) {
            (true, true) if s.rel_pair => post.p_ee_rpos += w,
            (true, true) => post.p_ee_rneg += w,
            (true, false) => post.p_e_only += w,
            _ => post.p_rest += w,
        }
        if s.exam_i {
            post.p_exam_i += w;
        }
        if s.exam_j {
            post.p_exam_j += w;
        }
        if s.rel_pair {
            post.p_rel_pair += w;
        }
        if s.rel_pos {
            post.p_rel_i += w;
        }
    }
    Ok(post)
}

/// Sample an observation bucket from the model's marginal distribution.
pub fn sample_bucket<R: Rng>(model: &PairModel, rng: &mut R) -> Result<PairBucket> {
    let table = joint_table(model)?;
    let a = table.marginal(PairBucket::BothPositive);
    let b = table.marginal(PairBucket::LowerZero);
    let u: f64 = rng.gen();
    Ok(if u < a {
        PairBucket::BothPositive
    } else if u < a + b {
        PairBucket::LowerZero
    } else {
        PairBucket::NonPositive
    })
}

/// Draw a model satisfying the consistency constraints (theta_j_minus below
/// theta_j, gamma below beta). Used by tests and benches to exercise the
/// enumeration against closed forms.
pub fn random_consistent_model(rng: &mut impl Rng) -> PairModel {
    let f = 1e-3;
    let theta_i = rng.gen_range(f..1.0 - f);
    let theta_j = rng.gen_range(f..1.0 - f);
    let theta_j_minus = rng.gen_range(f..theta_j);
    let eps_minus = rng.gen_range(f..0.5);
    let eps_plus = rng.gen_range(eps_minus + f..1.0 - f);
    let gamma = rng.gen_range(f..1.0 - 2.0 * f);
    let beta_i = rng.gen_range(gamma..1.0 - f);
    PairModel {
        theta_i,
        theta_j,
        theta_j_minus,
        eps_plus,
        eps_minus,
        gamma,
        beta_i,
    }
}
