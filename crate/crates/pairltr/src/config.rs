//! Flat `key = value` experiment configuration with dotted section prefixes.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::em::EmConfig;
use crate::error::{Error, Result};
use crate::losses::{PairLossVariant, PointLossVariant};
use crate::par::ExecMode;
use crate::simulate::{CombineKind, SimConfig};
use crate::train::{LabelSource, LossSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_path: Option<PathBuf>,
    /// Per-feature min-max normalization fitted on the train split.
    pub normalize: bool,
    pub split: (f64, f64, f64),
    pub split_seed: u64,
    pub sim: SimConfig,
    pub em: EmConfig,
    /// Alternate EM and loss-training epochs instead of the default
    /// EM-then-train sequence.
    pub em_interleaved: bool,
    pub hidden: Vec<usize>,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub eval_cutoffs: Vec<usize>,
    pub mode: ExecMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_path: None,
            normalize: false,
            split: (0.8, 0.1, 0.1),
            split_seed: 0,
            sim: SimConfig::default(),
            em: EmConfig::default(),
            em_interleaved: false,
            hidden: vec![32, 16],
            model_seed: 0,
            train: TrainConfig::default(),
            eval_cutoffs: vec![3, 5, 10],
            mode: ExecMode::Parallel,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value `{value}` for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("bad boolean `{value}` for {key}"))),
    }
}

fn loss_name(spec: LossSpec) -> &'static str {
    match spec {
        LossSpec::Pointwise(PointLossVariant::NaiveMse) => "naive_pointwise",
        LossSpec::Pointwise(PointLossVariant::NaiveCe) => "naive_pointwise_ce",
        LossSpec::Pointwise(PointLossVariant::Ipw) => "ipw_pointwise",
        LossSpec::Pairwise(PairLossVariant::Naive) => "naive_pairwise",
        LossSpec::Pairwise(PairLossVariant::IpwPairwise) => "ipw_pairwise",
        LossSpec::Pairwise(PairLossVariant::BayesIpw) => "bayes_ipw",
        LossSpec::Pairwise(PairLossVariant::Opt) => "opt",
    }
}

fn parse_loss(value: &str) -> Result<LossSpec> {
    Ok(match value {
        "naive_pointwise" => LossSpec::Pointwise(PointLossVariant::NaiveMse),
        "naive_pointwise_ce" => LossSpec::Pointwise(PointLossVariant::NaiveCe),
        "ipw_pointwise" => LossSpec::Pointwise(PointLossVariant::Ipw),
        "naive_pairwise" => LossSpec::Pairwise(PairLossVariant::Naive),
        "ipw_pairwise" => LossSpec::Pairwise(PairLossVariant::IpwPairwise),
        "bayes_ipw" => LossSpec::Pairwise(PairLossVariant::BayesIpw),
        "opt" => LossSpec::Pairwise(PairLossVariant::Opt),
        _ => return Err(Error::config(format!("unknown loss variant `{value}`"))),
    })
}

fn label_name(source: LabelSource) -> &'static str {
    match source {
        LabelSource::RelevanceUpperBound => "relevance_upper_bound",
        LabelSource::ClickCategorical => "click_categorical",
        LabelSource::SynthesizedContinuous => "synthesized_continuous",
    }
}

fn parse_labels(value: &str) -> Result<LabelSource> {
    Ok(match value {
        "relevance_upper_bound" => LabelSource::RelevanceUpperBound,
        "click_categorical" => LabelSource::ClickCategorical,
        "synthesized_continuous" => LabelSource::SynthesizedContinuous,
        _ => return Err(Error::config(format!("unknown label source `{value}`"))),
    })
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| parse_num(key, v.trim()))
        .collect()
}

impl RunConfig {
    /// Apply one `key = value` assignment; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "data.path" => self.data_path = Some(PathBuf::from(value)),
            "data.normalize" => self.normalize = parse_bool(key, value)?,
            "split.train" => self.split.0 = parse_num(key, value)?,
            "split.valid" => self.split.1 = parse_num(key, value)?,
            "split.test" => self.split.2 = parse_num(key, value)?,
            "split.seed" => self.split_seed = parse_num(key, value)?,
            "sim.eta" => self.sim.eta = parse_num(key, value)?,
            "sim.noise_eps" => self.sim.noise_eps = parse_num(key, value)?,
            "sim.list_size" => self.sim.list_size = parse_num(key, value)?,
            "sim.sessions_per_query" => self.sim.sessions_per_query = parse_num(key, value)?,
            "sim.seed" => self.sim.seed = parse_num(key, value)?,
            "sim.combine" => {
                self.sim.combine.kind = match value {
                    "weighted_sum" => CombineKind::WeightedSum,
                    "weighted_product" => CombineKind::WeightedProduct,
                    "categorical" => {
                        self.sim.combine.weights = vec![1.0, 0.0];
                        CombineKind::WeightedSum
                    }
                    _ => return Err(Error::config(format!("unknown combine `{value}`"))),
                }
            }
            "sim.w_click" => self.sim.combine.weights[0] = parse_num(key, value)?,
            "sim.w_dwell" => self.sim.combine.weights[1] = parse_num(key, value)?,
            "em.alpha0" => self.em.alpha0 = parse_num(key, value)?,
            "em.alpha_decay" => self.em.alpha_decay_batches = parse_num(key, value)?,
            "em.batch_size" => self.em.batch_size = parse_num(key, value)?,
            "em.epochs" => self.em.epochs = parse_num(key, value)?,
            "em.head_lr" => self.em.head_lr = parse_num(key, value)?,
            "em.seed" => self.em.seed = parse_num(key, value)?,
            "em.floor" => self.em.floor = parse_num(key, value)?,
            "em.interleaved" => self.em_interleaved = parse_bool(key, value)?,
            "model.hidden" => self.hidden = parse_list(key, value)?,
            "model.seed" => self.model_seed = parse_num(key, value)?,
            "train.loss" => self.train.loss = parse_loss(value)?,
            "train.labels" => self.train.label_source = parse_labels(value)?,
            "train.lr" => self.train.lr = parse_num(key, value)?,
            "train.epochs" => self.train.epochs = parse_num(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, value)?,
            "train.loss_cutoff" => self.train.loss_cutoff = parse_num(key, value)?,
            "train.eval_cutoff" => self.train.eval_cutoff = parse_num(key, value)?,
            "train.patience" => self.train.patience = parse_num(key, value)?,
            "train.clip" => {
                self.train.clip = if value == "none" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "train.seed" => self.train.seed = parse_num(key, value)?,
            "train.delta_logged" => self.train.delta_logged = parse_bool(key, value)?,
            "eval.cutoffs" => self.eval_cutoffs = parse_list(key, value)?,
            "run.mode" => {
                self.mode = match value {
                    "parallel" => ExecMode::Parallel,
                    "sequential" => ExecMode::Sequential,
                    _ => return Err(Error::config(format!("unknown mode `{value}`"))),
                }
            }
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Parse a config document on top of the defaults. Lines are
    /// `key = value`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                msg: "expected `key = value`".into(),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Derive all stage seeds from one master seed.
    pub fn apply_master_seed(&mut self, seed: u64) {
        self.split_seed = seed;
        self.sim.seed = seed.wrapping_add(1);
        self.em.seed = seed.wrapping_add(2);
        self.train.seed = seed.wrapping_add(3);
        self.model_seed = seed.wrapping_add(4);
    }

    /// Cross-stage compatibility checks on top of per-stage validation.
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.em.validate()?;
        self.train.validate()?;
        if self.eval_cutoffs.is_empty() || self.eval_cutoffs.contains(&0) {
            return Err(Error::config("eval.cutoffs must be positive"));
        }
        let categorical_labels = self.train.label_source == LabelSource::ClickCategorical
            || self.sim.combine.weights == vec![1.0, 0.0];
        if matches!(
            self.train.loss,
            LossSpec::Pointwise(PointLossVariant::Ipw) | LossSpec::Pointwise(PointLossVariant::NaiveCe)
        ) && !categorical_labels
        {
            return Err(Error::config(
                "pointwise cross-entropy losses need categorical labels: \
                 set train.labels = click_categorical or sim.combine = categorical",
            ));
        }
        Ok(())
    }

    /// Canonical serialization; `parse(serialize(cfg)) == cfg`.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        if let Some(p) = &self.data_path {
            let _ = writeln!(s, "data.path = {}", p.display());
        }
        let _ = writeln!(s, "data.normalize = {}", self.normalize);
        let _ = writeln!(s, "split.train = {}", self.split.0);
        let _ = writeln!(s, "split.valid = {}", self.split.1);
        let _ = writeln!(s, "split.test = {}", self.split.2);
        let _ = writeln!(s, "split.seed = {}", self.split_seed);
        let _ = writeln!(s, "sim.eta = {}", self.sim.eta);
        let _ = writeln!(s, "sim.noise_eps = {}", self.sim.noise_eps);
        let _ = writeln!(s, "sim.list_size = {}", self.sim.list_size);
        let _ = writeln!(s, "sim.sessions_per_query = {}", self.sim.sessions_per_query);
        let _ = writeln!(s, "sim.seed = {}", self.sim.seed);
        let combine = match self.sim.combine.kind {
            CombineKind::WeightedSum => "weighted_sum",
            CombineKind::WeightedProduct => "weighted_product",
        };
        let _ = writeln!(s, "sim.combine = {combine}");
        let _ = writeln!(s, "sim.w_click = {}", self.sim.combine.weights[0]);
        let _ = writeln!(s, "sim.w_dwell = {}", self.sim.combine.weights[1]);
        let _ = writeln!(s, "em.alpha0 = {}", self.em.alpha0);
        let _ = writeln!(s, "em.alpha_decay = {}", self.em.alpha_decay_batches);
        let _ = writeln!(s, "em.batch_size = {}", self.em.batch_size);
        let _ = writeln!(s, "em.epochs = {}", self.em.epochs);
        let _ = writeln!(s, "em.head_lr = {}", self.em.head_lr);
        let _ = writeln!(s, "em.seed = {}", self.em.seed);
        let _ = writeln!(s, "em.floor = {}", self.em.floor);
        let _ = writeln!(s, "em.interleaved = {}", self.em_interleaved);
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(s, "model.hidden = {}", hidden.join(","));
        let _ = writeln!(s, "model.seed = {}", self.model_seed);
        let _ = writeln!(s, "train.loss = {}", loss_name(self.train.loss));
        let _ = writeln!(s, "train.labels = {}", label_name(self.train.label_source));
        let _ = writeln!(s, "train.lr = {}", self.train.lr);
        let _ = writeln!(s, "train.epochs = {}", self.train.epochs);
        let _ = writeln!(s, "train.batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "train.loss_cutoff = {}", self.train.loss_cutoff);
        let _ = writeln!(s, "train.eval_cutoff = {}", self.train.eval_cutoff);
        let _ = writeln!(s, "train.patience = {}", self.train.patience);
        match self.train.clip {
            Some(c) => {
                let _ = writeln!(s, "train.clip = {c}");
            }
            None => {
                let _ = writeln!(s, "train.clip = none");
            }
        }
        let _ = writeln!(s, "train.seed = {}", self.train.seed);
        let _ = writeln!(s, "train.delta_logged = {}", self.train.delta_logged);
        let cutoffs: Vec<String> = self.eval_cutoffs.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "eval.cutoffs = {}", cutoffs.join(","));
        let mode = match self.mode {
            ExecMode::Parallel => "parallel",
            ExecMode::Sequential => "sequential",
        };
        let _ = writeln!(s, "run.mode = {mode}");
        s
    }
}

/// Per-feature min-max statistics fitted on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    pub fn fit(dataset: &crate::letor::Dataset) -> Result<Normalizer> {
        let dim = dataset.feature_dim;
        if dataset.n_documents() == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for q in &dataset.queries {
            for d in &q.documents {
                for (f, &v) in d.features.iter().enumerate() {
                    min[f] = min[f].min(v);
                    max[f] = max[f].max(v);
                }
            }
        }
        Ok(Normalizer { min, max })
    }

    /// Map features into [0, 1]; constant features become 0.
    pub fn apply(&self, dataset: &mut crate::letor::Dataset) {
        for q in &mut dataset.queries {
            for d in &mut q.documents {
                for (f, v) in d.features.iter_mut().enumerate() {
                    let range = self.max[f] - self.min[f];
                    *v = if range > 0.0 { (*v - self.min[f]) / range } else { 0.0 };
                }
            }
        }
    }

    pub fn write<W: std::io::Write>(&self, writer: &mut W) -> Result<()> {
        for (f, (lo, hi)) in self.min.iter().zip(&self.max).enumerate() {
            writeln!(writer, "{}\t{}\t{}", f + 1, lo, hi)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.serialize()).unwrap(), cfg);
    }

    #[test]
    fn parse_with_comments_and_overrides() {
        let text = "\
# experiment
em.alpha0 = 0.1   # smaller steps
train.loss = opt
model.hidden = 64,32,16
";
        let mut cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.em.alpha0, 0.1);
        assert_eq!(cfg.train.loss, LossSpec::Pairwise(PairLossVariant::Opt));
        assert_eq!(cfg.hidden, vec![64, 32, 16]);
        cfg.set("em.alpha0", "0.3").unwrap();
        assert_eq!(cfg.em.alpha0, 0.3);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(
            RunConfig::parse("em.alpha = 0.5"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn incompatibility_checks() {
        let mut cfg = RunConfig::default();
        cfg.set("train.loss", "ipw_pointwise").unwrap();
        // continuous combine + continuous labels: rejected
        assert!(cfg.validate().is_err());
        cfg.set("train.labels", "click_categorical").unwrap();
        assert!(cfg.validate().is_ok());

        let mut cfg = RunConfig::default();
        cfg.set("train.loss", "bayes_ipw").unwrap();
        cfg.set("train.labels", "relevance_upper_bound").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn master_seed_derivation() {
        let mut cfg = RunConfig::default();
        cfg.apply_master_seed(100);
        assert_eq!(cfg.split_seed, 100);
        assert_eq!(cfg.sim.seed, 101);
        assert_eq!(cfg.em.seed, 102);
        assert_eq!(cfg.train.seed, 103);
        assert_eq!(cfg.model_seed, 104);
    }

    #[test]
    fn normalizer_maps_to_unit_range() {
        let text = "1 qid:1 1:2.0 2:5.0\n0 qid:1 1:4.0 2:5.0\n";
        let mut d = crate::letor::parse_letor(text.as_bytes(), None).unwrap();
        let norm = Normalizer::fit(&d).unwrap();
        norm.apply(&mut d);
        assert_eq!(d.queries[0].documents[0].features, vec![0.0, 0.0]);
        assert_eq!(d.queries[0].documents[1].features, vec![1.0, 0.0]);
    }
}
