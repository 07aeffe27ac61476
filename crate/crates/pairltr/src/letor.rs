//! LETOR/SVMLight-format ranking datasets.
//!
//! On-disk lines look like `2 qid:10 1:0.5 5:1.0 # comment` with 1-based,
//! strictly increasing feature indices. In memory features are dense 0-based
//! vectors padded with zeros.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAX_GRADE: u8 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub features: Vec<f64>,
    pub relevance: u8,
    pub doc_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub qid: String,
    pub documents: Vec<Document>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitTag::Train => write!(f, "train"),
            SplitTag::Valid => write!(f, "valid"),
            SplitTag::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub queries: Vec<Query>,
    pub feature_dim: usize,
    pub split_tag: SplitTag,
}

impl Dataset {
    pub fn n_documents(&self) -> usize {
        self.queries.iter().map(|q| q.documents.len()).sum()
    }
}

/// Parse a LETOR-format stream. `max_feature_hint` raises `feature_dim` when
/// the data itself never touches the trailing features.
pub fn parse_letor<R: BufRead>(reader: R, max_feature_hint: Option<usize>) -> Result<Dataset> {
    struct RawDoc {
        relevance: u8,
        sparse: Vec<(usize, f64)>,
    }

    let mut blocks: Vec<(String, Vec<RawDoc>)> = Vec::new();
    let mut seen_qids: Vec<String> = Vec::new();
    let mut max_index = 0usize;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let content = match line.find('#') {
            Some(pos) => &line[..pos],
            None => &line[..],
        };
        let content = content.trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let grade_tok = tokens.next().unwrap();
        let grade: i64 = grade_tok.parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("expected integer grade, got `{grade_tok}`"),
        })?;
        if !(0..=MAX_GRADE as i64).contains(&grade) {
            return Err(Error::validation(format!(
                "line {lineno}: relevance grade {grade} outside [0, {MAX_GRADE}]"
            )));
        }
        let qid_tok = tokens.next().ok_or_else(|| Error::Parse {
            line: lineno,
            msg: "missing qid field".into(),
        })?;
        let qid = qid_tok.strip_prefix("qid:").ok_or_else(|| Error::Parse {
            line: lineno,
            msg: format!("expected `qid:<id>`, got `{qid_tok}`"),
        })?;
        if qid.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: "empty qid".into(),
            });
        }

        let mut sparse = Vec::new();
        let mut last_index = 0usize;
        for tok in tokens {
            let (idx_str, val_str) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("expected `<idx>:<val>`, got `{tok}`"),
            })?;
            let idx: usize = idx_str.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad feature index `{idx_str}`"),
            })?;
            let val: f64 = val_str.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad feature value `{val_str}`"),
            })?;
            if idx == 0 || idx <= last_index {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("feature indices must be >= 1 and strictly increasing, got {idx}"),
                });
            }
            last_index = idx;
            max_index = max_index.max(idx);
            sparse.push((idx, val));
        }

        let doc = RawDoc {
            relevance: grade as u8,
            sparse,
        };
        match blocks.last_mut() {
            Some((current_qid, docs)) if current_qid == qid => docs.push(doc),
            _ => {
                // Interleaved qid blocks indicate a corrupted file.
                if seen_qids.iter().any(|q| q == qid) {
                    return Err(Error::validation(format!(
                        "line {lineno}: qid {qid} reappears after a different qid"
                    )));
                }
                seen_qids.push(qid.to_string());
                blocks.push((qid.to_string(), vec![doc]));
            }
        }
    }

    if blocks.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let feature_dim = max_index.max(max_feature_hint.unwrap_or(0));
    let queries = blocks
        .into_iter()
        .map(|(qid, docs)| Query {
            qid,
            documents: docs
                .into_iter()
                .enumerate()
                .map(|(doc_index, raw)| {
                    let mut features = vec![0.0; feature_dim];
                    for (idx, val) in raw.sparse {
                        features[idx - 1] = val;
                    }
                    Document {
                        features,
                        relevance: raw.relevance,
                        doc_index,
                    }
                })
                .collect(),
        })
        .collect();

    Ok(Dataset {
        queries,
        feature_dim,
        split_tag: SplitTag::Train,
    })
}

/// Serialize back to LETOR text. Zero features are omitted and floats use the
/// shortest round-trip decimal, so serialize∘parse∘serialize is byte-stable.
pub fn serialize_letor<W: Write>(dataset: &Dataset, writer: &mut W) -> Result<()> {
    for query in &dataset.queries {
        for doc in &query.documents {
            write!(writer, "{} qid:{}", doc.relevance, query.qid)?;
            for (i, &v) in doc.features.iter().enumerate() {
                if v != 0.0 {
                    write!(writer, " {}:{}", i + 1, v)?;
                }
            }
            writeln!(writer)?;
        }
    }
    Ok(())
}

pub fn serialize_letor_string(dataset: &Dataset) -> String {
    let mut buf = Vec::new();
    serialize_letor(dataset, &mut buf).expect("write to Vec cannot fail");
    String::from_utf8(buf).expect("LETOR output is ASCII")
}

/// Deterministic query-level split. Fractions must be positive and sum to 1.
pub fn split_queries(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (ft, fv, fs) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fs <= 0.0 {
        return Err(Error::validation("split fractions must be positive"));
    }
    if (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::validation("split fractions must sum to 1"));
    }
    let n = dataset.queries.len();
    if n < 3 {
        return Err(Error::validation(format!(
            "need at least 3 queries to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n_train = ((ft * n as f64).round() as usize).clamp(1, n - 2);
    let n_valid = ((fv * n as f64).round() as usize).clamp(1, n - n_train - 1);

    let make = |idx: &[usize], tag: SplitTag| Dataset {
        queries: idx.iter().map(|&i| dataset.queries[i].clone()).collect(),
        feature_dim: dataset.feature_dim,
        split_tag: tag,
    };
    Ok((
        make(&order[..n_train], SplitTag::Train),
        make(&order[n_train..n_train + n_valid], SplitTag::Valid),
        make(&order[n_train + n_valid..], SplitTag::Test),
    ))
}
