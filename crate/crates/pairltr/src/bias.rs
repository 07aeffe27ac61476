//! Position-dependent bias parameters: examination propensities and pairwise
//! trust-bias matrices.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const DEFAULT_FLOOR: f64 = 1e-4;

/// θ, θ⁻ per position plus ε⁺/ε⁻ per ordered position pair. Positions are
/// 1-based at the API surface, stored 0-based. Diagonal ε entries are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasParams {
    pub theta: Vec<f64>,
    pub theta_minus: Vec<f64>,
    pub eps_plus: Vec<Vec<f64>>,
    pub eps_minus: Vec<Vec<f64>>,
}

impl BiasParams {
    /// θ_i = 1/i, θ_i⁻ = 0.5/i, ε⁺ = 0.9, ε⁻ = 0.1.
    pub fn init_default(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::validation("need at least 2 positions"));
        }
        let theta: Vec<f64> = (1..=n).map(|i| 1.0 / i as f64).collect();
        let theta_minus: Vec<f64> = (1..=n).map(|i| 0.5 / i as f64).collect();
        Ok(BiasParams {
            theta,
            theta_minus,
            eps_plus: vec![vec![0.9; n]; n],
            eps_minus: vec![vec![0.1; n]; n],
        })
    }

    /// Uniform values everywhere; useful as a deliberately wrong EM start.
    pub fn init_flat(n: usize, theta: f64, eps_plus: f64, eps_minus: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::validation("need at least 2 positions"));
        }
        Ok(BiasParams {
            theta: vec![theta; n],
            theta_minus: vec![theta * 0.5; n],
            eps_plus: vec![vec![eps_plus; n]; n],
            eps_minus: vec![vec![eps_minus; n]; n],
        })
    }

    pub fn n_positions(&self) -> usize {
        self.theta.len()
    }

    /// θ at 1-based position.
    pub fn theta_at(&self, position: usize) -> f64 {
        self.theta[position - 1]
    }

    pub fn theta_minus_at(&self, position: usize) -> f64 {
        self.theta_minus[position - 1]
    }

    pub fn eps_plus_at(&self, i: usize, j: usize) -> f64 {
        self.eps_plus[i - 1][j - 1]
    }

    pub fn eps_minus_at(&self, i: usize, j: usize) -> f64 {
        self.eps_minus[i - 1][j - 1]
    }

    /// Clamp every parameter into its constraint box. ε⁺ is clamped first so
    /// ε⁻ < ε⁺ always holds afterwards. Idempotent.
    pub fn project(&self, floor: f64) -> BiasParams {
        let clamp01 = |v: f64| v.clamp(floor, 1.0 - floor);
        let n = self.n_positions();
        let mut out = self.clone();
        for p in 0..n {
            out.theta[p] = clamp01(self.theta[p]);
            out.theta_minus[p] = clamp01(self.theta_minus[p]);
            if out.theta_minus[p] > out.theta[p] {
                log::warn!(
                    "theta_minus[{}] = {} exceeds theta[{}] = {}",
                    p + 1,
                    out.theta_minus[p],
                    p + 1,
                    out.theta[p]
                );
            }
        }
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let ep = self.eps_plus[i][j].clamp(2.0 * floor, 1.0 - floor);
                let em = self.eps_minus[i][j].clamp(floor, ep - floor);
                out.eps_plus[i][j] = ep;
                out.eps_minus[i][j] = em;
            }
        }
        out
    }

    /// Incremental mini-batch update: p ← p·(1−α) + p̂·α, then project.
    pub fn blend(&self, estimate: &BiasParams, alpha: f64, floor: f64) -> Result<BiasParams> {
        let n = self.n_positions();
        if estimate.n_positions() != n {
            return Err(Error::DimMismatch {
                expected: n,
                got: estimate.n_positions(),
            });
        }
        let mix = |old: f64, new: f64| old * (1.0 - alpha) + new * alpha;
        let mut out = self.clone();
        for p in 0..n {
            out.theta[p] = mix(self.theta[p], estimate.theta[p]);
            out.theta_minus[p] = mix(self.theta_minus[p], estimate.theta_minus[p]);
        }
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                out.eps_plus[i][j] = mix(self.eps_plus[i][j], estimate.eps_plus[i][j]);
                out.eps_minus[i][j] = mix(self.eps_minus[i][j], estimate.eps_minus[i][j]);
            }
        }
        Ok(out.project(floor))
    }

    /// The §-style ordering constraint 0 < ε⁻ < ε⁺ < 1 plus θ bounds.
    pub fn constraints_hold(&self) -> bool {
        let n = self.n_positions();
        let ok01 = |v: f64| v > 0.0 && v <= 1.0;
        if !self.theta.iter().all(|&t| ok01(t)) {
            return false;
        }
        if !self.theta_minus.iter().all(|&t| (0.0..=1.0).contains(&t)) {
            return false;
        }
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (ep, em) = (self.eps_plus[i][j], self.eps_minus[i][j]);
                if !(0.0 < em && em < ep && ep < 1.0) {
                    return false;
                }
            }
        }
        true
    }

    /// Flat text table: `param \t i \t j \t value` (j = 0 for per-position
    /// parameters).
    pub fn write_table<W: Write>(&self, writer: &mut W) -> Result<()> {
        let n = self.n_positions();
        for p in 0..n {
            writeln!(writer, "theta\t{}\t0\t{}", p + 1, self.theta[p])?;
        }
        for p in 0..n {
            writeln!(writer, "theta_minus\t{}\t0\t{}", p + 1, self.theta_minus[p])?;
        }
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                writeln!(writer, "eps_plus\t{}\t{}\t{}", i + 1, j + 1, self.eps_plus[i][j])?;
            }
        }
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                writeln!(writer, "eps_minus\t{}\t{}\t{}", i + 1, j + 1, self.eps_minus[i][j])?;
            }
        }
        Ok(())
    }

    pub fn read_table<R: BufRead>(reader: R) -> Result<BiasParams> {
        let mut rows: Vec<(String, usize, usize, f64)> = Vec::new();
        let mut n = 0usize;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: "expected 4 tab-separated fields".into(),
                });
            }
            let parse_err = |msg: &str| Error::Parse {
                line: lineno + 1,
                msg: msg.into(),
            };
            let i: usize = fields[1].parse().map_err(|_| parse_err("bad i"))?;
            let j: usize = fields[2].parse().map_err(|_| parse_err("bad j"))?;
            let v: f64 = fields[3].parse().map_err(|_| parse_err("bad value"))?;
            n = n.max(i).max(j);
            rows.push((fields[0].to_string(), i, j, v));
        }
        if n < 2 {
            return Err(Error::validation("bias table has fewer than 2 positions"));
        }
        let mut params = BiasParams::init_default(n)?;
        for (name, i, j, v) in rows {
            match name.as_str() {
                "theta" => params.theta[i - 1] = v,
                "theta_minus" => params.theta_minus[i - 1] = v,
                "eps_plus" => params.eps_plus[i - 1][j - 1] = v,
                "eps_minus" => params.eps_minus[i - 1][j - 1] = v,
                other => return Err(Error::validation(format!("unknown parameter `{other}`"))),
            }
        }
        Ok(params)
    }
}
