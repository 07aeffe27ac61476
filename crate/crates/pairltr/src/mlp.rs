//! Feed-forward scorer with ELU hidden layers, trained by explicit
//! backpropagation. On top of the shared trunk sit two scalar heads: the
//! ranking score (whose differences drive the pairwise preference gamma) and
//! the pointwise relevance logit beta.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub init_seed: u64,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, init_seed: u64) -> Self {
        MlpSpec {
            input_dim,
            hidden,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::validation("input_dim must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::validation("hidden widths must be nonempty and positive"));
        }
        Ok(())
    }

    /// (in, out) dims of every weight block: trunk layers, then the score and
    /// beta heads.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &w in &self.hidden {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, 1)); // score head
        dims.push((prev, 1)); // beta head
        dims
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| i * o + o).sum()
    }
}

fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

fn elu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        z.exp()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cached activations for one input, consumed by [`Ranker::backward`].
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    input: Vec<f64>,
    /// Pre-activations per trunk layer.
    pre: Vec<Vec<f64>>,
    /// Post-activations per trunk layer.
    post: Vec<Vec<f64>>,
    pub score: f64,
    pub beta_logit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranker {
    pub spec: MlpSpec,
    /// Layer-major flat parameters: row-major weights then biases per layer.
    pub params: Vec<f64>,
}

impl Ranker {
    /// Uniform init in ±sqrt(6 / (fan_in + fan_out)); biases zero.
    pub fn init(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let mut params = Vec::with_capacity(spec.n_params());
        for (fan_in, fan_out) in spec.layer_dims() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.gen_range(-bound..bound));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Ranker { spec, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Zero both output heads; the trunk keeps its initialization.
    pub fn zero_heads(&mut self) {
        let dims = self.spec.layer_dims();
        let trunk_len: usize = dims[..dims.len() - 2]
            .iter()
            .map(|&(i, o)| i * o + o)
            .sum();
        for p in &mut self.params[trunk_len..] {
            *p = 0.0;
        }
    }

    fn check_dim(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.spec.input_dim {
            return Err(Error::DimMismatch {
                expected: self.spec.input_dim,
                got: features.len(),
            });
        }
        Ok(())
    }

    pub fn forward_record(&self, features: &[f64]) -> Result<ForwardRecord> {
        self.check_dim(features)?;
        let dims = self.spec.layer_dims();
        let n_trunk = dims.len() - 2;
        let mut pre = Vec::with_capacity(n_trunk);
        let mut post = Vec::with_capacity(n_trunk);
        let mut offset = 0usize;
        let mut activ: Vec<f64> = features.to_vec();
        for &(fan_in, fan_out) in &dims[..n_trunk] {
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let mut z = vec![0.0; fan_out];
            for o in 0..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut acc = b[o];
                for (wi, xi) in row.iter().zip(&activ) {
                    acc += wi * xi;
                }
                z[o] = acc;
            }
            let a: Vec<f64> = z.iter().map(|&v| elu(v)).collect();
            pre.push(z);
            post.push(a.clone());
            activ = a;
        }
        let head = |offset: usize, fan_in: usize| {
            let w = &self.params[offset..offset + fan_in];
            let b = self.params[offset + fan_in];
            w.iter().zip(&activ).map(|(wi, xi)| wi * xi).sum::<f64>() + b
        };
        let (fan_in, _) = dims[n_trunk];
        let score_off = offset;
        let beta_off = offset + fan_in + 1;
        Ok(ForwardRecord {
            input: features.to_vec(),
            pre,
            post,
            score: head(score_off, fan_in),
            beta_logit: head(beta_off, fan_in),
        })
    }

    /// Ranking score f(u, x).
    pub fn score(&self, features: &[f64]) -> Result<f64> {
        Ok(self.forward_record(features)?.score)
    }

    /// Pairwise preference probability, sigmoid of the score difference. The
    /// tied-scorer construction makes gamma(a, b) + gamma(b, a) = 1 exact.
    pub fn gamma(&self, feat_i: &[f64], feat_j: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.score(feat_i)? - self.score(feat_j)?))
    }

    /// Pointwise positive-relevance probability.
    pub fn beta(&self, features: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.forward_record(features)?.beta_logit))
    }

    /// Accumulate parameter gradients for one input given upstream gradients
    /// on the two head outputs. `grads` must have `n_params()` entries.
    pub fn backward(
        &self,
        record: &ForwardRecord,
        d_score: f64,
        d_beta_logit: f64,
        grads: &mut [f64],
    ) -> Result<()> {
        if grads.len() != self.n_params() {
            return Err(Error::DimMismatch {
                expected: self.n_params(),
                got: grads.len(),
            });
        }
        let dims = self.spec.layer_dims();
        let n_trunk = dims.len() - 2;
        let trunk_len: usize = dims[..n_trunk].iter().map(|&(i, o)| i * o + o).sum();
        let last_width = dims[n_trunk].0;
        let h_last = &record.post[n_trunk - 1];

        // heads
        let mut d_hidden = vec![0.0; last_width];
        let score_off = trunk_len;
        let beta_off = trunk_len + last_width + 1;
        for (upstream, off) in [(d_score, score_off), (d_beta_logit, beta_off)] {
            for k in 0..last_width {
                grads[off + k] += upstream * h_last[k];
                d_hidden[k] += upstream * self.params[off + k];
            }
            grads[off + last_width] += upstream;
        }

        // trunk, reversed
        let mut offsets = Vec::with_capacity(n_trunk);
        let mut offset = 0usize;
        for &(fan_in, fan_out) in &dims[..n_trunk] {
            offsets.push(offset);
            offset += fan_in * fan_out + fan_out;
        }
        let mut upstream = d_hidden;
        for l in (0..n_trunk).rev() {
            let (fan_in, fan_out) = dims[l];
            let off = offsets[l];
            let prev: &[f64] = if l == 0 { &record.input } else { &record.post[l - 1] };
            let mut d_prev = vec![0.0; fan_in];
            for o in 0..fan_out {
                let dz = upstream[o] * elu_grad(record.pre[l][o]);
                let row_off = off + o * fan_in;
                for i in 0..fan_in {
                    grads[row_off + i] += dz * prev[i];
                    d_prev[i] += dz * self.params[row_off + i];
                }
                grads[off + fan_in * fan_out + o] += dz;
            }
            upstream = d_prev;
        }
        Ok(())
    }

    /// Plain SGD with optional global-norm clipping. Non-finite gradients
    /// surface divergence as an error instead of corrupting the parameters.
    pub fn sgd_step(&mut self, grads: &[f64], lr: f64, clip: Option<f64>) -> Result<()> {
        if grads.len() != self.n_params() {
            return Err(Error::DimMismatch {
                expected: self.n_params(),
                got: grads.len(),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradients"));
        }
        let scale = match clip {
            Some(c) => {
                let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (p, g) in self.params.iter_mut().zip(grads) {
            *p -= lr * scale * g;
        }
        Ok(())
    }

    const MAGIC: &'static [u8; 4] = b"PLTR";
    const VERSION: u32 = 1;

    /// Versioned binary container: spec header then the flat parameter array
    /// (layer-major, row-major weights, then biases), little-endian.
    pub fn save<W: Write>(&self, writer: &mut W) -> Result<()> {
        writer.write_all(Self::MAGIC)?;
        writer.write_all(&Self::VERSION.to_le_bytes())?;
        writer.write_all(&(self.spec.input_dim as u32).to_le_bytes())?;
        writer.write_all(&(self.spec.hidden.len() as u32).to_le_bytes())?;
        for &h in &self.spec.hidden {
            writer.write_all(&(h as u32).to_le_bytes())?;
        }
        writer.write_all(&self.spec.init_seed.to_le_bytes())?;
        writer.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for &p in &self.params {
            writer.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load<R: Read>(reader: &mut R) -> Result<Self> {
        let mut u32buf = [0u8; 4];
        let mut u64buf = [0u8; 8];
        let mut magic = [0u8; 4];
        reader.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::validation("not a checkpoint file"));
        }
        reader.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) != Self::VERSION {
            return Err(Error::validation("unsupported checkpoint version"));
        }
        reader.read_exact(&mut u32buf)?;
        let input_dim = u32::from_le_bytes(u32buf) as usize;
        reader.read_exact(&mut u32buf)?;
        let n_hidden = u32::from_le_bytes(u32buf) as usize;
        let mut hidden = Vec::with_capacity(n_hidden);
        for _ in 0..n_hidden {
            reader.read_exact(&mut u32buf)?;
            hidden.push(u32::from_le_bytes(u32buf) as usize);
        }
        reader.read_exact(&mut u64buf)?;
        let init_seed = u64::from_le_bytes(u64buf);
        reader.read_exact(&mut u64buf)?;
        let n_params = u64::from_le_bytes(u64buf) as usize;
        let spec = MlpSpec::new(input_dim, hidden, init_seed);
        if n_params != spec.n_params() {
            return Err(Error::validation("checkpoint parameter count mismatch"));
        }
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            reader.read_exact(&mut u64buf)?;
            params.push(f64::from_le_bytes(u64buf));
        }
        Ok(Ranker { spec, params })
    }

    pub fn save_file(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.save(&mut f)
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        Self::load(&mut f)
    }
}

/// Central finite differences over every parameter; the independent oracle for
/// backpropagation.
pub fn finite_difference_grads<F>(ranker: &Ranker, loss: F, step: f64) -> Vec<f64>
where
    F: Fn(&Ranker) -> f64,
{
    let mut probe = ranker.clone();
    let mut grads = vec![0.0; ranker.n_params()];
    for (k, g) in grads.iter_mut().enumerate() {
        let orig = probe.params[k];
        probe.params[k] = orig + step;
        let up = loss(&probe);
        probe.params[k] = orig - step;
        let down = loss(&probe);
        probe.params[k] = orig;
        *g = (up - down) / (2.0 * step);
    }
    grads
}
