//! Data-parallel helpers with a sequential fallback.
//!
//! All outputs are index-ordered so results are identical regardless of the
//! execution mode. Reductions that feed persisted artifacts must stay
//! sequential folds over the ordered map output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    #[default]
    Parallel,
    Sequential,
}

impl ExecMode {
    /// Active mode after accounting for compile-time support.
    pub fn effective(self) -> ExecMode {
        if cfg!(feature = "parallel") {
            self
        } else {
            ExecMode::Sequential
        }
    }
}

/// Order-preserving map over a slice.
pub fn map_slice<T, U, F>(mode: ExecMode, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match mode.effective() {
        ExecMode::Sequential => items.iter().map(f).collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                items.par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            unreachable!()
        }
    }
}

/// Order-preserving map over an index range.
pub fn map_range<U, F>(mode: ExecMode, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match mode.effective() {
        ExecMode::Sequential => (0..n).map(f).collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            unreachable!()
        }
    }
}

/// Chunked gradient-style accumulation: each chunk produces a partial vector,
/// partials are combined in chunk order so the result does not depend on the
/// execution mode.
pub fn accumulate_chunks<T, F>(
    mode: ExecMode,
    items: &[T],
    chunk_size: usize,
    acc_len: usize,
    f: F,
) -> Vec<f64>
where
    T: Sync,
    F: Fn(&[T], &mut [f64]) + Sync + Send,
{
    let chunk_size = chunk_size.max(1);
    let partials: Vec<Vec<f64>> = match mode.effective() {
        ExecMode::Sequential => items
            .chunks(chunk_size)
            .map(|chunk| {
                let mut acc = vec![0.0; acc_len];
                f(chunk, &mut acc);
                acc
            })
            .collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                items
                    .par_chunks(chunk_size)
                    .map(|chunk| {
                        let mut acc = vec![0.0; acc_len];
                        f(chunk, &mut acc);
                        acc
                    })
                    .collect()
            }
            #[cfg(not(feature = "parallel"))]
            unreachable!()
        }
    };
    let mut total = vec![0.0; acc_len];
    for partial in partials {
        for (t, p) in total.iter_mut().zip(partial) {
            *t += p;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64 * 0.25).collect();
        let a = map_slice(ExecMode::Sequential, &xs, |x| x.sin());
        let b = map_slice(ExecMode::Parallel, &xs, |x| x.sin());
        assert_eq!(a, b);
    }

    #[test]
    fn chunked_accumulation_is_mode_independent() {
        let xs: Vec<f64> = (0..997).map(|i| (i as f64).sqrt()).collect();
        let f = |chunk: &[f64], acc: &mut [f64]| {
            for x in chunk {
                acc[0] += x;
                acc[1] += x * x;
            }
        };
        let a = accumulate_chunks(ExecMode::Sequential, &xs, 64, 2, f);
        let b = accumulate_chunks(ExecMode::Parallel, &xs, 64, 2, f);
        assert_eq!(a, b);
    }
}
