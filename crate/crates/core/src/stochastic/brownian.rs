use rayon::prelude::*;

use super::TimeGrid;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Stream};

/// Brownian increments `dW[path][step]`, each a `dim`-vector with variance
/// `dt` per coordinate.
///
/// Path `p` draws from its own keystream, so path `p` of a bundle is the same
/// regardless of how many paths the bundle holds.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianBundle {
    n_paths: usize,
    n_steps: usize,
    dim: usize,
    seed: u64,
    increments: Vec<f64>,
}

pub fn sample_brownian(grid: &TimeGrid, n_paths: usize, dim: usize, seed: u64) -> Result<BrownianBundle> {
    BrownianBundle::sample(grid, n_paths, dim, seed)
}

impl BrownianBundle {
    pub fn sample(grid: &TimeGrid, n_paths: usize, dim: usize, seed: u64) -> Result<Self> {
        Self::sample_range(grid, 0..n_paths, dim, seed)
    }

    /// Samples paths with the given global indices, e.g. `40..50` yields the
    /// same noise as paths 40..50 of a larger bundle.
    pub fn sample_range(grid: &TimeGrid, paths: std::ops::Range<usize>, dim: usize, seed: u64) -> Result<Self> {
        let n_paths = paths.len();
        if n_paths == 0 {
            return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("Brownian dimension must be at least 1".into()));
        }
        let n_steps = grid.n_steps();
        let sqrt_dt = grid.dt().sqrt();
        let stream_seed = derive_seed(seed, "brownian");
        let per_path = n_steps * dim;
        let mut increments = vec![0.0; n_paths * per_path];
        increments.par_chunks_mut(per_path).enumerate().for_each(|(i, chunk)| {
            let mut s = Stream::new(stream_seed, (paths.start + i) as u64);
            for v in chunk.iter_mut() {
                *v = sqrt_dt * s.normal();
            }
        });
        Ok(BrownianBundle {
            n_paths,
            n_steps,
            dim,
            seed,
            increments,
        })
    }

    /// Builds a bundle from explicit increments laid out `[path][step][dim]`.
    pub fn from_increments(
        n_paths: usize,
        n_steps: usize,
        dim: usize,
        seed: u64,
        increments: Vec<f64>,
    ) -> Result<Self> {
        if n_paths == 0 || n_steps == 0 || dim == 0 {
            return Err(Error::InvalidArgument("bundle counts must be positive".into()));
        }
        if increments.len() != n_paths * n_steps * dim {
            return Err(Error::InvalidArgument(format!(
                "expected {} increments, got {}",
                n_paths * n_steps * dim,
                increments.len()
            )));
        }
        Ok(BrownianBundle {
            n_paths,
            n_steps,
            dim,
            seed,
            increments,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Increment over `[t_step, t_{step+1}]` on `path`.
    #[inline]
    pub fn dw(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.n_steps + step) * self.dim;
        &self.increments[o..o + self.dim]
    }

    /// All increments of one path, `[step][dim]`.
    pub fn path(&self, path: usize) -> &[f64] {
        let len = self.n_steps * self.dim;
        &self.increments[path * len..(path + 1) * len]
    }

    /// `W_{t_step}` on `path` (cumulative sum of increments).
    pub fn w_at(&self, path: usize, step: usize) -> Vec<f64> {
        let mut w = vec![0.0; self.dim];
        for k in 0..step {
            for (wi, dwi) in w.iter_mut().zip(self.dw(path, k)) {
                *wi += dwi;
            }
        }
        w
    }

    /// `W_T` on `path`.
    pub fn terminal(&self, path: usize) -> Vec<f64> {
        self.w_at(path, self.n_steps)
    }

    /// Binary fixture dump: little-endian header `n_paths, n_steps, dim, seed`
    /// (u64 each) followed by the increments as row-major f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.increments.len());
        for h in [self.n_paths as u64, self.n_steps as u64, self.dim as u64, self.seed] {
            out.extend_from_slice(&h.to_le_bytes());
        }
        for v in &self.increments {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 {
            return Err(Error::Parse("bundle dump shorter than its header".into()));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().unwrap());
        let (n_paths, n_steps, dim, seed) = (word(0) as usize, word(1) as usize, word(2) as usize, word(3));
        let count = n_paths
            .checked_mul(n_steps)
            .and_then(|v| v.checked_mul(dim))
            .ok_or_else(|| Error::Parse("bundle header overflows".into()))?;
        if bytes.len() != 32 + 8 * count {
            return Err(Error::Parse(format!(
                "bundle body has {} bytes, header implies {}",
                bytes.len() - 32,
                8 * count
            )));
        }
        let increments = bytes[32..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_increments(n_paths, n_steps, dim, seed, increments)
    }
}
