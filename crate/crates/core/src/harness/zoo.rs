//! Random architecture zoo and its fixed splits.

use std::collections::HashSet;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::leakage::{ModelArch, MAX_ARCH_LEN, MIN_ARCH_LEN, N_SYMBOLS};
use crate::nas::check_feasible;
use crate::rng::seeded;

use super::config::ZooConfig;

fn draw(rng: &mut impl Rng) -> ModelArch {
    let depth = rng.random_range(MIN_ARCH_LEN..=MAX_ARCH_LEN);
    let symbols: Vec<u8> = (0..depth).map(|_| rng.random_range(0..N_SYMBOLS as u8)).collect();
    ModelArch::from_symbols(&symbols).expect("depth and symbols in range")
}

/// `n` architectures with uniform depth in [2, 16] and uniform layers.
pub fn generate_zoo(n: usize, seed: u64) -> Result<Vec<ModelArch>> {
    if n == 0 {
        return Err(CoreError::InvalidParam("zoo size must be >= 1".into()));
    }
    let mut rng = seeded(seed, 0x200);
    Ok((0..n).map(|_| draw(&mut rng)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Zoo {
    pub train: Vec<ModelArch>,
    pub val: Vec<ModelArch>,
    pub heldout: Vec<ModelArch>,
}

impl Zoo {
    /// Draws distinct architectures for every split.
    pub fn build(cfg: &ZooConfig, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed, 0x200);
        let mut seen = HashSet::new();
        let mut take = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let a = draw(rng);
                if seen.insert(a.symbols()) {
                    out.push(a);
                }
            }
            out
        };
        let train = take(cfg.n_train, &mut rng);
        let val = take(cfg.n_val, &mut rng);
        let heldout = take(cfg.n_heldout, &mut rng);
        Ok(Self { train, val, heldout })
    }

    /// `n` distinct architectures outside every split that build on the
    /// proxy task and satisfy `accept`. Gives up after a bounded number of
    /// draws.
    pub fn draw_victims(&self, n: usize, seed: u64, mut accept: impl FnMut(&ModelArch) -> Result<bool>) -> Result<Vec<ModelArch>> {
        let mut seen: HashSet<Vec<u8>> = self.train.iter().chain(&self.val).chain(&self.heldout).map(ModelArch::symbols).collect();
        let mut rng = seeded(seed, 0x71C);
        let mut out = Vec::with_capacity(n);
        let mut draws = 0usize;
        while out.len() < n {
            draws += 1;
            if draws > 1_000_000 {
                return Err(CoreError::Infeasible(format!("found only {} of {n} victim architectures", out.len())));
            }
            let a = draw(&mut rng);
            if check_feasible(&a).is_ok() && !seen.contains(&a.symbols()) && accept(&a)? {
                seen.insert(a.symbols());
                out.push(a);
            }
        }
        Ok(out)
    }
}
