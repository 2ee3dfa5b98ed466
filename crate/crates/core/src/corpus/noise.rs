use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::chunk::Chunk;
use crate::error::{Error, Result};

/// Number of replacements for a noise fraction: `round_half_up(fraction * k)`.
pub fn noise_count(fraction: f64, k: usize) -> usize {
    (fraction * k as f64 + 0.5).floor() as usize
}

/// Replaces `round_half_up(fraction * k)` uniformly chosen positions of
/// `retrieved` with distinct chunks drawn from `noise_pool`. Untouched
/// positions keep their rank.
pub fn inject_noise(
    retrieved: &[Chunk],
    noise_pool: &[Chunk],
    fraction: f64,
    seed: u64,
) -> Result<Vec<Chunk>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("noise fraction {fraction} outside [0, 1]")));
    }
    let k = retrieved.len();
    let n = noise_count(fraction, k).min(k);
    if n == 0 {
        return Ok(retrieved.to_vec());
    }
    if noise_pool.len() < n {
        return Err(Error::Data(format!(
            "noise pool holds {} chunks, {n} replacements requested",
            noise_pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = sample(&mut rng, k, n);
    let picks = sample(&mut rng, noise_pool.len(), n);
    let mut out = retrieved.to_vec();
    for (pos, pick) in positions.iter().zip(picks.iter()) {
        let mut c = noise_pool[pick].clone();
        c.is_noise = true;
        out[pos] = c;
    }
    Ok(out)
}
