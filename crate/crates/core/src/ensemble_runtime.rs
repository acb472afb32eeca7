//! Batch-parallel execution of per-particle work and the resampling
//! exchange.
//!
//! Batches are independent units of work joined at two barriers per
//! assimilation step (weight gather, post-resample scatter). Every stream
//! of randomness is keyed by (seed, purpose, particle slot, window), so the
//! final ensemble is a deterministic function of (seed, config,
//! observations) regardless of the batch count or thread interleaving.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("ensemble layout needs at least one batch and one particle")]
    BadLayout,
    #[error("ancestor index {index} out of range for ensemble of {n}")]
    BadAncestor { index: usize, n: usize },
    #[error("particle {particle}: {message}")]
    Particle { particle: usize, message: String },
}

/// Partition of the particle ensemble into contiguous batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnsembleLayout {
    pub n_particles: usize,
    pub n_batches: usize,
}

impl EnsembleLayout {
    pub fn new(n_particles: usize, n_batches: usize) -> Result<Self, RuntimeError> {
        if n_particles == 0 || n_batches == 0 {
            return Err(RuntimeError::BadLayout);
        }
        Ok(Self {
            n_particles,
            n_batches: n_batches.min(n_particles),
        })
    }

    /// Batch of a particle index; batches partition 0..n_particles.
    pub fn batch_of(&self, particle: usize) -> usize {
        let base = self.n_particles / self.n_batches;
        let rem = self.n_particles % self.n_batches;
        // The first `rem` batches hold base+1 particles.
        let cut = rem * (base + 1);
        if particle < cut {
            particle / (base + 1)
        } else {
            rem + (particle - cut) / base
        }
    }

    /// Contiguous index ranges, one per batch.
    pub fn batch_sizes(&self) -> Vec<usize> {
        let base = self.n_particles / self.n_batches;
        let rem = self.n_particles % self.n_batches;
        (0..self.n_batches)
            .map(|b| if b < rem { base + 1 } else { base })
            .collect()
    }
}

/// Stream purposes; distinct values give statistically independent streams.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const EVOLVE: u64 = 2;
    pub const JITTER: u64 = 3;
    pub const NUDGE: u64 = 4;
    pub const COORD: u64 = 5;
    pub const TRUTH_INIT: u64 = 6;
    pub const TRUTH_EVOLVE: u64 = 7;
    pub const OBS_NOISE: u64 = 8;
}

/// Counter-based reproducible random stream: the generator state is derived
/// from (seed, purpose, stream id, window index) alone, so identical keys
/// replay identical values and resampled copies placed in different slots
/// diverge immediately.
#[derive(Debug, Clone)]
pub struct RandomStream {
    rng: ChaCha8Rng,
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RandomStream {
    pub fn derive(seed: u64, purpose: u64, id: u64, window: u64) -> Self {
        let mut state = seed ^ 0x6a09_e667_f3bc_c908;
        let mix = |v: u64, s: &mut u64| {
            *s ^= v.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            splitmix64(s)
        };
        let _ = mix(purpose, &mut state);
        let _ = mix(id, &mut state);
        let _ = mix(window, &mut state);
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Self {
            rng: ChaCha8Rng::from_seed(key),
        }
    }
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
}

/// Run `work(i, &mut items[i])` for every particle, dispatched batch by
/// batch across the thread pool. The work function must not touch shared
/// state; results are bitwise identical to a serial loop for any batch
/// count. On failure the lowest failing particle index wins.
pub fn for_each_particle<T, F>(
    layout: &EnsembleLayout,
    items: &mut [T],
    work: F,
) -> Result<(), RuntimeError>
where
    T: Send,
    F: Fn(usize, &mut T) -> Result<(), String> + Sync,
{
    debug_assert_eq!(items.len(), layout.n_particles);
    let sizes = layout.batch_sizes();
    let mut chunks: Vec<(usize, &mut [T])> = Vec::with_capacity(sizes.len());
    let mut rest = items;
    let mut offset = 0;
    for size in sizes {
        let (head, tail) = rest.split_at_mut(size);
        chunks.push((offset, head));
        offset += size;
        rest = tail;
    }
    let failure = chunks
        .into_par_iter()
        .filter_map(|(base, chunk)| {
            for (k, item) in chunk.iter_mut().enumerate() {
                if let Err(message) = work(base + k, item) {
                    return Some(RuntimeError::Particle {
                        particle: base + k,
                        message,
                    });
                }
            }
            None
        })
        .min_by_key(|e| match e {
            RuntimeError::Particle { particle, .. } => *particle,
            _ => usize::MAX,
        });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Same dispatch with a second per-particle slot (e.g. an RNG stream).
pub fn for_each_particle2<T, U, F>(
    layout: &EnsembleLayout,
    items: &mut [T],
    extras: &mut [U],
    work: F,
) -> Result<(), RuntimeError>
where
    T: Send,
    U: Send,
    F: Fn(usize, &mut T, &mut U) -> Result<(), String> + Sync,
{
    debug_assert_eq!(items.len(), extras.len());
    let mut pairs: Vec<(&mut T, &mut U)> = items.iter_mut().zip(extras.iter_mut()).collect();
    for_each_particle(layout, &mut pairs, |i, (t, u)| work(i, t, u))
}

/// Replace slot i by a deep copy of its ancestor for every i with
/// `ancestors[i] != i`; identical ancestors stay in place untouched.
/// Returns the number of transfers, which equals |{i : a_i != i}| exactly.
pub fn exchange_resample<T: Clone>(items: &mut [T], ancestors: &[usize]) -> Result<usize, RuntimeError> {
    let n = items.len();
    if let Some(&bad) = ancestors.iter().find(|&&a| a >= n) {
        return Err(RuntimeError::BadAncestor { index: bad, n });
    }
    debug_assert_eq!(ancestors.len(), n);
    let transfers: Vec<(usize, T)> = ancestors
        .iter()
        .enumerate()
        .filter(|(i, &a)| a != *i)
        .map(|(i, &a)| (i, items[a].clone()))
        .collect();
    let count = transfers.len();
    for (i, value) in transfers {
        items[i] = value;
    }
    Ok(count)
}
