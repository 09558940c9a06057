//! Labeled/unlabeled splits and mixed batch composition.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ALLOWED_FRACTIONS: [f64; 5] = [0.05, 0.1, 0.2, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fraction: f64,
    pub repeat_index: usize,
    pub seed: u64,
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
}

impl SplitSpec {
    pub fn len(&self) -> usize {
        self.labeled_ids.len() + self.unlabeled_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// splitmix64 finaliser, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(a << 6)
        .wrapping_add(a >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if ALLOWED_FRACTIONS.contains(&fraction) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "fraction {fraction} is not one of {ALLOWED_FRACTIONS:?}"
        )))
    }
}

pub fn labeled_count(n: usize, fraction: f64) -> usize {
    (fraction * n as f64).round() as usize
}

/// Shuffles `ids` with a seed derived from all three keys and labels the
/// first `round(fraction · N)`.
pub fn generate_split(
    ids: &[String],
    fraction: f64,
    repeat_index: usize,
    base_seed: u64,
) -> Result<SplitSpec> {
    check_fraction(fraction)?;
    if ids.is_empty() {
        return Err(Error::Empty("cannot split an empty id list".into()));
    }
    let seed = mix_seed(mix_seed(base_seed, fraction.to_bits()), repeat_index as u64);
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let unlabeled_ids = shuffled.split_off(labeled_count(ids.len(), fraction));
    Ok(SplitSpec {
        fraction,
        repeat_index,
        seed,
        labeled_ids: shuffled,
        unlabeled_ids,
    })
}

/// Keeps a `fraction` of the unlabeled pool, leaving the labeled pool as is.
pub fn subsample_unlabeled(
    split: &SplitSpec,
    fraction: f64,
    repeat_index: usize,
    base_seed: u64,
) -> Result<SplitSpec> {
    if split.unlabeled_ids.is_empty() {
        return Ok(split.clone());
    }
    let sub = generate_split(&split.unlabeled_ids, fraction, repeat_index, base_seed)?;
    Ok(SplitSpec {
        unlabeled_ids: sub.labeled_ids,
        ..split.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub labeled_share: f64,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            batch_size: 8,
            labeled_share: 0.5,
        }
    }
}

impl BatchSpec {
    pub fn new(batch_size: usize, labeled_share: f64) -> Result<Self> {
        let spec = Self {
            batch_size,
            labeled_share,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "batch size must be even and positive, got {}",
                self.batch_size
            )));
        }
        let n = self.batch_size as f64 * self.labeled_share;
        if !(0.0..=1.0).contains(&self.labeled_share) || (n - n.round()).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "batch size {} times labeled share {} is not a whole number",
                self.batch_size, self.labeled_share
            )));
        }
        Ok(())
    }

    pub fn labeled_per_batch(&self) -> usize {
        (self.batch_size as f64 * self.labeled_share).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchItem {
    pub id: String,
    pub labeled: bool,
}

pub type Batch = Vec<BatchItem>;

/// Draws `count` ids by concatenating fresh shuffles of `pool`.
fn cycle_pool(pool: &[String], count: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut round = pool.to_vec();
        round.shuffle(rng);
        let take = (count - out.len()).min(round.len());
        out.extend(round.into_iter().take(take));
    }
    out
}

/// Splits one epoch into batches with a fixed labeled/unlabeled composition.
///
/// The larger pool is visited exactly once up to padding of the final batch;
/// the smaller one is repeated as often as needed. With no unlabeled pool
/// (or a labeled share of 1) every batch is fully labeled.
pub fn compose_batches(split: &SplitSpec, spec: &BatchSpec, epoch_seed: u64) -> Result<Vec<Batch>> {
    spec.validate()?;
    let mut nl = spec.labeled_per_batch();
    if split.unlabeled_ids.is_empty() {
        nl = spec.batch_size;
    }
    let nu = spec.batch_size - nl;
    if nl > 0 && split.labeled_ids.is_empty() {
        return Err(Error::Empty(
            "batches need labeled ids but the labeled pool is empty".into(),
        ));
    }
    if nu > 0 && split.unlabeled_ids.is_empty() {
        return Err(Error::Empty(
            "batches need unlabeled ids but the unlabeled pool is empty".into(),
        ));
    }
    let batches_for = |pool: usize, per: usize| if per == 0 { 0 } else { pool.div_ceil(per) };
    let n_batches =
        batches_for(split.labeled_ids.len(), nl).max(batches_for(split.unlabeled_ids.len(), nu));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(split.seed, epoch_seed));
    let labeled = cycle_pool(&split.labeled_ids, nl * n_batches, &mut rng);
    let unlabeled = if nu > 0 {
        cycle_pool(&split.unlabeled_ids, nu * n_batches, &mut rng)
    } else {
        Vec::new()
    };
    Ok((0..n_batches)
        .map(|b| {
            let l = labeled[b * nl..(b + 1) * nl].iter().map(|id| BatchItem {
                id: id.clone(),
                labeled: true,
            });
            let u = unlabeled
                .get(b * nu..(b + 1) * nu)
                .unwrap_or(&[])
                .iter()
                .map(|id| BatchItem {
                    id: id.clone(),
                    labeled: false,
                });
            l.chain(u).collect()
        })
        .collect())
}
