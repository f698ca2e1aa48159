//! Class-balanced batch sampling.
//!
//! Each batch picks `batch_size / k` distinct classes uniformly at random and
//! then `k` samples from each. Classes with fewer than `k` samples are drawn
//! with replacement.
//!
//! The random stream is ChaCha8 (a counter-based generator) seeded from the
//! 64-bit config seed through `SeedableRng::seed_from_u64`. The batch stream
//! is a pure function of the seed, the config and the label list.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub batch_size: usize,
    /// Samples per class.
    pub k: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            batch_size: 75,
            k: 5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn classes_per_batch(&self) -> usize {
        self.batch_size / self.k
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.k == 0 || self.batch_size == 0 {
            return Err(Error::Config("batch_size and k must be positive".into()));
        }
        if !self.batch_size.is_multiple_of(self.k) {
            return Err(Error::Config(format!(
                "batch_size {} is not divisible by k {}",
                self.batch_size, self.k
            )));
        }
        if self.classes_per_batch() > num_classes {
            return Err(Error::Config(format!(
                "batch needs {} classes but only {num_classes} exist",
                self.classes_per_batch()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Row indices into the training bundle.
    pub sample_indices: Vec<usize>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Sampler {
    config: SamplerConfig,
    members: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
    drawn: u64,
    class_scratch: Vec<usize>,
    member_scratch: Vec<usize>,
}

impl Sampler {
    /// `labels[i]` is the class of training row `i`; classes are `0..num_classes`.
    pub fn new(config: SamplerConfig, labels: &[usize], num_classes: usize) -> Result<Self> {
        config.validate(num_classes)?;
        let mut members = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            let slot = members.get_mut(l).ok_or(Error::InvalidLabel {
                label: l,
                classes: num_classes,
            })?;
            slot.push(i);
        }
        if let Some(c) = members.iter().position(Vec::is_empty) {
            return Err(Error::Config(format!(
                "class {c} has no samples to draw from"
            )));
        }
        Ok(Sampler {
            config,
            members,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            drawn: 0,
            class_scratch: (0..num_classes).collect(),
            member_scratch: Vec::new(),
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    /// Number of batches produced since construction or the last reseed.
    pub fn batches_drawn(&self) -> u64 {
        self.drawn
    }

    /// Restarts the stream from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.config.seed = seed;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.drawn = 0;
        let n = self.class_scratch.len();
        self.class_scratch.clear();
        self.class_scratch.extend(0..n);
    }

    pub fn next_batch(&mut self) -> Batch {
        let per_batch = self.config.classes_per_batch();
        let k = self.config.k;
        let mut batch = Batch {
            sample_indices: Vec::with_capacity(self.config.batch_size),
            labels: Vec::with_capacity(self.config.batch_size),
        };

        // partial Fisher-Yates over a fresh identity permutation
        let n = self.class_scratch.len();
        for (i, c) in self.class_scratch.iter_mut().enumerate() {
            *c = i;
        }
        for i in 0..per_batch {
            let j = self.rng.random_range(i..n);
            self.class_scratch.swap(i, j);
        }

        for &class in &self.class_scratch[..per_batch] {
            let members = &self.members[class];
            if members.len() >= k {
                self.member_scratch.clear();
                self.member_scratch.extend_from_slice(members);
                for i in 0..k {
                    let j = self.rng.random_range(i..members.len());
                    self.member_scratch.swap(i, j);
                }
                batch
                    .sample_indices
                    .extend_from_slice(&self.member_scratch[..k]);
            } else {
                for _ in 0..k {
                    batch
                        .sample_indices
                        .push(members[self.rng.random_range(0..members.len())]);
                }
            }
            batch.labels.extend(std::iter::repeat_n(class, k));
        }
        self.drawn += 1;
        batch
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashMap, HashSet};

    fn labels(classes: usize, per_class: usize) -> Vec<usize> {
        (0..classes * per_class).map(|i| i % classes).collect()
    }

    fn check_batch(b: &Batch, cfg: &SamplerConfig, labels: &[usize]) {
        assert_eq!(b.sample_indices.len(), cfg.batch_size);
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for (&i, &l) in b.sample_indices.iter().zip(&b.labels) {
            assert_eq!(labels[i], l);
            *counts.entry(l).or_default() += 1;
        }
        assert_eq!(counts.len(), cfg.classes_per_batch());
        assert!(counts.values().all(|&c| c == cfg.k));
    }

    #[test]
    fn default_batch_shape() {
        let cfg = SamplerConfig::default();
        let l = labels(40, 8);
        let mut s = Sampler::new(cfg, &l, 40).unwrap();
        for _ in 0..50 {
            let b = s.next_batch();
            check_batch(&b, &cfg, &l);
            // >= k members: no repeats within a class
            assert_eq!(b.sample_indices.iter().collect::<HashSet<_>>().len(), 75);
        }
    }

    #[test]
    fn small_class_uses_replacement() {
        let cfg = SamplerConfig {
            batch_size: 10,
            k: 5,
            seed: 9,
        };
        // class 0 has 3 samples, class 1 has 6
        let l = vec![0, 0, 0, 1, 1, 1, 1, 1, 1];
        let mut s = Sampler::new(cfg, &l, 2).unwrap();
        let b = s.next_batch();
        check_batch(&b, &cfg, &l);
        let zeros: Vec<_> = b
            .sample_indices
            .iter()
            .zip(&b.labels)
            .filter(|(_, &l)| l == 0)
            .collect();
        assert_eq!(zeros.len(), 5);
        assert!(zeros.iter().all(|(&i, _)| i < 3));
    }

    #[test]
    fn determinism_and_reseed() {
        let cfg = SamplerConfig {
            batch_size: 20,
            k: 4,
            seed: 77,
        };
        let l = labels(12, 6);
        let mut a = Sampler::new(cfg, &l, 12).unwrap();
        let first: Vec<Batch> = (0..3).map(|_| a.next_batch()).collect();
        let mut b = Sampler::new(cfg, &l, 12).unwrap();
        assert_eq!(first, (0..3).map(|_| b.next_batch()).collect::<Vec<_>>());

        a.next_batch();
        a.reseed(77);
        assert_eq!(a.batches_drawn(), 0);
        assert_eq!(first, (0..3).map(|_| a.next_batch()).collect::<Vec<_>>());

        let mut c = Sampler::new(SamplerConfig { seed: 5, ..cfg }, &l, 12).unwrap();
        c.reseed(77);
        assert_eq!(first[0], c.next_batch());
    }

    #[test]
    fn different_seeds_differ() {
        let l = labels(30, 6);
        let mut same = 0;
        for s in 0..100u64 {
            let first = |seed| {
                Sampler::new(
                    SamplerConfig {
                        batch_size: 25,
                        k: 5,
                        seed,
                    },
                    &l,
                    30,
                )
                .unwrap()
                .next_batch()
            };
            if first(2 * s) == first(2 * s + 1) {
                same += 1;
            }
        }
        assert_eq!(same, 0);
    }

    #[test]
    fn class_frequencies_are_near_uniform() {
        let cfg = SamplerConfig {
            batch_size: 75,
            k: 5,
            seed: 2024,
        };
        let l = labels(50, 10);
        let mut s = Sampler::new(cfg, &l, 50).unwrap();
        let mut counts = vec![0usize; 50];
        let batches = 10_000;
        for _ in 0..batches {
            let b = s.next_batch();
            for chunk in b.labels.chunks(5) {
                counts[chunk[0]] += 1;
            }
        }
        let expected = batches as f64 * 15.0 / 50.0;
        for &c in &counts {
            assert!(
                (c as f64 - expected).abs() <= 0.2 * expected,
                "{c} vs {expected}"
            );
        }
    }

    #[test]
    fn config_errors() {
        let l = labels(4, 5);
        let bad = |batch_size, k| {
            Sampler::new(
                SamplerConfig {
                    batch_size,
                    k,
                    seed: 0,
                },
                &l,
                4,
            )
        };
        assert!(matches!(bad(10, 3), Err(Error::Config(_))));
        assert!(matches!(bad(25, 5), Err(Error::Config(_))));
        assert!(matches!(bad(10, 0), Err(Error::Config(_))));
        assert!(bad(20, 5).is_ok());
    }
}
