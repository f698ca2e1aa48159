//! Training loop: class-balanced batches through the embedding head into a
//! proxy loss, optimized with SGD + classical momentum under a linear warmup
//! and exponential decay schedule. Proxies are re-projected onto the unit
//! sphere after every step.

use std::path::Path;

use crate::error::{Error, Result};
use crate::head::EmbeddingHead;
use crate::io::{self, ByteReader};
use crate::loss::{self, LossConfig, ProxyBank};
use crate::margins::MarginMatrix;
use crate::sampler::{Sampler, SamplerConfig};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKP1";

/// Iterations per loss-history entry and per progress record.
pub const LOG_EVERY: u64 = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub warmup_iters: u64,
    /// Per-iteration decay factor applied after warmup.
    pub decay_gamma: f64,
    pub total_iters: u64,
    pub embedding_dim: usize,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub proxy_init_seed: u64,
    pub head_init_seed: u64,
}

/// Decay factor that shrinks the learning rate 100x between the end of
/// warmup and `total_iters`.
pub fn default_decay_gamma(total_iters: u64, warmup_iters: u64) -> f64 {
    let span = total_iters.saturating_sub(warmup_iters);
    if span == 0 {
        1.0
    } else {
        0.01f64.powf(1.0 / span as f64)
    }
}

impl TrainConfig {
    /// lr 0.01, momentum 0.9, warmup of 3000 iterations (capped at
    /// `total_iters`), batches of 75 with 5 samples per class, sigma 20,
    /// margin 0.4, adaptive margins.
    pub fn new(total_iters: u64, embedding_dim: usize) -> Self {
        let warmup_iters = total_iters.min(3000);
        TrainConfig {
            lr0: 0.01,
            momentum: 0.9,
            warmup_iters,
            decay_gamma: default_decay_gamma(total_iters, warmup_iters),
            total_iters,
            embedding_dim,
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            proxy_init_seed: 1,
            head_init_seed: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!(
                "lr0 must be a non-negative number, got {}",
                self.lr0
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return bad(format!(
                "decay_gamma must lie in (0, 1], got {}",
                self.decay_gamma
            ));
        }
        if self.warmup_iters > self.total_iters {
            return bad(format!(
                "warmup_iters {} exceeds total_iters {}",
                self.warmup_iters, self.total_iters
            ));
        }
        if self.embedding_dim < 2 {
            return bad("embedding_dim must be at least 2".into());
        }
        self.loss.validate()
    }
}

/// Learning rate for zero-based iteration `t`.
pub fn lr_at(cfg: &TrainConfig, t: u64) -> f64 {
    if t < cfg.warmup_iters {
        cfg.lr0 * (t + 1) as f64 / cfg.warmup_iters as f64
    } else {
        let steps = (t - cfg.warmup_iters).min(i32::MAX as u64) as i32;
        cfg.lr0 * cfg.decay_gamma.powi(steps)
    }
}

/// Classical momentum: `v = momentum * v + g; p -= lr * v`.
pub fn sgd_momentum_step(
    params: &mut [f32],
    grads: &[f32],
    velocity: &mut [f32],
    lr: f64,
    momentum: f64,
) {
    debug_assert!(params.len() == grads.len() && grads.len() == velocity.len());
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let nv = momentum * f64::from(*v) + f64::from(g);
        *v = nv as f32;
        *p = (f64::from(*p) - lr * nv) as f32;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub head: EmbeddingHead,
    pub proxies: ProxyBank,
    /// Completed iterations.
    pub iteration: u64,
    /// `(iteration, mean loss over the preceding LOG_EVERY iterations)`.
    /// Kept in memory only; not part of the checkpoint file.
    pub loss_history: Vec<(u64, f32)>,
}

impl Checkpoint {
    /// `CKP1 | EMB1 weight | EMB1 bias (1 x D) | EMB1 proxies | u64 iteration`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        io::encode_matrix(&self.head.weight, &mut out)?;
        let bias = Matrix::from_vec(1, self.head.bias.len(), self.head.bias.clone())?;
        io::encode_matrix(&bias, &mut out)?;
        io::encode_matrix(self.proxies.proxies(), &mut out)?;
        out.extend_from_slice(&self.iteration.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let weight = io::decode_matrix(&mut r)?;
        let bias = io::decode_matrix(&mut r)?;
        let proxies = io::decode_matrix(&mut r)?;
        let iteration = r.u64("iteration")?;
        r.finish()?;
        if bias.rows() != 1 {
            return Err(Error::Format(format!(
                "bias has {} rows, expected 1",
                bias.rows()
            )));
        }
        if proxies.cols() != weight.cols() {
            return Err(Error::Format(format!(
                "proxies are {}-d but the head outputs {}-d",
                proxies.cols(),
                weight.cols()
            )));
        }
        let head = EmbeddingHead::from_parts(weight, bias.into_vec())
            .map_err(|e| Error::Format(e.to_string()))?;
        let classes = proxies.rows();
        let proxies = ProxyBank::new(proxies, loss::index_class_ids(classes))?;
        Ok(Checkpoint {
            head,
            proxies,
            iteration,
            loss_history: Vec::new(),
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    io::write_file(path.as_ref(), &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&io::read_file(path.as_ref())?)
}

/// Fresh head and proxies for `classes` classes of `in_dim`-d features.
pub fn init(cfg: &TrainConfig, in_dim: usize, classes: usize) -> (EmbeddingHead, ProxyBank) {
    (
        EmbeddingHead::init(in_dim, cfg.embedding_dim, cfg.head_init_seed),
        ProxyBank::random(classes, cfg.embedding_dim, cfg.proxy_init_seed),
    )
}

/// Progress record emitted every [`LOG_EVERY`] iterations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub iteration: u64,
    pub lr: f64,
    /// Mean of the per-iteration mean losses since the previous record.
    pub loss: f32,
}

struct Velocity {
    weight: Vec<f32>,
    bias: Vec<f32>,
    proxies: Vec<f32>,
}

/// Owns all mutable training state. Use [`Trainer::step`] to drive it one
/// iteration at a time or [`train`] to run the whole schedule.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    features: &'a Matrix,
    distances: Option<&'a Matrix>,
    head: EmbeddingHead,
    proxies: ProxyBank,
    velocity: Velocity,
    sampler: Sampler,
    iteration: u64,
    history: Vec<(u64, f32)>,
    window: (f64, u64),
}

impl<'a> Trainer<'a> {
    pub fn new(
        bundle: &'a io::FeatureBundle,
        margins: Option<&'a MarginMatrix>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let classes = bundle.num_classes();
        let distances = match (cfg.loss.kind, margins) {
            (loss::LossKind::AdaptiveMargin, None) => {
                return Err(Error::Config(
                    "adaptive_margin loss requires a margin matrix".into(),
                ))
            }
            (loss::LossKind::AdaptiveMargin, Some(m)) => {
                if m.num_classes() != classes {
                    return Err(Error::MarginShapeMismatch {
                        rows: m.num_classes(),
                        cols: m.num_classes(),
                        expected: classes,
                    });
                }
                Some(m.distances())
            }
            (_, _) => None,
        };
        let sampler = Sampler::new(cfg.sampler, &bundle.labels, classes)?;
        let (head, proxies) = init(cfg, bundle.feature_dim(), classes);
        let velocity = Velocity {
            weight: vec![0.0; head.weight.as_slice().len()],
            bias: vec![0.0; head.bias.len()],
            proxies: vec![0.0; proxies.proxies().as_slice().len()],
        };
        Ok(Trainer {
            cfg: cfg.clone(),
            features: &bundle.features,
            distances,
            head,
            proxies,
            velocity,
            sampler,
            iteration: 0,
            history: Vec::new(),
            window: (0.0, 0),
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn head(&self) -> &EmbeddingHead {
        &self.head
    }

    pub fn proxies(&self) -> &ProxyBank {
        &self.proxies
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.cfg.total_iters
    }

    /// Runs one iteration; returns a record when a logging window closes.
    pub fn step(&mut self) -> Result<Option<LogRecord>> {
        let t = self.iteration;
        let batch = self.sampler.next_batch();
        let feats = self.features.select_rows(&batch.sample_indices);
        let emb = self.head.forward(&feats)?;
        let out = match loss::compute(
            &emb,
            &self.proxies,
            &batch.labels,
            &self.cfg.loss,
            self.distances,
        ) {
            Ok(out) => out,
            Err(Error::NonFiniteData(_)) => {
                return Err(Error::Divergence {
                    iteration: t,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        if !out.mean_loss.is_finite() {
            return Err(Error::Divergence {
                iteration: t,
                loss: out.mean_loss.into(),
            });
        }
        let (grad_w, grad_b) = self.head.backward(&feats, &out.grad_embeddings)?;

        let lr = lr_at(&self.cfg, t);
        let m = self.cfg.momentum;
        sgd_momentum_step(
            self.head.weight.as_mut_slice(),
            grad_w.as_slice(),
            &mut self.velocity.weight,
            lr,
            m,
        );
        sgd_momentum_step(&mut self.head.bias, &grad_b, &mut self.velocity.bias, lr, m);
        let vp = &mut self.velocity.proxies;
        self.proxies.update(|p| {
            sgd_momentum_step(p.as_mut_slice(), out.grad_proxies.as_slice(), vp, lr, m)
        })?;
        if !self.head.weight.is_finite() || self.head.bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Divergence {
                iteration: t,
                loss: out.mean_loss.into(),
            });
        }

        self.iteration += 1;
        self.window.0 += f64::from(out.mean_loss);
        self.window.1 += 1;
        if self.iteration.is_multiple_of(LOG_EVERY) {
            let mean = (self.window.0 / self.window.1 as f64) as f32;
            self.window = (0.0, 0);
            self.history.push((self.iteration, mean));
            return Ok(Some(LogRecord {
                iteration: self.iteration,
                lr,
                loss: mean,
            }));
        }
        Ok(None)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            head: self.head.clone(),
            proxies: self.proxies.clone(),
            iteration: self.iteration,
            loss_history: self.history.clone(),
        }
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        Checkpoint {
            head: self.head,
            proxies: self.proxies,
            iteration: self.iteration,
            loss_history: self.history,
        }
    }
}

/// Runs the full schedule.
pub fn train(
    bundle: &io::FeatureBundle,
    margins: Option<&MarginMatrix>,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    train_with_progress(bundle, margins, cfg, |_| {})
}

/// Like [`train`], calling `progress` every [`LOG_EVERY`] iterations.
pub fn train_with_progress<F: FnMut(&LogRecord)>(
    bundle: &io::FeatureBundle,
    margins: Option<&MarginMatrix>,
    cfg: &TrainConfig,
    mut progress: F,
) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(bundle, margins, cfg)?;
    while !trainer.is_finished() {
        if let Some(rec) = trainer.step()? {
            progress(&rec);
        }
    }
    Ok(trainer.into_checkpoint())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{FeatureBundle, LabelSet, SplitTag};
    use crate::loss::LossKind;
    use crate::tensor::norm;

    #[test]
    fn lr_schedule() {
        let mut cfg = TrainConfig::new(500_000, 32);
        assert_eq!(cfg.warmup_iters, 3000);
        assert_eq!(lr_at(&cfg, 3000), 0.01);
        assert!((lr_at(&cfg, 0) - 0.01 / 3000.0).abs() < 1e-18);
        assert!((lr_at(&cfg, 2999) - 0.01).abs() < 1e-15);
        let end = lr_at(&cfg, 500_000);
        assert!((end / 0.01 - 0.01).abs() < 1e-9);
        cfg.decay_gamma = 1.0;
        assert_eq!(lr_at(&cfg, 10_000), 0.01);
    }

    #[test]
    fn momentum_examples() {
        let (mut p, mut v) = (vec![5.0f32], vec![0.0f32]);
        sgd_momentum_step(&mut p, &[1.0], &mut v, 1.0, 0.0);
        assert_eq!(p, [4.0]);

        let (mut p, mut v) = (vec![0.0f32], vec![2.0f32]);
        for i in 1..=5 {
            sgd_momentum_step(&mut p, &[0.0], &mut v, 0.1, 0.5);
            assert!((f64::from(v[0]) - 2.0 * 0.5f64.powi(i)).abs() < 1e-7);
        }

        let (mut p, mut v) = (vec![0.0f32], vec![0.0f32]);
        sgd_momentum_step(&mut p, &[1.0], &mut v, 1.0, 0.9);
        sgd_momentum_step(&mut p, &[1.0], &mut v, 1.0, 0.9);
        assert!((p[0] + 2.9).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::new(100, 8);
        ok.validate().unwrap();
        for bad in [
            TrainConfig {
                momentum: 1.0,
                ..ok.clone()
            },
            TrainConfig {
                decay_gamma: 0.0,
                ..ok.clone()
            },
            TrainConfig {
                warmup_iters: 101,
                ..ok.clone()
            },
            TrainConfig {
                lr0: -1.0,
                ..ok.clone()
            },
            TrainConfig {
                embedding_dim: 1,
                ..ok.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    fn tiny_bundle() -> FeatureBundle {
        let classes = 6;
        let per = 4;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for s in 0..per {
                let mut r = vec![0.05f32 * s as f32; 5];
                r[c % 5] += 1.0 + c as f32 * 0.1;
                rows.push(r);
                labels.push(c);
            }
        }
        FeatureBundle::new(
            Matrix::from_rows(&rows).unwrap(),
            LabelSet::new(labels, classes).unwrap(),
            SplitTag::Train,
        )
        .unwrap()
    }

    fn tiny_cfg(total: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(total, 4);
        cfg.warmup_iters = total.min(10);
        cfg.loss = LossConfig::new(LossKind::Lmcl, 20.0, 0.4).unwrap();
        cfg.sampler = SamplerConfig {
            batch_size: 8,
            k: 2,
            seed: 3,
        };
        cfg
    }

    #[test]
    fn zero_iterations_returns_init() {
        let b = tiny_bundle();
        let cfg = tiny_cfg(0);
        let ckpt = train(&b, None, &cfg).unwrap();
        let (head, proxies) = init(&cfg, 5, 6);
        assert_eq!(ckpt.head, head);
        assert_eq!(ckpt.proxies, proxies);
        assert_eq!(ckpt.iteration, 0);
        assert!(ckpt.head.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let b = tiny_bundle();
        let mut cfg = tiny_cfg(150);
        cfg.lr0 = 0.0;
        let ckpt = train(&b, None, &cfg).unwrap();
        let init = train(&b, None, &tiny_cfg(0)).unwrap();
        assert_eq!(ckpt.head, init.head);
        assert_eq!(ckpt.proxies, init.proxies);
    }

    #[test]
    fn proxies_stay_unit_and_runs_repeat() {
        let b = tiny_bundle();
        let cfg = tiny_cfg(250);
        let mut trainer = Trainer::new(&b, None, &cfg).unwrap();
        let mut records = Vec::new();
        while !trainer.is_finished() {
            if let Some(r) = trainer.step().unwrap() {
                records.push(r);
            }
            for row in trainer.proxies().proxies().iter_rows() {
                assert!((norm(row) - 1.0).abs() <= 1e-5);
            }
        }
        assert_eq!(
            records.iter().map(|r| r.iteration).collect::<Vec<_>>(),
            vec![100, 200]
        );
        let a = trainer.into_checkpoint();
        let b2 = train(&b, None, &cfg).unwrap();
        assert_eq!(a, b2);
        assert_eq!(a.to_bytes().unwrap(), b2.to_bytes().unwrap());
    }

    #[test]
    fn adaptive_kind_needs_margins() {
        let b = tiny_bundle();
        let mut cfg = tiny_cfg(5);
        cfg.loss.kind = LossKind::AdaptiveMargin;
        assert!(matches!(
            Trainer::new(&b, None, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let b = tiny_bundle();
        let mut cfg = tiny_cfg(200);
        cfg.lr0 = 1e38;
        cfg.warmup_iters = 0;
        cfg.decay_gamma = 1.0;
        let r = train(&b, None, &cfg);
        assert!(matches!(r, Err(Error::Divergence { .. })), "{r:?}");
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let b = tiny_bundle();
        let ckpt = train(&b, None, &tiny_cfg(20)).unwrap();
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.head, ckpt.head);
        assert_eq!(back.proxies, ckpt.proxies);
        assert_eq!(back.iteration, 20);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
    }
}
