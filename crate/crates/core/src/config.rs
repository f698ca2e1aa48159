//! Flat `key = value` training configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown and repeated
//! keys are errors. `total_iters` and `embedding_dim` are required; every
//! other key falls back to [`TrainConfig::new`].
//!
//! | key | meaning |
//! |-----|---------|
//! | `total_iters` | iterations to run |
//! | `embedding_dim` | output width of the head |
//! | `lr0` | peak learning rate |
//! | `momentum` | classical momentum |
//! | `warmup_iters` | linear warmup length |
//! | `decay_gamma` | per-iteration decay after warmup (default: 100x over the run) |
//! | `loss` | `norm_softmax`, `lmcl` or `adaptive_margin` |
//! | `sigma` | temperature |
//! | `margin` | additive margin |
//! | `temperature_mode` | `multiply` or `divide` |
//! | `batch_size`, `k`, `seed` | sampler |
//! | `proxy_init_seed`, `head_init_seed` | initialization |

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::trainer::{default_decay_gamma, TrainConfig};

const KEYS: &[&str] = &[
    "total_iters",
    "embedding_dim",
    "lr0",
    "momentum",
    "warmup_iters",
    "decay_gamma",
    "loss",
    "sigma",
    "margin",
    "temperature_mode",
    "batch_size",
    "k",
    "seed",
    "proxy_init_seed",
    "head_init_seed",
];

fn parse_pairs(text: &str) -> Result<HashMap<String, String>> {
    let mut pairs = HashMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!(
                "line {}: unknown key {key:?}",
                n + 1
            )));
        }
        if pairs
            .insert(key.to_owned(), value.trim().to_owned())
            .is_some()
        {
            return Err(Error::Config(format!(
                "line {}: duplicate key {key:?}",
                n + 1
            )));
        }
    }
    Ok(pairs)
}

fn take<T: FromStr>(pairs: &mut HashMap<String, String>, key: &str) -> Result<Option<T>> {
    pairs
        .remove(key)
        .map(|v| {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
        })
        .transpose()
}

fn required<T: FromStr>(pairs: &mut HashMap<String, String>, key: &str) -> Result<T> {
    take(pairs, key)?.ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
}

impl TrainConfig {
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut p = parse_pairs(text)?;
        let mut cfg = TrainConfig::new(
            required(&mut p, "total_iters")?,
            required(&mut p, "embedding_dim")?,
        );
        if let Some(v) = take(&mut p, "lr0")? {
            cfg.lr0 = v;
        }
        if let Some(v) = take(&mut p, "momentum")? {
            cfg.momentum = v;
        }
        if let Some(v) = take(&mut p, "warmup_iters")? {
            cfg.warmup_iters = v;
        }
        cfg.decay_gamma = match take(&mut p, "decay_gamma")? {
            Some(v) => v,
            None => default_decay_gamma(cfg.total_iters, cfg.warmup_iters),
        };
        if let Some(v) = take(&mut p, "loss")? {
            cfg.loss.kind = v;
        }
        if let Some(v) = take(&mut p, "sigma")? {
            cfg.loss.sigma = v;
        }
        if let Some(v) = take(&mut p, "margin")? {
            cfg.loss.margin = v;
        }
        if let Some(v) = take(&mut p, "temperature_mode")? {
            cfg.loss.temperature_mode = v;
        }
        if let Some(v) = take(&mut p, "batch_size")? {
            cfg.sampler.batch_size = v;
        }
        if let Some(v) = take(&mut p, "k")? {
            cfg.sampler.k = v;
        }
        if let Some(v) = take(&mut p, "seed")? {
            cfg.sampler.seed = v;
        }
        if let Some(v) = take(&mut p, "proxy_init_seed")? {
            cfg.proxy_init_seed = v;
        }
        if let Some(v) = take(&mut p, "head_init_seed")? {
            cfg.head_init_seed = v;
        }
        debug_assert!(p.is_empty());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_config_str(&text)
    }

    /// Renders every key; parsing the result reproduces `self` exactly.
    pub fn to_config_string(&self) -> String {
        format!(
            "total_iters = {}\nembedding_dim = {}\nlr0 = {:?}\nmomentum = {:?}\nwarmup_iters = {}\n\
             decay_gamma = {:?}\nloss = {}\nsigma = {:?}\nmargin = {:?}\ntemperature_mode = {}\n\
             batch_size = {}\nk = {}\nseed = {}\nproxy_init_seed = {}\nhead_init_seed = {}\n",
            self.total_iters,
            self.embedding_dim,
            self.lr0,
            self.momentum,
            self.warmup_iters,
            self.decay_gamma,
            self.loss.kind,
            self.loss.sigma,
            self.loss.margin,
            self.loss.temperature_mode,
            self.sampler.batch_size,
            self.sampler.k,
            self.sampler.seed,
            self.proxy_init_seed,
            self.head_init_seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::{LossKind, TemperatureMode};

    #[test]
    fn parses_with_defaults() {
        let cfg = TrainConfig::from_config_str(
            "# desk run\ntotal_iters = 2000\nembedding_dim=32\n\nloss = lmcl\nwarmup_iters = 100\ntemperature_mode = divide\n",
        )
        .unwrap();
        assert_eq!(cfg.total_iters, 2000);
        assert_eq!(cfg.embedding_dim, 32);
        assert_eq!(cfg.loss.kind, LossKind::Lmcl);
        assert_eq!(cfg.loss.temperature_mode, TemperatureMode::Divide);
        assert_eq!(cfg.lr0, 0.01);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.sampler.batch_size, 75);
        assert_eq!(cfg.decay_gamma, default_decay_gamma(2000, 100));
    }

    #[test]
    fn round_trips() {
        let mut cfg = TrainConfig::new(1234, 17);
        cfg.lr0 = 0.0123;
        cfg.loss.sigma = 30.0;
        cfg.sampler.seed = u64::MAX;
        assert_eq!(
            TrainConfig::from_config_str(&cfg.to_config_string()).unwrap(),
            cfg
        );
    }

    #[test]
    fn rejects_bad_files() {
        let base = "total_iters = 10\nembedding_dim = 4\n";
        for extra in [
            "bogus = 1\n",
            "lr0 = fast\n",
            "total_iters = 5\n",
            "no equals sign\n",
            "momentum = 1.5\n",
        ] {
            let text = format!("{base}{extra}");
            assert!(
                matches!(TrainConfig::from_config_str(&text), Err(Error::Config(_))),
                "{extra}"
            );
        }
        assert!(TrainConfig::from_config_str("embedding_dim = 4\n").is_err());
    }
}
