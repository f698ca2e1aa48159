//! Proxy-based softmax losses with forward values and analytic gradients.
//!
//! All three losses share one implementation. For a sample `x` with label
//! `y`, proxies `p_z` and cosines `c_z = x . p_z`:
//!
//! ```text
//! positive logit   s(c_y - m)
//! negative logits  s(c_z + (1 - c_z) * d_yz)        for z != y
//! loss             logsumexp(logits) - positive logit
//! ```
//!
//! where `s` applies the temperature. The normalized softmax loss is the case
//! `m = 0, d = 0`, the large-margin cosine loss is the case `d = 0`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{self, Matrix};

/// Tolerance on proxy row norms.
pub const PROXY_NORM_TOL: f64 = 1e-5;

const RENORMALIZE_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    NormSoftmax,
    Lmcl,
    AdaptiveMargin,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [
        LossKind::NormSoftmax,
        LossKind::Lmcl,
        LossKind::AdaptiveMargin,
    ];
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::NormSoftmax => "norm_softmax",
            LossKind::Lmcl => "lmcl",
            LossKind::AdaptiveMargin => "adaptive_margin",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "norm_softmax" => Ok(LossKind::NormSoftmax),
            "lmcl" => Ok(LossKind::Lmcl),
            "adaptive_margin" => Ok(LossKind::AdaptiveMargin),
            other => Err(Error::Config(format!(
                "unknown loss kind {other:?} (expected norm_softmax, lmcl or adaptive_margin)"
            ))),
        }
    }
}

/// How the temperature is applied to a cosine logit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemperatureMode {
    /// `sigma * cos`
    Multiply,
    /// `cos / sigma`
    Divide,
}

impl fmt::Display for TemperatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemperatureMode::Multiply => "multiply",
            TemperatureMode::Divide => "divide",
        })
    }
}

impl FromStr for TemperatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiply" => Ok(TemperatureMode::Multiply),
            "divide" => Ok(TemperatureMode::Divide),
            other => Err(Error::Config(format!(
                "unknown temperature mode {other:?} (expected multiply or divide)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Temperature scale.
    pub sigma: f32,
    /// Additive margin on the positive cosine.
    pub margin: f32,
    pub temperature_mode: TemperatureMode,
}

impl Default for LossConfig {
    /// `sigma = 20`, `m = 0.4`, multiplicative temperature, adaptive margins.
    fn default() -> Self {
        LossConfig {
            kind: LossKind::AdaptiveMargin,
            sigma: 20.0,
            margin: 0.4,
            temperature_mode: TemperatureMode::Multiply,
        }
    }
}

impl LossConfig {
    pub fn new(kind: LossKind, sigma: f32, margin: f32) -> Result<Self> {
        let cfg = LossConfig {
            kind,
            sigma,
            margin,
            temperature_mode: TemperatureMode::Multiply,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_temperature_mode(mut self, mode: TemperatureMode) -> Self {
        self.temperature_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Config(format!(
                "margin must lie in [0, 1), got {}",
                self.margin
            )));
        }
        Ok(())
    }

    /// The margin actually applied: zero for the plain normalized softmax.
    pub fn effective_margin(&self) -> f32 {
        match self.kind {
            LossKind::NormSoftmax => 0.0,
            _ => self.margin,
        }
    }

    /// Derivative of [`scaled_logit`] with respect to the cosine.
    pub fn logit_scale(&self) -> f64 {
        let sigma = f64::from(self.sigma);
        match self.temperature_mode {
            TemperatureMode::Multiply => sigma,
            TemperatureMode::Divide => 1.0 / sigma,
        }
    }
}

pub fn scaled_logit(cos: f64, cfg: &LossConfig) -> f64 {
    let sigma = f64::from(cfg.sigma);
    match cfg.temperature_mode {
        TemperatureMode::Multiply => sigma * cos,
        TemperatureMode::Divide => cos / sigma,
    }
}

/// One learnable unit-norm vector per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyBank {
    proxies: Matrix,
    class_ids: Vec<String>,
}

impl ProxyBank {
    /// Wraps existing proxies. Rows must already be unit norm.
    pub fn new(proxies: Matrix, class_ids: Vec<String>) -> Result<Self> {
        if class_ids.len() != proxies.rows() {
            return Err(Error::DimMismatch(format!(
                "{} class ids for {} proxies",
                class_ids.len(),
                proxies.rows()
            )));
        }
        let mut seen = HashSet::with_capacity(class_ids.len());
        if let Some(dup) = class_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvariantViolation(format!(
                "duplicate class id {dup:?}"
            )));
        }
        for (i, row) in proxies.iter_rows().enumerate() {
            let n = tensor::norm(row);
            if !row.iter().all(|v| v.is_finite()) || (n - 1.0).abs() > PROXY_NORM_TOL {
                return Err(Error::InvariantViolation(format!(
                    "proxy {i} has norm {n}, expected 1"
                )));
            }
        }
        Ok(ProxyBank { proxies, class_ids })
    }

    /// Normalizes the rows of `proxies` and wraps them.
    pub fn from_unnormalized(mut proxies: Matrix, class_ids: Vec<String>) -> Result<Self> {
        proxies.normalize_rows()?;
        Self::new(proxies, class_ids)
    }

    /// Standard normal rows, L2-normalized.
    pub fn random(classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(classes, dim);
        for i in 0..classes {
            loop {
                for v in m.row_mut(i) {
                    *v = StandardNormal.sample(&mut rng);
                }
                if let Ok(n) = tensor::l2_normalize(m.row(i)) {
                    m.row_mut(i).copy_from_slice(&n);
                    break;
                }
            }
        }
        ProxyBank {
            proxies: m,
            class_ids: index_class_ids(classes),
        }
    }

    pub fn proxies(&self) -> &Matrix {
        &self.proxies
    }

    pub fn class_ids(&self) -> &[String] {
        &self.class_ids
    }

    pub fn num_classes(&self) -> usize {
        self.proxies.rows()
    }

    pub fn dim(&self) -> usize {
        self.proxies.cols()
    }

    /// Applies `update` to the raw proxy matrix, then re-projects every row
    /// onto the unit sphere.
    pub fn update<F: FnOnce(&mut Matrix)>(&mut self, update: F) -> Result<()> {
        update(&mut self.proxies);
        for i in 0..self.proxies.rows() {
            let row = self.proxies.row_mut(i);
            // rows already on the sphere are left bit-identical
            if (tensor::norm(row) - 1.0).abs() > RENORMALIZE_TOL {
                let n = tensor::l2_normalize(row)?;
                row.copy_from_slice(&n);
            }
        }
        Ok(())
    }

    pub fn into_parts(self) -> (Matrix, Vec<String>) {
        (self.proxies, self.class_ids)
    }
}

/// Class ids `"0"`, `"1"`, ... for data that carries no names.
pub fn index_class_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

/// Loss values and gradients of `mean_loss`.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub mean_loss: f32,
    pub per_sample_loss: Vec<f32>,
    pub grad_embeddings: Matrix,
    pub grad_proxies: Matrix,
}

/// Normalized softmax: no margin, no modality distances.
pub fn norm_softmax(
    embeddings: &Matrix,
    proxies: &ProxyBank,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    margin_softmax(embeddings, proxies, labels, cfg, 0.0, None)
}

/// Large-margin cosine loss: constant margin on the positive cosine.
pub fn lmcl(
    embeddings: &Matrix,
    proxies: &ProxyBank,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossOutput> {
    margin_softmax(
        embeddings,
        proxies,
        labels,
        cfg,
        f64::from(cfg.margin),
        None,
    )
}

/// Large-margin cosine loss with per-negative adaptive margins taken from the
/// `C x C` distance matrix `distances` (entries in [0, 1], row = label).
pub fn adaptive_margin_loss(
    embeddings: &Matrix,
    proxies: &ProxyBank,
    labels: &[usize],
    cfg: &LossConfig,
    distances: &Matrix,
) -> Result<LossOutput> {
    let c = proxies.num_classes();
    if distances.shape() != (c, c) {
        return Err(Error::MarginShapeMismatch {
            rows: distances.rows(),
            cols: distances.cols(),
            expected: c,
        });
    }
    if let Some(bad) = distances
        .as_slice()
        .iter()
        .find(|v| !(0.0..=1.0).contains(*v))
    {
        return Err(Error::InvariantViolation(format!(
            "margin entry {bad} outside [0, 1]"
        )));
    }
    margin_softmax(
        embeddings,
        proxies,
        labels,
        cfg,
        f64::from(cfg.margin),
        Some(distances),
    )
}

/// Dispatches on `cfg.kind`. `distances` is required for the adaptive kind
/// and ignored otherwise.
pub fn compute(
    embeddings: &Matrix,
    proxies: &ProxyBank,
    labels: &[usize],
    cfg: &LossConfig,
    distances: Option<&Matrix>,
) -> Result<LossOutput> {
    match cfg.kind {
        LossKind::NormSoftmax => norm_softmax(embeddings, proxies, labels, cfg),
        LossKind::Lmcl => lmcl(embeddings, proxies, labels, cfg),
        LossKind::AdaptiveMargin => {
            let d = distances.ok_or_else(|| {
                Error::Config("adaptive_margin loss needs a margin matrix".into())
            })?;
            adaptive_margin_loss(embeddings, proxies, labels, cfg, d)
        }
    }
}

fn margin_softmax(
    embeddings: &Matrix,
    bank: &ProxyBank,
    labels: &[usize],
    cfg: &LossConfig,
    margin: f64,
    distances: Option<&Matrix>,
) -> Result<LossOutput> {
    cfg.validate()?;
    let proxies = bank.proxies();
    let (batch, dim) = embeddings.shape();
    let classes = proxies.rows();
    if proxies.cols() != dim {
        return Err(Error::DimMismatch(format!(
            "embeddings have {dim} columns, proxies have {}",
            proxies.cols()
        )));
    }
    if labels.len() != batch {
        return Err(Error::DimMismatch(format!(
            "{} labels for {batch} embeddings",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidLabel { label, classes });
    }

    let scale = cfg.logit_scale();
    let inv_batch = if batch == 0 { 0.0 } else { 1.0 / batch as f64 };
    let mut grad_x = vec![0.0f64; batch * dim];
    let mut grad_p = vec![0.0f64; classes * dim];
    let mut per_sample = Vec::with_capacity(batch);
    let mut logits = vec![0.0f64; classes];
    let mut slopes = vec![0.0f64; classes];

    for (i, &y) in labels.iter().enumerate() {
        let x = embeddings.row(i);
        let d_row = distances.map(|d| d.row(y));
        for z in 0..classes {
            let cos = tensor::dot(x, proxies.row(z)).clamp(-1.0, 1.0);
            let (q, dq) = if z == y {
                (cos - margin, 1.0)
            } else {
                let d = d_row.map_or(0.0, |r| f64::from(r[z]));
                (cos + (1.0 - cos) * d, 1.0 - d)
            };
            logits[z] = scaled_logit(q, cfg);
            slopes[z] = scale * dq;
        }
        let lse = tensor::log_sum_exp(&logits);
        per_sample.push(lse - logits[y]);

        let gx = &mut grad_x[i * dim..(i + 1) * dim];
        for z in 0..classes {
            let prob = (logits[z] - lse).exp();
            let g = (prob - if z == y { 1.0 } else { 0.0 }) * slopes[z] * inv_batch;
            if g == 0.0 {
                continue;
            }
            let p = proxies.row(z);
            let gp = &mut grad_p[z * dim..(z + 1) * dim];
            for k in 0..dim {
                gx[k] += g * f64::from(p[k]);
                gp[k] += g * f64::from(x[k]);
            }
        }
    }

    let per_sample_loss: Vec<f32> = per_sample.iter().map(|&l| l as f32).collect();
    let mean_loss = (per_sample_loss.iter().map(|&l| f64::from(l)).sum::<f64>() * inv_batch) as f32;
    let to_matrix = |rows, v: Vec<f64>| {
        Matrix::from_vec(rows, dim, v.into_iter().map(|g| g as f32).collect())
            .expect("gradient buffer sized from shape")
    };
    let out = LossOutput {
        mean_loss,
        per_sample_loss,
        grad_embeddings: to_matrix(batch, grad_x),
        grad_proxies: to_matrix(classes, grad_p),
    };
    if !out.mean_loss.is_finite()
        || !out.grad_embeddings.is_finite()
        || !out.grad_proxies.is_finite()
    {
        return Err(Error::NonFiniteData("loss output".into()));
    }
    Ok(out)
}
