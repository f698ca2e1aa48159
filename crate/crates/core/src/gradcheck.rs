//! Finite-difference verification of the analytic loss gradients.
//!
//! The reference loss here is written independently of [`crate::loss`]: it
//! works on `f64` copies of the inputs and evaluates each sample as
//! `ln(1 + sum_z exp(l_z - l_y))` instead of a log-sum-exp.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::head::EmbeddingHead;
use crate::loss::{self, index_class_ids, LossConfig, LossKind, ProxyBank, TemperatureMode};
use crate::tensor::Matrix;

/// Central-difference step. At `sigma = 20` a step of 1e-3 carries a
/// truncation error of order 1e-4 on its own.
pub const FD_STEP: f64 = 1e-4;

/// Gradient entries smaller than this (in absolute value, on both sides) are
/// compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradCheckShape {
    pub batch: usize,
    pub dim: usize,
    pub classes: usize,
}

impl Default for GradCheckShape {
    fn default() -> Self {
        GradCheckShape {
            batch: 8,
            dim: 16,
            classes: 10,
        }
    }
}

/// A random loss problem: unit-norm embeddings and proxies, labels, and a
/// symmetric distance matrix with zero diagonal.
#[derive(Clone, Debug)]
pub struct Instance {
    pub embeddings: Matrix,
    pub proxies: ProxyBank,
    pub labels: Vec<usize>,
    pub distances: Matrix,
}

pub fn random_unit_rows<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        loop {
            for v in m.row_mut(i) {
                *v = StandardNormal.sample(rng);
            }
            if let Ok(n) = crate::tensor::l2_normalize(m.row(i)) {
                m.row_mut(i).copy_from_slice(&n);
                break;
            }
        }
    }
    m
}

pub fn random_instance(shape: GradCheckShape, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embeddings = random_unit_rows(&mut rng, shape.batch, shape.dim);
    let proxies = ProxyBank::new(
        random_unit_rows(&mut rng, shape.classes, shape.dim),
        index_class_ids(shape.classes),
    )
    .expect("rows are unit norm");
    let labels = (0..shape.batch)
        .map(|_| rng.random_range(0..shape.classes))
        .collect();
    let mut distances = Matrix::zeros(shape.classes, shape.classes);
    for y in 0..shape.classes {
        for z in y + 1..shape.classes {
            let d: f32 = rng.random();
            distances.set(y, z, d);
            distances.set(z, y, d);
        }
    }
    Instance {
        embeddings,
        proxies,
        labels,
        distances,
    }
}

/// Mean loss evaluated directly from the formula in `f64`.
pub fn reference_mean_loss(
    x: &[f64],
    p: &[f64],
    labels: &[usize],
    distances: &Matrix,
    dim: usize,
    cfg: &LossConfig,
) -> f64 {
    let classes = p.len() / dim;
    let sigma = f64::from(cfg.sigma);
    let temp = |v: f64| match cfg.temperature_mode {
        TemperatureMode::Multiply => v * sigma,
        TemperatureMode::Divide => v / sigma,
    };
    let (margin, use_d) = match cfg.kind {
        LossKind::NormSoftmax => (0.0, false),
        LossKind::Lmcl => (f64::from(cfg.margin), false),
        LossKind::AdaptiveMargin => (f64::from(cfg.margin), true),
    };
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let xi = &x[i * dim..(i + 1) * dim];
        let cos = |z: usize| -> f64 {
            let pz = &p[z * dim..(z + 1) * dim];
            xi.iter().zip(pz).map(|(a, b)| a * b).sum()
        };
        let pos = temp(cos(y) - margin);
        let mut ratio_sum = 0.0;
        for z in (0..classes).filter(|&z| z != y) {
            let c = cos(z);
            let d = if use_d {
                f64::from(distances.get(y, z))
            } else {
                0.0
            };
            ratio_sum += (temp(c + (1.0 - c) * d) - pos).exp();
        }
        total += ratio_sum.ln_1p();
    }
    total / labels.len() as f64
}

/// Central differences of [`reference_mean_loss`] with respect to every
/// embedding and proxy entry.
pub fn numerical_gradients(inst: &Instance, cfg: &LossConfig, h: f64) -> (Vec<f64>, Vec<f64>) {
    let dim = inst.embeddings.cols();
    let mut x: Vec<f64> = inst
        .embeddings
        .as_slice()
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    let mut p: Vec<f64> = inst
        .proxies
        .proxies()
        .as_slice()
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    let eval =
        |x: &[f64], p: &[f64]| reference_mean_loss(x, p, &inst.labels, &inst.distances, dim, cfg);

    let mut gx = vec![0.0; x.len()];
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + h;
        let up = eval(&x, &p);
        x[k] = orig - h;
        let down = eval(&x, &p);
        x[k] = orig;
        gx[k] = (up - down) / (2.0 * h);
    }
    let mut gp = vec![0.0; p.len()];
    for k in 0..p.len() {
        let orig = p[k];
        p[k] = orig + h;
        let up = eval(&x, &p);
        p[k] = orig - h;
        let down = eval(&x, &p);
        p[k] = orig;
        gp[k] = (up - down) / (2.0 * h);
    }
    (gx, gp)
}

/// `max |a - n| / max(|a|, |n|, RELATIVE_FLOOR)` over paired entries.
pub fn max_relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let a = f64::from(a);
            (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR)
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
}

/// Builds a random instance of the given shape and compares analytic and
/// finite-difference gradients. `perturb` scales the analytic gradients
/// before comparison (1.0 for a real check).
pub fn check_instance(
    cfg: &LossConfig,
    seed: u64,
    shape: GradCheckShape,
    perturb: f32,
) -> GradCheckReport {
    let inst = random_instance(shape, seed);
    let out = loss::compute(
        &inst.embeddings,
        &inst.proxies,
        &inst.labels,
        cfg,
        Some(&inst.distances),
    )
    .expect("random instance is well formed");
    let scaled = |m: &Matrix| -> Vec<f32> { m.as_slice().iter().map(|g| g * perturb).collect() };
    let ax = scaled(&out.grad_embeddings);
    let ap = scaled(&out.grad_proxies);
    let (nx, np) = numerical_gradients(&inst, cfg, FD_STEP);
    let max_abs = |v: &mut dyn Iterator<Item = f64>| v.fold(0.0, |m, x| f64::max(m, x.abs()));
    GradCheckReport {
        max_rel_error: max_relative_error(&ax, &nx).max(max_relative_error(&ap, &np)),
        max_abs_analytic: max_abs(&mut ax.iter().chain(&ap).map(|&v| f64::from(v))),
        max_abs_numeric: max_abs(&mut nx.iter().chain(&np).copied()),
    }
}

/// Max relative gradient error on a random `B=8, D=16, C=10` instance.
pub fn loss_backward_check(cfg: &LossConfig, seed: u64) -> f64 {
    check_instance(cfg, seed, GradCheckShape::default(), 1.0).max_rel_error
}

/// Shape of the end-to-end head check: `batch` feature rows of width
/// `in_dim`, embedded to `out_dim`, scored against `classes` proxies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadCheckShape {
    pub batch: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub classes: usize,
}

impl Default for HeadCheckShape {
    fn default() -> Self {
        HeadCheckShape {
            batch: 4,
            in_dim: 8,
            out_dim: 6,
            classes: 5,
        }
    }
}

/// Linear map, population-variance layer norm and L2 normalization, all in
/// `f64`, for parameters laid out as `weight (F x D)` followed by `bias (D)`.
pub fn reference_head_forward(
    features: &Matrix,
    params: &[f64],
    out_dim: usize,
    eps: f64,
) -> Vec<f64> {
    let in_dim = features.cols();
    let (w, b) = params.split_at(in_dim * out_dim);
    let mut out = Vec::with_capacity(features.rows() * out_dim);
    for f in features.iter_rows() {
        let z: Vec<f64> = (0..out_dim)
            .map(|j| {
                b[j] + (0..in_dim)
                    .map(|k| f64::from(f[k]) * w[k * out_dim + j])
                    .sum::<f64>()
            })
            .collect();
        let mean = z.iter().sum::<f64>() / out_dim as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / out_dim as f64;
        let ln: Vec<f64> = z.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect();
        let len = ln.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.extend(ln.iter().map(|v| v / len));
    }
    out
}

fn central_difference(params: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..params.len())
        .map(|k| {
            let orig = params[k];
            params[k] = orig + h;
            let up = f(params);
            params[k] = orig - h;
            let down = f(params);
            params[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn head_params(head: &EmbeddingHead) -> Vec<f64> {
    head.weight
        .as_slice()
        .iter()
        .chain(&head.bias)
        .map(|&v| f64::from(v))
        .collect()
}

fn random_features(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized from dims")
}

/// Loss-through-head check: gradients of the mean loss with respect to the
/// head's weight and bias against central differences of the composed
/// reference functions. Returns the max relative error.
pub fn head_backward_check(cfg: &LossConfig, seed: u64, shape: HeadCheckShape) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = random_features(&mut rng, shape.batch, shape.in_dim);
    let head = EmbeddingHead::init(shape.in_dim, shape.out_dim, rng.random());
    let inst = random_instance(
        GradCheckShape {
            batch: shape.batch,
            dim: shape.out_dim,
            classes: shape.classes,
        },
        rng.random(),
    );

    let emb = head.forward(&features).expect("random features embed");
    let out = loss::compute(
        &emb,
        &inst.proxies,
        &inst.labels,
        cfg,
        Some(&inst.distances),
    )
    .expect("well formed");
    let (gw, gb) = head
        .backward(&features, &out.grad_embeddings)
        .expect("shapes match");
    let analytic: Vec<f32> = gw.as_slice().iter().chain(&gb).copied().collect();

    let p: Vec<f64> = inst
        .proxies
        .proxies()
        .as_slice()
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    let eps = f64::from(head.eps);
    let mut params = head_params(&head);
    let numeric = central_difference(&mut params, FD_STEP, |w| {
        let x = reference_head_forward(&features, w, shape.out_dim, eps);
        reference_mean_loss(&x, &p, &inst.labels, &inst.distances, shape.out_dim, cfg)
    });
    max_relative_error(&analytic, &numeric)
}

/// Head backward against a random upstream gradient `G`: compares against
/// central differences of `sum(G * head(features))`.
pub fn head_vjp_check(seed: u64, shape: HeadCheckShape) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = random_features(&mut rng, shape.batch, shape.in_dim);
    let head = EmbeddingHead::init(shape.in_dim, shape.out_dim, rng.random());
    let upstream = random_features(&mut rng, shape.batch, shape.out_dim);
    let (gw, gb) = head.backward(&features, &upstream).expect("shapes match");
    let analytic: Vec<f32> = gw.as_slice().iter().chain(&gb).copied().collect();

    let eps = f64::from(head.eps);
    let mut params = head_params(&head);
    let numeric = central_difference(&mut params, FD_STEP, |w| {
        reference_head_forward(&features, w, shape.out_dim, eps)
            .iter()
            .zip(upstream.as_slice())
            .map(|(e, &g)| e * f64::from(g))
            .sum()
    });
    max_relative_error(&analytic, &numeric)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn configs() -> Vec<LossConfig> {
        let mut v = Vec::new();
        for kind in LossKind::ALL {
            for mode in [TemperatureMode::Multiply, TemperatureMode::Divide] {
                for sigma in [1.0, 20.0] {
                    v.push(
                        LossConfig::new(kind, sigma, 0.4)
                            .unwrap()
                            .with_temperature_mode(mode),
                    );
                }
            }
        }
        v
    }

    #[test]
    fn reference_matches_forward() {
        for cfg in configs() {
            let inst = random_instance(GradCheckShape::default(), 11);
            let out = loss::compute(
                &inst.embeddings,
                &inst.proxies,
                &inst.labels,
                &cfg,
                Some(&inst.distances),
            )
            .unwrap();
            let x: Vec<f64> = inst
                .embeddings
                .as_slice()
                .iter()
                .map(|&v| v.into())
                .collect();
            let p: Vec<f64> = inst
                .proxies
                .proxies()
                .as_slice()
                .iter()
                .map(|&v| v.into())
                .collect();
            let r = reference_mean_loss(&x, &p, &inst.labels, &inst.distances, 16, &cfg);
            assert!(
                (r - f64::from(out.mean_loss)).abs() < 1e-5 * r.max(1.0),
                "{cfg:?}"
            );
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for cfg in configs() {
            for seed in 0..5 {
                let err = loss_backward_check(&cfg, seed);
                assert!(err <= 1e-4, "{cfg:?} seed {seed}: {err:e}");
            }
        }
    }

    #[test]
    fn single_class_gradient_is_zero() {
        let shape = GradCheckShape {
            classes: 1,
            ..Default::default()
        };
        let cfg = LossConfig::default();
        let r = check_instance(&cfg, 5, shape, 1.0);
        assert_eq!(r.max_abs_analytic, 0.0);
        assert!(r.max_abs_numeric <= 1e-9);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        for seed in 0..5 {
            let err = head_backward_check(&LossConfig::default(), seed, HeadCheckShape::default());
            assert!(err <= 1e-4, "seed {seed}: {err:e}");
            let err = head_vjp_check(seed, HeadCheckShape::default());
            assert!(err <= 1e-4, "seed {seed}: {err:e}");
        }
    }

    #[test]
    fn perturbed_gradient_is_detected() {
        let cfg = LossConfig::default();
        let r = check_instance(&cfg, 1, GradCheckShape::default(), 1.01);
        assert!(r.max_rel_error > 1e-3);
    }
}
