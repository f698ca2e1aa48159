//! Built-in verification sweeps. Each returns a measured quantity that the
//! caller compares against a tolerance; [`run`] bundles them into named
//! pass/fail checks.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Error;
use crate::eval::{recall_at_k, RetrievalMode};
use crate::gradcheck::{self, random_instance, random_unit_rows, GradCheckShape, HeadCheckShape};
use crate::head::EmbeddingHead;
use crate::io::{self, LabelSet};
use crate::loss::{self, index_class_ids, LossConfig, LossKind, ProxyBank, TemperatureMode};
use crate::margins::{DistanceMetric, MarginMatrix, NormMode};
use crate::tensor::{self, Matrix};
use crate::trainer::Checkpoint;

pub const GRADIENT_TOL: f64 = 1e-4;
pub const REDUCTION_TOL: f64 = 1e-6;

/// Loss settings for instance `i` of a sweep: sigma cycles through {1, 20}
/// and the margin through {0, 0.4}.
pub fn sweep_config(kind: LossKind, mode: TemperatureMode, i: u64) -> LossConfig {
    let sigma = if i.is_multiple_of(2) { 1.0 } else { 20.0 };
    let margin = if (i / 2).is_multiple_of(2) { 0.0 } else { 0.4 };
    LossConfig::new(kind, sigma, margin)
        .expect("sweep settings are valid")
        .with_temperature_mode(mode)
}

/// Max relative gradient error over `instances` random problems. `perturb`
/// scales the analytic gradient (1.0 for a real check).
pub fn gradient_sweep(kind: LossKind, mode: TemperatureMode, instances: u64, perturb: f32) -> f64 {
    (0..instances)
        .map(|i| {
            let cfg = sweep_config(kind, mode, i);
            gradcheck::check_instance(&cfg, 1000 + i, GradCheckShape::default(), perturb)
                .max_rel_error
        })
        .fold(0.0, f64::max)
}

/// Largest per-sample gap in the two reduction chains: adaptive with an
/// all-zero distance matrix against LMCL, and LMCL with zero margin against
/// normalized softmax.
pub fn reduction_sweep(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let inst = random_instance(GradCheckShape::default(), 2000 + i);
        let mode = if i % 2 == 0 {
            TemperatureMode::Multiply
        } else {
            TemperatureMode::Divide
        };
        let sigma = if (i / 2) % 2 == 0 { 20.0 } else { 1.0 };
        let zero = Matrix::zeros(inst.distances.rows(), inst.distances.cols());
        let run = |kind, margin, d: Option<&Matrix>| {
            let cfg = LossConfig::new(kind, sigma, margin)
                .unwrap()
                .with_temperature_mode(mode);
            loss::compute(&inst.embeddings, &inst.proxies, &inst.labels, &cfg, d)
                .unwrap()
                .per_sample_loss
        };
        let gap = |a: &[f32], b: &[f32]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| f64::from((x - y).abs()))
                .fold(0.0, f64::max)
        };
        let adaptive = run(LossKind::AdaptiveMargin, 0.4, Some(&zero));
        let lmcl = run(LossKind::Lmcl, 0.4, None);
        let lmcl0 = run(LossKind::Lmcl, 0.0, None);
        let plain = run(LossKind::NormSoftmax, 0.0, None);
        worst = worst.max(gap(&adaptive, &lmcl)).max(gap(&lmcl0, &plain));
    }
    worst
}

/// Outcome of [`monotonicity_sweep`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MonotonicityReport {
    pub samples_checked: usize,
    /// Samples whose loss went down.
    pub decreases: usize,
    /// Samples with `x . p_z < 1 - 1e-6` whose loss did not go up.
    pub missed_increases: usize,
}

fn sample_loss_f64(inst: &gradcheck::Instance, i: usize, d: &Matrix, cfg: &LossConfig) -> f64 {
    let dim = inst.embeddings.cols();
    let x: Vec<f64> = inst
        .embeddings
        .row(i)
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    let p: Vec<f64> = inst
        .proxies
        .proxies()
        .as_slice()
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    gradcheck::reference_mean_loss(&x, &p, &[inst.labels[i]], d, dim, cfg)
}

/// Raises one distance entry `d[y][z]` by 0.1 per instance and inspects the
/// samples labelled `y`. Non-decrease is checked on the library's per-sample
/// losses; strict increase on the `f64` reference, since the gain can fall
/// below `f32` resolution when class `z` carries little probability.
pub fn monotonicity_sweep(instances: u64) -> MonotonicityReport {
    let mut report = MonotonicityReport::default();
    for i in 0..instances {
        let mut inst = random_instance(GradCheckShape::default(), 3000 + i);
        let cfg = sweep_config(LossKind::AdaptiveMargin, TemperatureMode::Multiply, i);
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let y = inst.labels[rng.random_range(0..inst.labels.len())];
        let classes = inst.distances.rows();
        let z = (y + rng.random_range(1..classes)) % classes;
        let base = inst.distances.get(y, z).min(0.9);
        inst.distances.set(y, z, base);

        let mut raised = inst.distances.clone();
        raised.set(y, z, base + 0.1);
        let eval = |d: &Matrix| {
            loss::adaptive_margin_loss(&inst.embeddings, &inst.proxies, &inst.labels, &cfg, d)
                .unwrap()
                .per_sample_loss
        };
        let (before, after) = (eval(&inst.distances), eval(&raised));
        for s in (0..inst.labels.len()).filter(|&s| inst.labels[s] == y) {
            report.samples_checked += 1;
            if after[s] < before[s] {
                report.decreases += 1;
            }
            let cos = tensor::dot(inst.embeddings.row(s), inst.proxies.proxies().row(z));
            if cos < 1.0 - 1e-6 {
                let lo = sample_loss_f64(&inst, s, &inst.distances, &cfg);
                let hi = sample_loss_f64(&inst, s, &raised, &cfg);
                if hi <= lo {
                    report.missed_increases += 1;
                }
            }
        }
    }
    report
}

/// Max relative error of the loss-through-head gradient over `instances`
/// problems of shape `B=4, F=8, D=6`, cycling loss kinds.
pub fn head_gradient_sweep(instances: u64) -> f64 {
    (0..instances)
        .map(|i| {
            let kind = LossKind::ALL[(i % 3) as usize];
            let cfg = sweep_config(kind, TemperatureMode::Multiply, i / 3);
            gradcheck::head_backward_check(&cfg, 4000 + i, HeadCheckShape::default())
        })
        .fold(0.0, f64::max)
}

/// Recall@K by fully sorting the gallery for every query: by descending
/// score (float) or ascending sign disagreement count (binary), then by
/// index.
pub fn brute_force_recall(
    query: &Matrix,
    query_labels: &[usize],
    gallery: &Matrix,
    gallery_labels: &[usize],
    ks: &[usize],
    mode: RetrievalMode,
) -> Vec<f64> {
    let mut hits = vec![0usize; ks.len()];
    for (q, &label) in query.iter_rows().zip(query_labels) {
        let mut order: Vec<usize> = (0..gallery.rows()).collect();
        match mode {
            RetrievalMode::Float => {
                let score: Vec<f64> = gallery
                    .iter_rows()
                    .map(|g| {
                        q.iter()
                            .zip(g)
                            .map(|(&a, &b)| f64::from(a) * f64::from(b))
                            .sum()
                    })
                    .collect();
                order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
            }
            RetrievalMode::Binary => {
                let dist: Vec<usize> = gallery
                    .iter_rows()
                    .map(|g| {
                        q.iter()
                            .zip(g)
                            .filter(|(&a, &b)| (a > 0.0) != (b > 0.0))
                            .count()
                    })
                    .collect();
                order.sort_by_key(|&j| (dist[j], j));
            }
        }
        for (h, &k) in hits.iter_mut().zip(ks) {
            if order.iter().take(k).any(|&j| gallery_labels[j] == label) {
                *h += 1;
            }
        }
    }
    let n = query.rows().max(1) as f64;
    hits.into_iter().map(|h| h as f64 / n).collect()
}

/// Instances with coarse values so both modes see plenty of score ties.
fn random_retrieval_instance(seed: u64) -> (Matrix, Vec<usize>, Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(2..=24);
    let classes = rng.random_range(1..=8);
    let nq = rng.random_range(1..=20);
    let ng = rng.random_range(1..=100);
    let mut draw = |rows: usize| {
        let data = (0..rows * dim)
            .map(|_| f32::from(rng.random_range(-2i8..=2)) * 0.5)
            .collect();
        Matrix::from_vec(rows, dim, data).unwrap()
    };
    let (q, g) = (draw(nq), draw(ng));
    let ql = (0..nq).map(|_| rng.random_range(0..classes)).collect();
    let gl = (0..ng).map(|_| rng.random_range(0..classes)).collect();
    (q, ql, g, gl)
}

/// Number of (instance, mode) pairs where the library disagrees with
/// [`brute_force_recall`] at any of K in {1, 5, 10}.
pub fn recall_oracle_sweep(instances: u64) -> usize {
    let ks = [1, 5, 10];
    let mut mismatches = 0;
    for i in 0..instances {
        let (q, ql, g, gl) = random_retrieval_instance(5000 + i);
        for mode in [RetrievalMode::Float, RetrievalMode::Binary] {
            let got = recall_at_k(&q, &ql, &g, &gl, &ks, mode).map(|r| r.recall);
            if got.ok() != Some(brute_force_recall(&q, &ql, &g, &gl, &ks, mode)) {
                mismatches += 1;
            }
        }
    }
    mismatches
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn random_margin_matrix(rng: &mut ChaCha8Rng, c: usize) -> MarginMatrix {
    let mut d = Matrix::zeros(c, c);
    for y in 0..c {
        for z in y + 1..c {
            let v: f32 = rng.random();
            d.set(y, z, v);
            d.set(z, y, v);
        }
    }
    let ids = (0..c)
        .map(|i| format!("class-{i}-{}", rng.random::<u16>()))
        .collect();
    let metric = if rng.random() {
        DistanceMetric::Cosine
    } else {
        DistanceMetric::Euclidean
    };
    let norm = if rng.random() {
        NormMode::Analytic
    } else {
        NormMode::MinMax
    };
    MarginMatrix::from_parts(d, ids, metric, norm).unwrap()
}

fn random_checkpoint(rng: &mut ChaCha8Rng) -> Checkpoint {
    let (f, d, c) = (
        rng.random_range(1..10),
        rng.random_range(2..10),
        rng.random_range(1..10),
    );
    let mut head = EmbeddingHead::init(f, d, rng.random());
    head.bias = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    Checkpoint {
        head,
        proxies: ProxyBank::new(random_unit_rows(rng, c, d), index_class_ids(c)).unwrap(),
        iteration: rng.random(),
        loss_history: Vec::new(),
    }
}

/// Serializes `value`, parses it back and serializes again.
fn round_trip<T>(
    value: &T,
    to: impl Fn(&T) -> crate::Result<Vec<u8>>,
    from: impl Fn(&[u8]) -> crate::Result<T>,
) -> Result<Vec<u8>, String> {
    let first = to(value).map_err(|e| e.to_string())?;
    let parsed = from(&first).map_err(|e| format!("failed to parse own output: {e}"))?;
    let second = to(&parsed).map_err(|e| e.to_string())?;
    if first != second {
        return Err("second encoding differs from the first".into());
    }
    Ok(first)
}

/// A corrupted magic, a truncated payload and a trailing byte must each be
/// rejected as a format error.
fn corruption_rejected(
    bytes: &[u8],
    parse: impl Fn(&[u8]) -> Result<(), Error>,
) -> Result<(), String> {
    let mut bad_magic = bytes.to_vec();
    bad_magic[0] ^= 0xff;
    let mut trailing = bytes.to_vec();
    trailing.push(0);
    let cases = [
        ("corrupted magic", bad_magic),
        ("truncated", bytes[..bytes.len() - 1].to_vec()),
        ("trailing byte", trailing),
    ];
    for (what, case) in cases {
        match parse(&case) {
            Err(e @ Error::Format(_)) if e.exit_code() == 2 => {}
            Err(e) => return Err(format!("{what}: unexpected error {e}")),
            Ok(()) => return Err(format!("{what}: accepted")),
        }
    }
    Ok(())
}

/// Byte-exact round trips of every file format on random valid contents,
/// plus corruption rejection.
pub fn format_sweep(instances: u64) -> Result<(), String> {
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + i);
        let ctx = |kind: &'static str| move |e: String| format!("{kind} instance {i}: {e}");

        let (r, c) = (rng.random_range(0..12), rng.random_range(0..12));
        let m = random_matrix(&mut rng, r, c);
        let bytes =
            round_trip(&m, io::matrix_to_bytes, io::matrix_from_bytes).map_err(ctx("EMB1"))?;
        corruption_rejected(&bytes, |b| io::matrix_from_bytes(b).map(drop)).map_err(ctx("EMB1"))?;

        let classes = rng.random_range(1..20);
        let n = rng.random_range(0..50);
        let labels = LabelSet::new(
            (0..n).map(|_| rng.random_range(0..classes)).collect(),
            classes,
        )
        .unwrap();
        let bytes =
            round_trip(&labels, LabelSet::to_bytes, LabelSet::from_bytes).map_err(ctx("LBL1"))?;
        corruption_rejected(&bytes, |b| LabelSet::from_bytes(b).map(drop)).map_err(ctx("LBL1"))?;

        let c = rng.random_range(1..12);
        let mm = random_margin_matrix(&mut rng, c);
        let bytes = round_trip(&mm, MarginMatrix::to_bytes, MarginMatrix::from_bytes)
            .map_err(ctx("MGN1"))?;
        corruption_rejected(&bytes, |b| MarginMatrix::from_bytes(b).map(drop))
            .map_err(ctx("MGN1"))?;

        let ck = random_checkpoint(&mut rng);
        let bytes =
            round_trip(&ck, Checkpoint::to_bytes, Checkpoint::from_bytes).map_err(ctx("CKP1"))?;
        corruption_rejected(&bytes, |b| Checkpoint::from_bytes(b).map(drop))
            .map_err(ctx("CKP1"))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SelftestOptions {
    /// Scale the analytic loss gradients by 1.01 before checking them.
    pub inject_fault: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {:<36} {}", self.name, self.detail)
    }
}

fn check(name: impl Into<String>, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed,
        detail,
    }
}

/// Runs every check with small instance counts.
pub fn run(opts: SelftestOptions) -> Vec<CheckResult> {
    let perturb = if opts.inject_fault { 1.01 } else { 1.0 };
    let mut out = Vec::new();
    for kind in LossKind::ALL {
        for mode in [TemperatureMode::Multiply, TemperatureMode::Divide] {
            let err = gradient_sweep(kind, mode, 8, perturb);
            out.push(check(
                format!("gradient/{kind}/{mode}"),
                err <= GRADIENT_TOL,
                format!("max_rel_err={err:.2e}"),
            ));
        }
    }
    let gap = reduction_sweep(20);
    out.push(check(
        "reduction_identities",
        gap <= REDUCTION_TOL,
        format!("max_gap={gap:.2e}"),
    ));
    let mono = monotonicity_sweep(20);
    out.push(check(
        "margin_monotonicity",
        mono.decreases == 0 && mono.missed_increases == 0,
        format!(
            "samples={} decreases={} missed_increases={}",
            mono.samples_checked, mono.decreases, mono.missed_increases
        ),
    ));
    let err = head_gradient_sweep(6);
    out.push(check(
        "head_gradient",
        err <= GRADIENT_TOL,
        format!("max_rel_err={err:.2e}"),
    ));
    let bad = recall_oracle_sweep(20);
    out.push(check(
        "recall_oracle",
        bad == 0,
        format!("mismatches={bad}"),
    ));
    let formats = format_sweep(10);
    out.push(check(
        "format_round_trips",
        formats.is_ok(),
        formats
            .err()
            .unwrap_or_else(|| "EMB1 LBL1 MGN1 CKP1".into()),
    ));
    out
}
