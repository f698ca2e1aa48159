//! Synthetic desk-scale data: Gaussian feature clusters per class and
//! hierarchical class text embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::gradcheck::random_unit_rows;
use crate::io::{self, EvalSplit, FeatureBundle, LabelSet, SplitTag};
use crate::loss::{index_class_ids, LossKind};
use crate::margins::{ClassTextEmbeddings, MarginMatrix};
use crate::tensor::{self, Matrix};
use crate::trainer::{default_decay_gamma, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterConfig {
    pub classes: usize,
    pub feature_dim: usize,
    /// Per-coordinate standard deviation around each unit center.
    pub cluster_std: f32,
    pub train_per_class: usize,
    pub query_per_class: usize,
    pub gallery_per_class: usize,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            classes: 50,
            feature_dim: 64,
            cluster_std: 0.15,
            train_per_class: 40,
            query_per_class: 10,
            gallery_per_class: 10,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClusterData {
    /// Unit cluster centers, one row per class.
    pub centers: Matrix,
    pub train: FeatureBundle,
    pub eval: EvalSplit,
}

fn sample_split<R: rand::Rng>(
    rng: &mut R,
    centers: &Matrix,
    per_class: usize,
    std: f32,
    split: SplitTag,
) -> Result<FeatureBundle> {
    let (c, f) = centers.shape();
    let mut data = Vec::with_capacity(c * per_class * f);
    let mut labels = Vec::with_capacity(c * per_class);
    for class in 0..c {
        for _ in 0..per_class {
            let row: Vec<f32> = centers
                .row(class)
                .iter()
                .map(|&m| {
                    let n: f32 = StandardNormal.sample(rng);
                    m + std * n
                })
                .collect();
            data.extend(tensor::l2_normalize(&row)?);
            labels.push(class);
        }
    }
    let features = Matrix::from_vec(c * per_class, f, data)?;
    FeatureBundle::new(features, LabelSet::new(labels, c)?, split)
}

/// Unit-normalized samples around random unit centers. Train, query and
/// gallery are drawn independently, in that order, from one seeded stream.
pub fn gaussian_clusters(cfg: &ClusterConfig) -> Result<ClusterData> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = random_unit_rows(&mut rng, cfg.classes, cfg.feature_dim);
    let train = sample_split(
        &mut rng,
        &centers,
        cfg.train_per_class,
        cfg.cluster_std,
        SplitTag::Train,
    )?;
    let query = sample_split(
        &mut rng,
        &centers,
        cfg.query_per_class,
        cfg.cluster_std,
        SplitTag::Query,
    )?;
    let gallery = sample_split(
        &mut rng,
        &centers,
        cfg.gallery_per_class,
        cfg.cluster_std,
        SplitTag::Gallery,
    )?;
    Ok(ClusterData {
        centers,
        train,
        eval: EvalSplit::new(query, gallery)?,
    })
}

/// Paths written by [`write_cluster_files`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterFiles {
    pub train_features: PathBuf,
    pub train_labels: PathBuf,
    pub query_features: PathBuf,
    pub query_labels: PathBuf,
    pub gallery_features: PathBuf,
    pub gallery_labels: PathBuf,
}

fn write_bundle(b: &FeatureBundle, features: &Path, labels: &Path) -> Result<()> {
    io::save_matrix(&b.features, features)?;
    io::save_labels(&LabelSet::new(b.labels.clone(), b.num_classes())?, labels)
}

/// Writes the three splits as EMB1/LBL1 pairs into `dir`.
pub fn write_cluster_files(data: &ClusterData, dir: impl AsRef<Path>) -> Result<ClusterFiles> {
    let dir = dir.as_ref();
    let files = ClusterFiles {
        train_features: dir.join("train.emb"),
        train_labels: dir.join("train.lbl"),
        query_features: dir.join("query.emb"),
        query_labels: dir.join("query.lbl"),
        gallery_features: dir.join("gallery.emb"),
        gallery_labels: dir.join("gallery.lbl"),
    };
    write_bundle(&data.train, &files.train_features, &files.train_labels)?;
    write_bundle(&data.eval.query, &files.query_features, &files.query_labels)?;
    write_bundle(
        &data.eval.gallery,
        &files.gallery_features,
        &files.gallery_labels,
    )?;
    Ok(files)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HierarchyConfig {
    pub classes: usize,
    pub groups: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation of a class around its group center.
    pub spread: f32,
    pub seed: u64,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            classes: 50,
            groups: 5,
            dim: 16,
            spread: 0.1,
            seed: 1,
        }
    }
}

/// Text embeddings with two levels: `groups` random unit group centers, and
/// each class a perturbation of its group's center. Classes are assigned to
/// groups in contiguous runs of `ceil(classes / groups)`.
pub fn hierarchical_text_embeddings(cfg: &HierarchyConfig) -> Result<ClassTextEmbeddings> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = random_unit_rows(&mut rng, cfg.groups, cfg.dim);
    let per_group = cfg.classes.div_ceil(cfg.groups);
    let mut data = Vec::with_capacity(cfg.classes * cfg.dim);
    for c in 0..cfg.classes {
        let g = (c / per_group).min(cfg.groups - 1);
        let row: Vec<f32> = centers
            .row(g)
            .iter()
            .map(|&m| {
                let n: f32 = StandardNormal.sample(&mut rng);
                m + cfg.spread * n
            })
            .collect();
        data.extend(tensor::l2_normalize(&row)?);
    }
    let embeddings = Matrix::from_vec(cfg.classes, cfg.dim, data)?;
    ClassTextEmbeddings::new(embeddings, index_class_ids(cfg.classes))
}

/// Training settings for the synthetic clusters: 32-d embeddings, lr 0.1
/// with a 200-iteration warmup (capped at `total_iters`), everything else at
/// the defaults of [`TrainConfig::new`].
pub fn desk_train_config(kind: LossKind, total_iters: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(total_iters, 32);
    cfg.loss.kind = kind;
    cfg.lr0 = 0.1;
    cfg.warmup_iters = total_iters.min(200);
    cfg.decay_gamma = default_decay_gamma(total_iters, cfg.warmup_iters);
    cfg
}

/// Ranks starting at 1, ties sharing their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation; 0 when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman inputs differ in length");
    if a.len() < 2 {
        return 0.0;
    }
    pearson(&average_ranks(a), &average_ranks(b))
}

/// Spearman correlation between proxy cosine distances `1 - cos` and margin
/// matrix entries over all unordered class pairs.
pub fn proxy_margin_correlation(proxies: &Matrix, margins: &MarginMatrix) -> f64 {
    let c = proxies.rows();
    let mut dist = Vec::new();
    let mut marg = Vec::new();
    for y in 0..c {
        for z in y + 1..c {
            dist.push(1.0 - tensor::dot(proxies.row(y), proxies.row(z)));
            marg.push(f64::from(margins.distances().get(y, z)));
        }
    }
    spearman(&dist, &marg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::margins::{build_margin_matrix, DistanceMetric, NormMode};

    #[test]
    fn cluster_shapes_and_norms() {
        let cfg = ClusterConfig {
            classes: 4,
            feature_dim: 8,
            ..ClusterConfig::default()
        };
        let d = gaussian_clusters(&cfg).unwrap();
        assert_eq!(d.train.len(), 160);
        assert_eq!(d.eval.query.len(), 40);
        assert_eq!(d.eval.gallery.len(), 40);
        for r in d.train.features.iter_rows() {
            assert!((tensor::norm(r) - 1.0).abs() < 1e-5);
        }
        let again = gaussian_clusters(&cfg).unwrap();
        assert_eq!(d.train.features, again.train.features);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 0.0]) + 1.0).abs() < 1e-12);
        // monotone but nonlinear
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 8.0, 27.0, 64.0]) - 1.0).abs() < 1e-12);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
        assert_eq!(spearman(&[1.0, 1.0], &[0.0, 2.0]), 0.0);
    }

    #[test]
    fn hierarchy_shows_in_margins() {
        let text = hierarchical_text_embeddings(&HierarchyConfig {
            classes: 20,
            groups: 4,
            seed: 3,
            ..HierarchyConfig::default()
        })
        .unwrap();
        let m = build_margin_matrix(&text, DistanceMetric::Cosine, NormMode::Analytic).unwrap();
        let within = m.distances().get(0, 1);
        let across = m.distances().get(0, 5);
        assert!(within < across, "{within} vs {across}");
        // the margins correlate perfectly with themselves
        let rho = proxy_margin_correlation(text.embeddings(), &m);
        assert!((rho - 1.0).abs() < 1e-9, "{rho}");
    }
}
