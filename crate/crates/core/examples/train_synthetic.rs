//! Trains an embedding head on synthetic Gaussian clusters, once with
//! adaptive margins from hierarchical class text embeddings and once with
//! plain normalized softmax, then compares retrieval and how well the learned
//! proxies mirror the text-side class distances.
//!
//!     cargo run --release --example train_synthetic -- [iterations]

use marginflow::eval::{recall_at_k, RetrievalMode};
use marginflow::head::EmbeddingHead;
use marginflow::loss::LossKind;
use marginflow::margins::{build_margin_matrix, DistanceMetric, NormMode};
use marginflow::synthetic::{
    desk_train_config, gaussian_clusters, hierarchical_text_embeddings, proxy_margin_correlation,
    ClusterConfig, ClusterData, HierarchyConfig,
};
use marginflow::trainer::train_with_progress;

fn recall1(
    head: &EmbeddingHead,
    data: &ClusterData,
    mode: RetrievalMode,
) -> marginflow::Result<f64> {
    let q = head.forward(&data.eval.query.features)?;
    let g = head.forward(&data.eval.gallery.features)?;
    let report = recall_at_k(
        &q,
        &data.eval.query.labels,
        &g,
        &data.eval.gallery.labels,
        &[1],
        mode,
    )?;
    Ok(report.recall[0])
}

fn main() -> marginflow::Result<()> {
    let iters: u64 = std::env::args()
        .nth(1)
        .map_or(2000, |s| s.parse().expect("iterations must be an integer"));

    let data = gaussian_clusters(&ClusterConfig::default())?;
    let text = hierarchical_text_embeddings(&HierarchyConfig::default())?;
    let margins = build_margin_matrix(&text, DistanceMetric::Cosine, NormMode::Analytic)?;
    if let Some((lo, mean, hi)) = margins.off_diagonal_stats() {
        println!("margins: min={lo:.3} mean={mean:.3} max={hi:.3}");
    }

    for kind in [LossKind::AdaptiveMargin, LossKind::NormSoftmax] {
        let cfg = desk_train_config(kind, iters);
        let untrained = EmbeddingHead::init(
            data.train.feature_dim(),
            cfg.embedding_dim,
            cfg.head_init_seed,
        );
        println!("\n{kind}");
        let ckpt = train_with_progress(&data.train, Some(&margins), &cfg, |r| {
            if r.iteration % 500 == 0 {
                println!("  iter={} lr={:.5} loss={:.4}", r.iteration, r.lr, r.loss);
            }
        })?;
        println!(
            "  recall@1 untrained      {:.3}",
            recall1(&untrained, &data, RetrievalMode::Float)?
        );
        println!(
            "  recall@1 float          {:.3}",
            recall1(&ckpt.head, &data, RetrievalMode::Float)?
        );
        println!(
            "  recall@1 binary         {:.3}",
            recall1(&ckpt.head, &data, RetrievalMode::Binary)?
        );
        println!(
            "  proxy/margin spearman   {:.3}",
            proxy_margin_correlation(ckpt.proxies.proxies(), &margins)
        );
    }
    Ok(())
}
