//! Turns class text embeddings into the margin matrix used by the adaptive
//! loss, for each metric and normalization, and looks up a class by id.
//!
//!     cargo run --example build_margins

use marginflow::margins::{build_margin_matrix, ClassTextEmbeddings, DistanceMetric, NormMode};
use marginflow::synthetic::{hierarchical_text_embeddings, HierarchyConfig};
use marginflow::tensor::Matrix;

fn main() -> marginflow::Result<()> {
    let text = ClassTextEmbeddings::new(
        Matrix::from_rows(&[
            [0.9f32, 0.1, 0.0],
            [0.8, 0.3, 0.1],
            [0.1, 0.9, 0.2],
            [0.0, 0.2, 1.0],
        ])?,
        vec![
            "sneaker".into(),
            "boot".into(),
            "scarf".into(),
            "handbag".into(),
        ],
    )?;

    for metric in [DistanceMetric::Cosine, DistanceMetric::Euclidean] {
        for norm in [NormMode::Analytic, NormMode::MinMax] {
            let m = build_margin_matrix(&text, metric, norm)?;
            println!("{metric} / {norm}");
            for row in m.distances().iter_rows() {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
                println!("  {}", cells.join("  "));
            }
        }
    }

    let m = build_margin_matrix(&text, DistanceMetric::Cosine, NormMode::Analytic)?;
    println!(
        "\nmargins for negatives of a sneaker sample: {:?}",
        m.lookup_row("sneaker")?
    );

    // grouped classes show up as low within-group distances
    let grouped = hierarchical_text_embeddings(&HierarchyConfig::default())?;
    let m = build_margin_matrix(&grouped, DistanceMetric::Cosine, NormMode::Analytic)?;
    let (lo, mean, hi) = m.off_diagonal_stats().expect("more than one class");
    println!("\n50 classes in 5 groups: min={lo:.3} mean={mean:.3} max={hi:.3}");
    println!("class 0 vs 1 (same group): {:.3}", m.distances().get(0, 1));
    println!(
        "class 0 vs 49 (other group): {:.3}",
        m.distances().get(0, 49)
    );
    Ok(())
}
