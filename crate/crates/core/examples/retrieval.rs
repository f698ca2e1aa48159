//! Recall@K on a query/gallery split, with float embeddings ranked by cosine
//! and with sign-binarized codes ranked by Hamming distance.
//!
//!     cargo run --release --example retrieval

use marginflow::eval::{binarize, compare_float_binary, DEFAULT_KS};
use marginflow::loss::LossKind;
use marginflow::synthetic::{desk_train_config, gaussian_clusters, ClusterConfig};
use marginflow::tensor::Matrix;
use marginflow::trainer::train;

fn main() -> marginflow::Result<()> {
    let e = Matrix::from_rows(&[[0.4f32, -0.2, 0.0, 0.9]])?;
    let bits = binarize(&e);
    let shown: String = (0..4)
        .map(|j| if bits.bit(0, j) { '1' } else { '0' })
        .collect();
    println!("{:?} -> {shown} (bit set iff value > 0)\n", e.row(0));

    let data = gaussian_clusters(&ClusterConfig::default())?;
    let ckpt = train(
        &data.train,
        None,
        &desk_train_config(LossKind::NormSoftmax, 1000),
    )?;
    let (float, binary) = compare_float_binary(&ckpt, &data.eval, &DEFAULT_KS)?;
    println!("{float}");
    println!("{binary}");
    for line in binary.machine_lines() {
        println!("{line}");
    }
    Ok(())
}
