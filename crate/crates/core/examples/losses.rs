//! The three proxy losses on one small batch, and how they relate: adaptive
//! margins with an all-zero distance matrix give LMCL, and LMCL with a zero
//! margin gives normalized softmax.
//!
//!     cargo run --example losses

use marginflow::loss::{self, LossConfig, LossKind, ProxyBank, TemperatureMode};
use marginflow::tensor::Matrix;

fn main() -> marginflow::Result<()> {
    // two embeddings in 3-d, three class proxies on the coordinate axes
    let mut x = Matrix::from_rows(&[[0.9f32, 0.3, 0.1], [0.2, 0.1, 0.95]])?;
    x.normalize_rows()?;
    let proxies = ProxyBank::new(
        Matrix::from_rows(&[[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])?,
        vec!["sneaker".into(), "boot".into(), "handbag".into()],
    )?;
    let labels = [0, 2];
    // sneaker and boot are close in the text modality, handbag is far from both
    let d = Matrix::from_rows(&[[0.0f32, 0.1, 0.8], [0.1, 0.0, 0.7], [0.8, 0.7, 0.0]])?;

    for kind in LossKind::ALL {
        let cfg = LossConfig::new(kind, 20.0, 0.4)?;
        let out = loss::compute(&x, &proxies, &labels, &cfg, Some(&d))?;
        println!(
            "{kind:<16} mean={:.4} per-sample={:?}",
            out.mean_loss, out.per_sample_loss
        );
    }

    let cfg = LossConfig::new(LossKind::Lmcl, 20.0, 0.4)?;
    let zero = Matrix::zeros(3, 3);
    let adaptive = loss::adaptive_margin_loss(&x, &proxies, &labels, &cfg, &zero)?;
    let lmcl = loss::lmcl(&x, &proxies, &labels, &cfg)?;
    println!(
        "\nadaptive with zero distances == lmcl: {}",
        adaptive.per_sample_loss == lmcl.per_sample_loss
    );

    let cfg = LossConfig::new(LossKind::Lmcl, 20.0, 0.0)?;
    let plain = loss::norm_softmax(&x, &proxies, &labels, &cfg)?;
    let lmcl0 = loss::lmcl(&x, &proxies, &labels, &cfg)?;
    println!(
        "lmcl with zero margin == norm_softmax: {}",
        plain.per_sample_loss == lmcl0.per_sample_loss
    );

    // the temperature can also divide the cosine instead of scaling it
    let cfg = LossConfig::new(LossKind::NormSoftmax, 0.05, 0.0)?
        .with_temperature_mode(TemperatureMode::Divide);
    let out = loss::compute(&x, &proxies, &labels, &cfg, None)?;
    println!("\nnorm_softmax, cos / 0.05: mean={:.4}", out.mean_loss);
    println!("gradient w.r.t. embeddings:");
    for row in out.grad_embeddings.iter_rows() {
        println!("  {row:?}");
    }
    Ok(())
}
