//! Writes a synthetic dataset in the on-disk formats (EMB1 features, LBL1
//! labels, class text embeddings with an id sidecar, a training config) and
//! prints the command lines that run the whole pipeline on it.
//!
//!     cargo run --example cli_workflow -- /tmp/mf-demo

use std::path::PathBuf;

use marginflow::io;
use marginflow::loss::LossKind;
use marginflow::synthetic::{
    desk_train_config, gaussian_clusters, hierarchical_text_embeddings, write_cluster_files,
    ClusterConfig, HierarchyConfig,
};

fn main() -> marginflow::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "mf-demo".into()));
    std::fs::create_dir_all(&dir).map_err(|e| marginflow::Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;

    let data = gaussian_clusters(&ClusterConfig::default())?;
    let files = write_cluster_files(&data, &dir)?;
    let text = hierarchical_text_embeddings(&HierarchyConfig::default())?;
    io::save_matrix(text.embeddings(), dir.join("text.emb"))?;
    io::save_class_ids(text.class_ids(), dir.join("text.emb.ids"))?;
    let cfg = desk_train_config(LossKind::AdaptiveMargin, 2000);
    std::fs::write(dir.join("train.cfg"), cfg.to_config_string()).map_err(|e| {
        marginflow::Error::Io {
            path: dir.join("train.cfg").display().to_string(),
            source: e,
        }
    })?;

    // the loaders round-trip what was written
    let back = io::load_bundle(
        &files.train_features,
        &files.train_labels,
        io::SplitTag::Train,
    )?;
    assert_eq!(back.features, data.train.features);

    let d = dir.display();
    println!("wrote {d}/{{train,query,gallery}}.{{emb,lbl}}, text.emb, text.emb.ids, train.cfg\n");
    println!("marginflow margins-build --class-text {d}/text.emb --metric cosine --norm analytic --out {d}/margins.mgn");
    println!(
        "marginflow train --config {d}/train.cfg --features {d}/train.emb --labels {d}/train.lbl --margins {d}/margins.mgn --out {d}/model.ckp"
    );
    println!(
        "marginflow eval --ckpt {d}/model.ckp --query-features {d}/query.emb --query-labels {d}/query.lbl --gallery-features {d}/gallery.emb --gallery-labels {d}/gallery.lbl [--binary]"
    );
    println!("marginflow embed --ckpt {d}/model.ckp --features {d}/query.emb --out {d}/query_embeddings.emb");
    Ok(())
}
