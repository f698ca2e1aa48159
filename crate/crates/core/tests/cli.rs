use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use marginflow::io::{self, LabelSet};
use marginflow::loss::LossKind;
use marginflow::margins::{self, build_margin_matrix, DistanceMetric, NormMode};
use marginflow::synthetic::{
    desk_train_config, gaussian_clusters, hierarchical_text_embeddings, write_cluster_files,
    ClusterConfig, ClusterFiles, HierarchyConfig,
};
use marginflow::tensor::Matrix;
use marginflow::trainer::{self, Checkpoint, TrainConfig};
use tempfile::TempDir;

fn marginflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_marginflow"))
        .args(args)
        .env("MF_THREADS", "2")
        .output()
        .expect("spawn marginflow")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    files: ClusterFiles,
}

impl Fixture {
    /// 10 classes, enough samples for a quick run.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = gaussian_clusters(&ClusterConfig {
            classes: 10,
            feature_dim: 16,
            ..ClusterConfig::default()
        })
        .unwrap();
        let files = write_cluster_files(&data, dir.path()).unwrap();
        Fixture { dir, files }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn write_config(&self, cfg: &TrainConfig) -> PathBuf {
        let p = self.path("train.cfg");
        std::fs::write(&p, cfg.to_config_string()).unwrap();
        p
    }

    fn margins(&self) -> PathBuf {
        let text = hierarchical_text_embeddings(&HierarchyConfig {
            classes: 10,
            groups: 2,
            ..HierarchyConfig::default()
        })
        .unwrap();
        let p = self.path("margins.mgn");
        margins::save_margin_matrix(
            &build_margin_matrix(&text, DistanceMetric::Cosine, NormMode::Analytic).unwrap(),
            &p,
        )
        .unwrap();
        p
    }

    fn train(&self, cfg: &Path, margins: Option<&Path>, out: &Path) -> Output {
        let mut args = vec![
            "train",
            "--config",
            s(cfg),
            "--features",
            s(&self.files.train_features),
            "--labels",
            s(&self.files.train_labels),
            "--out",
            s(out),
        ];
        if let Some(m) = margins {
            args.extend(["--margins", s(m)]);
        }
        marginflow(&args)
    }

    fn eval(&self, ckpt: &Path, gallery_features: &Path, extra: &[&str]) -> Output {
        let mut args = vec![
            "eval",
            "--ckpt",
            s(ckpt),
            "--query-features",
            s(&self.files.query_features),
            "--query-labels",
            s(&self.files.query_labels),
            "--gallery-features",
            s(gallery_features),
            "--gallery-labels",
            s(&self.files.gallery_labels),
        ];
        args.extend(extra);
        marginflow(&args)
    }

    fn trained_checkpoint(&self) -> PathBuf {
        let cfg = self.write_config(&small_config(LossKind::NormSoftmax, 200));
        let ckpt = self.path("model.ckp");
        let out = self.train(&cfg, None, &ckpt);
        assert!(out.status.success(), "{}", stderr(&out));
        ckpt
    }
}

fn small_config(kind: LossKind, iters: u64) -> TrainConfig {
    let mut cfg = desk_train_config(kind, iters);
    cfg.embedding_dim = 8;
    cfg.sampler.batch_size = 20;
    cfg
}

#[test]
fn margins_build_writes_matrix_and_stats() {
    let fx = Fixture::new();
    let text = fx.path("text.emb");
    io::save_matrix(
        &Matrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0], [-1.0, 0.0]]).unwrap(),
        &text,
    )
    .unwrap();
    io::save_class_ids(
        &["shoe".into(), "bag".into(), "hat".into()],
        fx.path("text.emb.ids"),
    )
    .unwrap();
    let out_path = fx.path("m.mgn");
    let out = marginflow(&[
        "margins-build",
        "--class-text",
        s(&text),
        "--out",
        s(&out_path),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("classes=3"));
    assert!(stdout(&out).contains("max=1"));

    let m = margins::load_margin_matrix(&out_path).unwrap();
    assert_eq!(m.class_ids(), ["shoe", "bag", "hat"]);
    assert_eq!(m.lookup_row("hat").unwrap(), &[1.0, 0.5, 0.0]);
}

#[test]
fn margins_build_missing_input_exits_2() {
    let fx = Fixture::new();
    let out = marginflow(&[
        "margins-build",
        "--class-text",
        s(&fx.path("nope.emb")),
        "--out",
        s(&fx.path("m.mgn")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nope.emb"));
}

#[test]
fn margins_build_single_class_warns() {
    let fx = Fixture::new();
    let text = fx.path("one.emb");
    io::save_matrix(&Matrix::from_rows(&[[0.3f32, 0.4]]).unwrap(), &text).unwrap();
    let out_path = fx.path("m.mgn");
    let out = marginflow(&[
        "margins-build",
        "--class-text",
        s(&text),
        "--out",
        s(&out_path),
    ]);
    assert!(out.status.success());
    assert!(stderr(&out).contains("warning"));
    let m = margins::load_margin_matrix(&out_path).unwrap();
    assert_eq!(m.distances().as_slice(), &[0.0]);
}

#[test]
fn margins_build_degenerate_minmax_exits_3() {
    let fx = Fixture::new();
    let text = fx.path("two.emb");
    io::save_matrix(
        &Matrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap(),
        &text,
    )
    .unwrap();
    let out = marginflow(&[
        "margins-build",
        "--class-text",
        s(&text),
        "--norm",
        "minmax",
        "--out",
        s(&fx.path("m.mgn")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn train_adaptive_without_margins_exits_2() {
    let fx = Fixture::new();
    let cfg = fx.write_config(&small_config(LossKind::AdaptiveMargin, 10));
    let out = fx.train(&cfg, None, &fx.path("x.ckp"));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--margins"), "{}", stderr(&out));
}

#[test]
fn train_zero_iterations_writes_init() {
    let fx = Fixture::new();
    let cfg = small_config(LossKind::Lmcl, 0);
    let path = fx.write_config(&cfg);
    let ckpt = fx.path("init.ckp");
    let out = fx.train(&path, None, &ckpt);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out), "");

    let (head, proxies) = trainer::init(&cfg, 16, 10);
    let expected = Checkpoint {
        head,
        proxies,
        iteration: 0,
        loss_history: Vec::new(),
    };
    assert_eq!(std::fs::read(&ckpt).unwrap(), expected.to_bytes().unwrap());
}

#[test]
fn train_streams_decreasing_loss() {
    let fx = Fixture::new();
    let cfg = fx.write_config(&small_config(LossKind::AdaptiveMargin, 600));
    let margins = fx.margins();
    let out = fx.train(&cfg, Some(&margins), &fx.path("m.ckp"));
    assert!(out.status.success(), "{}", stderr(&out));

    let losses: Vec<(u64, f64)> = stdout(&out)
        .lines()
        .map(|line| {
            let kv: Vec<(&str, &str)> = line
                .split(' ')
                .map(|p| p.split_once('=').unwrap())
                .collect();
            assert_eq!(
                kv.iter().map(|(k, _)| *k).collect::<Vec<_>>(),
                ["iter", "lr", "loss"]
            );
            (kv[0].1.parse().unwrap(), kv[2].1.parse().unwrap())
        })
        .collect();
    assert_eq!(
        losses.iter().map(|l| l.0).collect::<Vec<_>>(),
        [100, 200, 300, 400, 500, 600]
    );
    assert!(losses[0].1 > losses[5].1, "{losses:?}");
}

#[test]
fn train_divergence_exits_4() {
    let fx = Fixture::new();
    let mut cfg = small_config(LossKind::NormSoftmax, 50);
    cfg.lr0 = 1e38;
    cfg.warmup_iters = 0;
    cfg.decay_gamma = 1.0;
    let path = fx.write_config(&cfg);
    let out = fx.train(&path, None, &fx.path("d.ckp"));
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn train_bad_config_exits_2() {
    let fx = Fixture::new();
    let path = fx.path("bad.cfg");
    std::fs::write(
        &path,
        "total_iters = 10\nembedding_dim = 8\nlearning_rate = 0.1\n",
    )
    .unwrap();
    let out = fx.train(&path, None, &fx.path("b.ckp"));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rate"));
}

#[test]
fn eval_default_ks_and_binary_mode() {
    let fx = Fixture::new();
    let ckpt = fx.trained_checkpoint();

    let out = fx.eval(&ckpt, &fx.files.gallery_features, &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let recall: Vec<&str> = text.lines().filter(|l| l.starts_with("recall@")).collect();
    let ks: Vec<&str> = recall.iter().map(|l| &l[7..l.find('=').unwrap()]).collect();
    assert_eq!(ks, ["1", "5", "10", "20", "30", "40", "50"]);
    assert!(text.contains("mode=float"));
    for l in recall {
        let v: f64 = l.split_once('=').unwrap().1.parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }

    let out = fx.eval(
        &ckpt,
        &fx.files.gallery_features,
        &["--binary", "--ks", "5,1"],
    );
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("mode=binary"));
    assert_eq!(text.lines().filter(|l| l.starts_with("recall@")).count(), 2);
    assert!(text.find("recall@1=").unwrap() < text.find("recall@5=").unwrap());
}

#[test]
fn eval_empty_gallery_exits_2() {
    let fx = Fixture::new();
    let ckpt = fx.trained_checkpoint();
    let empty = fx.path("empty.emb");
    io::save_matrix(&Matrix::zeros(0, 16), &empty).unwrap();
    io::save_labels(&LabelSet::new(vec![], 10).unwrap(), fx.path("empty.lbl")).unwrap();
    let out = marginflow(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--query-features",
        s(&fx.files.query_features),
        "--query-labels",
        s(&fx.files.query_labels),
        "--gallery-features",
        s(&empty),
        "--gallery-labels",
        s(&fx.path("empty.lbl")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_feature_width_mismatch_exits_2() {
    let fx = Fixture::new();
    let ckpt = fx.trained_checkpoint();
    let wide = fx.path("wide.emb");
    io::save_matrix(&Matrix::zeros(100, 17), &wide).unwrap();
    let out = fx.eval(&ckpt, &wide, &[]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn embed_writes_unit_rows() {
    let fx = Fixture::new();
    let ckpt = fx.trained_checkpoint();
    let out_path = fx.path("q.emb");
    let out = marginflow(&[
        "embed",
        "--ckpt",
        s(&ckpt),
        "--features",
        s(&fx.files.query_features),
        "--out",
        s(&out_path),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("rows=100 dim=8"));
    let e = io::load_matrix(&out_path).unwrap();
    for r in e.iter_rows() {
        assert!((marginflow::tensor::norm(r) - 1.0).abs() < 1e-5);
    }
}

#[test]
fn corrupted_checkpoint_exits_2() {
    let fx = Fixture::new();
    let ckpt = fx.trained_checkpoint();
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[0] = b'X';
    std::fs::write(&ckpt, bytes).unwrap();
    let out = fx.eval(&ckpt, &fx.files.gallery_features, &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("format"));
}

#[test]
fn selftest_passes_and_detects_fault() {
    let out = marginflow(&["selftest"]);
    assert!(out.status.success(), "{}", stdout(&out));
    let passes = stdout(&out)
        .lines()
        .filter(|l| l.starts_with("PASS"))
        .count();
    assert!(passes >= 6);

    let out = marginflow(&["selftest", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL gradient/"));
}
