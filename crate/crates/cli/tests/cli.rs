use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use trd_core::datasets::{render_toy, write_depth_tiff, write_rgb_png, Split, ToyAnomaly, ToyConfig};

const SMALL: &str = r#"
[trainer]
epochs = 4
batch_size = 4

[data.toy]
n_train = 16
n_val = 4
n_test = 9
"#;

fn trd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trd"))
        .args(args)
        .env_remove("TRD_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Trained {
    dir: tempfile::TempDir,
    config: PathBuf,
    checkpoint: PathBuf,
}

fn trained() -> &'static Trained {
    static ONCE: OnceLock<Trained> = OnceLock::new();
    ONCE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path(), "small.toml", SMALL);
        let out = dir.path().join("run");
        let o = trd(&["train", "--config", s(&config), "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        Trained {
            checkpoint: out.join("model.safetensors"),
            config,
            dir,
        }
    })
}

fn png_size(path: &Path) -> (u32, u32) {
    let b = std::fs::read(path).unwrap();
    assert_eq!(&b[1..4], b"PNG");
    let be = |o: usize| u32::from_be_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]]);
    (be(16), be(20))
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn make_toy_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = trd(&["make-toy", "--config", s(&cfg), "--seed", "7", "--out", s(out)]);
        assert!(o.status.success());
        assert!(stdout(&o).contains("seed 7"));
    }
    for split in ["train", "validation", "test"] {
        assert!(a.join("toy").join(split).is_dir());
    }
    assert!(a.join("toy/test/good/rgb").is_dir());
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad_mix = write_config(dir.path(), "mix.toml", "[data.toy.mix]\ntwo_d = 0.9\nthree_d = 0.9\nboth = 0.9\n");
    let o = trd(&["make-toy", "--config", s(&bad_mix), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mix"));

    let unknown = write_config(dir.path(), "u.toml", "[trainer]\nepochz = 1\n");
    assert_eq!(trd(&["train", "--config", s(&unknown)]).status.code(), Some(2));
    assert_eq!(trd(&["train", "--fusion", "median"]).status.code(), Some(2));
    assert_eq!(trd(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_two_after_echoing_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "m.toml", "[data]\nsource = \"mvtec3d\"\n");
    let o = trd(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    let echo = stdout(&o);
    for line in ["epochs = 200", "batch_size = 16", "learning_rate = 0.005", "sigma = 4.0"] {
        assert!(echo.contains(line), "missing `{line}` in\n{echo}");
    }
    let o = trd(&["train", "--config", s(&cfg), "--data-root", s(&dir.path().join("absent"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_checkpoint_log_and_config() {
    let t = trained();
    assert!(t.checkpoint.is_file());
    let run = t.checkpoint.parent().unwrap();
    assert!(run.join("model.log.json").is_file());
    let echoed = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echoed.contains("epochs = 4"));
}

#[test]
fn resume_continues_from_saved_epoch() {
    let t = trained();
    let out = t.dir.path().join("resumed");
    let o = trd(&[
        "train",
        "--config",
        s(&t.config),
        "--epochs",
        "5",
        "--resume",
        s(&t.checkpoint),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("at epoch 4"));
    assert!(text.contains("epoch    5/5"));
    assert!(!text.contains("epoch    1/5"));
}

#[test]
fn eval_reports_and_dumps_maps() {
    let t = trained();
    let out = t.dir.path().join("eval");
    let o = trd(&[
        "eval",
        "--config",
        s(&t.config),
        "--checkpoint",
        s(&t.checkpoint),
        "--out",
        s(&out),
        "--dump-maps",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json = std::fs::read_to_string(out.join("report.json")).unwrap();
    for key in ["image_auroc", "image_ap", "pixel_auroc", "pixel_ap", "pro"] {
        assert!(json.contains(key), "{key}");
    }
    assert!(out.join("report.txt").is_file());
    let maps: Vec<_> = std::fs::read_dir(out.join("maps")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(maps.len(), 9 * 6);
    let png = maps.iter().find(|p| p.extension().unwrap() == "png").unwrap();
    assert_eq!(png_size(png), (64, 64));

    let product = t.dir.path().join("eval_product");
    let o = trd(&[
        "eval",
        "--config",
        s(&t.config),
        "--checkpoint",
        s(&t.checkpoint),
        "--fusion",
        "product",
        "--out",
        s(&product),
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("product"));
    assert_ne!(
        std::fs::read_to_string(product.join("report.json")).unwrap(),
        json
    );
}

#[test]
fn eval_with_wrong_profile_or_missing_checkpoint_exits_two() {
    let t = trained();
    let o = trd(&["eval", "--checkpoint", s(&t.dir.path().join("nope")), "--out", s(t.dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let o = trd(&["eval", "--checkpoint", s(&t.checkpoint), "--profile", "full", "--out", s(t.dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

fn write_pair(dir: &Path, name: &str, anomaly: Option<ToyAnomaly>) -> (PathBuf, PathBuf) {
    let raw = render_toy(&ToyConfig::default(), Split::Test, 3, anomaly);
    let (rgb, depth) = (dir.join(format!("{name}.png")), dir.join(format!("{name}.tiff")));
    write_rgb_png(&rgb, &raw.rgb).unwrap();
    write_depth_tiff(&depth, &raw.depth).unwrap();
    (rgb, depth)
}

fn infer_score(t: &Trained, rgb: &Path, depth: &Path, out: &Path) -> f64 {
    let o = trd(&[
        "infer",
        "--config",
        s(&t.config),
        "--checkpoint",
        s(&t.checkpoint),
        "--rgb",
        s(rgb),
        "--depth",
        s(depth),
        "--out",
        s(out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::read_to_string(out.join("score.txt")).unwrap().trim().parse().unwrap()
}

#[test]
fn infer_scores_anomalous_twin_higher() {
    let t = trained();
    let dir = t.dir.path().join("pairs");
    std::fs::create_dir_all(&dir).unwrap();
    let (nr, nd) = write_pair(&dir, "normal", None);
    let (ar, ad) = write_pair(&dir, "anomalous", Some(ToyAnomaly::Both));
    let out = dir.join("out_normal");
    let normal = infer_score(t, &nr, &nd, &out);
    let mut names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["2d.png", "3d.png", "fused.png", "score.txt"]);
    let again = infer_score(t, &nr, &nd, &dir.join("out_again"));
    assert_eq!(normal, again);
    let anomalous = infer_score(t, &ar, &ad, &dir.join("out_anomalous"));
    assert!(anomalous > normal, "{anomalous} <= {normal}");
}

#[test]
fn unreadable_inputs_exit_two() {
    let t = trained();
    let junk = t.dir.path().join("junk.png");
    std::fs::write(&junk, b"not an image").unwrap();
    let o = trd(&[
        "infer",
        "--checkpoint",
        s(&t.checkpoint),
        "--rgb",
        s(&junk),
        "--depth",
        s(&junk),
        "--out",
        s(t.dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
