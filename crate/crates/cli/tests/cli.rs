use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sqlc::data_io::read_image;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fixture(name: &str) -> PathBuf {
    root().join("crates/core/tests/fixtures").join(name)
}

fn corpus() -> PathBuf {
    root().join("data/corpus/manifest.jsonl")
}

fn sqlc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqlc")).args(args).env("RUST_LOG", "info").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("tiny.cfg");
    let text = format!("steps=2\nbatch_size=2\npatch_size=32\nnicm_width=8\nnicm_latents=6\nlatent_channels=3\nval_every=2\n{extra}");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&sqlc(&["--help"])), 0);
    assert_eq!(code(&sqlc(&["compress", "--bogus"])), 1);
    assert_eq!(code(&sqlc(&["compress", "x.png", "--codec", "nicm3", "--quality", "9", "--out", "y"])), 1);
    assert_eq!(code(&sqlc(&["no-such-command"])), 1);
}

#[test]
fn golden_model_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let (c, png) = (dir.path().join("p.sqlc"), dir.path().join("p.png"));
    let model = fixture("golden_nicm3.sqlm");
    let input = fixture("golden_patch.png");
    let out = sqlc(&["compress", p(&input), "--codec", "nicm3", "--quality", "3", "--model", p(&model), "--out", p(&c)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read(&c).unwrap(), std::fs::read(fixture("golden_nicm3.sqlc")).unwrap());
    let out = sqlc(&["decompress", p(&c), "--model", p(&model), "--out", p(&png)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_image(&png).unwrap(), read_image(&fixture("golden_nicm3_decoded.png")).unwrap());
}

#[test]
fn model_problems_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("golden_patch.png");
    let c = dir.path().join("p.sqlc");
    let missing = dir.path().join("missing.sqlm");
    let out = sqlc(&["compress", p(&input), "--codec", "nicm3", "--quality", "3", "--model", p(&missing), "--out", p(&c)]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let model = fixture("golden_nicm3.sqlm");
    let out = sqlc(&["compress", p(&input), "--codec", "nicm3", "--quality", "4", "--model", p(&model), "--out", p(&c)]);
    assert_eq!(code(&out), 3);
    let out = sqlc(&["compress", p(&input), "--codec", "sqlc", "--quality", "3", "--model", p(&model), "--out", p(&c)]);
    assert_eq!(code(&out), 3);
    let garbage = dir.path().join("garbage.sqlm");
    std::fs::write(&garbage, b"not a model").unwrap();
    let out = sqlc(&["decompress", p(&fixture("golden_nicm3.sqlc")), "--model", p(&garbage), "--out", p(&c)]);
    assert_eq!(code(&out), 3);
}

#[test]
fn bad_data_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.sqlc");
    let mut bytes = std::fs::read(fixture("golden_nicm3.sqlc")).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&bad, &bytes).unwrap();
    let png = dir.path().join("out.png");
    let out = sqlc(&["decompress", p(&bad), "--model", p(&fixture("golden_nicm3.sqlm")), "--out", p(&png)]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let out = sqlc(&["compress", p(&dir.path().join("none.png")), "--codec", "jpeg", "--quality", "3", "--out", p(&bad)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn jpeg_needs_no_model() {
    let dir = tempfile::tempdir().unwrap();
    let (c, png) = (dir.path().join("p.sqlc"), dir.path().join("p.png"));
    let out = sqlc(&["compress", p(&fixture("golden_patch.png")), "--codec", "jpeg", "--quality", "7", "--out", p(&c)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = sqlc(&["decompress", p(&c), "--out", p(&png)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_image(&png).unwrap().shape(), &[3, 32, 32]);
}

#[test]
fn eval_rd_without_jpeg_warns_and_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sqlc"))
        .args(["eval-rd", "--data", p(&corpus()), "--split", "val", "--model", p(&fixture("golden_nicm3.sqlm")), "--out", p(dir.path())])
        .env("SQLC_JPEG", "none")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("JPEG adapter unavailable"));
    let csv = std::fs::read_to_string(dir.path().join("rd.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("nicm3,3,"));
    assert!(std::fs::read_to_string(dir.path().join("rd.svg")).unwrap().contains("<polyline"));
}

#[test]
fn tile_stain_split_and_diff_h_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let tiles = dir.path().join("tiles");
    let a = corpus().parent().unwrap().join("src00/tile00.png");
    let b = dir.path().join("other.png");
    std::fs::copy(corpus().parent().unwrap().join("src01/tile00.png"), &b).unwrap();
    let out = sqlc(&["tile", p(&a), p(&b), "--patch", "32", "--threshold", "0", "--val-fraction", "0.5", "--out", p(&tiles)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest = std::fs::read_to_string(tiles.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 8);
    assert!(manifest.contains("\"val\"") && manifest.contains("\"train\""));

    let planes = dir.path().join("planes");
    let out = sqlc(&["stain-split", p(&a), "--out", p(&planes)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("stain matrix"));
    for name in ["h.png", "e.png", "d.png"] {
        assert_eq!(read_image(&planes.join(name)).unwrap().shape(), &[3, 64, 64]);
    }

    let maps = dir.path().join("maps");
    let out = sqlc(&["diff-h", p(&a), p(&a), p(&b), "--out", p(&maps)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = std::fs::read_to_string(maps.join("h_mse.csv")).unwrap();
    let mses: Vec<f64> = table.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(mses[0], 0.0);
    assert!(mses[1] > 0.0);
    assert!(maps.join("tile00.hdiff.png").exists());
    let out = sqlc(&["diff-h", p(&a), "--out", p(&maps)]);
    assert_eq!(code(&out), 1);
}

#[test]
fn sqlc_pipeline_trains_finetunes_and_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let se_cfg = tiny_config(d, "");
    let se = d.join("se.sqlm");
    let out = sqlc(&["train-se", "--data", p(&corpus()), "--config", p(&se_cfg), "--out", p(&se)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(std::fs::read_to_string(d.join("se.csv")).unwrap().starts_with("step,loss,bpp,distortion,lr\n"));

    let model = d.join("sqlc.sqlm");
    let out = sqlc(&["train-nicm", "--data", p(&corpus()), "--codec", "sqlc", "--model", p(&se), "--config", p(&se_cfg), "--quality", "2", "--out", p(&model)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let tuned = d.join("tuned.sqlm");
    let out = sqlc(&["finetune-sqlc", "--data", p(&corpus()), "--model", p(&model), "--config", p(&se_cfg), "--out", p(&tuned)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("unchanged"));

    let (c, png) = (d.join("p.sqlc"), d.join("p.png"));
    let input = fixture("golden_patch.png");
    let out = sqlc(&["compress", p(&input), "--codec", "sqlc", "--quality", "2", "--model", p(&tuned), "--out", p(&c)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = sqlc(&["decompress", p(&c), "--model", p(&tuned), "--out", p(&png)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(read_image(&png).unwrap().shape(), &[3, 32, 32]);
    let out = sqlc(&["decompress", p(&c), "--model", p(&model), "--out", p(&png)]);
    assert_eq!(code(&out), 3, "a different model must be refused");

    let bad_cfg = d.join("bad.cfg");
    std::fs::write(&bad_cfg, "steps=lots\n").unwrap();
    let out = sqlc(&["train-se", "--data", p(&corpus()), "--config", p(&bad_cfg), "--out", p(&se)]);
    assert_eq!(code(&out), 1);
    let out = sqlc(&["train-nicm", "--data", p(&corpus()), "--codec", "sqlc", "--out", p(&model)]);
    assert_eq!(code(&out), 1);
}
