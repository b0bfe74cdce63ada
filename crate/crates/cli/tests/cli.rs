use std::path::Path;
use std::process::{Command, Output};

use dksg::data::pnm;

const TINY_CONFIG: &str = "\
# small network so the tests stay quick
epochs = 1
batch_size = 4
image_size = 32
channels = 4,4,8,8,8
blocks_per_stage = 1
c_d = 8
d_model = 8
seed = 3
";

fn dksg(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dksg"))
        .args(args)
        .env("DKSG_THREADS", threads)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = dksg(args, "1");
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_single_error_line(out: &Output) {
    assert!(!out.status.success());
    let err = stderr(out);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "), "{err}");
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Generates data and writes the tiny config; returns (data dir, config path).
fn setup(root: &Path, count: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = root.join("data");
    ok(&["gen-data", "--count", &count.to_string(), "--size", "32", "--seed", "5", "--out", p(&data)]);
    let cfg = root.join("tiny.cfg");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    (data, cfg)
}

#[test]
fn selftest_passes() {
    let out = ok(&["selftest"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn bad_invocations_give_one_error_line() {
    assert_single_error_line(&dksg(&["train", "--data", "x", "--out", "y", "--bogus"], "1"));
    assert_single_error_line(&dksg(&["frobnicate"], "1"));
    assert_single_error_line(&dksg(&["eval", "--checkpoint", "/nonexistent.dksg", "--data", "/nonexistent", "--out", "/tmp/x.csv"], "1"));

    let dir = tempfile::tempdir().unwrap();
    let bad_cfg = dir.path().join("bad.cfg");
    std::fs::write(&bad_cfg, "epochs = 1\nlearning_rate = 3\n").unwrap();
    let out = dksg(&["train", "--config", p(&bad_cfg), "--data", p(dir.path()), "--out", p(dir.path())], "1");
    assert_single_error_line(&out);
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));

    let bad_img = dir.path().join("bad.ppm");
    std::fs::write(&bad_img, b"P6\n4 x\n255\n").unwrap();
    let out = dksg(&["predict", "--checkpoint", p(&bad_img), "--image", p(&bad_img), "--out", p(&bad_img)], "1");
    assert_single_error_line(&out);
}

#[test]
fn help_exits_zero() {
    let out = dksg(&["--help"], "1");
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("gen-data"));
}

#[test]
fn gen_data_layout_and_empty_mode() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = setup(dir.path(), 4);
    for id in ["00000", "00003"] {
        let img = pnm::read(&data.join("images").join(format!("{id}.ppm"))).unwrap();
        let mask = pnm::read(&data.join("masks").join(format!("{id}.pgm"))).unwrap();
        assert_eq!((img.width, img.height, img.channels), (32, 32, 3));
        assert_eq!((mask.width, mask.height, mask.channels), (32, 32, 1));
        assert!(mask.pixels.iter().any(|v| *v == 255));
    }
    let empty = dir.path().join("empty");
    ok(&["gen-data", "--count", "3", "--size", "32", "--out", p(&empty), "--empty"]);
    let mask = pnm::read(&empty.join("masks/00002.pgm")).unwrap();
    assert!(mask.pixels.iter().all(|v| *v == 0));
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path(), 12);
    let run = dir.path().join("run");
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    let log = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,step,lr,train_loss,val_dice"));
    assert_eq!(log.lines().count(), 2);
    // the resolved config parses back
    ok(&["train", "--config", p(&run.join("config.txt")), "--data", p(&data), "--out", p(&dir.path().join("again"))]);

    let ckpt = run.join("checkpoint.dksg");
    let csv = dir.path().join("eval.csv");
    ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "id,recall,specificity,precision,dice,iou_p,iou_b,miou,accuracy");
    assert_eq!(lines.len(), 14);
    assert!(lines[1].starts_with("00000,"));
    assert!(lines[13].starts_with("MEAN,"));
    for l in &lines[1..] {
        let cells: Vec<&str> = l.split(',').collect();
        assert_eq!(cells.len(), 9);
        for c in &cells[1..] {
            let v: f64 = c.parse().unwrap();
            assert!((0.0..=1.0).contains(&v), "{l}");
        }
    }
    ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&csv), "--pooled"]);
    assert!(std::fs::read_to_string(&csv).unwrap().lines().last().unwrap().starts_with("POOLED,"));

    // odd-sized input: the mask keeps the input dimensions
    let img = pnm::PnmImage { width: 50, height: 40, channels: 3, pixels: (0..6000).map(|i| (i % 251) as u8).collect() };
    let img_path = dir.path().join("odd.ppm");
    pnm::write(&img_path, &img).unwrap();
    let (mask, attn, kern) = (dir.path().join("m.pgm"), dir.path().join("a.csv"), dir.path().join("k.csv"));
    ok(&["predict", "--checkpoint", p(&ckpt), "--image", p(&img_path), "--out", p(&mask), "--dump-attn", p(&attn), "--dump-kernel", p(&kern)]);
    let m = pnm::read(&mask).unwrap();
    assert_eq!((m.width, m.height, m.channels), (50, 40, 1));
    assert!(m.pixels.iter().all(|v| *v == 0 || *v == 255));

    let attn = std::fs::read_to_string(&attn).unwrap();
    let rows: Vec<Vec<f64>> = attn.lines().map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 5);
    for r in rows {
        assert_eq!(r.len(), 5);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-4);
    }
    let kern = std::fs::read_to_string(&kern).unwrap();
    let lines: Vec<&str> = kern.lines().collect();
    assert_eq!(lines[0], "stage,mean_gate,l2_kernel");
    assert!(lines[1].starts_with("5,,"));
    assert_eq!(lines.len(), 6);
    for (l, stage) in lines[2..].iter().zip([4, 3, 2, 1]) {
        let cells: Vec<&str> = l.split(',').collect();
        assert_eq!(cells[0], stage.to_string());
        let g: f64 = cells[1].parse().unwrap();
        assert!(g > 0.0 && g < 1.0);
    }
}

#[test]
fn untrained_checkpoint_scores_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path(), 10);
    let zero_cfg = dir.path().join("zero.cfg");
    std::fs::write(&zero_cfg, std::fs::read_to_string(&cfg).unwrap().replace("epochs = 1", "epochs = 0")).unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", p(&zero_cfg), "--data", p(&data), "--out", p(&run)]);
    let csv = dir.path().join("eval.csv");
    ok(&["eval", "--checkpoint", p(&run.join("checkpoint.dksg")), "--data", p(&data), "--out", p(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mean: Vec<f64> = text.lines().last().unwrap().split(',').skip(1).map(|c| c.parse().unwrap()).collect();
    let dice = mean[3];
    // a random predictor marking a fraction q of pixels scores 2fq/(f+q) ≤ 2f/(1+f)
    // at best; the synthetic foreground is at most half the image
    assert!(dice.is_finite() && dice <= 2.0 * 0.5 / 1.5, "{dice}");
}

#[test]
fn training_is_byte_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path(), 12);
    let mut outputs = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let run = dir.path().join(name);
        let out = dksg(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)], threads);
        assert!(out.status.success(), "{}", stderr(&out));
        outputs.push((std::fs::read(run.join("checkpoint.dksg")).unwrap(), std::fs::read(run.join("metrics.csv")).unwrap()));
    }
    assert!(outputs[0] == outputs[1]);
    assert!(outputs[0] == outputs[2]);
}
