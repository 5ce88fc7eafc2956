use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use potaccel::cli::{run, SWEEP_HEADER};
use potaccel::data::{encode_idx_images, encode_idx_labels, IMAGE_PIXELS};
use potaccel::mlp::MlpModel;
use tempfile::TempDir;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// 160 images whose label is the index of the brightest of ten pixel bands.
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let count = 160;
        let mut pixels = vec![0u8; count * IMAGE_PIXELS];
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let label = (i * 7 % 10) as u8;
            let img = &mut pixels[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS];
            for (p, px) in img.iter_mut().enumerate() {
                let band = p / 78;
                *px = if band == label as usize { 255 } else { ((i * 31 + p * 17) % 40) as u8 };
            }
            labels.push(label);
        }
        fs::write(dir.path().join("img"), encode_idx_images(count, 28, 28, &pixels)).unwrap();
        fs::write(dir.path().join("lbl"), encode_idx_labels(&labels)).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn train(&self) -> PathBuf {
        let out = self.path("model.txt");
        let log = capture(&[
            "train", "--images", &self.arg("img"), "--labels", &self.arg("lbl"),
            "--epochs", "2", "--batch-size", "16", "--seed", "1", "--out", &self.arg("model.txt"),
        ])
        .unwrap();
        assert_eq!(log.lines().filter(|l| l.starts_with("epoch=")).count(), 2);
        out
    }
}

fn capture(args: &[&str]) -> potaccel::Result<String> {
    let mut out = Vec::new();
    let mut full = vec!["potaccel"];
    full.extend_from_slice(args);
    run(full, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.split_whitespace()
        .find_map(|tok| tok.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("{key} missing from {text}"))
}

#[test]
fn train_writes_model_and_log() {
    let fx = Fixture::new();
    let model_path = fx.train();
    let model = MlpModel::load(&model_path).unwrap();
    assert_eq!(model.layer_sizes(), &[784, 128, 10]);
}

#[test]
fn explicit_defaults_match_implicit_ones() {
    let fx = Fixture::new();
    let (img, lbl, a_out, b_out) = (fx.arg("img"), fx.arg("lbl"), fx.arg("a.txt"), fx.arg("b.txt"));
    let base = ["train", "--images", &img, "--labels", &lbl, "--epochs", "1"];
    let mut a = base.to_vec();
    a.extend(["--out", &a_out]);
    let a_log = capture(&a).unwrap();
    let mut b = base.to_vec();
    b.extend(["--batch-size", "64", "--lr", "0.5", "--out", &b_out]);
    let b_log = capture(&b).unwrap();
    assert_eq!(a_log.lines().next(), b_log.lines().next());
    assert_eq!(fs::read(fx.path("a.txt")).unwrap(), fs::read(fx.path("b.txt")).unwrap());
}

#[test]
fn quantize_reports_level_counts() {
    let fx = Fixture::new();
    let model = fx.arg("model.txt");
    fx.train();
    let pot = capture(&["quantize", "--model", &model, "--scheme", "pot", "--bits", "3"]).unwrap();
    assert_eq!(field(&pot, "levels"), "9");
    let spx = capture(&["quantize", "--model", &model, "--scheme", "spx", "--branches", "2,1"]).unwrap();
    assert_eq!(field(&spx, "levels"), "15");
    assert_eq!(spx.lines().filter(|l| l.starts_with("layer=")).count(), 2);
    // header, two layers, gap header, then one gap per adjacent pair
    assert_eq!(spx.lines().count(), 4 + 14);
}

#[test]
fn quantizing_an_on_level_model_is_lossless() {
    let fx = Fixture::new();
    fx.train();
    let args = |model: &str, out: Option<&str>| {
        let mut v = vec!["quantize".to_string(), "--model".into(), model.into()];
        v.extend(["--scheme", "spx", "--branches", "3,3", "--alpha", "0.25"].map(String::from));
        if let Some(o) = out {
            v.extend(["--out".into(), o.into(), "--codebook-out".into(), fx.arg("cb.txt")]);
        }
        v
    };
    let first = args(&fx.arg("model.txt"), Some(&fx.arg("q.txt")));
    capture(&first.iter().map(String::as_str).collect::<Vec<_>>()).unwrap();
    let second = args(&fx.arg("q.txt"), None);
    let report = capture(&second.iter().map(String::as_str).collect::<Vec<_>>()).unwrap();
    for line in report.lines().filter(|l| l.starts_with("layer=")) {
        assert_eq!(field(line, "mean_abs_error"), "0.000000000", "{line}");
    }
    let cb = fs::read_to_string(fx.path("cb.txt")).unwrap();
    assert!(cb.starts_with("scheme=spx bits=7 branches=3,3 alpha=0.25\n"));
}

fn simulate(fx: &Fixture, extra: &[&str]) -> String {
    let (model, img, lbl) = (fx.arg("model.txt"), fx.arg("img"), fx.arg("lbl"));
    let mut args = vec![
        "simulate", "--model", &model, "--scheme", "spx", "--branches", "3,3",
        "--images", &img, "--labels", &lbl, "--limit", "5",
    ];
    args.extend_from_slice(extra);
    capture(&args).unwrap()
}

#[test]
fn simulate_reports_accuracy_and_cycles() {
    let fx = Fixture::new();
    fx.train();
    let out = simulate(&fx, &["--load-period", "300", "--compute-period", "500"]);
    for key in [
        "samples=5",
        "float_accuracy=",
        "simulated_accuracy=",
        "accuracy_delta=",
        "compute_cycles_per_sample=",
        "wall_time_ns_per_sample=",
    ] {
        assert!(out.contains(key), "{key} missing from\n{out}");
    }
    let total = out.lines().find(|l| l.starts_with("total ")).unwrap();
    assert_eq!(field(total, "stall_cycles"), "0");
}

#[test]
fn starved_bandwidth_stalls() {
    let fx = Fixture::new();
    fx.train();
    let out = simulate(&fx, &["--bandwidth", "1"]);
    let total = out.lines().find(|l| l.starts_with("total ")).unwrap();
    assert_ne!(field(total, "stall_cycles"), "0");
}

#[test]
fn simulate_reads_config_file_and_traces() {
    let fx = Fixture::new();
    fx.train();
    fs::write(fx.path("pipe.cfg"), "# narrow link\nload_bandwidth_words=64\npu_count=4\n").unwrap();
    let cfg = fx.arg("pipe.cfg");
    let out = simulate(&fx, &["--config", &cfg, "--trace"]);
    assert!(out.contains("# trace of layer 1 (128x784)"));
    assert!(out.lines().any(|l| l.starts_with("cycle=0 ")));
    assert!(out.lines().any(|l| l.ends_with(" stall")));
}

fn sweep(fx: &Fixture, extra: &[&str]) -> potaccel::Result<String> {
    let (model, img, lbl) = (fx.arg("model.txt"), fx.arg("img"), fx.arg("lbl"));
    let mut args = vec!["sweep", "--model", &model, "--images", &img, "--labels", &lbl, "--limit", "3"];
    args.extend_from_slice(extra);
    capture(&args)
}

#[test]
fn sweep_rows_and_determinism() {
    let fx = Fixture::new();
    fx.train();
    let single = sweep(&fx, &["--pot-bits", "3"]).unwrap();
    let lines: Vec<&str> = single.lines().collect();
    assert_eq!(lines, [SWEEP_HEADER, lines[1]]);
    assert!(lines[1].starts_with("pot\t3\t\t1568\t"));

    let twice = sweep(&fx, &["--pot-bits", "3,3", "--spx-branches", "2,1;3,3", "--bandwidths", "1,1568"]).unwrap();
    let rows: Vec<&str> = twice.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows[0..2], rows[2..4]);
    assert!(rows[4].starts_with("spx\t4\t2,1\t1\t"));
    assert_eq!(rows[1], lines[1]);
}

#[test]
fn empty_sweep_grid_is_an_error() {
    let fx = Fixture::new();
    fx.train();
    assert!(sweep(&fx, &[]).is_err());
}

#[test]
fn invalid_scheme_parameters_are_errors() {
    let fx = Fixture::new();
    fx.train();
    let model = fx.arg("model.txt");
    for bad in [
        vec!["--scheme", "pot"],
        vec!["--scheme", "pot", "--bits", "0"],
        vec!["--scheme", "spx", "--branches", "2,x"],
        vec!["--scheme", "spx", "--branches", "3,3", "--alpha", "0.1"],
    ] {
        let mut args = vec!["quantize", "--model", &model];
        args.extend(bad.iter().copied());
        assert!(capture(&args).is_err(), "{bad:?} accepted");
    }
}

fn binary(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_potaccel"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

#[test]
fn missing_file_exits_2_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let out = binary(
        &["train", "--images", "nope-images.idx", "--labels", "nope-labels.idx", "--out", "m.txt"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nope-images.idx"), "{err}");
}

#[test]
fn bad_config_exits_2() {
    let fx = Fixture::new();
    fx.train();
    fs::write(fx.path("bad.cfg"), "pu_count=0\n").unwrap();
    let out = binary(
        &[
            "simulate", "--model", "model.txt", "--scheme", "pot", "--bits", "3",
            "--images", "img", "--labels", "lbl", "--config", "bad.cfg",
        ],
        fx.dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
}

#[test]
fn success_exits_0() {
    let fx = Fixture::new();
    fx.train();
    let out = binary(&["quantize", "--model", "model.txt", "--scheme", "pot", "--bits", "4"], fx.dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("levels=17"));
}
