use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pointseg::io::{load_pgm, load_tensor};
use pointseg::metrics::iou;

const BIN: &str = env!("CARGO_BIN_EXE_pointseg");

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn pointseg")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert_eq!(code(&o), 0, "{args:?}\n{}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

fn value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in\n{text}"))
        .parse()
        .unwrap()
}

/// Every file under `dir`, relative path and bytes, sorted.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_CONFIG: &str = "input_size = 32\nstage_channels = 8,16,24\nblocks_per_stage = 1\nhead_channels = 4\n";

#[test]
fn help_documents_every_flag() {
    let cases: [(&str, &[&str]); 7] = [
        ("synth", &["--out", "--count", "--seed", "--image-size", "--crop-size"]),
        (
            "train",
            &[
                "--data", "--config", "--mode", "--out", "--val", "--epochs", "--lr", "--weight-decay", "--batch-size",
                "--seed", "--lambda-min", "--lambda-max", "--prompt-sampling", "--history",
            ],
        ),
        ("quantize", &["--ckpt", "--calib", "--out", "--calib-count", "--degenerate"]),
        ("infer", &["--model", "--image", "--point", "--out"]),
        ("eval", &["--model", "--data", "--metrics"]),
        ("stats", &["--config", "--latency", "--clock", "--mac-units"]),
        ("gradcheck", &["--seed"]),
    ];
    let top = ok(&["--help"]);
    for (sub, flags) in cases {
        assert!(top.contains(sub));
        let text = ok(&[sub, "--help"]);
        for f in flags {
            assert!(text.contains(f), "{sub} --help lacks {f}:\n{text}");
        }
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&run(&["stats", "--config", "x", "--bogus"])), 1);
    assert_eq!(code(&run(&["nosuch"])), 1);
    assert_eq!(code(&run(&["synth", "--count", "3"])), 1);
    assert_eq!(code(&run(&["train", "--data", "d", "--config", "c", "--mode", "teacher", "--out", "o"])), 1);
    assert_eq!(code(&run(&["stats", "--config", "x", "--latency", "14.3"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--out", s(dir.path()), "--count", "2", "--crop-size", "15"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--crop-size"));
}

#[test]
fn missing_and_malformed_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.cfg");
    let o = run(&["stats", "--config", s(&missing)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("none.cfg"));

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "input_size = 32\nstage_channels = 8,16\nblocks = 1\n").unwrap();
    let o = run(&["stats", "--config", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.cfg"));

    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"JUNKJUNK").unwrap();
    let o = run(&["eval", "--model", s(&junk), "--data", s(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn stats_on_reference_config() {
    let cfg = workspace().join("configs/reference.cfg");
    let out = ok(&["stats", "--config", s(&cfg), "--latency", "14.3", "--clock", "262500000", "--mac-units", "2304"]);
    let params = value(&out, "params");
    assert!((1.2e6..=1.4e6).contains(&params), "{params}");
    let macs = value(&out, "macs");
    assert!((macs / 336e6 - 1.0).abs() <= 0.15, "{macs}");
    let qmacs = value(&out, "quantized_macs");
    assert!(qmacs <= macs && (qmacs / 324e6 - 1.0).abs() <= 0.15);
    assert!((value(&out, "macs_per_cycle") - 86.3).abs() < 0.1, "{out}");
    assert_eq!(value(&out, "float_payload_bytes"), 4.0 * params);
    assert!((1.1..=1.6).contains(&value(&out, "quantized_mb")));
    assert!((4.4..=5.6).contains(&value(&out, "float_mb")));
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--seed", "3"]);
    assert!(out.contains("gradient checks passed"), "{out}");
    assert!(!out.contains("FAIL"));
}

#[test]
fn tiny_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.cfg");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let synth = |name: &str| {
        let out = d.join(name);
        ok(&["synth", "--out", s(&out), "--count", "18", "--seed", "7", "--image-size", "40", "--crop-size", "32"]);
        out
    };
    let (data, again) = (synth("data"), synth("again"));
    assert_eq!(tree(&data), tree(&again));
    assert_eq!(tree(&data).len(), 18 * 4);

    let train = |out: &str, hist: &str, mode: &str| {
        let ckpt = d.join(out);
        let h = d.join(hist);
        let text = ok(&[
            "train", "--data", s(&data), "--config", s(&cfg), "--mode", mode, "--out", s(&ckpt), "--epochs", "2",
            "--seed", "5", "--batch-size", "4", "--history", s(&h),
        ]);
        assert_eq!(text, std::fs::read_to_string(&h).unwrap());
        assert_eq!(text.lines().count(), 3);
        (std::fs::read(&ckpt).unwrap(), text, ckpt)
    };
    let (a, ha, ckpt) = train("a.ckpt", "a.csv", "distilled");
    let (b, hb, _) = train("b.ckpt", "b.csv", "distilled");
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    let (sup, _, _) = train("s.ckpt", "s.csv", "supervised");
    assert_ne!(a, sup);

    let quant = |out: &str| {
        let q = d.join(out);
        ok(&["quantize", "--ckpt", s(&ckpt), "--calib", s(&data), "--out", s(&q), "--calib-count", "8"]);
        q
    };
    let (q1, q2) = (quant("a.q"), quant("b.q"));
    assert_eq!(std::fs::read(&q1).unwrap(), std::fs::read(&q2).unwrap());
    // A quantized model cannot be quantized again.
    assert_eq!(code(&run(&["quantize", "--ckpt", s(&q1), "--calib", s(&data), "--out", s(&d.join("x"))])), 2);

    let sample = data.join("sample_00000");
    let prompt = std::fs::read_to_string(sample.join("prompt.txt")).unwrap();
    let point = prompt.split_whitespace().collect::<Vec<_>>().join(",");
    for (model, name) in [(&ckpt, "f.pgm"), (&q1, "q.pgm")] {
        let out = d.join(name);
        let text = ok(&["infer", "--model", s(model), "--image", s(&sample.join("image.ppm")), "--point", &point, "--out", s(&out)]);
        assert!(text.starts_with("score = "));
        assert!(std::fs::read(&out).unwrap().starts_with(b"P5"));
        let m = load_pgm(&out).unwrap();
        assert_eq!(m.shape(), &[1, 1, 40, 40]);
    }
    let bad_point = run(&["infer", "--model", s(&ckpt), "--image", s(&sample.join("image.ppm")), "--point", "400,3", "--out", s(&d.join("z.pgm"))]);
    assert_eq!(code(&bad_point), 1);
    assert_eq!(code(&run(&["infer", "--model", s(&ckpt), "--image", s(&sample.join("image.ppm")), "--point", "1;2", "--out", "z"])), 1);

    for model in [&ckpt, &q1] {
        let e1 = ok(&["eval", "--model", s(model), "--data", s(&data)]);
        let e2 = ok(&["eval", "--model", s(model), "--data", s(&data)]);
        assert_eq!(e1, e2);
        let miou = value(&e1, "miou");
        assert!((0.0..=1.0).contains(&miou));
        assert!(e1.contains("miou,map,params,macs,model_bytes,macs_per_cycle"));
        let only = ok(&["eval", "--model", s(model), "--data", s(&data), "--metrics", "miou"]);
        assert!(only.lines().any(|l| l.starts_with("miou=")));
        assert!(!only.lines().any(|l| l.starts_with("map=")));
    }
    assert_eq!(code(&run(&["eval", "--model", s(&ckpt), "--data", s(&data), "--metrics", "dice"])), 1);
}

#[test]
fn distilled_training_needs_teacher_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.cfg");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let data = d.join("data");
    ok(&["synth", "--out", s(&data), "--count", "6", "--image-size", "40", "--crop-size", "32"]);
    std::fs::remove_file(data.join("sample_00002/teacher.ptsr")).unwrap();
    let o = run(&["train", "--data", s(&data), "--config", s(&cfg), "--mode", "distilled", "--out", s(&d.join("c")), "--epochs", "1"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("sample_00002"));
    // Supervised mode never opens teacher files.
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--mode", "supervised", "--out", s(&d.join("c")), "--epochs", "1"]);
}

/// Desk-scale run through the binary: 500 train / 100 validation samples.
#[test]
fn desk_model_masks_score_well() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    ok(&["synth", "--out", s(&data), "--count", "600", "--seed", "42", "--image-size", "96", "--crop-size", "64"]);
    let ckpt = d.join("desk.ckpt");
    let cfg = workspace().join("configs/desk.cfg");
    let hist = ok(&["train", "--data", s(&data), "--config", s(&cfg), "--mode", "distilled", "--out", s(&ckpt)]);
    assert_eq!(hist.lines().count(), 6);

    // The last sixth was validation; score it through eval and through infer.
    let val = d.join("val");
    std::fs::create_dir(&val).unwrap();
    for i in 500..600 {
        let name = format!("sample_{i:05}");
        std::fs::rename(data.join(&name), val.join(&name)).unwrap();
    }
    let e = ok(&["eval", "--model", s(&ckpt), "--data", s(&val)]);
    assert!(value(&e, "miou") >= 0.7, "{e}");

    let mut ious = Vec::new();
    for i in 500..520 {
        let sample = val.join(format!("sample_{i:05}"));
        let prompt = std::fs::read_to_string(sample.join("prompt.txt")).unwrap();
        let point = prompt.split_whitespace().collect::<Vec<_>>().join(",");
        let out = d.join("m.pgm");
        ok(&["infer", "--model", s(&ckpt), "--image", s(&sample.join("image.ppm")), "--point", &point, "--out", s(&out)]);
        ious.push(iou(&load_pgm(&out).unwrap(), &load_pgm(sample.join("mask.pgm")).unwrap()).unwrap());
    }
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    assert!(mean >= 0.7, "{ious:?}");
    // The teacher file is a regular tensor file.
    assert_eq!(load_tensor(val.join("sample_00500/teacher.ptsr")).unwrap().shape(), &[1, 1, 64, 64]);
}
