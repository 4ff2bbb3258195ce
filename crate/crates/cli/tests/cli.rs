use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"
seed = 3

[generator]
encoder_widths = [4, 4, 8, 8]
sketch_widths = [4, 4, 4, 4, 4, 4]
ru_blocks = 1
cardinality = 2
pretrained_provider = "fixed-random(seed=7,width=2)"

[loss]
lambda_perceptual = 0.0

[train]
resolution = 16
learning_rate = 1e-3
checkpoint_interval = 4
"#;

fn linecolor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_linecolor"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "0")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn clip_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data/clip")
}

/// Builds the bundled clip into `<root>/ds` and writes the tiny config.
fn dataset(root: &Path) -> (PathBuf, PathBuf) {
    let config = root.join("tiny.toml");
    fs::write(&config, TINY_CONFIG).unwrap();
    let ds = root.join("ds");
    let o = linecolor(&["--config", s(&config), "build-dataset", "--frames", s(&clip_dir()), "--out", s(&ds)]);
    assert!(o.status.success(), "{}", stderr(&o));
    (config, ds)
}

#[test]
fn help_exits_zero() {
    let o = linecolor(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for cmd in ["build-dataset", "train", "colorize", "evaluate", "benchmark"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    assert_eq!(linecolor(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn bad_invocations_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = linecolor(&["build-dataset", "--frames", s(&empty), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no frames found"), "{}", stderr(&o));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nlearning_rat = 0.1\n").unwrap();
    let o = linecolor(&["--config", s(&bad), "benchmark", "--identity"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));

    let missing = dir.path().join("nope.ckpt");
    let o = linecolor(&["evaluate", "--checkpoint", s(&missing), "--dataset", s(dir.path()), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));

    assert_eq!(linecolor(&["train"]).status.code(), Some(2));
    assert_eq!(linecolor(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn build_dataset_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (config, ds) = dataset(dir.path());
    let manifest = fs::read_to_string(ds.join("manifest.tsv")).unwrap();
    let records = manifest.lines().filter(|l| !l.starts_with('#')).count() - 1;
    assert_eq!(records, 10);
    assert!(manifest.contains("# created=0"));
    let sequences = fs::read(ds.join("sequences.tsv")).unwrap();

    let again = dir.path().join("again");
    let o = linecolor(&["--config", s(&config), "build-dataset", "--frames", s(&clip_dir()), "--out", s(&again)]);
    assert!(o.status.success());
    for f in ["manifest.tsv", "shots.tsv", "frames.tsv", "sequences.tsv"] {
        assert_eq!(fs::read(ds.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read(again.join("sequences.tsv")).unwrap(), sequences);
}

#[test]
fn train_resume_colorize_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let (config, ds) = dataset(dir.path());
    let run = dir.path().join("run");
    let manifest = ds.join("manifest.tsv");
    let o = linecolor(&[
        "--config", s(&config), "train", "--manifest", s(&manifest), "--out", s(&run), "--max-iterations", "8",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("iter-0000004.ckpt").is_file());
    assert!(run.join("iter-0000008.ckpt").is_file());
    assert_eq!(fs::read_to_string(run.join("train.jsonl")).unwrap().lines().count(), 8);

    let o = linecolor(&[
        "--config", s(&config), "train", "--manifest", s(&manifest), "--out", s(&run),
        "--resume", s(&run.join("iter-0000004.ckpt")), "--max-iterations", "10",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("trained to iteration 10"));
    let ckpt = run.join("last.ckpt");

    let frames = fs::read_to_string(ds.join("frames.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = frames.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    let (ref_color, ref_sketch) = (ds.join(rows[0][1]), ds.join(rows[0][2]));
    let sketches: Vec<String> = (1..=3).map(|i| ds.join(rows[i * 4][2]).to_string_lossy().into_owned()).collect();
    let colorize = |out: &Path, chain: bool| {
        let mut args = vec![
            "colorize".to_string(), "--checkpoint".into(), s(&ckpt).into(), "--ref-sketch".into(),
            s(&ref_sketch).into(), "--ref-color".into(), s(&ref_color).into(), "--out".into(), s(out).into(),
        ];
        if chain {
            args.push("--chain".into());
        }
        args.extend(sketches.iter().cloned());
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = linecolor(&refs);
        assert!(o.status.success(), "{}", stderr(&o));
        let mut files: Vec<_> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files
    };
    let fixed = colorize(&dir.path().join("fixed"), false);
    let chained = colorize(&dir.path().join("chained"), true);
    assert_eq!(fixed.len(), 3);
    assert_eq!(chained.len(), 3);
    assert_eq!(fs::read(&fixed[0]).unwrap(), fs::read(&chained[0]).unwrap());
    assert_ne!(fs::read(&fixed[2]).unwrap(), fs::read(&chained[2]).unwrap());

    let report = dir.path().join("report");
    let o = linecolor(&[
        "--config", s(&config), "evaluate", "--identity", "--checkpoint", s(&ckpt), "--dataset", s(&ds),
        "--out", s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,stride,frame,iv,psnr,ssim,n"));
    let mut identity_rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 7);
        let (stride, frame, iv): (usize, usize, usize) = (f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap());
        assert_eq!(iv, stride * frame);
        if f[0] == "identity" {
            identity_rows += 1;
            assert_eq!(f[4], "inf");
            assert_eq!(f[5].parse::<f64>().unwrap(), 1.0);
        } else {
            assert!(f[0].starts_with("full:"));
        }
    }
    assert_eq!(identity_rows, 12);
    let table = fs::read_to_string(report.join("report.txt")).unwrap();
    assert!(table.contains("frame4(iv:40)"));
    assert!(table.contains("99.00*/1.0000"));
}

#[test]
fn benchmark_writes_timing() {
    let dir = tempfile::tempdir().unwrap();
    let o = linecolor(&[
        "benchmark", "--identity", "--resolution", "32", "--repeats", "3", "--warmup", "0", "--out", s(dir.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("timing.csv")).unwrap();
    assert!(csv.starts_with("method,seconds_per_frame,spread,hardware\nidentity,"));
    assert_eq!(linecolor(&["benchmark", "--identity", "--repeats", "2"]).status.code(), Some(2));
}
