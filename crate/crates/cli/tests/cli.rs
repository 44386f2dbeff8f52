use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vidode(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidode"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = vidode(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str], code: &str) {
    let out = vidode(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.starts_with(&format!("error: {code}: ")),
        "{args:?}: {err}"
    );
}

const SMALL: &[&str] = &[
    "--channels",
    "4,8",
    "--hidden",
    "16",
    "--latent-dim",
    "4",
    "--rnn-hidden",
    "8",
];

fn dataset(dir: &Path, name: &str, n: &str) {
    ok(
        dir,
        &[
            "gen-data",
            "--n",
            n,
            "--frames",
            "20",
            "--size",
            "16",
            "--sprite-size",
            "5",
            "--seed",
            "7",
            "--out",
            name,
        ],
    );
}

fn trained(dir: &Path, model: &str, ckpt: &str) {
    dataset(dir, "d.mmv1", "4");
    let mut args = vec![
        "train",
        "--model",
        model,
        "--data",
        "d.mmv1",
        "--epochs",
        "2",
        "--batch-size",
        "2",
        "--out-ckpt",
        ckpt,
    ];
    args.extend(SMALL);
    ok(dir, &args);
}

fn pgms(dir: &Path) -> Vec<String> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".pgm") && !n.contains("strip"))
        .collect();
    v.sort();
    v
}

fn pgm_pixels(path: &Path) -> Vec<u8> {
    let bytes = fs::read(path).unwrap();
    let header = b"P5\n16 16\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    bytes[header.len()..].to_vec()
}

#[test]
fn gen_data_contracts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let args = [
        "gen-data", "--n", "10", "--frames", "20", "--size", "32", "--digits", "1", "--source",
        "blob", "--seed", "7",
    ];
    let stdout = ok(d, &[&args[..], &["--out", "a.mmv1"]].concat());
    ok(d, &[&args[..], &["--out", "b.mmv1"]].concat());
    let a = fs::read(d.join("a.mmv1")).unwrap();
    assert_eq!(a.len(), 20 + 10 * 20 * 32 * 32 * 4);
    assert_eq!(a, fs::read(d.join("b.mmv1")).unwrap());
    assert!(stdout.contains("sequences=10 frames=20 height=32 width=32 bytes=819220"));
    assert!(stdout.contains("seed = 7"));
    fails(
        d,
        &["gen-data", "--digits", "3", "--out", "c.mmv1"],
        "invalid",
    );
    fails(
        d,
        &["gen-data", "--source", "idx", "--out", "c.mmv1"],
        "usage",
    );
    fails(d, &["gen-data", "--frobnicate"], "usage");
}

#[test]
fn config_file_merges_under_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("gen.cfg"),
        "# dataset\nn = 3\nframes = 4  # short\nsize = 16\nsprite-size = 4\nout = c.mmv1\n",
    )
    .unwrap();
    let stdout = ok(d, &["gen-data", "--config", "gen.cfg", "--frames", "6"]);
    assert!(stdout.contains("n = 3\n") && stdout.contains("frames = 6\n"));
    assert_eq!(
        fs::metadata(d.join("c.mmv1")).unwrap().len(),
        20 + 3 * 6 * 16 * 16 * 4
    );
    fs::write(d.join("bad.cfg"), "n = 3\nnumber = 4\n").unwrap();
    fails(
        d,
        &["gen-data", "--config", "bad.cfg", "--out", "x.mmv1"],
        "usage",
    );
    fails(d, &["gen-data", "--config", "missing.cfg"], "io");
}

#[test]
fn train_model_a_writes_checkpoint_and_log() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    dataset(d, "d.mmv1", "5");
    let mut args = vec![
        "train",
        "--model",
        "A",
        "--data",
        "d.mmv1",
        "--epochs",
        "2",
        "--batch-size",
        "5",
        "--out-ckpt",
        "a.lode",
    ];
    args.extend(SMALL);
    let stdout = ok(d, &args);
    assert!(stdout.contains("epoch=2 mean_loss="));
    assert!(d.join("a.lode").exists());
    let log = fs::read_to_string(d.join("a.log")).unwrap();
    let lines: Vec<_> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("epoch=1 ") && lines[1].starts_with("epoch=2 "));

    fails(
        d,
        &[
            "train",
            "--model",
            "B",
            "--data",
            "d.mmv1",
            "--latent-dim",
            "0",
            "--out-ckpt",
            "z.lode",
        ],
        "invalid",
    );
    fails(
        d,
        &[
            "train",
            "--model",
            "C",
            "--data",
            "d.mmv1",
            "--out-ckpt",
            "z.lode",
        ],
        "usage",
    );
    fails(
        d,
        &["train", "--data", "nope.mmv1", "--out-ckpt", "z.lode"],
        "io",
    );
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    dataset(d, "d.mmv1", "4");
    let run = |ckpt: &str, epochs: &str, resume: bool| {
        let mut args = vec![
            "train",
            "--model",
            "B",
            "--data",
            "d.mmv1",
            "--epochs",
            epochs,
            "--batch-size",
            "2",
            "--out-ckpt",
            ckpt,
        ];
        args.extend(SMALL);
        if resume {
            args.push("--resume");
        }
        ok(d, &args);
    };
    run("full.lode", "4", false);
    run("part.lode", "2", false);
    run("part.lode", "4", true);
    assert_eq!(
        fs::read(d.join("part.log")).unwrap(),
        fs::read(d.join("full.log")).unwrap()
    );
    assert_eq!(
        fs::read(d.join("part.lode")).unwrap(),
        fs::read(d.join("full.lode")).unwrap()
    );
    let mut args = vec![
        "train",
        "--model",
        "B",
        "--data",
        "d.mmv1",
        "--epochs",
        "5",
        "--batch-size",
        "3",
        "--out-ckpt",
        "part.lode",
        "--resume",
    ];
    args.extend(SMALL);
    fails(d, &args, "invalid");
}

#[test]
fn resume_refuses_a_different_schedule() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    dataset(d, "d.mmv1", "4");
    let args = |epochs: &'static str, schedule: &'static str, resume: bool| {
        let mut args = vec![
            "train",
            "--model",
            "A",
            "--data",
            "d.mmv1",
            "--epochs",
            epochs,
            "--batch-size",
            "2",
            "--lr-schedule",
            schedule,
            "--out-ckpt",
            "c.lode",
        ];
        args.extend(SMALL);
        if resume {
            args.push("--resume");
        }
        args
    };
    ok(d, &args("2", "cosine", false));
    fails(d, &args("4", "cosine", true), "invalid");
    fails(d, &args("2", "constant", true), "invalid");
    fails(d, &args("2", "warm", false), "usage");
}

#[test]
fn predict_layout_and_sampling() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    trained(d, "B", "b.lode");
    let base = [
        "predict", "--ckpt", "b.lode", "--data", "d.mmv1", "--limit", "2",
    ];
    ok(d, &[&base[..], &["--out-dir", "p"]].concat());
    let files = pgms(&d.join("p"));
    assert_eq!(files.len(), 40);
    assert!(files.contains(&"seq1_t19.pgm".to_string()));
    assert_eq!(pgm_pixels(&d.join("p/seq0_t3.pgm")).len(), 256);
    let strip = fs::read(d.join("p/seq0_strip.pgm")).unwrap();
    assert!(strip.starts_with(b"P5\n320 32\n255\n"));
    let report = fs::read_to_string(d.join("p/report.txt")).unwrap();
    assert_eq!(report.lines().count(), 20);
    assert!(d.join("p/report.json").exists());

    ok(
        d,
        &[&base[..], &["--horizon", "0", "--out-dir", "r"]].concat(),
    );
    assert_eq!(pgms(&d.join("r")).len(), 20);

    ok(
        d,
        &[
            &base[..],
            &["--samples", "3", "--seed", "4", "--out-dir", "s1"],
        ]
        .concat(),
    );
    ok(
        d,
        &[
            &base[..],
            &["--samples", "3", "--seed", "4", "--out-dir", "s2"],
        ]
        .concat(),
    );
    assert_eq!(pgms(&d.join("s1")).len(), 120);
    let px = |dir: &str, k: usize| fs::read(d.join(format!("{dir}/seq0_t15_s{k}.pgm"))).unwrap();
    assert_eq!(px("s1", 1), px("s2", 1));
    assert_ne!(px("s1", 0), px("s1", 1));
    assert_ne!(px("s1", 1), px("s1", 2));
    fails(
        d,
        &[&base[..], &["--samples", "2", "--mean", "--out-dir", "x"]].concat(),
        "usage",
    );
    fails(
        d,
        &[&base[..], &["--horizon", "11", "--out-dir", "x"]].concat(),
        "invalid",
    );
}

#[test]
fn model_a_rejects_multiple_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    trained(d, "A", "a.lode");
    fails(
        d,
        &[
            "predict",
            "--ckpt",
            "a.lode",
            "--data",
            "d.mmv1",
            "--samples",
            "2",
            "--out-dir",
            "x",
        ],
        "invalid",
    );
}

#[test]
fn interpolation_matches_prediction_on_integer_times() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    trained(d, "B", "b.lode");
    let common = ["--ckpt", "b.lode", "--data", "d.mmv1", "--seed", "2"];
    ok(
        d,
        &[
            &["predict"][..],
            &common,
            &["--horizon", "0", "--out-dir", "p"],
        ]
        .concat(),
    );
    ok(
        d,
        &[
            &["interpolate"][..],
            &common,
            &["--factor", "2", "--out-dir", "i"],
        ]
        .concat(),
    );
    let files = pgms(&d.join("i"));
    assert_eq!(files.iter().filter(|f| f.starts_with("seq0_")).count(), 19);
    let times = fs::read_to_string(d.join("i/times.txt")).unwrap();
    assert_eq!(times.lines().nth(1), Some("1 0.5"));
    for s in 0..4 {
        for t in 0..10 {
            let a = pgm_pixels(&d.join(format!("p/seq{s}_t{t}.pgm")));
            let b = pgm_pixels(&d.join(format!("i/seq{s}_i{}.pgm", 2 * t)));
            let worst = a.iter().zip(&b).map(|(x, y)| x.abs_diff(*y)).max().unwrap();
            assert!(worst <= 1, "seq {s} t {t}: {worst}");
        }
    }
    fails(
        d,
        &[
            &["interpolate"][..],
            &common,
            &["--factor", "1", "--out-dir", "x"],
        ]
        .concat(),
        "invalid",
    );
}

#[test]
fn eval_reports_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    trained(d, "A", "a.lode");
    let args = [
        "eval",
        "--ckpt",
        "a.lode",
        "--data",
        "d.mmv1",
        "--condition",
        "8",
        "--horizon",
        "5",
    ];
    let first = ok(d, &[&args[..], &["--out-dir", "e1"]].concat());
    let second = ok(d, &[&args[..], &["--out-dir", "e2"]].concat());
    let strip = |s: &str| {
        s.lines()
            .filter(|l| !l.starts_with("out-dir"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&first), strip(&second));
    let text = fs::read_to_string(d.join("e1/report.txt")).unwrap();
    assert_eq!(text.lines().count(), 13);
    assert!(text.lines().all(|l| l.contains(" baseline_mse=")));
    assert_eq!(
        fs::read(d.join("e1/report.json")).unwrap(),
        fs::read(d.join("e2/report.json")).unwrap()
    );
    fails(
        d,
        &[
            "eval",
            "--ckpt",
            "a.lode",
            "--data",
            "d.mmv1",
            "--horizon",
            "11",
        ],
        "invalid",
    );
    fails(
        d,
        &["eval", "--ckpt", "d.mmv1", "--data", "d.mmv1"],
        "format",
    );
}
