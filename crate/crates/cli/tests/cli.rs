use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use stitchguard::audio::{write_wav, AudioClip};
use stitchguard::pipeline::write_toy_corpus;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stitchguard")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "train.epochs = 2\ntrain.batch_size = 8\nmodel.channel_widths = 2,4,4,8\n\
model.fc1_dim = 8\nmodel.fc2_dim = 8\npooling.kind = st\nchunk.ms = 300\n";

#[test]
fn eer_perfect_separation() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("s.tsv");
    fs::write(&s, "a\t0.900000\tfake\nb\t0.100000\tbonafide\n").unwrap();
    let o = run(&["eer", "--scores", p(&s)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "EER 0.0000");
}

#[test]
fn eer_with_label_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let s = dir.path().join("s.tsv");
    let m = dir.path().join("m.tsv");
    fs::write(&s, "a\t0.100000\nb\t0.900000\n").unwrap();
    fs::write(&m, "a\ta.wav\tfake\nb\tb.wav\tbonafide\n").unwrap();
    let o = run(&["eer", "--scores", p(&s), "--labels", p(&m)]);
    assert_eq!(stdout(&o).trim(), "EER 1.0000");
    let unlabeled = run(&["eer", "--scores", p(&s)]);
    assert_eq!(unlabeled.status.code(), Some(2));
}

#[test]
fn usage_errors() {
    let o = run(&["eer", "--scores", "x", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(run(&["nonsense"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn final_score_arithmetic() {
    let o = run(&["final-score", "--r1", "0.086", "--r2", "0.111"]);
    assert_eq!(stdout(&o).trim(), "0.1010");
    assert_eq!(run(&["final-score", "--r1", "1.5", "--r2", "0"]).status.code(), Some(2));
}

#[test]
fn train_rejects_single_class_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let clip = AudioClip::new(vec![0.1; 16000], 16000);
    let mut text = String::new();
    for i in 0..3 {
        write_wav(&clip, &dir.path().join(format!("{i}.wav"))).unwrap();
        text.push_str(&format!("u{i}\t{i}.wav\tfake\n"));
    }
    let m = dir.path().join("m.tsv");
    fs::write(&m, text).unwrap();
    let o = run(&["train", "--manifest", p(&m), "--out", p(&dir.path().join("x.stgd"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("both bonafide and fake"));
}

#[test]
fn missing_and_corrupt_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["eer", "--scores", p(&dir.path().join("absent.tsv"))]);
    assert_eq!(o.status.code(), Some(2));
    let bad = dir.path().join("bad.stgd");
    fs::write(&bad, b"STGDxx").unwrap();
    let m = dir.path().join("m.tsv");
    fs::write(&m, "").unwrap();
    let o = run(&["infer", "--model", p(&bad), "--manifest", p(&m), "--out", p(&dir.path().join("s"))]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = dir.path().join("c.conf");
    fs::write(&cfg, "train.unknown = 3\n").unwrap();
    let o = run(&["train", "--manifest", p(&m), "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn extract_train_infer_finetune_round() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_toy_corpus(&dir.path().join("data"), 4, 5, "").unwrap();
    let feats = dir.path().join("feats");
    let o = run(&["extract", "--manifest", p(&m), "--feature", "lfcc", "--dim", "20", "--nfft", "512", "--out", p(&feats)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(feats.join("bona000.feat").exists());

    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, TINY).unwrap();
    let model = dir.path().join("m.stgd");
    let log = dir.path().join("train.log");
    let o = run(&[
        "train", "--manifest", p(&m), "--features", p(&feats), "--config", p(&cfg), "--out", p(&model),
        "--seed", "4", "--threads", "2", "--log", p(&log),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<String> = fs::read_to_string(&log).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0].split('\t').count(), 4);

    let scores = dir.path().join("s.tsv");
    for mode in ["normal", "stitched"] {
        let o = run(&[
            "infer", "--model", p(&model), "--manifest", p(&m), "--mode", mode, "--chunk-ms", "300",
            "--overlap", "0.5", "--out", p(&scores),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let text = fs::read_to_string(&scores).unwrap();
        assert_eq!(text.lines().count(), 8);
        for line in text.lines() {
            let cols: Vec<&str> = line.split('\t').collect();
            assert_eq!(cols.len(), 2);
            assert_eq!(cols[1].split('.').nth(1).unwrap().len(), 6);
        }
        let o = run(&["eer", "--scores", p(&scores), "--labels", p(&m)]);
        assert_eq!(o.status.code(), Some(0));
        assert!(stdout(&o).starts_with("EER "));
    }
    let o = run(&["infer", "--model", p(&model), "--manifest", p(&m), "--mode", "sideways", "--out", p(&scores)]);
    assert_eq!(o.status.code(), Some(1));

    let tuned = dir.path().join("tuned.stgd");
    let o = run(&[
        "finetune", "--model", p(&model), "--manifest", p(&m), "--config", p(&cfg), "--out", p(&tuned), "--threads", "1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_ne!(fs::read(&model).unwrap(), fs::read(&tuned).unwrap());
}

#[test]
fn augment_builds_and_replays_plan() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_toy_corpus(&dir.path().join("data"), 2, 9, "").unwrap();
    let noise = dir.path().join("noise.wav");
    write_wav(&AudioClip::new((0..8000).map(|i| ((i * 7919) % 200) as f64 / 400.0 - 0.25).collect(), 16000), &noise).unwrap();
    let nm = dir.path().join("noise.list");
    fs::write(&nm, "noise.wav\n").unwrap();
    let rir = dir.path().join("rir.wav");
    write_wav(&AudioClip::new(vec![0.8, 0.0, 0.3, 0.1], 16000), &rir).unwrap();
    let rm = dir.path().join("rir.list");
    fs::write(&rm, "rir.wav\n").unwrap();
    let plan = dir.path().join("plan.tsv");

    let go = |out: &Path| {
        run(&[
            "augment", "--manifest", p(&m), "--plan", p(&plan), "--noise-manifest", p(&nm), "--rir-manifest", p(&rm),
            "--out", p(out), "--seed", "7", "--expansion", "2", "--distortion-budget", "6",
            "--compression-budget", "4", "--threads", "1",
        ])
    };
    let a = dir.path().join("a");
    let o = go(&a);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(plan.exists());
    let manifest = fs::read_to_string(a.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 10);
    assert!(!a.join(".work").exists());

    let b = dir.path().join("b");
    assert_eq!(go(&b).status.code(), Some(0));
    for line in manifest.lines() {
        let id = line.split('\t').next().unwrap();
        let name = format!("{id}.wav");
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }

    let over = run(&[
        "augment", "--manifest", p(&m), "--plan", p(&dir.path().join("p2.tsv")), "--out", p(&dir.path().join("c")),
        "--expansion", "1", "--distortion-budget", "50",
    ]);
    assert_eq!(over.status.code(), Some(2));
}

#[test]
fn external_codec_template_failure_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_toy_corpus(&dir.path().join("data"), 1, 2, "").unwrap();
    let o = run(&[
        "augment", "--manifest", p(&m), "--plan", p(&dir.path().join("plan.tsv")), "--out", p(&dir.path().join("o")),
        "--codec-cmd", "definitely-not-a-real-encoder {in} {out} {bitrate} {codec}", "--expansion", "1",
        "--distortion-budget", "0", "--compression-budget", "2",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
