use std::path::Path;
use std::process::{Command, Output};

fn segcls(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segcls")).args(args).env_remove("SEGCLS_DEVICE").output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = segcls(&["synth", "--n", "4", "--seed", "7", "--shape", "24,24,24", "--out", s(d)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    assert_eq!(ta.len(), 4 * 5 + 1);
    // the manifest holds absolute paths; compare the volumes
    let vols = |t: &[(String, Vec<u8>)]| t.iter().filter(|(n, _)| n.ends_with(".nii.gz")).cloned().collect::<Vec<_>>();
    assert_eq!(vols(&ta), vols(&tb));
}

#[test]
fn evaluate_perfect_and_incomplete() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt");
    let pred = tmp.path().join("pred");
    assert!(segcls(&["synth", "--n", "2", "--shape", "24,24,24", "--out", s(&gt)]).status.success());
    std::fs::create_dir_all(&pred).unwrap();
    for id in ["synth_000", "synth_001"] {
        std::fs::copy(gt.join(id).join(format!("{id}_seg.nii.gz")), pred.join(format!("{id}.nii.gz"))).unwrap();
    }
    let out = tmp.path().join("m.csv");
    let o = segcls(&["evaluate", "--pred", s(&pred), "--gt", s(&gt), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "Method,Dice ET,Dice WT,Dice TC,HD95 ET,HD95 WT,HD95 TC");
    assert_eq!(*lines.last().unwrap(), "Mean,1.00000,1.00000,1.00000,0.00000,0.00000,0.00000");

    std::fs::remove_file(pred.join("synth_001.nii.gz")).unwrap();
    let o = segcls(&["evaluate", "--pred", s(&pred), "--gt", s(&gt), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("skipped 1 case"), "{}", stderr(&o));

    let o = segcls(&["evaluate", "--pred", s(&pred), "--gt", s(&tmp.path().join("missing"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_errors_exit_2_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "[scheduler]\nkind = \"exponential\"\n").unwrap();
    let o = segcls(&["train", "--config", s(&cfg), "--fold", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("scheduler.kind"), "{}", stderr(&o));

    std::fs::write(&cfg, "[train]\nbatch_size = 2\nlearning_rate = 1.0\n").unwrap();
    let o = segcls(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let o = Command::new(env!("CARGO_BIN_EXE_segcls")).args(["synth", "--out", s(tmp.path())]).env("SEGCLS_DEVICE", "tpu").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn smoke_train_then_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let start = std::time::Instant::now();
    let o = segcls(&["train", "--synthetic", "smoke", "--fold", "0", "--output", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(start.elapsed().as_secs() < 300);
    let fold = run.join("fold0");
    for f in ["best.ckpt", "last.ckpt", "train_log.jsonl"] {
        assert!(fold.join(f).is_file(), "{f} missing");
    }
    assert!(run.join("resolved_config.toml").is_file());

    let corpus = tmp.path().join("fp");
    assert!(segcls(&["synth", "--n", "2", "--seed", "3", "--shape", "48,48,48", "--speckles", "5", "--out", s(&corpus)]).status.success());
    let ckpt = fold.join("best.ckpt");
    let count = |extra: &[&str], out: &Path| -> u64 {
        let mut args = vec!["predict", "--input", s(&corpus), "--checkpoint", s(&ckpt), "--output", s(out), "--no-tta"];
        args.extend_from_slice(extra);
        let o = segcls(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("predictions.json")).unwrap()).unwrap();
        doc["cases"].as_array().unwrap().iter().map(|c| c["voxels_after_gate"].as_u64().unwrap()).sum()
    };
    let gated = count(&[], &tmp.path().join("gated"));
    let ungated = count(&["--no-gate"], &tmp.path().join("ungated"));
    assert!(gated < ungated, "gated {gated} vs ungated {ungated}");
    assert!(tmp.path().join("gated/synth_000.nii.gz").is_file());

    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let o = segcls(&["predict", "--input", s(&empty), "--checkpoint", s(&ckpt), "--output", s(&tmp.path().join("none"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 cases"));

    let o = segcls(&["predict", "--input", s(&corpus), "--checkpoint", s(&corpus.join("dataset.toml")), "--output", s(&tmp.path().join("bad"))]);
    assert_eq!(o.status.code(), Some(1));
}
