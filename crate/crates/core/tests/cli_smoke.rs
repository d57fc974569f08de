use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use nestseg::cli::run;

fn argv(parts: &[&dyn AsRef<std::ffi::OsStr>]) -> Vec<OsString> {
    std::iter::once(OsString::from("nestseg")).chain(parts.iter().map(|p| p.as_ref().to_os_string())).collect()
}

/// File path → contents for every file below `root`.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.clone(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_train_evaluate_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(run(argv(&[&"synth", &"--out", &data, &"--images", &"8", &"--size", &"32x32", &"--seed", &"7"])), 0);
    let before = snapshot(&data);

    let config = tmp.path().join("c.toml");
    std::fs::write(&config, "model_preset = \"compact\"\nepochs = 1\n").unwrap();
    let ck = tmp.path().join("ck");
    let code = run(argv(&[
        &"train", &"--config", &config, &"--task", &"binary", &"--fold", &"0", &"--data", &data, &"--out", &ck,
    ]));
    assert_eq!(code, 0);
    for name in ["best.ckpt", "last.ckpt", "history.json", "run_manifest.json"] {
        assert!(ck.join(name).is_file(), "{name}");
    }

    let eval = tmp.path().join("eval");
    let code = run(argv(&[&"evaluate", &"--checkpoint", &ck.join("best.ckpt"), &"--data", &data, &"--out", &eval]));
    assert_eq!(code, 0);
    let md = std::fs::read_to_string(eval.join("report.md")).unwrap();
    assert!(md.contains("| Task | IOU(%) | Dice(%) |"));
    assert!(md.contains("| Dataset | Images | mIOU |"));
    assert!(eval.join("report.csv").is_file() && eval.join("report.json").is_file());

    let pred = tmp.path().join("pred");
    let frames = data.join("video_01").join("frames");
    let code = run(argv(&[&"predict", &"--checkpoint", &ck.join("last.ckpt"), &"--frames", &frames, &"--out", &pred, &"--colorize"]));
    assert_eq!(code, 0);
    assert!(pred.join("frames").join("frame000_color.png").is_file());

    assert_eq!(snapshot(&data), before);
}

#[test]
fn missing_checkpoint_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let code = run(argv(&[&"evaluate", &"--checkpoint", &tmp.path().join("missing.ckpt"), &"--data", &tmp.path()]));
    assert_eq!(code, 2);
}

#[test]
fn bad_usage_exits_one() {
    assert_eq!(run(argv(&[&"train", &"--task", &"binary"])), 1);
    assert_eq!(run(argv(&[&"folds", &"--videos", &"a,b", &"--k", &"5"])), 2);
}
