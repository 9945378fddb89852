use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn casgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_casgan"))
        .args(args)
        .output()
        .expect("spawn casgan")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"{
    "image_size": 16,
    "latent_channels": 8,
    "gen_base_width": 4,
    "n_res_blocks": 2,
    "disc_base_width": 4,
    "disc_layers": 2,
    "seg_depth": 2,
    "seg_base_width": 4,
    "seg_steps": 4,
    "extractor_dim": 8,
    "extractor_steps": 3,
    "buffer_size": 2,
    "epochs_total": 2,
    "epochs_constant": 1,
    "seed": 5
}"#;

fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, SMALL).unwrap();
    p
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&casgan(&["--help"])), 0);
    let help = String::from_utf8_lossy(&casgan(&["--help"]).stdout).into_owned();
    for flag in ["--config", "--seed", "--checkpoint", "--data", "--out"] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
    for sub in ["synth-data", "train-seg", "train", "infer", "evaluate", "plot"] {
        assert_eq!(code(&casgan(&[sub, "--help"])), 0, "{sub} --help");
    }
    assert_eq!(code(&casgan(&[])), 2);
    assert_eq!(code(&casgan(&["plot", "--bogus"])), 2);
    assert_eq!(code(&casgan(&["frobnicate"])), 2);
}

#[test]
fn config_errors_are_user_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"image_size\": 64,\n \"lambda2\": }").unwrap();
    let o = casgan(&["plot", "--config", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    let o = casgan(&["plot", "--config", s(&dir.path().join("absent.json"))]);
    assert_eq!(code(&o), 2);
    let o = casgan(&["plot", "--set", "image_size=60", "--set", "downsample_ratio=8"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("image_size"), "{}", stderr(&o));
}

#[test]
fn plot_contract() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    assert_eq!(code(&casgan(&["plot", "--log", s(&empty), "--out", s(&dir.path().join("p0"))])), 2);

    let header = "step,epoch,lr,pred,gan_angio,gan_bg,gan_sem,cycle_img,cycle_lat,recon,total,d_angio,d_bg,d_sem";
    let row = |i: usize| {
        let v = 1.0 / (i as f64 + 1.0);
        format!("{i},0,0.0002,{v},{v},{v},{v},{v},{v},{v},{v},{v},{v},{v}")
    };
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, format!("{header}\n{}\n{}\n1,2\n", row(0), row(1))).unwrap();
    let o = casgan(&["plot", "--log", s(&bad), "--out", s(&dir.path().join("p1"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));

    let good = dir.path().join("good.csv");
    let rows: Vec<String> = (0..300).map(row).collect();
    fs::write(&good, format!("{header}\n{}\n", rows.join("\n"))).unwrap();
    let (o1, o2) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&casgan(&["plot", "--log", s(&good), "--out", s(&o1)])), 0);
    assert_eq!(code(&casgan(&["plot", "--log", s(&good), "--out", s(&o2)])), 0);
    let mut names: Vec<String> = fs::read_dir(&o1)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(names.contains(&"losses.svg".to_string()));
    assert!(names.contains(&"lr.svg".to_string()));
    assert_eq!(names.len(), 1 + 11 + 1);
    for n in names {
        assert_eq!(fs::read(o1.join(&n)).unwrap(), fs::read(o2.join(&n)).unwrap(), "{n}");
    }
}

#[test]
fn infer_on_empty_dir() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    fs::create_dir(&input).unwrap();
    let o = casgan(&["infer", "--data", s(&input), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no images found"), "{}", stderr(&o));
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d);
    let data = d.join("data");
    let o = casgan(&[
        "synth-data", "--config", s(&cfg), "--out", s(&data), "--n-background", "5", "--n-angio", "4",
        "--n-annotated", "6", "--n-test", "5",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(data.join("manifest.json").is_file());

    // evaluate before any extractor exists
    let o = casgan(&["evaluate", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&d.join("none")), "--out", s(&d.join("e0"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train-seg"), "{}", stderr(&o));

    let seg = d.join("seg");
    let o = casgan(&["train-seg", "--config", s(&cfg), "--data", s(&data), "--out", s(&seg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(seg.join("manifest.json").is_file() && seg.join("seg_report.json").is_file());

    // train without a segmenter
    let o = casgan(&["train", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&data), "--out", s(&d.join("t0"))]);
    assert_eq!(code(&o), 2);

    let run = d.join("run");
    let o = casgan(&[
        "train", "--config", s(&cfg), "--seed", "11", "--data", s(&data), "--checkpoint", s(&seg), "--out", s(&run),
        "--max-steps", "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echoed: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 11, "flag overrides file");
    assert_eq!(echoed["image_size"], 16, "file overrides default");
    assert_eq!(echoed["lambda2"], 10.0, "default survives");
    let log = fs::read_to_string(run.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let o = casgan(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&run.join("checkpoints/final")), "--out",
        s(&run), "--max-steps", "5", "--resume",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(run.join("loss_log.csv")).unwrap().lines().count(), 6);

    let (i1, i2) = (d.join("i1"), d.join("i2"));
    for out in [&i1, &i2] {
        let o = casgan(&["infer", "--checkpoint", s(&run), "--data", s(&data.join("testA")), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let mut files: Vec<String> = fs::read_dir(&i1)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files.len(), 15);
    for suffix in ["_gen.png", "_attn.png", "_ctx.png"] {
        assert_eq!(files.iter().filter(|f| f.ends_with(suffix)).count(), 5);
    }
    for f in &files {
        assert_eq!(fs::read(i1.join(f)).unwrap(), fs::read(i2.join(f)).unwrap(), "{f}");
    }

    let ev = d.join("eval");
    let o = casgan(&[
        "evaluate", "--checkpoint", s(&run), "--extractor", s(&seg), "--data", s(&data), "--out", s(&ev),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    for k in ["fid", "mmd", "mmd_times_10", "bandwidth", "n", "m", "extractor_fingerprint"] {
        assert!(rep.get(k).is_some(), "{k}");
    }
    assert_eq!(rep["mmd_times_10"].as_f64().unwrap(), 10.0 * rep["mmd"].as_f64().unwrap());
    assert_eq!(rep["n"], 5);

    let sc = d.join("selfc");
    let o = casgan(&["evaluate", "--extractor", s(&seg), "--data", s(&data), "--out", s(&sc), "--self-compare"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(sc.join("eval.json")).unwrap()).unwrap();
    assert!(rep["fid"].as_f64().unwrap() <= 1e-6);
    assert!(rep["mmd"].as_f64().unwrap() <= 1e-6);

    fs::remove_dir_all(data.join("testB")).unwrap();
    let o = casgan(&["evaluate", "--checkpoint", s(&run), "--extractor", s(&seg), "--data", s(&data), "--out", s(&ev)]);
    assert_eq!(code(&o), 2);

    // a diverging run is an internal failure, not a user error
    let o = casgan(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&seg), "--out", s(&d.join("boom")),
        "--max-steps", "6", "--set", "lr0=1e250",
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}
