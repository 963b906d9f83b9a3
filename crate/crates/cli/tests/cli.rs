use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_attmask"));
    c.env_remove("ATTMASK_OUT_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Micro model on a small two-class synthetic set.
fn tiny_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "seed": 5,
        "epochs": 2,
        "batch_size": 4,
        "model": {
            "image_side": 8, "channels": 3, "patch_size": 4, "embed_dim": 8, "heads": 2, "depth": 2,
            "mlp_ratio": 2, "head_hidden": 16, "head_bottleneck": 8, "out_dim": 8
        },
        "augment": { "global_side": 8, "local_side": 4 },
        "optim": { "warmup_epochs": 1.0 },
        "data": {
            "synthetic": { "classes": 2, "per_class": 20, "side": 8, "channels": 3, "seed": 1 },
            "holdout_fraction": 0.25
        },
        "eval": { "k": 5 },
        "output_dir": dir.join("run"),
    });
    merge(&mut cfg, extra);
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn merge(a: &mut Value, b: Value) {
    match (a, b) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (a, b) => *a = b,
    }
}

fn pretrain(cfg: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--log-every",
        "0",
    ];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    o
}

fn checkpoint(dir: &Path, step: u64) -> PathBuf {
    dir.join("run")
        .join("checkpoints")
        .join(format!("step-{step:06}"))
}

fn eval_report(cfg: &Path, ckpt: &Path, extra: &[&str]) -> Value {
    let mut args = vec![
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn make_synth_header_size_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.amim");
    let b = dir.path().join("b.amim");
    for p in [&a, &b] {
        let o = run(&[
            "make-synth",
            "--classes",
            "3",
            "--per-class",
            "7",
            "--side",
            "8",
            "--seed",
            "4",
            "--out",
            p.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
    assert_eq!(count, 21);
    assert_eq!(bytes.len(), 17 + 21 * 8 * 8 * 3 + 2 * 21);
}

#[test]
fn make_synth_unwritable_path_is_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("missing").join("x.amim");
    let o = run(&[
        "make-synth",
        "--per-class",
        "2",
        "--side",
        "8",
        "--out",
        p.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing"));
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let o = run(&["pretrain"]);
    assert_eq!(o.status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({ "masking": { "show_ratio": 1.5 } }));
    let o = run(&["pretrain", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("masking.show_ratio"), "{}", stderr(&o));
    let cfg = tiny_config(dir.path(), json!({ "optim": { "learning_rate": 0.1 } }));
    let o = run(&["pretrain", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn zero_epochs_writes_header_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({ "epochs": 0 }));
    pretrain(&cfg, &[]);
    let metrics = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    assert!(metrics.starts_with("step,epoch,loss_total,loss_mim,loss_g,loss_lc,lr,weight_decay,teacher_temp,masked_fraction,ema_alpha,wallclock_ms"));
    assert!(checkpoint(dir.path(), 0).join("params.bin").is_file());
}

#[test]
fn runs_repeat_and_resume_bit_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let ca = tiny_config(a.path(), json!({}));
    let cb = tiny_config(b.path(), json!({}));
    let cc = tiny_config(c.path(), json!({}));
    pretrain(&ca, &[]);
    pretrain(&cb, &[]);
    pretrain(&cc, &["--max-steps", "5"]);
    pretrain(&cc, &["--resume-latest"]);
    let ma = fs::read(a.path().join("run/metrics.csv")).unwrap();
    assert_eq!(ma, fs::read(b.path().join("run/metrics.csv")).unwrap());
    assert_eq!(ma, fs::read(c.path().join("run/metrics.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&ma).lines().count(), 1 + 14);
    let last = |d: &Path| fs::read(checkpoint(d, 14).join("params.bin")).unwrap();
    assert_eq!(last(a.path()), last(c.path()));
}

#[test]
fn output_dir_env_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({ "epochs": 0 }));
    let target = dir.path().join("elsewhere");
    let o = bin()
        .args(["pretrain", "--config", cfg.to_str().unwrap()])
        .env("ATTMASK_OUT_DIR", &target)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(target.join("metrics.csv").is_file());
    assert!(!dir.path().join("run").exists());
}

#[test]
fn eval_protocols_report_consistently() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({}));
    pretrain(&cfg, &[]);
    let ckpt = checkpoint(dir.path(), 14);
    let knn = eval_report(&cfg, &ckpt, &["--protocol", "knn"]);
    assert_eq!(knn["protocol"], "knn");
    let acc = knn["results"][0]["accuracy"].as_f64().unwrap();
    assert!(dir.path().join("run/eval-knn.json").is_file());

    let few = eval_report(&cfg, &ckpt, &["--protocol", "few-shot", "--shots", "1,5"]);
    let shots: Vec<u64> = few["results"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["shots"].as_u64().unwrap())
        .collect();
    assert_eq!(shots, vec![1, 5]);

    let masked = eval_report(
        &cfg,
        &ckpt,
        &["--protocol", "masked-inference", "--ratios", "0,0.5"],
    );
    let res = masked["results"].as_array().unwrap();
    assert_eq!(res.len(), 2);
    assert_eq!(res[0]["accuracy"].as_f64().unwrap(), acc);
}

#[test]
fn untrained_two_class_knn_is_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(
        dir.path(),
        json!({ "epochs": 0, "data": { "synthetic": { "per_class": 100 } }, "eval": { "k": 20 } }),
    );
    pretrain(&cfg, &[]);
    let r = eval_report(&cfg, &checkpoint(dir.path(), 0), &["--protocol", "knn"]);
    let acc = r["results"][0]["accuracy"].as_f64().unwrap();
    assert!((0.3..=0.7).contains(&acc), "untrained accuracy {acc}");
}

#[test]
fn eval_refuses_incompatible_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({ "epochs": 0 }));
    pretrain(&cfg, &[]);
    let other = tempfile::tempdir().unwrap();
    let cfg2 = tiny_config(
        other.path(),
        json!({ "epochs": 0, "masking": { "strategy": "random" } }),
    );
    let o = run(&[
        "eval",
        "--config",
        cfg2.to_str().unwrap(),
        "--checkpoint",
        checkpoint(dir.path(), 0).to_str().unwrap(),
        "--protocol",
        "knn",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("hash"), "{}", stderr(&o));
}

#[test]
fn export_attn_file_counts_range_errors_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({ "epochs": 0 }));
    pretrain(&cfg, &[]);
    let ckpt = checkpoint(dir.path(), 0);
    let out = |name: &str| dir.path().join(name);
    for name in ["a", "b"] {
        let o = run(&[
            "export-attn",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--index",
            "3",
            "--out",
            out(name).to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let mut files: Vec<String> = fs::read_dir(out("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    let heads = 2;
    let pgm = files.iter().filter(|f| f.ends_with(".pgm")).count();
    let ppm = files.iter().filter(|f| f.ends_with(".ppm")).count();
    assert_eq!(pgm, heads + 1);
    assert_eq!(ppm, 5);
    for f in &files {
        assert_eq!(
            fs::read(out("a").join(f)).unwrap(),
            fs::read(out("b").join(f)).unwrap(),
            "{f}"
        );
    }

    let o = run(&[
        "export-attn",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--index",
        "0",
        "--layer",
        "3",
        "--out",
        out("c").to_str().unwrap(),
    ]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("[1, 2]"), "{}", stderr(&o));

    let o = run(&[
        "export-attn",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--index",
        "999",
        "--out",
        out("d").to_str().unwrap(),
    ]);
    assert_ne!(o.status.code(), Some(0));
    let missing = dir.path().join("nope.ppm");
    let o = run(&[
        "export-attn",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        missing.to_str().unwrap(),
        "--out",
        out("d").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn export_attn_reads_ppm_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), json!({ "epochs": 0 }));
    pretrain(&cfg, &[]);
    let img = dir.path().join("probe.ppm");
    let mut bytes = b"P6\n8 8\n255\n".to_vec();
    bytes.extend((0..8 * 8 * 3).map(|i| (i * 7 % 256) as u8));
    fs::write(&img, bytes).unwrap();
    let out = dir.path().join("maps");
    let o = run(&[
        "export-attn",
        "--checkpoint",
        checkpoint(dir.path(), 0).to_str().unwrap(),
        "--image",
        img.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("probe_mean.pgm").is_file());
    assert!(out.join("probe_attmask-high.ppm").is_file());
}
