use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hrm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hrm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn flops_dense_examples() {
    let o = hrm(&["flops", "--params", "1e9", "--tokens", "1.7e11", "--dense"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "1.02e21");
    let o = hrm(&["flops", "--params", "7e9", "--tokens", "6e12", "--dense"]);
    assert_eq!(stdout(&o).trim(), "2.52e23");
}

#[test]
fn flops_recurrent_from_step_equivalents() {
    let o = hrm(&["flops", "--params", "1e9", "--tokens", "1e11", "--fwd", "6", "--bwd", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // 2·N·D·(fwd + 2·bwd)
    assert_eq!(stdout(&o).trim(), "2.00e21");
}

#[test]
fn bad_arguments_and_configs_exit_2() {
    let o = hrm(&["flops", "--tokens", "1e9", "--dense"]);
    assert_eq!(o.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nwarmup = 10\n").unwrap();
    let o = hrm(&["train", "--config", s(&cfg), "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warmup"));

    fs::write(&cfg, "[model]\nd_model = 0\n").unwrap();
    let o = hrm(&["train", "--config", s(&cfg), "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = hrm(&[
        "decode",
        "--checkpoint",
        s(&dir.path().join("missing.ckpt")),
        "--tokens",
        "2 3",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn seeded_training_is_reproducible_and_checkpoints_are_usable() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny_config();
    for name in ["a", "b"] {
        let o = hrm(&[
            "train", "--config", s(&cfg), "--seed", "7", "--steps", "40",
            "--out-dir", s(root), "--run-name", name,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("exact_match_ema"));
    }
    let a = fs::read(root.join("a/metrics.jsonl")).unwrap();
    let b = fs::read(root.join("b/metrics.jsonl")).unwrap();
    assert_eq!(fs::read_to_string(root.join("a/metrics.jsonl")).unwrap().lines().count(), 40);
    assert_eq!(a, b);

    let run = root.join("a");
    for f in ["config.toml", "manifest.json", "reports/train.json", "checkpoints/final.ckpt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["outputs"].as_array().unwrap().len() >= 4);

    // A taken run name is refused rather than overwritten.
    let o = hrm(&["train", "--config", s(&cfg), "--steps", "1", "--out-dir", s(root), "--run-name", "a"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(fs::read(root.join("a/metrics.jsonl")).unwrap(), a);

    let ckpt = run.join("checkpoints/final.ckpt");
    let o = hrm(&[
        "decode", "--checkpoint", s(&ckpt), "--config", s(&cfg), "--tokens", "2 5 6 4",
        "--out-dir", s(root),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).trim().split(' ').all(|t| t.parse::<u32>().is_ok()));

    let o = hrm(&[
        "analyze-depth", "--checkpoint", s(&ckpt), "--config", s(&cfg), "--samples", "4",
        "--out-dir", s(root), "--run-name", "depth",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    for m in ["block_diff_norm", "block_cosine", "logit_lens_kl", "attention_entropy"] {
        assert!(out.contains(m), "{m}");
    }
    assert!(root.join("depth/reports").read_dir().unwrap().next().is_some());

    let o = hrm(&[
        "analyze-grads", "--checkpoint", s(&ckpt), "--config", s(&cfg), "--samples", "2",
        "--jacobian-depth", "2", "--out-dir", s(root), "--run-name", "grads",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.join("grads/reports/grads.tsv").is_file());
    assert!(root.join("grads/reports/jacobian.tsv").is_file());
}

#[test]
fn text_pipeline_commands() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus.txt");
    fs::write(
        &corpus,
        "the cat sat on the mat today\nthe dog ran in the park quickly\nsome other words are here\n",
    )
    .unwrap();

    let o = hrm(&[
        "tokenizer-train", "--corpus", s(&corpus), "--vocab-size", "300",
        "--out-dir", s(root), "--run-name", "tok",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tok = root.join("tok/tokenizer.txt");
    assert!(tok.is_file());

    let eval = root.join("eval.tsv");
    fs::write(
        &eval,
        "0.9\tthe cat sat on the mat today\n0.1\tnothing matches this at all\n\
         0.5\tthe dog ran in the park quickly\n0.2\tcompletely novel sentence here\n",
    )
    .unwrap();
    for extra in [vec![], vec!["--tokenizer", s(&tok)]] {
        let mut args = vec!["contamination", "--corpus", s(&corpus), "--eval", s(&eval), "--n", "3", "--out-dir", s(root)];
        args.extend(extra);
        let o = hrm(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let out = stdout(&o);
        assert!(out.contains("subset\tavg_contamination_pct\tk\tmean\tmu\tz"), "{out}");
        for subset in ["Clean", "Not Clean", "Not Dirty", "Dirty"] {
            assert!(out.contains(&format!("{subset}\t")), "{subset}");
        }
    }

    let docs = root.join("docs.jsonl");
    fs::write(
        &docs,
        "{\"instruction\":\"hi\",\"response\":\"<think>x</think>hello\",\"dataset\":\"a\",\"task\":\"t\",\"condition\":\"direct\"}\n",
    )
    .unwrap();
    let o = hrm(&["mixture-build", "--input", s(&docs), "--out-dir", s(root), "--run-name", "mix"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mix = fs::read_to_string(root.join("mix/mixture.jsonl")).unwrap();
    assert!(!mix.is_empty());
    assert!(!mix.contains("<think>"));
}
