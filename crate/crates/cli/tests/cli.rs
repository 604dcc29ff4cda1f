use std::path::Path;
use std::process::{Command, Output};

fn dwpseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dwpseg"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn dwpseg")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY_CONFIG: &str = r#"{
  "seed": 7,
  "dims": [16, 16, 16],
  "source_volumes": 4,
  "target_volumes": 10,
  "test_size": 4,
  "train_sizes": [5],
  "seeds": [1],
  "unet": {"levels": 2, "base_channels": 2, "in_channels": 1},
  "source_epochs": 4,
  "target_epochs": 2,
  "snapshot_burn_in": 1,
  "snapshot_every": 2,
  "vae": {"latent_dim": 2, "encoder_hidden": [8], "decoder_hidden": [8], "epochs": 3}
}"#;

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("cfg.json"), TINY_CONFIG).unwrap();
    for d in ["a", "b"] {
        let out = dwpseg(
            &[
                "gen-data",
                "--out",
                d,
                "--seed",
                "7",
                "--volumes",
                "2",
                "--config",
                "cfg.json",
            ],
            tmp.path(),
        );
        assert_ok(&out);
    }
    assert_eq!(
        dir_bytes(&tmp.path().join("a")),
        dir_bytes(&tmp.path().join("b"))
    );
}

#[test]
fn stage_pipeline_produces_runnable_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    std::fs::write(root.join("cfg.json"), TINY_CONFIG).unwrap();

    assert_ok(&dwpseg(
        &["gen-data", "--out", "data", "--seed", "7", "--config", "cfg.json"],
        root,
    ));
    assert_ok(&dwpseg(
        &[
            "train-source",
            "--data",
            "data",
            "--out",
            "source.ckpt",
            "--config",
            "cfg.json",
        ],
        root,
    ));
    assert!(root.join("source.ckpt").is_file());
    assert!(root.join("source.ckpt.snapshots").is_dir());

    assert_ok(&dwpseg(
        &[
            "harvest",
            "--snapshots",
            "source.ckpt.snapshots",
            "--mode",
            "shared",
            "--out",
            "kernels.kds",
        ],
        root,
    ));
    assert_ok(&dwpseg(
        &[
            "train-prior",
            "--kernels",
            "kernels.kds",
            "--out",
            "prior.ckpt",
            "--config",
            "cfg.json",
        ],
        root,
    ));
    assert!(root.join("prior.ckpt").is_file());
    assert!(root.join("prior.ckpt.json").is_file());

    assert_ok(&dwpseg(
        &[
            "sample-prior",
            "--prior",
            "prior.ckpt",
            "--n",
            "4",
            "--out",
            "grid.pgm",
        ],
        root,
    ));
    let pgm = std::fs::read(root.join("grid.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));

    // run expects the table layout: data/target under the workdir
    assert_ok(&dwpseg(
        &[
            "run",
            "--method",
            "dwp",
            "--train-size",
            "5",
            "--seed",
            "1",
            "--out",
            "one.csv",
            "--config",
            "cfg.json",
            "--workdir",
            ".",
        ],
        root,
    ));
    let csv = std::fs::read_to_string(root.join("one.csv")).unwrap();
    assert!(csv.starts_with("method,train_size,seed,dice,iou,wall_seconds\n"));
    assert!(csv.lines().nth(1).unwrap().starts_with("dwp,5,1,"));
}

#[test]
fn table_emits_csv_and_table() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    std::fs::write(root.join("cfg.json"), TINY_CONFIG).unwrap();
    let out = dwpseg(&["table", "--config", "cfg.json", "--out", "work"], root);
    assert_ok(&out);
    let csv = std::fs::read_to_string(root.join("work/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5); // header + 4 methods x 1 size x 1 seed
    assert!(root.join("work/table.txt").is_file());
    let manifest = std::fs::read_to_string(root.join("work/manifest.json")).unwrap();
    assert!(manifest.contains("\"version\""));
    assert!(manifest.contains("\"seed\": 7"));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dwpseg(&["frobnicate"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_config_is_config_error_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("cfg.json"), "{broken").unwrap();
    let out = dwpseg(
        &["table", "--config", "cfg.json", "--out", "work"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(!tmp.path().join("work/metrics.csv").exists());
}

#[test]
fn unknown_config_key_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("cfg.json"), r#"{"sed": 1}"#).unwrap();
    let out = dwpseg(
        &["table", "--config", "cfg.json", "--out", "work"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn missing_artifacts_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dwpseg(
        &[
            "run",
            "--method",
            "ri",
            "--train-size",
            "5",
            "--seed",
            "1",
            "--out",
            "one.csv",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let out = dwpseg(
        &[
            "harvest",
            "--snapshots",
            "nope",
            "--mode",
            "shared",
            "--out",
            "k.kds",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn corrupt_kernel_dataset_exit_5() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("cfg.json"), TINY_CONFIG).unwrap();
    std::fs::write(tmp.path().join("bad.kds"), b"JUNK\nxxxx").unwrap();
    let out = dwpseg(
        &[
            "train-prior",
            "--kernels",
            "bad.kds",
            "--out",
            "p.ckpt",
            "--config",
            "cfg.json",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_method_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dwpseg(
        &[
            "run",
            "--method",
            "sgd",
            "--train-size",
            "5",
            "--seed",
            "1",
            "--out",
            "x.csv",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}
