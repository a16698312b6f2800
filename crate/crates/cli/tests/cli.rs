use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vibre::training::Method;
use vibre_cli::{analyze, eval, gen_data, load_data, sha256_hex, train, Manifest, Overrides, RunConfig};

const SMALL: &str = r#"
seeds = [1, 2]

[sizes]
train = 120
dev = 40
test_id = 40

[model]
d_model = 16
n_layers = 1
n_heads = 2
ffn_width = 32

[train]
epochs = 2
batch_size = 16

[analysis]
attribution_samples = 2
"#;

fn config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml(SMALL).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn vibre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vibre")).args(args).output().unwrap()
}

#[test]
fn gen_data_writes_hashed_splits_reproducibly() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = gen_data(&config(a.path())).unwrap();
    let mb = gen_data(&config(b.path())).unwrap();
    assert_eq!(ma.files, mb.files);
    for name in ["train.jsonl", "dev.jsonl", "test_id.jsonl", "test_ood.jsonl", "lexicon.json"] {
        let path = a.path().join("data").join(name);
        assert_eq!(sha256_hex(&fs::read(&path).unwrap()), ma.files[name], "{name}");
    }
    let manifest: Manifest = serde_json::from_str(&read(&a.path().join("data/manifest.json"))).unwrap();
    assert_eq!(manifest, ma);
    assert_eq!(read(&a.path().join("data/train.jsonl")).lines().count(), 120);
    assert_eq!(read(&a.path().join("data/test_ood.jsonl")).lines().count(), 40);
}

#[test]
fn tampered_data_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    gen_data(&cfg).unwrap();
    let path = dir.path().join("data/dev.jsonl");
    let text = read(&path);
    fs::write(&path, text.replacen("dev-000000", "dev-999999", 1)).unwrap();
    assert!(matches!(load_data(&cfg), Err(vibre::Error::Data(_))));
}

#[test]
fn zero_split_size_is_rejected_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.toml");
    fs::write(&cfg_path, "[sizes]\ntrain = 0\ndev = 10\ntest_id = 10\n").unwrap();
    let out = vibre(&["gen-data", "--config", cfg_path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train"));
    assert!(!dir.path().join("data").exists());
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let eval_first = vibre(&["eval", "--out", out_dir]);
    assert!(!eval_first.status.success());
    assert!(String::from_utf8_lossy(&eval_first.stderr).contains("gen-data"));
    assert!(!vibre(&["train", "--out", out_dir, "--method", "dropout"]).status.success());
    let cfg_path = dir.path().join("typo.toml");
    fs::write(&cfg_path, "seedz = [1]\n").unwrap();
    assert!(!vibre(&["gen-data", "--config", cfg_path.to_str().unwrap()]).status.success());
}

#[test]
fn train_covers_every_method_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    gen_data(&cfg).unwrap();
    let summaries = train(&cfg, false).unwrap();
    assert_eq!(summaries.len(), Method::ALL.len() * 2);
    for m in Method::ALL {
        for seed in [1, 2] {
            let run = cfg.run_dir(m, seed);
            assert!(run.join("model.json").exists());
            let log = read(&run.join("train_log.csv"));
            let mut lines = log.lines();
            assert_eq!(lines.next(), Some("epoch,batch,ce,vib,alpha,dev_micro_f1"));
            // 120 examples in batches of 16 → 8 steps per epoch.
            assert_eq!(lines.count(), 2 * 8);
        }
    }
    assert_eq!(read(&dir.path().join("runs/dev_summary.csv")).lines().count(), 1 + 8);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut straight = config(a.path());
    straight.seeds = vec![3];
    straight.methods = vec![Method::Vib, Method::EntitySubstitution];
    straight.train.epochs = 3;
    gen_data(&straight).unwrap();
    train(&straight, false).unwrap();

    let mut partial = straight.clone();
    partial.out_dir = b.path().to_path_buf();
    partial.train.epochs = 1;
    gen_data(&partial).unwrap();
    train(&partial, false).unwrap();
    partial.train.epochs = 3;
    train(&partial, true).unwrap();

    for m in [Method::Vib, Method::EntitySubstitution] {
        for file in ["model.json", "train_log.csv"] {
            assert_eq!(
                read(&straight.run_dir(m, 3).join(file)),
                read(&partial.run_dir(m, 3).join(file)),
                "{m} {file}"
            );
        }
    }
}

#[test]
fn eval_and_analyze_agree() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.methods = vec![Method::Vanilla, Method::Vib];
    cfg.seeds = vec![1];
    gen_data(&cfg).unwrap();
    train(&cfg, false).unwrap();

    let out = eval(&cfg).unwrap();
    assert_eq!(out.scores.len(), 2);
    assert!(out.summary.iter().all(|s| s.seeds == 1 && s.id_std == 0.0 && s.ood_std == 0.0));
    assert_eq!(read(&dir.path().join("eval/scores.csv")).lines().count(), 3);
    assert!(read(&dir.path().join("eval/summary.txt")).contains("vib"));
    let preds = read(&dir.path().join("eval/predictions/vib-seed1-test_ood.jsonl"));
    assert_eq!(preds.lines().count(), 40);

    let mut vib_only = cfg.clone();
    vib_only.apply(&Overrides { method: Some(Method::Vib), ..Default::default() });
    let written = analyze(&vib_only).unwrap();
    let adir = dir.path().join("analysis/vib-seed1");
    for f in ["test_id_bins.csv", "test_ood_bins.csv", "sorted_f1.csv", "attributions.jsonl", "plot_data.json"] {
        assert!(adir.join(f).exists(), "{f}");
    }
    assert!(written.iter().all(|p| p.exists()));
    assert_eq!(read(&adir.join("attributions.jsonl")).lines().count(), 2 * 2);

    let vib = out.scores.iter().find(|s| s.method == "vib").unwrap();
    let curve = read(&adir.join("sorted_f1.csv"));
    let mut lines = curve.lines();
    assert_eq!(lines.next(), Some("split,percent,size,micro_f1"));
    let at_full: Vec<(String, f64)> = lines
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|c| c[1] == "100")
        .map(|c| (c[0].to_string(), c[3].parse().unwrap()))
        .collect();
    assert_eq!(at_full, [("test_id".to_string(), vib.micro_f1_id), ("test_ood".to_string(), vib.micro_f1_ood)]);
}

#[test]
fn analyze_rejects_methods_without_variance() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.methods = vec![Method::Vanilla];
    assert!(matches!(analyze(&cfg), Err(vibre::Error::Config(_))));
    let out = vibre(&["analyze", "--out", dir.path().to_str().unwrap(), "--method", "entity_mask"]);
    assert!(!out.status.success());
}

#[test]
fn checkpoint_from_other_data_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.methods = vec![Method::Vanilla];
    cfg.seeds = vec![1];
    cfg.train.epochs = 1;
    gen_data(&cfg).unwrap();
    train(&cfg, false).unwrap();
    cfg.corpus.seed += 1;
    gen_data(&cfg).unwrap();
    assert!(matches!(eval(&cfg), Err(vibre::Error::Checkpoint(_))));
}
