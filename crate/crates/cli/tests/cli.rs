use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dram_core::config::RunConfig;
use dram_core::dataset::read_dataset;
use dram_core::experiment::{prediction_path, split, write_predictions};
use dram_core::io::write_labels;
use dram_core::model::{load_checkpoint, Model};
use dram_core::pipeline::{checkpoint_path, LOG_FILE};
use dram_core::volume::LabelMap;

const TINY: &str = r#"
[phantom]
grid_size = 32

[network]
chunk_size = [16, 16, 16]
base_width = 2

[train]
epochs = 1

[eval]
num_cases = 3
num_train = 2
"#;

fn dram(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dram"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    // Top-level keys must precede the first table.
    fs::write(&path, format!("{extra}\n{TINY}")).unwrap();
    path
}

fn generate(dir: &Path, cfg: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = dram(&["generate", "--config", s(cfg), "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn log_column(run: &Path, col: usize) -> Vec<f64> {
    fs::read_to_string(run.join(LOG_FILE))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(col).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn generate_is_deterministic_and_validates_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        assert!(dram(&["generate", "--config", s(&cfg), "--out", s(d)]).status.success());
    }
    let ta = read_tree(&a);
    assert_eq!(ta.len(), 3 * 4 + 1);
    assert_eq!(ta, read_tree(&b));

    let empty = tmp.path().join("empty");
    assert!(dram(&["generate", "--config", s(&cfg), "--out", s(&empty), "--n-cases", "0"]).status.success());
    assert_eq!(
        fs::read_to_string(empty.join("severity.csv")).unwrap(),
        "case_id,lobe_id,score,true_fraction,r_l,r_u\n"
    );

    let bad = write_config(tmp.path(), "bad.toml", "colour = 1");
    let never = tmp.path().join("never");
    let out = dram(&["generate", "--config", s(&bad), "--out", s(&never)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
    assert!(!never.exists());
}

#[test]
fn train_wires_method_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let proposed = write_config(tmp.path(), "p.toml", "method = \"proposed\"");
    let data = generate(tmp.path(), &proposed);
    let run = tmp.path().join("run_p");
    let out = dram(&["train", "--config", s(&proposed), "--data", s(&data), "--run", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(log_column(&run, 4).iter().any(|&v| v > 0.0));
    assert!(log_column(&run, 5).iter().any(|&v| v > 0.0));
    let echo = fs::read_to_string(run.join("config.toml")).unwrap();
    assert_eq!(RunConfig::from_toml(&echo).unwrap(), RunConfig::load(&proposed).unwrap());

    let plain = write_config(tmp.path(), "d.toml", "method = \"dram\"");
    let run = tmp.path().join("run_d");
    assert!(dram(&["train", "--config", s(&plain), "--data", s(&data), "--run", s(&run)]).status.success());
    assert!(log_column(&run, 4).iter().all(|&v| v == 0.0));
    assert!(log_column(&run, 5).iter().all(|&v| v == 0.0));
}

#[test]
fn zero_epochs_checkpoint_is_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), "z.toml", "");
    let text = fs::read_to_string(&cfg_path).unwrap().replace("epochs = 1", "epochs = 0");
    fs::write(&cfg_path, text).unwrap();
    let data = generate(tmp.path(), &cfg_path);
    let run = tmp.path().join("run");
    assert!(dram(&["train", "--config", s(&cfg_path), "--data", s(&data), "--run", s(&run)]).status.success());
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let (model, echo) = load_checkpoint(&checkpoint_path(&run, 0)).unwrap();
    assert_eq!(model, Model::<f32>::new(&cfg.network, cfg.spec(), cfg.train.seed).unwrap());
    assert_eq!(echo, cfg.to_toml());
}

#[test]
fn input_and_divergence_errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "method = \"dram\"");
    let missing = tmp.path().join("missing");
    let run = tmp.path().join("run");
    assert_eq!(
        dram(&["train", "--config", s(&cfg), "--data", s(&missing), "--run", s(&run)]).status.code(),
        Some(2)
    );
    let data = generate(tmp.path(), &cfg);
    assert_eq!(
        dram(&["evaluate", "--config", s(&cfg), "--data", s(&data), "--run", s(&run)]).status.code(),
        Some(2)
    );

    let hot = tmp.path().join("hot.toml");
    let text = fs::read_to_string(&cfg).unwrap().replace("epochs = 1", "epochs = 1\nlearning_rate = 1e30");
    fs::write(&hot, text).unwrap();
    let out = dram(&["train", "--config", s(&hot), "--data", s(&data), "--run", s(&run)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

fn dsc_column(run: &Path) -> Vec<String> {
    fs::read_to_string(run.join("metrics.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().to_string())
        .collect()
}

#[test]
fn evaluate_scores_reference_and_empty_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = write_config(tmp.path(), "c.toml", "");
    let data = generate(tmp.path(), &cfg_path);
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let cases = read_dataset(&data).unwrap();
    let (_, test) = split(&cfg, &cases);

    let perfect = tmp.path().join("perfect");
    let refs: Vec<LabelMap> = test.iter().map(|c| c.lesion_map.map(|v| (v > 0) as u8 * 2)).collect();
    write_predictions(&perfect, test, &refs).unwrap();
    let out = dram(&["evaluate", "--config", s(&cfg_path), "--data", s(&data), "--run", s(&perfect), "--overlays"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dsc_column(&perfect).iter().all(|v| v == "100.0000"));
    for f in ["metrics.csv", "summary.csv", "kappa.csv", "table.txt"] {
        assert!(perfect.join(f).is_file(), "{f}");
    }
    assert!(String::from_utf8_lossy(&out.stdout).contains("DSC"));
    let first = read_tree(&perfect);
    assert!(dram(&["evaluate", "--config", s(&cfg_path), "--data", s(&data), "--run", s(&perfect), "--overlays"])
        .status
        .success());
    assert_eq!(first, read_tree(&perfect));
    assert_eq!(first.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "png")).count(), test.len());

    let empty = tmp.path().join("empty");
    for c in test {
        write_labels(&prediction_path(&empty, &c.id), &c.lesion_map.map(|_| 0)).unwrap();
    }
    assert!(dram(&["evaluate", "--config", s(&cfg_path), "--data", s(&data), "--run", s(&empty)]).status.success());
    let metrics = fs::read_to_string(empty.join("metrics.csv")).unwrap();
    for (c, line) in test.iter().zip(metrics.lines().skip(1)) {
        let f: Vec<&str> = line.split(',').collect();
        if c.lesion_map.count_nonzero() > 0 {
            assert_eq!(f[1], "0.0000");
        }
        assert_eq!(f[5], "1", "fdr flag");
    }
}

#[test]
fn evaluate_infers_from_the_latest_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "method = \"dram-p\"");
    let data = generate(tmp.path(), &cfg);
    let run = tmp.path().join("run");
    assert!(dram(&["train", "--config", s(&cfg), "--data", s(&data), "--run", s(&run)]).status.success());
    // The run's echo supplies the configuration.
    let out = dram(&["evaluate", "--data", s(&data), "--run", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("dram-p"));
    assert_eq!(dsc_column(&run).len(), 1);
}
