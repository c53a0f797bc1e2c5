//! End-to-end runs: dataset and proposal caching, training with resumable
//! run directories, test-set inference and the method comparison.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;

use crate::config::{Method, RunConfig};
use crate::dataset::{has_proposal, read_dataset, read_proposal, write_dataset, write_proposal, Case, SEVERITY_FILE};
use crate::error::{Error, Result};
use crate::io::{read_labels, write_labels};
use crate::metrics::{evaluate_cases, format_table, MetricsReport, TABLE_FILE};
use crate::model::{load_checkpoint, Model, LESION};
use crate::phantom::{case_id, generate_case};
use crate::pipeline::{build_samples, predict, train, RunOutput, CHECKPOINT_DIR};
use crate::proposal::{propose, CandidateResult, VesselnessConfig};
use crate::volume::LabelMap;

pub const CONFIG_FILE: &str = "config.toml";
pub const PREDICTION_DIR: &str = "predictions";
pub const RESULTS_FILE: &str = "results.csv";

/// Phantom cases `0..n` of the configuration, generated concurrently.
pub fn generate_cases(cfg: &RunConfig, n: usize) -> Result<Vec<Case>> {
    cfg.phantom.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| Ok(Case::from_phantom(case_id(i), generate_case(&cfg.phantom, i as u64)?)))
        .collect()
}

/// Reads the dataset in `data_dir`, generating `eval.num_cases` phantoms
/// there first when it holds none.
pub fn ensure_dataset(cfg: &RunConfig, data_dir: &Path) -> Result<Vec<Case>> {
    if !data_dir.join(SEVERITY_FILE).is_file() {
        info!("generating {} phantoms in {}", cfg.eval.num_cases, data_dir.display());
        write_dataset(data_dir, &generate_cases(cfg, cfg.eval.num_cases)?)?;
    }
    read_dataset(data_dir)
}

/// Records the filter settings the stored proposals were computed with.
pub const PROPOSAL_CONFIG_FILE: &str = "proposal_config.toml";

/// Proposals for every case. Stored proposals are reused only when they
/// were computed with the same filter settings; otherwise all are redone.
pub fn ensure_proposals(data_dir: &Path, cases: &[Case], config: &VesselnessConfig) -> Result<Vec<CandidateResult>> {
    config.validate()?;
    let stamp_path = data_dir.join(PROPOSAL_CONFIG_FILE);
    let stamp = toml::to_string(config).expect("filter settings serialize");
    let fresh = fs::read_to_string(&stamp_path).is_ok_and(|s| s == stamp);
    if !fresh {
        // Invalidate before recomputing so an interrupted run is not trusted.
        if stamp_path.exists() {
            fs::remove_file(&stamp_path).map_err(|e| Error::Io {
                path: stamp_path.clone(),
                source: e,
            })?;
        }
        info!("computing proposals for {} cases", cases.len());
    }
    let proposals = cases
        .par_iter()
        .map(|c| {
            if fresh && has_proposal(data_dir, &c.id) {
                return read_proposal(data_dir, &c.id);
            }
            let p = propose(&c.image, &c.lobe_map, config)?;
            write_proposal(data_dir, &c.id, &p)?;
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    if !fresh {
        fs::write(&stamp_path, stamp).map_err(|e| Error::Io {
            path: stamp_path,
            source: e,
        })?;
    }
    Ok(proposals)
}

/// Train and test halves: the first `eval.num_train` cases train.
pub fn split<'a, T>(cfg: &RunConfig, items: &'a [T]) -> (&'a [T], &'a [T]) {
    items.split_at(cfg.eval.num_train.min(items.len()))
}

/// The highest-epoch checkpoint of a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Option<(usize, PathBuf)> {
    fs::read_dir(run_dir.join(CHECKPOINT_DIR))
        .ok()?
        .filter_map(|e| {
            let path = e.ok()?.path();
            let epoch = path.file_name()?.to_str()?.strip_prefix("epoch_")?.strip_suffix(".ckpt")?.parse().ok()?;
            Some((epoch, path))
        })
        .max()
}

/// Trains the configured method's model on `cases` into `run_dir`, echoing
/// the configuration to `config.toml` and into every checkpoint.
pub fn train_run(cfg: &RunConfig, cases: &[Case], proposals: &[CandidateResult], run_dir: &Path) -> Result<Model<f32>> {
    cfg.validate()?;
    let chunk = cfg.network.chunk_size;
    let samples: Vec<_> = cases
        .par_iter()
        .zip(proposals)
        .map(|(c, p)| build_samples(c, p, chunk))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let echo = cfg.to_toml();
    let path = run_dir.join(CONFIG_FILE);
    fs::write(&path, &echo).map_err(|e| Error::io(&path, e))?;
    let out = train(
        &samples,
        &cfg.network,
        cfg.spec(),
        cfg.variant(),
        &cfg.train,
        Some(RunOutput { dir: run_dir, echo: &echo }),
    )?;
    Ok(out.model)
}

/// Loads the run's final checkpoint when it was produced by the same
/// configuration, otherwise trains from scratch.
pub fn load_or_train(cfg: &RunConfig, cases: &[Case], proposals: &[CandidateResult], run_dir: &Path) -> Result<Model<f32>> {
    if let Some((epoch, path)) = latest_checkpoint(run_dir) {
        if epoch == cfg.train.epochs {
            let (model, echo) = load_checkpoint(&path)?;
            if echo == cfg.to_toml() {
                info!("reusing {}", path.display());
                return Ok(model);
            }
        }
    }
    info!("training {} into {}", cfg.method, run_dir.display());
    train_run(cfg, cases, proposals, run_dir)
}

/// Label maps of `cases`, predicted concurrently.
pub fn predict_cases(model: &Model<f32>, cases: &[Case], proposals: &[CandidateResult], post: bool) -> Result<Vec<LabelMap>> {
    cases
        .par_iter()
        .zip(proposals)
        .map(|(c, p)| predict(model, &c.image, &c.lobe_map, &p.candidate_map, post))
        .collect()
}

pub fn prediction_path(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(PREDICTION_DIR).join(format!("{case_id}.dvol"))
}

pub fn write_predictions(dir: &Path, cases: &[Case], preds: &[LabelMap]) -> Result<()> {
    for (c, p) in cases.iter().zip(preds) {
        write_labels(&prediction_path(dir, &c.id), p)?;
    }
    Ok(())
}

/// Stored predictions for `cases`, or `None` if any is missing.
pub fn read_predictions(dir: &Path, cases: &[Case]) -> Result<Option<Vec<LabelMap>>> {
    if !cases.iter().all(|c| prediction_path(dir, &c.id).is_file()) {
        return Ok(None);
    }
    cases
        .iter()
        .map(|c| {
            let p = read_labels(&prediction_path(dir, &c.id))?;
            c.lobe_map.ensure_aligned(&p, "prediction")?;
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

pub fn lesion_masks(preds: &[LabelMap]) -> Vec<Vec<bool>> {
    preds
        .iter()
        .map(|p| p.data().iter().map(|&v| v == LESION as u8).collect())
        .collect()
}

/// Scores predictions and writes the report files into `dir`.
pub fn evaluate_predictions(cfg: &RunConfig, cases: &[Case], preds: &[LabelMap], dir: &Path) -> Result<MetricsReport> {
    let report = MetricsReport::new(evaluate_cases(cases, &lesion_masks(preds))?, cfg.eval.bootstrap_seed);
    report.write(dir)?;
    Ok(report)
}

/// Trains every needed base model under `out_dir/runs/`, evaluates each
/// method on the test split under `out_dir/eval/<method>/` and writes the
/// comparison table and a one-row-per-method results file.
pub fn run_experiment(
    cfg: &RunConfig,
    methods: &[Method],
    data_dir: &Path,
    out_dir: &Path,
) -> Result<Vec<(Method, MetricsReport)>> {
    cfg.validate()?;
    let cases = ensure_dataset(cfg, data_dir)?;
    let proposals = ensure_proposals(data_dir, &cases, &cfg.proposal)?;
    let (train_cases, test_cases) = split(cfg, &cases);
    let (train_props, test_props) = split(cfg, &proposals);
    if test_cases.is_empty() || train_cases.is_empty() {
        return Err(Error::Config("experiment needs nonempty train and test splits".into()));
    }
    let mut bases: Vec<Method> = methods.iter().map(|m| m.base()).collect();
    bases.sort();
    bases.dedup();
    let mut reports = Vec::new();
    for base in bases {
        let run_cfg = cfg.with_method(base);
        let model = load_or_train(&run_cfg, train_cases, train_props, &out_dir.join("runs").join(base.name()))?;
        for &m in methods.iter().filter(|m| m.base() == base) {
            let dir = out_dir.join("eval").join(m.name());
            let preds = predict_cases(&model, test_cases, test_props, m.post())?;
            write_predictions(&dir, test_cases, &preds)?;
            let report = evaluate_predictions(cfg, test_cases, &preds, &dir)?;
            info!("{m}: mean DSC {:.2}", report.mean("dsc").unwrap_or(f64::NAN));
            reports.push((m, report));
        }
    }
    reports.sort_by_key(|(m, _)| methods.iter().position(|x| x == m));
    write_comparison(out_dir, &reports)?;
    Ok(reports)
}

/// Writes `table.txt` and `results.csv` for a set of evaluated methods.
pub fn write_comparison(out_dir: &Path, reports: &[(Method, MetricsReport)]) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows: Vec<(&str, &MetricsReport)> = reports.iter().map(|(m, r)| (m.name(), r)).collect();
    let path = out_dir.join(TABLE_FILE);
    fs::write(&path, format_table(&rows)).map_err(|e| Error::io(&path, e))?;

    let cols = [
        "dsc",
        "apd",
        "svrd",
        "fdr",
        "tpr_consolidation",
        "tpr_ground_glass",
        "tpr_mixed",
        "acc",
    ];
    let path = out_dir.join(RESULTS_FILE);
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["method"];
    header.extend(cols);
    header.extend(["kappa", "kappa_low", "kappa_high"]);
    w.write_record(&header)?;
    let f = |v: f64| if v.is_finite() { format!("{v:.4}") } else { String::new() };
    for (m, r) in reports {
        let mut rec = vec![m.name().to_string()];
        rec.extend(cols.iter().map(|c| f(r.mean(c).unwrap_or(f64::NAN))));
        match &r.kappa {
            Ok(k) => rec.extend([k.kappa, k.ci_low, k.ci_high].map(f)),
            Err(_) => rec.extend([String::new(), String::new(), String::new()]),
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Mean DSC per method from a `results.csv`.
pub fn read_results(path: &Path) -> Result<Vec<(Method, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let method: Method = rec.get(0).unwrap_or_default().parse()?;
        let dsc = rec
            .get(1)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(path, "missing dsc"))?;
        out.push((method, dsc));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.phantom.grid_size = 32;
        cfg.network.chunk_size = [16; 3];
        cfg.network.base_width = 2;
        cfg.train.epochs = 1;
        cfg.eval.num_cases = 3;
        cfg.eval.num_train = 2;
        cfg
    }

    #[test]
    fn experiment_runs_and_resumes() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let methods = [Method::Dram, Method::DramP, Method::Cam];
        let a = run_experiment(&cfg, &methods, data.path(), out.path()).unwrap();
        assert_eq!(a.iter().map(|(m, _)| *m).collect::<Vec<_>>(), methods);
        let results = read_results(&out.path().join(RESULTS_FILE)).unwrap();
        assert_eq!(results.len(), 3);
        let table = fs::read_to_string(out.path().join(TABLE_FILE)).unwrap();
        assert_eq!(table.lines().count(), 5);

        // A second run reuses the checkpoints and reproduces every file.
        let before = fs::read(out.path().join(RESULTS_FILE)).unwrap();
        let stamp = fs::metadata(out.path().join("runs/dram/log.csv")).unwrap().modified().unwrap();
        run_experiment(&cfg, &methods, data.path(), out.path()).unwrap();
        assert_eq!(fs::read(out.path().join(RESULTS_FILE)).unwrap(), before);
        let again = fs::metadata(out.path().join("runs/dram/log.csv")).unwrap().modified().unwrap();
        assert_eq!(stamp, again);
    }

    #[test]
    fn predictions_round_trip() {
        let cfg = tiny();
        let cases = generate_cases(&cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(read_predictions(dir.path(), &cases).unwrap().is_none());
        let preds: Vec<LabelMap> = cases.iter().map(|c| c.lesion_map.map(|v| (v > 0) as u8 * 2)).collect();
        write_predictions(dir.path(), &cases, &preds).unwrap();
        assert_eq!(read_predictions(dir.path(), &cases).unwrap().unwrap(), preds);
    }

    #[test]
    fn stored_proposals_follow_the_filter_settings() {
        let cfg = tiny();
        let cases = generate_cases(&cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &cases).unwrap();
        let strict = VesselnessConfig {
            response_threshold: 1.0,
            ..Default::default()
        };
        let loose = VesselnessConfig {
            response_threshold: 0.0,
            ..Default::default()
        };
        for config in [&strict, &loose, &strict] {
            let got = ensure_proposals(dir.path(), &cases, config).unwrap();
            let want: Vec<_> = cases.iter().map(|c| propose(&c.image, &c.lobe_map, config).unwrap()).collect();
            assert_eq!(got, want);
            assert_eq!(ensure_proposals(dir.path(), &cases, config).unwrap(), want);
        }
    }
}
