//! On-disk case directories, severity sidecars and proposal tables.
//!
//! ```text
//! <data>/severity.csv                 case_id,lobe_id,score,true_fraction,r_l,r_u
//! <data>/proposal_config.toml         filter settings of the stored proposals
//! <data>/case_0000/image.dvol         float32 HU
//! <data>/case_0000/lobes.dvol         uint8 lobe ids
//! <data>/case_0000/lesions.dvol       uint8 lesion subtypes
//! <data>/case_0000/vessels.dvol       uint8 reference vessels
//! <data>/case_0000/candidates.dvol    uint8 proposal (after `propose`)
//! <data>/case_0000/vessel_mask.dvol   uint8 detected vessels (after `propose`)
//! <data>/case_0000/proposal.csv       case_id,lobe_id,p_star,otsu_threshold
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_labels, read_volume, write_labels, write_volume};
use crate::losses::Interval;
use crate::phantom::{PhantomCase, SeverityRecord};
use crate::proposal::{CandidateResult, LobeProposal};
use crate::volume::{LabelMap, Volume};

pub const SEVERITY_FILE: &str = "severity.csv";
pub const PROPOSAL_FILE: &str = "proposal.csv";

/// A case loaded from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub image: Volume,
    pub lobe_map: LabelMap,
    pub lesion_map: LabelMap,
    pub vessel_map: LabelMap,
    pub severity: Vec<SeverityRecord>,
}

impl Case {
    pub fn from_phantom(id: String, case: PhantomCase) -> Self {
        Self {
            id,
            image: case.image,
            lobe_map: case.lobe_map,
            lesion_map: case.lesion_map,
            vessel_map: case.vessel_map,
            severity: case.severity,
        }
    }

    pub fn severity_of(&self, lobe_id: u8) -> Option<&SeverityRecord> {
        self.severity.iter().find(|s| s.lobe_id == lobe_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SeverityRow {
    case_id: String,
    lobe_id: u8,
    score: u8,
    true_fraction: f64,
    r_l: f64,
    r_u: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProposalRow {
    case_id: String,
    lobe_id: u8,
    p_star: f64,
    otsu_threshold: Option<f64>,
}

pub fn case_dir(data_dir: &Path, id: &str) -> PathBuf {
    data_dir.join(id)
}

fn write_csv<S: Serialize>(path: &Path, header: &[&str], rows: &[S]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<D>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::format(path, e.to_string()),
        _ => Error::Csv(e),
    })?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes the image volumes of `cases` and one severity sidecar for all.
pub fn write_dataset(data_dir: &Path, cases: &[Case]) -> Result<()> {
    fs::create_dir_all(data_dir).map_err(|e| Error::io(data_dir, e))?;
    let mut rows = Vec::new();
    for case in cases {
        write_case_volumes(data_dir, case)?;
        rows.extend(case.severity.iter().map(|s| SeverityRow {
            case_id: case.id.clone(),
            lobe_id: s.lobe_id,
            score: s.score,
            true_fraction: s.true_fraction,
            r_l: s.interval.lower,
            r_u: s.interval.upper,
        }));
    }
    write_csv(
        &data_dir.join(SEVERITY_FILE),
        &["case_id", "lobe_id", "score", "true_fraction", "r_l", "r_u"],
        &rows,
    )
}

fn write_case_volumes(data_dir: &Path, case: &Case) -> Result<()> {
    let dir = case_dir(data_dir, &case.id);
    write_volume(&dir.join("image.dvol"), &case.image)?;
    write_labels(&dir.join("lobes.dvol"), &case.lobe_map)?;
    write_labels(&dir.join("lesions.dvol"), &case.lesion_map)?;
    write_labels(&dir.join("vessels.dvol"), &case.vessel_map)
}

/// Case ids listed in the severity sidecar, in file order.
pub fn list_cases(data_dir: &Path) -> Result<Vec<String>> {
    let rows: Vec<SeverityRow> = read_csv(&data_dir.join(SEVERITY_FILE))?;
    let mut ids: Vec<String> = Vec::new();
    for r in rows {
        if ids.last() != Some(&r.case_id) && !ids.contains(&r.case_id) {
            ids.push(r.case_id);
        }
    }
    Ok(ids)
}

pub fn read_dataset(data_dir: &Path) -> Result<Vec<Case>> {
    let rows: Vec<SeverityRow> = read_csv(&data_dir.join(SEVERITY_FILE))?;
    let ids = list_cases(data_dir)?;
    ids.into_iter()
        .map(|id| {
            let severity = rows
                .iter()
                .filter(|r| r.case_id == id)
                .map(|r| {
                    Ok(SeverityRecord {
                        lobe_id: r.lobe_id,
                        true_fraction: r.true_fraction,
                        score: r.score,
                        interval: Interval::new(r.r_l, r.r_u)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let dir = case_dir(data_dir, &id);
            let image = read_volume(&dir.join("image.dvol"))?;
            let lobe_map = read_labels(&dir.join("lobes.dvol"))?;
            let lesion_map = read_labels(&dir.join("lesions.dvol"))?;
            let vessel_map = read_labels(&dir.join("vessels.dvol"))?;
            for (m, what) in [(&lobe_map, "lobes"), (&lesion_map, "lesions"), (&vessel_map, "vessels")] {
                image.ensure_aligned(m, what)?;
            }
            Ok(Case {
                id,
                image,
                lobe_map,
                lesion_map,
                vessel_map,
                severity,
            })
        })
        .collect()
}

pub fn write_proposal(data_dir: &Path, case_id: &str, result: &CandidateResult) -> Result<()> {
    let dir = case_dir(data_dir, case_id);
    write_labels(&dir.join("candidates.dvol"), &result.candidate_map)?;
    write_labels(&dir.join("vessel_mask.dvol"), &result.vessel_map)?;
    let rows: Vec<ProposalRow> = result
        .lobes
        .iter()
        .map(|l| ProposalRow {
            case_id: case_id.to_string(),
            lobe_id: l.lobe_id,
            p_star: l.p_star,
            otsu_threshold: l.threshold,
        })
        .collect();
    write_csv(
        &dir.join(PROPOSAL_FILE),
        &["case_id", "lobe_id", "p_star", "otsu_threshold"],
        &rows,
    )
}

pub fn has_proposal(data_dir: &Path, case_id: &str) -> bool {
    let dir = case_dir(data_dir, case_id);
    ["candidates.dvol", "vessel_mask.dvol", PROPOSAL_FILE]
        .iter()
        .all(|f| dir.join(f).is_file())
}

pub fn read_proposal(data_dir: &Path, case_id: &str) -> Result<CandidateResult> {
    let dir = case_dir(data_dir, case_id);
    let rows: Vec<ProposalRow> = read_csv(&dir.join(PROPOSAL_FILE))?;
    Ok(CandidateResult {
        candidate_map: read_labels(&dir.join("candidates.dvol"))?,
        vessel_map: read_labels(&dir.join("vessel_mask.dvol"))?,
        lobes: rows
            .into_iter()
            .map(|r| LobeProposal {
                lobe_id: r.lobe_id,
                p_star: r.p_star,
                threshold: r.otsu_threshold,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{case_id, generate_case, PhantomConfig};
    use crate::proposal::{propose, VesselnessConfig};

    fn small() -> PhantomConfig {
        PhantomConfig {
            grid_size: 24,
            ..Default::default()
        }
    }

    #[test]
    fn dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cases: Vec<Case> = (0..2)
            .map(|i| Case::from_phantom(case_id(i), generate_case(&small(), i as u64).unwrap()))
            .collect();
        write_dataset(dir.path(), &cases).unwrap();
        assert_eq!(list_cases(dir.path()).unwrap(), vec!["case_0000", "case_0001"]);
        assert_eq!(read_dataset(dir.path()).unwrap(), cases);
    }

    #[test]
    fn empty_dataset_has_header_only() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[]).unwrap();
        let text = fs::read_to_string(dir.path().join(SEVERITY_FILE)).unwrap();
        assert_eq!(text, "case_id,lobe_id,score,true_fraction,r_l,r_u\n");
        assert!(read_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn proposal_round_trips_including_degenerate_lobes() {
        let dir = tempfile::tempdir().unwrap();
        let case = generate_case(&small(), 0).unwrap();
        let mut res = propose(&case.image, &case.lobe_map, &VesselnessConfig::default()).unwrap();
        res.lobes[0].threshold = None;
        write_proposal(dir.path(), "case_0000", &res).unwrap();
        assert!(has_proposal(dir.path(), "case_0000"));
        assert_eq!(read_proposal(dir.path(), "case_0000").unwrap(), res);
        let text = fs::read_to_string(dir.path().join("case_0000").join(PROPOSAL_FILE)).unwrap();
        assert!(text.starts_with("case_id,lobe_id,p_star,otsu_threshold\ncase_0000,1,"));
    }

    #[test]
    fn missing_sidecar_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_dataset(dir.path()).is_err());
    }
}
