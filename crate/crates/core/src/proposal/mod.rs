//! Low-level lesion candidates: per-lobe Otsu on intensities with bright
//! tubular structures suppressed by a multiscale vesselness filter.

mod otsu;
mod vesselness;

pub use otsu::{otsu_threshold, DEFAULT_BINS};
pub use vesselness::{hessian_vesselness, shapes, symmetric_eigenvalues, tube_response, VesselnessConfig};

use crate::error::{Error, Result};
use crate::volume::{Grid, LabelMap, Volume};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LobeProposal {
    pub lobe_id: u8,
    /// Candidate voxels over lobe voxels.
    pub p_star: f64,
    /// Otsu threshold in HU; `None` when the lobe histogram was degenerate.
    pub threshold: Option<f64>,
}

impl LobeProposal {
    pub fn degenerate(&self) -> bool {
        self.threshold.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateResult {
    pub candidate_map: LabelMap,
    pub vessel_map: LabelMap,
    /// One entry per lobe, ascending by id.
    pub lobes: Vec<LobeProposal>,
}

impl CandidateResult {
    pub fn p_star(&self, lobe_id: u8) -> Option<f64> {
        self.lobes.iter().find(|l| l.lobe_id == lobe_id).map(|l| l.p_star)
    }
}

/// Candidate voxels of a lobe divided by the lobe's voxel count.
pub fn estimate_fraction(candidate_map: &LabelMap, lobe_map: &LabelMap, lobe_id: u8) -> Result<f64> {
    candidate_map.ensure_aligned(lobe_map, "estimate_fraction")?;
    let (mut lobe, mut hit) = (0usize, 0usize);
    for (&c, &o) in candidate_map.data().iter().zip(lobe_map.data()) {
        if o == lobe_id {
            lobe += 1;
            hit += (c > 0) as usize;
        }
    }
    if lobe == 0 {
        return Err(Error::Domain(format!("lobe {lobe_id} is empty")));
    }
    Ok(hit as f64 / lobe as f64)
}

/// Proposes candidate lesions and vessels for every lobe of a scan.
///
/// A lobe whose intensities are (near) constant gets no candidates and
/// `p_star = 0`; this is reported through [`LobeProposal::degenerate`].
pub fn propose(image: &Volume, lobe_map: &LabelMap, config: &VesselnessConfig) -> Result<CandidateResult> {
    image.ensure_aligned(lobe_map, "propose")?;
    let response = hessian_vesselness(image, config)?;
    let thr = config.response_threshold as f32;
    let vessel_map = Grid::from_vec(
        image.dims(),
        image.spacing(),
        response
            .data()
            .iter()
            .zip(lobe_map.data())
            .map(|(&r, &o)| (o > 0 && r > thr) as u8)
            .collect(),
    )?;

    let mut candidate_map: LabelMap = Grid::new(image.dims(), image.spacing());
    let mut lobes = Vec::new();
    for lobe_id in lobe_map.labels() {
        let idx: Vec<usize> = (0..lobe_map.len()).filter(|&i| lobe_map.data()[i] == lobe_id).collect();
        let values: Vec<f32> = idx.iter().map(|&i| image.data()[i]).collect();
        let threshold = match otsu_threshold(&values, DEFAULT_BINS) {
            Ok(t) => Some(t),
            Err(Error::DegenerateHistogram(_)) => None,
            Err(e) => return Err(e),
        };
        let mut hit = 0usize;
        if let Some(t) = threshold {
            for &i in &idx {
                if image.data()[i] as f64 >= t && vessel_map.data()[i] == 0 {
                    candidate_map.data_mut()[i] = 1;
                    hit += 1;
                }
            }
        }
        lobes.push(LobeProposal {
            lobe_id,
            p_star: hit as f64 / idx.len() as f64,
            threshold,
        });
    }
    Ok(CandidateResult {
        candidate_map,
        vessel_map,
        lobes,
    })
}
