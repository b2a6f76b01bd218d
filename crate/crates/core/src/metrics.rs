//! Evaluation metrics on a deterministic UV grid.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses;
use crate::patchmodel::{regular_grid, Atlas, MarginSpec, PredictedCloud, UvPoint};
use crate::spatial::{associate_points, GroundTruthCloud, NeighborConfig, NeighborIndex, PredictedIndex};

/// Evaluation sampling and thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Side of the regular UV grid decoded on every patch.
    pub grid_side: usize,
    /// Margin width used to select stitching samples from the grid.
    pub margin: f64,
    /// Distance threshold of the overlap metric.
    pub overlap_t: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grid_side: 32,
            margin: 0.1,
            overlap_t: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchDiagnostics {
    pub area: f64,
    /// This patch's summand of the stitching metric; absent for one patch.
    pub margin_error: Option<f64>,
    /// Grid points whose global neighbourhood fell back to unconstrained kNN.
    pub fallbacks: usize,
    /// Grid points with a degenerate analytic normal.
    pub degenerate_normals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cd: f64,
    /// Degrees.
    pub m_ae: f64,
    /// Absent when the atlas has a single patch.
    pub m_s: Option<f64>,
    pub m_olap: f64,
    pub per_patch: Vec<PatchDiagnostics>,
}

/// Mean angle and the number of points left out for lack of a normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngularError {
    pub degrees: f64,
    pub skipped: usize,
}

pub fn metric_cd(pred: &PredictedCloud, gt: &GroundTruthCloud) -> Result<f64> {
    losses::chamfer(pred, gt)
}

/// Mean of `acos(|n · n̂|)` in degrees, `n̂` the normal of the nearest
/// ground-truth point.
pub fn metric_angular_error(pred: &PredictedCloud, gt: &GroundTruthCloud) -> Result<AngularError> {
    if pred.is_empty() {
        return Err(Error::Empty("predicted cloud"));
    }
    let assoc = associate_points(&pred.positions(), gt);
    let mut acc = 0.0;
    let mut count = 0usize;
    for (p, a) in pred.points.iter().zip(&assoc) {
        let Some(n) = p.analytic_normal else {
            continue;
        };
        let d = (n[0] * a.normal[0] + n[1] * a.normal[1] + n[2] * a.normal[2]).abs();
        acc += d.clamp(0.0, 1.0).acos().to_degrees();
        count += 1;
    }
    let skipped = pred.len() - count;
    if count == 0 {
        return Err(Error::DegenerateJacobian { norm: 0.0 });
    }
    Ok(AngularError {
        degrees: acc / count as f64,
        skipped,
    })
}

/// Grid points inside the margin frame of width `r`.
pub fn margin_grid(side: usize, r: f64) -> Result<Vec<UvPoint>> {
    let spec = MarginSpec::new(r)?;
    Ok(regular_grid(side).into_iter().filter(|uv| spec.contains(*uv)).collect())
}

/// Stitching error with margin samples from the regular grid; also returns
/// the per-patch summands.
pub fn metric_stitching(
    atlas: &Atlas,
    margin_uvs: &[UvPoint],
    pred: &PredictedCloud,
) -> Result<(f64, Vec<f64>)> {
    if atlas.patch_count() < 2 {
        return Err(Error::SinglePatch);
    }
    let sets = vec![margin_uvs.to_vec(); atlas.patch_count()];
    let margins = atlas.predicted_cloud(&sets)?;
    losses::stitching_parts(&margins, pred)
}

/// Mean number of distinct patches with a point within distance `t` of each
/// predicted point. A point's own patch always counts.
pub fn metric_overlap(pred: &PredictedCloud, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Config(format!("overlap threshold must be positive, got {t}")));
    }
    if pred.is_empty() {
        return Err(Error::Empty("predicted cloud"));
    }
    let positions = pred.positions();
    let ids = pred.patch_ids();
    let index = NeighborIndex::build(&positions)?;
    let mut total = 0usize;
    for p in &positions {
        let patches: BTreeSet<usize> = index.within(p, t).iter().map(|n| ids[n.index]).collect();
        total += patches.len();
    }
    Ok(total as f64 / positions.len() as f64)
}

/// All four metrics on the regular grid, with per-patch diagnostics.
pub fn evaluate_atlas(
    atlas: &Atlas,
    gt: &GroundTruthCloud,
    eval: &EvalConfig,
    neighbors: &NeighborConfig,
) -> Result<MetricsReport> {
    let k = atlas.patch_count();
    let grid = regular_grid(eval.grid_side);
    let pred = atlas.predicted_cloud(&vec![grid.clone(); k])?;
    let cd = metric_cd(&pred, gt)?;
    let ae = metric_angular_error(&pred, gt)?;
    let (m_s, margin_errors) = if k >= 2 {
        let (total, parts) = metric_stitching(atlas, &margin_grid(eval.grid_side, eval.margin)?, &pred)?;
        (Some(total), parts.into_iter().map(Some).collect())
    } else {
        (None, vec![None; k])
    };
    let m_olap = metric_overlap(&pred, eval.overlap_t)?;

    let index = PredictedIndex::from_cloud(&pred)?;
    let normals: Vec<[f64; 3]> = associate_points(&pred.positions(), gt)
        .into_iter()
        .map(|a| a.normal)
        .collect();
    let mut fallbacks = vec![0usize; k];
    let mut degenerate = vec![0usize; k];
    for (i, p) in pred.points.iter().enumerate() {
        if index.constrained_knn(i, neighbors, &normals).fallback {
            fallbacks[p.patch_id] += 1;
        }
        if p.analytic_normal.is_none() {
            degenerate[p.patch_id] += 1;
        }
    }
    let areas = losses::patch_areas(&pred)?;
    let per_patch = (0..k)
        .map(|j| PatchDiagnostics {
            area: areas[j],
            margin_error: margin_errors[j],
            fallbacks: fallbacks[j],
            degenerate_normals: degenerate[j],
        })
        .collect();
    Ok(MetricsReport {
        cd,
        m_ae: ae.degrees,
        m_s,
        m_olap,
        per_patch,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "absent".to_string(), |v| format!("{v:e}"))
}

impl MetricsReport {
    pub const COLUMNS: [&'static str; 4] = ["cd", "m_ae", "m_s", "m_olap"];

    /// Flat `key = value` block.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        writeln!(s, "cd = {:e}", self.cd).unwrap();
        writeln!(s, "m_ae = {:e}", self.m_ae).unwrap();
        writeln!(s, "m_s = {}", opt(self.m_s)).unwrap();
        writeln!(s, "m_olap = {:e}", self.m_olap).unwrap();
        for (k, p) in self.per_patch.iter().enumerate() {
            writeln!(s, "patch.{k}.area = {:e}", p.area).unwrap();
            writeln!(s, "patch.{k}.margin_error = {}", opt(p.margin_error)).unwrap();
            writeln!(s, "patch.{k}.fallbacks = {}", p.fallbacks).unwrap();
            writeln!(s, "patch.{k}.degenerate_normals = {}", p.degenerate_normals).unwrap();
        }
        s
    }

    pub fn tsv_header() -> String {
        Self::COLUMNS.join("\t")
    }

    pub fn tsv_row(&self) -> String {
        format!("{:e}\t{:e}\t{}\t{:e}", self.cd, self.m_ae, opt(self.m_s), self.m_olap)
    }

    /// Both serializations: the key-value block followed by a tab-separated
    /// header and row.
    pub fn render(&self) -> String {
        format!("{}\n{}\n{}\n", self.to_key_values(), Self::tsv_header(), self.tsv_row())
    }
}
