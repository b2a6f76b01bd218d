//! Point-cloud containers, neighbourhood queries and covariance normals.

pub mod kdtree;

pub use kdtree::{squared_distance, Neighbor, NeighborIndex};

use serde::{Deserialize, Serialize};

use crate::diffcore::eig;
use crate::error::{Error, Result};
use crate::patchmodel::PredictedCloud;

/// Eigenvalues below this are treated as zero when checking the rank of a
/// neighbourhood covariance.
pub const RANK_EPS: f64 = 1e-12;

/// Target surface samples with unit normals and total surface area.
#[derive(Debug, Clone)]
pub struct GroundTruthCloud {
    index: NeighborIndex,
    normals: Vec<[f64; 3]>,
    area: f64,
}

impl GroundTruthCloud {
    pub fn new(points: Vec<[f64; 3]>, normals: Vec<[f64; 3]>, area: f64) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::Config(format!(
                "ground truth needs at least 4 points, got {}",
                points.len()
            )));
        }
        if normals.len() != points.len() {
            return Err(Error::Config(format!(
                "{} normals for {} points",
                normals.len(),
                points.len()
            )));
        }
        if !(area > 0.0) || !area.is_finite() {
            return Err(Error::Config(format!("ground-truth area must be positive, got {area}")));
        }
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Config("ground-truth points must be finite".into()));
        }
        for (i, n) in normals.iter().enumerate() {
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            if (len - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("normal {i} has length {len}")));
            }
        }
        Ok(Self {
            index: NeighborIndex::build(&points)?,
            normals,
            area,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        self.index.points()
    }

    pub fn normals(&self) -> &[[f64; 3]] {
        &self.normals
    }

    pub fn area(&self) -> f64 {
        self.area
    }

    /// Index over the ground-truth points, built once at construction.
    pub fn index(&self) -> &NeighborIndex {
        &self.index
    }
}

/// Neighbourhood size and angular threshold (degrees) for the constrained
/// global neighbourhood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeighborConfig {
    pub n: usize,
    pub theta: f64,
}

impl NeighborConfig {
    pub fn new(n: usize, theta: f64) -> Result<Self> {
        let cfg = Self { n, theta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::Config(format!("neighborhood size must be >= 3, got {}", self.n)));
        }
        if !(self.theta > 0.0 && self.theta < 180.0) {
            return Err(Error::Config(format!(
                "angular threshold must lie in (0, 180), got {}",
                self.theta
            )));
        }
        Ok(())
    }
}

impl Default for NeighborConfig {
    fn default() -> Self {
        Self { n: 8, theta: 120.0 }
    }
}

/// Nearest ground-truth point of one predicted point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Association {
    pub gt_index: usize,
    pub normal: [f64; 3],
}

/// Maps every point to its nearest ground-truth point (ties by ascending
/// ground-truth index) and that point's normal.
pub fn associate_points(points: &[[f64; 3]], gt: &GroundTruthCloud) -> Vec<Association> {
    points
        .iter()
        .map(|p| {
            let n = gt.index().nearest(p);
            Association {
                gt_index: n.index,
                normal: gt.normals()[n.index],
            }
        })
        .collect()
}

pub fn associate_gt(pred: &PredictedCloud, gt: &GroundTruthCloud) -> Result<Vec<Association>> {
    if pred.is_empty() {
        return Err(Error::Empty("predicted cloud"));
    }
    Ok(associate_points(&pred.positions(), gt))
}

/// Angle in degrees between two unit normals, `acos(clamp(a·b, −1, 1))`.
pub fn normal_angle_deg(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    d.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Result of a constrained global neighbourhood query.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedNeighbors {
    pub indices: Vec<usize>,
    /// True when fewer than three candidates passed the normal filter and the
    /// unconstrained neighbourhood was used instead.
    pub fallback: bool,
}

/// Per-iteration indices over a predicted cloud: one over all points and
/// one per patch.
#[derive(Debug, Clone)]
pub struct PredictedIndex {
    global: NeighborIndex,
    patch_ids: Vec<usize>,
    per_patch: Vec<Option<(NeighborIndex, Vec<usize>)>>,
}

impl PredictedIndex {
    pub fn build(positions: &[[f64; 3]], patch_ids: &[usize], patch_count: usize) -> Result<Self> {
        if positions.len() != patch_ids.len() {
            return Err(Error::Config("one patch id per point required".into()));
        }
        if let Some(&k) = patch_ids.iter().find(|&&k| k >= patch_count) {
            return Err(Error::PatchOutOfRange {
                patch: k,
                patches: patch_count,
            });
        }
        let global = NeighborIndex::build(positions)?;
        let mut members = vec![Vec::new(); patch_count];
        for (i, &k) in patch_ids.iter().enumerate() {
            members[k].push(i);
        }
        let per_patch = members
            .into_iter()
            .map(|ids| {
                if ids.is_empty() {
                    return Ok(None);
                }
                let pts: Vec<[f64; 3]> = ids.iter().map(|&i| positions[i]).collect();
                Ok(Some((NeighborIndex::build(&pts)?, ids)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            global,
            patch_ids: patch_ids.to_vec(),
            per_patch,
        })
    }

    pub fn from_cloud(cloud: &PredictedCloud) -> Result<Self> {
        Self::build(&cloud.positions(), &cloud.patch_ids(), cloud.patch_count)
    }

    pub fn len(&self) -> usize {
        self.global.len()
    }

    pub fn is_empty(&self) -> bool {
        self.global.is_empty()
    }

    pub fn position(&self, i: usize) -> &[f64; 3] {
        self.global.point(i)
    }

    pub fn patch_of(&self, i: usize) -> usize {
        self.patch_ids[i]
    }

    pub fn global(&self) -> &NeighborIndex {
        &self.global
    }

    /// The `n` nearest points of the query's own patch, query excluded.
    pub fn patch_neighborhood(&self, query: usize, n: usize) -> Result<Vec<usize>> {
        let patch = self.patch_ids[query];
        let (index, ids) = self.per_patch[patch]
            .as_ref()
            .expect("query belongs to its patch");
        if ids.len() < n + 1 {
            return Err(Error::NeighborhoodTooSmall {
                patch,
                available: ids.len().saturating_sub(1),
                required: n,
            });
        }
        let found = index.knn_filtered(self.global.point(query), n, |local| ids[local] != query);
        Ok(found.into_iter().map(|nb| ids[nb.index]).collect())
    }

    /// The `n` nearest points of any patch, excluding the query, whose
    /// associated ground-truth normals lie within `theta` of the query's.
    /// Falls back to the unconstrained neighbourhood when fewer than three
    /// candidates qualify.
    pub fn constrained_knn(
        &self,
        query: usize,
        cfg: &NeighborConfig,
        normals: &[[f64; 3]],
    ) -> ConstrainedNeighbors {
        let q = self.global.point(query);
        let nq = normals[query];
        let found = self.global.knn_filtered(q, cfg.n, |j| {
            j != query && normal_angle_deg(&nq, &normals[j]) < cfg.theta
        });
        if found.len() >= 3 {
            return ConstrainedNeighbors {
                indices: found.into_iter().map(|nb| nb.index).collect(),
                fallback: false,
            };
        }
        ConstrainedNeighbors {
            indices: self.unconstrained_knn(query, cfg.n),
            fallback: true,
        }
    }

    /// The `n` nearest points of any patch, query excluded.
    pub fn unconstrained_knn(&self, query: usize, n: usize) -> Vec<usize> {
        self.global
            .knn_filtered(self.global.point(query), n, |j| j != query)
            .into_iter()
            .map(|nb| nb.index)
            .collect()
    }

    /// Closest point belonging to a patch other than `patch`.
    pub fn nearest_in_other_patch(&self, point: &[f64; 3], patch: usize) -> Option<Neighbor> {
        self.global
            .nearest_filtered(point, |j| self.patch_ids[j] != patch)
    }

    /// Closest point of patch `patch`, as a global index.
    pub fn nearest_in_patch(&self, point: &[f64; 3], patch: usize) -> Option<Neighbor> {
        let (index, ids) = self.per_patch.get(patch)?.as_ref()?;
        let nb = index.nearest(point);
        Some(Neighbor {
            index: ids[nb.index],
            dist2: nb.dist2,
        })
    }
}

pub fn patch_neighborhood(pred: &PredictedCloud, query: usize, n: usize) -> Result<Vec<usize>> {
    PredictedIndex::from_cloud(pred)?.patch_neighborhood(query, n)
}

pub fn constrained_knn(
    pred: &PredictedCloud,
    query: usize,
    cfg: &NeighborConfig,
    assoc: &[Association],
) -> Result<ConstrainedNeighbors> {
    let normals: Vec<[f64; 3]> = assoc.iter().map(|a| a.normal).collect();
    Ok(PredictedIndex::from_cloud(pred)?.constrained_knn(query, cfg, &normals))
}

/// Centred covariance `(1/n) Σ (x − x̄)(x − x̄)ᵀ`.
pub fn covariance(points: &[[f64; 3]]) -> [[f64; 3]; 3] {
    let n = points.len() as f64;
    let mut mean = [0.0; 3];
    for p in points {
        for a in 0..3 {
            mean[a] += p[a];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut c = [[0.0; 3]; 3];
    for p in points {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for a in 0..3 {
            for b in 0..3 {
                c[a][b] += d[a] * d[b];
            }
        }
    }
    for row in &mut c {
        for x in row {
            *x /= n;
        }
    }
    c
}

/// Unoriented normal of a neighbourhood: the eigenvector of its centred
/// covariance with the smallest eigenvalue, plus the eigen-gap
/// `λ_mid − λ_min`.
pub fn covariance_normal(points: &[[f64; 3]]) -> Result<([f64; 3], f64)> {
    if points.len() < 3 {
        return Err(Error::DegenerateNeighborhood(format!(
            "{} points, at least 3 required",
            points.len()
        )));
    }
    let e = eig::smallest_eigenvector(&covariance(points));
    if e.values[0] < RANK_EPS && e.values[1] < RANK_EPS {
        return Err(Error::DegenerateNeighborhood(
            "points are collinear or coincident".into(),
        ));
    }
    Ok((e.vector, e.gap()))
}
