//! Loss terms of the fitting objective.
//!
//! Every term is recorded on a [`Tape`] so its gradient with respect to the
//! atlas parameters is exact. Discrete choices (nearest neighbours, normal
//! filters, skipped points) are computed from plain values first and passed
//! in as selection structs; they enter the tape only as gather indices.
//!
//! The value-only functions at the bottom of this module lift a
//! [`PredictedCloud`] onto a constant tape and call the same recorded code,
//! so metrics and losses share one implementation.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::patchmodel::{
    analytic_normal, forward_taped, fundamental_form, uv_matrix, Architecture, Jacobian,
    PredictedCloud, PredictedPoint, UvPoint,
};
use crate::spatial::{
    associate_points, covariance_normal, GroundTruthCloud, NeighborConfig, PredictedIndex,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_e: f64,
    pub alpha_g: f64,
    pub alpha_sk: f64,
    pub alpha_ol: f64,
    pub alpha_sc: f64,
    pub alpha_st: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_e: 0.001,
            alpha_g: 0.001,
            alpha_sk: 0.001,
            alpha_ol: 0.1,
            alpha_sc: 0.001,
            alpha_st: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("alpha_e", self.alpha_e),
            ("alpha_g", self.alpha_g),
            ("alpha_sk", self.alpha_sk),
            ("alpha_ol", self.alpha_ol),
            ("alpha_sc", self.alpha_sc),
            ("alpha_st", self.alpha_st),
        ];
        for (name, w) in all {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {w}")));
            }
        }
        Ok(())
    }

    /// The same weights with the consistency and stitching terms disabled.
    pub fn baseline(&self) -> Self {
        Self {
            alpha_sc: 0.0,
            alpha_st: 0.0,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub chd: f64,
    pub l_e: f64,
    pub l_g: f64,
    pub l_sk: f64,
    pub l_ol: f64,
    pub l_sc: f64,
    pub l_st: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 8] = ["chd", "l_E", "l_G", "l_sk", "l_ol", "l_sc", "l_st", "total"];

    pub fn values(&self) -> [f64; 8] {
        [
            self.chd, self.l_e, self.l_g, self.l_sk, self.l_ol, self.l_sc, self.l_st, self.total,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalMode {
    Analytic,
    Approximate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyConfig {
    pub normal_mode: NormalMode,
    pub grad_through_global: bool,
    pub neighbors: NeighborConfig,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            normal_mode: NormalMode::Analytic,
            grad_through_global: true,
            neighbors: NeighborConfig::default(),
        }
    }
}

/// Decoded points of all patches on a tape, stacked patch by patch.
#[derive(Debug, Clone)]
pub struct TapedCloud {
    pub positions: Var,
    pub du: Option<Var>,
    pub dv: Option<Var>,
    pub patch_ids: Vec<usize>,
    pub uvs: Vec<UvPoint>,
    pub patch_count: usize,
}

impl TapedCloud {
    /// Decodes `uvs[k]` on patch `k` for every patch, reading parameters
    /// from the leaf `params`.
    pub fn record(
        tape: &mut Tape,
        arch: &Architecture,
        params: Var,
        uvs: &[Vec<UvPoint>],
        tangents: bool,
    ) -> Result<Self> {
        if uvs.len() != arch.patches {
            return Err(Error::Config(format!(
                "{} UV sets for {} patches",
                uvs.len(),
                arch.patches
            )));
        }
        let mut pos = Vec::new();
        let mut du = Vec::new();
        let mut dv = Vec::new();
        let mut patch_ids = Vec::new();
        let mut flat = Vec::new();
        for (k, set) in uvs.iter().enumerate() {
            if set.is_empty() {
                continue;
            }
            let t = forward_taped(tape, arch, params, k, &uv_matrix(set), tangents)?;
            pos.push(t.positions);
            du.extend(t.du);
            dv.extend(t.dv);
            patch_ids.extend(std::iter::repeat_n(k, set.len()));
            flat.extend_from_slice(set);
        }
        if pos.is_empty() {
            return Err(Error::Empty("predicted cloud"));
        }
        let positions = tape.concat_rows(&pos)?;
        let (du, dv) = if tangents {
            (Some(tape.concat_rows(&du)?), Some(tape.concat_rows(&dv)?))
        } else {
            (None, None)
        };
        Ok(Self {
            positions,
            du,
            dv,
            patch_ids,
            uvs: flat,
            patch_count: arch.patches,
        })
    }

    /// Places a plain cloud on the tape as constants.
    pub fn lift(tape: &mut Tape, cloud: &PredictedCloud) -> Self {
        let rows = |f: &dyn Fn(&PredictedPoint) -> [f64; 3]| {
            let flat: Vec<f64> = cloud.points.iter().flat_map(f).collect();
            Array2::from_shape_vec((cloud.len(), 3), flat).expect("n x 3")
        };
        let positions = tape.constant(rows(&|p| p.position));
        let du = tape.constant(rows(&|p| p.jacobian.du));
        let dv = tape.constant(rows(&|p| p.jacobian.dv));
        Self {
            positions,
            du: Some(du),
            dv: Some(dv),
            patch_ids: cloud.patch_ids(),
            uvs: cloud.points.iter().map(|p| p.uv).collect(),
            patch_count: cloud.patch_count,
        }
    }

    pub fn len(&self) -> usize {
        self.patch_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patch_ids.is_empty()
    }

    pub fn position_values(&self, tape: &Tape) -> Vec<[f64; 3]> {
        rows3(tape.value(self.positions))
    }

    /// Plain-value copy of the recorded cloud with differential data.
    pub fn snapshot(&self, tape: &Tape) -> PredictedCloud {
        let pos = self.position_values(tape);
        let du = self.du.map(|v| rows3(tape.value(v)));
        let dv = self.dv.map(|v| rows3(tape.value(v)));
        let points = (0..self.len())
            .map(|i| {
                let jacobian = Jacobian {
                    du: du.as_ref().map_or([0.0; 3], |d| d[i]),
                    dv: dv.as_ref().map_or([0.0; 3], |d| d[i]),
                };
                PredictedPoint {
                    position: pos[i],
                    patch_id: self.patch_ids[i],
                    uv: self.uvs[i],
                    jacobian,
                    analytic_normal: analytic_normal(&jacobian).ok(),
                    fff: fundamental_form(&jacobian),
                }
            })
            .collect();
        PredictedCloud {
            points,
            patch_count: self.patch_count,
        }
    }
}

fn rows3(m: &Array2<f64>) -> Vec<[f64; 3]> {
    m.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect()
}

pub fn points_matrix(points: &[[f64; 3]]) -> Array2<f64> {
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    Array2::from_shape_vec((points.len(), 3), flat).expect("n x 3")
}

/// Nearest-neighbour choices of both Chamfer directions.
#[derive(Debug, Clone, PartialEq)]
pub struct ChamferSelection {
    /// Nearest ground-truth point of each predicted point.
    pub pred_to_gt: Vec<usize>,
    /// Nearest predicted point of each ground-truth point.
    pub gt_to_pred: Vec<usize>,
}

impl ChamferSelection {
    pub fn build(pred: &PredictedIndex, gt: &GroundTruthCloud) -> Result<Self> {
        if pred.is_empty() {
            return Err(Error::Empty("predicted cloud"));
        }
        let positions = pred.global().points();
        let pred_to_gt = associate_points(positions, gt)
            .into_iter()
            .map(|a| a.gt_index)
            .collect();
        let gt_to_pred = gt
            .points()
            .iter()
            .map(|p| pred.global().nearest(p).index)
            .collect();
        Ok(Self {
            pred_to_gt,
            gt_to_pred,
        })
    }
}

fn mean_sq_dist(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.row_dot(d, d)?;
    Ok(tape.mean(sq))
}

/// Two-sided mean squared nearest-neighbour distance.
pub fn chamfer_taped(tape: &mut Tape, positions: Var, gt: Var, sel: &ChamferSelection) -> Result<Var> {
    let g = tape.gather(gt, sel.pred_to_gt.clone())?;
    let forward = mean_sq_dist(tape, positions, g)?;
    let p = tape.gather(positions, sel.gt_to_pred.clone())?;
    let backward = mean_sq_dist(tape, gt, p)?;
    tape.add(forward, backward)
}

/// First fundamental form coefficients per point, each `P x 1`.
#[derive(Debug, Clone, Copy)]
pub struct FormVars {
    pub e: Var,
    pub f: Var,
    pub g: Var,
}

pub fn forms_taped(tape: &mut Tape, cloud: &TapedCloud) -> Result<FormVars> {
    let (Some(du), Some(dv)) = (cloud.du, cloud.dv) else {
        return Err(Error::Config("fundamental forms need tangent columns".into()));
    };
    Ok(FormVars {
        e: tape.row_dot(du, du)?,
        f: tape.row_dot(du, dv)?,
        g: tape.row_dot(dv, dv)?,
    })
}

/// Per-patch surface area estimate `K x 1`: the mean area element
/// `sqrt(EG − F²)` over the patch's samples.
pub fn patch_areas_taped(tape: &mut Tape, cloud: &TapedCloud, forms: &FormVars) -> Result<Var> {
    let eg = tape.mul(forms.e, forms.g)?;
    let ff = tape.square(forms.f);
    let det = tape.sub(eg, ff)?;
    let det = tape.relu(det);
    let element = tape.sqrt(det);
    tape.segment_mean(element, cloud.patch_ids.clone(), cloud.patch_count)
}

fn point_areas(tape: &mut Tape, areas: Var, patch_ids: &[usize]) -> Result<Var> {
    for (k, &a) in tape.value(areas).iter().enumerate() {
        if !(a > 0.0) {
            return Err(Error::NonPositiveArea { patch: k, area: a });
        }
    }
    tape.gather(areas, patch_ids.to_vec())
}

/// Stretch regularizers `(l_E, l_G)`: mean squared deviation of `E` (and
/// `G`) from their batch means, each scaled by the point's patch area.
pub fn distortion_taped(
    tape: &mut Tape,
    forms: &FormVars,
    areas: Var,
    patch_ids: &[usize],
) -> Result<(Var, Var)> {
    let a = point_areas(tape, areas, patch_ids)?;
    let mut term = |x: Var| -> Result<Var> {
        let mu = tape.mean(x);
        let mu = tape.gather(mu, vec![0; patch_ids.len()])?;
        let dev = tape.sub(x, mu)?;
        let r = tape.div(dev, a)?;
        let sq = tape.square(r);
        Ok(tape.mean(sq))
    };
    let l_e = term(forms.e)?;
    let l_g = term(forms.g)?;
    Ok((l_e, l_g))
}

/// Shear regularizer: mean of `(F / A)²`.
pub fn skew_taped(tape: &mut Tape, forms: &FormVars, areas: Var, patch_ids: &[usize]) -> Result<Var> {
    let a = point_areas(tape, areas, patch_ids)?;
    let r = tape.div(forms.f, a)?;
    let sq = tape.square(r);
    Ok(tape.mean(sq))
}

/// `max(0, Σ A − Â)²`.
pub fn overlap_taped(tape: &mut Tape, areas: Var, gt_area: f64) -> Var {
    let total = tape.sum(areas);
    let excess = tape.affine(total, 1.0, -gt_area);
    let hinge = tape.relu(excess);
    tape.square(hinge)
}

/// Flattened neighbourhoods: `members` lists point indices, `groups[i]` is
/// the neighbourhood that `members[i]` belongs to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Groups {
    pub members: Vec<usize>,
    pub groups: Vec<usize>,
    pub count: usize,
}

impl Groups {
    fn push(&mut self, members: &[usize]) {
        self.members.extend_from_slice(members);
        self.groups.extend(std::iter::repeat_n(self.count, members.len()));
        self.count += 1;
    }
}

/// Per-iteration choices of the surface-consistency term.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencySelection {
    pub mode: NormalMode,
    /// Points that contribute, in ascending order.
    pub queries: Vec<usize>,
    /// Constrained global neighbourhood of each query.
    pub global: Groups,
    /// Same-patch neighbourhood of each query (approximate mode only).
    pub local: Groups,
    /// Points dropped because a normal was undefined.
    pub skipped: usize,
    /// Points whose global neighbourhood fell back to unconstrained kNN,
    /// counted per patch.
    pub fallbacks: Vec<usize>,
}

impl ConsistencySelection {
    /// `normals[i]` is the ground-truth normal associated with point `i`.
    pub fn build(
        cloud: &PredictedCloud,
        index: &PredictedIndex,
        normals: &[[f64; 3]],
        cfg: &ConsistencyConfig,
    ) -> Result<Self> {
        cfg.neighbors.validate()?;
        let n = cfg.neighbors.n;
        let mut sel = Self {
            mode: cfg.normal_mode,
            queries: Vec::new(),
            global: Groups::default(),
            local: Groups::default(),
            skipped: 0,
            fallbacks: vec![0; cloud.patch_count],
        };
        let positions = index.global().points();
        let gather = |ids: &[usize]| ids.iter().map(|&j| positions[j]).collect::<Vec<_>>();
        for (i, point) in cloud.points.iter().enumerate() {
            let global = index.constrained_knn(i, &cfg.neighbors, normals);
            if global.fallback {
                sel.fallbacks[point.patch_id] += 1;
            }
            let global_ok = covariance_normal(&gather(&global.indices)).is_ok();
            let local = match cfg.normal_mode {
                NormalMode::Analytic => None,
                NormalMode::Approximate => Some(index.patch_neighborhood(i, n)?),
            };
            let local_ok = match &local {
                None => analytic_normal(&point.jacobian).is_ok(),
                Some(ids) => covariance_normal(&gather(ids)).is_ok(),
            };
            if !(global_ok && local_ok) {
                sel.skipped += 1;
                continue;
            }
            sel.queries.push(i);
            sel.global.push(&global.indices);
            if let Some(ids) = local {
                sel.local.push(&ids);
            }
        }
        Ok(sel)
    }

    pub fn fallback_count(&self) -> usize {
        self.fallbacks.iter().sum()
    }
}

/// Smallest-eigenvalue eigenvector of each group's centred covariance.
fn covariance_normals_taped(tape: &mut Tape, src: Var, groups: &Groups) -> Result<Var> {
    let x = tape.gather(src, groups.members.clone())?;
    let mean = tape.segment_mean(x, groups.groups.clone(), groups.count)?;
    let mean = tape.gather(mean, groups.groups.clone())?;
    let centred = tape.sub(x, mean)?;
    let outer = tape.outer(centred)?;
    let cov = tape.segment_mean(outer, groups.groups.clone(), groups.count)?;
    tape.sym_eig_min(cov)
}

/// Mean of `1 − (n_p · n_g)²` over the selected points, where `n_p` is the
/// patch-local normal and `n_g` the normal of the constrained global
/// neighbourhood. Zero when no point qualifies.
pub fn surface_consistency_taped(
    tape: &mut Tape,
    cloud: &TapedCloud,
    sel: &ConsistencySelection,
    grad_through_global: bool,
) -> Result<Var> {
    if sel.queries.is_empty() {
        return Ok(tape.scalar_constant(0.0));
    }
    let local = match sel.mode {
        NormalMode::Analytic => {
            let (Some(du), Some(dv)) = (cloud.du, cloud.dv) else {
                return Err(Error::Config("analytic normals need tangent columns".into()));
            };
            let du = tape.gather(du, sel.queries.clone())?;
            let dv = tape.gather(dv, sel.queries.clone())?;
            let c = tape.cross(du, dv)?;
            let len2 = tape.row_dot(c, c)?;
            let len = tape.sqrt(len2);
            let inv = tape.recip(len);
            tape.mul_col(c, inv)?
        }
        NormalMode::Approximate => covariance_normals_taped(tape, cloud.positions, &sel.local)?,
    };
    let src = if grad_through_global {
        cloud.positions
    } else {
        tape.detach(cloud.positions)
    };
    let global = covariance_normals_taped(tape, src, &sel.global)?;
    let d = tape.row_dot(local, global)?;
    let d2 = tape.square(d);
    let term = tape.affine(d2, -1.0, 1.0);
    Ok(tape.mean(term))
}

/// Closest point of another patch for each margin sample.
#[derive(Debug, Clone, PartialEq)]
pub struct StitchSelection {
    pub margin_patch: Vec<usize>,
    pub target: Vec<usize>,
    pub patch_count: usize,
}

impl StitchSelection {
    pub fn build(margin: &[[f64; 3]], margin_patch: &[usize], index: &PredictedIndex, patch_count: usize) -> Result<Self> {
        if patch_count < 2 {
            return Err(Error::SinglePatch);
        }
        let mut seen = vec![false; patch_count];
        let mut target = Vec::with_capacity(margin.len());
        for (p, &k) in margin.iter().zip(margin_patch) {
            if k >= patch_count {
                return Err(Error::PatchOutOfRange {
                    patch: k,
                    patches: patch_count,
                });
            }
            seen[k] = true;
            let nb = index
                .nearest_in_other_patch(p, k)
                .ok_or(Error::Empty("points of other patches"))?;
            target.push(nb.index);
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("patch {k} has no margin points")));
        }
        Ok(Self {
            margin_patch: margin_patch.to_vec(),
            target,
            patch_count,
        })
    }
}

/// Sum over patches of the mean squared distance from each margin point to
/// the closest point of any other patch.
pub fn stitching_taped(tape: &mut Tape, margin: Var, positions: Var, sel: &StitchSelection) -> Result<Var> {
    let per_patch = stitching_per_patch_taped(tape, margin, positions, sel)?;
    Ok(tape.sum(per_patch))
}

/// Per-patch summands of [`stitching_taped`], `K x 1`.
pub fn stitching_per_patch_taped(
    tape: &mut Tape,
    margin: Var,
    positions: Var,
    sel: &StitchSelection,
) -> Result<Var> {
    let t = tape.gather(positions, sel.target.clone())?;
    let d = tape.sub(margin, t)?;
    let sq = tape.row_dot(d, d)?;
    tape.segment_mean(sq, sel.margin_patch.clone(), sel.patch_count)
}

/// Recorded loss terms. Terms that were not evaluated are `None`.
#[derive(Debug, Clone, Copy)]
pub struct TermVars {
    pub chd: Var,
    pub l_e: Var,
    pub l_g: Var,
    pub l_sk: Var,
    pub l_ol: Var,
    pub l_sc: Option<Var>,
    pub l_st: Option<Var>,
}

impl TermVars {
    /// Name and handle of every evaluated term, in summation order.
    pub fn named(&self) -> Vec<(&'static str, Var)> {
        let mut out = vec![
            ("chd", self.chd),
            ("l_E", self.l_e),
            ("l_G", self.l_g),
            ("l_sk", self.l_sk),
            ("l_ol", self.l_ol),
        ];
        out.extend(self.l_sc.map(|v| ("l_sc", v)));
        out.extend(self.l_st.map(|v| ("l_st", v)));
        out
    }
}

/// Weighted sum `chd + Σ αᵢ·termᵢ`, accumulated left to right in the order
/// chd, E, G, sk, ol, sc, st. Zero-weight terms are left out.
pub fn total_taped(tape: &mut Tape, terms: &TermVars, weights: &LossWeights) -> Result<Var> {
    let weighted = [
        (weights.alpha_e, Some(terms.l_e)),
        (weights.alpha_g, Some(terms.l_g)),
        (weights.alpha_sk, Some(terms.l_sk)),
        (weights.alpha_ol, Some(terms.l_ol)),
        (weights.alpha_sc, terms.l_sc),
        (weights.alpha_st, terms.l_st),
    ];
    let mut total = terms.chd;
    for (w, term) in weighted {
        if let (true, Some(t)) = (w != 0.0, term) {
            let s = tape.scale(t, w);
            total = tape.add(total, s)?;
        }
    }
    Ok(total)
}

pub fn breakdown(tape: &Tape, terms: &TermVars, total: Var) -> LossBreakdown {
    LossBreakdown {
        chd: tape.scalar(terms.chd),
        l_e: tape.scalar(terms.l_e),
        l_g: tape.scalar(terms.l_g),
        l_sk: tape.scalar(terms.l_sk),
        l_ol: tape.scalar(terms.l_ol),
        l_sc: terms.l_sc.map_or(0.0, |v| tape.scalar(v)),
        l_st: terms.l_st.map_or(0.0, |v| tape.scalar(v)),
        total: tape.scalar(total),
    }
}

/// Plain-value counterpart of [`total_taped`].
pub fn total_loss(terms: &LossBreakdown, weights: &LossWeights) -> LossBreakdown {
    let weighted = [
        (weights.alpha_e, terms.l_e),
        (weights.alpha_g, terms.l_g),
        (weights.alpha_sk, terms.l_sk),
        (weights.alpha_ol, terms.l_ol),
        (weights.alpha_sc, terms.l_sc),
        (weights.alpha_st, terms.l_st),
    ];
    let mut total = terms.chd;
    for (w, t) in weighted {
        if w != 0.0 {
            total += t * w;
        }
    }
    LossBreakdown { total, ..*terms }
}

// Value-only entry points.

pub fn chamfer(pred: &PredictedCloud, gt: &GroundTruthCloud) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Empty("predicted cloud"));
    }
    let index = PredictedIndex::from_cloud(pred)?;
    let sel = ChamferSelection::build(&index, gt)?;
    let mut tape = Tape::new();
    let cloud = TapedCloud::lift(&mut tape, pred);
    let g = tape.constant(points_matrix(gt.points()));
    let v = chamfer_taped(&mut tape, cloud.positions, g, &sel)?;
    Ok(tape.scalar(v))
}

/// Mean area element per patch over the cloud's samples.
pub fn patch_areas(pred: &PredictedCloud) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let cloud = TapedCloud::lift(&mut tape, pred);
    let forms = forms_taped(&mut tape, &cloud)?;
    let a = patch_areas_taped(&mut tape, &cloud, &forms)?;
    Ok(tape.value(a).iter().copied().collect())
}

fn with_forms<T>(
    pred: &PredictedCloud,
    areas: &[f64],
    f: impl FnOnce(&mut Tape, &FormVars, Var, &[usize]) -> Result<T>,
) -> Result<T> {
    if areas.len() != pred.patch_count {
        return Err(Error::Config(format!(
            "{} areas for {} patches",
            areas.len(),
            pred.patch_count
        )));
    }
    let mut tape = Tape::new();
    let cloud = TapedCloud::lift(&mut tape, pred);
    let forms = forms_taped(&mut tape, &cloud)?;
    let a = tape.constant(Array2::from_shape_vec((areas.len(), 1), areas.to_vec()).expect("k x 1"));
    f(&mut tape, &forms, a, &cloud.patch_ids)
}

pub fn distortion(pred: &PredictedCloud, areas: &[f64]) -> Result<(f64, f64)> {
    with_forms(pred, areas, |t, forms, a, ids| {
        let (e, g) = distortion_taped(t, forms, a, ids)?;
        Ok((t.scalar(e), t.scalar(g)))
    })
}

pub fn skew(pred: &PredictedCloud, areas: &[f64]) -> Result<f64> {
    with_forms(pred, areas, |t, forms, a, ids| {
        let s = skew_taped(t, forms, a, ids)?;
        Ok(t.scalar(s))
    })
}

pub fn overlap(areas: &[f64], gt_area: f64) -> f64 {
    let excess = areas.iter().fold(0.0, |acc, a| acc + a) - gt_area;
    excess.max(0.0).powi(2)
}

/// Value of the consistency term with its diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyValue {
    pub value: f64,
    pub skipped: usize,
    pub fallbacks: usize,
}

pub fn surface_consistency(
    pred: &PredictedCloud,
    gt: &GroundTruthCloud,
    cfg: &ConsistencyConfig,
) -> Result<ConsistencyValue> {
    if pred.is_empty() {
        return Err(Error::Empty("predicted cloud"));
    }
    let index = PredictedIndex::from_cloud(pred)?;
    let normals: Vec<[f64; 3]> = associate_points(index.global().points(), gt)
        .into_iter()
        .map(|a| a.normal)
        .collect();
    let sel = ConsistencySelection::build(pred, &index, &normals, cfg)?;
    let mut tape = Tape::new();
    let cloud = TapedCloud::lift(&mut tape, pred);
    let v = surface_consistency_taped(&mut tape, &cloud, &sel, cfg.grad_through_global)?;
    Ok(ConsistencyValue {
        value: tape.scalar(v),
        skipped: sel.skipped,
        fallbacks: sel.fallback_count(),
    })
}

/// Stitching error of `margins` (margin samples tagged with their patch)
/// against the points of `pred`.
pub fn stitching(margins: &PredictedCloud, pred: &PredictedCloud) -> Result<f64> {
    Ok(stitching_parts(margins, pred)?.0)
}

/// Stitching error together with its per-patch summands.
pub fn stitching_parts(margins: &PredictedCloud, pred: &PredictedCloud) -> Result<(f64, Vec<f64>)> {
    let index = PredictedIndex::from_cloud(pred)?;
    let sel = StitchSelection::build(
        &margins.positions(),
        &margins.patch_ids(),
        &index,
        pred.patch_count,
    )?;
    let mut tape = Tape::new();
    let m = tape.constant(points_matrix(&margins.positions()));
    let p = tape.constant(points_matrix(&pred.positions()));
    let per_patch = stitching_per_patch_taped(&mut tape, m, p, &sel)?;
    let total = tape.sum(per_patch);
    Ok((tape.scalar(total), tape.value(per_patch).iter().copied().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_grad, max_relative_error, value_and_grad, ParameterBlock};
    use crate::patchmodel::{AffineChart, Atlas, FirstFundamentalForm};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gt_of(points: Vec<[f64; 3]>, normals: Vec<[f64; 3]>) -> GroundTruthCloud {
        GroundTruthCloud::new(points, normals, 1.0).unwrap()
    }

    fn with_forms_cloud(forms: &[(f64, f64, f64)], patch_ids: &[usize], k: usize) -> PredictedCloud {
        let pos: Vec<[f64; 3]> = (0..forms.len()).map(|i| [i as f64, 0.0, 0.0]).collect();
        let mut c = PredictedCloud::from_positions(&pos, patch_ids, k);
        for (p, &(e, f, g)) in c.points.iter_mut().zip(forms) {
            // du = (√E, 0, 0), dv chosen so du·dv = F and |dv|² = G.
            let a = e.sqrt();
            let b = f / a;
            let c2 = (g - b * b).max(0.0).sqrt();
            p.jacobian = Jacobian {
                du: [a, 0.0, 0.0],
                dv: [b, c2, 0.0],
            };
            p.fff = FirstFundamentalForm { e, f, g };
        }
        c
    }

    #[test]
    fn chamfer_single_points() {
        let pred = PredictedCloud::from_positions(&[[0.0; 3]], &[0], 1);
        let gt = gt_of(vec![[1.0, 0.0, 0.0]; 4], vec![[0.0, 0.0, 1.0]; 4]);
        assert_eq!(chamfer(&pred, &gt).unwrap(), 2.0);
    }

    #[test]
    fn chamfer_identical_is_zero() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let pred = PredictedCloud::from_positions(&pts, &[0, 0, 1, 1], 2);
        let gt = gt_of(pts, vec![[0.0, 0.0, 1.0]; 4]);
        assert_eq!(chamfer(&pred, &gt).unwrap(), 0.0);
    }

    #[test]
    fn distortion_hand_example() {
        let c = with_forms_cloud(&[(1.0, 0.0, 1.0), (3.0, 0.0, 1.0)], &[0, 0], 1);
        let (le, lg) = distortion(&c, &[1.0]).unwrap();
        assert!((le - 1.0).abs() < 1e-12);
        assert_eq!(lg, 0.0);
        let c = with_forms_cloud(&[(2.0, 0.0, 2.0); 3], &[0, 0, 0], 1);
        assert_eq!(distortion(&c, &[0.5]).unwrap(), (0.0, 0.0));
        assert!(matches!(distortion(&c, &[0.0]), Err(Error::NonPositiveArea { .. })));
    }

    #[test]
    fn skew_hand_example() {
        let c = with_forms_cloud(&[(4.0, 2.0, 4.0)], &[0], 1);
        assert!((skew(&c, &[4.0]).unwrap() - 0.25).abs() < 1e-15);
        let c = with_forms_cloud(&[(1.0, 0.0, 1.0), (2.0, 0.0, 5.0)], &[0, 0], 1);
        assert_eq!(skew(&c, &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn overlap_hinge() {
        assert_eq!(overlap(&[0.5, 0.3], 1.0), 0.0);
        assert_eq!(overlap(&[1.0, 0.5], 1.0), 0.25);
        assert_eq!(overlap(&[1.0], 1.0), 0.0);
    }

    #[test]
    fn overlap_gradient_at_hinge() {
        let p = ParameterBlock(vec![0.6, 0.4]);
        let (v, g) = value_and_grad(&p, |t, a| Ok(overlap_taped(t, a, 1.0))).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.0, vec![0.0, 0.0]);
        let p = ParameterBlock(vec![0.75, 0.75]);
        let (v, g) = value_and_grad(&p, |t, a| Ok(overlap_taped(t, a, 1.0))).unwrap();
        assert_eq!(v, 0.25);
        assert_eq!(g.0, vec![1.0, 1.0]);
    }

    #[test]
    fn stitching_hand_example() {
        let pred = PredictedCloud::from_positions(&[[0.0; 3], [0.1, 0.0, 0.0]], &[0, 1], 2);
        let margins = pred.clone();
        let v = stitching(&margins, &pred).unwrap();
        assert!((v - 0.02).abs() < 1e-15);
        let single = PredictedCloud::from_positions(&[[0.0; 3]], &[0], 1);
        assert!(matches!(stitching(&single, &single), Err(Error::SinglePatch)));
    }

    #[test]
    fn stitching_identical_patches() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let mut all = pts.to_vec();
        all.extend_from_slice(&pts);
        let pred = PredictedCloud::from_positions(&all, &[0, 0, 0, 1, 1, 1], 2);
        assert_eq!(stitching(&pred, &pred).unwrap(), 0.0);
    }

    fn plane_cloud(k: usize, side: usize, tilt: impl Fn(usize, f64, f64) -> [f64; 3]) -> PredictedCloud {
        let mut points = Vec::new();
        for patch in 0..k {
            for j in 0..side {
                for i in 0..side {
                    let (u, v) = (i as f64 / (side - 1) as f64, j as f64 / (side - 1) as f64);
                    let du = {
                        let a = tilt(patch, u + 1e-7, v);
                        let b = tilt(patch, u - 1e-7, v);
                        [(a[0] - b[0]) / 2e-7, (a[1] - b[1]) / 2e-7, (a[2] - b[2]) / 2e-7]
                    };
                    let dv = {
                        let a = tilt(patch, u, v + 1e-7);
                        let b = tilt(patch, u, v - 1e-7);
                        [(a[0] - b[0]) / 2e-7, (a[1] - b[1]) / 2e-7, (a[2] - b[2]) / 2e-7]
                    };
                    let jacobian = Jacobian { du, dv };
                    points.push(PredictedPoint {
                        position: tilt(patch, u, v),
                        patch_id: patch,
                        uv: UvPoint::new(u, v),
                        jacobian,
                        analytic_normal: analytic_normal(&jacobian).ok(),
                        fff: fundamental_form(&jacobian),
                    });
                }
            }
        }
        PredictedCloud {
            points,
            patch_count: k,
        }
    }

    #[test]
    fn consistency_on_a_plane_is_zero() {
        let cloud = plane_cloud(2, 6, |k, u, v| [u + 0.03 * k as f64, v, 0.0]);
        let gt = gt_of(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]],
            vec![[0.0, 0.0, 1.0]; 4],
        );
        for mode in [NormalMode::Analytic, NormalMode::Approximate] {
            let cfg = ConsistencyConfig {
                normal_mode: mode,
                ..Default::default()
            };
            let v = surface_consistency(&cloud, &gt, &cfg).unwrap();
            assert!(v.value.abs() < 1e-12, "{mode:?}: {}", v.value);
            assert_eq!(v.skipped, 0);
        }
    }

    #[test]
    fn crossing_planes_have_larger_consistency_loss() {
        let gt = gt_of(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]],
            vec![[0.0, 0.0, 1.0]; 4],
        );
        let flat = plane_cloud(2, 6, |k, u, v| [u + 0.03 * k as f64, v, 0.0]);
        let a = 60f64.to_radians();
        let crossing = plane_cloud(2, 6, |k, u, v| {
            if k == 0 {
                [u, v, 0.0]
            } else {
                [0.5 + (u - 0.5) * a.cos(), v, (u - 0.5) * a.sin()]
            }
        });
        let cfg = ConsistencyConfig::default();
        let f = surface_consistency(&flat, &gt, &cfg).unwrap().value;
        let c = surface_consistency(&crossing, &gt, &cfg).unwrap().value;
        assert!(c > f);
        assert!((0.0..=1.0).contains(&c));
    }

    fn toy_atlas() -> (Atlas, GroundTruthCloud) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = Architecture::new(2, 8, 0).unwrap();
        let atlas = Atlas::init(arch, &mut rng);
        let pts: Vec<[f64; 3]> = (0..30)
            .map(|i| {
                let t = i as f64 / 30.0;
                [t.cos(), t.sin(), 0.3 * t]
            })
            .collect();
        let gt = GroundTruthCloud::new(pts, vec![[0.0, 0.0, 1.0]; 30], 0.05).unwrap();
        (atlas, gt)
    }

    #[test]
    fn skew_gradient_matches_finite_differences() {
        let (atlas, _) = toy_atlas();
        let arch = atlas.architecture();
        let uvs = vec![
            vec![UvPoint::new(0.2, 0.3), UvPoint::new(0.7, 0.6)],
            vec![UvPoint::new(0.5, 0.5), UvPoint::new(0.1, 0.9)],
        ];
        let objective = |t: &mut Tape, p: Var| -> Result<Var> {
            let cloud = TapedCloud::record(t, &arch, p, &uvs, true)?;
            let forms = forms_taped(t, &cloud)?;
            let areas = patch_areas_taped(t, &cloud, &forms)?;
            skew_taped(t, &forms, areas, &cloud.patch_ids)
        };
        let (_, g) = value_and_grad(atlas.params(), objective).unwrap();
        let fd = finite_diff_grad(atlas.params(), 1e-6, |x| {
            crate::diffcore::evaluate(x, objective)
        })
        .unwrap();
        assert!(max_relative_error(&g, &fd) < 1e-4);
    }

    #[test]
    fn affine_atlas_taped_values_match_plain() {
        let arch = Architecture::new(1, 4, 0).unwrap();
        let atlas = Atlas::from_affine_charts(arch, &[AffineChart::identity()]).unwrap();
        let uvs = vec![vec![UvPoint::new(0.25, 0.5), UvPoint::new(0.5, 0.75)]];
        let mut tape = Tape::new();
        let leaf = tape.param(
            Array2::from_shape_vec((atlas.params().len(), 1), atlas.params().0.clone()).unwrap(),
        );
        let cloud = TapedCloud::record(&mut tape, &arch, leaf, &uvs, true).unwrap();
        let snap = cloud.snapshot(&tape);
        assert!((snap.points[0].position[0] - 0.25).abs() < 1e-12);
        assert!((snap.points[1].position[1] - 0.75).abs() < 1e-12);
        assert_eq!(patch_areas(&snap).unwrap().len(), 1);
    }

    #[test]
    fn total_with_zero_weights_is_chamfer() {
        let terms = LossBreakdown {
            chd: 0.3,
            l_e: 1.0,
            l_g: 2.0,
            l_sk: 3.0,
            l_ol: 4.0,
            l_sc: 5.0,
            l_st: 6.0,
            total: 0.0,
        };
        let zero = LossWeights {
            alpha_e: 0.0,
            alpha_g: 0.0,
            alpha_sk: 0.0,
            alpha_ol: 0.0,
            alpha_sc: 0.0,
            alpha_st: 0.0,
        };
        assert_eq!(total_loss(&terms, &zero).total, 0.3);
        let w = LossWeights::default();
        let full = total_loss(&terms, &w).total;
        let base = total_loss(&terms, &w.baseline()).total;
        assert!((full - base - 0.001 * 5.0 - 0.001 * 6.0).abs() < 1e-12);
    }
}
