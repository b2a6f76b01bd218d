//! Fixtures and check suites shared by the integration tests and the
//! acceptance runner. Every suite returns measurements; callers decide the
//! thresholds.
#![allow(dead_code)]

use std::collections::BTreeSet;

use patchfit::diffcore::{evaluate as eval_objective, finite_diff_grad, value_and_grad, ParameterBlock, Tape, Var};
use patchfit::fit::{FitConfig, Trainer, Variant};
use patchfit::io::shapes::{gen_shape, normalize, Shape, ShapeSpec};
use patchfit::losses::{
    self, ChamferSelection, ConsistencyConfig, ConsistencySelection, LossWeights, NormalMode, StitchSelection,
    TapedCloud, TermVars,
};
use patchfit::metrics::{metric_overlap, metric_stitching, margin_grid};
use patchfit::patchmodel::{
    analytic_normal, fundamental_form, regular_grid, sample_margin, sample_uv, AffineChart, Architecture, Atlas,
    MarginSpec, PredictedCloud, SamplingStrategy, UvPoint,
};
use patchfit::spatial::{
    covariance_normal, squared_distance, GroundTruthCloud, NeighborConfig, NeighborIndex, PredictedIndex,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn fibonacci_sphere(n: usize, radius: f64) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let normals: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let a = golden * i as f64;
            [r * a.cos(), r * a.sin(), z]
        })
        .collect();
    let points = normals.iter().map(|n| [radius * n[0], radius * n[1], radius * n[2]]).collect();
    (points, normals)
}

/// Largest coordinate error relative to the largest reference coordinate.
pub fn scaled_error(got: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    got.iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0.0, f64::max)
}

// Gradient suite.

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Term {
    Chamfer,
    Stretch,
    Squeeze,
    Skew,
    Overlap,
    Consistency(NormalMode),
    Stitching,
    Total(NormalMode),
}

impl Term {
    pub fn label(&self) -> String {
        match self {
            Term::Chamfer => "chamfer".into(),
            Term::Stretch => "distortion_e".into(),
            Term::Squeeze => "distortion_g".into(),
            Term::Skew => "skew".into(),
            Term::Overlap => "overlap".into(),
            Term::Consistency(m) => format!("consistency_{m:?}").to_lowercase(),
            Term::Stitching => "stitching".into(),
            Term::Total(m) => format!("total_{m:?}").to_lowercase(),
        }
    }

    pub fn all() -> Vec<Term> {
        vec![
            Term::Chamfer,
            Term::Stretch,
            Term::Squeeze,
            Term::Skew,
            Term::Overlap,
            Term::Consistency(NormalMode::Analytic),
            Term::Consistency(NormalMode::Approximate),
            Term::Stitching,
            Term::Total(NormalMode::Analytic),
            Term::Total(NormalMode::Approximate),
        ]
    }
}

/// Small atlas with frozen samples and selections.
pub struct GradProblem {
    pub atlas: Atlas,
    pub gt: GroundTruthCloud,
    pub uvs: Vec<Vec<UvPoint>>,
    pub margins: Vec<Vec<UvPoint>>,
    pub chamfer: ChamferSelection,
    pub analytic: ConsistencySelection,
    pub approximate: ConsistencySelection,
    pub stitch: StitchSelection,
}

impl GradProblem {
    /// Two crossing patches of width 8 with perturbed weights, 30 target
    /// points. The patches interleave so global and patch-local
    /// neighbourhoods differ.
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let base = crossing_atlas(8, 2.0);
        let params = base.params().0.iter().map(|p| p + r.random_range(-0.2..0.2)).collect();
        let atlas = Atlas::new(base.architecture(), ParameterBlock(params)).unwrap();
        let (points, normals) = fibonacci_sphere(30, 0.5);
        // Tiny reference area keeps the overlap hinge active.
        let gt = GroundTruthCloud::new(points, normals, 1e-4).unwrap();
        let uvs: Vec<Vec<UvPoint>> = (0..2)
            .map(|_| sample_uv(15, SamplingStrategy::UniformRandom, &mut r))
            .collect();
        let spec = MarginSpec::new(0.1).unwrap();
        let margins: Vec<Vec<UvPoint>> = (0..2).map(|_| sample_margin(spec, 6, &mut r).unwrap()).collect();
        let cloud = atlas.predicted_cloud(&uvs).unwrap();
        let index = PredictedIndex::from_cloud(&cloud).unwrap();
        let chamfer = ChamferSelection::build(&index, &gt).unwrap();
        let normals: Vec<[f64; 3]> = chamfer.pred_to_gt.iter().map(|&j| gt.normals()[j]).collect();
        let cfg = |mode| ConsistencyConfig {
            normal_mode: mode,
            grad_through_global: true,
            neighbors: NeighborConfig::new(8, 120.0).unwrap(),
        };
        let analytic = ConsistencySelection::build(&cloud, &index, &normals, &cfg(NormalMode::Analytic)).unwrap();
        let approximate =
            ConsistencySelection::build(&cloud, &index, &normals, &cfg(NormalMode::Approximate)).unwrap();
        let margin_cloud = atlas.predicted_cloud(&margins).unwrap();
        let stitch =
            StitchSelection::build(&margin_cloud.positions(), &margin_cloud.patch_ids(), &index, 2).unwrap();
        Self {
            atlas,
            gt,
            uvs,
            margins,
            chamfer,
            analytic,
            approximate,
            stitch,
        }
    }

    /// With `Mode::Frozen` the global neighbourhoods read constant copies of
    /// the unperturbed positions, which is what a detached global branch
    /// differentiates (analytic normals only).
    fn record(&self, tape: &mut Tape, leaf: Var, term: Term, mode: Mode) -> patchfit::Result<Var> {
        let arch = self.atlas.architecture();
        let cloud = TapedCloud::record(tape, &arch, leaf, &self.uvs, true)?;
        let consistency = |tape: &mut Tape, normals| {
            let sel = match normals {
                NormalMode::Analytic => &self.analytic,
                NormalMode::Approximate => &self.approximate,
            };
            match mode {
                Mode::Through => losses::surface_consistency_taped(tape, &cloud, sel, true),
                Mode::Detached => losses::surface_consistency_taped(tape, &cloud, sel, false),
                Mode::Frozen => {
                    assert_eq!(normals, NormalMode::Analytic);
                    let base = self.atlas.predicted_cloud(&self.uvs)?;
                    let frozen = TapedCloud {
                        positions: tape.constant(losses::points_matrix(&base.positions())),
                        ..cloud.clone()
                    };
                    losses::surface_consistency_taped(tape, &frozen, sel, true)
                }
            }
        };
        let stitching = |tape: &mut Tape| -> patchfit::Result<Var> {
            let m = TapedCloud::record(tape, &arch, leaf, &self.margins, false)?;
            losses::stitching_taped(tape, m.positions, cloud.positions, &self.stitch)
        };
        let gt = tape.constant(losses::points_matrix(self.gt.points()));
        let chd = losses::chamfer_taped(tape, cloud.positions, gt, &self.chamfer)?;
        let forms = losses::forms_taped(tape, &cloud)?;
        let areas = losses::patch_areas_taped(tape, &cloud, &forms)?;
        let (l_e, l_g) = losses::distortion_taped(tape, &forms, areas, &cloud.patch_ids)?;
        let l_sk = losses::skew_taped(tape, &forms, areas, &cloud.patch_ids)?;
        let l_ol = losses::overlap_taped(tape, areas, self.gt.area());
        Ok(match term {
            Term::Chamfer => chd,
            Term::Stretch => l_e,
            Term::Squeeze => l_g,
            Term::Skew => l_sk,
            Term::Overlap => l_ol,
            Term::Consistency(mode) => consistency(tape, mode)?,
            Term::Stitching => stitching(tape)?,
            Term::Total(mode) => {
                let terms = TermVars {
                    chd,
                    l_e,
                    l_g,
                    l_sk,
                    l_ol,
                    l_sc: Some(consistency(tape, mode)?),
                    l_st: Some(stitching(tape)?),
                };
                // Unit weights make every term visible in the gradient.
                let w = LossWeights {
                    alpha_e: 1.0,
                    alpha_g: 1.0,
                    alpha_sk: 1.0,
                    alpha_ol: 1.0,
                    alpha_sc: 1.0,
                    alpha_st: 1.0,
                };
                losses::total_taped(tape, &terms, &w)?
            }
        })
    }

    /// Reverse-mode gradient against central differences (step 1e-6).
    pub fn check(&self, term: Term, through_global: bool) -> GradCheck {
        let (taped, oracle) = if through_global {
            (Mode::Through, Mode::Through)
        } else {
            (Mode::Detached, Mode::Frozen)
        };
        let (value, g) = value_and_grad(self.atlas.params(), |t: &mut Tape, p: Var| self.record(t, p, term, taped)).unwrap();
        let fd = finite_diff_grad(self.atlas.params(), 1e-6, |x: &ParameterBlock| {
            eval_objective(x, |t: &mut Tape, p: Var| self.record(t, p, term, oracle))
        })
        .unwrap();
        GradCheck {
            value,
            error: scaled_error(&g.0, &fd.0),
            grad_norm: g.0.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mode {
    Through,
    Detached,
    Frozen,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub value: f64,
    pub error: f64,
    pub grad_norm: f64,
}

/// Every term in both global-gradient modes: `(label, check)`.
pub fn gradient_suite() -> Vec<(String, GradCheck)> {
    let problem = GradProblem::new(11);
    let mut out = Vec::new();
    for term in Term::all() {
        for through in [true, false] {
            let depends = matches!(
                term,
                Term::Consistency(NormalMode::Analytic) | Term::Total(NormalMode::Analytic)
            );
            if !through && !depends {
                continue;
            }
            let label = if depends {
                format!("{}{}", term.label(), if through { "" } else { "_detached" })
            } else {
                term.label()
            };
            out.push((label, problem.check(term, through)));
        }
    }
    out
}

// Oracle suite.

pub fn random_points(r: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
        .collect()
}

pub fn random_unit(r: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn brute_nearest(q: &[f64; 3], pts: &[[f64; 3]], accept: impl Fn(usize) -> bool) -> Option<(usize, f64)> {
    pts.iter()
        .enumerate()
        .filter(|(j, _)| accept(*j))
        .map(|(j, p)| (j, squared_distance(q, p)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
}

fn brute_knn(q: &[f64; 3], pts: &[[f64; 3]], k: usize, accept: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut all: Vec<(usize, f64)> = pts
        .iter()
        .enumerate()
        .filter(|(j, _)| accept(*j))
        .map(|(j, p)| (j, squared_distance(q, p)))
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.into_iter().take(k).map(|(j, _)| j).collect()
}

pub fn brute_chamfer(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
    let side = |a: &[[f64; 3]], b: &[[f64; 3]]| {
        a.iter().map(|p| brute_nearest(p, b, |_| true).unwrap().1).sum::<f64>() / a.len() as f64
    };
    side(pred, gt) + side(gt, pred)
}

pub fn brute_stitching(margin: &[[f64; 3]], margin_patch: &[usize], pred: &[[f64; 3]], ids: &[usize], k: usize) -> f64 {
    (0..k)
        .map(|patch| {
            let mine: Vec<&[f64; 3]> = margin
                .iter()
                .zip(margin_patch)
                .filter(|(_, &p)| p == patch)
                .map(|(m, _)| m)
                .collect();
            mine.iter()
                .map(|m| brute_nearest(m, pred, |j| ids[j] != patch).unwrap().1)
                .sum::<f64>()
                / mine.len() as f64
        })
        .sum()
}

pub fn brute_overlap(pred: &[[f64; 3]], ids: &[usize], t: f64) -> f64 {
    let total: usize = pred
        .iter()
        .map(|p| {
            pred.iter()
                .zip(ids)
                .filter(|(q, _)| squared_distance(p, q) <= t * t)
                .map(|(_, &k)| k)
                .collect::<BTreeSet<_>>()
                .len()
        })
        .sum();
    total as f64 / pred.len() as f64
}

fn random_cloud(r: &mut ChaCha8Rng, n: usize, k: usize) -> PredictedCloud {
    let pos = random_points(r, n);
    // Every patch gets at least one point.
    let ids: Vec<usize> = (0..n).map(|i| if i < k { i } else { r.random_range(0..k) }).collect();
    PredictedCloud::from_positions(&pos, &ids, k)
}

#[derive(Debug, Clone, Default)]
pub struct OracleReport {
    pub instances: usize,
    pub chamfer_err: f64,
    pub knn_mismatches: usize,
    pub constrained_mismatches: usize,
    pub stitching_err: f64,
    pub overlap_err: f64,
}

impl OracleReport {
    pub fn worst_error(&self) -> f64 {
        self.chamfer_err.max(self.stitching_err).max(self.overlap_err)
    }

    pub fn mismatches(&self) -> usize {
        self.knn_mismatches + self.constrained_mismatches
    }
}

/// Fast implementations against brute force on `instances` random clouds
/// of at most 500 points.
pub fn oracle_suite(instances: usize, seed: u64) -> OracleReport {
    let mut r = rng(seed);
    let mut rep = OracleReport {
        instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let n = r.random_range(20..=250);
        let k = r.random_range(2..=6);
        let pred = random_cloud(&mut r, n, k);
        let pos = pred.positions();
        let ids = pred.patch_ids();
        let gt_n = r.random_range(4..=250);
        let gt_pts = random_points(&mut r, gt_n);
        let gt_normals: Vec<[f64; 3]> = (0..gt_n).map(|_| random_unit(&mut r)).collect();
        let gt = GroundTruthCloud::new(gt_pts.clone(), gt_normals.clone(), 1.0).unwrap();

        let fast = losses::chamfer(&pred, &gt).unwrap();
        let slow = brute_chamfer(&pos, &gt_pts);
        rep.chamfer_err = rep.chamfer_err.max((fast - slow).abs() / slow.max(1e-300));

        let index = NeighborIndex::build(&pos).unwrap();
        let kq = r.random_range(1..=12.min(n));
        for q in 0..10 {
            let query = &random_points(&mut r, 1)[0];
            let fast: Vec<usize> = index.knn(query, kq).into_iter().map(|nb| nb.index).collect();
            if fast != brute_knn(query, &pos, kq, |_| true) {
                rep.knn_mismatches += 1;
            }
            let _ = q;
        }

        let pindex = PredictedIndex::from_cloud(&pred).unwrap();
        let normals: Vec<[f64; 3]> = (0..n).map(|_| random_unit(&mut r)).collect();
        let cfg = NeighborConfig::new(r.random_range(3..=10), r.random_range(30.0..170.0)).unwrap();
        for q in 0..n.min(25) {
            let got = pindex.constrained_knn(q, &cfg, &normals);
            let filtered = brute_knn(&pos[q], &pos, cfg.n, |j| {
                j != q && patchfit::spatial::normal_angle_deg(&normals[q], &normals[j]) < cfg.theta
            });
            let expected = if filtered.len() >= 3 {
                (filtered, false)
            } else {
                (brute_knn(&pos[q], &pos, cfg.n, |j| j != q), true)
            };
            if (got.indices, got.fallback) != expected {
                rep.constrained_mismatches += 1;
            }
        }

        let m = r.random_range(1..=20);
        let margin_pos = random_points(&mut r, m * k);
        let margin_ids: Vec<usize> = (0..m * k).map(|i| i % k).collect();
        let margins = PredictedCloud::from_positions(&margin_pos, &margin_ids, k);
        let fast = losses::stitching(&margins, &pred).unwrap();
        let slow = brute_stitching(&margin_pos, &margin_ids, &pos, &ids, k);
        rep.stitching_err = rep.stitching_err.max((fast - slow).abs() / slow.max(1e-300));

        let t = r.random_range(0.05..0.6);
        let fast = metric_overlap(&pred, t).unwrap();
        rep.overlap_err = rep.overlap_err.max((fast - brute_overlap(&pos, &ids, t)).abs());
    }
    rep
}

// Analytic geometry.

pub fn chart(origin: [f64; 3], du: [f64; 3], dv: [f64; 3]) -> AffineChart {
    AffineChart { origin, du, dv }
}

pub fn affine_atlas(charts: &[AffineChart], hidden: usize) -> Atlas {
    let arch = Architecture::new(charts.len(), hidden, 0).unwrap();
    Atlas::from_affine_charts(arch, charts).unwrap()
}

pub fn angle_between_lines(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).abs().min(1.0);
    d.acos().to_degrees()
}

#[derive(Debug, Clone)]
pub struct GeometryReport {
    /// Largest deviation from the tabulated E, F, G, normals and areas.
    pub table_error: f64,
    /// Largest angle between the analytic and the dense covariance normal.
    pub worst_normal_angle: f64,
    pub decoders: usize,
}

/// `(chart, E, F, G, normal, area)` rows with hand-computed values.
pub fn chart_table() -> Vec<(AffineChart, [f64; 3], [f64; 3], f64)> {
    let o = [0.0; 3];
    vec![
        (chart(o, [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]), [1.0, 0.0, 1.0], [0.0, 0.0, 1.0], 1.0),
        (chart(o, [2.0, 0.0, 0.0], [0.0, 3.0, 0.0]), [4.0, 0.0, 9.0], [0.0, 0.0, 1.0], 6.0),
        (chart(o, [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]), [1.0, 1.0, 2.0], [0.0, 0.0, 1.0], 1.0),
        (chart(o, [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]), [1.0, 0.0, 1.0], [0.0, 0.0, -1.0], 1.0),
    ]
}

pub fn geometry_suite(decoders: usize, seed: u64) -> GeometryReport {
    let mut table_error = 0.0f64;
    let mut r = rng(seed);
    for (c, efg, normal, area) in chart_table() {
        let atlas = affine_atlas(&[c], 8);
        let uvs = sample_uv(25, SamplingStrategy::UniformRandom, &mut r);
        for uv in &uvs {
            let j = atlas.jacobian(0, *uv).unwrap();
            let f = fundamental_form(&j);
            let n = analytic_normal(&j).unwrap();
            for (a, b) in [f.e, f.f, f.g].iter().zip(efg) {
                table_error = table_error.max((a - b).abs());
            }
            for (a, b) in n.iter().zip(normal) {
                table_error = table_error.max((a - b).abs());
            }
        }
        table_error = table_error.max((atlas.patch_area(0, &uvs).unwrap() - area).abs());
    }
    let mut worst = 0.0f64;
    for d in 0..decoders {
        let arch = Architecture::new(1, 16, 0).unwrap();
        let atlas = Atlas::init(arch, &mut rng(seed + 1 + d as u64));
        for uv in sample_uv(5, SamplingStrategy::UniformRandom, &mut r) {
            let n = analytic_normal(&atlas.jacobian(0, uv).unwrap()).unwrap();
            let h = 1e-3;
            let mut local = Vec::with_capacity(50);
            for i in -3..=3 {
                for j in -3..=3 {
                    local.push(UvPoint::new(uv.u + h * i as f64, uv.v + h * j as f64));
                }
            }
            local.push(UvPoint::new(uv.u + 0.5 * h, uv.v - 0.5 * h));
            let pts: Vec<[f64; 3]> = local.iter().map(|p| atlas.decode(0, *p).unwrap()).collect();
            let (c, _) = covariance_normal(&pts).unwrap();
            worst = worst.max(angle_between_lines(n, c));
        }
    }
    GeometryReport {
        table_error,
        worst_normal_angle: worst,
        decoders,
    }
}

// Behavioural fixtures.

/// Flat square target `z = 0` over `[-1, 1]²` sampled on a jittered grid.
pub fn flat_square(side_n: usize, half_x: f64, half_y: f64, seed: u64) -> GroundTruthCloud {
    let mut r = rng(seed);
    let mut pts = Vec::with_capacity(side_n * side_n);
    for i in 0..side_n {
        for j in 0..side_n {
            let u = (i as f64 + r.random_range(0.0..1.0)) / side_n as f64;
            let v = (j as f64 + r.random_range(0.0..1.0)) / side_n as f64;
            pts.push([half_x * (2.0 * u - 1.0), half_y * (2.0 * v - 1.0), 0.0]);
        }
    }
    let n = pts.len();
    GroundTruthCloud::new(pts, vec![[0.0, 0.0, 1.0]; n], 4.0 * half_x * half_y).unwrap()
}

/// Config for the two-patch fixtures: no pretraining, `iters` steps.
pub fn fixture_config(iters: usize, seed: u64) -> FitConfig {
    let mut cfg = FitConfig::default();
    cfg.seed = seed;
    cfg.model.patches = 2;
    cfg.model.hidden = 16;
    cfg.sampling.samples = 150;
    cfg.schedule.total_iters = iters;
    cfg.schedule.pretrain_iters = Some(0);
    cfg
}

/// Patch 0 covers the target plane; patch 1 is a strip of the given width
/// crossing it at 60° along the `x` axis.
pub fn crossing_atlas(hidden: usize, width: f64) -> Atlas {
    let (s, c) = (60f64.to_radians().sin(), 60f64.to_radians().cos());
    let h = 0.5 * width;
    affine_atlas(
        &[
            chart([-1.0, -1.0, 0.0], [2.0, 0.0, 0.0], [0.0, 2.0, 0.0]),
            chart([-1.0, -h * c, -h * s], [2.0, 0.0, 0.0], [0.0, width * c, width * s]),
        ],
        hidden,
    )
}

/// Dihedral angle in degrees between the two patches of an atlas, from the
/// mean analytic normals on a grid.
pub fn dihedral_deg(atlas: &Atlas) -> f64 {
    let grid = regular_grid(8);
    let mean_normal = |k: usize| {
        let mut acc = [0.0; 3];
        for uv in &grid {
            let n = analytic_normal(&atlas.jacobian(k, *uv).unwrap()).unwrap();
            for a in 0..3 {
                acc[a] += n[a];
            }
        }
        let len = (acc[0] * acc[0] + acc[1] * acc[1] + acc[2] * acc[2]).sqrt();
        [acc[0] / len, acc[1] / len, acc[2] / len]
    };
    angle_between_lines(mean_normal(0), mean_normal(1))
}

/// Consistency term on 150 seeded random samples per patch. A regular grid
/// is avoided: on strongly anisotropic patches the nearest grid points are
/// collinear and their covariance normal is arbitrary.
pub fn sampled_consistency(atlas: &Atlas, gt: &GroundTruthCloud) -> f64 {
    let mut r = rng(1234);
    let sets: Vec<Vec<UvPoint>> = (0..atlas.patch_count())
        .map(|_| sample_uv(150, SamplingStrategy::UniformRandom, &mut r))
        .collect();
    let cloud = atlas.predicted_cloud(&sets).unwrap();
    losses::surface_consistency(&cloud, gt, &ConsistencyConfig::default()).unwrap().value
}

#[derive(Debug, Clone, Copy)]
pub struct CrossingReport {
    pub initial: f64,
    pub with_consistency: f64,
    pub without: f64,
    pub initial_dihedral: f64,
    pub final_dihedral: f64,
}

pub fn crossing_run(iters: usize, width: f64, seed: u64, through_global: bool) -> CrossingReport {
    crossing_run_cfg(iters, width, seed, through_global, |_| {})
}

pub fn crossing_run_cfg(iters: usize, width: f64, seed: u64, through_global: bool, tweak: impl Fn(&mut FitConfig)) -> CrossingReport {
    let gt = flat_square(40, 1.0, 1.0, 5);
    let mut cfg = fixture_config(iters, seed);
    cfg.consistency.grad_through_global = through_global;
    tweak(&mut cfg);
    let atlas = crossing_atlas(cfg.model.hidden, width);
    let trainer = Trainer::with_atlas(&gt, &cfg, atlas.clone()).unwrap();
    let sc = trainer.finetune(Variant::Analyt).unwrap();
    let dsp = trainer.finetune(Variant::Dsp).unwrap();
    CrossingReport {
        initial: sampled_consistency(&atlas, &gt),
        with_consistency: sampled_consistency(&sc.atlas, &gt),
        without: sampled_consistency(&dsp.atlas, &gt),
        initial_dihedral: dihedral_deg(&atlas),
        final_dihedral: dihedral_deg(&sc.atlas),
    }
}

/// Two flat patches over a flat strip, 0.2 apart along `x`.
pub fn gapped_strip_atlas(hidden: usize) -> Atlas {
    affine_atlas(
        &[
            chart([-1.0, -0.5, 0.0], [0.9, 0.0, 0.0], [0.0, 1.0, 0.0]),
            chart([0.1, -0.5, 0.0], [0.9, 0.0, 0.0], [0.0, 1.0, 0.0]),
        ],
        hidden,
    )
}

pub fn stitching_metric(atlas: &Atlas) -> f64 {
    let grid = vec![regular_grid(32); atlas.patch_count()];
    let cloud = atlas.predicted_cloud(&grid).unwrap();
    metric_stitching(atlas, &margin_grid(32, 0.1).unwrap(), &cloud).unwrap().0
}

#[derive(Debug, Clone, Copy)]
pub struct StripReport {
    pub initial: f64,
    pub dsp: f64,
    pub stitched: f64,
}

impl StripReport {
    pub fn reduction(&self) -> f64 {
        1.0 - self.stitched / self.dsp
    }
}

/// `pretrain` baseline iterations from the gapped layout, then `finetune`
/// iterations of each variant.
pub fn gapped_strip_run(pretrain: usize, finetune: usize, seed: u64) -> StripReport {
    let gt = flat_square(40, 1.0, 0.5, 9);
    let mut cfg = fixture_config(pretrain + finetune, seed);
    cfg.schedule.pretrain_iters = Some(pretrain);
    let atlas = gapped_strip_atlas(cfg.model.hidden);
    let mut trainer = Trainer::with_atlas(&gt, &cfg, atlas).unwrap();
    trainer.pretrain().unwrap();
    let dsp = trainer.finetune(Variant::Dsp).unwrap();
    let st = trainer.finetune(Variant::AnalytStitch).unwrap();
    StripReport {
        initial: stitching_metric(trainer.atlas()),
        dsp: stitching_metric(&dsp.atlas),
        stitched: stitching_metric(&st.atlas),
    }
}

/// Two sheets `gap` apart with exact normals, normalized.
pub fn two_sheets(n: usize, gap: f64, seed: u64) -> GroundTruthCloud {
    gen_shape(&ShapeSpec {
        shape: Shape::TwoSheets { side: 1.0, gap },
        n,
        noise: 0.0,
        seed,
    })
    .unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct SheetsReport {
    pub queries: usize,
    pub constrained_crossings: usize,
    pub unconstrained_fraction: f64,
}

/// Treats the sheet samples as a two-patch prediction and counts
/// neighbourhoods that reach the other sheet.
pub fn two_sheets_check(n: usize, gap: f64, k: usize, theta: f64) -> SheetsReport {
    let gt = two_sheets(n, gap, 3);
    let pos = gt.points().to_vec();
    let sheet: Vec<usize> = pos.iter().map(|p| usize::from(p[2] > 0.5 * gap)).collect();
    let index = PredictedIndex::build(&pos, &sheet, 2).unwrap();
    let cfg = NeighborConfig::new(k, theta).unwrap();
    let mut constrained_crossings = 0;
    let mut reached = 0;
    for q in 0..pos.len() {
        let c = index.constrained_knn(q, &cfg, gt.normals());
        constrained_crossings += c.indices.iter().filter(|&&j| sheet[j] != sheet[q]).count();
        if index.unconstrained_knn(q, k).iter().any(|&j| sheet[j] != sheet[q]) {
            reached += 1;
        }
    }
    SheetsReport {
        queries: pos.len(),
        constrained_crossings,
        unconstrained_fraction: reached as f64 / pos.len() as f64,
    }
}

// Sphere ablation.

pub const SPHERE_VARIANTS: [Variant; 4] = [Variant::Dsp, Variant::Aprox, Variant::Analyt, Variant::AnalytStitch];

pub fn unit_sphere(seed: u64) -> GroundTruthCloud {
    let raw = gen_shape(&ShapeSpec {
        shape: Shape::Sphere { radius: 1.0 },
        n: 2000,
        noise: 0.0,
        seed,
    })
    .unwrap();
    normalize(&raw).unwrap().0
}

pub fn sphere_config(seed: u64, hidden: usize, iters_per_phase: usize) -> FitConfig {
    let mut cfg = FitConfig::default();
    cfg.seed = seed;
    cfg.model.patches = 6;
    cfg.model.hidden = hidden;
    cfg.sampling.samples = 120;
    cfg.schedule.total_iters = 2 * iters_per_phase;
    cfg.schedule.pretrain_iters = Some(iters_per_phase);
    cfg
}
