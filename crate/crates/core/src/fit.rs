//! Optimization loop: initialization, Adam updates and the two-phase
//! schedule (baseline objective first, then the variant's extra terms).

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{GradientVector, ParameterBlock, Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{
    self, ChamferSelection, ConsistencyConfig, ConsistencySelection, LossBreakdown, LossWeights,
    NormalMode, StitchSelection, TapedCloud, TermVars,
};
use crate::metrics::{evaluate_atlas, EvalConfig, MetricsReport};
use crate::patchmodel::{sample_margin, sample_uv, Architecture, Atlas, MarginSpec, SamplingStrategy, UvPoint};
use crate::spatial::{GroundTruthCloud, PredictedIndex};

/// Loss multiple of the post-pretraining reference that counts as divergent.
pub const DIVERGENCE_FACTOR: f64 = 1e3;
/// Consecutive divergent iterations before a run is aborted.
pub const DIVERGENCE_PATIENCE: usize = 100;

const STREAM_INIT: u64 = 0;
const STREAM_UV: u64 = 1;
const STREAM_MARGIN: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    Dsp,
    Aprox,
    Analyt,
    Stitch,
    AnalytStitch,
    AnalytArea,
    AnalytStitchArea,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Dsp,
        Variant::Aprox,
        Variant::Analyt,
        Variant::Stitch,
        Variant::AnalytStitch,
        Variant::AnalytArea,
        Variant::AnalytStitchArea,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Dsp => "dsp",
            Variant::Aprox => "aprox",
            Variant::Analyt => "analyt",
            Variant::Stitch => "stitch",
            Variant::AnalytStitch => "analyt+stitch",
            Variant::AnalytArea => "analyt-area",
            Variant::AnalytStitchArea => "analyt+stitch-area",
        }
    }

    fn uses_consistency(&self) -> bool {
        !matches!(self, Variant::Dsp | Variant::Stitch)
    }

    fn uses_stitching(&self) -> bool {
        matches!(self, Variant::Stitch | Variant::AnalytStitch | Variant::AnalytStitchArea)
    }

    fn drops_overlap(&self) -> bool {
        matches!(self, Variant::AnalytArea | Variant::AnalytStitchArea)
    }

    pub fn normal_mode(&self) -> NormalMode {
        match self {
            Variant::Aprox => NormalMode::Approximate,
            _ => NormalMode::Analytic,
        }
    }

    /// Weights used after pretraining.
    pub fn weights(&self, base: &LossWeights) -> LossWeights {
        LossWeights {
            alpha_sc: if self.uses_consistency() { base.alpha_sc } else { 0.0 },
            alpha_st: if self.uses_stitching() { base.alpha_st } else { 0.0 },
            alpha_ol: if self.drops_overlap() { 0.0 } else { base.alpha_ol },
            ..*base
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().replace('\u{2212}', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.name().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patches: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patches: 25,
            hidden: 128,
            latent: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Training samples per patch and iteration.
    pub samples: usize,
    /// Margin samples per patch; defaults to `samples`.
    pub margin_count: Option<usize>,
    /// Margin width in UV units.
    pub margin: f64,
    /// Samples and neighbour selections are redrawn every this many
    /// iterations.
    pub rebuild_every: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            margin_count: None,
            margin: 0.1,
            rebuild_every: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_iters: usize,
    /// Defaults to half of `total_iters`.
    pub pretrain_iters: Option<usize>,
    /// Metrics are computed every this many iterations; 0 disables
    /// intermediate reports.
    pub eval_every: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_iters: 3000,
            pretrain_iters: None,
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub seed: u64,
    pub variant: Variant,
    pub model: ModelConfig,
    pub sampling: SamplingConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    /// The normal mode is taken from the variant.
    pub consistency: ConsistencyConfig,
    pub eval: EvalConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            variant: Variant::AnalytStitch,
            model: ModelConfig::default(),
            sampling: SamplingConfig::default(),
            schedule: ScheduleConfig::default(),
            optimizer: OptimizerConfig::default(),
            weights: LossWeights::default(),
            consistency: ConsistencyConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::new(self.model.patches, self.model.hidden, self.model.latent)
    }

    pub fn pretrain_iters(&self) -> usize {
        self.schedule
            .pretrain_iters
            .unwrap_or(self.schedule.total_iters / 2)
    }

    pub fn margin_count(&self) -> usize {
        self.sampling.margin_count.unwrap_or(self.sampling.samples)
    }

    /// Weights of the finetuning phase.
    pub fn finetune_weights(&self) -> LossWeights {
        self.variant.weights(&self.weights)
    }

    pub fn consistency_for(&self, variant: Variant) -> ConsistencyConfig {
        ConsistencyConfig {
            normal_mode: variant.normal_mode(),
            ..self.consistency
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture()?;
        self.weights.validate()?;
        self.consistency.neighbors.validate()?;
        MarginSpec::new(self.sampling.margin)?;
        let n = self.consistency.neighbors.n;
        if self.sampling.samples < (n + 1).max(4) {
            return Err(Error::Config(format!(
                "samples per patch must be >= max(n + 1, 4) = {}, got {}",
                (n + 1).max(4),
                self.sampling.samples
            )));
        }
        if self.margin_count() == 0 {
            return Err(Error::Config("margin_count must be positive".into()));
        }
        if self.sampling.rebuild_every == 0 {
            return Err(Error::Config("rebuild_every must be positive".into()));
        }
        if self.pretrain_iters() > self.schedule.total_iters {
            return Err(Error::Config(format!(
                "pretrain_iters {} exceeds total_iters {}",
                self.pretrain_iters(),
                self.schedule.total_iters
            )));
        }
        if self.model.patches < 2 && self.finetune_weights().alpha_st > 0.0 {
            return Err(Error::Config("stitching needs at least two patches".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0)
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || !(o.epsilon > 0.0)
        {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        if self.eval.grid_side < 2 || !(self.eval.overlap_t > 0.0) {
            return Err(Error::Config("invalid evaluation settings".into()));
        }
        MarginSpec::new(self.eval.margin)?;
        Ok(())
    }
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn optimizer_step(
    state: &mut OptimizerState,
    params: &mut ParameterBlock,
    grad: &GradientVector,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape {
            op: "optimizer_step",
            detail: format!(
                "{} parameters, {} gradients, {} moments",
                params.len(),
                grad.len(),
                state.m.len()
            ),
        });
    }
    if !grad.is_finite() {
        return Err(Error::NonFiniteGradient { term: "total" });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad.0[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params.0[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

pub fn init_atlas(cfg: &FitConfig) -> Result<Atlas> {
    let mut rng = stream(cfg.seed, STREAM_INIT);
    Ok(Atlas::init(cfg.architecture()?, &mut rng))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub atlas: Atlas,
    pub history: Vec<IterRecord>,
    /// `(iteration, report)` at every evaluation point; the last entry is the
    /// final report.
    pub reports: Vec<(usize, MetricsReport)>,
}

impl FitOutcome {
    pub fn final_report(&self) -> &MetricsReport {
        &self.reports.last().expect("final report").1
    }
}

/// Samples and detached selections shared by consecutive iterations.
#[derive(Debug, Clone)]
struct Batch {
    uvs: Vec<Vec<UvPoint>>,
    margins: Option<Vec<Vec<UvPoint>>>,
    chamfer: Option<ChamferSelection>,
    consistency: Option<ConsistencySelection>,
    stitch: Option<StitchSelection>,
    built_at: usize,
}

/// Optimization state that can be paused after pretraining and branched
/// into several variants.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    gt: &'a GroundTruthCloud,
    gt_matrix: Array2<f64>,
    cfg: FitConfig,
    atlas: Atlas,
    optimizer: OptimizerState,
    uv_rng: ChaCha8Rng,
    margin_rng: ChaCha8Rng,
    history: Vec<IterRecord>,
    reports: Vec<(usize, MetricsReport)>,
    batch: Option<Batch>,
    iter: usize,
    reference: Option<f64>,
    streak: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(gt: &'a GroundTruthCloud, cfg: &FitConfig) -> Result<Self> {
        cfg.validate()?;
        let atlas = init_atlas(cfg)?;
        Self::with_atlas(gt, cfg, atlas)
    }

    /// Starts from a given atlas instead of the seeded initialization.
    pub fn with_atlas(gt: &'a GroundTruthCloud, cfg: &FitConfig, atlas: Atlas) -> Result<Self> {
        cfg.validate()?;
        if atlas.architecture() != cfg.architecture()? {
            return Err(Error::ArchitectureMismatch {
                expected: cfg.architecture()?.to_string(),
                found: atlas.architecture().to_string(),
            });
        }
        let n = atlas.params().len();
        Ok(Self {
            gt,
            gt_matrix: losses::points_matrix(gt.points()),
            cfg: *cfg,
            atlas,
            optimizer: OptimizerState::new(n),
            uv_rng: stream(cfg.seed, STREAM_UV),
            margin_rng: stream(cfg.seed, STREAM_MARGIN),
            history: Vec::new(),
            reports: Vec::new(),
            batch: None,
            iter: 0,
            reference: None,
            streak: 0,
        })
    }

    pub fn atlas(&self) -> &Atlas {
        &self.atlas
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn history(&self) -> &[IterRecord] {
        &self.history
    }

    /// Runs the baseline objective up to the pretraining budget.
    pub fn pretrain(&mut self) -> Result<()> {
        if self.iter == 0 && self.cfg.schedule.eval_every > 0 {
            self.record_report()?;
        }
        let weights = self.cfg.weights.baseline();
        let consistency = self.cfg.consistency;
        while self.iter < self.cfg.pretrain_iters() {
            self.step(&weights, &consistency)?;
        }
        self.batch = None;
        Ok(())
    }

    /// Continues a copy of this state to the full budget with `variant`'s
    /// weights and normal mode.
    pub fn finetune(&self, variant: Variant) -> Result<FitOutcome> {
        let mut run = self.clone();
        run.cfg.variant = variant;
        run.cfg.validate()?;
        if run.iter < run.cfg.pretrain_iters() {
            run.pretrain()?;
        }
        let weights = run.cfg.finetune_weights();
        let consistency = run.cfg.consistency_for(variant);
        while run.iter < run.cfg.schedule.total_iters {
            run.step(&weights, &consistency)?;
        }
        let last = run.reports.last().map(|r| r.0);
        if last != Some(run.iter) {
            run.record_report()?;
        }
        Ok(FitOutcome {
            atlas: run.atlas,
            history: run.history,
            reports: run.reports,
        })
    }

    fn record_report(&mut self) -> Result<()> {
        let report = evaluate(&self.atlas, self.gt, &self.cfg)?;
        self.reports.push((self.iter, report));
        Ok(())
    }

    fn sample(&mut self, weights: &LossWeights) -> Result<Batch> {
        let k = self.cfg.model.patches;
        let m = self.cfg.sampling.samples;
        let uvs = (0..k)
            .map(|_| sample_uv(m, SamplingStrategy::UniformRandom, &mut self.uv_rng))
            .collect();
        let margins = if weights.alpha_st > 0.0 {
            let spec = MarginSpec::new(self.cfg.sampling.margin)?;
            let count = self.cfg.margin_count();
            Some(
                (0..k)
                    .map(|_| sample_margin(spec, count, &mut self.margin_rng))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Batch {
            uvs,
            margins,
            chamfer: None,
            consistency: None,
            stitch: None,
            built_at: self.iter,
        })
    }

    /// Records every active term on `tape`.
    fn record_terms(
        &mut self,
        tape: &mut Tape,
        leaf: Var,
        weights: &LossWeights,
        consistency: &ConsistencyConfig,
    ) -> Result<TermVars> {
        let arch = self.atlas.architecture();
        let rebuild = match &self.batch {
            None => true,
            Some(b) => self.iter - b.built_at >= self.cfg.sampling.rebuild_every,
        };
        if rebuild {
            self.batch = Some(self.sample(weights)?);
        }
        let batch = self.batch.as_mut().expect("batch");
        let cloud = TapedCloud::record(tape, &arch, leaf, &batch.uvs, true)?;
        let margin = match &batch.margins {
            Some(m) => Some(TapedCloud::record(tape, &arch, leaf, m, false)?),
            None => None,
        };
        if rebuild {
            let snapshot = cloud.snapshot(tape);
            let index = PredictedIndex::from_cloud(&snapshot)?;
            let chamfer = ChamferSelection::build(&index, self.gt)?;
            if weights.alpha_sc > 0.0 {
                let normals: Vec<[f64; 3]> = chamfer
                    .pred_to_gt
                    .iter()
                    .map(|&j| self.gt.normals()[j])
                    .collect();
                batch.consistency = Some(ConsistencySelection::build(&snapshot, &index, &normals, consistency)?);
            }
            if let Some(m) = &margin {
                batch.stitch = Some(StitchSelection::build(
                    &m.position_values(tape),
                    &m.patch_ids,
                    &index,
                    arch.patches,
                )?);
            }
            batch.chamfer = Some(chamfer);
        }
        let gt = tape.constant(self.gt_matrix.clone());
        let chd = losses::chamfer_taped(tape, cloud.positions, gt, batch.chamfer.as_ref().expect("chamfer"))?;
        let forms = losses::forms_taped(tape, &cloud)?;
        let areas = losses::patch_areas_taped(tape, &cloud, &forms)?;
        let (l_e, l_g) = losses::distortion_taped(tape, &forms, areas, &cloud.patch_ids)?;
        let l_sk = losses::skew_taped(tape, &forms, areas, &cloud.patch_ids)?;
        let l_ol = losses::overlap_taped(tape, areas, self.gt.area());
        let l_sc = match (&batch.consistency, weights.alpha_sc > 0.0) {
            (Some(sel), true) => Some(losses::surface_consistency_taped(
                tape,
                &cloud,
                sel,
                consistency.grad_through_global,
            )?),
            _ => None,
        };
        let l_st = match (&batch.stitch, &margin, weights.alpha_st > 0.0) {
            (Some(sel), Some(m), true) => Some(losses::stitching_taped(tape, m.positions, cloud.positions, sel)?),
            _ => None,
        };
        Ok(TermVars {
            chd,
            l_e,
            l_g,
            l_sk,
            l_ol,
            l_sc,
            l_st,
        })
    }

    fn step(&mut self, weights: &LossWeights, consistency: &ConsistencyConfig) -> Result<()> {
        let started = Instant::now();
        let mut tape = Tape::new();
        let leaf = tape.param(
            Array2::from_shape_vec((self.atlas.params().len(), 1), self.atlas.params().0.clone())
                .expect("column"),
        );
        let terms = self.record_terms(&mut tape, leaf, weights, consistency)?;
        let total = losses::total_taped(&mut tape, &terms, weights)?;
        let grad = match tape.backward(total) {
            Ok(g) => GradientVector::from_column(self.atlas.params().len(), g.get(leaf)),
            Err(Error::NonFinite { .. }) => return Err(trace_non_finite(&tape, leaf, &terms)),
            Err(e) => return Err(e),
        };
        if !grad.is_finite() {
            return Err(trace_non_finite(&tape, leaf, &terms));
        }
        let loss = losses::breakdown(&tape, &terms, total);
        optimizer_step(&mut self.optimizer, self.atlas.params_mut(), &grad, &self.cfg.optimizer)?;
        self.iter += 1;
        self.history.push(IterRecord { iter: self.iter, loss });
        log::debug!(
            "iter {} {} wall {:.4}s",
            self.iter,
            loss.values()
                .iter()
                .map(|x| format!("{x:.6e}"))
                .collect::<Vec<_>>()
                .join(" "),
            started.elapsed().as_secs_f64()
        );
        self.guard(loss.total)?;
        if self.cfg.schedule.eval_every > 0 && self.iter % self.cfg.schedule.eval_every == 0 {
            self.record_report()?;
        }
        Ok(())
    }

    fn guard(&mut self, total: f64) -> Result<()> {
        let pretrain = self.cfg.pretrain_iters();
        if self.iter <= pretrain {
            if self.iter == pretrain {
                self.reference = Some(total);
            }
            return Ok(());
        }
        let reference = *self.reference.get_or_insert(total);
        if total > DIVERGENCE_FACTOR * reference {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        if self.streak >= DIVERGENCE_PATIENCE {
            return Err(Error::Diverged {
                iter: self.iter,
                loss: total,
                reference,
                streak: self.streak,
            });
        }
        Ok(())
    }
}

/// Names the first term (in summation order) whose value or gradient is
/// non-finite.
fn trace_non_finite(tape: &Tape, leaf: Var, terms: &TermVars) -> Error {
    for (name, var) in terms.named() {
        let bad = !tape.scalar(var).is_finite()
            || match tape.backward_unchecked(var) {
                Ok(g) => g.get(leaf).is_some_and(|g| g.iter().any(|x| !x.is_finite())),
                Err(_) => true,
            };
        if bad {
            return Error::NonFiniteGradient { term: name };
        }
    }
    Error::NonFiniteGradient { term: "total" }
}

/// Pretrains once and finishes with `cfg.variant`.
pub fn fit(gt: &GroundTruthCloud, cfg: &FitConfig) -> Result<FitOutcome> {
    let mut trainer = Trainer::new(gt, cfg)?;
    trainer.pretrain()?;
    trainer.finetune(cfg.variant)
}

/// Metrics of `atlas` on the deterministic evaluation grid.
pub fn evaluate(atlas: &Atlas, gt: &GroundTruthCloud, cfg: &FitConfig) -> Result<MetricsReport> {
    evaluate_atlas(atlas, gt, &cfg.eval, &cfg.consistency.neighbors)
}
