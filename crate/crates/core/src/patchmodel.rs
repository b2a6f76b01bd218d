//! The atlas of learned patch mappings.
//!
//! Each patch is a 4-layer MLP `[0,1]² (+ latent) → R³` with Softplus on the
//! three hidden layers and a linear head. All decoders of an atlas live in a
//! single [`ParameterBlock`] laid out as
//!
//! ```text
//! patch 0: W1 (H x (2+D), row-major), b1 (H), W2 (H x H), b2, W3 (H x H), b3, W4 (3 x H), b4 (3)
//! patch 1: ...
//! ...
//! latent code c (D)
//! ```

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::tape::{sigmoid, softplus};
use crate::diffcore::{directional_jacobian, Dual, ParameterBlock, Tape, UvAxis, Var};
use crate::error::{Error, Result};

pub const LAYER_COUNT: usize = 4;
pub const OUTPUT_DIM: usize = 3;

/// Cross-product norms at or below this value mark a degenerate Jacobian.
pub const DEGENERATE_NORMAL: f64 = 1e-12;

/// Shape of an atlas: patch count, hidden width and latent dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub patches: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "K={} H={} D={} softplus", self.patches, self.hidden, self.latent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerLayout {
    inputs: usize,
    outputs: usize,
    weights: usize,
    bias: usize,
}

impl Architecture {
    pub fn new(patches: usize, hidden: usize, latent: usize) -> Result<Self> {
        if patches == 0 {
            return Err(Error::Config("atlas needs at least one patch".into()));
        }
        if hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        Ok(Self {
            patches,
            hidden,
            latent,
        })
    }

    pub fn input_dim(&self) -> usize {
        2 + self.latent
    }

    fn layer_shapes(&self) -> [(usize, usize); LAYER_COUNT] {
        let h = self.hidden;
        [(self.input_dim(), h), (h, h), (h, h), (h, OUTPUT_DIM)]
    }

    /// Number of parameters in one decoder.
    pub fn decoder_len(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn param_count(&self) -> usize {
        self.patches * self.decoder_len() + self.latent
    }

    pub fn latent_offset(&self) -> usize {
        self.patches * self.decoder_len()
    }

    fn layers(&self, patch: usize) -> [LayerLayout; LAYER_COUNT] {
        let mut offset = patch * self.decoder_len();
        let shapes = self.layer_shapes();
        std::array::from_fn(|l| {
            let (inputs, outputs) = shapes[l];
            let layout = LayerLayout {
                inputs,
                outputs,
                weights: offset,
                bias: offset + inputs * outputs,
            };
            offset += inputs * outputs + outputs;
            layout
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UvPoint {
    pub u: f64,
    pub v: f64,
}

impl UvPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn in_unit_square(&self) -> bool {
        (0.0..=1.0).contains(&self.u) && (0.0..=1.0).contains(&self.v)
    }
}

/// Columns `∂p/∂u` and `∂p/∂v` of the 3x2 Jacobian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jacobian {
    pub du: [f64; 3],
    pub dv: [f64; 3],
}

/// Metric tensor `[[E, F], [F, G]]` of a mapping at one UV point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstFundamentalForm {
    pub e: f64,
    pub f: f64,
    pub g: f64,
}

impl FirstFundamentalForm {
    /// Local area element `sqrt(max(0, EG − F²))`.
    pub fn area_element(&self) -> f64 {
        (self.e * self.g - self.f * self.f).max(0.0).sqrt()
    }
}

pub fn fundamental_form(jac: &Jacobian) -> FirstFundamentalForm {
    FirstFundamentalForm {
        e: dot(jac.du, jac.du),
        f: dot(jac.du, jac.dv),
        g: dot(jac.dv, jac.dv),
    }
}

/// `(J_u × J_v) / |J_u × J_v|`.
pub fn analytic_normal(jac: &Jacobian) -> Result<[f64; 3]> {
    let c = crate::diffcore::tape::cross3(jac.du, jac.dv);
    let norm = dot(c, c).sqrt();
    if !(norm > DEGENERATE_NORMAL) {
        return Err(Error::DegenerateJacobian { norm });
    }
    Ok([c[0] / norm, c[1] / norm, c[2] / norm])
}

/// Width of the UV margin frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginSpec {
    pub r: f64,
}

impl MarginSpec {
    pub fn new(r: f64) -> Result<Self> {
        if !(0.0..=0.5).contains(&r) {
            return Err(Error::Config(format!("margin r must lie in [0, 0.5], got {r}")));
        }
        Ok(Self { r })
    }

    /// `u < r ∨ u > 1 − r ∨ v < r ∨ v > 1 − r`.
    pub fn contains(&self, uv: UvPoint) -> bool {
        let r = self.r;
        uv.u < r || uv.u > 1.0 - r || uv.v < r || uv.v > 1.0 - r
    }

    /// Area of the margin frame inside the unit square.
    pub fn area(&self) -> f64 {
        4.0 * self.r - 4.0 * self.r * self.r
    }
}

impl Default for MarginSpec {
    fn default() -> Self {
        Self { r: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingStrategy {
    UniformRandom,
    RegularGrid,
}

/// UV samples in the unit square.
///
/// `RegularGrid` returns the full `⌈√count⌉²` lattice with `u` varying
/// fastest, including both boundaries; a single-point lattice is the centre.
pub fn sample_uv<R: Rng + ?Sized>(count: usize, strategy: SamplingStrategy, rng: &mut R) -> Vec<UvPoint> {
    match strategy {
        SamplingStrategy::UniformRandom => (0..count)
            .map(|_| UvPoint::new(rng.random::<f64>(), rng.random::<f64>()))
            .collect(),
        SamplingStrategy::RegularGrid => regular_grid((count as f64).sqrt().ceil() as usize),
    }
}

/// `side x side` lattice over `[0,1]²`, `u` varying fastest.
pub fn regular_grid(side: usize) -> Vec<UvPoint> {
    if side <= 1 {
        return vec![UvPoint::new(0.5, 0.5); side];
    }
    let step = 1.0 / (side - 1) as f64;
    let mut out = Vec::with_capacity(side * side);
    for j in 0..side {
        for i in 0..side {
            out.push(UvPoint::new(i as f64 * step, j as f64 * step));
        }
    }
    out
}

/// Uniform samples over the margin frame. The frame is split into four
/// disjoint rectangles (two full-width strips and two side strips) picked
/// in proportion to their areas.
pub fn sample_margin<R: Rng + ?Sized>(spec: MarginSpec, count: usize, rng: &mut R) -> Result<Vec<UvPoint>> {
    let r = spec.r;
    if !(r > 0.0) {
        return Err(Error::Config("margin r = 0 has an empty margin".into()));
    }
    let strip = r;
    let side = r * (1.0 - 2.0 * r);
    let total = 2.0 * strip + 2.0 * side;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let pick = rng.random::<f64>() * total;
        let a = rng.random::<f64>();
        let b = rng.random::<f64>();
        let uv = if pick < strip {
            UvPoint::new(a, r * b)
        } else if pick < 2.0 * strip {
            UvPoint::new(a, 1.0 - r * b)
        } else if pick < 2.0 * strip + side {
            UvPoint::new(r * b, r + (1.0 - 2.0 * r) * a)
        } else {
            UvPoint::new(1.0 - r * b, r + (1.0 - 2.0 * r) * a)
        };
        out.push(uv);
    }
    Ok(out)
}

pub fn uv_matrix(uvs: &[UvPoint]) -> Array2<f64> {
    let mut m = Array2::zeros((uvs.len(), 2));
    for (i, p) in uvs.iter().enumerate() {
        m[[i, 0]] = p.u;
        m[[i, 1]] = p.v;
    }
    m
}

/// Batched decoder output: positions and both Jacobian columns, `n x 3` each.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub positions: Array2<f64>,
    pub du: Array2<f64>,
    pub dv: Array2<f64>,
}

/// Borrowed view of one decoder inside an atlas.
#[derive(Debug, Clone, Copy)]
pub struct PatchDecoder<'a> {
    params: &'a [f64],
    layers: [LayerLayout; LAYER_COUNT],
    latent: &'a [f64],
}

impl<'a> PatchDecoder<'a> {
    fn weights(&self, l: usize) -> ArrayView2<'a, f64> {
        let layer = self.layers[l];
        ArrayView2::from_shape(
            (layer.outputs, layer.inputs),
            &self.params[layer.weights..layer.weights + layer.inputs * layer.outputs],
        )
        .expect("weight layout")
    }

    fn bias(&self, l: usize) -> &'a [f64] {
        let layer = self.layers[l];
        &self.params[layer.bias..layer.bias + layer.outputs]
    }

    fn input(&self, uv: [Dual; 2]) -> Vec<Dual> {
        let mut x = vec![uv[0], uv[1]];
        x.extend(self.latent.iter().map(|&c| Dual::constant(c)));
        x
    }

    /// Forward-mode evaluation carrying one tangent.
    pub fn eval_dual(&self, uv: [Dual; 2]) -> [Dual; 3] {
        let mut h = self.input(uv);
        for l in 0..LAYER_COUNT {
            let w = self.weights(l);
            let b = self.bias(l);
            let mut z: Vec<Dual> = (0..w.nrows())
                .map(|o| {
                    let mut acc = Dual::constant(b[o]);
                    for (i, x) in h.iter().enumerate() {
                        acc = acc + *x * w[[o, i]];
                    }
                    acc
                })
                .collect();
            if l + 1 < LAYER_COUNT {
                z.iter_mut().for_each(|x| *x = x.softplus());
            }
            h = z;
        }
        [h[0], h[1], h[2]]
    }

    pub fn decode(&self, uv: UvPoint) -> [f64; 3] {
        let out = self.eval_dual([Dual::constant(uv.u), Dual::constant(uv.v)]);
        [out[0].value, out[1].value, out[2].value]
    }

    pub fn jacobian(&self, uv: UvPoint) -> Jacobian {
        let map = |x: [Dual; 2]| self.eval_dual(x);
        Jacobian {
            du: directional_jacobian(map, [uv.u, uv.v], UvAxis::U),
            dv: directional_jacobian(map, [uv.u, uv.v], UvAxis::V),
        }
    }

    /// Positions and Jacobian columns for a batch of UV points.
    pub fn eval_batch(&self, uvs: &[UvPoint]) -> BatchEval {
        let n = uvs.len();
        let d = 2 + self.latent.len();
        let mut x = Array2::zeros((n, d));
        let mut tu = Array2::zeros((n, d));
        let mut tv = Array2::zeros((n, d));
        for (i, p) in uvs.iter().enumerate() {
            x[[i, 0]] = p.u;
            x[[i, 1]] = p.v;
            for (j, &c) in self.latent.iter().enumerate() {
                x[[i, 2 + j]] = c;
            }
            tu[[i, 0]] = 1.0;
            tv[[i, 1]] = 1.0;
        }
        for l in 0..LAYER_COUNT {
            let w = self.weights(l);
            let b = ndarray::ArrayView1::from(self.bias(l));
            let z = x.dot(&w.t()) + &b;
            let zu = tu.dot(&w.t());
            let zv = tv.dot(&w.t());
            if l + 1 < LAYER_COUNT {
                let s = z.mapv(sigmoid);
                x = z.mapv(softplus);
                tu = &s * &zu;
                tv = &s * &zv;
            } else {
                x = z;
                tu = zu;
                tv = zv;
            }
        }
        BatchEval {
            positions: x,
            du: tu,
            dv: tv,
        }
    }
}

/// K patch decoders sharing one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    arch: Architecture,
    params: ParameterBlock,
}

impl Atlas {
    pub fn new(arch: Architecture, params: ParameterBlock) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::Shape {
                op: "atlas",
                detail: format!(
                    "{} parameters for an architecture needing {}",
                    params.len(),
                    arch.param_count()
                ),
            });
        }
        if params.0.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("atlas parameters must be finite".into()));
        }
        Ok(Self { arch, params })
    }

    /// Weights and biases uniform in `±sqrt(6 / (fan_in + fan_out))` per
    /// layer; latent code zero.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let mut params = vec![0.0; arch.param_count()];
        for k in 0..arch.patches {
            for layer in arch.layers(k) {
                let bound = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
                let end = layer.bias + layer.outputs;
                for x in &mut params[layer.weights..end] {
                    *x = rng.random_range(-bound..bound);
                }
            }
        }
        Self {
            arch,
            params: ParameterBlock(params),
        }
    }

    /// Atlas whose patches realise the affine charts
    /// `(u, v) ↦ origin + u·du + v·dv` exactly, using
    /// `softplus(x) − softplus(−x) = x` to carry `u` and `v` through the
    /// hidden layers. Requires `hidden ≥ 4`.
    pub fn from_affine_charts(arch: Architecture, charts: &[AffineChart]) -> Result<Self> {
        if charts.len() != arch.patches {
            return Err(Error::Config(format!(
                "{} charts for {} patches",
                charts.len(),
                arch.patches
            )));
        }
        if arch.hidden < 4 {
            return Err(Error::Config("affine charts need hidden width >= 4".into()));
        }
        let mut params = vec![0.0; arch.param_count()];
        for (k, chart) in charts.iter().enumerate() {
            let layers = arch.layers(k);
            let set = |p: &mut [f64], l: LayerLayout, o: usize, i: usize, x: f64| {
                p[l.weights + o * l.inputs + i] = x;
            };
            let first = layers[0];
            set(&mut params, first, 0, 0, 1.0);
            set(&mut params, first, 1, 0, -1.0);
            set(&mut params, first, 2, 1, 1.0);
            set(&mut params, first, 3, 1, -1.0);
            for &layer in &layers[1..3] {
                for (row, sign) in [(0, 1.0), (1, -1.0)] {
                    set(&mut params, layer, row, 0, sign);
                    set(&mut params, layer, row, 1, -sign);
                }
                for (row, sign) in [(2, 1.0), (3, -1.0)] {
                    set(&mut params, layer, row, 2, sign);
                    set(&mut params, layer, row, 3, -sign);
                }
            }
            let last = layers[3];
            for c in 0..3 {
                set(&mut params, last, c, 0, chart.du[c]);
                set(&mut params, last, c, 1, -chart.du[c]);
                set(&mut params, last, c, 2, chart.dv[c]);
                set(&mut params, last, c, 3, -chart.dv[c]);
                params[last.bias + c] = chart.origin[c];
            }
        }
        Atlas::new(arch, ParameterBlock(params))
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &ParameterBlock {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterBlock {
        &mut self.params
    }

    pub fn patch_count(&self) -> usize {
        self.arch.patches
    }

    pub fn latent(&self) -> &[f64] {
        &self.params.0[self.arch.latent_offset()..]
    }

    pub fn decoder(&self, patch: usize) -> Result<PatchDecoder<'_>> {
        if patch >= self.arch.patches {
            return Err(Error::PatchOutOfRange {
                patch,
                patches: self.arch.patches,
            });
        }
        Ok(PatchDecoder {
            params: &self.params.0,
            layers: self.arch.layers(patch),
            latent: self.latent(),
        })
    }

    pub fn decode(&self, patch: usize, uv: UvPoint) -> Result<[f64; 3]> {
        Ok(self.decoder(patch)?.decode(uv))
    }

    pub fn jacobian(&self, patch: usize, uv: UvPoint) -> Result<Jacobian> {
        Ok(self.decoder(patch)?.jacobian(uv))
    }

    /// Monte-Carlo surface area of one patch: the mean area element over
    /// `uvs` (the UV domain has measure one).
    pub fn patch_area(&self, patch: usize, uvs: &[UvPoint]) -> Result<f64> {
        if uvs.is_empty() {
            return Err(Error::Empty("patch_area samples"));
        }
        let eval = self.decoder(patch)?.eval_batch(uvs);
        let mut acc = 0.0;
        for i in 0..uvs.len() {
            let jac = Jacobian {
                du: row3(&eval.du, i),
                dv: row3(&eval.dv, i),
            };
            acc += fundamental_form(&jac).area_element();
        }
        Ok(acc / uvs.len() as f64)
    }

    /// Decodes `uvs[k]` on patch `k` for every patch, with full per-point
    /// differential data.
    pub fn predicted_cloud(&self, uvs: &[Vec<UvPoint>]) -> Result<PredictedCloud> {
        if uvs.len() != self.arch.patches {
            return Err(Error::Config(format!(
                "{} UV sets for {} patches",
                uvs.len(),
                self.arch.patches
            )));
        }
        let mut points = Vec::new();
        for (k, set) in uvs.iter().enumerate() {
            let eval = self.decoder(k)?.eval_batch(set);
            for (i, uv) in set.iter().enumerate() {
                let jacobian = Jacobian {
                    du: row3(&eval.du, i),
                    dv: row3(&eval.dv, i),
                };
                points.push(PredictedPoint {
                    position: row3(&eval.positions, i),
                    patch_id: k,
                    uv: *uv,
                    jacobian,
                    analytic_normal: analytic_normal(&jacobian).ok(),
                    fff: fundamental_form(&jacobian),
                });
            }
        }
        Ok(PredictedCloud {
            points,
            patch_count: self.arch.patches,
        })
    }
}

/// Affine chart `(u, v) ↦ origin + u·du + v·dv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineChart {
    pub origin: [f64; 3],
    pub du: [f64; 3],
    pub dv: [f64; 3],
}

impl AffineChart {
    pub fn identity() -> Self {
        Self {
            origin: [0.0; 3],
            du: [1.0, 0.0, 0.0],
            dv: [0.0, 1.0, 0.0],
        }
    }
}

/// One decoded sample with its differential data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictedPoint {
    pub position: [f64; 3],
    pub patch_id: usize,
    pub uv: UvPoint,
    pub jacobian: Jacobian,
    /// `None` where the Jacobian is degenerate.
    pub analytic_normal: Option<[f64; 3]>,
    pub fff: FirstFundamentalForm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedCloud {
    pub points: Vec<PredictedPoint>,
    pub patch_count: usize,
}

impl PredictedCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| p.position).collect()
    }

    pub fn patch_ids(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.patch_id).collect()
    }

    /// Position-only cloud from raw points; Jacobians are left zero.
    pub fn from_positions(positions: &[[f64; 3]], patch_ids: &[usize], patch_count: usize) -> Self {
        let zero = Jacobian {
            du: [0.0; 3],
            dv: [0.0; 3],
        };
        let points = positions
            .iter()
            .zip(patch_ids)
            .map(|(p, &k)| PredictedPoint {
                position: *p,
                patch_id: k,
                uv: UvPoint::new(0.0, 0.0),
                jacobian: zero,
                analytic_normal: None,
                fff: fundamental_form(&zero),
            })
            .collect();
        Self {
            points,
            patch_count,
        }
    }
}

/// Tape handles for one decoded batch.
#[derive(Debug, Clone, Copy)]
pub struct TapedPatch {
    pub positions: Var,
    pub du: Option<Var>,
    pub dv: Option<Var>,
}

/// Records the forward pass of patch `patch` on `tape`, reading weights from
/// the flat parameter leaf `params`. With `tangents`, both Jacobian columns
/// are propagated alongside the values so they are differentiable too.
pub fn forward_taped(
    tape: &mut Tape,
    arch: &Architecture,
    params: Var,
    patch: usize,
    uvs: &Array2<f64>,
    tangents: bool,
) -> Result<TapedPatch> {
    if patch >= arch.patches {
        return Err(Error::PatchOutOfRange {
            patch,
            patches: arch.patches,
        });
    }
    let n = uvs.nrows();
    let uv = tape.constant(uvs.clone());
    let mut x = if arch.latent > 0 {
        let c = tape.slice(params, arch.latent_offset(), 1, arch.latent)?;
        let rep = tape.gather(c, vec![0; n])?;
        tape.concat_cols(&[uv, rep])?
    } else {
        uv
    };
    let mut tan = if tangents {
        let d = arch.input_dim();
        let mut tu = Array2::zeros((n, d));
        let mut tv = Array2::zeros((n, d));
        tu.column_mut(0).fill(1.0);
        tv.column_mut(1).fill(1.0);
        Some((tape.constant(tu), tape.constant(tv)))
    } else {
        None
    };
    for (l, layer) in arch.layers(patch).into_iter().enumerate() {
        let w = tape.slice(params, layer.weights, layer.outputs, layer.inputs)?;
        let b = tape.slice(params, layer.bias, 1, layer.outputs)?;
        let xw = tape.matmul_t(x, w)?;
        let z = tape.add_row(xw, b)?;
        let hidden = l + 1 < LAYER_COUNT;
        if let Some((tu, tv)) = tan {
            let zu = tape.matmul_t(tu, w)?;
            let zv = tape.matmul_t(tv, w)?;
            tan = Some(if hidden {
                let s = tape.sigmoid(z);
                (tape.mul(s, zu)?, tape.mul(s, zv)?)
            } else {
                (zu, zv)
            });
        }
        x = if hidden { tape.softplus(z) } else { z };
    }
    Ok(TapedPatch {
        positions: x,
        du: tan.map(|t| t.0),
        dv: tan.map(|t| t.1),
    })
}

pub(crate) fn row3(m: &Array2<f64>, i: usize) -> [f64; 3] {
    [m[[i, 0]], m[[i, 1]], m[[i, 2]]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
