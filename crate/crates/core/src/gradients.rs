//! Gradients at equilibrium.
//!
//! Without feedback the surrogate is a feedforward graph and one reverse
//! sweep suffices. With feedback the input-layer rate `z*` solves
//! `z* = g(z*, θ)`; the adjoint `v` solves `v = v·∂g/∂z + ∂L/∂z` and the
//! parameter gradient is `∂L/∂θ + v·∂g/∂θ`.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::equilibrium::{EquilibriumRecord, PicardConfig, SurrogateGraph, SurrogateNet};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, TaskHead};
use crate::numerics::{ParamId, RealTensor, Tape, Var};

/// How the adjoint equation is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AdjointMethod {
    /// Damped fixed-point iteration; never forms the Jacobian.
    #[default]
    Iterative,
    /// Dense Jacobian and Gaussian elimination, for small models.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ImplicitSolveConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub damping: f64,
    pub method: AdjointMethod,
}

impl Default for ImplicitSolveConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            tol: 1e-12,
            damping: 0.5,
            method: AdjointMethod::Iterative,
        }
    }
}

impl ImplicitSolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.tol > 0.0) || !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config(
                "adjoint solve needs max_iters ≥ 1, tol > 0 and damping in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Loss value and gradients for every tape parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientResult {
    pub loss: f64,
    /// Keyed by `ParamId`; model parameters occupy ids `0..n`, extra
    /// parameters registered by the loss follow.
    pub grads: BTreeMap<ParamId, RealTensor>,
    /// Nodes retained on the tape.
    pub tape_nodes: usize,
    pub adjoint_iterations: usize,
}

impl GradientResult {
    /// Gradients of the model parameters, shaped like `params`.
    pub fn model_grads(&self, params: &ModelParams) -> ModelParams {
        let mut i = 0;
        params.map(|_, t| {
            let g = self
                .grads
                .get(&ParamId(i))
                .cloned()
                .unwrap_or_else(|| RealTensor::zeros(t.shape()));
            i += 1;
            g
        })
    }

    /// Gradient of an extra parameter registered by the loss.
    pub fn extra(&self, id: ParamId) -> Option<&RealTensor> {
        self.grads.get(&id)
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.values().map(RealTensor::max_abs).fold(0.0, f64::max)
    }
}

/// First `ParamId` free for parameters outside the model.
pub fn first_extra_param(params: &ModelParams) -> usize {
    params.len()
}

fn add_into(acc: &mut BTreeMap<ParamId, RealTensor>, other: BTreeMap<ParamId, RealTensor>) -> Result<()> {
    for (id, g) in other {
        match acc.get_mut(&id) {
            Some(existing) => *existing = existing.add(&g)?,
            None => {
                acc.insert(id, g);
            }
        }
    }
    Ok(())
}

/// Builds the surrogate (on the simulated equilibrium when `record` is
/// given), records `loss` on it and returns parameter gradients.
pub fn loss_gradients(
    net: &SurrogateNet,
    record: Option<&EquilibriumRecord>,
    tokens: &[usize],
    mut loss: impl FnMut(&mut Tape, &SurrogateGraph) -> Result<Var>,
    solve: &ImplicitSolveConfig,
) -> Result<GradientResult> {
    solve.validate()?;
    let mut tape = Tape::new();
    let graph = net.build(&mut tape, tokens, record)?;
    let l = loss(&mut tape, &graph)?;
    let loss_value = tape.value(l).item()?;
    let direct = tape.backward(l)?;
    let mut grads = direct.params();
    let (z, g) = match (graph.z, graph.g) {
        (Some(z), Some(g)) => (z, g),
        _ => {
            return Ok(GradientResult {
                loss: loss_value,
                grads,
                tape_nodes: tape.len(),
                adjoint_iterations: 0,
            })
        }
    };
    let dl_dz = direct.wrt(&tape, z);
    let (v, iterations) = match solve.method {
        AdjointMethod::Iterative => iterate_adjoint(&tape, z, g, &dl_dz, solve)?,
        AdjointMethod::Dense => (dense_adjoint(&tape, z, g, &dl_dz)?, 0),
    };
    add_into(&mut grads, tape.vjp(g, v)?.params())?;
    Ok(GradientResult {
        loss: loss_value,
        grads,
        tape_nodes: tape.len(),
        adjoint_iterations: iterations,
    })
}

fn iterate_adjoint(
    tape: &Tape,
    z: Var,
    g: Var,
    dl_dz: &RealTensor,
    solve: &ImplicitSolveConfig,
) -> Result<(RealTensor, usize)> {
    let mut v = dl_dz.clone();
    let mut residual = f64::INFINITY;
    for it in 1..=solve.max_iters {
        let target = tape.vjp(g, v.clone())?.wrt(tape, z).add(dl_dz)?;
        residual = target.max_abs_diff(&v)?;
        v = v.scale(1.0 - solve.damping)?.add(&target.scale(solve.damping)?)?;
        if residual < solve.tol {
            return Ok((v, it));
        }
    }
    Err(Error::NonConvergence {
        what: "adjoint iteration",
        residual,
        iterations: solve.max_iters,
    })
}

/// Solves `v·(I − J) = ∂L/∂z` with `J = ∂g/∂z` formed row by row.
fn dense_adjoint(tape: &Tape, z: Var, g: Var, dl_dz: &RealTensor) -> Result<RealTensor> {
    let n = dl_dz.len();
    let shape = tape.value(g).shape().to_vec();
    // a[i][j] = (I − J)ᵀ[i][j] = δ_ij − J[j][i]
    let mut a = vec![vec![0.0; n + 1]; n];
    for j in 0..n {
        let mut seed = vec![0.0; n];
        seed[j] = 1.0;
        let row = tape.vjp(g, RealTensor::new(shape.clone(), seed)?)?.wrt(tape, z);
        for (i, &jv) in row.data().iter().enumerate() {
            a[i][j] = if i == j { 1.0 } else { 0.0 } - jv;
        }
    }
    for (i, &b) in dl_dz.data().iter().enumerate() {
        a[i][n] = b;
    }
    let x = gaussian_solve(a)?;
    RealTensor::new(dl_dz.shape().to_vec(), x)
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn gaussian_solve(mut a: Vec<Vec<f64>>) -> Result<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        if a[pivot][col].abs() < 1e-14 {
            return Err(Error::NonConvergence {
                what: "dense adjoint solve (singular system)",
                residual: a[pivot][col].abs(),
                iterations: col,
            });
        }
        a.swap(col, pivot);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..=n {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (a[r][n] - s) / a[r][r];
    }
    Ok(x)
}

/// Loss of the full pipeline (fixed point re-solved) at given parameters.
pub fn loss_value(
    net: &SurrogateNet,
    tokens: &[usize],
    loss: &mut impl FnMut(&mut Tape, &SurrogateGraph) -> Result<Var>,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let graph = net.build(&mut tape, tokens, None)?;
    let l = loss(&mut tape, &graph)?;
    Ok((tape.value(l).item()?, tape.clip01_inputs()))
}

/// One scalar coordinate of a model parameter: `(tensor index, element)`
/// in canonical order.
pub type Coordinate = (usize, usize);

/// Central-difference estimate for one coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdEstimate {
    pub coordinate: Coordinate,
    pub value: f64,
    /// Perturbing this coordinate moves a `clip01` input that lies within
    /// [`CLIP_EXCLUSION`] of a clip boundary.
    pub near_clip_boundary: bool,
}

/// Distance to a clip boundary below which finite differences are unreliable.
pub const CLIP_EXCLUSION: f64 = 1e-4;

/// Central differences of the surrogate loss (re-solving any fixed point)
/// for each coordinate in `subset`.
pub fn finite_difference_oracle(
    net: &SurrogateNet,
    tokens: &[usize],
    mut loss: impl FnMut(&mut Tape, &SurrogateGraph) -> Result<Var>,
    subset: &[Coordinate],
    step: f64,
) -> Result<Vec<FdEstimate>> {
    if !(step > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let (_, base_clips) = loss_value(net, tokens, &mut loss)?;
    let mut out = Vec::with_capacity(subset.len());
    for &(ti, k) in subset {
        let mut eval = |delta: f64| -> Result<(f64, Vec<f64>)> {
            let mut p = net.params.clone();
            let mut tensors = p.tensors_mut();
            let t = tensors
                .get_mut(ti)
                .ok_or_else(|| Error::Input(alloc::format!("no parameter tensor {ti}")))?;
            if k >= t.len() {
                return Err(Error::Input(alloc::format!("coordinate {k} outside tensor {ti}")));
            }
            let v = t.data()[k] + delta;
            t.set_flat(k, v)?;
            let shifted = SurrogateNet { params: &p, ..*net };
            loss_value(&shifted, tokens, &mut loss)
        };
        let (plus, plus_clips) = eval(step)?;
        let (minus, minus_clips) = eval(-step)?;
        let near = |x: f64| x.abs() < CLIP_EXCLUSION || (x - 1.0).abs() < CLIP_EXCLUSION;
        let region = |x: f64| (x > 0.0) as u8 + (x >= 1.0) as u8;
        let near_clip_boundary = base_clips
            .iter()
            .zip(plus_clips.iter().zip(&minus_clips))
            .any(|(&b, (&p, &m))| {
                (p != b || m != b) && (near(b) || near(p) || near(m) || region(p) != region(b) || region(m) != region(b))
            });
        out.push(FdEstimate {
            coordinate: (ti, k),
            value: (plus - minus) / (2.0 * step),
            near_clip_boundary,
        });
    }
    Ok(out)
}

/// Analytic gradient at a coordinate.
pub fn coordinate_grad(grads: &ModelParams, (ti, k): Coordinate) -> f64 {
    let mut i = 0;
    let mut found = 0.0;
    grads.map(|_, t| {
        if i == ti {
            found = t.data()[k];
        }
        i += 1;
    });
    found
}

/// Relative error used throughout gradient checks.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Fixed random linear functional of every layer rate plus a log-softmax
/// term on the logits. Exercises every path of the surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeLoss {
    pub layer_weights: Vec<RealTensor>,
    pub logit_weights: RealTensor,
}

impl ProbeLoss {
    pub fn random(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut uniform = |shape: &[usize]| {
            let n = shape.iter().product();
            RealTensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let layer_weights = cfg
            .layer_widths()
            .iter()
            .map(|&w| uniform(&[cfg.seq_len, w]))
            .collect();
        Self {
            layer_weights,
            logit_weights: uniform(&[1, cfg.head.outputs()]),
        }
    }

    pub fn record(&self, tape: &mut Tape, graph: &SurrogateGraph) -> Result<Var> {
        let mut terms = Vec::with_capacity(self.layer_weights.len() + 1);
        for (&layer, w) in graph.layers.iter().zip(&self.layer_weights) {
            let w = tape.constant(w.clone());
            let prod = tape.mul(layer, w)?;
            terms.push(tape.sum(prod));
        }
        let ls = tape.log_softmax_rows(graph.logits);
        let w = tape.constant(self.logit_weights.clone());
        let prod = tape.mul(ls, w)?;
        terms.push(tape.sum(prod));
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        Ok(total)
    }
}

/// Parameters with mid-range rates in every layer, so that most
/// coordinates sit away from clip boundaries.
pub fn gradcheck_params(cfg: &ModelConfig, rng: &mut impl Rng) -> ModelParams {
    let template = ModelParams::zeros(cfg);
    let d = cfg.d_emb as f64;
    template.map(|name, t| {
        let n = t.len();
        let (lo, hi) = if name.ends_with("norm_gain") {
            (0.1, 0.3)
        } else if name.ends_with("norm_shift") {
            (-0.1, 0.1)
        } else if name == "feedback" {
            let s = 0.3 / d;
            (-s, s)
        } else if name.starts_with("embeddings") {
            (0.1, 0.9)
        } else if name.ends_with("bias") || name.ends_with("b_q") || name.ends_with("b_k") || name.ends_with("b_v") || name.ends_with("b_attn") {
            (0.2, 0.5)
        } else {
            let s = 1.0 / libm::sqrt(t.rows() as f64);
            (-s, s)
        };
        RealTensor::from_parts(t.shape().to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
    })
}

/// `n` coordinates drawn uniformly over all scalar parameters.
pub fn sample_coordinates(params: &ModelParams, n: usize, rng: &mut impl Rng) -> Vec<Coordinate> {
    let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.len()).collect();
    let total: usize = sizes.iter().sum();
    (0..n)
        .map(|_| {
            let mut flat = rng.random_range(0..total);
            let mut ti = 0;
            while flat >= sizes[ti] {
                flat -= sizes[ti];
                ti += 1;
            }
            (ti, flat)
        })
        .collect()
}

/// Outcome of comparing analytic gradients with finite differences.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct GradCheckReport {
    pub checked: usize,
    pub excluded: usize,
    pub max_relative_error: f64,
    pub worst: Option<Coordinate>,
    pub feedback: bool,
}

/// Analytic gradients of `probe` against central differences at `coords`.
/// Coordinates next to a clip boundary are excluded.
pub fn gradient_check(
    net: &SurrogateNet,
    tokens: &[usize],
    probe: &ProbeLoss,
    coords: &[Coordinate],
    step: f64,
    solve: &ImplicitSolveConfig,
) -> Result<GradCheckReport> {
    let analytic = loss_gradients(net, None, tokens, |t, g| probe.record(t, g), solve)?;
    let grads = analytic.model_grads(net.params);
    let fd = finite_difference_oracle(net, tokens, |t, g| probe.record(t, g), coords, step)?;
    let mut report = GradCheckReport {
        checked: 0,
        excluded: 0,
        max_relative_error: 0.0,
        worst: None,
        feedback: net.cfg.feedback_enabled,
    };
    for est in fd {
        if est.near_clip_boundary {
            report.excluded += 1;
            continue;
        }
        report.checked += 1;
        let err = relative_error(coordinate_grad(&grads, est.coordinate), est.value);
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst = Some(est.coordinate);
        }
    }
    Ok(report)
}

/// Random toy architecture: 1–2 encoders, 1–2 heads of width 4, 2–4
/// positions, 3 classes.
pub fn random_toy_config(rng: &mut impl Rng, feedback: bool) -> ModelConfig {
    let n_heads = rng.random_range(1..=2);
    ModelConfig {
        vocab_size: 7,
        n_encoders: rng.random_range(1..=2),
        seq_len: rng.random_range(2..=4),
        d_emb: 4 * n_heads,
        d_intermediate: rng.random_range(4..=8),
        n_heads,
        feedback_enabled: feedback,
        head: TaskHead::Classification { classes: 3 },
        ..ModelConfig::default()
    }
}

/// Picard settings tight enough for finite differences through the fixed point.
pub fn tight_picard() -> PicardConfig {
    PicardConfig {
        tol: 1e-14,
        max_iters: 20_000,
        ..PicardConfig::default()
    }
}

/// Gradient check of a random toy model drawn from `seed`.
pub fn toy_gradient_check(seed: u64, feedback: bool, n_coords: usize, step: f64) -> Result<(ModelConfig, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = random_toy_config(&mut rng, feedback);
    let params = gradcheck_params(&cfg, &mut rng);
    let tokens: Vec<usize> = (0..cfg.seq_len).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    let probe = ProbeLoss::random(&cfg, &mut rng);
    let coords = sample_coordinates(&params, n_coords, &mut rng);
    let mut net = SurrogateNet::new(&cfg, &params)?;
    net.picard = tight_picard();
    let report = gradient_check(&net, &tokens, &probe, &coords, step, &ImplicitSolveConfig::default())?;
    Ok((cfg, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_solve_small_system() {
        // 2x + y = 3, x + 3y = 5 → x = 0.8, y = 1.4
        let x = gaussian_solve(vec![vec![2.0, 1.0, 3.0], vec![1.0, 3.0, 5.0]]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-15 && (x[1] - 1.4).abs() < 1e-15);
        assert!(gaussian_solve(vec![vec![1.0, 2.0, 1.0], vec![2.0, 4.0, 2.0]]).is_err());
    }

    #[test]
    fn solve_config_validation() {
        assert!(ImplicitSolveConfig::default().validate().is_ok());
        for bad in [
            ImplicitSolveConfig { max_iters: 0, ..Default::default() },
            ImplicitSolveConfig { tol: 0.0, ..Default::default() },
            ImplicitSolveConfig { damping: 1.5, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-15);
    }
}
