//! Numerical analysis tools: the attention-shift verifier, attention-map
//! export, run manifests, and the gradient-check suite.
//!
//! The verifier probes the first-order claim that perturbing a prompt by
//! `Δp` shifts attention weights by `Δa_i ≈ a_i (1 − a_i) Δs_i` with
//! `Δs_i = Δp·x_i/√d`. The claim drops a cross-term,
//! `a_i · Σ_{j≠i} a_j Δs_j`, that vanishes when the perturbation is
//! orthogonal to every other key. Two regimes make both halves testable:
//! regime (a) projects the perturbation into that orthogonal complement so
//! the dropped term is exactly zero, regime (b) keeps the raw direction
//! and measures the term instead.

use crate::data::DataError;
use crate::metric::{
    cls_prompt_loss, nca_loss, proxy_anchor_loss, select_guidance_inputs, total_loss,
    MetricConfig, MetricError,
};
use crate::tensor::{finite_diff_check, NodeId, Tape, Tensor, TensorError};
use crate::vit::{forward_model, ForwardTrace, ModelParams, Policy, PromptInit, ViTConfig, VitError};
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use std::fmt;
use thiserror::Error;

/// Relative-error bar every gradient check is held to.
pub const GRAD_TOL: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("scales must be positive and strictly decreasing")]
    Scales,
    #[error("keys length {len} is not a multiple of dim {dim}")]
    KeysShape { len: usize, dim: usize },
    #[error("need at least two tokens, got {0}")]
    TooFewTokens(usize),
    #[error("{what} must have length {expected}, got {got}")]
    VecLen { what: &'static str, expected: usize, got: usize },
    #[error("target token {target} out of range for {tokens} tokens")]
    Target { target: usize, tokens: usize },
    #[error("layer {layer} was not traced (traced layers: {traced:?})")]
    UntracedLayer { layer: usize, traced: Vec<usize> },
    #[error("sample {sample} out of range ({samples} samples in trace)")]
    Sample { sample: usize, samples: usize },
    #[error("head {head} out of range ({heads} heads)")]
    Head { head: usize, heads: usize },
    #[error("prompt row {row} out of range ({prompts} prompts)")]
    PromptRow { row: usize, prompts: usize },
    #[error("unknown grad-check module {0:?} (expected all, tensor, metric, vit, or objective)")]
    Scope(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Exact, first-order, and cross-term attention shifts for one prompt
/// perturbation.
///
/// Returns `(exact, approx, cross)`, each one value per token:
/// `exact_i = softmax(s + Δs)_i − softmax(s)_i` from full recomputation,
/// `approx_i = a_i (1 − a_i) Δs_i`, and
/// `cross_i = a_i Σ_{j≠i} a_j Δs_j`, where `s_i = p·x_i/√d` and
/// `Δs_i = Δp·x_i/√d`.
pub fn attention_deltas(
    keys: &[f64],
    dim: usize,
    prompt: &[f64],
    delta_p: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), AnalysisError> {
    if dim == 0 || keys.len() % dim != 0 {
        return Err(AnalysisError::KeysShape { len: keys.len(), dim: dim.max(1) });
    }
    let n = keys.len() / dim;
    if n < 2 {
        return Err(AnalysisError::TooFewTokens(n));
    }
    if prompt.len() != dim {
        return Err(AnalysisError::VecLen { what: "prompt", expected: dim, got: prompt.len() });
    }
    if delta_p.len() != dim {
        return Err(AnalysisError::VecLen {
            what: "perturbation",
            expected: dim,
            got: delta_p.len(),
        });
    }
    let sqrt_d = (dim as f64).sqrt();
    let moved: Vec<f64> = prompt.iter().zip(delta_p).map(|(p, d)| p + d).collect();
    let s: Vec<f64> = keys.chunks(dim).map(|x| dot(prompt, x) / sqrt_d).collect();
    let s2: Vec<f64> = keys.chunks(dim).map(|x| dot(&moved, x) / sqrt_d).collect();
    let ds: Vec<f64> = keys.chunks(dim).map(|x| dot(delta_p, x) / sqrt_d).collect();
    let a = softmax(&s);
    let a2 = softmax(&s2);

    let exact: Vec<f64> = a2.iter().zip(&a).map(|(n, o)| n - o).collect();
    let approx: Vec<f64> = (0..n).map(|i| a[i] * (1.0 - a[i]) * ds[i]).collect();
    let weighted: f64 = (0..n).map(|j| a[j] * ds[j]).sum();
    let cross: Vec<f64> = (0..n).map(|i| a[i] * (weighted - a[i] * ds[i])).collect();
    Ok((exact, approx, cross))
}

/// Measurements at one perturbation scale. Errors and the residual are
/// taken at the target token.
#[derive(Debug, Clone)]
pub struct ScaleEntry {
    pub epsilon: f64,
    pub exact: Vec<f64>,
    pub approx: Vec<f64>,
    pub cross: Vec<f64>,
    /// `|exact − approx|` at the target.
    pub abs_error: f64,
    /// `abs_error / |exact|` at the target.
    pub rel_error: f64,
    /// `|exact − (approx − cross)|` at the target: what remains after the
    /// dropped term is restored.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct RegimeReport {
    /// False when the other keys span the whole space and no orthogonal
    /// direction survives projection; all other fields are then empty.
    pub available: bool,
    /// The perturbation direction actually used.
    pub direction: Vec<f64>,
    pub entries: Vec<ScaleEntry>,
    /// Consecutive `abs_error` ratios, larger scale over smaller.
    pub error_ratios: Vec<f64>,
    /// Consecutive `residual` ratios.
    pub residual_ratios: Vec<f64>,
}

impl RegimeReport {
    fn unavailable() -> Self {
        RegimeReport {
            available: false,
            direction: Vec::new(),
            entries: Vec::new(),
            error_ratios: Vec::new(),
            residual_ratios: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Theorem1Report {
    pub dim: usize,
    pub tokens: usize,
    pub target: usize,
    /// Orthogonal regime: direction projected orthogonal to every
    /// non-target key, then unit-normalized. The cross-term is
    /// analytically zero here.
    pub regime_a: RegimeReport,
    /// General regime: the raw direction.
    pub regime_b: RegimeReport,
}

fn run_regime(
    keys: &[f64],
    dim: usize,
    prompt: &[f64],
    direction: &[f64],
    scales: &[f64],
    target: usize,
) -> Result<RegimeReport, AnalysisError> {
    let mut entries = Vec::with_capacity(scales.len());
    for &eps in scales {
        let dp: Vec<f64> = direction.iter().map(|u| eps * u).collect();
        let (exact, approx, cross) = attention_deltas(keys, dim, prompt, &dp)?;
        let abs_error = (exact[target] - approx[target]).abs();
        let rel_error = abs_error / exact[target].abs().max(1e-300);
        let residual = (exact[target] - (approx[target] - cross[target])).abs();
        entries.push(ScaleEntry { epsilon: eps, exact, approx, cross, abs_error, rel_error, residual });
    }
    let error_ratios = entries
        .windows(2)
        .map(|w| w[0].abs_error / w[1].abs_error.max(1e-300))
        .collect();
    let residual_ratios = entries
        .windows(2)
        .map(|w| w[0].residual / w[1].residual.max(1e-300))
        .collect();
    Ok(RegimeReport {
        available: true,
        direction: direction.to_vec(),
        entries,
        error_ratios,
        residual_ratios,
    })
}

/// Project `direction` orthogonal to every key row except `target`.
/// Returns None when nothing survives (the other keys span the space).
fn orthogonal_direction(
    keys: &[f64],
    dim: usize,
    direction: &[f64],
    target: usize,
) -> Option<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for (j, row) in keys.chunks(dim).enumerate() {
        if j == target {
            continue;
        }
        let mut v = row.to_vec();
        for q in &basis {
            let c = dot(&v, q);
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= c * qi;
            }
        }
        let norm = l2(&v);
        if norm > 1e-12 * l2(row).max(1e-300) {
            for vi in v.iter_mut() {
                *vi /= norm;
            }
            basis.push(v);
        }
    }
    let mut u = direction.to_vec();
    for q in &basis {
        let c = dot(&u, q);
        for (ui, qi) in u.iter_mut().zip(q) {
            *ui -= c * qi;
        }
    }
    let norm = l2(&u);
    if norm < 1e-10 * l2(direction).max(1e-300) {
        return None;
    }
    for ui in u.iter_mut() {
        *ui /= norm;
    }
    Some(u)
}

/// Run both regimes of the attention-shift check at every scale.
///
/// `scales` must be positive and strictly decreasing; errors and residuals
/// are reported for the `target` token.
pub fn verify_theorem1(
    keys: &[f64],
    dim: usize,
    prompt: &[f64],
    direction: &[f64],
    scales: &[f64],
    target: usize,
) -> Result<Theorem1Report, AnalysisError> {
    if scales.is_empty()
        || scales.iter().any(|&e| !(e > 0.0) || !e.is_finite())
        || scales.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(AnalysisError::Scales);
    }
    if dim == 0 || keys.len() % dim != 0 {
        return Err(AnalysisError::KeysShape { len: keys.len(), dim: dim.max(1) });
    }
    let tokens = keys.len() / dim;
    if tokens < 2 {
        return Err(AnalysisError::TooFewTokens(tokens));
    }
    if target >= tokens {
        return Err(AnalysisError::Target { target, tokens });
    }
    if direction.len() != dim {
        return Err(AnalysisError::VecLen {
            what: "direction",
            expected: dim,
            got: direction.len(),
        });
    }

    let regime_a = match orthogonal_direction(keys, dim, direction, target) {
        Some(u) => run_regime(keys, dim, prompt, &u, scales, target)?,
        None => RegimeReport::unavailable(),
    };
    let regime_b = run_regime(keys, dim, prompt, direction, scales, target)?;
    Ok(Theorem1Report { dim, tokens, target, regime_a, regime_b })
}

/// Standard-normal keys, prompt, and direction for one seeded verifier
/// draw.
pub fn random_theorem_instance(
    dim: usize,
    tokens: usize,
    seed: u64,
    draw: u64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = crate::streams::rng(seed, crate::streams::Stream::Theorem(draw));
    let mut take = |n: usize| -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    };
    let keys = take(dim * tokens);
    let prompt = take(dim);
    let direction = take(dim);
    (keys, prompt, direction)
}

/// Which attention row to export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnTarget {
    /// The class token's row.
    Cls,
    /// Row of prompt `k`.
    Prompt(usize),
}

/// Which head's map to export.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSel {
    Mean,
    Index(usize),
}

/// One exported attention map: raw grid plus both serializations.
#[derive(Debug, Clone)]
pub struct AttentionExport {
    pub side: usize,
    /// Row-major `side × side` attention mass over visual tokens.
    pub grid: Vec<f64>,
    pub csv: String,
    pub pgm: Vec<u8>,
}

/// Min-max normalize to 8-bit grayscale. A constant map renders mid-gray.
pub fn grayscale_bytes(grid: &[f64]) -> Vec<u8> {
    let min = grid.iter().copied().fold(f64::INFINITY, f64::min);
    let max = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![128; grid.len()];
    }
    grid.iter()
        .map(|&v| (((v - min) / (max - min)) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Pull one attention row out of a trace and render it over the patch
/// grid as CSV and a binary PGM, both stamped with the manifest hash.
pub fn export_attention(
    trace: &ForwardTrace,
    config: &ViTConfig,
    sample: usize,
    layer: usize,
    head: HeadSel,
    target: AttnTarget,
    manifest_hash: &str,
) -> Result<AttentionExport, AnalysisError> {
    let lt = trace.layer(layer).ok_or_else(|| AnalysisError::UntracedLayer {
        layer,
        traced: trace.guided.iter().map(|t| t.layer).collect(),
    })?;
    if sample >= lt.attention.len() {
        return Err(AnalysisError::Sample { sample, samples: lt.attention.len() });
    }
    let maps = &lt.attention[sample];
    let row_index = match target {
        AttnTarget::Cls => 0,
        AttnTarget::Prompt(k) => {
            if k >= config.prompts_per_layer {
                return Err(AnalysisError::PromptRow { row: k, prompts: config.prompts_per_layer });
            }
            1 + k
        }
    };
    let row = match head {
        HeadSel::Mean => maps.mean_row(row_index),
        HeadSel::Index(h) => {
            if h >= maps.heads {
                return Err(AnalysisError::Head { head: h, heads: maps.heads });
            }
            maps.row(h, row_index).to_vec()
        }
    };
    let n = config.num_patches();
    let side = config.grid_side();
    let grid: Vec<f64> = row[row.len() - n..].to_vec();

    let mut csv = format!("# manifest: {manifest_hash}\n");
    for r in grid.chunks(side) {
        let cells: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    let mut pgm = format!("P5\n# manifest: {manifest_hash}\n{side} {side}\n255\n").into_bytes();
    pgm.extend_from_slice(&grayscale_bytes(&grid));
    Ok(AttentionExport { side, grid, csv, pgm })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Flat `key: value` record of everything that determined a run. Contains
/// no timestamps: identical runs must produce identical manifests, and the
/// manifest hash is the run's identity stamped into every text artifact.
#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let mut m = RunManifest { entries: Vec::new() };
        m.push("command", command);
        m
    }

    pub fn push(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(": ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.render().as_bytes())
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<String> {
        std::fs::write(path, self.render())?;
        Ok(self.hash())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    All,
    Tensor,
    Metric,
    Vit,
    Objective,
}

impl GradScope {
    pub fn parse(s: &str) -> Result<Self, AnalysisError> {
        match s {
            "all" => Ok(GradScope::All),
            "tensor" => Ok(GradScope::Tensor),
            "metric" => Ok(GradScope::Metric),
            "vit" => Ok(GradScope::Vit),
            "objective" => Ok(GradScope::Objective),
            other => Err(AnalysisError::Scope(other.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckResult {
    pub name: &'static str,
    pub rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub pass: bool,
}

impl fmt::Display for GradCheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: rel error {:.3e} over {} elements (tol {:.0e}) {}",
            self.name,
            self.rel_error,
            self.checked,
            self.tolerance,
            if self.pass { "ok" } else { "FAIL" }
        )
    }
}

fn wave(n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64) * 0.37 + phase).sin() * 0.8).collect()
}

fn harness_result(
    name: &'static str,
    params: &mut [Tensor],
    eps: f64,
    build: impl FnMut(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError>,
) -> Result<GradCheckResult, AnalysisError> {
    let rep = finite_diff_check(params, eps, build)?;
    Ok(GradCheckResult {
        name,
        rel_error: rep.worst_rel_err,
        tolerance: GRAD_TOL,
        checked: rep.checked,
        pass: rep.worst_rel_err < GRAD_TOL,
    })
}

fn tensor_checks() -> Result<Vec<GradCheckResult>, AnalysisError> {
    let mut out = Vec::new();

    // Scaled-dot-product path: projections, softmax, column splits.
    let mut params = vec![
        Tensor::param(vec![3, 4], wave(12, 0.1))?,
        Tensor::param(vec![4, 4], wave(16, 1.3))?,
    ];
    out.push(harness_result("tensor/attention_path", &mut params, 1e-5, |t, ids| {
        let q = t.matmul(ids[0], ids[1])?;
        let scores = t.matmul_nt(q, ids[0])?;
        let scaled = t.scale(scores, 0.5)?;
        let attn = t.softmax_rows(scaled)?;
        let ctx = t.matmul(attn, ids[0])?;
        let left = t.slice_cols(ctx, 0, 2)?;
        let right = t.slice_cols(ctx, 2, 2)?;
        let joined = t.concat_cols(&[right, left])?;
        t.sum_all(joined)
    })?);

    // Residual block path: norms, activation, bias, row surgery.
    let mut params = vec![
        Tensor::param(vec![3, 4], wave(12, 2.2))?,
        Tensor::param(vec![4], vec![1.1, 0.9, 1.0, 1.05])?,
        Tensor::param(vec![4], wave(4, 0.4))?,
        Tensor::param(vec![4, 4], wave(16, 3.0))?,
        Tensor::param(vec![4], wave(4, 4.1))?,
    ];
    out.push(harness_result("tensor/norm_mlp_path", &mut params, 1e-5, |t, ids| {
        let normed = t.layer_norm(ids[0], ids[1], ids[2])?;
        let h = t.matmul(normed, ids[3])?;
        let hb = t.add_bias(h, ids[4])?;
        let act = t.gelu(hb)?;
        let res = t.add(act, normed)?;
        let aff = t.affine(res, 1.3, -0.2)?;
        let stacked = t.concat_rows(&[aff, normed])?;
        let picked = t.select_rows(stacked, &[0, 2, 4])?;
        t.sum_all(picked)
    })?);

    // Log-domain reductions and lookups.
    let mut params = vec![Tensor::param(vec![3, 4], wave(12, 5.5))?];
    out.push(harness_result("tensor/log_reduction_path", &mut params, 1e-5, |t, ids| {
        let (unit, _) = t.l2_normalize_rows(ids[0])?;
        let picked = t.gather(unit, &[(0, 1), (1, 2), (2, 0)])?;
        let soft_hinge = t.lse0_plus(picked)?;
        let diag = t.gather(unit, &[(0, 0), (1, 1), (2, 2), (0, 3)])?;
        let lse = t.logsumexp(diag)?;
        let ce = t.cross_entropy(ids[0], &[1, 0, 2])?;
        let shifted = t.affine(ce, 1.0, 1.5)?;
        let log_term = t.ln(shifted)?;
        let partial = t.add(soft_hinge, lse)?;
        t.add(partial, log_term)
    })?);

    Ok(out)
}

fn metric_checks() -> Result<Vec<GradCheckResult>, AnalysisError> {
    let mut out = Vec::new();
    let positive = [0usize, 1, 2, 0, 1, 0];

    // With 1/tau = 32 any pair far from the margin saturates: its gradient
    // dies while the loss value stays large, which drowns the central
    // difference of that element in cancellation noise. Build the inputs
    // from orthonormal anchors and examples with prescribed cosines so
    // every similarity stays in the active band around the margin.
    let dim = 8usize;
    let anchors: Vec<f64> = {
        let mut a = vec![0.0; 3 * dim];
        for k in 0..3 {
            a[k * dim + k] = 1.0;
        }
        a
    };
    let examples: Vec<f64> = {
        let mut x = vec![0.0; 6 * dim];
        for (i, &p) in positive.iter().enumerate() {
            let row = &mut x[i * dim..(i + 1) * dim];
            for k in 0..3 {
                row[k] = if k == p {
                    0.2
                } else if (i + k) % 2 == 0 {
                    -0.08
                } else {
                    0.04
                };
            }
            let used: f64 = row[..3].iter().map(|c| c * c).sum();
            row[3 + (i % 5)] = (1.0 - used).sqrt();
        }
        x
    };

    for (name, config) in [
        ("metric/proxy_anchor_classic", MetricConfig::proxy_anchor_classic()),
        ("metric/proxy_anchor_paper", MetricConfig::paper()),
    ] {
        let mut params = vec![
            Tensor::param(vec![3, dim], anchors.clone())?,
            Tensor::param(vec![6, dim], examples.clone())?,
        ];
        out.push(harness_result(name, &mut params, 1e-5, |t, ids| {
            proxy_anchor_loss(t, ids[0], ids[1], &positive, &config)
                .map_err(|e| match e {
                    MetricError::Tensor(te) => te,
                    other => TensorError::NonFinite { what: other.to_string() },
                })
        })?);
    }

    let labels = [0usize, 1, 2, 0, 1];
    let class_to_prompt = [0usize, 1, 2];
    let config = MetricConfig::paper();
    let mut params = vec![
        Tensor::param(vec![3, 4], wave(12, 2.6))?,
        Tensor::param(vec![5, 4], wave(20, 3.4))?,
    ];
    out.push(harness_result("metric/cls_prompt", &mut params, 1e-5, |t, ids| {
        let rows: Result<Vec<NodeId>, TensorError> =
            (0..5).map(|i| t.select_rows(ids[1], &[i])).collect();
        cls_prompt_loss(t, ids[0], &rows?, &labels, &class_to_prompt, &config).map_err(|e| match e {
            MetricError::Tensor(te) => te,
            other => TensorError::NonFinite { what: other.to_string() },
        })
    })?);

    let nca_labels = [0usize, 0, 1, 1, 2, 2];
    let mut params = vec![Tensor::param(vec![6, 4], wave(24, 4.8))?];
    out.push(harness_result("metric/nca", &mut params, 1e-5, |t, ids| {
        nca_loss(t, ids[0], &nca_labels, 0.5, false).map_err(|e| match e {
            MetricError::Tensor(te) => te,
            other => TensorError::NonFinite { what: other.to_string() },
        })
    })?);

    Ok(out)
}

fn check_config() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 8,
        channels: 1,
        embed_dim: 16,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 2.0,
        num_classes: 3,
        prompts_per_layer: 3,
        prompt_init: PromptInit::TruncNormal,
    }
}

fn check_images(config: &ViTConfig, count: usize) -> Vec<Vec<u8>> {
    let bytes = config.image_bytes();
    (0..count)
        .map(|i| (0..bytes).map(|j| ((i * 41 + j * 7) % 251) as u8).collect())
        .collect()
}

/// Norm-based finite-difference relative error over selected model
/// tensors, `|fd − ad| / max(|fd|, |ad|)` with L2 norms taken across all
/// checked elements, for a loss rebuilt from scratch at every probe.
/// Element-wise comparison would let roundoff on zero-gradient elements
/// (saturated pairs, softmax-cancelled biases) dominate the result; the
/// norm form stays sensitive to any error that is a fixed fraction of the
/// gradient.
fn model_fd_check(
    params: &mut ModelParams,
    select: &dyn Fn(&str) -> bool,
    eps: f64,
    build: &mut dyn FnMut(&mut Tape, &mut ModelParams) -> Result<NodeId, AnalysisError>,
) -> Result<(f64, usize), AnalysisError> {
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    tape.scalar_value(loss)?;
    tape.backward(loss)?;
    let mut grads: Vec<(String, Vec<f64>)> = Vec::new();
    let mut failed: Option<TensorError> = None;
    params.visit_mut(&mut |name, t| {
        if t.requires_grad && select(name) && failed.is_none() {
            match tape.write_back(t) {
                Ok(()) => grads.push((name.to_string(), t.grad.take().unwrap())),
                Err(e) => failed = Some(e),
            }
        }
    });
    if let Some(e) = failed {
        return Err(e.into());
    }
    drop(tape);

    let poke = |params: &mut ModelParams, name: &str, idx: usize, delta: f64| {
        params.visit_mut(&mut |n, t| {
            if n == name {
                t.data[idx] += delta;
            }
        });
    };
    let eval = |params: &mut ModelParams,
                    build: &mut dyn FnMut(&mut Tape, &mut ModelParams) -> Result<NodeId, AnalysisError>|
     -> Result<f64, AnalysisError> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params)?;
        Ok(tape.scalar_value(loss)?)
    };

    let mut diff_sq = 0.0f64;
    let mut fd_sq = 0.0f64;
    let mut ad_sq = 0.0f64;
    let mut checked = 0usize;
    for (name, g) in &grads {
        for (idx, &ad) in g.iter().enumerate() {
            poke(params, name, idx, eps);
            let up = eval(params, build)?;
            poke(params, name, idx, -2.0 * eps);
            let down = eval(params, build)?;
            poke(params, name, idx, eps);
            let fd = (up - down) / (2.0 * eps);
            diff_sq += (fd - ad) * (fd - ad);
            fd_sq += fd * fd;
            ad_sq += ad * ad;
            checked += 1;
        }
    }
    let rel = diff_sq.sqrt() / fd_sq.sqrt().max(ad_sq.sqrt()).max(1e-12);
    Ok((rel, checked))
}

/// The classification head initializes to zero so fine-tuning starts from
/// the frozen backbone's decision-free state. At that point every logit
/// gradient vanishes identically and a finite-difference probe would
/// compare noise against noise, so checks route the head through
/// deterministic nonzero values first.
fn dezero_head(params: &mut ModelParams) {
    params.visit_mut(&mut |name, t| {
        if name == "head_w" || name == "head_b" {
            let n = t.data.len();
            for (i, v) in t.data.iter_mut().enumerate() {
                *v = 0.3 * (1.7 * i as f64 + 0.4).sin() + 0.1 * (i as f64 / n as f64);
            }
        }
    });
}

fn vit_checks() -> Result<Vec<GradCheckResult>, AnalysisError> {
    let config = check_config();
    let mut params = ModelParams::init(&config, 11)?;
    dezero_head(&mut params);
    params.set_trainability(Policy::VptDeep);
    let images = check_images(&config, 2);
    let weights = wave(2 * config.num_classes, 6.3);

    let mut build = |tape: &mut Tape, p: &mut ModelParams| -> Result<NodeId, AnalysisError> {
        let refs: Vec<&[u8]> = images.iter().map(|v| v.as_slice()).collect();
        let trace = forward_model(tape, p, &refs, &[])?;
        let w = tape.leaf_const(vec![2, config.num_classes], weights.clone())?;
        let prod = tape.matmul_nt(trace.logits, w)?;
        Ok(tape.sum_all(prod)?)
    };
    let (rel_error, checked) =
        model_fd_check(&mut params, &|name| name.ends_with(".prompts"), 1e-5, &mut build)?;
    Ok(vec![GradCheckResult {
        name: "vit/logits_wrt_prompts",
        rel_error,
        tolerance: GRAD_TOL,
        checked,
        pass: rel_error < GRAD_TOL,
    }])
}

fn objective_checks() -> Result<Vec<GradCheckResult>, AnalysisError> {
    let config = check_config();
    let mut params = ModelParams::init(&config, 13)?;
    dezero_head(&mut params);
    params.set_trainability(Policy::DaVptPlus);
    let images = check_images(&config, 6);
    let labels = [0usize, 1, 2, 0, 1, 2];
    let class_to_prompt = [0usize, 1, 2];
    let metric = MetricConfig::paper();
    let guided = config.num_layers - 1;

    let mut build = |tape: &mut Tape, p: &mut ModelParams| -> Result<NodeId, AnalysisError> {
        let refs: Vec<&[u8]> = images.iter().map(|v| v.as_slice()).collect();
        let trace = forward_model(tape, p, &refs, &[guided])?;
        let ce = tape.cross_entropy(trace.logits, &labels)?;
        let lt = trace.layer(guided).expect("layer was requested");
        let inputs = select_guidance_inputs(tape, lt, &labels, &class_to_prompt, 3, &metric)?;
        let l_xp = proxy_anchor_loss(tape, inputs.anchors, inputs.examples, &inputs.positive, &metric)?;
        let raw = lt.prompts_raw.expect("prompted model");
        let anchors = tape.select_rows(raw, &[0, 1, 2])?;
        let l_pc = cls_prompt_loss(tape, anchors, &trace.cls_final, &labels, &class_to_prompt, &metric)?;
        Ok(total_loss(tape, ce, l_xp, l_pc, 0.5, 0.5)?)
    };
    let (rel_error, checked) = model_fd_check(&mut params, &|_| true, 1e-5, &mut build)?;
    Ok(vec![GradCheckResult {
        name: "objective/full_da_vpt_plus",
        rel_error,
        tolerance: GRAD_TOL,
        checked,
        pass: rel_error < GRAD_TOL,
    }])
}

/// Run the finite-difference checks for one module, or all of them.
pub fn grad_check_suite(scope: GradScope) -> Result<Vec<GradCheckResult>, AnalysisError> {
    let mut out = Vec::new();
    if matches!(scope, GradScope::All | GradScope::Tensor) {
        out.extend(tensor_checks()?);
    }
    if matches!(scope, GradScope::All | GradScope::Metric) {
        out.extend(metric_checks()?);
    }
    if matches!(scope, GradScope::All | GradScope::Vit) {
        out.extend(vit_checks()?);
    }
    if matches!(scope, GradScope::All | GradScope::Objective) {
        out.extend(objective_checks()?);
    }
    Ok(out)
}
