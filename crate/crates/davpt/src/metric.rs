//! Metric losses that pull token representations toward their class
//! prompts: a proxy-anchor loss with prompts standing in for proxies, an
//! NCA loss over labeled examples, and the margin-satisfaction diagnostic.
//!
//! All similarities are cosine: inputs are L2-normalized internally, so
//! every loss is scale-invariant in its inputs.

use crate::tensor::{NodeId, Tape, TensorError};
use crate::vit::LayerTrace;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("invalid metric parameter: {0}")]
    BadParam(String),
    #[error("example {index} names positive anchor {positive}, but there are {anchors} anchors")]
    PositiveIndex { index: usize, positive: usize, anchors: usize },
    #[error("{labels} labels for {examples} examples")]
    LabelCount { labels: usize, examples: usize },
    #[error("label {label} at index {index} out of range for {classes} classes")]
    LabelRange { index: usize, label: usize, classes: usize },
    #[error("example {index} has no same-class neighbor")]
    NoSameClassNeighbor { index: usize },
    #[error("layer trace carries no prompts")]
    MissingPrompts,
    #[error("saliency top-k of {k} with only {tokens} visual tokens")]
    TopK { k: usize, tokens: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which prompt rows anchor the token-level loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareSpace {
    /// The prompt bank rows themselves.
    RawPrompts,
    /// The prompts after the layer's query projection, `P W_Q + b_Q`.
    QueryProjected,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    /// Margin on cosine similarity.
    pub delta: f64,
    /// Temperature; loss arguments are `(s - delta) / tau` shaped.
    pub tau: f64,
    pub compare_space: CompareSpace,
    /// Keep only the k visual tokens with the highest CLS attention mass
    /// per sample; `None` keeps all of them.
    pub saliency_top_k: Option<usize>,
}

impl MetricConfig {
    /// Wide margin and soft temperature.
    pub fn paper() -> Self {
        MetricConfig {
            delta: 32.0,
            tau: 10.0,
            compare_space: CompareSpace::QueryProjected,
            saliency_top_k: None,
        }
    }

    /// The classic proxy-anchor setting: margin 0.1, scale 32.
    pub fn proxy_anchor_classic() -> Self {
        MetricConfig {
            delta: 0.1,
            tau: 1.0 / 32.0,
            compare_space: CompareSpace::QueryProjected,
            saliency_top_k: None,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "proxy_anchor_classic" => Some(Self::proxy_anchor_classic()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        if !(self.tau > 0.0) {
            return Err(MetricError::BadParam(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.delta >= 0.0) {
            return Err(MetricError::BadParam(format!("delta must be >= 0, got {}", self.delta)));
        }
        Ok(())
    }
}

fn check_positive(positive: &[usize], n: usize, m: usize) -> Result<(), MetricError> {
    if positive.len() != n {
        return Err(MetricError::LabelCount { labels: positive.len(), examples: n });
    }
    for (i, &p) in positive.iter().enumerate() {
        if p >= m {
            return Err(MetricError::PositiveIndex { index: i, positive: p, anchors: m });
        }
    }
    Ok(())
}

fn sum_terms(tape: &mut Tape, terms: &[NodeId]) -> Result<NodeId, TensorError> {
    let mut acc = tape.scalar(0.0);
    for &t in terms {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Proxy-anchor loss with cosine similarity `s`:
///
/// ```text
/// (1/|P+|) sum_{p in P+} log(1 + sum_{x in pos(p)} exp(-(s - delta)/tau))
///   + (1/|P|) sum_{p in P}  log(1 + sum_{x in neg(p)} exp( (s + delta)/tau))
/// ```
///
/// `P+` are anchors with at least one positive in the batch; `positive[i]`
/// names example i's anchor. Anchors and examples are normalized
/// internally. No examples, or no anchors, gives zero.
pub fn proxy_anchor_loss(
    tape: &mut Tape,
    anchors: NodeId,
    examples: NodeId,
    positive: &[usize],
    config: &MetricConfig,
) -> Result<NodeId, MetricError> {
    config.validate()?;
    let m = tape.shape(anchors)[0];
    let n = tape.shape(examples)[0];
    check_positive(positive, n, m)?;
    if m == 0 || n == 0 {
        return Ok(tape.scalar(0.0));
    }
    let (a_hat, _) = tape.l2_normalize_rows(anchors)?;
    let (x_hat, _) = tape.l2_normalize_rows(examples)?;
    let sims = tape.matmul_nt(x_hat, a_hat)?;

    let mut pos_terms = Vec::new();
    let mut neg_terms = Vec::new();
    for p in 0..m {
        let pos_at: Vec<(usize, usize)> =
            (0..n).filter(|&i| positive[i] == p).map(|i| (i, p)).collect();
        let neg_at: Vec<(usize, usize)> =
            (0..n).filter(|&i| positive[i] != p).map(|i| (i, p)).collect();
        if !pos_at.is_empty() {
            let s = tape.gather(sims, &pos_at)?;
            let z = tape.affine(s, -1.0 / config.tau, config.delta / config.tau)?;
            pos_terms.push(tape.lse0_plus(z)?);
        }
        if !neg_at.is_empty() {
            let s = tape.gather(sims, &neg_at)?;
            let z = tape.affine(s, 1.0 / config.tau, config.delta / config.tau)?;
            neg_terms.push(tape.lse0_plus(z)?);
        }
    }

    let mut loss = tape.scalar(0.0);
    if !pos_terms.is_empty() {
        let sum = sum_terms(tape, &pos_terms)?;
        let avg = tape.scale(sum, 1.0 / pos_terms.len() as f64)?;
        loss = tape.add(loss, avg)?;
    }
    if !neg_terms.is_empty() {
        let sum = sum_terms(tape, &neg_terms)?;
        let avg = tape.scale(sum, 1.0 / m as f64)?;
        loss = tape.add(loss, avg)?;
    }
    Ok(loss)
}

/// Proxy-anchor loss between class prompts and final CLS rows: prompts
/// act as anchors, each CLS row is positive for the prompt its class maps
/// to. `cls_rows` are `[1, D]` nodes, one per sample.
pub fn cls_prompt_loss(
    tape: &mut Tape,
    anchors: NodeId,
    cls_rows: &[NodeId],
    labels: &[usize],
    class_to_prompt: &[usize],
    config: &MetricConfig,
) -> Result<NodeId, MetricError> {
    if labels.len() != cls_rows.len() {
        return Err(MetricError::LabelCount { labels: labels.len(), examples: cls_rows.len() });
    }
    let positive = map_labels(labels, class_to_prompt)?;
    if cls_rows.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    let cls = tape.concat_rows(cls_rows)?;
    proxy_anchor_loss(tape, anchors, cls, &positive, config)
}

fn map_labels(labels: &[usize], class_to_prompt: &[usize]) -> Result<Vec<usize>, MetricError> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            class_to_prompt.get(c).copied().ok_or(MetricError::LabelRange {
                index: i,
                label: c,
                classes: class_to_prompt.len(),
            })
        })
        .collect()
}

/// Neighborhood component analysis loss over one labeled set, summed (not
/// averaged) over examples:
///
/// ```text
/// sum_i -log( sum_{j: same class, j != i} exp(-s_ij / tau)
///           / sum_{k != i}               exp(-s_ik / tau) )
/// ```
///
/// with `s` cosine similarity. `flip_sign` negates the exponent arguments,
/// turning similarity into affinity; the default form is kept as printed.
/// Every example must have a same-class neighbor.
pub fn nca_loss(
    tape: &mut Tape,
    examples: NodeId,
    labels: &[usize],
    tau: f64,
    flip_sign: bool,
) -> Result<NodeId, MetricError> {
    if !(tau > 0.0) {
        return Err(MetricError::BadParam(format!("tau must be positive, got {tau}")));
    }
    let n = tape.shape(examples)[0];
    if labels.len() != n {
        return Err(MetricError::LabelCount { labels: labels.len(), examples: n });
    }
    if n == 0 {
        return Ok(tape.scalar(0.0));
    }
    for i in 0..n {
        if !(0..n).any(|j| j != i && labels[j] == labels[i]) {
            return Err(MetricError::NoSameClassNeighbor { index: i });
        }
    }
    let (x_hat, _) = tape.l2_normalize_rows(examples)?;
    let sims = tape.matmul_nt(x_hat, x_hat)?;
    let mul = if flip_sign { 1.0 / tau } else { -1.0 / tau };
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let same: Vec<(usize, usize)> =
            (0..n).filter(|&j| j != i && labels[j] == labels[i]).map(|j| (i, j)).collect();
        let all: Vec<(usize, usize)> = (0..n).filter(|&k| k != i).map(|k| (i, k)).collect();
        let s_same = tape.gather(sims, &same)?;
        let z_same = tape.affine(s_same, mul, 0.0)?;
        let num = tape.logsumexp(z_same)?;
        let s_all = tape.gather(sims, &all)?;
        let z_all = tape.affine(s_all, mul, 0.0)?;
        let den = tape.logsumexp(z_all)?;
        let neg_num = tape.scale(num, -1.0)?;
        terms.push(tape.add(den, neg_num)?);
    }
    Ok(sum_terms(tape, &terms)?)
}

/// Fraction of (anchor, positive, negative) triples whose cosine
/// similarities clear the margin on both sides:
/// `s(a, pos) - delta >= s(a, neg) + delta`. Inputs are flat row-major
/// `[rows, dim]` values, normalized internally. No triples gives 1.0.
pub fn margin_satisfaction(
    anchors: &[f64],
    examples: &[f64],
    dim: usize,
    positive: &[usize],
    delta: f64,
) -> f64 {
    assert!(dim > 0 && anchors.len() % dim == 0 && examples.len() % dim == 0);
    let m = anchors.len() / dim;
    let n = examples.len() / dim;
    assert_eq!(positive.len(), n);
    let norm = |rows: &[f64]| -> Vec<f64> {
        let mut out = rows.to_vec();
        for r in out.chunks_mut(dim) {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm >= crate::tensor::EPS_NORM {
                r.iter_mut().for_each(|v| *v /= norm);
            }
        }
        out
    };
    let a = norm(anchors);
    let x = norm(examples);
    let sim = |i: usize, p: usize| -> f64 {
        x[i * dim..(i + 1) * dim].iter().zip(&a[p * dim..(p + 1) * dim]).map(|(u, v)| u * v).sum()
    };
    let mut satisfied = 0u64;
    let mut total = 0u64;
    for p in 0..m {
        let pos: Vec<f64> = (0..n).filter(|&i| positive[i] == p).map(|i| sim(i, p)).collect();
        let mut neg: Vec<f64> = (0..n).filter(|&i| positive[i] != p).map(|i| sim(i, p)).collect();
        neg.sort_by(|a, b| a.partial_cmp(b).unwrap());
        total += (pos.len() * neg.len()) as u64;
        for &sp in &pos {
            satisfied += neg.partition_point(|&sn| sn <= sp - 2.0 * delta) as u64;
        }
    }
    if total == 0 {
        1.0
    } else {
        satisfied as f64 / total as f64
    }
}

/// Token-level loss inputs drawn from one guided layer's trace.
#[derive(Debug)]
pub struct GuidanceInputs {
    /// `[M_guided, D]` anchor rows.
    pub anchors: NodeId,
    /// `[n, D]` example rows, all selected visual tokens across the batch.
    pub examples: NodeId,
    /// Positive anchor index per example row.
    pub positive: Vec<usize>,
}

/// Assemble anchors and labeled examples for the token-level loss. Every
/// visual token inherits its sample's class, mapped through
/// `class_to_prompt`; anchors are the first `guided_prompts` prompt rows
/// in the space picked by `config.compare_space`. With
/// `config.saliency_top_k` set, only the k tokens with the highest CLS
/// attention mass (mean over heads) survive per sample.
pub fn select_guidance_inputs(
    tape: &mut Tape,
    layer: &LayerTrace,
    labels: &[usize],
    class_to_prompt: &[usize],
    guided_prompts: usize,
    config: &MetricConfig,
) -> Result<GuidanceInputs, MetricError> {
    let anchors_full = match config.compare_space {
        CompareSpace::QueryProjected => layer.query_prompts,
        CompareSpace::RawPrompts => layer.prompts_raw,
    }
    .ok_or(MetricError::MissingPrompts)?;
    if labels.len() != layer.token_reps.len() {
        return Err(MetricError::LabelCount {
            labels: labels.len(),
            examples: layer.token_reps.len(),
        });
    }
    let m_total = tape.shape(anchors_full)[0];
    let anchors = if guided_prompts < m_total {
        let rows: Vec<usize> = (0..guided_prompts).collect();
        tape.select_rows(anchors_full, &rows)?
    } else {
        anchors_full
    };
    let prompt_of = map_labels(labels, class_to_prompt)?;

    let mut example_parts = Vec::with_capacity(labels.len());
    let mut positive = Vec::new();
    for (s, &p) in prompt_of.iter().enumerate() {
        let reps = layer.token_reps[s];
        let n_tokens = tape.shape(reps)[0];
        let keep: Vec<usize> = match config.saliency_top_k {
            None => (0..n_tokens).collect(),
            Some(k) => {
                if k == 0 || k > n_tokens {
                    return Err(MetricError::TopK { k, tokens: n_tokens });
                }
                let mass_row = layer.attention[s].mean_row(0);
                let visual = &mass_row[mass_row.len() - n_tokens..];
                let mut order: Vec<usize> = (0..n_tokens).collect();
                order.sort_by(|&a, &b| visual[b].partial_cmp(&visual[a]).unwrap().then(a.cmp(&b)));
                let mut keep = order[..k].to_vec();
                keep.sort_unstable();
                keep
            }
        };
        positive.extend(std::iter::repeat(p).take(keep.len()));
        example_parts.push(tape.select_rows(reps, &keep)?);
    }
    let examples = tape.concat_rows(&example_parts)?;
    Ok(GuidanceInputs { anchors, examples, positive })
}

/// `ce + beta * l_xp + lambda * l_pc` on the tape.
pub fn total_loss(
    tape: &mut Tape,
    ce: NodeId,
    l_xp: NodeId,
    l_pc: NodeId,
    beta: f64,
    lambda: f64,
) -> Result<NodeId, TensorError> {
    let sxp = tape.scale(l_xp, beta)?;
    let spc = tape.scale(l_pc, lambda)?;
    let partial = tape.add(ce, sxp)?;
    tape.add(partial, spc)
}
