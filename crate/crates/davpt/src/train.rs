//! Training loop: warmup-cosine schedule, AdamW on the trainable subset,
//! per-epoch class-to-prompt refresh, and per-step CSV records.
//!
//! The metric machinery (guidance inputs, both metric losses, the mapping
//! and its refresh) only runs when `beta > 0` or `lambda > 0`; with both at
//! zero the loop is plain cross-entropy and computes bit-identical updates
//! to a run that never had guidance code in it.

use crate::data::{batches, Dataset};
use crate::mapping::{pad_prompts, update_mapping, MappingError, PromptAssignment};
use crate::metric::{
    cls_prompt_loss, margin_satisfaction, proxy_anchor_loss, select_guidance_inputs, total_loss,
    MetricConfig, MetricError,
};
use crate::tensor::{NodeId, Tape, TensorError};
use crate::vit::{forward_model, ModelParams, Policy, VitError};
use thiserror::Error;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Cosine decay floor.
pub const MIN_LR: f64 = 1e-8;
pub const CSV_HEADER: &str = "epoch,step,lr,ce,l_xp,l_pc,total,margin_sat,acc";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in {tensor}")]
    NonFiniteGrad { tensor: String },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String, checkpoint: Vec<u8> },
    #[error("configuration mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub policy: Policy,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Skip weight decay for biases and prompt banks.
    pub decay_exempt_bias_and_prompts: bool,
    /// Weight of the token-prompt loss.
    pub beta: f64,
    /// Weight of the CLS-prompt loss.
    pub lambda: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Layers whose traces feed the metric losses; empty means the final
    /// layer.
    pub guided_layers: Vec<usize>,
    pub metric: MetricConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk_default(policy: Policy) -> Self {
        TrainConfig {
            policy,
            epochs: 30,
            warmup_epochs: 5,
            batch_size: 32,
            base_lr: 0.5,
            weight_decay: 1e-4,
            decay_exempt_bias_and_prompts: true,
            beta: 0.5,
            lambda: 0.5,
            grad_clip: 10.0,
            guided_layers: Vec::new(),
            metric: MetricConfig::proxy_anchor_classic(),
            seed: 0,
        }
    }

    pub fn guidance_enabled(&self) -> bool {
        self.beta > 0.0 || self.lambda > 0.0
    }

    fn resolve_guided(&self, num_layers: usize) -> Vec<usize> {
        if self.guided_layers.is_empty() {
            vec![num_layers - 1]
        } else {
            self.guided_layers.clone()
        }
    }
}

/// Learning rate at a 1-indexed global step: linear warmup from zero to
/// `base_lr` over `warmup_steps`, then cosine decay to [`MIN_LR`] at
/// `total_steps`. Continuous at the junction.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    assert!(step >= 1 && step <= total_steps, "step {step} outside 1..={total_steps}");
    if warmup_steps > 0 && step <= warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps == warmup_steps {
        return base_lr;
    }
    let t = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    MIN_LR + (base_lr - MIN_LR) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// Scale all gradients so their joint L2 norm is at most `clip`; returns
/// the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], clip: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let s = clip / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

fn decay_exempt(name: &str) -> bool {
    let field = name.rsplit('.').next().unwrap_or(name);
    field == "prompts" || field.starts_with("b_") || field.ends_with("_b") || field.contains("bias")
}

/// First and second moments for every trainable tensor, in visit order.
#[derive(Debug, Clone)]
pub struct OptimState {
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl OptimState {
    pub fn new(params: &ModelParams) -> Self {
        let mut names = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        params.visit(&mut |name, t| {
            if t.requires_grad {
                names.push(name.to_string());
                m.push(vec![0.0; t.numel()]);
                v.push(vec![0.0; t.numel()]);
            }
        });
        OptimState { names, m, v, t: 0 }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }
}

/// One bias-corrected decoupled-decay step on the trainable tensors.
/// Consumes their gradients. Frozen tensors are never touched. A
/// non-finite gradient aborts before anything is modified, naming the
/// tensor.
pub fn adamw_step(
    params: &mut ModelParams,
    state: &mut OptimState,
    lr: f64,
    weight_decay: f64,
    exempt_bias_and_prompts: bool,
    grad_clip: f64,
) -> Result<(), TrainError> {
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(state.names.len());
    let mut missing = None;
    params.visit_mut(&mut |name, t| {
        if !t.requires_grad {
            return;
        }
        match t.grad.take() {
            Some(g) => grads.push(g),
            None => missing = missing.take().or(Some(name.to_string())),
        }
    });
    if let Some(name) = missing {
        return Err(TrainError::Shape(format!("{name} is trainable but has no gradient")));
    }
    debug_assert_eq!(grads.len(), state.names.len());
    for (name, g) in state.names.iter().zip(&grads) {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(TrainError::NonFiniteGrad { tensor: name.clone() });
        }
    }
    clip_global_norm(&mut grads, grad_clip);

    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let mut slot = 0;
    params.visit_mut(&mut |name, tensor| {
        if !tensor.requires_grad {
            return;
        }
        let g = &grads[slot];
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        let decay =
            if exempt_bias_and_prompts && decay_exempt(name) { 0.0 } else { weight_decay };
        for i in 0..tensor.data.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            tensor.data[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + decay * tensor.data[i]);
        }
        slot += 1;
    });
    Ok(())
}

/// Accuracy over a dataset; argmax ties go to the lowest class index.
pub fn evaluate(
    params: &mut ModelParams,
    ds: &Dataset,
    batch_size: usize,
) -> Result<f64, TrainError> {
    if ds.len() == 0 {
        return Err(TrainError::Shape("cannot evaluate on an empty dataset".into()));
    }
    let classes = params.config.num_classes;
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let images: Vec<&[u8]> = chunk.iter().map(|&i| ds.sample(i).0).collect();
        let mut tape = Tape::new();
        let trace = forward_model(&mut tape, params, &images, &[])?;
        let logits = tape.value(trace.logits);
        for (row, &i) in chunk.iter().enumerate() {
            let r = &logits[row * classes..(row + 1) * classes];
            let mut best = 0;
            for (c, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = c;
                }
            }
            if best == ds.sample(i).1 {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub l_xp: f64,
    pub l_pc: f64,
    pub total: f64,
    pub margin_sat: f64,
    /// Validation accuracy as of the last completed epoch; 0.0 before the
    /// first evaluation.
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_ce: f64,
    pub mean_l_xp: f64,
    pub mean_l_pc: f64,
    pub mean_total: f64,
    pub mean_margin_sat: f64,
    pub val_acc: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Final class-to-prompt assignment, present when guidance ran.
    pub mapping: Option<PromptAssignment>,
    pub final_val_acc: f64,
}

impl TrainReport {
    /// Per-step CSV with a manifest hash comment line on top.
    pub fn to_csv(&self, manifest_hash: &str) -> String {
        let mut out = format!("# manifest: {manifest_hash}\n{CSV_HEADER}\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                s.epoch, s.step, s.lr, s.ce, s.l_xp, s.l_pc, s.total, s.margin_sat, s.acc
            ));
        }
        out
    }
}

fn divergify(e: TrainError, step: usize, checkpoint: &[u8]) -> TrainError {
    let detail = match &e {
        TrainError::Tensor(TensorError::NonFinite { what }) => Some(what.clone()),
        TrainError::Vit(VitError::Tensor(TensorError::NonFinite { what })) => Some(what.clone()),
        TrainError::Metric(MetricError::Tensor(TensorError::NonFinite { what })) => {
            Some(what.clone())
        }
        TrainError::NonFiniteGrad { tensor } => Some(format!("gradient of {tensor}")),
        _ => None,
    };
    match detail {
        Some(detail) => TrainError::Diverged { step, detail, checkpoint: checkpoint.to_vec() },
        None => e,
    }
}

/// Mean row per class with a fallback: a class absent from `labels` keeps
/// its row from `previous` (the prior epoch's representations). Absent
/// classes without a fallback are an error.
fn class_reps_with_fallback(
    rows: &[f64],
    dim: usize,
    labels: &[usize],
    num_classes: usize,
    previous: Option<&[f64]>,
) -> Result<Vec<f64>, MappingError> {
    let mut sums = vec![0.0; num_classes * dim];
    let mut counts = vec![0usize; num_classes];
    for (row, &class) in rows.chunks(dim).zip(labels) {
        counts[class] += 1;
        for (s, v) in sums[class * dim..(class + 1) * dim].iter_mut().zip(row) {
            *s += v;
        }
    }
    for class in 0..num_classes {
        let dst = class * dim..(class + 1) * dim;
        if counts[class] > 0 {
            for s in sums[dst].iter_mut() {
                *s /= counts[class] as f64;
            }
        } else if let Some(prev) = previous {
            sums[dst.clone()].copy_from_slice(&prev[dst]);
        } else {
            return Err(MappingError::EmptyClass { class });
        }
    }
    Ok(sums)
}

/// CLS rows for every sample of `ds` under the current parameters,
/// with the label vector alongside.
pub fn collect_cls_rows(
    params: &mut ModelParams,
    ds: &Dataset,
    batch_size: usize,
) -> Result<(Vec<f64>, Vec<usize>), TrainError> {
    let d = params.config.embed_dim;
    let mut rows = vec![0.0; ds.len() * d];
    let mut labels = vec![0usize; ds.len()];
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let images: Vec<&[u8]> = chunk.iter().map(|&i| ds.sample(i).0).collect();
        let mut tape = Tape::new();
        let trace = forward_model(&mut tape, params, &images, &[])?;
        for (row, &i) in chunk.iter().enumerate() {
            rows[i * d..(i + 1) * d].copy_from_slice(tape.value(trace.cls_final[row]));
            labels[i] = ds.sample(i).1;
        }
    }
    Ok((rows, labels))
}

fn mean_of(tape: &mut Tape, terms: &[NodeId]) -> Result<NodeId, TensorError> {
    let mut acc = tape.scalar(0.0);
    for &t in terms {
        acc = tape.add(acc, t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// Train `params` on `train`, evaluating on `val` once per epoch.
///
/// With guidance on, a pre-pass collects class representations and seeds
/// the class-to-prompt mapping before the first step; after each epoch the
/// mapping is refreshed from the CLS rows already computed during that
/// epoch's forward passes, warm-started from the previous centroids. When
/// several layers are guided, each metric loss is the mean of its
/// per-layer values. Divergence (a non-finite activation, loss, or
/// gradient) aborts with the last end-of-epoch checkpoint.
pub fn fit(
    params: &mut ModelParams,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    let c = params.config.clone();
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(TrainError::Shape("epochs and batch_size must be >= 1".into()));
    }
    if train.len() == 0 {
        return Err(TrainError::Shape("training set is empty".into()));
    }
    if train.num_classes as usize != c.num_classes {
        return Err(TrainError::Shape(format!(
            "dataset has {} classes, model has {}",
            train.num_classes, c.num_classes
        )));
    }
    if train.sample_bytes() != c.image_bytes() {
        return Err(TrainError::Shape(format!(
            "dataset samples are {} bytes, model expects {}",
            train.sample_bytes(),
            c.image_bytes()
        )));
    }
    let guided_layers = config.resolve_guided(c.num_layers);
    for &l in &guided_layers {
        if l >= c.num_layers {
            return Err(VitError::GuidedLayer { layer: l, layers: c.num_layers }.into());
        }
    }
    let guidance = config.guidance_enabled();
    let budget = pad_prompts(c.num_classes, c.prompts_per_layer);
    if guidance && budget.guided > c.prompts_per_layer {
        return Err(TrainError::Shape(format!(
            "{} classes need {} guided prompts but the bank holds {}",
            c.num_classes, budget.guided, c.prompts_per_layer
        )));
    }
    if guidance && c.prompts_per_layer == 0 {
        return Err(TrainError::Shape("guidance needs at least one prompt".into()));
    }

    params.set_trainability(config.policy);
    let mut state = OptimState::new(params);
    let d = c.embed_dim;
    let n = train.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let warmup_steps = config.warmup_epochs * steps_per_epoch;

    let mut mapping: Option<PromptAssignment> = None;
    let mut prev_reps: Option<Vec<f64>> = None;
    if guidance {
        let (rows, labels) = collect_cls_rows(params, train, config.batch_size)?;
        let reps = class_reps_with_fallback(&rows, d, &labels, c.num_classes, None)?;
        mapping = Some(update_mapping(&reps, d, budget.guided, None, config.seed)?);
        prev_reps = Some(reps);
    }

    let mut report =
        TrainReport { steps: Vec::with_capacity(total_steps), epochs: Vec::new(), mapping: None, final_val_acc: 0.0 };
    let mut acc = 0.0;
    let mut step = 0usize;
    let mut last_good = params.to_bytes(config.policy);

    for epoch in 1..=config.epochs {
        let mut cls_rows = vec![0.0f64; n * d];
        let mut cls_labels = vec![0usize; n];
        let mut sums = [0.0f64; 5];

        for batch in batches(n, config.batch_size, config.seed, epoch as u64) {
            step += 1;
            let lr = lr_at(step, total_steps, warmup_steps, config.base_lr);
            let images: Vec<&[u8]> = batch.iter().map(|&i| train.sample(i).0).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train.sample(i).1).collect();

            let mut tape = Tape::new();
            let trace = forward_model(
                &mut tape,
                params,
                &images,
                if guidance { &guided_layers } else { &[] },
            )
            .map_err(|e| divergify(e.into(), step, &last_good))?;
            let ce = tape
                .cross_entropy(trace.logits, &labels)
                .map_err(|e| divergify(e.into(), step, &last_good))?;

            let (total, ce_v, xp_v, pc_v, margin) = if guidance {
                let assignment = mapping.as_ref().unwrap();
                let mut xp_terms = Vec::with_capacity(trace.guided.len());
                let mut pc_terms = Vec::with_capacity(trace.guided.len());
                let mut margin_sum = 0.0;
                for lt in &trace.guided {
                    let inputs = select_guidance_inputs(
                        &mut tape,
                        lt,
                        &labels,
                        &assignment.class_to_prompt,
                        budget.guided,
                        &config.metric,
                    )
                    .map_err(|e| divergify(e.into(), step, &last_good))?;
                    margin_sum += margin_satisfaction(
                        tape.value(inputs.anchors),
                        tape.value(inputs.examples),
                        d,
                        &inputs.positive,
                        config.metric.delta,
                    );
                    let l_xp = proxy_anchor_loss(
                        &mut tape,
                        inputs.anchors,
                        inputs.examples,
                        &inputs.positive,
                        &config.metric,
                    )
                    .map_err(|e| divergify(e.into(), step, &last_good))?;
                    xp_terms.push(l_xp);

                    let raw = lt.prompts_raw.expect("guidance checked the prompt bank");
                    let guided_rows: Vec<usize> = (0..budget.guided).collect();
                    let anchors_pc = tape
                        .select_rows(raw, &guided_rows)
                        .map_err(|e| divergify(e.into(), step, &last_good))?;
                    let l_pc = cls_prompt_loss(
                        &mut tape,
                        anchors_pc,
                        &trace.cls_final,
                        &labels,
                        &assignment.class_to_prompt,
                        &config.metric,
                    )
                    .map_err(|e| divergify(e.into(), step, &last_good))?;
                    pc_terms.push(l_pc);
                }
                let l_xp = mean_of(&mut tape, &xp_terms)
                    .map_err(|e| divergify(e.into(), step, &last_good))?;
                let l_pc = mean_of(&mut tape, &pc_terms)
                    .map_err(|e| divergify(e.into(), step, &last_good))?;
                let total = total_loss(&mut tape, ce, l_xp, l_pc, config.beta, config.lambda)
                    .map_err(|e| divergify(e.into(), step, &last_good))?;
                (
                    total,
                    tape.scalar_value(ce).map_err(|e| divergify(e.into(), step, &last_good))?,
                    tape.scalar_value(l_xp).map_err(|e| divergify(e.into(), step, &last_good))?,
                    tape.scalar_value(l_pc).map_err(|e| divergify(e.into(), step, &last_good))?,
                    margin_sum / trace.guided.len() as f64,
                )
            } else {
                let ce_v =
                    tape.scalar_value(ce).map_err(|e| divergify(e.into(), step, &last_good))?;
                (ce, ce_v, 0.0, 0.0, 1.0)
            };
            let total_v =
                tape.scalar_value(total).map_err(|e| divergify(e.into(), step, &last_good))?;

            tape.backward(total).map_err(|e| divergify(e.into(), step, &last_good))?;
            let mut wb_err = None;
            params.visit_mut(&mut |_, t| {
                if t.requires_grad && wb_err.is_none() {
                    if let Err(e) = tape.write_back(t) {
                        wb_err = Some(e);
                    }
                }
            });
            if let Some(e) = wb_err {
                return Err(divergify(e.into(), step, &last_good));
            }
            adamw_step(
                params,
                &mut state,
                lr,
                config.weight_decay,
                config.decay_exempt_bias_and_prompts,
                config.grad_clip,
            )
            .map_err(|e| divergify(e, step, &last_good))?;

            if guidance {
                for (row, &i) in batch.iter().enumerate() {
                    cls_rows[i * d..(i + 1) * d].copy_from_slice(tape.value(trace.cls_final[row]));
                    cls_labels[i] = train.sample(i).1;
                }
            }

            sums[0] += ce_v;
            sums[1] += xp_v;
            sums[2] += pc_v;
            sums[3] += total_v;
            sums[4] += margin;
            report.steps.push(StepRecord {
                epoch,
                step,
                lr,
                ce: ce_v,
                l_xp: xp_v,
                l_pc: pc_v,
                total: total_v,
                margin_sat: margin,
                acc,
            });
        }

        if guidance {
            let reps = class_reps_with_fallback(
                &cls_rows,
                d,
                &cls_labels,
                c.num_classes,
                prev_reps.as_deref(),
            )?;
            mapping =
                Some(update_mapping(&reps, d, budget.guided, mapping.as_ref(), config.seed)?);
            prev_reps = Some(reps);
        }
        acc = evaluate(params, val, config.batch_size)?;
        let b = steps_per_epoch as f64;
        report.epochs.push(EpochRecord {
            epoch,
            mean_ce: sums[0] / b,
            mean_l_xp: sums[1] / b,
            mean_l_pc: sums[2] / b,
            mean_total: sums[3] / b,
            mean_margin_sat: sums[4] / b,
            val_acc: acc,
        });
        last_good = params.to_bytes(config.policy);
    }

    report.final_val_acc = acc;
    report.mapping = mapping;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, split, SynthSpec};
    use crate::vit::{PromptInit, ViTConfig};
    use approx::assert_relative_eq;

    fn tiny_config(prompts: usize) -> ViTConfig {
        ViTConfig {
            image_size: 16,
            patch_size: 8,
            channels: 1,
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            num_classes: 5,
            prompts_per_layer: prompts,
            prompt_init: PromptInit::TruncNormal,
        }
    }

    fn tiny_sets() -> (Dataset, Dataset) {
        let ds = generate(&SynthSpec {
            num_classes: 5,
            per_class: 8,
            image_size: 16,
            channels: 1,
            separability: 1.0,
            noise_std: 4.0,
            seed: 3,
        })
        .unwrap();
        let (train, val, _test) = split(&ds, 0);
        (train, val)
    }

    fn quick_train_config(policy: Policy) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            warmup_epochs: 1,
            batch_size: 8,
            base_lr: 0.02,
            ..TrainConfig::desk_default(policy)
        }
    }

    #[test]
    fn schedule_is_continuous_and_hits_both_endpoints() {
        let (total, warmup, base) = (100, 10, 0.4);
        assert_relative_eq!(lr_at(1, total, warmup, base), base / 10.0);
        assert_relative_eq!(lr_at(warmup, total, warmup, base), base);
        // One step past warmup stays within one cosine increment of base.
        let after = lr_at(warmup + 1, total, warmup, base);
        assert!(after < base && base - after < base * 0.01, "{after}");
        assert_relative_eq!(lr_at(total, total, warmup, base), MIN_LR);
        // Rises through warmup, falls through decay.
        for s in 2..=warmup {
            assert!(lr_at(s, total, warmup, base) > lr_at(s - 1, total, warmup, base));
        }
        for s in warmup + 1..=total {
            assert!(lr_at(s, total, warmup, base) < lr_at(s - 1, total, warmup, base));
        }
        // No warmup: starts near base and still lands on the floor.
        assert!(lr_at(1, 50, 0, base) > base * 0.99);
        assert_relative_eq!(lr_at(50, 50, 0, base), MIN_LR);
    }

    #[test]
    fn first_adamw_step_with_unit_gradient_moves_by_lr() {
        let mut params = ModelParams::init(&tiny_config(2), 0).unwrap();
        params.set_trainability(Policy::VptDeep);
        let before = params.head_w.data.clone();
        let mut state = OptimState::new(&params);
        params.visit_mut(&mut |_, t| {
            if t.requires_grad {
                t.grad = Some(vec![1.0; t.numel()]);
            }
        });
        // Unit gradients over all trainable elements exceed no clip here.
        let count = params.trainable_count();
        let clip = (count as f64).sqrt() + 1.0;
        adamw_step(&mut params, &mut state, 0.003, 0.0, true, clip).unwrap();
        for (w, b) in params.head_w.data.iter().zip(&before) {
            assert_relative_eq!(b - w, 0.003, max_relative = 1e-6);
        }
        assert_eq!(state.steps_taken(), 1);
    }

    #[test]
    fn frozen_tensors_never_move_and_gradients_are_consumed() {
        let mut params = ModelParams::init(&tiny_config(2), 1).unwrap();
        params.set_trainability(Policy::VptDeep);
        let frozen_before = params.blocks[0].w_q.data.clone();
        let cls_before = params.cls.data.clone();
        let mut state = OptimState::new(&params);
        params.visit_mut(&mut |_, t| {
            if t.requires_grad {
                t.grad = Some(vec![0.5; t.numel()]);
            } else {
                t.grad = Some(vec![9.9; t.numel()]);
            }
        });
        adamw_step(&mut params, &mut state, 0.01, 0.1, true, 1e9).unwrap();
        assert_eq!(params.blocks[0].w_q.data, frozen_before);
        assert_eq!(params.cls.data, cls_before);
        params.visit(&mut |_, t| {
            if t.requires_grad {
                assert!(t.grad.is_none(), "gradient should be consumed");
            }
        });
    }

    #[test]
    fn non_finite_gradient_aborts_naming_the_tensor() {
        let mut params = ModelParams::init(&tiny_config(2), 0).unwrap();
        params.set_trainability(Policy::VptDeep);
        let snapshot = params.to_bytes(Policy::VptDeep);
        let mut state = OptimState::new(&params);
        params.visit_mut(&mut |_, t| {
            if t.requires_grad {
                t.grad = Some(vec![0.0; t.numel()]);
            }
        });
        params.blocks[1].prompts.grad = Some(vec![f64::NAN; params.blocks[1].prompts.numel()]);
        let err = adamw_step(&mut params, &mut state, 0.01, 0.0, true, 10.0).unwrap_err();
        match err {
            TrainError::NonFiniteGrad { tensor } => assert_eq!(tensor, "block1.prompts"),
            other => panic!("unexpected: {other}"),
        }
        assert_eq!(params.to_bytes(Policy::VptDeep), snapshot, "no partial update");
    }

    #[test]
    fn global_norm_clip_rescales_exactly_at_the_threshold() {
        let mut grads = vec![vec![3.0, 4.0]];
        let norm = clip_global_norm(&mut grads, 10.0);
        assert_relative_eq!(norm, 5.0);
        assert_eq!(grads[0], vec![3.0, 4.0], "below the clip nothing changes");

        let mut grads = vec![vec![30.0], vec![40.0]];
        let norm = clip_global_norm(&mut grads, 5.0);
        assert_relative_eq!(norm, 50.0);
        assert_relative_eq!(grads[0][0], 3.0);
        assert_relative_eq!(grads[1][0], 4.0);
    }

    #[test]
    fn evaluation_with_a_zeroed_head_predicts_the_lowest_class() {
        let (train, _) = tiny_sets();
        let mut params = ModelParams::init(&tiny_config(2), 0).unwrap();
        // Head starts at zero, so logits tie at zero and argmax picks 0.
        let acc = evaluate(&mut params, &train, 16).unwrap();
        let class0 = (0..train.len()).filter(|&i| train.sample(i).1 == 0).count();
        assert_relative_eq!(acc, class0 as f64 / train.len() as f64);
    }

    #[test]
    fn fit_learns_the_tiny_dataset_and_logs_every_step() {
        let (train, val) = tiny_sets();
        let mut params = ModelParams::init(&tiny_config(5), 0).unwrap();
        let config = quick_train_config(Policy::DaVpt);
        let report = fit(&mut params, &train, &val, &config).unwrap();

        let steps_per_epoch = train.len().div_ceil(config.batch_size);
        assert_eq!(report.steps.len(), config.epochs * steps_per_epoch);
        assert_eq!(report.epochs.len(), config.epochs);
        assert!(report.mapping.is_some());
        // Accuracy column lags evaluation by one epoch.
        assert!(report.steps[..steps_per_epoch].iter().all(|s| s.acc == 0.0));
        assert_eq!(report.steps[steps_per_epoch].acc, report.epochs[0].val_acc);
        // Training moved the loss.
        assert!(
            report.epochs.last().unwrap().mean_ce < report.epochs[0].mean_ce,
            "{:?}",
            report.epochs
        );
        let csv = report.to_csv("deadbeef");
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("# manifest: deadbeef"));
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(lines.count(), report.steps.len());
    }

    #[test]
    fn zero_weighted_guidance_trains_bit_identically_to_plain_vpt() {
        let (train, val) = tiny_sets();
        let mut a = ModelParams::init(&tiny_config(5), 7).unwrap();
        let mut b = a.clone();

        let mut plain = quick_train_config(Policy::VptDeep);
        plain.beta = 0.0;
        plain.lambda = 0.0;
        let mut zeroed = quick_train_config(Policy::DaVpt);
        zeroed.beta = 0.0;
        zeroed.lambda = 0.0;

        let ra = fit(&mut a, &train, &val, &plain).unwrap();
        let rb = fit(&mut b, &train, &val, &zeroed).unwrap();
        assert_eq!(a.to_bytes(Policy::VptDeep), b.to_bytes(Policy::VptDeep));
        assert!(rb.mapping.is_none(), "no guidance, no mapping");
        let ca = ra.to_csv("x");
        let cb = rb.to_csv("x");
        assert_eq!(ca, cb, "records must match line for line");
    }

    #[test]
    fn identical_runs_produce_identical_reports_and_weights() {
        let (train, val) = tiny_sets();
        let config = quick_train_config(Policy::DaVpt);
        let mut a = ModelParams::init(&tiny_config(5), 2).unwrap();
        let mut b = ModelParams::init(&tiny_config(5), 2).unwrap();
        let ra = fit(&mut a, &train, &val, &config).unwrap();
        let rb = fit(&mut b, &train, &val, &config).unwrap();
        assert_eq!(a.to_bytes(Policy::DaVpt), b.to_bytes(Policy::DaVpt));
        assert_eq!(ra.to_csv("m"), rb.to_csv("m"));
        assert_eq!(
            ra.mapping.as_ref().unwrap().class_to_prompt,
            rb.mapping.as_ref().unwrap().class_to_prompt
        );
    }

    #[test]
    fn an_absurd_learning_rate_diverges_with_the_last_good_checkpoint() {
        let (train, val) = tiny_sets();
        let mut params = ModelParams::init(&tiny_config(2), 0).unwrap();
        // AdamW updates are magnitude-normalized, so only a truly enormous
        // rate pushes parameters far enough that a squared activation
        // overflows on the next forward pass.
        let mut config = quick_train_config(Policy::DaVptPlus);
        config.base_lr = 1e200;
        config.warmup_epochs = 0;
        config.grad_clip = 1e18;
        let err = fit(&mut params, &train, &val, &config).unwrap_err();
        match err {
            TrainError::Diverged { step, checkpoint, .. } => {
                assert!(step >= 1);
                let (restored, policy) = ModelParams::from_bytes(&checkpoint).unwrap();
                assert_eq!(policy, Policy::DaVptPlus);
                assert_eq!(restored.config, tiny_config(2));
            }
            other => panic!("expected divergence, got: {other}"),
        }
    }

    #[test]
    fn fit_rejects_mismatched_datasets() {
        let (train, val) = tiny_sets();
        let params = ModelParams::init(&tiny_config(2), 0).unwrap();
        let mut bad = params.clone();
        bad.config.num_classes = 9;
        let config = quick_train_config(Policy::DaVpt);
        assert!(matches!(
            fit(&mut bad, &train, &val, &config).unwrap_err(),
            TrainError::Shape(_)
        ));
        let mut no_prompts = ModelParams::init(&tiny_config(0), 0).unwrap();
        let err = fit(&mut no_prompts, &train, &val, &config).unwrap_err();
        assert!(matches!(err, TrainError::Shape(_)), "{err}");
    }

    #[test]
    fn class_fallback_reuses_previous_rows_only_for_absent_classes() {
        let rows = [1.0, 1.0, 5.0, 5.0];
        let prev = [9.0, 9.0, 8.0, 8.0, 7.0, 7.0];
        let reps = class_reps_with_fallback(&rows, 2, &[0, 0], 3, Some(&prev)).unwrap();
        assert_eq!(reps, vec![3.0, 3.0, 8.0, 8.0, 7.0, 7.0]);
        let err = class_reps_with_fallback(&rows, 2, &[0, 0], 3, None).unwrap_err();
        assert!(matches!(err, MappingError::EmptyClass { class: 1 }));
    }
}
