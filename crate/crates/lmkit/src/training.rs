//! The optimisation loop: Adam with bias correction, cosine learning-rate
//! decay, gradient accumulation, run logging, and checkpointing.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::ComputeBudget;
use crate::corpus::{Batch, BatchPlan, CorpusError, IterMode, TokenCorpus};
use crate::graph::Graph;
use crate::models::{masked_loss, save_checkpoint, Model, ModelError, RecurrentState};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter {param} at step {step}")]
    NonFiniteGradient { param: String, step: u64 },
    #[error("gradient count {grads} does not match parameter count {params}")]
    GradientCount { grads: usize, params: usize },
    #[error("budget of zero steps")]
    EmptyBudget,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Adam moment hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment tensors plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimState<E: Element = f64> {
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
    pub step: u64,
}

impl<E: Element> OptimState<E> {
    pub fn for_model(model: &Model<E>) -> Self {
        let zeros: Vec<Tensor<E>> = model
            .params
            .entries()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        OptimState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Cosine decay from `lr0` at step 0 down to `lr0 / decay_factor` at
/// `total_steps`; steps beyond the schedule clamp to the floor.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64, decay_factor: f64) -> f64 {
    let lr_min = lr0 / decay_factor;
    if step >= total_steps || total_steps == 0 {
        return lr_min;
    }
    let progress = step as f64 / total_steps as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One Adam update over every parameter tensor. Rejects the whole step on
/// any non-finite gradient, leaving parameters and moments untouched.
pub fn adam_step<E: Element>(
    model: &mut Model<E>,
    grads: &[Tensor<E>],
    state: &mut OptimState<E>,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<(), TrainError> {
    if grads.len() != model.params.num_entries() {
        return Err(TrainError::GradientCount {
            grads: grads.len(),
            params: model.params.num_entries(),
        });
    }
    for ((name, _), g) in model.params.entries().iter().zip(grads) {
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient {
                param: name.clone(),
                step: state.step + 1,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    let (b1e, b2e) = (E::from_f64(b1), E::from_f64(b2));
    let (nb1, nb2) = (E::from_f64(1.0 - b1), E::from_f64(1.0 - b2));
    for (idx, (_, param)) in model.params.entries_mut().iter_mut().enumerate() {
        let g = grads[idx].data();
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        let p = param.data_mut();
        for j in 0..g.len() {
            m[j] = b1e * m[j] + nb1 * g[j];
            v[j] = b2e * v[j] + nb2 * g[j] * g[j];
            let m_hat = m[j].to_f64() / bias1;
            let v_hat = v[j].to_f64() / bias2;
            let update = lr * m_hat / (v_hat.sqrt() + hyper.eps);
            p[j] = p[j] - E::from_f64(update);
        }
    }
    Ok(())
}

/// One record per log interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: u64,
    pub tokens_seen: u64,
    pub epoch: u64,
    pub lr: f64,
    pub train_loss: f64,
    /// Optional held-out metric supplied by the caller's hook.
    pub eval_loss: Option<f64>,
    /// Derived accelerator seconds when a reference throughput is known.
    pub accel_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub step: u64,
    pub message: String,
}

/// Append-only training log; steps strictly increase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<RunRecord>,
    pub incidents: Vec<Incident>,
    pub epochs_completed: u64,
}

impl RunLog {
    /// Line-delimited JSON: one record per line, incidents tagged.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serialises"));
            out.push('\n');
        }
        for i in &self.incidents {
            out.push_str(&format!(
                "{{\"incident\":{}}}\n",
                serde_json::to_string(i).expect("incident serialises")
            ));
        }
        out
    }

    /// (step, train_loss) pairs for curve conversion.
    pub fn curve(&self) -> Vec<(u64, f64)> {
        self.records.iter().map(|r| (r.step, r.train_loss)).collect()
    }
}

/// Knobs beyond the batch plan and budget. Defaults follow the training
/// recipe: lr 0.0006 decayed 100x by cosine, Adam(0.9, 0.999, 1e-8), no
/// warmup, no clipping.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub lr0: f64,
    pub decay_factor: f64,
    pub adam: AdamHyper,
    pub log_every: u64,
    /// Linear warmup steps before the cosine schedule (0 disables).
    pub warmup_steps: u64,
    /// Global-norm gradient clipping (None disables).
    pub grad_clip: Option<f64>,
    /// Carry recurrent state across consecutive windows within a lane
    /// instead of resetting each sequence.
    pub carry_state: bool,
    /// Reference throughput for derived accelerator seconds in the log.
    pub reference_tps: Option<f64>,
    /// Write the final checkpoint here (vocab hash from the corpus).
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            lr0: 6e-4,
            decay_factor: 100.0,
            adam: AdamHyper::default(),
            log_every: 100,
            warmup_steps: 0,
            grad_clip: None,
            carry_state: false,
            reference_tps: None,
            checkpoint: None,
        }
    }
}

/// Forward + backward over one micro-batch; the mean loss over scored
/// positions is scaled by `loss_scale` before gradients accumulate.
/// Returns the unscaled mean loss.
pub fn accumulate_gradients<E: Element>(
    model: &Model<E>,
    batch: &Batch,
    state: Option<&RecurrentState<E>>,
    loss_scale: f64,
    grads: &mut [Tensor<E>],
) -> Result<(f64, Option<RecurrentState<E>>), TrainError> {
    let mut graph = Graph::new();
    let fwd = model.forward(
        &mut graph,
        &batch.inputs,
        batch.batch_size,
        batch.seq_len,
        state,
    )?;
    let (total, scored) = masked_loss(&mut graph, fwd.logits, &batch.targets, &batch.mask)?;
    let mean = graph.scale(total, 1.0 / scored as f64);
    let scaled = graph.scale(mean, loss_scale);
    let g = graph.backward(scaled);
    for (idx, node) in fwd.param_nodes.iter().enumerate() {
        if let Some(delta) = g.get(*node) {
            for (acc, d) in grads[idx].data_mut().iter_mut().zip(delta.data()) {
                *acc += *d;
            }
        }
    }
    Ok((graph.value(mean).item().to_f64(), fwd.state))
}

fn clip_gradients<E: Element>(grads: &mut [Tensor<E>], max_norm: f64) {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &x in g.data() {
            let x = x.to_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = E::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x = *x * scale;
            }
        }
    }
}

/// Runs exactly `budget.total_steps` optimisation steps, each consuming
/// `plan.grad_accum` micro-batches; wraps the stream into further epochs if
/// the data runs out. Logs every `log_every` steps and at the final step;
/// the optional `eval_metric` hook is consulted at logging time.
pub fn train(
    model: &mut Model<f64>,
    corpus: &TokenCorpus,
    plan: BatchPlan,
    budget: &ComputeBudget,
    opts: &TrainOptions,
    mut eval_metric: Option<&mut dyn FnMut(&Model<f64>) -> f64>,
) -> Result<RunLog, TrainError> {
    if budget.total_steps == 0 {
        return Err(TrainError::EmptyBudget);
    }
    plan.validate()?;
    let total_steps = budget.total_steps;
    let tokens_per_step = plan.tokens_per_step() as u64;
    let mut log = RunLog::default();
    let mut optim = OptimState::for_model(model);
    let mut iter = corpus.iterate_batches(plan, IterMode::Train)?;
    let mut carried: Option<RecurrentState<f64>> = None;

    for step in 1..=total_steps {
        let lr = if step - 1 < opts.warmup_steps {
            opts.lr0 * (step as f64 / opts.warmup_steps.max(1) as f64)
        } else {
            cosine_lr(
                step - 1 - opts.warmup_steps,
                total_steps.saturating_sub(opts.warmup_steps),
                opts.lr0,
                opts.decay_factor,
            )
        };
        let mut grads: Vec<Tensor<f64>> = model
            .params
            .entries()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        let mut step_loss = 0.0;
        for _ in 0..plan.grad_accum {
            let batch = match iter.next() {
                Some(b) => b,
                None => {
                    log.epochs_completed += 1;
                    carried = None;
                    iter = corpus.iterate_batches(plan, IterMode::Train)?;
                    iter.next().expect("fresh epoch yields at least one batch")
                }
            };
            let state_ref = if opts.carry_state { carried.as_ref() } else { None };
            let (loss, new_state) = accumulate_gradients(
                model,
                &batch,
                state_ref,
                1.0 / plan.grad_accum as f64,
                &mut grads,
            )?;
            if opts.carry_state {
                carried = new_state;
            }
            step_loss += loss / plan.grad_accum as f64;
        }
        if let Some(max_norm) = opts.grad_clip {
            clip_gradients(&mut grads, max_norm);
        }
        match adam_step(model, &grads, &mut optim, lr, &opts.adam) {
            Ok(()) => {}
            Err(TrainError::NonFiniteGradient { param, step }) => {
                log.incidents.push(Incident {
                    step,
                    message: format!("step rejected: non-finite gradient in {param}"),
                });
            }
            Err(other) => return Err(other),
        }
        if step % opts.log_every == 0 || step == total_steps {
            log.records.push(RunRecord {
                step,
                tokens_seen: step * tokens_per_step,
                epoch: log.epochs_completed,
                lr,
                train_loss: step_loss,
                eval_loss: eval_metric.as_mut().map(|f| f(model)),
                accel_seconds: opts
                    .reference_tps
                    .map(|v| step as f64 * tokens_per_step as f64 / v),
            });
        }
    }
    if let Some(path) = &opts.checkpoint {
        save_checkpoint(model, corpus.vocab_hash(), path)?;
    }
    Ok(log)
}
