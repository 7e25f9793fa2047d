//! Adam training loop with per-step loss history and basis snapshots.

use std::io::{BufRead, Write};

use serde::Serialize;

use crate::error::{Result, SrplError};
use crate::model::{Model, PackedBatch, ParamGroup, ParamVars};
use crate::rope::{RotationEngineKind, SpectralBasis};
use crate::tasks::{TaskKind, TaskSample, TaskSpec};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub basis_learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub snapshot_every: usize,
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 400,
            batch_size: 32,
            learning_rate: 1e-3,
            basis_learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            snapshot_every: 10,
            eval_samples: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(SrplError::contract("steps must be >= 1"));
        }
        if self.batch_size == 0 || self.snapshot_every == 0 {
            return Err(SrplError::contract("batch_size and snapshot_every must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.basis_learning_rate > 0.0) {
            return Err(SrplError::contract("learning rates must be positive"));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2) && self.adam_eps > 0.0) {
            return Err(SrplError::contract("invalid Adam hyperparameters"));
        }
        Ok(())
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, betas: (f64, f64), eps: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(SrplError::contract(format!(
            "adam_step: params {} vs grads {} vs state {}/{}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    let (b1, b2) = betas;
    state.t += 1;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisSnapshot {
    pub step: usize,
    pub bases: Vec<SpectralBasis>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    /// Mean cross-entropy over all target-region tokens.
    pub loss: f64,
    /// Fraction of samples whose whole target region is predicted exactly.
    pub accuracy: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunHistory {
    pub task: TaskKind,
    pub engine: RotationEngineKind,
    pub seed: u64,
    pub losses: Vec<f64>,
    pub snapshots: Vec<BasisSnapshot>,
    pub final_eval: Option<EvalResult>,
}

impl RunHistory {
    /// Final held-out loss, falling back to the last training loss.
    pub fn final_loss(&self) -> f64 {
        self.final_eval
            .map(|e| e.loss)
            .or_else(|| self.losses.last().copied())
            .unwrap_or(f64::NAN)
    }

    pub fn write_loss_csv<W: Write + ?Sized>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "step,loss")?;
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(w, "{i},{l:e}")?;
        }
        Ok(())
    }

    /// Snapshot CSV for one layer: `step,index,omega,amplitude,phase_q,phase_k`.
    pub fn write_snapshot_csv<W: Write + ?Sized>(&self, layer: usize, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "step,index,omega,amplitude,phase_q,phase_k")?;
        for s in &self.snapshots {
            if let Some(b) = s.bases.get(layer) {
                b.write_csv_rows(w, Some(s.step))?;
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.snapshots.first().map_or(0, |s| s.bases.len())
    }
}

pub fn read_loss_csv<R: BufRead>(r: R) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if n == 0 || line.trim().is_empty() {
            continue;
        }
        let (step, loss) = line
            .split_once(',')
            .ok_or_else(|| SrplError::format(format!("loss csv line {}: expected two columns", n + 1)))?;
        if step.trim().parse::<usize>().ok() != Some(out.len()) {
            return Err(SrplError::format(format!("loss csv line {}: steps out of order", n + 1)));
        }
        out.push(
            loss.trim()
                .parse()
                .map_err(|_| SrplError::format(format!("loss csv line {}: bad value", n + 1)))?,
        );
    }
    Ok(out)
}

/// Parses per-layer snapshot CSVs back into `(step, bases)` records.
pub fn read_snapshot_csvs<R: BufRead>(layers: Vec<R>) -> Result<Vec<BasisSnapshot>> {
    let mut per_layer: Vec<Vec<(usize, SpectralBasis)>> = Vec::new();
    for r in layers {
        let mut groups: Vec<(usize, String)> = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if n == 0 || line.trim().is_empty() {
                continue;
            }
            let (step, rest) = line
                .split_once(',')
                .ok_or_else(|| SrplError::format(format!("snapshot csv line {}: malformed", n + 1)))?;
            let step: usize = step
                .trim()
                .parse()
                .map_err(|_| SrplError::format(format!("snapshot csv line {}: bad step", n + 1)))?;
            match groups.last_mut() {
                Some((s, body)) if *s == step => {
                    body.push_str(rest);
                    body.push('\n');
                }
                _ => groups.push((step, format!("index,omega,amplitude,phase_q,phase_k\n{rest}\n"))),
            }
        }
        per_layer.push(
            groups
                .into_iter()
                .map(|(s, body)| Ok((s, SpectralBasis::read_csv(body.as_bytes())?)))
                .collect::<Result<_>>()?,
        );
    }
    let Some(first) = per_layer.first() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::with_capacity(first.len());
    for (i, (step, _)) in first.iter().enumerate() {
        let mut bases = Vec::with_capacity(per_layer.len());
        for layer in &per_layer {
            match layer.get(i) {
                Some((s, b)) if s == step => bases.push(b.clone()),
                _ => return Err(SrplError::format("snapshot files disagree on steps")),
            }
        }
        out.push(BasisSnapshot { step: *step, bases });
    }
    Ok(out)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const EVAL_BIT: u64 = 1 << 63;

/// Seed of the `index`-th training sample; the top bit is always clear.
pub fn train_sample_seed(run_seed: u64, index: u64) -> u64 {
    splitmix(splitmix(run_seed) ^ index) & !EVAL_BIT
}

/// Seed of the `index`-th evaluation sample; the top bit is always set, so
/// evaluation seeds never coincide with training seeds.
pub fn eval_sample_seed(run_seed: u64, index: u64) -> u64 {
    splitmix(splitmix(run_seed) ^ index.rotate_left(32) ^ 0xE7A1) | EVAL_BIT
}

/// Packs `samples` and records the batch's target-region loss on `tape`.
/// Returns the loss and the logits (one row per target position).
pub fn loss_on_tape(model: &Model, tape: &mut Tape, vars: &ParamVars, samples: &[TaskSample]) -> Result<(Var, Var)> {
    let seqs: Vec<&[usize]> = samples.iter().map(|s| s.input_tokens.as_slice()).collect();
    let outputs: Vec<Vec<usize>> = samples.iter().map(TaskSample::target_positions).collect();
    let all = samples
        .iter()
        .zip(&outputs)
        .all(|(s, o)| o.len() == s.input_tokens.len());
    let targets: Vec<usize> = samples
        .iter()
        .zip(&outputs)
        .flat_map(|(s, o)| o.iter().map(|&p| s.target_tokens[p]))
        .collect();
    let mut batch = PackedBatch::new(&seqs);
    if !all {
        batch = batch.with_outputs(outputs)?;
    }
    let out = model.forward_on_tape(tape, vars, &batch)?;
    let loss = tape.cross_entropy(out.logits, &targets)?;
    Ok((loss, out.logits))
}

fn offending_group(model: &Model, tape: &Tape, vars: &ParamVars) -> String {
    for i in 0..vars.len() {
        let bad_grad = tape.grad(vars.slot(i)).is_some_and(|g| g.iter().any(|v| !v.is_finite()));
        let bad_value = model.slot_data(i).iter().any(|v| !v.is_finite());
        if bad_grad || bad_value {
            return model.slot_name(i);
        }
    }
    "forward activations".into()
}

/// Trains `model` in place on fresh samples each step.
pub fn train(model: &mut Model, task: &TaskSpec, cfg: &TrainConfig) -> Result<RunHistory> {
    cfg.validate()?;
    if model.config().vocab_size != task.vocab_size() {
        return Err(SrplError::contract(format!(
            "model vocabulary {} does not match task vocabulary {}",
            model.config().vocab_size,
            task.vocab_size()
        )));
    }
    if task.max_len() > model.config().max_seq_len {
        return Err(SrplError::contract(format!(
            "task sequences up to {} exceed max_seq_len {}",
            task.max_len(),
            model.config().max_seq_len
        )));
    }
    let mut states: Vec<AdamState> = (0..model.num_slots()).map(|i| AdamState::new(model.slot_data(i).len())).collect();
    let mut history = RunHistory {
        task: task.kind,
        engine: model.engine(),
        seed: cfg.seed,
        losses: Vec::with_capacity(cfg.steps),
        snapshots: vec![BasisSnapshot {
            step: 0,
            bases: model.bases(),
        }],
        final_eval: None,
    };
    for step in 0..cfg.steps {
        let samples = (0..cfg.batch_size)
            .map(|b| task.sample(train_sample_seed(cfg.seed, (step * cfg.batch_size + b) as u64)))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, model);
        let loss = match loss_on_tape(model, &mut tape, &vars, &samples) {
            Ok((loss, _)) => loss,
            Err(SrplError::NonFinite { op }) => {
                return Err(SrplError::Numeric {
                    step,
                    group: format!("{} (non-finite output of {op})", offending_group(model, &tape, &vars)),
                })
            }
            Err(e) => return Err(e),
        };
        let value = tape.value(loss)[0];
        tape.backward(loss)?;
        if !value.is_finite() {
            return Err(SrplError::Numeric {
                step,
                group: offending_group(model, &tape, &vars),
            });
        }
        history.losses.push(value);
        for (i, state) in states.iter_mut().enumerate().take(vars.len()) {
            if vars.is_alias(i) {
                continue;
            }
            let Some(grad) = tape.grad(vars.slot(i)) else {
                continue;
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(SrplError::Numeric {
                    step,
                    group: model.slot_name(i),
                });
            }
            let lr = if model.slot_group(i) == ParamGroup::Dense {
                cfg.learning_rate
            } else {
                cfg.basis_learning_rate
            };
            adam_step(model.slot_data_mut(i), grad, state, lr, cfg.adam_betas, cfg.adam_eps)?;
        }
        model.sync_tied_phases();
        if (step + 1) % cfg.snapshot_every == 0 {
            history.snapshots.push(BasisSnapshot {
                step: step + 1,
                bases: model.bases(),
            });
        }
    }
    if cfg.eval_samples > 0 {
        history.final_eval = Some(evaluate_batched(model, task, cfg.eval_samples, cfg.seed, cfg.batch_size)?);
    }
    Ok(history)
}

/// Held-out loss and exact-match accuracy on fresh evaluation seeds.
pub fn evaluate(model: &Model, task: &TaskSpec, n_samples: usize, seed: u64) -> Result<EvalResult> {
    evaluate_batched(model, task, n_samples, seed, 32)
}

fn evaluate_batched(model: &Model, task: &TaskSpec, n_samples: usize, seed: u64, batch: usize) -> Result<EvalResult> {
    if n_samples == 0 {
        return Err(SrplError::contract("evaluation needs at least one sample"));
    }
    let samples = (0..n_samples)
        .map(|i| task.sample(eval_sample_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut logits_per_sample = Vec::with_capacity(n_samples);
    for chunk in samples.chunks(batch.max(1)) {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, model);
        let (_, logits) = loss_on_tape(model, &mut tape, &vars, chunk)?;
        let vocab = model.config().vocab_size;
        let mut rows = tape.value(logits).chunks_exact(vocab);
        for s in chunk {
            let n = s.target_positions().len();
            logits_per_sample.push(rows.by_ref().take(n).flatten().copied().collect::<Vec<f64>>());
        }
    }
    score_logits(&samples, &logits_per_sample, model.config().vocab_size)
}

/// Scores per-sample target-region logits (`[targets × vocab]`, row-major).
pub fn score_logits(samples: &[TaskSample], logits: &[Vec<f64>], vocab: usize) -> Result<EvalResult> {
    if samples.len() != logits.len() || samples.is_empty() {
        return Err(SrplError::contract("one logits block per sample required"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let mut exact = 0usize;
    for (s, l) in samples.iter().zip(logits) {
        let positions = s.target_positions();
        if l.len() != positions.len() * vocab {
            return Err(SrplError::Dimension {
                op: "score_logits",
                lhs: vec![positions.len(), vocab],
                rhs: vec![l.len()],
            });
        }
        let mut all_right = true;
        for (row, &p) in l.chunks_exact(vocab).zip(&positions) {
            let t = s.target_tokens[p];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            count += 1;
            let argmax = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0;
            all_right &= argmax == t;
        }
        exact += all_right as usize;
    }
    Ok(EvalResult {
        loss: if count == 0 { 0.0 } else { total / count as f64 },
        accuracy: exact as f64 / samples.len() as f64,
        samples: samples.len(),
    })
}
