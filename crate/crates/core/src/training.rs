//! Two-stage training: a global-token bridge model first, then the exemplar
//! network and exemplar-attention modules with everything else frozen.
//!
//! One call to [`train_step`] processes one micro-batch. After
//! `accumulation` micro-batches the averaged gradient drives one AdamW step,
//! followed by an EMA update of the trainable parameters.
//!
//! Per-item draw order from the training stream: `t ~ U{1..T}`, then `ε`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bridge::{bridge_state, BridgeDraw};
use crate::error::{Error, Result};
use crate::networks::{
    group_of, ConditionedDenoiser, DenoiserConfig, Forward, NetworkWeights, ParamGroup,
};
use crate::rng::{RngState, RngStream};
use crate::sampler::{generate, InferencePlan};
use crate::schedule::BridgeSchedule;
use crate::synthdata::{style_recover, PairedSample, SyntheticDataset};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
        }
    }

    pub fn trains(self, name: &str) -> bool {
        matches!(
            (self, group_of(name)),
            (Stage::Stage1, ParamGroup::Encoder | ParamGroup::Backbone)
                | (
                    Stage::Stage2,
                    ParamGroup::ExemplarNet | ParamGroup::ExemplarAttention
                )
        )
    }

    /// Exemplar image fed to the conditioning branches: the target itself in
    /// Stage 1 (reconstruction), the paired exemplar in Stage 2.
    pub fn exemplar_of(self, sample: &PairedSample) -> &Tensor {
        match self {
            Stage::Stage1 => &sample.target,
            Stage::Stage2 => &sample.exemplar,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub accumulation: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    /// Validation every this many optimizer steps (0 disables).
    pub val_every: u64,
    pub val_size: usize,
    pub patience: usize,
    pub lr_gamma: f64,
    pub min_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch: 8,
            accumulation: 2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            ema_decay: 0.999,
            val_every: 100,
            val_size: 32,
            patience: 3,
            lr_gamma: 0.2,
            min_lr: 1e-7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if self.batch == 0 || self.accumulation == 0 {
            return fail("batch and accumulation must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return fail("ema_decay must lie in [0, 1]");
        }
        let positive = |v: f64| v > 0.0;
        if !positive(self.adam_eps) || self.weight_decay < 0.0 {
            return fail("adam_eps must be positive and weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.lr_gamma)
            || !positive(self.lr_gamma)
            || !positive(self.min_lr)
        {
            return fail("lr_gamma must lie in (0, 1) and min_lr be positive");
        }
        Ok(())
    }
}

/// One record of the metrics stream, written per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: u8,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub ema_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    /// Best validation loss so far; `None` before the first check.
    pub best: Option<f64>,
    pub bad_checks: usize,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    /// Optimizer steps taken over all stages.
    pub step: u64,
    /// Optimizer steps in the current stage, used for bias correction.
    pub stage_step: u64,
    pub stage: Stage,
    pub lr: f64,
    pub plateau: Plateau,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub ema: NetworkWeights,
    pub rng: RngStream,
    val_rng: RngStream,
    grad_acc: BTreeMap<String, Tensor>,
    loss_acc: f64,
    pending: usize,
}

/// Outcome of one micro-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroStep {
    pub loss: f64,
    pub timesteps: Vec<usize>,
    /// Present when this micro-batch closed an accumulation window.
    pub record: Option<StepRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateFile {
    step: u64,
    stage_step: u64,
    stage: Stage,
    lr: f64,
    plateau: Plateau,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, weights: &NetworkWeights, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            step: 0,
            stage_step: 0,
            stage: Stage::Stage1,
            lr: cfg.lr,
            plateau: Plateau {
                best: None,
                bad_checks: 0,
            },
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            ema: weights.clone(),
            rng: RngStream::named(seed, "train"),
            val_rng: RngStream::named(seed, "val"),
            grad_acc: BTreeMap::new(),
            loss_acc: 0.0,
            pending: 0,
        })
    }

    /// Micro-batches accumulated in the open window.
    pub fn pending(&self) -> usize {
        self.pending
    }

    /// Writes `state.json`, `rng.json`, `ema.*`, `moments_m.*` and `moments_v.*`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        if self.pending != 0 {
            return Err(Error::InvalidArgument(
                "cannot checkpoint inside an accumulation window".into(),
            ));
        }
        let file = StateFile {
            step: self.step,
            stage_step: self.stage_step,
            stage: self.stage,
            lr: self.lr,
            plateau: self.plateau,
        };
        fs::write(dir.join("state.json"), serde_json::to_string_pretty(&file)?)?;
        let rngs: BTreeMap<&str, RngState> =
            [("train", self.rng.state()), ("val", self.val_rng.state())]
                .into_iter()
                .collect();
        fs::write(dir.join("rng.json"), serde_json::to_string_pretty(&rngs)?)?;
        self.ema.save(dir, "ema")?;
        let as_weights = |map: &BTreeMap<String, Tensor>| {
            let mut w = NetworkWeights::default();
            for (n, t) in map {
                w.insert(n.clone(), t.clone());
            }
            w
        };
        as_weights(&self.m).save(dir, "moments_m")?;
        as_weights(&self.v).save(dir, "moments_v")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let file: StateFile = serde_json::from_str(&fs::read_to_string(dir.join("state.json"))?)?;
        let rngs: BTreeMap<String, RngState> =
            serde_json::from_str(&fs::read_to_string(dir.join("rng.json"))?)?;
        let rng_of = |k: &str| {
            rngs.get(k)
                .ok_or_else(|| Error::InvalidArgument(format!("rng.json lacks `{k}`")))
                .and_then(RngStream::from_state)
        };
        let to_map = |w: NetworkWeights| w.iter().map(|(n, t)| (n.clone(), t.clone())).collect();
        Ok(Self {
            step: file.step,
            stage_step: file.stage_step,
            stage: file.stage,
            lr: file.lr,
            plateau: file.plateau,
            m: to_map(NetworkWeights::load(dir, "moments_m")?),
            v: to_map(NetworkWeights::load(dir, "moments_v")?),
            ema: NetworkWeights::load(dir, "ema")?,
            rng: rng_of("train")?,
            val_rng: rng_of("val")?,
            grad_acc: BTreeMap::new(),
            loss_acc: 0.0,
            pending: 0,
        })
    }
}

/// `c_eps[t] · mean((target − pred)²)`.
pub fn weighted_loss(
    sched: &BridgeSchedule,
    t: usize,
    target: &Tensor,
    pred: &Tensor,
) -> Result<f64> {
    let w = sched.loss_weight(t)?.value;
    Ok(w * target.sub(pred)?.sq_norm() / target.numel() as f64)
}

/// Loss and parameter gradients for one item with a given draw.
pub fn item_loss_and_grads(
    weights: &NetworkWeights,
    net: &DenoiserConfig,
    sched: &BridgeSchedule,
    stage: Stage,
    sample: &PairedSample,
    draw: &BridgeDraw,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let target = draw.x_t.sub(&sample.target)?;
    let weight = sched.loss_weight(draw.t)?.value;
    let mut f = Forward::new(weights, net, move |n| stage.trains(n));
    let x = f.graph.constant(draw.x_t.clone());
    let ex = f.graph.constant(stage.exemplar_of(sample).clone());
    let token = f.global_encode(ex)?;
    let feats = match stage {
        Stage::Stage1 => None,
        Stage::Stage2 => Some(f.exemplar_net(ex, 0, token)?),
    };
    let pred = f.denoise(x, draw.t, token, feats.as_deref())?;
    let g = f.graph.constant(target);
    let diff = f.graph.sub(pred, g)?;
    let sq = f.graph.mul(diff, diff)?;
    let total = f.graph.sum(sq);
    let n = f.graph.value(diff).numel() as f64;
    let loss = f.graph.scale(total, weight / n);
    let value = f.graph.value(loss).item()?;
    if !value.is_finite() {
        return Ok((value, BTreeMap::new()));
    }
    let grads = f.graph.backward(loss)?;
    Ok((value, f.param_grads(&grads)))
}

/// Loss without gradients, for evaluation.
pub fn item_loss(
    weights: &NetworkWeights,
    net: &DenoiserConfig,
    sched: &BridgeSchedule,
    stage: Stage,
    sample: &PairedSample,
    draw: &BridgeDraw,
) -> Result<f64> {
    let mut f = Forward::inference(weights, net);
    let x = f.graph.constant(draw.x_t.clone());
    let ex = f.graph.constant(stage.exemplar_of(sample).clone());
    let token = f.global_encode(ex)?;
    let feats = match stage {
        Stage::Stage1 => None,
        Stage::Stage2 => Some(f.exemplar_net(ex, 0, token)?),
    };
    let pred = f.denoise(x, draw.t, token, feats.as_deref())?;
    let pred = f.graph.value(pred).clone();
    weighted_loss(sched, draw.t, &draw.x_t.sub(&sample.target)?, &pred)
}

fn draw_item(
    sched: &BridgeSchedule,
    sample: &PairedSample,
    rng: &mut RngStream,
) -> Result<BridgeDraw> {
    let t = rng.int_inclusive(1, sched.steps());
    let eps = Tensor::randn(sample.target.shape(), rng);
    let x_t = bridge_state(sched, &sample.target, &sample.control, &eps, t)?;
    Ok(BridgeDraw { x_t, eps, t })
}

/// Mean loss over `samples` with draws from a clone of `rng`, so repeated
/// calls with the same stream see identical `(t, ε)`.
pub fn evaluate(
    weights: &NetworkWeights,
    net: &DenoiserConfig,
    sched: &BridgeSchedule,
    stage: Stage,
    samples: &[PairedSample],
    rng: &RngStream,
) -> Result<f64> {
    let mut rng = rng.clone();
    let mut total = 0.0;
    for s in samples {
        let draw = draw_item(sched, s, &mut rng)?;
        total += item_loss(weights, net, sched, stage, s, &draw)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Processes one micro-batch; closes the accumulation window when full.
pub fn train_step(
    state: &mut TrainState,
    weights: &mut NetworkWeights,
    net: &DenoiserConfig,
    sched: &BridgeSchedule,
    cfg: &TrainConfig,
    batch: &[PairedSample],
) -> Result<MicroStep> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let rng_before = state.rng.state();
    let scale = 1.0 / (batch.len() * cfg.accumulation) as f64;
    let mut timesteps = Vec::with_capacity(batch.len());
    let mut loss = 0.0;
    for sample in batch {
        let draw = draw_item(sched, sample, &mut state.rng)?;
        timesteps.push(draw.t);
        let (l, grads) = item_loss_and_grads(weights, net, sched, state.stage, sample, &draw)?;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: state.step,
                timesteps,
                rng: serde_json::to_string(&rng_before)?,
            });
        }
        loss += l;
        for (name, g) in grads {
            match state.grad_acc.get_mut(&name) {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * v;
                    }
                }
                None => {
                    state.grad_acc.insert(name, g.map(|v| scale * v));
                }
            }
        }
    }
    loss /= batch.len() as f64;
    state.loss_acc += loss / cfg.accumulation as f64;
    state.pending += 1;
    let record = if state.pending == cfg.accumulation {
        let grads = std::mem::take(&mut state.grad_acc);
        let grad_norm = grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt();
        optimizer_step(state, weights, cfg, &grads)?;
        ema_update(state, weights, cfg.ema_decay);
        state.step += 1;
        state.stage_step += 1;
        let rec = StepRecord {
            step: state.step,
            stage: state.stage.number(),
            loss: state.loss_acc,
            lr: state.lr,
            grad_norm,
            ema_decay: cfg.ema_decay,
        };
        state.loss_acc = 0.0;
        state.pending = 0;
        Some(rec)
    } else {
        None
    };
    Ok(MicroStep {
        loss,
        timesteps,
        record,
    })
}

/// AdamW with decoupled weight decay on the parameters present in `grads`.
pub fn optimizer_step(
    state: &mut TrainState,
    weights: &mut NetworkWeights,
    cfg: &TrainConfig,
    grads: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let k = (state.stage_step + 1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(k);
    let bc2 = 1.0 - cfg.beta2.powi(k);
    for (name, g) in grads {
        if !state.stage.trains(name) {
            return Err(Error::InvalidArgument(format!(
                "gradient for frozen parameter `{name}`"
            )));
        }
        let p = weights.get_mut(name)?;
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pi, mi), vi), gi) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
            .zip(g.data())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let update = (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.adam_eps);
            *pi -= state.lr * (update + cfg.weight_decay * *pi);
        }
    }
    Ok(())
}

/// `shadow ← d·shadow + (1 − d)·w` for the current stage's trainable parameters.
pub fn ema_update(state: &mut TrainState, weights: &NetworkWeights, decay: f64) {
    let stage = state.stage;
    for (name, shadow) in state.ema.iter_mut() {
        if !stage.trains(name) {
            continue;
        }
        if let Ok(w) = weights.get(name) {
            for (s, v) in shadow.data_mut().iter_mut().zip(w.data()) {
                *s = decay * *s + (1.0 - decay) * v;
            }
        }
    }
}

/// Stage 1 → Stage 2 only, after at least one Stage-1 optimizer step.
/// Copies the backbone into the exemplar network, resets the optimizer
/// moments and the plateau tracker.
pub fn set_stage(state: &mut TrainState, weights: &mut NetworkWeights, stage: Stage) -> Result<()> {
    if stage == state.stage {
        return Ok(());
    }
    if state.pending != 0 {
        return Err(Error::StageTransition(
            "accumulation window still open".into(),
        ));
    }
    match (state.stage, stage) {
        (Stage::Stage1, Stage::Stage2) if state.step > 0 => {}
        (Stage::Stage1, Stage::Stage2) => {
            return Err(Error::StageTransition(
                "Stage 2 needs a trained Stage 1 model".into(),
            ))
        }
        (from, to) => return Err(Error::StageTransition(format!("{from:?} -> {to:?}"))),
    }
    weights.copy_backbone_into_exemplar_net();
    for (name, t) in weights.iter() {
        if group_of(name) == ParamGroup::ExemplarNet {
            state.ema.insert(name.clone(), t.clone());
        }
    }
    state.stage = stage;
    state.stage_step = 0;
    state.m.clear();
    state.v.clear();
    state.plateau = Plateau {
        best: None,
        bad_checks: 0,
    };
    Ok(())
}

/// Plateau rule: after `patience` consecutive checks without improvement the
/// learning rate is multiplied by `gamma`, floored at `min_lr`. Returns
/// whether the rate changed.
pub fn plateau_check(state: &mut TrainState, cfg: &TrainConfig, val_loss: f64) -> bool {
    if state.plateau.best.is_none_or(|b| val_loss < b) {
        state.plateau.best = Some(val_loss);
        state.plateau.bad_checks = 0;
        return false;
    }
    state.plateau.bad_checks += 1;
    if state.plateau.bad_checks > cfg.patience {
        state.plateau.bad_checks = 0;
        let next = (state.lr * cfg.lr_gamma).max(cfg.min_lr);
        let changed = next != state.lr;
        state.lr = next;
        return changed;
    }
    false
}

/// Runs `steps` optimizer steps of the current stage on the training split,
/// validating every `val_every` steps. `sink` sees every record and the
/// validation loss when one was computed.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    state: &mut TrainState,
    weights: &mut NetworkWeights,
    net: &DenoiserConfig,
    sched: &BridgeSchedule,
    cfg: &TrainConfig,
    data: &SyntheticDataset,
    steps: u64,
    sink: &mut dyn FnMut(&StepRecord, Option<f64>) -> Result<()>,
) -> Result<()> {
    let train = data.train_indices();
    let val: Vec<PairedSample> = data
        .val_indices()
        .iter()
        .take(cfg.val_size)
        .map(|&i| data.sample(i))
        .collect();
    for _ in 0..steps {
        loop {
            let batch: Vec<PairedSample> = (0..cfg.batch)
                .map(|_| data.sample(train[state.rng.int_inclusive(0, train.len() - 1)]))
                .collect();
            if let Some(rec) = train_step(state, weights, net, sched, cfg, &batch)?.record {
                let val_loss =
                    if cfg.val_every > 0 && rec.step % cfg.val_every == 0 && !val.is_empty() {
                        let l = evaluate(weights, net, sched, state.stage, &val, &state.val_rng)?;
                        plateau_check(state, cfg, l);
                        Some(l)
                    } else {
                        None
                    };
                sink(&rec, val_loss)?;
                break;
            }
        }
    }
    Ok(())
}

/// Relative amplitude error `|â − a| / a` of generated outputs, one per
/// sample. Each output is generated from the sample's control and exemplar;
/// `â` is recovered on the control's support.
#[allow(clippy::too_many_arguments)]
pub fn style_errors(
    weights: &NetworkWeights,
    net: &DenoiserConfig,
    sched: &BridgeSchedule,
    plan: &InferencePlan,
    samples: &[PairedSample],
    use_exemplar_net: bool,
    contrast: f64,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let model = ConditionedDenoiser::new(weights, net, &s.exemplar, use_exemplar_net)?;
            let out = generate(sched, plan, &model, &s.control, rng)?;
            let est = style_recover(&out, &s.control, contrast)?;
            Ok((est.amplitude - s.style.amplitude).abs() / s.style.amplitude)
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}
