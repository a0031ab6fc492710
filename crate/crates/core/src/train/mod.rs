//! Teacher training on complete windows and student training on masked
//! views, jointly or in stages, with optional ablations.

mod bundle;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use bundle::{ModelBundle, Role};

use crate::data::{mask_window, Dataset, WindowSample};
use crate::error::{MerlinError, Result};
use crate::eval::{evaluate_rates, EvalConfig};
use crate::losses::{
    loss_cl, loss_hd_kl, loss_pre, loss_total, project, view_error_sum, HiddenLoss, LossTerms, LossValues,
    MerlinConfig, PointLoss, ProjectionParams,
};
use crate::model::{Mode, StidConfig, StidParams};
use crate::optim::{clip_global_norm, AdamState, OptimizerConfig};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Joint,
    TwoStage,
    ThreeStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    WoHd,
    WoRd,
    WoKd,
    WoCl,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::WoHd, Ablation::WoRd, Ablation::WoKd, Ablation::WoCl];

    pub fn needs_teacher(self) -> bool {
        self != Ablation::WoKd
    }
}

macro_rules! str_enum {
    ($ty:ty, $($variant:path => $name:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = MerlinError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(MerlinError::Usage(format!(
                        "unknown value {other:?}, expected one of: {}",
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}

str_enum!(TrainMode, TrainMode::Joint => "joint", TrainMode::TwoStage => "two_stage", TrainMode::ThreeStage => "three_stage");
str_enum!(Ablation, Ablation::WoHd => "wo_hd", Ablation::WoRd => "wo_rd", Ablation::WoKd => "wo_kd", Ablation::WoCl => "wo_cl");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub ablation: Option<Ablation>,
    /// Validation runs every `eval_every` epochs and always after the last.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 101,
            batch_size: 16,
            seed: 0,
            mode: TrainMode::Joint,
            ablation: None,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(MerlinError::Config(
                "epochs, batch_size and eval_every must be at least 1".into(),
            ));
        }
        if self.mode != TrainMode::Joint && self.epochs < stage_count(self.mode) {
            return Err(MerlinError::Config(format!(
                "{} needs at least {} epochs",
                self.mode,
                stage_count(self.mode)
            )));
        }
        Ok(())
    }
}

/// Which loss terms a training phase optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Joint,
    Contrastive,
    Distill,
    Supervised,
    DistillSupervised,
}

fn stage_count(mode: TrainMode) -> usize {
    match mode {
        TrainMode::Joint => 1,
        TrainMode::TwoStage => 2,
        TrainMode::ThreeStage => 3,
    }
}

/// Epochs per stage: equal shares rounded down, remainder to the last.
pub fn stage_lengths(mode: TrainMode, epochs: usize) -> Vec<usize> {
    let k = stage_count(mode);
    let share = epochs / k;
    let mut out = vec![share; k];
    out[k - 1] = epochs - share * (k - 1);
    out
}

/// Stage in force at a 1-based epoch.
pub fn stage_at(mode: TrainMode, epochs: usize, epoch: usize) -> Stage {
    let stages: &[Stage] = match mode {
        TrainMode::Joint => &[Stage::Joint],
        TrainMode::TwoStage => &[Stage::Contrastive, Stage::DistillSupervised],
        TrainMode::ThreeStage => &[Stage::Contrastive, Stage::Distill, Stage::Supervised],
    };
    let mut end = 0;
    for (len, &stage) in stage_lengths(mode, epochs).into_iter().zip(stages) {
        end += len;
        if epoch <= end {
            return stage;
        }
    }
    *stages.last().expect("at least one stage")
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Active {
    pre: bool,
    hd: bool,
    rd: bool,
    cl: bool,
}

impl Active {
    fn any(&self) -> bool {
        self.pre || self.hd || self.rd || self.cl
    }
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossValues,
    pub total: f64,
    pub val_mae: Option<f64>,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,l_pre,l_hd,l_rd,l_cl,total,val_mae,seconds";

pub fn log_to_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in log {
        let val = r.val_mae.map_or_else(String::new, |v| v.to_string());
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.6}\n",
            r.epoch, r.lr, r.losses.pre, r.losses.hd, r.losses.rd, r.losses.cl, r.total, val, r.seconds
        ));
    }
    s
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot at the epoch with the lowest validation MAE.
    pub best: ModelBundle,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    /// State after the final epoch.
    pub last: ModelBundle,
    pub log: Vec<EpochLog>,
}

/// What one optimization step produced.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub losses: LossValues,
    pub total: f64,
    pub grads: Vec<Tensor>,
    /// Teacher tensors that received a gradient; always zero.
    pub teacher_grads: usize,
}

fn stack_refs<'a>(parts: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let parts: Vec<Tensor> = parts.cloned().collect();
    Tensor::stack(&parts)
}

fn check_same_shape(a: &StidConfig, b: &StidConfig, what: &str) -> Result<()> {
    let dims = |c: &StidConfig| {
        [c.n_vars, c.n_history, c.n_future, c.n_channels, c.steps_per_day, c.embed_dim, c.layers]
    };
    if dims(a) != dims(b) {
        return Err(MerlinError::Config(format!(
            "{what}: [n_vars, n_history, n_future, n_channels, steps_per_day, embed_dim, layers] = {:?} vs {:?}",
            dims(a),
            dims(b)
        )));
    }
    Ok(())
}

fn check_data(config: &StidConfig, data: &Dataset) -> Result<()> {
    if data.train.is_empty() {
        return Err(MerlinError::Config("training split holds no full window".into()));
    }
    if data.val.is_empty() {
        return Err(MerlinError::Config("validation split holds no full window".into()));
    }
    let w = &data.train[0];
    let data_dims = [w.n_vars(), w.x.shape()[1], w.y.shape()[1], data.test_frame.steps_per_day()];
    let model_dims = [config.n_vars, config.n_history, config.n_future, config.steps_per_day];
    if data_dims != model_dims {
        return Err(MerlinError::Config(format!(
            "data [n_vars, n_history, n_future, steps_per_day] = {data_dims:?}, model expects {model_dims:?}"
        )));
    }
    Ok(())
}

/// Drives training of one model, teacher or student.
pub struct Trainer<'a> {
    data: &'a Dataset,
    cfg: TrainConfig,
    opt: OptimizerConfig,
    merlin: MerlinConfig,
    teacher: Option<&'a StidParams>,
    state: ModelBundle,
    log: Vec<EpochLog>,
    best: Option<(f64, usize, ModelBundle)>,
}

impl<'a> Trainer<'a> {
    /// Supervised L1 training on the (possibly premasked) complete windows.
    pub fn teacher(data: &'a Dataset, config: &StidConfig, cfg: &TrainConfig, opt: &OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        opt.validate()?;
        check_data(config, data)?;
        let model = StidParams::init(config, derive_seed(cfg.seed, &[0x7eac]))?;
        let adam = AdamState::new(model.named().into_iter().map(|(_, t)| t));
        Ok(Self {
            data,
            cfg: TrainConfig { mode: TrainMode::Joint, ablation: None, ..cfg.clone() },
            opt: opt.clone(),
            merlin: MerlinConfig::default(),
            teacher: None,
            state: ModelBundle {
                role: Role::Teacher,
                model,
                proj: None,
                stats: data.stats.clone(),
                premask_rate: data.premask_rate,
                adam: Some(adam),
                epochs_done: 0,
            },
            log: Vec::new(),
            best: None,
        })
    }

    /// Student trained on masked views; `teacher` may be `None` only for
    /// the no-distillation ablation.
    pub fn student(
        data: &'a Dataset,
        teacher: Option<&'a StidParams>,
        config: &StidConfig,
        cfg: &TrainConfig,
        opt: &OptimizerConfig,
        merlin: &MerlinConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        opt.validate()?;
        merlin.validate(config.hidden_dim())?;
        check_data(config, data)?;
        let needs_teacher = cfg.ablation.is_none_or(Ablation::needs_teacher);
        let teacher = if needs_teacher {
            let t = teacher.ok_or_else(|| MerlinError::Config("student training needs a teacher".into()))?;
            check_same_shape(&t.config, config, "teacher/student shape mismatch")?;
            Some(t)
        } else {
            None
        };
        let model = StidParams::init(config, derive_seed(cfg.seed, &[0x5700]))?;
        let proj = ProjectionParams::init(config.hidden_dim(), merlin.proj_dim, derive_seed(cfg.seed, &[0x960]));
        let mut merlin = merlin.clone();
        if cfg.ablation == Some(Ablation::WoCl) {
            merlin.beta3 = 0.0;
        }
        let mut state = ModelBundle {
            role: Role::Student,
            model,
            proj: Some(proj),
            stats: data.stats.clone(),
            premask_rate: data.premask_rate,
            adam: None,
            epochs_done: 0,
        };
        state.adam = Some(AdamState::new(
            state
                .model
                .named()
                .into_iter()
                .chain(state.proj.as_ref().expect("student has a head").named())
                .map(|(_, t)| t),
        ));
        let trainer = Self {
            data,
            cfg: cfg.clone(),
            opt: opt.clone(),
            merlin,
            teacher,
            state,
            log: Vec::new(),
            best: None,
        };
        for epoch in 1..=cfg.epochs {
            if !trainer.active(epoch).any() {
                return Err(MerlinError::Config(format!(
                    "epoch {epoch} ({:?} stage) has no active loss term",
                    stage_at(cfg.mode, cfg.epochs, epoch)
                )));
            }
        }
        Ok(trainer)
    }

    /// Replaces the fresh state with a saved one, e.g. to continue training.
    pub fn resume(mut self, bundle: ModelBundle) -> Result<Self> {
        if bundle.role != self.state.role {
            return Err(MerlinError::Config("checkpoint role does not match trainer".into()));
        }
        check_same_shape(&bundle.model.config, &self.state.model.config, "resume shape mismatch")?;
        if bundle.adam.is_none() {
            return Err(MerlinError::Config("checkpoint carries no optimizer state".into()));
        }
        self.state = bundle;
        Ok(self)
    }

    pub fn state(&self) -> &ModelBundle {
        &self.state
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    fn active(&self, epoch: usize) -> Active {
        let m = &self.merlin;
        if self.state.role == Role::Teacher {
            return Active { pre: true, ..Active::default() };
        }
        let stage = stage_at(self.cfg.mode, self.cfg.epochs, epoch);
        let (pre, kd, cl) = match stage {
            Stage::Joint => (true, true, true),
            Stage::Contrastive => (false, false, true),
            Stage::Distill => (false, true, false),
            Stage::Supervised => (true, false, false),
            Stage::DistillSupervised => (true, true, false),
        };
        let ab = self.cfg.ablation;
        let kd = kd && self.teacher.is_some() && m.beta2 > 0.0;
        let views = m.rates.len() + usize::from(ab == Some(Ablation::WoKd));
        Active {
            pre: pre && m.beta1 > 0.0,
            hd: kd && ab != Some(Ablation::WoHd),
            rd: kd && ab != Some(Ablation::WoRd),
            cl: cl && m.beta3 > 0.0 && views >= 2,
        }
    }

    fn param_refs(state: &mut ModelBundle) -> Vec<&mut Tensor> {
        let mut params = state.model.tensors_mut();
        if let Some(p) = state.proj.as_mut() {
            params.extend(p.tensors_mut());
        }
        params
    }

    /// Loss and gradients for one batch at a 1-based epoch.
    pub fn step(&self, batch: &[&WindowSample], epoch: usize, batch_index: usize) -> Result<StepResult> {
        let active = self.active(epoch);
        let tape = Tape::new();
        let student = self.state.model.bind(&tape, true);
        let proj = self.state.proj.as_ref().map(|p| p.bind(&tape));
        let mut trainable = student.vars();
        if let Some(p) = &proj {
            trainable.extend(p.vars());
        }
        let tod: Vec<usize> = batch.iter().map(|w| w.tod).collect();
        let dow: Vec<usize> = batch.iter().map(|w| w.dow).collect();
        let y_true = tape.constant(stack_refs(batch.iter().map(|w| &w.y))?);
        let clean = stack_refs(batch.iter().map(|w| &w.x))?;
        let mut drop_rng = rng_from(self.cfg.seed, &[0xd809, epoch as u64, batch_index as u64]);

        if self.state.role == Role::Teacher {
            let out = student.forward(tape.constant(clean), &tod, &dow, Mode::Train, &mut drop_rng)?;
            let pre = loss_pre(y_true, &[out.y], PointLoss::L1)?;
            let grads = tape.backward(pre)?;
            let value = pre.value().item();
            return Ok(StepResult {
                losses: LossValues { pre: value, ..LossValues::default() },
                total: value,
                grads: trainable.iter().map(|v| grads.get_or_zeros(v)).collect(),
                teacher_grads: 0,
            });
        }

        let mut teacher_vars = Vec::new();
        let teacher_out = match self.teacher {
            Some(t) if active.hd || active.rd => {
                let bound = t.bind(&tape, false);
                teacher_vars = bound.vars();
                let mut unused = rng_from(0, &[]);
                Some(bound.forward(tape.constant(clean.clone()), &tod, &dow, Mode::Eval, &mut unused)?)
            }
            _ => None,
        };

        let plan_seed = derive_seed(self.cfg.seed, &[0x3a5c, epoch as u64]);
        let mut ys = Vec::with_capacity(self.merlin.rates.len());
        let mut hs = Vec::with_capacity(self.merlin.rates.len());
        for &rate in &self.merlin.rates {
            let views = batch
                .iter()
                .map(|w| Ok(mask_window(w, rate, plan_seed, &self.data.fills)?.0))
                .collect::<Result<Vec<_>>>()?;
            let out = student.forward(tape.constant(Tensor::stack(&views)?), &tod, &dow, Mode::Train, &mut drop_rng)?;
            ys.push(out.y);
            hs.push(out.h_final);
        }

        let mut terms = LossTerms::default();
        if active.pre {
            terms.pre = Some(loss_pre(y_true, &ys, self.merlin.supervised_kind())?);
        }
        if let Some(t) = &teacher_out {
            if active.hd {
                terms.hd = Some(match self.merlin.hd_loss {
                    HiddenLoss::Mse => view_error_sum("loss_hd", t.h_final, &hs, self.merlin.distill_kind())?,
                    HiddenLoss::Kl => loss_hd_kl(t.h_final, &hs, self.merlin.tau_kl)?,
                });
            }
            if active.rd {
                terms.rd = Some(view_error_sum("loss_rd", t.y, &ys, self.merlin.distill_kind())?);
            }
        }
        if active.cl {
            let head = proj.as_ref().expect("student has a head");
            let mut cl_views: Vec<Var<'_>> = Vec::with_capacity(hs.len() + 1);
            if self.cfg.ablation == Some(Ablation::WoKd) {
                let out = student.forward(tape.constant(clean), &tod, &dow, Mode::Train, &mut drop_rng)?;
                cl_views.push(project(out.h_final, head)?);
            }
            for h in &hs {
                cl_views.push(project(*h, head)?);
            }
            terms.cl = Some(loss_cl(&cl_views, self.merlin.tau)?);
        }

        let total = loss_total(&terms, &self.merlin, epoch)?;
        let grads = tape.backward(total)?;
        Ok(StepResult {
            losses: terms.values(),
            total: total.value().item(),
            grads: trainable.iter().map(|v| grads.get_or_zeros(v)).collect(),
            teacher_grads: teacher_vars.iter().filter(|v| grads.contains(v)).count(),
        })
    }

    fn validation_mae(&self) -> Result<f64> {
        let rates: Vec<f64> = match self.state.role {
            Role::Teacher => vec![0.0],
            Role::Student => self.merlin.rates.clone(),
        };
        let cfg = EvalConfig { seed: derive_seed(self.cfg.seed, &[0x7a1]), ..EvalConfig::default() };
        let report = evaluate_rates(&self.state.model, &self.data.val, &self.data.stats, &self.data.fills, &rates, &cfg)?;
        Ok(report.mean_rate_mae())
    }

    /// Runs the next epoch and returns its log row.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let started = Instant::now();
        let epoch = self.state.epochs_done + 1;
        let lr = self.opt.schedule().lr_at_epoch(epoch)?;
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut rng_from(self.cfg.seed, &[0x5a1f, epoch as u64]));

        let mut sums = LossValues::default();
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &self.data.train[i]).collect();
            let mut step = self.step(&batch, epoch, b)?;
            if step.teacher_grads != 0 {
                return Err(MerlinError::Usage("gradient reached the frozen teacher".into()));
            }
            if !step.total.is_finite() {
                return Err(MerlinError::Data(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            if let Some(c) = self.opt.clip_norm {
                clip_global_norm(&mut step.grads, c)?;
            }
            let mut adam = self.state.adam.take().expect("trainer state carries Adam");
            let result = adam.step(&mut Self::param_refs(&mut self.state), &step.grads, &self.opt, lr);
            self.state.adam = Some(adam);
            result?;
            sums.pre += step.losses.pre;
            sums.hd += step.losses.hd;
            sums.rd += step.losses.rd;
            sums.cl += step.losses.cl;
            total += step.total;
            batches += 1;
        }
        let n = batches as f64;
        self.state.epochs_done = epoch;

        let val_mae = if epoch % self.cfg.eval_every == 0 || epoch == self.cfg.epochs {
            let v = self.validation_mae()?;
            if self.best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                self.best = Some((v, epoch, self.state.clone()));
            }
            Some(v)
        } else {
            None
        };
        let row = EpochLog {
            epoch,
            lr,
            losses: LossValues { pre: sums.pre / n, hd: sums.hd / n, rd: sums.rd / n, cl: sums.cl / n },
            total: total / n,
            val_mae,
            seconds: started.elapsed().as_secs_f64(),
        };
        self.log.push(row.clone());
        Ok(row)
    }

    /// Trains until `epochs` epochs are done in total.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.state.epochs_done < self.cfg.epochs {
            self.run_epoch()?;
        }
        let (best_val_mae, best_epoch, best) = match self.best {
            Some(b) => b,
            None => {
                let v = self.validation_mae()?;
                (v, self.state.epochs_done, self.state.clone())
            }
        };
        Ok(TrainOutcome { best, best_epoch, best_val_mae, last: self.state, log: self.log })
    }
}

/// Trains a teacher from scratch.
pub fn train_teacher(data: &Dataset, config: &StidConfig, cfg: &TrainConfig, opt: &OptimizerConfig) -> Result<TrainOutcome> {
    Trainer::teacher(data, config, cfg, opt)?.run()
}

/// Trains a student against `teacher` in the mode and ablation of `cfg`.
pub fn train_student(
    data: &Dataset,
    teacher: Option<&StidParams>,
    config: &StidConfig,
    cfg: &TrainConfig,
    opt: &OptimizerConfig,
    merlin: &MerlinConfig,
) -> Result<TrainOutcome> {
    Trainer::student(data, teacher, config, cfg, opt, merlin)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, DataConfig, SynthConfig};
    use crate::losses::loss_total_value;

    fn model_cfg() -> StidConfig {
        StidConfig { n_vars: 3, steps_per_day: 24, embed_dim: 8, layers: 1, ..StidConfig::default() }
    }

    fn dataset(days: usize, premask: f64) -> Dataset {
        let frame = synth_generate(3, days, 24, 3).unwrap();
        let cfg = DataConfig { steps_per_day: 24, premask_rate: premask, ..DataConfig::default() };
        Dataset::prepare(&frame, &cfg, 12, 12, 0).unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: 16, ..TrainConfig::default() }
    }

    fn fast_opt() -> OptimizerConfig {
        OptimizerConfig { lr: 2e-3, ..OptimizerConfig::default() }
    }

    fn teacher(data: &Dataset) -> StidParams {
        train_teacher(data, &model_cfg(), &quick(2), &fast_opt()).unwrap().best.model
    }

    #[test]
    fn stage_splits() {
        assert_eq!(stage_lengths(TrainMode::ThreeStage, 101), [33, 33, 35]);
        assert_eq!(stage_lengths(TrainMode::TwoStage, 101), [50, 51]);
        assert_eq!(stage_lengths(TrainMode::Joint, 101), [101]);
        assert_eq!(stage_at(TrainMode::ThreeStage, 101, 33), Stage::Contrastive);
        assert_eq!(stage_at(TrainMode::ThreeStage, 101, 34), Stage::Distill);
        assert_eq!(stage_at(TrainMode::ThreeStage, 101, 67), Stage::Supervised);
        assert_eq!(stage_at(TrainMode::TwoStage, 101, 51), Stage::DistillSupervised);
    }

    #[test]
    fn names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
        }
        assert_eq!("three_stage".parse::<TrainMode>().unwrap(), TrainMode::ThreeStage);
        assert!(matches!("wo_xx".parse::<Ablation>(), Err(MerlinError::Usage(_))));
    }

    #[test]
    fn teacher_loss_falls_on_periodic_series() {
        let frame = SynthConfig { n_vars: 3, n_days: 8, steps_per_day: 24, noise_std: 0.0, drift_scale: 0.0, ..SynthConfig::default() }
            .generate()
            .unwrap();
        let data = Dataset::prepare(&frame, &DataConfig { steps_per_day: 24, ..DataConfig::default() }, 12, 12, 0).unwrap();
        let out = train_teacher(&data, &model_cfg(), &quick(20), &fast_opt()).unwrap();
        assert_eq!(out.log.len(), 20);
        assert!(out.log[19].total < out.log[0].total);
        assert!(out.log.iter().all(|r| r.seconds >= 0.0 && r.val_mae.is_some()));
    }

    #[test]
    fn teacher_runs_are_reproducible() {
        let data = dataset(6, 0.0);
        let a = train_teacher(&data, &model_cfg(), &quick(2), &fast_opt()).unwrap();
        let b = train_teacher(&data, &model_cfg(), &quick(2), &fast_opt()).unwrap();
        assert_eq!(a.last.model, b.last.model);
        assert_eq!(a.best_epoch, b.best_epoch);
    }

    #[test]
    fn premasked_teacher_records_rate() {
        let data = dataset(6, 0.05);
        let out = train_teacher(&data, &model_cfg(), &quick(1), &fast_opt()).unwrap();
        assert_eq!(out.best.premask_rate, 0.05);
    }

    #[test]
    fn first_epoch_weights_and_detached_teacher() {
        let data = dataset(6, 0.0);
        let t = teacher(&data);
        let merlin = MerlinConfig::default();
        let tr = Trainer::student(&data, Some(&t), &model_cfg(), &quick(3), &fast_opt(), &merlin).unwrap();
        let batch: Vec<&WindowSample> = data.train.iter().take(4).collect();
        let step = tr.step(&batch, 1, 0).unwrap();
        assert_eq!(step.teacher_grads, 0);
        let l = step.losses;
        assert!(l.pre > 0.0 && l.hd > 0.0 && l.rd > 0.0 && l.cl > 0.0);
        let expected = 2.0 * l.pre + 2.0 * (l.hd + l.rd) + l.cl;
        assert!((step.total - expected).abs() < 1e-12);
        assert_eq!(step.total, loss_total_value(&l, &merlin, 1).unwrap());
        assert!(step.grads.iter().any(|g| g.sq_norm() > 0.0));
    }

    #[test]
    fn teacher_untouched_by_student_training() {
        let data = dataset(6, 0.0);
        let t = teacher(&data);
        let before = t.clone();
        let out = train_student(&data, Some(&t), &model_cfg(), &quick(2), &fast_opt(), &MerlinConfig::default()).unwrap();
        for ((_, a), (_, b)) in before.named().iter().zip(t.named()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(out.log.len(), 2);
        assert!(out.best.proj.is_some());
    }

    #[test]
    fn zero_distill_weights_leave_only_supervision() {
        let data = dataset(6, 0.0);
        let t = teacher(&data);
        let plain = MerlinConfig { beta2: 0.0, beta3: 0.0, ..MerlinConfig::default() };
        let out = train_student(&data, Some(&t), &model_cfg(), &quick(2), &fast_opt(), &plain).unwrap();
        for r in &out.log {
            assert_eq!((r.losses.hd, r.losses.rd, r.losses.cl), (0.0, 0.0, 0.0));
            assert_eq!(r.total, 2.0 * r.losses.pre);
        }
    }

    #[test]
    fn three_stage_terms_follow_stages() {
        let data = dataset(6, 0.0);
        let t = teacher(&data);
        let cfg = TrainConfig { mode: TrainMode::ThreeStage, ..quick(3) };
        let out = train_student(&data, Some(&t), &model_cfg(), &cfg, &fast_opt(), &MerlinConfig::default()).unwrap();
        let l: Vec<LossValues> = out.log.iter().map(|r| r.losses).collect();
        assert!(l[0].pre == 0.0 && l[0].hd == 0.0 && l[0].cl > 0.0);
        assert!(l[1].pre == 0.0 && l[1].hd > 0.0 && l[1].rd > 0.0 && l[1].cl == 0.0);
        assert!(l[2].pre > 0.0 && l[2].hd == 0.0 && l[2].cl == 0.0);
    }

    #[test]
    fn ablations_share_schema() {
        let data = dataset(6, 0.0);
        let t = teacher(&data);
        for a in Ablation::ALL {
            let cfg = TrainConfig { ablation: Some(a), ..quick(1) };
            let teacher = a.needs_teacher().then_some(&t);
            let out = train_student(&data, teacher, &model_cfg(), &cfg, &fast_opt(), &MerlinConfig::default()).unwrap();
            let r = &out.log[0];
            assert!(r.val_mae.is_some());
            match a {
                Ablation::WoHd => assert!(r.losses.hd == 0.0 && r.losses.rd > 0.0),
                Ablation::WoRd => assert!(r.losses.rd == 0.0 && r.losses.hd > 0.0),
                Ablation::WoKd => assert!(r.losses.hd == 0.0 && r.losses.rd == 0.0 && r.losses.cl > 0.0),
                Ablation::WoCl => assert!(r.losses.cl == 0.0 && r.losses.hd > 0.0),
            }
        }
    }

    #[test]
    fn mismatched_teacher_rejected() {
        let data = dataset(6, 0.0);
        let t = teacher(&data);
        let other = StidConfig { embed_dim: 4, ..model_cfg() };
        let err = Trainer::student(&data, Some(&t), &other, &quick(1), &fast_opt(), &MerlinConfig::default()).err().unwrap();
        match err {
            MerlinError::Config(msg) => assert!(msg.contains("embed_dim")),
            e => panic!("unexpected {e}"),
        }
        assert!(Trainer::student(&data, None, &model_cfg(), &quick(1), &fast_opt(), &MerlinConfig::default()).is_err());
    }

    #[test]
    fn empty_training_split_rejected() {
        let mut data = dataset(6, 0.0);
        data.train.clear();
        assert!(matches!(
            Trainer::teacher(&data, &model_cfg(), &quick(1), &fast_opt()),
            Err(MerlinError::Config(_))
        ));
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let data = dataset(6, 0.0);
        let t = teacher(&data);
        let merlin = MerlinConfig::default();
        let straight = train_student(&data, Some(&t), &model_cfg(), &quick(4), &fast_opt(), &merlin).unwrap();

        let mut first = Trainer::student(&data, Some(&t), &model_cfg(), &quick(4), &fast_opt(), &merlin).unwrap();
        first.run_epoch().unwrap();
        let bytes = first.state().to_checkpoint().unwrap().to_bytes().unwrap();
        let saved = ModelBundle::from_checkpoint(&crate::model::Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        let resumed = Trainer::student(&data, Some(&t), &model_cfg(), &quick(4), &fast_opt(), &merlin)
            .unwrap()
            .resume(saved)
            .unwrap()
            .run()
            .unwrap();
        assert_eq!(resumed.log.len(), 3);
        for (a, b) in straight.log[1..].iter().zip(&resumed.log) {
            assert_eq!(a.total.to_bits(), b.total.to_bits());
        }
        assert_eq!(straight.last.model, resumed.last.model);
    }

    #[test]
    fn log_csv_layout() {
        let row = EpochLog { epoch: 1, lr: 2e-4, losses: LossValues::default(), total: 0.5, val_mae: None, seconds: 0.25 };
        let csv = log_to_csv(&[row]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), LOG_HEADER);
        assert_eq!(lines.next().unwrap(), "1,0.0002,0,0,0,0,0.5,,0.250000");
    }
}
