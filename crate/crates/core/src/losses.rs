//! Loss terms of the joint objective: supervised prediction error, hidden
//! state and forecast distillation, and the multi-view contrastive term.

use serde::{Deserialize, Serialize};

use crate::data::{validate_rates, DEFAULT_RATES};
use crate::error::{MerlinError, Result};
use crate::model::{fan_in_uniform, Checkpoint};
use crate::rng::rng_from;
use crate::tensor::{Tape, Tensor, Var};

/// Pointwise error used by a regression-style term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointLoss {
    #[default]
    L1,
    L2,
}

/// Distance used for hidden-state distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenLoss {
    #[default]
    Mse,
    Kl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MerlinConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub tau: f64,
    pub proj_dim: usize,
    pub rates: Vec<f64>,
    pub pred_loss: PointLoss,
    pub hd_loss: HiddenLoss,
    /// Swaps error kinds: L2 for the supervised term, L1 for distillation.
    pub swap: bool,
    /// Softmax temperature for the KL hidden-state variant.
    pub tau_kl: f64,
}

impl Default for MerlinConfig {
    fn default() -> Self {
        Self {
            beta1: 2.0,
            beta2: 2.0,
            beta3: 1.0,
            tau: 1.0,
            proj_dim: 16,
            rates: DEFAULT_RATES.to_vec(),
            pred_loss: PointLoss::L1,
            hd_loss: HiddenLoss::Mse,
            swap: false,
            tau_kl: 1.0,
        }
    }
}

impl MerlinConfig {
    pub fn validate(&self, hidden_dim: usize) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2), ("beta3", self.beta3)] {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(MerlinError::Config(format!("{name} must be a finite value >= 0, got {b}")));
            }
        }
        if !(self.tau > 0.0) || !(self.tau_kl > 0.0) {
            return Err(MerlinError::Config("temperatures must be positive".into()));
        }
        if self.proj_dim == 0 || self.proj_dim > hidden_dim {
            return Err(MerlinError::Config(format!(
                "proj_dim {} must lie in [1, {hidden_dim}]",
                self.proj_dim
            )));
        }
        validate_rates(&self.rates)
    }

    /// Error kind of the supervised term after applying `swap`.
    pub fn supervised_kind(&self) -> PointLoss {
        if self.swap {
            PointLoss::L2
        } else {
            self.pred_loss
        }
    }

    /// Error kind of the distillation terms after applying `swap`.
    pub fn distill_kind(&self) -> PointLoss {
        if self.swap {
            PointLoss::L1
        } else {
            PointLoss::L2
        }
    }
}

/// Projection head from the `4D` hidden state to the contrastive space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub w: Tensor,
    pub b: Tensor,
}

pub struct BoundProjection<'t> {
    pub w: Var<'t>,
    pub b: Var<'t>,
}

impl ProjectionParams {
    pub fn init(hidden_dim: usize, proj_dim: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed, &[0x9a0f]);
        Self {
            w: fan_in_uniform(&mut rng, &[hidden_dim, proj_dim], hidden_dim),
            b: fan_in_uniform(&mut rng, &[proj_dim], hidden_dim),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundProjection<'t> {
        BoundProjection {
            w: tape.param(&self.w),
            b: tape.param(&self.b),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        vec![("proj.w".into(), &self.w), ("proj.b".into(), &self.b)]
    }

    pub fn export(&self, ckpt: &mut Checkpoint, prefix: &str) {
        for (n, t) in self.named() {
            ckpt.insert(&format!("{prefix}{n}"), t.clone());
        }
    }

    pub fn import(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        Ok(Self {
            w: ckpt.tensor(&format!("{prefix}proj.w"))?.clone(),
            b: ckpt.tensor(&format!("{prefix}proj.b"))?.clone(),
        })
    }
}

impl<'t> BoundProjection<'t> {
    pub fn vars(&self) -> Vec<Var<'t>> {
        vec![self.w, self.b]
    }
}

fn check_views(name: &str, target: &Var<'_>, views: &[Var<'_>]) -> Result<()> {
    if views.is_empty() {
        return Err(MerlinError::Usage(format!("{name}: no views given")));
    }
    let shape = target.shape();
    for v in views {
        if v.shape() != shape {
            return Err(MerlinError::Dimension(format!(
                "{name}: view {:?} vs reference {shape:?}",
                v.shape()
            )));
        }
    }
    Ok(())
}

/// `Σ_i mean(err(target − view_i))` with `err` = |·| or (·)².
pub fn view_error_sum<'t>(name: &str, target: Var<'t>, views: &[Var<'t>], kind: PointLoss) -> Result<Var<'t>> {
    check_views(name, &target, views)?;
    let mut total: Option<Var<'t>> = None;
    for v in views {
        let diff = target.sub(v)?;
        let term = match kind {
            PointLoss::L1 => diff.abs(),
            PointLoss::L2 => diff.square(),
        }
        .mean();
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("views is non-empty"))
}

/// Hidden-state distillation: `Σ_i mean((H_teacher − H_i)²)`.
pub fn loss_hd<'t>(h_teacher: Var<'t>, h_students: &[Var<'t>]) -> Result<Var<'t>> {
    view_error_sum("loss_hd", h_teacher, h_students, PointLoss::L2)
}

/// Forecast distillation: `Σ_i mean((Y_teacher − Y_i)²)`.
pub fn loss_rd<'t>(y_teacher: Var<'t>, y_students: &[Var<'t>]) -> Result<Var<'t>> {
    view_error_sum("loss_rd", y_teacher, y_students, PointLoss::L2)
}

/// Supervised term against ground truth, L1 by default.
pub fn loss_pre<'t>(y_true: Var<'t>, y_students: &[Var<'t>], kind: PointLoss) -> Result<Var<'t>> {
    view_error_sum("loss_pre", y_true, y_students, kind)
}

/// KL(teacher ‖ student) of feature-wise softmaxes, averaged over positions
/// and summed over views.
pub fn loss_hd_kl<'t>(h_teacher: Var<'t>, h_students: &[Var<'t>], tau_kl: f64) -> Result<Var<'t>> {
    check_views("loss_hd_kl", &h_teacher, h_students)?;
    let tape = h_teacher.tape();
    let t_log = h_teacher.scale(1.0 / tau_kl).log_softmax_last().value();
    let t_prob = tape.constant(t_log.map(f64::exp));
    let t_log = tape.constant((*t_log).clone());
    let positions = (t_log.value().numel() / t_log.value().last_dim()) as f64;
    let mut total: Option<Var<'t>> = None;
    for s in h_students {
        let s_log = s.scale(1.0 / tau_kl).log_softmax_last();
        let term = t_prob.mul(&t_log.sub(&s_log)?)?.sum().scale(1.0 / positions);
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("views is non-empty"))
}

/// Mean-pools the variable axis of `[batch, n_vars, 4D]`, then projects.
pub fn project<'t>(h: Var<'t>, proj: &BoundProjection<'t>) -> Result<Var<'t>> {
    h.mean_axis1()?.linear(&proj.w, &proj.b)
}

/// Contrastive loss between two views of the same `n_s` samples.
///
/// Rows are interleaved so samples `2k` and `2k + 1` form the `k`-th
/// positive pair; every other row is a negative.
pub fn pair_contrastive<'t>(z_a: Var<'t>, z_b: Var<'t>, tau: f64) -> Result<Var<'t>> {
    let z = z_a.interleave_rows(&z_b)?;
    let n = z.shape()[0];
    let partner: Vec<usize> = (0..n).map(|i| i ^ 1).collect();
    z.cosine_matrix()?.paired_cross_entropy(&partner, tau)
}

/// Average of [`pair_contrastive`] over all unordered view pairs; zero when
/// fewer than two views are given.
pub fn loss_cl<'t>(z_views: &[Var<'t>], tau: f64) -> Result<Var<'t>> {
    let m = z_views.len();
    let Some(first) = z_views.first() else {
        return Err(MerlinError::Usage("loss_cl: no views given".into()));
    };
    let tape = first.tape();
    if m < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let mut total: Option<Var<'t>> = None;
    for i in 0..m {
        for j in i + 1..m {
            let term = pair_contrastive(z_views[i], z_views[j], tau)?;
            total = Some(match total {
                Some(t) => t.add(&term)?,
                None => term,
            });
        }
    }
    let coeff = 2.0 / (m * (m - 1)) as f64;
    Ok(total.expect("m >= 2").scale(coeff))
}

/// Weights of the four terms at a given 1-based epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub pre: f64,
    pub distill: f64,
    pub contrastive: f64,
}

impl LossWeights {
    /// `β1`, `β2 / epoch`, `β3 / epoch`.
    pub fn at_epoch(cfg: &MerlinConfig, epoch: usize) -> Result<Self> {
        if epoch < 1 {
            return Err(MerlinError::Usage("epochs are 1-based".into()));
        }
        let e = epoch as f64;
        Ok(Self {
            pre: cfg.beta1,
            distill: cfg.beta2 / e,
            contrastive: cfg.beta3 / e,
        })
    }
}

/// Scalar values of each term; inactive terms are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub pre: f64,
    pub hd: f64,
    pub rd: f64,
    pub cl: f64,
}

/// `β1·pre + (β2/e)·(hd + rd) + (β3/e)·cl` on plain numbers.
pub fn loss_total_value(parts: &LossValues, cfg: &MerlinConfig, epoch: usize) -> Result<f64> {
    let w = LossWeights::at_epoch(cfg, epoch)?;
    Ok(w.pre * parts.pre + w.distill * (parts.hd + parts.rd) + w.contrastive * parts.cl)
}

/// Loss terms on a tape; `None` marks a term that is switched off.
#[derive(Clone, Copy, Default)]
pub struct LossTerms<'t> {
    pub pre: Option<Var<'t>>,
    pub hd: Option<Var<'t>>,
    pub rd: Option<Var<'t>>,
    pub cl: Option<Var<'t>>,
}

impl<'t> LossTerms<'t> {
    pub fn values(&self) -> LossValues {
        let v = |t: &Option<Var<'t>>| t.map_or(0.0, |v| v.value().item());
        LossValues {
            pre: v(&self.pre),
            hd: v(&self.hd),
            rd: v(&self.rd),
            cl: v(&self.cl),
        }
    }
}

/// Weighted combination of the active terms.
pub fn loss_total<'t>(terms: &LossTerms<'t>, cfg: &MerlinConfig, epoch: usize) -> Result<Var<'t>> {
    let w = LossWeights::at_epoch(cfg, epoch)?;
    let weighted = [
        (terms.pre, w.pre),
        (terms.hd, w.distill),
        (terms.rd, w.distill),
        (terms.cl, w.contrastive),
    ];
    let mut total: Option<Var<'t>> = None;
    for (term, weight) in weighted {
        let Some(term) = term else { continue };
        let scaled = term.scale(weight);
        total = Some(match total {
            Some(t) => t.add(&scaled)?,
            None => scaled,
        });
    }
    total.ok_or_else(|| MerlinError::Usage("loss_total: every term is disabled".into()))
}
