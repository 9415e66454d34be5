//! Gaussian KL, the ELBO, the mobile-threshold objective and the α/β schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{ElboTerms, LatentHierarchy};
use crate::tensor::{Scalar, Tensor};

/// Closed-form KL between diagonal Gaussians, summed over dimensions.
pub fn kl_diag_gauss(q_mean: &[f64], q_std: &[f64], p_mean: &[f64], p_std: &[f64]) -> Result<f64> {
    let n = q_mean.len();
    if q_std.len() != n || p_mean.len() != n || p_std.len() != n {
        return Err(Error::Domain("Gaussian parameter lengths differ".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let (sq, sp) = (q_std[i], p_std[i]);
        if !(sq > 0.0 && sp > 0.0) {
            return Err(Error::Domain(format!("standard deviations must be positive, got {sq} and {sp}")));
        }
        let diff = q_mean[i] - p_mean[i];
        total += (sp / sq).ln() + (sq * sq + diff * diff) / (2.0 * sp * sp) - 0.5;
    }
    Ok(total)
}

/// KL of each level, summed over its LVs; the level-1 prior is N(0, I).
pub fn layer_kls<T: Scalar>(h: &LatentHierarchy<T>) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (k, level) in h.levels.iter().enumerate() {
        let q = &level.posterior;
        let (pm, ps) = match &level.prior {
            Some(p) => (p.means.to_f64_vec(), p.stds.to_f64_vec()),
            None if k == 0 => (vec![0.0; q.means.len()], vec![1.0; q.means.len()]),
            None => return Err(Error::State(format!("level-{} prior has not been computed", k + 1))),
        };
        if pm.len() != q.means.len() {
            return Err(Error::State(format!("level-{} prior and posterior shapes differ", k + 1)));
        }
        let (qm, qs) = (q.means.to_f64_vec(), q.stds.to_f64_vec());
        let z = q.means.cols();
        for r in 0..q.means.rows() {
            let s = r * z..(r + 1) * z;
            out[k] += kl_diag_gauss(&qm[s.clone()], &qs[s.clone()], &pm[s.clone()], &ps[s])?;
        }
    }
    Ok(out)
}

/// Evidence lower bound from its two ingredients.
pub fn elbo(recon_nll: f64, layer_kl: [f64; 3]) -> f64 {
    -recon_nll - layer_kl.iter().sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Branch {
    Recon,
    Kl,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveVariant {
    /// `min(recon, αβ·KL_max)`: only the smaller term is optimized.
    #[default]
    Literal,
    /// `recon + αβ·KL_max·1[αβ·KL_max ≥ recon]`.
    GatedAdditive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_nll: f64,
    pub layer_kl: [f64; 3],
    pub kl_max: f64,
    /// Level index (0-based) holding `kl_max`.
    pub kl_argmax: usize,
    pub selected_branch: Branch,
    pub total_loss: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LossBreakdown {
    /// Weights of `recon` and of each level's KL in `total_loss`.
    pub fn weights(&self, variant: ObjectiveVariant) -> (f64, [f64; 3]) {
        let ab = self.alpha * self.beta;
        let mut kl = [0.0; 3];
        let recon = match (variant, self.selected_branch) {
            (ObjectiveVariant::Literal, Branch::Recon) => 1.0,
            (ObjectiveVariant::Literal, Branch::Kl) => {
                kl[self.kl_argmax] = ab;
                0.0
            }
            (ObjectiveVariant::GatedAdditive, Branch::Recon) => 1.0,
            (ObjectiveVariant::GatedAdditive, Branch::Kl) => {
                kl[self.kl_argmax] = ab;
                1.0
            }
        };
        (recon, kl)
    }
}

/// Index and value of the largest KL; ties go to the lowest level.
fn kl_max(layer_kl: [f64; 3]) -> (usize, f64) {
    let mut best = 0;
    for k in 1..3 {
        if layer_kl[k] > layer_kl[best] {
            best = k;
        }
    }
    (best, layer_kl[best])
}

impl ObjectiveVariant {
    pub fn loss(self, recon_nll: f64, layer_kl: [f64; 3], alpha: f64, beta: f64) -> Result<LossBreakdown> {
        if !(recon_nll >= 0.0) || layer_kl.iter().any(|&k| !(k >= 0.0)) {
            return Err(Error::Domain(format!(
                "objective inputs must be nonnegative: recon {recon_nll}, kl {layer_kl:?}"
            )));
        }
        if !(0.0..=1.0).contains(&alpha) || !(beta > 0.0) {
            return Err(Error::Domain(format!("alpha {alpha} must lie in [0,1] and beta {beta} be positive")));
        }
        let (arg, max) = kl_max(layer_kl);
        let threshold = alpha * beta * max;
        let (branch, total) = if alpha == 0.0 {
            (Branch::Recon, recon_nll)
        } else {
            match self {
                ObjectiveVariant::Literal if threshold >= recon_nll => (Branch::Recon, recon_nll),
                ObjectiveVariant::Literal => (Branch::Kl, threshold),
                ObjectiveVariant::GatedAdditive if threshold >= recon_nll => (Branch::Kl, recon_nll + threshold),
                ObjectiveVariant::GatedAdditive => (Branch::Recon, recon_nll),
            }
        };
        Ok(LossBreakdown {
            recon_nll,
            layer_kl,
            kl_max: max,
            kl_argmax: arg,
            selected_branch: branch,
            total_loss: total,
            alpha,
            beta,
        })
    }
}

/// The default (literal) reading of the objective.
pub fn mobile_threshold_loss(recon_nll: f64, layer_kl: [f64; 3], alpha: f64, beta: f64) -> Result<LossBreakdown> {
    ObjectiveVariant::Literal.loss(recon_nll, layer_kl, alpha, beta)
}

/// Batch-mean objective as a differentiable scalar, plus the per-example
/// breakdowns. Branch choice is made on the forward values and enters the
/// graph as constant weights, so unselected terms get exactly zero gradient.
pub fn total_loss_g<T: Scalar>(
    g: &mut Graph<T>,
    terms: &ElboTerms,
    alpha: f64,
    beta: f64,
    variant: ObjectiveVariant,
) -> Result<(Var, Vec<LossBreakdown>)> {
    let recon = g.value(terms.recon).to_f64_vec();
    let kls: Vec<Vec<f64>> = terms.kl.iter().map(|&v| g.value(v).to_f64_vec()).collect();
    let batch = recon.len();
    if batch == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    let inv = 1.0 / batch as f64;
    let mut w_recon = vec![T::ZERO; batch];
    let mut w_kl = vec![vec![T::ZERO; batch]; 3];
    let mut used = [false; 3];
    let mut rows = Vec::with_capacity(batch);
    for b in 0..batch {
        let lb = variant.loss(recon[b].max(0.0), [kls[0][b].max(0.0), kls[1][b].max(0.0), kls[2][b].max(0.0)], alpha, beta)?;
        let (wr, wk) = lb.weights(variant);
        w_recon[b] = T::from_f64(wr * inv);
        for k in 0..3 {
            if wk[k] != 0.0 {
                w_kl[k][b] = T::from_f64(wk[k] * inv);
                used[k] = true;
            }
        }
        rows.push(lb);
    }
    let mut total = g.weighted_sum(terms.recon, w_recon);
    for k in 0..3 {
        if used[k] {
            let part = g.weighted_sum(terms.kl[k], std::mem::take(&mut w_kl[k]));
            total = g.add(total, part);
        }
    }
    Ok((total, rows))
}

/// Mean of a set of breakdowns (branch reported by majority, ties RECON).
pub fn mean_breakdown(rows: &[LossBreakdown]) -> LossBreakdown {
    let n = rows.len().max(1) as f64;
    let mut m = LossBreakdown {
        recon_nll: 0.0,
        layer_kl: [0.0; 3],
        kl_max: 0.0,
        kl_argmax: 0,
        selected_branch: Branch::Recon,
        total_loss: 0.0,
        alpha: rows.first().map_or(0.0, |r| r.alpha),
        beta: rows.first().map_or(0.0, |r| r.beta),
    };
    let mut recon_branch = 0usize;
    let mut argmax_votes = [0usize; 3];
    for r in rows {
        m.recon_nll += r.recon_nll / n;
        for k in 0..3 {
            m.layer_kl[k] += r.layer_kl[k] / n;
        }
        m.kl_max += r.kl_max / n;
        m.total_loss += r.total_loss / n;
        if r.selected_branch == Branch::Recon {
            recon_branch += 1;
        }
        argmax_votes[r.kl_argmax] += 1;
    }
    m.kl_argmax = (0..3).max_by_key(|&k| (argmax_votes[k], 3 - k)).unwrap_or(0);
    if 2 * recon_branch < rows.len() {
        m.selected_branch = Branch::Kl;
    }
    m
}

/// Per-level KL tensors of a hierarchy, as `[rows, 1]` for inspection.
pub fn kl_rows<T: Scalar>(h: &LatentHierarchy<T>, level: usize) -> Result<Tensor<f64>> {
    let l = h
        .levels
        .get(level)
        .ok_or(Error::Index { what: "level", index: level, limit: 3 })?;
    let z = l.posterior.means.cols();
    let (qm, qs) = (l.posterior.means.to_f64_vec(), l.posterior.stds.to_f64_vec());
    let (pm, ps) = match &l.prior {
        Some(p) => (p.means.to_f64_vec(), p.stds.to_f64_vec()),
        None if level == 0 => (vec![0.0; qm.len()], vec![1.0; qm.len()]),
        None => return Err(Error::State(format!("level-{} prior has not been computed", level + 1))),
    };
    let rows = l.posterior.means.rows();
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let s = r * z..(r + 1) * z;
        out.push(kl_diag_gauss(&qm[s.clone()], &qs[s.clone()], &pm[s.clone()], &ps[s])?);
    }
    Ok(Tensor::from_vec(rows, 1, out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub warmup_steps: u64,
    pub anneal_steps: u64,
    pub beta_start: f64,
    pub beta_floor: f64,
    pub eval_every_epochs: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 3000,
            anneal_steps: 3000,
            beta_start: 6.0,
            beta_floor: 3.0,
            eval_every_epochs: 3,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_floor > 0.0 && self.beta_start >= self.beta_floor) {
            return Err(Error::Config(format!(
                "beta_start {} must be at least beta_floor {} > 0",
                self.beta_start, self.beta_floor
            )));
        }
        if self.eval_every_epochs == 0 {
            return Err(Error::Config("eval_every_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub step: u64,
    pub beta: f64,
    pub perplexity_history: Vec<(u64, f64)>,
    pub halted: bool,
    pub config: ScheduleConfig,
}

impl ScheduleState {
    pub fn new(config: ScheduleConfig) -> Self {
        Self {
            step: 0,
            beta: config.beta_start,
            perplexity_history: Vec::new(),
            halted: false,
            config,
        }
    }

    pub fn alpha(&self) -> f64 {
        alpha_at(&self.config, self.step)
    }

    /// True once α has reached 1.
    pub fn annealed(&self) -> bool {
        self.step >= self.config.warmup_steps + self.config.anneal_steps
    }
}

impl Default for ScheduleState {
    fn default() -> Self {
        Self::new(ScheduleConfig::default())
    }
}

/// 0 during warmup, then linear up to 1 over `anneal_steps`.
pub fn alpha_at(config: &ScheduleConfig, step: u64) -> f64 {
    if step < config.warmup_steps {
        0.0
    } else if config.anneal_steps == 0 {
        1.0
    } else {
        ((step - config.warmup_steps) as f64 / config.anneal_steps as f64).min(1.0)
    }
}

/// Record a perplexity. β drops by one (not below the floor) when it failed
/// to decrease; a failure to decrease while already at the floor halts.
pub fn update_beta(state: &mut ScheduleState, epoch: u64, perplexity: f64) -> bool {
    let stalled = state
        .perplexity_history
        .last()
        .is_some_and(|&(_, prev)| !(perplexity < prev));
    state.perplexity_history.push((epoch, perplexity));
    if stalled {
        if state.beta <= state.config.beta_floor {
            state.halted = true;
        } else {
            state.beta = (state.beta - 1.0).max(state.config.beta_floor);
        }
    }
    state.halted
}
