//! Training loop, perplexity evaluation and checkpointing.

mod adam;
mod checkpoint;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};

use crate::autograd::Graph;
use crate::corpus::{TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::model::{HierarchicalVae, NoiseSource, ZeroNoise};
use crate::objective::{
    mean_breakdown, total_loss_g, update_beta, Branch, LossBreakdown, ObjectiveVariant, ScheduleConfig, ScheduleState,
};
use crate::params::{GradStore, ParameterStore};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub clip_norm: f64,
    pub objective: ObjectiveVariant,
    pub schedule: ScheduleConfig,
    /// Hard stop even if the halting rule never fires.
    pub max_steps: u64,
    /// Report row interval in steps; step 0 always gets its own row.
    pub log_every: u64,
    /// Keep one checkpoint per evaluation instead of overwriting the latest.
    pub keep_all_checkpoints: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            optimizer: AdamConfig::default(),
            clip_norm: 1.0,
            objective: ObjectiveVariant::default(),
            schedule: ScheduleConfig::default(),
            max_steps: 30_000,
            log_every: 50,
            keep_all_checkpoints: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        self.schedule.validate()
    }
}

/// Result of one optimizer update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Per-example breakdowns of the batch, before the update.
    pub rows: Vec<LossBreakdown>,
    pub mean: LossBreakdown,
    pub grad_norm: f64,
}

impl StepOutcome {
    pub fn recon_rate(&self) -> f64 {
        let n = self.rows.iter().filter(|r| r.selected_branch == Branch::Recon).count();
        n as f64 / self.rows.len() as f64
    }
}

/// Mutable training state shared by the loop and checkpoints.
pub struct TrainState<T> {
    pub params: ParameterStore<T>,
    pub optimizer: Adam<T>,
    pub schedule: ScheduleState,
    pub rng: ChaCha8Rng,
    grads: GradStore<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: ParameterStore<T>, config: &TrainConfig) -> Self {
        Self {
            optimizer: Adam::new(config.optimizer, &params),
            grads: GradStore::zeros_like(&params),
            schedule: ScheduleState::new(config.schedule.clone()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params,
        }
    }
}

/// Batch-mean objective of `batch` with noise from `noise`, without updating.
pub fn batch_loss<T: Scalar>(
    model: &HierarchicalVae,
    params: &ParameterStore<T>,
    batch: &[&TokenSequence],
    alpha: f64,
    beta: f64,
    variant: ObjectiveVariant,
    noise: &mut dyn NoiseSource,
) -> Result<(f64, Vec<LossBreakdown>)> {
    let mut g = Graph::inference(params);
    let terms = model.elbo_terms_g(&mut g, batch, noise)?;
    let (total, rows) = total_loss_g(&mut g, &terms, alpha, beta, variant)?;
    Ok((g.value(total).item().to_f64(), rows))
}

/// One forward/backward pass and optimizer update on `batch`.
pub fn train_step<T: Scalar>(
    model: &HierarchicalVae,
    state: &mut TrainState<T>,
    batch: &[&TokenSequence],
    config: &TrainConfig,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::Domain("empty training batch".into()));
    }
    let alpha = state.schedule.alpha();
    let beta = state.schedule.beta;
    let step = state.schedule.step;
    state.grads.zero();
    let (rows, total_value) = {
        let mut g = Graph::new(&state.params);
        let terms = model.elbo_terms_g(&mut g, batch, &mut state.rng)?;
        let (total, rows) = total_loss_g(&mut g, &terms, alpha, beta, config.objective)?;
        let v = g.value(total).item().to_f64();
        if v.is_finite() {
            g.backward(total, &mut state.grads);
        }
        (rows, v)
    };
    let mean = mean_breakdown(&rows);
    if !total_value.is_finite() || !state.grads.all_finite() {
        return Err(Error::NonFinite {
            step,
            dump: serde_json::to_string(&mean).unwrap_or_else(|_| format!("{mean:?}")),
        });
    }
    let grad_norm = state.grads.global_norm();
    if grad_norm > config.clip_norm {
        state.grads.scale(T::from_f64(config.clip_norm / grad_norm));
    }
    state.optimizer.step(&mut state.params, &state.grads);
    state.schedule.step += 1;
    Ok(StepOutcome { rows, mean, grad_norm })
}

/// `exp(Σ −ELBO / Σ predicted tokens)` using posterior means (ε = 0).
pub fn evaluate_perplexity<T: Scalar>(
    model: &HierarchicalVae,
    params: &ParameterStore<T>,
    corpus: &[TokenSequence],
) -> Result<f64> {
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for chunk in corpus.chunks(64) {
        let refs: Vec<&TokenSequence> = chunk.iter().collect();
        let mut g = Graph::inference(params);
        let terms = model.elbo_terms_g(&mut g, &refs, &mut ZeroNoise)?;
        let recon = g.value(terms.recon).to_f64_vec();
        let kls: Vec<Vec<f64>> = terms.kl.iter().map(|&k| g.value(k).to_f64_vec()).collect();
        for b in 0..refs.len() {
            nll += recon[b] + kls[0][b] + kls[1][b] + kls[2][b];
        }
        tokens += terms.token_counts.iter().sum::<usize>();
    }
    if tokens == 0 {
        return Err(Error::Domain("perplexity of an empty corpus".into()));
    }
    Ok((nll / tokens as f64).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub step: u64,
    pub recon_nll: f64,
    pub kl1: f64,
    pub kl2: f64,
    pub kl3: f64,
    pub kl_max: f64,
    pub branch_recon_rate: f64,
    pub alpha: f64,
    pub beta: f64,
    pub perplexity: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<ReportRow>,
    pub steps: u64,
    pub epochs: u64,
    pub halted: bool,
    /// Mean `kl_max` over the last full or partial epoch.
    pub final_epoch_kl_max: f64,
    pub final_epoch_recon: f64,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "step",
            "recon_nll",
            "kl1",
            "kl2",
            "kl3",
            "kl_max",
            "branch_recon_rate",
            "alpha",
            "beta",
            "perplexity",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                r.recon_nll.to_string(),
                r.kl1.to_string(),
                r.kl2.to_string(),
                r.kl3.to_string(),
                r.kl_max.to_string(),
                r.branch_recon_rate.to_string(),
                r.alpha.to_string(),
                r.beta.to_string(),
                r.perplexity.map(|p| p.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<report>", e))?;
        Ok(())
    }

    pub fn first_recon(&self) -> Option<f64> {
        self.rows.first().map(|r| r.recon_nll)
    }
}

#[derive(Default)]
struct Window {
    n: usize,
    recon: f64,
    kl: [f64; 3],
    kl_max: f64,
    recon_branch: usize,
}

impl Window {
    fn add(&mut self, out: &StepOutcome) {
        for r in &out.rows {
            self.n += 1;
            self.recon += r.recon_nll;
            for k in 0..3 {
                self.kl[k] += r.layer_kl[k];
            }
            self.kl_max += r.kl_max;
            if r.selected_branch == Branch::Recon {
                self.recon_branch += 1;
            }
        }
    }

    fn row(&self, step: u64, alpha: f64, beta: f64) -> ReportRow {
        let n = self.n.max(1) as f64;
        ReportRow {
            step,
            recon_nll: self.recon / n,
            kl1: self.kl[0] / n,
            kl2: self.kl[1] / n,
            kl3: self.kl[2] / n,
            kl_max: self.kl_max / n,
            branch_recon_rate: self.recon_branch as f64 / n,
            alpha,
            beta,
            perplexity: None,
        }
    }
}

/// Everything a run needs besides the corpora.
pub struct TrainingRun<'a> {
    pub model: &'a HierarchicalVae,
    pub config: &'a TrainConfig,
    pub vocab: Option<&'a Vocab>,
    pub output_dir: Option<&'a Path>,
}

impl TrainingRun<'_> {
    fn checkpoint(&self, state: &TrainState<f32>) -> Checkpoint {
        Checkpoint {
            config: self.model.config().clone(),
            schedule: state.schedule.clone(),
            vocab: self.vocab.cloned(),
            params: state.params.clone(),
            optimizer: Some(state.optimizer.clone()),
            rng: Some(state.rng.clone()),
        }
    }

    /// Full schedule: warmup, annealing, β decrements on stalled perplexity
    /// (only once α has reached 1) and the halting rule.
    pub fn run(&self, state: &mut TrainState<f32>, train: &[TokenSequence], test: &[TokenSequence]) -> Result<TrainReport> {
        self.config.validate()?;
        if train.is_empty() || test.is_empty() {
            return Err(Error::Domain("training and test corpora must be non-empty".into()));
        }
        if let Some(dir) = self.output_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut report = TrainReport::default();
        let mut window = Window::default();
        let mut epoch_window = Window::default();
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut epoch = 0u64;
        'outer: while state.schedule.step < self.config.max_steps {
            order.shuffle(&mut state.rng);
            epoch_window = Window::default();
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&TokenSequence> = chunk.iter().map(|&i| &train[i]).collect();
                let step = state.schedule.step;
                let (alpha, beta) = (state.schedule.alpha(), state.schedule.beta);
                let out = train_step(self.model, state, &batch, self.config)?;
                window.add(&out);
                epoch_window.add(&out);
                if step % self.config.log_every == 0 {
                    report.rows.push(window.row(step, alpha, beta));
                    window = Window::default();
                    log::info!(
                        "step {step} recon {:.3} kl_max {:.3} alpha {alpha:.3} beta {beta}",
                        report.rows.last().map_or(0.0, |r| r.recon_nll),
                        report.rows.last().map_or(0.0, |r| r.kl_max),
                    );
                }
                if state.schedule.step >= self.config.max_steps {
                    epoch += 1;
                    self.evaluate(state, test, epoch, &mut window, &mut report)?;
                    break 'outer;
                }
            }
            epoch += 1;
            if epoch % self.config.schedule.eval_every_epochs == 0 && self.evaluate(state, test, epoch, &mut window, &mut report)? {
                break;
            }
        }
        report.steps = state.schedule.step;
        report.epochs = epoch;
        report.halted = state.schedule.halted;
        let n = epoch_window.n.max(1) as f64;
        report.final_epoch_kl_max = epoch_window.kl_max / n;
        report.final_epoch_recon = epoch_window.recon / n;
        if let Some(dir) = self.output_dir {
            let path = dir.join("train_report.csv");
            let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            report.write_csv(std::io::BufWriter::new(f))?;
        }
        Ok(report)
    }

    /// Evaluate, update β, checkpoint. Returns true when training should halt.
    fn evaluate(
        &self,
        state: &mut TrainState<f32>,
        test: &[TokenSequence],
        epoch: u64,
        window: &mut Window,
        report: &mut TrainReport,
    ) -> Result<bool> {
        let ppl = evaluate_perplexity(self.model, &state.params, test)?;
        let step = state.schedule.step.saturating_sub(1);
        let mut row = window.row(step, alpha_of(&state.schedule, step), state.schedule.beta);
        if window.n == 0 {
            if let Some(last) = report.rows.last() {
                row = last.clone();
                report.rows.pop();
            }
        }
        *window = Window::default();
        row.perplexity = Some(ppl);
        report.rows.push(row);
        if state.schedule.annealed() {
            update_beta(&mut state.schedule, epoch, ppl);
        }
        log::info!("epoch {epoch} step {} perplexity {ppl:.4} beta {}", state.schedule.step, state.schedule.beta);
        if let Some(dir) = self.output_dir {
            let ck = self.checkpoint(state);
            let path = if self.config.keep_all_checkpoints {
                dir.join(format!("checkpoint_step{}.bin", state.schedule.step))
            } else {
                dir.join("checkpoint_latest.bin")
            };
            ck.save(&path)?;
            if !report.checkpoints.contains(&path) {
                report.checkpoints.push(path);
            }
        }
        Ok(state.schedule.halted)
    }
}

fn alpha_of(s: &ScheduleState, step: u64) -> f64 {
    crate::objective::alpha_at(&s.config, step)
}

/// Build a fresh model from `model_config` and run the full schedule.
pub fn run_training(
    model_config: &crate::model::ModelConfig,
    config: &TrainConfig,
    vocab: Option<&Vocab>,
    train: &[TokenSequence],
    test: &[TokenSequence],
    output_dir: Option<&Path>,
) -> Result<(TrainReport, HierarchicalVae, TrainState<f32>)> {
    let (model, params) = HierarchicalVae::build::<f32>(model_config)?;
    let mut state = TrainState::new(params, config);
    let run = TrainingRun {
        model: &model,
        config,
        vocab,
        output_dir,
    };
    let report = run.run(&mut state, train, test)?;
    Ok((report, model, state))
}
