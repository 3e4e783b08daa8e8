//! Training loop for both rescorer variants.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, AUX_CE_WEIGHT};
use crate::model::{Example, Model, Variant};
use crate::parallel::{derive_seed, par_map};
use crate::tensor::{clip_global_norm, lr_schedule, Adam, AdamConfig, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_steps: u64,
    pub eval_every: u64,
    /// Upper bound on padded input tokens (records x N x length) per batch.
    pub batch_token_budget: usize,
    pub warmup: u64,
    /// Evaluation rounds without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Multiplier on the warmup schedule.
    pub lr_scale: f64,
    pub clip_norm: f64,
    /// Weight of the cross-entropy term in the combined loss.
    pub ce_weight: f64,
    /// Wall-clock cap; `None` for no cap.
    pub max_seconds: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 5000,
            eval_every: 200,
            batch_token_budget: 2000,
            warmup: 400,
            patience: 5,
            seed: 17,
            lr_scale: 1.0,
            clip_norm: 1.0,
            ce_weight: AUX_CE_WEIGHT,
            max_seconds: None,
        }
    }
}

impl TrainConfig {
    /// Settings for the desk-scale corpus on one CPU core: a fixed step
    /// count, capped at 30 minutes of wall time.
    pub fn desk() -> Self {
        Self {
            max_steps: 2500,
            eval_every: 100,
            batch_token_budget: 1500,
            warmup: 400,
            patience: 6,
            seed: 17,
            lr_scale: 0.3,
            clip_norm: 1.0,
            ce_weight: AUX_CE_WEIGHT,
            max_seconds: Some(1800.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 || self.eval_every == 0 || self.warmup == 0 {
            return Err(Error::Config("max_steps, eval_every and warmup must be positive".into()));
        }
        if self.eval_every > self.max_steps {
            return Err(Error::Config(format!("eval_every {} exceeds max_steps {}", self.eval_every, self.max_steps)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.lr_scale > 0.0) || !(self.clip_norm > 0.0) || !(self.ce_weight >= 0.0) {
            return Err(Error::Config("lr_scale and clip_norm must be positive, ce_weight non-negative".into()));
        }
        Ok(())
    }
}

/// Indices of records sharing one N-best size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub n: usize,
    pub records: Vec<usize>,
    /// Longest hypothesis in the batch.
    pub padded_len: usize,
}

impl Batch {
    pub fn tokens(&self) -> usize {
        self.records.len() * self.n * self.padded_len
    }
}

/// Groups records by N, packs each group under the token budget, and
/// shuffles deterministically. Records that alone exceed the budget are
/// skipped and counted.
pub fn make_batches(examples: &[Example], budget: usize, seed: u64) -> (Vec<Batch>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut skipped = 0;
    for (i, ex) in examples.iter().enumerate() {
        if ex.n() == 0 || ex.n() * ex.padded_len() > budget {
            skipped += 1;
        } else {
            groups.entry(ex.n()).or_default().push(i);
        }
    }
    let mut batches = Vec::new();
    for (n, mut idx) in groups {
        idx.shuffle(&mut rng);
        let mut cur = Batch { n, records: Vec::new(), padded_len: 0 };
        for i in idx {
            let l = cur.padded_len.max(examples[i].padded_len());
            if !cur.records.is_empty() && (cur.records.len() + 1) * n * l > budget {
                batches.push(std::mem::replace(&mut cur, Batch { n, records: Vec::new(), padded_len: 0 }));
            }
            cur.padded_len = cur.padded_len.max(examples[i].padded_len());
            cur.records.push(i);
        }
        if !cur.records.is_empty() {
            batches.push(cur);
        }
    }
    batches.shuffle(&mut rng);
    (batches, skipped)
}

/// Builds the combined loss for one record on `g`.
pub fn record_loss(model: &Model, g: &mut Graph, ex: &Example, ce_weight: f64) -> Result<(Var, LossBreakdown)> {
    let enc = model.encode(g, &ex.hyps)?;
    let lp = model.teacher_force_logps(g, &enc, &ex.target)?;
    let pad = vec![false; ex.target.len() - 1];
    let ce = losses::ce_loss(g, lp, &pad)?;
    let aux = match model.config.variant {
        Variant::Tra => {
            let ht = model.target_embedding(g, &ex.target)?;
            let s = model.rescore_attention(g, &enc, ht)?;
            losses::mqsd_loss(g, &ex.similarity, s)?
        }
        Variant::Tr => {
            let p = model.score_nbest_tr(g, &enc, &ex.hyps)?;
            losses::mwer_loss(g, p, &ex.word_errors)?
        }
    };
    losses::combined(g, ce, aux, ce_weight)
}

/// Mean loss parts over `examples` with dropout off.
pub fn evaluate(model: &Model, examples: &[Example], ce_weight: f64) -> Result<LossBreakdown> {
    if examples.is_empty() {
        return Err(Error::Input("no examples to evaluate".into()));
    }
    let parts = par_map(examples, |_, ex| {
        let mut g = Graph::inference();
        record_loss(model, &mut g, ex, ce_weight).map(|(_, b)| b)
    });
    let mut sum = [0.0; 3];
    for p in parts {
        let p = p?;
        sum[0] += p.ce;
        sum[1] += p.aux;
        sum[2] += p.combined;
    }
    let k = examples.len() as f64;
    Ok(LossBreakdown { ce: sum[0] / k, aux: sum[1] / k, combined: sum[2] / k, weight: ce_weight })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping on a metric where lower is better.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_step: u64,
    bad_rounds: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_step: 0, bad_rounds: 0 }
    }

    pub fn observe(&mut self, step: u64, value: f64) -> Verdict {
        if value < self.best {
            self.best = value;
            self.best_step = step;
            self.bad_rounds = 0;
            Verdict::Improved
        } else {
            self.bad_rounds += 1;
            if self.bad_rounds >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Continue
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_step(&self) -> u64 {
        self.best_step
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub step: u64,
    pub lr: f64,
    pub train: LossBreakdown,
    pub grad_norm: f64,
    pub dev: Option<f64>,
}

impl LogEntry {
    pub fn to_line(&self) -> String {
        let mut s = format!(
            "step={} lr={:.6e} ce={:.6} aux={:.6} loss={:.6} grad_norm={:.4}",
            self.step, self.lr, self.train.ce, self.train.aux, self.train.combined, self.grad_norm
        );
        if let Some(d) = self.dev {
            let _ = write!(s, " dev_loss={d:.6}");
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxSteps,
    EarlyStop,
    TimeLimit,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<LogEntry>,
    pub steps: u64,
    pub best_step: u64,
    pub best_dev: f64,
    pub stop: StopReason,
    pub skipped: usize,
}

impl TrainReport {
    pub fn log_text(&self) -> String {
        let mut s = String::new();
        for e in &self.log {
            let _ = writeln!(s, "{}", e.to_line());
        }
        let reason = match self.stop {
            StopReason::MaxSteps => "max_steps",
            StopReason::EarlyStop => "early_stop",
            StopReason::TimeLimit => "time_limit",
        };
        let _ = writeln!(
            s,
            "done steps={} best_step={} best_dev_loss={:.6} stop={reason} skipped={}",
            self.steps, self.best_step, self.best_dev, self.skipped
        );
        s
    }
}

/// Trains `model` in place and leaves it holding the best-dev parameters.
pub fn train(model: &mut Model, train_set: &[Example], dev_set: &[Example], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with_progress(model, train_set, dev_set, cfg, &mut |_| {})
}

/// [`train`] with a callback invoked after every dev evaluation.
pub fn train_with_progress(
    model: &mut Model,
    train_set: &[Example],
    dev_set: &[Example],
    cfg: &TrainConfig,
    on_eval: &mut dyn FnMut(&LogEntry),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Input("training needs non-empty train and dev sets".into()));
    }
    let start = Instant::now();
    let mut adam = Adam::new(AdamConfig::default());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.params.store.clone();
    let mut log = Vec::new();
    let mut step = 0u64;
    let mut skipped = 0;
    let mut stop = StopReason::MaxSteps;
    let d_model = model.config.d_model;

    'outer: for epoch in 0u64.. {
        let (batches, skip) = make_batches(train_set, cfg.batch_token_budget, derive_seed(cfg.seed, epoch));
        if epoch == 0 {
            skipped = skip;
            if batches.is_empty() {
                return Err(Error::Input("every training record exceeds the batch token budget".into()));
            }
        }
        for batch in batches {
            step += 1;
            let batch_seed = derive_seed(cfg.seed ^ 0x5eed, step);
            let model_ref: &Model = model;
            let results = par_map(&batch.records, |k, &i| -> Result<(LossBreakdown, Vec<Option<Tensor>>)> {
                let mut g = Graph::new(true, derive_seed(batch_seed, k as u64));
                let (loss, parts) = record_loss(model_ref, &mut g, &train_set[i], cfg.ce_weight)?;
                let grads = g.backward(loss)?;
                Ok((parts, grads.param_grads(&model_ref.params.store)))
            });
            let store = &model.params.store;
            let mut total: Vec<Option<Tensor>> = store
                .ids()
                .map(|id| {
                    let [r, c] = store.value(id).shape();
                    Some(Tensor::zeros(r, c))
                })
                .collect();
            let mut sums = [0.0; 3];
            for res in results {
                let (parts, grads) = res?;
                if !parts.combined.is_finite() {
                    return Err(Error::Diverged {
                        step: step as usize,
                        detail: format!("non-finite loss ce={} aux={}", parts.ce, parts.aux),
                    });
                }
                sums[0] += parts.ce;
                sums[1] += parts.aux;
                sums[2] += parts.combined;
                for (acc, g) in total.iter_mut().zip(grads) {
                    if let (Some(acc), Some(g)) = (acc.as_mut(), g) {
                        acc.add_assign(&g);
                    }
                }
            }
            let k = batch.records.len() as f64;
            for g in total.iter_mut().flatten() {
                g.scale_assign(1.0 / k);
            }
            let grad_norm = clip_global_norm(&mut total, cfg.clip_norm);
            if !grad_norm.is_finite() {
                return Err(Error::Diverged { step: step as usize, detail: "non-finite gradient norm".into() });
            }
            let lr = cfg.lr_scale * lr_schedule(step, d_model, cfg.warmup)?;
            adam.step(&mut model.params.store, &mut total, lr)?;

            let mut entry = LogEntry {
                step,
                lr,
                train: LossBreakdown {
                    ce: sums[0] / k,
                    aux: sums[1] / k,
                    combined: sums[2] / k,
                    weight: cfg.ce_weight,
                },
                grad_norm,
                dev: None,
            };
            let out_of_time = cfg.max_seconds.is_some_and(|s| start.elapsed().as_secs_f64() >= s);
            let last = step >= cfg.max_steps || out_of_time;
            if step.is_multiple_of(cfg.eval_every) || last {
                let dev = evaluate(model, dev_set, cfg.ce_weight)?.combined;
                if !dev.is_finite() {
                    return Err(Error::Diverged { step: step as usize, detail: "non-finite dev loss".into() });
                }
                entry.dev = Some(dev);
                let verdict = stopper.observe(step, dev);
                if verdict == Verdict::Improved {
                    best.clone_from(&model.params.store);
                }
                on_eval(&entry);
                log.push(entry);
                if verdict == Verdict::Stop {
                    stop = StopReason::EarlyStop;
                    break 'outer;
                }
            } else {
                log.push(entry);
            }
            if out_of_time {
                stop = StopReason::TimeLimit;
                break 'outer;
            }
            if step >= cfg.max_steps {
                break 'outer;
            }
        }
    }
    model.params.store.assign_from(&best)?;
    Ok(TrainReport { log, steps: step, best_step: stopper.best_step(), best_dev: stopper.best(), stop, skipped })
}
