//! Minibatch training with Adam and dev-set BLEU tracking.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::ParallelCorpus;
use crate::embedder::Mode;
use crate::error::{Error, Result};
use crate::eval::corpus_bleu;
use crate::model::{Model, SourceInput};
use crate::optim::{clip_grad_norm, Adam};
use crate::rng;
use crate::tensor::Params;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Target tokens per optimizer step (a batch closes once reached).
    pub batch_size: usize,
    pub lr: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Dev sentences decoded at each evaluation.
    pub dev_limit: usize,
    /// Stop once dev BLEU reaches this value.
    pub target_bleu: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 200,
            lr: 2e-3,
            max_steps: 1000,
            eval_every: 100,
            seed: 1,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            dev_limit: 200,
            target_bleu: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if self.eval_every == 0 || self.max_steps == 0 {
            return Err(Error::invalid("max_steps and eval_every must be >= 1"));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must be in [0,1)"));
        }
        Ok(())
    }
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean label-smoothed loss per target token since the previous record.
    pub train_loss: f64,
    pub dev_bleu: Option<f64>,
}

pub fn dev_bleu(model: &Model, dev: &ParallelCorpus, limit: usize) -> Result<f64> {
    let dev = dev.head(limit);
    let hyps = model.translate_all(&dev.source)?;
    Ok(corpus_bleu(&hyps, &dev.target)?.bleu)
}

/// Trains `model` in place. `on_record` sees every metrics record as it is
/// produced (the CLI appends them to a JSON-lines file).
pub fn train(
    model: &mut Model,
    data: &ParallelCorpus,
    dev: Option<&ParallelCorpus>,
    tcfg: &TrainConfig,
    on_record: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<Vec<MetricsRecord>> {
    tcfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let targets: Vec<Vec<usize>> = data
        .target
        .iter()
        .map(|t| model.prepare_target(t).map(|s| s.ids))
        .collect::<Result<_>>()?;
    // token sources are cheap to hold; rendered ones are rebuilt per use
    let token_sources: Option<Vec<SourceInput>> = match model.source_bpe() {
        Some(_) => Some(
            data.source
                .iter()
                .map(|s| model.prepare_source(s))
                .collect::<Result<_>>()?,
        ),
        None => None,
    };

    let eps = model.config.label_smoothing;
    let mut opt = Adam::new(tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps);
    let mut grad = model.params.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut epoch = 0;
    let (mut loss_sum, mut loss_tokens) = (0.0, 0usize);
    let mut records = Vec::new();

    for step in 1..=tcfg.max_steps {
        let mut batch = Vec::new();
        let mut tokens = 0;
        while tokens < tcfg.batch_size {
            if cursor == order.len() {
                epoch += 1;
                order.shuffle(&mut rng::stream(tcfg.seed, epoch as u64));
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            tokens += targets[i].len() - 1;
            batch.push(i);
        }

        grad.zero();
        let scale = 1.0 / tokens as f64;
        let mut step_loss = 0.0;
        for &i in &batch {
            let owned;
            let src = match &token_sources {
                Some(v) => &v[i],
                None => {
                    owned = model.prepare_source(&data.source[i])?;
                    &owned
                }
            };
            let (l, _, stats) = model
                .params
                .loss_and_grad(src, &targets[i], eps, scale, Mode::Train, &mut grad)?;
            step_loss += l;
            model.params.update_running(&stats);
        }
        if !step_loss.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: step_loss / tokens as f64,
            });
        }
        clip_grad_norm(&mut grad, tcfg.clip_norm);
        opt.step(&mut model.params, &grad);
        loss_sum += step_loss;
        loss_tokens += tokens;

        if step % tcfg.eval_every == 0 || step == tcfg.max_steps {
            let bleu = match dev {
                Some(d) if !d.is_empty() => Some(dev_bleu(model, d, tcfg.dev_limit)?),
                _ => None,
            };
            let rec = MetricsRecord {
                step,
                epoch,
                train_loss: loss_sum / loss_tokens as f64,
                dev_bleu: bleu,
            };
            on_record(&rec)?;
            records.push(rec);
            loss_sum = 0.0;
            loss_tokens = 0;
            if let (Some(goal), Some(b)) = (tcfg.target_bleu, bleu) {
                if b >= goal {
                    break;
                }
            }
        }
    }
    Ok(records)
}
