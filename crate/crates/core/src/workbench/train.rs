//! Plain SGD training on a task dataset.

use serde::{Deserialize, Serialize};

use super::backprop::{loss_and_grad, Example};
use super::task::Dataset;
use super::vocab::MIN_VOCAB;
use crate::error::{Error, Result};
use crate::evaluator::evaluate;
use crate::model::{ModelConfig, MoEModel};
use crate::rng::{derive_seed, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Training stops once held-out ICA reaches this value. Since
    /// `ica ≤ pia`, PIA is then at least as high.
    pub target_accuracy: f64,
    /// Held-out evaluation interval in steps.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            learning_rate: 0.1,
            batch_size: 16,
            seed: 0,
            target_accuracy: 0.95,
            eval_every: 250,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "steps, batch_size and eval_every must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(Error::Config("target accuracy must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MoEModel,
    pub steps_run: usize,
    /// Mini-batch loss before each update.
    pub loss_history: Vec<f64>,
    pub eval_ica: f64,
    pub eval_pia: f64,
    pub reached_target: bool,
}

fn sgd_step(model: &mut MoEModel, grad: &MoEModel, lr: f64) {
    for (w, g) in model.tensors_mut().into_iter().zip(grad.tensors()) {
        for (wi, gi) in w.data_mut().iter_mut().zip(g.data()) {
            *wi -= lr * gi;
        }
    }
}

/// Trains a freshly initialized model on `data`, evaluating on `held_out`
/// every `eval_every` steps and after the last step.
pub fn train(
    config: &ModelConfig,
    data: &Dataset,
    held_out: &Dataset,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    tc.validate()?;
    if data.is_empty() || held_out.is_empty() {
        return Err(Error::Config("training and held-out data must be non-empty".into()));
    }
    if config.vocab_size < MIN_VOCAB {
        return Err(Error::Config(format!(
            "vocab_size must be at least {MIN_VOCAB} for the task vocabulary"
        )));
    }
    for d in [data, held_out] {
        let need = d.task.max_sequence_len();
        if need > config.max_seq_len {
            return Err(Error::Config(format!(
                "task sequences need {need} positions, max_seq_len is {}",
                config.max_seq_len
            )));
        }
    }

    let mut model = MoEModel::init(*config, derive_seed(tc.seed, &[0]))?;
    let mut rng = RngStream::new(tc.seed).child(&[1]);
    let examples: Vec<Example> = data.samples.iter().map(Example::from_sample).collect();
    let mut loss_history = Vec::with_capacity(tc.steps);
    let (mut ica, mut pia) = (0.0, 0.0);
    let mut steps_run = 0;
    let mut batch = Vec::with_capacity(tc.batch_size);
    for step in 0..tc.steps {
        batch.clear();
        for _ in 0..tc.batch_size {
            batch.push(examples[rng.below(examples.len() as u64) as usize].clone());
        }
        let (loss, grad) = loss_and_grad(&model, &batch);
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("loss became {loss}"),
            });
        }
        loss_history.push(loss);
        sgd_step(&mut model, &grad, tc.learning_rate);
        if !model.is_finite() {
            return Err(Error::Training {
                step,
                reason: "parameters became non-finite".into(),
            });
        }
        steps_run = step + 1;
        if steps_run % tc.eval_every == 0 || steps_run == tc.steps {
            let outcome = evaluate(&model, held_out, false)?.outcome;
            (ica, pia) = (outcome.ica, outcome.pia);
            if ica >= tc.target_accuracy {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        steps_run,
        loss_history,
        eval_ica: ica,
        eval_pia: pia,
        reached_target: ica >= tc.target_accuracy,
    })
}
