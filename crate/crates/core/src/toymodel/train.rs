use indexmap::IndexMap;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{batch_loss, forward_backward_step, ModelSpec, ToyModel};
use super::task::{SyntheticTask, Utterance};
use super::ModelError;
use crate::ctc::{LossConfig, Objective};
use crate::decode::greedy_decode;
use crate::ipa::{FeatureTable, PhoneSequence};
use crate::metrics::score_utterance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Trace every this many steps; the first and last step are always traced.
    pub eval_interval: usize,
    /// Utterances per step; 0 uses the whole training set.
    pub batch_size: usize,
    /// Seeds parameter initialization and batch shuffling.
    pub seed: u64,
    /// Keep self-conditioning projections at their initial values.
    pub freeze_conditioning: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 0.05,
            eval_interval: 100,
            batch_size: 0,
            seed: 17,
            freeze_conditioning: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Micro-averaged percentages.
    pub per: f64,
    pub pfer: f64,
}

/// One line of the JSON-lines training trace. `step` counts applied updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    /// Mean loss over the training set.
    pub loss: f64,
    pub train_per: f64,
    pub train_pfer: f64,
    pub dev_per: f64,
    pub dev_pfer: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub trace: Vec<TraceRecord>,
}

impl TrainOutcome {
    pub fn trace_jsonl(&self) -> String {
        self.trace
            .iter()
            .map(|r| serde_json::to_string(r).expect("trace serializes") + "\n")
            .collect()
    }

    pub fn last(&self) -> &TraceRecord {
        self.trace.last().expect("trace is never empty")
    }
}

/// Greedy-decodes the final head and scores against the reference phones.
pub fn evaluate(
    model: &ToyModel,
    utterances: &[Utterance],
    objective: Objective,
    symbols: &[String],
    table: &FeatureTable,
) -> Result<EvalMetrics, ModelError> {
    let to_phones = |labels: &[usize]| PhoneSequence {
        utterance_id: String::new(),
        language: String::new(),
        phones: labels.iter().map(|&k| table.resolve(&symbols[k])).collect(),
    };
    let (mut per, mut pfer, mut n) = (0.0, 0.0, 0usize);
    for utt in utterances {
        let hyp = greedy_decode(&model.posteriors(&utt.features, objective)?);
        let (score, _) = score_utterance(&to_phones(utt.phones.labels()), &to_phones(&hyp.labels))
            .map_err(|e| ModelError::Config(e.to_string()))?;
        per += score.per_cost;
        pfer += score.pfer_cost;
        n += score.ref_length;
    }
    Ok(if n == 0 {
        EvalMetrics { per: 0.0, pfer: 0.0 }
    } else {
        EvalMetrics {
            per: 100.0 * per / n as f64,
            pfer: 100.0 * pfer / n as f64,
        }
    })
}

fn record(
    step: usize,
    model: &ToyModel,
    task: &SyntheticTask,
    config: &LossConfig,
    table: &FeatureTable,
) -> Result<TraceRecord, ModelError> {
    let train = evaluate(model, &task.train, config.objective, &task.symbols, table)?;
    let dev = evaluate(model, &task.dev, config.objective, &task.symbols, table)?;
    Ok(TraceRecord {
        step,
        loss: batch_loss(model, &task.train, config)?,
        train_per: train.per,
        train_pfer: train.pfer,
        dev_per: dev.per,
        dev_pfer: dev.pfer,
    })
}

/// Plain gradient descent with a constant learning rate.
///
/// Deterministic: the same model, task, configs and seed give a bit-identical
/// trace and final model.
pub fn train(
    mut model: ToyModel,
    task: &SyntheticTask,
    config: &LossConfig,
    train_config: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    model.check_config(config)?;
    if !(train_config.lr.is_finite() && train_config.lr > 0.0) {
        return Err(ModelError::Config("learning rate must be positive".into()));
    }
    let table = FeatureTable::default_table();
    let interval = train_config.eval_interval.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let batch_size = match train_config.batch_size {
        0 => order.len(),
        b => b.min(order.len()),
    };
    let mut cursor = order.len();
    let mut batch: Vec<Utterance> = Vec::with_capacity(batch_size);
    let mut trace = Vec::new();

    for step in 0..train_config.steps {
        if step % interval == 0 {
            trace.push(record(step, &model, task, config, &table)?);
        }
        let result = if batch_size == order.len() {
            forward_backward_step(&model, &task.train, config)
        } else {
            batch.clear();
            while batch.len() < batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(task.train[order[cursor]].clone());
                cursor += 1;
            }
            forward_backward_step(&model, &batch, config)
        };
        let result = match result {
            Err(ModelError::NonFinite(message)) => {
                return Err(ModelError::NonFinite(format!("step {step}: {message}")));
            }
            other => other?,
        };
        if !result.loss.is_finite() {
            return Err(ModelError::Diverged {
                step,
                loss: result.loss,
                trace,
            });
        }
        for ((name, param), (_, grad)) in model.named_params_mut().into_iter().zip(result.grads.named_params()) {
            if train_config.freeze_conditioning && name.starts_with("cond") {
                continue;
            }
            param.scaled_add(-train_config.lr, grad);
        }
    }
    let last = record(train_config.steps, &model, task, config, &table)?;
    if !last.loss.is_finite() {
        return Err(ModelError::Diverged {
            step: train_config.steps,
            loss: last.loss,
            trace,
        });
    }
    trace.push(last);
    Ok(TrainOutcome { model, trace })
}

/// Model spec sized for a synthetic task.
impl ModelSpec {
    pub fn for_task(task: &SyntheticTask, hidden_dim: usize, layers: usize) -> Self {
        ModelSpec {
            char_classes: task.char_classes(),
            max_decoder_len: task.max_target_len() + 1,
            ..ModelSpec::new(task.config.feature_dim, hidden_dim, layers, task.phone_classes())
        }
    }
}

/// JSON checkpoint: the loss configuration, the model spec, and every
/// parameter matrix under its name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub loss_config: LossConfig,
    pub spec: ModelSpec,
    pub params: IndexMap<String, Array2<f64>>,
}

const CHECKPOINT_FORMAT: &str = "phonex-toymodel-1";

impl Checkpoint {
    pub fn from_model(model: &ToyModel, loss_config: &LossConfig) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            loss_config: loss_config.clone(),
            spec: model.spec.clone(),
            params: model.named_params().into_iter().map(|(n, p)| (n, p.clone())).collect(),
        }
    }

    pub fn into_model(self) -> Result<ToyModel, ModelError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Config(format!(
                "unknown checkpoint format {:?}",
                self.format
            )));
        }
        let mut model = ToyModel::zeros(self.spec, &self.loss_config)?;
        let expected = model.named_params().len();
        if expected != self.params.len() {
            return Err(ModelError::Config(format!(
                "checkpoint has {} parameters, model needs {expected}",
                self.params.len()
            )));
        }
        for (name, slot) in model.named_params_mut() {
            let value = self
                .params
                .get(&name)
                .ok_or_else(|| ModelError::Config(format!("checkpoint lacks {name}")))?;
            if value.dim() != slot.dim() {
                return Err(ModelError::Config(format!(
                    "{name}: shape {:?}, expected {:?}",
                    value.dim(),
                    slot.dim()
                )));
            }
            slot.assign(value);
        }
        Ok(model)
    }
}
