use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::task::Utterance;
use super::ModelError;
use crate::ctc::{
    column_sums, cross_entropy_teacher_forced, ctc_forward, inter_ctc_loss_with_targets, joint_loss, log_softmax_rows,
    self_condition, self_condition_backward, softmax_backward, softmax_rows, LogPosteriorGrid, LossConfig, Objective,
    TargetSequence,
};

/// Decoder id shared by the start and end-of-sequence symbol.
pub const SOS_EOS: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Number of encoder blocks `M`.
    pub layers: usize,
    /// CTC classes including blank.
    pub phone_classes: usize,
    /// Character classes (blank and UNK included) for hierarchical heads.
    pub char_classes: usize,
    /// Positions covered by the decoder's position table (targets plus EOS).
    pub max_decoder_len: usize,
    pub init_scale: f64,
    /// Start every posterior head at zero (uniform posteriors).
    pub zero_heads: bool,
    /// Start self-conditioning projections at random values instead of zero.
    pub random_conditioning: bool,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dim: usize, layers: usize, phone_classes: usize) -> Self {
        ModelSpec {
            input_dim,
            hidden_dim,
            layers,
            phone_classes,
            char_classes: 0,
            max_decoder_len: 8,
            init_scale: 1.0,
            zero_heads: false,
            random_conditioning: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in x out`
    pub weight: Array2<f64>,
    /// `1 x out`
    pub bias: Array2<f64>,
}

impl Linear {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array2::zeros((1, outputs)),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, x: &Array2<f64>, grad_out: &Array2<f64>, grads: &mut Linear) -> Array2<f64> {
        grads.weight += &x.t().dot(grad_out);
        grads.bias += &column_sums(grad_out);
        grad_out.dot(&self.weight.t())
    }
}

/// Frame-wise encoder: input projection, `M` blocks of linear + tanh, and
/// posterior heads at the final layer and at every configured intermediate layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyEncoder {
    pub input: Linear,
    pub layers: Vec<Linear>,
    /// Keyed by 1-based layer index; always contains layer `M`.
    pub heads: BTreeMap<usize, Linear>,
    /// Self-conditioning projections `D x classes`, keyed by layer.
    pub conditioning: BTreeMap<usize, Array2<f64>>,
}

/// Single-head cross-attention decoder, teacher-forced.
///
/// Position `n` reads the embedding of the previous token plus a position
/// embedding, attends over the final encoder states, and predicts token `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDecoder {
    pub embed: Array2<f64>,
    pub position: Array2<f64>,
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub output: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub spec: ModelSpec,
    pub encoder: ToyEncoder,
    pub decoder: Option<ToyDecoder>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the parameter name, mixed with the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl ToyModel {
    /// Builds the parameter set `config` needs. Every parameter is drawn from
    /// its own seeded stream, so models that share parameter names start from
    /// identical values for them.
    pub fn new(spec: ModelSpec, config: &LossConfig, seed: u64) -> Result<Self, ModelError> {
        let mut model = Self::zeros(spec, config)?;
        let scale = model.spec.init_scale;
        let zero_heads = model.spec.zero_heads;
        let random_cond = model.spec.random_conditioning;
        for (name, param) in model.named_params_mut() {
            let is_head = name.starts_with("head");
            let is_cond = name.starts_with("cond");
            let is_bias = name.ends_with(".b");
            if is_bias || (is_head && zero_heads) || (is_cond && !random_cond) {
                continue;
            }
            let fan_in = if name.starts_with("dec.embed") || name.starts_with("dec.pos") {
                1
            } else {
                param.nrows()
            };
            let bound = scale / (fan_in as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &name));
            param.mapv_inplace(|_| rng.random_range(-bound..=bound));
        }
        Ok(model)
    }

    pub fn zeros(spec: ModelSpec, config: &LossConfig) -> Result<Self, ModelError> {
        config.validate()?;
        if spec.layers == 0 || spec.hidden_dim == 0 || spec.input_dim == 0 || spec.phone_classes < 2 {
            return Err(ModelError::Config("model dimensions must be positive".into()));
        }
        let d = spec.hidden_dim;
        let m = spec.layers;
        let intermediate = if config.objective.uses_intermediate_layers() {
            config.intermediate_layers.clone()
        } else {
            Vec::new()
        };
        if let Some(bad) = intermediate.iter().find(|&&s| s == 0 || s >= m) {
            return Err(ModelError::Config(format!(
                "intermediate layer {bad} must lie in 1..{m} (exclusive of the final layer)"
            )));
        }
        let layer_classes = if config.objective == Objective::Hierarchical {
            if spec.char_classes < 2 {
                return Err(ModelError::Config("hierarchical objective needs char_classes".into()));
            }
            spec.char_classes
        } else {
            spec.phone_classes
        };

        let mut heads = BTreeMap::new();
        heads.insert(m, Linear::zeros(d, spec.phone_classes));
        let mut conditioning = BTreeMap::new();
        for &s in &intermediate {
            heads.insert(s, Linear::zeros(d, layer_classes));
            if config.objective.self_conditions() {
                conditioning.insert(s, Array2::zeros((d, layer_classes)));
            }
        }
        let decoder = (config.objective == Objective::JointAttn).then(|| ToyDecoder {
            embed: Array2::zeros((spec.phone_classes, d)),
            position: Array2::zeros((spec.max_decoder_len.max(1), d)),
            query: Array2::zeros((d, d)),
            key: Array2::zeros((d, d)),
            value: Array2::zeros((d, d)),
            output: Linear::zeros(d, spec.phone_classes),
        });
        Ok(ToyModel {
            encoder: ToyEncoder {
                input: Linear::zeros(spec.input_dim, d),
                layers: (0..m).map(|_| Linear::zeros(d, d)).collect(),
                heads,
                conditioning,
            },
            decoder,
            spec,
        })
    }

    /// All-zero model with the same parameter shapes.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, p) in z.named_params_mut() {
            p.fill(0.0);
        }
        z
    }

    pub fn named_params(&self) -> Vec<(String, &Array2<f64>)> {
        let e = &self.encoder;
        let mut out: Vec<(String, &Array2<f64>)> =
            vec![("input.w".into(), &e.input.weight), ("input.b".into(), &e.input.bias)];
        for (i, l) in e.layers.iter().enumerate() {
            out.push((format!("layer{}.w", i + 1), &l.weight));
            out.push((format!("layer{}.b", i + 1), &l.bias));
        }
        for (m, h) in &e.heads {
            out.push((format!("head{m}.w"), &h.weight));
            out.push((format!("head{m}.b"), &h.bias));
        }
        for (s, c) in &e.conditioning {
            out.push((format!("cond{s}.w"), c));
        }
        if let Some(d) = &self.decoder {
            out.push(("dec.embed.w".into(), &d.embed));
            out.push(("dec.pos.w".into(), &d.position));
            out.push(("dec.query.w".into(), &d.query));
            out.push(("dec.key.w".into(), &d.key));
            out.push(("dec.value.w".into(), &d.value));
            out.push(("dec.out.w".into(), &d.output.weight));
            out.push(("dec.out.b".into(), &d.output.bias));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let e = &mut self.encoder;
        let mut out: Vec<(String, &mut Array2<f64>)> = vec![
            ("input.w".into(), &mut e.input.weight),
            ("input.b".into(), &mut e.input.bias),
        ];
        for (i, l) in e.layers.iter_mut().enumerate() {
            out.push((format!("layer{}.w", i + 1), &mut l.weight));
            out.push((format!("layer{}.b", i + 1), &mut l.bias));
        }
        for (m, h) in e.heads.iter_mut() {
            out.push((format!("head{m}.w"), &mut h.weight));
            out.push((format!("head{m}.b"), &mut h.bias));
        }
        for (s, c) in e.conditioning.iter_mut() {
            out.push((format!("cond{s}.w"), c));
        }
        if let Some(d) = &mut self.decoder {
            out.push(("dec.embed.w".into(), &mut d.embed));
            out.push(("dec.pos.w".into(), &mut d.position));
            out.push(("dec.query.w".into(), &mut d.query));
            out.push(("dec.key.w".into(), &mut d.key));
            out.push(("dec.value.w".into(), &mut d.value));
            out.push(("dec.out.w".into(), &mut d.output.weight));
            out.push(("dec.out.b".into(), &mut d.output.bias));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Checks that the configuration matches the parameters this model holds.
    pub fn check_config(&self, config: &LossConfig) -> Result<(), ModelError> {
        config.validate()?;
        let needs_decoder = config.objective == Objective::JointAttn;
        if needs_decoder != self.decoder.is_some() {
            return Err(ModelError::Config(format!(
                "{} objective {} a decoder",
                config.objective,
                if needs_decoder { "needs" } else { "does not use" }
            )));
        }
        if config.objective.uses_intermediate_layers() {
            for s in &config.intermediate_layers {
                if !self.encoder.heads.contains_key(s) {
                    return Err(ModelError::Config(format!("no posterior head at layer {s}")));
                }
                if config.objective.self_conditions() && !self.encoder.conditioning.contains_key(s) {
                    return Err(ModelError::Config(format!("no conditioning projection at layer {s}")));
                }
            }
        }
        Ok(())
    }
}

/// Activations kept for the backward pass.
struct EncoderPass {
    /// `inputs[m - 1]` is the input to block `m`; `inputs[0]` is the projected features.
    inputs: Vec<Array2<f64>>,
    /// `hidden[m - 1]` is the tanh output `H^m`.
    hidden: Vec<Array2<f64>>,
    /// Posterior grids at the intermediate heads.
    layer_grids: BTreeMap<usize, LogPosteriorGrid>,
    final_grid: LogPosteriorGrid,
}

struct DecoderPass {
    tokens_in: Vec<usize>,
    embedded: Array2<f64>,
    queries: Array2<f64>,
    keys: Array2<f64>,
    values: Array2<f64>,
    attention: Array2<f64>,
    output: Array2<f64>,
    logprobs: Array2<f64>,
    targets: Vec<usize>,
}

fn tanh_backward(activated: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
    grad * &activated.mapv(|h| 1.0 - h * h)
}

impl ToyModel {
    fn encode(&self, features: &Array2<f64>, conditioned: bool) -> Result<EncoderPass, ModelError> {
        let e = &self.encoder;
        let m = e.layers.len();
        let mut inputs = vec![e.input.forward(features)];
        let mut hidden = Vec::with_capacity(m);
        let mut layer_grids = BTreeMap::new();
        for (idx, layer) in e.layers.iter().enumerate() {
            let layer_no = idx + 1;
            let h = layer.forward(&inputs[idx]).mapv(f64::tanh);
            if layer_no < m {
                let next = match e.heads.get(&layer_no) {
                    Some(head) => {
                        let grid = LogPosteriorGrid::from_logits(&head.forward(&h))?;
                        let g = match e.conditioning.get(&layer_no).filter(|_| conditioned) {
                            Some(w) => self_condition(&h, &grid, w)?,
                            None => h.clone(),
                        };
                        layer_grids.insert(layer_no, grid);
                        g
                    }
                    None => h.clone(),
                };
                inputs.push(next);
            }
            hidden.push(h);
        }
        let final_grid = LogPosteriorGrid::from_logits(&e.heads[&m].forward(&hidden[m - 1]))?;
        Ok(EncoderPass {
            inputs,
            hidden,
            layer_grids,
            final_grid,
        })
    }

    /// Final-layer posteriors for decoding, conditioned as `objective` trains them.
    pub fn posteriors(&self, features: &Array2<f64>, objective: Objective) -> Result<LogPosteriorGrid, ModelError> {
        Ok(self.encode(features, objective.self_conditions())?.final_grid)
    }

    fn decode_teacher_forced(
        &self,
        encoder_out: &Array2<f64>,
        target: &TargetSequence,
    ) -> Result<DecoderPass, ModelError> {
        let dec = self
            .decoder
            .as_ref()
            .ok_or_else(|| ModelError::Config("model has no decoder".into()))?;
        let tokens_in: Vec<usize> = std::iter::once(SOS_EOS)
            .chain(target.labels().iter().copied())
            .collect();
        let targets: Vec<usize> = target
            .labels()
            .iter()
            .copied()
            .chain(std::iter::once(SOS_EOS))
            .collect();
        let positions = dec.position.nrows();
        let d = dec.embed.ncols();
        let mut embedded = Array2::zeros((tokens_in.len(), d));
        for (n, &tok) in tokens_in.iter().enumerate() {
            if tok >= dec.embed.nrows() {
                return Err(ModelError::Config(format!("token {tok} outside decoder vocabulary")));
            }
            let mut row = embedded.row_mut(n);
            row += &dec.embed.row(tok);
            row += &dec.position.row(n.min(positions - 1));
        }
        let queries = embedded.dot(&dec.query);
        let keys = encoder_out.dot(&dec.key);
        let values = encoder_out.dot(&dec.value);
        let scale = (d as f64).sqrt();
        let attention = softmax_rows(&(queries.dot(&keys.t()) / scale));
        let context = attention.dot(&values);
        let output = (&embedded + &context).mapv(f64::tanh);
        let logprobs = log_softmax_rows(&dec.output.forward(&output));
        Ok(DecoderPass {
            tokens_in,
            embedded,
            queries,
            keys,
            values,
            attention,
            output,
            logprobs,
            targets,
        })
    }

    /// Backpropagates decoder logit gradients; returns dL/d(encoder output).
    fn decoder_backward(
        &self,
        pass: &DecoderPass,
        encoder_out: &Array2<f64>,
        grad_logits: &Array2<f64>,
        grads: &mut ToyDecoder,
    ) -> Array2<f64> {
        let dec = self.decoder.as_ref().expect("decoder present");
        let d = dec.embed.ncols();
        let scale = (d as f64).sqrt();
        let grad_out = dec.output.backward(&pass.output, grad_logits, &mut grads.output);
        let grad_pre = tanh_backward(&pass.output, &grad_out);
        let grad_context = &grad_pre;
        let mut grad_embedded = grad_pre.clone();

        let grad_attention = grad_context.dot(&pass.values.t());
        let grad_values = pass.attention.t().dot(grad_context);
        let grad_scores = softmax_backward(&pass.attention, &grad_attention) / scale;
        let grad_queries = grad_scores.dot(&pass.keys);
        let grad_keys = grad_scores.t().dot(&pass.queries);

        grads.query += &pass.embedded.t().dot(&grad_queries);
        grad_embedded += &grad_queries.dot(&dec.query.t());
        grads.key += &encoder_out.t().dot(&grad_keys);
        grads.value += &encoder_out.t().dot(&grad_values);
        let grad_encoder = grad_keys.dot(&dec.key.t()) + grad_values.dot(&dec.value.t());

        let positions = dec.position.nrows();
        for (n, &tok) in pass.tokens_in.iter().enumerate() {
            let g = grad_embedded.row(n);
            let mut e = grads.embed.row_mut(tok);
            e += &g;
            let mut p = grads.position.row_mut(n.min(positions - 1));
            p += &g;
        }
        grad_encoder
    }

    /// Loss for one utterance; with `grads`, accumulates `weight * dLoss/dParam`.
    /// Returns `None` when the utterance has no valid alignment under a
    /// loss term with non-zero weight.
    pub fn utterance_loss(
        &self,
        utt: &Utterance,
        config: &LossConfig,
        grads: Option<(&mut ToyModel, f64)>,
    ) -> Result<Option<f64>, ModelError> {
        let objective = config.objective;
        let pass = self.encode(&utt.features, objective.self_conditions())?;
        let m = self.encoder.layers.len();

        let (loss, final_grad, layer_grads, decoder) = match objective {
            Objective::Vanilla => {
                let r = ctc_forward(&pass.final_grid, &utt.phones)?;
                (r.loss, r.grad_logits, BTreeMap::new(), None)
            }
            Objective::Inter | Objective::SelfCond | Objective::Hierarchical => {
                let layer_target = if objective == Objective::Hierarchical {
                    &utt.chars
                } else {
                    &utt.phones
                };
                let r = inter_ctc_loss_with_targets(
                    &pass.layer_grids,
                    &pass.final_grid,
                    &utt.phones,
                    layer_target,
                    config,
                )?;
                (r.loss, r.final_grad, r.layer_grads, None)
            }
            Objective::JointAttn => {
                let ctc = ctc_forward(&pass.final_grid, &utt.phones)?;
                let dp = self.decode_teacher_forced(&pass.hidden[m - 1], &utt.phones)?;
                let ce = cross_entropy_teacher_forced(&dp.logprobs, &dp.targets)?;
                let joint = joint_loss(&ctc, &ce, config.lambda)?;
                (
                    joint.loss,
                    joint.ctc_grad_logits,
                    BTreeMap::new(),
                    Some((dp, joint.ce_grad_logits)),
                )
            }
        };
        if !loss.is_finite() {
            return Ok(None);
        }
        let Some((grads, weight)) = grads else {
            return Ok(Some(loss));
        };

        let e = &self.encoder;
        let ge = &mut grads.encoder;
        let final_grad = final_grad * weight;
        let mut grad_hidden = e.heads[&m].backward(
            &pass.hidden[m - 1],
            &final_grad,
            ge.heads.get_mut(&m).expect("final head"),
        );
        if let Some((dp, ce_grad)) = decoder {
            let gd = grads.decoder.as_mut().expect("decoder gradients");
            grad_hidden += &self.decoder_backward(&dp, &pass.hidden[m - 1], &(ce_grad * weight), gd);
        }

        for layer_no in (1..=m).rev() {
            let idx = layer_no - 1;
            let grad_pre = tanh_backward(&pass.hidden[idx], &grad_hidden);
            let grad_input = e.layers[idx].backward(&pass.inputs[idx], &grad_pre, &mut ge.layers[idx]);
            if idx == 0 {
                e.input.backward(&utt.features, &grad_input, &mut ge.input);
                break;
            }
            // `grad_input` is dL/dG^s for s = layer_no - 1.
            let s = idx;
            grad_hidden = match pass.layer_grids.get(&s) {
                Some(grid) => {
                    let mut grad_logits = layer_grads
                        .get(&s)
                        .map(|g| g * weight)
                        .unwrap_or_else(|| Array2::zeros(grid.values().raw_dim()));
                    if let Some(w) = e.conditioning.get(&s).filter(|_| objective.self_conditions()) {
                        let sc = self_condition_backward(&grad_input, grid, w)?;
                        *ge.conditioning.get_mut(&s).expect("conditioning gradient") += &sc.cond_weight;
                        grad_logits += &sc.logits;
                    }
                    let head_grad =
                        e.heads[&s].backward(&pass.hidden[s - 1], &grad_logits, ge.heads.get_mut(&s).expect("head"));
                    grad_input + head_grad
                }
                None => grad_input,
            };
        }
        Ok(Some(loss))
    }
}

/// Mean loss over the feasible utterances of a batch with its gradient.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss: f64,
    pub grads: ToyModel,
    pub feasible: usize,
    pub skipped: Vec<String>,
}

/// Forward and backward pass over a batch. The loss is the mean over
/// utterances with a valid alignment; infeasible ones are skipped.
pub fn forward_backward_step(
    model: &ToyModel,
    batch: &[Utterance],
    config: &LossConfig,
) -> Result<StepResult, ModelError> {
    model.check_config(config)?;
    let mut feasible = Vec::new();
    let mut skipped = Vec::new();
    for utt in batch {
        match model.utterance_loss(utt, config, None)? {
            Some(l) => feasible.push((utt, l)),
            None => skipped.push(utt.id.clone()),
        }
    }
    let mut grads = model.zeros_like();
    if feasible.is_empty() {
        return Ok(StepResult {
            loss: f64::INFINITY,
            grads,
            feasible: 0,
            skipped,
        });
    }
    let weight = 1.0 / feasible.len() as f64;
    let mut total = 0.0;
    for (utt, loss) in &feasible {
        model.utterance_loss(utt, config, Some((&mut grads, weight)))?;
        total += loss;
    }
    for (name, g) in grads.named_params() {
        if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
            let (r, c) = (bad / g.ncols(), bad % g.ncols());
            return Err(ModelError::NonFinite(format!(
                "gradient of {name}[{r},{c}] = {} (batch loss {total})",
                g[[r, c]]
            )));
        }
    }
    Ok(StepResult {
        loss: total * weight,
        grads,
        feasible: feasible.len(),
        skipped,
    })
}

/// Mean batch loss without gradients.
pub fn batch_loss(model: &ToyModel, batch: &[Utterance], config: &LossConfig) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for utt in batch {
        if let Some(l) = model.utterance_loss(utt, config, None)? {
            total += l;
            count += 1;
        }
    }
    Ok(if count == 0 {
        f64::INFINITY
    } else {
        total / count as f64
    })
}

/// Central finite-difference gradient of [`batch_loss`] for every parameter.
pub fn numerical_gradient(
    model: &ToyModel,
    batch: &[Utterance],
    config: &LossConfig,
    step: f64,
) -> Result<ToyModel, ModelError> {
    let mut probe = model.clone();
    let mut out = model.zeros_like();
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    for name in names {
        let len = model
            .named_params()
            .into_iter()
            .find(|(n, _)| *n == name)
            .expect("param")
            .1
            .len();
        for i in 0..len {
            let original = param_entry(&mut probe, &name, i, None);
            param_entry(&mut probe, &name, i, Some(original + step));
            let plus = batch_loss(&probe, batch, config)?;
            param_entry(&mut probe, &name, i, Some(original - step));
            let minus = batch_loss(&probe, batch, config)?;
            param_entry(&mut probe, &name, i, Some(original));
            param_entry(&mut out, &name, i, Some((plus - minus) / (2.0 * step)));
        }
    }
    Ok(out)
}

fn param_entry(model: &mut ToyModel, name: &str, index: usize, set: Option<f64>) -> f64 {
    let (_, p) = model
        .named_params_mut()
        .into_iter()
        .find(|(n, _)| n == name)
        .expect("parameter exists");
    let cols = p.ncols();
    let slot = &mut p[[index / cols, index % cols]];
    if let Some(v) = set {
        *slot = v;
    }
    *slot
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::{SyntheticTask, TaskConfig};

    fn tiny_task() -> SyntheticTask {
        SyntheticTask::generate(TaskConfig {
            num_phones: 3,
            feature_dim: 3,
            num_train: 3,
            num_dev: 1,
            min_phones: 1,
            max_phones: 2,
            ..TaskConfig::default()
        })
        .unwrap()
    }

    fn max_rel_error(a: &ToyModel, b: &ToyModel) -> f64 {
        a.named_params()
            .iter()
            .zip(b.named_params())
            .flat_map(|((_, x), (_, y))| {
                x.iter()
                    .zip(y.iter())
                    .map(|(p, q)| (p - q).abs() / p.abs().max(q.abs()).max(1e-6))
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let task = tiny_task();
        let spec = ModelSpec {
            random_conditioning: true,
            ..ModelSpec::for_task(&task, 4, 3)
        };
        for config in [
            LossConfig::vanilla(),
            LossConfig::with_layers(Objective::Inter, vec![1, 2], 0.3),
            LossConfig::with_layers(Objective::SelfCond, vec![1, 2], 0.3),
            LossConfig::with_layers(Objective::Hierarchical, vec![2], 0.5),
            LossConfig::joint(0.3),
        ] {
            let model = ToyModel::new(spec.clone(), &config, 5).unwrap();
            let analytic = forward_backward_step(&model, &task.train, &config).unwrap();
            let numeric = numerical_gradient(&model, &task.train, &config, 1e-5).unwrap();
            let err = max_rel_error(&analytic.grads, &numeric);
            assert!(err < 1e-4, "{}: {err}", config.objective);
        }
    }

    #[test]
    fn zero_lambda_inter_matches_vanilla() {
        let task = tiny_task();
        let spec = ModelSpec::for_task(&task, 4, 3);
        let inter = LossConfig::with_layers(Objective::Inter, vec![1], 0.0);
        let a = ToyModel::new(spec.clone(), &LossConfig::vanilla(), 9).unwrap();
        let b = ToyModel::new(spec, &inter, 9).unwrap();
        let ra = forward_backward_step(&a, &task.train, &LossConfig::vanilla()).unwrap();
        let rb = forward_backward_step(&b, &task.train, &inter).unwrap();
        assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
        for (name, g) in ra.grads.named_params() {
            let other = rb.grads.named_params().into_iter().find(|(n, _)| *n == name).unwrap().1;
            assert_eq!(g, other, "{name}");
        }
    }

    #[test]
    fn config_must_match_model() {
        let task = tiny_task();
        let spec = ModelSpec::for_task(&task, 4, 2);
        assert!(ToyModel::new(
            spec.clone(),
            &LossConfig::with_layers(Objective::Inter, vec![2], 0.3),
            1
        )
        .is_err());
        let m = ToyModel::new(spec, &LossConfig::vanilla(), 1).unwrap();
        assert!(m.check_config(&LossConfig::joint(0.5)).is_err());
    }
}
