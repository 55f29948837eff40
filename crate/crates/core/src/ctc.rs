//! CTC-family objectives over frame-level log-posterior grids.
//!
//! Blank is always class 0. Every loss is returned together with its analytic
//! gradient with respect to the pre-softmax logits that produced the grid.
//! The forward-backward recursion runs in log space; zero probabilities are
//! `f64::NEG_INFINITY` and every combination goes through [`log_sum_exp`].

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BLANK: usize = 0;

/// Row normalization tolerance accepted by [`LogPosteriorGrid::new`].
pub const ROW_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum CtcError {
    #[error("grid has no frames")]
    EmptyGrid,
    #[error("grid has no classes")]
    NoClasses,
    #[error("frame {frame}: log-probabilities sum to {log_sum} in log space, expected 0")]
    NotNormalized { frame: usize, log_sum: f64 },
    #[error("frame {frame}: invalid log-probability {value}")]
    InvalidValue { frame: usize, value: f64 },
    #[error("label {label} at position {position} outside 1..{num_classes}")]
    LabelOutOfRange {
        label: usize,
        position: usize,
        num_classes: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("intermediate layer {0} has no posterior grid")]
    MissingLayer(usize),
    #[error("posterior grid supplied for layer {0}, which is not configured")]
    UnexpectedLayer(usize),
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("lambda {0} outside [0, 1]")]
    LambdaOutOfRange(f64),
}

#[inline]
pub fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

pub fn log_sum_exp_slice(xs: ArrayView1<f64>) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let lse = log_sum_exp_slice(row.view());
        row.mapv_inplace(|x| x - lse);
    }
    out
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    log_softmax_rows(logits).mapv(f64::exp)
}

/// Backpropagates `grad_probs` (dL/dp) through a row-wise softmax `probs`.
pub fn softmax_backward(probs: &Array2<f64>, grad_probs: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.raw_dim());
    for ((p, g), mut o) in probs.rows().into_iter().zip(grad_probs.rows()).zip(out.rows_mut()) {
        let dot: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for ((o, &pk), &gk) in o.iter_mut().zip(p.iter()).zip(g.iter()) {
            *o = pk * (gk - dot);
        }
    }
    out
}

/// `L x (|V|+1)` matrix of per-frame log-probabilities; column 0 is blank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogPosteriorGrid {
    values: Array2<f64>,
}

impl LogPosteriorGrid {
    pub fn new(values: Array2<f64>) -> Result<Self, CtcError> {
        if values.nrows() == 0 {
            return Err(CtcError::EmptyGrid);
        }
        if values.ncols() == 0 {
            return Err(CtcError::NoClasses);
        }
        for (frame, row) in values.rows().into_iter().enumerate() {
            if let Some(&value) = row.iter().find(|v| v.is_nan() || **v == f64::INFINITY) {
                return Err(CtcError::InvalidValue { frame, value });
            }
            let log_sum = log_sum_exp_slice(row);
            if log_sum.is_nan() || log_sum.abs() > ROW_TOLERANCE {
                return Err(CtcError::NotNormalized { frame, log_sum });
            }
        }
        Ok(LogPosteriorGrid { values })
    }

    pub fn from_logits(logits: &Array2<f64>) -> Result<Self, CtcError> {
        if logits.nrows() == 0 {
            return Err(CtcError::EmptyGrid);
        }
        if logits.ncols() == 0 {
            return Err(CtcError::NoClasses);
        }
        if let Some((idx, &value)) = logits.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(CtcError::InvalidValue {
                frame: idx / logits.ncols(),
                value,
            });
        }
        Ok(LogPosteriorGrid {
            values: log_softmax_rows(logits),
        })
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    /// `|V| + 1`, blank included.
    pub fn num_classes(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn probabilities(&self) -> Array2<f64> {
        self.values.mapv(f64::exp)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }
}

/// Label sequence over `1..num_classes`; blank excluded.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TargetSequence(pub Vec<usize>);

impl TargetSequence {
    pub fn new(labels: Vec<usize>) -> Self {
        TargetSequence(labels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn validate(&self, num_classes: usize) -> Result<(), CtcError> {
        for (position, &label) in self.0.iter().enumerate() {
            if label == BLANK || label >= num_classes {
                return Err(CtcError::LabelOutOfRange {
                    label,
                    position,
                    num_classes,
                });
            }
        }
        Ok(())
    }

    /// Blank-interleaved sequence of length `2N + 1`.
    pub fn extended(&self) -> Vec<usize> {
        let mut ext = Vec::with_capacity(2 * self.0.len() + 1);
        ext.push(BLANK);
        for &label in &self.0 {
            ext.push(label);
            ext.push(BLANK);
        }
        ext
    }

    /// Fewest frames any valid alignment needs: `N` plus one per adjacent repeat.
    pub fn min_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtcResult {
    /// `-log p(y|x)` in nats; `+inf` when no alignment exists.
    pub loss: f64,
    /// Gradient of `loss` with respect to the logits behind the grid.
    pub grad_logits: Array2<f64>,
    /// Per-class occupancy; `None` for infeasible targets.
    pub occupancy: Option<Array2<f64>>,
}

impl CtcResult {
    pub fn is_feasible(&self) -> bool {
        self.loss.is_finite()
    }
}

/// Forward and backward lattices, kept for debugging. `log_beta` excludes the
/// emission at its own frame. Non-finite entries serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtcLattice {
    pub extended: Vec<usize>,
    pub log_alpha: Array2<f64>,
    pub log_beta: Array2<f64>,
    pub log_likelihood: f64,
}

impl CtcLattice {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("lattice serializes")
    }
}

pub fn ctc_lattice(grid: &LogPosteriorGrid, target: &TargetSequence) -> Result<CtcLattice, CtcError> {
    target.validate(grid.num_classes())?;
    let lp = grid.values();
    let frames = grid.frames();
    let ext = target.extended();
    let states = ext.len();
    let neg = f64::NEG_INFINITY;

    // s-2 skip is allowed onto a label that differs from the label two back.
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = Array2::from_elem((frames, states), neg);
    alpha[[0, 0]] = lp[[0, ext[0]]];
    if states > 1 {
        alpha[[0, 1]] = lp[[0, ext[1]]];
    }
    for t in 1..frames {
        for s in 0..states {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = log_sum_exp(acc, alpha[[t - 1, s - 1]]);
            }
            if can_skip(s) {
                acc = log_sum_exp(acc, alpha[[t - 1, s - 2]]);
            }
            alpha[[t, s]] = if acc == neg { neg } else { acc + lp[[t, ext[s]]] };
        }
    }

    let mut beta = Array2::from_elem((frames, states), neg);
    beta[[frames - 1, states - 1]] = 0.0;
    if states > 1 {
        beta[[frames - 1, states - 2]] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let mut acc = beta[[t + 1, s]] + lp[[t + 1, ext[s]]];
            if s + 1 < states {
                acc = log_sum_exp(acc, beta[[t + 1, s + 1]] + lp[[t + 1, ext[s + 1]]]);
            }
            if s + 2 < states && can_skip(s + 2) {
                acc = log_sum_exp(acc, beta[[t + 1, s + 2]] + lp[[t + 1, ext[s + 2]]]);
            }
            beta[[t, s]] = acc;
        }
    }

    let mut log_likelihood = alpha[[frames - 1, states - 1]];
    if states > 1 {
        log_likelihood = log_sum_exp(log_likelihood, alpha[[frames - 1, states - 2]]);
    }
    Ok(CtcLattice {
        extended: ext,
        log_alpha: alpha,
        log_beta: beta,
        log_likelihood,
    })
}

/// Vanilla CTC loss `-log sum_pi prod_l p_l[pi_l]` and its logit gradient.
pub fn ctc_forward(grid: &LogPosteriorGrid, target: &TargetSequence) -> Result<CtcResult, CtcError> {
    let lattice = ctc_lattice(grid, target)?;
    let (frames, classes) = grid.values().dim();
    let log_p = lattice.log_likelihood;
    if log_p == f64::NEG_INFINITY {
        return Ok(CtcResult {
            loss: f64::INFINITY,
            grad_logits: Array2::zeros((frames, classes)),
            occupancy: None,
        });
    }

    let mut occupancy = Array2::<f64>::zeros((frames, classes));
    for t in 0..frames {
        for (s, &k) in lattice.extended.iter().enumerate() {
            let a = lattice.log_alpha[[t, s]];
            let b = lattice.log_beta[[t, s]];
            if a != f64::NEG_INFINITY && b != f64::NEG_INFINITY {
                occupancy[[t, k]] += (a + b - log_p).exp();
            }
        }
    }

    // Softmax of the grid row, which is exact even if the row is only
    // normalized to within ROW_TOLERANCE.
    let probs = softmax_rows(grid.values());
    let grad_logits = &probs - &occupancy;
    Ok(CtcResult {
        loss: -log_p,
        grad_logits,
        occupancy: Some(occupancy),
    })
}

/// Row-wise log-softmax of `hidden . weight + bias`.
pub fn project_posteriors(
    hidden: &Array2<f64>,
    weight: &Array2<f64>,
    bias: &[f64],
) -> Result<LogPosteriorGrid, CtcError> {
    if hidden.ncols() != weight.nrows() || weight.ncols() != bias.len() {
        return Err(CtcError::Shape(format!(
            "hidden {:?}, weight {:?}, bias {}",
            hidden.dim(),
            weight.dim(),
            bias.len()
        )));
    }
    let mut logits = hidden.dot(weight);
    for mut row in logits.rows_mut() {
        for (x, b) in row.iter_mut().zip(bias) {
            *x += b;
        }
    }
    LogPosteriorGrid::from_logits(&logits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Vanilla,
    Inter,
    SelfCond,
    Hierarchical,
    JointAttn,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Vanilla,
        Objective::Inter,
        Objective::SelfCond,
        Objective::Hierarchical,
        Objective::JointAttn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Vanilla => "vanilla",
            Objective::Inter => "inter",
            Objective::SelfCond => "self_cond",
            Objective::Hierarchical => "hierarchical",
            Objective::JointAttn => "joint_attn",
        }
    }

    pub fn uses_intermediate_layers(self) -> bool {
        matches!(self, Objective::Inter | Objective::SelfCond | Objective::Hierarchical)
    }

    pub fn self_conditions(self) -> bool {
        matches!(self, Objective::SelfCond | Objective::Hierarchical)
    }
}

impl std::str::FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| format!("unknown objective {s:?}"))
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const DEFAULT_LAMBDA: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub objective: Objective,
    /// Encoder layers (1-based) carrying auxiliary CTC heads.
    #[serde(default)]
    pub intermediate_layers: Vec<usize>,
    /// Auxiliary weight for inter/self_cond/hierarchical; CTC share for joint_attn.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

impl LossConfig {
    pub fn vanilla() -> Self {
        LossConfig {
            objective: Objective::Vanilla,
            intermediate_layers: Vec::new(),
            lambda: DEFAULT_LAMBDA,
        }
    }

    pub fn with_layers(objective: Objective, layers: Vec<usize>, lambda: f64) -> Self {
        LossConfig {
            objective,
            intermediate_layers: layers,
            lambda,
        }
    }

    pub fn joint(lambda: f64) -> Self {
        LossConfig {
            objective: Objective::JointAttn,
            intermediate_layers: Vec::new(),
            lambda,
        }
    }

    pub fn validate(&self) -> Result<(), CtcError> {
        if !self.lambda.is_finite() {
            return Err(CtcError::Config(format!("lambda must be finite, got {}", self.lambda)));
        }
        let unique: BTreeSet<_> = self.intermediate_layers.iter().collect();
        if unique.len() != self.intermediate_layers.len() {
            return Err(CtcError::Config("duplicate intermediate layer".into()));
        }
        match self.objective {
            o if o.uses_intermediate_layers() => {
                if self.intermediate_layers.is_empty() {
                    return Err(CtcError::Config(format!("{o} needs at least one intermediate layer")));
                }
                if self.intermediate_layers.contains(&0) {
                    return Err(CtcError::Config("layers are numbered from 1".into()));
                }
            }
            Objective::JointAttn if !(0.0..=1.0).contains(&self.lambda) => {
                return Err(CtcError::LambdaOutOfRange(self.lambda));
            }
            _ => {}
        }
        Ok(())
    }

    /// Weight of each intermediate loss: `lambda / |S|`.
    pub fn layer_weight(&self) -> f64 {
        if self.intermediate_layers.is_empty() {
            0.0
        } else {
            self.lambda / self.intermediate_layers.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterCtcResult {
    pub loss: f64,
    pub final_loss: f64,
    pub layer_losses: BTreeMap<usize, f64>,
    /// Weighted gradient for the final grid's logits.
    pub final_grad: Array2<f64>,
    /// Weighted gradients for each intermediate grid's logits.
    pub layer_grads: BTreeMap<usize, Array2<f64>>,
}

/// `L_final + lambda / |S| * sum_s L_s` with phone targets at every layer.
pub fn inter_ctc_loss(
    grids: &BTreeMap<usize, LogPosteriorGrid>,
    final_grid: &LogPosteriorGrid,
    target: &TargetSequence,
    config: &LossConfig,
) -> Result<InterCtcResult, CtcError> {
    inter_ctc_loss_with_targets(grids, final_grid, target, target, config)
}

/// As [`inter_ctc_loss`], with separate targets for the intermediate layers
/// (character targets for hierarchical CTC).
pub fn inter_ctc_loss_with_targets(
    grids: &BTreeMap<usize, LogPosteriorGrid>,
    final_grid: &LogPosteriorGrid,
    final_target: &TargetSequence,
    layer_target: &TargetSequence,
    config: &LossConfig,
) -> Result<InterCtcResult, CtcError> {
    for layer in &config.intermediate_layers {
        if !grids.contains_key(layer) {
            return Err(CtcError::MissingLayer(*layer));
        }
    }
    if let Some(extra) = grids.keys().find(|l| !config.intermediate_layers.contains(l)) {
        return Err(CtcError::UnexpectedLayer(*extra));
    }

    let final_result = ctc_forward(final_grid, final_target)?;
    let weight = config.layer_weight();
    let mut loss = final_result.loss;
    let mut layer_losses = BTreeMap::new();
    let mut layer_grads = BTreeMap::new();
    for (&layer, grid) in grids {
        let r = ctc_forward(grid, layer_target)?;
        layer_losses.insert(layer, r.loss);
        if weight != 0.0 {
            loss += weight * r.loss;
        }
        layer_grads.insert(layer, r.grad_logits * weight);
    }

    let mut final_grad = final_result.grad_logits;
    if !loss.is_finite() {
        final_grad.fill(0.0);
        layer_grads.values_mut().for_each(|g| g.fill(0.0));
    }
    Ok(InterCtcResult {
        loss,
        final_loss: final_result.loss,
        layer_losses,
        final_grad,
        layer_grads,
    })
}

/// `h~_l = h_l + W~ p_l` with `p_l = exp(log-posteriors)`; `cond_weight` is `D x (|V|+1)`.
pub fn self_condition(
    hidden: &Array2<f64>,
    posteriors: &LogPosteriorGrid,
    cond_weight: &Array2<f64>,
) -> Result<Array2<f64>, CtcError> {
    check_condition_shapes(hidden.dim(), posteriors, cond_weight)?;
    Ok(hidden + &posteriors.probabilities().dot(&cond_weight.t()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfConditionGrads {
    pub hidden: Array2<f64>,
    pub cond_weight: Array2<f64>,
    /// Gradient reaching the logits behind `posteriors` through the conditioning path.
    pub logits: Array2<f64>,
}

/// Backward rule of [`self_condition`] given `grad_out = dL/dh~`.
pub fn self_condition_backward(
    grad_out: &Array2<f64>,
    posteriors: &LogPosteriorGrid,
    cond_weight: &Array2<f64>,
) -> Result<SelfConditionGrads, CtcError> {
    check_condition_shapes(grad_out.dim(), posteriors, cond_weight)?;
    let probs = posteriors.probabilities();
    let grad_probs = grad_out.dot(cond_weight);
    Ok(SelfConditionGrads {
        hidden: grad_out.clone(),
        cond_weight: grad_out.t().dot(&probs),
        logits: softmax_backward(&probs, &grad_probs),
    })
}

fn check_condition_shapes(
    hidden: (usize, usize),
    posteriors: &LogPosteriorGrid,
    cond_weight: &Array2<f64>,
) -> Result<(), CtcError> {
    if hidden.0 != posteriors.frames()
        || cond_weight.nrows() != hidden.1
        || cond_weight.ncols() != posteriors.num_classes()
    {
        return Err(CtcError::Shape(format!(
            "hidden {:?}, posteriors {:?}, conditioning weight {:?}",
            hidden,
            posteriors.values().dim(),
            cond_weight.dim()
        )));
    }
    Ok(())
}

/// Codepoint vocabulary for orthographic targets.
///
/// Known characters take ids `1..=n` in sorted order, the unknown id is
/// `n + 1`, and id 0 stays reserved for blank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharVocab {
    ids: BTreeMap<char, usize>,
}

impl CharVocab {
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let chars: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        CharVocab {
            ids: chars.into_iter().zip(1..).collect(),
        }
    }

    pub fn unk_id(&self) -> usize {
        self.ids.len() + 1
    }

    /// Blank, every known character and UNK.
    pub fn num_classes(&self) -> usize {
        self.ids.len() + 2
    }

    pub fn id(&self, c: char) -> usize {
        self.ids.get(&c).copied().unwrap_or(self.unk_id())
    }
}

/// Codepoint tokenization of an orthographic transcript.
pub fn hierarchical_targets(ortho_text: &str, vocab: &CharVocab) -> TargetSequence {
    TargetSequence(ortho_text.chars().map(|c| vocab.id(c)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropyResult {
    pub loss: f64,
    /// Gradient with respect to the decoder logits.
    pub grad_logits: Array2<f64>,
}

/// `-sum_n log P(y_n | y_<n)` from teacher-forced decoder log-distributions.
pub fn cross_entropy_teacher_forced(
    decoder_logprobs: &Array2<f64>,
    targets: &[usize],
) -> Result<CrossEntropyResult, CtcError> {
    let (positions, vocab) = decoder_logprobs.dim();
    if positions != targets.len() {
        return Err(CtcError::Shape(format!(
            "{positions} decoder positions for {} targets",
            targets.len()
        )));
    }
    let mut grad = softmax_rows(decoder_logprobs);
    let mut loss = 0.0;
    for (n, &y) in targets.iter().enumerate() {
        if y >= vocab {
            return Err(CtcError::LabelOutOfRange {
                label: y,
                position: n,
                num_classes: vocab,
            });
        }
        loss -= decoder_logprobs[[n, y]];
        grad[[n, y]] -= 1.0;
    }
    Ok(CrossEntropyResult {
        loss,
        grad_logits: grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointLoss {
    pub loss: f64,
    pub ctc_grad_logits: Array2<f64>,
    pub ce_grad_logits: Array2<f64>,
}

/// `lambda * L_ctc + (1 - lambda) * L_ce`; gradients take the same weights.
/// A zero-weight term is left out entirely.
pub fn joint_loss(ctc: &CtcResult, ce: &CrossEntropyResult, lambda: f64) -> Result<JointLoss, CtcError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CtcError::LambdaOutOfRange(lambda));
    }
    let ce_weight = 1.0 - lambda;
    let loss = match (lambda == 0.0, ce_weight == 0.0) {
        (true, _) => ce.loss,
        (_, true) => ctc.loss,
        _ => lambda * ctc.loss + ce_weight * ce.loss,
    };
    Ok(JointLoss {
        loss,
        ctc_grad_logits: &ctc.grad_logits * lambda,
        ce_grad_logits: &ce.grad_logits * ce_weight,
    })
}

/// Reduces the rows of `m` to column sums.
pub(crate) fn column_sums(m: &Array2<f64>) -> Array2<f64> {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}
