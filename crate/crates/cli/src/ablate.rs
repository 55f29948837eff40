use std::path::PathBuf;

use anyhow::anyhow;
use clap::{Args, ValueEnum};
use phonex_core::ctc::DEFAULT_LAMBDA;
use phonex_core::toymodel::{
    train, Checkpoint, ModelError, ModelSpec, SyntheticTask, TaskConfig, ToyModel, TraceRecord, TrainConfig,
};
use phonex_core::{LossConfig, Objective};
use rayon::prelude::*;
use serde::Serialize;

use crate::io::{emit, num, parse_file, pct, require_files, to_json, CliResult, Failure};
use crate::{Format, JobsArg, OutputArgs};

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskPreset {
    /// Low-noise single-language task.
    Default,
    /// Noisier task with three languages.
    Multilingual,
}

#[derive(Args, Clone)]
pub struct ExperimentArgs {
    /// Seeds parameter initialization and batch order.
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = TaskPreset::Default)]
    pub task: TaskPreset,
    /// Synthetic task settings as JSON; missing fields take the preset's values.
    #[arg(long, value_name = "JSON")]
    pub task_config: Option<PathBuf>,
    /// Seed of the synthetic data.
    #[arg(long, default_value_t = TaskConfig::default().seed)]
    pub task_seed: u64,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    /// Encoder blocks.
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    /// Encoder layers with auxiliary CTC heads (comma-separated, 1-based).
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub intermediate: Vec<usize>,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().eval_interval)]
    pub eval_interval: usize,
    /// Utterances per step (0 = full batch).
    #[arg(long, default_value_t = 0)]
    pub batch_size: usize,
}

impl ExperimentArgs {
    fn task(&self) -> CliResult<SyntheticTask> {
        let preset = match self.task {
            TaskPreset::Default => TaskConfig {
                seed: self.task_seed,
                ..TaskConfig::default()
            },
            TaskPreset::Multilingual => TaskConfig::multilingual(self.task_seed),
        };
        let config = match &self.task_config {
            Some(path) => {
                require_files([path])?;
                let mut value = serde_json::to_value(&preset).expect("task config serializes");
                let overrides: serde_json::Value = parse_file(path, |t| serde_json::from_str(t))?;
                let serde_json::Value::Object(fields) = overrides else {
                    return Err(Failure::data(anyhow!("{}: expected a JSON object", path.display())));
                };
                for (k, v) in fields {
                    value[k] = v;
                }
                serde_json::from_value(value).map_err(|e| Failure::data(anyhow!("{}: {e}", path.display())))?
            }
            None => preset,
        };
        SyntheticTask::generate(config).map_err(|e| Failure::usage(anyhow!("task config: {e}")))
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            lr: self.lr,
            eval_interval: self.eval_interval,
            batch_size: self.batch_size,
            seed: self.seed,
            freeze_conditioning: false,
        }
    }

    fn loss_config(&self, objective: Objective, lambda: f64) -> LossConfig {
        let layers = if objective.uses_intermediate_layers() {
            self.intermediate.clone()
        } else {
            Vec::new()
        };
        LossConfig::with_layers(objective, layers, lambda)
    }
}

fn model_failure(e: ModelError) -> Failure {
    match e {
        ModelError::Config(_) => Failure::usage(e.into()),
        ModelError::Ctc(_) => Failure::data(e),
        ModelError::NonFinite(_) | ModelError::Diverged { .. } => Failure::numerical(e),
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    #[arg(long, default_value = "vanilla")]
    pub objective: Objective,
    /// Auxiliary loss weight (CTC weight for joint_attn).
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Keep self-conditioning projections at zero.
    #[arg(long)]
    pub freeze_conditioning: bool,
    /// Training trace (JSON lines); standard output when absent.
    #[arg(long, value_name = "PATH")]
    pub trace: Option<PathBuf>,
    /// Write the trained parameters here (JSON).
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

fn trace_jsonl(trace: &[TraceRecord]) -> String {
    trace
        .iter()
        .map(|r| serde_json::to_string(r).expect("trace serializes") + "\n")
        .collect()
}

pub fn run_train(args: TrainArgs) -> CliResult {
    let exp = &args.experiment;
    let task = exp.task()?;
    let config = exp.loss_config(args.objective, args.lambda);
    let spec = ModelSpec::for_task(&task, exp.hidden, exp.layers);
    let model = ToyModel::new(spec, &config, exp.seed).map_err(model_failure)?;
    let train_config = TrainConfig {
        freeze_conditioning: args.freeze_conditioning,
        ..exp.train_config()
    };
    let outcome = match train(model, &task, &config, &train_config) {
        Ok(o) => o,
        Err(ModelError::Diverged { step, loss, trace }) => {
            emit(args.trace.as_deref(), &trace_jsonl(&trace))?;
            return Err(Failure::numerical(anyhow!(
                "training diverged at step {step} (loss {loss})"
            )));
        }
        Err(e) => return Err(model_failure(e)),
    };
    emit(args.trace.as_deref(), &outcome.trace_jsonl())?;
    if let Some(path) = &args.checkpoint {
        emit(Some(path), &to_json(&Checkpoint::from_model(&outcome.model, &config)))?;
    }
    let last = outcome.last();
    eprintln!(
        "{} step {}: loss {} train PER {} dev PER {} dev PFER {}",
        config.objective,
        last.step,
        num(last.loss),
        pct(Some(last.train_per)),
        pct(Some(last.dev_per)),
        pct(Some(last.dev_pfer))
    );
    Ok(())
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    /// Configurations to compare, each `objective[:lambda]`.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "vanilla,inter,self_cond,hierarchical,joint_attn"
    )]
    pub configs: Vec<String>,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub jobs: JobsArg,
}

fn parse_config_item(item: &str) -> CliResult<(Objective, f64)> {
    let (name, lambda) = match item.split_once(':') {
        Some((n, l)) => {
            let lambda: f64 = l
                .parse()
                .map_err(|_| Failure::usage(anyhow!("invalid lambda in {item:?}")))?;
            (n, lambda)
        }
        None => (item, DEFAULT_LAMBDA),
    };
    let objective: Objective = name.trim().parse().map_err(|e: String| Failure::usage(anyhow!(e)))?;
    Ok((objective, lambda))
}

#[derive(Serialize)]
struct AblationRow {
    id: String,
    objective: Objective,
    lambda: Option<f64>,
    intermediate_layers: Vec<usize>,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    params: usize,
    final_loss: Option<f64>,
    train_per: Option<f64>,
    train_pfer: Option<f64>,
    dev_per: Option<f64>,
    dev_pfer: Option<f64>,
}

#[derive(Serialize)]
struct AblationReport {
    task: TaskConfig,
    hidden: usize,
    layers: usize,
    train: TrainConfig,
    decode: &'static str,
    rows: Vec<AblationRow>,
}

fn ablation_row(id: String, task: &SyntheticTask, exp: &ExperimentArgs, config: LossConfig) -> AblationRow {
    let spec = ModelSpec::for_task(task, exp.hidden, exp.layers);
    let mut row = AblationRow {
        id,
        objective: config.objective,
        lambda: (config.objective != Objective::Vanilla).then_some(config.lambda),
        intermediate_layers: config.intermediate_layers.clone(),
        status: "failed",
        error: None,
        params: 0,
        final_loss: None,
        train_per: None,
        train_pfer: None,
        dev_per: None,
        dev_pfer: None,
    };
    let result = ToyModel::new(spec, &config, exp.seed).and_then(|model| {
        row.params = model.num_params();
        train(model, task, &config, &exp.train_config())
    });
    match result {
        Ok(outcome) => {
            let last = outcome.last();
            row.status = "ok";
            row.final_loss = Some(last.loss);
            row.train_per = Some(last.train_per);
            row.train_pfer = Some(last.train_pfer);
            row.dev_per = Some(last.dev_per);
            row.dev_pfer = Some(last.dev_pfer);
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

fn ablation_tsv(report: &AblationReport) -> String {
    let mut out = String::from(
        "id\tobjective\tlambda\tlayers\tstatus\tparams\tfinal_loss\ttrain_per\ttrain_pfer\tdev_per\tdev_pfer\n",
    );
    for r in &report.rows {
        let layers: Vec<String> = r.intermediate_layers.iter().map(|l| l.to_string()).collect();
        out += &format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.id,
            r.objective,
            r.lambda.map_or_else(|| "-".into(), num),
            if layers.is_empty() {
                "-".into()
            } else {
                layers.join(",")
            },
            r.status,
            r.params,
            r.final_loss.map_or_else(|| "NA".into(), num),
            pct(r.train_per),
            pct(r.train_pfer),
            pct(r.dev_per),
            pct(r.dev_pfer)
        );
    }
    out
}

pub fn run_ablate(args: AblateArgs) -> CliResult {
    let exp = &args.experiment;
    let configs: Vec<LossConfig> = args
        .configs
        .iter()
        .map(|item| parse_config_item(item).map(|(o, l)| exp.loss_config(o, l)))
        .collect::<CliResult<_>>()?;
    if configs.is_empty() {
        return Err(Failure::usage(anyhow!("no configurations to run")));
    }
    for c in &configs {
        c.validate().map_err(|e| Failure::usage(e.into()))?;
    }
    let task = exp.task()?;

    // Rows train independently, so running them concurrently cannot change any row.
    let rows: Vec<AblationRow> = args.jobs.pool()?.install(|| {
        configs
            .into_par_iter()
            .enumerate()
            .map(|(i, config)| ablation_row(format!("C{}", i + 1), &task, exp, config))
            .collect()
    });
    for r in rows.iter().filter(|r| r.status != "ok") {
        eprintln!(
            "warning: {} ({}) failed: {}",
            r.id,
            r.objective,
            r.error.as_deref().unwrap_or("")
        );
    }
    let report = AblationReport {
        task: task.config.clone(),
        hidden: exp.hidden,
        layers: exp.layers,
        train: exp.train_config(),
        decode: "greedy",
        rows,
    };
    let body = match args.output.format {
        Format::Json => to_json(&report),
        Format::Tsv => ablation_tsv(&report),
    };
    emit(args.output.out.as_deref(), &body)
}
