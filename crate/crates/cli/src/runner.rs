//! The three commands as library functions: run an experiment per seed,
//! gradient-check a model's trainable parameters, and profile a schedule's
//! context lengths and cost.

use crate::config::{DataSection, ExperimentConfig, Protocol, ScheduleSection};
use crate::dataset_store::load_dataset;
use crate::error::{CliError, Result};
use crate::report::{
    summarize, MetricsReport, ProfileReport, Report, SeedResult, Versions,
};
use promptlab_core::data::{make_synthetic_dataset, FewShotDataset};
use promptlab_core::gradcheck::finite_diff_check_all;
use promptlab_core::model::PromptModel;
use promptlab_core::train::{
    base_to_new_protocol, cross_dataset_protocol, evaluate, train,
};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

/// Trainable-scalar ceiling for gradient checking; each scalar costs two
/// loss evaluations, so larger models take too long to be useful.
pub const GRADCHECK_MAX_PARAMS: usize = 8192;
/// Central-difference step for gradient checks.
pub const GRADCHECK_EPSILON: f64 = 1e-5;
/// A gradient check passes when the worst relative error stays below this.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Materialize a dataset description; directory paths resolve relative to
/// `base_dir` (normally the config file's directory).
pub fn resolve_dataset(section: &DataSection, base_dir: &Path) -> Result<FewShotDataset> {
    match section {
        DataSection::Synthetic { .. } => {
            let spec = section.to_synthetic_spec().unwrap();
            make_synthetic_dataset(&spec).map_err(CliError::from)
        }
        DataSection::Dir { path } => {
            let p = Path::new(path);
            let full = if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
            load_dataset(&full)
        }
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Execute the configured protocol for every seed and assemble the report.
pub fn run_experiment(config: &ExperimentConfig, base_dir: &Path) -> Result<Report> {
    let started = Instant::now();
    config.validate()?;
    let model_config = config.model.to_model_config();
    let schedule = config.schedule.to_schedule(model_config.num_layers)?;
    let dataset = resolve_dataset(&config.data, base_dir)?;
    let eval_datasets = config
        .eval_data
        .iter()
        .map(|d| resolve_dataset(d, base_dir))
        .collect::<Result<Vec<_>>>()?;

    let context_profile =
        ProfileReport::from(&schedule.profile(model_config.n_patches(), model_config.d_v));

    let mut per_seed = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let model = PromptModel::init(model_config.clone(), schedule.clone(), seed)?;
        let train_config = config.train.to_train_config(config.protocol, seed);
        let result = match config.protocol {
            Protocol::Plain => {
                let (shots, heldout) =
                    dataset.split_train_heldout(train_config.shots, seed)?;
                let train_metrics = train(&model, &shots, &train_config)?;
                let held = evaluate(&model, &heldout, train_config.batch_size_eval)?;
                SeedResult {
                    seed,
                    train: MetricsReport::from(&train_metrics),
                    base: None,
                    new: None,
                    heldout: Some(MetricsReport::from(&held)),
                    eval: Vec::new(),
                }
            }
            Protocol::BaseToNew => {
                let split = base_to_new_protocol(&model, &dataset, &train_config)?;
                SeedResult {
                    seed,
                    train: MetricsReport::from(&split.train),
                    base: Some(MetricsReport::from(&split.base)),
                    new: Some(MetricsReport::from(&split.new)),
                    heldout: None,
                    eval: Vec::new(),
                }
            }
            Protocol::CrossDataset => {
                let evals: Vec<&FewShotDataset> = eval_datasets.iter().collect();
                let outcome =
                    cross_dataset_protocol(&model, &dataset, &evals, &train_config)?;
                SeedResult {
                    seed,
                    train: MetricsReport::from(&outcome.train),
                    base: None,
                    new: None,
                    heldout: None,
                    eval: outcome.evals.iter().map(MetricsReport::from).collect(),
                }
            }
        };
        per_seed.push(result);
    }

    let summary = summarize(&per_seed);
    Ok(Report {
        config: config.clone(),
        per_seed,
        summary,
        context_profile,
        versions: Versions::current(),
        generated_at: unix_now(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
    })
}

/// One parameter's worst coordinate in a gradient check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub param_count: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub pass: bool,
    pub per_param: Vec<ParamCheckReport>,
    pub generated_at: u64,
    pub wall_time_seconds: f64,
}

/// Check every trainable parameter of the configured model against central
/// finite differences of the batch loss on a few dataset samples.
pub fn run_gradcheck(config: &ExperimentConfig, base_dir: &Path) -> Result<GradcheckReport> {
    let started = Instant::now();
    config.validate()?;
    let model_config = config.model.to_model_config();
    let schedule = config.schedule.to_schedule(model_config.num_layers)?;
    let dataset = resolve_dataset(&config.data, base_dir)?;

    let seed = config.seeds.first().copied().unwrap_or(0);
    let model = PromptModel::init(model_config, schedule, seed)?;
    let count = model.trainable_scalar_count();
    if count == 0 {
        return Err(CliError::config(
            "trainable set empty: the schedule has no prompted layers to check",
        ));
    }
    if count > GRADCHECK_MAX_PARAMS {
        return Err(CliError::config(format!(
            "{count} trainable scalars exceed the gradient-check ceiling of \
             {GRADCHECK_MAX_PARAMS}; shrink d_v, the prompt counts, or the prompt depth"
        )));
    }

    let batch = config.train.batch_size_train.min(dataset.len());
    let images = (0..batch)
        .map(|i| dataset.image_tensor(i))
        .collect::<promptlab_core::Result<Vec<_>>>()?;
    let labels: Vec<usize> = dataset.labels[..batch].to_vec();
    let class_names = dataset.class_names.clone();

    let params = model.trainable_params();
    // Populate analytic gradients once; the checker's forward closures must
    // only recompute the loss value.
    model.zero_grads();
    let loss = model.batch_loss(&images, &labels, &class_names)?;
    loss.backward()?;
    let mut forward = || {
        let loss = model.batch_loss(&images, &labels, &class_names)?;
        loss.item()
    };
    let checks = finite_diff_check_all(&mut forward, &params, GRADCHECK_EPSILON)?;

    let per_param: Vec<ParamCheckReport> = checks
        .iter()
        .map(|c| ParamCheckReport {
            name: c.name.clone(),
            max_rel_error: c.max_rel_error,
            worst_coord: c.worst_coord,
            analytic: c.analytic_at_worst,
            numeric: c.numeric_at_worst,
        })
        .collect();
    let max_rel_error = per_param.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        param_count: count,
        epsilon: GRADCHECK_EPSILON,
        tolerance: GRADCHECK_TOLERANCE,
        max_rel_error,
        pass: max_rel_error < GRADCHECK_TOLERANCE,
        per_param,
        generated_at: unix_now(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Render a schedule's per-layer context lengths and FLOPs.
pub fn run_profile(
    doc: &ScheduleSection,
    patches: usize,
    layers_flag: Option<usize>,
) -> Result<(String, ProfileReport)> {
    let num_layers = doc.resolve_num_layers(layers_flag)?;
    let schedule = doc.to_schedule(num_layers)?;
    let d_model = doc.d_model.unwrap_or(48);
    let profile = schedule.profile(patches, d_model);

    let mut table = String::new();
    table.push_str(&format!(
        "schedule: {} over {num_layers} layers, {patches} patches, width {d_model}\n",
        doc.kind
    ));
    table.push_str("layer  add  remove  carry  context  flops\n");
    for (i, entry) in profile.per_layer.iter().enumerate() {
        let ops = schedule.ops(i);
        table.push_str(&format!(
            "{:>5}  {:>3}  {:>6}  {:>5}  {:>7}  {}\n",
            i + 1,
            ops.add,
            ops.remove,
            ops.carry,
            entry.context_len,
            entry.flops
        ));
    }
    table.push_str(&format!(
        "peak context {} rows; total {} flops\n",
        profile.peak_context_len, profile.total_flops
    ));
    Ok((table, ProfileReport::from(&profile)))
}
