use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cskv_core::bench::{
    baseline_grid, emit_csv, emit_plot_data, init_grid, kv_split_grid, matched_budget, quant_grid,
    read_csv, render_summary, run_sweep, summarize, window_grid, CellSpec, FitSpec, Method,
    QuantMode, SweepConfig, SweepResult, TaskSpec, VocabProfile, ABLATION_RATIOS,
};
use cskv_core::bibranch::BiBranchCache;
use cskv_core::calibrate::{
    capture_activations, finetune_model, initialize_factors, read_token_streams, total_loss,
    total_loss_before, CalibConfig, CalibMode, InitKind,
};
use cskv_core::baselines::PruningPolicy;
use cskv_core::bench::{calibration_streams, gen_lines_task};
use cskv_core::lowrank::{CompressionPlan, ModelFactors};
use cskv_core::numerics::StorageDtype;
use cskv_core::quant::KvQuantSpec;
use cskv_core::tensorio::{read_container, validate_config, write_container, Dtype, ModelConfig};
use cskv_core::transformer::{
    generate_with, toy_config, BaselineKvCache, RandomModelSpec, TransformerWeights,
};

use crate::args::*;

/// Bad invocation: reported with exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn require_file(path: &Path, flag: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{flag}: no such file {}", path.display())))
    }
}

fn storage(s: StorageArg) -> StorageDtype {
    match s {
        StorageArg::F16 => StorageDtype::F16,
        StorageArg::F32 => StorageDtype::F32,
        StorageArg::F64 => StorageDtype::F64,
    }
}

fn quant_mode(q: QuantArg) -> QuantMode {
    match q {
        QuantArg::None => QuantMode::None,
        QuantArg::Ptq4 => QuantMode::Ptq4,
        QuantArg::Qat4 => QuantMode::Qat4,
    }
}

fn init_kind(i: InitArg) -> InitKind {
    match i {
        InitArg::Random => InitKind::Random,
        InitArg::Svd => InitKind::Svd,
        InitArg::Asvd => InitKind::Asvd,
    }
}

fn method(c: CacheArg) -> Method {
    match c {
        CacheArg::Baseline => Method::Baseline,
        CacheArg::Cskv => Method::Cskv,
        CacheArg::Streaming => Method::Streaming,
        CacheArg::H2o => Method::H2o,
    }
}

fn calib_config(c: &CalibArgs, quant_aware: bool, seed: u64) -> Result<CalibConfig> {
    let mode = match c.mode {
        ModeArg::Gradient => CalibMode::Gradient,
        ModeArg::Als => CalibMode::Als,
    };
    if quant_aware && mode == CalibMode::Als {
        return Err(usage("--quant qat4 needs --mode gradient"));
    }
    let cfg = CalibConfig {
        mode,
        steps: c.steps,
        learning_rate: c.lr,
        batch_rows: c.batch_rows,
        quant_aware,
        seed,
        ..CalibConfig::default()
    };
    cfg.check().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn check_model_paths(m: &ModelArgs) -> Result<()> {
    require_file(&m.model, "--model")?;
    require_file(&m.config, "--config")
}

fn load_model(m: &ModelArgs) -> Result<TransformerWeights> {
    let cfg = ModelConfig::load(&m.config)
        .with_context(|| format!("loading config {}", m.config.display()))?;
    let tensors = read_container(&m.model)
        .with_context(|| format!("reading container {}", m.model.display()))?;
    validate_config(&cfg, &tensors).context("container does not match config")?;
    Ok(TransformerWeights::from_tensors(&cfg, &tensors)?)
}

fn vocab(weights: &TransformerWeights) -> Result<VocabProfile> {
    Ok(VocabProfile::new(weights.config.vocab_size as u32)?)
}

fn task_prompt(weights: &TransformerWeights, n_lines: usize, seed: u64) -> Result<Vec<u32>> {
    Ok(gen_lines_task(n_lines, seed, &vocab(weights)?)?.prompt)
}

fn parse_prompt(s: &str) -> Result<Vec<u32>> {
    let ids: Result<Vec<u32>, _> = s
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect();
    match ids {
        Ok(v) if !v.is_empty() => Ok(v),
        Ok(_) => Err(usage("--prompt is empty")),
        Err(e) => Err(usage(format!("--prompt: {e}"))),
    }
}

fn quant_spec(q: QuantArg) -> Option<KvQuantSpec> {
    (q != QuantArg::None).then(KvQuantSpec::default)
}

pub fn init_model(a: &InitModelArgs) -> Result<i32> {
    let cfg = if a.config.is_file() {
        ModelConfig::load(&a.config)?
    } else {
        if a.heads == 0 || a.d_model % a.heads != 0 {
            return Err(usage(format!(
                "--d-model {} is not a multiple of --heads {}",
                a.d_model, a.heads
            )));
        }
        let cfg = toy_config(a.layers, a.d_model, a.heads, a.vocab);
        cfg.check().map_err(|e| usage(e.to_string()))?;
        cfg.save(&a.config)?;
        cfg
    };
    let spec = RandomModelSpec {
        kv_spectrum_decay: a.kv_decay,
        ..RandomModelSpec::new(cfg, a.seed)
    };
    let weights = TransformerWeights::random(&spec)?;
    write_container(&weights.to_tensors(Dtype::F32), &a.out)?;
    println!(
        "wrote {} ({} layers, d_model {}, vocab {})",
        a.out.display(),
        weights.config.n_layers,
        weights.config.d_model,
        weights.config.vocab_size
    );
    Ok(0)
}

pub fn calibrate(a: &CalibrateArgs) -> Result<i32> {
    check_model_paths(&a.model)?;
    if let Some(s) = &a.streams {
        require_file(s, "--streams")?;
    }
    let quant_aware = a.plan.quant == QuantArg::Qat4;
    let cfg = calib_config(&a.calib, quant_aware, a.seed)?;
    let weights = load_model(&a.model)?;
    let plan = CompressionPlan::uniform(&weights.config, a.plan.ratio_k, a.plan.ratio_v, a.plan.window)?
        .with_quant(quant_spec(a.plan.quant))
        .with_storage(storage(a.plan.storage));
    let streams = match &a.streams {
        Some(p) => read_token_streams(p)?,
        None => calibration_streams(a.calib_tasks, a.n_lines, a.seed, &vocab(&weights)?)?,
    };
    let layers: Vec<usize> = (0..weights.config.n_layers).collect();
    let acts = capture_activations(&weights, &streams, &layers)?;
    let init = initialize_factors(&weights, &acts, &plan, init_kind(a.calib.init), a.calib.alpha, a.seed)?;
    let (factors, report) = finetune_model(&weights, &acts, &plan, &init, &cfg)?;
    factors.save(&a.out, Dtype::F32)?;
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.report.json", a.out.display())));
    report.save(&report_path)?;
    println!(
        "ranks k {:?} v {:?}; loss {:.6e} -> {:.6e}; wrote {} and {}",
        plan.rank_k,
        plan.rank_v,
        total_loss_before(&report),
        total_loss(&report),
        a.out.display(),
        report_path.display()
    );
    Ok(0)
}

pub fn generate(a: &GenerateArgs) -> Result<i32> {
    check_model_paths(&a.model)?;
    let factors_path = match (a.cache, &a.factors) {
        (CacheArg::Cskv, None) => return Err(usage("--cache cskv needs --factors")),
        (_, Some(p)) => {
            require_file(p, "--factors")?;
            Some(p)
        }
        (_, None) => None,
    };
    let prompt = a.prompt.as_deref().map(parse_prompt).transpose()?;
    let weights = load_model(&a.model)?;
    let prompt = match prompt {
        Some(p) => p,
        None => task_prompt(&weights, a.n_lines, a.seed)?,
    };
    let cfg = &weights.config;
    let dtype = storage(a.plan.storage);
    let transcript = match a.cache {
        CacheArg::Baseline => {
            let mut c = BaselineKvCache::new(cfg.n_layers, dtype);
            generate_with(&weights, &mut c, &prompt, a.max_new)?
        }
        CacheArg::Cskv => {
            let factors = ModelFactors::load(factors_path.expect("checked above"))?;
            let plan = CompressionPlan::for_factors(cfg, &factors, a.plan.window)?
                .with_quant(quant_spec(a.plan.quant))
                .with_storage(dtype);
            let mut c = BiBranchCache::new(cfg, &factors, &plan)?;
            generate_with(&weights, &mut c, &prompt, a.max_new)?
        }
        CacheArg::Streaming | CacheArg::H2o => {
            let budget = match a.budget {
                Some(b) => b,
                None => {
                    let plan = CompressionPlan::uniform(cfg, a.plan.ratio_k, a.plan.ratio_v, a.plan.window)?
                        .with_quant(quant_spec(a.plan.quant))
                        .with_storage(dtype);
                    matched_budget(&weights, &plan, prompt.len() + a.max_new)
                }
            };
            let policy = if a.cache == CacheArg::Streaming {
                PruningPolicy::streaming_budget(budget)
            } else {
                PruningPolicy::H2o { budget }
            };
            let mut c = policy.build(cfg.n_layers, dtype)?;
            generate_with(&weights, c.as_mut(), &prompt, a.max_new)?
        }
    };
    let text: Vec<String> = transcript.iter().map(u32::to_string).collect();
    println!("{}", text.join(" "));
    Ok(0)
}

fn fit_spec(f: &FitArgs) -> Result<FitSpec> {
    if let Some(p) = &f.factors {
        return Ok(FitSpec::Provided(ModelFactors::load(p)?));
    }
    Ok(match f.fit {
        FitArg::Oracle => FitSpec::Oracle,
        FitArg::Calibrated => FitSpec::Calibrated {
            alpha: f.calib.alpha,
            calib: calib_config(&f.calib, false, 0)?,
        },
    })
}

fn check_fit_paths(f: &FitArgs) -> Result<()> {
    match &f.factors {
        Some(p) => require_file(p, "--factors"),
        None => Ok(()),
    }
}

fn finish(result: &SweepResult, out: &Path, plot: Option<&PathBuf>) -> Result<i32> {
    emit_csv(result, out)?;
    if let Some(p) = plot {
        emit_plot_data(result, p)?;
    }
    let rows = read_csv(out)?;
    print!("{}", render_summary(&summarize(&rows)));
    for f in result.fits.iter().filter(|f| f.error.is_some()) {
        eprintln!("fit {}: {}", f.label, f.error.as_deref().unwrap_or_default());
    }
    for r in &result.rows {
        if let Err(e) = &r.outcome {
            eprintln!("cell {} seed {}: {e}", r.cell.label(), r.seed);
        }
    }
    let n = result.n_errors();
    if n > 0 {
        eprintln!("{n} errors");
        return Ok(1);
    }
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn sweep_config(
    weights: &TransformerWeights,
    cells: Vec<CellSpec>,
    fit: FitSpec,
    fit_args: &FitArgs,
    task: &TaskArgs,
    seed: u64,
    seeds: u64,
    dtype: StorageDtype,
) -> Result<SweepConfig> {
    Ok(SweepConfig {
        cells,
        seeds: (seed..seed + seeds).collect(),
        task: TaskSpec {
            n_lines: task.n_lines,
            max_new: task.max_new,
            vocab: vocab(weights)?,
        },
        fit,
        storage: dtype,
        calib_streams: fit_args.calib_tasks,
        calib_seed: seed,
    })
}

pub fn eval(a: &EvalArgs) -> Result<i32> {
    check_model_paths(&a.model)?;
    check_fit_paths(&a.fit)?;
    let fit = fit_spec(&a.fit)?;
    let weights = load_model(&a.model)?;
    let cell = CellSpec::cskv(a.plan.ratio_k, a.plan.ratio_v, a.plan.window)
        .with_method(method(a.cache))
        .with_quant(quant_mode(a.plan.quant))
        .with_init(init_kind(a.fit.calib.init));
    let cfg = sweep_config(
        &weights,
        vec![cell],
        fit,
        &a.fit,
        &a.task,
        a.seed,
        a.seeds,
        storage(a.plan.storage),
    )?;
    finish(&run_sweep(&weights, &cfg), &a.out, a.plot.as_ref())
}

pub fn sweep(a: &SweepArgs) -> Result<i32> {
    check_model_paths(&a.model)?;
    check_fit_paths(&a.fit)?;
    let fit = fit_spec(&a.fit)?;
    let weights = load_model(&a.model)?;
    let cells = match a.grid {
        GridArg::Window => window_grid(a.ratio),
        GridArg::KvSplit => kv_split_grid(a.window),
        GridArg::Init => init_grid(a.window),
        GridArg::Quant => quant_grid(a.window),
        GridArg::Baselines => baseline_grid(&ABLATION_RATIOS, a.window),
    };
    let cfg = sweep_config(
        &weights,
        cells,
        fit,
        &a.fit,
        &a.task,
        a.seed,
        a.seeds,
        storage(a.storage),
    )?;
    finish(&run_sweep(&weights, &cfg), &a.out, a.plot.as_ref())
}

pub fn report(a: &ReportArgs) -> Result<i32> {
    require_file(&a.csv, "--csv")?;
    let rows = read_csv(&a.csv)?;
    print!("{}", render_summary(&summarize(&rows)));
    Ok(0)
}
