use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{H2oCache, PruningPolicy, StreamingCache};
use crate::bibranch::{plan_memory_bytes, BiBranchCache, CacheStats};
use crate::calibrate::{
    capture_activations, finetune_model, initialize_factors, oracle_factors, ActivationBatch,
    CalibConfig, CalibReport, InitKind,
};
use crate::error::{CskvError, Result};
use crate::lowrank::{CompressionPlan, ModelFactors};
use crate::numerics::{Matrix, StorageDtype};
use crate::quant::KvQuantSpec;
use crate::transformer::{
    argmax, decode_step_with, generate_with, prefill_with, BaselineKvCache, TransformerWeights,
};

use super::fidelity::{layer_residuals, output_fidelity, teacher_forced, FidelityReport, Run};
use super::task::{
    calibration_streams, gen_lines_task, score_retrieval, RetrievalScore, RetrievalTask,
    VocabProfile,
};

/// Window sizes of the window ablation.
pub const WINDOW_GRID: [usize; 6] = [2, 4, 8, 16, 32, 64];
/// Total ratios of the key/value allocation ablation.
pub const KV_SPLIT_TOTALS: [f64; 2] = [0.5, 0.75];
/// Ratios of the initialization and quantization ablations.
pub const ABLATION_RATIOS: [f64; 4] = [0.5, 0.6, 0.7, 0.8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Cskv,
    Streaming,
    H2o,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Cskv => "cskv",
            Self::Streaming => "streaming",
            Self::H2o => "h2o",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    #[default]
    None,
    Ptq4,
    Qat4,
}

impl QuantMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Ptq4 => "ptq4",
            Self::Qat4 => "qat4",
        }
    }
}

fn init_str(init: InitKind) -> &'static str {
    match init {
        InitKind::Random => "random",
        InitKind::Svd => "svd",
        InitKind::Asvd => "asvd",
    }
}

/// One grid point. Pruning methods take their token budget from the bytes of
/// the CSKV configuration described by the remaining fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub method: Method,
    pub ratio_k: f64,
    pub ratio_v: f64,
    pub window: usize,
    pub quant_mode: QuantMode,
    pub init: InitKind,
}

impl CellSpec {
    pub fn cskv(ratio_k: f64, ratio_v: f64, window: usize) -> Self {
        Self {
            method: Method::Cskv,
            ratio_k,
            ratio_v,
            window,
            quant_mode: QuantMode::None,
            init: InitKind::Asvd,
        }
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn with_quant(mut self, quant_mode: QuantMode) -> Self {
        self.quant_mode = quant_mode;
        self
    }

    pub fn with_init(mut self, init: InitKind) -> Self {
        self.init = init;
        self
    }

    /// Method column value; non-default inits are appended (`cskv+svd`).
    pub fn label(&self) -> String {
        match (self.method, self.init) {
            (Method::Cskv, InitKind::Asvd)
            | (Method::Baseline | Method::Streaming | Method::H2o, _) => {
                self.method.as_str().to_string()
            }
            (Method::Cskv, init) => format!("cskv+{}", init_str(init)),
        }
    }

    pub fn plan(
        &self,
        weights: &TransformerWeights,
        storage: StorageDtype,
    ) -> Result<CompressionPlan> {
        let quant = (self.quant_mode != QuantMode::None).then(KvQuantSpec::default);
        Ok(
            CompressionPlan::uniform(&weights.config, self.ratio_k, self.ratio_v, self.window)?
                .with_quant(quant)
                .with_storage(storage),
        )
    }
}

/// Window ablation at a fixed ratio.
pub fn window_grid(ratio: f64) -> Vec<CellSpec> {
    WINDOW_GRID
        .iter()
        .map(|m| CellSpec::cskv(ratio, ratio, *m))
        .collect()
}

/// Key/value allocation ablation: for each total `T`, splits
/// `(T + δ, T − δ)` with `δ = j·(1 − T)/4`, `j = 3, 2, …, −3`.
pub fn kv_split_grid(window: usize) -> Vec<CellSpec> {
    KV_SPLIT_TOTALS
        .iter()
        .flat_map(|t| {
            (-3..=3).rev().map(move |j| {
                let d = j as f64 * (1.0 - t) / 4.0;
                CellSpec::cskv(t + d, t - d, window)
            })
        })
        .collect()
}

pub fn init_grid(window: usize) -> Vec<CellSpec> {
    ABLATION_RATIOS
        .iter()
        .flat_map(|r| {
            [InitKind::Random, InitKind::Svd, InitKind::Asvd]
                .map(|i| CellSpec::cskv(*r, *r, window).with_init(i))
        })
        .collect()
}

pub fn quant_grid(window: usize) -> Vec<CellSpec> {
    ABLATION_RATIOS
        .iter()
        .flat_map(|r| {
            [QuantMode::None, QuantMode::Ptq4, QuantMode::Qat4]
                .map(|q| CellSpec::cskv(*r, *r, window).with_quant(q))
        })
        .collect()
}

/// CSKV against both pruning baselines at matching bytes.
pub fn baseline_grid(ratios: &[f64], window: usize) -> Vec<CellSpec> {
    ratios
        .iter()
        .flat_map(|r| {
            [Method::Cskv, Method::Streaming, Method::H2o]
                .map(|m| CellSpec::cskv(*r, *r, window).with_method(m))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_lines: usize,
    /// Greedy baseline tokens, then teacher-forced through every cache.
    pub max_new: usize,
    pub vocab: VocabProfile,
}

/// Where each cell's factors come from.
#[derive(Debug, Clone)]
pub enum FitSpec {
    /// Closed-form weighted optimum per layer.
    Oracle,
    /// Init per cell, then fine-tuning (quant-aware for `qat4` cells).
    Calibrated { alpha: f64, calib: CalibConfig },
    /// Fixed factors; cells whose ranks differ record an error.
    Provided(ModelFactors),
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub cells: Vec<CellSpec>,
    pub seeds: Vec<u64>,
    pub task: TaskSpec,
    pub fit: FitSpec,
    pub storage: StorageDtype,
    /// Calibration prompts (disjoint from evaluation tasks).
    pub calib_streams: usize,
    pub calib_seed: u64,
}

/// The uncompressed reference for one task.
#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub task: RetrievalTask,
    /// Greedy continuation; also the teacher-forced tokens.
    pub transcript: Vec<u32>,
    pub run: Run,
    /// Cached pre-rotation keys and values after the run.
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
}

impl BaselineRun {
    /// Tokens held by any cache after the teacher-forced run.
    pub fn final_len(&self) -> usize {
        self.task.prompt.len() + self.transcript.len()
    }
}

/// Greedy baseline decode of `max_new` tokens, recording every step.
pub fn baseline_run(
    weights: &TransformerWeights,
    task: RetrievalTask,
    max_new: usize,
    storage: StorageDtype,
) -> Result<BaselineRun> {
    let mut cache = BaselineKvCache::new(weights.config.n_layers, storage);
    let pre = prefill_with(weights, &mut cache, &task.prompt)?;
    let mut next = argmax(pre.logits.row(pre.logits.rows() - 1));
    let mut run = Run::default();
    for _ in 0..max_new {
        run.tokens.push(next);
        let step = decode_step_with(weights, &mut cache, next)?;
        next = argmax(&step.logits);
        run.logits.push(step.logits);
        run.attn.push(step.attn_outputs);
    }
    Ok(BaselineRun {
        transcript: run.tokens.clone(),
        task,
        run,
        keys: cache.keys,
        values: cache.values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub fidelity: FidelityReport,
    pub stats: CacheStats,
    pub retrieval: RetrievalScore,
    /// Token budget handed to a pruning cache.
    pub budget_tokens: Option<usize>,
}

impl CellMetrics {
    pub fn exact_rate(&self) -> f64 {
        if self.retrieval == RetrievalScore::Exact {
            1.0
        } else {
            0.0
        }
    }
}

fn full_width_stats(
    tokens: usize,
    kept: usize,
    cfg_bytes_per_token: usize,
    baseline_tokens: usize,
) -> CacheStats {
    CacheStats::from_parts(
        tokens,
        0,
        0,
        kept * cfg_bytes_per_token,
        baseline_tokens * cfg_bytes_per_token,
    )
}

/// Pruning budget with the bytes of the cell's CSKV configuration at `n` tokens.
pub fn matched_budget(weights: &TransformerWeights, plan: &CompressionPlan, n: usize) -> usize {
    let cfg = &weights.config;
    let per_token = cfg.n_layers * 2 * cfg.d_kv * plan.storage.bytes();
    let bytes = plan_memory_bytes(cfg, plan, n).bytes_total;
    ((bytes + per_token / 2) / per_token).max(1)
}

/// Scores one cell against a baseline run. `factors` is required for CSKV.
pub fn evaluate_cell(
    weights: &TransformerWeights,
    cell: &CellSpec,
    factors: Option<&ModelFactors>,
    baseline: &BaselineRun,
    storage: StorageDtype,
) -> Result<CellMetrics> {
    let cfg = &weights.config;
    let prompt = &baseline.task.prompt;
    let forced = &baseline.transcript;
    let n = baseline.final_len();
    let max_new = forced.len();
    let per_token = cfg.n_layers * 2 * cfg.d_kv * storage.bytes();

    let (run, free, stats, residuals, budget) = match cell.method {
        Method::Baseline => {
            let mut c = BaselineKvCache::new(cfg.n_layers, storage);
            let run = teacher_forced(weights, &mut c, prompt, forced)?;
            (
                run,
                forced.clone(),
                full_width_stats(n, n, per_token, n),
                Vec::new(),
                None,
            )
        }
        Method::Cskv => {
            let factors =
                factors.ok_or_else(|| CskvError::Input("cskv cell without factors".into()))?;
            let plan = cell.plan(weights, storage)?;
            let mut c = BiBranchCache::new(cfg, factors, &plan)?;
            let run = teacher_forced(weights, &mut c, prompt, forced)?;
            let residuals = layer_residuals(&c, &baseline.keys, &baseline.values)?;
            let stats = c.stats();
            let mut g = BiBranchCache::new(cfg, factors, &plan)?;
            let free = generate_with(weights, &mut g, prompt, max_new)?;
            (run, free, stats, residuals, None)
        }
        Method::Streaming | Method::H2o => {
            let plan = cell.plan(weights, storage)?;
            let budget = matched_budget(weights, &plan, n);
            let (run, kept) = pruned_run(weights, cell.method, budget, storage, prompt, forced)?;
            let mut g = pruning_policy(cell.method, budget).build(cfg.n_layers, storage)?;
            let free = generate_with(weights, g.as_mut(), prompt, max_new)?;
            (
                run,
                free,
                full_width_stats(n, kept, per_token / cfg.n_layers, n * cfg.n_layers),
                Vec::new(),
                Some(budget),
            )
        }
    };
    let mut fidelity = output_fidelity(&baseline.run, &run)?;
    fidelity.layer_residuals = residuals;
    Ok(CellMetrics {
        fidelity,
        stats,
        retrieval: score_retrieval(&free, &baseline.task),
        budget_tokens: budget,
    })
}

fn pruning_policy(method: Method, budget: usize) -> PruningPolicy {
    match method {
        Method::Streaming => PruningPolicy::streaming_budget(budget),
        _ => PruningPolicy::H2o { budget },
    }
}

/// Teacher-forced pruned run and the total tokens kept across layers.
fn pruned_run(
    weights: &TransformerWeights,
    method: Method,
    budget: usize,
    storage: StorageDtype,
    prompt: &[u32],
    forced: &[u32],
) -> Result<(Run, usize)> {
    let layers = weights.config.n_layers;
    match pruning_policy(method, budget) {
        PruningPolicy::Streaming { sinks, window } => {
            let mut c = StreamingCache::new(layers, sinks, window, storage);
            let run = teacher_forced(weights, &mut c, prompt, forced)?;
            Ok((run, (0..layers).map(|l| c.kept_positions(l).len()).sum()))
        }
        PruningPolicy::H2o { budget } => {
            let mut c = H2oCache::new(layers, budget, storage)?;
            let run = teacher_forced(weights, &mut c, prompt, forced)?;
            Ok((run, (0..layers).map(|l| c.kept_positions(l).len()).sum()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: CellSpec,
    pub seed: u64,
    pub outcome: std::result::Result<CellMetrics, String>,
}

/// Factors fitted for one (ranks, init, quant-aware) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub label: String,
    pub report: Option<CalibReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepResult {
    /// Cell-major, seeds in request order.
    pub rows: Vec<CellResult>,
    pub fits: Vec<FitRecord>,
}

impl SweepResult {
    pub fn n_errors(&self) -> usize {
        self.rows.iter().filter(|r| r.outcome.is_err()).count()
            + self.fits.iter().filter(|f| f.error.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct FitKey {
    rank_k: Vec<usize>,
    rank_v: Vec<usize>,
    init: Option<InitKind>,
    quant_aware: bool,
}

impl FitKey {
    fn label(&self) -> String {
        let mut s = format!("rk{:?}_rv{:?}", self.rank_k, self.rank_v);
        if let Some(i) = self.init {
            s.push('_');
            s.push_str(init_str(i));
        }
        if self.quant_aware {
            s.push_str("_qat");
        }
        s.retain(|c| c != ' ');
        s
    }
}

fn fit_key(fit: &FitSpec, cell: &CellSpec, plan: &CompressionPlan) -> FitKey {
    let calibrated = matches!(fit, FitSpec::Calibrated { .. });
    FitKey {
        rank_k: plan.rank_k.clone(),
        rank_v: plan.rank_v.clone(),
        init: calibrated.then_some(cell.init),
        quant_aware: calibrated && cell.quant_mode == QuantMode::Qat4,
    }
}

fn fit(
    weights: &TransformerWeights,
    spec: &FitSpec,
    key: &FitKey,
    plan: &CompressionPlan,
    activations: &[ActivationBatch],
    seed: u64,
) -> Result<(ModelFactors, Option<CalibReport>)> {
    match spec {
        FitSpec::Oracle => Ok((oracle_factors(weights, activations, plan)?, None)),
        FitSpec::Provided(f) => {
            f.check(&weights.config, plan)?;
            Ok((f.clone(), None))
        }
        FitSpec::Calibrated { alpha, calib } => {
            let init = key.init.unwrap_or_default();
            let f0 = initialize_factors(weights, activations, plan, init, *alpha, seed)?;
            let cfg = CalibConfig {
                quant_aware: key.quant_aware,
                ..calib.clone()
            };
            let (f, report) = finetune_model(weights, activations, plan, &f0, &cfg)?;
            Ok((f, Some(report)))
        }
    }
}

/// Runs every (cell, seed) pair. Failures are recorded per cell or per fit
/// and never abort the sweep.
pub fn run_sweep(weights: &TransformerWeights, cfg: &SweepConfig) -> SweepResult {
    let baselines: Vec<std::result::Result<BaselineRun, String>> = cfg
        .seeds
        .par_iter()
        .map(|seed| {
            let task = gen_lines_task(cfg.task.n_lines, *seed, &cfg.task.vocab)?;
            baseline_run(weights, task, cfg.task.max_new, cfg.storage)
        })
        .map(|r| r.map_err(|e| format!("baseline: {e}")))
        .collect();

    let plans: Vec<std::result::Result<CompressionPlan, String>> = cfg
        .cells
        .iter()
        .map(|c| c.plan(weights, cfg.storage).map_err(|e| e.to_string()))
        .collect();

    let mut keys: Vec<FitKey> = cfg
        .cells
        .iter()
        .zip(&plans)
        .filter(|(c, _)| c.method == Method::Cskv)
        .filter_map(|(c, p)| p.as_ref().ok().map(|p| fit_key(&cfg.fit, c, p)))
        .collect();
    keys.sort();
    keys.dedup();

    let activations: std::result::Result<Vec<ActivationBatch>, String> =
        if keys.is_empty() || matches!(cfg.fit, FitSpec::Provided(_)) {
            Ok(Vec::new())
        } else {
            let layers: Vec<usize> = (0..weights.config.n_layers).collect();
            calibration_streams(
                cfg.calib_streams.max(1),
                cfg.task.n_lines,
                cfg.calib_seed,
                &cfg.task.vocab,
            )
            .and_then(|s| capture_activations(weights, &s, &layers))
            .map_err(|e| format!("calibration data: {e}"))
        };

    let mut fitted: BTreeMap<FitKey, std::result::Result<ModelFactors, String>> = BTreeMap::new();
    let mut fits = Vec::new();
    for key in keys {
        let plan = cfg
            .cells
            .iter()
            .zip(&plans)
            .find_map(|(c, p)| {
                p.as_ref()
                    .ok()
                    .filter(|p| c.method == Method::Cskv && fit_key(&cfg.fit, c, p) == key)
            })
            .expect("every key comes from a valid plan")
            .clone();
        let result = match &activations {
            Ok(acts) => {
                fit(weights, &cfg.fit, &key, &plan, acts, cfg.calib_seed).map_err(|e| e.to_string())
            }
            Err(e) => Err(e.clone()),
        };
        fits.push(FitRecord {
            label: key.label(),
            report: result.as_ref().ok().and_then(|(_, r)| r.clone()),
            error: result.as_ref().err().cloned(),
        });
        fitted.insert(key, result.map(|(f, _)| f));
    }

    let jobs: Vec<(usize, usize)> = (0..cfg.cells.len())
        .flat_map(|c| (0..cfg.seeds.len()).map(move |s| (c, s)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(ci, si)| {
            let cell = cfg.cells[ci];
            let outcome = (|| {
                let base = baselines[si].as_ref().map_err(|e| e.clone())?;
                let plan = plans[ci].as_ref().map_err(|e| e.clone())?;
                if cell.method == Method::Cskv
                    && cell.quant_mode == QuantMode::Qat4
                    && !matches!(cfg.fit, FitSpec::Calibrated { .. })
                {
                    return Err("qat4 needs calibrated factors".to_string());
                }
                let factors = match cell.method {
                    Method::Cskv => Some(
                        fitted[&fit_key(&cfg.fit, &cell, plan)]
                            .as_ref()
                            .map_err(|e| format!("fit: {e}"))?,
                    ),
                    _ => None,
                };
                evaluate_cell(weights, &cell, factors, base, cfg.storage).map_err(|e| e.to_string())
            })();
            CellResult {
                cell,
                seed: cfg.seeds[si],
                outcome,
            }
        })
        .collect();
    SweepResult { rows, fits }
}
