use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::svg::{bar_chart_svg, Bar};
use crate::eval::{evaluate, EvalReport};
use crate::model::{Model, ModelConfig};
use crate::rl::{train_rl, RLConfig, RlOutputs};
use crate::runlog::RunLog;
use crate::taskgen::TrajectorySample;
use crate::train::{train_stage, StageOutputs, TrainConfig};

/// Shared settings for every leg. `train` supplies the optimizer settings,
/// `k_latent` and `gamma`; stage and slot count are set per leg.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Epochs for the text-only legs; `None` gives them as many passes as
    /// both latent stages together.
    pub baseline_epochs: Option<usize>,
    /// Adds GRPO legs on top of the CoT and latent legs.
    pub rl: Option<RLConfig>,
}

/// Datasets a suite draws on.
pub struct SuiteData<'a> {
    pub cot: &'a [TrajectorySample],
    pub direct: &'a [TrajectorySample],
    pub rl_prompts: &'a [TrajectorySample],
    pub test: &'a [TrajectorySample],
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineRow {
    pub leg: String,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

pub struct SuiteResult {
    /// Accuracy of the shared initialization, before any leg trains.
    pub init_report: EvalReport,
    pub rows: Vec<BaselineRow>,
    /// Trained models by leg name; `mirage-stage1` is the stage-1 model.
    pub models: BTreeMap<String, Model<f64>>,
    /// Mean reward per epoch of each GRPO leg.
    pub rl_rewards: BTreeMap<String, Vec<f64>>,
}

impl SuiteResult {
    pub fn report(&self, leg: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.leg == leg).and_then(|r| r.report.as_ref())
    }
}

fn outputs(out: Option<&Path>, tag: &str) -> StageOutputs {
    StageOutputs {
        checkpoint_dir: out.map(|d| d.join("checkpoints")),
        metrics_path: out.map(|d| d.join("metrics").join(format!("{tag}.csv"))),
        tag: tag.to_string(),
    }
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn text_only(cfg: &TrainConfig, epochs: usize) -> TrainConfig {
    TrainConfig { stage: 2, k_latent: 0, epochs, allow_no_init: true, ..cfg.clone() }
}

fn stage(cfg: &TrainConfig, stage: u8, k: usize, gamma: f64) -> TrainConfig {
    TrainConfig { stage, k_latent: k, gamma, allow_no_init: stage == 2, ..cfg.clone() }
}

fn eval_leg(
    leg: &str,
    model: Result<Model<f64>>,
    test: &[TrajectorySample],
    out: Option<&Path>,
    log: &mut RunLog,
) -> (BaselineRow, Option<Model<f64>>) {
    let result = model.and_then(|m| {
        let report = evaluate(&m, test)?;
        if let Some(dir) = out {
            write(dir.join("metrics").join(format!("eval_{leg}.csv")), &report.to_csv())?;
        }
        Ok((report, m))
    });
    match result {
        Ok((report, m)) => {
            log.log(format!("{leg}: overall accuracy {:.4} on {} samples", report.overall(), report.n()));
            (BaselineRow { leg: leg.to_string(), report: Some(report), error: None }, Some(m))
        }
        Err(e) => {
            log.log(format!("{leg}: failed: {e}"));
            (BaselineRow { leg: leg.to_string(), report: None, error: Some(e.to_string()) }, None)
        }
    }
}

fn levels_of(test: &[TrajectorySample]) -> Vec<usize> {
    test.iter().map(|s| s.level).collect::<BTreeSet<_>>().into_iter().collect()
}

fn accuracy_cells(report: Option<&EvalReport>, levels: &[usize]) -> String {
    match report {
        Some(r) => {
            let per: Vec<String> = levels.iter().map(|l| r.levels.get(l).map_or(String::new(), |s| s.accuracy().to_string())).collect();
            format!("{},{},{}", per.join(","), r.overall(), r.n())
        }
        None => format!("{},,", vec![""; levels.len()].join(",")),
    }
}

/// Comparison table: one row per leg with per-level and overall accuracy.
pub fn baseline_csv(rows: &[BaselineRow], levels: &[usize]) -> String {
    let head: Vec<String> = levels.iter().map(|l| format!("level_{l}")).collect();
    let mut s = format!("leg,{},avg,n,error\n", head.join(","));
    for r in rows {
        s += &format!("{},{},{}\n", r.leg, accuracy_cells(r.report.as_ref(), levels), r.error.clone().unwrap_or_default().replace(',', ";"));
    }
    s
}

/// Trains every leg from one shared initialization and evaluates each on
/// the same test split: answer-only SFT, thoughts-only SFT, the two latent
/// stages, and optionally GRPO on the latter two. A failing leg leaves a gap
/// in the table rather than stopping the suite.
pub fn run_baseline_suite(cfg: &SuiteConfig, data: &SuiteData<'_>, out: Option<&Path>, log: &mut RunLog) -> Result<SuiteResult> {
    let init = Model::<f64>::init(cfg.model.clone())?;
    let init_report = evaluate(&init, data.test)?;
    let base_epochs = cfg.baseline_epochs.unwrap_or(2 * cfg.train.epochs);
    let t = &cfg.train;
    let mut rows = Vec::new();
    let mut models = BTreeMap::new();
    let mut rl_rewards = BTreeMap::new();

    let leg = |name: &str, trained: Result<Model<f64>>, rows: &mut Vec<BaselineRow>, models: &mut BTreeMap<String, Model<f64>>, log: &mut RunLog| {
        let (row, m) = eval_leg(name, trained, data.test, out, log);
        rows.push(row);
        if let Some(m) = m {
            models.insert(name.to_string(), m);
        }
    };

    for (name, samples) in [("direct-sft", data.direct), ("cot-sft", data.cot)] {
        log.log(format!("leg {name}"));
        let trained = train_stage(init.clone(), None, samples, &text_only(t, base_epochs), &outputs(out, name), log).map(|o| o.model);
        leg(name, trained, &mut rows, &mut models, log);
    }

    log.log("leg mirage".to_string());
    let s1 = train_stage(init.clone(), None, data.cot, &stage(t, 1, t.k_latent, t.gamma), &outputs(out, "mirage_s1"), log).map(|o| o.model);
    let s2 = match &s1 {
        Ok(m) => train_stage(m.clone(), None, data.cot, &stage(t, 2, t.k_latent, t.gamma), &outputs(out, "mirage_s2"), log).map(|o| o.model),
        Err(e) => Err(Error::Halted(format!("stage 1 failed: {e}"))),
    };
    if let Ok(m) = s1 {
        models.insert("mirage-stage1".to_string(), m);
    }
    leg("mirage", s2, &mut rows, &mut models, log);

    if let Some(rl) = &cfg.rl {
        for base in ["cot-sft", "mirage"] {
            let name = format!("{base}+grpo");
            log.log(format!("leg {name}"));
            let trained = match models.get(base) {
                Some(m) => {
                    let o = RlOutputs {
                        checkpoint_dir: out.map(|d| d.join("checkpoints")),
                        metrics_path: out.map(|d| d.join("metrics").join(format!("{name}.csv"))),
                        tag: name.clone(),
                    };
                    train_rl(m.clone(), data.rl_prompts, rl, &o, log).map(|r| {
                        rl_rewards.insert(name.clone(), r.epoch_rewards);
                        r.model
                    })
                }
                None => Err(Error::Halted(format!("{base} leg did not train"))),
            };
            leg(&name, trained, &mut rows, &mut models, log);
        }
    }

    if let Some(dir) = out {
        let levels = levels_of(data.test);
        write(dir.join("metrics").join("baselines.csv"), &baseline_csv(&rows, &levels))?;
        let bars: Vec<Bar> = rows
            .iter()
            .filter_map(|r| r.report.as_ref().map(|rep| Bar { label: r.leg.clone(), value: rep.overall() }))
            .collect();
        write(dir.join("plots").join("baselines.svg"), &bar_chart_svg("Test accuracy by training recipe", &bars))?;
    }
    Ok(SuiteResult { init_report, rows, models, rl_rewards })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageRemoval {
    Full,
    NoStage1,
    NoStage2,
}

impl StageRemoval {
    pub fn name(self) -> &'static str {
        match self {
            StageRemoval::Full => "full",
            StageRemoval::NoStage1 => "no-stage-1",
            StageRemoval::NoStage2 => "no-stage-2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(StageRemoval::Full),
            "no-stage-1" => Ok(StageRemoval::NoStage1),
            "no-stage-2" => Ok(StageRemoval::NoStage2),
            _ => Err(Error::config("stages", format!("unknown stage flag {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationCell {
    pub k: usize,
    pub gamma: f64,
    pub removal: StageRemoval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// Cells of a sweep: the full pipeline at every `(k, gamma)`, then each
/// stage removal once at the base `k` and `gamma`.
pub fn ablation_cells(k_list: &[usize], gamma_list: &[f64], removals: &[StageRemoval], base: &TrainConfig) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    if removals.contains(&StageRemoval::Full) {
        for &k in k_list {
            for &gamma in gamma_list {
                cells.push(AblationCell { k, gamma, removal: StageRemoval::Full });
            }
        }
    }
    for &r in removals.iter().filter(|&&r| r != StageRemoval::Full) {
        cells.push(AblationCell { k: base.k_latent, gamma: base.gamma, removal: r });
    }
    cells
}

/// Trains and evaluates every cell of [`ablation_cells`] on `data.cot`.
/// Stage-1 models are shared between cells with the same `(k, gamma)`.
/// A failing cell is recorded and the sweep continues.
pub fn ablation_sweep(
    cfg: &SuiteConfig,
    k_list: &[usize],
    gamma_list: &[f64],
    removals: &[StageRemoval],
    data: &SuiteData<'_>,
    out: Option<&Path>,
    log: &mut RunLog,
) -> Result<Vec<AblationRow>> {
    let cells = ablation_cells(k_list, gamma_list, removals, &cfg.train);
    let mut stage1_cache: BTreeMap<(usize, u64), Model<f64>> = BTreeMap::new();
    let mut rows = Vec::new();
    for cell in cells {
        let tag = format!("k{}_g{}_{}", cell.k, cell.gamma, cell.removal.name());
        log.log(format!("ablation cell {tag}"));
        let t = &cfg.train;
        let result = (|| -> Result<Model<f64>> {
            let init = Model::<f64>::init(ModelConfig { k_latent: cell.k, ..cfg.model.clone() })?;
            let s2 = stage(t, 2, cell.k, cell.gamma);
            if cell.removal == StageRemoval::NoStage1 {
                return Ok(train_stage(init, None, data.cot, &s2, &outputs(out, &format!("{tag}_s2")), log)?.model);
            }
            let key = (cell.k, cell.gamma.to_bits());
            let s1 = match stage1_cache.get(&key) {
                Some(m) => m.clone(),
                None => {
                    let s1cfg = stage(t, 1, cell.k, cell.gamma);
                    let name = format!("k{}_g{}_s1", cell.k, cell.gamma);
                    let m = train_stage(init, None, data.cot, &s1cfg, &outputs(out, &name), log)?.model;
                    stage1_cache.insert(key, m.clone());
                    m
                }
            };
            if cell.removal == StageRemoval::NoStage2 {
                return Ok(s1);
            }
            Ok(train_stage(s1, None, data.cot, &s2, &outputs(out, &format!("{tag}_s2")), log)?.model)
        })();
        let (row, _) = eval_leg(&tag, result, data.test, out, log);
        rows.push(AblationRow { cell, report: row.report, error: row.error });
    }
    if let Some(dir) = out {
        let levels = levels_of(data.test);
        write(dir.join("metrics").join("ablation.csv"), &ablation_csv(&rows, &levels))?;
        let bars: Vec<Bar> = rows
            .iter()
            .filter_map(|r| {
                r.report.as_ref().map(|rep| Bar {
                    label: format!("k{} g{} {}", r.cell.k, r.cell.gamma, r.cell.removal.name()),
                    value: rep.overall(),
                })
            })
            .collect();
        write(dir.join("plots").join("ablation.svg"), &bar_chart_svg("Ablation accuracy", &bars))?;
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow], levels: &[usize]) -> String {
    let head: Vec<String> = levels.iter().map(|l| format!("level_{l}")).collect();
    let mut s = format!("k,gamma,variant,{},avg,n,error\n", head.join(","));
    for r in rows {
        s += &format!(
            "{},{},{},{},{}\n",
            r.cell.k,
            r.cell.gamma,
            r.cell.removal.name(),
            accuracy_cells(r.report.as_ref(), levels),
            r.error.clone().unwrap_or_default().replace(',', ";")
        );
    }
    s
}
