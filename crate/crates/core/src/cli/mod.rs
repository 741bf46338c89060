//! The `mirage` command: dataset generation, both training stages, GRPO,
//! evaluation, the comparison suites and latent analysis. Each command
//! except `gen-data` and `inspect` writes a run directory:
//!
//! ```text
//! config.resolved  log.txt  checksums.sha256
//! metrics/*.csv    checkpoints/*.bin    plots/*.svg
//! ```

mod config;
mod rundir;

pub use config::{PathsConfig, RunConfig, RunSection, Source, SuiteSettings};
pub use rundir::{read_checksums, sha256_hex, verify_artifacts, write_checksums, CHECKSUM_FILE};

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{
    ablation_sweep, bar_chart_svg, evaluate, latent_geometry, run_baseline_suite, Bar, StageRemoval, SuiteConfig, SuiteData,
};
use crate::model::{decode, Checkpoint, DecodeOptions, DecodeStep, Model, Tokenizer};
use crate::rl::{train_rl, RlOutputs};
use crate::runlog::RunLog;
use crate::taskgen::{
    build_dataset, dataset_file_name, meta_path, read_dataset, verify_disjoint, Dataset, Split, TaskKind, Variant,
};
use crate::train::{prompt_layout, train_stage, StageOutputs};

#[derive(Parser, Debug)]
#[command(name = "mirage", version, about = "Latent visual reasoning on procedural grid tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory. Defaults to $MIRAGE_OUT_DIR, then runs/<command>.
    #[arg(long, env = "MIRAGE_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    /// Worker threads; 1 keeps runs bit-reproducible across machines.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Any setting, as section.key=value (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
    /// Echo log lines to stderr.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a dataset split as JSONL plus a metadata sidecar.
    GenData {
        #[arg(long)]
        task: String,
        /// Base samples; sft files hold three trajectories per sample.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        split: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "cot")]
        variant: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised training, stage 1 or 2.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: u8,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        init_checkpoint: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// GRPO fine-tuning from a checkpoint.
    Rl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        init_checkpoint: Option<String>,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        group_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Greedy-decode a test split and report accuracy per level.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        data: Option<String>,
    },
    /// Direct SFT, CoT SFT and the latent pipeline from one shared init.
    Baselines {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        direct_data: Option<String>,
        #[arg(long)]
        rl_data: Option<String>,
        #[arg(long)]
        test_data: Option<String>,
        /// Add GRPO legs on the CoT and latent models.
        #[arg(long)]
        with_rl: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Sweep latent size, text-loss weight and stage removal.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        test_data: Option<String>,
        /// Comma-separated, e.g. 2,4,6,8.
        #[arg(long)]
        k_list: Option<String>,
        #[arg(long)]
        gamma_list: Option<String>,
        /// Comma-separated from full, no-stage-1, no-stage-2.
        #[arg(long)]
        stages: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Centroid distances and PCA of text, visual and latent vectors.
    AnalyzeLatents {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        n_per_task: Option<usize>,
    },
    /// Print one dataset line, or decode its prompt step by step.
    Inspect {
        #[arg(long)]
        data: PathBuf,
        /// 1-based line number.
        #[arg(long, default_value_t = 1)]
        line: usize,
        #[arg(long)]
        decode: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        max_new: Option<usize>,
    },
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 on a failed run, 2 on a usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn push<T: ToString>(flags: &mut Vec<(String, String)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        flags.push((key.to_string(), v.to_string()));
    }
}

fn list_flag(flags: &mut Vec<(String, String)>, key: &str, v: Option<String>, quote: bool) {
    if let Some(v) = v {
        let items: Vec<String> = v.split(',').map(|s| if quote { format!("{:?}", s.trim()) } else { s.trim().to_string() }).collect();
        flags.push((key.to_string(), format!("[{}]", items.join(", "))));
    }
}

/// Resolved configuration plus an open run directory.
struct Run {
    cfg: RunConfig,
    dir: PathBuf,
    log: RunLog,
}

impl Run {
    fn open(command: &str, common: &Common, mut flags: Vec<(String, String)>) -> Result<Run> {
        flags.insert(0, ("run.command".to_string(), command.to_string()));
        push(&mut flags, "run.threads", common.threads);
        for s in &common.set {
            let (k, v) = s.split_once('=').ok_or_else(|| Error::config(s, "--set takes section.key=value"))?;
            flags.push((k.trim().to_string(), v.trim().to_string()));
        }
        let text = match &common.config {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        let mut cfg = RunConfig::resolve(text.as_deref(), &flags)?;
        if cfg.run.command != command {
            return Err(Error::config("run.command", format!("config is for `{}`, not `{command}`", cfg.run.command)));
        }
        if !cfg.paths.init_checkpoint.is_empty() {
            let ck = Checkpoint::load(Path::new(&cfg.paths.init_checkpoint))?;
            cfg.adopt_model(&ck.config)?;
        }
        // Latent slots follow the model unless set explicitly.
        if cfg.source("train.k_latent") == Source::Default && cfg.train.k_latent != 0 {
            cfg.train.k_latent = cfg.model.k_latent;
            cfg.provenance.insert("train.k_latent".to_string(), Source::Derived);
        }
        cfg.validate()?;

        let dir = common.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(command));
        for sub in ["metrics", "checkpoints", "plots"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let resolved = dir.join("config.resolved");
        std::fs::write(&resolved, cfg.to_toml()).map_err(|e| Error::io(&resolved, e))?;
        let log = RunLog::to_file(&dir.join("log.txt"), common.verbose)?;
        Ok(Run { cfg, dir, log })
    }

    fn path(&self, field: &str, value: &str) -> Result<PathBuf> {
        if value.is_empty() {
            return Err(Error::config(field, "required"));
        }
        Ok(PathBuf::from(value))
    }

    fn dataset(&self, field: &str, value: &str) -> Result<Dataset> {
        read_dataset(&self.path(field, value)?)
    }

    fn checkpoint_model(&self) -> Result<Model<f64>> {
        Checkpoint::load(&self.path("paths.init_checkpoint", &self.cfg.paths.init_checkpoint)?)?.model()
    }

    fn test_set(&self, field: &str, value: &str) -> Result<Dataset> {
        let ds = self.dataset(field, value)?;
        if ds.meta.split != Split::Test {
            return Err(Error::config(field, format!("expected a test split, got {}", ds.meta.split.name())));
        }
        Ok(if self.cfg.suite.levels.is_empty() { ds } else { ds.filter_levels(&self.cfg.suite.levels) })
    }

    fn write(&self, rel: &str, text: &str) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(PathBuf::from(rel))
    }

    /// Runs `body` on a pool of `run.threads` workers, then checksums the
    /// run directory and verifies the artifacts `body` reports.
    fn finish(mut self, body: impl FnOnce(&mut Run) -> Result<Vec<PathBuf>> + Send) -> Result<()> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.run.threads)
            .build()
            .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
        let mut artifacts = pool.install(|| body(&mut self))?;
        self.log.log(format!("run finished: {}", self.dir.display()));
        drop(self.log);
        artifacts.extend(["config.resolved", "log.txt"].map(PathBuf::from));
        write_checksums(&self.dir)?;
        verify_artifacts(&self.dir, &artifacts)
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData { task, n, split, seed, variant, out } => gen_data(&task, n, &split, seed, &variant, &out),
        Command::Inspect { data, line, decode, checkpoint, max_new } => inspect(&data, line, decode, checkpoint.as_deref(), max_new),
        Command::Train { common, stage, data, init_checkpoint, epochs, lr, k, gamma, seed } => {
            let mut f = Vec::new();
            push(&mut f, "train.stage", Some(stage));
            push(&mut f, "paths.data", data);
            push(&mut f, "paths.init_checkpoint", init_checkpoint);
            push(&mut f, "train.epochs", epochs);
            push(&mut f, "train.lr", lr);
            push(&mut f, "model.k_latent", k);
            push(&mut f, "train.k_latent", k);
            push(&mut f, "train.gamma", gamma);
            push(&mut f, "train.seed", seed);
            push(&mut f, "model.seed", seed);
            Run::open("train", &common, f)?.finish(train)
        }
        Command::Rl { common, init_checkpoint, data, epochs, lr, group_size, seed } => {
            let mut f = Vec::new();
            push(&mut f, "paths.init_checkpoint", init_checkpoint);
            push(&mut f, "paths.data", data);
            push(&mut f, "rl.epochs", epochs);
            push(&mut f, "rl.lr", lr);
            push(&mut f, "rl.group_size", group_size);
            push(&mut f, "rl.seed", seed);
            Run::open("rl", &common, f)?.finish(rl)
        }
        Command::Eval { common, checkpoint, data } => {
            let mut f = Vec::new();
            push(&mut f, "paths.init_checkpoint", checkpoint);
            push(&mut f, "paths.test_data", data);
            Run::open("eval", &common, f)?.finish(eval)
        }
        Command::Baselines { common, data, direct_data, rl_data, test_data, with_rl, epochs } => {
            let mut f = Vec::new();
            push(&mut f, "paths.data", data);
            push(&mut f, "paths.direct_data", direct_data);
            push(&mut f, "paths.rl_data", rl_data);
            push(&mut f, "paths.test_data", test_data);
            push(&mut f, "suite.with_rl", with_rl.then_some(true));
            push(&mut f, "train.epochs", epochs);
            Run::open("baselines", &common, f)?.finish(baselines)
        }
        Command::Ablate { common, data, test_data, k_list, gamma_list, stages, epochs } => {
            let mut f = Vec::new();
            push(&mut f, "paths.data", data);
            push(&mut f, "paths.test_data", test_data);
            list_flag(&mut f, "suite.k_list", k_list, false);
            list_flag(&mut f, "suite.gamma_list", gamma_list, false);
            list_flag(&mut f, "suite.stages", stages, true);
            push(&mut f, "train.epochs", epochs);
            Run::open("ablate", &common, f)?.finish(ablate)
        }
        Command::AnalyzeLatents { common, checkpoint, data, n_per_task } => {
            let mut f = Vec::new();
            push(&mut f, "paths.init_checkpoint", checkpoint);
            push(&mut f, "paths.test_data", data);
            push(&mut f, "suite.geometry_per_task", n_per_task);
            Run::open("analyze-latents", &common, f)?.finish(analyze_latents)
        }
    }
}

fn gen_data(task: &str, n: usize, split: &str, seed: u64, variant: &str, out: &Path) -> Result<()> {
    let (task, split, variant) = (TaskKind::parse(task)?, Split::parse(split)?, Variant::parse(variant)?);
    let ds = build_dataset(task, n, split, seed, variant)?;
    let name = dataset_file_name(task, split, variant);
    let path = out.join(&name);
    write_dataset_checked(&ds, &path)?;
    println!("wrote {} lines to {}", ds.samples.len(), path.display());
    let meta = meta_path(&path);
    let meta_name = meta.file_name().map(PathBuf::from).unwrap_or_default();
    write_checksums(out)?;
    verify_artifacts(out, &[PathBuf::from(name), meta_name])
}

fn write_dataset_checked(ds: &Dataset, path: &Path) -> Result<()> {
    crate::taskgen::write_dataset(ds, path)?;
    let back = read_dataset(path)?;
    if back != *ds {
        return Err(Error::Dataset(format!("{} does not read back identically", path.display())));
    }
    Ok(())
}

fn train(run: &mut Run) -> Result<Vec<PathBuf>> {
    let c = run.cfg.clone();
    let stage = c.train.stage;
    let model = if c.paths.init_checkpoint.is_empty() {
        if stage == 2 && !c.train.allow_no_init {
            return Err(Error::config("paths.init_checkpoint", "stage 2 starts from a stage-1 checkpoint; pass --init-checkpoint"));
        }
        Model::<f64>::init(c.model.clone())?
    } else {
        run.checkpoint_model()?
    };
    let data = run.dataset("paths.data", &c.paths.data)?;
    let tag = format!("stage{stage}");
    let out = StageOutputs {
        checkpoint_dir: Some(run.dir.join("checkpoints")),
        metrics_path: Some(run.dir.join("metrics").join(format!("{tag}.csv"))),
        tag: tag.clone(),
    };
    let outcome = train_stage(model, None, &data.samples, &c.train, &out, &mut run.log)?;
    let means = outcome.epoch_means();
    let bars: Vec<Bar> = means.iter().enumerate().map(|(e, (_, t))| Bar { label: format!("epoch {}", e + 1), value: *t }).collect();
    let plot = run.write(&format!("plots/{tag}_text_loss.svg"), &bar_chart_svg("Mean text loss per epoch", &bars))?;
    let mut artifacts: Vec<PathBuf> = outcome.checkpoints.iter().filter_map(|p| p.strip_prefix(&run.dir).ok().map(Path::to_path_buf)).collect();
    artifacts.push(PathBuf::from(format!("metrics/{tag}.csv")));
    artifacts.push(plot);
    Ok(artifacts)
}

fn rl(run: &mut Run) -> Result<Vec<PathBuf>> {
    let c = run.cfg.clone();
    let model = run.checkpoint_model()?;
    let prompts = run.dataset("paths.data", &c.paths.data)?;
    let out = RlOutputs {
        checkpoint_dir: Some(run.dir.join("checkpoints")),
        metrics_path: Some(run.dir.join("metrics").join("rl.csv")),
        tag: "rl".to_string(),
    };
    let outcome = train_rl(model, &prompts.samples, &c.rl, &out, &mut run.log)?;
    let bars: Vec<Bar> =
        outcome.epoch_rewards.iter().enumerate().map(|(e, r)| Bar { label: format!("epoch {}", e + 1), value: *r }).collect();
    let plot = run.write("plots/rl_reward.svg", &bar_chart_svg("Mean reward per epoch", &bars))?;
    let mut artifacts: Vec<PathBuf> = outcome.checkpoints.iter().filter_map(|p| p.strip_prefix(&run.dir).ok().map(Path::to_path_buf)).collect();
    artifacts.extend([PathBuf::from("metrics/rl.csv"), plot]);
    Ok(artifacts)
}

fn eval(run: &mut Run) -> Result<Vec<PathBuf>> {
    let c = run.cfg.clone();
    let model = run.checkpoint_model()?;
    let test = run.test_set("paths.test_data", &c.paths.test_data)?;
    let report = evaluate(&model, &test.samples)?;
    run.log.log(format!("accuracy {:.4} on {} samples, {} decode failures", report.overall(), report.n(), report.decode_failures()));
    print!("{}", report.to_csv());
    let bars: Vec<Bar> = report.levels.iter().map(|(l, s)| Bar { label: format!("level {l}"), value: s.accuracy() }).collect();
    Ok(vec![run.write("metrics/eval.csv", &report.to_csv())?, run.write("plots/eval.svg", &bar_chart_svg("Accuracy by level", &bars))?])
}

fn suite_config(c: &RunConfig) -> SuiteConfig {
    SuiteConfig {
        model: c.model.clone(),
        train: c.train.clone(),
        baseline_epochs: (c.suite.baseline_epochs > 0).then_some(c.suite.baseline_epochs),
        rl: c.suite.with_rl.then(|| c.rl.clone()),
    }
}

fn baselines(run: &mut Run) -> Result<Vec<PathBuf>> {
    let c = run.cfg.clone();
    let cot = run.dataset("paths.data", &c.paths.data)?;
    let direct = run.dataset("paths.direct_data", &c.paths.direct_data)?;
    let test = run.test_set("paths.test_data", &c.paths.test_data)?;
    verify_disjoint(&cot, &test)?;
    let rl = if c.suite.with_rl { Some(run.dataset("paths.rl_data", &c.paths.rl_data)?) } else { None };
    let data = SuiteData {
        cot: &cot.samples,
        direct: &direct.samples,
        rl_prompts: rl.as_ref().map_or(&[][..], |d| &d.samples),
        test: &test.samples,
    };
    let dir = run.dir.clone();
    let res = run_baseline_suite(&suite_config(&c), &data, Some(&dir), &mut run.log)?;
    run.log.log(format!("shared init accuracy {:.4}", res.init_report.overall()));
    print!("{}", std::fs::read_to_string(dir.join("metrics/baselines.csv")).map_err(|e| Error::io(&dir, e))?);
    Ok(vec![PathBuf::from("metrics/baselines.csv"), PathBuf::from("plots/baselines.svg")])
}

fn ablate(run: &mut Run) -> Result<Vec<PathBuf>> {
    let c = run.cfg.clone();
    let stages = c.suite.stages.iter().map(|s| StageRemoval::parse(s)).collect::<Result<Vec<_>>>()?;
    let cot = run.dataset("paths.data", &c.paths.data)?;
    let test = run.test_set("paths.test_data", &c.paths.test_data)?;
    verify_disjoint(&cot, &test)?;
    let data = SuiteData { cot: &cot.samples, direct: &[], rl_prompts: &[], test: &test.samples };
    let dir = run.dir.clone();
    ablation_sweep(&suite_config(&c), &c.suite.k_list, &c.suite.gamma_list, &stages, &data, Some(&dir), &mut run.log)?;
    print!("{}", std::fs::read_to_string(dir.join("metrics/ablation.csv")).map_err(|e| Error::io(&dir, e))?);
    Ok(vec![PathBuf::from("metrics/ablation.csv"), PathBuf::from("plots/ablation.svg")])
}

fn analyze_latents(run: &mut Run) -> Result<Vec<PathBuf>> {
    let c = run.cfg.clone();
    let model = run.checkpoint_model()?;
    let data = run.dataset("paths.test_data", &c.paths.test_data)?;
    let report = latent_geometry(&model, &data.samples, c.suite.geometry_per_task)?;
    run.log.log(format!(
        "latent-visual {:.4}, latent-text {:.4}, visual-text {:.4}, closer to visual: {}",
        report.dist_latent_visual, report.dist_latent_text, report.dist_visual_text, report.closer_to_visual
    ));
    print!("{}", report.summary_csv());
    Ok(vec![
        run.write("metrics/geometry_points.csv", &report.points_csv())?,
        run.write("metrics/geometry_summary.csv", &report.summary_csv())?,
        run.write("plots/geometry.svg", &report.scatter_svg())?,
    ])
}

fn inspect(data: &Path, line: usize, do_decode: bool, checkpoint: Option<&Path>, max_new: Option<usize>) -> Result<()> {
    let ds = read_dataset(data)?;
    let s = ds.samples.get(line.wrapping_sub(1)).ok_or_else(|| Error::config("line", format!("{} has {} lines", data.display(), ds.samples.len())))?;
    if !do_decode {
        println!("id        {}", s.id);
        println!("task      {} (level {}, {})", s.task.name(), s.level, s.variant.name());
        for (i, g) in s.input_images.iter().enumerate() {
            println!("image {i}   {}x{} patches", g.rows, g.cols);
        }
        println!("question  {}", s.question_text);
        println!("o_pre     {}", s.o_pre);
        match &s.helper {
            Some(h) => println!("helper    {}x{} patches", h.rows, h.cols),
            None => println!("helper    none"),
        }
        println!("o_post    {}", s.o_post);
        println!("answer    {}", s.answer);
        return Ok(());
    }
    let path = checkpoint.ok_or_else(|| Error::config("checkpoint", "--decode needs --checkpoint"))?;
    let model: Model<f64> = Checkpoint::load(path)?.model()?;
    let prompt = prompt_layout(s)?;
    let trace = decode(&model, &prompt, &DecodeOptions::greedy(max_new.unwrap_or(model.config.max_seq)))?;
    let tk = Tokenizer::standard();
    println!("prompt: {} positions ({} text)", prompt.len(), prompt.text_ids().len());
    let mut latent = 0;
    for (i, step) in trace.steps.iter().enumerate() {
        match step {
            DecodeStep::Text { id, logprob } => println!("{i:4}  text    {:<12} logp {logprob:.4}", tk.word(*id)),
            DecodeStep::ForcedEnd => println!("{i:4}  forced  {}", tk.word(crate::model::tok::VEND)),
            DecodeStep::Latent { slot } => {
                let v = &trace.latent_inputs[latent];
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                println!("{i:4}  LATENT  slot {slot} |v| = {norm:.4}");
                latent += 1;
            }
        }
    }
    let end = if trace.hit_eos { "eos" } else if trace.truncated { "truncated" } else { "stopped" };
    println!("end: {end}; {} latent steps", trace.latent_inputs.len());
    Ok(())
}
