//! Command-line driver.
//!
//! Each subcommand writes into a run directory: `--out DIR` when given,
//! otherwise a fresh `runs/<command>-<unix seconds>`. Every run directory
//! gets `config.resolved.toml`, and every artifact and report carries the
//! hash of that file. Input files are never modified.
//!
//! Without `--data` (or `data.input` in the config) the dataset is the
//! seeded synthetic set described by the config, so each command can run on
//! its own.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::base_kernels::KernelBank;
use crate::cascade::{self, Cascade};
use crate::config::RunConfig;
use crate::data::{self, Dataset, Split};
use crate::distill::{self, EpochRecord, Targets, Validation};
use crate::error::{Error, Result};
use crate::kernel_net::KernelNetwork;
use crate::metrics;

#[derive(Debug, Parser)]
#[command(name = "deepcascade", version, about = "Deep kernel cascades: training, distillation and evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Default)]
pub struct CommonArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run directory (default: runs/<command>-<timestamp>).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Pair-format dataset; overrides `data.input`.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Write the configured synthetic dataset in pair format.
    GenData,
    /// Train the reference network and classifier on the labeled split.
    TrainF,
    /// Distill one surrogate stage (1-based) from a reference artifact.
    Distill {
        #[arg(long)]
        stage: usize,
        #[arg(long)]
        f: PathBuf,
    },
    /// Assemble a cascade from a reference artifact, distilling missing stages.
    BuildCascade {
        #[arg(long)]
        f: PathBuf,
        /// Pre-distilled stage artifacts, cheapest first.
        #[arg(long = "stage-artifact")]
        stages: Vec<PathBuf>,
    },
    /// Per-stage and cascade metrics on the test split.
    Eval {
        #[arg(long)]
        cascade: PathBuf,
    },
    /// Wall-clock and cost comparison on the test split.
    Bench {
        #[arg(long)]
        cascade: PathBuf,
    },
    /// Stage map over the whole dataset grid.
    Map {
        #[arg(long)]
        cascade: PathBuf,
    },
    /// train-f, every distill, build-cascade, eval and map in one run directory.
    Pipeline,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainF => "train-f",
            Command::Distill { .. } => "distill",
            Command::BuildCascade { .. } => "build-cascade",
            Command::Eval { .. } => "eval",
            Command::Bench { .. } => "bench",
            Command::Map { .. } => "map",
            Command::Pipeline => "pipeline",
        }
    }
}

impl Error {
    /// Process exit status for each error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) => 2,
            Error::Config(_) => 3,
            Error::Parse { .. } => 4,
            Error::Version { .. } => 5,
            Error::Divergence { .. } => 6,
            Error::UndefinedRate(_) => 7,
            Error::Io(_) => 8,
        }
    }
}

/// Resolved configuration, dataset and split shared by all commands.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub config: RunConfig,
    pub config_hash: String,
    pub dataset: Dataset,
    pub split: Split,
}

pub fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(d) = &common.data {
        config.data.input = Some(d.clone());
    }
    config.validate()?;
    Ok(config)
}

fn log_text(hash: &str, records: &[EpochRecord]) -> String {
    let mut s = format!("# config_hash={hash}\n");
    for r in records {
        s.push_str(&r.log_line());
        s.push('\n');
    }
    s
}

impl Workspace {
    pub fn new(config: RunConfig) -> Result<Self> {
        let dataset = match &config.data.input {
            Some(p) => data::load_pairs(p)?,
            None => data::generate_synthetic(&config.synthetic_spec())?,
        };
        let split = data::split(&dataset, &config.split_spec())?;
        Ok(Self {
            config_hash: config.hash(),
            config,
            dataset,
            split,
        })
    }

    pub fn features(&self, idx: &[usize]) -> Vec<Vec<f64>> {
        self.dataset.select_features(idx)
    }

    pub fn labels(&self, idx: &[usize]) -> Result<Vec<f64>> {
        self.dataset.select_labels(idx)
    }

    pub fn ids(idx: &[usize]) -> Vec<u64> {
        idx.iter().map(|&i| i as u64).collect()
    }

    /// Kernel bank fitted on the training split.
    pub fn fit_bank(&self) -> Result<KernelBank> {
        let (bank, est) = KernelBank::fit(&self.features(&self.split.train), self.config.bank.num_chunks, self.config.bank.k_neighbors)?;
        if !est.degenerate_chunks.is_empty() {
            log::warn!("{} degenerate chunks use unit scale", est.degenerate_chunks.len());
        }
        Ok(bank)
    }

    /// Reference network and classifier as a one-stage cascade, plus its training log.
    pub fn train_reference(&self, on_epoch: impl FnMut(&EpochRecord)) -> Result<(Cascade, Vec<EpochRecord>)> {
        let bank = self.fit_bank()?;
        let spec = self.config.stage_specs()?.pop().expect("reference stage");
        let samples = self.features(&self.split.train);
        let labels = self.labels(&self.split.train)?;
        let val_samples = self.features(&self.split.validation);
        let val_labels = self.labels(&self.split.validation)?;
        let config = spec.distill.clone().with_betas(distill::betas_for_f(&labels)?);
        let validation = Validation {
            samples: &val_samples,
            targets: Targets::Labels(&val_labels),
        };
        let state = distill::train_with(
            &samples,
            Targets::Labels(&labels),
            KernelNetwork::init_flat(&spec.arch),
            &bank,
            &config,
            (!val_samples.is_empty()).then_some(&validation),
            on_epoch,
        )?;
        let mut spec = spec;
        spec.distill = config;
        let mut f = Cascade::single(bank, &state, spec, &samples, &Self::ids(&self.split.train))?;
        f.config_hash = self.config_hash.clone();
        Ok((f, state.log))
    }

    /// Training pool of surrogate stages: the training split, plus
    /// `unlabeled_extra` test patterns when configured.
    pub fn distill_pool(&self) -> Vec<usize> {
        let mut idx = self.split.train.clone();
        idx.extend(self.split.test.iter().take(self.config.train.unlabeled_extra));
        idx.sort_unstable();
        idx
    }

    /// Distill surrogate stage `stage` (1-based) from the reference `f`.
    pub fn distill(&self, f: &Cascade, stage: usize, on_epoch: impl FnMut(&EpochRecord)) -> Result<(Cascade, Vec<EpochRecord>)> {
        let specs = self.config.stage_specs()?;
        if stage == 0 || stage >= specs.len() {
            return Err(Error::invalid(format!("surrogate stages are 1..={}, got {stage}", specs.len() - 1)));
        }
        if f.num_stages() != 1 {
            return Err(Error::invalid("reference artifact must hold a single stage"));
        }
        let pool = self.distill_pool();
        let samples = self.features(&pool);
        let val = self.features(&self.split.validation);
        let mut log = Vec::new();
        let mut on_epoch = on_epoch;
        let g = cascade::distill_stage_with(f, &specs[stage - 1], &samples, &Self::ids(&pool), (!val.is_empty()).then_some(val.as_slice()), |r| {
            on_epoch(r);
            log.push(r.clone());
        })
        .map_err(|e| e.with_stage(stage))?;
        Ok((g, log))
    }

    /// Chain surrogate stage artifacts and the reference, applying configured thresholds.
    pub fn assemble(&self, stages: Vec<Cascade>, f: Cascade) -> Result<Cascade> {
        if stages.len() + 1 != self.config.num_stages() {
            return Err(Error::invalid(format!("{} surrogate stages given, config expects {}", stages.len(), self.config.num_stages() - 1)));
        }
        let mut parts = stages;
        parts.push(f);
        let mut c = Cascade::concat(parts)?;
        if let Some(t) = &self.config.cascade.thresholds {
            for (s, &th) in c.stages.iter_mut().zip(t) {
                s.threshold = th;
            }
        }
        c.config_hash = self.config_hash.clone();
        Ok(c)
    }

    fn preamble(&self, what: &str) -> Vec<String> {
        vec![format!("config_hash={}", self.config_hash), what.to_string()]
    }

    /// Evaluation report on the test split.
    pub fn eval_report(&self, c: &Cascade, threads: Option<usize>) -> Result<String> {
        let xs = self.features(&self.split.test);
        let truth = self.labels(&self.split.test)?;
        let rows = cascade::evaluation_report(c, &xs, &truth, threads)?;
        Ok(metrics::render_table(&self.preamble(&format!("test_patterns={}", xs.len())), &rows))
    }

    pub fn bench_report(&self, c: &Cascade, threads: Option<usize>) -> Result<String> {
        let xs = self.features(&self.split.test);
        let b = cascade::benchmark(c, &xs, threads)?;
        Ok(b.render(&self.preamble("wall-clock timings vary between runs")))
    }

    pub fn stage_map(&self, c: &Cascade, threads: Option<usize>) -> Result<data::StageMap> {
        let outcomes = c.evaluate_many(&self.dataset.features, threads)?;
        let pairs: Vec<(usize, bool)> = outcomes.iter().map(|o| (o.stages_consumed, o.label > 0.0)).collect();
        data::render_stage_map(&pairs, self.dataset.grid, c.num_stages())
    }
}

fn run_dir(common: &CommonArgs, command: &str) -> Result<PathBuf> {
    let dir = match &common.out {
        Some(d) => d.clone(),
        None => {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            PathBuf::from("runs").join(format!("{command}-{secs}"))
        }
    };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_reference(path: &Path) -> Result<Cascade> {
    let f = Cascade::load(path)?;
    if f.num_stages() != 1 {
        return Err(Error::invalid(format!("{} is not a single-stage reference artifact", path.display())));
    }
    Ok(f)
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(dir.join(name), bytes)?;
    Ok(())
}

fn progress(label: String) -> impl FnMut(&EpochRecord) {
    move |r| log::info!("{label} {}", r.log_line())
}

fn run_in(cli: &Cli, dir: &Path) -> Result<()> {
    let config = resolve_config(&cli.common)?;
    write(dir, "config.resolved.toml", config.to_toml())?;
    let threads = cli.common.threads;
    if let Command::GenData = cli.command {
        let ds = match &config.data.input {
            Some(p) => data::load_pairs(p)?,
            None => data::generate_synthetic(&config.synthetic_spec())?,
        };
        return ds.write(&dir.join("dataset.dkp"));
    }
    let ws = Workspace::new(config)?;
    let hash = ws.config_hash.clone();
    match &cli.command {
        Command::GenData => unreachable!(),
        Command::TrainF => {
            let (f, log) = ws.train_reference(progress("f".into()))?;
            f.save(&dir.join("f.dkc"))?;
            write(dir, "f_train.log", log_text(&hash, &log))?;
        }
        Command::Distill { stage, f } => {
            let f = load_reference(f)?;
            let (g, log) = ws.distill(&f, *stage, progress(format!("stage{stage}")))?;
            g.save(&dir.join(format!("stage{stage}.dkc")))?;
            write(dir, &format!("stage{stage}_train.log"), log_text(&hash, &log))?;
        }
        Command::BuildCascade { f, stages } => {
            let f = load_reference(f)?;
            let parts = if stages.is_empty() {
                let mut parts = Vec::new();
                for t in 1..ws.config.num_stages() {
                    let (g, log) = ws.distill(&f, t, progress(format!("stage{t}")))?;
                    write(dir, &format!("stage{t}_train.log"), log_text(&hash, &log))?;
                    parts.push(g);
                }
                parts
            } else {
                stages.iter().map(|p| Cascade::load(p)).collect::<Result<Vec<_>>>()?
            };
            ws.assemble(parts, f)?.save(&dir.join("cascade.dkc"))?;
        }
        Command::Eval { cascade } => {
            let c = Cascade::load(cascade)?;
            write(dir, "report.csv", ws.eval_report(&c, threads)?)?;
        }
        Command::Bench { cascade } => {
            let c = Cascade::load(cascade)?;
            write(dir, "bench.csv", ws.bench_report(&c, threads)?)?;
        }
        Command::Map { cascade } => {
            let c = Cascade::load(cascade)?;
            let m = ws.stage_map(&c, threads)?;
            write(dir, "stage_map.pgm", m.pgm)?;
            write(dir, "stage_map.csv", m.csv)?;
        }
        Command::Pipeline => {
            let (f, log) = ws.train_reference(progress("f".into()))?;
            f.save(&dir.join("f.dkc"))?;
            write(dir, "f_train.log", log_text(&hash, &log))?;
            let mut parts = Vec::new();
            for t in 1..ws.config.num_stages() {
                let (g, log) = ws.distill(&f, t, progress(format!("stage{t}")))?;
                g.save(&dir.join(format!("stage{t}.dkc")))?;
                write(dir, &format!("stage{t}_train.log"), log_text(&hash, &log))?;
                parts.push(g);
            }
            let c = ws.assemble(parts, f)?;
            c.save(&dir.join("cascade.dkc"))?;
            write(dir, "report.csv", ws.eval_report(&c, threads)?)?;
            let m = ws.stage_map(&c, threads)?;
            write(dir, "stage_map.pgm", m.pgm)?;
            write(dir, "stage_map.csv", m.csv)?;
        }
    }
    Ok(())
}

/// Run a parsed command line; returns the run directory.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let dir = run_dir(&cli.common, cli.command.name())?;
    cascade::with_threads(cli.common.threads, || run_in(cli, &dir))??;
    Ok(dir)
}

/// Parse arguments, run, and report; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
