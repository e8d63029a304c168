use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use amen::data::Dataset;
use amen::harness::{self, ExperimentConfig, HarnessError, Variant};
use amen::metrics::EvalRecord;
use amen::model::Checkpoint;
use amen::sampler::{self, DomainConstraint, SamplingConfig};
use amen::simulator::{self, SimConfig};

#[derive(Parser)]
#[command(name = "amen", about = "Moveline-aware CTR model: data generation, training and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate users and write train.jsonl, test.jsonl and intents.jsonl.
    Generate {
        #[arg(long)]
        out_dir: PathBuf,
        /// TOML file with simulator settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        users: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Attach a diff impression to every target that has one.
    Pair {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value = "same_scenario")]
        domain: DomainConstraint,
        #[arg(long, default_value_t = 60)]
        min_gap: i64,
        #[arg(long, default_value_t = 604_800)]
        max_gap: i64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coverage report (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train and write checkpoint.json and train_log.json.
    Train {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score a dataset in inference mode.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// AUC/GAUC report (JSON).
        #[arg(long)]
        report: PathBuf,
        /// Per-record `(user_id, y_hat, reward, label)` dump (JSON lines).
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long, default_value_t = 1024)]
        batch_size: usize,
    },
    /// Train and evaluate the ablation grid; writes ablation.json and ablation.tsv.
    Ablate {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        /// Subset of: full, no_aiseq, no_tsp, no_moveline, difgs, or a w2 value.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Bucket the rewards of two evaluation dumps; writes reward_analysis.json
    /// and reward_distribution.tsv.
    AnalyzeReward {
        #[arg(long)]
        tsp: PathBuf,
        #[arg(long)]
        non_tsp: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    w1: Option<f64>,
    #[arg(long)]
    w2: Option<f64>,
    #[arg(long)]
    use_aiseq: Option<bool>,
    #[arg(long)]
    use_tsp: Option<bool>,
    #[arg(long)]
    use_moveline_reward: Option<bool>,
    #[arg(long)]
    domain_constraint: Option<DomainConstraint>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    order_seed: Option<u64>,
}

impl ExperimentArgs {
    fn resolve(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! over {
            ($($f:ident),*) => { $(if let Some(v) = &self.$f { c.$f = v.clone().into(); })* };
        }
        over!(
            epochs,
            lr,
            batch_size,
            w1,
            w2,
            use_aiseq,
            use_tsp,
            use_moveline_reward,
            domain_constraint,
            init_seed,
            order_seed
        );
        if self.train.is_some() {
            c.train = self.train.clone();
        }
        if self.test.is_some() {
            c.test = self.test.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, HarnessError> {
    path.as_deref()
        .ok_or_else(|| HarnessError::Config(format!("no {what} dataset given (config key or --{what})")))
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn parse_variant(s: &str) -> Result<Variant, HarnessError> {
    Ok(match s {
        "full" => Variant::Full,
        "no_aiseq" => Variant::NoAiseq,
        "no_tsp" => Variant::NoTsp,
        "no_moveline" => Variant::NoMoveline,
        "difgs" => Variant::DifGs,
        w => Variant::W2(
            w.strip_prefix("w2=")
                .unwrap_or(w)
                .parse()
                .map_err(|_| HarnessError::Config(format!("unknown variant {s:?}")))?,
        ),
    })
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Generate {
            out_dir,
            config,
            users,
            seed,
        } => {
            let mut cfg = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|source| HarnessError::Io { path: p.clone(), source })?;
                    toml::from_str::<SimConfig>(&text)
                        .map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?
                }
                None => SimConfig::default(),
            };
            cfg.n_users = users.unwrap_or(cfg.n_users);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let sim = simulator::simulate(&cfg).map_err(|e| HarnessError::Config(e.to_string()))?;
            let (train, test) = sim.split();
            create_dir(&out_dir)?;
            train.save(out_dir.join("train.jsonl"))?;
            test.save(out_dir.join("test.jsonl"))?;
            harness::write_jsonl(out_dir.join("intents.jsonl"), &sim.traces)?;
            eprintln!("train {} / test {} impressions", train.len(), test.len());
        }
        Command::Pair {
            input,
            output,
            domain,
            min_gap,
            max_gap,
            seed,
            report,
        } => {
            let data = Dataset::load(&input)?;
            let cfg = SamplingConfig {
                min_gap,
                max_gap,
                domain,
                seed,
            };
            let (paired, coverage) = sampler::pair_dataset(&data, cfg)?;
            paired.save(&output)?;
            if let Some(r) = report {
                harness::write_json(r, &coverage)?;
            }
            eprintln!("coverage {:.4} ({} of {})", coverage.coverage, coverage.matched, coverage.total);
        }
        Command::Train { exp, out_dir } => {
            let cfg = exp.resolve()?;
            let data = Dataset::load(required(&cfg.train, "train")?)?;
            let out = harness::train(&cfg, &data)?;
            create_dir(&out_dir)?;
            Checkpoint::from_params(&out.params, data.meta()).save(out_dir.join("checkpoint.json"))?;
            harness::write_json(out_dir.join("train_log.json"), &out.log)?;
            for e in &out.log.epochs {
                eprintln!("epoch {} ce {:.5} bpr {:.5} total {:.5}", e.epoch, e.mean_ce, e.mean_bpr, e.mean_total);
            }
        }
        Command::Evaluate {
            checkpoint,
            data,
            report,
            dump,
            batch_size,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let data = Dataset::load(&data)?;
            let (rep, records) = harness::evaluate_checkpoint(&ckpt, &data, batch_size)?;
            harness::write_json(report, &rep)?;
            if let Some(d) = dump {
                harness::write_jsonl(d, &records)?;
            }
            eprintln!("auc {:.5} gauc {:.5}", rep.auc, rep.gauc);
        }
        Command::Ablate {
            exp,
            out_dir,
            seeds,
            variants,
        } => {
            let cfg = exp.resolve()?;
            let train = Dataset::load(required(&cfg.train, "train")?)?.without_pairs();
            let test = Dataset::load(required(&cfg.test, "test")?)?;
            let variants = if variants.is_empty() {
                Variant::standard_grid()
            } else {
                variants.iter().map(|v| parse_variant(v)).collect::<Result<_, _>>()?
            };
            let table = harness::ablation_suite(&cfg, &train, &test, &variants, &seeds)?;
            create_dir(&out_dir)?;
            harness::write_json(out_dir.join("ablation.json"), &table)?;
            harness::write_file(out_dir.join("ablation.tsv"), table.to_tsv())?;
            eprint!("{}", table.to_tsv());
        }
        Command::AnalyzeReward { tsp, non_tsp, out_dir } => {
            let a: Vec<EvalRecord> = harness::read_jsonl(&tsp)?;
            let b: Vec<EvalRecord> = harness::read_jsonl(&non_tsp)?;
            let analysis = harness::analyze_reward(&a, &b)?;
            create_dir(&out_dir)?;
            harness::write_json(out_dir.join("reward_analysis.json"), &analysis)?;
            harness::write_file(out_dir.join("reward_distribution.tsv"), analysis.distribution.to_tsv())?;
            if analysis.tsp_degenerate || analysis.non_tsp_degenerate {
                eprintln!("warning: zero reward variance in at least one dump");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
