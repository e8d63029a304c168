//! Training, evaluation, the ablation grid and the reward-density analysis.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataError, Dataset, Impression};
use crate::losses::{bpr_node, cross_entropy_node, fuse, BatchLoss, LossWeights};
use crate::metrics::{self, EvalRecord, MetricError, RewardDistribution, REWARD_BUCKETS};
use crate::model::{forward_batch, predict, Checkpoint, ModelConfig, ModelError, ModelParams, Mode};
use crate::sampler::{self, CoverageReport, DomainConstraint, SamplingConfig, SamplingError};
use crate::tensor::{AdaGrad, Tape, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Flat experiment settings; every key is optional in a config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub dim: usize,
    pub heads: usize,
    pub lr: f64,
    pub eps: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub w1: f64,
    pub w2: f64,
    pub use_aiseq: bool,
    pub use_tsp: bool,
    pub use_moveline_reward: bool,
    /// Diff search space used when the harness pairs data itself.
    pub domain_constraint: DomainConstraint,
    pub min_gap: i64,
    pub max_gap: i64,
    pub init_seed: u64,
    pub order_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            dim: 32,
            heads: 4,
            lr: 0.05,
            eps: 1e-8,
            lr_decay: 1.0,
            batch_size: 256,
            epochs: 2,
            w1: 1.0,
            w2: 0.1,
            use_aiseq: true,
            use_tsp: true,
            use_moveline_reward: true,
            domain_constraint: DomainConstraint::SameScenario,
            min_gap: 60,
            max_gap: 604_800,
            init_seed: 1,
            order_seed: 2,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_tsp && !self.use_moveline_reward {
            return Err(HarnessError::Config("use_tsp requires use_moveline_reward".into()));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.eps > 0.0 && self.lr_decay > 0.0) {
            return Err(HarnessError::Config("lr, eps and lr_decay must be positive".into()));
        }
        if self.w1 < 0.0 || self.w2 < 0.0 {
            return Err(HarnessError::Config("loss weights must be non-negative".into()));
        }
        self.model_config().validate()?;
        self.sampling().validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            heads: self.heads,
            use_aiseq: self.use_aiseq,
            use_moveline_reward: self.use_moveline_reward,
            ..ModelConfig::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { w1: self.w1, w2: self.w2 }
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            min_gap: self.min_gap,
            max_gap: self.max_gap,
            domain: self.domain_constraint,
            seed: self.order_seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: usize,
    pub mean_ce: f64,
    pub mean_bpr: f64,
    pub mean_total: f64,
    pub matched: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub batches: Vec<BatchLoss>,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainLog,
}

/// Trains from a fresh initialisation. With `use_tsp` the dataset must carry
/// a pair column; matched rows add the pairwise reward term.
pub fn train(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(HarnessError::Config("training set is empty".into()));
    }
    if cfg.use_tsp && !data.is_paired() {
        return Err(HarnessError::Config("use_tsp needs a paired training set; run `pair` first".into()));
    }
    let mut params = ModelParams::init(cfg.model_config(), data.meta(), cfg.init_seed)?;
    let mut opt = AdaGrad::new(&params.store, cfg.lr, cfg.eps).with_decay(cfg.lr_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.order_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut ep = EpochLog {
            epoch,
            ..EpochLog::default()
        };
        for rows in order.chunks(cfg.batch_size) {
            let loss = train_step(cfg, &mut params, &mut opt, data, rows)?;
            ep.batches += 1;
            ep.mean_ce += loss.ce;
            ep.mean_bpr += loss.bpr;
            ep.mean_total += loss.total;
            ep.matched += loss.matched_count;
            ep.samples += rows.len();
            log.batches.push(loss);
        }
        let n = ep.batches.max(1) as f64;
        ep.mean_ce /= n;
        ep.mean_bpr /= n;
        ep.mean_total /= n;
        log.epochs.push(ep);
    }
    Ok(TrainOutcome { params, log })
}

fn train_step(
    cfg: &ExperimentConfig,
    params: &mut ModelParams,
    opt: &mut AdaGrad,
    data: &Dataset,
    rows: &[usize],
) -> Result<BatchLoss> {
    let batch: Vec<&Impression> = rows.iter().map(|&i| &data.impressions[i]).collect();
    let labels: Vec<u8> = batch.iter().map(|i| i.label).collect();
    let (mut target_rows, mut diffs) = (Vec::new(), Vec::new());
    if cfg.use_tsp {
        for (pos, &i) in rows.iter().enumerate() {
            if let Some(d) = data.diffs[i] {
                target_rows.push(pos);
                diffs.push(&data.impressions[d]);
            }
        }
    }
    let diff_labels: Vec<u8> = diffs.iter().map(|i| i.label).collect();
    let grads = {
        let mut tape = Tape::with_params(&params.store);
        let g = forward_batch(&mut tape, params, &batch, Mode::Train, &diffs)?;
        let ce = cross_entropy_node(&mut tape, g.y_hat, &labels)?;
        let bpr = match (g.reward, g.diff_reward) {
            (Some(r), Some(dr)) => bpr_node(&mut tape, r, &target_rows, dr, &diff_labels)?,
            _ => None,
        };
        let (total, loss) = fuse(&mut tape, ce, bpr, target_rows.len(), cfg.weights())?;
        let back = tape.backward(total);
        (tape.param_grads(&back), loss)
    };
    opt.step(&mut params.store, &grads.0)?;
    Ok(grads.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub gauc: f64,
    pub count: usize,
    pub positives: usize,
}

/// Inference-mode scoring; the pair column is never read.
pub fn evaluate(params: &ModelParams, data: &Dataset, batch_size: usize) -> Result<(EvalReport, Vec<EvalRecord>)> {
    let imps: Vec<&Impression> = data.impressions.iter().collect();
    let scored = predict(params, &imps, batch_size)?;
    let records: Vec<EvalRecord> = imps
        .iter()
        .zip(scored)
        .map(|(imp, (y_hat, reward))| EvalRecord {
            user_id: imp.user_id,
            y_hat,
            reward,
            label: imp.label,
        })
        .collect();
    let report = EvalReport {
        auc: metrics::auc(&records)?,
        gauc: metrics::gauc(&records)?,
        count: records.len(),
        positives: records.iter().filter(|r| r.label == 1).count(),
    };
    Ok((report, records))
}

/// Loads a checkpoint against `data`'s meta and evaluates it.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    data: &Dataset,
    batch_size: usize,
) -> Result<(EvalReport, Vec<EvalRecord>)> {
    let params = checkpoint.to_params(data.meta())?;
    evaluate(&params, data, batch_size)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "variant", content = "w2")]
pub enum Variant {
    Full,
    NoAiseq,
    NoTsp,
    NoMoveline,
    DifGs,
    W2(f64),
}

impl Variant {
    pub fn standard_grid() -> Vec<Variant> {
        vec![
            Variant::Full,
            Variant::NoAiseq,
            Variant::NoTsp,
            Variant::NoMoveline,
            Variant::DifGs,
            Variant::W2(0.02),
            Variant::W2(0.1),
            Variant::W2(0.5),
        ]
    }

    pub fn name(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::NoAiseq => "no_aiseq".into(),
            Variant::NoTsp => "no_tsp".into(),
            Variant::NoMoveline => "no_moveline".into(),
            Variant::DifGs => "difgs".into(),
            Variant::W2(w) => format!("w2={w}"),
        }
    }

    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        c.use_aiseq = true;
        c.use_tsp = true;
        c.use_moveline_reward = true;
        c.domain_constraint = DomainConstraint::SameScenario;
        match *self {
            Variant::Full => {}
            Variant::NoAiseq => c.use_aiseq = false,
            Variant::NoTsp => c.use_tsp = false,
            Variant::NoMoveline => {
                c.use_tsp = false;
                c.use_moveline_reward = false;
            }
            Variant::DifGs => c.domain_constraint = DomainConstraint::Global,
            Variant::W2(w) => c.w2 = w,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub name: String,
    pub aiseq: bool,
    pub tsp: bool,
    pub moveline: bool,
    pub domain: DomainConstraint,
    pub w2: f64,
    pub auc: f64,
    pub gauc: f64,
    pub seed_auc: Vec<f64>,
    pub seed_gauc: Vec<f64>,
    pub coverage: Option<CoverageReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant\taiseq\ttsp\tmoveline\tdomain\tw2\tauc\tgauc\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\n",
                r.name,
                r.aiseq,
                r.tsp,
                r.moveline,
                r.domain.as_str(),
                r.w2,
                r.auc,
                r.gauc
            ));
        }
        out
    }
}

/// Trains and evaluates every variant for every seed; seed `s` sets both the
/// init and the data-order seed. The training set is paired once per domain.
pub fn ablation_suite(
    base: &ExperimentConfig,
    train_data: &Dataset,
    test_data: &Dataset,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationTable> {
    let mut paired: Vec<(DomainConstraint, Dataset, CoverageReport)> = Vec::new();
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let cfg = variant.apply(base);
        cfg.validate()?;
        let (data, coverage) = if cfg.use_tsp {
            let domain = cfg.domain_constraint;
            if !paired.iter().any(|(d, ..)| *d == domain) {
                let (ds, cov) = sampler::pair_dataset(train_data, cfg.sampling())?;
                paired.push((domain, ds, cov));
            }
            let (_, ds, cov) = paired.iter().find(|(d, ..)| *d == domain).expect("paired above");
            (ds, Some(*cov))
        } else {
            (train_data, None)
        };
        let (mut seed_auc, mut seed_gauc) = (Vec::new(), Vec::new());
        for &seed in seeds {
            let run = ExperimentConfig {
                init_seed: seed,
                order_seed: seed,
                ..cfg.clone()
            };
            let out = train(&run, data)?;
            let (report, _) = evaluate(&out.params, test_data, run.batch_size)?;
            seed_auc.push(report.auc);
            seed_gauc.push(report.gauc);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        rows.push(AblationRow {
            variant,
            name: variant.name(),
            aiseq: cfg.use_aiseq,
            tsp: cfg.use_tsp,
            moveline: cfg.use_moveline_reward,
            domain: cfg.domain_constraint,
            w2: cfg.w2,
            auc: mean(&seed_auc),
            gauc: mean(&seed_gauc),
            seed_auc,
            seed_gauc,
            coverage,
        });
    }
    Ok(AblationTable { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub count: usize,
    /// Proportion-weighted mean bucket index.
    pub mean_bucket: f64,
    pub occupied: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardAnalysis {
    pub tsp_click: CurveSummary,
    pub tsp_unclick: CurveSummary,
    pub non_tsp_click: CurveSummary,
    pub non_tsp_unclick: CurveSummary,
    pub tsp_support: usize,
    pub non_tsp_support: usize,
    pub tsp_degenerate: bool,
    pub non_tsp_degenerate: bool,
    pub distribution: RewardDistribution,
}

fn summarize(curve: &metrics::RewardCurve) -> CurveSummary {
    CurveSummary {
        count: curve.count,
        mean_bucket: curve.proportions.iter().enumerate().map(|(b, p)| b as f64 * p).sum(),
        occupied: curve.occupied,
    }
}

pub fn analyze_reward(tsp: &[EvalRecord], non_tsp: &[EvalRecord]) -> Result<RewardAnalysis> {
    let d = metrics::reward_distribution(tsp, non_tsp)?;
    debug_assert_eq!(d.tsp.click.proportions.len(), REWARD_BUCKETS);
    Ok(RewardAnalysis {
        tsp_click: summarize(&d.tsp.click),
        tsp_unclick: summarize(&d.tsp.unclick),
        non_tsp_click: summarize(&d.non_tsp.click),
        non_tsp_unclick: summarize(&d.non_tsp.unclick),
        tsp_support: d.tsp.support(),
        non_tsp_support: d.non_tsp.support(),
        tsp_degenerate: d.tsp.degenerate,
        non_tsp_degenerate: d.non_tsp.degenerate,
        distribution: d,
    })
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("record serializes"));
        out.push('\n');
    }
    write_file(path, out)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| HarnessError::Config(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    write_file(path, s)
}

pub fn write_file(path: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, contents).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}
