//! Desk-scale experiment drivers: meta-train, adapt and evaluate on the
//! configured scenario, plus the ablation, shot-scaling and support-robustness
//! protocols. Each returns its rows; the `write_*` helpers emit CSV.

use std::path::Path;

use serde::Serialize;
use wxmatch_core::degrade::mix_seed;
use wxmatch_core::episodes::{Pair, Task};
use wxmatch_core::imaging::{MetricsReport, ReportMeta, Summary, PSNR_CAP_DB};
use wxmatch_core::model::{MatchMode, MatchedFeatures, ModelConfig, Network};
use wxmatch_core::train::{
    checkpoint_id, evaluate_model, meta_test_adapt, meta_train, LossRecord, TrainEvent, TrainState,
};
use wxmatch_core::Error as CoreError;

use crate::config::ExperimentConfig;
use crate::dataset::{condition_id, generate_task};
use crate::error::{Error, Result};

/// Meta-training tasks and the held-out target condition, generated in memory.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub meta_train: Vec<Task>,
    pub target: Task,
    pub target_id: String,
}

impl Scenario {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let size = cfg.model.input_size;
        let meta_train = cfg
            .datasets
            .meta_train
            .iter()
            .map(|d| generate_task(&d.spec, d.count, d.seed, size))
            .collect::<Result<Vec<_>>>()?;
        let t = &cfg.datasets.target;
        Ok(Self {
            meta_train,
            target: generate_task(&t.spec, t.count, t.seed, size)?,
            target_id: format!("{}/seed{}/n{}", condition_id(&t.spec), t.seed, t.count),
        })
    }

    /// The first `n` evaluation pairs of the target.
    pub fn eval_queries(&self, n: usize) -> Result<Vec<Pair>> {
        let eval = self.target.eval_pairs();
        if eval.len() < n {
            return Err(
                CoreError::Insufficient(format!("target has {} evaluation pairs, {n} requested", eval.len())).into(),
            );
        }
        Ok(eval[..n].to_vec())
    }

    /// The first `shots` pairs of the target's support pool.
    pub fn support(&self, shots: usize) -> Result<Vec<Pair>> {
        let pool = self.target.support_pool();
        if pool.len() < shots {
            return Err(CoreError::Insufficient(format!(
                "support pool has {} pairs, {shots} shots requested",
                pool.len()
            ))
            .into());
        }
        Ok(pool[..shots].to_vec())
    }
}

/// `cfg` with every seed replaced by the run seed.
pub fn seeded(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.train.seed = seed;
    c.adapt.seed = seed;
    c
}

pub struct MetaTrained {
    pub net: Network,
    pub state: TrainState,
    pub losses: Vec<LossRecord>,
}

/// Meta-trains a fresh network initialized from `cfg.train.seed`. On a
/// non-finite loss the error carries no state; use [`meta_train`] directly to
/// keep the last good weights.
pub fn run_meta_train(cfg: &ExperimentConfig, scenario: &Scenario) -> Result<MetaTrained> {
    let net = Network::new(cfg.model.clone())?;
    let mut state = TrainState::new(net.init_params(cfg.train.seed)?, &cfg.train);
    let losses = meta_train(
        &net,
        &scenario.meta_train,
        &cfg.train,
        &mut state,
        |_: TrainEvent<'_>| Ok(()),
    )?;
    Ok(MetaTrained { net, state, losses })
}

#[derive(Clone, Debug)]
pub struct AdaptEval {
    pub before: MetricsReport,
    pub after: MetricsReport,
    pub adapted: TrainState,
    pub touched: usize,
}

impl AdaptEval {
    pub fn gain_db(&self) -> f64 {
        self.after.psnr.mean - self.before.psnr.mean
    }
}

fn meta(cfg: &ExperimentConfig, scenario: &Scenario, state: &TrainState, shots: usize) -> ReportMeta {
    ReportMeta {
        dataset_id: scenario.target_id.clone(),
        checkpoint_id: checkpoint_id(&state.store),
        shots,
        seed: cfg.adapt.seed,
        psnr_cap_db: PSNR_CAP_DB,
    }
}

/// Evaluates, adapts on `support`, and evaluates again on the same queries.
pub fn adapt_and_evaluate(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    trained: &MetaTrained,
    support: &[Pair],
) -> Result<AdaptEval> {
    let queries = scenario.eval_queries(cfg.eval_queries)?;
    let net = &trained.net;
    let before = evaluate_model(
        net,
        &trained.state.store,
        &queries,
        support,
        meta(cfg, scenario, &trained.state, support.len()),
    )?;
    let mut adapted = TrainState::new(trained.state.store.clone(), &cfg.train);
    let outcome = meta_test_adapt(net, &mut adapted.store, support, &cfg.adapt)?;
    adapted.iteration = cfg.adapt.iterations;
    let after = evaluate_model(
        net,
        &adapted.store,
        &queries,
        support,
        meta(cfg, scenario, &adapted, support.len()),
    )?;
    Ok(AdaptEval {
        before,
        after,
        adapted,
        touched: outcome.touched,
    })
}

/// One seed of the desk protocol: meta-train, then 1-shot (or `cfg.shots`) adaptation.
pub struct DeskRun {
    pub seed: u64,
    pub trained: MetaTrained,
    pub eval: AdaptEval,
}

pub fn run_desk_seed(cfg: &ExperimentConfig, scenario: &Scenario, seed: u64) -> Result<DeskRun> {
    let cfg = seeded(cfg, seed);
    let trained = run_meta_train(&cfg, scenario)?;
    let support = scenario.support(cfg.shots)?;
    let eval = adapt_and_evaluate(&cfg, scenario, &trained, &support)?;
    Ok(DeskRun { seed, trained, eval })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedRow {
    pub seed: u64,
    pub psnr_before: f64,
    pub psnr_after: f64,
    pub gain_db: f64,
    pub ssim_before: f64,
    pub ssim_after: f64,
}

impl From<&DeskRun> for SeedRow {
    fn from(r: &DeskRun) -> Self {
        Self {
            seed: r.seed,
            psnr_before: r.eval.before.psnr.mean,
            psnr_after: r.eval.after.psnr.mean,
            gain_db: r.eval.gain_db(),
            ssim_before: r.eval.before.ssim.mean,
            ssim_after: r.eval.after.ssim.mean,
        }
    }
}

/// An ablation variant: matching mode plus matched-feature choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Mode(MatchMode),
    Background,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Mode(m) => m.as_str(),
            Variant::Background => "background",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "background" {
            return Ok(Variant::Background);
        }
        Ok(Variant::Mode(s.parse()?))
    }

    pub fn model(self, base: &ModelConfig) -> ModelConfig {
        match self {
            Variant::Mode(m) => ModelConfig {
                match_mode: m,
                matched_features: MatchedFeatures::Pattern,
                ..base.clone()
            },
            Variant::Background => ModelConfig {
                match_mode: MatchMode::Both,
                matched_features: MatchedFeatures::Background,
                ..base.clone()
            },
        }
    }

    pub const ALL: [Variant; 5] = [
        Variant::Mode(MatchMode::None),
        Variant::Mode(MatchMode::Spatial),
        Variant::Mode(MatchMode::Channel),
        Variant::Mode(MatchMode::Both),
        Variant::Background,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub variant: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Default)]
pub struct AblationReport {
    pub rows: Vec<MetricRow>,
    pub warnings: Vec<String>,
}

fn psnr_of(rows: &[MetricRow], variant: &str) -> Option<f64> {
    rows.iter()
        .find(|r| r.variant == variant && r.metric == "psnr")
        .map(|r| r.mean)
}

/// Trains, adapts and evaluates each variant under the first configured seed.
pub fn run_ablation_modes(cfg: &ExperimentConfig, scenario: &Scenario, variants: &[Variant]) -> Result<AblationReport> {
    let seed = cfg.seeds[0];
    let mut report = AblationReport::default();
    for &v in variants {
        let mut c = seeded(cfg, seed);
        c.model = v.model(&cfg.model);
        let run = run_desk_seed(&c, scenario, seed)?;
        let after = &run.eval.after;
        for (metric, s) in [("psnr", after.psnr), ("ssim", after.ssim)] {
            report.rows.push(MetricRow {
                variant: v.name().into(),
                metric: metric.into(),
                mean: s.mean,
                std: s.std,
            });
        }
    }
    if let Some(both) = psnr_of(&report.rows, "both") {
        for single in ["spatial", "channel"] {
            if let Some(p) = psnr_of(&report.rows, single) {
                if both < p - 0.2 {
                    report.warnings.push(format!(
                        "both ({both:.3} dB) is more than 0.2 dB below {single} ({p:.3} dB)"
                    ));
                }
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShotRow {
    pub shots: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ShotReport {
    pub rows: Vec<ShotRow>,
    pub warnings: Vec<String>,
}

/// Adapts one meta-trained checkpoint at each shot count and evaluates on the
/// same queries.
pub fn run_shot_scaling(cfg: &ExperimentConfig, scenario: &Scenario, shots: &[usize]) -> Result<ShotReport> {
    let c = seeded(cfg, cfg.seeds[0]);
    let trained = run_meta_train(&c, scenario)?;
    shot_scaling_from(&c, scenario, &trained, shots)
}

pub fn shot_scaling_from(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    trained: &MetaTrained,
    shots: &[usize],
) -> Result<ShotReport> {
    let mut report = ShotReport::default();
    for &n in shots {
        let support = scenario.support(n)?;
        let r = adapt_and_evaluate(cfg, scenario, trained, &support)?;
        report.rows.push(ShotRow {
            shots: n,
            psnr_mean: r.after.psnr.mean,
            psnr_std: r.after.psnr.std,
            ssim_mean: r.after.ssim.mean,
            ssim_std: r.after.ssim.std,
        });
    }
    let at = |n: usize| report.rows.iter().find(|r| r.shots == n).map(|r| r.psnr_mean);
    if let (Some(one), Some(four)) = (at(1), at(4)) {
        if four < one - 0.1 {
            report.warnings.push(format!(
                "4-shot PSNR {four:.3} dB is more than 0.1 dB below 1-shot {one:.3} dB"
            ));
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessRow {
    /// Set index, or `aggregate` for the mean/std over sets.
    pub set: String,
    pub support_ids: String,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
    pub warnings: Vec<String>,
}

/// `k` disjoint support sets of `shots` pairs drawn from `pool` by `seed`.
pub fn disjoint_support_sets(pool: &[Pair], k: usize, shots: usize, seed: u64) -> Result<Vec<Vec<Pair>>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if k * shots > pool.len() {
        return Err(CoreError::Insufficient(format!(
            "{k} disjoint sets of {shots} need {} pool pairs, have {}",
            k * shots,
            pool.len()
        ))
        .into());
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    Ok(order
        .chunks(shots)
        .take(k)
        .map(|c| c.iter().map(|&i| pool[i].clone()).collect())
        .collect())
}

/// Repeats adaptation and evaluation with `k` disjoint support sets.
pub fn run_support_robustness(cfg: &ExperimentConfig, scenario: &Scenario, k: usize) -> Result<RobustnessReport> {
    let c = seeded(cfg, cfg.seeds[0]);
    let trained = run_meta_train(&c, scenario)?;
    robustness_from(&c, scenario, &trained, k)
}

pub fn robustness_from(
    cfg: &ExperimentConfig,
    scenario: &Scenario,
    trained: &MetaTrained,
    k: usize,
) -> Result<RobustnessReport> {
    let sets = disjoint_support_sets(
        &scenario.target.support_pool(),
        k,
        cfg.shots,
        mix_seed(cfg.adapt.seed, 0x5e7),
    )?;
    let mut report = RobustnessReport::default();
    for (i, support) in sets.iter().enumerate() {
        let r = adapt_and_evaluate(cfg, scenario, trained, support)?;
        report.rows.push(RobustnessRow {
            set: i.to_string(),
            support_ids: support.iter().map(|p| p.id.as_str()).collect::<Vec<_>>().join(" "),
            psnr_mean: r.after.psnr.mean,
            psnr_std: r.after.psnr.std,
            ssim_mean: r.after.ssim.mean,
            ssim_std: r.after.ssim.std,
        });
    }
    let psnr = Summary::of(report.rows.iter().map(|r| r.psnr_mean));
    let ssim = Summary::of(report.rows.iter().map(|r| r.ssim_mean));
    if psnr.std > 1.0 {
        report.warnings.push(format!(
            "PSNR std over support sets is {:.3} dB (expected at most 1 dB)",
            psnr.std
        ));
    }
    report.rows.push(RobustnessRow {
        set: "aggregate".into(),
        support_ids: String::new(),
        psnr_mean: psnr.mean,
        psnr_std: psnr.std,
        ssim_mean: ssim.mean,
        ssim_std: ssim.std,
    });
    Ok(report)
}

/// Writes rows as CSV with a header.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-image rows of an evaluation report.
pub fn write_report_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    write_csv(path, &report.records)
}

pub fn write_loss_csv(path: &Path, log: &[LossRecord]) -> Result<()> {
    write_csv(path, log)
}
