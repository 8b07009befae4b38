use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wxmatch::checkpoint::{self, CheckpointMeta};
use wxmatch::config::{parse_config, ExperimentConfig};
use wxmatch::dataset::{build_dataset, load_task};
use wxmatch::experiments::{
    robustness_from, run_ablation_modes, run_meta_train, seeded, shot_scaling_from, write_csv, write_loss_csv,
    write_report_csv, Scenario, Variant,
};
use wxmatch::{Error, Result};
use wxmatch_core::degrade::WeatherSpec;
use wxmatch_core::imaging::{ReportMeta, PSNR_CAP_DB};
use wxmatch_core::model::check::{grad_check_block, GradBlock, GRAD_CHECK_TOLERANCE};
use wxmatch_core::model::Network;
use wxmatch_core::train::{
    checkpoint_id, evaluate_model, meta_test_adapt, meta_train, AdaptScope, TrainEvent, TrainState,
};

#[derive(Parser)]
#[command(
    name = "wxmatch",
    version,
    about = "Few-shot weather restoration by degradation-pattern matching"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of PNG pairs plus manifest.json.
    GenData {
        /// Weather spec as a JSON file or inline JSON.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Square image size in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Meta-train on the configured single-condition tasks.
    MetaTrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss log CSV (default: <out>.loss.csv).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Adapt a checkpoint to a new condition using its support pool.
    Adapt {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        support: PathBuf,
        #[arg(long, default_value_t = 1)]
        shots: usize,
        #[arg(long, default_value = "bias")]
        scope: AdaptScope,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset's evaluation split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        support: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Matching-mode and matched-feature ablation.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "none,spatial,channel,both,background")]
        modes: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adaptation at several support sizes from one meta-trained checkpoint.
    Shots {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        list: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adaptation with k disjoint support sets.
    Robustness {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Float64 gradient checks of the network blocks.
    Gradcheck {
        /// encoder, spatial, channel, decoder or model (default: all).
        #[arg(long)]
        block: Option<GradBlock>,
    },
}

fn parse_spec(arg: &str) -> Result<WeatherSpec> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_owned()
    } else {
        std::fs::read_to_string(arg).map_err(|e| Error::Io {
            path: arg.into(),
            source: e,
        })?
    };
    let spec: WeatherSpec = serde_json::from_str(&text).map_err(|e| Error::Config(format!("spec: {e}")))?;
    spec.validate()?;
    Ok(spec)
}

fn checkpoint_meta(cfg: &ExperimentConfig) -> CheckpointMeta {
    CheckpointMeta {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        adapt: cfg.adapt.clone(),
        shots: 0,
    }
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| cfg.output_dir.clone())
}

fn meta_train_cmd(config: &Path, out: &Path, log: Option<PathBuf>) -> Result<()> {
    let cfg = parse_config(config)?;
    let scenario = Scenario::generate(&cfg)?;
    let net = Network::new(cfg.model.clone())?;
    let meta = checkpoint_meta(&cfg);
    let mut state = TrainState::new(net.init_params(cfg.train.seed)?, &cfg.train);
    let result = meta_train(&net, &scenario.meta_train, &cfg.train, &mut state, |ev| match ev {
        TrainEvent::Log(r) => {
            eprintln!(
                "iter {:>7}  loss {:.5}  smoothed {:.5}",
                r.iteration, r.raw_loss, r.smoothed_loss
            );
            Ok(())
        }
        TrainEvent::Checkpoint(s) => {
            checkpoint::save_with_meta(out, s, &meta).map_err(|e| wxmatch_core::Error::Param(e.to_string()))
        }
    });
    let losses = match result {
        Ok(l) => l,
        Err(e) => {
            // Keep the last good weights for inspection.
            checkpoint::save_with_meta(out, &state, &meta)?;
            return Err(e.into());
        }
    };
    checkpoint::save_with_meta(out, &state, &meta)?;
    let log = log.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".loss.csv");
        s.into()
    });
    write_loss_csv(&log, &losses)?;
    println!("{}", checkpoint_id(&state.store));
    Ok(())
}

fn adapt_cmd(ckpt: &Path, support: &Path, shots: usize, scope: AdaptScope, out: &Path) -> Result<()> {
    let (state, mut meta) = checkpoint::load_with_meta(ckpt)?;
    let task = load_task(support)?;
    let pool = task.support_pool();
    if shots == 0 || pool.len() < shots {
        return Err(wxmatch_core::Error::Insufficient(format!(
            "support pool has {} pairs, {shots} shots requested",
            pool.len()
        ))
        .into());
    }
    let net = Network::new(meta.model.clone())?;
    meta.adapt.scope = scope;
    meta.shots = shots;
    let mut adapted = TrainState::new(state.store, &meta.train);
    let outcome = meta_test_adapt(&net, &mut adapted.store, &pool[..shots], &meta.adapt)?;
    adapted.iteration = meta.adapt.iterations;
    checkpoint::save_with_meta(out, &adapted, &meta)?;
    eprintln!(
        "adapted {} tensors; final loss {:.5}",
        outcome.touched,
        outcome.losses.last().copied().unwrap_or(f64::NAN)
    );
    println!("{}", checkpoint_id(&adapted.store));
    Ok(())
}

fn eval_cmd(ckpt: &Path, dataset: &Path, support: &Path, report: &Path) -> Result<()> {
    let (state, meta) = checkpoint::load_with_meta(ckpt)?;
    let net = Network::new(meta.model.clone())?;
    let data = load_task(dataset)?;
    let sup = load_task(support)?;
    let shots = meta.shots.max(1);
    let pool = sup.support_pool();
    if pool.len() < shots {
        return Err(
            wxmatch_core::Error::Insufficient(format!("support pool has {} pairs, need {shots}", pool.len())).into(),
        );
    }
    let rm = ReportMeta {
        dataset_id: format!("{}:{}", data.condition_id, dataset.display()),
        checkpoint_id: checkpoint_id(&state.store),
        shots,
        seed: meta.adapt.seed,
        psnr_cap_db: PSNR_CAP_DB,
    };
    let r = evaluate_model(&net, &state.store, &data.eval_pairs(), &pool[..shots], rm)?;
    write_report_csv(report, &r)?;
    let mp = checkpoint::meta_path(report);
    std::fs::write(&mp, serde_json::to_string_pretty(&r)? + "\n").map_err(|e| Error::Io { path: mp, source: e })?;
    println!(
        "PSNR {:.3} +- {:.3} dB  SSIM {:.4} +- {:.4}  ({} images)",
        r.psnr.mean,
        r.psnr.std,
        r.ssim.mean,
        r.ssim.std,
        r.records.len()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            spec,
            count,
            seed,
            out,
            size,
        } => {
            let m = build_dataset(&parse_spec(&spec)?, count, seed, &out, size)?;
            println!(
                "wrote {} pairs of {} to {}",
                m.pairs.len(),
                m.condition_id,
                out.display()
            );
        }
        Command::MetaTrain { config, out, log } => meta_train_cmd(&config, &out, log)?,
        Command::Adapt {
            ckpt,
            support,
            shots,
            scope,
            out,
        } => adapt_cmd(&ckpt, &support, shots, scope, &out)?,
        Command::Eval {
            ckpt,
            dataset,
            support,
            report,
        } => eval_cmd(&ckpt, &dataset, &support, &report)?,
        Command::Ablate { config, modes, out } => {
            let cfg = parse_config(&config)?;
            let variants = modes
                .iter()
                .map(|m| Variant::parse(m.trim()))
                .collect::<Result<Vec<_>>>()?;
            let r = run_ablation_modes(&cfg, &Scenario::generate(&cfg)?, &variants)?;
            warn_all(&r.warnings);
            let path = out_dir(&cfg, out).join("ablation.csv");
            write_csv(&path, &r.rows)?;
            println!("{}", path.display());
        }
        Command::Shots { config, list, out } => {
            let base = parse_config(&config)?;
            let cfg = seeded(&base, base.seeds[0]);
            let scenario = Scenario::generate(&cfg)?;
            let trained = run_meta_train(&cfg, &scenario)?;
            let r = shot_scaling_from(&cfg, &scenario, &trained, &list)?;
            warn_all(&r.warnings);
            let path = out_dir(&cfg, out).join("shots.csv");
            write_csv(&path, &r.rows)?;
            println!("{}", path.display());
        }
        Command::Robustness { config, k, out } => {
            let base = parse_config(&config)?;
            let cfg = seeded(&base, base.seeds[0]);
            let scenario = Scenario::generate(&cfg)?;
            let trained = run_meta_train(&cfg, &scenario)?;
            let r = robustness_from(&cfg, &scenario, &trained, k)?;
            warn_all(&r.warnings);
            let path = out_dir(&cfg, out).join("robustness.csv");
            write_csv(&path, &r.rows)?;
            println!("{}", path.display());
        }
        Command::Gradcheck { block } => {
            let blocks = block.map_or(GradBlock::ALL.to_vec(), |b| vec![b]);
            let mut failed = Vec::new();
            for b in blocks {
                let r = grad_check_block(b, 0)?;
                let ok = r.max_rel_error < GRAD_CHECK_TOLERANCE;
                println!(
                    "{:<8} max rel error {:.3e} over {} coordinates  {}",
                    b.as_str(),
                    r.max_rel_error,
                    r.checked,
                    if ok { "ok" } else { "FAIL" }
                );
                if !ok {
                    failed.push(b.as_str());
                }
            }
            if !failed.is_empty() {
                return Err(Error::Numeric(format!(
                    "gradient check above {GRAD_CHECK_TOLERANCE:e}: {}",
                    failed.join(", ")
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
