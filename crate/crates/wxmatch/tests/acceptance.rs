//! Acceptance suite: one PASS/FAIL line per criterion, run in order so
//! timings are not skewed by each other. Numeric arguments select criteria,
//! e.g. `cargo test -p wxmatch --test acceptance -- 7 8`.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wxmatch::checkpoint::encode;
use wxmatch::config::ExperimentConfig;
use wxmatch::dataset::generate_task;
use wxmatch::experiments::{run_desk_seed, Scenario};
use wxmatch_core::degrade::{
    compose_degraded, degradation_pattern_analytic, Atmosphere, DegradationField, WeatherSpec, T_MIN,
};
use wxmatch_core::diff::{Graph, ParameterStore, Tensor};
use wxmatch_core::episodes::{meta_test_rounds, Episode, Pair, Round};
use wxmatch_core::imaging::{psnr, ssim, PSNR_CAP_DB};
use wxmatch_core::model::check::{grad_check_block, GradBlock, GRAD_CHECK_TOLERANCE};
use wxmatch_core::model::{bias_parameters, MatchMode, ModelConfig, Network, SupportVars};
use wxmatch_core::train::{meta_test_adapt, train_on_episode, AdaptConfig, AdaptScope, TrainConfig, TrainState};
use wxmatch_core::Image;

fn run_criterion(id: u32, title: &str, limit_s: Option<f64>, body: impl FnOnce() -> (bool, String)) -> bool {
    let start = Instant::now();
    let (ok, detail) = body();
    let secs = start.elapsed().as_secs_f64();
    let in_time = limit_s.is_none_or(|l| secs < l);
    let verdict = if ok && in_time { "PASS" } else { "FAIL" };
    let limit = limit_s.map_or(String::new(), |l| format!(" (limit {l:.0} s)"));
    println!("criterion {id:>2} [{verdict}] {title}: {detail}; {secs:.1} s{limit}");
    ok && in_time
}

fn noise(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, lo: f32, hi: f32) -> Image {
    Image::from_fn(h, w, c, |_, _, _| rng.gen_range(lo..=hi))
}

fn criterion_01_degradation_round_trip() -> bool {
    run_criterion(1, "degradation model round trip", Some(5.0), || {
        // Y, P in [0, 1], T in [T_MIN, 1], scalar A in [0, 1].
        let (mut worst, mut worst_in_range, mut over) = (0.0f64, 0.0f64, 0usize);
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (32, 32);
            let y = noise(&mut rng, h, w, 3, 0.0, 1.0);
            let field = DegradationField {
                transmission: noise(&mut rng, h, w, 1, T_MIN as f32, 1.0),
                particles: noise(&mut rng, h, w, 1, 0.0, 1.0),
                light: Atmosphere::Scalar(rng.gen_range(0.0..=1.0)),
            };
            let x = compose_degraded(&y, &field).unwrap().unclipped;
            let g = degradation_pattern_analytic(&x, &field).unwrap();
            let back = x.sub(&g).unwrap();
            for ((a, b), xv) in back.data().iter().zip(y.data()).zip(x.data()) {
                let e = (*a as f64 - *b as f64).abs();
                worst = worst.max(e);
                over += usize::from(e >= 1e-6);
                if *xv < 1.0 {
                    worst_in_range = worst_in_range.max(e);
                }
            }
        }
        // X - G(X) = X / T - ..., so storing X in f32 alone costs ulp(X) / (2 T).
        let floor = f32::EPSILON as f64 / (2.0 * T_MIN);
        (
            worst < 1e-6,
            format!(
                "max |X - G(X) - Y| = {worst:.3e} (< 1e-6), {over} of 307200 values over; \
                 {worst_in_range:.3e} where X < 1; f32 storage of X >= 1 alone allows up to {floor:.2e} at T = {T_MIN}"
            ),
        )
    })
}

fn criterion_02_metric_oracles() -> bool {
    run_criterion(2, "metric oracles", None, || {
        let zero = Image::<f64>::zeros(32, 32, 3);
        let tenth = Image::<f64>::filled(32, 32, 3, 0.1);
        let one = Image::<f64>::filled(32, 32, 3, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Image::<f64>::from_fn(32, 32, 3, |_, _, _| rng.gen_range(0.0..1.0));
        // 10 log10(1 / 0.1^2)
        let want_psnr = 10.0 * (1.0f64 / (0.1 * 0.1)).log10();
        // Constant images: SSIM = C1 / (1 + C1) with C1 = (0.01 * 1)^2.
        let c1 = (0.01f64 * 1.0).powi(2);
        let want_ssim = c1 / (1.0 + c1);
        let p = psnr(&zero, &tenth, 1.0).unwrap();
        let pc = psnr(&x, &x, 1.0).unwrap();
        let s01 = ssim(&zero, &one).unwrap();
        let sxx = ssim(&x, &x).unwrap();
        let ok = (p - want_psnr).abs() <= 1e-9
            && (want_psnr - 20.0).abs() <= 1e-9
            && pc == PSNR_CAP_DB
            && (s01 - want_ssim).abs() <= 1e-9
            && (sxx - 1.0).abs() <= 1e-9;
        (
            ok,
            format!("psnr(0,0.1) = {p:.12}, psnr(x,x) = {pc}, ssim(0,1) = {s01:.6e} (want {want_ssim:.6e}), ssim(x,x) = {sxx:.12}"),
        )
    })
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn stack_first_axis(parts: &[&Tensor<f64>]) -> Tensor<f64> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|t| t.shape()[0]).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::from_vec(&shape, data).unwrap()
}

fn split_first_axis(t: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let n = t.shape()[0];
    let mut shape = t.shape().to_vec();
    shape[0] = 1;
    let chunk = t.len() / n;
    (0..n)
        .map(|i| Tensor::from_vec(&shape, t.data()[i * chunk..(i + 1) * chunk].to_vec()).unwrap())
        .collect()
}

struct LevelRun {
    phi: Tensor<f64>,
    row_sum_error: f64,
}

fn match_level(
    net: &Network,
    s: &ParameterStore<f64>,
    l: usize,
    mode: MatchMode,
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
) -> LevelRun {
    let mut g = Graph::new();
    let qv = g.input(q.clone());
    let sv = SupportVars {
        keys: (0..=l).map(|_| g.input(k.clone())).collect(),
        values: (0..=l).map(|_| g.input(v.clone())).collect(),
    };
    let m = net.matching_module(&mut g, s, l, qv, &sv, mode).unwrap();
    let mut row_sum_error = 0.0f64;
    for &a in &m.attention {
        for p in g.attention_probs(a).unwrap() {
            for row in p.data().chunks(p.shape()[1]) {
                row_sum_error = row_sum_error.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    LevelRun {
        phi: g.value(m.phi).clone(),
        row_sum_error,
    }
}

fn criterion_03_matching_invariants() -> bool {
    run_criterion(3, "matching invariants", Some(30.0), || {
        let net = Network::new(ModelConfig::desk()).unwrap();
        let s = net.init_params::<f64>(3).unwrap();
        let cfg = net.config().clone();
        let (mut shape_ok, mut rows, mut perm, mut dup) = (true, 0.0f64, 0.0f64, 0.0f64);
        let mut instances = 0;
        for l in 0..cfg.levels {
            let (n, c) = (cfg.level_size(l), cfg.widths[l]);
            for mode in [MatchMode::Spatial, MatchMode::Channel, MatchMode::Both] {
                for i in 0..20u64 {
                    let mut rng = ChaCha8Rng::seed_from_u64(1000 * l as u64 + 100 * mode as u64 + i);
                    let q = rand_tensor(&mut rng, &[1, n, n, c]);
                    let k = rand_tensor(&mut rng, &[2, n, n, c]);
                    let v = rand_tensor(&mut rng, &[2, n, n, c]);
                    let base = match_level(&net, &s, l, mode, &q, &k, &v);
                    shape_ok &= base.phi.shape() == q.shape();
                    rows = rows.max(base.row_sum_error);
                    let (ks, vs) = (split_first_axis(&k), split_first_axis(&v));
                    let swapped = match_level(
                        &net,
                        &s,
                        l,
                        mode,
                        &q,
                        &stack_first_axis(&[&ks[1], &ks[0]]),
                        &stack_first_axis(&[&vs[1], &vs[0]]),
                    );
                    perm = perm.max(base.phi.max_abs_diff(&swapped.phi));
                    let single = match_level(&net, &s, l, mode, &q, &ks[0], &vs[0]);
                    let doubled = match_level(
                        &net,
                        &s,
                        l,
                        mode,
                        &q,
                        &stack_first_axis(&[&ks[0], &ks[0]]),
                        &stack_first_axis(&[&vs[0], &vs[0]]),
                    );
                    dup = dup.max(single.phi.max_abs_diff(&doubled.phi));
                    instances += 1;
                }
            }
        }
        let ok = shape_ok && rows <= 1e-6 && perm <= 1e-5 && dup <= 1e-5;
        (
            ok,
            format!(
                "{instances} instances: shapes {}, row-sum err {rows:.1e}, permutation {perm:.1e}, duplication {dup:.1e}",
                if shape_ok { "ok" } else { "WRONG" }
            ),
        )
    })
}

fn criterion_04_gradient_checks() -> bool {
    run_criterion(4, "gradient checks (float64, eps 1e-5)", Some(120.0), || {
        let mut ok = true;
        let mut parts = Vec::new();
        for b in GradBlock::ALL {
            let r = grad_check_block(b, 0).unwrap();
            ok &= r.max_rel_error < GRAD_CHECK_TOLERANCE && r.checked > 0;
            parts.push(format!("{b} {:.1e}", r.max_rel_error));
        }
        (ok, format!("max rel error: {} (< 1e-4)", parts.join(", ")))
    })
}

fn random_pair(rng: &mut ChaCha8Rng, id: &str, size: usize) -> Pair {
    let clean = noise(rng, size, size, 3, 0.0, 1.0);
    let degraded = noise(rng, size, size, 3, 0.0, 1.0);
    Pair::new(id, degraded, clean, "c").unwrap()
}

fn criterion_05_identity_at_init() -> bool {
    run_criterion(5, "identity at initialization", None, || {
        let net = Network::new(ModelConfig::desk()).unwrap();
        let mut exact = 0;
        for ep in 0..10u64 {
            let s = net.init_params::<f32>(ep).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(500 + ep);
            let support: Vec<_> = (0..1 + ep as usize % 3)
                .map(|i| random_pair(&mut rng, &format!("s{i}"), 64))
                .collect();
            let x = noise(&mut rng, 64, 64, 3, 0.0, 1.0);
            let y = net.restore(&s, &x, &support).unwrap();
            if y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()) {
                exact += 1;
            }
        }
        (exact == 10, format!("{exact}/10 episodes restore X bit-exactly"))
    })
}

fn criterion_06_bias_only_freeze() -> bool {
    run_criterion(6, "bias-only freeze", None, || {
        let net = Network::new(ModelConfig::desk()).unwrap();
        let mut store = net.init_params::<f32>(6).unwrap();
        let before = store.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let support = [random_pair(&mut rng, "a", 64), random_pair(&mut rng, "b", 64)];
        let cfg = AdaptConfig {
            iterations: 20,
            scope: AdaptScope::Bias,
            ..AdaptConfig::desk()
        };
        let out = meta_test_adapt(&net, &mut store, &support, &cfg).unwrap();
        let frozen_same = store
            .iter()
            .zip(before.iter())
            .filter(|(p, _)| !p.is_bias)
            .all(|(p, q)| p.values.iter().zip(&q.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        let biases_moved = store
            .iter()
            .zip(before.iter())
            .filter(|(p, _)| p.is_bias)
            .any(|(p, q)| p.values != q.values);
        let n_bias = bias_parameters(&store).len();
        let ok =
            frozen_same && out.frozen_digest_before == out.frozen_digest_after && out.touched == n_bias && biases_moved;
        (
            ok,
            format!(
                "non-bias tensors {}, touched {} of {n_bias} bias tensors",
                if frozen_same { "bitwise unchanged" } else { "CHANGED" },
                out.touched
            ),
        )
    })
}

struct OverfitOutcome {
    initial_db: f64,
    final_db: f64,
    checkpoint: Vec<u8>,
    report: Vec<u64>,
}

fn overfit_run() -> OverfitOutcome {
    let task = generate_task(&WeatherSpec::rain_fog(0), 8, 0, 64).unwrap();
    let ep = Episode {
        support: task.pairs[..1].to_vec(),
        query: task.pairs[1..].to_vec(),
        condition_id: task.condition_id.clone(),
    };
    let net = Network::new(ModelConfig::desk()).unwrap();
    let cfg = TrainConfig {
        iterations: 2000,
        ..TrainConfig::desk()
    };
    let mut state = TrainState::new(net.init_params(0).unwrap(), &cfg);
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let initial_db = mean(
        ep.query
            .iter()
            .map(|p| psnr(&*p.degraded, &*p.clean, 1.0).unwrap())
            .collect(),
    );
    train_on_episode(&net, &ep, &cfg, &mut state).unwrap();
    let queries: Vec<&Image> = ep.query.iter().map(|p| &*p.degraded).collect();
    let cache = net.support_cache(&state.store, &ep.support).unwrap();
    let restored = net.restore_cached(&state.store, &queries, &cache).unwrap();
    let scores: Vec<f64> = restored
        .iter()
        .zip(&ep.query)
        .map(|(y, p)| psnr(y, &p.clean, 1.0).unwrap())
        .collect();
    OverfitOutcome {
        initial_db,
        final_db: mean(scores.clone()),
        checkpoint: encode(&state),
        report: scores.iter().map(|v| v.to_bits()).collect(),
    }
}

static OVERFIT: OnceLock<OverfitOutcome> = OnceLock::new();

fn criterion_07_overfit_sanity() -> bool {
    run_criterion(7, "overfit sanity (2000 iterations, one episode)", Some(600.0), || {
        let o = OVERFIT.get_or_init(overfit_run);
        let gain = o.final_db - o.initial_db;
        (
            gain >= 10.0,
            format!(
                "PSNR {:.3} -> {:.3} dB, gain {gain:+.3} dB (>= 10)",
                o.initial_db, o.final_db
            ),
        )
    })
}

struct SeedOutcome {
    seed: u64,
    before_db: f64,
    after_db: f64,
    checkpoints: (Vec<u8>, Vec<u8>),
    reports: String,
}

fn desk_runs() -> Vec<SeedOutcome> {
    let cfg = ExperimentConfig::desk();
    let scenario = Scenario::generate(&cfg).unwrap();
    [0u64, 1, 2]
        .into_iter()
        .map(|seed| {
            let r = run_desk_seed(&cfg, &scenario, seed).unwrap();
            SeedOutcome {
                seed,
                before_db: r.eval.before.psnr.mean,
                after_db: r.eval.after.psnr.mean,
                checkpoints: (encode(&r.trained.state), encode(&r.eval.adapted)),
                reports: serde_json::to_string(&(&r.eval.before, &r.eval.after)).unwrap(),
            }
        })
        .collect()
}

static DESK: OnceLock<Vec<SeedOutcome>> = OnceLock::new();

fn criterion_08_adaptation_gain() -> bool {
    run_criterion(
        8,
        "1-shot bias adaptation gain on unseen rain+fog",
        Some(2700.0),
        || {
            let runs = DESK.get_or_init(desk_runs);
            let ok = runs.iter().all(|r| r.after_db - r.before_db >= 0.3);
            let per: Vec<_> = runs
                .iter()
                .map(|r| {
                    format!(
                        "seed {} {:.3} -> {:.3} ({:+.3} dB)",
                        r.seed,
                        r.before_db,
                        r.after_db,
                        r.after_db - r.before_db
                    )
                })
                .collect();
            let mean = runs.iter().map(|r| r.after_db - r.before_db).sum::<f64>() / runs.len() as f64;
            (ok, format!("{}; mean gain {mean:+.3} dB (each >= 0.3)", per.join(", ")))
        },
    )
}

fn criterion_09_protocol_fidelity() -> bool {
    run_criterion(9, "meta-test role schedules", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pairs: Vec<_> = ["a", "b", "c", "d"]
            .iter()
            .map(|id| random_pair(&mut rng, id, 4))
            .collect();
        let ids = |r: &[Round]| -> Vec<(Vec<String>, Vec<String>)> {
            r.iter()
                .map(|r| {
                    (
                        r.query.iter().map(|p| p.id.clone()).collect(),
                        r.support.iter().map(|p| p.id.clone()).collect(),
                    )
                })
                .collect()
        };
        let v = |s: &[&str]| s.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let n1 = ids(&meta_test_rounds(&pairs[..1]).unwrap());
        let n2 = ids(&meta_test_rounds(&pairs[..2]).unwrap());
        let n4 = ids(&meta_test_rounds(&pairs[..4]).unwrap());
        let ok = n1 == [(v(&["a"]), v(&["a"]))]
            && n2 == [(v(&["a"]), v(&["b"])), (v(&["b"]), v(&["a"]))]
            && n4 == [(v(&["a", "b"]), v(&["c", "d"])), (v(&["c", "d"]), v(&["a", "b"]))]
            && meta_test_rounds(&[]).is_err();
        (ok, format!("N=1 {n1:?}; N=2 {n2:?}; N=4 {n4:?}"))
    })
}

fn criterion_10_determinism() -> bool {
    run_criterion(10, "bitwise determinism of criteria 7-8", None, || {
        let o1 = OVERFIT.get_or_init(overfit_run);
        let o2 = overfit_run();
        let overfit_same = o1.checkpoint == o2.checkpoint && o1.report == o2.report;
        let d1 = DESK.get_or_init(desk_runs);
        let d2 = desk_runs();
        let desk_same = d1.len() == d2.len()
            && d1
                .iter()
                .zip(&d2)
                .all(|(a, b)| a.checkpoints == b.checkpoints && a.reports == b.reports);
        (
            overfit_same && desk_same,
            format!(
                "overfit checkpoint+report {}, desk checkpoints+reports (3 seeds) {}",
                if overfit_same { "identical" } else { "DIFFER" },
                if desk_same { "identical" } else { "DIFFER" }
            ),
        )
    })
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, fn() -> bool); 10] = [
        (1, criterion_01_degradation_round_trip),
        (2, criterion_02_metric_oracles),
        (3, criterion_03_matching_invariants),
        (4, criterion_04_gradient_checks),
        (5, criterion_05_identity_at_init),
        (6, criterion_06_bias_only_freeze),
        (7, criterion_07_overfit_sanity),
        (8, criterion_08_adaptation_gain),
        (9, criterion_09_protocol_fidelity),
        (10, criterion_10_determinism),
    ];
    let failed: Vec<u32> = criteria
        .into_iter()
        .filter(|(id, _)| selected.is_empty() || selected.contains(id))
        .filter_map(|(id, run)| (!run()).then_some(id))
        .collect();
    if !failed.is_empty() {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
