//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any of them fails.
//!
//! Set `EMI_ACCEPT_ONLY=3,10` to run a subset while iterating locally.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use emi_core::agent::{collect_rollouts, graph_access, Policy, PolicyConfig};
use emi_core::emi::{kl_to_standard_normal, RegularizeTarget};
use emi_core::envs::{ActionSpace, Environment, FourRooms, Observation, ObservationKind, SparsePoint};
use emi_core::mi::{jsd_bound, l_info, mi_gaussian_check, Batch, GaussianCheckConfig, LOG4};
use emi_core::model::{Activation, EmiModel, ModelConfig, NetShape, StatSide};
use emi_core::numcore::gradcheck::GradCheck;
use emi_core::numcore::{Graph, Matrix, NodeId};
use emi_harness::boximage::{boximage_embed, BoximageConfig, BoximageReport};
use emi_harness::config::RunConfig;
use emi_harness::run::{run_experiment, RunSummary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const BOXIMAGE_SAMPLES: usize = 30_000;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

fn random_matrix(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

fn small_model(seed: u64, action: ActionSpace) -> EmiModel {
    let mut cfg = ModelConfig::new(ObservationKind::Vector { dim: 3 }, action, 2);
    cfg.phi = NetShape::new(&[5, 4], Activation::Tanh);
    cfg.psi = NetShape::new(&[4], Activation::Relu);
    cfg.error = NetShape::new(&[5], Activation::Tanh);
    cfg.statistics = NetShape::new(&[6, 5], Activation::Tanh);
    let mut m = EmiModel::new(cfg, &mut rng(seed)).unwrap();
    // Statistics outputs start near zero; rescale so their gradients are
    // well above the comparison floor.
    for side in [StatSide::State, StatSide::Action] {
        let last = m.statistics_net(side).param_range().end - 2;
        let w = &mut m.params_mut()[last];
        *w = w.map(|v| v * 1e3);
    }
    m
}

// 1. Reverse-mode gradients against central differences.
fn gradients() -> Verdict {
    let start = Instant::now();
    let tol = 1e-4;
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut r = rng(11);
    for (k, action) in [
        ActionSpace::Continuous { dim: 2, low: -1.0, high: 1.0 },
        ActionSpace::Discrete { n: 3 },
    ]
    .into_iter()
    .enumerate()
    {
        let model = small_model(k as u64, action.clone());
        let s = random_matrix(4, 3, &mut r);
        let a = match action {
            ActionSpace::Continuous { .. } => random_matrix(4, 2, &mut r),
            ActionSpace::Discrete { n } => Matrix::from_fn(4, n, |i, j| f64::from(u8::from(j == i % n))),
        };
        let z = [random_matrix(4, 2, &mut r), random_matrix(4, 2, &mut r), random_matrix(4, 2, &mut r)];
        type Net<'a> = Box<dyn Fn(&EmiModel, &mut Graph) -> emi_core::Result<NodeId> + 'a>;
        let nets: Vec<(&str, Net)> = vec![
            ("phi", Box::new(|m, g| {
                let x = g.constant(s.clone());
                m.phi(g, x)
            })),
            ("psi", Box::new(|m, g| {
                let x = g.constant(a.clone());
                m.psi(g, x)
            })),
            ("S", Box::new(|m, g| {
                let (x, y) = (g.constant(s.clone()), g.constant(a.clone()));
                m.error_model(g, x, y)
            })),
            ("T_S", Box::new(|m, g| {
                let (u, v, w) = (g.constant(z[0].clone()), g.constant(z[1].clone()), g.constant(z[2].clone()));
                m.statistics(g, StatSide::State, u, v, w)
            })),
            ("T_A", Box::new(|m, g| {
                let (u, v, w) = (g.constant(z[0].clone()), g.constant(z[1].clone()), g.constant(z[2].clone()));
                m.statistics(g, StatSide::Action, u, v, w)
            })),
        ];
        for (name, f) in &nets {
            let rep = GradCheck::default()
                .run(model.params(), |g, _| {
                    let out = f(&model, g)?;
                    let sq = g.square(out);
                    Ok(g.sum(sq))
                })
                .unwrap();
            worst.push((format!("{name}[{}]", if k == 0 { "cont" } else { "disc" }), rep.max_rel_error));
        }
    }

    for (label, mut env) in [
        ("gauss", Box::new(SparsePoint::new()) as Box<dyn Environment>),
        ("cat", Box::new(FourRooms::new()) as Box<dyn Environment>),
    ] {
        let cfg = PolicyConfig {
            output_init_scale: 1.0,
            net: NetShape::new(&[6, 5], Activation::Tanh),
            baseline: NetShape::new(&[6, 5], Activation::Tanh),
            ..PolicyConfig::default()
        };
        let mut policy = Policy::new(env.spec(), &cfg, &mut rng(2)).unwrap();
        // The value head starts at zero; give it weights to differentiate.
        for p in policy.baseline_params_mut() {
            *p = Matrix::from_fn(p.rows(), p.cols(), |_, _| r.random_range(-0.5..0.5));
        }
        let buf = collect_rollouts(env.as_mut(), &policy, 6, &mut rng(3)).unwrap();
        let obs: Vec<&Observation> = buf.transitions.iter().map(|t| t.s.as_ref()).collect();
        let x = policy.encode(&obs).unwrap();
        let acts = graph_access::encode_actions(&policy, buf.transitions.iter().map(|t| &t.a)).unwrap();
        let check = GradCheck {
            max_entries: 40,
            ..GradCheck::default()
        };
        let rep = check
            .run(policy.params(), |g, _| {
                let xn = g.constant(x.clone());
                graph_access::mean_log_prob(&policy, g, xn, &acts)
            })
            .unwrap();
        worst.push((format!("policy[{label}]"), rep.max_rel_error));
        let rep = check
            .run(policy.baseline_params(), |g, _| {
                let xn = g.constant(x.clone());
                graph_access::baseline_sum(&policy, g, xn)
            })
            .unwrap();
        worst.push((format!("baseline[{label}]"), rep.max_rel_error));
    }
    let elapsed = start.elapsed();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let failing: Vec<&str> = worst.iter().filter(|w| !(w.1 <= tol)).map(|w| w.0.as_str()).collect();
    Verdict::new(
        failing.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} checks, max rel error {max:.2e}, failing {failing:?}, {:.1}s",
            worst.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn random_batch(m: usize, r: &mut ChaCha8Rng, action_cols: usize) -> Batch {
    Batch::new(
        random_matrix(m, 3, r),
        random_matrix(m, action_cols, r),
        random_matrix(m, 3, r),
    )
    .unwrap()
}

// 2. Closed-form identities of the bounds and the KL regularizer.
fn identities() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;

    let jsd_zero = [1usize, 2, 7, 64]
        .iter()
        .all(|&n| jsd_bound(&vec![0.0; n], &vec![0.0; n]).unwrap() == 0.0);
    ok &= jsd_zero;
    notes.push(format!("jsd(T=0)=0 {jsd_zero}"));

    let action = ActionSpace::Continuous { dim: 2, low: -1.0, high: 1.0 };
    let mut model = small_model(7, action.clone());
    for side in [StatSide::State, StatSide::Action] {
        let range = model.statistics_net(side).param_range();
        for p in &mut model.params_mut()[range] {
            *p = p.map(|_| 0.0);
        }
    }
    let mut r = rng(21);
    let zero_info = l_info(&model, &random_batch(16, &mut r, 2)).unwrap().loss;
    let zero_ok = (zero_info - 4.0 * std::f64::consts::LN_2).abs() <= 1e-10;
    ok &= zero_ok;
    notes.push(format!("l_info(T=0) off by {:.1e}", (zero_info - 4.0 * std::f64::consts::LN_2).abs()));

    let mut max_gap: f64 = 0.0;
    for case in 0..100u64 {
        let action = if case % 2 == 0 {
            ActionSpace::Continuous { dim: 2, low: -1.0, high: 1.0 }
        } else {
            ActionSpace::Discrete { n: 3 }
        };
        let model = small_model(100 + case, action.clone());
        let m = r.random_range(2..40);
        let batch = random_batch(m, &mut r, action.encoded_len());
        let rep = l_info(&model, &batch).unwrap();
        max_gap = max_gap.max((rep.loss + rep.bound_state + rep.bound_action - 2.0 * LOG4).abs());
    }
    let gap_ok = max_gap <= 1e-10;
    ok &= gap_ok;
    notes.push(format!("l_info + bounds - 2 log4 max {max_gap:.1e} over 100 cases"));

    // Rows built to have exact batch moments.
    let s2 = std::f64::consts::SQRT_2;
    let kl_cases = [
        (Matrix::from_rows(&[vec![-1.0], vec![1.0]]).unwrap(), 0.0),
        (Matrix::from_rows(&[vec![0.0], vec![2.0]]).unwrap(), 0.5),
        (
            Matrix::from_rows(&[vec![0.5 - s2, -1.0], vec![0.5 + s2, 0.0]]).unwrap(),
            0.5 * (0.25 + 2.0 - 2f64.ln() - 1.0) + 0.5 * (0.25 + 0.25 - 0.25f64.ln() - 1.0),
        ),
    ];
    let kl_gap = kl_cases
        .iter()
        .map(|(rows, want)| (kl_to_standard_normal(rows).unwrap() - want).abs())
        .fold(0.0, f64::max);
    let kl_ok = kl_gap <= 1e-12;
    ok &= kl_ok;
    notes.push(format!("kl closed forms max gap {kl_gap:.1e}"));
    Verdict::new(ok, notes.join(", "))
}

// 3. The JSD estimator on correlated Gaussian pairs.
fn mi_estimator() -> Verdict {
    let start = Instant::now();
    let mut passed = 0;
    let mut notes = Vec::new();
    for seed in 0..3 {
        let ind = mi_gaussian_check(&GaussianCheckConfig::new(0.0), seed).unwrap();
        let dep = mi_gaussian_check(&GaussianCheckConfig::new(0.9), seed).unwrap();
        let bounded = [ind.initial_bound, ind.bound, dep.initial_bound, dep.bound]
            .iter()
            .all(|&b| b <= LOG4);
        let ok = (-0.05..=0.10).contains(&ind.bound) && dep.bound >= ind.bound + 0.2 && bounded;
        passed += usize::from(ok);
        notes.push(format!("seed {seed}: {:.4} vs {:.4}", ind.bound, dep.bound));
    }
    let elapsed = start.elapsed();
    Verdict::new(
        passed == 3 && elapsed < Duration::from_secs(120),
        format!("{passed}/3 seeds ({}), {:.1}s", notes.join("; "), elapsed.as_secs_f64()),
    )
}

struct BoxRun {
    report: BoximageReport,
    elapsed: Duration,
}

fn boximage_run(regularize: RegularizeTarget, seed: u64) -> BoxRun {
    let start = Instant::now();
    let cfg = BoximageConfig::new(BOXIMAGE_SAMPLES, regularize, seed);
    let outcome = boximage_embed(&cfg).unwrap();
    BoxRun {
        report: outcome.report,
        elapsed: start.elapsed(),
    }
}

// 4, 5 and 6 share the trained BoxImage models.
fn boximage_criteria() -> [Verdict; 3] {
    let mut action_runs = Vec::new();
    let mut state_runs = Vec::new();
    for seed in SEEDS {
        let a = boximage_run(RegularizeTarget::Action, seed);
        let s = boximage_run(RegularizeTarget::State, seed);
        println!(
            "  boximage seed {seed}: action-reg R2 state {:.3} action {:.3} ({:.1} min), state-reg R2 state {:.3}, {}",
            a.report.state_r2,
            a.report.action_r2,
            minutes(a.elapsed),
            s.report.state_r2,
            a.report.boundary.describe()
        );
        action_runs.push(a);
        state_runs.push(s);
    }

    let recovered = action_runs
        .iter()
        .filter(|r| r.report.state_r2 >= 0.8 && r.report.action_r2 >= 0.8 && r.elapsed < Duration::from_secs(15 * 60))
        .count();
    let slowest = action_runs.iter().map(|r| minutes(r.elapsed)).fold(0.0, f64::max);
    let c4 = Verdict::new(
        recovered >= 4,
        format!("{recovered}/5 seeds with both R2 >= 0.8, slowest seed {slowest:.1} min"),
    );

    let degraded = action_runs
        .iter()
        .zip(&state_runs)
        .filter(|(a, s)| s.report.state_r2 < a.report.state_r2)
        .count();
    let c5 = Verdict::new(degraded >= 4, format!("{degraded}/5 seed pairs with state-reg R2 < action-reg R2"));

    let boundary = action_runs
        .iter()
        .filter(|r| match (r.report.boundary.clipped_mean, r.report.boundary.interior_mean) {
            (Some(c), Some(i)) => c > i,
            _ => false,
        })
        .count();
    let c6 = Verdict::new(boundary >= 4, format!("{boundary}/5 seeds with clipped mean |S| > interior mean"));
    [c4, c5, c6]
}

fn run(cfg: &RunConfig, dir: &Path) -> (RunSummary, Duration) {
    let start = Instant::now();
    let summary = run_experiment(cfg, dir).unwrap();
    (summary, start.elapsed())
}

// 7. Dynamics and info losses shrink within 50 iterations.
fn loss_convergence(scratch: &Path) -> Verdict {
    let mut passed = 0;
    let mut notes = Vec::new();
    for seed in SEEDS {
        let mut cfg = RunConfig::load(&config_path("sparse_point.toml")).unwrap();
        cfg.seed = seed;
        cfg.max_iter = 50;
        cfg.stop_on_success = false;
        let (summary, _) = run(&cfg, &scratch.join(format!("converge_{seed}")));
        let (first, last) = (summary.records[0], summary.records[49]);
        let dyn_ratio = last.dyn_loss / first.dyn_loss;
        let info_ratio = last.info_loss / first.info_loss;
        passed += usize::from(dyn_ratio < 0.5 && info_ratio < 0.5);
        notes.push(format!("{dyn_ratio:.3}/{info_ratio:.3}"));
    }
    Verdict::new(
        passed >= 4,
        format!("{passed}/5 seeds below half (dyn/info ratios {})", notes.join(", ")),
    )
}

struct Arm {
    successes: usize,
    slowest: Duration,
    firsts: Vec<Option<usize>>,
}

fn exploration_arm(config: &str, eta: Option<f64>, scratch: &Path) -> Arm {
    let mut arm = Arm {
        successes: 0,
        slowest: Duration::ZERO,
        firsts: Vec::new(),
    };
    for seed in SEEDS {
        let mut cfg = RunConfig::load(&config_path(config)).unwrap();
        cfg.seed = seed;
        cfg.stop_on_success = true;
        if let Some(eta) = eta {
            cfg.intrinsic.eta = eta;
        }
        let tag = format!("{}_{}_{seed}", config.trim_end_matches(".toml"), cfg.intrinsic.eta);
        let (summary, elapsed) = run(&cfg, &scratch.join(tag));
        arm.successes += usize::from(summary.succeeded());
        arm.slowest = arm.slowest.max(elapsed);
        arm.firsts.push(summary.first_success);
    }
    arm
}

fn describe_arm(name: &str, arm: &Arm) -> String {
    let firsts: Vec<String> = arm
        .firsts
        .iter()
        .map(|f| f.map_or("-".to_string(), |i| i.to_string()))
        .collect();
    format!(
        "{name} {}/5 (first success [{}], slowest {:.1} min)",
        arm.successes,
        firsts.join(" "),
        minutes(arm.slowest)
    )
}

// 8. Intrinsic rewards find the sparse goal; the ablation does not.
fn exploration(scratch: &Path) -> Verdict {
    let budget = Duration::from_secs(30 * 60);
    let sp = exploration_arm("sparse_point.toml", None, scratch);
    let sp0 = exploration_arm("sparse_point.toml", Some(0.0), scratch);
    let fr = exploration_arm("four_rooms.toml", None, scratch);
    let fr0 = exploration_arm("four_rooms.toml", Some(0.0), scratch);
    let in_budget = [&sp, &sp0, &fr, &fr0].iter().all(|a| a.slowest < budget);
    let pass = sp.successes >= 4 && sp0.successes <= 1 && fr.successes >= 3 && fr0.successes <= 1 && in_budget;
    Verdict::new(
        pass,
        [
            describe_arm("sparse_point EMI", &sp),
            describe_arm("eta=0", &sp0),
            describe_arm("four_rooms EMI-D", &fr),
            describe_arm("eta=0", &fr0),
        ]
        .join("; "),
    )
}

// 9. Without the information term the state embedding collapses.
fn ablation() -> Verdict {
    let mut passed = 0;
    let mut notes = Vec::new();
    for seed in [0, 1, 2] {
        let spread = |lambda_info: f64| {
            let mut cfg = BoximageConfig::new(10_000, RegularizeTarget::Action, seed);
            cfg.epochs = 20;
            cfg.lambda_kl = 0.0;
            cfg.lambda_info = lambda_info;
            boximage_embed(&cfg).unwrap().report.spread
        };
        let (with, without) = (spread(0.01), spread(0.0));
        let ratio = without / with;
        passed += usize::from(ratio <= 0.1);
        notes.push(format!("{without:.2e}/{with:.2e}={ratio:.4}"));
    }
    Verdict::new(passed == 3, format!("{passed}/3 matched seeds at <= 10% ({})", notes.join(", ")))
}

// 10. Same config and seed give byte-identical progress files.
fn determinism(scratch: &Path) -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for (config, iters, steps) in [("sparse_point.toml", 5, 2048), ("four_rooms.toml", 2, 512)] {
        let mut cfg = RunConfig::load(&config_path(config)).unwrap();
        cfg.seed = 3;
        cfg.max_iter = iters;
        cfg.steps_per_iter = steps;
        cfg.stop_on_success = false;
        cfg.wall_clock = false;
        let read = |tag: &str| {
            let dir = scratch.join(format!("det_{tag}_{config}"));
            run_experiment(&cfg, &dir).unwrap();
            fs::read(dir.join("progress.csv")).unwrap()
        };
        let (a, b) = (read("a"), read("b"));
        let same = a == b && !a.is_empty();
        ok &= same;
        notes.push(format!("{config}: {} bytes, identical {same}", a.len()));
    }
    Verdict::new(ok, notes.join(", "))
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture are accepted and ignored.
    let only: Option<Vec<usize>> = std::env::var("EMI_ACCEPT_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let scratch = tempfile::tempdir().unwrap();
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut record = |n: usize, name: &'static str, v: Verdict| {
        println!("criterion {n:>2} {}: {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };

    if wanted(1) {
        record(1, "gradient correctness", gradients());
    }
    if wanted(2) {
        record(2, "analytic identities", identities());
    }
    if wanted(3) {
        record(3, "mi estimator behavior", mi_estimator());
    }
    if wanted(4) || wanted(5) || wanted(6) {
        let [c4, c5, c6] = boximage_criteria();
        record(4, "boximage embedding recovery", c4);
        record(5, "regularization target", c5);
        record(6, "error model at the boundary", c6);
    }
    if wanted(7) {
        record(7, "loss convergence", loss_convergence(scratch.path()));
    }
    if wanted(8) {
        record(8, "exploration benefit", exploration(scratch.path()));
    }
    if wanted(9) {
        record(9, "information-term ablation", ablation());
    }
    if wanted(10) {
        record(10, "determinism", determinism(scratch.path()));
    }

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(", failed {failed:?}")
        }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
