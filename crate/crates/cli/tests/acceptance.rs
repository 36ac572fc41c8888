//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line to stdout
//! (uncaptured) and then asserts.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use fedvar::bounds::{
    bound_derivative, convergence_bound, convexity_holds, h_gap, objective, optimal_m, BoundParams, ScheduleInputs,
};
use fedvar::data::{Dataset, Labels};
use fedvar::engine::perturb;
use fedvar::models::{HingeForm, LinearSvm, MlpArchitecture, Model, ModelParams};
use fedvar::privacy::{
    initial_sigma, log_moment, verify_account, verify_budget, MomentAccount, NoiseSchedule, PrivacyBudget,
};
use fedvar::rng::{Purpose, Stream};
use fedvar_cli::commands::{cmd_sweep, prepare, sweep_outcomes, Prepared, SweepRow};
use fedvar_cli::{Epsilon, ExperimentConfig};

fn report(id: u32, name: &str, ok: bool, detail: String) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{verdict} [{id:>2}] {name}: {detail}");
    assert!(ok, "acceptance {id} ({name}) failed: {detail}");
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn log_uniform(s: &mut Stream, lo: f64, hi: f64) -> f64 {
    s.uniform(lo.ln(), hi.ln()).exp()
}

fn int_in(s: &mut Stream, lo: usize, hi: usize) -> usize {
    lo + s.below((hi - lo + 1) as u64) as usize
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

#[test]
fn a01_calibration_meets_budget_and_is_tight() {
    let start = Instant::now();
    let mut s = Stream::new(101, Purpose::Data, 1, 0);
    let (mut passing, mut tight, mut failures) = (0, 0, Vec::new());
    let n = 200;
    for i in 0..n {
        let budget = PrivacyBudget::new(s.uniform(0.5, 50.0), log_uniform(&mut s, 1e-6, 0.1)).unwrap();
        let q = 1.0 - s.next_f64();
        let ds = log_uniform(&mut s, 1e-3, 1.0);
        let m = int_in(&mut s, 1, 100);
        let theta = s.uniform(0.5, 2.0);
        let sigma = initial_sigma(&budget, q, ds, m, theta).unwrap();
        let check = verify_budget(&NoiseSchedule::new(sigma, theta, m, q, ds).unwrap(), &budget).unwrap();
        if check.satisfied {
            passing += 1;
        } else if failures.len() < 3 {
            failures.push(format!("#{i} delta*={:.3e} > {:.3e}", check.achieved_delta, budget.delta()));
        }
        let shrunk = verify_budget(&NoiseSchedule::new(0.9 * sigma, theta, m, q, ds).unwrap(), &budget).unwrap();
        if !shrunk.satisfied {
            tight += 1;
        }
    }
    let elapsed = start.elapsed();
    let ok = passing == n && tight as f64 >= 0.95 * n as f64 && within(elapsed, 5.0);
    report(
        1,
        "calibration correctness",
        ok,
        format!(
            "{passing}/{n} pass verify_budget, {tight}/{n} fail at 0.9 sigma, {:.2}s; first misses: {}",
            elapsed.as_secs_f64(),
            failures.join("; ")
        ),
    );
}

/// `Σ q λ(λ+1) Δs² / (2 v_m)`, written out independently of the library.
fn alpha_direct(vars: &[f64], q: f64, ds: f64, lambda: f64) -> f64 {
    vars.iter().map(|v| q * lambda * (lambda + 1.0) * ds * ds / (2.0 * v)).sum()
}

#[test]
fn a02_closed_form_matches_lambda_grid() {
    let start = Instant::now();
    let mut s = Stream::new(102, Purpose::Data, 2, 0);
    let (step, lambda_max) = (2e-4, 2000.0);
    let grid_len = (lambda_max / step) as usize;
    let (mut worst_moment, mut worst_delta, mut cases, mut clamped) = (0.0f64, 0.0f64, 0, 0);
    while cases < 12 {
        let m = int_in(&mut s, 1, 60);
        let (q, ds, theta) = (s.uniform(0.01, 1.0), log_uniform(&mut s, 1e-3, 0.5), s.uniform(0.8, 1.2));
        let sigma0 = log_uniform(&mut s, 1e-3, 1.0);
        let eps = s.uniform(0.5, 30.0);
        let account =
            MomentAccount::new((1..=m).map(|r| theta.powi(r as i32 - 1) * sigma0 * sigma0).collect(), q, ds).unwrap();
        let vars = account.variances().to_vec();
        let (mut best, mut best_i) = (f64::INFINITY, 0);
        for i in 0..=grid_len {
            let lambda = i as f64 * step;
            let g = alpha_direct(&vars, q, ds, lambda) - lambda * eps;
            if g < best {
                best = g;
                best_i = i;
            }
        }
        if best_i == grid_len {
            continue;
        }
        let lambda_grid = best_i as f64 * step;
        worst_moment =
            worst_moment.max(rel(log_moment(&account, lambda_grid).unwrap(), alpha_direct(&vars, q, ds, lambda_grid)));
        let check = verify_account(&account, &PrivacyBudget::new(eps, 1e-5).unwrap());
        worst_delta = worst_delta.max(rel(check.achieved_delta, best.exp()));
        clamped += usize::from(check.clamped);
        cases += 1;
    }
    let elapsed = start.elapsed();
    let ok = worst_moment < 1e-6 && worst_delta < 1e-6 && within(elapsed, 10.0);
    report(
        2,
        "closed form vs lambda grid",
        ok,
        format!(
            "{cases} schedules ({clamped} clamped), max rel err log_moment {worst_moment:.2e}, tail bound {worst_delta:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn a03_continuity_and_limits() {
    let budget = PrivacyBudget::new(10.0, 1e-3).unwrap();
    let (q, ds) = (0.1, 1.0 / 60.0);
    let mut gap = 0.0f64;
    for m in [2, 10, 30, 100] {
        let at_one = initial_sigma(&budget, q, ds, m, 1.0).unwrap();
        for theta in [1.0 - 1e-6, 1.0 + 1e-6] {
            gap = gap.max(rel(initial_sigma(&budget, q, ds, m, theta).unwrap(), at_one));
        }
    }
    let single: Vec<f64> =
        [0.5, 0.8, 0.95, 1.0, 1.05, 1.5, 2.0].iter().map(|&t| initial_sigma(&budget, q, ds, 1, t).unwrap()).collect();
    let (lo, hi) = single.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let spread = (hi - lo) / lo;

    let mut h_exact = true;
    let mut h2 = 0.0f64;
    for (gamma, eta, l) in [(0.1, 0.1, 1.0), (1.0, 0.01, 10.0), (0.5, 0.5, 2.0), (2.0, 0.3, 0.7)] {
        h_exact &= h_gap(0.0, gamma, eta, l) == 0.0 && h_gap(1.0, gamma, eta, l) == 0.0;
        h2 = h2.max(rel(h_gap(2.0, gamma, eta, l), eta * eta * l * gamma));
    }
    let ok = gap < 1e-4 && spread < 1e-12 && h_exact && h2 < 1e-12;
    report(
        3,
        "continuity and limits",
        ok,
        format!("theta=1±1e-6 gap {gap:.2e}, M=1 spread {spread:.2e}, H(0)=H(1)=0 {h_exact}, H(2) rel err {h2:.2e}"),
    );
}

fn random_dataset(s: &mut Stream, n: usize, dim: usize, labels: impl FnOnce(&mut Stream) -> Labels) -> Dataset {
    let features = (0..n * dim).map(|_| s.standard_normal()).collect();
    let labels = labels(s);
    Dataset::new(features, dim, labels).unwrap()
}

fn central_difference(model: &dyn Model, w: &ModelParams, data: &Dataset, i: usize, h: f64) -> f64 {
    let (mut up, mut down) = (w.clone(), w.clone());
    up.as_mut_slice()[i] += h;
    down.as_mut_slice()[i] -= h;
    (model.loss(&up, data).unwrap() - model.loss(&down, data).unwrap()) / (2.0 * h)
}

#[test]
fn a04_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut s = Stream::new(104, Purpose::Data, 4, 0);
    let h = 1e-5;

    let mlp = MlpArchitecture::new(6, 5, 4).unwrap();
    let (mut mlp_probes, mut mlp_worst) = (0, 0.0f64);
    for _ in 0..25 {
        let data = random_dataset(&mut s, 12, 6, |s| Labels::Classes {
            ids: (0..12).map(|_| s.below(4) as usize).collect(),
            num_classes: 4,
        });
        let w = ModelParams::from_vec((0..mlp.num_params()).map(|_| 0.5 * s.standard_normal()).collect());
        let g = mlp.gradient(&w, &data).unwrap();
        for _ in 0..6 {
            let i = s.below(mlp.num_params() as u64) as usize;
            mlp_worst = mlp_worst.max(rel(g.as_slice()[i], central_difference(&mlp, &w, &data, i, h)));
            mlp_probes += 1;
        }
    }

    let svm = LinearSvm::new(6, 0.05, HingeForm::Standard).unwrap();
    let (mut svm_probes, mut svm_worst, mut skipped) = (0, 0.0f64, 0);
    while svm_probes < 120 {
        let data = random_dataset(&mut s, 12, 6, |s| {
            Labels::Signs((0..12).map(|_| if s.next_f64() < 0.5 { -1.0 } else { 1.0 }).collect())
        });
        let w = ModelParams::from_vec((0..6).map(|_| s.standard_normal()).collect());
        // A kink within reach of the stencil makes the loss non-differentiable there.
        let near_kink = data
            .rows()
            .zip(match data.labels() {
                Labels::Signs(v) => v.iter(),
                _ => unreachable!(),
            })
            .any(|(x, y)| (1.0 - y * x.iter().zip(w.as_slice()).map(|(a, b)| a * b).sum::<f64>()).abs() < 1e-3);
        if near_kink {
            skipped += 1;
            continue;
        }
        let g = svm.gradient(&w, &data).unwrap();
        for i in 0..6 {
            svm_worst = svm_worst.max(rel(g.as_slice()[i], central_difference(&svm, &w, &data, i, h)));
            svm_probes += 1;
        }
    }
    let elapsed = start.elapsed();
    let ok = mlp_probes >= 100 && mlp_worst < 1e-5 && svm_worst < 1e-5 && within(elapsed, 30.0);
    report(
        4,
        "gradient suite",
        ok,
        format!(
            "MLP {mlp_probes} probes max rel err {mlp_worst:.2e}; SVM {svm_probes} probes max rel err {svm_worst:.2e} ({skipped} kink draws skipped); {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

fn random_bound_instance(s: &mut Stream, convex: bool) -> (BoundParams, ScheduleInputs) {
    loop {
        let smoothness = s.uniform(0.5, 5.0);
        let num_users = int_in(s, 10, 200);
        let num_sampled = int_in(s, 1, num_users);
        let params = BoundParams {
            smoothness,
            lipschitz: s.uniform(0.5, 2.0),
            step_size: s.uniform(0.05, 1.0) / smoothness,
            pl_constant: s.uniform(0.01, 0.5),
            dissimilarity: s.uniform(1.0, 3.0),
            divergence: s.uniform(0.0, 1.0),
            initial_gap: s.uniform(0.1, 10.0),
            num_users,
            num_sampled,
            total_iterations: int_in(s, 20, 300),
        };
        if params.validate().is_err() {
            continue;
        }
        let a = params.contraction();
        let theta = if convex { a + s.uniform(0.0, 0.3) } else { s.uniform(0.8, 1.2) };
        let inputs = ScheduleInputs {
            epsilon: s.uniform(0.5, 50.0),
            delta: log_uniform(s, 1e-6, 0.1),
            sample_ratio: num_sampled as f64 / num_users as f64,
            sensitivity: log_uniform(s, 1e-3, 0.1),
            theta,
        };
        if convex && !convexity_holds(&params, theta, 1.0) {
            continue;
        }
        return (params, inputs);
    }
}

#[test]
fn a05_bound_derivative_and_convexity() {
    let mut s = Stream::new(105, Purpose::Data, 5, 0);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (p, inputs) = random_bound_instance(&mut s, false);
        let m = s.uniform(1.0, p.total_iterations as f64);
        let h = 1e-5 * m;
        let fd = (objective(&p, &inputs, m + h).unwrap() - objective(&p, &inputs, m - h).unwrap()) / (2.0 * h);
        worst = worst.max(rel(bound_derivative(&p, &inputs, m).unwrap(), fd));
    }

    let (mut negative, mut checked) = (Vec::new(), 0);
    for i in 0..50 {
        let (p, inputs) = random_bound_instance(&mut s, true);
        let g: Vec<f64> = (1..=p.total_iterations).map(|m| convergence_bound(&p, &inputs, m, true).unwrap()).collect();
        for m in 2..p.total_iterations {
            let d2 = g[m] - 2.0 * g[m - 1] + g[m - 2];
            // Cancellation in the second difference is bounded by a few ulps of G.
            if d2 < -1e-12 * g[m - 1].abs() && negative.len() < 3 {
                negative.push(format!("instance {i} M={m} d2={d2:.3e}"));
            }
            checked += 1;
        }
    }
    let ok = worst < 1e-5 && negative.is_empty();
    report(
        5,
        "bound derivative",
        ok,
        format!("max rel err vs finite differences {worst:.2e} at 50 points; {checked} second differences checked, negatives: [{}]", negative.join("; ")),
    );
}

#[test]
fn a06_optimal_m_matches_grid() {
    let mut s = Stream::new(106, Purpose::Data, 6, 0);
    let (mut exact, mut neighbor, mut mismatches) = (0, 0, Vec::new());
    for i in 0..50 {
        let (p, inputs) = random_bound_instance(&mut s, true);
        let grid: Vec<f64> =
            (1..=p.total_iterations).map(|m| convergence_bound(&p, &inputs, m, true).unwrap()).collect();
        let argmin = 1 + (0..grid.len()).fold(0, |b, j| if grid[j] < grid[b] { j } else { b });
        let solved = optimal_m(&p, &inputs).unwrap();
        let (root, pick) = (solved.bisection_root.unwrap(), solved.bisection_m.unwrap());
        let tie = (grid[pick - 1] - grid[argmin - 1]).abs() <= 1e-12 * grid[argmin - 1].abs();
        if solved.m_star == argmin && pick == argmin {
            exact += 1;
        } else if solved.m_star == argmin && tie && (argmin as f64 - root).abs() < 1.0 {
            neighbor += 1;
        } else {
            mismatches.push(format!("#{i} grid {argmin} solver {} bisection {pick} root {root:.3}", solved.m_star));
        }
    }
    report(
        6,
        "optimal M solver",
        mismatches.is_empty(),
        format!("{exact} exact, {neighbor} rounding neighbors, mismatches: [{}]", mismatches.join("; ")),
    );
}

fn base_config() -> ExperimentConfig {
    ExperimentConfig::default()
}

fn prepared(config: &ExperimentConfig) -> Prepared {
    prepare(config).expect("synthetic data")
}

#[test]
fn a07_noise_free_convergence() {
    let start = Instant::now();
    let mut config = base_config();
    config.privacy.epsilon = Epsilon::INFINITE;
    config.federation.max_rounds = 30;
    let data = prepared(&config);
    let rows = cmd_sweep(&config, &data).unwrap();
    let accuracy = rows[0].train_accuracy.unwrap();
    let first = sweep_outcomes(&config, &data).unwrap();
    let second = sweep_outcomes(&config, &data).unwrap();
    let same = first.iter().zip(&second).all(|((_, a), (_, b))| {
        a.rounds == b.rounds && a.final_params == b.final_params && a.applied_variances == b.applied_variances
    });
    let elapsed = start.elapsed();
    let ok = accuracy >= 0.95 && same && within(elapsed, 60.0);
    report(
        7,
        "noise-free convergence",
        ok,
        format!(
            "U=100 K=10 tau=5 T=150: train accuracy {accuracy:.4}, rerun identical {same}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

const M_GRID: [usize; 10] = [5, 10, 15, 20, 25, 30, 35, 40, 45, 50];
const SEEDS: [u64; 3] = [1, 2, 3];

struct SweepResult {
    rows: Vec<SweepRow>,
    elapsed: Duration,
}

/// Runs the ε = 10 sweep over ϑ and the ϑ = 1.05 sweep over ε once for
/// both criteria that read it.
fn shape_sweep() -> &'static SweepResult {
    static CELL: OnceLock<SweepResult> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let mut config = base_config();
        config.sweep.max_rounds = M_GRID.to_vec();
        config.sweep.seeds = SEEDS.to_vec();
        let data = prepared(&config);

        config.sweep.theta = vec![0.95, 1.0, 1.05];
        config.sweep.epsilon = vec![Epsilon(10.0)];
        let mut rows = cmd_sweep(&config, &data).unwrap();

        config.sweep.theta = vec![1.05];
        config.sweep.epsilon = vec![Epsilon(5.0), Epsilon(20.0)];
        rows.extend(cmd_sweep(&config, &data).unwrap());
        SweepResult { rows, elapsed: start.elapsed() }
    })
}

/// Seed-averaged final test loss for each M of the grid.
fn loss_curve(rows: &[SweepRow], theta: f64, epsilon: f64) -> Vec<f64> {
    M_GRID
        .iter()
        .map(|&m| {
            let hits: Vec<f64> = rows
                .iter()
                .filter(|r| r.theta == theta && r.epsilon == epsilon && r.max_rounds == m)
                .map(|r| r.final_test_loss)
                .collect();
            assert_eq!(hits.len(), SEEDS.len());
            hits.iter().sum::<f64>() / hits.len() as f64
        })
        .collect()
}

fn argmin(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] < v[b] { i } else { b })
}

#[test]
fn a08_loss_is_u_shaped_in_m() {
    let sweep = shape_sweep();
    let mut ok = within(sweep.elapsed, 600.0);
    let mut detail = Vec::new();
    for theta in [0.95, 1.0, 1.05] {
        let curve = loss_curve(&sweep.rows, theta, 10.0);
        let i = argmin(&curve);
        let max = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = max - curve[i];
        let (first, last) = (curve[0], curve[curve.len() - 1]);
        let interior =
            i > 0 && i + 1 < curve.len() && first - curve[i] >= 0.05 * range && last - curve[i] >= 0.05 * range;
        ok &= interior;
        detail.push(format!("theta={theta}: min {:.3} at M={} (M=5 {first:.3}, M=50 {last:.3})", curve[i], M_GRID[i]));
    }
    report(8, "U-shape in M", ok, format!("{}; sweep {:.1}s", detail.join(", "), sweep.elapsed.as_secs_f64()));
}

#[test]
fn a09_optimal_m_grows_with_epsilon() {
    let sweep = shape_sweep();
    let stars: Vec<usize> =
        [5.0, 10.0, 20.0].iter().map(|&e| M_GRID[argmin(&loss_curve(&sweep.rows, 1.05, e))]).collect();
    let ok = stars.windows(2).all(|w| w[0] <= w[1]);
    report(9, "M* nondecreasing in epsilon", ok, format!("theta=1.05, M* at eps 5/10/20 = {stars:?}"));
}

#[test]
fn a10_online_adjustment() {
    let start = Instant::now();
    let mut config = base_config();
    config.privacy.theta = 1.05;
    config.privacy.epsilon = Epsilon(10.0);
    config.federation.max_rounds = 30;
    config.sweep.seeds = SEEDS.to_vec();
    config.adjustment.factor = 0.8;
    let data = prepared(&config);
    let plain = cmd_sweep(&config, &data).unwrap();
    config.adjustment.enabled = true;
    let adjusted = sweep_outcomes(&config, &data).unwrap();
    let adjusted_rows = cmd_sweep(&config, &data).unwrap();

    let monotone = adjusted.iter().all(|(_, o)| o.rounds.windows(2).all(|w| w[1].max_rounds <= w[0].max_rounds));
    let triggered = adjusted.iter().filter(|(_, o)| o.rounds.iter().any(|r| r.adjusted)).count();
    let budget = PrivacyBudget::new(10.0, 1e-3).unwrap();
    let deltas: Vec<f64> = adjusted
        .iter()
        .map(|(_, o)| {
            let account = MomentAccount::new(
                o.applied_variances.clone(),
                config.federation.num_sampled as f64 / config.federation.num_users as f64,
                o.sensitivity,
            )
            .unwrap();
            verify_account(&account, &budget).achieved_delta
        })
        .collect();
    let verified = deltas.iter().all(|&d| d <= budget.delta());
    let better = plain.iter().zip(&adjusted_rows).filter(|(p, a)| a.final_test_loss <= p.final_test_loss).count();
    let elapsed = start.elapsed();
    let ok = monotone && verified && better >= 2 && within(elapsed, 300.0);
    report(
        10,
        "online adjustment",
        ok,
        format!(
            "M' nonincreasing {monotone} ({triggered}/3 runs adjusted); achieved delta {:?} vs {}; adjusted loss <= unadjusted on {better}/3 seeds ({:?} vs {:?}); {:.1}s",
            deltas.iter().map(|d| format!("{d:.2e}")).collect::<Vec<_>>(),
            budget.delta(),
            adjusted_rows.iter().map(|r| format!("{:.3}", r.final_test_loss)).collect::<Vec<_>>(),
            plain.iter().map(|r| format!("{:.3}", r.final_test_loss)).collect::<Vec<_>>(),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn a11_noise_statistics() {
    let budget = PrivacyBudget::new(10.0, 1e-3).unwrap();
    let (dim, clients) = (1000, 100);
    let zeros = ModelParams::zeros(dim);
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for theta in [0.95, 1.05] {
        let schedule = NoiseSchedule::calibrate(&budget, 0.1, 1.0 / 60.0, 30, theta).unwrap();
        for m in [1, 10, 30] {
            let expected = schedule.variance_at_round(m).unwrap();
            assert!((expected - theta.powi(m as i32 - 1) * schedule.sigma0().powi(2)).abs() <= 1e-15 * expected);
            let (mut sum, mut sum_sq, mut n) = (0.0, 0.0, 0.0);
            for client in 0..clients {
                let mut stream = Stream::new(7, Purpose::Noise, client, m as u64);
                for &x in perturb(&zeros, expected, &mut stream).unwrap().as_slice() {
                    sum += x;
                    sum_sq += x * x;
                    n += 1.0;
                }
            }
            let mean = sum / n;
            let var = (sum_sq - n * mean * mean) / (n - 1.0);
            let err = rel(var, expected);
            worst = worst.max(err);
            detail.push(format!("theta={theta} m={m} rel err {err:.4}"));
        }
    }
    report(11, "noise statistics", worst < 0.05, format!("10^5 pooled draws each: {}", detail.join(", ")));
}
