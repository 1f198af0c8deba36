//! Acceptance checks. One line per check; names given on the command line
//! select checks by substring.

use std::collections::{BTreeMap, HashMap};
use std::process::ExitCode;
use std::time::Instant;

use mixlift::counterexample::{
    find_or_plant_trap, gambler_ruin_mc, gambler_ruin_probability, slowdown_audit, SegmentChainSpec, SlowdownConfig,
    TrapMode, TrapSearch,
};
use mixlift::entropic::{
    entropy_drift_audit, estimate_pihat, exact_weights, finite_weight, AuditConfig, PihatConfig, WeightMode,
    WeightQuery, WEIGHT_BUDGET,
};
use mixlift::exact::{half_step_identity, projection_identity};
use mixlift::invariant::{class_measures, nu_measure};
use mixlift::mixing::{cutoff_scan, mixing_profile, stationary_distribution, ScanChain, ScanConfig};
use mixlift::model::{
    build_lifted_kernel, demo_spec, max_entry_gap, model0_kernel, project_kernel, random_spec, LiftedKernel,
    IDENTITY_TOL,
};
use mixlift::quasitree::{
    coupled_generation, estimate_drift_entropy, estimate_escape_probability, renewal_statistics, run_regenerations,
    EntropyConfig, LazyQuasiTree,
};
use mixlift::rng::task_rng;
use mixlift::stats::Proportion;
use mixlift::topology::{detect_backtrack_by, loop_erase, loop_erase_by, sr_ball};
use mixlift::{Environment, MixtureSpec};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn projection_identity_check() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for n in [6, 12, 24, 48] {
        for seed in 0..100 {
            let spec = random_spec(n, seed);
            let env = Environment::sample(n, seed);
            let lift = build_lifted_kernel(&spec, &env).unwrap();
            let bar = project_kernel(&spec, &lift, &env).unwrap().bar;
            let direct = model0_kernel(&spec, &env).unwrap();
            worst = worst.max(max_entry_gap(&bar, &direct));
            cases += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(worst <= IDENTITY_TOL && secs < 10.0, format!("cases={cases} max_gap={worst:.2e} time={secs:.2}s"))
}

fn half_step_exact_check() -> Outcome {
    let mut cases = 0;
    let mut failures = 0;
    for n in [6, 12, 24] {
        for seed in 0..5 {
            for spec in [demo_spec(n).unwrap(), random_spec(n, seed)] {
                let env = Environment::sample(n, seed);
                let a = half_step_identity(&spec, &env).unwrap();
                let b = projection_identity(&spec, &env).unwrap();
                cases += 1;
                failures += usize::from(!a.holds()) + usize::from(!b.holds());
            }
        }
    }
    outcome(failures == 0, format!("cases={cases} mismatching={failures}"))
}

fn tv_monotone_projection_check() -> Outcome {
    let n = 96;
    let spec = demo_spec(n).unwrap();
    let (mut rises, mut inversions, mut curves) = (0, 0, 0);
    for seed in 0..20 {
        let env = Environment::sample(n, seed);
        let lift = build_lifted_kernel(&spec, &env).unwrap();
        let bar = project_kernel(&spec, &lift, &env).unwrap().bar;
        let pi = stationary_distribution(&lift.scp, 1e-14, 1_000_000).unwrap();
        let pi_bar = stationary_distribution(&bar, 1e-14, 1_000_000).unwrap();
        for x in [0, n / 2, n - 1] {
            let lifted = mixing_profile(&lift.scp, &pi, x, &[0.0], 300).unwrap().tv_curve;
            let projected = mixing_profile(&bar, &pi_bar, x, &[0.0], 300).unwrap().tv_curve;
            curves += 1;
            rises += lifted.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
            rises += projected.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
            inversions += projected.iter().zip(&lifted).filter(|(p, l)| **p > **l + 1e-12).count();
        }
    }
    outcome(rises == 0 && inversions == 0, format!("curves={curves} t<=300 increases={rises} projection_violations={inversions}"))
}

fn invariant_field_check() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_abs: f64 = 0.0;
    let mut interior = 0;
    let specs: [(&str, MixtureSpec); 2] =
        [("demo", demo_spec(24).unwrap()), ("segments", SegmentChainSpec::new(4, 0.05).unwrap().build().unwrap())];
    for (_, spec) in &specs {
        let pi = class_measures(spec.kernel()).unwrap().pi;
        let mut rng = task_rng(41, 0);
        for seed in 0..50 {
            let root = rng.random_range(0..spec.size());
            let mut tree = LazyQuasiTree::new(spec, root, seed);
            let rep = nu_measure(&mut tree, 4, &pi).unwrap();
            worst = worst.max(rep.residual_rel);
            worst_abs = worst_abs.max(rep.residual_abs);
            interior += rep.interior;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-12 && secs < 60.0,
        format!("trees=100 interior={interior} rel_residual={worst:.2e} abs_residual={worst_abs:.2e} time={secs:.1}s"),
    )
}

/// Remove any adjacent `(e, rev e)` pair, repeatedly, until none is left.
fn naive_erase(path: &[u8]) -> Vec<u8> {
    let mut cur = path.to_vec();
    loop {
        let hit = (0..cur.len().saturating_sub(1)).find(|&i| cur[i + 1] == cur[i] ^ 1);
        match hit {
            Some(i) => {
                cur.drain(i..i + 2);
            }
            None => return cur,
        }
    }
}

/// First end index of a window `f_1..f_l rev(f_l)..rev(f_1)` with distinct `f`.
fn naive_backtrack(path: &[u8], l: usize) -> Option<usize> {
    for j in 0..path.len() {
        for i in 0..=j {
            if j - i + 1 != 2 * l {
                continue;
            }
            let mut ok = true;
            for a in 0..l {
                for b in 0..a {
                    ok &= path[i + a] != path[i + b];
                }
                ok &= path[j - a] == path[i + a] ^ 1;
            }
            if ok {
                return Some(j);
            }
        }
    }
    None
}

fn loop_erasure_check() -> Outcome {
    // Three edges in two orientations: letter e and e ^ 1 are reverses.
    let mut checked = 0u64;
    let mut mismatches = 0u64;
    let mut path = Vec::new();
    for len in 0..=8u32 {
        for code in 0..6u64.pow(len) {
            path.clear();
            let mut c = code;
            for _ in 0..len {
                path.push((c % 6) as u8);
                c /= 6;
            }
            checked += 1;
            if loop_erase_by(&path, |e| e ^ 1) != naive_erase(&path) {
                mismatches += 1;
            }
            for l in 1..=4 {
                if detect_backtrack_by(&path, |e| e ^ 1, l) != naive_backtrack(&path, l) {
                    mismatches += 1;
                }
            }
        }
    }
    outcome(mismatches == 0, format!("sequences={checked} mismatches={mismatches}"))
}

/// Tick-by-tick propagation of path mass over (loop-erased stack, state).
fn path_sum(lift: &LiftedKernel, q: &WeightQuery) -> BTreeMap<usize, f64> {
    let cond = q.mode == WeightMode::Conditional;
    let avoid = lift.eta(q.x);
    let inside = |c: usize, y: usize| sr_ball(&lift.second_half, c, q.r - 1).contains_key(&y);
    let mut mass: HashMap<(Vec<usize>, usize), f64> = HashMap::from([((Vec::new(), q.x), 1.0)]);
    let mut out = BTreeMap::new();
    let mut tick = u64::from(cond);
    while mass.values().sum::<f64>() > 1e-15 && tick < 100_000 {
        let mut next: HashMap<(Vec<usize>, usize), f64> = HashMap::new();
        for ((stack, s), m) in mass {
            let moves: Vec<(usize, f64)> = if tick % 2 == 0 {
                vec![(s, lift.stay[s]), (lift.eta(s), 1.0 - lift.stay[s])]
            } else {
                lift.second_half.row(s).collect()
            };
            for (y, v) in moves {
                if v == 0.0 || (cond && y == avoid) {
                    continue;
                }
                let mut st = stack.clone();
                if tick % 2 == 0 && y != s {
                    st.push(s);
                    st = loop_erase(&st, lift);
                    if st.len() > stack.len() && st.len() == q.l {
                        *out.entry(st[0]).or_insert(0.0) += m * v;
                        continue;
                    }
                }
                let c = st.last().map_or(q.x, |&a| lift.eta(a));
                if inside(c, y) {
                    *next.entry((st, y)).or_insert(0.0) += m * v;
                }
            }
        }
        mass = next;
        tick += 1;
    }
    out
}

fn weight_normalization_check() -> Outcome {
    let n = 12;
    let mut rng = task_rng(61, 0);
    let (mut bases, mut over, mut ci_miss, mut exact_miss, mut compared) = (0, 0, 0, 0, 0);
    let mut worst_z: f64 = 0.0;
    for (seed, demo) in [(1u64, true), (2, false), (3, true)] {
        let spec = if demo { demo_spec(n).unwrap() } else { random_spec(n, seed) };
        let lift = build_lifted_kernel(&spec, &Environment::sample(n, seed)).unwrap();
        for x in 0..2 * n {
            for mode in [WeightMode::Plain, WeightMode::Conditional] {
                let q = WeightQuery { x, r: 2, l: 2, mode };
                let Ok(mc) = finite_weight(&lift, &q, 4000, 100_000, 100_000, &mut rng) else {
                    continue;
                };
                bases += 1;
                let (s, sigma) = mc.sum();
                if s > 1.0 + 3.0 * sigma {
                    over += 1;
                }
                let table = exact_weights(&lift, &q, WEIGHT_BUDGET).unwrap();
                let oracle = path_sum(&lift, &q);
                let total: f64 = oracle.values().sum();
                for (e, v) in &oracle {
                    if (table.raw.get(e).copied().unwrap_or(0.0) - v).abs() > 1e-10 {
                        exact_miss += 1;
                    }
                    let truth = if mode == WeightMode::Conditional { v / total } else { *v };
                    let est = mc.first.get(e).copied().unwrap_or(Proportion::new(0, mc.accepted));
                    let z = (est.estimate - truth).abs() / est.sigma.max(1e-9);
                    compared += 1;
                    worst_z = worst_z.max(z);
                    if (est.estimate - truth).abs() > 4.0 * est.sigma + 1e-9 {
                        ci_miss += 1;
                    }
                }
            }
        }
    }
    let pass = over == 0 && exact_miss == 0 && ci_miss == 0;
    outcome(
        pass,
        format!("bases={bases} sum_above_1+3sigma={over} exact_vs_enumeration_mismatch={exact_miss} edges={compared} outside_4sigma={ci_miss} worst_z={worst_z:.2}"),
    )
}

fn entropy_config(seed: u64) -> EntropyConfig {
    EntropyConfig { runs: 400, t_max: 4000, lookahead: 200, n_inner: 400, depth_horizon: 4, max_ticks: 20_000, seed }
}

fn cutoff_surrogate_check() -> Outcome {
    let start = Instant::now();
    let grid = [96, 192, 384, 768, 1536, 3072];
    let cfg = ScanConfig { eps: 0.25, seeds: 10, starts: 10, t_max: 20_000, chain: ScanChain::Projected, seed: 7 };
    let scan = cutoff_scan(demo_spec, &grid, &cfg).unwrap();
    let ratios: Vec<f64> = scan.records.iter().map(|r| r.window_ratio).collect();
    let decreasing = ratios.windows(2).all(|w| w[1] < w[0]);
    let big = *grid.last().unwrap();
    let est = estimate_drift_entropy(&demo_spec(big).unwrap(), &entropy_config(71)).unwrap();
    let last = scan.records.last().unwrap();
    let scaled = last.tmix_eps * est.h_hat / (big as f64).ln();
    let secs = start.elapsed().as_secs_f64();
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.4}")).collect();
    outcome(
        decreasing && (0.7..=1.3).contains(&scaled) && secs <= 1800.0,
        format!(
            "window_ratios=[{}] tmix={:.2} h_hat={:.5} tmix*h/log(n)={scaled:.4} time={secs:.0}s",
            shown.join(","),
            last.tmix_eps,
            est.h_hat
        ),
    )
}

fn drift_entropy_check() -> Outcome {
    let n = 4096;
    let spec = demo_spec(n).unwrap();
    let est = estimate_drift_entropy(&spec, &entropy_config(81)).unwrap();
    let lift = build_lifted_kernel(&spec, &Environment::sample(n, 81)).unwrap();
    let audit_cfg = AuditConfig { t: 240, r: 2, l: 2, runs: 200, checkpoints: 8, band: None, seed: 82 };
    let audit = entropy_drift_audit(&lift, None, &audit_cfg).unwrap();
    let h_gap = (est.h_hat - audit.h_hat).abs() / est.h_hat;
    let d_gap = (est.d_hat - est.d_direct).abs() / est.d_hat;
    outcome(
        h_gap <= 0.10 && d_gap <= 0.05,
        format!(
            "h_tree={:.5} h_finite={:.5} gap={:.3} d_regen={:.5} d_direct={:.5} gap={:.3}",
            est.h_hat, audit.h_hat, h_gap, est.d_hat, est.d_direct, d_gap
        ),
    )
}

fn renewal_check() -> Outcome {
    let n = 4096;
    let spec = demo_spec(n).unwrap();
    let mut runs = Vec::new();
    for seed in 0..240u64 {
        let mut rng = task_rng(seed, 91);
        let root = rng.random_range(0..spec.size());
        let mut tree = LazyQuasiTree::new(&spec, root, seed);
        runs.push(run_regenerations(&mut tree, 10_000, 200, &mut rng).records);
    }
    let k_grid: Vec<usize> = (10..=100).step_by(10).collect();
    let rep = renewal_statistics(&runs, 10_000.0, &k_grid, spec.size(), 20).unwrap();
    let rate_ok = (rep.rate_ratio - 1.0).abs() <= 0.02;
    let flat_ok = rep.var_flatness <= 2.0;
    let (alpha, r2) = rep.t_tail.map_or((f64::NAN, f64::NAN), |f| (f.alpha, f.r2));
    let tail_ok = alpha > 0.0 && alpha <= 1.0 && r2 >= 0.95;
    outcome(
        rate_ok && flat_ok && tail_ok,
        format!(
            "runs={} rate*mean_increment={:.4} var_flatness={:.3} tail_alpha={alpha:.3} tail_r2={r2:.4}",
            rep.runs, rep.rate_ratio, rep.var_flatness
        ),
    )
}

fn trap_slowdown_check() -> Outcome {
    let start = Instant::now();
    let chain = SegmentChainSpec::new(4096, 0.05).unwrap();
    let search = TrapSearch { budget: 0, plant_on_failure: true, seed: 5 };
    let (env, trap) = find_or_plant_trap(&chain, None, 5, &search).unwrap();
    let grid: Vec<u64> = (0..=8).map(|k| 10u64.pow(k)).collect();
    let cfg = SlowdownConfig { t_grid: grid, typical_starts: 4, eps: 0.25, check_every: 16, typical_env_seed: Some(5), seed: 6 };
    let audit = slowdown_audit(&chain.build().unwrap(), &env, &trap, &cfg).unwrap();
    let median = audit.ball_exit.median() as f64;
    let slow_ok = median >= 10.0 * audit.tmix_mean && median >= 0.1 / trap.r;
    let c = audit.ball_exit.c;
    let band_ok = (0.1..=10.0).contains(&c);
    let mut rng = task_rng(5, 101);
    let mut grid_ok = true;
    let mut worst_z: f64 = 0.0;
    for delta in [0.1, 0.2, 0.25, 0.3] {
        for l in [2, 3, 4] {
            let mc = gambler_ruin_mc(delta, l, 100_000, &mut rng);
            let z = (mc.estimate - gambler_ruin_probability(delta, l)).abs() / mc.sigma;
            worst_z = worst_z.max(z);
            grid_ok &= z <= 3.0;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        trap.mode == TrapMode::Planted && trap.isomorphic && slow_ok && band_ok && grid_ok && secs <= 600.0,
        format!(
            "r={:.3e} median_exit={median:.3e} tmix={:.3e} ratio={:.1} c_exit={c:.4} c_level={:.4} ruin_max_z={worst_z:.2} time={secs:.0}s",
            trap.r, audit.tmix_mean, audit.ratio, audit.level_hit.c
        ),
    )
}

fn coupling_check() -> Outcome {
    let n = 4096;
    let spec = demo_spec(n).unwrap();
    let runs = 10_000u64;
    let (mut failed, mut bound) = (0u64, 0.0);
    let mut rng = task_rng(111, 0);
    for seed in 0..runs {
        let x0 = rng.random_range(0..spec.size());
        let run = coupled_generation(&spec, x0, 4, 4, 10, seed).unwrap();
        failed += u64::from(run.t_coup.is_some_and(|t| t <= 10.0));
        bound += run.bound;
    }
    let fraction = failed as f64 / runs as f64;
    let bound = bound / runs as f64;
    outcome(fraction <= 2.0 * bound, format!("runs={runs} failure_fraction={fraction:.4} bound={bound:.3}"))
}

fn stationary_estimate_check() -> Outcome {
    let n = 4096;
    let spec = demo_spec(n).unwrap();
    let lift = build_lifted_kernel(&spec, &Environment::sample(n, 121)).unwrap();
    let pi = stationary_distribution(&lift.scp, 1e-13, 1_000_000).unwrap();
    let cfg = PihatConfig { big_l: 2, m: 40, s0: 240, samples: 100_000, lookahead: 20, max_wait: 200, seed: 122 };
    let est = estimate_pihat(&lift, &pi, &cfg).unwrap();
    outcome(
        est.tv <= 0.1,
        format!("samples={} accepted={} tv={:.4} mean_t1_m={:.2}", cfg.samples, est.accepted, est.tv, est.mean_t1_m),
    )
}

fn escape_structure_check() -> Outcome {
    let n = 4096;
    let spec = demo_spec(n).unwrap();
    let trees = 10_000u64;
    let mut rng = task_rng(131, 0);
    let mut q = Vec::with_capacity(trees as usize);
    for seed in 0..trees {
        let root = rng.random_range(0..spec.size());
        let mut tree = LazyQuasiTree::new(&spec, root, seed);
        q.push(estimate_escape_probability(&mut tree, 200, 100, &mut rng).unwrap().estimate);
    }
    let mut sorted = q.clone();
    sorted.sort_by(f64::total_cmp);
    // Largest q with P(q_hat >= q) >= q, scanning the sample values.
    let m = sorted.len() as f64;
    let q0 = sorted
        .iter()
        .enumerate()
        .filter(|&(i, &v)| (m - i as f64) / m >= v)
        .map(|(_, &v)| v)
        .fold(0.0, f64::max);
    let delta = spec.kernel().min_positive().min(0.5);
    let low = q.iter().filter(|&&v| v < q0 * delta.powi(4)).count() as f64 / m;
    let p = q0 * q0;
    let sigma = (p * (1.0 - p) / m).sqrt();
    outcome(
        q0 > 0.0 && low <= p + 3.0 * sigma,
        format!("trees={trees} q0={q0:.3} delta={delta} fraction_below={low:.4} bound={:.4}", p + 3.0 * sigma),
    )
}

type Check = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let checks: [Check; 13] = [
        ("projection_identity", projection_identity_check),
        ("half_step_exact", half_step_exact_check),
        ("tv_monotone_projection", tv_monotone_projection_check),
        ("invariant_field_balance", invariant_field_check),
        ("loop_erasure_backtrack", loop_erasure_check),
        ("weight_normalization", weight_normalization_check),
        ("cutoff_surrogate", cutoff_surrogate_check),
        ("drift_entropy_agreement", drift_entropy_check),
        ("renewal_statistics", renewal_check),
        ("trap_slowdown", trap_slowdown_check),
        ("coupling_failure_rate", coupling_check),
        ("stationary_estimate", stationary_estimate_check),
        ("escape_structure", escape_structure_check),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let out = check();
        ran += 1;
        failed += usize::from(!out.pass);
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        println!("{:>2} {name}: {verdict} {} [{:.1}s]", i + 1, out.detail, start.elapsed().as_secs_f64());
    }
    println!("acceptance: {} of {ran} passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
