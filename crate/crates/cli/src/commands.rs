//! One function per subcommand. Each fills the experiment record, writes its
//! files into a fresh run directory and returns a one-line summary.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mixlift::counterexample::{find_or_plant_trap, slowdown_audit, SegmentChainSpec, SlowdownConfig, TrapSearch};
use mixlift::entropic::{
    entropy_drift_audit, estimate_pihat, explore_forward, nice_audit, AuditConfig, ForwardConfig, NiceConstants,
    NicePathConfig, PihatConfig, WeightCache,
};
use mixlift::invariant::{class_measures, nu_measure};
use mixlift::mixing::{cutoff_scan, mixing_profile, stationary_distribution, CutoffRecord, ScanChain, ScanConfig};
use mixlift::model::{build_lifted_kernel, project_kernel, validate_hypotheses};
use mixlift::quasitree::{
    estimate_drift_entropy, renewal_statistics, run_regenerations, EntropyConfig, LazyQuasiTree, RegenerationRecord,
};
use mixlift::rng::task_rng;
use mixlift::stats::linear_fit;
use mixlift::topology::kernel_degree;
use mixlift::{Environment, Error, StochasticMatrix};
use rand::Rng;
use serde::Serialize;

use crate::config::{parallel_map, ExperimentConfig};
use crate::output::{RunDir, DEFAULT_OUT, OUT_ENV};
use crate::source::{environment, SpecSource};
use crate::{ChainArg, Cli, Command, SpecArgs, EXIT_OK, EXIT_VALIDATION};

pub struct Outcome {
    pub summary: String,
    pub dir: PathBuf,
    pub code: u8,
}

fn out_root(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Stationary law tolerance and iteration cap.
const PI_TOL: f64 = 1e-13;
const PI_ITER: usize = 1_000_000;

struct Loaded {
    n: usize,
    spec: mixlift::MixtureSpec,
}

fn load(args: &SpecArgs, cfg: &mut ExperimentConfig) -> Result<Loaded> {
    let source = SpecSource::load(&args.spec)?;
    let n = args
        .n
        .or(source.default_n())
        .ok_or_else(|| Error::Invalid("a family spec needs --n".into()))?;
    let spec = source.build(n)?;
    cfg.spec = Some(args.spec.display().to_string());
    cfg.n_grid = vec![n];
    Ok(Loaded { n, spec })
}

fn constants(path: Option<&Path>) -> Result<NiceConstants> {
    match path {
        None => Ok(NiceConstants::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            Ok(NiceConstants::from_toml(&text)?)
        }
    }
}

fn chain_of(c: ChainArg) -> ScanChain {
    match c {
        ChainArg::Lifted => ScanChain::Lifted,
        ChainArg::Projected => ScanChain::Projected,
    }
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let root = out_root(cli);
    let name = command_name(&cli.command);
    let mut cfg = ExperimentConfig::new(name, root.display().to_string(), cli.seed, cli.workers.max(1));
    // Inputs are checked before the run directory exists.
    let work = prepare(cli, &mut cfg)?;
    let mut dir = RunDir::create(&root, name)?;
    let (summary, code) = work(&mut dir, &cfg)?;
    let dir = dir.finish(&cfg)?;
    Ok(Outcome { summary, dir, code })
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Validate { .. } => "validate",
        Command::GenEnv { .. } => "gen-env",
        Command::MixProfile { .. } => "mix-profile",
        Command::CutoffScan { .. } => "cutoff-scan",
        Command::QuasitreeStats { .. } => "quasitree-stats",
        Command::EstimateH { .. } => "estimate-h",
        Command::InvariantCheck { .. } => "invariant-check",
        Command::ForwardExplore { .. } => "forward-explore",
        Command::NiceAudit { .. } => "nice-audit",
        Command::Pihat { .. } => "pihat",
        Command::Counterexample { .. } => "counterexample",
    }
}

type Work = Box<dyn FnOnce(&mut RunDir, &ExperimentConfig) -> Result<(String, u8)>>;

/// Parse inputs and compute results; the returned closure writes them.
fn prepare(cli: &Cli, cfg: &mut ExperimentConfig) -> Result<Work> {
    let seed = cli.seed;
    let workers = cfg.workers;
    match &cli.command {
        Command::Validate { spec, l_max } => {
            let ld = load(spec, cfg)?;
            cfg.param("l_max", l_max);
            let rep = validate_hypotheses(&ld.spec, *l_max);
            #[derive(Serialize)]
            struct Row {
                l: usize,
                count: usize,
                fraction: f64,
            }
            let rows: Vec<Row> = rep.return_sets.iter().map(|&(l, count, fraction)| Row { l, count, fraction }).collect();
            let ok = rep.delta_ok && rep.degree_ok && rep.reach_ok;
            Ok(Box::new(move |dir, cfg| {
                dir.write_csv("return_sets.csv", &rows)?;
                dir.write_json("report.json", cfg, &rep)?;
                let verdict = if ok { "pass" } else { "fail" };
                let s = format!(
                    "validate: n={} delta={:.4} degree={} reach_min=({}, {}) {verdict}",
                    ld.n, rep.delta, rep.degree, rep.reach_min_side_one, rep.reach_min_side_two
                );
                Ok((s, if ok { EXIT_OK } else { EXIT_VALIDATION }))
            }))
        }
        Command::GenEnv { n } => {
            if *n == 0 {
                return Err(Error::Invalid("n must be positive".into()).into());
            }
            cfg.n_grid = vec![*n];
            let env = Environment::sample(*n, seed);
            #[derive(Serialize)]
            struct Row {
                state: usize,
                partner: usize,
            }
            let rows: Vec<Row> = env.sigma().iter().enumerate().map(|(state, &partner)| Row { state, partner }).collect();
            Ok(Box::new(move |dir, cfg| {
                dir.write_bytes("env.toml", env.to_toml().as_bytes())?;
                dir.write_csv("matching.csv", &rows)?;
                #[derive(Serialize)]
                struct Res {
                    n: usize,
                    seed: u64,
                    file: &'static str,
                }
                dir.write_json("summary.json", cfg, &Res { n: env.n, seed: env.seed, file: "env.toml" })?;
                Ok((format!("gen-env: n={} seed={}", env.n, env.seed), EXIT_OK))
            }))
        }
        Command::MixProfile { spec, env, starts, eps, t_max, chain } => {
            let ld = load(spec, cfg)?;
            cfg.param("starts", starts);
            cfg.param("eps", eps);
            cfg.param("t_max", t_max);
            cfg.param("chain", format!("{chain:?}").to_lowercase());
            cfg.param("env", env.env.as_ref().map(|p| p.display().to_string()));
            let e = environment(env.env.as_deref(), ld.n, seed)?;
            let lift = build_lifted_kernel(&ld.spec, &e)?;
            let k: StochasticMatrix = match chain {
                ChainArg::Lifted => lift.scp.clone(),
                ChainArg::Projected => project_kernel(&ld.spec, &lift, &e)?.bar,
            };
            let pi = stationary_distribution(&k, PI_TOL, PI_ITER)?;
            let profiles = parallel_map(starts.clone(), workers, |x| mixing_profile(&k, &pi, x, eps, *t_max))
                .into_iter()
                .collect::<mixlift::Result<Vec<_>>>()?;
            #[derive(Serialize)]
            struct Row {
                start: usize,
                t: usize,
                tv: f64,
            }
            #[derive(Serialize)]
            struct TRow {
                start: usize,
                eps: f64,
                t: Option<usize>,
            }
            let curve: Vec<Row> = profiles
                .iter()
                .flat_map(|p| p.tv_curve.iter().enumerate().map(|(t, &tv)| Row { start: p.start, t, tv }))
                .collect();
            let tmix: Vec<TRow> = profiles
                .iter()
                .flat_map(|p| p.tmix.iter().map(|m| TRow { start: p.start, eps: m.eps, t: m.t }))
                .collect();
            let censored = profiles.iter().filter(|p| p.censored).count();
            Ok(Box::new(move |dir, cfg| {
                dir.write_csv("profile.csv", &curve)?;
                dir.write_csv("tmix.csv", &tmix)?;
                #[derive(Serialize)]
                struct Res<'a> {
                    tmix: &'a [TRow],
                    censored: usize,
                }
                dir.write_json("summary.json", cfg, &Res { tmix: &tmix, censored })?;
                let first = tmix.first().and_then(|r| r.t).map_or("censored".to_string(), |t| t.to_string());
                Ok((format!("mix-profile: n={} starts={} tmix[0]={first} censored={censored}", ld.n, profiles.len()), EXIT_OK))
            }))
        }
        Command::CutoffScan { spec, n_grid, eps, seeds, starts, t_max, chain } => {
            let source = SpecSource::load(spec)?;
            cfg.spec = Some(spec.display().to_string());
            cfg.n_grid = n_grid.clone();
            cfg.param("eps", eps);
            cfg.param("seeds", seeds);
            cfg.param("starts", starts);
            cfg.param("t_max", t_max);
            cfg.param("chain", format!("{chain:?}").to_lowercase());
            let scan = ScanConfig { eps: *eps, seeds: *seeds, starts: *starts, t_max: *t_max, chain: chain_of(*chain), seed };
            let parts = parallel_map(n_grid.clone(), workers, |n| cutoff_scan(|m| source.build(m), &[n], &scan))
                .into_iter()
                .collect::<mixlift::Result<Vec<_>>>()?;
            let records: Vec<CutoffRecord> = parts.into_iter().flat_map(|p| p.records).collect();
            let xs: Vec<f64> = records.iter().map(|r| (r.n as f64).ln()).collect();
            let ys: Vec<f64> = records.iter().map(|r| r.tmix_eps).collect();
            let (h_hat, fit_r2) = if records.len() >= 2 {
                let f = linear_fit(&xs, &ys);
                (1.0 / f.slope, f.r2)
            } else {
                (f64::NAN, f64::NAN)
            };
            let window_constant = records.iter().map(|r| r.window_over_sqrt_log).fold(0.0, f64::max);
            Ok(Box::new(move |dir, cfg| {
                dir.write_csv("cutoff.csv", &records)?;
                #[derive(Serialize)]
                struct Res<'a> {
                    records: &'a [CutoffRecord],
                    h_hat: f64,
                    fit_r2: f64,
                    window_constant: f64,
                }
                dir.write_json("summary.json", cfg, &Res { records: &records, h_hat, fit_r2, window_constant })?;
                Ok((format!("cutoff-scan: sizes={} h_hat={h_hat:.5} r2={fit_r2:.4}", records.len()), EXIT_OK))
            }))
        }
        Command::QuasitreeStats { spec, runs, t_max, lookahead, k_grid, min_hits } => {
            let ld = load(spec, cfg)?;
            cfg.param("runs", runs);
            cfg.param("t_max", t_max);
            cfg.param("lookahead", lookahead);
            cfg.param("k_grid", k_grid);
            cfg.param("min_hits", min_hits);
            if k_grid.contains(&0) {
                return Err(Error::Invalid("k grid entries must be positive".into()).into());
            }
            let spec_ref = &ld.spec;
            let runs_out: Vec<Vec<RegenerationRecord>> = parallel_map((0..*runs).collect(), workers, |i| {
                let tree_seed = mixlift::rng::child_key(seed, i);
                let mut rng = task_rng(tree_seed, 91);
                let root = rng.random_range(0..spec_ref.size());
                let mut tree = LazyQuasiTree::new(spec_ref, root, tree_seed);
                run_regenerations(&mut tree, *t_max, *lookahead, &mut rng).records
            });
            let rep = renewal_statistics(&runs_out, *t_max as f64, k_grid, ld.spec.size(), *min_hits)?;
            #[derive(Serialize)]
            struct Row {
                run: usize,
                k: usize,
                y: usize,
                t: f64,
                l: usize,
            }
            let rows: Vec<Row> = runs_out
                .iter()
                .enumerate()
                .flat_map(|(run, r)| r.iter().map(move |x| Row { run, k: x.k, y: x.y, t: x.t, l: x.l }))
                .collect();
            Ok(Box::new(move |dir, cfg| {
                dir.write_csv("regenerations.csv", &rows)?;
                dir.write_json("renewal.json", cfg, &rep)?;
                Ok((
                    format!(
                        "quasitree-stats: runs={} records={} rate_ratio={:.4} var_flatness={:.3}",
                        rep.runs, rep.records, rep.rate_ratio, rep.var_flatness
                    ),
                    EXIT_OK,
                ))
            }))
        }
        Command::EstimateH { spec, env, runs, t_max, lookahead, n_inner, depth_horizon, max_ticks, audit_t, audit_runs, r, big_l } => {
            let ld = load(spec, cfg)?;
            cfg.param("runs", runs);
            cfg.param("t_max", t_max);
            cfg.param("lookahead", lookahead);
            cfg.param("n_inner", n_inner);
            cfg.param("depth_horizon", depth_horizon);
            cfg.param("max_ticks", max_ticks);
            cfg.param("audit_t", audit_t);
            cfg.param("audit_runs", audit_runs);
            cfg.param("env", env.env.as_ref().map(|p| p.display().to_string()));
            cfg.r = Some(*r);
            cfg.big_l = Some(*big_l);
            let ecfg = EntropyConfig {
                runs: *runs,
                t_max: *t_max,
                lookahead: *lookahead,
                n_inner: *n_inner,
                depth_horizon: *depth_horizon,
                max_ticks: *max_ticks,
                seed,
            };
            let est = estimate_drift_entropy(&ld.spec, &ecfg)?;
            let audit = match audit_t {
                None => None,
                Some(t) => {
                    let e = environment(env.env.as_deref(), ld.n, seed)?;
                    let lift = build_lifted_kernel(&ld.spec, &e)?;
                    let acfg = AuditConfig { t: *t, r: *r, l: *big_l, runs: *audit_runs, checkpoints: 8, band: None, seed };
                    Some(entropy_drift_audit(&lift, None, &acfg)?)
                }
            };
            #[derive(Serialize)]
            struct Row {
                source: &'static str,
                d_hat: f64,
                h_hat: f64,
            }
            let mut rows = vec![Row { source: "tree", d_hat: est.d_hat, h_hat: est.h_hat }];
            if let Some(a) = &audit {
                rows.push(Row { source: "finite", d_hat: a.d_hat, h_hat: a.h_hat });
            }
            #[derive(Serialize)]
            struct ARow {
                run: u64,
                start: usize,
                time: f64,
                xi_len: usize,
                neg_log_w: f64,
            }
            let arows: Vec<ARow> = audit
                .iter()
                .flat_map(|a| a.runs.iter())
                .flat_map(|r| {
                    r.curve.iter().map(move |p| ARow { run: r.run, start: r.start, time: p.time, xi_len: p.xi_len, neg_log_w: p.neg_log_w })
                })
                .collect();
            Ok(Box::new(move |dir, cfg| {
                dir.write_csv("estimate.csv", &rows)?;
                if audit.is_some() {
                    dir.write_csv("audit.csv", &arows)?;
                }
                #[derive(Serialize)]
                struct Res<'a> {
                    tree: &'a mixlift::quasitree::DriftEntropyEstimate,
                    audit: Option<&'a mixlift::entropic::AuditReport>,
                }
                dir.write_json("summary.json", cfg, &Res { tree: &est, audit: audit.as_ref() })?;
                let mut s = format!("estimate-h: h_hat={:.5} d_hat={:.5}", est.h_hat, est.d_hat);
                if let Some(a) = &audit {
                    s.push_str(&format!(" finite h={:.5} d={:.5}", a.h_hat, a.d_hat));
                }
                Ok((s, EXIT_OK))
            }))
        }
        Command::InvariantCheck { spec, trees, depth, tol } => {
            let ld = load(spec, cfg)?;
            cfg.param("trees", trees);
            cfg.param("depth", depth);
            cfg.param("tol", tol);
            let pi = class_measures(ld.spec.kernel())?.pi;
            let spec_ref = &ld.spec;
            #[derive(Serialize)]
            struct Row {
                tree: u64,
                root: usize,
                vertices: usize,
                interior: usize,
                residual_abs: f64,
                residual_rel: f64,
                z_alternative_gap: f64,
            }
            let rows = parallel_map((0..*trees).collect(), workers, |i| {
                let tree_seed = mixlift::rng::child_key(seed, i);
                let root = task_rng(tree_seed, 7).random_range(0..spec_ref.size());
                let mut tree = LazyQuasiTree::new(spec_ref, root, tree_seed);
                nu_measure(&mut tree, *depth, &pi).map(|rep| Row {
                    tree: i,
                    root,
                    vertices: rep.vertices.len(),
                    interior: rep.interior,
                    residual_abs: rep.residual_abs,
                    residual_rel: rep.residual_rel,
                    z_alternative_gap: rep.z_alternative_gap,
                })
            })
            .into_iter()
            .collect::<mixlift::Result<Vec<_>>>()?;
            let worst = rows.iter().map(|r| r.residual_rel).fold(0.0, f64::max);
            let ok = worst <= *tol;
            Ok(Box::new(move |dir, cfg| {
                dir.write_csv("balance.csv", &rows)?;
                #[derive(Serialize)]
                struct Res {
                    trees: usize,
                    worst_relative_residual: f64,
                    pass: bool,
                }
                dir.write_json("summary.json", cfg, &Res { trees: rows.len(), worst_relative_residual: worst, pass: ok })?;
                let verdict = if ok { "pass" } else { "fail" };
                Ok((format!("invariant-check: trees={} worst_rel={worst:.3e} {verdict}", rows.len()), if ok { EXIT_OK } else { EXIT_VALIDATION }))
            }))
        }
        Command::ForwardExplore { spec, env, x, l1, w_min, r, big_l, budget, constants: cpath } => {
            let ld = load(spec, cfg)?;
            let c = constants(cpath.as_deref())?;
            cfg.r = Some(*r);
            cfg.big_l = Some(*big_l);
            cfg.constants = Some(c);
            cfg.param("x", x);
            cfg.param("l1", l1);
            cfg.param("w_min", w_min);
            cfg.param("budget", budget);
            cfg.param("env", env.env.as_ref().map(|p| p.display().to_string()));
            let e = environment(env.env.as_deref(), ld.n, seed)?;
            let lift = build_lifted_kernel(&ld.spec, &e)?;
            if *x >= lift.size() {
                return Err(Error::Invalid(format!("start {x} outside 0..{}", lift.size())).into());
            }
            let mut cache = WeightCache::new(&lift, *r, *big_l);
            let fcfg = ForwardConfig { eps: c.eps, c_kappa: c.c_kappa, budget: *budget };
            let k = explore_forward(&mut cache, *x, *l1, *w_min, &fcfg)?;
            let dump = k.dump();
            let summary = format!("forward-explore: x={x} comps={} kappa={} stop={:?}", k.comps.len(), k.kappa, k.stop);
            Ok(Box::new(move |dir, cfg| {
                dir.write_bytes("components.csv", dump.as_bytes())?;
                dir.write_json("neighbourhood.json", cfg, &k)?;
                Ok((summary, EXIT_OK))
            }))
        }
        Command::NiceAudit { spec, env, h, d, r, big_l, m, runs, budget, constants: cpath } => {
            let ld = load(spec, cfg)?;
            let c = constants(cpath.as_deref())?;
            cfg.r = Some(*r);
            cfg.big_l = Some(*big_l);
            cfg.m = Some(*m);
            cfg.constants = Some(c);
            cfg.param("h", h);
            cfg.param("d", d);
            cfg.param("runs", runs);
            cfg.param("budget", budget);
            cfg.param("env", env.env.as_ref().map(|p| p.display().to_string()));
            let e = environment(env.env.as_deref(), ld.n, seed)?;
            let lift = build_lifted_kernel(&ld.spec, &e)?;
            let ncfg = NicePathConfig::new(ld.n, *h, *d, kernel_degree(&lift), *r, *big_l, *m, c)?;
            let mut cache = WeightCache::new(&lift, *r, *big_l);
            let audit = nice_audit(&mut cache, &ncfg, *runs, seed, *budget)?;
            #[derive(Serialize)]
            struct Row {
                run: u64,
                start: usize,
                nice: bool,
                kappa: usize,
                reasons: String,
            }
            let rows: Vec<Row> = audit
                .runs
                .iter()
                .map(|a| Row {
                    run: a.run,
                    start: a.start,
                    nice: a.verdict.nice,
                    kappa: a.kappa,
                    reasons: a.verdict.reasons.iter().map(|r| format!("{r:?}")).collect::<Vec<_>>().join(";"),
                })
                .collect();
            Ok(Box::new(move |dir, cfg| {
                dir.write_csv("runs.csv", &rows)?;
                dir.write_json("summary.json", cfg, &audit)?;
                Ok((format!("nice-audit: runs={} fraction={:.4}", rows.len(), audit.fraction), EXIT_OK))
            }))
        }
        Command::Pihat { spec, env, big_l, m, s0, samples, lookahead, max_wait } => {
            let ld = load(spec, cfg)?;
            cfg.big_l = Some(*big_l);
            cfg.m = Some(*m);
            cfg.param("s0", s0);
            cfg.param("samples", samples);
            cfg.param("lookahead", lookahead);
            cfg.param("max_wait", max_wait);
            cfg.param("env", env.env.as_ref().map(|p| p.display().to_string()));
            let e = environment(env.env.as_deref(), ld.n, seed)?;
            let lift = build_lifted_kernel(&ld.spec, &e)?;
            let pi = stationary_distribution(&lift.scp, PI_TOL, PI_ITER)?;
            let pcfg = PihatConfig {
                big_l: *big_l,
                m: *m,
                s0: *s0,
                samples: *samples,
                lookahead: *lookahead,
                max_wait: *max_wait,
                seed,
            };
            let est = estimate_pihat(&lift, &pi, &pcfg)?;
            #[derive(Serialize)]
            struct Row {
                state: usize,
                pi: f64,
                pihat: f64,
            }
            let rows: Vec<Row> = pi.iter().zip(&est.pihat).enumerate().map(|(state, (&pi, &pihat))| Row { state, pi, pihat }).collect();
            Ok(Box::new(move |dir, cfg| {
                dir.write_csv("pihat.csv", &rows)?;
                #[derive(Serialize)]
                struct Res<'a> {
                    tv: f64,
                    accepted: u64,
                    attempts: u64,
                    acceptance: f64,
                    mean_t1_m: f64,
                    mass: f64,
                    proxy: &'a str,
                }
                let res = Res {
                    tv: est.tv,
                    accepted: est.accepted,
                    attempts: est.attempts,
                    acceptance: est.acceptance,
                    mean_t1_m: est.mean_t1_m,
                    mass: est.mass,
                    proxy: &est.proxy,
                };
                dir.write_json("summary.json", cfg, &res)?;
                Ok((format!("pihat: samples={} accepted={} tv={:.4}", pcfg.samples, est.accepted, est.tv), EXIT_OK))
            }))
        }
        Command::Counterexample { delta, l, copies, plant, budget, t_exp, typical_starts, eps, no_escape } => {
            let chain = SegmentChainSpec::new(*copies, *delta)?;
            cfg.spec = Some(format!("segments(delta = {delta})"));
            cfg.n_grid = vec![chain.n()];
            cfg.big_l = Some(*l);
            cfg.param("copies", copies);
            cfg.param("plant", plant);
            cfg.param("budget", budget);
            let search = TrapSearch { budget: *budget, plant_on_failure: *plant, seed };
            let (env, trap) = find_or_plant_trap(&chain, None, *l, &search)?;
            let slow = if *no_escape {
                None
            } else {
                let typical_env_seed = mixlift::rng::child_key(seed, 1);
                let scfg = SlowdownConfig {
                    t_grid: (0..=*t_exp).map(|k| 10u64.pow(k)).collect(),
                    typical_starts: *typical_starts,
                    eps: *eps,
                    check_every: 16,
                    typical_env_seed: Some(typical_env_seed),
                    seed: mixlift::rng::child_key(seed, 2),
                };
                cfg.param("slowdown", &scfg);
                Some(slowdown_audit(&chain.build()?, &env, &trap, &scfg)?)
            };
            #[derive(Serialize)]
            struct Row {
                curve: &'static str,
                t: u64,
                survival: f64,
            }
            let rows: Vec<Row> = slow
                .iter()
                .flat_map(|s| {
                    let a = s.ball_exit.survival.iter().map(|&(t, survival)| Row { curve: "ball_exit", t, survival });
                    let b = s.level_hit.survival.iter().map(|&(t, survival)| Row { curve: "level_hit", t, survival });
                    a.chain(b)
                })
                .collect();
            Ok(Box::new(move |dir, cfg| {
                dir.write_bytes("env.toml", env.to_toml().as_bytes())?;
                dir.write_json("trap.json", cfg, &trap)?;
                let mut s = format!(
                    "counterexample: n={} depth={} mode={:?} isomorphic={} r={:.3e}",
                    trap.n, trap.depth, trap.mode, trap.isomorphic, trap.r
                );
                if let Some(sl) = &slow {
                    dir.write_csv("escape.csv", &rows)?;
                    dir.write_json("slowdown.json", cfg, sl)?;
                    s.push_str(&format!(" median_exit={} tmix={:.1}", sl.ball_exit.median(), sl.tmix_mean));
                }
                Ok((s, EXIT_OK))
            }))
        }
    }
}
