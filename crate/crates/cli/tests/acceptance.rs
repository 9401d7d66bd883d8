//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use cdlab_core::bessel::{pathwise_invariant_check, simulate, z_quantile, mean_estimate, Process, SdeConfig};
use cdlab_core::duality::{calibrate_y, duality_report, solve_primal_direct, DualOptions, DualSolver, DualityReport};
use cdlab_core::superhedge::{decomposition_residual, superhedge, Claim};
use cdlab_core::tree::{Clock, EventTree};
use cdlab_core::utility::{log_grid, UtilitySpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn fixture_tree(name: &str) -> EventTree {
    EventTree::load(fixtures().join(name)).expect("fixture tree")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed <= limit, || format!("runtime {elapsed:.2?} above {limit:?}"))
}

fn utilities() -> Vec<(&'static str, UtilitySpec)> {
    vec![
        ("log", UtilitySpec::log()),
        ("p=-1", UtilitySpec::power(-1.0).unwrap()),
        ("p=0.5", UtilitySpec::power(0.5).unwrap()),
        ("p=0.9", UtilitySpec::power(0.9).unwrap()),
    ]
}

/// Single-asset tree with 2 or 3 children per node, an up and a down move
/// everywhere (so a martingale measure exists) and a random clock.
fn random_tree(rng: &mut ChaCha8Rng) -> EventTree {
    let periods = rng.random_range(1..=3usize);
    let alpha = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..0.3) };
    let dt = if rng.random_bool(0.5) { 1.0 } else { 0.5 };
    let mut parents = vec![None];
    let mut probs = vec![1.0];
    let mut prices = vec![vec![1.0]];
    let mut frontier = vec![0usize];
    for _ in 0..periods {
        let mut next = Vec::new();
        for &n in &frontier {
            let s = prices[n][0];
            let k = rng.random_range(2..=3usize);
            let mut moves = vec![rng.random_range(1.05..1.8), rng.random_range(0.5..0.95)];
            if k == 3 {
                moves.push(rng.random_range(0.8..1.2));
            }
            let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
            let total: f64 = weights.iter().sum();
            for (m, w) in moves.iter().zip(&weights) {
                parents.push(Some(n));
                probs.push(w / total);
                prices.push(vec![s * m]);
                next.push(prices.len() - 1);
            }
        }
        frontier = next;
    }
    let clock = Clock::geometric(alpha, dt, periods).unwrap();
    EventTree::from_parts(parents, probs, prices, clock).unwrap()
}

fn random_utility(rng: &mut ChaCha8Rng) -> UtilitySpec {
    match rng.random_range(0..3) {
        0 => UtilitySpec::log(),
        1 => UtilitySpec::power(0.5).unwrap(),
        _ => UtilitySpec::power(-1.0).unwrap(),
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut lowest, mut worst_at_optimum) = (f64::INFINITY, 0.0f64);
    for (_, spec) in utilities() {
        for _ in 0..10_000 {
            let x = 10f64.powf(rng.random_range(-3.0..3.0));
            let y = 10f64.powf(rng.random_range(-3.0..3.0));
            lowest = lowest.min(spec.fenchel_gap(x, y).map_err(|e| e.to_string())?);
            let y_opt = spec.marginal(x).map_err(|e| e.to_string())?;
            worst_at_optimum = worst_at_optimum.max(spec.fenchel_gap(x, y_opt).map_err(|e| e.to_string())?.abs());
        }
    }
    let elapsed = start.elapsed();
    ensure(lowest >= -1e-12, || format!("min gap {lowest:e}"))?;
    ensure(worst_at_optimum <= 1e-10, || format!("gap at y = U'(x) {worst_at_optimum:e}"))?;
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!(
        "min gap {lowest:e}, max |gap| at y=U'(x) {worst_at_optimum:e}, {elapsed:.2?}"
    ))
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xs = log_grid(0.1, 10.0, 20);
    let ys = log_grid(0.05, 20.0, 20);
    let mut worst = f64::NEG_INFINITY;
    for i in 0..50 {
        let tree = random_tree(&mut rng);
        let spec = random_utility(&mut rng);
        let mut solver = DualSolver::new(&tree, &spec, DualOptions::default()).map_err(|e| format!("tree {i}: {e}"))?;
        let vs: Vec<f64> = ys
            .iter()
            .map(|&y| solver.solve(y).map(|s| s.value))
            .collect::<Result<_, _>>()
            .map_err(|e| format!("tree {i}: {e}"))?;
        for &x in &xs {
            let u = solve_primal_direct(&tree, &spec, x).map_err(|e| format!("tree {i}: {e}"))?.value;
            for (y, v) in ys.iter().zip(&vs) {
                worst = worst.max(u - v - x * y);
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(worst <= 1e-8, || format!("u - v - xy reaches {worst:e}"))?;
    within(elapsed, Duration::from_secs(60))?;
    Ok(format!("max u - v - xy {worst:e} over 50 trees x 400 points, {elapsed:.2?}"))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let tree = fixture_tree("binomial_1.json");
    let spec = UtilitySpec::log();
    let u = solve_primal_direct(&tree, &spec, 1.0).map_err(|e| e.to_string())?.value;
    let closed = -3.5 * 2f64.ln() + 3f64.ln();
    let y = calibrate_y(&tree, &spec, 1.0).map_err(|e| e.to_string())?.y_star;
    ensure((u - closed).abs() <= 1e-8, || format!("binomial u {u} vs {closed}"))?;
    ensure((y - 2.0).abs() <= 1e-8, || format!("binomial y* {y}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let tree = random_tree(&mut rng);
        let spec = random_utility(&mut rng);
        let x = rng.random_range(0.2..5.0);
        let cal = calibrate_y(&tree, &spec, x).map_err(|e| format!("tree {i}: {e}"))?;
        let u = solve_primal_direct(&tree, &spec, x).map_err(|e| format!("tree {i}: {e}"))?.value;
        worst = worst.max((u - cal.dual.value - x * cal.y_star).abs());
    }
    let elapsed = start.elapsed();
    ensure(worst <= 1e-7, || format!("|u - v - xy*| reaches {worst:e}"))?;
    within(elapsed, Duration::from_secs(120))?;
    Ok(format!(
        "binomial |u - closed form| {:e}, |y* - 2| {:e}; 20 random trees max |u - v - xy*| {worst:e}, {elapsed:.2?}",
        (u - closed).abs(),
        (y - 2.0).abs()
    ))
}

/// Fixture and random reports shared by criteria 4 and 5.
fn reports() -> Result<Vec<(String, EventTree, UtilitySpec, DualityReport)>, String> {
    let mut out = Vec::new();
    let names = [
        "binomial_1.json",
        "binomial_3.json",
        "binomial_discounted_2.json",
        "trinomial_2.json",
        "trinomial_3.json",
        "trinomial_skew_2.json",
        "two_asset_2.json",
    ];
    for name in names {
        for (label, spec) in utilities() {
            let tree = fixture_tree(name);
            let r = duality_report(&tree, &spec, 1.0).map_err(|e| format!("{name} {label}: {e}"))?;
            out.push((format!("{name} {label}"), tree, spec, r));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..20 {
        let tree = random_tree(&mut rng);
        let spec = random_utility(&mut rng);
        let x = rng.random_range(0.2..5.0);
        let r = duality_report(&tree, &spec, x).map_err(|e| format!("random {i}: {e}"))?;
        out.push((format!("random {i}"), tree, spec, r));
    }
    Ok(out)
}

fn criterion_4(cases: &[(String, EventTree, UtilitySpec, DualityReport)]) -> Outcome {
    let (mut pdc, mut budget) = (0.0f64, 0.0f64);
    for (name, tree, spec, r) in cases {
        let z = &r.deflator.values;
        let mut pairing = 0.0;
        for (n, node) in tree.nodes().iter().enumerate() {
            let c = r.plan.rates[n];
            let target = tree.clock().gamma(node.t) * r.y_star * z[n];
            let lhs = spec.marginal(c).map_err(|e| format!("{name}: {e}"))?;
            pdc = pdc.max(((lhs - target) / target).abs());
            pairing += node.path_prob * c * z[n] * tree.dt();
        }
        budget = budget.max((pairing - r.x).abs());
    }
    ensure(pdc <= 1e-9, || format!("relative U'(c) residual {pdc:e}"))?;
    ensure(budget <= 1e-10, || format!("|<c, Z> - x| {budget:e}"))?;
    Ok(format!("{} cases: U'(c) residual {pdc:e}, |<c,Z> - x| {budget:e}", cases.len()))
}

fn criterion_5(cases: &[(String, EventTree, UtilitySpec, DualityReport)]) -> Outcome {
    let (mut mart, mut terminal) = (0.0f64, 0.0f64);
    for (name, tree, _, r) in cases {
        let z = &r.deflator.values;
        let (x, c, dt) = (&r.wealth, &r.plan.rates, tree.dt());
        // M = X Z + consumption of strict ancestors, deflated
        let mut m = vec![0.0; tree.len()];
        for n in 0..tree.len() {
            let mut earlier = 0.0;
            let mut cur = tree.node(n).parent;
            while let Some(p) = cur {
                earlier += c[p] * z[p] * dt;
                cur = tree.node(p).parent;
            }
            m[n] = x[n] * z[n] + earlier;
        }
        for (n, node) in tree.nodes().iter().enumerate() {
            if node.children.is_empty() {
                continue;
            }
            let e: f64 = node.children.iter().map(|&k| tree.node(k).prob * m[k]).sum();
            mart = mart.max((e - m[n]).abs() / m[n].abs().max(1.0));
        }
        let mut profile: Vec<f64> = (0..=tree.horizon())
            .map(|t| {
                tree.nodes()
                    .iter()
                    .enumerate()
                    .filter(|(_, nd)| nd.t == t)
                    .map(|(n, nd)| nd.path_prob * x[n] * z[n])
                    .sum()
            })
            .collect();
        let post: f64 = tree
            .nodes()
            .iter()
            .enumerate()
            .filter(|(_, nd)| nd.children.is_empty())
            .map(|(n, nd)| nd.path_prob * (x[n] - c[n] * dt) * z[n])
            .sum();
        profile.push(post);
        ensure(profile.windows(2).all(|w| w[1] < w[0]), || {
            format!("{name}: potential not strictly decreasing {profile:?}")
        })?;
        terminal = terminal.max(post.abs());
    }
    ensure(mart <= 1e-10, || format!("martingale residual {mart:e}"))?;
    ensure(terminal <= 1e-10, || format!("terminal potential {terminal:e}"))?;
    Ok(format!(
        "{} cases: martingale residual {mart:e}, terminal potential {terminal:e}, all strictly decreasing",
        cases.len()
    ))
}

/// Extreme points of the one-step martingale measures of a single-asset
/// node: point masses on unchanged prices and two-point up/down mixtures.
fn vertices(t: &EventTree, n: usize) -> Vec<Vec<f64>> {
    let node = t.node(n);
    let s = node.prices[0];
    let p: Vec<f64> = node.children.iter().map(|&c| t.node(c).prices[0]).collect();
    let mut out = Vec::new();
    for i in 0..p.len() {
        if p[i] == s {
            let mut q = vec![0.0; p.len()];
            q[i] = 1.0;
            out.push(q);
        }
        for j in 0..p.len() {
            if p[i] > s && p[j] < s {
                let mut q = vec![0.0; p.len()];
                q[i] = (s - p[j]) / (p[i] - p[j]);
                q[j] = 1.0 - q[i];
                out.push(q);
            }
        }
    }
    out
}

/// Values of `E_q[b_tau]` over all stopping times and vertex choices.
fn reachable(t: &EventTree, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![b[n]];
    let node = t.node(n);
    if node.children.is_empty() {
        return out;
    }
    let sets: Vec<Vec<f64>> = node.children.iter().map(|&c| reachable(t, b, c)).collect();
    for q in vertices(t, n) {
        let mut acc = vec![0.0];
        for (qi, set) in q.iter().zip(&sets) {
            let mut next: Vec<f64> = acc.iter().flat_map(|a| set.iter().map(move |v| a + qi * v)).collect();
            next.sort_by(f64::total_cmp);
            next.dedup();
            acc = next;
        }
        out.extend(acc);
    }
    out
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let names = [
        "binomial_1.json",
        "binomial_3.json",
        "binomial_discounted_2.json",
        "trinomial_2.json",
        "trinomial_3.json",
        "trinomial_skew_2.json",
    ];
    let (mut cases, mut worst, mut structure) = (0, 0.0f64, 0.0f64);
    for name in names {
        let tree = fixture_tree(name);
        ensure(tree.horizon() <= 3 && tree.max_branching() <= 3 && tree.n_assets() == 1, || {
            format!("{name} outside the oracle's scope")
        })?;
        let mut targets: Vec<Vec<f64>> = Vec::new();
        for strike in [0.8, 1.0, 1.2] {
            for kind in ["put", "call", "american-put", "american-call"] {
                let claim: Claim = format!("{kind}:{strike}").parse().map_err(|e| format!("{e}"))?;
                targets.push(claim.target(&tree).map_err(|e| e.to_string())?);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..4 {
            targets.push((0..tree.len()).map(|_| rng.random_range(0.0..1.0)).collect());
        }
        for b in targets {
            let r = superhedge(&tree, &b).map_err(|e| format!("{name}: {e}"))?;
            let oracle = reachable(&tree, &b, 0).into_iter().fold(f64::NEG_INFINITY, f64::max);
            worst = worst.max((r.w0 - oracle).abs());
            let dominated = r.w.iter().zip(&b).all(|(w, bv)| *w >= bv - 1e-12);
            let increasing = (1..tree.len()).all(|n| r.a[n] >= r.a[tree.node(n).parent.unwrap()] - 1e-10);
            ensure(dominated && increasing && r.a[0] == 0.0, || format!("{name}: structure violated"))?;
            structure = structure.max(decomposition_residual(&tree, &r));
            cases += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(worst <= 1e-12, || format!("|W0 - oracle| {worst:e}"))?;
    ensure(structure <= 1e-10, || format!("decomposition residual {structure:e}"))?;
    within(elapsed, Duration::from_secs(60))?;
    Ok(format!(
        "{cases} targets: max |W0 - oracle| {worst:e}, decomposition residual {structure:e}, A nondecreasing, {elapsed:.2?}"
    ))
}

const PINNED_MEAN: f64 = 0.682815;
const PINNED_SE: f64 = 2.528e-4;

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let mut config = SdeConfig::new(0.1, 1.0, 1.0, 0.05, 100_000, 20_250_101);
    config.record_every = 20;
    let batch = simulate(&config).map_err(|e| e.to_string())?;
    let j = batch.time_index(1.0).map_err(|e| e.to_string())?;
    let est = mean_estimate(&batch.column(Process::Z0, j).map_err(|e| e.to_string())?, 0.99)
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let joint = z_quantile(0.99) * (est.std_err.powi(2) + PINNED_SE.powi(2)).sqrt();
    let diff = (est.mean - PINNED_MEAN).abs();
    ensure(est.ci_hi < 0.75, || format!("upper bound {}", est.ci_hi))?;
    ensure(diff <= joint, || format!("|{} - {PINNED_MEAN}| = {diff:e} > {joint:e}", est.mean))?;
    within(elapsed, Duration::from_secs(120))?;
    Ok(format!(
        "E[Z0_1] {:.6} (99% CI [{:.6}, {:.6}]), |est - pinned| {diff:.2e} <= {joint:.2e}, {elapsed:.2?}",
        est.mean, est.ci_lo, est.ci_hi
    ))
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let mut residuals = Vec::new();
    let (mut cons, mut defl) = (0.0f64, 0.0f64);
    for dt in [1e-2, 5e-3, 2.5e-3] {
        let config = SdeConfig::new(0.1, 1.0, 1.0, dt, 1_000, 8);
        let batch = simulate(&config).map_err(|e| e.to_string())?;
        let r = pathwise_invariant_check(&config, &batch).map_err(|e| e.to_string())?;
        cons = cons.max(r.consumption);
        defl = defl.max(r.deflated_wealth);
        let bound = config.alpha * config.x * dt;
        ensure(r.m_hat <= bound, || format!("dt {dt}: |M - x| {:e} > {bound:e}", r.m_hat))?;
        residuals.push(r.m_hat);
    }
    let slopes: Vec<f64> = residuals.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let elapsed = start.elapsed();
    ensure(cons <= 1e-12, || format!("|c - alpha X| {cons:e}"))?;
    ensure(defl <= 1e-12, || format!("|X Z0 - x e^(-alpha t)| {defl:e}"))?;
    ensure(slopes.iter().all(|s| (s - 2.0).abs() <= 0.2), || format!("slopes {slopes:?}"))?;
    within(elapsed, Duration::from_secs(60))?;
    let m: Vec<String> = residuals.iter().map(|r| format!("{r:.3e}")).collect();
    Ok(format!(
        "|c - aX| {cons:e}, |XZ0 - xe^-at| {defl:e}, |M - x| [{}], slopes {slopes:.3?}, {elapsed:.2?}",
        m.join(", ")
    ))
}

fn csv_bodies(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("output dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path).expect("csv"));
            }
        }
    }
    out
}

fn criterion_9() -> Outcome {
    let fx = fixtures();
    let f = |name: &str| fx.join(name).display().to_string();
    let runs: Vec<Vec<String>> = vec![
        vec!["tree-duality".into(), "--tree".into(), f("trinomial_2.json"), "--utility".into(), "power".into(), "--p".into(), "0.5".into()],
        vec!["tree-duality".into(), "--tree".into(), f("two_asset_2.json"), "--alpha".into(), "0.2".into()],
        vec!["superhedge".into(), "--tree".into(), f("trinomial_3.json"), "--claim".into(), "american-put:1".into()],
        vec!["superhedge".into(), "--tree".into(), f("binomial_1.json"), "--claim".into(), format!("consumption:{}", f("plan_binomial_1.json"))],
        vec!["bessel".into(), "--config".into(), f("bessel_log.toml")],
        vec!["bessel".into(), "--config".into(), f("bessel_power.toml")],
        vec!["conjugate".into(), "--utility".into(), "power".into(), "--p=-1".into()],
        vec!["sweep".into(), "--base".into(), f("sweep_bessel_alpha.toml"), "--axis".into(), "alpha=0.05,0.1,0.2".into()],
        vec!["sweep".into(), "--base".into(), f("sweep_tree_x.toml"), "--axis".into(), "x=0.5,1,2".into()],
    ];
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = 0;
    for (i, args) in runs.iter().enumerate() {
        let mut bodies = Vec::new();
        for rep in 0..2 {
            let out = tmp.path().join(format!("run{i}_{rep}"));
            let status = Command::new(env!("CARGO_BIN_EXE_cdlab"))
                .args(args)
                .args(["--seed", "17", "--out"])
                .arg(&out)
                .status()
                .map_err(|e| e.to_string())?;
            ensure(status.code() == Some(0), || format!("{} exited with {status}", args.join(" ")))?;
            bodies.push(csv_bodies(&out));
        }
        ensure(!bodies[0].is_empty(), || format!("{}: no CSV written", args[0]))?;
        ensure(bodies[0] == bodies[1], || format!("{} differs between runs", args.join(" ")))?;
        files += bodies[0].len();
    }
    Ok(format!("{} runs, {files} CSV files byte-identical across reruns", runs.len()))
}

fn report(n: usize, title: &str, outcome: std::thread::Result<Outcome>) -> bool {
    let (pass, detail) = match outcome {
        Ok(Ok(d)) => (true, d),
        Ok(Err(d)) => (false, d),
        Err(_) => (false, "panicked".to_string()),
    };
    println!("criterion {n}: {} {title}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() {
    use std::panic::catch_unwind;
    let mut ok = true;
    ok &= report(1, "Fenchel inequality", catch_unwind(criterion_1));
    ok &= report(2, "tree weak duality", catch_unwind(criterion_2));
    ok &= report(3, "tree strong duality", catch_unwind(criterion_3));
    match catch_unwind(reports) {
        Ok(Ok(cases)) => {
            ok &= report(4, "pointwise optimality", catch_unwind(|| criterion_4(&cases)));
            ok &= report(5, "optimal wealth structure", catch_unwind(|| criterion_5(&cases)));
        }
        other => {
            let detail = match other {
                Ok(Err(e)) => e,
                _ => "panicked".into(),
            };
            ok &= report(4, "pointwise optimality", Ok(Err(detail.clone())));
            ok &= report(5, "optimal wealth structure", Ok(Err(detail)));
        }
    }
    ok &= report(6, "superhedge minimality", catch_unwind(criterion_6));
    ok &= report(7, "Bessel strict local martingale", catch_unwind(criterion_7));
    ok &= report(8, "Bessel log-utility identities", catch_unwind(criterion_8));
    ok &= report(9, "CLI determinism", catch_unwind(criterion_9));
    if !ok {
        std::process::exit(1);
    }
}
