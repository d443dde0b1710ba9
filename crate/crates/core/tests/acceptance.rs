//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs as `cargo test --test acceptance`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::Instant;

use gwcouple::cli::{
    check_marginals, run_indexed, summarize, CoupleArgs, CoupleKind, CouplingSpec, LawSpec,
    SampleKind,
};
use gwcouple::combinatorics::{count_trees, SizeDraw};
use gwcouple::kernels::{build_tree_kernel, grow_pushforward_is_uniform};
use gwcouple::params::OffspringParams;
use gwcouple::rng::RngStream;
use gwcouple::samplers::sample_lpair;
use gwcouple::tree::DTree;
use gwcouple::verify::{
    compare_counts, counterexample_demo, exact_window_law, lemma_suite, tv_distance, CompareConfig,
    LawId, WindowLaw,
};

const N: usize = 100_000;
const JOBS: usize = 1;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

/// Every `k`-vertex subtree containing the root, by adding one available
/// child at a time to each `(k−1)`-vertex tree and removing duplicates.
fn brute_force_count(d: u32, k: usize) -> usize {
    if k == 0 {
        return 1;
    }
    let mut level: HashSet<BTreeSet<Vec<u8>>> = HashSet::from([BTreeSet::from([Vec::new()])]);
    for _ in 1..k {
        let mut next = HashSet::new();
        for t in &level {
            for v in t {
                for i in 1..=d as u8 {
                    let mut c = v.clone();
                    c.push(i);
                    if !t.contains(&c) {
                        let mut s = t.clone();
                        s.insert(c);
                        next.insert(s);
                    }
                }
            }
        }
        level = next;
    }
    level.len()
}

fn criterion_1() -> Outcome {
    ensure(count_trees(2, 3) == 5u32.into(), "c_3(2) != 5")?;
    for d in [2, 3] {
        ensure(count_trees(d, 2) == d.into(), format!("c_2({d}) != {d}"))?;
    }
    for (d, kmax) in [(2, 10), (3, 8)] {
        for k in 0..=kmax {
            let brute = brute_force_count(d, k);
            ensure(
                count_trees(d, k) == brute.into(),
                format!("c_{k}({d}) differs from enumeration ({brute})"),
            )?;
        }
    }
    Ok("c_k(2), k ≤ 10 and c_k(3), k ≤ 8 match enumeration".into())
}

fn criterion_2() -> Outcome {
    for (d, kmax) in [(2, 10), (3, 7)] {
        for k in 0..kmax {
            let kernel = build_tree_kernel(d, k).map_err(|e| e.to_string())?;
            ensure(
                kernel.respects(|a, b| a.is_subtree_of(b)),
                format!("kernel d={d} k={k} leaves containment"),
            )?;
        }
    }
    for (d, kmax) in [(2, 8), (3, 6)] {
        for k in 0..kmax {
            ensure(
                grow_pushforward_is_uniform(d, k).map_err(|e| e.to_string())?,
                format!("grow pushforward d={d} k={k} not uniform"),
            )?;
        }
    }
    Ok(
        "flow saturates for k→k+1, k+1 ≤ 10 (d=2), ≤ 7 (d=3); chain marginals exactly uniform"
            .into(),
    )
}

fn criterion_3() -> Outcome {
    let r = counterexample_demo(
        &gwcouple::params::parse_rational("1/10").unwrap(),
        &gwcouple::params::parse_rational("1/5").unwrap(),
    )
    .map_err(|e| e.to_string())?;
    ensure(!r.conditioned_feasible, "conditioned laws coupled")?;
    ensure(
        r.certificate.is_some() && r.certificate_valid,
        "certificate missing or invalid",
    )?;
    ensure(r.unconditioned_feasible, "unconditioned laws not coupled")?;
    Ok(format!(
        "INFEASIBLE with valid certificate ({}); unconditioned feasible",
        r.certificate.unwrap()
    ))
}

fn criterion_4() -> Outcome {
    let report = lemma_suite();
    let failed: Vec<&str> = report
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    ensure(report.passed, format!("failed: {failed:?}"))?;
    Ok(format!("{} closed-form checks", report.checks.len()))
}

fn criterion_5() -> Outcome {
    let points: &[(SampleKind, u32, Option<&str>, Option<usize>)] = &[
        (SampleKind::Gw, 2, Some("1/2"), None),
        (SampleKind::Gw, 2, Some("3/4"), None),
        (SampleKind::Gw, 3, Some("1/3"), None),
        (SampleKind::Uniform, 2, None, Some(4)),
        (SampleKind::Uniform, 2, None, Some(7)),
        (SampleKind::Uniform, 3, None, Some(5)),
        (SampleKind::Iic, 2, None, None),
        (SampleKind::Iic, 3, None, None),
        (SampleKind::Iic, 2, None, None),
        (SampleKind::Tinf, 2, Some("3/5"), None),
        (SampleKind::Tinf, 2, Some("9/10"), None),
        (SampleKind::Tinf, 3, Some("1/2"), None),
        (SampleKind::Tstar, 2, Some("1/2"), None),
        (SampleKind::Tstar, 2, Some("3/4"), None),
        (SampleKind::Tstar, 2, Some("1"), None),
        (SampleKind::TstarPair, 3, Some("2/5"), None),
        (SampleKind::TstarPair, 3, Some("1/2"), None),
        (SampleKind::TstarPair, 3, Some("9/10"), None),
    ];
    let cfg = CompareConfig::default();
    let mut worst = 1.0f64;
    for (i, &(kind, d, p, k)) in points.iter().enumerate() {
        let depth = if d == 2 { 2 } else { 1 };
        // The repeated IIC point runs at a shallower window.
        let depth = if i == 8 { 1 } else { depth };
        let spec = LawSpec::new(kind, d, p, k, depth).map_err(|e| e.to_string())?;
        let base = RngStream::new(5000 + i as u64);
        let draws = run_indexed(N, JOBS, |j| spec.draw(&base.derive(j)))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let report = spec.check(&draws, &cfg).map_err(|e| e.to_string())?;
        ensure(
            report.pass,
            format!("{} d={d} p={p:?} k={k:?}: {report}", spec.name()),
        )?;
        worst = worst.min(report.p_value);
    }
    Ok(format!(
        "{} law/parameter points, N = {N}, smallest p-value {worst:.4}",
        points.len()
    ))
}

fn couple_args(
    kind: CoupleKind,
    d: u32,
    p1: &str,
    p2: &str,
    k: Option<usize>,
    depth: usize,
) -> CoupleArgs {
    CoupleArgs {
        kind,
        d,
        p1: Some(p1.into()),
        p2: Some(p2.into()),
        p: Some(p2.into()),
        k,
        depth,
        n: N,
        allow_degenerate: false,
        check: true,
        significance: 1e-3,
    }
}

/// Runs a coupling `n` times; checks containment and both marginals.
fn coupling_check(
    args: &CoupleArgs,
    seed: u64,
    n: usize,
    check_side1: bool,
) -> Result<String, String> {
    let spec = CouplingSpec::new(args).map_err(|e| e.to_string())?;
    let base = RngStream::new(seed);
    let runs = run_indexed(n, JOBS, |i| spec.run(&base.derive(i)))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let s = summarize(&runs);
    ensure(
        s.violations == 0,
        format!("{} containment violations", s.violations),
    )?;
    ensure(
        s.quarantine_rate < 0.01,
        format!("quarantine rate {}", s.quarantine_rate),
    )?;
    let (m1, m2) =
        check_marginals(&spec, &runs, &CompareConfig::default()).map_err(|e| e.to_string())?;
    ensure(!check_side1 || m1.pass, format!("side 1: {m1}"))?;
    ensure(m2.pass, format!("side 2: {m2}"))?;
    Ok(format!(
        "quarantine {:.4}, p-values {:.3}/{:.3}",
        s.quarantine_rate, m1.p_value, m2.p_value
    ))
}

fn criterion_6() -> Outcome {
    let mut parts = Vec::new();
    for (i, (p1, p2)) in [("1/2", "3/4"), ("3/5", "4/5"), ("3/4", "1")]
        .iter()
        .enumerate()
    {
        let args = couple_args(CoupleKind::Pair, 2, p1, p2, None, 2);
        parts.push(format!(
            "({p1},{p2}) {}",
            coupling_check(&args, 6000 + i as u64, N, true)?
        ));
    }
    Ok(format!("violations 0; {}", parts.join("; ")))
}

fn criterion_7() -> Outcome {
    let mut parts = Vec::new();
    for (i, (p1, p2)) in [("2/5", "7/10"), ("1/2", "9/10")].iter().enumerate() {
        let args = couple_args(CoupleKind::Pair, 3, p1, p2, None, 1);
        parts.push(format!(
            "({p1},{p2}) {}",
            coupling_check(&args, 7000 + i as u64, N, true)?
        ));
    }
    let grid = ["1/3", "2/5", "1/2", "7/10", "9/10", "1"];
    let params: Vec<OffspringParams> = grid
        .iter()
        .map(|p| OffspringParams::parse(3, p).unwrap())
        .collect();
    let mut r = RngStream::new(7100);
    let draws = 1_000_000;
    let mut bad = 0usize;
    for _ in 0..draws {
        let (u1, u2) = (r.uniform(), r.uniform());
        let pairs: Vec<(SizeDraw, SizeDraw)> =
            params.iter().map(|p| sample_lpair(p, u1, u2)).collect();
        if pairs.windows(2).any(|w| w[0].0 > w[1].0 || w[0].1 > w[1].1) {
            bad += 1;
        }
    }
    ensure(
        bad == 0,
        format!("(L*, L**) monotonicity failed in {bad} of {draws} draws"),
    )?;
    Ok(format!(
        "violations 0; {}; (L*,L**) monotone in {draws}/{draws} draws across {} densities",
        parts.join("; "),
        grid.len()
    ))
}

fn criterion_8() -> Outcome {
    let mut parts = Vec::new();
    for (i, p) in ["1/2", "1"].iter().enumerate() {
        let args = couple_args(CoupleKind::Critical, 3, "1/3", p, None, 1);
        let spec = CouplingSpec::new(&args).map_err(|e| e.to_string())?;
        let base = RngStream::new(8000 + i as u64);
        let runs = run_indexed(N, JOBS, |j| spec.run(&base.derive(j)))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let s = summarize(&runs);
        ensure(
            s.violations == 0,
            format!("p={p}: {} violations", s.violations),
        )?;
        let (_, m2) =
            check_marginals(&spec, &runs, &CompareConfig::default()).map_err(|e| e.to_string())?;
        ensure(m2.pass, format!("p={p}: p-side {m2}"))?;
        let iic = exact_window_law(&LawId::Iic, 3, 1).map_err(|e| e.to_string())?;
        let ok: Vec<_> = runs.iter().filter(|r| !r.quarantined).collect();
        let mut empirical = WindowLaw {
            d: 3,
            depth: 1,
            entries: BTreeMap::new(),
        };
        for r in &ok {
            *empirical.entries.entry(r.window1.clone()).or_insert(0.0) += 1.0 / ok.len() as f64;
        }
        let tv = tv_distance(&empirical, &iic);
        ensure(tv <= 0.03, format!("p={p}: critical side TV {tv}"))?;
        parts.push(format!(
            "p={p} TV {tv:.4}, quarantine {:.4}, pruned {}, instability {}",
            s.quarantine_rate, s.pruned, s.instability_rate
        ));
    }
    Ok(format!("violations 0; {}", parts.join("; ")))
}

fn criterion_9() -> Outcome {
    let per = 1_000_000 / 14 + 1;
    let mut total = 0;
    for (pi, p) in ["1/2", "7/10"].iter().enumerate() {
        let params = OffspringParams::parse(2, p).unwrap();
        for k in 0..=6usize {
            let base = RngStream::new(9000 + 10 * pi as u64 + k as u64);
            let runs = run_indexed(per, JOBS, |i| {
                gwcouple::couplings::couple_finite_in_infinite(&params, k, 2, &base.derive(i))
            })
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
            total += runs.len();
            let bad = runs
                .iter()
                .filter(|r| !r.quarantined && !r.contained)
                .count();
            ensure(bad == 0, format!("p={p} k={k}: {bad} violations"))?;
            let q = runs.iter().filter(|r| r.quarantined).count();
            ensure(
                (q as f64) < 0.01 * runs.len() as f64,
                format!("p={p} k={k}: quarantine {q}"),
            )?;
            let ok = || runs.iter().filter(|r| !r.quarantined);
            let support = gwcouple::tree::enumerate_all(2, k);
            let mass = 1.0 / support.len() as f64;
            let law: BTreeMap<DTree, f64> = support.into_iter().map(|t| (t, mass)).collect();
            let mut counts = BTreeMap::new();
            for r in ok() {
                let t = r.tree.clone().ok_or("full tree missing")?;
                *counts.entry(t).or_insert(0usize) += 1;
            }
            let cfg = CompareConfig::default();
            let uniform = compare_counts(&law, &counts, q, &cfg);
            ensure(uniform.pass, format!("p={p} k={k}: T_k {uniform}"))?;
            let exact = exact_window_law(&LawId::Tinf(params.p().clone()), 2, 2)
                .map_err(|e| e.to_string())?;
            let mut wc = BTreeMap::new();
            for r in ok() {
                *wc.entry(r.window.clone()).or_insert(0usize) += 1;
            }
            let window = compare_counts(&exact.entries, &wc, q, &cfg);
            ensure(window.pass, format!("p={p} k={k}: window {window}"))?;
        }
    }
    Ok(format!(
        "violations 0 over {total} runs; T_k uniform and T̃ windows pass"
    ))
}

fn gwc(args: &[&str], out: &std::path::Path) -> Result<Vec<u8>, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_gwc"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("GWC_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        status.status.success(),
        format!("gwc {args:?}: {}", String::from_utf8_lossy(&status.stderr)),
    )?;
    std::fs::read(out).map_err(|e| e.to_string())
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let commands: &[&[&str]] = &[
        &[
            "couple", "pair", "--d", "2", "--p1", "0.6", "--p2", "0.8", "--depth", "2", "--n",
            "2000", "--seed", "7",
        ],
        &[
            "couple", "pair", "--d", "3", "--p1", "0.4", "--p2", "0.7", "--depth", "1", "--n",
            "2000", "--seed", "7",
        ],
        &[
            "couple", "critical", "--d", "3", "--p", "0.5", "--depth", "1", "--n", "2000",
            "--seed", "7",
        ],
        &[
            "couple", "finite", "--d", "2", "--p", "0.7", "--k", "5", "--depth", "2", "--n",
            "2000", "--seed", "7",
        ],
        &[
            "sample",
            "tstar-pair",
            "--d",
            "3",
            "--p",
            "1/2",
            "--depth",
            "1",
            "--n",
            "2000",
            "--seed",
            "7",
        ],
        &[
            "chain", "--d", "2", "--kmax", "6", "--n", "500", "--seed", "7",
        ],
    ];
    for (i, c) in commands.iter().enumerate() {
        let a = gwc(c, &dir.path().join(format!("{i}a.jsonl")))?;
        let b = gwc(c, &dir.path().join(format!("{i}b.jsonl")))?;
        let mut threaded = c.to_vec();
        threaded.extend(["--jobs", "3"]);
        let t = gwc(&threaded, &dir.path().join(format!("{i}c.jsonl")))?;
        ensure(!a.is_empty(), format!("{c:?}: no records"))?;
        ensure(a == b, format!("{c:?}: reruns differ"))?;
        ensure(a == t, format!("{c:?}: --jobs 3 differs"))?;
    }
    Ok(format!(
        "{} commands byte-identical across reruns and job counts",
        commands.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("exact combinatorics", criterion_1),
        ("nested uniform chains", criterion_2),
        ("counterexample", criterion_3),
        ("lemma suite", criterion_4),
        ("sampler exactness", criterion_5),
        ("supercritical pair d=2", criterion_6),
        ("supercritical pair d=3", criterion_7),
        ("critical inside supercritical d=3", criterion_8),
        ("uniform tree inside T_inf d=2", criterion_9),
        ("reproducibility", criterion_10),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {id:>2} PASS [{secs:6.1}s] {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {id:>2} FAIL [{secs:6.1}s] {name}: {msg}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
