//! The `gwc` command-line front end.
//!
//! Every randomized command draws sample `i` from `RngStream::new(seed).derive(i)`,
//! so output is a function of the seed and the arguments only; `--jobs`
//! splits the index range across threads and results are merged in index
//! order. Per-sample JSON-lines records go to `--out`; the summary (or the
//! requested table) goes to stdout.
//!
//! Exit codes: 0 all checks passed, 1 statistical failure, 2 invariant
//! violation, 3 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::combinatorics::{
    count_trees, eta_exact, eta_inf, eta_law, f_of_p, lpair_law, lstar_law, split_law,
    DEFAULT_CUTOFF,
};
use crate::couplings::{
    couple_chain, couple_critical_supercritical, couple_finite_in_infinite,
    couple_supercritical_pair, couple_supercritical_pair_d3, CoupledWindows,
};
use crate::error::{Error, Result};
use crate::params::{parse_rational, rational_to_string, OffspringParams};
use crate::rng::RngStream;
use crate::samplers::{
    sample_gw_window, sample_iic, sample_tinf, sample_tstar_pair, sample_tstar_window,
    sample_uniform_k,
};
use crate::tree::{enumerate_all, DTree, VertexLabel, WindowJson, WindowedTree};
use crate::verify::{
    compare_counts, counterexample_demo, exact_window_law, lemma_suite, tstar_pair_window_law,
    CompareConfig, LawId, TestReport,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_STATISTICAL: i32 = 1;
pub const EXIT_INVARIANT: i32 = 2;
pub const EXIT_USAGE: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "gwc",
    version,
    about = "Monotone couplings of binomial Galton-Watson trees conditioned on survival"
)]
pub struct Cli {
    /// Seed for randomized commands; falls back to GWC_SEED, then to a fresh
    /// seed which is printed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// File of `key = value` lines supplying defaults for long options.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads. Output does not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Write per-sample JSON-lines records to this file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Number of k-vertex subtrees containing the root, c_k(d).
    Count {
        #[arg(long, default_value_t = 2)]
        d: u32,
        #[arg(long)]
        k: usize,
        /// Print every k' ≤ k.
        #[arg(long)]
        upto: bool,
    },
    /// Size laws, f(p) and exact window laws.
    Dist(DistArgs),
    /// Draw windows of a tree law.
    Sample(SampleArgs),
    /// Nested uniform chains T_0 ⊂ T_1 ⊂ … ⊂ T_kmax.
    Chain(ChainArgs),
    /// Run a coupling and check containment.
    Couple(CoupleArgs),
    /// Lemma checks, the counterexample and window-law tests.
    Verify(VerifyArgs),
    /// Graphviz DOT of a tree, a window or a coupled pair.
    Render(RenderArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DistKind {
    Eta,
    EtaInf,
    F,
    Lstar,
    Lpair,
    Split,
    Window,
}

#[derive(Args, Debug)]
pub struct DistArgs {
    pub kind: DistKind,
    #[arg(long)]
    pub d: Option<u32>,
    #[arg(long)]
    pub p: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Largest size listed in a size law.
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    pub cutoff: usize,
    /// Law name for `dist window` (gw, uniform, iic, tinf, tstar).
    #[arg(long)]
    pub law: Option<String>,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SampleKind {
    Gw,
    Uniform,
    Iic,
    Tinf,
    Tstar,
    TstarPair,
}

#[derive(Args, Debug, Clone)]
pub struct SampleArgs {
    pub law: SampleKind,
    #[arg(long, default_value_t = 2)]
    pub d: u32,
    #[arg(long)]
    pub p: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Compare the sample with the exact window law.
    #[arg(long)]
    pub check: bool,
    #[arg(long, default_value_t = 1e-3)]
    pub significance: f64,
}

#[derive(Args, Debug)]
pub struct ChainArgs {
    #[arg(long, default_value_t = 2)]
    pub d: u32,
    #[arg(long)]
    pub kmax: usize,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub significance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CoupleKind {
    /// T_∞(p1) ⊆ T_∞(p2).
    Pair,
    /// T_∞(1/3) ⊆ T_∞(p), d = 3.
    Critical,
    /// T_k ⊆ T_∞(p).
    Finite,
}

#[derive(Args, Debug, Clone)]
pub struct CoupleArgs {
    pub kind: CoupleKind,
    #[arg(long, default_value_t = 2)]
    pub d: u32,
    #[arg(long)]
    pub p1: Option<String>,
    #[arg(long)]
    pub p2: Option<String>,
    #[arg(long)]
    pub p: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Accept p1 = p2.
    #[arg(long)]
    pub allow_degenerate: bool,
    /// Compare both marginal windows with their exact laws.
    #[arg(long)]
    pub check: bool,
    #[arg(long, default_value_t = 1e-3)]
    pub significance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VerifyKind {
    Lemmas,
    Counterexample,
    Window,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    pub kind: VerifyKind,
    #[arg(long, default_value = "1/10")]
    pub r1: String,
    #[arg(long, default_value = "1/5")]
    pub r2: String,
    /// Law for `verify window` (gw, uniform, iic, tinf, tstar, tstar-pair).
    #[arg(long, value_enum)]
    pub law: Option<SampleKind>,
    #[arg(long, default_value_t = 2)]
    pub d: u32,
    #[arg(long)]
    pub p: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub significance: f64,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long, default_value_t = 2)]
    pub d: u32,
    /// Vertex labels such as `o`, `(1)`, `(1,2)`.
    #[arg(long = "vertex")]
    pub vertices: Vec<String>,
    /// Hex tree encoding.
    #[arg(long)]
    pub tree: Option<String>,
    /// Render as a depth window.
    #[arg(long)]
    pub depth: Option<usize>,
    /// JSON-lines file of coupling records; renders the overlay of one record.
    #[arg(long)]
    pub record: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
}

/// Entry point: parses `argv` (including the program name) and runs.
pub fn run(argv: Vec<OsString>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let argv = match with_config(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{e}")
            } else {
                write!(out, "{e}")
            };
            return code;
        }
    };
    match dispatch(&cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Domain(_)
                | Error::Parse(_)
                | Error::Decode(_)
                | Error::NotPrefixClosed(_) => EXIT_USAGE,
                Error::Io(_) => EXIT_USAGE,
                _ => EXIT_INVARIANT,
            }
        }
    }
}

/// Appends `--key value` for every `key = value` line of the `--config` file
/// whose option is not already on the command line. `true`/`false` values
/// toggle flags.
fn with_config(mut argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let path = strs.iter().enumerate().find_map(|(i, a)| {
        a.strip_prefix("--config=").map(str::to_string).or_else(|| {
            (a == "--config")
                .then(|| strs.get(i + 1).cloned())
                .flatten()
        })
    });
    let Some(path) = path else { return Ok(argv) };
    let text = fs::read_to_string(&path)?;
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("{path}:{}: expected key = value", n + 1)))?;
        let (key, value) = (key.trim().replace('_', "-"), value.trim());
        let flag = format!("--{key}");
        let present = strs
            .iter()
            .any(|a| *a == flag || a.starts_with(&format!("{flag}=")));
        if present || key == "config" {
            continue;
        }
        match value {
            "true" => argv.push(flag.into()),
            "false" => {}
            v => {
                argv.push(flag.into());
                argv.push(v.into());
            }
        }
    }
    Ok(argv)
}

/// Seed from the flag, then `GWC_SEED`, then fresh (reported on stderr).
fn resolve_seed(cli: &Cli, err: &mut dyn Write) -> Result<u64> {
    if let Some(s) = cli.seed {
        return Ok(s);
    }
    if let Ok(s) = std::env::var("GWC_SEED") {
        return s
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("GWC_SEED={s}")));
    }
    let s: u64 = rand::random();
    writeln!(err, "seed: {s}")?;
    Ok(s)
}

/// Evaluates `f(i)` for `i < n` on `jobs` threads, in index order.
pub fn run_indexed<T, F>(n: usize, jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync,
{
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n as u64).map(f).collect();
    }
    let chunk = n.div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let f = &f;
                let lo = (j * chunk).min(n) as u64;
                let hi = ((j + 1) * chunk).min(n) as u64;
                s.spawn(move || (lo..hi).map(f).collect::<Vec<T>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

struct Records(Option<BufWriter<fs::File>>);

impl Records {
    fn open(path: Option<&Path>) -> Result<Self> {
        Ok(Self(match path {
            Some(p) => Some(BufWriter::new(fs::File::create(p)?)),
            None => None,
        }))
    }

    fn push(&mut self, v: &impl Serialize) -> Result<()> {
        if let Some(w) = &mut self.0 {
            serde_json::to_writer(&mut *w, v)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let Some(mut w) = self.0 {
            w.flush()?;
        }
        Ok(())
    }
}

fn print(out: &mut dyn Write, v: &Value) -> Result<()> {
    serde_json::to_writer(&mut *out, v)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn need<'a, T>(x: &'a Option<T>, what: &str) -> Result<&'a T> {
    x.as_ref()
        .ok_or_else(|| Error::Domain(format!("missing --{what}")))
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Count { d, k, upto } => cmd_count(*d, *k, *upto, out),
        Command::Dist(a) => cmd_dist(a, out),
        Command::Sample(a) => {
            let seed = resolve_seed(cli, err)?;
            cmd_sample(a, seed, cli, out)
        }
        Command::Chain(a) => {
            let seed = resolve_seed(cli, err)?;
            cmd_chain(a, seed, cli, out)
        }
        Command::Couple(a) => {
            let seed = resolve_seed(cli, err)?;
            cmd_couple(a, seed, cli, out)
        }
        Command::Verify(a) => cmd_verify(a, cli, out, err),
        Command::Render(a) => cmd_render(a, out),
    }
}

fn cmd_count(d: u32, k: usize, upto: bool, out: &mut dyn Write) -> Result<i32> {
    if !(2..=3).contains(&d) {
        return Err(Error::Domain(format!("arity d = {d} must be 2 or 3")));
    }
    let lo = if upto { 0 } else { k };
    for j in lo..=k {
        print(
            out,
            &json!({"d": d, "k": j, "count": count_trees(d, j).to_string()}),
        )?;
    }
    Ok(EXIT_OK)
}

fn cmd_dist(a: &DistArgs, out: &mut dyn Write) -> Result<i32> {
    let p_str = || need(&a.p, "p").map(String::as_str);
    match a.kind {
        DistKind::F => {
            let p = parse_rational(p_str()?)?;
            let v = f_of_p(crate::params::rational_to_f64(&p))?;
            print(
                out,
                &json!({"law": "f", "d": 3, "p": rational_to_string(&p), "value": v}),
            )?;
        }
        DistKind::EtaInf => {
            let params = OffspringParams::parse(a.d.unwrap_or(2), p_str()?)?;
            print(
                out,
                &json!({"law": "eta_inf", "d": params.d(), "p": rational_to_string(params.p()), "value": eta_inf(&params)?}),
            )?;
        }
        DistKind::Eta | DistKind::Lstar | DistKind::Lpair => {
            let d = match a.kind {
                DistKind::Lpair => 3,
                DistKind::Lstar => 2,
                _ => a.d.unwrap_or(2),
            };
            let params = OffspringParams::parse(d, p_str()?)?;
            if let (DistKind::Eta, Some(k)) = (a.kind, a.k) {
                let exact = eta_exact(&params, k);
                print(
                    out,
                    &json!({"law": "eta", "d": d, "p": rational_to_string(params.p()), "k": k,
                            "exact": rational_to_string(&exact),
                            "value": crate::params::rational_to_f64(&exact)}),
                )?;
                return Ok(EXIT_OK);
            }
            let laws = match a.kind {
                DistKind::Eta => vec![("eta", eta_law(&params, a.cutoff)?)],
                DistKind::Lstar => vec![("lstar", lstar_law(&params, a.cutoff)?)],
                _ => {
                    let l = lpair_law(&params, a.cutoff)?;
                    vec![
                        ("lstar", l.lstar),
                        ("lstarstar_given_finite", l.given_finite),
                        ("lstarstar_given_infinite", l.given_infinite),
                    ]
                }
            };
            for (name, law) in laws {
                match a.format {
                    Format::Json => print(out, &serde_json::to_value(&law)?)?,
                    Format::Csv => {
                        writeln!(out, "law,size,probability")?;
                        for (k, w) in law.weights.iter().enumerate() {
                            writeln!(out, "{name},{k},{w:.17e}")?;
                        }
                        writeln!(out, "{name},>{},{:.17e}", law.cutoff, law.tail_finite)?;
                        writeln!(out, "{name},inf,{:.17e}", law.infinity)?;
                    }
                }
            }
        }
        DistKind::Split => {
            let d = a.d.unwrap_or(2);
            let k = *need(&a.k, "k")?;
            if k == 0 {
                return Err(Error::Domain("split law needs k ≥ 1 vertices".into()));
            }
            let law = split_law(d, k - 1);
            match a.format {
                Format::Json => {
                    let entries: Vec<Value> = law
                        .entries
                        .iter()
                        .map(|(s, w)| json!({"sizes": s, "probability": rational_to_string(w)}))
                        .collect();
                    print(
                        out,
                        &json!({"law": "split", "d": d, "k": k, "entries": entries}),
                    )?;
                }
                Format::Csv => {
                    writeln!(out, "sizes,probability")?;
                    for (s, w) in &law.entries {
                        let s: Vec<String> = s.iter().map(|x| x.to_string()).collect();
                        writeln!(out, "{},{}", s.join(" "), rational_to_string(w))?;
                    }
                }
            }
        }
        DistKind::Window => {
            let d = a.d.unwrap_or(2);
            let law = LawId::parse(need(&a.law, "law")?, a.p.as_deref(), a.k)?;
            let w = exact_window_law(&law, d, a.depth)?;
            match a.format {
                Format::Csv => write!(out, "{}", w.to_csv())?,
                Format::Json => {
                    let entries: Vec<Value> = w
                        .entries
                        .iter()
                        .map(|(k, v)| json!({"window": k.to_json(), "probability": v}))
                        .collect();
                    print(
                        out,
                        &json!({"law": law.to_string(), "d": d, "D": a.depth, "entries": entries}),
                    )?;
                }
            }
        }
    }
    Ok(EXIT_OK)
}

/// One draw of a sampled law: one window, or two for `tstar-pair`.
#[derive(Clone, Debug)]
pub struct Draw {
    pub window: WindowedTree,
    pub second: Option<WindowedTree>,
    pub tree: Option<DTree>,
    pub quarantined: bool,
}

/// Validated law for `sample` and `verify window`.
#[derive(Clone, Debug)]
pub struct LawSpec {
    pub kind: SampleKind,
    pub d: u32,
    pub p: Option<OffspringParams>,
    pub k: Option<usize>,
    pub depth: usize,
}

impl LawSpec {
    pub fn new(
        kind: SampleKind,
        d: u32,
        p: Option<&str>,
        k: Option<usize>,
        depth: usize,
    ) -> Result<Self> {
        let need_p = || p.ok_or_else(|| Error::Domain("missing --p".into()));
        let p = match kind {
            SampleKind::Gw => Some(OffspringParams::percolation(d, parse_rational(need_p()?)?)?),
            SampleKind::Tinf | SampleKind::Tstar | SampleKind::TstarPair => {
                Some(OffspringParams::parse(d, need_p()?)?)
            }
            SampleKind::Uniform | SampleKind::Iic => {
                if !(2..=3).contains(&d) {
                    return Err(Error::Domain(format!("arity d = {d} must be 2 or 3")));
                }
                None
            }
        };
        match kind {
            SampleKind::Tstar if d != 2 => {
                return Err(Error::Domain("tstar is defined for d = 2".into()))
            }
            SampleKind::TstarPair if d != 3 => {
                return Err(Error::Domain("tstar-pair is defined for d = 3".into()))
            }
            SampleKind::Uniform if k.is_none() => return Err(Error::Domain("missing --k".into())),
            _ => {}
        }
        Ok(Self {
            kind,
            d,
            p,
            k,
            depth,
        })
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            SampleKind::Gw => "gw",
            SampleKind::Uniform => "uniform",
            SampleKind::Iic => "iic",
            SampleKind::Tinf => "tinf",
            SampleKind::Tstar => "tstar",
            SampleKind::TstarPair => "tstar_pair",
        }
    }

    pub fn draw(&self, rng: &RngStream) -> Result<Draw> {
        let (d, depth) = (self.d, self.depth);
        let plain = |window| Draw {
            window,
            second: None,
            tree: None,
            quarantined: false,
        };
        Ok(match self.kind {
            SampleKind::Gw => plain(sample_gw_window(
                d,
                self.p.as_ref().unwrap().p_f64(),
                depth,
                rng,
            )?),
            SampleKind::Uniform => {
                let t = sample_uniform_k(d, self.k.unwrap(), rng)?;
                Draw {
                    window: t.truncate(depth),
                    second: None,
                    tree: Some(t),
                    quarantined: false,
                }
            }
            SampleKind::Iic => plain(sample_iic(d, depth, rng)?),
            SampleKind::Tinf => plain(sample_tinf(self.p.as_ref().unwrap(), depth, rng)?),
            SampleKind::Tstar => {
                let s = sample_tstar_window(self.p.as_ref().unwrap(), depth, rng)?;
                Draw {
                    quarantined: s.quarantined(),
                    window: s.window,
                    second: None,
                    tree: None,
                }
            }
            SampleKind::TstarPair => {
                let (a, b) = sample_tstar_pair(self.p.as_ref().unwrap(), depth, rng)?;
                Draw {
                    quarantined: a.quarantined() || b.quarantined(),
                    window: a.window,
                    second: Some(b.window),
                    tree: None,
                }
            }
        })
    }

    /// Goodness of fit of draws against the exact window law.
    pub fn check(&self, draws: &[Draw], cfg: &CompareConfig) -> Result<TestReport> {
        let quarantined = draws.iter().filter(|x| x.quarantined).count();
        let ok = draws.iter().filter(|x| !x.quarantined);
        if self.kind == SampleKind::TstarPair {
            let law = tstar_pair_window_law(self.p.as_ref().unwrap().p(), self.depth)?;
            let mut counts = BTreeMap::new();
            for x in ok {
                let key = (x.window.clone(), x.second.clone().unwrap());
                *counts.entry(key).or_insert(0usize) += 1;
            }
            return Ok(compare_counts(&law, &counts, quarantined, cfg));
        }
        let id = match self.kind {
            SampleKind::Gw => LawId::Gw(self.p.as_ref().unwrap().p().clone()),
            SampleKind::Uniform => LawId::UniformK(self.k.unwrap()),
            SampleKind::Iic => LawId::Iic,
            SampleKind::Tinf => LawId::Tinf(self.p.as_ref().unwrap().p().clone()),
            _ => LawId::Tstar(self.p.as_ref().unwrap().p().clone()),
        };
        check_windows(
            &id,
            self.d,
            self.depth,
            ok.map(|x| &x.window),
            quarantined,
            cfg,
        )
    }
}

/// Chi-square of windows against `exact_window_law(law, d, depth)`.
pub fn check_windows<'a>(
    law: &LawId,
    d: u32,
    depth: usize,
    windows: impl Iterator<Item = &'a WindowedTree>,
    quarantined: usize,
    cfg: &CompareConfig,
) -> Result<TestReport> {
    let exact = exact_window_law(law, d, depth)?;
    let mut counts = BTreeMap::new();
    for w in windows {
        *counts.entry(w.clone()).or_insert(0usize) += 1;
    }
    Ok(compare_counts(&exact.entries, &counts, quarantined, cfg))
}

fn cmd_sample(a: &SampleArgs, seed: u64, cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let spec = LawSpec::new(a.law, a.d, a.p.as_deref(), a.k, a.depth)?;
    let base = RngStream::new(seed);
    let draws = run_indexed(a.n, cli.jobs, |i| spec.draw(&base.derive(i)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut records = Records::open(cli.out.as_deref())?;
    for (i, x) in draws.iter().enumerate() {
        let mut rec = json!({"seed": seed, "index": i, "law": spec.name(), "d": spec.d,
                             "window": x.window.to_json(), "quarantined": x.quarantined});
        if let Some(w) = &x.second {
            rec["window2"] = serde_json::to_value(w.to_json())?;
        }
        if let Some(t) = &x.tree {
            rec["tree"] = Value::String(t.to_hex());
        }
        records.push(&rec)?;
    }
    records.finish()?;
    let quarantined = draws.iter().filter(|x| x.quarantined).count();
    let mut summary = json!({"command": "sample", "seed": seed, "law": spec.name(), "d": spec.d,
                             "D": spec.depth, "n": a.n, "quarantined": quarantined});
    let mut code = EXIT_OK;
    if a.check {
        let cfg = CompareConfig {
            significance: a.significance,
            ..Default::default()
        };
        let report = spec.check(&draws, &cfg)?;
        if !report.pass {
            code = EXIT_STATISTICAL;
        }
        summary["report"] = serde_json::to_value(&report)?;
    }
    print(out, &summary)?;
    Ok(code)
}

fn cmd_chain(a: &ChainArgs, seed: u64, cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    if !(2..=3).contains(&a.d) {
        return Err(Error::Domain(format!("arity d = {} must be 2 or 3", a.d)));
    }
    let base = RngStream::new(seed);
    let chains = run_indexed(a.n, cli.jobs, |i| {
        couple_chain(a.d, a.kmax, &base.derive(i))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut records = Records::open(cli.out.as_deref())?;
    let mut violations = 0;
    for (i, c) in chains.iter().enumerate() {
        let nested = c.windows(2).all(|w| w[0].is_subtree_of(&w[1]))
            && c.iter().enumerate().all(|(k, t)| t.len() == k);
        if !nested {
            violations += 1;
        }
        let hex: Vec<String> = c.iter().map(DTree::to_hex).collect();
        records
            .push(&json!({"seed": seed, "index": i, "d": a.d, "chain": hex, "nested": nested}))?;
    }
    records.finish()?;
    let cfg = CompareConfig {
        significance: a.significance,
        ..Default::default()
    };
    let mut per_k = Vec::new();
    let mut pass = true;
    for k in 2..=a.kmax {
        let support = enumerate_all(a.d, k);
        if (support.len() as f64) * cfg.min_expected > a.n as f64 {
            per_k.push(json!({"k": k, "skipped": "too few samples for the support size"}));
            continue;
        }
        let mass = 1.0 / support.len() as f64;
        let law: BTreeMap<DTree, f64> = support.into_iter().map(|t| (t, mass)).collect();
        let mut counts = BTreeMap::new();
        for c in &chains {
            *counts.entry(c[k].clone()).or_insert(0usize) += 1;
        }
        let report = compare_counts(&law, &counts, 0, &cfg);
        pass &= report.pass;
        per_k.push(json!({"k": k, "report": report}));
    }
    print(
        out,
        &json!({"command": "chain", "seed": seed, "d": a.d, "kmax": a.kmax, "n": a.n,
                "violations": violations, "uniformity": per_k, "pass": pass}),
    )?;
    Ok(if violations > 0 {
        EXIT_INVARIANT
    } else if !pass {
        EXIT_STATISTICAL
    } else {
        EXIT_OK
    })
}

/// A validated coupling experiment.
#[derive(Clone, Debug)]
pub struct CouplingSpec {
    pub kind: CoupleKind,
    pub p1: OffspringParams,
    pub p2: OffspringParams,
    pub k: usize,
    pub depth: usize,
}

impl CouplingSpec {
    pub fn new(a: &CoupleArgs) -> Result<Self> {
        let d = a.d;
        let (p1, p2, k) = match a.kind {
            CoupleKind::Pair => {
                let p1 = OffspringParams::parse(d, need(&a.p1, "p1")?)?;
                let p2 = OffspringParams::parse(d, need(&a.p2, "p2")?)?;
                if p1.p() == p2.p() && !a.allow_degenerate {
                    return Err(Error::Domain("p1 = p2 needs --allow-degenerate".into()));
                }
                if p1.p() > p2.p() {
                    return Err(Error::Domain(format!("need p1 ≤ p2, got {p1} > {p2}")));
                }
                (p1, p2, 0)
            }
            CoupleKind::Critical => {
                if d != 3 {
                    return Err(Error::Domain("couple critical is defined for d = 3".into()));
                }
                let p = a.p.as_ref().or(a.p2.as_ref());
                let p2 = OffspringParams::parse(3, need(&p.cloned(), "p")?)?;
                if p2.is_critical() {
                    return Err(Error::Domain("couple critical needs p > 1/3".into()));
                }
                (OffspringParams::parse(3, "1/3")?, p2, 0)
            }
            CoupleKind::Finite => {
                let p = OffspringParams::parse(d, need(&a.p, "p")?)?;
                (p.clone(), p, *need(&a.k, "k")?)
            }
        };
        Ok(Self {
            kind: a.kind,
            p1,
            p2,
            k,
            depth: a.depth,
        })
    }

    pub fn d(&self) -> u32 {
        self.p1.d()
    }

    pub fn run(&self, rng: &RngStream) -> Result<CoupledWindows> {
        match self.kind {
            CoupleKind::Finite => {
                let r = couple_finite_in_infinite(&self.p2, self.k, self.depth, rng)?;
                Ok(CoupledWindows {
                    window1: r.finite,
                    window2: r.window,
                    contained: r.contained,
                    quarantined: r.quarantined,
                    steps: 0,
                    clamps: r.clamps,
                    pruned: 0,
                })
            }
            CoupleKind::Critical => couple_critical_supercritical(&self.p2, self.depth, rng),
            CoupleKind::Pair if self.d() == 2 => {
                couple_supercritical_pair(&self.p1, &self.p2, self.depth, rng)
            }
            CoupleKind::Pair if self.p1.is_critical() => {
                let mut r = couple_critical_supercritical(&self.p2, self.depth, rng)?;
                if self.p2.is_critical() {
                    r.window2 = r.window1.clone();
                }
                Ok(r)
            }
            CoupleKind::Pair => couple_supercritical_pair_d3(&self.p1, &self.p2, self.depth, rng),
        }
    }

    /// Exact laws of the two marginal windows.
    pub fn marginal_laws(&self) -> (LawId, LawId) {
        let side = |p: &OffspringParams| {
            if p.is_critical() {
                LawId::Iic
            } else {
                LawId::Tinf(p.p().clone())
            }
        };
        match self.kind {
            CoupleKind::Finite => (LawId::UniformK(self.k), side(&self.p2)),
            _ => (side(&self.p1), side(&self.p2)),
        }
    }
}

/// Summary of a batch of coupling runs.
#[derive(Clone, Debug, Serialize)]
pub struct CouplingSummary {
    pub n: usize,
    /// Non-quarantined runs where containment failed.
    pub violations: usize,
    pub quarantined: usize,
    pub quarantine_rate: f64,
    /// Runs with identical windows on both sides.
    pub identical: usize,
    pub mean_steps: f64,
    pub clamps: usize,
    pub pruned: usize,
    /// Measured rate of pruning replacements that had to be redrawn; the
    /// exact pruning kernel never redraws.
    pub instability_rate: f64,
}

pub fn summarize(runs: &[CoupledWindows]) -> CouplingSummary {
    let n = runs.len();
    let quarantined = runs.iter().filter(|r| r.quarantined).count();
    CouplingSummary {
        n,
        violations: runs
            .iter()
            .filter(|r| !r.quarantined && !r.contained)
            .count(),
        quarantined,
        quarantine_rate: quarantined as f64 / n.max(1) as f64,
        identical: runs.iter().filter(|r| r.window1 == r.window2).count(),
        mean_steps: runs.iter().map(|r| r.steps as f64).sum::<f64>() / n.max(1) as f64,
        clamps: runs.iter().map(|r| r.clamps).sum(),
        pruned: runs.iter().map(|r| r.pruned).sum(),
        instability_rate: 0.0,
    }
}

/// Marginal reports `(side 1, side 2)` of non-quarantined runs.
pub fn check_marginals(
    spec: &CouplingSpec,
    runs: &[CoupledWindows],
    cfg: &CompareConfig,
) -> Result<(TestReport, TestReport)> {
    let (l1, l2) = spec.marginal_laws();
    let q = runs.iter().filter(|r| r.quarantined).count();
    let ok = || runs.iter().filter(|r| !r.quarantined);
    Ok((
        check_windows(&l1, spec.d(), spec.depth, ok().map(|r| &r.window1), q, cfg)?,
        check_windows(&l2, spec.d(), spec.depth, ok().map(|r| &r.window2), q, cfg)?,
    ))
}

fn cmd_couple(a: &CoupleArgs, seed: u64, cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let spec = CouplingSpec::new(a)?;
    let base = RngStream::new(seed);
    let runs = run_indexed(a.n, cli.jobs, |i| spec.run(&base.derive(i)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut records = Records::open(cli.out.as_deref())?;
    for (i, r) in runs.iter().enumerate() {
        records.push(&r.record(seed, i as u64, &spec.p1, &spec.p2))?;
    }
    records.finish()?;
    let s = summarize(&runs);
    let mut summary = json!({"command": "couple", "kind": format!("{:?}", spec.kind).to_lowercase(),
                             "seed": seed, "d": spec.d(), "p1": rational_to_string(spec.p1.p()),
                             "p2": rational_to_string(spec.p2.p()), "D": spec.depth,
                             "summary": s});
    let mut code = if s.violations > 0 {
        EXIT_INVARIANT
    } else {
        EXIT_OK
    };
    if a.check {
        let cfg = CompareConfig {
            significance: a.significance,
            ..Default::default()
        };
        let (m1, m2) = check_marginals(&spec, &runs, &cfg)?;
        if code == EXIT_OK && !(m1.pass && m2.pass) {
            code = EXIT_STATISTICAL;
        }
        summary["marginal1"] = serde_json::to_value(&m1)?;
        summary["marginal2"] = serde_json::to_value(&m2)?;
    }
    print(out, &summary)?;
    Ok(code)
}

fn cmd_verify(a: &VerifyArgs, cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match a.kind {
        VerifyKind::Lemmas => {
            let report = lemma_suite();
            for c in report.checks.iter().filter(|c| !c.passed) {
                writeln!(err, "FAIL {}: {}", c.name, c.detail)?;
            }
            print(out, &serde_json::to_value(&report)?)?;
            Ok(if report.passed {
                EXIT_OK
            } else {
                EXIT_STATISTICAL
            })
        }
        VerifyKind::Counterexample => {
            let r = counterexample_demo(&parse_rational(&a.r1)?, &parse_rational(&a.r2)?)?;
            let verdict = if r.conditioned_feasible {
                "FEASIBLE"
            } else {
                "INFEASIBLE"
            };
            let mut v = serde_json::to_value(&r)?;
            v["verdict"] = Value::String(verdict.into());
            print(out, &v)?;
            let expected =
                !r.conditioned_feasible && r.certificate_valid && r.unconditioned_feasible;
            Ok(if expected { EXIT_OK } else { EXIT_STATISTICAL })
        }
        VerifyKind::Window => {
            let seed = resolve_seed(cli, err)?;
            let kind = *need(&a.law, "law")?;
            let spec = LawSpec::new(kind, a.d, a.p.as_deref(), a.k, a.depth)?;
            let base = RngStream::new(seed);
            let draws = run_indexed(a.n, cli.jobs, |i| spec.draw(&base.derive(i)))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let cfg = CompareConfig {
                significance: a.significance,
                ..Default::default()
            };
            let report = spec.check(&draws, &cfg)?;
            print(
                out,
                &json!({"command": "verify", "law": spec.name(), "seed": seed, "d": spec.d,
                        "D": spec.depth, "report": report}),
            )?;
            Ok(if report.pass {
                EXIT_OK
            } else {
                EXIT_STATISTICAL
            })
        }
    }
}

fn cmd_render(a: &RenderArgs, out: &mut dyn Write) -> Result<i32> {
    if let Some(path) = &a.record {
        let text = fs::read_to_string(path)?;
        let line = text
            .lines()
            .nth(a.index)
            .ok_or_else(|| Error::Domain(format!("no record {} in {}", a.index, path.display())))?;
        let v: Value = serde_json::from_str(line)?;
        let d = v["d"].as_u64().unwrap_or(a.d as u64) as u32;
        let side = |key: &str| -> Result<WindowedTree> {
            let j: WindowJson = serde_json::from_value(v[key].clone())?;
            WindowedTree::from_json(d, &j)
        };
        let dot = match v.get("window1") {
            Some(_) => WindowedTree::to_dot_pair(&side("window1")?, &side("window2")?),
            None => side("window")?.to_dot(),
        };
        write!(out, "{dot}")?;
        return Ok(EXIT_OK);
    }
    let tree = match &a.tree {
        Some(h) => DTree::from_hex(a.d, h)?,
        None => DTree::from_vertices(
            a.d,
            a.vertices
                .iter()
                .map(|s| VertexLabel::parse(s))
                .collect::<Result<Vec<_>>>()?,
        )?,
    };
    let dot = match a.depth {
        Some(depth) => tree.truncate(depth).to_dot(),
        None => tree.to_dot(),
    };
    write!(out, "{dot}")?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let argv = std::iter::once("gwc")
            .chain(args.iter().copied())
            .map(OsString::from)
            .collect();
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(argv, &mut out, &mut err);
        (
            code,
            String::from_utf8(out).unwrap(),
            String::from_utf8(err).unwrap(),
        )
    }

    #[test]
    fn count_catalan() {
        let (code, out, _) = call(&["count", "--d", "2", "--k", "8"]);
        assert_eq!(code, 0);
        assert!(out.contains("\"count\":\"1430\""), "{out}");
    }

    #[test]
    fn dist_eta_and_f() {
        let (_, out, _) = call(&["dist", "eta", "--d", "2", "--p", "1/2", "--k", "3"]);
        assert!(out.contains("\"exact\":\"5/128\""), "{out}");
        let (_, out, _) = call(&["dist", "f", "--p", "1"]);
        let v: Value = serde_json::from_str(&out).unwrap();
        assert!((v["value"].as_f64().unwrap() - (3f64.sqrt() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn usage_errors_exit_3() {
        assert_eq!(call(&["count"]).0, EXIT_USAGE);
        assert_eq!(call(&["dist", "eta", "--p", "1/3"]).0, EXIT_USAGE);
        assert_eq!(
            call(&["couple", "pair", "--p1", "0.6", "--p2", "0.6", "--seed", "1"]).0,
            EXIT_USAGE
        );
        assert_eq!(call(&["--help"]).0, EXIT_OK);
    }

    #[test]
    fn jobs_do_not_change_results() {
        let f = |i: u64| RngStream::new(9).derive(i).uniform();
        assert_eq!(run_indexed(37, 1, f), run_indexed(37, 4, f));
    }

    #[test]
    fn config_supplies_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "# defaults\nd = 2\nk = 4\n").unwrap();
        let (code, out, _) = call(&["count", "--config", cfg.to_str().unwrap(), "--k", "3"]);
        assert_eq!(code, 0);
        assert!(out.contains("\"count\":\"5\""), "{out}");
    }

    #[test]
    fn render_counts_nodes() {
        let (_, out, _) = call(&["render", "--vertex", "o", "--vertex", "(1)"]);
        assert!(out.starts_with("digraph"));
        assert_eq!(out.matches("shape=circle").count(), 1);
        assert_eq!(out.matches(" [").count() - 1, 2);
    }
}
