use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use snap_core::delay::{opst_delay, sbt_avg_exact_pow2, sbt_delay, DelayModel};
use snap_core::netsim::{run_hybrid_sim, Baseline, MetricsReport, Percentiles, ScenarioConfig, SimError};
use snap_core::overlay::{build_overlay, depth_for, iset, peers, validate_prop1, validate_prop2, LevelPolicy, OverlayDoc};
use snap_core::schedule::{simulate_slots, table_sizes, write_traces_csv};

use crate::sweep::{apply, parse_grid};
use crate::{usage, CliError, Ctx, RunManifest};

pub fn parse_policy(s: &str) -> Result<LevelPolicy, CliError> {
    Ok(match s {
        "auto" => LevelPolicy::Auto,
        "single-level" => LevelPolicy::SingleLevel,
        "greedy" => LevelPolicy::Greedy,
        "low-levels" => LevelPolicy::LowLevels,
        list => {
            let levels = list
                .split(',')
                .map(|x| x.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| usage(format!("unknown policy {s:?}")))?;
            LevelPolicy::Explicit(levels)
        }
    })
}

#[derive(Debug, Serialize)]
struct Stamp {
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "P")]
    p: usize,
    /// Levels that received an extra roster block.
    extra_levels: Vec<usize>,
    level_periods: Vec<usize>,
    iset_sizes: Vec<usize>,
    prop1_ok: bool,
    prop1_violations: Vec<String>,
    prop2_ok: bool,
    prop2_failures: Vec<String>,
    table_max: usize,
    table_bound: usize,
    valid: bool,
}

fn stamp(o: &snap_core::MultiSbtOverlay, policy: &LevelPolicy) -> Stamp {
    let n = o.n();
    let k = o.depth();
    let extra_levels = if n.is_power_of_two() {
        Vec::new()
    } else {
        policy.choose(n - (1 << (k - 1)), k - 1).unwrap_or_default()
    };
    let mut iset_sizes = Vec::with_capacity(o.period());
    let mut prop1_violations = Vec::new();
    for a in 0..o.period() {
        match iset(o, a) {
            Ok(s) => {
                iset_sizes.push(s.members.len());
                match validate_prop1(&s.edges, o) {
                    Ok(v) => prop1_violations.extend(v.iter().map(|x| format!("anchor {a}: {x}"))),
                    Err(e) => prop1_violations.push(format!("anchor {a}: {e}")),
                }
            }
            Err(e) => prop1_violations.push(e.to_string()),
        }
    }
    let prop2_failures = match validate_prop2(o) {
        Ok(()) => Vec::new(),
        Err(r) => r.failures.iter().map(|f| f.to_string()).collect(),
    };
    let table_max = table_sizes(o).iter().map(|t| t.distinct).max().unwrap_or(0);
    let table_bound = 1 + k * (k - 1) / 2;
    Stamp {
        n,
        k,
        p: o.period(),
        extra_levels,
        level_periods: o.rosters().iter().map(|r| r.period).collect(),
        iset_sizes,
        prop1_ok: prop1_violations.is_empty(),
        prop2_ok: prop2_failures.is_empty(),
        valid: prop1_violations.is_empty() && prop2_failures.is_empty() && table_max <= table_bound,
        prop1_violations,
        prop2_failures,
        table_max,
        table_bound,
    }
}

pub fn build(ctx: &Ctx, n: usize, policy: &str) -> Result<(), CliError> {
    if n < 2 {
        return Err(usage("--n must be at least 2"));
    }
    let pol = parse_policy(policy)?;
    let input = serde_json::to_vec(&json!({ "n": n, "policy": pol })).expect("serializes");
    let o = build_overlay(&peers(0..n as u32), &pol).map_err(usage)?;
    let st = stamp(&o, &pol);
    ctx.log(format!("N={} K={} P={} table_max={}", st.n, st.k, st.p, st.table_max));
    let to_file = ctx.out_dir.is_some();
    let outputs: &[&str] = if to_file { &["overlay.json"] } else { &[] };
    let m = RunManifest::new("build", &input, ctx.seed.unwrap_or(0)).with_outputs(outputs);
    let valid = st.valid;
    let doc = json!({
        "manifest": m.to_value(),
        "stamp": st,
        "overlay": OverlayDoc::from_overlay(&o),
    });
    let text = serde_json::to_string_pretty(&doc).expect("serializes") + "\n";
    if to_file {
        ctx.write("overlay.json", text.as_bytes())?;
    } else {
        print!("{text}");
    }
    if valid {
        Ok(())
    } else {
        Err(CliError::Validation(format!("overlay for N={n} failed validation")))
    }
}

/// Reads either a bare overlay document or the wrapper written by `build`.
fn read_overlay(path: &Path) -> Result<(Vec<u8>, OverlayDoc), CliError> {
    let bytes = std::fs::read(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let v: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let inner = v.get("overlay").cloned().unwrap_or(v);
    let doc: OverlayDoc =
        serde_json::from_value(inner).map_err(|e| usage(format!("{}: not an overlay document: {e}", path.display())))?;
    Ok((bytes, doc))
}

pub fn oracle(ctx: &Ctx, path: &Path, chunks: Option<u64>) -> Result<(), CliError> {
    let (bytes, doc) = read_overlay(path)?;
    let o = doc
        .to_overlay()
        .map_err(|e| CliError::Validation(format!("overlay rejected: {e}")))?;
    let chunks = chunks.unwrap_or(4 * o.period() as u64);
    let mut input = bytes;
    input.extend_from_slice(format!("\nchunks={chunks}").as_bytes());
    let m = RunManifest::new("oracle", &input, ctx.seed.unwrap_or(0)).with_outputs(&["trace.csv"]);
    let mut problems: Vec<String> = match validate_prop2(&o) {
        Ok(()) => Vec::new(),
        Err(r) => r.failures.iter().map(|f| f.to_string()).collect(),
    };
    let run = simulate_slots(&o, chunks).map_err(|e| {
        problems.push(e.to_string());
        CliError::Validation(problems.join("\n"))
    })?;
    let mut csv = format!("# {}\n", m.header()).into_bytes();
    write_traces_csv(&run.traces, &mut csv).map_err(usage)?;
    ctx.write("trace.csv", &csv)?;
    let k = o.depth() as u64;
    let lags: Vec<u64> = run.traces.iter().map(|t| t.lag()).collect();
    let (lo, hi) = (lags.iter().min().copied().unwrap_or(0), run.max_lag());
    println!(
        "N={} K={} P={} chunks={} lag_min={} lag_max={} prop1_violations={}",
        o.n(),
        k,
        o.period(),
        chunks,
        lo,
        hi,
        run.violations.len()
    );
    let mut fail: Vec<String> = run
        .violations
        .iter()
        .map(|(slot, v)| format!("slot {slot}: {v}"))
        .collect();
    for t in run.traces.iter().filter(|t| t.lag() > k) {
        fail.push(format!("chunk {} took {} slots (K = {k})", t.chunk, t.lag()));
    }
    if fail.is_empty() {
        println!("PASS");
        Ok(())
    } else {
        fail.extend(problems);
        Err(CliError::Validation(fail.join("\n")))
    }
}

fn parse_baseline(s: &str) -> Result<Baseline, CliError> {
    serde_json::from_value(json!(s)).map_err(|_| usage(format!("unknown baseline {s:?}")))
}

fn load_scenario(ctx: &Ctx, path: &Path, baseline: Option<&str>) -> Result<ScenarioConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut cfg = ScenarioConfig::from_json(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    if let Some(b) = baseline {
        cfg.baseline = parse_baseline(b)?;
    }
    Ok(cfg)
}

fn sim_error(e: SimError) -> CliError {
    match e {
        SimError::Config(c) => usage(c),
        other => CliError::Validation(other.to_string()),
    }
}

fn violations(r: &MetricsReport) -> Option<String> {
    (r.priority_violations + r.bandwidth_violations > 0).then(|| {
        format!(
            "{} priority and {} bandwidth violations",
            r.priority_violations, r.bandwidth_violations
        )
    })
}

pub fn simulate(ctx: &Ctx, path: &Path, baseline: Option<&str>) -> Result<(), CliError> {
    let cfg = load_scenario(ctx, path, baseline)?;
    let input = serde_json::to_vec(&cfg).expect("serializes");
    let mut outputs = vec!["metrics.csv", "summary.json"];
    if cfg.log_events {
        outputs.push("events.log");
    }
    let m = RunManifest::new("simulate", &input, cfg.seed).with_outputs(&outputs);
    ctx.log(format!("simulating {} s, seed {}", cfg.session_length, cfg.seed));
    let r = run_hybrid_sim(&cfg).map_err(sim_error)?;
    let mut csv = Vec::new();
    r.write_csv(Some(&m.header()), &mut csv).map_err(usage)?;
    ctx.write("metrics.csv", &csv)?;
    let mut summary = r.summary(&cfg);
    summary.manifest = Some(m.to_value());
    let text = serde_json::to_string_pretty(&summary).expect("serializes") + "\n";
    ctx.write("summary.json", text.as_bytes())?;
    if cfg.log_events {
        let mut log = format!("# {}\n", m.header());
        for line in &r.events {
            log.push_str(line);
            log.push('\n');
        }
        ctx.write("events.log", log.as_bytes())?;
    }
    let p = |x: &Option<Percentiles>| x.map_or("-".to_string(), |p| format!("p50={:.4} p90={:.4} max={:.4}", p.p50, p.p90, p.max));
    println!("playback_delay {}", p(&summary.playback_delay));
    println!("startup_latency {}", p(&summary.startup_latency));
    println!("control_overhead {:.6} lost {}", summary.control_overhead, summary.lost);
    match violations(&r) {
        Some(v) => Err(CliError::Validation(v)),
        None => Ok(()),
    }
}

pub const SWEEP_COLUMNS: [&str; 19] = [
    "field",
    "value",
    "seed",
    "baseline",
    "backbone_peers",
    "second_tier_peers",
    "playback_p10",
    "playback_p50",
    "playback_p90",
    "playback_p99",
    "startup_p10",
    "startup_p50",
    "startup_p90",
    "startup_p99",
    "control_overhead",
    "control_bytes",
    "data_bytes",
    "lost",
    "priority_violations",
];

fn sweep_row(field: &str, value: f64, cfg: &ScenarioConfig, r: &MetricsReport) -> Vec<String> {
    let s = r.summary(cfg);
    let q = |p: &Option<Percentiles>| -> [String; 4] {
        match p {
            Some(p) => [p.p10, p.p50, p.p90, p.p99].map(|x| x.to_string()),
            None => Default::default(),
        }
    };
    let baseline = serde_json::to_value(cfg.baseline).expect("serializes");
    let mut row = vec![
        field.to_string(),
        value.to_string(),
        cfg.seed.to_string(),
        baseline.as_str().unwrap_or_default().to_string(),
        s.backbone_peers.to_string(),
        s.second_tier_peers.to_string(),
    ];
    row.extend(q(&s.playback_delay));
    row.extend(q(&s.startup_latency));
    row.extend([
        s.control_overhead.to_string(),
        s.control_bytes.to_string(),
        s.data_bytes.to_string(),
        s.lost.to_string(),
        s.priority_violations.to_string(),
    ]);
    row
}

pub fn sweep(ctx: &Ctx, path: &Path, vary: &str, seeds: u64, baseline: Option<&str>) -> Result<(), CliError> {
    let base = load_scenario(ctx, path, baseline)?;
    let grid = parse_grid(vary).map_err(usage)?;
    // Validate the target even when the grid is empty.
    apply(&base, &grid.field, grid.values.first().copied().unwrap_or_else(|| current(&base, &grid.field)))
        .map_err(usage)?;
    let mut configs = Vec::new();
    for &v in &grid.values {
        let c = apply(&base, &grid.field, v).map_err(usage)?;
        for s in 0..seeds {
            let mut c = c.clone();
            c.seed = base.seed.wrapping_add(s);
            configs.push((v, c));
        }
    }
    let input = serde_json::to_vec(&json!({ "base": base, "vary": vary, "seeds": seeds })).expect("serializes");
    let m = RunManifest::new("sweep", &input, base.seed).with_outputs(&["sweep.csv"]);
    ctx.log(format!("{} runs", configs.len()));
    let rows: Vec<Vec<String>> = configs
        .par_iter()
        .map(|(v, c)| {
            let r = run_hybrid_sim(c).map_err(sim_error)?;
            Ok(sweep_row(&grid.field, *v, c, &r))
        })
        .collect::<Result<_, CliError>>()?;
    let mut buf = format!("# {}\n", m.header()).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(SWEEP_COLUMNS).map_err(usage)?;
        for r in &rows {
            w.write_record(r).map_err(usage)?;
        }
        w.flush().map_err(usage)?;
    }
    ctx.write("sweep.csv", &buf)?;
    println!("{} rows", rows.len());
    Ok(())
}

/// Present value of a numeric field, used to type-check an empty grid's target.
fn current(cfg: &ScenarioConfig, field: &str) -> f64 {
    let v = serde_json::to_value(cfg).expect("serializes");
    field
        .split('.')
        .try_fold(&v, |v, p| v.get(p))
        .and_then(|v| v.as_f64())
        .unwrap_or(f64::NAN)
}

fn verdict(opst: f64, sbt: f64) -> &'static str {
    if (opst - sbt).abs() <= 1e-12 * opst.abs().max(1.0) {
        "tie"
    } else if sbt < opst {
        "SBT wins"
    } else {
        "OPST wins"
    }
}

pub fn analytic(n: usize, d: f64, t: f64) -> Result<(), CliError> {
    if n < 2 {
        return Err(usage("--n must be at least 2"));
    }
    let model = DelayModel::new(d, t).map_err(usage)?;
    let input = format!("n={n} d={d} t={t}");
    let m = RunManifest::new("analytic", input.as_bytes(), 0);
    let (omax, oavg) = opst_delay(n, model);
    let (smax, savg) = sbt_delay(n, model);
    println!("# {}", m.header());
    println!("N={n} K={} d={d} t={t}", depth_for(n));
    println!("metric,opst,sbt,verdict");
    println!("max_delay,{omax},{smax},{}", verdict(omax, smax));
    println!("avg_delay_approx,{oavg},{savg},{}", verdict(oavg, savg));
    if n.is_power_of_two() {
        let exact = sbt_avg_exact_pow2(depth_for(n), model);
        println!("avg_delay_exact,{oavg},{exact},{}", verdict(oavg, exact));
    }
    let sym = |a: f64, b: f64| if a < b { "<" } else if a > b { ">" } else { "=" };
    println!("crossover: {} on max delay ({smax} {} {omax})", verdict(omax, smax), sym(smax, omax));
    Ok(())
}
