//! Executes scenarios and assembles run reports.

use anyhow::{anyhow, bail, Context};
use capergo_core::cocycle::{
    compound_consistency, cycle_from, lyapunov_qr, monodromy_oracle, oseledets_filtration, subadditive_check,
    BaseDynamics, MatrixGen,
};
use capergo_core::ergocheck::{
    density, extract_null_density_set, independence_check, oscillating_sqrt_means, sqrt_moment_check,
    squared_deviation_check, Checkpoint, CheckOutcome, DensitySubset, FiniteSystem, IntervalSystem,
};
use capergo_core::finitedyn::{ergodic_skeleton, ergodicity_check, weak_mixing_check, Endomap};
use capergo_core::intervaldyn::{
    correlation_sequence, orbit_average, polynomial_orbit_average, scalar_from_json, verify_eigenfunction,
    BitstreamPoint, IntervalSet, PiecewiseAffineMap, RestrictedLebesgue, StepFunction,
};
use capergo_core::setfun::{EventSet, ParsedSetFunction, ProbabilityVector, SetFunction, SetFunctionSpec, UpperProbability};
use capergo_core::{Rational, Scalar};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::scenario::{
    BaseSpec, CheckKind, CheckSpec, EventSpec, Expect, FnSpec, IntegerSetSpec, Intervals, Scenario, SequenceSpec,
    SystemSpec,
};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub op: String,
    pub expect: Expect,
    /// Verdict of the check itself, before comparing with `expect`.
    pub outcome: bool,
    pub passed: bool,
    pub detail: Value,
    #[serde(skip)]
    pub csv: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub verdict: bool,
    pub checks: Vec<CheckResult>,
    pub config: Scenario,
}

type Outcome = (bool, Value, Option<String>);

fn to_json<T: Serialize>(x: &T) -> Value {
    serde_json::to_value(x).expect("report types serialize")
}

fn checkpoints_csv(rows: &[Checkpoint]) -> String {
    let mut out = String::from("checkpoint,partial_mean,target,deviation\n");
    for c in rows {
        out.push_str(&format!("{},{},{},{}\n", c.n, c.partial_mean, c.target, c.deviation));
    }
    out
}

fn outcome(o: CheckOutcome) -> Outcome {
    let csv = o.report().map(|r| r.to_csv());
    let verdict = o.report().is_some_and(|r| r.verdict);
    (verdict, to_json(&o), csv)
}

/// Per-check seed from the scenario seed and the check name (FNV-1a), so a check draws
/// the same stream whether it runs alone, in sequence or on its own thread.
fn check_seed(seed: u64, name: &str) -> u64 {
    let h = name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    seed ^ h
}

pub fn run_scenario(s: &Scenario) -> anyhow::Result<RunReport> {
    s.validate().map_err(|e| anyhow!("scenario {}: {e}", s.name))?;
    let outcomes = run_checks(s)?;
    Ok(assemble(s, outcomes))
}

/// Runs each check on its own thread; the report keeps declaration order.
pub fn run_scenario_parallel(s: &Scenario) -> anyhow::Result<RunReport> {
    s.validate().map_err(|e| anyhow!("scenario {}: {e}", s.name))?;
    let outcomes = std::thread::scope(|scope| {
        let handles: Vec<_> = s
            .checks
            .iter()
            .map(|c| {
                let single = Scenario { checks: vec![c.clone()], ..s.clone() };
                scope.spawn(move || run_checks(&single))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| anyhow!("check thread panicked"))?.map(|mut v| v.remove(0)))
            .collect::<anyhow::Result<Vec<_>>>()
    })?;
    Ok(assemble(s, outcomes))
}

fn run_checks(s: &Scenario) -> anyhow::Result<Vec<Outcome>> {
    let outcomes: Vec<Outcome> = match &s.system {
        SystemSpec::Finite { map, upper } => run_finite(map, upper, &s.checks)?,
        SystemSpec::Interval { map, windows, skeleton, exact } => {
            if *exact {
                run_interval::<Rational>(map.build()?, windows, skeleton.as_deref(), &s.checks, s.seed)?
            } else {
                run_interval::<f64>(map.build()?, windows, skeleton.as_deref(), &s.checks, s.seed)?
            }
        }
        SystemSpec::Integers => s.checks.iter().map(run_integer_check).collect::<anyhow::Result<_>>()?,
        SystemSpec::Bitstream => s
            .checks
            .iter()
            .map(|c| run_bitstream_check(c, check_seed(s.seed, &c.name)))
            .collect::<anyhow::Result<_>>()?,
        SystemSpec::Cocycle { base, generator, omega } => {
            let gen = generator.build()?;
            match base {
                BaseSpec::Finite { map } => {
                    let w = omega.as_u64().ok_or_else(|| anyhow!("finite base needs an integer omega"))? as usize;
                    if w >= map.n() {
                        bail!("omega {w} outside the base");
                    }
                    run_cocycle(&gen, map, &w, Some((map, w)), &s.checks)?
                }
                BaseSpec::Interval { map } => {
                    let map: PiecewiseAffineMap<f64> = map.build()?;
                    let w: f64 = scalar_from_json(omega)?;
                    run_cocycle(&gen, &map, &w, None, &s.checks)?
                }
            }
        }
    };
    Ok(outcomes)
}

fn assemble(s: &Scenario, outcomes: Vec<Outcome>) -> RunReport {
    let checks: Vec<CheckResult> = s
        .checks
        .iter()
        .zip(outcomes)
        .map(|(c, (outcome, detail, csv))| CheckResult {
            name: c.name.clone(),
            op: c.kind.op().into(),
            expect: c.expect,
            outcome,
            passed: outcome == (c.expect == Expect::Pass),
            detail,
            // Checks without a sequence still get a one-row table.
            csv: csv.or_else(|| Some(format!("check,op,outcome\n{},{},{}\n", c.name, c.kind.op(), outcome))),
        })
        .collect();
    RunReport {
        scenario: s.name.clone(),
        seed: s.seed,
        verdict: checks.iter().all(|c| c.passed),
        checks,
        config: s.clone(),
    }
}

fn unsupported(c: &CheckSpec, regime: &str) -> anyhow::Error {
    anyhow!("check {}: {} is not available for {regime} systems", c.name, c.kind.op())
}

fn finite_event(e: &EventSpec, n: usize) -> anyhow::Result<EventSet> {
    match e {
        EventSpec::Points(p) => {
            if let Some(x) = p.iter().find(|&&x| x >= n) {
                bail!("point {x} outside the ground set of size {n}");
            }
            Ok(EventSet::from_points(p))
        }
        EventSpec::Intervals(_) => bail!("finite systems take events as point lists"),
    }
}

fn finite_values(f: &FnSpec, n: usize) -> anyhow::Result<Vec<Rational>> {
    match f {
        FnSpec::Values(v) if v.len() == n => Ok(v.iter().map(scalar_from_json).collect::<Result<_, _>>()?),
        FnSpec::Values(v) => bail!("expected {n} values, got {}", v.len()),
        FnSpec::Steps { .. } => bail!("finite systems take functions as value lists"),
    }
}

fn run_finite(map: &Endomap, upper: &SetFunctionSpec, checks: &[CheckSpec]) -> anyhow::Result<Vec<Outcome>> {
    let v: UpperProbability<Rational> = match upper.parse::<Rational>()? {
        ParsedSetFunction::Lambda(v) => v,
        ParsedSetFunction::Table(_) => bail!("finite systems need an upper probability given by its members"),
    };
    if v.points() != map.n() {
        bail!("upper probability has {} points, map has {}", v.points(), map.n());
    }
    let sys = FiniteSystem::new(map.clone(), v.clone());
    let member = |k: usize| -> anyhow::Result<&ProbabilityVector<Rational>> {
        v.lambda().get(k).ok_or_else(|| anyhow!("no member {k}"))
    };
    let n_pts = map.n();
    checks
        .iter()
        .map(|c| -> anyhow::Result<Outcome> {
            let ctx = || format!("check {}", c.name);
            let sys = || sys.as_ref().map_err(|e| anyhow!("{e}")).with_context(ctx);
            Ok(match &c.kind {
                CheckKind::Independence { member: k, b, c: cc, n, tol } => outcome(
                    independence_check(sys()?, member(*k)?, &finite_event(b, n_pts)?, &finite_event(cc, n_pts)?, *n, *tol)
                        .with_context(ctx)?,
                ),
                CheckKind::SquaredDeviation { member: k, b, c: cc, n, tol } => outcome(
                    squared_deviation_check(sys()?, member(*k)?, &finite_event(b, n_pts)?, &finite_event(cc, n_pts)?, *n, *tol)
                        .with_context(ctx)?,
                ),
                CheckKind::SqrtMoment { member: k, b, c: cc, r, n, tol } => {
                    let rep = sqrt_moment_check(sys()?, member(*k)?, &finite_event(b, n_pts)?, &finite_event(cc, n_pts)?, *r, *n, *tol)
                        .with_context(ctx)?;
                    let exact_ok = rep.exact.as_ref().is_none_or(|e| e.equals_lower || e.equals_upper);
                    (rep.verdict && exact_ok, to_json(&rep), Some(checkpoints_csv(&rep.checkpoints)))
                }
                CheckKind::ChoquetIndependence { f, g, n, .. } => outcome(
                    sys()?
                        .choquet_independence(&finite_values(f, n_pts)?, &finite_values(g, n_pts)?, *n)
                        .with_context(ctx)?,
                ),
                CheckKind::ProcessSlln { h, depth, n, .. } => {
                    let rep = sys()?.process_slln(&finite_values(h, n_pts)?, *depth, *n).with_context(ctx)?;
                    (rep.stationary && rep.slln.verdict, to_json(&rep), Some(rep.slln.to_csv()))
                }
                CheckKind::Ergodicity => {
                    let verdict = ergodicity_check(&v, map);
                    let skeleton = if verdict.invariant { Some(ergodic_skeleton(&v, map).with_context(ctx)?) } else { None };
                    (verdict.ergodic, json!({"definition": verdict, "skeleton": skeleton}), None)
                }
                CheckKind::WeakMixing => {
                    let w = weak_mixing_check(&v, map).with_context(ctx)?;
                    (w.weakly_mixing, to_json(&w), None)
                }
                _ => return Err(unsupported(c, "finite")),
            })
        })
        .collect()
}

fn interval_set<S: Scalar>(c: &S, iv: &Intervals) -> anyhow::Result<IntervalSet<S>> {
    let pieces = iv
        .iter()
        .map(|(a, b)| Ok((scalar_from_json(a)?, scalar_from_json(b)?)))
        .collect::<capergo_core::Result<Vec<_>>>()?;
    Ok(IntervalSet::new(c.clone(), pieces)?)
}

fn interval_event<S: Scalar>(c: &S, e: &EventSpec) -> anyhow::Result<IntervalSet<S>> {
    match e {
        EventSpec::Intervals(iv) => interval_set(c, iv),
        EventSpec::Points(p) if p.is_empty() => Ok(IntervalSet::empty(c.clone())),
        EventSpec::Points(_) => bail!("interval systems take events as interval lists"),
    }
}

fn step_function<S: Scalar>(c: &S, f: &FnSpec) -> anyhow::Result<StepFunction<S, S>> {
    match f {
        FnSpec::Steps { labels, default } => {
            let labels = labels
                .iter()
                .map(|(iv, v)| Ok((interval_set(c, iv)?, scalar_from_json(v)?)))
                .collect::<anyhow::Result<Vec<_>>>()?;
            Ok(StepFunction::from_labels(c.clone(), &labels, scalar_from_json(default)?)?)
        }
        FnSpec::Values(_) => bail!("interval systems take functions as labelled intervals"),
    }
}

/// Uniform seeded points of `[0, c)` on a `2^-40` grid.
fn seeded_points<S: Scalar>(c: &S, count: usize, seed: u64) -> Vec<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| S::from_ratio(rng.gen_range(0..1i128 << 40), 1 << 40) * c.clone())
        .collect()
}

fn run_interval<S: Scalar>(
    map: PiecewiseAffineMap<S>,
    windows: &[Intervals],
    skeleton: Option<&[(usize, Value)]>,
    checks: &[CheckSpec],
    seed: u64,
) -> anyhow::Result<Vec<Outcome>> {
    let c = map.c().clone();
    let members = windows
        .iter()
        .map(|w| Ok(RestrictedLebesgue::new(interval_set(&c, w)?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let skeleton = skeleton
        .map(|sk| sk.iter().map(|(k, w)| Ok((*k, scalar_from_json(w)?))).collect::<capergo_core::Result<Vec<_>>>())
        .transpose()?;
    let sys = IntervalSystem::new(map, members, skeleton).context("interval system")?;
    let member = |k: usize| -> anyhow::Result<RestrictedLebesgue<S>> {
        sys.upper.members.get(k).cloned().ok_or_else(|| anyhow!("no member {k}"))
    };
    checks
        .iter()
        .map(|ch| -> anyhow::Result<Outcome> {
            let ctx = || format!("check {}", ch.name);
            Ok(match &ch.kind {
                CheckKind::Independence { member: k, b, c: cc, n, tol } => outcome(
                    independence_check(&sys, &member(*k)?, &interval_event(&c, b)?, &interval_event(&c, cc)?, *n, *tol)
                        .with_context(ctx)?,
                ),
                CheckKind::SquaredDeviation { member: k, b, c: cc, n, tol } => outcome(
                    squared_deviation_check(&sys, &member(*k)?, &interval_event(&c, b)?, &interval_event(&c, cc)?, *n, *tol)
                        .with_context(ctx)?,
                ),
                CheckKind::SqrtMoment { member: k, b, c: cc, r, n, tol } => {
                    let rep = sqrt_moment_check(&sys, &member(*k)?, &interval_event(&c, b)?, &interval_event(&c, cc)?, *r, *n, *tol)
                        .with_context(ctx)?;
                    (rep.verdict, to_json(&rep), Some(checkpoints_csv(&rep.checkpoints)))
                }
                CheckKind::ChoquetIndependence { f, g, n, tol, grid } => outcome(
                    sys.choquet_independence(&step_function(&c, f)?, &step_function(&c, g)?, *n, *grid, *tol)
                        .with_context(ctx)?,
                ),
                CheckKind::ProcessSlln { h, depth, n, tol, samples } => {
                    let rep = sys
                        .process_slln(&step_function(&c, h)?, *depth, *n, *samples, check_seed(seed, &ch.name), *tol)
                        .with_context(ctx)?;
                    (rep.stationary && rep.slln.verdict, to_json(&rep), Some(rep.slln.to_csv()))
                }
                CheckKind::OrbitAverage { f, points, n, tol } => {
                    let f = step_function(&c, f)?;
                    let target = sys
                        .skeleton_expectation(&f)?
                        .ok_or_else(|| anyhow!("check {}: no skeleton declared", ch.name))?
                        .to_f64();
                    let mut csv = String::from("point,average,target,deviation\n");
                    let mut worst: f64 = 0.0;
                    for x in seeded_points(&c, *points, check_seed(seed, &ch.name)) {
                        let avg = orbit_average(&sys.map, &f, &x, *n).with_context(ctx)?.to_f64();
                        let dev = (avg - target).abs();
                        worst = worst.max(dev);
                        csv.push_str(&format!("{x},{avg},{target},{dev}\n"));
                    }
                    (worst <= *tol, json!({"target": target, "max_deviation": worst, "tolerance": tol, "points": points, "n": n}), Some(csv))
                }
                CheckKind::Eigenfunction { f, lambda } => {
                    let real = step_function(&c, f)?;
                    let labels: Vec<(IntervalSet<S>, Complex64)> = real
                        .pieces()
                        .map(|(a, b, v)| Ok((IntervalSet::interval(c.clone(), a, b)?, Complex64::new(v.to_f64(), 0.0))))
                        .collect::<capergo_core::Result<_>>()?;
                    let fc = StepFunction::from_labels(c.clone(), &labels, Complex64::new(0.0, 0.0))?;
                    let lam = Complex64::new(lambda.0, lambda.1);
                    let ok = verify_eigenfunction(&fc, &sys.map, lam);
                    let constant = real.distinct_values().len() <= 1;
                    (ok, json!({"eigenfunction": ok, "nonconstant": !constant, "lambda": lambda}), None)
                }
                _ => return Err(unsupported(ch, "interval")),
            })
        })
        .collect()
}

fn integer_set(spec: &IntegerSetSpec, bound: i64) -> DensitySubset {
    match spec {
        IntegerSetSpec::PowerBlocks => DensitySubset::power_blocks(bound),
        IntegerSetSpec::Even => DensitySubset::even_integers(bound),
        IntegerSetSpec::Points { points } => DensitySubset::from_points(points.clone(), bound),
    }
}

/// The two split limits of the oscillating square-root means, along `2^(2k)` and `2^(2k+1)`.
pub fn oscillating_targets() -> (f64, f64) {
    let s2 = std::f64::consts::SQRT_2;
    (1.0 / 3.0 + 1.0 / (6.0 * s2), 1.0 / 6.0 + 1.0 / (3.0 * s2))
}

fn run_integer_check(ch: &CheckSpec) -> anyhow::Result<Outcome> {
    let ctx = || format!("check {}", ch.name);
    Ok(match &ch.kind {
        CheckKind::Density { set, windows, bound, schedule, subsequences, targets, tol, min_gap } => {
            if targets.len() != subsequences.len() {
                bail!("check {}: one target per subsequence", ch.name);
            }
            let a = integer_set(set, *bound);
            let rep = density(&a, *windows, schedule, subsequences).with_context(ctx)?;
            let close = rep.subsequences.iter().zip(targets).all(|(s, t)| (s.estimate - t).abs() <= *tol);
            let estimates: Vec<f64> = rep.subsequences.iter().map(|s| s.estimate).collect();
            let spread = estimates.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                - estimates.iter().copied().fold(f64::INFINITY, f64::min);
            let separated = min_gap.is_none_or(|g| spread >= g);
            let mut csv = String::from("series,n,density\n");
            for (n, d) in &rep.values {
                csv.push_str(&format!("schedule,{n},{d}\n"));
            }
            for s in &rep.subsequences {
                for (n, d) in &s.values {
                    csv.push_str(&format!("{},{n},{d}\n", s.label));
                }
            }
            (close && separated, json!({"report": rep, "spread": spread}), Some(csv))
        }
        CheckKind::NullDensity { sequence, limit, horizon, m, tol, max_density } => {
            let seq: Vec<f64> = match sequence {
                SequenceSpec::PowersOfTwo => (0..*horizon).map(|n| if n.is_power_of_two() { 1.0 } else { 0.0 }).collect(),
                SequenceSpec::DoublingCorrelation { b, c } => {
                    let one = Rational::one();
                    let p = RestrictedLebesgue::new(IntervalSet::full(one.clone()));
                    let map = PiecewiseAffineMap::<Rational>::doubling();
                    correlation_sequence(&p, &map, &interval_set(&one, b)?, &interval_set(&one, c)?, *horizon, usize::MAX)
                        .with_context(ctx)?
                        .iter()
                        .map(Scalar::to_f64)
                        .collect()
                }
            };
            let cert = extract_null_density_set(&seq, *limit, *m, *tol).with_context(ctx)?;
            let last = cert.densities.last().map_or(f64::INFINITY, |d| d.1);
            let mut csv = String::from("n,density\n");
            for (n, d) in &cert.densities {
                csv.push_str(&format!("{n},{d}\n"));
            }
            (cert.blocks_hold() && last <= *max_density, to_json(&cert), Some(csv))
        }
        CheckKind::OscillatingMeans { k, tol, plain_tol } => {
            let r = oscillating_sqrt_means(*k).with_context(ctx)?;
            let (even, odd) = oscillating_targets();
            let ok = (r.sqrt_mean_even - even).abs() <= *tol
                && (r.sqrt_mean_odd - odd).abs() <= *tol
                && (r.plain_mean_even - 0.25).abs() <= *plain_tol
                && (r.plain_mean_odd - 0.25).abs() <= *plain_tol;
            (ok, json!({"means": r, "targets": [even, odd, 0.25]}), None)
        }
        _ => return Err(unsupported(ch, "integer")),
    })
}

fn run_bitstream_check(ch: &CheckSpec, seed: u64) -> anyhow::Result<Outcome> {
    let CheckKind::PolynomialBirkhoff { poly, f, streams, n, target, tol, min_pass } = &ch.kind else {
        return Err(unsupported(ch, "bitstream"));
    };
    let one = Rational::one();
    let f = step_function(&one, f)?;
    let reach = (1..=*n as i64)
        .map(|i| poly.iter().rev().fold(0i64, |acc, &a| acc.saturating_mul(i).saturating_add(a)))
        .max()
        .unwrap_or(0);
    if reach < 0 || reach > 1 << 32 {
        bail!("check {}: polynomial offsets out of range", ch.name);
    }
    let budget = reach as usize + 128;
    let mut csv = String::from("stream,average,target,deviation\n");
    let mut passes = 0;
    let mut averages = Vec::new();
    for s in 0..*streams {
        let x = BitstreamPoint::seeded(seed.wrapping_add(s as u64), budget);
        let avg = polynomial_orbit_average(&f, poly, &x, *n).with_context(|| format!("check {}", ch.name))?.to_f64();
        let dev = (avg - target).abs();
        if dev <= *tol {
            passes += 1;
        }
        averages.push(avg);
        csv.push_str(&format!("{s},{avg},{target},{dev}\n"));
    }
    Ok((passes >= *min_pass, json!({"averages": averages, "passes": passes, "min_pass": min_pass}), Some(csv)))
}

fn run_cocycle<B: BaseDynamics>(
    gen: &MatrixGen,
    base: &B,
    omega: &B::Point,
    periodic: Option<(&Endomap, usize)>,
    checks: &[CheckSpec],
) -> anyhow::Result<Vec<Outcome>> {
    checks
        .iter()
        .map(|ch| -> anyhow::Result<Outcome> {
            let ctx = || format!("check {}", ch.name);
            Ok(match &ch.kind {
                CheckKind::Lyapunov { n, renorm_period, tol } => {
                    let spectrum = lyapunov_qr(gen, base, omega, *n, *renorm_period).with_context(ctx)?;
                    let fk = compound_consistency(gen, base, omega, *n, &spectrum).with_context(ctx)?;
                    let oracle = match periodic {
                        Some((map, w)) => Some(monodromy_oracle(gen, map, &cycle_from(map, w)).with_context(ctx)?),
                        None => None,
                    };
                    let oracle_gap = oracle.as_ref().map(|o| {
                        o.exponents.iter().zip(&spectrum.exponents).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
                    });
                    let ok = fk.iter().all(|c| c.difference <= *tol) && oracle_gap.is_none_or(|g| g <= *tol);
                    let csv = spectrum.to_csv();
                    (ok, json!({"spectrum": spectrum, "monodromy": oracle, "oracle_gap": oracle_gap, "compound": fk}), Some(csv))
                }
                CheckKind::Oseledets { n, gap_tol, angle_tol } => {
                    let approx = oseledets_filtration(gen, base, omega, *n, *gap_tol).with_context(ctx)?;
                    let angles_ok = approx.blocks.iter().all(|b| b.angles.last().is_none_or(|a| a.1 <= *angle_tol));
                    let mut csv = String::from("block,exponent,multiplicity,directional,shifted_directional,final_angle\n");
                    for (i, b) in approx.blocks.iter().enumerate() {
                        let angle = b.angles.last().map_or(0.0, |a| a.1);
                        csv.push_str(&format!(
                            "{},{},{},{},{},{}\n",
                            i + 1,
                            b.exponent,
                            b.multiplicity,
                            b.directional,
                            b.shifted_directional,
                            angle
                        ));
                    }
                    (approx.verdict && angles_ok, to_json(&approx), Some(csv))
                }
                CheckKind::Subadditive { k, horizon } => {
                    let rep = subadditive_check(gen, base, omega, *k, *horizon).with_context(ctx)?;
                    (rep.subadditive && rep.bounded, to_json(&rep), None)
                }
                _ => return Err(unsupported(ch, "cocycle")),
            })
        })
        .collect()
}

/// Applies `key=value` overrides: dotted paths into the scenario JSON (`checks.0.n=10`),
/// `seed`, or a bare key set on every check that has it.
pub fn apply_overrides(s: &Scenario, sets: &[String]) -> anyhow::Result<Scenario> {
    let mut v = serde_json::to_value(s)?;
    for item in sets {
        let (key, raw) = item.split_once('=').ok_or_else(|| anyhow!("override {item:?} is not key=value"))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        if key.contains('.') {
            let mut cur = &mut v;
            for seg in key.split('.') {
                cur = match cur {
                    Value::Array(a) => {
                        let i: usize = seg.parse().map_err(|_| anyhow!("override {key}: {seg:?} is not an index"))?;
                        a.get_mut(i).ok_or_else(|| anyhow!("override {key}: index {i} out of range"))?
                    }
                    Value::Object(m) => m.get_mut(seg).ok_or_else(|| anyhow!("override {key}: no field {seg:?}"))?,
                    _ => bail!("override {key}: cannot descend into a scalar"),
                };
            }
            *cur = value;
        } else if v.get(key).is_some() {
            v[key] = value;
        } else {
            let mut hit = false;
            for c in v["checks"].as_array_mut().expect("checks array") {
                if let Some(slot) = c.get_mut(key) {
                    *slot = value.clone();
                    hit = true;
                }
            }
            if !hit {
                bail!("override {key}: no scenario field or check parameter of that name");
            }
        }
    }
    let out: Scenario = serde_json::from_value(v).context("overridden scenario")?;
    out.validate().map_err(|e| anyhow!("scenario {}: {e}", out.name))?;
    Ok(out)
}

/// Resolves a built-in name or a scenario file path.
pub fn load_scenario(target: &str) -> anyhow::Result<Scenario> {
    if let Some(s) = crate::registry::find(target) {
        return Ok(s);
    }
    let path = std::path::Path::new(target);
    if !path.exists() {
        bail!("unknown scenario {target:?}");
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {target}"))?;
    let s: Scenario = serde_json::from_str(&text).with_context(|| format!("parsing {target}"))?;
    Ok(s)
}

/// Writes `report.json`, one CSV per check, and `timing.json`.
pub fn write_outputs(report: &RunReport, out: &std::path::Path, wall_ms: u128) -> anyhow::Result<std::path::PathBuf> {
    let dir = out.join(&report.scenario);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("report.json"), report_json(report))?;
    for c in &report.checks {
        if let Some(csv) = &c.csv {
            std::fs::write(dir.join(format!("{}.csv", c.name)), csv)?;
        }
    }
    std::fs::write(dir.join("timing.json"), format!("{{\"wall_ms\": {wall_ms}}}\n"))?;
    Ok(dir)
}

pub fn report_json(report: &RunReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::find;

    #[test]
    fn zero_horizon_override_is_a_config_error() {
        let s = find("doubling-weak-mixing").unwrap();
        assert!(apply_overrides(&s, &["n=0".into()]).is_err());
        assert!(apply_overrides(&s, &["checks.0.n=0".into()]).is_err());
    }

    #[test]
    fn overrides_reach_seed_and_nested_fields() {
        let s = find("rotation-swap-ergodic").unwrap();
        let o = apply_overrides(&s, &["seed=99".into(), "checks.0.n=500".into()]).unwrap();
        assert_eq!(o.seed, 99);
        assert!(matches!(o.checks[0].kind, CheckKind::Independence { n: 500, .. }));
        assert!(apply_overrides(&s, &["bogus=1".into()]).is_err());
        assert!(apply_overrides(&s, &["checks.9.n=1".into()]).is_err());
    }

    #[test]
    fn z_density_counterexample_passes() {
        let r = run_scenario(&find("z-density-counterexample").unwrap()).unwrap();
        assert!(r.verdict);
        let spread = r.checks[0].detail["spread"].as_f64().unwrap();
        assert!(spread >= 0.1);
    }

    #[test]
    fn doubling_paste_fails_weak_mixing_as_declared() {
        let r = run_scenario(&find("doubling-paste-not-weakmixing").unwrap()).unwrap();
        assert!(r.verdict);
        let sq = r.checks.iter().find(|c| c.op == "squared_deviation").unwrap();
        assert_eq!(sq.expect, Expect::Fail);
        assert!(!sq.outcome);
    }

    #[test]
    fn flipped_expectation_fails_the_run() {
        let s = find("finite-non-ergodic").unwrap();
        let s = apply_overrides(&s, &["checks.0.expect=\"pass\"".into()]).unwrap();
        assert!(!run_scenario(&s).unwrap().verdict);
    }

    #[test]
    fn parallel_matches_sequential() {
        let s = find("finite-ergodic-transient").unwrap();
        let a = report_json(&run_scenario(&s).unwrap());
        let b = report_json(&run_scenario_parallel(&s).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_regime_check_is_rejected() {
        let mut s = find("oscillating-sqrt-means").unwrap();
        s.checks[0].kind = CheckKind::Ergodicity;
        assert!(run_scenario(&s).is_err());
    }

    #[test]
    fn outputs_land_under_scenario_dir() {
        let s = find("absorbing-weak-mixing").unwrap();
        let r = run_scenario(&s).unwrap();
        let tmp = std::env::temp_dir().join(format!("capergo-test-{}", std::process::id()));
        let dir = write_outputs(&r, &tmp, 1).unwrap();
        let text = std::fs::read_to_string(dir.join("report.json")).unwrap();
        assert_eq!(text, report_json(&r));
        assert!(dir.join("squared-deviation.csv").exists());
        assert!(dir.join("weak-mixing.csv").exists());
        std::fs::remove_dir_all(tmp).unwrap();
    }
}
