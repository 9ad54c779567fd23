//! Convergence checks for the ergodic characterizations, over finite and interval systems.
//!
//! Finite systems are eventually periodic, so their Cesàro limits are computed
//! exactly from one period after the transient. Interval systems report partial
//! means at checkpoints `N/8, N/4, N/2, N` against a tolerance.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::finitedyn::{
    common_cond_exp, cycle_decomposition, ergodic_skeleton, invariant_atoms, skeleton, CycleDecomposition, Endomap,
};
use crate::intervaldyn::{
    correlation_sequence, orbit_average, IntervalSet, PiecewiseAffineMap, RestrictedLebesgue, StepFunction,
    UpperLebesgue, DEFAULT_PIECE_BUDGET,
};
use crate::scalar::{Rational, Scalar};
use crate::setfun::{choquet_integral, Capacity, EventSet, ProbabilityVector, SetFunction, UpperProbability};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Finite,
    Interval,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Checkpoint {
    pub n: usize,
    pub partial_mean: f64,
    pub target: f64,
    pub deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub target: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_exact: Option<String>,
    /// Exact Cesàro limit, when the sequence is known to be eventually periodic.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit_exact: Option<String>,
    pub checkpoints: Vec<Checkpoint>,
    pub final_deviation: f64,
    pub tolerance: f64,
    pub verdict: bool,
}

impl ConvergenceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("checkpoint,partial_mean,target,deviation\n");
        for c in &self.checkpoints {
            out.push_str(&format!("{},{},{},{}\n", c.n, c.partial_mean, c.target, c.deviation));
        }
        out
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "verdict": self.verdict,
            "final_deviation": self.final_deviation,
            "tolerance": self.tolerance,
        })
    }
}

/// Result of a check that needs the ergodic skeleton `Q`.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum CheckOutcome {
    Checked(ConvergenceReport),
    /// The system is not ergodic, so there is no `Q` to compare against.
    MissingSkeleton { witness: String },
}

impl CheckOutcome {
    pub fn report(&self) -> Option<&ConvergenceReport> {
        match self {
            CheckOutcome::Checked(r) => Some(r),
            CheckOutcome::MissingSkeleton { .. } => None,
        }
    }
}

/// `N/8, N/4, N/2, N`, strictly increasing and positive.
pub fn checkpoints(n: usize) -> Vec<usize> {
    let mut out: Vec<usize> = [n / 8, n / 4, n / 2, n].into_iter().filter(|&k| k > 0).collect();
    out.dedup();
    out
}

/// A term sequence, either explicit or eventually periodic.
#[derive(Clone, Debug)]
pub enum Terms<V> {
    Plain(Vec<V>),
    /// `seq[transient..]` repeats forever; `seq.len() == transient + period`.
    Periodic { seq: Vec<V>, transient: usize },
}

impl<V: Scalar> Terms<V> {
    fn prefix(seq: &[V]) -> Vec<V> {
        let mut out = Vec::with_capacity(seq.len() + 1);
        out.push(V::zero());
        for v in seq {
            let next = out.last().expect("nonempty").clone() + v.clone();
            out.push(next);
        }
        out
    }

    /// `sum_{i<n}` of the terms.
    pub fn sum_first(&self, n: usize, prefix: &[V]) -> V {
        match self {
            Terms::Plain(seq) => prefix[n.min(seq.len())].clone(),
            Terms::Periodic { seq, transient } => {
                let len = seq.len();
                if n <= len {
                    return prefix[n].clone();
                }
                let period = len - transient;
                let per_period = prefix[len].clone() - prefix[*transient].clone();
                let extra = n - len;
                let (q, r) = (extra / period, extra % period);
                prefix[len].clone()
                    + per_period * V::from_i64(q as i64)
                    + (prefix[transient + r].clone() - prefix[*transient].clone())
            }
        }
    }

    pub fn limit(&self) -> Option<V> {
        match self {
            Terms::Plain(_) => None,
            Terms::Periodic { seq, transient } => {
                let period = seq.len() - transient;
                let total = seq[*transient..].iter().fold(V::zero(), |a, b| a + b.clone());
                Some(total / V::from_i64(period as i64))
            }
        }
    }

    pub fn map<W: Scalar>(&self, f: impl Fn(&V) -> W) -> Terms<W> {
        match self {
            Terms::Plain(seq) => Terms::Plain(seq.iter().map(f).collect()),
            Terms::Periodic { seq, transient } => Terms::Periodic { seq: seq.iter().map(f).collect(), transient: *transient },
        }
    }

    fn seq(&self) -> &[V] {
        match self {
            Terms::Plain(seq) | Terms::Periodic { seq, .. } => seq,
        }
    }

    /// Cesàro report: exact limit when periodic (tolerance 0), otherwise the mean of the first `n` terms.
    pub fn report(&self, target: &V, n: usize, tol: f64) -> ConvergenceReport {
        let prefix = Self::prefix(self.seq());
        let t = target.to_f64();
        let checkpoints = checkpoints(n)
            .into_iter()
            .map(|k| {
                let mean = (self.sum_first(k, &prefix) / V::from_i64(k as i64)).to_f64();
                Checkpoint { n: k, partial_mean: mean, target: t, deviation: (mean - t).abs() }
            })
            .collect::<Vec<_>>();
        match self.limit() {
            Some(limit) => {
                let exact = V::EXACT;
                let verdict = limit.approx_eq(target);
                ConvergenceReport {
                    target: t,
                    target_exact: exact.then(|| target.to_string()),
                    limit_exact: exact.then(|| limit.to_string()),
                    checkpoints,
                    final_deviation: (limit - target.clone()).abs().to_f64(),
                    tolerance: 0.0,
                    verdict,
                }
            }
            None => {
                let final_deviation = checkpoints.last().map_or(f64::INFINITY, |c| c.deviation);
                ConvergenceReport {
                    target: t,
                    target_exact: None,
                    limit_exact: None,
                    checkpoints,
                    final_deviation,
                    tolerance: tol,
                    verdict: final_deviation <= tol,
                }
            }
        }
    }
}

/// Uniform facade over the finite and interval test subjects.
pub trait MeasuredSystem {
    type Event: Clone;
    type Value: Scalar;
    type Prob;

    fn regime(&self) -> Regime;

    fn prob(&self, p: &Self::Prob, a: &Self::Event) -> Result<Self::Value>;

    /// `Q(a)` for the ergodic skeleton, `None` when the system is not ergodic.
    fn skeleton_prob(&self, a: &Self::Event) -> Result<Option<Self::Value>>;

    fn missing_skeleton_witness(&self) -> String;

    /// `[P(B ∩ T^{-i} C)]`, exact-periodic where the regime allows; `n` terms otherwise.
    fn correlations(&self, p: &Self::Prob, b: &Self::Event, c: &Self::Event, n: usize) -> Result<Terms<Self::Value>>;
}

/// Cesàro mean of `P(B ∩ T^{-i} C)` against `P(B) Q(C)`.
pub fn independence_check<M: MeasuredSystem>(
    sys: &M,
    p: &M::Prob,
    b: &M::Event,
    c: &M::Event,
    n: usize,
    tol: f64,
) -> Result<CheckOutcome> {
    require_positive(n)?;
    let Some(qc) = sys.skeleton_prob(c)? else {
        return Ok(CheckOutcome::MissingSkeleton { witness: sys.missing_skeleton_witness() });
    };
    let target = sys.prob(p, b)? * qc;
    Ok(CheckOutcome::Checked(sys.correlations(p, b, c, n)?.report(&target, n, tol)))
}

/// Cesàro mean of `|P(B ∩ T^{-i} C) - P(B) Q(C)|^2` against zero.
pub fn squared_deviation_check<M: MeasuredSystem>(
    sys: &M,
    p: &M::Prob,
    b: &M::Event,
    c: &M::Event,
    n: usize,
    tol: f64,
) -> Result<CheckOutcome> {
    require_positive(n)?;
    let Some(qc) = sys.skeleton_prob(c)? else {
        return Ok(CheckOutcome::MissingSkeleton { witness: sys.missing_skeleton_witness() });
    };
    let product = sys.prob(p, b)? * qc;
    let terms = sys.correlations(p, b, c, n)?.map(|x| {
        let d = x.clone() - product.clone();
        d.clone() * d
    });
    Ok(CheckOutcome::Checked(terms.report(&M::Value::zero(), n, tol)))
}

fn require_positive(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::InvalidArgument("horizon N must be positive".into()))
    } else {
        Ok(())
    }
}

/// A finite map with an invariant upper probability.
#[derive(Clone, Debug)]
pub struct FiniteSystem {
    t: Endomap,
    v: UpperProbability<Rational>,
    table: Capacity<Rational>,
    cd: CycleDecomposition,
    q: Option<ProbabilityVector<Rational>>,
    witness: Option<EventSet>,
}

impl FiniteSystem {
    pub fn new(t: Endomap, v: UpperProbability<Rational>) -> Result<Self> {
        if v.points() != t.n() {
            return Err(Error::SizeMismatch { expected: t.n(), got: v.points() });
        }
        let es = ergodic_skeleton(&v, &t)?;
        let cd = cycle_decomposition(&t);
        let table = v.to_capacity();
        Ok(FiniteSystem { t, v, table, cd, q: es.q, witness: es.witness })
    }

    pub fn map(&self) -> &Endomap {
        &self.t
    }

    pub fn upper(&self) -> &UpperProbability<Rational> {
        &self.v
    }

    pub fn skeleton(&self) -> Option<&ProbabilityVector<Rational>> {
        self.q.as_ref()
    }

    fn horizon(&self) -> Result<(usize, usize)> {
        let period = self
            .cd
            .period()
            .filter(|&p| p <= crate::finitedyn::HORIZON_CAP)
            .ok_or(Error::HorizonExceeded { horizon: u128::MAX, cap: crate::finitedyn::HORIZON_CAP })?;
        Ok((self.cd.max_entry(), period as usize))
    }

    /// Invariant events `B, C` and a member `P` with `lim P(B ∩ T^{-i} C) != P(B) Q'(C)`,
    /// where `Q'` is the skeleton of the first member. Exists whenever the system is not ergodic.
    pub fn independence_failure(&self) -> Result<Option<(EventSet, EventSet, usize)>> {
        let q = skeleton(&self.v.lambda()[0], &self.t);
        let full = EventSet::full(self.t.n());
        for a in invariant_atoms(&self.t).events() {
            let ac = full.difference(a);
            for (b, c) in [(a, ac), (ac, a)] {
                for (k, p) in self.v.lambda().iter().enumerate() {
                    let limit = self.correlations(p, &b, &c, 1)?.limit().expect("finite terms are periodic");
                    if limit != p.prob(b) * q.prob(c) {
                        return Ok(Some((b, c, k)));
                    }
                }
            }
        }
        Ok(None)
    }

    /// Points outside the maximal null set of `V`.
    pub fn support_points(&self) -> Vec<usize> {
        (0..self.t.n())
            .filter(|&i| !self.table.value(EventSet::singleton(i)).is_zero())
            .collect()
    }

    fn orbit_terms(&self, g: &[Rational], omega: usize) -> Result<Terms<Rational>> {
        let (transient, period) = self.horizon()?;
        let mut x = omega;
        let mut seq = Vec::with_capacity(transient + period);
        for _ in 0..transient + period {
            seq.push(g[x].clone());
            x = self.t.apply(x);
        }
        Ok(Terms::Periodic { seq, transient })
    }

    /// `∫ f (1/N) sum g o T^i dV` against `(∫ f dV)(∫ g dQ)`; exact limit `∫ f E(g|I) dV`.
    pub fn choquet_independence(&self, f: &[Rational], g: &[Rational], n: usize) -> Result<CheckOutcome> {
        require_positive(n)?;
        let npts = self.t.n();
        if f.len() != npts || g.len() != npts {
            return Err(Error::SizeMismatch { expected: npts, got: f.len().min(g.len()) });
        }
        if g.iter().any(|x| x.is_negative()) {
            return Err(Error::InvalidArgument("g must be nonnegative".into()));
        }
        let Some(q) = &self.q else {
            return Ok(CheckOutcome::MissingSkeleton { witness: self.missing_skeleton_witness() });
        };
        let target = choquet_integral(&self.table, f) * q.expectation(g);
        let terms: Vec<Terms<Rational>> = (0..npts).map(|w| self.orbit_terms(g, w)).collect::<Result<_>>()?;
        let prefixes: Vec<Vec<Rational>> = terms.iter().map(|t| Terms::prefix(t.seq())).collect();
        let at = |k: usize| -> Rational {
            let h: Vec<Rational> = (0..npts)
                .map(|w| f[w].clone() * terms[w].sum_first(k, &prefixes[w]) / Rational::from_i64(k as i64))
                .collect();
            choquet_integral(&self.table, &h)
        };
        let t = Scalar::to_f64(&target);
        let checkpoints = checkpoints(n)
            .into_iter()
            .map(|k| {
                let v = Scalar::to_f64(&at(k));
                Checkpoint { n: k, partial_mean: v, target: t, deviation: (v - t).abs() }
            })
            .collect();
        let cce = common_cond_exp(g, &self.t);
        let limit_fn: Vec<Rational> = f.iter().zip(&cce).map(|(a, b)| a * b).collect();
        let limit = choquet_integral(&self.table, &limit_fn);
        Ok(CheckOutcome::Checked(ConvergenceReport {
            target: t,
            target_exact: Some(target.to_string()),
            limit_exact: Some(limit.to_string()),
            checkpoints,
            final_deviation: Scalar::to_f64(&Scalar::abs(&(&limit - &target))),
            tolerance: 0.0,
            verdict: limit == target,
        }))
    }

    /// Stationarity of `Y_n = h o T^{n-1}` over all cylinder events of length `depth`,
    /// and exact SLLN limits at every non-null point.
    pub fn process_slln(&self, h: &[Rational], depth: usize, n: usize) -> Result<ProcessReport> {
        require_positive(n)?;
        if depth == 0 || depth > MAX_CYLINDER_DEPTH {
            return Err(Error::BudgetExceeded { iterate: depth, what: format!("cylinder depth limit {MAX_CYLINDER_DEPTH}") });
        }
        let npts = self.t.n();
        let word = |w: usize, start: usize| -> Vec<&Rational> {
            (0..depth).map(|j| &h[self.t.iterate(w, start + j)]).collect()
        };
        let mut stationarity_witness = None;
        'outer: for start in 0..depth {
            // Points grouped by the word they produce at times `start` and `start + 1`.
            let mut words: Vec<Vec<&Rational>> = Vec::new();
            let mut class_now = vec![0usize; npts];
            let mut class_next = vec![0usize; npts];
            for w in 0..npts {
                for (slot, s) in [(&mut class_now, start), (&mut class_next, start + 1)] {
                    let wd = word(w, s);
                    let idx = words.iter().position(|x| *x == wd).unwrap_or_else(|| {
                        words.push(wd);
                        words.len() - 1
                    });
                    slot[w] = idx;
                }
            }
            if words.len() > 20 {
                return Err(Error::BudgetExceeded { iterate: start, what: format!("{} cylinder words", words.len()) });
            }
            for sel in 0u64..1 << words.len() {
                let pick = |classes: &[usize]| {
                    EventSet::from_points(&(0..npts).filter(|&w| sel >> classes[w] & 1 == 1).collect::<Vec<_>>())
                };
                let (a, b) = (pick(&class_now), pick(&class_next));
                if self.table.value(a) != self.table.value(b) {
                    stationarity_witness = Some(format!("time {}, events {a} vs {b}", start + 1));
                    break 'outer;
                }
            }
        }

        let target = match &self.q {
            Some(q) => q.expectation(h),
            None => return Err(Error::InvalidArgument("SLLN target needs an ergodic system".into())),
        };
        let mut worst: Option<ConvergenceReport> = None;
        let mut per_point = Vec::new();
        for w in self.support_points() {
            let terms = self.orbit_terms(h, w)?;
            let report = terms.report(&target, n, 0.0);
            per_point.push(PointAverage { point: w.to_string(), average: report.checkpoints.last().map_or(f64::NAN, |c| c.partial_mean), verdict: report.verdict });
            if worst.as_ref().is_none_or(|r| report.final_deviation > r.final_deviation) {
                worst = Some(report);
            }
        }
        let slln = worst.ok_or_else(|| Error::Internal("no support points".into()))?;
        Ok(ProcessReport { stationary: stationarity_witness.is_none(), stationarity_witness, slln, per_point })
    }
}

/// Cylinder depth limit for stationarity checks.
pub const MAX_CYLINDER_DEPTH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PointAverage {
    pub point: String,
    pub average: f64,
    pub verdict: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProcessReport {
    pub stationary: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stationarity_witness: Option<String>,
    /// The sample point farthest from the target.
    pub slln: ConvergenceReport,
    pub per_point: Vec<PointAverage>,
}

impl MeasuredSystem for FiniteSystem {
    type Event = EventSet;
    type Value = Rational;
    type Prob = ProbabilityVector<Rational>;

    fn regime(&self) -> Regime {
        Regime::Finite
    }

    fn prob(&self, p: &Self::Prob, a: &EventSet) -> Result<Rational> {
        Ok(p.prob(*a))
    }

    fn skeleton_prob(&self, a: &EventSet) -> Result<Option<Rational>> {
        Ok(self.q.as_ref().map(|q| q.prob(*a)))
    }

    fn missing_skeleton_witness(&self) -> String {
        self.witness.map_or_else(String::new, |w| w.mask_string())
    }

    fn correlations(&self, p: &Self::Prob, b: &EventSet, c: &EventSet, _n: usize) -> Result<Terms<Rational>> {
        let (transient, period) = self.horizon()?;
        let mut pulled = *c;
        let mut seq = Vec::with_capacity(transient + period);
        for _ in 0..transient + period {
            seq.push(p.prob(b.intersect(pulled)));
            pulled = self.t.preimage(pulled);
        }
        Ok(Terms::Periodic { seq, transient })
    }
}

/// A piecewise affine map with `V = max` of restricted Lebesgue measures and a declared skeleton.
#[derive(Clone, Debug)]
pub struct IntervalSystem<S> {
    pub map: PiecewiseAffineMap<S>,
    pub upper: UpperLebesgue<S>,
    /// `Q = sum_k w_k P_k / |W_k|` over member indices `k`.
    pub skeleton: Option<Vec<(usize, S)>>,
    pub piece_budget: usize,
}

impl<S: Scalar> IntervalSystem<S> {
    /// Checks invariance of `V` on the member windows, their halves and a few seeded intervals.
    pub fn new(
        map: PiecewiseAffineMap<S>,
        members: Vec<RestrictedLebesgue<S>>,
        skeleton: Option<Vec<(usize, S)>>,
    ) -> Result<Self> {
        let upper = UpperLebesgue { members };
        let c = map.c().clone();
        let mut probes: Vec<IntervalSet<S>> = upper.members.iter().map(|m| m.window.clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..8 {
            let mut a: f64 = rng.gen();
            let mut b: f64 = rng.gen();
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            let to_s = |x: f64| S::from_ratio((x * 1024.0).floor() as i128, 1024) * c.clone();
            probes.push(IntervalSet::interval(c.clone(), to_s(a), to_s(b))?);
        }
        if let Some(a) = upper.invariance_witness(&map, &probes)? {
            return Err(Error::NonInvariant { witness: format!("{:?}", a.pieces()) });
        }
        if let Some(sk) = &skeleton {
            if sk.iter().any(|(k, _)| *k >= upper.members.len()) {
                return Err(Error::InvalidArgument("skeleton refers to a missing member".into()));
            }
            let total = sk.iter().fold(S::zero(), |acc, (_, w)| acc + w.clone());
            if !total.approx_eq(&S::one()) {
                return Err(Error::InvalidArgument(format!("skeleton weights sum to {total}")));
            }
        }
        Ok(IntervalSystem { map, upper, skeleton, piece_budget: DEFAULT_PIECE_BUDGET })
    }

    /// Two unit windows on `[0, 2)` with `Q` their average.
    fn paired(map: PiecewiseAffineMap<S>) -> Result<Self> {
        let two = S::from_i64(2);
        let members = vec![RestrictedLebesgue::unit_window(two.clone(), 1)?, RestrictedLebesgue::unit_window(two, 2)?];
        let half = S::from_ratio(1, 2);
        Self::new(map, members, Some(vec![(0, half.clone()), (1, half)]))
    }

    pub fn rotation_swap(alpha: S) -> Result<Self> {
        Self::paired(PiecewiseAffineMap::rotation_swap(alpha)?)
    }

    pub fn doubling_paste() -> Result<Self> {
        Self::paired(PiecewiseAffineMap::doubling_paste())
    }

    /// Lebesgue measure on `[0, 1)` under a map of the unit segment.
    pub fn lebesgue(map: PiecewiseAffineMap<S>) -> Result<Self> {
        let members = vec![RestrictedLebesgue::new(IntervalSet::full(map.c().clone()))];
        Self::new(map, members, Some(vec![(0, S::one())]))
    }

    pub fn member(&self, k: usize) -> &RestrictedLebesgue<S> {
        &self.upper.members[k]
    }

    /// Whether `p` is the skeleton itself (a single ergodic invariant component).
    pub fn is_skeleton(&self, p: &RestrictedLebesgue<S>) -> bool {
        match self.skeleton.as_deref() {
            Some([(k, w)]) => w.approx_eq(&S::one()) && self.upper.members[*k].window == p.window,
            _ => false,
        }
    }

    fn q_of(&self, a: &IntervalSet<S>) -> Result<Option<S>> {
        let Some(sk) = &self.skeleton else { return Ok(None) };
        let mut total = S::zero();
        for (k, w) in sk {
            let m = &self.upper.members[*k];
            total = total + w.clone() * m.prob(a)? / m.window.measure();
        }
        Ok(Some(total))
    }

    /// `∫ f dV` for a step function, by telescoping over its level sets.
    pub fn choquet_upper(&self, f: &StepFunction<S, S>) -> Result<S> {
        let mut levels = f.distinct_values();
        levels.sort_by(|a, b| b.partial_cmp(a).expect("NaN level"));
        let lowest = levels.last().cloned().ok_or_else(|| Error::Internal("empty step function".into()))?;
        let mut total = lowest;
        let mut upper_set = IntervalSet::empty(self.map.c().clone());
        for w in levels.windows(2) {
            upper_set = upper_set.union(&f.level_set(&w[0]))?;
            total = total + (w[0].clone() - w[1].clone()) * self.upper.value(&upper_set)?;
        }
        Ok(total)
    }

    /// `∫ g dQ`.
    pub fn skeleton_expectation(&self, g: &StepFunction<S, S>) -> Result<Option<S>> {
        let mut total = S::zero();
        for v in g.distinct_values() {
            let Some(q) = self.q_of(&g.level_set(&v))? else { return Ok(None) };
            total = total + v * q;
        }
        Ok(Some(total))
    }

    /// Midpoints of `per_window` equal cells in each member window, with the member index.
    fn grid(&self, per_window: usize) -> Vec<(usize, S, S)> {
        let mut out = Vec::new();
        for (k, m) in self.upper.members.iter().enumerate() {
            let weight = m.window.measure() / S::from_i64(per_window as i64);
            for (a, b) in m.window.pieces() {
                let len = b.clone() - a.clone();
                let cells = ((len.to_f64() / m.window.measure().to_f64()) * per_window as f64).round().max(1.0) as i64;
                for j in 0..cells {
                    let x = a.clone() + len.clone() * S::from_ratio(2 * j as i128 + 1, 2 * cells as i128);
                    out.push((k, x, weight.clone()));
                }
            }
        }
        out
    }

    /// Grid quadrature of `∫ f (1/N) sum g o T^i dV`; only for isometric maps,
    /// where forward orbits of grid points stay accurate.
    pub fn choquet_independence(
        &self,
        f: &StepFunction<S, S>,
        g: &StepFunction<S, S>,
        n: usize,
        grid: usize,
        tol: f64,
    ) -> Result<CheckOutcome> {
        require_positive(n)?;
        if !self.map.is_isometric() {
            return Err(Error::Refused("grid quadrature needs an isometric map".into()));
        }
        if f.distinct_values().iter().chain(g.distinct_values().iter()).any(|v| v.to_f64() < 0.0) {
            return Err(Error::InvalidArgument("f and g must be nonnegative".into()));
        }
        let Some(eg) = self.skeleton_expectation(g)? else {
            return Ok(CheckOutcome::MissingSkeleton { witness: self.missing_skeleton_witness() });
        };
        let target = (self.choquet_upper(f)? * eg).to_f64();
        let points = self.grid(grid);
        let cps = checkpoints(n);
        let mut sums = vec![vec![0.0f64; cps.len()]; points.len()];
        for (idx, (_, x, _)) in points.iter().enumerate() {
            let mut y = x.clone();
            let mut acc = 0.0;
            let mut next = 0;
            for i in 0..n {
                acc += g.eval(&y).to_f64();
                y = self.map.apply(&y);
                if i + 1 == cps[next] {
                    sums[idx][next] = acc;
                    next += 1;
                }
            }
        }
        let members = self.upper.members.len();
        let checkpoints: Vec<Checkpoint> = cps
            .iter()
            .enumerate()
            .map(|(ci, &k)| {
                let values: Vec<(usize, f64, f64)> = points
                    .iter()
                    .enumerate()
                    .map(|(idx, (m, x, w))| (*m, f.eval(x).to_f64() * sums[idx][ci] / k as f64, w.to_f64()))
                    .collect();
                let v = grid_choquet(&values, members);
                Checkpoint { n: k, partial_mean: v, target, deviation: (v - target).abs() }
            })
            .collect();
        let final_deviation = checkpoints.last().map_or(f64::INFINITY, |c| c.deviation);
        Ok(CheckOutcome::Checked(ConvergenceReport {
            target,
            target_exact: None,
            limit_exact: None,
            checkpoints,
            final_deviation,
            tolerance: tol,
            verdict: final_deviation <= tol,
        }))
    }

    /// Stationarity on single cylinders of `h` (a step function) and per-point SLLN
    /// at grid and seeded sample points.
    #[allow(clippy::too_many_arguments)]
    pub fn process_slln(
        &self,
        h: &StepFunction<S, S>,
        depth: usize,
        n: usize,
        samples: usize,
        seed: u64,
        tol: f64,
    ) -> Result<ProcessReport> {
        require_positive(n)?;
        if depth == 0 || depth > MAX_CYLINDER_DEPTH {
            return Err(Error::BudgetExceeded { iterate: depth, what: format!("cylinder depth limit {MAX_CYLINDER_DEPTH}") });
        }
        let alphabet = h.distinct_values();
        let level: Vec<IntervalSet<S>> = alphabet.iter().map(|v| h.level_set(v)).collect();
        // Cylinders {Y_1 = a_1, ..., Y_depth = a_depth} built right to left.
        let mut cylinders: Vec<IntervalSet<S>> = level.clone();
        for _ in 1..depth {
            let mut next = Vec::new();
            for cyl in &cylinders {
                let pulled = self.map.preimage(cyl)?;
                for l in &level {
                    let e = l.intersect(&pulled)?;
                    if !e.is_empty() {
                        next.push(e);
                    }
                }
            }
            if next.len() > 4096 {
                return Err(Error::BudgetExceeded { iterate: depth, what: format!("{} cylinders", next.len()) });
            }
            cylinders = next;
        }
        let stationarity_witness = self
            .upper
            .invariance_witness(&self.map, &cylinders)?
            .map(|a| format!("cylinder {:?}", a.pieces()));

        let target = self
            .skeleton_expectation(h)?
            .ok_or_else(|| Error::InvalidArgument("SLLN target needs an ergodic system".into()))?;
        let mut starts: Vec<S> = self.grid(samples.div_ceil(2).max(1)).into_iter().map(|(_, x, _)| x).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in &self.upper.members {
            for (a, b) in m.window.pieces() {
                for _ in 0..samples / 2 {
                    let u: f64 = rng.gen();
                    starts.push(a.clone() + (b.clone() - a.clone()) * S::from_ratio((u * (1u64 << 40) as f64) as i128, 1 << 40));
                }
            }
        }
        let mut worst: Option<ConvergenceReport> = None;
        let mut per_point = Vec::new();
        for x in starts {
            let cps = checkpoints(n);
            let t = target.to_f64();
            let mut checkpoints = Vec::new();
            for &k in &cps {
                let v = orbit_average(&self.map, h, &x, k)?.to_f64();
                checkpoints.push(Checkpoint { n: k, partial_mean: v, target: t, deviation: (v - t).abs() });
            }
            let final_deviation = checkpoints.last().map_or(f64::INFINITY, |c| c.deviation);
            let report = ConvergenceReport {
                target: t,
                target_exact: None,
                limit_exact: None,
                final_deviation,
                tolerance: tol,
                verdict: final_deviation <= tol,
                checkpoints,
            };
            per_point.push(PointAverage {
                point: x.to_string(),
                average: report.checkpoints.last().map_or(f64::NAN, |c| c.partial_mean),
                verdict: report.verdict,
            });
            if worst.as_ref().is_none_or(|r| report.final_deviation > r.final_deviation) {
                worst = Some(report);
            }
        }
        let slln = worst.ok_or_else(|| Error::Internal("no sample points".into()))?;
        Ok(ProcessReport { stationary: stationarity_witness.is_none(), stationarity_witness, slln, per_point })
    }
}

/// Choquet integral against `max_k P_k` from weighted samples `(member, value, weight)`.
fn grid_choquet(samples: &[(usize, f64, f64)], members: usize) -> f64 {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[b].1.total_cmp(&samples[a].1).then(a.cmp(&b)));
    let mut mass = vec![0.0f64; members];
    let mut total = 0.0;
    let mut idx = 0;
    while idx < order.len() {
        let level = samples[order[idx]].1;
        while idx < order.len() && samples[order[idx]].1 == level {
            let (m, _, w) = samples[order[idx]];
            mass[m] += w;
            idx += 1;
        }
        let next = if idx < order.len() { samples[order[idx]].1 } else { 0.0 };
        let v = mass.iter().copied().fold(0.0, f64::max);
        total += (level - next) * v;
    }
    // Assumes nonnegative values.
    total
}

impl<S: Scalar> MeasuredSystem for IntervalSystem<S> {
    type Event = IntervalSet<S>;
    type Value = S;
    type Prob = RestrictedLebesgue<S>;

    fn regime(&self) -> Regime {
        Regime::Interval
    }

    fn prob(&self, p: &Self::Prob, a: &IntervalSet<S>) -> Result<S> {
        p.prob(a)
    }

    fn skeleton_prob(&self, a: &IntervalSet<S>) -> Result<Option<S>> {
        self.q_of(a)
    }

    fn missing_skeleton_witness(&self) -> String {
        "no skeleton declared".into()
    }

    fn correlations(&self, p: &Self::Prob, b: &IntervalSet<S>, c: &IntervalSet<S>, n: usize) -> Result<Terms<S>> {
        Ok(Terms::Plain(correlation_sequence(p, &self.map, b, c, n, self.piece_budget)?))
    }
}

/// Exact finite sums `sum_s c_s sqrt(s)` over squarefree `s`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RadicalSum {
    terms: BTreeMap<BigInt, Rational>,
}

impl RadicalSum {
    pub fn rational(q: Rational) -> Self {
        let mut out = RadicalSum::default();
        out.add_term(BigInt::one(), q);
        out
    }

    fn add_term(&mut self, s: BigInt, c: Rational) {
        let entry = self.terms.entry(s.clone()).or_insert_with(<Rational as Zero>::zero);
        *entry += c;
        if entry.is_zero() {
            self.terms.remove(&s);
        }
    }

    /// `sqrt(q)` for a nonnegative rational with machine-sized numerator and denominator.
    pub fn sqrt(q: &Rational) -> Option<Self> {
        if q.is_negative() {
            return None;
        }
        let (p, d) = (q.numer().to_u128()?, q.denom().to_u128()?);
        let (a, s) = split_square(p.checked_mul(d)?)?;
        let mut out = RadicalSum::default();
        if a != 0 {
            out.add_term(BigInt::from(s), Rational::new(BigInt::from(a), BigInt::from(d)));
        }
        Some(out)
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (s, c) in &other.terms {
            out.add_term(s.clone(), c.clone());
        }
        out
    }

    pub fn scale(&self, k: &Rational) -> Self {
        let mut out = RadicalSum::default();
        for (s, c) in &self.terms {
            out.add_term(s.clone(), c * k);
        }
        out
    }

    pub fn to_f64(&self) -> f64 {
        self.terms
            .iter()
            .map(|(s, c)| Scalar::to_f64(c) * s.to_f64().unwrap_or(f64::NAN).sqrt())
            .sum()
    }
}

impl std::fmt::Display for RadicalSum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        let parts: Vec<String> = self
            .terms
            .iter()
            .map(|(s, c)| if s.is_one() { c.to_string() } else { format!("{c}*sqrt({s})") })
            .collect();
        write!(f, "{}", parts.join(" + "))
    }
}

/// `n = a^2 s` with `s` squarefree, by trial division.
fn split_square(mut n: u128) -> Option<(u128, u128)> {
    if n == 0 {
        return Some((0, 1));
    }
    let (mut a, mut s) = (1u128, 1u128);
    let mut p = 2u128;
    while p * p <= n {
        if p > 10_000_000 {
            return None;
        }
        let mut e = 0;
        while n % p == 0 {
            n /= p;
            e += 1;
        }
        a *= p.pow(e / 2);
        if e % 2 == 1 {
            s *= p;
        }
        p += 1;
    }
    Some((a, s * n))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentExact {
    pub limit: String,
    pub lower: String,
    pub upper: String,
    pub equals_lower: bool,
    pub equals_upper: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentReport {
    pub r: f64,
    /// `P(B)^r P(C)`.
    pub lower: f64,
    /// `(P(B) P(C))^r`.
    pub upper: f64,
    pub checkpoints: Vec<Checkpoint>,
    /// Checkpoints at or past `N/2` whose partial mean leaves `[lower - tol, upper + tol]`.
    pub violations: Vec<usize>,
    pub tolerance: f64,
    pub verdict: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact: Option<MomentExact>,
}

/// Cesàro means of `P(B ∩ T^{-i} C)^r` against the two-sided bound for an ergodic invariant `P`.
pub trait MomentSystem: MeasuredSystem {
    fn require_ergodic_invariant(&self, p: &Self::Prob) -> Result<()>;
}

impl MomentSystem for FiniteSystem {
    fn require_ergodic_invariant(&self, p: &ProbabilityVector<Rational>) -> Result<()> {
        if self.t.pushforward(p.weights()) != p.weights() {
            return Err(Error::InvalidArgument("P is not invariant".into()));
        }
        let cycles: std::collections::BTreeSet<usize> = p.support().points().map(|i| self.cd.basin[i]).collect();
        if cycles.len() != 1 {
            return Err(Error::InvalidArgument("P is not ergodic".into()));
        }
        Ok(())
    }
}

impl<S: Scalar> MomentSystem for IntervalSystem<S> {
    fn require_ergodic_invariant(&self, p: &RestrictedLebesgue<S>) -> Result<()> {
        if self.is_skeleton(p) {
            Ok(())
        } else {
            Err(Error::InvalidArgument("P must be the ergodic skeleton of the system".into()))
        }
    }
}

pub fn sqrt_moment_check<M: MomentSystem>(
    sys: &M,
    p: &M::Prob,
    b: &M::Event,
    c: &M::Event,
    r: f64,
    n: usize,
    tol: f64,
) -> Result<MomentReport> {
    require_positive(n)?;
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidArgument(format!("moment exponent {r} outside (0, 1]")));
    }
    sys.require_ergodic_invariant(p)?;
    let pb = sys.prob(p, b)?;
    let pc = sys.prob(p, c)?;
    let lower = pb.to_f64().powf(r) * pc.to_f64();
    let upper = (pb.to_f64() * pc.to_f64()).powf(r);
    let terms = sys.correlations(p, b, c, n)?;
    let powered = terms.map(|x| x.to_f64().max(0.0).powf(r));
    let prefix = Terms::prefix(powered.seq());
    let checkpoints: Vec<Checkpoint> = checkpoints(n)
        .into_iter()
        .map(|k| {
            let v = powered.sum_first(k, &prefix) / k as f64;
            let dev = (lower - v).max(v - upper).max(0.0);
            Checkpoint { n: k, partial_mean: v, target: lower, deviation: dev }
        })
        .collect();
    let violations: Vec<usize> = checkpoints
        .iter()
        .filter(|c| 2 * c.n >= n && c.deviation > tol)
        .map(|c| c.n)
        .collect();

    let exact = if M::Value::EXACT && r == 0.5 {
        exact_sqrt_moment(&terms, &pb, &pc)
    } else {
        None
    };
    let exact_ok = exact.as_ref().is_none_or(|e| {
        // The exact limit must sit inside the bound; equality at either end is reported.
        let (l, lo, hi) = (parse_f(&e.limit), lower, upper);
        l >= lo - 1e-12 && l <= hi + 1e-12
    });
    Ok(MomentReport {
        r,
        lower,
        upper,
        verdict: violations.is_empty() && exact_ok,
        violations,
        checkpoints,
        tolerance: tol,
        exact,
    })
}

fn parse_f(s: &str) -> f64 {
    s.split(" + ")
        .map(|t| match t.split_once("*sqrt(") {
            Some((c, rest)) => {
                let c = crate::scalar::parse_rational(c).map(|q| Scalar::to_f64(&q)).unwrap_or(f64::NAN);
                let s: f64 = rest.trim_end_matches(')').parse().unwrap_or(f64::NAN);
                c * s.sqrt()
            }
            None => crate::scalar::parse_rational(t).map(|q| Scalar::to_f64(&q)).unwrap_or(f64::NAN),
        })
        .sum()
}

fn exact_sqrt_moment<V: Scalar>(terms: &Terms<V>, pb: &V, pc: &V) -> Option<MomentExact> {
    let Terms::Periodic { seq, transient } = terms else { return None };
    let to_q = |v: &V| v.small_ratio().map(|(a, b)| Rational::new(BigInt::from(a), BigInt::from(b)));
    let period = seq.len() - transient;
    let mut sum = RadicalSum::default();
    for v in &seq[*transient..] {
        sum = sum.add(&RadicalSum::sqrt(&to_q(v)?)?);
    }
    let limit = sum.scale(&Rational::new(BigInt::one(), BigInt::from(period)));
    let (qb, qc) = (to_q(pb)?, to_q(pc)?);
    let lower = RadicalSum::sqrt(&qb)?.scale(&qc);
    let upper = RadicalSum::sqrt(&(&qb * &qc))?;
    Some(MomentExact {
        equals_lower: limit == lower,
        equals_upper: limit == upper,
        limit: limit.to_string(),
        lower: lower.to_string(),
        upper: upper.to_string(),
    })
}

/// Membership of a subset of the integers.
#[derive(Clone)]
pub enum Membership {
    /// Disjoint closed integer intervals `[lo, hi]`, sorted.
    Intervals(Vec<(i64, i64)>),
    /// Sorted distinct points.
    Points(Vec<i64>),
    Predicate(Arc<dyn Fn(i64) -> bool + Send + Sync>),
}

impl std::fmt::Debug for Membership {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Membership::Intervals(v) => f.debug_tuple("Intervals").field(&v.len()).finish(),
            Membership::Points(v) => f.debug_tuple("Points").field(&v.len()).finish(),
            Membership::Predicate(_) => f.write_str("Predicate"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DensitySubset {
    pub membership: Membership,
    /// Windows must stay inside `[-bound, bound]`.
    pub bound: i64,
}

impl DensitySubset {
    pub fn from_predicate(f: impl Fn(i64) -> bool + Send + Sync + 'static, bound: i64) -> Self {
        DensitySubset { membership: Membership::Predicate(Arc::new(f)), bound }
    }

    pub fn even_integers(bound: i64) -> Self {
        Self::from_predicate(|z| z.rem_euclid(2) == 0, bound)
    }

    pub fn from_points(mut points: Vec<i64>, bound: i64) -> Self {
        points.sort_unstable();
        points.dedup();
        DensitySubset { membership: Membership::Points(points), bound }
    }

    /// `A = union over n >= 0 of [2^{2n}, 2^{2n+1}]`.
    pub fn power_blocks(bound: i64) -> Self {
        let mut blocks = Vec::new();
        let mut lo: i64 = 1;
        while lo <= bound {
            blocks.push((lo, lo.saturating_mul(2)));
            lo = lo.saturating_mul(4);
        }
        DensitySubset { membership: Membership::Intervals(blocks), bound }
    }

    /// `|A ∩ [lo, hi]|`.
    pub fn count(&self, lo: i64, hi: i64) -> Result<u64> {
        if lo.abs() > self.bound || hi.abs() > self.bound {
            return Err(Error::BudgetExceeded { iterate: hi.unsigned_abs() as usize, what: format!("enumeration bound {}", self.bound) });
        }
        if hi < lo {
            return Ok(0);
        }
        Ok(match &self.membership {
            Membership::Intervals(v) => v
                .iter()
                .map(|&(a, b)| (b.min(hi) - a.max(lo) + 1).max(0) as u64)
                .sum(),
            Membership::Points(v) => (v.partition_point(|&x| x <= hi) - v.partition_point(|&x| x < lo)) as u64,
            Membership::Predicate(f) => (lo..=hi).filter(|&z| f(z)).count() as u64,
        })
    }

    pub fn window_density(&self, windows: Windows, n: i64) -> Result<f64> {
        match windows {
            Windows::TwoSided => Ok(self.count(-n, n)? as f64 / (2 * n + 1) as f64),
            Windows::OneSided => {
                if n <= 0 {
                    return Err(Error::InvalidArgument("one-sided windows need n >= 1".into()));
                }
                Ok(self.count(0, n - 1)? as f64 / n as f64)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Windows {
    /// `[-n, n]`, size `2n + 1`.
    TwoSided,
    /// `[0, n)`, size `n`.
    OneSided,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubsequenceDensity {
    pub label: String,
    pub values: Vec<(i64, f64)>,
    /// Density at the largest window of the subsequence.
    pub estimate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityReport {
    pub windows: Windows,
    pub values: Vec<(i64, f64)>,
    /// Max and min over the second half of the schedule.
    pub upper: f64,
    pub lower: f64,
    pub subsequences: Vec<SubsequenceDensity>,
}

pub fn density(
    a: &DensitySubset,
    windows: Windows,
    schedule: &[i64],
    subsequences: &[(String, Vec<i64>)],
) -> Result<DensityReport> {
    let values = schedule
        .iter()
        .map(|&n| Ok((n, a.window_density(windows, n)?)))
        .collect::<Result<Vec<_>>>()?;
    let tail = &values[values.len() / 2..];
    let upper = tail.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    let lower = tail.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    let subsequences = subsequences
        .iter()
        .map(|(label, ns)| {
            let values = ns.iter().map(|&n| Ok((n, a.window_density(windows, n)?))).collect::<Result<Vec<_>>>()?;
            let estimate = values.last().map_or(f64::NAN, |v| v.1);
            Ok(SubsequenceDensity { label: label.clone(), values, estimate })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DensityReport { windows, values, upper, lower, subsequences })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DensityBlock {
    pub m: usize,
    /// `J` takes `J'_m = {n : |seq_n - L| > 1/m}` on `(start, end]`.
    pub start: usize,
    pub end: usize,
    pub max_off_j_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NullDensityCertificate {
    pub horizon: usize,
    pub cesaro_abs_deviation: f64,
    pub members: Vec<usize>,
    pub blocks: Vec<DensityBlock>,
    /// Window density `|J ∩ [0, n)| / n` at the checkpoints.
    pub densities: Vec<(usize, f64)>,
}

impl NullDensityCertificate {
    pub fn subset(&self) -> DensitySubset {
        DensitySubset::from_points(self.members.iter().map(|&x| x as i64).collect(), self.horizon as i64)
    }

    /// Off-`J` deviation past each block start stays below `1/m`.
    pub fn blocks_hold(&self) -> bool {
        self.blocks.iter().all(|b| b.max_off_j_deviation <= 1.0 / b.m as f64)
    }
}

/// Koopman-von Neumann extraction: merges the sets `J'_m` over blocks `(N_{m-1}, N_m]`, with `N_m`
/// the first index past `N_{m-1}` after which `J'_m` keeps window density below `1/m` up to the horizon.
pub fn extract_null_density_set(seq: &[f64], limit: f64, max_m: usize, tol: f64) -> Result<NullDensityCertificate> {
    let horizon = seq.len();
    if horizon == 0 || max_m == 0 {
        return Err(Error::InvalidArgument("need a nonempty sequence and at least one threshold".into()));
    }
    let cesaro = crate::scalar::pairwise_sum(&seq.iter().map(|x| (x - limit).abs()).collect::<Vec<_>>()) / horizon as f64;
    if cesaro > tol {
        return Err(Error::Refused(format!("Cesàro mean of |seq - L| is {cesaro} > {tol}")));
    }
    let dev: Vec<f64> = seq.iter().map(|x| (x - limit).abs()).collect();
    let mut blocks = Vec::new();
    let mut in_j = vec![false; horizon];
    let mut start = 0usize;
    for m in 1..=max_m {
        let thr = 1.0 / m as f64;
        let end = if m == max_m {
            horizon
        } else {
            // Last window size at which J'_m density is still >= 1/m; N_m sits past it.
            let mut count = 0usize;
            let mut last_bad = 0usize;
            for (k, d) in dev.iter().enumerate() {
                if *d > thr {
                    count += 1;
                }
                if count as f64 >= thr * (k + 1) as f64 {
                    last_bad = k + 1;
                }
            }
            last_bad.max(start + 1).min(horizon)
        };
        let mut off = 0.0f64;
        for k in start..end {
            if dev[k] > thr {
                in_j[k] = true;
            } else {
                off = off.max(dev[k]);
            }
        }
        blocks.push(DensityBlock { m, start, end, max_off_j_deviation: off });
        start = end;
        if start >= horizon {
            break;
        }
    }
    let members: Vec<usize> = (0..horizon).filter(|&k| in_j[k]).collect();
    let densities = checkpoints(horizon)
        .into_iter()
        .map(|n| (n, members.partition_point(|&x| x < n) as f64 / n as f64))
        .collect();
    Ok(NullDensityCertificate { horizon, cesaro_abs_deviation: cesaro, members, blocks, densities })
}

/// `a_i`: `1/4` on `(2^{2k-1}, 2^{2k}]`; on `(2^{2k}, 2^{2k+1}]`, `1/2` at even `i` and `0` at odd `i`.
pub fn oscillating_term(i: u64) -> Rational {
    assert!(i >= 1, "the sequence starts at i = 1");
    let m = 64 - (i - 1).leading_zeros(); // i in (2^{m-1}, 2^m]
    let m = if i == 1 { 0 } else { m };
    if m % 2 == 0 {
        crate::scalar::ratio(1, 4)
    } else if i % 2 == 0 {
        crate::scalar::ratio(1, 2)
    } else {
        <Rational as Zero>::zero()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OscillatingMeans {
    pub k: u32,
    /// `(1/n) sum a_i^{1/2}` at `n = 2^{2K}` and `n = 2^{2K+1}`.
    pub sqrt_mean_even: f64,
    pub sqrt_mean_odd: f64,
    pub plain_mean_even: f64,
    pub plain_mean_odd: f64,
}

/// Counts `(quarters, halves)` among `a_1..a_n` for `n` a power of two.
fn oscillating_counts(n_exp: u32) -> (u128, u128) {
    let mut quarters: u128 = 1; // i = 1
    let mut halves: u128 = 0;
    for m in 1..=n_exp {
        let size = 1u128 << (m - 1);
        if m % 2 == 0 {
            quarters += size;
        } else {
            halves += size.div_ceil(2);
        }
    }
    (quarters, halves)
}

pub const OSCILLATING_BLOCK_LIMIT: u32 = 14;

pub fn oscillating_sqrt_means(k: u32) -> Result<OscillatingMeans> {
    if k == 0 || k > OSCILLATING_BLOCK_LIMIT {
        return Err(Error::BudgetExceeded { iterate: k as usize, what: format!("block limit {OSCILLATING_BLOCK_LIMIT}") });
    }
    let mean = |exp: u32| {
        let (q, h) = oscillating_counts(exp);
        let n = (1u128 << exp) as f64;
        let sqrt_sum = q as f64 * 0.5 + h as f64 * std::f64::consts::FRAC_1_SQRT_2;
        let plain = q as f64 * 0.25 + h as f64 * 0.5;
        (sqrt_sum / n, plain / n)
    };
    let (se, pe) = mean(2 * k);
    let (so, po) = mean(2 * k + 1);
    Ok(OscillatingMeans { k, sqrt_mean_even: se, sqrt_mean_odd: so, plain_mean_even: pe, plain_mean_odd: po })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::ratio;

    fn swap_system() -> FiniteSystem {
        let v = UpperProbability::new(vec![ProbabilityVector::dirac(2, 0), ProbabilityVector::dirac(2, 1)]).unwrap();
        FiniteSystem::new(Endomap::new(vec![1, 0]).unwrap(), v).unwrap()
    }

    #[test]
    fn finite_swap_independence_is_exact() {
        let sys = swap_system();
        let p = ProbabilityVector::dirac(2, 0);
        let b = EventSet::singleton(0);
        let out = independence_check(&sys, &p, &b, &b, 1000, 0.0).unwrap();
        let r = out.report().unwrap();
        assert!(r.verdict);
        assert_eq!(r.limit_exact.as_deref(), Some("1/2"));
        let full = EventSet::full(2);
        let r = independence_check(&sys, &p, &full, &b, 7, 0.0).unwrap();
        assert_eq!(r.report().unwrap().limit_exact.as_deref(), Some("1/2"));
    }

    #[test]
    fn finite_swap_squared_deviation_is_positive() {
        let sys = swap_system();
        let p = ProbabilityVector::dirac(2, 0);
        let b = EventSet::singleton(0);
        let r = squared_deviation_check(&sys, &p, &b, &b, 100, 0.0).unwrap();
        let r = r.report().unwrap();
        assert_eq!(r.limit_exact.as_deref(), Some("1/4"));
        assert!(!r.verdict);
        let r = squared_deviation_check(&sys, &p, &EventSet::EMPTY, &b, 100, 0.0).unwrap();
        assert_eq!(r.report().unwrap().limit_exact.as_deref(), Some("0"));
    }

    #[test]
    fn missing_skeleton_is_an_outcome() {
        let v = UpperProbability::new(vec![
            ProbabilityVector::uniform_on(4, EventSet::from_points(&[0, 1])).unwrap(),
            ProbabilityVector::uniform_on(4, EventSet::from_points(&[2, 3])).unwrap(),
        ])
        .unwrap();
        let sys = FiniteSystem::new(Endomap::new(vec![1, 0, 3, 2]).unwrap(), v).unwrap();
        let p = sys.upper().lambda()[0].clone();
        let out = independence_check(&sys, &p, &EventSet::singleton(0), &EventSet::singleton(0), 10, 0.0).unwrap();
        assert_eq!(out, CheckOutcome::MissingSkeleton { witness: "3".into() });
        let (b, c, _) = sys.independence_failure().unwrap().unwrap();
        assert_eq!(b.intersect(c), EventSet::EMPTY);
    }

    #[test]
    fn finite_choquet_independence() {
        let sys = swap_system();
        let f = vec![ratio(1, 1), ratio(0, 1)];
        let r = sys.choquet_independence(&f, &f, 64).unwrap();
        let r = r.report().unwrap();
        assert_eq!(r.target_exact.as_deref(), Some("1/2"));
        assert!(r.verdict);
        let one = vec![ratio(1, 1); 2];
        let r = sys.choquet_independence(&f, &one, 5).unwrap();
        assert!(r.report().unwrap().checkpoints.iter().all(|c| c.partial_mean == 1.0));
    }

    #[test]
    fn finite_process_slln() {
        let sys = swap_system();
        let h = vec![ratio(0, 1), ratio(1, 1)];
        let r = sys.process_slln(&h, 3, 100).unwrap();
        assert!(r.stationary);
        assert!(r.slln.verdict);
        assert_eq!(r.slln.limit_exact.as_deref(), Some("1/2"));
    }

    #[test]
    fn constant_observable_is_stationary() {
        let sys = swap_system();
        let r = sys.process_slln(&[ratio(3, 1), ratio(3, 1)], 8, 10).unwrap();
        assert!(r.stationary && r.slln.verdict);
    }

    #[test]
    fn radical_sums() {
        let a = RadicalSum::sqrt(&ratio(1, 2)).unwrap();
        let b = RadicalSum::sqrt(&ratio(2, 1)).unwrap().scale(&ratio(1, 2));
        assert_eq!(a, b);
        assert!((a.to_f64() - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(RadicalSum::sqrt(&ratio(9, 4)).unwrap(), RadicalSum::rational(ratio(3, 2)));
        assert_eq!(split_square(72), Some((6, 2)));
    }

    #[test]
    fn periodic_sqrt_moment_equals_lower_bound() {
        for r0 in 1..=6usize {
            let t = Endomap::cycle(r0);
            let p = ProbabilityVector::uniform_on(r0, EventSet::full(r0)).unwrap();
            let sys = FiniteSystem::new(t, UpperProbability::new(vec![p.clone()]).unwrap()).unwrap();
            let b = EventSet::singleton(0);
            let rep = sqrt_moment_check(&sys, &p, &b, &b, 0.5, 1000, 1e-12).unwrap();
            let exact = rep.exact.unwrap();
            assert!(exact.equals_lower, "r0 = {r0}: {exact:?}");
            assert_eq!(exact.equals_upper, r0 == 1);
            assert!(rep.verdict);
        }
    }

    #[test]
    fn sqrt_moment_rejects_non_ergodic() {
        let sys = swap_system();
        let p = ProbabilityVector::dirac(2, 0);
        let b = EventSet::singleton(0);
        assert!(sqrt_moment_check(&sys, &p, &b, &b, 0.5, 10, 0.0).is_err());
    }

    #[test]
    fn doubling_sqrt_moment_reaches_upper_bound() {
        let sys = IntervalSystem::lebesgue(PiecewiseAffineMap::<Rational>::doubling()).unwrap();
        let p = sys.member(0).clone();
        let half = IntervalSet::interval(ratio(1, 1), ratio(0, 1), ratio(1, 2)).unwrap();
        let rep = sqrt_moment_check(&sys, &p, &half, &half, 0.5, 400, 1e-2).unwrap();
        assert!(rep.verdict, "{rep:?}");
        let last = rep.checkpoints.last().unwrap().partial_mean;
        assert!((last - 0.5).abs() <= 1e-2);
    }

    #[test]
    fn oscillating_means_limits() {
        let r = oscillating_sqrt_means(12).unwrap();
        assert!((r.sqrt_mean_even - (1.0 / 3.0 + 1.0 / (6.0 * 2f64.sqrt()))).abs() < 1e-2);
        assert!((r.sqrt_mean_odd - (1.0 / 6.0 + 1.0 / (3.0 * 2f64.sqrt()))).abs() < 1e-2);
        assert!((r.plain_mean_even - 0.25).abs() < 1e-3 && (r.plain_mean_odd - 0.25).abs() < 1e-3);
        assert!(oscillating_sqrt_means(15).is_err());
    }

    #[test]
    fn oscillating_counts_match_terms() {
        for exp in 0..12u32 {
            let n = 1u64 << exp;
            let (q, h) = oscillating_counts(exp);
            let terms: Vec<Rational> = (1..=n).map(oscillating_term).collect();
            assert_eq!(terms.iter().filter(|t| **t == ratio(1, 4)).count() as u128, q);
            assert_eq!(terms.iter().filter(|t| **t == ratio(1, 2)).count() as u128, h);
        }
    }

    #[test]
    fn density_examples() {
        let even = DensitySubset::even_integers(10_000);
        for n in 1..200 {
            let d = even.window_density(Windows::TwoSided, n).unwrap();
            assert!((d - 0.5).abs() <= 1.0 / (2 * n + 1) as f64);
        }
        let a = DensitySubset::power_blocks(1 << 30);
        let evens: Vec<i64> = (1..=12).map(|k| 1i64 << (2 * k)).collect();
        let odds: Vec<i64> = (1..=12).map(|k| 1i64 << (2 * k + 1)).collect();
        let rep = density(&a, Windows::TwoSided, &evens, &[("even".into(), evens.clone()), ("odd".into(), odds)]).unwrap();
        assert!((rep.subsequences[0].estimate - 1.0 / 6.0).abs() < 2e-2);
        assert!((rep.subsequences[1].estimate - 1.0 / 3.0).abs() < 2e-2);
        let finite = DensitySubset::from_points(vec![3, 5, 8], 1 << 20);
        assert!(finite.window_density(Windows::TwoSided, 1 << 19).unwrap() < 1e-5);
        assert!(a.count(0, 1 << 31).is_err());
    }

    #[test]
    fn null_density_extraction() {
        let horizon = 1 << 20;
        let seq: Vec<f64> = (0..horizon).map(|n: usize| if n.is_power_of_two() { 1.0 } else { 0.0 }).collect();
        let cert = extract_null_density_set(&seq, 0.0, 10, 1e-2).unwrap();
        assert!(cert.members.iter().all(|n| n.is_power_of_two()));
        assert!(cert.densities.last().unwrap().1 <= 2e-5);
        assert!(cert.blocks_hold());
        let flat = vec![0.25; 1000];
        assert!(extract_null_density_set(&flat, 0.25, 5, 1e-2).unwrap().members.is_empty());
        assert!(matches!(extract_null_density_set(&flat, 0.0, 5, 1e-2), Err(Error::Refused(_))));
    }

    #[test]
    fn rotation_swap_interval_checks() {
        let sys = IntervalSystem::rotation_swap(crate::intervaldyn::GOLDEN_ALPHA).unwrap();
        let p1 = sys.member(0).clone();
        let b = IntervalSet::interval(2.0, 0.0, 0.5).unwrap();
        let c = IntervalSet::interval(2.0, 1.0, 1.7).unwrap();
        let out = independence_check(&sys, &p1, &b, &c, 20_000, 1e-3).unwrap();
        let r = out.report().unwrap();
        assert!((r.target - 0.175).abs() < 1e-12);
        assert!(r.verdict, "{r:?}");

        let f = StepFunction::indicator(&IntervalSet::interval(2.0, 0.0, 1.0).unwrap());
        let g = StepFunction::indicator(&IntervalSet::interval(2.0, 0.5, 1.5).unwrap());
        let out = sys.choquet_independence(&f, &g, 2000, 400, 2e-2).unwrap();
        assert!(out.report().unwrap().verdict, "{out:?}");

        let h = StepFunction::indicator(&IntervalSet::interval(2.0, 1.0, 2.0).unwrap());
        let rep = sys.process_slln(&h, 3, 4000, 6, 11, 1e-2).unwrap();
        assert!(rep.stationary && rep.slln.verdict, "{rep:?}");
    }

    #[test]
    fn non_invariant_interval_system_is_rejected() {
        let map = PiecewiseAffineMap::rotation_swap(0.3).unwrap();
        let members = vec![RestrictedLebesgue::unit_window(2.0, 1).unwrap()];
        assert!(matches!(IntervalSystem::new(map, members, None), Err(Error::NonInvariant { .. })));
    }

    #[test]
    fn csv_and_summary() {
        let sys = swap_system();
        let p = ProbabilityVector::dirac(2, 0);
        let b = EventSet::singleton(0);
        let r = independence_check(&sys, &p, &b, &b, 16, 0.0).unwrap();
        let csv = r.report().unwrap().to_csv();
        assert!(csv.starts_with("checkpoint,partial_mean,target,deviation\n2,"));
        assert_eq!(csv.lines().count(), 5);
        assert_eq!(r.report().unwrap().summary()["verdict"], true);
    }
}
