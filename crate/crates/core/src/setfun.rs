//! Set functions on finite ground sets: capacities, probability vectors,
//! upper probabilities, Choquet integrals and core polytopes.
//!
//! Events are bitmasks ([`EventSet`]); bit `i` is point `i`. Tables are
//! indexed by the mask value, so `table[0]` is the empty set and
//! `table[(1 << n) - 1]` the whole space.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use num_integer::Integer;
use serde::{Deserialize, Serialize};

use crate::scalar::{Rational, Scalar};
use crate::{Error, Result};

/// Largest ground set an [`EventSet`] can describe.
pub const MAX_POINTS: usize = 63;

/// Default dimension limit for core vertex enumeration.
pub const DEFAULT_CORE_LIMIT: usize = 6;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct EventSet(pub u64);

impl EventSet {
    pub const EMPTY: EventSet = EventSet(0);

    pub fn full(n: usize) -> Self {
        assert!(n <= MAX_POINTS, "ground set too large for a bitmask event");
        EventSet((1u64 << n) - 1)
    }

    pub fn singleton(i: usize) -> Self {
        EventSet(1u64 << i)
    }

    pub fn from_points(points: &[usize]) -> Self {
        EventSet(points.iter().fold(0u64, |m, &i| m | (1u64 << i)))
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn contains(self, i: usize) -> bool {
        i < 64 && self.0 & (1u64 << i) != 0
    }

    pub fn union(self, other: Self) -> Self {
        EventSet(self.0 | other.0)
    }

    pub fn intersect(self, other: Self) -> Self {
        EventSet(self.0 & other.0)
    }

    pub fn difference(self, other: Self) -> Self {
        EventSet(self.0 & !other.0)
    }

    pub fn complement(self, n: usize) -> Self {
        EventSet(!self.0 & Self::full(n).0)
    }

    pub fn is_subset(self, other: Self) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn points(self) -> impl Iterator<Item = usize> {
        let bits = self.0;
        (0..64).filter(move |i| bits & (1u64 << i) != 0)
    }

    /// Decimal encoding of the characteristic vector, as used in JSON files.
    pub fn mask_string(self) -> String {
        self.0.to_string()
    }

    pub fn parse_mask(s: &str) -> Result<Self> {
        s.trim()
            .parse::<u64>()
            .map(EventSet)
            .map_err(|e| Error::Parse(format!("event mask {s:?}: {e}")))
    }

    /// Every event of an `n`-point ground set, in mask order.
    pub fn all(n: usize) -> impl Iterator<Item = EventSet> {
        (0..=Self::full(n).0).map(EventSet)
    }
}

impl Serialize for EventSet {
    fn serialize<Ser: serde::Serializer>(&self, serializer: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        serializer.serialize_str(&self.mask_string())
    }
}

impl<'de> Deserialize<'de> for EventSet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        EventSet::parse_mask(&s).map_err(serde::de::Error::custom)
    }
}

impl fmt::Debug for EventSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.points()).finish()
    }
}

impl fmt::Display for EventSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Anything that assigns a value to every event of a finite ground set.
pub trait SetFunction<S: Scalar> {
    fn points(&self) -> usize;

    fn value(&self, event: EventSet) -> S;

    fn to_capacity(&self) -> Capacity<S> {
        let table = EventSet::all(self.points()).map(|e| self.value(e)).collect();
        Capacity { n: self.points(), table }
    }
}

/// A set function stored as a full table over the power set.
#[derive(Clone, Debug, PartialEq)]
pub struct Capacity<S> {
    n: usize,
    table: Vec<S>,
}

impl<S: Scalar> Capacity<S> {
    /// Builds a capacity, rejecting tables that violate normalization or monotonicity.
    pub fn new(n: usize, table: Vec<S>) -> Result<Self> {
        let raw = Self::from_table(n, table)?;
        let flags = classify_capacity(&raw);
        if let Some((a, b)) = flags.is_capacity.witness {
            return Err(Error::NotACapacity(format!("witness pair ({a}, {b})")));
        }
        Ok(raw)
    }

    /// Wraps a table without checking the capacity axioms (length only).
    pub fn from_table(n: usize, table: Vec<S>) -> Result<Self> {
        if n > MAX_POINTS {
            return Err(Error::DimensionExceeded { n, limit: MAX_POINTS });
        }
        let expected = 1usize << n;
        if table.len() != expected {
            return Err(Error::SizeMismatch { expected, got: table.len() });
        }
        Ok(Capacity { n, table })
    }

    pub fn from_fn(n: usize, f: impl Fn(EventSet) -> S) -> Result<Self> {
        Self::from_table(n, EventSet::all(n).map(f).collect())
    }

    pub fn table(&self) -> &[S] {
        &self.table
    }

    pub fn map_scalar<T: Scalar>(&self, f: impl Fn(&S) -> T) -> Capacity<T> {
        Capacity { n: self.n, table: self.table.iter().map(f).collect() }
    }
}

impl<S: Scalar> SetFunction<S> for Capacity<S> {
    fn points(&self) -> usize {
        self.n
    }

    fn value(&self, event: EventSet) -> S {
        self.table[event.0 as usize].clone()
    }

    fn to_capacity(&self) -> Capacity<S> {
        self.clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVector<S> {
    weights: Vec<S>,
}

impl<S: Scalar> ProbabilityVector<S> {
    pub fn new(weights: Vec<S>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::NotAProbability("empty weight vector".into()));
        }
        if weights.len() > MAX_POINTS {
            return Err(Error::DimensionExceeded { n: weights.len(), limit: MAX_POINTS });
        }
        if let Some(i) = weights.iter().position(|w| !S::zero().approx_le(w)) {
            return Err(Error::NotAProbability(format!("negative weight at point {i}")));
        }
        let total = weights.iter().cloned().fold(S::zero(), |a, b| a + b);
        if !total.approx_eq(&S::one()) {
            return Err(Error::NotAProbability(format!("weights sum to {total}")));
        }
        Ok(ProbabilityVector { weights })
    }

    /// Skips validation; for vectors produced by mass-preserving operations.
    pub(crate) fn from_weights_unchecked(weights: Vec<S>) -> Self {
        ProbabilityVector { weights }
    }

    pub fn dirac(n: usize, i: usize) -> Self {
        let mut weights = vec![S::zero(); n];
        weights[i] = S::one();
        ProbabilityVector { weights }
    }

    pub fn uniform_on(n: usize, support: EventSet) -> Result<Self> {
        let k = support.len();
        if k == 0 || support.points().any(|i| i >= n) {
            return Err(Error::NotAProbability(format!("bad support {support} for n = {n}")));
        }
        let w = S::from_ratio(1, k as i128);
        let weights = (0..n).map(|i| if support.contains(i) { w.clone() } else { S::zero() }).collect();
        Ok(ProbabilityVector { weights })
    }

    pub fn weights(&self) -> &[S] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn prob(&self, event: EventSet) -> S {
        event
            .points()
            .take_while(|&i| i < self.weights.len())
            .fold(S::zero(), |acc, i| acc + self.weights[i].clone())
    }

    /// `P(A)` for every event, indexed by mask.
    pub fn prob_table(&self) -> Vec<S> {
        let n = self.weights.len();
        let mut table = vec![S::zero(); 1 << n];
        for m in 1usize..1 << n {
            let low = m.trailing_zeros() as usize;
            table[m] = table[m & (m - 1)].clone() + self.weights[low].clone();
        }
        table
    }

    pub fn expectation(&self, f: &[S]) -> S {
        assert_eq!(f.len(), self.weights.len(), "function length must match ground set");
        self.weights
            .iter()
            .zip(f)
            .fold(S::zero(), |acc, (w, v)| acc + w.clone() * v.clone())
    }

    pub fn support(&self) -> EventSet {
        EventSet::from_points(
            &self
                .weights
                .iter()
                .enumerate()
                .filter(|(_, w)| !w.is_zero_ish())
                .map(|(i, _)| i)
                .collect::<Vec<_>>(),
        )
    }

    /// Membership in the core: `P(A) <= mu(A)` for every event.
    pub fn dominated_by<F: SetFunction<S>>(&self, mu: &F) -> Option<EventSet> {
        EventSet::all(self.len()).find(|&a| !self.prob(a).approx_le(&mu.value(a)))
    }

    pub fn map_scalar<T: Scalar>(&self, f: impl Fn(&S) -> T) -> ProbabilityVector<T> {
        ProbabilityVector { weights: self.weights.iter().map(f).collect() }
    }
}

impl<S: Scalar> SetFunction<S> for ProbabilityVector<S> {
    fn points(&self) -> usize {
        self.weights.len()
    }

    fn value(&self, event: EventSet) -> S {
        self.prob(event)
    }

    fn to_capacity(&self) -> Capacity<S> {
        Capacity { n: self.len(), table: self.prob_table() }
    }
}

/// Weights serialize as exact strings, matching the set-function JSON files.
impl<S: Scalar> Serialize for ProbabilityVector<S> {
    fn serialize<Ser: serde::Serializer>(&self, serializer: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        serializer.collect_seq(self.weights.iter().map(|w| w.to_string()))
    }
}

/// `V(A) = max_{P in lambda} P(A)` for a finite representing family.
#[derive(Clone, Debug, PartialEq)]
pub struct UpperProbability<S> {
    lambda: Vec<ProbabilityVector<S>>,
}

impl<S: Scalar> UpperProbability<S> {
    pub fn new(lambda: Vec<ProbabilityVector<S>>) -> Result<Self> {
        let first = lambda
            .first()
            .ok_or_else(|| Error::InvalidArgument("representing family is empty".into()))?;
        let n = first.len();
        if let Some(p) = lambda.iter().find(|p| p.len() != n) {
            return Err(Error::SizeMismatch { expected: n, got: p.len() });
        }
        Ok(UpperProbability { lambda })
    }

    pub fn lambda(&self) -> &[ProbabilityVector<S>] {
        &self.lambda
    }

    /// Indices of every member attaining the maximum, in list order.
    pub fn argmax(&self, event: EventSet) -> Vec<usize> {
        let best = self.value(event);
        self.lambda
            .iter()
            .enumerate()
            .filter(|(_, p)| p.prob(event).approx_eq(&best))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn map_scalar<T: Scalar>(&self, f: impl Fn(&S) -> T + Copy) -> UpperProbability<T> {
        UpperProbability { lambda: self.lambda.iter().map(|p| p.map_scalar(f)).collect() }
    }
}

impl<S: Scalar> SetFunction<S> for UpperProbability<S> {
    fn points(&self) -> usize {
        self.lambda[0].len()
    }

    fn value(&self, event: EventSet) -> S {
        self.lambda
            .iter()
            .map(|p| p.prob(event))
            .fold(S::zero(), S::max_of)
    }

    fn to_capacity(&self) -> Capacity<S> {
        let mut tables = self.lambda.iter().map(|p| p.prob_table());
        let first = tables.next().expect("representing family is nonempty");
        let table = tables.fold(first, |acc, t| acc.into_iter().zip(t).map(|(a, b)| S::max_of(a, b)).collect());
        Capacity { n: self.points(), table }
    }
}

/// Choquet integral of a point function, by telescoping over the distinct values of `f`.
///
/// Uses `mu(Omega) = 1` for the lower tail, so negative values are handled.
pub fn choquet_integral<S: Scalar, F: SetFunction<S> + ?Sized>(mu: &F, f: &[S]) -> S {
    assert_eq!(f.len(), mu.points(), "function length must match ground set");
    let mut levels: Vec<S> = f.to_vec();
    levels.sort_by(|a, b| b.partial_cmp(a).expect("point function contains NaN"));
    levels.dedup_by(|a, b| a == b);
    let Some(lowest) = levels.last().cloned() else {
        return S::zero();
    };
    let mut total = lowest;
    for w in levels.windows(2) {
        let upper_set = EventSet::from_points(
            &f.iter()
                .enumerate()
                .filter(|(_, v)| **v >= w[0])
                .map(|(i, _)| i)
                .collect::<Vec<_>>(),
        );
        total = total + (w[0].clone() - w[1].clone()) * mu.value(upper_set);
    }
    total
}

/// Outcome of one exhaustive pair check.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PairCheck {
    pub holds: bool,
    pub witness: Option<(EventSet, EventSet)>,
}

impl PairCheck {
    fn from_witness(witness: Option<(EventSet, EventSet)>) -> Self {
        PairCheck { holds: witness.is_none(), witness }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CapacityFlags {
    pub is_capacity: PairCheck,
    pub concave: PairCheck,
    pub subadditive: PairCheck,
    pub additive: PairCheck,
}

pub fn classify_capacity<S: Scalar>(mu: &Capacity<S>) -> CapacityFlags {
    let n = mu.n;
    let full = EventSet::full(n);
    let v = |e: EventSet| &mu.table[e.0 as usize];

    let is_capacity = if !v(EventSet::EMPTY).approx_eq(&S::zero()) {
        Some((EventSet::EMPTY, EventSet::EMPTY))
    } else if !v(full).approx_eq(&S::one()) {
        Some((full, full))
    } else {
        // Monotonicity reduces to single-point extensions.
        EventSet::all(n).find_map(|a| {
            (0..n)
                .filter(|&i| !a.contains(i))
                .map(|i| a.union(EventSet::singleton(i)))
                .find(|&b| !v(a).approx_le(v(b)))
                .map(|b| (a, b))
        })
    };

    let pairs = || EventSet::all(n).flat_map(move |a| EventSet::all(n).map(move |b| (a, b)));
    let concave = pairs().find(|&(a, b)| {
        let lhs = v(a.union(b)).clone() + v(a.intersect(b)).clone();
        !lhs.approx_le(&(v(a).clone() + v(b).clone()))
    });
    let disjoint = || pairs().filter(|(a, b)| a.intersect(*b).is_empty());
    let subadditive = disjoint().find(|&(a, b)| !v(a.union(b)).approx_le(&(v(a).clone() + v(b).clone())));
    let additive = disjoint().find(|&(a, b)| !v(a.union(b)).approx_eq(&(v(a).clone() + v(b).clone())));

    let flags = CapacityFlags {
        is_capacity: PairCheck::from_witness(is_capacity),
        concave: PairCheck::from_witness(concave),
        subadditive: PairCheck::from_witness(subadditive),
        additive: PairCheck::from_witness(additive),
    };
    if flags.is_capacity.holds && flags.concave.holds {
        assert!(flags.subadditive.holds, "concave capacity failed subadditivity");
    }
    flags
}

/// A monotone map `g: [0,1] -> [0,1]` with a declared concavity flag.
pub struct Distortion<S> {
    g: Box<dyn Fn(&S) -> S + Send + Sync>,
    concave: bool,
}

impl<S: Scalar> Distortion<S> {
    pub fn new(g: impl Fn(&S) -> S + Send + Sync + 'static, concave: bool) -> Self {
        Distortion { g: Box::new(g), concave }
    }

    pub fn identity() -> Self {
        Self::new(|x: &S| x.clone(), true)
    }

    /// `x -> min(k x, 1)`.
    pub fn scaled_min(k: S) -> Self {
        Self::new(move |x: &S| S::min_of(k.clone() * x.clone(), S::one()), true)
    }

    pub fn apply(&self, x: &S) -> S {
        (self.g)(x)
    }

    pub fn declared_concave(&self) -> bool {
        self.concave
    }
}

impl Distortion<f64> {
    pub fn sqrt() -> Self {
        Self::new(|x: &f64| x.max(0.0).sqrt(), true)
    }

    pub fn power(r: f64) -> Self {
        Self::new(move |x: &f64| x.max(0.0).powf(r), r <= 1.0)
    }
}

/// `V_g(A) = g(P(A))`.
pub fn distort<S: Scalar>(p: &ProbabilityVector<S>, g: &Distortion<S>) -> Result<Capacity<S>> {
    if !g.apply(&S::zero()).approx_eq(&S::zero()) {
        return Err(Error::InvalidDistortion("g(0) != 0".into()));
    }
    if !g.apply(&S::one()).approx_eq(&S::one()) {
        return Err(Error::InvalidDistortion("g(1) != 1".into()));
    }
    let n = p.len();
    let probs: Vec<S> = EventSet::all(n).map(|a| p.prob(a)).collect();
    let mut attained: Vec<S> = probs.clone();
    attained.sort_by(|a, b| a.partial_cmp(b).expect("NaN probability"));
    attained.dedup_by(|a, b| a.approx_eq(b));
    let images: Vec<S> = attained.iter().map(|x| g.apply(x)).collect();
    if let Some(w) = images.windows(2).position(|w| !w[0].approx_le(&w[1])) {
        return Err(Error::InvalidDistortion(format!(
            "not monotone between {} and {}",
            attained[w],
            attained[w + 1]
        )));
    }
    if g.declared_concave() {
        // Chord slopes over consecutive attained values must not increase.
        for i in 0..attained.len().saturating_sub(2) {
            let s1 = (images[i + 1].clone() - images[i].clone()) / (attained[i + 1].clone() - attained[i].clone());
            let s2 = (images[i + 2].clone() - images[i + 1].clone())
                / (attained[i + 2].clone() - attained[i + 1].clone());
            if !s2.approx_le(&s1) {
                return Err(Error::InvalidDistortion(format!("not concave around {}", attained[i + 1])));
            }
        }
    }
    Capacity::from_table(n, probs.iter().map(|x| g.apply(x)).collect())
}

/// Vertices of `core(mu) = {P >= 0, sum P = 1, P(A) <= mu(A) for all A}`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorePolytope<S> {
    pub vertices: Vec<ProbabilityVector<S>>,
    pub source: Capacity<S>,
}

impl<S: Scalar> CorePolytope<S> {
    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// `(min, max)` of `P(B)` over the core; a linear functional is optimized at a vertex.
    pub fn range(&self, b: EventSet) -> Result<(S, S)> {
        let mut values = self.vertices.iter().map(|p| p.prob(b));
        let first = values.next().ok_or(Error::EmptyCore)?;
        Ok(values.fold((first.clone(), first), |(lo, hi), v| (S::min_of(lo, v.clone()), S::max_of(hi, v))))
    }

    /// `max_{P in core} E_P[f]`.
    pub fn max_expectation(&self, f: &[S]) -> Result<S> {
        self.vertices
            .iter()
            .map(|p| p.expectation(f))
            .reduce(S::max_of)
            .ok_or(Error::EmptyCore)
    }

    /// Whether `p` is a convex combination of the vertices, decided by checking core membership.
    pub fn contains(&self, p: &ProbabilityVector<S>) -> bool {
        p.dominated_by(&self.source).is_none()
    }
}

pub fn core_vertices<S: Scalar>(mu: &Capacity<S>, n_limit: usize) -> Result<CorePolytope<S>> {
    let n = mu.n;
    if n > n_limit {
        return Err(Error::DimensionExceeded { n, limit: n_limit });
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty ground set".into()));
    }
    let mut vertices = match integer_vertices(mu) {
        Some(v) => v,
        None => generic_vertices(mu),
    };
    vertices.sort_by(|a, b| {
        b.weights
            .iter()
            .zip(&a.weights)
            .map(|(x, y)| x.partial_cmp(y).expect("NaN vertex"))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(CorePolytope { vertices, source: mu.clone() })
}

pub fn core_range<S: Scalar>(mu: &Capacity<S>, b: EventSet) -> Result<(S, S)> {
    core_vertices(mu, DEFAULT_CORE_LIMIT)?.range(b)
}

/// Proper nonempty events. Nonnegativity is implied: `P(Omega \ {i}) <= mu(Omega \ {i}) <= 1`.
fn constraint_events(n: usize) -> Vec<EventSet> {
    (1..EventSet::full(n).0).map(EventSet).collect()
}

/// Calls `visit` on every `k`-subset of `0..m` (lexicographic).
fn for_each_combination(m: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    if k > m {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        visit(&idx);
        let Some(pos) = (0..k).rev().find(|&i| idx[i] != i + m - k) else {
            return;
        };
        idx[pos] += 1;
        for j in pos + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Exact enumeration in `i128` after scaling the table to a common denominator.
/// Returns `None` when the table is not rational or an intermediate overflows.
fn integer_vertices<S: Scalar>(mu: &Capacity<S>) -> Option<Vec<ProbabilityVector<S>>> {
    let n = mu.n;
    let ratios: Vec<(i128, i128)> = mu.table.iter().map(|v| v.small_ratio()).collect::<Option<_>>()?;
    let denom = ratios.iter().try_fold(1i128, |acc, &(_, d)| {
        let l = acc.lcm(&d);
        (l.abs() < (1i128 << 40)).then_some(l)
    })?;
    let scaled: Vec<i128> = ratios.iter().map(|&(p, d)| p * (denom / d)).collect();
    let events = constraint_events(n);
    let mut seen: HashSet<Vec<i128>> = HashSet::new();
    let mut out = Vec::new();
    let mut overflow = false;

    for_each_combination(events.len(), n - 1, |chosen| {
        if overflow {
            return;
        }
        let mut a = vec![vec![0i128; n + 1]; n];
        a[0] = vec![1; n + 1];
        a[0][n] = denom;
        for (row, &ci) in chosen.iter().enumerate() {
            let e = events[ci];
            for (j, cell) in a[row + 1].iter_mut().take(n).enumerate() {
                *cell = e.contains(j) as i128;
            }
            a[row + 1][n] = scaled[e.0 as usize];
        }
        let Some(solved) = bareiss_solve(&mut a) else {
            overflow = true;
            return;
        };
        let Some((mut det, mut xs)) = solved else {
            return;
        };
        if det < 0 {
            det = -det;
            xs.iter_mut().for_each(|x| *x = -*x);
        }
        let feasible = events.iter().all(|e| {
            let lhs: i128 = e.points().map(|i| xs[i]).sum();
            scaled[e.0 as usize].checked_mul(det).is_some_and(|rhs| lhs <= rhs)
        });
        if !feasible {
            return;
        }
        let Some(scale) = det.checked_mul(denom) else {
            overflow = true;
            return;
        };
        let g = xs.iter().fold(scale, |g, x| g.gcd(x));
        let key: Vec<i128> = xs.iter().map(|x| x / g).collect();
        if seen.insert(key) {
            let weights = xs.iter().map(|&x| S::from_ratio(x / g, scale / g)).collect();
            out.push(ProbabilityVector { weights });
        }
    });
    (!overflow).then_some(out)
}

/// Fraction-free Gauss-Jordan on an `n x (n+1)` augmented system.
///
/// Outer `None` signals overflow; inner `None` a singular system. On success
/// returns `(det, det * x)`.
#[allow(clippy::type_complexity)]
fn bareiss_solve(a: &mut [Vec<i128>]) -> Option<Option<(i128, Vec<i128>)>> {
    let n = a.len();
    let mut prev = 1i128;
    for k in 0..n {
        let Some(p) = (k..n).find(|&r| a[r][k] != 0) else {
            return Some(None);
        };
        if p != k {
            a.swap(p, k);
        }
        for i in 0..n {
            if i == k {
                continue;
            }
            for j in 0..=n {
                if j == k {
                    continue;
                }
                let v = a[k][k].checked_mul(a[i][j])?.checked_sub(a[i][k].checked_mul(a[k][j])?)?;
                a[i][j] = v / prev;
            }
            a[i][k] = 0;
        }
        prev = a[k][k];
    }
    // All diagonal entries now equal the determinant of the row-swapped system.
    let det = a[n - 1][n - 1];
    let xs: Vec<i128> = (0..n).map(|i| a[i][n]).collect();
    debug_assert!((0..n).all(|i| a[i][i] == det));
    Some(Some((det, xs)))
}

fn generic_vertices<S: Scalar>(mu: &Capacity<S>) -> Vec<ProbabilityVector<S>> {
    let n = mu.n;
    let events = constraint_events(n);
    let mut out: Vec<ProbabilityVector<S>> = Vec::new();
    for_each_combination(events.len(), n - 1, |chosen| {
        let mut a: Vec<Vec<S>> = Vec::with_capacity(n);
        let mut first = vec![S::one(); n + 1];
        first[n] = S::one();
        a.push(first);
        for &ci in chosen {
            let e = events[ci];
            let mut row: Vec<S> = (0..n).map(|j| if e.contains(j) { S::one() } else { S::zero() }).collect();
            row.push(mu.table[e.0 as usize].clone());
            a.push(row);
        }
        let Some(x) = gauss_solve(a) else {
            return;
        };
        let p = ProbabilityVector { weights: x };
        if events.iter().any(|&e| !p.prob(e).approx_le(&mu.table[e.0 as usize])) {
            return;
        }
        if !out.iter().any(|q| q.weights.iter().zip(&p.weights).all(|(a, b)| a.approx_eq(b))) {
            out.push(p);
        }
    });
    out
}

/// Gaussian elimination with partial pivoting on an augmented system.
fn gauss_solve<S: Scalar>(mut a: Vec<Vec<S>>) -> Option<Vec<S>> {
    let n = a.len();
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().partial_cmp(&a[j][k].abs()).unwrap())?;
        if a[p][k].abs().to_f64() < 1e-9 && !S::EXACT || a[p][k].is_zero_ish() {
            return None;
        }
        a.swap(p, k);
        for i in k + 1..n {
            let factor = a[i][k].clone() / a[k][k].clone();
            for j in k..=n {
                let v = a[i][j].clone() - factor.clone() * a[k][j].clone();
                a[i][j] = v;
            }
        }
    }
    let mut x = vec![S::zero(); n];
    for i in (0..n).rev() {
        let mut acc = a[i][n].clone();
        for j in i + 1..n {
            acc = acc - a[i][j].clone() * x[j].clone();
        }
        x[i] = acc / a[i][i].clone();
    }
    Some(x)
}

/// Index of the product point `(a, b)` on an `n1 x n2` product space.
pub fn product_point(a: usize, b: usize, n2: usize) -> usize {
    a * n2 + b
}

/// The rectangle `A x B` as an event of the product space.
pub fn product_event(a: EventSet, b: EventSet, n2: usize) -> EventSet {
    let pts: Vec<usize> = a
        .points()
        .flat_map(|i| b.points().map(move |j| product_point(i, j, n2)))
        .collect();
    EventSet::from_points(&pts)
}

pub fn product_probability<S: Scalar>(p: &ProbabilityVector<S>, q: &ProbabilityVector<S>) -> ProbabilityVector<S> {
    let weights = p
        .weights
        .iter()
        .flat_map(|a| q.weights.iter().map(move |b| a.clone() * b.clone()))
        .collect();
    ProbabilityVector { weights }
}

/// Product upper probability, represented by products of core vertices of the factors.
pub fn product_upper<S: Scalar>(v1: &UpperProbability<S>, v2: &UpperProbability<S>) -> Result<UpperProbability<S>> {
    product_upper_with_limit(v1, v2, DEFAULT_CORE_LIMIT)
}

pub fn product_upper_with_limit<S: Scalar>(
    v1: &UpperProbability<S>,
    v2: &UpperProbability<S>,
    n_limit: usize,
) -> Result<UpperProbability<S>> {
    let n = v1.points() * v2.points();
    if n > MAX_POINTS {
        return Err(Error::DimensionExceeded { n, limit: MAX_POINTS });
    }
    let c1 = core_vertices(&v1.to_capacity(), n_limit)?;
    let c2 = core_vertices(&v2.to_capacity(), n_limit)?;
    let lambda = c1
        .vertices
        .iter()
        .flat_map(|p| c2.vertices.iter().map(move |q| product_probability(p, q)))
        .collect();
    UpperProbability::new(lambda)
}

/// JSON form of a capacity or upper probability; rationals are `"p/q"` strings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetFunctionSpec {
    pub n: usize,
    pub kind: SetFunctionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<Vec<String>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetFunctionKind {
    Table,
    Lambda,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParsedSetFunction<S> {
    Table(Capacity<S>),
    Lambda(UpperProbability<S>),
}

impl<S: Scalar> ParsedSetFunction<S> {
    pub fn to_capacity(&self) -> Capacity<S> {
        match self {
            ParsedSetFunction::Table(c) => c.clone(),
            ParsedSetFunction::Lambda(v) => v.to_capacity(),
        }
    }
}

impl SetFunctionSpec {
    pub fn from_capacity(mu: &Capacity<Rational>) -> Self {
        let table = EventSet::all(mu.n)
            .map(|e| (e.mask_string(), mu.value(e).to_string()))
            .collect();
        SetFunctionSpec { n: mu.n, kind: SetFunctionKind::Table, table: Some(table), lambda: None }
    }

    pub fn from_upper(v: &UpperProbability<Rational>) -> Self {
        let lambda = v
            .lambda
            .iter()
            .map(|p| p.weights.iter().map(|w| w.to_string()).collect())
            .collect();
        SetFunctionSpec { n: v.points(), kind: SetFunctionKind::Lambda, table: None, lambda: Some(lambda) }
    }

    pub fn parse<S: Scalar>(&self) -> Result<ParsedSetFunction<S>> {
        match self.kind {
            SetFunctionKind::Table => {
                let entries = self
                    .table
                    .as_ref()
                    .ok_or_else(|| Error::Parse("kind \"table\" requires a table".into()))?;
                if self.n > 20 {
                    return Err(Error::DimensionExceeded { n: self.n, limit: 20 });
                }
                let mut table: Vec<Option<S>> = vec![None; 1 << self.n];
                for (k, v) in entries {
                    let e = EventSet::parse_mask(k)?;
                    let slot = table
                        .get_mut(e.0 as usize)
                        .ok_or_else(|| Error::Parse(format!("event {k} outside ground set")))?;
                    *slot = Some(S::parse_text(v)?);
                }
                let table = table
                    .into_iter()
                    .enumerate()
                    .map(|(i, v)| v.ok_or_else(|| Error::Parse(format!("missing table entry for event {i}"))))
                    .collect::<Result<Vec<S>>>()?;
                Ok(ParsedSetFunction::Table(Capacity::from_table(self.n, table)?))
            }
            SetFunctionKind::Lambda => {
                let rows = self
                    .lambda
                    .as_ref()
                    .ok_or_else(|| Error::Parse("kind \"lambda\" requires a lambda list".into()))?;
                let lambda = rows
                    .iter()
                    .map(|row| {
                        if row.len() != self.n {
                            return Err(Error::SizeMismatch { expected: self.n, got: row.len() });
                        }
                        ProbabilityVector::new(row.iter().map(|s| S::parse_text(s)).collect::<Result<_>>()?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ParsedSetFunction::Lambda(UpperProbability::new(lambda)?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::ratio;

    fn pv(w: &[(i64, i64)]) -> ProbabilityVector<Rational> {
        ProbabilityVector::new(w.iter().map(|&(a, b)| ratio(a, b)).collect()).unwrap()
    }

    fn two_diracs() -> UpperProbability<Rational> {
        UpperProbability::new(vec![ProbabilityVector::dirac(2, 0), ProbabilityVector::dirac(2, 1)]).unwrap()
    }

    #[test]
    fn choquet_of_uniform_is_expectation() {
        let p = pv(&[(1, 2), (1, 2)]);
        assert_eq!(choquet_integral(&p, &[ratio(0, 1), ratio(1, 1)]), ratio(1, 2));
    }

    #[test]
    fn choquet_of_constant_is_constant() {
        let v = two_diracs();
        assert_eq!(choquet_integral(&v, &[ratio(-3, 7), ratio(-3, 7)]), ratio(-3, 7));
    }

    #[test]
    fn choquet_sqrt_distortion() {
        let p = ProbabilityVector::new(vec![0.5, 0.5]).unwrap();
        let mu = distort(&p, &Distortion::sqrt()).unwrap();
        let v = choquet_integral(&mu, &[1.0, 0.0]);
        assert!((v - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn choquet_handles_negative_values() {
        // Upper probability of two diracs: integral is the max of f.
        let v = two_diracs();
        assert_eq!(choquet_integral(&v, &[ratio(-2, 1), ratio(-5, 1)]), ratio(-2, 1));
    }

    #[test]
    fn classify_probability() {
        let flags = classify_capacity(&pv(&[(1, 3), (1, 6), (1, 2)]).to_capacity());
        assert!(flags.is_capacity.holds && flags.concave.holds && flags.subadditive.holds && flags.additive.holds);
    }

    #[test]
    fn classify_max_of_diracs() {
        let flags = classify_capacity(&two_diracs().to_capacity());
        assert!(flags.is_capacity.holds);
        assert!(flags.subadditive.holds);
        assert!(!flags.additive.holds);
        let (a, b) = flags.additive.witness.unwrap();
        assert_eq!((a, b), (EventSet::singleton(0), EventSet::singleton(1)));
    }

    #[test]
    fn classify_rejects_non_monotone() {
        let mu = Capacity::from_table(2, vec![ratio(0, 1), ratio(9, 10), ratio(0, 1), ratio(1, 2)]).unwrap();
        let flags = classify_capacity(&mu);
        // mu(Omega) = 1/2 is caught by normalization first.
        assert!(!flags.is_capacity.holds);
        let mu = Capacity::from_table(3, {
            let mut t = vec![ratio(0, 1); 8];
            t[0b001] = ratio(9, 10);
            t[0b011] = ratio(1, 2);
            t[0b111] = ratio(1, 1);
            t[0b101] = ratio(1, 1);
            t[0b110] = ratio(1, 1);
            t
        })
        .unwrap();
        let flags = classify_capacity(&mu);
        assert_eq!(flags.is_capacity.witness, Some((EventSet::from_points(&[0]), EventSet::from_points(&[0, 1]))));
        assert!(Capacity::new(3, mu.table().to_vec()).is_err());
    }

    #[test]
    fn distort_identity_and_scaled_min() {
        let p = pv(&[(1, 4), (1, 4), (1, 4), (1, 4)]);
        assert_eq!(distort(&p, &Distortion::identity()).unwrap(), p.to_capacity());
        let v = distort(&p, &Distortion::scaled_min(ratio(2, 1))).unwrap();
        assert_eq!(v.value(EventSet::singleton(2)), ratio(1, 2));
        assert_eq!(v.value(EventSet::from_points(&[1, 3])), ratio(1, 1));
        assert!(classify_capacity(&v).concave.holds);
    }

    #[test]
    fn distort_rejects_bad_endpoints() {
        let p = pv(&[(1, 2), (1, 2)]);
        let shifted = Distortion::new(|x: &Rational| x.clone() + ratio(1, 10), true);
        assert!(matches!(distort(&p, &shifted), Err(Error::InvalidDistortion(_))));
        let convex = Distortion::new(|x: &Rational| x.clone() * x.clone(), true);
        assert!(matches!(distort(&p, &convex), Err(Error::InvalidDistortion(_))));
    }

    #[test]
    fn core_of_max_of_diracs_is_simplex() {
        let core = core_vertices(&two_diracs().to_capacity(), 6).unwrap();
        assert_eq!(core.vertices, vec![pv(&[(1, 1), (0, 1)]), pv(&[(0, 1), (1, 1)])]);
        assert_eq!(core.range(EventSet::singleton(0)).unwrap(), (ratio(0, 1), ratio(1, 1)));
    }

    #[test]
    fn core_of_probability_is_itself() {
        let p = pv(&[(1, 5), (3, 10), (1, 2)]);
        let core = core_vertices(&p.to_capacity(), 6).unwrap();
        assert_eq!(core.vertices, vec![p.clone()]);
        let b = EventSet::from_points(&[0, 2]);
        assert_eq!(core.range(b).unwrap(), (p.prob(b), p.prob(b)));
    }

    #[test]
    fn core_of_sqrt_distortion() {
        let p = ProbabilityVector::new(vec![0.5, 0.5]).unwrap();
        let mu = distort(&p, &Distortion::sqrt()).unwrap();
        let core = core_vertices(&mu, 6).unwrap();
        let s = 0.5f64.sqrt();
        assert_eq!(core.vertices.len(), 2);
        assert!((core.vertices[0].weights()[0] - s).abs() < 1e-12);
        assert!((core.vertices[1].weights()[0] - (1.0 - s)).abs() < 1e-12);
        let (lo, hi) = core.range(EventSet::singleton(0)).unwrap();
        assert!((lo - (1.0 - s)).abs() < 1e-12 && (hi - s).abs() < 1e-12);
    }

    #[test]
    fn core_dimension_limit_and_empty_core() {
        let p = ProbabilityVector::<Rational>::dirac(7, 0);
        assert!(matches!(
            core_vertices(&p.to_capacity(), 6),
            Err(Error::DimensionExceeded { n: 7, limit: 6 })
        ));
        // mu({0}) + mu({1}) < 1: no probability fits underneath.
        let mu = Capacity::from_table(2, vec![ratio(0, 1), ratio(1, 4), ratio(1, 4), ratio(1, 1)]).unwrap();
        let core = core_vertices(&mu, 6).unwrap();
        assert!(core.is_empty());
        assert_eq!(core.range(EventSet::singleton(0)), Err(Error::EmptyCore));
    }

    #[test]
    fn integer_and_generic_paths_agree() {
        let v = UpperProbability::new(vec![
            pv(&[(1, 2), (1, 4), (1, 4), (0, 1)]),
            pv(&[(0, 1), (1, 3), (1, 3), (1, 3)]),
            pv(&[(1, 6), (1, 6), (1, 6), (1, 2)]),
        ])
        .unwrap();
        let mu = v.to_capacity();
        let fast = integer_vertices(&mu).unwrap();
        let slow = generic_vertices(&mu);
        assert_eq!(fast.len(), slow.len());
        for p in &fast {
            assert!(slow.contains(p));
        }
    }

    #[test]
    fn product_of_max_of_diracs_diagonal() {
        let v = two_diracs();
        let vv = product_upper(&v, &v).unwrap();
        let diag = EventSet::from_points(&[product_point(0, 0, 2), product_point(1, 1, 2)]);
        assert_eq!(vv.value(diag), ratio(1, 1));
        let a = EventSet::singleton(0);
        let b = EventSet::singleton(1);
        assert_eq!(vv.value(product_event(a, b, 2)), v.value(a) * v.value(b));
    }

    #[test]
    fn spec_round_trip() {
        let v = UpperProbability::new(vec![pv(&[(1, 3), (2, 3)]), pv(&[(1, 2), (1, 2)])]).unwrap();
        let spec = SetFunctionSpec::from_upper(&v);
        let json = serde_json::to_string(&spec).unwrap();
        let back: SetFunctionSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back.parse::<Rational>().unwrap(), ParsedSetFunction::Lambda(v.clone()));
        let table = SetFunctionSpec::from_capacity(&v.to_capacity());
        assert_eq!(table.table.as_ref().unwrap()["3"], "1");
        assert_eq!(table.parse::<Rational>().unwrap().to_capacity(), v.to_capacity());
    }
}
