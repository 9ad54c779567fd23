//! Interval dynamics on a segment `[0, c)`.
//!
//! Sets are finite unions of half-open intervals. Maps are piecewise affine
//! with finitely many branches; each branch records its image interval so
//! preimages and pushforwards reuse exact endpoints instead of recomputing
//! them (which would leave float slivers at branch boundaries).

use num_complex::Complex64;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::scalar::Scalar;
use crate::{Error, Result};

/// Default cap on interval pieces carried through iterated preimages or densities.
pub const DEFAULT_PIECE_BUDGET: usize = 1 << 24;

/// Float-mode boundary snap, relative to the circumference.
pub const BOUNDARY_SNAP: f64 = 1e-15;

/// Reversed golden ratio, the default irrational rotation number.
pub const GOLDEN_ALPHA: f64 = 0.618_033_988_749_894_9;

#[derive(Clone, Debug, PartialEq)]
pub struct IntervalSet<S> {
    c: S,
    pieces: Vec<(S, S)>,
}

impl<S: Scalar> IntervalSet<S> {
    pub fn new(c: S, pieces: Vec<(S, S)>) -> Result<Self> {
        if c <= S::zero() {
            return Err(Error::InvalidInterval(c.to_string(), "circumference must be positive".into()));
        }
        for (a, b) in &pieces {
            if *a < S::zero() || *b > c || a > b {
                return Err(Error::InvalidInterval(format!("[{a}, {b})"), format!("not inside [0, {c})")));
            }
        }
        Ok(Self::normalized(c, pieces))
    }

    pub fn empty(c: S) -> Self {
        IntervalSet { c, pieces: Vec::new() }
    }

    pub fn full(c: S) -> Self {
        IntervalSet { pieces: vec![(S::zero(), c.clone())], c }
    }

    pub fn interval(c: S, a: S, b: S) -> Result<Self> {
        Self::new(c, vec![(a, b)])
    }

    /// Sorts, drops empty pieces and merges pieces that overlap or touch.
    fn normalized(c: S, mut pieces: Vec<(S, S)>) -> Self {
        pieces.retain(|(a, b)| a < b);
        pieces.sort_by(|x, y| x.0.partial_cmp(&y.0).expect("NaN endpoint"));
        let mut out: Vec<(S, S)> = Vec::with_capacity(pieces.len());
        for (a, b) in pieces {
            match out.last_mut() {
                Some(last) if a <= last.1 => {
                    if b > last.1 {
                        last.1 = b;
                    }
                }
                _ => out.push((a, b)),
            }
        }
        IntervalSet { c, pieces: out }
    }

    pub fn c(&self) -> &S {
        &self.c
    }

    pub fn pieces(&self) -> &[(S, S)] {
        &self.pieces
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn measure(&self) -> S {
        self.pieces
            .iter()
            .fold(S::zero(), |acc, (a, b)| acc + (b.clone() - a.clone()))
    }

    pub fn contains(&self, x: &S) -> bool {
        let idx = self.pieces.partition_point(|(a, _)| a <= x);
        idx > 0 && *x < self.pieces[idx - 1].1
    }

    fn same_c(&self, other: &Self) -> Result<()> {
        if self.c == other.c {
            Ok(())
        } else {
            Err(Error::CircumferenceMismatch(self.c.to_string(), other.c.to_string()))
        }
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.same_c(other)?;
        let pieces = self.pieces.iter().chain(&other.pieces).cloned().collect();
        Ok(Self::normalized(self.c.clone(), pieces))
    }

    pub fn intersect(&self, other: &Self) -> Result<Self> {
        self.same_c(other)?;
        let (mut i, mut j) = (0, 0);
        let mut out = Vec::new();
        while i < self.pieces.len() && j < other.pieces.len() {
            let (a1, b1) = &self.pieces[i];
            let (a2, b2) = &other.pieces[j];
            let lo = S::max_of(a1.clone(), a2.clone());
            let hi = S::min_of(b1.clone(), b2.clone());
            if lo < hi {
                out.push((lo, hi));
            }
            if b1 < b2 {
                i += 1;
            } else {
                j += 1;
            }
        }
        Ok(IntervalSet { c: self.c.clone(), pieces: out })
    }

    pub fn complement(&self) -> Self {
        let mut out = Vec::with_capacity(self.pieces.len() + 1);
        let mut cursor = S::zero();
        for (a, b) in &self.pieces {
            if cursor < *a {
                out.push((cursor.clone(), a.clone()));
            }
            cursor = b.clone();
        }
        if cursor < self.c {
            out.push((cursor, self.c.clone()));
        }
        IntervalSet { c: self.c.clone(), pieces: out }
    }

    pub fn difference(&self, other: &Self) -> Result<Self> {
        self.intersect(&other.complement())
    }

    /// Measure of the symmetric difference; zero means equal up to boundary points.
    pub fn distance(&self, other: &Self) -> Result<S> {
        Ok(self.difference(other)?.measure() + other.difference(self)?.measure())
    }
}

/// JSON form: `{"c": number|"p/q", "intervals": [[a, b], ...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalSetSpec {
    pub c: Value,
    pub intervals: Vec<(Value, Value)>,
}

/// Reads a JSON number or `"p/q"` string; numbers are read from their decimal text.
pub fn scalar_from_json<S: Scalar>(v: &Value) -> Result<S> {
    match v {
        Value::String(s) => S::parse_text(s),
        Value::Number(n) => S::parse_text(&n.to_string()),
        other => Err(Error::Parse(format!("expected a number or rational string, got {other}"))),
    }
}

fn scalar_to_json<S: Scalar>(x: &S) -> Value {
    if S::EXACT {
        Value::String(x.to_string())
    } else {
        serde_json::Number::from_f64(x.to_f64()).map_or(Value::Null, Value::Number)
    }
}

impl IntervalSetSpec {
    pub fn build<S: Scalar>(&self) -> Result<IntervalSet<S>> {
        let c = scalar_from_json(&self.c)?;
        let pieces = self
            .intervals
            .iter()
            .map(|(a, b)| Ok((scalar_from_json(a)?, scalar_from_json(b)?)))
            .collect::<Result<Vec<_>>>()?;
        IntervalSet::new(c, pieces)
    }

    pub fn from_set<S: Scalar>(set: &IntervalSet<S>) -> Self {
        IntervalSetSpec {
            c: scalar_to_json(&set.c),
            intervals: set.pieces.iter().map(|(a, b)| (scalar_to_json(a), scalar_to_json(b))).collect(),
        }
    }
}

/// `x -> slope * x + offset` on `[lo, hi)`, with image `[img_lo, img_hi)` (endpoints swapped when decreasing).
#[derive(Clone, Debug, PartialEq)]
pub struct Branch<S> {
    pub lo: S,
    pub hi: S,
    pub slope: S,
    pub offset: S,
    pub img_lo: S,
    pub img_hi: S,
}

impl<S: Scalar> Branch<S> {
    fn increasing(&self) -> bool {
        self.slope > S::zero()
    }

    /// Image of a point of the branch domain; domain endpoints map to the stored image endpoints.
    fn forward(&self, x: &S) -> S {
        match (self.increasing(), x == &self.lo, x == &self.hi) {
            (true, true, _) => self.img_lo.clone(),
            (true, _, true) => self.img_hi.clone(),
            (false, true, _) => self.img_hi.clone(),
            (false, _, true) => self.img_lo.clone(),
            _ => self.slope.clone() * x.clone() + self.offset.clone(),
        }
    }

    /// Inverse on the image; image endpoints map back to the stored domain endpoints.
    fn backward(&self, y: &S) -> S {
        match (self.increasing(), y == &self.img_lo, y == &self.img_hi) {
            (true, true, _) => self.lo.clone(),
            (true, _, true) => self.hi.clone(),
            (false, true, _) => self.hi.clone(),
            (false, _, true) => self.lo.clone(),
            _ => (y.clone() - self.offset.clone()) / self.slope.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseAffineMap<S> {
    c: S,
    branches: Vec<Branch<S>>,
}

impl<S: Scalar> PiecewiseAffineMap<S> {
    /// Builds a map from `(lo, hi, slope, offset)` branches partitioning `[0, c)`.
    pub fn from_branches(c: S, branches: Vec<(S, S, S, S)>) -> Result<Self> {
        let mut built = Vec::with_capacity(branches.len());
        let mut cursor = S::zero();
        for (lo, hi, slope, offset) in branches {
            if lo != cursor || hi <= lo {
                return Err(Error::InvalidMap(format!("branch [{lo}, {hi}) does not continue from {cursor}")));
            }
            if slope.is_zero_ish() {
                return Err(Error::InvalidMap(format!("zero slope on [{lo}, {hi})")));
            }
            let a = slope.clone() * lo.clone() + offset.clone();
            let b = slope.clone() * hi.clone() + offset.clone();
            let (img_lo, img_hi) = if slope > S::zero() { (a, b) } else { (b, a) };
            let img_lo = snap_into(img_lo, &c);
            let img_hi = snap_into(img_hi, &c);
            if img_lo < S::zero() || img_hi > c {
                return Err(Error::InvalidMap(format!("branch [{lo}, {hi}) leaves [0, {c})")));
            }
            cursor = hi.clone();
            built.push(Branch { lo, hi, slope, offset, img_lo, img_hi });
        }
        if cursor != c {
            return Err(Error::InvalidMap(format!("branches end at {cursor}, not {c}")));
        }
        Ok(PiecewiseAffineMap { c, branches: built })
    }

    fn checked_alpha(alpha: &S) -> Result<()> {
        if *alpha < S::zero() || *alpha >= S::one() {
            return Err(Error::InvalidArgument(format!("rotation number {alpha} outside [0, 1)")));
        }
        Ok(())
    }

    /// On `[0, 2)`: `x -> ((x + alpha) mod 1) + 1` on `[0, 1)`, `x -> x - 1` on `[1, 2)`.
    pub fn rotation_swap(alpha: S) -> Result<Self> {
        Self::checked_alpha(&alpha)?;
        let one = S::one();
        let two = S::from_i64(2);
        let split = one.clone() - alpha.clone();
        let mut branches = Vec::new();
        branches.push((S::zero(), split.clone(), one.clone(), alpha.clone() + one.clone()));
        if !alpha.is_zero_ish() {
            branches.push((split, one.clone(), one.clone(), alpha.clone()));
        }
        branches.push((one.clone(), two.clone(), one.clone(), -one));
        let mut map = Self::from_branches(two.clone(), branches)?;
        // Pin the image endpoints the formula produces only up to rounding.
        map.branches[0].img_hi = two;
        if !alpha.is_zero_ish() {
            map.branches[1].img_lo = S::one();
        }
        Ok(map)
    }

    /// On `[0, 2)`: `x -> (2x mod 1) + 1` on `[0, 1)`, `x -> x - 1` on `[1, 2)`.
    pub fn doubling_paste() -> Self {
        let (one, two, half) = (S::one(), S::from_i64(2), S::from_ratio(1, 2));
        Self::from_branches(
            two.clone(),
            vec![
                (S::zero(), half.clone(), two.clone(), one.clone()),
                (half, one.clone(), two.clone(), S::zero()),
                (one.clone(), two, one.clone(), -one),
            ],
        )
        .expect("doubling-paste branches are valid")
    }

    /// On `[0, 1)`: `x -> (x + alpha) mod 1`.
    pub fn rotation(alpha: S) -> Result<Self> {
        Self::checked_alpha(&alpha)?;
        let one = S::one();
        if alpha.is_zero_ish() {
            return Self::from_branches(one.clone(), vec![(S::zero(), one.clone(), one, S::zero())]);
        }
        let split = one.clone() - alpha.clone();
        let mut map = Self::from_branches(
            one.clone(),
            vec![
                (S::zero(), split.clone(), one.clone(), alpha.clone()),
                (split, one.clone(), one.clone(), alpha - one.clone()),
            ],
        )?;
        map.branches[0].img_hi = one;
        map.branches[1].img_lo = S::zero();
        Ok(map)
    }

    /// On `[0, 1)`: `x -> 2x mod 1`.
    pub fn doubling() -> Self {
        let (one, two, half) = (S::one(), S::from_i64(2), S::from_ratio(1, 2));
        Self::from_branches(
            one.clone(),
            vec![(S::zero(), half.clone(), two.clone(), S::zero()), (half, one.clone(), two, -one)],
        )
        .expect("doubling branches are valid")
    }

    pub fn identity(c: S) -> Self {
        Self::from_branches(c.clone(), vec![(S::zero(), c, S::one(), S::zero())]).expect("identity is valid")
    }

    pub fn c(&self) -> &S {
        &self.c
    }

    pub fn branches(&self) -> &[Branch<S>] {
        &self.branches
    }

    fn branch_of(&self, x: &S) -> &Branch<S> {
        let idx = self.branches.partition_point(|b| b.lo <= *x);
        &self.branches[idx.max(1) - 1]
    }

    pub fn apply(&self, x: &S) -> S {
        let y = self.branch_of(x).forward(x);
        // Rounding can push a float image onto `c`; wrap it back into the segment.
        if y >= self.c {
            y - self.c.clone()
        } else {
            y
        }
    }

    /// Interior branch endpoints, where `T` may be discontinuous.
    pub fn boundaries(&self) -> Vec<S> {
        self.branches.iter().skip(1).map(|b| b.lo.clone()).collect()
    }

    /// Whether every branch has slope of absolute value 1.
    pub fn is_isometric(&self) -> bool {
        self.branches.iter().all(|b| b.slope.abs().approx_eq(&S::one()))
    }

    pub fn preimage(&self, set: &IntervalSet<S>) -> Result<IntervalSet<S>> {
        if set.c != self.c {
            return Err(Error::CircumferenceMismatch(self.c.to_string(), set.c.to_string()));
        }
        let mut out = Vec::new();
        for br in &self.branches {
            let start = set.pieces.partition_point(|(_, b)| *b <= br.img_lo);
            for (a, b) in &set.pieces[start..] {
                if *a >= br.img_hi {
                    break;
                }
                let lo = S::max_of(a.clone(), br.img_lo.clone());
                let hi = S::min_of(b.clone(), br.img_hi.clone());
                if lo >= hi {
                    continue;
                }
                let (x0, x1) = (br.backward(&lo), br.backward(&hi));
                out.push(if br.increasing() { (x0, x1) } else { (x1, x0) });
            }
        }
        Ok(IntervalSet::normalized(self.c.clone(), out))
    }

    /// Perron-Frobenius operator on a step density: the density of the pushforward.
    pub fn transfer(&self, rho: &StepDensity<S>) -> StepDensity<S> {
        let mut moved: Vec<(S, S, S)> = Vec::with_capacity(rho.pieces.len() + self.branches.len());
        for br in &self.branches {
            let scale = br.slope.abs();
            let start = rho.pieces.partition_point(|(_, b, _)| *b <= br.lo);
            for (a, b, v) in &rho.pieces[start..] {
                if *a >= br.hi {
                    break;
                }
                let lo = S::max_of(a.clone(), br.lo.clone());
                let hi = S::min_of(b.clone(), br.hi.clone());
                if lo >= hi {
                    continue;
                }
                let (y0, y1) = (br.forward(&lo), br.forward(&hi));
                let (y0, y1) = if br.increasing() { (y0, y1) } else { (y1, y0) };
                moved.push((y0, y1, v.clone() / scale.clone()));
            }
        }
        StepDensity::from_overlapping(moved)
    }
}

fn snap_into<S: Scalar>(y: S, c: &S) -> S {
    if y.approx_eq(c) {
        c.clone()
    } else if y.is_zero_ish() {
        S::zero()
    } else {
        y
    }
}

/// JSON form: `{"kind": "rotation_swap"|"doubling_paste"|"rotation"|"doubling", "alpha": ...}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSpec {
    pub kind: MapKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Value>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    RotationSwap,
    DoublingPaste,
    Rotation,
    Doubling,
}

impl MapSpec {
    pub fn build<S: Scalar>(&self) -> Result<PiecewiseAffineMap<S>> {
        let alpha = || -> Result<S> {
            match &self.alpha {
                Some(v) => scalar_from_json(v),
                None => S::parse_text(&GOLDEN_ALPHA.to_string()),
            }
        };
        match self.kind {
            MapKind::RotationSwap => PiecewiseAffineMap::rotation_swap(alpha()?),
            MapKind::DoublingPaste => Ok(PiecewiseAffineMap::doubling_paste()),
            MapKind::Rotation => PiecewiseAffineMap::rotation(alpha()?),
            MapKind::Doubling => Ok(PiecewiseAffineMap::doubling()),
        }
    }
}

/// A Lebesgue density that is constant on finitely many disjoint pieces and zero elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDensity<S> {
    pieces: Vec<(S, S, S)>,
}

impl<S: Scalar> StepDensity<S> {
    pub fn indicator(set: &IntervalSet<S>) -> Self {
        StepDensity { pieces: set.pieces.iter().map(|(a, b)| (a.clone(), b.clone(), S::one())).collect() }
    }

    pub fn pieces(&self) -> &[(S, S, S)] {
        &self.pieces
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    /// Sums pieces that may overlap into disjoint pieces, merging equal neighbours.
    fn from_overlapping(pieces: Vec<(S, S, S)>) -> Self {
        let mut cuts: Vec<S> = pieces.iter().flat_map(|(a, b, _)| [a.clone(), b.clone()]).collect();
        cuts.sort_by(|x, y| x.partial_cmp(y).expect("NaN endpoint"));
        cuts.dedup();
        if cuts.len() < 2 {
            return StepDensity { pieces: Vec::new() };
        }
        let mut sums: Vec<Option<S>> = vec![None; cuts.len() - 1];
        for (a, b, v) in &pieces {
            let i0 = cuts.partition_point(|x| x < a);
            let i1 = cuts.partition_point(|x| x < b);
            for slot in &mut sums[i0..i1] {
                *slot = Some(match slot.take() {
                    Some(s) => s + v.clone(),
                    None => v.clone(),
                });
            }
        }
        let mut out: Vec<(S, S, S)> = Vec::new();
        for (k, s) in sums.into_iter().enumerate() {
            let Some(v) = s else { continue };
            if v.is_zero_ish() {
                continue;
            }
            match out.last_mut() {
                Some(last) if last.1 == cuts[k] && last.2 == v => last.1 = cuts[k + 1].clone(),
                _ => out.push((cuts[k].clone(), cuts[k + 1].clone(), v)),
            }
        }
        StepDensity { pieces: out }
    }

    /// `integral over set of the density`.
    pub fn integrate(&self, set: &IntervalSet<S>) -> S {
        let (mut i, mut j) = (0, 0);
        let mut total = S::zero();
        while i < self.pieces.len() && j < set.pieces.len() {
            let (a1, b1, v) = &self.pieces[i];
            let (a2, b2) = &set.pieces[j];
            let lo = S::max_of(a1.clone(), a2.clone());
            let hi = S::min_of(b1.clone(), b2.clone());
            if lo < hi {
                total = total + v.clone() * (hi - lo);
            }
            if b1 < b2 {
                i += 1;
            } else {
                j += 1;
            }
        }
        total
    }

    pub fn mass(&self) -> S {
        self.pieces
            .iter()
            .fold(S::zero(), |acc, (a, b, v)| acc + v.clone() * (b.clone() - a.clone()))
    }
}

/// `A -> measure(A ∩ window)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RestrictedLebesgue<S> {
    pub window: IntervalSet<S>,
}

impl<S: Scalar> RestrictedLebesgue<S> {
    pub fn new(window: IntervalSet<S>) -> Self {
        RestrictedLebesgue { window }
    }

    /// The unit window `[i - 1, i)` on `[0, c)`.
    pub fn unit_window(c: S, i: i64) -> Result<Self> {
        let w = IntervalSet::interval(c, S::from_i64(i - 1), S::from_i64(i))?;
        Ok(RestrictedLebesgue { window: w })
    }

    pub fn prob(&self, a: &IntervalSet<S>) -> Result<S> {
        Ok(a.intersect(&self.window)?.measure())
    }
}

/// `V = max_k P_k` over restricted Lebesgue measures.
#[derive(Clone, Debug, PartialEq)]
pub struct UpperLebesgue<S> {
    pub members: Vec<RestrictedLebesgue<S>>,
}

impl<S: Scalar> UpperLebesgue<S> {
    pub fn value(&self, a: &IntervalSet<S>) -> Result<S> {
        self.members
            .iter()
            .map(|p| p.prob(a))
            .try_fold(S::zero(), |acc, v| Ok(S::max_of(acc, v?)))
    }

    /// First test set with `V(T^{-1}A) != V(A)`, if any.
    pub fn invariance_witness<'a>(
        &self,
        map: &PiecewiseAffineMap<S>,
        sets: &'a [IntervalSet<S>],
    ) -> Result<Option<&'a IntervalSet<S>>> {
        for a in sets {
            if !self.value(&map.preimage(a)?)?.approx_eq(&self.value(a)?) {
                return Ok(Some(a));
            }
        }
        Ok(None)
    }
}

/// `[P(B ∩ T^{-i} C)]_{i < n}` for `P` Lebesgue restricted to a window.
///
/// Pushes the density of `P` restricted to `B` forward with the transfer
/// operator, so piece counts stay bounded for the expanding maps too.
pub fn correlation_sequence<S: Scalar>(
    p: &RestrictedLebesgue<S>,
    map: &PiecewiseAffineMap<S>,
    b: &IntervalSet<S>,
    c: &IntervalSet<S>,
    n: usize,
    piece_budget: usize,
) -> Result<Vec<S>> {
    c.same_c(b)?;
    let mut rho = StepDensity::indicator(&b.intersect(&p.window)?);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if rho.len() > piece_budget {
            return Err(Error::BudgetExceeded { iterate: i, what: format!("{} density pieces", rho.len()) });
        }
        out.push(rho.integrate(c));
        if i + 1 < n {
            rho = map.transfer(&rho);
        }
    }
    Ok(out)
}

/// Same sequence by iterating preimages of `C`; piece counts grow like `2^i` for doubling maps.
pub fn correlation_by_preimage<S: Scalar>(
    p: &RestrictedLebesgue<S>,
    map: &PiecewiseAffineMap<S>,
    b: &IntervalSet<S>,
    c: &IntervalSet<S>,
    n: usize,
    piece_budget: usize,
) -> Result<Vec<S>> {
    let base = b.intersect(&p.window)?;
    let mut pulled = c.clone();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if pulled.len() > piece_budget {
            return Err(Error::BudgetExceeded { iterate: i, what: format!("{} preimage pieces", pulled.len()) });
        }
        out.push(base.intersect(&pulled)?.measure());
        if i + 1 < n {
            pulled = map.preimage(&pulled)?;
        }
    }
    Ok(out)
}

/// A function on `[0, c)` constant on `[breaks[k], breaks[k+1])`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepFunction<S, V> {
    c: S,
    breaks: Vec<S>,
    values: Vec<V>,
}

impl<S: Scalar, V: Clone + PartialEq> StepFunction<S, V> {
    pub fn constant(c: S, v: V) -> Self {
        StepFunction { c, breaks: vec![S::zero()], values: vec![v] }
    }

    /// Labels `[0, c)` by the given disjoint sets, `default` elsewhere; later labels win on overlap.
    pub fn from_labels(c: S, labels: &[(IntervalSet<S>, V)], default: V) -> Result<Self> {
        let mut cuts = vec![S::zero()];
        for (set, _) in labels {
            if set.c != c {
                return Err(Error::CircumferenceMismatch(c.to_string(), set.c.to_string()));
            }
            for (a, b) in &set.pieces {
                cuts.push(a.clone());
                cuts.push(b.clone());
            }
        }
        cuts.retain(|x| *x < c);
        cuts.sort_by(|x, y| x.partial_cmp(y).expect("NaN endpoint"));
        cuts.dedup();
        let mut breaks = Vec::new();
        let mut values: Vec<V> = Vec::new();
        for x in cuts {
            let v = labels
                .iter()
                .rev()
                .find(|(set, _)| set.contains(&x))
                .map_or_else(|| default.clone(), |(_, v)| v.clone());
            if values.last() != Some(&v) {
                breaks.push(x);
                values.push(v);
            }
        }
        Ok(StepFunction { c, breaks, values })
    }

    pub fn c(&self) -> &S {
        &self.c
    }

    pub fn eval(&self, x: &S) -> V {
        let idx = self.breaks.partition_point(|b| b <= x);
        self.values[idx.max(1) - 1].clone()
    }

    /// Interior discontinuities.
    pub fn breakpoints(&self) -> &[S] {
        &self.breaks[1..]
    }

    pub fn pieces(&self) -> impl Iterator<Item = (S, S, &V)> + '_ {
        self.breaks.iter().enumerate().map(move |(k, a)| {
            let b = self.breaks.get(k + 1).cloned().unwrap_or_else(|| self.c.clone());
            (a.clone(), b, &self.values[k])
        })
    }

    pub fn level_set(&self, v: &V) -> IntervalSet<S> {
        let pieces = self.pieces().filter(|(_, _, w)| *w == v).map(|(a, b, _)| (a, b)).collect();
        IntervalSet::normalized(self.c.clone(), pieces)
    }

    pub fn distinct_values(&self) -> Vec<V> {
        let mut out: Vec<V> = Vec::new();
        for v in &self.values {
            if !out.contains(v) {
                out.push(v.clone());
            }
        }
        out
    }
}

impl<S: Scalar> StepFunction<S, S> {
    pub fn indicator(set: &IntervalSet<S>) -> Self {
        let c = set.c.clone();
        Self::from_labels(c, &[(set.clone(), S::one())], S::zero()).expect("circumference matches")
    }
}

fn boundary_hit<S: Scalar>(sorted: &[S], x: &S, c: &S) -> bool {
    let idx = sorted.partition_point(|b| b < x);
    let tol = BOUNDARY_SNAP * c.to_f64();
    [idx.checked_sub(1), Some(idx)]
        .into_iter()
        .flatten()
        .filter_map(|k| sorted.get(k))
        .any(|b| x.near(b, tol))
}

/// `(1/n) sum_{i<n} f(T^i x)`; errors if an iterate lands on (or, for floats, within
/// `1e-15 c` of) a discontinuity of `T` or `f`.
pub fn orbit_average<S: Scalar>(map: &PiecewiseAffineMap<S>, f: &StepFunction<S, S>, x: &S, n: usize) -> Result<S> {
    if n == 0 {
        return Err(Error::InvalidArgument("orbit average needs n >= 1".into()));
    }
    if f.c != map.c {
        return Err(Error::CircumferenceMismatch(map.c.to_string(), f.c.to_string()));
    }
    if *x < S::zero() || *x >= map.c {
        return Err(Error::InvalidArgument(format!("start point {x} outside [0, {})", map.c)));
    }
    let mut walls: Vec<S> = map.boundaries();
    walls.extend(f.breakpoints().iter().cloned());
    walls.sort_by(|a, b| a.partial_cmp(b).expect("NaN boundary"));
    walls.dedup();
    let mut point = x.clone();
    let mut total = S::zero();
    for i in 0..n {
        if boundary_hit(&walls, &point, &map.c) {
            return Err(Error::BoundaryHit { iterate: i, point: point.to_string() });
        }
        total = total + f.eval(&point);
        point = map.apply(&point);
    }
    Ok(total / S::from_i64(n as i64))
}

/// A point of `[0, 1)` given by a finite prefix of seeded random binary digits.
///
/// Bit `k` is the `(k+1)`-th binary digit, so the doubling map shifts the read head by one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitstreamPoint {
    words: Vec<u64>,
    budget: usize,
}

impl BitstreamPoint {
    pub fn seeded(seed: u64, budget: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words = (0..budget.div_ceil(64)).map(|_| rng.next_u64()).collect();
        BitstreamPoint { words, budget }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut words = vec![0u64; bits.len().div_ceil(64)];
        for (k, &b) in bits.iter().enumerate() {
            if b {
                words[k / 64] |= 1 << (k % 64);
            }
        }
        BitstreamPoint { words, budget: bits.len() }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn bit(&self, k: usize) -> Result<bool> {
        if k >= self.budget {
            return Err(Error::BudgetExceeded { iterate: k, what: format!("bit budget {}", self.budget) });
        }
        Ok(self.words[k / 64] >> (k % 64) & 1 == 1)
    }

    /// Index of the depth-`d` dyadic cell containing `T^m x`.
    pub fn cell(&self, m: usize, d: u32) -> Result<u64> {
        (0..d as usize).try_fold(0u64, |acc, k| Ok(acc << 1 | self.bit(m + k)? as u64))
    }

    /// The first `k` digits as an exact dyadic rational.
    pub fn prefix_value<S: Scalar>(&self, k: usize) -> Result<S> {
        let mut num = S::zero();
        let mut weight = S::one();
        let half = S::from_ratio(1, 2);
        for i in 0..k {
            weight = weight * half.clone();
            if self.bit(i)? {
                num = num + weight.clone();
            }
        }
        Ok(num)
    }
}

/// Depth `d` such that `x * 2^d` is an integer, if `x` is dyadic of depth at most 62.
pub fn dyadic_depth<S: Scalar>(x: &S) -> Option<u32> {
    if let Some((_, q)) = x.small_ratio() {
        return (q > 0 && (q as u128).is_power_of_two() && q.trailing_zeros() <= 62).then(|| q.trailing_zeros());
    }
    if S::EXACT {
        return None;
    }
    let v = x.to_f64();
    (0..=52).find(|&d| (v * (1u64 << d) as f64).fract() == 0.0)
}

/// `(1/n) sum_{i=1..n} f(T^{p(i)} x)` for the doubling map, reading digits at offset `p(i)`.
///
/// `poly` holds integer coefficients, constant term first. `f` lives on `[0, 1)`
/// with dyadic breakpoints.
pub fn polynomial_orbit_average<S: Scalar>(
    f: &StepFunction<S, S>,
    poly: &[i64],
    x: &BitstreamPoint,
    n: usize,
) -> Result<S> {
    if f.c != S::one() {
        return Err(Error::InvalidArgument("polynomial averages run on [0, 1)".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("polynomial average needs n >= 1".into()));
    }
    let mut depth = 0;
    for b in f.breakpoints() {
        depth = depth.max(dyadic_depth(b).ok_or_else(|| Error::NonDyadic(b.to_string()))?);
    }
    let scale = S::from_i64(1i64 << depth);
    let cell_values: Vec<S> = (0..1u64 << depth)
        .map(|j| f.eval(&(S::from_i64(j as i64) / scale.clone())))
        .collect();
    let mut total = S::zero();
    for i in 1..=n as i64 {
        let offset = poly.iter().rev().try_fold(0i64, |acc, &a| acc.checked_mul(i)?.checked_add(a));
        let offset = offset
            .filter(|&o| o >= 0)
            .ok_or_else(|| Error::InvalidArgument(format!("p({i}) is negative or overflows")))?;
        let cell = x.cell(offset as usize, depth)?;
        total = total + cell_values[cell as usize].clone();
    }
    Ok(total / S::from_i64(n as i64))
}

/// Whether `f(T x) = lambda f(x)` off finitely many points, decided on the common
/// refinement of `f`'s pieces, the branches, and the branch preimages of `f`'s breakpoints.
pub fn verify_eigenfunction<S: Scalar>(
    f: &StepFunction<S, Complex64>,
    map: &PiecewiseAffineMap<S>,
    lambda: Complex64,
) -> bool {
    if f.c != map.c {
        return false;
    }
    let mut cuts: Vec<S> = vec![S::zero()];
    cuts.extend(f.breakpoints().iter().cloned());
    for br in &map.branches {
        cuts.push(br.lo.clone());
        for y in f.breakpoints() {
            if br.img_lo < *y && *y < br.img_hi {
                cuts.push(br.backward(y));
            }
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).expect("NaN cut"));
    cuts.dedup();
    cuts.push(map.c.clone());
    let two = S::from_i64(2);
    cuts.windows(2).filter(|w| w[0] < w[1]).all(|w| {
        let mid = (w[0].clone() + w[1].clone()) / two.clone();
        (f.eval(&map.apply(&mid)) - lambda * f.eval(&mid)).norm() <= 1e-12
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::{ratio, Rational};

    fn iv(c: f64, pieces: &[(f64, f64)]) -> IntervalSet<f64> {
        IntervalSet::new(c, pieces.to_vec()).unwrap()
    }

    fn riv(c: i64, pieces: &[((i64, i64), (i64, i64))]) -> IntervalSet<Rational> {
        IntervalSet::new(
            ratio(c, 1),
            pieces.iter().map(|&((a, b), (x, y))| (ratio(a, b), ratio(x, y))).collect(),
        )
        .unwrap()
    }

    #[test]
    fn set_algebra_examples() {
        assert_eq!(iv(2.0, &[(0.0, 1.0)]).complement(), iv(2.0, &[(1.0, 2.0)]));
        let x = iv(2.0, &[(0.0, 0.6)]).intersect(&iv(2.0, &[(0.4, 1.2)])).unwrap();
        assert_eq!(x.pieces(), &[(0.4, 0.6)]);
        assert!((x.measure() - 0.2).abs() < 1e-15);
        let u = iv(2.0, &[(0.0, 0.5)]).union(&iv(2.0, &[(0.5, 1.0)])).unwrap();
        assert_eq!(u.pieces(), &[(0.0, 1.0)]);
        assert!(matches!(
            iv(2.0, &[]).union(&iv(1.0, &[])),
            Err(Error::CircumferenceMismatch(_, _))
        ));
        assert!(IntervalSet::new(1.0, vec![(0.5, 1.5)]).is_err());
    }

    #[test]
    fn preimage_examples() {
        let t = PiecewiseAffineMap::rotation_swap(GOLDEN_ALPHA).unwrap();
        assert_eq!(t.preimage(&iv(2.0, &[(1.0, 2.0)])).unwrap(), iv(2.0, &[(0.0, 1.0)]));
        let d = PiecewiseAffineMap::<Rational>::doubling();
        let pre = d.preimage(&riv(1, &[((0, 1), (1, 2))])).unwrap();
        assert_eq!(pre, riv(1, &[((0, 1), (1, 4)), ((1, 2), (3, 4))]));
    }

    #[test]
    fn rotation_swap_preimage_matches_grid() {
        let t = PiecewiseAffineMap::rotation_swap(ratio(3, 10)).unwrap();
        let s = riv(2, &[((1, 1), (3, 2))]);
        let pre = t.preimage(&s).unwrap();
        assert_eq!(pre, riv(2, &[((0, 1), (1, 5)), ((7, 10), (1, 1))]));
        for k in 0..10_000 {
            let x = ratio(2 * k, 10_000);
            assert_eq!(pre.contains(&x), s.contains(&t.apply(&x)), "x = {x}");
        }
    }

    #[test]
    fn examples_preserve_lebesgue_exactly() {
        let sets = [riv(2, &[((1, 3), (5, 4)), ((3, 2), (7, 4))]), riv(2, &[((0, 1), (2, 1))])];
        for t in [PiecewiseAffineMap::rotation_swap(ratio(2, 7)).unwrap(), PiecewiseAffineMap::doubling_paste()] {
            for s in &sets {
                assert_eq!(t.preimage(s).unwrap().measure(), s.measure());
            }
        }
    }

    #[test]
    fn correlation_examples() {
        let t = PiecewiseAffineMap::rotation_swap(GOLDEN_ALPHA).unwrap();
        let p1 = RestrictedLebesgue::unit_window(2.0, 1).unwrap();
        let b = iv(2.0, &[(0.0, 1.0)]);
        let seq = correlation_sequence(&p1, &t, &b, &b, 6, DEFAULT_PIECE_BUDGET).unwrap();
        for (i, v) in seq.iter().enumerate() {
            let expected = if i % 2 == 0 { 1.0 } else { 0.0 };
            assert!((v - expected).abs() < 1e-12, "term {i} = {v}");
        }
        let empty = correlation_sequence(&p1, &t, &iv(2.0, &[]), &b, 5, 10).unwrap();
        assert!(empty.iter().all(|v| *v == 0.0));

        let d = PiecewiseAffineMap::<Rational>::doubling();
        let leb = RestrictedLebesgue::new(IntervalSet::full(ratio(1, 1)));
        let half = riv(1, &[((0, 1), (1, 2))]);
        let seq = correlation_sequence(&leb, &d, &half, &half, 8, DEFAULT_PIECE_BUDGET).unwrap();
        assert_eq!(seq[0], ratio(1, 2));
        assert!(seq[1..].iter().all(|v| *v == ratio(1, 4)));
    }

    #[test]
    fn transfer_and_preimage_routes_agree() {
        let d = PiecewiseAffineMap::<Rational>::doubling_paste();
        let p2 = RestrictedLebesgue::unit_window(ratio(2, 1), 2).unwrap();
        let b = riv(2, &[((1, 7), (5, 8)), ((9, 8), (13, 7))]);
        let c = riv(2, &[((1, 3), (3, 2))]);
        let a = correlation_sequence(&p2, &d, &b, &c, 12, DEFAULT_PIECE_BUDGET).unwrap();
        let b2 = correlation_by_preimage(&p2, &d, &b, &c, 12, DEFAULT_PIECE_BUDGET).unwrap();
        assert_eq!(a, b2);
        assert!(matches!(
            correlation_by_preimage(&p2, &d, &b, &c, 12, 8),
            Err(Error::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn orbit_average_examples() {
        let t = PiecewiseAffineMap::rotation_swap(GOLDEN_ALPHA).unwrap();
        let f = StepFunction::indicator(&iv(2.0, &[(1.0, 2.0)]));
        let avg = orbit_average(&t, &f, &0.1, 100_000).unwrap();
        assert!((avg - 0.5).abs() <= 5e-3);
        let id = PiecewiseAffineMap::rotation(0.0).unwrap();
        let g = StepFunction::indicator(&iv(1.0, &[(0.0, 1.0)]));
        assert_eq!(orbit_average(&id, &g, &0.25, 17).unwrap(), 1.0);
        let k = StepFunction::constant(2.0, 0.75);
        assert_eq!(orbit_average(&t, &k, &0.3, 50).unwrap(), 0.75);
    }

    #[test]
    fn orbit_average_detects_boundaries() {
        let t = PiecewiseAffineMap::rotation_swap(ratio(1, 4)).unwrap();
        let f = StepFunction::indicator(&riv(2, &[((1, 1), (2, 1))]));
        // 1/2 -> 7/4 -> 3/4: exactly the branch boundary 1 - alpha.
        let err = orbit_average(&t, &f, &ratio(1, 2), 10).unwrap_err();
        assert_eq!(err, Error::BoundaryHit { iterate: 2, point: "3/4".into() });
    }

    #[test]
    fn bitstream_polynomial_consistency() {
        let x = BitstreamPoint::seeded(7, 256);
        let f = StepFunction::indicator(&riv(1, &[((1, 2), (1, 1))]));
        let d = PiecewiseAffineMap::<Rational>::doubling();
        let start: Rational = x.prefix_value(200).unwrap();
        let direct = orbit_average(&d, &f, &start, 100).unwrap();
        // p(i) = i - 1 visits T^0 x, ..., T^{n-1} x.
        let shifted = polynomial_orbit_average(&f, &[-1, 1], &x, 100).unwrap();
        assert_eq!(direct, shifted);
        let one = StepFunction::constant(ratio(1, 1), ratio(1, 1));
        assert_eq!(polynomial_orbit_average(&one, &[0, 0, 1], &x, 10).unwrap(), ratio(1, 1));
        assert!(matches!(
            polynomial_orbit_average(&f, &[0, 0, 1], &x, 20),
            Err(Error::BudgetExceeded { .. })
        ));
        let third = StepFunction::indicator(&riv(1, &[((1, 3), (1, 1))]));
        assert!(matches!(polynomial_orbit_average(&third, &[0, 1], &x, 5), Err(Error::NonDyadic(_))));
    }

    #[test]
    fn eigenfunction_examples() {
        let t = PiecewiseAffineMap::<Rational>::doubling_paste();
        let c = ratio(2, 1);
        let f = StepFunction::from_labels(
            c.clone(),
            &[(riv(2, &[((1, 1), (2, 1))]), Complex64::new(-1.0, 0.0))],
            Complex64::new(1.0, 0.0),
        )
        .unwrap();
        assert!(verify_eigenfunction(&f, &t, Complex64::new(-1.0, 0.0)));
        assert!(!verify_eigenfunction(&f, &t, Complex64::new(1.0, 0.0)));
        let k = StepFunction::constant(c, Complex64::new(0.3, 0.2));
        assert!(verify_eigenfunction(&k, &t, Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn restricted_lebesgue_max_is_invariant() {
        let t = PiecewiseAffineMap::rotation_swap(ratio(5, 13)).unwrap();
        let v = UpperLebesgue {
            members: vec![
                RestrictedLebesgue::unit_window(ratio(2, 1), 1).unwrap(),
                RestrictedLebesgue::unit_window(ratio(2, 1), 2).unwrap(),
            ],
        };
        let sets = vec![riv(2, &[((1, 9), (4, 9)), ((11, 10), (3, 2))]), riv(2, &[((0, 1), (3, 2))])];
        assert!(v.invariance_witness(&t, &sets).unwrap().is_none());
    }

    #[test]
    fn map_spec_builds_exact_alpha() {
        let spec: MapSpec = serde_json::from_str(r#"{"kind": "rotation_swap", "alpha": "3/10"}"#).unwrap();
        let t: PiecewiseAffineMap<Rational> = spec.build().unwrap();
        assert_eq!(t.branches()[0].hi, ratio(7, 10));
        let spec: MapSpec = serde_json::from_str(r#"{"kind": "rotation", "alpha": 0.25}"#).unwrap();
        let t: PiecewiseAffineMap<Rational> = spec.build().unwrap();
        assert_eq!(t.branches()[0].hi, ratio(3, 4));
        let set: IntervalSetSpec = serde_json::from_str(r#"{"c": 2, "intervals": [[0, "1/2"], [1, 1.7]]}"#).unwrap();
        let s: IntervalSet<Rational> = set.build().unwrap();
        assert_eq!(s.measure(), ratio(6, 5));
    }
}
