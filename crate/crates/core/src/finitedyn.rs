//! Finite measurable transformations.
//!
//! A map on `{0, .., n-1}` is a functional graph: every weakly connected
//! component holds exactly one cycle, and the invariant events are exactly
//! the unions of components. Everything asymptotic (skeletons, conditional
//! expectations, Birkhoff limits) reduces to averages over terminal cycles.

use num_complex::Complex64;
use num_integer::Integer;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::setfun::{
    core_vertices, product_upper, Capacity, EventSet, ProbabilityVector, SetFunction, UpperProbability,
    DEFAULT_CORE_LIMIT, MAX_POINTS,
};
use crate::{Error, Result};

/// Cap on the Cesàro verification horizon.
pub const HORIZON_CAP: u128 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "EndomapSpec", into = "EndomapSpec")]
pub struct Endomap {
    image: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EndomapSpec {
    n: usize,
    image: Vec<usize>,
}

impl TryFrom<EndomapSpec> for Endomap {
    type Error = Error;

    fn try_from(spec: EndomapSpec) -> Result<Self> {
        if spec.image.len() != spec.n {
            return Err(Error::SizeMismatch { expected: spec.n, got: spec.image.len() });
        }
        Endomap::new(spec.image)
    }
}

impl From<Endomap> for EndomapSpec {
    fn from(t: Endomap) -> Self {
        EndomapSpec { n: t.image.len(), image: t.image }
    }
}

impl Endomap {
    pub fn new(image: Vec<usize>) -> Result<Self> {
        let n = image.len();
        if n == 0 {
            return Err(Error::InvalidMap("empty ground set".into()));
        }
        if let Some(i) = image.iter().position(|&j| j >= n) {
            return Err(Error::InvalidMap(format!("image of {i} is {} >= n = {n}", image[i])));
        }
        Ok(Endomap { image })
    }

    pub fn identity(n: usize) -> Self {
        Endomap { image: (0..n).collect() }
    }

    /// The cyclic shift `i -> i + 1 mod n`.
    pub fn cycle(n: usize) -> Self {
        Endomap { image: (0..n).map(|i| (i + 1) % n).collect() }
    }

    pub fn n(&self) -> usize {
        self.image.len()
    }

    pub fn image(&self) -> &[usize] {
        &self.image
    }

    pub fn apply(&self, i: usize) -> usize {
        self.image[i]
    }

    pub fn iterate(&self, mut i: usize, k: usize) -> usize {
        for _ in 0..k {
            i = self.image[i];
        }
        i
    }

    pub fn preimage(&self, a: EventSet) -> EventSet {
        EventSet(
            self.image
                .iter()
                .enumerate()
                .filter(|(_, &j)| a.contains(j))
                .fold(0u64, |m, (i, _)| m | (1u64 << i)),
        )
    }

    /// `P o T^{-1}` as a weight vector.
    pub fn pushforward<S: Scalar>(&self, weights: &[S]) -> Vec<S> {
        let mut out = vec![S::zero(); self.n()];
        for (i, w) in weights.iter().enumerate() {
            let j = self.image[i];
            out[j] = out[j].clone() + w.clone();
        }
        out
    }

    pub fn compose_fn<S: Clone>(&self, f: &[S]) -> Vec<S> {
        self.image.iter().map(|&j| f[j].clone()).collect()
    }

    /// `T x S` on the product space, point `(a, b)` at index `a * m + b`.
    pub fn product(&self, other: &Endomap) -> Endomap {
        let m = other.n();
        let image = (0..self.n() * m)
            .map(|p| self.image[p / m] * m + other.image[p % m])
            .collect();
        Endomap { image }
    }

    /// Every map on `n` points, in lexicographic order of image vectors.
    pub fn all(n: usize) -> impl Iterator<Item = Endomap> {
        let total = (n as u64).pow(n as u32);
        (0..total).map(move |mut code| {
            let mut image = vec![0; n];
            for slot in image.iter_mut().rev() {
                *slot = (code % n as u64) as usize;
                code /= n as u64;
            }
            Endomap { image }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CycleDecomposition {
    /// Each cycle starts at its smallest point; cycles are sorted by that point.
    pub cycles: Vec<Vec<usize>>,
    pub basin: Vec<usize>,
    pub entry_time: Vec<usize>,
}

impl CycleDecomposition {
    pub fn cycle_of(&self, i: usize) -> &[usize] {
        &self.cycles[self.basin[i]]
    }

    pub fn max_entry(&self) -> usize {
        self.entry_time.iter().copied().max().unwrap_or(0)
    }

    /// Least common multiple of the cycle lengths, `None` past `u128`.
    pub fn period(&self) -> Option<u128> {
        self.cycles
            .iter()
            .try_fold(1u128, |acc, c| acc.checked_mul(c.len() as u128 / acc.gcd(&(c.len() as u128))))
    }

    pub fn cycle_points(&self) -> EventSet {
        EventSet::from_points(&self.cycles.concat())
    }
}

pub fn cycle_decomposition(t: &Endomap) -> CycleDecomposition {
    const UNSEEN: usize = usize::MAX;
    let n = t.n();
    let mut raw_basin = vec![UNSEEN; n];
    let mut entry = vec![0usize; n];
    let mut on_path = vec![false; n];
    let mut raw_cycles: Vec<Vec<usize>> = Vec::new();

    for start in 0..n {
        if raw_basin[start] != UNSEEN {
            continue;
        }
        let mut path = Vec::new();
        let mut x = start;
        while raw_basin[x] == UNSEEN && !on_path[x] {
            on_path[x] = true;
            path.push(x);
            x = t.apply(x);
        }
        if raw_basin[x] == UNSEEN {
            let pos = path.iter().position(|&p| p == x).expect("point is on the path");
            let id = raw_cycles.len();
            for &p in &path[pos..] {
                raw_basin[p] = id;
                entry[p] = 0;
            }
            raw_cycles.push(path[pos..].to_vec());
            path.truncate(pos);
        }
        for &p in path.iter().rev() {
            let next = t.apply(p);
            raw_basin[p] = raw_basin[next];
            entry[p] = entry[next] + 1;
        }
        for &p in &path {
            on_path[p] = false;
        }
    }

    for c in &mut raw_cycles {
        let m = (0..c.len()).min_by_key(|&i| c[i]).expect("cycles are nonempty");
        c.rotate_left(m);
    }
    let mut order: Vec<usize> = (0..raw_cycles.len()).collect();
    order.sort_by_key(|&i| raw_cycles[i][0]);
    let mut relabel = vec![0; raw_cycles.len()];
    for (new, &old) in order.iter().enumerate() {
        relabel[old] = new;
    }
    CycleDecomposition {
        cycles: order.iter().map(|&i| raw_cycles[i].clone()).collect(),
        basin: raw_basin.iter().map(|&b| relabel[b]).collect(),
        entry_time: entry,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InvariantAlgebra {
    /// One atom per weakly connected component, ordered by the component's cycle.
    pub atoms: Vec<EventSet>,
}

impl InvariantAlgebra {
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// All `2^atoms` invariant events, the empty set first.
    pub fn events(&self) -> impl Iterator<Item = EventSet> + '_ {
        (0u64..1 << self.atoms.len()).map(move |sel| {
            self.atoms
                .iter()
                .enumerate()
                .filter(|(k, _)| sel & (1 << k) != 0)
                .fold(EventSet::EMPTY, |acc, (_, &a)| acc.union(a))
        })
    }

    pub fn atom_of(&self, i: usize) -> usize {
        self.atoms.iter().position(|a| a.contains(i)).expect("atoms partition the ground set")
    }
}

pub fn invariant_atoms(t: &Endomap) -> InvariantAlgebra {
    assert!(t.n() <= MAX_POINTS, "invariant events need a bitmask ground set");
    let cd = cycle_decomposition(t);
    let mut atoms = vec![EventSet::EMPTY; cd.cycles.len()];
    for (i, &b) in cd.basin.iter().enumerate() {
        atoms[b] = atoms[b].union(EventSet::singleton(i));
    }
    for &a in &atoms {
        assert_eq!(t.preimage(a), a, "component {a} is not invariant");
    }
    InvariantAlgebra { atoms }
}

/// Spreads each point's mass uniformly over its terminal cycle.
pub fn skeleton<S: Scalar>(p: &ProbabilityVector<S>, t: &Endomap) -> ProbabilityVector<S> {
    skeleton_with(p, &cycle_decomposition(t))
}

fn skeleton_with<S: Scalar>(p: &ProbabilityVector<S>, cd: &CycleDecomposition) -> ProbabilityVector<S> {
    let mut out = vec![S::zero(); p.len()];
    for (i, w) in p.weights().iter().enumerate() {
        let cycle = cd.cycle_of(i);
        let share = w.clone() / S::from_i64(cycle.len() as i64);
        for &c in cycle {
            out[c] = out[c].clone() + share.clone();
        }
    }
    ProbabilityVector::from_weights_unchecked(out)
}

/// `(1/len) sum_{start <= i < start + len} P o T^{-i}`.
pub fn cesaro_window<S: Scalar>(p: &ProbabilityVector<S>, t: &Endomap, start: usize, len: usize) -> Vec<S> {
    let mut current = p.weights().to_vec();
    for _ in 0..start {
        current = t.pushforward(&current);
    }
    let mut acc = vec![S::zero(); p.len()];
    for _ in 0..len {
        for (a, c) in acc.iter_mut().zip(&current) {
            *a = a.clone() + c.clone();
        }
        current = t.pushforward(&current);
    }
    let scale = S::from_i64(len as i64);
    acc.into_iter().map(|a| a / scale.clone()).collect()
}

/// Skeleton together with the window `[max_entry, max_entry + period)` on which
/// the Cesàro average was checked to reproduce it exactly.
pub fn skeleton_verified<S: Scalar>(
    p: &ProbabilityVector<S>,
    t: &Endomap,
) -> Result<(ProbabilityVector<S>, (usize, usize))> {
    let cd = cycle_decomposition(t);
    let start = cd.max_entry();
    let period = cd.period().unwrap_or(u128::MAX);
    let horizon = start as u128 + period;
    if horizon > HORIZON_CAP {
        return Err(Error::HorizonExceeded { horizon, cap: HORIZON_CAP });
    }
    let q = skeleton_with(p, &cd);
    let window = cesaro_window(p, t, start, period as usize);
    if !window.iter().zip(q.weights()).all(|(a, b)| a.approx_eq(b)) {
        return Err(Error::Internal("Cesàro window disagrees with the cycle skeleton".into()));
    }
    Ok((q, (start, period as usize)))
}

/// `g_f(w)` = average of `f` over the terminal cycle of `w`.
pub fn common_cond_exp<S: Scalar>(f: &[S], t: &Endomap) -> Vec<S> {
    let cd = cycle_decomposition(t);
    let averages: Vec<S> = cd.cycles.iter().map(|c| cycle_average(f, c)).collect();
    cd.basin.iter().map(|&b| averages[b].clone()).collect()
}

fn cycle_average<S: Scalar>(f: &[S], cycle: &[usize]) -> S {
    let total = cycle.iter().fold(S::zero(), |acc, &c| acc + f[c].clone());
    total / S::from_i64(cycle.len() as i64)
}

/// `(1/n) sum_{i<n} f(T^i w)`.
pub fn birkhoff_average<S: Scalar>(f: &[S], t: &Endomap, omega: usize, n: usize) -> S {
    assert!(n >= 1, "Birkhoff averages need n >= 1");
    let mut x = omega;
    let mut total = S::zero();
    for _ in 0..n {
        total = total + f[x].clone();
        x = t.apply(x);
    }
    total / S::from_i64(n as i64)
}

pub fn birkhoff_limit<S: Scalar>(f: &[S], t: &Endomap, omega: usize) -> S {
    let cd = cycle_decomposition(t);
    cycle_average(f, cd.cycle_of(omega))
}

/// Bound on `|average_n - limit|`: `(entry + cycle length) * 2 max|f| / n`.
pub fn birkhoff_error_bound<S: Scalar>(f: &[S], t: &Endomap, omega: usize, n: usize) -> f64 {
    let cd = cycle_decomposition(t);
    let sup = f.iter().map(|v| v.to_f64().abs()).fold(0.0, f64::max);
    (cd.entry_time[omega] + cd.cycle_of(omega).len()) as f64 * 2.0 * sup / n as f64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ErgodicityVerdict {
    pub invariant: bool,
    pub ergodic: bool,
    /// An event with `mu(T^{-1}A) != mu(A)`.
    pub invariance_witness: Option<EventSet>,
    /// An invariant event violating condition (i) or (ii) of the definition.
    pub ergodicity_witness: Option<EventSet>,
}

pub fn ergodicity_check<S: Scalar, F: SetFunction<S> + ?Sized>(mu: &F, t: &Endomap) -> ErgodicityVerdict {
    let n = t.n();
    assert_eq!(mu.points(), n, "capacity and map live on different ground sets");
    let table = mu.to_capacity();
    let invariance_witness = first_non_invariant(&table, t);
    let algebra = invariant_atoms(t);
    let full = EventSet::full(n);
    let ergodicity_witness = algebra.events().find(|&b| {
        let vb = table.value(b);
        let zero_or_one = vb.is_zero_ish() || vb.approx_eq(&S::one());
        let one_side_null = vb.is_zero_ish() || table.value(full.difference(b)).is_zero_ish();
        !(zero_or_one && one_side_null)
    });
    let invariant = invariance_witness.is_none();
    ErgodicityVerdict {
        invariant,
        ergodic: invariant && ergodicity_witness.is_none(),
        invariance_witness,
        ergodicity_witness,
    }
}

fn first_non_invariant<S: Scalar>(table: &Capacity<S>, t: &Endomap) -> Option<EventSet> {
    EventSet::all(t.n()).find(|&a| !table.value(t.preimage(a)).approx_eq(&table.value(a)))
}

fn require_invariant<S: Scalar>(table: &Capacity<S>, t: &Endomap) -> Result<()> {
    match first_non_invariant(table, t) {
        Some(a) => Err(Error::NonInvariant { witness: a.mask_string() }),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(bound(serialize = "S: Scalar"))]
pub struct ErgodicSkeleton<S> {
    /// The unique ergodic element of the core, when `V` is ergodic.
    pub q: Option<ProbabilityVector<S>>,
    /// An invariant event on which core elements disagree or take a value outside `{0, 1}`.
    pub witness: Option<EventSet>,
    /// Whether the definition-based check reaches the same verdict.
    pub definition_agrees: bool,
}

/// Decides ergodicity through the core: `V` is ergodic iff every core element
/// takes one common `{0, 1}` value on each invariant event.
pub fn ergodic_skeleton<S: Scalar>(v: &UpperProbability<S>, t: &Endomap) -> Result<ErgodicSkeleton<S>> {
    let table = v.to_capacity();
    require_invariant(&table, t)?;
    let core = core_vertices(&table, DEFAULT_CORE_LIMIT)?;
    let algebra = invariant_atoms(t);
    let definition = ergodicity_check(&table, t);

    let witness = algebra.events().find(|&a| match core.range(a) {
        Ok((lo, hi)) => !lo.approx_eq(&hi) || !(lo.is_zero_ish() || lo.approx_eq(&S::one())),
        Err(_) => true,
    });
    let q = match witness {
        Some(_) => None,
        None => {
            let q = skeleton(&v.lambda()[0], t);
            let cd = cycle_decomposition(t);
            let support_cycles: std::collections::BTreeSet<usize> = q.support().points().map(|i| cd.basin[i]).collect();
            if support_cycles.len() != 1 {
                return Err(Error::Internal("skeleton of an ergodic V spans several cycles".into()));
            }
            if let Some(a) = q.dominated_by(&table) {
                return Err(Error::Internal(format!("ergodic skeleton leaves the core at {a}")));
            }
            for a in algebra.events() {
                let (lo, _) = core.range(a)?;
                if !lo.approx_eq(&q.prob(a)) {
                    return Err(Error::Internal(format!("core range and skeleton disagree at {a}")));
                }
            }
            Some(q)
        }
    };
    Ok(ErgodicSkeleton { definition_agrees: definition.ergodic == q.is_some(), q, witness })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeakMixingVerdict {
    pub ergodic: bool,
    pub weakly_mixing: bool,
    /// Length of the cycle carrying the ergodic skeleton.
    pub cycle_length: Option<usize>,
    /// A nonconstant eigenfunction `f o T = lambda f` (values as `(re, im)`) when weak mixing fails.
    pub eigenfunction: Option<Vec<(f64, f64)>>,
    pub eigenvalue: Option<(f64, f64)>,
    /// Ergodicity of `V x V` under `T x T`, when the product was small enough to test.
    pub product_ergodic: Option<bool>,
    pub agree: bool,
}

/// Ground sets up to this size also run the product-system oracle.
pub const PRODUCT_ORACLE_LIMIT: usize = 4;

pub fn weak_mixing_check<S: Scalar>(v: &UpperProbability<S>, t: &Endomap) -> Result<WeakMixingVerdict> {
    let oracle = t.n() <= PRODUCT_ORACLE_LIMIT;
    weak_mixing_check_with(v, t, oracle)
}

pub fn weak_mixing_check_with<S: Scalar>(
    v: &UpperProbability<S>,
    t: &Endomap,
    run_oracle: bool,
) -> Result<WeakMixingVerdict> {
    let es = ergodic_skeleton(v, t)?;
    let cd = cycle_decomposition(t);
    let n = t.n();

    let (weakly_mixing, cycle_length, eigenfunction, eigenvalue) = match &es.q {
        Some(q) => {
            let first = q.support().points().next().expect("a probability has support");
            let cycle = cd.cycle_of(first).to_vec();
            let len = cycle.len();
            if len == 1 {
                (true, Some(1), None, None)
            } else {
                let lambda = Complex64::from_polar(1.0, std::f64::consts::TAU / len as f64);
                let mut f = vec![Complex64::new(0.0, 0.0); n];
                for i in 0..n {
                    if cd.basin[i] != cd.basin[first] {
                        continue;
                    }
                    let landing = t.iterate(i, cd.entry_time[i]);
                    let j = cycle.iter().position(|&c| c == landing).expect("orbit lands on its cycle");
                    f[i] = lambda.powi(j as i32 - cd.entry_time[i] as i32);
                }
                let f = f.iter().map(|z| (z.re, z.im)).collect();
                (false, Some(len), Some(f), Some((lambda.re, lambda.im)))
            }
        }
        None => {
            // Not ergodic: the indicator of the witness is a nonconstant invariant function.
            let b = es.witness.expect("non-ergodic verdict carries a witness");
            let f = (0..n).map(|i| (if b.contains(i) { 1.0 } else { 0.0 }, 0.0)).collect();
            (false, None, Some(f), Some((1.0, 0.0)))
        }
    };

    let product_ergodic = if run_oracle {
        let vv = product_upper(v, v)?;
        Some(ergodicity_check(&vv, &t.product(t)).ergodic)
    } else {
        None
    };
    Ok(WeakMixingVerdict {
        ergodic: es.q.is_some(),
        weakly_mixing,
        cycle_length,
        eigenfunction,
        eigenvalue,
        agree: product_ergodic.is_none_or(|p| p == weakly_mixing) && es.definition_agrees,
        product_ergodic,
    })
}

/// The maximal null set of `V`: points whose singleton has upper probability zero.
pub fn null_points<S: Scalar, F: SetFunction<S> + ?Sized>(v: &F) -> EventSet {
    EventSet::from_points(&(0..v.points()).filter(|&i| v.value(EventSet::singleton(i)).is_zero_ish()).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::{ratio, Rational};

    fn map(image: &[usize]) -> Endomap {
        Endomap::new(image.to_vec()).unwrap()
    }

    fn rats(v: &[i64]) -> Vec<Rational> {
        v.iter().map(|&x| ratio(x, 1)).collect()
    }

    fn upper(rows: &[&[(i64, i64)]]) -> UpperProbability<Rational> {
        UpperProbability::new(
            rows.iter()
                .map(|r| ProbabilityVector::new(r.iter().map(|&(a, b)| ratio(a, b)).collect()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn cycles_of_identity_and_swap() {
        let cd = cycle_decomposition(&Endomap::identity(3));
        assert_eq!(cd.cycles, vec![vec![0], vec![1], vec![2]]);
        assert_eq!(cd.entry_time, vec![0, 0, 0]);
        assert_eq!(cycle_decomposition(&map(&[1, 0])).cycles, vec![vec![0, 1]]);
    }

    #[test]
    fn tail_into_two_cycle() {
        let cd = cycle_decomposition(&map(&[1, 2, 1]));
        assert_eq!(cd.cycles, vec![vec![1, 2]]);
        assert_eq!(cd.basin, vec![0, 0, 0]);
        assert_eq!(cd.entry_time, vec![1, 0, 0]);
    }

    #[test]
    fn atoms_are_components() {
        assert_eq!(invariant_atoms(&map(&[1, 0])).atoms, vec![EventSet::from_points(&[0, 1])]);
        assert_eq!(
            invariant_atoms(&map(&[1, 0, 3, 2])).atoms,
            vec![EventSet::from_points(&[0, 1]), EventSet::from_points(&[2, 3])]
        );
        assert_eq!(invariant_atoms(&map(&[1, 2, 1])).atoms, vec![EventSet::full(3)]);
    }

    #[test]
    fn invariant_events_are_exactly_atom_unions() {
        for t in Endomap::all(4) {
            let brute: Vec<EventSet> = EventSet::all(4).filter(|&a| t.preimage(a) == a).collect();
            let mut from_atoms: Vec<EventSet> = invariant_atoms(&t).events().collect();
            from_atoms.sort();
            assert_eq!(brute, from_atoms, "map {:?}", t.image());
        }
    }

    #[test]
    fn skeleton_examples() {
        let d0 = ProbabilityVector::<Rational>::dirac(2, 0);
        assert_eq!(skeleton(&d0, &map(&[1, 0])).weights(), &[ratio(1, 2), ratio(1, 2)]);
        let d0 = ProbabilityVector::<Rational>::dirac(3, 0);
        let (q, window) = skeleton_verified(&d0, &map(&[1, 2, 1])).unwrap();
        assert_eq!(q.weights(), &[ratio(0, 1), ratio(1, 2), ratio(1, 2)]);
        assert_eq!(window, (1, 2));
        let inv = ProbabilityVector::new(vec![ratio(1, 2), ratio(1, 2)]).unwrap();
        assert_eq!(skeleton(&inv, &map(&[1, 0])), inv);
    }

    #[test]
    fn skeleton_horizon_cap() {
        // Cycles of coprime lengths 2, 3, 5, 7, 11, 13, 17, 19 give period 9_699_690.
        let mut image = Vec::new();
        let mut base = 0;
        for len in [2usize, 3, 5, 7, 11, 13, 17, 19] {
            image.extend((0..len).map(|i| base + (i + 1) % len));
            base += len;
        }
        let t = map(&image);
        let p = ProbabilityVector::<Rational>::dirac(t.n(), 0);
        assert!(matches!(skeleton_verified(&p, &t), Err(Error::HorizonExceeded { .. })));
    }

    #[test]
    fn conditional_expectation_and_birkhoff() {
        assert_eq!(common_cond_exp(&rats(&[0, 1]), &map(&[1, 0])), vec![ratio(1, 2); 2]);
        let t = map(&[1, 2, 1]);
        let f = rats(&[5, 2, 4]);
        assert_eq!(common_cond_exp(&f, &t), rats(&[3, 3, 3]));
        assert_eq!(birkhoff_average(&f, &t, 0, 5), ratio(17, 5));
        assert_eq!(birkhoff_limit(&f, &t, 0), ratio(3, 1));
        assert_eq!(birkhoff_average(&rats(&[0, 1]), &map(&[1, 0]), 0, 4), ratio(1, 2));
        let id = Endomap::identity(2);
        assert_eq!(common_cond_exp(&f[..2], &id), f[..2].to_vec());
    }

    #[test]
    fn birkhoff_error_bound_holds() {
        let t = map(&[1, 2, 3, 1, 0]);
        let f = rats(&[7, -2, 4, 1, 3]);
        for n in 1..60 {
            let gap = (birkhoff_average(&f, &t, 4, n) - birkhoff_limit(&f, &t, 4)).to_f64().abs();
            assert!(gap <= birkhoff_error_bound(&f, &t, 4, n) + 1e-15);
        }
    }

    #[test]
    fn ergodicity_examples() {
        let uniform = ProbabilityVector::<Rational>::uniform_on(3, EventSet::full(3)).unwrap();
        let verdict = ergodicity_check(&uniform, &Endomap::cycle(3));
        assert!(verdict.invariant && verdict.ergodic);

        let v = upper(&[&[(1, 2), (1, 2), (0, 1), (0, 1)], &[(0, 1), (0, 1), (1, 2), (1, 2)]]);
        let t = map(&[1, 0, 3, 2]);
        let verdict = ergodicity_check(&v, &t);
        assert!(verdict.invariant && !verdict.ergodic);
        assert_eq!(verdict.ergodicity_witness, Some(EventSet::from_points(&[0, 1])));
        let es = ergodic_skeleton(&v, &t).unwrap();
        assert!(es.q.is_none() && es.definition_agrees);
        assert_eq!(es.witness, Some(EventSet::from_points(&[0, 1])));
    }

    #[test]
    fn swap_with_two_diracs() {
        let v = upper(&[&[(1, 1), (0, 1)], &[(0, 1), (1, 1)]]);
        let t = map(&[1, 0]);
        let es = ergodic_skeleton(&v, &t).unwrap();
        assert_eq!(es.q.unwrap().weights(), &[ratio(1, 2), ratio(1, 2)]);
        let wm = weak_mixing_check(&v, &t).unwrap();
        assert!(wm.ergodic && !wm.weakly_mixing && wm.agree);
        assert_eq!(wm.product_ergodic, Some(false));
        let f = wm.eigenfunction.unwrap();
        assert!((f[0].0 - 1.0).abs() < 1e-12 && (f[1].0 + 1.0).abs() < 1e-12);
        assert!((wm.eigenvalue.unwrap().0 + 1.0).abs() < 1e-12);
    }

    #[test]
    fn absorbing_fixed_point() {
        let t = map(&[0, 0]);
        let v = upper(&[&[(0, 1), (1, 1)]]);
        assert!(matches!(weak_mixing_check(&v, &t), Err(Error::NonInvariant { .. })));
        let v = upper(&[&[(1, 1), (0, 1)]]);
        let wm = weak_mixing_check(&v, &t).unwrap();
        assert!(wm.weakly_mixing && wm.agree && wm.product_ergodic == Some(true));
        let one = upper(&[&[(1, 1)]]);
        assert!(weak_mixing_check(&one, &Endomap::identity(1)).unwrap().weakly_mixing);
    }

    #[test]
    fn eigenfunction_reaches_transients() {
        let t = map(&[1, 2, 3, 1]);
        let v = upper(&[&[(0, 1), (1, 3), (1, 3), (1, 3)]]);
        let wm = weak_mixing_check(&v, &t).unwrap();
        assert_eq!(wm.cycle_length, Some(3));
        let f: Vec<Complex64> = wm.eigenfunction.unwrap().iter().map(|&(a, b)| Complex64::new(a, b)).collect();
        let (lr, li) = wm.eigenvalue.unwrap();
        let lambda = Complex64::new(lr, li);
        for i in 0..4 {
            assert!((f[t.apply(i)] - lambda * f[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn product_map_indexing() {
        let t = map(&[1, 0]);
        let s = map(&[0, 2, 1]);
        let ts = t.product(&s);
        assert_eq!(ts.apply(1), 5);
        assert_eq!(ts.apply(5), 1);
        assert_eq!(ts.apply(0), 3);
    }

    #[test]
    fn endomap_json_round_trip() {
        let t = map(&[1, 2, 1]);
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(json, r#"{"n":3,"image":[1,2,1]}"#);
        assert_eq!(serde_json::from_str::<Endomap>(&json).unwrap(), t);
        assert!(serde_json::from_str::<Endomap>(r#"{"n":2,"image":[0,5]}"#).is_err());
    }

    #[test]
    fn enumerates_all_maps() {
        assert_eq!(Endomap::all(3).count(), 27);
        assert_eq!(Endomap::all(2).map(|t| t.image().to_vec()).collect::<Vec<_>>(), vec![
            vec![0, 0],
            vec![0, 1],
            vec![1, 0],
            vec![1, 1]
        ]);
    }
}
