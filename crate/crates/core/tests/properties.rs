use capergo_core::cocycle::{compound_power, cycle_from, lyapunov_qr, monodromy_oracle, MatrixGen};
use capergo_core::finitedyn::{cycle_decomposition, Endomap};
use capergo_core::intervaldyn::{IntervalSet, PiecewiseAffineMap};
use capergo_core::scalar::ratio;
use capergo_core::setfun::{
    choquet_integral, classify_capacity, core_vertices, distort, Capacity, Distortion, ProbabilityVector,
};
use capergo_core::Rational;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn zero() -> Rational {
    ratio(0, 1)
}

/// Monotone table from raw draws: `mu(A)` is the largest draw over nonempty subsets of `A`.
fn capacity_from_draws(n: usize, draws: &[u32]) -> Capacity<Rational> {
    let full = (1u64 << n) - 1;
    Capacity::from_fn(n, |a| {
        if a.0 == 0 {
            return zero();
        }
        if a.0 == full {
            return ratio(1, 1);
        }
        let mut best = 0;
        let mut s = a.0;
        while s != 0 {
            best = best.max(draws[s as usize]);
            s = (s - 1) & a.0;
        }
        ratio(best as i64, 100)
    })
    .unwrap()
}

fn capacity_and_fn() -> impl Strategy<Value = (Capacity<Rational>, Vec<i64>)> {
    (1usize..=4).prop_flat_map(|n| {
        (prop::collection::vec(0u32..100, 1 << n), prop::collection::vec(-50i64..50, n))
            .prop_map(move |(d, f)| (capacity_from_draws(n, &d), f))
    })
}

fn rationals(v: &[i64]) -> Vec<Rational> {
    v.iter().map(|&x| ratio(x, 1)).collect()
}

fn matrix(d: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0f64..2.0, d * d).prop_map(move |v| DMatrix::from_vec(d, d, v))
}

proptest! {
    #[test]
    fn choquet_is_positively_homogeneous((mu, f) in capacity_and_fn(), num in 0i64..20, den in 1i64..9) {
        let lambda = ratio(num, den);
        let scaled: Vec<Rational> = rationals(&f).into_iter().map(|x| x * lambda.clone()).collect();
        prop_assert_eq!(choquet_integral(&mu, &scaled), choquet_integral(&mu, &rationals(&f)) * lambda);
    }

    #[test]
    fn choquet_is_translation_equivariant((mu, f) in capacity_and_fn(), c in -30i64..30) {
        let shifted: Vec<Rational> = f.iter().map(|&x| ratio(x + c, 1)).collect();
        prop_assert_eq!(choquet_integral(&mu, &shifted), choquet_integral(&mu, &rationals(&f)) + ratio(c, 1));
    }

    #[test]
    fn choquet_is_monotone((mu, f) in capacity_and_fn(), bumps in prop::collection::vec(0i64..10, 4)) {
        let g: Vec<i64> = f.iter().zip(&bumps).map(|(a, b)| a + b).collect();
        prop_assert!(choquet_integral(&mu, &rationals(&f)) <= choquet_integral(&mu, &rationals(&g)));
    }

    #[test]
    fn concave_choquet_is_max_over_core(
        weights in prop::collection::vec(1i64..6, 2..=5),
        k in 7i64..24,
        f in prop::collection::vec(-20i64..20, 5),
    ) {
        let n = weights.len();
        let total: i64 = weights.iter().sum();
        let p = ProbabilityVector::new(weights.iter().map(|&w| ratio(w, total)).collect()).unwrap();
        let mu = distort(&p, &Distortion::scaled_min(ratio(k, 6))).unwrap();
        prop_assert!(classify_capacity(&mu).concave.holds);
        let f = rationals(&f[..n]);
        let best = core_vertices(&mu, 6)
            .unwrap()
            .vertices
            .iter()
            .map(|q| q.weights().iter().zip(&f).fold(zero(), |acc, (a, b)| acc + a.clone() * b.clone()))
            .max()
            .unwrap();
        prop_assert_eq!(choquet_integral(&mu, &f), best);
    }

    #[test]
    fn preimage_distributes(
        which in 0usize..4,
        a in (0i64..24, 0i64..24),
        b in (0i64..24, 0i64..24),
    ) {
        let (map, c): (PiecewiseAffineMap<Rational>, i64) = match which {
            0 => (PiecewiseAffineMap::doubling(), 1),
            1 => (PiecewiseAffineMap::rotation(ratio(2, 5)).unwrap(), 1),
            2 => (PiecewiseAffineMap::doubling_paste(), 2),
            _ => (PiecewiseAffineMap::rotation_swap(ratio(3, 7)).unwrap(), 2),
        };
        let set = |(x, y): (i64, i64)| {
            let (lo, hi) = (x.min(y), x.max(y));
            IntervalSet::interval(ratio(c, 1), ratio(lo * c, 24), ratio(hi * c, 24)).unwrap()
        };
        let (sa, sb) = (set(a), set(b));
        let pre = |s: &IntervalSet<Rational>| map.preimage(s).unwrap();
        prop_assert_eq!(pre(&sa.union(&sb).unwrap()), pre(&sa).union(&pre(&sb)).unwrap());
        prop_assert_eq!(pre(&sa.intersect(&sb).unwrap()), pre(&sa).intersect(&pre(&sb)).unwrap());
        prop_assert_eq!(pre(&sa.complement()), pre(&sa).complement());
        // Every example map preserves Lebesgue measure.
        prop_assert_eq!(pre(&sa).measure(), sa.measure());
    }

    #[test]
    fn compound_is_multiplicative(a in matrix(4), b in matrix(4), k in 1usize..=4) {
        let lhs = compound_power(&(&a * &b), k).unwrap();
        let rhs = compound_power(&a, k).unwrap() * compound_power(&b, k).unwrap();
        let scale = 1.0 + lhs.amax();
        prop_assert!((lhs - rhs).amax() <= 1e-9 * scale);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// A base point off the cycle still carries the spectrum of the cycle it falls into.
    #[test]
    fn spectrum_from_transient_point_matches_cycle(
        image in prop::collection::vec(0usize..6, 6),
        mats in prop::collection::vec(matrix(2), 6),
        start in 0usize..6,
    ) {
        let t = Endomap::new(image).unwrap();
        let mats: Vec<DMatrix<f64>> = mats
            .into_iter()
            .enumerate()
            .map(|(i, m)| if m.determinant().abs() < 0.2 { m + DMatrix::identity(2, 2) * (1.0 + i as f64) } else { m })
            .collect();
        prop_assume!(mats.iter().all(|m| m.determinant().abs() > 0.05));
        let gen = MatrixGen::table(mats).unwrap();
        let cd = cycle_decomposition(&t);
        let qr = lyapunov_qr(&gen, &t, &start, 10_000, 1).unwrap();
        let oracle = monodromy_oracle(&gen, &t, &cycle_from(&t, start)).unwrap();
        for (x, y) in qr.exponents.iter().zip(&oracle.exponents) {
            prop_assert!((x - y).abs() < 1e-5, "entry time {}: {:?} vs {:?}", cd.entry_time[start], qr.exponents, oracle.exponents);
        }
    }
}
