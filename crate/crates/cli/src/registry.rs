//! Built-in scenarios.

use serde_json::{json, Value};

use crate::scenario::Scenario;

fn golden() -> Value {
    json!("0.6180339887")
}

fn unit_windows() -> Value {
    json!([[[0, 1]], [[1, 2]]])
}

fn half_half() -> Value {
    json!([[0, "1/2"], [1, "1/2"]])
}

fn definitions() -> Vec<Value> {
    vec![
        json!({
            "name": "rotation-swap-ergodic",
            "reproduces": "rotation-swap map on [0,2): V = max of the two unit-window Lebesgue measures is ergodic with skeleton Q = (P1 + P2)/2",
            "seed": 7,
            "system": {"regime": "interval", "map": {"kind": "rotation_swap", "alpha": golden()}, "windows": unit_windows(), "skeleton": half_half()},
            "checks": [
                {"name": "independence", "op": "independence", "member": 0, "b": [[0, 0.5]], "c": [[1, 1.7]], "n": 100000, "tol": 1e-3},
                {"name": "birkhoff", "op": "orbit_average", "f": {"labels": [[[[1, 2]], 1]], "default": 0}, "points": 20, "n": 100000, "tol": 5e-3},
                {"name": "choquet", "op": "choquet_independence", "f": {"labels": [[[[0, 1]], 1]], "default": 0},
                 "g": {"labels": [[[[0.5, 1.5]], 1]], "default": 0}, "n": 2000, "tol": 2e-2, "grid": 400},
                {"name": "process", "op": "process_slln", "h": {"labels": [[[[1, 2]], 1]], "default": 0}, "depth": 3, "n": 4000, "tol": 1e-2}
            ]
        }),
        json!({
            "name": "doubling-paste-not-weakmixing",
            "reproduces": "doubling-paste map on [0,2): V is invariant and ergodic, and f = 1 on [0,1), -1 on [1,2) satisfies f o T = -f, so V is not weakly mixing",
            "seed": 11,
            "system": {"regime": "interval", "map": {"kind": "doubling_paste"}, "windows": unit_windows(), "skeleton": half_half(), "exact": true},
            "checks": [
                {"name": "eigenfunction", "op": "eigenfunction", "f": {"labels": [[[[0, 1]], 1], [[[1, 2]], -1]], "default": 0}, "lambda": [-1.0, 0.0]},
                {"name": "independence", "op": "independence", "member": 0, "b": [[0, "1/2"]], "c": [[1, "3/2"]], "n": 64, "tol": 1e-2},
                {"name": "squared-deviation", "op": "squared_deviation", "expect": "fail", "member": 0, "b": [[0, 1]], "c": [[0, 1]], "n": 64, "tol": 1e-2}
            ]
        }),
        json!({
            "name": "doubling-weak-mixing",
            "reproduces": "doubling map with Lebesgue measure: squared correlation deviations vanish in Cesaro mean and the square-root moment sits inside its bounds",
            "seed": 13,
            "system": {"regime": "interval", "map": {"kind": "doubling"}, "windows": [[[0, 1]]], "skeleton": [[0, 1]], "exact": true},
            "checks": [
                {"name": "squared-deviation", "op": "squared_deviation", "member": 0, "b": [[0, "1/2"]], "c": [[0, "1/2"]], "n": 24, "tol": 1e-2},
                {"name": "sqrt-moment", "op": "sqrt_moment", "member": 0, "b": [[0, "1/2"]], "c": [["1/4", 1]], "r": 0.5, "n": 2000, "tol": 1e-2}
            ]
        }),
        json!({
            "name": "swap-not-weakmixing",
            "reproduces": "swap on two points with V = max of the two Dirac masses: ergodic, not weakly mixing, squared deviation limit 1/4",
            "seed": 1,
            "system": {"regime": "finite", "map": {"n": 2, "image": [1, 0]}, "upper": {"n": 2, "kind": "lambda", "lambda": [["1", "0"], ["0", "1"]]}},
            "checks": [
                {"name": "ergodicity", "op": "ergodicity"},
                {"name": "weak-mixing", "op": "weak_mixing", "expect": "fail"},
                {"name": "squared-deviation", "op": "squared_deviation", "expect": "fail", "member": 0, "b": [0], "c": [0], "n": 1000, "tol": 0.0}
            ]
        }),
        json!({
            "name": "finite-ergodic-transient",
            "reproduces": "three-cycle with a transient tail and V = max of the Dirac masses on the cycle: ergodic, with the uniform cycle measure as skeleton",
            "seed": 2,
            "system": {"regime": "finite", "map": {"n": 5, "image": [1, 2, 0, 0, 3]},
                       "upper": {"n": 5, "kind": "lambda", "lambda": [["1", "0", "0", "0", "0"], ["0", "1", "0", "0", "0"], ["0", "0", "1", "0", "0"]]}},
            "checks": [
                {"name": "ergodicity", "op": "ergodicity"},
                {"name": "independence", "op": "independence", "member": 0, "b": [0], "c": [1, 2], "n": 1000, "tol": 0.0},
                {"name": "choquet", "op": "choquet_independence", "f": ["1", "2", "0", "5", "7"], "g": ["1", "0", "0", "3", "3"], "n": 1000, "tol": 0.0},
                {"name": "process", "op": "process_slln", "h": ["0", "1", "1", "0", "1"], "depth": 4, "n": 1000, "tol": 0.0},
                {"name": "weak-mixing", "op": "weak_mixing", "expect": "fail"}
            ]
        }),
        json!({
            "name": "finite-non-ergodic",
            "reproduces": "two disjoint two-cycles with V = max of their uniform measures: invariant but not ergodic, so no skeleton exists",
            "seed": 3,
            "system": {"regime": "finite", "map": {"n": 4, "image": [1, 0, 3, 2]},
                       "upper": {"n": 4, "kind": "lambda", "lambda": [["1/2", "1/2", "0", "0"], ["0", "0", "1/2", "1/2"]]}},
            "checks": [
                {"name": "ergodicity", "op": "ergodicity", "expect": "fail"},
                {"name": "independence", "op": "independence", "expect": "fail", "member": 0, "b": [0, 1], "c": [0, 1], "n": 100, "tol": 0.0}
            ]
        }),
        json!({
            "name": "periodic-sqrt-moment",
            "reproduces": "on an r-cycle with B = C a single point the square-root moment limit equals the lower bound P(B)^(1/2) P(C)",
            "seed": 4,
            "system": {"regime": "finite", "map": {"n": 3, "image": [1, 2, 0]}, "upper": {"n": 3, "kind": "lambda", "lambda": [["1/3", "1/3", "1/3"]]}},
            "checks": [
                {"name": "sqrt-moment", "op": "sqrt_moment", "member": 0, "b": [0], "c": [0], "r": 0.5, "n": 3000, "tol": 0.0}
            ]
        }),
        json!({
            "name": "absorbing-weak-mixing",
            "reproduces": "a fixed point absorbing a transient point: V = Dirac mass at the fixed point is weakly mixing",
            "seed": 5,
            "system": {"regime": "finite", "map": {"n": 2, "image": [0, 0]}, "upper": {"n": 2, "kind": "lambda", "lambda": [["1", "0"]]}},
            "checks": [
                {"name": "weak-mixing", "op": "weak_mixing"},
                {"name": "squared-deviation", "op": "squared_deviation", "member": 0, "b": [0], "c": [0, 1], "n": 100, "tol": 0.0}
            ]
        }),
        json!({
            "name": "oscillating-sqrt-means",
            "reproduces": "a sequence with Cesaro mean 1/4 whose square-root Cesaro means split along 2^(2k) and 2^(2k+1)",
            "seed": 0,
            "system": {"regime": "integers"},
            "checks": [{"name": "limits", "op": "oscillating_means", "k": 12, "tol": 1e-2, "plain_tol": 1e-3}]
        }),
        json!({
            "name": "z-density-counterexample",
            "reproduces": "A = union of [2^(2n), 2^(2n+1)] has no natural density: two-sided window densities approach 1/6 and 1/3 along two subsequences",
            "seed": 0,
            "system": {"regime": "integers"},
            "checks": [{
                "name": "density", "op": "density", "set": {"kind": "power_blocks"}, "windows": "two_sided", "bound": 1i64 << 26,
                "schedule": (1..=25).map(|k| 1i64 << k).collect::<Vec<_>>(),
                "subsequences": [["2^(2k)", (1..=12).map(|k| 1i64 << (2 * k)).collect::<Vec<_>>()],
                                 ["2^(2k+1)", (1..=12).map(|k| 1i64 << (2 * k + 1)).collect::<Vec<_>>()]],
                "targets": [1.0 / 6.0, 1.0 / 3.0], "tol": 2e-2, "min_gap": 0.1
            }]
        }),
        json!({
            "name": "z-even-density",
            "reproduces": "the even integers have natural density 1/2 under two-sided windows",
            "seed": 0,
            "system": {"regime": "integers"},
            "checks": [{
                "name": "density", "op": "density", "set": {"kind": "even"}, "windows": "two_sided", "bound": 1i64 << 20,
                "schedule": (1..=20).map(|k| 1i64 << k).collect::<Vec<_>>(),
                "subsequences": [["all", (10..=20).map(|k| 1i64 << k).collect::<Vec<_>>()]],
                "targets": [0.5], "tol": 1e-3
            }]
        }),
        json!({
            "name": "null-density-powers",
            "reproduces": "a sequence with vanishing Cesaro mean converges to 0 off a density-zero set (here the powers of two)",
            "seed": 0,
            "system": {"regime": "integers"},
            "checks": [{"name": "extraction", "op": "null_density", "sequence": {"kind": "powers_of_two"}, "limit": 0.0,
                        "horizon": 1 << 20, "m": 10, "tol": 1e-2, "max_density": 2e-5}]
        }),
        json!({
            "name": "null-density-doubling",
            "reproduces": "correlations of the doubling map converge to P(B)P(C) off a density-zero set of times",
            "seed": 0,
            "system": {"regime": "integers"},
            "checks": [{"name": "extraction", "op": "null_density",
                        "sequence": {"kind": "doubling_correlation", "b": [[0, "1/2"]], "c": [["1/3", "5/6"]]},
                        "limit": 0.25, "horizon": 4096, "m": 8, "tol": 1e-2, "max_density": 1e-2}]
        }),
        json!({
            "name": "polynomial-birkhoff-squares",
            "reproduces": "averages of f(T^(i^2) x) for the doubling map at seeded binary expansions approach the integral of f",
            "seed": 17,
            "system": {"regime": "bitstream"},
            "checks": [{"name": "squares", "op": "polynomial_birkhoff", "poly": [0, 0, 1], "f": {"labels": [[[[0, "1/2"]], 1]], "default": 0},
                        "streams": 10, "n": 2000, "target": 0.5, "tol": 0.05, "min_pass": 9}]
        }),
        json!({
            "name": "lyapunov-periodic-swap",
            "reproduces": "diagonal cocycle over a two-cycle: both exponents equal (1/2) log 2 and the filtration is trivial",
            "seed": 0,
            "system": {"regime": "cocycle", "base": {"kind": "finite", "map": {"n": 2, "image": [1, 0]}},
                       "generator": {"d": 2, "kind": "table", "matrices": [[[2, 0], [0, 1]], [[1, 0], [0, 2]]]}, "omega": 0},
            "checks": [
                {"name": "spectrum", "op": "lyapunov", "n": 10000, "tol": 1e-6},
                {"name": "subadditive", "op": "subadditive", "k": 1, "horizon": 64},
                {"name": "filtration", "op": "oseledets", "n": 200, "gap_tol": 1e-3}
            ]
        }),
        json!({
            "name": "oseledets-skewed-cycle",
            "reproduces": "non-normal cocycle over a two-cycle: separated exponents, equivariant slow subspace",
            "seed": 0,
            "system": {"regime": "cocycle", "base": {"kind": "finite", "map": {"n": 2, "image": [1, 0]}},
                       "generator": {"d": 2, "kind": "table", "matrices": [[[2, 1], [0, 0.7]], [[1, 0], [0.4, 1.5]]]}, "omega": 0},
            "checks": [
                {"name": "spectrum", "op": "lyapunov", "n": 10000, "tol": 1e-6},
                {"name": "filtration", "op": "oseledets", "n": 10000, "gap_tol": 1e-3},
                {"name": "subadditive-top", "op": "subadditive", "k": 1, "horizon": 200},
                {"name": "subadditive-det", "op": "subadditive", "k": 2, "horizon": 200}
            ]
        }),
        json!({
            "name": "rotation-cocycle",
            "reproduces": "rotation-valued cocycle over an irrational rotation: an isometric cocycle with zero exponents",
            "seed": 0,
            "system": {"regime": "cocycle", "base": {"kind": "interval", "map": {"kind": "rotation", "alpha": golden()}},
                       "generator": {"d": 2, "kind": "rotation_angle", "angle_scale": 6.0}, "omega": 0.1},
            "checks": [
                {"name": "spectrum", "op": "lyapunov", "n": 10000, "tol": 1e-6},
                {"name": "subadditive", "op": "subadditive", "k": 1, "horizon": 100}
            ]
        }),
        json!({
            "name": "two-point-cocycle",
            "reproduces": "two-valued cocycle over an irrational rotation: compound growth matches the QR spectrum and the filtration is equivariant",
            "seed": 0,
            "system": {"regime": "cocycle", "base": {"kind": "interval", "map": {"kind": "rotation", "alpha": golden()}},
                       "generator": {"d": 2, "kind": "two_point", "matrices": [[[2, 1], [0, 0.5]], [[1.5, 0], [0.3, 0.8]]], "split": 0.5},
                       "omega": 0.1},
            "checks": [
                {"name": "spectrum", "op": "lyapunov", "n": 10000, "tol": 1e-6},
                {"name": "filtration", "op": "oseledets", "n": 10000, "gap_tol": 1e-3}
            ]
        }),
    ]
}

/// Built-in scenarios in catalog order.
pub fn builtin() -> Vec<Scenario> {
    definitions()
        .into_iter()
        .map(|v| serde_json::from_value(v).expect("built-in scenario deserializes"))
        .collect()
}

pub fn find(name: &str) -> Option<Scenario> {
    builtin().into_iter().find(|s| s.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_has_at_least_twelve_unique_entries() {
        let all = builtin();
        assert!(all.len() >= 12);
        let names: std::collections::BTreeSet<_> = all.iter().map(|s| s.name.clone()).collect();
        assert_eq!(names.len(), all.len());
    }

    #[test]
    fn entries_round_trip_and_validate() {
        for s in builtin() {
            s.validate().unwrap();
            assert!(!s.reproduces.is_empty(), "{}", s.name);
            let text = serde_json::to_string(&s).unwrap();
            let back: Scenario = serde_json::from_str(&text).unwrap();
            assert_eq!(back, s);
        }
    }

    #[test]
    fn catalog_contains_doubling_paste() {
        assert!(find("doubling-paste-not-weakmixing").is_some());
        assert!(find("no-such-scenario").is_none());
    }
}
