//! Scenario files: a system, a list of checks and a seed.

use capergo_core::cocycle::GenSpec;
use capergo_core::ergocheck::Windows;
use capergo_core::finitedyn::Endomap;
use capergo_core::intervaldyn::MapSpec;
use capergo_core::setfun::SetFunctionSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Half-open intervals `[a, b)`; endpoints are numbers or `"p/q"` strings.
pub type Intervals = Vec<(Value, Value)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// The result this scenario reproduces.
    pub reproduces: String,
    #[serde(default)]
    pub seed: u64,
    pub system: SystemSpec,
    pub checks: Vec<CheckSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum SystemSpec {
    Finite {
        map: Endomap,
        upper: SetFunctionSpec,
    },
    Interval {
        map: MapSpec,
        /// Member windows of `V = max_k Leb(· ∩ W_k)`.
        windows: Vec<Intervals>,
        /// Skeleton weights per member index.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        skeleton: Option<Vec<(usize, Value)>>,
        /// Rational arithmetic instead of floats.
        #[serde(default)]
        exact: bool,
    },
    /// Subsets and sequences of integers; no dynamics.
    Integers,
    /// Seeded binary expansions under the doubling map.
    Bitstream,
    Cocycle {
        base: BaseSpec,
        generator: GenSpec,
        omega: Value,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseSpec {
    Finite { map: Endomap },
    Interval { map: MapSpec },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expect {
    #[default]
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckSpec {
    pub name: String,
    #[serde(default)]
    pub expect: Expect,
    #[serde(flatten)]
    pub kind: CheckKind,
}

/// A finite event (point list) or an interval set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EventSpec {
    Points(Vec<usize>),
    Intervals(Intervals),
}

/// A function on the base: values per point, or a step function by labelled intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FnSpec {
    Values(Vec<Value>),
    Steps { labels: Vec<(Intervals, Value)>, default: Value },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntegerSetSpec {
    /// `∪ [2^{2n}, 2^{2n+1}]`.
    PowerBlocks,
    Even,
    Points { points: Vec<i64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SequenceSpec {
    /// Indicator of the powers of two.
    PowersOfTwo,
    /// `Leb(B ∩ T^{-i} C)` for the doubling map.
    DoublingCorrelation { b: Intervals, c: Intervals },
}

fn default_grid() -> usize {
    400
}

fn default_samples() -> usize {
    6
}

fn default_angle_tol() -> f64 {
    1e-4
}

fn default_renorm() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum CheckKind {
    Independence { member: usize, b: EventSpec, c: EventSpec, n: usize, tol: f64 },
    SquaredDeviation { member: usize, b: EventSpec, c: EventSpec, n: usize, tol: f64 },
    SqrtMoment { member: usize, b: EventSpec, c: EventSpec, r: f64, n: usize, tol: f64 },
    ChoquetIndependence {
        f: FnSpec,
        g: FnSpec,
        n: usize,
        tol: f64,
        #[serde(default = "default_grid")]
        grid: usize,
    },
    ProcessSlln {
        h: FnSpec,
        depth: usize,
        n: usize,
        tol: f64,
        #[serde(default = "default_samples")]
        samples: usize,
    },
    /// Birkhoff averages at seeded points against `∫ f dQ`.
    OrbitAverage { f: FnSpec, points: usize, n: usize, tol: f64 },
    Ergodicity,
    WeakMixing,
    Eigenfunction { f: FnSpec, lambda: (f64, f64) },
    Density {
        set: IntegerSetSpec,
        windows: Windows,
        bound: i64,
        schedule: Vec<i64>,
        subsequences: Vec<(String, Vec<i64>)>,
        targets: Vec<f64>,
        tol: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        min_gap: Option<f64>,
    },
    NullDensity { sequence: SequenceSpec, limit: f64, horizon: usize, m: usize, tol: f64, max_density: f64 },
    OscillatingMeans { k: u32, tol: f64, plain_tol: f64 },
    PolynomialBirkhoff { poly: Vec<i64>, f: FnSpec, streams: usize, n: usize, target: f64, tol: f64, min_pass: usize },
    Lyapunov {
        n: usize,
        #[serde(default = "default_renorm")]
        renorm_period: usize,
        tol: f64,
    },
    Oseledets {
        n: usize,
        gap_tol: f64,
        #[serde(default = "default_angle_tol")]
        angle_tol: f64,
    },
    Subadditive { k: usize, horizon: usize },
}

impl CheckKind {
    pub fn op(&self) -> &'static str {
        match self {
            CheckKind::Independence { .. } => "independence",
            CheckKind::SquaredDeviation { .. } => "squared_deviation",
            CheckKind::SqrtMoment { .. } => "sqrt_moment",
            CheckKind::ChoquetIndependence { .. } => "choquet_independence",
            CheckKind::ProcessSlln { .. } => "process_slln",
            CheckKind::OrbitAverage { .. } => "orbit_average",
            CheckKind::Ergodicity => "ergodicity",
            CheckKind::WeakMixing => "weak_mixing",
            CheckKind::Eigenfunction { .. } => "eigenfunction",
            CheckKind::Density { .. } => "density",
            CheckKind::NullDensity { .. } => "null_density",
            CheckKind::OscillatingMeans { .. } => "oscillating_means",
            CheckKind::PolynomialBirkhoff { .. } => "polynomial_birkhoff",
            CheckKind::Lyapunov { .. } => "lyapunov",
            CheckKind::Oseledets { .. } => "oseledets",
            CheckKind::Subadditive { .. } => "subadditive",
        }
    }

    /// Horizons must be positive and tolerances nonnegative.
    pub fn validate(&self) -> Result<(), String> {
        use CheckKind::*;
        let horizons: Vec<usize> = match self {
            Independence { n, .. } | SquaredDeviation { n, .. } | SqrtMoment { n, .. } | ChoquetIndependence { n, .. } => vec![*n],
            ProcessSlln { n, depth, .. } => vec![*n, *depth],
            OrbitAverage { n, points, .. } => vec![*n, *points],
            PolynomialBirkhoff { n, streams, .. } => vec![*n, *streams],
            Lyapunov { n, renorm_period, .. } => vec![*n, *renorm_period],
            Oseledets { n, .. } => vec![*n],
            Subadditive { k, horizon } => vec![*k, *horizon],
            NullDensity { horizon, m, .. } => vec![*horizon, *m],
            OscillatingMeans { k, .. } => vec![*k as usize],
            Density { schedule, .. } => vec![schedule.len()],
            Ergodicity | WeakMixing | Eigenfunction { .. } => vec![],
        };
        if horizons.contains(&0) {
            return Err(format!("{}: horizons and counts must be positive", self.op()));
        }
        let tols: Vec<f64> = match self {
            Independence { tol, .. }
            | SquaredDeviation { tol, .. }
            | SqrtMoment { tol, .. }
            | ChoquetIndependence { tol, .. }
            | ProcessSlln { tol, .. }
            | OrbitAverage { tol, .. }
            | Density { tol, .. }
            | NullDensity { tol, .. }
            | PolynomialBirkhoff { tol, .. }
            | Lyapunov { tol, .. } => vec![*tol],
            OscillatingMeans { tol, plain_tol, .. } => vec![*tol, *plain_tol],
            Oseledets { gap_tol, angle_tol, .. } => vec![*gap_tol, *angle_tol],
            _ => vec![],
        };
        if tols.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(format!("{}: tolerances must be finite and nonnegative", self.op()));
        }
        Ok(())
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), String> {
        let mut names = std::collections::BTreeSet::new();
        for c in &self.checks {
            if !names.insert(&c.name) {
                return Err(format!("duplicate check name {:?}", c.name));
            }
            if c.name.is_empty() || c.name.contains(['/', '\\']) {
                return Err(format!("check name {:?} is not a file name", c.name));
            }
            c.kind.validate().map_err(|e| format!("check {}: {e}", c.name))?;
        }
        if self.checks.is_empty() {
            return Err("scenario has no checks".into());
        }
        Ok(())
    }
}
