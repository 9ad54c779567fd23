//! Linear cocycles `Φ(n, ω) = L(T^{n-1} ω) ··· L(ω)` over finite and interval bases,
//! Lyapunov spectra and Oseledets filtrations.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::finitedyn::{common_cond_exp, cycle_decomposition, Endomap};
use crate::intervaldyn::PiecewiseAffineMap;
use crate::scalar::{Rational, Scalar};
use crate::setfun::{SetFunction, UpperProbability};
use crate::{Error, Result};

/// Products whose norm would leave `[1/RENORM_THRESHOLD, RENORM_THRESHOLD]` are rescaled first.
pub const RENORM_THRESHOLD: f64 = 1e300;
pub const DEFAULT_GAP_TOL: f64 = 1e-3;
pub const DEFAULT_RENORM_PERIOD: usize = 1;

/// A base transformation whose points can index a generator.
pub trait BaseDynamics {
    type Point: Clone + std::fmt::Debug + GenPoint;
    fn step(&self, p: &Self::Point) -> Self::Point;
}

pub trait GenPoint {
    fn index(&self) -> Option<usize>;
    fn coordinate(&self) -> f64;
}

impl GenPoint for usize {
    fn index(&self) -> Option<usize> {
        Some(*self)
    }
    fn coordinate(&self) -> f64 {
        *self as f64
    }
}

impl GenPoint for f64 {
    fn index(&self) -> Option<usize> {
        None
    }
    fn coordinate(&self) -> f64 {
        *self
    }
}

impl BaseDynamics for Endomap {
    type Point = usize;
    fn step(&self, p: &usize) -> usize {
        self.apply(*p)
    }
}

impl BaseDynamics for PiecewiseAffineMap<f64> {
    type Point = f64;
    fn step(&self, p: &f64) -> f64 {
        self.apply(p)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GenKind {
    /// One matrix per base point; a single matrix is used everywhere.
    Table(Vec<DMatrix<f64>>),
    /// Planar rotation by `scale * x`.
    RotationAngle { scale: f64 },
    /// `a` for coordinates below `split`, `b` otherwise.
    TwoPoint { a: DMatrix<f64>, b: DMatrix<f64>, split: f64 },
}

/// Generator `L` with a declared bound `M >= |log σ|` for every singular value of every `L(ω)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixGen {
    d: usize,
    kind: GenKind,
    bound: f64,
}

fn log_singular_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    (max.ln(), min.ln())
}

fn operator_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.iter().copied().fold(0.0, f64::max)
}

impl MatrixGen {
    /// `bound = None` uses the smallest valid bound over the finitely many matrices.
    pub fn new(d: usize, kind: GenKind, bound: Option<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        let matrices: Vec<&DMatrix<f64>> = match &kind {
            GenKind::Table(ms) => {
                if ms.is_empty() {
                    return Err(Error::InvalidArgument("empty generator table".into()));
                }
                ms.iter().collect()
            }
            GenKind::RotationAngle { .. } => {
                if d != 2 {
                    return Err(Error::SizeMismatch { expected: 2, got: d });
                }
                vec![]
            }
            GenKind::TwoPoint { a, b, .. } => vec![a, b],
        };
        let mut needed: f64 = 0.0;
        for (i, m) in matrices.iter().enumerate() {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::SizeMismatch { expected: d, got: m.nrows().max(m.ncols()) });
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!("matrix {i} has non-finite entries")));
            }
            let (hi, lo) = log_singular_extremes(m);
            if !lo.is_finite() || lo < -700.0 {
                return Err(Error::Singular { step: i });
            }
            needed = needed.max(hi.abs()).max(lo.abs());
        }
        let bound = bound.unwrap_or(needed);
        if needed > bound + 1e-12 {
            return Err(Error::NormBound { step: 0, bound, value: needed });
        }
        Ok(MatrixGen { d, kind, bound })
    }

    pub fn table(matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        let d = matrices.first().map_or(0, |m| m.nrows());
        Self::new(d, GenKind::Table(matrices), None)
    }

    pub fn constant(m: DMatrix<f64>) -> Result<Self> {
        Self::table(vec![m])
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn kind(&self) -> &GenKind {
        &self.kind
    }

    pub fn eval<P: GenPoint>(&self, p: &P) -> Result<DMatrix<f64>> {
        match &self.kind {
            GenKind::Table(ms) if ms.len() == 1 => Ok(ms[0].clone()),
            GenKind::Table(ms) => {
                let i = p
                    .index()
                    .ok_or_else(|| Error::InvalidArgument("table generator needs a finite base".into()))?;
                ms.get(i)
                    .cloned()
                    .ok_or_else(|| Error::InvalidArgument(format!("no matrix for base point {i}")))
            }
            GenKind::RotationAngle { scale } => {
                let (s, c) = (scale * p.coordinate()).sin_cos();
                Ok(DMatrix::from_row_slice(2, 2, &[c, -s, s, c]))
            }
            GenKind::TwoPoint { a, b, split } => Ok(if p.coordinate() < *split { a.clone() } else { b.clone() }),
        }
    }
}

/// JSON form: `{"d", "kind", "matrices", "angle_scale", "split", "bound"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub d: usize,
    pub kind: GenSpecKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrices: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenSpecKind {
    Table,
    RotationAngle,
    TwoPoint,
}

fn matrix_from_rows(d: usize, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(Error::SizeMismatch { expected: d, got: rows.len() });
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

impl GenSpec {
    pub fn build(&self) -> Result<MatrixGen> {
        let matrices = || -> Result<Vec<DMatrix<f64>>> {
            self.matrices
                .as_deref()
                .ok_or_else(|| Error::InvalidArgument("generator needs matrices".into()))?
                .iter()
                .map(|m| matrix_from_rows(self.d, m))
                .collect()
        };
        let kind = match self.kind {
            GenSpecKind::Table => GenKind::Table(matrices()?),
            GenSpecKind::RotationAngle => GenKind::RotationAngle { scale: self.angle_scale.unwrap_or(1.0) },
            GenSpecKind::TwoPoint => {
                let mut ms = matrices()?;
                if ms.len() != 2 {
                    return Err(Error::InvalidArgument("two_point generator needs exactly two matrices".into()));
                }
                let b = ms.pop().expect("two");
                let a = ms.pop().expect("two");
                GenKind::TwoPoint { a, b, split: self.split.unwrap_or(1.0) }
            }
        };
        MatrixGen::new(self.d, kind, self.bound)
    }
}

/// `e^{log_scale} * m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledMatrix {
    pub log_scale: f64,
    pub m: DMatrix<f64>,
}

impl ScaledMatrix {
    pub fn identity(d: usize) -> Self {
        ScaledMatrix { log_scale: 0.0, m: DMatrix::identity(d, d) }
    }

    /// `self <- a * self`, rescaling before the product could leave the float range.
    pub fn left_mul(&mut self, a: &DMatrix<f64>) {
        let na = operator_norm(a);
        let nm = operator_norm(&self.m);
        let prod = na * nm;
        if !(1.0 / RENORM_THRESHOLD..=RENORM_THRESHOLD).contains(&prod) && nm > 0.0 {
            self.m /= nm;
            self.log_scale += nm.ln();
        }
        self.m = a * &self.m;
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        &self.m * self.log_scale.exp()
    }

    pub fn log_norm(&self) -> f64 {
        self.log_scale + operator_norm(&self.m).ln()
    }
}

pub fn cocycle_matrix<B: BaseDynamics>(gen: &MatrixGen, base: &B, omega: &B::Point, n: usize) -> Result<ScaledMatrix> {
    if n == 0 {
        return Err(Error::InvalidArgument("cocycle length must be at least 1".into()));
    }
    let mut out = ScaledMatrix::identity(gen.d);
    let mut p = omega.clone();
    for _ in 0..n {
        out.left_mul(&gen.eval(&p)?);
        p = base.step(&p);
    }
    Ok(out)
}

/// Exact products for rational tables over a finite base.
pub fn cocycle_matrix_exact(table: &[Vec<Vec<Rational>>], base: &Endomap, omega: usize, n: usize) -> Result<Vec<Vec<Rational>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("cocycle length must be at least 1".into()));
    }
    let d = table.first().map_or(0, |m| m.len());
    let at = |i: usize| -> Result<&Vec<Vec<Rational>>> {
        if table.len() == 1 {
            Ok(&table[0])
        } else {
            table.get(i).ok_or_else(|| Error::InvalidArgument(format!("no matrix for base point {i}")))
        }
    };
    let mut out: Vec<Vec<Rational>> =
        (0..d).map(|i| (0..d).map(|j| if i == j { Rational::one() } else { Rational::zero() }).collect()).collect();
    let mut p = omega;
    for _ in 0..n {
        let a = at(p)?;
        out = (0..d)
            .map(|i| (0..d).map(|j| (0..d).fold(Rational::zero(), |acc, k| acc + &a[i][k] * &out[k][j])).collect())
            .collect();
        p = base.apply(p);
    }
    Ok(out)
}

fn combinations(d: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    if k == 0 || k > d {
        return out;
    }
    loop {
        out.push(cur.clone());
        let Some(i) = (0..k).rev().find(|&i| cur[i] < d - k + i) else { return out };
        cur[i] += 1;
        for j in i + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// `∧^k A`: the matrix of `k × k` minors, rows and columns in lexicographic order.
pub fn compound_power(a: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(Error::SizeMismatch { expected: d, got: a.ncols() });
    }
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!("compound order {k} outside 1..={d}")));
    }
    let combos = combinations(d, k);
    let size = combos.len();
    Ok(DMatrix::from_fn(size, size, |r, c| {
        DMatrix::from_fn(k, k, |i, j| a[(combos[r][i], combos[c][j])]).determinant()
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Accumulated log diagonal divided by `n`.
    Plain,
    /// Per-block logs averaged with a `sin^2` window over `[0, n)`; this suppresses the
    /// `O(1/n)` boundary error that bounded periodic fluctuations leave in the plain mean.
    Hann,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectrumBlock {
    pub exponent: f64,
    pub multiplicity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LyapunovSpectrum {
    /// Nonincreasing, nats per unit time.
    pub exponents: Vec<f64>,
    pub blocks: Vec<SpectrumBlock>,
    pub method: String,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub renorm_period: Option<usize>,
    pub error_estimate: f64,
}

impl LyapunovSpectrum {
    fn from_exponents(mut exponents: Vec<f64>, method: &str, n: usize, renorm_period: Option<usize>, error_estimate: f64) -> Self {
        exponents.sort_by(|a, b| b.total_cmp(a));
        let blocks = group_blocks(&exponents, DEFAULT_GAP_TOL);
        LyapunovSpectrum { exponents, blocks, method: method.into(), n, renorm_period, error_estimate }
    }

    /// Rows `k, exponent, multiplicity, n, error_estimate`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,exponent,multiplicity,n,error_estimate\n");
        let mut k = 0;
        for b in &self.blocks {
            for _ in 0..b.multiplicity {
                k += 1;
                out.push_str(&format!("{k},{},{},{},{}\n", self.exponents[k - 1], b.multiplicity, self.n, self.error_estimate));
            }
        }
        out
    }

    pub fn top_sum(&self, k: usize) -> f64 {
        self.exponents[..k].iter().sum()
    }
}

/// Groups sorted exponents whose consecutive gaps are at most `tol`.
pub fn group_blocks(sorted: &[f64], tol: f64) -> Vec<SpectrumBlock> {
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    let mut prev: Option<f64> = None;
    for &x in sorted {
        match (prev, blocks.last_mut()) {
            (Some(p), Some(last)) if p - x <= tol => {
                last.0 += x;
                last.1 += 1;
            }
            _ => blocks.push((x, 1)),
        }
        prev = Some(x);
    }
    blocks.into_iter().map(|(s, m)| SpectrumBlock { exponent: s / m as f64, multiplicity: m }).collect()
}

/// Windowed mean of per-block values `(start, len, value)` over `[0, n)`; values are totals over the block.
fn windowed_rate(blocks: &[(usize, usize, f64)], n: usize, estimator: Estimator, from: usize) -> f64 {
    match estimator {
        Estimator::Plain => {
            let (mut num, mut den) = (0.0, 0.0);
            for &(s, len, v) in blocks.iter().filter(|b| b.0 >= from) {
                num += v;
                den += len as f64;
                let _ = s;
            }
            num / den
        }
        Estimator::Hann => {
            let span = (n - from) as f64;
            let (mut num, mut den) = (0.0, 0.0);
            for &(s, len, v) in blocks.iter().filter(|b| b.0 >= from) {
                let t = ((s - from) as f64 + len as f64 / 2.0) / span;
                let w = (std::f64::consts::PI * t).sin().powi(2);
                num += w * v;
                den += w * len as f64;
            }
            num / den
        }
    }
}

pub fn lyapunov_qr<B: BaseDynamics>(
    gen: &MatrixGen,
    base: &B,
    omega: &B::Point,
    n: usize,
    renorm_period: usize,
) -> Result<LyapunovSpectrum> {
    lyapunov_qr_with(gen, base, omega, n, renorm_period, Estimator::Hann)
}

/// Per-block log diagonals of the QR-propagated frame: `(start, len, logs)`.
fn qr_logs<B: BaseDynamics>(
    gen: &MatrixGen,
    base: &B,
    omega: &B::Point,
    n: usize,
    renorm_period: usize,
) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    if renorm_period == 0 || n < renorm_period {
        return Err(Error::InvalidArgument(format!("need n >= renorm_period >= 1, got n = {n}, period = {renorm_period}")));
    }
    if renorm_period as f64 * gen.bound > 600.0 {
        return Err(Error::InvalidArgument("renormalization period too long for the norm bound".into()));
    }
    let d = gen.d;
    let mut q = DMatrix::<f64>::identity(d, d);
    let mut p = omega.clone();
    let mut out = Vec::with_capacity(n / renorm_period + 1);
    let mut step = 0;
    while step < n {
        let len = renorm_period.min(n - step);
        let mut m = q;
        for _ in 0..len {
            m = gen.eval(&p)? * m;
            p = base.step(&p);
        }
        let qr = m.qr();
        let r = qr.r();
        let logs: Vec<f64> = (0..d).map(|i| r[(i, i)].abs().ln()).collect();
        if logs.iter().any(|x| !x.is_finite()) {
            return Err(Error::Singular { step: step + len });
        }
        q = qr.q();
        out.push((step, len, logs));
        step += len;
    }
    Ok(out)
}

pub fn lyapunov_qr_with<B: BaseDynamics>(
    gen: &MatrixGen,
    base: &B,
    omega: &B::Point,
    n: usize,
    renorm_period: usize,
    estimator: Estimator,
) -> Result<LyapunovSpectrum> {
    let logs = qr_logs(gen, base, omega, n, renorm_period)?;
    let d = gen.d;
    let column = |i: usize| -> Vec<(usize, usize, f64)> { logs.iter().map(|(s, l, v)| (*s, *l, v[i])).collect() };
    let mut exponents = Vec::with_capacity(d);
    let mut error: f64 = 0.0;
    for i in 0..d {
        let col = column(i);
        let full = windowed_rate(&col, n, estimator, 0);
        let half_start = col.iter().map(|b| b.0).find(|&s| s >= n / 2).unwrap_or(0);
        let half = windowed_rate(&col, n, estimator, half_start);
        error = error.max((full - half).abs());
        exponents.push(full);
    }
    let method = match estimator {
        Estimator::Plain => "qr",
        Estimator::Hann => "qr_windowed",
    };
    Ok(LyapunovSpectrum::from_exponents(exponents, method, n, Some(renorm_period), error))
}

/// Rate of `log ||∧^k Φ(j, ω)||` over `j ≤ n` with the given estimator.
pub fn compound_growth<B: BaseDynamics>(
    gen: &MatrixGen,
    base: &B,
    omega: &B::Point,
    k: usize,
    n: usize,
    estimator: Estimator,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    let size = combinations(gen.d, k).len();
    let mut acc = ScaledMatrix::identity(size);
    let mut p = omega.clone();
    let mut prev = 0.0;
    let mut increments = Vec::with_capacity(n);
    for j in 0..n {
        acc.left_mul(&compound_power(&gen.eval(&p)?, k)?);
        p = base.step(&p);
        let f = acc.log_norm();
        increments.push((j, 1, f - prev));
        prev = f;
    }
    Ok(windowed_rate(&increments, n, estimator, 0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompoundConsistency {
    pub k: usize,
    pub qr_top_sum: f64,
    pub compound_rate: f64,
    pub difference: f64,
}

/// Top-`k` sums of the QR spectrum against the growth of `∧^k Φ`, for every `k`.
pub fn compound_consistency<B: BaseDynamics>(
    gen: &MatrixGen,
    base: &B,
    omega: &B::Point,
    n: usize,
    spectrum: &LyapunovSpectrum,
) -> Result<Vec<CompoundConsistency>> {
    (1..=gen.d)
        .map(|k| {
            let rate = compound_growth(gen, base, omega, k, n, Estimator::Hann)?;
            let sum = spectrum.top_sum(k);
            Ok(CompoundConsistency { k, qr_top_sum: sum, compound_rate: rate, difference: (sum - rate).abs() })
        })
        .collect()
}

/// Exact exponents on a periodic base orbit from the eigenvalue moduli of the period product.
pub fn monodromy_oracle(gen: &MatrixGen, base: &Endomap, cycle: &[usize]) -> Result<LyapunovSpectrum> {
    let l = cycle.len();
    let mut seen = std::collections::HashSet::new();
    let closes = l > 0
        && cycle.iter().all(|&x| x < base.n() && seen.insert(x))
        && (0..l).all(|i| base.apply(cycle[i]) == cycle[(i + 1) % l]);
    if !closes {
        return Err(Error::NotACycle(format!("{cycle:?}")));
    }
    let mut prod = ScaledMatrix::identity(gen.d);
    for &x in cycle {
        prod.left_mul(&gen.eval(&x)?);
    }
    let eig = prod.m.clone().complex_eigenvalues();
    let exps: Vec<f64> = eig.iter().map(|z| (z.norm().ln() + prod.log_scale) / l as f64).collect();
    if exps.iter().any(|x| !x.is_finite()) {
        return Err(Error::Singular { step: l });
    }
    Ok(LyapunovSpectrum::from_exponents(exps, "monodromy", l, None, 0.0))
}

/// The cycle entered by the orbit of `omega`, listed from its entry point.
pub fn cycle_from(base: &Endomap, omega: usize) -> Vec<usize> {
    let cd = cycle_decomposition(base);
    let entry = base.iterate(omega, cd.entry_time[omega]);
    let mut out = vec![entry];
    let mut x = base.apply(entry);
    while x != entry {
        out.push(x);
        x = base.apply(x);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubadditiveReport {
    pub k: usize,
    pub pairs_checked: usize,
    /// Largest `f_{n+m}(ω) - f_n(ω) - f_m(T^n ω)`.
    pub max_excess: f64,
    /// Largest `|f_n(ω)| - k n M`.
    pub max_bound_excess: f64,
    pub subadditive: bool,
    pub additive: bool,
    pub bounded: bool,
}

fn pair_grid(limit: usize) -> Vec<usize> {
    let mut g: Vec<usize> = (1..=limit.min(16)).collect();
    let mut p = 32;
    while p <= limit {
        g.push(p);
        p *= 2;
    }
    g.extend([limit / 3, limit / 2, limit].into_iter().filter(|&x| x > 0));
    g.sort_unstable();
    g.dedup();
    g
}

/// `f_n = log ||∧^k Φ(n, ω)||` against subadditivity along the orbit and the bound `|f_n| ≤ k n M`.
pub fn subadditive_check<B: BaseDynamics>(gen: &MatrixGen, base: &B, omega: &B::Point, k: usize, horizon: usize) -> Result<SubadditiveReport> {
    if horizon < 2 {
        return Err(Error::InvalidArgument("horizon must be at least 2".into()));
    }
    let grid = if horizon <= 64 { (1..=horizon).collect() } else { pair_grid(horizon) };
    // f_m(T^s ω) for m = 1..=horizon - s, for each start s in {0} ∪ grid.
    let mut starts = vec![0];
    starts.extend(grid.iter().copied().filter(|&s| s < horizon));
    let mut orbit = vec![omega.clone()];
    for _ in 0..horizon {
        let next = base.step(orbit.last().expect("nonempty"));
        orbit.push(next);
    }
    let size = combinations(gen.d, k).len();
    if size == 0 {
        return Err(Error::InvalidArgument(format!("compound order {k} outside 1..={}", gen.d)));
    }
    let mut f: std::collections::HashMap<usize, Vec<f64>> = std::collections::HashMap::new();
    for &s in &starts {
        let mut acc = ScaledMatrix::identity(size);
        let mut vals = vec![0.0];
        for p in &orbit[s..horizon] {
            acc.left_mul(&compound_power(&gen.eval(p)?, k)?);
            vals.push(acc.log_norm());
        }
        f.insert(s, vals);
    }
    let (mut pairs, mut max_excess, mut min_excess) = (0, f64::NEG_INFINITY, f64::INFINITY);
    for &n in &grid {
        for &m in &grid {
            if n + m > horizon {
                continue;
            }
            let excess = f[&0][n + m] - f[&0][n] - f[&n][m];
            max_excess = max_excess.max(excess);
            min_excess = min_excess.min(excess);
            pairs += 1;
        }
    }
    let max_bound_excess = f[&0]
        .iter()
        .enumerate()
        .skip(1)
        .map(|(n, v)| v.abs() - (k * n) as f64 * gen.bound)
        .fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-9 * (1.0 + f[&0].iter().fold(0.0f64, |a, v| a.max(v.abs())));
    Ok(SubadditiveReport {
        k,
        pairs_checked: pairs,
        max_excess,
        max_bound_excess,
        subadditive: max_excess <= tol,
        additive: max_excess <= tol && min_excess >= -tol,
        bounded: max_bound_excess <= tol,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubadditiveLimit {
    pub f_star: Vec<f64>,
    /// `f_H(ω) / H` at every point.
    pub pathwise: Vec<f64>,
    /// Largest drop of the running infimum over the last quarter of the horizon.
    pub stabilization: f64,
    pub stabilized: bool,
    pub invariant: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constant_on_support: Option<bool>,
}

/// `f* = inf_{n ≤ H} E(f_n / n | invariant σ-algebra)` for a subadditive family on a finite base.
pub fn subadditive_limit_finite(
    f: impl Fn(usize, usize) -> f64,
    t: &Endomap,
    horizon: usize,
    v: Option<&UpperProbability<Rational>>,
) -> Result<SubadditiveLimit> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    let npts = t.n();
    let table: Vec<Vec<f64>> = (0..=horizon).map(|n| (0..npts).map(|w| if n == 0 { 0.0 } else { f(n, w) }).collect()).collect();
    let grid: Vec<usize> = if horizon <= 64 { (1..=horizon).collect() } else { pair_grid(horizon) };
    for &n in &grid {
        for &m in &grid {
            if n + m > horizon {
                continue;
            }
            for w in 0..npts {
                let lhs = table[n + m][w];
                let rhs = table[n][w] + table[m][t.iterate(w, n)];
                if lhs > rhs + 1e-9 * (1.0 + lhs.abs().max(rhs.abs())) {
                    return Err(Error::NotSubadditive { n, m, point: w, lhs, rhs });
                }
            }
        }
    }
    let mut f_star = vec![f64::INFINITY; npts];
    let mut at_three_quarters = f_star.clone();
    for n in 1..=horizon {
        let scaled: Vec<f64> = table[n].iter().map(|x| x / n as f64).collect();
        let cce = common_cond_exp(&scaled, t);
        for w in 0..npts {
            f_star[w] = f_star[w].min(cce[w]);
        }
        if n == (3 * horizon / 4).max(1) {
            at_three_quarters.clone_from(&f_star);
        }
    }
    let stabilization = f_star.iter().zip(&at_three_quarters).map(|(a, b)| b - a).fold(0.0, f64::max);
    let pathwise = table[horizon].iter().map(|x| x / horizon as f64).collect();
    let invariant = (0..npts).all(|w| (f_star[w] - f_star[t.apply(w)]).abs() <= 1e-12 * (1.0 + f_star[w].abs()));
    let constant_on_support = v.map(|v| {
        let cap = v.to_capacity();
        let support: Vec<f64> = (0..npts)
            .filter(|&w| !cap.value(crate::setfun::EventSet::singleton(w)).is_zero_ish())
            .map(|w| f_star[w])
            .collect();
        let lo = support.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = support.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        hi - lo <= 1e-9 * (1.0 + hi.abs())
    });
    Ok(SubadditiveLimit { f_star, pathwise, stabilization, stabilized: stabilization < 1e-9, invariant, constant_on_support })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OseledetsBlock {
    pub exponent: f64,
    pub multiplicity: usize,
    /// Orthonormal basis of `V_i(ω)`, one inner vector per column.
    pub basis: Vec<Vec<f64>>,
    /// Directional exponent of a random `x ∈ V_i \ V_{i+1}`.
    pub directional: f64,
    /// Directional exponent of `L(ω) x` at `T ω`.
    pub shifted_directional: f64,
    /// Largest principal angle between `L(ω) V_i(ω)` and `V_i(T ω)` at increasing horizons.
    pub angles: Vec<(usize, f64)>,
    pub verdict: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OseledetsApprox {
    pub omega: String,
    pub n: usize,
    pub p: usize,
    pub blocks: Vec<OseledetsBlock>,
    /// `(Φ(n, ω)^* Φ(n, ω))^{1/2n}`, row-major.
    pub psi: Vec<Vec<f64>>,
    pub verdict: bool,
}

/// Singular directions of `Φ(n - j, T^j ω)` for `j = 0..=keep`, from QR of the transposed
/// cocycle run backwards from `T^n ω`: column order is fastest first, so trailing columns span
/// the slow subspaces. Also returns the per-column log growth at `j = 0`.
fn backward_frames(mats: &[DMatrix<f64>], keep: usize) -> Result<(Vec<DMatrix<f64>>, Vec<f64>)> {
    let n = mats.len();
    let d = mats[0].nrows();
    let mut q = DMatrix::<f64>::identity(d, d);
    let mut logs = vec![0.0; d];
    let mut frames = vec![DMatrix::zeros(d, d); keep + 1];
    for j in (0..n).rev() {
        let qr = (mats[j].transpose() * q).qr();
        let r = qr.r();
        for (i, l) in logs.iter_mut().enumerate() {
            *l += r[(i, i)].abs().ln();
        }
        q = qr.q();
        if j <= keep {
            frames[j] = q.clone();
        }
    }
    if logs.iter().any(|x| !x.is_finite()) {
        return Err(Error::Singular { step: 0 });
    }
    Ok((frames, logs))
}

fn orthonormalize(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().qr().q()
}

fn largest_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let residual = a - b * (b.transpose() * a);
    operator_norm(&residual).min(1.0).asin()
}

fn trailing(frame: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    frame.columns(frame.ncols() - dim, dim).into_owned()
}

/// Directional growth rate of `x` along `mats[from..to]`, projecting onto the slow subspaces
/// `frames[j]` (when given) to discard roundoff in faster directions.
fn directional_rate(mats: &[DMatrix<f64>], frames: Option<(&[DMatrix<f64>], usize)>, x: &nalgebra::DVector<f64>, from: usize, to: usize) -> f64 {
    let mut v = x.normalize();
    let mut incs = Vec::with_capacity(to - from);
    for j in from..to {
        let mut w = &mats[j] * &v;
        if let Some((frames, dim)) = frames {
            let basis = trailing(&frames[j + 1], dim);
            w = &basis * (basis.transpose() * &w);
        }
        let norm = w.norm();
        incs.push((j - from, 1, norm.ln()));
        v = w / norm;
    }
    windowed_rate(&incs, to - from, Estimator::Hann, 0)
}

pub fn oseledets_filtration<B: BaseDynamics>(gen: &MatrixGen, base: &B, omega: &B::Point, n: usize, gap_tol: f64) -> Result<OseledetsApprox> {
    if n < 8 {
        return Err(Error::InvalidArgument("horizon must be at least 8".into()));
    }
    let spectrum = lyapunov_qr(gen, base, omega, n, DEFAULT_RENORM_PERIOD)?;
    let blocks = group_blocks(&spectrum.exponents, gap_tol);
    for w in blocks.windows(2) {
        // Backward frames at j ≤ n/2 converge like exp(-gap * n/2).
        if (w[0].exponent - w[1].exponent) * (n as f64) < 40.0 {
            return Err(Error::UnresolvedGap { upper: w[0].exponent, lower: w[1].exponent });
        }
    }
    let d = gen.d;
    let mut mats = Vec::with_capacity(n);
    let mut p = omega.clone();
    for _ in 0..n {
        mats.push(gen.eval(&p)?);
        p = base.step(&p);
    }
    let half = n / 2;
    let (frames, logs) = backward_frames(&mats, half + 1)?;
    let frame0 = &frames[0];
    let psi = {
        let diag = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(d, logs.iter().map(|l| (l / n as f64).exp())));
        frame0 * diag * frame0.transpose()
    };
    let horizons: Vec<usize> = [n / 4, n / 2, n].into_iter().filter(|&m| m >= 2).collect();
    let history: Vec<(usize, Vec<DMatrix<f64>>)> = horizons
        .iter()
        .map(|&m| Ok((m, backward_frames(&mats[..m], 1)?.0)))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x05e1_ede7);
    let mut out_blocks = Vec::with_capacity(blocks.len());
    let mut dim = d;
    for (i, b) in blocks.iter().enumerate() {
        let basis = trailing(frame0, dim);
        let coeffs = nalgebra::DVector::from_fn(dim, |_, _| rng.gen_range(0.5..1.5) * if rng.gen::<bool>() { 1.0 } else { -1.0 });
        let x = &basis * coeffs;
        let project = (i > 0).then_some((frames.as_slice(), dim));
        let directional = directional_rate(&mats, project, &x, 0, half);
        let y = &mats[0] * &x;
        let shifted_directional = directional_rate(&mats, project, &y, 1, half + 1);
        let angles: Vec<(usize, f64)> = history
            .iter()
            .map(|(m, fr)| {
                let moved = orthonormalize(&(&mats[0] * trailing(&fr[0], dim)));
                (*m, largest_principal_angle(&moved, &trailing(&fr[1], dim)))
            })
            .collect();
        let shrinking = angles.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-12) || angles.last().is_none_or(|a| a.1 <= 1e-8);
        let tol = 10.0 * gap_tol;
        let verdict = (directional - b.exponent).abs() <= tol && (shifted_directional - directional).abs() <= tol && shrinking;
        out_blocks.push(OseledetsBlock {
            exponent: b.exponent,
            multiplicity: b.multiplicity,
            basis: (0..dim).map(|c| basis.column(c).iter().copied().collect()).collect(),
            directional,
            shifted_directional,
            angles,
            verdict,
        });
        dim -= b.multiplicity;
    }
    Ok(OseledetsApprox {
        omega: format!("{omega:?}"),
        n,
        p: out_blocks.len(),
        verdict: out_blocks.iter().all(|b| b.verdict),
        blocks: out_blocks,
        psi: (0..d).map(|r| psi.row(r).iter().copied().collect()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::ratio;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(v))
    }

    fn swap_base() -> (Endomap, MatrixGen) {
        (Endomap::new(vec![1, 0]).unwrap(), MatrixGen::table(vec![diag(&[2.0, 1.0]), diag(&[1.0, 2.0])]).unwrap())
    }

    #[test]
    fn cocycle_examples() {
        let base = Endomap::identity(1);
        let g = MatrixGen::constant(diag(&[2.0, 0.5])).unwrap();
        let phi = cocycle_matrix(&g, &base, &0, 3).unwrap().to_matrix();
        assert!((phi - diag(&[8.0, 0.125])).abs().max() < 1e-15);
        let (base, g) = swap_base();
        let phi = cocycle_matrix(&g, &base, &0, 2).unwrap().to_matrix();
        assert_eq!(phi, diag(&[2.0, 2.0]));
        let id = MatrixGen::constant(DMatrix::identity(3, 3)).unwrap();
        assert_eq!(cocycle_matrix(&id, &base, &1, 5).unwrap().to_matrix(), DMatrix::identity(3, 3));
    }

    #[test]
    fn renormalization_carries_scale() {
        let base = Endomap::identity(1);
        let g = MatrixGen::constant(diag(&[1e10, 1.0])).unwrap();
        let phi = cocycle_matrix(&g, &base, &0, 100).unwrap();
        assert!(phi.m.iter().all(|x| x.is_finite()));
        assert!((phi.log_norm() - 1000.0 * 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn exact_cocycle_law() {
        let base = Endomap::new(vec![1, 2, 0]).unwrap();
        let table: Vec<Vec<Vec<Rational>>> = (0..3)
            .map(|i| vec![vec![ratio(i + 1, 2), ratio(1, 3)], vec![ratio(-1, 1), ratio(2, i + 1)]])
            .collect();
        for (n, m) in [(1, 1), (2, 3), (4, 2)] {
            let whole = cocycle_matrix_exact(&table, &base, 0, n + m).unwrap();
            let first = cocycle_matrix_exact(&table, &base, 0, n).unwrap();
            let second = cocycle_matrix_exact(&table, &base, base.iterate(0, n), m).unwrap();
            let prod: Vec<Vec<Rational>> = (0..2)
                .map(|i| (0..2).map(|j| (0..2).fold(Rational::zero(), |a, k| a + &second[i][k] * &first[k][j])).collect())
                .collect();
            assert_eq!(whole, prod);
        }
    }

    #[test]
    fn compound_examples() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.5, -1.0, 3.0, 1.0, 0.0, 2.0, 4.0]);
        assert_eq!(compound_power(&a, 1).unwrap(), a);
        let top = compound_power(&a, 3).unwrap();
        assert!((top[(0, 0)] - a.determinant()).abs() < 1e-12);
        let c = compound_power(&diag(&[2.0, 3.0, 5.0]), 2).unwrap();
        assert!((c - diag(&[6.0, 10.0, 15.0])).abs().max() < 1e-12);
        assert!(compound_power(&a, 4).is_err());
    }

    #[test]
    fn qr_examples() {
        let base = Endomap::identity(1);
        let g = MatrixGen::constant(diag(&[2.0, 0.5])).unwrap();
        let s = lyapunov_qr(&g, &base, &0, 1000, 1).unwrap();
        assert!((s.exponents[0] - 2f64.ln()).abs() < 1e-12 && (s.exponents[1] + 2f64.ln()).abs() < 1e-12);
        let (base, g) = swap_base();
        let s = lyapunov_qr(&g, &base, &0, 1000, 1).unwrap();
        for e in &s.exponents {
            assert!((e - 0.5 * 2f64.ln()).abs() < 1e-6, "{s:?}");
        }
        assert_eq!(s.blocks.len(), 1);
        let id = MatrixGen::constant(DMatrix::identity(2, 2)).unwrap();
        assert_eq!(lyapunov_qr(&id, &base, &0, 10, 3).unwrap().exponents, vec![0.0, 0.0]);
        assert!(lyapunov_qr(&id, &base, &0, 2, 3).is_err());
    }

    #[test]
    fn monodromy_examples() {
        let base = Endomap::identity(1);
        let g = MatrixGen::constant(diag(&[3.0, 5.0])).unwrap();
        let s = monodromy_oracle(&g, &base, &[0]).unwrap();
        assert!((s.exponents[0] - 5f64.ln()).abs() < 1e-12 && (s.exponents[1] - 3f64.ln()).abs() < 1e-12);
        let (base, g) = swap_base();
        let s = monodromy_oracle(&g, &base, &[0, 1]).unwrap();
        assert!(s.exponents.iter().all(|e| (e - 0.5 * 2f64.ln()).abs() < 1e-12));
        let rot = MatrixGen::constant(DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])).unwrap();
        let s = monodromy_oracle(&rot, &Endomap::identity(1), &[0]).unwrap();
        assert!(s.exponents.iter().all(|e| e.abs() < 1e-12));
        assert!(matches!(monodromy_oracle(&g, &base, &[0]), Err(Error::NotACycle(_))));
    }

    #[test]
    fn qr_matches_monodromy_with_transient() {
        let base = Endomap::new(vec![1, 2, 3, 1]).unwrap();
        let g = MatrixGen::table(vec![
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.3, 3.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 1.0, 1.0]),
        ])
        .unwrap();
        let qr = lyapunov_qr(&g, &base, &0, 10_000, 1).unwrap();
        let exact = monodromy_oracle(&g, &base, &cycle_from(&base, 0)).unwrap();
        for (a, b) in qr.exponents.iter().zip(&exact.exponents) {
            assert!((a - b).abs() < 1e-6, "{qr:?} vs {exact:?}");
        }
        for c in compound_consistency(&g, &base, &0, 10_000, &qr).unwrap() {
            assert!(c.difference < 1e-6, "{c:?}");
        }
    }

    #[test]
    fn subadditive_examples() {
        let base = Endomap::identity(1);
        let id = MatrixGen::constant(DMatrix::identity(2, 2)).unwrap();
        let r = subadditive_check(&id, &base, &0, 1, 20).unwrap();
        assert!(r.subadditive && r.additive && r.bounded);
        let g = MatrixGen::constant(diag(&[2.0, 0.5])).unwrap();
        let r = subadditive_check(&g, &base, &0, 1, 100).unwrap();
        assert!(r.additive && r.bounded && r.max_bound_excess.abs() < 1e-9);
        let rot = PiecewiseAffineMap::rotation(crate::intervaldyn::GOLDEN_ALPHA).unwrap();
        let gen = MatrixGen::new(2, GenKind::RotationAngle { scale: 6.0 }, Some(0.0)).unwrap();
        let r = subadditive_check(&gen, &rot, &0.1, 1, 50).unwrap();
        assert!(r.additive && r.max_excess.abs() < 1e-12);
    }

    #[test]
    fn subadditive_limits() {
        let t = Endomap::new(vec![1, 0, 0]).unwrap();
        let r = subadditive_limit_finite(|n, _| 0.7 * n as f64, &t, 30, None).unwrap();
        assert!(r.f_star.iter().all(|x| (x - 0.7).abs() < 1e-12) && r.stabilized);
        let r = subadditive_limit_finite(|n, _| -(n as f64), &t, 30, None).unwrap();
        assert!(r.f_star.iter().all(|x| (x + 1.0).abs() < 1e-12));
        let (base, g) = swap_base();
        let f = |n: usize, w: usize| cocycle_matrix(&g, &base, &w, n).unwrap().log_norm();
        let r = subadditive_limit_finite(f, &base, 40, None).unwrap();
        assert!(r.f_star.iter().all(|x| (x - 0.5 * 2f64.ln()).abs() < 1e-12), "{r:?}");
        assert!(r.invariant && r.stabilized);
        let bad = subadditive_limit_finite(|n, _| (n * n) as f64, &t, 10, None);
        assert!(matches!(bad, Err(Error::NotSubadditive { .. })));
    }

    #[test]
    fn oseledets_diagonal() {
        let base = Endomap::identity(1);
        let g = MatrixGen::constant(diag(&[2.0, 0.5])).unwrap();
        let o = oseledets_filtration(&g, &base, &0, 200, DEFAULT_GAP_TOL).unwrap();
        assert_eq!(o.p, 2);
        let slow = &o.blocks[1].basis[0];
        assert!(slow[0].abs() < 1e-12 && (slow[1].abs() - 1.0).abs() < 1e-12);
        assert!((o.blocks[1].directional + 2f64.ln()).abs() < 1e-9);
        assert!((o.blocks[0].directional - 2f64.ln()).abs() < 1e-4);
        assert!(o.verdict, "{o:?}");
        let id = MatrixGen::constant(DMatrix::identity(2, 2)).unwrap();
        let o = oseledets_filtration(&id, &base, &0, 50, DEFAULT_GAP_TOL).unwrap();
        assert_eq!(o.p, 1);
        assert_eq!(o.blocks[0].basis.len(), 2);
        let (base, g) = swap_base();
        assert_eq!(oseledets_filtration(&g, &base, &0, 100, DEFAULT_GAP_TOL).unwrap().p, 1);
    }

    #[test]
    fn oseledets_skewed_periodic() {
        let base = Endomap::new(vec![1, 0]).unwrap();
        let g = MatrixGen::table(vec![
            DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 0.7]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.4, 1.5]),
        ])
        .unwrap();
        let o = oseledets_filtration(&g, &base, &0, 400, DEFAULT_GAP_TOL).unwrap();
        assert_eq!(o.p, 2);
        assert!(o.verdict, "{o:?}");
        let last = o.blocks[1].angles.last().unwrap().1;
        assert!(last < 1e-8);
    }

    #[test]
    fn backward_frames_converge_to_svd() {
        let mats: Vec<DMatrix<f64>> = (0..40)
            .map(|i| DMatrix::from_row_slice(2, 2, &[2.0 + (i % 3) as f64 * 0.1, 0.5, 0.3, 0.6]))
            .collect();
        let (frames, _) = backward_frames(&mats, 0).unwrap();
        let mut phi = DMatrix::identity(2, 2);
        for m in &mats {
            phi = m * phi;
        }
        let svd = phi.svd(false, true);
        let vt = svd.v_t.unwrap();
        let imin = if svd.singular_values[0] < svd.singular_values[1] { 0 } else { 1 };
        let slow = vt.row(imin).transpose();
        let ours = frames[0].column(1).into_owned();
        assert!((slow.dot(&ours).abs() - 1.0).abs() < 1e-10, "{slow} {ours} {:?}", svd.singular_values);
    }

    #[test]
    fn generator_validation() {
        assert!(matches!(MatrixGen::constant(diag(&[1.0, 0.0])), Err(Error::Singular { .. })));
        assert!(matches!(
            MatrixGen::new(2, GenKind::Table(vec![diag(&[4.0, 1.0])]), Some(1.0)),
            Err(Error::NormBound { .. })
        ));
        let spec: GenSpec = serde_json::from_str(r#"{"d":2,"kind":"table","matrices":[[[2,0],[0,1]],[[1,0],[0,2]]]}"#).unwrap();
        let g = spec.build().unwrap();
        assert!((g.bound() - 2f64.ln()).abs() < 1e-12);
        let spec: GenSpec = serde_json::from_str(r#"{"d":2,"kind":"rotation_angle","angle_scale":3.0}"#).unwrap();
        assert_eq!(spec.build().unwrap().bound(), 0.0);
    }

    #[test]
    fn spectrum_csv() {
        let (base, g) = swap_base();
        let s = monodromy_oracle(&g, &base, &[0, 1]).unwrap();
        let csv = s.to_csv();
        assert!(csv.starts_with("k,exponent,multiplicity,n,error_estimate\n1,"));
        assert_eq!(csv.lines().count(), 3);
    }
}
