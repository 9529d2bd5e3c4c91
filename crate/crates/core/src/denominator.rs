//! Expansion of factored denominators into monic coefficient form, and the root oracle.
//!
//! A denominator `Q(z⁻¹) = 1 + Σ_{i=1..r} q_i z⁻ⁱ` has its poles at the roots of
//! `zʳ + q_1 zʳ⁻¹ + … + q_r`, which are the eigenvalues of the companion matrix
//!
//! ```text
//! [ -q_1  -q_2  …  -q_r ]
//! [   1     0   …    0  ]
//! [   0     1   …    0  ]
//! [   …               … ]
//! ```

use nalgebra::DMatrix;
use num_complex::Complex64;
use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{Float, One, Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};
use crate::modulation::ModulatedPoles;
use crate::pole_bank::Factor;

/// Largest denominator order accepted by the operator.
pub const MAX_ORDER: usize = 16;

const MAX_POLISH: usize = 100;

/// Multiplies monic first/second-order factors (`[1, c1]` or `[1, c1, c2]`) in the
/// order given.
pub fn expand_factors<F: AsRef<[f64]>>(factors: &[F]) -> Result<Vec<f64>> {
    if factors.is_empty() {
        return Err(Error::EmptyFactorList);
    }
    let mut out = vec![1.0];
    for f in factors {
        let f = f.as_ref();
        if !(f.len() == 2 || f.len() == 3) || f[0] != 1.0 {
            return Err(Error::ShapeMismatch(format!(
                "factor must be [1, c1] or [1, c1, c2], got {f:?}"
            )));
        }
        out = convolve(&out, f);
    }
    Ok(out)
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Expands pole factors in ascending order of root modulus. Returns `[1, q_1, …, q_r]`.
pub fn expand_poles(factors: &[Factor]) -> Result<Vec<f64>> {
    if factors.is_empty() {
        return Err(Error::EmptyFactorList);
    }
    let mut sorted = factors.to_vec();
    let mut buf = [0.0; MAX_ORDER + 1];
    let r = expand_sorted_into(&mut sorted, &mut buf);
    Ok(buf[..=r].to_vec())
}

/// Allocation-free expansion used on the per-token path. Sorts `factors` by modulus,
/// writes `[1, q_1, …, q_r]` into `out` and returns `r`.
pub(crate) fn expand_sorted_into(factors: &mut [Factor], out: &mut [f64; MAX_ORDER + 1]) -> usize {
    factors.sort_by(|x, y| x.modulus().total_cmp(&y.modulus()));
    out[0] = 1.0;
    let mut deg = 0;
    for f in factors.iter() {
        match *f {
            Factor::Real { a } => {
                let c1 = -a;
                out[deg + 1] = 0.0;
                for i in (1..=deg + 1).rev() {
                    out[i] += c1 * out[i - 1];
                }
                deg += 1;
            }
            Factor::Complex { rho, theta } => {
                let c1 = -2.0 * rho * theta.cos();
                let c2 = rho * rho;
                out[deg + 1] = 0.0;
                out[deg + 2] = 0.0;
                for i in (1..=deg + 2).rev() {
                    let mut v = out[i] + c1 * out[i - 1];
                    if i >= 2 {
                        v += c2 * out[i - 2];
                    }
                    out[i] = v;
                }
                deg += 2;
            }
        }
    }
    deg
}

/// Expanded token-conditioned denominators, `[B, M, G, r]` (the leading 1 is implicit).
#[derive(Debug, Clone, PartialEq)]
pub struct DenominatorCoeffs {
    pub batch: usize,
    pub len: usize,
    pub groups: usize,
    pub order: usize,
    pub q: Vec<f64>,
}

impl DenominatorCoeffs {
    pub fn at(&self, b: usize, t: usize, g: usize) -> &[f64] {
        let start = ((b * self.len + t) * self.groups + g) * self.order;
        &self.q[start..start + self.order]
    }
}

pub fn expand_token_denominators(poles: &ModulatedPoles) -> DenominatorCoeffs {
    let (b, m, g) = (poles.batch, poles.len, poles.groups);
    let order = poles.order();
    let mut q = Vec::with_capacity(b * m * g * order);
    let mut buf = [0.0; MAX_ORDER + 1];
    for bi in 0..b {
        for t in 0..m {
            for gi in 0..g {
                let mut factors = poles.factors(bi, t, gi);
                let r = expand_sorted_into(&mut factors, &mut buf);
                debug_assert_eq!(r, order);
                q.extend_from_slice(&buf[1..=r]);
            }
        }
    }
    DenominatorCoeffs {
        batch: b,
        len: m,
        groups: g,
        order,
        q,
    }
}

/// Evaluates `zʳ + q_1 zʳ⁻¹ + … + q_r` for `coeffs = [1, q_1, …, q_r]`.
pub fn eval_monic(coeffs: &[f64], z: Complex64) -> Complex64 {
    coeffs
        .iter()
        .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z + c)
}

/// Residual bound accepted for every returned root.
pub fn residual_tolerance(coeffs: &[f64]) -> f64 {
    1e-8 * coeffs.iter().map(|c| c.abs()).sum::<f64>()
}

/// Companion matrix of a monic coefficient array `[1, q_1, …, q_r]`.
pub fn companion(coeffs: &[f64]) -> DMatrix<f64> {
    let r = coeffs.len() - 1;
    let mut m = DMatrix::zeros(r, r);
    for j in 0..r {
        m[(0, j)] = -coeffs[j + 1];
    }
    for i in 1..r {
        m[(i, i - 1)] = 1.0;
    }
    m
}

fn check_monic(coeffs: &[f64]) -> Result<()> {
    if coeffs.len() < 2 {
        return Err(Error::Config("root finding needs degree >= 1".into()));
    }
    if coeffs[0] != 1.0 {
        return Err(Error::Config("coefficient array must be monic".into()));
    }
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::RootFindingDiverged {
            degree: coeffs.len() - 1,
        });
    }
    Ok(())
}

/// All `r` poles of the monic denominator `coeffs = [1, q_1, …, q_r]`.
///
/// Eigenvalues of the companion matrix are computed by Schur (QR) iteration, with a
/// Durand–Kerner fallback, then Newton-polished with a double-double residual. Clusters
/// that fit the spread an `m`-fold root shows under coefficient rounding are replaced by
/// their centroid, which is far better conditioned than the individual members.
pub fn roots(coeffs: &[f64]) -> Result<Vec<Complex64>> {
    check_monic(coeffs)?;
    let exact: Vec<DoubleDouble> = coeffs.iter().map(|&c| DoubleDouble::from(c)).collect();
    refine_roots(coeffs, &exact, f64::EPSILON)
}

/// Largest pole modulus of a monic denominator.
pub fn max_root_modulus(coeffs: &[f64]) -> Result<f64> {
    Ok(roots(coeffs)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Poles of the product of `factors`. The companion matrix of the f64 expansion supplies
/// the starting points; the roots are then refined against a double-double expansion, so
/// rounding of the f64 coefficients does not displace clustered poles. Roots that f64
/// coefficients cannot tell apart are still reported as one multiple root.
pub fn factor_roots(factors: &[Factor]) -> Result<Vec<Complex64>> {
    let rounded = expand_poles(factors)?;
    check_monic(&rounded)?;
    let exact = expand_poles_dd(factors);
    refine_roots(&rounded, &exact, f64::EPSILON)
}

/// Largest pole modulus of the product of `factors`.
///
/// Roots whose first-order error under double-double evaluation is below `TRUSTED_ERROR`
/// come straight from [`factor_roots`]. Otherwise the estimate is checked by exact
/// Schur–Cohn tests on either side, and replaced by an exact bisection to within
/// `BRACKET` if it fails.
pub fn factor_max_modulus(factors: &[Factor]) -> Result<f64> {
    if factors.is_empty() {
        return Err(Error::EmptyFactorList);
    }
    let dd = expand_poles_dd(factors);
    let estimate = factor_roots(factors).ok().map(|roots| {
        let est = roots.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let doubtful = roots.iter().enumerate().any(|(i, &z)| {
            let sep: f64 = roots.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &w)| (z - w).norm()).product();
            DD_UNIT * eval_scale(&dd, z) > TRUSTED_ERROR * sep
        });
        (est, doubtful)
    });
    if let Some((est, false)) = estimate {
        return Ok(est);
    }
    let poly = exact_poly(factors);
    if let Some((est, true)) = estimate {
        // Short radii keep the scaled coefficients small.
        let grid = 2f64.powi(40);
        let above = ((est + BRACKET) * grid).ceil() / grid;
        let below = ((est - BRACKET) * grid).floor() / grid;
        if roots_inside(&poly, above) && (below <= 0.0 || !roots_inside(&poly, below)) {
            return Ok(est);
        }
    }
    // Cauchy bound on the root moduli.
    let lead = BigRational::from_integer(poly[0].clone());
    let cauchy = poly.iter().skip(1).map(|c| c.abs()).max().unwrap_or_default();
    let mut hi = 1.0 + (BigRational::from_integer(cauchy) / lead.abs()).to_f64().unwrap_or(f64::MAX);
    let mut lo = 0.0;
    while hi - lo > BRACKET {
        let mid = 0.5 * (lo + hi);
        if roots_inside(&poly, mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Relative rounding of double-double evaluation, with headroom.
const DD_UNIT: f64 = 1e-30;
/// Predicted root error above which `factor_max_modulus` confirms its estimate exactly.
pub const TRUSTED_ERROR: f64 = 1e-13;

/// Width of the bracket `factor_max_modulus` guarantees.
pub const BRACKET: f64 = 1e-11;

/// `(m, e)` with `v = m · 2ᵉ` exactly.
fn dyadic(v: f64) -> (BigInt, i64) {
    let (mantissa, exp, sign) = v.integer_decode();
    (BigInt::from(sign) * BigInt::from(mantissa), i64::from(exp))
}

/// Integer coefficients sharing one power-of-two scale.
fn on_common_scale(terms: Vec<(BigInt, i64)>) -> Vec<BigInt> {
    let lo = terms.iter().map(|t| t.1).min().unwrap_or(0);
    terms.into_iter().map(|(m, e)| m << (e - lo) as usize).collect()
}

/// The product of `factors` as an integer multiple of its exact monic expansion, highest
/// power first. Each factor is read as the polynomial its f64 fields define, with `cos θ`
/// taken at its f64 value.
fn exact_poly(factors: &[Factor]) -> Vec<BigInt> {
    let mut out = vec![BigInt::one()];
    for f in factors {
        let one = (BigInt::one(), 0);
        let fc = match *f {
            Factor::Real { a } => {
                let (m, e) = dyadic(a);
                on_common_scale(vec![one, (-m, e)])
            }
            Factor::Complex { rho, theta } => {
                let (mr, er) = dyadic(rho);
                let (mc, ec) = dyadic(theta.cos());
                on_common_scale(vec![one, (-(&mr * mc) << 1usize, er + ec), (&mr * &mr, 2 * er)])
            }
        };
        let mut next = vec![BigInt::zero(); out.len() + fc.len() - 1];
        for (i, x) in out.iter().enumerate() {
            for (j, y) in fc.iter().enumerate() {
                next[i + j] += x * y;
            }
        }
        out = next;
    }
    out
}

/// Whether every root of `poly` (highest power first) has modulus strictly below
/// `radius`, decided by the Schur–Cohn recursion in exact integer arithmetic.
fn roots_inside(poly: &[BigInt], radius: f64) -> bool {
    if !(radius > 0.0 && radius.is_finite()) {
        return false;
    }
    let n = poly.len() - 1;
    // Coefficients of p(R w), up to a power-of-two factor.
    let (mr, er) = dyadic(radius);
    let mut pow = BigInt::one();
    let mut terms = vec![(BigInt::zero(), 0); n + 1];
    for i in (0..=n).rev() {
        terms[i] = (&poly[i] * &pow, (n - i) as i64 * er);
        pow *= &mr;
    }
    let mut d = on_common_scale(terms);
    // Rows of the fraction-free table usually share the leading term of the row two
    // steps back as a factor; stripping it keeps the integers from doubling per step.
    let mut prev = BigInt::one();
    while d.len() > 1 {
        let n = d.len() - 1;
        if d[n].abs() >= d[0].abs() {
            return false;
        }
        let mut next: Vec<BigInt> = (0..n).map(|k| &d[0] * &d[k] - &d[n] * &d[n - k]).collect();
        let split: Vec<(BigInt, BigInt)> = next.iter().map(|v| v.div_rem(&prev)).collect();
        if split.iter().all(|(_, r)| r.is_zero()) {
            next = split.into_iter().map(|(q, _)| q).collect();
        }
        prev = d[0].clone();
        d = next;
    }
    true
}

type Solver = fn(&[f64]) -> Option<Vec<Complex64>>;

fn refine_roots(rounded: &[f64], exact: &[DoubleDouble], unit: f64) -> Result<Vec<Complex64>> {
    let degree = rounded.len() - 1;
    let tol = residual_tolerance(rounded);
    let solvers: [Solver; 2] = [schur_roots, durand_kerner];
    for raw in solvers.iter().filter_map(|solve| solve(rounded)) {
        let refined = merge_clusters(exact, unit, polish(exact, raw));
        if refined.iter().all(|&z| eval_dd(exact, z).0.norm() <= tol) {
            return Ok(refined);
        }
    }
    Err(Error::RootFindingDiverged { degree })
}

fn schur_roots(coeffs: &[f64]) -> Option<Vec<Complex64>> {
    let degree = coeffs.len() - 1;
    if degree == 1 {
        return Some(vec![Complex64::new(-coeffs[1], 0.0)]);
    }
    let schur = nalgebra::linalg::Schur::try_new(companion(coeffs), f64::EPSILON, 10_000)?;
    let ev = schur.complex_eigenvalues();
    let out: Vec<Complex64> = ev.iter().map(|z| Complex64::new(z.re, z.im)).collect();
    out.iter().all(|z| z.is_finite()).then_some(out)
}

fn durand_kerner(coeffs: &[f64]) -> Option<Vec<Complex64>> {
    let degree = coeffs.len() - 1;
    let bound = 1.0 + coeffs[1..].iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let seed = Complex64::new(0.4, 0.9);
    let mut z: Vec<Complex64> = (0..degree)
        .map(|k| seed.powu(k as u32) * (bound / seed.norm().powi(k as i32)).min(1.0))
        .collect();
    for _ in 0..2000 {
        let mut delta = 0.0f64;
        for i in 0..degree {
            let mut denom = Complex64::new(1.0, 0.0);
            for j in 0..degree {
                if i != j {
                    denom *= z[i] - z[j];
                }
            }
            if denom.norm() == 0.0 {
                denom = Complex64::new(f64::EPSILON, 0.0);
            }
            let step = eval_monic(coeffs, z[i]) / denom;
            z[i] -= step;
            delta = delta.max(step.norm());
        }
        if !z.iter().all(|v| v.is_finite()) {
            return None;
        }
        if delta < 1e-15 {
            return Some(z);
        }
    }
    Some(z)
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Unevaluated sum `hi + lo` carrying about 32 significant digits.
#[derive(Debug, Clone, Copy, PartialEq)]
struct DoubleDouble {
    hi: f64,
    lo: f64,
}

impl From<f64> for DoubleDouble {
    fn from(hi: f64) -> Self {
        Self { hi, lo: 0.0 }
    }
}

impl DoubleDouble {
    const ZERO: Self = Self { hi: 0.0, lo: 0.0 };

    fn renorm(hi: f64, lo: f64) -> Self {
        let s = hi + lo;
        Self { hi: s, lo: lo - (s - hi) }
    }

    fn add(self, o: Self) -> Self {
        let (s, e) = two_sum(self.hi, o.hi);
        Self::renorm(s, e + self.lo + o.lo)
    }

    fn sub(self, o: Self) -> Self {
        self.add(Self { hi: -o.hi, lo: -o.lo })
    }

    fn mul(self, o: Self) -> Self {
        let (p, e) = two_prod(self.hi, o.hi);
        Self::renorm(p, e + self.hi * o.lo + self.lo * o.hi)
    }

    fn mul_f(self, b: f64) -> Self {
        let (p, e) = two_prod(self.hi, b);
        Self::renorm(p, e + self.lo * b)
    }

    fn value(self) -> f64 {
        self.hi + self.lo
    }
}

/// `[1, q_1, …, q_r]` of the factor product in double-double. The factor coefficients
/// `-a`, `-2ρ cos θ` and `ρ²` are formed exactly from their f64 inputs.
fn expand_poles_dd(factors: &[Factor]) -> Vec<DoubleDouble> {
    let mut out = vec![DoubleDouble::from(1.0)];
    for f in factors {
        let fc: Vec<DoubleDouble> = match *f {
            Factor::Real { a } => vec![1.0.into(), (-a).into()],
            Factor::Complex { rho, theta } => {
                let (p, e) = two_prod(-2.0 * rho, theta.cos());
                let (q, g) = two_prod(rho, rho);
                vec![1.0.into(), DoubleDouble { hi: p, lo: e }, DoubleDouble { hi: q, lo: g }]
            }
        };
        let mut next = vec![DoubleDouble::ZERO; out.len() + fc.len() - 1];
        for (i, x) in out.iter().enumerate() {
            for (j, y) in fc.iter().enumerate() {
                next[i + j] = next[i + j].add(x.mul(*y));
            }
        }
        out = next;
    }
    out
}

/// `p(z)` and `p'(z)` by Horner's rule carried in double-double.
fn eval_dd(coeffs: &[DoubleDouble], z: Complex64) -> (Complex64, Complex64) {
    let zero = (DoubleDouble::ZERO, DoubleDouble::ZERO);
    let (mut p, mut dp) = (zero, zero);
    let mul = |(re, im): (DoubleDouble, DoubleDouble)| {
        (
            re.mul_f(z.re).sub(im.mul_f(z.im)),
            re.mul_f(z.im).add(im.mul_f(z.re)),
        )
    };
    for &c in coeffs {
        let (dr, di) = mul(dp);
        dp = (dr.add(p.0), di.add(p.1));
        let (pr, pi) = mul(p);
        p = (pr.add(c), pi);
    }
    (
        Complex64::new(p.0.value(), p.1.value()),
        Complex64::new(dp.0.value(), dp.1.value()),
    )
}

/// Aberth–Ehrlich refinement of all roots at once with double-double residuals. The
/// mutual repulsion term keeps iterates from collapsing onto the same root. A root stops
/// moving once its residual reaches the evaluation noise or its step drops to an ulp.
fn polish(coeffs: &[DoubleDouble], mut z: Vec<Complex64>) -> Vec<Complex64> {
    let n = z.len();
    let noise = 8.0 * (n + 1) as f64 * f64::EPSILON * f64::EPSILON;
    let mut frozen = vec![false; n];
    for _ in 0..MAX_POLISH {
        for i in 0..n {
            if frozen[i] {
                continue;
            }
            let (p, dp) = eval_dd(coeffs, z[i]);
            if p.norm() <= noise * eval_scale(coeffs, z[i]) || dp.norm() == 0.0 {
                frozen[i] = true;
                continue;
            }
            let w = p / dp;
            let repel: Complex64 = (0..n)
                .filter(|&j| j != i && z[j] != z[i])
                .map(|j| (z[i] - z[j]).inv())
                .sum();
            let step = w / (Complex64::new(1.0, 0.0) - w * repel);
            if !step.is_finite() {
                frozen[i] = true;
                continue;
            }
            z[i] -= step;
            frozen[i] = step.norm() <= 2.0 * f64::EPSILON * z[i].norm();
        }
        if frozen.iter().all(|&f| f) {
            break;
        }
    }
    z
}

fn eval_scale(coeffs: &[DoubleDouble], z: Complex64) -> f64 {
    coeffs.iter().fold(0.0, |acc, c| acc * z.norm() + c.value().abs())
}

/// Spread an `m`-fold root at `z` shows when the coefficients carry relative error
/// `unit`: `(unit · Σ|c_i||z|^(r-i) / Π|z - z_j|)^(1/m)` over the roots outside the cluster.
fn cluster_radius(coeffs: &[DoubleDouble], unit: f64, z: Complex64, others: f64, m: usize) -> f64 {
    8.0 * (unit * eval_scale(coeffs, z) / others.max(f64::MIN_POSITIVE)).powf(1.0 / m as f64)
}

/// Taylor coefficients `p⁽ᵏ⁾(z) / k!` for `k = 0..=kmax` by repeated synthetic division,
/// together with the same quantities for `|c_i|` at `|z|` (their rounding scale).
fn taylor(coeffs: &[DoubleDouble], z: Complex64, kmax: usize) -> (Vec<Complex64>, Vec<f64>) {
    let zero = (DoubleDouble::ZERO, DoubleDouble::ZERO);
    let mut work: Vec<(DoubleDouble, DoubleDouble)> = coeffs.iter().map(|&c| (c, DoubleDouble::ZERO)).collect();
    let mut abs: Vec<f64> = coeffs.iter().map(|c| c.value().abs()).collect();
    let az = z.norm();
    let mut t = Vec::with_capacity(kmax + 1);
    let mut s = Vec::with_capacity(kmax + 1);
    let mut n = work.len();
    for _ in 0..=kmax.min(coeffs.len() - 1) {
        let mut acc = zero;
        let mut acc_abs = 0.0;
        for i in 0..n {
            acc = (
                acc.0.mul_f(z.re).sub(acc.1.mul_f(z.im)).add(work[i].0),
                acc.0.mul_f(z.im).add(acc.1.mul_f(z.re)).add(work[i].1),
            );
            acc_abs = acc_abs * az + abs[i];
            work[i] = acc;
            abs[i] = acc_abs;
        }
        t.push(Complex64::new(acc.0.value(), acc.1.value()));
        s.push(acc_abs);
        n -= 1;
    }
    (t, s)
}

/// Centre of an `m`-fold root near `c`: the simple root of `p⁽ᵐ⁻¹⁾` there. `None` unless
/// the lower Taylor coefficients vanish to within coefficient rounding at that centre.
fn multiple_root(coeffs: &[DoubleDouble], unit: f64, mut c: Complex64, m: usize, radius: f64) -> Option<Complex64> {
    let start = c;
    for _ in 0..16 {
        let (t, _) = taylor(coeffs, c, m);
        let d = m as f64 * t[m];
        if d.norm() == 0.0 {
            return None;
        }
        let step = t[m - 1] / d;
        c -= step;
        if step.norm() <= f64::EPSILON * c.norm() {
            break;
        }
    }
    if !c.is_finite() || (c - start).norm() > radius {
        return None;
    }
    let (t, s) = taylor(coeffs, c, m);
    let ulp = f64::EPSILON * c.norm().max(f64::MIN_POSITIVE);
    (0..m)
        .all(|k| t[k].norm() <= 64.0 * (unit * s[k] + ulp * (k + 1) as f64 * t[k + 1].norm()))
        .then_some(c)
}

/// Greedy multiplicity detection: each unassigned root tries the largest group of its
/// nearest unassigned neighbours that fits the `m`-fold rounding radius and passes the
/// Taylor test in [`multiple_root`].
fn merge_clusters(coeffs: &[DoubleDouble], unit: f64, mut roots: Vec<Complex64>) -> Vec<Complex64> {
    let n = roots.len();
    let mut done = vec![false; n];
    for i in 0..n {
        if done[i] {
            continue;
        }
        let mut near: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i && !done[j])
            .map(|j| ((roots[j] - roots[i]).norm(), j))
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for m in (2..=near.len() + 1).rev() {
            let mut members = vec![i];
            members.extend(near[..m - 1].iter().map(|p| p.1));
            let centroid = members.iter().map(|&j| roots[j]).sum::<Complex64>() / m as f64;
            let spread = members
                .iter()
                .map(|&j| (roots[j] - centroid).norm())
                .fold(0.0, f64::max);
            let others = (0..n)
                .filter(|j| !members.contains(j))
                .map(|j| (centroid - roots[j]).norm())
                .product::<f64>();
            let radius = cluster_radius(coeffs, unit, centroid, others, m);
            if spread > radius {
                continue;
            }
            let Some(c) = multiple_root(coeffs, unit, centroid, m, radius) else {
                continue;
            };
            let c = if c.im.abs() <= radius { Complex64::new(c.re, 0.0) } else { c };
            for &j in &members {
                roots[j] = c;
                done[j] = true;
            }
            break;
        }
        done[i] = true;
    }
    roots
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::Rng;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    /// Brute-force product of factors, written without reusing `convolve`.
    fn oracle_product(factors: &[Vec<f64>]) -> Vec<f64> {
        let deg: usize = factors.iter().map(|f| f.len() - 1).sum();
        let mut acc = vec![0.0; deg + 1];
        acc[0] = 1.0;
        let mut cur_deg = 0;
        for f in factors {
            let prev = acc.clone();
            for k in 0..=cur_deg + f.len() - 1 {
                acc[k] = (0..f.len())
                    .filter(|&j| j <= k && k - j <= cur_deg)
                    .map(|j| f[j] * prev[k - j])
                    .sum();
            }
            cur_deg += f.len() - 1;
        }
        acc
    }

    fn sorted(mut v: Vec<Complex64>) -> Vec<Complex64> {
        v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        v
    }

    #[test]
    fn squared_real_factor() {
        assert_eq!(
            expand_factors(&[[1.0, -0.5], [1.0, -0.5]]).unwrap(),
            vec![1.0, -1.0, 0.25]
        );
    }

    #[test]
    fn single_factor_identity() {
        assert_eq!(expand_factors(&[[1.0, 0.0, 0.25]]).unwrap(), vec![1.0, 0.0, 0.25]);
    }

    #[test]
    fn mixed_product_matches_oracle() {
        let factors = vec![vec![1.0, -0.5], vec![1.0, -0.9, 0.81]];
        let want = oracle_product(&factors);
        assert_eq!(want.len(), 4);
        for (w, e) in want.iter().zip([1.0, -1.4, 1.26, -0.405]) {
            assert!((w - e).abs() < 1e-15);
        }
        let got = expand_factors(&factors).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_and_malformed_factors() {
        let empty: [[f64; 2]; 0] = [];
        assert!(matches!(expand_factors(&empty), Err(Error::EmptyFactorList)));
        assert!(expand_factors(&[[2.0, 1.0]]).is_err());
        assert!(expand_factors(&[vec![1.0, 1.0, 1.0, 1.0]]).is_err());
    }

    #[test]
    fn double_root_half() {
        let r = roots(&[1.0, -1.0, 0.25]).unwrap();
        for z in r {
            assert!((z - Complex64::new(0.5, 0.0)).norm() < 1e-12, "{z}");
        }
    }

    #[test]
    fn imaginary_pair() {
        let r = sorted(roots(&[1.0, 0.0, 0.25]).unwrap());
        assert!((r[0] - Complex64::new(0.0, -0.5)).norm() < 1e-12);
        assert!((r[1] - Complex64::new(0.0, 0.5)).norm() < 1e-12);
    }

    #[test]
    fn quadruple_root_on_margin_is_not_inflated() {
        // two pairs clipped at θ = π and clamped to 1-ε: (1 + 0.99 z⁻¹)⁴
        let f = Factor::Complex { rho: 0.99, theta: PI };
        let coeffs = expand_poles(&[f, f]).unwrap();
        let m = max_root_modulus(&coeffs).unwrap();
        assert!(m <= 0.99 + 1e-9, "{m}");
    }

    #[test]
    fn companion_roots_reproduce_pole_multiset() {
        let mut rng = Rng::new(11);
        for _ in 0..200 {
            let factors = vec![
                Factor::Real { a: rng.uniform_range(-0.98, 0.98) },
                Factor::Complex { rho: rng.uniform_range(0.05, 0.98), theta: rng.uniform_range(0.05, 3.1) },
                Factor::Complex { rho: rng.uniform_range(0.05, 0.98), theta: rng.uniform_range(0.05, 3.1) },
            ];
            let coeffs = expand_poles(&factors).unwrap();
            let got = roots(&coeffs).unwrap();
            let want: Vec<Complex64> = factors.iter().flat_map(|f| f.roots()).collect();
            assert_eq!(got.len(), 5);
            let mut used = vec![false; got.len()];
            for w in want {
                let (idx, d) = got
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !used[*i])
                    .map(|(i, z)| (i, (z - w).norm()))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap();
                used[idx] = true;
                assert!(d < 1e-7, "pole {w} off by {d}");
            }
        }
    }

    #[test]
    fn durand_kerner_agrees_with_schur() {
        let coeffs = expand_factors(&[vec![1.0, -0.3], vec![1.0, -0.9, 0.81], vec![1.0, 0.7]]).unwrap();
        let a = schur_roots(&coeffs).unwrap();
        let b = durand_kerner(&coeffs).unwrap();
        assert_eq!(a.len(), b.len());
        for x in &a {
            let d = b.iter().map(|y| (x - y).norm()).fold(f64::INFINITY, f64::min);
            assert!(d < 1e-9, "{x} off by {d}");
        }
    }

    #[test]
    fn residual_bound_holds() {
        let coeffs = [1.0, -1.4, 1.26, -0.405];
        for z in roots(&coeffs).unwrap() {
            assert!(eval_monic(&coeffs, z).norm() <= residual_tolerance(&coeffs));
        }
    }

    #[test]
    fn schur_cohn_is_strict() {
        let simple = exact_poly(&[Factor::Real { a: -0.5 }]);
        assert!(roots_inside(&simple, 0.5 + 1e-12));
        assert!(!roots_inside(&simple, 0.5));
        assert!(!roots_inside(&simple, 0.0));
        let f = Factor::Complex { rho: 0.99, theta: PI };
        let quad = exact_poly(&[f, f]);
        assert!(roots_inside(&quad, 0.99 + 1e-12));
        assert!(!roots_inside(&quad, 0.99));
        let pair = exact_poly(&[Factor::Complex { rho: 0.9, theta: 1.0 }]);
        assert!(roots_inside(&pair, 0.9 + 1e-12) && !roots_inside(&pair, 0.9 - 1e-12));
    }

    #[test]
    fn clusters_at_the_cap() {
        let cases = [
            vec![
                Factor::Real { a: -0.9765438491761208 },
                Factor::Real { a: -0.7184791417965454 },
                Factor::Real { a: 0.9899998331154103 },
                Factor::Complex { rho: 0.99, theta: PI },
                Factor::Complex { rho: 0.99, theta: PI },
                Factor::Complex { rho: 0.9534964698022813, theta: PI },
            ],
            vec![
                Factor::Real { a: -0.9442373369827639 },
                Factor::Real { a: 0.7142876764449199 },
                Factor::Real { a: 0.9899997927929873 },
                Factor::Complex { rho: 0.3487791994391813, theta: 0.0701738183065231 },
                Factor::Complex { rho: 0.99, theta: 0.0010980204051583814 },
                Factor::Complex { rho: 0.99, theta: 0.00032878664272484017 },
            ],
        ];
        for f in &cases {
            let m = factor_max_modulus(f).unwrap();
            assert!((m - 0.99).abs() <= 2.0 * BRACKET, "{m}");
        }
    }

    fn pooled_factor(pick: usize, sign: bool, free: f64) -> Factor {
        let s = if sign { -1.0 } else { 1.0 };
        match pick {
            0 => Factor::Real { a: s * 0.99 },
            1 => Factor::Real { a: s * 0.9899998331154103 },
            2 => Factor::Real { a: s * free },
            3 => Factor::Complex { rho: 0.99, theta: if sign { PI } else { 0.0 } },
            4 => Factor::Complex { rho: 0.99, theta: free * 1e-3 },
            5 => Factor::Complex { rho: free, theta: PI },
            _ => Factor::Complex { rho: free, theta: 3.0 * free },
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn max_modulus_matches_factors(picks in prop::collection::vec((0usize..7, any::<bool>(), 0.05f64..0.99), 1..6)) {
            let factors: Vec<Factor> = picks.iter().map(|&(p, s, v)| pooled_factor(p, s, v)).collect();
            // A pair with |cos θ| ≤ 1 has both roots at modulus ρ.
            let want = factors.iter().map(|f| match *f {
                Factor::Real { a } => a.abs(),
                Factor::Complex { rho, .. } => rho,
            }).fold(0.0, f64::max);
            let got = factor_max_modulus(&factors).unwrap();
            prop_assert!((got - want).abs() <= 1e-9, "{} vs {}", got, want);
        }
    }

    proptest! {
        #[test]
        fn expansion_is_order_invariant(vals in prop::collection::vec((0.0f64..0.99, 0.0f64..3.1, any::<bool>()), 1..6), rot in 0usize..6) {
            let factors: Vec<Factor> = vals.iter().map(|&(r, t, real)| {
                if real { Factor::Real { a: r * t.cos() } } else { Factor::Complex { rho: r, theta: t } }
            }).collect();
            let coeffs: Vec<Vec<f64>> = factors.iter().map(Factor::coeffs).collect();
            let mut rotated = coeffs.clone();
            rotated.rotate_left(rot % coeffs.len());
            rotated.reverse();
            let a = expand_factors(&coeffs).unwrap();
            let b = expand_factors(&rotated).unwrap();
            let c = expand_poles(&factors).unwrap();
            let deg: usize = factors.iter().map(Factor::degree).sum();
            prop_assert_eq!(a.len(), deg + 1);
            let scale = a.iter().map(|v| v.abs()).fold(1.0, f64::max);
            for i in 0..a.len() {
                prop_assert!((a[i] - b[i]).abs() <= 1e-12 * scale);
                prop_assert!((a[i] - c[i]).abs() <= 1e-12 * scale);
            }
        }
    }
}
