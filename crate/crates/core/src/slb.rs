//! Stable lower bounds.
//!
//! A function `h` has a stable lower bound with parameters `(ξ, ℓ, k)` on a
//! sample of size `m` when, with probability at least `1 - 2e^{-k}`, the
//! mean of `h²` over any `m - ℓ` of the `m` points stays above
//! `(1 - ξ) E h²`. The adversarial choice of the discarded points is always
//! the `ℓ` largest `|h(X_i)|`, which is what [`trimmed_sq_mean`] computes.
//!
//! The parameter formulas carry unspecified absolute constants; they are
//! exposed through [`SlbConstants`] and default to one.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{Estimate, ScalarLaw};
use crate::error::{Error, Result};
use crate::quadrature::integrate;
use crate::rng::{par_trials, Seed};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlbConstants {
    pub c0: f64,
    pub c1: f64,
}

impl Default for SlbConstants {
    fn default() -> Self {
        Self { c0: 1.0, c1: 1.0 }
    }
}

impl SlbConstants {
    fn validate(&self) -> Result<()> {
        if self.c0 > 0.0 && self.c1 > 0.0 && self.c0.is_finite() && self.c1.is_finite() {
            Ok(())
        } else {
            Err(Error::Parameter(format!("constants must be positive, got {self:?}")))
        }
    }
}

/// `(ξ, ℓ, k)` for a sample of size `m`. `ell_raw` is the value before
/// flooring and clamping to `[0, m]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlbParams {
    pub m: usize,
    pub xi: f64,
    pub ell: usize,
    pub ell_raw: f64,
    pub k: f64,
    pub constants: SlbConstants,
}

impl SlbParams {
    fn assemble(m: usize, xi: f64, ell_raw: f64, k: f64, constants: SlbConstants) -> Self {
        // guard the floor against representation error (0.1·1000 etc.)
        let ell = (ell_raw * (1.0 + 8.0 * f64::EPSILON)).floor().clamp(0.0, m as f64) as usize;
        if ell == 0 {
            log::warn!("trim budget ell = 0 (m = {m}, xi = {xi}): the stable lower bound is vacuous");
        }
        Self {
            m,
            xi,
            ell,
            ell_raw,
            k,
            constants,
        }
    }
}

/// `κ(ξ) = coef · ξ^{-exponent}`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaFn {
    pub coef: f64,
    #[serde(default)]
    pub exponent: f64,
}

impl KappaFn {
    pub fn eval(&self, xi: f64) -> f64 {
        self.coef * xi.powf(-self.exponent)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum Regime {
    /// `|h| <= bound` almost surely
    Bounded { bound: f64 },
    /// `‖h‖_p = norm_lp`
    Lp { p: f64, norm_lp: f64 },
    /// `‖h‖_q <= l · ‖h‖_2`
    NormEquiv { q: f64, l: f64 },
    /// tail cutoff `M(h, ξ) <= κ(ξ) ‖h‖_2`
    UniformIntegrable { kappa: KappaFn },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentProfile {
    #[serde(flatten)]
    pub regime: Regime,
    pub l2_norm: f64,
}

impl MomentProfile {
    pub fn validate(&self) -> Result<()> {
        let l2 = self.l2_norm;
        if !(l2 > 0.0 && l2.is_finite()) {
            return Err(Error::Parameter(format!("l2_norm = {l2} must be positive")));
        }
        match self.regime {
            Regime::Bounded { bound } if bound < l2 => {
                Err(Error::Consistency(format!("bound {bound} is below the L2 norm {l2}")))
            }
            Regime::Lp { p, .. } if p <= 2.0 || p.is_nan() => Err(Error::Range(format!("p = {p} must exceed 2"))),
            Regime::Lp { norm_lp, .. } if norm_lp < l2 => Err(Error::Consistency(format!(
                "L_p norm {norm_lp} is below the L2 norm {l2}"
            ))),
            Regime::NormEquiv { q, .. } if q <= 2.0 || q.is_nan() => {
                Err(Error::Range(format!("q = {q} must exceed 2")))
            }
            Regime::NormEquiv { l, .. } if l < 1.0 || l.is_nan() => {
                Err(Error::Range(format!("L = {l} must be at least 1")))
            }
            Regime::UniformIntegrable { kappa } if kappa.coef <= 0.0 => {
                Err(Error::Parameter("kappa coefficient must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

fn check_xi(xi: f64) -> Result<()> {
    if xi > 0.0 && xi < 1.0 {
        Ok(())
    } else {
        Err(Error::Range(format!("xi = {xi} must lie in (0, 1)")))
    }
}

fn check_m(m: usize) -> Result<()> {
    if m == 0 {
        Err(Error::Range("sample size m must be positive".into()))
    } else {
        Ok(())
    }
}

/// `min_{|J| <= ell} (1/m) Σ_{i ∉ J} v_i²`: drop the `ell` largest squares.
pub fn trimmed_sq_mean(v: &[f64], ell: usize) -> Result<f64> {
    let m = v.len();
    if m == 0 {
        return Err(Error::Range("empty vector".into()));
    }
    if ell > m {
        return Err(Error::Range(format!("ell = {ell} exceeds m = {m}")));
    }
    let mut sq: Vec<f64> = v.iter().map(|x| x * x).collect();
    sq.sort_unstable_by(f64::total_cmp);
    Ok(sq[..m - ell].iter().sum::<f64>() / m as f64)
}

/// Empirical tail cutoff: the smallest order statistic `t` of `|values|`
/// with `Σ_{|v| > t} v² <= (ξ/2) Σ v²`.
pub fn tail_cutoff(values: &[f64], xi: f64) -> Result<f64> {
    check_cutoff_xi(xi)?;
    if values.is_empty() {
        return Err(Error::Degenerate("empty sample".into()));
    }
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    abs.sort_unstable_by(f64::total_cmp);
    let total: f64 = abs.iter().map(|a| a * a).sum();
    if total == 0.0 {
        return Err(Error::Degenerate("E h² = 0 for an all-zero sample".into()));
    }
    let budget = 0.5 * xi * total;
    // suffix sums of squares, accumulated from the largest value down
    let n = abs.len();
    let mut tail_above = 0.0;
    let mut cutoff = abs[n - 1];
    let mut i = n;
    while i > 0 {
        // group of ties ending at i-1
        let t = abs[i - 1];
        let mut j = i;
        while j > 0 && abs[j - 1] == t {
            j -= 1;
        }
        // tail strictly above t is `tail_above`
        if tail_above <= budget {
            cutoff = t;
        } else {
            break;
        }
        tail_above += abs[j..i].iter().map(|a| a * a).sum::<f64>();
        i = j;
    }
    Ok(cutoff)
}

fn check_cutoff_xi(xi: f64) -> Result<()> {
    // the definition is meaningful for any ξ in (0, 2)
    if xi > 0.0 && xi < 2.0 {
        Ok(())
    } else {
        Err(Error::Range(format!("xi = {xi} must lie in (0, 2)")))
    }
}

/// `E X² 1{|X| > t}` for a scalar law.
pub fn second_moment_tail(law: &ScalarLaw, t: f64) -> Result<f64> {
    law.validate()?;
    let m2 = law.second_moment().ok_or_else(|| Error::Moment {
        law: law.name(),
        order: 2.0,
    })?;
    if t < 0.0 {
        return Ok(m2);
    }
    let support = law.support_bound();
    if law.density(0.0).is_none() {
        // atoms at ±scale
        return Ok(if t < support { m2 } else { 0.0 });
    }
    if t >= support {
        return Ok(0.0);
    }
    // E X² - 2 ∫_0^t x² p(x) dx; Pareto support starts at the scale
    let dens = |x: f64| x * x * law.density(x).unwrap_or(0.0);
    let lower = match law.kind {
        crate::distributions::LawKind::ParetoSym { .. } => law.scale(),
        _ => 0.0,
    };
    let inner = if t <= lower {
        0.0
    } else {
        2.0 * integrate(dens, lower, t, 1e-12 * m2)
    };
    Ok((m2 - inner).max(0.0))
}

/// Analytic tail cutoff `M(X, ξ) = inf{t : E X² 1{|X| > t} <= (ξ/2) E X²}`,
/// solved by bisection on the quadrature tail.
pub fn tail_cutoff_law(law: &ScalarLaw, xi: f64) -> Result<f64> {
    check_cutoff_xi(xi)?;
    law.validate()?;
    let m2 = law.second_moment().ok_or_else(|| Error::Moment {
        law: law.name(),
        order: 2.0,
    })?;
    if law.density(0.0).is_none() {
        return Ok(law.support_bound());
    }
    let budget = 0.5 * xi * m2;
    let ok = |t: f64| -> Result<bool> { Ok(second_moment_tail(law, t)? <= budget) };
    let mut hi = 1.0;
    while !ok(hi)? {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::Contract("tail cutoff did not bracket".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        if hi - lo <= 1e-12 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if ok(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// `ℓ = c0 m ξ E h²/M²`, `k = c1 m ξ² E h²/M²` for `|h| <= M`.
pub fn slb_params_bounded(
    m: usize,
    xi: f64,
    second_moment: f64,
    bound: f64,
    constants: SlbConstants,
) -> Result<SlbParams> {
    check_m(m)?;
    check_xi(xi)?;
    constants.validate()?;
    if !(second_moment > 0.0 && bound > 0.0) {
        return Err(Error::Parameter("second moment and bound must be positive".into()));
    }
    if bound * bound < second_moment {
        return Err(Error::Consistency(format!(
            "M² = {} is below E h² = {second_moment}",
            bound * bound
        )));
    }
    let ratio = second_moment / (bound * bound);
    let mf = m as f64;
    Ok(SlbParams::assemble(
        m,
        xi,
        constants.c0 * mf * xi * ratio,
        constants.c1 * mf * xi * xi * ratio,
        constants,
    ))
}

/// `h ∈ L_p`: `ℓ = c0 m (ξ‖h‖₂²/‖h‖_p²)^{p/(p-2)}`; `k` takes the same form
/// for `2 < p < 4` and `c1 m ξ² (‖h‖₂²/‖h‖_p²)^{p/(p-2)}` for `p >= 4`.
pub fn slb_params_lp(m: usize, xi: f64, p: f64, l2: f64, lp: f64, constants: SlbConstants) -> Result<SlbParams> {
    check_m(m)?;
    check_xi(xi)?;
    constants.validate()?;
    if p <= 2.0 || p.is_nan() {
        return Err(Error::Range(format!("p = {p} must exceed 2")));
    }
    if !(l2 > 0.0) || lp < l2 {
        return Err(Error::Consistency(format!("need ‖h‖_p = {lp} >= ‖h‖_2 = {l2} > 0")));
    }
    let exponent = p / (p - 2.0);
    let ratio = (l2 * l2) / (lp * lp);
    let mf = m as f64;
    let base = (xi * ratio).powf(exponent);
    let ell_raw = constants.c0 * mf * base;
    let k = if p < 4.0 {
        constants.c1 * mf * base
    } else {
        constants.c1 * mf * xi * xi * ratio.powf(exponent)
    };
    Ok(SlbParams::assemble(m, xi, ell_raw, k, constants))
}

/// `‖h‖_q <= L‖h‖₂`: `ℓ = c0 m (ξ/L²)^{q/(q-2)}`; `k = c1 m (ξ/L²)^{q/(q-2)}`
/// for `q < 4` and `c1 m (ξ/L²)²` for `q >= 4`.
pub fn slb_params_norm_equiv(m: usize, xi: f64, q: f64, l: f64, constants: SlbConstants) -> Result<SlbParams> {
    check_m(m)?;
    check_xi(xi)?;
    constants.validate()?;
    if q <= 2.0 || q.is_nan() {
        return Err(Error::Range(format!("q = {q} must exceed 2")));
    }
    if l < 1.0 || l.is_nan() {
        return Err(Error::Range(format!("L = {l} must be at least 1")));
    }
    let base = xi / (l * l);
    let mf = m as f64;
    let ell_raw = constants.c0 * mf * base.powf(q / (q - 2.0));
    let k = if q < 4.0 {
        constants.c1 * mf * base.powf(q / (q - 2.0))
    } else {
        constants.c1 * mf * base * base
    };
    Ok(SlbParams::assemble(m, xi, ell_raw, k, constants))
}

/// Uniform integrability: the bounded formulas at `M = κ(ξ)‖h‖₂`.
pub fn slb_params_uniform_integrable(m: usize, xi: f64, kappa: KappaFn, constants: SlbConstants) -> Result<SlbParams> {
    let k = kappa.eval(xi);
    if !(k >= 1.0 && k.is_finite()) {
        return Err(Error::Consistency(format!("κ(ξ) = {k} must be at least 1")));
    }
    slb_params_bounded(m, xi, 1.0, k, constants)
}

/// Dispatches on the moment profile's regime.
pub fn slb_params(profile: &MomentProfile, m: usize, xi: f64, constants: SlbConstants) -> Result<SlbParams> {
    profile.validate()?;
    let l2 = profile.l2_norm;
    match profile.regime {
        Regime::Bounded { bound } => slb_params_bounded(m, xi, l2 * l2, bound, constants),
        Regime::Lp { p, norm_lp } => slb_params_lp(m, xi, p, l2, norm_lp, constants),
        Regime::NormEquiv { q, l } => slb_params_norm_equiv(m, xi, q, l, constants),
        Regime::UniformIntegrable { kappa } => slb_params_uniform_integrable(m, xi, kappa, constants),
    }
}

/// `h = scale · X` with `X` drawn from `law`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledLaw {
    pub law: ScalarLaw,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl ScaledLaw {
    pub fn new(law: ScalarLaw, scale: f64) -> Self {
        Self { law, scale }
    }

    pub fn second_moment(&self) -> Result<f64> {
        self.law
            .second_moment()
            .map(|m2| m2 * self.scale * self.scale)
            .ok_or_else(|| Error::Moment {
                law: self.law.name(),
                order: 2.0,
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureEstimate {
    pub failures: usize,
    pub trials: usize,
    pub rate: f64,
    pub stderr: f64,
}

/// Fraction of trials in which `trimmed_sq_mean(sample, ell) < (1-ξ) E h²`.
pub fn estimate_slb_failure(
    sampler: &ScaledLaw,
    m: usize,
    xi: f64,
    ell: usize,
    trials: usize,
    seed: Seed,
) -> Result<FailureEstimate> {
    check_m(m)?;
    check_xi(xi)?;
    sampler.law.validate()?;
    if ell > m {
        return Err(Error::Range(format!("ell = {ell} exceeds m = {m}")));
    }
    if trials == 0 {
        return Err(Error::Parameter("trials must be positive".into()));
    }
    let threshold = (1.0 - xi) * sampler.second_moment()?;
    let fails: Vec<bool> = trimmed_mean_trials(sampler, m, ell, trials, seed)?
        .into_iter()
        .map(|t| t < threshold)
        .collect();
    let failures = fails.iter().filter(|f| **f).count();
    let rate = failures as f64 / trials as f64;
    Ok(FailureEstimate {
        failures,
        trials,
        rate,
        stderr: (rate * (1.0 - rate) / trials as f64).sqrt(),
    })
}

/// Trimmed second moments of `trials` independent samples of size `m`;
/// trial `t` uses stream `seed.derive(t)`.
pub fn trimmed_mean_trials(sampler: &ScaledLaw, m: usize, ell: usize, trials: usize, seed: Seed) -> Result<Vec<f64>> {
    check_m(m)?;
    sampler.law.validate()?;
    if ell > m {
        return Err(Error::Range(format!("ell = {ell} exceeds m = {m}")));
    }
    Ok(par_trials(seed, trials, |_, rng| {
        let mut v = vec![0.0; m];
        sampler.law.fill(rng, &mut v);
        for x in &mut v {
            *x *= sampler.scale;
        }
        trimmed_sq_mean(&v, ell).expect("validated sizes")
    }))
}

/// `K_p(x) = Σ_{i <= ⌊p⌋} x*_i + √p (Σ_{i > ⌊p⌋} (x*_i)²)^{1/2}` with `x*`
/// the nonincreasing rearrangement of `|x|`.
pub fn bernoulli_moment_functional(x: &[f64], p: f64) -> Result<f64> {
    check_p(p)?;
    let mut a: Vec<f64> = x.iter().map(|v| v.abs()).collect();
    a.sort_unstable_by(|u, v| v.total_cmp(u));
    let cut = (p.floor() as usize).min(a.len());
    let head: f64 = a[..cut].iter().sum();
    let tail: f64 = a[cut..].iter().map(|v| v * v).sum();
    Ok(head + p.sqrt() * tail.sqrt())
}

fn check_p(p: f64) -> Result<()> {
    if p >= 2.0 && p.is_finite() {
        Ok(())
    } else {
        Err(Error::Range(format!("p = {p} must be at least 2")))
    }
}

const SIGN_CHUNK: usize = 1024;

/// `(E|Σ εᵢ xᵢ|^p)^{1/p}` for each `p`, estimated from `trials` common sign
/// vectors. Standard errors by the delta method.
pub fn mc_bernoulli_moments(x: &[f64], ps: &[f64], trials: usize, seed: Seed) -> Result<Vec<Estimate>> {
    for &p in ps {
        check_p(p)?;
    }
    if trials == 0 {
        return Err(Error::Parameter("trials must be positive".into()));
    }
    let chunks = trials.div_ceil(SIGN_CHUNK);
    // per chunk: Σ|S|^p and Σ|S|^{2p} for each p
    let partial: Vec<Vec<(f64, f64)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let count = SIGN_CHUNK.min(trials - c * SIGN_CHUNK);
            let mut rng = seed.stream(c as u64);
            let mut acc = vec![(0.0, 0.0); ps.len()];
            for _ in 0..count {
                let s = signed_sum(x, &mut rng);
                let a = s.abs();
                for (slot, &p) in acc.iter_mut().zip(ps) {
                    let v = a.powf(p);
                    slot.0 += v;
                    slot.1 += v * v;
                }
            }
            acc
        })
        .collect();
    let n = trials as f64;
    Ok((0..ps.len())
        .map(|j| {
            let (s1, s2) = partial.iter().fold((0.0, 0.0), |(a, b), c| (a + c[j].0, b + c[j].1));
            let mean = s1 / n;
            let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
            let p = ps[j];
            let value = mean.powf(1.0 / p);
            let stderr = if mean > 0.0 {
                value / (p * mean) * (var / n).sqrt()
            } else {
                0.0
            };
            Estimate { value, stderr }
        })
        .collect())
}

/// Single-`p` form of [`mc_bernoulli_moments`].
pub fn mc_bernoulli_moment(x: &[f64], p: f64, trials: usize, seed: Seed) -> Result<Estimate> {
    Ok(mc_bernoulli_moments(x, &[p], trials, seed)?[0])
}

#[inline]
fn signed_sum<R: Rng + ?Sized>(x: &[f64], rng: &mut R) -> f64 {
    let mut s = 0.0;
    for block in x.chunks(64) {
        let bits: u64 = rng.random();
        for (i, v) in block.iter().enumerate() {
            if (bits >> i) & 1 == 1 {
                s += v;
            } else {
                s -= v;
            }
        }
    }
    s
}

/// Largest length accepted by [`exact_bernoulli_moments`].
pub const MAX_EXACT_LEN: usize = 26;

/// Exact `(E|Σ εᵢ xᵢ|^p)^{1/p}` by enumerating all sign patterns (the last
/// sign is fixed by symmetry, leaving `2^{m-1}` patterns in Gray-code order).
pub fn exact_bernoulli_moments(x: &[f64], ps: &[f64]) -> Result<Vec<f64>> {
    for &p in ps {
        check_p(p)?;
    }
    let m = x.len();
    if m > MAX_EXACT_LEN {
        return Err(Error::Range(format!(
            "exact enumeration limited to m <= {MAX_EXACT_LEN}"
        )));
    }
    if m == 0 {
        return Ok(vec![0.0; ps.len()]);
    }
    let free = m - 1;
    let patterns = 1usize << free;
    let mut signs = vec![1.0f64; free];
    let mut s: f64 = x.iter().sum();
    let mut acc = vec![0.0; ps.len()];
    let add = |s: f64, acc: &mut Vec<f64>| {
        let a = s.abs();
        for (slot, &p) in acc.iter_mut().zip(ps) {
            *slot += a.powf(p);
        }
    };
    add(s, &mut acc);
    for k in 1..patterns {
        let j = k.trailing_zeros() as usize;
        s -= 2.0 * signs[j] * x[j];
        signs[j] = -signs[j];
        add(s, &mut acc);
    }
    Ok(acc
        .into_iter()
        .zip(ps)
        .map(|(a, &p)| (a / patterns as f64).powf(1.0 / p))
        .collect())
}
