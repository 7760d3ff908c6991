//! Least-squares learners: empirical risk minimization, the excess-loss
//! decomposition, Bernstein constants, the multiplier radius and the
//! block tournament.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{mean_se, partition, BlockPartition};
use crate::distributions::{sample_isotropic, sample_regression, Dataset, RegressionModel};
use crate::error::{Error, Result};
use crate::experiments::quantile;
use crate::function::{l2_distance, FunctionHandle};
use crate::matrix::{dot, norm2, symmetric_eigenvalues, Matrix};
use crate::rng::{fill_signs, par_trials, Seed};

/// Known moment bounds of a class, for documentation and parameter choice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassBounds {
    /// `(p, sup_f ‖f‖_p)`
    pub lp: Option<(f64, f64)>,
    pub linf: Option<f64>,
}

#[derive(Clone, Debug)]
pub enum ClassKind {
    Finite(Vec<FunctionHandle>),
    LinearBall { radius: f64, d: usize },
}

#[derive(Clone, Debug)]
pub struct ModelClass {
    pub kind: ClassKind,
    pub bounds: ClassBounds,
}

impl ModelClass {
    pub fn finite(handles: Vec<FunctionHandle>) -> Result<Self> {
        if handles.is_empty() {
            return Err(Error::Input("empty class".into()));
        }
        Ok(Self {
            kind: ClassKind::Finite(handles),
            bounds: ClassBounds::default(),
        })
    }

    pub fn linear_ball(radius: f64, d: usize) -> Result<Self> {
        if !(radius > 0.0) || d == 0 {
            return Err(Error::Parameter(format!(
                "linear ball needs radius > 0 and d >= 1, got {radius}, {d}"
            )));
        }
        Ok(Self {
            kind: ClassKind::LinearBall { radius, d },
            bounds: ClassBounds::default(),
        })
    }

    pub fn handles(&self) -> Result<&[FunctionHandle]> {
        match &self.kind {
            ClassKind::Finite(h) => Ok(h),
            ClassKind::LinearBall { .. } => Err(Error::Input("operation needs a finite class".into())),
        }
    }
}

/// `(1/N) Σ (f(X_i) - Y_i)²`
pub fn empirical_risk(f: &FunctionHandle, data: &Dataset) -> Result<f64> {
    let y = data.targets()?;
    f.check_dim(data.dim())?;
    let s: f64 = data
        .x
        .row_iter()
        .zip(y)
        .map(|(r, yi)| {
            let e = f.eval(r) - yi;
            e * e
        })
        .sum();
    Ok(s / y.len() as f64)
}

fn argmin_lowest_id(handles: &[FunctionHandle], scores: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..handles.len() {
        let (s, b) = (scores[i], scores[best]);
        if s < b || (s == b && handles[i].id < handles[best].id) {
            best = i;
        }
    }
    best
}

/// Empirical risk minimizer over a finite class; ties go to the lowest id.
pub fn erm_finite(handles: &[FunctionHandle], data: &Dataset) -> Result<usize> {
    if handles.is_empty() {
        return Err(Error::Input("empty class".into()));
    }
    data.targets()?;
    let risks = handles
        .par_iter()
        .map(|h| empirical_risk(h, data))
        .collect::<Result<Vec<_>>>()?;
    Ok(handles[argmin_lowest_id(handles, &risks)].id)
}

/// Minimizer of the empirical excess risk `total` relative to `f_star`.
pub fn erm_finite_excess(handles: &[FunctionHandle], f_star: &FunctionHandle, data: &Dataset) -> Result<usize> {
    if handles.is_empty() {
        return Err(Error::Input("empty class".into()));
    }
    let totals = handles
        .par_iter()
        .map(|h| excess_loss_decomposition(h, f_star, data).map(|d| d.total))
        .collect::<Result<Vec<_>>>()?;
    Ok(handles[argmin_lowest_id(handles, &totals)].id)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearErm {
    pub weights: Vec<f64>,
    pub objective: f64,
    /// Norm of the gradient mapping at the output.
    pub kkt_residual: f64,
    pub iterations: usize,
}

fn project_ball(t: &mut [f64], radius: f64) {
    let n = norm2(t);
    if n > radius {
        let c = if n > 0.0 { radius / n } else { 0.0 };
        t.iter_mut().for_each(|v| *v *= c);
    }
}

/// Projected gradient for `min_{‖t‖ <= radius} (1/N) ‖Xt - y‖²` with step
/// `1/L`, `L = λ_max((2/N) XᵀX)`. Stops when the gradient-mapping norm is
/// at most `tol`.
pub fn erm_linear_ball(data: &Dataset, radius: f64, tol: f64, max_iter: usize) -> Result<LinearErm> {
    let y = data.targets()?;
    if !(radius >= 0.0) {
        return Err(Error::Parameter(format!("radius = {radius} must be >= 0")));
    }
    if !(tol > 0.0) {
        return Err(Error::Parameter(format!("tol = {tol} must be positive")));
    }
    let d = data.dim();
    let n = data.len() as f64;
    let objective = |t: &[f64]| -> f64 {
        data.x
            .row_iter()
            .zip(y)
            .map(|(r, yi)| {
                let e = dot(r, t) - yi;
                e * e
            })
            .sum::<f64>()
            / n
    };
    if radius == 0.0 {
        let t = vec![0.0; d];
        return Ok(LinearErm {
            objective: objective(&t),
            weights: t,
            kkt_residual: 0.0,
            iterations: 0,
        });
    }
    let hess = data.x.gram() * (2.0 / n);
    let lip = *symmetric_eigenvalues(hess.clone()).last().expect("d >= 1");
    let b: Vec<f64> = data.x.tr_mul_vec(y)?.into_iter().map(|v| v * 2.0 / n).collect();
    let grad = |t: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|a| (0..d).map(|c| hess[(a, c)] * t[c]).sum::<f64>() - b[a])
            .collect()
    };
    if lip <= 0.0 {
        // zero design: the objective does not depend on t
        let t = vec![0.0; d];
        return Ok(LinearErm {
            objective: objective(&t),
            weights: t,
            kkt_residual: 0.0,
            iterations: 0,
        });
    }
    let step = 1.0 / lip;
    let mut t = vec![0.0; d];
    let mut residual = f64::INFINITY;
    for it in 0..max_iter {
        let g = grad(&t);
        let mut next: Vec<f64> = t.iter().zip(&g).map(|(ti, gi)| ti - step * gi).collect();
        project_ball(&mut next, radius);
        residual = lip * t.iter().zip(&next).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
        if residual <= tol {
            return Ok(LinearErm {
                objective: objective(&t),
                weights: t,
                kkt_residual: residual,
                iterations: it,
            });
        }
        t = next;
    }
    Err(Error::Convergence {
        iterations: max_iter,
        residual,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// `(1/N) Σ (f - f*)²(X_i)`
    pub quadratic: f64,
    /// `(2/N) Σ (f - f*)(X_i) (f*(X_i) - Y_i)`
    pub multiplier: f64,
    pub total: f64,
    /// `(1/N) Σ [(f(X_i) - Y_i)² - (f*(X_i) - Y_i)²]`
    pub direct: f64,
}

impl Decomposition {
    /// `|total - direct|` relative to the size of the two components.
    pub fn relative_gap(&self) -> f64 {
        let scale = self.quadratic.abs() + self.multiplier.abs();
        if scale == 0.0 {
            (self.total - self.direct).abs()
        } else {
            (self.total - self.direct).abs() / scale
        }
    }
}

/// Splits the empirical excess loss of `f` over `f_star` into its
/// quadratic and multiplier parts.
pub fn excess_loss_decomposition(f: &FunctionHandle, f_star: &FunctionHandle, data: &Dataset) -> Result<Decomposition> {
    let y = data.targets()?;
    f.check_dim(data.dim())?;
    f_star.check_dim(data.dim())?;
    let (mut q, mut m, mut direct) = (0.0, 0.0, 0.0);
    for (r, yi) in data.x.row_iter().zip(y) {
        let a = f.eval(r);
        let s = f_star.eval(r);
        let diff = a - s;
        q += diff * diff;
        m += 2.0 * diff * (s - yi);
        direct += (a - yi) * (a - yi) - (s - yi) * (s - yi);
    }
    let n = y.len() as f64;
    let (quadratic, multiplier) = (q / n, m / n);
    Ok(Decomposition {
        quadratic,
        multiplier,
        total: quadratic + multiplier,
        direct: direct / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BernsteinEstimate {
    pub b_hat: f64,
    pub argmax_handle: Option<usize>,
    pub f_star_handle: usize,
    pub mc_se: f64,
    /// Handles whose excess risk is within 3 SE of zero; excluded from the max.
    pub unreliable: Vec<usize>,
    /// The runner-up's risk is within 3 SE of the minimizer's.
    pub f_star_ambiguous: bool,
    /// A one-point class: the constant is undefined and reported as 1.
    pub singleton: bool,
}

/// Monte Carlo Bernstein constant
/// `max_{f ≠ f*} ‖f - f*‖² / E[(f(X) - Y)² - (f*(X) - Y)²]`
/// where `f*` minimizes the Monte Carlo population risk. Numerators are
/// analytic for affine pairs.
pub fn bernstein_constant(
    handles: &[FunctionHandle],
    model: &RegressionModel,
    d: usize,
    mc_size: usize,
    seed: Seed,
) -> Result<BernsteinEstimate> {
    if handles.is_empty() {
        return Err(Error::Input("empty class".into()));
    }
    if mc_size < 2 {
        return Err(Error::Parameter("mc_size must be at least 2".into()));
    }
    if handles.len() == 1 {
        log::warn!("Bernstein constant of a one-point class is undefined; reporting 1");
        return Ok(BernsteinEstimate {
            b_hat: 1.0,
            argmax_handle: None,
            f_star_handle: handles[0].id,
            mc_se: 0.0,
            unreliable: Vec::new(),
            f_star_ambiguous: false,
            singleton: true,
        });
    }
    let data = sample_regression(model, mc_size, d, seed)?;
    let y = data.targets()?;
    let vals: Vec<Vec<f64>> = handles
        .par_iter()
        .map(|h| h.check_dim(d).map(|_| h.eval_rows(&data.x)))
        .collect::<Result<_>>()?;
    let risks: Vec<f64> = vals
        .iter()
        .map(|v| v.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / mc_size as f64)
        .collect();
    let star = argmin_lowest_id(handles, &risks);
    let sv = &vals[star];
    let n = mc_size as f64;
    let mut unreliable = Vec::new();
    let mut best: Option<(f64, f64, usize)> = None;
    let mut runner_up_gap: Option<(f64, f64)> = None;
    for (j, h) in handles.iter().enumerate() {
        if j == star {
            continue;
        }
        let loss: Vec<f64> = vals[j]
            .iter()
            .zip(sv)
            .zip(y)
            .map(|((a, s), yi)| (a - yi) * (a - yi) - (s - yi) * (s - yi))
            .collect();
        let den = mean_se(&loss);
        if runner_up_gap.is_none_or(|(v, _)| den.value < v) {
            runner_up_gap = Some((den.value, den.stderr));
        }
        if den.value <= 3.0 * den.stderr {
            unreliable.push(h.id);
            continue;
        }
        let (num, num_terms): (f64, Option<Vec<f64>>) = match l2_distance(h, &handles[star], None) {
            Ok(dist) => (dist * dist, None),
            Err(_) => {
                let sq: Vec<f64> = vals[j].iter().zip(sv).map(|(a, s)| (a - s) * (a - s)).collect();
                (sq.iter().sum::<f64>() / n, Some(sq))
            }
        };
        let ratio = num / den.value;
        // delta method for a ratio of means
        let resid: Vec<f64> = match &num_terms {
            Some(sq) => sq.iter().zip(&loss).map(|(a, l)| a - ratio * l).collect(),
            None => loss.iter().map(|l| -ratio * l).collect(),
        };
        let se = mean_se(&resid).stderr / den.value;
        if best.is_none_or(|(b, _, _)| ratio > b) {
            best = Some((ratio, se, h.id));
        }
    }
    let f_star_ambiguous = runner_up_gap.is_some_and(|(v, s)| v <= 3.0 * s);
    let (b_hat, mc_se, argmax_handle) = match best {
        Some((b, s, id)) => (b, s, Some(id)),
        None => {
            log::warn!("every excess risk is within 3 SE of zero; the constant is not identified");
            (f64::INFINITY, f64::NAN, None)
        }
    };
    Ok(BernsteinEstimate {
        b_hat,
        argmax_handle,
        f_star_handle: handles[star].id,
        mc_se,
        unreliable,
        f_star_ambiguous,
        singleton: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct R1Params {
    /// Tail level of the defining probability.
    pub delta: f64,
    /// Stability constant on the right-hand side `(ρ/2) r²`.
    pub rho: f64,
    pub n_samples: usize,
    pub mc: usize,
    pub bracket: (f64, f64),
    pub tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct R1Estimate {
    pub radius: f64,
    /// `Pr(φ(radius) >= (ρ/2) radius²)` on the Monte Carlo replicates.
    pub tail_probability: f64,
    pub iterations: usize,
}

/// Per replicate `k` and class member `j`:
/// `S_kj = (1/N) Σ εᵢ ξᵢ (f_j - f*)(X_i)` with `ξᵢ = f*(X_i) - Y_i`.
/// Replicate `k` uses stream `seed.derive(k)` for data and signs.
fn multiplier_sums(
    handles: &[FunctionHandle],
    f_star: &FunctionHandle,
    model: &RegressionModel,
    d: usize,
    n_samples: usize,
    mc: usize,
    seed: Seed,
) -> Result<Vec<Vec<f64>>> {
    for h in handles {
        h.check_dim(d)?;
    }
    f_star.check_dim(d)?;
    let rows = par_trials(seed, mc, |_, rng| -> Result<Vec<f64>> {
        let data = model.sample_with(n_samples, d, rng)?;
        let y = data.targets()?;
        let mut eps = vec![0.0; n_samples];
        fill_signs(rng, &mut eps);
        let weights: Vec<f64> = data
            .x
            .row_iter()
            .zip(y)
            .zip(&eps)
            .map(|((r, yi), e)| e * (f_star.eval(r) - yi))
            .collect();
        Ok(handles
            .iter()
            .map(|h| {
                data.x
                    .row_iter()
                    .zip(&weights)
                    .map(|(r, w)| w * (h.eval(r) - f_star.eval(r)))
                    .sum::<f64>()
                    / n_samples as f64
            })
            .collect())
    });
    rows.into_iter().collect()
}

/// `L2` norms of `f_j - f*`; exact for affine pairs, otherwise on a
/// reference sample from the design law.
fn centered_norms(
    handles: &[FunctionHandle],
    f_star: &FunctionHandle,
    model: &RegressionModel,
    d: usize,
    seed: Seed,
) -> Result<Vec<f64>> {
    let mut reference: Option<Matrix> = None;
    handles
        .iter()
        .map(|h| match l2_distance(h, f_star, None) {
            Ok(v) => Ok(v),
            Err(_) => {
                if reference.is_none() {
                    reference = Some(sample_isotropic(model.design, d, 100_000, seed.label("reference"))?);
                }
                l2_distance(h, f_star, reference.as_ref())
            }
        })
        .collect()
}

fn localized_sup(sums: &[f64], norms: &[f64], r: f64) -> f64 {
    sums.iter()
        .zip(norms)
        .map(|(s, a)| if *a <= r { s.abs() } else { s.abs() * r / a })
        .fold(0.0, f64::max)
}

/// Draws of `φ(r) = sup_{u ∈ star(F - f*, 0), ‖u‖ <= r} |(1/N) Σ εᵢ ξᵢ u(X_i)|`,
/// which for a finite class is `max_j min(1, r/‖u_j‖) |S_j|`.
pub fn multiplier_sup_samples(
    handles: &[FunctionHandle],
    f_star: &FunctionHandle,
    model: &RegressionModel,
    d: usize,
    n_samples: usize,
    r: f64,
    mc: usize,
    seed: Seed,
) -> Result<Vec<f64>> {
    let sums = multiplier_sums(handles, f_star, model, d, n_samples, mc, seed)?;
    let norms = centered_norms(handles, f_star, model, d, seed)?;
    Ok(sums.iter().map(|s| localized_sup(s, &norms, r)).collect())
}

/// Smallest `r` in the bracket with `Pr(φ(r) >= (ρ/2) r²) <= δ`, by
/// bisection on common Monte Carlo replicates.
pub fn r1_estimate(
    handles: &[FunctionHandle],
    f_star: &FunctionHandle,
    model: &RegressionModel,
    d: usize,
    params: &R1Params,
    seed: Seed,
) -> Result<R1Estimate> {
    let R1Params {
        delta,
        rho,
        n_samples,
        mc,
        bracket,
        tol,
    } = *params;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Range(format!("delta = {delta} outside (0, 1)")));
    }
    if delta * (mc as f64) < 20.0 {
        return Err(Error::Resolution(format!(
            "delta * mc = {} is below 20; raise mc to at least {}",
            delta * mc as f64,
            (20.0 / delta).ceil()
        )));
    }
    if !(rho > 0.0) || n_samples == 0 || handles.is_empty() {
        return Err(Error::Parameter(
            "need rho > 0, n_samples >= 1 and a nonempty class".into(),
        ));
    }
    let (mut lo, mut hi) = bracket;
    if !(lo > 0.0 && hi > lo) || !(tol > 0.0 && tol < 1.0) {
        return Err(Error::Parameter(format!("invalid bracket ({lo}, {hi}) or tol {tol}")));
    }
    let sums = multiplier_sums(handles, f_star, model, d, n_samples, mc, seed)?;
    let norms = centered_norms(handles, f_star, model, d, seed)?;
    let tail = |r: f64| -> f64 {
        let level = 0.5 * rho * r * r;
        sums.iter().filter(|s| localized_sup(s, &norms, r) >= level).count() as f64 / mc as f64
    };
    if tail(hi) > delta {
        return Err(Error::Bracket(format!("tail probability exceeds delta at r_hi = {hi}")));
    }
    let mut iterations = 0;
    if tail(lo) <= delta {
        hi = lo;
    } else {
        while hi - lo > tol * hi {
            iterations += 1;
            let mid = 0.5 * (lo + hi);
            if tail(mid) <= delta {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    }
    Ok(R1Estimate {
        radius: hi,
        tail_probability: tail(hi),
        iterations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    First,
    Second,
    Draw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchOutcome {
    pub winner: Winner,
    pub first_blocks: usize,
    pub second_blocks: usize,
    pub tied_blocks: usize,
    /// `(1/N Σ (f - h)²(X_i))^{1/2}`
    pub distance: f64,
}

fn block_risks(vals: &[f64], y: &[f64], part: &BlockPartition) -> Vec<f64> {
    let m = part.block_size() as f64;
    part.ranges()
        .map(|r| {
            vals[r.clone()]
                .iter()
                .zip(&y[r])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / m
        })
        .collect()
}

fn play(fv: &[f64], hv: &[f64], fr: &[f64], hr: &[f64], draw_margin: f64) -> MatchOutcome {
    let n = fv.len() as f64;
    let distance = (fv.iter().zip(hv).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n).sqrt();
    let (mut first, mut second, mut tied) = (0, 0, 0);
    for (a, b) in fr.iter().zip(hr) {
        if a < b {
            first += 1;
        } else if b < a {
            second += 1;
        } else {
            tied += 1;
        }
    }
    // tied blocks are half a win for each side, so they cancel
    let winner = if distance < draw_margin || first == second {
        Winner::Draw
    } else if first > second {
        Winner::First
    } else {
        Winner::Second
    };
    MatchOutcome {
        winner,
        first_blocks: first,
        second_blocks: second,
        tied_blocks: tied,
        distance,
    }
}

/// Block-wise risk comparison of `f` against `h`.
pub fn tournament_match(
    f: &FunctionHandle,
    h: &FunctionHandle,
    data: &Dataset,
    part: &BlockPartition,
    draw_margin: f64,
) -> Result<MatchOutcome> {
    let y = data.targets()?;
    if part.samples != y.len() {
        return Err(Error::Shape(format!(
            "partition of {} samples for {} rows",
            part.samples,
            y.len()
        )));
    }
    if !(draw_margin >= 0.0) {
        return Err(Error::Parameter(format!("draw_margin = {draw_margin} must be >= 0")));
    }
    f.check_dim(data.dim())?;
    h.check_dim(data.dim())?;
    let fv = f.eval_rows(&data.x);
    let hv = h.eval_rows(&data.x);
    Ok(play(
        &fv,
        &hv,
        &block_risks(&fv, y, part),
        &block_risks(&hv, y, part),
        draw_margin,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub first: usize,
    pub second: usize,
    pub outcome: MatchOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TournamentResult {
    pub selected: usize,
    pub no_champion: bool,
    /// Handle ids that lost no decided match and won at least one.
    pub champions: Vec<usize>,
    pub matches: Vec<MatchRecord>,
    /// `(id, losses)` in class order.
    pub losses: Vec<(usize, usize)>,
    /// `(id, median block risk)` in class order.
    pub median_block_risk: Vec<(usize, f64)>,
}

/// Round robin over the class. A champion loses no decided match and wins
/// at least one (any member of a one-point class qualifies). Among several
/// champions the smallest median block risk wins, then the lowest id. With
/// no champion, the member with the fewest losses (then the lowest id) is
/// returned and `no_champion` is set.
pub fn tournament_select(
    handles: &[FunctionHandle],
    data: &Dataset,
    n_blocks: usize,
    draw_margin: f64,
) -> Result<TournamentResult> {
    if handles.is_empty() {
        return Err(Error::Input("empty class".into()));
    }
    let y = data.targets()?;
    let part = partition(y.len(), n_blocks)?;
    if !(draw_margin >= 0.0) {
        return Err(Error::Parameter(format!("draw_margin = {draw_margin} must be >= 0")));
    }
    for h in handles {
        h.check_dim(data.dim())?;
    }
    let vals: Vec<Vec<f64>> = handles.par_iter().map(|h| h.eval_rows(&data.x)).collect();
    let risks: Vec<Vec<f64>> = vals.iter().map(|v| block_risks(v, y, &part)).collect();
    let k = handles.len();
    let pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect();
    let outcomes: Vec<MatchOutcome> = pairs
        .par_iter()
        .map(|&(a, b)| play(&vals[a], &vals[b], &risks[a], &risks[b], draw_margin))
        .collect();
    let mut losses = vec![0usize; k];
    let mut wins = vec![0usize; k];
    for (&(a, b), o) in pairs.iter().zip(&outcomes) {
        match o.winner {
            Winner::First => {
                wins[a] += 1;
                losses[b] += 1;
            }
            Winner::Second => {
                wins[b] += 1;
                losses[a] += 1;
            }
            Winner::Draw => {}
        }
    }
    let medians: Vec<f64> = risks.iter().map(|r| quantile(r, 0.5).expect("n_blocks >= 1")).collect();
    let champions: Vec<usize> = (0..k).filter(|&i| losses[i] == 0 && (wins[i] > 0 || k == 1)).collect();
    let by_id = |i: usize| handles[i].id;
    let (selected, no_champion) = if champions.is_empty() {
        let best = (0..k)
            .min_by(|&a, &b| losses[a].cmp(&losses[b]).then(by_id(a).cmp(&by_id(b))))
            .expect("nonempty");
        (best, true)
    } else {
        let best = champions
            .iter()
            .copied()
            .min_by(|&a, &b| medians[a].total_cmp(&medians[b]).then(by_id(a).cmp(&by_id(b))))
            .expect("nonempty");
        (best, false)
    };
    Ok(TournamentResult {
        selected: by_id(selected),
        no_champion,
        champions: champions.iter().map(|&i| by_id(i)).collect(),
        matches: pairs
            .iter()
            .zip(outcomes)
            .map(|(&(a, b), outcome)| MatchRecord {
                first: by_id(a),
                second: by_id(b),
                outcome,
            })
            .collect(),
        losses: (0..k).map(|i| (by_id(i), losses[i])).collect(),
        median_block_risk: (0..k).map(|i| (by_id(i), medians[i])).collect(),
    })
}

/// Paired comparison of two selection rules on the same trials.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub trials: usize,
    pub first_rate: f64,
    pub second_rate: f64,
    /// Trials where only the first rule hit.
    pub first_only: usize,
    /// Trials where only the second rule hit.
    pub second_only: usize,
    /// Exact one-sided p-value for "first hits more often".
    pub p_value: f64,
}

/// Exact binomial test on discordant pairs.
pub fn paired_selection_test(first: &[bool], second: &[bool]) -> PairedTest {
    use statrs::distribution::{Binomial, DiscreteCDF};
    assert_eq!(first.len(), second.len());
    let n = first.len();
    let first_only = first.iter().zip(second).filter(|(a, b)| **a && !**b).count();
    let second_only = first.iter().zip(second).filter(|(a, b)| !**a && **b).count();
    let discordant = first_only + second_only;
    let p_value = if discordant == 0 || first_only == 0 {
        1.0
    } else {
        let bin = Binomial::new(0.5, discordant as u64).expect("valid binomial");
        bin.sf(first_only as u64 - 1)
    };
    let rate = |v: &[bool]| v.iter().filter(|b| **b).count() as f64 / n.max(1) as f64;
    PairedTest {
        trials: n,
        first_rate: rate(first),
        second_rate: rate(second),
        first_only,
        second_only,
        p_value,
    }
}
