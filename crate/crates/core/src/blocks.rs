//! Block-partitioned quadratic empirical processes.
//!
//! The sample `{1..N}` is cut into `n` contiguous blocks of size `m = N/n`.
//! For a class of functions we count, per function, the blocks on which
//! the empirical second moment stays above `(1 - ξ)‖h‖²`, and take the
//! worst function over a finite net.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{random_unit_vector, Estimate};
use crate::error::{Error, Result};
use crate::function::{l2_distance, FunctionHandle, L2Norm};
use crate::matrix::{dot, norm2, Matrix};
use crate::rng::{fill_signs, par_trials, Seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub samples: usize,
    pub blocks: usize,
}

impl BlockPartition {
    pub fn block_size(&self) -> usize {
        self.samples / self.blocks
    }

    /// Zero-based index range of block `j`.
    pub fn block(&self, j: usize) -> Range<usize> {
        let m = self.block_size();
        j * m..(j + 1) * m
    }

    pub fn ranges(&self) -> impl ExactSizeIterator<Item = Range<usize>> + '_ {
        (0..self.blocks).map(move |j| self.block(j))
    }

    /// Mean of `values` over each block.
    pub fn block_means(&self, values: &[f64]) -> Vec<f64> {
        let m = self.block_size() as f64;
        self.ranges().map(|r| values[r].iter().sum::<f64>() / m).collect()
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.samples {
            return Err(Error::Shape(format!(
                "{len} values for a partition of {} samples",
                self.samples
            )));
        }
        Ok(())
    }
}

/// Contiguous partition of `samples` points into `blocks` equal blocks.
pub fn partition(samples: usize, blocks: usize) -> Result<BlockPartition> {
    if samples == 0 || blocks == 0 {
        return Err(Error::Range(format!(
            "need positive sizes, got N = {samples}, n = {blocks}"
        )));
    }
    if samples % blocks != 0 {
        return Err(Error::Divisibility { samples, blocks });
    }
    Ok(BlockPartition { samples, blocks })
}

/// Number of blocks whose mean of `values²` is at least `(1 - ξ) l2_norm²`.
pub fn good_block_count(values: &[f64], part: &BlockPartition, xi: f64, l2_norm: f64) -> Result<usize> {
    part.check_len(values.len())?;
    if !(l2_norm > 0.0) {
        return Err(Error::Parameter(format!("l2_norm = {l2_norm} must be positive")));
    }
    Ok(count_good(values, part, (1.0 - xi) * l2_norm * l2_norm))
}

fn count_good(values: &[f64], part: &BlockPartition, threshold: f64) -> usize {
    let m = part.block_size() as f64;
    part.ranges()
        .filter(|r| values[r.clone()].iter().map(|v| v * v).sum::<f64>() / m >= threshold)
        .count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetConstruction {
    Explicit,
    GreedyRandom { samples: usize, seed: Seed },
}

/// A finite set of functions standing in for a class.
#[derive(Clone, Debug)]
pub struct NetSpec {
    pub points: Vec<FunctionHandle>,
    pub rho: f64,
    pub construction: NetConstruction,
    /// Largest distance from a sampled candidate to its nearest net point.
    pub coverage_radius: Option<f64>,
}

impl NetSpec {
    pub fn explicit(points: Vec<FunctionHandle>, rho: f64) -> Self {
        Self {
            points,
            rho,
            construction: NetConstruction::Explicit,
            coverage_radius: None,
        }
    }

    /// `count` independent uniform directions on the sphere of `R^d`, as
    /// linear handles.
    pub fn random_directions(d: usize, count: usize, seed: Seed) -> Result<Self> {
        if d == 0 {
            return Err(Error::Parameter("dimension must be positive".into()));
        }
        let mut rng = seed.rng();
        let points = (0..count)
            .map(|i| FunctionHandle::linear(i, random_unit_vector(d, &mut rng)))
            .collect();
        Ok(Self::explicit(points, 0.0))
    }

    /// Greedy `rho`-separated subset of `samples` random directions.
    pub fn greedy_sphere(d: usize, samples: usize, rho: f64, seed: Seed) -> Result<Self> {
        if !(rho > 0.0) {
            return Err(Error::Parameter(format!("rho = {rho} must be positive")));
        }
        let cand = Self::random_directions(d, samples, seed)?.points;
        let pack = packing_count(&cand, rho, None)?;
        let points = pack
            .packing
            .into_iter()
            .enumerate()
            .map(|(i, h)| h.with_id(i))
            .collect();
        Ok(Self {
            points,
            rho,
            construction: NetConstruction::GreedyRandom { samples, seed },
            coverage_radius: Some(pack.coverage_radius),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Rescales every point to `L2` norm `r`.
    pub fn normalized(&self, r: f64) -> Result<Self> {
        let points = self
            .points
            .iter()
            .map(|h| {
                let norm = h.l2_norm();
                if !(norm > 0.0) {
                    return Err(Error::Parameter(format!("handle {} has norm {norm}", h.id)));
                }
                let c = r / norm;
                let scaled = FunctionHandle::combination(h.id, vec![(c, h.clone())])?;
                Ok(scaled.with_norm(L2Norm {
                    value: r,
                    stderr: h.l2.stderr.map(|s| s * c),
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { points, ..self.clone() })
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Input("empty net".into()));
        }
        for h in &self.points {
            h.check_dim(x.ncols())?;
            if !(h.l2_norm() > 0.0) {
                return Err(Error::Parameter(format!(
                    "net handle {} has L2 norm {}",
                    h.id,
                    h.l2_norm()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetMin {
    pub min_count: usize,
    pub argmin: usize,
}

/// Worst good-block count over the net; ties go to the earliest point.
pub fn min_good_blocks_over_net(net: &NetSpec, x: &Matrix, part: &BlockPartition, xi: f64) -> Result<NetMin> {
    net.check(x)?;
    part.check_len(x.nrows())?;
    let counts: Vec<usize> = net
        .points
        .par_iter()
        .map(|h| {
            let l2 = h.l2_norm();
            count_good(&h.eval_rows(x), part, (1.0 - xi) * l2 * l2)
        })
        .collect();
    let (i, &min_count) = counts
        .iter()
        .enumerate()
        .min_by_key(|(_, c)| **c)
        .expect("nonempty net");
    Ok(NetMin {
        min_count,
        argmin: net.points[i].id,
    })
}

/// `min_f (1/N) Σ f²(X_i) / ‖f‖²` over the net.
pub fn quadratic_inf(net: &NetSpec, x: &Matrix) -> Result<f64> {
    net.check(x)?;
    if x.nrows() == 0 {
        return Err(Error::Input("empty sample".into()));
    }
    let n = x.nrows() as f64;
    let vals: Vec<f64> = net
        .points
        .par_iter()
        .map(|h| {
            let l2 = h.l2_norm();
            h.eval_rows(x).iter().map(|v| v * v).sum::<f64>() / (n * l2 * l2)
        })
        .collect();
    Ok(vals.into_iter().fold(f64::INFINITY, f64::min))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub min_count: usize,
    pub direction: Vec<f64>,
    /// Value of the attacked order statistic of block means at `direction`.
    pub objective: f64,
}

/// Projected-subgradient attack on the linear class over the unit sphere:
/// minimizes the `(⌊ηn⌋+1)`-th smallest block mean of `⟨X_i, t⟩²`, which
/// falls below `1 - ξ` exactly when more than `ηn` blocks are bad.
pub fn adversarial_min_good_blocks(
    x: &Matrix,
    part: &BlockPartition,
    xi: f64,
    eta: f64,
    starts: &[Vec<f64>],
    iterations: usize,
) -> Result<AttackResult> {
    part.check_len(x.nrows())?;
    if starts.is_empty() {
        return Err(Error::Input("no starting directions".into()));
    }
    let d = x.ncols();
    let m = part.block_size() as f64;
    let grams: Vec<DMatrix<f64>> = part.ranges().map(|r| x.gram_rows(r) / m).collect();
    let rank = ((eta * part.blocks as f64).floor() as usize).min(part.blocks - 1);
    let threshold = 1.0 - xi;
    let evaluate = |t: &DVector<f64>| -> (usize, f64, usize) {
        let means: Vec<f64> = grams.iter().map(|g| t.dot(&(g * t))).collect();
        let good = means.iter().filter(|v| **v >= threshold).count();
        let mut order: Vec<usize> = (0..means.len()).collect();
        order.sort_by(|a, b| means[*a].total_cmp(&means[*b]).then(a.cmp(b)));
        (good, means[order[rank]], order[rank])
    };
    let runs: Vec<Result<AttackResult>> = starts
        .par_iter()
        .map(|s| {
            if s.len() != d {
                return Err(Error::Shape("starting direction has the wrong dimension".into()));
            }
            let mut t = DVector::from_column_slice(s);
            let norm = t.norm();
            if norm == 0.0 {
                return Err(Error::Input("zero starting direction".into()));
            }
            t /= norm;
            let (mut best_count, mut best_obj, _) = evaluate(&t);
            let mut best_t = t.clone();
            for it in 0..iterations {
                let (count, obj, j) = evaluate(&t);
                if (count, obj) < (best_count, best_obj) {
                    best_count = count;
                    best_obj = obj;
                    best_t = t.clone();
                }
                let mut g = &grams[j] * &t * 2.0;
                // tangent component only
                let radial = g.dot(&t);
                g -= &t * radial;
                let gn = g.norm();
                if gn < 1e-14 {
                    break;
                }
                let step = 0.5 / (1.0 + it as f64).sqrt();
                t -= g * (step / gn);
                t /= t.norm();
            }
            let (count, obj, _) = evaluate(&t);
            if (count, obj) < (best_count, best_obj) {
                best_count = count;
                best_obj = obj;
                best_t = t;
            }
            Ok(AttackResult {
                min_count: best_count,
                direction: best_t.iter().copied().collect(),
                objective: best_obj,
            })
        })
        .collect();
    let mut best: Option<AttackResult> = None;
    for r in runs {
        let r = r?;
        if best
            .as_ref()
            .is_none_or(|b| (r.min_count, r.objective) < (b.min_count, b.objective))
        {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one start"))
}

/// Monte Carlo estimate, conditional on `X`, of
/// `E sup_u |(1/N) Σ εᵢ u(X_i)|` over the net. Draw `k` uses sign stream
/// `seed.derive(k)`, shared with [`rademacher_sup_linear_ball`].
pub fn rademacher_sup(net: &NetSpec, x: &Matrix, sign_draws: usize, seed: Seed) -> Result<Estimate> {
    if net.points.is_empty() {
        return Err(Error::Input("empty net".into()));
    }
    for h in &net.points {
        h.check_dim(x.ncols())?;
    }
    check_draws(sign_draws, x)?;
    let vals: Vec<Vec<f64>> = net.points.iter().map(|h| h.eval_rows(x)).collect();
    let n = x.nrows() as f64;
    let sups = par_trials(seed, sign_draws, |_, rng| {
        let mut eps = vec![0.0; x.nrows()];
        fill_signs(rng, &mut eps);
        vals.iter().map(|v| dot(&eps, v).abs() / n).fold(0.0, f64::max)
    });
    Ok(mean_se(&sups))
}

/// `(ρ/N) E‖Σ εᵢ X_i‖₂`, the exact supremum over the Euclidean ball of
/// radius `ρ` for each sign draw.
pub fn rademacher_sup_linear_ball(x: &Matrix, rho: f64, sign_draws: usize, seed: Seed) -> Result<Estimate> {
    if !(rho > 0.0) {
        return Err(Error::Parameter(format!("rho = {rho} must be positive")));
    }
    check_draws(sign_draws, x)?;
    let n = x.nrows() as f64;
    let sups = par_trials(seed, sign_draws, |_, rng| {
        let mut eps = vec![0.0; x.nrows()];
        fill_signs(rng, &mut eps);
        let s = x.tr_mul_vec(&eps).expect("sign vector has N entries");
        rho * norm2(&s) / n
    });
    Ok(mean_se(&sups))
}

fn check_draws(sign_draws: usize, x: &Matrix) -> Result<()> {
    if sign_draws == 0 {
        return Err(Error::Parameter("sign_draws must be positive".into()));
    }
    if x.nrows() == 0 {
        return Err(Error::Input("empty sample".into()));
    }
    Ok(())
}

pub(crate) fn mean_se(v: &[f64]) -> Estimate {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Estimate {
        value: mean,
        stderr: (var / n).sqrt(),
    }
}

#[derive(Clone, Debug)]
pub struct Packing {
    pub count: usize,
    pub packing: Vec<FunctionHandle>,
    /// Positions of the packing points in the candidate list.
    pub indices: Vec<usize>,
    pub coverage_radius: f64,
}

/// Greedy maximal `rho`-separated subset, scanning candidates in order.
/// Non-affine handles need a `reference` sample for distances.
pub fn packing_count(candidates: &[FunctionHandle], rho: f64, reference: Option<&Matrix>) -> Result<Packing> {
    if !(rho > 0.0) {
        return Err(Error::Parameter(format!("rho = {rho} must be positive")));
    }
    let mut indices: Vec<usize> = Vec::new();
    // nearest packing distance per candidate, updated as points are added
    let mut nearest = vec![f64::INFINITY; candidates.len()];
    for i in 0..candidates.len() {
        if nearest[i] < rho {
            continue;
        }
        indices.push(i);
        let new = &candidates[i];
        let dists: Vec<Result<f64>> = candidates[i..]
            .par_iter()
            .map(|c| l2_distance(c, new, reference))
            .collect();
        for (k, dist) in dists.into_iter().enumerate() {
            let dist = dist?;
            let slot = &mut nearest[i + k];
            *slot = slot.min(dist);
        }
    }
    let coverage_radius = nearest.iter().copied().fold(0.0, f64::max);
    if coverage_radius >= rho && !candidates.is_empty() {
        return Err(Error::Contract(format!(
            "packing coverage {coverage_radius} is not below rho = {rho}"
        )));
    }
    Ok(Packing {
        count: indices.len(),
        packing: indices.iter().map(|&i| candidates[i].clone()).collect(),
        indices,
        coverage_radius,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalRadius {
    pub radius: f64,
    pub iterations: usize,
    /// Decisions taken on point estimates after the draw budget ran out.
    pub unresolved: usize,
    pub final_draws: usize,
}

fn check_bracket(bracket: (f64, f64), tol: f64) -> Result<()> {
    let (lo, hi) = bracket;
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(Error::Parameter(format!("invalid bracket ({lo}, {hi})")));
    }
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::Parameter(format!("tol = {tol} must lie in (0, 1)")));
    }
    Ok(())
}

/// Records `(r, complexity, budget)` and checks the monotone ratios: the
/// complexity over `r` must not increase and the budget over `r` must.
struct MonotoneLog(Vec<(f64, f64, f64)>);

impl MonotoneLog {
    fn push(&mut self, r: f64, c: f64, b: f64) -> Result<()> {
        self.0.push((r, c, b));
        let mut pts = self.0.clone();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in pts.windows(2) {
            let (r0, c0, b0) = w[0];
            let (r1, c1, b1) = w[1];
            let slack = 1e-9 * (c0 / r0).abs().max(c1 / r1).max(1e-300);
            if c1 / r1 > c0 / r0 + slack {
                return Err(Error::Contract(format!(
                    "complexity(r)/r increases between r = {r0} and r = {r1}"
                )));
            }
            if b1 / r1 < b0 / r0 - 1e-9 * (b0 / r0).abs() {
                return Err(Error::Contract(format!(
                    "budget(r)/r decreases between r = {r0} and r = {r1}"
                )));
            }
        }
        Ok(())
    }
}

/// Smallest `r` in the bracket with `complexity(r) <= budget(r)`, by
/// bisection to relative width `tol`.
pub fn solve_critical_radius(
    complexity: impl Fn(f64) -> f64,
    budget: impl Fn(f64) -> f64,
    bracket: (f64, f64),
    tol: f64,
) -> Result<CriticalRadius> {
    check_bracket(bracket, tol)?;
    let mut log = MonotoneLog(Vec::new());
    let mut holds = |r: f64| -> Result<bool> {
        let c = complexity(r);
        let b = budget(r);
        log.push(r, c, b)?;
        Ok(c <= b)
    };
    let (mut lo, mut hi) = bracket;
    if !holds(hi)? {
        return Err(Error::Bracket(format!("complexity exceeds budget at r_hi = {hi}")));
    }
    let mut iterations = 0;
    if holds(lo)? {
        return Ok(CriticalRadius {
            radius: lo,
            iterations,
            unresolved: 0,
            final_draws: 0,
        });
    }
    while hi - lo > tol * hi {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        if holds(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(CriticalRadius {
        radius: hi,
        iterations,
        unresolved: 0,
        final_draws: 0,
    })
}

/// Stochastic bisection: `complexity(r, draws, seed)` is a Monte Carlo
/// estimate. A comparison is accepted once `|budget - estimate| > 2 SE`;
/// otherwise the draw count doubles, up to `max_draws`. All radii share
/// the same seed.
pub fn solve_critical_radius_mc(
    complexity: impl Fn(f64, usize, Seed) -> Result<Estimate>,
    budget: impl Fn(f64) -> f64,
    bracket: (f64, f64),
    tol: f64,
    initial_draws: usize,
    max_draws: usize,
    seed: Seed,
) -> Result<CriticalRadius> {
    check_bracket(bracket, tol)?;
    if initial_draws == 0 || max_draws < initial_draws {
        return Err(Error::Parameter("need 0 < initial_draws <= max_draws".into()));
    }
    let mut draws = initial_draws;
    let mut unresolved = 0;
    let mut holds = |r: f64| -> Result<bool> {
        let b = budget(r);
        loop {
            let est = complexity(r, draws, seed)?;
            let margin = b - est.value;
            if margin.abs() > 2.0 * est.stderr {
                return Ok(margin >= 0.0);
            }
            if draws >= max_draws {
                unresolved += 1;
                return Ok(margin >= 0.0);
            }
            draws = (draws * 2).min(max_draws);
        }
    };
    let (mut lo, mut hi) = bracket;
    if !holds(hi)? {
        return Err(Error::Bracket(format!("complexity exceeds budget at r_hi = {hi}")));
    }
    let mut iterations = 0;
    if !holds(lo)? {
        while hi - lo > tol * hi {
            iterations += 1;
            let mid = 0.5 * (lo + hi);
            if holds(mid)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
    } else {
        hi = lo;
    }
    Ok(CriticalRadius {
        radius: hi,
        iterations,
        unresolved,
        final_draws: draws,
    })
}

/// `λh + (1-λ)·center` for `λ = k/levels`, `k = 1..=levels`, over every
/// `h` in `points`. Handles with equal descriptors are merged.
pub fn star_hull_net(points: &[FunctionHandle], center: &FunctionHandle, levels: usize) -> Result<NetSpec> {
    if levels == 0 {
        return Err(Error::Parameter("levels must be positive".into()));
    }
    let mut out: Vec<FunctionHandle> = Vec::new();
    for h in points {
        for k in 1..=levels {
            let lambda = k as f64 / levels as f64;
            let g = if k == levels {
                h.clone()
            } else {
                h.toward(0, center, lambda)?
            };
            if !out.iter().any(|o| o.descriptor == g.descriptor) {
                let id = out.len();
                out.push(g.with_id(id));
            }
        }
    }
    Ok(NetSpec::explicit(out, 0.0))
}
