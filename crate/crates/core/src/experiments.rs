//! End-to-end reproductions: the smallest-eigenvalue scaling law of random
//! Gram matrices and the block conclusion for linear classes.
//!
//! Throughout, `λ_min` denotes the quadratic-form infimum
//! `inf_{‖t‖=1} (1/N) Σ ⟨X_i, t⟩²`, i.e. the smallest eigenvalue of
//! `(1/N) XᵀX` (the square of the smallest singular value of `X/√N`).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{min_good_blocks_over_net, partition, NetSpec};
use crate::distributions::{sample_isotropic, ScalarLaw};
use crate::error::{Error, Result};
use crate::matrix::{symmetric_eigenvalues, Matrix};
use crate::rng::{try_par_trials, Seed};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinEigen {
    /// Clamped at zero.
    pub value: f64,
    /// Unclamped eigenvalue, negative only through rounding.
    pub raw: f64,
}

/// Smallest eigenvalue of `(1/N) XᵀX` together with its unclamped value.
pub fn min_eigen(x: &Matrix) -> Result<MinEigen> {
    let (n, d) = (x.nrows(), x.ncols());
    if d == 0 {
        return Err(Error::Shape("design without columns".into()));
    }
    if n < d {
        return Err(Error::RankDeficient { rows: n, cols: d });
    }
    let gram = x.gram() / n as f64;
    let raw = symmetric_eigenvalues(gram)[0];
    if raw < 0.0 {
        log::debug!("smallest eigenvalue {raw:e} clamped to 0");
    }
    Ok(MinEigen {
        value: raw.max(0.0),
        raw,
    })
}

/// `inf_{t ∈ S^{d-1}} (1/N) Σ ⟨X_i, t⟩²`.
pub fn min_singular_value(x: &Matrix) -> Result<f64> {
    Ok(min_eigen(x)?.value)
}

/// `(d/N) log(eN/d)`
pub fn bound_argument(d: usize, n: usize) -> f64 {
    let r = d as f64 / n as f64;
    r * (std::f64::consts::E / r).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvGrid {
    pub dims: Vec<usize>,
    /// `N/d` ratios.
    pub aspect: Vec<f64>,
    pub law: ScalarLaw,
    pub q: f64,
    pub trials: usize,
    pub seed: Seed,
}

impl SvGrid {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.aspect.is_empty() {
            return Err(Error::Parameter("empty grid".into()));
        }
        if self.trials == 0 {
            return Err(Error::Parameter("trials must be positive".into()));
        }
        if self.q <= 2.0 || self.q.is_nan() {
            return Err(Error::Range(format!("q = {} must exceed 2", self.q)));
        }
        self.law.validate()?;
        if !self.law.has_finite_moment(self.q) {
            return Err(Error::Moment {
                law: self.law.name(),
                order: self.q,
            });
        }
        for (d, _) in self.cells_unchecked() {
            if d == 0 {
                return Err(Error::Parameter("dimension 0 in grid".into()));
            }
        }
        for &a in &self.aspect {
            for &d in &self.dims {
                let n = a * d as f64;
                if !(a > 0.0) || (n - n.round()).abs() > 1e-9 {
                    return Err(Error::Parameter(format!("N = {a}·{d} is not an integer")));
                }
            }
        }
        Ok(())
    }

    fn cells_unchecked(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for &d in &self.dims {
            for &a in &self.aspect {
                out.push((d, (a * d as f64).round() as usize));
            }
        }
        out
    }

    /// `(d, N)` pairs, dims outermost.
    pub fn cells(&self) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        Ok(self.cells_unchecked())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvCell {
    pub d: usize,
    pub n_samples: usize,
    pub lambda_min: Vec<f64>,
    pub bound_argument: f64,
}

impl SvCell {
    pub fn deficits(&self) -> Vec<f64> {
        self.lambda_min.iter().map(|l| 1.0 - l).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvResult {
    pub law: ScalarLaw,
    pub q: f64,
    pub cells: Vec<SvCell>,
}

/// `trials` independent designs per cell. Trial `t` of cell `(d, N)` uses
/// the stream keyed by `(seed, d, N, t)`, so cells can be added or
/// reordered without changing the others.
pub fn run_sv_experiment(grid: &SvGrid) -> Result<SvResult> {
    let cells = grid.cells()?;
    let tasks: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..grid.trials).map(move |t| (c, t)))
        .collect();
    let values: Vec<Result<f64>> = tasks
        .par_iter()
        .map(|&(c, t)| {
            let (d, n) = cells[c];
            let seed = grid.seed.derive(d as u64).derive(n as u64).derive(t as u64);
            let x = sample_isotropic(grid.law, d, n, seed)?;
            min_singular_value(&x)
        })
        .collect();
    let mut out: Vec<SvCell> = cells
        .iter()
        .map(|&(d, n)| SvCell {
            d,
            n_samples: n,
            lambda_min: Vec::with_capacity(grid.trials),
            bound_argument: bound_argument(d, n),
        })
        .collect();
    for (&(c, _), v) in tasks.iter().zip(values) {
        out[c].lambda_min.push(v?);
    }
    Ok(SvResult {
        law: grid.law,
        q: grid.q,
        cells: out,
    })
}

/// Linear-interpolation sample quantile (type 7).
pub fn quantile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Input("quantile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Range(format!("quantile level {p} outside [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = p * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerFit {
    pub exponent: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least squares of `log y` on `log x`.
pub fn fit_power_law(x: &[f64], y: &[f64]) -> Result<PowerFit> {
    if x.len() != y.len() {
        return Err(Error::Shape("x and y differ in length".into()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::Quantile("power-law fit needs positive values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mut distinct = lx.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Input("need at least 3 distinct arguments".into()));
    }
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = ly.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(a, b)| {
            let e = b - intercept - slope * a;
            e * e
        })
        .sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    Ok(PowerFit {
        exponent: slope,
        intercept,
        r2,
    })
}

/// Regressor for the scaling fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingArgument {
    /// `(d/N) log(eN/d)`
    WithLog,
    /// `d/N`
    Plain,
}

/// Slope of `log(deficit quantile)` against `log(argument)` across cells.
pub fn fit_scaling_exponent(result: &SvResult, level: f64, argument: ScalingArgument) -> Result<PowerFit> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Range(format!("quantile level {level} outside (0, 1)")));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for cell in &result.cells {
        let dq = quantile(&cell.deficits(), level)?;
        if !(dq > 0.0) {
            return Err(Error::Quantile(format!(
                "deficit quantile {dq} at level {level} for (d, N) = ({}, {}); retry at a higher level",
                cell.d, cell.n_samples
            )));
        }
        xs.push(match argument {
            ScalingArgument::WithLog => cell.bound_argument,
            ScalingArgument::Plain => cell.d as f64 / cell.n_samples as f64,
        });
        ys.push(dq);
    }
    fit_power_law(&xs, &ys)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MainDesign {
    pub law: ScalarLaw,
    pub d: usize,
    pub n_samples: usize,
    pub n_blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MainVerification {
    pub success_rate: f64,
    pub worst_min_count: usize,
    /// Per-trial minimum good-block count over the net.
    pub min_counts: Vec<usize>,
    pub argmins: Vec<usize>,
    pub required: usize,
}

/// Fraction of trials in which every net point keeps at least `(1-η)n`
/// good blocks. Trial `t` draws its design from stream `seed.derive(t)`.
pub fn verify_block_conclusion(
    net: &NetSpec,
    design: &MainDesign,
    xi: f64,
    eta: f64,
    trials: usize,
    seed: Seed,
) -> Result<MainVerification> {
    let part = partition(design.n_samples, design.n_blocks)?;
    if net.is_empty() {
        return Err(Error::Input("empty net".into()));
    }
    if trials == 0 {
        return Err(Error::Parameter("trials must be positive".into()));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Range(format!("eta = {eta} outside [0, 1]")));
    }
    let r = net.points[0].l2_norm();
    if net
        .points
        .iter()
        .any(|h| (h.l2_norm() - r).abs() > 1e-9 * r.abs().max(1.0))
    {
        return Err(Error::Parameter("net handles must share one L2 norm".into()));
    }
    // (1-η)n, rounded up with a guard against representation error
    let required = ((1.0 - eta) * design.n_blocks as f64 * (1.0 - 1e-12)).ceil() as usize;
    let results = try_par_trials(seed, trials, |t, _| {
        let x = sample_isotropic(design.law, design.d, design.n_samples, seed.derive(t as u64))?;
        min_good_blocks_over_net(net, &x, &part, xi)
    })?;
    let successes = results.iter().filter(|r| r.min_count >= required).count();
    Ok(MainVerification {
        success_rate: successes as f64 / trials as f64,
        worst_min_count: results.iter().map(|r| r.min_count).min().unwrap_or(0),
        min_counts: results.iter().map(|r| r.min_count).collect(),
        argmins: results.iter().map(|r| r.argmin).collect(),
        required,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::random_unit_vector;
    use nalgebra::DMatrix;

    #[test]
    fn min_singular_value_examples() {
        assert!((min_singular_value(&Matrix::identity(4).map(|v| v * 2.0)).unwrap() - 1.0).abs() < 1e-12);
        let x = Matrix::from_rows(&[vec![1.0], vec![-1.0], vec![-1.0], vec![1.0]]).unwrap();
        assert_eq!(min_singular_value(&x).unwrap(), 1.0);
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![-1.0, 1.0]]).unwrap();
        assert!((min_singular_value(&x).unwrap() - 0.75).abs() < 1e-12);
        let wide = Matrix::zeros(2, 3);
        assert!(matches!(
            min_singular_value(&wide),
            Err(Error::RankDeficient { rows: 2, cols: 3 })
        ));
    }

    #[test]
    fn min_singular_value_invariances() {
        let x = sample_isotropic(ScalarLaw::student_t(5.0), 6, 80, Seed(1)).unwrap();
        let base = min_singular_value(&x).unwrap();
        let mut rng = Seed(2).rng();
        let mut idx: Vec<usize> = (0..80).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        let perm = x.select_rows(&idx);
        assert!((min_singular_value(&perm).unwrap() - base).abs() < 1e-9 * base);
        let mut flipped = x.clone();
        for i in (0..80).step_by(3) {
            for v in flipped.row_mut(i) {
                *v = -*v;
            }
        }
        assert!((min_singular_value(&flipped).unwrap() - base).abs() < 1e-9 * base);
        for k in 0..5 {
            let cols: Vec<f64> = (0..6).flat_map(|_| random_unit_vector(6, &mut rng)).collect();
            let q = DMatrix::from_column_slice(6, 6, &cols).qr().q();
            let rotated = x.mul_mat(&q).unwrap();
            let v = min_singular_value(&rotated).unwrap();
            assert!((v - base).abs() < 1e-9 * base, "rotation {k}: {v} vs {base}");
        }
        assert!(base <= x.frobenius_sq() / (80.0 * 6.0));
    }

    fn grid(law: ScalarLaw, dims: Vec<usize>, aspect: Vec<f64>, trials: usize) -> SvGrid {
        SvGrid {
            dims,
            aspect,
            law,
            q: 4.0,
            trials,
            seed: Seed(3),
        }
    }

    #[test]
    fn sv_experiment_d1_and_determinism() {
        let g = grid(ScalarLaw::gaussian(), vec![1], vec![400.0], 200);
        let r = run_sv_experiment(&g).unwrap();
        let cell = &r.cells[0];
        assert_eq!((cell.d, cell.n_samples), (1, 400));
        // |mean of χ²₁ - 1| has standard deviation √(2/400)
        let sd = (2.0f64 / 400.0).sqrt();
        let med = quantile(&cell.deficits().iter().map(|v| v.abs()).collect::<Vec<_>>(), 0.5).unwrap();
        assert!(med > 0.3 * sd && med < 1.5 * sd, "{med} vs {sd}");
        assert_eq!(run_sv_experiment(&g).unwrap(), r);
        assert!(cell.lambda_min.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn gaussian_median_band() {
        let g = grid(ScalarLaw::gaussian(), vec![20], vec![100.0], 30);
        let r = run_sv_experiment(&g).unwrap();
        let med = quantile(&r.cells[0].lambda_min, 0.5).unwrap();
        assert!(med >= 1.0 - 3.0 * (20.0f64 / 2000.0).sqrt() && med <= 1.0, "{med}");
    }

    #[test]
    fn heavy_tail_deficit_decreases_along_aspect() {
        let g = SvGrid {
            q: 4.0,
            ..grid(
                ScalarLaw::pareto_for_equivalence(4.0),
                vec![10],
                vec![4.0, 16.0, 64.0],
                40,
            )
        };
        let r = run_sv_experiment(&g).unwrap();
        let meds: Vec<f64> = r.cells.iter().map(|c| quantile(&c.deficits(), 0.5).unwrap()).collect();
        assert!(meds.windows(2).all(|w| w[1] < w[0]), "{meds:?}");
    }

    #[test]
    fn grid_validation() {
        let mut g = grid(ScalarLaw::gaussian(), vec![3], vec![2.5], 1);
        assert!(g.validate().is_err());
        g.aspect = vec![2.0];
        g.trials = 0;
        assert!(g.validate().is_err());
        let heavy = SvGrid {
            q: 4.0,
            ..grid(ScalarLaw::student_t(3.0), vec![2], vec![4.0], 1)
        };
        assert!(matches!(heavy.validate(), Err(Error::Moment { .. })));
    }

    fn planted(points: &[(usize, usize)], f: impl Fn(f64) -> f64) -> SvResult {
        SvResult {
            law: ScalarLaw::gaussian(),
            q: 4.0,
            cells: points
                .iter()
                .map(|&(d, n)| {
                    let a = bound_argument(d, n);
                    SvCell {
                        d,
                        n_samples: n,
                        lambda_min: vec![1.0 - f(a); 3],
                        bound_argument: a,
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn planted_power_laws_recovered() {
        let pts = [(5, 20), (5, 80), (10, 640), (20, 2560)];
        let fit = fit_scaling_exponent(&planted(&pts, |a| a.sqrt()), 0.5, ScalingArgument::WithLog).unwrap();
        assert!((fit.exponent - 0.5).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        let fit = fit_scaling_exponent(&planted(&pts, |a| 0.3 * a), 0.5, ScalingArgument::WithLog).unwrap();
        assert!((fit.exponent - 1.0).abs() < 1e-12);
        assert!((fit.intercept - 0.3f64.ln()).abs() < 1e-12);
        let zero = planted(&pts, |_| 0.0);
        assert!(matches!(
            fit_scaling_exponent(&zero, 0.5, ScalingArgument::WithLog),
            Err(Error::Quantile(_))
        ));
        let two = planted(&pts[..2], |a| a);
        assert!(fit_scaling_exponent(&two, 0.5, ScalingArgument::Plain).is_err());
    }

    #[test]
    fn block_conclusion_trivial_and_single_block() {
        let net = NetSpec::random_directions(5, 50, Seed(4)).unwrap();
        let design = MainDesign {
            law: ScalarLaw::gaussian(),
            d: 5,
            n_samples: 500,
            n_blocks: 10,
        };
        let v = verify_block_conclusion(&net, &design, 1.0, 0.0, 20, Seed(5)).unwrap();
        assert_eq!(v.success_rate, 1.0);
        assert_eq!(v.worst_min_count, 10);
        let single = MainDesign {
            n_blocks: 1,
            n_samples: 2000,
            ..design
        };
        let v = verify_block_conclusion(&net, &single, 0.5, 0.5, 100, Seed(6)).unwrap();
        assert!(v.success_rate >= 0.95, "{}", v.success_rate);
        let bad = MainDesign {
            n_samples: 501,
            ..design
        };
        assert!(matches!(
            verify_block_conclusion(&net, &bad, 0.5, 0.1, 1, Seed(0)),
            Err(Error::Divisibility { .. })
        ));
    }

    #[test]
    fn block_conclusion_success_shrinks_with_n() {
        let net = NetSpec::random_directions(5, 100, Seed(7)).unwrap();
        let rates: Vec<f64> = [1600, 800, 400]
            .iter()
            .map(|&n| {
                let design = MainDesign {
                    law: ScalarLaw::gaussian(),
                    d: 5,
                    n_samples: n,
                    n_blocks: 20,
                };
                verify_block_conclusion(&net, &design, 0.3, 0.1, 100, Seed(8))
                    .unwrap()
                    .success_rate
            })
            .collect();
        assert!(rates[0] >= rates[1] && rates[1] >= rates[2], "{rates:?}");
        assert!(rates[0] > rates[2], "{rates:?}");
    }
}
