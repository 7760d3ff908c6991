//! Symmetric scalar laws with controlled moments, isotropic designs and
//! regression datasets.
//!
//! Standardization constants are analytic. Raw conventions:
//!
//! | kind        | raw law                                  | `E X²`        |
//! |-------------|------------------------------------------|---------------|
//! | rademacher  | ±1                                       | 1             |
//! | uniform_sym | uniform on `[-1, 1]`                     | 1/3           |
//! | gaussian    | `N(0, 1)`                                | 1             |
//! | student_t   | Student t with `dof` degrees of freedom  | `dof/(dof-2)` |
//! | pareto_sym  | `±U^{-1/α}`, `U` uniform on `(0, 1]`     | `α/(α-2)`     |

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::function::FunctionHandle;
use crate::matrix::Matrix;
use crate::rng::{Seed, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum LawKind {
    Rademacher,
    UniformSym,
    Gaussian,
    StudentT { dof: f64 },
    ParetoSym { tail_index: f64 },
}

fn default_true() -> bool {
    true
}

/// A law symmetric about zero. When `standardized`, draws are rescaled to
/// unit variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarLaw {
    #[serde(flatten)]
    pub kind: LawKind,
    #[serde(default = "default_true")]
    pub standardized: bool,
}

impl ScalarLaw {
    pub fn new(kind: LawKind) -> Self {
        Self {
            kind,
            standardized: true,
        }
    }

    pub fn raw(kind: LawKind) -> Self {
        Self {
            kind,
            standardized: false,
        }
    }

    pub fn rademacher() -> Self {
        Self::new(LawKind::Rademacher)
    }

    pub fn uniform() -> Self {
        Self::new(LawKind::UniformSym)
    }

    pub fn gaussian() -> Self {
        Self::new(LawKind::Gaussian)
    }

    pub fn student_t(dof: f64) -> Self {
        Self::new(LawKind::StudentT { dof })
    }

    pub fn pareto(tail_index: f64) -> Self {
        Self::new(LawKind::ParetoSym { tail_index })
    }

    /// Symmetric Pareto with finite `q`-th and infinite `(q+1)`-th moment.
    pub fn pareto_for_equivalence(q: f64) -> Self {
        Self::pareto(q + 0.5)
    }

    pub fn name(&self) -> String {
        let base = match self.kind {
            LawKind::Rademacher => "rademacher".to_string(),
            LawKind::UniformSym => "uniform_sym".to_string(),
            LawKind::Gaussian => "gaussian".to_string(),
            LawKind::StudentT { dof } => format!("student_t(dof={dof})"),
            LawKind::ParetoSym { tail_index } => format!("pareto_sym(tail_index={tail_index})"),
        };
        if self.standardized {
            base
        } else {
            format!("{base}[raw]")
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (label, value) = match self.kind {
            LawKind::StudentT { dof } => ("dof", dof),
            LawKind::ParetoSym { tail_index } => ("tail_index", tail_index),
            _ => return Ok(()),
        };
        if !value.is_finite() || value <= 0.0 {
            return Err(Error::Parameter(format!(
                "{label} must be a positive number, got {value}"
            )));
        }
        if self.standardized && value <= 2.0 {
            return Err(Error::Parameter(format!(
                "{label} = {value}: standardization needs {label} > 2"
            )));
        }
        Ok(())
    }

    /// Tail parameter: moments of order `>= this` are infinite.
    fn moment_limit(&self) -> f64 {
        match self.kind {
            LawKind::StudentT { dof } => dof,
            LawKind::ParetoSym { tail_index } => tail_index,
            _ => f64::INFINITY,
        }
    }

    pub fn has_finite_moment(&self, order: f64) -> bool {
        order < self.moment_limit()
    }

    /// `E|X|^p` of the raw (unscaled) law.
    fn raw_abs_moment(&self, p: f64) -> Option<f64> {
        if !self.has_finite_moment(p) {
            return None;
        }
        Some(match self.kind {
            LawKind::Rademacher => 1.0,
            LawKind::UniformSym => 1.0 / (p + 1.0),
            LawKind::Gaussian => (0.5 * p * 2f64.ln() + ln_gamma(0.5 * (p + 1.0)) - 0.5 * PI.ln()).exp(),
            LawKind::StudentT { dof } => (0.5 * p * dof.ln() + ln_gamma(0.5 * (p + 1.0)) + ln_gamma(0.5 * (dof - p))
                - 0.5 * PI.ln()
                - ln_gamma(0.5 * dof))
            .exp(),
            LawKind::ParetoSym { tail_index } => tail_index / (tail_index - p),
        })
    }

    /// Multiplier applied to raw draws.
    pub fn scale(&self) -> f64 {
        if self.standardized {
            self.raw_abs_moment(2.0).map_or(1.0, |m2| 1.0 / m2.sqrt())
        } else {
            1.0
        }
    }

    /// `E|X|^p`, or `None` when infinite.
    pub fn abs_moment(&self, p: f64) -> Option<f64> {
        self.raw_abs_moment(p).map(|m| m * self.scale().powf(p))
    }

    pub fn second_moment(&self) -> Option<f64> {
        self.abs_moment(2.0)
    }

    /// Density of `X` at `x`; `None` for the atomic Rademacher law.
    pub fn density(&self, x: f64) -> Option<f64> {
        let s = self.scale();
        let u = x / s;
        let raw = match self.kind {
            LawKind::Rademacher => return None,
            LawKind::UniformSym => {
                if u.abs() <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
            LawKind::Gaussian => (-0.5 * u * u).exp() / (2.0 * PI).sqrt(),
            LawKind::StudentT { dof } => {
                let ln_c = ln_gamma(0.5 * (dof + 1.0)) - ln_gamma(0.5 * dof) - 0.5 * (dof * PI).ln();
                (ln_c - 0.5 * (dof + 1.0) * (1.0 + u * u / dof).ln()).exp()
            }
            LawKind::ParetoSym { tail_index } => {
                if u.abs() < 1.0 {
                    0.0
                } else {
                    0.5 * tail_index * u.abs().powf(-tail_index - 1.0)
                }
            }
        };
        Some(raw / s)
    }

    /// Upper end of the support of `|X|` (infinite for unbounded laws).
    pub fn support_bound(&self) -> f64 {
        match self.kind {
            LawKind::Rademacher | LawKind::UniformSym => self.scale(),
            _ => f64::INFINITY,
        }
    }

    /// One draw; the law must have been validated.
    #[inline]
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let raw = match self.kind {
            LawKind::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            LawKind::UniformSym => rng.random_range(-1.0..=1.0),
            LawKind::Gaussian => StandardNormal.sample(rng),
            LawKind::StudentT { dof } => StudentT::new(dof).expect("validated degrees of freedom").sample(rng),
            LawKind::ParetoSym { tail_index } => {
                let u: f64 = 1.0 - rng.random::<f64>();
                let mag = u.powf(-1.0 / tail_index);
                if rng.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            }
        };
        raw * self.scale()
    }

    pub fn fill<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        if let LawKind::StudentT { dof } = self.kind {
            let t = StudentT::new(dof).expect("validated degrees of freedom");
            let s = self.scale();
            for o in out {
                *o = s * t.sample(rng);
            }
        } else {
            for o in out {
                *o = self.draw(rng);
            }
        }
    }
}

/// `m` iid draws, deterministic given `(law, m, seed)`.
pub fn sample_scalar(law: ScalarLaw, m: usize, seed: Seed) -> Result<Vec<f64>> {
    law.validate()?;
    let mut rng = seed.rng();
    let mut v = vec![0.0; m];
    law.fill(&mut rng, &mut v);
    Ok(v)
}

const ROW_CHUNK: usize = 512;

/// `N x d` design with iid coordinates; rows are isotropic because the law
/// is standardized. Chunks of rows use their own streams, so the output is
/// identical for any thread count.
pub fn sample_isotropic(law: ScalarLaw, d: usize, n: usize, seed: Seed) -> Result<Matrix> {
    check_isotropic(law, d, n)?;
    let chunks: Vec<Vec<f64>> = (0..n.div_ceil(ROW_CHUNK))
        .into_par_iter()
        .map(|c| {
            let rows = ROW_CHUNK.min(n - c * ROW_CHUNK);
            let mut rng = seed.stream(c as u64);
            let mut buf = vec![0.0; rows * d];
            law.fill(&mut rng, &mut buf);
            buf
        })
        .collect();
    Matrix::new(n, d, chunks.concat())
}

/// Sequential variant drawing from an existing trial stream.
pub fn sample_isotropic_with(law: ScalarLaw, d: usize, n: usize, rng: &mut StreamRng) -> Result<Matrix> {
    check_isotropic(law, d, n)?;
    let mut buf = vec![0.0; n * d];
    law.fill(rng, &mut buf);
    Matrix::new(n, d, buf)
}

fn check_isotropic(law: ScalarLaw, d: usize, n: usize) -> Result<()> {
    law.validate()?;
    if !law.standardized {
        return Err(Error::Parameter(format!(
            "isotropic designs need a standardized law, got {}",
            law.name()
        )));
    }
    if d == 0 || n == 0 {
        return Err(Error::Parameter(format!("empty design {n}x{d}")));
    }
    Ok(())
}

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

/// `‖X‖_q / ‖X‖_2` for the one-dimensional marginal (the only direction
/// up to sign).
pub fn estimate_norm_equiv_l(law: ScalarLaw, q: f64, mc_size: usize, seed: Seed) -> Result<Estimate> {
    let est = estimate_norm_equiv_l_directions(law, q, 1, 0, mc_size, seed)?;
    Ok(est)
}

/// Supremum over sampled directions `t ∈ S^{d-1}` of
/// `‖⟨X,t⟩‖_q / ‖⟨X,t⟩‖_2`. The coordinate axes are always included, plus
/// `extra_directions` uniformly random ones. The standard error is the
/// delta-method error of the maximizing direction.
pub fn estimate_norm_equiv_l_directions(
    law: ScalarLaw,
    q: f64,
    d: usize,
    extra_directions: usize,
    mc_size: usize,
    seed: Seed,
) -> Result<Estimate> {
    if q <= 2.0 || q.is_nan() {
        return Err(Error::Range(format!("q = {q} must exceed 2")));
    }
    if !law.has_finite_moment(q) {
        return Err(Error::Moment {
            law: law.name(),
            order: q,
        });
    }
    if mc_size < 2 {
        return Err(Error::Parameter("mc_size must be at least 2".into()));
    }
    let law = ScalarLaw {
        standardized: true,
        ..law
    };
    let x = sample_isotropic(law, d, mc_size, seed.label("design"))?;
    let mut dirs: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            e
        })
        .collect();
    let mut rng = seed.label("directions").rng();
    dirs.extend((0..extra_directions).map(|_| random_unit_vector(d, &mut rng)));

    let ratios: Vec<Estimate> = dirs
        .par_iter()
        .map(|t| {
            let v = x.mul_vec(t).expect("direction has design dimension");
            ratio_estimate(&v, q)
        })
        .collect();
    Ok(ratios
        .into_iter()
        .max_by(|a, b| a.value.total_cmp(&b.value))
        .expect("at least one direction"))
}

fn ratio_estimate(v: &[f64], q: f64) -> Estimate {
    let n = v.len() as f64;
    let aq: Vec<f64> = v.iter().map(|x| x.abs().powf(q)).collect();
    let a2: Vec<f64> = v.iter().map(|x| x * x).collect();
    let mq = aq.iter().sum::<f64>() / n;
    let m2 = a2.iter().sum::<f64>() / n;
    let r = mq.powf(1.0 / q) / m2.sqrt();
    let (mut vqq, mut v22, mut vq2) = (0.0, 0.0, 0.0);
    for (a, b) in aq.iter().zip(&a2) {
        let (da, db) = (a - mq, b - m2);
        vqq += da * da;
        v22 += db * db;
        vq2 += da * db;
    }
    let denom = (n - 1.0) * n;
    let (vqq, v22, vq2) = (vqq / denom, v22 / denom, vq2 / denom);
    let gq = r / (q * mq);
    let g2 = -r / (2.0 * m2);
    let var = gq * gq * vqq + g2 * g2 * v22 + 2.0 * gq * g2 * vq2;
    Estimate {
        value: r,
        stderr: var.max(0.0).sqrt(),
    }
}

/// Uniform point on the unit sphere of `R^d`.
pub fn random_unit_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = crate::matrix::norm2(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub law: Option<ScalarLaw>,
    pub seed: Option<u64>,
    pub noise_kind: Option<ScalarLaw>,
    pub sigma: Option<f64>,
    pub f0: Option<String>,
}

/// Design matrix plus optional targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Option<Vec<f64>>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(x: Matrix, y: Option<Vec<f64>>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(Error::Shape(format!("empty dataset {}x{}", x.nrows(), x.ncols())));
        }
        if let Some(y) = &y {
            if y.len() != x.nrows() {
                return Err(Error::Shape(format!("{} targets for {} rows", y.len(), x.nrows())));
            }
        }
        Ok(Self {
            x,
            y,
            meta: DatasetMeta::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn targets(&self) -> Result<&[f64]> {
        self.y
            .as_deref()
            .ok_or_else(|| Error::Input("dataset has no targets".into()))
    }

    /// Reads `d` feature columns followed by one target column. A header
    /// row is detected and skipped when its first field is not numeric.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
            match parsed {
                Ok(v) => rows.push(v),
                Err(_) if i == 0 => continue,
                Err(e) => return Err(Error::Input(format!("row {}: {e}", i + 1))),
            }
        }
        if rows.is_empty() {
            return Err(Error::Input("no data rows".into()));
        }
        let width = rows[0].len();
        if width < 2 {
            return Err(Error::Shape("need at least one feature and a target column".into()));
        }
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Shape("ragged CSV rows".into()));
        }
        let y = rows.iter().map(|r| r[width - 1]).collect();
        let feats: Vec<Vec<f64>> = rows
            .into_iter()
            .map(|mut r| {
                r.pop();
                r
            })
            .collect();
        Dataset::new(Matrix::from_rows(&feats)?, Some(y))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let y = self.targets()?;
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{}", j + 1)).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for (r, yi) in self.x.row_iter().zip(y) {
            let mut rec: Vec<String> = r.iter().map(f64::to_string).collect();
            rec.push(yi.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `Y = f0(X) + sigma W` with an isotropic design and noise independent of X.
#[derive(Clone, Debug)]
pub struct RegressionModel {
    pub design: ScalarLaw,
    pub target: FunctionHandle,
    pub noise: ScalarLaw,
    pub sigma: f64,
}

impl RegressionModel {
    pub fn new(design: ScalarLaw, target: FunctionHandle, noise: ScalarLaw, sigma: f64) -> Self {
        Self {
            design,
            target,
            noise,
            sigma,
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        self.noise.validate()?;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Parameter(format!("sigma = {} must be >= 0", self.sigma)));
        }
        self.target.check_dim(d)
    }

    /// Dataset drawn from a trial stream.
    pub fn sample_with(&self, n: usize, d: usize, rng: &mut StreamRng) -> Result<Dataset> {
        self.validate(d)?;
        let x = sample_isotropic_with(self.design, d, n, rng)?;
        let mut w = vec![0.0; n];
        self.noise.fill(rng, &mut w);
        self.assemble(x, w)
    }

    fn assemble(&self, x: Matrix, w: Vec<f64>) -> Result<Dataset> {
        let y = x
            .row_iter()
            .zip(&w)
            .map(|(r, wi)| self.target.eval(r) + self.sigma * wi)
            .collect();
        let mut ds = Dataset::new(x, Some(y))?;
        ds.meta = DatasetMeta {
            law: Some(self.design),
            seed: None,
            noise_kind: Some(self.noise),
            sigma: Some(self.sigma),
            f0: Some(self.target.describe()),
        };
        Ok(ds)
    }
}

/// `N` samples of `(X, f0(X) + sigma W)`, deterministic given the seed.
pub fn sample_regression(model: &RegressionModel, n: usize, d: usize, seed: Seed) -> Result<Dataset> {
    model.validate(d)?;
    let x = sample_isotropic(model.design, d, n, seed.label("design"))?;
    let w = sample_scalar(model.noise, n, seed.label("noise"))?;
    let mut ds = model.assemble(x, w)?;
    ds.meta.seed = Some(seed.0);
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn mean_se(v: &[f64]) -> (f64, f64) {
        let m = mean(v);
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (m, (var / v.len() as f64).sqrt())
    }

    fn all_laws() -> Vec<ScalarLaw> {
        vec![
            ScalarLaw::rademacher(),
            ScalarLaw::uniform(),
            ScalarLaw::gaussian(),
            ScalarLaw::student_t(6.0),
            ScalarLaw::student_t(3.0),
            ScalarLaw::pareto(4.5),
            ScalarLaw::pareto(3.0),
        ]
    }

    #[test]
    fn rademacher_support() {
        let v = sample_scalar(ScalarLaw::rademacher(), 4, Seed(1)).unwrap();
        assert!(v.iter().all(|x| *x == 1.0 || *x == -1.0));
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(sample_scalar(ScalarLaw::student_t(2.0), 3, Seed(0)).is_err());
        assert!(sample_scalar(ScalarLaw::pareto(1.5), 3, Seed(0)).is_err());
        assert!(sample_scalar(ScalarLaw::raw(LawKind::ParetoSym { tail_index: 1.5 }), 3, Seed(0)).is_ok());
        assert!(sample_scalar(ScalarLaw::raw(LawKind::StudentT { dof: -1.0 }), 3, Seed(0)).is_err());
        assert!(sample_isotropic(ScalarLaw::raw(LawKind::Gaussian), 2, 2, Seed(0)).is_err());
    }

    #[test]
    fn gaussian_second_moment() {
        let v = sample_scalar(ScalarLaw::gaussian(), 100_000, Seed(2)).unwrap();
        let m2 = mean(&v.iter().map(|x| x * x).collect::<Vec<_>>());
        assert!((0.97..=1.03).contains(&m2), "{m2}");
    }

    #[test]
    fn standardized_moments_match_analytic() {
        // E X² = 1 within 4 SE for laws with a finite fourth moment.
        for law in all_laws() {
            assert!((law.second_moment().unwrap() - 1.0).abs() < 1e-12, "{}", law.name());
            if !law.has_finite_moment(4.0) {
                continue;
            }
            let v = sample_scalar(law, 400_000, Seed(5)).unwrap();
            let sq: Vec<f64> = v.iter().map(|x| x * x).collect();
            let (m, se) = mean_se(&sq);
            assert!((m - 1.0).abs() <= 4.0 * se + 1e-12, "{}: {m} ± {se}", law.name());
        }
    }

    #[test]
    fn heavy_tails_use_batch_medians() {
        // tail index in (2, 4]: the median of batch means is a stable check
        for law in [ScalarLaw::pareto(3.0), ScalarLaw::student_t(3.0)] {
            let v = sample_scalar(law, 1_000_000, Seed(9)).unwrap();
            let mut batch: Vec<f64> = v
                .chunks(10_000)
                .map(|c| c.iter().map(|x| x * x).sum::<f64>() / c.len() as f64)
                .collect();
            batch.sort_by(f64::total_cmp);
            let med = batch[batch.len() / 2];
            // sub-exponential left tail; the median of batch means sits slightly below 1
            assert!((0.85..1.05).contains(&med), "{}: {med}", law.name());
        }
    }

    #[test]
    fn pareto_fourth_moment_diverges_with_m() {
        let law = ScalarLaw::pareto(3.0);
        assert!(law.abs_moment(4.0).is_none());
        let v = sample_scalar(law, 1_000_000, Seed(4)).unwrap();
        let m4 = |k: usize| v[..k].iter().map(|x| x.powi(4)).sum::<f64>() / k as f64;
        let small = m4(1_000);
        let large = m4(1_000_000);
        assert!(large > small, "{small} {large}");
        let m2 = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert!((m2 - 1.0).abs() < 0.2, "{m2}");
    }

    #[test]
    fn symmetry_of_all_laws() {
        for law in all_laws() {
            let v = sample_scalar(law, 1_000_000, Seed(12)).unwrap();
            let (m, se) = mean_se(&v);
            assert!(m.abs() < 4.0 * se, "{}: mean {m} se {se}", law.name());
        }
    }

    #[test]
    fn isotropic_designs() {
        let x = sample_isotropic(ScalarLaw::rademacher(), 1, 5, Seed(0)).unwrap();
        assert_eq!((x.nrows(), x.ncols()), (5, 1));
        assert!(x.as_slice().iter().all(|v| v.abs() == 1.0));

        let x = sample_isotropic(ScalarLaw::gaussian(), 3, 100_000, Seed(1)).unwrap();
        let g = x.gram() / 100_000.0;
        for a in 0..3 {
            for b in 0..3 {
                let target = if a == b { 1.0 } else { 0.0 };
                assert!((g[(a, b)] - target).abs() < 0.05);
            }
        }

        let x = sample_isotropic(ScalarLaw::student_t(6.0), 2, 100_000, Seed(2)).unwrap();
        let prod: Vec<f64> = x.row_iter().map(|r| r[0] * r[1]).collect();
        let (m, se) = mean_se(&prod);
        assert!(m.abs() < 3.0 * se);
    }

    #[test]
    fn isotropic_design_thread_independent() {
        let run = |t| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .unwrap()
                .install(|| sample_isotropic(ScalarLaw::pareto(4.5), 3, 3000, Seed(77)).unwrap())
        };
        assert_eq!(run(1), run(8));
    }

    #[test]
    fn norm_equivalence_constants() {
        let r = estimate_norm_equiv_l(ScalarLaw::rademacher(), 4.0, 1000, Seed(0)).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12);
        let g = estimate_norm_equiv_l(ScalarLaw::gaussian(), 4.0, 1_000_000, Seed(1)).unwrap();
        assert!((g.value - 3f64.powf(0.25)).abs() < 0.02, "{g:?}");
        assert!(g.stderr > 0.0 && g.stderr < 0.01);
        assert!(matches!(
            estimate_norm_equiv_l(ScalarLaw::student_t(3.0), 4.0, 100, Seed(0)),
            Err(Error::Moment { .. })
        ));
        // sampled directions in d = 5 for gaussian coordinates: every direction is gaussian
        let g5 = estimate_norm_equiv_l_directions(ScalarLaw::gaussian(), 4.0, 5, 10, 200_000, Seed(3)).unwrap();
        assert!((g5.value - 3f64.powf(0.25)).abs() < 0.03, "{g5:?}");
    }

    #[test]
    fn analytic_abs_moments() {
        let g = ScalarLaw::gaussian();
        assert!((g.abs_moment(4.0).unwrap() - 3.0).abs() < 1e-10);
        assert!((g.abs_moment(6.0).unwrap() - 15.0).abs() < 1e-9);
        let t = ScalarLaw::raw(LawKind::StudentT { dof: 5.0 });
        assert!((t.abs_moment(2.0).unwrap() - 5.0 / 3.0).abs() < 1e-10);
        let u = ScalarLaw::uniform();
        assert!((u.abs_moment(4.0).unwrap() - 9.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn regression_noiseless_and_noisy() {
        let f0 = FunctionHandle::linear(0, vec![2.0, 0.0]);
        let m = RegressionModel::new(ScalarLaw::gaussian(), f0.clone(), ScalarLaw::gaussian(), 0.0);
        let ds = sample_regression(&m, 50, 2, Seed(3)).unwrap();
        for (r, y) in ds.x.row_iter().zip(ds.y.as_ref().unwrap()) {
            assert_eq!(*y, f0.eval(r));
        }

        let m = RegressionModel::new(ScalarLaw::gaussian(), f0.clone(), ScalarLaw::gaussian(), 1.0);
        let ds = sample_regression(&m, 100_000, 2, Seed(4)).unwrap();
        let res: Vec<f64> =
            ds.x.row_iter()
                .zip(ds.y.as_ref().unwrap())
                .map(|(r, y)| y - 2.0 * r[0])
                .collect();
        let mu = mean(&res);
        let var = res.iter().map(|e| (e - mu).powi(2)).sum::<f64>() / res.len() as f64;
        assert!((0.97..=1.03).contains(&var), "{var}");

        let bad = RegressionModel::new(ScalarLaw::gaussian(), f0, ScalarLaw::gaussian(), 1.0);
        assert!(matches!(sample_regression(&bad, 10, 3, Seed(0)), Err(Error::Shape(_))));
    }

    #[test]
    fn heavy_noise_kurtosis_grows() {
        let f0 = FunctionHandle::linear(0, vec![1.0]);
        let m = RegressionModel::new(ScalarLaw::gaussian(), f0, ScalarLaw::student_t(3.0), 1.0);
        let ds = sample_regression(&m, 1_000_000, 1, Seed(8)).unwrap();
        let res: Vec<f64> = ds.x.row_iter().zip(ds.y.unwrap()).map(|(r, y)| y - r[0]).collect();
        let kurt = |k: usize| {
            let v = &res[..k];
            let m2 = v.iter().map(|e| e * e).sum::<f64>() / k as f64;
            let m4 = v.iter().map(|e| e.powi(4)).sum::<f64>() / k as f64;
            m4 / (m2 * m2) - 3.0
        };
        assert!(kurt(1_000_000) > kurt(1_000));
    }

    #[test]
    fn csv_round_trip() {
        let f0 = FunctionHandle::linear(0, vec![1.0, -1.0]);
        let m = RegressionModel::new(ScalarLaw::gaussian(), f0, ScalarLaw::gaussian(), 0.5);
        let ds = sample_regression(&m, 20, 2, Seed(1)).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(&buf[..]).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
    }

    #[test]
    fn law_config_shape() {
        let law: ScalarLaw = toml::from_str("kind = \"student_t\"\nparams = { dof = 6.0 }").unwrap();
        assert_eq!(law, ScalarLaw::student_t(6.0));
        let law: ScalarLaw = toml::from_str("kind = \"rademacher\"\nstandardized = false").unwrap();
        assert_eq!(law, ScalarLaw::raw(LawKind::Rademacher));
        let s = toml::to_string(&ScalarLaw::pareto(4.5)).unwrap();
        let back: ScalarLaw = toml::from_str(&s).unwrap();
        assert_eq!(back, ScalarLaw::pareto(4.5));
    }
}
