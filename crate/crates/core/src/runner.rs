//! Experiment orchestration: configuration, dispatch, persistence and
//! reports.
//!
//! A configuration file looks like
//!
//! ```toml
//! experiment = "sv"
//! master_seed = 7
//! trials = 50
//! threads = "auto"
//!
//! [params]
//! dims = [5, 10]
//! aspect = [4.0, 16.0]
//! q = 4.0
//! law = { kind = "pareto_sym", params = { tail_index = 4.5 } }
//! ```
//!
//! Every run is deterministic given the configuration: trial `t` of every
//! experiment reads randomness only from streams derived from
//! `(master_seed, experiment, t)`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::blocks::{
    adversarial_min_good_blocks, min_good_blocks_over_net, partition, rademacher_sup_linear_ball,
    solve_critical_radius_mc, NetSpec,
};
use crate::distributions::{sample_isotropic, sample_regression, Dataset, RegressionModel, ScalarLaw};
use crate::error::{Error, Result};
use crate::experiments::{
    fit_scaling_exponent, quantile, run_sv_experiment, verify_block_conclusion, MainDesign, ScalingArgument, SvGrid,
};
use crate::function::FunctionHandle;
use crate::learners::{
    empirical_risk, erm_finite, erm_linear_ball, paired_selection_test, r1_estimate, tournament_select, R1Params,
};
use crate::rng::{try_par_trials, Seed};
use crate::slb::{slb_params, trimmed_mean_trials, MomentProfile, ScaledLaw, SlbConstants};

pub const VERSION: &str = concat!("smallball ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Slb,
    Blocks,
    Sv,
    VerifyMain,
    Erm,
    Tournament,
    FixedPoint,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::Slb,
        Experiment::Blocks,
        Experiment::Sv,
        Experiment::VerifyMain,
        Experiment::Erm,
        Experiment::Tournament,
        Experiment::FixedPoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Slb => "slb",
            Experiment::Blocks => "blocks",
            Experiment::Sv => "sv",
            Experiment::VerifyMain => "verify_main",
            Experiment::Erm => "erm",
            Experiment::Tournament => "tournament",
            Experiment::FixedPoint => "fixed_point",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Threads {
    #[default]
    #[serde(with = "auto")]
    Auto,
    Count(usize),
}

mod auto {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("auto")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "auto" {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!(
                "expected \"auto\" or a positive integer, got {s:?}"
            )))
        }
    }
}

fn default_trials() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub threads: Threads,
    #[serde(default = "empty_table")]
    pub params: toml::Table,
}

fn empty_table() -> toml::Table {
    toml::Table::new()
}

fn de_path<T: DeserializeOwned>(value: toml::Value, prefix: &str) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string();
        let path = if inner == "." || inner.is_empty() {
            prefix.to_string()
        } else {
            format!("{prefix}.{inner}")
        };
        Error::config(path, e.into_inner().to_string())
    })
}

impl ExperimentConfig {
    /// Parses a configuration document. `experiment` may be omitted when
    /// `fallback` names it.
    pub fn from_toml(text: &str, fallback: Option<Experiment>) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<document>", e.message().to_string()))?;
        match (table.get("experiment"), fallback) {
            (None, Some(exp)) => {
                table.insert("experiment".into(), toml::Value::String(exp.name().into()));
            }
            (Some(v), Some(exp)) if v.as_str() != Some(exp.name()) => {
                return Err(Error::config(
                    "experiment",
                    format!("file declares {v}, command expects \"{}\"", exp.name()),
                ));
            }
            _ => {}
        }
        let cfg: Self = de_path(toml::Value::Table(table), "config").map_err(|e| match e {
            Error::Config { path, message } => Error::Config {
                path: path.trim_start_matches("config.").to_string(),
                message,
            },
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, fallback: Option<Experiment>) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::from_toml(&text, fallback)
    }

    /// Normalized TOML rendering; this is the config echo in results.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn set_param(&mut self, key: &str, value: toml::Value) {
        self.params.insert(key.to_string(), value);
    }

    pub fn seed(&self) -> Seed {
        Seed(self.master_seed).label(self.experiment.name())
    }

    /// Schema check before any compute.
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("trials", "must be at least 1"));
        }
        if self.threads == Threads::Count(0) {
            return Err(Error::config("threads", "must be at least 1 or \"auto\""));
        }
        match self.experiment {
            Experiment::Slb => self.params::<SlbConfig>()?.validate(),
            Experiment::Blocks => self.params::<BlocksConfig>()?.validate(),
            Experiment::Sv => self.params::<SvConfig>()?.validate(self.trials),
            Experiment::VerifyMain => self.params::<VerifyConfig>()?.validate(),
            Experiment::Erm => self.params::<ErmConfig>()?.validate(),
            Experiment::Tournament => self.params::<TournamentConfig>()?.validate(),
            Experiment::FixedPoint => self.params::<FixedPointConfig>()?.validate(),
        }
    }

    fn params<T: DeserializeOwned>(&self) -> Result<T> {
        de_path(toml::Value::Table(self.params.clone()), "params")
    }
}

fn cfg_err(field: &str, message: impl Into<String>) -> Error {
    Error::config(format!("params.{field}"), message)
}

fn check_law(field: &str, law: &ScalarLaw) -> Result<()> {
    law.validate().map_err(|e| cfg_err(field, e.to_string()))
}

fn check_xi(field: &str, xi: f64, closed_one: bool) -> Result<()> {
    let ok = xi > 0.0 && (xi < 1.0 || (closed_one && xi == 1.0));
    if ok {
        Ok(())
    } else {
        Err(cfg_err(field, format!("{xi} must lie in (0, 1)")))
    }
}

fn check_divides(samples: usize, blocks: usize, samples_field: &str) -> Result<()> {
    if blocks == 0 || samples == 0 || samples % blocks != 0 {
        return Err(cfg_err(
            &format!("{{n_blocks, {samples_field}}}"),
            format!("n_blocks = {blocks} must be positive and divide {samples_field} = {samples}"),
        ));
    }
    Ok(())
}

fn gaussian() -> ScalarLaw {
    ScalarLaw::gaussian()
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlbConfig {
    pub law: ScalarLaw,
    #[serde(default = "one")]
    pub scale: f64,
    pub xi: f64,
    pub m: Vec<usize>,
    /// Fixed trim budget for every `m`.
    pub ell: Option<usize>,
    /// `ℓ = ⌊ratio · m⌋`
    pub ell_ratio: Option<f64>,
    /// `ℓ` and `k` from the parameter formulas.
    pub profile: Option<MomentProfile>,
    #[serde(default)]
    pub constants: SlbConstants,
}

impl SlbConfig {
    fn validate(&self) -> Result<()> {
        check_law("law", &self.law)?;
        check_xi("xi", self.xi, false)?;
        if self.m.is_empty() || self.m.contains(&0) {
            return Err(cfg_err("m", "needs at least one positive sample size"));
        }
        let chosen = [self.ell.is_some(), self.ell_ratio.is_some(), self.profile.is_some()]
            .iter()
            .filter(|b| **b)
            .count();
        if chosen != 1 {
            return Err(cfg_err("{ell, ell_ratio, profile}", "exactly one must be given"));
        }
        if let Some(ell) = self.ell {
            if let Some(&m) = self.m.iter().find(|&&m| ell > m) {
                return Err(cfg_err("ell", format!("{ell} exceeds m = {m}")));
            }
        }
        if let Some(r) = self.ell_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(cfg_err("ell_ratio", format!("{r} outside [0, 1]")));
            }
        }
        if let Some(p) = &self.profile {
            p.validate().map_err(|e| cfg_err("profile", e.to_string()))?;
        }
        if !(self.scale > 0.0) {
            return Err(cfg_err("scale", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetConfig {
    /// `size` uniform random directions.
    Random,
    /// Greedy `rho`-separated subset of `size` random directions.
    Greedy { rho: f64 },
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::Random
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub iterations: usize,
    #[serde(default = "default_starts")]
    pub starts: usize,
}

fn default_starts() -> usize {
    4
}

fn default_eta() -> f64 {
    0.1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlocksConfig {
    pub d: usize,
    pub n_samples: usize,
    pub n_blocks: usize,
    pub xi: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    pub net_size: usize,
    #[serde(default = "gaussian")]
    pub law: ScalarLaw,
    #[serde(default)]
    pub net: NetConfig,
    pub attack: Option<AttackConfig>,
}

impl BlocksConfig {
    fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(cfg_err("d", "must be positive"));
        }
        check_divides(self.n_samples, self.n_blocks, "n_samples")?;
        check_xi("xi", self.xi, true)?;
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(cfg_err("eta", "must lie in [0, 1]"));
        }
        if self.net_size == 0 {
            return Err(cfg_err("net_size", "must be positive"));
        }
        if let NetConfig::Greedy { rho } = self.net {
            if !(rho > 0.0) {
                return Err(cfg_err("net.rho", "must be positive"));
            }
        }
        check_law("law", &self.law)
    }

    fn build_net(&self, seed: Seed) -> Result<NetSpec> {
        match self.net {
            NetConfig::Random => NetSpec::random_directions(self.d, self.net_size, seed),
            NetConfig::Greedy { rho } => NetSpec::greedy_sphere(self.d, self.net_size, rho, seed),
        }
    }
}

fn default_level() -> f64 {
    0.5
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvConfig {
    pub dims: Vec<usize>,
    pub aspect: Vec<f64>,
    pub law: ScalarLaw,
    pub q: f64,
    #[serde(default = "default_level")]
    pub quantile: f64,
}

impl SvConfig {
    fn grid(&self, trials: usize, seed: Seed) -> SvGrid {
        SvGrid {
            dims: self.dims.clone(),
            aspect: self.aspect.clone(),
            law: self.law,
            q: self.q,
            trials,
            seed,
        }
    }

    fn validate(&self, trials: usize) -> Result<()> {
        check_law("law", &self.law)?;
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(cfg_err("quantile", "must lie in (0, 1)"));
        }
        self.grid(trials, Seed(0)).validate().map_err(|e| {
            let field = match &e {
                Error::Moment { .. } | Error::Range(_) => "{law, q}",
                _ => "{dims, aspect}",
            };
            cfg_err(field, e.to_string())
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub d: usize,
    pub n_samples: Vec<usize>,
    pub n_blocks: usize,
    pub xi: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    pub net_size: usize,
    #[serde(default = "gaussian")]
    pub law: ScalarLaw,
}

impl VerifyConfig {
    fn validate(&self) -> Result<()> {
        if self.d == 0 || self.net_size == 0 {
            return Err(cfg_err("{d, net_size}", "must be positive"));
        }
        if self.n_samples.is_empty() {
            return Err(cfg_err("n_samples", "needs at least one value"));
        }
        for &n in &self.n_samples {
            check_divides(n, self.n_blocks, "n_samples")?;
        }
        check_xi("xi", self.xi, true)?;
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(cfg_err("eta", "must lie in [0, 1]"));
        }
        check_law("law", &self.law)
    }
}

/// An affine function `x ↦ ⟨weights, x⟩ + intercept`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandleConfig {
    pub weights: Vec<f64>,
    #[serde(default)]
    pub intercept: f64,
}

impl HandleConfig {
    fn handle(&self, id: usize) -> FunctionHandle {
        FunctionHandle::affine(id, self.weights.clone(), self.intercept)
    }
}

fn handles_of(cfgs: &[HandleConfig]) -> Vec<FunctionHandle> {
    cfgs.iter().enumerate().map(|(i, h)| h.handle(i)).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "gaussian")]
    pub design: ScalarLaw,
    pub target: HandleConfig,
    #[serde(default = "gaussian")]
    pub noise: ScalarLaw,
    #[serde(default = "one")]
    pub sigma: f64,
}

impl ModelConfig {
    fn model(&self) -> RegressionModel {
        RegressionModel::new(self.design, self.target.handle(usize::MAX), self.noise, self.sigma)
    }

    fn dim(&self) -> usize {
        self.target.weights.len()
    }

    fn validate(&self, field: &str) -> Result<()> {
        check_law(&format!("{field}.design"), &self.design)?;
        check_law(&format!("{field}.noise"), &self.noise)?;
        if self.target.weights.is_empty() {
            return Err(cfg_err(&format!("{field}.target.weights"), "must be nonempty"));
        }
        if !(self.sigma >= 0.0) {
            return Err(cfg_err(&format!("{field}.sigma"), "must be >= 0"));
        }
        Ok(())
    }
}

/// Either a CSV file (features then target) or a generating model.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: Option<PathBuf>,
    pub model: Option<ModelConfig>,
    pub n_samples: Option<usize>,
}

impl DataConfig {
    fn validate(&self) -> Result<usize> {
        match (&self.dataset, &self.model, self.n_samples) {
            (Some(_), None, None) => Ok(0),
            (None, Some(m), Some(n)) if n > 0 => {
                m.validate("data.model")?;
                Ok(m.dim())
            }
            _ => Err(cfg_err(
                "data",
                "give either `dataset`, or `model` together with a positive `n_samples`",
            )),
        }
    }

    fn load(&self, seed: Seed) -> Result<Dataset> {
        match (&self.dataset, &self.model, self.n_samples) {
            (Some(path), _, _) => {
                let file = std::fs::File::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
                Dataset::read_csv(file)
            }
            (None, Some(m), Some(n)) => sample_regression(&m.model(), n, m.dim(), seed),
            _ => unreachable!("validated"),
        }
    }

    fn is_file(&self) -> bool {
        self.dataset.is_some()
    }
}

fn check_handles(field: &str, handles: &[HandleConfig], dim: usize) -> Result<()> {
    if handles.is_empty() {
        return Err(cfg_err(field, "needs at least one handle"));
    }
    let d = handles[0].weights.len();
    if d == 0 || handles.iter().any(|h| h.weights.len() != d) || (dim > 0 && d != dim) {
        return Err(cfg_err(field, "handles must share the data dimension"));
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassConfig {
    Finite { handles: Vec<HandleConfig> },
    LinearBall { radius: f64 },
}

fn default_tol() -> f64 {
    1e-8
}

fn default_max_iter() -> usize {
    100_000
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErmConfig {
    pub data: DataConfig,
    pub class: ClassConfig,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

impl ErmConfig {
    fn validate(&self) -> Result<()> {
        let dim = self.data.validate()?;
        match &self.class {
            ClassConfig::Finite { handles } => check_handles("class.handles", handles, dim)?,
            ClassConfig::LinearBall { radius } => {
                if !(*radius >= 0.0) {
                    return Err(cfg_err("class.radius", "must be >= 0"));
                }
            }
        }
        if !(self.tol > 0.0) {
            return Err(cfg_err("tol", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TournamentConfig {
    pub data: DataConfig,
    pub handles: Vec<HandleConfig>,
    pub n_blocks: usize,
    #[serde(default)]
    pub draw_margin: f64,
    /// Index of the best handle, for selection frequencies.
    pub f_star: Option<usize>,
}

impl TournamentConfig {
    fn validate(&self) -> Result<()> {
        let dim = self.data.validate()?;
        check_handles("handles", &self.handles, dim)?;
        if let Some(n) = self.data.n_samples {
            check_divides(n, self.n_blocks, "data.n_samples")?;
        } else if self.n_blocks == 0 {
            return Err(cfg_err("n_blocks", "must be positive"));
        }
        if !(self.draw_margin >= 0.0) {
            return Err(cfg_err("draw_margin", "must be >= 0"));
        }
        if self.f_star.is_some_and(|i| i >= self.handles.len()) {
            return Err(cfg_err("f_star", "index outside the class"));
        }
        Ok(())
    }
}

fn default_initial_draws() -> usize {
    200
}

fn default_max_draws() -> usize {
    6400
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FixedPointConfig {
    /// Smallest `r` with `(r/N) E‖Σ εᵢ X_i‖ <= r²/budget_scale`.
    CriticalRadius {
        d: usize,
        n_samples: usize,
        #[serde(default = "gaussian")]
        law: ScalarLaw,
        budget_scale: f64,
        bracket: (f64, f64),
        #[serde(default = "default_tol")]
        tol: f64,
        #[serde(default = "default_initial_draws")]
        initial_draws: usize,
        #[serde(default = "default_max_draws")]
        max_draws: usize,
    },
    /// Multiplier radius of a finite class around `handles[f_star]`.
    R1 {
        model: ModelConfig,
        handles: Vec<HandleConfig>,
        f_star: usize,
        delta: f64,
        rho: f64,
        n_samples: usize,
        mc: usize,
        bracket: (f64, f64),
        #[serde(default = "default_tol")]
        tol: f64,
    },
}

fn check_bracket(field: &str, (lo, hi): (f64, f64), tol: f64) -> Result<()> {
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(cfg_err(field, format!("({lo}, {hi}) must satisfy 0 < lo < hi")));
    }
    if !(tol > 0.0 && tol < 1.0) {
        return Err(cfg_err("tol", "must lie in (0, 1)"));
    }
    Ok(())
}

impl FixedPointConfig {
    fn validate(&self) -> Result<()> {
        match self {
            FixedPointConfig::CriticalRadius {
                d,
                n_samples,
                law,
                budget_scale,
                bracket,
                tol,
                initial_draws,
                max_draws,
            } => {
                if *d == 0 || *n_samples == 0 {
                    return Err(cfg_err("{d, n_samples}", "must be positive"));
                }
                check_law("law", law)?;
                if !(*budget_scale > 0.0) {
                    return Err(cfg_err("budget_scale", "must be positive"));
                }
                if *initial_draws == 0 || max_draws < initial_draws {
                    return Err(cfg_err(
                        "{initial_draws, max_draws}",
                        "need 0 < initial_draws <= max_draws",
                    ));
                }
                check_bracket("bracket", *bracket, *tol)
            }
            FixedPointConfig::R1 {
                model,
                handles,
                f_star,
                delta,
                rho,
                n_samples,
                mc,
                bracket,
                tol,
            } => {
                model.validate("model")?;
                check_handles("handles", handles, model.dim())?;
                if *f_star >= handles.len() {
                    return Err(cfg_err("f_star", "index outside the class"));
                }
                if !(*delta > 0.0 && *delta < 1.0) {
                    return Err(cfg_err("delta", "must lie in (0, 1)"));
                }
                if *delta * (*mc as f64) < 20.0 {
                    return Err(cfg_err("{delta, mc}", "delta * mc must be at least 20"));
                }
                if !(*rho > 0.0) || *n_samples == 0 {
                    return Err(cfg_err("{rho, n_samples}", "must be positive"));
                }
                check_bracket("bracket", *bracket, *tol)
            }
        }
    }
}

/// One CSV cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Bool(bool),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            // Debug keeps a decimal point or exponent, so floats stay floats
            Cell::Float(v) => format!("{v:?}"),
            Cell::Bool(v) => v.to_string(),
            Cell::Text(v) => v.clone(),
        }
    }

    fn parse(s: &str) -> Cell {
        if let Ok(v) = s.parse::<i64>() {
            Cell::Int(v)
        } else if let Ok(v) = s.parse::<f64>() {
            Cell::Float(v)
        } else if let Ok(v) = s.parse::<bool>() {
            Cell::Bool(v)
        } else {
            Cell::Text(s.to_string())
        }
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub version: String,
    pub experiment: Experiment,
    /// Normalized TOML of the configuration that produced the result.
    pub config: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub summary: serde_json::Value,
    pub elapsed_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Markdown,
}

struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl Table {
    fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

/// Runs the configured experiment on a pool of `config.threads` workers.
pub fn run(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Threads::Count(k) = config.threads {
        builder = builder.num_threads(k);
    }
    let pool = builder.build().map_err(|e| Error::Input(format!("thread pool: {e}")))?;
    let start = Instant::now();
    let (table, summary) = pool
        .install(|| dispatch(config))
        .map_err(|e| e.context(format!("{} experiment", config.experiment.name())))?;
    if table.rows.is_empty() {
        return Err(Error::Input("experiment produced no rows".into()));
    }
    Ok(ExperimentResult {
        version: VERSION.to_string(),
        experiment: config.experiment,
        config: config.to_toml(),
        columns: table.columns,
        rows: table.rows,
        summary,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}

fn dispatch(config: &ExperimentConfig) -> Result<(Table, serde_json::Value)> {
    let seed = config.seed();
    let trials = config.trials;
    match config.experiment {
        Experiment::Slb => run_slb(&config.params()?, trials, seed),
        Experiment::Blocks => run_blocks(&config.params()?, trials, seed),
        Experiment::Sv => run_sv(&config.params()?, trials, seed),
        Experiment::VerifyMain => run_verify(&config.params()?, trials, seed),
        Experiment::Erm => run_erm(&config.params()?, trials, seed),
        Experiment::Tournament => run_tournament(&config.params()?, trials, seed),
        Experiment::FixedPoint => run_fixed_point(&config.params()?, trials, seed),
    }
}

fn rate_se(k: usize, n: usize) -> (f64, f64) {
    let p = k as f64 / n as f64;
    (p, (p * (1.0 - p) / n as f64).sqrt())
}

fn run_slb(cfg: &SlbConfig, trials: usize, seed: Seed) -> Result<(Table, serde_json::Value)> {
    let sampler = ScaledLaw::new(cfg.law, cfg.scale);
    let threshold = (1.0 - cfg.xi) * sampler.second_moment()?;
    let mut table = Table::new(&["m", "ell", "trial", "trimmed_mean", "failed"]);
    let mut per_m = Vec::new();
    for &m in &cfg.m {
        let (ell, k) = if let Some(ell) = cfg.ell {
            (ell, None)
        } else if let Some(r) = cfg.ell_ratio {
            (((r * m as f64) * (1.0 + 8.0 * f64::EPSILON)).floor() as usize, None)
        } else {
            let p = slb_params(cfg.profile.as_ref().expect("validated"), m, cfg.xi, cfg.constants)?;
            (p.ell, Some(p.k))
        };
        let values = trimmed_mean_trials(&sampler, m, ell, trials, seed.derive(m as u64))?;
        let mut failures = 0;
        for (t, v) in values.iter().enumerate() {
            let failed = *v < threshold;
            failures += failed as usize;
            table.push(vec![m.into(), ell.into(), t.into(), (*v).into(), failed.into()]);
        }
        let (rate, se) = rate_se(failures, trials);
        per_m.push(json!({
            "m": m, "ell": ell, "k": k, "failure_rate": rate, "stderr": se,
            "probability_bound": k.map(|k| 2.0 * (-k).exp()),
        }));
    }
    let rates: Vec<f64> = per_m.iter().map(|v| v["failure_rate"].as_f64().unwrap()).collect();
    Ok((
        table,
        json!({
            "law": cfg.law.name(),
            "xi": cfg.xi,
            "threshold": threshold,
            "per_m": per_m,
            "nonincreasing_in_m": rates.windows(2).all(|w| w[1] <= w[0]),
        }),
    ))
}

fn run_blocks(cfg: &BlocksConfig, trials: usize, seed: Seed) -> Result<(Table, serde_json::Value)> {
    let net = cfg.build_net(seed.label("net"))?;
    let part = partition(cfg.n_samples, cfg.n_blocks)?;
    let required = ((1.0 - cfg.eta) * cfg.n_blocks as f64 * (1.0 - 1e-12)).ceil() as usize;
    let design_seed = seed.label("design");
    let results = try_par_trials(design_seed, trials, |t, _| -> Result<(usize, usize, Option<usize>)> {
        let x = sample_isotropic(cfg.law, cfg.d, cfg.n_samples, design_seed.derive(t as u64))?;
        let nm = min_good_blocks_over_net(&net, &x, &part, cfg.xi)?;
        let attack = match &cfg.attack {
            Some(a) => {
                let mut starts = vec![net.points[nm.argmin].affine_parts().expect("linear").0.to_vec()];
                starts.extend(
                    net.points
                        .iter()
                        .take(a.starts.saturating_sub(1))
                        .map(|h| h.affine_parts().expect("linear").0.to_vec()),
                );
                Some(adversarial_min_good_blocks(&x, &part, cfg.xi, cfg.eta, &starts, a.iterations)?.min_count)
            }
            None => None,
        };
        Ok((nm.min_count, nm.argmin, attack))
    })?;
    let mut cols = vec!["trial", "min_count", "argmin_id"];
    if cfg.attack.is_some() {
        cols.push("attack_min_count");
    }
    let mut table = Table::new(&cols);
    for (t, (c, a, atk)) in results.iter().enumerate() {
        let mut row = vec![t.into(), (*c).into(), (*a).into()];
        if let Some(v) = atk {
            row.push((*v).into());
        }
        table.push(row);
    }
    let successes = results.iter().filter(|r| r.0 >= required).count();
    let (rate, se) = rate_se(successes, trials);
    let disagreements = results.iter().filter(|r| r.2.is_some_and(|a| a != r.0)).count();
    Ok((
        table,
        json!({
            "net_points": net.len(),
            "coverage_radius": net.coverage_radius,
            "required_good_blocks": required,
            "success_rate": rate,
            "stderr": se,
            "worst_min_count": results.iter().map(|r| r.0).min(),
            "attack_disagreements": cfg.attack.as_ref().map(|_| disagreements),
            "attack_worst_min_count": results.iter().filter_map(|r| r.2).min(),
        }),
    ))
}

fn fit_json(result: &crate::experiments::SvResult, level: f64, arg: ScalingArgument) -> serde_json::Value {
    match fit_scaling_exponent(result, level, arg) {
        Ok(f) => json!({"exponent": f.exponent, "intercept": f.intercept, "r2": f.r2}),
        Err(e) => json!({"error": e.to_string()}),
    }
}

fn run_sv(cfg: &SvConfig, trials: usize, seed: Seed) -> Result<(Table, serde_json::Value)> {
    let result = run_sv_experiment(&cfg.grid(trials, seed))?;
    let mut table = Table::new(&["d", "N", "trial", "lambda_min"]);
    let mut cells = Vec::new();
    let (mut within, mut total) = (0usize, 0usize);
    for c in &result.cells {
        let band = 3.0 * (c.d as f64 / c.n_samples as f64).sqrt();
        for (t, l) in c.lambda_min.iter().enumerate() {
            table.push(vec![c.d.into(), c.n_samples.into(), t.into(), (*l).into()]);
            within += (1.0 - l <= band) as usize;
            total += 1;
        }
        cells.push(json!({
            "d": c.d, "N": c.n_samples,
            "median_lambda_min": quantile(&c.lambda_min, 0.5)?,
            "deficit_quantile": quantile(&c.deficits(), cfg.quantile)?,
            "bound_argument": c.bound_argument,
        }));
    }
    Ok((
        table,
        json!({
            "law": cfg.law.name(),
            "q": cfg.q,
            "target_exponent": 1.0 - 2.0 / cfg.q,
            "quantile": cfg.quantile,
            "fit_with_log": fit_json(&result, cfg.quantile, ScalingArgument::WithLog),
            "fit_without_log": fit_json(&result, cfg.quantile, ScalingArgument::Plain),
            "fraction_within_3_sqrt_d_over_n": within as f64 / total as f64,
            "cells": cells,
        }),
    ))
}

fn run_verify(cfg: &VerifyConfig, trials: usize, seed: Seed) -> Result<(Table, serde_json::Value)> {
    let net = NetSpec::random_directions(cfg.d, cfg.net_size, seed.label("net"))?;
    let mut table = Table::new(&["N", "trial", "min_count", "argmin_id", "success"]);
    let mut per_n = Vec::new();
    for &n in &cfg.n_samples {
        let design = MainDesign {
            law: cfg.law,
            d: cfg.d,
            n_samples: n,
            n_blocks: cfg.n_blocks,
        };
        let v = verify_block_conclusion(
            &net,
            &design,
            cfg.xi,
            cfg.eta,
            trials,
            seed.label("design").derive(n as u64),
        )?;
        for (t, (c, a)) in v.min_counts.iter().zip(&v.argmins).enumerate() {
            table.push(vec![
                n.into(),
                t.into(),
                (*c).into(),
                (*a).into(),
                (*c >= v.required).into(),
            ]);
        }
        per_n.push(json!({"N": n, "success_rate": v.success_rate, "worst_min_count": v.worst_min_count, "required": v.required}));
    }
    let rates: Vec<f64> = per_n.iter().map(|v| v["success_rate"].as_f64().unwrap()).collect();
    Ok((
        table,
        json!({
            "per_n": per_n,
            "nonincreasing_as_n_shrinks": rates.windows(2).all(|w| w[1] <= w[0]),
        }),
    ))
}

fn trial_count(data: &DataConfig, trials: usize) -> usize {
    if data.is_file() {
        1
    } else {
        trials
    }
}

fn run_erm(cfg: &ErmConfig, trials: usize, seed: Seed) -> Result<(Table, serde_json::Value)> {
    let trials = trial_count(&cfg.data, trials);
    match &cfg.class {
        ClassConfig::Finite { handles } => {
            let class = handles_of(handles);
            let picks = try_par_trials(seed, trials, |t, _| -> Result<(usize, f64)> {
                let data = cfg.data.load(seed.derive(t as u64))?;
                let id = erm_finite(&class, &data)?;
                Ok((id, empirical_risk(&class[id], &data)?))
            })?;
            let mut table = Table::new(&["trial", "selected", "empirical_risk"]);
            let mut freq = vec![0usize; class.len()];
            for (t, (id, risk)) in picks.iter().enumerate() {
                table.push(vec![t.into(), (*id).into(), (*risk).into()]);
                freq[*id] += 1;
            }
            Ok((table, json!({"class": "finite", "selection_counts": freq})))
        }
        ClassConfig::LinearBall { radius } => {
            let sols = try_par_trials(seed, trials, |t, _| {
                let data = cfg.data.load(seed.derive(t as u64))?;
                erm_linear_ball(&data, *radius, cfg.tol, cfg.max_iter)
            })?;
            let d = sols[0].weights.len();
            let names: Vec<String> = (1..=d).map(|j| format!("w{j}")).collect();
            let mut cols = vec!["trial", "objective", "kkt_residual", "iterations", "norm"];
            cols.extend(names.iter().map(String::as_str));
            let mut table = Table::new(&cols);
            for (t, s) in sols.iter().enumerate() {
                let mut row = vec![
                    t.into(),
                    s.objective.into(),
                    s.kkt_residual.into(),
                    s.iterations.into(),
                    crate::matrix::norm2(&s.weights).into(),
                ];
                row.extend(s.weights.iter().map(|w| Cell::from(*w)));
                table.push(row);
            }
            Ok((
                table,
                json!({
                    "class": "linear_ball",
                    "radius": radius,
                    "max_kkt_residual": sols.iter().map(|s| s.kkt_residual).fold(0.0, f64::max),
                }),
            ))
        }
    }
}

fn run_tournament(cfg: &TournamentConfig, trials: usize, seed: Seed) -> Result<(Table, serde_json::Value)> {
    let trials = trial_count(&cfg.data, trials);
    let class = handles_of(&cfg.handles);
    let outcomes = try_par_trials(seed, trials, |t, _| {
        let data = cfg.data.load(seed.derive(t as u64))?;
        let tour = tournament_select(&class, &data, cfg.n_blocks, cfg.draw_margin)?;
        let erm = erm_finite(&class, &data)?;
        Ok::<_, Error>((tour, erm))
    })?;
    let mut table = Table::new(&["trial", "tournament_selected", "no_champion", "erm_selected"]);
    let mut tour_freq = vec![0usize; class.len()];
    let mut erm_freq = vec![0usize; class.len()];
    for (t, (tour, erm)) in outcomes.iter().enumerate() {
        table.push(vec![
            t.into(),
            tour.selected.into(),
            tour.no_champion.into(),
            (*erm).into(),
        ]);
        tour_freq[tour.selected] += 1;
        erm_freq[*erm] += 1;
    }
    let paired = cfg.f_star.map(|s| {
        let a: Vec<bool> = outcomes.iter().map(|(t, _)| t.selected == s).collect();
        let b: Vec<bool> = outcomes.iter().map(|(_, e)| *e == s).collect();
        paired_selection_test(&a, &b)
    });
    let matches = if trials == 1 {
        serde_json::to_value(&outcomes[0].0)?
    } else {
        serde_json::Value::Null
    };
    Ok((
        table,
        json!({
            "tournament_counts": tour_freq,
            "erm_counts": erm_freq,
            "no_champion_trials": outcomes.iter().filter(|(t, _)| t.no_champion).count(),
            "paired_test": paired,
            "single_run": matches,
        }),
    ))
}

fn run_fixed_point(cfg: &FixedPointConfig, trials: usize, seed: Seed) -> Result<(Table, serde_json::Value)> {
    match cfg {
        FixedPointConfig::CriticalRadius {
            d,
            n_samples,
            law,
            budget_scale,
            bracket,
            tol,
            initial_draws,
            max_draws,
        } => {
            let sols = try_par_trials(seed, trials, |t, _| {
                let x = sample_isotropic(*law, *d, *n_samples, seed.label("design").derive(t as u64))?;
                solve_critical_radius_mc(
                    |r, draws, s| rademacher_sup_linear_ball(&x, r, draws, s),
                    |r| r * r / budget_scale,
                    *bracket,
                    *tol,
                    *initial_draws,
                    *max_draws,
                    seed.label("signs").derive(t as u64),
                )
            })?;
            let mut table = Table::new(&["trial", "radius", "iterations", "unresolved", "final_draws"]);
            for (t, s) in sols.iter().enumerate() {
                table.push(vec![
                    t.into(),
                    s.radius.into(),
                    s.iterations.into(),
                    s.unresolved.into(),
                    s.final_draws.into(),
                ]);
            }
            let radii: Vec<f64> = sols.iter().map(|s| s.radius).collect();
            Ok((
                table,
                json!({
                    "kind": "critical_radius",
                    "median_radius": quantile(&radii, 0.5)?,
                    "reference_radius": budget_scale * (*d as f64 / *n_samples as f64).sqrt(),
                }),
            ))
        }
        FixedPointConfig::R1 {
            model,
            handles,
            f_star,
            delta,
            rho,
            n_samples,
            mc,
            bracket,
            tol,
        } => {
            let class = handles_of(handles);
            let params = R1Params {
                delta: *delta,
                rho: *rho,
                n_samples: *n_samples,
                mc: *mc,
                bracket: *bracket,
                tol: *tol,
            };
            let m = model.model();
            // trials repeat the whole Monte Carlo estimate; each one is itself parallel
            let ests = (0..trials)
                .map(|t| r1_estimate(&class, &class[*f_star], &m, model.dim(), &params, seed.derive(t as u64)))
                .collect::<Result<Vec<_>>>()?;
            let mut table = Table::new(&["trial", "radius", "tail_probability", "iterations"]);
            for (t, e) in ests.iter().enumerate() {
                table.push(vec![
                    t.into(),
                    e.radius.into(),
                    e.tail_probability.into(),
                    e.iterations.into(),
                ]);
            }
            let radii: Vec<f64> = ests.iter().map(|e| e.radius).collect();
            Ok((table, json!({"kind": "r1", "median_radius": quantile(&radii, 0.5)?})))
        }
    }
}

impl ExperimentResult {
    fn check_nonempty(&self) -> Result<()> {
        if self.rows.is_empty() {
            Err(Error::Input("empty result".into()))
        } else {
            Ok(())
        }
    }

    /// Rows as CSV, preceded by a `#` comment carrying the version.
    pub fn rows_csv(&self) -> Result<String> {
        self.check_nonempty()?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for r in &self.rows {
            w.write_record(r.iter().map(Cell::render))?;
        }
        let body =
            String::from_utf8(w.into_inner().map_err(|e| Error::Input(e.to_string()))?).expect("csv output is utf-8");
        Ok(format!("# {}\n{body}", self.version))
    }

    pub fn report(&self, format: Format) -> Result<String> {
        self.check_nonempty()?;
        match format {
            Format::Csv => self.rows_csv(),
            Format::Json => Ok(serde_json::to_string_pretty(self)?),
            Format::Markdown => Ok(self.markdown()),
        }
    }

    fn markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {} experiment\n", self.experiment.name());
        let _ = writeln!(
            s,
            "Produced by {} in {:.2} s, {} rows.\n",
            self.version,
            self.elapsed_seconds,
            self.rows.len()
        );
        let _ = writeln!(s, "## Summary\n\n| key | value |\n| --- | --- |");
        if let Some(obj) = self.summary.as_object() {
            for (k, v) in obj {
                if k == "cells" {
                    continue;
                }
                let _ = writeln!(s, "| {k} | `{v}` |");
            }
        }
        if self.experiment == Experiment::Sv {
            let target = self.summary["target_exponent"].as_f64().unwrap_or(f64::NAN);
            let fitted = self.summary["fit_with_log"]["exponent"].as_f64();
            let _ = writeln!(s, "\n## Scaling fit\n");
            match fitted {
                Some(e) => {
                    let _ = writeln!(s, "Fitted exponent {e:.4} against the target 1 - 2/q = {target:.4}.");
                }
                None => {
                    let _ = writeln!(s, "No exponent could be fitted (target 1 - 2/q = {target:.4}).");
                }
            }
            let _ = writeln!(
                s,
                "\n| d | N | median lambda_min | deficit quantile |\n| --- | --- | --- | --- |"
            );
            if let Some(cells) = self.summary["cells"].as_array() {
                for c in cells {
                    let _ = writeln!(
                        s,
                        "| {} | {} | {:.6} | {:.6} |",
                        c["d"],
                        c["N"],
                        c["median_lambda_min"].as_f64().unwrap_or(f64::NAN),
                        c["deficit_quantile"].as_f64().unwrap_or(f64::NAN)
                    );
                }
            }
        }
        let _ = writeln!(s, "\n## Configuration\n\n```toml\n{}```", self.config);
        s
    }

    /// Writes `<experiment>_rows.csv`, `<experiment>_summary.json` and
    /// `<experiment>_report.md` into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let name = self.experiment.name();
        let files = [
            (format!("{name}_rows.csv"), self.report(Format::Csv)?),
            (format!("{name}_summary.json"), self.report(Format::Json)?),
            (format!("{name}_report.md"), self.report(Format::Markdown)?),
        ];
        let mut out = Vec::new();
        for (file, body) in files {
            let path = dir.join(file);
            std::fs::write(&path, body)?;
            out.push(path);
        }
        Ok(out)
    }
}

/// Parses a rows CSV written by [`ExperimentResult::rows_csv`].
pub fn parse_rows_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<Cell>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let columns = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        rows.push(rec?.iter().map(Cell::parse).collect());
    }
    Ok((columns, rows))
}
