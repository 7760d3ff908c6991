//! Acceptance criteria. Each criterion prints one PASS/FAIL line with the
//! measured quantities. The binary exits nonzero only when a criterion
//! cannot be evaluated.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use smallball::distributions::{sample_regression, sample_scalar, RegressionModel, ScalarLaw};
use smallball::function::FunctionHandle;
use smallball::learners::{
    bernstein_constant, erm_finite, erm_finite_excess, excess_loss_decomposition, paired_selection_test,
};
use smallball::rng::Seed;
use smallball::runner::{run, ExperimentConfig, ExperimentResult, Threads};
use smallball::slb::{
    bernoulli_moment_functional, exact_bernoulli_moments, mc_bernoulli_moments, slb_params_lp, slb_params_norm_equiv,
    SlbConstants,
};
use smallball::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn config(text: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml(text, None)
}

fn summary_f64(res: &ExperimentResult, path: &[&str]) -> f64 {
    let mut v = &res.summary;
    for p in path {
        v = &v[*p];
    }
    v.as_f64().unwrap_or(f64::NAN)
}

fn singular_values() -> Result<Outcome> {
    let start = Instant::now();
    let grid = "dims = [5, 10, 20, 40]\naspect = [4.0, 16.0, 64.0, 128.0]\nq = 4.0";
    let pareto = run(&config(&format!(
        "experiment = \"sv\"\nmaster_seed = 11\ntrials = 50\n[params]\n{grid}\nlaw = {{ kind = \"pareto_sym\", params = {{ tail_index = 4.5 }} }}\n"
    ))?)?;
    let gauss = run(&config(&format!(
        "experiment = \"sv\"\nmaster_seed = 12\ntrials = 50\n[params]\n{grid}\nlaw = {{ kind = \"gaussian\" }}\n"
    ))?)?;
    let elapsed = start.elapsed();
    let exponent = summary_f64(&pareto, &["fit_with_log", "exponent"]);
    let coverage = summary_f64(&gauss, &["fraction_within_3_sqrt_d_over_n"]);
    let pass = (0.3..=0.7).contains(&exponent) && coverage >= 0.95 && elapsed < Duration::from_secs(300);
    Ok(Outcome {
        pass,
        detail: format!(
            "pareto(4.5) median-deficit exponent {exponent:.4} in [0.3, 0.7] (target 0.5); gaussian 1-lambda_min <= 3 sqrt(d/N) in {:.1}% of trials (need 95%); {:.1} s",
            100.0 * coverage,
            elapsed.as_secs_f64()
        ),
    })
}

fn block_conclusion() -> Result<Outcome> {
    let start = Instant::now();
    let res = run(&config(
        "experiment = \"verify_main\"\nmaster_seed = 21\ntrials = 200\n[params]\nd = 10\nn_samples = [2000, 1000, 500]\nn_blocks = 20\nxi = 0.2\neta = 0.1\nnet_size = 200\n",
    )?)?;
    let elapsed = start.elapsed();
    let per_n = res.summary["per_n"].as_array().expect("per_n");
    let rates: Vec<f64> = per_n.iter().map(|v| v["success_rate"].as_f64().unwrap()).collect();
    let worst: Vec<i64> = per_n.iter().map(|v| v["worst_min_count"].as_i64().unwrap()).collect();
    let monotone = rates.windows(2).all(|w| w[1] <= w[0]);
    let pass = rates[0] >= 0.95 && monotone && elapsed < Duration::from_secs(180);
    Ok(Outcome {
        pass,
        detail: format!(
            "success rate (min count >= 18) at N = 2000, 1000, 500: {rates:?} (need >= 0.95 at 2000, nonincreasing); worst counts {worst:?}; {:.1} s",
            elapsed.as_secs_f64()
        ),
    })
}

fn slb_failure_rates() -> Result<Outcome> {
    let fixed = run(&config(
        "experiment = \"slb\"\nmaster_seed = 31\ntrials = 10000\n[params]\nlaw = { kind = \"uniform_sym\" }\nxi = 0.1\nm = [1000]\nell = 33\n",
    )?)?;
    let rate = fixed.summary["per_m"][0]["failure_rate"].as_f64().unwrap_or(f64::NAN);
    let sweep = run(&config(
        "experiment = \"slb\"\nmaster_seed = 32\ntrials = 10000\n[params]\nlaw = { kind = \"uniform_sym\" }\nxi = 0.1\nm = [250, 500, 1000, 2000]\nell_ratio = 0.032\n",
    )?)?;
    let rates: Vec<f64> = sweep.summary["per_m"]
        .as_array()
        .expect("per_m")
        .iter()
        .map(|v| v["failure_rate"].as_f64().unwrap())
        .collect();
    let monotone = rates.windows(2).all(|w| w[1] <= w[0]);
    Ok(Outcome {
        pass: rate <= 0.01 && monotone,
        detail: format!(
            "m = 1000, ell = 33: failure rate {rate:.4} (need <= 0.01); ell/m = 0.032 over m = 250..2000: {rates:?} (need nonincreasing)"
        ),
    })
}

fn bernoulli_vector(kind: usize, m: usize, rng: &mut impl Rng) -> Vec<f64> {
    match kind {
        0 => {
            let mut x: Vec<f64> = (0..m).map(|_| rng.random_range(-0.05..0.05)).collect();
            let spikes = rng.random_range(1..=m.min(3));
            for v in x.iter_mut().take(spikes) {
                *v = rng.random_range(5.0..50.0);
            }
            x
        }
        1 => (0..m)
            .map(|_| rng.random_range(0.5..1.0) * if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect(),
        _ => {
            let alpha = rng.random_range(0.3..2.5);
            (1..=m).map(|j| (j as f64).powf(-alpha)).collect()
        }
    }
}

fn bernoulli_moments() -> Result<Outcome> {
    let ps = [2.0, 4.0, 8.0, 16.0];
    let mut rng = Seed(41).rng();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    let (mut exact_cases, mut mc_cases, mut bad) = (0, 0, 0);
    for i in 0..100 {
        let m = rng.random_range(2..=64);
        let x = bernoulli_vector(i % 3, m, &mut rng);
        let moments: Vec<f64> = if m <= 16 {
            exact_cases += 1;
            exact_bernoulli_moments(&x, &ps)?
        } else {
            mc_cases += 1;
            mc_bernoulli_moments(&x, &ps, 100_000, Seed(41).derive(i as u64))?
                .into_iter()
                .map(|e| e.value)
                .collect()
        };
        for (p, mom) in ps.iter().zip(moments) {
            let r = mom / bernoulli_moment_functional(&x, *p)?;
            lo = lo.min(r);
            hi = hi.max(r);
            if !(0.2..=5.0).contains(&r) {
                bad += 1;
            }
        }
    }
    Ok(Outcome {
        pass: bad == 0,
        detail: format!(
            "{exact_cases} exact + {mc_cases} Monte Carlo vectors, p in {{2,4,8,16}}: ratio range [{lo:.4}, {hi:.4}] (need within [0.2, 5]), {bad} violations"
        ),
    })
}

fn exact_identities() -> Result<Outcome> {
    let mut rng = Seed(51).rng();
    let mut worst_gap = 0.0f64;
    let mut argmin_mismatch = 0;
    for inst in 0..1000u64 {
        let d = rng.random_range(1..=5);
        let n = rng.random_range(20..=200);
        let handles: Vec<FunctionHandle> = (0..6)
            .map(|i| {
                FunctionHandle::affine(
                    i,
                    (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let target = FunctionHandle::affine(99, (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(), 0.0);
        let design = [ScalarLaw::gaussian(), ScalarLaw::student_t(3.0), ScalarLaw::pareto(3.0)][inst as usize % 3];
        let model = RegressionModel::new(design, target, ScalarLaw::student_t(2.5), rng.random_range(0.1..2.0));
        let data = sample_regression(&model, n, d, Seed(51).derive(inst))?;
        let erm = erm_finite(&handles, &data)?;
        for s in &handles {
            for f in &handles {
                worst_gap = worst_gap.max(excess_loss_decomposition(f, s, &data)?.relative_gap());
            }
            if erm_finite_excess(&handles, s, &data)? != erm {
                argmin_mismatch += 1;
            }
        }
    }
    Ok(Outcome {
        pass: worst_gap <= 1e-12 && argmin_mismatch == 0,
        detail: format!("1000 instances: worst relative decomposition gap {worst_gap:.3e} (need <= 1e-12); {argmin_mismatch} argmin mismatches"),
    })
}

fn bernstein_constants() -> Result<Outcome> {
    let target = FunctionHandle::linear(0, vec![0.25, -0.25]);
    let mut ball = vec![target.clone()];
    for i in -4i32..=4 {
        for j in -4i32..=4 {
            let w = vec![i as f64 * 0.25, j as f64 * 0.25];
            if w[0].hypot(w[1]) <= 1.0 && !(i == 1 && j == -1) {
                ball.push(FunctionHandle::linear(ball.len(), w));
            }
        }
    }
    let model = RegressionModel::new(ScalarLaw::gaussian(), target.clone(), ScalarLaw::student_t(4.0), 1.0);
    let convex = bernstein_constant(&ball, &model, 2, 400_000, Seed(61))?;

    let f0 = FunctionHandle::linear(0, vec![1.0, 0.0]);
    let finite = vec![
        f0.clone(),
        FunctionHandle::linear(1, vec![0.0, 1.0]),
        FunctionHandle::linear(2, vec![1.5, 0.5]),
        FunctionHandle::affine(3, vec![0.5, 0.0], 0.7),
    ];
    let noise_model = RegressionModel::new(ScalarLaw::gaussian(), f0, ScalarLaw::student_t(4.0), 1.0);
    let additive = bernstein_constant(&finite, &noise_model, 2, 400_000, Seed(62))?;

    let near = [
        FunctionHandle::linear(0, vec![1.0]),
        FunctionHandle::linear(1, vec![-1.0]),
    ];
    let tilt = RegressionModel::new(
        ScalarLaw::gaussian(),
        FunctionHandle::linear(9, vec![0.05]),
        ScalarLaw::gaussian(),
        1.0,
    );
    let two = bernstein_constant(&near, &tilt, 1, 400_000, Seed(63))?;

    let ok_convex = convex.b_hat <= 1.0 + 3.0 * convex.mc_se;
    let ok_additive = additive.b_hat <= 1.0 + 3.0 * additive.mc_se;
    let ok_two = two.b_hat >= 10.0;
    Ok(Outcome {
        pass: ok_convex && ok_additive && ok_two,
        detail: format!(
            "linear-ball net ({} points) B = {:.4} +- {:.4}; additive-noise class B = {:.4} +- {:.4} (need <= 1 + 3 SE); two near-minimizers B = {:.2} (need >= 10)",
            ball.len(),
            convex.b_hat,
            convex.mc_se,
            additive.b_hat,
            additive.mc_se,
            two.b_hat
        ),
    })
}

fn tournament_config(n: usize, trials: usize, seed: u64) -> String {
    format!(
        "experiment = \"tournament\"\nmaster_seed = {seed}\ntrials = {trials}\n[params]\nn_blocks = 20\nf_star = 0\nhandles = [{{ weights = [0.5] }}, {{ weights = [-0.5] }}]\n[params.data]\nn_samples = {n}\nmodel = {{ target = {{ weights = [0.5] }}, noise = {{ kind = \"student_t\", params = {{ dof = 3.0 }} }} }}\n"
    )
}

fn hits(res: &ExperimentResult, column: &str) -> Vec<bool> {
    use smallball::runner::Cell;
    let j = res.columns.iter().position(|c| c == column).expect("column");
    res.rows.iter().map(|r| r[j] == Cell::Int(0)).collect()
}

fn tournament_vs_erm() -> Result<Outcome> {
    let small = run(&config(&tournament_config(200, 1000, 71))?)?;
    let (tour, erm) = (hits(&small, "tournament_selected"), hits(&small, "erm_selected"));
    // one-sided: does ERM select f* more often than the tournament?
    let test = paired_selection_test(&erm, &tour);
    let large = run(&config(&tournament_config(5000, 1000, 72))?)?;
    let test_large = paired_selection_test(&hits(&large, "tournament_selected"), &hits(&large, "erm_selected"));
    let pass = test.p_value >= 0.05 && test_large.first_rate >= 0.99 && test_large.second_rate >= 0.99;
    Ok(Outcome {
        pass,
        detail: format!(
            "N = 200: tournament {:.3} vs ERM {:.3}, ERM-only {} vs tournament-only {}, one-sided p = {:.4} (ERM better rejected if < 0.05); N = 5000: tournament {:.3}, ERM {:.3} (need >= 0.99)",
            test.second_rate, test.first_rate, test.first_only, test.second_only, test.p_value, test_large.first_rate, test_large.second_rate
        ),
    })
}

fn exponent_of(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    (f(b) / f(a)).ln() / (b / a).ln()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn parameter_scaling() -> Result<Outcome> {
    let c = SlbConstants::default();
    let m = 1000;
    let mut worst = 0.0f64;
    for p in [2.5, 3.0, 3.5, 4.0, 6.0, 8.0] {
        let target = p / (p - 2.0);
        let ell = |xi: f64| slb_params_lp(m, xi, p, 1.0, 1.5, c).unwrap().ell_raw;
        worst = worst.max(rel(exponent_of(ell, 0.1, 0.4), target));
        // in the ratio ‖h‖₂²/‖h‖_p², through ‖h‖_p
        let by_norm = |inv: f64| slb_params_lp(m, 0.3, p, 1.0, inv.powf(-0.5), c).unwrap().ell_raw;
        worst = worst.max(rel(exponent_of(by_norm, 0.2, 0.7), target));
        let k = |xi: f64| slb_params_lp(m, xi, p, 1.0, 1.5, c).unwrap().k;
        let k_target = if p < 4.0 { target } else { 2.0 };
        worst = worst.max(rel(exponent_of(k, 0.1, 0.4), k_target));
    }
    for q in [2.5, 3.0, 3.5, 5.0, 8.0] {
        let target = q / (q - 2.0);
        let ell = |xi: f64| slb_params_norm_equiv(m, xi, q, 1.3, c).unwrap().ell_raw;
        worst = worst.max(rel(exponent_of(ell, 0.1, 0.4), target));
        let by_l = |inv: f64| slb_params_norm_equiv(m, 0.3, q, inv.powf(-0.5), c).unwrap().ell_raw;
        worst = worst.max(rel(exponent_of(by_l, 0.2, 0.7), target));
        let k = |xi: f64| slb_params_norm_equiv(m, xi, q, 1.3, c).unwrap().k;
        let k_target = if q < 4.0 { target } else { 2.0 };
        worst = worst.max(rel(exponent_of(k, 0.1, 0.4), k_target));
    }

    let laws = [
        ScalarLaw::gaussian(),
        ScalarLaw::uniform(),
        ScalarLaw::rademacher(),
        ScalarLaw::student_t(12.0),
        ScalarLaw::pareto(10.0),
    ];
    let (mut stated_fail, mut holder_fail, mut checked) = (Vec::new(), Vec::new(), 0);
    for (li, law) in laws.iter().enumerate() {
        let draws = sample_scalar(*law, 1_000_000, Seed(81).derive(li as u64))?;
        for p in [4.0, 6.0, 8.0] {
            if !law.has_finite_moment(p) {
                continue;
            }
            checked += 1;
            let gap = |h: &[f64]| {
                let mean = |e: f64| h.iter().map(|v| v.abs().powf(e)).sum::<f64>() / h.len() as f64;
                let (m2, m4, mp) = (mean(2.0), mean(4.0), mean(p));
                let lhs = m2 * m2 / m4;
                let rhs = (m2 / mp.powf(2.0 / p)).powf(p / (p - 2.0));
                lhs - rhs
            };
            let total = gap(&draws);
            let batches: Vec<f64> = draws.chunks(draws.len() / 20).map(gap).collect();
            let mean = batches.iter().sum::<f64>() / 20.0;
            let se = (batches.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / 19.0).sqrt() / 20f64.sqrt();
            // at p = 4 both sides coincide; the floor absorbs rounding
            let tol = (3.0 * se).max(1e-12);
            if total > tol {
                stated_fail.push(format!("{}@p={p}", law.name()));
            }
            if total < -tol {
                holder_fail.push(format!("{}@p={p}", law.name()));
            }
        }
    }
    let pass = worst <= 1e-12 && stated_fail.is_empty();
    Ok(Outcome {
        pass,
        detail: format!(
            "worst relative exponent error {worst:.2e} (need <= 1e-12); stated moment inequality |h|_2^4/|h|_4^4 <= (|h|_2^2/|h|_p^2)^(p/(p-2)) violated beyond 3 SE in {}/{checked} cases {stated_fail:?}; reverse direction violated in {holder_fail:?}",
            stated_fail.len()
        ),
    })
}

fn determinism() -> Result<Outcome> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut files: Vec<_> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    files.sort();
    let mut mismatches = Vec::new();
    let mut kinds = std::collections::BTreeSet::new();
    for path in &files {
        let mut cfg = ExperimentConfig::from_file(path, None)?;
        kinds.insert(cfg.experiment.name());
        let mut out = Vec::new();
        for k in [1, 8] {
            cfg.threads = Threads::Count(k);
            out.push(run(&cfg)?.rows_csv()?);
        }
        if out[0] != out[1] {
            mismatches.push(path.file_name().unwrap().to_string_lossy().to_string());
        }
    }
    Ok(Outcome {
        pass: mismatches.is_empty() && kinds.len() == 7,
        detail: format!(
            "{} configs covering {} experiments, rows at 1 vs 8 threads byte-identical except {mismatches:?}",
            files.len(),
            kinds.len()
        ),
    })
}

fn main() {
    let criteria: [(&str, fn() -> Result<Outcome>); 9] = [
        ("singular-value scaling", singular_values),
        ("block conclusion", block_conclusion),
        ("stable lower bound failure rates", slb_failure_rates),
        ("Bernoulli moment equivalence", bernoulli_moments),
        ("exact identities", exact_identities),
        ("Bernstein constants", bernstein_constants),
        ("tournament vs ERM", tournament_vs_erm),
        ("parameter-formula scaling", parameter_scaling),
        ("determinism", determinism),
    ];
    let mut passed = 0;
    let mut errors = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        match check() {
            Ok(o) => {
                passed += o.pass as usize;
                let tag = if o.pass { "PASS" } else { "FAIL" };
                println!(
                    "criterion {} [{tag}] {name}: {} ({:.1} s)",
                    i + 1,
                    o.detail,
                    start.elapsed().as_secs_f64()
                );
            }
            Err(e) => {
                errors += 1;
                println!("criterion {} [ERROR] {name}: {e}", i + 1);
            }
        }
    }
    println!("acceptance: {passed}/{} criteria passed", criteria.len());
    if errors > 0 {
        std::process::exit(1);
    }
}
