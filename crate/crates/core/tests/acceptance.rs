//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::fs;
use std::net::TcpListener;
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use lfprompt::abc::{self, SmcConfig, SmcState, WeightScheme};
use lfprompt::blackbox::{
    make_synthetic_task, protocol, Backend, Dataset, Decode, Endpoint, ExternalSimulator, FrozenClassifier, QueryMode,
    Simulator, SyntheticTask, TaskConfig,
};
use lfprompt::cmaes::{minimize, rosenbrock, sphere};
use lfprompt::estimators::{elbo_estimate, gfvi_tune, kl_diag_gaussian_to_prior, EsConfig, GfviConfig, VariationalParams};
use lfprompt::experiment::{compare_methods, run_experiment, ExperimentConfig, Method, TaskSpec};
use lfprompt::predictive::{label_frequencies, predictive_from_labels, PredictiveTable};
use lfprompt::uqeval::{
    self, ece, entropy_score, maxp_uncertainty, oracle_lower_bound, oracle_uncertainties, risk_rejection_curve,
    RiskFlags, Score,
};
use lfprompt::{rng, PosteriorEnsemble, PriorSpec, Provenance, ProjectionSpec};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------- criterion 1

fn reference_history(f: fn(&[f64]) -> f64, m0: &[f64], sigma0: f64, gens: usize, seed: u64) -> Vec<f64> {
    let mut state = cmaes::CMAESOptions::new(m0.to_vec(), sigma0)
        .population_size(20)
        .weights(cmaes::Weights::Positive)
        .max_generations(usize::MAX)
        .tol_fun(1e-300)
        .tol_fun_rel(0.0)
        .tol_fun_hist(1e-300)
        .tol_x(1e-300)
        .tol_stagnation(usize::MAX / 2)
        .tol_condition_cov(1e300)
        .seed(seed)
        .build(move |x: &nalgebra::DVector<f64>| f(x.as_slice()))
        .expect("reference options");
    let mut out = Vec::with_capacity(gens);
    for _ in 0..gens {
        // The reference stops when steps no longer change coordinates;
        // its best-so-far is then final.
        if state.next().is_some() {
            break;
        }
        out.push(state.overall_best_individual().expect("evaluated").value);
    }
    let last = *out.last().unwrap_or(&f64::INFINITY);
    out.resize(gens, last);
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn criterion_1() -> Outcome {
    let mut notes = Vec::new();
    for (name, f, target) in [("sphere", sphere as fn(&[f64]) -> f64, 1e-8), ("rosenbrock", rosenbrock, 1e-6)] {
        let mut ours_logs: Vec<Vec<f64>> = Vec::new();
        let mut ref_logs: Vec<Vec<f64>> = Vec::new();
        let mut worst = 0.0f64;
        let mut slowest = Duration::ZERO;
        for seed in 0..50u64 {
            let mut r = rng::seeded(seed);
            let m0: Vec<f64> = (0..5).map(|_| r.gen_range(-2.0..2.0)).collect();
            let t = Instant::now();
            let run = minimize(f, m0.clone(), 0.5, 20, 300, seed).map_err(|e| e.to_string())?;
            slowest = slowest.max(t.elapsed());
            worst = worst.max(run.best_loss);
            let reference = reference_history(f, &m0, 0.5, 300, seed);
            // Below 1e-15 both runs have converged; the reference also stops there
            // on its own coordinate-change test.
            let lg = |v: f64| v.max(1e-15).log10();
            let at = [50usize, 100, 150, 200, 300];
            ours_logs.push(at.iter().map(|&g| lg(run.history[g - 1])).collect());
            ref_logs.push(at.iter().map(|&g| lg(reference[g - 1])).collect());
        }
        check(worst < target, format!("{name}: worst best_loss {worst:e} ≥ {target:e}"))?;
        check(slowest < Duration::from_secs(5), format!("{name}: run took {slowest:?}"))?;
        for (k, g) in [50, 100, 150, 200, 300].iter().enumerate() {
            let ours = median(ours_logs.iter().map(|v| v[k]).collect());
            let theirs = median(ref_logs.iter().map(|v| v[k]).collect());
            check(
                (ours - theirs).abs() <= 1.0,
                format!("{name}: median log10 loss at generation {g}: ours {ours:.2}, reference {theirs:.2}"),
            )?;
        }
        notes.push(format!("{name} worst {worst:.1e} in ≤{slowest:.0?}"));
    }
    Ok(notes.join("; ") + "; median log10 loss within 1 decade of the reference at generations 50–300, floored at 1e-15 (50 seeds)")
}

// ---------------------------------------------------------------- criterion 2

fn uniform_setup(d: usize, n: usize, seed: u64) -> (Simulator, ProjectionSpec, Dataset, PriorSpec) {
    let sim = Simulator::new(FrozenClassifier::uniform(32, 16, 2).unwrap());
    let proj = ProjectionSpec::new(d, 32, seed).unwrap();
    let mut r = rng::seeded(seed);
    let inputs: Vec<Vec<f64>> = (0..n).map(|_| (0..16).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let labels: Vec<u32> = (0..n).map(|_| r.gen_range(0..2)).collect();
    (sim, proj, Dataset::new(inputs, labels).unwrap(), PriorSpec::new(d, 50.0).unwrap())
}

fn criterion_2() -> Outcome {
    let (sim, proj, data, prior) = uniform_setup(4, 4, 1);
    let at_prior = VariationalParams::at_prior(&prior);
    let elbo = elbo_estimate(&at_prior, &sim, &proj, &data, &prior, 10, &mut rng::seeded(3)).map_err(|e| e.to_string())?;
    check(close(elbo, -4.0 * 2f64.ln(), 1e-9), format!("ELBO at prior {elbo}"))?;

    let s = 50.0f64;
    let p1 = PriorSpec::new(1, s).unwrap();
    let kl = |mu: f64, alpha: f64| kl_diag_gaussian_to_prior(&VariationalParams::new(vec![mu], vec![alpha.ln()]).unwrap(), &p1).unwrap();
    let kl0 = kl_diag_gaussian_to_prior(&at_prior, &prior).map_err(|e| e.to_string())?;
    check(close(kl0, 0.0, 1e-12), format!("KL at prior {kl0}"))?;
    check(close(kl(s, s * s), 0.5, 1e-12), format!("KL(μ=σ) {}", kl(s, s * s)))?;
    let e = std::f64::consts::E;
    check(close(kl(0.0, s * s * e), (e - 2.0) / 2.0, 1e-12), format!("KL(α=σ²e) {}", kl(0.0, s * s * e)))?;

    let mut kls = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in 0..10u64 {
        let (sim, proj, data, prior) = uniform_setup(4, 4, 100 + seed);
        let es = EsConfig { seed, ..EsConfig::default() };
        let t = Instant::now();
        let ens = gfvi_tune(&sim, &proj, &data, &prior, &es, &GfviConfig::default()).map_err(|e| e.to_string())?;
        slowest = slowest.max(t.elapsed());
        kls.push(ens.diagnostics["kl_to_prior"]);
    }
    let good = kls.iter().filter(|k| **k < 0.5).count();
    check(good >= 9, format!("KL < 0.5 in {good}/10 seeds: {kls:?}"))?;
    check(slowest < Duration::from_secs(60), format!("GFVI run took {slowest:?}"))?;
    let max_kl = kls.iter().cloned().fold(0.0, f64::max);
    Ok(format!("ELBO −4ln2 exact, KL values exact, GFVI KL < 0.5 in {good}/10 (max {max_kl:.2e}), ≤{slowest:.1?}/run"))
}

// ---------------------------------------------------------------- criteria 3–5

fn abc_task(seed: u64) -> SyntheticTask {
    make_synthetic_task(&TaskConfig { d: 8, feature_dim: 16, classes: 2, n_train: 32, seed, ..TaskConfig::default() })
        .unwrap()
}

fn train_error(sim: &Simulator, task: &SyntheticTask, z: &[f64]) -> f64 {
    let labels = sim
        .query_labels(&task.projection, z, &task.train.inputs, Decode::Argmax, &mut rng::seeded(0))
        .unwrap();
    abc::distance_error_rate(&labels, &task.train.labels).unwrap()
}

fn criterion_3() -> Outcome {
    let task = abc_task(0);
    let sim = task.simulator().labels_only();
    let prior = task.prior().unwrap();
    let cfg = SmcConfig::default();
    check(cfg.particle_count == 100, format!("default S = {}", cfg.particle_count))?;
    let mut states: Vec<SmcState> = Vec::new();
    let t = Instant::now();
    let ens = abc::abc_smc_observed(&sim, &task.projection, &prior, &task.train, &cfg, |s| states.push(s.clone()))
        .map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    check(elapsed < Duration::from_secs(60), format!("runtime {elapsed:?}"))?;
    check(ens.len() == 100, format!("{} particles", ens.len()))?;

    let eps1 = states[0].epsilon;
    for (t, st) in states.iter().enumerate() {
        let expected = (eps1 - t as f64 / 32.0).max(0.0);
        check(st.epsilon == expected, format!("iteration {}: ε = {}, expected {expected}", t + 1, st.epsilon))?;
    }
    let eps_t = states.last().unwrap().epsilon;
    let worst = ens.samples.iter().map(|z| train_error(&sim, &task, z)).fold(0.0, f64::max);
    check(worst <= eps_t, format!("final particle distance {worst} > ε_T {eps_t}"))?;
    check(sim.budget().logits_used() == 0, format!("{} logits queries", sim.budget().logits_used()))?;
    check(
        sim.query_logits(&task.projection, &ens.samples[0], &task.train.inputs).is_err(),
        "labels-only wrapper allowed a logits query",
    )?;
    Ok(format!(
        "S=100, {} iterations, ε {eps1} → {eps_t} exact, worst recheck {worst}, 0 logits calls, {elapsed:.1?}",
        states.len()
    ))
}

fn criterion_4() -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..10u64 {
        let task = abc_task(seed);
        let sim = task.simulator().labels_only();
        let prior = task.prior().unwrap();
        let cfg = SmcConfig { seed, ..SmcConfig::default() };
        // A stagnated run has no posterior to judge; it counts as a miss.
        let ens = match abc::abc_smc(&sim, &task.projection, &prior, &task.train, &cfg) {
            Ok(e) => e,
            Err(lfprompt::Error::Stagnation { iteration, .. }) => {
                rows.push(format!("stagnated@{iteration}"));
                continue;
            }
            Err(e) => return Err(e.to_string()),
        };
        let table = predictive_from_labels(&ens, &sim, &task.projection, &task.train.inputs, Decode::Argmax, &mut rng::seeded(seed))
            .map_err(|e| e.to_string())?;
        let post_err = abc::distance_error_rate(&table.predictions(), &task.train.labels).unwrap();
        let mut r = rng::stream(seed, 99);
        let prior_err = (0..100).map(|_| train_error(&sim, &task, &prior.draw(&mut r))).sum::<f64>() / 100.0;
        if post_err <= prior_err - 0.1 {
            wins += 1;
        }
        rows.push(format!("{post_err:.3}/{prior_err:.3}"));
    }
    check(wins >= 8, format!("{wins}/10 seeds (posterior/prior error: {})", rows.join(" ")))?;
    Ok(format!("{wins}/10 seeds; posterior/prior-mean error: {}", rows.join(" ")))
}

fn gauss_pdf(x: &[f64], m: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(m)
        .zip(var)
        .map(|((x, m), v)| (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt())
        .product()
}

fn criterion_5() -> Outcome {
    let mut r = rng::seeded(55);
    let mut worst_rel = 0.0f64;
    let mut worst_var = 0.0f64;
    for _ in 0..100 {
        let (d, s) = (3, 5);
        let sigma = r.gen_range(1.0..3.0);
        let prior = PriorSpec::new(d, sigma).unwrap();
        let pts = |r: &mut rng::StreamRng| -> Vec<Vec<f64>> {
            (0..s).map(|_| (0..d).map(|_| r.gen_range(-2.0..2.0)).collect()).collect()
        };
        let new = pts(&mut r);
        let prev = pts(&mut r);
        let raw: Vec<f64> = (0..s).map(|_| r.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let pw: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let alpha: Vec<f64> = (0..d).map(|_| r.gen_range(0.3..3.0)).collect();
        let got = abc::update_weights(&new, &prev, &pw, &alpha, &prior).map_err(|e| e.to_string())?;
        let brute: Vec<f64> = new
            .iter()
            .map(|z| {
                let num = gauss_pdf(z, &vec![0.0; d], &vec![sigma * sigma; d]);
                let den: f64 = prev.iter().zip(&pw).map(|(zj, w)| w * gauss_pdf(z, zj, &alpha)).sum();
                num / den
            })
            .collect();
        let bt: f64 = brute.iter().sum();
        for (g, b) in got.iter().zip(&brute) {
            worst_rel = worst_rel.max(((g - b / bt) / (b / bt)).abs());
        }

        let kv = abc::update_kernel_variance(&new, &pw, 1e-300);
        for k in 0..d {
            let mean: f64 = new.iter().zip(&pw).map(|(z, w)| w * z[k]).sum();
            let var: f64 = new.iter().zip(&pw).map(|(z, w)| w * (z[k] - mean).powi(2)).sum();
            worst_var = worst_var.max((kv[k] - var).abs());
        }
    }
    check(worst_rel <= 1e-8, format!("weights relative error {worst_rel:e}"))?;
    check(worst_var <= 1e-10, format!("kernel variance error {worst_var:e}"))?;

    let mut uniform_ok = true;
    let mut degenerate = 0;
    let mut nontrivial = 0;
    let mut seed = 0u64;
    let mut ess_notes = Vec::new();
    while nontrivial < 10 {
        let task = abc_task(200 + seed);
        let sim = task.simulator().labels_only();
        let prior = task.prior().unwrap();
        for scheme in [WeightScheme::Uniform, WeightScheme::Importance] {
            let cfg = SmcConfig { particle_count: 50, max_iterations: 5, weight_scheme: scheme, seed, ..SmcConfig::default() };
            let mut states = Vec::new();
            abc::abc_smc_observed(&sim, &task.projection, &prior, &task.train, &cfg, |s| states.push(s.clone()))
                .map_err(|e| e.to_string())?;
            match scheme {
                WeightScheme::Uniform => {
                    uniform_ok &= states.iter().all(|s| abc::effective_sample_size(&s.weights).unwrap() == 50.0);
                }
                WeightScheme::Importance => {
                    // A run with a single iteration never reweights.
                    if states.len() >= 2 {
                        nontrivial += 1;
                        let ess = abc::effective_sample_size(&states.last().unwrap().weights).unwrap();
                        if ess < 50.0 {
                            degenerate += 1;
                        }
                        ess_notes.push(format!("{ess:.1}"));
                    }
                }
            }
        }
        seed += 1;
    }
    check(uniform_ok, "Uniform scheme produced ESS ≠ S")?;
    check(degenerate >= 8, format!("Importance ESS < S in {degenerate}/10 runs ({})", ess_notes.join(" ")))?;
    Ok(format!(
        "weights rel err {worst_rel:.1e}, variance err {worst_var:.1e}, Uniform ESS = S, Importance ESS < S in {degenerate}/10 (final ESS {})",
        ess_notes.join(" ")
    ))
}

// ---------------------------------------------------------------- criterion 6

fn criterion_6() -> Outcome {
    let tasks: Vec<SyntheticTask> = [2usize, 3, 4]
        .iter()
        .map(|&c| make_synthetic_task(&TaskConfig { classes: c, n_test: 8, seed: 60 + c as u64, ..TaskConfig::default() }).unwrap())
        .collect();
    let mut r = rng::seeded(6);
    let mut worst = 0.0f64;
    for instance in 0..1000 {
        let task = &tasks[instance % 3];
        let c = task.classes();
        let sim = task.simulator().labels_only();
        let prior = task.prior().unwrap();
        let s = r.gen_range(1..=8);
        let m = r.gen_range(1..=8);
        let samples = prior.sample(s, &mut r);
        let weights: Vec<f64> = if instance % 2 == 0 {
            vec![1.0 / s as f64; s]
        } else {
            let raw: Vec<f64> = (0..s).map(|_| r.gen_range(0.01..1.0)).collect();
            let t: f64 = raw.iter().sum();
            raw.iter().map(|w| w / t).collect()
        };
        let ens = PosteriorEnsemble::new(samples.clone(), weights.clone(), Provenance::AbcSmc).unwrap();
        let inputs = &task.test.inputs[..m];
        let table = predictive_from_labels(&ens, &sim, &task.projection, inputs, Decode::Argmax, &mut rng::seeded(0))
            .map_err(|e| e.to_string())?;
        let decoded: Vec<Vec<u32>> = samples
            .iter()
            .map(|z| sim.query_labels(&task.projection, z, inputs, Decode::Argmax, &mut rng::seeded(0)).unwrap())
            .collect();
        for i in 0..m {
            for class in 0..c {
                let mut p = 0.0;
                for (sample, w) in decoded.iter().zip(&weights) {
                    if sample[i] as usize == class {
                        p += w;
                    }
                }
                worst = worst.max((table.rows[i][class] - p).abs());
            }
        }
        // Same indicator sums from randomly drawn labels, no simulator.
        let labels: Vec<Vec<u32>> = (0..s).map(|_| (0..m).map(|_| r.gen_range(0..c as u32)).collect()).collect();
        let rows = label_frequencies(&labels, &weights, c).map_err(|e| e.to_string())?;
        for i in 0..m {
            for class in 0..c {
                let p: f64 = (0..s).filter(|&j| labels[j][i] as usize == class).map(|j| weights[j]).sum();
                worst = worst.max((rows[i][class] - p).abs());
            }
        }
    }
    check(worst <= 1e-12, format!("max deviation {worst:e}"))?;
    Ok(format!("1000 instances (S ≤ 8, C ≤ 4), max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- criterion 7

fn table(rows: Vec<Vec<f64>>) -> PredictiveTable {
    PredictiveTable::new(rows, QueryMode::Logits, 1).unwrap()
}

fn criterion_7() -> Outcome {
    let h = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
    let unit = [
        ("entropy one-hot", entropy_score(&[0.0, 1.0]).unwrap(), 0.0),
        ("entropy uniform", entropy_score(&[0.5, 0.5]).unwrap(), 2f64.ln()),
        ("entropy (.75,.25)", entropy_score(&[0.75, 0.25]).unwrap(), h),
        ("maxp one-hot", maxp_uncertainty(&[1.0, 0.0]).unwrap(), 0.0),
        ("maxp uniform C=4", maxp_uncertainty(&[0.25; 4]).unwrap(), 0.75),
        ("maxp (.75,.25)", maxp_uncertainty(&[0.75, 0.25]).unwrap(), 0.25),
        ("ece perfect", ece(&table(vec![vec![1.0, 0.0]; 4]), &[0; 4], 10).unwrap(), 0.0),
        ("ece 0.6 pair", ece(&table(vec![vec![0.6, 0.4]; 2]), &[0, 1], 10).unwrap(), 0.1),
    ];
    for (name, got, want) in unit {
        check(close(got, want, 1e-12), format!("{name}: {got} vs {want}"))?;
    }
    check(close(h, 0.56234, 1e-5), format!("entropy(.75,.25) = {h}"))?;

    for n in [5usize, 50, 500] {
        let flags = RiskFlags::new([vec![false; n], vec![true; n]].concat()).unwrap();
        let curve = risk_rejection_curve(&oracle_uncertainties(&flags), &flags).unwrap();
        let k = 2 * n / 5;
        check(curve.risks[k] == 0.375, format!("N={n}: risk at k={k} is {}", curve.risks[k]))?;
        check(curve.rejection_rates()[k] == 0.2, format!("N={n}: rejection rate {}", curve.rejection_rates()[k]))?;
        check(oracle_lower_bound(&flags) == curve.aurrrc, format!("N={n}: lower bound differs from oracle curve"))?;
        // Same point through the OOD harness: confident ID rows, uniform OOD rows.
        let id = table(vec![vec![1.0, 0.0]; n]);
        let ood = table(vec![vec![0.5, 0.5]; n]);
        let rep = uqeval::ood_detection_eval(&id, &ood, Score::Entropy).unwrap();
        check(rep.curve.risks[k] == 0.375 && rep.aurrrc == rep.lower_bound, format!("N={n}: OOD harness mismatch"))?;
    }

    let mut r = rng::seeded(77);
    let mut violations = 0;
    let random_rows = |r: &mut rng::StreamRng, m: usize, c: usize| -> Vec<Vec<f64>> {
        (0..m)
            .map(|_| {
                let raw: Vec<f64> = (0..c).map(|_| r.gen::<f64>().powi(2)).collect();
                let t: f64 = raw.iter().sum();
                raw.iter().map(|v| v / t).collect()
            })
            .collect()
    };
    for _ in 0..100 {
        let c = r.gen_range(2..5);
        let m = r.gen_range(1..60);
        let rows = random_rows(&mut r, m, c);
        let labels: Vec<u32> = (0..m).map(|_| r.gen_range(0..c as u32)).collect();
        for score in Score::ALL {
            let rep = uqeval::selective_classification_eval(&table(rows.clone()), &labels, score).unwrap();
            violations += (rep.lower_bound > rep.aurrrc) as usize;
        }
        let m_ood = r.gen_range(1..60);
        let ood = random_rows(&mut r, m_ood, c);
        for score in Score::ALL {
            let rep = uqeval::ood_detection_eval(&table(rows.clone()), &table(ood.clone()), score).unwrap();
            violations += (rep.lower_bound > rep.aurrrc) as usize;
        }
    }
    check(violations == 0, format!("{violations} lower-bound violations"))?;
    Ok("unit values exact; risk 0.375 at k = 0.4N for N ∈ {5, 50, 500}; 0 lower-bound violations in 100 instances".into())
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..10u64 {
        // More prompt dimensions than the data pins down, so point estimates overfit.
        let task = TaskSpec::Synthetic(TaskConfig { label_noise: 0.1, d: 16, n_train: 32, classes: 2, seed, ..TaskConfig::default() });
        let point = ExperimentConfig::new(task.clone(), Method::PointCmaes, seed);
        let mut ens = ExperimentConfig::new(task, Method::Ensembles, seed);
        ens.samples = Some(10);
        let t = compare_methods(&[point, ens]).map_err(|e| e.to_string())?;
        let (p, e) = (t.rows[0].aurrrc_entropy, t.rows[1].aurrrc_entropy);
        if e <= p {
            wins += 1;
        }
        rows.push(format!("{e:.3}/{p:.3}"));
    }
    check(wins >= 7, format!("Ensembles ≤ PointCmaes in {wins}/10 (ens/point: {})", rows.join(" ")))?;
    Ok(format!("Ensembles ≤ PointCmaes in {wins}/10; AURRRC ens/point: {}", rows.join(" ")))
}

// ---------------------------------------------------------------- criterion 9

fn compare_backends(local: &Simulator, remote: &Simulator, task: &SyntheticTask, queries: usize, seed: u64) -> Result<(f64, usize), String> {
    let prior = task.prior().unwrap();
    let mut r = rng::seeded(seed);
    let mut worst = 0.0f64;
    let mut label_rows = 0;
    for q in 0..queries {
        let z = prior.draw(&mut r);
        let m = r.gen_range(1..=16);
        let start = r.gen_range(0..task.test.len() - m);
        let inputs = &task.test.inputs[start..start + m];
        if q % 2 == 0 {
            let a = local.query_logits(&task.projection, &z, inputs).map_err(|e| e.to_string())?;
            let b = remote.query_logits(&task.projection, &z, inputs).map_err(|e| e.to_string())?;
            for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
                worst = worst.max((x - y).abs());
            }
        } else {
            let decode = if q % 4 == 1 { Decode::Argmax } else { Decode::Sample };
            let s: u64 = r.gen();
            let a = local.query_labels(&task.projection, &z, inputs, decode, &mut rng::seeded(s)).map_err(|e| e.to_string())?;
            let b = remote.query_labels(&task.projection, &z, inputs, decode, &mut rng::seeded(s)).map_err(|e| e.to_string())?;
            if a != b {
                return Err(format!("query {q}: labels differ {a:?} vs {b:?}"));
            }
            label_rows += a.len();
        }
    }
    Ok((worst, label_rows))
}

fn criterion_9() -> Outcome {
    let task = make_synthetic_task(&TaskConfig { classes: 3, seed: 9, ..TaskConfig::default() }).unwrap();
    let local = task.simulator();

    let listener = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let addr = listener.local_addr().unwrap().to_string();
    let backend: Arc<dyn Backend> = Arc::new(task.classifier.clone());
    std::thread::spawn(move || protocol::serve_tcp(backend, vec![QueryMode::Logits, QueryMode::Labels], listener));
    let tcp = ExternalSimulator::connect(&Endpoint::Tcp { addr }, Duration::from_secs(30)).map_err(|e| e.to_string())?;
    let (tcp_worst, tcp_labels) = compare_backends(&local, &Simulator::new(tcp), &task, 1000, 1)?;

    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("task.json");
    fs::write(&cfg_path, serde_json::to_string(&task.config).unwrap()).unwrap();
    let endpoint = Endpoint::Command {
        program: env!("CARGO_BIN_EXE_lfprompt").into(),
        args: vec!["serve".into(), "--config".into(), cfg_path.display().to_string()],
    };
    let child = ExternalSimulator::connect(&endpoint, Duration::from_secs(30)).map_err(|e| e.to_string())?;
    let (child_worst, child_labels) = compare_backends(&local, &Simulator::new(child), &task, 1000, 2)?;

    let worst = tcp_worst.max(child_worst);
    check(worst <= 1e-9, format!("max logits deviation {worst:e}"))?;
    Ok(format!(
        "1000 queries each over TCP and a child process; max probability deviation {worst:.1e}; {} label rows identical",
        tcp_labels + child_labels
    ))
}

// ---------------------------------------------------------------- criterion 10

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut compared = 0;
    for method in [Method::AbcSmc, Method::Ensembles, Method::Gfvi] {
        let task = TaskSpec::Synthetic(TaskConfig { seed: 10, ..TaskConfig::default() });
        let mut cfg = ExperimentConfig::new(task, method, 42);
        cfg.es.max_generations = 60;
        cfg.trace = true;
        let mut outs = Vec::new();
        for run in 0..2 {
            let out = dir.path().join(format!("{}_{run}", method.name()));
            cfg.out = Some(out.clone());
            run_experiment(&cfg).map_err(|e| e.to_string())?;
            outs.push(out);
        }
        let mut names: Vec<String> = fs::read_dir(&outs[0])
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .filter(|n| n == "summary.json" || n.starts_with("curve_"))
            .collect();
        names.sort();
        check(names.len() == 7, format!("{}: expected summary + 6 curves, found {names:?}", method.name()))?;
        for name in &names {
            let a = fs::read(outs[0].join(name)).unwrap();
            let b = fs::read(outs[1].join(name)).unwrap();
            check(a == b, format!("{}: {name} differs between runs", method.name()))?;
            compared += 1;
        }
    }
    Ok(format!("{compared} files byte-identical across repeated runs (abc_smc, ensembles, gfvi)"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("optimizer correctness", criterion_1),
        ("ELBO machinery", criterion_2),
        ("ABC-SMC contract", criterion_3),
        ("posterior usefulness", criterion_4),
        ("weight machinery", criterion_5),
        ("indicator predictive exactness", criterion_6),
        ("metric exactness", criterion_7),
        ("ensemble-vs-point trend", criterion_8),
        ("protocol fidelity", criterion_9),
        ("determinism", criterion_10),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
