//! Acceptance suite: one PASS/FAIL line per criterion. Pass criterion
//! numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 4 9`.
//!
//! Failures are reported but only fail the process when
//! `MSDM_ACCEPTANCE_STRICT=1` is set; known failures are analysed in the
//! project's decision log.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use msdm_lab::cli::{CellStatus, SweepCell};
use msdm_lab::denoiser::{MlpConfig, MlpDenoiser};
use msdm_lab::metrics::{si_sdr, si_sdr_i, summarize, ChunkEval, EvalSummary};
use msdm_lab::numkit::{Mat, Rng};
use msdm_lab::oracles::{gaussian_conditional, gaussian_flow_closed_form, gaussian_posterior_given_mixture};
use msdm_lab::samplers::{
    impute_many, run_chains, separate_batch, ImputationSpec, Likelihood, Prior, SamplerConfig, SeparationConfig, Task,
};
use msdm_lab::schedule::Schedule;
use msdm_lab::scores::{finite_diff_check, GaussianPrior, GmmPrior};
use msdm_lab::toyslakh::{correlated_prior, ColoringSpec};
use msdm_lab::SourceArray;
use statrs::distribution::{Binomial, DiscreteCDF};

type Outcome = Result<String, String>;

fn ensure(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, started: Instant, detail: String) -> Outcome {
    let took = started.elapsed();
    ensure(took <= limit, format!("{detail}; {took:.1?} (limit {limit:?})"))
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// One-sided sign test p-value for "a > b" over paired values, ties dropped.
fn sign_test(a: &[f64], b: &[f64]) -> (usize, usize, f64) {
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let n = a.iter().zip(b).filter(|(x, y)| x != y).count();
    if n == 0 {
        return (0, 0, 1.0);
    }
    let p = if wins == 0 {
        1.0
    } else {
        1.0 - Binomial::new(0.5, n as u64).unwrap().cdf(wins as u64 - 1)
    };
    (wins, n, p)
}

fn cfg(steps: usize, s_churn: f64, corrector_steps: usize, seed: u64) -> SamplerConfig {
    SamplerConfig {
        steps,
        s_churn,
        corrector_steps,
        seed,
    }
}

fn scratch() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_msdm-lab"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "msdm-lab {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn read_cells(dir: &Path) -> Vec<SweepCell> {
    serde_json::from_str(&std::fs::read_to_string(dir.join("results.json")).unwrap()).unwrap()
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let prior = GaussianPrior::standard(1, 1).unwrap();
    let seed = 11;
    let draws = 1000;
    let mut errors = Vec::new();
    for steps in [150, 300, 600] {
        let sched = Schedule::new(steps, 1e-4, 1.0, 7.0).unwrap();
        let out = run_chains(Prior::Joint(&prior), Task::Generate, &sched, &cfg(steps, 0.0, 0, seed), draws, 0, None)
            .map_err(|e| e.to_string())?;
        let worst = out
            .iter()
            .enumerate()
            .map(|(k, x)| {
                // chain k starts from sigma_max times the first normal of its stream
                let x_t = sched.sigma(steps) * Rng::new(seed, k as u64).normal();
                (x.as_slice()[0] - gaussian_flow_closed_form(1.0, x_t, 0.0, sched.sigma(steps))).abs()
            })
            .fold(0.0, f64::max);
        errors.push(worst);
    }
    let monotone = errors.windows(2).all(|w| w[1] < w[0]);
    within(
        Duration::from_secs(5),
        started,
        ensure(
            errors[0] <= 5e-3 && monotone,
            format!("max |err| at I=150/300/600: {:.2e} / {:.2e} / {:.2e}", errors[0], errors[1], errors[2]),
        )?,
    )
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let prior = GaussianPrior::standard(2, 1).unwrap();
    let oracle = gaussian_posterior_given_mixture(&prior, &[1.0]).map_err(|e| e.to_string())?;
    let (m_ref, v_ref) = (oracle.mean[0], oracle.cov.row(0)[0]);
    let runs = 10_000;
    let sched = Schedule::paper_default();
    let ys = vec![vec![1.0]; runs];
    let mut lines = Vec::new();
    let mut ok = true;
    for (sep, tol) in [
        (SeparationConfig::dirac(cfg(150, 20.0, 1, 2024), 1), 0.15),
        (SeparationConfig::gaussian(cfg(150, 20.0, 1, 2024), 0.75), 0.25),
    ] {
        let out = separate_batch(Prior::Joint(&prior), &ys, &sched, &sep, 0).map_err(|e| e.to_string())?;
        let x1: Vec<f64> = out.iter().map(|x| x.as_slice()[0]).collect();
        let (m, v) = mean_var(&x1);
        let mean_ok = (m - m_ref).abs() <= 3.0 * (v_ref / runs as f64).sqrt();
        let var_ok = (v - v_ref).abs() <= tol * v_ref;
        ok &= mean_ok && var_ok;
        lines.push(format!("{}: mean {m:.4} (oracle {m_ref}), var {v:.4} (oracle {v_ref}, tol {:.0}%)", sep.likelihood, tol * 100.0));
    }
    within(Duration::from_secs(120), started, ensure(ok, lines.join("; "))?)
}

fn criterion_3() -> Outcome {
    let dir = scratch().join("c3");
    let _ = std::fs::remove_dir_all(&dir);
    let started = Instant::now();
    cli(&["sweep", "--out", dir.to_str().unwrap()])?;
    let cells = read_cells(&dir);
    let dirac: Vec<&SweepCell> = cells.iter().filter(|c| c.likelihood == Likelihood::Dirac).collect();
    let worst = dirac.iter().filter_map(|c| c.max_rel_residual).fold(0.0, f64::max);
    let chunks: usize = dirac.iter().map(|c| c.n_chunks).sum();
    // a diverged cell has no residual and counts as a violation
    let violations = dirac.iter().filter(|c| !c.max_rel_residual.is_some_and(|r| r <= 1e-6)).count();
    let diverged = cells.iter().filter(|c| c.status != CellStatus::Ok).count();
    ensure(
        violations == 0 && !dirac.is_empty(),
        format!(
            "{} dirac cells (joint and weak, {chunks} separations) of a {}-cell grid ({diverged} gaussian cells unstable), worst max|sum-y|/max|y| {worst:.2e}, {violations} violations; {:.1?}",
            dirac.len(),
            cells.len(),
            started.elapsed()
        ),
    )
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let mut rng = Rng::new(4, 0);
    let len = 6;
    let a: Vec<f64> = (0..len * len).map(|_| rng.normal()).collect();
    let mut cov = Mat::zeros(len, len);
    for i in 0..len {
        for j in 0..len {
            cov.row_mut(i)[j] = (0..len).map(|k| a[i * len + k] * a[j * len + k]).sum::<f64>() / len as f64;
        }
    }
    let cov = cov.add_diag(0.1);
    let mean: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
    let gauss = GaussianPrior::new(2, 3, mean, cov).unwrap();

    let comp = |m: [f64; 2], v: [f64; 2], c: f64| {
        let cov = Mat::from_rows(&[&[v[0], c], &[c, v[1]]]);
        GaussianPrior::new(2, 1, m.to_vec(), cov).unwrap()
    };
    let gmm = GmmPrior::new(
        vec![0.5, 0.3, 0.2],
        vec![
            comp([-1.0, 1.0], [0.3, 0.5], 0.1),
            comp([1.5, -0.5], [0.2, 0.4], -0.15),
            comp([0.0, 2.0], [0.6, 0.1], 0.05),
        ],
    )
    .unwrap();

    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let sigma = (1e-3f64.ln() * (1.0 - rng.uniform())).exp();
        let x = SourceArray::from_vec(2, 3, (0..6).map(|_| 2.0 * rng.normal()).collect()).unwrap();
        let e = finite_diff_check(&gauss, &|p: &SourceArray| gauss.log_density(p.as_slice(), sigma), &x, sigma, 1e-5)
            .map_err(|e| e.to_string())?;
        worst.0 = worst.0.max(e);
        let x = SourceArray::from_vec(2, 1, vec![rng.uniform_range(-3.0, 3.0), rng.uniform_range(-2.0, 3.0)]).unwrap();
        let e = finite_diff_check(&gmm, &|p: &SourceArray| gmm.log_density(p.as_slice(), sigma), &x, sigma, 1e-6)
            .map_err(|e| e.to_string())?;
        worst.1 = worst.1.max(e);
    }
    within(
        Duration::from_secs(10),
        started,
        ensure(
            worst.0 <= 1e-5 && worst.1 <= 1e-4,
            format!("worst relative error: gaussian {:.2e}, 3-component gmm {:.2e} over 50 points", worst.0, worst.1),
        )?,
    )
}

fn grad_check(model: &MlpDenoiser, rng: &mut Rng, picks: &[usize]) -> f64 {
    let nd = model.config().n_sources * model.config().dim;
    let batch = 4;
    let x0: Vec<f64> = (0..batch * nd).map(|_| rng.normal()).collect();
    let noise: Vec<f64> = (0..batch * nd).map(|_| rng.normal()).collect();
    let sigmas: Vec<f64> = (0..batch).map(|_| rng.uniform_range(1e-3, 1.0)).collect();
    let (_, grad) = model.loss_and_grad(&x0, &sigmas, &noise);
    let mut probe = model.clone();
    let h = 1e-4;
    let mut worst = 0.0f64;
    for &i in picks {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = probe.loss_and_grad(&x0, &sigmas, &noise).0;
        probe.params_mut()[i] = orig - h;
        let down = probe.loss_and_grad(&x0, &sigmas, &noise).0;
        probe.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8));
    }
    worst
}

fn criterion_5() -> Outcome {
    let started = Instant::now();
    let mut rng = Rng::new(5, 0);
    let fresh = MlpDenoiser::new(MlpConfig::new(4, 64), 1).unwrap();
    // A fresh network has zero output weights, so half the picks come from
    // the output layer where the gradient is nonzero.
    let n = fresh.n_params();
    let out_layer = n - {
        let c = fresh.config();
        let last = *c.hidden.last().unwrap();
        let nd = c.n_sources * c.dim;
        last * nd + nd + nd * nd
    };
    let picks: Vec<usize> = (0..20)
        .map(|k| if k % 2 == 0 { rng.below(n) } else { out_layer + rng.below(n - out_layer) })
        .collect();
    let e_fresh = grad_check(&fresh, &mut rng, &picks);
    let random = MlpDenoiser::new_fully_random(MlpConfig::new(4, 64), 2).unwrap();
    let picks: Vec<usize> = (0..20).map(|_| rng.below(n)).collect();
    let e_random = grad_check(&random, &mut rng, &picks);
    within(
        Duration::from_secs(10),
        started,
        ensure(
            e_fresh <= 1e-4 && e_random <= 1e-4,
            format!("worst relative error on 20 params: fresh {e_fresh:.2e}, fully random {e_random:.2e}"),
        )?,
    )
}

const BENCH_SWEEP: &str = r#"
[sweep]
models = ["joint"]
likelihoods = ["dirac", "gaussian"]
s_churn = [20.0, 40.0]
constrained_sources = [0, 1, 2, 3]
gamma_coeffs = [0.75]
corrector_steps = 1
"#;

fn bench_sweep(name: &str, toml: &str, extra: &[&str]) -> Result<PathBuf, String> {
    let root = scratch();
    let dir = root.join(name);
    let _ = std::fs::remove_dir_all(&dir);
    let config = root.join(format!("{name}.toml"));
    std::fs::write(&config, toml).unwrap();
    let mut args = vec!["sweep", "--config", config.to_str().unwrap(), "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    cli(&args)?;
    Ok(dir)
}

fn criterion_6() -> Outcome {
    let started = Instant::now();
    let dir = bench_sweep("c6", BENCH_SWEEP, &[])?;
    let cells = read_cells(&dir);
    let all = |c: &SweepCell| c.summary.as_ref().map_or(f64::NAN, |s| s.all);
    let mut lines = Vec::new();
    let mut ok = true;
    for churn in [20.0, 40.0] {
        let gauss = cells
            .iter()
            .find(|c| c.likelihood == Likelihood::Gaussian && c.s_churn == churn)
            .ok_or("missing gaussian cell")?;
        for d in cells.iter().filter(|c| c.likelihood == Likelihood::Dirac && c.s_churn == churn) {
            let (wins, n, p) = sign_test(&d.chunk_means, &gauss.chunk_means);
            ok &= all(d) >= all(gauss) && p < 0.05 && d.n_chunks >= 200;
            lines.push(format!(
                "churn {churn} src {}: {:.2} vs {:.2} dB ({wins}/{n}, p={p:.1e})",
                d.constrained_source.unwrap(),
                all(d),
                all(gauss)
            ));
        }
    }
    ensure(ok, format!("dirac vs gaussian(0.75), {} chunks: {}; {:.1?}", cells[0].n_chunks, lines.join(", "), started.elapsed()))
}

fn criterion_7() -> Outcome {
    let started = Instant::now();
    let with = read_cells(&bench_sweep("c7-r1", BENCH_SWEEP, &[])?);
    let without = read_cells(&bench_sweep("c7-r0", &BENCH_SWEEP.replace("corrector_steps = 1", "corrector_steps = 0"), &[])?);
    let all = |c: &SweepCell| c.summary.as_ref().map_or(f64::NAN, |s| s.all);
    let mut lines = Vec::new();
    let mut ok = true;
    for r1 in with.iter().filter(|c| c.likelihood == Likelihood::Dirac) {
        let r0 = without
            .iter()
            .find(|c| c.likelihood == Likelihood::Dirac && c.s_churn == r1.s_churn && c.constrained_source == r1.constrained_source)
            .ok_or("missing R=0 cell")?;
        let (wins, n, p) = sign_test(&r1.chunk_means, &r0.chunk_means);
        ok &= all(r1) >= all(r0) && p < 0.05;
        lines.push(format!(
            "churn {} src {}: {:.2} vs {:.2} dB ({wins}/{n}, p={p:.1e})",
            r1.s_churn,
            r1.constrained_source.unwrap(),
            all(r1),
            all(r0)
        ));
    }
    ensure(ok, format!("dirac R=1 vs R=0: {}; {:.1?}", lines.join(", "), started.elapsed()))
}

fn criterion_8() -> Outcome {
    let started = Instant::now();
    let (n, d) = (4, 8);
    let prior = correlated_prior(n, d, 0.9, &ColoringSpec::default_for(n)).unwrap();
    let truth = prior.sample(&mut Rng::new(8, 1_000_000));
    let fixed = vec![1, 2, 3];
    let rows: Vec<Vec<f64>> = fixed.iter().map(|&s| truth.row(s).to_vec()).collect();
    let spec = ImputationSpec::new(n, fixed, SourceArray::from_rows(&rows).unwrap()).unwrap();
    let (mean, cov) = gaussian_conditional(&prior, &spec).map_err(|e| e.to_string())?;
    let runs = 5000;
    let out = impute_many(&prior, &spec, &Schedule::paper_default(), &cfg(150, 20.0, 1, 8), runs).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (k, m_ref) in mean.iter().enumerate() {
        let vals: Vec<f64> = out.iter().map(|x| x.row(0)[k]).collect();
        let (m, _) = mean_var(&vals);
        let se = (cov.row(k)[k] / runs as f64).sqrt();
        worst = worst.max((m - m_ref).abs() / se);
    }
    within(
        Duration::from_secs(120),
        started,
        ensure(
            worst <= 3.0,
            format!("{runs} imputations of source 0 (D={d}, S_churn 20, R=1): worst |mean - oracle| = {worst:.2} SE"),
        )?,
    )
}

fn golden_evals(path: &Path) -> Vec<ChunkEval> {
    let mut reader = csv::Reader::from_path(path).unwrap();
    reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            ChunkEval {
                track_id: r[0].to_string(),
                chunk_start: r[1].parse().unwrap(),
                si_sdr_i: (2..r.len()).map(|i| (!r[i].is_empty()).then(|| r[i].parse().unwrap())).collect(),
                mixture_residual: 0.0,
            }
        })
        .collect()
}

fn criterion_9() -> Outcome {
    let mut rng = Rng::new(9, 0);
    let target: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
    let est: Vec<f64> = target.iter().map(|t| t + 0.3 * rng.normal()).collect();
    let mix: Vec<f64> = target.iter().map(|t| t + rng.normal()).collect();
    let base = si_sdr(&target, &est).unwrap();
    let scale_dev = [0.5, 2.0, -1.0]
        .iter()
        .map(|c| {
            let scaled: Vec<f64> = est.iter().map(|v| c * v).collect();
            (si_sdr(&target, &scaled).unwrap() - base).abs()
        })
        .fold(0.0, f64::max);
    let zero = si_sdr_i(&target, &mix, &mix).unwrap();

    let golden = summarize(&golden_evals(&Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_eval.csv"))).unwrap();
    // per-source means 1, 3, 4, 2
    let golden_ok = golden.all == 2.5 && golden.per_source == vec![1.0, 3.0, 4.0, 2.0];

    // The CLI's eval with the identity separator against a direct computation.
    let dir = scratch().join("c9");
    let _ = std::fs::remove_dir_all(&dir);
    let config = scratch().join("c9.toml");
    std::fs::write(&config, "[dataset]\ntest = 40\n[eval]\nseparator = \"identity\"\n").unwrap();
    cli(&["eval", "--config", config.to_str().unwrap(), "--out", dir.to_str().unwrap()])?;
    let from_cli: EvalSummary = serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    let cfg = msdm_lab::cli::ExperimentConfig::load(&dir.join("config.resolved.toml")).map_err(|e| e.to_string())?;
    let data = msdm_lab::cli::build_dataset(&cfg).map_err(|e| e.to_string())?;
    let chunks = msdm_lab::cli::test_chunks(&cfg, &data.splits.test).map_err(|e| e.to_string())?;
    let truth: Vec<SourceArray> = chunks.iter().map(|c| c.stems.clone()).collect();
    let (_, direct) = msdm_lab::cli::score_estimates(&data.splits.test, &chunks, &truth).map_err(|e| e.to_string())?;

    ensure(
        scale_dev <= 1e-6 && zero == 0.0 && golden_ok && from_cli.all == direct.all,
        format!(
            "scale deviation {scale_dev:.1e} dB, si_sdr_i(mixture) = {zero}, golden All {} (expect 2.5), identity eval All {:.4} vs direct {:.4}",
            golden.all, from_cli.all, direct.all
        ),
    )
}

fn criterion_10() -> Outcome {
    let root = scratch();
    let train_dir = root.join("c10-train");
    let eval_dir = root.join("c10-eval");
    let _ = std::fs::remove_dir_all(&train_dir);
    let _ = std::fs::remove_dir_all(&eval_dir);
    let base = "[dataset]\nkind = \"harmonic\"\nseed = 7\n[train]\nsteps = 20000\n";
    let train_cfg = root.join("c10-train.toml");
    std::fs::write(&train_cfg, base).unwrap();
    let started = Instant::now();
    cli(&["train", "--config", train_cfg.to_str().unwrap(), "--out", train_dir.to_str().unwrap(), "--workers", "1"])?;
    let train_time = started.elapsed();
    let ckpt = train_dir.join("model.ckpt");
    let eval_cfg = root.join("c10-eval.toml");
    std::fs::write(
        &eval_cfg,
        format!("{base}[model]\nkind = \"denoiser\"\ncheckpoint = {:?}\n", ckpt.to_str().unwrap()),
    )
    .unwrap();
    cli(&["eval", "--config", eval_cfg.to_str().unwrap(), "--out", eval_dir.to_str().unwrap()])?;
    let summary: EvalSummary = serde_json::from_str(&std::fs::read_to_string(eval_dir.join("summary.json")).unwrap()).unwrap();
    ensure(
        summary.all > 0.0 && train_time <= Duration::from_secs(600),
        format!(
            "learned joint score, dirac: All {:.2} dB over {} test chunks; training took {train_time:.1?} on one worker",
            summary.all, summary.n_chunks
        ),
    )
}

fn criterion_11() -> Outcome {
    let a = bench_sweep("c11-a", BENCH_SWEEP, &[])?;
    let b = bench_sweep("c11-b", BENCH_SWEEP, &["--workers", "1"])?;
    let csv_a = std::fs::read(a.join("results.csv")).unwrap();
    let csv_b = std::fs::read(b.join("results.csv")).unwrap();
    ensure(
        csv_a == csv_b && !csv_a.is_empty(),
        format!("criterion 6 sweep repeated (second run on one worker): {} CSV bytes, identical: {}", csv_a.len(), csv_a == csv_b),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("integrator accuracy", criterion_1),
        ("separation posterior moments", criterion_2),
        ("sum-to-mixture invariant", criterion_3),
        ("score correctness", criterion_4),
        ("denoiser gradient check", criterion_5),
        ("dirac beats gaussian", criterion_6),
        ("corrector benefit", criterion_7),
        ("imputation oracle", criterion_8),
        ("metric properties", criterion_9),
        ("end-to-end learned path", criterion_10),
        ("determinism", criterion_11),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        if std::env::var("MSDM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
