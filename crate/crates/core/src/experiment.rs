//! Runs a parsed [`ExperimentConfig`] and writes its artifacts: CSV traces,
//! `summary.json`, and `resolved_config.json` (the config with every derived
//! constant and default written out).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::analysis::{
    check_bound_domination, check_one_step_recursion, fit_rate, monte_carlo,
    theoretical_bound_fast, write_mean_trace_csv,
};
use crate::config::{emit, ExperimentConfig, ExperimentKind, SolverKind};
use crate::lqr::{actor_critic_run, lqr_cost, optimal_gain, AcVariant, JGapTrace, LqrInstance};
use crate::policy_eval::{generate_mdp, make_eval_setup, run_on_setup, ErrorTrace, TdAlgorithm};
use crate::problem::RootProblem;
use crate::schedule::{lemma_constants, validate_classic, validate_fast, ValidationReport};
use crate::solver::{run, write_trace_csv, RunConfig, SolverSpec};
use crate::{Error, Result};

/// What a finished experiment produced.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub output_dir: PathBuf,
    /// Files written, in write order.
    pub files: Vec<PathBuf>,
    /// Some run hit the divergence guard.
    pub diverged: bool,
    pub summary: Value,
}

impl Outcome {
    /// 0 on success, 2 when a run diverged.
    pub fn exit_code(&self) -> i32 {
        if self.diverged {
            2
        } else {
            0
        }
    }
}

struct Writer {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Writer {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        self.files.push(path.clone());
        Ok(BufWriter::new(File::create(path)?))
    }

    fn json(&mut self, name: &str, text: &str) -> Result<()> {
        let mut f = self.create(name)?;
        f.write_all(text.as_bytes())?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }
}

fn in_pool<T: Send>(workers: Option<usize>, job: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(w) => Ok(rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::Analysis(e.to_string()))?
            .install(job)),
        None => Ok(job()),
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome> {
    let resolved = cfg.resolved()?;
    let dir = resolved.output_dir();
    fs::create_dir_all(&dir).map_err(|e| {
        Error::Config(vec![format!(
            "output_dir: cannot create {}: {e}",
            dir.display()
        )])
    })?;
    let mut w = Writer {
        dir: dir.clone(),
        files: Vec::new(),
    };
    w.json("resolved_config.json", &emit(&resolved))?;
    log::info!(
        "running {} into {}",
        resolved.experiment.name(),
        dir.display()
    );

    let (summary, diverged) = match resolved.experiment {
        ExperimentKind::RootFind => root_find(&resolved, &mut w)?,
        ExperimentKind::RateStudy => rate_study(&resolved, &mut w)?,
        ExperimentKind::PolicyEval => policy_eval(&resolved, &mut w)?,
        ExperimentKind::Lqr => lqr(&resolved, &mut w)?,
    };
    w.json("summary.json", &serde_json::to_string_pretty(&summary)?)?;
    if diverged {
        log::warn!("at least one run diverged; see summary.json");
    }
    Ok(Outcome {
        output_dir: dir,
        files: w.files,
        diverged,
        summary,
    })
}

/// Schedule check against the problem's constants; the fast check scans the
/// whole horizon.
pub fn validate_schedule(
    spec: &SolverSpec,
    problem: &RootProblem,
    horizon: usize,
) -> ValidationReport {
    let reg = problem.regularity();
    match spec {
        SolverSpec::Fast(p) => validate_fast(p, reg.mu_f, reg.mu_g, reg.lipschitz(), horizon),
        SolverSpec::Classic(p) => validate_classic(p, reg.mu_f, reg.mu_g, reg.lip_g),
    }
}

fn problem_info(problem: &RootProblem, spec: &SolverSpec) -> Value {
    let reg = problem.regularity();
    let mut v = json!({
        "name": problem.name(),
        "dim_x": problem.dim_x(),
        "dim_y": problem.dim_y(),
        "regularity": reg,
        "L": reg.lipschitz(),
    });
    if let SolverSpec::Fast(_) = spec {
        if reg.mu_g <= reg.mu_f {
            v["lemma_constants"] = json!(lemma_constants(reg.mu_f, reg.mu_g, reg.lipschitz()));
        }
    }
    v
}

fn run_config(cfg: &ExperimentConfig, spec: SolverSpec) -> RunConfig {
    let mut rc = RunConfig::new(spec, cfg.noise, cfg.horizon, cfg.base_seed);
    rc.record_every = cfg.record_every;
    rc.debug_checks = cfg.debug_checks;
    rc.init = cfg.init.clone();
    rc.warm_start = cfg.warm_start;
    rc
}

fn root_find(cfg: &ExperimentConfig, w: &mut Writer) -> Result<(Value, bool)> {
    let problem = cfg.build_problem()?;
    let spec = cfg.solver_spec(&problem)?;
    let base = run_config(cfg, spec);
    let seeds: Vec<u64> = (0..cfg.n_reps)
        .map(|i| cfg.base_seed.wrapping_add(i as u64))
        .collect();
    let outputs = in_pool(cfg.workers, || {
        seeds
            .par_iter()
            .map(|&seed| {
                let mut rc = base.clone();
                rc.seed = seed;
                run(&problem, &rc)
            })
            .collect::<Vec<_>>()
    })?;

    let mut runs = Vec::new();
    let mut aborted = 0;
    for (seed, out) in seeds.iter().zip(outputs) {
        let out = out?;
        write_trace_csv(&out.records, w.create(&format!("trace_seed{seed}.csv"))?)?;
        aborted += usize::from(out.aborted.is_some());
        let last = out.last();
        runs.push(json!({
            "seed": seed,
            "final_k": last.map(|r| r.k),
            "residuals": last.map(|r| r.residuals),
            "V_fast": last.and_then(|r| r.v_fast),
            "V_classic": last.and_then(|r| r.v_classic),
            "aborted": out.aborted,
        }));
    }
    let summary = json!({
        "experiment": "root_find",
        "problem": problem_info(&problem, &spec),
        "schedule_validation": validate_schedule(&spec, &problem, cfg.horizon),
        "n_reps": cfg.n_reps,
        "aborted": aborted,
        "runs": runs,
    });
    Ok((summary, aborted > 0))
}

fn rate_study(cfg: &ExperimentConfig, w: &mut Writer) -> Result<(Value, bool)> {
    let problem = cfg.build_problem()?;
    let spec = cfg.solver_spec(&problem)?;
    let trace = monte_carlo(&problem, &run_config(cfg, spec), cfg.n_reps, cfg.workers)?;
    let (k_min, k_max) = cfg.fit_window_or_default();
    let fit = fit_rate(&trace, k_min, k_max);
    let (g11, g22) = cfg.noise.traces();

    let mut summary = json!({
        "experiment": "rate_study",
        "problem": problem_info(&problem, &spec),
        "schedule_validation": validate_schedule(&spec, &problem, cfg.horizon),
        "n_reps": trace.n_reps,
        "aborted": trace.aborted,
        "slope": fit.as_ref().ok().map(|f| f.slope),
        "intercept": fit.as_ref().ok().map(|f| f.intercept),
        "r_squared": fit.as_ref().ok().map(|f| f.r_squared),
        "fit_window": [k_min, k_max],
        "violations": Value::Null,
        "bound_violations": Value::Null,
    });
    if let Err(e) = &fit {
        summary["fit_error"] = json!(e.to_string());
    }

    let out = w.create("mean_trace.csv")?;
    match spec {
        SolverSpec::Fast(p) => {
            let v0 = trace.mean_v.first().copied().unwrap_or(0.0);
            let bound = move |k: usize| theoretical_bound_fast(k, &p, v0, g11, g22);
            write_mean_trace_csv(&trace, Some(&bound), out)?;
            summary["bound_violations"] = json!(check_bound_domination(&trace, &p, g11, g22).len());
            match check_one_step_recursion(&trace, &p, problem.mu_g(), g11, g22) {
                Ok(rep) => {
                    summary["violations"] = json!(rep.flagged.len());
                    summary["violation_fraction"] = json!(rep.violation_fraction());
                }
                Err(e) => summary["recursion_check"] = json!(e.to_string()),
            }
        }
        SolverSpec::Classic(_) => write_mean_trace_csv(&trace, None, out)?,
    }
    Ok((summary, trace.aborted > 0))
}

/// Pointwise mean over the traces that ran to completion.
fn mean_columns(traces: &[&[f64]]) -> Vec<f64> {
    let Some(first) = traces.first() else {
        return Vec::new();
    };
    (0..first.len())
        .map(|i| traces.iter().map(|t| t[i]).sum::<f64>() / traces.len() as f64)
        .collect()
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    xs.retain(|x| !x.is_nan());
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

fn write_columns(out: impl Write, header: [&str; 2], ks: &[usize], vals: &[f64]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(out);
    csv.write_record(header)?;
    for (k, v) in ks.iter().zip(vals) {
        csv.write_record([k.to_string(), v.to_string()])?;
    }
    csv.flush()?;
    Ok(())
}

fn policy_eval(cfg: &ExperimentConfig, w: &mut Writer) -> Result<(Value, bool)> {
    let pe = cfg.policy_eval.clone().unwrap_or_default();
    let seeds: Vec<u64> = (0..cfg.n_reps)
        .map(|i| cfg.base_seed.wrapping_add(i as u64))
        .collect();
    let per_seed: Vec<Result<Vec<ErrorTrace>>> = in_pool(cfg.workers, || {
        seeds
            .par_iter()
            .map(|&seed| {
                let mdp = generate_mdp(seed, pe.n_states, pe.n_actions, pe.gamma)?;
                let setup = make_eval_setup(&mdp, seed, pe.d)?;
                TdAlgorithm::ALL
                    .iter()
                    .map(|&alg| {
                        run_on_setup(&pe, &mdp, &setup, alg, cfg.horizon, seed, cfg.record_every)
                    })
                    .collect()
            })
            .collect()
    })?;
    let per_seed = per_seed.into_iter().collect::<Result<Vec<_>>>()?;

    let mut summary = json!({ "experiment": "policy_eval", "n_reps": cfg.n_reps, "seeds": seeds });
    let mut diverged = false;
    for (j, alg) in TdAlgorithm::ALL.iter().enumerate() {
        let traces: Vec<&ErrorTrace> = per_seed.iter().map(|s| &s[j]).collect();
        let complete: Vec<&[f64]> = traces
            .iter()
            .filter(|t| t.aborted.is_none())
            .map(|t| t.theta_err.as_slice())
            .collect();
        let ks = traces
            .iter()
            .find(|t| t.aborted.is_none())
            .map(|t| t.ks.clone())
            .unwrap_or_default();
        write_columns(
            w.create(&format!("{}.csv", alg.name()))?,
            ["k", "theta_err"],
            &ks,
            &mean_columns(&complete),
        )?;
        let finals: Vec<f64> = traces.iter().map(|t| t.final_error()).collect();
        let aborted = traces.iter().filter(|t| t.aborted.is_some()).count();
        diverged |= aborted > 0;
        let mean_final = (!complete.is_empty())
            .then(|| complete.iter().map(|t| t[t.len() - 1]).sum::<f64>() / complete.len() as f64);
        summary[alg.name()] = json!({
            "final_errors": finals,
            "mean_final_error": mean_final,
            "mean_initial_error": mean_columns(&complete).first(),
            "aborted": aborted,
        });
    }
    Ok((summary, diverged))
}

fn lqr(cfg: &ExperimentConfig, w: &mut Writer) -> Result<(Value, bool)> {
    let block = cfg.lqr.clone().unwrap_or_default();
    let inst = LqrInstance::benchmark(block.sigma);
    let k_star = optimal_gain(&inst)?;
    let j_star = lqr_cost(&inst, &k_star)?;
    w.json("instance.json", &serde_json::to_string_pretty(&inst)?)?;

    let variants = match cfg.solver {
        Some(SolverKind::Classic) => vec![AcVariant::Classic],
        Some(SolverKind::Fast) => vec![AcVariant::Fast],
        None => vec![AcVariant::Classic, AcVariant::Fast],
    };
    let seeds: Vec<u64> = (0..cfg.n_reps)
        .map(|i| cfg.base_seed.wrapping_add(i as u64))
        .collect();
    let mut summary = json!({
        "experiment": "lqr",
        "n_reps": cfg.n_reps,
        "seeds": seeds,
        "J_star": j_star,
        "K_star": k_star.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
    });
    let mut diverged = false;
    for variant in variants {
        let ac = block.variant_config(variant, cfg.horizon, cfg.record_every);
        let traces = in_pool(cfg.workers, || {
            seeds
                .par_iter()
                .map(|&seed| actor_critic_run(&inst, &ac, seed))
                .collect::<Vec<_>>()
        })?
        .into_iter()
        .collect::<Result<Vec<JGapTrace>>>()?;

        let complete: Vec<&JGapTrace> = traces.iter().filter(|t| t.aborted.is_none()).collect();
        let ks = complete.first().map(|t| t.ks.clone()).unwrap_or_default();
        let medians: Vec<f64> = (0..ks.len())
            .map(|i| median(complete.iter().map(|t| t.j_gap[i]).collect()).unwrap_or(f64::NAN))
            .collect();
        let name = match variant {
            AcVariant::Classic => "classic",
            AcVariant::Fast => "fast",
        };
        write_columns(
            w.create(&format!("{name}.csv"))?,
            ["k", "J_gap"],
            &ks,
            &medians,
        )?;

        let finals: Vec<f64> = traces.iter().map(|t| t.final_gap()).collect();
        let decreased = complete
            .iter()
            .filter(|t| {
                t.gap_at(cfg.horizon / 10)
                    .is_some_and(|early| t.final_gap() < early)
            })
            .count();
        let aborted = traces.len() - complete.len();
        diverged |= aborted > 0;
        summary[name] = json!({
            "final_gaps": finals,
            "median_final_gap": median(complete.iter().map(|t| t.final_gap()).collect()),
            "decreased_since_T_over_10": decreased,
            "aborted": aborted,
        });
    }
    Ok((summary, diverged))
}

/// Reads every file of an output directory (sorted by name), for determinism checks.
pub fn read_outputs(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            out.push((
                entry.file_name().to_string_lossy().into_owned(),
                fs::read(entry.path())?,
            ));
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn config_in(dir: &Path, body: &str) -> ExperimentConfig {
        let text = format!("{{\"output_dir\": {:?}, {body}}}", dir.to_string_lossy());
        parse_config(&text).unwrap()
    }

    #[test]
    fn rate_study_summary_has_slope() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config_in(
            tmp.path(),
            r#""experiment": "rate_study", "problem": "scalar", "solver": "fast",
               "schedule": {"fast": {"mode": "theory"}}, "T": 200, "n_reps": 4, "base_seed": 3,
               "noise": {"kind": "gaussian_iid", "gamma11": 1, "gamma22": 1}"#,
        );
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.exit_code(), 0);
        assert!(out.summary.get("slope").is_some());
        assert!(out.summary["slope"].is_number());
        let text = fs::read_to_string(tmp.path().join("summary.json")).unwrap();
        let v: Value = serde_json::from_str(&text).unwrap();
        assert!(v.get("slope").is_some());
        assert!(tmp.path().join("mean_trace.csv").exists());
        let resolved = fs::read_to_string(tmp.path().join("resolved_config.json")).unwrap();
        assert!(resolved.contains("786432"));
    }

    #[test]
    fn reruns_are_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let body = r#""problem": "tanh:0.5", "solver": "classic",
            "schedule": {"classic": {"alpha0": 1, "beta0": 0.5, "a": 0.6667, "b": 1}},
            "noise": {"kind": "gaussian_iid", "gamma11": 1, "gamma22": 1},
            "T": 300, "n_reps": 2, "record_every": 7, "base_seed": 11"#;
        run_experiment(&config_in(a.path(), body)).unwrap();
        run_experiment(&config_in(b.path(), body)).unwrap();
        let strip = |files: Vec<(String, Vec<u8>)>| {
            files
                .into_iter()
                .filter(|(n, _)| n.ends_with(".csv"))
                .collect::<Vec<_>>()
        };
        let fa = strip(read_outputs(a.path()).unwrap());
        assert_eq!(fa.len(), 2);
        assert_eq!(fa, strip(read_outputs(b.path()).unwrap()));
    }

    #[test]
    fn policy_eval_writes_three_csvs() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config_in(
            tmp.path(),
            r#""experiment": "policy_eval", "T": 200, "n_reps": 2, "record_every": 50,
               "policy_eval": {"n_states": 8, "n_actions": 3, "d": 3}"#,
        );
        run_experiment(&cfg).unwrap();
        for name in ["td.csv", "tdc.csv", "fast_tdc.csv"] {
            let text = fs::read_to_string(tmp.path().join(name)).unwrap();
            assert!(text.starts_with("k,theta_err\n"), "{name}");
            assert_eq!(text.lines().count(), 1 + 5, "{name}");
        }
    }

    #[test]
    fn divergence_gives_exit_code_two() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config_in(
            tmp.path(),
            r#""problem": "scalar", "solver": "classic",
               "schedule": {"classic": {"alpha0": 50, "beta0": 50, "a": 0, "b": 0}}, "T": 100"#,
        );
        let out = run_experiment(&cfg).unwrap();
        assert!(out.diverged);
        assert_eq!(out.exit_code(), 2);
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }
}
