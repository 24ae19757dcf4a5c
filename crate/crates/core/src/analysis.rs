//! Monte-Carlo aggregation of Lyapunov traces, log-log rate fits, and the
//! statistical checks of the one-step recursion and the rate bound.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::problem::RootProblem;
use crate::schedule::FastScheduleParams;
use crate::solver::{run, RunConfig, RunOutput, SolverSpec};

/// Pointwise mean and standard error of `V` over replications. `V` is
/// `V_fast` for the fast solver and `V_classic` for the classic one.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanTrace {
    pub ks: Vec<usize>,
    pub mean_v: Vec<f64>,
    pub stderr_v: Vec<f64>,
    pub n_reps: usize,
    pub aborted: usize,
    pub solver: SolverSpec,
}

impl MeanTrace {
    /// Aggregates equally long series given in seed order.
    pub fn from_series(
        ks: Vec<usize>,
        series: &[Vec<f64>],
        solver: SolverSpec,
        aborted: usize,
    ) -> Result<Self> {
        let n = series.len();
        if n < 2 {
            return Err(Error::Analysis(format!(
                "need at least 2 completed runs, got {n}"
            )));
        }
        if series.iter().any(|s| s.len() != ks.len()) {
            return Err(Error::Analysis(
                "replications recorded different iterations".into(),
            ));
        }
        let nf = n as f64;
        let mut mean_v = Vec::with_capacity(ks.len());
        let mut stderr_v = Vec::with_capacity(ks.len());
        for i in 0..ks.len() {
            let m = series.iter().map(|s| s[i]).sum::<f64>() / nf;
            let ss = series.iter().map(|s| (s[i] - m).powi(2)).sum::<f64>();
            mean_v.push(m);
            stderr_v.push((ss / (nf - 1.0)).sqrt() / nf.sqrt());
        }
        Ok(Self {
            ks,
            mean_v,
            stderr_v,
            n_reps: n,
            aborted,
            solver,
        })
    }

    /// Pools two traces over the same iterations as if their replications had
    /// been aggregated together.
    pub fn merge(&self, other: &MeanTrace) -> Result<MeanTrace> {
        if self.ks != other.ks {
            return Err(Error::Analysis(
                "cannot merge traces with different iterations".into(),
            ));
        }
        let (na, nb) = (self.n_reps as f64, other.n_reps as f64);
        let n = na + nb;
        let mut mean_v = Vec::with_capacity(self.ks.len());
        let mut stderr_v = Vec::with_capacity(self.ks.len());
        for i in 0..self.ks.len() {
            let (ma, mb) = (self.mean_v[i], other.mean_v[i]);
            let m2a = self.stderr_v[i].powi(2) * na * (na - 1.0);
            let m2b = other.stderr_v[i].powi(2) * nb * (nb - 1.0);
            let delta = mb - ma;
            let m2 = m2a + m2b + delta * delta * na * nb / n;
            mean_v.push((na * ma + nb * mb) / n);
            stderr_v.push((m2 / (n - 1.0)).sqrt() / n.sqrt());
        }
        Ok(MeanTrace {
            ks: self.ks.clone(),
            mean_v,
            stderr_v,
            n_reps: self.n_reps + other.n_reps,
            aborted: self.aborted + other.aborted,
            solver: self.solver,
        })
    }
}

/// Lyapunov metric of one run, per record.
pub fn metric_series(out: &RunOutput, solver: &SolverSpec) -> Result<Vec<f64>> {
    out.records
        .iter()
        .map(|r| {
            let v = if solver.is_fast() {
                r.v_fast
            } else {
                r.v_classic
            };
            v.ok_or(Error::Unavailable(
                "Lyapunov value (needs inner map and known solution)",
            ))
        })
        .collect()
}

/// Runs replications with seeds `cfg.seed .. cfg.seed + n_reps` and aggregates
/// them in seed order, so the result does not depend on `workers`.
pub fn monte_carlo(
    problem: &RootProblem,
    cfg: &RunConfig,
    n_reps: usize,
    workers: Option<usize>,
) -> Result<MeanTrace> {
    if n_reps < 2 {
        return Err(Error::InvalidParameter("n_reps must be >= 2".into()));
    }
    let job = || -> Vec<Result<RunOutput>> {
        (0..n_reps)
            .into_par_iter()
            .map(|i| {
                let mut c = cfg.clone();
                c.seed = cfg.seed.wrapping_add(i as u64);
                run(problem, &c)
            })
            .collect()
    };
    let outputs = match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::Analysis(e.to_string()))?
            .install(job),
        None => job(),
    };

    let mut ks: Option<Vec<usize>> = None;
    let mut series = Vec::with_capacity(n_reps);
    let mut aborted = 0;
    for out in outputs {
        let out = out?;
        if out.aborted.is_some() {
            aborted += 1;
            continue;
        }
        let these: Vec<usize> = out.records.iter().map(|r| r.k).collect();
        if ks.is_none() {
            ks = Some(these);
        }
        series.push(metric_series(&out, &cfg.solver)?);
    }
    if aborted > 0 {
        log::warn!("{aborted} of {n_reps} replications diverged and were excluded");
    }
    MeanTrace::from_series(ks.unwrap_or_default(), &series, cfg.solver, aborted)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub n_points: usize,
}

/// OLS of `log(mean_V)` on `log(k+1)` over `k_min ≤ k ≤ k_max`, positive means only.
pub fn fit_rate(trace: &MeanTrace, k_min: usize, k_max: usize) -> Result<RateFit> {
    let pts: Vec<(f64, f64)> = trace
        .ks
        .iter()
        .zip(&trace.mean_v)
        .filter(|(&k, &m)| k >= k_min && k <= k_max && m > 0.0)
        .map(|(&k, &m)| (((k + 1) as f64).ln(), m.ln()))
        .collect();
    if pts.len() < 5 {
        return Err(Error::Analysis(format!(
            "rate fit needs at least 5 positive points in [{k_min}, {k_max}], got {}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx = pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let sxy = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    let syy = pts.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>();
    if sxx == 0.0 {
        return Err(Error::Analysis("rate fit needs distinct iterations".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse = pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum::<f64>();
    let r_squared = if syy <= f64::EPSILON * n {
        1.0
    } else {
        (1.0 - sse / syy).clamp(0.0, 1.0)
    };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        k_min,
        k_max,
        n_points: pts.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlaggedStep {
    pub k: usize,
    /// `lhs − rhs`; positive means the padded inequality failed.
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecursionReport {
    pub checked: usize,
    pub flagged: Vec<FlaggedStep>,
}

impl RecursionReport {
    pub fn violation_fraction(&self) -> f64 {
        if self.checked == 0 {
            0.0
        } else {
            self.flagged.len() as f64 / self.checked as f64
        }
    }
}

/// Flags `k` when `mean_V[k+1] > (1 − μ_G β_k) mean_V[k] + 2 λ_k² (Γ₁₁+Γ₂₂)`
/// plus three standard errors of each side.
pub fn check_one_step_recursion(
    trace: &MeanTrace,
    sched: &FastScheduleParams,
    mu_g: f64,
    gamma11: f64,
    gamma22: f64,
) -> Result<RecursionReport> {
    if trace.ks.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(Error::Analysis(
            "one-step recursion check needs consecutive iterations (record_every = 1)".into(),
        ));
    }
    let mut flagged = Vec::new();
    for i in 0..trace.ks.len().saturating_sub(1) {
        let k = trace.ks[i];
        let s = sched.eval(k);
        let rhs = (1.0 - mu_g * s.beta) * trace.mean_v[i]
            + 2.0 * s.lambda * s.lambda * (gamma11 + gamma22)
            + 3.0 * (trace.stderr_v[i + 1] + trace.stderr_v[i]);
        let lhs = trace.mean_v[i + 1];
        if lhs > rhs {
            flagged.push(FlaggedStep {
                k,
                margin: lhs - rhs,
            });
        }
    }
    Ok(RecursionReport {
        checked: trace.ks.len().saturating_sub(1),
        flagged,
    })
}

/// `h² V₀/(k+h+1)² + C_λ² (Γ₁₁+Γ₂₂)/(k+h+1)`.
pub fn theoretical_bound_fast(
    k: usize,
    sched: &FastScheduleParams,
    v0: f64,
    gamma11: f64,
    gamma22: f64,
) -> f64 {
    let d = k as f64 + sched.h + 1.0;
    sched.h * sched.h * v0 / (d * d) + sched.c_lambda * sched.c_lambda * (gamma11 + gamma22) / d
}

/// Iterations where `mean_V[k]` exceeds the bound plus three standard errors.
/// `V₀` is taken as the sample mean at the first record.
pub fn check_bound_domination(
    trace: &MeanTrace,
    sched: &FastScheduleParams,
    gamma11: f64,
    gamma22: f64,
) -> Vec<FlaggedStep> {
    let Some(&v0) = trace.mean_v.first() else {
        return Vec::new();
    };
    trace
        .ks
        .iter()
        .enumerate()
        .filter_map(|(i, &k)| {
            let rhs =
                theoretical_bound_fast(k, sched, v0, gamma11, gamma22) + 3.0 * trace.stderr_v[i];
            (trace.mean_v[i] > rhs).then(|| FlaggedStep {
                k,
                margin: trace.mean_v[i] - rhs,
            })
        })
        .collect()
}

/// CSV with columns `k,mean_V,stderr_V,bound` (bound left empty when `None`).
pub fn write_mean_trace_csv<W: Write>(
    trace: &MeanTrace,
    bound: Option<&dyn Fn(usize) -> f64>,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "mean_V", "stderr_V", "bound"])?;
    for i in 0..trace.ks.len() {
        let k = trace.ks[i];
        w.write_record([
            k.to_string(),
            trace.mean_v[i].to_string(),
            trace.stderr_v[i].to_string(),
            bound.map(|b| b(k).to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{scalar_instance, NoiseModel};
    use crate::rng_from_seed;
    use crate::solver::InitialState;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn synthetic(f: impl Fn(usize) -> f64, ks: Vec<usize>) -> MeanTrace {
        MeanTrace {
            mean_v: ks.iter().map(|&k| f(k)).collect(),
            stderr_v: vec![0.0; ks.len()],
            ks,
            n_reps: 2,
            aborted: 0,
            solver: SolverSpec::Fast(FastScheduleParams::tuned(1.0, 1.0, 1.0, 1.0, 1.0)),
        }
    }

    #[test]
    fn fit_exact_power_laws() {
        let ks: Vec<usize> = (0..200).map(|i| i * 50).collect();
        let t = synthetic(|k| 1.0 / (k + 1) as f64, ks.clone());
        let f = fit_rate(&t, 0, 10_000).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-6 && f.r_squared >= 0.999999);

        let t = synthetic(|k| ((k + 1) as f64).powf(-2.0 / 3.0), ks.clone());
        assert!((fit_rate(&t, 0, 10_000).unwrap().slope + 2.0 / 3.0).abs() < 1e-4);

        let t = synthetic(|_| 3.5, ks);
        let f = fit_rate(&t, 0, 10_000).unwrap();
        assert!(f.slope.abs() < 1e-12);
    }

    #[test]
    fn fit_needs_five_points() {
        let t = synthetic(|k| 1.0 / (k + 1) as f64, vec![1, 2, 3, 4, 5, 6]);
        assert!(fit_rate(&t, 2, 5).is_err());
        assert!(fit_rate(&t, 1, 5).is_ok());
        let t = synthetic(|k| if k == 3 { 0.0 } else { 1.0 }, vec![1, 2, 3, 4, 5]);
        assert!(fit_rate(&t, 0, 10).is_err());
    }

    #[test]
    fn bound_examples() {
        let s = FastScheduleParams::tuned(1.0, 1.0, 1.0, 1.0, 1.0);
        assert_eq!(theoretical_bound_fast(0, &s, 4.0, 0.0, 0.0), 1.0);
        let s = FastScheduleParams::tuned(2.0, 2.0, 1.0, 1.0, 5.0);
        let b = |k| theoretical_bound_fast(k, &s, 3.0, 0.0, 0.0);
        assert!((b(10) * 256.0 - 25.0 * 3.0).abs() < 1e-12);
        // Noise term dominates late with slope -1.
        let b = |k: usize| theoretical_bound_fast(k, &s, 3.0, 1.0, 1.0);
        let slope = (b(2_000_000).ln() - b(1_000_000).ln()) / (2f64.ln());
        assert!((slope + 1.0).abs() < 1e-3);
    }

    #[test]
    fn recursion_synthetic_equality_passes() {
        let s = FastScheduleParams::tuned(0.5, 0.5, 0.5, 0.3, 2.0);
        let mut mean = vec![2.0];
        for k in 0..50 {
            let st = s.eval(k);
            let next = (1.0 - st.beta) * mean[k] + 2.0 * st.lambda * st.lambda * 2.0;
            mean.push(next);
        }
        let t = MeanTrace {
            ks: (0..=50).collect(),
            stderr_v: vec![0.0; 51],
            mean_v: mean,
            n_reps: 10,
            aborted: 0,
            solver: SolverSpec::Fast(s),
        };
        let r = check_one_step_recursion(&t, &s, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(r.checked, 50);
        assert!(r.flagged.is_empty());

        let t2 = synthetic(|_| 1.0, vec![0, 2, 3]);
        assert!(check_one_step_recursion(&t2, &s, 1.0, 1.0, 1.0).is_err());
    }

    fn scalar_cfg(noise: NoiseModel, horizon: usize, seed: u64) -> RunConfig {
        let mut c = RunConfig::new(
            SolverSpec::Fast(FastScheduleParams::tuned(0.5, 0.5, 0.4, 0.2, 3.0)),
            noise,
            horizon,
            seed,
        );
        c.record_every = 1;
        c
    }

    #[test]
    fn zero_noise_fixed_init_has_zero_stderr_and_no_violations() {
        let p = scalar_instance();
        let mut cfg = scalar_cfg(NoiseModel::none(), 40, 5);
        cfg.init = InitialState::Fixed {
            x: vec![0.0],
            y: vec![0.0],
        };
        let t = monte_carlo(&p, &cfg, 3, None).unwrap();
        assert!(t.stderr_v.iter().all(|&s| s == 0.0));
        let SolverSpec::Fast(s) = cfg.solver else {
            unreachable!()
        };
        let r = check_one_step_recursion(&t, &s, 1.0, 0.0, 0.0).unwrap();
        assert!(r.flagged.is_empty());
    }

    #[test]
    fn monte_carlo_deterministic_and_worker_independent() {
        let p = scalar_instance();
        let cfg = scalar_cfg(NoiseModel::gaussian(1.0, 1.0).unwrap(), 60, 17);
        let a = monte_carlo(&p, &cfg, 8, Some(1)).unwrap();
        let b = monte_carlo(&p, &cfg, 8, Some(4)).unwrap();
        let c = monte_carlo(&p, &cfg, 8, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert!(monte_carlo(&p, &cfg, 1, None).is_err());
    }

    #[test]
    fn monte_carlo_matches_reference_loop() {
        // Independent scalar implementation of the fast scheme on F = x, G = y,
        // with its own random streams.
        let p = scalar_instance();
        let horizon = 200;
        let cfg = scalar_cfg(NoiseModel::gaussian(1.0, 1.0).unwrap(), horizon, 1000);
        let t = monte_carlo(&p, &cfg, 1000, None).unwrap();

        let SolverSpec::Fast(s) = cfg.solver else {
            unreachable!()
        };
        let n = 1000;
        let mut finals = Vec::with_capacity(n);
        for rep in 0..n {
            let mut rng = rng_from_seed(900_000 + rep as u64);
            let mut x: f64 = rng.sample(StandardNormal);
            let mut y: f64 = rng.sample(StandardNormal);
            let (mut f, mut g) = (0.0f64, 0.0f64);
            for k in 0..horizon {
                let st = s.eval(k);
                let fs = x + rng.sample::<f64, _>(StandardNormal);
                let gs = y + rng.sample::<f64, _>(StandardNormal);
                x -= st.alpha * f;
                y -= st.beta * g;
                f = (1.0 - st.lambda) * f + st.lambda * fs;
                g = (1.0 - st.gamma) * g + st.gamma * gs;
            }
            finals.push((f - x).powi(2) + (g - y).powi(2) + x * x + y * y);
        }
        let m = finals.iter().sum::<f64>() / n as f64;
        let sd = (finals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        let se_ref = sd / (n as f64).sqrt();
        let last = t.mean_v.len() - 1;
        let diff = (t.mean_v[last] - m).abs();
        assert!(
            diff <= 3.0 * (t.stderr_v[last].powi(2) + se_ref.powi(2)).sqrt(),
            "{} vs {m}",
            t.mean_v[last]
        );
    }

    #[test]
    fn csv_export_columns() {
        let t = synthetic(|k| k as f64, vec![0, 1, 2]);
        let mut buf = Vec::new();
        write_mean_trace_csv(&t, None, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("k,mean_V,stderr_V,bound\n0,0,0,\n"));
    }

    proptest! {
        #[test]
        fn merge_equal_counts_averages_means(
            a in proptest::collection::vec(0.0..10.0f64, 1..20),
            b_shift in -1.0..1.0f64,
            n in 2usize..50,
        ) {
            let ks: Vec<usize> = (0..a.len()).collect();
            let spec = SolverSpec::Fast(FastScheduleParams::tuned(1.0, 1.0, 1.0, 1.0, 1.0));
            let ta = MeanTrace { ks: ks.clone(), mean_v: a.clone(), stderr_v: vec![0.1; a.len()], n_reps: n, aborted: 0, solver: spec };
            let tb = MeanTrace { ks, mean_v: a.iter().map(|v| v + b_shift).collect(), stderr_v: vec![0.2; a.len()], n_reps: n, aborted: 0, solver: spec };
            let m = ta.merge(&tb).unwrap();
            for i in 0..a.len() {
                prop_assert!((m.mean_v[i] - 0.5 * (ta.mean_v[i] + tb.mean_v[i])).abs() <= 1e-12);
            }
            prop_assert_eq!(m.n_reps, 2 * n);
        }

        #[test]
        fn merge_matches_pooled_aggregation(
            xs in proptest::collection::vec(-5.0..5.0f64, 4..30),
            split in 2usize..100,
        ) {
            let split = 2 + split % (xs.len() - 3);
            let spec = SolverSpec::Fast(FastScheduleParams::tuned(1.0, 1.0, 1.0, 1.0, 1.0));
            let series: Vec<Vec<f64>> = xs.iter().map(|&v| vec![v]).collect();
            let all = MeanTrace::from_series(vec![0], &series, spec, 0).unwrap();
            let a = MeanTrace::from_series(vec![0], &series[..split], spec, 0).unwrap();
            let b = MeanTrace::from_series(vec![0], &series[split..], spec, 0).unwrap();
            let m = a.merge(&b).unwrap();
            prop_assert!((m.mean_v[0] - all.mean_v[0]).abs() < 1e-12);
            prop_assert!((m.stderr_v[0] - all.stderr_v[0]).abs() < 1e-10);
        }
    }
}
