//! Classic and fast (operator-averaged) two-time-scale iterations, residual and
//! Lyapunov diagnostics, and the single-run driver.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::all_finite;
use crate::problem::{NoiseModel, RootProblem, Vector};
use crate::schedule::{ClassicScheduleParams, FastScheduleParams, StepSizes};

/// Divergence guard on residual and iterate norms.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;
/// Absolute slack on the per-step lemma inequalities.
pub const LEMMA_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct SolverState {
    pub k: usize,
    pub x: Vector,
    pub y: Vector,
    /// Operator averages `(f, g)`; `None` for the classic solver.
    pub averages: Option<(Vector, Vector)>,
}

impl SolverState {
    pub fn classic(x: Vector, y: Vector) -> Self {
        Self {
            k: 0,
            x,
            y,
            averages: None,
        }
    }

    pub fn fast(x: Vector, y: Vector, f: Vector, g: Vector) -> Self {
        Self {
            k: 0,
            x,
            y,
            averages: Some((f, g)),
        }
    }

    fn check_finite(&self) -> Result<()> {
        if !all_finite(&self.x) {
            return Err(Error::NonFinite {
                k: self.k,
                what: "x",
            });
        }
        if !all_finite(&self.y) {
            return Err(Error::NonFinite {
                k: self.k,
                what: "y",
            });
        }
        if let Some((f, g)) = &self.averages {
            if !all_finite(f) || !all_finite(g) {
                return Err(Error::NonFinite {
                    k: self.k,
                    what: "operator average",
                });
            }
        }
        Ok(())
    }
}

/// Source of operator samples `(F̃, G̃)` at a query point.
pub trait Oracle {
    fn sample(&mut self, x: &Vector, y: &Vector) -> Result<(Vector, Vector)>;
}

/// `F + ξ`, `G + ψ` with noise drawn from `rng`.
pub struct NoisyOracle<'a, R: Rng + ?Sized> {
    pub problem: &'a RootProblem,
    pub noise: &'a NoiseModel,
    pub rng: &'a mut R,
}

impl<R: Rng + ?Sized> Oracle for NoisyOracle<'_, R> {
    fn sample(&mut self, x: &Vector, y: &Vector) -> Result<(Vector, Vector)> {
        crate::problem::sample_noisy(self.problem, self.noise, x, y, self.rng)
    }
}

fn checked_sample<O: Oracle + ?Sized>(
    oracle: &mut O,
    state: &SolverState,
) -> Result<(Vector, Vector)> {
    let (fs, gs) = oracle.sample(&state.x, &state.y)?;
    if !all_finite(&fs) || !all_finite(&gs) {
        return Err(Error::NonFinite {
            k: state.k,
            what: "operator sample",
        });
    }
    Ok((fs, gs))
}

/// One fast iteration with explicit step sizes. The x- and y-updates use the
/// averages from before this step's sample is folded in.
pub fn fast_update<O: Oracle + ?Sized>(
    state: &SolverState,
    s: &StepSizes,
    oracle: &mut O,
) -> Result<SolverState> {
    let (f, g) = state.averages.as_ref().ok_or(Error::InvalidParameter(
        "fast update needs operator averages".into(),
    ))?;
    let (fs, gs) = checked_sample(oracle, state)?;
    let next = SolverState {
        k: state.k + 1,
        x: &state.x - f * s.alpha,
        y: &state.y - g * s.beta,
        averages: Some((
            f * (1.0 - s.lambda) + fs * s.lambda,
            g * (1.0 - s.gamma) + gs * s.gamma,
        )),
    };
    next.check_finite()?;
    Ok(next)
}

/// One classic iteration with explicit step sizes.
pub fn classic_update<O: Oracle + ?Sized>(
    state: &SolverState,
    alpha: f64,
    beta: f64,
    oracle: &mut O,
) -> Result<SolverState> {
    let (fs, gs) = checked_sample(oracle, state)?;
    let next = SolverState {
        k: state.k + 1,
        x: &state.x - fs * alpha,
        y: &state.y - gs * beta,
        averages: None,
    };
    next.check_finite()?;
    Ok(next)
}

pub fn fast_step<R: Rng + ?Sized>(
    state: &SolverState,
    problem: &RootProblem,
    noise: &NoiseModel,
    sched: &FastScheduleParams,
    rng: &mut R,
) -> Result<SolverState> {
    problem.check_dims(&state.x, &state.y)?;
    let mut oracle = NoisyOracle {
        problem,
        noise,
        rng,
    };
    fast_update(state, &sched.eval(state.k), &mut oracle)
}

pub fn classic_step<R: Rng + ?Sized>(
    state: &SolverState,
    problem: &RootProblem,
    noise: &NoiseModel,
    sched: &ClassicScheduleParams,
    rng: &mut R,
) -> Result<SolverState> {
    problem.check_dims(&state.x, &state.y)?;
    let (alpha, beta) = sched.eval(state.k);
    let mut oracle = NoisyOracle {
        problem,
        noise,
        rng,
    };
    classic_update(state, alpha, beta, &mut oracle)
}

/// Residual norms; `None` marks a component that cannot be computed (no
/// averages, no inner map, or no known solution).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Residuals {
    pub df: Option<f64>,
    pub dg: Option<f64>,
    pub xhat: Option<f64>,
    pub yhat: Option<f64>,
}

pub fn residuals(state: &SolverState, problem: &RootProblem) -> Result<Residuals> {
    problem.check_dims(&state.x, &state.y)?;
    let (fx, gx) = problem.evaluate_unchecked(&state.x, &state.y);
    let (df, dg) = match &state.averages {
        Some((f, g)) => (Some((f - fx).norm()), Some((g - gx).norm())),
        None => (None, None),
    };
    Ok(Residuals {
        df,
        dg,
        xhat: problem
            .inner_map_unchecked(&state.y)
            .map(|h| (&state.x - h).norm()),
        yhat: problem.solution().map(|(_, ys)| (&state.y - ys).norm()),
    })
}

fn need(v: Option<f64>, what: &'static str) -> Result<f64> {
    v.ok_or(Error::Unavailable(what))
}

/// `‖Δf‖² + ‖Δg‖² + ‖x̂‖² + ‖ŷ‖²`.
pub fn lyapunov_fast(r: &Residuals) -> Result<f64> {
    let df = need(r.df, "df")?;
    let dg = need(r.dg, "dg")?;
    let xh = need(r.xhat, "xhat")?;
    let yh = need(r.yhat, "yhat")?;
    Ok(df * df + dg * dg + xh * xh + yh * yh)
}

/// `‖ŷ‖² + (2 L_G/(μ_F μ_G)) (β/α) ‖x̂‖²`.
pub fn lyapunov_classic(
    r: &Residuals,
    alpha: f64,
    beta: f64,
    mu_f: f64,
    mu_g: f64,
    l_g: f64,
) -> Result<f64> {
    if alpha == 0.0 {
        return Err(Error::InvalidParameter("alpha_k must be nonzero".into()));
    }
    let xh = need(r.xhat, "xhat")?;
    let yh = need(r.yhat, "yhat")?;
    Ok(yh * yh + 2.0 * l_g / (mu_f * mu_g) * (beta / alpha) * xh * xh)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub residuals: Residuals,
    pub v_fast: Option<f64>,
    pub v_classic: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverSpec {
    Fast(FastScheduleParams),
    Classic(ClassicScheduleParams),
}

impl SolverSpec {
    pub fn is_fast(&self) -> bool {
        matches!(self, SolverSpec::Fast(_))
    }

    /// `(alpha, beta, lambda, gamma)` used at iteration `k`.
    fn steps(&self, k: usize) -> (f64, f64, Option<f64>, Option<f64>) {
        match self {
            SolverSpec::Fast(p) => {
                let s = p.eval(k);
                (s.alpha, s.beta, Some(s.lambda), Some(s.gamma))
            }
            SolverSpec::Classic(p) => {
                let (a, b) = p.eval(k);
                (a, b, None, None)
            }
        }
    }
}

/// Initial iterates: seeded standard normal draws, or fixed values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    #[default]
    Random,
    Fixed {
        x: Vec<f64>,
        y: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub solver: SolverSpec,
    pub noise: NoiseModel,
    pub horizon: usize,
    pub seed: u64,
    pub record_every: usize,
    pub debug_checks: bool,
    pub init: InitialState,
    /// Start the fast solver's averages at the first noisy sample instead of zero.
    pub warm_start: bool,
}

impl RunConfig {
    pub fn new(solver: SolverSpec, noise: NoiseModel, horizon: usize, seed: u64) -> Self {
        Self {
            solver,
            noise,
            horizon,
            seed,
            record_every: 1,
            debug_checks: false,
            init: InitialState::Random,
            warm_start: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Abort {
    pub k: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub records: Vec<TraceRecord>,
    pub aborted: Option<Abort>,
}

impl RunOutput {
    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }
}

pub fn initial_state<R: Rng + ?Sized>(
    problem: &RootProblem,
    cfg: &RunConfig,
    rng: &mut R,
) -> Result<SolverState> {
    let (x, y) = match &cfg.init {
        InitialState::Random => (
            Vector::from_fn(problem.dim_x(), |_, _| rng.sample(StandardNormal)),
            Vector::from_fn(problem.dim_y(), |_, _| rng.sample(StandardNormal)),
        ),
        InitialState::Fixed { x, y } => {
            (Vector::from_column_slice(x), Vector::from_column_slice(y))
        }
    };
    problem.check_dims(&x, &y)?;
    if !cfg.solver.is_fast() {
        return Ok(SolverState::classic(x, y));
    }
    let (f, g) = if cfg.warm_start {
        crate::problem::sample_noisy(problem, &cfg.noise, &x, &y, rng)?
    } else {
        (
            Vector::zeros(problem.dim_x()),
            Vector::zeros(problem.dim_y()),
        )
    };
    Ok(SolverState::fast(x, y, f, g))
}

fn make_record(
    state: &SolverState,
    problem: &RootProblem,
    spec: &SolverSpec,
) -> Result<TraceRecord> {
    let r = residuals(state, problem)?;
    let (alpha, beta, lambda, gamma) = spec.steps(state.k);
    let reg = problem.regularity();
    Ok(TraceRecord {
        k: state.k,
        alpha,
        beta,
        lambda,
        gamma,
        residuals: r,
        v_fast: lyapunov_fast(&r).ok(),
        v_classic: lyapunov_classic(&r, alpha, beta, reg.mu_f, reg.mu_g, reg.lip_g).ok(),
    })
}

fn diverged(state: &SolverState, r: &Residuals) -> bool {
    let big = |v: f64| !(v <= DIVERGENCE_THRESHOLD);
    [r.df, r.dg, r.xhat, r.yhat].into_iter().flatten().any(big)
        || big(state.x.norm())
        || big(state.y.norm())
}

/// Checks the four per-step norm bounds relating `(f, g)` and the step lengths
/// to the residuals. Skipped when `x̂` or `ŷ` is unavailable.
pub fn check_lemma_inequalities(
    prev: &SolverState,
    next: &SolverState,
    r: &Residuals,
    steps: &StepSizes,
    l: f64,
) -> Result<()> {
    let (Some((f, g)), Some(df), Some(dg), Some(xh), Some(yh)) =
        (&prev.averages, r.df, r.dg, r.xhat, r.yhat)
    else {
        return Ok(());
    };
    let g_rhs = dg + l * xh + l * (1.0 + l) * yh;
    let f_rhs = df + l * xh;
    let checks = [
        ("g_norm", g.norm(), g_rhs),
        ("f_norm", f.norm(), f_rhs),
        ("x_step", (&next.x - &prev.x).norm(), steps.alpha * f_rhs),
        ("y_step", (&next.y - &prev.y).norm(), steps.beta * g_rhs),
    ];
    for (which, lhs, rhs) in checks {
        if !(lhs <= rhs + LEMMA_TOL) {
            return Err(Error::LemmaViolation {
                which,
                k: prev.k,
                lhs,
                rhs,
            });
        }
    }
    Ok(())
}

/// Runs `horizon` iterations, recording `k = 0`, every `record_every`-th
/// iteration, and `k = horizon`. Divergence or non-finite values stop the run
/// and return the partial trace with `aborted` set; lemma violations (debug
/// mode) are hard errors.
pub fn run(problem: &RootProblem, cfg: &RunConfig) -> Result<RunOutput> {
    if cfg.horizon < 1 {
        return Err(Error::InvalidParameter("T must be >= 1".into()));
    }
    if cfg.record_every < 1 {
        return Err(Error::InvalidParameter("record_every must be >= 1".into()));
    }
    cfg.noise.validate()?;
    match &cfg.solver {
        SolverSpec::Fast(p) => p.check_basic()?,
        SolverSpec::Classic(p) => p.check_basic()?,
    }
    let mut rng = crate::rng_from_seed(cfg.seed);
    let mut state = initial_state(problem, cfg, &mut rng)?;
    let l = problem.lipschitz();
    let mut records = vec![make_record(&state, problem, &cfg.solver)?];
    let mut cur_res = records[0].residuals;

    for k in 0..cfg.horizon {
        let step = match &cfg.solver {
            SolverSpec::Fast(p) => {
                let s = p.eval(k);
                let mut oracle = NoisyOracle {
                    problem,
                    noise: &cfg.noise,
                    rng: &mut rng,
                };
                fast_update(&state, &s, &mut oracle).map(|n| (n, Some(s)))
            }
            SolverSpec::Classic(p) => {
                let (a, b) = p.eval(k);
                let mut oracle = NoisyOracle {
                    problem,
                    noise: &cfg.noise,
                    rng: &mut rng,
                };
                classic_update(&state, a, b, &mut oracle).map(|n| (n, None))
            }
        };
        let (next, steps) = match step {
            Ok(v) => v,
            Err(Error::NonFinite { k, what }) => {
                return Ok(RunOutput {
                    records,
                    aborted: Some(Abort {
                        k,
                        reason: format!("non-finite {what}"),
                    }),
                })
            }
            Err(e) => return Err(e),
        };
        if cfg.debug_checks {
            if let Some(s) = &steps {
                check_lemma_inequalities(&state, &next, &cur_res, s, l)?;
            }
        }
        state = next;
        let must_record = state.k % cfg.record_every == 0 || state.k == cfg.horizon;
        if cfg.debug_checks || must_record || state.k % 64 == 0 {
            cur_res = residuals(&state, problem)?;
            if diverged(&state, &cur_res) {
                if must_record {
                    records.push(make_record(&state, problem, &cfg.solver)?);
                }
                return Ok(RunOutput {
                    records,
                    aborted: Some(Abort {
                        k: state.k,
                        reason: "residual exceeded divergence threshold".into(),
                    }),
                });
            }
        }
        if must_record {
            records.push(make_record(&state, problem, &cfg.solver)?);
        }
    }
    Ok(RunOutput {
        records,
        aborted: None,
    })
}

pub const TRACE_HEADER: &str = "k,alpha,beta,lambda,gamma,df,dg,xhat,yhat,V_fast,V_classic";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_trace_csv<W: Write>(records: &[TraceRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER.split(','))?;
    for r in records {
        w.write_record([
            r.k.to_string(),
            r.alpha.to_string(),
            r.beta.to_string(),
            opt(r.lambda),
            opt(r.gamma),
            opt(r.residuals.df),
            opt(r.residuals.dg),
            opt(r.residuals.xhat),
            opt(r.residuals.yhat),
            opt(r.v_fast),
            opt(r.v_classic),
        ])?;
    }
    w.flush()?;
    Ok(())
}
