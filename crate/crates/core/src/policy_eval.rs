//! Off-policy evaluation with linear features on random tabular MDPs:
//! TD(0), TDC, and TDC with operator-averaged update directions.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::SimRng;

/// Independent random stream `id` derived from `seed`.
pub fn stream(seed: u64, id: u64) -> SimRng {
    let mut r = SimRng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

const MDP_STREAM: u64 = 1;
const SETUP_STREAM: u64 = 2;
const TRAJECTORY_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TabularMDP {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    /// `P[(s * n_actions + a) * n_states + s']`.
    pub p: Vec<f64>,
    #[serde(skip)]
    cdf: Vec<f64>,
}

impl TabularMDP {
    pub fn from_probabilities(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        p: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || p.len() != n_states * n_actions * n_states {
            return Err(Error::InvalidParameter(
                "transition tensor has the wrong size".into(),
            ));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "discount must lie in (0, 1), got {gamma}"
            )));
        }
        let mut cdf = Vec::with_capacity(p.len());
        for row in p.chunks(n_states) {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidParameter(
                    "transition rows must be stochastic".into(),
                ));
            }
            let mut acc = 0.0;
            for &v in row {
                acc += v;
                cdf.push(acc);
            }
            // Any u ∈ [0, 1) must land inside the row.
            *cdf.last_mut().unwrap() = f64::INFINITY;
        }
        Ok(Self {
            n_states,
            n_actions,
            gamma,
            p,
            cdf,
        })
    }

    pub fn prob(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.p[(s * self.n_actions + a) * self.n_states + s2]
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let i = (s * self.n_actions + a) * self.n_states;
        &self.p[i..i + self.n_states]
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        let i = (s * self.n_actions + a) * self.n_states;
        let row = &self.cdf[i..i + self.n_states];
        let u: f64 = rng.random();
        // First index whose cumulative mass exceeds u; zero-mass entries are skipped.
        row.partition_point(|&c| c <= u)
    }
}

/// Entries i.i.d. Unif(0, 1), each `(s, a)` row normalized.
pub fn generate_mdp(
    seed: u64,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
) -> Result<TabularMDP> {
    if n_states < 2 || n_actions < 1 {
        return Err(Error::InvalidParameter(
            "need at least 2 states and 1 action".into(),
        ));
    }
    let mut rng = stream(seed, MDP_STREAM);
    let mut p = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        let row: Vec<f64> = (0..n_states).map(|_| rng.random::<f64>()).collect();
        let total: f64 = row.iter().sum();
        p.extend(row.into_iter().map(|v| v / total));
    }
    TabularMDP::from_probabilities(n_states, n_actions, gamma, p)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSetup {
    /// Target policy `π(a|s)` at `[s * n_actions + a]`.
    pub target: Vec<f64>,
    pub phi: DMatrix<f64>,
    pub theta_star: DVector<f64>,
    pub v_star: DVector<f64>,
    /// State reward observed for every action taken in `s`.
    pub reward: DVector<f64>,
    pub p_pi: DMatrix<f64>,
}

impl EvalSetup {
    pub fn bellman_residual(&self, gamma: f64) -> f64 {
        (&self.v_star - (&self.reward + &self.p_pi * &self.v_star * gamma)).norm()
    }

    pub fn features(&self, s: usize) -> DVector<f64> {
        self.phi.row(s).transpose()
    }
}

fn softmax_rows(logits: &[f64], n_actions: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(n_actions) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / z));
    }
    out
}

fn full_column_rank(phi: &DMatrix<f64>) -> bool {
    let sv = phi.clone().singular_values();
    let max = sv.max();
    sv.iter().all(|&v| v > 1e-10 * max.max(1.0))
}

/// Softmax target policy with N(0,1) logits, N(0,1) features and `θ*`, and
/// state rewards `R = (I − γ P^π) Φ θ*` so that `V^π = Φ θ*` exactly.
pub fn make_eval_setup(mdp: &TabularMDP, seed: u64, d: usize) -> Result<EvalSetup> {
    if d == 0 || d > mdp.n_states {
        return Err(Error::InvalidParameter(format!(
            "feature dimension must be in [1, {}], got {d}",
            mdp.n_states
        )));
    }
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut rng = stream(seed, SETUP_STREAM);
    let logits: Vec<f64> = (0..ns * na).map(|_| rng.sample(StandardNormal)).collect();
    let target = softmax_rows(&logits, na);

    let mut phi = DMatrix::from_fn(ns, d, |_, _| rng.sample(StandardNormal));
    if !full_column_rank(&phi) {
        phi = DMatrix::from_fn(ns, d, |_, _| rng.sample(StandardNormal));
        if !full_column_rank(&phi) {
            return Err(Error::Singular("feature matrix is rank deficient"));
        }
    }
    let theta_star = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));

    let p_pi = DMatrix::from_fn(ns, ns, |s, s2| {
        (0..na)
            .map(|a| target[s * na + a] * mdp.prob(s, a, s2))
            .sum()
    });
    let v_star = &phi * &theta_star;
    let reward = &v_star - &p_pi * &v_star * mdp.gamma;
    Ok(EvalSetup {
        target,
        phi,
        theta_star,
        v_star,
        reward,
        p_pi,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TdAlgorithm {
    Td,
    Tdc,
    FastTdc,
}

impl TdAlgorithm {
    pub const ALL: [TdAlgorithm; 3] = [TdAlgorithm::Td, TdAlgorithm::Tdc, TdAlgorithm::FastTdc];

    pub fn name(&self) -> &'static str {
        match self {
            TdAlgorithm::Td => "td",
            TdAlgorithm::Tdc => "tdc",
            TdAlgorithm::FastTdc => "fast_tdc",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TdcState {
    /// Main weight (slow).
    pub theta: DVector<f64>,
    /// Auxiliary weight (fast).
    pub w: DVector<f64>,
    /// Averaged `(w, θ)` update directions, fast variant only.
    pub avg: Option<(DVector<f64>, DVector<f64>)>,
    pub s: usize,
}

impl TdcState {
    pub fn new(d: usize, s: usize, fast: bool) -> Self {
        let z = DVector::zeros(d);
        Self {
            theta: z.clone(),
            w: z.clone(),
            avg: fast.then(|| (z.clone(), z)),
            s,
        }
    }
}

/// One behavior-policy transition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub rho: f64,
}

pub fn sample_transition<R: Rng + ?Sized>(
    s: usize,
    setup: &EvalSetup,
    mdp: &TabularMDP,
    off_policy_correction: bool,
    rng: &mut R,
) -> Transition {
    let a = rng.random_range(0..mdp.n_actions);
    let s_next = mdp.sample_next(s, a, rng);
    let rho = if off_policy_correction {
        setup.target[s * mdp.n_actions + a] * mdp.n_actions as f64
    } else {
        1.0
    };
    Transition {
        s,
        a,
        r: setup.reward[s],
        s_next,
        rho,
    }
}

/// Raw TDC directions `(d_w, d_θ)`:
/// `d_w = (δ − φᵀw) φ`, `d_θ = ρ (φ − γ φ') (φᵀw)` with `δ = ρ (r + γ φ'ᵀθ − φᵀθ)`.
pub fn tdc_directions(
    theta: &DVector<f64>,
    w: &DVector<f64>,
    t: &Transition,
    setup: &EvalSetup,
    gamma: f64,
) -> (DVector<f64>, DVector<f64>) {
    let phi = setup.features(t.s);
    let phi_n = setup.features(t.s_next);
    let delta = t.rho * (t.r + gamma * phi_n.dot(theta) - phi.dot(theta));
    let pw = phi.dot(w);
    let d_w = &phi * (delta - pw);
    let d_theta = (phi - phi_n * gamma) * (t.rho * pw);
    (d_w, d_theta)
}

/// One update of the chosen algorithm with `α` on the auxiliary weight and
/// `β` on the main weight. TD(0) ignores `w` and uses `β` on `θ`.
pub fn tdc_update(
    state: &TdcState,
    t: &Transition,
    setup: &EvalSetup,
    gamma: f64,
    alg: TdAlgorithm,
    alpha: f64,
    beta: f64,
    lambda: f64,
) -> TdcState {
    let mut next = state.clone();
    next.s = t.s_next;
    match alg {
        TdAlgorithm::Td => {
            let phi = setup.features(t.s);
            let delta = t.rho
                * (t.r + gamma * setup.features(t.s_next).dot(&state.theta)
                    - phi.dot(&state.theta));
            next.theta += phi * (beta * delta);
        }
        TdAlgorithm::Tdc => {
            let (dw, dt) = tdc_directions(&state.theta, &state.w, t, setup, gamma);
            next.w += dw * alpha;
            next.theta += dt * beta;
        }
        TdAlgorithm::FastTdc => {
            let (dw, dt) = tdc_directions(&state.theta, &state.w, t, setup, gamma);
            let (aw, at) = state.avg.clone().unwrap_or_else(|| {
                let z = DVector::zeros(state.w.len());
                (z.clone(), z)
            });
            next.w += &aw * alpha;
            next.theta += &at * beta;
            next.avg = Some((
                aw * (1.0 - lambda) + dw * lambda,
                at * (1.0 - lambda) + dt * lambda,
            ));
        }
    }
    next
}

pub fn tdc_step<R: Rng + ?Sized>(
    state: &TdcState,
    setup: &EvalSetup,
    mdp: &TabularMDP,
    alg: TdAlgorithm,
    alpha: f64,
    beta: f64,
    lambda: f64,
    off_policy_correction: bool,
    rng: &mut R,
) -> TdcState {
    let t = sample_transition(state.s, setup, mdp, off_policy_correction, rng);
    tdc_update(state, &t, setup, mdp.gamma, alg, alpha, beta, lambda)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyEvalConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub d: usize,
    pub gamma: f64,
    /// Constant step on the auxiliary weight.
    pub alpha: f64,
    /// Constant step on the main weight.
    pub beta: f64,
    /// `λ_k = lambda_c / (k + lambda_shift)`.
    pub lambda_c: f64,
    pub lambda_shift: f64,
    pub off_policy_correction: bool,
}

impl Default for PolicyEvalConfig {
    fn default() -> Self {
        Self {
            n_states: 50,
            n_actions: 50,
            d: 10,
            gamma: 0.5,
            alpha: 2e-3,
            beta: 5e-4,
            lambda_c: 0.8,
            lambda_shift: 10.0,
            off_policy_correction: true,
        }
    }
}

impl PolicyEvalConfig {
    pub fn lambda(&self, k: usize) -> f64 {
        self.lambda_c / (k as f64 + self.lambda_shift)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.n_states < 2 {
            errs.push("n_states must be >= 2".to_string());
        }
        if self.n_actions < 1 {
            errs.push("n_actions must be >= 1".to_string());
        }
        if self.d < 1 || self.d > self.n_states {
            errs.push("d must be in [1, n_states]".to_string());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            errs.push("gamma must be in (0, 1)".to_string());
        }
        if !(self.alpha >= 0.0
            && self.beta >= 0.0
            && self.alpha.is_finite()
            && self.beta.is_finite())
        {
            errs.push("alpha and beta must be finite and nonnegative".to_string());
        }
        if !(self.lambda_c > 0.0 && self.lambda_shift > 0.0 && self.lambda_c <= self.lambda_shift) {
            errs.push("lambda schedule must satisfy 0 < lambda_c <= lambda_shift".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorTrace {
    pub algorithm: TdAlgorithm,
    pub ks: Vec<usize>,
    pub theta_err: Vec<f64>,
    pub aborted: Option<usize>,
}

impl ErrorTrace {
    pub fn final_error(&self) -> f64 {
        *self.theta_err.last().unwrap_or(&f64::NAN)
    }
}

/// One seed: builds the MDP and setup from `seed`, then runs `alg` along a
/// single behavior trajectory (the same trajectory for every algorithm)
/// starting at `θ = w = 0`.
pub fn run_policy_eval(
    cfg: &PolicyEvalConfig,
    alg: TdAlgorithm,
    horizon: usize,
    seed: u64,
    record_every: usize,
) -> Result<ErrorTrace> {
    let mdp = generate_mdp(seed, cfg.n_states, cfg.n_actions, cfg.gamma)?;
    let setup = make_eval_setup(&mdp, seed, cfg.d)?;
    run_on_setup(cfg, &mdp, &setup, alg, horizon, seed, record_every)
}

pub fn run_on_setup(
    cfg: &PolicyEvalConfig,
    mdp: &TabularMDP,
    setup: &EvalSetup,
    alg: TdAlgorithm,
    horizon: usize,
    seed: u64,
    record_every: usize,
) -> Result<ErrorTrace> {
    if horizon < 1 || record_every < 1 {
        return Err(Error::InvalidParameter(
            "T and record_every must be >= 1".into(),
        ));
    }
    let mut rng = stream(seed, TRAJECTORY_STREAM);
    let s0 = rng.random_range(0..mdp.n_states);
    let mut state = TdcState::new(cfg.d, s0, alg == TdAlgorithm::FastTdc);
    let err = |st: &TdcState| (&st.theta - &setup.theta_star).norm();
    let mut trace = ErrorTrace {
        algorithm: alg,
        ks: vec![0],
        theta_err: vec![err(&state)],
        aborted: None,
    };
    for k in 0..horizon {
        let t = sample_transition(state.s, setup, mdp, cfg.off_policy_correction, &mut rng);
        state = tdc_update(
            &state,
            &t,
            setup,
            mdp.gamma,
            alg,
            cfg.alpha,
            cfg.beta,
            cfg.lambda(k),
        );
        let kk = k + 1;
        if kk % record_every == 0 || kk == horizon {
            let e = err(&state);
            let wn = state.w.norm();
            if !e.is_finite() || e > 1e12 || !wn.is_finite() || wn > 1e12 {
                trace.aborted = Some(kk);
                return Ok(trace);
            }
            trace.ks.push(kk);
            trace.theta_err.push(e);
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mdp_rows_stochastic() {
        let m = generate_mdp(3, 20, 7, 0.5).unwrap();
        for s in 0..20 {
            for a in 0..7 {
                let row = m.row(s, a);
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn mdp_deterministic_small() {
        let a = generate_mdp(11, 2, 1, 0.5).unwrap();
        let b = generate_mdp(11, 2, 1, 0.5).unwrap();
        assert_eq!(a.p, b.p);
        assert_eq!(a.p.len(), 4);
        assert_ne!(generate_mdp(12, 2, 1, 0.5).unwrap().p, a.p);
        assert!(generate_mdp(1, 1, 1, 0.5).is_err());
    }

    #[test]
    fn sampled_transitions_have_mass() {
        let p = vec![0.0, 1.0, 0.0, 0.5, 0.0, 0.5, 1.0, 0.0, 0.0];
        let m = TabularMDP::from_probabilities(3, 1, 0.5, p).unwrap();
        let mut rng = stream(0, 9);
        for _ in 0..5000 {
            for s in 0..3 {
                let s2 = m.sample_next(s, 0, &mut rng);
                assert!(m.prob(s, 0, s2) > 0.0);
            }
        }
    }

    #[test]
    fn setup_realizable_and_softmax_normalized() {
        let m = generate_mdp(5, 50, 50, 0.5).unwrap();
        let st = make_eval_setup(&m, 5, 10).unwrap();
        assert!(st.bellman_residual(0.5) <= 1e-8);
        for row in st.target.chunks(50) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        assert_eq!(PolicyEvalConfig::default().gamma, 0.5);
        assert!(make_eval_setup(&m, 5, 51).is_err());
    }

    fn degenerate() -> (TabularMDP, EvalSetup) {
        let m = TabularMDP::from_probabilities(1, 1, 0.5, vec![1.0]).unwrap();
        let phi = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let theta_star = DVector::from_column_slice(&[0.5, -1.0]);
        let v = &phi * &theta_star;
        let setup = EvalSetup {
            target: vec![1.0],
            reward: &v * 0.5,
            p_pi: DMatrix::from_element(1, 1, 1.0),
            v_star: v,
            phi,
            theta_star,
        };
        (m, setup)
    }

    #[test]
    fn fixed_point_on_degenerate_mdp() {
        let (m, setup) = degenerate();
        let mut st = TdcState::new(2, 0, false);
        st.theta = setup.theta_star.clone();
        let mut rng = stream(1, 1);
        for alg in [TdAlgorithm::Td, TdAlgorithm::Tdc] {
            let n = tdc_step(&st, &setup, &m, alg, 0.1, 0.1, 0.5, true, &mut rng);
            assert_eq!(n, st);
        }
    }

    #[test]
    fn zero_steps_move_only_averages() {
        let m = generate_mdp(2, 5, 3, 0.5).unwrap();
        let setup = make_eval_setup(&m, 2, 3).unwrap();
        let mut rng = stream(2, 5);
        let mut st = TdcState::new(3, 0, false);
        st.w = DVector::from_element(3, 0.3);
        let n = tdc_step(
            &st,
            &setup,
            &m,
            TdAlgorithm::Tdc,
            0.0,
            0.0,
            0.5,
            true,
            &mut rng,
        );
        assert_eq!(
            (n.theta.clone(), n.w.clone()),
            (st.theta.clone(), st.w.clone())
        );

        let mut st = TdcState::new(3, 0, true);
        st.w = DVector::from_element(3, 0.3);
        let n = tdc_step(
            &st,
            &setup,
            &m,
            TdAlgorithm::FastTdc,
            0.0,
            0.0,
            0.5,
            true,
            &mut rng,
        );
        assert_eq!(
            (n.theta.clone(), n.w.clone()),
            (st.theta.clone(), st.w.clone())
        );
        assert_ne!(n.avg, st.avg);
    }

    #[test]
    fn uniform_target_gives_unit_ratios() {
        let m = generate_mdp(4, 6, 4, 0.5).unwrap();
        let mut setup = make_eval_setup(&m, 4, 3).unwrap();
        setup.target = vec![0.25; 24];
        let mut rng = stream(4, 4);
        for _ in 0..200 {
            let t = sample_transition(rng.random_range(0..6), &setup, &m, true, &mut rng);
            assert!((t.rho - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fast_with_unit_lambda_is_delayed_tdc() {
        let m = generate_mdp(8, 3, 2, 0.5).unwrap();
        let setup = make_eval_setup(&m, 8, 2).unwrap();
        let (alpha, beta) = (0.05, 0.02);
        let mut rng = stream(8, 3);
        let t0 = sample_transition(0, &setup, &m, true, &mut rng);
        let seed_dirs = tdc_directions(&DVector::zeros(2), &DVector::zeros(2), &t0, &setup, 0.5);

        let mut fast = TdcState::new(2, t0.s_next, true);
        fast.avg = Some(seed_dirs.clone());
        // Reference: TDC updates that apply the previous step's directions.
        let (mut th, mut w) = (DVector::<f64>::zeros(2), DVector::<f64>::zeros(2));
        let mut pending = seed_dirs;
        let mut s = t0.s_next;
        let mut rng_a = stream(8, 4);
        let mut rng_b = stream(8, 4);
        for _ in 0..100 {
            fast = tdc_step(
                &fast,
                &setup,
                &m,
                TdAlgorithm::FastTdc,
                alpha,
                beta,
                1.0,
                true,
                &mut rng_a,
            );
            let t = sample_transition(s, &setup, &m, true, &mut rng_b);
            let dirs = tdc_directions(&th, &w, &t, &setup, 0.5);
            w += &pending.0 * alpha;
            th += &pending.1 * beta;
            pending = dirs;
            s = t.s_next;
            assert!((&fast.theta - &th).norm() <= 1e-12 && (&fast.w - &w).norm() <= 1e-12);
        }
    }

    #[test]
    fn run_starts_at_initial_error_and_is_deterministic() {
        let cfg = PolicyEvalConfig {
            n_states: 10,
            n_actions: 4,
            d: 3,
            ..PolicyEvalConfig::default()
        };
        let a = run_policy_eval(&cfg, TdAlgorithm::FastTdc, 2000, 3, 100).unwrap();
        let m = generate_mdp(3, 10, 4, 0.5).unwrap();
        let setup = make_eval_setup(&m, 3, 3).unwrap();
        assert_eq!(a.theta_err[0], setup.theta_star.norm());
        assert_eq!(
            a,
            run_policy_eval(&cfg, TdAlgorithm::FastTdc, 2000, 3, 100).unwrap()
        );
        assert_eq!(*a.ks.last().unwrap(), 2000);
    }
}
