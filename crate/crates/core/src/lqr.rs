//! Average-cost LQR: model-based oracles (policy Lyapunov equation, cost,
//! Riccati gain, rollout cost) and an online two-time-scale actor-critic in
//! classic and operator-averaged form.
//!
//! Critic: quadratic Q-function `Q̂(x, u) = zᵀ Ω z`, `z = [x; u]`, learned by
//! average-cost SARSA-style TD with a running cost estimate `Ĵ`.
//! Actor: `K ← K − β · 2 (Ω₂₂ K − Ω₂₁) x xᵀ`, the sampled natural form of
//! `∇J(K) = 2((R + BᵀPB)K − BᵀPA) Σ_K`. Exploration `u = −Kx + σε`, `ε ~ N(0, I)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::spectral_radius;
use crate::policy_eval::stream;

pub type Mat = DMatrix<f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqrInstance {
    pub a: Mat,
    pub b: Mat,
    pub q: Mat,
    pub r: Mat,
    pub psi: Mat,
    pub sigma: f64,
}

impl LqrInstance {
    /// The 3-state, 2-input benchmark system with `Q = I₃`, `R = I₂`, `Ψ = I₃`.
    pub fn benchmark(sigma: f64) -> Self {
        Self {
            a: Mat::from_row_slice(3, 3, &[0.5, 0.01, 0.0, 0.01, 0.5, 0.01, 0.0, 0.01, 0.5]),
            b: Mat::from_row_slice(3, 2, &[1.0, 0.1, 0.0, 0.1, 0.0, 0.1]),
            q: Mat::identity(3, 3),
            r: Mat::identity(2, 2),
            psi: Mat::identity(3, 3),
            sigma,
        }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// `Ψ_σ = Ψ + σ² B Bᵀ`.
    pub fn psi_sigma(&self) -> Mat {
        &self.psi + &self.b * self.b.transpose() * (self.sigma * self.sigma)
    }

    pub fn closed_loop(&self, k: &Mat) -> Mat {
        &self.a - &self.b * k
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n(), self.m());
        let dims = [
            ("A columns", n, self.a.ncols()),
            ("B rows", n, self.b.nrows()),
            ("Q rows", n, self.q.nrows()),
            ("Q columns", n, self.q.ncols()),
            ("R rows", m, self.r.nrows()),
            ("R columns", m, self.r.ncols()),
            ("Psi rows", n, self.psi.nrows()),
            ("Psi columns", n, self.psi.ncols()),
        ];
        for (what, expected, got) in dims {
            if expected != got {
                return Err(Error::Dimension {
                    what,
                    expected,
                    got,
                });
            }
        }
        for (name, mat) in [("Q", &self.q), ("R", &self.r)] {
            if (mat - mat.transpose()).norm() > 1e-12 || mat.clone().cholesky().is_none() {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be symmetric positive definite"
                )));
            }
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParameter("sigma must be nonnegative".into()));
        }
        Ok(())
    }
}

fn check_stabilizing(inst: &LqrInstance, k: &Mat) -> Result<()> {
    let rho = spectral_radius(&inst.closed_loop(k));
    if rho >= 1.0 {
        return Err(Error::NotStabilizing(rho));
    }
    Ok(())
}

const LYAPUNOV_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 1_000_000;

/// Solves `P = Q + KᵀRK + (A−BK)ᵀ P (A−BK)` by fixed-point iteration.
pub fn solve_policy_lyapunov(inst: &LqrInstance, k: &Mat) -> Result<Mat> {
    check_stabilizing(inst, k)?;
    let ak = inst.closed_loop(k);
    let c = &inst.q + k.transpose() * &inst.r * k;
    let mut p = c.clone();
    for _ in 0..MAX_SWEEPS {
        let next = &c + ak.transpose() * &p * &ak;
        let next = (&next + next.transpose()) * 0.5;
        let done = (&next - &p).norm() <= 1e-3 * LYAPUNOV_TOL;
        p = next;
        if done && lyapunov_residual(inst, k, &p) <= LYAPUNOV_TOL {
            return Ok(p);
        }
    }
    Err(Error::NoConvergence(MAX_SWEEPS))
}

/// Frobenius residual of the policy Lyapunov equation.
pub fn lyapunov_residual(inst: &LqrInstance, k: &Mat, p: &Mat) -> f64 {
    let ak = inst.closed_loop(k);
    (p - (&inst.q + k.transpose() * &inst.r * k + ak.transpose() * p * &ak)).norm()
}

/// `J(K) = tr(P_K Ψ_σ) + σ² tr(R)`.
pub fn lqr_cost(inst: &LqrInstance, k: &Mat) -> Result<f64> {
    let p = solve_policy_lyapunov(inst, k)?;
    Ok((&p * inst.psi_sigma()).trace() + inst.sigma * inst.sigma * inst.r.trace())
}

/// Riccati fixed point `P ← Q + AᵀPA − AᵀPB(R+BᵀPB)⁻¹BᵀPA`, then
/// `K* = (R+BᵀPB)⁻¹BᵀPA`.
pub fn optimal_gain(inst: &LqrInstance) -> Result<Mat> {
    if inst.b.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidParameter(
            "B = 0: no control authority".into(),
        ));
    }
    let (a, b) = (&inst.a, &inst.b);
    let mut p = inst.q.clone();
    for _ in 0..100_000 {
        let s = &inst.r + b.transpose() * &p * b;
        let s_inv = crate::linalg::inverse(&s, "R + BᵀPB")?;
        let next = &inst.q + a.transpose() * &p * a
            - a.transpose() * &p * b * &s_inv * b.transpose() * &p * a;
        let next = (&next + next.transpose()) * 0.5;
        let diff = (&next - &p).norm();
        p = next;
        if diff <= 1e-12 {
            let s = &inst.r + b.transpose() * &p * b;
            let s_inv = crate::linalg::inverse(&s, "R + BᵀPB")?;
            return Ok(s_inv * b.transpose() * &p * a);
        }
    }
    Err(Error::NoConvergence(100_000))
}

fn gaussian_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Lower Cholesky factor of `Ψ` (zero matrix allowed).
fn noise_factor(psi: &Mat) -> Result<Mat> {
    if psi.iter().all(|&v| v == 0.0) {
        return Ok(psi.clone());
    }
    psi.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or(Error::InvalidParameter(
            "Psi must be positive definite or zero".into(),
        ))
}

/// Rollout estimate of the average stage cost under `u = −Kx + σε`, from `x₀ = 0`.
pub fn simulate_average_cost(inst: &LqrInstance, k: &Mat, steps: usize, seed: u64) -> Result<f64> {
    check_stabilizing(inst, k)?;
    let lw = noise_factor(&inst.psi)?;
    let mut rng = stream(seed, 11);
    let mut x = DVector::zeros(inst.n());
    let burn = 1000;
    let mut total = 0.0;
    for t in 0..steps + burn {
        let u = -(k * &x) + gaussian_vec(inst.m(), &mut rng) * inst.sigma;
        if t >= burn {
            total += x.dot(&(&inst.q * &x)) + u.dot(&(&inst.r * &u));
        }
        x = &inst.a * &x + &inst.b * &u + &lw * gaussian_vec(inst.n(), &mut rng);
    }
    Ok(total / steps as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcVariant {
    Classic,
    Fast,
}

/// `c / (k + h + 1)^p`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerStep {
    pub c: f64,
    pub h: f64,
    pub p: f64,
}

impl PowerStep {
    pub fn at(&self, k: usize) -> f64 {
        self.c / (k as f64 + self.h + 1.0).powf(self.p)
    }

    fn check(&self, name: &str, errs: &mut Vec<String>) {
        if !(self.c >= 0.0 && self.c.is_finite() && self.h >= 0.0 && self.p >= 0.0 && self.p <= 1.0)
        {
            errs.push(format!("{name}: need c >= 0, h >= 0, 0 <= p <= 1"));
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorCriticConfig {
    pub variant: AcVariant,
    /// Critic step (fast time scale).
    pub critic: PowerStep,
    /// Actor step (slow time scale).
    pub actor: PowerStep,
    /// Averaging weight for the fast variant.
    pub lambda: PowerStep,
    pub horizon: usize,
    pub record_every: usize,
    /// Initial gain; zero when absent.
    #[serde(default)]
    pub k0: Option<Vec<Vec<f64>>>,
}

impl ActorCriticConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.horizon < 1 {
            errs.push("T must be >= 1".to_string());
        }
        if self.record_every < 1 {
            errs.push("record_every must be >= 1".to_string());
        }
        self.critic.check("critic", &mut errs);
        self.actor.check("actor", &mut errs);
        self.lambda.check("lambda", &mut errs);
        if self.variant == AcVariant::Fast && !(self.lambda.at(0) > 0.0 && self.lambda.at(0) <= 1.0)
        {
            errs.push("lambda_0 must lie in (0, 1]".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Learner state; `avg` holds averaged `(Ω, Ĵ, K)` directions for the fast variant.
#[derive(Clone, Debug, PartialEq)]
pub struct AcState {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub omega: Mat,
    pub j_hat: f64,
    pub k: Mat,
    pub avg: Option<(Mat, f64, Mat)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JGapTrace {
    pub variant: AcVariant,
    pub ks: Vec<usize>,
    pub j_gap: Vec<f64>,
    pub aborted: Option<usize>,
}

impl JGapTrace {
    pub fn final_gap(&self) -> f64 {
        *self.j_gap.last().unwrap_or(&f64::NAN)
    }

    /// Gap at the last record with `k ≤ target`.
    pub fn gap_at(&self, target: usize) -> Option<f64> {
        self.ks
            .iter()
            .rposition(|&k| k <= target)
            .map(|i| self.j_gap[i])
    }
}

fn stack(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied())
}

/// Raw directions `(D_Ω, D_J, D_K)` from one transition `(x, u, c, x', u')`.
fn directions(
    inst: &LqrInstance,
    st: &AcState,
    cost: f64,
    x_next: &DVector<f64>,
    u_next: &DVector<f64>,
) -> (Mat, f64, Mat) {
    let n = inst.n();
    let m = inst.m();
    let z = stack(&st.x, &st.u);
    let z_next = stack(x_next, u_next);
    let delta = cost - st.j_hat + z_next.dot(&(&st.omega * &z_next)) - z.dot(&(&st.omega * &z));
    let d_omega = &z * z.transpose() * delta;
    let d_j = cost - st.j_hat;
    let o22 = st.omega.view((n, n), (m, m));
    let o21 = st.omega.view((n, 0), (m, n));
    let grad = (o22 * &st.k - o21) * &st.x * st.x.transpose() * 2.0;
    (d_omega, d_j, -grad)
}

/// Online actor-critic from `x₀ = 0` with `Ω̂₀ = blockdiag(Q, R)`, `Ĵ₀ = 0`.
/// The J-gap is evaluated with the model-based cost at each record; the run
/// aborts if the gain stops stabilizing.
pub fn actor_critic_run(
    inst: &LqrInstance,
    cfg: &ActorCriticConfig,
    seed: u64,
) -> Result<JGapTrace> {
    inst.validate()?;
    cfg.validate()?;
    let (n, m) = (inst.n(), inst.m());
    let k_star = optimal_gain(inst)?;
    let j_star = lqr_cost(inst, &k_star)?;
    let k0 = match &cfg.k0 {
        Some(rows) => crate::linalg::matrix_from_rows(rows, "K0")?,
        None => Mat::zeros(m, n),
    };
    if k0.shape() != (m, n) {
        return Err(Error::Dimension {
            what: "K0",
            expected: m * n,
            got: k0.len(),
        });
    }
    check_stabilizing(inst, &k0)?;
    let lw = noise_factor(&inst.psi)?;
    let mut rng = stream(seed, 21);

    let mut omega = Mat::zeros(n + m, n + m);
    omega.view_mut((0, 0), (n, n)).copy_from(&inst.q);
    omega.view_mut((n, n), (m, m)).copy_from(&inst.r);
    let x0 = DVector::zeros(n);
    let u0 = -(&k0 * &x0) + gaussian_vec(m, &mut rng) * inst.sigma;
    let mut st = AcState {
        x: x0,
        u: u0,
        omega: omega.clone(),
        j_hat: 0.0,
        k: k0,
        avg: (cfg.variant == AcVariant::Fast)
            .then(|| (Mat::zeros(n + m, n + m), 0.0, Mat::zeros(m, n))),
    };
    let mut trace = JGapTrace {
        variant: cfg.variant,
        ks: vec![0],
        j_gap: vec![lqr_cost(inst, &st.k)? - j_star],
        aborted: None,
    };

    for t in 0..cfg.horizon {
        let cost = st.x.dot(&(&inst.q * &st.x)) + st.u.dot(&(&inst.r * &st.u));
        let x_next = &inst.a * &st.x + &inst.b * &st.u + &lw * gaussian_vec(n, &mut rng);
        let u_next = -(&st.k * &x_next) + gaussian_vec(m, &mut rng) * inst.sigma;
        let (d_omega, d_j, d_k) = directions(inst, &st, cost, &x_next, &u_next);
        let (a, b) = (cfg.critic.at(t), cfg.actor.at(t));
        match st.avg.take() {
            None => {
                st.omega += d_omega * a;
                st.j_hat += a * d_j;
                st.k += d_k * b;
            }
            Some((ao, aj, ak)) => {
                let l = cfg.lambda.at(t);
                st.omega += &ao * a;
                st.j_hat += a * aj;
                st.k += &ak * b;
                st.avg = Some((
                    ao * (1.0 - l) + d_omega * l,
                    aj * (1.0 - l) + d_j * l,
                    ak * (1.0 - l) + d_k * l,
                ));
            }
        }
        st.x = x_next;
        st.u = u_next;

        let kk = t + 1;
        if kk % cfg.record_every == 0 || kk == cfg.horizon {
            let finite =
                st.k.iter().all(|v| v.is_finite()) && st.omega.iter().all(|v| v.is_finite());
            match finite.then(|| lqr_cost(inst, &st.k)) {
                Some(Ok(j)) => {
                    trace.ks.push(kk);
                    trace.j_gap.push(j - j_star);
                }
                Some(Err(Error::NotStabilizing(_))) | None => {
                    trace.aborted = Some(kk);
                    return Ok(trace);
                }
                Some(Err(e)) => return Err(e),
            }
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64, b: f64) -> LqrInstance {
        LqrInstance {
            a: Mat::from_element(1, 1, a),
            b: Mat::from_element(1, 1, b),
            q: Mat::identity(1, 1),
            r: Mat::identity(1, 1),
            psi: Mat::identity(1, 1),
            sigma: 0.0,
        }
    }

    #[test]
    fn lyapunov_trivial_cases() {
        let mut inst = LqrInstance::benchmark(0.0);
        inst.a = Mat::zeros(3, 3);
        inst.b = Mat::zeros(3, 2);
        let k = Mat::zeros(2, 3);
        assert_eq!(solve_policy_lyapunov(&inst, &k).unwrap(), inst.q);

        let s = scalar(0.5, 0.0);
        let p = solve_policy_lyapunov(&s, &Mat::zeros(1, 1)).unwrap();
        assert!((p[(0, 0)] - 4.0 / 3.0).abs() < 1e-10);
        assert!((lqr_cost(&s, &Mat::zeros(1, 1)).unwrap() - 4.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn lyapunov_rejects_unstable_gain() {
        let s = scalar(1.5, 1.0);
        assert!(matches!(
            solve_policy_lyapunov(&s, &Mat::zeros(1, 1)),
            Err(Error::NotStabilizing(_))
        ));
    }

    #[test]
    fn benchmark_residual_small() {
        let inst = LqrInstance::benchmark(0.1);
        for k in [
            Mat::zeros(2, 3),
            Mat::from_element(2, 3, 0.1),
            optimal_gain(&inst).unwrap(),
        ] {
            let p = solve_policy_lyapunov(&inst, &k).unwrap();
            assert!(lyapunov_residual(&inst, &k, &p) <= 1e-10);
            assert!(p.clone().symmetric_eigenvalues().min() >= 0.0);
        }
    }

    #[test]
    fn cost_without_exploration_is_trace() {
        let inst = LqrInstance::benchmark(0.0);
        let k = Mat::from_element(2, 3, 0.05);
        let p = solve_policy_lyapunov(&inst, &k).unwrap();
        assert!((lqr_cost(&inst, &k).unwrap() - p.trace()).abs() < 1e-12);
    }

    #[test]
    fn scalar_riccati_matches_bisection() {
        // P = 1 + 0.25 P − 0.25 P²/(1+P), solved by bisection.
        let f = |p: f64| 1.0 + 0.25 * p - 0.25 * p * p / (1.0 + p) - p;
        let (mut lo, mut hi) = (0.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let k = optimal_gain(&scalar(0.5, 1.0)).unwrap();
        assert!((k[(0, 0)] - 0.5 * lo / (1.0 + lo)).abs() < 1e-9);
    }

    #[test]
    fn riccati_rejects_zero_b() {
        let mut inst = LqrInstance::benchmark(0.1);
        inst.b = Mat::zeros(3, 2);
        assert!(optimal_gain(&inst).is_err());
    }

    #[test]
    fn optimal_gain_beats_perturbations() {
        let inst = LqrInstance::benchmark(0.1);
        let ks = optimal_gain(&inst).unwrap();
        let js = lqr_cost(&inst, &ks).unwrap();
        let mut rng = stream(5, 0);
        for _ in 0..100 {
            let e = Mat::from_fn(2, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let e = &e * (0.05 / e.norm());
            let j = lqr_cost(&inst, &(&ks + e)).unwrap();
            assert!(js <= j, "{js} > {j}");
        }
    }

    #[test]
    fn stationary_at_optimum_without_noise() {
        let mut inst = LqrInstance::benchmark(0.0);
        inst.psi = Mat::zeros(3, 3);
        let ks = optimal_gain(&inst).unwrap();
        let step = PowerStep {
            c: 0.1,
            h: 10.0,
            p: 1.0,
        };
        for variant in [AcVariant::Classic, AcVariant::Fast] {
            let cfg = ActorCriticConfig {
                variant,
                critic: step,
                actor: step,
                lambda: PowerStep {
                    c: 1.0,
                    h: 1.0,
                    p: 1.0,
                },
                horizon: 500,
                record_every: 50,
                k0: Some(crate::linalg::matrix_to_rows(&ks)),
            };
            let tr = actor_critic_run(&inst, &cfg, 3).unwrap();
            assert!(tr.j_gap.iter().all(|g| g.abs() <= 1e-9), "{:?}", tr.j_gap);
        }
    }

    #[test]
    fn horizon_guard() {
        let inst = LqrInstance::benchmark(0.1);
        let step = PowerStep {
            c: 0.1,
            h: 10.0,
            p: 1.0,
        };
        let cfg = ActorCriticConfig {
            variant: AcVariant::Classic,
            critic: step,
            actor: step,
            lambda: step,
            horizon: 0,
            record_every: 1,
            k0: None,
        };
        assert!(actor_critic_run(&inst, &cfg, 0).is_err());
    }
}
