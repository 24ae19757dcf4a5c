use ttsa::problem::{sample_noisy, NoiseModel, ProblemId, RootProblem, Vector};
use ttsa::schedule::{ClassicScheduleParams, FastScheduleParams, StepSizes};
use ttsa::solver::{classic_update, fast_update, run, Oracle, RunConfig, SolverSpec, SolverState};
use ttsa::{rng_from_seed, Result, SimRng};

/// Answers each query with the sample drawn for the previous query
/// (zeros the first time).
struct DelayedOracle<'a> {
    problem: &'a RootProblem,
    noise: NoiseModel,
    rng: SimRng,
    pending: (Vector, Vector),
}

impl<'a> DelayedOracle<'a> {
    fn new(problem: &'a RootProblem, noise: NoiseModel, seed: u64) -> Self {
        Self {
            problem,
            noise,
            rng: rng_from_seed(seed),
            pending: (
                Vector::zeros(problem.dim_x()),
                Vector::zeros(problem.dim_y()),
            ),
        }
    }
}

impl Oracle for DelayedOracle<'_> {
    fn sample(&mut self, x: &Vector, y: &Vector) -> Result<(Vector, Vector)> {
        let fresh = sample_noisy(self.problem, &self.noise, x, y, &mut self.rng)?;
        Ok(std::mem::replace(&mut self.pending, fresh))
    }
}

struct Direct<'a> {
    problem: &'a RootProblem,
    noise: NoiseModel,
    rng: SimRng,
}

impl Oracle for Direct<'_> {
    fn sample(&mut self, x: &Vector, y: &Vector) -> Result<(Vector, Vector)> {
        sample_noisy(self.problem, &self.noise, x, y, &mut self.rng)
    }
}

#[test]
fn unit_averaging_is_classic_with_one_sample_delay() {
    for id in ["scalar", "tanh:0.5", "remark2"] {
        let p: RootProblem = id.parse::<ProblemId>().unwrap().build().unwrap();
        let noise = NoiseModel::gaussian(1.0, 1.0).unwrap();
        let classic = ClassicScheduleParams {
            alpha0: 0.3,
            beta0: 0.1,
            a: 2.0 / 3.0,
            b: 1.0,
        };
        let x0 = Vector::from_element(p.dim_x(), 1.5);
        let y0 = Vector::from_element(p.dim_y(), -0.5);
        let mut fast = SolverState::fast(
            x0.clone(),
            y0.clone(),
            Vector::zeros(p.dim_x()),
            Vector::zeros(p.dim_y()),
        );
        let mut slow = SolverState::classic(x0, y0);
        let mut direct = Direct {
            problem: &p,
            noise,
            rng: rng_from_seed(5),
        };
        let mut delayed = DelayedOracle::new(&p, noise, 5);
        for k in 0..1000 {
            let (alpha, beta) = classic.eval(k);
            let s = StepSizes {
                lambda: 1.0,
                gamma: 1.0,
                alpha,
                beta,
            };
            fast = fast_update(&fast, &s, &mut direct).unwrap();
            slow = classic_update(&slow, alpha, beta, &mut delayed).unwrap();
            assert!((&fast.x - &slow.x).norm() < 1e-12, "{id} k={k}");
            assert!((&fast.y - &slow.y).norm() < 1e-12, "{id} k={k}");
        }
    }
}

#[test]
fn noise_free_runs_decrease_lyapunov() {
    let fast = SolverSpec::Fast(FastScheduleParams::tuned(10.0, 10.0, 4.0, 2.0, 40.0));
    let classic = SolverSpec::Classic(ClassicScheduleParams {
        alpha0: 1.0,
        beta0: 0.5,
        a: 2.0 / 3.0,
        b: 1.0,
    });
    for id in ["scalar", "tanh:0.5", "abs:0.5"] {
        let p = id.parse::<ProblemId>().unwrap().build().unwrap();
        for spec in [fast, classic] {
            let mut cfg = RunConfig::new(spec, NoiseModel::none(), 10_000, 3);
            cfg.record_every = 10_000;
            let out = run(&p, &cfg).unwrap();
            assert!(out.aborted.is_none());
            let v = |i: usize| {
                let r = &out.records[i];
                if spec.is_fast() {
                    r.v_fast
                } else {
                    r.v_classic
                }
                .unwrap()
            };
            assert!(v(1) <= v(0), "{id} {spec:?}: {} > {}", v(1), v(0));
            assert!(
                v(1) < 1e-3 * v(0).max(1e-12) || v(1) < 1e-10,
                "{id}: {}",
                v(1)
            );
        }
    }
}
