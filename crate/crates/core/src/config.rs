//! Experiment configuration: strict JSON parsing with path-qualified errors,
//! and `emit`, its inverse.

use std::path::PathBuf;

use serde_json::{json, Map, Value};

use crate::lqr::{AcVariant, PowerStep};
use crate::policy_eval::PolicyEvalConfig;
use crate::problem::{NoiseKind, NoiseModel, ProblemId, RootProblem};
use crate::schedule::{theory_constants, ClassicScheduleParams, FastScheduleParams, ScheduleMode};
use crate::solver::{InitialState, SolverSpec};
use crate::{Error, Result};

pub const DEFAULT_OUTPUT_DIR: &str = "ttsa_out";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    RootFind,
    RateStudy,
    PolicyEval,
    Lqr,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 4] = [
        ExperimentKind::RootFind,
        ExperimentKind::RateStudy,
        ExperimentKind::PolicyEval,
        ExperimentKind::Lqr,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::RootFind => "root_find",
            ExperimentKind::RateStudy => "rate_study",
            ExperimentKind::PolicyEval => "policy_eval",
            ExperimentKind::Lqr => "lqr",
        }
    }

    fn uses_root_solver(&self) -> bool {
        matches!(self, ExperimentKind::RootFind | ExperimentKind::RateStudy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverKind {
    Fast,
    Classic,
}

impl SolverKind {
    pub fn name(&self) -> &'static str {
        match self {
            SolverKind::Fast => "fast",
            SolverKind::Classic => "classic",
        }
    }
}

/// `schedule.fast`. In theory mode missing constants are derived from the
/// problem's regularity; in tuned mode all five are required.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FastBlock {
    pub mode: ScheduleMode,
    pub c_lambda: Option<f64>,
    pub c_gamma: Option<f64>,
    pub c_alpha: Option<f64>,
    pub c_beta: Option<f64>,
    pub h: Option<f64>,
}

impl FastBlock {
    pub fn from_params(p: &FastScheduleParams) -> Self {
        Self {
            mode: p.mode,
            c_lambda: Some(p.c_lambda),
            c_gamma: Some(p.c_gamma),
            c_alpha: Some(p.c_alpha),
            c_beta: Some(p.c_beta),
            h: Some(p.h),
        }
    }

    pub fn resolve(&self, problem: &RootProblem) -> Result<FastScheduleParams> {
        let base = match self.mode {
            ScheduleMode::Theory => {
                theory_constants(problem.mu_f(), problem.mu_g(), problem.lipschitz())?
            }
            ScheduleMode::Tuned => FastScheduleParams::tuned(0.0, 0.0, 0.0, 0.0, 0.0),
        };
        let p = FastScheduleParams {
            c_lambda: self.c_lambda.unwrap_or(base.c_lambda),
            c_gamma: self.c_gamma.unwrap_or(base.c_gamma),
            c_alpha: self.c_alpha.unwrap_or(base.c_alpha),
            c_beta: self.c_beta.unwrap_or(base.c_beta),
            h: self.h.unwrap_or(base.h),
            mode: self.mode,
        };
        p.check_basic()?;
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleBlock {
    Fast(FastBlock),
    Classic(ClassicScheduleParams),
}

/// Actor-critic settings; the variant comes from `solver` (both when absent).
#[derive(Clone, Debug, PartialEq)]
pub struct LqrBlock {
    pub sigma: f64,
    pub critic: PowerStep,
    pub actor: PowerStep,
    pub lambda: PowerStep,
    /// Critic step for the classic variant, which runs on a slower power.
    pub classic_critic: PowerStep,
    pub k0: Option<Vec<Vec<f64>>>,
}

impl Default for LqrBlock {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            critic: PowerStep {
                c: 5.005,
                h: 1000.0,
                p: 1.0,
            },
            actor: PowerStep {
                c: 1.0,
                h: 1000.0,
                p: 1.0,
            },
            lambda: PowerStep {
                c: 1000.0,
                h: 999.0,
                p: 1.0,
            },
            classic_critic: PowerStep {
                c: 0.25017,
                h: 1000.0,
                p: 2.0 / 3.0,
            },
            k0: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub problem: Option<ProblemId>,
    pub solver: Option<SolverKind>,
    pub schedule: Option<ScheduleBlock>,
    pub noise: NoiseModel,
    pub horizon: usize,
    pub n_reps: usize,
    pub base_seed: u64,
    pub record_every: usize,
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
    pub debug_checks: bool,
    pub warm_start: bool,
    pub init: InitialState,
    pub fit_window: Option<(usize, usize)>,
    pub policy_eval: Option<PolicyEvalConfig>,
    pub lqr: Option<LqrBlock>,
}

impl ExperimentConfig {
    /// A config with every optional field at its default.
    pub fn new(experiment: ExperimentKind, horizon: usize) -> Self {
        Self {
            experiment,
            problem: None,
            solver: None,
            schedule: None,
            noise: NoiseModel::none(),
            horizon,
            n_reps: 1,
            base_seed: 0,
            record_every: 1,
            output_dir: None,
            workers: None,
            debug_checks: false,
            warm_start: false,
            init: InitialState::Random,
            fit_window: None,
            policy_eval: None,
            lqr: None,
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    pub fn build_problem(&self) -> Result<RootProblem> {
        self.problem
            .as_ref()
            .ok_or_else(|| Error::Config(vec!["problem: required for this experiment".into()]))?
            .build()
    }

    /// Solver and fully resolved schedule for root-finding experiments.
    pub fn solver_spec(&self, problem: &RootProblem) -> Result<SolverSpec> {
        match &self.schedule {
            Some(ScheduleBlock::Fast(b)) => Ok(SolverSpec::Fast(b.resolve(problem)?)),
            Some(ScheduleBlock::Classic(p)) => {
                p.check_basic()?;
                Ok(SolverSpec::Classic(*p))
            }
            None => Err(Error::Config(vec![
                "schedule: required for this experiment".into(),
            ])),
        }
    }

    /// Default fit window: the last two decades of the horizon.
    pub fn fit_window_or_default(&self) -> (usize, usize) {
        self.fit_window
            .unwrap_or(((self.horizon / 100).max(1), self.horizon))
    }

    /// Copy with every derived or defaulted value written out, so that
    /// re-running it reproduces the original run.
    pub fn resolved(&self) -> Result<ExperimentConfig> {
        let mut c = self.clone();
        c.output_dir = Some(self.output_dir());
        match self.experiment {
            ExperimentKind::RootFind | ExperimentKind::RateStudy => {
                let problem = self.build_problem()?;
                if let SolverSpec::Fast(p) = self.solver_spec(&problem)? {
                    c.schedule = Some(ScheduleBlock::Fast(FastBlock::from_params(&p)));
                }
                if self.experiment == ExperimentKind::RateStudy {
                    c.fit_window = Some(self.fit_window_or_default());
                }
            }
            ExperimentKind::PolicyEval => {
                c.policy_eval = Some(self.policy_eval.clone().unwrap_or_default());
            }
            ExperimentKind::Lqr => {
                c.lqr = Some(self.lqr.clone().unwrap_or_default());
            }
        }
        Ok(c)
    }
}

// ---------------------------------------------------------------------------
// parsing

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn join(parent: &str, key: &str) -> String {
    if parent.is_empty() {
        key.to_string()
    } else {
        format!("{parent}.{key}")
    }
}

/// An object being read; remembers its path so errors can name fields.
struct Obj<'a> {
    map: &'a Map<String, Value>,
    path: String,
}

impl<'a> Obj<'a> {
    fn new(v: &'a Value, path: &str, errs: &mut Vec<String>) -> Option<Self> {
        match v.as_object() {
            Some(map) => Some(Self {
                map,
                path: path.to_string(),
            }),
            None => {
                errs.push(format!(
                    "{}: expected object, got {}",
                    display_path(path),
                    type_name(v)
                ));
                None
            }
        }
    }

    fn reject_unknown(&self, allowed: &[&str], errs: &mut Vec<String>) {
        for key in self.map.keys() {
            if !allowed.contains(&key.as_str()) {
                errs.push(format!("{}: unknown key", join(&self.path, key)));
            }
        }
    }

    fn has(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    fn path(&self, key: &str) -> String {
        join(&self.path, key)
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        self.map.get(key)
    }

    fn required(&self, key: &str, errs: &mut Vec<String>) -> Option<&'a Value> {
        let v = self.map.get(key);
        if v.is_none() {
            errs.push(format!("{}: missing required key", self.path(key)));
        }
        v
    }

    fn f64(&self, key: &str, errs: &mut Vec<String>) -> Option<f64> {
        let v = self.get(key)?;
        match v.as_f64() {
            Some(x) => Some(x),
            None => {
                errs.push(format!(
                    "{}: expected number, got {}",
                    self.path(key),
                    type_name(v)
                ));
                None
            }
        }
    }

    fn req_f64(&self, key: &str, errs: &mut Vec<String>) -> Option<f64> {
        self.required(key, errs)?;
        self.f64(key, errs)
    }

    /// Integer field; negative values come back as `Err(value)` so callers
    /// can word the range error themselves.
    fn int(&self, key: &str, errs: &mut Vec<String>) -> Option<std::result::Result<u64, i64>> {
        let v = self.get(key)?;
        if let Some(u) = v.as_u64() {
            return Some(Ok(u));
        }
        if let Some(i) = v.as_i64() {
            return Some(Err(i));
        }
        errs.push(format!(
            "{}: expected integer, got {}",
            self.path(key),
            integer_kind(v)
        ));
        None
    }

    fn count(&self, key: &str, min: u64, errs: &mut Vec<String>) -> Option<usize> {
        let msg = || format!("{}: must be >= {min}", self.path(key));
        match self.int(key, errs)? {
            Ok(u) if u >= min => match usize::try_from(u) {
                Ok(n) => Some(n),
                Err(_) => {
                    errs.push(format!("{}: out of range", self.path(key)));
                    None
                }
            },
            _ => {
                errs.push(msg());
                None
            }
        }
    }

    fn bool(&self, key: &str, errs: &mut Vec<String>) -> Option<bool> {
        let v = self.get(key)?;
        match v.as_bool() {
            Some(b) => Some(b),
            None => {
                errs.push(format!(
                    "{}: expected boolean, got {}",
                    self.path(key),
                    type_name(v)
                ));
                None
            }
        }
    }

    fn str(&self, key: &str, errs: &mut Vec<String>) -> Option<&'a str> {
        let v = self.get(key)?;
        match v.as_str() {
            Some(s) => Some(s),
            None => {
                errs.push(format!(
                    "{}: expected string, got {}",
                    self.path(key),
                    type_name(v)
                ));
                None
            }
        }
    }

    fn object(&self, key: &str, errs: &mut Vec<String>) -> Option<Obj<'a>> {
        Obj::new(self.get(key)?, &self.path(key), errs)
    }

    fn f64_vec(&self, key: &str, errs: &mut Vec<String>) -> Option<Vec<f64>> {
        let v = self.get(key)?;
        let Some(items) = v.as_array() else {
            errs.push(format!(
                "{}: expected array, got {}",
                self.path(key),
                type_name(v)
            ));
            return None;
        };
        let mut out = Vec::with_capacity(items.len());
        let mut ok = true;
        for (i, item) in items.iter().enumerate() {
            match item.as_f64() {
                Some(x) => out.push(x),
                None => {
                    errs.push(format!(
                        "{}[{i}]: expected number, got {}",
                        self.path(key),
                        type_name(item)
                    ));
                    ok = false;
                }
            }
        }
        ok.then_some(out)
    }
}

fn integer_kind(v: &Value) -> &'static str {
    match v {
        Value::Number(_) => "non-integer number",
        other => type_name(other),
    }
}

fn display_path(path: &str) -> &str {
    if path.is_empty() {
        "<root>"
    } else {
        path
    }
}

fn check_finite(path: String, x: f64, positive: bool, errs: &mut Vec<String>) {
    if !x.is_finite() || (positive && x <= 0.0) || x < 0.0 {
        let what = if positive { "positive" } else { "nonnegative" };
        errs.push(format!("{path}: must be finite and {what}"));
    }
}

const TOP_KEYS: &[&str] = &[
    "experiment",
    "problem",
    "solver",
    "schedule",
    "noise",
    "T",
    "n_reps",
    "base_seed",
    "record_every",
    "output_dir",
    "workers",
    "debug_checks",
    "warm_start",
    "init",
    "fit_window",
    "policy_eval",
    "lqr",
];

/// Parses and validates a config document. Every problem found is reported,
/// not just the first.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let root: Value = serde_json::from_str(text)
        .map_err(|e| Error::Config(vec![format!("invalid JSON: {e}")]))?;
    let mut errs = Vec::new();
    let cfg = parse_value(&root, &mut errs);
    match cfg {
        Some(cfg) if errs.is_empty() => Ok(cfg),
        _ => Err(Error::Config(errs)),
    }
}

fn parse_value(root: &Value, errs: &mut Vec<String>) -> Option<ExperimentConfig> {
    let top = Obj::new(root, "", errs)?;
    top.reject_unknown(TOP_KEYS, errs);

    let experiment = match top.str("experiment", errs) {
        None => ExperimentKind::RootFind,
        Some(s) => match ExperimentKind::ALL.iter().find(|k| k.name() == s) {
            Some(k) => *k,
            None => {
                errs.push(format!(
                    "experiment: unknown kind `{s}` (expected root_find, rate_study, policy_eval or lqr)"
                ));
                return None;
            }
        },
    };

    let horizon = match top.required("T", errs).and_then(|_| top.int("T", errs)) {
        Some(Ok(t)) if t >= 1 => usize::try_from(t).ok(),
        Some(_) => {
            errs.push("T must be ≥ 1".into());
            None
        }
        None => None,
    };

    let mut cfg = ExperimentConfig::new(experiment, horizon.unwrap_or(1));

    if let Some(s) = top.str("problem", errs) {
        match s.parse::<ProblemId>() {
            Ok(id) => cfg.problem = Some(id),
            Err(e) => errs.push(format!("problem: {e}")),
        }
    }

    if let Some(s) = top.str("solver", errs) {
        match s {
            "fast" => cfg.solver = Some(SolverKind::Fast),
            "classic" => cfg.solver = Some(SolverKind::Classic),
            _ => errs.push(format!(
                "solver: unknown solver `{s}` (expected fast or classic)"
            )),
        }
    }

    if let Some(sched) = top.object("schedule", errs) {
        cfg.schedule = parse_schedule(&sched, errs);
    }

    if let Some(noise) = top.object("noise", errs) {
        cfg.noise = parse_noise(&noise, errs).unwrap_or(cfg.noise);
    }

    cfg.n_reps = top.count("n_reps", 1, errs).unwrap_or(1);
    match top.int("base_seed", errs) {
        Some(Ok(s)) => cfg.base_seed = s,
        Some(Err(_)) => errs.push("base_seed: must be a nonnegative integer".into()),
        None => {}
    }
    cfg.record_every = top.count("record_every", 1, errs).unwrap_or(1);
    cfg.workers = top.count("workers", 1, errs);
    if let Some(dir) = top.str("output_dir", errs) {
        if dir.is_empty() {
            errs.push("output_dir: must not be empty".into());
        } else {
            cfg.output_dir = Some(PathBuf::from(dir));
        }
    }
    cfg.debug_checks = top.bool("debug_checks", errs).unwrap_or(false);
    cfg.warm_start = top.bool("warm_start", errs).unwrap_or(false);

    if let Some(init) = top.object("init", errs) {
        init.reject_unknown(&["x", "y"], errs);
        let x = init
            .required("x", errs)
            .and_then(|_| init.f64_vec("x", errs));
        let y = init
            .required("y", errs)
            .and_then(|_| init.f64_vec("y", errs));
        if let (Some(x), Some(y)) = (x, y) {
            cfg.init = InitialState::Fixed { x, y };
        }
    }

    if let Some(v) = top.get("fit_window") {
        match v
            .as_array()
            .map(|a| a.iter().map(Value::as_u64).collect::<Option<Vec<_>>>())
        {
            Some(Some(w)) if w.len() == 2 => {
                let (lo, hi) = (w[0] as usize, w[1] as usize);
                if lo >= hi {
                    errs.push("fit_window: need k_min < k_max".into());
                } else if horizon.is_some_and(|t| hi > t) {
                    errs.push("fit_window: k_max must not exceed T".into());
                }
                cfg.fit_window = Some((lo, hi));
            }
            _ => errs.push("fit_window: expected [k_min, k_max] of nonnegative integers".into()),
        }
    }

    if let Some(pe) = top.object("policy_eval", errs) {
        cfg.policy_eval = parse_policy_eval(&pe, errs);
    }
    if let Some(lqr) = top.object("lqr", errs) {
        cfg.lqr = parse_lqr(&lqr, errs);
    }

    check_consistency(&cfg, &top, errs);
    Some(cfg)
}

fn parse_schedule(sched: &Obj, errs: &mut Vec<String>) -> Option<ScheduleBlock> {
    sched.reject_unknown(&["fast", "classic"], errs);
    if sched.has("fast") && sched.has("classic") {
        errs.push(
            "schedule: both `fast` and `classic` blocks given; exactly one is allowed".into(),
        );
        return None;
    }
    if let Some(fast) = sched.object("fast", errs) {
        fast.reject_unknown(
            &["C_lambda", "C_gamma", "C_alpha", "C_beta", "h", "mode"],
            errs,
        );
        let mode = match fast
            .required("mode", errs)
            .and_then(|_| fast.str("mode", errs))
        {
            Some("theory") => ScheduleMode::Theory,
            Some("tuned") => ScheduleMode::Tuned,
            Some(other) => {
                errs.push(format!(
                    "{}: unknown mode `{other}` (expected theory or tuned)",
                    fast.path("mode")
                ));
                return None;
            }
            None => return None,
        };
        let get = |key: &str, errs: &mut Vec<String>| {
            let v = if mode == ScheduleMode::Tuned {
                fast.req_f64(key, errs)
            } else {
                fast.f64(key, errs)
            };
            if let Some(x) = v {
                check_finite(fast.path(key), x, true, errs);
            }
            v
        };
        let block = FastBlock {
            mode,
            c_lambda: get("C_lambda", errs),
            c_gamma: get("C_gamma", errs),
            c_alpha: get("C_alpha", errs),
            c_beta: get("C_beta", errs),
            h: fast.f64("h", errs),
        };
        match block.h {
            Some(h) => check_finite(fast.path("h"), h, false, errs),
            None if mode == ScheduleMode::Tuned => {
                errs.push(format!("{}: missing required key", fast.path("h")))
            }
            None => {}
        }
        return Some(ScheduleBlock::Fast(block));
    }
    if let Some(classic) = sched.object("classic", errs) {
        classic.reject_unknown(&["alpha0", "beta0", "a", "b"], errs);
        let alpha0 = classic.req_f64("alpha0", errs);
        let beta0 = classic.req_f64("beta0", errs);
        let a = classic.req_f64("a", errs);
        let b = classic.req_f64("b", errs);
        for (key, v, positive) in [
            ("alpha0", alpha0, true),
            ("beta0", beta0, true),
            ("a", a, false),
            ("b", b, false),
        ] {
            if let Some(x) = v {
                check_finite(classic.path(key), x, positive, errs);
            }
        }
        return Some(ScheduleBlock::Classic(ClassicScheduleParams {
            alpha0: alpha0?,
            beta0: beta0?,
            a: a?,
            b: b?,
        }));
    }
    errs.push("schedule: expected a `fast` or `classic` block".into());
    None
}

fn parse_noise(noise: &Obj, errs: &mut Vec<String>) -> Option<NoiseModel> {
    noise.reject_unknown(&["kind", "gamma11", "gamma22"], errs);
    let kind = match noise
        .required("kind", errs)
        .and_then(|_| noise.str("kind", errs))?
    {
        "none" => NoiseKind::None,
        "gaussian_iid" => NoiseKind::GaussianIid,
        other => {
            errs.push(format!(
                "noise.kind: unknown kind `{other}` (expected none or gaussian_iid)"
            ));
            return None;
        }
    };
    let g11 = noise.f64("gamma11", errs).unwrap_or(0.0);
    let g22 = noise.f64("gamma22", errs).unwrap_or(0.0);
    check_finite(noise.path("gamma11"), g11, false, errs);
    check_finite(noise.path("gamma22"), g22, false, errs);
    Some(NoiseModel {
        kind,
        gamma11: g11,
        gamma22: g22,
    })
}

fn parse_policy_eval(pe: &Obj, errs: &mut Vec<String>) -> Option<PolicyEvalConfig> {
    pe.reject_unknown(
        &[
            "n_states",
            "n_actions",
            "d",
            "gamma",
            "alpha",
            "beta",
            "lambda_c",
            "lambda_shift",
            "off_policy_correction",
        ],
        errs,
    );
    let mut c = PolicyEvalConfig::default();
    let before = errs.len();
    c.n_states = pe.count("n_states", 1, errs).unwrap_or(c.n_states);
    c.n_actions = pe.count("n_actions", 1, errs).unwrap_or(c.n_actions);
    c.d = pe.count("d", 1, errs).unwrap_or(c.d);
    c.gamma = pe.f64("gamma", errs).unwrap_or(c.gamma);
    c.alpha = pe.f64("alpha", errs).unwrap_or(c.alpha);
    c.beta = pe.f64("beta", errs).unwrap_or(c.beta);
    c.lambda_c = pe.f64("lambda_c", errs).unwrap_or(c.lambda_c);
    c.lambda_shift = pe.f64("lambda_shift", errs).unwrap_or(c.lambda_shift);
    c.off_policy_correction = pe
        .bool("off_policy_correction", errs)
        .unwrap_or(c.off_policy_correction);
    if errs.len() == before {
        if let Err(Error::Config(more)) = c.validate() {
            errs.extend(more.into_iter().map(|m| format!("policy_eval: {m}")));
        }
    }
    Some(c)
}

fn parse_power_step(obj: &Obj, key: &str, default: PowerStep, errs: &mut Vec<String>) -> PowerStep {
    let Some(o) = obj.object(key, errs) else {
        return default;
    };
    o.reject_unknown(&["c", "h", "p"], errs);
    let s = PowerStep {
        c: o.f64("c", errs).unwrap_or(default.c),
        h: o.f64("h", errs).unwrap_or(default.h),
        p: o.f64("p", errs).unwrap_or(default.p),
    };
    if !(s.c.is_finite()
        && s.c >= 0.0
        && s.h.is_finite()
        && s.h >= 0.0
        && (0.0..=1.0).contains(&s.p))
    {
        errs.push(format!("{}: need c >= 0, h >= 0, 0 <= p <= 1", o.path));
    }
    s
}

fn parse_lqr(lqr: &Obj, errs: &mut Vec<String>) -> Option<LqrBlock> {
    lqr.reject_unknown(
        &["sigma", "critic", "actor", "lambda", "classic_critic", "k0"],
        errs,
    );
    let d = LqrBlock::default();
    let sigma = lqr.f64("sigma", errs).unwrap_or(d.sigma);
    check_finite(lqr.path("sigma"), sigma, false, errs);
    let k0 = match lqr.get("k0") {
        None => None,
        Some(v) => match serde_json::from_value::<Vec<Vec<f64>>>(v.clone()) {
            Ok(rows) => Some(rows),
            Err(_) => {
                errs.push(format!(
                    "{}: expected array of number arrays",
                    lqr.path("k0")
                ));
                None
            }
        },
    };
    Some(LqrBlock {
        sigma,
        critic: parse_power_step(lqr, "critic", d.critic, errs),
        actor: parse_power_step(lqr, "actor", d.actor, errs),
        lambda: parse_power_step(lqr, "lambda", d.lambda, errs),
        classic_critic: parse_power_step(lqr, "classic_critic", d.classic_critic, errs),
        k0,
    })
}

fn check_consistency(cfg: &ExperimentConfig, top: &Obj, errs: &mut Vec<String>) {
    let kind = cfg.experiment.name();
    if cfg.experiment.uses_root_solver() {
        if !top.has("problem") {
            errs.push("problem: missing required key".into());
        }
        match (cfg.solver, &cfg.schedule) {
            (None, _) if !top.has("solver") => errs.push("solver: missing required key".into()),
            (_, None) if !top.has("schedule") => errs.push("schedule: missing required key".into()),
            (Some(SolverKind::Fast), Some(ScheduleBlock::Classic(_))) => {
                errs.push("schedule: solver is `fast` but only a `classic` block is given".into())
            }
            (Some(SolverKind::Classic), Some(ScheduleBlock::Fast(_))) => {
                errs.push("schedule: solver is `classic` but only a `fast` block is given".into())
            }
            _ => {}
        }
        if cfg.experiment == ExperimentKind::RateStudy && cfg.n_reps < 2 {
            errs.push("n_reps: rate_study needs at least 2 replications".into());
        }
    } else {
        for key in [
            "problem",
            "schedule",
            "noise",
            "init",
            "fit_window",
            "debug_checks",
            "warm_start",
        ] {
            if top.has(key) {
                errs.push(format!("{key}: not used by {kind} experiments"));
            }
        }
        if cfg.experiment == ExperimentKind::PolicyEval && top.has("solver") {
            errs.push("solver: policy_eval always runs td, tdc and fast_tdc".into());
        }
    }
    if cfg.experiment != ExperimentKind::PolicyEval && top.has("policy_eval") {
        errs.push(format!("policy_eval: block not used by {kind} experiments"));
    }
    if cfg.experiment != ExperimentKind::Lqr && top.has("lqr") {
        errs.push(format!("lqr: block not used by {kind} experiments"));
    }
}

// ---------------------------------------------------------------------------
// emitting

fn power_step_value(s: &PowerStep) -> Value {
    json!({ "c": s.c, "h": s.h, "p": s.p })
}

/// Serializes a config so that `parse_config(&emit(c)) == c`.
pub fn emit(cfg: &ExperimentConfig) -> String {
    let mut m = Map::new();
    m.insert("experiment".into(), json!(cfg.experiment.name()));
    if let Some(p) = &cfg.problem {
        m.insert("problem".into(), json!(p.to_string()));
    }
    if let Some(s) = cfg.solver {
        m.insert("solver".into(), json!(s.name()));
    }
    match &cfg.schedule {
        Some(ScheduleBlock::Fast(b)) => {
            let mut f = Map::new();
            let mode = match b.mode {
                ScheduleMode::Theory => "theory",
                ScheduleMode::Tuned => "tuned",
            };
            f.insert("mode".into(), json!(mode));
            for (key, v) in [
                ("C_lambda", b.c_lambda),
                ("C_gamma", b.c_gamma),
                ("C_alpha", b.c_alpha),
                ("C_beta", b.c_beta),
                ("h", b.h),
            ] {
                if let Some(x) = v {
                    f.insert(key.into(), json!(x));
                }
            }
            m.insert("schedule".into(), json!({ "fast": f }));
        }
        Some(ScheduleBlock::Classic(p)) => {
            m.insert(
                "schedule".into(),
                json!({ "classic": { "alpha0": p.alpha0, "beta0": p.beta0, "a": p.a, "b": p.b } }),
            );
        }
        None => {}
    }
    if cfg.experiment.uses_root_solver() {
        let kind = match cfg.noise.kind {
            NoiseKind::None => "none",
            NoiseKind::GaussianIid => "gaussian_iid",
        };
        m.insert(
            "noise".into(),
            json!({ "kind": kind, "gamma11": cfg.noise.gamma11, "gamma22": cfg.noise.gamma22 }),
        );
        m.insert("debug_checks".into(), json!(cfg.debug_checks));
        m.insert("warm_start".into(), json!(cfg.warm_start));
        if let InitialState::Fixed { x, y } = &cfg.init {
            m.insert("init".into(), json!({ "x": x, "y": y }));
        }
        if let Some((lo, hi)) = cfg.fit_window {
            m.insert("fit_window".into(), json!([lo, hi]));
        }
    }
    m.insert("T".into(), json!(cfg.horizon));
    m.insert("n_reps".into(), json!(cfg.n_reps));
    m.insert("base_seed".into(), json!(cfg.base_seed));
    m.insert("record_every".into(), json!(cfg.record_every));
    if let Some(dir) = &cfg.output_dir {
        m.insert("output_dir".into(), json!(dir.to_string_lossy()));
    }
    if let Some(w) = cfg.workers {
        m.insert("workers".into(), json!(w));
    }
    if let Some(pe) = &cfg.policy_eval {
        m.insert(
            "policy_eval".into(),
            serde_json::to_value(pe).expect("plain data serializes"),
        );
    }
    if let Some(l) = &cfg.lqr {
        let mut o = Map::new();
        o.insert("sigma".into(), json!(l.sigma));
        o.insert("critic".into(), power_step_value(&l.critic));
        o.insert("actor".into(), power_step_value(&l.actor));
        o.insert("lambda".into(), power_step_value(&l.lambda));
        o.insert("classic_critic".into(), power_step_value(&l.classic_critic));
        if let Some(k0) = &l.k0 {
            o.insert("k0".into(), json!(k0));
        }
        m.insert("lqr".into(), Value::Object(o));
    }
    serde_json::to_string_pretty(&Value::Object(m)).expect("plain data serializes")
}

impl LqrBlock {
    pub fn variant_config(
        &self,
        variant: AcVariant,
        horizon: usize,
        record_every: usize,
    ) -> crate::lqr::ActorCriticConfig {
        crate::lqr::ActorCriticConfig {
            variant,
            critic: match variant {
                AcVariant::Classic => self.classic_critic,
                AcVariant::Fast => self.critic,
            },
            actor: self.actor,
            lambda: self.lambda,
            horizon,
            record_every,
            k0: self.k0.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MINIMAL: &str = r#"{
        "problem": "scalar",
        "solver": "fast",
        "schedule": {"fast": {"mode": "tuned", "C_lambda": 10, "C_gamma": 10, "C_alpha": 4, "C_beta": 2, "h": 40}},
        "T": 1000, "n_reps": 1, "base_seed": 7
    }"#;

    fn errors(text: &str) -> Vec<String> {
        match parse_config(text) {
            Err(Error::Config(e)) => e,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_parses() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.experiment, ExperimentKind::RootFind);
        assert_eq!(c.problem, Some(ProblemId::Scalar));
        assert_eq!(c.horizon, 1000);
        assert_eq!(c.base_seed, 7);
        let p = c.solver_spec(&c.build_problem().unwrap()).unwrap();
        assert_eq!(
            p,
            SolverSpec::Fast(FastScheduleParams::tuned(10.0, 10.0, 4.0, 2.0, 40.0))
        );
    }

    #[test]
    fn both_schedule_blocks_conflict() {
        let text = MINIMAL.replace(
            r#""schedule": {"fast""#,
            r#""schedule": {"classic": {"alpha0": 1, "beta0": 1, "a": 0.6, "b": 1}, "fast""#,
        );
        let e = errors(&text);
        assert!(
            e.iter().any(|m| m.contains("both `fast` and `classic`")),
            "{e:?}"
        );
    }

    #[test]
    fn negative_horizon_rejected() {
        let e = errors(&MINIMAL.replace("\"T\": 1000", "\"T\": -5"));
        assert!(e.iter().any(|m| m == "T must be ≥ 1"), "{e:?}");
        let e = errors(&MINIMAL.replace("\"T\": 1000", "\"T\": 0"));
        assert!(e.iter().any(|m| m == "T must be ≥ 1"), "{e:?}");
    }

    #[test]
    fn all_errors_reported_with_paths() {
        let text = r#"{
            "problem": "scalar", "solver": "fast", "T": 10, "typo_key": 1,
            "schedule": {"fast": {"mode": "tuned", "C_lambda": "ten", "C_gamma": 1, "C_alpha": 1, "C_beta": 1, "h": 1, "C_alfa": 2}},
            "noise": {"kind": "gaussian_iid", "gamma11": -1}
        }"#;
        let e = errors(text);
        assert!(e.contains(&"typo_key: unknown key".to_string()), "{e:?}");
        assert!(
            e.contains(&"schedule.fast.C_alfa: unknown key".to_string()),
            "{e:?}"
        );
        assert!(
            e.contains(&"schedule.fast.C_lambda: expected number, got string".to_string()),
            "{e:?}"
        );
        assert!(e.iter().any(|m| m.starts_with("noise.gamma11:")), "{e:?}");
        assert!(e.len() >= 4);
    }

    #[test]
    fn mismatched_schedule_rejected() {
        let e = errors(&MINIMAL.replace("\"solver\": \"fast\"", "\"solver\": \"classic\""));
        assert!(e.iter().any(|m| m.contains("only a `fast` block")), "{e:?}");
    }

    #[test]
    fn theory_mode_derives_constants() {
        let text = r#"{"experiment": "rate_study", "problem": "scalar", "solver": "fast",
            "schedule": {"fast": {"mode": "theory"}}, "T": 100, "n_reps": 4}"#;
        let c = parse_config(text).unwrap();
        let r = c.resolved().unwrap();
        match r.schedule {
            Some(ScheduleBlock::Fast(b)) => {
                assert_eq!(b.c_alpha, Some(1024.0));
                assert_eq!(b.c_beta, Some(2.0));
                assert_eq!(b.c_lambda, Some(786432.0));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(r.fit_window, Some((1, 100)));
        assert_eq!(parse_config(&emit(&r)).unwrap(), r);
    }

    #[test]
    fn non_solver_experiments_reject_solver_keys() {
        let e = errors(r#"{"experiment": "policy_eval", "T": 10, "problem": "scalar"}"#);
        assert!(
            e.iter().any(|m| m.starts_with("problem: not used")),
            "{e:?}"
        );
        let c = parse_config(
            r#"{"experiment": "lqr", "T": 10, "solver": "fast", "lqr": {"sigma": 0.5}}"#,
        )
        .unwrap();
        assert_eq!(c.lqr.unwrap().sigma, 0.5);
    }

    fn arb_power() -> impl Strategy<Value = PowerStep> {
        (0.0..10.0f64, 0.0..1e4f64, 0.0..=1.0f64).prop_map(|(c, h, p)| PowerStep { c, h, p })
    }

    fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
        let fast = (
            prop::bool::ANY,
            prop::option::of(0.1..1e6f64),
            prop::option::of(0.1..1e3f64),
            prop::option::of(0.1..1e3f64),
            prop::option::of(0.1..1e3f64),
            prop::option::of(0.0..1e6f64),
        )
            .prop_map(|(theory, l, g, a, b, h)| {
                if theory {
                    ScheduleBlock::Fast(FastBlock {
                        mode: ScheduleMode::Theory,
                        c_lambda: l,
                        c_gamma: g,
                        c_alpha: a,
                        c_beta: b,
                        h,
                    })
                } else {
                    ScheduleBlock::Fast(FastBlock {
                        mode: ScheduleMode::Tuned,
                        c_lambda: Some(l.unwrap_or(1.0)),
                        c_gamma: Some(g.unwrap_or(1.0)),
                        c_alpha: Some(a.unwrap_or(1.0)),
                        c_beta: Some(b.unwrap_or(1.0)),
                        h: Some(h.unwrap_or(0.0)),
                    })
                }
            });
        let classic = (0.01..10.0f64, 0.01..10.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(
            |(alpha0, beta0, a, b)| {
                ScheduleBlock::Classic(ClassicScheduleParams {
                    alpha0,
                    beta0,
                    a,
                    b,
                })
            },
        );
        let root = (
            prop_oneof![fast, classic],
            prop_oneof![
                Just(ProblemId::Scalar),
                Just(ProblemId::Remark2),
                (0.0..2.0f64).prop_map(ProblemId::Tanh),
                (0.0..2.0f64).prop_map(ProblemId::Abs)
            ],
            prop::bool::ANY,
            (0.0..5.0f64, 0.0..5.0f64),
            prop::option::of((1usize..50, 51usize..100)),
        )
            .prop_map(|(sched, problem, study, (g11, g22), window)| {
                let kind = if study {
                    ExperimentKind::RateStudy
                } else {
                    ExperimentKind::RootFind
                };
                let mut c = ExperimentConfig::new(kind, 100);
                c.solver = Some(match sched {
                    ScheduleBlock::Fast(_) => SolverKind::Fast,
                    ScheduleBlock::Classic(_) => SolverKind::Classic,
                });
                c.schedule = Some(sched);
                c.problem = Some(problem);
                c.noise = NoiseModel {
                    kind: NoiseKind::GaussianIid,
                    gamma11: g11,
                    gamma22: g22,
                };
                c.n_reps = if study { 2 } else { 1 };
                c.fit_window = window;
                c.init = if g11 > 2.5 {
                    InitialState::Fixed {
                        x: vec![g11],
                        y: vec![-g22],
                    }
                } else {
                    InitialState::Random
                };
                c.debug_checks = g22 > 2.5;
                c
            });
        let pe = (
            1usize..100,
            1usize..10,
            0.01..0.99f64,
            1e-4..1e-1f64,
            prop::bool::ANY,
        )
            .prop_map(|(n_states, d, gamma, alpha, opc)| {
                let mut c = ExperimentConfig::new(ExperimentKind::PolicyEval, 500);
                c.policy_eval = Some(PolicyEvalConfig {
                    n_states: n_states + d,
                    n_actions: 3,
                    d,
                    gamma,
                    alpha,
                    beta: alpha / 2.0,
                    lambda_c: 0.8,
                    lambda_shift: 10.0,
                    off_policy_correction: opc,
                });
                c
            });
        let lqr = (
            0.0..1.0f64,
            arb_power(),
            arb_power(),
            arb_power(),
            prop::option::of(prop::bool::ANY),
        )
            .prop_map(|(sigma, critic, actor, lambda, solver)| {
                let mut c = ExperimentConfig::new(ExperimentKind::Lqr, 200);
                c.solver = solver.map(|f| {
                    if f {
                        SolverKind::Fast
                    } else {
                        SolverKind::Classic
                    }
                });
                c.lqr = Some(LqrBlock {
                    sigma,
                    critic,
                    actor,
                    lambda,
                    classic_critic: critic,
                    k0: if sigma > 0.5 {
                        Some(vec![vec![0.0; 3]; 2])
                    } else {
                        None
                    },
                });
                c
            });
        (
            prop_oneof![root, pe, lqr],
            any::<u64>(),
            1usize..20,
            prop::option::of(1usize..8),
            prop::option::of("[a-z]{1,8}"),
        )
            .prop_map(|(mut c, seed, every, workers, dir)| {
                c.base_seed = seed;
                c.record_every = every;
                c.workers = workers;
                c.output_dir = dir.map(PathBuf::from);
                c
            })
    }

    proptest! {
        #[test]
        fn parse_emit_round_trip(c in arb_config()) {
            let text = emit(&c);
            let back = parse_config(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
            prop_assert_eq!(back, c);
        }
    }
}
