//! Coupled root-finding problems `F(x*, y*) = 0`, `G(x*, y*) = 0`, their noise
//! models, and the built-in instances.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

pub type Vector = DVector<f64>;

/// Deterministic operator pair `(F, G)` with an optional inner-solution map `H`
/// satisfying `F(H(y), y) = 0`.
pub trait CoupledOperator: Send + Sync + fmt::Debug {
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;
    fn f(&self, x: &Vector, y: &Vector) -> Vector;
    fn g(&self, x: &Vector, y: &Vector) -> Vector;
    fn h(&self, _y: &Vector) -> Option<Vector> {
        None
    }
}

/// Strong-monotonicity and Lipschitz constants of a problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regularity {
    pub mu_f: f64,
    pub mu_g: f64,
    pub lip_f: f64,
    pub lip_g: f64,
    pub lip_h: f64,
}

impl Regularity {
    /// Common Lipschitz constant `L = max(L_F, L_G, L_H)`.
    pub fn lipschitz(&self) -> f64 {
        self.lip_f.max(self.lip_g).max(self.lip_h)
    }
}

/// An immutable coupled root-finding problem. Cheap to clone and safe to share
/// between concurrent runs.
#[derive(Clone, Debug)]
pub struct RootProblem {
    name: String,
    ops: Arc<dyn CoupledOperator>,
    solution: Option<(Vector, Vector)>,
    regularity: Regularity,
    euclidean_monotone: bool,
}

impl RootProblem {
    pub fn new(
        name: impl Into<String>,
        ops: Arc<dyn CoupledOperator>,
        solution: Option<(Vector, Vector)>,
        regularity: Regularity,
    ) -> Result<Self> {
        let r = regularity;
        if !(r.mu_g > 0.0 && r.mu_g <= r.mu_f) {
            return Err(Error::InvalidParameter(format!(
                "require 0 < mu_G <= mu_F, got mu_F = {}, mu_G = {}",
                r.mu_f, r.mu_g
            )));
        }
        if !(r.lip_f >= 0.0 && r.lip_g >= 0.0 && r.lip_h >= 0.0 && r.lipschitz() > 0.0) {
            return Err(Error::InvalidParameter(
                "Lipschitz constants must be nonnegative with positive maximum".into(),
            ));
        }
        if let Some((xs, ys)) = &solution {
            check_dim("solution x", ops.dim_x(), xs.len())?;
            check_dim("solution y", ops.dim_y(), ys.len())?;
        }
        Ok(Self {
            name: name.into(),
            ops,
            solution,
            regularity,
            euclidean_monotone: true,
        })
    }

    fn with_euclidean_monotone(mut self, flag: bool) -> Self {
        self.euclidean_monotone = flag;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim_x(&self) -> usize {
        self.ops.dim_x()
    }

    pub fn dim_y(&self) -> usize {
        self.ops.dim_y()
    }

    pub fn regularity(&self) -> Regularity {
        self.regularity
    }

    pub fn mu_f(&self) -> f64 {
        self.regularity.mu_f
    }

    pub fn mu_g(&self) -> f64 {
        self.regularity.mu_g
    }

    pub fn lipschitz(&self) -> f64 {
        self.regularity.lipschitz()
    }

    pub fn solution(&self) -> Option<(&Vector, &Vector)> {
        self.solution.as_ref().map(|(x, y)| (x, y))
    }

    /// Whether the monotonicity constants hold in the Euclidean inner product
    /// (false when they only certify a stable spectrum).
    pub fn euclidean_monotone(&self) -> bool {
        self.euclidean_monotone
    }

    pub fn has_inner_map(&self) -> bool {
        self.ops.h(&Vector::zeros(self.dim_y())).is_some()
    }

    pub fn check_dims(&self, x: &Vector, y: &Vector) -> Result<()> {
        check_dim("x", self.dim_x(), x.len())?;
        check_dim("y", self.dim_y(), y.len())
    }

    /// Exact (noise-free) operator values.
    pub fn evaluate(&self, x: &Vector, y: &Vector) -> Result<(Vector, Vector)> {
        self.check_dims(x, y)?;
        Ok(self.evaluate_unchecked(x, y))
    }

    pub(crate) fn evaluate_unchecked(&self, x: &Vector, y: &Vector) -> (Vector, Vector) {
        (self.ops.f(x, y), self.ops.g(x, y))
    }

    pub fn inner_map(&self, y: &Vector) -> Result<Option<Vector>> {
        check_dim("y", self.dim_y(), y.len())?;
        Ok(self.ops.h(y))
    }

    pub(crate) fn inner_map_unchecked(&self, y: &Vector) -> Option<Vector> {
        self.ops.h(y)
    }
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            what,
            expected,
            got,
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    GaussianIid,
}

/// Additive i.i.d. noise on operator samples. `gamma11`, `gamma22` are the
/// traces of the covariances of ξ and ψ; each coordinate gets `trace / dim`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    #[serde(default)]
    pub gamma11: f64,
    #[serde(default)]
    pub gamma22: f64,
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            kind: NoiseKind::None,
            gamma11: 0.0,
            gamma22: 0.0,
        }
    }

    pub fn gaussian(gamma11: f64, gamma22: f64) -> Result<Self> {
        let n = Self {
            kind: NoiseKind::GaussianIid,
            gamma11,
            gamma22,
        };
        n.validate()?;
        Ok(n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma11.is_finite() && self.gamma11 >= 0.0)
            || !(self.gamma22.is_finite() && self.gamma22 >= 0.0)
        {
            return Err(Error::InvalidParameter(
                "noise traces must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Effective traces seen by the solver (zero when the kind is `none`).
    pub fn traces(&self) -> (f64, f64) {
        match self.kind {
            NoiseKind::None => (0.0, 0.0),
            NoiseKind::GaussianIid => (self.gamma11, self.gamma22),
        }
    }

    /// Draws `(ξ, ψ)`. The `none` kind returns exact zeros and consumes no randomness.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        dim_x: usize,
        dim_y: usize,
        rng: &mut R,
    ) -> (Vector, Vector) {
        match self.kind {
            NoiseKind::None => (Vector::zeros(dim_x), Vector::zeros(dim_y)),
            NoiseKind::GaussianIid => {
                let sx = (self.gamma11 / dim_x as f64).sqrt();
                let sy = (self.gamma22 / dim_y as f64).sqrt();
                let xi = Vector::from_fn(dim_x, |_, _| sx * rng.sample::<f64, _>(StandardNormal));
                let psi = Vector::from_fn(dim_y, |_, _| sy * rng.sample::<f64, _>(StandardNormal));
                (xi, psi)
            }
        }
    }
}

/// One noisy oracle call: `(F(x, y) + ξ, G(x, y) + ψ)`.
pub fn sample_noisy<R: Rng + ?Sized>(
    problem: &RootProblem,
    noise: &NoiseModel,
    x: &Vector,
    y: &Vector,
    rng: &mut R,
) -> Result<(Vector, Vector)> {
    let (fx, gx) = problem.evaluate(x, y)?;
    let (xi, psi) = noise.sample(problem.dim_x(), problem.dim_y(), rng);
    Ok((fx + xi, gx + psi))
}

// ---------------------------------------------------------------------------
// Linear instances

/// Block data of a linear problem `F = A11 x + A12 y − b1`, `G = A21 x + A22 y − b2`,
/// in the JSON layout accepted from files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearInstance {
    #[serde(rename = "A11")]
    pub a11: Vec<Vec<f64>>,
    #[serde(rename = "A12")]
    pub a12: Vec<Vec<f64>>,
    #[serde(rename = "A21")]
    pub a21: Vec<Vec<f64>>,
    #[serde(rename = "A22")]
    pub a22: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Dense matrices of a [`LinearInstance`] after shape checks.
#[derive(Clone, Debug)]
pub struct LinearBlocks {
    pub a11: DMatrix<f64>,
    pub a12: DMatrix<f64>,
    pub a21: DMatrix<f64>,
    pub a22: DMatrix<f64>,
    pub b1: Vector,
    pub b2: Vector,
}

impl LinearInstance {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn blocks(&self) -> Result<LinearBlocks> {
        let a11 = linalg::matrix_from_rows(&self.a11, "A11")?;
        let a12 = linalg::matrix_from_rows(&self.a12, "A12")?;
        let a21 = linalg::matrix_from_rows(&self.a21, "A21")?;
        let a22 = linalg::matrix_from_rows(&self.a22, "A22")?;
        let (dx, dy) = (a11.nrows(), a22.nrows());
        check_dim("A11 columns", dx, a11.ncols())?;
        check_dim("A22 columns", dy, a22.ncols())?;
        check_dim("A12 rows", dx, a12.nrows())?;
        check_dim("A12 columns", dy, a12.ncols())?;
        check_dim("A21 rows", dy, a21.nrows())?;
        check_dim("A21 columns", dx, a21.ncols())?;
        check_dim("b1", dx, self.b1.len())?;
        check_dim("b2", dy, self.b2.len())?;
        Ok(LinearBlocks {
            a11,
            a12,
            a21,
            a22,
            b1: Vector::from_column_slice(&self.b1),
            b2: Vector::from_column_slice(&self.b2),
        })
    }

    /// All four blocks and both offsets multiplied by −1.
    pub fn negated(&self) -> Self {
        let neg_m = |m: &Vec<Vec<f64>>| m.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
        Self {
            a11: neg_m(&self.a11),
            a12: neg_m(&self.a12),
            a21: neg_m(&self.a21),
            a22: neg_m(&self.a22),
            b1: self.b1.iter().map(|v| -v).collect(),
            b2: self.b2.iter().map(|v| -v).collect(),
        }
    }
}

impl LinearBlocks {
    /// Schur complement `Δ = A22 − A21 A11⁻¹ A12`.
    pub fn schur_complement(&self) -> Result<DMatrix<f64>> {
        let inv = linalg::inverse(&self.a11, "A11")?;
        Ok(&self.a22 - &self.a21 * inv * &self.a12)
    }

    /// Full block matrix `[[A11, A12], [A21, A22]]`.
    pub fn block_matrix(&self) -> DMatrix<f64> {
        let (dx, dy) = (self.a11.nrows(), self.a22.nrows());
        let mut m = DMatrix::zeros(dx + dy, dx + dy);
        m.view_mut((0, 0), (dx, dx)).copy_from(&self.a11);
        m.view_mut((0, dx), (dx, dy)).copy_from(&self.a12);
        m.view_mut((dx, 0), (dy, dx)).copy_from(&self.a21);
        m.view_mut((dx, dx), (dy, dy)).copy_from(&self.a22);
        m
    }
}

#[derive(Debug)]
struct LinearOperator {
    a11: DMatrix<f64>,
    a12: DMatrix<f64>,
    a21: DMatrix<f64>,
    a22: DMatrix<f64>,
    b1: Vector,
    b2: Vector,
    a11_inv: DMatrix<f64>,
}

impl CoupledOperator for LinearOperator {
    fn dim_x(&self) -> usize {
        self.a11.nrows()
    }

    fn dim_y(&self) -> usize {
        self.a22.nrows()
    }

    fn f(&self, x: &Vector, y: &Vector) -> Vector {
        &self.a11 * x + &self.a12 * y - &self.b1
    }

    fn g(&self, x: &Vector, y: &Vector) -> Vector {
        &self.a21 * x + &self.a22 * y - &self.b2
    }

    fn h(&self, y: &Vector) -> Option<Vector> {
        Some(&self.a11_inv * (&self.b1 - &self.a12 * y))
    }
}

fn monotonicity_constant(m: &DMatrix<f64>, block: &'static str) -> Result<(f64, bool)> {
    let ev = linalg::eigenvalues(m);
    if let Some(bad) = ev.iter().find(|z| z.re <= 0.0) {
        return Err(Error::NotMonotone {
            block,
            re: bad.re,
            sign: if bad.im < 0.0 { '-' } else { '+' },
            im_abs: bad.im.abs(),
        });
    }
    let sym = linalg::sym_part_min_eigenvalue(m);
    if sym > 0.0 {
        Ok((sym, true))
    } else {
        // Stable spectrum but indefinite symmetric part: only the spectral
        // abscissa is available as a rate constant.
        Ok((ev.iter().map(|z| z.re).fold(f64::INFINITY, f64::min), false))
    }
}

/// Builds the linear problem, its closed-form solution, and its constants.
pub fn make_linear_problem(inst: &LinearInstance) -> Result<RootProblem> {
    make_linear_problem_named("linear", inst)
}

fn make_linear_problem_named(name: &str, inst: &LinearInstance) -> Result<RootProblem> {
    let b = inst.blocks()?;
    let (mu_f, euclid_f) = monotonicity_constant(&b.a11, "A11")?;
    let delta = b.schur_complement()?;
    let (mu_g_raw, euclid_g) = monotonicity_constant(&delta, "Schur complement")?;
    let a11_inv = linalg::inverse(&b.a11, "A11")?;
    let delta_inv = linalg::inverse(&delta, "Schur complement")?;

    let y_star = &delta_inv * (&b.b2 - &b.a21 * &a11_inv * &b.b1);
    let x_star = &a11_inv * (&b.b1 - &b.a12 * &y_star);

    let regularity = Regularity {
        mu_f,
        mu_g: mu_g_raw.min(mu_f),
        lip_f: linalg::spectral_norm(&b.a11).max(linalg::spectral_norm(&b.a12)),
        lip_g: linalg::spectral_norm(&b.a21).max(linalg::spectral_norm(&b.a22)),
        lip_h: linalg::spectral_norm(&(&a11_inv * &b.a12)),
    };
    let ops = LinearOperator {
        a11: b.a11,
        a12: b.a12,
        a21: b.a21,
        a22: b.a22,
        b1: b.b1,
        b2: b.b2,
        a11_inv,
    };
    Ok(
        RootProblem::new(name, Arc::new(ops), Some((x_star, y_star)), regularity)?
            .with_euclidean_monotone(euclid_f && euclid_g),
    )
}

/// `F(x, y) = x`, `G(x, y) = y` in one dimension.
pub fn scalar_instance() -> RootProblem {
    let inst = LinearInstance {
        a11: vec![vec![1.0]],
        a12: vec![vec![0.0]],
        a21: vec![vec![0.0]],
        a22: vec![vec![1.0]],
        b1: vec![0.0],
        b2: vec![0.0],
    };
    make_linear_problem_named("scalar", &inst).expect("identity instance is valid")
}

/// The 2+2 example whose block matrix is not monotone, with its printed signs.
pub fn remark2_matrices() -> LinearInstance {
    LinearInstance {
        a11: vec![vec![-3.5, -8.5], vec![1.0, 0.0]],
        a12: vec![vec![2.0, 0.0], vec![0.0, 2.0]],
        a21: vec![vec![5.0, 0.0], vec![0.0, 5.0]],
        a22: vec![vec![-10.0, -1.6], vec![20.0, -1.0]],
        b1: vec![0.0, 0.0],
        b2: vec![0.0, 0.0],
    }
}

/// Runnable version of [`remark2_matrices`]: blocks negated so that the
/// descent update `x ← x − α F` is contractive.
pub fn remark2_instance() -> RootProblem {
    make_linear_problem_named("remark2", &remark2_matrices().negated())
        .expect("negated remark-2 blocks have stable spectra")
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum InnerShape {
    Tanh,
    Abs,
}

/// `F = x − H(y)`, `G = y + c (x − H(y))` with `H = c·tanh` or `H = c·|·|`.
#[derive(Debug)]
struct NonlinearScalar {
    c: f64,
    shape: InnerShape,
}

impl NonlinearScalar {
    fn inner(&self, y: f64) -> f64 {
        match self.shape {
            InnerShape::Tanh => self.c * y.tanh(),
            InnerShape::Abs => self.c * y.abs(),
        }
    }
}

impl CoupledOperator for NonlinearScalar {
    fn dim_x(&self) -> usize {
        1
    }

    fn dim_y(&self) -> usize {
        1
    }

    fn f(&self, x: &Vector, y: &Vector) -> Vector {
        Vector::from_element(1, x[0] - self.inner(y[0]))
    }

    fn g(&self, x: &Vector, y: &Vector) -> Vector {
        Vector::from_element(1, y[0] + self.c * (x[0] - self.inner(y[0])))
    }

    fn h(&self, y: &Vector) -> Option<Vector> {
        Some(Vector::from_element(1, self.inner(y[0])))
    }
}

fn make_nonlinear(c: f64, shape: InnerShape) -> Result<RootProblem> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "c must lie in (0, 1], got {c}"
        )));
    }
    let name = match shape {
        InnerShape::Tanh => format!("tanh:{c}"),
        InnerShape::Abs => format!("abs:{c}"),
    };
    // ∂G/∂y = 1 − c² H'(y)/c; |H'/c| ≤ 1, and for |·| the derivative can be −1.
    let lip_g = match shape {
        InnerShape::Tanh => 1.0,
        InnerShape::Abs => 1.0 + c * c,
    };
    let regularity = Regularity {
        mu_f: 1.0,
        mu_g: 1.0,
        lip_f: 1.0,
        lip_g,
        lip_h: c,
    };
    RootProblem::new(
        name,
        Arc::new(NonlinearScalar { c, shape }),
        Some((Vector::zeros(1), Vector::zeros(1))),
        regularity,
    )
}

pub fn make_tanh_instance(c: f64) -> Result<RootProblem> {
    make_nonlinear(c, InnerShape::Tanh)
}

pub fn make_abs_instance(c: f64) -> Result<RootProblem> {
    make_nonlinear(c, InnerShape::Abs)
}

/// Problem selector used by configs and the CLI: `scalar`, `remark2`,
/// `tanh:<c>`, `abs:<c>`, or a path to a linear-instance JSON file.
#[derive(Clone, Debug, PartialEq)]
pub enum ProblemId {
    Scalar,
    Remark2,
    Tanh(f64),
    Abs(f64),
    File(PathBuf),
}

impl ProblemId {
    pub fn build(&self) -> Result<RootProblem> {
        match self {
            ProblemId::Scalar => Ok(scalar_instance()),
            ProblemId::Remark2 => Ok(remark2_instance()),
            ProblemId::Tanh(c) => make_tanh_instance(*c),
            ProblemId::Abs(c) => make_abs_instance(*c),
            ProblemId::File(path) => {
                let text = std::fs::read_to_string(path)?;
                make_linear_problem(&LinearInstance::from_json(&text)?)
            }
        }
    }

    pub fn builtin_ids() -> &'static [&'static str] {
        &["scalar", "remark2", "tanh:<c>", "abs:<c>"]
    }
}

impl FromStr for ProblemId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_c = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::InvalidParameter(format!("bad constant in problem id `{s}`")))
        };
        match s {
            "scalar" => Ok(ProblemId::Scalar),
            "remark2" => Ok(ProblemId::Remark2),
            _ => {
                if let Some(v) = s.strip_prefix("tanh:") {
                    Ok(ProblemId::Tanh(parse_c(v)?))
                } else if let Some(v) = s.strip_prefix("abs:") {
                    Ok(ProblemId::Abs(parse_c(v)?))
                } else if s.is_empty() {
                    Err(Error::InvalidParameter("empty problem id".into()))
                } else {
                    Ok(ProblemId::File(PathBuf::from(s)))
                }
            }
        }
    }
}

impl fmt::Display for ProblemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProblemId::Scalar => write!(f, "scalar"),
            ProblemId::Remark2 => write!(f, "remark2"),
            ProblemId::Tanh(c) => write!(f, "tanh:{c}"),
            ProblemId::Abs(c) => write!(f, "abs:{c}"),
            ProblemId::File(p) => write!(f, "{}", p.display()),
        }
    }
}
