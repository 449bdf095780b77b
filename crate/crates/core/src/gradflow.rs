//! Closed-form gradient-flow dynamics for linear regression on squared loss,
//! plus the distilled-student variant and tools for comparing the two.
//!
//! For data `X` (n examples by p features, full row rank) and targets `y`,
//! gradient flow from zero weights has the closed form
//!
//! ```text
//! beta(t) = Xᵀ (XXᵀ)⁻¹ A(t) y          A(t) = I − exp(−t XXᵀ)
//! ```
//!
//! A student trained the same way, but on the labels `X beta(T)` produced by
//! a run stopped at time `T`, picks up a second damping factor:
//!
//! ```text
//! beta_s(t) = Xᵀ (XXᵀ)⁻¹ A(t) A(T) y
//! ```
//!
//! Along the eigendirections of `XXᵀ` both trajectories decouple into scalar
//! convergence factors, which is what makes the faster-direction bias of the
//! student checkable in closed form.

use crate::numerics::{
    dot, norm2, sym_eigendecompose, Matrix, NumericsError, SymEigen, DEFAULT_EIGEN_TOL,
};
use thiserror::Error;

/// Relative spread below which the data Gram matrix is treated as singular.
pub const GRAM_CONDITION_FLOOR: f64 = 1e-10;

/// Magnitude below which a limiting component is reported as undefined
/// instead of being used as a denominator.
pub const LIMIT_COMPONENT_FLOOR: f64 = 1e-12;

/// Divergence guard for the numerical integrator.
pub const ODE_NORM_GUARD: f64 = 1e12;

#[derive(Debug, Error)]
pub enum GradFlowError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("data Gram matrix is numerically singular (|lambda| range {min_abs:e}..{max_abs:e})")]
    SingularGram { min_abs: f64, max_abs: f64 },
    #[error("target factor {alpha_target} is unreachable; the student saturates at {max_reachable}")]
    Unreachable { alpha_target: f64, max_reachable: f64 },
    #[error("limiting component along direction {index} is numerically zero")]
    ZeroLimitComponent { index: usize },
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("integration diverged at t={t}: weight norm {norm:e}")]
    Unstable { t: f64, norm: f64 },
    #[error("direction index {index} out of range for {dim} directions")]
    BadIndex { index: usize, dim: usize },
}

/// A linear regression problem with the spectral data needed to evaluate
/// gradient-flow trajectories, plus the stop time of the run that produces
/// the student's training labels.
#[derive(Debug, Clone)]
pub struct GradFlowProblem {
    x: Matrix,
    y: Vec<f64>,
    gram_eigen: SymEigen,
    teacher_stop_time: f64,
}

impl GradFlowProblem {
    /// Builds the problem and eigendecomposes `XXᵀ`. Fails if the Gram matrix
    /// is numerically singular or the stop time is not positive.
    pub fn new(x: Matrix, y: Vec<f64>, teacher_stop_time: f64) -> Result<Self, GradFlowError> {
        if y.len() != x.rows() {
            return Err(GradFlowError::DomainError(format!(
                "{} targets for {} rows",
                y.len(),
                x.rows()
            )));
        }
        if !(teacher_stop_time > 0.0) || !teacher_stop_time.is_finite() {
            return Err(GradFlowError::DomainError(format!(
                "teacher stop time must be positive and finite, got {teacher_stop_time}"
            )));
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(GradFlowError::DomainError("targets must be finite".into()));
        }
        let n = x.rows();
        let mut gram = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = dot(x.row(i), x.row(j));
                gram.set(i, j, v);
                gram.set(j, i, v);
            }
        }
        let gram_eigen = sym_eigendecompose(&gram, DEFAULT_EIGEN_TOL)?;
        let max_abs = gram_eigen
            .eigenvalues
            .iter()
            .fold(0.0f64, |m, l| m.max(l.abs()));
        let min_abs = gram_eigen
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |m, l| m.min(l.abs()));
        let min_signed = gram_eigen
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |m, l| m.min(*l));
        if min_signed <= 0.0 || min_abs <= GRAM_CONDITION_FLOOR * max_abs {
            return Err(GradFlowError::SingularGram { min_abs, max_abs });
        }
        Ok(Self {
            x,
            y,
            gram_eigen,
            teacher_stop_time,
        })
    }

    /// Diagonal problem: `X = diag(sqrt(lambda))`, unit targets. Handy for
    /// spectrum-driven studies where only the eigenvalues matter.
    pub fn from_spectrum(lambdas: &[f64], teacher_stop_time: f64) -> Result<Self, GradFlowError> {
        if lambdas.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(GradFlowError::DomainError(
                "spectrum entries must be positive and finite".into(),
            ));
        }
        let n = lambdas.len();
        let mut x = Matrix::zeros(n, n);
        for (i, &l) in lambdas.iter().enumerate() {
            x.set(i, i, l.sqrt());
        }
        Self::new(x, vec![1.0; n], teacher_stop_time)
    }

    pub fn data(&self) -> &Matrix {
        &self.x
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    pub fn gram_eigen(&self) -> &SymEigen {
        &self.gram_eigen
    }

    /// Number of Gram eigendirections (= number of examples).
    pub fn num_directions(&self) -> usize {
        self.gram_eigen.dim
    }

    pub fn feature_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn teacher_stop_time(&self) -> f64 {
        self.teacher_stop_time
    }

    pub fn lambda(&self, k: usize) -> Result<f64, GradFlowError> {
        self.gram_eigen
            .eigenvalues
            .get(k)
            .copied()
            .ok_or(GradFlowError::BadIndex {
                index: k,
                dim: self.gram_eigen.dim,
            })
    }

    /// Teacher convergence factor `1 − exp(−lambda_k t)`.
    pub fn teacher_factor(&self, k: usize, t: f64) -> Result<f64, GradFlowError> {
        Ok(-(-self.lambda(k)? * t).exp_m1())
    }

    /// Student convergence factor `(1 − exp(−lambda_k t)) (1 − exp(−lambda_k T))`.
    pub fn student_factor(&self, k: usize, t: f64) -> Result<f64, GradFlowError> {
        let l = self.lambda(k)?;
        Ok((-(-l * t).exp_m1()) * (-(-l * self.teacher_stop_time).exp_m1()))
    }

    /// Weight vector from per-direction convergence factors:
    /// `sum_k factor_k / lambda_k * (v_kᵀ y) * Xᵀ v_k`.
    fn weights_from_factors(&self, factor: impl Fn(f64) -> f64) -> Vec<f64> {
        let n = self.num_directions();
        let mut coef = vec![0.0; n];
        for k in 0..n {
            let l = self.gram_eigen.eigenvalues[k];
            let vy = dot(&self.gram_eigen.eigenvector(k), &self.y);
            coef[k] = factor(l) / l * vy;
        }
        // weights = Xᵀ (V coef)
        let mut mixed = vec![0.0; n];
        for (i, m) in mixed.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..n {
                acc += self.gram_eigen.eigenvectors.get(i, k) * coef[k];
            }
            *m = acc;
        }
        self.x.tr_matvec(&mixed)
    }

    /// Closed-form weights of the run trained on the original targets,
    /// evaluated at time `t >= 0`.
    pub fn teacher_weights(&self, t: f64) -> Result<Vec<f64>, GradFlowError> {
        if !(t >= 0.0) {
            return Err(GradFlowError::DomainError(format!(
                "time must be nonnegative, got {t}"
            )));
        }
        Ok(self.weights_from_factors(|l| -(-l * t).exp_m1()))
    }

    /// Closed-form weights of the student trained on the labels emitted by
    /// the teacher at its stop time, evaluated at student time `t >= 0`.
    pub fn student_weights(&self, t: f64) -> Result<Vec<f64>, GradFlowError> {
        if !(t >= 0.0) {
            return Err(GradFlowError::DomainError(format!(
                "time must be nonnegative, got {t}"
            )));
        }
        let t_stop = self.teacher_stop_time;
        Ok(self.weights_from_factors(|l| {
            (-(-l * t).exp_m1()) * (-(-l * t_stop).exp_m1())
        }))
    }

    /// The infinite-time limit `Xᵀ (XXᵀ)⁻¹ y`: the minimum-norm interpolant.
    pub fn limit_weights(&self) -> Vec<f64> {
        self.weights_from_factors(|_| 1.0)
    }

    /// Unit parameter-space direction `Xᵀ v_k / ‖Xᵀ v_k‖` for Gram
    /// eigenvector `v_k`.
    pub fn parameter_direction(&self, k: usize) -> Result<Vec<f64>, GradFlowError> {
        if k >= self.num_directions() {
            return Err(GradFlowError::BadIndex {
                index: k,
                dim: self.num_directions(),
            });
        }
        let pulled = self.x.tr_matvec(&self.gram_eigen.eigenvector(k));
        let n = norm2(&pulled);
        Ok(pulled.iter().map(|v| v / n).collect())
    }
}

/// Weight-vector components along the pulled-back Gram eigendirections.
///
/// `beta[k]` is the projection of the weights onto direction `k`;
/// `alpha[k]` is that projection divided by the infinite-time limit's
/// projection, or `None` when the limit component is numerically zero.
#[derive(Debug, Clone)]
pub struct EigenComponents {
    pub beta: Vec<f64>,
    pub alpha: Vec<Option<f64>>,
}

/// Projects a weight vector onto the problem's parameter-space
/// eigendirections and recovers per-direction convergence factors.
pub fn eigen_components(
    p: &GradFlowProblem,
    weights: &[f64],
) -> Result<EigenComponents, GradFlowError> {
    if weights.len() != p.feature_dim() {
        return Err(GradFlowError::DomainError(format!(
            "weight length {} does not match feature dim {}",
            weights.len(),
            p.feature_dim()
        )));
    }
    let n = p.num_directions();
    let mut beta = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    for k in 0..n {
        let u = p.parameter_direction(k)?;
        let b = dot(weights, &u);
        // Limit component along u_k is (v_kᵀ y) / ‖Xᵀ v_k‖.
        let vy = dot(&p.gram_eigen().eigenvector(k), p.targets());
        let limit = vy / norm2(&p.data().tr_matvec(&p.gram_eigen().eigenvector(k)));
        beta.push(b);
        if limit.abs() < LIMIT_COMPONENT_FLOOR {
            alpha.push(None);
        } else {
            alpha.push(Some(b / limit));
        }
    }
    Ok(EigenComponents { beta, alpha })
}

/// Times at which the teacher and the student reach the same convergence
/// factor `alpha_target` along direction `k1`.
///
/// The student saturates at `1 − exp(−lambda_k1 T)`, so targets at or above
/// that are unreachable.
pub fn match_time_on_top(
    p: &GradFlowProblem,
    k1: usize,
    alpha_target: f64,
) -> Result<(f64, f64), GradFlowError> {
    let l = p.lambda(k1)?;
    let saturation = -(-l * p.teacher_stop_time()).exp_m1();
    if !(alpha_target > 0.0) || alpha_target >= saturation {
        return Err(GradFlowError::Unreachable {
            alpha_target,
            max_reachable: saturation,
        });
    }
    let t = -(-alpha_target).ln_1p() / l;
    let t_tilde = -(-alpha_target / saturation).ln_1p() / l;
    Ok((t, t_tilde))
}

/// Size of the slower direction's component in the student relative to the
/// teacher, when both runs are stopped at equal convergence along the faster
/// direction `k1`. Strictly below 1 whenever `lambda_k1 > lambda_k2`.
///
/// The exact ratio is bounded by `1 − exp(−lambda_k2 T)`, which can sit
/// closer to 1 than `f64` can resolve. When rounding collapses the computed
/// quotient to 1.0 or above, the result saturates at the largest double
/// below 1 so the strict bound survives in floating point.
pub fn verify_theorem(
    p: &GradFlowProblem,
    k1: usize,
    k2: usize,
    alpha_target: f64,
) -> Result<f64, GradFlowError> {
    let l1 = p.lambda(k1)?;
    let l2 = p.lambda(k2)?;
    if k1 >= k2 {
        return Err(GradFlowError::DomainError(format!(
            "need k1 < k2 in descending-eigenvalue order, got {k1}, {k2}"
        )));
    }
    if l1 <= l2 {
        return Err(GradFlowError::DomainError(format!(
            "directions must have distinct rates, got lambda {l1} <= {l2}"
        )));
    }
    let (t, t_tilde) = match_time_on_top(p, k1, alpha_target)?;
    let teacher = eigen_components(p, &p.teacher_weights(t)?)?;
    let student = eigen_components(p, &p.student_weights(t_tilde)?)?;
    if teacher.alpha[k2].is_none() {
        return Err(GradFlowError::ZeroLimitComponent { index: k2 });
    }
    let denom = teacher.beta[k2];
    if denom == 0.0 {
        return Err(GradFlowError::ZeroLimitComponent { index: k2 });
    }
    let ratio = (student.beta[k2] / denom).abs();
    if ratio >= 1.0 {
        return Ok(f64::from_bits(1.0f64.to_bits() - 1));
    }
    Ok(ratio)
}

/// Scalar gap behind the matched-convergence comparison:
///
/// ```text
/// gap(kappa, a, b) = a^k + b^k − (ab)^k − (a + b − ab)^k
/// ```
///
/// with `kappa`, `a`, `b` all in the open interval (0, 1). Positive
/// everywhere on that domain and symmetric in `a` and `b`.
pub fn proof_gap(kappa: f64, a: f64, b: f64) -> Result<f64, GradFlowError> {
    for (name, v) in [("kappa", kappa), ("a", a), ("b", b)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(GradFlowError::DomainError(format!(
                "{name} must lie in (0, 1), got {v}"
            )));
        }
    }
    Ok(a.powf(kappa) + b.powf(kappa)
        - (a * b).powf(kappa)
        - (a + b - a * b).powf(kappa))
}

/// Fixed-step fourth-order Runge-Kutta integration of
/// `dbeta/dt = −Xᵀ (X beta − labels)` from `beta(0) = 0`.
///
/// This is the independent check for the closed forms above, not a fast
/// path. The final step is shortened to land exactly on `t_end`.
pub fn ode_oracle(
    x: &Matrix,
    labels: &[f64],
    t_end: f64,
    step: f64,
) -> Result<Vec<f64>, GradFlowError> {
    if labels.len() != x.rows() {
        return Err(GradFlowError::DomainError(format!(
            "{} labels for {} rows",
            labels.len(),
            x.rows()
        )));
    }
    if !(t_end >= 0.0) || !(step > 0.0) {
        return Err(GradFlowError::DomainError(format!(
            "need t_end >= 0 and step > 0, got {t_end} and {step}"
        )));
    }
    let deriv = |beta: &[f64]| -> Vec<f64> {
        let residual: Vec<f64> = x
            .matvec(beta)
            .iter()
            .zip(labels)
            .map(|(pred, lab)| lab - pred)
            .collect();
        x.tr_matvec(&residual)
    };
    let p = x.cols();
    let mut beta = vec![0.0; p];
    let mut t = 0.0;
    while t < t_end {
        let h = step.min(t_end - t);
        let k1 = deriv(&beta);
        let k2 = deriv(&offset(&beta, &k1, h / 2.0));
        let k3 = deriv(&offset(&beta, &k2, h / 2.0));
        let k4 = deriv(&offset(&beta, &k3, h));
        for i in 0..p {
            beta[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        t += h;
        let norm = norm2(&beta);
        if !norm.is_finite() || norm > ODE_NORM_GUARD {
            return Err(GradFlowError::Unstable { t, norm });
        }
    }
    Ok(beta)
}

fn offset(base: &[f64], dir: &[f64], scale: f64) -> Vec<f64> {
    base.iter().zip(dir).map(|(b, d)| b + scale * d).collect()
}

/// One record of the matched-convergence sweep.
#[derive(Debug, Clone)]
pub struct TheoremSample {
    pub lambda1: f64,
    pub lambda2: f64,
    pub t_stop: f64,
    pub alpha_target: f64,
    pub t: f64,
    pub t_tilde: f64,
    pub ratio: f64,
}

/// Draws `count` random two-eigenvalue problems (rates log-uniform in
/// [0.01, 10], stop time log-uniform in [0.1, 10], target factor uniform over
/// the reachable range) and evaluates the matched-convergence ratio on each.
pub fn theorem_sweep(count: usize, seed: u64) -> Result<Vec<TheoremSample>, GradFlowError> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_xoshiro::Xoshiro256StarStar::seed_from_u64(seed);
    let log_uniform = |rng: &mut rand_xoshiro::Xoshiro256StarStar, lo: f64, hi: f64| -> f64 {
        (rng.random_range(lo.ln()..hi.ln())).exp()
    };
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = log_uniform(&mut rng, 0.01, 10.0);
        let b = log_uniform(&mut rng, 0.01, 10.0);
        if a == b {
            continue;
        }
        let (lambda1, lambda2) = if a > b { (a, b) } else { (b, a) };
        let t_stop = log_uniform(&mut rng, 0.1, 10.0);
        let p = GradFlowProblem::from_spectrum(&[lambda1, lambda2], t_stop)?;
        let saturation = -(-lambda1 * t_stop).exp_m1();
        let u: f64 = rng.random_range(1e-6..1.0 - 1e-6);
        let alpha_target = u * saturation;
        let (t, t_tilde) = match_time_on_top(&p, 0, alpha_target)?;
        let ratio = verify_theorem(&p, 0, 1, alpha_target)?;
        out.push(TheoremSample {
            lambda1,
            lambda2,
            t_stop,
            alpha_target,
            t,
            t_tilde,
            ratio,
        });
    }
    Ok(out)
}

/// Per-direction component magnitudes of the closed-form teacher and student
/// trajectories over a shared time grid.
#[derive(Debug, Clone)]
pub struct LinearTraces {
    pub times: Vec<f64>,
    /// `teacher[k][i]` is |beta_k| at `times[i]`.
    pub teacher: Vec<Vec<f64>>,
    pub student: Vec<Vec<f64>>,
}

/// Evaluates both closed-form trajectories on `times` and records component
/// magnitudes along every Gram eigendirection.
pub fn closed_form_traces(
    p: &GradFlowProblem,
    times: &[f64],
) -> Result<LinearTraces, GradFlowError> {
    let n = p.num_directions();
    let mut teacher = vec![Vec::with_capacity(times.len()); n];
    let mut student = vec![Vec::with_capacity(times.len()); n];
    for &t in times {
        let wt = eigen_components(p, &p.teacher_weights(t)?)?;
        let ws = eigen_components(p, &p.student_weights(t)?)?;
        for k in 0..n {
            teacher[k].push(wt.beta[k].abs());
            student[k].push(ws.beta[k].abs());
        }
    }
    Ok(LinearTraces {
        times: times.to_vec(),
        teacher,
        student,
    })
}
