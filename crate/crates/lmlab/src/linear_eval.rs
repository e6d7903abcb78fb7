//! Linear classification over arbitrary feature maps: loss evaluation,
//! constrained fitting by projected subgradient descent, natural-task
//! certification, and Bayes-error analysis.

use crate::error::{Error, Result};
use crate::kahan::Kahan;
use crate::mat::{axpy, dot, norm2, norm_inf, sub, Mat};
use crate::numerics::orthonormal_rows;
use crate::world::{GroundTruth, NaturalCertificate, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Hinge,
    Logistic,
}

impl LossKind {
    /// Per-example surrogate loss; both are 1-Lipschitz in the score.
    #[inline]
    pub fn loss(self, score: f64, y: f64) -> f64 {
        let m = y * score;
        match self {
            LossKind::Hinge => (1.0 - m).max(0.0),
            // log(1 + e^{-m}) computed stably on both tails
            LossKind::Logistic => {
                if m > 0.0 {
                    (-m).exp().ln_1p()
                } else {
                    -m + m.exp().ln_1p()
                }
            }
        }
    }

    /// d loss / d score.
    #[inline]
    fn dloss(self, score: f64, y: f64) -> f64 {
        let m = y * score;
        match self {
            LossKind::Hinge => {
                if m <= 1.0 {
                    -y
                } else {
                    0.0
                }
            }
            LossKind::Logistic => -y / (1.0 + m.exp()),
        }
    }
}

/// Feature map over contexts: column s holds g(s).
#[derive(Clone, Debug)]
pub struct FeatureTable {
    cols: Mat,
}

impl FeatureTable {
    pub fn from_mat(cols: Mat) -> Self {
        FeatureTable { cols }
    }

    pub fn dim(&self) -> usize {
        self.cols.rows()
    }

    pub fn contexts(&self) -> usize {
        self.cols.cols()
    }

    pub fn col(&self, s: usize) -> Vec<f64> {
        self.cols.col(s)
    }

    pub fn mat(&self) -> &Mat {
        &self.cols
    }
}

/// Expected surrogate loss of (v, intercept) over the task distribution.
/// Uses the task's conditional label probabilities when present.
pub fn clf_loss(features: &FeatureTable, task: &Task, v: &[f64], intercept: f64, kind: LossKind) -> f64 {
    assert_eq!(features.dim(), v.len(), "classifier dim mismatch");
    assert_eq!(features.contexts(), task.len(), "context count mismatch");
    let mut acc = Kahan::new();
    for s in 0..task.len() {
        let w = task.p_t[s];
        if w == 0.0 {
            continue;
        }
        let score = dot(features.mat().col(s).as_slice(), v) + intercept;
        let q = task.prob_pos(s);
        let mut term = 0.0;
        if q > 0.0 {
            term += q * kind.loss(score, 1.0);
        }
        if q < 1.0 {
            term += (1.0 - q) * kind.loss(score, -1.0);
        }
        acc.add(w * term);
    }
    acc.sum()
}

/// Loss of a raw per-context scalar predictor g(s).
pub fn predictor_loss(task: &Task, scores: &[f64], kind: LossKind) -> f64 {
    assert_eq!(scores.len(), task.len());
    let mut acc = Kahan::new();
    for s in 0..task.len() {
        let w = task.p_t[s];
        if w == 0.0 {
            continue;
        }
        let q = task.prob_pos(s);
        let mut term = 0.0;
        if q > 0.0 {
            term += q * kind.loss(scores[s], 1.0);
        }
        if q < 1.0 {
            term += (1.0 - q) * kind.loss(scores[s], -1.0);
        }
        acc.add(w * term);
    }
    acc.sum()
}

#[derive(Clone, Debug, Default)]
pub struct FitConstraints {
    pub inf_norm_bound: Option<f64>,
    /// Rows spanning the admissible subspace for v.
    pub subspace: Option<Mat>,
    pub intercept: bool,
}

#[derive(Clone, Debug)]
pub struct FitOpts {
    pub max_iters: usize,
    /// Stop refining once the Polyak level gap falls below this.
    pub tol: f64,
    pub warm_start: Option<(Vec<f64>, f64)>,
}

impl Default for FitOpts {
    fn default() -> Self {
        FitOpts { max_iters: 60_000, tol: 1e-9, warm_start: None }
    }
}

#[derive(Clone, Debug)]
pub struct Fit {
    pub v: Vec<f64>,
    pub intercept: f64,
    pub loss: f64,
    /// Budget exhausted before the level gap reached `tol`.
    pub stalled: bool,
}

/// Number of Dykstra alternation rounds for the (inf-ball AND subspace)
/// joint projection. Both sets are convex so the iteration converges
/// geometrically; 50 rounds leaves residuals far below 1e-10.
const DYKSTRA_ROUNDS: usize = 50;

struct Projector {
    bound: Option<f64>,
    basis: Option<Mat>, // orthonormal rows spanning the subspace
}

impl Projector {
    fn new(c: &FitConstraints) -> Result<Self> {
        if let Some(b) = c.inf_norm_bound {
            if b < 0.0 {
                return Err(Error::Config { path: "constraints.inf_norm_bound".into(), msg: "B must be >= 0".into() });
            }
        }
        let basis = match &c.subspace {
            Some(m) => Some(orthonormal_rows(m)?),
            None => None,
        };
        Ok(Projector { bound: c.inf_norm_bound, basis })
    }

    fn clip(v: &mut [f64], b: f64) {
        for x in v.iter_mut() {
            *x = x.clamp(-b, b);
        }
    }

    fn span(&self, v: &[f64]) -> Vec<f64> {
        match &self.basis {
            Some(q) => q.t_matvec(&q.matvec(v)),
            None => v.to_vec(),
        }
    }

    /// Project onto the intersection of the constraint sets. With both
    /// constraints active this is Dykstra's algorithm followed by an exact
    /// subspace projection and an inf-norm rescale, so the returned point
    /// satisfies the subspace exactly and the bound to 0 tolerance.
    fn project(&self, v: &[f64]) -> Vec<f64> {
        match (&self.basis, self.bound) {
            (None, None) => v.to_vec(),
            (None, Some(b)) => {
                let mut out = v.to_vec();
                Self::clip(&mut out, b);
                out
            }
            (Some(_), None) => self.span(v),
            (Some(_), Some(b)) => {
                let mut x = v.to_vec();
                let mut p = vec![0.0; v.len()]; // correction for the clip set
                let mut q = vec![0.0; v.len()]; // correction for the subspace
                for _ in 0..DYKSTRA_ROUNDS {
                    let mut y: Vec<f64> = x.iter().zip(&p).map(|(a, c)| a + c).collect();
                    Self::clip(&mut y, b);
                    for i in 0..p.len() {
                        p[i] = x[i] + p[i] - y[i];
                    }
                    let z_in: Vec<f64> = y.iter().zip(&q).map(|(a, c)| a + c).collect();
                    let z = self.span(&z_in);
                    for i in 0..q.len() {
                        q[i] = z_in[i] - z[i];
                    }
                    x = z;
                }
                // x lies in the subspace exactly; pull any residual bound
                // violation in by scaling (scaling preserves the subspace)
                let m = norm_inf(&x);
                if m > b && m > 0.0 {
                    let sc = b / m;
                    for xi in &mut x {
                        *xi *= sc;
                    }
                }
                x
            }
        }
    }
}

/// Projected subgradient descent (hinge) / projected gradient descent
/// (logistic) with Polyak-style adaptive target levels. Both surrogate
/// losses are nonnegative, so 0 is always a valid lower bound for the
/// Polyak step; the level parameter halves whenever a refinement phase
/// fails to reach its target.
pub fn fit_linear(
    features: &FeatureTable,
    task: &Task,
    kind: LossKind,
    constraints: &FitConstraints,
    opts: &FitOpts,
) -> Result<Fit> {
    let dim = features.dim();
    let proj = Projector::new(constraints)?;

    let (mut v, mut b0) = match &opts.warm_start {
        Some((w, c)) => (proj.project(w), if constraints.intercept { *c } else { 0.0 }),
        None => (proj.project(&vec![0.0; dim]), 0.0),
    };

    let eval = |v: &[f64], b: f64| clf_loss(features, task, v, b, kind);

    let grad = |v: &[f64], b: f64| -> (Vec<f64>, f64, f64) {
        let mut g = vec![0.0; dim];
        let mut gb = 0.0;
        let mut acc = Kahan::new();
        for s in 0..task.len() {
            let w = task.p_t[s];
            if w == 0.0 {
                continue;
            }
            let col = features.mat().col(s);
            let score = dot(&col, v) + b;
            let q = task.prob_pos(s);
            let mut d = 0.0;
            let mut f = 0.0;
            if q > 0.0 {
                d += q * kind.dloss(score, 1.0);
                f += q * kind.loss(score, 1.0);
            }
            if q < 1.0 {
                d += (1.0 - q) * kind.dloss(score, -1.0);
                f += (1.0 - q) * kind.loss(score, -1.0);
            }
            axpy(&mut g, w * d, &col);
            gb += w * d;
            acc.add(w * f);
        }
        (g, gb, acc.sum())
    };

    let mut best_v = v.clone();
    let mut best_b = b0;
    let mut best_f = eval(&v, b0);

    let mut delta = (best_f * 0.5).max(opts.tol);
    let phase_budget = (opts.max_iters / 64).max(50);
    let mut iters = 0usize;

    while iters < opts.max_iters && delta > opts.tol {
        let target = (best_f - delta).max(0.0);
        let phase_start_best = best_f;
        let mut k = 0usize;
        while k < phase_budget && iters < opts.max_iters {
            let (g, gb, f) = grad(&v, b0);
            if f < best_f {
                best_f = f;
                best_v = v.clone();
                best_b = b0;
            }
            if f <= target {
                break;
            }
            let gnorm2 = dot(&g, &g) + if constraints.intercept { gb * gb } else { 0.0 };
            if gnorm2 <= 1e-300 {
                // flat point: either optimal or a hinge plateau; stop phase
                break;
            }
            let step = (f - target) / gnorm2;
            let mut next: Vec<f64> = v.clone();
            axpy(&mut next, -step, &g);
            v = proj.project(&next);
            if constraints.intercept {
                b0 -= step * gb;
            }
            k += 1;
            iters += 1;
        }
        if best_f > phase_start_best - 0.25 * delta {
            delta *= 0.5;
            // restart the walk from the incumbent
            v = best_v.clone();
            b0 = best_b;
        }
    }

    let stalled = delta > opts.tol.max(1e-6 * best_f.max(1.0));
    let loss = eval(&best_v, best_b);
    Ok(Fit { v: best_v, intercept: best_b, loss, stalled })
}

/// Certify (tau, B)-naturalness (optionally w.r.t. a subspace) by fitting a
/// bounded classifier over the true conditionals. The reported tau is the
/// achieved loss, an upper bound on the true minimum.
pub fn natural_certificate(
    gt: &GroundTruth,
    task: &Task,
    b: f64,
    subspace: Option<&Mat>,
    opts: &FitOpts,
) -> Result<NaturalCertificate> {
    let features = FeatureTable::from_mat(gt.pstar().clone());
    let constraints = FitConstraints {
        inf_norm_bound: Some(b),
        subspace: subspace.cloned(),
        intercept: false,
    };
    let fit = fit_linear(&features, task, LossKind::Hinge, &constraints, opts)?;
    let cert = NaturalCertificate {
        v_star: fit.v,
        b,
        tau: fit.loss,
        intercept: fit.intercept,
        subspace: subspace.cloned(),
    };
    cert.check_invariants()?;
    Ok(cert)
}

#[derive(Clone, Copy, Debug)]
pub struct BayesAnalysis {
    pub bayes_error: f64,
    /// Hinge loss of the difference-of-conditionals predictor g_T.
    pub loss_of_gt: f64,
}

/// Bayes error and the hinge loss of g_T(s) = P(+1|s) - P(-1|s). The
/// analysis needs the task's conditional label table; deterministic labels
/// count as the noiseless table.
pub fn bayes_analysis(task: &Task) -> BayesAnalysis {
    let n = task.len();
    let mut bayes = Kahan::new();
    let mut scores = vec![0.0; n];
    for s in 0..n {
        let q = task.prob_pos(s);
        scores[s] = 2.0 * q - 1.0;
        bayes.add(task.p_t[s] * q.min(1.0 - q));
    }
    let loss = predictor_loss(task, &scores, LossKind::Hinge);
    BayesAnalysis { bayes_error: bayes.sum(), loss_of_gt: loss }
}

/// Residual of v off the row span of phi, relative to ||v||.
pub fn subspace_residual(phi: &Mat, v: &[f64]) -> Result<f64> {
    let q = orthonormal_rows(phi)?;
    let proj = q.t_matvec(&q.matvec(v));
    Ok(norm2(&sub(v, &proj)) / norm2(v).max(1e-300))
}
