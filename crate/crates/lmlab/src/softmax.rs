//! Cross-entropy language modeling: unconstrained table models and
//! d-dimensional softmax models, their optima, gradients, and conditional
//! mean features. All losses are exact expectations over the finite world.

use crate::error::{Error, Result};
use crate::kahan::{ksum, Kahan};
use crate::mat::{axpy, dot, norm2, Mat};
use crate::rng::Stream;
use crate::world::GroundTruth;

/// Softmax model: word embeddings Phi (d x V, columns phi_w) and a feature
/// table Theta (d x S, column s = f(s)).
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxModel {
    pub phi: Mat,
    pub theta: Mat,
}

impl SoftmaxModel {
    pub fn new(phi: Mat, theta: Mat) -> Result<Self> {
        if !phi.is_finite() || !theta.is_finite() {
            return Err(Error::NonFinite("softmax model"));
        }
        if phi.rows() != theta.rows() {
            return Err(Error::DimMismatch("Phi and Theta embedding dims differ".into()));
        }
        if phi.rows() > phi.cols() {
            return Err(Error::DimMismatch("need d <= V".into()));
        }
        Ok(SoftmaxModel { phi, theta })
    }

    pub fn d(&self) -> usize {
        self.phi.rows()
    }

    pub fn vocab(&self) -> usize {
        self.phi.cols()
    }

    pub fn contexts(&self) -> usize {
        self.theta.cols()
    }

    /// Predicted conditional for context s.
    pub fn cond(&self, s: usize) -> Vec<f64> {
        softmax_predict(&self.phi, &self.theta.col(s)).0
    }
}

/// Unconstrained model: one stochastic column per context.
#[derive(Clone, Debug, PartialEq)]
pub struct TableModel {
    p: Mat,
}

impl TableModel {
    pub fn new(p: Mat) -> Result<Self> {
        for j in 0..p.cols() {
            let col = p.col(j);
            if col.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::NotStochastic("table model column"));
            }
            if (ksum(col.iter().cloned()) - 1.0).abs() > 1e-12 {
                return Err(Error::NotStochastic("table model column"));
            }
        }
        Ok(TableModel { p })
    }

    pub fn vocab(&self) -> usize {
        self.p.rows()
    }

    pub fn contexts(&self) -> usize {
        self.p.cols()
    }

    pub fn cond(&self, s: usize) -> Vec<f64> {
        self.p.col(s)
    }

    pub fn mat(&self) -> &Mat {
        &self.p
    }
}

/// Softmax with max-logit subtraction: returns the probability vector and
/// the exact log partition value.
pub fn softmax_predict(phi: &Mat, theta: &[f64]) -> (Vec<f64>, f64) {
    let logits = phi.t_matvec(theta);
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z = ksum(p.iter().cloned());
    for x in &mut p {
        *x /= z;
    }
    (p, m + z.ln())
}

/// Cross-entropy of a predicted conditional against the true one, in nats.
/// Returns +inf when the prediction has a zero where the truth has mass.
fn xent_term(truth: &[f64], pred: &[f64]) -> f64 {
    let mut acc = Kahan::new();
    for (&t, &q) in truth.iter().zip(pred) {
        if t == 0.0 {
            continue;
        }
        if q == 0.0 {
            return f64::INFINITY;
        }
        acc.add(-t * q.ln());
    }
    acc.sum()
}

/// Per-context cross-entropy of a softmax model, computed in the log domain
/// (logZ - logit) so tiny probabilities never underflow.
fn xent_term_softmax(truth: &[f64], phi: &Mat, theta: &[f64]) -> f64 {
    let logits = phi.t_matvec(theta);
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = ksum(logits.iter().map(|&l| (l - m).exp()));
    let logz = m + z.ln();
    let mut acc = Kahan::new();
    for (&t, &l) in truth.iter().zip(&logits) {
        if t > 0.0 {
            acc.add(t * (logz - l));
        }
    }
    acc.sum()
}

/// Model views accepted by the loss/covariance routines.
#[derive(Clone, Copy, Debug)]
pub enum ModelRef<'a> {
    Table(&'a TableModel),
    Softmax(&'a SoftmaxModel),
}

impl<'a> ModelRef<'a> {
    pub fn cond(&self, s: usize) -> Vec<f64> {
        match self {
            ModelRef::Table(t) => t.cond(s),
            ModelRef::Softmax(m) => m.cond(s),
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            ModelRef::Table(t) => t.vocab(),
            ModelRef::Softmax(m) => m.vocab(),
        }
    }

    pub fn contexts(&self) -> usize {
        match self {
            ModelRef::Table(t) => t.contexts(),
            ModelRef::Softmax(m) => m.contexts(),
        }
    }
}

/// Expected cross-entropy E_{s~p_L} E_{w~p*|s} [-log p_model(w|s)].
pub fn xent_loss(gt: &GroundTruth, model: ModelRef) -> f64 {
    assert_eq!(model.vocab(), gt.vocab(), "vocab mismatch");
    assert_eq!(model.contexts(), gt.contexts(), "context mismatch");
    let mut acc = Kahan::new();
    for s in 0..gt.contexts() {
        let w = gt.p_l()[s];
        if w == 0.0 {
            continue;
        }
        let truth = gt.cond(s);
        let term = match model {
            ModelRef::Table(t) => xent_term(&truth, &t.cond(s)),
            ModelRef::Softmax(m) => xent_term_softmax(&truth, &m.phi, &m.theta.col(s)),
        };
        if term.is_infinite() {
            return f64::INFINITY;
        }
        acc.add(w * term);
    }
    acc.sum()
}

/// Gradient of the per-context cross-entropy in theta: Phi (p_theta - p*|s).
pub fn xent_grad(gt: &GroundTruth, s: usize, phi: &Mat, theta: &[f64]) -> Vec<f64> {
    let (p, _) = softmax_predict(phi, theta);
    let diff = crate::mat::sub(&p, &gt.cond(s));
    phi.matvec(&diff)
}

/// The unconstrained optimum: expected entropy of the true conditionals.
pub fn optimal_xent(gt: &GroundTruth) -> f64 {
    let mut acc = Kahan::new();
    for s in 0..gt.contexts() {
        let w = gt.p_l()[s];
        if w == 0.0 {
            continue;
        }
        let mut h = Kahan::new();
        for &p in &gt.cond(s) {
            if p > 0.0 {
                h.add(-p * p.ln());
            }
        }
        acc.add(w * h.sum());
    }
    acc.sum()
}

/// Iteration cap for the per-context convex minimization.
pub const CONTEXT_OPT_MAX_ITERS: usize = 100_000;
/// Default gradient-norm tolerance for per-context optimization.
pub const CONTEXT_OPT_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct ContextOpt {
    pub theta: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Minimize rho(theta) = logZ(theta) - theta^T Phi q over theta by gradient
/// descent with backtracking line search (Armijo, step memory doubling).
/// This is the per-context cross-entropy when q is a true conditional, and
/// the proof-form rho of the softmax Pinsker check for general stochastic q.
pub fn minimize_context_xent(phi: &Mat, q: &[f64], tol: f64, max_iters: usize) -> ContextOpt {
    let d = phi.rows();
    let target = phi.matvec(q); // Phi q, the linear-term coefficient
    let mut theta = vec![0.0; d];
    let eval = |th: &[f64]| -> (f64, Vec<f64>) {
        let (p, logz) = softmax_predict(phi, th);
        let f = logz - dot(th, &target);
        let g = crate::mat::sub(&phi.matvec(&p), &target);
        (f, g)
    };
    let (mut f, mut g) = eval(&theta);
    let mut step = 1.0;
    let mut converged = false;
    let mut iters = 0usize;
    loop {
        let gn2 = dot(&g, &g);
        if gn2.sqrt() <= tol {
            converged = true;
            break;
        }
        if iters >= max_iters {
            break;
        }
        // Armijo only counts while its decrease is resolvable in f64 (a
        // sub-ULP "decrease" is rounding luck and can undo progress); below
        // that granularity steps must strictly contract the gradient.
        let slack = 4.0 * f64::EPSILON * f.abs();
        let mut t = step;
        let mut accepted = false;
        for _ in 0..60 {
            let mut cand = theta.clone();
            axpy(&mut cand, -t, &g);
            let (fc, gc) = eval(&cand);
            let sufficient = 0.25 * t * gn2 > slack && fc <= f - 0.25 * t * gn2;
            let flat_but_contracting = fc <= f + slack && dot(&gc, &gc) < gn2;
            if sufficient || flat_but_contracting {
                theta = cand;
                f = fc;
                g = gc;
                step = t * 2.0;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iters += 1;
        if !accepted {
            break;
        }
    }
    let grad_norm = norm2(&g);
    ContextOpt { theta, value: f, grad_norm, converged }
}

#[derive(Clone, Debug)]
pub struct PhiOptimum {
    pub value: f64,
    pub theta_star: Mat,
    /// All contexts reached the gradient tolerance.
    pub converged: bool,
}

/// Minimum cross-entropy achievable with fixed word embeddings:
/// E_{s~p_L}[inf_theta l_xent,s(theta, Phi)], solved context by context
/// (the objective decouples when Phi is fixed).
pub fn optimal_xent_phi(gt: &GroundTruth, phi: &Mat, tol: f64) -> Result<PhiOptimum> {
    if !phi.is_finite() {
        return Err(Error::NonFinite("optimal_xent_phi Phi"));
    }
    assert_eq!(phi.cols(), gt.vocab(), "Phi vocab mismatch");
    let d = phi.rows();
    let mut theta_star = Mat::zeros(d, gt.contexts());
    let mut acc = Kahan::new();
    let mut converged = true;
    for s in 0..gt.contexts() {
        let truth = gt.cond(s);
        let opt = minimize_context_xent(phi, &truth, tol, CONTEXT_OPT_MAX_ITERS);
        converged &= opt.converged;
        theta_star.set_col(s, &opt.theta);
        let w = gt.p_l()[s];
        if w > 0.0 {
            // value recomputed in the exact log-domain form
            acc.add(w * xent_term_softmax(&truth, phi, &opt.theta));
        }
    }
    Ok(PhiOptimum { value: acc.sum(), theta_star, converged })
}

/// Initial trial step and growth factor for backtracking line searches.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct LrSchedule {
    pub t0: f64,
    pub growth: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { t0: 1.0, growth: 2.0 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOpts {
    pub fix_phi: Option<Mat>,
    pub lr: LrSchedule,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts { fix_phi: None, lr: LrSchedule::default(), max_iters: 2000, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: SoftmaxModel,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Train by cross-entropy. Theta steps are per context (contexts decouple
/// for fixed Phi); when Phi is learned the pass alternates a full-gradient
/// Phi step with backtracking. Deterministic given the seed.
pub fn train_lm(gt: &GroundTruth, d: usize, opts: &TrainOpts) -> Result<Trained> {
    if d > gt.vocab() {
        return Err(Error::DimMismatch("need d <= V".into()));
    }
    let stream = Stream::new(opts.seed).child("train_lm");
    let phi = match &opts.fix_phi {
        Some(p) => {
            if p.rows() != d || p.cols() != gt.vocab() {
                return Err(Error::DimMismatch("fix_phi shape".into()));
            }
            p.clone()
        }
        None => {
            let mut init = stream.child("phi");
            let scale = 1.0 / (d as f64).sqrt();
            Mat::from_fn(d, gt.vocab(), |_, _| scale * init.next_gaussian())
        }
    };
    let mut theta_init = stream.child("theta");
    let theta = Mat::from_fn(d, gt.contexts(), |_, _| 0.01 * theta_init.next_gaussian());

    let mut model = SoftmaxModel::new(phi, theta)?;
    let initial_loss = xent_loss(gt, ModelRef::Softmax(&model));
    let mut loss = initial_loss;
    let learn_phi = opts.fix_phi.is_none();
    let mut phi_step = opts.lr.t0;
    let mut theta_steps = vec![opts.lr.t0; gt.contexts()];

    for _iter in 0..opts.max_iters {
        // Theta pass: every context gets one backtracked descent step.
        for s in 0..gt.contexts() {
            let truth = gt.cond(s);
            let target = model.phi.matvec(&truth);
            let th = model.theta.col(s);
            let (p, logz) = softmax_predict(&model.phi, &th);
            let f = logz - dot(&th, &target);
            let g = crate::mat::sub(&model.phi.matvec(&p), &target);
            let gn2 = dot(&g, &g);
            if gn2.sqrt() <= 1e-13 {
                continue;
            }
            let mut t = theta_steps[s];
            for _ in 0..60 {
                let mut cand = th.clone();
                axpy(&mut cand, -t, &g);
                let (pc, logzc) = softmax_predict(&model.phi, &cand);
                let fc = logzc - dot(&cand, &target);
                let _ = pc;
                if fc <= f - 0.25 * t * gn2 {
                    model.theta.set_col(s, &cand);
                    theta_steps[s] = (t * opts.lr.growth).min(1e6);
                    break;
                }
                t *= 0.5;
                theta_steps[s] = t;
            }
        }

        if learn_phi {
            // Full-gradient step on Phi with backtracking on the total loss.
            let mut grad = Mat::zeros(d, gt.vocab());
            for s in 0..gt.contexts() {
                let w = gt.p_l()[s];
                if w == 0.0 {
                    continue;
                }
                let th = model.theta.col(s);
                let (p, _) = softmax_predict(&model.phi, &th);
                let diff = crate::mat::sub(&p, &gt.cond(s));
                for i in 0..d {
                    for (gj, &dj) in grad.row_mut(i).iter_mut().zip(&diff) {
                        *gj += w * th[i] * dj;
                    }
                }
            }
            let gn2 = grad.frob_norm().powi(2);
            if gn2.sqrt() > 1e-13 {
                let f = xent_loss(gt, ModelRef::Softmax(&model));
                let mut t = phi_step;
                for _ in 0..60 {
                    let mut cand = model.phi.clone();
                    cand.axpy(-t, &grad);
                    let cand_model = SoftmaxModel { phi: cand, theta: model.theta.clone() };
                    let fc = xent_loss(gt, ModelRef::Softmax(&cand_model));
                    if fc <= f - 0.25 * t * gn2 {
                        model = cand_model;
                        phi_step = (t * opts.lr.growth).min(1e6);
                        break;
                    }
                    t *= 0.5;
                    phi_step = t;
                }
            }
        }

        loss = xent_loss(gt, ModelRef::Softmax(&model));
        if loss > initial_loss * 10.0 {
            return Err(Error::Divergence { loss, initial: initial_loss });
        }
    }

    Ok(Trained { model, initial_loss, final_loss: loss })
}

/// Conditional mean features: column s is Phi p_{theta_s}.
pub fn conditional_mean(phi: &Mat, theta: &Mat) -> Mat {
    assert_eq!(phi.rows(), theta.rows(), "embedding dims differ");
    let mut out = Mat::zeros(phi.rows(), theta.cols());
    for s in 0..theta.cols() {
        let (p, _) = softmax_predict(phi, &theta.col(s));
        out.set_col(s, &phi.matvec(&p));
    }
    out
}

#[derive(Clone, Debug)]
pub struct EpsilonModel {
    pub model: SoftmaxModel,
    pub t: f64,
    pub achieved_eps: f64,
    /// Target suboptimality exceeds the t=1 endpoint.
    pub unreachable: bool,
}

/// Construct a model with prescribed cross-entropy suboptimality relative to
/// the Theta* baseline by bisecting the interpolation Theta_t =
/// (1-t) Theta* + t Theta_rand. The loss along the segment is convex with
/// its minimum at t=0, so the suboptimality is monotone in t.
pub fn epsilon_model(
    gt: &GroundTruth,
    phi: &Mat,
    theta_star: &Mat,
    theta_rand: &Mat,
    target_eps: f64,
) -> Result<EpsilonModel> {
    assert!(target_eps >= 0.0, "target_eps must be nonnegative");
    let baseline = xent_loss(gt, ModelRef::Softmax(&SoftmaxModel::new(phi.clone(), theta_star.clone())?));
    let model_at = |t: f64| -> Result<(SoftmaxModel, f64)> {
        let mut theta = theta_star.scale(1.0 - t);
        theta.axpy(t, theta_rand);
        let m = SoftmaxModel::new(phi.clone(), theta)?;
        let eps = xent_loss(gt, ModelRef::Softmax(&m)) - baseline;
        Ok((m, eps))
    };

    if target_eps == 0.0 {
        let (m, eps) = model_at(0.0)?;
        return Ok(EpsilonModel { model: m, t: 0.0, achieved_eps: eps, unreachable: false });
    }
    let (m1, e1) = model_at(1.0)?;
    if e1 < target_eps {
        return Ok(EpsilonModel { model: m1, t: 1.0, achieved_eps: e1, unreachable: true });
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut best = (m1, e1, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let (m, e) = model_at(mid)?;
        if (e - target_eps).abs() <= 0.01 * target_eps {
            return Ok(EpsilonModel { model: m, t: mid, achieved_eps: e, unreachable: false });
        }
        if e < target_eps {
            lo = mid;
        } else {
            hi = mid;
        }
        best = (m, e, mid);
    }
    let (m, e, t) = best;
    Ok(EpsilonModel { model: m, t, achieved_eps: e, unreachable: false })
}
