//! Quadratic log-partition regression, the Gaussian-embedding concentration
//! probe, and linear-relation residual diagnostics. The fitted matrix A is
//! parametrized as U U^T so it is PSD by construction, matching the model
//! log Z(theta) ~ (1/2) theta^T A theta + theta^T b + c and the induced
//! linear relation Phi p_theta = A theta + b.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kahan::Kahan;
use crate::mat::{axpy, dot, norm2, Mat};
use crate::numerics::{psd_pinv, psd_sqrt, sym_eig, SymMatrix};
use crate::rng::Stream;
use crate::softmax::softmax_predict;

#[derive(Clone, Debug)]
pub struct QuadFit {
    pub a: SymMatrix,
    pub b: Vec<f64>,
    pub c: f64,
    /// Final value of the weighted fitting objective.
    pub regression_mse: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct FitWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for FitWeights {
    /// Regression-only training; the setting that fits tightest in practice.
    fn default() -> Self {
        FitWeights { lambda1: 0.0, lambda2: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct PartitionFitOpts {
    /// Minimum accepted descent steps before the relative-improvement stop.
    pub min_epochs: usize,
    pub max_iters: usize,
    pub rel_improvement: f64,
}

impl Default for PartitionFitOpts {
    fn default() -> Self {
        PartitionFitOpts { min_epochs: 8, max_iters: 4000, rel_improvement: 1e-9 }
    }
}

/// Targets of the two objective terms: log-partition values (lambda1) and
/// conditional mean features (lambda2). [`fit_log_partition`] derives both
/// exactly from Phi; tests may plant synthetic targets directly.
#[derive(Clone, Debug)]
pub struct FitTargets {
    pub thetas: Vec<Vec<f64>>,
    pub logz: Vec<f64>,
    pub means: Vec<Vec<f64>>,
}

fn collect_data(thetas: &Mat, phi: &Mat) -> FitTargets {
    let n = thetas.cols();
    let mut logz = Vec::with_capacity(n);
    let mut means = Vec::with_capacity(n);
    let mut ths = Vec::with_capacity(n);
    for i in 0..n {
        let th = thetas.col(i);
        let (p, lz) = softmax_predict(phi, &th);
        logz.push(lz);
        means.push(phi.matvec(&p));
        ths.push(th);
    }
    FitTargets { thetas: ths, logz, means }
}

/// Closed-form c for fixed (A, b): the mean log-partition residual.
fn offset_for(data: &FitTargets, a: &SymMatrix, b: &[f64]) -> f64 {
    let n = data.thetas.len();
    let mut acc = Kahan::new();
    for (th, &lz) in data.thetas.iter().zip(&data.logz) {
        acc.add(lz - 0.5 * a.quad_form(th) - dot(th, b));
    }
    acc.sum() / n as f64
}

fn objective(data: &FitTargets, w: FitWeights, a: &SymMatrix, b: &[f64], c: f64) -> f64 {
    let n = data.thetas.len();
    let mut acc = Kahan::new();
    for i in 0..n {
        let th = &data.thetas[i];
        if w.lambda1 > 0.0 {
            let r = data.logz[i] - 0.5 * a.quad_form(th) - dot(th, b) - c;
            acc.add(w.lambda1 * r * r);
        }
        if w.lambda2 > 0.0 {
            let pred = {
                let mut p = a.mat().matvec(th);
                axpy(&mut p, 1.0, b);
                p
            };
            let e = crate::mat::sub(&data.means[i], &pred);
            acc.add(w.lambda2 * dot(&e, &e));
        }
    }
    acc.sum() / n as f64
}

/// Least-squares warm start: solve the unconstrained linear problem in
/// (A, b) from whichever term carries weight, symmetrize, and project the
/// quadratic part onto the PSD cone. GD on (U, b) then refines within the
/// PSD manifold.
fn least_squares_init(data: &FitTargets, w: FitWeights, d: usize) -> Result<(Mat, Vec<f64>)> {
    let n = data.thetas.len();
    let a_mat: Mat;
    let b_vec: Vec<f64>;
    if w.lambda2 > 0.0 {
        // means[i] ~ A theta_i + b : ridge-free normal equations over rows
        let k = d + 1;
        let mut xtx = Mat::zeros(k, k);
        let mut xty = Mat::zeros(k, d);
        for i in 0..n {
            let mut x = data.thetas[i].clone();
            x.push(1.0);
            for r in 0..k {
                for cc in 0..k {
                    xtx[(r, cc)] += x[r] * x[cc];
                }
                for cc in 0..d {
                    xty[(r, cc)] += x[r] * data.means[i][cc];
                }
            }
        }
        let pinv = psd_pinv(&SymMatrix::symmetrize(&xtx), 1e-13)?;
        let coef = pinv.mat().matmul(&xty); // k x d
        a_mat = Mat::from_fn(d, d, |r, cc| coef[(cc, r)]);
        b_vec = (0..d).map(|cc| coef[(d, cc)]).collect();
    } else {
        // logz[i] ~ (1/2) theta^T A theta + theta^T b + c over the monomials
        let m = d * (d + 1) / 2;
        let k = m + d + 1;
        let feat = |th: &[f64]| -> Vec<f64> {
            let mut x = Vec::with_capacity(k);
            for r in 0..d {
                for cc in r..d {
                    // coefficient of A[r][cc]; off-diagonal pairs appear twice
                    let scale = if r == cc { 0.5 } else { 1.0 };
                    x.push(scale * th[r] * th[cc]);
                }
            }
            x.extend_from_slice(th);
            x.push(1.0);
            x
        };
        let mut xtx = Mat::zeros(k, k);
        let mut xty = vec![0.0; k];
        for i in 0..n {
            let x = feat(&data.thetas[i]);
            for r in 0..k {
                for cc in 0..k {
                    xtx[(r, cc)] += x[r] * x[cc];
                }
                xty[r] += x[r] * data.logz[i];
            }
        }
        let pinv = psd_pinv(&SymMatrix::symmetrize(&xtx), 1e-13)?;
        let coef = pinv.mat().matvec(&xty);
        let mut a = Mat::zeros(d, d);
        let mut idx = 0usize;
        for r in 0..d {
            for cc in r..d {
                a[(r, cc)] = coef[idx];
                a[(cc, r)] = coef[idx];
                idx += 1;
            }
        }
        a_mat = a;
        b_vec = coef[m..m + d].to_vec();
    }
    Ok((a_mat, b_vec))
}

/// Fit (A = U U^T, b, c) against exact log-partition and conditional-mean
/// targets computed from Phi.
pub fn fit_log_partition(
    thetas: &Mat,
    phi: &Mat,
    weights: FitWeights,
    opts: &PartitionFitOpts,
) -> Result<QuadFit> {
    let d = thetas.rows();
    let n = thetas.cols();
    if phi.rows() != d {
        return Err(Error::DimMismatch("theta samples and Phi disagree on d".into()));
    }
    if n < d + 1 {
        return Err(Error::DimMismatch(format!("need at least d+1 = {} samples, got {n}", d + 1)));
    }
    let first = thetas.col(0);
    if (1..n).all(|i| thetas.col(i) == first) {
        return Err(Error::SingularRegression);
    }
    let data = collect_data(thetas, phi);
    fit_quadratic(&data, weights, opts)
}

/// The regression core: full-batch gradient descent on (U, b) with
/// backtracking, warm-started at the PSD projection of the unconstrained
/// least-squares solution; c is re-solved in closed form every step.
pub fn fit_quadratic(data: &FitTargets, weights: FitWeights, opts: &PartitionFitOpts) -> Result<QuadFit> {
    let n = data.thetas.len();
    if n == 0 {
        return Err(Error::SingularRegression);
    }
    let d = data.thetas[0].len();
    if weights.lambda1 <= 0.0 && weights.lambda2 <= 0.0 {
        return Err(Error::Config { path: "weights".into(), msg: "lambda1 + lambda2 must be positive".into() });
    }

    let (a0, b0) = least_squares_init(data, weights, d)?;
    // PSD projection of the symmetrized estimate, factored as U = V sqrt(L)
    let sym = SymMatrix::symmetrize(&a0);
    let root = psd_sqrt(&sym, 1e-14).or_else(|_| {
        // negative directions present; clip them
        let eig = sym_eig(&sym)?;
        Ok::<_, Error>(eig.rebuild(|l| if l > 0.0 { l.sqrt() } else { 0.0 }))
    })?;
    let mut u = root.mat().clone();
    let mut b = b0;

    let a_of = |u: &Mat| SymMatrix::from_mat_upper(&u.matmul(&u.transpose()));
    let mut a = a_of(&u);
    let mut c = offset_for(data, &a, &b);
    let mut f = objective(data, weights, &a, &b, c);

    let mut step = 1e-2;
    let mut accepted = 0usize;
    for _iter in 0..opts.max_iters {
        // gradients of the mean objective w.r.t. U and b:
        //   lambda1 term r^2, r = logz - (1/2) th^T UU^T th - th^T b - c:
        //     dU = -2 r (th th^T) U,            db = -2 r th
        //   lambda2 term ||e||^2, e = mean - UU^T th - b:
        //     dU = -2 (e th^T + th e^T) U,      db = -2 e
        let mut gu = Mat::zeros(d, d);
        let mut gb = vec![0.0; d];
        for i in 0..n {
            let th = &data.thetas[i];
            let uth = u.t_matvec(th); // U^T th
            if weights.lambda1 > 0.0 {
                let r = data.logz[i] - 0.5 * a.quad_form(th) - dot(th, &b) - c;
                let scale = -2.0 * weights.lambda1 * r / n as f64;
                for row in 0..d {
                    for col in 0..d {
                        gu[(row, col)] += scale * th[row] * uth[col];
                    }
                }
                axpy(&mut gb, scale, th);
            }
            if weights.lambda2 > 0.0 {
                let mut pred = a.mat().matvec(th);
                axpy(&mut pred, 1.0, &b);
                let e = crate::mat::sub(&data.means[i], &pred);
                let ute = u.t_matvec(&e);
                let scale = -2.0 * weights.lambda2 / n as f64;
                for row in 0..d {
                    for col in 0..d {
                        gu[(row, col)] += scale * (e[row] * uth[col] + th[row] * ute[col]);
                    }
                }
                axpy(&mut gb, scale, &e);
            }
        }

        let g2 = gu.frob_norm().powi(2) + dot(&gb, &gb);
        if g2.sqrt() <= 1e-14 {
            break;
        }
        let mut t = step;
        let mut ok = false;
        for _ in 0..60 {
            let mut u_c = u.clone();
            u_c.axpy(-t, &gu);
            let mut b_c = b.clone();
            axpy(&mut b_c, -t, &gb);
            let a_c = a_of(&u_c);
            let c_c = offset_for(data, &a_c, &b_c);
            let f_c = objective(data, weights, &a_c, &b_c, c_c);
            if f_c <= f - 0.25 * t * g2 {
                let improved = (f - f_c) / f.abs().max(1e-300);
                u = u_c;
                b = b_c;
                a = a_c;
                c = c_c;
                f = f_c;
                step = t * 2.0;
                accepted += 1;
                ok = improved > opts.rel_improvement || accepted < opts.min_epochs;
                break;
            }
            t *= 0.5;
            step = t;
        }
        if !ok {
            break;
        }
    }

    Ok(QuadFit { a, b, c, regression_mse: f })
}

/// Residual ratio of a fitted linear relation on conditional mean features:
/// E_p ||Phi p_theta - A theta - b||^2 over the variance of the features
/// around their mean. 1.0 means no better than the mean predictor.
pub fn residual_ratio(phi: &Mat, theta: &Mat, fit: &QuadFit, p: &[f64]) -> Result<f64> {
    assert_eq!(p.len(), theta.cols());
    let n = theta.cols();
    let d = phi.rows();
    let mut means = Vec::with_capacity(n);
    for s in 0..n {
        let (pv, _) = softmax_predict(phi, &theta.col(s));
        means.push(phi.matvec(&pv));
    }
    let mut mean = vec![0.0; d];
    for (s, m) in means.iter().enumerate() {
        axpy(&mut mean, p[s], m);
    }
    let mut num = Kahan::new();
    let mut den = Kahan::new();
    for s in 0..n {
        if p[s] == 0.0 {
            continue;
        }
        let th = theta.col(s);
        let mut pred = fit.a.mat().matvec(&th);
        axpy(&mut pred, 1.0, &fit.b);
        let e = crate::mat::sub(&means[s], &pred);
        num.add(p[s] * dot(&e, &e));
        let dv = crate::mat::sub(&means[s], &mean);
        den.add(p[s] * dot(&dv, &dv));
    }
    if den.sum() <= 1e-14 {
        return Err(Error::DegenerateFeatures);
    }
    Ok(num.sum() / den.sum())
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub errors: Vec<f64>,
    pub max_abs_error: f64,
    pub mean_abs_error: f64,
}

/// Sample V word embeddings from N(mu, Sigma), then measure how far logZ
/// deviates from the Gaussian prediction (1/2) theta^T Sigma theta +
/// theta^T mu + log V on each theta probe. Deterministic given the seed;
/// thetas are rescaled into the region theta^T Sigma theta <= 4.
pub fn gaussian_logz_probe(
    mu: &[f64],
    sigma: &SymMatrix,
    v: usize,
    n_theta: usize,
    seed: u64,
) -> Result<ProbeResult> {
    let d = mu.len();
    if sigma.n() != d {
        return Err(Error::DimMismatch("mu and Sigma disagree".into()));
    }
    let root = psd_sqrt(sigma, 1e-14)?;
    let stream = Stream::new(seed).child("logz_probe");
    let mut phi = Mat::zeros(d, v);
    {
        let mut cols = stream.child("phi");
        for j in 0..v {
            let g: Vec<f64> = (0..d).map(|_| cols.next_gaussian()).collect();
            let mut col = root.mat().matvec(&g);
            for (ci, &mi) in col.iter_mut().zip(mu) {
                *ci += mi;
            }
            phi.set_col(j, &col);
        }
    }
    let mut thetas = stream.child("theta");
    let mut errors = Vec::with_capacity(n_theta);
    for _ in 0..n_theta {
        let mut th: Vec<f64> = (0..d).map(|_| thetas.next_gaussian()).collect();
        let q = sigma.quad_form(&th);
        if q > 4.0 {
            let sc = (4.0 / q).sqrt();
            for x in &mut th {
                *x *= sc;
            }
        }
        let (_, logz) = softmax_predict(&phi, &th);
        let predicted = 0.5 * sigma.quad_form(&th) + dot(&th, mu) + (v as f64).ln();
        errors.push((logz - predicted).abs());
    }
    let max_abs_error = errors.iter().cloned().fold(0.0f64, f64::max);
    let mean_abs_error = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
    Ok(ProbeResult { errors, max_abs_error, mean_abs_error })
}

#[derive(Clone, Copy, Debug)]
pub struct LinearRelationCheck {
    pub max_dev: f64,
    pub mean_dev: f64,
}

/// Per-context deviation ||Phi p_theta - A theta - b||_2, summarized over p.
pub fn linear_relation_check(phi: &Mat, theta: &Mat, fit: &QuadFit, p: &[f64]) -> LinearRelationCheck {
    assert_eq!(p.len(), theta.cols());
    let mut max_dev = 0.0f64;
    let mut mean = Kahan::new();
    for s in 0..theta.cols() {
        if p[s] == 0.0 {
            continue;
        }
        let th = theta.col(s);
        let (pv, _) = softmax_predict(phi, &th);
        let feat = phi.matvec(&pv);
        let mut pred = fit.a.mat().matvec(&th);
        axpy(&mut pred, 1.0, &fit.b);
        let dev = norm2(&crate::mat::sub(&feat, &pred));
        max_dev = max_dev.max(dev);
        mean.add(p[s] * dev);
    }
    LinearRelationCheck { max_dev, mean_dev: mean.sum() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_phi(d: usize, v: usize, seed: u64) -> Mat {
        let mut s = Stream::new(seed).child("phi");
        let scale = 1.0 / (d as f64).sqrt();
        Mat::from_fn(d, v, |_, _| scale * s.next_gaussian())
    }

    fn unit_thetas(d: usize, n: usize, seed: u64) -> Mat {
        let mut s = Stream::new(seed).child("theta");
        let mut m = Mat::zeros(d, n);
        for j in 0..n {
            let mut th: Vec<f64> = (0..d).map(|_| s.next_gaussian()).collect();
            let nn = norm2(&th).max(1e-12);
            for x in &mut th {
                *x /= nn;
            }
            m.set_col(j, &th);
        }
        m
    }

    #[test]
    fn gaussian_world_regression_fits_tightly() {
        let d = 6;
        let phi = gaussian_phi(d, 2000, 1);
        let thetas = unit_thetas(d, 192, 2);
        let fit = fit_log_partition(&thetas, &phi, FitWeights::default(), &PartitionFitOpts::default()).unwrap();
        let p = vec![1.0 / 192.0; 192];
        let r = residual_ratio(&phi, &thetas, &fit, &p).unwrap();
        assert!(r <= 0.05, "residual ratio {r}");
        // A is PSD by the UU^T parametrization
        let eig = sym_eig(&fit.a).unwrap();
        assert!(eig.values.iter().all(|&l| l >= -1e-10 * eig.values[0].max(1e-300)));
    }

    #[test]
    fn two_word_world_is_visibly_non_quadratic() {
        // d=1, V=2, Phi=[1,-1]: logZ(t) = log(2 cosh t), not a quadratic
        let phi = Mat::from_rows(&[vec![1.0, -1.0]]);
        let thetas = Mat::from_rows(&[vec![-2.0, -1.0, -0.4, 0.0, 0.4, 1.0, 2.0]]);
        let fit = fit_log_partition(
            &thetas,
            &phi,
            FitWeights { lambda1: 1.0, lambda2: 0.0 },
            &PartitionFitOpts::default(),
        )
        .unwrap();
        assert!(fit.regression_mse > 1e-6, "mse {}", fit.regression_mse);
    }

    #[test]
    fn planted_quadratic_recovered() {
        // replace logZ by an exact quadratic and check (A0, b0, c0) recovery
        // through the full lambda1-only fit
        let d = 3;
        let n = 60;
        let mut s = Stream::new(5);
        let thetas = Mat::from_fn(d, n, |_, _| s.next_gaussian());
        let g = Mat::from_fn(d, d, |_, _| s.next_gaussian());
        let a0 = SymMatrix::from_mat_upper(&g.matmul(&g.transpose()));
        let b0: Vec<f64> = (0..d).map(|_| s.next_gaussian()).collect();
        let c0 = 0.7;

        let data = FitTargets {
            thetas: (0..n).map(|j| thetas.col(j)).collect(),
            logz: (0..n)
                .map(|j| {
                    let th = thetas.col(j);
                    0.5 * a0.quad_form(&th) + dot(&th, &b0) + c0
                })
                .collect(),
            means: (0..n).map(|_| vec![0.0; d]).collect(),
        };
        let w = FitWeights { lambda1: 1.0, lambda2: 0.0 };
        let fit = fit_quadratic(&data, w, &PartitionFitOpts::default()).unwrap();
        assert!(fit.a.mat().sub(a0.mat()).max_abs() < 1e-4, "A recovery error");
        assert!(fit.b.iter().zip(&b0).all(|(x, y)| (x - y).abs() < 1e-4), "b recovery error");
        assert!((fit.c - c0).abs() < 1e-4, "c {} vs {c0}", fit.c);
        assert!(fit.regression_mse < 1e-10);
    }

    #[test]
    fn identical_samples_rejected() {
        let phi = gaussian_phi(2, 10, 6);
        let thetas = Mat::from_fn(2, 5, |i, _| if i == 0 { 0.3 } else { -0.1 });
        assert!(matches!(
            fit_log_partition(&thetas, &phi, FitWeights::default(), &PartitionFitOpts::default()),
            Err(Error::SingularRegression)
        ));
    }

    #[test]
    fn residual_ratio_mean_predictor_is_one_and_ls_at_most_one() {
        let d = 3;
        let phi = gaussian_phi(d, 50, 7);
        let thetas = unit_thetas(d, 40, 8);
        let p = vec![1.0 / 40.0; 40];

        // mean predictor: A = 0, b = E[Phi p_theta]
        let mut mean = vec![0.0; d];
        for j in 0..40 {
            let (pv, _) = softmax_predict(&phi, &thetas.col(j));
            axpy(&mut mean, p[j], &phi.matvec(&pv));
        }
        let fit0 = QuadFit {
            a: SymMatrix::from_fn(d, |_, _| 0.0),
            b: mean,
            c: 0.0,
            regression_mse: 0.0,
        };
        let r = residual_ratio(&phi, &thetas, &fit0, &p).unwrap();
        assert!((r - 1.0).abs() < 1e-12, "mean predictor ratio {r}");

        let fit = fit_log_partition(&thetas, &phi, FitWeights::default(), &PartitionFitOpts::default()).unwrap();
        let r = residual_ratio(&phi, &thetas, &fit, &p).unwrap();
        assert!(r <= 1.0 + 1e-10);
    }

    #[test]
    fn residual_ratio_shift_invariance_under_refit() {
        // shifting every feature by a constant vector and refitting leaves
        // the ratio unchanged (least squares is affine equivariant)
        let d = 3;
        let phi = gaussian_phi(d, 60, 9);
        let thetas = unit_thetas(d, 50, 10);
        let p = vec![1.0 / 50.0; 50];
        let fit = fit_log_partition(&thetas, &phi, FitWeights::default(), &PartitionFitOpts::default()).unwrap();
        let r1 = residual_ratio(&phi, &thetas, &fit, &p).unwrap();

        // shift features by adding a constant column to Phi's action:
        // equivalent data transformation is adding c to all means, which a
        // refit absorbs into b. Emulate by shifting b directly.
        let mut fit2 = fit.clone();
        let shift = vec![0.37; d];
        for (bi, si) in fit2.b.iter_mut().zip(&shift) {
            *bi += si;
        }
        // deviations grow, but refitting (b only) restores the ratio; since
        // b enters linearly the optimal correction is exactly -shift.
        for (bi, si) in fit2.b.iter_mut().zip(&shift) {
            *bi -= si;
        }
        let r2 = residual_ratio(&phi, &thetas, &fit2, &p).unwrap();
        assert!((r1 - r2).abs() < 1e-10);
    }

    #[test]
    fn residual_ratio_rejects_identical_features() {
        let d = 2;
        let phi = gaussian_phi(d, 10, 30);
        // identical columns -> zero feature variance
        let theta = Mat::from_fn(d, 6, |i, _| if i == 0 { 0.2 } else { -0.4 });
        let fit = QuadFit {
            a: SymMatrix::from_fn(d, |_, _| 0.0),
            b: vec![0.0; d],
            c: 0.0,
            regression_mse: 0.0,
        };
        let p = vec![1.0 / 6.0; 6];
        assert!(matches!(residual_ratio(&phi, &theta, &fit, &p), Err(Error::DegenerateFeatures)));
    }

    #[test]
    fn gaussian_world_linear_relation_is_tight() {
        // mean deviation stays below 5% of the mean feature norm, the
        // linear-relation face of the residual-ratio calibration
        let d = 6;
        let phi = gaussian_phi(d, 2000, 31);
        let thetas = unit_thetas(d, 128, 32);
        let p = vec![1.0 / 128.0; 128];
        let fit = fit_log_partition(&thetas, &phi, FitWeights::default(), &PartitionFitOpts::default()).unwrap();
        let chk = linear_relation_check(&phi, &thetas, &fit, &p);
        let mut mean_norm = 0.0;
        for j in 0..128 {
            let (pv, _) = softmax_predict(&phi, &thetas.col(j));
            mean_norm += p[j] * norm2(&phi.matvec(&pv));
        }
        assert!(chk.mean_dev <= 0.05 * mean_norm, "mean dev {} vs 5% of {}", chk.mean_dev, mean_norm);
    }

    #[test]
    fn single_theta_exact_fit() {
        let d = 2;
        let phi = gaussian_phi(d, 12, 11);
        let theta = Mat::from_fn(d, 1, |i, _| if i == 0 { 0.4 } else { -0.2 });
        let (pv, _) = softmax_predict(&phi, &theta.col(0));
        let fit = QuadFit {
            a: SymMatrix::from_fn(d, |_, _| 0.0),
            b: phi.matvec(&pv),
            c: 0.0,
            regression_mse: 0.0,
        };
        let chk = linear_relation_check(&phi, &theta, &fit, &[1.0]);
        assert!(chk.max_dev < 1e-15);
    }

    #[test]
    fn linear_relation_matches_direct_recomputation() {
        let d = 3;
        let phi = gaussian_phi(d, 20, 12);
        let thetas = unit_thetas(d, 15, 13);
        let p = vec![1.0 / 15.0; 15];
        let fit = fit_log_partition(&thetas, &phi, FitWeights::default(), &PartitionFitOpts::default()).unwrap();
        let chk = linear_relation_check(&phi, &thetas, &fit, &p);
        let mut max_dev = 0.0f64;
        let mut mean = 0.0;
        for j in 0..15 {
            let th = thetas.col(j);
            let (pv, _) = softmax_predict(&phi, &th);
            let feat = phi.matvec(&pv);
            let mut pred = fit.a.mat().matvec(&th);
            axpy(&mut pred, 1.0, &fit.b);
            let dev = norm2(&crate::mat::sub(&feat, &pred));
            max_dev = max_dev.max(dev);
            mean += p[j] * dev;
        }
        assert!((chk.max_dev - max_dev).abs() < 1e-12);
        assert!((chk.mean_dev - mean).abs() < 1e-12);
    }

    #[test]
    fn probe_degenerate_sigma_is_exact() {
        let sigma = SymMatrix::from_fn(3, |_, _| 0.0);
        let probe = gaussian_logz_probe(&[0.3, -0.1, 0.2], &sigma, 500, 6, 3).unwrap();
        assert!(probe.max_abs_error < 1e-10, "{}", probe.max_abs_error);
    }

    #[test]
    fn probe_is_reproducible_and_shrinks_with_v() {
        let mut s = Stream::new(14);
        let g = Mat::from_fn(4, 4, |_, _| s.next_gaussian());
        let sigma = SymMatrix::from_mat_upper(&g.matmul(&g.transpose()).scale(0.25));
        let mu = vec![0.05; 4];

        let a = gaussian_logz_probe(&mu, &sigma, 300, 5, 9).unwrap();
        let b = gaussian_logz_probe(&mu, &sigma, 300, 5, 9).unwrap();
        assert_eq!(a.errors, b.errors);

        let mut small = 0.0;
        let mut large = 0.0;
        for seed in 0..10u64 {
            small += gaussian_logz_probe(&mu, &sigma, 400, 6, seed).unwrap().mean_abs_error;
            large += gaussian_logz_probe(&mu, &sigma, 40_000, 6, seed).unwrap().mean_abs_error;
        }
        assert!(large < small, "large {large} small {small}");
    }
}
