//! The Quad objective: the cross-entropy linear term with log Z replaced by
//! the quadratic (1/2)||Phi^T theta||^2. Its optimum has a closed form
//! through the eigendecomposition of the substitutability matrix, which this
//! module both computes and verifies against gradient training.

use crate::error::{Error, Result};
use crate::kahan::Kahan;
use crate::mat::{axpy, dot, Mat};
use crate::numerics::{psd_pinv, sym_eig, EigDecomp, SymMatrix, DEFAULT_REL_CUTOFF};
use crate::rng::Stream;
use crate::world::GroundTruth;

/// Omega* = E_{s~p_L}[p*(.|s) p*(.|s)^T] with its eigendecomposition.
/// Words with identical conditional rows ("free variants") have identical
/// rows here.
#[derive(Clone, Debug)]
pub struct SubstitutabilityMatrix {
    pub omega: SymMatrix,
    pub decomp: EigDecomp,
}

impl SubstitutabilityMatrix {
    /// Top-d eigenvector block U_d (V x d).
    pub fn top_block(&self, d: usize) -> Mat {
        self.decomp.top_vectors(d)
    }

    /// Number of eigenvalues above `rel` times the largest.
    pub fn effective_rank(&self, rel: f64) -> usize {
        let lmax = self.decomp.values.first().copied().unwrap_or(0.0);
        self.decomp.values.iter().filter(|&&l| l > rel * lmax).count()
    }
}

/// Exact weighted sum of conditional outer products.
pub fn substitutability(gt: &GroundTruth) -> Result<SubstitutabilityMatrix> {
    let v = gt.vocab();
    let cols: Vec<Vec<f64>> = (0..gt.contexts()).map(|s| gt.cond(s)).collect();
    let omega = SymMatrix::from_fn(v, |i, j| {
        let mut acc = Kahan::new();
        for (s, col) in cols.iter().enumerate() {
            let w = gt.p_l()[s];
            if w > 0.0 {
                acc.add(w * col[i] * col[j]);
            }
        }
        acc.sum()
    });
    let decomp = sym_eig(&omega)?;
    Ok(SubstitutabilityMatrix { omega, decomp })
}

/// Quad loss: E_{s~p_L}[ -theta_s^T Phi p*(.|s) + (1/2)||Phi^T theta_s||^2 ].
pub fn quad_loss(gt: &GroundTruth, phi: &Mat, theta: &Mat) -> f64 {
    assert_eq!(phi.cols(), gt.vocab());
    assert_eq!(theta.cols(), gt.contexts());
    assert_eq!(phi.rows(), theta.rows());
    let mut acc = Kahan::new();
    for s in 0..gt.contexts() {
        let w = gt.p_l()[s];
        if w == 0.0 {
            continue;
        }
        let th = theta.col(s);
        let lin = dot(&th, &phi.matvec(&gt.cond(s)));
        let emb = phi.t_matvec(&th);
        acc.add(w * (-lin + 0.5 * dot(&emb, &emb)));
    }
    acc.sum()
}

/// Per-context Quad optimum for fixed Phi: theta_s = (Phi Phi^T)^+ Phi p*,
/// the zero point of the gradient -Phi p* + Phi Phi^T theta on the retained
/// eigenspace.
pub fn quad_optimal_features(gt: &GroundTruth, phi: &Mat, rel_cutoff: f64) -> Result<Mat> {
    if !phi.is_finite() {
        return Err(Error::NonFinite("quad_optimal_features Phi"));
    }
    let gram = SymMatrix::from_mat_upper(&phi.matmul(&phi.transpose()));
    let pinv = psd_pinv(&gram, rel_cutoff)?;
    let mut theta = Mat::zeros(phi.rows(), gt.contexts());
    for s in 0..gt.contexts() {
        let target = phi.matvec(&gt.cond(s));
        theta.set_col(s, &pinv.mat().matvec(&target));
    }
    Ok(theta)
}

#[derive(Clone, Debug)]
pub struct QuadOptimum {
    pub phi_star: Mat,
    pub theta_star: Mat,
    pub value: f64,
    /// Eigengap at the cut fell below 1e-12; the top-d subspace is not
    /// unique and ties were broken by index.
    pub degenerate_gap: bool,
}

/// Closed-form optimum: Phi* = U_d^T in the canonical gauge, features from
/// `quad_optimal_features`, and value -(1/2) * sum of the top d eigenvalues
/// of Omega*.
pub fn quad_closed_form(gt: &GroundTruth, d: usize) -> Result<QuadOptimum> {
    if d == 0 || d > gt.vocab() {
        return Err(Error::DimMismatch(format!("need 1 <= d <= V, got d={d}")));
    }
    let sub = substitutability(gt)?;
    let degenerate_gap = if d < gt.vocab() {
        sub.decomp.values[d - 1] - sub.decomp.values[d] <= 1e-12
    } else {
        false
    };
    let phi_star = sub.top_block(d).transpose();
    let theta_star = quad_optimal_features(gt, &phi_star, DEFAULT_REL_CUTOFF)?;
    let mut acc = Kahan::new();
    for &l in sub.decomp.values.iter().take(d) {
        acc.add(l);
    }
    let value = -0.5 * acc.sum();
    Ok(QuadOptimum { phi_star, theta_star, value, degenerate_gap })
}

#[derive(Clone, Debug, PartialEq)]
pub enum QuadInit {
    /// Top-d eigenvectors of a perturbed Omega* (spectral warm start).
    SpectralPerturbed { noise: f64 },
    Gaussian,
}

#[derive(Clone, Debug)]
pub struct QuadTrainOpts {
    pub lr: crate::softmax::LrSchedule,
    pub max_iters: usize,
    pub seed: u64,
    pub init: QuadInit,
}

impl Default for QuadTrainOpts {
    fn default() -> Self {
        QuadTrainOpts {
            lr: crate::softmax::LrSchedule::default(),
            max_iters: 3000,
            seed: 0,
            init: QuadInit::SpectralPerturbed { noise: 0.05 },
        }
    }
}

#[derive(Clone, Debug)]
pub struct QuadTrained {
    pub phi: Mat,
    pub theta: Mat,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Alternating full-gradient descent on Theta and Phi with backtracking.
/// Deterministic given the seed.
pub fn train_quad(gt: &GroundTruth, d: usize, opts: &QuadTrainOpts) -> Result<QuadTrained> {
    if d == 0 || d > gt.vocab() {
        return Err(Error::DimMismatch(format!("need 1 <= d <= V, got d={d}")));
    }
    let stream = Stream::new(opts.seed).child("train_quad");
    let mut phi = match opts.init {
        QuadInit::SpectralPerturbed { noise } => {
            let sub = substitutability(gt)?;
            let mut base = sub.top_block(d).transpose();
            let mut jitter = stream.child("jitter");
            for i in 0..base.rows() {
                for x in base.row_mut(i) {
                    *x += noise * jitter.next_gaussian();
                }
            }
            base
        }
        QuadInit::Gaussian => {
            let mut init = stream.child("phi");
            let scale = 1.0 / (d as f64).sqrt();
            Mat::from_fn(d, gt.vocab(), |_, _| scale * init.next_gaussian())
        }
    };
    let mut theta = Mat::zeros(d, gt.contexts());

    let initial_loss = quad_loss(gt, &phi, &theta);
    let mut loss = initial_loss;
    let mut theta_step = opts.lr.t0;
    let mut phi_step = opts.lr.t0;

    for _iter in 0..opts.max_iters {
        // Theta full-gradient step; gradient column s is
        // p_L(s) (Phi Phi^T theta_s - Phi p*).
        let gram = phi.matmul(&phi.transpose());
        let mut grad_t = Mat::zeros(d, gt.contexts());
        for s in 0..gt.contexts() {
            let w = gt.p_l()[s];
            if w == 0.0 {
                continue;
            }
            let th = theta.col(s);
            let mut g = gram.matvec(&th);
            axpy(&mut g, -1.0, &phi.matvec(&gt.cond(s)));
            for x in &mut g {
                *x *= w;
            }
            grad_t.set_col(s, &g);
        }
        let gn2 = grad_t.frob_norm().powi(2);
        if gn2.sqrt() > 1e-14 {
            let f = quad_loss(gt, &phi, &theta);
            let mut t = theta_step;
            for _ in 0..60 {
                let mut cand = theta.clone();
                cand.axpy(-t, &grad_t);
                if quad_loss(gt, &phi, &cand) <= f - 0.25 * t * gn2 {
                    theta = cand;
                    theta_step = (t * opts.lr.growth).min(1e6);
                    break;
                }
                t *= 0.5;
                theta_step = t;
            }
        }

        // Phi full-gradient step; gradient is
        // E_s p_L(s) [ theta_s theta_s^T Phi - theta_s p*^T ].
        let mut grad_p = Mat::zeros(d, gt.vocab());
        for s in 0..gt.contexts() {
            let w = gt.p_l()[s];
            if w == 0.0 {
                continue;
            }
            let th = theta.col(s);
            let emb = phi.t_matvec(&th); // Phi^T theta_s, length V
            let truth = gt.cond(s);
            for i in 0..d {
                let wi = w * th[i];
                for (g, (&e, &p)) in grad_p.row_mut(i).iter_mut().zip(emb.iter().zip(&truth)) {
                    *g += wi * (e - p);
                }
            }
        }
        let gp2 = grad_p.frob_norm().powi(2);
        if gp2.sqrt() > 1e-14 {
            let f = quad_loss(gt, &phi, &theta);
            let mut t = phi_step;
            for _ in 0..60 {
                let mut cand = phi.clone();
                cand.axpy(-t, &grad_p);
                if quad_loss(gt, &cand, &theta) <= f - 0.25 * t * gp2 {
                    phi = cand;
                    phi_step = (t * opts.lr.growth).min(1e6);
                    break;
                }
                t *= 0.5;
                phi_step = t;
            }
        }

        loss = quad_loss(gt, &phi, &theta);
        if loss.abs() > initial_loss.abs().max(1.0) * 1e6 || !loss.is_finite() {
            return Err(Error::Divergence { loss, initial: initial_loss });
        }
    }

    Ok(QuadTrained { phi, theta, initial_loss, final_loss: loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::norm2;
    use crate::numerics::principal_angles;
    use crate::rng::Stream;
    use crate::world::{make_ground_truth, GroundTruth, WorldConfig, WorldStructure};

    fn world(v: usize, s: usize, seed: u64) -> GroundTruth {
        let cfg = WorldConfig { v, s, structure: WorldStructure::Dense, concentration: 1.0 };
        make_ground_truth(&cfg, seed).unwrap()
    }

    #[test]
    fn single_context_rank_one() {
        let cfg = WorldConfig {
            v: 4,
            s: 1,
            structure: WorldStructure::Dense,
            concentration: 1.0,
        };
        let gt = make_ground_truth(&cfg, 3).unwrap();
        let sub = substitutability(&gt).unwrap();
        assert_eq!(sub.effective_rank(1e-10), 1);
        // Omega = p p^T exactly
        let p = gt.cond(0);
        for i in 0..4 {
            for j in 0..4 {
                assert!((sub.omega[(i, j)] - p[i] * p[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn free_variants_have_identical_rows() {
        // duplicate word rows in Pstar -> identical Omega rows
        let pstar = Mat::from_rows(&[
            vec![0.3, 0.1],
            vec![0.3, 0.1],
            vec![0.2, 0.5],
            vec![0.2, 0.3],
        ]);
        let gt = GroundTruth::new(pstar, vec![0.4, 0.6]).unwrap();
        let sub = substitutability(&gt).unwrap();
        for j in 0..4 {
            assert!((sub.omega[(0, j)] - sub.omega[(1, j)]).abs() < 1e-15);
        }
    }

    #[test]
    fn trace_matches_direct_sum_and_is_at_most_one() {
        let gt = world(9, 12, 5);
        let sub = substitutability(&gt).unwrap();
        let mut expect = 0.0;
        for s in 0..12 {
            let c = gt.cond(s);
            expect += gt.p_l()[s] * dot(&c, &c);
        }
        assert!((sub.omega.trace() - expect).abs() < 1e-12);
        assert!(sub.omega.trace() <= 1.0 + 1e-12);
        // PSD
        let min_eig = sub.decomp.values.last().copied().unwrap();
        assert!(min_eig >= -1e-10 * sub.decomp.values[0]);
    }

    #[test]
    fn topic_mixture_rank_detected_by_eigensolver() {
        let cfg = WorldConfig {
            v: 20,
            s: 50,
            structure: WorldStructure::TopicMixture { rank: 3 },
            concentration: 1.0,
        };
        let gt = make_ground_truth(&cfg, 7).unwrap();
        let sub = substitutability(&gt).unwrap();
        assert_eq!(sub.effective_rank(1e-10), 3);
    }

    #[test]
    fn quad_loss_zero_theta_and_brute_force() {
        let gt = world(6, 4, 8);
        let mut s = Stream::new(9);
        let phi = Mat::from_fn(2, 6, |_, _| s.next_gaussian());
        assert_eq!(quad_loss(&gt, &phi, &Mat::zeros(2, 4)), 0.0);

        let theta = Mat::from_fn(2, 4, |_, _| s.next_gaussian());
        let mut expect = 0.0;
        for ctx in 0..4 {
            let th = theta.col(ctx);
            let mut lin = 0.0;
            for w in 0..6 {
                let phiw = phi.col(w);
                lin += gt.pstar()[(w, ctx)] * dot(&th, &phiw);
            }
            let mut quad = 0.0;
            for w in 0..6 {
                let phiw = phi.col(w);
                quad += dot(&th, &phiw).powi(2);
            }
            expect += gt.p_l()[ctx] * (-lin + 0.5 * quad);
        }
        assert!((quad_loss(&gt, &phi, &theta) - expect).abs() < 1e-12);
    }

    #[test]
    fn optimal_features_orthonormal_phi() {
        let gt = world(7, 5, 10);
        let sub = substitutability(&gt).unwrap();
        let phi = sub.top_block(3).transpose(); // orthonormal rows
        let theta = quad_optimal_features(&gt, &phi, DEFAULT_REL_CUTOFF).unwrap();
        for ctx in 0..5 {
            let want = phi.matvec(&gt.cond(ctx));
            let got = theta.col(ctx);
            assert!(norm2(&crate::mat::sub(&got, &want)) < 1e-10);
        }
    }

    #[test]
    fn optimal_features_first_order_and_gd_oracle() {
        let gt = world(8, 5, 11);
        let mut s = Stream::new(12);
        let phi = Mat::from_fn(3, 8, |_, _| s.next_gaussian());
        let theta = quad_optimal_features(&gt, &phi, DEFAULT_REL_CUTOFF).unwrap();
        let gram = phi.matmul(&phi.transpose());
        for ctx in 0..5 {
            let th = theta.col(ctx);
            let mut g = gram.matvec(&th);
            axpy(&mut g, -1.0, &phi.matvec(&gt.cond(ctx)));
            assert!(norm2(&g) <= 1e-9, "gradient {}", norm2(&g));
        }
        // GD oracle on one context: minimize -th^T Phi p* + 0.5 ||Phi^T th||^2
        let ctx = 2;
        let target = phi.matvec(&gt.cond(ctx));
        let mut th = vec![0.0; 3];
        for _ in 0..200_000 {
            let mut g = gram.matvec(&th);
            axpy(&mut g, -1.0, &target);
            if norm2(&g) < 1e-12 {
                break;
            }
            axpy(&mut th, -0.05, &g);
        }
        let got = theta.col(ctx);
        assert!(norm2(&crate::mat::sub(&th, &got)) < 1e-7);
    }

    #[test]
    fn closed_form_full_dimension_is_half_trace() {
        let gt = world(6, 8, 13);
        let sub = substitutability(&gt).unwrap();
        let opt = quad_closed_form(&gt, 6).unwrap();
        assert!((opt.value + 0.5 * sub.omega.trace()).abs() < 1e-10);
    }

    #[test]
    fn closed_form_single_context_span() {
        let cfg = WorldConfig { v: 5, s: 1, structure: WorldStructure::Dense, concentration: 1.0 };
        let gt = make_ground_truth(&cfg, 14).unwrap();
        let opt = quad_closed_form(&gt, 1).unwrap();
        let p = Mat::from_rows(&[gt.cond(0)]);
        let angles = principal_angles(&opt.phi_star, &p).unwrap();
        assert!(angles[0] <= 1e-8, "angle {}", angles[0]);
    }

    #[test]
    fn closed_form_value_matches_quad_loss_and_dominates_candidates() {
        let gt = world(8, 10, 15);
        let opt = quad_closed_form(&gt, 3).unwrap();
        let at_opt = quad_loss(&gt, &opt.phi_star, &opt.theta_star);
        assert!((at_opt - opt.value).abs() < 1e-10, "{at_opt} vs {}", opt.value);

        let mut s = Stream::new(16);
        for _ in 0..25 {
            let phi = Mat::from_fn(3, 8, |_, _| s.next_gaussian());
            let theta = Mat::from_fn(3, 10, |_, _| s.next_gaussian());
            assert!(opt.value <= quad_loss(&gt, &phi, &theta) + 1e-10);
            // also dominate the per-context optimum of that random phi
            let best_theta = quad_optimal_features(&gt, &phi, DEFAULT_REL_CUTOFF).unwrap();
            assert!(opt.value <= quad_loss(&gt, &phi, &best_theta) + 1e-10);
        }
    }

    #[test]
    fn permuting_words_preserves_quad_loss() {
        let gt = world(6, 5, 17);
        let mut s = Stream::new(18);
        let phi = Mat::from_fn(2, 6, |_, _| s.next_gaussian());
        let theta = Mat::from_fn(2, 5, |_, _| s.next_gaussian());
        let perm: Vec<usize> = vec![3, 0, 5, 1, 4, 2];
        let phi_p = Mat::from_fn(2, 6, |i, j| phi[(i, perm[j])]);
        let pstar_p = Mat::from_fn(6, 5, |i, j| gt.pstar()[(perm[i], j)]);
        let gt_p = GroundTruth::new(pstar_p, gt.p_l().to_vec()).unwrap();
        let a = quad_loss(&gt, &phi, &theta);
        let b = quad_loss(&gt_p, &phi_p, &theta);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gram_is_psd_so_theta_problem_is_convex() {
        let mut s = Stream::new(19);
        let phi = Mat::from_fn(3, 7, |_, _| s.next_gaussian());
        let gram = SymMatrix::from_mat_upper(&phi.matmul(&phi.transpose()));
        let eig = sym_eig(&gram).unwrap();
        assert!(eig.values.iter().all(|&l| l >= -1e-10 * eig.values[0]));
    }

    #[test]
    fn training_reaches_closed_form() {
        let cfg = WorldConfig {
            v: 20,
            s: 40,
            structure: WorldStructure::TopicMixture { rank: 3 },
            concentration: 1.0,
        };
        let gt = make_ground_truth(&cfg, 20).unwrap();
        let opt = quad_closed_form(&gt, 3).unwrap();
        assert!(!opt.degenerate_gap);
        let trained = train_quad(&gt, 3, &QuadTrainOpts { seed: 4, ..QuadTrainOpts::default() }).unwrap();
        assert!(
            (trained.final_loss - opt.value).abs() < 1e-6,
            "trained {} closed-form {}",
            trained.final_loss,
            opt.value
        );
        let angles = principal_angles(&trained.phi, &opt.phi_star).unwrap();
        assert!(angles.iter().all(|&a| a <= 1e-3), "angles {angles:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let gt = world(8, 10, 21);
        let opts = QuadTrainOpts { max_iters: 120, seed: 5, ..QuadTrainOpts::default() };
        let a = train_quad(&gt, 2, &opts).unwrap();
        let b = train_quad(&gt, 2, &opts).unwrap();
        assert_eq!(a.phi, b.phi);
        assert_eq!(a.theta, b.theta);
    }

    #[test]
    fn closed_form_features_solve_tasks_natural_for_phi_star() {
        // a task certified natural w.r.t. Phi* is solved by the closed-form
        // features to the certified loss
        use crate::linear_eval::{fit_linear, natural_certificate, FeatureTable, FitConstraints, FitOpts, LossKind};
        use crate::world::{make_natural_task, TaskSpec};

        let cfg = WorldConfig {
            v: 14,
            s: 30,
            structure: WorldStructure::TopicMixture { rank: 3 },
            concentration: 0.5,
        };
        let gt = make_ground_truth(&cfg, 77).unwrap();
        let spec = TaskSpec { word_plus: 0, word_minus: 1, b: 5.0, margin: 0.003, context_subset: None };
        let (task, _) = make_natural_task(&gt, &spec).unwrap();

        let opt = quad_closed_form(&gt, 3).unwrap();
        let cert = natural_certificate(&gt, &task, 5.0, Some(&opt.phi_star), &FitOpts::default()).unwrap();

        // v* = Phi*^T lambda*; lambda* acts identically on the closed-form
        // features theta*_s = Phi* p* (Phi* has orthonormal rows)
        let lambda = opt.phi_star.matvec(&cert.v_star);
        let feats = FeatureTable::from_mat(opt.theta_star.clone());
        let opts = FitOpts { warm_start: Some((lambda, 0.0)), ..FitOpts::default() };
        let fit = fit_linear(&feats, &task, LossKind::Hinge, &FitConstraints::default(), &opts).unwrap();
        assert!(fit.loss <= cert.tau + 1e-8, "quad features {} vs tau {}", fit.loss, cert.tau);
    }
}
