//! Experiment orchestration: deterministic world/model/certificate/bound
//! pipelines, epsilon sweeps with the square-root trend fit, and file
//! emission (JSON documents plus plot-ready CSV).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::bound::{theorem_bound_report, BoundOptions, BoundReport, GammaMode, TheoremFamily};
use crate::config::{ExperimentConfig, Objective, PhiPolicy};
use crate::error::{Error, Result};
use crate::linear_eval::{fit_linear, natural_certificate, FeatureTable, FitConstraints, FitOpts, LossKind};
use crate::mat::Mat;
use crate::numerics::principal_angles;
use crate::quad::{quad_closed_form, substitutability, train_quad, QuadTrainOpts};
use crate::rng::Stream;
use crate::softmax::{
    conditional_mean, epsilon_model, optimal_xent, optimal_xent_phi, xent_loss, ModelRef, SoftmaxModel,
    TableModel,
};
use crate::world::{make_ground_truth, make_natural_task, GroundTruth, NaturalCertificate, Task};

/// Combined world + task document (the task fields are present when the
/// config defines one).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldDoc {
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "p_L")]
    pub p_l: Vec<f64>,
    #[serde(rename = "Pstar")]
    pub pstar: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<i8>>,
    #[serde(rename = "p_T", skip_serializing_if = "Option::is_none")]
    pub p_t: Option<Vec<f64>>,
}

impl WorldDoc {
    pub fn new(gt: &GroundTruth, task: Option<&Task>) -> Self {
        WorldDoc {
            v: gt.vocab(),
            s: gt.contexts(),
            p_l: gt.p_l().to_vec(),
            pstar: gt.pstar().to_rows(),
            labels: task.map(|t| t.labels.clone()),
            p_t: task.map(|t| t.p_t.clone()),
        }
    }

    pub fn to_ground_truth(&self) -> Result<GroundTruth> {
        GroundTruth::new(Mat::from_rows(&self.pstar), self.p_l.clone())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelDoc {
    pub d: usize,
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "Phi")]
    pub phi: Vec<Vec<f64>>,
    #[serde(rename = "Theta")]
    pub theta: Vec<Vec<f64>>,
}

impl ModelDoc {
    pub fn new(model: &SoftmaxModel) -> Self {
        ModelDoc {
            d: model.d(),
            v: model.vocab(),
            s: model.contexts(),
            phi: model.phi.to_rows(),
            theta: model.theta.to_rows(),
        }
    }

    pub fn to_model(&self) -> Result<SoftmaxModel> {
        SoftmaxModel::new(Mat::from_rows(&self.phi), Mat::from_rows(&self.theta))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertificateDoc {
    #[serde(rename = "B")]
    pub b: f64,
    pub tau: f64,
    pub v: Vec<f64>,
    pub intercept: f64,
    pub subspace_dim: Option<usize>,
}

impl CertificateDoc {
    pub fn new(cert: &NaturalCertificate) -> Self {
        CertificateDoc {
            b: cert.b,
            tau: cert.tau,
            v: cert.v_star.clone(),
            intercept: cert.intercept,
            subspace_dim: cert.subspace.as_ref().map(|m| m.rows()),
        }
    }
}

/// Square-root trend fit y ~ a sqrt(x - b) + c, selected by the best
/// Pearson r over a grid of 100 admissible offsets b.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SqrtFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub r_value: f64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct SweepRow {
    pub t: f64,
    pub eps: f64,
    pub xent: f64,
    pub downstream_loss: f64,
}

impl SweepRow {
    pub fn csv_header() -> &'static str {
        "t,eps,xent,downstream_loss"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.t, self.eps, self.xent, self.downstream_loss)
    }
}

/// World + noisy task from the config, deterministic in the seed.
pub fn build_world_and_task(cfg: &ExperimentConfig) -> Result<(GroundTruth, Task, NaturalCertificate)> {
    let gt = make_ground_truth(&cfg.world, cfg.seed)?;
    let (task, witness) = make_natural_task(&gt, &cfg.task.to_spec())?;
    let task = if cfg.task.flip_eta > 0.0 { task.with_flip_noise(cfg.task.flip_eta) } else { task };
    Ok((gt, task, witness))
}

/// Word embeddings per the configured policy.
pub fn build_phi(cfg: &ExperimentConfig, gt: &GroundTruth) -> Result<Mat> {
    match cfg.model.phi_policy {
        PhiPolicy::OmegaTop => Ok(substitutability(gt)?.top_block(cfg.model.d).transpose()),
        PhiPolicy::Random => {
            let mut s = Stream::new(cfg.seed).child("phi_policy_random");
            let scale = 1.0 / (cfg.model.d as f64).sqrt();
            Ok(Mat::from_fn(cfg.model.d, gt.vocab(), |_, _| scale * s.next_gaussian()))
        }
    }
}

/// The trained reference model for `train`/`fit-logz`: per-context optimal
/// features over the configured Phi (xent), or the gradient-trained Quad
/// model.
pub fn train_reference_model(cfg: &ExperimentConfig, gt: &GroundTruth) -> Result<SoftmaxModel> {
    let phi = build_phi(cfg, gt)?;
    match cfg.model.objective {
        Objective::Xent => {
            let opt = optimal_xent_phi(gt, &phi, 1e-10)?;
            SoftmaxModel::new(phi, opt.theta_star)
        }
        Objective::Quad => {
            let opts = QuadTrainOpts {
                max_iters: cfg.model.max_iters,
                seed: cfg.seed,
                lr: cfg.model.lr.unwrap_or_default(),
                ..QuadTrainOpts::default()
            };
            let trained = train_quad(gt, cfg.model.d, &opts)?;
            SoftmaxModel::new(trained.phi, trained.theta)
        }
    }
}

/// Everything a `bound` run produces.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub world: WorldDoc,
    pub model: ModelDoc,
    pub cert_plain: NaturalCertificate,
    pub cert_subspace: Option<NaturalCertificate>,
    pub reports: Vec<BoundReport>,
    pub all_hold: bool,
    pub any_solver_flag: bool,
}

fn interpolation_grid(points: usize) -> Vec<f64> {
    (0..points).map(|i| i as f64 / (points - 1).max(1) as f64).collect()
}

/// Random stochastic columns for the unconstrained interpolation endpoint.
fn random_table(gt: &GroundTruth, seed: u64) -> Mat {
    let mut s = Stream::new(seed).child("table_rand");
    let mut q = Mat::zeros(gt.vocab(), gt.contexts());
    for j in 0..gt.contexts() {
        q.set_col(j, &s.next_dirichlet(1.0, gt.vocab()));
    }
    q
}

fn table_at(gt: &GroundTruth, q: &Mat, t: f64) -> Result<TableModel> {
    let mut p = gt.pstar().scale(1.0 - t);
    p.axpy(t, q);
    TableModel::new(p)
}

/// Run the bound pipeline: build the world and task, certify, construct one
/// model per sweep point for each requested theorem family, and emit every
/// (point, family, gamma-mode) bound report. Points evaluate in a rayon
/// pool but every quantity derives from labeled seed streams, so the output
/// is identical for any --jobs value.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<RunArtifacts> {
    let (gt, task, _witness) = build_world_and_task(cfg)?;
    let phi = build_phi(cfg, &gt)?;
    let opt_phi = optimal_xent_phi(&gt, &phi, 1e-10)?;
    let lstar = optimal_xent(&gt);
    let reference = SoftmaxModel::new(phi.clone(), opt_phi.theta_star.clone())?;

    let want_unconstrained = cfg.theorems.iter().any(|t| t == "T4.1");
    let want_softmax = cfg.theorems.iter().any(|t| t == "T4.2");

    let cert_plain = natural_certificate(&gt, &task, cfg.task.b, None, &FitOpts::default())?;
    let cert_subspace = if want_softmax {
        Some(natural_certificate(&gt, &task, cfg.task.b, Some(&phi), &FitOpts::default())?)
    } else {
        None
    };

    // interpolation endpoints
    let q_table = random_table(&gt, cfg.seed);
    let theta_rand = {
        let mut s = Stream::new(cfg.seed).child("theta_rand");
        let mut m = opt_phi.theta_star.clone();
        for i in 0..m.rows() {
            for x in m.row_mut(i) {
                *x += 2.0 * s.next_gaussian();
            }
        }
        m
    };

    let grid: Vec<(usize, f64)> = match &cfg.sweep.eps_targets {
        Some(targets) => targets.iter().cloned().enumerate().collect(),
        None => interpolation_grid(cfg.sweep.points).into_iter().enumerate().collect(),
    };
    let by_target = cfg.sweep.eps_targets.is_some();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("rayon pool");

    let reports: Result<Vec<Vec<BoundReport>>> = pool.install(|| {
        grid.par_iter()
            .map(|&(_idx, knob)| {
                let mut point_reports = Vec::new();
                if want_unconstrained {
                    let model = if by_target {
                        // bisect the table interpolation to the eps target
                        let mut lo = 0.0f64;
                        let mut hi = 1.0f64;
                        let mut tm = table_at(&gt, &q_table, hi)?;
                        let e_hi = xent_loss(&gt, ModelRef::Table(&tm)) - lstar;
                        if knob > 0.0 && e_hi > knob {
                            for _ in 0..200 {
                                let mid = 0.5 * (lo + hi);
                                let cand = table_at(&gt, &q_table, mid)?;
                                let e = xent_loss(&gt, ModelRef::Table(&cand)) - lstar;
                                tm = cand;
                                if (e - knob).abs() <= 0.01 * knob.max(1e-12) {
                                    break;
                                }
                                if e < knob {
                                    lo = mid;
                                } else {
                                    hi = mid;
                                }
                            }
                        } else if knob == 0.0 {
                            tm = table_at(&gt, &q_table, 0.0)?;
                        }
                        tm
                    } else {
                        table_at(&gt, &q_table, knob)?
                    };
                    for mode in [GammaMode::Plain, GammaMode::Refined] {
                        point_reports.push(theorem_bound_report(
                            &gt,
                            &task,
                            ModelRef::Table(&model),
                            &cert_plain,
                            TheoremFamily::Unconstrained,
                            mode,
                            &BoundOptions { baseline: Some(lstar), ..BoundOptions::default() },
                        )?);
                    }
                }
                if want_softmax {
                    let cert = cert_subspace.as_ref().expect("subspace certificate");
                    let model = if by_target {
                        epsilon_model(&gt, &phi, &opt_phi.theta_star, &theta_rand, knob)?.model
                    } else {
                        let mut theta = opt_phi.theta_star.scale(1.0 - knob);
                        theta.axpy(knob, &theta_rand);
                        SoftmaxModel::new(phi.clone(), theta)?
                    };
                    for mode in [GammaMode::Plain, GammaMode::Refined] {
                        point_reports.push(theorem_bound_report(
                            &gt,
                            &task,
                            ModelRef::Softmax(&model),
                            cert,
                            TheoremFamily::Softmax,
                            mode,
                            &BoundOptions { baseline: Some(opt_phi.value), ..BoundOptions::default() },
                        )?);
                    }
                }
                Ok(point_reports)
            })
            .collect()
    });
    let reports: Vec<BoundReport> = reports?.into_iter().flatten().collect();

    let all_hold = reports.iter().all(|r| r.holds);
    let any_solver_flag = reports.iter().any(|r| r.fit_stalled) || !opt_phi.converged;
    Ok(RunArtifacts {
        world: WorldDoc::new(&gt, Some(&task)),
        model: ModelDoc::new(&reference),
        cert_plain,
        cert_subspace,
        reports,
        all_hold,
        any_solver_flag,
    })
}

/// Epsilon sweep for the square-root trend: x is the model cross-entropy,
/// y the fitted logistic loss of conditional mean features on the task.
pub fn sweep_points(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<SweepRow>> {
    let (gt, task, _witness) = build_world_and_task(cfg)?;
    let phi = build_phi(cfg, &gt)?;
    let opt_phi = optimal_xent_phi(&gt, &phi, 1e-10)?;
    let theta_rand = {
        let mut s = Stream::new(cfg.seed).child("theta_rand");
        let mut m = opt_phi.theta_star.clone();
        for i in 0..m.rows() {
            for x in m.row_mut(i) {
                *x += 2.0 * s.next_gaussian();
            }
        }
        m
    };

    let grid: Vec<f64> = match &cfg.sweep.eps_targets {
        Some(targets) => targets.clone(),
        None => interpolation_grid(cfg.sweep.points),
    };
    let by_target = cfg.sweep.eps_targets.is_some();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("rayon pool");

    pool.install(|| {
        grid.par_iter()
            .map(|&knob| {
                let (model, t_used) = if by_target {
                    let em = epsilon_model(&gt, &phi, &opt_phi.theta_star, &theta_rand, knob)?;
                    (em.model, em.t)
                } else {
                    let mut theta = opt_phi.theta_star.scale(1.0 - knob);
                    theta.axpy(knob, &theta_rand);
                    (SoftmaxModel::new(phi.clone(), theta)?, knob)
                };
                let xent = xent_loss(&gt, ModelRef::Softmax(&model));
                let feats = FeatureTable::from_mat(conditional_mean(&model.phi, &model.theta));
                let fit = fit_linear(
                    &feats,
                    &task,
                    LossKind::Logistic,
                    &FitConstraints::default(),
                    &FitOpts::default(),
                )?;
                Ok(SweepRow { t: t_used, eps: xent - opt_phi.value, xent, downstream_loss: fit.loss })
            })
            .collect()
    })
}

/// The sweep plus its square-root trend fit in one call.
pub fn sweep_and_fit_sqrt(cfg: &ExperimentConfig, jobs: usize) -> Result<(Vec<SweepRow>, SqrtFit)> {
    let rows = sweep_points(cfg, jobs)?;
    let xs: Vec<f64> = rows.iter().map(|r| r.xent).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.downstream_loss).collect();
    let fit = fit_sqrt_trend(&xs, &ys)?;
    Ok((rows, fit))
}

/// Grid-search fit of y ~ a sqrt(x - b) + c: 100 evenly spaced offsets b in
/// [min(x) - range, min(x)], linear regression on sqrt(x - b) for each, and
/// the candidate with the best r wins.
pub fn fit_sqrt_trend(xs: &[f64], ys: &[f64]) -> Result<SqrtFit> {
    assert_eq!(xs.len(), ys.len());
    if xs.len() < 5 {
        return Err(Error::DegenerateSweep);
    }
    let xmin = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let xmax = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = xmax - xmin;
    if !(range > 0.0) {
        return Err(Error::DegenerateSweep);
    }
    let n = xs.len() as f64;
    let mut best: Option<SqrtFit> = None;
    for j in 0..100 {
        let b = xmin - range + range * j as f64 / 99.0;
        let us: Vec<f64> = xs.iter().map(|&x| (x - b).max(0.0).sqrt()).collect();
        let um = us.iter().sum::<f64>() / n;
        let ym = ys.iter().sum::<f64>() / n;
        let mut suu = 0.0;
        let mut suy = 0.0;
        let mut syy = 0.0;
        for (u, y) in us.iter().zip(ys) {
            suu += (u - um) * (u - um);
            suy += (u - um) * (y - ym);
            syy += (y - ym) * (y - ym);
        }
        if suu <= 0.0 || syy <= 0.0 {
            continue;
        }
        let r = suy / (suu.sqrt() * syy.sqrt());
        let a = suy / suu;
        let c = ym - a * um;
        if best.as_ref().is_none_or(|f| r > f.r_value) {
            best = Some(SqrtFit { a, b, c, r_value: r });
        }
    }
    best.ok_or(Error::DegenerateSweep)
}

#[derive(Clone, Debug, Serialize)]
pub struct QuadVerifyReport {
    pub closed_form_value: f64,
    pub trained_loss: f64,
    pub loss_gap: f64,
    pub max_principal_angle: f64,
    pub degenerate_gap: bool,
    pub ok: bool,
}

/// Train Quad by gradient descent and compare against the closed form.
pub fn quad_verify(cfg: &ExperimentConfig) -> Result<QuadVerifyReport> {
    let gt = make_ground_truth(&cfg.world, cfg.seed)?;
    let closed = quad_closed_form(&gt, cfg.model.d)?;
    let opts = QuadTrainOpts {
        max_iters: cfg.model.max_iters,
        seed: cfg.seed,
        lr: cfg.model.lr.unwrap_or_default(),
        ..QuadTrainOpts::default()
    };
    let trained = train_quad(&gt, cfg.model.d, &opts)?;
    let angles = principal_angles(&trained.phi, &closed.phi_star)?;
    let max_angle = angles.iter().cloned().fold(0.0f64, f64::max);
    let gap = (trained.final_loss - closed.value).abs();
    Ok(QuadVerifyReport {
        closed_form_value: closed.value,
        trained_loss: trained.final_loss,
        loss_gap: gap,
        max_principal_angle: max_angle,
        degenerate_gap: closed.degenerate_gap,
        ok: gap <= 1e-6 && max_angle <= 1e-3,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct QuadFitDoc {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: f64,
    pub regression_mse: f64,
    pub residual_ratio: f64,
}

/// Fit the log-partition quadratic on trained-model features plus Gaussian
/// jitter (512 samples by default).
pub fn fit_logz(cfg: &ExperimentConfig) -> Result<QuadFitDoc> {
    let gt = make_ground_truth(&cfg.world, cfg.seed)?;
    let model = train_reference_model(cfg, &gt)?;
    let n_samples = 512usize;
    let d = model.d();
    let mut s = Stream::new(cfg.seed).child("logz_samples");
    let mut thetas = Mat::zeros(d, n_samples);
    for j in 0..n_samples {
        let base = model.theta.col(j % model.contexts());
        let jittered: Vec<f64> = base.iter().map(|&x| x + 0.2 * s.next_gaussian()).collect();
        thetas.set_col(j, &jittered);
    }
    let fit = crate::partition::fit_log_partition(
        &thetas,
        &model.phi,
        crate::partition::FitWeights::default(),
        &crate::partition::PartitionFitOpts::default(),
    )?;
    let uniform = vec![1.0 / n_samples as f64; n_samples];
    let ratio = crate::partition::residual_ratio(&model.phi, &thetas, &fit, &uniform)?;
    Ok(QuadFitDoc {
        a: fit.a.mat().to_rows(),
        b: fit.b.clone(),
        c: fit.c,
        regression_mse: fit.regression_mse,
        residual_ratio: ratio,
    })
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(dir.join(name), text + "\n")?;
    Ok(())
}

fn write_csv(dir: &Path, name: &str, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        out.push_str(&row);
        out.push('\n');
    }
    std::fs::write(dir.join(name), out)?;
    Ok(())
}

pub fn write_world(dir: &Path, doc: &WorldDoc) -> Result<()> {
    write_json(dir, "world.json", doc)
}

pub fn write_model(dir: &Path, doc: &ModelDoc) -> Result<()> {
    write_json(dir, "model.json", doc)
}

pub fn write_certificate(dir: &Path, doc: &CertificateDoc) -> Result<()> {
    write_json(dir, "certificate.json", doc)
}

/// Write the full bound bundle: world/model/certificate JSON plus the bound
/// reports as both JSON and CSV (identical values; the CSV is plot-ready).
pub fn write_run(dir: &Path, run: &RunArtifacts) -> Result<()> {
    write_world(dir, &run.world)?;
    write_model(dir, &run.model)?;
    let cert = run.cert_subspace.as_ref().unwrap_or(&run.cert_plain);
    write_certificate(dir, &CertificateDoc::new(cert))?;
    write_json(dir, "bounds.json", &run.reports)?;
    write_csv(dir, "bounds.csv", BoundReport::csv_header(), run.reports.iter().map(|r| r.csv_row()))?;
    Ok(())
}

pub fn write_sweep(dir: &Path, rows: &[SweepRow], fit: &SqrtFit) -> Result<()> {
    write_json(dir, "sweep.json", &rows.to_vec())?;
    write_csv(dir, "sweep.csv", SweepRow::csv_header(), rows.iter().map(|r| r.csv_row()))?;
    write_json(dir, "sqrtfit.json", fit)?;
    Ok(())
}
