//! Synthetic ground-truth language worlds and (tau, B)-natural
//! classification tasks with verifiable certificates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kahan::ksum;
use crate::mat::{norm2, norm_inf, Mat};
use crate::rng::Stream;

const STOCHASTIC_TOL: f64 = 1e-12;

fn check_stochastic(p: &[f64], what: &'static str) -> Result<()> {
    if p.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    if p.iter().any(|&x| x < 0.0) {
        return Err(Error::NotStochastic(what));
    }
    let s = ksum(p.iter().cloned());
    if (s - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::NotStochastic(what));
    }
    Ok(())
}

/// The full language-model world: context distribution `p_l` and the V x S
/// matrix of true conditionals (column s is the next-word distribution
/// following context s).
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    v: usize,
    s: usize,
    p_l: Vec<f64>,
    pstar: Mat,
}

impl GroundTruth {
    pub fn new(pstar: Mat, p_l: Vec<f64>) -> Result<Self> {
        let v = pstar.rows();
        let s = pstar.cols();
        if v < 2 || s < 1 {
            return Err(Error::DimMismatch(format!("need V >= 2, S >= 1, got V={v} S={s}")));
        }
        if p_l.len() != s {
            return Err(Error::DimMismatch(format!("p_L length {} != S {s}", p_l.len())));
        }
        check_stochastic(&p_l, "p_L")?;
        for j in 0..s {
            check_stochastic(&pstar.col(j), "Pstar column")?;
        }
        Ok(GroundTruth { v, s, p_l, pstar })
    }

    pub fn vocab(&self) -> usize {
        self.v
    }

    pub fn contexts(&self) -> usize {
        self.s
    }

    pub fn p_l(&self) -> &[f64] {
        &self.p_l
    }

    /// True conditional vector p*(.|s).
    pub fn cond(&self, s: usize) -> Vec<f64> {
        self.pstar.col(s)
    }

    pub fn pstar(&self) -> &Mat {
        &self.pstar
    }
}

/// How to synthesize the conditional table.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorldStructure {
    /// Independent Dirichlet columns.
    Dense,
    /// Columns are convex combinations of `rank` fixed topic distributions,
    /// so the world's substitutability matrix has rank at most `rank`.
    TopicMixture { rank: usize },
    /// Caller-provided table (rows of Pstar, i.e. V vectors of length S).
    Explicit { pstar: Vec<Vec<f64>>, p_l: Vec<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WorldConfig {
    pub v: usize,
    pub s: usize,
    pub structure: WorldStructure,
    #[serde(default = "default_concentration")]
    pub concentration: f64,
}

fn default_concentration() -> f64 {
    1.0
}

/// Deterministic world synthesis: identical (cfg, seed) gives a bitwise
/// identical world.
pub fn make_ground_truth(cfg: &WorldConfig, seed: u64) -> Result<GroundTruth> {
    let root = Stream::new(seed).child("world");
    match &cfg.structure {
        WorldStructure::Explicit { pstar, p_l } => {
            if pstar.len() != cfg.v {
                return Err(Error::DimMismatch(format!(
                    "explicit Pstar has {} rows, config says V={}",
                    pstar.len(),
                    cfg.v
                )));
            }
            let m = Mat::from_rows(pstar);
            if m.cols() != cfg.s {
                return Err(Error::DimMismatch(format!(
                    "explicit Pstar has {} columns, config says S={}",
                    m.cols(),
                    cfg.s
                )));
            }
            GroundTruth::new(m, p_l.clone())
        }
        WorldStructure::Dense => {
            let mut pstar = Mat::zeros(cfg.v, cfg.s);
            let mut cols = root.child("conditionals");
            for j in 0..cfg.s {
                pstar.set_col(j, &cols.next_dirichlet(cfg.concentration, cfg.v));
            }
            let p_l = root.child("p_l").next_dirichlet(cfg.concentration, cfg.s);
            GroundTruth::new(pstar, p_l)
        }
        WorldStructure::TopicMixture { rank } => {
            let r = *rank;
            if r == 0 || r > cfg.v.min(cfg.s) {
                return Err(Error::Config {
                    path: "world.structure.rank".into(),
                    msg: format!("rank {r} must be in 1..=min(V,S)"),
                });
            }
            let mut topics_stream = root.child("topics");
            let topics: Vec<Vec<f64>> =
                (0..r).map(|_| topics_stream.next_dirichlet(cfg.concentration, cfg.v)).collect();
            let mut weights = root.child("weights");
            let mut pstar = Mat::zeros(cfg.v, cfg.s);
            for j in 0..cfg.s {
                let w = weights.next_dirichlet(cfg.concentration, r);
                let mut col = vec![0.0; cfg.v];
                for (t, &wt) in topics.iter().zip(&w) {
                    crate::mat::axpy(&mut col, wt, t);
                }
                // renormalize away round-off so the column is stochastic
                let s: f64 = ksum(col.iter().cloned());
                for x in &mut col {
                    *x /= s;
                }
                pstar.set_col(j, &col);
            }
            let p_l = root.child("p_l").next_dirichlet(cfg.concentration, cfg.s);
            GroundTruth::new(pstar, p_l)
        }
    }
}

/// A labeled context distribution. Labels are deterministic per context; an
/// optional conditional table `pos_prob` (probability of label +1 given s)
/// reintroduces label noise for Bayes-error analysis.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub p_t: Vec<f64>,
    pub labels: Vec<i8>,
    pub pos_prob: Option<Vec<f64>>,
}

impl Task {
    pub fn new(p_t: Vec<f64>, labels: Vec<i8>) -> Result<Self> {
        check_stochastic(&p_t, "p_T")?;
        if labels.len() != p_t.len() {
            return Err(Error::DimMismatch("labels length != p_T length".into()));
        }
        if labels.iter().any(|&y| y != 1 && y != -1) {
            return Err(Error::DimMismatch("labels must be +1 or -1".into()));
        }
        Ok(Task { p_t, labels, pos_prob: None })
    }

    /// Arbitrary conditional label table; labels become the per-context
    /// majority vote.
    pub fn with_conditional(p_t: Vec<f64>, pos_prob: Vec<f64>) -> Result<Self> {
        check_stochastic(&p_t, "p_T")?;
        if pos_prob.len() != p_t.len() {
            return Err(Error::DimMismatch("pos_prob length != p_T length".into()));
        }
        if pos_prob.iter().any(|&q| !(0.0..=1.0).contains(&q)) {
            return Err(Error::NotStochastic("pos_prob"));
        }
        let labels = pos_prob.iter().map(|&q| if q >= 0.5 { 1 } else { -1 }).collect();
        Ok(Task { p_t, labels, pos_prob: Some(pos_prob) })
    }

    /// Flip each label independently with probability `eta`.
    pub fn with_flip_noise(&self, eta: f64) -> Task {
        assert!((0.0..=0.5).contains(&eta), "flip probability must be in [0, 0.5]");
        let pos = self
            .labels
            .iter()
            .map(|&y| if y > 0 { 1.0 - eta } else { eta })
            .collect();
        Task { p_t: self.p_t.clone(), labels: self.labels.clone(), pos_prob: Some(pos) }
    }

    pub fn len(&self) -> usize {
        self.p_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_t.is_empty()
    }

    /// P(y = +1 | s); 1 or 0 for deterministic labels.
    pub fn prob_pos(&self, s: usize) -> f64 {
        match &self.pos_prob {
            Some(q) => q[s],
            None => {
                if self.labels[s] > 0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Witness that a task is (tau, B)-natural: classifier `v_star` over the
/// true conditionals with inf-norm at most `b`, achieving loss `tau`.
#[derive(Clone, Debug)]
pub struct NaturalCertificate {
    pub v_star: Vec<f64>,
    pub b: f64,
    pub tau: f64,
    pub intercept: f64,
    /// Present when witnessing naturalness w.r.t. an embedding (the witness
    /// lies in the row span of this matrix).
    pub subspace: Option<Mat>,
}

impl NaturalCertificate {
    pub fn check_invariants(&self) -> Result<()> {
        if norm_inf(&self.v_star) > self.b + 1e-12 {
            return Err(Error::DimMismatch("certificate violates inf-norm bound".into()));
        }
        if let Some(phi) = &self.subspace {
            let q = crate::numerics::orthonormal_rows(phi)?;
            let proj = q.t_matvec(&q.matvec(&self.v_star));
            let resid = norm2(&crate::mat::sub(&self.v_star, &proj));
            if resid > 1e-10 * norm2(&self.v_star).max(1e-300) {
                return Err(Error::DimMismatch("certificate witness leaves the subspace".into()));
            }
        }
        Ok(())
    }
}

/// Word-pair task spec: label is the sign of p*(w+|s) - p*(w-|s).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TaskSpec {
    pub word_plus: usize,
    pub word_minus: usize,
    pub b: f64,
    pub margin: f64,
    #[serde(default)]
    pub context_subset: Option<Vec<usize>>,
}

/// Build the word-pair natural task. Contexts whose probability difference
/// is below the margin are dropped from the support of p_T (renormalized);
/// p_T is p_L restricted to the kept contexts. The witness is
/// B (e_{w+} - e_{w-}) and its achieved hinge loss is the certificate tau.
pub fn make_natural_task(gt: &GroundTruth, spec: &TaskSpec) -> Result<(Task, NaturalCertificate)> {
    if spec.word_plus >= gt.vocab() {
        return Err(Error::Config { path: "task.word_plus".into(), msg: "word index out of range".into() });
    }
    if spec.word_minus >= gt.vocab() {
        return Err(Error::Config { path: "task.word_minus".into(), msg: "word index out of range".into() });
    }
    if !(spec.margin > 0.0) {
        return Err(Error::Config { path: "task.margin".into(), msg: "margin must be positive".into() });
    }
    if let Some(idx) = &spec.context_subset {
        if idx.iter().any(|&s| s >= gt.contexts()) {
            return Err(Error::Config {
                path: "task.context_subset".into(),
                msg: "context index out of range".into(),
            });
        }
    }

    let s_count = gt.contexts();
    let in_subset = |s: usize| match &spec.context_subset {
        Some(idx) => idx.contains(&s),
        None => true,
    };

    let mut labels = vec![1i8; s_count];
    let mut p_t = vec![0.0; s_count];
    for s in 0..s_count {
        let diff = gt.pstar()[(spec.word_plus, s)] - gt.pstar()[(spec.word_minus, s)];
        labels[s] = if diff >= 0.0 { 1 } else { -1 };
        if in_subset(s) && diff.abs() >= spec.margin {
            p_t[s] = gt.p_l()[s];
        }
    }
    let mass = ksum(p_t.iter().cloned());
    if mass <= 0.0 {
        return Err(Error::EmptyTask);
    }
    for x in &mut p_t {
        *x /= mass;
    }

    let mut v_star = vec![0.0; gt.vocab()];
    v_star[spec.word_plus] += spec.b;
    v_star[spec.word_minus] -= spec.b;

    let task = Task::new(p_t, labels)?;
    let tau = crate::linear_eval::clf_loss(
        &crate::linear_eval::FeatureTable::from_mat(gt.pstar().clone()),
        &task,
        &v_star,
        0.0,
        crate::linear_eval::LossKind::Hinge,
    );
    let cert = NaturalCertificate { v_star, b: spec.b, tau, intercept: 0.0, subspace: None };
    cert.check_invariants()?;
    Ok((task, cert))
}

/// Plain transferability coefficient: the largest gamma with
/// p_L(s) >= gamma p_T(s) everywhere, i.e. the min of p_L/p_T over supp(p_T).
#[derive(Clone, Copy, Debug)]
pub struct Gamma {
    pub value: f64,
    /// Set when supp(p_T) is not contained in supp(p_L); the coefficient is
    /// then zero and any bound using it is vacuous.
    pub vacuous: bool,
}

pub fn gamma_plain(p_l: &[f64], p_t: &[f64]) -> Gamma {
    assert_eq!(p_l.len(), p_t.len(), "gamma_plain length mismatch");
    let mut value = f64::INFINITY;
    let mut vacuous = false;
    for (&l, &t) in p_l.iter().zip(p_t) {
        if t > 0.0 {
            if l == 0.0 {
                return Gamma { value: 0.0, vacuous: true };
            }
            value = value.min(l / t);
        }
    }
    if !value.is_finite() {
        // empty support; degenerate input
        value = 0.0;
        vacuous = true;
    }
    Gamma { value, vacuous }
}
