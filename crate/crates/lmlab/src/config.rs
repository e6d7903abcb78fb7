//! Experiment configuration: a single JSON document, validated with field
//! paths so a bad config points at the offending key.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::softmax::LrSchedule;
use crate::world::{TaskSpec, WorldConfig, WorldStructure};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Xent,
    Quad,
}

/// How the word-embedding matrix is chosen before training features.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum PhiPolicy {
    /// Top-d eigenvectors of the world's substitutability matrix. For
    /// topic worlds with rank <= d this spans the conditional columns, so
    /// word-pair tasks stay solvable through the embedding.
    OmegaTop,
    /// Gaussian entries scaled by 1/sqrt(d).
    Random,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelSection {
    pub d: usize,
    #[serde(default = "default_objective")]
    pub objective: Objective,
    #[serde(default = "default_phi_policy")]
    pub phi_policy: PhiPolicy,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub lr: Option<LrSchedule>,
}

fn default_objective() -> Objective {
    Objective::Xent
}

fn default_phi_policy() -> PhiPolicy {
    PhiPolicy::OmegaTop
}

fn default_max_iters() -> usize {
    2000
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TaskSection {
    pub word_plus: usize,
    pub word_minus: usize,
    pub b: f64,
    pub margin: f64,
    #[serde(default)]
    pub context_subset: Option<Vec<usize>>,
    /// Label-flip probability; nonzero values keep the downstream loss off
    /// its floor so epsilon sweeps carry signal.
    #[serde(default)]
    pub flip_eta: f64,
}

impl TaskSection {
    pub fn to_spec(&self) -> TaskSpec {
        TaskSpec {
            word_plus: self.word_plus,
            word_minus: self.word_minus,
            b: self.b,
            margin: self.margin,
            context_subset: self.context_subset.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SweepSection {
    #[serde(default = "default_points")]
    pub points: usize,
    /// Explicit suboptimality targets; an even interpolation grid when
    /// absent.
    #[serde(default)]
    pub eps_targets: Option<Vec<f64>>,
}

fn default_points() -> usize {
    10
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { points: default_points(), eps_targets: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub model: ModelSection,
    pub task: TaskSection,
    #[serde(default = "default_theorems")]
    pub theorems: Vec<String>,
    #[serde(default)]
    pub sweep: SweepSection,
    pub seed: u64,
}

fn default_theorems() -> Vec<String> {
    vec!["T4.1".to_string(), "T4.2".to_string()]
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, msg: String| Err(Error::Config { path: path.into(), msg });
        if self.world.v < 2 {
            return fail("world.v", "need at least 2 words".into());
        }
        if self.world.s < 1 {
            return fail("world.s", "need at least 1 context".into());
        }
        if !(self.world.concentration > 0.0) {
            return fail("world.concentration", "must be positive".into());
        }
        match &self.world.structure {
            WorldStructure::TopicMixture { rank } => {
                if *rank == 0 || *rank > self.world.v.min(self.world.s) {
                    return fail("world.structure.rank", format!("rank {rank} must be in 1..=min(V,S)"));
                }
            }
            WorldStructure::Explicit { pstar, p_l } => {
                if pstar.len() != self.world.v {
                    return fail("world.structure.pstar", "row count must equal world.v".into());
                }
                if pstar.iter().any(|r| r.len() != self.world.s) {
                    return fail("world.structure.pstar", "every row must have world.s entries".into());
                }
                if p_l.len() != self.world.s {
                    return fail("world.structure.p_l", "length must equal world.s".into());
                }
            }
            WorldStructure::Dense => {}
        }
        if self.model.d == 0 || self.model.d > self.world.v {
            return fail("model.d", format!("d={} must be in 1..=V", self.model.d));
        }
        if self.task.word_plus >= self.world.v {
            return fail("task.word_plus", format!("word index {} >= V={}", self.task.word_plus, self.world.v));
        }
        if self.task.word_minus >= self.world.v {
            return fail("task.word_minus", format!("word index {} >= V={}", self.task.word_minus, self.world.v));
        }
        if self.task.word_plus == self.task.word_minus {
            return fail("task.word_minus", "word_plus and word_minus must differ".into());
        }
        if !(self.task.b >= 0.0) {
            return fail("task.b", "B must be nonnegative".into());
        }
        if !(self.task.margin > 0.0) {
            return fail("task.margin", "margin must be positive".into());
        }
        if let Some(subset) = &self.task.context_subset {
            if subset.iter().any(|&s| s >= self.world.s) {
                return fail("task.context_subset", "context index out of range".into());
            }
        }
        if !(0.0..=0.5).contains(&self.task.flip_eta) {
            return fail("task.flip_eta", "flip probability must be in [0, 0.5]".into());
        }
        for t in &self.theorems {
            if t != "T4.1" && t != "T4.2" {
                return fail("theorems", format!("unknown theorem id {t:?} (expected T4.1 or T4.2)"));
            }
        }
        if self.sweep.points < 2 {
            return fail("sweep.points", "need at least 2 sweep points".into());
        }
        if let Some(targets) = &self.sweep.eps_targets {
            if targets.iter().any(|&e| e < 0.0 || !e.is_finite()) {
                return fail("sweep.eps_targets", "targets must be finite and nonnegative".into());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_json() -> serde_json::Value {
        serde_json::json!({
            "world": {"v": 12, "s": 20, "structure": {"kind": "topic_mixture", "rank": 3}, "concentration": 1.0},
            "model": {"d": 3, "objective": "xent", "phi_policy": "omega_top"},
            "task": {"word_plus": 0, "word_minus": 1, "b": 6.0, "margin": 0.01, "flip_eta": 0.1},
            "seed": 42
        })
    }

    #[test]
    fn parses_and_validates() {
        let cfg = ExperimentConfig::from_json(&base_json().to_string()).unwrap();
        assert_eq!(cfg.model.d, 3);
        assert_eq!(cfg.sweep.points, 10);
        assert_eq!(cfg.theorems, vec!["T4.1", "T4.2"]);
    }

    #[test]
    fn bad_word_index_names_the_field() {
        let mut j = base_json();
        j["task"]["word_plus"] = serde_json::json!(99);
        let err = ExperimentConfig::from_json(&j.to_string()).unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "task.word_plus"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn bad_rank_names_the_field() {
        let mut j = base_json();
        j["world"]["structure"]["rank"] = serde_json::json!(40);
        let err = ExperimentConfig::from_json(&j.to_string()).unwrap_err();
        match err {
            Error::Config { path, .. } => assert_eq!(path, "world.structure.rank"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn d_larger_than_v_rejected() {
        let mut j = base_json();
        j["model"]["d"] = serde_json::json!(40);
        assert!(ExperimentConfig::from_json(&j.to_string()).is_err());
    }
}
