//! Run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::TrainConfig;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::student::{HeadSpec, StudentConfig};
use crate::synthdata::SynthCorpusConfig;
use crate::teacher::TeacherConfig;

pub const RUN_CONFIG_FILE: &str = "run_config.json";

/// One teacher plus the codebook and label-head sizes used to distill it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    #[serde(flatten)]
    pub teacher: TeacherConfig,
    pub num_clusters: usize,
    /// Width of the codeword embeddings in the student's label head.
    pub label_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmeansConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-10,
            restarts: crate::codebook::DEFAULT_RESTARTS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: SynthCorpusConfig,
    /// Labeled utterances used for finetuning, taken from the start of the corpus.
    pub finetune_utterances: usize,
    /// Held-out utterances (same prototypes, disjoint indices) for evaluation.
    pub eval_utterances: usize,
    pub teachers: Vec<TeacherSpec>,
    pub kmeans: KmeansConfig,
    /// `heads` is filled from `teachers`; anything given here is replaced.
    pub student: StudentConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
    pub probe_layers: Vec<usize>,
    /// Noise levels evaluated in addition to clean audio.
    pub eval_snr_db: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = |teacher: TeacherConfig| TeacherSpec {
            teacher,
            num_clusters: 20,
            label_dim: 8,
        };
        Self {
            corpus: SynthCorpusConfig::default(),
            finetune_utterances: 20,
            eval_utterances: 50,
            teachers: vec![spec(TeacherConfig::default_deep()), spec(TeacherConfig::default_shallow())],
            kmeans: KmeansConfig::default(),
            student: StudentConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig {
                steps: 300,
                ..TrainConfig::default()
            },
            checkpoint_every: 0,
            probe_layers: vec![0, 1, 2],
            eval_snr_db: vec![10.0, 5.0, 0.0, -5.0, -10.0],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes this config into `dir` as [`RUN_CONFIG_FILE`].
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(RUN_CONFIG_FILE);
        std::fs::write(&p, self.to_json()?).map_err(|e| Error::io(&p, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        if self.teachers.is_empty() {
            return Err(Error::InvalidConfig("at least one teacher is required".into()));
        }
        let mut names: Vec<&str> = self.teachers.iter().map(|t| t.teacher.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("teacher names must be unique".into()));
        }
        for t in &self.teachers {
            t.teacher.validate()?;
            if t.num_clusters == 0 || t.label_dim == 0 {
                return Err(Error::InvalidConfig(format!(
                    "teacher {}: num_clusters and label_dim must be >= 1",
                    t.teacher.name
                )));
            }
        }
        if self.finetune_utterances > self.corpus.num_utterances {
            return Err(Error::InvalidConfig(format!(
                "finetune_utterances {} exceeds corpus size {}",
                self.finetune_utterances, self.corpus.num_utterances
            )));
        }
        self.student_config().validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        Ok(())
    }

    /// Reseeds every random component from one seed. Teacher seeds are part of
    /// each teacher's identity and stay as configured.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.kmeans.seed = derive_seed(seed, 1);
        self.student.seed = derive_seed(seed, 2);
        self.pretrain.seed = derive_seed(seed, 3);
        self.finetune.seed = derive_seed(seed, 4);
        self
    }

    pub fn student_config(&self) -> StudentConfig {
        StudentConfig {
            audio_dim: self.corpus.audio_dim,
            video_dim: self.corpus.video_dim,
            heads: self
                .teachers
                .iter()
                .map(|t| HeadSpec {
                    teacher_dim: t.teacher.hidden_dim,
                    frame_rate_ratio: t.teacher.frame_rate_ratio,
                    num_clusters: t.num_clusters,
                    label_dim: t.label_dim,
                })
                .collect(),
            ..self.student.clone()
        }
    }

    pub fn eval_corpus_config(&self) -> SynthCorpusConfig {
        self.corpus.split(self.corpus.num_utterances as u64, self.eval_utterances)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn heads_follow_teachers() {
        let s = RunConfig::default().student_config();
        assert_eq!(s.heads.len(), 2);
        assert_eq!(s.heads[0].frame_rate_ratio, 2);
        assert_eq!(s.heads[1].teacher_dim, 12);
    }

    #[test]
    fn duplicate_teacher_names_rejected() {
        let mut cfg = RunConfig::default();
        cfg.teachers[1].teacher.name = cfg.teachers[0].teacher.name.clone();
        assert!(cfg.validate().is_err());
    }
}
