use std::collections::HashMap;

use crate::codebook::{hard_label, soft_label, Codebook};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::teacher::{align_frames, TeacherBank, TeacherConfig};

/// Per-utterance training targets derived from one teacher.
#[derive(Debug, Clone)]
pub struct Targets {
    /// `[T x r*D_h]`: teacher frames grouped per student frame.
    pub aligned: Tensor,
    /// `[T*r x N]` soft labels, row `t * r + s`.
    pub soft: Tensor,
    /// `T*r` nearest-centroid labels.
    pub hard: Vec<usize>,
}

/// A teacher bank joined with its codebook, labels precomputed at one `tau'`.
#[derive(Debug, Clone)]
pub struct PreparedTeacher {
    pub config: TeacherConfig,
    pub codebook: Codebook,
    targets: HashMap<String, Targets>,
}

impl PreparedTeacher {
    /// `student_frames` maps utterance id to the student frame count `T`.
    pub fn new<'a>(
        bank: &TeacherBank,
        codebook: &Codebook,
        tau_prime: f64,
        student_frames: impl IntoIterator<Item = (&'a str, usize)>,
    ) -> Result<Self> {
        let cfg = &bank.config;
        if codebook.dim() != cfg.hidden_dim {
            return Err(Error::shape("PreparedTeacher(codebook dim)", cfg.hidden_dim, codebook.dim()));
        }
        let r = cfg.frame_rate_ratio;
        let mut targets = HashMap::new();
        for (id, t) in student_frames {
            let rep = bank
                .get(id)
                .ok_or_else(|| Error::InvalidConfig(format!("teacher {} has no entry for {id}", cfg.name)))?;
            let aligned = align_frames(rep, t, r)?;
            let n = codebook.num_clusters();
            let mut soft = Tensor::zeros(&[t * r, n]);
            let mut hard = Vec::with_capacity(t * r);
            for f in 0..t * r {
                let h = rep.row(f);
                soft.row_mut(f).copy_from_slice(&soft_label(h, codebook, tau_prime)?);
                hard.push(hard_label(h, codebook));
            }
            targets.insert(id.to_string(), Targets { aligned, soft, hard });
        }
        Ok(Self {
            config: cfg.clone(),
            codebook: codebook.clone(),
            targets,
        })
    }

    pub fn targets(&self, id: &str) -> Result<&Targets> {
        self.targets
            .get(id)
            .ok_or_else(|| Error::InvalidConfig(format!("teacher {} has no targets for {id}", self.config.name)))
    }
}
