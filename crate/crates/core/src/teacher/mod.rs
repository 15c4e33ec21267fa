//! Teacher representations: the oracle encoder, multi-layer aggregation,
//! frame-rate alignment and on-disk representation banks.

mod bank;
mod oracle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{instance_normalize, Tensor};

pub use bank::{build_bank, TeacherBank, BANK_CONFIG_FILE};
pub use oracle::{oracle_forward, OracleTeacher};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub name: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    /// Number of trailing layers averaged into the target.
    pub last_k: usize,
    /// Teacher frames per student frame.
    pub frame_rate_ratio: usize,
    pub seed: u64,
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidConfig(format!("teacher {}: empty dims", self.name)));
        }
        if self.last_k == 0 || self.last_k > self.num_layers {
            return Err(Error::InvalidConfig(format!(
                "teacher {}: last_k {} outside 1..={}",
                self.name, self.last_k, self.num_layers
            )));
        }
        if self.frame_rate_ratio == 0 {
            return Err(Error::InvalidConfig(format!(
                "teacher {}: frame_rate_ratio must be >= 1",
                self.name
            )));
        }
        Ok(())
    }

    /// Deep self-supervised-style teacher: 24 layers, 2x frame rate, average of the last 8.
    pub fn default_deep() -> Self {
        Self {
            name: "deep".into(),
            num_layers: 24,
            hidden_dim: 16,
            last_k: 8,
            frame_rate_ratio: 2,
            seed: 101,
        }
    }

    /// Supervised-style teacher: 16 layers, matching frame rate, last layer only.
    pub fn default_shallow() -> Self {
        Self {
            name: "shallow".into(),
            num_layers: 16,
            hidden_dim: 12,
            last_k: 1,
            frame_rate_ratio: 1,
            seed: 202,
        }
    }
}

/// Mean of the instance-normalized layers.
pub fn aggregate_layers(layers: &[Tensor]) -> Result<Tensor> {
    let first = layers.first().ok_or(Error::Empty("aggregate_layers"))?;
    let mut acc = Tensor::zeros(first.shape());
    for l in layers {
        if l.shape() != first.shape() {
            return Err(Error::shape(
                "aggregate_layers",
                format!("{:?}", first.shape()),
                format!("{:?}", l.shape()),
            ));
        }
        acc.axpy(1.0, &instance_normalize(l))?;
    }
    Ok(acc.scale(1.0 / layers.len() as f64))
}

/// Groups `r` consecutive teacher frames per student frame.
///
/// Trailing teacher frames beyond `r * student_frames` are dropped. Row `t`
/// of the result is the concatenation of teacher frames `r*t .. r*t + r - 1`.
pub fn align_frames(teacher: &Tensor, student_frames: usize, r: usize) -> Result<Tensor> {
    let needed = r * student_frames;
    if teacher.rows() < needed {
        return Err(Error::LengthMismatch {
            teacher_frames: teacher.rows(),
            needed,
        });
    }
    teacher
        .take_rows(needed)
        .reshape(&[student_frames, r * teacher.cols()])
}
