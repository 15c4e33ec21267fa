//! The audio-visual student encoder.
//!
//! Dense `tanh` frontends per modality, span masking with learned mask
//! embeddings, modality dropout, channel concatenation, a pre-norm
//! transformer stack, and one projection-head set per teacher. Every
//! parameter has a hand-derived gradient.

mod checkpoint;
mod corrupt;
mod encoder;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Classifier};
pub use corrupt::{apply_mask, draw_modality, modality_dropout, sample_mask, Modality};
pub use encoder::{ForwardPass, StudentInput, StudentModel};
pub use params::{Block, Head, StudentParams};

/// Shape of one teacher's projection heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub teacher_dim: usize,
    pub frame_rate_ratio: usize,
    pub num_clusters: usize,
    pub label_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub audio_dim: usize,
    pub video_dim: usize,
    pub frontend_dim: usize,
    pub encoder_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub mask_prob_audio: f64,
    pub mask_prob_video: f64,
    pub mask_span_audio: usize,
    pub mask_span_video: usize,
    /// Probability of keeping both modalities.
    pub p_keep_both: f64,
    /// Probability of keeping audio when only one modality is kept.
    pub p_audio: f64,
    pub positional_encoding: bool,
    pub heads: Vec<HeadSpec>,
    pub seed: u64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            audio_dim: 16,
            video_dim: 16,
            frontend_dim: 16,
            encoder_dim: 32,
            num_blocks: 2,
            num_heads: 4,
            ff_dim: 64,
            mask_prob_audio: 0.8,
            mask_prob_video: 0.3,
            mask_span_audio: 3,
            mask_span_video: 3,
            p_keep_both: 0.5,
            p_audio: 0.5,
            positional_encoding: true,
            heads: Vec::new(),
            seed: 0,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.audio_dim,
            self.video_dim,
            self.frontend_dim,
            self.encoder_dim,
            self.num_heads,
            self.ff_dim,
            self.mask_span_audio,
            self.mask_span_video,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig("student dimensions must be >= 1".into()));
        }
        if !self.encoder_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "encoder_dim {} not divisible by num_heads {}",
                self.encoder_dim, self.num_heads
            )));
        }
        for (name, p) in [
            ("mask_prob_audio", self.mask_prob_audio),
            ("mask_prob_video", self.mask_prob_video),
            ("p_keep_both", self.p_keep_both),
            ("p_audio", self.p_audio),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} = {p} outside [0, 1]")));
            }
        }
        for h in &self.heads {
            if [h.teacher_dim, h.frame_rate_ratio, h.num_clusters, h.label_dim].contains(&0) {
                return Err(Error::InvalidConfig("head dimensions must be >= 1".into()));
            }
        }
        Ok(())
    }
}
