use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::rng;

/// Which input streams reach the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Both,
    AudioOnly,
    VideoOnly,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Both, Modality::AudioOnly, Modality::VideoOnly];

    pub fn keeps_audio(self) -> bool {
        self != Modality::VideoOnly
    }

    pub fn keeps_video(self) -> bool {
        self != Modality::AudioOnly
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Both => "both",
            Modality::AudioOnly => "audio",
            Modality::VideoOnly => "video",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "both" => Ok(Modality::Both),
            "audio" | "audio_only" => Ok(Modality::AudioOnly),
            "video" | "video_only" => Ok(Modality::VideoOnly),
            other => Err(format!("unknown modality {other:?} (both|audio|video)")),
        }
    }
}

/// Span mask over `t` frames covering exactly `round(prob * t)` indices.
///
/// Span starts are drawn uniformly; each span runs `span` frames, clipped at
/// `t`. The last span is cut short once the target count is reached.
/// Returned indices are sorted.
pub fn sample_mask(t: usize, prob: f64, span: usize, seed: u64) -> Vec<usize> {
    let target = ((prob * t as f64).round() as usize).min(t);
    let mut masked = vec![false; t];
    let mut count = 0;
    let mut g = rng::stream(seed, 0);
    while count < target {
        let start = g.random_range(0..t);
        for i in start..(start + span.max(1)).min(t) {
            if count == target {
                break;
            }
            if !masked[i] {
                masked[i] = true;
                count += 1;
            }
        }
    }
    (0..t).filter(|&i| masked[i]).collect()
}

/// Replaces rows listed in `mask` with the embedding `e`.
pub fn apply_mask(features: &Tensor, mask: &[usize], e: &Tensor) -> Tensor {
    let mut out = features.clone();
    for &i in mask {
        out.row_mut(i).copy_from_slice(e.data());
    }
    out
}

pub fn draw_modality<R: Rng + ?Sized>(p_keep_both: f64, p_audio: f64, rng: &mut R) -> Modality {
    if rng.random::<f64>() < p_keep_both {
        Modality::Both
    } else if rng.random::<f64>() < p_audio {
        Modality::AudioOnly
    } else {
        Modality::VideoOnly
    }
}

/// Draws a modality mode and zeroes the omitted stream's features.
pub fn modality_dropout(
    audio: &Tensor,
    video: &Tensor,
    p_keep_both: f64,
    p_audio: f64,
    seed: u64,
) -> (Tensor, Tensor, Modality) {
    let mode = draw_modality(p_keep_both, p_audio, &mut rng::stream(seed, 0));
    let a = if mode.keeps_audio() {
        audio.clone()
    } else {
        Tensor::zeros(audio.shape())
    };
    let v = if mode.keeps_video() {
        video.clone()
    } else {
        Tensor::zeros(video.shape())
    };
    (a, v, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_extremes() {
        assert!(sample_mask(100, 0.0, 10, 1).is_empty());
        assert_eq!(sample_mask(100, 1.0, 10, 1), (0..100).collect::<Vec<_>>());
        assert_eq!(sample_mask(7, 1.0, 3, 4).len(), 7);
    }

    #[test]
    fn mask_size_band() {
        for seed in 0..200 {
            let m = sample_mask(100, 0.8, 10, seed);
            assert!((78..=82).contains(&m.len()));
            assert!(m.iter().all(|&i| i < 100));
            assert!(m.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn mask_is_spanned_and_deterministic() {
        let a = sample_mask(100, 0.3, 5, 77);
        assert_eq!(a, sample_mask(100, 0.3, 5, 77));
        let runs = 1 + a.windows(2).filter(|w| w[1] != w[0] + 1).count();
        assert!(runs <= 6 + 1, "30 frames in spans of 5 -> few runs, got {runs}");
    }

    #[test]
    fn apply_mask_rows() {
        let f = Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let e = Tensor::vector(vec![9., 9.]);
        assert_eq!(apply_mask(&f, &[], &e), f);
        assert!(apply_mask(&f, &[0, 1, 2], &e).data().iter().all(|&v| v == 9.0));
        let one = apply_mask(&f, &[1], &e);
        let changed = (0..3).filter(|&i| one.row(i) != f.row(i)).count();
        assert_eq!(changed, 1);
        assert_eq!(one.row(1), &[9., 9.]);
    }

    #[test]
    fn dropout_extremes() {
        let a = Tensor::filled(&[2, 3], 1.0);
        let v = Tensor::filled(&[2, 3], 2.0);
        for seed in 0..50 {
            let (a2, v2, m) = modality_dropout(&a, &v, 1.0, 0.3, seed);
            assert_eq!((m, &a2, &v2), (Modality::Both, &a, &v));
            let (a3, v3, m) = modality_dropout(&a, &v, 0.0, 1.0, seed);
            assert_eq!(m, Modality::AudioOnly);
            assert_eq!(a3, a);
            assert_eq!(v3.sum(), 0.0);
        }
    }

    #[test]
    fn modality_parse_round_trip() {
        for m in Modality::ALL {
            assert_eq!(m.tag().parse::<Modality>().unwrap(), m);
        }
        assert!("stereo".parse::<Modality>().is_err());
    }
}
