use rand::Rng;

use crate::error::Result;
use crate::numerics::Tensor;

use super::{HeadSpec, StudentConfig};

/// One pre-norm transformer block. Linear maps are `x @ W + b` with `W: [in x out]`.
///
/// Keys carry no bias: a key bias shifts every score in a row equally and
/// cancels in the softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Projection heads for one teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// Regression map `[D_o x r*D_h]`.
    pub reg: Tensor,
    /// Label projection `[D_o x r*D_e]`.
    pub label: Tensor,
    /// Codeword embeddings `[N x D_e]`.
    pub codewords: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentParams {
    pub audio_w: Tensor,
    pub audio_b: Tensor,
    pub video_w: Tensor,
    pub video_b: Tensor,
    pub mask_audio: Tensor,
    pub mask_video: Tensor,
    pub in_w: Tensor,
    pub in_b: Tensor,
    pub blocks: Vec<Block>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub heads: Vec<Head>,
}

const MASK_EMBED_STD: f64 = 0.1;

fn dense<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

impl Head {
    pub fn init<R: Rng>(encoder_dim: usize, spec: &HeadSpec, rng: &mut R) -> Self {
        let r = spec.frame_rate_ratio;
        Self {
            reg: dense(encoder_dim, r * spec.teacher_dim, rng),
            label: dense(encoder_dim, r * spec.label_dim, rng),
            codewords: Tensor::randn(&[spec.num_clusters, spec.label_dim], 1.0, rng),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor); 3] {
        [("reg", &self.reg), ("label", &self.label), ("codewords", &self.codewords)]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 3] {
        [
            ("reg", &mut self.reg),
            ("label", &mut self.label),
            ("codewords", &mut self.codewords),
        ]
    }
}

impl Block {
    fn init<R: Rng>(d: usize, ff: usize, rng: &mut R) -> Self {
        Self {
            ln1_gain: Tensor::filled(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            wq: dense(d, d, rng),
            bq: Tensor::zeros(&[d]),
            wk: dense(d, d, rng),
            wv: dense(d, d, rng),
            bv: Tensor::zeros(&[d]),
            wo: dense(d, d, rng),
            bo: Tensor::zeros(&[d]),
            ln2_gain: Tensor::filled(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            w1: dense(d, ff, rng),
            b1: Tensor::zeros(&[ff]),
            w2: dense(ff, d, rng),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

impl StudentParams {
    pub fn init<R: Rng>(cfg: &StudentConfig, rng: &mut R) -> Self {
        let (df, d) = (cfg.frontend_dim, cfg.encoder_dim);
        let audio_w = dense(cfg.audio_dim, df, rng);
        let video_w = dense(cfg.video_dim, df, rng);
        let mask_audio = Tensor::randn(&[df], MASK_EMBED_STD, rng);
        let mask_video = Tensor::randn(&[df], MASK_EMBED_STD, rng);
        let in_w = dense(2 * df, d, rng);
        let blocks = (0..cfg.num_blocks).map(|_| Block::init(d, cfg.ff_dim, rng)).collect();
        let heads = cfg.heads.iter().map(|h| Head::init(d, h, rng)).collect();
        Self {
            audio_w,
            audio_b: Tensor::zeros(&[df]),
            video_w,
            video_b: Tensor::zeros(&[df]),
            mask_audio,
            mask_video,
            in_w,
            in_b: Tensor::zeros(&[d]),
            blocks,
            final_gain: Tensor::filled(&[d], 1.0),
            final_bias: Tensor::zeros(&[d]),
            heads,
        }
    }

    /// Same structure, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    /// Backbone parameters (everything except the teacher heads), in checkpoint order.
    pub fn backbone(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("audio_w".into(), &self.audio_w),
            ("audio_b".into(), &self.audio_b),
            ("video_w".into(), &self.video_w),
            ("video_b".into(), &self.video_b),
            ("mask_audio".into(), &self.mask_audio),
            ("mask_video".into(), &self.mask_video),
            ("in_w".into(), &self.in_w),
            ("in_b".into(), &self.in_b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named().into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("final_bias".into(), &self.final_bias));
        out
    }

    pub fn backbone_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.split_mut().0
    }

    fn split_mut(&mut self) -> (Vec<(String, &mut Tensor)>, &mut Vec<Head>) {
        let StudentParams {
            audio_w,
            audio_b,
            video_w,
            video_b,
            mask_audio,
            mask_video,
            in_w,
            in_b,
            blocks,
            final_gain,
            final_bias,
            heads,
        } = self;
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("audio_w".into(), audio_w),
            ("audio_b".into(), audio_b),
            ("video_w".into(), video_w),
            ("video_b".into(), video_b),
            ("mask_audio".into(), mask_audio),
            ("mask_video".into(), mask_video),
            ("in_w".into(), in_w),
            ("in_b".into(), in_b),
        ];
        for (i, b) in blocks.iter_mut().enumerate() {
            out.extend(b.named_mut().into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        out.push(("final_gain".into(), final_gain));
        out.push(("final_bias".into(), final_bias));
        (out, heads)
    }

    /// Every parameter in checkpoint order: backbone, then `head{j}.{reg,label,codewords}`.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.backbone();
        for (j, h) in self.heads.iter().enumerate() {
            out.extend(h.named().into_iter().map(|(n, t)| (format!("head{j}.{n}"), t)));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let (mut out, heads) = self.split_mut();
        for (j, h) in heads.iter_mut().enumerate() {
            out.extend(h.named_mut().into_iter().map(|(n, t)| (format!("head{j}.{n}"), t)));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += s * other`, parameter by parameter.
    pub fn axpy(&mut self, s: f64, other: &Self) -> Result<()> {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.axpy(s, b)?;
        }
        Ok(())
    }

    /// Sum of all parameter values, for cheap change detection.
    pub fn checksum(&self) -> f64 {
        self.named()
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .enumerate()
            .map(|(i, v)| v * (1.0 + (i % 97) as f64))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg() -> StudentConfig {
        StudentConfig {
            num_blocks: 2,
            heads: vec![HeadSpec {
                teacher_dim: 3,
                frame_rate_ratio: 2,
                num_clusters: 5,
                label_dim: 4,
            }],
            ..Default::default()
        }
    }

    #[test]
    fn named_order_and_shapes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let p = StudentParams::init(&cfg(), &mut rng);
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "audio_w");
        assert_eq!(names.last().unwrap(), "head0.codewords");
        assert_eq!(names.len(), 8 + 2 * 15 + 2 + 3);
        let reg = p.named().into_iter().find(|(n, _)| n == "head0.reg").unwrap().1;
        assert_eq!(reg.shape(), &[32, 6]);

        let mut q = p.clone();
        let mutable: Vec<String> = q.named_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(mutable, names);
    }

    #[test]
    fn axpy_and_zeros() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let p = StudentParams::init(&cfg(), &mut rng);
        let mut z = p.zeros_like();
        assert_eq!(z.checksum(), 0.0);
        z.axpy(2.0, &p).unwrap();
        assert!((z.checksum() - 2.0 * p.checksum()).abs() < 1e-9);
    }
}
