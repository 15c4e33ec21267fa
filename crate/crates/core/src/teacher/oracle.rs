use crate::numerics::Tensor;
use crate::rng;

use super::TeacherConfig;

/// Deterministic stand-in for a frozen speech encoder.
///
/// Layer 1 maps the (frame-duplicated) input through a fixed random dense
/// map and `tanh`; every later layer applies its own fixed map to the
/// previous layer. All maps act per frame.
#[derive(Debug, Clone)]
pub struct OracleTeacher {
    config: TeacherConfig,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

const BIAS_STD: f64 = 0.1;

impl OracleTeacher {
    pub fn new(config: &TeacherConfig, input_dim: usize) -> Self {
        let mut r = rng::stream(config.seed, input_dim as u64);
        let mut weights = Vec::with_capacity(config.num_layers);
        let mut biases = Vec::with_capacity(config.num_layers);
        let mut fan_in = input_dim;
        for _ in 0..config.num_layers {
            let std = 1.0 / (fan_in as f64).sqrt();
            weights.push(Tensor::randn(&[fan_in, config.hidden_dim], std, &mut r));
            biases.push(Tensor::randn(&[config.hidden_dim], BIAS_STD, &mut r));
            fan_in = config.hidden_dim;
        }
        Self {
            config: config.clone(),
            weights,
            biases,
        }
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    /// All `L` layer outputs, each `[r*T x D_h]`.
    pub fn forward(&self, clean_audio: &Tensor) -> Vec<Tensor> {
        let r = self.config.frame_rate_ratio;
        let (t, d) = (clean_audio.rows(), clean_audio.cols());
        let mut up = Tensor::zeros(&[t * r, d]);
        for i in 0..t {
            for s in 0..r {
                up.row_mut(i * r + s).copy_from_slice(clean_audio.row(i));
            }
        }
        let mut layers = Vec::with_capacity(self.weights.len());
        let mut h = up;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            h = h
                .matmul(w)
                .and_then(|z| z.add_row_vector(b))
                .expect("oracle weights sized at construction")
                .map(f64::tanh);
            layers.push(h.clone());
        }
        layers
    }
}

pub fn oracle_forward(clean_audio: &Tensor, config: &TeacherConfig, seed: u64) -> Vec<Tensor> {
    let cfg = TeacherConfig {
        seed,
        ..config.clone()
    };
    OracleTeacher::new(&cfg, clean_audio.cols()).forward(clean_audio)
}
