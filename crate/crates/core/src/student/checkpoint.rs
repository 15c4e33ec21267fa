use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::{StudentConfig, StudentModel, StudentParams};

pub const CHECKPOINT_FILE: &str = "student.avkd";
pub const SIDECAR_FILE: &str = "student.json";

/// Frame-wise linear classifier used for finetuning, `[D_o x units]` plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Classifier {
    pub fn init<R: Rng>(encoder_dim: usize, num_units: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[encoder_dim, num_units], 1.0 / (encoder_dim as f64).sqrt(), rng),
            bias: Tensor::zeros(&[num_units]),
        }
    }

    pub fn num_units(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, output: &Tensor) -> Result<Tensor> {
        output.matmul(&self.weight)?.add_row_vector(&self.bias)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    config: StudentConfig,
    tensors: Vec<String>,
    classifier_units: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: StudentModel,
    pub classifier: Option<Classifier>,
}

/// Writes all parameters in [`StudentParams::named`] order (classifier weight and
/// bias last, when present) plus a JSON sidecar naming every tensor.
pub fn save_checkpoint(dir: &Path, model: &StudentModel, classifier: Option<&Classifier>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let named = model.params.named();
    let mut names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let mut tensors: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
    if let Some(c) = classifier {
        names.extend(["classifier.weight".to_string(), "classifier.bias".to_string()]);
        tensors.extend([&c.weight, &c.bias]);
    }
    container::write(&dir.join(CHECKPOINT_FILE), &tensors)?;
    let sidecar = Sidecar {
        config: model.config.clone(),
        tensors: names,
        classifier_units: classifier.map(Classifier::num_units),
    };
    let p = dir.join(SIDECAR_FILE);
    fs::write(&p, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&p, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let p = dir.join(SIDECAR_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    let mut model = StudentModel::new(sidecar.config)?;
    let tensors = container::read(&dir.join(CHECKPOINT_FILE))?;

    let expected = model.params.num_tensors() + if sidecar.classifier_units.is_some() { 2 } else { 0 };
    if tensors.len() != expected {
        return Err(Error::ContainerShape(format!(
            "checkpoint holds {} tensors, config implies {expected}",
            tensors.len()
        )));
    }
    let mut it = tensors.into_iter();
    for (name, slot) in model.params.named_mut() {
        let t = it.next().unwrap();
        container::expect_shape(&t, slot.rows(), slot.cols(), &name)?;
        *slot = t.reshape(slot.shape())?;
    }
    let classifier = match sidecar.classifier_units {
        Some(units) => {
            let d = model.config.encoder_dim;
            let weight = it.next().unwrap();
            let bias = it.next().unwrap();
            container::expect_shape(&weight, d, units, "classifier.weight")?;
            container::expect_shape(&bias, 1, units, "classifier.bias")?;
            Some(Classifier {
                weight,
                bias: bias.reshape(&[units])?,
            })
        }
        None => None,
    };
    Ok(Checkpoint { model, classifier })
}

impl StudentParams {
    pub fn num_tensors(&self) -> usize {
        self.named().len()
    }
}
