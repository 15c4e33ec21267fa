use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::container;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::synthdata::Corpus;

use super::{aggregate_layers, OracleTeacher, TeacherConfig};

pub const BANK_CONFIG_FILE: &str = "bank.json";

/// Aggregated teacher targets per utterance id.
///
/// Each file holds the aggregated `[r*T x D_h]` target first, followed by
/// all `L` raw layers when the bank was built with `store_layers`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherBank {
    pub config: TeacherConfig,
    reps: BTreeMap<String, Tensor>,
    layers: BTreeMap<String, Vec<Tensor>>,
}

fn last_k(layers: &[Tensor], k: usize) -> &[Tensor] {
    &layers[layers.len() - k..]
}

pub fn build_bank(corpus: &Corpus, config: &TeacherConfig, store_layers: bool) -> Result<TeacherBank> {
    config.validate()?;
    let oracle = OracleTeacher::new(config, corpus.config.audio_dim);
    let mut reps = BTreeMap::new();
    let mut stored = BTreeMap::new();
    for u in &corpus.utterances {
        let layers = oracle.forward(&u.clean_audio);
        reps.insert(u.id.clone(), aggregate_layers(last_k(&layers, config.last_k))?);
        if store_layers {
            stored.insert(u.id.clone(), layers);
        }
    }
    Ok(TeacherBank {
        config: config.clone(),
        reps,
        layers: stored,
    })
}

impl TeacherBank {
    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.reps.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.reps.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.reps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reps.is_empty()
    }

    pub fn has_layers(&self) -> bool {
        !self.layers.is_empty()
    }

    /// All aggregated frames stacked into one `[frames x D_h]` matrix.
    pub fn pooled_frames(&self) -> Tensor {
        let d = self.config.hidden_dim;
        let data: Vec<f64> = self.reps.values().flat_map(|t| t.data().iter().copied()).collect();
        let rows = data.len() / d;
        Tensor::matrix(rows, d, data).expect("bank tensors share D_h")
    }

    /// Re-averages stored raw layers with a different `last_k`.
    pub fn reaggregate(&self, last_k_layers: usize) -> Result<TeacherBank> {
        if !self.has_layers() {
            return Err(Error::InvalidConfig(
                "bank was built without stored layers".into(),
            ));
        }
        let config = TeacherConfig {
            last_k: last_k_layers,
            ..self.config.clone()
        };
        config.validate()?;
        let reps = self
            .layers
            .iter()
            .map(|(id, layers)| Ok((id.clone(), aggregate_layers(last_k(layers, last_k_layers))?)))
            .collect::<Result<_>>()?;
        Ok(TeacherBank {
            config,
            reps,
            layers: self.layers.clone(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join(BANK_CONFIG_FILE);
        fs::write(&cfg_path, serde_json::to_string_pretty(&self.config)?)
            .map_err(|e| Error::io(&cfg_path, e))?;
        for (id, rep) in &self.reps {
            let mut tensors = vec![rep];
            if let Some(layers) = self.layers.get(id) {
                tensors.extend(layers.iter());
            }
            container::write(&dir.join(format!("{id}.avkd")), &tensors)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(BANK_CONFIG_FILE);
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: TeacherConfig = serde_json::from_str(&text)?;
        config.validate()?;

        let mut files: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "avkd"))
            .collect();
        files.sort();

        let mut reps = BTreeMap::new();
        let mut layers = BTreeMap::new();
        for path in files {
            let id = path.file_stem().unwrap().to_string_lossy().into_owned();
            let mut tensors = container::read(&path)?.into_iter();
            let rep = tensors
                .next()
                .ok_or_else(|| Error::ContainerShape(format!("{id}: no tensors")))?;
            if rep.cols() != config.hidden_dim || rep.rows() % config.frame_rate_ratio != 0 {
                return Err(Error::ContainerShape(format!(
                    "{id}: {}x{} target for D_h={} r={}",
                    rep.rows(),
                    rep.cols(),
                    config.hidden_dim,
                    config.frame_rate_ratio
                )));
            }
            let rest: Vec<Tensor> = tensors.collect();
            if !rest.is_empty() {
                if rest.len() != config.num_layers {
                    return Err(Error::ContainerShape(format!(
                        "{id}: {} stored layers, config says {}",
                        rest.len(),
                        config.num_layers
                    )));
                }
                for l in &rest {
                    container::expect_shape(l, rep.rows(), rep.cols(), "stored layer")?;
                }
                layers.insert(id.clone(), rest);
            }
            reps.insert(id, rep);
        }
        Ok(Self {
            config,
            reps,
            layers,
        })
    }
}
