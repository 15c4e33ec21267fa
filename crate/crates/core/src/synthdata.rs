//! Synthetic parallel audio-visual corpus.
//!
//! Each utterance follows a hidden sequence of discrete units. Every unit
//! owns one audio prototype and one video prototype; a frame is its unit's
//! prototype plus Gaussian jitter, so the two streams are correlated only
//! through the shared unit sequence.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const LABELS_FILE: &str = "labels.txt";
pub const CONFIG_FILE: &str = "corpus.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpusConfig {
    pub num_utterances: usize,
    pub frames_per_utterance: usize,
    pub num_units: usize,
    pub audio_dim: usize,
    pub video_dim: usize,
    pub audio_noise_std: f64,
    pub video_noise_std: f64,
    /// Mean run length of a unit, in frames.
    pub unit_dwell: f64,
    /// Seeds the unit prototypes and every utterance stream.
    pub seed: u64,
    /// Index of the first utterance. A held-out split uses the same seed
    /// (same prototypes) with a disjoint index range.
    #[serde(default)]
    pub first_index: u64,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        Self {
            num_utterances: 200,
            frames_per_utterance: 100,
            num_units: 20,
            audio_dim: 16,
            video_dim: 16,
            audio_noise_std: 0.05,
            video_noise_std: 0.3,
            unit_dwell: 5.0,
            seed: 0,
            first_index: 0,
        }
    }
}

impl SynthCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.frames_per_utterance,
            self.num_units,
            self.audio_dim,
            self.video_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig("corpus dimensions must be >= 1".into()));
        }
        if !(self.unit_dwell >= 1.0) {
            return Err(Error::InvalidConfig(format!("unit_dwell {} < 1", self.unit_dwell)));
        }
        if !(self.audio_noise_std >= 0.0 && self.video_noise_std >= 0.0) {
            return Err(Error::InvalidConfig("noise std must be nonnegative".into()));
        }
        Ok(())
    }

    /// Config for utterances `[first_index + offset, ...)` sharing this corpus' prototypes.
    pub fn split(&self, offset: u64, num_utterances: usize) -> Self {
        Self {
            num_utterances,
            first_index: self.first_index + offset,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub clean_audio: Tensor,
    pub video: Tensor,
    pub unit_labels: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.unit_labels.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: SynthCorpusConfig,
    pub utterances: Vec<Utterance>,
}

fn utterance_id(index: u64) -> String {
    format!("utt{index:06}")
}

/// Run-length unit sequence with geometric dwell of mean `dwell`.
fn unit_sequence<R: Rng>(t: usize, num_units: usize, dwell: f64, rng: &mut R) -> Vec<usize> {
    let switch = 1.0 / dwell;
    let mut seq = Vec::with_capacity(t);
    let mut cur = rng.random_range(0..num_units);
    for i in 0..t {
        if i > 0 && num_units > 1 && rng.random::<f64>() < switch {
            // uniform over the other units
            let next = rng.random_range(0..num_units - 1);
            cur = if next >= cur { next + 1 } else { next };
        }
        seq.push(cur);
    }
    seq
}

fn render<R: Rng>(labels: &[usize], prototypes: &Tensor, std: f64, rng: &mut R) -> Tensor {
    let d = prototypes.cols();
    let mut out = Tensor::zeros(&[labels.len(), d]);
    for (t, &u) in labels.iter().enumerate() {
        let row = out.row_mut(t);
        for (o, &p) in row.iter_mut().zip(prototypes.row(u)) {
            let z: f64 = StandardNormal.sample(rng);
            *o = p + std * z;
        }
    }
    out
}

pub fn generate_corpus(cfg: &SynthCorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut proto_rng = rng::stream(cfg.seed, 0);
    let audio_protos = Tensor::randn(&[cfg.num_units, cfg.audio_dim], 1.0, &mut proto_rng);
    let video_protos = Tensor::randn(&[cfg.num_units, cfg.video_dim], 1.0, &mut proto_rng);

    let utterances = (0..cfg.num_utterances as u64)
        .map(|i| {
            let index = cfg.first_index + i;
            let mut r = rng::stream(cfg.seed, index + 1);
            let labels = unit_sequence(cfg.frames_per_utterance, cfg.num_units, cfg.unit_dwell, &mut r);
            let clean_audio = render(&labels, &audio_protos, cfg.audio_noise_std, &mut r);
            let video = render(&labels, &video_protos, cfg.video_noise_std, &mut r);
            Utterance {
                id: utterance_id(index),
                clean_audio,
                video,
                unit_labels: labels,
            }
        })
        .collect();
    Ok(Corpus {
        config: cfg.clone(),
        utterances,
    })
}

fn mean_square(x: &Tensor) -> f64 {
    x.dot(x) / x.len() as f64
}

/// Adds Gaussian noise scaled so the realized SNR equals `snr_db` exactly.
///
/// `f64::INFINITY` returns the input unchanged.
pub fn mix_noise(clean: &Tensor, snr_db: f64, seed: u64) -> Result<Tensor> {
    let signal = mean_square(clean);
    if clean.is_empty() || signal == 0.0 {
        return Err(Error::ZeroEnergy);
    }
    if snr_db == f64::INFINITY {
        return Ok(clean.clone());
    }
    let mut r = rng::stream(seed, 0);
    let mut noise = Tensor::randn(clean.shape(), 1.0, &mut r);
    let mut raw = mean_square(&noise);
    while raw == 0.0 {
        noise = Tensor::randn(clean.shape(), 1.0, &mut r);
        raw = mean_square(&noise);
    }
    let target = signal / 10f64.powf(snr_db / 10.0);
    noise = noise.scale((target / raw).sqrt());
    clean.add(&noise)
}

/// Realized SNR in dB between a clean signal and its noisy version.
pub fn realized_snr_db(clean: &Tensor, noisy: &Tensor) -> Result<f64> {
    let noise = noisy.sub(clean)?;
    Ok(10.0 * (mean_square(clean) / mean_square(&noise)).log10())
}

impl Corpus {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        let mut labels = String::new();
        for u in &self.utterances {
            let file = format!("{}.avkd", u.id);
            container::write(&dir.join(&file), &[&u.clean_audio, &u.video])?;
            writeln!(manifest, "{}\t{}\t{}", u.id, file, u.frames()).unwrap();
            let units: Vec<String> = u.unit_labels.iter().map(usize::to_string).collect();
            writeln!(labels, "{} {}", u.id, units.join(" ")).unwrap();
        }
        let write = |name: &str, body: &str| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        write(MANIFEST_FILE, &manifest)?;
        write(LABELS_FILE, &labels)?;
        write(CONFIG_FILE, &serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(p, e))
        };
        let config: SynthCorpusConfig = serde_json::from_str(&read(CONFIG_FILE)?)?;
        let mut label_map = std::collections::HashMap::new();
        for line in read(LABELS_FILE)?.lines().filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let id = parts.next().unwrap().to_string();
            let units = parts
                .map(|s| {
                    s.parse::<usize>().map_err(|e| Error::Parse {
                        what: LABELS_FILE.into(),
                        detail: format!("{id}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            label_map.insert(id, units);
        }

        let mut utterances = Vec::new();
        for line in read(MANIFEST_FILE)?.lines().filter(|l| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |detail: String| Error::Parse {
                what: MANIFEST_FILE.into(),
                detail,
            };
            if fields.len() != 3 {
                return Err(bad(format!("expected 3 fields: {line:?}")));
            }
            let (id, file) = (fields[0].to_string(), fields[1]);
            let t: usize = fields[2].parse().map_err(|e| bad(format!("{id}: {e}")))?;
            let tensors = container::read(&dir.join(file))?;
            if tensors.len() != 2 {
                return Err(Error::ContainerShape(format!(
                    "{file}: expected 2 tensors, found {}",
                    tensors.len()
                )));
            }
            let mut it = tensors.into_iter();
            let (clean_audio, video) = (it.next().unwrap(), it.next().unwrap());
            container::expect_shape(&clean_audio, t, config.audio_dim, "audio")?;
            container::expect_shape(&video, t, config.video_dim, "video")?;
            let unit_labels = label_map.remove(&id).ok_or_else(|| Error::MissingLabels(id.clone()))?;
            if unit_labels.len() != t {
                return Err(Error::ContainerShape(format!(
                    "{id}: {} labels for {t} frames",
                    unit_labels.len()
                )));
            }
            utterances.push(Utterance {
                id,
                clean_audio,
                video,
                unit_labels,
            });
        }
        Ok(Self { config, utterances })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthCorpusConfig {
        SynthCorpusConfig {
            num_utterances: 6,
            frames_per_utterance: 30,
            num_units: 5,
            audio_dim: 4,
            video_dim: 3,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_frames_equal_prototypes() {
        let cfg = SynthCorpusConfig {
            audio_noise_std: 0.0,
            video_noise_std: 0.0,
            ..small()
        };
        let c = generate_corpus(&cfg).unwrap();
        let mut seen: std::collections::HashMap<usize, (Vec<f64>, Vec<f64>)> = Default::default();
        for u in &c.utterances {
            for (t, &unit) in u.unit_labels.iter().enumerate() {
                let a = u.clean_audio.row(t).to_vec();
                let v = u.video.row(t).to_vec();
                let entry = seen.entry(unit).or_insert_with(|| (a.clone(), v.clone()));
                assert_eq!(entry.0, a);
                assert_eq!(entry.1, v);
            }
        }
    }

    #[test]
    fn mean_run_length_matches_dwell() {
        let cfg = SynthCorpusConfig {
            num_utterances: 1,
            frames_per_utterance: 1000,
            num_units: 2,
            unit_dwell: 5.0,
            ..small()
        };
        let labels = &generate_corpus(&cfg).unwrap().utterances[0].unit_labels;
        let runs = 1 + labels.windows(2).filter(|w| w[0] != w[1]).count();
        let mean = 1000.0 / runs as f64;
        assert!((mean - 5.0).abs() <= 1.0, "mean run length {mean}");
    }

    #[test]
    fn labels_in_range_and_streams_aligned() {
        let c = generate_corpus(&small()).unwrap();
        for u in &c.utterances {
            assert_eq!(u.clean_audio.rows(), u.video.rows());
            assert!(u.unit_labels.iter().all(|&l| l < 5));
        }
    }

    #[test]
    fn held_out_split_shares_prototypes() {
        let cfg = SynthCorpusConfig {
            audio_noise_std: 0.0,
            video_noise_std: 0.0,
            ..small()
        };
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg.split(1000, 3)).unwrap();
        assert_eq!(b.utterances[0].id, "utt001000");
        let u = b.utterances[0].unit_labels[0];
        let row = b.utterances[0].clean_audio.row(0);
        let found = a.utterances.iter().any(|x| {
            x.unit_labels
                .iter()
                .position(|&l| l == u)
                .is_some_and(|t| x.clean_audio.row(t) == row)
        });
        assert!(found);
    }

    #[test]
    fn same_unit_frames_are_closer() {
        let c = generate_corpus(&SynthCorpusConfig {
            audio_noise_std: 0.1,
            video_noise_std: 0.1,
            ..small()
        })
        .unwrap();
        for pick in [|u: &Utterance| u.clean_audio.clone(), |u: &Utterance| u.video.clone()] {
            let (mut same, mut ns, mut diff, mut nd) = (0.0, 0, 0.0, 0);
            for u in &c.utterances {
                let x = pick(u);
                for i in 0..u.frames() {
                    for j in (i + 1)..u.frames() {
                        let d = crate::numerics::sq_dist(x.row(i), x.row(j)).sqrt();
                        if u.unit_labels[i] == u.unit_labels[j] {
                            same += d;
                            ns += 1;
                        } else {
                            diff += d;
                            nd += 1;
                        }
                    }
                }
            }
            assert!(same / (ns as f64) < diff / (nd as f64));
        }
    }

    #[test]
    fn mix_noise_snr() {
        let c = generate_corpus(&small()).unwrap();
        let clean = &c.utterances[0].clean_audio;
        assert_eq!(&mix_noise(clean, f64::INFINITY, 1).unwrap(), clean);
        for snr in [0.0, 10.0] {
            let noisy = mix_noise(clean, snr, 3).unwrap();
            assert!((realized_snr_db(clean, &noisy).unwrap() - snr).abs() < 0.1);
        }
        let noise = mix_noise(clean, 10.0, 3).unwrap().sub(clean).unwrap();
        let ratio = noise.dot(&noise) / clean.dot(clean);
        assert!((ratio - 0.1).abs() < 1e-3);
        assert!(matches!(
            mix_noise(&Tensor::zeros(&[3, 2]), 0.0, 1),
            Err(Error::ZeroEnergy)
        ));
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate_corpus(&small()).unwrap();
        c.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back, c);
        let manifest = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest.lines().next().unwrap(), "utt000000\tutt000000.avkd\t30");
    }
}
