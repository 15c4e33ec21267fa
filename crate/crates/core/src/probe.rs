//! Per-unit representation analysis across layers and input modalities.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::container;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::student::{Modality, StudentInput, StudentModel};
use crate::synthdata::Corpus;

#[derive(Debug, Clone, Default)]
struct Cell {
    sum: Vec<f64>,
    count: usize,
}

/// Mean hidden state per (layer, mode, unit). Units never observed have no cell.
#[derive(Debug, Clone, Default)]
pub struct UnitRepresentationTable {
    cells: BTreeMap<(usize, Modality, usize), Cell>,
    num_units: usize,
}

impl UnitRepresentationTable {
    pub fn new(num_units: usize) -> Self {
        Self {
            cells: BTreeMap::new(),
            num_units,
        }
    }

    pub fn num_units(&self) -> usize {
        self.num_units
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Number of populated cells.
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn accumulate(&mut self, layer: usize, mode: Modality, unit: usize, state: &[f64]) {
        self.num_units = self.num_units.max(unit + 1);
        let cell = self.cells.entry((layer, mode, unit)).or_default();
        if cell.sum.is_empty() {
            cell.sum = vec![0.0; state.len()];
        }
        for (s, v) in cell.sum.iter_mut().zip(state) {
            *s += v;
        }
        cell.count += 1;
    }

    pub fn count(&self, layer: usize, mode: Modality, unit: usize) -> usize {
        self.cells.get(&(layer, mode, unit)).map_or(0, |c| c.count)
    }

    pub fn mean(&self, layer: usize, mode: Modality, unit: usize) -> Option<Vec<f64>> {
        let c = self.cells.get(&(layer, mode, unit))?;
        let n = c.count as f64;
        Some(c.sum.iter().map(|s| s / n).collect())
    }

    /// Units populated at `(layer, mode)`.
    pub fn units(&self, layer: usize, mode: Modality) -> Vec<usize> {
        self.cells
            .keys()
            .filter(|(l, m, _)| *l == layer && *m == mode)
            .map(|&(_, _, u)| u)
            .collect()
    }

    /// `[U x D]` means for every unit `0..num_units`, or the list of missing units.
    pub fn means(&self, layer: usize, mode: Modality) -> Result<Tensor> {
        let missing: Vec<usize> = (0..self.num_units)
            .filter(|&u| self.count(layer, mode, u) == 0)
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingUnits(missing));
        }
        let rows: Vec<Vec<f64>> = (0..self.num_units)
            .map(|u| self.mean(layer, mode, u).expect("populated"))
            .collect();
        Tensor::from_rows(&rows)
    }
}

/// Runs the encoder on every utterance with the omitted modality zeroed,
/// averaging hidden states per ground-truth unit at each requested layer.
///
/// Layer 0 is the embedded input; layer `b + 1` is the output of block `b`.
pub fn collect_unit_representations(
    model: &StudentModel,
    corpus: &Corpus,
    mode: Modality,
    layers: &[usize],
) -> Result<UnitRepresentationTable> {
    collect_into(UnitRepresentationTable::new(corpus.config.num_units), model, corpus, mode, layers)
}

/// Same as [`collect_unit_representations`], adding to an existing table.
pub fn collect_into(
    mut table: UnitRepresentationTable,
    model: &StudentModel,
    corpus: &Corpus,
    mode: Modality,
    layers: &[usize],
) -> Result<UnitRepresentationTable> {
    let max = model.num_layers() - 1;
    if let Some(&bad) = layers.iter().find(|&&l| l > max) {
        return Err(Error::UnknownLayer { layer: bad, max });
    }
    for utt in &corpus.utterances {
        if utt.unit_labels.len() != utt.frames() {
            return Err(Error::MissingLabels(utt.id.clone()));
        }
        let pass = model.forward(StudentInput::clean(&utt.clean_audio, &utt.video).with_modality(mode))?;
        for &layer in layers {
            let states = &pass.states[layer];
            for (t, &u) in utt.unit_labels.iter().enumerate() {
                table.accumulate(layer, mode, u, states.row(t));
            }
        }
    }
    Ok(table)
}

/// Pairwise Euclidean distances between unit means, `[U x U]`.
pub fn distance_matrix(table: &UnitRepresentationTable, layer: usize, mode: Modality) -> Result<Tensor> {
    let means = table.means(layer, mode)?;
    Ok(pairwise(&means, &means, true))
}

fn pairwise(a: &Tensor, b: &Tensor, symmetric: bool) -> Tensor {
    let n = a.rows();
    let m = b.rows();
    let mut d = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let start = if symmetric { i + 1 } else { 0 };
        for j in start..m {
            let v = crate::numerics::sq_dist(a.row(i), b.row(j)).sqrt();
            d.set(i, j, v);
            if symmetric {
                d.set(j, i, v);
            }
        }
    }
    d
}

/// Mean same-unit audio/video distance over mean different-unit audio/video distance.
///
/// Below 1 means audio and video representations of a unit sit closer to
/// each other than to other units.
pub fn cross_modal_gap(table: &UnitRepresentationTable, layer: usize) -> Result<f64> {
    let audio = table.means(layer, Modality::AudioOnly)?;
    let video = table.means(layer, Modality::VideoOnly)?;
    gap_from_means(&audio, &video)
}

pub fn gap_from_means(audio: &Tensor, video: &Tensor) -> Result<f64> {
    if audio.shape() != video.shape() {
        return Err(Error::shape(
            "cross_modal_gap",
            format!("{:?}", audio.shape()),
            format!("{:?}", video.shape()),
        ));
    }
    let u = audio.rows();
    if u < 2 {
        return Err(Error::Empty("cross_modal_gap needs at least two units"));
    }
    let d = pairwise(audio, video, false);
    let same: f64 = (0..u).map(|i| d.at(i, i)).sum::<f64>() / u as f64;
    let mut cross = 0.0;
    for i in 0..u {
        for j in 0..u {
            if i != j {
                cross += d.at(i, j);
            }
        }
    }
    cross /= (u * (u - 1)) as f64;
    if cross == 0.0 {
        return Ok(0.0);
    }
    Ok(same / cross)
}

/// CSV with unit names as header row and first column.
pub fn distance_matrix_csv(d: &Tensor) -> String {
    let n = d.rows();
    let mut out = String::from("unit");
    for j in 0..n {
        write!(out, ",u{j}").unwrap();
    }
    out.push('\n');
    for i in 0..n {
        write!(out, "u{i}").unwrap();
        for j in 0..n {
            write!(out, ",{}", d.at(i, j)).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Writes every populated mean as one row of a `[rows x D]` tensor to
/// `path`, and `path` with `.csv` appended as the manifest
/// (`row,layer,mode,unit,count`). Returns the number of rows.
pub fn export_embeddings(table: &UnitRepresentationTable, path: &Path) -> Result<usize> {
    if table.is_empty() {
        return Err(Error::Empty("embedding table"));
    }
    let mut rows = Vec::with_capacity(table.len());
    let mut manifest = String::from("row,layer,mode,unit,count\n");
    for (i, (&(layer, mode, unit), cell)) in table.cells.iter().enumerate() {
        let n = cell.count as f64;
        rows.push(cell.sum.iter().map(|s| s / n).collect::<Vec<_>>());
        writeln!(manifest, "{i},{layer},{mode},{unit},{}", cell.count).unwrap();
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::shape("export_embeddings(row width)", dim, "mixed widths"));
    }
    let tensor = Tensor::from_rows(&rows)?;
    container::write(path, &[&tensor])?;
    let manifest_path = manifest_path(path);
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(rows.len())
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".csv");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::student::{HeadSpec, StudentConfig};
    use crate::synthdata::{generate_corpus, SynthCorpusConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn tiny() -> (StudentModel, Corpus) {
        let corpus = generate_corpus(&SynthCorpusConfig {
            num_utterances: 6,
            frames_per_utterance: 20,
            num_units: 4,
            unit_dwell: 3.0,
            ..Default::default()
        })
        .unwrap();
        let cfg = StudentConfig {
            encoder_dim: 8,
            num_heads: 2,
            ff_dim: 12,
            frontend_dim: 6,
            heads: vec![HeadSpec {
                teacher_dim: 4,
                frame_rate_ratio: 1,
                num_clusters: 3,
                label_dim: 4,
            }],
            ..Default::default()
        };
        (StudentModel::new(cfg).unwrap(), corpus)
    }

    #[test]
    fn single_unit_utterance() {
        let (model, mut corpus) = tiny();
        corpus.utterances.truncate(1);
        let t = corpus.utterances[0].frames();
        corpus.utterances[0].unit_labels = vec![2; t];
        let table = collect_unit_representations(&model, &corpus, Modality::Both, &[0, 2]).unwrap();
        assert_eq!(table.units(0, Modality::Both), vec![2]);
        assert_eq!(table.units(2, Modality::Both), vec![2]);
        assert_eq!(table.count(0, Modality::Both, 2), t);
        assert!(table.mean(0, Modality::Both, 1).is_none());
        assert!(matches!(distance_matrix(&table, 0, Modality::Both), Err(Error::MissingUnits(u)) if u == vec![0, 1, 3]));
    }

    #[test]
    fn unknown_layer() {
        let (model, corpus) = tiny();
        let err = collect_unit_representations(&model, &corpus, Modality::Both, &[3]).unwrap_err();
        assert!(matches!(err, Error::UnknownLayer { layer: 3, max: 2 }));
    }

    #[test]
    fn zero_video_frontend_matches_audio_only() {
        let (mut model, corpus) = tiny();
        model.params.video_w = Tensor::zeros(model.params.video_w.shape());
        model.params.video_b = Tensor::zeros(model.params.video_b.shape());
        let both = collect_unit_representations(&model, &corpus, Modality::Both, &[0, 1, 2]).unwrap();
        let audio = collect_unit_representations(&model, &corpus, Modality::AudioOnly, &[0, 1, 2]).unwrap();
        for l in 0..3 {
            let a = both.means(l, Modality::Both).unwrap();
            let b = audio.means(l, Modality::AudioOnly).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }

    #[test]
    fn deterministic_and_read_only() {
        let (model, corpus) = tiny();
        let before = model.params.checksum();
        let a = collect_unit_representations(&model, &corpus, Modality::VideoOnly, &[1]).unwrap();
        let b = collect_unit_representations(&model, &corpus, Modality::VideoOnly, &[1]).unwrap();
        assert_eq!(model.params.checksum(), before);
        assert_eq!(a.means(1, Modality::VideoOnly).unwrap(), b.means(1, Modality::VideoOnly).unwrap());
    }

    #[test]
    fn identical_means_zero_matrix() {
        let mut table = UnitRepresentationTable::new(3);
        for u in 0..3 {
            table.accumulate(0, Modality::Both, u, &[1.0, 2.0]);
        }
        let d = distance_matrix(&table, 0, Modality::Both).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_tables_zero_gap() {
        let mut table = UnitRepresentationTable::new(3);
        for u in 0..3 {
            let v = [u as f64, 1.0 - u as f64];
            table.accumulate(1, Modality::AudioOnly, u, &v);
            table.accumulate(1, Modality::VideoOnly, u, &v);
        }
        assert_eq!(cross_modal_gap(&table, 1).unwrap(), 0.0);
    }

    #[test]
    fn unrelated_tables_gap_near_one() {
        let mut g = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mean = (0..100)
            .map(|_| {
                let a = Tensor::randn(&[10, 8], 1.0, &mut g);
                let v = Tensor::randn(&[10, 8], 1.0, &mut g);
                gap_from_means(&a, &v).unwrap()
            })
            .sum::<f64>()
            / 100.0;
        assert!((0.9..=1.1).contains(&mean), "{mean}");
    }

    #[test]
    fn export_round_trip() {
        let (model, corpus) = tiny();
        let table = collect_unit_representations(&model, &corpus, Modality::Both, &[0, 2]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.avkd");
        let rows = export_embeddings(&table, &path).unwrap();
        let back = container::read(&path).unwrap();
        assert_eq!(back[0].rows(), rows);
        let manifest = std::fs::read_to_string(manifest_path(&path)).unwrap();
        assert_eq!(manifest.lines().count() - 1, rows);
        let again = dir.path().join("again.avkd");
        export_embeddings(&table, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn export_empty_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.avkd");
        assert!(export_embeddings(&UnitRepresentationTable::new(3), &path).is_err());
        assert!(!path.exists());
        assert!(!manifest_path(&path).exists());
    }

    #[test]
    fn csv_header() {
        let d = Tensor::matrix(2, 2, vec![0.0, 1.5, 1.5, 0.0]).unwrap();
        assert_eq!(distance_matrix_csv(&d), "unit,u0,u1\nu0,0,1.5\nu1,1.5,0\n");
    }

    proptest! {
        #[test]
        fn distance_is_metric(vals in prop::collection::vec(-5.0f64..5.0, 5 * 3)) {
            let mut table = UnitRepresentationTable::new(5);
            for u in 0..5 {
                table.accumulate(0, Modality::AudioOnly, u, &vals[u * 3..u * 3 + 3]);
            }
            let d = distance_matrix(&table, 0, Modality::AudioOnly).unwrap();
            for i in 0..5 {
                prop_assert_eq!(d.at(i, i), 0.0);
                for j in 0..5 {
                    prop_assert_eq!(d.at(i, j), d.at(j, i));
                    for k in 0..5 {
                        prop_assert!(d.at(i, k) <= d.at(i, j) + d.at(j, k) + 1e-12);
                    }
                }
            }
        }
    }
}
