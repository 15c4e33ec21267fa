//! In-memory end-to-end runs: corpus, teachers, codebooks, pretraining,
//! finetuning and evaluation, driven by one [`RunConfig`].

use crate::codebook::{fit_kmeans_restarts, Codebook};
use crate::config::{RunConfig, TeacherSpec};
use crate::distill::{finetune, frame_accuracy, pretrain, LossReport, PreparedTeacher, TrainConfig};
use crate::error::Result;
use crate::rng;
use crate::student::{Classifier, Modality, StudentModel};
use crate::synthdata::{generate_corpus, Corpus};
use crate::teacher::{build_bank, TeacherBank};

/// Fits the codebook of one teacher on every aggregated frame of its bank.
pub fn fit_codebook(bank: &TeacherBank, spec: &TeacherSpec, run: &RunConfig, index: usize) -> Result<Codebook> {
    let k = &run.kmeans;
    fit_kmeans_restarts(
        &bank.pooled_frames(),
        spec.num_clusters,
        rng::derive_seed(k.seed, index as u64),
        k.max_iters,
        k.tol,
        k.restarts,
    )
}

pub fn prepare_teachers(
    corpus: &Corpus,
    banks: &[(TeacherBank, Codebook)],
    tau_prime: f64,
) -> Result<Vec<PreparedTeacher>> {
    banks
        .iter()
        .map(|(bank, cb)| {
            PreparedTeacher::new(
                bank,
                cb,
                tau_prime,
                corpus.utterances.iter().map(|u| (u.id.as_str(), u.frames())),
            )
        })
        .collect()
}

/// Everything a pretraining run needs, built once and reusable across variants.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub run: RunConfig,
    pub corpus: Corpus,
    pub eval: Corpus,
    pub banks: Vec<(TeacherBank, Codebook)>,
}

impl Workspace {
    pub fn build(run: &RunConfig) -> Result<Self> {
        run.validate()?;
        let corpus = generate_corpus(&run.corpus)?;
        let eval = generate_corpus(&run.eval_corpus_config())?;
        let banks = run
            .teachers
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let bank = build_bank(&corpus, &spec.teacher, false)?;
                let cb = fit_codebook(&bank, spec, run, i)?;
                Ok((bank, cb))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            run: run.clone(),
            corpus,
            eval,
            banks,
        })
    }

    pub fn finetune_corpus(&self) -> Corpus {
        Corpus {
            config: self.corpus.config.split(0, self.run.finetune_utterances),
            utterances: self.corpus.utterances[..self.run.finetune_utterances].to_vec(),
        }
    }

    pub fn teachers(&self, tau_prime: f64) -> Result<Vec<PreparedTeacher>> {
        prepare_teachers(&self.corpus, &self.banks, tau_prime)
    }

    pub fn new_student(&self) -> Result<StudentModel> {
        StudentModel::new(self.run.student_config())
    }

    pub fn pretrain(&self, cfg: &TrainConfig) -> Result<(StudentModel, Vec<LossReport>)> {
        let teachers = self.teachers(cfg.tau_prime)?;
        let mut model = self.new_student()?;
        let reports = pretrain(&mut model, &self.corpus, &teachers, cfg, |_| {})?;
        Ok((model, reports))
    }

    /// Finetunes `model` with a fresh classifier; returns the classifier and reports.
    pub fn finetune(&self, model: &mut StudentModel, cfg: &TrainConfig) -> Result<(Classifier, Vec<LossReport>)> {
        let data = self.finetune_corpus();
        let mut clf = new_classifier(model, self.corpus.config.num_units, cfg.seed);
        let teachers = if cfg.lambda > 0.0 {
            Some(prepare_teachers(&data, &self.banks, cfg.tau_prime)?)
        } else {
            None
        };
        let reports = finetune(model, &mut clf, &data, teachers.as_deref(), cfg, |_| {})?;
        Ok((clf, reports))
    }

    pub fn accuracy(&self, model: &StudentModel, clf: &Classifier, mode: Modality, snr_db: Option<f64>) -> Result<f64> {
        frame_accuracy(model, clf, &self.eval, mode, snr_db, rng::derive_seed(self.run.corpus.seed, 0xE7A1))
    }
}

pub fn new_classifier(model: &StudentModel, num_units: usize, seed: u64) -> Classifier {
    Classifier::init(
        model.config.encoder_dim,
        num_units,
        &mut rng::stream(rng::derive_seed(seed, 0xC1A5), 0),
    )
}

/// Arithmetic mean; NaN for an empty slice.
pub fn window_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
