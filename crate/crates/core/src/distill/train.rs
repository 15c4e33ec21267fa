use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{softmax, Tensor, PROB_FLOOR};
use crate::rng;
use crate::student::{draw_modality, sample_mask, Classifier, Modality, StudentInput, StudentModel, StudentParams};
use crate::synthdata::{mix_noise, Corpus, Utterance};

use super::aligned_mtl::aligned_mtl_aggregate;
use super::config::{KdRegion, LossKind, TrainConfig};
use super::losses::{loss_ce_hard, loss_kld, loss_reg};
use super::targets::PreparedTeacher;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossComponent {
    /// Teacher name, or `task` for the finetuning objective.
    pub source: String,
    pub kind: String,
    pub value: f64,
    /// Weight this component's gradient received.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub step: usize,
    pub components: Vec<LossComponent>,
    /// Unweighted sum of the distillation components (plus the task loss when finetuning).
    pub total: f64,
    pub modality: Modality,
    pub snr_db: Option<f64>,
}

impl LossReport {
    pub fn kd_total(&self) -> f64 {
        self.components
            .iter()
            .filter(|c| c.source != "task")
            .map(|c| c.value)
            .sum()
    }

    pub fn csv_header(&self) -> String {
        let mut h = String::from("step");
        for c in &self.components {
            write!(h, ",{}_{}", c.source, c.kind).unwrap();
        }
        h.push_str(",total");
        for c in &self.components {
            write!(h, ",w_{}_{}", c.source, c.kind).unwrap();
        }
        h.push_str(",mode,snr_db");
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = self.step.to_string();
        for c in &self.components {
            write!(r, ",{}", c.value).unwrap();
        }
        write!(r, ",{}", self.total).unwrap();
        for c in &self.components {
            write!(r, ",{}", c.weight).unwrap();
        }
        let snr = self.snr_db.map_or_else(|| "clean".to_string(), |s| s.to_string());
        write!(r, ",{},{}", self.modality, snr).unwrap();
        r
    }
}

/// Renders reports as a CSV document (header from the first report).
pub fn metrics_csv(reports: &[LossReport]) -> String {
    let mut out = String::new();
    if let Some(first) = reports.first() {
        out.push_str(&first.csv_header());
        out.push('\n');
    }
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// One distillation term with its gradients.
#[derive(Debug, Clone)]
pub struct KdTerm {
    pub teacher: usize,
    pub kind: LossKind,
    pub loss: f64,
    pub d_output: Tensor,
    /// Gradient for the teacher's heads; other heads are zero.
    pub d_heads: StudentParams,
}

/// Frames selected by `region` given the masks of this step.
pub fn region_frames(region: KdRegion, t: usize, mask_audio: &[usize], mask_video: &[usize]) -> Result<Vec<usize>> {
    let frames: Vec<usize> = match region {
        KdRegion::All => (0..t).collect(),
        KdRegion::MaskedOnly => {
            let mut in_mask = vec![false; t];
            for &i in mask_audio.iter().chain(mask_video) {
                in_mask[i] = true;
            }
            (0..t).filter(|&i| in_mask[i]).collect()
        }
    };
    if frames.is_empty() {
        return Err(Error::EmptyRegion);
    }
    Ok(frames)
}

/// Evaluates every configured loss for every teacher on one encoder output.
pub fn kd_terms(
    model: &StudentModel,
    output: &Tensor,
    utterance_id: &str,
    teachers: &[PreparedTeacher],
    cfg: &TrainConfig,
    frames: &[usize],
) -> Result<Vec<KdTerm>> {
    if teachers.len() != model.params.heads.len() {
        return Err(Error::InvalidConfig(format!(
            "{} teachers but the student has {} head sets",
            teachers.len(),
            model.params.heads.len()
        )));
    }
    let mut terms = Vec::new();
    for (j, (teacher, head)) in teachers.iter().zip(&model.params.heads).enumerate() {
        let targets = teacher.targets(utterance_id)?;
        for &kind in cfg.losses.kinds() {
            let mut d_heads = model.params.zeros_like();
            let (loss, d_output) = match kind {
                LossKind::Reg => {
                    let r = loss_reg(output, &head.reg, &targets.aligned, frames)?;
                    d_heads.heads[j].reg = r.d_reg;
                    (r.loss, r.d_output)
                }
                LossKind::Kld | LossKind::Ce => {
                    let l = if kind == LossKind::Kld {
                        loss_kld(output, &head.label, &head.codewords, cfg.tau, &targets.soft, frames)?
                    } else {
                        loss_ce_hard(output, &head.label, &head.codewords, cfg.tau, &targets.hard, frames)?
                    };
                    d_heads.heads[j].label = l.d_label;
                    d_heads.heads[j].codewords = l.d_codewords;
                    (l.loss, l.d_output)
                }
            };
            terms.push(KdTerm {
                teacher: j,
                kind,
                loss,
                d_output,
                d_heads,
            });
        }
    }
    Ok(terms)
}

/// Stochastic choices of one training step.
#[derive(Debug, Clone)]
struct StepDraw {
    audio: Tensor,
    snr_db: Option<f64>,
    mask_audio: Vec<usize>,
    mask_video: Vec<usize>,
    modality: Modality,
}

fn draw_step(model: &StudentModel, utt: &Utterance, cfg: &TrainConfig, step: usize, masking: bool) -> Result<StepDraw> {
    let mut g = rng::stream(rng::derive_seed(cfg.seed, 0x5EED), step as u64);
    let (audio, snr_db) = if g.random::<f64>() < cfg.p_noise {
        let (lo, hi) = cfg.snr_range;
        let snr = if hi > lo { g.random_range(lo..hi) } else { lo };
        (mix_noise(&utt.clean_audio, snr, g.next_u64())?, Some(snr))
    } else {
        (utt.clean_audio.clone(), None)
    };
    let sc = &model.config;
    let t = utt.frames();
    let (mask_audio, mask_video) = if masking {
        (
            sample_mask(t, sc.mask_prob_audio, sc.mask_span_audio, g.next_u64()),
            sample_mask(t, sc.mask_prob_video, sc.mask_span_video, g.next_u64()),
        )
    } else {
        (Vec::new(), Vec::new())
    };
    let modality = draw_modality(sc.p_keep_both, sc.p_audio, &mut g);
    Ok(StepDraw {
        audio,
        snr_db,
        mask_audio,
        mask_video,
        modality,
    })
}

/// One pretraining update on a single utterance.
///
/// Every (teacher, loss) pair yields a gradient w.r.t. the encoder output;
/// those are aligned into one output gradient that is backpropagated once.
/// Each head receives its own loss gradient scaled by that loss' weight.
pub fn pretrain_step(
    model: &mut StudentModel,
    utt: &Utterance,
    teachers: &[PreparedTeacher],
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossReport> {
    let draw = draw_step(model, utt, cfg, step, true)?;
    let input = StudentInput {
        audio: &draw.audio,
        video: &utt.video,
        mask_audio: &draw.mask_audio,
        mask_video: &draw.mask_video,
        modality: draw.modality,
    };
    let frames = region_frames(cfg.kd_region, utt.frames(), &draw.mask_audio, &draw.mask_video)?;
    let pass = model.forward(input)?;
    let terms = kd_terms(model, &pass.output, &utt.id, teachers, cfg, &frames)?;

    if terms.iter().any(|t| !t.loss.is_finite()) {
        return Err(Error::NonFinite { step });
    }
    let out_grads: Vec<Tensor> = terms.iter().map(|t| t.d_output.clone()).collect();
    let agg = aligned_mtl_aggregate(&out_grads, cfg.eigen_floor)?;

    let mut grads = model.backward(&pass, &agg.gradient)?;
    for (term, &w) in terms.iter().zip(&agg.weights) {
        for (dst, src) in grads.heads.iter_mut().zip(&term.d_heads.heads) {
            dst.reg.axpy(w, &src.reg)?;
            dst.label.axpy(w, &src.label)?;
            dst.codewords.axpy(w, &src.codewords)?;
        }
    }
    model.params.axpy(-cfg.learning_rate, &grads)?;

    let components: Vec<LossComponent> = terms
        .iter()
        .zip(&agg.weights)
        .map(|(t, &w)| LossComponent {
            source: teachers[t.teacher].config.name.clone(),
            kind: t.kind.tag().into(),
            value: t.loss,
            weight: w,
        })
        .collect();
    let total = components.iter().map(|c| c.value).sum();
    Ok(LossReport {
        step,
        components,
        total,
        modality: draw.modality,
        snr_db: draw.snr_db,
    })
}

/// Index of the utterance visited at `step`: a fresh shuffle per pass over the corpus.
pub fn utterance_at(n: usize, seed: u64, step: usize) -> usize {
    let epoch = step / n;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(rng::derive_seed(seed, 0x0DE7), epoch as u64));
    order[step % n]
}

pub fn pretrain(
    model: &mut StudentModel,
    corpus: &Corpus,
    teachers: &[PreparedTeacher],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossReport),
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    if corpus.utterances.is_empty() {
        return Err(Error::Empty("pretrain corpus"));
    }
    let mut reports = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let utt = &corpus.utterances[utterance_at(corpus.utterances.len(), cfg.seed, step)];
        let report = pretrain_step(model, utt, teachers, cfg, step)?;
        on_step(&report);
        reports.push(report);
    }
    Ok(reports)
}

/// Mean frame-wise cross-entropy of `classifier(O)` with gradients.
fn classifier_loss(clf: &Classifier, output: &Tensor, labels: &[usize]) -> Result<(f64, Tensor, Classifier)> {
    let logits = clf.logits(output)?;
    let t = output.rows();
    let norm = 1.0 / t as f64;
    let mut d_logits = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= clf.num_units() {
            return Err(Error::shape("unit label", format!("< {}", clf.num_units()), y));
        }
        let p = softmax(logits.row(i), 1.0);
        loss -= p[y].max(PROB_FLOOR).ln();
        for (k, (d, &pk)) in d_logits.row_mut(i).iter_mut().zip(&p).enumerate() {
            *d = (pk - if k == y { 1.0 } else { 0.0 }) * norm;
        }
    }
    let grads = Classifier {
        weight: output.matmul_tn(&d_logits)?,
        bias: d_logits.sum_rows(),
    };
    Ok((loss * norm, d_logits.matmul_nt(&clf.weight)?, grads))
}

/// One finetuning update: frame classification plus `lambda` times the
/// summed distillation losses. The backbone stays fixed while `step < n_freeze`.
///
/// `teachers = None` (or `lambda = 0`) is plain supervised finetuning.
pub fn finetune_step(
    model: &mut StudentModel,
    classifier: &mut Classifier,
    utt: &Utterance,
    teachers: Option<&[PreparedTeacher]>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossReport> {
    let t = utt.frames();
    if utt.unit_labels.len() != t || t == 0 {
        return Err(Error::MissingLabels(utt.id.clone()));
    }
    let draw = draw_step(model, utt, cfg, step, false)?;
    let input = StudentInput {
        audio: &draw.audio,
        video: &utt.video,
        mask_audio: &[],
        mask_video: &[],
        modality: draw.modality,
    };
    let pass = model.forward(input)?;
    let (task_loss, mut d_output, clf_grads) = classifier_loss(classifier, &pass.output, &utt.unit_labels)?;
    let mut components = vec![LossComponent {
        source: "task".into(),
        kind: "ce".into(),
        value: task_loss,
        weight: 1.0,
    }];

    let mut head_grads = None;
    if let Some(teachers) = teachers.filter(|_| cfg.lambda > 0.0) {
        let frames: Vec<usize> = (0..t).collect();
        let terms = kd_terms(model, &pass.output, &utt.id, teachers, cfg, &frames)?;
        let mut hg = model.params.zeros_like();
        for term in &terms {
            d_output.axpy(cfg.lambda, &term.d_output)?;
            hg.axpy(cfg.lambda, &term.d_heads)?;
            components.push(LossComponent {
                source: teachers[term.teacher].config.name.clone(),
                kind: term.kind.tag().into(),
                value: term.loss,
                weight: cfg.lambda,
            });
        }
        head_grads = Some(hg);
    }

    if !components.iter().all(|c| c.value.is_finite()) {
        return Err(Error::NonFinite { step });
    }
    let lr = cfg.learning_rate;
    if step >= cfg.n_freeze {
        let grads = model.backward(&pass, &d_output)?;
        for ((_, p), (_, g)) in model.params.backbone_mut().into_iter().zip(grads.backbone()) {
            p.axpy(-lr, g)?;
        }
    }
    if let Some(hg) = head_grads {
        for (dst, src) in model.params.heads.iter_mut().zip(&hg.heads) {
            dst.reg.axpy(-lr, &src.reg)?;
            dst.label.axpy(-lr, &src.label)?;
            dst.codewords.axpy(-lr, &src.codewords)?;
        }
    }
    classifier.weight.axpy(-lr, &clf_grads.weight)?;
    classifier.bias.axpy(-lr, &clf_grads.bias)?;

    let total = task_loss
        + cfg.lambda
            * components[1..].iter().map(|c| c.value).sum::<f64>();
    Ok(LossReport {
        step,
        components,
        total,
        modality: draw.modality,
        snr_db: draw.snr_db,
    })
}

pub fn finetune(
    model: &mut StudentModel,
    classifier: &mut Classifier,
    corpus: &Corpus,
    teachers: Option<&[PreparedTeacher]>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossReport),
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    if corpus.utterances.is_empty() {
        return Err(Error::Empty("finetune corpus"));
    }
    let mut reports = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let utt = &corpus.utterances[utterance_at(corpus.utterances.len(), cfg.seed, step)];
        let report = finetune_step(model, classifier, utt, teachers, cfg, step)?;
        on_step(&report);
        reports.push(report);
    }
    Ok(reports)
}

/// Fraction of frames whose argmax class matches the unit label.
///
/// `snr_db` mixes noise into the audio (seeded per utterance) before encoding.
pub fn frame_accuracy(
    model: &StudentModel,
    classifier: &Classifier,
    corpus: &Corpus,
    modality: Modality,
    snr_db: Option<f64>,
    seed: u64,
) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for (i, utt) in corpus.utterances.iter().enumerate() {
        let audio = match snr_db {
            Some(s) => mix_noise(&utt.clean_audio, s, rng::derive_seed(seed, i as u64))?,
            None => utt.clean_audio.clone(),
        };
        let pass = model.forward(StudentInput::clean(&audio, &utt.video).with_modality(modality))?;
        let logits = classifier.logits(&pass.output)?;
        for (t, &y) in utt.unit_labels.iter().enumerate() {
            let row = logits.row(t);
            let pred = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            hits += usize::from(pred == y);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("frame_accuracy corpus"));
    }
    Ok(hits as f64 / total as f64)
}
