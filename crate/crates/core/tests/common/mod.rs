#![allow(dead_code)]

use avkd::config::{RunConfig, TeacherSpec};
use avkd::distill::{kd_terms, KdRegion, LossSet, PreparedTeacher, TrainConfig};
use avkd::pipeline::Workspace;
use avkd::student::{StudentInput, StudentModel, StudentParams};
use avkd::synthdata::{SynthCorpusConfig, Utterance};
use avkd::teacher::TeacherConfig;
use avkd::Tensor;

/// A run small enough for finite differences: T = 4, D_f = 6, D_o = 8,
/// one block with two attention heads, and two teachers (r = 2 and r = 1).
pub fn tiny_run() -> RunConfig {
    let mut run = RunConfig::default();
    run.corpus = SynthCorpusConfig {
        num_utterances: 4,
        frames_per_utterance: 4,
        num_units: 3,
        audio_dim: 5,
        video_dim: 4,
        unit_dwell: 2.0,
        ..SynthCorpusConfig::default()
    };
    run.finetune_utterances = 4;
    run.eval_utterances = 2;
    run.teachers = vec![
        TeacherSpec {
            teacher: TeacherConfig {
                name: "wide".into(),
                num_layers: 3,
                hidden_dim: 3,
                last_k: 2,
                frame_rate_ratio: 2,
                seed: 11,
            },
            num_clusters: 3,
            label_dim: 3,
        },
        TeacherSpec {
            teacher: TeacherConfig {
                name: "narrow".into(),
                num_layers: 2,
                hidden_dim: 4,
                last_k: 1,
                frame_rate_ratio: 1,
                seed: 12,
            },
            num_clusters: 3,
            label_dim: 2,
        },
    ];
    run.student.frontend_dim = 6;
    run.student.encoder_dim = 8;
    run.student.num_blocks = 1;
    run.student.num_heads = 2;
    run.student.ff_dim = 10;
    run.student.mask_span_audio = 2;
    run.student.mask_span_video = 1;
    run.pretrain.steps = 20;
    run.finetune.steps = 10;
    run
}

pub fn tiny_workspace(seed: u64) -> Workspace {
    Workspace::build(&tiny_run().with_seed(seed)).unwrap()
}

pub fn train_cfg(losses: &str, region: KdRegion) -> TrainConfig {
    TrainConfig {
        losses: losses.parse::<LossSet>().unwrap(),
        kd_region: region,
        ..TrainConfig::default()
    }
}

/// Summed distillation loss and its gradient for every parameter, heads included.
pub fn full_gradient(
    model: &StudentModel,
    utt: &Utterance,
    input: StudentInput<'_>,
    teachers: &[PreparedTeacher],
    cfg: &TrainConfig,
    frames: &[usize],
) -> (f64, StudentParams) {
    let pass = model.forward(input).unwrap();
    let terms = kd_terms(model, &pass.output, &utt.id, teachers, cfg, frames).unwrap();
    let mut d_output = Tensor::zeros(pass.output.shape());
    let mut loss = 0.0;
    let mut heads = model.params.zeros_like();
    for t in &terms {
        loss += t.loss;
        d_output.axpy(1.0, &t.d_output).unwrap();
        heads.axpy(1.0, &t.d_heads).unwrap();
    }
    let mut grads = model.backward(&pass, &d_output).unwrap();
    grads.axpy(1.0, &heads).unwrap();
    (loss, grads)
}

pub fn total_loss(
    model: &StudentModel,
    utt: &Utterance,
    input: StudentInput<'_>,
    teachers: &[PreparedTeacher],
    cfg: &TrainConfig,
    frames: &[usize],
) -> f64 {
    let pass = model.forward(input).unwrap();
    kd_terms(model, &pass.output, &utt.id, teachers, cfg, frames)
        .unwrap()
        .iter()
        .map(|t| t.loss)
        .sum()
}

/// Worst relative finite-difference error over every parameter tensor.
pub fn worst_gradient_error(
    model: &StudentModel,
    utt: &Utterance,
    input: StudentInput<'_>,
    teachers: &[PreparedTeacher],
    cfg: &TrainConfig,
    frames: &[usize],
) -> (f64, String) {
    let (_, grads) = full_gradient(model, utt, input, teachers, cfg, frames);
    let mut worst = (0.0, String::new());
    for (name, analytic) in grads.named() {
        let current = model.params.named().into_iter().find(|(n, _)| *n == name).unwrap().1.clone();
        let f = |x: &Tensor| {
            let mut m = model.clone();
            let slot = m.params.named_mut().into_iter().find(|(n, _)| *n == name).unwrap().1;
            *slot = x.clone();
            total_loss(&m, utt, input, teachers, cfg, frames)
        };
        let err = avkd::numerics::check_gradient(f, &current, analytic);
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    worst
}
