mod common;

use avkd::distill::{
    aligned_columns, aligned_mtl_aggregate, finetune_step, label_predictions, loss_ce_hard, loss_kld,
    loss_reg, pretrain_step, KdRegion,
};
use avkd::pipeline::new_classifier;
use avkd::student::{Modality, StudentInput};
use avkd::teacher::{aggregate_layers, align_frames, oracle_forward};
use avkd::{Error, Tensor};
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;

#[test]
fn pretrain_step_is_deterministic() {
    let ws = tiny_workspace(3);
    let cfg = train_cfg("reg+kld", KdRegion::All);
    let teachers = ws.teachers(cfg.tau_prime).unwrap();
    let mut a = ws.new_student().unwrap();
    let mut b = ws.new_student().unwrap();
    for step in 0..5 {
        let utt = &ws.corpus.utterances[step % ws.corpus.utterances.len()];
        let ra = pretrain_step(&mut a, utt, &teachers, &cfg, step).unwrap();
        let rb = pretrain_step(&mut b, utt, &teachers, &cfg, step).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(ra.csv_row(), rb.csv_row());
    }
    assert_eq!(a.params, b.params);
}

#[test]
fn report_components_are_finite_and_nonnegative() {
    let ws = tiny_workspace(4);
    let cfg = train_cfg("reg+kld", KdRegion::All);
    let teachers = ws.teachers(cfg.tau_prime).unwrap();
    let mut m = ws.new_student().unwrap();
    for step in 0..10 {
        let utt = &ws.corpus.utterances[step % ws.corpus.utterances.len()];
        let r = pretrain_step(&mut m, utt, &teachers, &cfg, step).unwrap();
        assert_eq!(r.components.len(), 4);
        for c in &r.components {
            assert!(c.value.is_finite() && c.value >= 0.0, "{c:?}");
            assert!(c.weight.is_finite());
        }
        assert!((r.total - r.components.iter().map(|c| c.value).sum::<f64>()).abs() < 1e-12);
    }
}

#[test]
fn unmasked_all_region_matches_plain_loss() {
    let mut run = tiny_run();
    run.student.mask_prob_audio = 0.0;
    run.student.mask_prob_video = 0.0;
    run.student.p_keep_both = 1.0;
    let ws = avkd::pipeline::Workspace::build(&run).unwrap();
    let mut cfg = train_cfg("reg+kld", KdRegion::All);
    cfg.p_noise = 0.0;
    let teachers = ws.teachers(cfg.tau_prime).unwrap();
    let utt = &ws.corpus.utterances[1];
    let mut m = ws.new_student().unwrap();
    let expected = total_loss(
        &m,
        utt,
        StudentInput::clean(&utt.clean_audio, &utt.video),
        &teachers,
        &cfg,
        &(0..utt.frames()).collect::<Vec<_>>(),
    );
    let r = pretrain_step(&mut m, utt, &teachers, &cfg, 0).unwrap();
    assert_eq!(r.total, expected);

    cfg.kd_region = KdRegion::MaskedOnly;
    assert!(matches!(pretrain_step(&mut m, utt, &teachers, &cfg, 1), Err(Error::EmptyRegion)));
}

#[test]
fn region_loss_is_mean_of_frame_losses() {
    let ws = tiny_workspace(5);
    let cfg = train_cfg("reg+kld", KdRegion::MaskedOnly);
    let teachers = ws.teachers(cfg.tau_prime).unwrap();
    let m = ws.new_student().unwrap();
    let utt = &ws.corpus.utterances[0];
    let input = StudentInput::clean(&utt.clean_audio, &utt.video);
    let region = [0usize, 2, 3];
    let joint = total_loss(&m, utt, input, &teachers, &cfg, &region);
    let single: f64 = region
        .iter()
        .map(|&t| total_loss(&m, utt, input, &teachers, &cfg, &[t]))
        .sum::<f64>()
        / region.len() as f64;
    assert!((joint - single).abs() < 1e-12, "{joint} {single}");
}

#[test]
fn joint_zero_of_both_objectives() {
    let run = tiny_run();
    let ws = avkd::pipeline::Workspace::build(&run).unwrap();
    let m = ws.new_student().unwrap();
    let utt = &ws.corpus.utterances[0];
    let o = m.forward(StudentInput::clean(&utt.clean_audio, &utt.video)).unwrap().output;
    let spec = &run.teachers[0].teacher;
    let h = aggregate_layers(&oracle_forward(&utt.clean_audio, spec, spec.seed)[spec.num_layers - spec.last_k..]).unwrap();
    let aligned = align_frames(&h, utt.frames(), spec.frame_rate_ratio).unwrap();

    // minimum-norm interpolating head: W = O^T (O O^T)^-1 H
    let gram = o.matmul_nt(&o).unwrap();
    let inv = nalgebra_inverse(&gram);
    let w = o.matmul_tn(&inv.matmul(&aligned).unwrap()).unwrap();
    let frames: Vec<usize> = (0..utt.frames()).collect();
    let reg = loss_reg(&o, &w, &aligned, &frames).unwrap();

    let head = &m.params.heads[0];
    let pred = label_predictions(&o, &head.label, &head.codewords, 0.1).unwrap();
    let kld = loss_kld(&o, &head.label, &head.codewords, 0.1, &pred, &frames).unwrap();
    assert!(reg.loss < 1e-18, "{}", reg.loss);
    assert!(kld.loss.abs() < 1e-12, "{}", kld.loss);
    assert!(reg.loss + kld.loss < 1e-12);
}

fn nalgebra_inverse(m: &Tensor) -> Tensor {
    let n = m.rows();
    let dm = nalgebra::DMatrix::from_row_slice(n, n, m.data());
    let inv = dm.try_inverse().unwrap();
    let mut out = Tensor::zeros(&[n, n]);
    for r in 0..n {
        for c in 0..n {
            out.set(r, c, inv[(r, c)]);
        }
    }
    out
}

#[test]
fn one_hot_soft_labels_coincide_with_ce() {
    let ws = tiny_workspace(6);
    let m = ws.new_student().unwrap();
    let utt = &ws.corpus.utterances[2];
    let o = m.forward(StudentInput::clean(&utt.clean_audio, &utt.video)).unwrap().output;
    let teachers = ws.teachers(1e-6).unwrap();
    let t = teachers[0].targets(&utt.id).unwrap();
    let head = &m.params.heads[0];
    let frames: Vec<usize> = (0..utt.frames()).collect();
    let mut one_hot = Tensor::zeros(t.soft.shape());
    for (i, &k) in t.hard.iter().enumerate() {
        one_hot.set(i, k, 1.0);
    }
    let kld = loss_kld(&o, &head.label, &head.codewords, 0.1, &one_hot, &frames).unwrap();
    let ce = loss_ce_hard(&o, &head.label, &head.codewords, 0.1, &t.hard, &frames).unwrap();
    assert!(ce.loss >= kld.loss - 1e-12);
    assert!((ce.loss - kld.loss).abs() < 1e-9);
    let kld_soft = loss_kld(&o, &head.label, &head.codewords, 0.1, &t.soft, &frames).unwrap();
    assert!((ce.loss - kld_soft.loss).abs() < 1e-3);
}

#[test]
fn duplicated_loss_keeps_update_direction() {
    let ws = tiny_workspace(7);
    let cfg = train_cfg("reg", KdRegion::All);
    let teachers = ws.teachers(cfg.tau_prime).unwrap();
    let m = ws.new_student().unwrap();
    let utt = &ws.corpus.utterances[0];
    let pass = m.forward(StudentInput::clean(&utt.clean_audio, &utt.video)).unwrap();
    let frames: Vec<usize> = (0..utt.frames()).collect();
    let head = &m.params.heads[0];
    let aligned = &teachers[0].targets(&utt.id).unwrap().aligned;
    let g = loss_reg(&pass.output, &head.reg, aligned, &frames).unwrap().d_output;
    let single = aligned_mtl_aggregate(std::slice::from_ref(&g), 1e-8).unwrap();
    let double = aligned_mtl_aggregate(&[g.clone(), g.clone()], 1e-8).unwrap();
    assert_eq!(single.gradient, g);
    assert!((double.weights[0] - double.weights[1]).abs() < 1e-12);
    let cos = double.gradient.dot(&g) / (double.gradient.norm() * g.norm());
    assert!((cos - 1.0).abs() < 1e-12);
    assert_eq!(double.rank, 1);
}

#[test]
fn lambda_zero_is_plain_supervised_finetuning() {
    let ws = tiny_workspace(8);
    let mut cfg = ws.run.finetune.clone();
    cfg.lambda = 0.0;
    let teachers = ws.teachers(cfg.tau_prime).unwrap();
    let mut a = ws.new_student().unwrap();
    let mut b = ws.new_student().unwrap();
    let mut ca = new_classifier(&a, 3, 1);
    let mut cb = new_classifier(&b, 3, 1);
    for step in 0..6 {
        let utt = &ws.corpus.utterances[step % 4];
        let ra = finetune_step(&mut a, &mut ca, utt, Some(&teachers), &cfg, step).unwrap();
        let rb = finetune_step(&mut b, &mut cb, utt, None, &cfg, step).unwrap();
        assert_eq!(ra.total.to_bits(), rb.total.to_bits());
    }
    assert_eq!(a.params, b.params);
    assert_eq!(ca, cb);
}

#[test]
fn frozen_backbone_is_untouched() {
    let ws = tiny_workspace(9);
    let mut cfg = ws.run.finetune.clone();
    cfg.n_freeze = 3;
    let teachers = ws.teachers(cfg.tau_prime).unwrap();
    let mut m = ws.new_student().unwrap();
    let mut clf = new_classifier(&m, 3, 2);
    let before = m.params.clone();
    let clf_before = clf.clone();
    for step in 0..3 {
        finetune_step(&mut m, &mut clf, &ws.corpus.utterances[step], Some(&teachers), &cfg, step).unwrap();
    }
    for ((name, a), (_, b)) in m.params.backbone().into_iter().zip(before.backbone()) {
        assert_eq!(a, b, "{name} moved while frozen");
    }
    assert_ne!(clf, clf_before);
    assert_ne!(m.params.heads, before.heads);
    finetune_step(&mut m, &mut clf, &ws.corpus.utterances[3], Some(&teachers), &cfg, 3).unwrap();
    assert_ne!(m.params.in_w, before.in_w);
}

#[test]
fn finetune_requires_labels() {
    let ws = tiny_workspace(10);
    let cfg = ws.run.finetune.clone();
    let mut m = ws.new_student().unwrap();
    let mut clf = new_classifier(&m, 3, 2);
    let mut utt = ws.corpus.utterances[0].clone();
    utt.unit_labels.clear();
    let err = finetune_step(&mut m, &mut clf, &utt, None, &cfg, 0).unwrap_err();
    assert!(matches!(err, Error::MissingLabels(_)));
}

#[test]
fn mask_embeddings_receive_gradient() {
    let ws = tiny_workspace(11);
    let cfg = train_cfg("reg+kld", KdRegion::All);
    let teachers = ws.teachers(cfg.tau_prime).unwrap();
    let m = ws.new_student().unwrap();
    let utt = &ws.corpus.utterances[0];
    let input = StudentInput {
        audio: &utt.clean_audio,
        video: &utt.video,
        mask_audio: &[0, 1],
        mask_video: &[2],
        modality: Modality::Both,
    };
    let (_, g) = full_gradient(&m, utt, input, &teachers, &cfg, &[0, 1, 2, 3]);
    assert!(g.mask_audio.norm() > 0.0);
    assert!(g.mask_video.norm() > 0.0);
}

#[test]
fn full_model_gradients_every_loss_kind() {
    let ws = tiny_workspace(12);
    let utt = &ws.corpus.utterances[0];
    for (losses, modality) in [("reg", Modality::Both), ("kld", Modality::AudioOnly), ("ce", Modality::VideoOnly)] {
        let cfg = train_cfg(losses, KdRegion::All);
        let teachers = ws.teachers(cfg.tau_prime).unwrap();
        let m = ws.new_student().unwrap();
        let input = StudentInput {
            audio: &utt.clean_audio,
            video: &utt.video,
            mask_audio: &[1],
            mask_video: &[2],
            modality,
        };
        let (err, name) = worst_gradient_error(&m, utt, input, &teachers, &cfg, &[0, 1, 2, 3]);
        assert!(err < 1e-4, "{losses}: {name} {err}");
        assert_eq!(cfg.losses.kinds().len(), 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aligned_columns_are_isotropic(k in 2usize..=4, seed in any::<u64>()) {
        let mut g = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let grads: Vec<Tensor> = (0..k).map(|_| Tensor::randn(&[9], 1.0, &mut g)).collect();
        let cols = aligned_columns(&grads, 1e-8).unwrap();
        let agg = aligned_mtl_aggregate(&grads, 1e-8).unwrap();
        let mut sum = Tensor::zeros(&[9]);
        for c in &cols {
            sum.axpy(1.0, c).unwrap();
        }
        prop_assert!(sum.max_abs_diff(&agg.gradient) < 1e-10 * (1.0 + agg.gradient.norm()));
        for i in 0..k {
            for j in 0..k {
                let v = cols[i].dot(&cols[j]);
                let expect = if i == j { agg.sigma_min * agg.sigma_min } else { 0.0 };
                prop_assert!((v - expect).abs() < 1e-8 * agg.sigma_min * agg.sigma_min);
            }
        }
    }
}
