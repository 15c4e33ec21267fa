//! Distillation losses with gradients w.r.t. the encoder output and the head
//! parameters. All losses average over the selected student frames; with a
//! frame-rate ratio `r > 1` every associated teacher frame adds its own term
//! to its student frame.

use crate::error::{Error, Result};
use crate::numerics::{cosine_rows, dot, kl_divergence, softmax, Tensor, PROB_FLOOR};

#[derive(Debug, Clone)]
pub struct RegLoss {
    pub loss: f64,
    pub d_output: Tensor,
    pub d_reg: Tensor,
}

#[derive(Debug, Clone)]
pub struct LabelLoss {
    pub loss: f64,
    pub d_output: Tensor,
    pub d_label: Tensor,
    pub d_codewords: Tensor,
}

fn check_frames(frames: &[usize], t: usize) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::EmptyRegion);
    }
    if let Some(&bad) = frames.iter().find(|&&f| f >= t) {
        return Err(Error::shape("loss frame", format!("< {t}"), bad));
    }
    Ok(())
}

/// `(1/|F|) * sum_{t in F} |o_t W - h_t|^2` where `h_t` is the aligned teacher row.
pub fn loss_reg(output: &Tensor, reg: &Tensor, aligned: &Tensor, frames: &[usize]) -> Result<RegLoss> {
    check_frames(frames, output.rows())?;
    let pred = output.matmul(reg)?;
    if pred.shape() != aligned.shape() {
        return Err(Error::shape(
            "loss_reg",
            format!("{:?}", pred.shape()),
            format!("{:?}", aligned.shape()),
        ));
    }
    let norm = 1.0 / frames.len() as f64;
    let mut d_pred = Tensor::zeros(pred.shape());
    let mut loss = 0.0;
    for &t in frames {
        for ((dp, &p), &h) in d_pred.row_mut(t).iter_mut().zip(pred.row(t)).zip(aligned.row(t)) {
            let diff = p - h;
            loss += diff * diff;
            *dp = 2.0 * diff * norm;
        }
    }
    Ok(RegLoss {
        loss: loss * norm,
        d_output: d_pred.matmul_nt(reg)?,
        d_reg: output.matmul_tn(&d_pred)?,
    })
}

/// Label-head predictions `softmax(cos(u, E) / tau)` for every `(frame, sub-frame)`,
/// as rows `t * r + s` of a `[T*r x N]` matrix.
pub fn label_predictions(output: &Tensor, label: &Tensor, codewords: &Tensor, tau: f64) -> Result<Tensor> {
    let de = codewords.cols();
    let u = output.matmul(label)?;
    let r = u.cols() / de;
    let mut out = Tensor::zeros(&[output.rows() * r, codewords.rows()]);
    for t in 0..output.rows() {
        for s in 0..r {
            let cos = cosine_rows(&u.row(t)[s * de..(s + 1) * de], codewords);
            let z: Vec<f64> = cos.iter().map(|c| c / tau).collect();
            out.row_mut(t * r + s).copy_from_slice(&softmax(&z, 1.0));
        }
    }
    Ok(out)
}

/// What the label head is scored against.
#[derive(Debug, Clone, Copy)]
pub enum LabelTarget<'a> {
    /// Soft labels, rows `t * r + s`; scored with `KL(target || prediction)`.
    Soft(&'a Tensor),
    /// Nearest-centroid indices, entries `t * r + s`; scored with cross-entropy.
    Hard(&'a [usize]),
}

/// Shared body of [`loss_kld`] and [`loss_ce_hard`].
pub fn loss_label(
    output: &Tensor,
    label: &Tensor,
    codewords: &Tensor,
    tau: f64,
    target: LabelTarget<'_>,
    frames: &[usize],
) -> Result<LabelLoss> {
    check_frames(frames, output.rows())?;
    let (n, de) = (codewords.rows(), codewords.cols());
    if label.rows() != output.cols() || !label.cols().is_multiple_of(de) {
        return Err(Error::shape(
            "loss_label(label head)",
            format!("[{} x r*{de}]", output.cols()),
            format!("{:?}", label.shape()),
        ));
    }
    let r = label.cols() / de;
    let rows = output.rows() * r;
    match target {
        LabelTarget::Soft(l) if l.rows() != rows || l.cols() != n => {
            return Err(Error::shape("loss_kld(target)", format!("[{rows} x {n}]"), format!("{:?}", l.shape())));
        }
        LabelTarget::Hard(h) if h.len() != rows => {
            return Err(Error::shape("loss_ce_hard(target)", rows, h.len()));
        }
        _ => {}
    }

    let norm = 1.0 / frames.len() as f64;
    let u = output.matmul(label)?;
    let e_norms: Vec<f64> = (0..n).map(|i| dot(codewords.row(i), codewords.row(i)).sqrt()).collect();
    let mut du_all = Tensor::zeros(u.shape());
    let mut d_codewords = Tensor::zeros(codewords.shape());
    let mut loss = 0.0;

    for &t in frames {
        for s in 0..r {
            let row = t * r + s;
            let uv = &u.row(t)[s * de..(s + 1) * de];
            let cos = cosine_rows(uv, codewords);
            let z: Vec<f64> = cos.iter().map(|c| c / tau).collect();
            let p = softmax(&z, 1.0);

            // dL/dz for the chosen objective
            let dz: Vec<f64> = match target {
                LabelTarget::Soft(l) => {
                    let q = l.row(row);
                    loss += kl_divergence(q, &p);
                    let live: f64 = q
                        .iter()
                        .zip(&p)
                        .filter(|(_, &pi)| pi > PROB_FLOOR)
                        .map(|(&qi, _)| qi.max(PROB_FLOOR))
                        .sum();
                    (0..n)
                        .map(|k| {
                            let own = if p[k] > PROB_FLOOR { q[k].max(PROB_FLOOR) } else { 0.0 };
                            p[k] * live - own
                        })
                        .collect()
                }
                LabelTarget::Hard(h) => {
                    let c = h[row];
                    loss -= p[c].max(PROB_FLOOR).ln();
                    let live = if p[c] > PROB_FLOOR { 1.0 } else { 0.0 };
                    (0..n)
                        .map(|k| live * (p[k] - if k == c { 1.0 } else { 0.0 }))
                        .collect()
                }
            };

            let un = dot(uv, uv).sqrt();
            if un == 0.0 {
                continue;
            }
            let du = &mut du_all.row_mut(t)[s * de..(s + 1) * de];
            for i in 0..n {
                if e_norms[i] == 0.0 {
                    continue;
                }
                let dc = dz[i] * norm / tau;
                if dc == 0.0 {
                    continue;
                }
                let e = codewords.row(i);
                let inv = 1.0 / (un * e_norms[i]);
                for d in 0..de {
                    du[d] += dc * (e[d] * inv - cos[i] * uv[d] / (un * un));
                }
                let de_row = d_codewords.row_mut(i);
                for d in 0..de {
                    de_row[d] += dc * (uv[d] * inv - cos[i] * e[d] / (e_norms[i] * e_norms[i]));
                }
            }
        }
    }
    Ok(LabelLoss {
        loss: loss * norm,
        d_output: du_all.matmul_nt(label)?,
        d_label: output.matmul_tn(&du_all)?,
        d_codewords,
    })
}

/// `(1/|F|) * sum KL(l_soft || softmax(cos(o_t U, E) / tau))`.
pub fn loss_kld(
    output: &Tensor,
    label: &Tensor,
    codewords: &Tensor,
    tau: f64,
    soft: &Tensor,
    frames: &[usize],
) -> Result<LabelLoss> {
    loss_label(output, label, codewords, tau, LabelTarget::Soft(soft), frames)
}

/// Cross-entropy of the same prediction against hard cluster labels.
pub fn loss_ce_hard(
    output: &Tensor,
    label: &Tensor,
    codewords: &Tensor,
    tau: f64,
    hard: &[usize],
    frames: &[usize],
) -> Result<LabelLoss> {
    loss_label(output, label, codewords, tau, LabelTarget::Hard(hard), frames)
}
