use crate::error::{Error, Result};
use crate::numerics::{softmax, Tensor};
use crate::rng;

use super::corrupt::{apply_mask, Modality};
use super::params::{Block, StudentParams};
use super::StudentConfig;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// One utterance as seen by the encoder, after noise augmentation.
#[derive(Debug, Clone, Copy)]
pub struct StudentInput<'a> {
    pub audio: &'a Tensor,
    pub video: &'a Tensor,
    pub mask_audio: &'a [usize],
    pub mask_video: &'a [usize],
    pub modality: Modality,
}

impl<'a> StudentInput<'a> {
    /// No masking, both streams.
    pub fn clean(audio: &'a Tensor, video: &'a Tensor) -> Self {
        Self {
            audio,
            video,
            mask_audio: &[],
            mask_video: &[],
            modality: Modality::Both,
        }
    }

    pub fn with_modality(self, modality: Modality) -> Self {
        Self { modality, ..self }
    }
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    ln1: LnCache,
    n1: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
    ctx: Tensor,
    ln2: LnCache,
    n2: Tensor,
    u1: Tensor,
    g: Tensor,
}

/// Activations of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    audio: Tensor,
    video: Tensor,
    fa: Tensor,
    fv: Tensor,
    mask_audio: Vec<usize>,
    mask_video: Vec<usize>,
    pub modality: Modality,
    x0: Tensor,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    /// Hidden states: index 0 is the embedded input, index `b + 1` the output of block `b`.
    pub states: Vec<Tensor>,
    /// Encoder output `O`, `[T x D_o]`.
    pub output: Tensor,
}

impl ForwardPass {
    pub fn frames(&self) -> usize {
        self.output.rows()
    }
}

fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> (Tensor, LnCache) {
    let (t, d) = (x.rows(), x.cols());
    let mut xhat = Tensor::zeros(&[t, d]);
    let mut y = Tensor::zeros(&[t, d]);
    let mut inv_std = Vec::with_capacity(t);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for c in 0..d {
            let h = (row[c] - mean) * is;
            xhat.set(i, c, h);
            y.set(i, c, gain.data()[c] * h + bias.data()[c]);
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns `dx` and accumulates `dgain`, `dbias`.
fn layer_norm_backward(dy: &Tensor, gain: &Tensor, cache: &LnCache, dgain: &mut Tensor, dbias: &mut Tensor) -> Tensor {
    let (t, d) = (dy.rows(), dy.cols());
    let mut dx = Tensor::zeros(&[t, d]);
    let mut dxhat = vec![0.0; d];
    for i in 0..t {
        let xh = cache.xhat.row(i);
        let g = dy.row(i);
        for c in 0..d {
            dgain.data_mut()[c] += g[c] * xh[c];
            dbias.data_mut()[c] += g[c];
            dxhat[c] = g[c] * gain.data()[c];
        }
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let out = dx.row_mut(i);
        for c in 0..d {
            out[c] = cache.inv_std[i] * (dxhat[c] - m1 - xh[c] * m2);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    x.matmul(w)
        .and_then(|y| y.add_row_vector(b))
        .expect("parameter shapes fixed at construction")
}

fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[t, d]);
    for pos in 0..t {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            pe.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

fn block_forward(block: &Block, x: &Tensor, num_heads: usize) -> (Tensor, BlockCache) {
    let (t, d) = (x.rows(), x.cols());
    let dh = d / num_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (n1, ln1) = layer_norm(x, &block.ln1_gain, &block.ln1_bias);
    let q = linear(&n1, &block.wq, &block.bq);
    let k = n1.matmul(&block.wk).expect("wk shape");
    let v = linear(&n1, &block.wv, &block.bv);

    let mut ctx = Tensor::zeros(&[t, d]);
    let mut probs = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (qh, kh, vh) = (q.columns(h * dh, dh), k.columns(h * dh, dh), v.columns(h * dh, dh));
        let scores = qh.matmul_nt(&kh).expect("head shapes").scale(scale);
        let mut p = Tensor::zeros(&[t, t]);
        for i in 0..t {
            p.row_mut(i).copy_from_slice(&softmax(scores.row(i), 1.0));
        }
        ctx.set_columns(h * dh, &p.matmul(&vh).expect("head shapes"));
        probs.push(p);
    }
    let attn = linear(&ctx, &block.wo, &block.bo);
    let hmid = x.add(&attn).expect("residual shape");

    let (n2, ln2) = layer_norm(&hmid, &block.ln2_gain, &block.ln2_bias);
    let u1 = linear(&n2, &block.w1, &block.b1);
    let g = u1.map(gelu);
    let ff = linear(&g, &block.w2, &block.b2);
    let y = hmid.add(&ff).expect("residual shape");
    (
        y,
        BlockCache {
            ln1,
            n1,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            n2,
            u1,
            g,
        },
    )
}

/// Backpropagates `dy` through one block, accumulating into `grad`; returns `dx`.
fn block_backward(block: &Block, cache: &BlockCache, dy: &Tensor, num_heads: usize, grad: &mut Block) -> Tensor {
    let (t, d) = (dy.rows(), dy.cols());
    let dh = d / num_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // feed-forward branch
    grad.w2.axpy(1.0, &cache.g.matmul_tn(dy).unwrap()).unwrap();
    grad.b2.axpy(1.0, &dy.sum_rows()).unwrap();
    let dg = dy.matmul_nt(&block.w2).unwrap();
    let du1 = dg.mul(&cache.u1.map(gelu_grad)).unwrap();
    grad.w1.axpy(1.0, &cache.n2.matmul_tn(&du1).unwrap()).unwrap();
    grad.b1.axpy(1.0, &du1.sum_rows()).unwrap();
    let dn2 = du1.matmul_nt(&block.w1).unwrap();
    let mut dh_mid = dy.clone();
    let dln2 = layer_norm_backward(&dn2, &block.ln2_gain, &cache.ln2, &mut grad.ln2_gain, &mut grad.ln2_bias);
    dh_mid.axpy(1.0, &dln2).unwrap();

    // attention branch
    grad.wo.axpy(1.0, &cache.ctx.matmul_tn(&dh_mid).unwrap()).unwrap();
    grad.bo.axpy(1.0, &dh_mid.sum_rows()).unwrap();
    let dctx = dh_mid.matmul_nt(&block.wo).unwrap();

    let mut dq = Tensor::zeros(&[t, d]);
    let mut dk = Tensor::zeros(&[t, d]);
    let mut dv = Tensor::zeros(&[t, d]);
    for h in 0..num_heads {
        let p = &cache.probs[h];
        let (qh, kh, vh) = (
            cache.q.columns(h * dh, dh),
            cache.k.columns(h * dh, dh),
            cache.v.columns(h * dh, dh),
        );
        let dctx_h = dctx.columns(h * dh, dh);
        let dp = dctx_h.matmul_nt(&vh).unwrap();
        dv.set_columns(h * dh, &p.matmul_tn(&dctx_h).unwrap());
        let mut ds = Tensor::zeros(&[t, t]);
        for i in 0..t {
            let (pr, dpr) = (p.row(i), dp.row(i));
            let inner: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
            for (o, (&pv, &dpv)) in ds.row_mut(i).iter_mut().zip(pr.iter().zip(dpr)) {
                *o = pv * (dpv - inner) * scale;
            }
        }
        dq.set_columns(h * dh, &ds.matmul(&kh).unwrap());
        dk.set_columns(h * dh, &ds.matmul_tn(&qh).unwrap());
    }
    grad.wq.axpy(1.0, &cache.n1.matmul_tn(&dq).unwrap()).unwrap();
    grad.bq.axpy(1.0, &dq.sum_rows()).unwrap();
    grad.wk.axpy(1.0, &cache.n1.matmul_tn(&dk).unwrap()).unwrap();
    grad.wv.axpy(1.0, &cache.n1.matmul_tn(&dv).unwrap()).unwrap();
    grad.bv.axpy(1.0, &dv.sum_rows()).unwrap();
    let mut dn1 = dq.matmul_nt(&block.wq).unwrap();
    dn1.axpy(1.0, &dk.matmul_nt(&block.wk).unwrap()).unwrap();
    dn1.axpy(1.0, &dv.matmul_nt(&block.wv).unwrap()).unwrap();

    let mut dx = dh_mid;
    let dln1 = layer_norm_backward(&dn1, &block.ln1_gain, &cache.ln1, &mut grad.ln1_gain, &mut grad.ln1_bias);
    dx.axpy(1.0, &dln1).unwrap();
    dx
}

/// Student parameters plus the most recent cached forward pass.
#[derive(Debug, Clone)]
pub struct StudentModel {
    pub config: StudentConfig,
    pub params: StudentParams,
    last_pass: Option<ForwardPass>,
}

impl StudentModel {
    pub fn new(config: StudentConfig) -> Result<Self> {
        config.validate()?;
        let mut g = rng::stream(config.seed, 0);
        let params = StudentParams::init(&config, &mut g);
        Ok(Self {
            config,
            params,
            last_pass: None,
        })
    }

    pub fn from_params(config: StudentConfig, params: StudentParams) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            params,
            last_pass: None,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_blocks + 1
    }

    /// Frontend features `(F_a, F_v)`, each `[T x D_f]`.
    pub fn frontend_forward(&self, audio: &Tensor, video: &Tensor) -> Result<(Tensor, Tensor)> {
        let c = &self.config;
        if audio.cols() != c.audio_dim {
            return Err(Error::shape("frontend_forward(audio)", c.audio_dim, audio.cols()));
        }
        if video.cols() != c.video_dim {
            return Err(Error::shape("frontend_forward(video)", c.video_dim, video.cols()));
        }
        if audio.rows() != video.rows() {
            return Err(Error::shape("frontend_forward(frames)", audio.rows(), video.rows()));
        }
        let p = &self.params;
        let fa = linear(audio, &p.audio_w, &p.audio_b).map(f64::tanh);
        let fv = linear(video, &p.video_w, &p.video_b).map(f64::tanh);
        Ok((fa, fv))
    }

    pub fn forward(&self, input: StudentInput<'_>) -> Result<ForwardPass> {
        let (fa, fv) = self.frontend_forward(input.audio, input.video)?;
        let t = fa.rows();
        if let Some(&bad) = input.mask_audio.iter().chain(input.mask_video).find(|&&i| i >= t) {
            return Err(Error::shape("mask index", format!("< {t}"), bad));
        }
        let p = &self.params;
        let mut ma = apply_mask(&fa, input.mask_audio, &p.mask_audio);
        let mut mv = apply_mask(&fv, input.mask_video, &p.mask_video);
        if !input.modality.keeps_audio() {
            ma = Tensor::zeros(ma.shape());
        }
        if !input.modality.keeps_video() {
            mv = Tensor::zeros(mv.shape());
        }
        let x0 = Tensor::concat_cols(&ma, &mv)?;

        let mut x = linear(&x0, &p.in_w, &p.in_b);
        if self.config.positional_encoding {
            x.axpy(1.0, &positional_encoding(t, self.config.encoder_dim))?;
        }
        let mut states = vec![x.clone()];
        let mut blocks = Vec::with_capacity(p.blocks.len());
        for b in &p.blocks {
            let (y, cache) = block_forward(b, &x, self.config.num_heads);
            blocks.push(cache);
            states.push(y.clone());
            x = y;
        }
        let (output, final_ln) = layer_norm(&x, &p.final_gain, &p.final_bias);
        Ok(ForwardPass {
            audio: input.audio.clone(),
            video: input.video.clone(),
            fa,
            fv,
            mask_audio: input.mask_audio.to_vec(),
            mask_video: input.mask_video.to_vec(),
            modality: input.modality,
            x0,
            blocks,
            final_ln,
            states,
            output,
        })
    }

    /// Gradients of every backbone parameter given `dL/dO`. Head entries are zero.
    pub fn backward(&self, pass: &ForwardPass, d_output: &Tensor) -> Result<StudentParams> {
        if d_output.shape() != pass.output.shape() {
            return Err(Error::shape(
                "backward",
                format!("{:?}", pass.output.shape()),
                format!("{:?}", d_output.shape()),
            ));
        }
        let p = &self.params;
        let mut grad = p.zeros_like();
        let mut dx = layer_norm_backward(
            d_output,
            &p.final_gain,
            &pass.final_ln,
            &mut grad.final_gain,
            &mut grad.final_bias,
        );
        for (b, (block, cache)) in p.blocks.iter().zip(&pass.blocks).enumerate().rev() {
            dx = block_backward(block, cache, &dx, self.config.num_heads, &mut grad.blocks[b]);
        }

        grad.in_w = pass.x0.matmul_tn(&dx)?;
        grad.in_b = dx.sum_rows();
        let dx0 = dx.matmul_nt(&p.in_w)?;
        let df = self.config.frontend_dim;

        let streams = [
            (
                pass.modality.keeps_audio(),
                dx0.columns(0, df),
                &pass.mask_audio,
                &pass.fa,
                &pass.audio,
            ),
            (
                pass.modality.keeps_video(),
                dx0.columns(df, df),
                &pass.mask_video,
                &pass.fv,
                &pass.video,
            ),
        ];
        for (s, (kept, mut dfeat, mask, feat, raw)) in streams.into_iter().enumerate() {
            if !kept {
                continue;
            }
            let mut demb = Tensor::zeros(&[df]);
            for &i in mask.iter() {
                for (e, &g) in demb.data_mut().iter_mut().zip(dfeat.row(i)) {
                    *e += g;
                }
                dfeat.row_mut(i).fill(0.0);
            }
            let dz = dfeat.mul(&feat.map(|y| 1.0 - y * y))?;
            let dw = raw.matmul_tn(&dz)?;
            let db = dz.sum_rows();
            if s == 0 {
                grad.mask_audio = demb;
                grad.audio_w = dw;
                grad.audio_b = db;
            } else {
                grad.mask_video = demb;
                grad.video_w = dw;
                grad.video_b = db;
            }
        }
        Ok(grad)
    }

    /// Runs [`forward`](Self::forward) and keeps the pass for [`backward_cached`](Self::backward_cached).
    pub fn forward_cached(&mut self, input: StudentInput<'_>) -> Result<&Tensor> {
        let pass = self.forward(input)?;
        Ok(&self.last_pass.insert(pass).output)
    }

    pub fn backward_cached(&self, d_output: &Tensor) -> Result<StudentParams> {
        let pass = self.last_pass.as_ref().ok_or(Error::NoForwardCache)?;
        self.backward(pass, d_output)
    }

    pub fn clear_cache(&mut self) {
        self.last_pass = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradient;
    use crate::student::HeadSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(pe: bool) -> StudentConfig {
        StudentConfig {
            audio_dim: 5,
            video_dim: 4,
            frontend_dim: 6,
            encoder_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            ff_dim: 12,
            positional_encoding: pe,
            heads: vec![HeadSpec {
                teacher_dim: 3,
                frame_rate_ratio: 1,
                num_clusters: 4,
                label_dim: 3,
            }],
            seed: 3,
            ..Default::default()
        }
    }

    fn inputs(t: usize, seed: u64) -> (Tensor, Tensor) {
        let mut g = ChaCha8Rng::seed_from_u64(seed);
        (Tensor::randn(&[t, 5], 1.0, &mut g), Tensor::randn(&[t, 4], 1.0, &mut g))
    }

    fn probe_loss(model: &StudentModel, input: StudentInput<'_>, w: &Tensor) -> f64 {
        model.forward(input).unwrap().output.mul(w).unwrap().sum()
    }

    #[test]
    fn shapes_and_zero_input() {
        let m = StudentModel::new(tiny(true)).unwrap();
        let z = (Tensor::zeros(&[6, 5]), Tensor::zeros(&[6, 4]));
        let pass = m.forward(StudentInput::clean(&z.0, &z.1)).unwrap();
        assert_eq!(pass.output.shape(), &[6, 8]);
        assert_eq!(pass.states.len(), 2);
        assert!(pass.output.is_finite());
        assert!(m.frontend_forward(&z.1, &z.1).is_err());
    }

    #[test]
    fn frontend_linearity() {
        let mut m = StudentModel::new(tiny(true)).unwrap();
        let (a, v) = inputs(3, 1);
        m.params.audio_b = Tensor::zeros(&[6]);
        m.params.video_b = Tensor::zeros(&[6]);
        let (fa0, fv0) = m.frontend_forward(&Tensor::zeros(&[3, 5]), &Tensor::zeros(&[3, 4])).unwrap();
        assert_eq!(fa0.sum(), 0.0);
        assert_eq!(fv0.sum(), 0.0);
        let (fa, _) = m.frontend_forward(&a, &v).unwrap();
        let (fa2, _) = m.frontend_forward(&a.scale(2.0), &v).unwrap();
        let pre = |f: &Tensor| f.map(f64::atanh);
        assert!(pre(&fa2).max_abs_diff(&pre(&fa).scale(2.0)) < 1e-9);
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let m = StudentModel::new(tiny(false)).unwrap();
        let (a, v) = inputs(5, 2);
        let perm = [3, 0, 4, 1, 2];
        let permute = |x: &Tensor| {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.row(i).to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let o = m.forward(StudentInput::clean(&a, &v)).unwrap().output;
        let (pa, pv) = (permute(&a), permute(&v));
        let po = m.forward(StudentInput::clean(&pa, &pv)).unwrap().output;
        assert!(po.max_abs_diff(&permute(&o)) < 1e-12);

        let again = m.forward(StudentInput::clean(&a, &v)).unwrap().output;
        assert_eq!(again, o);
    }

    #[test]
    fn backward_requires_forward() {
        let mut m = StudentModel::new(tiny(true)).unwrap();
        assert!(matches!(
            m.backward_cached(&Tensor::zeros(&[4, 8])),
            Err(Error::NoForwardCache)
        ));
        let (a, v) = inputs(4, 3);
        m.forward_cached(StudentInput::clean(&a, &v)).unwrap();
        let g = m.backward_cached(&Tensor::zeros(&[4, 8])).unwrap();
        assert_eq!(g.checksum(), 0.0);
        assert!(g.named().iter().all(|(_, t)| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        let model = StudentModel::new(tiny(true)).unwrap();
        let (a, v) = inputs(4, 5);
        let mut g = ChaCha8Rng::seed_from_u64(8);
        let w = Tensor::randn(&[4, 8], 1.0, &mut g);
        for modality in Modality::ALL {
            let input = StudentInput {
                audio: &a,
                video: &v,
                mask_audio: &[1, 2],
                mask_video: &[3],
                modality,
            };
            let pass = model.forward(input).unwrap();
            let grads = model.backward(&pass, &w).unwrap();
            for (name, analytic) in grads.backbone() {
                let f = |x: &Tensor| {
                    let mut m = model.clone();
                    let slot = m.params.backbone_mut().into_iter().find(|(n, _)| *n == name).unwrap().1;
                    *slot = x.clone();
                    probe_loss(&m, input, &w)
                };
                let current = model.params.backbone().into_iter().find(|(n, _)| *n == name).unwrap().1;
                let err = check_gradient(f, current, analytic);
                assert!(err < 1e-4, "{modality:?} {name}: {err}");
            }
            if modality == Modality::VideoOnly {
                assert_eq!(grads.audio_w.sum(), 0.0);
                assert_eq!(grads.mask_audio.sum(), 0.0);
                assert!(grads.video_w.norm() > 0.0);
            }
        }
    }
}
